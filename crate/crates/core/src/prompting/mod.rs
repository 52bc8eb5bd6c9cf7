//! Grading prompt assembly.
//!
//! A prompt has four components in a fixed order: course-independent
//! instructions, the question, zero or more graded examples, and the
//! response to grade. The rubric variant adds the rubric between the
//! question and the examples and asks for one binary decision per item.
//! Reference solutions are never placed in a prompt.

pub mod template;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{Question, Submission};
use crate::rubric::Rubric;
pub use template::{Template, TemplateError};

pub const DEFAULT_TEMPLATE_ID: &str = "v1";

/// Placeholders of the layout templates, in the required order.
pub const COMPONENTS: [&str; 4] = ["instructions", "question", "examples", "submission"];

/// Opening tag of every example block in the bundled templates.
pub const EXAMPLE_BLOCK_TAG: &str = "<example>";

const LAYOUT_PLACEHOLDERS: &[&str] = &["instructions", "question", "examples", "submission", "rubric"];
const EXAMPLE_PLACEHOLDERS: &[&str] = &["response", "grade", "feedback"];
const RUBRIC_EXAMPLE_PLACEHOLDERS: &[&str] = &["response", "selections", "feedback"];

mod v1 {
    pub const INSTRUCTIONS: &str = include_str!("../../assets/templates/v1/instructions.txt");
    pub const RUBRIC_INSTRUCTIONS: &str = include_str!("../../assets/templates/v1/rubric_instructions.txt");
    pub const GRADING_LAYOUT: &str = include_str!("../../assets/templates/v1/grading_layout.txt");
    pub const RUBRIC_LAYOUT: &str = include_str!("../../assets/templates/v1/rubric_layout.txt");
    pub const EXAMPLE: &str = include_str!("../../assets/templates/v1/example.txt");
    pub const RUBRIC_EXAMPLE: &str = include_str!("../../assets/templates/v1/rubric_example.txt");
    pub const NO_EXAMPLES: &str = include_str!("../../assets/templates/v1/no_examples.txt");
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {file}: {source}")]
    Template {
        file: String,
        #[source]
        source: TemplateError,
    },
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("template {file} must state the output contract (missing {needle})")]
    MissingContract { file: String, needle: String },
    #[error("cannot read template file {path}: {message}")]
    Io { path: String, message: String },
    #[error("target submission {0} has an empty response")]
    EmptyTarget(String),
    #[error("example {submission_id} lacks rubric labels matching the rubric")]
    MissingRubricLabels { submission_id: String },
}

/// Raw text of every template file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSources {
    pub id: String,
    pub instructions: String,
    pub rubric_instructions: String,
    pub grading_layout: String,
    pub rubric_layout: String,
    pub example_block: String,
    pub rubric_example_block: String,
    pub no_examples: String,
}

impl TemplateSources {
    pub fn builtin(id: &str) -> Result<Self, PromptError> {
        match id {
            "v1" => Ok(Self {
                id: id.into(),
                instructions: v1::INSTRUCTIONS.into(),
                rubric_instructions: v1::RUBRIC_INSTRUCTIONS.into(),
                grading_layout: v1::GRADING_LAYOUT.into(),
                rubric_layout: v1::RUBRIC_LAYOUT.into(),
                example_block: v1::EXAMPLE.into(),
                rubric_example_block: v1::RUBRIC_EXAMPLE.into(),
                no_examples: v1::NO_EXAMPLES.into(),
            }),
            other => Err(PromptError::UnknownTemplate(other.into())),
        }
    }

    /// Reads a template directory laid out like `assets/templates/v1`.
    /// The directory name becomes the template id.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        };
        Ok(Self {
            id: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string()),
            instructions: read("instructions.txt")?,
            rubric_instructions: read("rubric_instructions.txt")?,
            grading_layout: read("grading_layout.txt")?,
            rubric_layout: read("rubric_layout.txt")?,
            example_block: read("example.txt")?,
            rubric_example_block: read("rubric_example.txt")?,
            no_examples: read("no_examples.txt")?,
        })
    }
}

/// A validated, ready-to-render prompt template.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    id: String,
    instructions_text: String,
    rubric_instructions_text: String,
    grading_layout: Template,
    rubric_layout: Template,
    example_block: Template,
    rubric_example_block: Template,
    no_examples: String,
}

impl PromptTemplate {
    pub fn new(src: TemplateSources) -> Result<Self, PromptError> {
        let parse = |file: &str, text: &str, allowed: &[&str]| {
            Template::parse(text, allowed).map_err(|source| PromptError::Template {
                file: file.into(),
                source,
            })
        };
        let check = |file: &str, t: &Template, required: &[&str], ordered: &[&str]| {
            t.require(required, ordered).map_err(|source| PromptError::Template {
                file: file.into(),
                source,
            })
        };

        let grading_layout = parse("grading_layout", &src.grading_layout, &COMPONENTS)?;
        check("grading_layout", &grading_layout, &COMPONENTS, &COMPONENTS)?;
        let rubric_layout = parse("rubric_layout", &src.rubric_layout, LAYOUT_PLACEHOLDERS)?;
        check("rubric_layout", &rubric_layout, LAYOUT_PLACEHOLDERS, &COMPONENTS)?;
        let example_block = parse(
            "example",
            src.example_block.trim_end_matches('\n'),
            EXAMPLE_PLACEHOLDERS,
        )?;
        check("example", &example_block, &["response", "grade"], &[])?;
        let rubric_example_block = parse(
            "rubric_example",
            src.rubric_example_block.trim_end_matches('\n'),
            RUBRIC_EXAMPLE_PLACEHOLDERS,
        )?;
        check(
            "rubric_example",
            &rubric_example_block,
            &["response", "selections"],
            &[],
        )?;

        for needle in ["\"grade\"", "\"feedback\"", "0 and 100"] {
            if !src.instructions.contains(needle) {
                return Err(PromptError::MissingContract {
                    file: "instructions".into(),
                    needle: needle.into(),
                });
            }
        }
        for needle in ["\"feedback\"", "\"rubric_items\"", "\"selected\""] {
            if !src.rubric_instructions.contains(needle) {
                return Err(PromptError::MissingContract {
                    file: "rubric_instructions".into(),
                    needle: needle.into(),
                });
            }
        }

        Ok(Self {
            id: src.id,
            instructions_text: src.instructions.trim_end().to_owned(),
            rubric_instructions_text: src.rubric_instructions.trim_end().to_owned(),
            grading_layout,
            rubric_layout,
            example_block,
            rubric_example_block,
            no_examples: src.no_examples.trim_end().to_owned(),
        })
    }

    pub fn builtin(id: &str) -> Result<Self, PromptError> {
        Self::new(TemplateSources::builtin(id)?)
    }

    /// Resolves a bundled template id, or else a directory path.
    pub fn resolve(id_or_dir: &str) -> Result<Self, PromptError> {
        match TemplateSources::builtin(id_or_dir) {
            Ok(src) => Self::new(src),
            Err(PromptError::UnknownTemplate(_)) if Path::new(id_or_dir).is_dir() => {
                Self::new(TemplateSources::from_dir(Path::new(id_or_dir))?)
            }
            Err(e) => Err(e),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn instructions_text(&self) -> &str {
        &self.instructions_text
    }

    pub fn rubric_instructions_text(&self) -> &str {
        &self.rubric_instructions_text
    }

    /// Text that stands in for the examples component when there are none.
    pub fn no_examples_marker(&self) -> &str {
        &self.no_examples
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::builtin(DEFAULT_TEMPLATE_ID).expect("bundled template is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.offset..self.end()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub text: String,
    /// Byte spans of instructions, question, examples and submission.
    pub component_spans: [Span; 4],
    /// Byte span of the rubric listing (rubric prompts only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric_span: Option<Span>,
    pub example_ids: Vec<String>,
}

impl AssembledPrompt {
    pub fn component(&self, index: usize) -> &str {
        self.component_spans[index].slice(&self.text)
    }

    pub fn instructions(&self) -> &str {
        self.component(0)
    }

    pub fn question(&self) -> &str {
        self.component(1)
    }

    pub fn examples(&self) -> &str {
        self.component(2)
    }

    pub fn submission(&self) -> &str {
        self.component(3)
    }
}

/// A graded example for the scalar prompt.
#[derive(Debug, Clone, Copy)]
pub struct GradedExample<'a> {
    pub submission: &'a Submission,
    pub grade_percent: f64,
    pub feedback: Option<&'a str>,
}

impl<'a> GradedExample<'a> {
    pub fn from_gold(submission: &'a Submission) -> Self {
        Self {
            submission,
            grade_percent: submission.gold_percent,
            feedback: submission.feedback.as_deref(),
        }
    }
}

/// A graded example for the rubric prompt.
#[derive(Debug, Clone, Copy)]
pub struct RubricExample<'a> {
    pub submission: &'a Submission,
    pub items: Option<&'a BTreeMap<u32, bool>>,
    pub feedback: Option<&'a str>,
}

impl<'a> RubricExample<'a> {
    pub fn from_gold(submission: &'a Submission) -> Self {
        Self {
            submission,
            items: submission.gold_items.as_ref(),
            feedback: submission.feedback.as_deref(),
        }
    }
}

/// Integer grade shown in example blocks.
pub fn display_grade(percent: f64) -> i64 {
    percent.round().clamp(0.0, 100.0) as i64
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn check_target(target: &Submission) -> Result<(), PromptError> {
    if target.response_text.trim().is_empty() {
        return Err(PromptError::EmptyTarget(target.submission_id.clone()));
    }
    Ok(())
}

fn assemble(
    layout: &Template,
    values: BTreeMap<&str, &str>,
    example_ids: Vec<String>,
) -> Result<AssembledPrompt, PromptError> {
    let (text, spans) = layout.render(&values).map_err(|source| PromptError::Template {
        file: "layout".into(),
        source,
    })?;
    let span = |name: &str| {
        let (offset, len) = spans[name];
        Span { offset, len }
    };
    Ok(AssembledPrompt {
        component_spans: COMPONENTS.map(span),
        rubric_span: spans.contains_key("rubric").then(|| span("rubric")),
        text,
        example_ids,
    })
}

/// Builds the scalar grading prompt.
pub fn build_grading_prompt(
    template: &PromptTemplate,
    question: &Question,
    examples: &[GradedExample<'_>],
    target: &Submission,
) -> Result<AssembledPrompt, PromptError> {
    check_target(target)?;
    let blocks = examples
        .iter()
        .map(|ex| {
            let grade = display_grade(ex.grade_percent).to_string();
            let feedback = json_string(ex.feedback.unwrap_or(""));
            let values = BTreeMap::from([
                ("response", ex.submission.response_text.as_str()),
                ("grade", grade.as_str()),
                ("feedback", feedback.as_str()),
            ]);
            template
                .example_block
                .fill(&values)
                .map_err(|source| PromptError::Template {
                    file: "example".into(),
                    source,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let examples_text = if blocks.is_empty() {
        template.no_examples.clone()
    } else {
        blocks.join("\n\n")
    };
    let values = BTreeMap::from([
        ("instructions", template.instructions_text.as_str()),
        ("question", question.prompt_text.as_str()),
        ("examples", examples_text.as_str()),
        ("submission", target.response_text.as_str()),
    ]);
    let ids = examples.iter().map(|e| e.submission.submission_id.clone()).collect();
    assemble(&template.grading_layout, values, ids)
}

/// Lists rubric items with number, name and explanation.
pub fn render_rubric(rubric: &Rubric) -> String {
    rubric
        .items
        .iter()
        .map(|item| format!("Item {}: {}\nExplanation: {}", item.number, item.name, item.explanation))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Builds the rubric grading prompt.
pub fn build_rubric_prompt(
    template: &PromptTemplate,
    question: &Question,
    rubric: &Rubric,
    examples: &[RubricExample<'_>],
    target: &Submission,
) -> Result<AssembledPrompt, PromptError> {
    check_target(target)?;
    let blocks = examples
        .iter()
        .map(|ex| {
            let items = ex
                .items
                .filter(|items| items.len() == rubric.len() && rubric.numbers().all(|n| items.contains_key(&n)))
                .ok_or_else(|| PromptError::MissingRubricLabels {
                    submission_id: ex.submission.submission_id.clone(),
                })?;
            let selections: Vec<_> = rubric
                .items
                .iter()
                .map(|item| json!({"name": item.name, "selected": items[&item.number]}))
                .collect();
            let selections = serde_json::to_string(&selections).expect("json serializes");
            let feedback = json_string(ex.feedback.unwrap_or(""));
            let values = BTreeMap::from([
                ("response", ex.submission.response_text.as_str()),
                ("selections", selections.as_str()),
                ("feedback", feedback.as_str()),
            ]);
            template
                .rubric_example_block
                .fill(&values)
                .map_err(|source| PromptError::Template {
                    file: "rubric_example".into(),
                    source,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let examples_text = if blocks.is_empty() {
        template.no_examples.clone()
    } else {
        blocks.join("\n\n")
    };
    let rubric_text = render_rubric(rubric);
    let values = BTreeMap::from([
        ("instructions", template.rubric_instructions_text.as_str()),
        ("question", question.prompt_text.as_str()),
        ("rubric", rubric_text.as_str()),
        ("examples", examples_text.as_str()),
        ("submission", target.response_text.as_str()),
    ]);
    let ids = examples.iter().map(|e| e.submission.submission_id.clone()).collect();
    assemble(&template.rubric_layout, values, ids)
}
