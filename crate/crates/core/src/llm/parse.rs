//! Validation of model answers.
//!
//! Models are asked for a bare JSON object but often wrap it in prose or a
//! markdown fence. The first complete JSON object in the text is taken and
//! checked against the expected schema; anything else is a `ParseFailure`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::rubric::Rubric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseFailureReason {
    NoJsonFound,
    BadSchema,
    GradeOutOfRange,
    GradeNotInteger,
    UnknownItem,
    MissingItem,
    DuplicateItem,
}

impl ParseFailureReason {
    pub fn code(self) -> &'static str {
        match self {
            ParseFailureReason::NoJsonFound => "no-json-found",
            ParseFailureReason::BadSchema => "bad-schema",
            ParseFailureReason::GradeOutOfRange => "grade-out-of-range",
            ParseFailureReason::GradeNotInteger => "grade-not-integer",
            ParseFailureReason::UnknownItem => "unknown-item",
            ParseFailureReason::MissingItem => "missing-item",
            ParseFailureReason::DuplicateItem => "duplicate-item",
        }
    }
}

impl fmt::Display for ParseFailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub reason: ParseFailureReason,
    pub detail: String,
}

impl ParseFailure {
    fn new(reason: ParseFailureReason, detail: impl Into<String>) -> Self {
        Self {
            reason,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.reason, self.detail)
    }
}

impl std::error::Error for ParseFailure {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeResult {
    pub grade: u8,
    pub feedback: String,
    pub raw_response: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricResult {
    pub selections: BTreeMap<u32, bool>,
    pub feedback: String,
    pub raw_response: String,
    pub attempts: u32,
}

/// Finds the first complete JSON object in `raw`, skipping prose, fences
/// and brace-like text that is not valid JSON.
pub fn extract_first_json_object(raw: &str) -> Option<Map<String, Value>> {
    raw.char_indices().filter(|&(_, c)| c == '{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

fn feedback_field(obj: &Map<String, Value>) -> Result<String, ParseFailure> {
    match obj.get("feedback") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(ParseFailure::new(
            ParseFailureReason::BadSchema,
            format!("\"feedback\" must be a string, got {other}"),
        )),
        None => Err(ParseFailure::new(ParseFailureReason::BadSchema, "missing \"feedback\"")),
    }
}

/// Parses `{"grade": <int 0..=100>, "feedback": <string>}`.
pub fn parse_grade_response(raw: &str) -> Result<GradeResult, ParseFailure> {
    let obj = extract_first_json_object(raw)
        .ok_or_else(|| ParseFailure::new(ParseFailureReason::NoJsonFound, "no JSON object in response"))?;
    let grade = match obj.get("grade") {
        Some(Value::Number(n)) => n,
        Some(other) => {
            return Err(ParseFailure::new(
                ParseFailureReason::BadSchema,
                format!("\"grade\" must be a number, got {other}"),
            ))
        }
        None => return Err(ParseFailure::new(ParseFailureReason::BadSchema, "missing \"grade\"")),
    };
    let feedback = feedback_field(&obj)?;
    let value = if let Some(i) = grade.as_i64() {
        i
    } else if let Some(u) = grade.as_u64() {
        i64::try_from(u).unwrap_or(i64::MAX)
    } else {
        let f = grade.as_f64().unwrap_or(f64::NAN);
        if f.fract() != 0.0 || !f.is_finite() {
            return Err(ParseFailure::new(
                ParseFailureReason::GradeNotInteger,
                format!("grade {grade} is not an integer"),
            ));
        }
        if f < i64::MIN as f64 || f > i64::MAX as f64 {
            return Err(ParseFailure::new(
                ParseFailureReason::GradeOutOfRange,
                format!("grade {grade} outside [0, 100]"),
            ));
        }
        f as i64
    };
    if !(0..=100).contains(&value) {
        return Err(ParseFailure::new(
            ParseFailureReason::GradeOutOfRange,
            format!("grade {value} outside [0, 100]"),
        ));
    }
    Ok(GradeResult {
        grade: value as u8,
        feedback,
        raw_response: raw.to_owned(),
        attempts: 1,
    })
}

/// Parses `{"feedback": <string>, "rubric_items": [{"name", "selected"}, ...]}`.
///
/// Names are matched to rubric items ignoring case and whitespace runs.
/// Invented, repeated or missing items are rejected.
pub fn parse_rubric_response(raw: &str, rubric: &Rubric) -> Result<RubricResult, ParseFailure> {
    let obj = extract_first_json_object(raw)
        .ok_or_else(|| ParseFailure::new(ParseFailureReason::NoJsonFound, "no JSON object in response"))?;
    let feedback = feedback_field(&obj)?;
    let items = match obj.get("rubric_items") {
        Some(Value::Array(items)) => items,
        Some(other) => {
            return Err(ParseFailure::new(
                ParseFailureReason::BadSchema,
                format!("\"rubric_items\" must be a list, got {other}"),
            ))
        }
        None => {
            return Err(ParseFailure::new(
                ParseFailureReason::BadSchema,
                "missing \"rubric_items\"",
            ))
        }
    };

    let mut selections = BTreeMap::new();
    for entry in items {
        let (name, selected) = match entry {
            Value::Object(m) => match (m.get("name"), m.get("selected")) {
                (Some(Value::String(n)), Some(Value::Bool(b))) => (n, *b),
                _ => {
                    return Err(ParseFailure::new(
                        ParseFailureReason::BadSchema,
                        format!("rubric item needs string \"name\" and boolean \"selected\": {entry}"),
                    ))
                }
            },
            _ => {
                return Err(ParseFailure::new(
                    ParseFailureReason::BadSchema,
                    format!("rubric item must be an object: {entry}"),
                ))
            }
        };
        let item = rubric.find_by_name(name).ok_or_else(|| {
            ParseFailure::new(ParseFailureReason::UnknownItem, format!("unknown rubric item {name:?}"))
        })?;
        if selections.insert(item.number, selected).is_some() {
            return Err(ParseFailure::new(
                ParseFailureReason::DuplicateItem,
                format!("rubric item {:?} returned more than once", item.name),
            ));
        }
    }
    let missing: Vec<&str> = rubric
        .items
        .iter()
        .filter(|i| !selections.contains_key(&i.number))
        .map(|i| i.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(ParseFailure::new(
            ParseFailureReason::MissingItem,
            format!("missing rubric items {missing:?}"),
        ));
    }
    Ok(RubricResult {
        selections,
        feedback,
        raw_response: raw.to_owned(),
        attempts: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ParseFailureReason::*;

    fn reason(raw: &str) -> ParseFailureReason {
        parse_grade_response(raw).unwrap_err().reason
    }

    #[test]
    fn plain_grade() {
        let r = parse_grade_response(r#"{"grade": 85, "feedback": "Good"}"#).unwrap();
        assert_eq!((r.grade, r.feedback.as_str(), r.attempts), (85, "Good", 1));
    }

    #[test]
    fn fenced_grade() {
        let r = parse_grade_response("```json\n{\"grade\":0,\"feedback\":\"\"}\n```").unwrap();
        assert_eq!((r.grade, r.feedback.as_str()), (0, ""));
    }

    #[test]
    fn grade_failures() {
        assert_eq!(reason(r#"{"grade": 120, "feedback": "x"}"#), GradeOutOfRange);
        assert_eq!(reason(r#"{"grade": -1, "feedback": "x"}"#), GradeOutOfRange);
        assert_eq!(reason(r#"{"grade": 1e300, "feedback": "x"}"#), GradeOutOfRange);
        assert_eq!(
            reason(r#"{"grade": 18446744073709551615, "feedback": "x"}"#),
            GradeOutOfRange
        );
        assert_eq!(reason(r#"{"grade": 72.5, "feedback": "x"}"#), GradeNotInteger);
        assert_eq!(reason(r#"{"grade": "80", "feedback": "x"}"#), BadSchema);
        assert_eq!(reason(r#"{"grade": 80}"#), BadSchema);
        assert_eq!(reason(r#"{"grade": 80, "feedback": 3}"#), BadSchema);
        assert_eq!(reason("The grade is 80."), NoJsonFound);
        assert_eq!(reason(r#"{"grade": 80, "feedback": "x""#), NoJsonFound);
    }

    #[test]
    fn integral_float_grade_accepted() {
        assert_eq!(
            parse_grade_response(r#"{"grade": 90.0, "feedback": ""}"#)
                .unwrap()
                .grade,
            90
        );
    }

    #[test]
    fn first_complete_object_wins() {
        let raw = r#"Scoring {as requested}: {"grade": 40, "feedback": "a"} and {"grade": 99, "feedback": "b"}"#;
        assert_eq!(parse_grade_response(raw).unwrap().grade, 40);
        let nested = r#"{"result": {"grade": 40}, "grade": 50, "feedback": "outer"}"#;
        assert_eq!(parse_grade_response(nested).unwrap().grade, 50);
    }

    fn rubric_json(names: &[(&str, bool)]) -> String {
        let items: Vec<Value> = names
            .iter()
            .map(|(n, s)| serde_json::json!({"name": n, "selected": s}))
            .collect();
        serde_json::json!({"feedback": "ok", "rubric_items": items}).to_string()
    }

    fn induction_names() -> Vec<String> {
        Rubric::induction().items.iter().map(|i| i.name.clone()).collect()
    }

    #[test]
    fn rubric_all_items() {
        let names = induction_names();
        let pairs: Vec<(&str, bool)> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i < 3)).collect();
        let r = parse_rubric_response(&rubric_json(&pairs), &Rubric::induction()).unwrap();
        assert_eq!(r.selections.values().filter(|v| **v).count(), 3);
        assert_eq!(
            r.selections.keys().copied().collect::<Vec<_>>(),
            (1..=7).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rubric_names_match_loosely() {
        let names = induction_names();
        let pairs: Vec<(String, bool)> = names
            .iter()
            .map(|n| (format!("  {}  ", n.to_uppercase().replace(' ', "   ")), true))
            .collect();
        let pairs: Vec<(&str, bool)> = pairs.iter().map(|(n, b)| (n.as_str(), *b)).collect();
        assert!(parse_rubric_response(&rubric_json(&pairs), &Rubric::induction()).is_ok());
    }

    #[test]
    fn rubric_failures() {
        let rubric = Rubric::induction();
        let names = induction_names();
        let mut pairs: Vec<(&str, bool)> = names.iter().map(|n| (n.as_str(), true)).collect();

        let mut invented = pairs.clone();
        invented.push(("Checking the conclusion", true));
        assert_eq!(
            parse_rubric_response(&rubric_json(&invented), &rubric)
                .unwrap_err()
                .reason,
            UnknownItem
        );

        let mut dup = pairs.clone();
        dup.push((names[0].as_str(), false));
        assert_eq!(
            parse_rubric_response(&rubric_json(&dup), &rubric).unwrap_err().reason,
            DuplicateItem
        );

        pairs.pop();
        let err = parse_rubric_response(&rubric_json(&pairs), &rubric).unwrap_err();
        assert_eq!(err.reason, MissingItem);
        assert!(err.detail.contains("Applying the inductive hypothesis"));

        assert_eq!(
            parse_rubric_response(r#"{"feedback": "x", "rubric_items": {"a": true}}"#, &rubric)
                .unwrap_err()
                .reason,
            BadSchema
        );
        assert_eq!(
            parse_rubric_response(r#"{"rubric_items": []}"#, &rubric)
                .unwrap_err()
                .reason,
            BadSchema
        );
        assert_eq!(
            parse_rubric_response(
                r#"{"feedback": "x", "rubric_items": [{"name": "Proving the base case(s)", "selected": "yes"}]}"#,
                &rubric
            )
            .unwrap_err()
            .reason,
            BadSchema
        );
        assert_eq!(
            parse_rubric_response("nothing here", &rubric).unwrap_err().reason,
            NoJsonFound
        );
    }

    #[test]
    fn reason_codes_serialize_kebab() {
        assert_eq!(
            serde_json::to_string(&GradeOutOfRange).unwrap(),
            "\"grade-out-of-range\""
        );
        assert_eq!(GradeNotInteger.to_string(), "grade-not-integer");
    }
}
