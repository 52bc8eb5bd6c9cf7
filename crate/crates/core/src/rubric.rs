//! Rubric definitions.
//!
//! A rubric is an ordered list of binary criteria. Each item carries a
//! stable number used in gold labels and run records, a short name shown
//! to students (and matched against model output), a longer explanation
//! for the grader, and a weight used when converting selections to a score.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The seven-item rubric for proofs by mathematical induction.
pub const INDUCTION_RUBRIC_JSON: &str = include_str!("../assets/rubrics/induction.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RubricError {
    #[error("rubric has no items")]
    Empty,
    #[error("rubric item numbers must be 1..={expected_max} without gaps or repeats, got {numbers:?}")]
    Numbering { expected_max: usize, numbers: Vec<u32> },
    #[error("rubric item {0} has an empty name")]
    EmptyName(u32),
    #[error("rubric items {0} and {1} have the same name after normalization")]
    DuplicateName(u32, u32),
    #[error("rubric item {number} has invalid weight {weight}")]
    BadWeight { number: u32, weight: f64 },
    #[error("rubric weights are all zero")]
    ZeroWeights,
    #[error("invalid rubric JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricItem {
    pub number: u32,
    pub name: String,
    pub explanation: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub items: Vec<RubricItem>,
}

impl Rubric {
    /// Builds a rubric and checks its invariants.
    pub fn new(items: Vec<RubricItem>) -> Result<Self, RubricError> {
        let rubric = Self { items };
        rubric.validate()?;
        Ok(rubric)
    }

    /// The bundled induction-proof rubric (R1..R7, equal weights).
    pub fn induction() -> Self {
        Self::from_json(INDUCTION_RUBRIC_JSON).expect("bundled rubric is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, RubricError> {
        let rubric: Rubric = serde_json::from_str(text).map_err(|e| RubricError::Json(e.to_string()))?;
        rubric.validate()?;
        Ok(rubric)
    }

    pub fn validate(&self) -> Result<(), RubricError> {
        if self.items.is_empty() {
            return Err(RubricError::Empty);
        }
        let numbers: BTreeSet<u32> = self.items.iter().map(|i| i.number).collect();
        let n = self.items.len();
        let contiguous = numbers.len() == n && numbers.first() == Some(&1) && numbers.last() == Some(&(n as u32));
        if !contiguous {
            return Err(RubricError::Numbering {
                expected_max: n,
                numbers: self.items.iter().map(|i| i.number).collect(),
            });
        }
        for (idx, item) in self.items.iter().enumerate() {
            if item.name.trim().is_empty() {
                return Err(RubricError::EmptyName(item.number));
            }
            if !item.weight.is_finite() || item.weight < 0.0 {
                return Err(RubricError::BadWeight {
                    number: item.number,
                    weight: item.weight,
                });
            }
            let key = normalize_name(&item.name);
            if let Some(other) = self.items[..idx].iter().find(|o| normalize_name(&o.name) == key) {
                return Err(RubricError::DuplicateName(other.number, item.number));
            }
        }
        if self.items.iter().all(|i| i.weight == 0.0) {
            return Err(RubricError::ZeroWeights);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn numbers(&self) -> impl Iterator<Item = u32> + '_ {
        self.items.iter().map(|i| i.number)
    }

    /// Looks up an item by display name, ignoring case and runs of whitespace.
    pub fn find_by_name(&self, name: &str) -> Option<&RubricItem> {
        let key = normalize_name(name);
        self.items.iter().find(|i| normalize_name(&i.name) == key)
    }

    /// Returns a copy with all weights set to 1.
    pub fn with_equal_weights(&self) -> Self {
        let mut out = self.clone();
        for item in &mut out.items {
            item.weight = 1.0;
        }
        out
    }
}

/// Lowercases and collapses whitespace so that `"  Proving the  Base case(s)"`
/// matches `"proving the base case(s)"`.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}
