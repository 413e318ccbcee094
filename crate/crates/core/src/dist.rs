//! Sparse top-k step distributions and the per-sequence distribution matrix.
//!
//! Files are JSON lines, one sequence per line, with a fixed field order and
//! shortest round-trip float formatting so re-serialization is byte-stable.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// Tolerance on the total mass of a probability step.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Logits,
    Probabilities,
}

/// One step's retained window: parallel token ids and values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution {
    #[serde(rename = "idx")]
    pub indices: Vec<TokenId>,
    #[serde(rename = "val")]
    pub values: Vec<f64>,
    pub kind: ValueKind,
}

impl StepDistribution {
    pub fn new(indices: Vec<TokenId>, values: Vec<f64>, kind: ValueKind) -> Self {
        Self {
            indices,
            values,
            kind,
        }
    }

    pub fn logits(indices: Vec<TokenId>, values: Vec<f64>) -> Self {
        Self::new(indices, values, ValueKind::Logits)
    }

    pub fn probabilities(indices: Vec<TokenId>, values: Vec<f64>) -> Self {
        Self::new(indices, values, ValueKind::Probabilities)
    }

    pub fn one_hot(id: TokenId) -> Self {
        Self::probabilities(vec![id], vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn value_of(&self, id: TokenId) -> Option<f64> {
        self.indices
            .iter()
            .position(|&i| i == id)
            .map(|p| self.values[p])
    }

    /// Position of the largest value; ties go to the earliest entry.
    pub fn argmax_position(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (p, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|b| v > self.values[b]) {
                best = Some(p);
            }
        }
        best
    }

    pub fn argmax_id(&self) -> Option<TokenId> {
        self.argmax_position().map(|p| self.indices[p])
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Keeps the `k` largest entries, ordered by value descending
    /// (stable, so equal values keep their original order).
    pub fn top_k(&self, k: usize) -> StepDistribution {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&x, &y| self.values[y].total_cmp(&self.values[x]));
        order.truncate(k);
        StepDistribution {
            indices: order.iter().map(|&p| self.indices[p]).collect(),
            values: order.iter().map(|&p| self.values[p]).collect(),
            kind: self.kind,
        }
    }

    /// Converts to probabilities over the retained entries: softmax for
    /// logits, renormalization for probabilities.
    pub fn to_probabilities(&self) -> Result<StepDistribution> {
        match self.kind {
            ValueKind::Logits => softmax_step(self),
            ValueKind::Probabilities => renormalized(self),
        }
    }
}

/// Numerically stable softmax over the window.
pub fn softmax_step(step: &StepDistribution) -> Result<StepDistribution> {
    if step.is_empty() {
        return Err(Error::Empty("step distribution"));
    }
    if step.kind != ValueKind::Logits {
        return Err(Error::Invalid("softmax expects logits".into()));
    }
    let max = step
        .values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Invalid("non-finite logit".into()));
    }
    let exps: Vec<f64> = step.values.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(StepDistribution::probabilities(
        step.indices.clone(),
        exps.into_iter().map(|e| e / z).collect(),
    ))
}

pub(crate) fn renormalized(step: &StepDistribution) -> Result<StepDistribution> {
    if step.is_empty() {
        return Err(Error::Empty("step distribution"));
    }
    let z = step.total();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Invalid(format!("step mass {z} cannot be normalized")));
    }
    Ok(StepDistribution::probabilities(
        step.indices.clone(),
        step.values.iter().map(|v| v / z).collect(),
    ))
}

/// Per-step distributions over one vocabulary plus the gold id sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionMatrix {
    pub vocab: String,
    pub gold_ids: Vec<TokenId>,
    pub steps: Vec<StepDistribution>,
}

impl DistributionMatrix {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Every step converted to probabilities over its window.
    pub fn to_probabilities(&self) -> Result<DistributionMatrix> {
        let steps = self
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| s.to_probabilities().map_err(|e| e.at_step(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DistributionMatrix {
            vocab: self.vocab.clone(),
            gold_ids: self.gold_ids.clone(),
            steps,
        })
    }

    pub fn to_json_line(&self) -> Result<String> {
        for (i, s) in self.steps.iter().enumerate() {
            if let Some(v) = s.values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("step {i}: non-finite value {v}")));
            }
        }
        Ok(serde_json::to_string(self).expect("matrix serializes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LengthMismatch { steps: usize, gold: usize },
    VocabName { expected: String, found: String },
    GoldOutOfRange { position: usize, id: TokenId },
    ParallelLength { step: usize, indices: usize, values: usize },
    EmptyStep { step: usize },
    DuplicateIndex { step: usize, id: TokenId },
    IndexOutOfRange { step: usize, id: TokenId },
    NonFinite { step: usize },
    Negative { step: usize, value: f64 },
    Mass { step: usize, total: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { steps, gold } => {
                write!(f, "{steps} steps but {gold} gold ids")
            }
            Violation::VocabName { expected, found } => {
                write!(f, "matrix names vocabulary {found:?}, expected {expected:?}")
            }
            Violation::GoldOutOfRange { position, id } => {
                write!(f, "gold id {id} at position {position} out of range")
            }
            Violation::ParallelLength {
                step,
                indices,
                values,
            } => write!(f, "step {step}: {indices} indices vs {values} values"),
            Violation::EmptyStep { step } => write!(f, "step {step}: empty window"),
            Violation::DuplicateIndex { step, id } => {
                write!(f, "step {step}: duplicate index {id}")
            }
            Violation::IndexOutOfRange { step, id } => {
                write!(f, "step {step}: index {id} out of range")
            }
            Violation::NonFinite { step } => write!(f, "step {step}: non-finite value"),
            Violation::Negative { step, value } => {
                write!(f, "step {step}: negative probability {value}")
            }
            Violation::Mass { step, total } => {
                write!(f, "step {step}: probabilities sum to {total}")
            }
        }
    }
}

/// Collects every invariant violation of `m` against `v`. Empty means valid.
pub fn validate_matrix(m: &DistributionMatrix, v: &Vocabulary) -> Vec<Violation> {
    let mut out = Vec::new();
    if m.vocab != v.name() {
        out.push(Violation::VocabName {
            expected: v.name().to_owned(),
            found: m.vocab.clone(),
        });
    }
    if m.steps.len() != m.gold_ids.len() {
        out.push(Violation::LengthMismatch {
            steps: m.steps.len(),
            gold: m.gold_ids.len(),
        });
    }
    for (position, &id) in m.gold_ids.iter().enumerate() {
        if !v.contains_id(id) {
            out.push(Violation::GoldOutOfRange { position, id });
        }
    }
    for (step, s) in m.steps.iter().enumerate() {
        if s.indices.len() != s.values.len() {
            out.push(Violation::ParallelLength {
                step,
                indices: s.indices.len(),
                values: s.values.len(),
            });
        }
        if s.is_empty() {
            out.push(Violation::EmptyStep { step });
        }
        let mut seen = HashSet::new();
        for &id in &s.indices {
            if !seen.insert(id) {
                out.push(Violation::DuplicateIndex { step, id });
            }
            if !v.contains_id(id) {
                out.push(Violation::IndexOutOfRange { step, id });
            }
        }
        if s.values.iter().any(|x| !x.is_finite()) {
            out.push(Violation::NonFinite { step });
            continue;
        }
        if s.kind == ValueKind::Probabilities {
            if let Some(&value) = s.values.iter().find(|&&x| x < 0.0) {
                out.push(Violation::Negative { step, value });
            }
            let total = s.total();
            if (total - 1.0).abs() > MASS_TOLERANCE {
                out.push(Violation::Mass { step, total });
            }
        }
    }
    out
}

pub fn parse_matrices(raw: &str, path: &Path) -> Result<Vec<DistributionMatrix>> {
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Reads every sequence of a matrix file.
pub fn read_matrices(path: impl AsRef<Path>) -> Result<Vec<DistributionMatrix>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrices(&raw, path)
}

/// Reads a file that must hold exactly one sequence.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<DistributionMatrix> {
    let path = path.as_ref();
    let mut all = read_matrices(path)?;
    if all.len() != 1 {
        return Err(Error::Invalid(format!(
            "{}: expected one sequence, found {}",
            path.display(),
            all.len()
        )));
    }
    Ok(all.remove(0))
}

pub fn format_matrices(ms: &[DistributionMatrix]) -> Result<String> {
    let mut out = String::new();
    for (i, m) in ms.iter().enumerate() {
        out.push_str(&m.to_json_line().map_err(|e| e.at_sequence(i))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_matrices(ms: &[DistributionMatrix], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let body = format_matrices(ms)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_matrix(m: &DistributionMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_matrices(std::slice::from_ref(m), path)
}
