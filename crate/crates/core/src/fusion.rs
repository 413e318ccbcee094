//! Fusion functions, training losses, and a tabular toy trainer.
//!
//! Losses are means over steps of per-step discrepancies; every log is taken
//! of a value clamped below at [`LOG_FLOOR`] so gold ids outside a window
//! score a large finite penalty.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dist::{DistributionMatrix, StepDistribution, ValueKind};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FusionFunction {
    /// Keep the candidate with the lowest cross-entropy against gold.
    Mince,
    /// Average candidates, weighted by `exp(-cross_entropy)`.
    Avgce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Discrepancy {
    #[value(name = "cross_entropy")]
    CrossEntropy,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub function: FusionFunction,
    pub discrepancy: Discrepancy,
    /// Weight of the CLM term; the fusion term gets `1 - combination_weight`.
    pub combination_weight: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            function: FusionFunction::Mince,
            discrepancy: Discrepancy::CrossEntropy,
            combination_weight: 0.8,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.combination_weight) {
            return Err(Error::Invalid(format!(
                "combination weight {} outside [0, 1]",
                self.combination_weight
            )));
        }
        Ok(())
    }
}

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Float sums start from -0.0; a zero loss is reported as +0.0 so the
/// endpoint identities of [`combined_loss`] hold bitwise.
fn step_mean(total: f64, steps: usize) -> f64 {
    total / steps as f64 + 0.0
}

fn require_probabilities(m: &DistributionMatrix) -> Result<()> {
    if m.is_empty() {
        return Err(Error::Empty("distribution matrix"));
    }
    if m.steps.len() != m.gold_ids.len() {
        return Err(Error::Shape(format!(
            "{} steps but {} gold ids",
            m.steps.len(),
            m.gold_ids.len()
        )));
    }
    if let Some(i) = m.steps.iter().position(|s| s.kind != ValueKind::Probabilities) {
        return Err(Error::Invalid(format!("step {i} holds logits, expected probabilities")));
    }
    Ok(())
}

/// Mean gold-token cross-entropy of `q` against `gold_ids`.
pub fn clm_loss(q: &DistributionMatrix, gold_ids: &[TokenId]) -> Result<f64> {
    require_probabilities(q)?;
    if gold_ids.len() != q.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold ids",
            q.len(),
            gold_ids.len()
        )));
    }
    let total: f64 = q
        .steps
        .iter()
        .zip(gold_ids)
        .map(|(s, &g)| -clamped_ln(s.value_of(g).unwrap_or(0.0)))
        .sum();
    Ok(step_mean(total, q.len()))
}

/// Cross-entropy of a matrix against its own gold ids.
pub fn sequence_ce(m: &DistributionMatrix) -> Result<f64> {
    clm_loss(m, &m.gold_ids)
}

fn step_discrepancy(q: &StepDistribution, p: &StepDistribution, d: Discrepancy) -> f64 {
    let lookup: HashMap<TokenId, f64> = q.indices.iter().copied().zip(q.values.iter().copied()).collect();
    p.indices
        .iter()
        .zip(&p.values)
        .filter(|(_, &pv)| pv > 0.0)
        .map(|(id, &pv)| {
            let lq = clamped_ln(lookup.get(id).copied().unwrap_or(0.0));
            match d {
                Discrepancy::CrossEntropy => -pv * lq,
                Discrepancy::Kl => pv * (pv.ln() - lq),
            }
        })
        .sum()
}

/// Mean per-step discrepancy between predictions `q` and fused targets `p_f`.
pub fn fusion_loss(q: &DistributionMatrix, p_f: &DistributionMatrix, d: Discrepancy) -> Result<f64> {
    require_probabilities(q)?;
    require_probabilities(p_f)?;
    if q.len() != p_f.len() {
        return Err(Error::Shape(format!(
            "{} predicted steps vs {} fused steps",
            q.len(),
            p_f.len()
        )));
    }
    let total: f64 = q
        .steps
        .iter()
        .zip(&p_f.steps)
        .map(|(qs, ps)| step_discrepancy(qs, ps, d))
        .sum();
    Ok(step_mean(total, q.len()))
}

pub fn combined_loss(
    q: &DistributionMatrix,
    gold_ids: &[TokenId],
    p_f: &DistributionMatrix,
    cfg: &FusionConfig,
) -> Result<f64> {
    cfg.validate()?;
    let w = cfg.combination_weight;
    let clm = clm_loss(q, gold_ids)?;
    let fusion = fusion_loss(q, p_f, cfg.discrepancy)?;
    Ok(w * clm + (1.0 - w) * fusion)
}

/// `exp(-ce)` weights, normalized. Shifted by the minimum CE for stability.
pub fn avgce_weights(ces: &[f64]) -> Vec<f64> {
    let min = ces.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = ces.iter().map(|c| (-(c - min)).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / z).collect()
}

/// Merges candidate fused matrices for the same target sequence.
pub fn fuse_combine(candidates: &[DistributionMatrix], cfg: &FusionConfig) -> Result<DistributionMatrix> {
    let first = candidates.first().ok_or(Error::Empty("candidate list"))?;
    for (i, c) in candidates.iter().enumerate() {
        if c.vocab != first.vocab || c.gold_ids != first.gold_ids || c.len() != first.len() {
            return Err(Error::Shape(format!(
                "candidate {i} does not match candidate 0's vocabulary and gold sequence"
            )));
        }
    }
    let ces = candidates.iter().map(sequence_ce).collect::<Result<Vec<_>>>()?;
    match cfg.function {
        FusionFunction::Mince => {
            let mut best = 0;
            for (i, &ce) in ces.iter().enumerate() {
                if ce < ces[best] {
                    best = i;
                }
            }
            Ok(candidates[best].clone())
        }
        FusionFunction::Avgce => {
            let weights = avgce_weights(&ces);
            let steps = (0..first.len())
                .map(|t| {
                    let mut indices: Vec<TokenId> = Vec::new();
                    let mut values: Vec<f64> = Vec::new();
                    for (c, &w) in candidates.iter().zip(&weights) {
                        let s = &c.steps[t];
                        for (&id, &v) in s.indices.iter().zip(&s.values) {
                            match indices.iter().position(|&i| i == id) {
                                Some(p) => values[p] += w * v,
                                None => {
                                    indices.push(id);
                                    values.push(w * v);
                                }
                            }
                        }
                    }
                    let z: f64 = values.iter().sum();
                    StepDistribution::probabilities(indices, values.into_iter().map(|v| v / z).collect())
                })
                .collect();
            Ok(DistributionMatrix {
                vocab: first.vocab.clone(),
                gold_ids: first.gold_ids.clone(),
                steps,
            })
        }
    }
}

/// Tabular next-token model: row `prev` of `table` holds the logits for the
/// token following `prev`. The extra last row is the start-of-sequence
/// context used for the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub vocab_size: usize,
    pub table: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            table: vec![0.0; (vocab_size + 1) * vocab_size],
        }
    }

    pub fn random(vocab_size: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("valid scale");
        Self {
            vocab_size,
            table: (0..(vocab_size + 1) * vocab_size)
                .map(|_| normal.sample(&mut rng))
                .collect(),
        }
    }

    pub fn start_row(&self) -> usize {
        self.vocab_size
    }

    fn row(&self, context: usize) -> &[f64] {
        &self.table[context * self.vocab_size..(context + 1) * self.vocab_size]
    }

    fn context_of(&self, seq: &[TokenId], t: usize) -> usize {
        if t == 0 {
            self.start_row()
        } else {
            seq[t - 1] as usize
        }
    }

    fn softmax_row(&self, context: usize) -> Vec<f64> {
        let row = self.row(context);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Dense predictions for every position of `seq`.
    pub fn predict(&self, seq: &[TokenId], vocab: &str) -> DistributionMatrix {
        let all: Vec<TokenId> = (0..self.vocab_size as TokenId).collect();
        DistributionMatrix {
            vocab: vocab.to_owned(),
            gold_ids: seq.to_vec(),
            steps: (0..seq.len())
                .map(|t| StepDistribution::probabilities(all.clone(), self.softmax_row(self.context_of(seq, t))))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.table.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub clm: f64,
    pub fusion: f64,
    pub combined: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Row `e` holds the losses after `e` updates.
    pub trace: Vec<LossPoint>,
    /// False when the combined loss ever increased between epochs.
    pub monotone: bool,
}

/// Corpus-level losses: means over all steps of all sequences, reduced in
/// input order.
pub fn corpus_losses(
    model: &ToyModel,
    corpus: &[Vec<TokenId>],
    fused: &[DistributionMatrix],
    cfg: &FusionConfig,
) -> Result<(f64, f64, f64)> {
    let mut clm = 0.0;
    let mut fusion = 0.0;
    let mut steps = 0usize;
    for (seq, p_f) in corpus.iter().zip(fused) {
        let q = model.predict(seq, &p_f.vocab);
        let n = seq.len() as f64;
        clm += clm_loss(&q, seq)? * n;
        fusion += fusion_loss(&q, p_f, cfg.discrepancy)? * n;
        steps += seq.len();
    }
    let clm = clm / steps as f64;
    let fusion = fusion / steps as f64;
    let w = cfg.combination_weight;
    Ok((clm, fusion, w * clm + (1.0 - w) * fusion))
}

fn check_corpus(model: &ToyModel, corpus: &[Vec<TokenId>], fused: &[DistributionMatrix]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if corpus.len() != fused.len() {
        return Err(Error::Shape(format!(
            "{} sequences but {} fused matrices",
            corpus.len(),
            fused.len()
        )));
    }
    for (i, (seq, p_f)) in corpus.iter().zip(fused).enumerate() {
        if seq.is_empty() {
            return Err(Error::Empty("training sequence").at_sequence(i));
        }
        if seq.len() != p_f.len() || p_f.gold_ids != *seq {
            return Err(Error::Shape(format!("sequence {i}: fused matrix does not follow the sequence")));
        }
        if let Some(&id) = seq.iter().find(|&&id| id as usize >= model.vocab_size) {
            return Err(Error::Invalid(format!("sequence {i}: token {id} outside the model vocabulary")));
        }
        for s in &p_f.steps {
            if let Some(&id) = s.indices.iter().find(|&&id| id as usize >= model.vocab_size) {
                return Err(Error::Invalid(format!("sequence {i}: fused index {id} outside the model vocabulary")));
            }
        }
    }
    Ok(())
}

/// Analytic gradient of the corpus combined loss with respect to the table.
///
/// Per step with logits `z`: `w (softmax(z) - onehot(gold)) + (1 - w)
/// (softmax(z) - dense(p_f))`, averaged over all steps.
pub fn combined_gradient(
    model: &ToyModel,
    corpus: &[Vec<TokenId>],
    fused: &[DistributionMatrix],
    cfg: &FusionConfig,
) -> Vec<f64> {
    let v = model.vocab_size;
    let w = cfg.combination_weight;
    let total_steps: usize = corpus.iter().map(Vec::len).sum();
    let scale = 1.0 / total_steps as f64;
    let mut grad = vec![0.0; model.table.len()];
    for (seq, p_f) in corpus.iter().zip(fused) {
        for (t, step) in p_f.steps.iter().enumerate() {
            let ctx = model.context_of(seq, t);
            let probs = model.softmax_row(ctx);
            let mut target = vec![0.0; v];
            target[seq[t] as usize] += w;
            for (&id, &pv) in step.indices.iter().zip(&step.values) {
                target[id as usize] += (1.0 - w) * pv;
            }
            // p_f carries unit mass up to rounding; keep the exact derivative.
            let mass = w + (1.0 - w) * step.total();
            let g = &mut grad[ctx * v..(ctx + 1) * v];
            for i in 0..v {
                g[i] += scale * (mass * probs[i] - target[i]);
            }
        }
    }
    grad
}

/// Full-batch gradient descent on the combined loss.
pub fn train_toy(
    model: &ToyModel,
    corpus: &[Vec<TokenId>],
    fused: &[DistributionMatrix],
    cfg: &FusionConfig,
    lr: f64,
    epochs: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !(lr > 0.0) {
        return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
    }
    check_corpus(model, corpus, fused)?;
    for (i, p_f) in fused.iter().enumerate() {
        require_probabilities(p_f).map_err(|e| e.at_sequence(i))?;
    }

    let mut model = model.clone();
    let mut trace = Vec::with_capacity(epochs + 1);
    let mut monotone = true;
    for epoch in 0..=epochs {
        let (clm, fusion, combined) = corpus_losses(&model, corpus, fused, cfg)?;
        if !combined.is_finite() || !model.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        if let Some(prev) = trace.last().map(|p: &LossPoint| p.combined) {
            if combined > prev {
                monotone = false;
            }
        }
        trace.push(LossPoint {
            epoch,
            clm,
            fusion,
            combined,
        });
        if epoch == epochs {
            break;
        }
        let grad = combined_gradient(&model, corpus, fused, cfg);
        for (p, g) in model.table.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
    Ok(TrainOutcome {
        model,
        trace,
        monotone,
    })
}
