//! Whole-matrix alignment: pairs the decoded gold sequences, then fuses each
//! one-to-one pair of windows (optimal transport or a hard-mapping baseline)
//! and falls back to the gold one-hot everywhere else.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{DistributionMatrix, StepDistribution};
use crate::error::{Error, Result};
use crate::fusion::{fuse_combine, FusionConfig};
use crate::pairing::{pair_tokens, token_cost};
use crate::transport::{build_cost, extract_fused, sinkhorn, OtConfig};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Entropic optimal transport with argmax extraction.
    Ot,
    /// Move each source entry to its minimum edit-distance target entry.
    Mined,
    /// Move source entries only onto exactly matching target strings.
    Em,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub strategy: Strategy,
    pub ot: OtConfig,
    pub window: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ot,
            ot: OtConfig::default(),
            window: 10,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Invalid("window must be at least 1".into()));
        }
        self.ot.validate()
    }
}

/// Running totals across aligned sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AlignStats {
    pub one_to_one_groups: usize,
    pub fallback_steps: usize,
    pub plan_cost_sum: f64,
    pub iterations_sum: usize,
    pub solves: usize,
    pub unconverged: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatsReport {
    pub one_to_one_groups: usize,
    pub fallback_steps: usize,
    pub mean_plan_cost: f64,
    pub mean_iterations: f64,
}

impl AlignStats {
    pub fn merge(&mut self, other: &AlignStats) {
        self.one_to_one_groups += other.one_to_one_groups;
        self.fallback_steps += other.fallback_steps;
        self.plan_cost_sum += other.plan_cost_sum;
        self.iterations_sum += other.iterations_sum;
        self.solves += other.solves;
        self.unconverged += other.unconverged;
    }

    pub fn report(&self) -> StatsReport {
        let per = |x: f64| if self.solves == 0 { 0.0 } else { x / self.solves as f64 };
        StatsReport {
            one_to_one_groups: self.one_to_one_groups,
            fallback_steps: self.fallback_steps,
            mean_plan_cost: per(self.plan_cost_sum),
            mean_iterations: per(self.iterations_sum as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub fused: DistributionMatrix,
    pub stats: AlignStats,
}

fn check_header(m: &DistributionMatrix, v: &Vocabulary, role: &str) -> Result<()> {
    if m.vocab != v.name() {
        return Err(Error::Invalid(format!(
            "{role} matrix names vocabulary {:?} but {:?} was supplied",
            m.vocab,
            v.name()
        )));
    }
    if m.steps.len() != m.gold_ids.len() {
        return Err(Error::Shape(format!(
            "{role} matrix has {} steps for {} gold ids",
            m.steps.len(),
            m.gold_ids.len()
        )));
    }
    Ok(())
}

/// Truncates a step to its top `window` entries and normalizes it.
pub fn window_probabilities(step: &StepDistribution, window: usize) -> Result<StepDistribution> {
    step.top_k(window).to_probabilities()
}

struct Fused {
    step: StepDistribution,
    plan_cost: f64,
    iterations: usize,
    converged: bool,
    fell_back: bool,
}

fn fuse_ot(
    a: &StepDistribution,
    b: &StepDistribution,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    ot: &OtConfig,
) -> Result<Fused> {
    let cost = build_cost(a, b, src_vocab, tgt_vocab)?;
    let plan = sinkhorn(&cost, &a.values, &b.values, ot)?;
    Ok(Fused {
        step: extract_fused(&plan, b)?,
        plan_cost: plan.cost(&cost),
        iterations: plan.iterations,
        converged: plan.converged,
        fell_back: false,
    })
}

/// Hard mapping: each admissible source entry carries its value unchanged
/// to one target entry; collisions accumulate, then the step is
/// renormalized. `None` when nothing transfers.
fn fuse_hard(
    a: &StepDistribution,
    b: &StepDistribution,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    strategy: Strategy,
) -> Result<Option<(StepDistribution, f64)>> {
    let tgt_text = b
        .indices
        .iter()
        .map(|&i| tgt_vocab.decode(i))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; b.len()];
    let mut moved_cost = 0.0;
    let mut moved_any = false;
    for (&id, &v) in a.indices.iter().zip(&a.values) {
        let s = src_vocab.decode(id)?;
        let dest = match strategy {
            Strategy::Em => tgt_text.iter().position(|t| *t == s).map(|p| (p, 0.0)),
            Strategy::Mined => {
                let mut best = (0, token_cost(s, tgt_text[0]));
                for (p, t) in tgt_text.iter().enumerate().skip(1) {
                    let c = token_cost(s, t);
                    if c < best.1 {
                        best = (p, c);
                    }
                }
                Some(best)
            }
            Strategy::Ot => unreachable!("hard mapping never runs for ot"),
        };
        if let Some((p, c)) = dest {
            acc[p] += v;
            moved_cost += v * c;
            moved_any = true;
        }
    }
    let total: f64 = acc.iter().sum();
    if !moved_any || !(total > 0.0) {
        return Ok(None);
    }
    Ok(Some((
        StepDistribution::probabilities(b.indices.clone(), acc.into_iter().map(|v| v / total).collect()),
        moved_cost,
    )))
}

fn fuse_pair(
    a: &StepDistribution,
    b: &StepDistribution,
    gold: u32,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &AlignConfig,
) -> Result<Fused> {
    match cfg.strategy {
        Strategy::Ot => fuse_ot(a, b, src_vocab, tgt_vocab, &cfg.ot),
        Strategy::Em | Strategy::Mined => Ok(match fuse_hard(a, b, src_vocab, tgt_vocab, cfg.strategy)? {
            Some((step, moved_cost)) => Fused {
                step,
                plan_cost: moved_cost,
                iterations: 0,
                converged: true,
                fell_back: false,
            },
            None => Fused {
                step: StepDistribution::one_hot(gold),
                plan_cost: 0.0,
                iterations: 0,
                converged: true,
                fell_back: true,
            },
        }),
    }
}

/// Aligns a source matrix onto the target's tokenization and vocabulary.
///
/// The result has one step per target position. One-to-one pairs are fused
/// from the two windows according to `cfg.strategy`; every other target
/// position becomes a one-hot at its gold id.
pub fn align_matrices(
    src: &DistributionMatrix,
    tgt: &DistributionMatrix,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &AlignConfig,
) -> Result<Alignment> {
    cfg.validate()?;
    check_header(src, src_vocab, "source")?;
    check_header(tgt, tgt_vocab, "target")?;
    let src_seq = src_vocab.sequence(&src.gold_ids)?;
    let tgt_seq = tgt_vocab.sequence(&tgt.gold_ids)?;
    let pairing = pair_tokens(&src_seq, &tgt_seq)?;

    let mut stats = AlignStats::default();
    let mut steps: Vec<Option<StepDistribution>> = vec![None; tgt.len()];
    for group in &pairing.groups {
        if group.one_to_one {
            let (j, k) = (group.src[0], group.tgt[0]);
            let run = || -> Result<Fused> {
                let a = window_probabilities(&src.steps[j], cfg.window)?;
                let b = window_probabilities(&tgt.steps[k], cfg.window)?;
                fuse_pair(&a, &b, tgt.gold_ids[k], src_vocab, tgt_vocab, cfg)
            };
            let fused = run().map_err(|e| e.at_step(k))?;
            stats.one_to_one_groups += 1;
            if fused.fell_back {
                stats.fallback_steps += 1;
            } else {
                stats.solves += 1;
                stats.plan_cost_sum += fused.plan_cost;
                stats.iterations_sum += fused.iterations;
                stats.unconverged += usize::from(!fused.converged);
            }
            steps[k] = Some(fused.step);
        } else {
            for &k in &group.tgt {
                steps[k] = Some(StepDistribution::one_hot(tgt.gold_ids[k]));
                stats.fallback_steps += 1;
            }
        }
    }

    Ok(Alignment {
        fused: DistributionMatrix {
            vocab: tgt.vocab.clone(),
            gold_ids: tgt.gold_ids.clone(),
            steps: steps
                .into_iter()
                .map(|s| s.expect("pairing covers every target position"))
                .collect(),
        },
        stats,
    })
}

/// Hard-mapping baseline (`em` or `mined`).
pub fn align_baseline(
    src: &DistributionMatrix,
    tgt: &DistributionMatrix,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &AlignConfig,
) -> Result<Alignment> {
    if cfg.strategy == Strategy::Ot {
        return Err(Error::Invalid("baseline alignment needs strategy em or mined".into()));
    }
    align_matrices(src, tgt, src_vocab, tgt_vocab, cfg)
}

/// Aligns sequence `i` of `srcs` with sequence `i` of `tgts`. Sequences run
/// in parallel; outputs and statistics are reduced in input order.
pub fn align_corpus(
    srcs: &[DistributionMatrix],
    tgts: &[DistributionMatrix],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &AlignConfig,
) -> Result<(Vec<DistributionMatrix>, AlignStats)> {
    if srcs.len() != tgts.len() {
        return Err(Error::Shape(format!(
            "{} source sequences vs {} target sequences",
            srcs.len(),
            tgts.len()
        )));
    }
    let results: Vec<Result<Alignment>> = srcs
        .par_iter()
        .zip(tgts.par_iter())
        .enumerate()
        .map(|(i, (s, t))| align_matrices(s, t, src_vocab, tgt_vocab, cfg).map_err(|e| e.at_sequence(i)))
        .collect();
    let mut stats = AlignStats::default();
    let mut fused = Vec::with_capacity(results.len());
    for r in results {
        let a = r?;
        stats.merge(&a.stats);
        fused.push(a.fused);
    }
    Ok((fused, stats))
}

/// Multi-source fusion. Starting from the target's own (windowed,
/// normalized) matrix, each stage aligns the next source onto the running
/// matrix and keeps `fuse_combine([running, aligned])`.
pub fn fuse_pipeline(
    sources: &[(&DistributionMatrix, &Vocabulary)],
    tgt: &DistributionMatrix,
    tgt_vocab: &Vocabulary,
    cfg: &AlignConfig,
    fusion: &FusionConfig,
) -> Result<DistributionMatrix> {
    if sources.is_empty() {
        return Err(Error::Empty("source list"));
    }
    cfg.validate()?;
    fusion.validate()?;
    check_header(tgt, tgt_vocab, "target")?;
    let mut running = DistributionMatrix {
        vocab: tgt.vocab.clone(),
        gold_ids: tgt.gold_ids.clone(),
        steps: tgt
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| window_probabilities(s, cfg.window).map_err(|e| e.at_step(i)))
            .collect::<Result<Vec<_>>>()?,
    };
    for (stage, (src, vocab)) in sources.iter().enumerate() {
        let aligned = align_matrices(src, &running, vocab, tgt_vocab, cfg)
            .map_err(|e| Error::Invalid(format!("fusion stage {}: {e}", stage + 1)))?;
        running = fuse_combine(&[running, aligned.fused], fusion)?;
    }
    Ok(running)
}
