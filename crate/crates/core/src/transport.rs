//! Entropic optimal transport between two top-k windows.
//!
//! The plan starts from the Gibbs kernel `exp(-temperature * C)` and is
//! alternately rescaled so its row sums match the source window and its
//! column sums match the target window. Extraction then keeps, for each
//! source row, only its largest entry and accumulates those masses into the
//! target window.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dist::{StepDistribution, MASS_TOLERANCE};
use crate::error::{Error, Result};
use crate::pairing::token_cost;
use crate::vocab::Vocabulary;

/// Smallest kernel entry kept; below this the plain-space scaling underflows.
pub const UNDERFLOW_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtConfig {
    pub temperature: f64,
    pub threshold: f64,
    pub max_iterations: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            threshold: 1e-5,
            max_iterations: 1000,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Invalid(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Invalid("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// `n x m` matrix of pairwise costs in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("cost matrix"));
        }
        if let Some(bad) = entries
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Invalid(format!("cost entry {bad} outside [0, 1]")));
        }
        Ok(Self(entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("ragged cost rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((n, m), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(arr)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0[[x, y]]
    }
}

/// Cost between every source window entry and every target window entry:
/// normalized edit distance of the decoded token strings.
pub fn build_cost(
    src_step: &StepDistribution,
    tgt_step: &StepDistribution,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<CostMatrix> {
    if src_step.is_empty() || tgt_step.is_empty() {
        return Err(Error::Empty("step distribution"));
    }
    let src_text = src_step
        .indices
        .iter()
        .map(|&i| src_vocab.decode(i))
        .collect::<Result<Vec<_>>>()?;
    let tgt_text = tgt_step
        .indices
        .iter()
        .map(|&i| tgt_vocab.decode(i))
        .collect::<Result<Vec<_>>>()?;
    let c = Array2::from_shape_fn((src_text.len(), tgt_text.len()), |(x, y)| {
        token_cost(src_text[x], tgt_text[y])
    });
    CostMatrix::new(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub entries: Array2<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// `<C, plan>`.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.entries
            .iter()
            .zip(c.entries().iter())
            .map(|(p, c)| p * c)
            .sum()
    }

    /// L1 deviation of the plan's row and column sums from its marginals.
    pub fn marginal_error(&self) -> f64 {
        marginal_error(&self.entries, &self.row_marginal, &self.col_marginal)
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }
}

fn marginal_error(t: &Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
    let rows: f64 = t
        .rows()
        .into_iter()
        .zip(a)
        .map(|(r, &ax)| (r.sum() - ax).abs())
        .sum();
    let cols: f64 = t
        .columns()
        .into_iter()
        .zip(b)
        .map(|(c, &by)| (c.sum() - by).abs())
        .sum();
    rows + cols
}

fn check_marginal(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Shape(format!(
            "{name} marginal has length {}, expected {len}",
            v.len()
        )));
    }
    if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Invalid(format!("{name} marginal has a negative or non-finite entry")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::Invalid(format!("{name} marginal sums to {total}, not 1")));
    }
    Ok(())
}

/// Sinkhorn scaling of `exp(-temperature * C)` onto marginals `a` (rows) and
/// `b` (columns).
///
/// Rows and columns whose marginal is zero are pinned to zero and never
/// rescaled. One iteration is a row pass followed by a column pass; the loop
/// stops once the L1 marginal error is within `cfg.threshold`.
pub fn sinkhorn(cost: &CostMatrix, a: &[f64], b: &[f64], cfg: &OtConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = (cost.rows(), cost.cols());
    check_marginal("row", a, n)?;
    check_marginal("column", b, m)?;

    let mut t = cost
        .entries()
        .mapv(|c| (-cfg.temperature * c).exp().max(UNDERFLOW_FLOOR));
    for (x, &ax) in a.iter().enumerate() {
        if ax == 0.0 {
            t.row_mut(x).fill(0.0);
        }
    }
    for (y, &by) in b.iter().enumerate() {
        if by == 0.0 {
            t.column_mut(y).fill(0.0);
        }
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        iterations += 1;
        for (mut row, &ax) in t.rows_mut().into_iter().zip(a) {
            if ax > 0.0 {
                let s: f64 = row.sum();
                if s > 0.0 {
                    row *= ax / s;
                }
            }
        }
        for (mut col, &by) in t.columns_mut().into_iter().zip(b) {
            if by > 0.0 {
                let s: f64 = col.sum();
                if s > 0.0 {
                    col *= by / s;
                }
            }
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { iteration: iterations });
        }
        if marginal_error(&t, a, b) <= cfg.threshold {
            converged = true;
            break;
        }
    }

    Ok(TransportPlan {
        entries: t,
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
        iterations,
        converged,
    })
}

/// Grid points used by [`exact_ot_2x2`].
pub const EXACT_GRID: usize = 100_000;

/// Exact (unregularized) transport for a 2x2 problem.
///
/// The feasible plans form a segment parameterized by `t = plan[0][0]`;
/// the objective is affine in `t`, so a dense grid scan finds the optimum.
/// Returns the first grid minimizer.
pub fn exact_ot_2x2(cost: &CostMatrix, a: &[f64], b: &[f64]) -> Result<TransportPlan> {
    if cost.rows() != 2 || cost.cols() != 2 {
        return Err(Error::Shape(format!(
            "exact 2x2 solver got a {}x{} cost",
            cost.rows(),
            cost.cols()
        )));
    }
    check_marginal("row", a, 2)?;
    check_marginal("column", b, 2)?;
    let lo = (a[0] + b[0] - 1.0).max(0.0);
    let hi = a[0].min(b[0]);
    let plan_at = |t: f64| {
        let t01 = (a[0] - t).max(0.0);
        let t10 = (b[0] - t).max(0.0);
        let t11 = (a[1] - t10).max(0.0);
        [t, t01, t10, t11]
    };
    // <C, plan(t)> = intercept + slope * t on the feasible segment.
    let slope = cost.get(0, 0) - cost.get(0, 1) - cost.get(1, 0) + cost.get(1, 1);
    let intercept = a[0] * cost.get(0, 1) + b[0] * cost.get(1, 0) + (a[1] - b[0]) * cost.get(1, 1);
    let objective = |t: f64| intercept + slope * t;
    let mut best_t = lo;
    let mut best = objective(lo);
    for i in 1..EXACT_GRID {
        let t = lo + (hi - lo) * (i as f64) / ((EXACT_GRID - 1) as f64);
        let v = objective(t);
        if v < best {
            best = v;
            best_t = t;
        }
    }
    let p = plan_at(best_t);
    Ok(TransportPlan {
        entries: Array2::from_shape_vec((2, 2), p.to_vec()).expect("2x2"),
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
        iterations: 0,
        converged: true,
    })
}

/// Per-row argmax extraction with accumulation into the target window.
///
/// Row `x` contributes its largest entry (lowest column on ties) to the
/// target id at that column. The result keeps the target window's index
/// order and is renormalized to total mass 1.
pub fn extract_fused(plan: &TransportPlan, tgt_step: &StepDistribution) -> Result<StepDistribution> {
    if plan.rows() == 0 || plan.cols() == 0 {
        return Err(Error::Empty("transport plan"));
    }
    if plan.cols() != tgt_step.len() {
        return Err(Error::Shape(format!(
            "plan has {} columns but target window has {} entries",
            plan.cols(),
            tgt_step.len()
        )));
    }
    let mut acc = vec![0.0; plan.cols()];
    for row in plan.entries.rows() {
        let mut best = 0;
        for (y, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = y;
            }
        }
        acc[best] += row[best];
    }
    let total: f64 = acc.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("transport plan carries no mass".into()));
    }
    Ok(StepDistribution::probabilities(
        tgt_step.indices.clone(),
        acc.into_iter().map(|v| v / total).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn plan(entries: Array2<f64>) -> TransportPlan {
        TransportPlan {
            row_marginal: entries.rows().into_iter().map(|r| r.sum()).collect(),
            col_marginal: entries.columns().into_iter().map(|c| c.sum()).collect(),
            entries,
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn cost_matrix_from_decoded_strings() {
        let sv = Vocabulary::new("s", vec!["the".into(), "a".into()]).unwrap();
        let tv = Vocabulary::new("t", vec!["an".into(), "the".into()]).unwrap();
        let src = StepDistribution::logits(vec![0, 1], vec![0.0, 0.0]);
        let tgt = StepDistribution::logits(vec![1, 0], vec![0.0, 0.0]);
        let c = build_cost(&src, &tgt, &sv, &tv).unwrap();
        assert_eq!(c.entries(), &array![[0.0, 1.0], [1.0, 0.5]]);

        let one = build_cost(
            &StepDistribution::logits(vec![1], vec![0.0]),
            &StepDistribution::logits(vec![0], vec![0.0]),
            &sv,
            &tv,
        )
        .unwrap();
        assert_eq!(one.entries(), &array![[token_cost("a", "an")]]);

        let bad = StepDistribution::logits(vec![7], vec![0.0]);
        assert!(matches!(
            build_cost(&bad, &tgt, &sv, &tv),
            Err(Error::OutOfRange { id: 7, .. })
        ));
    }

    #[test]
    fn zero_cost_gives_independent_coupling() {
        let c = CostMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let p = sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], &OtConfig::default()).unwrap();
        assert!(p.converged);
        for v in p.entries.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_row_marginal_forces_plan() {
        let c = CostMatrix::from_rows(&[vec![0.3, 0.9], vec![0.1, 0.4]]).unwrap();
        let p = sinkhorn(&c, &[1.0, 0.0], &[0.3, 0.7], &OtConfig::default()).unwrap();
        assert!(p.converged);
        assert!((p.entries[[0, 0]] - 0.3).abs() < 1e-9);
        assert!((p.entries[[0, 1]] - 0.7).abs() < 1e-9);
        assert_eq!(p.entries[[1, 0]], 0.0);
        assert_eq!(p.entries[[1, 1]], 0.0);
    }

    #[test]
    fn sharp_temperature_approaches_permutation() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let cfg = OtConfig {
            temperature: 50.0,
            threshold: 1e-7,
            max_iterations: 1000,
        };
        let p = sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], &cfg).unwrap();
        let want = array![[0.5, 0.0], [0.0, 0.5]];
        for (g, w) in p.entries.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-3);
        }
        let exact = exact_ot_2x2(&c, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(exact.entries, want);
        assert_eq!(exact.cost(&c), 0.0);
    }

    #[test]
    fn unnormalized_marginals_rejected() {
        let c = CostMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(sinkhorn(&c, &[0.9], &[0.5, 0.5], &OtConfig::default()).is_err());
        assert!(sinkhorn(&c, &[1.0], &[0.5], &OtConfig::default()).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let c = CostMatrix::from_rows(&[vec![0.0]]).unwrap();
        let cfg = OtConfig {
            temperature: 0.0,
            ..OtConfig::default()
        };
        assert!(sinkhorn(&c, &[1.0], &[1.0], &cfg).is_err());
    }

    #[test]
    fn exact_constant_cost_returns_first_grid_point() {
        let c = CostMatrix::from_rows(&[vec![0.4, 0.4], vec![0.4, 0.4]]).unwrap();
        let p = exact_ot_2x2(&c, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(p.entries[[0, 0]], 0.0);
        assert!((p.cost(&c) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn exact_forced_by_point_mass() {
        let c = CostMatrix::from_rows(&[vec![0.2, 0.9], vec![0.7, 0.1]]).unwrap();
        let p = exact_ot_2x2(&c, &[1.0, 0.0], &[0.3, 0.7]).unwrap();
        assert!((p.entries[[0, 0]] - 0.3).abs() < 1e-12);
        assert!((p.entries[[0, 1]] - 0.7).abs() < 1e-12);
        assert_eq!(p.entries.row(1).sum(), 0.0);
        let wrong = CostMatrix::from_rows(&[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert!(exact_ot_2x2(&wrong, &[0.5, 0.5], &[0.3, 0.3, 0.4]).is_err());
    }

    #[test]
    fn extract_diagonal() {
        let tgt = StepDistribution::probabilities(vec![7, 9], vec![0.5, 0.5]);
        let f = extract_fused(&plan(array![[0.5, 0.0], [0.0, 0.5]]), &tgt).unwrap();
        assert_eq!(f.indices, vec![7, 9]);
        assert_eq!(f.values, vec![0.5, 0.5]);
    }

    #[test]
    fn extract_accumulates_shared_argmax() {
        let tgt = StepDistribution::probabilities(vec![3, 4], vec![0.5, 0.5]);
        let p = plan(array![[0.3, 0.05], [0.2, 0.1], [0.0, 0.5]]);
        let f = extract_fused(&p, &tgt).unwrap();
        assert!((f.values[0] - 0.5).abs() < 1e-15);
        assert!((f.values[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn extract_single_row_is_one_hot() {
        let tgt = StepDistribution::probabilities(vec![1, 2, 3], vec![0.2, 0.5, 0.3]);
        let f = extract_fused(&plan(array![[0.2, 0.5, 0.3]]), &tgt).unwrap();
        assert_eq!(f.values, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn extract_ties_go_left() {
        let tgt = StepDistribution::probabilities(vec![1, 2], vec![0.5, 0.5]);
        let f = extract_fused(&plan(array![[0.5, 0.5]]), &tgt).unwrap();
        assert_eq!(f.values, vec![1.0, 0.0]);
    }

    #[test]
    fn extract_shape_mismatch() {
        let tgt = StepDistribution::probabilities(vec![1], vec![1.0]);
        assert!(extract_fused(&plan(array![[0.5, 0.5]]), &tgt).is_err());
    }
}
