//! Weighted-embedding diagnostics for fused tokens.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::StepDistribution;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub type Point = [f64; 2];

/// A token rendered as weighted points, one per window entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedToken {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl EmbeddedToken {
    pub fn new(points: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Invalid("negative or NaN weight".into()));
        }
        Ok(Self { points, weights })
    }

    /// Places each window entry of `step` at its embedding, weighted by its value.
    pub fn from_step(step: &StepDistribution, embedding: &Embedding) -> Result<Self> {
        let points = step
            .indices
            .iter()
            .map(|&id| embedding.point(id))
            .collect::<Result<Vec<_>>>()?;
        Self::new(points, step.values.clone())
    }

    fn total_weight(&self) -> Result<f64> {
        let w: f64 = self.weights.iter().sum();
        if w > 0.0 {
            Ok(w)
        } else {
            Err(Error::Invalid("embedded token has zero total weight".into()))
        }
    }
}

pub fn weighted_center(t: &EmbeddedToken) -> Result<Point> {
    let w = t.total_weight()?;
    let mut c = [0.0, 0.0];
    for (p, &wi) in t.points.iter().zip(&t.weights) {
        c[0] += wi * p[0];
        c[1] += wi * p[1];
    }
    Ok([c[0] / w, c[1] / w])
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Weighted mean distance of the points from their weighted center.
pub fn compactness(t: &EmbeddedToken) -> Result<f64> {
    let w = t.total_weight()?;
    let c = weighted_center(t)?;
    let spread: f64 = t
        .points
        .iter()
        .zip(&t.weights)
        .map(|(&p, &wi)| wi * dist(p, c))
        .sum();
    Ok(spread / w)
}

pub fn center_distance(a: &EmbeddedToken, b: &EmbeddedToken) -> Result<f64> {
    Ok(dist(weighted_center(a)?, weighted_center(b)?))
}

/// Token id -> 2D point.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(BTreeMap<TokenId, Point>);

impl Embedding {
    pub fn new(points: BTreeMap<TokenId, Point>) -> Self {
        Self(points)
    }

    /// Deterministic pseudo-random points in `[-1, 1]^2` for ids `0..size`.
    pub fn toy(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self(
            (0..size as TokenId)
                .map(|id| (id, [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
                .collect(),
        )
    }

    pub fn point(&self, id: TokenId) -> Result<Point> {
        self.0
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no embedding for token {id}")))
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, Point> = self.0.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        serde_json::to_string(&map).expect("embedding serializes")
    }

    pub fn from_json(raw: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let map: BTreeMap<String, Point> =
            serde_json::from_str(raw).map_err(|e| parse_err(e.line(), e.to_string()))?;
        let mut out = BTreeMap::new();
        for (k, v) in map {
            let id: TokenId = k
                .parse()
                .map_err(|_| parse_err(1, format!("embedding key {k:?} is not a token id")))?;
            out.insert(id, v);
        }
        Ok(Self(out))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw, path)
    }
}

/// One row of the per-step diagnostic table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostic {
    pub compactness_fused: f64,
    pub compactness_target: f64,
    pub center_distance: f64,
}

pub fn step_diagnostic(
    fused: &StepDistribution,
    target: &StepDistribution,
    embedding: &Embedding,
) -> Result<StepDiagnostic> {
    let f = EmbeddedToken::from_step(fused, embedding)?;
    let t = EmbeddedToken::from_step(target, embedding)?;
    Ok(StepDiagnostic {
        compactness_fused: compactness(&f)?,
        compactness_target: compactness(&t)?,
        center_distance: center_distance(&f, &t)?,
    })
}
