//! Monotone token pairing between two tokenizations of the same text.
//!
//! `f(k, j)` is the cheapest monotone path from `(0, 0)` to `(k, j)` where
//! `k` walks the target sequence and `j` the source sequence. Every
//! transition (down, right, diagonal) adds the same cell cost
//! `c(tgt[k], src[j])`, so a path is scored by the sum of its cells.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::vocab::TokenSequence;

/// Levenshtein distance over chars, normalized by the longer length.
/// Always lands in `[0, 1]`.
pub fn token_cost(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let denom = a.len().max(b.len()).max(1);
    levenshtein(&a, &b) as f64 / denom as f64
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairGroup {
    /// Contiguous source positions (0-based).
    pub src: Vec<usize>,
    /// Contiguous target positions (0-based).
    pub tgt: Vec<usize>,
    pub one_to_one: bool,
}

impl PairGroup {
    fn from_cells(cells: &[(usize, usize)]) -> Self {
        let mut src: Vec<usize> = cells.iter().map(|&(_, j)| j).collect();
        let mut tgt: Vec<usize> = cells.iter().map(|&(k, _)| k).collect();
        src.dedup();
        tgt.dedup();
        let one_to_one = src.len() == 1 && tgt.len() == 1;
        Self {
            src,
            tgt,
            one_to_one,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairingResult {
    pub total_cost: f64,
    pub groups: Vec<PairGroup>,
    /// Row-major `N x L` cost table (`table[k * L + j] = f(k, j)`).
    #[serde(skip)]
    pub table: Option<Vec<f64>>,
}

impl PairingResult {
    pub fn one_to_one_count(&self) -> usize {
        self.groups.iter().filter(|g| g.one_to_one).count()
    }

    /// Checks that groups are monotone and partition both position ranges.
    pub fn covers(&self, src_len: usize, tgt_len: usize) -> bool {
        let (mut next_src, mut next_tgt) = (0, 0);
        for g in &self.groups {
            if g.src.is_empty() || g.tgt.is_empty() {
                return false;
            }
            let contiguous = |v: &[usize], start: usize| {
                v.iter().enumerate().all(|(i, &p)| p == start + i)
            };
            if !contiguous(&g.src, next_src) || !contiguous(&g.tgt, next_tgt) {
                return false;
            }
            if g.one_to_one != (g.src.len() == 1 && g.tgt.len() == 1) {
                return false;
            }
            next_src += g.src.len();
            next_tgt += g.tgt.len();
        }
        next_src == src_len && next_tgt == tgt_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Move {
    Diagonal,
    Down,
    Right,
}

impl Move {
    const PREFERENCE: [Move; 3] = [Move::Diagonal, Move::Down, Move::Right];

    /// Predecessor of `(k, j)` under this move, if it exists.
    fn back(self, k: usize, j: usize) -> Option<(usize, usize)> {
        match self {
            Move::Diagonal if k > 0 && j > 0 => Some((k - 1, j - 1)),
            Move::Down if k > 0 => Some((k - 1, j)),
            Move::Right if j > 0 => Some((k, j - 1)),
            _ => None,
        }
    }
}

/// Splits a start-to-end cell path into groups: each diagonal step opens a
/// new group, every other step extends the current one.
fn groups_from_path(path: &[(usize, usize)]) -> Vec<PairGroup> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..path.len() {
        let (pk, pj) = path[i - 1];
        let (k, j) = path[i];
        if k == pk + 1 && j == pj + 1 {
            groups.push(PairGroup::from_cells(&path[start..i]));
            start = i;
        }
    }
    groups.push(PairGroup::from_cells(&path[start..]));
    groups
}

fn cell_costs(src: &TokenSequence, tgt: &TokenSequence) -> Vec<f64> {
    let l = src.len();
    let mut costs = vec![0.0; tgt.len() * l];
    for (k, b) in tgt.texts.iter().enumerate() {
        for (j, a) in src.texts.iter().enumerate() {
            costs[k * l + j] = token_cost(b, a);
        }
    }
    costs
}

fn check_non_empty(src: &TokenSequence, tgt: &TokenSequence) -> Result<()> {
    if src.is_empty() {
        return Err(Error::Empty("source token sequence"));
    }
    if tgt.is_empty() {
        return Err(Error::Empty("target token sequence"));
    }
    Ok(())
}

/// Dynamic-programming pairing of `src` (length L) with `tgt` (length N).
///
/// The backtrace starts at `(N-1, L-1)` and at each cell takes the first
/// move in the order diagonal, down, right whose predecessor reproduces the
/// cell's value exactly.
pub fn pair_tokens(src: &TokenSequence, tgt: &TokenSequence) -> Result<PairingResult> {
    check_non_empty(src, tgt)?;
    let (n, l) = (tgt.len(), src.len());
    let cost = cell_costs(src, tgt);
    let mut f = vec![0.0; n * l];
    for k in 0..n {
        for j in 0..l {
            let c = cost[k * l + j];
            let best = Move::PREFERENCE
                .iter()
                .filter_map(|m| m.back(k, j))
                .map(|(pk, pj)| f[pk * l + pj])
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))));
            f[k * l + j] = match best {
                Some(prev) => prev + c,
                None => c,
            };
        }
    }

    let mut path = vec![(n - 1, l - 1)];
    let (mut k, mut j) = (n - 1, l - 1);
    while (k, j) != (0, 0) {
        let here = f[k * l + j];
        let c = cost[k * l + j];
        let (pk, pj) = Move::PREFERENCE
            .iter()
            .filter_map(|m| m.back(k, j))
            .find(|&(pk, pj)| f[pk * l + pj] + c == here)
            .expect("some predecessor realizes the cell value");
        path.push((pk, pj));
        k = pk;
        j = pj;
    }
    path.reverse();

    Ok(PairingResult {
        total_cost: f[n * l - 1],
        groups: groups_from_path(&path),
        table: Some(f),
    })
}

/// Exhaustive oracle for [`pair_tokens`]: scores every monotone path by a
/// left-to-right sum of its cell costs. Ties go to the path whose moves,
/// read from the end backwards, are lexicographically smallest under the
/// order diagonal < down < right.
pub fn brute_force_pairing(src: &TokenSequence, tgt: &TokenSequence) -> Result<PairingResult> {
    check_non_empty(src, tgt)?;
    let (n, l) = (tgt.len(), src.len());
    if n > 6 || l > 6 {
        return Err(Error::TooLarge { src: l, tgt: n });
    }
    let cost = cell_costs(src, tgt);

    struct Search<'a> {
        n: usize,
        l: usize,
        cost: &'a [f64],
        path: Vec<(usize, usize)>,
        moves: Vec<Move>,
        best: Option<(f64, Vec<Move>, Vec<(usize, usize)>)>,
    }

    impl Search<'_> {
        fn walk(&mut self, k: usize, j: usize, acc: f64) {
            if (k, j) == (self.n - 1, self.l - 1) {
                let rev: Vec<Move> = self.moves.iter().rev().copied().collect();
                let better = match &self.best {
                    None => true,
                    Some((c, m, _)) => acc < *c || (acc == *c && rev < *m),
                };
                if better {
                    self.best = Some((acc, rev, self.path.clone()));
                }
                return;
            }
            for (mv, dk, dj) in [(Move::Diagonal, 1, 1), (Move::Down, 1, 0), (Move::Right, 0, 1)] {
                let (nk, nj) = (k + dk, j + dj);
                if nk < self.n && nj < self.l {
                    self.path.push((nk, nj));
                    self.moves.push(mv);
                    let next = acc + self.cost[nk * self.l + nj];
                    self.walk(nk, nj, next);
                    self.moves.pop();
                    self.path.pop();
                }
            }
        }
    }

    let mut search = Search {
        n,
        l,
        cost: &cost,
        path: vec![(0, 0)],
        moves: Vec::new(),
        best: None,
    };
    search.walk(0, 0, cost[0]);
    let (total_cost, _, path) = search.best.expect("at least one path exists");
    Ok(PairingResult {
        total_cost,
        groups: groups_from_path(&path),
        table: None,
    })
}
