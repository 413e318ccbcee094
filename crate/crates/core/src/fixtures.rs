//! Synthetic two-tokenizer corpus.
//!
//! Text comes from a seeded first-order Markov chain over `a..z`. The target
//! side tokenizes per character; the source side uses the same letters plus
//! the 20 most frequent training bigrams, tokenized greedily. Because source
//! tokens are at most two characters long, the source's true next-token
//! distribution under greedy tokenization is available in closed form:
//!
//! - bigram `xy`: `P(x | ctx) P(y | x)`
//! - single `x`: `P(x | ctx) (1 - sum of P(y | x) over bigrams xy)`
//!
//! Source matrices are noisy, lightly smoothed copies of that truth; target
//! matrices come from a weaker, heavily smoothed copy of the character truth.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diag::Embedding;
use crate::dist::{write_matrices, DistributionMatrix, StepDistribution};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

pub const DEFAULT_SEED: u64 = 0;
pub const ALPHABET: usize = 26;
pub const MERGED_BIGRAMS: usize = 20;

pub const CHAR_VOCAB_FILE: &str = "char_vocab.json";
pub const BIGRAM_VOCAB_FILE: &str = "bigram_vocab.json";
pub const SOURCE_FILE: &str = "source.jsonl";
pub const SOURCE2_FILE: &str = "source2.jsonl";
pub const TARGET_FILE: &str = "target.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const EMBEDDING_FILE: &str = "embedding.json";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureConfig {
    pub seed: u64,
    pub window: usize,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            window: 10,
            train_sequences: 12,
            heldout_sequences: 40,
            min_len: 10,
            max_len: 16,
        }
    }
}

/// Noise model for one simulated model's logits:
/// `ln((1 - smoothing) * truth + smoothing / V) + noise * N(0, 1)`.
#[derive(Debug, Clone, Copy)]
struct Quality {
    smoothing: f64,
    noise: f64,
}

const SOURCE_QUALITY: Quality = Quality {
    smoothing: 0.05,
    noise: 0.1,
};
const SOURCE2_QUALITY: Quality = Quality {
    smoothing: 0.2,
    noise: 0.4,
};
const TARGET_QUALITY: Quality = Quality {
    smoothing: 0.4,
    noise: 0.6,
};

/// Ground-truth character chain.
#[derive(Debug, Clone)]
pub struct CharChain {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

impl CharChain {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f64, 2.5).expect("valid sigma");
        let row = |rng: &mut ChaCha8Rng| {
            let w: Vec<f64> = (0..ALPHABET).map(|_| normal.sample(rng).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect::<Vec<_>>()
        };
        let initial = row(rng);
        let transition = (0..ALPHABET).map(|_| row(rng)).collect();
        Self { initial, transition }
    }

    /// Next-character distribution after `prev` (`None` = start of text).
    pub fn next(&self, prev: Option<usize>) -> &[f64] {
        match prev {
            Some(c) => &self.transition[c],
            None => &self.initial,
        }
    }

    fn sample_text(&self, rng: &mut ChaCha8Rng, len: usize) -> String {
        let mut prev = None;
        let mut out = String::with_capacity(len);
        for _ in 0..len {
            let c = sample_index(self.next(prev), rng);
            out.push(letter(c));
            prev = Some(c);
        }
        out
    }
}

fn letter(i: usize) -> char {
    (b'a' + i as u8) as char
}

fn letter_index(c: char) -> usize {
    (c as u8 - b'a') as usize
}

fn sample_index(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub config: FixtureConfig,
    pub truth: CharChain,
    pub char_vocab: Vocabulary,
    pub bigram_vocab: Vocabulary,
    pub train_texts: Vec<String>,
    pub heldout_texts: Vec<String>,
    /// Source matrices over the bigram vocabulary, one per training text.
    pub source: Vec<DistributionMatrix>,
    /// A second, noisier source over the bigram vocabulary.
    pub source2: Vec<DistributionMatrix>,
    /// Target matrices over the character vocabulary, one per training text.
    pub target: Vec<DistributionMatrix>,
    pub heldout: Vec<DistributionMatrix>,
    pub embedding: Embedding,
}

fn char_vocab() -> Vocabulary {
    Vocabulary::new("char", (0..ALPHABET).map(|i| letter(i).to_string()).collect())
        .expect("letters are unique")
}

fn bigram_vocab(texts: &[String]) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        let chars: Vec<char> = t.chars().collect();
        for w in chars.windows(2) {
            *counts.entry(w.iter().collect()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = (0..ALPHABET).map(|i| letter(i).to_string()).collect();
    tokens.extend(ranked.into_iter().take(MERGED_BIGRAMS).map(|(s, _)| s));
    Vocabulary::new("bigram", tokens).expect("bigrams are unique")
}

/// Window of a simulated model: top `window` noisy, smoothed log-truths.
fn noisy_window(truth: &[f64], q: Quality, window: usize, rng: &mut ChaCha8Rng) -> StepDistribution {
    let normal = Normal::new(0.0, q.noise).expect("valid sigma");
    let v = truth.len() as f64;
    let logits: Vec<f64> = truth
        .iter()
        .map(|&p| ((1.0 - q.smoothing) * p + q.smoothing / v).ln() + normal.sample(rng))
        .collect();
    StepDistribution::logits((0..truth.len() as TokenId).collect(), logits).top_k(window)
}

/// True next-token distribution over the bigram vocabulary given the
/// preceding character.
fn bigram_truth(chain: &CharChain, vocab: &Vocabulary, prev: Option<usize>) -> Vec<f64> {
    let first = chain.next(prev);
    let mut p = vec![0.0; vocab.size()];
    let mut continued = vec![0.0; ALPHABET];
    for (id, tok) in vocab.tokens().iter().enumerate() {
        let cs: Vec<char> = tok.chars().collect();
        if cs.len() == 2 {
            let (x, y) = (letter_index(cs[0]), letter_index(cs[1]));
            p[id] = first[x] * chain.transition[x][y];
            continued[x] += chain.transition[x][y];
        }
    }
    for x in 0..ALPHABET {
        let id = vocab.id_of(&letter(x).to_string()).expect("letters present") as usize;
        p[id] = first[x] * (1.0 - continued[x]).max(0.0);
    }
    p
}

fn source_matrix(
    text: &str,
    chain: &CharChain,
    vocab: &Vocabulary,
    q: Quality,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DistributionMatrix> {
    let seq = vocab.tokenize(text)?;
    let mut prev = None;
    let mut steps = Vec::with_capacity(seq.len());
    for piece in &seq.texts {
        steps.push(noisy_window(&bigram_truth(chain, vocab, prev), q, window, rng));
        prev = piece.chars().last().map(letter_index);
    }
    Ok(DistributionMatrix {
        vocab: vocab.name().to_owned(),
        gold_ids: seq.ids,
        steps,
    })
}

fn target_matrix(
    text: &str,
    chain: &CharChain,
    vocab: &Vocabulary,
    q: Quality,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DistributionMatrix> {
    let seq = vocab.tokenize(text)?;
    let mut prev = None;
    let mut steps = Vec::with_capacity(seq.len());
    for &id in &seq.ids {
        steps.push(noisy_window(chain.next(prev), q, window, rng));
        prev = Some(id as usize);
    }
    Ok(DistributionMatrix {
        vocab: vocab.name().to_owned(),
        gold_ids: seq.ids,
        steps,
    })
}

/// Builds the whole fixture set in memory. Deterministic in `cfg`.
pub fn generate(cfg: &FixtureConfig) -> Result<FixtureSet> {
    if cfg.window == 0 {
        return Err(Error::Invalid("window must be at least 1".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Invalid("need 1 <= min_len <= max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let truth = CharChain::random(&mut rng);
    let texts = |n: usize, rng: &mut ChaCha8Rng| {
        (0..n)
            .map(|_| {
                let len = rng.random_range(cfg.min_len..=cfg.max_len);
                truth.sample_text(rng, len)
            })
            .collect::<Vec<_>>()
    };
    let train_texts = texts(cfg.train_sequences, &mut rng);
    let heldout_texts = texts(cfg.heldout_sequences, &mut rng);

    let char_vocab = char_vocab();
    let bigram_vocab = bigram_vocab(&train_texts);

    let mut source = Vec::new();
    let mut source2 = Vec::new();
    let mut target = Vec::new();
    for t in &train_texts {
        source.push(source_matrix(t, &truth, &bigram_vocab, SOURCE_QUALITY, cfg.window, &mut rng)?);
        source2.push(source_matrix(t, &truth, &bigram_vocab, SOURCE2_QUALITY, cfg.window, &mut rng)?);
        target.push(target_matrix(t, &truth, &char_vocab, TARGET_QUALITY, cfg.window, &mut rng)?);
    }
    let heldout = heldout_texts
        .iter()
        .map(|t| target_matrix(t, &truth, &char_vocab, TARGET_QUALITY, cfg.window, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let embedding = Embedding::toy(char_vocab.size(), rng.random());

    Ok(FixtureSet {
        config: *cfg,
        truth,
        char_vocab,
        bigram_vocab,
        train_texts,
        heldout_texts,
        source,
        source2,
        target,
        heldout,
        embedding,
    })
}

impl FixtureSet {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.char_vocab.save(dir.join(CHAR_VOCAB_FILE))?;
        self.bigram_vocab.save(dir.join(BIGRAM_VOCAB_FILE))?;
        write_matrices(&self.source, dir.join(SOURCE_FILE))?;
        write_matrices(&self.source2, dir.join(SOURCE2_FILE))?;
        write_matrices(&self.target, dir.join(TARGET_FILE))?;
        write_matrices(&self.heldout, dir.join(HELDOUT_FILE))?;
        let emb = dir.join(EMBEDDING_FILE);
        fs::write(&emb, self.embedding.to_json() + "\n").map_err(|e| Error::io(&emb, e))
    }
}
