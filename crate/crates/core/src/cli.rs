//! Command-line entry point.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data errors. Every run
//! prints its fully resolved manifest as one JSON line on stderr.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::align::{align_corpus, AlignConfig, Strategy};
use crate::diag::{step_diagnostic, Embedding};
use crate::dist::{read_matrices, write_matrices, DistributionMatrix};
use crate::error::{Error, Result};
use crate::fixtures::{generate, FixtureConfig, DEFAULT_SEED};
use crate::fusion::{
    clm_loss, corpus_losses, fusion_loss, train_toy, Discrepancy, FusionConfig, FusionFunction, ToyModel,
};
use crate::pairing::pair_tokens;
use crate::transport::{sinkhorn, CostMatrix, OtConfig};
use crate::vocab::{load_vocab, TokenId};

pub const DEFAULT_LR: f64 = 20.0;
pub const DEFAULT_EPOCHS: usize = 300;
pub const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Parser)]
#[command(name = "tokfuse", version, about = "Cross-tokenizer distribution alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Copy)]
struct OtArgs {
    /// Sinkhorn kernel sharpness: the plan starts at exp(-temperature * C).
    #[arg(long, default_value_t = 10.0)]
    temperature: f64,
    /// L1 marginal error at which Sinkhorn stops.
    #[arg(long, default_value_t = 1e-5)]
    threshold: f64,
    #[arg(long = "max-iters", default_value_t = 1000)]
    max_iters: usize,
}

impl OtArgs {
    fn config(&self) -> OtConfig {
        OtConfig {
            temperature: self.temperature,
            threshold: self.threshold,
            max_iterations: self.max_iters,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize text with a vocabulary file.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Pair two tokenizations of text.
    Pair {
        #[arg(long = "src-vocab")]
        src_vocab: PathBuf,
        #[arg(long = "tgt-vocab")]
        tgt_vocab: PathBuf,
        #[arg(long = "src-text")]
        src_text: String,
        #[arg(long = "tgt-text")]
        tgt_text: String,
    },
    /// Align source matrices onto the target tokenization.
    Align {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long = "src-vocab")]
        src_vocab: PathBuf,
        #[arg(long = "tgt-vocab")]
        tgt_vocab: PathBuf,
        #[arg(long, value_enum, default_value_t = Strategy::Ot)]
        strategy: Strategy,
        #[arg(long = "top-k", default_value_t = 10)]
        top_k: usize,
        #[command(flatten)]
        ot: OtArgs,
        /// Fused matrix output file.
        #[arg(long)]
        out: PathBuf,
        /// Also write the statistics JSON here.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Solve one transport instance read as JSON {"cost", "a", "b"}.
    Sinkhorn {
        /// Instance file; stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        ot: OtArgs,
    },
    /// Report CLM, fusion, and combined losses.
    Loss {
        /// Model predictions (logit windows are softmaxed).
        #[arg(long)]
        pred: PathBuf,
        /// Fused target distributions.
        #[arg(long)]
        fused: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        lambda: f64,
        #[arg(long, value_enum, default_value_t = Discrepancy::CrossEntropy)]
        discrepancy: Discrepancy,
    },
    /// Train the tabular toy model and write its loss trace as CSV.
    TrainToy {
        /// Vocabulary the corpus and fused matrices are over.
        #[arg(long)]
        vocab: PathBuf,
        /// Training corpus; only gold ids are used.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        /// Held-out corpus for a final CLM evaluation.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        lambda: f64,
        #[arg(long, default_value_t = DEFAULT_LR)]
        lr: f64,
        #[arg(long, default_value_t = DEFAULT_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Discrepancy::CrossEntropy)]
        discrepancy: Discrepancy,
        #[arg(long, value_enum, default_value_t = FusionFunction::Mince)]
        fusion: FusionFunction,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step compactness and center distance as CSV.
    Diag {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long = "top-k", default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic two-tokenizer fixture set.
    Fixtures {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long = "top-k", default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: &'static str,
    resolved_config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
}

impl Command {
    fn manifest(&self) -> RunManifest {
        let none: Vec<PathBuf> = Vec::new();
        match self {
            Command::Tokenize { vocab, text } => RunManifest {
                subcommand: "tokenize",
                resolved_config: json!({ "text": text }),
                inputs: vec![vocab.clone()],
                outputs: none,
                seed: None,
            },
            Command::Pair {
                src_vocab,
                tgt_vocab,
                src_text,
                tgt_text,
            } => RunManifest {
                subcommand: "pair",
                resolved_config: json!({ "src_text": src_text, "tgt_text": tgt_text }),
                inputs: vec![src_vocab.clone(), tgt_vocab.clone()],
                outputs: none,
                seed: None,
            },
            Command::Align {
                src,
                tgt,
                src_vocab,
                tgt_vocab,
                strategy,
                top_k,
                ot,
                out,
                stats,
            } => RunManifest {
                subcommand: "align",
                resolved_config: json!(AlignConfig {
                    strategy: *strategy,
                    ot: ot.config(),
                    window: *top_k,
                }),
                inputs: vec![src.clone(), tgt.clone(), src_vocab.clone(), tgt_vocab.clone()],
                outputs: std::iter::once(out.clone()).chain(stats.clone()).collect(),
                seed: None,
            },
            Command::Sinkhorn { input, ot } => RunManifest {
                subcommand: "sinkhorn",
                resolved_config: json!(ot.config()),
                inputs: input.iter().cloned().collect(),
                outputs: none,
                seed: None,
            },
            Command::Loss {
                pred,
                fused,
                lambda,
                discrepancy,
            } => RunManifest {
                subcommand: "loss",
                resolved_config: json!(FusionConfig {
                    function: FusionFunction::Mince,
                    discrepancy: *discrepancy,
                    combination_weight: *lambda,
                }),
                inputs: vec![pred.clone(), fused.clone()],
                outputs: none,
                seed: None,
            },
            Command::TrainToy {
                vocab,
                corpus,
                fused,
                heldout,
                lambda,
                lr,
                epochs,
                seed,
                discrepancy,
                fusion,
                out,
            } => RunManifest {
                subcommand: "train-toy",
                resolved_config: json!({
                    "fusion": FusionConfig {
                        function: *fusion,
                        discrepancy: *discrepancy,
                        combination_weight: *lambda,
                    },
                    "lr": lr,
                    "epochs": epochs,
                    "init_scale": INIT_SCALE,
                }),
                inputs: [vocab, corpus, fused].into_iter().cloned().chain(heldout.clone()).collect(),
                outputs: vec![out.clone()],
                seed: Some(*seed),
            },
            Command::Diag {
                fused,
                target,
                embedding,
                top_k,
                out,
            } => RunManifest {
                subcommand: "diag",
                resolved_config: json!({ "window": top_k }),
                inputs: vec![fused.clone(), target.clone(), embedding.clone()],
                outputs: vec![out.clone()],
                seed: None,
            },
            Command::Fixtures { seed, top_k, out } => RunManifest {
                subcommand: "fixtures",
                resolved_config: json!({ "window": top_k }),
                inputs: none,
                outputs: vec![out.clone()],
                seed: Some(*seed),
            },
        }
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct SinkhornInstance {
    cost: Vec<Vec<f64>>,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn read_instance(input: Option<&Path>) -> Result<SinkhornInstance> {
    let (raw, path) = match input {
        Some(p) => (fs::read_to_string(p).map_err(|e| Error::io(p, e))?, p.to_path_buf()),
        None => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| Error::io("<stdin>", e))?;
            (s, PathBuf::from("<stdin>"))
        }
    };
    serde_json::from_str(&raw).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        msg: e.to_string(),
    })
}

fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    let emit = |out: &mut dyn Write, v: &serde_json::Value| -> Result<()> {
        writeln!(out, "{v}").map_err(|e| Error::io("<stdout>", e))
    };
    match cmd {
        Command::Tokenize { vocab, text } => {
            let v = load_vocab(&vocab)?;
            emit(stdout, &json!(v.tokenize(&text)?))
        }
        Command::Pair {
            src_vocab,
            tgt_vocab,
            src_text,
            tgt_text,
        } => {
            let src = load_vocab(&src_vocab)?.tokenize(&src_text)?;
            let tgt = load_vocab(&tgt_vocab)?.tokenize(&tgt_text)?;
            emit(stdout, &json!(pair_tokens(&src, &tgt)?))
        }
        Command::Align {
            src,
            tgt,
            src_vocab,
            tgt_vocab,
            strategy,
            top_k,
            ot,
            out,
            stats,
        } => {
            let cfg = AlignConfig {
                strategy,
                ot: ot.config(),
                window: top_k,
            };
            let sv = load_vocab(&src_vocab)?;
            let tv = load_vocab(&tgt_vocab)?;
            let srcs = read_matrices(&src)?;
            let tgts = read_matrices(&tgt)?;
            let (fused, st) = align_corpus(&srcs, &tgts, &sv, &tv, &cfg)?;
            write_matrices(&fused, &out)?;
            let report = json!(st.report());
            if let Some(p) = stats {
                write_text(&p, &format!("{report}\n"))?;
            }
            emit(stdout, &report)
        }
        Command::Sinkhorn { input, ot } => {
            let inst = read_instance(input.as_deref())?;
            let cost = CostMatrix::from_rows(&inst.cost)?;
            let plan = sinkhorn(&cost, &inst.a, &inst.b, &ot.config())?;
            let rows: Vec<Vec<f64>> = plan.entries.rows().into_iter().map(|r| r.to_vec()).collect();
            emit(
                stdout,
                &json!({
                    "plan": rows,
                    "iterations": plan.iterations,
                    "converged": plan.converged,
                    "cost": plan.cost(&cost),
                }),
            )
        }
        Command::Loss {
            pred,
            fused,
            lambda,
            discrepancy,
        } => {
            let cfg = FusionConfig {
                function: FusionFunction::Mince,
                discrepancy,
                combination_weight: lambda,
            };
            cfg.validate()?;
            let preds = read_matrices(&pred)?;
            let fused = read_matrices(&fused)?;
            if preds.len() != fused.len() {
                return Err(Error::Shape(format!(
                    "{} prediction sequences vs {} fused sequences",
                    preds.len(),
                    fused.len()
                )));
            }
            let (mut clm, mut fus, mut steps) = (0.0, 0.0, 0usize);
            for (i, (q, p)) in preds.iter().zip(&fused).enumerate() {
                let q = q.to_probabilities().map_err(|e| e.at_sequence(i))?;
                let n = q.len() as f64;
                clm += clm_loss(&q, &p.gold_ids).map_err(|e| e.at_sequence(i))? * n;
                fus += fusion_loss(&q, p, discrepancy).map_err(|e| e.at_sequence(i))? * n;
                steps += q.len();
            }
            if steps == 0 {
                return Err(Error::Empty("prediction file"));
            }
            let (clm, fus) = (clm / steps as f64, fus / steps as f64);
            emit(
                stdout,
                &json!({ "clm": clm, "fusion": fus, "combined": lambda * clm + (1.0 - lambda) * fus }),
            )
        }
        Command::TrainToy {
            vocab,
            corpus,
            fused,
            heldout,
            lambda,
            lr,
            epochs,
            seed,
            discrepancy,
            fusion,
            out,
        } => {
            let cfg = FusionConfig {
                function: fusion,
                discrepancy,
                combination_weight: lambda,
            };
            let v = load_vocab(&vocab)?;
            let seqs: Vec<Vec<TokenId>> = read_matrices(&corpus)?.into_iter().map(|m| m.gold_ids).collect();
            let fused = read_matrices(&fused)?;
            let model = ToyModel::random(v.size(), INIT_SCALE, seed);
            let outcome = train_toy(&model, &seqs, &fused, &cfg, lr, epochs)?;
            let mut csv = String::from("epoch,clm,fusion,combined\n");
            for p in &outcome.trace {
                csv.push_str(&format!("{},{},{},{}\n", p.epoch, p.clm, p.fusion, p.combined));
            }
            write_text(&out, &csv)?;
            let last = outcome.trace.last().expect("trace has the initial point");
            let heldout_clm = match heldout {
                Some(h) => Some(heldout_clm(&outcome.model, &read_matrices(&h)?)?),
                None => None,
            };
            emit(
                stdout,
                &json!({ "final": last, "monotone": outcome.monotone, "heldout_clm": heldout_clm }),
            )
        }
        Command::Diag {
            fused,
            target,
            embedding,
            top_k,
            out,
        } => {
            let fused = read_matrices(&fused)?;
            let target = read_matrices(&target)?;
            let emb = Embedding::load(&embedding)?;
            let rows = diagnostics(&fused, &target, &emb, top_k)?;
            let mut csv = String::from("step,compactness_fused,compactness_target,center_distance\n");
            for (i, d) in rows.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{},{},{}\n",
                    d.compactness_fused, d.compactness_target, d.center_distance
                ));
            }
            write_text(&out, &csv)
        }
        Command::Fixtures { seed, top_k, out } => {
            let set = generate(&FixtureConfig {
                seed,
                window: top_k,
                ..FixtureConfig::default()
            })?;
            set.write(&out)
        }
    }
}

/// Mean gold CLM of `model` over every step of `corpus`.
pub fn heldout_clm(model: &ToyModel, corpus: &[DistributionMatrix]) -> Result<f64> {
    let seqs: Vec<Vec<TokenId>> = corpus.iter().map(|m| m.gold_ids.clone()).collect();
    let fused: Vec<DistributionMatrix> = corpus
        .iter()
        .map(|m| model.predict(&m.gold_ids, &m.vocab))
        .collect();
    let cfg = FusionConfig {
        combination_weight: 1.0,
        ..FusionConfig::default()
    };
    Ok(corpus_losses(model, &seqs, &fused, &cfg)?.0)
}

/// Per-step diagnostics of fused steps against windowed target steps,
/// flattened across sequences in input order.
pub fn diagnostics(
    fused: &[DistributionMatrix],
    target: &[DistributionMatrix],
    embedding: &Embedding,
    window: usize,
) -> Result<Vec<crate::diag::StepDiagnostic>> {
    if fused.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} fused sequences vs {} target sequences",
            fused.len(),
            target.len()
        )));
    }
    let mut rows = Vec::new();
    for (i, (f, t)) in fused.iter().zip(target).enumerate() {
        if f.len() != t.len() {
            return Err(Error::Shape(format!("sequence {i}: step counts differ")));
        }
        for (k, (fs, ts)) in f.steps.iter().zip(&t.steps).enumerate() {
            let tw = crate::align::window_probabilities(ts, window)
                .and_then(|tw| step_diagnostic(&fs.to_probabilities()?, &tw, embedding))
                .map_err(|e| e.at_step(k).at_sequence(i))?;
            rows.push(tw);
        }
    }
    Ok(rows)
}

/// Runs the command line `argv` (including the program name), writing
/// results to `stdout` and the manifest and diagnostics to `stderr`.
pub fn run_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    let manifest = cli.command.manifest();
    let _ = writeln!(
        stderr,
        "{}",
        serde_json::to_string(&manifest).expect("manifest serializes")
    );
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
