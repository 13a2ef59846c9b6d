use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use warmstart::checkpoint;
use warmstart::corpus::{self, CorpusPreset, Document, Format};
use warmstart::evalstats::{self, CompareOptions, ProbeDataset, ProbeOptions};
use warmstart::model::ModelConfig;
use warmstart::rng;
use warmstart::synthetic::SyntheticLanguage;
use warmstart::tokenizer::{self, EncodeOptions, Specials, Tokenizer};
use warmstart::training::{self, PretrainData, TrainConfig};
use warmstart::transfer::{self, DonorModel, EmbeddingMatrix, TokenConventions};

mod ablate;

#[derive(Parser, Debug)]
#[command(name = "warmstart", version, about = "Desk-scale BERT-style pretraining toolkit")]
struct Cli {
    /// Root seed; every random draw is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Progress output on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Token, document and average-length counts per corpus file.
    CorpusStats {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value = "plain-blankline")]
        format: Format,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Learn a BPE vocabulary and merge table.
    TrainTokenizer {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value = "plain-blankline")]
        format: Format,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode stdin (or --input) line by line; prints one id list per line.
    Encode {
        #[arg(long)]
        tokenizer: PathBuf,
        /// Merge-dropout probability.
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Print token strings instead of ids.
        #[arg(long)]
        tokens: bool,
    },
    /// Initialize a model for a new tokenizer from a donor checkpoint.
    Transfer {
        #[arg(long)]
        donor: PathBuf,
        #[arg(long)]
        donor_tokenizer: PathBuf,
        #[arg(long)]
        target_tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Checkpoint whose token-type embeddings are copied (zeros if absent).
        #[arg(long)]
        token_type_donor: Option<PathBuf>,
        /// Marker and special-token mapping (`key = value` lines).
        #[arg(long)]
        conventions: Option<PathBuf>,
    },
    /// Train from a config file; writes model.ckpt and metrics.csv.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out MLM loss, perplexity and masked accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "plain-blankline")]
        format: Format,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Also train a linear probe on a synthetic classification task.
        #[arg(long)]
        probe: bool,
        /// Let the probe update the encoder.
        #[arg(long)]
        unfreeze: bool,
    },
    /// Median ± half range per variant and pairwise Welch tests.
    Compare {
        /// CSV with rows `variant,seed,score`.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
        /// Treat smaller scores as better (losses).
        #[arg(long)]
        lower_is_better: bool,
    },
    /// Run a matrix of training variants over several seeds and compare them.
    Ablate {
        /// Directory holding `manifest` and variant config files.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus in plain-blankline format.
    GenCorpus {
        #[arg(long, default_value = "small")]
        preset: CorpusPreset,
        #[arg(long, default_value_t = 100)]
        docs_per_source: usize,
        #[arg(long, default_value_t = 0)]
        language_seed: u64,
        #[arg(long, default_value_t = 120)]
        lexicon_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let verbose = cli.verbose;
    match cli.command {
        Command::CorpusStats {
            input,
            format,
            tokenizer,
        } => {
            let tok = Tokenizer::load(&tokenizer)?;
            let mut rows = Vec::new();
            let mut total = corpus::StatsAccumulator::default();
            for path in &input {
                let mut acc = corpus::StatsAccumulator::default();
                for doc in corpus::ingest(path, format)? {
                    acc.add(tok.encode_plain(&doc?.text).len());
                }
                total.merge(&acc);
                rows.push((path.display().to_string(), acc.finish()));
            }
            if rows.len() > 1 {
                rows.push(("total".into(), total.finish()));
            }
            print!("{}", stats_table(&rows));
        }
        Command::TrainTokenizer {
            input,
            format,
            vocab_size,
            out,
        } => {
            let docs = corpus::ingest_all(&input, format)?;
            let tok = tokenizer::train_bpe(docs.iter().cloned(), vocab_size, &Specials::default())?;
            tok.save(&out)?;
            println!(
                "vocabulary {} tokens, {} merges -> {}",
                tok.vocab_size(),
                tok.merges().len(),
                out.display()
            );
        }
        Command::Encode {
            tokenizer,
            dropout,
            input,
            tokens,
        } => {
            let tok = Tokenizer::load(&tokenizer)?;
            let reader: Box<dyn BufRead> = match &input {
                Some(p) => Box::new(std::io::BufReader::new(
                    std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?,
                )),
                None => Box::new(std::io::stdin().lock()),
            };
            let mut r = rng::named(seed.unwrap_or(0), "bpe-dropout");
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for line in reader.lines() {
                let line = line?;
                let ids = tok.encode(&line, EncodeOptions::dropout(dropout, &mut r));
                let fields: Vec<String> = if tokens {
                    ids.iter().map(|&i| tok.vocab().token(i).unwrap_or("?").to_string()).collect()
                } else {
                    ids.iter().map(u32::to_string).collect()
                };
                writeln!(out, "{}", fields.join(" "))?;
            }
        }
        Command::Transfer {
            donor,
            donor_tokenizer,
            target_tokenizer,
            out,
            report,
            token_type_donor,
            conventions,
        } => {
            let mut d = DonorModel::load(&donor, &donor_tokenizer)?;
            if let Some(c) = conventions {
                let text = std::fs::read_to_string(&c).with_context(|| format!("reading {}", c.display()))?;
                d = d.with_conventions(TokenConventions::parse(&text)?);
            }
            let target = Tokenizer::load(&target_tokenizer)?;
            let mut config = ModelConfig::load_sidecar(&donor)
                .with_context(|| format!("donor {} needs its .config sidecar", donor.display()))?;
            config.vocab_size = target.vocab_size();
            let tt = token_type_donor
                .map(|p| -> Result<EmbeddingMatrix> {
                    let params = checkpoint::load(&p)?;
                    Ok(EmbeddingMatrix::from_tensor(
                        params.tensor(warmstart::model::names::TOKEN_TYPE)?,
                    )?)
                })
                .transpose()?;
            let (params, rep) = transfer::warm_start(&d, target.vocab(), &config, tt.as_ref(), seed.unwrap_or(0))?;
            checkpoint::save(&params, &out)?;
            config.save_sidecar(&out)?;
            rep.write(&report)?;
            println!("{rep}");
        }
        Command::Pretrain { config, out } => pretrain(&config, &out, seed, verbose)?,
        Command::Eval {
            checkpoint: ckpt,
            tokenizer,
            data,
            format,
            batches,
            batch_size,
            probe,
            unfreeze,
        } => {
            let tok = Tokenizer::load(&tokenizer)?;
            let config = ModelConfig::load_sidecar(&ckpt)?;
            let params = checkpoint::load(&ckpt)?;
            let docs = corpus::ingest_all(&[data], format)?;
            let pd = PretrainData::new(&tok, &docs, config.max_seq_len, warmstart::objectives::DEFAULT_MASK_RATE)?;
            let eb = evalstats::eval_batches(&pd, seed.unwrap_or(0), batches, batch_size)?;
            let m = evalstats::heldout_mlm_metrics(&config, &params, &eb)?;
            println!("mlm_loss {:.6}", m.loss);
            println!("perplexity {:.4}", m.perplexity);
            println!("masked_accuracy {:.4}", m.masked_accuracy);
            println!("labelled_positions {}", m.labelled);
            if probe {
                let s = seed.unwrap_or(0);
                let ds = ProbeDataset::synthetic(config.vocab_size, tok.vocab().num_specials(), 2, 400, 12, 0.2, s)?;
                let (tr, te) = ds.split(0.8, s);
                let opts = ProbeOptions {
                    unfreeze,
                    seed: s,
                    ..ProbeOptions::default()
                };
                let r = evalstats::probe_finetune(&config, &params, &tr, &te, &opts)?;
                println!("probe_accuracy {:.4}", r.accuracy);
            }
        }
        Command::Compare {
            runs,
            threshold,
            lower_is_better,
        } => {
            let text = std::fs::read_to_string(&runs).with_context(|| format!("reading {}", runs.display()))?;
            let report = evalstats::ablation_compare(
                &evalstats::parse_runs_csv(&text)?,
                CompareOptions {
                    threshold,
                    higher_is_better: !lower_is_better,
                },
            )?;
            println!("{report}");
        }
        Command::Ablate { manifest, out } => ablate::run(&manifest, &out, seed, verbose)?,
        Command::GenCorpus {
            preset,
            docs_per_source,
            language_seed,
            lexicon_size,
            out,
        } => {
            let docs = SyntheticLanguage::new(language_seed, lexicon_size, 6).preset(
                preset,
                docs_per_source,
                rng::derive_seed(seed.unwrap_or(0), rng::stream::CORPUS),
            );
            corpus::write_plain(&docs, &out)?;
            println!("{} documents -> {}", docs.len(), out.display());
        }
    }
    Ok(())
}

fn stats_table(rows: &[(String, corpus::CorpusStats)]) -> String {
    let w = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<w$}  {:>12}  {:>10}  {:>8}\n", "Corpus", "Tokens", "Documents", "Avg len");
    for (name, st) in rows {
        s += &format!(
            "{:<w$}  {:>12}  {:>10}  {:>8.1}\n",
            name, st.token_count, st.document_count, st.avg_len
        );
    }
    s
}

/// Tokenizer named by the config, or one trained on the corpus (saved in
/// `out/tokenizer`).
pub(crate) fn resolve_tokenizer(cfg: &mut TrainConfig, docs: &[Document], out: &Path) -> Result<Tokenizer> {
    let tok = match &cfg.tokenizer {
        Some(dir) => Tokenizer::load(dir)?,
        None => {
            let size = if cfg.model.vocab_size == 0 { 1000 } else { cfg.model.vocab_size };
            let t = tokenizer::train_bpe(docs.iter().cloned(), size, &Specials::default())?;
            t.save(out.join("tokenizer"))?;
            t
        }
    };
    if cfg.model.vocab_size != 0 && cfg.model.vocab_size != tok.vocab_size() && cfg.tokenizer.is_some() {
        bail!(
            "config vocab_size {} differs from the tokenizer's {}",
            cfg.model.vocab_size,
            tok.vocab_size()
        );
    }
    cfg.model.vocab_size = tok.vocab_size();
    Ok(tok)
}

pub(crate) fn train_to_dir(cfg: &mut TrainConfig, out: &Path, verbose: u8) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let spec = cfg
        .corpus
        .clone()
        .context("config names no corpus (`corpus` or `corpus_preset`)")?;
    let docs = training::load_corpus(&spec)?;
    let tok = resolve_tokenizer(cfg, &docs, out)?;
    let (init, report) = training::initial_params(cfg, &tok)?;
    if let Some(r) = report {
        r.write(out.join("transfer_report.txt"))?;
    }
    let total = cfg.total_steps;
    let model_cfg = cfg.model.clone();
    let mut hook = |step: u64, p: &warmstart::ParamSet<f32>| -> warmstart::Result<()> {
        let path = if step == total {
            out.join("model.ckpt")
        } else {
            out.join(format!("step-{step}.ckpt"))
        };
        checkpoint::save(p, &path)?;
        model_cfg.save_sidecar(&path)?;
        if verbose > 0 {
            eprintln!("checkpoint {}", path.display());
        }
        Ok(())
    };
    let result = training::pretrain(cfg, &tok, &docs, init, &mut hook);
    let outcome = match result {
        Ok(o) => o,
        Err(warmstart::Error::Diverged { step, reason, last_good }) => {
            let p = out.join("last_good.ckpt");
            checkpoint::save(&last_good, &p)?;
            cfg.model.save_sidecar(&p)?;
            bail!("training diverged at step {step}: {reason}; last good parameters in {}", p.display());
        }
        Err(e) => return Err(e.into()),
    };
    let csv = training::metrics_csv(&outcome.metrics);
    let mpath = out.join("metrics.csv");
    std::fs::write(&mpath, csv).with_context(|| format!("writing {}", mpath.display()))?;
    if verbose > 0 {
        if let (Some(a), Some(b)) = (outcome.metrics.first(), outcome.metrics.last()) {
            eprintln!(
                "combined loss {:.4} (step {}) -> {:.4} (step {})",
                a.combined_loss, a.step, b.combined_loss, b.step
            );
        }
    }
    Ok(())
}

fn pretrain(config: &Path, out: &Path, seed: Option<u64>, verbose: u8) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    train_to_dir(&mut cfg, out, verbose)?;
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}
