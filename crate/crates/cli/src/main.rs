//! `a3`: train, sample, infill, evaluate and verify any-order models.
//!
//! Exit codes: 0 on success, 1 on runtime failure (including a failed
//! `verify`), 2 on bad usage.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a3_core::decode::{
    dynamic_resample, dynamic_resample_with, groupwise_fill, groupwise_sample, template, Criterion,
    DecodeConfig, DecodeOutput, DynamicContext, Strategy,
};
use a3_core::eval::{length_sweep, length_sweep_csv, sequence_nll};
use a3_core::grouping::{make_fixed, make_infill, make_permuted, make_singleton, Grouping, InfillSpec};
use a3_core::io::{load_checkpoint, pack_corpus, Checkpoint};
use a3_core::masking::MaskPair;
use a3_core::train::{loss_log_csv, train_run, DirSink};
use a3_core::verify;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "a3", version, about = "Any-order, any-subset autoregressive modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the three-stage curriculum from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Continue a prompt.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long, value_enum, default_value_t = StrategyArg::Groupwise)]
        strategy: StrategyArg,
    },
    /// Fill `--blanks` positions between a left and a right context.
    Infill {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "")]
        left: String,
        #[arg(long, default_value = "")]
        right: String,
        #[arg(long)]
        blanks: usize,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, value_enum, default_value_t = StrategyArg::Dynamic)]
        strategy: StrategyArg,
        /// How the known context is grouped.
        #[arg(long, value_enum, default_value_t = ContextArg::Split)]
        context: ContextArg,
    },
    /// Per-token NLL of a text file, or a context-length sweep.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated evaluation lengths; prints a CSV table.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        /// `singleton`, `fixed:<s>` or `permuted:<s>`.
        #[arg(long, default_value = "singleton")]
        grouping: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render the content and query masks of a grouping file.
    Masks {
        #[arg(long)]
        grouping: PathBuf,
        /// Prepend the BOS sentinel group.
        #[arg(long)]
        bos: bool,
    },
    /// Run the mask, leakage, normalization and gradient suites.
    Verify {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Fewer cases, for quick checks.
        #[arg(long)]
        small: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Groupwise,
    Dynamic,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Confidence,
    Entropy,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum ContextArg {
    /// One context group.
    Single,
    /// Every context position its own group, in position order.
    Split,
}

#[derive(clap::Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 1)]
    group_size: usize,
    #[arg(long, value_enum, default_value_t = CriterionArg::Confidence)]
    criterion: CriterionArg,
    #[arg(long, default_value_t = 1.5)]
    temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    /// Take the most likely token at every step.
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the commit trace of dynamic decoding to this CSV file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl DecodeArgs {
    fn config(&self, strategy: StrategyArg, max_new: usize) -> DecodeConfig {
        DecodeConfig {
            strategy: match strategy {
                StrategyArg::Groupwise => Strategy::Groupwise,
                StrategyArg::Dynamic => Strategy::Dynamic,
            },
            group_size: self.group_size,
            criterion: match self.criterion {
                CriterionArg::Confidence => Criterion::Confidence,
                CriterionArg::Entropy => Criterion::Entropy,
                CriterionArg::Random => Criterion::Random,
            },
            temperature: self.temperature,
            top_p: self.top_p,
            greedy: self.greedy,
            max_new,
            seed: self.seed,
            context: DynamicContext::CommitOrder,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns `Ok(false)` when the command ran but reported failure.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Train { config } => train(&config),
        Command::Sample {
            ckpt,
            prompt,
            decode,
            max_new,
            strategy,
        } => {
            let ck = load(&ckpt)?;
            let prompt = ck.tokenizer.encode(&prompt)?;
            let cfg = decode.config(strategy, max_new);
            let out = match strategy {
                StrategyArg::Groupwise => groupwise_sample(&ck.params, &prompt, &cfg)?,
                StrategyArg::Dynamic => dynamic_resample(&ck.params, &template(&prompt, max_new), &cfg)?,
            };
            finish_decode(&ck, &out, decode.trace.as_deref())
        }
        Command::Infill {
            ckpt,
            left,
            right,
            blanks,
            decode,
            strategy,
            context,
        } => {
            let ck = load(&ckpt)?;
            let (l, r) = (ck.tokenizer.encode(&left)?, ck.tokenizer.encode(&right)?);
            let spec = InfillSpec::contiguous(l.len(), blanks, r.len(), decode.group_size);
            let (g, k0) = make_infill(&spec)?;
            let known: Vec<usize> = g.groups()[..k0].iter().flatten().copied().collect();
            let mut groups = match context {
                ContextArg::Single if known.is_empty() => Vec::new(),
                ContextArg::Single => vec![known],
                ContextArg::Split => {
                    let mut k = known;
                    k.sort_unstable();
                    k.into_iter().map(|i| vec![i]).collect()
                }
            };
            let t: Vec<Option<u32>> = l
                .iter()
                .map(|&x| Some(x))
                .chain(std::iter::repeat_n(None, blanks))
                .chain(r.iter().map(|&x| Some(x)))
                .collect();
            let cfg = decode.config(strategy, blanks);
            let out = match strategy {
                StrategyArg::Groupwise => {
                    groups.extend(g.groups()[k0..].iter().cloned());
                    groupwise_fill(&ck.params, &t, &Grouping::new(groups), &cfg)?
                }
                StrategyArg::Dynamic => {
                    let mut criterion = cfg.criterion;
                    dynamic_resample_with(&ck.params, &t, groups, &mut criterion, &cfg)?
                }
            };
            finish_decode(&ck, &out, decode.trace.as_deref())
        }
        Command::Eval {
            ckpt,
            data,
            lengths,
            grouping,
            seed,
        } => {
            let ck = load(&ckpt)?;
            let bytes = fs::read(&data).with_context(|| format!("reading {}", data.display()))?;
            let tokens = ck.tokenizer.encode_bytes(&bytes)?;
            if let Some(lengths) = lengths {
                let max = ck.config().max_tokens();
                if let Some(bad) = lengths.iter().find(|&&l| l == 0 || l > max) {
                    bail!("evaluation length {bad} outside 1..={max}");
                }
                let rows = length_sweep(&ck.params, &tokens, &lengths)?;
                print!("{}", length_sweep_csv(&rows));
                return Ok(true);
            }
            let len = ck.config().max_tokens().min(tokens.len());
            let windows = pack_corpus(&tokens, len)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut total = 0.0;
            for w in &windows {
                let g = parse_grouping(&grouping, w.len(), &mut rng)?;
                total += sequence_nll(&ck.params, w, &g)?.nll;
            }
            let nll = total / windows.len() as f64;
            println!("grouping: {grouping}");
            println!("windows: {} x {len} tokens", windows.len());
            println!("nll (nats/token): {nll:.6}");
            println!("perplexity: {:.4}", nll.exp());
            Ok(true)
        }
        Command::Masks { grouping, bos } => {
            let text =
                fs::read_to_string(&grouping).with_context(|| format!("reading {}", grouping.display()))?;
            let g = Grouping::from_text(&text)?;
            g.validate(g.len())?;
            let masks = MaskPair::new(&g, bos)?;
            print!("{}", g.to_text());
            println!("\ncontent stream:");
            print!("{}", masks.content.render());
            println!("\nquery stream:");
            print!("{}", masks.query.render());
            Ok(true)
        }
        Command::Verify { ckpt, small, seed } => {
            let ck = ckpt.as_deref().map(load).transpose()?;
            let results = verify::run_all(ck.as_ref().map(|c| &c.params), small, seed);
            let mut ok = true;
            for r in &results {
                println!("{r}");
                ok &= r.passed;
            }
            Ok(ok)
        }
    }
}

fn parse_grouping(spec: &str, n: usize, rng: &mut ChaCha8Rng) -> Result<Grouping> {
    let size =
        |s: &str| -> Result<usize> { s.parse().with_context(|| format!("bad group size in {spec:?}")) };
    Ok(match spec.split_once(':') {
        None if spec == "singleton" => make_singleton(n)?,
        Some(("fixed", s)) => make_fixed(n, size(s)?)?,
        Some(("permuted", s)) => make_permuted(n, size(s)?, rng)?,
        _ => bail!("unknown grouping {spec:?}; use singleton, fixed:<s> or permuted:<s>"),
    })
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn finish_decode(ck: &Checkpoint, out: &DecodeOutput, trace: Option<&Path>) -> Result<bool> {
    println!("{}", ck.tokenizer.decode(&out.tokens)?);
    info!(
        "{} forward passes, {} evaluated positions",
        out.forward_passes, out.evaluated_positions
    );
    if let Some(path) = trace {
        fs::write(path, out.trace_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(true)
}

fn train(path: &Path) -> Result<bool> {
    let cfg = config::TrainConfig::load(path)?;
    let tokenizer = cfg.tokenizer()?;
    let bytes = fs::read(&cfg.data.path).with_context(|| format!("reading {}", cfg.data.path.display()))?;
    let tokens = tokenizer.encode_bytes(&bytes)?;
    let model = cfg.model_config(&tokenizer);
    let plan = cfg.plan();
    let corpus = pack_corpus(&tokens, plan.seq_len)?;
    if corpus.is_empty() {
        bail!(
            "corpus of {} tokens is shorter than one sequence of {}",
            tokens.len(),
            plan.seq_len
        );
    }
    info!(
        "training on {} sequences of {} tokens, vocabulary {}",
        corpus.len(),
        plan.seq_len,
        model.vocab_size
    );
    let mut sink = DirSink {
        dir: cfg.out.dir.clone(),
        tokenizer,
        seed: cfg.seed,
    };
    let out = train_run(&model, &plan, &corpus, &mut sink)?;
    fs::write(cfg.out.dir.join("loss.csv"), loss_log_csv(&out.log))?;
    info!("wrote checkpoints and loss.csv to {}", cfg.out.dir.display());
    Ok(true)
}
