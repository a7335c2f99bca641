use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use signjoint::checkpoint::ModelCheckpoint;
use signjoint::config::{Precision, RunConfig};
use signjoint::data::{generate_corpus, DATA_ROOT_ENV};
use signjoint::experiment::{
    ablation_cells, average_files, evaluate, gradient_suite, load_examples, run_ablation, train, write_hypotheses, write_report,
};
use signjoint::{Error, Scalar};

#[derive(Parser, Debug)]
#[command(name = "signjoint", version, about = "Joint sign recognition and translation on synthetic gesture data")]
#[command(after_help = "Any config key can be overridden with a dotted flag, e.g. `--gathering.variant sparse` or `--model.lambda_t=0.0`.")]
struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/dev/test splits of the synthetic corpus.
    GenerateData {
        /// Output directory [default: $SIGNJOINT_DATA or ./data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model, writing metrics and checkpoints.
    Train {
        /// Dataset directory [default: $SIGNJOINT_DATA or ./data].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Decode a split with a checkpoint and report WER and BLEU.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory [default: $SIGNJOINT_DATA or ./data].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Report path [default: <checkpoint dir>/report_<split>.jsonl].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write gloss and word hypotheses for a split.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory [default: $SIGNJOINT_DATA or ./data].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks, one line per module.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every cell of the configured ablation grids.
    Ablate {
        /// Dataset directory [default: $SIGNJOINT_DATA or ./data].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
        /// Run only the grid with this name.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Average checkpoints parameter-wise.
    AverageCkpt {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Splits `--a.b value` / `--a.b=value` flags from the rest.
fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(arg);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("flag --{flag} needs a value"))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("data"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape { .. } | Error::NonFinite { .. } => 2,
        _ => 1,
    }
}

fn load_checkpoint<T: Scalar>(path: &Path, overrides: &[(String, String)]) -> Result<(RunConfig, signjoint::model::JointModel<T>), Error> {
    let ckpt = ModelCheckpoint::<T>::load(path)?;
    let parsed: Vec<_> = overrides.iter().map(|(k, v)| (k.clone(), signjoint::config::parse_value(v))).collect();
    let cfg = ckpt.config.with_overrides(&parsed)?;
    if cfg.architecture().digest() != ckpt.arch_digest {
        return Err(Error::Config("overrides change the model architecture stored in the checkpoint".into()));
    }
    let model = ckpt.restore()?;
    Ok((cfg, model))
}

fn run_typed<T: Scalar>(cli: Cli, overrides: &[(String, String)], cfg: RunConfig) -> Result<(), Error> {
    match cli.command {
        Command::GenerateData { out } => {
            let dir = data_dir(out);
            let paths = generate_corpus(&cfg.corpus, cfg.architecture().min_frames(), &dir)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Train { data, out } => {
            let dir = data_dir(data);
            let examples = load_examples::<T>(&cfg, &dir, "train")?;
            let outcome = train(&cfg, &examples, &out, |r| {
                eprintln!("step {:>6}  lr {:.3e}  ctc {:.4}  ce {:.4}  total {:.4}", r.step, r.lr, r.ctc_loss, r.ce_loss, r.total);
            })?;
            println!("wrote {} and {}", outcome.last.display(), outcome.averaged.display());
        }
        Command::Evaluate { checkpoint, data, split, out } => {
            let (cfg, model) = load_checkpoint::<T>(&checkpoint, overrides)?;
            let examples = load_examples::<T>(&cfg, &data_dir(data), &split)?;
            let (report, _) = evaluate(&model, &examples, &split, &cfg.decode)?;
            let out = out.unwrap_or_else(|| checkpoint.with_file_name(format!("report_{split}.jsonl")));
            write_report(&cfg, &report, &out)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Decode { checkpoint, data, split, out } => {
            let (cfg, model) = load_checkpoint::<T>(&checkpoint, overrides)?;
            let examples = load_examples::<T>(&cfg, &data_dir(data), &split)?;
            let hyps = signjoint::experiment::decode_all(&model, &examples, &cfg.decode)?;
            let out = out.unwrap_or_else(|| checkpoint.with_file_name(format!("hypotheses_{split}.jsonl")));
            write_hypotheses(&cfg, &hyps, &out)?;
            println!("wrote {} hypotheses to {}", hyps.len(), out.display());
        }
        Command::Gradcheck { seed } => {
            let mut failed = 0;
            for entry in gradient_suite(seed) {
                match &entry.report {
                    Ok(r) => {
                        let kinks: usize = r.params.iter().map(|p| p.one_sided).sum();
                        let status = if r.passed() { "PASS" } else { "FAIL" };
                        println!("{status} {:<24} max_rel_error {:.3e}  one-sided {kinks}", entry.name, r.max_rel_error);
                    }
                    Err(e) => println!("FAIL {:<24} {e}", entry.name),
                }
                failed += usize::from(!entry.passed());
            }
            if failed > 0 {
                return Err(Error::NonFinite { context: format!("{failed} gradient checks failed"), index: 0 });
            }
        }
        Command::Ablate { data, out, grid } => {
            let cells = ablation_cells(&cfg, grid.as_deref())?;
            let summaries = run_ablation::<T>(&cells, &data_dir(data), &out, |s| {
                let bleu = s.dev.translation.as_ref().map_or(0.0, |t| t.bleu[3]);
                println!("{:<14} {:<60} dev WER {:.4}  BLEU-4 {:.4}", s.grid, s.settings, s.dev.wer, bleu);
            })?;
            println!("{} cells, index at {}", summaries.len(), out.join("ablation.jsonl").display());
        }
        Command::AverageCkpt { out, inputs } => {
            let avg = average_files::<T>(&inputs)?;
            avg.save(&out)?;
            println!("averaged {} checkpoints into {}", inputs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match extract_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match RunConfig::load(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let result = match cfg.train.precision {
        Precision::F32 => run_typed::<f32>(cli, &overrides, cfg),
        Precision::F64 => run_typed::<f64>(cli, &overrides, cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
