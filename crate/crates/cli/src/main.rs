use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rnnorm::metrics::{metrics_csv, Split};
use rnnorm::persistence::{load_checkpoint, write_atomic};
use rnnorm::training::RunStatus;
use rnnorm::Error;
use rnnorm_cli::presets::{preset, preset_names};
use rnnorm_cli::spec::{parse_placement, RawSpec, RunSpec};
use rnnorm_cli::{comparison_report, run_eval, run_gradcheck, run_sweep, run_train, sequences_csv, write_sweep};

const EXIT_ERROR: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "rnnorm", version, about = "Train, evaluate and sweep batch-normalized recurrent networks")]
struct Cli {
    /// Seed for initialization, shuffling, dropout and sweep sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a spec entry, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// Spec file.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in spec; see `rnnorm presets`.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        source: Source,
    },
    /// Evaluate a checkpoint in inference mode.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train` or `valid`.
        #[arg(long, default_value = "valid")]
        split: String,
        /// Defaults to the training batch size.
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Random search over learning rate, momentum and batch size.
    Sweep {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        trials: Option<usize>,
        /// Run the same trials for each placement, e.g. `none,pre-activation`.
        #[arg(long, value_delimiter = ',')]
        placements: Vec<String>,
        #[arg(long)]
        lr_min: Option<f64>,
        #[arg(long)]
        lr_max: Option<f64>,
        #[arg(long)]
        momenta: Option<String>,
        #[arg(long)]
        batch_sizes: Option<String>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Perturb the backward pass so the check must fail.
        #[arg(long)]
        corrupt_backward: bool,
    },
    /// List the built-in specs, or print one.
    Presets { name: Option<String> },
}

fn load_raw(source: &Source) -> rnnorm::Result<(RawSpec, String)> {
    match (&source.spec, &source.preset) {
        (Some(path), _) => {
            let stem = path.file_stem().map_or("run".to_string(), |s| s.to_string_lossy().into_owned());
            Ok((RawSpec::load(path)?, stem))
        }
        (None, Some(name)) => {
            let text = preset(name).ok_or_else(|| {
                Error::Validation(vec![format!("unknown preset `{name}`; available: {}", preset_names().join(", "))])
            })?;
            Ok((RawSpec::parse(&text)?, name.clone()))
        }
        (None, None) => Err(Error::Validation(vec!["give --spec <file> or --preset <name>".into()])),
    }
}

fn resolve(cli: &Cli, mut raw: RawSpec) -> rnnorm::Result<RunSpec> {
    for s in &cli.set {
        raw.apply_override(s)?;
    }
    if let Some(seed) = cli.seed {
        raw.set("train", "seed", seed.to_string());
    }
    if let Some(out) = &cli.out {
        raw.set("output", "dir", out.display().to_string());
    }
    RunSpec::from_raw(&raw)
}

fn out_dir(spec: &RunSpec, fallback: &str) -> PathBuf {
    spec.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(fallback))
}

fn run(cli: &Cli) -> rnnorm::Result<u8> {
    match &cli.command {
        Command::Train { source } => {
            let (raw, name) = load_raw(source)?;
            let spec = resolve(cli, raw)?;
            let dir = out_dir(&spec, &name);
            let record = run_train(&spec, &dir, &mut std::io::stdout())?;
            println!("wrote {}", dir.join("metrics.csv").display());
            match record.status {
                RunStatus::Completed => Ok(0),
                RunStatus::Diverged { epoch, reason } => {
                    eprintln!("diverged in epoch {epoch}: {reason}");
                    Ok(EXIT_DIVERGED)
                }
            }
        }
        Command::Eval { checkpoint, split, batch_size } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "valid" => Split::Valid,
                other => return Err(Error::Validation(vec![format!("--split: `{other}` is not one of train, valid")])),
            };
            let ck = load_checkpoint(checkpoint)?;
            let spec = resolve(cli, RawSpec::parse(&ck.config_text)?)?;
            let bs = batch_size.unwrap_or(spec.train.batch_size);
            if bs == 0 {
                return Err(Error::Validation(vec!["--batch-size: must be >= 1".into()]));
            }
            let outcome = run_eval(&ck, &spec, split, bs)?;
            let csv = metrics_csv(std::slice::from_ref(&outcome.row));
            print!("{csv}");
            let dir = cli.out.clone().unwrap_or_else(|| checkpoint.parent().map_or(PathBuf::from("."), Path::to_path_buf));
            std::fs::create_dir_all(&dir)?;
            write_atomic(&dir.join(format!("eval-{}.csv", split.as_str())), csv.as_bytes())?;
            if let Some(per) = &outcome.sequences {
                write_atomic(&dir.join(format!("eval-{}-sequences.csv", split.as_str())), sequences_csv(per).as_bytes())?;
            }
            Ok(0)
        }
        Command::Sweep { source, trials, placements, lr_min, lr_max, momenta, batch_sizes } => {
            let (mut raw, name) = load_raw(source)?;
            let flags = [
                ("trials", trials.map(|t| t.to_string())),
                ("lr_min", lr_min.map(|v| v.to_string())),
                ("lr_max", lr_max.map(|v| v.to_string())),
                ("momenta", momenta.clone()),
                ("batch_sizes", batch_sizes.clone()),
            ];
            for (key, value) in flags {
                if let Some(v) = value {
                    raw.set("sweep", key, v);
                }
            }
            let spec = resolve(cli, raw)?;
            let placements = if placements.is_empty() {
                vec![spec.bn.placement]
            } else {
                placements
                    .iter()
                    .map(|p| parse_placement(p.trim()).map_err(|e| Error::Validation(vec![format!("--placements: {e}")])))
                    .collect::<rnnorm::Result<Vec<_>>>()?
            };
            let dir = out_dir(&spec, &format!("{name}-sweep"));
            let arms = run_sweep(&spec, &placements)?;
            write_sweep(&arms, &dir)?;
            print!("{}", comparison_report(&arms));
            println!("wrote results to {}", dir.display());
            Ok(0)
        }
        Command::Gradcheck { source, tolerance, corrupt_backward } => {
            let (raw, _) = load_raw(source)?;
            let spec = resolve(cli, raw)?;
            let cases = run_gradcheck(&spec, *corrupt_backward, *tolerance)?;
            let mut ok = true;
            for case in &cases {
                for p in &case.report.params {
                    println!(
                        "{} {:<28} {:<24} max rel error {:.3e} over {} elements",
                        if p.passed { "PASS" } else { "FAIL" },
                        case.label,
                        p.name,
                        p.max_rel_error,
                        p.elements_checked
                    );
                }
                ok &= case.report.passed();
            }
            println!("{} at tolerance {tolerance:e}", if ok { "all gradients agree" } else { "gradient check FAILED" });
            Ok(if ok { 0 } else { EXIT_CHECK_FAILED })
        }
        Command::Presets { name } => {
            match name {
                None => preset_names().into_iter().for_each(|n| println!("{n}")),
                Some(n) => print!(
                    "{}",
                    preset(n).ok_or_else(|| Error::Validation(vec![format!(
                        "unknown preset `{n}`; available: {}",
                        preset_names().join(", ")
                    )]))?
                ),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Error::Validation(errs)) => {
            for e in errs {
                eprintln!("error: {e}");
            }
            ExitCode::from(EXIT_INVALID)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
