use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use craft_cli::config::{resolve, to_toml, Profile};
use craft_cli::formats::{matrix_csv, routing_csv};
use craft_cli::output::{check_dir, write_run, AuditOutcome};
use craft_core::metrics::{bwt_metric, op_metric, reference_fixture, REFERENCE_TASKS};
use craft_core::pipeline::{self, Mode, RunConfig, SweepAxis};
use craft_core::tasks::FamilyKind;
use craft_core::FrozenBackbone;

#[derive(Parser)]
#[command(name = "craft", version, about = "Continual learning with routed, anchored representation interventions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file layered over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Override any config key, e.g. `--set router.delta=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        resolve(self.profile, self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured stream and write a report directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Re-run the stream for each value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// delta, warmup_steps or beta.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare grouping modes on the same stream.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "all-in-one,task-similar-noreg,craft")]
        modes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a run directory: recompute metrics and the report hash.
    Report { dir: PathBuf },
    /// Warm up and route every task without training.
    Route {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the eta calibrated on a stream of same-mapping tasks.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        tasks_per_family: usize,
    },
    /// Route a far-family task against one trained group across deltas.
    Separation {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "copy")]
        first: String,
        #[arg(long, default_value = "marker-classification")]
        second: String,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,1,2,5,10")]
        deltas: Vec<f64>,
    },
    /// Print the reference 15-task matrix with its OP and BWT.
    Fixtures,
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn family_kind(s: &str) -> Result<FamilyKind> {
    Ok(match s {
        "modular-map" => FamilyKind::ModularMap,
        "copy" => FamilyKind::Copy,
        "reverse" => FamilyKind::Reverse,
        "marker-classification" => FamilyKind::MarkerClassification,
        _ => bail!("unknown family kind `{s}`"),
    })
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let backbone = FrozenBackbone::build(cfg.backbone)?;
    let tasks = cfg.stream.generate(cfg.seeds.data)?;
    let report = pipeline::run_tasks(cfg, &backbone, &tasks)?;
    if backbone.checksum() != report.backbone_checksum {
        bail!("backbone weights changed during the run");
    }
    std::fs::create_dir_all(out)?;
    let hash = write_run(out, cfg, &report, &backbone)?;
    print!("{}", pipeline::summary(&report));
    println!("report hash: {hash}");
    let audit = AuditOutcome::of(&report);
    if !audit.passed() {
        eprintln!(
            "audit failed: {} invariance violations, orthonormality error {:e}",
            audit.invariance_violations, audit.max_orthonormality_error
        );
    }
    Ok(audit.passed())
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { cfg, out } => run(&cfg.resolve()?, &out),
        Command::Sweep { cfg, axis, values, out } => {
            let axis = SweepAxis::parse(&axis).with_context(|| format!("unknown sweep axis `{axis}`"))?;
            let rows = pipeline::sweep(&cfg.resolve()?, axis, &values)?;
            let mut s = format!("{},groups,op,bwt,partition\n", axis.name());
            for r in rows {
                let part: Vec<String> = r
                    .partition
                    .iter()
                    .map(|g| g.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "))
                    .collect();
                s += &format!("{},{},{},{},{}\n", r.value, r.groups, r.op, r.bwt, part.join("|"));
            }
            write_or_print(out.as_deref(), &s)?;
            Ok(true)
        }
        Command::Ablate { cfg, modes, out } => {
            let cfg = cfg.resolve()?;
            let mut s = String::from("mode,beta,op,bwt\n");
            for name in &modes {
                let mode = Mode::parse(name).with_context(|| format!("unknown mode `{name}`"))?;
                let (op, bwt) = pipeline::ablate(&cfg, mode)?;
                let beta = if matches!(mode, Mode::AllInOne | Mode::TaskSimilarNoreg) { 0.0 } else { cfg.train.beta };
                s += &format!("{name},{beta},{op},{bwt}\n");
            }
            write_or_print(out.as_deref(), &s)?;
            Ok(true)
        }
        Command::Report { dir } => {
            let check = check_dir(&dir)?;
            print!("{}", std::fs::read_to_string(dir.join("summary.txt")).unwrap_or_default());
            println!("recomputed OP/BWT match: {}", check.metrics_match);
            println!("stored hash:   {}", check.stored_hash);
            println!("computed hash: {}", check.actual_hash);
            Ok(check.ok())
        }
        Command::Route { cfg } => {
            print!("{}", routing_csv(&pipeline::route_only(&cfg.resolve()?)?));
            Ok(true)
        }
        Command::Calibrate { cfg, tasks_per_family } => {
            let (eta, samples) = pipeline::calibrate_eta(&cfg.resolve()?, tasks_per_family)?;
            println!("eta = {eta}");
            println!("mu1 samples: {samples:?}");
            Ok(true)
        }
        Command::Separation { cfg, first, second, deltas } => {
            let points = pipeline::adversarial_separation(&cfg.resolve()?, family_kind(&first)?, family_kind(&second)?, &deltas)?;
            println!("delta,decision,distance,floor");
            for p in points {
                println!("{},{:?},{},{}", p.delta, p.decision, p.distance, p.floor_triggered);
            }
            Ok(true)
        }
        Command::Fixtures => {
            let m = reference_fixture();
            let names: Vec<String> = REFERENCE_TASKS.iter().map(|s| s.to_string()).collect();
            print!("{}", matrix_csv(&m, &names, op_metric(&m)?, bwt_metric(&m)?));
            Ok(true)
        }
        Command::Config { cfg } => {
            print!("{}", to_toml(&cfg.resolve()?)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
