use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedleak_cli::attack::{attack_id, run_attack, RunContext};
use fedleak_cli::config::{seed_override, ExperimentConfig};
use fedleak_cli::error::Result;
use fedleak_cli::federate::federate;
use fedleak_cli::plot::plot;
use fedleak_cli::report::{compile, load_report};
use fedleak_cli::sweep::sweep;
use fedleak_core::defense::Mechanism;

#[derive(Parser)]
#[command(name = "fedleak", version, about = "Gradient-leakage auditing for federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a federation and persist every round.
    Federate {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `<output>/runs/<id>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        dp: DpArgs,
    },
    /// Invert one stored client update.
    Attack(AttackArgs),
    /// Federate once per DP setting, attack the targets, write the report.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Rebuild `report.json` and `metrics.csv` from a sweep directory.
    Report {
        /// Sweep output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render figures from a report.
    Plot {
        /// `report.json` or the directory holding it.
        #[arg(long)]
        report: PathBuf,
        /// Defaults to `plots/` next to the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DpMech {
    None,
    PercentileGaussian,
    DpSgd,
}

/// Overrides the DP setting of every client.
#[derive(Args)]
struct DpArgs {
    #[arg(long = "dp-mech", value_enum)]
    mech: Option<DpMech>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long = "clip-norm")]
    clip_norm: Option<f64>,
    #[arg(long = "noise-mult")]
    noise_mult: Option<f64>,
}

impl DpArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let given = self.mech.is_some()
            || self.sigma0.is_some()
            || self.q.is_some()
            || self.clip_norm.is_some()
            || self.noise_mult.is_some();
        if !given {
            return Ok(());
        }
        let mut dp = cfg.plan.clients.first().map(|c| c.dp.clone()).unwrap_or_default();
        if let Some(m) = self.mech {
            dp.mechanism = match m {
                DpMech::None => Mechanism::None,
                DpMech::PercentileGaussian => Mechanism::PercentileGaussian,
                DpMech::DpSgd => Mechanism::DpSgd,
            };
        }
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut dp.sigma0, self.sigma0);
        set(&mut dp.q, self.q);
        set(&mut dp.clip_norm, self.clip_norm);
        set(&mut dp.noise_mult, self.noise_mult);
        dp.validate()?;
        cfg.plan = cfg.plan_with(&dp);
        Ok(())
    }
}

#[derive(Args)]
struct AttackArgs {
    /// Run directory written by `federate`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    client: String,
    #[arg(long)]
    round: usize,
    /// Attack directory; defaults to `<run>/attacks/<id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_bn_loss: bool,
    #[arg(long)]
    no_global_ckpt: bool,
    #[arg(long)]
    no_prior: bool,
    #[arg(long)]
    grayscale: bool,
}

fn cmd_attack(a: &AttackArgs) -> Result<serde_json::Value> {
    let ctx = RunContext::open(&a.run)?;
    let mut cfg = ctx.experiment.attack.clone();
    if let Some(s) = seed_override()? {
        cfg.seed = s;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.restarts {
        cfg.restarts = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.use_bn_loss &= !a.no_bn_loss;
    cfg.use_global_ckpt &= !a.no_global_ckpt;
    cfg.use_prior &= !a.no_prior;
    cfg.grayscale |= a.grayscale;
    cfg.validate()?;
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| a.run.join("attacks").join(attack_id(&a.client, a.round, &cfg)));
    let rec = run_attack(&ctx, &a.client, a.round, &cfg, &dir)?;
    Ok(serde_json::json!({
        "dir": dir,
        "id": rec.id,
        "arm": rec.arm,
        "ssim": rec.ssim,
        "ssim_prior": rec.ssim_prior,
        "rdlv": rec.rdlv,
        "labels": rec.labels,
        "true_labels": rec.true_labels,
        "diverged": rec.diverged,
    }))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Federate { config, out, dp } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            dp.apply(&mut cfg)?;
            let dir = out.unwrap_or_else(|| cfg.output.join("runs").join(&cfg.id));
            let s = federate(&cfg, &dir)?;
            Ok(serde_json::json!({ "run": dir, "summary": s }))
        }
        Command::Attack(a) => cmd_attack(&a),
        Command::Sweep { config, workers } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = sweep(&cfg, workers)?;
            Ok(serde_json::json!({ "output": cfg.output, "records": r.records.len(), "iip": r.iip.len() }))
        }
        Command::Report { out } => {
            let r = compile(&out)?;
            Ok(serde_json::json!({ "output": out, "records": r.records.len() }))
        }
        Command::Plot { report, out } => {
            let r = load_report(&report)?;
            let base = if report.is_dir() { report.clone() } else { report.parent().map(Path::to_path_buf).unwrap_or_default() };
            let dir = out.unwrap_or_else(|| base.join("plots"));
            let files = plot(&r, &dir)?;
            Ok(serde_json::json!({ "files": files }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
