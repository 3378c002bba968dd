use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpgroups::accountant::{
    account_ledger, calibrate, CalibrationRequest, Knob, OrderGrid, PrivacyGuarantee,
};
use dpgroups::allocation::NoiseStrategy;
use dpgroups::harness::{dp_sgd_train, AccountingOutcome, ClipLayout, TrainConfig};
use dpgroups::ledger::{AccountingOptions, Ledger};
use dpgroups::rng::Seed;
use dpgroups::sampling::SamplingPolicy;
use dpgroups::DpError;

const EXIT_ERROR: u8 = 1;
const EXIT_REFUSED: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "dpgroups",
    version,
    about = "Multi-group Gaussian mechanisms with ledger-based privacy accounting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute an (ε, δ) guarantee from a ledger file.
    Account(AccountArgs),
    /// Search for the noise multiplier or sampling rate that hits a target ε.
    Calibrate(CalibrateArgs),
    /// Train logistic regression with DP-SGD on synthetic data.
    Train(TrainArgs),
}

#[derive(Args)]
struct GridArgs {
    /// Comma-separated Rényi orders (each > 1). Defaults to 2..64 plus a few large orders.
    #[arg(long, value_delimiter = ',')]
    orders: Option<Vec<f64>>,
}

impl GridArgs {
    fn grid(&self) -> Result<OrderGrid, DpError> {
        match &self.orders {
            Some(o) => OrderGrid::new(o.clone()),
            None => Ok(OrderGrid::default()),
        }
    }
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long)]
    delta: f64,
    /// Account for zero-noise rounds anyway (reports ε = inf).
    #[arg(long, env = "DPGROUPS_ALLOW_INSECURE", value_parser = clap::builder::BoolishValueParser::new())]
    allow_insecure: bool,
    /// Refuse fixed-size sampling rounds instead of accounting them as Poisson.
    #[arg(long)]
    strict_fixed_size: bool,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum KnobArg {
    Z,
    Q,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    target_epsilon: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    steps: u64,
    #[arg(long, value_enum, default_value = "z")]
    knob: KnobArg,
    /// Sampling rate, held fixed when calibrating z.
    #[arg(long)]
    q: Option<f64>,
    /// Noise multiplier, held fixed when calibrating q.
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    lower: Option<f64>,
    #[arg(long)]
    upper: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// The fixed parameters were tuned on private data.
    #[arg(long)]
    tuned_on_private_data: bool,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Poisson,
    FixedSize,
    Disjoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Flat,
    PerLayer,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum AllocationArg {
    Proportional,
    DimAdjusted,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 2_000)]
    test_n: usize,
    #[arg(long, default_value_t = 1_000)]
    rounds: u64,
    #[arg(long, value_enum, default_value = "poisson")]
    policy: PolicyArg,
    /// Poisson sampling rate.
    #[arg(long, default_value_t = 0.01)]
    q: f64,
    /// Batch size for fixed-size and disjoint sampling.
    #[arg(long, default_value_t = 100)]
    batch: u64,
    #[arg(long, default_value_t = 1)]
    microbatch: usize,
    #[arg(long, value_enum, default_value = "per-layer")]
    layout: LayoutArg,
    /// Total gradient clipping norm.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Noise multiplier; 0 disables noise (insecure test mode).
    #[arg(long, default_value_t = 1.1)]
    z: f64,
    #[arg(long, value_enum, default_value = "proportional")]
    allocation: AllocationArg,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// 32 hex digits. Drawn from OS entropy when omitted. Anyone holding
    /// the seed can reproduce the noise, so treat it as a secret.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value = "dpgroups-ledger.txt")]
    ledger_out: PathBuf,
    #[arg(long, default_value = "dpgroups-report.json")]
    report_out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

fn print_guarantee(g: &PrivacyGuarantee) {
    println!("epsilon: {}", g.epsilon);
    println!("delta: {}", g.delta);
    match g.achieving_order {
        Some(o) => println!("order: {o}"),
        None => println!("order: none"),
    }
    for c in &g.caveats {
        println!("caveat: {c}");
    }
}

fn fail(e: &DpError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        DpError::Refusal(_) => ExitCode::from(EXIT_REFUSED),
        DpError::CalibrationInfeasible { .. } => ExitCode::from(EXIT_INFEASIBLE),
        _ => ExitCode::from(EXIT_ERROR),
    }
}

fn run_account(a: &AccountArgs) -> Result<(), DpError> {
    let ledger = Ledger::read_from(&a.ledger)?;
    let opts = AccountingOptions {
        allow_insecure: a.allow_insecure,
        allow_fixed_size: !a.strict_fixed_size,
    };
    let g = account_ledger(&ledger, a.delta, &a.grid.grid()?, opts)?;
    print_guarantee(&g);
    Ok(())
}

fn run_calibrate(a: &CalibrateArgs) -> Result<(), DpError> {
    let (knob, lower, upper) = match a.knob {
        KnobArg::Z => (
            Knob::NoiseMultiplier,
            a.lower.unwrap_or(0.3),
            a.upper.unwrap_or(50.0),
        ),
        KnobArg::Q => (
            Knob::SamplingRate,
            a.lower.unwrap_or(1e-6),
            a.upper.unwrap_or(1.0),
        ),
    };
    let need = |v: Option<f64>, flag: &str| {
        v.ok_or_else(|| DpError::InvalidInput(format!("--{flag} is required for this knob")))
    };
    let (q, z) = match knob {
        Knob::NoiseMultiplier => (need(a.q, "q")?, f64::NAN),
        Knob::SamplingRate => (f64::NAN, need(a.z, "z")?),
    };
    let req = CalibrationRequest {
        target_epsilon: a.target_epsilon,
        delta: a.delta,
        steps: a.steps,
        knob,
        q,
        z,
        lower,
        upper,
        tolerance: a.tolerance,
        grid: a.grid.grid()?,
        tuned_on_private_data: a.tuned_on_private_data,
    };
    match calibrate(&req) {
        Ok(out) => {
            let name = if knob == Knob::NoiseMultiplier {
                "z"
            } else {
                "q"
            };
            println!("{name}: {}", out.value);
            println!("epsilon: {}", out.epsilon);
            println!("probes: {}", out.probes);
            for w in &out.warnings {
                println!("warning: {w}");
            }
            Ok(())
        }
        Err(DpError::CalibrationInfeasible {
            target,
            lower_epsilon,
            upper_epsilon,
        }) => {
            eprintln!("target epsilon {target} is outside the bracket");
            eprintln!("epsilon at lower bound {lower}: {lower_epsilon}");
            eprintln!("epsilon at upper bound {upper}: {upper_epsilon}");
            Err(DpError::CalibrationInfeasible {
                target,
                lower_epsilon,
                upper_epsilon,
            })
        }
        Err(e) => Err(e),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), DpError> {
    std::fs::write(path, text)
        .map_err(|e| DpError::InvalidInput(format!("cannot write {}: {e}", path.display())))
}

fn run_train(a: &TrainArgs) -> Result<(), DpError> {
    let seed = match &a.seed {
        Some(hex) => Seed::from_hex(hex)?,
        None => Seed::from_os(),
    };
    let mut cfg = TrainConfig::default_with_seed(seed);
    cfg.n = a.n;
    cfg.dim = a.dim;
    cfg.separation = a.separation;
    cfg.test_n = a.test_n;
    cfg.rounds = a.rounds;
    cfg.policy = match a.policy {
        PolicyArg::Poisson => SamplingPolicy::PoissonIid { q: a.q },
        PolicyArg::FixedSize => SamplingPolicy::FixedSizeWor { batch: a.batch },
        PolicyArg::Disjoint => SamplingPolicy::DisjointPartition { batch: a.batch },
    };
    cfg.microbatch_size = a.microbatch;
    cfg.layout = match a.layout {
        LayoutArg::Flat => ClipLayout::Flat,
        LayoutArg::PerLayer => ClipLayout::PerLayer,
        LayoutArg::Joint => ClipLayout::Joint,
    };
    cfg.clip_norm = a.clip;
    cfg.noise_multiplier = a.z;
    cfg.allocation = match a.allocation {
        AllocationArg::Proportional => NoiseStrategy::Proportional,
        AllocationArg::DimAdjusted => NoiseStrategy::DimensionalityAdjusted,
    };
    cfg.learning_rate = a.lr;
    cfg.delta = a.delta;
    cfg.grid = a.grid.grid()?;

    let mut out = dp_sgd_train(&cfg)?;
    out.ledger.write_to(&a.ledger_out).map_err(|e| {
        DpError::InvalidInput(format!("cannot write {}: {e}", a.ledger_out.display()))
    })?;
    out.report.ledger_path = Some(a.ledger_out.display().to_string());
    let json = serde_json::to_string_pretty(&out.report)
        .map_err(|e| DpError::InvalidInput(e.to_string()))?;
    write_file(&a.report_out, &(json + "\n"))?;

    let r = &out.report;
    println!("ledger: {}", a.ledger_out.display());
    println!("report: {}", a.report_out.display());
    println!("rounds: {}", r.private_accuracy_per_round.len());
    println!(
        "heldout accuracy (non-private): {:.4}",
        r.heldout_accuracy_non_private
    );
    if let Some(last) = r.private_accuracy_per_round.last() {
        println!("private accuracy estimate, last round: {last:.4}");
    }
    if r.test_mode {
        println!("test mode: no noise was added");
    }
    match &r.accounting {
        AccountingOutcome::Guarantee(g) => {
            match g.epsilon {
                Some(e) => println!("epsilon: {e}"),
                None => println!("epsilon: inf"),
            }
            println!("delta: {}", g.delta);
            for c in &g.caveats {
                println!("caveat: {c}");
            }
            Ok(())
        }
        AccountingOutcome::Refused { reason } => Err(DpError::Refusal(reason.clone())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Account(a) => run_account(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Train(a) => run_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
