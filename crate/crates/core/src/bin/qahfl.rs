use clap::{Parser, Subcommand, ValueEnum};
use qahfl::orchestrator::{
    export_metrics, load_data, parse_ablations, report, run_with_data, verify_suite, RoundStatus, RunConfig,
};
use qahfl::partition::make_plan;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const SEED_VAR: &str = "QAHFL_SEED";

#[derive(Parser)]
#[command(name = "qahfl", version, about = "Quality-aware hierarchical federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Build the federation plan and print per-client composition.
    Partition {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the plan as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a full federation and write ledgers into --out.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        privacy: Option<Switch>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Comma-separated components to disable.
        #[arg(long, value_name = "FLAG[,FLAG...]")]
        ablate: Option<String>,
    },
    /// Summarize a run directory.
    Report { dir: PathBuf },
    /// Run the built-in invariant checks.
    Verify {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn base_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let cfg = RunConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?;
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            Ok(cfg.rebase(dir))
        }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Config(format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn apply_seed(cfg: &mut RunConfig, flag: Option<u64>) -> Result<(), Failure> {
    if let Some(s) = env_seed()?.or(flag) {
        cfg.master_seed = s;
    }
    Ok(())
}

fn partition(config: Option<&Path>, seed: Option<u64>, json: Option<&Path>) -> Result<(), Failure> {
    let mut cfg = base_config(config)?;
    apply_seed(&mut cfg, seed)?;
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let (train, _) = load_data(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    let plan = make_plan(&train, &cfg.plan_config(), cfg.master_seed).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{:>6} {:>7} {:>5} {:>8} {:>9}  histogram", "client", "tier", "size", "primary", "primary%");
    for c in &plan.clients {
        let primary: Vec<String> = c.primary_classes.iter().map(|p| p.to_string()).collect();
        println!(
            "{:>6} {:>7} {:>5} {:>8} {:>9.3}  {:?}",
            c.client_id,
            c.tier.name(),
            c.size(),
            primary.join("/"),
            c.primary_fraction(),
            c.class_histogram()
        );
    }
    let counts = plan.tier_counts();
    println!("tiers low/medium/high: {}/{}/{}  gini {:.4}", counts[0], counts[1], counts[2], plan.gini);
    if let Some(path) = json {
        plan.export_json(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

struct RunArgs {
    config: Option<PathBuf>,
    seed: Option<u64>,
    privacy: Option<Switch>,
    rounds: Option<usize>,
    out: PathBuf,
    ablate: Option<String>,
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = base_config(args.config.as_deref())?;
    apply_seed(&mut cfg, args.seed)?;
    if let Some(p) = args.privacy {
        cfg.privacy = matches!(p, Switch::On);
    }
    if let Some(r) = args.rounds {
        cfg.rounds = r;
    }
    if let Some(list) = &args.ablate {
        let ablations = parse_ablations(list).map_err(|e| Failure::Config(e.to_string()))?;
        cfg.ablations.clear();
        cfg = cfg.with_ablations(&ablations);
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;

    let (train, test) = load_data(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    let out = run_with_data(&cfg, &train, &test).map_err(|e| Failure::Runtime(e.to_string()))?;
    export_metrics(&out, &args.out).map_err(|e| Failure::Runtime(e.to_string()))?;
    for r in &out.rounds {
        let acc = r.server_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        let status = if r.status == RoundStatus::Aborted { " (aborted)" } else { "" };
        println!("round {}: accuracy {acc}, {} uploads, {} bytes{status}", r.round, r.n_uploaded, r.bytes_total);
    }
    println!("ablations: {}  ledgers: {}", cfg.ablation_tag(), args.out.display());
    Ok(())
}

fn verify(seed: u64) -> Result<(), Failure> {
    let results = verify_suite(seed);
    for c in &results {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} checks failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Partition { config, seed, json } => partition(config.as_deref(), seed, json.as_deref()),
        Command::Run { config, seed, privacy, rounds, out, ablate } => {
            run(RunArgs { config, seed, privacy, rounds, out, ablate })
        }
        Command::Report { dir } => report(&dir).map(|t| print!("{t}")).map_err(|e| Failure::Runtime(e.to_string())),
        Command::Verify { seed } => verify(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
