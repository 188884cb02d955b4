//! `mmcache` command-line driver.
//!
//! Exit status: 0 when everything requested succeeded, 1 when a verification
//! or stability check failed (or a run failed), 2 on configuration errors.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmcache::geometry::{beam_coverage_probability, caching_duration_cdf, hof_probability, BeamGeometry, Pose};
use mmcache::matching::{
    dynamic_match_in, example_instance, write_match_csv, Game, GameInstance, MatchOutcome, Utilities,
};
use mmcache::oracle::{random_game_instance, run_suite, scan_all_blockings, write_checks_csv, Check, Suite};
use mmcache::scenario::{
    caching_rate, parse_speed, run_experiment, simulate, write_summary_csv, Experiment, ScenarioConfig, ScenarioError,
};

#[derive(Parser, Debug)]
#[command(name = "mmcache", version, about = "Cache-enabled mobility management simulator")]
struct Cli {
    /// Worker threads for replications and Monte Carlo loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; keys mirror the scenario config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key after the file is read (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, env = "MMCACHE_OUT", default_value = "mmcache-out")]
    out: PathBuf,
    /// Replications per sweep point (overrides the config)
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate closed-form results and write them as CSV.
    Analyze(AnalyzeArgs),
    /// Time-stepped handover simulation of the scenario's MUEs.
    Simulate(SimulateArgs),
    /// Run the two-period matching on one instance.
    Match(MatchArgs),
    /// Run oracle suites and report PASS/FAIL per check.
    Verify(VerifyArgs),
    /// Run the experiment sweeps and write one CSV per experiment.
    Reproduce(ReproduceArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Coverage,
    Cdf,
    Rate,
    Hof,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Quantity to evaluate
    #[arg(long, value_enum)]
    op: Op,
    /// Number of beams.
    #[arg(long, default_value = "3", value_delimiter = ',')]
    n: Vec<u32>,
    /// Beamwidth in radians.
    #[arg(long, value_delimiter = ',')]
    theta: Vec<f64>,
    /// Entry distance to the SBS in meters.
    #[arg(long, default_value = "20", value_delimiter = ',')]
    distance: Vec<f64>,
    /// Heading relative to the beam's entry edge, radians.
    #[arg(long, default_value = "1.5707963267948966", value_delimiter = ',')]
    heading: Vec<f64>,
    /// Speeds with optional unit suffix (m/s or km/h).
    #[arg(long, default_value = "16.6667", value_delimiter = ',')]
    speed: Vec<String>,
    /// Cell radius in meters.
    #[arg(long, default_value = "30", value_delimiter = ',')]
    radius: Vec<f64>,
    /// Upper end of the caching-duration grid, seconds.
    #[arg(long, default_value = "5")]
    t_max: f64,
    /// Grid points for the caching-duration CDF
    #[arg(long, default_value = "100")]
    points: usize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Master seed; every random draw derives from it
    #[arg(long)]
    seed: u64,
    /// Mute scans and coast on cached content.
    #[arg(long)]
    caching: bool,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[command(flatten)]
    common: Common,
    /// Master seed; every random draw derives from it
    #[arg(long)]
    seed: u64,
    /// Game instance as TOML; a random instance is drawn when absent.
    #[arg(long, conflicts_with = "example")]
    instance: Option<PathBuf>,
    /// The two-MUE worked example; the value is u1's utility for k1.
    #[arg(long, value_name = "PHI")]
    example: Option<f64>,
    /// Largest MUE count of a random instance
    #[arg(long, default_value = "6")]
    users: usize,
    /// Largest SBS count of a random instance
    #[arg(long, default_value = "3")]
    cells: usize,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Suite name or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Master seed for the Monte Carlo checks
    #[arg(long, default_value = "1")]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    #[command(flatten)]
    common: Common,
    /// Master seed; every random draw derives from it
    #[arg(long)]
    seed: u64,
    /// Run only these experiments (comma separated).
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
}

enum Failure {
    Config(String),
    Check(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config(_) | ScenarioError::UnknownExperiment(_) | ScenarioError::Packing { .. } => {
                Failure::Config(e.to_string())
            }
            other => Failure::Check(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Check(format!("i/o error: {e}"))
    }
}

type Outcome = Result<bool, Failure>;

fn check<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Check(e.to_string())
}

fn load_config(common: &Common, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            ScenarioConfig::from_toml_with_overrides(&text, &common.overrides).map_err(|e| match e {
                ScenarioError::Config(m) => Failure::Config(format!("{}: {m}", path.display())),
                other => other.into(),
            })?
        }
        None => ScenarioConfig::default().with_overrides(&common.overrides)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = common.replications {
        cfg.replications = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path, Failure> {
    fs::create_dir_all(&common.out)
        .map_err(|e| Failure::Config(format!("cannot create {}: {e}", common.out.display())))?;
    Ok(&common.out)
}

/// Writes `bytes` to `dir/name` and echoes them to stdout.
fn emit(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(dir.join(name), bytes)?;
    io::stdout().write_all(bytes)?;
    Ok(())
}

fn csv_line(cells: &[String]) -> String {
    let mut s = cells.join(",");
    s.push('\n');
    s
}

fn analyze(args: &AnalyzeArgs) -> Outcome {
    let cfg = load_config(&args.common, None)?;
    let speeds = args
        .speed
        .iter()
        .map(|s| parse_speed(s))
        .collect::<Result<Vec<_>, _>>()?;
    let thetas = if args.theta.is_empty() {
        vec![cfg.beamwidth_deg.to_radians()]
    } else {
        args.theta.clone()
    };
    let mut text = String::new();
    match args.op {
        Op::Coverage => {
            text += "n,theta [rad],coverage_probability\n";
            for &n in &args.n {
                for &t in &thetas {
                    let p = beam_coverage_probability(n, t).map_err(|e| Failure::Config(e.to_string()))?;
                    text += &csv_line(&[n.to_string(), format!("{t:?}"), format!("{p:?}")]);
                }
            }
        }
        Op::Cdf => {
            text += "distance [m],theta [rad],speed [m/s],t [s],cdf\n";
            for &r in &args.distance {
                for &t in &thetas {
                    for &v in &speeds {
                        let pose = Pose::new(r, 0.0, 0.0, v);
                        let beam = BeamGeometry::from_entry_pose([0.0, 0.0], args.n[0], t, &pose)
                            .map_err(|e| Failure::Config(e.to_string()))?;
                        for i in 0..=args.points {
                            let t0 = args.t_max * i as f64 / args.points.max(1) as f64;
                            let f = caching_duration_cdf(&pose, &beam, t0).map_err(|e| Failure::Config(e.to_string()))?;
                            text += &csv_line(&[format!("{r:?}"), format!("{t:?}"), format!("{v:?}"), format!("{t0:?}"), format!("{f:?}")]);
                        }
                    }
                }
            }
        }
        Op::Rate => {
            text += "distance [m],heading [rad],rate_los [bit/s],rate_nlos [bit/s]\n";
            for &r in &args.distance {
                for &h in &args.heading {
                    let los = caching_rate(&cfg, r, h, true).map_err(|e| Failure::Config(e.to_string()))?;
                    let nlos = caching_rate(&cfg, r, h, false).map_err(|e| Failure::Config(e.to_string()))?;
                    text += &csv_line(&[format!("{r:?}"), format!("{h:?}"), format!("{los:?}"), format!("{nlos:?}")]);
                }
            }
        }
        Op::Hof => {
            text += "speed [m/s],radius [m],t_mts [s],hof_probability,saturated\n";
            for &v in &speeds {
                for &a in &args.radius {
                    let h = hof_probability(v, cfg.t_mts, a).map_err(|e| Failure::Config(e.to_string()))?;
                    text += &csv_line(&[
                        format!("{v:?}"),
                        format!("{a:?}"),
                        format!("{:?}", cfg.t_mts),
                        format!("{:?}", h.probability),
                        h.saturated.to_string(),
                    ]);
                }
            }
        }
    }
    let name = format!("analyze_{}.csv", format!("{:?}", args.op).to_lowercase());
    emit(out_dir(&args.common)?, &name, text.as_bytes())?;
    Ok(true)
}

fn run_simulate(args: &SimulateArgs) -> Outcome {
    let cfg = load_config(&args.common, Some(args.seed))?;
    let dir = out_dir(&args.common)?;
    let sim = simulate(&cfg, args.seed, args.caching)?;
    let mut events = Vec::new();
    mmcache::handover::write_events_csv(&sim.events, &mut events).map_err(check)?;
    fs::write(dir.join("events.csv"), events)?;
    let mut summary = Vec::new();
    write_summary_csv(&sim.summary, &mut summary)?;
    emit(dir, "summary.csv", &summary)?;
    Ok(true)
}

fn load_instance(args: &MatchArgs) -> Result<(GameInstance, Option<Utilities>), Failure> {
    if let Some(phi) = args.example {
        let (inst, util) = example_instance(phi);
        return Ok((inst, Some(util)));
    }
    if let Some(path) = &args.instance {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        let inst = GameInstance::from_toml(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        return Ok((inst, None));
    }
    if args.users == 0 || args.cells == 0 {
        return Err(Failure::Config("--users and --cells must be positive".into()));
    }
    Ok((random_game_instance(args.seed, args.users, args.cells), None))
}

fn write_trace(outcome: &MatchOutcome) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stage", "round", "mue", "bs", "plan", "accepted"]).map_err(check)?;
    for e in &outcome.trace {
        let owner = mmcache::matching::PlayerId::mue(e.mue);
        w.write_record([
            e.stage.to_string(),
            e.round.to_string(),
            owner.to_string(),
            e.bs.to_string(),
            e.plan.label(owner),
            e.accepted.to_string(),
        ])
        .map_err(check)?;
    }
    w.into_inner().map_err(check)
}

fn run_match(args: &MatchArgs) -> Outcome {
    load_config(&args.common, Some(args.seed))?;
    let dir = out_dir(&args.common)?;
    let (inst, util) = load_instance(args)?;
    let game = match util {
        Some(u) => Game::with_utilities(&inst, u),
        None => Game::new(&inst),
    }
    .map_err(|e| Failure::Config(e.to_string()))?;
    let outcome = dynamic_match_in(&game);
    fs::write(dir.join("instance.toml"), inst.to_toml().map_err(check)?)?;
    fs::write(dir.join("trace.csv"), write_trace(&outcome)?)?;
    let report = scan_all_blockings(&game, &outcome.matching).map_err(check)?;
    let mut blocks = Vec::new();
    report.write_csv(&mut blocks).map_err(check)?;
    fs::write(dir.join("blocking.csv"), blocks)?;
    let mut rows = Vec::new();
    write_match_csv(&outcome, &mut rows).map_err(check)?;
    emit(dir, "match.csv", &rows)?;
    if report.is_empty() {
        eprintln!("stable: no blocking pairs");
    } else {
        eprintln!("{report}");
    }
    Ok(report.is_empty())
}

fn run_verify(args: &VerifyArgs) -> Outcome {
    load_config(&args.common, Some(args.seed))?;
    let suites: Vec<Suite> = if args.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        args.suite
            .split(',')
            .map(|s| Suite::parse(s.trim()).ok_or_else(|| Failure::Config(format!("unknown suite `{s}`"))))
            .collect::<Result<_, _>>()?
    };
    let dir = out_dir(&args.common)?;
    let mut checks: Vec<Check> = Vec::new();
    for suite in suites {
        checks.extend(run_suite(suite, args.seed).map_err(check)?);
    }
    for c in &checks {
        println!(
            "{} {}: {} (error {:e}, tolerance {:e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.suite,
            c.case,
            c.error,
            c.tolerance
        );
    }
    let mut csv = Vec::new();
    write_checks_csv(&checks, &mut csv).map_err(check)?;
    fs::write(dir.join("verify.csv"), csv)?;
    let passed = checks.iter().filter(|c| c.passed).count();
    println!("{passed}/{} checks passed", checks.len());
    Ok(passed == checks.len())
}

fn run_reproduce(args: &ReproduceArgs) -> Outcome {
    let cfg = load_config(&args.common, Some(args.seed))?;
    let exps: Vec<Experiment> = if args.only.is_empty() {
        Experiment::ALL.to_vec()
    } else {
        args.only
            .iter()
            .map(|s| s.trim().parse::<Experiment>())
            .collect::<Result<_, _>>()?
    };
    let dir = out_dir(&args.common)?;
    for exp in exps {
        let res = run_experiment(exp, &cfg)?;
        let mut csv = Vec::new();
        res.write_csv(&mut csv)?;
        fs::write(dir.join(format!("{}.csv", res.name)), csv)?;
        let mut manifest = Vec::new();
        res.write_manifest(&cfg, &mut manifest)?;
        fs::write(dir.join(format!("{}.manifest.toml", res.name)), manifest)?;
        println!("{}: {} rows, {:.1} s", res.name, res.rows.len(), res.runtime);
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Match(a) => run_match(a),
        Command::Verify(a) => run_verify(a),
        Command::Reproduce(a) => run_reproduce(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
    }
}
