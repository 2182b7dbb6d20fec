use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use certopf_core::attack::{pgd_attack, AttackConfig, PerturbationBall};
use certopf_core::nn::{load_network, save_network, train, Targets, TrainingConfig};
use certopf_core::verifier::{verify_pipeline, VerifyConfig};
use certopf_core::{Ball64, Network64};
use certopf_grid::control::{
    monte_carlo_validate, run_preventive_control, strategy_ball, ControlConfig, ControlOutcome, PipelineVerifier,
};
use certopf_grid::dataset::{label_dataset, sample_scenarios, ClassPercents, Dataset, ScenarioSampler};
use certopf_grid::opf::{pdipm_solve, OpfOptions, OpfProblem};
use certopf_grid::{simulate, solve_power_flow, FaultScenario, Injections, PowerSystemCase};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "certopf", version, about = "Certified transient-stability preventive control")]
struct Cli {
    /// Directory for result files and the run manifest.
    #[arg(long, global = true, env = "CERTOPF_OUT_DIR", default_value = "certopf-out")]
    out_dir: PathBuf,
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Sample operating points and label them by simulation.
    Gen(GenArgs),
    /// Train a classifier or regressor surrogate from a dataset.
    Train(TrainArgs),
    /// Search a ball for an input the classifier labels differently.
    Attack(AttackArgs),
    /// Verify that a classifier keeps its label over a ball.
    Verify(VerifyArgs),
    /// Solve the (stability-constrained) optimal power flow.
    Opf(OpfArgs),
    /// Run the λ bisection loop and certify a dispatch strategy.
    Control(ControlArgs),
    /// Simulate a fault and report the transient stability index.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    fault: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Relative sampling ranges, e.g. `ibr=30,sg=30,load=10`.
    #[arg(long, default_value = "ibr=30,sg=30,load=10")]
    percent: String,
    /// Sample around the OPF dispatch instead of the case set-points.
    #[arg(long)]
    center_opf: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum HeadArg {
    Classifier,
    Regressor,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Dataset CSV written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    head: HeadArg,
    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "16", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Output file name inside the output directory.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct BallArgs {
    /// Ball center: an inline JSON array or a JSON file holding one.
    #[arg(long)]
    center: String,
    /// Per-coordinate radii: an inline JSON array or a JSON file holding one.
    #[arg(long, conflicts_with = "percent")]
    radii: Option<String>,
    /// Radii as percents of |center|: one number for every coordinate, or
    /// `ibr=..,sg=..,load=..` together with `--class-map`.
    #[arg(long)]
    percent: Option<String>,
    /// Case file whose feature layout assigns each coordinate a class.
    #[arg(long, requires = "percent")]
    class_map: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AttackArgs {
    #[arg(long)]
    network: PathBuf,
    #[command(flatten)]
    ball: BallArgs,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Step size as a fraction of each radius.
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    network: PathBuf,
    #[command(flatten)]
    ball: BallArgs,
    /// Run the attack stage first (default).
    #[arg(long, overrides_with = "no_pgd")]
    pgd: bool,
    /// Skip the attack stage.
    #[arg(long, overrides_with = "pgd")]
    no_pgd: bool,
    /// Branch-and-bound domain budget.
    #[arg(long, default_value_t = 1 << 16)]
    budget_domains: usize,
    /// Branch-and-bound wall-clock budget (makes results timing dependent).
    #[arg(long)]
    budget_seconds: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct OpfArgs {
    #[arg(long)]
    case: PathBuf,
    /// Regressor network for the stability constraint.
    #[arg(long, required_unless_present = "disable_nn")]
    network: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Solve without the stability constraint.
    #[arg(long)]
    disable_nn: bool,
}

#[derive(Args, Debug, Serialize)]
struct ControlArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    fault: PathBuf,
    /// Classifier used for verification.
    #[arg(long)]
    net_c: PathBuf,
    /// Regressor used in the OPF.
    #[arg(long)]
    net_e: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    percent_ibr: f64,
    #[arg(long, default_value_t = 5.0)]
    percent_sg: f64,
    #[arg(long, default_value_t = 5.0)]
    percent_load: f64,
    #[arg(long, default_value_t = 1.0)]
    zeta: f64,
    /// Initial upper end of the λ bracket.
    #[arg(long, default_value_t = 90.0)]
    lambda_max: f64,
    /// Monte Carlo simulations inside the final ball (0 = skip).
    #[arg(long, default_value_t = 0)]
    mcs: usize,
    #[arg(long, default_value_t = 1 << 16)]
    budget_domains: usize,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    fault: PathBuf,
    /// Injections JSON (MW); defaults to the case set-points.
    #[arg(long)]
    dispatch: Option<PathBuf>,
}

/// A run that wrote its results but ended in a domain failure.
#[derive(Debug)]
struct DomainFailure(String);

impl std::fmt::Display for DomainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DomainFailure {}

struct Run {
    out_dir: PathBuf,
    seed: u64,
    outputs: Vec<String>,
    inputs: Vec<String>,
    timings: serde_json::Map<String, Value>,
}

impl Run {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.display().to_string());
        path.to_path_buf()
    }

    fn time(&mut self, key: &str, start: Instant) {
        self.timings.insert(key.into(), json!(start.elapsed().as_secs_f64()));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let mut run = Run {
        out_dir: cli.out_dir.clone(),
        seed: cli.seed,
        outputs: Vec::new(),
        inputs: Vec::new(),
        timings: serde_json::Map::new(),
    };
    let start = Instant::now();
    let result = match &cli.command {
        Command::Gen(a) => gen(&mut run, a),
        Command::Train(a) => train_cmd(&mut run, a),
        Command::Attack(a) => attack(&mut run, a),
        Command::Verify(a) => verify(&mut run, a),
        Command::Opf(a) => opf(&mut run, a),
        Command::Control(a) => control(&mut run, a),
        Command::Simulate(a) => simulate_cmd(&mut run, a),
    };
    run.time("total_seconds", start);
    let manifest = json!({
        "tool": "certopf",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": run.seed,
        "threads": cli.threads,
        "arguments": &cli.command,
        "inputs": run.inputs,
        "outputs": run.outputs,
        "status": match &result { Ok(()) => "ok".to_string(), Err(e) => format!("{e:#}") },
        "timings": run.timings,
    });
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(cli.out_dir.join("manifest.json"), text).context("writing the manifest")?;
    result
}

fn load_case(run: &mut Run, path: &Path) -> Result<PowerSystemCase> {
    PowerSystemCase::load(run.input(path)).with_context(|| format!("loading case {}", path.display()))
}

fn load_fault(run: &mut Run, path: &Path, case: &PowerSystemCase) -> Result<FaultScenario> {
    let fault = FaultScenario::load(run.input(path)).with_context(|| format!("loading fault {}", path.display()))?;
    fault.validate(case)?;
    Ok(fault)
}

fn load_net(run: &mut Run, path: &Path) -> Result<Network64> {
    load_network(run.input(path)).with_context(|| format!("loading network {}", path.display()))
}

fn gen(run: &mut Run, a: &GenArgs) -> Result<()> {
    let case = load_case(run, &a.case)?;
    let fault = load_fault(run, &a.fault, &case)?;
    let ranges = ClassPercents::parse(&a.percent)?;
    let base = if a.center_opf {
        let sol = pdipm_solve(&OpfProblem::nominal(&case), &OpfOptions::default())?;
        if !sol.converged {
            bail!(DomainFailure("base-case OPF did not converge".into()));
        }
        sol.strategy
    } else {
        let inj = case.nominal_injections();
        solve_power_flow(&case, &inj)?.resolved(&inj)
    };
    let sampler = ScenarioSampler {
        ranges,
        count: a.count,
        seed: run.seed,
    };
    let t = Instant::now();
    let scenarios = sample_scenarios(&case, &base, &sampler)?;
    let data = label_dataset(&case, &scenarios, &fault)?;
    run.time("labeling_seconds", t);
    let path = run.out_dir.join("dataset.csv");
    data.write_csv(&path)?;
    run.outputs.push("dataset.csv".into());
    let summary = json!({
        "samples": data.samples.len(),
        "dropped": data.dropped,
        "unstable_fraction": data.unstable_fraction(),
    });
    println!("{} samples, {} dropped, {:.1}% unstable", data.samples.len(), data.dropped, 100.0 * data.unstable_fraction());
    run.write_json("gen.json", &summary)
}

fn train_cmd(run: &mut Run, a: &TrainArgs) -> Result<()> {
    let data = Dataset::read_csv(run.input(&a.data)).with_context(|| format!("reading {}", a.data.display()))?;
    let x: Vec<Vec<f64>> = data.samples.iter().map(|s| s.x.clone()).collect();
    let (mut cfg, targets, default_name) = match a.head {
        HeadArg::Classifier => (
            TrainingConfig::classifier(a.hidden.clone(), run.seed),
            Targets::Labels(data.samples.iter().map(|s| s.stable).collect()),
            "dbn_c.json",
        ),
        HeadArg::Regressor => (
            TrainingConfig::regressor(a.hidden.clone(), run.seed),
            Targets::Values(data.samples.iter().map(|s| s.tsi).collect()),
            "dbn_e.json",
        ),
    };
    cfg.epochs = a.epochs;
    cfg.learning_rate = a.lr;
    cfg.batch_size = a.batch;
    let t = Instant::now();
    let (net, report) = train(&x, &targets, &cfg)?;
    run.time("training_seconds", t);
    let name = a.name.clone().unwrap_or_else(|| default_name.to_string());
    save_network(&net, run.out_dir.join(&name))?;
    run.outputs.push(name);
    let fit = match a.head {
        HeadArg::Classifier => {
            let correct = data
                .samples
                .iter()
                .filter(|s| net.margin(&s.x).map(|m| (m > 0.0) == s.stable).unwrap_or(false))
                .count();
            json!({ "accuracy": correct as f64 / data.samples.len() as f64 })
        }
        HeadArg::Regressor => {
            let mse = data
                .samples
                .iter()
                .map(|s| (net.objective(&s.x).unwrap_or(f64::NAN) - s.tsi).powi(2))
                .sum::<f64>()
                / data.samples.len() as f64;
            json!({ "rmse": mse.sqrt() })
        }
    };
    println!("trained on {} samples: {fit}", data.samples.len());
    run.write_json(
        "train.json",
        &json!({
            "samples": data.samples.len(),
            "config": cfg,
            "training_fit": fit,
            "final_loss": report.epoch_losses.last(),
        }),
    )
}

fn json_numbers(text: &str, what: &str) -> Result<Vec<f64>> {
    let raw = if text.trim_start().starts_with('[') {
        text.to_string()
    } else {
        std::fs::read_to_string(text).with_context(|| format!("reading {what} file {text}"))?
    };
    let v: Value = serde_json::from_str(&raw).with_context(|| format!("{what} must be JSON"))?;
    let arr = match v {
        Value::Object(mut m) => m.remove(what).or_else(|| m.remove("x")).unwrap_or(Value::Null),
        other => other,
    };
    serde_json::from_value(arr).with_context(|| format!("{what} must be an array of numbers"))
}

fn build_ball(run: &mut Run, b: &BallArgs, dim: usize) -> Result<Ball64> {
    let center = json_numbers(&b.center, "center")?;
    if center.len() != dim {
        bail!("center has {} entries, the network expects {dim}", center.len());
    }
    if !b.center.trim_start().starts_with('[') {
        run.input(Path::new(&b.center));
    }
    let radii = match (&b.radii, &b.percent, &b.class_map) {
        (Some(r), None, None) => json_numbers(r, "radii")?,
        (None, Some(p), None) => {
            let p: f64 = p.parse().context("--percent without --class-map takes one number")?;
            center.iter().map(|c| p / 100.0 * c.abs()).collect()
        }
        (None, Some(p), Some(path)) => {
            let case = load_case(run, path)?;
            if case.feature_dim() != dim {
                bail!("class map has {} features, the network expects {dim}", case.feature_dim());
            }
            let pct = ClassPercents::parse(p)?;
            let forecast: Vec<f64> = case.ibrs.iter().map(|r| r.forecast).collect();
            return Ok(strategy_ball(&case, &center, &forecast, &pct)?);
        }
        _ => bail!("give --radii or --percent"),
    };
    Ok(PerturbationBall::new(center, radii)?)
}

fn attack(run: &mut Run, a: &AttackArgs) -> Result<()> {
    let net = load_net(run, &a.network)?;
    let ball = build_ball(run, &a.ball, net.input_dim())?;
    let cfg = AttackConfig {
        steps: a.steps,
        eta: a.eta,
        restarts: a.restarts,
        seed: run.seed,
        ..AttackConfig::default()
    };
    let t = Instant::now();
    let cex = pgd_attack(&net, &ball, &cfg)?;
    run.time("attack_seconds", t);
    println!("{}", if cex.is_some() { "counterexample found" } else { "no counterexample found" });
    run.write_json(
        "attack.json",
        &json!({
            "found": cex.is_some(),
            "x_adv": cex.as_ref().map(|c| c.x.clone()),
            "margin": cex.as_ref().map(|c| c.margin),
            "center_margin": net.margin(ball.center())?,
        }),
    )
}

fn verify(run: &mut Run, a: &VerifyArgs) -> Result<()> {
    let net = load_net(run, &a.network)?;
    let ball = build_ball(run, &a.ball, net.input_dim())?;
    let mut cfg = VerifyConfig::new();
    cfg.run_pgd = !a.no_pgd;
    cfg.attack.seed = run.seed;
    cfg.bab.attack.seed = run.seed;
    cfg.bab.budget.max_domains = a.budget_domains;
    cfg.bab.budget.max_seconds = a.budget_seconds;
    let out = verify_pipeline(&net, &ball, &cfg)?;
    run.timings.insert("stage_times".into(), serde_json::to_value(out.times)?);
    println!("{} (bound {:?})", out.status, out.bound);
    run.write_json(
        "verify.json",
        &json!({
            "status": out.status,
            "bound": out.bound,
            "center_margin": net.margin(ball.center())?,
            "counterexample": out.counterexample,
            "stage": out.stage,
            "domains": out.domains,
            "stage_times": out.times,
        }),
    )
}

fn opf(run: &mut Run, a: &OpfArgs) -> Result<()> {
    let case = load_case(run, &a.case)?;
    let net = match (&a.network, a.disable_nn) {
        (Some(p), _) => Some(load_net(run, p)?),
        (None, _) => None,
    };
    let mut problem = OpfProblem::nominal(&case);
    if let Some(net) = &net {
        let lambda = if a.disable_nn { f64::NEG_INFINITY } else { a.lambda };
        problem = problem.with_stability(net, lambda);
    }
    let t = Instant::now();
    let sol = pdipm_solve(&problem, &OpfOptions::default())?;
    run.time("opf_seconds", t);
    let dispatch: Vec<Value> = case
        .generators
        .iter()
        .enumerate()
        .map(|(k, g)| json!({ "bus": g.bus, "p_mw": sol.strategy.p_sg[k], "q_mvar": sol.q_sg[k] }))
        .collect();
    let ibr: Vec<Value> = case
        .ibrs
        .iter()
        .enumerate()
        .map(|(k, r)| json!({ "bus": r.bus, "p_mw": sol.strategy.p_ibr[k], "q_mvar": sol.strategy.q_ibr[k], "forecast_mw": r.forecast }))
        .collect();
    println!("converged {} after {} iterations, cost {:.4} $/h", sol.converged, sol.iterations, sol.cost);
    run.write_json(
        "opf.json",
        &json!({
            "converged": sol.converged,
            "lambda": if a.disable_nn || net.is_none() { Value::Null } else { json!(a.lambda) },
            "cost": sol.cost,
            "dispatch": dispatch,
            "ibr": ibr,
            "tsi_estimate": sol.tsi_estimate,
            "kkt_residuals": sol.kkt,
            "power_balance": sol.power_balance,
            "iterations": sol.iterations,
            "strategy": sol.strategy,
        }),
    )?;
    if !sol.converged {
        bail!(DomainFailure(format!("OPF did not converge (max scaled residual {:.3e})", sol.kkt.max())));
    }
    Ok(())
}

fn control(run: &mut Run, a: &ControlArgs) -> Result<()> {
    let case = load_case(run, &a.case)?;
    let fault = load_fault(run, &a.fault, &case)?;
    let net_c = load_net(run, &a.net_c)?;
    let net_e = load_net(run, &a.net_e)?;
    let mut vcfg = VerifyConfig::new();
    vcfg.attack.seed = run.seed;
    vcfg.bab.attack.seed = run.seed;
    vcfg.bab.budget.max_domains = a.budget_domains;
    let verifier = PipelineVerifier { net: &net_c, config: vcfg };
    let cfg = ControlConfig {
        lambda_right: a.lambda_max,
        zeta: a.zeta,
        ball: ClassPercents {
            ibr: a.percent_ibr,
            sg: a.percent_sg,
            load: a.percent_load,
        },
        opf: OpfOptions::default(),
    };
    let base = OpfProblem::nominal(&case);
    let t = Instant::now();
    let report = run_preventive_control(&case, &base, &fault, &net_c, &net_e, &verifier, &cfg)?;
    run.time("control_seconds", t);
    run.timings.insert(
        "verify_seconds".into(),
        json!(report.log.iter().map(|r| r.verify_seconds).collect::<Vec<_>>()),
    );
    print!("{}", report.table_csv());
    run.write("control.csv", &report.table_csv())?;
    let mcs = match report.strategy() {
        Some(s) if a.mcs > 0 => {
            let center: Vec<f64> = s.ball_lower.iter().zip(&s.ball_upper).map(|(l, u)| 0.5 * (l + u)).collect();
            let radii: Vec<f64> = s.ball_lower.iter().zip(&s.ball_upper).map(|(l, u)| 0.5 * (u - l)).collect();
            let ball = PerturbationBall::new(center, radii)?;
            let t = Instant::now();
            let m = monte_carlo_validate(&case, &fault, &ball, a.mcs, run.seed)?;
            run.time("mcs_seconds", t);
            println!("monte carlo: {} of {} samples unstable", m.unstable, m.samples);
            Some(json!({ "samples": m.samples, "unstable": m.unstable, "dropped": m.dropped, "min_tsi": m.min_tsi }))
        }
        _ => None,
    };
    run.write_json(
        "strategy.json",
        &json!({ "outcome": report.outcome, "tds_tsi": report.tds_tsi, "monte_carlo": mcs }),
    )?;
    match &report.outcome {
        ControlOutcome::Infeasible { advice, .. } => bail!(DomainFailure(advice.clone())),
        ControlOutcome::Certified(_) if report.tds_tsi.is_some_and(|t| t <= 0.0) => {
            bail!(DomainFailure("certified strategy is unstable in simulation".into()))
        }
        ControlOutcome::Certified(_) => Ok(()),
    }
}

fn simulate_cmd(run: &mut Run, a: &SimulateArgs) -> Result<()> {
    let case = load_case(run, &a.case)?;
    let fault = load_fault(run, &a.fault, &case)?;
    let inj = match &a.dispatch {
        Some(p) => {
            let text = std::fs::read_to_string(run.input(p))?;
            let v: Value = serde_json::from_str(&text)?;
            let inner = v.get("strategy").cloned().unwrap_or(v);
            serde_json::from_value::<Injections>(inner).context("dispatch must be an injections object")?
        }
        None => case.nominal_injections(),
    };
    let t = Instant::now();
    let (pf, traj) = simulate(&case, &inj, &fault)?;
    run.time("simulation_seconds", t);
    let tsi = certopf_grid::compute_tsi(&traj)?;
    println!("TSI {tsi:.4}");
    run.write("trajectory.csv", &traj.to_csv())?;
    run.write_json(
        "simulate.json",
        &json!({
            "tsi": tsi,
            "stable": tsi > 0.0,
            "delta_max_deg": traj.delta_max_deg(),
            "diverged": traj.diverged,
            "power_flow_iterations": pf.iterations,
            "power_flow_mismatch": pf.mismatch,
        }),
    )
}
