//! Experiment runner. Every command writes its outputs under
//! `<out>/<hash>/` next to a `record.json`, and appends one line per new run
//! to `<out>/index.jsonl`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arpo::{arpo_solve, ArpoError, ArpoInstance, ArpoSolution};
use crate::env::{check_waypoints, concat_waypoints, run_batches, write_waypoints, EnvError, EpisodeLog, Policy};
use crate::ppo::{
    aggregate_curves, evaluate_policy, mean, train, GaussianPolicy, GeometricHeuristic, PpoActor, PpoError, RandomPolicy,
    TrainConfig,
};
use crate::reward_designer::{design, DesignConfig, DesignError, DesignTranscript, EvalBudget, HttpClient, MockClient};
use crate::reward_dsl::{DslError, DslReward};
use crate::rewards::{ManualBottleneck, RewardFn, RiskReward};
use crate::scenario::{seed_from_env, ConfigError, Scenario};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Arpo(#[from] ArpoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error("design aborted: {error} (partial transcript at {transcript})")]
    Design { error: DesignError, transcript: PathBuf },
    #[error(transparent)]
    DesignSetup(#[from] DesignError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("train config: {0}")]
    TrainConfig(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "laenet", version, about = "UAV onboard-VLM latency solver and trajectory learner")]
pub struct Cli {
    /// Base directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Master seed; LAENET_SEED overrides it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve resolutions and powers for one pose, or sweep ζ.
    Arpo(ArpoArgs),
    /// Train PPO (or evaluate a baseline) and export curves and trajectories.
    Train(TrainArgs),
    /// Run the reward-design loop, or re-select from a saved transcript.
    Design(DesignArgs),
    /// Latency matrix over bandwidth and max power for a fixed policy.
    SweepResources(SweepArgs),
    /// Serve several user batches back to back.
    Batches(BatchArgs),
    /// Print the default scenario as TOML.
    DefaultConfig,
}

#[derive(Debug, Args, Serialize)]
pub struct ArpoArgs {
    /// Scenario TOML; the built-in default when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub zeta: Option<f64>,
    /// UAV pose as x,y,z in m; the scenario start pose when omitted.
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub pose: Option<[f64; 3]>,
    /// lo:hi:steps, inclusive on both ends.
    #[arg(long, value_parser = parse_sweep)]
    pub sweep_zeta: Option<(f64, f64, usize)>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// risk, manual, or a path to a reward program.
    #[arg(long, default_value = "risk")]
    pub reward: String,
    /// Evaluate rp or gh without training.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, default_value_t = 300)]
    pub episodes: usize,
    /// Number of training seeds, counted up from the master seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 5)]
    pub eval_episodes: usize,
    /// TOML with PPO settings; the desk defaults otherwise.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DesignArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mock:FILE or http.
    #[arg(long, default_value = "mock:fixtures/design_mock.json")]
    pub client: String,
    /// Model name for the http client.
    #[arg(long, default_value = "gpt-4o")]
    pub model: String,
    #[arg(long, default_value_t = crate::reward_designer::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = crate::reward_designer::DEFAULT_ROUNDS)]
    pub rounds: usize,
    #[arg(long, default_value_t = crate::reward_designer::DEFAULT_TOP_M)]
    pub top_m: usize,
    /// Free-text operator insights for refinement prompts.
    #[arg(long)]
    pub insights: Option<PathBuf>,
    #[arg(long)]
    pub train_episodes: Option<usize>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub eval_seeds: Option<u64>,
    /// Re-select from this transcript without calling any client.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated bandwidths in Hz.
    #[arg(long, value_delimiter = ',', required = true)]
    pub bandwidth_list: Vec<f64>,
    /// Comma-separated max powers in W.
    #[arg(long, value_delimiter = ',', required = true)]
    pub pmax_list: Vec<f64>,
    /// gh, rp, or a policy checkpoint.
    #[arg(long, default_value = "gh")]
    pub policy: String,
    #[arg(long, default_value_t = 3)]
    pub episodes: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BatchArgs {
    /// One scenario TOML per batch, in service order.
    #[arg(long = "config", required = true)]
    pub configs: Vec<PathBuf>,
    #[arg(long, default_value = "gh")]
    pub policy: String,
}

fn parse_pose(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "pose needs exactly x,y,z".to_string())
}

fn parse_sweep(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts[..] else {
        return Err("expected lo:hi:steps".into());
    };
    let lo: f64 = lo.trim().parse().map_err(|e| format!("lo: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("hi: {e}"))?;
    let n: usize = n.trim().parse().map_err(|e| format!("steps: {e}"))?;
    if n < 2 || !(hi > lo) {
        return Err("need steps >= 2 and hi > lo".into());
    }
    Ok((lo, hi, n))
}

/// Summary of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub hash: String,
    pub command: String,
    pub config: serde_json::Value,
    pub scenario_hash: String,
    pub seed: u64,
    /// File names inside the run directory.
    pub outputs: Vec<String>,
    pub metrics: serde_json::Value,
    pub wall_clock_s: f64,
    pub artifact_version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn scenario_hash(sc: &Scenario) -> String {
    sha256_hex(sc.to_toml().as_bytes())
}

/// Collects the files of one run before its record is written.
struct Run {
    dir: PathBuf,
    hash: String,
    command: String,
    config: serde_json::Value,
    scenario_hash: String,
    seed: u64,
    outputs: Vec<String>,
    started: Instant,
}

impl Run {
    fn start(base: &Path, command: &str, config: serde_json::Value, scenarios: &[&Scenario], seed: u64) -> Result<Run, CliError> {
        let scenario_hash = scenarios.iter().map(|s| scenario_hash(s)).collect::<Vec<_>>().join("+");
        let key = serde_json::json!({
            "command": command,
            "config": config,
            "scenario": scenario_hash,
            "seed": seed,
            "version": ARTIFACT_VERSION,
        });
        let hash = sha256_hex(key.to_string().as_bytes())[..16].to_string();
        let dir = base.join(&hash);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Run {
            dir,
            hash,
            command: command.into(),
            config,
            scenario_hash,
            seed,
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(io_err(&p))
    }

    fn csv(&mut self, name: &str) -> Result<csv::Writer<fs::File>, CliError> {
        let p = self.path(name);
        let f = fs::File::create(&p).map_err(io_err(&p))?;
        Ok(csv::Writer::from_writer(f))
    }

    /// The record is written once; a repeated identical run leaves it alone.
    fn finish(self, base: &Path, metrics: serde_json::Value) -> Result<RunRecord, CliError> {
        let rec = RunRecord {
            hash: self.hash.clone(),
            command: self.command,
            config: self.config,
            scenario_hash: self.scenario_hash,
            seed: self.seed,
            outputs: self.outputs,
            metrics,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            artifact_version: ARTIFACT_VERSION.into(),
        };
        let rec_path = self.dir.join("record.json");
        if rec_path.exists() {
            return Ok(rec);
        }
        let text = serde_json::to_string_pretty(&rec).expect("record serializes");
        fs::write(&rec_path, text).map_err(io_err(&rec_path))?;
        let index = base.join("index.jsonl");
        let line = serde_json::json!({ "hash": rec.hash, "command": rec.command, "seed": rec.seed });
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index)
            .map_err(io_err(&index))?;
        writeln!(f, "{line}").map_err(io_err(&index))?;
        Ok(rec)
    }
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario, CliError> {
    match path {
        Some(p) => Ok(Scenario::load(p)?),
        None => Ok(crate::default_scenario()),
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

/// A policy chosen on the command line.
pub enum PolicySpec {
    Gh,
    Rp,
    Checkpoint(GaussianPolicy),
}

impl PolicySpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "gh" => Ok(PolicySpec::Gh),
            "rp" => Ok(PolicySpec::Rp),
            path => Ok(PolicySpec::Checkpoint(GaussianPolicy::load(path)?)),
        }
    }

    pub fn instantiate(&self, seed: u64) -> Box<dyn Policy> {
        match self {
            PolicySpec::Gh => Box::new(GeometricHeuristic::default()),
            PolicySpec::Rp => Box::new(RandomPolicy::new(seed)),
            PolicySpec::Checkpoint(p) => Box::new(PpoActor::deterministic(p.clone())),
        }
    }

    fn check_users(&self, n: usize) -> Result<(), CliError> {
        if let PolicySpec::Checkpoint(p) = self {
            let want = crate::env::obs_dim(n);
            if p.obs_dim() != want {
                return Err(CliError::Usage(format!(
                    "checkpoint expects {} inputs, scenario with {n} users gives {want}",
                    p.obs_dim()
                )));
            }
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<RunRecord, CliError> {
    let seed = seed_from_env(cli.seed);
    match cli.command {
        Command::Arpo(a) => cmd_arpo(&cli.out, seed, &a),
        Command::Train(a) => cmd_train(&cli.out, seed, &a),
        Command::Design(a) => cmd_design(&cli.out, seed, &a),
        Command::SweepResources(a) => cmd_sweep_resources(&cli.out, seed, &a),
        Command::Batches(a) => cmd_batches(&cli.out, seed, &a),
        Command::DefaultConfig => Err(CliError::Usage("default-config writes no run".into())),
    }
}

fn solve_at(sc: &Scenario, zeta: f64, pose: [f64; 3]) -> Result<ArpoSolution, CliError> {
    let sc = Scenario { zeta, ..sc.clone() };
    Ok(arpo_solve(&ArpoInstance::from_scenario(&sc, pose)?)?)
}

pub fn cmd_arpo(out: &Path, seed: u64, a: &ArpoArgs) -> Result<RunRecord, CliError> {
    let sc = load_scenario(a.config.as_deref())?;
    let zeta = a.zeta.unwrap_or(sc.zeta);
    let pose = a.pose.unwrap_or(sc.uav_start);
    let mut run = Run::start(out, "arpo", to_json(a), &[&sc], seed)?;
    let metrics = if let Some((lo, hi, n)) = a.sweep_zeta {
        let mut w = run.csv("zeta_sweep.csv")?;
        w.write_record(["zeta", "sum_power_w", "max_latency_s"])?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let z = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            let s = solve_at(&sc, z, pose)?;
            w.write_record([z.to_string(), s.total_power().to_string(), s.max_latency().to_string()])?;
            rows.push((z, s.total_power(), s.max_latency()));
        }
        w.flush().map_err(io_err(&run.dir))?;
        serde_json::json!({ "sweep": rows })
    } else {
        let s = solve_at(&sc, zeta, pose)?;
        run.write("solution.json", serde_json::to_string_pretty(&s).expect("serializes").as_bytes())?;
        serde_json::json!({
            "zeta": zeta,
            "resolutions": s.res_per_user,
            "powers_w": s.power_per_user,
            "max_latency_s": s.max_latency(),
            "objective": s.objective_value,
        })
    };
    run.finish(out, metrics)
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            let bad = |e: &dyn std::fmt::Display| CliError::TrainConfig(e.to_string());
            // Fields missing from the file keep their desk values.
            let mut merged = toml::Table::try_from(TrainConfig::desk()).map_err(|e| bad(&e))?;
            merged.extend(text.parse::<toml::Table>().map_err(|e| bad(&e))?);
            merged.try_into().map_err(|e| bad(&e))?
        }
        None => TrainConfig::desk(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn reward_from_arg(s: &str) -> Result<Arc<dyn RewardFn>, CliError> {
    Ok(match s {
        "risk" => Arc::new(RiskReward::default()),
        "manual" => Arc::new(ManualBottleneck),
        path => {
            let p = Path::new(path);
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Arc::new(DslReward::parse(path, &text)?)
        }
    })
}

/// Trajectory of one evaluation mission, checked before it is written.
fn export_trajectory(run: &mut Run, sc: &Scenario, policy: &mut dyn Policy, seed: u64, tag: &str) -> Result<EpisodeLog, CliError> {
    let log = run_batches(std::slice::from_ref(sc), policy, seed)?.remove(0);
    check_waypoints(&log.waypoints, &sc.phys)?;
    let p = run.path(&format!("trajectory_{tag}.csv"));
    log.write_csv(fs::File::create(&p).map_err(io_err(&p))?)?;
    let p = run.path(&format!("waypoints_{tag}.csv"));
    log.write_waypoints_csv(fs::File::create(&p).map_err(io_err(&p))?)?;
    Ok(log)
}

pub fn cmd_train(out: &Path, seed: u64, a: &TrainArgs) -> Result<RunRecord, CliError> {
    let sc = load_scenario(a.config.as_deref())?;
    let base_cfg = load_train_config(a.train_config.as_deref())?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let sol = solve_at(&sc, sc.zeta, sc.uav_start)?;
    let mut run = Run::start(
        out,
        "train",
        serde_json::json!({ "args": a, "train": base_cfg }),
        &[&sc],
        seed,
    )?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| seed + i).collect();
    let mut eval = Vec::with_capacity(seeds.len());

    if let Some(b) = &a.baseline {
        let spec = match b.as_str() {
            "rp" => PolicySpec::Rp,
            "gh" => PolicySpec::Gh,
            other => return Err(CliError::Usage(format!("unknown baseline {other:?}; use rp or gh"))),
        };
        for &s in &seeds {
            let mut pol = spec.instantiate(s);
            eval.push(mean(&evaluate_policy(&sc, &sol, pol.as_mut(), a.eval_episodes, s)?));
            export_trajectory(&mut run, &sc, spec.instantiate(s).as_mut(), s, &format!("seed{s}"))?;
        }
        let m = mean(&eval);
        return run.finish(
            out,
            serde_json::json!({ "policy": b, "eval_max_latency_s": eval, "mean_eval_max_latency_s": m }),
        );
    }

    let reward = reward_from_arg(&a.reward)?;
    let mut curves = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let cfg = TrainConfig {
            total_episodes: a.episodes,
            seed: s,
            ..base_cfg.clone()
        };
        let outc = train(&sc, &sol, reward.clone(), &cfg)?;
        let p = run.path(&format!("policy_seed{s}.ckpt"));
        outc.policy.save(&p)?;
        let mut actor = PpoActor::deterministic(outc.policy.clone());
        eval.push(mean(&evaluate_policy(&sc, &sol, &mut actor, a.eval_episodes, s)?));
        export_trajectory(&mut run, &sc, &mut actor, s, &format!("seed{s}"))?;
        curves.push(outc.curve);
    }
    let agg = aggregate_curves(&curves);
    let mut w = run.csv("curve.csv")?;
    w.write_record(["episode", "mean_max_latency_s", "var_max_latency_s"])?;
    for (e, (m, v)) in agg.iter().enumerate() {
        w.write_record([e.to_string(), m.to_string(), v.to_string()])?;
    }
    w.flush().map_err(io_err(&run.dir))?;
    let m = mean(&eval);
    run.finish(
        out,
        serde_json::json!({
            "reward": reward.name(),
            "episodes": a.episodes,
            "eval_max_latency_s": eval,
            "mean_eval_max_latency_s": m,
            "final_train_max_latency_s": agg.last().map(|x| x.0),
        }),
    )
}

pub fn cmd_design(out: &Path, seed: u64, a: &DesignArgs) -> Result<RunRecord, CliError> {
    let sc = load_scenario(a.config.as_deref())?;
    if let Some(path) = &a.replay {
        let t = DesignTranscript::load(path)?;
        let mut run = Run::start(out, "design-replay", to_json(a), &[&sc], seed)?;
        let selected = t.reselect();
        let best = selected.and_then(|id| t.candidate(id));
        if let Some(c) = best {
            run.write("best_program.txt", c.program_text.as_bytes())?;
        }
        return run.finish(
            out,
            serde_json::json!({
                "selected": selected,
                "recorded_selection": t.selected,
                "matches_record": selected == t.selected,
            }),
        );
    }
    let insights = match &a.insights {
        Some(p) => Some(fs::read_to_string(p).map_err(io_err(p))?),
        None => None,
    };
    let mut budget = EvalBudget::default();
    if let Some(n) = a.train_episodes {
        budget.train_episodes = n;
    }
    if let Some(n) = a.eval_episodes {
        budget.eval_episodes = n;
    }
    if let Some(n) = a.eval_seeds {
        budget.seeds = (0..n).map(|i| seed + i).collect();
    } else {
        budget.seeds = budget.seeds.iter().map(|s| s + seed).collect();
    }
    let cfg = DesignConfig {
        k: a.k,
        rounds: a.rounds,
        top_m: a.top_m,
        budget,
        insights,
    };
    let mut run = Run::start(out, "design", serde_json::json!({ "args": a, "design": cfg }), &[&sc], seed)?;
    let result = if let Some(file) = a.client.strip_prefix("mock:") {
        let mut client = MockClient::from_file(file).map_err(DesignError::from)?;
        design(&sc, &mut client, &cfg)
    } else if a.client == "http" {
        let mut client = HttpClient::from_env(a.model.clone()).map_err(DesignError::from)?;
        design(&sc, &mut client, &cfg)
    } else {
        return Err(CliError::Usage(format!("unknown client {:?}; use mock:FILE or http", a.client)));
    };
    match result {
        Ok((best, t)) => {
            let p = run.path("transcript.json");
            t.save(&p)?;
            run.write("best_program.txt", best.program_text.as_bytes())?;
            let scores: Vec<_> = t.scores().map(|s| (s.candidate_id, s.score)).collect();
            run.finish(
                out,
                serde_json::json!({ "selected": best.id, "name": best.name, "scores": scores }),
            )
        }
        Err(f) => {
            let p = run.path("transcript.json");
            f.transcript.save(&p)?;
            Err(CliError::Design {
                error: f.error,
                transcript: p,
            })
        }
    }
}

/// Latency per (P_max, B) cell with the same policy and fading seeds in every
/// cell. Rows follow `pmax_list`, columns `bandwidth_list`.
pub fn resource_sweep(
    sc: &Scenario,
    bandwidths: &[f64],
    pmaxes: &[f64],
    policy: &PolicySpec,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, CliError> {
    policy.check_users(sc.num_users())?;
    let mut rows = Vec::with_capacity(pmaxes.len());
    for &p in pmaxes {
        let mut row = Vec::with_capacity(bandwidths.len());
        for &b in bandwidths {
            let mut cell = sc.clone();
            for u in &mut cell.users {
                u.bandwidth_hz = b;
                u.p_max_w = p;
            }
            cell.validate()?;
            let sol = solve_at(&cell, cell.zeta, cell.uav_start)?;
            let mut pol = policy.instantiate(seed);
            row.push(mean(&evaluate_policy(&cell, &sol, pol.as_mut(), episodes, seed)?));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn cmd_sweep_resources(out: &Path, seed: u64, a: &SweepArgs) -> Result<RunRecord, CliError> {
    if a.bandwidth_list.is_empty() || a.pmax_list.is_empty() || a.episodes == 0 {
        return Err(CliError::Usage("bandwidth and pmax lists and episodes must be non-empty".into()));
    }
    let sc = load_scenario(a.config.as_deref())?;
    let spec = PolicySpec::parse(&a.policy)?;
    let m = resource_sweep(&sc, &a.bandwidth_list, &a.pmax_list, &spec, a.episodes, seed)?;
    let mut run = Run::start(out, "sweep-resources", to_json(a), &[&sc], seed)?;
    let mut w = run.csv("resource_sweep.csv")?;
    let mut header = vec!["pmax_w".to_string()];
    header.extend(a.bandwidth_list.iter().map(|b| format!("bw_{b}")));
    w.write_record(&header)?;
    for (p, row) in a.pmax_list.iter().zip(&m) {
        let mut rec = vec![p.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(&run.dir))?;
    run.finish(out, serde_json::json!({ "latency_s": m }))
}

pub fn cmd_batches(out: &Path, seed: u64, a: &BatchArgs) -> Result<RunRecord, CliError> {
    let batches: Vec<Scenario> = a
        .configs
        .iter()
        .map(Scenario::load)
        .collect::<Result<_, _>>()?;
    let spec = PolicySpec::parse(&a.policy)?;
    for b in &batches {
        spec.check_users(b.num_users())?;
    }
    let refs: Vec<&Scenario> = batches.iter().collect();
    let mut run = Run::start(out, "batches", to_json(a), &refs, seed)?;
    let logs = run_batches(&batches, spec.instantiate(seed).as_mut(), seed)?;
    for (k, log) in logs.iter().enumerate() {
        check_waypoints(&log.waypoints, &batches[k].phys)?;
        let p = run.path(&format!("batch{k}.csv"));
        log.write_csv(fs::File::create(&p).map_err(io_err(&p))?)?;
    }
    let all = concat_waypoints(&logs);
    check_waypoints(&all, &batches[0].phys)?;
    let p = run.path("mission_waypoints.csv");
    write_waypoints(&all, fs::File::create(&p).map_err(io_err(&p))?)?;
    let elapsed: Vec<f64> = logs.iter().map(|l| l.elapsed_s).collect();
    let lat: Vec<Option<f64>> = logs.iter().map(|l| l.max_latency()).collect();
    run.finish(
        out,
        serde_json::json!({
            "batch_elapsed_s": elapsed,
            "mission_time_s": logs.iter().map(EpisodeLog::duration_s).sum::<f64>(),
            "batch_max_latency_s": lat,
        }),
    )
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Command::DefaultConfig = cli.command {
        print!("{}", crate::default_scenario().to_toml());
        return 0;
    }
    let out = cli.out.clone();
    match run(cli) {
        Ok(rec) => {
            println!("run {} -> {}", rec.hash, out.join(&rec.hash).display());
            println!("{}", serde_json::to_string_pretty(&rec.metrics).expect("metrics serialize"));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
