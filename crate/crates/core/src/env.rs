//! Slotted trajectory MDP: the UAV moves once per slot, every user uploads at
//! its fixed resolution and power, and the episode ends when all backlogs are
//! empty or the horizon runs out.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arpo::{arpo_solve, ArpoError, ArpoInstance, ArpoSolution};
use crate::channel::{geometry, mean_gain, rate_bps, sample_fading, snr, ChannelError};
use crate::rewards::{RewardContext, RewardError, RewardFn, RiskReward};
use crate::scenario::{PhysConfig, RngStream, Scenario, StreamId};
use crate::uplink::latency_floor;
use crate::vlm_profile::{ProfileError, Resolution};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("solution has {got} users, scenario has {expected}")]
    Mismatch { expected: usize, got: usize },
    #[error("step called on a finished episode")]
    Finished,
    #[error("episode is still running")]
    NotFinished,
    #[error("waypoint {index} violates {constraint}: {detail}")]
    Constraint {
        index: usize,
        constraint: &'static str,
        detail: String,
    },
    #[error("batches must share phys and channel configuration (batch {0})")]
    BatchConfig(usize),
    #[error("policy error: {0}")]
    Policy(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Arpo(#[from] ArpoError),
    #[error("export failed: {0}")]
    Export(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub dx_m: f64,
    pub dy_m: f64,
    pub dz_m: f64,
}

impl Action {
    pub fn new(dx_m: f64, dy_m: f64, dz_m: f64) -> Self {
        Action { dx_m, dy_m, dz_m }
    }

    pub fn zero() -> Self {
        Action::default()
    }
}

/// Enforce the per-slot speed limits and the altitude band. The horizontal
/// part is rescaled as a vector so its direction is kept.
pub fn clamp_action(raw: Action, phys: &PhysConfig, z_m: f64) -> Action {
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let (mut dx, mut dy) = (finite(raw.dx_m), finite(raw.dy_m));
    let max_xy = phys.max_xy_step();
    let norm = dx.hypot(dy);
    if norm > max_xy {
        let s = max_xy / norm;
        dx *= s;
        dy *= s;
    }
    let max_z = phys.max_z_step();
    let dz = finite(raw.dz_m).clamp(-max_z, max_z);
    let z_new = (z_m + dz).clamp(phys.h_min_m, phys.h_max_m);
    Action::new(dx, dy, z_new - z_m)
}

/// Raw-unit MDP state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// UAV pose minus user position, per user.
    pub rel_pos: Vec<[f64; 3]>,
    pub res: Vec<Resolution>,
    pub power_w: Vec<f64>,
    /// Power gain |h_n[t]|².
    pub gain: Vec<f64>,
    pub backlog_bits: Vec<f64>,
    pub slot: usize,
}

impl EnvState {
    pub fn num_users(&self) -> usize {
        self.backlog_bits.len()
    }

    /// Flat 7N vector: rel_pos, resolution pixels, power, gain, backlog.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(7 * self.num_users());
        for p in &self.rel_pos {
            v.extend_from_slice(p);
        }
        v.extend(self.res.iter().map(|r| r.pixels() as f64));
        v.extend_from_slice(&self.power_w);
        v.extend_from_slice(&self.gain);
        v.extend_from_slice(&self.backlog_bits);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub applied: Action,
    pub transmitted_bits: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Max completion time once all users are done, otherwise slots·α.
    pub elapsed_s: f64,
    pub completion_s: Vec<Option<f64>>,
    pub ctx: RewardContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub t: f64,
}

impl Waypoint {
    pub fn pose(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Uplink time charged to a user who has not finished by the horizon, on top
/// of α·T.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncompletePenalty {
    /// The user's latency floor Γ_n = T_proc + T_down.
    #[default]
    Floor,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLatency {
    pub per_user_s: Vec<f64>,
    pub max_s: f64,
    pub incomplete: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub slot_len_s: f64,
    pub horizon_slots: usize,
    /// Start of this episode on the mission clock.
    pub time_offset_s: f64,
    pub res: Vec<Resolution>,
    pub init_backlog_bits: Vec<f64>,
    /// Start pose followed by one waypoint per slot.
    pub waypoints: Vec<Waypoint>,
    pub rates_bps: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Backlogs after each slot.
    pub backlogs_bits: Vec<Vec<f64>>,
    pub completion_s: Vec<Option<f64>>,
    pub elapsed_s: f64,
    pub finished: bool,
    pub latency: Option<EpisodeLatency>,
}

impl EpisodeLog {
    pub fn slots(&self) -> usize {
        self.rewards.len()
    }

    pub fn start_pose(&self) -> [f64; 3] {
        self.waypoints[0].pose()
    }

    pub fn end_pose(&self) -> [f64; 3] {
        self.waypoints[self.waypoints.len() - 1].pose()
    }

    /// Flight time on the mission clock. The UAV always flies whole slots, so
    /// this can exceed `elapsed_s` when the last upload ends mid-slot.
    pub fn duration_s(&self) -> f64 {
        self.slot_len_s * self.slots() as f64
    }

    pub fn max_latency(&self) -> Option<f64> {
        self.latency.as_ref().map(|l| l.max_s)
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// One row per slot: slot, t_s, x, y, z, rate_n..., backlog_n..., reward.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EnvError> {
        let n = self.init_backlog_bits.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["slot".to_string(), "t_s".into(), "x_m".into(), "y_m".into(), "z_m".into()];
        header.extend((0..n).map(|i| format!("rate_bps_{i}")));
        header.extend((0..n).map(|i| format!("backlog_bits_{i}")));
        header.push("reward".into());
        w.write_record(&header).map_err(export)?;
        for k in 0..self.slots() {
            let wp = &self.waypoints[k + 1];
            let mut row = vec![k.to_string(), wp.t.to_string(), wp.x.to_string(), wp.y.to_string(), wp.z.to_string()];
            row.extend(self.rates_bps[k].iter().map(f64::to_string));
            row.extend(self.backlogs_bits[k].iter().map(f64::to_string));
            row.push(self.rewards[k].to_string());
            w.write_record(&row).map_err(export)?;
        }
        w.flush().map_err(|e| EnvError::Export(e.to_string()))
    }

    /// Waypoints only: t_s, x, y, z, starting with the start pose.
    pub fn write_waypoints_csv<W: Write>(&self, out: W) -> Result<(), EnvError> {
        write_waypoints(&self.waypoints, out)
    }
}

fn export(e: csv::Error) -> EnvError {
    EnvError::Export(e.to_string())
}

pub fn write_waypoints<W: Write>(waypoints: &[Waypoint], out: W) -> Result<(), EnvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_s", "x_m", "y_m", "z_m"]).map_err(export)?;
    for p in waypoints {
        w.write_record([p.t.to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string()])
            .map_err(export)?;
    }
    w.flush().map_err(|e| EnvError::Export(e.to_string()))
}

/// Check altitude band and per-slot speed limits along a trajectory.
pub fn check_waypoints(waypoints: &[Waypoint], phys: &PhysConfig) -> Result<(), EnvError> {
    const TOL: f64 = 1e-9;
    for (i, p) in waypoints.iter().enumerate() {
        if p.z < phys.h_min_m - TOL || p.z > phys.h_max_m + TOL {
            return Err(EnvError::Constraint {
                index: i,
                constraint: "altitude band",
                detail: format!("z = {}", p.z),
            });
        }
    }
    for (i, w) in waypoints.windows(2).enumerate() {
        let xy = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
        if xy > phys.max_xy_step() + TOL {
            return Err(EnvError::Constraint {
                index: i + 1,
                constraint: "horizontal speed",
                detail: format!("step {xy} m"),
            });
        }
        let dz = (w[1].z - w[0].z).abs();
        if dz > phys.max_z_step() + TOL {
            return Err(EnvError::Constraint {
                index: i + 1,
                constraint: "vertical speed",
                detail: format!("step {dz} m"),
            });
        }
    }
    Ok(())
}

/// Total latency per user from a finished log: fractional uplink completion
/// (or α·T plus the penalty) + T_proc + T_down.
pub fn episode_latency(
    log: &EpisodeLog,
    scenario: &Scenario,
    penalty: IncompletePenalty,
) -> Result<EpisodeLatency, EnvError> {
    if !log.finished {
        return Err(EnvError::NotFinished);
    }
    let horizon = log.slot_len_s * log.horizon_slots as f64;
    let mut per_user = Vec::with_capacity(log.res.len());
    let mut incomplete = Vec::with_capacity(log.res.len());
    for (&res, done_at) in log.res.iter().zip(&log.completion_s) {
        let floor = latency_floor(scenario, res)?;
        let up = match done_at {
            Some(t) => *t,
            None => {
                horizon
                    + match penalty {
                        IncompletePenalty::Floor => floor,
                        IncompletePenalty::Fixed(p) => p,
                    }
            }
        };
        incomplete.push(done_at.is_none());
        per_user.push(up + floor);
    }
    let max_s = per_user.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(EpisodeLatency {
        per_user_s: per_user,
        max_s,
        incomplete,
    })
}

/// One mission episode over a fixed resolution/power allocation.
#[derive(Clone)]
pub struct Env {
    scenario: Scenario,
    res: Vec<Resolution>,
    power_w: Vec<f64>,
    start: [f64; 3],
    time_offset_s: f64,
    penalty: IncompletePenalty,
    reward: Arc<dyn RewardFn>,
    rng: RngStream,
    pose: [f64; 3],
    gain: Vec<f64>,
    backlog: Vec<f64>,
    init_backlog: Vec<f64>,
    completion: Vec<Option<f64>>,
    slot: usize,
    done: bool,
    log: EpisodeLog,
}

impl std::fmt::Debug for Env {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Env")
            .field("pose", &self.pose)
            .field("slot", &self.slot)
            .field("backlog", &self.backlog)
            .field("done", &self.done)
            .finish()
    }
}

impl Env {
    /// UAV at `uav_start`, backlogs from the solution's resolutions, gains at
    /// the start pose, t = 0. Uses the normalized risk reward.
    pub fn reset(scenario: &Scenario, solution: &ArpoSolution, seed: u64) -> Result<Env, EnvError> {
        Self::reset_from(scenario, solution, seed, scenario.uav_start, 0.0)
    }

    pub fn reset_from(
        scenario: &Scenario,
        solution: &ArpoSolution,
        seed: u64,
        start: [f64; 3],
        time_offset_s: f64,
    ) -> Result<Env, EnvError> {
        let n = scenario.num_users();
        for got in [solution.res_per_user.len(), solution.power_per_user.len()] {
            if got != n {
                return Err(EnvError::Mismatch { expected: n, got });
            }
        }
        let mut env = Env {
            scenario: scenario.clone(),
            res: solution.res_per_user.clone(),
            power_w: solution.power_per_user.clone(),
            start,
            time_offset_s,
            penalty: IncompletePenalty::default(),
            reward: Arc::new(RiskReward::default()),
            rng: RngStream::new(seed, StreamId::Fading),
            pose: start,
            gain: Vec::new(),
            backlog: Vec::new(),
            init_backlog: Vec::new(),
            completion: Vec::new(),
            slot: 0,
            done: false,
            log: empty_log(scenario, start, time_offset_s),
        };
        env.restart(seed)?;
        Ok(env)
    }

    pub fn with_reward(mut self, reward: Arc<dyn RewardFn>) -> Self {
        self.reward = reward;
        self
    }

    pub fn with_penalty(mut self, penalty: IncompletePenalty) -> Self {
        self.penalty = penalty;
        self
    }

    /// Start a fresh episode with the same allocation and reward.
    pub fn restart(&mut self, seed: u64) -> Result<(), EnvError> {
        self.rng = RngStream::new(seed, StreamId::Fading);
        self.pose = self.start;
        self.slot = 0;
        self.done = false;
        self.backlog = self
            .scenario
            .users
            .iter()
            .zip(&self.res)
            .map(|(u, &r)| self.scenario.profile.payload_bits(r, u.n_queries))
            .collect::<Result<_, _>>()?;
        self.init_backlog = self.backlog.clone();
        self.completion = self.backlog.iter().map(|&d| (d <= 0.0).then_some(0.0)).collect();
        self.gain = self.sample_gains(self.pose)?;
        self.log = empty_log(&self.scenario, self.start, self.time_offset_s);
        self.log.res = self.res.clone();
        self.log.init_backlog_bits = self.init_backlog.clone();
        if self.backlog.iter().all(|&d| d <= 0.0) {
            self.finish();
        }
        Ok(())
    }

    fn sample_gains(&mut self, pose: [f64; 3]) -> Result<Vec<f64>, EnvError> {
        let mode = self.scenario.chan.fading_mode;
        let mut out = Vec::with_capacity(self.scenario.users.len());
        for u in &self.scenario.users {
            let mean = mean_gain(&geometry(pose, u.pos_m), &self.scenario.chan)?;
            out.push(mean * sample_fading(mode, &mut self.rng));
        }
        Ok(out)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn pose(&self) -> [f64; 3] {
        self.pose
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn backlog(&self) -> &[f64] {
        &self.backlog
    }

    pub fn init_backlog(&self) -> &[f64] {
        &self.init_backlog
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    pub fn into_log(self) -> EpisodeLog {
        self.log
    }

    pub fn state(&self) -> EnvState {
        EnvState {
            rel_pos: self
                .scenario
                .users
                .iter()
                .map(|u| [self.pose[0] - u.pos_m[0], self.pose[1] - u.pos_m[1], self.pose[2] - u.pos_m[2]])
                .collect(),
            res: self.res.clone(),
            power_w: self.power_w.clone(),
            gain: self.gain.clone(),
            backlog_bits: self.backlog.clone(),
            slot: self.slot,
        }
    }

    fn elapsed(&self) -> f64 {
        if self.completion.iter().all(Option::is_some) {
            self.completion.iter().flatten().copied().fold(0.0, f64::max)
        } else {
            self.scenario.phys.slot_len_s * self.slot as f64
        }
    }

    fn finish(&mut self) {
        self.done = true;
        self.log.completion_s = self.completion.clone();
        self.log.elapsed_s = self.elapsed();
        self.log.finished = true;
        self.log.latency = episode_latency(&self.log, &self.scenario, self.penalty).ok();
    }

    pub fn step(&mut self, raw: Action) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Finished);
        }
        let phys = &self.scenario.phys;
        let alpha = phys.slot_len_s;
        let a = clamp_action(raw, phys, self.pose[2]);
        let prev_pose = self.pose;
        let next_pose = [prev_pose[0] + a.dx_m, prev_pose[1] + a.dy_m, prev_pose[2] + a.dz_m];
        let gain = self.sample_gains(next_pose)?;
        let noise = self.scenario.chan.noise_w();
        let rate: Vec<f64> = self
            .scenario
            .users
            .iter()
            .zip(&self.power_w)
            .zip(&gain)
            .map(|((u, &p), &g)| rate_bps(u.bandwidth_hz, snr(p, g, noise)))
            .collect();
        let t0 = alpha * self.slot as f64;
        let prev_backlog = self.backlog.clone();
        let mut transmitted = vec![0.0; prev_backlog.len()];
        for n in 0..prev_backlog.len() {
            let d = prev_backlog[n];
            if d <= 0.0 {
                continue;
            }
            let cap = alpha * rate[n];
            if rate[n] > 0.0 && d <= cap {
                transmitted[n] = d;
                self.backlog[n] = 0.0;
                self.completion[n] = Some(t0 + d / rate[n]);
            } else {
                transmitted[n] = cap;
                self.backlog[n] = d - cap;
            }
        }
        self.pose = next_pose;
        self.gain = gain;
        self.slot += 1;

        let ctx = RewardContext {
            backlog: prev_backlog,
            transmitted: transmitted.clone(),
            next_backlog: self.backlog.clone(),
            rate: rate.clone(),
            slot_len: alpha,
            slot: self.slot - 1,
            pose: prev_pose,
            next_pose,
            user_pos: self.scenario.users.iter().map(|u| u.pos_m).collect(),
            init_backlog: self.init_backlog.clone(),
            area_diag: self.scenario.area_diag_m(),
        };
        let reward = self.reward.reward(&ctx)?;

        self.log.waypoints.push(Waypoint {
            x: next_pose[0],
            y: next_pose[1],
            z: next_pose[2],
            t: self.time_offset_s + alpha * self.slot as f64,
        });
        self.log.rates_bps.push(rate);
        self.log.rewards.push(reward);
        self.log.backlogs_bits.push(self.backlog.clone());

        let all_clear = self.backlog.iter().all(|&d| d <= 0.0);
        if all_clear || self.slot >= self.scenario.phys.horizon_slots {
            self.finish();
        }
        Ok(StepOutcome {
            state: self.state(),
            applied: a,
            transmitted_bits: transmitted,
            reward,
            done: self.done,
            elapsed_s: self.elapsed(),
            completion_s: self.completion.clone(),
            ctx,
        })
    }
}

fn empty_log(scenario: &Scenario, start: [f64; 3], offset: f64) -> EpisodeLog {
    EpisodeLog {
        slot_len_s: scenario.phys.slot_len_s,
        horizon_slots: scenario.phys.horizon_slots,
        time_offset_s: offset,
        res: Vec::new(),
        init_backlog_bits: Vec::new(),
        waypoints: vec![Waypoint {
            x: start[0],
            y: start[1],
            z: start[2],
            t: offset,
        }],
        rates_bps: Vec::new(),
        rewards: Vec::new(),
        backlogs_bits: Vec::new(),
        completion_s: Vec::new(),
        elapsed_s: 0.0,
        finished: false,
        latency: None,
    }
}

/// Feature scaling for learning: positions in km, resolution and power as
/// fractions of their maxima, log-scaled gain, backlog as a fraction of the
/// initial one, plus the elapsed fraction of the horizon.
pub fn normalized_observation(env: &Env) -> Vec<f64> {
    let s = env.state();
    let sc = env.scenario();
    let max_px = sc.profile.max_pixels() as f64;
    let beta0 = sc.chan.beta0_lin();
    let mut v = Vec::with_capacity(obs_dim(sc.num_users()));
    for p in &s.rel_pos {
        v.extend(p.iter().map(|x| x / 1000.0));
    }
    v.extend(s.res.iter().map(|r| r.pixels() as f64 / max_px));
    v.extend(s.power_w.iter().zip(&sc.users).map(|(p, u)| p / u.p_max_w));
    v.extend(s.gain.iter().map(|g| if *g > 0.0 { (g / beta0).log10() / 10.0 } else { -1.0 }));
    v.extend(
        s.backlog_bits
            .iter()
            .zip(env.init_backlog())
            .map(|(d, d0)| if *d0 > 0.0 { d / d0 } else { 0.0 }),
    );
    v.push(s.slot as f64 / sc.phys.horizon_slots as f64);
    v
}

pub fn obs_dim(num_users: usize) -> usize {
    7 * num_users + 1
}

/// Anything that picks a movement from the current environment.
pub trait Policy {
    fn act(&mut self, env: &Env) -> Result<Action, EnvError>;
}

/// Run the policy until the episode ends.
pub fn run_episode(env: &mut Env, policy: &mut dyn Policy) -> Result<EpisodeLog, EnvError> {
    while !env.is_done() {
        let a = policy.act(env)?;
        env.step(a)?;
    }
    Ok(env.log().clone())
}

/// Serve the scenarios back to back. Each batch starts where the previous one
/// ended and gets its own allocation solved at that pose.
pub fn run_batches(
    batches: &[Scenario],
    policy: &mut dyn Policy,
    seed: u64,
) -> Result<Vec<EpisodeLog>, EnvError> {
    let Some(first) = batches.first() else {
        return Ok(Vec::new());
    };
    let mut logs = Vec::with_capacity(batches.len());
    let mut pose = first.uav_start;
    let mut clock = 0.0;
    for (k, sc) in batches.iter().enumerate() {
        if sc.phys != first.phys || sc.chan != first.chan {
            return Err(EnvError::BatchConfig(k));
        }
        let sol = arpo_solve(&ArpoInstance::from_scenario(sc, pose)?)?;
        let ep_seed = RngStream::substream(seed, StreamId::Fading, k as u64).seed();
        let mut env = Env::reset_from(sc, &sol, ep_seed, pose, clock)?;
        let log = run_episode(&mut env, policy)?;
        pose = log.end_pose();
        clock += log.duration_s();
        logs.push(log);
    }
    Ok(logs)
}

/// Concatenated mission trajectory; the shared pose at each batch boundary
/// appears once.
pub fn concat_waypoints(logs: &[EpisodeLog]) -> Vec<Waypoint> {
    let mut out: Vec<Waypoint> = Vec::new();
    for log in logs {
        let skip = usize::from(!out.is_empty());
        out.extend(log.waypoints.iter().skip(skip).copied());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arpo::solve_scenario;
    use crate::scenario::{default_scenario, FadingMode};
    use crate::uplink::total_latency;
    use proptest::prelude::*;

    struct Fixed(Action);

    impl Policy for Fixed {
        fn act(&mut self, _: &Env) -> Result<Action, EnvError> {
            Ok(self.0)
        }
    }

    fn all_res(sc: &Scenario, side: u64, power: f64) -> ArpoSolution {
        let mut sol = solve_scenario(sc).unwrap();
        sol.res_per_user = vec![Resolution::square(side); sc.num_users()];
        sol.power_per_user = vec![power; sc.num_users()];
        sol
    }

    fn one_query(mut sc: Scenario) -> Scenario {
        for u in &mut sc.users {
            u.n_queries = 1;
            u.acc_min = 0.0;
        }
        sc
    }

    #[test]
    fn reset_backlogs_and_rel_pos() {
        let sc = one_query(default_scenario());
        let env = Env::reset(&sc, &all_res(&sc, 384, 0.1), 1).unwrap();
        let s = env.state();
        for d in &s.backlog_bits {
            assert!((d - 3.36e6).abs() < 1e-6);
        }
        assert_eq!(s.to_vec().len(), 7 * sc.num_users());
        let mut sc2 = sc.clone();
        sc2.users[0].pos_m = [0.0, 0.0, 0.0];
        let env = Env::reset(&sc2, &all_res(&sc2, 384, 0.1), 1).unwrap();
        assert_eq!(env.state().rel_pos[0], [-500.0, -500.0, 150.0]);
    }

    #[test]
    fn reset_rejects_mismatched_solution() {
        let sc = default_scenario();
        let mut sol = solve_scenario(&sc).unwrap();
        sol.res_per_user.pop();
        assert!(matches!(Env::reset(&sc, &sol, 0), Err(EnvError::Mismatch { .. })));
    }

    #[test]
    fn rayleigh_initial_gains_are_seeded() {
        let mut sc = default_scenario();
        sc.chan.fading_mode = FadingMode::Rayleigh;
        let sol = solve_scenario(&sc).unwrap();
        let a = Env::reset(&sc, &sol, 9).unwrap().state().gain;
        let b = Env::reset(&sc, &sol, 9).unwrap().state().gain;
        let c = Env::reset(&sc, &sol, 10).unwrap().state().gain;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn clamp_examples() {
        let phys = default_scenario().phys;
        assert_eq!(clamp_action(Action::new(300.0, 400.0, 0.0), &phys, 150.0), Action::new(60.0, 80.0, 0.0));
        let a = clamp_action(Action::new(0.0, 0.0, -30.0), &phys, 60.0);
        assert_eq!(a.dz_m, -10.0);
        assert_eq!(clamp_action(Action::zero(), &phys, 150.0), Action::zero());
        assert_eq!(clamp_action(Action::new(0.0, 0.0, 50.0), &phys, 150.0).dz_m, 20.0);
        assert_eq!(clamp_action(Action::new(f64::NAN, 1.0, 0.0), &phys, 150.0), Action::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn fractional_completion_in_first_slot() {
        let mut sc = one_query(default_scenario());
        sc.users.truncate(1);
        let mut env = Env::reset(&sc, &all_res(&sc, 384, 0.1), 0).unwrap();
        let out = env.step(Action::zero()).unwrap();
        let r = out.ctx.rate[0];
        let d = 3.36e6;
        if d <= r {
            assert_eq!(out.transmitted_bits[0], d);
            assert!((out.completion_s[0].unwrap() - d / r).abs() < 1e-12);
            assert!(out.done);
            assert_eq!(out.elapsed_s, out.completion_s[0].unwrap());
        }
    }

    #[test]
    fn quarter_slot_completion() {
        // Pick the bandwidth so that αR is exactly four times the payload.
        let mut sc = one_query(default_scenario());
        sc.users.truncate(1);
        let sol = all_res(&sc, 384, 0.1);
        let probe = Env::reset(&sc, &sol, 0).unwrap();
        let g = probe.state().gain[0];
        let per_hz = rate_bps(1.0, snr(0.1, g, sc.chan.noise_w()));
        sc.users[0].bandwidth_hz = 4.0 * 3.36e6 / per_hz;
        let mut env = Env::reset(&sc, &sol, 0).unwrap();
        let out = env.step(Action::zero()).unwrap();
        assert!((out.ctx.rate[0] - 4.0 * 3.36e6).abs() < 1e-3);
        assert!((out.completion_s[0].unwrap() - 0.25).abs() < 1e-9);
        assert!(out.done);
    }

    #[test]
    fn zero_action_keeps_gains() {
        let sc = default_scenario();
        let mut env = Env::reset(&sc, &solve_scenario(&sc).unwrap(), 3).unwrap();
        let g0 = env.state().gain;
        let out = env.step(Action::zero()).unwrap();
        assert_eq!(out.state.gain, g0);
    }

    #[test]
    fn stepping_finished_episode_errors() {
        let mut sc = default_scenario();
        sc.phys.horizon_slots = 2;
        let mut env = Env::reset(&sc, &solve_scenario(&sc).unwrap(), 3).unwrap();
        env.step(Action::zero()).unwrap();
        let out = env.step(Action::zero()).unwrap();
        assert!(out.done);
        assert!(matches!(env.step(Action::zero()), Err(EnvError::Finished)));
    }

    #[test]
    fn latency_example_components() {
        let sc = one_query(default_scenario());
        let mut log = empty_log(&sc, sc.uav_start, 0.0);
        log.res = vec![Resolution::square(384)];
        log.completion_s = vec![Some(2.5)];
        log.finished = true;
        let lat = episode_latency(&log, &sc, IncompletePenalty::Floor).unwrap();
        assert!((lat.max_s - (2.5 + 20.0 / 23.8 + 0.1)).abs() < 1e-12);
        assert!((lat.max_s - 3.44034).abs() < 1e-5);

        log.completion_s = vec![Some(0.0)];
        let lat = episode_latency(&log, &sc, IncompletePenalty::Floor).unwrap();
        assert!((lat.max_s - (20.0 / 23.8 + 0.1)).abs() < 1e-12);

        log.completion_s = vec![None];
        let lat = episode_latency(&log, &sc, IncompletePenalty::Fixed(7.0)).unwrap();
        assert_eq!(lat.max_s, 50.0 + 7.0 + 20.0 / 23.8 + 0.1);
        assert!(lat.incomplete[0]);
    }

    #[test]
    fn frozen_uav_matches_static_latency() {
        let mut sc = one_query(default_scenario());
        sc.users.truncate(1);
        sc.uav_start = [sc.users[0].pos_m[0], sc.users[0].pos_m[1], 120.0];
        let sol = all_res(&sc, 768, 0.01);
        let mut env = Env::reset(&sc, &sol, 0).unwrap();
        let log = run_episode(&mut env, &mut Fixed(Action::zero())).unwrap();
        let g = env.state().gain[0];
        let stat = total_latency(&sc, &sc.users[0], Resolution::square(768), 0.01, g).unwrap();
        assert!((log.max_latency().unwrap() - stat).abs() < 1e-9 * stat);
    }

    #[test]
    fn batches_are_continuous() {
        let sc = default_scenario();
        let batches = vec![sc.clone(), sc.clone(), sc];
        let mut pol = Fixed(Action::new(50.0, 80.0, -5.0));
        let logs = run_batches(&batches, &mut pol, 4).unwrap();
        assert_eq!(logs.len(), 3);
        for w in logs.windows(2) {
            assert_eq!(w[1].start_pose(), w[0].end_pose());
            assert_eq!(w[1].time_offset_s, w[0].time_offset_s + w[0].duration_s());
        }
        let all = concat_waypoints(&logs);
        check_waypoints(&all, &batches[0].phys).unwrap();
        let single = run_batches(&batches[..1], &mut pol, 4).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn batches_need_shared_physics() {
        let a = default_scenario();
        let mut b = a.clone();
        b.phys.v_xy_max_mps = 10.0;
        assert!(matches!(
            run_batches(&[a, b], &mut Fixed(Action::zero()), 0),
            Err(EnvError::BatchConfig(1))
        ));
    }

    #[test]
    fn csv_has_one_row_per_slot() {
        let sc = default_scenario();
        let mut env = Env::reset(&sc, &solve_scenario(&sc).unwrap(), 0).unwrap();
        let log = run_episode(&mut env, &mut Fixed(Action::new(30.0, 90.0, 0.0))).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), log.slots() + 1);
        assert!(text.starts_with("slot,t_s,x_m,y_m,z_m,rate_bps_0"));
    }

    #[test]
    fn observation_shape() {
        let sc = default_scenario();
        let env = Env::reset(&sc, &solve_scenario(&sc).unwrap(), 0).unwrap();
        let o = normalized_observation(&env);
        assert_eq!(o.len(), obs_dim(4));
        assert!(o.iter().all(|x| x.is_finite() && x.abs() < 2.0));
    }

    proptest! {
        #[test]
        fn clamped_actions_are_feasible(
            dx in -1e3f64..1e3, dy in -1e3f64..1e3, dz in -1e3f64..1e3, z in 50.0f64..300.0,
        ) {
            let phys = default_scenario().phys;
            let a = clamp_action(Action::new(dx, dy, dz), &phys, z);
            prop_assert!(a.dx_m.hypot(a.dy_m) <= phys.max_xy_step() * (1.0 + 1e-12));
            prop_assert!(a.dz_m.abs() <= phys.max_z_step() + 1e-9);
            prop_assert!(z + a.dz_m >= phys.h_min_m && z + a.dz_m <= phys.h_max_m);
            // Direction is kept.
            prop_assert!((a.dx_m * dy - a.dy_m * dx).abs() <= 1e-6 * (1.0 + dx.abs() + dy.abs()) * 100.0);
        }

        #[test]
        fn episode_invariants(seed in 0u64..40, ax in -150.0f64..150.0, ay in -150.0f64..150.0, az in -40.0f64..40.0) {
            let mut sc = default_scenario();
            sc.chan.fading_mode = FadingMode::Rayleigh;
            let sol = solve_scenario(&sc).unwrap();
            let mut env = Env::reset(&sc, &sol, seed).unwrap();
            let init: Vec<f64> = env.init_backlog().to_vec();
            let mut sent = vec![0.0; init.len()];
            let mut prev = init.clone();
            while !env.is_done() {
                let out = env.step(Action::new(ax, ay, az)).unwrap();
                for n in 0..init.len() {
                    prop_assert!(out.transmitted_bits[n] <= prev[n]);
                    prop_assert!(out.transmitted_bits[n] <= sc.phys.slot_len_s * out.ctx.rate[n] * (1.0 + 1e-15));
                    prop_assert!(out.state.backlog_bits[n] <= prev[n]);
                    prop_assert!(out.state.backlog_bits[n] >= 0.0);
                    sent[n] += out.transmitted_bits[n];
                }
                prev = out.state.backlog_bits.clone();
            }
            for n in 0..init.len() {
                prop_assert!((sent[n] - (init[n] - prev[n])).abs() <= 1e-6 * init[n]);
            }
            let log = env.log();
            check_waypoints(&log.waypoints, &sc.phys).unwrap();
            let again = {
                let mut e = Env::reset(&sc, &sol, seed).unwrap();
                run_episode(&mut e, &mut Fixed(Action::new(ax, ay, az))).unwrap()
            };
            prop_assert_eq!(&again, log);
        }
    }
}
