//! Resolution and power allocation for one uplink session.
//!
//! Resolutions are chosen by branch and bound over the discrete candidate
//! set; with resolutions fixed, the power subproblem
//!
//! ```text
//! min τ + ζ Σ P_n   s.t.  T_n(P_n) ≤ τ,  P_n ≤ P_n^max
//! ```
//!
//! is convex. Every constraint T_n(P_n) ≤ τ is tight at the optimum, which
//! gives the closed form P_n(τ) = σ²/h_n (2^{D_n / (B_n (τ - Γ_n))} - 1) and
//! leaves a 1-D search over τ: the stationarity condition Σ ζ / g_n(P_n(τ)) = 1
//! where g_n = -dT_n/dP_n. The left-hand side falls monotonically from +∞ to
//! 0, so bisection finds the root.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{rate_bps, snapshot_gain, snr, ChannelError};
use crate::scenario::Scenario;
use crate::uplink::latency_floor;
use crate::vlm_profile::{ProfileError, Resolution, ResolutionProfile};

/// Absolute bisection tolerance on τ in seconds.
pub const TOL_TAU: f64 = 1e-9;
/// Offset above max Γ_n for the lower end of the bracket.
pub const EPS_LO: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArpoError {
    #[error("user {user}: accuracy requirement {acc_min} exceeds best available {best}")]
    Infeasible { user: usize, acc_min: f64, best: f64 },
    #[error("latency target {tau} s is not above the floor {floor} s")]
    Bracket { tau: f64, floor: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// How the P^max bound is enforced once τ* is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClampRule {
    /// τ = max(τ*, max_n T_n(P_n^max)), then P_n = P_n(τ). Optimal for the
    /// power subproblem even when some P_n(τ*) exceeds its bound.
    #[default]
    Projected,
    /// P_n = min(P_n(τ*), P_n^max) per user, leaving τ at the unclamped root.
    PerUserMin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArpoUser {
    pub id: usize,
    /// |h_n|² at the session-start pose.
    pub gain: f64,
    pub bandwidth_hz: f64,
    pub p_max_w: f64,
    pub n_queries: u32,
    pub acc_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArpoInstance {
    pub users: Vec<ArpoUser>,
    pub zeta: f64,
    pub noise_w: f64,
    pub expected_tokens: f64,
    pub t_down_s: f64,
    pub profile: ResolutionProfile,
    #[serde(default)]
    pub clamp_rule: ClampRule,
}

impl ArpoInstance {
    /// Quasi-static snapshot: channel gains at `pose` with |ĥ| = 1.
    pub fn from_scenario(scenario: &Scenario, pose: [f64; 3]) -> Result<Self, ArpoError> {
        let users = scenario
            .users
            .iter()
            .map(|u| {
                Ok(ArpoUser {
                    id: u.id,
                    gain: snapshot_gain(pose, u.pos_m, &scenario.chan)?,
                    bandwidth_hz: u.bandwidth_hz,
                    p_max_w: u.p_max_w,
                    n_queries: u.n_queries,
                    acc_min: u.acc_min,
                })
            })
            .collect::<Result<Vec<_>, ArpoError>>()?;
        Ok(ArpoInstance {
            users,
            zeta: scenario.zeta,
            noise_w: scenario.chan.noise_w(),
            expected_tokens: scenario.expected_out_tokens,
            t_down_s: scenario.t_down_s,
            profile: scenario.profile.clone(),
            clamp_rule: ClampRule::default(),
        })
    }

    pub fn validate(&self) -> Result<(), ArpoError> {
        if !(self.zeta >= 0.0) {
            return Err(ArpoError::Domain("zeta must be >= 0".into()));
        }
        for u in &self.users {
            if !(u.gain > 0.0) {
                return Err(ArpoError::Domain(format!("user {}: gain must be > 0", u.id)));
            }
            if !(u.bandwidth_hz > 0.0 && u.p_max_w > 0.0) {
                return Err(ArpoError::Domain(format!("user {}: bandwidth and p_max must be > 0", u.id)));
            }
        }
        self.profile.validate()?;
        Ok(())
    }

    /// Power subproblem data for user `idx` at resolution `res`.
    pub fn slice(&self, idx: usize, res: Resolution) -> Result<PowerSlice, ArpoError> {
        let u = &self.users[idx];
        Ok(PowerSlice {
            payload_bits: self.profile.payload_bits(res, u.n_queries)?,
            bandwidth_hz: u.bandwidth_hz,
            gain: u.gain,
            noise_w: self.noise_w,
            floor_s: self.profile.proc_time_s(res, self.expected_tokens)? + self.t_down_s,
            p_max_w: u.p_max_w,
        })
    }

    fn slices(&self, res: &[Resolution]) -> Result<Vec<PowerSlice>, ArpoError> {
        res.iter().enumerate().map(|(i, &r)| self.slice(i, r)).collect()
    }
}

/// One user's view of the power subproblem at a fixed resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSlice {
    pub payload_bits: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
    pub noise_w: f64,
    /// Γ_n = T_proc + T_down.
    pub floor_s: f64,
    pub p_max_w: f64,
}

impl PowerSlice {
    /// T_total(P). Infinite at P = 0.
    pub fn latency(&self, p_w: f64) -> f64 {
        if self.payload_bits == 0.0 {
            return self.floor_s;
        }
        let r = rate_bps(self.bandwidth_hz, snr(p_w, self.gain, self.noise_w));
        self.payload_bits / r + self.floor_s
    }

    /// Closed-form power that makes the latency exactly `tau_s`.
    pub fn power_for_tau(&self, tau_s: f64) -> Result<f64, ArpoError> {
        if !(tau_s > self.floor_s) {
            return Err(ArpoError::Bracket {
                tau: tau_s,
                floor: self.floor_s,
            });
        }
        let e = self.payload_bits / (self.bandwidth_hz * (tau_s - self.floor_s));
        Ok(self.noise_w / self.gain * exp2_m1(e))
    }

    /// g_n(P) = -dT/dP.
    pub fn g(&self, p_w: f64) -> Result<f64, ArpoError> {
        g_n(p_w, self.payload_bits, self.bandwidth_hz, self.gain, self.noise_w)
    }

    /// ω_n(τ) = ζ / g_n(P_n(τ)), evaluated in terms of the exponent
    /// E = D/(B(τ-Γ)) so that 1 + hP/σ² = 2^E exactly.
    fn weight_at(&self, zeta: f64, tau_s: f64) -> f64 {
        if self.payload_bits == 0.0 {
            return 0.0;
        }
        let gap = tau_s - self.floor_s;
        if gap <= 0.0 {
            return f64::INFINITY;
        }
        let e = self.payload_bits / (self.bandwidth_hz * gap);
        let inv_g = self.bandwidth_hz * self.noise_w * std::f64::consts::LN_2 * e * e * e.exp2()
            / (self.payload_bits * self.gain);
        zeta * inv_g
    }
}

/// 2^e - 1 without cancellation for small e.
fn exp2_m1(e: f64) -> f64 {
    (e * std::f64::consts::LN_2).exp_m1()
}

/// Magnitude of dT_total/dP:
/// D h / (B σ² (1 + hP/σ²) ln2 [log2(1 + hP/σ²)]²).
pub fn g_n(p_w: f64, payload_bits: f64, bandwidth_hz: f64, gain: f64, noise_w: f64) -> Result<f64, ArpoError> {
    if !(p_w > 0.0) {
        return Err(ArpoError::Domain(format!("g_n requires P > 0, got {p_w}")));
    }
    let x = gain * p_w / noise_w;
    let l = x.ln_1p() / std::f64::consts::LN_2;
    Ok(payload_bits * gain / (bandwidth_hz * noise_w * (1.0 + x) * std::f64::consts::LN_2 * l * l))
}

/// Σ_n ζ / g_n(P_n(τ)).
pub fn stationarity_sum(slices: &[PowerSlice], zeta: f64, tau_s: f64) -> f64 {
    slices.iter().map(|s| s.weight_at(zeta, tau_s)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSolution {
    pub tau: f64,
    pub iterations: u32,
    /// Initial bracket, for the iteration-count contract.
    pub bracket: (f64, f64),
}

/// Bisection for the unique root of Σ ζ/g_n(P_n(τ)) = 1.
pub fn solve_tau(slices: &[PowerSlice], zeta: f64) -> Result<TauSolution, ArpoError> {
    if !(zeta > 0.0) {
        return Err(ArpoError::Domain("solve_tau requires zeta > 0".into()));
    }
    let active: Vec<PowerSlice> = slices.iter().copied().filter(|s| s.payload_bits > 0.0).collect();
    if active.is_empty() {
        return Err(ArpoError::Domain("no user has a payload to send".into()));
    }
    let floor = active.iter().map(|s| s.floor_s).fold(f64::NEG_INFINITY, f64::max);
    let lo0 = floor + EPS_LO;
    let mut gap = 1.0;
    while stationarity_sum(&active, zeta, floor + gap) >= 1.0 {
        gap *= 2.0;
        if !gap.is_finite() {
            return Err(ArpoError::Domain("could not bracket the stationarity root".into()));
        }
    }
    let hi0 = floor + gap;
    let (mut lo, mut hi) = (lo0, hi0);
    let mut iterations = 0;
    while hi - lo > TOL_TAU {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if stationarity_sum(&active, zeta, mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    Ok(TauSolution {
        tau: 0.5 * (lo + hi),
        iterations,
        bracket: (lo0, hi0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSolution {
    pub powers_w: Vec<f64>,
    /// Stationarity root τ*; `None` when ζ = 0.
    pub tau_star: Option<f64>,
    /// max_n T_n(P_n^max): the smallest achievable max-latency.
    pub tau_floor: f64,
    pub latencies_s: Vec<f64>,
    pub clamp_flags: Vec<bool>,
    pub objective: f64,
    pub bisection_iterations: u32,
    /// ω_n(τ*) = ζ/g_n(P_n(τ*)); empty when ζ = 0.
    pub omega: Vec<f64>,
}

/// Solve the power subproblem for fixed resolutions.
pub fn solve_power(slices: &[PowerSlice], zeta: f64, rule: ClampRule) -> Result<PowerSolution, ArpoError> {
    let tau_floor = slices
        .iter()
        .map(|s| s.latency(s.p_max_w))
        .fold(f64::NEG_INFINITY, f64::max);
    let finish = |powers: Vec<f64>, tau_star, clamp_flags, iterations, omega| {
        let latencies: Vec<f64> = slices.iter().zip(&powers).map(|(s, &p)| s.latency(p)).collect();
        let max_lat = latencies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let objective = max_lat + zeta * powers.iter().sum::<f64>();
        PowerSolution {
            powers_w: powers,
            tau_star,
            tau_floor,
            latencies_s: latencies,
            clamp_flags,
            objective,
            bisection_iterations: iterations,
            omega,
        }
    };
    if zeta == 0.0 {
        let powers = slices.iter().map(|s| s.p_max_w).collect();
        return Ok(finish(powers, None, vec![true; slices.len()], 0, Vec::new()));
    }
    let root = solve_tau(slices, zeta)?;
    let tau_star = root.tau;
    let mut unclamped = Vec::with_capacity(slices.len());
    for s in slices {
        unclamped.push(if s.payload_bits == 0.0 { 0.0 } else { s.power_for_tau(tau_star)? });
    }
    let clamp_flags: Vec<bool> = slices.iter().zip(&unclamped).map(|(s, &p)| p > s.p_max_w).collect();
    let powers = match rule {
        ClampRule::PerUserMin => slices.iter().zip(&unclamped).map(|(s, &p)| p.min(s.p_max_w)).collect(),
        ClampRule::Projected => {
            if clamp_flags.iter().any(|&c| c) {
                let tau = tau_star.max(tau_floor);
                slices
                    .iter()
                    .map(|s| {
                        if s.payload_bits == 0.0 {
                            Ok(0.0)
                        } else {
                            Ok(s.power_for_tau(tau)?.min(s.p_max_w))
                        }
                    })
                    .collect::<Result<Vec<_>, ArpoError>>()?
            } else {
                unclamped.clone()
            }
        }
    };
    let omega = slices.iter().map(|s| s.weight_at(zeta, tau_star)).collect();
    Ok(finish(powers, Some(tau_star), clamp_flags, root.iterations, omega))
}

/// Feasible resolution indices per user (a suffix of the profile, since
/// accuracy is non-decreasing in pixels).
fn feasible_indices(inst: &ArpoInstance) -> Result<Vec<Vec<usize>>, ArpoError> {
    let best = inst.profile.entries.iter().map(|e| e.accuracy).fold(f64::NAN, f64::max);
    inst.users
        .iter()
        .map(|u| {
            let idx: Vec<usize> = inst
                .profile
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.accuracy >= u.acc_min)
                .map(|(j, _)| j)
                .collect();
            if idx.is_empty() {
                Err(ArpoError::Infeasible {
                    user: u.id,
                    acc_min: u.acc_min,
                    best,
                })
            } else {
                Ok(idx)
            }
        })
        .collect()
}

/// Per-user independent scan: the smallest resolution meeting the accuracy floor.
pub fn scan_resolutions(inst: &ArpoInstance) -> Result<Vec<Resolution>, ArpoError> {
    let feas = feasible_indices(inst)?;
    Ok(feas.iter().map(|f| inst.profile.entries[f[0]].resolution()).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub nodes_explored: usize,
    pub leaves_evaluated: usize,
    pub pruned: usize,
}

/// Objective of the power subproblem for a full resolution assignment.
pub fn assignment_objective(inst: &ArpoInstance, res: &[Resolution]) -> Result<f64, ArpoError> {
    Ok(solve_power(&inst.slices(res)?, inst.zeta, inst.clamp_rule)?.objective)
}

struct Search<'a> {
    inst: &'a ArpoInstance,
    feas: Vec<Vec<usize>>,
    best: Option<(f64, Vec<usize>)>,
    stats: BranchStats,
}

impl Search<'_> {
    fn cost(&self, idx: &[usize]) -> Result<f64, ArpoError> {
        let res: Vec<Resolution> = idx.iter().map(|&j| self.inst.profile.entries[j].resolution()).collect();
        assignment_objective(self.inst, &res)
    }

    fn slack(v: f64) -> f64 {
        1e-9 * v.abs().max(1.0)
    }

    fn visit(&mut self, prefix: &mut Vec<usize>) -> Result<(), ArpoError> {
        self.stats.nodes_explored += 1;
        let k = prefix.len();
        if k == self.feas.len() {
            self.stats.leaves_evaluated += 1;
            let c = self.cost(prefix)?;
            if self.best.as_ref().is_none_or(|(b, _)| c < *b - Self::slack(*b)) {
                self.best = Some((c, prefix.clone()));
            }
            return Ok(());
        }
        for j in self.feas[k].clone() {
            prefix.push(j);
            // The objective is non-decreasing in every r_n, so completing the
            // prefix with each remaining user's smallest feasible index is a
            // lower bound for the whole subtree.
            let mut optimistic = prefix.clone();
            optimistic.extend(self.feas[k + 1..].iter().map(|f| f[0]));
            let bound = self.cost(&optimistic)?;
            let prune = self
                .best
                .as_ref()
                .is_some_and(|(b, _)| bound >= *b - Self::slack(*b));
            if prune {
                self.stats.pruned += 1;
            } else {
                self.visit(prefix)?;
            }
            prefix.pop();
        }
        Ok(())
    }
}

/// Branch and bound over the product of per-user feasible resolutions.
pub fn select_resolutions(inst: &ArpoInstance) -> Result<(Vec<Resolution>, BranchStats), ArpoError> {
    let feas = feasible_indices(inst)?;
    let mut search = Search {
        inst,
        feas,
        best: None,
        stats: BranchStats::default(),
    };
    search.visit(&mut Vec::with_capacity(inst.users.len()))?;
    let (_, idx) = search.best.expect("at least one leaf is always evaluated");
    let res = idx.iter().map(|&j| inst.profile.entries[j].resolution()).collect();
    Ok((res, search.stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArpoSolution {
    pub res_per_user: Vec<Resolution>,
    pub power_per_user: Vec<f64>,
    /// Stationarity root τ*, or the max latency at P^max when ζ = 0.
    pub tau_star: f64,
    pub achieved_latency_per_user: Vec<f64>,
    /// max achieved latency + ζ Σ P.
    pub objective_value: f64,
    pub clamp_flags: Vec<bool>,
    pub zeta: f64,
    pub bisection_iterations: u32,
    pub branch_stats: BranchStats,
    /// Debug only: ω_n(τ*).
    pub omega: Vec<f64>,
}

impl ArpoSolution {
    pub fn max_latency(&self) -> f64 {
        self.achieved_latency_per_user.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn total_power(&self) -> f64 {
        self.power_per_user.iter().sum()
    }

    /// Γ_n for every user under this solution.
    pub fn floors(&self, scenario: &Scenario) -> Result<Vec<f64>, ProfileError> {
        self.res_per_user.iter().map(|&r| latency_floor(scenario, r)).collect()
    }
}

/// Resolution selection followed by the KKT power allocation.
pub fn arpo_solve(inst: &ArpoInstance) -> Result<ArpoSolution, ArpoError> {
    inst.validate()?;
    let (res, stats) = select_resolutions(inst)?;
    debug_assert_eq!(res, scan_resolutions(inst)?);
    let power = solve_power(&inst.slices(&res)?, inst.zeta, inst.clamp_rule)?;
    let tau_star = power.tau_star.unwrap_or(power.tau_floor);
    Ok(ArpoSolution {
        res_per_user: res,
        power_per_user: power.powers_w,
        tau_star,
        achieved_latency_per_user: power.latencies_s,
        objective_value: power.objective,
        clamp_flags: power.clamp_flags,
        zeta: inst.zeta,
        bisection_iterations: power.bisection_iterations,
        branch_stats: stats,
        omega: power.omega,
    })
}

/// Convenience: snapshot at the scenario's start pose and solve.
pub fn solve_scenario(scenario: &Scenario) -> Result<ArpoSolution, ArpoError> {
    arpo_solve(&ArpoInstance::from_scenario(scenario, scenario.uav_start)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{default_scenario, RngStream, StreamId};
    use crate::uplink::total_latency;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        ((a - b) / b).abs() < tol
    }

    fn worked_slice() -> PowerSlice {
        PowerSlice {
            payload_bits: 3.36e6,
            bandwidth_hz: 1e6,
            gain: 1e-9,
            noise_w: 1e-13,
            floor_s: 0.5,
            p_max_w: 0.1,
        }
    }

    fn random_instance(rng: &mut RngStream, n: usize, zeta: f64) -> ArpoInstance {
        let s = default_scenario();
        let mut inst = ArpoInstance::from_scenario(&s, s.uav_start).unwrap();
        inst.zeta = zeta;
        inst.users = (0..n)
            .map(|id| ArpoUser {
                id,
                gain: 10f64.powf(rng.random_range(-11.0..-8.5)),
                bandwidth_hz: rng.random_range(0.5e6..3e6),
                p_max_w: 0.1,
                n_queries: rng.random_range(1..=2),
                acc_min: rng.random_range(0.0..0.679),
            })
            .collect();
        inst
    }

    #[test]
    fn power_for_tau_cases() {
        let s = worked_slice();
        assert!(close(s.power_for_tau(0.5 + 3.36).unwrap(), 1e-4, 1e-12));
        let oracle = 1e-4 * (2f64.powf(3.36) - 1.0);
        assert!(close(s.power_for_tau(1.5).unwrap(), oracle, 1e-12));
        assert!(close(oracle, 9.27e-4, 1e-3));
        assert!(matches!(s.power_for_tau(0.5), Err(ArpoError::Bracket { .. })));
        assert!(matches!(s.power_for_tau(0.1), Err(ArpoError::Bracket { .. })));
    }

    #[test]
    fn power_for_tau_inverts_latency() {
        let s = default_scenario();
        let inst = ArpoInstance::from_scenario(&s, s.uav_start).unwrap();
        for idx in 0..inst.users.len() {
            for res in inst.profile.resolutions() {
                let sl = inst.slice(idx, res).unwrap();
                for extra in [0.5, 0.7, 3.0, 40.0] {
                    let tau = sl.floor_s + extra;
                    let p = sl.power_for_tau(tau).unwrap();
                    let t = total_latency(&s, &s.users[idx], res, p, sl.gain).unwrap();
                    assert!(close(t, tau, 1e-9), "{t} vs {tau}");
                }
            }
        }
    }

    #[test]
    fn g_matches_central_difference() {
        let s = worked_slice();
        let (p, d) = (0.05, 1e-6);
        let g = s.g(p).unwrap();
        let fd = (s.latency(p - d) - s.latency(p + d)) / (2.0 * d);
        assert!(((g - fd) / g).abs() < 1e-6, "{g} {fd}");
        assert!(g > 0.0);
        assert!(matches!(s.g(0.0), Err(ArpoError::Domain(_))));
    }

    #[test]
    fn g_strictly_decreasing() {
        let s = worked_slice();
        let vals: Vec<f64> = (1..=10).map(|k| s.g(0.01 * k as f64).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn stationarity_sum_strictly_decreasing() {
        let mut rng = RngStream::new(3, StreamId::Instance);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 3, 300.0);
            let res = scan_resolutions(&inst).unwrap();
            let slices = inst.slices(&res).unwrap();
            let floor = slices.iter().map(|s| s.floor_s).fold(0.0, f64::max);
            let vals: Vec<f64> = (1..400).map(|k| stationarity_sum(&slices, 300.0, floor + 0.05 * k as f64)).collect();
            assert!(vals.windows(2).all(|w| w[1] < w[0] || (w[0] == f64::INFINITY)));
        }
    }

    #[test]
    fn residual_and_iteration_contract() {
        let mut rng = RngStream::new(9, StreamId::Instance);
        for zeta in [10.0, 100.0, 500.0, 1000.0] {
            let inst = random_instance(&mut rng, 3, zeta);
            let res = scan_resolutions(&inst).unwrap();
            let slices = inst.slices(&res).unwrap();
            let sol = solve_tau(&slices, zeta).unwrap();
            let residual: f64 = slices
                .iter()
                .map(|s| zeta / s.g(s.power_for_tau(sol.tau).unwrap()).unwrap())
                .sum::<f64>()
                - 1.0;
            assert!(residual.abs() < 1e-6, "residual {residual}");
            let bound = ((sol.bracket.1 - sol.bracket.0) / TOL_TAU).log2() + 2.0;
            assert!(f64::from(sol.iterations) <= bound);
        }
    }

    #[test]
    fn single_user_tau_matches_grid() {
        let s = worked_slice();
        let zeta = 50.0;
        let sol = solve_tau(&[s], zeta).unwrap();
        // Dense grid over τ of τ + ζ P(τ).
        let (lo, hi) = (s.floor_s + 1e-3, s.floor_s + 10.0);
        let n = 1_000_000;
        let step = (hi - lo) / n as f64;
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=n {
            let tau = lo + step * k as f64;
            let f = tau + zeta * s.power_for_tau(tau).unwrap();
            if f < best.0 {
                best = (f, tau);
            }
        }
        assert!((sol.tau - best.1).abs() <= step, "{} vs {}", sol.tau, best.1);
    }

    #[test]
    fn tau_monotone_in_zeta() {
        let s = default_scenario();
        let inst = ArpoInstance::from_scenario(&s, s.uav_start).unwrap();
        let res = scan_resolutions(&inst).unwrap();
        let slices = inst.slices(&res).unwrap();
        let t: Vec<f64> = [100.0, 500.0, 1000.0].iter().map(|&z| solve_tau(&slices, z).unwrap().tau).collect();
        assert!(t[0] < t[1] && t[1] < t[2], "{t:?}");
    }

    #[test]
    fn zeta_zero_uses_max_power() {
        let mut s = default_scenario();
        s.zeta = 0.0;
        let sol = solve_scenario(&s).unwrap();
        assert!(sol.power_per_user.iter().all(|&p| p == 0.1));
        assert!(close(sol.tau_star, sol.max_latency(), 1e-15));
    }

    #[test]
    fn unclamped_latencies_equal_tau() {
        let mut s = default_scenario();
        s.zeta = 500.0;
        let sol = solve_scenario(&s).unwrap();
        assert!(sol.clamp_flags.iter().all(|&c| !c));
        for &t in &sol.achieved_latency_per_user {
            assert!(close(t, sol.tau_star, 1e-6));
        }
        assert!(sol.power_per_user.iter().zip(&s.users).all(|(p, u)| *p <= u.p_max_w));
    }

    #[test]
    fn resolution_selection_examples() {
        let s = default_scenario();
        let mut inst = ArpoInstance::from_scenario(&s, s.uav_start).unwrap();
        inst.users.truncate(2);
        inst.users[0].acc_min = 0.60;
        inst.users[1].acc_min = 0.67;
        let (res, _) = select_resolutions(&inst).unwrap();
        assert_eq!(res, vec![Resolution::square(768), Resolution::square(1024)]);
        for u in &mut inst.users {
            u.acc_min = 0.0;
        }
        let (res, _) = select_resolutions(&inst).unwrap();
        assert_eq!(res, vec![Resolution::square(384); 2]);
        inst.users[1].acc_min = 0.9;
        match select_resolutions(&inst) {
            Err(ArpoError::Infeasible { user, .. }) => assert_eq!(user, inst.users[1].id),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn branch_and_bound_matches_exhaustive_enumeration() {
        let mut rng = RngStream::new(17, StreamId::Instance);
        for trial in 0..30 {
            let zeta = [0.0, 100.0, 1000.0][trial % 3];
            let inst = random_instance(&mut rng, 3, zeta);
            let (bb, stats) = select_resolutions(&inst).unwrap();
            let j = inst.profile.len();
            let mut best: Option<(f64, Vec<Resolution>)> = None;
            for code in 0..j.pow(3) {
                let idx = [code % j, (code / j) % j, code / (j * j)];
                let res: Vec<Resolution> = idx.iter().map(|&k| inst.profile.entries[k].resolution()).collect();
                let ok = res
                    .iter()
                    .zip(&inst.users)
                    .all(|(r, u)| inst.profile.accuracy(*r).unwrap() >= u.acc_min);
                if !ok {
                    continue;
                }
                let c = assignment_objective(&inst, &res).unwrap();
                let better = match &best {
                    None => true,
                    Some((b, r)) => c < b - 1e-9 * b.abs() || ((c - b).abs() <= 1e-9 * b.abs() && res < *r),
                };
                if better {
                    best = Some((c, res));
                }
            }
            assert_eq!(bb, best.unwrap().1);
            assert_eq!(bb, scan_resolutions(&inst).unwrap());
            assert!(stats.leaves_evaluated >= 1);
        }
    }

    #[test]
    fn projected_clamp_beats_per_user_min() {
        // A weak user forces the clamp; the projected rule relaxes the others.
        let mut s = default_scenario();
        s.zeta = 20.0;
        let mut inst = ArpoInstance::from_scenario(&s, s.uav_start).unwrap();
        inst.users[0].gain *= 1e-3;
        let projected = arpo_solve(&inst).unwrap();
        assert!(projected.clamp_flags.iter().any(|&c| c));
        inst.clamp_rule = ClampRule::PerUserMin;
        let verbatim = arpo_solve(&inst).unwrap();
        assert!(projected.objective_value <= verbatim.objective_value + 1e-12);
        assert!(projected.power_per_user.iter().zip(&inst.users).all(|(p, u)| *p <= u.p_max_w));
    }
}
