//! Per-slot reward functions for trajectory learning.

use thiserror::Error;

use crate::channel::geometry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("reward evaluation failed: {0}")]
    Eval(String),
    #[error("reward is not finite: {0}")]
    NonFinite(f64),
}

/// Everything a reward may look at for one slot transition.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardContext {
    /// d_n[t], before this slot's transmission.
    pub backlog: Vec<f64>,
    /// min{d_n[t], αR_n[t]}.
    pub transmitted: Vec<f64>,
    /// d_n[t+1].
    pub next_backlog: Vec<f64>,
    /// R_n[t] in bits/s.
    pub rate: Vec<f64>,
    pub slot_len: f64,
    /// 0-based slot index t.
    pub slot: usize,
    pub pose: [f64; 3],
    pub next_pose: [f64; 3],
    pub user_pos: Vec<[f64; 3]>,
    /// Backlogs at episode start.
    pub init_backlog: Vec<f64>,
    pub area_diag: f64,
}

impl RewardContext {
    pub fn num_users(&self) -> usize {
        self.backlog.len()
    }

    /// n_t = argmax_n d_n[t], ties to the lowest index.
    pub fn bottleneck(&self) -> usize {
        argmax(&self.backlog)
    }

    pub fn dist_to(&self, user: usize) -> f64 {
        geometry(self.pose, self.user_pos[user]).dist_m
    }

    pub fn next_dist_to(&self, user: usize) -> f64 {
        geometry(self.next_pose, self.user_pos[user]).dist_m
    }

    /// Distance to `user` before the move minus distance after it.
    pub fn delta_dist_to(&self, user: usize) -> f64 {
        self.dist_to(user) - self.next_dist_to(user)
    }

    /// d_n[t] / d_n[0].
    pub fn backlog_fraction(&self) -> Vec<f64> {
        self.backlog.iter().zip(&self.init_backlog).map(|(d, i)| d / i).collect()
    }

    pub fn init_max_backlog(&self) -> f64 {
        self.init_backlog.iter().copied().fold(0.0, f64::max)
    }

    pub fn init_total_backlog(&self) -> f64 {
        self.init_backlog.iter().sum()
    }
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Empirical q-quantile inf{τ : (1/N) Σ 1{d_n ≤ τ} ≥ q}. `None` on an empty
/// slice or q outside (0, 1).
pub fn var_q(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(q > 0.0 && q < 1.0) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // The fraction at sorted[k-1] is at least k/N; the first k with k/N ≥ q
    // gives the infimum.
    (1..=sorted.len())
        .find(|&k| k as f64 / n >= q)
        .map(|k| sorted[k - 1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskRewardParams {
    pub q: f64,
    pub mu: f64,
    pub gamma_d: f64,
}

impl Default for RiskRewardParams {
    fn default() -> Self {
        RiskRewardParams {
            q: 0.9,
            mu: 0.0,
            gamma_d: 0.0,
        }
    }
}

/// −VaR_q(d[t]) + μ Σ min{d_n[t], αR_n[t]} + γ_d Δdist[t].
pub fn risk_reward(ctx: &RewardContext, p: &RiskRewardParams) -> f64 {
    let var = var_q(&ctx.backlog, p.q).unwrap_or(0.0);
    let through: f64 = served_bits(ctx).sum();
    -var + p.mu * through + p.gamma_d * ctx.delta_dist_to(ctx.bottleneck())
}

/// Each term scaled to O(1). The risk term is taken over the fraction of each
/// user's payload still queued, so a small straggler weighs as much as a large
/// one; throughput is scaled by the total initial backlog and Δdist (towards
/// the user with the largest remaining fraction) by the area diagonal.
pub fn risk_reward_normalized(ctx: &RewardContext, q: f64) -> f64 {
    let frac = ctx.backlog_fraction();
    let var = var_q(&frac, q).unwrap_or(0.0);
    let through: f64 = served_bits(ctx).sum();
    -var + through / ctx.init_total_backlog() + ctx.delta_dist_to(argmax(&frac)) / ctx.area_diag
}

fn served_bits(ctx: &RewardContext) -> impl Iterator<Item = f64> + '_ {
    ctx.backlog
        .iter()
        .zip(&ctx.rate)
        .map(|(&d, &r)| d.min(r * ctx.slot_len))
}

/// −max_n d_n[t+1], normalized by the largest initial backlog.
pub fn manual_bottleneck_reward(ctx: &RewardContext) -> f64 {
    let worst = ctx.next_backlog.iter().copied().fold(0.0, f64::max);
    -(worst / ctx.init_max_backlog())
}

/// Anything that maps a slot transition to a scalar reward.
pub trait RewardFn: Send + Sync {
    fn reward(&self, ctx: &RewardContext) -> Result<f64, RewardError>;

    fn name(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskReward {
    Raw(RiskRewardParams),
    Normalized { q: f64 },
}

impl Default for RiskReward {
    fn default() -> Self {
        RiskReward::Normalized { q: 0.9 }
    }
}

impl RewardFn for RiskReward {
    fn reward(&self, ctx: &RewardContext) -> Result<f64, RewardError> {
        let r = match self {
            RiskReward::Raw(p) => risk_reward(ctx, p),
            RiskReward::Normalized { q } => risk_reward_normalized(ctx, *q),
        };
        if r.is_finite() {
            Ok(r)
        } else {
            Err(RewardError::NonFinite(r))
        }
    }

    fn name(&self) -> String {
        "risk".into()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ManualBottleneck;

impl RewardFn for ManualBottleneck {
    fn reward(&self, ctx: &RewardContext) -> Result<f64, RewardError> {
        Ok(manual_bottleneck_reward(ctx))
    }

    fn name(&self) -> String {
        "manual".into()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::scenario::{RngStream, StreamId};
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn random_context(rng: &mut impl Rng, n: usize) -> RewardContext {
        let backlog: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..5e7) })
            .collect();
        let rate: Vec<f64> = (0..n).map(|_| rng.random_range(1e5..1.2e7)).collect();
        let slot_len = rng.random_range(0.5..2.0);
        let transmitted: Vec<f64> = backlog.iter().zip(&rate).map(|(d, r)| d.min(r * slot_len)).collect();
        let next_backlog = backlog.iter().zip(&transmitted).map(|(d, t)| d - t).collect();
        let pt = |rng: &mut dyn rand::RngCore| {
            [
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
                rng.random_range(50.0..300.0),
            ]
        };
        let pose = pt(rng);
        let next_pose = [pose[0] + rng.random_range(-70.0..70.0), pose[1] + rng.random_range(-70.0..70.0), pose[2]];
        let user_pos = (0..n).map(|_| [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), 0.0]).collect();
        let init_backlog = backlog.iter().map(|d| d + rng.random_range(1e6..1e7)).collect();
        RewardContext {
            backlog,
            transmitted,
            next_backlog,
            rate,
            slot_len,
            slot: rng.random_range(0..50),
            pose,
            next_pose,
            user_pos,
            init_backlog,
            area_diag: 1000.0 * std::f64::consts::SQRT_2,
        }
    }

    /// Smallest observed value τ whose empirical CDF reaches q.
    pub(crate) fn var_q_oracle(values: &[f64], q: f64) -> f64 {
        let n = values.len() as f64;
        let mut best = f64::INFINITY;
        for &tau in values {
            let frac = values.iter().filter(|&&d| d <= tau).count() as f64 / n;
            if frac >= q && tau < best {
                best = tau;
            }
        }
        best
    }

    fn hand_ctx(backlog: Vec<f64>, rate: Vec<f64>) -> RewardContext {
        let n = backlog.len();
        let transmitted: Vec<f64> = backlog.iter().zip(&rate).map(|(d, r)| d.min(*r)).collect();
        RewardContext {
            next_backlog: backlog.iter().zip(&transmitted).map(|(d, t)| d - t).collect(),
            init_backlog: backlog.clone(),
            transmitted,
            backlog,
            rate,
            slot_len: 1.0,
            slot: 0,
            pose: [0.0, 0.0, 100.0],
            next_pose: [0.0, 0.0, 100.0],
            user_pos: (0..n).map(|i| [100.0 * i as f64, 0.0, 0.0]).collect(),
            area_diag: 1000.0,
        }
    }

    #[test]
    fn var_q_examples() {
        assert_eq!(var_q(&[0.0, 0.0, 5.0, 10.0], 0.5), Some(0.0));
        assert_eq!(var_q(&[0.0, 0.0, 5.0, 10.0], 0.9), Some(10.0));
        assert_eq!(var_q(&[0.0, 0.0, 5.0, 10.0], 0.9), Some(var_q_oracle(&[0.0, 0.0, 5.0, 10.0], 0.9)));
        for q in [0.01, 0.3, 0.99] {
            assert_eq!(var_q(&[7.5; 3], q), Some(7.5));
        }
        assert_eq!(var_q(&[], 0.5), None);
        assert_eq!(var_q(&[1.0], 1.0), None);
    }

    #[test]
    fn var_q_matches_threshold_enumeration() {
        let mut rng = RngStream::new(21, StreamId::Instance);
        for _ in 0..2000 {
            let n = rng.random_range(1..12);
            let v: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8))).collect();
            let q = [0.1, 0.25, 0.5, 0.7, 0.75, 0.9, rng.random_range(0.01..0.99)][rng.random_range(0..7)];
            assert_eq!(var_q(&v, q).unwrap(), var_q_oracle(&v, q), "{v:?} {q}");
        }
    }

    #[test]
    fn risk_reward_terms() {
        let ctx = hand_ctx(vec![0.0, 0.0], vec![1e6, 1e6]);
        let p = RiskRewardParams { q: 0.9, mu: 1.0, gamma_d: 1.0 };
        assert_eq!(risk_reward(&ctx, &p), 0.0);

        let ctx = hand_ctx(vec![1e6, 4e6], vec![2e6, 2e6]);
        let only_var = RiskRewardParams { q: 0.9, mu: 0.0, gamma_d: 0.0 };
        assert_eq!(risk_reward(&ctx, &only_var), -var_q(&ctx.backlog, 0.9).unwrap());
        let p = RiskRewardParams { q: 0.9, mu: 1e-6, gamma_d: 0.0 };
        assert!((risk_reward(&ctx, &p) - (-3_999_997.0)).abs() < 1e-6);
    }

    #[test]
    fn distance_term_uses_pre_move_bottleneck() {
        let mut ctx = hand_ctx(vec![1e6, 4e6], vec![2e6, 2e6]);
        ctx.pose = [0.0, 0.0, 100.0];
        ctx.next_pose = [60.0, 0.0, 100.0];
        let p = RiskRewardParams { q: 0.9, mu: 0.0, gamma_d: 1.0 };
        let expect = -4e6 + (ctx.dist_to(1) - ctx.next_dist_to(1));
        assert_eq!(risk_reward(&ctx, &p), expect);
        assert!(ctx.delta_dist_to(1) > 0.0);
    }

    #[test]
    fn manual_reward_cases() {
        let mut ctx = hand_ctx(vec![3e6, 4e6], vec![5e6, 5e6]);
        assert_eq!(manual_bottleneck_reward(&ctx), 0.0);
        ctx.next_backlog = ctx.backlog.clone();
        assert_eq!(manual_bottleneck_reward(&ctx), -1.0);
        let before = manual_bottleneck_reward(&ctx);
        ctx.next_backlog[1] = 3.5e6;
        assert!(manual_bottleneck_reward(&ctx) > before);
    }

    #[test]
    fn bottleneck_ties_to_lowest_index() {
        let ctx = hand_ctx(vec![2.0, 5.0, 5.0, 1.0], vec![1.0; 4]);
        assert_eq!(ctx.bottleneck(), 1);
        assert_eq!(argmin(&[3.0, 1.0, 1.0]), 1);
    }

    proptest! {
        #[test]
        fn var_q_monotone_and_scale_equivariant(
            v in proptest::collection::vec(0.0f64..1e7, 1..10),
            q in 0.01f64..0.98,
            dq in 0.0f64..0.01,
            k in 0.1f64..10.0,
        ) {
            let a = var_q(&v, q).unwrap();
            prop_assert!(var_q(&v, q + dq).unwrap() >= a);
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            prop_assert_eq!(var_q(&scaled, q).unwrap(), a * k);
        }

        #[test]
        fn risk_translation(seed in 0u64..1000, shift in 0.0f64..1e6) {
            let mut rng = RngStream::new(seed, StreamId::Instance);
            let ctx = random_context(&mut rng, 4);
            let p = RiskRewardParams { q: 0.75, mu: 0.0, gamma_d: 0.0 };
            let mut shifted = ctx.clone();
            for d in &mut shifted.backlog { *d += shift; }
            let diff = risk_reward(&ctx, &p) - risk_reward(&shifted, &p);
            prop_assert!((diff - shift).abs() <= 1e-9 * (1.0 + ctx.backlog.iter().copied().fold(0.0, f64::max)));
        }

        #[test]
        fn throughput_term_capped(seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, StreamId::Instance);
            let ctx = random_context(&mut rng, 5);
            let mu = 1e-6;
            let through = mu * served_bits(&ctx).sum::<f64>();
            prop_assert!(through <= mu * ctx.rate.iter().map(|r| r * ctx.slot_len).sum::<f64>() + 1e-12);
            prop_assert!(through <= mu * ctx.backlog.iter().sum::<f64>() + 1e-12);
        }

        #[test]
        fn permuting_tied_users_keeps_reward(seed in 0u64..500) {
            let mut rng = RngStream::new(seed, StreamId::Instance);
            let mut ctx = random_context(&mut rng, 4);
            // Users 1 and 2 tie on everything reward-relevant except identity.
            ctx.backlog[1] = ctx.backlog[2];
            ctx.rate[1] = ctx.rate[2];
            ctx.user_pos[1] = ctx.user_pos[2];
            let mut swapped = ctx.clone();
            swapped.backlog.swap(1, 2);
            swapped.rate.swap(1, 2);
            swapped.user_pos.swap(1, 2);
            let p = RiskRewardParams { q: 0.9, mu: 1e-7, gamma_d: 1e-3 };
            prop_assert_eq!(risk_reward(&ctx, &p), risk_reward(&swapped, &p));
        }
    }
}
