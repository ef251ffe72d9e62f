//! Uplink transmission time under slot-varying rates (completion index with a
//! fractional final slot) and under the quasi-static closed form.

use thiserror::Error;

use crate::channel::{rate_bps, snr};
use crate::scenario::{Scenario, UserTask};
use crate::vlm_profile::{ProfileError, Resolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UplinkError {
    #[error("zero uplink rate: latency is infinite")]
    ZeroRate,
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UploadResult {
    /// 1-based completion slot; `Some(0)` for an empty payload, `None` if the
    /// rate sequence ended first.
    pub completion_slot: Option<usize>,
    pub uplink_time_s: f64,
    pub bits_remaining: f64,
}

impl UploadResult {
    pub fn is_complete(&self) -> bool {
        self.completion_slot.is_some()
    }
}

/// Walk the per-slot rates until the cumulative αR covers the payload.
pub fn simulate_upload(payload_bits: f64, rates_bps: &[f64], slot_len_s: f64) -> UploadResult {
    if payload_bits <= 0.0 {
        return UploadResult {
            completion_slot: Some(0),
            uplink_time_s: 0.0,
            bits_remaining: 0.0,
        };
    }
    let mut remaining = payload_bits;
    for (i, &r) in rates_bps.iter().enumerate() {
        let cap = slot_len_s * r;
        if r > 0.0 && remaining <= cap {
            return UploadResult {
                completion_slot: Some(i + 1),
                uplink_time_s: slot_len_s * i as f64 + remaining / r,
                bits_remaining: 0.0,
            };
        }
        remaining -= cap;
    }
    UploadResult {
        completion_slot: None,
        uplink_time_s: slot_len_s * rates_bps.len() as f64,
        bits_remaining: remaining,
    }
}

/// T_up = D / (B log2(1 + P|h|²/σ²)).
pub fn static_uplink_time(
    payload_bits: f64,
    bandwidth_hz: f64,
    p_w: f64,
    gain: f64,
    noise_w: f64,
) -> Result<f64, UplinkError> {
    if payload_bits == 0.0 {
        return Ok(0.0);
    }
    let rate = rate_bps(bandwidth_hz, snr(p_w, gain, noise_w));
    if !(rate > 0.0) {
        return Err(UplinkError::ZeroRate);
    }
    Ok(payload_bits / rate)
}

/// Γ = T_proc(r) + T_down: the power-independent part of a user's latency.
pub fn latency_floor(scenario: &Scenario, res: Resolution) -> Result<f64, ProfileError> {
    Ok(scenario.profile.proc_time_s(res, scenario.expected_out_tokens)? + scenario.t_down_s)
}

/// T_total = T_up + T_proc + T_down with the channel held at `gain`.
pub fn total_latency(
    scenario: &Scenario,
    user: &UserTask,
    res: Resolution,
    p_w: f64,
    gain: f64,
) -> Result<f64, UplinkError> {
    let d = scenario.profile.payload_bits(res, user.n_queries)?;
    let up = static_uplink_time(d, user.bandwidth_hz, p_w, gain, scenario.chan.noise_w())?;
    Ok(up + latency_floor(scenario, res)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::default_scenario;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        ((a - b) / b).abs() < tol
    }

    #[test]
    fn single_slot_fraction() {
        let r = simulate_upload(8e6, &[1e7; 5], 1.0);
        assert_eq!(r.completion_slot, Some(1));
        assert!(close(r.uplink_time_s, 0.8, 1e-12));
        assert_eq!(r.bits_remaining, 0.0);
    }

    #[test]
    fn empty_payload() {
        let r = simulate_upload(0.0, &[1e6], 1.0);
        assert_eq!(r.uplink_time_s, 0.0);
        assert_eq!(r.bits_remaining, 0.0);
        assert!(r.is_complete());
    }

    #[test]
    fn multi_slot_fraction() {
        let r = simulate_upload(2.5e6, &[1e6, 1e6, 1e6], 1.0);
        assert_eq!(r.completion_slot, Some(3));
        assert!(close(r.uplink_time_s, 2.5, 1e-12));
    }

    #[test]
    fn incomplete_at_horizon() {
        let r = simulate_upload(5e6, &[1e6, 1e6], 1.0);
        assert_eq!(r.completion_slot, None);
        assert_eq!(r.uplink_time_s, 2.0);
        assert!(close(r.bits_remaining, 3e6, 1e-12));
    }

    #[test]
    fn zero_rate_slots_are_skipped() {
        let r = simulate_upload(1e6, &[0.0, 0.0, 2e6], 1.0);
        assert_eq!(r.completion_slot, Some(3));
        assert!(close(r.uplink_time_s, 2.5, 1e-12));
    }

    #[test]
    fn static_time() {
        let t = static_uplink_time(3.36e6, 1e6, 0.1, 1e-9, 1e-13).unwrap();
        assert!(close(t, 0.33711, 1e-4));
        assert_eq!(static_uplink_time(0.0, 1e6, 0.1, 1e-9, 1e-13).unwrap(), 0.0);
        let t2 = static_uplink_time(3.36e6, 2e6, 0.1, 1e-9, 1e-13).unwrap();
        assert!(close(t2 * 2.0, t, 1e-15));
        assert_eq!(
            static_uplink_time(1.0, 1e6, 0.0, 1e-9, 1e-13),
            Err(UplinkError::ZeroRate)
        );
    }

    #[test]
    fn total_latency_chain() {
        let s = default_scenario();
        let mut user = s.users[0].clone();
        user.n_queries = 1;
        let t = total_latency(&s, &user, Resolution::square(384), 0.1, 1e-9).unwrap();
        let oracle = 3.36e6 / (1e6 * 1001f64.log2()) + 20.0 / 23.8 + 0.1;
        assert!(close(t, oracle, 1e-12));
        assert!(close(t, 1.27745, 1e-5));
        let huge = total_latency(&s, &user, Resolution::square(384), 1e30, 1e-9).unwrap();
        assert!(close(huge, 20.0 / 23.8 + 0.1, 0.05));
    }

    #[test]
    fn slot_model_matches_static_under_constant_rate() {
        let rate = rate_bps(1e6, 1000.0);
        let d = 3.36e6;
        let sim = simulate_upload(d, &[rate; 10], 1.0);
        let stat = static_uplink_time(d, 1e6, 0.1, 1e-9, 1e-13).unwrap();
        assert!((sim.uplink_time_s - stat).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn constant_rate_is_d_over_r(d in 1.0f64..1e8, r in 1e3f64..1e8, alpha in 0.1f64..2.0) {
            let res = simulate_upload(d, &vec![r; 4000], alpha);
            prop_assume!(res.is_complete());
            prop_assert!(((res.uplink_time_s - d / r) / (d / r)).abs() < 1e-9);
            let k = res.completion_slot.unwrap();
            prop_assert!(alpha * (k as f64 - 1.0) < res.uplink_time_s + 1e-12);
            prop_assert!(res.uplink_time_s <= alpha * k as f64 + 1e-12);
        }

        #[test]
        fn faster_rates_never_slow_down(
            d in 1e5f64..1e7,
            rates in proptest::collection::vec(0.0f64..5e6, 1..30),
            bumps in proptest::collection::vec(0.0f64..5e6, 30),
        ) {
            let faster: Vec<f64> = rates.iter().zip(&bumps).map(|(r, b)| r + b).collect();
            let a = simulate_upload(d, &rates, 1.0);
            let b = simulate_upload(d, &faster, 1.0);
            prop_assert!(b.uplink_time_s <= a.uplink_time_s + 1e-9);
        }

        #[test]
        fn cumulative_bits_reproduce_payload(d in 1e5f64..1e7, rates in proptest::collection::vec(1e4f64..5e6, 1..40)) {
            let res = simulate_upload(d, &rates, 1.0);
            prop_assume!(res.is_complete());
            let k = res.completion_slot.unwrap();
            let before: f64 = rates[..k - 1].iter().sum();
            let partial = (res.uplink_time_s - (k - 1) as f64) * rates[k - 1];
            prop_assert!((before + partial - d).abs() <= rates[k - 1] * 1e-9 + 1e-6);
            prop_assert!(before < d);
            prop_assert!(before + rates[k - 1] >= d);
        }
    }
}
