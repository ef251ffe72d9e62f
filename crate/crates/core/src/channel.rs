//! Air-to-ground channel: elevation-dependent LoS probability, LoS-averaged
//! large-scale gain, small-scale fading, SNR and Shannon rate.

use rand::Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::scenario::{ChannelConfig, FadingMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("co-located link: UAV and user at the same point, path loss undefined")]
    CoLocated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    pub dist_m: f64,
    /// Elevation angle in degrees.
    pub elev_deg: f64,
    pub horiz_dist_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSample {
    /// LoS-averaged large-scale gain β̄.
    pub mean_gain: f64,
    /// |ĥ|².
    pub fading_power: f64,
    /// |h|² = β̄·|ĥ|².
    pub gain: f64,
}

pub fn geometry(uav: [f64; 3], user: [f64; 3]) -> LinkGeometry {
    let dx = uav[0] - user[0];
    let dy = uav[1] - user[1];
    let dz = uav[2] - user[2];
    let horiz = dx.hypot(dy);
    let dist = (horiz * horiz + dz * dz).sqrt();
    let elev_deg = if horiz == 0.0 {
        90.0
    } else {
        (dz / horiz).atan().to_degrees()
    };
    LinkGeometry {
        dist_m: dist,
        elev_deg,
        horiz_dist_m: horiz,
    }
}

/// Sigmoid LoS probability with θ in degrees.
pub fn los_probability(elev_deg: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + a * (-b * (elev_deg - a)).exp())
}

pub fn mean_gain(geom: &LinkGeometry, chan: &ChannelConfig) -> Result<f64, ChannelError> {
    if geom.dist_m <= 0.0 {
        return Err(ChannelError::CoLocated);
    }
    let p = los_probability(geom.elev_deg, chan.a_los, chan.b_los);
    Ok(mean_gain_with_p(geom.dist_m, p, chan))
}

pub(crate) fn mean_gain_with_p(dist_m: f64, p_los: f64, chan: &ChannelConfig) -> f64 {
    let beta0 = chan.beta0_lin();
    let los = beta0 / dist_m.powf(chan.gamma_los);
    let nlos = beta0 / dist_m.powf(chan.gamma_nlos);
    // Same value as p·los + (1-p)·nlos, but exact when the exponents agree.
    nlos + p_los * (los - nlos)
}

pub fn sample_fading<R: Rng + ?Sized>(mode: FadingMode, rng: &mut R) -> f64 {
    match mode {
        FadingMode::UnitModulus => 1.0,
        FadingMode::Rayleigh => rng.sample(Exp1),
    }
}

pub fn sample_channel<R: Rng + ?Sized>(
    uav: [f64; 3],
    user: [f64; 3],
    chan: &ChannelConfig,
    rng: &mut R,
) -> Result<ChannelSample, ChannelError> {
    let mean = mean_gain(&geometry(uav, user), chan)?;
    let fading = sample_fading(chan.fading_mode, rng);
    Ok(ChannelSample {
        mean_gain: mean,
        fading_power: fading,
        gain: mean * fading,
    })
}

/// Deterministic |h|² with |ĥ| = 1, used for the quasi-static snapshot.
pub fn snapshot_gain(uav: [f64; 3], user: [f64; 3], chan: &ChannelConfig) -> Result<f64, ChannelError> {
    mean_gain(&geometry(uav, user), chan)
}

pub fn snr(p_w: f64, gain: f64, noise_w: f64) -> f64 {
    p_w * gain / noise_w
}

pub fn rate_bps(bandwidth_hz: f64, snr: f64) -> f64 {
    bandwidth_hz * snr.ln_1p() / std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{default_scenario, RngStream, StreamId};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        ((a - b) / b).abs() < tol
    }

    fn chan(gl: f64, gn: f64) -> ChannelConfig {
        ChannelConfig {
            gamma_los: gl,
            gamma_nlos: gn,
            ..default_scenario().chan
        }
    }

    #[test]
    fn geometry_cases() {
        let g = geometry([0.0, 0.0, 100.0], [0.0, 0.0, 0.0]);
        assert_eq!(g.dist_m, 100.0);
        assert_eq!(g.elev_deg, 90.0);
        let g = geometry([100.0, 0.0, 100.0], [0.0, 0.0, 0.0]);
        assert!(close(g.dist_m, 141.421_356, 1e-8));
        assert!(close(g.elev_deg, 45.0, 1e-12));
        let g = geometry([-500.0, -500.0, 150.0], [0.0, 0.0, 0.0]);
        let oracle = (500.0f64 * 500.0 + 500.0 * 500.0 + 150.0 * 150.0).sqrt();
        assert!(close(g.dist_m, oracle, 1e-14));
        assert!(close(g.dist_m, 722.842, 1e-6));
    }

    #[test]
    fn los_probability_cases() {
        assert!(close(los_probability(4.88, 4.88, 0.43), 1.0 / 5.88, 1e-12));
        assert!((los_probability(90.0, 4.88, 0.43) - 1.0).abs() < 1e-12);
        let oracle = 1.0 / (1.0 + 4.88 * (0.43f64 * 4.88).exp());
        assert!(close(los_probability(0.0, 4.88, 0.43), oracle, 1e-12));
        assert!(close(los_probability(0.0, 4.88, 0.43), 0.0246, 1e-2));
    }

    #[test]
    fn mean_gain_cases() {
        let c = chan(2.0, 2.0);
        let g = geometry([0.0, 0.0, 100.0], [0.0, 0.0, 0.0]);
        assert!(close(mean_gain(&g, &c).unwrap(), 1e-9, 1e-12));
        let g1 = geometry([0.0, 0.0, 1.0], [0.0, 0.0, 0.0]);
        assert!(close(mean_gain(&g1, &c).unwrap(), 1e-5, 1e-12));
        let c23 = chan(2.0, 3.0);
        assert!(close(mean_gain_with_p(100.0, 0.5, &c23), 5.05e-10, 1e-12));
    }

    #[test]
    fn co_located_is_an_error() {
        let g = geometry([1.0, 2.0, 0.0], [1.0, 2.0, 0.0]);
        assert_eq!(mean_gain(&g, &chan(2.0, 2.0)), Err(ChannelError::CoLocated));
    }

    #[test]
    fn fading_modes() {
        let mut rng = RngStream::new(1, StreamId::Fading);
        for _ in 0..10 {
            assert_eq!(sample_fading(FadingMode::UnitModulus, &mut rng), 1.0);
        }
        let mut rng = RngStream::new(11, StreamId::Fading);
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_fading(FadingMode::Rayleigh, &mut rng)).sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
        let seq = |seed| {
            let mut r = RngStream::new(seed, StreamId::Fading);
            (0..32).map(|_| sample_fading(FadingMode::Rayleigh, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(seq(5), seq(5));
    }

    #[test]
    fn snr_and_rate() {
        let s = snr(0.1, 1e-9, 1e-13);
        assert!(close(s, 1000.0, 1e-12));
        assert_eq!(rate_bps(1e6, 0.0), 0.0);
        assert!(close(rate_bps(1e6, 1000.0), 1e6 * 1001f64.log2(), 1e-14));
        assert!(close(rate_bps(1e6, 1000.0), 9.9672e6, 1e-4));
    }

    #[test]
    fn equal_exponents_make_elevation_irrelevant() {
        let c = chan(2.0, 2.0);
        let d = 321.0;
        let reference = mean_gain_with_p(d, 0.0, &c);
        for k in 0..=90 {
            let p = los_probability(k as f64, c.a_los, c.b_los);
            assert_eq!(mean_gain_with_p(d, p, &c), reference);
        }
    }

    proptest! {
        #[test]
        fn los_increasing_and_bounded(t in 0.0f64..89.0, dt in 0.01f64..1.0) {
            let p0 = los_probability(t, 4.88, 0.43);
            let p1 = los_probability(t + dt, 4.88, 0.43);
            prop_assert!(p0 > 0.0 && p0 < 1.0);
            prop_assert!(p1 >= p0);
            if p0 < 1.0 - 1e-12 {
                prop_assert!(p1 > p0);
            }
        }

        #[test]
        fn gain_bracketed_and_decreasing(d in 1.0f64..2000.0, theta in 0.0f64..90.0, k in 1.001f64..2.0) {
            let c = chan(2.0, 3.0);
            let p = los_probability(theta, c.a_los, c.b_los);
            let g = mean_gain_with_p(d, p, &c);
            let los = c.beta0_lin() / d.powf(2.0);
            let nlos = c.beta0_lin() / d.powf(3.0);
            prop_assert!(g <= los.max(nlos) * (1.0 + 1e-12) && g >= los.min(nlos) * (1.0 - 1e-12));
            prop_assert!(mean_gain_with_p(d * k, p, &c) < g);
        }

        #[test]
        fn rate_monotone_and_linear_in_bandwidth(p in 1e-4f64..1.0, dp in 1e-4f64..1.0, b in 1e5f64..1e7, g in 1e-12f64..1e-6) {
            let r = rate_bps(b, snr(p, g, 1e-13));
            prop_assert!(rate_bps(b, snr(p + dp, g, 1e-13)) > r);
            prop_assert!(rate_bps(b * 1.5, snr(p, g, 1e-13)) > r);
            let s = snr(p, g, 1e-13);
            let lhs = rate_bps(b, s);
            let rhs = b / 1e6 * rate_bps(1e6, s);
            prop_assert!(((lhs - rhs) / lhs).abs() < 1e-12);
        }
    }
}
