//! Empirical resolution lookup tables: accuracy, decoding speed and payload
//! per supported input resolution.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::BITS_PER_MB;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("resolution {0} is not in the profile")]
    UnknownResolution(Resolution),
    #[error("accuracy requirement {acc_min} exceeds the best available accuracy {best}")]
    Infeasible { acc_min: f64, best: f64 },
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("profile file error: {0}")]
    File(String),
}

/// An input resolution, identified by its total pixel count H·W.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Resolution(pub u64);

impl Resolution {
    pub fn square(side: u64) -> Self {
        Resolution(side * side)
    }

    pub fn pixels(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = (self.0 as f64).sqrt().round() as u64;
        if side * side == self.0 {
            write!(f, "{side}p")
        } else {
            write!(f, "{}px", self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub label: String,
    pub pixels: u64,
    /// Top-1 accuracy as a fraction.
    pub accuracy: f64,
    pub speed_tokens_per_s: f64,
    /// Image payload per query in decimal megabytes.
    pub payload_mb: f64,
}

impl ProfileEntry {
    pub fn resolution(&self) -> Resolution {
        Resolution(self.pixels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionProfile {
    pub entries: Vec<ProfileEntry>,
}

impl Default for ResolutionProfile {
    fn default() -> Self {
        default_profile()
    }
}

/// Measured LLaVA-HR table. Payloads at 768p and 1024p are pixel-proportional
/// to the 384p entry; the two endpoints are measured values.
pub fn default_profile() -> ResolutionProfile {
    let e = |side: u64, accuracy, speed, payload_mb| ProfileEntry {
        label: format!("{side}p"),
        pixels: side * side,
        accuracy,
        speed_tokens_per_s: speed,
        payload_mb,
    };
    ResolutionProfile {
        entries: vec![
            e(384, 0.5963, 23.8, 0.42),
            e(768, 0.6436, 19.9, 1.68),
            e(1024, 0.6711, 19.7, 2.99),
            e(1536, 0.6796, 12.6, 6.74),
        ],
    }
}

impl ResolutionProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.entries.is_empty() {
            return Err(ProfileError::Invalid("profile has no entries".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.pixels == 0 {
                return Err(ProfileError::Invalid(format!("entry {i}: pixels must be > 0")));
            }
            if !(0.0..=1.0).contains(&e.accuracy) {
                return Err(ProfileError::Invalid(format!("entry {i}: accuracy outside [0,1]")));
            }
            if !(e.speed_tokens_per_s > 0.0 && e.speed_tokens_per_s.is_finite()) {
                return Err(ProfileError::Invalid(format!("entry {i}: speed must be > 0")));
            }
            if !(e.payload_mb > 0.0 && e.payload_mb.is_finite()) {
                return Err(ProfileError::Invalid(format!("entry {i}: payload must be > 0")));
            }
        }
        for (i, w) in self.entries.windows(2).enumerate() {
            let (a, b) = (&w[0], &w[1]);
            let j = i + 1;
            if b.pixels <= a.pixels {
                return Err(ProfileError::Invalid(format!("entry {j}: pixels not strictly increasing")));
            }
            if b.accuracy < a.accuracy {
                return Err(ProfileError::Invalid(format!("entry {j}: accuracy decreases with pixels")));
            }
            if b.speed_tokens_per_s > a.speed_tokens_per_s {
                return Err(ProfileError::Invalid(format!("entry {j}: speed increases with pixels")));
            }
            if b.payload_mb <= a.payload_mb {
                return Err(ProfileError::Invalid(format!("entry {j}: payload not strictly increasing")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ProfileError> {
        let p: ResolutionProfile =
            toml::from_str(text).map_err(|e| ProfileError::File(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ProfileError::File(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile is always representable as TOML")
    }

    pub fn resolutions(&self) -> impl Iterator<Item = Resolution> + '_ {
        self.entries.iter().map(ProfileEntry::resolution)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, res: Resolution) -> Result<&ProfileEntry, ProfileError> {
        self.entries
            .iter()
            .find(|e| e.pixels == res.0)
            .ok_or(ProfileError::UnknownResolution(res))
    }

    pub fn index_of(&self, res: Resolution) -> Result<usize, ProfileError> {
        self.entries
            .iter()
            .position(|e| e.pixels == res.0)
            .ok_or(ProfileError::UnknownResolution(res))
    }

    pub fn accuracy(&self, res: Resolution) -> Result<f64, ProfileError> {
        Ok(self.entry(res)?.accuracy)
    }

    pub fn speed(&self, res: Resolution) -> Result<f64, ProfileError> {
        Ok(self.entry(res)?.speed_tokens_per_s)
    }

    pub fn payload_mb(&self, res: Resolution) -> Result<f64, ProfileError> {
        Ok(self.entry(res)?.payload_mb)
    }

    pub fn max_pixels(&self) -> u64 {
        self.entries.last().map_or(1, |e| e.pixels)
    }

    /// Decoding time T_proc = E[tokens] / v(r).
    pub fn proc_time_s(&self, res: Resolution, expected_tokens: f64) -> Result<f64, ProfileError> {
        Ok(expected_tokens / self.speed(res)?)
    }

    /// Uplink payload D = payload(r) · 8e6 · M (text part neglected).
    pub fn payload_bits(&self, res: Resolution, n_queries: u32) -> Result<f64, ProfileError> {
        Ok(self.payload_mb(res)? * BITS_PER_MB * f64::from(n_queries))
    }

    /// Smallest resolution whose accuracy meets `acc_min`.
    pub fn min_feasible_resolution(&self, acc_min: f64) -> Result<Resolution, ProfileError> {
        self.entries
            .iter()
            .find(|e| e.accuracy >= acc_min)
            .map(ProfileEntry::resolution)
            .ok_or_else(|| ProfileError::Infeasible {
                acc_min,
                best: self.entries.iter().map(|e| e.accuracy).fold(f64::NAN, f64::max),
            })
    }
}
