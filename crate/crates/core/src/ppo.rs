//! GAE-PPO from scratch: small tanh MLPs with flat parameter vectors and
//! hand-written backprop, a tanh-squashed Gaussian policy, the clipped
//! surrogate update, and the two non-learned baselines.

use std::f64::consts::{LN_2, PI};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arpo::ArpoSolution;
use crate::env::{normalized_observation, obs_dim, Action, Env, EnvError, Policy};
use crate::rewards::RewardFn;
use crate::scenario::{PhysConfig, RngStream, Scenario, StreamId};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("length mismatch between {0}")]
    Length(&'static str),
    #[error("non-finite {what} during update {update}: {detail}")]
    NonFinite {
        what: &'static str,
        update: usize,
        detail: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

// ---------------------------------------------------------------------------
// Networks

/// Fully connected net, tanh on hidden layers, linear output. Parameters are
/// stored layer by layer as row-major weights (out x in) followed by biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations from a forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; Self::param_count(sizes)],
        }
    }

    /// Uniform(±1/√fan_in) weights, zero biases; the last layer is scaled by
    /// `out_scale`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let layers = sizes.len() - 1;
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let s = if l + 1 == layers { out_scale } else { 1.0 };
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = s * rng.random_range(-bound..bound);
            }
            off += (fan_in + 1) * fan_out;
        }
        net
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), PpoError> {
        if x.len() != self.input_dim() {
            return Err(PpoError::Dim {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, PpoError> {
        Ok(self.forward_cached(x)?.acts.pop().unwrap_or_default())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<MlpCache, PpoError> {
        self.check_input(x)?;
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + (n_in + 1) * n_out];
            let input = &acts[l];
            let mut out = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out.push(if l + 1 < layers { z.tanh() } else { z });
            }
            acts.push(out);
            off += (n_in + 1) * n_out;
        }
        Ok(MlpCache { acts })
    }

    /// Accumulate dL/dθ into `grad` given dL/d(output); returns dL/d(input).
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grad: &mut [f64]) -> Result<Vec<f64>, PpoError> {
        if grad_out.len() != self.output_dim() {
            return Err(PpoError::Dim {
                expected: self.output_dim(),
                got: grad_out.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(PpoError::Dim {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += (w[0] + 1) * w[1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &cache.acts[l];
            let mut d_in = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                let row = off + o * n_in;
                for i in 0..n_in {
                    grad[row + i] += d * input[i];
                    d_in[i] += self.params[row + i] * d;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                for (d, a) in d_in.iter_mut().zip(input) {
                    *d *= 1.0 - a * a;
                }
            }
            delta = d_in;
        }
        Ok(delta)
    }
}

/// Gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, n: usize) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

/// Scale `grad` down to at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

// ---------------------------------------------------------------------------
// Policy

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// log(1 - tanh(u)²) without cancellation.
fn log_one_minus_tanh2(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// Diagonal Gaussian over the pre-squash action u; the movement is
/// scale·tanh(u).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: [f64; 3],
    /// Per-axis action bound: αV_xy, αV_xy, αV_z.
    pub scale: [f64; 3],
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], scale: [f64; 3], init_log_std: f64, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(3);
        GaussianPolicy {
            mean: Mlp::init(&sizes, 0.01, rng),
            log_std: [init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); 3],
            scale,
        }
    }

    pub fn scale_for(phys: &PhysConfig) -> [f64; 3] {
        [phys.max_xy_step(), phys.max_xy_step(), phys.max_z_step()]
    }

    pub fn obs_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn clamp_log_std(&mut self) {
        for s in &mut self.log_std {
            *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn mu(&self, obs: &[f64]) -> Result<[f64; 3], PpoError> {
        let m = self.mean.forward(obs)?;
        Ok([m[0], m[1], m[2]])
    }

    /// log π(a) for a = scale·tanh(u), including the squash Jacobian.
    pub fn log_prob_given_mu(&self, mu: &[f64; 3], u: &[f64; 3]) -> f64 {
        (0..3)
            .map(|i| {
                let s = self.log_std[i];
                let z = (u[i] - mu[i]) / s.exp();
                -0.5 * z * z - s - HALF_LN_2PI - self.scale[i].ln() - log_one_minus_tanh2(u[i])
            })
            .sum()
    }

    pub fn log_prob(&self, obs: &[f64], u: &[f64; 3]) -> Result<f64, PpoError> {
        Ok(self.log_prob_given_mu(&self.mu(obs)?, u))
    }

    pub fn action_from_u(&self, u: &[f64; 3]) -> Action {
        Action::new(
            self.scale[0] * u[0].tanh(),
            self.scale[1] * u[1].tanh(),
            self.scale[2] * u[2].tanh(),
        )
    }

    /// Draw u, returning (u, action, log π).
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<([f64; 3], Action, f64), PpoError> {
        let mu = self.mu(obs)?;
        let mut u = [0.0; 3];
        for i in 0..3 {
            let e: f64 = rng.sample(StandardNormal);
            u[i] = mu[i] + self.log_std[i].exp() * e;
        }
        Ok((u, self.action_from_u(&u), self.log_prob_given_mu(&mu, &u)))
    }

    /// scale·tanh(μ).
    pub fn mode(&self, obs: &[f64]) -> Result<Action, PpoError> {
        Ok(self.action_from_u(&self.mu(obs)?))
    }

    /// Entropy of the pre-squash Gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + 0.5 + HALF_LN_2PI).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PpoError> {
        std::fs::write(path.as_ref(), self.to_checkpoint())
            .map_err(|e| PpoError::Checkpoint(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PpoError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PpoError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_checkpoint(&text)
    }

    pub fn to_checkpoint(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut s = String::from("laenet-policy v1\n");
        s.push_str(&format!(
            "sizes {}\n",
            self.mean.sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
        ));
        s.push_str(&format!("log_std {}\n", join(&self.log_std)));
        s.push_str(&format!("scale {}\n", join(&self.scale)));
        s.push_str(&format!("params {}\n", self.mean.params.len()));
        for p in &self.mean.params {
            s.push_str(&format!("{p:?}\n"));
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, PpoError> {
        let bad = |m: &str| PpoError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("laenet-policy v1") {
            return Err(bad("missing `laenet-policy v1` header"));
        }
        let mut field = |name: &str| -> Result<Vec<String>, PpoError> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{name}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(&format!("expected `{name}` line, found `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
        let sizes = field("sizes")?
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| bad(&format!("bad size `{s}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        if sizes.len() < 2 || sizes[sizes.len() - 1] != 3 || sizes.contains(&0) {
            return Err(bad("layer sizes must end in 3 outputs and be positive"));
        }
        let triple = |v: Vec<String>, what: &str| -> Result<[f64; 3], PpoError> {
            let xs = v.iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
            xs.try_into().map_err(|_| bad(&format!("`{what}` needs 3 values")))
        };
        let log_std = triple(field("log_std")?, "log_std")?;
        let scale = triple(field("scale")?, "scale")?;
        let count: usize = field("params")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad parameter count"))?;
        if count != Mlp::param_count(&sizes) {
            return Err(bad("parameter count does not match layer sizes"));
        }
        let params = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| num(l.trim()))
            .collect::<Result<Vec<_>, _>>()?;
        if params.len() != count {
            return Err(bad(&format!("expected {count} parameters, found {}", params.len())));
        }
        if params.iter().chain(&log_std).chain(&scale).any(|x| !x.is_finite()) {
            return Err(bad("non-finite value"));
        }
        Ok(GaussianPolicy {
            mean: Mlp { sizes, params },
            log_std,
            scale,
        })
    }
}

// ---------------------------------------------------------------------------
// GAE and the update

/// δ_t = r_t + γV_{t+1}(1-done_t) - V_t, A_t = δ_t + γλ(1-done_t)A_{t+1};
/// the value past the end of the sequence is 0.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(PpoError::Length("rewards, values and dones"));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Zero mean, unit (population) variance; a constant vector is only centred.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    adv.iter_mut().for_each(|a| *a -= mean);
    let std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if std > 1e-12 {
        adv.iter_mut().for_each(|a| *a /= std);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs: Vec<Vec<f64>>,
    pub u: Vec<[f64; 3]>,
    pub log_prob: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, obs: Vec<f64>, u: [f64; 3], log_prob: f64, reward: f64, value: f64, done: bool) {
        self.obs.push(obs);
        self.u.push(u);
        self.log_prob.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.dones.push(done);
    }

    pub fn clear(&mut self) {
        *self = RolloutBuffer::default();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Discount ρ.
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub momentum: f64,
    pub max_grad_norm: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub steps_per_update: usize,
    pub total_episodes: usize,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            lr_actor: 3e-4,
            lr_critic: 1e-3,
            momentum: 0.9,
            max_grad_norm: 0.5,
            entropy_coef: 0.0,
            epochs: 10,
            minibatch: 256,
            steps_per_update: 2048,
            total_episodes: 300,
            hidden: vec![64, 64],
            init_log_std: -0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a few hundred short episodes on one core.
    pub fn desk() -> Self {
        TrainConfig {
            lr_actor: 5e-3,
            lr_critic: 5e-3,
            epochs: 10,
            minibatch: 32,
            steps_per_update: 64,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.clip_eps) {
            return bad("clip_eps must lie in [0, 1)");
        }
        if !(self.lr_actor >= 0.0 && self.lr_critic >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.steps_per_update == 0 {
            return bad("epochs, minibatch and steps_per_update must be >= 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub entropy: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
}

/// Actor, critic and their optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub cfg: TrainConfig,
    actor_opt: Sgd,
    critic_opt: Sgd,
    shuffle: RngStream,
    updates: usize,
}

impl Trainer {
    pub fn new(obs_dim: usize, scale: [f64; 3], cfg: TrainConfig) -> Result<Self, PpoError> {
        cfg.validate()?;
        let mut init = RngStream::new(cfg.seed, StreamId::Init);
        let policy = GaussianPolicy::new(obs_dim, &cfg.hidden, scale, cfg.init_log_std, &mut init);
        let mut vsizes = vec![obs_dim];
        vsizes.extend_from_slice(&cfg.hidden);
        vsizes.push(1);
        let value = Mlp::init(&vsizes, 1.0, &mut init);
        Ok(Trainer {
            actor_opt: Sgd::new(cfg.lr_actor, cfg.momentum, policy.mean.num_params() + 3),
            critic_opt: Sgd::new(cfg.lr_critic, cfg.momentum, value.num_params()),
            shuffle: RngStream::new(cfg.seed, StreamId::Shuffle),
            policy,
            value,
            cfg,
            updates: 0,
        })
    }

    pub fn value_of(&self, obs: &[f64]) -> Result<f64, PpoError> {
        Ok(self.value.forward(obs)?[0])
    }

    /// Clipped-surrogate actor step and MSE critic step over `epochs` passes
    /// of shuffled minibatches.
    pub fn update(&mut self, buf: &RolloutBuffer) -> Result<UpdateMetrics, PpoError> {
        let n = buf.len();
        if n == 0 {
            return Ok(UpdateMetrics::default());
        }
        if buf.obs.len() != n || buf.u.len() != n || buf.log_prob.len() != n || buf.values.len() != n {
            return Err(PpoError::Length("rollout buffer columns"));
        }
        let cfg = self.cfg.clone();
        let (mut adv, returns) = gae(&buf.rewards, &buf.values, &buf.dones, cfg.gamma, cfg.lambda)?;
        normalize_advantages(&mut adv);
        let adv_mean = adv.iter().sum::<f64>() / n as f64;
        let adv_std = (adv.iter().map(|a| (a - adv_mean).powi(2)).sum::<f64>() / n as f64).sqrt();

        let n_actor = self.policy.mean.num_params();
        let mut m = UpdateMetrics {
            adv_mean,
            adv_std,
            ..UpdateMetrics::default()
        };
        let mut batches = 0usize;
        let mut idx: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            shuffle(&mut idx, &mut self.shuffle);
            for chunk in idx.chunks(cfg.minibatch) {
                let b = chunk.len() as f64;
                let mut g_actor = vec![0.0; n_actor + 3];
                let mut g_critic = vec![0.0; self.value.num_params()];
                let (mut a_loss, mut c_loss, mut kl, mut clipped) = (0.0, 0.0, 0.0, 0.0);
                let std: [f64; 3] = std::array::from_fn(|i| self.policy.log_std[i].exp());
                for &j in chunk {
                    let cache = self.policy.mean.forward_cached(&buf.obs[j])?;
                    let o = cache.output();
                    let mu = [o[0], o[1], o[2]];
                    let logp = self.policy.log_prob_given_mu(&mu, &buf.u[j]);
                    let ratio = (logp - buf.log_prob[j]).exp();
                    let a = adv[j];
                    let clipped_ratio = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                    a_loss -= (ratio * a).min(clipped_ratio * a) / b;
                    kl += (buf.log_prob[j] - logp) / b;
                    let active = (a > 0.0 && ratio < 1.0 + cfg.clip_eps) || (a < 0.0 && ratio > 1.0 - cfg.clip_eps);
                    if (ratio - 1.0).abs() > cfg.clip_eps {
                        clipped += 1.0 / b;
                    }
                    if active {
                        let coef = -a * ratio / b;
                        let mut g_mu = [0.0; 3];
                        for i in 0..3 {
                            let z = (buf.u[j][i] - mu[i]) / std[i];
                            g_mu[i] = coef * z / std[i];
                            g_actor[n_actor + i] += coef * (z * z - 1.0);
                        }
                        self.policy.mean.backward(&cache, &g_mu, &mut g_actor[..n_actor])?;
                    }
                    let vc = self.value.forward_cached(&buf.obs[j])?;
                    let err = vc.output()[0] - returns[j];
                    c_loss += err * err / b;
                    self.value.backward(&vc, &[2.0 * err / b], &mut g_critic)?;
                }
                for i in 0..3 {
                    g_actor[n_actor + i] -= cfg.entropy_coef;
                }
                for (what, v) in [("actor loss", a_loss), ("critic loss", c_loss)] {
                    if !v.is_finite() {
                        return Err(PpoError::NonFinite {
                            what,
                            update: self.updates,
                            detail: format!("minibatch of {} samples", chunk.len()),
                        });
                    }
                }
                clip_grad_norm(&mut g_actor, cfg.max_grad_norm);
                clip_grad_norm(&mut g_critic, cfg.max_grad_norm);
                let mut actor_params = self.policy.mean.params.clone();
                actor_params.extend_from_slice(&self.policy.log_std);
                self.actor_opt.step(&mut actor_params, &g_actor);
                self.policy.log_std.copy_from_slice(&actor_params[n_actor..]);
                actor_params.truncate(n_actor);
                self.policy.mean.params = actor_params;
                self.policy.clamp_log_std();
                self.critic_opt.step(&mut self.value.params, &g_critic);

                m.actor_loss += a_loss;
                m.critic_loss += c_loss;
                m.approx_kl += kl;
                m.clip_frac += clipped;
                batches += 1;
            }
        }
        let k = batches.max(1) as f64;
        m.actor_loss /= k;
        m.critic_loss /= k;
        m.approx_kl /= k;
        m.clip_frac /= k;
        m.entropy = self.policy.entropy();
        if self.policy.mean.params.iter().chain(&self.value.params).any(|p| !p.is_finite()) {
            return Err(PpoError::NonFinite {
                what: "parameters",
                update: self.updates,
                detail: "after optimizer step".into(),
            });
        }
        self.updates += 1;
        Ok(m)
    }
}

fn shuffle(idx: &mut [usize], rng: &mut RngStream) {
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

/// Per-episode max latency of the training episodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub max_latency_s: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub curve: LearningCurve,
    pub updates: Vec<UpdateMetrics>,
}

/// Episodic PPO on a fixed allocation: collect whole episodes until at least
/// `steps_per_update` transitions are buffered, then update.
pub fn train(
    scenario: &Scenario,
    solution: &ArpoSolution,
    reward: Arc<dyn RewardFn>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, PpoError> {
    let mut trainer = Trainer::new(
        obs_dim(scenario.num_users()),
        GaussianPolicy::scale_for(&scenario.phys),
        cfg.clone(),
    )?;
    let mut env = Env::reset(scenario, solution, episode_seed(cfg.seed, 0))?.with_reward(reward);
    let mut act_rng = RngStream::new(cfg.seed, StreamId::Policy);
    let mut buf = RolloutBuffer::default();
    let mut curve = LearningCurve::default();
    let mut updates = Vec::new();
    for ep in 0..cfg.total_episodes {
        env.restart(episode_seed(cfg.seed, ep as u64))?;
        let mut ret = 0.0;
        while !env.is_done() {
            let obs = normalized_observation(&env);
            let value = trainer.value_of(&obs)?;
            let (u, action, logp) = trainer.policy.sample(&obs, &mut act_rng)?;
            let out = env.step(action)?;
            ret += out.reward;
            buf.push(obs, u, logp, out.reward, value, out.done);
        }
        curve.max_latency_s.push(env.log().max_latency().unwrap_or(f64::INFINITY));
        curve.returns.push(ret);
        if buf.len() >= cfg.steps_per_update {
            updates.push(trainer.update(&buf)?);
            buf.clear();
        }
    }
    Ok(TrainOutcome {
        policy: trainer.policy,
        value: trainer.value,
        curve,
        updates,
    })
}

fn episode_seed(seed: u64, episode: u64) -> u64 {
    RngStream::substream(seed, StreamId::Fading, episode).seed()
}

/// Episode-wise mean and (population) variance across several curves.
pub fn aggregate_curves(curves: &[LearningCurve]) -> Vec<(f64, f64)> {
    let len = curves.iter().map(|c| c.max_latency_s.len()).min().unwrap_or(0);
    (0..len)
        .map(|e| {
            let xs: Vec<f64> = curves.iter().map(|c| c.max_latency_s[e]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
            (m, v)
        })
        .collect()
}

/// Max latency of `episodes` evaluation episodes with independent fading
/// seeds.
pub fn evaluate_policy(
    scenario: &Scenario,
    solution: &ArpoSolution,
    policy: &mut dyn Policy,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>, PpoError> {
    let mut env = Env::reset(scenario, solution, seed)?;
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        env.restart(RngStream::substream(seed, StreamId::Baseline, ep as u64).seed())?;
        while !env.is_done() {
            let a = policy.act(&env)?;
            env.step(a)?;
        }
        out.push(env.log().max_latency().unwrap_or(f64::INFINITY));
    }
    Ok(out)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// Policies usable in the environment

/// A trained policy acting in the environment.
#[derive(Debug, Clone)]
pub struct PpoActor {
    pub policy: GaussianPolicy,
    /// `None` acts with the mean action, `Some` samples.
    pub rng: Option<RngStream>,
}

impl PpoActor {
    pub fn deterministic(policy: GaussianPolicy) -> Self {
        PpoActor { policy, rng: None }
    }
}

impl Policy for PpoActor {
    fn act(&mut self, env: &Env) -> Result<Action, EnvError> {
        let obs = normalized_observation(env);
        let r = match &mut self.rng {
            None => self.policy.mode(&obs),
            Some(rng) => self.policy.sample(&obs, rng).map(|(_, a, _)| a),
        };
        r.map_err(|e| EnvError::Policy(e.to_string()))
    }
}

/// Uniform movement within the speed limits.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: RngStream,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: RngStream::new(seed, StreamId::Baseline),
        }
    }

    pub fn sample(&mut self, phys: &PhysConfig) -> Action {
        let r = phys.max_xy_step() * self.rng.random::<f64>().sqrt();
        let th = self.rng.random_range(0.0..2.0 * PI);
        let dz = phys.max_z_step() * self.rng.random_range(-1.0..=1.0);
        Action::new(r * th.cos(), r * th.sin(), dz)
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, env: &Env) -> Result<Action, EnvError> {
        Ok(self.sample(&env.scenario().phys))
    }
}

/// Fly at full speed to the users' centroid and settle at a service altitude.
#[derive(Debug, Clone, Default)]
pub struct GeometricHeuristic {
    /// Defaults to the lowest allowed altitude.
    pub service_alt_m: Option<f64>,
}

pub fn geometric_heuristic(pose: [f64; 3], target: [f64; 3], phys: &PhysConfig) -> Action {
    let (dx, dy, dz) = (target[0] - pose[0], target[1] - pose[1], target[2] - pose[2]);
    if (dx * dx + dy * dy + dz * dz).sqrt() <= 1.0 {
        return Action::zero();
    }
    let d = dx.hypot(dy);
    let step = phys.max_xy_step();
    let (sx, sy) = if d > step { (dx * step / d, dy * step / d) } else { (dx, dy) };
    let vz = phys.max_z_step();
    Action::new(sx, sy, dz.clamp(-vz, vz))
}

impl Policy for GeometricHeuristic {
    fn act(&mut self, env: &Env) -> Result<Action, EnvError> {
        let sc = env.scenario();
        let n = sc.users.len() as f64;
        let cx = sc.users.iter().map(|u| u.pos_m[0]).sum::<f64>() / n;
        let cy = sc.users.iter().map(|u| u.pos_m[1]).sum::<f64>() / n;
        let z = self.service_alt_m.unwrap_or(sc.phys.h_min_m);
        Ok(geometric_heuristic(env.pose(), [cx, cy, z], &sc.phys))
    }
}
