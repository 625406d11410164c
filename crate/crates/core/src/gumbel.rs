//! Gumbel-Softmax sampling for binary execute/skip decisions.
//!
//! Every decision is a two-way categorical `π = [1 − α, α]` where component
//! 1 means "execute". Three sampling modes are provided:
//!
//! * hard: `argmax_j (log π_j + G_j)`, an exact draw from `π`;
//! * relaxed: `softmax((log π + G) / τ)`, differentiable in the logits;
//! * straight-through: the hard one-hot in the forward pass with the
//!   relaxed sample's gradient in the backward pass.
//!
//! Each logit gets its own independent Gumbel draw.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Uniform draws are clamped to `[UNIFORM_EPS, 1 − UNIFORM_EPS]` before the double log.
pub const UNIFORM_EPS: f64 = 1e-12;

/// Bound on the log-odds `log α − log(1 − α)`. Each logit of a pair is
/// clamped to half of it, which keeps `α` strictly inside (0, 1) in `f64`.
pub const LOGIT_CLAMP: f64 = 30.0;

/// `−log(−log u)` with `u` clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// Source of Gumbel noise. Tests inject fixed or zero noise through this.
pub trait NoiseSource {
    fn gumbel(&mut self) -> f64;

    fn gumbel_tensor<S: Scalar>(&mut self, shape: Vec<usize>) -> TensorResult<Tensor<S>>
    where
        Self: Sized,
    {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::lit(self.gumbel())).collect();
        Tensor::new(shape, data)
    }
}

/// Seeded, platform-independent random stream.
#[derive(Debug, Clone)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Stream derived from a base seed and a path of tags, so that
    /// independent components (epochs, plans, phases) never share draws.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut s = splitmix(seed);
        for &t in tags {
            s = splitmix(s ^ splitmix(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        Self::new(s)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.0);
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl NoiseSource for SeededRng {
    fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform())
    }
}

/// Noise that is always zero: sampling becomes deterministic argmax / softmax.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn gumbel(&mut self) -> f64 {
        0.0
    }
}

/// Replays a fixed list of noise values cyclically.
#[derive(Debug, Clone)]
pub struct FixedNoise {
    values: Vec<f64>,
    pos: usize,
}

impl FixedNoise {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty());
        Self { values, pos: 0 }
    }
}

impl NoiseSource for FixedNoise {
    fn gumbel(&mut self) -> f64 {
        let v = self.values[self.pos % self.values.len()];
        self.pos += 1;
        v
    }
}

/// `n` independent Gumbel(0, 1) draws.
pub fn sample_gumbel<S: Scalar>(rng: &mut SeededRng, n: usize) -> TensorResult<Tensor<S>> {
    rng.gumbel_tensor(vec![n])
}

/// Two-way execute distribution held as a logit pair `[skip, execute]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliLogits<S> {
    pub logits: [S; 2],
}

impl<S: Scalar> BernoulliLogits<S> {
    pub fn new(skip: S, execute: S) -> Self {
        let c = S::lit(LOGIT_CLAMP / 2.0);
        Self {
            logits: [skip.max(-c).min(c), execute.max(-c).min(c)],
        }
    }

    /// Logits `[log(1 − α), log α]` for `α ∈ (0, 1)`.
    pub fn from_alpha(alpha: S) -> Self {
        Self::new((S::one() - alpha).ln(), alpha.ln())
    }

    /// `log π`, normalized.
    pub fn log_pi(&self) -> [S; 2] {
        let [a, b] = self.logits;
        let m = a.max(b);
        let lz = m + ((a - m).exp() + (b - m).exp()).ln();
        [a - lz, b - lz]
    }

    pub fn pi(&self) -> [S; 2] {
        let [a, b] = self.log_pi();
        [a.exp(), b.exp()]
    }

    pub fn alpha(&self) -> S {
        self.pi()[1]
    }
}

/// `argmax_j (log π_j + g_j)`, ties resolved toward execute.
pub fn hard_sample<S: Scalar>(pi: &BernoulliLogits<S>, g: [S; 2]) -> bool {
    let lp = pi.log_pi();
    hard_decision(lp[0] + g[0], lp[1] + g[1])
}

#[inline]
fn hard_decision<S: Scalar>(skip_score: S, execute_score: S) -> bool {
    execute_score >= skip_score
}

fn check_tau<S: Scalar>(op: &'static str, tau: S) -> TensorResult<()> {
    if tau > S::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument {
            op,
            msg: format!("temperature must be positive and finite, got {tau}"),
        })
    }
}

/// Value-level relaxed sample `softmax((log π + g) / τ)`.
pub fn relaxed_sample<S: Scalar>(pi: &BernoulliLogits<S>, g: [S; 2], tau: S) -> TensorResult<[S; 2]> {
    check_tau("relaxed_sample", tau)?;
    let lp = pi.log_pi();
    let a = (lp[0] + g[0]) / tau;
    let b = (lp[1] + g[1]) / tau;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let z = ea + eb;
    Ok([ea / z, eb / z])
}

fn check_pairs<S: Scalar>(op: &'static str, logits: &Var<'_, S>, noise: &Tensor<S>) -> TensorResult<usize> {
    let shape = logits.shape();
    if shape.last() != Some(&2) {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("last axis must have extent 2, got shape {shape:?}"),
        });
    }
    if noise.shape() != shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: shape,
            rhs: noise.shape().to_vec(),
        });
    }
    Ok(shape.len() - 1)
}

/// Relaxed samples for a batch of logit pairs laid out along the last axis.
pub fn relaxed_sample_var<'g, S: Scalar>(
    logits: Var<'g, S>,
    noise: &Tensor<S>,
    tau: S,
) -> TensorResult<Var<'g, S>> {
    check_tau("relaxed_sample", tau)?;
    let axis = check_pairs("relaxed_sample", &logits, noise)?;
    let g = logits.graph().constant(noise.clone());
    logits
        .log_softmax(axis)?
        .add(g)?
        .scale(S::one() / tau)
        .softmax(axis)
}

/// One-hot hard decisions for a batch of logit pairs; returns the execute bits.
pub fn hard_sample_values<S: Scalar>(logits: &Tensor<S>, noise: &Tensor<S>) -> Vec<bool> {
    logits
        .data()
        .chunks(2)
        .zip(noise.data().chunks(2))
        .map(|(l, g)| hard_decision(l[0] + g[0], l[1] + g[1]))
        .collect()
}

/// Straight-through sample: exactly one-hot forward, relaxed gradient backward.
/// Also returns the execute bits.
pub fn straight_through_sample<'g, S: Scalar>(
    logits: Var<'g, S>,
    noise: &Tensor<S>,
    tau: S,
) -> TensorResult<(Var<'g, S>, Vec<bool>)> {
    let soft = relaxed_sample_var(logits, noise, tau)?;
    let bits = hard_sample_values(&logits.value(), noise);
    let hard_data = bits
        .iter()
        .flat_map(|&b| if b { [S::zero(), S::one()] } else { [S::one(), S::zero()] })
        .collect();
    let hard = Tensor::new(soft.shape(), hard_data)?;
    Ok((soft.straight_through(hard)?, bits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayTrigger {
    EveryEpoch,
    OnMetricMet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub decay_rate: f64,
    pub trigger: DecayTrigger,
    pub floor: f64,
    #[serde(default)]
    current: Option<f64>,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self::new(5.0, 0.965, DecayTrigger::OnMetricMet, 0.5)
    }
}

impl TemperatureSchedule {
    pub fn new(initial: f64, decay_rate: f64, trigger: DecayTrigger, floor: f64) -> Self {
        Self {
            initial,
            decay_rate,
            trigger,
            floor,
            current: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(format!("temperature.initial must be positive, got {}", self.initial));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(format!("temperature.decay_rate must be in (0, 1], got {}", self.decay_rate));
        }
        if !(self.floor > 0.0) {
            return Err(format!("temperature.floor must be positive, got {}", self.floor));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.current.unwrap_or(self.initial).max(self.floor)
    }

    /// Decays `τ` (never below the floor) when the configured trigger fired.
    pub fn step(&mut self, trigger_fired: bool) -> f64 {
        if trigger_fired {
            self.current = Some((self.tau() * self.decay_rate).max(self.floor));
        }
        self.tau()
    }

    pub fn reset(&mut self) {
        self.current = None;
    }
}
