//! Noise mechanisms and closed-form privacy calculators.
//!
//! Three mechanisms can be attached to training: Laplace noise on the
//! smashed data, Gaussian noise on clipped score updates, and Gaussian noise
//! on the probabilities the uplink mask is sampled from. The calculators
//! give the amplified budgets and noise thresholds, and the expected
//! reconstruction error lower bound of an attacker who guesses the mask.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_singular, sigma_max, sigma_min};
use crate::mask::{apply_score_update, ProbMask, ScoreMask};
use crate::net::WeightMatrix;

pub const DEFAULT_DELTA: f64 = 1e-5;

pub const DEFAULT_ALPHA_GRID: [f64; 8] = [1.1, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0, 50.0];

/// Largest number of mask bits [`reconstruction_bound`] will enumerate.
pub const ENUMERATION_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    #[default]
    None,
    LaplaceForward,
    GaussianUpdate,
    GaussianMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrivacySpec {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub delta: f64,
    /// Per-sample gradient clip bound.
    pub clip: f64,
    /// Keep probabilities are confined to `[c, 1 - c]`.
    pub c: f64,
    /// Noise standard deviation; `None` derives it from the budget.
    pub sigma: Option<f64>,
    /// Declared input domain `|x|_inf <= input_bound` for the forward sensitivity.
    pub input_bound: f64,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::None,
            epsilon: 0.1,
            delta: DEFAULT_DELTA,
            clip: 1.0,
            c: 0.25,
            sigma: None,
            input_bound: 1.0,
        }
    }
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if self.mechanism == Mechanism::None {
            return Ok(());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!("delta {} outside [0, 1)", self.delta)));
        }
        if !(self.c > 0.0 && self.c < 0.5) {
            return Err(Error::InvalidConfig(format!("c {} outside (0, 0.5)", self.c)));
        }
        if !(self.clip > 0.0) || !(self.input_bound > 0.0) {
            return Err(Error::InvalidConfig("clip and input bound must be positive".into()));
        }
        if self.sigma.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::InvalidConfig("sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

pub fn laplace_noise<R: Rng + ?Sized>(scale: f64, len: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("Laplace scale {scale} must be positive")));
    }
    Ok((0..len)
        .map(|_| {
            // inverse CDF; u in (-1/2, 1/2)
            let u = loop {
                let r: f64 = rng.random();
                if r > 0.0 {
                    break r - 0.5;
                }
            };
            -scale * u.signum() * (-2.0 * u.abs()).ln_1p()
        })
        .collect())
}

pub fn gaussian_noise<R: Rng + ?Sized>(sigma: f64, len: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("Gaussian sigma {sigma} must be positive")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok((0..len).map(|_| normal.sample(rng)).collect())
}

/// `g / max(1, |g| / bound)`.
pub fn clip_update(g: &[f64], bound: f64) -> Vec<f64> {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let factor = (norm / bound).max(1.0);
    if factor == 1.0 {
        return g.to_vec();
    }
    g.iter().map(|v| v / factor).collect()
}

/// [`clip_update`] applied to the concatenation of per-layer gradients.
pub fn clip_layers(grads: &mut [Vec<f64>], bound: f64) {
    let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let factor = (norm / bound).max(1.0);
    if factor > 1.0 {
        grads.iter_mut().flatten().for_each(|v| *v /= factor);
    }
}

/// `s <- s - lr * mean(clipped grads) + z`, `z ~ N(0, sigma^2 I)`.
/// `clipped_sums` holds per-layer sums of per-sample clipped gradients.
pub fn noisy_score_update<R: Rng + ?Sized>(
    scores: &ScoreMask,
    clipped_sums: &[Vec<f64>],
    batch_size: usize,
    lr: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<ScoreMask> {
    let mut next = apply_score_update(scores, clipped_sums, batch_size, lr)?;
    if sigma > 0.0 {
        for layer in &mut next.layers {
            let z = gaussian_noise(sigma, layer.len(), rng)?;
            layer.iter_mut().zip(z).for_each(|(s, z)| *s += z);
        }
    } else if sigma < 0.0 {
        return Err(Error::InvalidConfig(format!("sigma {sigma} must be nonnegative")));
    }
    Ok(next)
}

/// `clip(theta + z, c, 1 - c)`.
pub fn noisy_mask_probs<R: Rng + ?Sized>(theta: &ProbMask, sigma: f64, c: f64, rng: &mut R) -> Result<ProbMask> {
    check_c(c)?;
    let layers = theta
        .layers()
        .iter()
        .map(|layer| {
            let z = if sigma > 0.0 {
                gaussian_noise(sigma, layer.len(), rng)?
            } else {
                vec![0.0; layer.len()]
            };
            Ok(layer.iter().zip(z).map(|(t, z)| (t + z).clamp(c, 1.0 - c)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ProbMask::new(layers)
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0 && c < 0.5) {
        return Err(Error::Domain(format!("c = {c} outside (0, 0.5)")));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta = {delta} outside (0, 1)")));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon = {epsilon} must be positive")));
    }
    Ok(())
}

/// Budget of the Laplace forward mechanism after Bernoulli masking of `d`
/// parameters: `ln((1 - c^d) e^eps + c^d)`.
pub fn epsilon_amp_forward(epsilon: f64, c: f64, d: u32) -> Result<f64> {
    check_c(c)?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon = {epsilon} must be nonnegative")));
    }
    let cd = (d as f64 * c.ln()).exp();
    // eps + ln((1 - c^d) + c^d e^-eps), rearranged to avoid cancellation
    Ok(epsilon + (-cd * -(-epsilon).exp_m1()).ln_1p())
}

/// Update-noise variance threshold `2 R Gamma^2 ln(1/delta) / (eps^2 |Q|^2)`.
pub fn sigma_for_update_noise(iterations: u32, clip: f64, epsilon: f64, delta: f64, batch: usize) -> Result<f64> {
    check_delta(delta)?;
    check_epsilon(epsilon)?;
    if iterations == 0 || batch == 0 || !(clip > 0.0) {
        return Err(Error::Domain("iterations, clip and batch must be positive".into()));
    }
    let b = batch as f64;
    Ok(2.0 * iterations as f64 * clip * clip * -delta.ln() / (epsilon * epsilon * b * b))
}

/// Mask-noise variance threshold `2 (1 - 2c)^2 ln(1.25/delta) / eps^2`.
pub fn sigma_for_mask_noise(c: f64, epsilon: f64, delta: f64) -> Result<f64> {
    check_c(c)?;
    check_delta(delta)?;
    check_epsilon(epsilon)?;
    let span = 1.0 - 2.0 * c;
    Ok(2.0 * span * span * (1.25 / delta).ln() / (epsilon * epsilon))
}

/// Which Rényi summand pair the Bernoulli amplification uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmplificationForm {
    /// `c^a (1-c)^(1-a) + (1-c)^a c^(1-a)`
    #[default]
    Symmetric,
    /// `2 (1-c)^a c^(1-a)`, the duplicated-summand form as printed.
    Printed,
}

fn ln_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Bernoulli amplification term for one `alpha`.
pub fn bernoulli_renyi_term(c: f64, d_b: usize, alpha: f64, form: AmplificationForm) -> Result<f64> {
    if !(c > 0.0 && c <= 0.5) {
        return Err(Error::Domain(format!("c = {c} outside (0, 0.5]")));
    }
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha = {alpha} must exceed 1")));
    }
    let (lc, l1c) = (c.ln(), (-c).ln_1p());
    let upper = alpha * l1c + (1.0 - alpha) * lc;
    let log_sum = match form {
        AmplificationForm::Symmetric => ln_add_exp(alpha * lc + (1.0 - alpha) * l1c, upper),
        AmplificationForm::Printed => std::f64::consts::LN_2 + upper,
    };
    Ok((d_b as f64 / (alpha - 1.0) * log_sum).max(0.0))
}

/// `min(eps, min_alpha term(alpha))`.
pub fn bernoulli_amplified_epsilon(
    epsilon: f64,
    c: f64,
    d_b: usize,
    alphas: &[f64],
    form: AmplificationForm,
) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::InvalidConfig("alpha grid is empty".into()));
    }
    alphas.iter().try_fold(epsilon, |best, &a| {
        Ok(best.min(bernoulli_renyi_term(c, d_b, a, form)?))
    })
}

/// L1 sensitivity of a bias-free dense stack with 1-Lipschitz activations
/// over inputs with `|x|_inf <= input_bound`.
pub fn forward_sensitivity(layers: &[WeightMatrix], input_bound: f64) -> f64 {
    let Some((first, rest)) = layers.split_first() else {
        return 2.0 * input_bound;
    };
    let entry_sum: f64 = first.values().iter().map(|v| v.abs()).sum();
    let col_norms: f64 = rest
        .iter()
        .map(|w| {
            (0..w.cols())
                .map(|c| (0..w.rows()).map(|r| w.get(r, c).abs()).sum::<f64>())
                .fold(0.0, f64::max)
        })
        .product();
    2.0 * input_bound * entry_sum * col_norms
}

/// Lower bound on the expected attack error for a fixed true mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: f64,
    /// Number of guesses enumerated, including the true mask.
    pub enumerated: usize,
    /// Guesses skipped because the masked weights were singular.
    pub singular_guesses: usize,
}

struct Enumeration {
    bits: usize,
    n: usize,
    weights: Vec<f64>,
    theta: Vec<f64>,
}

impl Enumeration {
    fn new(w: &WeightMatrix, theta: &ProbMask, bits_per_mask: usize) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(Error::InvalidInput(format!("{}x{} weights are not square", w.rows(), w.cols())));
        }
        if is_singular(w) {
            return Err(Error::InvalidInput("weights are singular".into()));
        }
        let bits = w.len();
        if bits_per_mask * bits > ENUMERATION_LIMIT {
            return Err(Error::Budget {
                bits: bits_per_mask * bits,
                limit: ENUMERATION_LIMIT,
            });
        }
        if theta.shape() != [bits] {
            return Err(Error::InvalidShape(format!(
                "mask probabilities {:?} for {bits} weights",
                theta.shape()
            )));
        }
        Ok(Self {
            bits,
            n: w.rows(),
            weights: w.values().to_vec(),
            theta: theta.layer(0).to_vec(),
        })
    }

    fn prob(&self, m: u32) -> f64 {
        (0..self.bits)
            .map(|i| if m >> i & 1 == 1 { self.theta[i] } else { 1.0 - self.theta[i] })
            .product()
    }

    fn gated(&self, f: impl Fn(usize) -> f64) -> WeightMatrix {
        let v = (0..self.bits).map(|i| self.weights[i] * f(i)).collect();
        WeightMatrix::new(self.n, self.n, v).expect("finite")
    }

    fn guess(&self, m_hat: u32) -> Option<(f64, f64)> {
        let p = self.prob(m_hat);
        let a = self.gated(|i| (m_hat >> i & 1) as f64);
        (!is_singular(&a)).then(|| (p, sigma_max(&a)))
    }

    fn diff_sigma_min(&self, m_hat: u32, m: u32) -> f64 {
        sigma_min(&self.gated(|i| (m_hat >> i & 1) as f64 - (m >> i & 1) as f64))
    }
}

fn mask_bits(mask: &crate::mask::BinaryMask, bits: usize) -> Result<u32> {
    if mask.shape() != [bits] {
        return Err(Error::InvalidShape(format!("mask {:?} for {bits} weights", mask.shape())));
    }
    Ok(mask.flat().enumerate().fold(0u32, |acc, (i, b)| acc | (b as u32) << i))
}

/// `sum_{M^ != M} P(M^) * sigma_min(W.(M^ - M)) / sigma_max(W.M^) * |x|` over
/// all guesses of a square single-layer mask. Guesses leaving `W.M^`
/// singular contribute nothing.
pub fn reconstruction_bound(
    w: &WeightMatrix,
    mask: &crate::mask::BinaryMask,
    theta: &ProbMask,
    x: &[f64],
) -> Result<BoundReport> {
    let e = Enumeration::new(w, theta, 1)?;
    let m = mask_bits(mask, e.bits)?;
    let norm = input_norm(x, e.n)?;
    let mut report = BoundReport {
        bound: 0.0,
        enumerated: 1 << e.bits,
        singular_guesses: 0,
    };
    for m_hat in 0..(1u32 << e.bits) {
        if m_hat == m {
            continue;
        }
        match e.guess(m_hat) {
            None => report.singular_guesses += 1,
            Some((p, smax)) if p > 0.0 => report.bound += p * e.diff_sigma_min(m_hat, m) / smax * norm,
            Some(_) => {}
        }
    }
    Ok(report)
}

/// [`reconstruction_bound`] averaged over the true mask `M ~ Bern(theta)`;
/// the quantity a Monte Carlo attack that samples both masks estimates.
pub fn expected_reconstruction_bound(w: &WeightMatrix, theta: &ProbMask, x: &[f64]) -> Result<f64> {
    let e = Enumeration::new(w, theta, 2)?;
    let norm = input_norm(x, e.n)?;
    let count = 1u32 << e.bits;
    let guesses: Vec<Option<(f64, f64)>> = (0..count).map(|g| e.guess(g)).collect();
    let mut total = 0.0;
    for m in 0..count {
        let pm = e.prob(m);
        if pm == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for (m_hat, g) in guesses.iter().enumerate() {
            let m_hat = m_hat as u32;
            if let Some((p, smax)) = *g {
                if m_hat != m && p > 0.0 {
                    inner += p * e.diff_sigma_min(m_hat, m) / smax;
                }
            }
        }
        total += pm * inner;
    }
    Ok(total * norm)
}

fn input_norm(x: &[f64], n: usize) -> Result<f64> {
    if x.len() != n {
        return Err(Error::InvalidShape(format!("input of length {} for order {n}", x.len())));
    }
    Ok(x.iter().map(|v| v * v).sum::<f64>().sqrt())
}
