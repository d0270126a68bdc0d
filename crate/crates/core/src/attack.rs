//! Reconstruction attacks by an honest-but-curious server.
//!
//! * [`dlg_attack`] optimizes a dummy input until its smashed data matches
//!   the observed one, using whatever the attacker knows about the mask.
//! * [`analytic_inversion`] inverts a square single-layer victim under a
//!   guessed mask; [`empirical_reconstruction_error`] averages it over
//!   random true and guessed masks.
//! * [`score_gradient_cascade`] recovers the raw input of a linear stack
//!   from the score gradients, which is why clients upload sampled masks
//!   rather than score updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, is_singular, solve, SINGULAR_CONDITION};
use crate::mask::{sample_mask, BinaryMask, ProbMask};
use crate::net::{backward_stack, forward_stack, sigmoid, sigmoid_prime, Stack, WeightMatrix};

/// Divisors below this magnitude make a coordinate unrecoverable.
pub const DIVISOR_FLOOR: f64 = 1e-12;

/// What the attacker knows about the mask that produced the observation.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskKnowledge {
    /// The sampled mask itself.
    Exact(BinaryMask),
    /// Only the keep probabilities, used as a soft mask.
    Probabilistic(ProbMask),
    /// Nothing; the attacker uses the unmasked weights.
    None,
}

impl MaskKnowledge {
    fn effective(&self, stack: &Stack<'_>) -> Result<Vec<WeightMatrix>> {
        let expect: Vec<usize> = stack.weights.iter().map(WeightMatrix::len).collect();
        let check = |shape: Vec<usize>| {
            if shape != expect {
                return Err(Error::InvalidShape(format!(
                    "mask knowledge {shape:?} for layers {expect:?}"
                )));
            }
            Ok(())
        };
        match self {
            MaskKnowledge::Exact(m) => {
                check(m.shape())?;
                stack.weights.iter().zip(&m.layers).map(|(w, m)| w.masked(m)).collect()
            }
            MaskKnowledge::Probabilistic(p) => {
                check(p.shape())?;
                stack.weights.iter().zip(p.layers()).map(|(w, g)| w.gated(g)).collect()
            }
            MaskKnowledge::None => Ok(stack.weights.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DlgConfig {
    /// Maximum number of objective evaluations after the initial one.
    pub budget: usize,
    pub step: f64,
    /// Step multiplier after an accepted move; 1 disables growth.
    pub growth: f64,
    /// Stop once the objective falls below this value.
    pub tolerance: f64,
    /// Dummy inputs are drawn uniformly from `[-init_range, init_range]`.
    pub init_range: f64,
}

impl Default for DlgConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            step: 0.1,
            growth: 1.2,
            tolerance: 1e-14,
            init_range: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub reconstruction: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl AttackReport {
    pub fn error(&self, truth: &[f64]) -> f64 {
        l2_distance(&self.reconstruction, truth)
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Peak signal-to-noise ratio in dB for signals with the given peak range.
pub fn psnr(reconstruction: &[f64], truth: &[f64], range: f64) -> f64 {
    let mse = reconstruction
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / truth.len().max(1) as f64;
    10.0 * (range * range / mse).log10()
}

struct Objective<'a> {
    mats: Vec<WeightMatrix>,
    stack: &'a Stack<'a>,
    observed: &'a [f64],
}

impl Objective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let (out, _) = forward_stack(&self.mats, self.stack.nonlinearity, self.stack.activate_output, x)?;
        Ok(out.iter().zip(self.observed).map(|(a, b)| (a - b).powi(2)).sum())
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (out, trace) = forward_stack(&self.mats, self.stack.nonlinearity, self.stack.activate_output, x)?;
        let upstream: Vec<f64> = out.iter().zip(self.observed).map(|(a, b)| 2.0 * (a - b)).collect();
        backward_stack(
            &self.mats,
            self.stack.nonlinearity,
            self.stack.activate_output,
            &trace,
            &upstream,
            |_, _, _| {},
        )
    }
}

/// Gradient descent on `|f(x^) - observed|^2` with step halving on
/// increase. Starts from `init` when given, otherwise from a uniform draw.
pub fn dlg_attack<R: Rng + ?Sized>(
    observed: &[f64],
    victim: &Stack<'_>,
    knowledge: &MaskKnowledge,
    config: &DlgConfig,
    init: Option<&[f64]>,
    rng: &mut R,
) -> Result<AttackReport> {
    let width = victim
        .input_width()
        .ok_or_else(|| Error::InvalidInput("victim has no layers".into()))?;
    if victim.output_width() != Some(observed.len()) {
        return Err(Error::InvalidShape(format!(
            "observation of length {} for output width {:?}",
            observed.len(),
            victim.output_width()
        )));
    }
    let objective = Objective {
        mats: knowledge.effective(victim)?,
        stack: victim,
        observed,
    };
    let mut x = match init {
        Some(v) if v.len() == width => v.to_vec(),
        Some(v) => {
            return Err(Error::InvalidShape(format!("initial guess of length {} for width {width}", v.len())))
        }
        None => (0..width)
            .map(|_| rng.random_range(-config.init_range..=config.init_range))
            .collect(),
    };
    let mut f = objective.value(&x)?;
    let mut report = AttackReport {
        reconstruction: x.clone(),
        objective: f,
        iterations: 0,
        converged: false,
    };
    if config.budget == 0 {
        return Ok(report);
    }
    let mut step = config.step;
    let mut grad = objective.gradient(&x)?;
    while report.iterations < config.budget {
        if f <= config.tolerance {
            report.converged = true;
            break;
        }
        if step < f64::MIN_POSITIVE || grad.iter().all(|&g| g == 0.0) {
            break;
        }
        report.iterations += 1;
        let candidate: Vec<f64> = x.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
        let fc = objective.value(&candidate)?;
        if fc <= f {
            x = candidate;
            f = fc;
            grad = objective.gradient(&x)?;
            step *= config.growth;
        } else {
            step *= 0.5;
        }
    }
    if f <= config.tolerance {
        report.converged = true;
    }
    report.reconstruction = x;
    report.objective = f;
    Ok(report)
}

/// `x^ = (W . M^)^-1 y` for a square layer.
pub fn analytic_inversion(y: &[f64], w: &WeightMatrix, guess: &[bool]) -> Result<Vec<f64>> {
    if w.rows() != w.cols() {
        return Err(Error::InvalidShape(format!("{}x{} is not square", w.rows(), w.cols())));
    }
    let a = w.masked(guess)?;
    let condition = condition_number(&a);
    if condition > SINGULAR_CONDITION || condition.is_nan() {
        return Err(Error::SingularGuess { condition });
    }
    solve(&a, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalReport {
    /// Mean of `|x - x^|` over trials with an invertible guess; 0 when none.
    pub mean_error: f64,
    pub trials: usize,
    pub singular_guesses: usize,
    /// Every guess was singular, so no error was measured.
    pub degenerate: bool,
}

/// Monte Carlo over `M, M^ ~ Bern(theta)` of the analytic attack error on
/// `y = (W . M) x`.
pub fn empirical_reconstruction_error<R: Rng + ?Sized>(
    w: &WeightMatrix,
    theta: &ProbMask,
    x: &[f64],
    trials: usize,
    rng: &mut R,
) -> Result<EmpiricalReport> {
    if w.rows() != w.cols() || is_singular(w) {
        return Err(Error::InvalidInput("weights must be square and invertible".into()));
    }
    if theta.shape() != [w.len()] {
        return Err(Error::InvalidShape(format!("mask probabilities {:?} for {} weights", theta.shape(), w.len())));
    }
    let (mut sum, mut used, mut singular) = (0.0, 0usize, 0usize);
    for _ in 0..trials {
        let truth = sample_mask(theta, rng);
        let guess = sample_mask(theta, rng);
        let y = w.masked(&truth.layers[0])?.matvec(x)?;
        match analytic_inversion(&y, w, &guess.layers[0]) {
            Ok(x_hat) => {
                sum += l2_distance(&x_hat, x);
                used += 1;
            }
            Err(Error::SingularGuess { .. }) => singular += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(EmpiricalReport {
        mean_error: if used == 0 { 0.0 } else { sum / used as f64 },
        trials,
        singular_guesses: singular,
        degenerate: used == 0 && trials > 0,
    })
}

/// What the server sees of one linear layer when clients upload score
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeLayer {
    pub weights: WeightMatrix,
    pub mask: Vec<bool>,
    pub scores: Vec<f64>,
    pub score_grad: Vec<f64>,
}

/// Recover the input of a linear masked stack from its score gradients and
/// the gradient at its output, working from the last layer down.
pub fn score_gradient_cascade(layers: &[CascadeLayer], output_grad: &[f64]) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(Error::InvalidInput("no layers to invert".into()));
    }
    let mut delta = output_grad.to_vec();
    let mut recovered = Vec::new();
    for (i, layer) in layers.iter().enumerate().rev() {
        let w = &layer.weights;
        let n = w.len();
        if layer.mask.len() != n || layer.scores.len() != n || layer.score_grad.len() != n || delta.len() != w.rows() {
            return Err(Error::InvalidShape(format!("layer {} observations do not match its weights", i + 1)));
        }
        let masked = w.masked(&layer.mask)?;
        if is_singular(&masked) {
            return Err(Error::SingularLayer { layer: i + 1 });
        }
        recovered = (0..w.cols())
            .map(|k| {
                let (best, divisor) = (0..w.rows())
                    .map(|j| {
                        let idx = j * w.cols() + k;
                        let s = layer.scores[idx];
                        (idx, delta[j] * w.values()[idx] * sigmoid(s) * sigmoid_prime(s))
                    })
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .expect("at least one row");
                if divisor.abs() < DIVISOR_FLOOR {
                    return Err(Error::UnrecoverableCoordinate { layer: i + 1, coordinate: k });
                }
                Ok(layer.score_grad[best] / divisor)
            })
            .collect::<Result<Vec<f64>>>()?;
        delta = masked.matvec_transposed(&delta)?;
    }
    Ok(recovered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{masked_forward, ste_backward, ScoreMask};
    use crate::net::{kaiming_init, Nonlinearity};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn linear(weights: &[WeightMatrix]) -> Stack<'_> {
        Stack {
            weights,
            nonlinearity: Nonlinearity::Identity,
            activate_output: false,
        }
    }

    fn well_conditioned(n: usize, rng: &mut impl Rng) -> WeightMatrix {
        loop {
            let w = kaiming_init(n, n, rng).unwrap();
            if condition_number(&w) < 20.0 {
                return w;
            }
        }
    }

    #[test]
    fn dlg_from_truth_stops_immediately() {
        let w = [WeightMatrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap()];
        let x = [0.3, -0.2];
        let y = w[0].matvec(&x).unwrap();
        let r = dlg_attack(&y, &linear(&w), &MaskKnowledge::None, &DlgConfig::default(), Some(&x), &mut seeded(0)).unwrap();
        assert_eq!(r.reconstruction, x);
        assert_eq!(r.iterations, 0);
        assert!(r.converged);

        let zero = DlgConfig { budget: 0, ..DlgConfig::default() };
        let r = dlg_attack(&y, &linear(&w), &MaskKnowledge::None, &zero, Some(&[0.0, 0.0]), &mut seeded(0)).unwrap();
        assert_eq!(r.reconstruction, vec![0.0, 0.0]);
        assert!(!r.converged);
    }

    #[test]
    fn dlg_exact_knowledge_recovers_linear_victim() {
        let mut rng = seeded(4);
        let w = [well_conditioned(4, &mut rng)];
        let theta = ProbMask::uniform(&[16], 0.9).unwrap();
        let mask = loop {
            let m = sample_mask(&theta, &mut rng);
            if condition_number(&w[0].masked(&m.layers[0]).unwrap()) < 50.0 {
                break m;
            }
        };
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y, _) = masked_forward(&linear(&w), &mask, &x).unwrap();
        let cfg = DlgConfig { budget: 10_000, ..DlgConfig::default() };
        let r = dlg_attack(&y.values, &linear(&w), &MaskKnowledge::Exact(mask), &cfg, None, &mut rng).unwrap();
        assert!(r.error(&x) < 1e-6, "error {}", r.error(&x));
        assert!(r.iterations <= 10_000);
    }

    #[test]
    fn dlg_without_mask_knowledge_is_worse() {
        let mut rng = seeded(5);
        let w = [well_conditioned(4, &mut rng)];
        let stack = linear(&w);
        let theta = ProbMask::uniform(&[16], 0.5).unwrap();
        let cfg = DlgConfig { budget: 500, ..DlgConfig::default() };
        let (mut exact, mut blind) = (0.0, 0.0);
        for _ in 0..100 {
            let mask = sample_mask(&theta, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (y, _) = masked_forward(&stack, &mask, &x).unwrap();
            exact += dlg_attack(&y.values, &stack, &MaskKnowledge::Exact(mask), &cfg, None, &mut rng).unwrap().error(&x);
            blind += dlg_attack(&y.values, &stack, &MaskKnowledge::None, &cfg, None, &mut rng).unwrap().error(&x);
        }
        assert!(blind > exact, "blind {blind} exact {exact}");
    }

    #[test]
    fn inversion_examples() {
        let i = WeightMatrix::identity(2).unwrap();
        assert_eq!(analytic_inversion(&[0.5, 2.0], &i, &[true; 4]).unwrap(), vec![0.5, 2.0]);
        let d = WeightMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let x = analytic_inversion(&[2.0, 4.0], &d, &[true; 4]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
        let full = WeightMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!(matches!(
            analytic_inversion(&[1.0, 1.0], &full, &[false, false, true, true]),
            Err(Error::SingularGuess { .. })
        ));
    }

    #[test]
    fn empirical_examples() {
        let w = WeightMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let det = ProbMask::uniform(&[4], 1.0).unwrap();
        let r = empirical_reconstruction_error(&w, &det, &[0.3, 0.4], 50, &mut seeded(1)).unwrap();
        assert!(r.mean_error < 1e-12);
        let half = ProbMask::uniform(&[4], 0.5).unwrap();
        let r = empirical_reconstruction_error(&w, &half, &[0.0, 0.0], 50, &mut seeded(1)).unwrap();
        assert_eq!(r.mean_error, 0.0);
        let never = ProbMask::uniform(&[4], 0.0).unwrap();
        let r = empirical_reconstruction_error(&w, &never, &[1.0, 0.0], 10, &mut seeded(1)).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.singular_guesses, 10);
    }

    fn cascade_instance(rng: &mut crate::rng::SimRng, depth: usize, n: usize) -> (Vec<CascadeLayer>, Vec<f64>, Vec<f64>) {
        let theta = ProbMask::uniform(&vec![n * n; depth], 0.8).unwrap();
        let (weights, mask) = loop {
            let weights: Vec<WeightMatrix> = (0..depth).map(|_| kaiming_init(n, n, rng).unwrap()).collect();
            let mask = sample_mask(&theta, rng);
            if weights
                .iter()
                .zip(&mask.layers)
                .all(|(w, m)| condition_number(&w.masked(m).unwrap()) < 1e4)
            {
                break (weights, mask);
            }
        };
        let scores = ScoreMask::new(
            (0..depth)
                .map(|_| (0..n * n).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect(),
        )
        .unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let stack = linear(&weights);
        let (_, cache) = masked_forward(&stack, &mask, &x).unwrap();
        let (grads, _) = ste_backward(&cache, &stack, &scores, &g).unwrap();
        let layers = (0..depth)
            .map(|i| CascadeLayer {
                weights: weights[i].clone(),
                mask: mask.layers[i].clone(),
                scores: scores.layers[i].clone(),
                score_grad: grads[i].clone(),
            })
            .collect();
        (layers, g, x)
    }

    #[test]
    fn cascade_single_layer() {
        let mut rng = seeded(8);
        let (layers, g, x) = cascade_instance(&mut rng, 1, 3);
        let got = score_gradient_cascade(&layers, &g).unwrap();
        assert!(l2_distance(&got, &x) < 1e-9);
    }

    #[test]
    fn cascade_two_layers() {
        let mut rng = seeded(9);
        let (layers, g, x) = cascade_instance(&mut rng, 2, 4);
        let got = score_gradient_cascade(&layers, &g).unwrap();
        assert!(l2_distance(&got, &x) < 1e-8);
    }

    #[test]
    fn cascade_rejects_singular_layer() {
        let mut rng = seeded(10);
        let (mut layers, g, _) = cascade_instance(&mut rng, 2, 3);
        layers[0].mask[..3].fill(false);
        assert!(matches!(score_gradient_cascade(&layers, &g), Err(Error::SingularLayer { layer: 1 })));
    }

    #[test]
    fn cascade_flags_vanishing_divisor() {
        let mut rng = seeded(12);
        let (layers, _, _) = cascade_instance(&mut rng, 1, 2);
        assert!(matches!(
            score_gradient_cascade(&layers, &[0.0, 0.0]),
            Err(Error::UnrecoverableCoordinate { layer: 1, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dlg_objective_never_increases(seed in any::<u64>(), budget in 1usize..60) {
            let mut rng = seeded(seed);
            let w = [kaiming_init(6, 3, &mut rng).unwrap(), kaiming_init(4, 6, &mut rng).unwrap()];
            let stack = Stack { weights: &w, nonlinearity: Nonlinearity::Relu, activate_output: true };
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (y, _) = forward_stack(&w, Nonlinearity::Relu, true, &x).unwrap();
            let init: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = DlgConfig::default();
            let mut last = f64::INFINITY;
            for b in [0, budget / 2, budget] {
                let r = dlg_attack(&y, &stack, &MaskKnowledge::None, &DlgConfig { budget: b, ..cfg.clone() }, Some(&init), &mut rng).unwrap();
                prop_assert!(r.objective <= last);
                prop_assert!(r.iterations <= b);
                last = r.objective;
            }
        }

        #[test]
        fn inversion_inverts_forward(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = seeded(seed);
            let w = kaiming_init(n, n, &mut rng).unwrap();
            let guess: Vec<bool> = (0..n * n).map(|_| rng.random_bool(0.8)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = w.masked(&guess).unwrap().matvec(&x).unwrap();
            if let Ok(x_hat) = analytic_inversion(&y, &w, &guess) {
                let y_hat = w.masked(&guess).unwrap().matvec(&x_hat).unwrap();
                let scale = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(l2_distance(&y_hat, &y) <= 1e-9 * scale.max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn cascade_recovers_inputs(seed in any::<u64>(), depth in 2usize..=4, n in 2usize..=6) {
            let mut rng = seeded(seed);
            let (layers, g, x) = cascade_instance(&mut rng, depth, n);
            let got = score_gradient_cascade(&layers, &g).unwrap();
            prop_assert!(l2_distance(&got, &x) <= 1e-8);
        }
    }
}
