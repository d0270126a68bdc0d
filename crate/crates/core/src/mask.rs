//! Probabilistic-mask machinery: score masks, Bernoulli sampling, the
//! masked forward pass and the straight-through-estimator backward pass.
//!
//! Scores `s` parameterize keep probabilities `theta = sigmoid(s)`. Each
//! forward pass gates the frozen weights with a fresh `M ~ Bern(theta)`.
//! The backward pass treats the Bernoulli draw as differentiable with
//! derivative `sigmoid(s)`, so the gradient reaching a score is
//! `delta_j * x_k * w_jk * sigmoid(s_jk) * sigmoid'(s_jk)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{
    backward_stack, forward_stack, logit, sigmoid, sigmoid_prime, Activation, Stack, StackTrace,
    WeightMatrix,
};

fn check_shape(what: &str, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidShape(format!(
            "{what}: expected layer sizes {expected:?}, got {got:?}"
        )));
    }
    Ok(())
}

/// Unbounded real scores, one vector per gated weight matrix (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMask {
    pub layers: Vec<Vec<f64>>,
}

/// Keep probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMask {
    layers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub layers: Vec<Vec<bool>>,
}

impl ScoreMask {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("non-finite score".into()));
        }
        Ok(Self { layers })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            layers: shape.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Scores whose logistic transform is `theta`. Probabilities are first
    /// clamped into `[clip, 1 - clip]` so that saturated coordinates map to
    /// finite scores.
    pub fn from_probs(theta: &ProbMask, clip: f64) -> Result<Self> {
        if !(clip > 0.0 && clip < 0.5) {
            return Err(Error::Domain(format!("score clip {clip} outside (0, 0.5)")));
        }
        let layers = theta
            .layers
            .iter()
            .map(|l| l.iter().map(|&t| logit(t.clamp(clip, 1.0 - clip))).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self { layers })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn probs(&self) -> ProbMask {
        ProbMask {
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|&s| sigmoid(s)).collect())
                .collect(),
        }
    }
}

impl ProbMask {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(bad) = layers.iter().flatten().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidInput(format!("probability {bad} outside [0,1]")));
        }
        Ok(Self { layers })
    }

    pub fn uniform(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape.iter().map(|&n| vec![value; n]).collect())
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn into_layers(self) -> Vec<Vec<f64>> {
        self.layers
    }

    /// Replace one layer; values must be probabilities of the same length.
    pub fn set_layer(&mut self, l: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != self.layers[l].len() {
            return Err(Error::InvalidShape(format!("layer {l} length")));
        }
        if values.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidInput(format!("layer {l} has values outside [0,1]")));
        }
        self.layers[l] = values;
        Ok(())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flatten().copied()
    }

    /// First `depth` layers.
    pub fn truncated(&self, depth: usize) -> Self {
        Self {
            layers: self.layers[..depth].to_vec(),
        }
    }
}

impl BinaryMask {
    pub fn ones(shape: &[usize]) -> Self {
        Self {
            layers: shape.iter().map(|&n| vec![true; n]).collect(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            layers: shape.iter().map(|&n| vec![false; n]).collect(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn count_ones(&self) -> usize {
        self.layers.iter().flatten().filter(|&&b| b).count()
    }

    pub fn flat(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers.iter().flatten().copied()
    }

    pub fn to_probs(&self) -> ProbMask {
        ProbMask {
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }
}

/// Independent Bernoulli draw per coordinate.
pub fn sample_mask<R: Rng + ?Sized>(theta: &ProbMask, rng: &mut R) -> BinaryMask {
    BinaryMask {
        layers: theta
            .layers
            .iter()
            .map(|l| l.iter().map(|&t| rng.random::<f64>() < t).collect())
            .collect(),
    }
}

/// Inputs, sampled masks and pre-activations of one masked forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub mask: BinaryMask,
    pub trace: StackTrace,
}

impl ForwardCache {
    pub fn depth(&self) -> usize {
        self.trace.inputs.len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.trace.inputs
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.trace.pre_activations
    }
}

fn stack_shape(stack: &Stack<'_>) -> Vec<usize> {
    stack.weights.iter().map(WeightMatrix::len).collect()
}

fn masked_weights(stack: &Stack<'_>, mask: &BinaryMask) -> Result<Vec<WeightMatrix>> {
    stack
        .weights
        .iter()
        .zip(&mask.layers)
        .map(|(w, m)| w.masked(m))
        .collect()
}

/// `f_{w ⊙ M}(x)` through the stack, with the cache for [`ste_backward`].
pub fn masked_forward(
    stack: &Stack<'_>,
    mask: &BinaryMask,
    x: &[f64],
) -> Result<(Activation, ForwardCache)> {
    check_shape("mask", &stack_shape(stack), &mask.shape())?;
    let mats = masked_weights(stack, mask)?;
    let (out, trace) = forward_stack(&mats, stack.nonlinearity, stack.activate_output, x)?;
    Ok((
        Activation {
            values: out,
            layer_index: stack.depth(),
        },
        ForwardCache {
            mask: mask.clone(),
            trace,
        },
    ))
}

/// Forward with real-valued gates `w ⊙ g` (expected-mask evaluation and
/// the soft-mask attacker).
pub fn gated_forward(stack: &Stack<'_>, gates: &ProbMask, x: &[f64]) -> Result<Vec<f64>> {
    check_shape("gates", &stack_shape(stack), &gates.shape())?;
    let mats = stack
        .weights
        .iter()
        .zip(gates.layers())
        .map(|(w, g)| w.gated(g))
        .collect::<Result<Vec<_>>>()?;
    Ok(forward_stack(&mats, stack.nonlinearity, stack.activate_output, x)?.0)
}

/// Straight-through backward pass. Returns per-layer score gradients and
/// the gradient with respect to the stack input, the latter propagated
/// through the sampled weights `w ⊙ M`.
pub fn ste_backward(
    cache: &ForwardCache,
    stack: &Stack<'_>,
    scores: &ScoreMask,
    upstream: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let shape = stack_shape(stack);
    if cache.mask.shape() != shape || cache.depth() != stack.depth() {
        return Err(Error::InvalidCache(format!(
            "cache for layer sizes {:?}, model has {shape:?}",
            cache.mask.shape()
        )));
    }
    check_shape("scores", &shape, &scores.shape())?;
    let mats = masked_weights(stack, &cache.mask)?;
    let mut grads: Vec<Vec<f64>> = shape.iter().map(|&n| vec![0.0; n]).collect();
    let input_grad = backward_stack(
        &mats,
        stack.nonlinearity,
        stack.activate_output,
        &cache.trace,
        upstream,
        |i, delta, input| {
            let w = &stack.weights[i];
            let s = &scores.layers[i];
            let g = &mut grads[i];
            let cols = w.cols();
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let row = j * cols;
                for (k, &xk) in input.iter().enumerate() {
                    let idx = row + k;
                    let sk = s[idx];
                    g[idx] = dj * xk * w.values()[idx] * sigmoid(sk) * sigmoid_prime(sk);
                }
            }
        },
    )?;
    Ok((grads, input_grad))
}

/// `s <- s - lr * (1/batch) * sum(grads)`; `grads` holds per-layer sums.
pub fn apply_score_update(
    scores: &ScoreMask,
    grads: &[Vec<f64>],
    batch_size: usize,
    lr: f64,
) -> Result<ScoreMask> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    check_shape(
        "score gradients",
        &scores.shape(),
        &grads.iter().map(Vec::len).collect::<Vec<_>>(),
    )?;
    let scale = lr / batch_size as f64;
    ScoreMask::new(
        scores
            .layers
            .iter()
            .zip(grads)
            .map(|(s, g)| s.iter().zip(g).map(|(s, g)| s - scale * g).collect())
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Score optimizer. State is reset whenever the scores are re-initialized
/// from a broadcast mask.
#[derive(Debug, Clone)]
pub struct ScoreOptimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl ScoreOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shape: &[usize]) -> Self {
        let zeros: Vec<Vec<f64>> = shape.iter().map(|&n| vec![0.0; n]).collect();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update from per-layer gradient sums over `batch_size` samples.
    pub fn apply(&mut self, scores: &ScoreMask, grads: &[Vec<f64>], batch_size: usize) -> Result<ScoreMask> {
        match self.kind {
            OptimizerKind::Sgd => apply_score_update(scores, grads, batch_size, self.lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if batch_size == 0 {
                    return Err(Error::InvalidConfig("batch size must be at least 1".into()));
                }
                check_shape(
                    "score gradients",
                    &scores.shape(),
                    &grads.iter().map(Vec::len).collect::<Vec<_>>(),
                )?;
                self.step += 1;
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let inv_b = 1.0 / batch_size as f64;
                let mut layers = scores.layers.clone();
                for (l, layer) in layers.iter_mut().enumerate() {
                    for (i, s) in layer.iter_mut().enumerate() {
                        let g = grads[l][i] * inv_b;
                        let m = &mut self.m[l][i];
                        let v = &mut self.v[l][i];
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *s -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    }
                }
                ScoreMask::new(layers)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{dense_forward, Network, Nonlinearity};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn linear(weights: &[WeightMatrix], activate_output: bool) -> Stack<'_> {
        Stack {
            weights,
            nonlinearity: Nonlinearity::Identity,
            activate_output,
        }
    }

    #[test]
    fn sample_extremes() {
        let mut rng = seeded(1);
        let ones = ProbMask::uniform(&[5, 3], 1.0).unwrap();
        assert_eq!(sample_mask(&ones, &mut rng), BinaryMask::ones(&[5, 3]));
        let zeros = ProbMask::uniform(&[5, 3], 0.0).unwrap();
        assert_eq!(sample_mask(&zeros, &mut rng), BinaryMask::zeros(&[5, 3]));
    }

    #[test]
    fn sample_half_frequency() {
        let mut rng = seeded(2);
        let theta = ProbMask::uniform(&[4], 0.5).unwrap();
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            for (c, b) in counts.iter_mut().zip(sample_mask(&theta, &mut rng).flat()) {
                *c += b as usize;
            }
        }
        for c in counts {
            let mean = c as f64 / draws as f64;
            assert!((0.49..=0.51).contains(&mean), "{mean}");
        }
    }

    #[test]
    fn sample_reproducible_and_seed_sensitive() {
        let theta = ProbMask::uniform(&[64], 0.5).unwrap();
        let a = sample_mask(&theta, &mut seeded(9));
        assert_eq!(a, sample_mask(&theta, &mut seeded(9)));
        assert_ne!(a, sample_mask(&theta, &mut seeded(10)));
    }

    #[test]
    fn masked_forward_examples() {
        let mut rng = seeded(4);
        let net = Network::kaiming(&[3, 4, 2], Nonlinearity::Relu, &mut rng).unwrap();
        let stack = net.bottom(2);
        let x = [0.5, -1.0, 2.0];
        let (out, _) = masked_forward(&stack, &BinaryMask::ones(&net.layer_sizes()), &x).unwrap();
        let h = dense_forward(&net.layers[0], &x).unwrap().values;
        let h: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
        let expected = dense_forward(&net.layers[1], &h).unwrap().values;
        assert_eq!(out.values, expected);
        let (zero, _) =
            masked_forward(&stack, &BinaryMask::zeros(&net.layer_sizes()), &x).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_forward_two_layer_by_hand() {
        // W1 = [[1,2],[3,4]], M1 = [[1,0],[0,1]] -> [[1,0],[0,4]]
        // W2 = [[1,-1]],      M2 = [[1,1]]
        // x = [1,1]: h = [1,4] (relu keeps), y = 1 - 4 = -3
        let weights = vec![
            WeightMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            WeightMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap(),
        ];
        let stack = Stack {
            weights: &weights,
            nonlinearity: Nonlinearity::Relu,
            activate_output: false,
        };
        let mask = BinaryMask {
            layers: vec![vec![true, false, false, true], vec![true, true]],
        };
        let (out, cache) = masked_forward(&stack, &mask, &[1.0, 1.0]).unwrap();
        assert_eq!(out.values, vec![-3.0]);
        assert_eq!(cache.inputs()[1], vec![1.0, 4.0]);
    }

    #[test]
    fn masked_forward_rejects_mismatch() {
        let w = vec![WeightMatrix::identity(2).unwrap()];
        let stack = linear(&w, false);
        assert!(masked_forward(&stack, &BinaryMask::ones(&[3]), &[1.0, 1.0]).is_err());
        assert!(masked_forward(&stack, &BinaryMask::ones(&[4]), &[1.0]).is_err());
    }

    #[test]
    fn ste_single_unit() {
        let w = vec![WeightMatrix::new(1, 1, vec![2.0]).unwrap()];
        let stack = linear(&w, false);
        let mask = BinaryMask::ones(&[1]);
        let (_, cache) = masked_forward(&stack, &mask, &[3.0]).unwrap();
        let scores = ScoreMask::zeros(&[1]);
        let (g, _) = ste_backward(&cache, &stack, &scores, &[1.0]).unwrap();
        assert_eq!(g[0][0], 0.75);
    }

    #[test]
    fn ste_zero_upstream_and_zero_weight() {
        let w = vec![WeightMatrix::from_rows(&[vec![0.0, 1.5], vec![-2.0, 0.5]]).unwrap()];
        let stack = linear(&w, false);
        let mask = BinaryMask::ones(&[4]);
        let (_, cache) = masked_forward(&stack, &mask, &[1.0, 2.0]).unwrap();
        let scores = ScoreMask::new(vec![vec![0.3, -0.2, 1.0, 0.0]]).unwrap();
        let (g, gx) = ste_backward(&cache, &stack, &scores, &[0.0, 0.0]).unwrap();
        assert!(g[0].iter().chain(&gx).all(|&v| v == 0.0));
        let (g, _) = ste_backward(&cache, &stack, &scores, &[1.0, -1.0]).unwrap();
        assert_eq!(g[0][0], 0.0);
        assert!(g[0][1] != 0.0);
    }

    #[test]
    fn ste_rejects_stale_cache() {
        let w2 = vec![WeightMatrix::identity(2).unwrap()];
        let w3 = vec![WeightMatrix::identity(3).unwrap()];
        let (_, cache) = masked_forward(&linear(&w2, false), &BinaryMask::ones(&[4]), &[1.0, 1.0])
            .unwrap();
        let err = ste_backward(&cache, &linear(&w3, false), &ScoreMask::zeros(&[9]), &[1.0; 3]);
        assert!(matches!(err, Err(Error::InvalidCache(_))));
    }

    #[test]
    fn score_update_examples() {
        let s = ScoreMask::new(vec![vec![0.5, -1.0]]).unwrap();
        assert_eq!(apply_score_update(&s, &[vec![0.0, 0.0]], 4, 0.1).unwrap(), s);
        let out = apply_score_update(&s, &[vec![0.25, 2.0]], 1, 1.0).unwrap();
        assert_eq!(out.layers[0], vec![0.25, -3.0]);
        assert!(apply_score_update(&s, &[vec![0.0, 0.0]], 0, 1.0).is_err());
    }

    #[test]
    fn score_update_matches_scalar_accumulator() {
        let mut rng = seeded(21);
        let s = ScoreMask::new(vec![(0..10).map(|_| rng.random_range(-1.0..1.0)).collect()])
            .unwrap();
        let per_sample: Vec<Vec<f64>> = (0..32)
            .map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut sums = vec![0.0; 10];
        for g in &per_sample {
            for (a, b) in sums.iter_mut().zip(g) {
                *a += b;
            }
        }
        let out = apply_score_update(&s, &[sums], 32, 1e-3).unwrap();
        for i in 0..10 {
            let mut acc = 0.0;
            for g in &per_sample {
                acc += g[i];
            }
            let expected = s.layers[0][i] - 1e-3 * acc / 32.0;
            assert!((out.layers[0][i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn from_probs_clamps_saturated() {
        let theta = ProbMask::new(vec![vec![0.0, 0.5, 1.0]]).unwrap();
        let s = ScoreMask::from_probs(&theta, 0.01).unwrap();
        assert!((sigmoid(s.layers[0][0]) - 0.01).abs() < 1e-12);
        assert_eq!(s.layers[0][1], 0.0);
        assert!((sigmoid(s.layers[0][2]) - 0.99).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let s = ScoreMask::zeros(&[2]);
        let mut opt = ScoreOptimizer::new(OptimizerKind::adam(), 0.1, &[2]);
        let out = opt.apply(&s, &[vec![1.0, -3.0]], 1).unwrap();
        assert!((out.layers[0][0] + 0.1).abs() < 1e-6);
        assert!((out.layers[0][1] - 0.1).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn single_layer_ste_closed_form(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let rows = rng.random_range(1..5);
            let cols = rng.random_range(1..5);
            let w = vec![WeightMatrix::new(rows, cols,
                (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()];
            let scores = ScoreMask::new(vec![(0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()]).unwrap();
            let mask = sample_mask(&scores.probs(), &mut rng);
            let x: Vec<f64> = (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
            let stack = linear(&w, false);
            let (_, cache) = masked_forward(&stack, &mask, &x).unwrap();
            let (grads, _) = ste_backward(&cache, &stack, &scores, &g).unwrap();
            for j in 0..rows {
                for k in 0..cols {
                    let s = scores.layers[0][j * cols + k];
                    let p = 1.0 / (1.0 + (-s).exp());
                    let expected = g[j] * x[k] * w[0].get(j, k) * p * (p * (1.0 - p));
                    prop_assert!((grads[0][j * cols + k] - expected).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn masked_equals_premultiplied(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let net = Network::kaiming(&[3, 5, 4], Nonlinearity::Relu, &mut rng).unwrap();
            let theta = ProbMask::uniform(&net.layer_sizes(), 0.5).unwrap();
            let mask = sample_mask(&theta, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (out, _) = masked_forward(&net.bottom(2), &mask, &x).unwrap();
            let pre: Vec<WeightMatrix> = net.layers.iter().zip(&mask.layers)
                .map(|(w, m)| w.masked(m).unwrap()).collect();
            let h: Vec<f64> = dense_forward(&pre[0], &x).unwrap().values.iter().map(|v| v.max(0.0)).collect();
            let y = dense_forward(&pre[1], &h).unwrap().values;
            for (a, b) in out.values.iter().zip(&y) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn linear_input_grad_is_transpose_chain(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let depth = rng.random_range(1..4);
            let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..5)).collect();
            let net = Network::kaiming(&widths, Nonlinearity::Identity, &mut rng).unwrap();
            let theta = ProbMask::uniform(&net.layer_sizes(), 0.6).unwrap();
            let mask = sample_mask(&theta, &mut rng);
            let stack = linear(&net.layers, false);
            let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..widths[depth]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, cache) = masked_forward(&stack, &mask, &x).unwrap();
            let (_, gx) = ste_backward(&cache, &stack, &ScoreMask::zeros(&net.layer_sizes()), &g).unwrap();
            // explicit product P = (W_m⊙M_m)...(W_1⊙M_1), then P^T g
            let mut p = nalgebra::DMatrix::<f64>::identity(widths[0], widths[0]);
            for (w, m) in net.layers.iter().zip(&mask.layers) {
                let wm = w.masked(m).unwrap();
                let dm = nalgebra::DMatrix::from_row_slice(wm.rows(), wm.cols(), wm.values());
                p = dm * p;
            }
            let expected = p.transpose() * nalgebra::DVector::from_column_slice(&g);
            for (a, b) in gx.iter().zip(expected.iter()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}
