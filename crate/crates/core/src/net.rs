//! Dense-network substrate: frozen weight matrices, dense forward math,
//! cross-entropy, and the logistic transform that maps scores to keep
//! probabilities.
//!
//! Layers are bias-free. A network of `L` layers applies its nonlinearity
//! after every layer except the last, whose output is the logit vector.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic arguments are clamped to this magnitude before exponentiation.
pub const LOGISTIC_CLAMP: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    frozen: bool,
}

impl WeightMatrix {
    /// Row-major `rows x cols` matrix. The result is frozen.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!("{rows}x{cols} matrix")));
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite weight".into()));
        }
        Ok(Self {
            rows,
            cols,
            values,
            frozen: true,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self::new(n, n, values)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Unfrozen copy for weight training (baselines and server top models).
    pub fn to_trainable(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    /// `W <- W - lr * grad`. Frozen matrices refuse the update.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidInput("attempt to update frozen weights".into()));
        }
        if grad.len() != self.values.len() {
            return Err(Error::InvalidShape(format!(
                "gradient of {} for {} weights",
                grad.len(),
                self.values.len()
            )));
        }
        for (w, g) in self.values.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        Ok(())
    }

    /// Replace all values (used by FedAvg on trainable copies).
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidInput("attempt to overwrite frozen weights".into()));
        }
        if values.len() != self.values.len() {
            return Err(Error::InvalidShape("assign length".into()));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// Element-wise product with a real-valued gate of the same shape.
    pub fn gated(&self, gate: &[f64]) -> Result<Self> {
        if gate.len() != self.values.len() {
            return Err(Error::InvalidShape(format!(
                "gate of {} for {} weights",
                gate.len(),
                self.values.len()
            )));
        }
        let values = self.values.iter().zip(gate).map(|(w, g)| w * g).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values,
            frozen: true,
        })
    }

    /// Element-wise product with a binary mask of the same shape.
    pub fn masked(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.values.len() {
            return Err(Error::InvalidShape(format!(
                "mask of {} for {} weights",
                mask.len(),
                self.values.len()
            )));
        }
        let values = self
            .values
            .iter()
            .zip(mask)
            .map(|(w, &m)| if m { *w } else { 0.0 })
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values,
            frozen: true,
        })
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::InvalidShape(format!(
                "input of length {} for {}x{} weights",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(self
            .values
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect())
    }

    /// `W^T g`.
    pub fn matvec_transposed(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.rows {
            return Err(Error::InvalidShape(format!(
                "gradient of length {} for {}x{} weights",
                g.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (row, gj) in self.values.chunks_exact(self.cols).zip(g) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += gj * w;
            }
        }
        Ok(out)
    }
}

/// Kaiming-normal initialization: i.i.d. `N(0, 2 / cols)`, frozen.
pub fn kaiming_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<WeightMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidShape(format!("{rows}x{cols} matrix")));
    }
    let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt())
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let values = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    WeightMatrix::new(rows, cols, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub values: Vec<f64>,
    pub layer_index: usize,
}

pub fn dense_forward(w: &WeightMatrix, x: &[f64]) -> Result<Activation> {
    Ok(Activation {
        values: w.matvec(x)?,
        layer_index: 1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_wrt_logits: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<LossValue> {
    if label >= logits.len() {
        return Err(Error::InvalidLabel {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    let value = (log_sum - logits[label]).max(0.0);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok(LossValue {
        value,
        grad_wrt_logits: grad,
    })
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn sigmoid(s: f64) -> f64 {
    let s = s.clamp(-LOGISTIC_CLAMP, LOGISTIC_CLAMP);
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_prime(s: f64) -> f64 {
    let p = sigmoid(s);
    p * (1.0 - p)
}

pub fn logit(theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Domain(format!(
            "inverse logistic needs a probability strictly inside (0,1), got {theta}"
        )));
    }
    Ok((theta / (1.0 - theta)).ln())
}

pub fn logistic(s: &[f64]) -> Vec<f64> {
    s.iter().map(|&v| sigmoid(v)).collect()
}

pub fn logistic_prime(s: &[f64]) -> Vec<f64> {
    s.iter().map(|&v| sigmoid_prime(v)).collect()
}

pub fn logistic_inverse(theta: &[f64]) -> Result<Vec<f64>> {
    theta.iter().map(|&t| logit(t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    #[default]
    Relu,
    /// Purely linear stack, the setting of the leakage-cascade analysis.
    Identity,
}

impl Nonlinearity {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Relu => v.max(0.0),
            Nonlinearity::Identity => v,
        }
    }

    /// Derivative; ReLU'(0) = 0.
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }
}

/// A contiguous run of layers evaluated as one function. `activate_output`
/// is false when the run ends at the network's logit layer.
#[derive(Debug, Clone, Copy)]
pub struct Stack<'a> {
    pub weights: &'a [WeightMatrix],
    pub nonlinearity: Nonlinearity,
    pub activate_output: bool,
}

impl<'a> Stack<'a> {
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_width(&self) -> Option<usize> {
        self.weights.first().map(WeightMatrix::cols)
    }

    pub fn output_width(&self) -> Option<usize> {
        self.weights.last().map(WeightMatrix::rows)
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.weights.len() || self.activate_output
    }
}

/// Per-layer inputs and pre-activations recorded by [`forward_stack`].
#[derive(Debug, Clone, PartialEq)]
pub struct StackTrace {
    pub inputs: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
}

/// Forward through effective (already gated) matrices.
pub fn forward_stack(
    mats: &[WeightMatrix],
    nonlinearity: Nonlinearity,
    activate_output: bool,
    x: &[f64],
) -> Result<(Vec<f64>, StackTrace)> {
    let stack = Stack {
        weights: mats,
        nonlinearity,
        activate_output,
    };
    let mut trace = StackTrace {
        inputs: Vec::with_capacity(mats.len()),
        pre_activations: Vec::with_capacity(mats.len()),
    };
    let mut current = x.to_vec();
    for (i, w) in mats.iter().enumerate() {
        let y = w.matvec(&current)?;
        let next = if stack.activated(i) {
            y.iter().map(|&v| nonlinearity.apply(v)).collect()
        } else {
            y.clone()
        };
        trace.inputs.push(std::mem::replace(&mut current, next));
        trace.pre_activations.push(y);
    }
    Ok((current, trace))
}

/// Backward through effective matrices. `on_layer(i, delta, input)` receives
/// the gradient with respect to layer `i`'s pre-activation together with
/// that layer's input; the return value is the gradient with respect to the
/// stack input.
pub fn backward_stack<F>(
    mats: &[WeightMatrix],
    nonlinearity: Nonlinearity,
    activate_output: bool,
    trace: &StackTrace,
    upstream: &[f64],
    mut on_layer: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &[f64], &[f64]),
{
    let stack = Stack {
        weights: mats,
        nonlinearity,
        activate_output,
    };
    if trace.inputs.len() != mats.len() || trace.pre_activations.len() != mats.len() {
        return Err(Error::InvalidCache(format!(
            "trace of {} layers for a stack of {}",
            trace.inputs.len(),
            mats.len()
        )));
    }
    let Some(out_width) = stack.output_width() else {
        return Ok(upstream.to_vec());
    };
    if upstream.len() != out_width {
        return Err(Error::InvalidShape(format!(
            "upstream gradient of length {} for output width {out_width}",
            upstream.len()
        )));
    }
    let mut grad = upstream.to_vec();
    for i in (0..mats.len()).rev() {
        let pre = &trace.pre_activations[i];
        if pre.len() != mats[i].rows() || trace.inputs[i].len() != mats[i].cols() {
            return Err(Error::InvalidCache(format!("layer {i} shape drift")));
        }
        if stack.activated(i) {
            for (g, &y) in grad.iter_mut().zip(pre) {
                *g *= nonlinearity.derivative(y);
            }
        }
        on_layer(i, &grad, &trace.inputs[i]);
        grad = mats[i].matvec_transposed(&grad)?;
    }
    Ok(grad)
}

/// Frozen network weights shared by every client and the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<WeightMatrix>,
    pub nonlinearity: Nonlinearity,
}

impl Network {
    /// Kaiming-initialized network for `widths = [input, h1, ..., classes]`.
    pub fn kaiming<R: Rng + ?Sized>(
        widths: &[usize],
        nonlinearity: Nonlinearity,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidShape("a network needs at least two widths".into()));
        }
        let layers = widths
            .windows(2)
            .map(|w| kaiming_init(w[1], w[0], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            nonlinearity,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(WeightMatrix::len).collect()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, WeightMatrix::rows)
    }

    /// Client-side layers `0..split_depth`.
    pub fn bottom(&self, split_depth: usize) -> Stack<'_> {
        Stack {
            weights: &self.layers[..split_depth],
            nonlinearity: self.nonlinearity,
            activate_output: split_depth < self.layers.len(),
        }
    }

    /// Server-side layers `split_depth..L`.
    pub fn top(&self, split_depth: usize) -> Stack<'_> {
        Stack {
            weights: &self.layers[split_depth..],
            nonlinearity: self.nonlinearity,
            activate_output: false,
        }
    }
}
