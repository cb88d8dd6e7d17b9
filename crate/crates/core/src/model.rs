//! Reference relation classifier: an MLP `d -> h -> |P|` with ReLU, or a
//! linear map when `h == 0`, trained by SGD with momentum.
//!
//! Parameters live in a single flat `f64` buffer laid out as
//! `[W1 (h x d), b1 (h), W2 (|P| x h), b2 (|P|)]` (or `[W (|P| x d), b (|P|)]`
//! for the linear model). Matrices are row-major with one row per output unit.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{softmax_unchecked, LabelDistribution, MASS_TOL};

/// Network dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub num_classes: usize,
}

impl NetShape {
    pub fn new(input_dim: usize, hidden_width: usize, num_classes: usize) -> Self {
        NetShape {
            input_dim,
            hidden_width,
            num_classes,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.hidden_width == 0
    }

    /// `(fan_in, fan_out)` for each layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        if self.is_linear() {
            vec![(self.input_dim, self.num_classes)]
        } else {
            vec![
                (self.input_dim, self.hidden_width),
                (self.hidden_width, self.num_classes),
            ]
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Classifier weights in a flat buffer; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    shape: NetShape,
    values: Vec<f64>,
}

/// One dense layer viewed inside the flat buffer.
struct LayerView<'a> {
    fan_in: usize,
    weights: &'a [f64],
    bias: &'a [f64],
}

impl LayerView<'_> {
    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(row, b)| {
            let w = &self.weights[row * self.fan_in..(row + 1) * self.fan_in];
            b + w.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
        }));
    }
}

impl ClassifierParams {
    pub fn zeros(shape: NetShape) -> Self {
        ClassifierParams {
            shape,
            values: vec![0.0; shape.num_params()],
        }
    }

    pub fn from_values(shape: NetShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.num_params() {
            return Err(Error::Dimension {
                expected: shape.num_params(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(ClassifierParams { shape, values })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `(weights, bias)` slices of layer `index`.
    pub fn layer(&self, index: usize) -> (&[f64], &[f64]) {
        let mut offset = 0;
        for (i, (fan_in, fan_out)) in self.shape.layers().into_iter().enumerate() {
            let w_end = offset + fan_in * fan_out;
            let b_end = w_end + fan_out;
            if i == index {
                return (&self.values[offset..w_end], &self.values[w_end..b_end]);
            }
            offset = b_end;
        }
        panic!("layer {index} out of range");
    }

    /// Mutable `(weights, bias)` slices of layer `index`.
    pub fn layer_mut(&mut self, index: usize) -> (&mut [f64], &mut [f64]) {
        let mut offset = 0;
        for (i, (fan_in, fan_out)) in self.shape.layers().into_iter().enumerate() {
            let w_len = fan_in * fan_out;
            if i == index {
                let (w, rest) = self.values[offset..].split_at_mut(w_len);
                return (w, &mut rest[..fan_out]);
            }
            offset += w_len + fan_out;
        }
        panic!("layer {index} out of range");
    }

    fn views(&self) -> Vec<LayerView<'_>> {
        self.shape
            .layers()
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, _))| {
                let (weights, bias) = self.layer(i);
                LayerView {
                    fan_in,
                    weights,
                    bias,
                }
            })
            .collect()
    }
}

/// He-normal weights (`N(0, 2 / fan_in)`), zero biases.
pub fn init_classifier(
    input_dim: usize,
    hidden_width: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ClassifierParams> {
    if input_dim == 0 || num_classes == 0 {
        return Err(Error::Config(
            "classifier needs input_dim >= 1 and num_classes >= 1".into(),
        ));
    }
    let shape = NetShape::new(input_dim, hidden_width, num_classes);
    let mut params = ClassifierParams::zeros(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, (fan_in, _)) in shape.layers().into_iter().enumerate() {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let (weights, _) = params.layer_mut(i);
        for w in weights.iter_mut() {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

fn check_input(params: &ClassifierParams, x: &[f64]) -> Result<()> {
    if x.len() != params.shape.input_dim {
        return Err(Error::Dimension {
            expected: params.shape.input_dim,
            got: x.len(),
        });
    }
    Ok(())
}

/// Logits for one embedding.
pub fn forward(params: &ClassifierParams, x: &[f64]) -> Result<Vec<f64>> {
    check_input(params, x)?;
    Ok(forward_unchecked(params, x))
}

pub(crate) fn forward_unchecked(params: &ClassifierParams, x: &[f64]) -> Vec<f64> {
    let views = params.views();
    let mut current = x.to_vec();
    let mut next = Vec::new();
    for (i, layer) in views.iter().enumerate() {
        layer.apply(&current, &mut next);
        if i + 1 < views.len() {
            for v in &mut next {
                *v = v.max(0.0);
            }
        }
        std::mem::swap(&mut current, &mut next);
    }
    current
}

/// An embedding paired with its training target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub target: LabelDistribution,
}

impl Sample {
    pub fn new(x: Vec<f64>, target: LabelDistribution) -> Self {
        Sample { x, target }
    }
}

fn check_target(target: &LabelDistribution, num_classes: usize) -> Result<()> {
    if target.len() != num_classes {
        return Err(Error::Dimension {
            expected: num_classes,
            got: target.len(),
        });
    }
    let mass: f64 = target.probs().iter().sum();
    if (mass - 1.0).abs() > MASS_TOL || target.probs().iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Distribution(format!(
            "training target is not a distribution (mass {mass})"
        )));
    }
    Ok(())
}

/// Mean soft-target cross-entropy over the batch and its exact gradient.
///
/// For one sample the logit gradient is `softmax(logits) - target`. Subtract
/// [`mean_target_entropy`] from the loss to read it as `KL(target ‖ pred)`;
/// the gradient is the same under both readings.
pub fn loss_and_grad(params: &ClassifierParams, batch: &[Sample]) -> Result<(f64, ClassifierParams)> {
    if batch.is_empty() {
        return Err(Error::Config("loss_and_grad on an empty batch".into()));
    }
    let shape = params.shape;
    for s in batch {
        check_input(params, &s.x)?;
        check_target(&s.target, shape.num_classes)?;
    }

    let mut grads = ClassifierParams::zeros(shape);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let views = params.views();

    let mut hidden = Vec::new();
    let mut logits = Vec::new();
    for s in batch {
        // Forward, keeping the hidden activations.
        let input: &[f64] = if shape.is_linear() {
            &s.x
        } else {
            views[0].apply(&s.x, &mut hidden);
            for v in &mut hidden {
                *v = v.max(0.0);
            }
            &hidden
        };
        views[views.len() - 1].apply(input, &mut logits);

        let probs = softmax_unchecked(&logits);
        let log_total = {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
        };
        total += s
            .target
            .probs()
            .iter()
            .zip(&logits)
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, l)| t * (log_total - l))
            .sum::<f64>();

        let delta_out: Vec<f64> = probs
            .iter()
            .zip(s.target.probs())
            .map(|(p, t)| (p - t) * scale)
            .collect();

        let last = views.len() - 1;
        let fan_in = input.len();
        let mut delta_hidden = if shape.is_linear() {
            Vec::new()
        } else {
            vec![0.0; fan_in]
        };
        {
            let out_weights = views[last].weights;
            let (gw, gb) = grads.layer_mut(last);
            for (row, &d) in delta_out.iter().enumerate() {
                gb[row] += d;
                if d == 0.0 {
                    continue;
                }
                let gw_row = &mut gw[row * fan_in..(row + 1) * fan_in];
                for (g, a) in gw_row.iter_mut().zip(input) {
                    *g += d * a;
                }
                if !shape.is_linear() {
                    let w_row = &out_weights[row * fan_in..(row + 1) * fan_in];
                    for (dh, w) in delta_hidden.iter_mut().zip(w_row) {
                        *dh += d * w;
                    }
                }
            }
        }
        if !shape.is_linear() {
            let d_in = shape.input_dim;
            let (gw, gb) = grads.layer_mut(0);
            for (j, (&dh, &a)) in delta_hidden.iter().zip(hidden.iter()).enumerate() {
                // ReLU gate: a > 0 iff pre-activation > 0.
                if a <= 0.0 || dh == 0.0 {
                    continue;
                }
                gb[j] += dh;
                for (g, x) in gw[j * d_in..(j + 1) * d_in].iter_mut().zip(&s.x) {
                    *g += dh * x;
                }
            }
        }
    }
    Ok((total * scale, grads))
}

/// Mean entropy of the batch targets.
pub fn mean_target_entropy(batch: &[Sample]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(|s| s.target.entropy()).sum::<f64>() / batch.len() as f64
}

/// Momentum buffers and step hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(shape: NetShape, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(OptimizerState {
            velocity: vec![0.0; shape.num_params()],
            learning_rate,
            momentum,
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `v <- momentum * v + g; theta <- theta - lr * v`, in place.
pub fn sgd_momentum_step(
    params: &mut ClassifierParams,
    state: &mut OptimizerState,
    grads: &ClassifierParams,
) {
    assert_eq!(params.shape, grads.shape, "gradient shape mismatch");
    assert_eq!(state.velocity.len(), params.values.len(), "optimizer shape mismatch");
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((theta, v), g) in params
        .values
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(&grads.values)
    {
        *v = mu * *v + g;
        *theta -= lr * *v;
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RMCK";

/// Writes `magic | u32 LE header length | header JSON | f64 LE parameters`.
///
/// The header must contain a `"shape"` entry; [`write_params`] inserts it.
pub fn write_params<W: Write>(
    mut writer: W,
    params: &ClassifierParams,
    header: &serde_json::Value,
) -> Result<()> {
    let mut header = header.clone();
    let map = header
        .as_object_mut()
        .ok_or_else(|| Error::Checkpoint("checkpoint header must be a JSON object".into()))?;
    map.insert(
        "shape".into(),
        serde_json::to_value(params.shape).expect("shape serializes"),
    );
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let io = |e| Error::io("writing checkpoint", e);
    writer.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    writer
        .write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(io)?;
    writer.write_all(&header_bytes).map_err(io)?;
    let mut blob = Vec::with_capacity(params.values.len() * 8);
    for v in &params.values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&blob).map_err(io)?;
    Ok(())
}

/// Inverse of [`write_params`].
pub fn read_params<R: Read>(mut reader: R) -> Result<(serde_json::Value, ClassifierParams)> {
    let io = |e| Error::io("reading checkpoint", e);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    reader.read_exact(&mut len).map_err(io)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    reader.read_exact(&mut header_bytes).map_err(io)?;
    let header: serde_json::Value =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::json("checkpoint header", e))?;
    let shape: NetShape = serde_json::from_value(
        header
            .get("shape")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("header has no shape".into()))?,
    )
    .map_err(|e| Error::json("checkpoint shape", e))?;
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob).map_err(io)?;
    if blob.len() != shape.num_params() * 8 {
        return Err(Error::Checkpoint(format!(
            "parameter blob has {} bytes, expected {}",
            blob.len(),
            shape.num_params() * 8
        )));
    }
    let values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, ClassifierParams::from_values(shape, values)?))
}
