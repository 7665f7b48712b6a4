//! Fully connected classifier over a flat `f64` parameter vector.
//!
//! Every layer's weights are stored row-major (one row per output unit),
//! followed by that layer's biases. Keeping the whole network in one flat
//! vector is what lets binary masks address arbitrary parameter subsets
//! without caring about layer boundaries.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

/// Flat index ranges owned by one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpan {
    pub layer: usize,
    pub weights: Range<usize>,
    pub biases: Range<usize>,
}

/// Immutable description of how a flat parameter vector maps onto layers.
/// Shared by every client in a run, hence the `Arc` constructor.
#[derive(Debug, PartialEq, Eq)]
pub struct Layout {
    arch: Vec<LayerSpec>,
    spans: Vec<LayerSpan>,
    dim: usize,
}

impl Layout {
    pub fn new(arch: Vec<LayerSpec>) -> Result<Arc<Layout>> {
        if arch.is_empty() {
            return Err(FedError::Config("network needs at least one layer".into()));
        }
        for (l, spec) in arch.iter().enumerate() {
            if spec.input_dim == 0 || spec.output_dim == 0 {
                return Err(FedError::Config(format!("layer {l} has a zero dimension")));
            }
            if l + 1 < arch.len() && spec.output_dim != arch[l + 1].input_dim {
                return Err(FedError::Config(format!(
                    "layer {l} outputs {} values but layer {} expects {}",
                    spec.output_dim,
                    l + 1,
                    arch[l + 1].input_dim
                )));
            }
        }
        if arch.last().unwrap().activation != Activation::Identity {
            return Err(FedError::Config(
                "output layer must use the identity activation so it produces raw logits".into(),
            ));
        }
        let mut spans = Vec::with_capacity(arch.len());
        let mut offset = 0;
        for (l, spec) in arch.iter().enumerate() {
            let w = offset..offset + spec.input_dim * spec.output_dim;
            let b = w.end..w.end + spec.output_dim;
            offset = b.end;
            spans.push(LayerSpan {
                layer: l,
                weights: w,
                biases: b,
            });
        }
        Ok(Arc::new(Layout {
            arch,
            spans,
            dim: offset,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arch(&self) -> &[LayerSpec] {
        &self.arch
    }

    pub fn spans(&self) -> &[LayerSpan] {
        &self.spans
    }

    pub fn layer_count(&self) -> usize {
        self.arch.len()
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0].input_dim
    }

    /// Number of classes, i.e. the width of the logit layer.
    pub fn class_count(&self) -> usize {
        self.arch.last().unwrap().output_dim
    }
}

/// Flat parameter vector tied to a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

/// One layer's parameters pulled out of the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.dim()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            layout.dim(),
            "value length does not match layout"
        );
        ParamVector { values, layout }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Split into per-layer weight and bias blocks.
    pub fn split_layers(&self) -> Vec<LayerParams> {
        self.layout
            .spans
            .iter()
            .map(|span| LayerParams {
                weights: self.values[span.weights.clone()].to_vec(),
                biases: self.values[span.biases.clone()].to_vec(),
            })
            .collect()
    }

    /// Rebuild a flat vector from per-layer blocks. Inverse of `split_layers`.
    pub fn from_layers(layout: Arc<Layout>, layers: &[LayerParams]) -> Result<ParamVector> {
        if layers.len() != layout.layer_count() {
            return Err(FedError::Input(format!(
                "expected {} layers, got {}",
                layout.layer_count(),
                layers.len()
            )));
        }
        let mut values = vec![0.0; layout.dim()];
        for (span, layer) in layout.spans.iter().zip(layers) {
            if layer.weights.len() != span.weights.len() || layer.biases.len() != span.biases.len()
            {
                return Err(FedError::Input(format!(
                    "layer {} blocks have the wrong size",
                    span.layer
                )));
            }
            values[span.weights.clone()].copy_from_slice(&layer.weights);
            values[span.biases.clone()].copy_from_slice(&layer.biases);
        }
        Ok(ParamVector { values, layout })
    }
}

/// A labeled minibatch. Inputs are stored row-per-sample in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Batch> {
        if input_dim == 0 {
            return Err(FedError::Input(
                "batch input dimension must be positive".into(),
            ));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(FedError::Input(format!(
                "batch holds {} values, expected {} samples x {} features",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        Ok(Batch {
            inputs,
            input_dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// All rows, flattened row-major.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Deterministic initialization: weights uniform in `[-1/sqrt(fan_in),
/// 1/sqrt(fan_in))` per layer, biases zero. The same seed always yields the
/// same vector.
pub fn init_params(arch: &[LayerSpec], seed: u64) -> Result<ParamVector> {
    let layout = Layout::new(arch.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.dim()];
    for span in layout.spans() {
        let bound = 1.0 / (layout.arch()[span.layer].input_dim as f64).sqrt();
        for i in span.weights.clone() {
            values[i] = rng.gen_range(-bound..bound);
        }
        // Biases stay zero.
    }
    Ok(ParamVector { values, layout })
}

fn check_batch(params: &ParamVector, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(FedError::Input("batch is empty".into()));
    }
    if batch.input_dim() != params.layout.input_dim() {
        return Err(FedError::Input(format!(
            "batch has {} features but the network expects {}",
            batch.input_dim(),
            params.layout.input_dim()
        )));
    }
    let classes = params.layout.class_count();
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= classes) {
        return Err(FedError::Input(format!(
            "label {bad} is out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Run one sample through the network. `acts[l]` receives layer l's output.
fn forward_sample(params: &ParamVector, x: &[f64], acts: &mut [Vec<f64>]) {
    let layout = &params.layout;
    for (l, span) in layout.spans.iter().enumerate() {
        let spec = layout.arch[l];
        let w = &params.values[span.weights.clone()];
        let b = &params.values[span.biases.clone()];
        let (before, rest) = acts.split_at_mut(l);
        let out = &mut rest[0];
        let input: &[f64] = if l == 0 { x } else { &before[l - 1] };
        for o in 0..spec.output_dim {
            let row = &w[o * spec.input_dim..(o + 1) * spec.input_dim];
            let mut z = b[o];
            for (wi, xi) in row.iter().zip(input) {
                z += wi * xi;
            }
            out[o] = match spec.activation {
                Activation::Relu => z.max(0.0),
                Activation::Identity => z,
            };
        }
    }
}

fn alloc_acts(layout: &Layout) -> Vec<Vec<f64>> {
    layout
        .arch
        .iter()
        .map(|spec| vec![0.0; spec.output_dim])
        .collect()
}

/// Numerically stable log(sum(exp(z))).
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy of the batch.
pub fn forward_loss(params: &ParamVector, batch: &Batch) -> Result<f64> {
    check_batch(params, batch)?;
    let mut acts = alloc_acts(&params.layout);
    let mut total = 0.0;
    for n in 0..batch.len() {
        forward_sample(params, batch.input(n), &mut acts);
        let logits = acts.last().unwrap();
        total += log_sum_exp(logits) - logits[batch.label(n)];
    }
    Ok(total / batch.len() as f64)
}

/// Logits for a single input.
pub fn logits(params: &ParamVector, x: &[f64]) -> Vec<f64> {
    assert_eq!(
        x.len(),
        params.layout.input_dim(),
        "input dimension mismatch"
    );
    let mut acts = alloc_acts(&params.layout);
    forward_sample(params, x, &mut acts);
    acts.pop().unwrap()
}

/// Predicted class for one input: argmax over logits, ties resolved toward
/// the lowest class index.
pub fn predict(params: &ParamVector, x: &[f64]) -> usize {
    let z = logits(params, x);
    let mut best = 0;
    for (j, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = j;
        }
    }
    best
}

/// Exact gradient of `forward_loss` with respect to every parameter,
/// computed by backpropagation. Returns a vector with the same layout.
pub fn gradient(params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    check_batch(params, batch)?;
    let layout = Arc::clone(&params.layout);
    let n_layers = layout.layer_count();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; layout.dim()];
    let mut acts = alloc_acts(&layout);
    let width = layout
        .arch
        .iter()
        .map(|s| s.output_dim.max(s.input_dim))
        .max()
        .unwrap();
    let mut delta = vec![0.0; width];
    let mut delta_next = vec![0.0; width];

    for n in 0..batch.len() {
        let x = batch.input(n);
        forward_sample(params, x, &mut acts);

        // Softmax cross-entropy gradient at the logits.
        let z = acts.last().unwrap();
        let lse = log_sum_exp(z);
        let classes = layout.class_count();
        for j in 0..classes {
            delta[j] = ((z[j] - lse).exp() - if j == batch.label(n) { 1.0 } else { 0.0 }) * scale;
        }

        for l in (0..n_layers).rev() {
            let spec = layout.arch[l];
            let span = &layout.spans[l];
            let input: &[f64] = if l == 0 { x } else { &acts[l - 1] };
            let gw = span.weights.start;
            let gb = span.biases.start;
            for o in 0..spec.output_dim {
                let d = delta[o];
                grad[gb + o] += d;
                let row = gw + o * spec.input_dim;
                for (i, &xi) in input.iter().enumerate() {
                    grad[row + i] += d * xi;
                }
            }
            if l > 0 {
                let w = &params.values[span.weights.clone()];
                let prev_spec = layout.arch[l - 1];
                for i in 0..spec.input_dim {
                    let mut back = 0.0;
                    for o in 0..spec.output_dim {
                        back += w[o * spec.input_dim + i] * delta[o];
                    }
                    // For relu the stored activation already encodes the
                    // derivative: positive output means the unit was active.
                    delta_next[i] = match prev_spec.activation {
                        Activation::Relu => {
                            if acts[l - 1][i] > 0.0 {
                                back
                            } else {
                                0.0
                            }
                        }
                        Activation::Identity => back,
                    };
                }
                std::mem::swap(&mut delta, &mut delta_next);
            }
        }
    }
    Ok(ParamVector {
        values: grad,
        layout,
    })
}

/// In-place SGD step restricted to the active positions.
pub(crate) fn masked_step_in_place(values: &mut [f64], grad: &[f64], active: &BinaryMask, lr: f64) {
    assert_eq!(
        values.len(),
        grad.len(),
        "gradient length mismatch in masked step"
    );
    assert_eq!(
        values.len(),
        active.len(),
        "mask length mismatch in masked step"
    );
    for (i, bit) in active.bits().iter().enumerate() {
        if *bit {
            values[i] -= lr * grad[i];
        }
    }
}

/// Pure SGD step on the active block: inactive positions are returned
/// bit-for-bit unchanged.
pub fn masked_sgd_step(
    params: &ParamVector,
    grad: &ParamVector,
    active: &BinaryMask,
    lr: f64,
) -> ParamVector {
    let mut out = params.clone();
    masked_step_in_place(&mut out.values, &grad.values, active, lr);
    out
}
