//! Feed-forward frame classifier: affine layers, pnorm/relu/identity hidden
//! activations, softmax cross-entropy and plain SGD with per-layer freezing.

pub(crate) mod train;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use train::{evaluate, sgd_epoch, train_si, EvalMetrics, LrSchedule, SiTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Activation {
    /// Groups of `group_size` consecutive units reduced by their p-norm.
    Pnorm { p: f64, group_size: usize },
    Relu,
    Identity,
}

impl Activation {
    pub fn output_width(&self, input: usize) -> Result<usize> {
        match *self {
            Activation::Pnorm { p, group_size } => {
                if group_size == 0 || !(p >= 1.0) {
                    return Err(Error::Argument(format!(
                        "pnorm needs p >= 1 and group_size >= 1 (got p = {p}, group = {group_size})"
                    )));
                }
                if !input.is_multiple_of(group_size) {
                    return Err(Error::Argument(format!(
                        "pnorm group size {group_size} does not divide layer width {input}"
                    )));
                }
                Ok(input / group_size)
            }
            Activation::Relu | Activation::Identity => Ok(input),
        }
    }

    /// Applies the activation row-wise to `z` (`B x width`).
    pub fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match *self {
            Activation::Identity => z.clone(),
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Pnorm { p, group_size } => {
                let (b, w) = z.shape();
                DMatrix::from_fn(b, w / group_size, |r, g| {
                    pnorm(p, (0..group_size).map(|i| z[(r, g * group_size + i)]))
                })
            }
        }
    }

    /// Back-propagates `upstream` (gradient w.r.t. the activation output) to
    /// the pre-activation `z`. `out` is `apply(z)`.
    fn backward(&self, z: &DMatrix<f64>, out: &DMatrix<f64>, upstream: &DMatrix<f64>) -> DMatrix<f64> {
        match *self {
            Activation::Identity => upstream.clone(),
            Activation::Relu => z.zip_map(upstream, |v, g| if v > 0.0 { g } else { 0.0 }),
            Activation::Pnorm { p, group_size } => {
                let (b, w) = z.shape();
                DMatrix::from_fn(b, w, |r, c| {
                    let g = c / group_size;
                    let y = out[(r, g)];
                    if y == 0.0 {
                        return 0.0;
                    }
                    let v = z[(r, c)];
                    let local = if p == 2.0 {
                        v / y
                    } else {
                        v.signum() * v.abs().powf(p - 1.0) / y.powf(p - 1.0)
                    };
                    upstream[(r, g)] * local
                })
            }
        }
    }
}

/// `(sum |z_i|^p)^(1/p)`.
pub fn pnorm(p: f64, group: impl Iterator<Item = f64>) -> f64 {
    if p == 2.0 {
        group.map(|v| v * v).sum::<f64>().sqrt()
    } else {
        group.map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `(in, out)` per affine layer, bottom to top.
    pub layer_dims: Vec<(usize, usize)>,
    pub activation: Activation,
    pub n_classes: usize,
}

impl NetworkSpec {
    /// `n_layers` affine layers with hidden pre-activation width `hidden_width`.
    pub fn stacked(
        input_dim: usize,
        n_layers: usize,
        hidden_width: usize,
        activation: Activation,
        n_classes: usize,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        let hidden_out = activation.output_width(hidden_width)?;
        let mut dims = Vec::with_capacity(n_layers);
        let mut width = input_dim;
        for l in 0..n_layers {
            let out = if l + 1 == n_layers { n_classes } else { hidden_width };
            dims.push((width, out));
            width = hidden_out;
        }
        let spec = NetworkSpec {
            layer_dims: dims,
            activation,
            n_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layer_dims.last() else {
            return Err(Error::Argument("network needs at least one layer".into()));
        };
        if self.n_classes == 0 || last.1 != self.n_classes {
            return Err(Error::Argument(format!(
                "final layer width {} must equal n_classes {}",
                last.1, self.n_classes
            )));
        }
        for (l, &(i, o)) in self.layer_dims.iter().enumerate() {
            if i == 0 || o == 0 {
                return Err(Error::Argument(format!("layer {l} has a zero dimension")));
            }
        }
        for (l, w) in self.layer_dims.windows(2).enumerate() {
            let after = self.activation.output_width(w[0].1)?;
            if after != w[1].0 {
                return Err(Error::Argument(format!(
                    "layer {} outputs {after} after activation but layer {} expects {}",
                    l,
                    l + 1,
                    w[1].0
                )));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0].0
    }
}

/// Affine transform of one layer: `z = W a + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LayerParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        LayerParams {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.weight.ncols(), self.weight.nrows())
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerParams>,
}

impl Network {
    pub fn new(spec: NetworkSpec, layers: Vec<LayerParams>) -> Result<Self> {
        spec.validate()?;
        check_layers(&spec, layers.iter())?;
        Ok(Network { spec, layers })
    }

    /// Weights uniform in `+-sqrt(6 / (in + out))`, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_dims
            .iter()
            .map(|&(i, o)| {
                let bound = (6.0 / (i + o) as f64).sqrt();
                LayerParams {
                    weight: DMatrix::from_fn(o, i, |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(o),
                }
            })
            .collect();
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerParams {
        &self.layers[l]
    }

    pub fn into_layers(self) -> Vec<LayerParams> {
        self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub(crate) fn layer_refs(&self) -> Vec<&LayerParams> {
        self.layers.iter().collect()
    }

    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        forward_layers(&self.spec, &self.layer_refs(), batch)
    }

    /// Logits only.
    pub fn predict(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(batch)?.0)
    }

    /// Mean cross-entropy over the batch and its gradient; layers with
    /// `freeze[l] == true` get exactly-zero gradients.
    pub fn loss_and_grad(
        &self,
        batch: &DMatrix<f64>,
        targets: &[u32],
        freeze: &[bool],
    ) -> Result<(f64, Gradients)> {
        let b = batch.nrows();
        if b == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        let (sum, grads) = loss_grad_layers(&self.spec, &self.layer_refs(), batch, targets, freeze, 1.0 / b as f64)?;
        Ok((sum / b as f64, grads))
    }

    /// `theta <- theta - lr * g` on every layer not frozen in `grads`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Argument("gradient layer count mismatch".into()));
        }
        for (l, (p, g)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            if grads.frozen[l] {
                continue;
            }
            if p.weight.shape() != g.weight.shape() || p.bias.len() != g.bias.len() {
                return Err(Error::Argument(format!("gradient shape mismatch at layer {l}")));
            }
            apply_update(p, g, lr);
        }
        Ok(())
    }
}

pub(crate) fn apply_update(params: &mut LayerParams, grad: &LayerParams, lr: f64) {
    params.weight.zip_apply(&grad.weight, |w, g| *w -= lr * g);
    params.bias.zip_apply(&grad.bias, |w, g| *w -= lr * g);
}

pub(crate) fn check_layers<'a>(
    spec: &NetworkSpec,
    layers: impl ExactSizeIterator<Item = &'a LayerParams>,
) -> Result<()> {
    if layers.len() != spec.n_layers() {
        return Err(Error::Validation(format!(
            "{} layers supplied for a {}-layer spec",
            layers.len(),
            spec.n_layers()
        )));
    }
    for (l, (p, &(i, o))) in layers.zip(&spec.layer_dims).enumerate() {
        if p.weight.shape() != (o, i) || p.bias.len() != o {
            return Err(Error::Validation(format!(
                "layer {l} has shape {:?}, spec says {o}x{i}",
                p.weight.shape()
            )));
        }
        if !p.is_finite() {
            return Err(Error::Validation(format!("layer {l} has non-finite parameters")));
        }
    }
    Ok(())
}

/// Per-layer gradients with the freeze mask that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
    pub frozen: Vec<bool>,
}

impl Gradients {
    pub fn zeros(spec: &NetworkSpec, frozen: &[bool]) -> Self {
        Gradients {
            layers: spec.layer_dims.iter().map(|&(i, o)| LayerParams::zeros(i, o)).collect(),
            frozen: frozen.to_vec(),
        }
    }

    /// Elementwise `self += other` on unfrozen layers.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (l, (a, b)) in self.layers.iter_mut().zip(&other.layers).enumerate() {
            if self.frozen[l] {
                continue;
            }
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

/// Activations saved by the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`B x in`).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<DMatrix<f64>>,
}

fn affine(p: &LayerParams, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = a * p.weight.transpose();
    for mut row in z.row_iter_mut() {
        row += p.bias.transpose();
    }
    z
}

pub(crate) fn forward_layers(
    spec: &NetworkSpec,
    layers: &[&LayerParams],
    batch: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, ForwardCache)> {
    if batch.ncols() != spec.input_dim() {
        return Err(Error::Argument(format!(
            "batch width {} does not match network input {}",
            batch.ncols(),
            spec.input_dim()
        )));
    }
    let n = layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n.saturating_sub(1));
    let mut a = batch.clone();
    for (l, p) in layers.iter().enumerate() {
        let z = affine(p, &a);
        inputs.push(a);
        if l + 1 == n {
            return Ok((z, ForwardCache { inputs, pre }));
        }
        a = spec.activation.apply(&z);
        pre.push(z);
    }
    unreachable!("networks have at least one layer")
}

/// Summed cross-entropy of the batch, and gradients of `scale * sum`.
pub(crate) fn loss_grad_layers(
    spec: &NetworkSpec,
    layers: &[&LayerParams],
    batch: &DMatrix<f64>,
    targets: &[u32],
    freeze: &[bool],
    scale: f64,
) -> Result<(f64, Gradients)> {
    let n = layers.len();
    if freeze.len() != n {
        return Err(Error::Argument(format!(
            "freeze mask has {} entries for {n} layers",
            freeze.len()
        )));
    }
    if targets.len() != batch.nrows() {
        return Err(Error::Argument(format!(
            "{} targets for {} frames",
            targets.len(),
            batch.nrows()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= spec.n_classes) {
        return Err(Error::Argument(format!(
            "target {t} outside [0, {})",
            spec.n_classes
        )));
    }
    let (logits, cache) = forward_layers(spec, layers, batch)?;
    let (loss_sum, mut delta) = softmax_xent(&logits, targets);
    delta *= scale;

    let mut grads = Gradients::zeros(spec, freeze);
    let lowest_trainable = freeze.iter().position(|f| !f);
    let Some(lowest) = lowest_trainable else {
        return Ok((loss_sum, grads));
    };
    for l in (lowest..n).rev() {
        if !freeze[l] {
            grads.layers[l].weight = delta.transpose() * &cache.inputs[l];
            grads.layers[l].bias = delta.row_sum().transpose();
        }
        if l > lowest {
            let upstream = &delta * &layers[l].weight;
            let z = &cache.pre[l - 1];
            delta = spec.activation.backward(z, &cache.inputs[l], &upstream);
        }
    }
    Ok((loss_sum, grads))
}

/// Summed cross-entropy and `softmax - onehot` for each row.
fn softmax_xent(logits: &DMatrix<f64>, targets: &[u32]) -> (f64, DMatrix<f64>) {
    let mut delta = logits.clone();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t as usize];
        for c in 0..logits.ncols() {
            delta[(r, c)] = (logits[(r, c)] - lse).exp();
        }
        delta[(r, t as usize)] -= 1.0;
    }
    (loss, delta)
}

/// Per-frame cross-entropy and argmax correctness for a logits batch.
pub(crate) fn frame_scores(logits: &DMatrix<f64>, targets: &[u32]) -> (f64, usize) {
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t as usize];
        let mut arg = 0;
        for c in 1..row.len() {
            if row[c] > row[arg] {
                arg = c;
            }
        }
        correct += usize::from(arg == t as usize);
    }
    (loss, correct)
}
