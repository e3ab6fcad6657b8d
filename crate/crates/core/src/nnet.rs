//! Small fully-connected networks trained with backpropagation and Adam.
//!
//! All parameters live in one flat vector (layer by layer, weights row-major
//! `inputs x outputs`, then biases) so optimizers and gradient checks can
//! treat the network as a plain `theta`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NnetError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid network: {0}")]
    Architecture(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Softmax,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
            Activation::Softmax => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Linear),
            2 => Some(Activation::Softmax),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

impl DenseNet {
    /// Builds a zero-initialized net; `dims` has one more entry than
    /// `activations`.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self, NnetError> {
        if dims.len() != activations.len() + 1 || activations.is_empty() {
            return Err(NnetError::Architecture(format!(
                "{} dims for {} layers",
                dims.len(),
                activations.len()
            )));
        }
        let layers: Vec<LayerShape> = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation,
            })
            .collect();
        let n = layers.iter().map(LayerShape::param_count).sum();
        Self::from_parts(layers, vec![0.0; n])
    }

    /// Glorot-uniform weights `U(-sqrt(6/(fan_in+fan_out)), +...)`, zero biases.
    pub fn glorot(
        dims: &[usize],
        activations: &[Activation],
        seed: u64,
    ) -> Result<Self, NnetError> {
        let mut net = Self::zeros(dims, activations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for layer in &net.layers {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            let nw = layer.inputs * layer.outputs;
            for p in &mut net.params[offset..offset + nw] {
                *p = rng.random_range(-bound..bound);
            }
            offset += layer.param_count();
        }
        Ok(net)
    }

    pub fn from_parts(layers: Vec<LayerShape>, params: Vec<f64>) -> Result<Self, NnetError> {
        if layers.is_empty() {
            return Err(NnetError::Architecture("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(NnetError::Architecture(format!(
                    "layer {i} has a zero dimension"
                )));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(NnetError::Architecture(format!(
                    "layer {} outputs {} but layer {i} expects {}",
                    i - 1,
                    layers[i - 1].outputs,
                    l.inputs
                )));
            }
            if l.activation == Activation::Softmax && i + 1 != layers.len() {
                return Err(NnetError::Architecture(
                    "softmax is only allowed on the output layer".into(),
                ));
            }
        }
        let n: usize = layers.iter().map(LayerShape::param_count).sum();
        if params.len() != n {
            return Err(NnetError::Architecture(format!(
                "{} parameters for an architecture needing {n}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NnetError::Architecture("non-finite parameter".into()));
        }
        Ok(Self { layers, params })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, layer: usize) -> usize {
        self.layers[..layer]
            .iter()
            .map(LayerShape::param_count)
            .sum()
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let l = self.layers[layer];
        let off = self.offset(layer);
        ArrayView2::from_shape(
            (l.inputs, l.outputs),
            &self.params[off..off + l.inputs * l.outputs],
        )
        .expect("layer shape")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let l = self.layers[layer];
        let off = self.offset(layer) + l.inputs * l.outputs;
        ArrayView1::from(&self.params[off..off + l.outputs])
    }

    fn check_input(&self, batch: &ArrayView2<'_, f64>) -> Result<(), NnetError> {
        if batch.ncols() != self.input_dim() {
            return Err(NnetError::Dimension(format!(
                "batch has {} columns, net expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Outputs of every layer, in order; the last entry is the net output.
    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>, NnetError> {
        self.forward_layers(batch, self.layers.len())
    }

    /// Outputs of the first `count` layers.
    pub fn forward_layers(
        &self,
        batch: ArrayView2<'_, f64>,
        count: usize,
    ) -> Result<Vec<Array2<f64>>, NnetError> {
        self.check_input(&batch)?;
        let mut outs: Vec<Array2<f64>> = Vec::with_capacity(count);
        for i in 0..count.min(self.layers.len()) {
            let input = if i == 0 { batch } else { outs[i - 1].view() };
            let mut z = input.dot(&self.weights(i));
            z += &self.bias(i);
            activate(&mut z, self.layers[i].activation);
            outs.push(z);
        }
        Ok(outs)
    }

    pub fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnetError> {
        Ok(self.forward(batch)?.pop().expect("at least one layer"))
    }

    /// Mean loss over the batch.
    pub fn loss(
        &self,
        batch: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        loss: Loss,
    ) -> Result<f64, NnetError> {
        let out = self.predict(batch)?;
        check_targets(&out, &targets)?;
        Ok(loss_value(&out, &targets, loss))
    }

    /// Gradient of the mean batch loss with respect to `theta`.
    pub fn backward(
        &self,
        batch: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        loss: Loss,
    ) -> Result<Vec<f64>, NnetError> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(batch, targets, loss, &mut grad)?;
        Ok(grad)
    }

    /// Writes the gradient into `grad` and returns the batch loss.
    pub fn backward_into(
        &self,
        batch: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        loss: Loss,
        grad: &mut [f64],
    ) -> Result<f64, NnetError> {
        if grad.len() != self.params.len() {
            return Err(NnetError::Dimension(format!(
                "gradient buffer {} vs {} parameters",
                grad.len(),
                self.params.len()
            )));
        }
        let outs = self.forward(batch)?;
        let out = outs.last().expect("output");
        check_targets(out, &targets)?;
        let last = self.layers.len() - 1;
        let out_act = self.layers[last].activation;
        match (loss, out_act) {
            (Loss::CrossEntropy, Activation::Softmax) => {}
            (Loss::Mse, Activation::Relu | Activation::Linear) => {}
            _ => {
                return Err(NnetError::Architecture(format!(
                    "{loss:?} loss with {out_act:?} output is unsupported"
                )))
            }
        }
        let value = loss_value(out, &targets, loss);
        let n = batch.nrows() as f64;

        // Gradient with respect to the output layer's pre-activation.
        let mut delta = match loss {
            Loss::Mse => {
                let scale = 2.0 / (n * out.ncols() as f64);
                let mut d = (out - &targets) * scale;
                if out_act == Activation::Relu {
                    relu_mask(&mut d, out);
                }
                d
            }
            Loss::CrossEntropy => {
                let mass = targets.sum_axis(Axis(1)).insert_axis(Axis(1));
                (out * &mass - targets) / n
            }
        };

        for i in (0..=last).rev() {
            let l = self.layers[i];
            let off = self.offset(i);
            let nw = l.inputs * l.outputs;
            let input = if i == 0 { batch } else { outs[i - 1].view() };
            {
                let (gw, gb) = grad[off..off + nw + l.outputs].split_at_mut(nw);
                let mut gw =
                    ArrayViewMut2::from_shape((l.inputs, l.outputs), gw).expect("layer shape");
                general_mat_mul(1.0, &input.t(), &delta, 0.0, &mut gw);
                for (g, s) in gb.iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *g = s;
                }
            }
            if i > 0 {
                let mut prev = delta.dot(&self.weights(i).t());
                relu_mask(&mut prev, &outs[i - 1]);
                delta = prev;
            }
        }
        Ok(value)
    }
}

fn check_targets(out: &Array2<f64>, targets: &ArrayView2<'_, f64>) -> Result<(), NnetError> {
    if out.dim() != targets.dim() {
        return Err(NnetError::Dimension(format!(
            "targets {:?} vs outputs {:?}",
            targets.dim(),
            out.dim()
        )));
    }
    Ok(())
}

fn relu_mask(delta: &mut Array2<f64>, activations: &Array2<f64>) {
    delta.zip_mut_with(activations, |d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
}

fn activate(z: &mut Array2<f64>, act: Activation) {
    match act {
        Activation::Linear => {}
        Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        Activation::Softmax => {
            for mut row in z.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row /= sum;
            }
        }
    }
}

fn loss_value(out: &Array2<f64>, targets: &ArrayView2<'_, f64>, loss: Loss) -> f64 {
    let n = out.nrows() as f64;
    match loss {
        Loss::Mse => {
            let d = out.ncols() as f64;
            out.iter()
                .zip(targets.iter())
                .map(|(y, t)| (y - t).powi(2))
                .sum::<f64>()
                / (n * d)
        }
        Loss::CrossEntropy => {
            -out.iter()
                .zip(targets.iter())
                .filter(|(_, &t)| t != 0.0)
                .map(|(p, t)| t * p.max(f64::MIN_POSITIVE).ln())
                .sum::<f64>()
                / n
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<(), NnetError> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(NnetError::Dimension(format!(
                "adam state {} vs theta {} vs gradient {}",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NnetError::NonFiniteGradient {
                step: self.step + 1,
            });
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, &g), m), v) in theta
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    fn validate(&self) -> Result<(), NnetError> {
        if self.epochs == 0 {
            return Err(NnetError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnetError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(NnetError::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean of the batch losses seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch Adam training. The shuffle order is fixed by `config.seed`.
pub fn train(
    net: &mut DenseNet,
    data: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    loss: Loss,
    config: &TrainConfig,
) -> Result<TrainReport, NnetError> {
    config.validate()?;
    if data.nrows() == 0 {
        return Err(NnetError::Config("no training data".into()));
    }
    if data.nrows() != targets.nrows() {
        return Err(NnetError::Dimension(format!(
            "{} samples vs {} targets",
            data.nrows(),
            targets.nrows()
        )));
    }
    net.check_input(&data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(net.param_count(), config.lr);
    let mut grad = vec![0.0; net.param_count()];
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for (batch_no, idx) in order.chunks(config.batch_size).enumerate() {
            let xb = data.select(Axis(0), idx);
            let tb = targets.select(Axis(0), idx);
            let value = net.backward_into(xb.view(), tb.view(), loss, &mut grad)?;
            if !value.is_finite() {
                return Err(NnetError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    loss: value,
                });
            }
            adam.step(&mut net.params, &grad)?;
            total += value * idx.len() as f64;
        }
        let mean = total / data.nrows() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainReport { epoch_losses })
}

const MODEL_MAGIC: [u8; 4] = *b"ASDN";
pub const MODEL_VERSION: u32 = 1;

/// Serializes a net: magic, version, layer count, then per layer
/// `inputs, outputs, activation` (u32 LE) followed by row-major f64 LE
/// weights and biases.
pub fn write_model<W: Write>(mut w: W, net: &DenseNet) -> Result<(), NnetError> {
    w.write_all(&MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    let mut offset = 0;
    for l in &net.layers {
        for v in [l.inputs as u32, l.outputs as u32, l.activation.code()] {
            w.write_all(&v.to_le_bytes())?;
        }
        let n = l.param_count();
        let mut buf = Vec::with_capacity(8 * n);
        for p in &net.params[offset..offset + n] {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)?;
        offset += n;
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<DenseNet, NnetError> {
    let mut word = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> Result<u32, NnetError> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MODEL_MAGIC {
        return Err(NnetError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(NnetError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(count);
    let mut params = Vec::new();
    for _ in 0..count {
        let inputs = read_u32(&mut r)? as usize;
        let outputs = read_u32(&mut r)? as usize;
        let activation = Activation::from_code(read_u32(&mut r)?)
            .ok_or_else(|| NnetError::Format("unknown activation".into()))?;
        let layer = LayerShape {
            inputs,
            outputs,
            activation,
        };
        let mut buf = vec![0u8; 8 * layer.param_count()];
        r.read_exact(&mut buf)?;
        params.extend(
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        );
        layers.push(layer);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NnetError::Format("trailing bytes".into()));
    }
    DenseNet::from_parts(layers, params)
}

/// JSON companion of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format_version: u32,
    pub architecture: Vec<LayerShape>,
    pub loss: Loss,
    pub train_config: TrainConfig,
    pub epoch_losses: Vec<f64>,
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn save_model(
    dir: &Path,
    stem: &str,
    net: &DenseNet,
    sidecar: &ModelSidecar,
) -> Result<(), NnetError> {
    let mut bytes = Vec::new();
    write_model(&mut bytes, net)?;
    std::fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    let json =
        serde_json::to_string_pretty(sidecar).map_err(|e| NnetError::Format(e.to_string()))?;
    std::fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(())
}

pub fn load_model(dir: &Path, stem: &str) -> Result<(DenseNet, ModelSidecar), NnetError> {
    let bytes = std::fs::read(dir.join(format!("{stem}.bin")))?;
    let net = read_model(bytes.as_slice())?;
    let json = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
    let sidecar: ModelSidecar =
        serde_json::from_str(&json).map_err(|e| NnetError::Format(e.to_string()))?;
    if sidecar.architecture != net.layers {
        return Err(NnetError::Format(format!(
            "{stem}: sidecar architecture disagrees with model file"
        )));
    }
    Ok((net, sidecar))
}
