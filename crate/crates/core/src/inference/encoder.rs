//! Amortized encoder: `log(1 + counts)` → hidden layers (affine, batch norm,
//! ReLU) → mean and log standard deviation of the log topic intensities.

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each training step.
pub const BN_MOMENTUM: f64 = 0.99;
pub const LOG_SIGMA_CLAMP: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// Batch statistics (the caller folds them into the running averages).
    Train,
    /// Running statistics; each document is encoded independently.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn glorot(out: usize, inp: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        DenseLayer {
            weight: Matrix::from_fn(out, inp, |_, _| (2.0 * rng.uniform() - 1.0) * limit),
            bias: vec![0.0; out],
        }
    }

    fn zeros_like(&self) -> Self {
        DenseLayer {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip((0..self.weight.rows()).map(|i| self.weight.row(i)).zip(&self.bias)) {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    fn apply_sparse(&self, input: &[(usize, f64)], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.weight.row(i);
            *o = self.bias[i] + input.iter().map(|&(v, x)| row[v] * x).sum::<f64>();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub dense: DenseLayer,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub hidden: Vec<HiddenLayer>,
    pub mu_head: DenseLayer,
    pub log_sigma_head: DenseLayer,
}

/// Per-layer batch statistics `(mean, biased variance, batch size)`.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub batch_size: usize,
}

/// Values kept from the forward pass for backpropagation.
pub(crate) struct ForwardCache {
    inputs: Vec<Vec<(usize, f64)>>,
    /// Per hidden layer: normalized pre-activations (B × H) and 1/√(var+ε).
    normalized: Vec<(Matrix, Vec<f64>)>,
    /// Per hidden layer: ReLU outputs (B × H).
    activations: Vec<Matrix>,
    /// Whether each log-σ output was inside the clamp range.
    ls_active: Matrix,
    mode: EncodeMode,
}

pub struct EncoderOutput {
    /// `B × K`.
    pub mu: Matrix,
    /// `B × K`, clamped to `[−5, 5]`.
    pub log_sigma: Matrix,
    pub stats: BatchStats,
}

pub(crate) fn input_features(doc: &Document) -> Vec<(usize, f64)> {
    doc.counts
        .iter()
        .map(|&(v, c)| (v, (c as f64).ln_1p()))
        .collect()
}

impl Encoder {
    pub fn new(
        vocab_size: usize,
        num_topics: usize,
        hidden_units: usize,
        hidden_layers: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mut hidden = Vec::with_capacity(hidden_layers);
        let mut fan_in = vocab_size;
        for _ in 0..hidden_layers {
            hidden.push(HiddenLayer {
                dense: DenseLayer::glorot(hidden_units, fan_in, rng),
                running_mean: vec![0.0; hidden_units],
                running_var: vec![1.0; hidden_units],
            });
            fan_in = hidden_units;
        }
        Encoder {
            hidden,
            mu_head: DenseLayer::glorot(num_topics, fan_in, rng),
            log_sigma_head: DenseLayer::glorot(num_topics, fan_in, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.hidden[0].dense.weight.cols()
    }

    pub fn num_topics(&self) -> usize {
        self.mu_head.weight.rows()
    }

    /// Same shapes, all trainable values zero; used as a gradient container.
    pub fn zeros_like(&self) -> Encoder {
        Encoder {
            hidden: self
                .hidden
                .iter()
                .map(|h| HiddenLayer {
                    dense: h.dense.zeros_like(),
                    running_mean: vec![0.0; h.running_mean.len()],
                    running_var: vec![0.0; h.running_var.len()],
                })
                .collect(),
            mu_head: self.mu_head.zeros_like(),
            log_sigma_head: self.log_sigma_head.zeros_like(),
        }
    }

    /// Trainable blocks in a fixed order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for h in &self.hidden {
            out.push(h.dense.weight.as_slice());
            out.push(&h.dense.bias);
        }
        for head in [&self.mu_head, &self.log_sigma_head] {
            out.push(head.weight.as_slice());
            out.push(&head.bias);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for h in &mut self.hidden {
            out.push(h.dense.weight.as_mut_slice());
            out.push(&mut h.dense.bias);
        }
        for head in [&mut self.mu_head, &mut self.log_sigma_head] {
            out.push(head.weight.as_mut_slice());
            out.push(&mut head.bias);
        }
        out
    }

    /// Fold batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let n = stats.batch_size as f64;
        for (layer, (mean, var)) in self.hidden.iter_mut().zip(&stats.layers) {
            for i in 0..mean.len() {
                let unbiased = if n > 1.0 { var[i] * n / (n - 1.0) } else { var[i] };
                layer.running_mean[i] = BN_MOMENTUM * layer.running_mean[i] + (1.0 - BN_MOMENTUM) * mean[i];
                layer.running_var[i] = BN_MOMENTUM * layer.running_var[i] + (1.0 - BN_MOMENTUM) * unbiased;
            }
        }
    }

    fn check_vocab(&self, docs: &[&Document]) -> Result<()> {
        let v = self.vocab_size();
        for d in docs {
            if let Some(&(id, _)) = d.counts.last() {
                if id >= v {
                    return Err(Error::ShapeMismatch(format!(
                        "document '{}' has term id {id}, encoder expects V = {v}",
                        d.raw_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn forward(
        &self,
        docs: &[&Document],
        mode: EncodeMode,
    ) -> Result<(EncoderOutput, ForwardCache)> {
        self.check_vocab(docs)?;
        let b = docs.len();
        let inputs: Vec<Vec<(usize, f64)>> = docs.iter().map(|d| input_features(d)).collect();
        let mut normalized = Vec::with_capacity(self.hidden.len());
        let mut activations: Vec<Matrix> = Vec::with_capacity(self.hidden.len());
        let mut stats = Vec::with_capacity(self.hidden.len());

        for (l, layer) in self.hidden.iter().enumerate() {
            let h = layer.dense.bias.len();
            let mut pre = Matrix::zeros(b, h);
            for i in 0..b {
                match l {
                    0 => layer.dense.apply_sparse(&inputs[i], pre.row_mut(i)),
                    _ => layer.dense.apply(activations[l - 1].row(i), pre.row_mut(i)),
                }
            }
            let (mean, var) = match mode {
                EncodeMode::Train => column_moments(&pre),
                EncodeMode::Eval => (layer.running_mean.clone(), layer.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut act = Matrix::zeros(b, h);
            for i in 0..b {
                let row = pre.row_mut(i);
                for j in 0..h {
                    row[j] = (row[j] - mean[j]) * inv_std[j];
                }
                for (a, &x) in act.row_mut(i).iter_mut().zip(row.iter()) {
                    *a = x.max(0.0);
                }
            }
            normalized.push((pre, inv_std));
            activations.push(act);
            stats.push((mean, var));
        }

        let last = activations.last().expect("encoder has at least one hidden layer");
        let k = self.num_topics();
        let mut mu = Matrix::zeros(b, k);
        let mut log_sigma = Matrix::zeros(b, k);
        let mut ls_active = Matrix::zeros(b, k);
        for i in 0..b {
            self.mu_head.apply(last.row(i), mu.row_mut(i));
            self.log_sigma_head.apply(last.row(i), log_sigma.row_mut(i));
            for j in 0..k {
                let raw = log_sigma.get(i, j);
                let inside = raw.abs() < LOG_SIGMA_CLAMP;
                ls_active.set(i, j, if inside { 1.0 } else { 0.0 });
                log_sigma.set(i, j, raw.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP));
            }
        }
        Ok((
            EncoderOutput {
                mu,
                log_sigma,
                stats: BatchStats {
                    layers: stats,
                    batch_size: b,
                },
            },
            ForwardCache {
                inputs,
                normalized,
                activations,
                ls_active,
                mode,
            },
        ))
    }

    /// Backpropagate `d_mu`, `d_log_sigma` (both `B × K`, gradients with
    /// respect to the clamped outputs) into `grad`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        d_mu: &Matrix,
        d_log_sigma: &Matrix,
        grad: &mut Encoder,
    ) {
        let b = d_mu.rows();
        let k = self.num_topics();
        let last = cache.activations.last().unwrap();
        let h_last = last.cols();
        let mut d_act = Matrix::zeros(b, h_last);
        for i in 0..b {
            let h = last.row(i);
            for j in 0..k {
                let gm = d_mu.get(i, j);
                let gl = d_log_sigma.get(i, j) * cache.ls_active.get(i, j);
                grad.mu_head.bias[j] += gm;
                grad.log_sigma_head.bias[j] += gl;
                let wm = self.mu_head.weight.row(j);
                let wl = self.log_sigma_head.weight.row(j);
                {
                    let row = grad.mu_head.weight.row_mut(j);
                    for (g, &x) in row.iter_mut().zip(h) {
                        *g += gm * x;
                    }
                }
                {
                    let row = grad.log_sigma_head.weight.row_mut(j);
                    for (g, &x) in row.iter_mut().zip(h) {
                        *g += gl * x;
                    }
                }
                let da = d_act.row_mut(i);
                for t in 0..h_last {
                    da[t] += gm * wm[t] + gl * wl[t];
                }
            }
        }

        for l in (0..self.hidden.len()).rev() {
            let (xhat, inv_std) = &cache.normalized[l];
            let width = xhat.cols();
            // Through the ReLU.
            let mut d_xhat = Matrix::zeros(b, width);
            for i in 0..b {
                for j in 0..width {
                    if xhat.get(i, j) > 0.0 {
                        d_xhat.set(i, j, d_act.get(i, j));
                    }
                }
            }
            // Through the normalization.
            let mut d_pre = Matrix::zeros(b, width);
            match cache.mode {
                EncodeMode::Train => {
                    let n = b as f64;
                    for j in 0..width {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in 0..b {
                            s1 += d_xhat.get(i, j);
                            s2 += d_xhat.get(i, j) * xhat.get(i, j);
                        }
                        for i in 0..b {
                            let v = inv_std[j] / n * (n * d_xhat.get(i, j) - s1 - xhat.get(i, j) * s2);
                            d_pre.set(i, j, v);
                        }
                    }
                }
                EncodeMode::Eval => {
                    for i in 0..b {
                        for j in 0..width {
                            d_pre.set(i, j, d_xhat.get(i, j) * inv_std[j]);
                        }
                    }
                }
            }
            let layer = &self.hidden[l].dense;
            let g = &mut grad.hidden[l].dense;
            for i in 0..b {
                for j in 0..width {
                    let dp = d_pre.get(i, j);
                    if dp == 0.0 {
                        continue;
                    }
                    g.bias[j] += dp;
                    let row = g.weight.row_mut(j);
                    if l == 0 {
                        for &(v, x) in &cache.inputs[i] {
                            row[v] += dp * x;
                        }
                    } else {
                        for (gw, &x) in row.iter_mut().zip(cache.activations[l - 1].row(i)) {
                            *gw += dp * x;
                        }
                    }
                }
            }
            if l > 0 {
                let prev = cache.activations[l - 1].cols();
                let mut next = Matrix::zeros(b, prev);
                for i in 0..b {
                    let out = next.row_mut(i);
                    for j in 0..width {
                        let dp = d_pre.get(i, j);
                        if dp == 0.0 {
                            continue;
                        }
                        for (o, &w) in out.iter_mut().zip(layer.weight.row(j)) {
                            *o += dp * w;
                        }
                    }
                }
                d_act = next;
            }
        }
    }

    /// Encode a batch of documents.
    pub fn encode_batch(&self, docs: &[&Document], mode: EncodeMode) -> Result<EncoderOutput> {
        self.forward(docs, mode).map(|(out, _)| out)
    }

    /// Encode one document with running statistics: `(μ_θ, log σ_θ)`.
    pub fn encode(&self, doc: &Document) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.encode_batch(&[doc], EncodeMode::Eval)?;
        Ok((out.mu.row(0).to_vec(), out.log_sigma.row(0).to_vec()))
    }
}

fn column_moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (b, h) = m.shape();
    let n = b as f64;
    let mut mean = vec![0.0; h];
    for i in 0..b {
        for (acc, &x) in mean.iter_mut().zip(m.row(i)) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= n);
    let mut var = vec![0.0; h];
    for i in 0..b {
        for ((acc, &x), &mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
            *acc += (x - mu) * (x - mu);
        }
    }
    var.iter_mut().for_each(|x| *x /= n);
    (mean, var)
}
