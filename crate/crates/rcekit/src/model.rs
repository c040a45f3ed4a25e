//! The classifier: layer stacks, the three training objectives (CE,
//! label-smoothed CE, RCE), the reverse-logit prediction rule, and the
//! deterministic training loop.
//!
//! A model trained with RCE is a *reverse* classifier: it is optimized to
//! put near-zero probability on the true class and uniform probability on
//! the rest, so its predictions are read from `softmax(-Z_pre)`. The
//! objective tag is stored in the checkpoint and every prediction path in
//! the crate consults it, so callers never need to remember which rule
//! applies.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::optim::{LrSchedule, OptimizerState};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{checkpoint, ops, Tensor};
use crate::util::stage_rng;

/// Probability floor applied inside every log; RCE intentionally drives the
/// true-class probability toward zero, so logs must be bounded.
pub const PROB_FLOOR: f64 = 1e-12;

/// Training objective; decides both the loss and the prediction rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ce,
    Rce,
    LabelSmooth { lambda: f64 },
}

impl Objective {
    /// Whether predictions negate the logits before the softmax.
    pub fn reversed(&self) -> bool {
        matches!(self, Objective::Rce)
    }
}

/// Named architectures; all end in a dense hidden layer Z followed by the
/// softmax layer `W_s Z + b_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchId {
    /// conv16-pool-conv32-pool-dense64-denseL
    #[serde(rename = "desk-cnn")]
    DeskCnn,
    /// Three conv blocks; the black-box target model.
    #[serde(rename = "desk-cnn-deep")]
    DeskCnnDeep,
    /// Small MLP for synthetic data.
    #[serde(rename = "desk-mlp")]
    DeskMlp,
    /// Single dense layer; Z is the flattened input.
    #[serde(rename = "linear")]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out: usize, k: usize, stride: usize, pad: usize },
    LeakyRelu,
    MaxPool2,
    Flatten,
    Dense { out: usize },
}

fn layers_for(arch: ArchId, num_classes: usize) -> Vec<LayerSpec> {
    use LayerSpec::*;
    match arch {
        ArchId::DeskCnn => vec![
            Conv { out: 16, k: 3, stride: 1, pad: 0 },
            LeakyRelu,
            MaxPool2,
            Conv { out: 32, k: 3, stride: 1, pad: 0 },
            LeakyRelu,
            MaxPool2,
            Flatten,
            Dense { out: 64 },
            LeakyRelu,
            Dense { out: num_classes },
        ],
        ArchId::DeskCnnDeep => vec![
            Conv { out: 16, k: 3, stride: 1, pad: 1 },
            LeakyRelu,
            MaxPool2,
            Conv { out: 32, k: 3, stride: 1, pad: 1 },
            LeakyRelu,
            MaxPool2,
            Conv { out: 64, k: 3, stride: 1, pad: 1 },
            LeakyRelu,
            MaxPool2,
            Flatten,
            Dense { out: 64 },
            Dense { out: num_classes },
        ],
        ArchId::DeskMlp => vec![
            Flatten,
            Dense { out: 64 },
            LeakyRelu,
            Dense { out: num_classes },
        ],
        ArchId::Linear => vec![Flatten, Dense { out: num_classes }],
    }
}

#[derive(Debug, Clone)]
struct NamedParam {
    name: String,
    tensor: Tensor,
}

/// A feed-forward classifier F(x) = softmax(W_s Z + b_s).
#[derive(Debug, Clone)]
pub struct NetworkModel {
    arch: ArchId,
    layers: Vec<LayerSpec>,
    input_shape: [usize; 3],
    num_classes: usize,
    leak: f64,
    objective: Objective,
    params: Vec<NamedParam>,
    seed: u64,
    train_steps: u64,
}

/// Tape handles produced by a differentiable forward pass.
pub struct ForwardIds {
    pub param_ids: Vec<TensorId>,
    /// Final hidden vector Z, shape [N, d].
    pub hidden: TensorId,
    /// Logits Z_pre = W_s Z + b_s, shape [N, L].
    pub logits: TensorId,
}

impl NetworkModel {
    /// He-style fan-in initialization from a seeded RNG; biases start at zero.
    pub fn init(
        arch: ArchId,
        input_shape: [usize; 3],
        num_classes: usize,
        leak: f64,
        objective: Objective,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&leak) {
            return Err(Error::InvalidArgument(format!("leak must be in [0,1), got {leak}")));
        }
        let layers = layers_for(arch, num_classes);
        let mut rng = stage_rng(seed, "weight-init");
        let mut params = Vec::new();
        let mut shape: Vec<usize> = input_shape.to_vec();
        for (li, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { out, k, stride, pad } => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let fan_in = (c * k * k) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let data: Vec<f64> =
                        (0..out * c * k * k).map(|_| normal.sample(&mut rng)).collect();
                    params.push(NamedParam {
                        name: format!("layer{li}.conv.weight"),
                        tensor: Tensor::new(vec![out, c, k, k], data)?,
                    });
                    params.push(NamedParam {
                        name: format!("layer{li}.conv.bias"),
                        tensor: Tensor::zeros(&[out]),
                    });
                    let oh = ops::conv_out_extent(h, k, stride, pad)?;
                    let ow = ops::conv_out_extent(w, k, stride, pad)?;
                    shape = vec![out, oh, ow];
                }
                LayerSpec::MaxPool2 => {
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                    if shape[1] == 0 || shape[2] == 0 {
                        return Err(Error::shape("init", "input too small for pooling stack"));
                    }
                }
                LayerSpec::LeakyRelu => {}
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                }
                LayerSpec::Dense { out } => {
                    let fan_in = shape[0] as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let data: Vec<f64> =
                        (0..shape[0] * out).map(|_| normal.sample(&mut rng)).collect();
                    params.push(NamedParam {
                        name: format!("layer{li}.dense.weight"),
                        tensor: Tensor::new(vec![shape[0], out], data)?,
                    });
                    params.push(NamedParam {
                        name: format!("layer{li}.dense.bias"),
                        tensor: Tensor::zeros(&[out]),
                    });
                    shape = vec![out];
                }
            }
        }
        if shape != [num_classes] {
            return Err(Error::shape("init", "stack must end in a Dense(L) layer"));
        }
        Ok(NetworkModel {
            arch,
            layers,
            input_shape,
            num_classes,
            leak,
            objective,
            params,
            seed,
            train_steps: 0,
        })
    }

    pub fn arch(&self) -> ArchId {
        self.arch
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn leak(&self) -> f64 {
        self.leak
    }

    /// Dimension of the final hidden vector Z.
    pub fn hidden_dim(&self) -> usize {
        let dense_w = &self.params[self.params.len() - 2].tensor;
        dense_w.shape()[0]
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn set_param_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::shape("set_param_tensors", "parameter count mismatch"));
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::shape("set_param_tensors", "parameter shape mismatch"));
            }
            p.tensor = t;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let [c, h, w] = self.input_shape;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "forward",
                format!("input {s:?} does not match model input [N,{c},{h},{w}]"),
            ));
        }
        Ok(())
    }

    /// Differentiable forward pass; registers parameters as leaves and
    /// returns their tape ids alongside hidden and logit nodes.
    pub fn forward_tape(&self, tape: &mut Tape, x: TensorId) -> Result<ForwardIds> {
        let mut param_ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            param_ids.push(tape.leaf(p.tensor.clone()));
        }
        let mut cur = x;
        let mut next_param = 0usize;
        let mut hidden = x;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let w = param_ids[next_param];
                    let b = param_ids[next_param + 1];
                    next_param += 2;
                    cur = tape.conv2d(cur, w, stride, pad)?;
                    cur = tape.add_chan_bias(cur, b)?;
                }
                LayerSpec::LeakyRelu => cur = tape.leaky_relu(cur, self.leak)?,
                LayerSpec::MaxPool2 => cur = tape.maxpool2(cur)?,
                LayerSpec::Flatten => {
                    let s = tape.value(cur).shape().to_vec();
                    let flat: usize = s[1..].iter().product();
                    cur = tape.reshape(cur, &[s[0], flat])?;
                }
                LayerSpec::Dense { .. } => {
                    if next_param + 2 == param_ids.len() {
                        hidden = cur; // input to the softmax layer is Z
                    }
                    let w = param_ids[next_param];
                    let b = param_ids[next_param + 1];
                    next_param += 2;
                    cur = tape.matmul(cur, w)?;
                    cur = tape.add_row_bias(cur, b)?;
                }
            }
        }
        Ok(ForwardIds { param_ids, hidden, logits: cur })
    }

    /// Plain forward pass without a tape: returns (hidden [N,d], logits [N,L]).
    pub fn infer_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let mut cur = x.data().to_vec();
        let mut shape = vec![self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        let mut next_param = 0usize;
        let mut hidden: Option<(Vec<f64>, usize)> = None;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv { out, k, stride, pad } => {
                    let w = &self.params[next_param].tensor;
                    let b = &self.params[next_param + 1].tensor;
                    next_param += 2;
                    let (c, h, wd) = (shape[0], shape[1], shape[2]);
                    let oh = ops::conv_out_extent(h, k, stride, pad)?;
                    let ow = ops::conv_out_extent(wd, k, stride, pad)?;
                    let mut o = ops::conv2d(&cur, w.data(), n, c, h, wd, out, k, k, stride, pad)?;
                    let plane = oh * ow;
                    for item in 0..n {
                        for ch in 0..out {
                            let bv = b.data()[ch];
                            for v in &mut o[(item * out + ch) * plane..][..plane] {
                                *v += bv;
                            }
                        }
                    }
                    cur = o;
                    shape = vec![out, oh, ow];
                }
                LayerSpec::LeakyRelu => cur = ops::leaky_relu(&cur, self.leak),
                LayerSpec::MaxPool2 => {
                    let (o, _) = ops::maxpool2(&cur, n, shape[0], shape[1], shape[2]);
                    cur = o;
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
                LayerSpec::Dense { out } => {
                    if next_param + 2 == self.params.len() {
                        hidden = Some((cur.clone(), shape[0]));
                    }
                    let w = &self.params[next_param].tensor;
                    let b = &self.params[next_param + 1].tensor;
                    next_param += 2;
                    let mut o = ops::matmul(&cur, w.data(), n, shape[0], out);
                    for row in o.chunks_exact_mut(out) {
                        for (v, &bv) in row.iter_mut().zip(b.data()) {
                            *v += bv;
                        }
                    }
                    cur = o;
                    shape = vec![out];
                }
            }
        }
        let (hdata, hdim) = hidden.expect("stack always contains a final dense layer");
        Ok((
            Tensor::new(vec![n, hdim], hdata)?,
            Tensor::new(vec![n, self.num_classes], cur)?,
        ))
    }

    /// Logits under the model's prediction rule: negated for RCE models.
    pub fn effective_logits(&self, raw_logits: &[f64]) -> Vec<f64> {
        if self.objective.reversed() {
            raw_logits.iter().map(|&v| -v).collect()
        } else {
            raw_logits.to_vec()
        }
    }

    /// Prediction-rule probability rows for a batch of raw logits [N, L].
    pub fn rule_probs(&self, raw_logits: &Tensor) -> Result<Tensor> {
        let l = self.num_classes;
        let rows = raw_logits.numel() / l;
        let eff = self.effective_logits(raw_logits.data());
        Ok(Tensor::new(
            raw_logits.shape().to_vec(),
            ops::softmax_rows(&eff, rows, l)?,
        )?)
    }

    /// Prediction-rule probability vector for one input [1, C, H, W].
    pub fn probs(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (_, logits) = self.infer_batch(x)?;
        ops::softmax(&self.effective_logits(logits.data()))
    }

    /// Predicted label and its probability under the model's rule.
    pub fn predict(&self, x: &Tensor) -> Result<(usize, f64)> {
        let p = self.probs(x)?;
        let y = ops::argmax(&p);
        Ok((y, p[y]))
    }

    /// Accuracy over a dataset under the model's prediction rule.
    pub fn accuracy(&self, data: &Dataset, batch: usize) -> Result<f64> {
        let mut correct = 0usize;
        let n = data.len();
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (images, labels) = data.batch(&idx);
            let (_, logits) = self.infer_batch(&images)?;
            let probs = self.rule_probs(&logits)?;
            for (row, &y) in probs.data().chunks_exact(self.num_classes).zip(&labels) {
                if ops::argmax(row) == y {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }

    /// Writes `<prefix>.rce` (tensors) and `<prefix>.json` (metadata).
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> =
            self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        checkpoint::save(&with_ext(prefix, "rce"), &tensors)?;
        let sidecar = Sidecar {
            objective: self.objective,
            architecture: self.arch,
            num_classes: self.num_classes,
            seed: self.seed,
            train_steps: self.train_steps,
            input_shape: self.input_shape,
            leak: self.leak,
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Parse(format!("sidecar encode: {e}")))?;
        std::fs::write(with_ext(prefix, "json"), json)?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(with_ext(prefix, "json"))?;
        let sidecar: Sidecar = serde_json::from_str(&json)
            .map_err(|e| Error::Parse(format!("sidecar decode: {e}")))?;
        let mut model = NetworkModel::init(
            sidecar.architecture,
            sidecar.input_shape,
            sidecar.num_classes,
            sidecar.leak,
            sidecar.objective,
            sidecar.seed,
        )?;
        model.train_steps = sidecar.train_steps;
        let tensors = checkpoint::load(&with_ext(prefix, "rce"))?;
        if tensors.len() != model.params.len() {
            return Err(Error::Parse(format!(
                "checkpoint holds {} tensors, architecture wants {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (p, (name, t)) in model.params.iter_mut().zip(tensors) {
            if p.name != name || p.tensor.shape() != t.shape() {
                return Err(Error::Parse(format!(
                    "checkpoint tensor {name} {:?} does not match architecture slot {} {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
        Ok(model)
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut p = prefix.to_path_buf();
    let name = match p.file_name() {
        Some(n) => format!("{}.{ext}", n.to_string_lossy()),
        None => format!("model.{ext}"),
    };
    p.set_file_name(name);
    p
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    objective: Objective,
    architecture: ArchId,
    num_classes: usize,
    seed: u64,
    train_steps: u64,
    input_shape: [usize; 3],
    leak: f64,
}

// ── Losses ──────────────────────────────────────────────────────────────

fn check_probs(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(-1e-9..=1.0 + 1e-9).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

fn check_label(y: usize, l: usize) -> Result<()> {
    if y >= l {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {l} classes")));
    }
    Ok(())
}

/// Reverse label vector R_y: zero at `y`, 1/(L-1) elsewhere.
pub fn reverse_label_vector(y: usize, l: usize) -> Vec<f64> {
    let mut r = vec![1.0 / (l - 1) as f64; l];
    r[y] = 0.0;
    r
}

/// Smoothed target P^lambda: 1/(1+lambda) at `y`, lambda/((L-1)(1+lambda)) elsewhere.
pub fn smoothed_target(lambda: f64, y: usize, l: usize) -> Vec<f64> {
    let off = lambda / ((l - 1) as f64 * (lambda + 1.0));
    let mut p = vec![off; l];
    p[y] = 1.0 / (lambda + 1.0);
    p
}

/// -log(probs_y), probabilities floored at 1e-12.
pub fn ce_loss(probs: &[f64], y: usize) -> Result<f64> {
    check_label(y, probs.len())?;
    check_probs(probs)?;
    Ok(-probs[y].max(PROB_FLOOR).ln())
}

/// CE plus the label-smoothing term: ce - lambda * R_y . log(probs).
pub fn label_smoothing_loss(probs: &[f64], y: usize, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let ce = ce_loss(probs, y)?;
    let r = reverse_label_vector(y, probs.len());
    let smooth: f64 = r
        .iter()
        .zip(probs)
        .map(|(&ri, &pi)| ri * pi.max(PROB_FLOOR).ln())
        .sum();
    Ok(ce - lambda * smooth)
}

/// Reverse cross-entropy: -R_y . log(probs) = -(1/(L-1)) sum_{i != y} log(probs_i).
pub fn rce_loss(probs: &[f64], y: usize) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::InvalidArgument("RCE needs at least 2 classes".into()));
    }
    check_label(y, probs.len())?;
    check_probs(probs)?;
    let scale = 1.0 / (probs.len() - 1) as f64;
    Ok(-probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &p)| p.max(PROB_FLOOR).ln())
        .sum::<f64>()
        * scale)
}

/// softmax(-Z_pre(x)): the prediction vector of an RCE-trained model.
pub fn reverse_logits_predict(model: &NetworkModel, x: &Tensor) -> Result<Vec<f64>> {
    let (_, logits) = model.infer_batch(x)?;
    ops::softmax(&logits.data().iter().map(|&v| -v).collect::<Vec<_>>())
}

/// Label and confidence under the prediction rule the objective dictates.
pub fn predict_label(model: &NetworkModel, x: &Tensor, objective: Objective) -> Result<(usize, f64)> {
    let (_, logits) = model.infer_batch(x)?;
    let eff: Vec<f64> = if objective.reversed() {
        logits.data().iter().map(|&v| -v).collect()
    } else {
        logits.data().to_vec()
    };
    let p = ops::softmax(&eff)?;
    let y = ops::argmax(&p);
    Ok((y, p[y]))
}

/// Per-class weights w such that the batch loss is -(1/N) sum w . log(probs).
pub fn target_weights(objective: Objective, y: usize, l: usize) -> Vec<f64> {
    match objective {
        Objective::Ce => {
            let mut w = vec![0.0; l];
            w[y] = 1.0;
            w
        }
        Objective::Rce => reverse_label_vector(y, l),
        Objective::LabelSmooth { lambda } => {
            let mut w = reverse_label_vector(y, l);
            for wv in &mut w {
                *wv *= lambda;
            }
            w[y] += 1.0;
            w
        }
    }
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub steps: u64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// CIFAR-style random crop + flip on each batch.
    pub augment: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if let Objective::LabelSmooth { lambda } = self.objective {
            if lambda < 0.0 {
                return Err(Error::InvalidArgument("lambda must be >= 0".into()));
            }
        }
        self.schedule.validate()
    }
}

/// Mean configured loss of one batch as a tape node; shared by the training
/// loop and by gradient-based attacks that ascend "the training loss".
pub fn loss_on_tape(
    tape: &mut Tape,
    model: &NetworkModel,
    fwd: &ForwardIds,
    labels: &[usize],
    objective: Objective,
) -> Result<TensorId> {
    let n = labels.len();
    let l = model.num_classes();
    let mut w = Vec::with_capacity(n * l);
    for &y in labels {
        let tw = target_weights(objective, y, l);
        // negative weights scaled by 1/N fold the "-(1/N)" into the constant
        w.extend(tw.iter().map(|&v| -v / n as f64));
    }
    let probs = tape.softmax(fwd.logits)?;
    let floored = tape.clamp_min(probs, PROB_FLOOR);
    let logp = tape.ln(floored);
    let wt = tape.leaf(Tensor::new(vec![n, l], w)?);
    let weighted = tape.mul(logp, wt)?;
    Ok(tape.sum(weighted))
}

/// Loss measured every this many steps.
const TRACE_EVERY: u64 = 100;

/// Minimizes the mean configured loss with momentum SGD over seeded
/// shuffled mini-batches. Returns (step, loss) pairs sampled every 100
/// steps. Two calls with identical seed, data, and config produce
/// bit-identical parameters.
pub fn train(model: &mut NetworkModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<(u64, f64)>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if cfg.objective != model.objective() {
        return Err(Error::InvalidArgument(format!(
            "config objective {:?} does not match model objective {:?}",
            cfg.objective,
            model.objective()
        )));
    }
    let mut params = model.param_tensors();
    let mut opt = OptimizerState::new(
        &params,
        cfg.momentum,
        cfg.weight_decay,
        cfg.schedule.clone(),
    )?;
    let mut shuffle_rng = stage_rng(cfg.seed, "train-shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len(); // force a shuffle before the first batch
    let mut trace = Vec::new();

    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > data.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let batch_idx = &order[cursor..(cursor + cfg.batch_size).min(data.len())];
        cursor += cfg.batch_size;

        let (mut images, labels) = data.batch(batch_idx);
        if cfg.augment {
            images = crate::data::augment_cifar(&images, cfg.seed ^ step)?;
        }

        let mut tape = Tape::new();
        let x = tape.leaf(images);
        let fwd = model.forward_tape(&mut tape, x)?;
        let loss = loss_on_tape(&mut tape, model, &fwd, &labels, cfg.objective)?;
        let loss_val = tape.value(loss).item()?;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at step {step}")));
        }
        if step % TRACE_EVERY == 0 {
            trace.push((step, loss_val));
        }

        let mut grads = tape.backward(loss)?;
        let grad_tensors: Vec<Tensor> = fwd
            .param_ids
            .iter()
            .map(|&id| grads.take(id).unwrap_or_else(|| Tensor::zeros(tape.value(id).shape())))
            .collect();
        // sync current params back onto the model-side buffers
        opt.step(&mut params, &grad_tensors, step)?;
        model.set_param_tensors(params.clone())?;
    }
    model.train_steps += cfg.steps;
    Ok(trace)
}
