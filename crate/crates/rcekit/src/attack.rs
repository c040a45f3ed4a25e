//! The attack suite: single-step and iterative gradient-sign methods,
//! Jacobian saliency, the C&W optimization attack with its high-confidence
//! and detector-aware variants, and a uniform-noise baseline.
//!
//! Every attack clips its output to the pixel domain [-0.5, 0.5] and is
//! deterministic given (model, input, config, seed). Attacks always work
//! against the model's *prediction rule*: on an RCE-trained checkpoint the
//! gradient-sign methods ascend the RCE training loss and the C&W margin is
//! computed on negated logits, because that is the path the classifier
//! actually predicts through.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detect::DetectorState;
use crate::error::{Error, Result};
use crate::model::{loss_on_tape, NetworkModel};
use crate::tensor::tape::Tape;
use crate::tensor::{ops, Tensor};
use crate::util::stage_rng;

pub const PIXEL_MIN: f64 = -0.5;
pub const PIXEL_MAX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Bim,
    Ilcm,
    Jsma,
    Cw,
    CwHc,
    CwWb,
    Rand,
}

impl AttackFamily {
    /// Families that need a target class rather than the true label.
    pub fn targeted(&self) -> bool {
        matches!(self, AttackFamily::Jsma | AttackFamily::Cw | AttackFamily::CwHc | AttackFamily::CwWb)
    }
}

/// One attack's outcome. `x_star` always lies in the pixel domain; for the
/// epsilon-bounded families it also stays inside the L-inf ball around x.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub x_star: Tensor,
    pub success: bool,
    pub iterations: u64,
    /// Final value of the attack's own objective (loss for the sign
    /// methods, distance + c*f for the C&W family).
    pub objective: f64,
    /// Detector-penalty value at the returned point (C&W-wb only).
    pub f2: Option<f64>,
}

/// Settings for the C&W family.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CwParams {
    /// Confidence margin the target logit must clear.
    pub kappa: f64,
    /// Gradient-descent step on the tanh-space variable.
    pub step_size: f64,
    /// Binary-search rounds over the constant c.
    pub search_rounds: u32,
    /// Gradient iterations per round.
    pub max_iters: u32,
    pub initial_c: f64,
    /// Stop a round once the objective has plateaued.
    pub abort_early: bool,
}

impl Default for CwParams {
    fn default() -> Self {
        CwParams {
            kappa: 0.0,
            step_size: 0.01,
            search_rounds: 9,
            max_iters: 10_000,
            initial_c: 0.01,
            abort_early: true,
        }
    }
}

impl CwParams {
    pub fn high_confidence() -> Self {
        CwParams { kappa: 10.0, ..Default::default() }
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clip_domain(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(PIXEL_MIN, PIXEL_MAX);
    }
}

/// Gradient of the model's own training loss at (x, y).
fn input_loss_gradient(model: &NetworkModel, x: &Tensor, y: usize) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let fwd = model.forward_tape(&mut tape, xid)?;
    let loss = loss_on_tape(&mut tape, model, &fwd, &[y], model.objective())?;
    let loss_val = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let g = grads
        .take(xid)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !g.all_finite() {
        return Err(Error::NonFinite("attack gradient".into()));
    }
    Ok((g, loss_val))
}

fn misclassifies(model: &NetworkModel, x: &Tensor, y: usize) -> Result<bool> {
    Ok(model.predict(x)?.0 != y)
}

/// One step of epsilon-scaled gradient sign: x* = clip(x + eps * sgn(grad L)).
pub fn fgsm(model: &NetworkModel, x: &Tensor, y: usize, epsilon: f64) -> Result<AttackOutcome> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let (g, loss_val) = input_loss_gradient(model, x, y)?;
    let mut data = x.data().to_vec();
    for (v, &gv) in data.iter_mut().zip(g.data()) {
        *v += epsilon * sgn(gv);
    }
    clip_domain(&mut data);
    let x_star = Tensor::new(x.shape().to_vec(), data)?;
    let success = misclassifies(model, &x_star, y)?;
    Ok(AttackOutcome { x_star, success, iterations: 1, objective: loss_val, f2: None })
}

fn clip_ball(data: &mut [f64], origin: &[f64], epsilon: f64) {
    for (v, &o) in data.iter_mut().zip(origin) {
        *v = v.clamp(o - epsilon, o + epsilon).clamp(PIXEL_MIN, PIXEL_MAX);
    }
}

/// Iterative FGSM: r steps of size eps/r, each clipped to the L-inf ball
/// around x intersected with the pixel domain.
pub fn bim(model: &NetworkModel, x: &Tensor, y: usize, epsilon: f64, r: u64) -> Result<AttackOutcome> {
    if r < 1 {
        return Err(Error::InvalidArgument("iteration count r must be >= 1".into()));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let step = epsilon / r as f64;
    let mut cur = x.clone();
    let mut last_loss = 0.0;
    for _ in 0..r {
        let (g, loss_val) = input_loss_gradient(model, &cur, y)?;
        last_loss = loss_val;
        let mut data = cur.into_data();
        for (v, &gv) in data.iter_mut().zip(g.data()) {
            *v += step * sgn(gv);
        }
        clip_ball(&mut data, x.data(), epsilon);
        cur = Tensor::new(x.shape().to_vec(), data)?;
    }
    let success = misclassifies(model, &cur, y)?;
    Ok(AttackOutcome { x_star: cur, success, iterations: r, objective: last_loss, f2: None })
}

/// Iterative least-likely-class method: descends the training loss toward
/// y_ll = argmin F(x), computed once from the clean input. Succeeds when the
/// model predicts y_ll.
pub fn ilcm(model: &NetworkModel, x: &Tensor, epsilon: f64, r: u64) -> Result<AttackOutcome> {
    if r < 1 {
        return Err(Error::InvalidArgument("iteration count r must be >= 1".into()));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let probs = model.probs(x)?;
    let y_ll = ops::argmin(&probs);
    let step = epsilon / r as f64;
    let mut cur = x.clone();
    let mut last_loss = 0.0;
    for _ in 0..r {
        let (g, loss_val) = input_loss_gradient(model, &cur, y_ll)?;
        last_loss = loss_val;
        let mut data = cur.into_data();
        for (v, &gv) in data.iter_mut().zip(g.data()) {
            *v -= step * sgn(gv);
        }
        clip_ball(&mut data, x.data(), epsilon);
        cur = Tensor::new(x.shape().to_vec(), data)?;
    }
    let success = model.predict(&cur)?.0 == y_ll;
    Ok(AttackOutcome { x_star: cur, success, iterations: r, objective: last_loss, f2: None })
}

/// Least-likely class of the clean input under the model's rule.
pub fn least_likely_class(model: &NetworkModel, x: &Tensor) -> Result<usize> {
    Ok(ops::argmin(&model.probs(x)?))
}

/// Jacobian of the prediction-rule probability vector w.r.t. the flat input,
/// shape [L][d]: one reverse sweep per class over a shared forward tape.
fn probs_jacobian(model: &NetworkModel, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let l = model.num_classes();
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let fwd = model.forward_tape(&mut tape, xid)?;
    let eff = if model.objective().reversed() { tape.neg(fwd.logits) } else { fwd.logits };
    let probs = tape.softmax(eff)?;
    let mut jac = Vec::with_capacity(l);
    for cls in 0..l {
        let mut seed = Tensor::zeros(tape.value(probs).shape());
        seed.data_mut()[cls] = 1.0;
        let mut grads = tape.backward_seeded(probs, &seed)?;
        let g = grads.take(xid).unwrap_or_else(|| Tensor::zeros(x.shape()));
        jac.push(g.into_data());
    }
    Ok(jac)
}

/// Saliency of one pixel from the target-class gradient `dft` and the sum
/// of the other class gradients `sum_rest`: zero when the target gradient
/// is negative or the rest-sum positive, else their product magnitude.
pub fn jsma_saliency(dft: f64, sum_rest: f64) -> f64 {
    if dft < 0.0 || sum_rest > 0.0 {
        0.0
    } else {
        dft * sum_rest.abs()
    }
}

/// Jacobian saliency attack: perturbs the highest-saliency pixel by
/// `eps_offset` per iteration (each pixel at most once), stopping at the
/// target class or the pixel budget.
pub fn jsma(
    model: &NetworkModel,
    x: &Tensor,
    target: usize,
    eps_offset: f64,
    max_pixels: usize,
) -> Result<AttackOutcome> {
    if target >= model.num_classes() {
        return Err(Error::InvalidArgument(format!("target {target} out of range")));
    }
    if max_pixels < 1 {
        return Err(Error::InvalidArgument("max_pixels must be >= 1".into()));
    }
    let mut cur = x.clone();
    let mut used = vec![false; x.numel()];
    let mut changed = 0u64;
    loop {
        if model.predict(&cur)?.0 == target {
            return Ok(AttackOutcome {
                x_star: cur,
                success: true,
                iterations: changed,
                objective: 0.0,
                f2: None,
            });
        }
        if changed as usize >= max_pixels {
            return Ok(AttackOutcome {
                x_star: cur,
                success: false,
                iterations: changed,
                objective: 0.0,
                f2: None,
            });
        }
        let jac = probs_jacobian(model, &cur)?;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..cur.numel() {
            if used[i] {
                continue;
            }
            // a saturated pixel cannot move any further in the offset direction
            let v = cur.data()[i];
            if (eps_offset > 0.0 && v >= PIXEL_MAX) || (eps_offset < 0.0 && v <= PIXEL_MIN) {
                continue;
            }
            let dft = jac[target][i];
            let sum_rest: f64 = (0..model.num_classes())
                .filter(|&j| j != target)
                .map(|j| jac[j][i])
                .sum();
            let s = jsma_saliency(dft, sum_rest);
            if s > 0.0 && best.map_or(true, |(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
        let Some((pixel, _)) = best else {
            // all saliencies zero: no pixel helps
            return Ok(AttackOutcome {
                x_star: cur,
                success: false,
                iterations: changed,
                objective: 0.0,
                f2: None,
            });
        };
        let mut data = cur.into_data();
        data[pixel] = (data[pixel] + eps_offset).clamp(PIXEL_MIN, PIXEL_MAX);
        used[pixel] = true;
        changed += 1;
        cur = Tensor::new(x.shape().to_vec(), data)?;
    }
}

/// Detector term for the white-box C&W variant.
struct WbTerm {
    bank: Arc<Vec<f64>>,
    sigma2: f64,
    eta: f64,
}

struct CwRecord {
    x: Vec<f64>,
    dist2: f64,
    f2: f64,
    /// True when the detector hinge is also beaten (always true without wb).
    joint: bool,
}

/// Shared C&W core. Minimizes ||x(w) - x||^2 + c * f(x(w)) over the tanh
/// reparameterization x(w) = tanh(w)/2, with a modified binary search on c:
/// c starts at `initial_c`, grows 10x per failed round until the first
/// success, then bisects. Returns the successful point of least distortion
/// (preferring points that also beat the detector hinge when `wb` is set).
fn cw_core(
    model: &NetworkModel,
    x0: &Tensor,
    target: usize,
    params: &CwParams,
    wb: Option<&WbTerm>,
) -> Result<AttackOutcome> {
    if target >= model.num_classes() {
        return Err(Error::InvalidArgument(format!("target {target} out of range")));
    }
    let l = model.num_classes();
    let d = x0.numel();
    // w0 puts x(w) back at x0, nudged off the atanh poles
    let w0: Vec<f64> = x0
        .data()
        .iter()
        .map(|&v| (2.0 * v).clamp(-1.0 + 1e-9, 1.0 - 1e-9).atanh())
        .collect();

    let mut best: Option<CwRecord> = None;
    let mut best_fail: Option<(Vec<f64>, f64)> = None; // (x, f value)
    let mut c = params.initial_c;
    let mut lo = 0.0f64;
    let mut hi: Option<f64> = None;
    let mut total_iters = 0u64;

    for _round in 0..params.search_rounds {
        let mut w = w0.clone();
        let mut round_success = false;
        let mut prev_obj = f64::INFINITY;
        for iter in 0..params.max_iters {
            let mut tape = Tape::new();
            let wid = tape.leaf(Tensor::new(x0.shape().to_vec(), w.clone())?);
            let th = tape.tanh(wid);
            let xw = tape.mul_scalar(th, 0.5);
            // distortion term ||x(w) - x0||^2
            let x0id = tape.leaf(x0.clone());
            let delta = tape.sub(xw, x0id)?;
            let sq = tape.mul(delta, delta)?;
            let dist2 = tape.sum(sq);
            // margin term on the effective (prediction-rule) logits
            let fwd = model.forward_tape(&mut tape, xw)?;
            let eff2d = if model.objective().reversed() { tape.neg(fwd.logits) } else { fwd.logits };
            let eff = tape.reshape(eff2d, &[l])?;
            let m = tape.max_except(eff, target)?;
            let zt = tape.select(eff, target)?;
            let margin = tape.sub(m, zt)?;
            let f = tape.max_scalar(margin, -params.kappa);
            // optional detector hinge f2 = max(-log KD - eta, 0)
            let (fsum, f2_val) = match wb {
                Some(term) => {
                    let dh = tape.value(fwd.hidden).numel();
                    let z1 = tape.reshape(fwd.hidden, &[dh])?;
                    let kd = tape.kdensity(z1, term.bank.clone(), term.sigma2)?;
                    let lk = tape.ln(kd);
                    let nl = tape.neg(lk);
                    let shifted = tape.add_scalar(nl, -term.eta);
                    let f2 = tape.max_scalar(shifted, 0.0);
                    let s = tape.add(f, f2)?;
                    (s, tape.value(f2).item()?)
                }
                None => (f, 0.0),
            };
            let weighted = tape.mul_scalar(fsum, c);
            let obj = tape.add(dist2, weighted)?;

            total_iters += 1;
            let f_val = tape.value(f).item()?;
            let dist_val = tape.value(dist2).item()?;
            let obj_val = tape.value(obj).item()?;

            if f_val <= 0.0 {
                let joint = wb.is_none() || f2_val <= 0.0;
                if joint {
                    round_success = true;
                }
                let cand_x = tape.value(xw).data().to_vec();
                let replace = match &best {
                    None => true,
                    Some(b) => (joint && !b.joint) || (joint == b.joint && dist_val < b.dist2),
                };
                if replace {
                    best = Some(CwRecord { x: cand_x, dist2: dist_val, f2: f2_val, joint });
                }
            } else {
                let better_fail = best_fail.as_ref().map_or(true, |(_, bf)| f_val < *bf);
                if better_fail {
                    best_fail = Some((tape.value(xw).data().to_vec(), f_val));
                }
            }

            // plateau abort, checked a few times per round
            if params.abort_early && iter % 50 == 49 {
                if obj_val > prev_obj * 0.9999 {
                    break;
                }
                prev_obj = obj_val;
            }

            let mut grads = tape.backward(obj)?;
            let g = grads.take(wid).unwrap_or_else(|| Tensor::zeros(x0.shape()));
            for (wv, gv) in w.iter_mut().zip(g.data()) {
                *wv -= params.step_size * gv;
            }
        }
        if round_success {
            hi = Some(c);
        } else {
            lo = c;
        }
        c = match hi {
            None => c * 10.0,
            Some(h) => (lo + h) / 2.0,
        };
    }

    match best {
        Some(rec) => {
            let x_star = Tensor::new(x0.shape().to_vec(), rec.x)?;
            Ok(AttackOutcome {
                x_star,
                success: true,
                iterations: total_iters,
                objective: rec.dist2,
                f2: wb.map(|_| rec.f2),
            })
        }
        None => {
            let (xf, fv) = best_fail.unwrap_or_else(|| (x0.data().to_vec(), f64::INFINITY));
            let _ = d;
            Ok(AttackOutcome {
                x_star: Tensor::new(x0.shape().to_vec(), xf)?,
                success: false,
                iterations: total_iters,
                objective: fv,
                f2: wb.map(|_| f64::NAN),
            })
        }
    }
}

/// Targeted C&W attack with binary search over c.
pub fn cw(model: &NetworkModel, x: &Tensor, target: usize, params: &CwParams) -> Result<AttackOutcome> {
    cw_core(model, x, target, params, None)
}

/// High-confidence C&W: kappa fixed at 10.
pub fn cw_hc(model: &NetworkModel, x: &Tensor, target: usize, params: &CwParams) -> Result<AttackOutcome> {
    let p = CwParams { kappa: 10.0, ..*params };
    cw_core(model, x, target, &p, None)
}

/// Detector-aware C&W: adds the hinge f2 = max(-log KD(x*) - eta, 0) so the
/// optimizer must also push the hidden vector into the dense region of the
/// target class. KD gradients flow through the hidden layer.
pub fn cw_wb(
    model: &NetworkModel,
    detector: &DetectorState,
    x: &Tensor,
    target: usize,
    eta: f64,
    params: &CwParams,
) -> Result<AttackOutcome> {
    if !detector.is_fitted() {
        return Err(Error::InvalidArgument("cw_wb needs a fitted kernel-density detector".into()));
    }
    let term = WbTerm { bank: detector.bank(target).clone(), sigma2: detector.sigma2, eta };
    cw_core(model, x, target, params, Some(&term))
}

/// Median of -log KD over the training set: the hinge offset the white-box
/// attack must beat.
pub fn median_neg_log_kd(
    detector: &DetectorState,
    model: &NetworkModel,
    train: &Dataset,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(train.len());
    let chunk = 256;
    let mut start = 0;
    while start < train.len() {
        let end = (start + chunk).min(train.len());
        let idx: Vec<usize> = (start..end).collect();
        let (images, _) = train.batch(&idx);
        for kd in detector.scores_batch(model, &images)? {
            scores.push(-kd.ln());
        }
        start = end;
    }
    Ok(crate::util::percentile(&scores, 50.0))
}

use crate::data::Dataset;

/// Uniform noise baseline: x* = clip(x + U(-eps, eps)), seeded.
pub fn rand_noise(
    model: &NetworkModel,
    x: &Tensor,
    y: usize,
    epsilon: f64,
    seed: u64,
) -> Result<AttackOutcome> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut rng = stage_rng(seed, "rand-noise");
    let mut data = x.data().to_vec();
    for v in &mut data {
        let u: f64 = if epsilon > 0.0 { rng.gen_range(-epsilon..epsilon) } else { 0.0 };
        *v += u;
    }
    clip_domain(&mut data);
    let x_star = Tensor::new(x.shape().to_vec(), data)?;
    let success = misclassifies(model, &x_star, y)?;
    Ok(AttackOutcome { x_star, success, iterations: 1, objective: 0.0, f2: None })
}

// ── Config-driven dispatch ──────────────────────────────────────────────

/// Declarative attack description; the JSON form of one batch-attack job.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// Perturbation budget for the epsilon-bounded families.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Iteration steps r for BIM/ILCM.
    #[serde(default = "default_iters")]
    pub iters: u64,
    /// JSMA per-pixel offset.
    #[serde(default = "default_offset")]
    pub eps_offset: f64,
    /// JSMA pixel budget.
    #[serde(default = "default_max_pixels")]
    pub max_pixels: usize,
    /// C&W family settings.
    #[serde(default)]
    pub cw: CwParams,
    /// Hinge offset for CW-wb; computed from the training set when absent.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Seed for the RAND family.
    #[serde(default)]
    pub seed: u64,
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_iters() -> u64 {
    10
}
fn default_offset() -> f64 {
    1.0
}
fn default_max_pixels() -> usize {
    100
}

pub const RAND_DEFAULT_EPSILON: f64 = 0.04;

impl AttackConfig {
    pub fn new(family: AttackFamily) -> Self {
        let mut cfg = AttackConfig {
            family,
            epsilon: default_epsilon(),
            iters: default_iters(),
            eps_offset: default_offset(),
            max_pixels: default_max_pixels(),
            cw: CwParams::default(),
            eta: None,
            seed: 0,
        };
        match family {
            AttackFamily::CwHc => cfg.cw.kappa = 10.0,
            AttackFamily::Rand => cfg.epsilon = RAND_DEFAULT_EPSILON,
            _ => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
        }
        if self.iters < 1 {
            return Err(Error::InvalidArgument("iters must be >= 1".into()));
        }
        if self.cw.kappa < 0.0 {
            return Err(Error::InvalidArgument("kappa must be >= 0".into()));
        }
        if self.cw.search_rounds < 1 {
            return Err(Error::InvalidArgument("search_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Runs one configured attack against one input. Targeted families read
/// `target`; untargeted families read the true label `y`.
pub fn run_attack(
    model: &NetworkModel,
    detector: Option<&DetectorState>,
    x: &Tensor,
    y: usize,
    target: Option<usize>,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let need_target = || {
        target.ok_or_else(|| {
            Error::InvalidArgument(format!("{:?} is targeted and needs a target class", cfg.family))
        })
    };
    match cfg.family {
        AttackFamily::Fgsm => fgsm(model, x, y, cfg.epsilon),
        AttackFamily::Bim => bim(model, x, y, cfg.epsilon, cfg.iters),
        AttackFamily::Ilcm => ilcm(model, x, cfg.epsilon, cfg.iters),
        AttackFamily::Jsma => jsma(model, x, need_target()?, cfg.eps_offset, cfg.max_pixels),
        AttackFamily::Cw => cw(model, x, need_target()?, &cfg.cw),
        AttackFamily::CwHc => cw_hc(model, x, need_target()?, &cfg.cw),
        AttackFamily::CwWb => {
            let det = detector.ok_or_else(|| {
                Error::InvalidArgument("cw_wb needs a fitted kernel-density detector".into())
            })?;
            let eta = cfg.eta.ok_or_else(|| {
                Error::InvalidArgument("cw_wb needs eta (median -log KD over training)".into())
            })?;
            cw_wb(model, det, x, need_target()?, eta, &cfg.cw)
        }
        AttackFamily::Rand => rand_noise(model, x, y, cfg.epsilon, cfg.seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::model::{train, ArchId, Objective, TrainConfig};
    use crate::tensor::optim::LrSchedule;

    fn trained_mlp(objective: Objective) -> (NetworkModel, Dataset) {
        let data = synthetic_blobs(3, 40, 16, 0.9, 77).unwrap();
        let mut model =
            NetworkModel::init(ArchId::DeskMlp, [1, 4, 4], 3, 0.1, objective, 31).unwrap();
        let cfg = TrainConfig {
            objective,
            batch_size: 20,
            steps: 150,
            schedule: LrSchedule::constant(0.1),
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 8,
            augment: false,
        };
        train(&mut model, &data, &cfg).unwrap();
        (model, data)
    }

    #[test]
    fn sgn_of_zero_is_zero() {
        assert_eq!(sgn(0.0), 0.0);
        assert_eq!(sgn(0.3), 1.0);
        assert_eq!(sgn(-0.2), -1.0);
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let (model, data) = trained_mlp(Objective::Ce);
        let x = data.image(0);
        let out = fgsm(&model, &x, data.labels[0], 0.0).unwrap();
        assert_eq!(out.x_star.data(), x.data());
    }

    #[test]
    fn fgsm_perturbation_is_sign_scaled() {
        // interior pixels move by exactly +-epsilon in the gradient direction
        let (model, data) = trained_mlp(Objective::Ce);
        let x = data.image(1);
        let y = data.labels[1];
        let eps = 0.05;
        let (g, _) = input_loss_gradient(&model, &x, y).unwrap();
        let out = fgsm(&model, &x, y, eps).unwrap();
        for ((&xv, &av), &gv) in x.data().iter().zip(out.x_star.data()).zip(g.data()) {
            let expect = (xv + eps * sgn(gv)).clamp(PIXEL_MIN, PIXEL_MAX);
            assert_eq!(av, expect);
        }
    }

    #[test]
    fn fgsm_linear_model_flips_beyond_margin_bound() {
        // On a linear 2-class model the CE-loss FGSM direction is
        // sgn(w_other - w_true) pixelwise, so the logit margin shrinks by
        // exactly eps * ||w_true - w_other||_1 while no clipping occurs:
        // the label flips iff eps > margin / ||w_y - w_other||_1 (oracle).
        let mut model =
            NetworkModel::init(ArchId::Linear, [1, 2, 2], 2, 0.1, Objective::Ce, 3).unwrap();
        let w = Tensor::new(
            vec![4, 2],
            vec![
                0.5, 0.0, //
                -0.25, 0.0, //
                0.3, 0.0, //
                -0.1, 0.0,
            ],
        )
        .unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.01]);
        model.set_param_tensors(vec![w, b]).unwrap();
        let wdiff_l1 = 0.5 + 0.25 + 0.3 + 0.1;

        for x_data in [
            vec![0.10, 0.10, -0.05, 0.02],
            vec![0.05, -0.02, 0.03, 0.10],
            vec![0.12, 0.04, -0.10, -0.06],
        ] {
            let x = Tensor::new(vec![1, 1, 2, 2], x_data).unwrap();
            let (_, lg) = model.infer_batch(&x).unwrap();
            let logits = lg.data();
            let y = if logits[0] > logits[1] { 0 } else { 1 };
            let margin = (logits[y] - logits[1 - y]).abs();
            let critical = margin / wdiff_l1;
            assert!(critical < 0.05, "test point too far from the boundary");
            let below = fgsm(&model, &x, y, critical * 0.9).unwrap();
            let above = fgsm(&model, &x, y, critical * 1.1).unwrap();
            assert!(!below.success, "flip below the oracle bound");
            assert!(above.success, "no flip above the oracle bound");
        }
    }

    #[test]
    fn bim_single_step_equals_fgsm() {
        let (model, data) = trained_mlp(Objective::Ce);
        let x = data.image(2);
        let y = data.labels[2];
        let a = fgsm(&model, &x, y, 0.07).unwrap();
        let b = bim(&model, &x, y, 0.07, 1).unwrap();
        assert_eq!(a.x_star.data(), b.x_star.data());
    }

    #[test]
    fn bim_respects_linf_ball() {
        let (model, data) = trained_mlp(Objective::Rce);
        let x = data.image(5);
        let y = data.labels[5];
        for eps in [0.05, 0.1, 0.2] {
            let out = bim(&model, &x, y, eps, 7).unwrap();
            let linf = out
                .x_star
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(linf <= eps + 1e-12);
            assert!(out.x_star.data().iter().all(|v| (PIXEL_MIN..=PIXEL_MAX).contains(v)));
        }
    }

    #[test]
    fn ilcm_targets_least_likely() {
        let (model, data) = trained_mlp(Objective::Ce);
        for i in [0, 11, 47] {
            let x = data.image(i);
            let probs = model.probs(&x).unwrap();
            assert_eq!(least_likely_class(&model, &x).unwrap(), ops::argmin(&probs));
            // on correctly classified points the target differs from the prediction
            let (pred, _) = model.predict(&x).unwrap();
            if pred == data.labels[i] {
                assert_ne!(least_likely_class(&model, &x).unwrap(), pred);
            }
        }
    }

    #[test]
    fn ilcm_zero_epsilon_is_identity() {
        let (model, data) = trained_mlp(Objective::Ce);
        let x = data.image(3);
        let out = ilcm(&model, &x, 0.0, 4).unwrap();
        assert_eq!(out.x_star.data(), x.data());
        assert!(!out.success);
    }

    #[test]
    fn jsma_saliency_formula() {
        // negative target gradient zeroes the saliency
        assert_eq!(jsma_saliency(-0.1, -0.5), 0.0);
        // positive rest-sum zeroes it too
        assert_eq!(jsma_saliency(0.4, 0.2), 0.0);
        // spec example: grads (0.5, 0.1), rest sums (-0.2, -0.9)
        let s0 = jsma_saliency(0.5, -0.2);
        let s1 = jsma_saliency(0.1, -0.9);
        assert!((s0 - 0.10).abs() < 1e-12);
        assert!((s1 - 0.09).abs() < 1e-12);
        assert!(s0 > s1);
    }

    #[test]
    fn jsma_immediate_success_changes_nothing() {
        let (model, data) = trained_mlp(Objective::Ce);
        let x = data.image(0);
        let (pred, _) = model.predict(&x).unwrap();
        let out = jsma(&model, &x, pred, 1.0, 10).unwrap();
        assert!(out.success);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x_star.data(), x.data());
    }

    #[test]
    fn cw_tanh_midpoint_and_margin_semantics() {
        // w = 0 maps to the domain midpoint
        assert_eq!(0.5 * 0f64.tanh(), 0.0);
        let (model, data) = trained_mlp(Objective::Ce);
        let x = data.image(6);
        let y = data.labels[6];
        let target = (y + 1) % 3;
        let params = CwParams { max_iters: 300, search_rounds: 5, ..Default::default() };
        let out = cw(&model, &x, target, &params).unwrap();
        if out.success {
            // success implies the target logit beats all others by >= kappa
            let (pred, _) = model.predict(&out.x_star).unwrap();
            assert_eq!(pred, target);
            let (_, logits) = model.infer_batch(&out.x_star).unwrap();
            let eff = model.effective_logits(logits.data());
            let rest = eff
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != target)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(eff[target] - rest >= -1e-9);
        }
        assert!(out.x_star.data().iter().all(|v| (PIXEL_MIN..=PIXEL_MAX).contains(v)));
    }

    #[test]
    fn cw_hc_zero_kappa_degenerates_to_cw() {
        let (model, data) = trained_mlp(Objective::Ce);
        let x = data.image(9);
        let target = (data.labels[9] + 1) % 3;
        let params = CwParams { max_iters: 120, search_rounds: 3, ..Default::default() };
        let hc_as_plain = CwParams { kappa: 0.0, ..params };
        let a = cw(&model, &x, target, &params).unwrap();
        let b = cw_core(&model, &x, target, &hc_as_plain, None).unwrap();
        assert_eq!(a.x_star.data(), b.x_star.data());
        assert_eq!(a.success, b.success);
    }

    #[test]
    fn rand_noise_bounds_and_determinism() {
        let (model, data) = trained_mlp(Objective::Ce);
        let x = data.image(4);
        let y = data.labels[4];
        let out = rand_noise(&model, &x, y, 0.0, 9).unwrap();
        assert_eq!(out.x_star.data(), x.data());
        let a = rand_noise(&model, &x, y, 0.04, 9).unwrap();
        let b = rand_noise(&model, &x, y, 0.04, 9).unwrap();
        assert_eq!(a.x_star.data(), b.x_star.data());
        let linf = a
            .x_star
            .data()
            .iter()
            .zip(x.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f64, f64::max);
        assert!(linf <= 0.04 + 1e-12);
    }

    #[test]
    fn rand_noise_mean_is_centered() {
        // empirical mean perturbation over many draws stays within 3 SE
        let eps = 0.04;
        let n = 100_000usize;
        let mut rng = stage_rng(123, "rand-noise");
        let mut sum = 0.0;
        for _ in 0..n {
            sum += rng.gen_range(-eps..eps);
        }
        let mean = sum / n as f64;
        let se = eps / (3f64.sqrt() * (n as f64).sqrt());
        assert!(mean.abs() < 3.0 * se, "mean {mean} exceeds 3 SE {se}");
    }

    #[test]
    fn config_defaults_match_protocol() {
        let cw_cfg = AttackConfig::new(AttackFamily::Cw);
        assert_eq!(cw_cfg.cw.step_size, 0.01);
        assert_eq!(cw_cfg.cw.search_rounds, 9);
        assert_eq!(cw_cfg.cw.max_iters, 10_000);
        assert_eq!(cw_cfg.cw.kappa, 0.0);
        let hc = AttackConfig::new(AttackFamily::CwHc);
        assert_eq!(hc.cw.kappa, 10.0);
        let rand = AttackConfig::new(AttackFamily::Rand);
        assert_eq!(rand.epsilon, 0.04);
        let jsma_cfg = AttackConfig::new(AttackFamily::Jsma);
        assert_eq!(jsma_cfg.max_pixels, 100);
    }

    #[test]
    fn attacks_stay_in_domain_property() {
        let (model, data) = trained_mlp(Objective::Rce);
        for i in 0..6 {
            let x = data.image(i);
            let y = data.labels[i];
            let outs = vec![
                fgsm(&model, &x, y, 0.3).unwrap(),
                bim(&model, &x, y, 0.3, 5).unwrap(),
                ilcm(&model, &x, 0.3, 5).unwrap(),
                rand_noise(&model, &x, y, 0.3, 1).unwrap(),
            ];
            for o in outs {
                assert!(o.x_star.data().iter().all(|v| (PIXEL_MIN..=PIXEL_MAX).contains(v)));
                let linf = o
                    .x_star
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(linf <= 0.3 + 1e-12);
            }
        }
    }
}
