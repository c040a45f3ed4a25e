//! Config-driven pipeline stages behind the `rcekit` binary: train, attack,
//! detect, eval, verify-theory.
//!
//! One JSON config describes a whole experiment; every stochastic stage
//! derives its RNG from the single top-level seed, so re-running a stage
//! with the same config reproduces its artifacts byte for byte.

use std::path::PathBuf;

use serde_json::Value;

use crate::attack::{self, AttackConfig, AttackFamily};
use crate::data::{self, Dataset};
use crate::detect::{self, DetectorState, Metric, Verdict};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::geometry;
use crate::model::{self, ArchId, NetworkModel, Objective, TrainConfig};
use crate::tensor::checkpoint;
use crate::tensor::optim::LrSchedule;
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Attack,
    Detect,
    Eval,
    VerifyTheory,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::Detect => "detect",
            Stage::Eval => "eval",
            Stage::VerifyTheory => "verify-theory",
        }
    }
}

#[derive(Debug, Clone)]
pub enum DatasetSpec {
    Mnist { dir: PathBuf },
    Cifar10 { dir: PathBuf },
    Blobs { classes: usize, per_class: usize, dim: usize, separation: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub batch_size: usize,
    pub steps: u64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub leak: f64,
    pub augment: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            batch_size: 128,
            steps: 2000,
            schedule: LrSchedule { boundaries: vec![1200, 1800], rates: vec![0.1, 0.01, 0.001] },
            momentum: 0.9,
            weight_decay: 0.0002,
            leak: 0.1,
            augment: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorSpec {
    pub metric: Metric,
    /// Kernel bandwidth; filled per objective when absent.
    pub sigma2: Option<f64>,
    pub q: f64,
    pub bank_cap: Option<usize>,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec { metric: Metric::Kdensity, sigma2: None, q: 5.0, bank_cap: None }
    }
}

#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub config: AttackConfig,
    /// How many test images the attack stage processes.
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct EvalSpec {
    /// One cohort is built per configured attack.
    pub attacks: Vec<AttackConfig>,
    pub cohort: usize,
    /// Accuracy-vs-epsilon families and grid.
    pub curve_families: Vec<AttackFamily>,
    pub eps_grid: Vec<f64>,
    pub curve_limit: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            attacks: vec![AttackConfig::new(AttackFamily::Fgsm)],
            cohort: 200,
            curve_families: vec![AttackFamily::Bim],
            eps_grid: vec![0.0, 0.02, 0.05, 0.1, 0.2, 0.3],
            curve_limit: 200,
        }
    }
}

/// A validated experiment description.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub dataset: DatasetSpec,
    pub objective: Objective,
    pub arch: ArchId,
    pub model: Option<PathBuf>,
    pub substitute_model: Option<PathBuf>,
    pub detector_path: Option<PathBuf>,
    pub train: TrainSpec,
    pub attack: Option<AttackSpec>,
    pub detector: DetectorSpec,
    pub eval: EvalSpec,
}

// ── Validation ──────────────────────────────────────────────────────────

struct Check<'a> {
    errors: Vec<String>,
    root: &'a Value,
}

impl<'a> Check<'a> {
    fn get<'b>(obj: &'b Value, path: &str) -> Option<&'b Value> {
        obj.get(path)
    }

    fn err(&mut self, path: &str, msg: &str) {
        self.errors.push(format!("{path}: {msg}"));
    }

    fn u64_at(&mut self, obj: &Value, path: &str, full: &str) -> Option<u64> {
        match Self::get(obj, path) {
            Some(v) => match v.as_u64() {
                Some(u) => Some(u),
                None => {
                    self.err(full, "expected a non-negative integer");
                    None
                }
            },
            None => None,
        }
    }

    fn f64_at(&mut self, obj: &Value, path: &str, full: &str) -> Option<f64> {
        match Self::get(obj, path) {
            Some(v) => match v.as_f64() {
                Some(f) if f.is_finite() => Some(f),
                _ => {
                    self.err(full, "expected a finite number");
                    None
                }
            },
            None => None,
        }
    }

    fn bool_at(&mut self, obj: &Value, path: &str, full: &str) -> Option<bool> {
        match Self::get(obj, path) {
            Some(v) => match v.as_bool() {
                Some(b) => Some(b),
                None => {
                    self.err(full, "expected a boolean");
                    None
                }
            },
            None => None,
        }
    }

    fn str_at<'b>(&mut self, obj: &'b Value, path: &str, full: &str) -> Option<&'b str> {
        match Self::get(obj, path) {
            Some(v) => match v.as_str() {
                Some(s) => Some(s),
                None => {
                    self.err(full, "expected a string");
                    None
                }
            },
            None => None,
        }
    }
}

fn parse_objective(v: &Value, check: &mut Check, path: &str) -> Option<Objective> {
    match serde_json::from_value::<Objective>(v.clone()) {
        Ok(o) => {
            if let Objective::LabelSmooth { lambda } = o {
                if lambda < 0.0 {
                    check.err(path, "lambda must be >= 0");
                    return None;
                }
            }
            Some(o)
        }
        Err(_) => {
            check.err(path, "expected \"ce\", \"rce\", or {\"label_smooth\":{\"lambda\":..}}");
            None
        }
    }
}

fn parse_dataset(v: &Value, check: &mut Check) -> Option<DatasetSpec> {
    let kind = check.str_at(v, "kind", "dataset.kind")?;
    match kind {
        "mnist" | "cifar10" => {
            let dir = check.str_at(v, "dir", "dataset.dir");
            let dir = match dir {
                Some(d) => PathBuf::from(d),
                None => {
                    check.err("dataset.dir", "required for mnist/cifar10");
                    return None;
                }
            };
            Some(if kind == "mnist" {
                DatasetSpec::Mnist { dir }
            } else {
                DatasetSpec::Cifar10 { dir }
            })
        }
        "blobs" => {
            let classes = check.u64_at(v, "classes", "dataset.classes").unwrap_or(3) as usize;
            let per_class = check.u64_at(v, "per_class", "dataset.per_class").unwrap_or(100) as usize;
            let dim = check.u64_at(v, "dim", "dataset.dim").unwrap_or(64) as usize;
            let separation = check.f64_at(v, "separation", "dataset.separation").unwrap_or(0.8);
            if separation <= 0.0 {
                check.err("dataset.separation", "must be positive");
                return None;
            }
            Some(DatasetSpec::Blobs { classes, per_class, dim, separation })
        }
        other => {
            check.err("dataset.kind", &format!("unknown dataset kind {other:?}"));
            None
        }
    }
}

fn parse_attack_config(v: &Value, check: &mut Check, base_path: &str) -> Option<AttackConfig> {
    let fam_str = check.str_at(v, "family", &format!("{base_path}.family"))?;
    let family: AttackFamily =
        match serde_json::from_value(Value::String(fam_str.to_string())) {
            Ok(f) => f,
            Err(_) => {
                check.err(
                    &format!("{base_path}.family"),
                    "expected one of fgsm, bim, ilcm, jsma, cw, cw_hc, cw_wb, rand",
                );
                return None;
            }
        };
    // start from the family defaults, then overlay what the JSON provides
    let mut cfg = AttackConfig::new(family);
    if let Some(e) = check.f64_at(v, "epsilon", &format!("{base_path}.epsilon")) {
        cfg.epsilon = e;
    }
    if let Some(r) = check.u64_at(v, "iters", &format!("{base_path}.iters")) {
        cfg.iters = r;
    }
    if let Some(o) = check.f64_at(v, "eps_offset", &format!("{base_path}.eps_offset")) {
        cfg.eps_offset = o;
    }
    if let Some(p) = check.u64_at(v, "max_pixels", &format!("{base_path}.max_pixels")) {
        cfg.max_pixels = p as usize;
    }
    if let Some(e) = check.f64_at(v, "eta", &format!("{base_path}.eta")) {
        cfg.eta = Some(e);
    }
    if let Some(s) = check.u64_at(v, "seed", &format!("{base_path}.seed")) {
        cfg.seed = s;
    }
    if let Some(cw) = v.get("cw") {
        if let Some(k) = check.f64_at(cw, "kappa", &format!("{base_path}.cw.kappa")) {
            cfg.cw.kappa = k;
        }
        if let Some(s) = check.f64_at(cw, "step_size", &format!("{base_path}.cw.step_size")) {
            cfg.cw.step_size = s;
        }
        if let Some(r) = check.u64_at(cw, "search_rounds", &format!("{base_path}.cw.search_rounds")) {
            cfg.cw.search_rounds = r as u32;
        }
        if let Some(m) = check.u64_at(cw, "max_iters", &format!("{base_path}.cw.max_iters")) {
            cfg.cw.max_iters = m as u32;
        }
        if let Some(c) = check.f64_at(cw, "initial_c", &format!("{base_path}.cw.initial_c")) {
            cfg.cw.initial_c = c;
        }
        if let Some(a) = check.bool_at(cw, "abort_early", &format!("{base_path}.cw.abort_early")) {
            cfg.cw.abort_early = a;
        }
    }
    if let Err(e) = cfg.validate() {
        check.err(base_path, &e.to_string());
        return None;
    }
    Some(cfg)
}

/// Type-checks the JSON text, fills defaults, and returns either a complete
/// config or the list of every violation found.
pub fn validate_config(text: &str) -> std::result::Result<RunConfig, Vec<String>> {
    let root: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return Err(vec![format!("$: invalid JSON: {e}")]),
    };
    if !root.is_object() {
        return Err(vec!["$: config must be a JSON object".into()]);
    }
    let mut check = Check { errors: Vec::new(), root: &root };

    let seed = match root.get("seed") {
        Some(v) => v.as_u64().or_else(|| {
            check.err("seed", "expected a non-negative integer");
            None
        }),
        None => {
            check.err("seed", "required (stochastic stages need one seed)");
            None
        }
    };
    let out = match root.get("out") {
        Some(v) => v.as_str().map(PathBuf::from).or_else(|| {
            check.err("out", "expected a string path");
            None
        }),
        None => {
            check.err("out", "required (artifact directory)");
            None
        }
    };
    let dataset = match root.get("dataset") {
        Some(v) => parse_dataset(v, &mut check),
        None => {
            check.err("dataset", "required (mnist / cifar10 / blobs)");
            None
        }
    };

    let threads = check.u64_at(&root, "threads", "threads").map(|t| t as usize);
    let objective = match root.get("objective") {
        Some(v) => parse_objective(v, &mut check, "objective").unwrap_or(Objective::Ce),
        None => Objective::Ce,
    };
    let arch = match root.get("arch") {
        Some(v) => match serde_json::from_value::<ArchId>(v.clone()) {
            Ok(a) => a,
            Err(_) => {
                check.err("arch", "expected desk-cnn, desk-cnn-deep, desk-mlp, or linear");
                ArchId::DeskCnn
            }
        },
        None => ArchId::DeskCnn,
    };
    let model_path = check.str_at(&root, "model", "model").map(PathBuf::from);
    let substitute = check.str_at(&root, "substitute_model", "substitute_model").map(PathBuf::from);
    let detector_path = check.str_at(&root, "detector_path", "detector_path").map(PathBuf::from);

    let mut train = TrainSpec::default();
    if let Some(t) = root.get("train") {
        if let Some(b) = check.u64_at(t, "batch_size", "train.batch_size") {
            if b == 0 {
                check.err("train.batch_size", "must be >= 1");
            } else {
                train.batch_size = b as usize;
            }
        }
        if let Some(s) = check.u64_at(t, "steps", "train.steps") {
            train.steps = s;
        }
        if let Some(m) = check.f64_at(t, "momentum", "train.momentum") {
            train.momentum = m;
        }
        if let Some(w) = check.f64_at(t, "weight_decay", "train.weight_decay") {
            train.weight_decay = w;
        }
        if let Some(l) = check.f64_at(t, "leak", "train.leak") {
            if !(0.0..1.0).contains(&l) {
                check.err("train.leak", "must be in [0,1)");
            } else {
                train.leak = l;
            }
        }
        if let Some(a) = check.bool_at(t, "augment", "train.augment") {
            train.augment = a;
        }
        let boundaries = t.get("lr_boundaries").cloned();
        let rates = t.get("lr_rates").cloned();
        if boundaries.is_some() || rates.is_some() {
            let b: Option<Vec<u64>> =
                boundaries.and_then(|v| serde_json::from_value(v).ok());
            let r: Option<Vec<f64>> = rates.and_then(|v| serde_json::from_value(v).ok());
            match (b, r) {
                (Some(boundaries), Some(rates)) => {
                    let sched = LrSchedule { boundaries, rates };
                    if let Err(e) = sched.validate() {
                        check.err("train.lr_rates", &e.to_string());
                    } else {
                        train.schedule = sched;
                    }
                }
                _ => check.err(
                    "train.lr_boundaries",
                    "lr_boundaries (ints) and lr_rates (floats) must both be given",
                ),
            }
        }
    }

    let attack = match root.get("attack") {
        Some(a) => {
            let cfg = parse_attack_config(a, &mut check, "attack");
            let count = check.u64_at(a, "count", "attack.count").unwrap_or(100) as usize;
            cfg.map(|config| AttackSpec { config, count })
        }
        None => None,
    };

    let mut detector = DetectorSpec::default();
    if let Some(d) = root.get("detector") {
        if let Some(m) = d.get("metric") {
            match serde_json::from_value::<Metric>(m.clone()) {
                Ok(metric) => detector.metric = metric,
                Err(_) => check.err("detector.metric", "expected confidence, non_me, or kdensity"),
            }
        }
        if let Some(s) = check.f64_at(d, "sigma2", "detector.sigma2") {
            if s <= 0.0 {
                check.err("detector.sigma2", "must be positive");
            } else {
                detector.sigma2 = Some(s);
            }
        }
        if let Some(q) = check.f64_at(d, "q", "detector.q") {
            if !(0.0..100.0).contains(&q) {
                check.err("detector.q", "must be in [0,100)");
            } else {
                detector.q = q;
            }
        }
        if let Some(c) = check.u64_at(d, "bank_cap", "detector.bank_cap") {
            detector.bank_cap = Some(c as usize);
        }
    }

    let mut eval_spec = EvalSpec::default();
    if let Some(e) = root.get("eval") {
        if let Some(attacks) = e.get("attacks") {
            match attacks.as_array() {
                Some(arr) => {
                    let mut list = Vec::new();
                    for (i, a) in arr.iter().enumerate() {
                        if let Some(cfg) = parse_attack_config(a, &mut check, &format!("eval.attacks[{i}]")) {
                            list.push(cfg);
                        }
                    }
                    eval_spec.attacks = list;
                }
                None => check.err("eval.attacks", "expected an array of attack configs"),
            }
        }
        if let Some(c) = check.u64_at(e, "cohort", "eval.cohort") {
            eval_spec.cohort = c as usize;
        }
        if let Some(limit) = check.u64_at(e, "curve_limit", "eval.curve_limit") {
            eval_spec.curve_limit = limit as usize;
        }
        if let Some(g) = e.get("eps_grid") {
            match serde_json::from_value::<Vec<f64>>(g.clone()) {
                Ok(grid) if grid.iter().all(|v| *v >= 0.0) => eval_spec.eps_grid = grid,
                _ => check.err("eval.eps_grid", "expected an array of non-negative numbers"),
            }
        }
        if let Some(fams) = e.get("curve_families") {
            match serde_json::from_value::<Vec<AttackFamily>>(fams.clone()) {
                Ok(f) => eval_spec.curve_families = f,
                Err(_) => check.err("eval.curve_families", "expected an array of attack families"),
            }
        }
    }

    let _ = check.root;
    if !check.errors.is_empty() {
        return Err(check.errors);
    }
    Ok(RunConfig {
        seed: seed.expect("checked above"),
        out: out.expect("checked above"),
        threads,
        dataset: dataset.expect("checked above"),
        objective,
        arch,
        model: model_path,
        substitute_model: substitute,
        detector_path,
        train,
        attack,
        detector,
        eval: eval_spec,
    })
}

// ── Dataset loading ─────────────────────────────────────────────────────

/// Loads the (train, test) pair the spec describes.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Mnist { dir } => {
            let train = data::load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
                "train",
            )?;
            let test = data::load_mnist_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
                "test",
            )?;
            Ok((train, test))
        }
        DatasetSpec::Cifar10 { dir } => {
            let train_paths: Vec<PathBuf> =
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let train = data::load_cifar_binary(&train_paths, "train")?;
            let test = data::load_cifar_binary(&[dir.join("test_batch.bin")], "test")?;
            Ok((train, test))
        }
        DatasetSpec::Blobs { classes, per_class, dim, separation } => {
            let train = data::synthetic_blobs(*classes, *per_class, *dim, *separation, seed)?;
            let test_n = (*per_class / 5).max(1);
            let test = data::synthetic_blobs(*classes, test_n, *dim, *separation, seed ^ 0x7e57)?;
            Ok((train, test))
        }
    }
}

fn model_prefix(cfg: &RunConfig) -> PathBuf {
    cfg.model.clone().unwrap_or_else(|| cfg.out.join("model"))
}

fn load_model(cfg: &RunConfig) -> Result<NetworkModel> {
    NetworkModel::load(&model_prefix(cfg))
}

fn fit_detector(cfg: &RunConfig, model: &NetworkModel, train: &Dataset) -> Result<DetectorState> {
    let sigma2 = cfg.detector.sigma2.unwrap_or_else(|| detect::default_bandwidth(model.objective()));
    match cfg.detector.metric {
        Metric::Kdensity => detect::kdensity_fit(model, train, sigma2, cfg.detector.bank_cap, cfg.seed),
        m => Ok(DetectorState::for_metric(m, sigma2)),
    }
}

// ── Stages ──────────────────────────────────────────────────────────────

fn stage_train(cfg: &RunConfig) -> Result<()> {
    let (train_ds, test_ds) = load_dataset(&cfg.dataset, cfg.seed)?;
    let [c, h, w] = train_ds.item_shape();
    let mut model = NetworkModel::init(
        cfg.arch,
        [c, h, w],
        train_ds.num_classes,
        cfg.train.leak,
        cfg.objective,
        cfg.seed,
    )?;
    let tc = TrainConfig {
        objective: cfg.objective,
        batch_size: cfg.train.batch_size,
        steps: cfg.train.steps,
        schedule: cfg.train.schedule.clone(),
        momentum: cfg.train.momentum,
        weight_decay: cfg.train.weight_decay,
        seed: cfg.seed,
        augment: cfg.train.augment,
    };
    let trace = model::train(&mut model, &train_ds, &tc)?;
    std::fs::create_dir_all(&cfg.out)?;
    model.save(&model_prefix(cfg))?;
    let mut csv = String::from("step,loss\n");
    for (s, l) in &trace {
        csv.push_str(&format!("{s},{l}\n"));
    }
    std::fs::write(cfg.out.join("loss_trace.csv"), csv)?;
    let acc = model.accuracy(&test_ds, 256)?;
    println!("train: done, test accuracy {:.4}", acc);
    Ok(())
}

fn stage_attack(cfg: &RunConfig) -> Result<()> {
    let spec = cfg
        .attack
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("attack stage needs an attack block".into()))?;
    let (train_ds, test_ds) = load_dataset(&cfg.dataset, cfg.seed)?;
    let model = load_model(cfg)?;
    let mut attack_cfg = spec.config.clone();

    // the white-box family needs a fitted detector and the hinge offset
    let detector = if attack_cfg.family == AttackFamily::CwWb {
        let det = match &cfg.detector_path {
            Some(p) => DetectorState::load(p)?,
            None => fit_detector(cfg, &model, &train_ds)?,
        };
        if attack_cfg.eta.is_none() {
            attack_cfg.eta = Some(attack::median_neg_log_kd(&det, &model, &train_ds)?);
        }
        Some(det)
    } else {
        None
    };
    // score columns use a kernel-density detector regardless of family
    let scorer = match &detector {
        Some(d) => d.clone(),
        None => fit_detector(cfg, &model, &train_ds)?,
    };

    let n = spec.count.min(test_ds.len());
    use rayon::prelude::*;
    let rows: Vec<Result<(usize, eval::CsvAttackRow, Tensor)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = test_ds.image(i);
            let y = test_ds.labels[i];
            let target = if attack_cfg.family.targeted() {
                Some(eval::pick_target(y, model.num_classes(), cfg.seed, i))
            } else {
                None
            };
            let mut per_image = attack_cfg.clone();
            per_image.seed = cfg.seed ^ i as u64;
            let out = attack::run_attack(&model, detector.as_ref(), &x, y, target, &per_image)?;
            let dist = eval::distortion(&x, &out.x_star)?;
            let probs = model.probs(&out.x_star)?;
            let row = eval::CsvAttackRow {
                input_id: i,
                family: format!("{:?}", attack_cfg.family).to_lowercase(),
                epsilon: attack_cfg.epsilon,
                kappa: attack_cfg.cw.kappa,
                success: out.success,
                distortion: dist,
                f2: out.f2,
                confidence: detect::confidence_metric(&probs),
                non_me: detect::non_me_metric(&probs)?,
                kdensity: scorer.score(&model, &out.x_star)?,
            };
            Ok((i, row, out.x_star))
        })
        .collect();

    std::fs::create_dir_all(&cfg.out)?;
    let mut csv =
        String::from("input_id,family,epsilon,kappa,success,distortion,f2,confidence,non_me,kdensity\n");
    let mut adv_tensors: Vec<(String, Tensor)> = Vec::new();
    for r in rows {
        let (i, row, x_star) = r?;
        csv.push_str(&row.to_line());
        adv_tensors.push((format!("adv_{i:05}"), x_star));
    }
    std::fs::write(cfg.out.join("attacks.csv"), csv)?;
    checkpoint::save(&cfg.out.join("adversarial.rce"), &adv_tensors)?;
    println!("attack: {} inputs processed", n);
    Ok(())
}

fn stage_detect(cfg: &RunConfig) -> Result<()> {
    let (train_ds, test_ds) = load_dataset(&cfg.dataset, cfg.seed)?;
    let model = load_model(cfg)?;
    let mut det = fit_detector(cfg, &model, &train_ds)?;
    detect::threshold_select(&mut det, &model, &train_ds, cfg.detector.q)?;
    std::fs::create_dir_all(&cfg.out)?;
    det.save(&cfg.out.join("detector"))?;

    let mut csv = String::from("input_id,score,verdict\n");
    let mut labeled = 0usize;
    for i in 0..test_ds.len() {
        let x = test_ds.image(i);
        let score = det.score(&model, &x)?;
        let verdict = detect::thresholded_predict(&det, &model, &x)?;
        let v = match verdict {
            Verdict::Label(l) => {
                labeled += 1;
                l.to_string()
            }
            Verdict::NotSure => "NOT_SURE".to_string(),
        };
        csv.push_str(&format!("{i},{score},{v}\n"));
    }
    std::fs::write(cfg.out.join("detect.csv"), csv)?;
    println!(
        "detect: threshold {:?}, {}/{} test points labeled",
        det.threshold(),
        labeled,
        test_ds.len()
    );
    Ok(())
}

fn stage_eval(cfg: &RunConfig) -> Result<()> {
    let (train_ds, test_ds) = load_dataset(&cfg.dataset, cfg.seed)?;
    let model = load_model(cfg)?;
    let objective_name = format!("{:?}", model.objective()).to_lowercase();
    let dataset_name = match &cfg.dataset {
        DatasetSpec::Mnist { .. } => "mnist",
        DatasetSpec::Cifar10 { .. } => "cifar10",
        DatasetSpec::Blobs { .. } => "blobs",
    };
    let sigma2 = cfg.detector.sigma2.unwrap_or_else(|| detect::default_bandwidth(model.objective()));
    let kdet = detect::kdensity_fit(&model, &train_ds, sigma2, cfg.detector.bank_cap, cfg.seed)?;
    let conf_det = DetectorState::for_metric(Metric::Confidence, sigma2);
    let nonme_det = DetectorState::for_metric(Metric::NonMe, sigma2);

    let meta = serde_json::json!({
        "seed": cfg.seed,
        "sigma2": sigma2,
        "objective": objective_name,
        "cohort": cfg.eval.cohort,
        "note": "AUC orientation: probability a normal example outscores an adversarial one; raw values are reported without flipping",
    });
    let mut report = EvalReport::new(&format!("seed{}", cfg.seed), dataset_name, meta);

    for attack_cfg in &cfg.eval.attacks {
        let fam = format!("{:?}", attack_cfg.family).to_lowercase();
        let mut per = attack_cfg.clone();
        if per.family == AttackFamily::CwWb && per.eta.is_none() {
            per.eta = Some(attack::median_neg_log_kd(&kdet, &model, &train_ds)?);
        }
        let det_for_attack =
            if per.family == AttackFamily::CwWb { Some(&kdet) } else { None };
        let cohort = eval::build_detection_cohort(
            &model,
            det_for_attack,
            &per,
            &test_ds,
            cfg.eval.cohort,
            cfg.seed,
        )?;
        let n = cohort.normal.len();
        if n == 0 {
            report.push(&objective_name, &fam, "cohort_empty", Some(per.epsilon), None, 0.0, 0);
            continue;
        }
        for (met, st) in [("confidence", &conf_det), ("non_me", &nonme_det), ("kdensity", &kdet)] {
            let auc = eval::cohort_auc(st, &model, &cohort)?;
            report.push(
                &objective_name,
                &fam,
                met,
                Some(per.epsilon),
                Some(per.cw.kappa),
                auc,
                n,
            );
        }
        if matches!(per.family, AttackFamily::Cw | AttackFamily::CwHc | AttackFamily::CwWb) {
            let d = eval::minimal_distortions(&cohort)?;
            report.push(
                &objective_name,
                &fam,
                "mean_distortion",
                None,
                Some(per.cw.kappa),
                d.mean,
                d.per_image.len(),
            );
            report.push(
                &objective_name,
                &fam,
                "cw_failures",
                None,
                Some(per.cw.kappa),
                d.failures as f64,
                cohort.attempted,
            );
        }
        if per.family == AttackFamily::CwWb {
            if let Some(ratio) = eval::f2_positive_ratio(&cohort.outcomes) {
                report.push(&objective_name, &fam, "f2_positive_ratio", None, Some(per.cw.kappa), ratio, n);
            }
        }
    }

    for fam in &cfg.eval.curve_families {
        let series = eval::accuracy_vs_epsilon(
            &model,
            *fam,
            10,
            &cfg.eval.eps_grid,
            &test_ds,
            cfg.eval.curve_limit,
            cfg.seed,
        )?;
        let fam_name = format!("{fam:?}").to_lowercase();
        for (eps, acc) in series {
            report.push(
                &objective_name,
                &fam_name,
                "accuracy",
                Some(eps),
                None,
                acc,
                cfg.eval.curve_limit.min(test_ds.len()),
            );
        }
    }

    if let Some(sub_path) = &cfg.substitute_model {
        let substitute = NetworkModel::load(sub_path)?;
        let mut per = cfg
            .eval
            .attacks
            .first()
            .cloned()
            .unwrap_or_else(|| AttackConfig::new(AttackFamily::Fgsm));
        if per.family == AttackFamily::CwWb && per.eta.is_none() {
            // the adversary only sees the substitute; fit the hinge there
            let sub_det = detect::kdensity_fit(
                &substitute,
                &train_ds,
                detect::default_bandwidth(substitute.objective()),
                cfg.detector.bank_cap,
                cfg.seed,
            )?;
            per.eta = Some(attack::median_neg_log_kd(&sub_det, &substitute, &train_ds)?);
        }
        let tr = eval::transfer_eval(
            &substitute,
            &model,
            Some(&kdet),
            &per,
            &test_ds,
            cfg.eval.cohort,
            cfg.seed,
        )?;
        let fam = format!("{:?}", per.family).to_lowercase();
        report.push(&objective_name, &fam, "transfer_rate", None, None, tr.transfer_rate, tr.substitute_success);
        if let Some(auc) = tr.target_auc {
            report.push(&objective_name, &fam, "transfer_kdensity_auc", None, None, auc, tr.transferred);
        }
    }

    report.emit(&cfg.out)?;
    println!("eval: {} measurements written to {}", report.rows.len(), cfg.out.display());
    Ok(())
}

fn stage_verify_theory(seed: u64) -> Result<()> {
    let reports = geometry::run_verification(100, 10, 2000, seed)?;
    let mut all_pass = true;
    println!("{:<22} {:>6} {:>8} {:>8} {:>14}", "theorem", "status", "trials", "skipped", "max_violation");
    for r in &reports {
        all_pass &= r.passed;
        println!(
            "{:<22} {:>6} {:>8} {:>8} {:>14.3e}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.trials,
            r.skipped,
            r.max_violation
        );
        if let Some(w) = &r.witness {
            println!("  witness: {w}");
        }
    }
    if all_pass {
        Ok(())
    } else {
        Err(Error::InvalidArgument("theorem verification failed".into()))
    }
}

/// Runs one stage of a validated config. Artifacts land under `config.out`.
pub fn run(stage: Stage, config: &RunConfig) -> Result<()> {
    if let Some(t) = config.threads {
        // setting the global pool twice is fine to ignore; first call wins
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match stage {
        Stage::Train => stage_train(config),
        Stage::Attack => stage_attack(config),
        Stage::Detect => stage_detect(config),
        Stage::Eval => stage_eval(config),
        Stage::VerifyTheory => stage_verify_theory(config.seed),
    }
}

/// Verify-theory without a config file.
pub fn run_verify_theory_default(seed: u64) -> Result<()> {
    stage_verify_theory(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_lists_all_required_fields() {
        let errs = validate_config("{}").unwrap_err();
        let joined = errs.join("\n");
        assert!(joined.contains("seed"), "{joined}");
        assert!(joined.contains("out"), "{joined}");
        assert!(joined.contains("dataset"), "{joined}");
        assert_eq!(errs.len(), 3);
    }

    #[test]
    fn invalid_json_reports_once() {
        let errs = validate_config("{nope").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].contains("invalid JSON"));
    }

    #[test]
    fn multiple_violations_all_listed() {
        let errs = validate_config(
            r#"{"seed": -1, "out": 5, "dataset": {"kind": "unknown"},
                "train": {"batch_size": 0, "leak": 1.5}}"#,
        )
        .unwrap_err();
        let joined = errs.join("\n");
        assert!(joined.contains("seed"));
        assert!(joined.contains("out"));
        assert!(joined.contains("dataset.kind"));
        assert!(joined.contains("train.batch_size"));
        assert!(joined.contains("train.leak"));
    }

    #[test]
    fn defaults_fill_cw_protocol_values() {
        let cfg = validate_config(
            r#"{"seed": 1, "out": "o", "dataset": {"kind": "blobs"},
                "attack": {"family": "cw_hc"}}"#,
        )
        .unwrap();
        let a = cfg.attack.unwrap();
        assert_eq!(a.config.cw.kappa, 10.0);
        assert_eq!(a.config.cw.search_rounds, 9);
        assert_eq!(a.config.cw.max_iters, 10_000);
        assert_eq!(a.config.cw.step_size, 0.01);

        let cfg = validate_config(
            r#"{"seed": 1, "out": "o", "dataset": {"kind": "blobs"},
                "attack": {"family": "rand"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.attack.unwrap().config.epsilon, 0.04);
    }

    #[test]
    fn explicit_kappa_overrides_family_default() {
        let cfg = validate_config(
            r#"{"seed": 1, "out": "o", "dataset": {"kind": "blobs"},
                "attack": {"family": "cw_hc", "cw": {"kappa": 5.0}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.attack.unwrap().config.cw.kappa, 5.0);
    }

    #[test]
    fn objective_and_arch_parse() {
        let cfg = validate_config(
            r#"{"seed": 3, "out": "o", "dataset": {"kind": "blobs"},
                "objective": {"label_smooth": {"lambda": 0.5}}, "arch": "desk-mlp"}"#,
        )
        .unwrap();
        assert_eq!(cfg.objective, Objective::LabelSmooth { lambda: 0.5 });
        assert_eq!(cfg.arch, ArchId::DeskMlp);
        assert!(validate_config(
            r#"{"seed": 3, "out": "o", "dataset": {"kind": "blobs"}, "objective": "nope"}"#
        )
        .is_err());
    }

    #[test]
    fn blobs_roundtrip_through_loader() {
        let cfg = validate_config(
            r#"{"seed": 9, "out": "o",
                "dataset": {"kind": "blobs", "classes": 3, "per_class": 10, "dim": 16, "separation": 0.8}}"#,
        )
        .unwrap();
        let (train, test) = load_dataset(&cfg.dataset, cfg.seed).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 6);
        assert_eq!(train.num_classes, 3);
    }
}
