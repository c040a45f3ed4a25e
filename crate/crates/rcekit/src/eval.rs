//! Evaluation protocol: ROC-AUC of detection metrics over paired cohorts,
//! accuracy-vs-epsilon curves, minimal distortions, detector-hinge ratios,
//! black-box transfer, and machine-readable reports.
//!
//! Per-image attack jobs are independent and run on a rayon pool against
//! frozen models; results are collected in input order so reports are
//! byte-identical no matter the thread count.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackFamily, AttackOutcome};
use crate::data::Dataset;
use crate::detect::DetectorState;
use crate::error::{Error, Result};
use crate::model::NetworkModel;
use crate::tensor::Tensor;
use crate::util::stage_rng;

/// Exact ROC-AUC by pair counting: the probability that a random normal
/// example outscores a random adversarial one, ties counted half. Values
/// above 0.5 mean the metric puts adversarial inputs below normal ones.
///
/// Counting is integral and the complementary call divides the same
/// integers, so roc_auc(a, b) + roc_auc(b, a) == 1.0 exactly.
pub fn roc_auc(normal_scores: &[f64], adversarial_scores: &[f64]) -> Result<f64> {
    if normal_scores.is_empty() || adversarial_scores.is_empty() {
        return Err(Error::InvalidArgument("roc_auc needs two non-empty score sets".into()));
    }
    if normal_scores.iter().chain(adversarial_scores).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("roc_auc scores must not be NaN".into()));
    }
    let mut adv: Vec<f64> = adversarial_scores.to_vec();
    adv.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let mut wins = 0u64; // normal strictly above adversarial
    let mut ties = 0u64;
    for &s in normal_scores {
        let below = adv.partition_point(|&a| a < s) as u64;
        let not_above = adv.partition_point(|&a| a <= s) as u64;
        wins += below;
        ties += not_above - below;
    }
    let den = 2 * (normal_scores.len() as u64) * (adversarial_scores.len() as u64);
    let n1 = 2 * wins + ties;
    let n2 = den - n1;
    // dividing the smaller numerator keeps x and 1-x exactly complementary
    Ok(if n1 <= n2 { n1 as f64 / den as f64 } else { 1.0 - n2 as f64 / den as f64 })
}

/// Root-mean-square pixel distance on the 0-255 scale: ||x - x*||_2 / sqrt(d)
/// after mapping pixels from [-0.5, 0.5] to [0, 255].
pub fn distortion(x: &Tensor, x_star: &Tensor) -> Result<f64> {
    if x.shape() != x_star.shape() {
        return Err(Error::shape("distortion", "inputs differ in shape"));
    }
    let d = x.numel() as f64;
    let ss: f64 = x
        .data()
        .iter()
        .zip(x_star.data())
        .map(|(&a, &b)| {
            let diff = (a - b) * 255.0;
            diff * diff
        })
        .sum();
    Ok((ss / d).sqrt())
}

/// Paired normal/adversarial cohort: test points the model classifies
/// correctly whose attacked versions fool it.
pub struct Cohort {
    pub normal: Vec<Tensor>,
    pub adversarial: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub outcomes: Vec<AttackOutcome>,
    /// Points processed (correctly classified candidates attacked).
    pub attempted: usize,
}

/// Seeded target class != y for targeted families.
pub fn pick_target(y: usize, l: usize, seed: u64, idx: usize) -> usize {
    let mut rng = stage_rng(seed, &format!("target-{idx}"));
    let t = rng.gen_range(0..l - 1);
    if t >= y {
        t + 1
    } else {
        t
    }
}

/// Attacks up to `max_candidates` correctly classified test points and
/// keeps the pairs where the attack succeeded (misclassification, or target
/// hit for targeted families).
pub fn build_detection_cohort(
    model: &NetworkModel,
    detector: Option<&DetectorState>,
    cfg: &AttackConfig,
    test: &Dataset,
    max_candidates: usize,
    seed: u64,
) -> Result<Cohort> {
    cfg.validate()?;
    let l = model.num_classes();
    let mut candidates: Vec<(usize, Tensor, usize)> = Vec::new();
    for i in 0..test.len() {
        if candidates.len() >= max_candidates {
            break;
        }
        let x = test.image(i);
        let y = test.labels[i];
        if model.predict(&x)?.0 == y {
            candidates.push((i, x, y));
        }
    }

    let results: Vec<Result<(usize, Tensor, usize, AttackOutcome)>> = candidates
        .into_par_iter()
        .map(|(i, x, y)| {
            let target = if cfg.family.targeted() {
                Some(pick_target(y, l, seed, i))
            } else {
                None
            };
            let mut attack_cfg = cfg.clone();
            attack_cfg.seed = seed ^ i as u64;
            let out = run_attack(model, detector, &x, y, target, &attack_cfg)?;
            Ok((i, x, y, out))
        })
        .collect();

    let mut cohort = Cohort {
        normal: Vec::new(),
        adversarial: Vec::new(),
        labels: Vec::new(),
        outcomes: Vec::new(),
        attempted: 0,
    };
    for r in results {
        let (_, x, y, out) = r?;
        cohort.attempted += 1;
        if out.success {
            cohort.normal.push(x);
            cohort.adversarial.push(out.x_star.clone());
            cohort.labels.push(y);
            cohort.outcomes.push(out);
        }
    }
    Ok(cohort)
}

/// Detector scores for a list of single images.
pub fn score_set(state: &DetectorState, model: &NetworkModel, xs: &[Tensor]) -> Result<Vec<f64>> {
    xs.iter().map(|x| state.score(model, x)).collect()
}

/// AUC of one metric over a cohort: normal scores vs adversarial scores.
pub fn cohort_auc(state: &DetectorState, model: &NetworkModel, cohort: &Cohort) -> Result<f64> {
    if cohort.normal.is_empty() {
        return Err(Error::InvalidArgument(
            "empty cohort: the attack never succeeded, AUC skipped".into(),
        ));
    }
    let normal = score_set(state, model, &cohort.normal)?;
    let adv = score_set(state, model, &cohort.adversarial)?;
    roc_auc(&normal, &adv)
}

/// Classification accuracy on attacked inputs for each epsilon in the grid
/// (thresholding disabled). epsilon = 0 reproduces clean accuracy.
pub fn accuracy_vs_epsilon(
    model: &NetworkModel,
    family: AttackFamily,
    iters: u64,
    eps_grid: &[f64],
    test: &Dataset,
    limit: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let n = limit.min(test.len());
    let mut series = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let hits: Vec<Result<bool>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = test.image(i);
                let y = test.labels[i];
                if eps == 0.0 {
                    return Ok(model.predict(&x)?.0 == y);
                }
                let mut cfg = AttackConfig::new(family);
                cfg.epsilon = eps;
                cfg.iters = iters;
                cfg.seed = seed ^ i as u64;
                let target = if family.targeted() {
                    Some(pick_target(y, model.num_classes(), seed, i))
                } else {
                    None
                };
                let out = run_attack(model, None, &x, y, target, &cfg)?;
                Ok(model.predict(&out.x_star)?.0 == y)
            })
            .collect();
        let mut correct = 0usize;
        for h in hits {
            if h? {
                correct += 1;
            }
        }
        series.push((eps, correct as f64 / n as f64));
    }
    Ok(series)
}

/// Minimal distortions of successful C&W attacks plus the failure count.
pub struct DistortionSummary {
    pub per_image: Vec<f64>,
    pub mean: f64,
    pub failures: usize,
}

/// Mean minimal distortion of a C&W-family cohort; failed searches are
/// excluded from the mean but counted.
pub fn minimal_distortions(cohort: &Cohort) -> Result<DistortionSummary> {
    let mut per_image = Vec::new();
    for (x, out) in cohort.normal.iter().zip(&cohort.outcomes) {
        per_image.push(distortion(x, &out.x_star)?);
    }
    let failures = cohort.attempted - cohort.normal.len();
    let mean = if per_image.is_empty() {
        f64::NAN
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    };
    Ok(DistortionSummary { per_image, mean, failures })
}

/// Fraction of successful attacks whose returned point still trips the
/// detector hinge (f2 > 0). None when there were no successes.
pub fn f2_positive_ratio(outcomes: &[AttackOutcome]) -> Option<f64> {
    let successes: Vec<&AttackOutcome> = outcomes.iter().filter(|o| o.success).collect();
    if successes.is_empty() {
        return None;
    }
    let positive = successes
        .iter()
        .filter(|o| o.f2.map(|v| v > 0.0).unwrap_or(false))
        .count();
    Some(positive as f64 / successes.len() as f64)
}

/// Black-box transfer: attacks crafted on the substitute, measured on the
/// target model (misclassification rate over substitute successes) plus the
/// target-side detector AUC over transfer-successful pairs.
pub struct TransferReport {
    pub substitute_success: usize,
    pub transferred: usize,
    pub transfer_rate: f64,
    pub target_auc: Option<f64>,
}

pub fn transfer_eval(
    substitute: &NetworkModel,
    target_model: &NetworkModel,
    detector_on_target: Option<&DetectorState>,
    cfg: &AttackConfig,
    test: &Dataset,
    max_candidates: usize,
    seed: u64,
) -> Result<TransferReport> {
    let cohort = build_detection_cohort(substitute, None, cfg, test, max_candidates, seed)?;
    let mut transferred = 0usize;
    let mut normal_kept = Vec::new();
    let mut adv_kept = Vec::new();
    for ((x, adv), &y) in cohort.normal.iter().zip(&cohort.adversarial).zip(&cohort.labels) {
        // only points the target classifies correctly count for detection
        if target_model.predict(x)?.0 != y {
            continue;
        }
        if target_model.predict(adv)?.0 != y {
            transferred += 1;
            normal_kept.push(x.clone());
            adv_kept.push(adv.clone());
        }
    }
    let transfer_rate = if cohort.normal.is_empty() {
        0.0
    } else {
        transferred as f64 / cohort.normal.len() as f64
    };
    let target_auc = match detector_on_target {
        Some(det) if !normal_kept.is_empty() => {
            let ns = score_set(det, target_model, &normal_kept)?;
            let advs = score_set(det, target_model, &adv_kept)?;
            Some(roc_auc(&ns, &advs)?)
        }
        _ => None,
    };
    Ok(TransferReport {
        substitute_success: cohort.normal.len(),
        transferred,
        transfer_rate,
        target_auc,
    })
}

/// One line of the attack-stage CSV.
#[derive(Debug, Clone)]
pub struct CsvAttackRow {
    pub input_id: usize,
    pub family: String,
    pub epsilon: f64,
    pub kappa: f64,
    pub success: bool,
    pub distortion: f64,
    pub f2: Option<f64>,
    pub confidence: f64,
    pub non_me: f64,
    pub kdensity: f64,
}

impl CsvAttackRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            self.input_id,
            self.family,
            self.epsilon,
            self.kappa,
            self.success,
            self.distortion,
            self.f2.map(|v| v.to_string()).unwrap_or_default(),
            self.confidence,
            self.non_me,
            self.kdensity
        )
    }
}

// ── Reports ─────────────────────────────────────────────────────────────

/// One measurement row; the CSV schema is exactly these fields in order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeasureRow {
    pub run_id: String,
    pub dataset: String,
    pub objective: String,
    pub attack: String,
    pub metric: String,
    pub epsilon: Option<f64>,
    pub kappa: Option<f64>,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub run_id: String,
    pub dataset: String,
    pub rows: Vec<MeasureRow>,
    /// Config blobs and seeds that produced the measurements.
    pub meta: serde_json::Value,
}

impl EvalReport {
    pub fn new(run_id: &str, dataset: &str, meta: serde_json::Value) -> Self {
        EvalReport { run_id: run_id.into(), dataset: dataset.into(), rows: Vec::new(), meta }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        objective: &str,
        attack: &str,
        metric: &str,
        epsilon: Option<f64>,
        kappa: Option<f64>,
        value: f64,
        n: usize,
    ) {
        self.rows.push(MeasureRow {
            run_id: self.run_id.clone(),
            dataset: self.dataset.clone(),
            objective: objective.into(),
            attack: attack.into(),
            metric: metric.into(),
            epsilon,
            kappa,
            value,
            n,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run_id,dataset,objective,attack,metric,epsilon,kappa,value,n\n");
        for r in &self.rows {
            let eps = r.epsilon.map(|v| v.to_string()).unwrap_or_default();
            let kap = r.kappa.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.run_id, r.dataset, r.objective, r.attack, r.metric, eps, kap, r.value, r.n
            ));
        }
        s
    }

    /// Writes `report.csv` and `report.json` under `dir`.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut csv = std::fs::File::create(dir.join("report.csv"))?;
        csv.write_all(self.to_csv().as_bytes())?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("report encode: {e}")))?;
        std::fs::write(dir.join("report.json"), json)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report decode: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// All-pairs oracle with the same integer-to-float convention.
    fn auc_oracle(normal: &[f64], adv: &[f64]) -> f64 {
        let mut wins = 0u64;
        let mut ties = 0u64;
        for &a in normal {
            for &b in adv {
                if a > b {
                    wins += 1;
                } else if a == b {
                    ties += 1;
                }
            }
        }
        let den = 2 * (normal.len() as u64) * (adv.len() as u64);
        let n1 = 2 * wins + ties;
        let n2 = den - n1;
        if n1 <= n2 {
            n1 as f64 / den as f64
        } else {
            1.0 - n2 as f64 / den as f64
        }
    }

    #[test]
    fn auc_perfect_separation() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2], &[0.9, 0.8]).unwrap(), 0.0);
    }

    #[test]
    fn auc_tie_convention() {
        assert_eq!(roc_auc(&[0.5], &[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn auc_empty_rejected() {
        assert!(roc_auc(&[], &[0.5]).is_err());
        assert!(roc_auc(&[0.5], &[]).is_err());
    }

    #[test]
    fn auc_matches_all_pairs_oracle_exactly() {
        let mut rng = crate::util::stage_rng(77, "auc-test");
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let m = rng.gen_range(1..40);
            // quantized scores force plenty of ties
            let normal: Vec<f64> =
                (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
            let adv: Vec<f64> = (0..m).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
            let fast = roc_auc(&normal, &adv).unwrap();
            let slow = auc_oracle(&normal, &adv);
            assert_eq!(fast.to_bits(), slow.to_bits());
        }
    }

    #[test]
    fn auc_complement_is_exact() {
        let mut rng = crate::util::stage_rng(78, "auc-complement");
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let m = rng.gen_range(1..30);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = roc_auc(&a, &b).unwrap();
            let y = roc_auc(&b, &a).unwrap();
            assert_eq!(x + y, 1.0, "{x} + {y} != 1");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = crate::util::stage_rng(79, "auc-monotone");
        for _ in 0..50 {
            let a: Vec<f64> = (0..15).map(|_| rng.gen_range(0.1..2.0)).collect();
            let b: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..2.0)).collect();
            let before = roc_auc(&a, &b).unwrap();
            let ta: Vec<f64> = a.iter().map(|&v| (3.0 * v).ln()).collect();
            let tb: Vec<f64> = b.iter().map(|&v| (3.0 * v).ln()).collect();
            let after = roc_auc(&ta, &tb).unwrap();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn distortion_zero_iff_identical_and_scales() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        assert_eq!(distortion(&x, &x).unwrap(), 0.0);
        // d=4, one pixel moved across the full 255 range -> 255/sqrt(4) = 127.5
        let mut moved = x.clone();
        moved.data_mut()[2] = 0.3 - 1.0;
        let d = distortion(&x, &moved).unwrap();
        assert!((d - 127.5).abs() < 1e-9, "{d}");
    }

    #[test]
    fn f2_ratio_edges() {
        use crate::attack::AttackOutcome;
        let mk = |success, f2| AttackOutcome {
            x_star: Tensor::scalar(0.0),
            success,
            iterations: 1,
            objective: 0.0,
            f2,
        };
        assert_eq!(f2_positive_ratio(&[]), None);
        assert_eq!(f2_positive_ratio(&[mk(false, Some(1.0))]), None);
        // hinge never positive -> ratio 0
        assert_eq!(f2_positive_ratio(&[mk(true, Some(0.0)), mk(true, Some(-0.5))]), Some(0.0));
        // hinge always positive -> ratio 1
        assert_eq!(f2_positive_ratio(&[mk(true, Some(0.1)), mk(true, Some(2.0))]), Some(1.0));
    }

    #[test]
    fn report_csv_and_json_roundtrip() {
        let mut rep = EvalReport::new("r1", "blobs", serde_json::json!({"seed": 7}));
        assert_eq!(rep.to_csv().lines().count(), 1); // header-only when empty
        rep.push("ce", "fgsm", "kdensity", Some(0.1), None, 0.93, 200);
        rep.push("rce", "cw", "kdensity", None, Some(0.0), 0.99, 150);
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("r1,blobs,ce,fgsm,kdensity,0.1,,"));
        let json = serde_json::to_string(&rep).unwrap();
        let back = EvalReport::from_json(&json).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn pick_target_never_equals_label() {
        for idx in 0..50 {
            for y in 0..10 {
                let t = pick_target(y, 10, 99, idx);
                assert_ne!(t, y);
                assert!(t < 10);
            }
        }
    }
}
