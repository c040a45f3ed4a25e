//! Numeric verification of the softmax decision-geometry facts behind the
//! detection strategy, on synthetic geometries.
//!
//! A geometry is a softmax layer (W_s, b_s) over an m-dimensional hidden
//! space. Moving a hidden point along the manifold that keeps all pairwise
//! non-predicted logit differences fixed leaves the non-maximal entropy
//! unchanged (the lemma); the boundary value of the predicted-class
//! probability has a closed form whose minimum over manifolds is 1/L
//! (first theorem); and near-perfect reverse training forces the negated
//! softmax toward the one-hot vector at second order (second theorem).
//! Manifold moves are realized as least-squares solves in logit space,
//! checked by residual, so everything works in any hidden dimension.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::detect::non_me_metric;
use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::util::stage_rng;

/// Residual above which a logit-space solve is declared infeasible.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-9;

/// A softmax layer over an m-dimensional hidden space.
#[derive(Debug, Clone)]
pub struct SoftmaxGeometry {
    /// Row-major [L, m].
    weights: Vec<f64>,
    bias: Vec<f64>,
    l: usize,
    m: usize,
}

impl SoftmaxGeometry {
    pub fn new(weights: Vec<f64>, bias: Vec<f64>, l: usize, m: usize) -> Result<Self> {
        if weights.len() != l * m || bias.len() != l {
            return Err(Error::shape(
                "SoftmaxGeometry::new",
                format!("want {l}x{m} weights and {l} bias entries"),
            ));
        }
        // pairwise-distinct rows keep every decision boundary non-degenerate
        for i in 0..l {
            for j in (i + 1)..l {
                let diff: f64 = (0..m)
                    .map(|k| (weights[i * m + k] - weights[j * m + k]).abs())
                    .sum();
                if diff < 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "weight rows {i} and {j} coincide; boundary degenerate"
                    )));
                }
            }
        }
        Ok(SoftmaxGeometry { weights, bias, l, m })
    }

    /// Standard-normal weights and biases; m >= l keeps every logit target
    /// reachable, which the manifold solves rely on.
    pub fn random(l: usize, m: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        loop {
            let weights: Vec<f64> = (0..l * m).map(|_| normal.sample(rng)).collect();
            let bias: Vec<f64> = (0..l).map(|_| normal.sample(rng)).collect();
            if let Ok(g) = SoftmaxGeometry::new(weights, bias, l, m) {
                return Ok(g);
            }
        }
    }

    pub fn classes(&self) -> usize {
        self.l
    }

    pub fn hidden_dim(&self) -> usize {
        self.m
    }

    /// W_s z + b_s.
    pub fn logits_at(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.m {
            return Err(Error::shape(
                "logits_at",
                format!("hidden dim {} vs geometry dim {}", z.len(), self.m),
            ));
        }
        let mut out = self.bias.clone();
        for (i, row) in self.weights.chunks_exact(self.m).enumerate() {
            out[i] += row.iter().zip(z).map(|(&w, &zv)| w * zv).sum::<f64>();
        }
        Ok(out)
    }

    /// Least-squares z with W z ~= target; returns (z, residual 2-norm).
    fn solve_for_wz(&self, target: &[f64]) -> (Vec<f64>, f64) {
        let w = DMatrix::from_row_slice(self.l, self.m, &self.weights);
        let rhs = DVector::from_column_slice(target);
        let svd = w.clone().svd(true, true);
        let z = svd.solve(&rhs, 1e-13).expect("svd solve with u/v computed");
        let residual = (&w * &z - &rhs).norm();
        (z.iter().cloned().collect(), residual)
    }

    /// Solves for the hidden point whose logits equal `target_logits`;
    /// errors when the geometry cannot realize them.
    pub fn point_with_logits(&self, target_logits: &[f64]) -> Result<Vec<f64>> {
        let wz: Vec<f64> =
            target_logits.iter().zip(&self.bias).map(|(&t, &b)| t - b).collect();
        let (z, residual) = self.solve_for_wz(&wz);
        if residual >= SOLVE_RESIDUAL_TOL {
            return Err(Error::InvalidArgument(format!(
                "logit target unreachable, residual {residual:e}"
            )));
        }
        Ok(z)
    }
}

/// Result of a manifold shift: the new point and whether it stayed inside
/// the decision region of the original predicted class.
#[derive(Debug, Clone)]
pub struct ManifoldShift {
    pub z: Vec<f64>,
    pub in_region: bool,
}

/// Moves z so its logits change by `delta`, which must hold one common
/// offset on every class other than `y_hat` (the manifold direction te
/// lemma quantifies over). Errors when the least-squares residual shows
/// the shift is unreachable in hidden space.
pub fn shift_along_manifold(
    geom: &SoftmaxGeometry,
    z: &[f64],
    y_hat: usize,
    delta: &[f64],
) -> Result<ManifoldShift> {
    if delta.len() != geom.l {
        return Err(Error::shape("shift_along_manifold", "delta length != class count"));
    }
    if y_hat >= geom.l {
        return Err(Error::InvalidArgument(format!("y_hat {} out of range", y_hat)));
    }
    let off: Vec<f64> = (0..geom.l).filter(|&i| i != y_hat).map(|i| delta[i]).collect();
    if off.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-12) {
        return Err(Error::InvalidArgument(
            "delta must carry equal offsets on all classes != y_hat".into(),
        ));
    }
    let logits = geom.logits_at(z)?;
    let target: Vec<f64> = logits.iter().zip(delta).map(|(&lv, &dv)| lv + dv).collect();
    let z_new = geom.point_with_logits(&target)?;
    let new_logits = geom.logits_at(&z_new)?;
    let in_region = ops::argmax(&new_logits) == y_hat;
    Ok(ManifoldShift { z: z_new, in_region })
}

/// non-ME value of the softmax distribution at a logit vector.
pub fn non_me_of_logits(logits: &[f64]) -> Result<f64> {
    non_me_metric(&ops::softmax(logits)?)
}

/// One theorem verification outcome.
#[derive(Debug, Clone)]
pub struct TheoremReport {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    pub max_violation: f64,
    pub skipped: usize,
    pub witness: Option<String>,
}

impl TheoremReport {
    fn new(name: &str) -> Self {
        TheoremReport {
            name: name.to_string(),
            passed: true,
            trials: 0,
            max_violation: 0.0,
            skipped: 0,
            witness: None,
        }
    }

    fn record(&mut self, violation: f64, limit: f64, witness: impl Fn() -> String) {
        self.max_violation = self.max_violation.max(violation);
        if violation > limit && self.passed {
            self.passed = false;
            self.witness = Some(witness());
        }
    }
}

impl std::fmt::Display for TheoremReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} {} trials={} skipped={} max_violation={:.3e}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.trials,
            self.skipped,
            self.max_violation
        )?;
        if let Some(w) = &self.witness {
            write!(f, "\n  witness: {w}")?;
        }
        Ok(())
    }
}

const SLACK: f64 = 1e-9;

/// Constancy of non-ME along manifold shifts, the log(L-1) maximum when all
/// non-predicted logits are equal, and strictness below the maximum when
/// they differ.
pub fn verify_lemma1(geom: &SoftmaxGeometry, trials: usize, seed: u64) -> Result<TheoremReport> {
    if trials < 1 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut rng = stage_rng(seed, "lemma1");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut report = TheoremReport::new("lemma1");
    let lmax = ((geom.l - 1) as f64).ln();

    for _ in 0..trials {
        report.trials += 1;
        let z: Vec<f64> = (0..geom.m).map(|_| normal.sample(&mut rng)).collect();
        let logits = geom.logits_at(&z)?;
        let y_hat = ops::argmax(&logits);
        let base = non_me_of_logits(&logits)?;

        // (a) constancy along a random feasible manifold shift
        let mut common: f64 = rng.gen_range(-0.5..0.5);
        let mut own: f64 = rng.gen_range(-0.5..0.5);
        let mut shifted = None;
        for _ in 0..25 {
            let delta: Vec<f64> = (0..geom.l)
                .map(|i| if i == y_hat { own } else { common })
                .collect();
            match shift_along_manifold(geom, &z, y_hat, &delta) {
                Ok(s) if s.in_region => {
                    shifted = Some(s);
                    break;
                }
                _ => {
                    // shrink the move until it stays inside the region
                    common *= 0.5;
                    own = own * 0.5 + 0.05;
                }
            }
        }
        match shifted {
            Some(s) => {
                let moved = non_me_of_logits(&geom.logits_at(&s.z)?)?;
                report.record((moved - base).abs(), SLACK, || {
                    format!("constancy broke at z={z:?}, non-ME {base} vs {moved}")
                });
            }
            None => report.skipped += 1,
        }

        // (b) equal non-predicted logits attain exactly log(L-1)
        let v: f64 = rng.gen_range(-1.0..1.0);
        let top = v + rng.gen_range(0.5..2.0);
        let target: Vec<f64> =
            (0..geom.l).map(|i| if i == y_hat { top } else { v }).collect();
        match geom.point_with_logits(&target) {
            Ok(zq) => {
                let got = non_me_of_logits(&geom.logits_at(&zq)?)?;
                report.record((got - lmax).abs(), SLACK, || {
                    format!("equal case: non-ME {got} vs log(L-1) {lmax}")
                });

                // (c) perturbing one non-predicted logit drops it strictly
                if geom.l >= 3 {
                    let other = (y_hat + 1) % geom.l;
                    let mut bumped = target.clone();
                    bumped[other] += 1e-3;
                    if let Ok(zb) = geom.point_with_logits(&bumped) {
                        let below = non_me_of_logits(&geom.logits_at(&zb)?)?;
                        let violation = if below < lmax { 0.0 } else { below - lmax + 1e-12 };
                        report.record(violation, 0.0, || {
                            format!("strictness broke: non-ME {below} not below {lmax}")
                        });
                    }
                }
            }
            Err(_) => report.skipped += 1,
        }
    }
    Ok(report)
}

/// Closed-form boundary confidence for non-predicted logit offsets `c`
/// (values of the non-predicted logits along the manifold, any common shift):
/// 1 / (2 + sum_{i != k~} exp(c_i - c_k~)) with k~ the largest offset.
pub fn boundary_confidence_closed_form(c: &[f64]) -> f64 {
    let k = ops::argmax(c);
    let sum: f64 = c
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, &ci)| (ci - c[k]).exp())
        .sum();
    1.0 / (2.0 + sum)
}

/// Verifies that any point with all logits equal predicts at exactly 1/L,
/// and that the closed-form maximum of F_y over a manifold's boundary
/// segment matches a dense grid search through the actual geometry.
pub fn verify_theorem1_boundary(
    geom: &SoftmaxGeometry,
    manifolds: usize,
    grid: usize,
    seed: u64,
) -> Result<TheoremReport> {
    let mut rng = stage_rng(seed, "theorem1");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut report = TheoremReport::new("theorem1-boundary");
    let l = geom.l;

    // all-equal-logit point: the S_y intersection with the boundary
    match geom.point_with_logits(&vec![0.0; l]) {
        Ok(z) => {
            report.trials += 1;
            let probs = ops::softmax(&geom.logits_at(&z)?)?;
            let worst = probs
                .iter()
                .map(|&p| (p - 1.0 / l as f64).abs())
                .fold(0.0f64, f64::max);
            report.record(worst, SLACK, || {
                format!("equal-logit point predicts {probs:?}, want uniform 1/L")
            });
        }
        Err(_) => report.skipped += 1,
    }

    // random manifolds: closed form vs grid search over the boundary segment
    for _ in 0..manifolds {
        report.trials += 1;
        let z0: Vec<f64> = (0..geom.m).map(|_| normal.sample(&mut rng)).collect();
        let logits = geom.logits_at(&z0)?;
        let y_hat = ops::argmax(&logits);
        let c: Vec<f64> = (0..l).filter(|&i| i != y_hat).map(|i| logits[i]).collect();
        let closed = boundary_confidence_closed_form(&c);
        let c_max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        let mut best = f64::NEG_INFINITY;
        let mut solved = 0;
        for gi in 0..grid {
            let s = -4.0 + 8.0 * gi as f64 / (grid - 1) as f64;
            // boundary point of the manifold: predicted logit ties the
            // largest non-predicted one
            let mut target = vec![0.0; l];
            let mut ci = 0;
            for (i, t) in target.iter_mut().enumerate() {
                if i == y_hat {
                    *t = s + c_max;
                } else {
                    *t = s + c[ci];
                    ci += 1;
                }
            }
            if let Ok(zs) = geom.point_with_logits(&target) {
                let f = ops::softmax(&geom.logits_at(&zs)?)?[y_hat];
                best = best.max(f);
                solved += 1;
            }
        }
        if solved == 0 {
            report.skipped += 1;
            continue;
        }
        report.record((best - closed).abs(), 1e-6, || {
            format!("grid max {best} vs closed form {closed} at offsets {c:?}")
        });
    }
    Ok(report)
}

/// Samples logit vectors near a perfect reverse classifier, keeps those
/// satisfying the premise alpha <= 0.5/L, and asserts both bounds.
pub fn verify_theorem2(trials: usize, class_counts: &[usize], seed: u64) -> Result<TheoremReport> {
    if trials < 1 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut report = TheoremReport::new("theorem2");
    let mut rng = stage_rng(seed, "theorem2");

    for &l in class_counts {
        if l < 2 {
            return Err(Error::InvalidArgument("class counts must be >= 2".into()));
        }
        let cutoff = 0.5 / l as f64;
        let mut accepted = 0usize;
        let mut attempts = 0usize;
        while accepted < trials {
            attempts += 1;
            if attempts > trials * 1000 {
                return Err(Error::InvalidArgument(format!(
                    "sampler starved for L={l}: {accepted}/{trials} accepted"
                )));
            }
            let y = rng.gen_range(0..l);
            let spread: f64 = rng.gen_range(0.0..0.25);
            let noise = Normal::new(0.0, spread.max(1e-6)).expect("positive spread");
            let shift = rng.gen_range(-3.0..3.0);
            let gap = rng.gen_range(2.0..14.0);
            let mut logits = vec![0.0; l];
            let mut min_other = f64::INFINITY;
            for (i, lv) in logits.iter_mut().enumerate() {
                if i != y {
                    *lv = shift + noise.sample(&mut rng);
                    min_other = min_other.min(*lv);
                }
            }
            logits[y] = min_other - gap;

            let p = ops::softmax(&logits)?;
            let r_y = crate::model::reverse_label_vector(y, l);
            let alpha = p
                .iter()
                .zip(&r_y)
                .map(|(&pi, &ri)| (pi - ri).abs())
                .fold(0.0f64, f64::max);
            if alpha > cutoff {
                continue;
            }
            accepted += 1;
            report.trials += 1;

            let neg: Vec<f64> = logits.iter().map(|&v| -v).collect();
            let q = ops::softmax(&neg)?;
            let onehot_dist = q
                .iter()
                .enumerate()
                .map(|(i, &qi)| (qi - if i == y { 1.0 } else { 0.0 }).abs())
                .fold(0.0f64, f64::max);
            let bound1 = alpha * ((l - 1) as f64).powi(2);
            report.record(onehot_dist - bound1, SLACK, || {
                format!("bound1 broke: L={l} logits={logits:?} alpha={alpha} lhs={onehot_dist} rhs={bound1}")
            });

            let mut pair_gap = 0.0f64;
            for j in 0..l {
                for k in (j + 1)..l {
                    if j != y && k != y {
                        pair_gap = pair_gap.max((q[j] - q[k]).abs());
                    }
                }
            }
            let bound2 = 2.0 * alpha * alpha * ((l - 1) as f64).powi(2);
            report.record(pair_gap - bound2, SLACK, || {
                format!("bound2 broke: L={l} logits={logits:?} alpha={alpha} lhs={pair_gap} rhs={bound2}")
            });
        }
    }
    Ok(report)
}

/// The standard verification battery behind the `verify-theory` subcommand.
pub fn run_verification(
    geometries: usize,
    lemma_trials_per_geom: usize,
    theorem2_trials: usize,
    seed: u64,
) -> Result<Vec<TheoremReport>> {
    let mut rng = stage_rng(seed, "verify-geoms");
    let mut lemma = TheoremReport::new("lemma1");
    let mut thm1 = TheoremReport::new("theorem1-boundary");
    for gi in 0..geometries {
        let l = [2usize, 3, 5, 10][gi % 4];
        let m = l + 2;
        let geom = SoftmaxGeometry::random(l, m, &mut rng)?;
        let r = verify_lemma1(&geom, lemma_trials_per_geom, seed ^ (gi as u64 + 1))?;
        merge(&mut lemma, r);
        let r = verify_theorem1_boundary(&geom, 2, 64, seed ^ (0x1000 + gi as u64))?;
        merge(&mut thm1, r);
    }
    let thm2 = verify_theorem2(theorem2_trials, &[2, 3, 10], seed ^ 0xabcd)?;
    Ok(vec![lemma, thm1, thm2])
}

fn merge(into: &mut TheoremReport, from: TheoremReport) {
    into.trials += from.trials;
    into.skipped += from.skipped;
    into.max_violation = into.max_violation.max(from.max_violation);
    if !from.passed && into.passed {
        into.passed = false;
        into.witness = from.witness;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom_3x4() -> SoftmaxGeometry {
        let mut rng = stage_rng(5, "test-geom");
        SoftmaxGeometry::random(3, 4, &mut rng).unwrap()
    }

    #[test]
    fn logits_at_bias_only_and_basis() {
        let g = SoftmaxGeometry::new(
            vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5],
            vec![0.1, 0.2, 0.3],
            3,
            2,
        )
        .unwrap();
        assert_eq!(g.logits_at(&[0.0, 0.0]).unwrap(), vec![0.1, 0.2, 0.3]);
        // identity-row geometry without bias reproduces the basis vector
        let id = SoftmaxGeometry::new(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2).unwrap();
        assert_eq!(id.logits_at(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(g.logits_at(&[1.0]).is_err());
    }

    #[test]
    fn logits_match_matmul_oracle() {
        let g = geom_3x4();
        let mut rng = stage_rng(6, "z");
        let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let via_matmul = {
            let w = DMatrix::from_row_slice(3, 4, &g.weights);
            let zv = DVector::from_column_slice(&z);
            let out = w * zv;
            let mut v: Vec<f64> = out.iter().cloned().collect();
            for (o, &b) in v.iter_mut().zip(&g.bias) {
                *o += b;
            }
            v
        };
        let direct = g.logits_at(&z).unwrap();
        for (a, b) in direct.iter().zip(&via_matmul) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_rows_rejected() {
        assert!(SoftmaxGeometry::new(vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 0.0], 2, 2).is_err());
    }

    #[test]
    fn zero_shift_is_identity() {
        let g = geom_3x4();
        let z = vec![0.3, -0.2, 0.8, 0.1];
        let logits = g.logits_at(&z).unwrap();
        let y = ops::argmax(&logits);
        let s = shift_along_manifold(&g, &z, y, &[0.0, 0.0, 0.0]).unwrap();
        let moved = g.logits_at(&s.z).unwrap();
        for (a, b) in moved.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn unequal_offsets_rejected() {
        let g = geom_3x4();
        let z = vec![0.0; 4];
        let y = ops::argmax(&g.logits_at(&z).unwrap());
        let mut delta = vec![0.1, 0.1, 0.1];
        delta[(y + 1) % 3] = 0.2; // breaks equality on the non-predicted pair
        assert!(shift_along_manifold(&g, &z, y, &delta).is_err());
    }

    #[test]
    fn equal_shift_preserves_non_me() {
        let g = geom_3x4();
        let mut rng = stage_rng(9, "shift");
        for _ in 0..50 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let logits = g.logits_at(&z).unwrap();
            let y = ops::argmax(&logits);
            let c: f64 = rng.gen_range(-0.3..0.3);
            let delta: Vec<f64> = (0..3).map(|i| if i == y { 0.0 } else { c }).collect();
            let s = shift_along_manifold(&g, &z, y, &delta).unwrap();
            if !s.in_region {
                // constancy is only claimed inside the decision region
                continue;
            }
            let a = non_me_of_logits(&logits).unwrap();
            let b = non_me_of_logits(&g.logits_at(&s.z).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn lemma1_report_passes() {
        let g = geom_3x4();
        let r = verify_lemma1(&g, 50, 3).unwrap();
        assert!(r.passed, "{r}");
        // equality case checks exact ln(L-1)
        assert!(r.max_violation < 1e-9);
    }

    #[test]
    fn lemma1_equal_and_strict_cases() {
        // non-max logits (1.0, 1.0) -> ln 2; (1.0, 1.5) -> strictly below
        let equal = non_me_of_logits(&[3.0, 1.0, 1.0]).unwrap();
        assert!((equal - 2f64.ln()).abs() < 1e-12);
        let uneven = non_me_of_logits(&[3.0, 1.0, 1.5]).unwrap();
        assert!(uneven < 2f64.ln());
    }

    #[test]
    fn theorem1_uniform_cases() {
        // all-equal logits predict exactly 1/L
        let p = ops::softmax(&[0.7; 10]).unwrap();
        for &v in &p {
            assert!((v - 0.1).abs() < 1e-15);
        }
        // zero offsets: the closed form reaches the 1/L minimum
        assert!((boundary_confidence_closed_form(&[0.0; 9]) - 0.1).abs() < 1e-15);
        assert!((boundary_confidence_closed_form(&[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn theorem1_report_passes() {
        let g = geom_3x4();
        let r = verify_theorem1_boundary(&g, 10, 64, 4).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn theorem2_example_vector() {
        // Z = (-10, 0, 0), y = 0: both bounds hold with room to spare
        let logits = [-10.0, 0.0, 0.0];
        let p = ops::softmax(&logits).unwrap();
        let alpha = p[0]
            .abs()
            .max((p[1] - 0.5).abs())
            .max((p[2] - 0.5).abs());
        assert!(alpha <= 0.5 / 3.0);
        let q = ops::softmax(&[10.0, 0.0, 0.0]).unwrap();
        let lhs = (1.0 - q[0]).max(q[1]).max(q[2]);
        assert!(lhs <= alpha * 4.0 + 1e-9, "lhs {lhs} vs 4 alpha {}", alpha * 4.0);
        let pair = (q[1] - q[2]).abs();
        assert!(pair <= 2.0 * alpha * alpha * 4.0 + 1e-9);
    }

    #[test]
    fn theorem2_report_passes_all_ls() {
        let r = verify_theorem2(500, &[2, 3, 10], 11).unwrap();
        assert!(r.passed, "{r}");
        assert_eq!(r.trials, 3 * 500);
    }

    #[test]
    fn full_battery_smoke() {
        let reports = run_verification(8, 10, 200, 21).unwrap();
        for r in &reports {
            assert!(r.passed, "{r}");
        }
    }
}
