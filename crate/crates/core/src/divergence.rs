//! Domain distances: proxy A-distance from a cross-validated two-sample
//! classifier, marginal MMD², and the bridge check
//! `dist(S,B) < dist(S,T) && dist(B,T) < dist(S,T)`.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::DomainTag;
use crate::error::{Error, Result};
use crate::losses::{self, DomainLabel, KernelSpec};
use crate::nn::{Activation, FinalActivation, MlpSpec, Trainable};
use crate::rng;
use crate::tensor::Tensor;

pub const CLASSIFIER_HIDDEN: usize = 32;
pub const CLASSIFIER_STEPS: usize = 200;
pub const CLASSIFIER_LR: f64 = 1e-2;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub pair: (DomainTag, DomainTag),
    pub a_distance: f64,
    pub mmd2: f64,
    pub classifier_error: f64,
    pub n_folds: usize,
}

/// `2 (1 - 2 eps)`.
pub fn a_distance_from_error(eps: f64) -> f64 {
    2.0 * (1.0 - 2.0 * eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMetric {
    ADistance,
    Mmd2,
}

impl DistanceReport {
    pub fn value(&self, metric: BridgeMetric) -> f64 {
        match metric {
            BridgeMetric::ADistance => self.a_distance,
            BridgeMetric::Mmd2 => self.mmd2,
        }
    }
}

fn check_features(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 || t.rows() == 0 || t.cols() == 0 {
        return Err(Error::dim(op, format!("expected a non-empty n x d matrix, got {:?}", t.shape())));
    }
    Ok(())
}

/// Held-out error of an MLP separating `a` (label 0) from `b` (label 1).
///
/// Both sets are subsampled to the smaller size, z-scored with pooled
/// statistics and split into stratified folds. The arguments are put in a
/// canonical order first, so swapping them gives the same error.
pub fn two_sample_error(a: &Tensor, b: &Tensor, folds: usize, seed: u64) -> Result<f64> {
    check_features("proxy_a_distance", a)?;
    check_features("proxy_a_distance", b)?;
    if a.cols() != b.cols() {
        return Err(Error::dim(
            "proxy_a_distance",
            format!("feature widths differ: {} vs {}", a.cols(), b.cols()),
        ));
    }
    if folds < 2 {
        return Err(Error::config("folds", "need at least 2 folds"));
    }
    let (n, m) = (a.rows(), b.rows());
    if n < 2 * folds || m < 2 * folds {
        return Err(Error::Estimation(format!(
            "{folds}-fold estimate needs at least {} samples per set, got {n} and {m}",
            2 * folds
        )));
    }
    let (a, b) = match losses::lexicographic(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let d = a.cols();
    let size = n.min(m);
    let mut rng = rng::seeded(seed, rng::stream::FOLDS);
    let mut pick = |rows: usize| {
        let mut idx: Vec<usize> = (0..rows).collect();
        idx.shuffle(&mut rng);
        idx.truncate(size);
        idx
    };
    let ia = pick(a.rows());
    let ib = pick(b.rows());

    let mut x = Vec::with_capacity(2 * size * d);
    for &i in &ia {
        x.extend_from_slice(&a.values()[i * d..(i + 1) * d]);
    }
    for &i in &ib {
        x.extend_from_slice(&b.values()[i * d..(i + 1) * d]);
    }
    zscore(&mut x, d);
    let labels: Vec<DomainLabel> = (0..2 * size)
        .map(|i| if i < size { DomainLabel::ZERO } else { DomainLabel::ONE })
        .collect();
    // Position within each half decides the fold, so folds stay balanced.
    let fold_of = |i: usize| (i % size) % folds;

    let spec = MlpSpec::new(&[d, CLASSIFIER_HIDDEN, 1], Activation::Relu, FinalActivation::Sigmoid);
    let mut wrong = 0usize;
    for fold in 0..folds {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..2 * size).partition(|&i| fold_of(i) != fold);
        let gather = |rows: &[usize]| -> Result<Tensor> {
            let mut v = Vec::with_capacity(rows.len() * d);
            rows.iter().for_each(|&i| v.extend_from_slice(&x[i * d..(i + 1) * d]));
            Tensor::matrix(rows.len(), d, v)
        };
        let xtr = gather(&train)?;
        let ytr: Vec<DomainLabel> = train.iter().map(|&i| labels[i]).collect();
        let mut clf = Trainable::new(&spec, rng::subseed(seed, fold as u64), CLASSIFIER_LR)?;
        for _ in 0..CLASSIFIER_STEPS {
            let bound = clf.net.bind();
            let p = bound.forward(&xtr)?;
            losses::domain_identifier_loss(&p, &ytr)?.value.backward()?;
            clf.apply(&bound.grads())?;
        }
        let xte = gather(&test)?;
        let p = clf.net.predict(xte.values(), test.len())?;
        wrong += test
            .iter()
            .zip(&p)
            .filter(|(&i, &p)| (p >= 0.5) != (labels[i] == DomainLabel::ONE))
            .count();
    }
    Ok(wrong as f64 / (2 * size) as f64)
}

fn zscore(x: &mut [f64], d: usize) {
    let rows = x.len() / d;
    for j in 0..d {
        let mean = (0..rows).map(|i| x[i * d + j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        (0..rows).for_each(|i| x[i * d + j] = (x[i * d + j] - mean) / sd);
    }
}

fn report_with_kernel(
    a: &Tensor,
    b: &Tensor,
    pair: (DomainTag, DomainTag),
    folds: usize,
    seed: u64,
    kernel: &KernelSpec,
) -> Result<DistanceReport> {
    let eps = two_sample_error(a, b, folds, seed)?.clamp(0.0, 0.5);
    let mmd2 = losses::mmd_squared(a, b, kernel)?.item().max(0.0);
    Ok(DistanceReport {
        pair,
        a_distance: a_distance_from_error(eps),
        mmd2,
        classifier_error: eps,
        n_folds: folds,
    })
}

/// Proxy A-distance plus MMD² (median-heuristic kernel over `a ∪ b`).
/// Below-chance classifier error is clamped to 0.5, so the distance lies in
/// `[0, 2]`.
pub fn proxy_a_distance(
    a: &Tensor,
    b: &Tensor,
    pair: (DomainTag, DomainTag),
    folds: usize,
    seed: u64,
) -> Result<DistanceReport> {
    check_features("proxy_a_distance", a)?;
    check_features("proxy_a_distance", b)?;
    let kernel = KernelSpec::median_heuristic(&[a.values(), b.values()], a.cols())?;
    report_with_kernel(a, b, pair, folds, seed, &kernel)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeVerdict {
    pub verdict: bool,
    pub metric: BridgeMetric,
    pub source_bridge: DistanceReport,
    pub bridge_target: DistanceReport,
    pub source_target: DistanceReport,
}

impl BridgeVerdict {
    pub fn reports(&self) -> [&DistanceReport; 3] {
        [&self.source_bridge, &self.bridge_target, &self.source_target]
    }

    /// Both strict inequalities under `metric`.
    pub fn holds_under(&self, metric: BridgeMetric) -> bool {
        let st = self.source_target.value(metric);
        self.source_bridge.value(metric) < st && self.bridge_target.value(metric) < st
    }
}

/// Computes all three pairwise reports with one shared MMD kernel (median
/// heuristic over `S ∪ B ∪ T`) and decides the bridge constraint under
/// `metric`.
pub fn validate_bridge(
    source: &Tensor,
    bridge: &Tensor,
    target: &Tensor,
    metric: BridgeMetric,
    seed: u64,
) -> Result<BridgeVerdict> {
    for t in [source, bridge, target] {
        check_features("validate_bridge", t)?;
    }
    let kernel = KernelSpec::median_heuristic(
        &[source.values(), bridge.values(), target.values()],
        source.cols(),
    )?;
    let f = DEFAULT_FOLDS;
    let sb = report_with_kernel(source, bridge, (DomainTag::Source, DomainTag::Bridge), f, rng::subseed(seed, 0), &kernel)?;
    let bt = report_with_kernel(bridge, target, (DomainTag::Bridge, DomainTag::Target), f, rng::subseed(seed, 1), &kernel)?;
    let st = report_with_kernel(source, target, (DomainTag::Source, DomainTag::Target), f, rng::subseed(seed, 2), &kernel)?;
    let mut v = BridgeVerdict {
        verdict: false,
        metric,
        source_bridge: sb,
        bridge_target: bt,
        source_target: st,
    };
    v.verdict = v.holds_under(metric);
    Ok(v)
}

/// Settings for a standalone MINE run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineSettings {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl MineSettings {
    pub fn new(seed: u64) -> Self {
        MineSettings {
            hidden: vec![64],
            steps: 2000,
            batch_size: 512,
            lr: 1e-3,
            seed,
        }
    }
}

pub struct MineRun {
    /// Plain Donsker-Varadhan value on the full sample after training.
    pub estimate: f64,
    /// Per-step minibatch estimates.
    pub history: Vec<f64>,
    /// Marginal scores clamped before exponentiation, summed over training.
    pub clamped: usize,
}

/// Trains a statistics network on paired rows of `p` and `q` by ascending
/// the moving-average MINE surrogate, then reports the plain estimate over
/// all rows against a fresh shuffle of `q`.
pub fn estimate_mutual_information(p: &Tensor, q: &Tensor, s: &MineSettings) -> Result<MineRun> {
    check_features("estimate_mutual_information", p)?;
    check_features("estimate_mutual_information", q)?;
    let n = p.rows();
    if q.rows() != n {
        return Err(Error::dim(
            "estimate_mutual_information",
            format!("{n} rows of p against {} rows of q", q.rows()),
        ));
    }
    if n < 2 || s.batch_size < 2 || s.steps == 0 {
        return Err(Error::Estimation("MINE needs two rows, a batch of two and one step".into()));
    }
    let mut widths = vec![p.cols() + q.cols()];
    widths.extend(&s.hidden);
    widths.push(1);
    let mut stat = Trainable::new(&MlpSpec::leaky(&widths), rng::subseed(s.seed, 0), s.lr)?;
    let mut batch_rng = rng::seeded(s.seed, rng::stream::SOURCE_BATCHES);
    let mut shuffle_rng = rng::seeded(s.seed, rng::stream::MINE_SHUFFLE);
    let mut ema = losses::MineEma::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let batch = s.batch_size.min(n);
    let mut history = Vec::with_capacity(s.steps);
    let mut clamped = 0;
    for _ in 0..s.steps {
        if cursor + batch > n {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let mut perm = idx.to_vec();
        perm.shuffle(&mut shuffle_rng);
        let net = stat.net.bind();
        let obj = ema.objective(&p.select_rows(idx)?, &q.select_rows(idx)?, &q.select_rows(&perm)?, &net)?;
        obj.surrogate.scale(-1.0).backward()?;
        history.push(obj.estimate);
        clamped += obj.clamped;
        stat.apply(&net.grads())?;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut shuffle_rng);
    let net = stat.net.bind_frozen();
    let estimate = losses::mine_estimate(p, q, &q.select_rows(&perm)?, &net)?.value.item();
    Ok(MineRun { estimate, history, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gaussian_1d(mean: f64, sd: f64, n: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed, 99);
        let g = Normal::new(mean, sd).unwrap();
        Tensor::matrix(n, 1, (0..n).map(|_| g.sample(&mut r)).collect()).unwrap()
    }

    const PAIR: (DomainTag, DomainTag) = (DomainTag::Source, DomainTag::Target);

    #[test]
    fn formula_endpoints() {
        assert_eq!(a_distance_from_error(0.5), 0.0);
        assert_eq!(a_distance_from_error(0.0), 2.0);
    }

    #[test]
    fn separated_gaussians_near_two() {
        let a = gaussian_1d(-5.0, 0.1, 200, 1);
        let b = gaussian_1d(5.0, 0.1, 200, 2);
        let r = proxy_a_distance(&a, &b, PAIR, 5, 0).unwrap();
        assert!(r.a_distance >= 1.8, "{r:?}");
        assert_eq!(r.a_distance, a_distance_from_error(r.classifier_error));
    }

    #[test]
    fn split_of_one_sample_is_close() {
        let x = gaussian_1d(0.0, 1.0, 400, 3);
        let a = Tensor::matrix(200, 1, x.values()[..200].to_vec()).unwrap();
        let b = Tensor::matrix(200, 1, x.values()[200..].to_vec()).unwrap();
        let r = proxy_a_distance(&a, &b, PAIR, 5, 4).unwrap();
        assert!(r.a_distance.abs() < 0.3, "{r:?}");
    }

    #[test]
    fn argument_order_does_not_matter() {
        let a = gaussian_1d(0.0, 1.0, 150, 5);
        let b = gaussian_1d(1.0, 1.0, 150, 6);
        let ab = proxy_a_distance(&a, &b, PAIR, 5, 9).unwrap();
        let ba = proxy_a_distance(&b, &a, PAIR, 5, 9).unwrap();
        assert!((ab.a_distance - ba.a_distance).abs() < 0.2);
        assert_eq!(ab.mmd2, ba.mmd2);
    }

    #[test]
    fn too_few_samples() {
        let a = gaussian_1d(0.0, 1.0, 9, 1);
        assert!(matches!(proxy_a_distance(&a, &a, PAIR, 5, 0), Err(Error::Estimation(_))));
    }

    #[test]
    fn identical_sets_fail_strictness() {
        let x = gaussian_1d(0.0, 1.0, 100, 7);
        let v = validate_bridge(&x, &x, &x, BridgeMetric::Mmd2, 0).unwrap();
        assert!(!v.verdict);
        assert!(v.reports().iter().all(|r| r.mmd2 < 1e-12));
    }

    #[test]
    fn mean_shift_bridge() {
        let s = gaussian_1d(0.0, 0.5, 200, 1);
        let b = gaussian_1d(2.0, 0.5, 200, 2);
        let t = gaussian_1d(4.0, 0.5, 200, 3);
        assert!(validate_bridge(&s, &b, &t, BridgeMetric::Mmd2, 0).unwrap().verdict);
        let far = gaussian_1d(10.0, 0.5, 200, 2);
        assert!(!validate_bridge(&s, &far, &t, BridgeMetric::Mmd2, 0).unwrap().verdict);
    }
}
