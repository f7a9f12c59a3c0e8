//! Training objectives as differentiable scalar tensors.
//!
//! Probabilities that enter a logarithm are clamped to
//! `[PROB_CLAMP, 1 - PROB_CLAMP]`; every such loss also reports how many
//! entries were clipped so pipelines can surface it in their metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::BoundMlp;
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-12;
/// Upper bound applied to statistics-network outputs before `exp`.
pub const EXP_CLAMP: f64 = 30.0;
/// Multipliers applied to the median pairwise distance.
pub const MEDIAN_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// A loss value plus the number of entries that hit a clamp.
#[derive(Clone, Debug)]
pub struct Clamped<T> {
    pub value: T,
    pub clamped: usize,
}

/// Sum of Gaussian RBF kernels `exp(-|x-y|^2 / (2 s^2))`, one per bandwidth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
}

impl KernelSpec {
    pub fn rbf(bandwidths: &[f64]) -> Result<Self> {
        let k = KernelSpec {
            bandwidths: bandwidths.to_vec(),
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::config("bandwidths", "need at least one bandwidth"));
        }
        if let Some(b) = self.bandwidths.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::config("bandwidths", format!("bandwidth {b} is not positive")));
        }
        Ok(())
    }

    /// Median pairwise distance over the pooled rows times
    /// [`MEDIAN_MULTIPLIERS`]. At most 512 rows (evenly strided) are used.
    /// Falls back to a unit median when all rows coincide.
    pub fn median_heuristic(sets: &[&[f64]], dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::dim("median_heuristic", "zero feature width"));
        }
        let rows: Vec<&[f64]> = sets.iter().flat_map(|s| s.chunks_exact(dim)).collect();
        let stride = rows.len().div_ceil(512).max(1);
        let picked: Vec<&[f64]> = rows.iter().step_by(stride).copied().collect();
        let mut dists = Vec::with_capacity(picked.len() * picked.len() / 2);
        for i in 0..picked.len() {
            for j in i + 1..picked.len() {
                let d2: f64 = picked[i]
                    .iter()
                    .zip(picked[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dists.push(d2.sqrt());
            }
        }
        let median = if dists.is_empty() {
            1.0
        } else {
            dists.sort_by(f64::total_cmp);
            let m = dists[dists.len() / 2];
            if m > 0.0 {
                m
            } else {
                1.0
            }
        };
        KernelSpec::rbf(&MEDIAN_MULTIPLIERS.map(|c| c * median))
    }
}

/// Which side of the currently aligned domain pair a feature came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainLabel(u8);

impl DomainLabel {
    pub const ZERO: DomainLabel = DomainLabel(0);
    pub const ONE: DomainLabel = DomainLabel(1);

    pub fn new(value: u8) -> Result<Self> {
        match value {
            0 | 1 => Ok(DomainLabel(value)),
            v => Err(Error::Label {
                index: 0,
                label: v as i64,
                classes: 2,
            }),
        }
    }

    pub fn value(self) -> f64 {
        self.0 as f64
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= classes) {
        Some(index) => Err(Error::Label {
            index,
            label: labels[index] as i64,
            classes,
        }),
        None => Ok(()),
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// `-(1/n) sum_i log softmax(logits_i)[label_i]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::dim(
            "cross_entropy",
            format!("logits {:?} vs {} labels", shape, labels.len()),
        ));
    }
    check_labels(labels, shape[1])?;
    let picked = logits.log_softmax(1)?.mul(&one_hot(labels, shape[1])?)?;
    Ok(picked.sum().scale(-1.0 / labels.len() as f64))
}

fn clamp_probs(p: &Tensor) -> Clamped<Tensor> {
    let clamped = p
        .values()
        .iter()
        .filter(|&&v| !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&v))
        .count();
    Clamped {
        value: p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
        clamped,
    }
}

/// `-mean log p` over all entries.
fn neg_mean_log(p: &Tensor) -> Result<Clamped<Tensor>> {
    let c = clamp_probs(p);
    Ok(Clamped {
        value: c.value.log()?.mean().neg(),
        clamped: c.clamped,
    })
}

/// `-mean log (1 - p)` over all entries.
fn neg_mean_log_complement(p: &Tensor) -> Result<Clamped<Tensor>> {
    let c = clamp_probs(p);
    Ok(Clamped {
        value: c.value.neg().add_scalar(1.0).log()?.mean().neg(),
        clamped: c.clamped,
    })
}

/// Binary cross-entropy of the domain identifier,
/// `-(1/n) sum [l log p + (1-l) log(1-p)]`. Minimized by the identifier.
pub fn domain_identifier_loss(predicted_prob: &Tensor, labels: &[DomainLabel]) -> Result<Clamped<Tensor>> {
    let n = predicted_prob.numel();
    if n != labels.len() || n == 0 {
        return Err(Error::dim(
            "domain_identifier_loss",
            format!("{n} probabilities vs {} labels", labels.len()),
        ));
    }
    let c = clamp_probs(predicted_prob);
    let p = c.value;
    let shape = p.shape().to_vec();
    let l = Tensor::new(&shape, labels.iter().map(|l| l.value()).collect())?;
    let one_minus_l = l.neg().add_scalar(1.0);
    let pos = l.mul(&p.log()?)?;
    let neg = one_minus_l.mul(&p.neg().add_scalar(1.0).log()?)?;
    Ok(Clamped {
        value: pos.add(&neg)?.mean().neg(),
        clamped: c.clamped,
    })
}

fn check_distribution_rows(probs: &Tensor, op: &'static str) -> Result<()> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::dim(op, format!("expected an n x K matrix, got {shape:?}")));
    }
    let k = shape[1];
    for (i, row) in probs.values().chunks_exact(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!(
                "{op}: row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Mean negative Shannon entropy of the rows, in `[-ln K, 0]`. Minimizing
/// it pushes predictions toward uniform.
pub fn entropy_confusion_loss(class_probs: &Tensor) -> Result<Tensor> {
    check_distribution_rows(class_probs, "entropy_confusion_loss")?;
    let n = class_probs.shape()[0] as f64;
    let log_p = class_probs.clamp(PROB_CLAMP, 1.0).log()?;
    Ok(class_probs.mul(&log_p)?.sum().scale(1.0 / n))
}

/// [`entropy_confusion_loss`] evaluated from logits through a fused
/// log-softmax, which stays finite for near one-hot rows.
pub fn entropy_confusion_from_logits(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.shape()[0] == 0 {
        return Err(Error::dim(
            "entropy_confusion_loss",
            format!("expected an n x K matrix, got {:?}", logits.shape()),
        ));
    }
    let n = logits.shape()[0] as f64;
    let log_p = logits.log_softmax(1)?;
    let p = logits.softmax(1)?;
    Ok(p.mul(&log_p)?.sum().scale(1.0 / n))
}

pub(crate) fn lexicographic(a: &Tensor, b: &Tensor) -> Ordering {
    a.shape().cmp(b.shape()).then_with(|| {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Biased (V-statistic) squared MMD summed over the kernel's bandwidths.
///
/// The arguments are put in a canonical order before evaluation so the
/// result is bit-for-bit symmetric.
pub fn mmd_squared(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<Tensor> {
    kernel.validate()?;
    let (sx, sy) = (x.shape(), y.shape());
    if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
        return Err(Error::dim(
            "mmd_squared",
            format!("feature widths differ: {sx:?} vs {sy:?}"),
        ));
    }
    if sx[0] == 0 || sy[0] == 0 {
        return Err(Error::dim("mmd_squared", "empty sample set"));
    }
    let (a, b) = match lexicographic(x, y) {
        Ordering::Greater => (y, x),
        _ => (x, y),
    };
    let daa = a.sq_dist(a)?;
    let dbb = b.sq_dist(b)?;
    let dab = a.sq_dist(b)?;
    let mut total: Option<Tensor> = None;
    for &s in &kernel.bandwidths {
        let c = -1.0 / (2.0 * s * s);
        let kaa = daa.scale(c).exp().mean();
        let kbb = dbb.scale(c).exp().mean();
        let kab = dab.scale(c).exp().mean();
        let term = kaa.add(&kbb)?.sub(&kab.scale(2.0))?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("kernel has at least one bandwidth"))
}

/// Per-class sample sets for one domain; `None` or zero rows marks a class
/// with no samples.
pub type ClassSets = [Option<Tensor>];

#[derive(Clone, Debug)]
pub struct ClassDiscrepancy {
    pub value: Tensor,
    pub used_classes: usize,
    pub skipped_classes: usize,
}

fn usable(set: &Option<Tensor>) -> Option<&Tensor> {
    set.as_ref().filter(|t| t.rows() > 0 && !t.shape().is_empty())
}

/// Mean over classes present in all three domains of
/// `mmd²(s_c, t_c) + mmd²(s_c, b_c) + mmd²(t_c, b_c)`.
pub fn class_level_discrepancy(
    source: &ClassSets,
    target: &ClassSets,
    bridge: &ClassSets,
    kernel: &KernelSpec,
) -> Result<ClassDiscrepancy> {
    let classes = source.len();
    if target.len() != classes || bridge.len() != classes {
        return Err(Error::dim(
            "class_level_discrepancy",
            format!(
                "class counts differ: {} / {} / {}",
                classes,
                target.len(),
                bridge.len()
            ),
        ));
    }
    let mut total: Option<Tensor> = None;
    let mut used = 0;
    for c in 0..classes {
        let (Some(s), Some(t), Some(b)) = (usable(&source[c]), usable(&target[c]), usable(&bridge[c])) else {
            continue;
        };
        let term = mmd_squared(s, t, kernel)?
            .add(&mmd_squared(s, b, kernel)?)?
            .add(&mmd_squared(t, b, kernel)?)?;
        used += 1;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let total = total.ok_or_else(|| {
        Error::Estimation("no class has samples in all three domains".into())
    })?;
    Ok(ClassDiscrepancy {
        value: total.scale(1.0 / used as f64),
        used_classes: used,
        skipped_classes: classes - used,
    })
}

fn statistics(t: &BoundMlp, p: &Tensor, q: &Tensor) -> Result<Tensor> {
    t.forward(&Tensor::concat(&[p.clone(), q.clone()], 1)?)
}

fn check_mine_inputs(p: &Tensor, q: &Tensor, q_marginal: &Tensor) -> Result<()> {
    if p.shape().len() != 2 || q.shape().len() != 2 || q.shape() != q_marginal.shape() || p.rows() != q.rows() {
        return Err(Error::dim(
            "mine_estimate",
            format!(
                "joint {:?}/{:?} and marginal {:?} do not line up",
                p.shape(),
                q.shape(),
                q_marginal.shape()
            ),
        ));
    }
    if p.rows() < 2 {
        return Err(Error::Estimation("mine_estimate needs at least two samples".into()));
    }
    Ok(())
}

fn clamp_exp_input(t: &Tensor) -> Clamped<Tensor> {
    let clamped = t.values().iter().filter(|&&v| v > EXP_CLAMP).count();
    Clamped {
        value: t.clamp(f64::NEG_INFINITY, EXP_CLAMP),
        clamped,
    }
}

/// Monte-Carlo Donsker-Varadhan estimate
/// `(1/n) sum T(p_i, q_i) - log((1/n) sum exp T(p_i, q'_i))`.
pub fn mine_estimate(
    p: &Tensor,
    q: &Tensor,
    q_marginal: &Tensor,
    statistics_net: &BoundMlp,
) -> Result<Clamped<Tensor>> {
    check_mine_inputs(p, q, q_marginal)?;
    let joint = statistics(statistics_net, p, q)?;
    let marg = clamp_exp_input(&statistics(statistics_net, p, q_marginal)?);
    Ok(Clamped {
        // Centre before averaging so a constant statistic gives exactly 0.
        value: joint.sub(&marg.value.log_mean_exp()?)?.mean(),
        clamped: marg.clamped,
    })
}

/// Output of [`MineEma::objective`].
pub struct MineObjective {
    /// Surrogate whose gradient uses the moving-average denominator.
    pub surrogate: Tensor,
    /// Plain Monte-Carlo estimate of the current batch.
    pub estimate: f64,
    pub clamped: usize,
}

/// Moving-average correction for the gradient of the log-partition term.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MineEma {
    pub rate: f64,
    pub average: Option<f64>,
}

impl Default for MineEma {
    fn default() -> Self {
        MineEma {
            rate: 0.99,
            average: None,
        }
    }
}

impl MineEma {
    pub fn objective(
        &mut self,
        p: &Tensor,
        q: &Tensor,
        q_marginal: &Tensor,
        statistics_net: &BoundMlp,
    ) -> Result<MineObjective> {
        check_mine_inputs(p, q, q_marginal)?;
        let joint = statistics(statistics_net, p, q)?;
        let marg = clamp_exp_input(&statistics(statistics_net, p, q_marginal)?);
        let exp_marg = marg.value.exp();
        let batch_mean = exp_marg.mean().item();
        let avg = match self.average {
            None => batch_mean,
            Some(a) => self.rate * a + (1.0 - self.rate) * batch_mean,
        };
        self.average = Some(avg);
        let joint_mean = joint.mean();
        let estimate = joint_mean.item() - batch_mean.ln();
        let surrogate = joint_mean.sub(&exp_marg.mean().scale(1.0 / avg))?;
        Ok(MineObjective {
            surrogate,
            estimate,
            clamped: marg.clamped,
        })
    }
}

/// Mean squared error between `R(concat(f_di, f_ci))` and `original`.
pub fn reconstruction_loss(
    f_di: &Tensor,
    f_ci: &Tensor,
    original: &Tensor,
    reconstructor: &BoundMlp,
) -> Result<Tensor> {
    let joined = Tensor::concat(&[f_di.clone(), f_ci.clone()], 1)?;
    let recon = reconstructor.forward(&joined)?;
    if recon.shape() != original.shape() {
        return Err(Error::dim(
            "reconstruction_loss",
            format!("reconstruction {:?} vs original {:?}", recon.shape(), original.shape()),
        ));
    }
    let n = original.numel().max(1) as f64;
    Ok(recon.sub(original)?.squared_l2().scale(1.0 / n))
}

/// `-mean log D(real) - mean log(1 - D(fake))`.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Clamped<Tensor>> {
    let r = neg_mean_log(d_real)?;
    let f = neg_mean_log_complement(d_fake)?;
    Ok(Clamped {
        value: r.value.add(&f.value)?,
        clamped: r.clamped + f.clamped,
    })
}

/// Non-saturating generator loss `-mean log D(fake)`.
pub fn generator_loss(d_fake: &Tensor) -> Result<Clamped<Tensor>> {
    neg_mean_log(d_fake)
}

#[derive(Clone, Debug)]
pub struct GanPair {
    pub d_loss: Tensor,
    pub g_loss: Tensor,
    pub clamped: usize,
}

pub fn gan_pair_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<GanPair> {
    let d = discriminator_loss(d_real, d_fake)?;
    let g = generator_loss(d_fake)?;
    Ok(GanPair {
        d_loss: d.value,
        g_loss: g.value,
        clamped: d.clamped + g.clamped,
    })
}

/// Mean over samples (rows) of `|recon - x|_1`.
pub fn cycle_consistency(x: &Tensor, recon: &Tensor) -> Result<Tensor> {
    if x.shape() != recon.shape() {
        return Err(Error::dim(
            "cycle_consistency",
            format!("{:?} vs {:?}", x.shape(), recon.shape()),
        ));
    }
    let rows = x.rows().max(1) as f64;
    Ok(recon.sub(x)?.l1().scale(1.0 / rows))
}

/// A differentiable map between domains.
pub trait Translate {
    fn translate(&self, x: &Tensor) -> Result<Tensor>;
}

impl Translate for BoundMlp {
    fn translate(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

pub struct CfganBatch<'a> {
    pub source: &'a Tensor,
    pub bridge: &'a Tensor,
    pub target: &'a Tensor,
}

/// Two forward generators (S->B, B->T), two reverse generators (T->B,
/// B->S) and one discriminator per domain; discriminators emit
/// probabilities.
pub struct CfganNets<'a> {
    pub g_sb: &'a dyn Translate,
    pub g_bt: &'a dyn Translate,
    pub f_tb: &'a dyn Translate,
    pub f_bs: &'a dyn Translate,
    pub d_s: &'a BoundMlp,
    pub d_b: &'a BoundMlp,
    pub d_t: &'a BoundMlp,
}

#[derive(Clone, Debug)]
pub struct CfganLosses {
    /// Discriminator side of the forward chain S -> B -> T.
    pub forward_d: Tensor,
    /// Discriminator side of the reverse chain T -> B -> S.
    pub reverse_d: Tensor,
    pub forward_g: Tensor,
    pub reverse_g: Tensor,
    /// Unweighted flow-cycle terms: B->S->B, S->B->S, T->B->T, S->B->T->B.
    pub cycle_terms: [Tensor; 4],
    /// `terms[0] + terms[1] + lambda * (terms[2] + terms[3])`.
    pub cycle: Tensor,
    /// Loss minimized by the discriminators.
    pub d_loss: Tensor,
    /// Loss minimized by the generators: adversarial plus `cycle_weight * cycle`.
    pub g_loss: Tensor,
    pub clamped: usize,
}

/// Two-hop adversarial plus flow-cycle objective.
///
/// Forward chain: `D_B` judges `G_SB(x)` against real bridge samples and,
/// weighted by `lambda`, `D_T` judges `G_BT(G_SB(x))` against real target
/// samples. The reverse chain mirrors it slot for slot: `D_B` judges
/// `F_TB(z)` and, weighted by `lambda`, `D_S` judges `F_BS(F_TB(z))`.
pub fn cfgan_objective(
    batch: &CfganBatch<'_>,
    nets: &CfganNets<'_>,
    lambda: f64,
    cycle_weight: f64,
) -> Result<CfganLosses> {
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda", format!("{lambda} is negative")));
    }
    let (x, y, z) = (batch.source, batch.bridge, batch.target);
    let mut clamped = 0;

    let sb = nets.g_sb.translate(x)?;
    let sbt = nets.g_bt.translate(&sb)?;
    let tb = nets.f_tb.translate(z)?;
    let tbs = nets.f_bs.translate(&tb)?;

    let d_b_real = nets.d_b.forward(y)?;
    let d_b_sb = nets.d_b.forward(&sb)?;
    let d_t_real = nets.d_t.forward(z)?;
    let d_t_sbt = nets.d_t.forward(&sbt)?;
    let d_b_tb = nets.d_b.forward(&tb)?;
    let d_s_real = nets.d_s.forward(x)?;
    let d_s_tbs = nets.d_s.forward(&tbs)?;

    let mut take = |c: Clamped<Tensor>| {
        clamped += c.clamped;
        c.value
    };
    let hop1_d = take(discriminator_loss(&d_b_real, &d_b_sb)?);
    let hop2_d = take(discriminator_loss(&d_t_real, &d_t_sbt)?);
    let rhop1_d = take(discriminator_loss(&d_b_real, &d_b_tb)?);
    let rhop2_d = take(discriminator_loss(&d_s_real, &d_s_tbs)?);
    let hop1_g = take(generator_loss(&d_b_sb)?);
    let hop2_g = take(generator_loss(&d_t_sbt)?);
    let rhop1_g = take(generator_loss(&d_b_tb)?);
    let rhop2_g = take(generator_loss(&d_s_tbs)?);

    let forward_d = hop1_d.add(&hop2_d.scale(lambda))?;
    let reverse_d = rhop1_d.add(&rhop2_d.scale(lambda))?;
    let forward_g = hop1_g.add(&hop2_g.scale(lambda))?;
    let reverse_g = rhop1_g.add(&rhop2_g.scale(lambda))?;

    let bsb = nets.g_sb.translate(&nets.f_bs.translate(y)?)?;
    let sbs = nets.f_bs.translate(&sb)?;
    let tbt = nets.g_bt.translate(&tb)?;
    let sbtb = nets.f_tb.translate(&sbt)?;
    let cycle_terms = [
        cycle_consistency(y, &bsb)?,
        cycle_consistency(x, &sbs)?,
        cycle_consistency(z, &tbt)?,
        cycle_consistency(&sb, &sbtb)?,
    ];
    let cycle = cycle_terms[0]
        .add(&cycle_terms[1])?
        .add(&cycle_terms[2].add(&cycle_terms[3])?.scale(lambda))?;

    let d_loss = forward_d.add(&reverse_d)?;
    let g_loss = forward_g.add(&reverse_g)?.add(&cycle.scale(cycle_weight))?;
    Ok(CfganLosses {
        forward_d,
        reverse_d,
        forward_g,
        reverse_g,
        cycle_terms,
        cycle,
        d_loss,
        g_loss,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, FinalActivation, Mlp, MlpSpec};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::matrix(1, 10, vec![0.0; 10]).unwrap();
        assert!(close(cross_entropy(&uniform, &[3]).unwrap().item(), 10f64.ln(), 1e-12));

        let sure = Tensor::matrix(1, 3, vec![-1e3, 1e3, -1e3]).unwrap();
        assert!(cross_entropy(&sure, &[1]).unwrap().item().abs() < 1e-12);

        let l = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let expected = -(2f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        let v = cross_entropy(&l, &[1]).unwrap().item();
        assert!(close(v, expected, 1e-12) && close(v, 0.313262, 1e-6));
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let l = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            cross_entropy(&l, &[0, 2]),
            Err(Error::Label { index: 1, label: 2, classes: 2 })
        ));
    }

    #[test]
    fn domain_identifier_examples() {
        let half = Tensor::vector(&[0.5, 0.5, 0.5]);
        let labels = [DomainLabel::ONE, DomainLabel::ZERO, DomainLabel::ONE];
        let v = domain_identifier_loss(&half, &labels).unwrap();
        assert!(close(v.value.item(), 2f64.ln(), 1e-12));
        assert_eq!(v.clamped, 0);

        let exact = Tensor::vector(&[1.0, 0.0]);
        let v = domain_identifier_loss(&exact, &[DomainLabel::ONE, DomainLabel::ZERO]).unwrap();
        assert!(v.value.item() < 1e-11);
        assert_eq!(v.clamped, 2);

        let v = domain_identifier_loss(&Tensor::vector(&[0.9]), &[DomainLabel::ONE]).unwrap();
        assert!(close(v.value.item(), -(0.9f64).ln(), 1e-12));
        assert!(close(v.value.item(), 0.105361, 1e-6));
    }

    #[test]
    fn domain_label_is_binary() {
        assert!(DomainLabel::new(1).is_ok());
        assert!(DomainLabel::new(2).is_err());
    }

    #[test]
    fn entropy_confusion_examples() {
        let uniform = Tensor::matrix(2, 4, vec![0.25; 8]).unwrap();
        assert!(close(entropy_confusion_loss(&uniform).unwrap().item(), -(4f64.ln()), 1e-12));

        let hot = Tensor::matrix(2, 3, vec![1., 0., 0., 0., 0., 1.]).unwrap();
        assert!(entropy_confusion_loss(&hot).unwrap().item().abs() < 1e-12);

        let p = Tensor::matrix(1, 2, vec![0.7, 0.3]).unwrap();
        let expected = 0.7 * 0.7f64.ln() + 0.3 * 0.3f64.ln();
        let v = entropy_confusion_loss(&p).unwrap().item();
        assert!(close(v, expected, 1e-12) && close(v, -0.610864, 1e-6));
    }

    #[test]
    fn entropy_confusion_rejects_non_distribution() {
        let p = Tensor::matrix(1, 2, vec![0.7, 0.2]).unwrap();
        assert!(matches!(entropy_confusion_loss(&p), Err(Error::Contract(_))));
    }

    #[test]
    fn entropy_from_logits_agrees() {
        let logits = Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 0.0, 0.0, 3.0]).unwrap();
        let a = entropy_confusion_from_logits(&logits).unwrap().item();
        let b = entropy_confusion_loss(&logits.softmax(1).unwrap()).unwrap().item();
        assert!(close(a, b, 1e-12));
    }

    #[test]
    fn mmd_singletons_closed_form() {
        let x = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let y = Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap();
        let s = 0.8;
        let k = KernelSpec::rbf(&[s]).unwrap();
        let d2 = 1.5f64 * 1.5 + 1.5 * 1.5;
        let expected = 2.0 - 2.0 * (-d2 / (2.0 * s * s)).exp();
        assert!(close(mmd_squared(&x, &y, &k).unwrap().item(), expected, 1e-14));
    }

    #[test]
    fn mmd_dimension_mismatch() {
        let k = KernelSpec::rbf(&[1.0]).unwrap();
        let x = Tensor::zeros(&[2, 2]);
        let y = Tensor::zeros(&[2, 3]);
        assert!(matches!(mmd_squared(&x, &y, &k), Err(Error::Dimension { .. })));
    }

    #[test]
    fn kernel_spec_validation() {
        assert!(KernelSpec::rbf(&[]).is_err());
        assert!(KernelSpec::rbf(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn median_heuristic_scales_multipliers() {
        // distances: 1, 2, 1 -> median 1
        let pts = [0.0, 1.0, 2.0];
        let k = KernelSpec::median_heuristic(&[&pts], 1).unwrap();
        assert_eq!(k.bandwidths, MEDIAN_MULTIPLIERS.to_vec());
        let same = [3.0, 3.0];
        let k = KernelSpec::median_heuristic(&[&same], 1).unwrap();
        assert_eq!(k.bandwidths, MEDIAN_MULTIPLIERS.to_vec());
    }

    fn set(rows: usize, data: Vec<f64>) -> Option<Tensor> {
        Some(Tensor::matrix(rows, 1, data).unwrap())
    }

    #[test]
    fn class_discrepancy_identical_sets_is_zero() {
        let k = KernelSpec::rbf(&[1.0]).unwrap();
        let s = vec![set(2, vec![0.0, 1.0]), set(1, vec![3.0])];
        let v = class_level_discrepancy(&s, &s, &s, &k).unwrap();
        assert!(v.value.item().abs() < 1e-12);
        assert_eq!(v.used_classes, 2);
    }

    #[test]
    fn class_discrepancy_skips_empty_and_errors_when_none_usable() {
        let k = KernelSpec::rbf(&[1.0]).unwrap();
        let s = vec![set(1, vec![0.0]), set(1, vec![1.0])];
        let t = vec![set(1, vec![0.5]), None];
        let v = class_level_discrepancy(&s, &t, &s, &k).unwrap();
        assert_eq!((v.used_classes, v.skipped_classes), (1, 1));
        let empty = vec![None, Some(Tensor::zeros(&[0, 1]))];
        assert!(matches!(
            class_level_discrepancy(&s, &empty, &s, &k),
            Err(Error::Estimation(_))
        ));
    }

    fn tiny_net(input: usize, out: usize, seed: u64) -> Mlp {
        Mlp::init(&MlpSpec::leaky(&[input, 4, out]), seed).unwrap()
    }

    #[test]
    fn mine_with_constant_statistic_is_zero() {
        for c in [-3.0, 0.0, 2.5] {
            let mut t = tiny_net(2, 1, 0);
            t.params.iter_mut().for_each(|p| p.value.iter_mut().for_each(|v| *v = 0.0));
            t.params[3].value = vec![c];
            let p = Tensor::matrix(3, 1, vec![0.1, 0.2, 0.3]).unwrap();
            let q = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
            let qm = Tensor::matrix(3, 1, vec![3.0, 1.0, 2.0]).unwrap();
            let v = mine_estimate(&p, &q, &qm, &t.bind()).unwrap();
            assert_eq!(v.value.item(), 0.0, "c = {c}");
        }
    }

    #[test]
    fn mine_requires_two_samples() {
        let t = tiny_net(2, 1, 0);
        let p = Tensor::matrix(1, 1, vec![0.1]).unwrap();
        assert!(mine_estimate(&p, &p, &p, &t.bind()).is_err());
    }

    #[test]
    fn mine_clamps_exp_inputs() {
        let mut t = tiny_net(2, 1, 0);
        t.params.iter_mut().for_each(|p| p.value.iter_mut().for_each(|v| *v = 0.0));
        t.params[3].value = vec![40.0];
        let p = Tensor::matrix(2, 1, vec![0.1, 0.2]).unwrap();
        let v = mine_estimate(&p, &p, &p, &t.bind()).unwrap();
        assert_eq!(v.clamped, 2);
        assert!(close(v.value.item(), 10.0, 1e-12));
    }

    #[test]
    fn mine_ema_surrogate_matches_estimate_at_start() {
        let t = tiny_net(2, 1, 5);
        let p = Tensor::matrix(3, 1, vec![0.1, -0.4, 0.9]).unwrap();
        let q = Tensor::matrix(3, 1, vec![1.0, 0.3, -2.0]).unwrap();
        let qm = Tensor::matrix(3, 1, vec![0.3, -2.0, 1.0]).unwrap();
        let bound = t.bind();
        let plain = mine_estimate(&p, &q, &qm, &bound).unwrap().value.item();
        let mut ema = MineEma::default();
        let obj = ema.objective(&p, &q, &qm, &bound).unwrap();
        assert!(close(obj.estimate, plain, 1e-12));
        // first call: gradient of the surrogate equals the true gradient
        let a = tiny_net(2, 1, 5).bind();
        mine_estimate(&p, &q, &qm, &a).unwrap().value.backward().unwrap();
        let b = tiny_net(2, 1, 5).bind();
        MineEma::default().objective(&p, &q, &qm, &b).unwrap().surrogate.backward().unwrap();
        for (ga, gb) in a.grads().iter().zip(b.grads()) {
            for (x, y) in ga.iter().zip(gb) {
                assert!(close(*x, y, 1e-12));
            }
        }
    }

    #[test]
    fn reconstruction_examples() {
        let spec = MlpSpec::new(&[3, 3], Activation::Identity, FinalActivation::Identity);
        let mut r = Mlp::init(&spec, 0).unwrap();
        r.params[0].value = vec![1., 0., 0., 0., 1., 0., 0., 0., 1.];
        let f_di = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let f_ci = Tensor::matrix(2, 1, vec![5., 6.]).unwrap();
        let orig = Tensor::concat(&[f_di.clone(), f_ci.clone()], 1).unwrap();
        assert_eq!(reconstruction_loss(&f_di, &f_ci, &orig, &r.bind()).unwrap().item(), 0.0);

        r.params[0].value = vec![0.0; 9];
        let target = Tensor::matrix(2, 3, vec![1., -1., 2., 0., 3., 1.]).unwrap();
        let ms = (1. + 1. + 4. + 0. + 9. + 1.) / 6.0;
        assert!(close(reconstruction_loss(&f_di, &f_ci, &target, &r.bind()).unwrap().item(), ms, 1e-12));

        // fixed linear R on 2-D: R(u) = [u0 + u1, 2 u1]
        let spec = MlpSpec::new(&[2, 2], Activation::Identity, FinalActivation::Identity);
        let mut r = Mlp::init(&spec, 0).unwrap();
        r.params[0].value = vec![1., 0., 1., 2.];
        let a = Tensor::matrix(2, 1, vec![1., -1.]).unwrap();
        let b = Tensor::matrix(2, 1, vec![2., 0.5]).unwrap();
        let orig = Tensor::matrix(2, 2, vec![3., 3., 0., 0.]).unwrap();
        // R rows: [3, 4], [-0.5, 1]; errors: [0, 1], [-0.5, 1]
        let expected = (0.0 + 1.0 + 0.25 + 1.0) / 4.0;
        assert!(close(reconstruction_loss(&a, &b, &orig, &r.bind()).unwrap().item(), expected, 1e-12));

        let wrong = Tensor::zeros(&[2, 3]);
        assert!(reconstruction_loss(&a, &b, &wrong, &r.bind()).is_err());
    }

    #[test]
    fn gan_pair_examples() {
        let half = Tensor::vector(&[0.5, 0.5]);
        let g = gan_pair_losses(&half, &half).unwrap();
        assert!(close(g.d_loss.item(), 2.0 * 2f64.ln(), 1e-12));
        assert!(close(g.g_loss.item(), 2f64.ln(), 1e-12));

        let g = gan_pair_losses(&Tensor::vector(&[1.0]), &Tensor::vector(&[0.0])).unwrap();
        assert!(g.d_loss.item() < 1e-11);

        let g = generator_loss(&Tensor::vector(&[0.8])).unwrap();
        assert!(close(g.value.item(), 0.223144, 1e-6));
    }

    #[test]
    fn cycle_consistency_examples() {
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(cycle_consistency(&x, &x).unwrap().item(), 0.0);
        let zero = Tensor::zeros(&[1, 2]);
        assert_eq!(cycle_consistency(&x, &zero).unwrap().item(), 3.0);
        assert!(cycle_consistency(&x, &Tensor::zeros(&[2, 1])).is_err());
    }
}
