//! End-to-end trainers: source-only baseline, PADA (adversarial alignment
//! through the bridge, prototype matching, disentanglement, MI
//! minimization, reconstruction) and the two-hop CFGAN translator.
//!
//! Trainers only ever see labeled source data and unlabeled bridge/target
//! views. Accuracy on sealed labels comes in through an [`EvalHook`] owned by
//! the caller.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{DomainDataset, DomainTag, LabeledView, UnlabeledView};
use crate::error::{Error, Result};
use crate::losses::{self, CfganBatch, CfganNets, DomainLabel, KernelSpec, MineEma, Translate};
use crate::nn::{Activation, BoundMlp, FinalActivation, Mlp, MlpSpec, Trainable};
use crate::prototypes::{self, PrototypeSet};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Which feature branch the domain identifiers see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureBranch {
    /// Domain-invariant branch of the disentangler.
    #[default]
    Di,
    /// Class-irrelevant (domain-specific) branch of the disentangler.
    Ds,
    /// Raw extractor output.
    G,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelWidths {
    /// Hidden widths of the extractor G.
    pub extractor_hidden: Vec<usize>,
    /// Width of f_G.
    pub feature: usize,
    pub disentangler_hidden: Vec<usize>,
    /// Width of each disentangled branch (f_di and f_ci).
    pub branch: usize,
    /// Hidden widths of C and CI.
    pub classifier_hidden: Vec<usize>,
    pub identifier_hidden: Vec<usize>,
    pub reconstructor_hidden: Vec<usize>,
    pub statistics_hidden: Vec<usize>,
}

impl Default for ModelWidths {
    fn default() -> Self {
        ModelWidths {
            extractor_hidden: vec![32],
            feature: 16,
            disentangler_hidden: vec![32],
            branch: 8,
            classifier_hidden: vec![],
            identifier_hidden: vec![32],
            reconstructor_hidden: vec![32],
            statistics_hidden: vec![32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adv: f64,
    pub proto: f64,
    pub ent: f64,
    pub rec: f64,
    pub mi: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        adv: 0.0,
        proto: 0.0,
        ent: 0.0,
        rec: 0.0,
        mi: 0.0,
    };
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1.0,
            proto: 0.5,
            ent: 0.1,
            rec: 0.1,
            mi: 0.01,
        }
    }
}

/// First iteration at which each auxiliary step runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Warmup {
    pub adv: usize,
    pub proto: usize,
    pub ent: usize,
    pub mi: usize,
    pub rec: usize,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_iterations() -> usize {
    2000
}
fn default_batch() -> usize {
    64
}
fn default_threshold() -> f64 {
    0.9
}
fn default_momentum() -> f64 {
    0.7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PadaConfig {
    #[serde(default)]
    pub widths: ModelWidths,
    #[serde(default)]
    pub weights: LossWeights,
    /// Second-hop weight of the CFGAN objective; carried for shared configs,
    /// not used by PADA.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_threshold")]
    pub pseudo_label_threshold: f64,
    #[serde(default = "default_momentum")]
    pub prototype_momentum: f64,
    #[serde(default)]
    pub warmup: Warmup,
    #[serde(default)]
    pub identifier_branch: FeatureBranch,
    /// Train the domain identifiers (for accuracy monitoring) even when the
    /// adversarial weight is zero.
    #[serde(default)]
    pub monitor_domain_identifier: bool,
    /// Evaluation hook period in iterations; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// Record elapsed seconds. Off by default so logs are reproducible.
    #[serde(default)]
    pub wall_clock: bool,
    pub seed: u64,
}

impl PadaConfig {
    pub fn new(seed: u64) -> Self {
        PadaConfig {
            widths: ModelWidths::default(),
            weights: LossWeights::default(),
            lambda: default_lambda(),
            lr: default_lr(),
            iterations: default_iterations(),
            batch_size: default_batch(),
            pseudo_label_threshold: default_threshold(),
            prototype_momentum: default_momentum(),
            warmup: Warmup::default(),
            identifier_branch: FeatureBranch::Di,
            monitor_domain_identifier: false,
            eval_every: 0,
            wall_clock: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [
            ("weights.adv", w.adv),
            ("weights.proto", w.proto),
            ("weights.ent", w.ent),
            ("weights.rec", w.rec),
            ("weights.mi", w.mi),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("{v} must be finite and non-negative")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.prototype_momentum) {
            return Err(Error::config("prototype_momentum", "must lie in [0, 1)"));
        }
        if !(self.pseudo_label_threshold > 0.0 && self.pseudo_label_threshold <= 1.0) {
            return Err(Error::config("pseudo_label_threshold", "must lie in (0, 1]"));
        }
        let ws = &self.widths;
        if ws.feature == 0 || ws.branch == 0 {
            return Err(Error::config("widths", "feature and branch widths must be positive"));
        }
        Ok(())
    }
}

/// All PADA networks. G: x -> f_G; D: f_G -> [f_di | f_ci]; C and CI:
/// branch -> class logits; DI_sb, DI_bt: branch -> domain probability;
/// R: [f_di | f_ci] -> f_G; T: [f_di | f_ci] -> scalar statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub input_dim: usize,
    pub classes: usize,
    pub branch: usize,
    pub identifier_branch: FeatureBranch,
    pub g: Mlp,
    pub d: Mlp,
    pub c: Mlp,
    pub ci: Mlp,
    pub di_sb: Mlp,
    pub di_bt: Mlp,
    pub r: Mlp,
    pub t: Mlp,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl ModelBundle {
    pub fn init(input_dim: usize, classes: usize, cfg: &PadaConfig) -> Result<Self> {
        let w = &cfg.widths;
        let leaky = |ws: Vec<usize>, last: FinalActivation| MlpSpec::new(&ws, Activation::LeakyRelu(crate::nn::LEAKY_SLOPE), last);
        let id_width = match cfg.identifier_branch {
            FeatureBranch::Di | FeatureBranch::Ds => w.branch,
            FeatureBranch::G => w.feature,
        };
        let seed = cfg.seed;
        let net = |spec: MlpSpec, index: u64| Mlp::init(&spec, rng::subseed(seed, index));
        Ok(ModelBundle {
            input_dim,
            classes,
            branch: w.branch,
            identifier_branch: cfg.identifier_branch,
            g: net(leaky(widths(input_dim, &w.extractor_hidden, w.feature), FinalActivation::Identity), 0)?,
            d: net(leaky(widths(w.feature, &w.disentangler_hidden, 2 * w.branch), FinalActivation::Identity), 1)?,
            c: net(leaky(widths(w.branch, &w.classifier_hidden, classes), FinalActivation::Identity), 2)?,
            ci: net(leaky(widths(w.branch, &w.classifier_hidden, classes), FinalActivation::Identity), 3)?,
            di_sb: net(leaky(widths(id_width, &w.identifier_hidden, 1), FinalActivation::Sigmoid), 4)?,
            di_bt: net(leaky(widths(id_width, &w.identifier_hidden, 1), FinalActivation::Sigmoid), 5)?,
            r: net(leaky(widths(2 * w.branch, &w.reconstructor_hidden, w.feature), FinalActivation::Identity), 6)?,
            t: net(leaky(widths(2 * w.branch, &w.statistics_hidden, 1), FinalActivation::Identity), 7)?,
        })
    }

    /// Class logits through G -> D -> C on f_di, row-major `n x K`.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let rows = features.len() / self.input_dim.max(1);
        let x = Tensor::matrix(rows, self.input_dim, features.to_vec())?;
        let f = Features::compute(&self.g.bind_frozen(), &self.d.bind_frozen(), &x, self.branch)?;
        Ok(self.c.bind_frozen().forward(&f.di)?.values().to_vec())
    }

    /// Arg-max class per row.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<usize>> {
        Ok(self
            .logits(features)?
            .chunks_exact(self.classes)
            .map(prototypes::argmax)
            .collect())
    }

    /// f_di embeddings, row-major `n x branch`.
    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        let rows = features.len() / self.input_dim.max(1);
        let x = Tensor::matrix(rows, self.input_dim, features.to_vec())?;
        let f = Features::compute(&self.g.bind_frozen(), &self.d.bind_frozen(), &x, self.branch)?;
        Ok(f.di.values().to_vec())
    }
}

/// Both disentangled branches are scaled to unit RMS per row, which keeps
/// them bounded under the adversarial update without saturating.
pub const BRANCH_NORM_EPS: f64 = 1e-6;

struct Features {
    g: Tensor,
    di: Tensor,
    ci: Tensor,
}

impl Features {
    fn compute(g: &BoundMlp, d: &BoundMlp, x: &Tensor, branch: usize) -> Result<Features> {
        let fg = g.forward(x)?;
        let split = d.forward(&fg)?;
        Ok(Features {
            di: split.slice_cols(0, branch)?.rms_normalize(BRANCH_NORM_EPS)?,
            ci: split.slice_cols(branch, 2 * branch)?.rms_normalize(BRANCH_NORM_EPS)?,
            g: fg,
        })
    }

    fn branch(&self, which: FeatureBranch) -> &Tensor {
        match which {
            FeatureBranch::Di => &self.di,
            FeatureBranch::Ds => &self.ci,
            FeatureBranch::G => &self.g,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub iteration: usize,
    #[serde(default)]
    pub losses: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub accuracy: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<f64>,
}

impl MetricRecord {
    fn new(iteration: usize) -> Self {
        MetricRecord {
            iteration,
            ..MetricRecord::default()
        }
    }

    /// Name of the first non-finite value, if any.
    pub fn non_finite(&self) -> Option<&str> {
        self.losses
            .iter()
            .chain(&self.accuracy)
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.as_str())
    }
}

pub const ABORT_FLAG: &str = "aborted";

/// Caller-supplied evaluation, e.g. accuracy on sealed labels.
pub type EvalHook<'a> = &'a dyn Fn(&ModelBundle) -> Result<BTreeMap<String, f64>>;

#[derive(Clone, Debug)]
pub struct TrainRun<M> {
    pub model: M,
    pub records: Vec<MetricRecord>,
    /// Set when a non-finite value stopped the run; the last record carries
    /// [`ABORT_FLAG`].
    pub aborted: Option<String>,
}

/// Epoch-wise shuffled index stream.
struct Sampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        Sampler {
            n,
            order: (0..n).collect(),
            pos: n,
            rng: rng::seeded(seed, stream),
        }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather(features: &[f64], dim: usize, idx: &[usize]) -> Result<Tensor> {
    let mut v = Vec::with_capacity(idx.len() * dim);
    idx.iter().for_each(|&i| v.extend_from_slice(&features[i * dim..(i + 1) * dim]));
    Tensor::matrix(idx.len(), dim, v)
}

struct Optims {
    g: Trainable,
    d: Trainable,
    c: Trainable,
    ci: Trainable,
    di_sb: Trainable,
    di_bt: Trainable,
    r: Trainable,
    t: Trainable,
}

impl Optims {
    fn new(m: ModelBundle, lr: f64) -> Self {
        let t = |net: Mlp| {
            let opt = crate::nn::AdamState::new(&net.params, lr);
            Trainable { net, opt }
        };
        Optims {
            g: t(m.g),
            d: t(m.d),
            c: t(m.c),
            ci: t(m.ci),
            di_sb: t(m.di_sb),
            di_bt: t(m.di_bt),
            r: t(m.r),
            t: t(m.t),
        }
    }

    fn bundle(&self, template: &ModelBundle) -> ModelBundle {
        ModelBundle {
            g: self.g.net.clone(),
            d: self.d.net.clone(),
            c: self.c.net.clone(),
            ci: self.ci.net.clone(),
            di_sb: self.di_sb.net.clone(),
            di_bt: self.di_bt.net.clone(),
            r: self.r.net.clone(),
            t: self.t.net.clone(),
            ..template.clone()
        }
    }
}

fn bind(t: &Trainable, trainable: bool) -> BoundMlp {
    if trainable {
        t.net.bind()
    } else {
        t.net.bind_frozen()
    }
}

fn domain_labels(zeros: usize, ones: usize) -> Vec<DomainLabel> {
    let mut l = vec![DomainLabel::ZERO; zeros];
    l.resize(zeros + ones, DomainLabel::ONE);
    l
}

/// Fraction of correct calls of an identifier on `[a; b]` with labels 0/1.
fn identifier_accuracy(p: &Tensor, zeros: usize) -> f64 {
    let v = p.values();
    let correct = v
        .iter()
        .enumerate()
        .filter(|(i, &p)| (p >= 0.5) == (*i >= zeros))
        .count();
    correct as f64 / v.len() as f64
}

struct Unlabeled<'a> {
    view: &'a UnlabeledView,
    sampler: Sampler,
    pseudo: Vec<Option<usize>>,
}

/// Mean squared distance between matching valid source and target
/// prototypes.
fn prototype_gap(a: &PrototypeSet, b: &PrototypeSet) -> Option<f64> {
    let shared: Vec<usize> = a.valid_classes().filter(|&k| b.is_valid(k)).collect();
    if shared.is_empty() {
        return None;
    }
    let total: f64 = shared
        .iter()
        .map(|&k| a.row(k).iter().zip(b.row(k)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    Some(total / shared.len() as f64)
}

fn class_sets(features: &Tensor, labels: &[Option<usize>], classes: usize) -> Result<Vec<Option<Tensor>>> {
    (0..classes)
        .map(|k| {
            let rows: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| **l == Some(k))
                .map(|(i, _)| i)
                .collect();
            if rows.is_empty() {
                Ok(None)
            } else {
                features.select_rows(&rows).map(Some)
            }
        })
        .collect()
}

/// Baseline: cross-entropy on source only.
pub fn train_source_only(
    source: &LabeledView,
    config: &PadaConfig,
    eval: Option<EvalHook<'_>>,
) -> Result<TrainRun<ModelBundle>> {
    let config = PadaConfig {
        weights: LossWeights::ZERO,
        monitor_domain_identifier: false,
        ..config.clone()
    };
    let empty = UnlabeledView {
        dim: source.dim,
        features: Vec::new(),
    };
    run_pada(source, &empty, &empty, &config, eval)
}

/// PADA. Each iteration runs, in order: task, adversarial, prototype,
/// disentangle, MI and reconstruction steps. Steps with zero weight (or
/// before their warm-up) are skipped entirely and draw no randomness.
pub fn train_pada(
    source: &LabeledView,
    bridge: &UnlabeledView,
    target: &UnlabeledView,
    config: &PadaConfig,
    eval: Option<EvalHook<'_>>,
) -> Result<TrainRun<ModelBundle>> {
    let w = &config.weights;
    let aux = w.adv > 0.0 || w.proto > 0.0 || w.ent > 0.0 || w.mi > 0.0 || w.rec > 0.0 || config.monitor_domain_identifier;
    if aux && (bridge.is_empty() || target.is_empty()) {
        return Err(Error::Validation("bridge and target sets must be non-empty".into()));
    }
    for v in [bridge, target] {
        if !v.is_empty() && v.dim != source.dim {
            return Err(Error::Validation(format!(
                "feature widths differ: source {} vs {}",
                source.dim, v.dim
            )));
        }
    }
    run_pada(source, bridge, target, config, eval)
}

fn run_pada(
    source: &LabeledView,
    bridge: &UnlabeledView,
    target: &UnlabeledView,
    cfg: &PadaConfig,
    eval: Option<EvalHook<'_>>,
) -> Result<TrainRun<ModelBundle>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Validation("source set is empty".into()));
    }
    let dim = source.dim;
    let classes = source.classes().max(2);
    if !(cfg.weights.proto == 0.0 || cfg.pseudo_label_threshold > 1.0 / classes as f64) {
        return Err(Error::config(
            "pseudo_label_threshold",
            format!("must exceed 1/{classes}"),
        ));
    }
    let template = ModelBundle::init(dim, classes, cfg)?;
    let branch = template.branch;
    let mut nets = Optims::new(template.clone(), cfg.lr);
    let w = &cfg.weights;
    let active = |weight: f64, start: usize, it: usize| weight > 0.0 && it >= start;

    let seed = cfg.seed;
    let mut src = Sampler::new(source.len(), seed, rng::stream::SOURCE_BATCHES);
    let mut bri = Unlabeled {
        view: bridge,
        sampler: Sampler::new(bridge.len(), seed, rng::stream::BRIDGE_BATCHES),
        pseudo: vec![None; bridge.len()],
    };
    let mut tgt = Unlabeled {
        view: target,
        sampler: Sampler::new(target.len(), seed, rng::stream::TARGET_BATCHES),
        pseudo: vec![None; target.len()],
    };
    let mut shuffle_rng = rng::seeded(seed, rng::stream::MINE_SHUFFLE);
    let mut mine_ema = MineEma::default();
    let mut proto_src: Option<PrototypeSet> = None;
    let mut proto_tgt: Option<PrototypeSet> = None;

    let batch = cfg.batch_size.min(source.len());
    let epoch_len = source.len().div_ceil(batch);
    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut aborted = None;

    for it in 0..cfg.iterations {
        let mut rec = MetricRecord::new(it);
        let result = (|| -> Result<()> {
            let idx = src.next(batch);
            let xs = gather(&source.features, dim, &idx)?;
            let ys: Vec<usize> = idx.iter().map(|&i| source.labels[i]).collect();

            // (1) task step
            {
                let (g, d, c) = (bind(&nets.g, true), bind(&nets.d, true), bind(&nets.c, true));
                let f = Features::compute(&g, &d, &xs, branch)?;
                let ce = losses::cross_entropy(&c.forward(&f.di)?, &ys)?;
                ce.backward()?;
                rec.losses.insert("ce".into(), ce.item());
                nets.g.apply(&g.grads())?;
                nets.d.apply(&d.grads())?;
                nets.c.apply(&c.grads())?;
            }

            let need_unlabeled = active(w.adv, cfg.warmup.adv, it)
                || cfg.monitor_domain_identifier
                || active(w.proto, cfg.warmup.proto, it)
                || active(w.ent, cfg.warmup.ent, it)
                || active(w.mi, cfg.warmup.mi, it)
                || active(w.rec, cfg.warmup.rec, it);
            if !need_unlabeled {
                return Ok(());
            }
            let ib = bri.sampler.next(batch.min(bridge.len()));
            let xb = gather(&bridge.features, dim, &ib)?;
            let itg = tgt.sampler.next(batch.min(target.len()));
            let xt = gather(&target.features, dim, &itg)?;
            let all = Tensor::concat(&[xs.clone(), xb.clone(), xt.clone()], 0)?;
            let (ns, nb, nt) = (xs.rows(), xb.rows(), xt.rows());

            // (2) adversarial step
            if active(w.adv, cfg.warmup.adv, it) || cfg.monitor_domain_identifier {
                let (g, d) = (bind(&nets.g, false), bind(&nets.d, false));
                let pick = |x: &Tensor| -> Result<Tensor> {
                    Ok(Features::compute(&g, &d, x, branch)?.branch(cfg.identifier_branch).clone())
                };
                let (fs, fb, ft) = (pick(&xs)?, pick(&xb)?, pick(&xt)?);
                for (net, a, b, key) in [
                    (&mut nets.di_sb, &fs, &fb, "sb"),
                    (&mut nets.di_bt, &fb, &ft, "bt"),
                ] {
                    let di = bind(net, true);
                    let p = di.forward(&Tensor::concat(&[a.clone(), b.clone()], 0)?)?;
                    rec.accuracy.insert(format!("di_{key}"), identifier_accuracy(&p, a.rows()));
                    let l = losses::domain_identifier_loss(&p, &domain_labels(a.rows(), b.rows()))?;
                    l.value.backward()?;
                    net.apply(&di.grads())?;
                }
                if active(w.adv, cfg.warmup.adv, it) {
                    let (g, d) = (bind(&nets.g, true), bind(&nets.d, true));
                    let (di_sb, di_bt) = (bind(&nets.di_sb, false), bind(&nets.di_bt, false));
                    let f = Features::compute(&g, &d, &all, branch)?;
                    let fb = f.branch(cfg.identifier_branch);
                    let fs = fb.slice_rows(0, ns)?;
                    let fbr = fb.slice_rows(ns, ns + nb)?;
                    let ftr = fb.slice_rows(ns + nb, ns + nb + nt)?;
                    let l_sb = losses::domain_identifier_loss(
                        &di_sb.forward(&Tensor::concat(&[fs, fbr.clone()], 0)?)?,
                        &domain_labels(ns, nb),
                    )?;
                    let l_bt = losses::domain_identifier_loss(
                        &di_bt.forward(&Tensor::concat(&[fbr, ftr], 0)?)?,
                        &domain_labels(nb, nt),
                    )?;
                    let l = l_sb.value.add(&l_bt.value)?;
                    l.scale(-w.adv).backward()?;
                    rec.losses.insert("di".into(), l.item());
                    if l_sb.clamped + l_bt.clamped > 0 {
                        rec.flags.push("di_clamped".into());
                    }
                    nets.g.apply(&g.grads())?;
                    nets.d.apply(&d.grads())?;
                }
            }

            // (3) prototype step
            if active(w.proto, cfg.warmup.proto, it) {
                if it == cfg.warmup.proto || (it - cfg.warmup.proto) % epoch_len == 0 {
                    let model = nets.bundle(&template);
                    for u in [&mut bri, &mut tgt] {
                        let probs = softmax_rows(&model.logits(&u.view.features)?, classes);
                        let pl = prototypes::pseudo_label(&probs, classes, cfg.pseudo_label_threshold)?;
                        u.pseudo = vec![None; u.view.len()];
                        for (&i, &l) in pl.indices.iter().zip(&pl.labels) {
                            u.pseudo[i] = Some(l);
                        }
                    }
                }
                let (g, d) = (bind(&nets.g, true), bind(&nets.d, true));
                let f = Features::compute(&g, &d, &all, branch)?;
                let fs = f.di.slice_rows(0, ns)?;
                let fb = f.di.slice_rows(ns, ns + nb)?;
                let ft = f.di.slice_rows(ns + nb, ns + nb + nt)?;
                let ls: Vec<Option<usize>> = ys.iter().map(|&y| Some(y)).collect();
                let lb: Vec<Option<usize>> = ib.iter().map(|&i| bri.pseudo[i]).collect();
                let lt: Vec<Option<usize>> = itg.iter().map(|&i| tgt.pseudo[i]).collect();

                let ps = prototypes::compute_prototypes(fs.values(), branch, &ys, classes, DomainTag::Source)?;
                let (ti, tl): (Vec<usize>, Vec<usize>) =
                    lt.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l))).unzip();
                let pt_vals: Vec<f64> = ti.iter().flat_map(|&i| ft.values()[i * branch..(i + 1) * branch].to_vec()).collect();
                let pt = prototypes::compute_prototypes(&pt_vals, branch, &tl, classes, DomainTag::Target)?;
                for (slot, fresh) in [(&mut proto_src, ps), (&mut proto_tgt, pt)] {
                    match slot {
                        Some(p) => p.ema_update(&fresh, cfg.prototype_momentum)?,
                        None => *slot = Some(fresh),
                    }
                }
                if let Some(gap) = prototype_gap(proto_src.as_ref().unwrap(), proto_tgt.as_ref().unwrap()) {
                    rec.losses.insert("proto_gap".into(), gap);
                }

                let kernel = KernelSpec::median_heuristic(&[f.di.values()], branch)?;
                let sets = (
                    class_sets(&fs, &ls, classes)?,
                    class_sets(&ft, &lt, classes)?,
                    class_sets(&fb, &lb, classes)?,
                );
                match losses::class_level_discrepancy(&sets.0, &sets.1, &sets.2, &kernel) {
                    Ok(cd) => {
                        cd.value.scale(w.proto).backward()?;
                        rec.losses.insert("proto".into(), cd.value.item());
                        nets.g.apply(&g.grads())?;
                        nets.d.apply(&d.grads())?;
                    }
                    Err(Error::Estimation(_)) => rec.flags.push("prototype_skipped".into()),
                    Err(e) => return Err(e),
                }
            }

            // (4) disentangle step
            if active(w.ent, cfg.warmup.ent, it) {
                let (g, d) = (bind(&nets.g, false), bind(&nets.d, false));
                let f = Features::compute(&g, &d, &xs, branch)?;
                let ci = bind(&nets.ci, true);
                let l = losses::cross_entropy(&ci.forward(&f.di)?, &ys)?
                    .add(&losses::cross_entropy(&ci.forward(&f.ci)?, &ys)?)?;
                l.backward()?;
                rec.losses.insert("ci".into(), l.item());
                nets.ci.apply(&ci.grads())?;

                let d = bind(&nets.d, true);
                let ci = bind(&nets.ci, false);
                let f = Features::compute(&g, &d, &all, branch)?;
                let ent = losses::entropy_confusion_from_logits(&ci.forward(&f.ci)?)?;
                ent.scale(w.ent).backward()?;
                rec.losses.insert("ent".into(), ent.item());
                nets.d.apply(&d.grads())?;
            }

            // (5) MI step
            if active(w.mi, cfg.warmup.mi, it) {
                let n = all.rows();
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut shuffle_rng);
                {
                    let (g, d) = (bind(&nets.g, false), bind(&nets.d, false));
                    let f = Features::compute(&g, &d, &all, branch)?;
                    let t = bind(&nets.t, true);
                    let obj = mine_ema.objective(&f.di, &f.ci, &f.ci.select_rows(&perm)?, &t)?;
                    obj.surrogate.neg().backward()?;
                    nets.t.apply(&t.grads())?;
                }
                let (g, d) = (bind(&nets.g, true), bind(&nets.d, true));
                let t = bind(&nets.t, false);
                let f = Features::compute(&g, &d, &all, branch)?;
                let est = losses::mine_estimate(&f.di, &f.ci, &f.ci.select_rows(&perm)?, &t)?;
                est.value.scale(w.mi).backward()?;
                rec.losses.insert("mi".into(), est.value.item());
                if est.clamped > 0 {
                    rec.flags.push("mi_clamped".into());
                }
                nets.g.apply(&g.grads())?;
                nets.d.apply(&d.grads())?;
            }

            // (6) reconstruction step
            if active(w.rec, cfg.warmup.rec, it) {
                let g = bind(&nets.g, false);
                let (d, r) = (bind(&nets.d, true), bind(&nets.r, true));
                let f = Features::compute(&g, &d, &all, branch)?;
                let l = losses::reconstruction_loss(&f.di, &f.ci, &f.g.detach(), &r)?;
                l.scale(w.rec).backward()?;
                rec.losses.insert("rec".into(), l.item());
                nets.d.apply(&d.grads())?;
                nets.r.apply(&r.grads())?;
            }
            Ok(())
        })();

        let last = it + 1 == cfg.iterations;
        if result.is_ok() {
            if let Some(hook) = eval {
                if last || (cfg.eval_every > 0 && it % cfg.eval_every == 0) {
                    rec.accuracy.extend(hook(&nets.bundle(&template))?);
                }
            }
        }
        if cfg.wall_clock {
            rec.wall_clock = Some(started.elapsed().as_secs_f64());
        }
        let failure = match result {
            Err(Error::Training { detail, .. }) => Some(detail),
            Err(Error::Domain { op, detail }) => Some(format!("{op}: {detail}")),
            Err(e) => return Err(e),
            Ok(()) => rec.non_finite().map(|k| format!("non-finite {k}")),
        };
        if let Some(reason) = failure {
            rec.flags.push(ABORT_FLAG.into());
            records.push(rec);
            aborted = Some(format!("iteration {it}: {reason}"));
            break;
        }
        records.push(rec);
    }

    Ok(TrainRun {
        model: nets.bundle(&template),
        records,
        aborted,
    })
}

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

/// Fraction of positions where `predicted == truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Contract("no labeled samples to evaluate".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Accuracy per domain present in `dataset`, which must be fully labeled.
pub fn evaluate(model: &ModelBundle, dataset: &DomainDataset) -> Result<BTreeMap<DomainTag, f64>> {
    if dataset.dim != model.input_dim {
        return Err(Error::Contract(format!(
            "dataset width {} vs model input {}",
            dataset.dim, model.input_dim
        )));
    }
    let mut out = BTreeMap::new();
    for domain in dataset.domains() {
        let part = dataset.filter_domain(domain);
        let truth = part
            .samples
            .iter()
            .map(|s| s.label)
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| Error::Contract(format!("{domain} sample without a label")))?;
        let predicted = model.predict(&part.feature_matrix())?;
        out.insert(domain, accuracy(&predicted, &truth)?);
    }
    Ok(out)
}

/// Eval hook reporting per-domain accuracy on a sealed dataset under keys
/// `acc_<domain>`.
pub fn sealed_accuracy_hook(sealed: &DomainDataset) -> impl Fn(&ModelBundle) -> Result<BTreeMap<String, f64>> + '_ {
    move |m: &ModelBundle| {
        Ok(evaluate(m, sealed)?
            .into_iter()
            .map(|(d, a)| (format!("acc_{d}"), a))
            .collect())
    }
}

/// Class-level discrepancy of f_di over full sets, with bridge and target
/// classes taken from the model's own confident predictions.
pub fn class_discrepancy(
    model: &ModelBundle,
    source: &LabeledView,
    bridge: &UnlabeledView,
    target: &UnlabeledView,
    threshold: f64,
) -> Result<f64> {
    let k = model.classes;
    let embed = |x: &[f64]| -> Result<Tensor> {
        let e = model.embed(x)?;
        Tensor::matrix(e.len() / model.branch, model.branch, e)
    };
    let pseudo = |x: &[f64]| -> Result<Vec<Option<usize>>> {
        let probs = softmax_rows(&model.logits(x)?, k);
        let pl = prototypes::pseudo_label(&probs, k, threshold)?;
        let mut v = vec![None; probs.len() / k];
        pl.indices.iter().zip(&pl.labels).for_each(|(&i, &l)| v[i] = Some(l));
        Ok(v)
    };
    let (fs, fb, ft) = (embed(&source.features)?, embed(&bridge.features)?, embed(&target.features)?);
    let kernel = KernelSpec::median_heuristic(&[fs.values(), fb.values(), ft.values()], model.branch)?;
    let ls: Vec<Option<usize>> = source.labels.iter().map(|&l| Some(l)).collect();
    let cd = losses::class_level_discrepancy(
        &class_sets(&fs, &ls, k)?,
        &class_sets(&ft, &pseudo(&target.features)?, k)?,
        &class_sets(&fb, &pseudo(&bridge.features)?, k)?,
        &kernel,
    )?;
    Ok(cd.value.item())
}

// ---------------------------------------------------------------------------
// CFGAN

fn default_gen_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_cycle_weight() -> f64 {
    10.0
}
fn default_cfgan_lr() -> f64 {
    1e-3
}
fn default_cfgan_iterations() -> usize {
    5000
}
fn default_cfgan_batch() -> usize {
    128
}
fn default_sw_every() -> usize {
    100
}
fn default_projections() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfganConfig {
    #[serde(default = "default_gen_hidden")]
    pub generator_hidden: Vec<usize>,
    #[serde(default = "default_gen_hidden")]
    pub discriminator_hidden: Vec<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_cycle_weight")]
    pub cycle_weight: f64,
    #[serde(default = "default_cfgan_lr")]
    pub lr: f64,
    #[serde(default = "default_cfgan_iterations")]
    pub iterations: usize,
    #[serde(default = "default_cfgan_batch")]
    pub batch_size: usize,
    #[serde(default = "default_sw_every")]
    pub sw_every: usize,
    #[serde(default = "default_projections")]
    pub sw_projections: usize,
    #[serde(default)]
    pub wall_clock: bool,
    pub seed: u64,
}

impl CfganConfig {
    pub fn new(seed: u64) -> Self {
        CfganConfig {
            generator_hidden: default_gen_hidden(),
            discriminator_hidden: default_gen_hidden(),
            lambda: default_lambda(),
            cycle_weight: default_cycle_weight(),
            lr: default_cfgan_lr(),
            iterations: default_cfgan_iterations(),
            batch_size: default_cfgan_batch(),
            sw_every: default_sw_every(),
            sw_projections: default_projections(),
            wall_clock: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and non-negative"));
        }
        if !(self.cycle_weight >= 0.0 && self.cycle_weight.is_finite()) {
            return Err(Error::config("cycle_weight", "must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.sw_projections == 0 {
            return Err(Error::config("sw_projections", "must be positive"));
        }
        Ok(())
    }
}

/// Generators are residual: `x + mlp(x)` with a zero-initialized last
/// layer, so a fresh generator is the identity map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfganModels {
    pub g_sb: Mlp,
    pub g_bt: Mlp,
    pub f_tb: Mlp,
    pub f_bs: Mlp,
    pub d_s: Mlp,
    pub d_b: Mlp,
    pub d_t: Mlp,
}

pub struct Residual(pub BoundMlp);

impl Translate for Residual {
    fn translate(&self, x: &Tensor) -> Result<Tensor> {
        x.add(&self.0.forward(x)?)
    }
}

impl CfganModels {
    pub fn init(dim: usize, cfg: &CfganConfig) -> Result<Self> {
        let gen = |index: u64| -> Result<Mlp> {
            let spec = MlpSpec::new(
                &widths(dim, &cfg.generator_hidden, dim),
                Activation::LeakyRelu(crate::nn::LEAKY_SLOPE),
                FinalActivation::Identity,
            );
            let mut m = Mlp::init(&spec, rng::subseed(cfg.seed, index))?;
            let last = m.params.len() - 2;
            m.params[last].value.iter_mut().for_each(|v| *v = 0.0);
            Ok(m)
        };
        let disc = |index: u64| {
            let spec = MlpSpec::new(
                &widths(dim, &cfg.discriminator_hidden, 1),
                Activation::LeakyRelu(crate::nn::LEAKY_SLOPE),
                FinalActivation::Sigmoid,
            );
            Mlp::init(&spec, rng::subseed(cfg.seed, index))
        };
        Ok(CfganModels {
            g_sb: gen(10)?,
            g_bt: gen(11)?,
            f_tb: gen(12)?,
            f_bs: gen(13)?,
            d_s: disc(14)?,
            d_b: disc(15)?,
            d_t: disc(16)?,
        })
    }

    /// `G_BT(G_SB(x))` on a row-major `n x d` matrix.
    pub fn translate_two_hop(&self, x: &[f64], dim: usize) -> Result<Vec<f64>> {
        let t = Tensor::matrix(x.len() / dim, dim, x.to_vec())?;
        let sb = Residual(self.g_sb.bind_frozen()).translate(&t)?;
        Ok(Residual(self.g_bt.bind_frozen()).translate(&sb)?.values().to_vec())
    }
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    // Integrate |F_a^{-1}(u) - F_b^{-1}(u)| over u in [0, 1].
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / n;
        let next_b = (j + 1) as f64 / m;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Unit directions for sliced distances, drawn from the projection stream.
pub fn projection_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::seeded(seed, rng::stream::PROJECTIONS);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Mean of 1-D Wasserstein-1 distances over the given projections.
pub fn sliced_wasserstein(a: &[f64], b: &[f64], dim: usize, directions: &[Vec<f64>]) -> f64 {
    let project = |x: &[f64], dir: &[f64]| -> Vec<f64> {
        x.chunks_exact(dim)
            .map(|row| row.iter().zip(dir).map(|(p, q)| p * q).sum())
            .collect()
    };
    let total: f64 = directions
        .iter()
        .map(|dir| wasserstein_1d(&project(a, dir), &project(b, dir)))
        .sum();
    total / directions.len() as f64
}

/// Full-set CFGAN diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfganEval {
    /// Mean of the four unweighted flow-cycle L1 terms.
    pub flow_cycle: f64,
    /// Sliced W1 between `G_BT(G_SB(S))` and `T`.
    pub sw_translated: f64,
    /// Sliced W1 between `S` and `T`.
    pub sw_untranslated: f64,
}

/// Point sets for CFGAN training, each row-major `n x dim`.
pub struct TranslationSets<'a> {
    pub source: &'a [f64],
    pub bridge: &'a [f64],
    pub target: &'a [f64],
    pub dim: usize,
}

pub fn evaluate_cfgan(models: &CfganModels, sets: &TranslationSets<'_>, directions: &[Vec<f64>]) -> Result<CfganEval> {
    let dim = sets.dim;
    let m = |x: &[f64]| Tensor::matrix(x.len() / dim, dim, x.to_vec());
    let (x, y, z) = (m(sets.source)?, m(sets.bridge)?, m(sets.target)?);
    let nets = Frozen::new(models);
    let obj = losses::cfgan_objective(
        &CfganBatch { source: &x, bridge: &y, target: &z },
        &nets.as_nets(),
        1.0,
        0.0,
    )?;
    let flow_cycle = obj.cycle_terms.iter().map(|t| t.item()).sum::<f64>() / 4.0;
    let translated = models.translate_two_hop(sets.source, dim)?;
    Ok(CfganEval {
        flow_cycle,
        sw_translated: sliced_wasserstein(&translated, sets.target, dim, directions),
        sw_untranslated: sliced_wasserstein(sets.source, sets.target, dim, directions),
    })
}

struct Frozen {
    g_sb: Residual,
    g_bt: Residual,
    f_tb: Residual,
    f_bs: Residual,
    d_s: BoundMlp,
    d_b: BoundMlp,
    d_t: BoundMlp,
}

impl Frozen {
    fn bind(m: &CfganModels, generators: bool, discriminators: bool) -> Self {
        let b = |net: &Mlp, train: bool| if train { net.bind() } else { net.bind_frozen() };
        Frozen {
            g_sb: Residual(b(&m.g_sb, generators)),
            g_bt: Residual(b(&m.g_bt, generators)),
            f_tb: Residual(b(&m.f_tb, generators)),
            f_bs: Residual(b(&m.f_bs, generators)),
            d_s: b(&m.d_s, discriminators),
            d_b: b(&m.d_b, discriminators),
            d_t: b(&m.d_t, discriminators),
        }
    }

    fn new(m: &CfganModels) -> Self {
        Frozen::bind(m, false, false)
    }

    fn as_nets(&self) -> CfganNets<'_> {
        CfganNets {
            g_sb: &self.g_sb,
            g_bt: &self.g_bt,
            f_tb: &self.f_tb,
            f_bs: &self.f_bs,
            d_s: &self.d_s,
            d_b: &self.d_b,
            d_t: &self.d_t,
        }
    }
}

/// Per-network gradients from the last CFGAN update, in
/// `[g_sb, g_bt, f_tb, f_bs, d_s, d_b, d_t]` order.
pub type CfganGrads = [Vec<Vec<f64>>; 7];

/// Alternating discriminator / generator updates on the CFGAN objective.
/// Every `sw_every` iterations (and at the last one) the record gains full-set
/// `flow_cycle`, `sw` and `sw_baseline` values.
pub fn train_cfgan(
    sets: &TranslationSets<'_>,
    cfg: &CfganConfig,
) -> Result<TrainRun<CfganModels>> {
    train_cfgan_observed(sets, cfg, &mut |_, _| {})
}

/// [`train_cfgan`] with a callback receiving the iteration and the
/// gradients just applied.
pub fn train_cfgan_observed(
    sets: &TranslationSets<'_>,
    cfg: &CfganConfig,
    observe: &mut dyn FnMut(usize, &CfganGrads),
) -> Result<TrainRun<CfganModels>> {
    cfg.validate()?;
    let dim = sets.dim;
    if dim == 0 {
        return Err(Error::Validation("zero feature width".into()));
    }
    let rows = |x: &[f64]| x.len() / dim;
    for (name, x) in [("source", sets.source), ("bridge", sets.bridge), ("target", sets.target)] {
        if x.is_empty() || x.len() % dim != 0 {
            return Err(Error::Validation(format!("{name} set is empty or ragged")));
        }
    }
    let mut models = CfganModels::init(dim, cfg)?;
    let opt = |m: &Mlp| crate::nn::AdamState::with_betas(&m.params, cfg.lr, 0.5, 0.999, 1e-8);
    let mut opts = [
        opt(&models.g_sb),
        opt(&models.g_bt),
        opt(&models.f_tb),
        opt(&models.f_bs),
        opt(&models.d_s),
        opt(&models.d_b),
        opt(&models.d_t),
    ];
    let directions = projection_directions(dim, cfg.sw_projections, cfg.seed);
    let mut samplers = [
        Sampler::new(rows(sets.source), cfg.seed, rng::stream::SOURCE_BATCHES),
        Sampler::new(rows(sets.bridge), cfg.seed, rng::stream::BRIDGE_BATCHES),
        Sampler::new(rows(sets.target), cfg.seed, rng::stream::TARGET_BATCHES),
    ];
    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut aborted = None;

    for it in 0..cfg.iterations {
        let mut rec = MetricRecord::new(it);
        let result = (|| -> Result<()> {
            let mut draw = |k: usize, x: &[f64]| {
                let idx = samplers[k].next(cfg.batch_size.min(rows(x)));
                gather(x, dim, &idx)
            };
            let (x, y, z) = (draw(0, sets.source)?, draw(1, sets.bridge)?, draw(2, sets.target)?);
            let batch = CfganBatch { source: &x, bridge: &y, target: &z };

            let nets = Frozen::bind(&models, false, true);
            let obj = losses::cfgan_objective(&batch, &nets.as_nets(), cfg.lambda, cfg.cycle_weight)?;
            obj.d_loss.backward()?;
            rec.losses.insert("gan_d".into(), obj.d_loss.item());
            let d_grads = [nets.d_s.grads(), nets.d_b.grads(), nets.d_t.grads()];
            opts[4].step(&mut models.d_s.params, &d_grads[0])?;
            opts[5].step(&mut models.d_b.params, &d_grads[1])?;
            opts[6].step(&mut models.d_t.params, &d_grads[2])?;

            let nets = Frozen::bind(&models, true, false);
            let obj = losses::cfgan_objective(&batch, &nets.as_nets(), cfg.lambda, cfg.cycle_weight)?;
            obj.g_loss.backward()?;
            rec.losses.insert("gan_g".into(), obj.g_loss.item());
            rec.losses.insert("cycle".into(), obj.cycle.item());
            if obj.clamped > 0 {
                rec.flags.push("gan_clamped".into());
            }
            let g_grads = [nets.g_sb.0.grads(), nets.g_bt.0.grads(), nets.f_tb.0.grads(), nets.f_bs.0.grads()];
            opts[0].step(&mut models.g_sb.params, &g_grads[0])?;
            opts[1].step(&mut models.g_bt.params, &g_grads[1])?;
            opts[2].step(&mut models.f_tb.params, &g_grads[2])?;
            opts[3].step(&mut models.f_bs.params, &g_grads[3])?;
            let [g0, g1, g2, g3] = g_grads;
            let [d0, d1, d2] = d_grads;
            observe(it, &[g0, g1, g2, g3, d0, d1, d2]);

            if (cfg.sw_every > 0 && it % cfg.sw_every == 0) || it + 1 == cfg.iterations {
                let e = evaluate_cfgan(&models, sets, &directions)?;
                rec.losses.insert("flow_cycle".into(), e.flow_cycle);
                rec.losses.insert("sw".into(), e.sw_translated);
                rec.losses.insert("sw_baseline".into(), e.sw_untranslated);
            }
            Ok(())
        })();
        if cfg.wall_clock {
            rec.wall_clock = Some(started.elapsed().as_secs_f64());
        }
        let failure = match result {
            Err(Error::Training { detail, .. }) => Some(detail),
            Err(Error::Domain { op, detail }) => Some(format!("{op}: {detail}")),
            Err(e) => return Err(e),
            Ok(()) => rec.non_finite().map(|k| format!("non-finite {k}")),
        };
        if let Some(reason) = failure {
            rec.flags.push(ABORT_FLAG.into());
            records.push(rec);
            aborted = Some(format!("iteration {it}: {reason}"));
            break;
        }
        records.push(rec);
    }
    Ok(TrainRun {
        model: models,
        records,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DomainSample;

    fn separable(n: usize) -> LabeledView {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = i % 2;
            let sign = if l == 0 { -1.0 } else { 1.0 };
            features.push(sign * (1.0 + (i as f64 * 0.37).sin().abs()));
            features.push((i as f64 * 1.3).cos());
            labels.push(l);
        }
        LabeledView { dim: 2, features, labels }
    }

    #[test]
    fn accuracy_fixture() {
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn wasserstein_matches_hand_values() {
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert!((wasserstein_1d(&[0.0, 1.0], &[2.0, 3.0]) - 2.0).abs() < 1e-15);
        // Unequal sizes: {0} vs {0, 2} -> half the mass moves by 2.
        assert!((wasserstein_1d(&[0.0], &[0.0, 2.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn source_only_learns_separable_data() {
        let data = separable(200);
        let mut cfg = PadaConfig::new(3);
        cfg.iterations = 500;
        cfg.lr = 1e-2;
        let run = train_source_only(&data, &cfg, None).unwrap();
        let pred = run.model.predict(&data.features).unwrap();
        assert!(accuracy(&pred, &data.labels).unwrap() >= 0.99);
    }

    #[test]
    fn zero_iterations_returns_initial_model() {
        let data = separable(40);
        let mut cfg = PadaConfig::new(1);
        cfg.iterations = 0;
        let run = train_source_only(&data, &cfg, None).unwrap();
        assert!(run.records.is_empty());
        assert_eq!(run.model, ModelBundle::init(2, 2, &cfg).unwrap());
    }

    #[test]
    fn zero_weights_reduce_to_source_only() {
        let data = separable(64);
        let unl = UnlabeledView { dim: 2, features: data.features.clone() };
        let mut cfg = PadaConfig::new(5);
        cfg.iterations = 30;
        let base = train_source_only(&data, &cfg, None).unwrap();
        cfg.weights = LossWeights::ZERO;
        let pada = train_pada(&data, &unl, &unl, &cfg, None).unwrap();
        assert_eq!(base.records, pada.records);
        assert_eq!(base.model, pada.model);
    }

    #[test]
    fn pada_with_all_steps_runs() {
        let data = separable(64);
        let unl = UnlabeledView { dim: 2, features: data.features.iter().map(|v| v + 0.1).collect() };
        let mut cfg = PadaConfig::new(2);
        cfg.iterations = 20;
        cfg.pseudo_label_threshold = 0.6;
        let run = train_pada(&data, &unl, &unl, &cfg, None).unwrap();
        assert!(run.aborted.is_none());
        let keys: Vec<&str> = run.records[19].losses.keys().map(|s| s.as_str()).collect();
        for k in ["ce", "di", "ent", "mi", "rec"] {
            assert!(keys.contains(&k), "{keys:?}");
        }
    }

    #[test]
    fn evaluate_requires_labels() {
        let cfg = PadaConfig::new(0);
        let m = ModelBundle::init(2, 2, &cfg).unwrap();
        let ds = DomainDataset::new(
            2,
            vec![DomainSample { features: vec![0.0, 0.0], label: None, domain: DomainTag::Target }],
        )
        .unwrap();
        assert!(matches!(evaluate(&m, &ds), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_generators_start_cycle_free() {
        let pts: Vec<f64> = (0..128).map(|i| (i as f64 * 0.77).sin()).collect();
        let sets = TranslationSets { source: &pts, bridge: &pts, target: &pts, dim: 2 };
        let cfg = CfganConfig::new(0);
        let m = CfganModels::init(2, &cfg).unwrap();
        let e = evaluate_cfgan(&m, &sets, &projection_directions(2, 8, 0)).unwrap();
        assert_eq!(e.flow_cycle, 0.0);
        assert_eq!(e.sw_translated, 0.0);
    }
}
