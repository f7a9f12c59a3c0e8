//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Run alone with `cargo test --release --test acceptance`.

use std::fs;
use std::time::{Duration, Instant};

use bridgeda::dataset::{read_dataset, write_dataset, DomainTag};
use bridgeda::divergence::*;
use bridgeda::gradcheck::grad_check;
use bridgeda::losses::*;
use bridgeda::nn::{Activation, BoundMlp, FinalActivation, Mlp, MlpSpec};
use bridgeda::pipelines::*;
use bridgeda::prototypes::*;
use bridgeda::rng;
use bridgeda::synthdata::*;
use bridgeda::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn m(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, v).unwrap()
}

fn uniform(r: &mut rng::Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn smooth_net(widths: &[usize], last: FinalActivation, seed: u64) -> BoundMlp {
    Mlp::init(&MlpSpec::new(widths, Activation::Tanh, last), seed).unwrap().bind_frozen()
}

// ---------------------------------------------------------------- 1

const POINTS: usize = 20;
const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// Worst relative error of one loss over `POINTS` random interior points.
fn worst(sample: impl Fn(&mut rng::Rng, u64) -> (Tensor, Box<dyn Fn(&Tensor) -> bridgeda::Result<Tensor>>)) -> f64 {
    let mut r = rng::seeded(101, rng::stream::DATA);
    (0..POINTS as u64)
        .map(|i| {
            let (point, f) = sample(&mut r, i);
            grad_check(f, &point, EPS).unwrap()
        })
        .fold(0.0, f64::max)
}

fn gradient_suite() -> Outcome {
    let mut errors: Vec<(&str, f64)> = Vec::new();
    errors.push(("cross_entropy", worst(|r, _| (m(4, 3, uniform(r, 12, -3.0, 3.0)), Box::new(|x| cross_entropy(x, &[0, 2, 1, 2]))))));
    errors.push(("domain_identifier", worst(|r, _| {
        let labels = [DomainLabel::ZERO, DomainLabel::ONE, DomainLabel::ONE, DomainLabel::ZERO, DomainLabel::ONE];
        (m(5, 1, uniform(r, 5, 0.05, 0.95)), Box::new(move |x| Ok(domain_identifier_loss(x, &labels)?.value)))
    })));
    errors.push(("entropy_confusion", worst(|r, _| (m(4, 3, uniform(r, 12, 0.1, 1.0)), Box::new(|x| entropy_confusion_loss(&x.softmax(1)?))))));
    errors.push(("entropy_from_logits", worst(|r, _| (m(3, 4, uniform(r, 12, -3.0, 3.0)), Box::new(entropy_confusion_from_logits)))));
    errors.push(("mmd", worst(|r, _| {
        let y = m(4, 2, uniform(r, 8, -2.0, 2.0));
        let k = KernelSpec::rbf(&[0.5, 1.0, 2.0]).unwrap();
        (m(5, 2, uniform(r, 10, -2.0, 2.0)), Box::new(move |x| mmd_squared(x, &y, &k)))
    })));
    errors.push(("class_discrepancy", worst(|r, _| {
        let w = uniform(r, 16, -2.0, 2.0);
        let k = KernelSpec::rbf(&[1.0]).unwrap();
        let set = move |a: usize, rows: usize| Some(m(rows, 2, w[a..a + 2 * rows].to_vec()));
        (m(3, 2, uniform(r, 6, -2.0, 2.0)), Box::new(move |x| {
            let source = [Some(x.clone()), set(0, 2)];
            let target = [set(4, 2), set(8, 1)];
            let bridge = [set(10, 2), None];
            Ok(class_level_discrepancy(&source, &target, &bridge, &k)?.value)
        }))
    })));
    errors.push(("mine", worst(|r, i| {
        let t = smooth_net(&[3, 6, 1], FinalActivation::Identity, i);
        let q = m(4, 2, uniform(r, 8, -2.0, 2.0));
        let qm = q.select_rows(&[2, 0, 3, 1]).unwrap();
        (m(4, 1, uniform(r, 4, -2.0, 2.0)), Box::new(move |p| Ok(mine_estimate(p, &q, &qm, &t)?.value)))
    })));
    errors.push(("reconstruction", worst(|r, i| {
        let net = smooth_net(&[4, 5, 5], FinalActivation::Identity, i);
        let f_ci = m(3, 2, uniform(r, 6, -2.0, 2.0));
        let original = m(3, 5, uniform(r, 15, -2.0, 2.0));
        (m(3, 2, uniform(r, 6, -2.0, 2.0)), Box::new(move |f_di| reconstruction_loss(f_di, &f_ci, &original, &net)))
    })));
    errors.push(("discriminator", worst(|r, _| {
        let fake = m(5, 1, uniform(r, 5, 0.05, 0.95));
        (m(5, 1, uniform(r, 5, 0.05, 0.95)), Box::new(move |x| Ok(discriminator_loss(x, &fake)?.value)))
    })));
    errors.push(("generator", worst(|r, _| (m(5, 1, uniform(r, 5, 0.05, 0.95)), Box::new(|x| Ok(generator_loss(x)?.value))))));
    errors.push(("gan_pair", worst(|r, _| {
        let real = m(5, 1, uniform(r, 5, 0.05, 0.95));
        (m(5, 1, uniform(r, 5, 0.05, 0.95)), Box::new(move |x| {
            let p = gan_pair_losses(&real, x)?;
            p.d_loss.add(&p.g_loss)
        }))
    })));
    errors.push(("cycle", worst(|r, _| {
        let v = uniform(r, 8, -2.0, 2.0);
        // Residuals kept away from the L1 kink.
        let recon: Vec<f64> = v
            .iter()
            .map(|a| a + r.random_range(0.05..1.0) * if r.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let x = m(4, 2, v);
        (m(4, 2, recon), Box::new(move |rc| cycle_consistency(&x, rc)))
    })));
    errors.push(("cfgan_objective", worst(|r, i| {
        let g = |k| smooth_net(&[2, 4, 2], FinalActivation::Identity, i * 10 + k);
        let d = |k| smooth_net(&[2, 4, 1], FinalActivation::Sigmoid, i * 10 + k);
        let nets = [g(0), g(1), g(2), g(3), d(4), d(5), d(6)];
        let (y, z) = (m(3, 2, uniform(r, 6, -1.5, 1.5)), m(3, 2, uniform(r, 6, -1.5, 1.5)));
        (m(3, 2, uniform(r, 6, -1.5, 1.5)), Box::new(move |x| {
            let n = CfganNets { g_sb: &nets[0], g_bt: &nets[1], f_tb: &nets[2], f_bs: &nets[3], d_s: &nets[4], d_b: &nets[5], d_t: &nets[6] };
            let o = cfgan_objective(&CfganBatch { source: x, bridge: &y, target: &z }, &n, 0.7, 0.0)?;
            o.d_loss.add(&o.g_loss)
        }))
    })));
    let (name, err) = errors.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let msg = format!("{} losses x {POINTS} points, worst {err:.2e} ({name})", errors.len());
    if err < GRAD_TOL { Ok(msg) } else { Err(msg) }
}

// ---------------------------------------------------------------- 2

fn kernel_oracle(a: &[f64], b: &[f64], dim: usize, bandwidths: &[f64]) -> f64 {
    let mut total = 0.0;
    for x in a.chunks(dim) {
        for y in b.chunks(dim) {
            let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
            total += bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>();
        }
    }
    total / (a.len() / dim * (b.len() / dim)) as f64
}

fn mmd_oracle() -> Outcome {
    let mut r = rng::seeded(202, rng::stream::DATA);
    let bandwidths = [0.5, 1.5];
    let k = KernelSpec::rbf(&bandwidths).unwrap();
    let (mut worst, mut worst_same) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let (n, mm, dim) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=3));
        let a = uniform(&mut r, n * dim, -2.0, 2.0);
        let b = uniform(&mut r, mm * dim, -2.0, 2.0);
        let (x, y) = (m(n, dim, a.clone()), m(mm, dim, b.clone()));
        let got = mmd_squared(&x, &y, &k).unwrap().item();
        let want = kernel_oracle(&a, &a, dim, &bandwidths) + kernel_oracle(&b, &b, dim, &bandwidths)
            - 2.0 * kernel_oracle(&a, &b, dim, &bandwidths);
        worst = worst.max((got - want).abs());
        if got != mmd_squared(&y, &x, &k).unwrap().item() {
            return Err(format!("asymmetric: {got} vs reversed"));
        }
        let rev: Vec<usize> = (0..n).rev().collect();
        worst_same = worst_same.max(mmd_squared(&x, &x.select_rows(&rev).unwrap(), &k).unwrap().item().abs());
    }
    let msg = format!("10 instances, oracle gap {worst:.1e}, identical multiset {worst_same:.1e}, symmetric");
    if worst <= 1e-10 && worst_same < 1e-12 { Ok(msg) } else { Err(msg) }
}

// ---------------------------------------------------------------- 3

fn mine_oracle() -> Outcome {
    let n = 10_000;
    let mut parts = Vec::new();
    let mut ok = true;
    for rho in [0.0f64, 0.5, 0.9] {
        let start = Instant::now();
        let mut r = rng::seeded(11, rng::stream::DATA);
        let (mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            x.push(a);
            y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        let settings = MineSettings::new(3);
        let run = estimate_mutual_information(&m(n, 1, x), &m(n, 1, y), &settings).map_err(|e| e.to_string())?;
        let truth = -0.5 * (1.0 - rho * rho).ln() + 0.0;
        let elapsed = start.elapsed();
        ok &= (run.estimate - truth).abs() <= 0.1 && elapsed < Duration::from_secs(120);
        parts.push(format!("rho {rho}: {:.3} vs {truth:.3} ({:.0}s)", run.estimate, elapsed.as_secs_f64()));
    }
    let msg = parts.join(", ");
    if ok { Ok(msg) } else { Err(msg) }
}

// ---------------------------------------------------------------- 4

fn a_distance_and_bridge() -> Outcome {
    if a_distance_from_error(0.5) != 0.0 || a_distance_from_error(0.0) != 2.0 {
        return Err("A-distance identities".into());
    }
    let mut hits = [0; 2];
    for seed in 0..5 {
        let t = gen_domain_triple(&TripleSpec::rotation(100.0, 500, seed)).unwrap();
        let f = |d: &bridgeda::dataset::DomainDataset| d.features_tensor().unwrap();
        let v = validate_bridge(&f(&t.source), &f(&t.bridge), &f(&t.target), BridgeMetric::ADistance, seed)
            .map_err(|e| e.to_string())?;
        hits[0] += v.holds_under(BridgeMetric::ADistance) as usize;
        hits[1] += v.holds_under(BridgeMetric::Mmd2) as usize;
    }
    let msg = format!("identities exact; bridge verdict A-distance {}/5, MMD {}/5", hits[0], hits[1]);
    if hits.iter().all(|&h| h >= 4) { Ok(msg) } else { Err(msg) }
}

// ---------------------------------------------------------------- 5

fn prototype_suite() -> Outcome {
    let mut r = rng::seeded(505, rng::stream::DATA);
    let (n, width, classes) = (40, 3, 4);
    let emb = uniform(&mut r, n * width, -3.0, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let p = compute_prototypes(&emb, width, &labels, classes, DomainTag::Source).map_err(|e| e.to_string())?;
    for k in 0..classes {
        let rows: Vec<&[f64]> = emb.chunks(width).zip(&labels).filter(|(_, &l)| l == k).map(|(x, _)| x).collect();
        for j in 0..width {
            let mut s = 0.0;
            for row in &rows {
                s += row[j];
            }
            let mean = s / rows.len() as f64;
            if p.row(k)[j] != mean {
                return Err(format!("class {k} coordinate {j}: {} vs {mean}", p.row(k)[j]));
            }
        }
    }
    let fixture = compute_prototypes(&[0.0, 1.0], 1, &[0, 1], 2, DomainTag::Source).unwrap();
    let mut gap = 0.0f64;
    for q in [-1.5, 0.0, 0.3, 0.5, 1.0, 2.75] {
        let got = proto_classify(&[q], &fixture).unwrap();
        let (a, b) = ((-(q * q) as f64).exp(), (-((q - 1.0) * (q - 1.0)) as f64).exp());
        gap = gap.max((got[0] - a / (a + b)).abs()).max((got[1] - b / (a + b)).abs());
    }
    let msg = format!("means exact over {classes} classes; 1-D fixture gap {gap:.1e}");
    if gap <= 1e-12 { Ok(msg) } else { Err(msg) }
}

// ---------------------------------------------------------------- 6

fn pada_reduction_and_delta() -> Outcome {
    let start = Instant::now();
    let t = gen_domain_triple(&TripleSpec::rotation(100.0, 600, 0)).unwrap();
    let src = t.source.labeled().unwrap();
    let mut cfg = PadaConfig::new(0);
    cfg.iterations = 300;
    cfg.weights = LossWeights::ZERO;
    let base = train_source_only(&src, &cfg, None).map_err(|e| e.to_string())?;
    let pada = train_pada(&src, &t.bridge.unlabeled(), &t.target.unlabeled(), &cfg, None).map_err(|e| e.to_string())?;
    let identical = serde_json::to_string(&base.records).unwrap() == serde_json::to_string(&pada.records).unwrap();
    if !identical {
        return Err("zero-weight PADA stream differs from source-only".into());
    }

    let (mut so, mut pa) = (0.0, 0.0);
    for seed in 0..5 {
        let t = gen_domain_triple(&TripleSpec::rotation(100.0, 600, seed)).unwrap();
        let src = t.source.labeled().unwrap();
        let mut cfg = PadaConfig::new(seed);
        cfg.iterations = 1500;
        cfg.lr = 3e-3;
        let base = train_source_only(&src, &cfg, None).map_err(|e| e.to_string())?;
        let run = train_pada(&src, &t.bridge.unlabeled(), &t.target.unlabeled(), &cfg, None).map_err(|e| e.to_string())?;
        so += evaluate(&base.model, &t.sealed).unwrap()[&DomainTag::Target];
        pa += evaluate(&run.model, &t.sealed).unwrap()[&DomainTag::Target];
    }
    let delta = 100.0 * (pa - so) / 5.0;
    let elapsed = start.elapsed();
    let msg = format!(
        "zero-weight stream bit-identical; target accuracy source-only {:.3}, PADA {:.3}, delta {delta:+.1} points ({:.0}s)",
        so / 5.0,
        pa / 5.0,
        elapsed.as_secs_f64()
    );
    if delta >= 10.0 && elapsed < Duration::from_secs(600) { Ok(msg) } else { Err(msg) }
}

// ---------------------------------------------------------------- 7

fn cfgan_rings() -> Outcome {
    let start = Instant::now();
    let task = gen_translation_task(&TranslationTaskSpec::rings(512, 0)).unwrap();
    let sets = TranslationSets { source: &task.source, bridge: &task.bridge, target: &task.target, dim: 2 };
    let cfg = CfganConfig::new(0);
    let run = train_cfgan(&sets, &cfg).map_err(|e| e.to_string())?;
    if let Some(a) = &run.aborted {
        return Err(format!("aborted: {a:?}"));
    }
    let e = evaluate_cfgan(&run.model, &sets, &projection_directions(2, cfg.sw_projections, cfg.seed)).unwrap();

    let mut zero = cfg.clone();
    zero.lambda = 0.0;
    zero.iterations = 50;
    let mut second_hop = 0.0f64;
    let zrun = train_cfgan_observed(&sets, &zero, &mut |_, grads| {
        // [g_sb, g_bt, f_tb, f_bs, d_s, d_b, d_t]
        for i in [1, 4, 6] {
            for v in grads[i].iter().flatten() {
                second_hop = second_hop.max(v.abs());
            }
        }
    })
    .map_err(|e| e.to_string())?;
    let fresh = CfganModels::init(2, &zero).unwrap();
    let untouched = second_hop == 0.0 && zrun.model.g_bt == fresh.g_bt && zrun.model.d_t == fresh.d_t;
    let elapsed = start.elapsed();
    let msg = format!(
        "{} iterations: flow-cycle {:.4}, SW {:.4} vs untranslated {:.4}; lambda=0 second-hop max |grad| {second_hop} ({:.0}s)",
        cfg.iterations,
        e.flow_cycle,
        e.sw_translated,
        e.sw_untranslated,
        elapsed.as_secs_f64()
    );
    let ok = e.flow_cycle < 0.05 && e.sw_translated < e.sw_untranslated / 4.0 && untouched && elapsed < Duration::from_secs(300);
    if ok { Ok(msg) } else { Err(msg) }
}

// ---------------------------------------------------------------- 8

fn determinism_and_io() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    let cfg = serde_json::json!({
        "data": { "triple": TripleSpec::rotation(100.0, 120, 8) },
        "train": { "seed": 8, "iterations": 60, "eval_every": 20 },
    });
    fs::write(&config, cfg.to_string()).unwrap();
    let outs = [dir.path().join("a"), dir.path().join("b")];
    for out in &outs {
        let args = ["bridgeda", "train", "pada", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        let code = bridgeda::cli::run(args, &mut Vec::new(), &mut Vec::new());
        if code != 0 {
            return Err(format!("train exited {code}"));
        }
    }
    let files = ["metrics.jsonl", "curves.svg", "scatter.svg", "distances.svg"];
    for name in files {
        if fs::read(outs[0].join(name)).unwrap() != fs::read(outs[1].join(name)).unwrap() {
            return Err(format!("{name} differs between runs"));
        }
    }
    let t = gen_domain_triple(&TripleSpec::rotation(37.0, 90, 8)).unwrap();
    for (name, d) in [("source", &t.source), ("bridge", &t.bridge), ("target", &t.target), ("sealed", &t.sealed)] {
        let path = dir.path().join(format!("{name}.csv"));
        write_dataset(&path, d).unwrap();
        if &read_dataset(&path).unwrap() != d {
            return Err(format!("{name} dataset did not round-trip"));
        }
    }
    Ok(format!("{} artifacts byte-identical across runs; 4 datasets round-trip exactly", files.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("MMD oracle", mmd_oracle),
        ("MINE analytic oracle", mine_oracle),
        ("A-distance identities and bridge ordering", a_distance_and_bridge),
        ("prototype suite", prototype_suite),
        ("PADA reduction and delta", pada_reduction_and_delta),
        ("CFGAN rings", cfgan_rings),
        ("determinism and I/O", determinism_and_io),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
