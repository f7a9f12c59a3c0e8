//! Command-line front end. Exit codes: 0 success, 1 usage error,
//! 2 validation error, 3 runtime or numeric error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::dataset::{read_dataset, write_dataset, DomainDataset, DomainSample, DomainTag};
use crate::divergence::{proxy_a_distance, validate_bridge, BridgeMetric, DEFAULT_FOLDS};
use crate::error::{Error, Result};
use crate::pipelines::{
    evaluate, evaluate_cfgan, projection_directions, sealed_accuracy_hook, train_cfgan, train_pada, train_source_only,
    MetricRecord, ModelBundle, TrainRun, TranslationSets,
};
use crate::plot::{curves_svg, distance_bars_svg, scatter_svg, DistanceInput};
use crate::report::{read_metrics_log, resolve_out_dir, write_metrics_log, DataSection, RunConfigFile, SavedModel};
use crate::synthdata::{gen_domain_triple, gen_translation_task};

#[derive(Parser, Debug)]
#[command(name = "bridgeda", version, about = "Bridge-domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate datasets from a data spec (`{"triple": ...}` or `{"translation": ...}`).
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distance between two datasets, or the bridge check over three.
    Measure {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        c: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a distance bar chart.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Train a model from a run config.
    Train {
        #[arg(value_enum)]
        trainer: TrainerArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained model directory on a dataset file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Render an SVG from a metrics log, dataset or distance report.
    Plot {
        /// Input file: metrics log, dataset CSV or distance JSON, by kind.
        #[arg(long, alias = "input")]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PlotKind::Curves)]
        kind: PlotKind,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Adist,
    Mmd,
}

impl From<MetricArg> for BridgeMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Adist => BridgeMetric::ADistance,
            MetricArg::Mmd => BridgeMetric::Mmd2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TrainerArg {
    SourceOnly,
    Pada,
    Cfgan,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlotKind {
    Curves,
    Scatter2d,
    DistanceBars,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                1
            } else {
                let _ = write!(stdout, "{text}");
                0
            };
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenData { spec, out: dir } => gen_data(&spec, dir.as_deref(), out),
        Command::Measure { a, b, c, metric, seed, plot } => measure(&a, &b, c.as_deref(), metric.into(), seed, plot.as_deref(), out),
        Command::Train { trainer, config, out: dir } => train(trainer, &config, dir.as_deref(), out),
        Command::Eval { model, data } => eval(&model, &data, out),
        Command::Plot { log, out: path, kind } => plot(&log, &path, kind).map(|_| 0),
    }
}

fn emit(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct Loaded {
    source: DomainDataset,
    bridge: DomainDataset,
    target: DomainDataset,
    sealed: Option<DomainDataset>,
}

fn load_data(data: &DataSection) -> Result<Loaded> {
    match data {
        DataSection::Triple(spec) => {
            let t = gen_domain_triple(spec)?;
            Ok(Loaded {
                source: t.source,
                bridge: t.bridge,
                target: t.target,
                sealed: Some(t.sealed),
            })
        }
        DataSection::Translation(spec) => {
            let [source, bridge, target] = gen_translation_task(spec)?.to_datasets();
            Ok(Loaded { source, bridge, target, sealed: None })
        }
        DataSection::Files(f) => {
            let sealed = f.sealed.as_deref().map(read_dataset).transpose()?;
            Ok(Loaded {
                source: read_dataset(&f.source)?,
                bridge: read_dataset(&f.bridge)?,
                target: read_dataset(&f.target)?,
                sealed,
            })
        }
    }
}

fn gen_data(spec: &Path, dir: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let text = fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    let data: DataSection = serde_json::from_str(&text)?;
    if matches!(data, DataSection::Files(_)) {
        return Err(Error::Validation("gen-data needs a `triple` or `translation` spec".into()));
    }
    let loaded = load_data(&data)?;
    let dir = resolve_out_dir(dir, None);
    create_dir(&dir)?;
    let mut written = Vec::new();
    let mut save = |name: &str, d: &DomainDataset| -> Result<()> {
        let path = dir.join(name);
        write_dataset(&path, d)?;
        written.push(path.display().to_string());
        Ok(())
    };
    save("source.csv", &loaded.source)?;
    save("bridge.csv", &loaded.bridge)?;
    save("target.csv", &loaded.target)?;
    if let Some(s) = &loaded.sealed {
        save("sealed.csv", s)?;
    }
    emit(out, &json!({ "written": written }))?;
    Ok(0)
}

/// The domain a file's rows claim, defaulting when the file mixes domains.
fn file_domain(d: &DomainDataset, fallback: DomainTag) -> DomainTag {
    match d.domains().as_slice() {
        [one] => *one,
        _ => fallback,
    }
}

fn measure(
    a: &Path,
    b: &Path,
    c: Option<&Path>,
    metric: BridgeMetric,
    seed: u64,
    plot: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let (da, db) = (read_dataset(a)?, read_dataset(b)?);
    let (ta, tb) = (da.features_tensor()?, db.features_tensor()?);
    let (value, reports) = match c {
        None => {
            let pair = (file_domain(&da, DomainTag::Source), file_domain(&db, DomainTag::Target));
            let r = proxy_a_distance(&ta, &tb, pair, DEFAULT_FOLDS, seed)?;
            (json!({ "metric": metric, "value": r.value(metric), "report": r }), vec![r])
        }
        Some(c) => {
            let tc = read_dataset(c)?.features_tensor()?;
            let v = validate_bridge(&ta, &tb, &tc, metric, seed)?;
            let reports = v.reports().into_iter().cloned().collect();
            (serde_json::to_value(&v)?, reports)
        }
    };
    if let Some(path) = plot {
        write_text(path, &distance_bars_svg(&reports)?)?;
    }
    emit(out, &value)?;
    Ok(0)
}

fn features_of(d: &DomainDataset) -> Vec<f64> {
    d.feature_matrix()
}

/// Embeds every domain through `model` and stacks the rows for a scatter.
fn embedding_dataset(model: &ModelBundle, parts: &[&DomainDataset]) -> Result<DomainDataset> {
    let mut samples = Vec::new();
    for d in parts {
        let emb = model.embed(&features_of(d))?;
        let width = model.branch;
        for (s, row) in d.samples.iter().zip(emb.chunks_exact(width)) {
            samples.push(DomainSample {
                features: row.to_vec(),
                label: s.label,
                domain: s.domain,
            });
        }
    }
    DomainDataset::new(model.branch, samples)
}

fn stack(parts: &[&DomainDataset]) -> Result<DomainDataset> {
    let dim = parts[0].dim;
    DomainDataset::new(dim, parts.iter().flat_map(|d| d.samples.iter().cloned()).collect())
}

fn train(trainer: TrainerArg, config: &Path, dir: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfigFile::load(config)?;
    let data = load_data(&cfg.data)?;
    let dir = resolve_out_dir(dir, cfg.report.out_dir.as_deref());
    create_dir(&dir)?;
    write_text(&dir.join("config.json"), &cfg.to_json())?;

    let (records, aborted, summary) = if trainer == TrainerArg::Cfgan {
        let c = cfg.cfgan_config();
        let (s, b, t) = (features_of(&data.source), features_of(&data.bridge), features_of(&data.target));
        let dim = data.source.dim;
        let sets = TranslationSets { source: &s, bridge: &b, target: &t, dim };
        let run = train_cfgan(&sets, &c)?;
        let directions = projection_directions(dim, c.sw_projections, c.seed);
        let e = evaluate_cfgan(&run.model, &sets, &directions)?;
        SavedModel::Cfgan(run.model.clone()).save(&dir.join("model.json"))?;
        if cfg.report.scatter && dim >= 2 {
            let moved = run.model.translate_two_hop(&s, dim)?;
            let translated = DomainDataset::new(
                dim,
                moved
                    .chunks_exact(dim)
                    .map(|r| DomainSample { features: r.to_vec(), label: None, domain: DomainTag::Source })
                    .collect(),
            )?;
            write_text(&dir.join("scatter.svg"), &scatter_svg(&stack(&[&translated, &data.bridge, &data.target])?)?)?;
        }
        (run.records, run.aborted, serde_json::to_value(&e)?)
    } else {
        let c = cfg.pada_config();
        let src = data.source.labeled()?;
        let hook = data.sealed.as_ref().map(sealed_accuracy_hook);
        let hook_ref = hook.as_ref().map(|h| h as &dyn Fn(&ModelBundle) -> Result<_>);
        let run: TrainRun<ModelBundle> = if trainer == TrainerArg::Pada {
            train_pada(&src, &data.bridge.unlabeled(), &data.target.unlabeled(), &c, hook_ref)?
        } else {
            train_source_only(&src, &c, hook_ref)?
        };
        let mut acc = evaluate(&run.model, &data.source)?;
        if let Some(sealed) = &data.sealed {
            acc.extend(evaluate(&run.model, sealed)?);
        }
        let saved = if trainer == TrainerArg::Pada {
            SavedModel::Pada(run.model.clone())
        } else {
            SavedModel::SourceOnly(run.model.clone())
        };
        saved.save(&dir.join("model.json"))?;
        if cfg.report.scatter {
            let emb = embedding_dataset(&run.model, &[&data.source, &data.bridge, &data.target])?;
            write_text(&dir.join("scatter.svg"), &scatter_svg(&emb)?)?;
        }
        (run.records, run.aborted, json!({ "accuracy": acc }))
    };

    write_metrics_log(&dir.join("metrics.jsonl"), &records)?;
    if cfg.report.curves && !records.is_empty() {
        write_text(&dir.join("curves.svg"), &curves_svg(&records)?)?;
    }
    if cfg.report.distances {
        let v = validate_bridge(
            &data.source.features_tensor()?,
            &data.bridge.features_tensor()?,
            &data.target.features_tensor()?,
            BridgeMetric::ADistance,
            cfg.train.seed,
        )?;
        write_text(&dir.join("distances.json"), &serde_json::to_string_pretty(&v)?)?;
        let reports: Vec<_> = v.reports().into_iter().cloned().collect();
        write_text(&dir.join("distances.svg"), &distance_bars_svg(&reports)?)?;
    }
    let summary = json!({ "out_dir": dir.display().to_string(), "iterations": records.len(), "aborted": aborted, "final": summary });
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    emit(out, &summary)?;
    Ok(if aborted.is_some() { 3 } else { 0 })
}

fn eval(model_dir: &Path, data: &Path, out: &mut dyn Write) -> Result<i32> {
    let path = if model_dir.is_dir() { model_dir.join("model.json") } else { model_dir.to_path_buf() };
    let model = SavedModel::load(&path)?;
    let d = read_dataset(data)?;
    let value = match model {
        SavedModel::SourceOnly(m) | SavedModel::Pada(m) => {
            let acc = evaluate(&m, &d)?;
            json!({ "accuracy": acc })
        }
        SavedModel::Cfgan(m) => {
            let pick = |tag| features_of(&d.filter_domain(tag));
            let (s, b, t) = (pick(DomainTag::Source), pick(DomainTag::Bridge), pick(DomainTag::Target));
            if s.is_empty() || b.is_empty() || t.is_empty() {
                return Err(Error::Validation("cfgan eval needs source, bridge and target rows".into()));
            }
            let sets = TranslationSets { source: &s, bridge: &b, target: &t, dim: d.dim };
            let directions = projection_directions(d.dim, 64, 0);
            serde_json::to_value(evaluate_cfgan(&m, &sets, &directions)?)?
        }
    };
    emit(out, &value)?;
    Ok(0)
}

fn plot(input: &Path, path: &Path, kind: PlotKind) -> Result<()> {
    let svg = match kind {
        PlotKind::Curves => {
            let records: Vec<MetricRecord> = read_metrics_log(input)?;
            curves_svg(&records)?
        }
        PlotKind::Scatter2d => scatter_svg(&read_dataset(input)?)?,
        PlotKind::DistanceBars => {
            let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
            let parsed: DistanceInput = serde_json::from_str(&text)?;
            distance_bars_svg(&parsed.reports())?
        }
    };
    write_text(path, &svg)
}
