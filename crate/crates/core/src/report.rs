//! Run configuration files and the JSON-lines metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipelines::{CfganConfig, CfganModels, ModelBundle, FeatureBranch, LossWeights, MetricRecord, ModelWidths, PadaConfig, Warmup};
use crate::synthdata::{TranslationTaskSpec, TripleSpec};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "BRIDGEDA_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub report: ReportSection,
}

/// Where the data comes from: a generated triple, a generated translation
/// task, or CSV files on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSection {
    Triple(TripleSpec),
    Translation(TranslationTaskSpec),
    Files(DataFiles),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub source: PathBuf,
    pub bridge: PathBuf,
    pub target: PathBuf,
    /// Labeled bridge/target rows used only for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sealed: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub pada: ModelWidths,
    pub cfgan: CfganWidths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfganWidths {
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
}

impl Default for CfganWidths {
    fn default() -> Self {
        let c = CfganConfig::new(0);
        CfganWidths {
            generator_hidden: c.generator_hidden,
            discriminator_hidden: c.discriminator_hidden,
        }
    }
}

/// Training settings shared by all trainers. Absent optional values fall
/// back to the defaults of whichever trainer runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype_momentum: Option<f64>,
    #[serde(default)]
    pub warmup: Warmup,
    #[serde(default)]
    pub identifier_branch: FeatureBranch,
    #[serde(default)]
    pub monitor_domain_identifier: bool,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sw_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sw_projections: Option<usize>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub curves: bool,
    #[serde(default = "yes")]
    pub scatter: bool,
    #[serde(default = "yes")]
    pub distances: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            out_dir: None,
            curves: true,
            scatter: true,
            distances: true,
        }
    }
}

impl RunConfigFile {
    /// Parses and validates a JSON config.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSection::Triple(s) => s.validate()?,
            DataSection::Translation(s) => s.validate()?,
            DataSection::Files(_) => {}
        }
        self.pada_config().validate()?;
        self.cfgan_config().validate()
    }

    pub fn pada_config(&self) -> PadaConfig {
        let t = &self.train;
        let mut c = PadaConfig::new(t.seed);
        c.widths = self.model.pada.clone();
        c.weights = t.weights.clone();
        c.lr = t.lr.unwrap_or(c.lr);
        c.iterations = t.iterations.unwrap_or(c.iterations);
        c.batch_size = t.batch_size.unwrap_or(c.batch_size);
        c.lambda = t.lambda.unwrap_or(c.lambda);
        c.pseudo_label_threshold = t.pseudo_label_threshold.unwrap_or(c.pseudo_label_threshold);
        c.prototype_momentum = t.prototype_momentum.unwrap_or(c.prototype_momentum);
        c.warmup = t.warmup.clone();
        c.identifier_branch = t.identifier_branch;
        c.monitor_domain_identifier = t.monitor_domain_identifier;
        c.eval_every = t.eval_every;
        c
    }

    pub fn cfgan_config(&self) -> CfganConfig {
        let t = &self.train;
        let mut c = CfganConfig::new(t.seed);
        c.generator_hidden = self.model.cfgan.generator_hidden.clone();
        c.discriminator_hidden = self.model.cfgan.discriminator_hidden.clone();
        c.lr = t.lr.unwrap_or(c.lr);
        c.iterations = t.iterations.unwrap_or(c.iterations);
        c.batch_size = t.batch_size.unwrap_or(c.batch_size);
        c.lambda = t.lambda.unwrap_or(c.lambda);
        c.cycle_weight = t.cycle_weight.unwrap_or(c.cycle_weight);
        c.sw_every = t.sw_every.unwrap_or(c.sw_every);
        c.sw_projections = t.sw_projections.unwrap_or(c.sw_projections);
        c
    }
}

/// Output directory: explicit flag, then the config, then the environment,
/// then `bridgeda-out`.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("bridgeda-out"))
}

/// One JSON object per line. Non-finite values cannot be written as JSON
/// numbers, so they are dropped and named in a `non_finite:<key>` flag.
pub fn metrics_line(record: &MetricRecord) -> String {
    let mut rec = record.clone();
    for map in [&mut rec.losses, &mut rec.accuracy] {
        let bad: Vec<String> = map.iter().filter(|(_, v)| !v.is_finite()).map(|(k, _)| k.clone()).collect();
        for k in bad {
            map.remove(&k);
            rec.flags.push(format!("non_finite:{k}"));
        }
    }
    serde_json::to_string(&rec).expect("record serializes")
}

/// Append-only metrics log enforcing strictly increasing iterations.
pub struct MetricsLog {
    path: PathBuf,
    file: std::io::BufWriter<fs::File>,
    last: Option<usize>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            file: std::io::BufWriter::new(file),
            last: None,
        })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        if self.last.is_some_and(|l| record.iteration <= l) {
            return Err(Error::Contract(format!(
                "metrics log iteration {} does not follow {}",
                record.iteration,
                self.last.unwrap_or_default()
            )));
        }
        self.last = Some(record.iteration);
        writeln!(self.file, "{}", metrics_line(record)).map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_metrics_log(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut log = MetricsLog::create(path)?;
    for r in records {
        log.append(r)?;
    }
    log.finish()
}

/// Parses a metrics log. A final line without a newline that fails to
/// parse is treated as a truncated tail and dropped.
pub fn parse_metrics_log(text: &str) -> Result<Vec<MetricRecord>> {
    let mut out: Vec<MetricRecord> = Vec::new();
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(_) if !complete && i + 1 == lines.len() => break,
            Err(e) => {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: e.to_string(),
                })
            }
        };
        if let Some(prev) = out.last() {
            if rec.iteration <= prev.iteration {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!("iteration {} does not follow {}", rec.iteration, prev.iteration),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_log(&text)
}

/// Contents of `model.json` in a training output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum SavedModel {
    SourceOnly(ModelBundle),
    Pada(ModelBundle),
    Cfgan(CfganModels),
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "data": {"translation": {"source": {"ring": {"radius": 1.0, "noise": 0.05}},
                                 "bridge": {"ring": {"radius": 2.0, "noise": 0.05}},
                                 "target": {"ring": {"radius": 3.0, "noise": 0.05}},
                                 "n": 64, "seed": 1}},
        "train": {"seed": 4, "iterations": 10}
    }"#;

    #[test]
    fn config_round_trip_is_fixed_point() {
        let cfg = RunConfigFile::parse(MINIMAL).unwrap();
        let again = RunConfigFile::parse(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_json(), again.to_json());
        assert_eq!(cfg.pada_config().iterations, 10);
        assert_eq!(cfg.cfgan_config().iterations, 10);
    }

    #[test]
    fn config_rejects_typos_and_missing_seed() {
        let typo = MINIMAL.replace("\"iterations\"", "\"iteratons\"");
        assert!(matches!(RunConfigFile::parse(&typo), Err(Error::Json(_))));
        let no_seed = MINIMAL.replace("\"seed\": 4, ", "");
        assert!(RunConfigFile::parse(&no_seed).is_err());
        let bad_weight = MINIMAL.replace("\"seed\": 4,", "\"seed\": 4, \"weights\": {\"adv\": -1},");
        assert!(matches!(RunConfigFile::parse(&bad_weight), Err(Error::Config { .. })));
    }

    #[test]
    fn metrics_log_round_trip_and_truncation() {
        let mut a = MetricRecord { iteration: 0, ..Default::default() };
        a.losses.insert("ce".into(), 0.5);
        let mut b = MetricRecord { iteration: 3, ..Default::default() };
        b.losses.insert("ce".into(), f64::NAN);
        let text = format!("{}\n{}\n", metrics_line(&a), metrics_line(&b));
        let back = parse_metrics_log(&text).unwrap();
        assert_eq!(back[0], a);
        assert_eq!(back[1].flags, vec!["non_finite:ce".to_string()]);
        let cut = &text[..text.len() - 5];
        assert_eq!(parse_metrics_log(cut).unwrap(), vec![a.clone()]);
        let unordered = format!("{}\n{}\n", metrics_line(&a), metrics_line(&a));
        assert!(matches!(parse_metrics_log(&unordered), Err(Error::Parse { line: 2, .. })));
    }
}
