//! Domain-tagged datasets and their CSV file format.
//!
//! Files are UTF-8 with LF line endings and a fixed header
//! `domain,label,f0,...,f{d-1}`. Unlabeled samples store label `-1`.
//! Features are written with 17 significant digits so a write/read cycle is
//! lossless.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Bridge,
    Target,
}

impl DomainTag {
    pub const ALL: [DomainTag; 3] = [DomainTag::Source, DomainTag::Bridge, DomainTag::Target];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Bridge => "bridge",
            DomainTag::Target => "target",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(DomainTag::Source),
            "bridge" => Ok(DomainTag::Bridge),
            "target" => Ok(DomainTag::Target),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub domain: DomainTag,
}

/// Samples of equal feature width, possibly from several domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub dim: usize,
    pub samples: Vec<DomainSample>,
}

impl DomainDataset {
    pub fn new(dim: usize, samples: Vec<DomainSample>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| s.features.len() != dim) {
            return Err(Error::Validation(format!(
                "sample {i} has {} features, expected {dim}",
                samples[i].features.len()
            )));
        }
        Ok(DomainDataset { dim, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domains(&self) -> Vec<DomainTag> {
        let mut d: Vec<DomainTag> = self.samples.iter().map(|s| s.domain).collect();
        d.sort();
        d.dedup();
        d
    }

    /// Samples of one domain, keeping labels.
    pub fn filter_domain(&self, domain: DomainTag) -> DomainDataset {
        DomainDataset {
            dim: self.dim,
            samples: self.samples.iter().filter(|s| s.domain == domain).cloned().collect(),
        }
    }

    /// Row-major feature matrix.
    pub fn feature_matrix(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.features.iter().copied()).collect()
    }

    pub fn features_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), self.dim, self.feature_matrix())
    }

    /// Largest label plus one, or 0 when nothing is labeled.
    pub fn label_count(&self) -> usize {
        self.samples.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1)
    }

    /// Labeled training view; fails if any sample lacks a label.
    pub fn labeled(&self) -> Result<LabeledView> {
        let mut labels = Vec::with_capacity(self.len());
        for (i, s) in self.samples.iter().enumerate() {
            labels.push(s.label.ok_or_else(|| {
                Error::Validation(format!("sample {i} ({}) has no label", s.domain))
            })?);
        }
        Ok(LabeledView {
            dim: self.dim,
            features: self.feature_matrix(),
            labels,
        })
    }

    /// Features only. Labels never leave this call.
    pub fn unlabeled(&self) -> UnlabeledView {
        UnlabeledView {
            dim: self.dim,
            features: self.feature_matrix(),
        }
    }
}

/// Labeled features handed to training code.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledView {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Unlabeled features; the only form in which bridge and target data reach
/// a training pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledView {
    pub dim: usize,
    pub features: Vec<f64>,
}

impl UnlabeledView {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.features.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn header(dim: usize) -> String {
    let mut h = String::from("domain,label");
    for i in 0..dim {
        h.push_str(&format!(",f{i}"));
    }
    h
}

/// Renders a dataset in the CSV file format.
pub fn to_csv(dataset: &DomainDataset) -> String {
    let mut out = header(dataset.dim);
    out.push('\n');
    for s in &dataset.samples {
        out.push_str(s.domain.as_str());
        out.push(',');
        match s.label {
            Some(l) => out.push_str(&l.to_string()),
            None => out.push_str("-1"),
        }
        for v in &s.features {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

/// Parses the CSV file format. `max_classes`, when given, bounds labels.
pub fn from_csv(text: &str, max_classes: Option<usize>) -> Result<DomainDataset> {
    let mut lines = text.split('\n').enumerate();
    let (_, head) = lines.next().ok_or(Error::Parse {
        line: 1,
        detail: "empty file".into(),
    })?;
    let head = head.strip_suffix('\r').unwrap_or(head);
    let cols: Vec<&str> = head.split(',').collect();
    if cols.len() < 3 || cols[0] != "domain" || cols[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            detail: format!("bad header `{head}`"),
        });
    }
    let dim = cols.len() - 2;
    if head != header(dim) {
        return Err(Error::Parse {
            line: 1,
            detail: format!("bad header `{head}`, expected `{}`", header(dim)),
        });
    }
    let mut samples = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse { line: line_no, detail };
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(parse_err(format!("expected {} fields, found {}", dim + 2, fields.len())));
        }
        let domain: DomainTag = fields[0].parse().map_err(parse_err)?;
        let label: i64 = fields[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("label `{}`: {e}", fields[1])))?;
        let label = match label {
            -1 => None,
            l if l < -1 => {
                return Err(Error::Label {
                    index: samples.len(),
                    label: l,
                    classes: max_classes.unwrap_or(0),
                })
            }
            l => {
                if let Some(k) = max_classes {
                    if l as usize >= k {
                        return Err(Error::Label {
                            index: samples.len(),
                            label: l,
                            classes: k,
                        });
                    }
                }
                Some(l as usize)
            }
        };
        let features = fields[2..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("feature `{f}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(DomainSample {
            features,
            label,
            domain,
        });
    }
    DomainDataset::new(dim, samples)
}

pub fn write_dataset(path: &Path, dataset: &DomainDataset) -> Result<()> {
    fs::write(path, to_csv(dataset)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<DomainDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_csv(&text, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(domain: DomainTag, label: Option<usize>, f: &[f64]) -> DomainSample {
        DomainSample {
            features: f.to_vec(),
            label,
            domain,
        }
    }

    #[test]
    fn round_trip_exact() {
        let ds = DomainDataset::new(
            2,
            vec![
                sample(DomainTag::Source, Some(1), &[0.1, -1.0 / 3.0]),
                sample(DomainTag::Target, None, &[1e-300, 12345.678901234567]),
            ],
        )
        .unwrap();
        let back = from_csv(&to_csv(&ds), None).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn unlabeled_uses_sentinel() {
        let ds = DomainDataset::new(1, vec![sample(DomainTag::Bridge, None, &[2.0])]).unwrap();
        let text = to_csv(&ds);
        assert!(text.lines().nth(1).unwrap().starts_with("bridge,-1,"));
        assert_eq!(from_csv(&text, None).unwrap().samples[0].label, None);
    }

    #[test]
    fn hand_written_fixture() {
        let text = "domain,label,f0,f1\nsource,2,0.5,-1.25\ntarget,-1,3,4e-1\n";
        let ds = from_csv(text, Some(3)).unwrap();
        assert_eq!(
            ds.samples,
            vec![
                sample(DomainTag::Source, Some(2), &[0.5, -1.25]),
                sample(DomainTag::Target, None, &[3.0, 0.4]),
            ]
        );
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "domain,label,f0\nsource,0,1.0\nsource,0,abc\n";
        assert!(matches!(from_csv(text, None), Err(Error::Parse { line: 3, .. })));
        let text = "domain,label,f0\nsource,0\n";
        assert!(matches!(from_csv(text, None), Err(Error::Parse { line: 2, .. })));
        let text = "domain,label,f0\nelsewhere,0,1\n";
        assert!(matches!(from_csv(text, None), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn label_out_of_range() {
        let text = "domain,label,f0\nsource,4,1.0\n";
        assert!(matches!(from_csv(text, Some(4)), Err(Error::Label { label: 4, .. })));
        let text = "domain,label,f0\nsource,-3,1.0\n";
        assert!(matches!(from_csv(text, None), Err(Error::Label { label: -3, .. })));
    }

    #[test]
    fn bad_header() {
        assert!(matches!(from_csv("dom,label,f0\n", None), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(from_csv("domain,label,f1\n", None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn labeled_view_requires_labels() {
        let ds = DomainDataset::new(1, vec![sample(DomainTag::Source, None, &[1.0])]).unwrap();
        assert!(ds.labeled().is_err());
        assert_eq!(ds.unlabeled().len(), 1);
    }
}
