//! Class prototypes, distance-softmax classification and confidence-based
//! pseudo-labeling for unlabeled domains.

use serde::{Deserialize, Serialize};

use crate::dataset::DomainTag;
use crate::error::{Error, Result};

/// Per-class mean embeddings. Rows with a zero count are invalid and carry
/// zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub classes: usize,
    pub width: usize,
    /// `classes x width`, row-major.
    pub prototypes: Vec<f64>,
    pub counts: Vec<usize>,
    pub domain: DomainTag,
}

impl PrototypeSet {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.prototypes[k * self.width..(k + 1) * self.width]
    }

    pub fn is_valid(&self, k: usize) -> bool {
        self.counts[k] > 0
    }

    pub fn valid_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes).filter(|&k| self.is_valid(k))
    }

    /// Exponential moving average toward `fresh`:
    /// `c_k <- momentum * c_k + (1 - momentum) * fresh_k`. A class that is
    /// valid on only one side takes that side's prototype.
    pub fn ema_update(&mut self, fresh: &PrototypeSet, momentum: f64) -> Result<()> {
        if fresh.classes != self.classes || fresh.width != self.width {
            return Err(Error::dim(
                "ema_update",
                format!(
                    "{}x{} vs {}x{}",
                    self.classes, self.width, fresh.classes, fresh.width
                ),
            ));
        }
        for k in 0..self.classes {
            let w = self.width;
            match (self.is_valid(k), fresh.is_valid(k)) {
                (_, false) => {}
                (false, true) => {
                    self.prototypes[k * w..(k + 1) * w].copy_from_slice(fresh.row(k));
                    self.counts[k] = fresh.counts[k];
                }
                (true, true) => {
                    for j in 0..w {
                        let old = self.prototypes[k * w + j];
                        self.prototypes[k * w + j] =
                            momentum * old + (1.0 - momentum) * fresh.prototypes[k * w + j];
                    }
                    self.counts[k] = fresh.counts[k];
                }
            }
        }
        Ok(())
    }
}

/// Mean embedding per class.
pub fn compute_prototypes(
    embeddings: &[f64],
    width: usize,
    labels: &[usize],
    classes: usize,
    domain: DomainTag,
) -> Result<PrototypeSet> {
    if width == 0 || embeddings.len() != labels.len() * width {
        return Err(Error::dim(
            "compute_prototypes",
            format!(
                "{} values for {} labels of width {width}",
                embeddings.len(),
                labels.len()
            ),
        ));
    }
    if let Some(index) = labels.iter().position(|&l| l >= classes) {
        return Err(Error::Label {
            index,
            label: labels[index] as i64,
            classes,
        });
    }
    let mut sums = vec![0.0; classes * width];
    let mut counts = vec![0usize; classes];
    for (row, &l) in embeddings.chunks_exact(width).zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l * width..(l + 1) * width].iter_mut().zip(row) {
            *s += v;
        }
    }
    for k in 0..classes {
        if counts[k] > 0 {
            let n = counts[k] as f64;
            sums[k * width..(k + 1) * width].iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(PrototypeSet {
        classes,
        width,
        prototypes: sums,
        counts,
        domain,
    })
}

/// Softmax over negative squared Euclidean distances to the valid
/// prototypes. Invalid classes get probability 0.
pub fn proto_classify(query: &[f64], protos: &PrototypeSet) -> Result<Vec<f64>> {
    if query.len() != protos.width {
        return Err(Error::dim(
            "proto_classify",
            format!("query width {} vs prototype width {}", query.len(), protos.width),
        ));
    }
    let valid: Vec<usize> = protos.valid_classes().collect();
    if valid.is_empty() {
        return Err(Error::Estimation("no valid prototypes".into()));
    }
    let logits: Vec<f64> = valid
        .iter()
        .map(|&k| {
            -protos
                .row(k)
                .iter()
                .zip(query)
                .map(|(c, q)| (c - q) * (c - q))
                .sum::<f64>()
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut probs = vec![0.0; protos.classes];
    for (&k, e) in valid.iter().zip(exps) {
        probs[k] = e / z;
    }
    Ok(probs)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl PseudoLabelBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Accepts row `i` with its argmax label when the max probability reaches
/// `threshold`.
pub fn pseudo_label(probs: &[f64], classes: usize, threshold: f64) -> Result<PseudoLabelBatch> {
    if classes < 2 || probs.len() % classes != 0 {
        return Err(Error::dim(
            "pseudo_label",
            format!("{} probabilities for {classes} classes", probs.len()),
        ));
    }
    if !(threshold > 1.0 / classes as f64 && threshold <= 1.0) {
        return Err(Error::config(
            "pseudo_label_threshold",
            format!("{threshold} not in (1/{classes}, 1]"),
        ));
    }
    let mut batch = PseudoLabelBatch::default();
    for (i, row) in probs.chunks_exact(classes).enumerate() {
        let k = argmax(row);
        if row[k] >= threshold {
            batch.indices.push(i);
            batch.labels.push(k);
            batch.confidences.push(row[k]);
        }
    }
    Ok(batch)
}
