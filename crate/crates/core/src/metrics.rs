//! Confusion matrices, overall/average accuracy, Cohen's kappa and
//! classification-map export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// `counts[t][p]` = pixels of true class `t` predicted as `p` (both 0-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let p = counts.len();
        if counts.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension(format!("a confusion matrix must be square, got {p} rows of unequal length")));
        }
        Ok(ConfusionMatrix { counts })
    }

    /// Tallies `(truth, predicted)` pairs of 0-based class indices.
    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(classes);
        for (t, p) in pairs {
            if t >= classes || p >= classes {
                return Err(Error::Contract(format!("class pair ({t}, {p}) is outside 0..{classes}")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        self.counts[t].iter().sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        self.counts.iter().map(|r| r[p]).sum()
    }
}

/// Confusion matrix of per-pixel predictions (class ids 1..=P) against the
/// labels on the pixels selected by `mask`.
pub fn confusion(pred: &[u16], truth: &LabelMap, mask: &[bool]) -> Result<ConfusionMatrix> {
    let n = truth.pixels();
    if pred.len() != n || mask.len() != n {
        return Err(Error::Dimension(format!(
            "{} predictions and a mask of {} for {n} pixels",
            pred.len(),
            mask.len()
        )));
    }
    let p = truth.classes();
    let mut cm = ConfusionMatrix::new(p);
    for i in (0..n).filter(|&i| mask[i]) {
        let t = truth.grid[i] as usize;
        if t == 0 {
            return Err(Error::Contract(format!("pixel {i} is evaluated but unlabeled")));
        }
        let q = pred[i] as usize;
        if q == 0 || q > p {
            return Err(Error::Contract(format!("prediction {q} at pixel {i} is outside 1..={p}")));
        }
        cm.counts[t - 1][q - 1] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Accuracy of each class, `None` for classes without evaluated pixels.
    pub per_class: Vec<Option<f64>>,
    pub counts: ConfusionMatrix,
}

impl EvalReport {
    /// 0-based classes left out of the average accuracy.
    pub fn undefined_classes(&self) -> Vec<usize> {
        (0..self.per_class.len()).filter(|&c| self.per_class[c].is_none()).collect()
    }
}

pub fn oa_aa_kappa(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("cannot score an empty confusion matrix".into()));
    }
    let t = total as f64;
    let p = cm.classes();
    let per_class: Vec<Option<f64>> = (0..p)
        .map(|c| match cm.row_sum(c) {
            0 => None,
            r => Some(cm.get(c, c) as f64 / r as f64),
        })
        .collect();
    let mut defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.len() < p {
        let missing: Vec<usize> = (0..p).filter(|&c| per_class[c].is_none()).map(|c| c + 1).collect();
        log::warn!("classes {missing:?} have no evaluated pixels and are left out of AA");
    }
    defined.sort_by(f64::total_cmp);
    let aa = defined.iter().sum::<f64>() / defined.len() as f64;
    let po = cm.trace() as f64 / t;
    let chance: u128 = (0..p).map(|c| cm.row_sum(c) as u128 * cm.col_sum(c) as u128).sum();
    let pe = chance as f64 / (t * t);
    let kappa = if pe == 1.0 {
        if po == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (po - pe) / (1.0 - pe)
    };
    Ok(EvalReport { oa: po, aa, kappa, per_class, counts: cm.clone() })
}

/// Deterministic palette with `classes + 1` colors. Entry 0 is black.
pub fn default_palette(classes: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 16] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
    ];
    std::iter::once([0, 0, 0])
        .chain((0..classes).map(|c| {
            let [r, g, b] = BASE[c % BASE.len()];
            // Later cycles are darkened so colors stay distinct.
            let shade = |v: u8| (v as u32 * (4 - (c / BASE.len()) as u32 % 4) / 4) as u8;
            [shade(r), shade(g), shade(b)]
        }))
        .collect()
}

/// Binary PPM (P6) bytes of an M×N map of class ids, 0 for unlabeled.
pub fn encode_ppm(pred: &[u16], rows: usize, cols: usize, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if pred.len() != rows * cols {
        return Err(Error::Dimension(format!("{} map cells for a {rows}×{cols} image", pred.len())));
    }
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.reserve(pred.len() * 3);
    for (i, &c) in pred.iter().enumerate() {
        let color = palette.get(c as usize).ok_or_else(|| {
            Error::Contract(format!("class {c} at pixel {i} has no palette entry ({} colors)", palette.len()))
        })?;
        out.extend(color);
    }
    Ok(out)
}

pub fn export_map(pred: &[u16], rows: usize, cols: usize, palette: &[[u8; 3]], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(pred, rows, cols, palette)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
