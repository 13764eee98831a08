//! Hyperspectral cubes, label maps and train/test splits: file formats, band
//! filtering, normalization and a synthetic scene generator.

mod formats;
mod synth;
mod tables;

pub use formats::{
    load_cube, load_envi, load_labels, load_labels_and_split, load_split, save_cube, save_labels, save_split,
    CubeFormat, SplitCode,
};
pub use synth::{generate_synthetic, SyntheticSpec};
pub use tables::{
    compare_with_table, SplitTable, HOUSTON_2013, INDIAN_PINES, INDIAN_PINES_NOISY_BANDS, PAVIA_UNIVERSITY,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An M×N×B reflectance raster stored pixel-major (`[row, col, band]`).
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    values: Tensor,
    /// One entry per band of the source; `true` where the band was kept.
    pub band_mask: Vec<bool>,
    /// Where the values came from.
    pub provenance: String,
    /// Class names carried in the cube header, if any.
    pub class_names: Vec<String>,
}

impl HsiCube {
    pub fn new(values: Tensor, provenance: impl Into<String>) -> Result<Self> {
        let &[_, _, b] = values.shape() else {
            return Err(Error::Dimension(format!("a cube must be M×N×B, got {:?}", values.shape())));
        };
        if b == 0 {
            return Err(Error::Config("a cube needs at least one band".into()));
        }
        if let Some(i) = values.data().iter().position(|v| !v.is_finite()) {
            let (px, band) = (i / b, i % b);
            return Err(Error::Data(format!("non-finite value at pixel {px}, band {band}")));
        }
        Ok(HsiCube { values, band_mask: vec![true; b], provenance: provenance.into(), class_names: Vec::new() })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// Spectrum of pixel `p` in row-major pixel order.
    pub fn spectrum(&self, p: usize) -> &[Real] {
        let b = self.bands();
        &self.values.data()[p * b..(p + 1) * b]
    }
}

/// Parses band lists such as `104-108,150-163,220` into 1-based indices.
pub fn parse_band_list(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parse =
            |s: &str| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad band index `{s}` in `{spec}`")));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(Error::Config(format!("descending band range `{part}`")));
                }
                out.extend(a..=b);
            }
            None => out.push(parse(part)?),
        }
    }
    Ok(out)
}

/// Drops the listed bands, keeping order. Indices are 1-based and refer to the
/// bands of the original source (the positions of `band_mask`), so removals
/// applied one after another compose the same way in either order.
pub fn filter_bands(cube: &HsiCube, remove: &[usize]) -> Result<HsiCube> {
    let original = cube.band_mask.len();
    let mut band_mask = cube.band_mask.clone();
    for &i in remove {
        if i == 0 || i > original {
            return Err(Error::Config(format!("band {i} is outside 1..={original}")));
        }
        if !std::mem::replace(&mut band_mask[i - 1], false) {
            let why = if remove.iter().filter(|&&j| j == i).count() > 1 { "listed twice" } else { "already removed" };
            return Err(Error::Config(format!("band {i} is {why}")));
        }
    }
    // Positions of the surviving bands within the current cube.
    let keep: Vec<usize> = cube
        .band_mask
        .iter()
        .enumerate()
        .filter(|(_, &kept)| kept)
        .map(|(i, _)| band_mask[i])
        .enumerate()
        .filter_map(|(k, still)| still.then_some(k))
        .collect();
    if keep.is_empty() {
        return Err(Error::Config("removing every band leaves an empty cube".into()));
    }
    let mut data = Vec::with_capacity(cube.pixels() * keep.len());
    for p in 0..cube.pixels() {
        let s = cube.spectrum(p);
        data.extend(keep.iter().map(|&k| s[k]));
    }
    Ok(HsiCube {
        values: Tensor::new([cube.rows(), cube.cols(), keep.len()], data)?,
        band_mask,
        provenance: cube.provenance.clone(),
        class_names: cube.class_names.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    PerBandZscore,
    Minmax01,
    None,
}

const STDEV_FLOOR: f64 = 1e-8;

/// Rescales each band independently.
pub fn normalize(cube: &HsiCube, mode: Normalization) -> HsiCube {
    let (n, b) = (cube.pixels(), cube.bands());
    let mut out = cube.clone();
    if mode == Normalization::None || n == 0 {
        return out;
    }
    let data = out.values.data_mut();
    for k in 0..b {
        let band = || (0..n).map(|p| cube.values.data()[p * b + k] as f64);
        let (shift, scale) = match mode {
            Normalization::PerBandZscore => {
                let mean = band().sum::<f64>() / n as f64;
                let var = band().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                (mean, var.sqrt().max(STDEV_FLOOR))
            }
            Normalization::Minmax01 => {
                let lo = band().fold(f64::INFINITY, f64::min);
                let hi = band().fold(f64::NEG_INFINITY, f64::max);
                (lo, if hi > lo { hi - lo } else { 1.0 })
            }
            Normalization::None => unreachable!(),
        };
        for p in 0..n {
            let v = &mut data[p * b + k];
            *v = ((*v as f64 - shift) / scale) as Real;
        }
    }
    out
}

/// Class ids per pixel (0 = unlabeled, 1..=P labeled) with disjoint train and test masks.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<u16>,
    pub class_names: Vec<String>,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl LabelMap {
    /// Validates masks against the labels: same size, disjoint, only on
    /// labeled pixels, class ids within range, and every class labeled.
    pub fn new(
        rows: usize,
        cols: usize,
        grid: Vec<u16>,
        class_names: Vec<String>,
        train_mask: Vec<bool>,
        test_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = rows * cols;
        if grid.len() != n || train_mask.len() != n || test_mask.len() != n {
            return Err(Error::Dimension(format!("label grid or masks do not cover {rows}×{cols} pixels")));
        }
        let p = class_names.len();
        let mut seen = vec![false; p];
        for (i, &c) in grid.iter().enumerate() {
            if c as usize > p {
                return Err(Error::Data(format!("pixel {i} has class {c} but only {p} classes are named")));
            }
            if c > 0 {
                seen[c as usize - 1] = true;
            }
            if train_mask[i] && test_mask[i] {
                return Err(Error::Data(format!("pixel {i} is in both the training and the test set")));
            }
            if (train_mask[i] || test_mask[i]) && c == 0 {
                return Err(Error::Data(format!("pixel {i} is in a split but unlabeled")));
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("class {} (`{}`) has no labeled pixel", c + 1, class_names[c])));
        }
        Ok(LabelMap { rows, cols, grid, class_names, train_mask, test_mask })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels(&self) -> usize {
        self.grid.len()
    }

    /// 0-based class of every pixel in `mask`, `None` elsewhere.
    pub fn targets(&self, mask: &[bool]) -> Vec<Option<usize>> {
        self.grid.iter().zip(mask).map(|(&c, &m)| (m && c > 0).then(|| c as usize - 1)).collect()
    }

    pub fn train_pixels(&self) -> Vec<usize> {
        (0..self.pixels()).filter(|&i| self.train_mask[i]).collect()
    }

    pub fn test_pixels(&self) -> Vec<usize> {
        (0..self.pixels()).filter(|&i| self.test_mask[i]).collect()
    }

    /// `(train, test)` pixel counts per class.
    pub fn split_counts(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); self.classes()];
        for i in 0..self.pixels() {
            if self.grid[i] == 0 {
                continue;
            }
            let slot = &mut out[self.grid[i] as usize - 1];
            if self.train_mask[i] {
                slot.0 += 1;
            }
            if self.test_mask[i] {
                slot.1 += 1;
            }
        }
        out
    }

    /// Labeled pixels per class regardless of split.
    pub fn histogram(&self) -> Vec<usize> {
        let mut out = vec![0; self.classes()];
        for &c in &self.grid {
            if c > 0 {
                out[c as usize - 1] += 1;
            }
        }
        out
    }

    /// Rejects splits that leave some class without training pixels.
    pub fn require_nonempty_training(&self) -> Result<()> {
        for (c, (train, _)) in self.split_counts().into_iter().enumerate() {
            if train == 0 {
                return Err(Error::Data(format!("class {} (`{}`) has no training pixel", c + 1, self.class_names[c])));
            }
        }
        Ok(())
    }
}
