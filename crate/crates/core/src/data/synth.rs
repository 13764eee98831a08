use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HsiCube, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A synthetic scene: class 1 is a background filling the raster and every
/// other class is painted as non-overlapping random ellipses. Each pixel's
/// spectrum is its class signature plus Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub classes: usize,
    /// One signature per class. Drawn at random when absent.
    pub signatures: Option<Vec<Vec<f64>>>,
    /// Minimum Euclidean distance between drawn signatures.
    pub min_separation: f64,
    pub blobs_per_class: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub min_blob_pixels: usize,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    /// Attempts per blob and for the signature draw before giving up.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            rows: 32,
            cols: 32,
            bands: 8,
            classes: 4,
            signatures: None,
            min_separation: 1.0,
            blobs_per_class: 2,
            radius_min: 3.0,
            radius_max: 7.0,
            min_blob_pixels: 6,
            noise_sigma: 0.05,
            train_fraction: 0.2,
            max_retries: 200,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.rows == 0 || self.cols == 0 || self.bands == 0 {
            return bad(format!("synthetic extent {}×{}×{} must be positive", self.rows, self.cols, self.bands));
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return bad(format!("synthetic scenes need at least 2 classes, got {}", self.classes));
        }
        if self.blobs_per_class == 0 {
            return bad("blobs_per_class must be positive".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!("blob radii must satisfy 0 < {} ≤ {}", self.radius_min, self.radius_max));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1)", self.train_fraction));
        }
        if let Some(sigs) = &self.signatures {
            if sigs.len() != self.classes {
                return bad(format!("{} signatures for {} classes", sigs.len(), self.classes));
            }
            if let Some(s) = sigs.iter().find(|s| s.len() != self.bands) {
                return bad(format!("a signature has {} bands, expected {}", s.len(), self.bands));
            }
            for i in 0..sigs.len() {
                for j in 0..i {
                    if sigs[i] == sigs[j] {
                        return bad(format!("signatures of classes {} and {} are identical", j + 1, i + 1));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        std::iter::once("background".to_string()).chain((2..=self.classes).map(|c| format!("class_{c}"))).collect()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn draw_signatures(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    for _ in 0..spec.max_retries.max(1) {
        let sigs: Vec<Vec<f64>> =
            (0..spec.classes).map(|_| (0..spec.bands).map(|_| rng.gen_range(0.0..2.0)).collect()).collect();
        let separated = (0..sigs.len()).all(|i| (0..i).all(|j| distance(&sigs[i], &sigs[j]) >= spec.min_separation));
        if separated {
            return Ok(sigs);
        }
    }
    Err(Error::Generation(format!(
        "could not draw {} signatures in {} bands at least {} apart",
        spec.classes, spec.bands, spec.min_separation
    )))
}

/// Pixels of a random ellipse, or `None` when it is too small or hits an
/// already painted pixel.
fn try_blob(spec: &SyntheticSpec, grid: &[u16], rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let (m, n) = (spec.rows, spec.cols);
    let cy = rng.gen_range(0.0..m as f64);
    let cx = rng.gen_range(0.0..n as f64);
    let a = rng.gen_range(spec.radius_min..=spec.radius_max);
    let b = rng.gen_range(spec.radius_min..=spec.radius_max);
    let (sin, cos) = rng.gen_range(0.0..std::f64::consts::PI).sin_cos();
    let mut pixels = Vec::new();
    for r in 0..m {
        for c in 0..n {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                let p = r * n + c;
                if grid[p] != 1 {
                    return None;
                }
                pixels.push(p);
            }
        }
    }
    (pixels.len() >= spec.min_blob_pixels).then_some(pixels)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(HsiCube, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signatures = match &spec.signatures {
        Some(s) => s.clone(),
        None => draw_signatures(spec, &mut rng)?,
    };
    let (m, n, b) = (spec.rows, spec.cols, spec.bands);
    let mut grid = vec![1u16; m * n];
    for class in 2..=spec.classes {
        for blob in 0..spec.blobs_per_class {
            let pixels =
                (0..spec.max_retries.max(1)).find_map(|_| try_blob(spec, &grid, &mut rng)).ok_or_else(|| {
                    Error::Generation(format!(
                        "could not place blob {} of class {class} after {} attempts",
                        blob + 1,
                        spec.max_retries
                    ))
                })?;
            for p in pixels {
                grid[p] = class as u16;
            }
        }
    }

    let mut members = vec![Vec::new(); spec.classes];
    for (p, &c) in grid.iter().enumerate() {
        members[c as usize - 1].push(p);
    }
    let mut train = vec![false; m * n];
    let mut test = vec![false; m * n];
    for (c, pixels) in members.iter_mut().enumerate() {
        if pixels.len() < 2 {
            return Err(Error::Generation(format!(
                "class {} covers {} pixel(s), too few to split",
                c + 1,
                pixels.len()
            )));
        }
        pixels.shuffle(&mut rng);
        let k = ((pixels.len() as f64 * spec.train_fraction).round() as usize).clamp(1, pixels.len() - 1);
        for (i, &p) in pixels.iter().enumerate() {
            if i < k {
                train[p] = true;
            } else {
                test[p] = true;
            }
        }
    }

    let mut data = Vec::with_capacity(m * n * b);
    if spec.noise_sigma == 0.0 {
        for &c in &grid {
            data.extend(signatures[c as usize - 1].iter().map(|&v| v as Real));
        }
    } else {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for &c in &grid {
            for &v in &signatures[c as usize - 1] {
                data.push((v + noise.sample(&mut rng)) as Real);
            }
        }
    }
    let mut cube = HsiCube::new(Tensor::new([m, n, b], data)?, format!("synthetic:seed={}", spec.seed))?;
    cube.class_names = spec.class_names();
    let labels = LabelMap::new(m, n, grid, spec.class_names(), train, test)?;
    Ok((cube, labels))
}
