//! Run configuration: one JSON document, optionally patched with
//! `--set dotted.path=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hsinet::data::{
    compare_with_table, filter_bands, load_cube, load_labels_and_split, parse_band_list, CubeFormat, HsiCube, LabelMap,
    Normalization, SplitTable,
};
use hsinet::experiments::{ExperimentConfig, DEFAULT_K_LIST};
use hsinet::model::ModelConfig;
use hsinet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub cube: Option<PathBuf>,
    pub format: CubeFormat,
    pub labels: Option<PathBuf>,
    pub split: Option<PathBuf>,
    /// 1-based bands to drop after loading, e.g. `104-108,150-163,220`.
    pub remove_bands: Option<String>,
    /// Published split whose per-class counts the loaded split is compared with.
    pub table: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { cube: None, format: CubeFormat::Hsc1, labels: None, split: None, remove_bands: None, table: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub normalization: Normalization,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub k_list: Vec<usize>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            normalization: Normalization::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            k_list: DEFAULT_K_LIST.to_vec(),
            out: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults), applies the overrides and
    /// validates the result. Relative data paths in a file are taken relative
    /// to the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                let mut doc: Value =
                    serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", p.display()))?;
                anchor_paths(&mut doc, p.parent().unwrap_or(Path::new(".")));
                doc
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).context("invalid run configuration")?;
        cfg.experiment().validate()?;
        if cfg.k_list.contains(&0) {
            bail!(hsinet::Error::Config("k_list entries must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig { normalization: self.normalization, model: self.model.clone(), train: self.train.clone() }
    }

    pub fn load_cube(&self) -> Result<HsiCube> {
        let path = self.data.cube.as_ref().ok_or_else(|| missing("data.cube"))?;
        let cube = load_cube(path, self.data.format)?;
        match &self.data.remove_bands {
            Some(list) => {
                let before = cube.bands();
                let cube = filter_bands(&cube, &parse_band_list(list)?)?;
                log::info!("bands: {before} -> {}", cube.bands());
                Ok(cube)
            }
            None => Ok(cube),
        }
    }

    pub fn load_labels(&self) -> Result<LabelMap> {
        let labels = self.data.labels.as_ref().ok_or_else(|| missing("data.labels"))?;
        let split = self.data.split.as_ref().ok_or_else(|| missing("data.split"))?;
        let map = load_labels_and_split(labels, split)?;
        if let Some(name) = &self.data.table {
            let table = SplitTable::by_name(name)
                .ok_or_else(|| hsinet::Error::Config(format!("unknown split table `{name}`")))?;
            let diffs = compare_with_table(&map, table);
            if diffs.is_empty() {
                log::info!("split matches the {} table", table.name);
            }
            for d in diffs {
                log::warn!("split differs from the {} table: {d}", table.name);
            }
        }
        Ok(map)
    }

    /// Cube and labels, checked to cover the same raster.
    pub fn load_data(&self) -> Result<(HsiCube, LabelMap)> {
        let cube = self.load_cube()?;
        let labels = self.load_labels()?;
        if (cube.rows(), cube.cols()) != (labels.rows, labels.cols) {
            bail!(hsinet::Error::Dimension(format!(
                "cube is {}×{} but the labels are {}×{}",
                cube.rows(),
                cube.cols(),
                labels.rows,
                labels.cols
            )));
        }
        Ok((cube, labels))
    }
}

fn missing(key: &str) -> anyhow::Error {
    hsinet::Error::Config(format!("`{key}` is not set")).into()
}

fn anchor_paths(doc: &mut Value, base: &Path) {
    let Some(data) = doc.get_mut("data").and_then(Value::as_object_mut) else { return };
    for key in ["cube", "labels", "split"] {
        if let Some(Value::String(s)) = data.get_mut(key) {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when it can be, and
/// taken as a string otherwise.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let Some((path, raw)) = spec.split_once('=') else {
        bail!(hsinet::Error::Config(format!("override `{spec}` is not of the form key.path=value")));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!(hsinet::Error::Config(format!("override path `{path}` has an empty segment")));
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| hsinet::Error::Config(format!("override `{path}` descends into a non-object")))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| hsinet::Error::Config(format!("override `{path}` descends into a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
