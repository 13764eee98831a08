//! End-to-end runs on a cube and its labels: train, predict the full raster,
//! score the training and test masks. Also the stream ablation, the
//! neighbor-count sweep and the aggregated gradient-check suite.

mod ablation;
mod ksweep;
mod suite;

pub use ablation::{ablation_csv, ablation_variants, run_ablation, AblationRow};
pub use ksweep::{ksweep_csv, run_ksweep, KSweepRow, DEFAULT_K_LIST};
pub use suite::{standard_suite, SUITE_SEEDS};

use serde::{Deserialize, Serialize};

use crate::data::{normalize, HsiCube, LabelMap, Normalization};
use crate::error::{Error, Result};
use crate::metrics::{confusion, oa_aa_kappa, EvalReport};
use crate::model::{predict, ModelConfig, ModelState, Scene};
use crate::trainer::{argmax_rows, predict_patches, train, BatchUnit, TrainConfig, TrainData, TrainReport};

/// Rows of the query batch used when predicting a full raster.
pub const PREDICT_CHUNK: usize = 256;

/// Everything that determines a run apart from the data itself.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub normalization: Normalization,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub model: ModelState,
    pub report: TrainReport,
    /// Predicted class id (1..=P) of every pixel.
    pub prediction: Vec<u16>,
    pub train: EvalReport,
    pub test: EvalReport,
}

/// Normalizes the cube and builds its pixel graph.
pub fn prepare_scene(cube: &HsiCube, cfg: &ExperimentConfig) -> Result<Scene> {
    let cube = normalize(cube, cfg.normalization);
    Scene::build(cube.into_values(), &cfg.model)
}

fn check_extent(scene: &Scene, labels: &LabelMap) -> Result<()> {
    if (scene.height(), scene.width()) != (labels.rows, labels.cols) {
        return Err(Error::Dimension(format!(
            "cube is {}×{} but the labels are {}×{}",
            scene.height(),
            scene.width(),
            labels.rows,
            labels.cols
        )));
    }
    Ok(())
}

/// Class id (1..=P) of every pixel of the scene.
pub fn predict_map(model: &ModelState, scene: &Scene, train_cfg: &TrainConfig) -> Result<Vec<u16>> {
    let pixels: Vec<usize> = (0..scene.pixels()).collect();
    let logits = match train_cfg.batch_unit {
        BatchUnit::NodeBatch => predict(model, scene, &pixels, PREDICT_CHUNK)?,
        BatchUnit::Patch => predict_patches(model, scene, &pixels, train_cfg.patch_size)?,
    };
    Ok(argmax_rows(&logits).into_iter().map(|c| c as u16 + 1).collect())
}

pub fn evaluate_map(prediction: &[u16], labels: &LabelMap, mask: &[bool]) -> Result<EvalReport> {
    oa_aa_kappa(&confusion(prediction, labels, mask)?)
}

/// Trains on the training mask, then scores the whole raster on both masks.
pub fn run_experiment(cube: &HsiCube, labels: &LabelMap, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    labels.require_nonempty_training()?;
    let scene = prepare_scene(cube, cfg)?;
    check_extent(&scene, labels)?;
    let data = TrainData::new(scene, labels.targets(&labels.train_mask))?;
    let (model, report) = train(&cfg.model, &cfg.train, &data, labels.classes())?;
    let prediction = predict_map(&model, &data.scene, &cfg.train)?;
    let train = evaluate_map(&prediction, labels, &labels.train_mask)?;
    let test = evaluate_map(&prediction, labels, &labels.test_mask)?;
    Ok(ExperimentOutcome { model, report, prediction, train, test })
}
