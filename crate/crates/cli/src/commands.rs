use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use hsinet::data::{
    filter_bands, generate_synthetic, load_envi, parse_band_list, save_cube, save_labels, save_split, SyntheticSpec,
};
use hsinet::experiments::{
    ablation_csv, evaluate_map, ksweep_csv, predict_map, prepare_scene, run_ablation, run_ksweep, standard_suite,
};
use hsinet::metrics::{default_palette, encode_ppm};
use hsinet::model::{Checkpoint, ModelState};
use hsinet::trainer::{TrainData, Trainer};
use hsinet::Error;

use crate::config::RunConfig;
use crate::output::OutDir;

/// A check that ran to completion and failed numerically.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn out_dir(flag: Option<&Path>, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.out.clone()))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()).into())
}

pub struct SynthArgs {
    pub spec: SyntheticSpec,
    pub out: PathBuf,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let (cube, labels) = generate_synthetic(&args.spec)?;
    let mut out = OutDir::create(&args.out, "synth")?;
    save_cube(&cube, out.path("cube.hsc1"))?;
    out.record("cube.hsc1")?;
    save_labels(out.path("labels.hsl1"), labels.rows, labels.cols, &labels.grid, &labels.class_names)?;
    out.record("labels.hsl1")?;
    save_split(out.path("split.hsl1"), &labels)?;
    out.record("split.hsl1")?;
    let run = serde_json::json!({
        "data": {"cube": "cube.hsc1", "labels": "labels.hsl1", "split": "split.hsl1"},
        "train": {"seed": args.spec.seed},
    });
    out.write_json("run.json", &run)?;
    out.write_json("spec.json", &args.spec)?;
    out.finish()?;

    println!(
        "{}×{}×{} cube, {} classes -> {}",
        cube.rows(),
        cube.cols(),
        cube.bands(),
        labels.classes(),
        args.out.display()
    );
    let hist = labels.histogram();
    for (c, (train, test)) in labels.split_counts().into_iter().enumerate() {
        println!(
            "class {:>2} {:<12} {:>6} pixels  train {:>5}  test {:>5}",
            c + 1,
            labels.class_names[c],
            hist[c],
            train,
            test
        );
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, out: Option<&Path>, resume: Option<&Path>, max_steps: Option<usize>) -> Result<()> {
    let root = out_dir(out, Some(cfg))?;
    let (cube, labels) = cfg.load_data()?;
    labels.require_nonempty_training()?;
    let exp = cfg.experiment();
    let scene = prepare_scene(&cube, &exp)?;
    let data = TrainData::new(scene, labels.targets(&labels.train_mask))?;
    let mut trainer = match resume {
        Some(path) => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if trainer.model.config != cfg.model || trainer.cfg != cfg.train {
                bail!(Error::Mismatch(format!(
                    "checkpoint {} was trained with a different model or training configuration",
                    path.display()
                )));
            }
            check_model_fits(&trainer.model, cube.bands(), labels.classes())?;
            trainer
        }
        None => {
            let model = ModelState::new(cfg.model.clone(), cube.bands(), labels.classes(), cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    trainer.run(&data, max_steps)?;

    let mut out = OutDir::create(&root, "train")?;
    trainer.save(out.path("checkpoint.mshc"))?;
    out.record("checkpoint.mshc")?;
    out.write("train_epochs.csv", trainer.report().epoch_csv())?;
    out.write("train_steps.csv", trainer.report().step_csv())?;
    out.write_json("config.json", cfg)?;
    out.finish()?;

    let report = trainer.report();
    println!(
        "{} epochs, {} steps{} in {:.1}s -> {}",
        report.epochs.len(),
        trainer.steps_done(),
        if trainer.is_finished() { "" } else { " (stopped early)" },
        report.wall_time_secs,
        root.display()
    );
    if let Some(last) = report.epochs.last() {
        println!("final epoch loss {:.6}", last.loss);
    }
    if let Some(oa) = report.final_train_oa() {
        println!("train OA {oa:.4}");
    }
    Ok(())
}

fn check_model_fits(model: &ModelState, bands: usize, classes: usize) -> Result<()> {
    if model.bands != bands || model.classes != classes {
        bail!(Error::Mismatch(format!(
            "checkpoint expects {} bands and {} classes, data has {bands} and {classes}",
            model.bands, model.classes
        )));
    }
    Ok(())
}

fn load_checkpoint_model(path: &Path, cfg: &RunConfig) -> Result<ModelState> {
    let model = Checkpoint::load(path)?.to_model()?;
    if model.config != cfg.model {
        bail!(Error::Mismatch(format!(
            "checkpoint {} was built with a different model configuration than the run config",
            path.display()
        )));
    }
    Ok(model)
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let root = out_dir(out, Some(cfg))?;
    let model = load_checkpoint_model(checkpoint, cfg)?;
    let (cube, labels) = cfg.load_data()?;
    check_model_fits(&model, cube.bands(), labels.classes())?;
    let scene = prepare_scene(&cube, &cfg.experiment())?;
    let prediction = predict_map(&model, &scene, &cfg.train)?;
    let test = evaluate_map(&prediction, &labels, &labels.test_mask)?;
    let train = evaluate_map(&prediction, &labels, &labels.train_mask)?;

    let mut out = OutDir::create(&root, "eval")?;
    out.write_json("eval.json", &test)?;
    out.write_json("eval_train.json", &train)?;
    out.write("map.ppm", encode_ppm(&prediction, labels.rows, labels.cols, &default_palette(labels.classes()))?)?;
    out.finish()?;

    println!("test  OA {:.4}  AA {:.4}  kappa {:.4}", test.oa, test.aa, test.kappa);
    println!("train OA {:.4}  AA {:.4}  kappa {:.4}", train.oa, train.aa, train.kappa);
    for c in test.undefined_classes() {
        println!("class {} has no test pixels and is left out of AA", c + 1);
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let root = out_dir(out, Some(cfg))?;
    let model = load_checkpoint_model(checkpoint, cfg)?;
    let cube = cfg.load_cube()?;
    if cube.bands() != model.bands {
        bail!(Error::Mismatch(format!("checkpoint expects {} bands, cube has {}", model.bands, cube.bands())));
    }
    let scene = prepare_scene(&cube, &cfg.experiment())?;
    let prediction = predict_map(&model, &scene, &cfg.train)?;
    let names: Vec<String> = if cube.class_names.len() == model.classes {
        cube.class_names.clone()
    } else {
        (1..=model.classes).map(|c| format!("class_{c}")).collect()
    };
    let mut out = OutDir::create(&root, "predict")?;
    save_labels(out.path("prediction.hsl1"), cube.rows(), cube.cols(), &prediction, &names)?;
    out.record("prediction.hsl1")?;
    out.write("map.ppm", encode_ppm(&prediction, cube.rows(), cube.cols(), &default_palette(model.classes))?)?;
    out.finish()?;
    println!("predicted {} pixels -> {}", prediction.len(), root.display());
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let root = out_dir(out, Some(cfg))?;
    let (cube, labels) = cfg.load_data()?;
    let rows = run_ablation(&cube, &labels, &cfg.experiment())?;
    let csv = ablation_csv(&rows);
    let mut out = OutDir::create(&root, "ablate")?;
    out.write("ablation.csv", &csv)?;
    out.write_json("ablation.json", &rows)?;
    out.finish()?;
    print!("{csv}");
    for r in &rows {
        println!("{:<10} fusion width {}", r.variant, r.fusion_width);
    }
    Ok(())
}

pub fn ksweep(cfg: &RunConfig, ks: Option<&str>, out: Option<&Path>) -> Result<()> {
    let root = out_dir(out, Some(cfg))?;
    let ks = match ks {
        Some(list) => parse_band_list(list)?,
        None => cfg.k_list.clone(),
    };
    let (cube, labels) = cfg.load_data()?;
    let rows = run_ksweep(&cube, &labels, &cfg.experiment(), &ks)?;
    let csv = ksweep_csv(&rows);
    let mut out = OutDir::create(&root, "ksweep")?;
    out.write("ksweep.csv", &csv)?;
    out.finish()?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck(out: Option<&Path>) -> Result<()> {
    let reports = standard_suite()?;
    for r in &reports {
        println!(
            "{} {:<24} max rel err {:.3e}  checked {:>5}  skipped {:>4}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.checked,
            r.skipped
        );
    }
    if let Some(root) = out {
        let mut out = OutDir::create(root, "gradcheck")?;
        out.write_json("gradcheck.json", &reports)?;
        out.finish()?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        bail!(NumericFailure(format!("gradient checks failed: {}", failed.join(", "))));
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

pub fn convert(header: &Path, payload: Option<&Path>, remove_bands: Option<&str>, out: &Path) -> Result<()> {
    let cube = load_envi(header, payload)?;
    let before = cube.bands();
    let cube = match remove_bands {
        Some(list) => filter_bands(&cube, &parse_band_list(list)?)?,
        None => cube,
    };
    let mut dir = OutDir::create(out, "convert")?;
    save_cube(&cube, dir.path("cube.hsc1"))?;
    dir.record("cube.hsc1")?;
    dir.finish()?;
    println!("{}×{} raster, bands {before} -> {}", cube.rows(), cube.cols(), cube.bands());
    Ok(())
}
