use serde::Serialize;

use super::{run_experiment, ExperimentConfig};
use crate::data::{HsiCube, LabelMap};
use crate::error::{Error, Result};

pub const DEFAULT_K_LIST: [usize; 6] = [5, 10, 15, 20, 25, 30];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KSweepRow {
    pub k: usize,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

/// Retrains once per neighbor count with everything else fixed.
pub fn run_ksweep(cube: &HsiCube, labels: &LabelMap, base: &ExperimentConfig, ks: &[usize]) -> Result<Vec<KSweepRow>> {
    if ks.is_empty() {
        return Err(Error::Config("the K list is empty".into()));
    }
    ks.iter()
        .map(|&k| {
            let mut cfg = base.clone();
            cfg.model.knn.k = k;
            let outcome = run_experiment(cube, labels, &cfg)?;
            log::info!("K = {k}: test OA {:.4}", outcome.test.oa);
            Ok(KSweepRow { k, oa: outcome.test.oa, aa: outcome.test.aa, kappa: outcome.test.kappa })
        })
        .collect()
}

pub fn ksweep_csv(rows: &[KSweepRow]) -> String {
    let mut out = String::from("k,oa,aa,kappa\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.k, r.oa, r.aa, r.kappa));
    }
    out
}
