use serde::Serialize;

use super::{run_experiment, ExperimentConfig};
use crate::data::{HsiCube, LabelMap};
use crate::error::{Error, Result};
use crate::model::StreamsEnabled;

/// Column order of the ablation table: each stream left out in turn, then the full model.
pub fn ablation_variants() -> Vec<(&'static str, StreamsEnabled)> {
    let without = |s| StreamsEnabled::without(s).expect("known stream name");
    vec![
        ("without_c", without("c")),
        ("without_g", without("g")),
        ("without_n", without("n")),
        ("without_s", without("s")),
        ("full", StreamsEnabled::default()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    /// Width of the concatenated stream outputs entering the fusion head.
    pub fusion_width: usize,
    /// Sum of the enabled streams' output widths.
    pub expected_width: usize,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

/// Trains every variant with the same data, seed and schedule.
pub fn run_ablation(cube: &HsiCube, labels: &LabelMap, base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, streams) in ablation_variants() {
        let mut cfg = base.clone();
        cfg.model.streams = streams;
        let expected_width = cfg.model.stream_widths().iter().map(|(_, w)| w).sum();
        let outcome = run_experiment(cube, labels, &cfg)?;
        let fusion_width = outcome.model.params.get("fuse.fc0.weight")?.shape()[0];
        if fusion_width != expected_width {
            return Err(Error::Contract(format!(
                "variant {name}: fusion input width {fusion_width} differs from the enabled widths {expected_width}"
            )));
        }
        log::info!("ablation {name}: fusion width {fusion_width}, test OA {:.4}", outcome.test.oa);
        rows.push(AblationRow {
            variant: name.to_string(),
            fusion_width,
            expected_width,
            oa: outcome.test.oa,
            aa: outcome.test.aa,
            kappa: outcome.test.kappa,
        });
    }
    Ok(rows)
}

/// One column per variant and rows `OA(%)`, `AA(%)` and `kappa×100`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("metric");
    for r in rows {
        out.push(',');
        out.push_str(&r.variant);
    }
    out.push('\n');
    let metrics: [(&str, fn(&AblationRow) -> f64); 3] =
        [("OA(%)", |r| r.oa), ("AA(%)", |r| r.aa), ("kappa×100", |r| r.kappa)];
    for (label, get) in metrics {
        out.push_str(label);
        for r in rows {
            out.push_str(&format!(",{:.2}", 100.0 * get(r)));
        }
        out.push('\n');
    }
    out
}
