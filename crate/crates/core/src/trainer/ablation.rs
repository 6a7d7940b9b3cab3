use super::inference::{evaluate_holdout, holdout_masks, HoldoutEval};
use super::{prepare_data, write_json, TrainConfig, TrainState, Trainer};
use crate::error::{Error, Result};
use crate::losses::RandomConvExtractor;
use crate::metrics::{metrics_table, TABLE_COLUMNS};
use crate::model::Toggles;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Extra per-row columns: held-out structure L1 and edge-weighted error.
pub const STRUCTURE_COLUMNS: [&str; 2] = ["C-L1", "C-edge"];

/// The four rows, in order: Baseline, MT, MT+SE, MT+SE+AT.
pub fn ablation_configs(base: &TrainConfig) -> Vec<TrainConfig> {
    [Toggles::baseline(), Toggles::multi_task(), Toggles::with_embedding(), Toggles::full()]
        .into_iter()
        .map(|t| base.with_toggles(t))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub data_digest: String,
    pub checkpoint_digest: String,
    pub eval: HoldoutEval,
}

impl AblationRow {
    pub fn structure_columns(&self) -> [Option<f64>; 2] {
        [self.eval.structure_l1, self.eval.structure_edge]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl AblationReport {
    /// Metric table followed by the structure columns.
    pub fn table(&self) -> String {
        let rows: Vec<(String, [Option<f64>; 6])> =
            self.rows.iter().map(|r| (r.label.clone(), r.eval.model.row())).collect();
        let metrics = metrics_table(&rows);
        let mut out = String::new();
        for (i, line) in metrics.lines().enumerate() {
            out.push_str(line);
            let extra = match i {
                0 => STRUCTURE_COLUMNS.iter().map(|c| format!("{c:>10}")).collect::<String>(),
                _ => match self.rows.get(i - 1) {
                    Some(r) => r.structure_columns().iter().map(|&v| format!("{:>10}", cell(v))).collect(),
                    None => String::new(),
                },
            };
            out.push_str(&extra);
            out.push('\n');
        }
        out
    }

    pub fn metric_columns() -> usize {
        TABLE_COLUMNS.len()
    }
}

/// Trains and evaluates every row under the base seed and data. Any row
/// failure aborts with the row name.
pub fn run_ablation(base: &TrainConfig, out: Option<&Path>) -> Result<AblationReport> {
    base.validate()?;
    let (data, holdout) = prepare_data(base)?;
    let masks = holdout_masks(&base.mask, base.generator.image_size, holdout.len(), base.seed)?;
    let fx = RandomConvExtractor::<f64>::default();
    let mut rows = Vec::new();
    for cfg in ablation_configs(base) {
        let label = cfg.toggles().label().to_string();
        let wrap = |e: Error| Error::Ablation { row: label.clone(), source: Box::new(e) };
        let row_dir = out.map(|d| d.join(label.replace('+', "_")));
        let trainer = Trainer::new(cfg.clone()).map_err(wrap)?;
        let mut state = TrainState::new(&cfg).map_err(wrap)?;
        trainer.run(&mut state, &data, row_dir.as_deref()).map_err(wrap)?;
        let eval = evaluate_holdout(&state.generator, &cfg.generator, &holdout, &masks, &fx).map_err(wrap)?;
        log::info!("ablation row {label} done");
        rows.push(AblationRow {
            label: label.clone(),
            seed: cfg.seed,
            data_digest: data.digest.clone(),
            checkpoint_digest: state.digest(),
            config: cfg,
            eval,
        });
    }
    let report = AblationReport { rows };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("ablation.json"), &report)?;
        std::fs::write(dir.join("ablation.txt"), report.table()).map_err(|e| Error::io(dir, e))?;
    }
    Ok(report)
}
