//! Loss-combination and suppression-ratio sweeps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossRecipe;
use crate::metrics::Scores;
use crate::scalar::Scalar;
use crate::unss::UnssParams;

use super::config::TrainConfig;
use super::data::Dataset;
use super::evaluate::evaluate_model;
use super::train::{train, TrainOptions};

/// Settings to sweep. Each recipe is trained with the base suppression
/// ratio; each ratio is trained with the base recipe.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub recipes: Vec<String>,
    pub theta_r: Vec<f64>,
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: Self = toml::from_str(text)?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn len(&self) -> usize {
        self.recipes.len() + self.theta_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        for name in &self.recipes {
            if LossRecipe::preset(name).is_none() {
                return Err(Error::Config(format!("unknown loss recipe `{name}`")));
            }
        }
        for &t in &self.theta_r {
            UnssParams::new(t).validate()?;
        }
        Ok(())
    }

    /// `(label, config)` for every row, in grid order.
    pub fn configs(&self, base: &TrainConfig) -> Vec<(AblationKind, TrainConfig)> {
        let mut out = Vec::with_capacity(self.len());
        for name in &self.recipes {
            let mut cfg = base.clone();
            cfg.recipe = LossRecipe::preset(name).expect("validated recipe");
            cfg.output_dir = base.output_dir.join("ablate").join(format!("recipe_{name}"));
            out.push((AblationKind::Recipe(name.clone()), cfg));
        }
        for &t in &self.theta_r {
            let mut cfg = base.clone();
            cfg.unss.theta_r = t;
            cfg.output_dir = base.output_dir.join("ablate").join(format!("theta_r_{}", ratio_label(t)));
            out.push((AblationKind::ThetaR(t), cfg));
        }
        out
    }
}

fn ratio_label(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        format!("{t}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AblationKind {
    Recipe(String),
    ThetaR(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: AblationKind,
    /// Human-readable loss wiring of the run.
    pub losses: String,
    pub theta_r: f64,
    pub scores: Scores,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("setting\tlosses\ttheta_r\tf_beta\te_measure\tmae\n");
        for r in &self.rows {
            let setting = match &r.kind {
                AblationKind::Recipe(n) => n.clone(),
                AblationKind::ThetaR(t) => format!("theta_r={}", ratio_label(*t)),
            };
            out.push_str(&format!(
                "{setting}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\n",
                r.losses,
                ratio_label(r.theta_r),
                r.scores.f_beta,
                r.scores.e_measure,
                r.scores.mae
            ));
        }
        out
    }

    /// Two aligned tables: loss combinations, then suppression ratios.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let recipes: Vec<&AblationRow> = self.rows.iter().filter(|r| matches!(r.kind, AblationKind::Recipe(_))).collect();
        let ratios: Vec<&AblationRow> = self.rows.iter().filter(|r| matches!(r.kind, AblationKind::ThetaR(_))).collect();
        if !recipes.is_empty() {
            let width = recipes.iter().map(|r| r.losses.len()).max().unwrap_or(0).max(6);
            out.push_str(&format!("{:<4} {:<width$}  {:>7} {:>7} {:>7}\n", "", "losses", "F_beta", "E", "MAE"));
            for r in recipes {
                let AblationKind::Recipe(name) = &r.kind else { continue };
                out.push_str(&format!(
                    "{name:<4} {:<width$}  {:>7.3} {:>7.3} {:>7.3}\n",
                    r.losses, r.scores.f_beta, r.scores.e_measure, r.scores.mae
                ));
            }
        }
        if !ratios.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("{:<8} {:>7} {:>7} {:>7}\n", "theta_r", "F_beta", "E", "MAE"));
            for r in ratios {
                out.push_str(&format!(
                    "{:<8} {:>7.3} {:>7.3} {:>7.3}\n",
                    ratio_label(r.theta_r),
                    r.scores.f_beta,
                    r.scores.e_measure,
                    r.scores.mae
                ));
            }
        }
        out
    }

    /// Writes `ablation.tsv`, `ablation.json` and `ablation.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("ablation.tsv", self.to_tsv()),
            ("ablation.json", serde_json::to_string_pretty(self)?),
            ("ablation.txt", self.to_table()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Trains and evaluates one model per grid row. Scores come from the masks
/// of the evaluation directory, or of the training directory when none is set.
pub fn ablate<T: Scalar>(base: &TrainConfig, grid: &AblationGrid) -> Result<AblationReport> {
    grid.validate()?;
    let eval_root = base.data.eval_dir.clone().unwrap_or_else(|| base.data.train_dir.clone());
    let eval_set = Dataset::open(&eval_root)?;
    if !eval_set.gt_dir().is_dir() {
        return Err(Error::Dataset(format!("{} has no gt/ directory to score against", eval_root.display())));
    }
    let mut report = AblationReport { dataset: eval_root.display().to_string(), rows: Vec::new() };
    for (kind, cfg) in grid.configs(base) {
        log::info!("ablation run {kind:?}: {}", cfg.recipe.describe());
        let run = train::<T>(&cfg, &TrainOptions::default())?;
        let scores = evaluate_model(&run.model, &eval_set)?;
        report.rows.push(AblationRow { kind, losses: cfg.recipe.describe(), theta_r: cfg.unss.theta_r, scores });
    }
    report.write(&base.output_dir.join("ablate"))?;
    Ok(report)
}
