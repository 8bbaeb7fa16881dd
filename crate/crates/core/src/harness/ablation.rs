//! Experiment recipes: contrastive-loss ablation, depth sweep and the
//! gradient-combiner on/off comparison.

use std::fmt::Write as _;
use std::str::FromStr;

use super::config::TrainConfig;
use super::data::Dataset;
use super::model::{Model, Prepared};
use super::train::{evaluate, train};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    Contrastive,
    Depth,
    Pareto,
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(Recipe::Contrastive),
            "depth" => Ok(Recipe::Depth),
            "pareto" => Ok(Recipe::Pareto),
            _ => Err(Error::Config(format!("unknown recipe `{s}` (contrastive, depth or pareto)"))),
        }
    }
}

pub const DEPTHS: [usize; 5] = [0, 2, 4, 6, 8];

/// Named configurations of a recipe. The first entry is the reference the
/// deltas are measured against.
pub fn variants(recipe: Recipe, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match recipe {
        Recipe::Contrastive => vec![
            ("full".into(), base.clone()),
            ("w/o L_C".into(), with(&|c| c.flags.use_macl = false)),
            ("w/o L_intra".into(), with(&|c| c.flags.use_intra = false)),
            ("w/o L_cross".into(), with(&|c| c.flags.use_cross = false)),
            ("w/o w".into(), with(&|c| c.flags.use_weights = false)),
        ],
        Recipe::Depth => DEPTHS
            .iter()
            .map(|&d| (format!("D={d}"), with(&|c| c.mslka.depth = d)))
            .collect(),
        Recipe::Pareto => vec![
            ("pareto off".into(), with(&|c| c.flags.use_pareto = false)),
            ("pareto on".into(), with(&|c| c.flags.use_pareto = true)),
        ],
    }
}

/// One training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub acc: f64,
    pub auc: Option<f64>,
    pub epoch_loss: Vec<f64>,
}

/// Seed-averaged result of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: Vec<RunResult>,
    pub acc: f64,
    pub auc: f64,
    pub epoch_loss: Vec<f64>,
}

pub fn run_one(cfg: &TrainConfig, data: &Dataset, prep: &Prepared) -> Result<(f64, Option<f64>, Vec<f64>)> {
    let mut model = Model::new(cfg.clone())?;
    let report = train(&mut model, data, prep, None, None)?;
    let m = evaluate(&mut model, data, prep)?;
    Ok((m.acc, m.auc, report.epoch_loss))
}

/// Trains every variant with every seed on the shared split.
pub fn run_ablation(
    recipe: Recipe,
    base: &TrainConfig,
    data: &Dataset,
    prep: &Prepared,
    seeds: &[u64],
    mut progress: impl FnMut(&RunResult),
) -> Result<Vec<VariantSummary>> {
    let mut out = Vec::new();
    for (name, cfg) in variants(recipe, base) {
        let mut runs = Vec::new();
        for &seed in seeds {
            let c = TrainConfig { seed, ..cfg.clone() };
            let (acc, auc, epoch_loss) = run_one(&c, data, prep)?;
            let r = RunResult {
                variant: name.clone(),
                seed,
                acc,
                auc,
                epoch_loss,
            };
            progress(&r);
            runs.push(r);
        }
        out.push(summarize(name, runs));
    }
    Ok(out)
}

pub fn summarize(variant: String, runs: Vec<RunResult>) -> VariantSummary {
    let n = runs.len().max(1) as f64;
    let acc = runs.iter().map(|r| r.acc).sum::<f64>() / n;
    let auc = runs.iter().map(|r| r.auc.unwrap_or(f64::NAN)).sum::<f64>() / n;
    let epochs = runs.iter().map(|r| r.epoch_loss.len()).min().unwrap_or(0);
    let epoch_loss = (0..epochs)
        .map(|e| runs.iter().map(|r| r.epoch_loss[e]).sum::<f64>() / n)
        .collect();
    VariantSummary {
        variant,
        runs,
        acc,
        auc,
        epoch_loss,
    }
}

pub const TABLE_HEADER: &str = "variant,seeds,acc,auc,delta_acc,delta_auc,epoch2_loss,final_loss";

/// Comparison table with deltas against the first variant.
pub fn table(rows: &[VariantSummary]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    let Some(reference) = rows.first() else { return s };
    for r in rows {
        let loss = |e: usize| r.epoch_loss.get(e).map_or(String::new(), |x| format!("{x:.6}"));
        let last = r.epoch_loss.len().saturating_sub(1);
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:+.4},{:+.4},{},{}",
            r.variant,
            r.runs.len(),
            r.acc,
            r.auc,
            r.acc - reference.acc,
            r.auc - reference.auc,
            loss(1),
            loss(last)
        );
    }
    s
}
