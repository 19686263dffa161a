use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use super::eval::{evaluate, EvalReport};
use super::fn_detect::{random_flag_recall, score_fn_detection, FnScore};
use super::train::{train, TrainOutput};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Evaluation of one trained model: proposal quality against complete ground truth
/// and final-epoch flag quality against the withheld boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub eval: EvalReport,
    pub fn_detection: FnScore,
    /// Expected recall of a random flag set of the same per-image size.
    pub random_fn_recall: f64,
}

/// Trains on `dataset` and scores the result on the same images with every box restored.
pub fn run_experiment(config: &TrainConfig, dataset: &Dataset) -> Result<(TrainOutput, RunSummary)> {
    let out = train(config, dataset)?;
    let summary = summarize(config, dataset, &out)?;
    Ok((out, summary))
}

pub fn summarize(config: &TrainConfig, dataset: &Dataset, out: &TrainOutput) -> Result<RunSummary> {
    let eval = evaluate(&out.model, dataset, &config.eval)?;
    let dropped: Vec<_> = dataset.samples.iter().map(|s| s.record.dropped_boxes.clone()).collect();
    let anchors: Vec<_> = dataset
        .samples
        .iter()
        .map(|s| out.model.config.anchors(s.image.height(), s.image.width()))
        .collect();
    Ok(RunSummary {
        eval,
        fn_detection: score_fn_detection(&out.flags, &dropped),
        random_fn_recall: random_flag_recall(&out.flags, &dropped, &anchors),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub t: f64,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned plain-text table, one row per threshold.
    pub fn to_text(&self) -> String {
        let header = ["t", "AP50", "AP75", "AP", "recall50", "fn_prec", "fn_recall", "rand_recall", "flags"];
        let rows: Vec<[String; 9]> = self
            .rows
            .iter()
            .map(|r| {
                let (e, f) = (&r.summary.eval, &r.summary.fn_detection);
                [
                    format!("{}", r.t),
                    format!("{:.4}", e.ap50),
                    format!("{:.4}", e.ap75),
                    format!("{:.4}", e.ap),
                    format!("{:.4}", e.recall50),
                    format!("{:.4}", f.precision),
                    format!("{:.4}", f.recall),
                    format!("{:.4}", r.summary.random_fn_recall),
                    format!("{}", f.flagged),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let mut line = |cells: &[&str]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", parts.join("  "));
        };
        line(&header);
        for r in &rows {
            line(&r.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

/// One soft-label run per threshold with everything else taken from `base`. Rows run
/// in parallel and keep the order of `thresholds`.
pub fn ablate_threshold(base: &TrainConfig, dataset: &Dataset, thresholds: &[f64]) -> Result<AblationTable> {
    if thresholds.is_empty() {
        return Err(Error::Config("no thresholds given".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
    }
    let rows = thresholds
        .par_iter()
        .map(|&t| {
            let config = TrainConfig {
                mode: Mode::SoftLabel,
                t,
                ..base.clone()
            };
            let (_, summary) = run_experiment(&config, dataset)?;
            Ok(AblationRow { t, summary })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}
