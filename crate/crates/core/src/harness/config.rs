use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every sampled negative is supervised with target 0.
    Baseline,
    /// Negatives whose attention row maximum reaches `t` take that maximum as target.
    SoftLabel,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "soft_label" => Ok(Mode::SoftLabel),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected baseline or soft_label"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub sampling: u64,
}

/// Proposal post-processing before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.7,
            top_k: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Attention threshold; read only in `soft_label` mode.
    pub t: f64,
    pub model: ModelConfig,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Iterations at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub images_per_batch: usize,
    /// Proposals sampled per image.
    pub n_total: usize,
    pub pos_fraction: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Drop rate of the synthetic dataset this run expects.
    pub drop_rate: f64,
    pub seeds: Seeds,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SoftLabel,
            t: 0.8,
            model: ModelConfig::default(),
            lr: 0.02,
            momentum: 0.9,
            iterations: 1000,
            milestones: vec![500, 800],
            lr_decay: 0.1,
            images_per_batch: 4,
            n_total: 64,
            pos_fraction: 1.0 / 32.0,
            pos_iou: 0.7,
            neg_iou: 0.3,
            drop_rate: 0.3,
            seeds: Seeds {
                data: 0,
                init: 1,
                sampling: 2,
            },
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.model.validate()?;
        if !(self.t > 0.0 && self.t < 1.0) {
            return fail(format!("t = {} outside (0, 1)", self.t));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr = {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay = {} outside (0, 1]", self.lr_decay));
        }
        if self.iterations == 0 || self.images_per_batch == 0 || self.n_total == 0 {
            return fail("iterations, images_per_batch and n_total must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("milestones {:?} not strictly increasing", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.iterations) {
            return fail(format!(
                "milestones {:?} must lie below iterations = {}",
                self.milestones, self.iterations
            ));
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction < 1.0) {
            return fail(format!("pos_fraction = {} outside (0, 1)", self.pos_fraction));
        }
        if !(self.neg_iou < self.pos_iou && self.neg_iou > 0.0 && self.pos_iou <= 1.0) {
            return fail(format!(
                "need 0 < neg_iou < pos_iou ≤ 1, got {} / {}",
                self.neg_iou, self.pos_iou
            ));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return fail(format!("drop_rate = {} outside [0, 1)", self.drop_rate));
        }
        if self.eval.top_k == 0 || !(0.0..=1.0).contains(&self.eval.nms_iou) {
            return fail("eval.top_k must be positive and eval.nms_iou in [0, 1]".into());
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn schedule_decays_tenfold_per_milestone() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.02);
        assert_eq!(c.lr_at(499), 0.02);
        assert!((c.lr_at(500) - 0.002).abs() < 1e-15);
        assert!((c.lr_at(999) - 0.02 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_fields() {
        let bad = [
            TrainConfig { t: 1.0, ..Default::default() },
            TrainConfig { milestones: vec![800, 500], ..Default::default() },
            TrainConfig { milestones: vec![500, 1000], ..Default::default() },
            TrainConfig { pos_fraction: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn json_fills_defaults_and_rejects_unknown_keys() {
        let c: TrainConfig = serde_json::from_str(r#"{"t": 0.6, "mode": "baseline"}"#).unwrap();
        assert_eq!((c.t, c.mode, c.iterations), (0.6, Mode::Baseline, 1000));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"tt": 0.6}"#).is_err());
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
