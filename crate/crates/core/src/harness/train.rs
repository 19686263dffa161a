use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{match_anchors, Anchor, BBox, BoxDelta, ProposalLabel};
use crate::model::regression_targets;
use crate::model::{build_loss, sample_proposals, NegativeTargets, RpnModel};
use crate::numerics::{Graph, Tensor};

/// One JSON-lines record per iteration; losses are means over the images of the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss_pos: f64,
    pub loss_neg: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
    /// Sampled negatives given a non-zero soft target, summed over the batch.
    pub flagged: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// A negative anchor whose attention row maximum reached `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlaggedAnchor {
    /// Position of the image in the dataset.
    pub image: usize,
    pub anchor: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: RpnModel,
    pub log: Vec<IterationLog>,
    /// Flags from each image's most recent visit, i.e. the final epoch, ordered by
    /// image then anchor.
    pub flags: Vec<FlaggedAnchor>,
}

/// Label assignment for one image; depends only on its kept boxes, so it is computed once.
pub(crate) struct ImageTargets {
    pub image: Tensor,
    pub anchors: Vec<Anchor>,
    pub labels: Vec<ProposalLabel>,
    pub gt_deltas: Vec<Option<BoxDelta>>,
}

pub(crate) fn prepare_targets(
    dataset: &Dataset,
    model: &RpnModel,
    pos_iou: f64,
    neg_iou: f64,
) -> Result<Vec<ImageTargets>> {
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let image = s.image.to_tensor();
            let anchors = model.config.anchors(s.image.height(), s.image.width());
            let matches = match_anchors(&anchors, &s.record.boxes, pos_iou, neg_iou);
            let gt_deltas = regression_targets(&anchors, &s.record.boxes, &matches)?;
            Ok(ImageTargets {
                image,
                labels: matches.iter().map(|m| m.label).collect(),
                anchors,
                gt_deltas,
            })
        })
        .collect()
}

struct ImageStep {
    grads: Vec<Vec<f64>>,
    pos: f64,
    neg: f64,
    reg: f64,
    n_pos: usize,
    n_neg: usize,
    flags: Vec<(usize, f64)>,
}

fn image_step(
    model: &RpnModel,
    target: &ImageTargets,
    config: &TrainConfig,
    sample_seed: u64,
) -> Result<ImageStep> {
    let sample = sample_proposals(&target.labels, config.n_total, config.pos_fraction, sample_seed);
    let pos_targets = sample
        .positives
        .iter()
        .map(|&i| {
            target.gt_deltas[i].ok_or_else(|| {
                Error::contract("train", format!("positive anchor {i} has no regression target"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let policy = match config.mode {
        Mode::Baseline => NegativeTargets::Hard,
        Mode::SoftLabel => NegativeTargets::Soft { t: config.t },
    };
    let mut g = Graph::new();
    let built = build_loss(&mut g, model, &target.image, &sample, &pos_targets, policy)?;
    g.backward(built.total)?;
    let grads = built
        .forward
        .params
        .iter()
        .zip(model.named_params())
        .map(|(&v, (_, t))| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let values = built.values(&g);
    let flags = match &built.attention {
        Some(map) => sample
            .negatives
            .iter()
            .zip(&built.neg_targets)
            .zip(&map.row_max)
            .filter(|((_, &y), _)| y > 0.0)
            .map(|((&a, _), &m)| (a, m))
            .collect(),
        None => Vec::new(),
    };
    Ok(ImageStep {
        grads,
        pos: values.pos,
        neg: values.neg,
        reg: values.reg,
        n_pos: sample.positives.len(),
        n_neg: sample.negatives.len(),
        flags,
    })
}

/// SGD with momentum over shuffled image batches; the learning rate follows
/// [`TrainConfig::lr_at`]. Images within a batch run in parallel and their gradients
/// are reduced in batch order, so results do not depend on thread count.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    train_with(config, dataset, |_| {})
}

/// [`train`] with a callback receiving each log record as it is produced.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_iteration: impl FnMut(&IterationLog),
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("train", "dataset is empty"));
    }
    let mut model = RpnModel::init(config.model.clone(), config.seeds.init)?;
    let targets = prepare_targets(dataset, &model, config.pos_iou, config.neg_iou)?;
    let mut velocity: Vec<Vec<f64>> =
        model.named_params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.sampling);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut last_flags: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dataset.len()];
    let mut log = Vec::with_capacity(config.iterations);
    let batch = config.images_per_batch.min(dataset.len());

    for iteration in 0..config.iterations {
        let mut picks = Vec::with_capacity(batch);
        while picks.len() < batch {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push((order[cursor], rng.random::<u64>()));
            cursor += 1;
        }
        let steps = picks
            .par_iter()
            .map(|&(img, seed)| image_step(&model, &targets[img], config, seed))
            .collect::<Result<Vec<_>>>()?;

        let n = steps.len() as f64;
        let mean = |f: fn(&ImageStep) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let record = IterationLog {
            iteration,
            lr: config.lr_at(iteration),
            loss_pos: mean(|s| s.pos),
            loss_neg: mean(|s| s.neg),
            loss_reg: mean(|s| s.reg),
            loss_total: mean(|s| (s.pos + s.neg) + s.reg),
            flagged: steps.iter().map(|s| s.flags.len()).sum(),
            positives: steps.iter().map(|s| s.n_pos).sum(),
            negatives: steps.iter().map(|s| s.n_neg).sum(),
        };
        if !record.loss_total.is_finite() {
            return Err(Error::Diverged { iteration, what: "loss" });
        }

        let lr = record.lr;
        for (p, ((_, w), v)) in model.named_params_mut().into_iter().zip(&mut velocity).enumerate() {
            for (k, (wk, vk)) in w.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
                let gk = steps.iter().map(|s| s.grads[p][k]).sum::<f64>() / n;
                *vk = config.momentum * *vk + gk;
                *wk -= lr * *vk;
            }
        }
        if model.named_params().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged { iteration, what: "parameters" });
        }
        for (&(img, _), step) in picks.iter().zip(steps) {
            last_flags[img] = step.flags;
        }
        on_iteration(&record);
        log.push(record);
    }

    let flags = last_flags
        .into_iter()
        .enumerate()
        .flat_map(|(image, fl)| {
            let anchors = &targets[image].anchors;
            fl.into_iter().map(move |(anchor, score)| FlaggedAnchor {
                image,
                anchor,
                bbox: anchors[anchor].bbox,
                score,
            })
        })
        .collect();
    Ok(TrainOutput { model, log, flags })
}
