use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{prepare_targets, FlaggedAnchor};
use crate::data::Dataset;
use crate::error::Result;
use crate::geometry::{iou, Anchor, BBox};
use crate::model::{attention_map, detect_false_negatives, forward_rpn, sample_proposals, RpnModel};

/// IoU at which a flag counts as hitting a withheld box.
pub const FN_IOU: f64 = 0.5;

/// Quality of flagged anchors as detectors of withheld annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnScore {
    /// Flags overlapping some dropped box of their image, over all flags; 0 without flags.
    pub precision: f64,
    /// Dropped boxes hit by at least one flag; 1 when nothing was dropped.
    pub recall: f64,
    /// `false` when there are no dropped boxes and `recall` is the vacuous 1.
    pub recall_defined: bool,
    pub flagged: usize,
    pub true_flags: usize,
    pub dropped: usize,
    pub recovered: usize,
}

/// `dropped[i]` holds the withheld boxes of image `i`.
pub fn score_fn_detection(flags: &[FlaggedAnchor], dropped: &[Vec<BBox>]) -> FnScore {
    let hits = |f: &FlaggedAnchor, d: &BBox| iou(&f.bbox, d) >= FN_IOU;
    let true_flags = flags
        .iter()
        .filter(|f| dropped.get(f.image).is_some_and(|ds| ds.iter().any(|d| hits(f, d))))
        .count();
    let n_dropped: usize = dropped.iter().map(Vec::len).sum();
    let recovered = dropped
        .iter()
        .enumerate()
        .map(|(img, ds)| {
            ds.iter()
                .filter(|d| flags.iter().any(|f| f.image == img && hits(f, d)))
                .count()
        })
        .sum();
    FnScore {
        precision: if flags.is_empty() { 0.0 } else { true_flags as f64 / flags.len() as f64 },
        recall: if n_dropped == 0 { 1.0 } else { recovered as f64 / n_dropped as f64 },
        recall_defined: n_dropped > 0,
        flagged: flags.len(),
        true_flags,
        dropped: n_dropped,
        recovered,
    }
}

/// Probability that `drawn` anchors picked uniformly without replacement from `total`
/// include at least one of `good` specific anchors.
pub fn hit_probability(total: usize, good: usize, drawn: usize) -> f64 {
    if good == 0 || drawn == 0 {
        return 0.0;
    }
    if drawn + good > total {
        return 1.0;
    }
    // C(total - good, drawn) / C(total, drawn) as a running product
    let miss: f64 = (0..drawn)
        .map(|j| (total - good - j) as f64 / (total - j) as f64)
        .product();
    1.0 - miss
}

/// Expected recall of dropped boxes if each image's flags were replaced by the same
/// number of anchors drawn uniformly from its full anchor grid.
pub fn random_flag_recall(
    flags: &[FlaggedAnchor],
    dropped: &[Vec<BBox>],
    anchors: &[Vec<Anchor>],
) -> f64 {
    let n_dropped: usize = dropped.iter().map(Vec::len).sum();
    if n_dropped == 0 {
        return 1.0;
    }
    let mut per_image = vec![0usize; dropped.len()];
    for f in flags {
        per_image[f.image] += 1;
    }
    let expected: f64 = dropped
        .iter()
        .enumerate()
        .map(|(img, ds)| {
            ds.iter()
                .map(|d| {
                    let good = anchors[img].iter().filter(|a| iou(&a.bbox, d) >= FN_IOU).count();
                    hit_probability(anchors[img].len(), good, per_image[img])
                })
                .sum::<f64>()
        })
        .sum();
    expected / n_dropped as f64
}

/// Flags produced by a trained model on one sampled minibatch per image, using the
/// config's sampling policy and `t`. Sorted by descending score, then image, then anchor.
pub fn audit_flags(
    model: &RpnModel,
    dataset: &Dataset,
    config: &TrainConfig,
    t: f64,
) -> Result<Vec<FlaggedAnchor>> {
    let targets = prepare_targets(dataset, model, config.pos_iou, config.neg_iou)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.sampling);
    let seeds: Vec<u64> = (0..targets.len()).map(|_| rng.random()).collect();
    let per_image = targets
        .par_iter()
        .zip(&seeds)
        .enumerate()
        .map(|(image, (tg, &seed))| {
            let sample = sample_proposals(&tg.labels, config.n_total, config.pos_fraction, seed);
            if sample.positives.is_empty() || sample.negatives.is_empty() {
                return Ok(Vec::new());
            }
            let batch = forward_rpn(&tg.image, model)?;
            let neg = batch.embedding_rows(&sample.negatives)?;
            let pos = batch.embedding_rows(&sample.positives)?;
            let map = attention_map(&neg, Some(&pos))?;
            Ok(detect_false_negatives(&map, t)
                .into_iter()
                .map(|r| {
                    let anchor = sample.negatives[r];
                    FlaggedAnchor {
                        image,
                        anchor,
                        bbox: tg.anchors[anchor].bbox,
                        score: map.row_max[r],
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut flags: Vec<FlaggedAnchor> = per_image.into_iter().flatten().collect();
    flags.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.anchor.cmp(&b.anchor))
    });
    Ok(flags)
}
