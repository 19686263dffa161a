use super::attention::{attention_graph, AttentionMap};
use super::network::{ProposalBatch, RpnForward, RpnModel};
use super::sampling::ProposalSample;
use crate::error::{Error, Result};
use crate::geometry::{BoxDelta, ProposalLabel};
use crate::numerics::{bce_loss, smooth_l1_term, Graph, Tensor, Var};

/// The three RPN loss components: positive objectness, negative objectness, box regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub pos: T,
    pub neg: T,
    pub reg: T,
}

impl LossTerms<f64> {
    pub fn total(&self) -> f64 {
        (self.pos + self.neg) + self.reg
    }
}

/// Soft targets for negatives: `max(A_i)` when it reaches `t`, else 0.
/// Without an attention map every target is 0.
pub fn negative_targets(attention: Option<&AttentionMap>, n_neg: usize, t: f64) -> Vec<f64> {
    match attention {
        None => vec![0.0; n_neg],
        Some(a) => a.row_max.iter().map(|&m| if m >= t { m } else { 0.0 }).collect(),
    }
}

/// Value-level RPN loss over the labelled anchors of `batch`.
///
/// Attention rows must follow the batch's negatives in index order. `None` covers
/// the no-positive case and reduces to hard zero targets.
pub fn soft_label_loss(
    batch: &ProposalBatch,
    attention: Option<&AttentionMap>,
    t: f64,
) -> Result<LossTerms<f64>> {
    let pos = batch.indices_of(ProposalLabel::Positive);
    let neg = batch.indices_of(ProposalLabel::Negative);
    if let Some(a) = attention {
        if a.num_negatives() != neg.len() {
            return Err(Error::contract(
                "soft_label_loss",
                format!("{} attention rows for {} negatives", a.num_negatives(), neg.len()),
            ));
        }
    }
    let targets = negative_targets(attention, neg.len(), t);
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };

    let pos_sum: f64 = pos.iter().map(|&i| bce_loss(batch.objectness[i], 1.0)).sum();
    let neg_sum: f64 = neg
        .iter()
        .zip(&targets)
        .map(|(&i, &y)| bce_loss(batch.objectness[i], y))
        .sum();
    let mut reg_terms = Vec::with_capacity(pos.len() * 4);
    for &i in &pos {
        let target = batch.gt_deltas[i].ok_or_else(|| {
            Error::contract("soft_label_loss", format!("positive {i} has no regression target"))
        })?;
        let pred = batch.deltas[i].to_array();
        reg_terms.extend(pred.iter().zip(target.to_array()).map(|(p, t)| smooth_l1_term(p - t)));
    }
    let reg_sum: f64 = reg_terms.iter().sum();
    Ok(LossTerms {
        pos: mean(pos_sum, pos.len()),
        neg: mean(neg_sum, neg.len()),
        reg: mean(reg_sum, pos.len()),
    })
}

/// The unmodified RPN loss: every negative gets target 0.
pub fn vanilla_rpn_loss(batch: &ProposalBatch) -> Result<LossTerms<f64>> {
    soft_label_loss(batch, None, 1.0)
}

/// How negatives are supervised when building a training loss.
#[derive(Debug, Clone, Copy)]
pub enum NegativeTargets<'a> {
    /// All zeros; no attention computed.
    Hard,
    /// Attention-derived soft targets with threshold `t`.
    Soft { t: f64 },
    /// Caller-supplied targets, one per sampled negative.
    Frozen(&'a [f64]),
}

/// Graph handles and side outputs of one image's loss.
#[derive(Debug, Clone)]
pub struct BuiltLoss {
    pub forward: RpnForward,
    pub terms: LossTerms<Var>,
    pub total: Var,
    pub attention: Option<AttentionMap>,
    /// Target used for each sampled negative, aligned with `sample.negatives`.
    pub neg_targets: Vec<f64>,
}

impl BuiltLoss {
    pub fn values(&self, g: &Graph) -> LossTerms<f64> {
        LossTerms {
            pos: g.scalar(self.terms.pos),
            neg: g.scalar(self.terms.neg),
            reg: g.scalar(self.terms.reg),
        }
    }
}

/// Records forward pass and loss for one image on `g`.
///
/// `pos_targets` holds the encoded ground truth for each entry of `sample.positives`.
/// Soft targets are read off the attention map as constants, so no gradient flows
/// through them; the attention nodes themselves stay differentiable.
pub fn build_loss(
    g: &mut Graph,
    model: &RpnModel,
    image: &Tensor,
    sample: &ProposalSample,
    pos_targets: &[BoxDelta],
    targets: NegativeTargets<'_>,
) -> Result<BuiltLoss> {
    if pos_targets.len() != sample.positives.len() {
        return Err(Error::contract(
            "build_loss",
            format!(
                "{} regression targets for {} positives",
                pos_targets.len(),
                sample.positives.len()
            ),
        ));
    }
    let fwd = model.forward(g, image)?;
    let (n_pos, n_neg) = (sample.positives.len(), sample.negatives.len());

    let mut attention = None;
    let neg_targets = match targets {
        NegativeTargets::Hard => vec![0.0; n_neg],
        NegativeTargets::Frozen(v) => {
            if v.len() != n_neg {
                return Err(Error::contract(
                    "build_loss",
                    format!("{} frozen targets for {n_neg} negatives", v.len()),
                ));
            }
            v.to_vec()
        }
        NegativeTargets::Soft { t } => {
            if n_pos > 0 && n_neg > 0 {
                let pe = g.gather_rows(fwd.embeddings, &sample.positives)?;
                let ne = g.gather_rows(fwd.embeddings, &sample.negatives)?;
                let (_, map) = attention_graph(g, ne, pe)?;
                let tg = negative_targets(Some(&map), n_neg, t);
                attention = Some(map);
                tg
            } else {
                vec![0.0; n_neg]
            }
        }
    };

    let zero = |g: &mut Graph| g.constant(&[1], vec![0.0]);
    let pos = if n_pos > 0 {
        let z = g.gather_rows(fwd.logits, &sample.positives)?;
        let s = g.bce_with_logits(z, &vec![1.0; n_pos])?;
        g.div_scalar(s, n_pos as f64)
    } else {
        zero(g)?
    };
    let neg = if n_neg > 0 {
        let z = g.gather_rows(fwd.logits, &sample.negatives)?;
        let s = g.bce_with_logits(z, &neg_targets)?;
        g.div_scalar(s, n_neg as f64)
    } else {
        zero(g)?
    };
    let reg = if n_pos > 0 {
        let d = g.gather_rows(fwd.deltas, &sample.positives)?;
        let flat: Vec<f64> = pos_targets.iter().flat_map(|t| t.to_array()).collect();
        let s = g.smooth_l1(d, &flat)?;
        g.div_scalar(s, n_pos as f64)
    } else {
        zero(g)?
    };
    let cls = g.add(pos, neg)?;
    let total = g.add(cls, reg)?;
    Ok(BuiltLoss {
        forward: fwd,
        terms: LossTerms { pos, neg, reg },
        total,
        attention,
        neg_targets,
    })
}
