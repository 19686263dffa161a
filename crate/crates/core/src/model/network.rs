use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    encode_delta, generate_anchors, match_anchors, Anchor, BBox, BoxDelta, Match, ProposalLabel,
};
use crate::numerics::{sigmoid, Graph, Tensor, Var};

/// Three stride-2 convolutions give an output stride of 8.
pub const FEATURE_STRIDE: usize = 8;

const BACKBONE_CHANNELS: [usize; 4] = [1, 8, 16, 32];
const RPN_CHANNELS: usize = 32;

/// Architecture hyperparameters that shape the parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-anchor embedding width.
    pub embed_dim: usize,
    /// One anchor per entry, so `na = anchor_scales.len()`.
    pub anchor_scales: Vec<f64>,
    pub anchor_aspect: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_aspect: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn num_anchors(&self) -> usize {
        self.anchor_scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.anchor_scales.is_empty() {
            return Err(Error::Config(
                "embed_dim and the anchor scale list must be non-empty".into(),
            ));
        }
        if self.anchor_scales.iter().any(|s| !(*s > 0.0)) || !(self.anchor_aspect > 0.0) {
            return Err(Error::Config("anchor scales and aspect must be positive".into()));
        }
        Ok(())
    }

    pub fn anchors(&self, image_h: usize, image_w: usize) -> Vec<Anchor> {
        generate_anchors(
            image_h / FEATURE_STRIDE,
            image_w / FEATURE_STRIDE,
            FEATURE_STRIDE,
            &self.anchor_scales,
            self.anchor_aspect,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// k×k×Cin×Cout
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(k: usize, cin: usize, cout: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            weight: Tensor::from_fn(&[k, k, cin, cout], |_| normal.sample(rng)).with_grad(),
            bias: Tensor::zeros(&[cout]).with_grad(),
        }
    }

    fn zeroed(k: usize, cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[k, k, cin, cout]).with_grad(),
            bias: Tensor::zeros(&[cout]).with_grad(),
        }
    }
}

/// Feature extractor: three 3×3 stride-2 convolutions (1→8→16→32), each followed by tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub layers: [ConvLayer; 3],
}

/// The RPN heads. `share` is 3×3 32→32, `reg` 1×1 32→na·4, `embed` 1×1 32→na·D and
/// `cls` a grouped 1×1 mapping each anchor's D-slice to one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnParams {
    pub share: ConvLayer,
    pub reg: ConvLayer,
    pub embed: ConvLayer,
    /// na×D
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnModel {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub rpn: RpnParams,
}

/// Graph handles for one forward pass, indexed by anchor in [`ModelConfig::anchors`] order.
#[derive(Debug, Clone)]
pub struct RpnForward {
    /// Parameter leaves in [`RpnModel::named_params`] order.
    pub params: Vec<Var>,
    /// N×1 objectness logits.
    pub logits: Var,
    /// N×4 box deltas.
    pub deltas: Var,
    /// N×D embeddings.
    pub embeddings: Var,
    pub feat_h: usize,
    pub feat_w: usize,
}

impl RpnModel {
    /// Gaussian fan-in initialisation for the trunk; the box and objectness heads start
    /// at std 0.01 so initial proposals sit on their anchors with p ≈ 0.5.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let na = config.num_anchors();
        let d = config.embed_dim;
        let fan = |k: usize, cin: usize| (1.0 / (k * k * cin) as f64).sqrt();
        let c = BACKBONE_CHANNELS;
        let layers = [0, 1, 2].map(|i| ConvLayer::init(3, c[i], c[i + 1], fan(3, c[i]), &mut rng));
        let share = ConvLayer::init(3, RPN_CHANNELS, RPN_CHANNELS, fan(3, RPN_CHANNELS), &mut rng);
        let reg = ConvLayer::init(1, RPN_CHANNELS, na * 4, 0.01, &mut rng);
        let embed = ConvLayer::init(1, RPN_CHANNELS, na * d, fan(1, RPN_CHANNELS), &mut rng);
        let normal = Normal::new(0.0, 0.01).unwrap();
        let cls_weight = Tensor::from_fn(&[na, d], |_| normal.sample(&mut rng)).with_grad();
        Ok(Self {
            backbone: BackboneParams { layers },
            rpn: RpnParams {
                share,
                reg,
                embed,
                cls_weight,
                cls_bias: Tensor::zeros(&[na]).with_grad(),
            },
            config,
        })
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let na = config.num_anchors();
        let d = config.embed_dim;
        let c = BACKBONE_CHANNELS;
        Ok(Self {
            backbone: BackboneParams {
                layers: [0, 1, 2].map(|i| ConvLayer::zeroed(3, c[i], c[i + 1])),
            },
            rpn: RpnParams {
                share: ConvLayer::zeroed(3, RPN_CHANNELS, RPN_CHANNELS),
                reg: ConvLayer::zeroed(1, RPN_CHANNELS, na * 4),
                embed: ConvLayer::zeroed(1, RPN_CHANNELS, na * d),
                cls_weight: Tensor::zeros(&[na, d]).with_grad(),
                cls_bias: Tensor::zeros(&[na]).with_grad(),
            },
            config,
        })
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let [l1, l2, l3] = &self.backbone.layers;
        let r = &self.rpn;
        vec![
            ("backbone.conv1.weight", &l1.weight),
            ("backbone.conv1.bias", &l1.bias),
            ("backbone.conv2.weight", &l2.weight),
            ("backbone.conv2.bias", &l2.bias),
            ("backbone.conv3.weight", &l3.weight),
            ("backbone.conv3.bias", &l3.bias),
            ("rpn.share.weight", &r.share.weight),
            ("rpn.share.bias", &r.share.bias),
            ("rpn.reg.weight", &r.reg.weight),
            ("rpn.reg.bias", &r.reg.bias),
            ("rpn.embed.weight", &r.embed.weight),
            ("rpn.embed.bias", &r.embed.bias),
            ("rpn.cls.weight", &r.cls_weight),
            ("rpn.cls.bias", &r.cls_bias),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let [l1, l2, l3] = &mut self.backbone.layers;
        let r = &mut self.rpn;
        vec![
            ("backbone.conv1.weight", &mut l1.weight),
            ("backbone.conv1.bias", &mut l1.bias),
            ("backbone.conv2.weight", &mut l2.weight),
            ("backbone.conv2.bias", &mut l2.bias),
            ("backbone.conv3.weight", &mut l3.weight),
            ("backbone.conv3.bias", &mut l3.bias),
            ("rpn.share.weight", &mut r.share.weight),
            ("rpn.share.bias", &mut r.share.bias),
            ("rpn.reg.weight", &mut r.reg.weight),
            ("rpn.reg.bias", &mut r.reg.bias),
            ("rpn.embed.weight", &mut r.embed.weight),
            ("rpn.embed.bias", &mut r.embed.bias),
            ("rpn.cls.weight", &mut r.cls_weight),
            ("rpn.cls.bias", &mut r.cls_bias),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records the forward pass for an H×W×1 image onto `g`.
    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<RpnForward> {
        let (h, w) = check_image(image)?;
        let params: Vec<Var> = self.named_params().iter().map(|(_, t)| g.leaf(t)).collect();
        let x = g.leaf(image);

        let conv = |g: &mut Graph, x: Var, wi: usize, stride: usize, pad: usize| -> Result<Var> {
            let y = g.conv2d(x, params[wi], stride, pad)?;
            g.add_channel_bias(y, params[wi + 1])
        };
        let mut feat = x;
        for layer in 0..3 {
            let y = conv(g, feat, layer * 2, 2, 1)?;
            feat = g.tanh(y);
        }
        let (fh, fw) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
        debug_assert_eq!(g.shape(feat), &[fh, fw, BACKBONE_CHANNELS[3]]);

        let shared = conv(g, feat, 6, 1, 1)?;
        let shared = g.tanh(shared);
        let reg = conv(g, shared, 8, 1, 0)?;
        let emb = conv(g, shared, 10, 1, 0)?;
        let cls = g.grouped_pointwise(emb, params[12])?;
        let cls = g.add_channel_bias(cls, params[13])?;

        let na = self.config.num_anchors();
        let n = fh * fw * na;
        Ok(RpnForward {
            logits: g.reshape(cls, &[n, 1])?,
            deltas: g.reshape(reg, &[n, 4])?,
            embeddings: g.reshape(emb, &[n, self.config.embed_dim])?,
            params,
            feat_h: fh,
            feat_w: fw,
        })
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[h, w, 1] if h % FEATURE_STRIDE == 0 && w % FEATURE_STRIDE == 0 && h >= 16 && w >= 16 => {
            Ok((h, w))
        }
        s => Err(Error::contract(
            "forward_rpn",
            format!("image must be H×W×1 with H, W ≥ 16 and divisible by 8, got {s:?}"),
        )),
    }
}

/// Per-anchor outputs of one forward pass, plus supervision once labels are assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBatch {
    pub anchors: Vec<Anchor>,
    pub logits: Vec<f64>,
    /// `sigmoid(logits)`
    pub objectness: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
    /// Row-major N×D.
    pub embeddings: Vec<f64>,
    pub embed_dim: usize,
    pub labels: Vec<ProposalLabel>,
    /// Regression target for positives.
    pub gt_deltas: Vec<Option<BoxDelta>>,
}

/// Runs the network on one image and collects per-anchor outputs. Labels start as
/// [`ProposalLabel::Ignore`] until [`ProposalBatch::assign`] is called.
pub fn forward_rpn(image: &Tensor, model: &RpnModel) -> Result<ProposalBatch> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, image)?;
    let anchors = model.config.anchors(image.shape()[0], image.shape()[1]);
    let logits = g.value(fwd.logits).to_vec();
    let n = logits.len();
    Ok(ProposalBatch {
        anchors,
        objectness: logits.iter().map(|&z| sigmoid(z)).collect(),
        logits,
        deltas: g.value(fwd.deltas).chunks_exact(4).map(BoxDelta::from_slice).collect(),
        embeddings: g.value(fwd.embeddings).to_vec(),
        embed_dim: model.config.embed_dim,
        labels: vec![ProposalLabel::Ignore; n],
        gt_deltas: vec![None; n],
    })
}

impl ProposalBatch {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Labels every anchor against `gt` and stores regression targets for positives.
    pub fn assign(&mut self, gt: &[BBox], pos_thresh: f64, neg_thresh: f64) -> Result<()> {
        let matches = match_anchors(&self.anchors, gt, pos_thresh, neg_thresh);
        self.gt_deltas = regression_targets(&self.anchors, gt, &matches)?;
        self.labels = matches.iter().map(|m| m.label).collect();
        Ok(())
    }

    pub fn indices_of(&self, label: ProposalLabel) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Keeps only the rows in `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> ProposalBatch {
        ProposalBatch {
            anchors: keep.iter().map(|&i| self.anchors[i]).collect(),
            logits: keep.iter().map(|&i| self.logits[i]).collect(),
            objectness: keep.iter().map(|&i| self.objectness[i]).collect(),
            deltas: keep.iter().map(|&i| self.deltas[i]).collect(),
            embeddings: keep.iter().flat_map(|&i| self.embedding(i).iter().copied()).collect(),
            embed_dim: self.embed_dim,
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            gt_deltas: keep.iter().map(|&i| self.gt_deltas[i]).collect(),
        }
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    /// Embedding rows for `rows` as a |rows|×D tensor; errors when `rows` is empty.
    pub fn embedding_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let data = rows.iter().flat_map(|&i| self.embedding(i).iter().copied()).collect();
        Tensor::new(vec![rows.len(), self.embed_dim], data)
    }
}

/// Encoded ground-truth deltas for positive matches, `None` elsewhere.
pub(crate) fn regression_targets(
    anchors: &[Anchor],
    gt: &[BBox],
    matches: &[Match],
) -> Result<Vec<Option<BoxDelta>>> {
    anchors
        .iter()
        .zip(matches)
        .map(|(a, m)| match (m.label, m.gt) {
            (ProposalLabel::Positive, Some(j)) => encode_delta(&a.bbox, &gt[j]).map(Some),
            _ => Ok(None),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(d: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: d,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn proposal_count_matches_grid() {
        let model = RpnModel::init(small_config(8), 1).unwrap();
        let image = Tensor::from_fn(&[64, 64, 1], |i| (i % 7) as f64 / 7.0);
        let batch = forward_rpn(&image, &model).unwrap();
        assert_eq!(batch.len(), 8 * 8 * 3);
        assert_eq!(batch.embeddings.len(), 192 * 8);
        assert_eq!(batch.anchors.len(), 192);
    }

    #[test]
    fn zero_model_on_zero_image_gives_half() {
        let model = RpnModel::zeros(small_config(4)).unwrap();
        let image = Tensor::zeros(&[32, 32, 1]);
        let batch = forward_rpn(&image, &model).unwrap();
        assert!(batch.objectness.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = RpnModel::init(small_config(8), 9).unwrap();
        let image = Tensor::from_fn(&[32, 48, 1], |i| ((i * 31) % 17) as f64 / 17.0);
        assert_eq!(forward_rpn(&image, &model).unwrap(), forward_rpn(&image, &model).unwrap());
    }

    #[test]
    fn rejects_bad_extents() {
        let model = RpnModel::init(small_config(4), 0).unwrap();
        assert!(forward_rpn(&Tensor::zeros(&[20, 16, 1]), &model).is_err());
        assert!(forward_rpn(&Tensor::zeros(&[8, 8, 1]), &model).is_err());
        assert!(forward_rpn(&Tensor::zeros(&[16, 16, 2]), &model).is_err());
    }

    #[test]
    fn objectness_reads_only_its_own_embedding() {
        // perturbing one anchor's embedding weights must leave other anchors' logits alone
        let mut model = RpnModel::init(small_config(4), 3).unwrap();
        let image = Tensor::from_fn(&[16, 16, 1], |i| (i % 5) as f64 / 5.0);
        let before = forward_rpn(&image, &model).unwrap();
        // output channels 4..8 of the embedding conv belong to anchor 1
        let cout = 3 * 4;
        let w = model.rpn.embed.weight.data_mut();
        for ci in 0..32 {
            for co in 4..8 {
                w[ci * cout + co] += 0.5;
            }
        }
        let after = forward_rpn(&image, &model).unwrap();
        for i in 0..before.len() {
            if i % 3 == 1 {
                assert_ne!(before.logits[i], after.logits[i]);
            } else {
                assert_eq!(before.logits[i], after.logits[i]);
            }
        }
    }
}
