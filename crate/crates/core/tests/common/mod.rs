#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softrpn::data::{synthesize_scene, Ellipse, SceneSpec};
use softrpn::geometry::{encode_delta, match_anchors, BBox, BoxDelta, ProposalLabel};
use softrpn::model::{
    attention_graph, build_loss, sample_proposals, ModelConfig, NegativeTargets, ProposalSample,
    RpnModel,
};
use softrpn::numerics::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).with_grad()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Worst relative error between the tape gradient and central differences of
/// `f(inputs) = Σ build(inputs) ⊙ R` for a fixed random `R`.
pub fn op_grad_error(
    seed: u64,
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let eval = |ins: &[Tensor], backward: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &vars);
        let n = g.value(out).len();
        let mut r = rng(seed ^ 0x5eed);
        let weights: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let shape = g.shape(out).to_vec();
        let w = g.constant(&shape, weights).unwrap();
        let m = g.mul(out, w).unwrap();
        let s = g.sum(m);
        let value = g.scalar(s);
        if !backward {
            return (value, Vec::new());
        }
        g.backward(s).unwrap();
        let grads = vars
            .iter()
            .zip(ins)
            .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][k], fd));
        }
    }
    worst
}

/// A 16×16 scene with two objects and their boxes.
pub fn tiny_scene() -> (Tensor, Vec<BBox>) {
    let spec = SceneSpec {
        height: 16,
        width: 16,
        objects: vec![
            Ellipse { cx: 5.0, cy: 5.0, semi_x: 4.0, semi_y: 3.5, rotation: 0.3, intensity: 0.9 },
            Ellipse { cx: 11.0, cy: 10.0, semi_x: 4.5, semi_y: 4.0, rotation: 1.1, intensity: 0.6 },
        ],
        background: 0.2,
        noise_sigma: 0.03,
        seed: 3,
    };
    let (img, boxes) = synthesize_scene(&spec).unwrap();
    (img.to_tensor(), boxes)
}

/// Worst relative error over every parameter entry between the tape gradient of the
/// scalar built by `f` and central differences. Returns the error and the entry count.
pub fn model_grad_error(
    model: &RpnModel,
    f: impl Fn(&mut Graph, &RpnModel) -> (Var, Vec<Var>),
) -> (f64, usize) {
    let mut g = Graph::new();
    let (loss, params) = f(&mut g, model);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .zip(model.named_params())
        .map(|(&v, (_, t))| g.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let value = |m: &RpnModel| {
        let mut g = Graph::new();
        let (loss, _) = f(&mut g, m);
        g.scalar(loss)
    };
    let mut worst = 0.0f64;
    let mut count = 0;
    for (p, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let mut plus = model.clone();
            plus.named_params_mut()[p].1.data_mut()[k] += FD_STEP;
            let mut minus = model.clone();
            minus.named_params_mut()[p].1.data_mut()[k] -= FD_STEP;
            let fd = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, fd));
            count += 1;
        }
    }
    (worst, count)
}

pub struct TinyProblem {
    pub image: Tensor,
    pub model: RpnModel,
    pub sample: ProposalSample,
    pub pos_targets: Vec<BoxDelta>,
}

/// The tiny scene with a D = 8, na = 3 model and every labelled anchor sampled.
pub fn tiny_problem(seed: u64) -> TinyProblem {
    let (image, boxes) = tiny_scene();
    let config = ModelConfig { embed_dim: 8, ..ModelConfig::default() };
    let anchors = config.anchors(16, 16);
    let matches = match_anchors(&anchors, &boxes, 0.7, 0.3);
    let labels: Vec<ProposalLabel> = matches.iter().map(|m| m.label).collect();
    let sample = sample_proposals(&labels, anchors.len(), 0.5, seed);
    let pos_targets = sample
        .positives
        .iter()
        .map(|&i| encode_delta(&anchors[i].bbox, &boxes[matches[i].gt.unwrap()]).unwrap())
        .collect();
    TinyProblem {
        image,
        model: RpnModel::init(config, seed).unwrap(),
        sample,
        pos_targets,
    }
}

/// Full loss with soft targets from `t`, frozen so the finite-difference oracle sees
/// the same constant targets as the tape. Returns (error, entries, flagged negatives).
pub fn full_loss_grad_error(seed: u64, t: f64) -> (f64, usize, usize) {
    let p = tiny_problem(seed);
    let mut g = Graph::new();
    let soft = build_loss(&mut g, &p.model, &p.image, &p.sample, &p.pos_targets, NegativeTargets::Soft { t })
        .unwrap();
    let frozen = soft.neg_targets.clone();
    let flagged = frozen.iter().filter(|&&y| y > 0.0).count();
    let (err, n) = model_grad_error(&p.model, |g, m| {
        let b = build_loss(g, m, &p.image, &p.sample, &p.pos_targets, NegativeTargets::Frozen(&frozen))
            .unwrap();
        (b.total, b.forward.params)
    });
    (err, n, flagged)
}

/// Gradient of `Σ A ⊙ R` through the attention map into every parameter.
pub fn attention_grad_error(seed: u64) -> (f64, usize) {
    let p = tiny_problem(seed);
    let mut r = rng(seed ^ 0xa77e);
    let weights: Vec<f64> = (0..p.sample.negatives.len() * p.sample.positives.len())
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    model_grad_error(&p.model, |g, m| {
        let fwd = m.forward(g, &p.image).unwrap();
        let pe = g.gather_rows(fwd.embeddings, &p.sample.positives).unwrap();
        let ne = g.gather_rows(fwd.embeddings, &p.sample.negatives).unwrap();
        let (a, _) = attention_graph(g, ne, pe).unwrap();
        let shape = g.shape(a).to_vec();
        let w = g.constant(&shape, weights.clone()).unwrap();
        let prod = g.mul(a, w).unwrap();
        (g.sum(prod), fwd.params)
    })
}

use softrpn::data::{Annotation, Category, CocoLite, ImageInfo};
use softrpn::geometry::iou;
use softrpn::harness::Detection;

/// Random COCO-lite file with quarter-pixel boxes, so corner/extent conversion is exact.
pub fn random_cocolite(seed: u64) -> CocoLite {
    let mut r = rng(seed);
    let n_images = r.random_range(0..6usize);
    let images: Vec<ImageInfo> = (0..n_images)
        .map(|i| ImageInfo {
            id: 10 * i as u64 + r.random_range(0..10u64),
            file_name: format!("images/{i:06}.pgm"),
            height: 8 * r.random_range(2..10usize),
            width: 8 * r.random_range(2..10usize),
        })
        .collect();
    let categories = vec![Category::flake(), Category { id: 7, name: "other".into() }];
    let mut annotations = Vec::new();
    if !images.is_empty() {
        for id in 0..r.random_range(0..20u64) {
            let q = |r: &mut ChaCha8Rng, hi: u32| r.random_range(0..hi) as f64 / 4.0;
            let (x, y) = (q(&mut r, 200), q(&mut r, 200));
            let (w, h) = (q(&mut r, 100), q(&mut r, 100));
            annotations.push(Annotation {
                id: 3 * id,
                image_id: images[r.random_range(0..images.len())].id,
                bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                category_id: if r.random::<f64>() < 0.8 { 1 } else { 7 },
                dropped: r.random(),
            });
        }
    }
    CocoLite { images, annotations, categories }
}

/// Random toy AP instance: up to 8 detections and 1..=5 ground-truth boxes over two
/// images on a small canvas so overlaps are common.
pub fn random_ap_instance(seed: u64) -> (Vec<Detection>, Vec<Vec<BBox>>) {
    let mut r = rng(seed);
    let rand_box = |r: &mut ChaCha8Rng| {
        let (x, y) = (r.random_range(0.0..20.0), r.random_range(0.0..20.0));
        let (w, h) = (r.random_range(2.0..12.0), r.random_range(2.0..12.0));
        BBox::new(x, y, x + w, y + h).unwrap()
    };
    let n_gt = r.random_range(1..=5usize);
    let mut gt = vec![Vec::new(), Vec::new()];
    for _ in 0..n_gt {
        let b = rand_box(&mut r);
        gt[r.random_range(0..2usize)].push(b);
    }
    let n_det = r.random_range(0..=8usize);
    let dets = (0..n_det)
        .map(|_| {
            let image = r.random_range(0..2usize);
            // half the detections are jittered copies of a gt box
            let bbox = match gt[image].len() {
                n if n > 0 && r.random::<bool>() => {
                    let g = gt[image][r.random_range(0..n)];
                    let j = |r: &mut ChaCha8Rng| r.random_range(-2.0..2.0);
                    let (x1, y1) = (g.x1 + j(&mut r), g.y1 + j(&mut r));
                    BBox::new(x1, y1, x1 + g.width() + j(&mut r).abs(), y1 + g.height() + j(&mut r).abs())
                        .unwrap()
                }
                _ => rand_box(&mut r),
            };
            Detection { image, bbox, score: r.random() }
        })
        .collect();
    (dets, gt)
}

/// AP by brute force: for every recall level m/n_gt, the best precision over all
/// confidence cutoffs reaching it. Each cutoff re-runs greedy matching from scratch.
pub fn brute_force_ap(dets: &[Detection], gt: &[Vec<BBox>], thresh: f64) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut cutoffs = Vec::new(); // (true positives, kept)
    for k in 1..=order.len() {
        let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &d in &order[..k] {
            let det = &dets[d];
            let mut best = None;
            let mut best_iou = thresh;
            for (j, g) in gt[det.image].iter().enumerate() {
                let o = iou(&det.bbox, g);
                if !used[det.image][j] && o >= best_iou && (best.is_none() || o > best_iou) {
                    best = Some(j);
                    best_iou = o;
                }
            }
            if let Some(j) = best {
                used[det.image][j] = true;
                tp += 1;
            }
        }
        cutoffs.push((tp, k));
    }
    let mut sum = 0.0;
    for m in 1..=n_gt {
        let best = cutoffs
            .iter()
            .filter(|(tp, _)| *tp >= m)
            .map(|&(tp, k)| tp as f64 / k as f64)
            .fold(0.0, f64::max);
        sum += best;
    }
    if n_gt == 0 { 0.0 } else { sum / n_gt as f64 }
}
