use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pgm::GrayImage;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// One filled ellipse. `semi_x`/`semi_y` are the semi-axes before rotation by
/// `rotation` radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub rotation: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rotation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }

    /// Analytic axis-aligned half extents of the rotated ellipse.
    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (a, b) = (self.semi_x, self.semi_y);
        (
            ((a * c).powi(2) + (b * s).powi(2)).sqrt(),
            ((a * s).powi(2) + (b * c).powi(2)).sqrt(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Painted in order; later objects occlude earlier ones.
    pub objects: Vec<Ellipse>,
    pub background: f64,
    pub noise_sigma: f64,
    /// Seeds the pixel noise.
    pub seed: u64,
}

/// Ranges for randomly drawn scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_semi_axis: f64,
    pub max_semi_axis: f64,
    pub min_intensity: f64,
    pub max_intensity: f64,
    pub background: f64,
    pub noise_sigma: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 6,
            max_objects: 14,
            min_semi_axis: 5.0,
            max_semi_axis: 12.0,
            min_intensity: 0.45,
            max_intensity: 0.95,
            background: 0.2,
            noise_sigma: 0.04,
        }
    }
}

impl SceneSpec {
    pub fn random(params: &SceneParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(params.min_objects..=params.max_objects);
        let margin = 4.0;
        let objects = (0..n)
            .map(|_| Ellipse {
                cx: rng.random_range(margin..params.width as f64 - margin),
                cy: rng.random_range(margin..params.height as f64 - margin),
                semi_x: rng.random_range(params.min_semi_axis..=params.max_semi_axis),
                semi_y: rng.random_range(params.min_semi_axis..=params.max_semi_axis),
                rotation: rng.random_range(0.0..std::f64::consts::PI),
                intensity: rng.random_range(params.min_intensity..=params.max_intensity),
            })
            .collect();
        Self {
            height: params.height,
            width: params.width,
            objects,
            background: params.background,
            noise_sigma: params.noise_sigma,
            seed: rng.random(),
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// Fraction of a pixel's sub-samples inside the ellipse, over the ellipse's
/// bounding window; `None` entries fall outside the window.
struct Coverage {
    x0: usize,
    y0: usize,
    w: usize,
    values: Vec<f64>,
}

fn coverage(obj: &Ellipse, width: usize, height: usize) -> Option<Coverage> {
    let (hx, hy) = obj.half_extents();
    let x0 = (obj.cx - hx).floor().max(0.0) as usize;
    let y0 = (obj.cy - hy).floor().max(0.0) as usize;
    let x1 = ((obj.cx + hx).ceil() as usize).min(width);
    let y1 = ((obj.cy + hy).ceil() as usize).min(height);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let w = x1 - x0;
    let step = 1.0 / SUPERSAMPLE as f64;
    let per_pixel = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut values = Vec::with_capacity(w * (y1 - y0));
    for py in y0..y1 {
        for px in x0..x1 {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    hits += obj.contains(x, y) as usize;
                }
            }
            values.push(hits as f64 / per_pixel);
        }
    }
    Some(Coverage { x0, y0, w, values })
}

/// Composites the scene without noise; also returns each object's pixel-tight box
/// (pixels with non-zero coverage), or `None` if the object covers no pixel.
fn composite(spec: &SceneSpec) -> (Vec<f64>, Vec<Option<BBox>>) {
    let (w, h) = (spec.width, spec.height);
    let mut img = vec![spec.background; w * h];
    let mut boxes = Vec::with_capacity(spec.objects.len());
    for obj in &spec.objects {
        let Some(cov) = coverage(obj, w, h) else {
            boxes.push(None);
            continue;
        };
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (i, &c) in cov.values.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let (px, py) = (cov.x0 + i % cov.w, cov.y0 + i / cov.w);
            let p = &mut img[py * w + px];
            *p = *p * (1.0 - c) + obj.intensity * c;
            bounds = Some(match bounds {
                None => (px, py, px, py),
                Some((a, b, c2, d)) => (a.min(px), b.min(py), c2.max(px), d.max(py)),
            });
        }
        boxes.push(bounds.map(|(x1, y1, x2, y2)| BBox {
            x1: x1 as f64,
            y1: y1 as f64,
            x2: (x2 + 1) as f64,
            y2: (y2 + 1) as f64,
        }));
    }
    (img, boxes)
}

/// Noise-free render in `[0, 1]` before quantisation.
pub fn render_noiseless(spec: &SceneSpec) -> Vec<f64> {
    composite(spec).0
}

/// Renders anti-aliased ellipses over a flat background with Gaussian pixel noise and
/// returns the 8-bit image with one pixel-tight box per visible object, in object order.
pub fn synthesize_scene(spec: &SceneSpec) -> Result<(GrayImage, Vec<BBox>)> {
    if spec.height % 8 != 0 || spec.width % 8 != 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::contract(
            "synthesize_scene",
            format!("extent {}×{} must be a positive multiple of 8", spec.height, spec.width),
        ));
    }
    if spec.objects.iter().any(|o| !(o.semi_x > 0.0 && o.semi_y > 0.0)) {
        return Err(Error::contract("synthesize_scene", "ellipse axes must be positive"));
    }
    let (mut img, boxes) = composite(spec);
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| {
            Error::contract("synthesize_scene", format!("noise sigma: {e}"))
        })?;
        img.iter_mut().for_each(|p| *p += noise.sample(&mut rng));
    }
    let pixels = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let image = GrayImage::new(spec.width, spec.height, pixels)?;
    Ok((image, boxes.into_iter().flatten().collect()))
}

/// Withholds each box independently with probability `drop_rate`. A non-empty input
/// always keeps at least one box: the draw repeats until that holds.
pub fn drop_annotations(boxes: &[BBox], drop_rate: f64, seed: u64) -> Result<(Vec<BBox>, Vec<BBox>)> {
    let mask = drop_mask(boxes.len(), drop_rate, seed)?;
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for (b, &d) in boxes.iter().zip(&mask) {
        if d {
            dropped.push(*b);
        } else {
            kept.push(*b);
        }
    }
    Ok((kept, dropped))
}

/// `true` marks a withheld annotation.
pub fn drop_mask(n: usize, drop_rate: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::contract(
            "drop_annotations",
            format!("drop rate {drop_rate} outside [0, 1)"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < drop_rate).collect();
        if n == 0 || mask.iter().any(|d| !d) {
            return Ok(mask);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn blank(objects: Vec<Ellipse>, noise: f64) -> SceneSpec {
        SceneSpec {
            height: 64,
            width: 64,
            objects,
            background: 0.2,
            noise_sigma: noise,
            seed: 5,
        }
    }

    #[test]
    fn empty_scene_is_noise_only() {
        let (img, boxes) = synthesize_scene(&blank(vec![], 0.05)).unwrap();
        assert!(boxes.is_empty());
        let distinct: std::collections::BTreeSet<u8> = img.pixels().iter().copied().collect();
        assert!(distinct.len() > 3, "noise should vary pixels");
    }

    #[test]
    fn centered_circle_has_16px_box() {
        let obj = Ellipse {
            cx: 32.0,
            cy: 32.0,
            semi_x: 8.0,
            semi_y: 8.0,
            rotation: 0.0,
            intensity: 0.9,
        };
        let (_, boxes) = synthesize_scene(&blank(vec![obj], 0.0)).unwrap();
        let b = boxes[0];
        assert!((b.width() - 16.0).abs() <= 1.0 && (b.height() - 16.0).abs() <= 1.0);
        let (cx, cy) = b.center();
        assert!((cx - 32.0).abs() <= 1.0 && (cy - 32.0).abs() <= 1.0);
    }

    #[test]
    fn same_seed_same_pixels() {
        let spec = SceneSpec::random(&SceneParams::default(), 11);
        let a = synthesize_scene(&spec).unwrap();
        let b = synthesize_scene(&SceneSpec::random(&SceneParams::default(), 11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, synthesize_scene(&SceneSpec::random(&SceneParams::default(), 12)).unwrap().0);
    }

    #[test]
    fn rejects_bad_extent() {
        let mut spec = blank(vec![], 0.0);
        spec.height = 60;
        assert!(synthesize_scene(&spec).is_err());
    }

    #[test]
    fn boxes_match_pixel_scan_of_isolated_render() {
        for seed in 0..20 {
            let spec = SceneSpec::random(&SceneParams::default(), seed);
            let (_, boxes) = synthesize_scene(&spec).unwrap();
            assert_eq!(boxes.len(), spec.objects.len());
            for (obj, b) in spec.objects.iter().zip(&boxes) {
                // render the object alone on black, scan for lit pixels
                let alone = SceneSpec {
                    objects: vec![*obj],
                    background: 0.0,
                    noise_sigma: 0.0,
                    ..spec.clone()
                };
                let img = render_noiseless(&alone);
                let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
                for y in 0..64 {
                    for x in 0..64 {
                        if img[y * 64 + x] > 0.0 {
                            x1 = x1.min(x);
                            y1 = y1.min(y);
                            x2 = x2.max(x + 1);
                            y2 = y2.max(y + 1);
                        }
                    }
                }
                let scan = BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap();
                assert!(iou(b, &scan) >= 0.9, "seed {seed}: {b:?} vs {scan:?}");
            }
        }
    }

    #[test]
    fn drop_rate_zero_keeps_everything() {
        let boxes: Vec<BBox> = (0..20).map(|i| BBox::from_center(i as f64, 0.0, 2.0, 2.0)).collect();
        let (kept, dropped) = drop_annotations(&boxes, 0.0, 3).unwrap();
        assert_eq!(kept, boxes);
        assert!(dropped.is_empty());
    }

    #[test]
    fn drop_fraction_concentrates() {
        let boxes: Vec<BBox> = (0..10_000).map(|i| BBox::from_center(i as f64, 0.0, 2.0, 2.0)).collect();
        let (kept, dropped) = drop_annotations(&boxes, 0.5, 17).unwrap();
        // binomial sd = 0.005, tolerance is four sd
        let frac = kept.len() as f64 / boxes.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
        assert_eq!(kept.len() + dropped.len(), boxes.len());
    }

    #[test]
    fn always_keeps_one_box() {
        let boxes = vec![BBox::from_center(1.0, 1.0, 2.0, 2.0); 2];
        for seed in 0..200 {
            let (kept, _) = drop_annotations(&boxes, 0.95, seed).unwrap();
            assert!(!kept.is_empty());
        }
        assert!(drop_annotations(&boxes, 1.0, 0).is_err());
    }
}
