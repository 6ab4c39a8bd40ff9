//! Training and inference mask synthesis: rectangles, ellipses, and jittered
//! object silhouettes.
//!
//! Training masks are drawn from a mixture (rect 0.375, ellipse 0.375,
//! object 0.25). Rect and ellipse coverage is uniform in `[0.1, 0.4]` and
//! object coverage in `[0.15, 0.35]`, so the expected edit area is a quarter
//! of the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{render_view, Pose, ToyItemSpec};
use crate::codec::{ImageTensor, MaskTensor};
use crate::error::{Error, Result};

pub const MIN_GRID: usize = 8;
const LUMA_THRESHOLD: f32 = 0.95;
const ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Rect,
    Ellipse,
    Object,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Rect => "rect",
            MaskKind::Ellipse => "ellipse",
            MaskKind::Object => "object",
        }
    }
}

/// Coverage interval as a fraction of the image area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageBounds {
    pub lo: f64,
    pub hi: f64,
}

impl CoverageBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("coverage bounds [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, c: f64) -> bool {
        c >= self.lo - 1e-12 && c <= self.hi + 1e-12
    }
}

/// Object-mask imperfections: dilate or erode by a radius in
/// `[0, max_radius]`, then stamp up to `max_blobs` small squares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    pub max_radius: usize,
    pub max_blobs: usize,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            max_radius: 2,
            max_blobs: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskMixture {
    pub rect_weight: f64,
    pub ellipse_weight: f64,
    pub object_weight: f64,
    pub rect_bounds: CoverageBounds,
    pub ellipse_bounds: CoverageBounds,
    pub object_bounds: CoverageBounds,
    pub jitter: Jitter,
}

impl Default for MaskMixture {
    fn default() -> Self {
        Self {
            rect_weight: 0.375,
            ellipse_weight: 0.375,
            object_weight: 0.25,
            rect_bounds: CoverageBounds { lo: 0.1, hi: 0.4 },
            ellipse_bounds: CoverageBounds { lo: 0.1, hi: 0.4 },
            object_bounds: CoverageBounds { lo: 0.15, hi: 0.35 },
            jitter: Jitter::default(),
        }
    }
}

impl MaskMixture {
    pub fn draw_kind(&self, rng: &mut impl Rng) -> MaskKind {
        let total = self.rect_weight + self.ellipse_weight + self.object_weight;
        let u = rng.random::<f64>() * total;
        if u < self.rect_weight {
            MaskKind::Rect
        } else if u < self.rect_weight + self.ellipse_weight {
            MaskKind::Ellipse
        } else {
            MaskKind::Object
        }
    }
}

/// Analytic mask geometry in pixel units (pixel `(y, x)` has its center at
/// `(y + 0.5, x + 0.5)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum MaskShape {
    Rect {
        cy: f64,
        cx: f64,
        half_h: f64,
        half_w: f64,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
}

impl MaskShape {
    pub fn kind(&self) -> MaskKind {
        match self {
            MaskShape::Rect { .. } => MaskKind::Rect,
            MaskShape::Ellipse { .. } => MaskKind::Ellipse,
        }
    }

    /// Pixel-center rasterization, clipped to the grid.
    pub fn rasterize(&self, h: usize, w: usize) -> MaskTensor {
        match *self {
            MaskShape::Rect {
                cy,
                cx,
                half_h,
                half_w,
            } => MaskTensor::from_fn(h, w, |y, x| {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                (py - cy).abs() <= half_h && (px - cx).abs() <= half_w
            }),
            MaskShape::Ellipse { cy, cx, ry, rx } => MaskTensor::from_fn(h, w, |y, x| {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dx * dx + dy * dy <= 1.0
            }),
        }
    }

    /// Same center, extents multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            MaskShape::Rect {
                cy,
                cx,
                half_h,
                half_w,
            } => MaskShape::Rect {
                cy,
                cx,
                half_h: half_h * factor,
                half_w: half_w * factor,
            },
            MaskShape::Ellipse { cy, cx, ry, rx } => MaskShape::Ellipse {
                cy,
                cx,
                ry: ry * factor,
                rx: rx * factor,
            },
        }
    }

    /// True when the shape extends past a `h × w` grid.
    pub fn exceeds(&self, h: usize, w: usize) -> bool {
        let (cy, cx, ey, ex) = match *self {
            MaskShape::Rect {
                cy,
                cx,
                half_h,
                half_w,
            } => (cy, cx, half_h, half_w),
            MaskShape::Ellipse { cy, cx, ry, rx } => (cy, cx, ry, rx),
        };
        cy - ey < 0.0 || cx - ex < 0.0 || cy + ey > h as f64 || cx + ex > w as f64
    }
}

fn check_grid(h: usize, w: usize) -> Result<()> {
    if h < MIN_GRID || w < MIN_GRID {
        return Err(Error::DegenerateSize { height: h, width: w });
    }
    Ok(())
}

fn infeasible(kind: &'static str, b: CoverageBounds, h: usize, w: usize) -> Error {
    Error::InfeasibleBounds {
        kind,
        lo: b.lo,
        hi: b.hi,
        height: h,
        width: w,
    }
}

/// Axis-aligned rectangle whose area fraction lies in `bounds`.
pub fn rect_mask(rng: &mut impl Rng, h: usize, w: usize, bounds: CoverageBounds) -> Result<MaskTensor> {
    check_grid(h, w)?;
    let total = (h * w) as f64;
    let min_px = (bounds.lo * total - 1e-9).ceil().max(1.0) as usize;
    let max_px = (bounds.hi * total + 1e-9).floor() as usize;
    let target = rng.random_range(bounds.lo..=bounds.hi) * total;
    let aspect = (rng.random_range(-1.0f64..=1.0) * std::f64::consts::LN_2).exp();
    let ideal_h = (target * aspect).sqrt().round().clamp(1.0, h as f64) as usize;
    // Try heights nearest the ideal first; for each, the feasible widths
    // form a contiguous range.
    let mut heights: Vec<usize> = (1..=h).collect();
    heights.sort_by_key(|&hh| (hh as isize - ideal_h as isize).unsigned_abs());
    for hh in heights {
        let lo_w = min_px.div_ceil(hh).max(1);
        let hi_w = (max_px / hh).min(w);
        if lo_w > hi_w {
            continue;
        }
        let ww = ((target / hh as f64).round() as usize).clamp(lo_w, hi_w);
        let y0 = rng.random_range(0..=h - hh);
        let x0 = rng.random_range(0..=w - ww);
        return Ok(MaskTensor::from_fn(h, w, |y, x| {
            (y0..y0 + hh).contains(&y) && (x0..x0 + ww).contains(&x)
        }));
    }
    Err(infeasible("rect", bounds, h, w))
}

/// Filled axis-aligned ellipse whose area fraction lies in `bounds`.
pub fn ellipse_mask(rng: &mut impl Rng, h: usize, w: usize, bounds: CoverageBounds) -> Result<MaskTensor> {
    check_grid(h, w)?;
    let total = (h * w) as f64;
    for _ in 0..ATTEMPTS {
        let target = rng.random_range(bounds.lo..=bounds.hi) * total;
        let aspect = (rng.random_range(-1.0f64..=1.0) * std::f64::consts::LN_2).exp();
        let ry = ((target / std::f64::consts::PI) * aspect).sqrt().min(h as f64 / 2.0);
        let rx = (target / std::f64::consts::PI / ry).min(w as f64 / 2.0);
        let cy = rng.random_range(ry..=h as f64 - ry);
        let cx = rng.random_range(rx..=w as f64 - rx);
        let m = MaskShape::Ellipse { cy, cx, ry, rx }.rasterize(h, w);
        if bounds.contains(m.coverage()) {
            return Ok(m);
        }
    }
    Err(infeasible("ellipse", bounds, h, w))
}

/// Pixels darker than the near-white background.
pub fn clean_segmentation(reference: &ImageTensor) -> MaskTensor {
    let (h, w) = (reference.height(), reference.width());
    MaskTensor::from_fn(h, w, |y, x| {
        let c = |k| (reference.pixel(k, y, x) + 1.0) / 2.0;
        0.2126 * c(0) + 0.7152 * c(1) + 0.0722 * c(2) < LUMA_THRESHOLD
    })
}

/// Chebyshev dilation (`grow`) or erosion of a mask by `r` pixels.
pub fn morph(m: &MaskTensor, r: usize, grow: bool) -> MaskTensor {
    let (h, w) = (m.height(), m.width());
    let r = r as isize;
    MaskTensor::from_fn(h, w, |y, x| {
        let mut any = false;
        let mut all = true;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                let v = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && m.get(yy as usize, xx as usize);
                any |= v;
                all &= v;
            }
        }
        if grow {
            any
        } else {
            all
        }
    })
}

/// Segmentation-style mask of the item in a white-background reference,
/// with random boundary jitter and blob noise.
pub fn object_mask(reference: &ImageTensor, rng: &mut impl Rng, jitter: Jitter) -> Result<MaskTensor> {
    let clean = clean_segmentation(reference);
    if clean.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let (h, w) = (clean.height(), clean.width());
    let radius = rng.random_range(0..=jitter.max_radius);
    let grow = rng.random_bool(0.5);
    let mut m = morph(&clean, radius, grow);
    if m.is_empty() {
        m = clean.clone();
    }
    let fg: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| clean.get(y, x))
        .collect();
    let blobs = rng.random_range(0..=jitter.max_blobs);
    let mut stamps = Vec::with_capacity(blobs);
    for _ in 0..blobs {
        let (cy, cx) = fg[rng.random_range(0..fg.len())];
        let r = rng.random_range(1..=jitter.max_radius.max(1)).min(jitter.max_radius) as isize;
        stamps.push((cy as isize, cx as isize, r));
    }
    Ok(MaskTensor::from_fn(h, w, |y, x| {
        m.get(y, x)
            || stamps.iter().any(|&(cy, cx, r)| {
                (y as isize - cy).abs() <= r && (x as isize - cx).abs() <= r
            })
    }))
}

/// Mean clean-segmentation pixel count over reference views.
pub fn object_footprint(views: &[ImageTensor]) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let total: usize = views.iter().map(|v| clean_segmentation(v).count()).sum();
    Ok(total as f64 / views.len() as f64)
}

/// An object-shaped mask from a random item silhouette sized to `bounds`.
fn synthetic_object_mask(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    bounds: CoverageBounds,
    jitter: Jitter,
) -> Result<MaskTensor> {
    let side = h.max(w);
    for _ in 0..ATTEMPTS / 10 {
        let spec = ToyItemSpec::generate(rng.random(), false);
        let target = rng.random_range(bounds.lo..=bounds.hi);
        let probe = Pose {
            angle: rng.random_range(-0.6..0.6),
            scale: 0.5,
            offset: [0.0, 0.0],
        };
        let base = clean_segmentation(&render_view(&spec, &probe, side)).coverage();
        if base == 0.0 {
            continue;
        }
        let scale = (0.5 * (target / base).sqrt()) as f32;
        let reach = (1.0 - scale * 0.8).max(0.0);
        let pose = Pose {
            scale,
            offset: [rng.random_range(-reach..=reach), rng.random_range(-reach..=reach)],
            ..probe
        };
        let view = render_view(&spec, &pose, side).crop(0, h, 0, w);
        let mut inner = ChaCha8Rng::seed_from_u64(rng.random());
        let Ok(m) = object_mask(&view, &mut inner, jitter) else {
            continue;
        };
        if bounds.contains(m.coverage()) {
            return Ok(m);
        }
    }
    Err(infeasible("object", bounds, h, w))
}

/// A mask drawn from the training mixture, with its kind.
pub fn sample_training_mask(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    mix: &MaskMixture,
) -> Result<(MaskKind, MaskTensor)> {
    check_grid(h, w)?;
    let kind = mix.draw_kind(rng);
    let m = match kind {
        MaskKind::Rect => rect_mask(rng, h, w, mix.rect_bounds)?,
        MaskKind::Ellipse => ellipse_mask(rng, h, w, mix.ellipse_bounds)?,
        MaskKind::Object => synthetic_object_mask(rng, h, w, mix.object_bounds, mix.jitter)?,
    };
    Ok((kind, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn square_reference(size: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> ImageTensor {
        let t = Tensor::from_fn(&[3, size, size], |i| {
            let p = i % (size * size);
            let (y, x) = (p / size, p % size);
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                -1.0
            } else {
                1.0
            }
        });
        ImageTensor::new(t).unwrap()
    }

    #[test]
    fn full_rect_for_unit_bounds() {
        let m = rect_mask(&mut rng(0), 16, 16, CoverageBounds::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(m.count(), 256);
    }

    #[test]
    fn rects_fill_their_bounding_box_and_respect_bounds() {
        let b = CoverageBounds::new(0.1, 0.4).unwrap();
        let mut r = rng(1);
        for _ in 0..1000 {
            let m = rect_mask(&mut r, 32, 24, b).unwrap();
            let (y0, y1, x0, x1) = m.bounding_box().unwrap();
            assert_eq!(m.count(), (y1 - y0) * (x1 - x0));
            assert!(b.contains(m.coverage()), "coverage {}", m.coverage());
        }
    }

    #[test]
    fn infeasible_and_degenerate() {
        let b = CoverageBounds::new(0.9, 0.95).unwrap();
        assert!(matches!(
            ellipse_mask(&mut rng(2), 16, 16, b),
            Err(Error::InfeasibleBounds { kind: "ellipse", .. })
        ));
        assert!(matches!(
            rect_mask(&mut rng(2), 4, 16, b),
            Err(Error::DegenerateSize { .. })
        ));
        assert!(CoverageBounds::new(0.0, 0.5).is_err());
        assert!(CoverageBounds::new(0.5, 0.4).is_err());
    }

    #[test]
    fn ellipse_geometry() {
        let m = MaskShape::Ellipse {
            cy: 32.0,
            cx: 32.0,
            ry: 32.0,
            rx: 32.0,
        }
        .rasterize(64, 64);
        assert!((m.coverage() - std::f64::consts::FRAC_PI_4).abs() < 0.02);
        // centered ellipse is symmetric under both flips
        let m = MaskShape::Ellipse {
            cy: 12.0,
            cx: 10.0,
            ry: 7.3,
            rx: 5.1,
        }
        .rasterize(24, 20);
        for y in 0..24 {
            for x in 0..20 {
                assert_eq!(m.get(y, x), m.get(23 - y, x));
                assert_eq!(m.get(y, x), m.get(y, 19 - x));
            }
        }
        let b = CoverageBounds::new(0.1, 0.4).unwrap();
        let mut r = rng(3);
        for _ in 0..300 {
            let m = ellipse_mask(&mut r, 32, 32, b).unwrap();
            assert!(b.contains(m.coverage()));
        }
    }

    #[test]
    fn object_mask_morphology_bounds() {
        let reference = square_reference(32, 8, 24, 8, 24);
        let clean = clean_segmentation(&reference);
        assert_eq!(clean.count(), 256);
        let inner = MaskTensor::<f32>::from_fn(32, 32, |y, x| (10..22).contains(&y) && (10..22).contains(&x));
        let outer = MaskTensor::<f32>::from_fn(32, 32, |y, x| (6..26).contains(&y) && (6..26).contains(&x));
        let mut distinct = std::collections::BTreeSet::new();
        for seed in 0..50 {
            let m = object_mask(&reference, &mut rng(seed), Jitter::default()).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    if inner.get(y, x) {
                        assert!(m.get(y, x));
                    }
                    if m.get(y, x) {
                        assert!(outer.get(y, x));
                    }
                }
            }
            let inter = (0..32 * 32).filter(|i| m.get(i / 32, i % 32) && clean.get(i / 32, i % 32)).count();
            let union = (0..32 * 32).filter(|i| m.get(i / 32, i % 32) || clean.get(i / 32, i % 32)).count();
            assert!(inter as f64 / union as f64 > 0.5);
            distinct.insert(m.tensor().data().iter().map(|&v| v as u8).collect::<Vec<_>>());
        }
        assert!(distinct.len() > 1);
    }

    #[test]
    fn all_white_reference_has_no_foreground() {
        let white = ImageTensor::filled(16, 16, 1.0);
        assert!(matches!(
            object_mask(&white, &mut rng(0), Jitter::default()),
            Err(Error::EmptyForeground)
        ));
    }

    #[test]
    fn training_masks_are_seeded_and_within_kind_bounds() {
        let mix = MaskMixture::default();
        let mut r = rng(4);
        for _ in 0..200 {
            let (kind, m) = sample_training_mask(&mut r, 32, 32, &mix).unwrap();
            let b = match kind {
                MaskKind::Rect => mix.rect_bounds,
                MaskKind::Ellipse => mix.ellipse_bounds,
                MaskKind::Object => mix.object_bounds,
            };
            assert!(b.contains(m.coverage()), "{kind:?} {}", m.coverage());
        }
        let a = sample_training_mask(&mut rng(9), 32, 32, &mix).unwrap();
        let b = sample_training_mask(&mut rng(9), 32, 32, &mix).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_serializes_with_kind_and_params() {
        let s = MaskShape::Rect {
            cy: 1.0,
            cx: 2.0,
            half_h: 3.0,
            half_w: 4.0,
        };
        let j = serde_json::to_value(s).unwrap();
        assert_eq!(j["kind"], "rect");
        assert_eq!(j["params"]["half_w"], 4.0);
    }
}
