//! Procedural toy catalog: items rendered from several poses on white, and
//! cluttered context scenes with captions.
//!
//! Items live in a canonical square `[-1, 1]²`. A view maps each output
//! pixel back into that square through an inverse rotation/scale/offset and
//! averages a 3×3 grid of subsamples, so edges are antialiased and the
//! background stays exactly white.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{ImageTensor, LatentCodec, SpaceToDepth};
use crate::error::{Error, Result};
use crate::masks::{object_footprint, MaskShape};
use crate::tensor::Tensor;

pub const DEFAULT_SIZE: usize = 32;
pub const MIN_VIEWS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Box,
    Disc,
    Tee,
    Vessel,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [Self::Box, Self::Disc, Self::Tee, Self::Vessel];

    /// Class nouns that appear in pretraining captions.
    pub fn common_nouns(self) -> &'static [&'static str] {
        match self {
            Self::Box => &["couch", "cabinet"],
            Self::Disc => &["clock", "plate"],
            Self::Tee => &["shirt", "sweater"],
            Self::Vessel => &["vase", "lamp"],
        }
    }

    /// A class noun that never appears in pretraining captions.
    pub fn rare_noun(self) -> &'static str {
        match self {
            Self::Box => "crate",
            Self::Disc => "drum",
            Self::Tee => "armor",
            Self::Vessel => "urn",
        }
    }

    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Self::Box => u.abs() < 0.8 && v.abs() < 0.6,
            Self::Disc => u * u + v * v < 0.64,
            Self::Tee => {
                (u.abs() < 0.9 && (-0.8..-0.3).contains(&v)) || (u.abs() < 0.42 && (-0.3..0.8).contains(&v))
            }
            Self::Vessel => {
                let body = (u / 0.62).powi(2) + ((v - 0.2) / 0.62).powi(2) < 1.0;
                let neck = u.abs() < 0.24 && (-0.85..-0.2).contains(&v);
                body || neck
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Stripes,
    Dots,
    Plain,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Self::Stripes, Self::Dots, Self::Plain];

    pub fn adjective(self) -> &'static str {
        match self {
            Self::Stripes => "striped",
            Self::Dots => "dotted",
            Self::Plain => "plain",
        }
    }
}

pub const COLORS: [(&str, [f32; 3]); 10] = [
    ("red", [0.85, 0.15, 0.15]),
    ("blue", [0.15, 0.3, 0.85]),
    ("green", [0.2, 0.65, 0.25]),
    ("yellow", [0.95, 0.8, 0.15]),
    ("purple", [0.55, 0.25, 0.7]),
    ("orange", [0.95, 0.5, 0.1]),
    ("teal", [0.1, 0.6, 0.6]),
    ("brown", [0.5, 0.3, 0.15]),
    ("pink", [0.95, 0.45, 0.65]),
    ("gray", [0.45, 0.45, 0.5]),
];

pub const GLYPHS: usize = 8;
const LOGO_TARGET: f64 = 0.07;
const MEASURE_GRID: usize = 160;

fn luminance(c: [f32; 3]) -> f32 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

/// Glyph membership on local coordinates in `[-1, 1]²`.
fn glyph_contains(glyph: u8, x: f32, y: f32) -> bool {
    if x.abs() > 1.0 || y.abs() > 1.0 {
        return false;
    }
    match glyph % GLYPHS as u8 {
        0 => x.abs() < 0.3 || y.abs() < 0.3,
        1 => {
            let r = (x * x + y * y).sqrt();
            (0.5..1.0).contains(&r)
        }
        2 => x.abs() <= (y + 1.0) / 2.0,
        3 => x.abs() + y.abs() <= 1.0,
        4 => (0.2..0.7).contains(&x.abs()),
        5 => (x.abs() - y.abs()).abs() < 0.35,
        6 => x < -0.3 || y > 0.4,
        _ => x.abs().max(y.abs()) > 0.55,
    }
}

/// Procedural description of one catalog item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyItemSpec {
    pub seed: u64,
    pub family: ShapeFamily,
    pub color: String,
    pub rgb: [f32; 3],
    pub pattern: Pattern,
    /// Stripe orientation in radians, or dot-grid phase.
    pub pattern_angle: f32,
    pub pattern_freq: f32,
    pub logo_glyph: u8,
    pub logo_center: [f32; 2],
    pub logo_half: f32,
    pub ink: [f32; 3],
    pub class_noun: String,
    pub title: String,
    pub rare: bool,
}

impl ToyItemSpec {
    /// Seeded item; `rare` picks the family's rare class noun.
    pub fn generate(seed: u64, rare: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7159_17E3);
        let family = *ShapeFamily::ALL.choose(&mut rng).expect("non-empty");
        let (color, rgb) = COLORS[rng.random_range(0..COLORS.len())];
        let pattern = *Pattern::ALL.choose(&mut rng).expect("non-empty");
        let class_noun = if rare {
            family.rare_noun()
        } else {
            family.common_nouns()[rng.random_range(0..2)]
        };
        let ink = if luminance(rgb) > 0.35 {
            [0.06, 0.06, 0.08]
        } else {
            [0.88, 0.86, 0.8]
        };
        let mut spec = Self {
            seed,
            family,
            color: color.to_string(),
            rgb,
            pattern,
            pattern_angle: [0.0, std::f32::consts::FRAC_PI_2, std::f32::consts::FRAC_PI_4]
                [rng.random_range(0..3)],
            pattern_freq: rng.random_range(2.5..4.0),
            logo_glyph: rng.random_range(0..GLYPHS as u8),
            logo_center: [0.0, 0.0],
            logo_half: 0.2,
            ink,
            class_noun: class_noun.to_string(),
            title: format!("{} {} {}", color, pattern.adjective(), class_noun),
            rare,
        };
        spec.place_logo(&mut rng);
        spec
    }

    fn grid_points() -> impl Iterator<Item = (f32, f32)> {
        let n = MEASURE_GRID;
        (0..n * n).map(move |i| {
            let u = ((i % n) as f32 + 0.5) / n as f32 * 2.0 - 1.0;
            let v = ((i / n) as f32 + 0.5) / n as f32 * 2.0 - 1.0;
            (u, v)
        })
    }

    /// Sizes the logo to a fixed share of the foreground and puts it at a
    /// seeded position where its box lies fully inside the silhouette.
    fn place_logo(&mut self, rng: &mut impl Rng) {
        let fg = Self::grid_points().filter(|&(u, v)| self.family.contains(u, v)).count() as f64;
        let fill = Self::grid_points()
            .filter(|&(x, y)| glyph_contains(self.logo_glyph, x, y))
            .count() as f64
            / (MEASURE_GRID * MEASURE_GRID) as f64;
        let cell = 4.0 / (MEASURE_GRID * MEASURE_GRID) as f64;
        // glyph area = fill · (2h)² must equal LOGO_TARGET · fg area
        let h = (LOGO_TARGET * fg * cell / (4.0 * fill)).sqrt() as f32;
        self.logo_half = h;
        let box_inside = |cu: f32, cv: f32| {
            (0..=8).all(|i| {
                (0..=8).all(|j| {
                    let u = cu - h + 2.0 * h * i as f32 / 8.0;
                    let v = cv - h + 2.0 * h * j as f32 / 8.0;
                    self.family.contains(u, v)
                })
            })
        };
        let mut candidates = Vec::new();
        for i in 0..21 {
            for j in 0..21 {
                let (cu, cv) = (i as f32 / 10.0 - 1.0, j as f32 / 10.0 - 1.0);
                if box_inside(cu, cv) {
                    candidates.push([cu, cv]);
                }
            }
        }
        self.logo_center = candidates.choose(rng).copied().unwrap_or([0.0, 0.0]);
    }

    fn logo_hit(&self, u: f32, v: f32) -> bool {
        let x = (u - self.logo_center[0]) / self.logo_half;
        let y = (v - self.logo_center[1]) / self.logo_half;
        glyph_contains(self.logo_glyph, x, y)
    }

    /// Surface color at canonical coordinates, or `None` outside the item.
    pub fn color_at(&self, u: f32, v: f32) -> Option<[f32; 3]> {
        if !self.family.contains(u, v) {
            return None;
        }
        if self.logo_hit(u, v) {
            return Some(self.ink);
        }
        let shade = self.rgb.map(|c| c * 0.55);
        let on = match self.pattern {
            Pattern::Plain => false,
            Pattern::Stripes => {
                let (s, c) = self.pattern_angle.sin_cos();
                let d = u * c + v * s;
                (d * self.pattern_freq * std::f32::consts::PI).sin() > 0.0
            }
            Pattern::Dots => {
                let p = 1.0 / self.pattern_freq * 1.6;
                let fu = (u / p).rem_euclid(1.0) - 0.5;
                let fv = (v / p).rem_euclid(1.0) - 0.5;
                fu * fu + fv * fv < 0.09
            }
        };
        Some(if on { shade } else { self.rgb })
    }

    /// Logo area over foreground area, measured on a fine canonical grid.
    pub fn logo_fraction(&self) -> f64 {
        let mut fg = 0usize;
        let mut logo = 0usize;
        for (u, v) in Self::grid_points() {
            if self.family.contains(u, v) {
                fg += 1;
                if self.logo_hit(u, v) {
                    logo += 1;
                }
            }
        }
        logo as f64 / fg as f64
    }
}

/// Similarity transform from canonical item space to normalized image
/// coordinates: `p = offset + scale · R(angle) · q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub angle: f32,
    pub scale: f32,
    pub offset: [f32; 2],
}

impl Pose {
    /// Seeded pose of reference view `k`.
    pub fn for_view(item_seed: u64, k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed.wrapping_mul(31).wrapping_add(k as u64 + 1));
        Self {
            angle: rng.random_range(-0.6..0.6),
            scale: rng.random_range(0.58..0.76),
            offset: [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)],
        }
    }

    fn to_canonical(&self, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = (x - self.offset[0], y - self.offset[1]);
        let (s, c) = self.angle.sin_cos();
        ((c * dx + s * dy) / self.scale, (-s * dx + c * dy) / self.scale)
    }
}

/// RGB planes in `[0, 1]`, row-major `[3, H, W]`.
#[derive(Clone, Debug)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Canvas {
    pub fn white(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1.0; 3 * height * width],
        }
    }

    fn set(&mut self, y: usize, x: usize, c: [f32; 3]) {
        let hw = self.height * self.width;
        for (ch, &v) in c.iter().enumerate() {
            self.data[ch * hw + y * self.width + x] = v;
        }
    }

    fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let hw = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }

    /// Composites `spec` under `pose`; pixels with no coverage are untouched.
    pub fn draw(&mut self, spec: &ToyItemSpec, pose: &Pose) {
        const SUB: usize = 3;
        let (h, w) = (self.height, self.width);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                let mut hits = 0usize;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let px = (x as f32 + (sx as f32 + 0.5) / SUB as f32) / w as f32 * 2.0 - 1.0;
                        let py = (y as f32 + (sy as f32 + 0.5) / SUB as f32) / h as f32 * 2.0 - 1.0;
                        let (u, v) = pose.to_canonical(px, py);
                        if let Some(c) = spec.color_at(u, v) {
                            hits += 1;
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = hits as f32 / (SUB * SUB) as f32;
                let bg = self.get(y, x);
                let mut out = [0.0; 3];
                for k in 0..3 {
                    out[k] = acc[k] / (SUB * SUB) as f32 + (1.0 - a) * bg[k];
                }
                self.set(y, x, out);
            }
        }
    }

    pub fn into_image(self) -> ImageTensor {
        let data = self.data.into_iter().map(|v| v * 2.0 - 1.0).collect();
        ImageTensor::new(Tensor::new(&[3, self.height, self.width], data).expect("canvas shape"))
            .expect("three channels")
    }
}

fn check_size(size: usize) -> Result<()> {
    let f = SpaceToDepth::default().factor();
    if size == 0 || size % f != 0 {
        return Err(Error::IndivisibleDims {
            height: size,
            width: size,
            factor: f,
        });
    }
    Ok(())
}

/// One item rendered under `pose` on white.
pub fn render_view(spec: &ToyItemSpec, pose: &Pose, size: usize) -> ImageTensor {
    let mut c = Canvas::white(size, size);
    c.draw(spec, pose);
    c.into_image()
}

/// `k` reference views from seeded poses.
pub fn render_item_views(spec: &ToyItemSpec, k: usize, size: usize) -> Result<Vec<ImageTensor>> {
    if k < MIN_VIEWS {
        return Err(Error::TooFewViews(k));
    }
    check_size(size)?;
    Ok((0..k)
        .map(|i| render_view(spec, &Pose::for_view(spec.seed, i), size))
        .collect())
}

/// `spec` under a random pose and zoom, on white or on a room background.
pub fn render_augmented(spec: &ToyItemSpec, size: usize, rng: &mut impl Rng) -> ImageTensor {
    let mut canvas = if rng.random_bool(0.5) {
        Canvas::white(size, size)
    } else {
        scene_background(rng, size)
    };
    let pose = Pose {
        angle: rng.random_range(-0.8..0.8),
        scale: rng.random_range(0.45..1.5),
        offset: [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)],
    };
    canvas.draw(spec, &pose);
    canvas.into_image()
}

/// A rendered context scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: ImageTensor,
    pub caption: String,
    pub items: Vec<ToyItemSpec>,
}

fn scene_background(rng: &mut impl Rng, size: usize) -> Canvas {
    let mut c = Canvas::white(size, size);
    let wall = {
        let base: f32 = rng.random_range(0.72..0.88);
        [
            base + rng.random_range(-0.06..0.06),
            base + rng.random_range(-0.06..0.06),
            base + rng.random_range(-0.06..0.06),
        ]
    };
    let floor = [
        rng.random_range(0.5..0.68),
        rng.random_range(0.36..0.5),
        rng.random_range(0.22..0.34),
    ];
    let horizon = (size as f32 * rng.random_range(0.55..0.72)) as usize;
    let plank = rng.random_range(3..6);
    for y in 0..size {
        for x in 0..size {
            let col = if y < horizon {
                wall
            } else if (x + y / 2) % (2 * plank) < plank {
                floor
            } else {
                floor.map(|v| v * 0.9)
            };
            c.set(y, x, col);
        }
    }
    c
}

fn describe(items: &[ToyItemSpec]) -> String {
    let parts: Vec<String> = items
        .iter()
        .map(|s| format!("a {} {} {}", s.color, s.pattern.adjective(), s.class_noun))
        .collect();
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

/// Background plus one to three common-class distractors, with a caption
/// naming each of them.
pub fn render_scene(seed: u64, size: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE2_E000);
    let mut canvas = scene_background(&mut rng, size);
    let n = rng.random_range(1..=3);
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let spec = ToyItemSpec::generate(rng.random(), false);
        let scale = rng.random_range(0.28..0.45);
        let reach = 1.0 - scale * 0.9;
        let pose = Pose {
            angle: rng.random_range(-0.35..0.35),
            scale,
            offset: [rng.random_range(-reach..reach), rng.random_range(-reach..reach)],
        };
        canvas.draw(&spec, &pose);
        items.push(spec);
    }
    Scene {
        image: canvas.into_image(),
        caption: describe(&items),
        items,
    }
}

/// Seeded four-letter token from alternating consonant pairs; these never
/// collide with the English words used in captions.
pub fn unique_token(seed: u64) -> String {
    const C: &[u8] = b"bcdfghjklmnpqrstvwxz";
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70CE_4E00);
    (0..4).map(|_| C[rng.random_range(0..C.len())] as char).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub items: usize,
    pub scenes: usize,
    pub views: usize,
    pub size: usize,
    pub seed: u64,
    /// The last `rare_items` items get rare class nouns.
    pub rare_items: usize,
    /// Pretraining scenes written alongside the benchmark.
    pub corpus: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            items: 10,
            scenes: 3,
            views: 5,
            size: DEFAULT_SIZE,
            seed: 0,
            rare_items: 3,
            corpus: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub item_id: String,
    pub class_noun: String,
    pub token: String,
    pub title: String,
    pub rare: bool,
    /// Mean clean-segmentation pixel count over the reference views.
    pub footprint: f64,
    pub spec: ToyItemSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub scene_id: String,
    pub caption: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationTag {
    Fit,
    Oversized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub item_id: String,
    pub scene_id: String,
    pub mask: MaskShape,
    pub ablation_tag: AblationTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: BenchmarkConfig,
    pub class_nouns: Vec<String>,
    pub items: Vec<ManifestItem>,
    pub scenes: Vec<ManifestScene>,
    pub triples: Vec<Triple>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the pretty-printed manifest.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    pub fn item(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|i| i.item_id == id)
    }

    pub fn scene(&self, id: &str) -> Option<&ManifestScene> {
        self.scenes.iter().find(|s| s.scene_id == id)
    }
}

/// Item metadata as stored in `catalog/{item_id}/meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub class_noun: String,
    pub token: String,
    pub title: String,
}

/// A catalog item as loaded from disk.
#[derive(Clone, Debug)]
pub struct CatalogItem {
    pub item_id: String,
    pub meta: ItemMeta,
    pub views: Vec<ImageTensor>,
}

impl CatalogItem {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let meta: ItemMeta =
            serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        let vdir = dir.join("views");
        let mut paths: Vec<PathBuf> = fs::read_dir(&vdir)
            .map_err(|e| Error::io(&vdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        paths.sort_by_key(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("view_"))
                .and_then(|s| s.parse::<usize>().ok())
                .unwrap_or(usize::MAX)
        });
        let views = paths.iter().map(ImageTensor::read_png).collect::<Result<Vec<_>>>()?;
        if views.len() < MIN_VIEWS {
            return Err(Error::TooFewViews(views.len()));
        }
        let (h, w) = (views[0].height(), views[0].width());
        if views.iter().any(|v| v.height() != h || v.width() != w) {
            return Err(Error::Config(format!("views in {} differ in size", dir.display())));
        }
        let item_id = dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("item")
            .to_string();
        Ok(Self { item_id, meta, views })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretraining corpus entry as listed in `corpus/captions.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub file: String,
    pub caption: String,
}

/// Fitting and oversized masks for an item of `footprint` pixels placed in
/// a `size × size` scene.
pub fn benchmark_masks(rng: &mut impl Rng, footprint: f64, size: usize, ellipse: bool) -> (MaskShape, MaskShape) {
    let s = size as f64;
    let side = (footprint * 1.1).sqrt().clamp(4.0, s);
    let aspect: f64 = rng.random_range(0.8..1.25);
    let (hh, ww) = ((side * aspect).min(s), (side / aspect).min(s));
    let cy = rng.random_range(hh / 2.0..=s - hh / 2.0);
    let cx = rng.random_range(ww / 2.0..=s - ww / 2.0);
    let shape = |hh: f64, ww: f64| {
        if ellipse {
            // ellipse area π/4 · hh · ww matched to the rectangle's
            let k = (4.0 / std::f64::consts::PI).sqrt();
            MaskShape::Ellipse {
                cy,
                cx,
                ry: hh / 2.0 * k,
                rx: ww / 2.0 * k,
            }
        } else {
            MaskShape::Rect {
                cy,
                cx,
                half_h: hh / 2.0,
                half_w: ww / 2.0,
            }
        }
    };
    let fit = shape(hh, ww);
    let mut grow = 1.6;
    let mut over = fit.scaled(grow);
    while (over.rasterize(size, size).count() as f64) < 2.0 * footprint && grow < 8.0 {
        grow += 0.2;
        over = fit.scaled(grow);
    }
    if (over.rasterize(size, size).count() as f64) < 2.0 * footprint {
        over = MaskShape::Rect {
            cy: s / 2.0,
            cx: s / 2.0,
            half_h: s / 2.0,
            half_w: s / 2.0,
        };
    }
    (fit, over)
}

/// Writes `catalog/`, `scenes/`, `corpus/`, and `manifest.json` under
/// `out_dir` and returns the manifest.
pub fn build_benchmark(cfg: &BenchmarkConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out = out_dir.as_ref();
    if cfg.views < MIN_VIEWS {
        return Err(Error::TooFewViews(cfg.views));
    }
    check_size(cfg.size)?;
    if cfg.rare_items > cfg.items {
        return Err(Error::Config("more rare items than items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(cfg.items);
    let mut tokens = BTreeSet::new();
    for i in 0..cfg.items {
        let rare = i >= cfg.items - cfg.rare_items;
        let spec = ToyItemSpec::generate(rng.random(), rare);
        let mut token = unique_token(spec.seed);
        let mut bump = 0;
        while !tokens.insert(token.clone()) {
            bump += 1;
            token = unique_token(spec.seed.wrapping_add(bump));
        }
        let item_id = format!("item_{i:02}");
        let views = render_item_views(&spec, cfg.views, cfg.size)?;
        let dir = out.join("catalog").join(&item_id);
        for (k, v) in views.iter().enumerate() {
            write_file(&dir.join("views").join(format!("view_{k}.png")), &v.to_png_bytes()?)?;
        }
        let meta = ItemMeta {
            class_noun: spec.class_noun.clone(),
            token: token.clone(),
            title: spec.title.clone(),
        };
        write_file(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        let footprint = object_footprint(&views)?;
        items.push(ManifestItem {
            item_id,
            class_noun: spec.class_noun.clone(),
            token,
            title: spec.title.clone(),
            rare,
            footprint,
            spec,
        });
    }

    let mut scenes = Vec::with_capacity(cfg.scenes);
    for j in 0..cfg.scenes {
        let seed: u64 = rng.random();
        let scene = render_scene(seed, cfg.size);
        let scene_id = format!("scene_{j:02}");
        write_file(
            &out.join("scenes").join(format!("{scene_id}.png")),
            &scene.image.to_png_bytes()?,
        )?;
        scenes.push(ManifestScene {
            scene_id,
            caption: scene.caption,
            seed,
        });
    }

    let mut corpus = Vec::with_capacity(cfg.corpus);
    for c in 0..cfg.corpus {
        let scene = render_scene(rng.random(), cfg.size);
        let file = format!("scene_{c:04}.png");
        write_file(&out.join("corpus").join(&file), &scene.image.to_png_bytes()?)?;
        corpus.push(CorpusEntry {
            file,
            caption: scene.caption,
        });
    }
    write_file(
        &out.join("corpus").join("captions.json"),
        serde_json::to_string_pretty(&corpus)?.as_bytes(),
    )?;

    let mut triples = Vec::with_capacity(cfg.items * cfg.scenes * 2);
    for item in &items {
        for (j, scene) in scenes.iter().enumerate() {
            let (fit, over) = benchmark_masks(&mut rng, item.footprint, cfg.size, j % 2 == 1);
            for (mask, tag) in [(fit, AblationTag::Fit), (over, AblationTag::Oversized)] {
                triples.push(Triple {
                    item_id: item.item_id.clone(),
                    scene_id: scene.scene_id.clone(),
                    mask,
                    ablation_tag: tag,
                });
            }
        }
    }

    let mut class_nouns: BTreeSet<String> = ShapeFamily::ALL
        .iter()
        .flat_map(|f| f.common_nouns().iter().map(|s| s.to_string()))
        .collect();
    class_nouns.extend(items.iter().map(|i| i.class_noun.clone()));
    let manifest = Manifest {
        config: *cfg,
        class_nouns: class_nouns.into_iter().collect(),
        items,
        scenes,
        triples,
    };
    write_file(&out.join("manifest.json"), manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}

/// Loads the pretraining corpus written by [`build_benchmark`].
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<(ImageTensor, String)>> {
    let dir = dir.as_ref();
    let cap = dir.join("captions.json");
    let entries: Vec<CorpusEntry> =
        serde_json::from_slice(&fs::read(&cap).map_err(|e| Error::io(&cap, e))?)?;
    entries
        .into_iter()
        .map(|e| Ok((ImageTensor::read_png(dir.join(&e.file))?, e.caption)))
        .collect()
}

/// Every word that can appear in generated captions, titles, and prompts
/// for class samples.
pub fn closed_vocabulary() -> Vec<String> {
    let mut words: Vec<String> = vec!["a".into(), "and".into()];
    words.extend(COLORS.iter().map(|(n, _)| n.to_string()));
    words.extend(Pattern::ALL.iter().map(|p| p.adjective().to_string()));
    for f in ShapeFamily::ALL {
        words.extend(f.common_nouns().iter().map(|s| s.to_string()));
        words.push(f.rare_noun().to_string());
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l1(a: &ImageTensor, b: &ImageTensor) -> f64 {
        a.tensor()
            .data()
            .iter()
            .zip(b.tensor().data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a.tensor().numel() as f64
    }

    #[test]
    fn logo_share_of_foreground() {
        for seed in 0..60 {
            for rare in [false, true] {
                let s = ToyItemSpec::generate(seed, rare);
                let f = s.logo_fraction();
                assert!((0.04..=0.10).contains(&f), "seed {seed}: logo fraction {f}");
            }
        }
    }

    #[test]
    fn views_are_white_outside_and_distinct() {
        let spec = ToyItemSpec::generate(3, false);
        let views = render_item_views(&spec, 8, 32).unwrap();
        for v in &views {
            // corners are far from any pose's silhouette
            for (y, x) in [(0, 0), (0, 31), (31, 0), (31, 31)] {
                for c in 0..3 {
                    assert_eq!(v.pixel(c, y, x), 1.0);
                }
            }
        }
        for i in 0..8 {
            for j in i + 1..8 {
                assert!(l1(&views[i], &views[j]) > 0.01, "views {i} and {j}");
            }
        }
        let again = render_item_views(&spec, 8, 32).unwrap();
        assert_eq!(views, again);
        assert!(matches!(render_item_views(&spec, 2, 32), Err(Error::TooFewViews(2))));
    }

    #[test]
    fn scenes_are_seeded_and_captioned() {
        let a = render_scene(1, 32);
        let b = render_scene(2, 32);
        assert_eq!(a.image.height(), 32);
        assert!(l1(&a.image, &b.image) > 0.01);
        for s in [&a, &b] {
            for it in &s.items {
                assert!(s.caption.contains(&it.class_noun));
                assert!(!it.rare);
            }
        }
        assert_eq!(render_scene(1, 32).caption, a.caption);
    }

    #[test]
    fn rare_nouns_never_in_common_lists() {
        for f in ShapeFamily::ALL {
            for g in ShapeFamily::ALL {
                assert!(!g.common_nouns().contains(&f.rare_noun()));
            }
        }
    }
}
