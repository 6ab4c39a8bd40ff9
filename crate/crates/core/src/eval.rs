//! Fidelity scoring: embed the inpainted region and the references, take the
//! best cosine similarity, and aggregate over a benchmark.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::catalog::{render_augmented, AblationTag, CatalogItem, Manifest, ToyItemSpec};
use crate::checkpoint::Checkpoint;
use crate::codec::{ImageTensor, MaskTensor};
use crate::error::{Error, Result};
use crate::masks::MaskShape;
use crate::optim::AdamState;
use crate::params::{Bindings, ParamStore};
use crate::sampler::{inpaint_sample, SampleRequest, DEFAULT_GUIDANCE};
use crate::tensor::Tensor;
use crate::text::build_prompt;

/// Deterministic image → unit vector map.
pub trait FeatureScorer: Send + Sync {
    fn id(&self) -> String;

    /// Side length images are resized to before embedding.
    fn input_size(&self) -> usize;

    fn embed_batch(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f32>>>;

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f32>> {
        Ok(self.embed_batch(std::slice::from_ref(image))?.remove(0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    RandomConv,
    Contrastive,
}

const WIDTHS: [usize; 3] = [16, 32, 64];
pub const EMBED_DIM: usize = 64;

/// Three conv/SiLU/pool stages, a flatten, and a linear head. Used with
/// seeded random weights or after contrastive training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvScorer {
    pub kind: ScorerKind,
    pub seed: u64,
    pub size: usize,
    #[serde(with = "store_serde")]
    params: ParamStore,
}

mod store_serde {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        shape: Vec<usize>,
        data: Vec<f32>,
    }

    pub fn serialize<S: Serializer>(store: &ParamStore, s: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, Entry> = store
            .iter()
            .map(|(n, t)| {
                (
                    n,
                    Entry {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        map.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ParamStore, D::Error> {
        let map = BTreeMap::<String, Entry>::deserialize(d)?;
        let mut store = ParamStore::new();
        for (name, e) in map {
            let t = Tensor::new(&e.shape, e.data).map_err(serde::de::Error::custom)?;
            store.insert(name, t);
        }
        Ok(store)
    }
}

impl ConvScorer {
    pub fn random(seed: u64, size: usize) -> Result<Self> {
        if size < 8 || size % 8 != 0 {
            return Err(Error::Config(format!("scorer input size {size} must be a multiple of 8")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in WIDTHS.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.insert(format!("scorer.conv{i}.weight"), Tensor::randn(&[c, cin, 3, 3], std, &mut rng));
            params.insert(format!("scorer.conv{i}.bias"), Tensor::zeros(&[c]));
            cin = c;
        }
        let flat = cin * (size / 8) * (size / 8);
        params.insert(
            "scorer.head.weight",
            Tensor::randn(&[flat, EMBED_DIM], (1.0 / flat as f64).sqrt(), &mut rng),
        );
        params.insert("scorer.head.bias", Tensor::zeros(&[EMBED_DIM]));
        Ok(Self {
            kind: ScorerKind::RandomConv,
            seed,
            size,
            params,
        })
    }

    fn forward<'t>(&self, p: &Bindings<'t, f32>, x: Var<'t, f32>) -> Result<Var<'t, f32>> {
        let mut h = x;
        for i in 0..WIDTHS.len() {
            h = h
                .conv2d(p.get(&format!("scorer.conv{i}.weight"))?, p.get(&format!("scorer.conv{i}.bias"))?)?
                .silu()
                .avg_pool2()?;
        }
        let s = h.shape();
        let flat = h.reshape(&[s[0], s[1] * s[2] * s[3]])?;
        flat.linear(p.get("scorer.head.weight")?, p.get("scorer.head.bias")?)?
            .normalize_rows()
    }

    fn stack_inputs(&self, images: &[ImageTensor]) -> Result<Tensor> {
        let resized: Vec<Tensor> = images
            .iter()
            .map(|img| img.resize(self.size, self.size).into_tensor())
            .collect();
        Tensor::stack(&resized)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

impl FeatureScorer for ConvScorer {
    fn id(&self) -> String {
        match self.kind {
            ScorerKind::RandomConv => format!("random-conv/{}/{}", self.size, self.seed),
            ScorerKind::Contrastive => format!("contrastive/{}/{}", self.size, self.seed),
        }
    }

    fn input_size(&self) -> usize {
        self.size
    }

    fn embed_batch(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f32>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::<f32>::new();
        let p = self.params.bind(&tape);
        let z = self.forward(&p, tape.constant(self.stack_inputs(images)?))?.to_tensor();
        Ok(z.data().chunks(EMBED_DIM).map(<[f32]>::to_vec).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerTrainConfig {
    pub steps: usize,
    pub items_per_batch: usize,
    pub item_pool: usize,
    pub learning_rate: f64,
    pub margin: f64,
    /// Upper bound of the per-image Gaussian pixel noise used as augmentation.
    pub max_noise: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            items_per_batch: 16,
            item_pool: 512,
            learning_rate: 2e-3,
            margin: 0.5,
            max_noise: 0.3,
            size: 32,
            seed: 0x5C0E,
        }
    }
}

/// Optional blur (down/up resampling) followed by Gaussian pixel noise.
fn degrade(img: ImageTensor, max_std: f64, rng: &mut impl Rng) -> Result<ImageTensor> {
    let img = if rng.random_bool(0.3) {
        let (h, w) = (img.height(), img.width());
        img.resize(h / 2, w / 2).resize(h, w)
    } else {
        img
    };
    if max_std <= 0.0 {
        return Ok(img);
    }
    let std = rng.random_range(0.0..max_std);
    let noise = Tensor::<f32>::randn(img.tensor().shape(), std, rng);
    ImageTensor::new(img.tensor().zip_map(&noise, "noise", |a, b| a + b)?)
}

/// Margin loss on cosine similarities: for every anchor, each negative must
/// trail the anchor's positive by at least `margin`. Row i of `z` pairs with
/// row i±pairs.
fn contrastive_loss<'t>(z: Var<'t, f32>, pairs: usize, margin: f32) -> Result<Var<'t, f32>> {
    let tape = z.tape();
    let n = 2 * pairs;
    if z.shape()[0] != n || pairs == 0 {
        return Err(Error::Config(format!("expected {n} embeddings for {pairs} pairs")));
    }
    let sim = z.matmul(z.transpose()?)?;
    let pos_mask = Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        if j == (i + pairs) % n { 1.0 } else { 0.0 }
    });
    let neg_mask = Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        if j != i && j != (i + pairs) % n { 1.0 } else { 0.0 }
    });
    let negatives = (n * (n - 2)) as f32;
    let pos = sim
        .mul(tape.constant(pos_mask))?
        .matmul(tape.constant(Tensor::ones(&[n, 1])))?;
    let pos_b = pos.matmul(tape.constant(Tensor::ones(&[1, n])))?;
    Ok(sim
        .sub(pos_b)?
        .add_scalar(margin)
        .relu()
        .mul(tape.constant(neg_mask))?
        .sum()
        .scale(1.0 / negatives))
}

fn scorer_item_specs(cfg: &ScorerTrainConfig) -> Vec<ToyItemSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x17E5_0000);
    (0..cfg.item_pool)
        .map(|i| ToyItemSpec::generate(rng.random(), i % 4 == 0))
        .collect()
}

/// Trains the conv scorer to tell toy items apart across pose, zoom,
/// background, and noise.
pub fn train_scorer(cfg: &ScorerTrainConfig) -> Result<(ConvScorer, Vec<f32>)> {
    if cfg.steps == 0 || cfg.items_per_batch < 2 || cfg.item_pool < cfg.items_per_batch {
        return Err(Error::Config("scorer training needs steps ≥ 1 and a pool of at least one batch".into()));
    }
    let mut scorer = ConvScorer::random(cfg.seed, cfg.size)?;
    scorer.kind = ScorerKind::Contrastive;
    let specs = scorer_item_specs(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(cfg.learning_rate);
    scorer.params.set_requires_grad(true);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let picks = rand::seq::index::sample(&mut rng, specs.len(), cfg.items_per_batch);
        let mut first = Vec::with_capacity(cfg.items_per_batch);
        let mut second = Vec::with_capacity(cfg.items_per_batch);
        for i in picks.iter() {
            first.push(degrade(render_augmented(&specs[i], cfg.size, &mut rng), cfg.max_noise, &mut rng)?);
            second.push(degrade(render_augmented(&specs[i], cfg.size, &mut rng), cfg.max_noise, &mut rng)?);
        }
        first.extend(second);
        let x = scorer.stack_inputs(&first)?;
        let tape = Tape::<f32>::new();
        let p = scorer.params.bind(&tape);
        let z = scorer.forward(&p, tape.constant(x))?;
        let loss = contrastive_loss(z, cfg.items_per_batch, cfg.margin as f32)?;
        losses.push(loss.item());
        let grads = tape.backward(loss)?;
        scorer.params.accumulate(&p, &grads);
        opt.step(&mut scorer.params)?;
    }
    scorer.params.set_requires_grad(false);
    Ok((scorer, losses))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Crop of `image` to the bounding box of `mask`.
pub fn crop_to_mask(image: &ImageTensor, mask: &MaskTensor) -> Result<ImageTensor> {
    image.check_mask(mask)?;
    let (y0, y1, x0, x1) = mask.bounding_box().ok_or(Error::EmptyMask)?;
    Ok(image.crop(y0, y1, x0, x1))
}

/// Max over references of the cosine similarity between the embedded mask
/// crop and each embedded reference.
pub fn fidelity_score(
    generated: &ImageTensor,
    mask: &MaskTensor,
    references: &[ImageTensor],
    scorer: &dyn FeatureScorer,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let crop = crop_to_mask(generated, mask)?;
    let g = scorer.embed(&crop)?;
    let refs = scorer.embed_batch(references)?;
    Ok(refs
        .iter()
        .map(|r| cosine(&g, r))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Mean similarity of same-item view pairs and of different-item pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerSanity {
    pub same_item: f64,
    pub different_item: f64,
}

impl ScorerSanity {
    pub fn margin(&self) -> f64 {
        self.same_item - self.different_item
    }
}

pub fn scorer_sanity(scorer: &dyn FeatureScorer, items: &[Vec<ImageTensor>]) -> Result<ScorerSanity> {
    if items.len() < 2 {
        return Err(Error::Config("scorer sanity needs at least two items".into()));
    }
    let embedded: Vec<Vec<Vec<f32>>> = items
        .iter()
        .map(|views| scorer.embed_batch(views))
        .collect::<Result<_>>()?;
    let (mut same, mut same_n, mut diff, mut diff_n) = (0.0, 0usize, 0.0, 0usize);
    for (a, ea) in embedded.iter().enumerate() {
        for (i, va) in ea.iter().enumerate() {
            for vb in &ea[i + 1..] {
                same += cosine(va, vb);
                same_n += 1;
            }
            for eb in &embedded[a + 1..] {
                for vb in eb {
                    diff += cosine(va, vb);
                    diff_n += 1;
                }
            }
        }
    }
    if same_n == 0 {
        return Err(Error::TooFewViews(1));
    }
    Ok(ScorerSanity {
        same_item: same / same_n as f64,
        different_item: diff / diff_n as f64,
    })
}

/// How a method obtains its model and prompt for an item.
#[derive(Clone, Copy, Debug)]
pub enum MethodModel<'a> {
    /// Per-item fine-tuned checkpoints prompted with `"a {token} {class}"`.
    Concept(&'a BTreeMap<String, Checkpoint>),
    /// One shared checkpoint prompted with the item's catalog title.
    Title(&'a Checkpoint),
}

pub const DREAMPAINT: &str = "dreampaint";
pub const TEXT_ONLY: &str = "text_only";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkOptions {
    pub seed: u64,
    pub guidance: f64,
    pub steps: Option<usize>,
    /// Restrict to triples with this tag.
    pub tag: Option<AblationTag>,
    /// Restrict to these item ids.
    pub items: Option<Vec<String>>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            guidance: DEFAULT_GUIDANCE,
            steps: None,
            tag: Some(AblationTag::Fit),
            items: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleScore {
    pub item: String,
    pub scene: String,
    pub mask_kind: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub mean: f64,
    pub scores: Vec<TripleScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub manifest_hash: String,
    pub scorer_id: String,
    pub methods: BTreeMap<String, MethodScores>,
}

impl FidelityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn mean(&self, method: &str) -> Option<f64> {
        self.methods.get(method).map(|m| m.mean)
    }

    /// Per-item mean score of `method`.
    pub fn item_means(&self, method: &str) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        if let Some(m) = self.methods.get(method) {
            for s in &m.scores {
                let e = acc.entry(s.item.clone()).or_default();
                e.0 += s.score;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Items where `a` has the strictly higher mean, out of items scored by both.
    pub fn item_wins(&self, a: &str, b: &str) -> (usize, usize) {
        let (ma, mb) = (self.item_means(a), self.item_means(b));
        let common: Vec<_> = ma.keys().filter(|k| mb.contains_key(*k)).collect();
        let wins = common.iter().filter(|k| ma[**k] > mb[**k]).count();
        (wins, common.len())
    }

    /// Plain-text table: one row per method with its mean score.
    pub fn table(&self) -> String {
        let width = self.methods.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut rows: Vec<(&String, &MethodScores)> = self.methods.iter().collect();
        rows.sort_by(|a, b| a.1.mean.total_cmp(&b.1.mean));
        let mut s = format!("{:<width$}  fidelity  triples\n", "method");
        s.push_str(&format!("{}  --------  -------\n", "-".repeat(width)));
        for (name, m) in rows {
            s.push_str(&format!("{:<width$}  {:>8.4}  {:>7}\n", name, m.mean, m.scores.len()));
        }
        s
    }
}

struct Job<'a> {
    method: &'a str,
    triple: usize,
    ckpt: &'a Checkpoint,
    prompt: String,
    token: Option<String>,
}

/// Inpaints every selected triple with every method (same seed and mask per
/// triple) and scores the results against the item's reference views.
pub fn run_benchmark(
    manifest: &Manifest,
    root: &Path,
    methods: &BTreeMap<String, MethodModel<'_>>,
    scorer: &dyn FeatureScorer,
    opts: &BenchmarkOptions,
) -> Result<FidelityReport> {
    let triples: Vec<(usize, &crate::catalog::Triple)> = manifest
        .triples
        .iter()
        .enumerate()
        .filter(|(_, t)| opts.tag.as_ref().is_none_or(|tag| &t.ablation_tag == tag))
        .filter(|(_, t)| opts.items.as_ref().is_none_or(|ids| ids.contains(&t.item_id)))
        .collect();
    let mut items: BTreeMap<&str, CatalogItem> = BTreeMap::new();
    let mut scenes: BTreeMap<&str, ImageTensor> = BTreeMap::new();
    for (_, t) in &triples {
        if !items.contains_key(t.item_id.as_str()) {
            items.insert(&t.item_id, CatalogItem::load(root.join("catalog").join(&t.item_id))?);
        }
        if !scenes.contains_key(t.scene_id.as_str()) {
            let p = root.join("scenes").join(format!("{}.png", t.scene_id));
            scenes.insert(&t.scene_id, ImageTensor::read_png(p)?);
        }
    }

    let mut jobs = Vec::new();
    for (name, model) in methods {
        for &(idx, t) in &triples {
            let item = &items[t.item_id.as_str()];
            let job = match model {
                MethodModel::Concept(map) => {
                    let ckpt = map
                        .get(&t.item_id)
                        .ok_or_else(|| Error::MissingCheckpoint(t.item_id.clone()))?;
                    let token = ckpt
                        .meta
                        .token
                        .clone()
                        .ok_or_else(|| Error::MissingCheckpoint(t.item_id.clone()))?;
                    let class_noun = ckpt.meta.class_noun.clone().unwrap_or_default();
                    Job {
                        method: name,
                        triple: idx,
                        ckpt,
                        prompt: build_prompt(&ckpt.vocab, &token, &class_noun, None)?,
                        token: Some(token),
                    }
                }
                MethodModel::Title(ckpt) => Job {
                    method: name,
                    triple: idx,
                    ckpt,
                    prompt: item.meta.title.clone(),
                    token: None,
                },
            };
            jobs.push(job);
        }
    }

    let scored: Vec<Result<(String, TripleScore)>> = jobs
        .par_iter()
        .map(|job| {
            let t = &manifest.triples[job.triple];
            let scene = &scenes[t.scene_id.as_str()];
            let mask = t.mask.rasterize(scene.height(), scene.width());
            let mut req = SampleRequest::new(
                scene.clone(),
                mask.clone(),
                job.prompt.clone(),
                opts.seed.wrapping_add(job.triple as u64),
            );
            req.guidance = opts.guidance;
            req.steps = opts.steps;
            req.concept_token = job.token.clone();
            let out = inpaint_sample(&req, job.ckpt)?;
            let score = fidelity_score(&out, &mask, &items[t.item_id.as_str()].views, scorer)?;
            Ok((
                job.method.to_string(),
                TripleScore {
                    item: t.item_id.clone(),
                    scene: t.scene_id.clone(),
                    mask_kind: t.mask.kind().name().to_string(),
                    score,
                },
            ))
        })
        .collect();

    let mut by_method: BTreeMap<String, Vec<TripleScore>> =
        methods.keys().map(|k| (k.clone(), Vec::new())).collect();
    for r in scored {
        let (m, s) = r?;
        by_method.get_mut(&m).expect("known method").push(s);
    }
    let methods = by_method
        .into_iter()
        .map(|(name, scores)| {
            let mean = if scores.is_empty() {
                0.0
            } else {
                scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64
            };
            (name, MethodScores { mean, scores })
        })
        .collect();
    Ok(FidelityReport {
        manifest_hash: manifest.hash()?,
        scorer_id: scorer.id(),
        methods,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub mask_pixels: usize,
    pub clipped: bool,
    pub score: f64,
}

/// The fitting mask grown so its area is multiplied by `scale`.
pub fn sweep_mask(fit: &MaskShape, scale: f64) -> MaskShape {
    if scale == 1.0 {
        *fit
    } else {
        fit.scaled(scale.sqrt())
    }
}

/// Scores inpaintings of `scene` under the fitting mask and its area-scaled
/// variants. Rows come back sorted by scale.
#[allow(clippy::too_many_arguments)]
pub fn mask_size_sweep(
    references: &[ImageTensor],
    scene: &ImageTensor,
    fit: &MaskShape,
    scales: &[f64],
    ckpt: &Checkpoint,
    prompt: &str,
    scorer: &dyn FeatureScorer,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if scales.is_empty() {
        return Err(Error::Config("mask sweep needs at least one scale".into()));
    }
    if let Some(bad) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("mask scale {bad} must be positive")));
    }
    let mut scales = scales.to_vec();
    scales.sort_by(f64::total_cmp);
    let (h, w) = (scene.height(), scene.width());
    let token = ckpt.meta.token.clone();
    scales
        .iter()
        .map(|&scale| {
            let shape = sweep_mask(fit, scale);
            let clipped = shape.exceeds(h, w);
            if clipped {
                log::warn!("mask at scale {scale} exceeds the {h}x{w} image and is clipped");
            }
            let mask = shape.rasterize(h, w);
            let mut req = SampleRequest::new(scene.clone(), mask.clone(), prompt, seed);
            req.concept_token = token.clone().filter(|t| prompt.split_whitespace().any(|w| w == t));
            let out = inpaint_sample(&req, ckpt)?;
            Ok(SweepRow {
                scale,
                mask_pixels: mask.count(),
                clipped,
                score: fidelity_score(&out, &mask, references, scorer)?,
            })
        })
        .collect()
}
