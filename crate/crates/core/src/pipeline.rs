//! Pretraining, per-item fine-tuning, run directories, and weight transplant.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::catalog::CatalogItem;
use crate::checkpoint::{Checkpoint, ModelKind, TrainingMeta};
use crate::codec::{ImageTensor, MaskTensor, SpaceToDepth};
use crate::diffusion::{inpaint_loss, NoiseSchedule, ScheduleConfig, TrainingBatch};
use crate::error::{Error, Result};
use crate::masks::{ellipse_mask, object_mask, rect_mask, sample_training_mask, MaskKind, MaskMixture};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::sampler::{codec_for, codec_for_channels, inpaint_sample, SampleRequest};
use crate::text::{build_prompt, encode_on_tape, grow_embedding, TextConfig, Vocabulary};
use crate::unet::{BoundUnet, DenoiserConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing a caption with the empty prompt.
    pub cond_dropout: f64,
    pub seed: u64,
    pub denoiser: DenoiserConfig,
    pub text: TextConfig,
    pub schedule: ScheduleConfig,
    pub masks: MaskMixture,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let text = TextConfig::default();
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            cond_dropout: 0.1,
            seed: 0,
            denoiser: DenoiserConfig {
                cond_dim: text.cond_dim(),
                ..DenoiserConfig::default()
            },
            text,
            schedule: ScheduleConfig::default(),
            masks: MaskMixture::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub prior_preservation: bool,
    pub finetune_text_encoder: bool,
    pub seed: u64,
    pub batch_size: usize,
    /// Probability of replacing the concept prompt with the empty prompt.
    pub cond_dropout: f64,
    /// Weight of the class-prior term.
    pub prior_weight: f64,
    pub class_images: usize,
    /// Sampling steps used to generate class-prior images.
    pub class_sample_steps: Option<usize>,
    pub masks: MaskMixture,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl FinetuneConfig {
    pub fn toy() -> Self {
        Self {
            steps: 400,
            learning_rate: 1e-3,
            prior_preservation: false,
            finetune_text_encoder: true,
            seed: 0,
            batch_size: 4,
            cond_dropout: 0.1,
            prior_weight: 1.0,
            class_images: 16,
            class_sample_steps: None,
            masks: MaskMixture::default(),
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            steps: 500,
            learning_rate: 5e-6,
            ..Self::toy()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("fine-tune steps must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("conditioning dropout must lie in [0, 1)".into()));
        }
        if self.prior_preservation && self.class_images == 0 {
            return Err(Error::Config("prior preservation needs class images".into()));
        }
        Ok(())
    }
}

/// A trained checkpoint with its per-step losses.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f32>,
}

/// Mean of the first and of the last `window` losses.
pub fn running_loss_endpoints(losses: &[f32], window: usize) -> Option<(f64, f64)> {
    let w = window.min(losses.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

/// One weighted term of a training objective.
struct Term {
    batch: TrainingBatch,
    prompts: Vec<String>,
    weight: f64,
}

/// Shared optimization state for the two parameter stores.
struct Trainer<'a> {
    config: DenoiserConfig,
    vocab: &'a Vocabulary,
    sched: NoiseSchedule,
    codec: SpaceToDepth,
    unet: ParamStore,
    text: ParamStore,
    unet_opt: AdamState,
    text_opt: AdamState,
    train_text: bool,
}

impl<'a> Trainer<'a> {
    fn new(
        config: DenoiserConfig,
        vocab: &'a Vocabulary,
        schedule: ScheduleConfig,
        mut unet: ParamStore,
        mut text: ParamStore,
        lr: f64,
        train_text: bool,
    ) -> Result<Self> {
        if config.variant != Variant::Inpaint {
            return Err(Error::VariantMismatch(format!(
                "training targets the inpaint denoiser, got {}",
                config.variant
            )));
        }
        unet.set_requires_grad(true);
        text.set_requires_grad(train_text);
        Ok(Self {
            config,
            vocab,
            sched: NoiseSchedule::new(schedule)?,
            codec: codec_for_channels(config.latent_channels)?,
            unet,
            text,
            unet_opt: AdamState::new(lr),
            text_opt: AdamState::new(lr),
            train_text,
        })
    }

    fn step(&mut self, terms: &[Term]) -> Result<f32> {
        let tape = Tape::<f32>::new();
        let ub = self.unet.bind(&tape);
        let tb = self.text.bind(&tape);
        let unet = BoundUnet::new(self.config, &tape, ub);
        let mut total = None;
        for term in terms {
            let bags: Vec<_> = term.prompts.iter().map(|p| self.vocab.tokenize(p)).collect();
            let cond = encode_on_tape(&tb, &bags)?;
            let loss = inpaint_loss(&unet, cond, &term.batch, &self.codec, &self.sched)?
                .scale(term.weight as f32);
            total = Some(match total {
                None => loss,
                Some(acc) => loss.add(acc)?,
            });
        }
        let total = total.ok_or(Error::EmptyBatch("objective"))?;
        let value = total.item();
        let grads = tape.backward(total)?;
        self.unet.accumulate(&unet.bindings(), &grads);
        self.unet_opt.step(&mut self.unet)?;
        if self.train_text {
            self.text.accumulate(&tb, &grads);
            self.text_opt.step(&mut self.text)?;
        }
        Ok(value)
    }

    fn into_stores(mut self) -> (ParamStore, ParamStore) {
        self.unet.set_requires_grad(false);
        self.text.set_requires_grad(false);
        (self.unet, self.text)
    }
}

fn pick_prompt(caption: &str, dropout: f64, rng: &mut impl Rng) -> String {
    if dropout > 0.0 && rng.random::<f64>() < dropout {
        String::new()
    } else {
        caption.to_string()
    }
}

/// Trains the base inpainting model on captioned scenes.
pub fn pretrain(corpus: &[(ImageTensor, String)], cfg: &PretrainConfig) -> Result<TrainOutcome> {
    pretrain_with_progress(corpus, cfg, |_, _| {})
}

pub fn pretrain_with_progress(
    corpus: &[(ImageTensor, String)],
    cfg: &PretrainConfig,
    mut progress: impl FnMut(usize, f32),
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.steps == 0 {
        return Err(Error::Config("pretraining steps must be ≥ 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be ≥ 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.cond_dropout) {
        return Err(Error::Config("conditioning dropout must lie in [0, 1)".into()));
    }
    if cfg.denoiser.cond_dim != cfg.text.cond_dim() {
        return Err(Error::Config(format!(
            "denoiser cond_dim {} differs from text encoder width {}",
            cfg.denoiser.cond_dim,
            cfg.text.cond_dim()
        )));
    }
    let (h, w) = (corpus[0].0.height(), corpus[0].0.width());
    if corpus.iter().any(|(img, _)| img.height() != h || img.width() != w) {
        return Err(Error::Config("corpus images differ in size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let closed = crate::catalog::closed_vocabulary();
    let vocab = Vocabulary::from_texts(
        closed
            .iter()
            .map(String::as_str)
            .chain(corpus.iter().map(|(_, c)| c.as_str())),
    );
    let unet = cfg.denoiser.init_params(&mut rng)?;
    let text = cfg.text.init_params(vocab.len(), &mut rng);
    let mut trainer = Trainer::new(
        cfg.denoiser,
        &vocab,
        cfg.schedule,
        unet,
        text,
        cfg.learning_rate,
        true,
    )?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        let mut prompts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (img, caption) = &corpus[rng.random_range(0..corpus.len())];
            images.push(img.clone());
            masks.push(sample_training_mask(&mut rng, h, w, &cfg.masks)?.1);
            prompts.push(pick_prompt(caption, cfg.cond_dropout, &mut rng));
        }
        let batch = TrainingBatch::sample(images, masks, &trainer.codec, &trainer.sched, &mut rng)?;
        let loss = trainer.step(&[Term {
            batch,
            prompts,
            weight: 1.0,
        }])?;
        progress(step, loss);
        losses.push(loss);
    }
    let (unet, text) = trainer.into_stores();
    let checkpoint = Checkpoint {
        kind: ModelKind::BaseInpaint,
        denoiser_config: cfg.denoiser,
        text_config: cfg.text,
        schedule: cfg.schedule,
        vocab,
        unet,
        text,
        meta: TrainingMeta {
            steps: cfg.steps,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            ..TrainingMeta::default()
        },
    };
    checkpoint.validate()?;
    Ok(TrainOutcome { checkpoint, losses })
}

/// A fine-tuning mask for a reference view: rectangle, ellipse, or the
/// jittered object silhouette.
pub fn finetune_mask(view: &ImageTensor, mix: &MaskMixture, rng: &mut impl Rng) -> Result<MaskTensor> {
    let (h, w) = (view.height(), view.width());
    match mix.draw_kind(rng) {
        MaskKind::Rect => rect_mask(rng, h, w, mix.rect_bounds),
        MaskKind::Ellipse => ellipse_mask(rng, h, w, mix.ellipse_bounds),
        MaskKind::Object => object_mask(view, rng, mix.jitter),
    }
}

/// Samples `count` images from `base` with prompt `"a {class_noun}"` on a
/// fully masked white canvas. Cached as PNGs under `cache_dir` when given.
pub fn class_prior_images(
    base: &Checkpoint,
    class_noun: &str,
    count: usize,
    size: (usize, usize),
    steps: Option<usize>,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<Vec<ImageTensor>> {
    let dir = cache_dir.map(|d| d.join(class_noun));
    if let Some(dir) = &dir {
        let cached: Vec<PathBuf> = (0..count).map(|k| dir.join(format!("class_{k:02}.png"))).collect();
        if cached.iter().all(|p| p.exists()) {
            return cached.iter().map(ImageTensor::read_png).collect();
        }
    }
    let prompt = format!("a {class_noun}");
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut req = SampleRequest::new(
            ImageTensor::filled(size.0, size.1, 1.0),
            MaskTensor::ones(size.0, size.1),
            prompt.clone(),
            seed.wrapping_add(k as u64),
        );
        req.steps = steps;
        out.push(inpaint_sample(&req, base)?);
    }
    if let Some(dir) = &dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, img) in out.iter().enumerate() {
            img.write_png(dir.join(format!("class_{k:02}.png")))?;
        }
    }
    Ok(out)
}

/// Masked fine-tuning of `base` on one catalog item. The base checkpoint is
/// left untouched; the result carries the item's token and class noun.
pub fn finetune_item(
    base: &Checkpoint,
    item: &CatalogItem,
    cfg: &FinetuneConfig,
    class_cache: Option<&Path>,
) -> Result<TrainOutcome> {
    finetune_item_with_progress(base, item, cfg, class_cache, |_, _| {})
}

pub fn finetune_item_with_progress(
    base: &Checkpoint,
    item: &CatalogItem,
    cfg: &FinetuneConfig,
    class_cache: Option<&Path>,
    mut progress: impl FnMut(usize, f32),
) -> Result<TrainOutcome> {
    if base.kind != ModelKind::BaseInpaint {
        return Err(Error::KindMismatch {
            expected: ModelKind::BaseInpaint.to_string(),
            found: base.kind.to_string(),
        });
    }
    if item.views.len() < crate::catalog::MIN_VIEWS {
        return Err(Error::TooFewViews(item.views.len()));
    }
    cfg.validate()?;
    let (h, w) = (item.views[0].height(), item.views[0].width());
    if item.views.iter().any(|v| v.height() != h || v.width() != w) {
        return Err(Error::Config(format!("views of {} differ in size", item.item_id)));
    }
    let token = item.meta.token.as_str();
    let class_noun = item.meta.class_noun.trim();
    if class_noun.is_empty() {
        return Err(Error::EmptyClassNoun);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vocab = base.vocab.clone();
    let mut text = base.text.clone();
    vocab.inject(token)?;
    grow_embedding(&mut text, &mut rng)?;
    if !vocab.contains(class_noun) {
        vocab.inject(class_noun)?;
        grow_embedding(&mut text, &mut rng)?;
    }
    let prompt = build_prompt(&vocab, token, class_noun, None)?;

    let class_images = if cfg.prior_preservation {
        let imgs = class_prior_images(
            base,
            class_noun,
            cfg.class_images,
            (h, w),
            cfg.class_sample_steps,
            cfg.seed ^ 0xC1A5_5000,
            class_cache,
        )?;
        Some(imgs)
    } else {
        None
    };
    let class_prompt = format!("a {class_noun}");

    let mut trainer = Trainer::new(
        base.denoiser_config,
        &vocab,
        base.schedule,
        base.unet.clone(),
        text,
        cfg.learning_rate,
        cfg.finetune_text_encoder,
    )?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let view = &item.views[rng.random_range(0..item.views.len())];
            masks.push(finetune_mask(view, &cfg.masks, &mut rng)?);
            images.push(view.clone());
        }
        let batch = TrainingBatch::sample(images, masks, &trainer.codec, &trainer.sched, &mut rng)?;
        let prompts = (0..cfg.batch_size)
            .map(|_| pick_prompt(&prompt, cfg.cond_dropout, &mut rng))
            .collect();
        let mut terms = vec![Term {
            batch,
            prompts,
            weight: 1.0,
        }];
        if let Some(class_images) = &class_images {
            let mut images = Vec::with_capacity(cfg.batch_size);
            let mut masks = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                images.push(class_images[rng.random_range(0..class_images.len())].clone());
                masks.push(sample_training_mask(&mut rng, h, w, &cfg.masks)?.1);
            }
            let batch = TrainingBatch::sample(images, masks, &trainer.codec, &trainer.sched, &mut rng)?;
            let prompts = (0..cfg.batch_size)
                .map(|_| pick_prompt(&class_prompt, cfg.cond_dropout, &mut rng))
                .collect();
            terms.push(Term {
                batch,
                prompts,
                weight: cfg.prior_weight,
            });
        }
        let loss = trainer.step(&terms)?;
        progress(step, loss);
        losses.push(loss);
    }
    let (unet, text) = trainer.into_stores();
    let checkpoint = Checkpoint {
        kind: ModelKind::FinetunedInpaint,
        denoiser_config: base.denoiser_config,
        text_config: base.text_config,
        schedule: base.schedule,
        vocab,
        unet,
        text,
        meta: TrainingMeta {
            steps: cfg.steps,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            token: Some(token.to_string()),
            class_noun: Some(class_noun.to_string()),
            prior_preservation: cfg.prior_preservation,
            finetune_text_encoder: cfg.finetune_text_encoder,
        },
    };
    checkpoint.validate()?;
    Ok(TrainOutcome { checkpoint, losses })
}

/// Loads fine-tuned weights into an inpainting model with `target` config.
pub fn transplant_weights(finetuned: &Checkpoint, target: DenoiserConfig) -> Result<Checkpoint> {
    transplant_into_layout(finetuned, &target.layout(), target)
}

/// Strict transplant against an explicit parameter layout: every name must
/// exist in the source with the same shape, and the source may not carry
/// extra denoiser tensors.
pub fn transplant_into_layout(
    finetuned: &Checkpoint,
    layout: &[(String, Vec<usize>)],
    target: DenoiserConfig,
) -> Result<Checkpoint> {
    if finetuned.kind != ModelKind::FinetunedInpaint {
        return Err(Error::KindMismatch {
            expected: ModelKind::FinetunedInpaint.to_string(),
            found: finetuned.kind.to_string(),
        });
    }
    if target.variant != Variant::Inpaint {
        return Err(Error::VariantMismatch(format!(
            "transplant target must be an inpaint denoiser, got {}",
            target.variant
        )));
    }
    let missing: Vec<String> = layout
        .iter()
        .filter(|(n, _)| !finetuned.unet.contains(n))
        .map(|(n, _)| n.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingKey(missing));
    }
    let mut unet = ParamStore::new();
    for (name, shape) in layout {
        let t = finetuned.unet.get(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ParamShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
        unet.insert(name.clone(), t.clone());
    }
    if unet.len() != finetuned.unet.len() {
        let extra: Vec<&str> = finetuned.unet.names().filter(|n| !unet.contains(n)).collect();
        return Err(Error::Format(format!(
            "source carries tensors the target does not declare: {}",
            extra.join(", ")
        )));
    }
    let out = Checkpoint {
        denoiser_config: target,
        unet,
        ..finetuned.clone()
    };
    codec_for(&out)?;
    Ok(out)
}

/// `runs/{run_id}` with an advisory lock held for the lifetime of the value.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub const LOCK_FILE: &'static str = ".lock";
    pub const CHECKPOINT_FILE: &'static str = "checkpoint.dpck";

    /// Creates (if needed) and locks `runs_root/run_id`.
    pub fn open(runs_root: &Path, run_id: &str) -> Result<Self> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(Error::Config(format!("invalid run id `{run_id}`")));
        }
        let root = runs_root.join(run_id);
        fs::create_dir_all(root.join("samples")).map_err(|e| Error::io(&root, e))?;
        let lock = root.join(Self::LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Locked(root));
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(Self { root, lock })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.root.join(Self::CHECKPOINT_FILE)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.root.join("loss_log.csv")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn class_prior_dir(&self) -> PathBuf {
        self.root.join("class_priors")
    }

    pub fn write_config(&self, config: &impl Serialize) -> Result<()> {
        let p = self.config_path();
        let json = serde_json::to_string_pretty(config)?;
        fs::write(&p, json).map_err(|e| Error::io(&p, e))
    }

    pub fn write_loss_log(&self, losses: &[f32]) -> Result<()> {
        let p = self.loss_log_path();
        let mut s = String::from("step,loss\n");
        for (i, l) in losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        fs::write(&p, s).map_err(|e| Error::io(&p, e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{render_item_views, render_scene, ItemMeta, ToyItemSpec};

    fn small_pretrain(steps: usize, seed: u64) -> PretrainConfig {
        let text = TextConfig {
            embed_dim: 8,
            hidden_dim: 16,
        };
        PretrainConfig {
            steps,
            batch_size: 2,
            seed,
            denoiser: DenoiserConfig {
                width: 8,
                depth: 1,
                cond_dim: text.cond_dim(),
                ..DenoiserConfig::default()
            },
            text,
            ..PretrainConfig::default()
        }
    }

    fn corpus(n: usize) -> Vec<(ImageTensor, String)> {
        (0..n as u64)
            .map(|s| {
                let sc = render_scene(s, 16);
                (sc.image, sc.caption)
            })
            .collect()
    }

    fn item(seed: u64, token: &str) -> CatalogItem {
        let spec = ToyItemSpec::generate(seed, false);
        CatalogItem {
            item_id: format!("item_{seed}"),
            meta: ItemMeta {
                class_noun: spec.class_noun.clone(),
                token: token.into(),
                title: spec.title.clone(),
            },
            views: render_item_views(&spec, 3, 16).unwrap(),
        }
    }

    #[test]
    fn pretrain_rejects_bad_inputs() {
        assert!(matches!(pretrain(&[], &small_pretrain(1, 0)), Err(Error::EmptyCorpus)));
        assert!(matches!(pretrain(&corpus(2), &small_pretrain(0, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn pretrain_is_deterministic() {
        let c = corpus(3);
        let a = pretrain(&c, &small_pretrain(3, 7)).unwrap();
        let b = pretrain(&c, &small_pretrain(3, 7)).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoint.kind, ModelKind::BaseInpaint);
    }

    #[test]
    fn finetune_keeps_base_and_respects_frozen_text() {
        let base = pretrain(&corpus(3), &small_pretrain(2, 1)).unwrap().checkpoint;
        let snapshot = base.clone();
        let cfg = FinetuneConfig {
            steps: 2,
            batch_size: 2,
            finetune_text_encoder: false,
            ..FinetuneConfig::toy()
        };
        let out = finetune_item(&base, &item(3, "zqxv"), &cfg, None).unwrap().checkpoint;
        assert_eq!(base, snapshot);
        assert_eq!(out.kind, ModelKind::FinetunedInpaint);
        assert_eq!(out.meta.token.as_deref(), Some("zqxv"));
        // Old rows untouched; the only change is the appended token row.
        let old = base.text.get(crate::text::EMBEDDING).unwrap();
        let new = out.text.get(crate::text::EMBEDDING).unwrap();
        assert_eq!(&new.data()[..old.numel()], old.data());
        for name in [crate::text::MIX1_W, crate::text::MIX1_B, crate::text::MIX2_W, crate::text::MIX2_B] {
            assert_eq!(out.text.get(name).unwrap(), base.text.get(name).unwrap());
        }
        assert_ne!(out.unet, base.unet);

        let again = finetune_item(&base, &item(3, "zqxv"), &cfg, None).unwrap().checkpoint;
        assert_eq!(again, out);

        assert!(matches!(
            finetune_item(&out, &item(3, "wqrt"), &cfg, None),
            Err(Error::KindMismatch { .. })
        ));
        let mut short = item(3, "wqrt");
        short.views.truncate(2);
        assert!(matches!(finetune_item(&base, &short, &cfg, None), Err(Error::TooFewViews(2))));
    }

    #[test]
    fn transplant_strictness() {
        let base = pretrain(&corpus(2), &small_pretrain(1, 2)).unwrap().checkpoint;
        let cfg = FinetuneConfig {
            steps: 1,
            batch_size: 1,
            ..FinetuneConfig::toy()
        };
        let ft = finetune_item(&base, &item(4, "plmk"), &cfg, None).unwrap().checkpoint;
        let same = transplant_weights(&ft, ft.denoiser_config).unwrap();
        assert_eq!(same.unet, ft.unet);
        assert_eq!(same.vocab, ft.vocab);

        assert!(matches!(
            transplant_weights(&base, base.denoiser_config),
            Err(Error::KindMismatch { .. })
        ));
        let mut renamed = ft.denoiser_config.layout();
        renamed[3].0 = format!("{}_renamed", renamed[3].0);
        match transplant_into_layout(&ft, &renamed, ft.denoiser_config) {
            Err(Error::MissingKey(names)) => assert_eq!(names, vec![renamed[3].0.clone()]),
            other => panic!("expected missing key, got {other:?}"),
        }
        let wide = DenoiserConfig {
            width: 12,
            ..ft.denoiser_config
        };
        assert!(matches!(
            transplant_weights(&ft, wide),
            Err(Error::ParamShapeMismatch { .. })
        ));
        let base_variant = DenoiserConfig {
            variant: Variant::Base,
            ..ft.denoiser_config
        };
        assert!(matches!(
            transplant_weights(&ft, base_variant),
            Err(Error::VariantMismatch(_))
        ));
    }

    #[test]
    fn run_dir_lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::open(dir.path(), "r1").unwrap();
        assert!(matches!(RunDir::open(dir.path(), "r1"), Err(Error::Locked(_))));
        run.write_loss_log(&[1.0, 0.5]).unwrap();
        let log = fs::read_to_string(run.loss_log_path()).unwrap();
        assert_eq!(log, "step,loss\n0,1\n1,0.5\n");
        drop(run);
        assert!(RunDir::open(dir.path(), "r1").is_ok());
        assert!(RunDir::open(dir.path(), "../x").is_err());
    }

    #[test]
    fn running_loss_windows() {
        let l = [4.0, 2.0, 1.0, 1.0];
        assert_eq!(running_loss_endpoints(&l, 2), Some((3.0, 1.0)));
        assert_eq!(running_loss_endpoints(&[], 2), None);
    }
}
