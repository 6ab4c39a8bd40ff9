use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Subcommand, ValueEnum};
use dreampaint_core::catalog::{benchmark_masks, build_benchmark, load_corpus, render_scene, AblationTag};
use dreampaint_core::eval::{
    mask_size_sweep, run_benchmark, scorer_sanity, train_scorer, MethodModel, ScorerKind, SweepRow, DREAMPAINT,
    TEXT_ONLY,
};
use dreampaint_core::masks::object_footprint;
use dreampaint_core::pipeline::{finetune_item_with_progress, pretrain_with_progress};
use dreampaint_core::text::build_prompt;
use dreampaint_core::{
    inpaint_sample, CatalogItem, Checkpoint, ConvScorer, FeatureScorer, ImageTensor, Manifest, MaskShape, MaskTensor,
    ModelKind, RunDir, SampleRequest,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::CliConfig;
use crate::ArgError;

const RUNS_ENV: &str = "DREAMPAINT_RUNS";
const DEFAULT_RUNS: &str = "runs";
/// Run id the evaluator looks up for the base model.
const BASE_RUN: &str = "base";
/// Minimum same-item minus different-item similarity for a usable scorer.
const SCORER_MARGIN: f64 = 0.05;

fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS))
}

/// A bare name is a run id under the runs root; anything with a directory
/// component is taken as the run directory itself.
fn resolve_run(out: &Path) -> anyhow::Result<(PathBuf, String)> {
    let id = out
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| ArgError(format!("invalid run `{}`", out.display())))?
        .to_string();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty());
    Ok((parent.map(Path::to_path_buf).unwrap_or_else(runs_root), id))
}

/// What gets echoed to `config.json` in a run directory.
#[derive(Serialize)]
struct Echo<'a, A: Serialize, C: Serialize> {
    command: &'a str,
    profile: crate::config::Profile,
    args: &'a A,
    config: &'a C,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn echo_path(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Write catalog/, scenes/, corpus/, and manifest.json
    Gen(DatasetArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DatasetArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Catalog items [default: 10]
    #[arg(long)]
    items: Option<usize>,
    /// Benchmark scenes [default: 3]
    #[arg(long)]
    scenes: Option<usize>,
    /// Reference views per item [default: 5]
    #[arg(long)]
    views: Option<usize>,
    /// Pretraining corpus scenes [default: 200]
    #[arg(long)]
    corpus: Option<usize>,
    /// Items given rare class nouns [default: 3]
    #[arg(long)]
    rare_items: Option<usize>,
    /// Image side in pixels [default: 32]
    #[arg(long)]
    size: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

pub fn dataset(cmd: DatasetCommand, cfg: CliConfig) -> anyhow::Result<()> {
    let DatasetCommand::Gen(args) = cmd;
    let mut c = cfg.dataset;
    c.items = args.items.unwrap_or(c.items);
    c.scenes = args.scenes.unwrap_or(c.scenes);
    c.views = args.views.unwrap_or(c.views);
    c.corpus = args.corpus.unwrap_or(c.corpus);
    c.rare_items = args.rare_items.unwrap_or(c.rare_items).min(c.items);
    c.size = args.size.unwrap_or(c.size);
    c.seed = args.seed.unwrap_or(c.seed);
    let manifest = build_benchmark(&c, &args.out)?;
    println!(
        "wrote {} items, {} scenes, {} triples, {} corpus images to {} (manifest {})",
        manifest.items.len(),
        manifest.scenes.len(),
        manifest.triples.len(),
        c.corpus,
        args.out.display(),
        manifest.hash()?
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Dataset directory (or its corpus/ subdirectory)
    #[arg(long)]
    data: PathBuf,
    /// Run id under the runs root, or a run directory path
    #[arg(long)]
    out: PathBuf,
    /// [default: 2000]
    #[arg(long)]
    steps: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

pub fn pretrain(args: PretrainArgs, cfg: CliConfig) -> anyhow::Result<()> {
    let mut c = cfg.pretrain;
    c.steps = args.steps.unwrap_or(c.steps);
    c.batch_size = args.batch_size.unwrap_or(c.batch_size);
    c.learning_rate = args.lr.unwrap_or(c.learning_rate);
    c.seed = args.seed.unwrap_or(c.seed);
    let corpus_dir = if args.data.join("corpus").is_dir() {
        args.data.join("corpus")
    } else {
        args.data.clone()
    };
    let corpus = load_corpus(&corpus_dir)?;
    let (root, id) = resolve_run(&args.out)?;
    let run = RunDir::open(&root, &id)?;
    run.write_config(&Echo {
        command: "pretrain",
        profile: cfg.profile,
        args: &args,
        config: &c,
    })?;
    let t = Instant::now();
    let every = (c.steps / 20).max(1);
    let out = pretrain_with_progress(&corpus, &c, |step, loss| {
        if step % every == 0 || step + 1 == c.steps {
            log::info!("pretrain step {step}/{} loss {loss:.4} ({:.0?})", c.steps, t.elapsed());
        }
    })?;
    out.checkpoint.save(&run.checkpoint_path())?;
    run.write_loss_log(&out.losses)?;
    println!("{}", run.checkpoint_path().display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    /// Base inpainting checkpoint
    #[arg(long)]
    base: PathBuf,
    /// Catalog item directory (meta.json and views/)
    #[arg(long)]
    item: PathBuf,
    /// Unique token bound to the item
    #[arg(long)]
    token: String,
    /// Class noun the item belongs to
    #[arg(long)]
    class_noun: String,
    /// [default: 400, paper-scale 500]
    #[arg(long)]
    steps: Option<usize>,
    /// [default: 1e-3, paper-scale 5e-6]
    #[arg(long)]
    lr: Option<f64>,
    /// Add the class-prior preservation term
    #[arg(long)]
    prior_preservation: bool,
    /// Keep the text encoder at its base weights
    #[arg(long)]
    freeze_text_encoder: bool,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Run id under the runs root, or a run directory path
    #[arg(long)]
    out: PathBuf,
}

pub fn finetune(args: FinetuneArgs, cfg: CliConfig) -> anyhow::Result<()> {
    let mut c = cfg.finetune;
    c.steps = args.steps.unwrap_or(c.steps);
    c.learning_rate = args.lr.unwrap_or(c.learning_rate);
    c.prior_preservation |= args.prior_preservation;
    c.finetune_text_encoder &= !args.freeze_text_encoder;
    c.seed = args.seed.unwrap_or(c.seed);
    let token = args.token.trim();
    if token.is_empty() || token.split_whitespace().count() != 1 {
        return Err(ArgError(format!("--token must be a single word, got `{}`", args.token)).into());
    }
    if args.class_noun.trim().is_empty() {
        return Err(ArgError("--class-noun must not be empty".into()).into());
    }
    let base = Checkpoint::load(&args.base)?;
    let mut item = CatalogItem::load(&args.item)?;
    item.meta.token = token.to_string();
    item.meta.class_noun = args.class_noun.trim().to_string();

    let (root, id) = resolve_run(&args.out)?;
    let run = RunDir::open(&root, &id)?;
    run.write_config(&Echo {
        command: "finetune",
        profile: cfg.profile,
        args: &args,
        config: &c,
    })?;
    let cache = c.prior_preservation.then(|| run.class_prior_dir());
    let every = (c.steps / 10).max(1);
    let out = finetune_item_with_progress(&base, &item, &c, cache.as_deref(), |step, loss| {
        if step % every == 0 || step + 1 == c.steps {
            log::info!("finetune step {step}/{} loss {loss:.4}", c.steps);
        }
    })?;
    out.checkpoint.save(&run.checkpoint_path())?;
    run.write_loss_log(&out.losses)?;

    let preview = preview(&item, &out.checkpoint, c.seed)?;
    preview.write_png(run.samples_dir().join(dreampaint_service::PREVIEW_FILE))?;
    println!("{}", run.checkpoint_path().display());
    Ok(())
}

/// The concept inpainted into a generated scene under a fitting mask.
fn preview(item: &CatalogItem, ckpt: &Checkpoint, seed: u64) -> anyhow::Result<ImageTensor> {
    let size = item.views[0].height();
    let scene = render_scene(seed, size).image;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fit, _) = benchmark_masks(&mut rng, object_footprint(&item.views)?, size, true);
    let mask = fit.rasterize(size, size);
    let prompt = build_prompt(&ckpt.vocab, &item.meta.token, &item.meta.class_noun, None)?;
    let mut req = SampleRequest::new(scene, mask, prompt, seed);
    req.concept_token = Some(item.meta.token.clone());
    Ok(inpaint_sample(&req, ckpt)?)
}

#[derive(Debug, Args, Serialize)]
pub struct InpaintArgs {
    /// Checkpoint (fine-tuned, or base together with --prompt)
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image PNG
    #[arg(long)]
    image: PathBuf,
    /// Mask PNG; bright pixels are repainted
    #[arg(long)]
    mask: PathBuf,
    /// Words appended to the concept prompt
    #[arg(long)]
    prompt_extra: Option<String>,
    /// Full prompt; required for base checkpoints
    #[arg(long)]
    prompt: Option<String>,
    /// Classifier-free guidance scale
    #[arg(long, default_value_t = dreampaint_core::DEFAULT_GUIDANCE)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Denoising steps (strided); full chain when omitted
    #[arg(long)]
    steps: Option<usize>,
    /// Keep sampled pixels outside the mask
    #[arg(long)]
    no_composite: bool,
    /// Output PNG
    #[arg(long)]
    out: PathBuf,
}

pub fn inpaint(args: InpaintArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let image = ImageTensor::read_png(&args.image)?;
    let mask = MaskTensor::read_png(&args.mask)?;
    let (prompt, token) = match (&args.prompt, &ckpt.meta.token, &ckpt.meta.class_noun) {
        (Some(p), _, _) if args.prompt_extra.is_none() => (p.clone(), None),
        (Some(_), _, _) => return Err(ArgError("--prompt and --prompt-extra are exclusive".into()).into()),
        (None, Some(token), Some(noun)) if ckpt.kind == ModelKind::FinetunedInpaint => (
            build_prompt(&ckpt.vocab, token, noun, args.prompt_extra.as_deref())?,
            Some(token.clone()),
        ),
        (None, ..) => return Err(ArgError("checkpoint has no concept token; pass --prompt".into()).into()),
    };
    let mut req = SampleRequest::new(image, mask, prompt, args.seed);
    req.guidance = args.guidance;
    req.steps = args.steps;
    req.composite_unmasked = !args.no_composite;
    req.concept_token = token;
    let out = inpaint_sample(&req, &ckpt)?;
    out.write_png(&args.out)?;
    log::info!("prompt `{}`", req.prompt);
    println!("{}", args.out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerChoice {
    /// Contrastively trained encoder (trained once, cached)
    Trained,
    /// Seeded random convolution features
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TagChoice {
    Fit,
    Oversized,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct ScorerArgs {
    #[arg(long, value_enum, default_value_t = ScorerChoice::Trained)]
    scorer: ScorerChoice,
    /// Trained-scorer cache [default: <runs>/_scorer.json]
    #[arg(long)]
    scorer_cache: Option<PathBuf>,
    /// Proceed even when the scorer fails the same-item sanity margin
    #[arg(long)]
    allow_weak_scorer: bool,
}

impl ScorerArgs {
    fn load(&self, cfg: &CliConfig, runs: &Path, sanity_items: &[Vec<ImageTensor>]) -> anyhow::Result<ConvScorer> {
        let scorer = match self.scorer {
            ScorerChoice::Random => ConvScorer::random(cfg.scorer.seed, cfg.scorer.size)?,
            ScorerChoice::Trained => {
                let path = self.scorer_cache.clone().unwrap_or_else(|| runs.join("_scorer.json"));
                let stamp = echo_path(&path);
                let stamp_matches = fs::read(&stamp)
                    .ok()
                    .and_then(|b| serde_json::from_slice::<dreampaint_core::eval::ScorerTrainConfig>(&b).ok())
                    .is_some_and(|c| c == cfg.scorer);
                match ConvScorer::load(&path) {
                    Ok(s) if stamp_matches && s.kind == ScorerKind::Contrastive => s,
                    _ => {
                        log::info!("training scorer ({} steps)", cfg.scorer.steps);
                        let (s, _) = train_scorer(&cfg.scorer)?;
                        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                            fs::create_dir_all(parent)?;
                        }
                        s.save(&path)?;
                        write_json(&stamp, &cfg.scorer)?;
                        s
                    }
                }
            }
        };
        if sanity_items.len() >= 2 {
            let sanity = scorer_sanity(&scorer, sanity_items)?;
            log::info!(
                "scorer {}: same-item {:.3}, different-item {:.3}",
                scorer.id(),
                sanity.same_item,
                sanity.different_item
            );
            if sanity.margin() <= SCORER_MARGIN && !self.allow_weak_scorer {
                bail!(dreampaint_core::Error::Config(format!(
                    "scorer {} separates items by only {:.3} (need > {SCORER_MARGIN}); pass --allow-weak-scorer to proceed",
                    scorer.id(),
                    sanity.margin()
                )));
            }
        }
        Ok(scorer)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Benchmark manifest.json (catalog/ and scenes/ beside it)
    #[arg(long)]
    manifest: PathBuf,
    /// Runs directory holding `base/` and one run per item id [default: $DREAMPAINT_RUNS or runs]
    #[arg(long)]
    runs: Option<PathBuf>,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Report JSON; the table goes to stdout
    #[arg(long)]
    out: PathBuf,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 10]
    #[arg(long)]
    guidance: Option<f64>,
    /// Denoising steps (strided); full chain when omitted
    #[arg(long)]
    steps: Option<usize>,
    /// Mask set to evaluate [default: fit]
    #[arg(long, value_enum)]
    tag: Option<TagChoice>,
    /// Restrict to these item ids
    #[arg(long, value_delimiter = ',')]
    items: Vec<String>,
}

pub fn eval(args: EvalArgs, cfg: CliConfig) -> anyhow::Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    let data_root = args.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let runs = args.runs.clone().unwrap_or_else(runs_root);
    let mut opts = cfg.benchmark.clone();
    opts.seed = args.seed.unwrap_or(opts.seed);
    opts.guidance = args.guidance.unwrap_or(opts.guidance);
    opts.steps = args.steps.or(opts.steps);
    match args.tag {
        Some(TagChoice::Fit) => opts.tag = Some(AblationTag::Fit),
        Some(TagChoice::Oversized) => opts.tag = Some(AblationTag::Oversized),
        Some(TagChoice::All) => opts.tag = None,
        None => {}
    }
    if !args.items.is_empty() {
        for id in &args.items {
            if manifest.item(id).is_none() {
                return Err(ArgError(format!("unknown item `{id}`")).into());
            }
        }
        opts.items = Some(args.items.clone());
    }
    let item_ids: Vec<&str> = manifest
        .items
        .iter()
        .map(|i| i.item_id.as_str())
        .filter(|id| opts.items.as_ref().is_none_or(|ids| ids.iter().any(|x| x == id)))
        .collect();

    let base = Checkpoint::load(&runs.join(BASE_RUN).join(RunDir::CHECKPOINT_FILE))?;
    let mut concepts = BTreeMap::new();
    for id in &item_ids {
        let p = runs.join(id).join(RunDir::CHECKPOINT_FILE);
        if !p.is_file() {
            return Err(dreampaint_core::Error::MissingCheckpoint(id.to_string()).into());
        }
        concepts.insert(id.to_string(), Checkpoint::load(&p)?);
    }
    let views = item_ids
        .iter()
        .map(|id| Ok(CatalogItem::load(data_root.join("catalog").join(id))?.views))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let scorer = args.scorer.load(&cfg, &runs, &views)?;

    let mut methods = BTreeMap::new();
    methods.insert(DREAMPAINT.to_string(), MethodModel::Concept(&concepts));
    methods.insert(TEXT_ONLY.to_string(), MethodModel::Title(&base));
    let report = run_benchmark(&manifest, &data_root, &methods, &scorer, &opts)?;
    fs::write(&args.out, report.to_json()?).with_context(|| format!("writing {}", args.out.display()))?;
    write_json(
        &echo_path(&args.out),
        &Echo {
            command: "eval",
            profile: cfg.profile,
            args: &args,
            config: &opts,
        },
    )?;
    print!("{}", report.table());
    let (wins, items) = report.item_wins(DREAMPAINT, TEXT_ONLY);
    println!("per-item wins {DREAMPAINT} vs {TEXT_ONLY}: {wins}/{items}");
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct MasksweepArgs {
    /// Catalog item directory
    #[arg(long)]
    item: PathBuf,
    /// Square scene PNG
    #[arg(long)]
    scene: PathBuf,
    /// Mask area multiples of the fitting mask
    #[arg(long, value_delimiter = ',', default_value = "1.0,2.0,3.0")]
    scales: Vec<f64>,
    /// Fine-tuned checkpoint of the item (a base checkpoint uses the item title)
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Use an elliptic fitting mask instead of a rectangle
    #[arg(long)]
    ellipse: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    item: &'a str,
    scorer_id: String,
    prompt: &'a str,
    fit_mask: MaskShape,
    rows: Vec<SweepRow>,
}

pub fn masksweep(args: MasksweepArgs, cfg: CliConfig) -> anyhow::Result<()> {
    if args.scales.is_empty() {
        return Err(ArgError("--scales needs at least one value".into()).into());
    }
    let item = CatalogItem::load(&args.item)?;
    let scene = ImageTensor::read_png(&args.scene)?;
    if scene.height() != scene.width() {
        return Err(ArgError(format!("scene must be square, got {}x{}", scene.height(), scene.width())).into());
    }
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let prompt = match (&ckpt.meta.token, &ckpt.meta.class_noun) {
        (Some(t), Some(n)) if ckpt.kind == ModelKind::FinetunedInpaint => build_prompt(&ckpt.vocab, t, n, None)?,
        _ => item.meta.title.clone(),
    };
    let scorer = args.scorer.load(&cfg, &runs_root(), &[])?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (fit, _) = benchmark_masks(&mut rng, object_footprint(&item.views)?, scene.height(), args.ellipse);
    let rows = mask_size_sweep(&item.views, &scene, &fit, &args.scales, &ckpt, &prompt, &scorer, args.seed)?;
    for r in &rows {
        println!("scale {:>5.2}  pixels {:>4}  score {:.4}{}", r.scale, r.mask_pixels, r.score, if r.clipped { "  (clipped)" } else { "" });
    }
    write_json(
        &args.out,
        &SweepReport {
            item: &item.item_id,
            scorer_id: scorer.id(),
            prompt: &prompt,
            fit_mask: fit,
            rows,
        },
    )?;
    write_json(
        &echo_path(&args.out),
        &Echo {
            command: "masksweep",
            profile: cfg.profile,
            args: &args,
            config: &cfg.scorer,
        },
    )
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Runs directory scanned for concepts [default: $DREAMPAINT_RUNS or runs]
    #[arg(long)]
    runs: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Inference worker threads [default: available cores]
    #[arg(long)]
    workers: Option<usize>,
    /// Allowed CORS origin [default: any]
    #[arg(long)]
    cors_origin: Option<String>,
}

pub fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let mut config = dreampaint_service::ServiceConfig::new(args.runs.unwrap_or_else(runs_root));
    if let Some(w) = args.workers {
        config.workers = w;
    }
    config.cors_origin = args.cors_origin;
    let addr = SocketAddr::new(args.host, args.port);
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(dreampaint_service::serve(config, addr))?;
    Ok(())
}
