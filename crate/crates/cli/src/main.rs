use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use storymaker_core::backbone::{SamplerConfig, Vae, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use storymaker_core::checkpoint::{self, RunManifest};
use storymaker_core::encoders::Encoders;
use storymaker_core::eval::{self, EvalConfig};
use storymaker_core::pretrain::{self, BaseModel, BasePretrainConfig, EncoderPretrainConfig, VaePretrainConfig};
use storymaker_core::story::StoryModel;
use storymaker_core::synthdata::{self, palette, Dataset, PoseMap, SceneSpec};
use storymaker_core::trainer::{self, TrainConfig, Trainer, CSV_HEADER};
use storymaker_core::{Error, Result};
use tracing::info;

const ENCODERS_FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/encoders");
const VAE_FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/vae");
const BASE_FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/base");

#[derive(Parser)]
#[command(name = "storymaker", version, about = "Toy character-consistent diffusion: data, training, sampling and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene dataset to a directory.
    Synth(SynthArgs),
    /// Pretrain the face and character encoders.
    PretrainEncoders(PretrainEncodersArgs),
    /// Pretrain the VAE and the text-conditioned base U-Net.
    PretrainBase(PretrainBaseArgs),
    /// Train the story model on top of the pretrained base.
    Train(TrainArgs),
    /// Sample images of reference characters for a list of captions.
    Generate(GenerateArgs),
    /// Score a checkpoint on held-out identities.
    Eval(EvalArgs),
    /// Dump per-layer region attention maps and the leakage matrix.
    InspectAttn(InspectArgs),
}

/// Frozen components shared by the story commands.
#[derive(Args)]
struct Frozen {
    #[arg(long, default_value = ENCODERS_FIXTURE)]
    encoders: PathBuf,
    #[arg(long, default_value = VAE_FIXTURE)]
    vae: PathBuf,
}

impl Frozen {
    fn load(&self) -> Result<(Encoders, Vae)> {
        Ok((Encoders::load(&self.encoders)?, Vae::load(&self.vae)?.0))
    }

    fn record(&self, m: RunManifest) -> Result<RunManifest> {
        m.checkpoint("encoders", &self.encoders)?.checkpoint("vae", &self.vae)
    }
}

#[derive(Args)]
struct Sampling {
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    sample_steps: usize,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
    guidance: f64,
    /// Seed of the initial sampling noise.
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

impl Sampling {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sample_steps,
            guidance: self.guidance,
            seed: self.sample_seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    frozen: Frozen,
    #[arg(long, default_value = BASE_FIXTURE)]
    base: PathBuf,
    /// TOML or JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Comma-separated attention layers used by the attention loss.
    #[arg(long, value_delimiter = ',')]
    attn_loss_layers: Option<Vec<usize>>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    frozen: Frozen,
    #[command(flatten)]
    sampling: Sampling,
    /// Story checkpoint, or a base checkpoint for an untrained model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Palette identity of each reference character, in slot order.
    #[arg(long = "identity", required = true)]
    identities: Vec<u32>,
    /// Seed of the reference rendering (pose and clothing).
    #[arg(long, default_value_t = 0)]
    reference_seed: u64,
    /// One caption per image, in the closed caption vocabulary.
    #[arg(long = "prompt", required = true)]
    prompts: Vec<String>,
    /// Seed of the target layouts fed to the pose branch.
    #[arg(long, default_value_t = 1)]
    pose_seed: u64,
    /// JSON pose map used for every prompt instead of seeded layouts.
    #[arg(long, conflicts_with = "no_pose")]
    pose: Option<PathBuf>,
    /// Scale of the image-prompt attention term.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Skip the pose branch.
    #[arg(long)]
    no_pose: bool,
    /// Zero the character features (face only).
    #[arg(long)]
    zero_character: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    frozen: Frozen,
    #[command(flatten)]
    sampling: Sampling,
    /// Story checkpoint, or a base checkpoint for an untrained model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory of reference scenes; held-out identities by default.
    #[arg(long)]
    eval_set: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    prompts_per_ref: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = EvalConfig::default().pair_scenes)]
    pair_scenes: usize,
    /// Score the references against themselves instead of generating.
    #[arg(long)]
    self_check: bool,
    /// Report path; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    frozen: Frozen,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene seed; the scene uses held-out identities.
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    #[arg(long, default_value_t = 2)]
    characters: usize,
    #[arg(long, default_value_t = 500)]
    timestep: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    count: usize,
    /// Fraction of single-character scenes.
    #[arg(long, default_value_t = storymaker_core::synthdata::DEFAULT_MIX)]
    mix: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainEncodersArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = EncoderPretrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = EncoderPretrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = EncoderPretrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = EncoderPretrainConfig::default().seed)]
    seed: u64,
}

#[derive(Args)]
struct PretrainBaseArgs {
    /// Pretrained encoders (for caption features).
    #[arg(long)]
    encoders: PathBuf,
    /// Where to write the VAE; an existing VAE checkpoint here is reused.
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = VaePretrainConfig::default().steps)]
    vae_steps: usize,
    #[arg(long, default_value_t = BasePretrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = BasePretrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = BasePretrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = BasePretrainConfig::default().seed)]
    seed: u64,
}

fn synth(a: SynthArgs) -> Result<()> {
    let ds = storymaker_core::synthdata::generate_dataset(a.count, a.mix, a.seed)?;
    let manifest = storymaker_core::synthdata::io::write_dataset(&ds, &a.out)?;
    info!(scenes = manifest.entries.len(), out = %a.out.display(), "dataset written");
    Ok(())
}

fn pretrain_encoders(a: PretrainEncodersArgs) -> Result<()> {
    let cfg = EncoderPretrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let (enc, report) = pretrain::pretrain_encoders(&cfg)?;
    enc.save(&a.out, serde_json::json!({ "config": cfg, "report": report }))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn pretrain_base(a: PretrainBaseArgs) -> Result<()> {
    let encoders = Encoders::load(&a.encoders)?;
    let vae = if a.vae.join("manifest.json").exists() {
        info!(path = %a.vae.display(), "reusing vae");
        Vae::load(&a.vae)?.0
    } else {
        let cfg = VaePretrainConfig {
            steps: a.vae_steps,
            ..Default::default()
        };
        let (vae, meta) = pretrain::pretrain_vae(&cfg)?;
        vae.save(&a.vae, meta)?;
        println!("vae: scale {:.4}, psnr {:.2} dB", meta.scale_factor, meta.psnr_db);
        vae
    };
    let cfg = BasePretrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let (base, tail) = pretrain::pretrain_base(&cfg, &encoders, &vae)?;
    base.save(&a.out, serde_json::json!({ "config": cfg, "final_loss": tail }))?;
    println!("base: final loss {tail:.5}");
    Ok(())
}

/// Loads a story checkpoint, or wraps a base checkpoint in fresh story
/// parameters.
fn load_story(path: &Path) -> Result<StoryModel> {
    let manifest = checkpoint::read_manifest(path)?;
    if manifest.kind == pretrain::BASE_KIND {
        info!(path = %path.display(), "untrained story model on a base checkpoint");
        StoryModel::from_base(&BaseModel::load(path)?, 0)
    } else {
        Ok(StoryModel::load(path)?.0)
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    let apply = |c: &mut TrainConfig| {
        if let Some(v) = a.steps {
            c.total_steps = v;
        }
        if let Some(v) = a.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = a.lambda {
            c.lambda = v;
        }
        if let Some(v) = a.seed {
            c.seed = v;
        }
        if let Some(v) = a.checkpoint_interval {
            c.checkpoint_interval = v;
        }
        if let Some(v) = &a.attn_loss_layers {
            c.attn_loss_layers = v.clone();
        }
    };
    apply(&mut config);
    config.validate()?;
    let (encoders, vae) = a.frozen.load()?;
    let mut trainer = match &a.resume {
        Some(dir) => {
            let saved: TrainConfig = serde_json::from_value(checkpoint::read_manifest(dir)?.meta["train"]["config"].clone())
                .map_err(|e| Error::checkpoint(dir, e.to_string()))?;
            let data = Arc::new(trainer::prepare_data(&saved, &encoders, &vae)?);
            let mut t = Trainer::resume(dir, data)?;
            apply(&mut t.config);
            t.config.validate()?;
            info!(step = t.step, "resumed");
            t
        }
        None => {
            let data = Arc::new(trainer::prepare_data(&config, &encoders, &vae)?);
            let model = StoryModel::from_base(&BaseModel::load(&a.base)?, config.seed)?;
            Trainer::new(config, model, data)?
        }
    };
    std::fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join("loss.csv");
    let fresh = a.resume.is_none() || !csv_path.exists();
    let mut csv = BufWriter::new(OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&csv_path)?);
    if fresh {
        writeln!(csv, "{CSV_HEADER}")?;
    }
    trainer.run(Some(&mut csv), Some(&a.out.join("checkpoints")))?;
    csv.flush()?;
    let final_dir = a.out.join("final");
    trainer.save_checkpoint(&final_dir)?;
    let mut m = a.frozen.record(RunManifest::new("train", &trainer.config)?)?;
    if a.resume.is_none() {
        m = m.checkpoint("base", &a.base)?;
    }
    if let Some(dir) = &a.resume {
        m = m.checkpoint("resumed_from", dir)?;
    }
    m.checkpoint("final", &final_dir)?
        .seed("train", trainer.config.seed)
        .seed("dataset", trainer.config.dataset_seed)
        .write(&a.out.join("run_manifest.json"))?;
    info!(out = %final_dir.display(), "training finished");
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let (encoders, vae) = a.frozen.load()?;
    let model = load_story(&a.checkpoint)?;
    let max = model.config.ppr.max_characters;
    if a.identities.is_empty() || a.identities.len() > max {
        return Err(Error::invalid(format!("{} reference characters; between 1 and {max} are supported", a.identities.len())));
    }
    let size = synthdata::CANVAS_SIZE;
    let reference = synthdata::generate_scene(&SceneSpec::new(a.identities.clone(), a.reference_seed, 0, 0), a.reference_seed)?;
    let refs: Vec<_> = reference.characters.iter().collect();
    let bundle = model.conditioning(&encoders, &refs, a.zero_character)?;
    let hash = bundle.hash()?;
    let captions = a.prompts.iter().map(|p| palette::tokenize(p)).collect::<Result<Vec<_>>>()?;
    let layouts: Vec<PoseMap> = match &a.pose {
        Some(path) => {
            let pose: PoseMap = serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            if pose.canvas_size != size || pose.characters.len() != a.identities.len() {
                return Err(Error::invalid(format!(
                    "pose file must describe {} characters on a {size}px canvas",
                    a.identities.len()
                )));
            }
            vec![pose; captions.len()]
        }
        None => (0..captions.len())
            .map(|i| {
                let seed = a.pose_seed.wrapping_add(i as u64);
                Ok(synthdata::generate_scene(&SceneSpec::new(a.identities.clone(), seed, 0, 0), seed)?.pose)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    model.set_gamma(a.gamma)?;
    let poses: Vec<_> = layouts.iter().collect();
    let bundles = vec![&bundle; captions.len()];
    let caption_refs: Vec<&[u32]> = captions.iter().map(Vec::as_slice).collect();
    let images = model.generate(
        &vae,
        &encoders,
        Some(&bundles),
        &caption_refs,
        (!a.no_pose).then_some(poses.as_slice()),
        size,
        a.sampling.config(),
    )?;
    std::fs::create_dir_all(&a.out)?;
    eval::write_rgb_png(&a.out.join("reference.png"), &reference.image, size)?;
    for (i, (img, prompt)) in images.iter().zip(&a.prompts).enumerate() {
        if img.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("generated image {i}")));
        }
        let name = format!("image_{i:03}.png");
        eval::write_rgb_png(&a.out.join(&name), img, size)?;
        info!(prompt = %prompt, bundle = %hash, file = %name, "generated");
    }
    let m = RunManifest::new("generate", &serde_json::json!({
        "identities": a.identities,
        "prompts": a.prompts,
        "reference_seed": a.reference_seed,
        "pose_seed": a.pose_seed,
        "no_pose": a.no_pose,
        "pose_file": a.pose,
        "gamma": a.gamma,
        "zero_character": a.zero_character,
        "sampler": a.sampling.config(),
        "bundle_sha256": hash,
    }))?;
    a.frozen
        .record(m)?
        .checkpoint("story", &a.checkpoint)?
        .seed("sample", a.sampling.sample_seed)
        .seed("reference", a.reference_seed)
        .seed("pose", a.pose_seed)
        .write(&a.out.join("run_manifest.json"))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (encoders, vae) = a.frozen.load()?;
    let eval_set: Dataset = match &a.eval_set {
        Some(dir) => synthdata::io::read_dataset(dir)?.0,
        None => synthdata::generate_eval_set(a.seed)?,
    };
    let text = if a.self_check {
        serde_json::to_string_pretty(&eval::reference_self_report(&encoders, &eval_set)?)? + "\n"
    } else {
        let model = load_story(&a.checkpoint)?;
        let config = EvalConfig {
            prompts_per_ref: a.prompts_per_ref,
            sampler: a.sampling.config(),
            seed: a.seed,
            pair_scenes: a.pair_scenes,
            ..Default::default()
        };
        eval::eval_json(&model, &encoders, &vae, &eval_set, &config)?
    };
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let (encoders, vae) = a.frozen.load()?;
    let model = load_story(&a.checkpoint)?;
    let scene = match a.characters {
        1 => synthdata::generate_eval_set(a.scene_seed)?.scene(0)?,
        2 => synthdata::generate_pair_eval_set(1, a.scene_seed)?.scene(0)?,
        n => return Err(Error::invalid(format!("{n} characters; 1 or 2 are supported"))),
    };
    let reference = trainer::reference_scene(&scene)?;
    let bundle = model.conditioning(&encoders, &reference.characters.iter().collect::<Vec<_>>(), false)?;
    let report = eval::inspect_attention(&model, &vae, &encoders, &scene, &bundle, a.timestep, a.scene_seed, &a.out)?;
    for (layer, l) in report.leakage.iter().enumerate() {
        println!("layer {layer} ({0}x{0}):", report.layer_sides[layer]);
        for row in l {
            println!("  {}", row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
        }
    }
    let m = RunManifest::new("inspect-attn", &serde_json::json!({
        "scene_seed": a.scene_seed,
        "characters": a.characters,
        "timestep": a.timestep,
    }))?;
    a.frozen
        .record(m)?
        .checkpoint("story", &a.checkpoint)?
        .seed("scene", a.scene_seed)
        .write(&a.out.join("run_manifest.json"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::PretrainEncoders(a) => pretrain_encoders(a),
        Command::PretrainBase(a) => pretrain_base(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval_cmd(a),
        Command::InspectAttn(a) => inspect(a),
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if e.is_validation() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
