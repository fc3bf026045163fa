//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::blocks::{count_parameters, BlockVariant, ResidualBlockConfig};
use crate::checkpoint;
use crate::dataset::{
    build_samples, dataset_hash, eval_quadrant_crops, load_split, CacheKey, PairedSample, SampleCache,
    Split, CROPS_PER_PAIR, MANIFEST_FILE,
};
use crate::discriminators::DiscriminatorId;
use crate::error::{config_err, input_err, Error, Result};
use crate::evaluation::{
    build_study_kit, embedder_by_name, evaluate_conditions, load_key, read_responses, score_study, standard_conditions,
    KEY_FILE,
};
use crate::generators::Generator;
use crate::image::ImageTensor;
use crate::objective::ObjectiveConfig;
use crate::perturb::{apply_perturbation, PerturbationKind, PerturbationSpec};
use crate::trainer::{fit, FitOutputs, ModelConfig, TrainingSchedule, TrainingState};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const PERTURB_SIDECAR: &str = "perturbations.json";
pub const SAMPLE_CACHE: &str = "samples.json";

#[derive(Debug, Parser)]
#[command(name = "angiogan", version, about = "Fundus-to-angiogram translation: data preparation, training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load the training pairs and write the crop index.
    Prepare(PrepareArgs),
    /// Train the generators and discriminators.
    Train(TrainArgs),
    /// Translate a fundus image, or every image in a directory.
    Infer(InferArgs),
    /// Write perturbed copies of fundus images with a JSON sidecar.
    Perturb(PerturbArgs),
    /// Score generated angiograms under each perturbation condition.
    Evaluate(EvaluateArgs),
    /// Build or score a blinded real/fake study.
    #[command(subcommand)]
    Study(StudyCommand),
    /// Print parameter counts and the discriminator patch table.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// 512 crops, full channel widths.
    Full,
    /// 64 crops, narrow channels.
    Toy,
}

impl ModelSize {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelSize::Full => ModelConfig::full(),
            ModelSize::Toy => ModelConfig::toy(),
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root holding fundus/, angio/ and manifest.json.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Manifest path (default: <data-root>/manifest.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Threads used to decode images.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Master seed for weights and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random crops per pair.
    #[arg(long)]
    pub crops: Option<usize>,
    /// Model scale.
    #[arg(long, value_enum)]
    pub model: Option<ModelSize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Layered TOML config (defaults < file < flags).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Master seed for weights and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Passes over the crop index.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Crops per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight of the reconstruction terms.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Discriminator updates per cycle.
    #[arg(long)]
    pub d_steps: Option<usize>,
    /// Random crops per pair.
    #[arg(long)]
    pub crops: Option<usize>,
    /// Checkpoint interval in cycles (0: only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Run the joint step only in the last tenth of the epochs.
    #[arg(long)]
    pub joint_at_end: bool,
    /// Model scale.
    #[arg(long, value_enum)]
    pub model: Option<ModelSize>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Crop index written by `prepare`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Output directory for checkpoints, the training log and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Layered TOML config (defaults < file < flags).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint to load.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fundus image or directory of images. Larger images are centre-cropped.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    /// Fundus image or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// none, blur, sharpen, noise, whirl or pinch.
    #[arg(long)]
    pub kind: String,
    /// Strength; defaults depend on the kind.
    #[arg(long, allow_hyphen_values = true)]
    pub amount: Option<f64>,
    /// Affected disk for whirl and pinch, as a fraction of half the shorter side.
    #[arg(long)]
    pub radius_fraction: Option<f64>,
    /// Noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to load.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// random-projection or mean-pixel.
    #[arg(long)]
    pub embedder: Option<String>,
    /// Noise seed for the noise condition.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Layered TOML config (defaults < file < flags).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Assemble a balanced, shuffled kit of real and generated angiograms.
    Make(StudyMakeArgs),
    /// Score a rater's responses against the key.
    Score(StudyScoreArgs),
}

#[derive(Debug, Args)]
pub struct StudyMakeArgs {
    /// Number of items (half real, half generated).
    #[arg(long, default_value_t = 40)]
    pub n: usize,
    /// Shuffle seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory of real angiograms.
    #[arg(long)]
    pub real: PathBuf,
    /// Directory of generated angiograms.
    #[arg(long)]
    pub fake: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyScoreArgs {
    /// key.json written by `study make`.
    #[arg(long)]
    pub key: PathBuf,
    /// CSV with columns item_id,label.
    #[arg(long)]
    pub responses: PathBuf,
    /// Directory for report.json (default: print only).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BlockChoice {
    Proposed,
    Original,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Show a single residual block variant.
    #[arg(long, value_enum)]
    pub block: Option<BlockChoice>,
    /// Block width.
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Kernel side.
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Model scale for the generator counts.
    #[arg(long, value_enum, default_value_t = ModelSize::Full)]
    pub model: ModelSize,
    /// Also build both generators and count their parameters.
    #[arg(long)]
    pub generators: bool,
}

/// Values a config file may set. Flags override them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub d_steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub crops: Option<usize>,
    pub checkpoint_every: Option<u64>,
    pub joint_every_cycle: Option<bool>,
    pub workers: Option<usize>,
    pub embedder: Option<String>,
    pub model: Option<ModelSize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| config_err!("{}: {e}", path.display()))
    }
}

/// Record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub dataset_hash: Option<String>,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    dataset_hash: Option<String>,
    started: u64,
) -> Result<()> {
    let m = RunManifest {
        command: command.to_string(),
        config,
        seed,
        dataset_hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: now(),
    };
    let path = dir.join(RUN_MANIFEST);
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_root(data: &DataArgs) -> Result<&Path> {
    data.data_root
        .as_deref()
        .ok_or_else(|| config_err!("--data-root is required"))
}

fn manifest_path(data: &DataArgs, root: &Path) -> PathBuf {
    data.manifest.clone().unwrap_or_else(|| root.join(MANIFEST_FILE))
}

/// Effective training settings after layering.
#[derive(Debug, Clone, Serialize)]
struct TrainSettings {
    model: ModelConfig,
    schedule: TrainingSchedule,
    objective: ObjectiveConfig,
    crops: usize,
    workers: usize,
}

fn train_settings(args: &TrainArgs, file: &FileConfig) -> TrainSettings {
    let mut schedule = TrainingSchedule::default();
    let mut objective = ObjectiveConfig::default();
    let layer = |flag: Option<u64>, file: Option<u64>, default: u64| flag.or(file).unwrap_or(default);
    schedule.seed = layer(args.seed, file.seed, 0);
    schedule.epochs = args.epochs.or(file.epochs).unwrap_or(schedule.epochs);
    schedule.batch_size = args.batch_size.or(file.batch_size).unwrap_or(schedule.batch_size);
    schedule.d_steps_per_cycle = args.d_steps.or(file.d_steps).unwrap_or(schedule.d_steps_per_cycle);
    schedule.learning_rate = file.learning_rate.unwrap_or(schedule.learning_rate);
    schedule.beta1 = file.beta1.unwrap_or(schedule.beta1);
    schedule.beta2 = file.beta2.unwrap_or(schedule.beta2);
    schedule.checkpoint_every = layer(args.checkpoint_every, file.checkpoint_every, 0);
    schedule.joint_every_cycle = !args.joint_at_end && file.joint_every_cycle.unwrap_or(true);
    objective.lambda_weight = args.lambda.or(file.lambda).unwrap_or(objective.lambda_weight);
    TrainSettings {
        model: args.model.or(file.model).unwrap_or(ModelSize::Full).config(),
        schedule,
        objective,
        crops: args.crops.or(file.crops).unwrap_or(CROPS_PER_PAIR),
        workers: args.data.workers.or(file.workers).unwrap_or(1),
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn load_training_samples(
    data: &DataArgs,
    model: &ModelConfig,
    crops: usize,
    seed: u64,
    workers: usize,
    cache: Option<&Path>,
) -> Result<(Vec<PairedSample>, String)> {
    let root = require_root(data)?;
    let manifest = manifest_path(data, root);
    let hash = dataset_hash(root, Some(&manifest))?;
    let pairs = load_split(root, Some(&manifest), Split::Train, workers)?;
    let key = CacheKey {
        manifest_hash: hash.clone(),
        seed,
        n: crops,
        size: model.crop_size,
    };
    if let Some(path) = cache {
        match SampleCache::load_matching(path, &key)? {
            Some(c) => return Ok((c.samples(&pairs)?, hash)),
            None => log::warn!("{} does not match this dataset and seed; re-cropping", path.display()),
        }
    }
    Ok((build_samples(&pairs, crops, model.crop_size, seed)?, hash))
}

fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    let started = now();
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let crops = args.crops.or(file.crops).unwrap_or(CROPS_PER_PAIR);
    let workers = args.data.workers.or(file.workers).unwrap_or(1);
    let model = args.model.or(file.model).unwrap_or(ModelSize::Full);
    let model_cfg = model.config();
    let (samples, hash) = load_training_samples(&args.data, &model_cfg, crops, seed, workers, None)?;
    create_dir(&args.out)?;
    let key = CacheKey {
        manifest_hash: hash.clone(),
        seed,
        n: crops,
        size: model_cfg.crop_size,
    };
    SampleCache::from_samples(key, &samples).save(&args.out.join(SAMPLE_CACHE))?;
    println!("{} samples from {} crops per pair", samples.len(), crops);
    let config = serde_json::json!({ "crops": crops, "model": model, "crop_size": model_cfg.crop_size, "workers": workers });
    write_manifest(&args.out, "prepare", config, Some(seed), Some(hash), started)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = now();
    let file = FileConfig::load(args.config.as_deref())?;
    let mut settings = train_settings(args, &file);
    let mut state = match &args.checkpoint {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            settings.model = ck.state.model.clone();
            ck.state
        }
        None => TrainingState::new(settings.model.clone(), settings.schedule.adam(), settings.schedule.seed)?,
    };
    create_dir(&args.out)?;
    let outputs = FitOutputs {
        directory: args.out.clone(),
    };
    let (written, hash) = if settings.schedule.epochs == 0 && args.data.data_root.is_none() {
        let path = outputs.checkpoint_path(state.cycle);
        checkpoint::save(&path, &mut state, &settings.schedule, &settings.objective)?;
        (vec![path], None)
    } else {
        let (samples, hash) = load_training_samples(
            &args.data,
            &settings.model,
            settings.crops,
            settings.schedule.seed,
            settings.workers,
            args.cache.as_deref(),
        )?;
        let written = fit(&mut state, &samples, &settings.schedule, &settings.objective, &outputs)?;
        (written, Some(hash))
    };
    for p in &written {
        println!("wrote {}", p.display());
    }
    write_manifest(
        &args.out,
        "train",
        to_value(&settings),
        Some(settings.schedule.seed),
        hash,
        started,
    )
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(input_err!("no images found in {}", input.display()));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn centre_crop(img: &ImageTensor, size: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    if h < size || w < size {
        return Err(input_err!("image is {h}×{w}, smaller than the {size} crop"));
    }
    img.crop((h - size) / 2, (w - size) / 2, size, size)
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let started = now();
    let mut ck = checkpoint::load(&args.checkpoint)?;
    let size = ck.state.model.crop_size;
    create_dir(&args.out)?;
    let files = image_files(&args.input)?;
    for f in &files {
        let img = centre_crop(&ImageTensor::load(f, 3)?, size)?;
        let out = ck.state.infer(&img)?;
        let path = args.out.join(format!("{}.png", stem(f)));
        out.save(&path)?;
        println!("wrote {}", path.display());
    }
    let config = serde_json::json!({
        "checkpoint": args.checkpoint,
        "input": args.input,
        "model": ck.state.model,
        "cycle": ck.state.cycle,
    });
    write_manifest(&args.out, "infer", config, Some(ck.state.seed), None, started)
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarEntry {
    source: PathBuf,
    output: PathBuf,
    spec: PerturbationSpec,
}

fn cmd_perturb(args: &PerturbArgs) -> Result<()> {
    let started = now();
    let kind: PerturbationKind = args.kind.parse()?;
    let mut spec = PerturbationSpec::new(kind);
    if let Some(a) = args.amount {
        spec.amount = a;
    }
    if let Some(r) = args.radius_fraction {
        spec.radius_fraction = r;
    }
    spec.seed = args.seed.unwrap_or(0);
    spec.validate()?;
    create_dir(&args.out)?;
    let mut sidecar = Vec::new();
    for f in image_files(&args.input)? {
        let img = ImageTensor::load(&f, 3)?;
        let out = apply_perturbation(&img, &spec)?;
        let name = format!("{}_{}.png", stem(&f), kind);
        out.save(&args.out.join(&name))?;
        sidecar.push(SidecarEntry {
            source: f.clone(),
            output: PathBuf::from(name),
            spec,
        });
    }
    let path = args.out.join(PERTURB_SIDECAR);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("perturbed {} images ({kind}, amount {})", sidecar.len(), spec.amount);
    write_manifest(&args.out, "perturb", to_value(&spec), Some(spec.seed), None, started)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let started = now();
    let file = FileConfig::load(args.config.as_deref())?;
    let root = require_root(&args.data)?;
    let manifest = manifest_path(&args.data, root);
    let workers = args.data.workers.or(file.workers).unwrap_or(1);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let embedder_name = args
        .embedder
        .clone()
        .or(file.embedder.clone())
        .unwrap_or_else(|| "random-projection".into());
    let embedder = embedder_by_name(&embedder_name)?;
    let mut ck = checkpoint::load(&args.checkpoint)?;
    let pairs = load_split(root, Some(&manifest), Split::Eval, workers)?;
    let mut samples = Vec::new();
    for p in &pairs {
        samples.extend(eval_quadrant_crops(p, ck.state.model.crop_size)?);
    }
    let specs = standard_conditions(seed);
    let report = evaluate_conditions(&mut ck.state, &samples, &specs, embedder.as_ref())?;
    create_dir(&args.out)?;
    report.write(&args.out.join("report.csv"), &args.out.join("report.json"))?;
    print!("{}", report.to_csv());
    let config = serde_json::json!({ "embedder": embedder_name, "checkpoint": args.checkpoint, "conditions": specs });
    let hash = dataset_hash(root, Some(&manifest))?;
    write_manifest(&args.out, "evaluate", config, Some(seed), Some(hash), started)
}

fn load_dir(dir: &Path, channels: usize) -> Result<Vec<ImageTensor>> {
    image_files(dir)?
        .iter()
        .map(|f| ImageTensor::load(f, channels))
        .collect()
}

fn cmd_study_make(args: &StudyMakeArgs) -> Result<()> {
    let started = now();
    let seed = args.seed.unwrap_or(0);
    let real = load_dir(&args.real, 1)?;
    let fake = load_dir(&args.fake, 1)?;
    let kit = build_study_kit(&real, &fake, args.n, seed)?;
    create_dir(&args.out)?;
    kit.write(&args.out)?;
    println!(
        "wrote {} items and {}",
        kit.items.len(),
        args.out.join(KEY_FILE).display()
    );
    let config = serde_json::json!({ "n": args.n, "real": args.real, "fake": args.fake });
    write_manifest(&args.out, "study make", config, Some(seed), None, started)
}

fn cmd_study_score(args: &StudyScoreArgs) -> Result<()> {
    let started = now();
    let key = load_key(&args.key)?;
    let responses = read_responses(&args.responses)?;
    let report = score_study(&responses, &key)?;
    for (name, v) in [
        ("fake_correct", report.fake_correct_rate),
        ("real_correct", report.real_correct_rate),
        ("missed", report.missed),
        ("found", report.found),
        ("confusion", report.confusion),
    ] {
        println!("{name:<13}{v}%");
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        let path = out.join("report.json");
        fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
        let config = serde_json::json!({ "key": args.key, "responses": args.responses });
        write_manifest(out, "study score", config, None, None, started)?;
    }
    Ok(())
}

fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let variants: Vec<BlockVariant> = match args.block {
        Some(BlockChoice::Proposed) => vec![BlockVariant::Proposed],
        Some(BlockChoice::Original) => vec![BlockVariant::Original],
        None => vec![BlockVariant::Original, BlockVariant::Proposed],
    };
    println!("residual block parameters (C={}, K={})", args.channels, args.kernel);
    println!("{:<10}{:>14}{:>16}{:>12}", "block", "convolution", "normalization", "total");
    for v in variants {
        let cfg = ResidualBlockConfig::new(v, args.channels, args.kernel);
        cfg.validate()?;
        let c = count_parameters(&cfg);
        let name = match v {
            BlockVariant::Original => "original",
            BlockVariant::Proposed => "proposed",
        };
        println!(
            "{name:<10}{:>14}{:>16}{:>12}",
            group(c.convolution_weights),
            group(c.normalization_params),
            group(c.total)
        );
    }
    let model = args.model.config();
    model.validate()?;
    println!();
    println!("discriminator patch maps ({} base)", model.crop_size);
    println!("{:<12}{:>8}{:>8}{:>10}", "name", "input", "patch", "receptive");
    for id in DiscriminatorId::ALL {
        let cfg = model.discriminators.config_for(id);
        let p = cfg.patch_output_size();
        println!(
            "{:<12}{:>8}{:>8}{:>10}",
            id.name(),
            cfg.input_size,
            format!("{p}x{p}"),
            cfg.receptive_field()
        );
    }
    println!();
    println!("generator shapes");
    let (c, f) = (&model.coarse, &model.fine);
    println!(
        "coarse  in {0}x{0}x{1} -> out {0}x{0}x{2} + feature {0}x{0}x{3}",
        c.input_size,
        c.input_channels,
        c.output_channels,
        c.feature_channels()
    );
    println!(
        "fine    in {0}x{0}x{1} + feature {2}x{2}x{3} -> out {0}x{0}x{4}",
        f.input_size,
        f.input_channels,
        f.bottleneck_size(),
        f.residual_channels(),
        f.output_channels
    );
    if args.generators {
        let mut coarse = Generator::build(c.clone(), 0)?;
        let mut fine = Generator::build(f.clone(), 1)?;
        println!("coarse parameters {}", group(coarse.parameter_count()));
        println!("fine parameters   {}", group(fine.parameter_count()));
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Study(StudyCommand::Make(a)) => cmd_study_make(a),
        Command::Study(StudyCommand::Score(a)) => cmd_study_score(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
