use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vidstyle::checkpoint::{dir_sha256, file_sha256, Checkpoint};
use vidstyle::config::{RunConfig, RunRecord};
use vidstyle::control::ConditionKind;
use vidstyle::diffusion::sample::{sample, style_transfer};
use vidstyle::diffusion::train::train_stage;
use vidstyle::diffusion::Stage;
use vidstyle::encoder::{ImageEncoder, PromptIds};
use vidstyle::extractor::{train_projector, Projector};
use vidstyle::illusion::{self, GaussianDenoiser};
use vidstyle::metrics::{read_eval_manifest, EvalReport, Scorer};
use vidstyle::model::Model;
use vidstyle::raster;

#[derive(Parser)]
#[command(name = "vidstyle", version, about = "Stylized video diffusion at desk scale", arg_required_else_help = true)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate style-consistent image pairs and their manifest.
    GenPairs {
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs, overriding the configuration.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Train the global style projector on a pair manifest.
    TrainProjector {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone on moving clips.
    TrainBase(TrainArgs),
    /// Train the motion adapter on still clips.
    TrainMotion(TrainArgs),
    /// Train the style cross-attention and texture aggregator.
    TrainStyle(TrainArgs),
    /// Train the control branch.
    TrainControl(TrainArgs),
    /// Generate a clip.
    Sample {
        #[command(flatten)]
        gen: GenArgs,
        /// Number of frames, overriding the configuration.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Restyle a clip (directory of numbered frames).
    Transfer {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        condition: Option<ConditionKind>,
        #[arg(long)]
        tile_factor: Option<usize>,
    },
    /// Score generated clips listed in a JSON Lines manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint holding a projector, needed for style similarity.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from; a fresh backbone otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Projector checkpoint, for the style and control stages.
    #[arg(long)]
    projector: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "style-id")]
    style_id: u32,
    #[arg(long = "object-id")]
    object_id: u32,
    /// Reference image for the style tokens.
    #[arg(long)]
    style_image: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    eprintln!("resolved config:\n{}", cfg.to_toml()?);
    match cli.command {
        Command::GenPairs { out, count } => gen_pairs(&cfg, &out, count),
        Command::TrainProjector { pairs, out } => projector(&cfg, &pairs, &out),
        Command::TrainBase(a) => train(&cfg, Stage::Base, &a),
        Command::TrainMotion(a) => train(&cfg, Stage::Motion, &a),
        Command::TrainStyle(a) => train(&cfg, Stage::Style, &a),
        Command::TrainControl(a) => train(&cfg, Stage::Control, &a),
        Command::Sample { gen, frames } => sample_cmd(&cfg, &gen, frames),
        Command::Transfer { gen, content, condition, tile_factor } => transfer(&cfg, &gen, &content, condition, tile_factor),
        Command::Eval { manifest, out, checkpoint } => eval(&cfg, &manifest, &out, checkpoint.as_deref()),
    }
}

fn record_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".record.json");
    out.with_file_name(name)
}

fn load_model(cfg: &RunConfig, path: &Path, record: &mut RunRecord) -> Result<Model> {
    record.inputs.insert(path.display().to_string(), file_sha256(path)?);
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.into_model(&cfg.model)?)
}

fn word_list(file: Option<&Path>, default: &str) -> Result<Vec<String>> {
    Ok(match file {
        Some(p) => illusion::read_list(p)?,
        None => illusion::parse_list(default),
    })
}

fn gen_pairs(cfg: &RunConfig, out: &Path, count: Option<u64>) -> Result<()> {
    let mut record = RunRecord::new("gen-pairs", cfg)?;
    let styles = word_list(cfg.pairs.styles_file.as_deref(), illusion::DEFAULT_STYLES)?;
    let objects = word_list(cfg.pairs.objects_file.as_deref(), illusion::DEFAULT_OBJECTS)?;
    let schedule = cfg.noise_schedule()?;
    let den = GaussianDenoiser::fit(
        schedule.clone(),
        styles.len(),
        objects.len(),
        cfg.pairs.image_size,
        cfg.model.corpus_seed,
        cfg.pairs.prior_samples,
        cfg.execution(),
    )?;
    let n = count.unwrap_or(cfg.pairs.count);
    let manifest =
        illusion::build_dataset(n, &styles, &objects, &den, &schedule, &cfg.pairs.dataset(), cfg.seed, out, cfg.execution())?;
    eprintln!("wrote {n} pairs to {}", manifest.display());
    record.outputs.insert(out.display().to_string(), dir_sha256(out)?);
    Ok(record.save(&record_path(out))?)
}

fn projector(cfg: &RunConfig, pairs: &Path, out: &Path) -> Result<()> {
    let mut record = RunRecord::new("train-projector", cfg)?;
    record.inputs.insert(pairs.display().to_string(), file_sha256(pairs)?);
    let records = illusion::read_manifest(pairs)?;
    let base = pairs.parent().unwrap_or(Path::new("."));
    let encoder = ImageEncoder::new(cfg.model.encoder)?;
    let mut embeddings = Vec::with_capacity(records.len());
    for r in &records {
        let (a, b) = illusion::load_pair(base, r)?;
        embeddings.push((encoder.encode_image(&a)?.global, encoder.encode_image(&b)?.global));
    }
    let (proj, log) = train_projector(&embeddings, cfg.projector_config(), &cfg.projector_training(), cfg.execution())?;
    if let (Some(first), Some(last)) = (log.epoch_loss.first(), log.epoch_loss.last()) {
        eprintln!("projector loss {first:.5} -> {last:.5} over {} epochs", log.epoch_loss.len());
    }
    let hash = Checkpoint::new(cfg.model.clone(), cfg.seed, "projector", proj.params).save(out)?;
    record.outputs.insert(out.display().to_string(), hash);
    Ok(record.save(&record_path(out))?)
}

fn train(cfg: &RunConfig, stage: Stage, args: &TrainArgs) -> Result<()> {
    let mut record = RunRecord::new(&format!("train-{}", stage.name()), cfg)?;
    let mut model = match &args.init {
        Some(p) => load_model(cfg, p, &mut record)?,
        None => Model::create(cfg.model.clone(), cfg.model_seed())?,
    };
    if let Some(p) = &args.projector {
        record.inputs.insert(p.display().to_string(), file_sha256(p)?);
        let ck = Checkpoint::load(p)?;
        ck.check_architecture(&cfg.model)?;
        model.attach_projector(Projector::from_params(cfg.projector_config(), &ck.params)?)?;
    }
    let stage_cfg = cfg.stage(stage);
    let every = (stage_cfg.steps / 20).max(1);
    let log = train_stage(&mut model, &cfg.noise_schedule()?, stage, &stage_cfg, cfg.execution(), |step, loss| {
        if step % every == 0 || step + 1 == stage_cfg.steps {
            eprintln!("{} step {step}: loss {loss:.5}", stage.name());
        }
    })?;
    eprintln!("{} done, last-50 mean loss {:.5}", stage.name(), log.tail_mean(50));
    let hash = Checkpoint::from_model(&model, cfg.seed, stage.name()).save(&args.out)?;
    record.outputs.insert(args.out.display().to_string(), hash);
    Ok(record.save(&record_path(&args.out))?)
}

fn style_image(gen: &GenArgs, record: &mut RunRecord) -> Result<Option<raster::Image>> {
    let Some(p) = &gen.style_image else { return Ok(None) };
    record.inputs.insert(p.display().to_string(), file_sha256(p)?);
    Ok(Some(raster::load_png(p)?))
}

fn sample_cmd(cfg: &RunConfig, gen: &GenArgs, frames: Option<usize>) -> Result<()> {
    let mut record = RunRecord::new("sample", cfg)?;
    let model = load_model(cfg, &gen.checkpoint, &mut record)?;
    let style = style_image(gen, &mut record)?;
    let mut opts = cfg.sample_options();
    if let Some(f) = frames {
        opts.frames = f;
    }
    let prompt = PromptIds { style: gen.style_id, object: gen.object_id };
    let video = sample(&model, &cfg.noise_schedule()?, prompt, style.as_ref(), None, &opts, cfg.execution())?;
    finish_video(&video, &gen.out, record)
}

fn transfer(
    cfg: &RunConfig,
    gen: &GenArgs,
    content: &Path,
    kind: Option<ConditionKind>,
    tile_factor: Option<usize>,
) -> Result<()> {
    let mut record = RunRecord::new("transfer", cfg)?;
    let model = load_model(cfg, &gen.checkpoint, &mut record)?;
    let Some(style) = style_image(gen, &mut record)? else { bail!("transfer needs --style-image") };
    record.inputs.insert(content.display().to_string(), dir_sha256(content)?);
    let clip = raster::load_video(content)?;
    let mut cond = cfg.condition;
    cond.kind = kind.unwrap_or(cond.kind);
    cond.tile_factor = tile_factor.unwrap_or(cond.tile_factor);
    let prompt = PromptIds { style: gen.style_id, object: gen.object_id };
    let video =
        style_transfer(&model, &cfg.noise_schedule()?, &clip, &style, prompt, &cond, &cfg.sample_options(), cfg.execution())?;
    finish_video(&video, &gen.out, record)
}

fn finish_video(video: &raster::Video, out: &Path, mut record: RunRecord) -> Result<()> {
    if out.exists() {
        bail!("{} already exists", out.display());
    }
    raster::save_video(video, out)?;
    let hash = dir_sha256(out)?;
    println!("{hash}");
    record.outputs.insert(out.display().to_string(), hash);
    Ok(record.save(&record_path(out))?)
}

fn eval(cfg: &RunConfig, manifest: &Path, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let mut record = RunRecord::new("eval", cfg)?;
    record.inputs.insert(manifest.display().to_string(), file_sha256(manifest)?);
    let entries = read_eval_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let inputs = entries.iter().map(|e| e.load(base)).collect::<vidstyle::Result<Vec<_>>>()?;
    let projector = match checkpoint {
        Some(p) => {
            record.inputs.insert(p.display().to_string(), file_sha256(p)?);
            let ck = Checkpoint::load(p)?;
            ck.check_architecture(&cfg.model)?;
            Some(Projector::from_params(cfg.projector_config(), &ck.params)?)
        }
        None => None,
    };
    let report = if inputs.is_empty() {
        EvalReport::from_items(Vec::new())?
    } else {
        let model = Model::assemble(cfg.model.clone(), Default::default(), None)?;
        let scorer = Scorer { encoder: &model.encoder, text: &model.text, projector: projector.as_ref() };
        scorer.evaluate(&inputs, cfg.execution())?
    };
    std::fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    record.outputs.insert(out.display().to_string(), file_sha256(out)?);
    Ok(record.save(&record_path(out))?)
}
