use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use uli::assign::{assign_targets, hungarian_match, Annotation, OverflowPolicy};
use uli::checkpoint;
use uli::codec::dump_tracks;
use uli::decode::{
    beam_decode, parallel_decode, postprocess_caption, postprocess_detection, postprocess_grounding, postprocess_instance,
    postprocess_semseg, ScoredBox,
};
use uli::harness::coco::load_coco_subset;
use uli::harness::eval::{evaluate, EvalOptions};
use uli::harness::scene::{class_names, gen_scene, scene_dataset, SceneConfig};
use uli::image::Image;
use uli::model::ModelConfig;
use uli::template::{build_layout, make_grid, AttentionMask};
use uli::train::{TrainConfig, Trainer};
use uli::vocab::{build_task_vocabulary, Tokenizer};
use uli::{Model32, Profile, TaskKind, TaskSpec, UliError};

#[derive(Parser)]
#[command(name = "uli", version, about = "Multi-task vision transformer with a token-level output interface")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the dynamic vocabulary of a task.
    Vocab(VocabArgs),
    /// Encode annotations into per-track token sequences.
    Encode(EncodeArgs),
    /// Run a checkpoint on one image and print JSON.
    Decode(DecodeArgs),
    /// Train on synthetic scenes.
    Train(TrainArgs),
    /// Evaluate a checkpoint on synthetic scenes.
    Eval(EvalArgs),
    /// Summarise a checkpoint or a task layout.
    Inspect(InspectArgs),
    /// Write synthetic scenes as PNGs plus COCO JSON.
    Gen(GenArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "desk")]
    profile: String,
    /// det, insseg, semseg, caption or grounding.
    #[arg(long)]
    task: TaskKind,
}

#[derive(Args)]
struct VocabArgs {
    /// Optional `build`, for symmetry with the other verbs.
    #[arg(value_parser = ["build"])]
    action: Option<String>,
    #[command(flatten)]
    common: Common,
    /// Comma-separated category names, or a file with one name per line.
    /// Synthetic classes when omitted.
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    common: Common,
    /// COCO JSON to read; a synthetic scene is generated otherwise.
    #[arg(long)]
    coco: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    max_images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, alias = "ckpt")]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Referring phrase for grounding.
    #[arg(long, default_value = "")]
    instruction: String,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long)]
    nms: Option<f64>,
    /// Where to write the semantic label map (8-bit PNG, value = class + 1).
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Write the JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Comma-separated task list; overrides the config's weights with uniform ones.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<TaskKind>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long)]
    nms: Option<f64>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum View {
    /// Attention mask of a task layout as plain PBM.
    Mask,
    /// Hungarian assignment of a synthetic scene's boxes to grid points.
    Assign,
}

#[derive(Args)]
struct InspectArgs {
    view: Option<View>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long)]
    task: Option<TaskKind>,
    /// Instruction tokens in the mask layout (grounding only).
    #[arg(long, default_value_t = 4)]
    instruction_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// `ULI_SEED` wins over any seed given on the command line or in a config.
fn seed_override(seed: u64) -> Result<u64> {
    match std::env::var("ULI_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| UliError::Config(format!("ULI_SEED={s:?} is not an integer")).into()),
        Err(_) => Ok(seed),
    }
}

fn task_spec(c: &Common) -> Result<TaskSpec> {
    Ok(TaskSpec::new(c.task, &Profile::by_name(&c.profile)?))
}

fn categories_for(kind: TaskKind, given: &[String]) -> Vec<String> {
    if !given.is_empty() {
        given.to_vec()
    } else if kind.is_grid() {
        class_names()
    } else {
        Vec::new()
    }
}

fn load_model(dir: &Path) -> Result<(Model32, checkpoint::Manifest)> {
    checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn read_png(path: &Path, resolution: usize) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    let image = Image { width: w as usize, height: h as usize, data };
    Ok(if image.width == resolution && image.height == resolution { image } else { image.resize(resolution, resolution) })
}

fn write_png(path: &Path, image: &Image) -> Result<()> {
    let raw: Vec<u8> = image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(image.width as u32, image.height as u32, raw)
        .context("image buffer size")?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn cmd_vocab(a: VocabArgs) -> Result<()> {
    let task = task_spec(&a.common)?;
    let model = match &a.checkpoint {
        Some(dir) => load_model(dir)?.0,
        None => Model32::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(seed_override(0)?))?,
    };
    let given = match a.categories.as_slice() {
        [one] if Path::new(one).is_file() => fs::read_to_string(one)
            .with_context(|| format!("reading {one}"))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        other => other.to_vec(),
    };
    let cats = categories_for(task.kind, &given);
    let cats: Vec<&str> = cats.iter().map(String::as_str).collect();
    let vocab = build_task_vocabulary(&task, &cats, &model.composer(), Arc::new(Tokenizer::builtin()))?;
    print!("{}", vocab.dump());
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let task = task_spec(&a.common)?;
    let model = Model32::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let grid = make_grid(&task)?;
    let (cats, anns): (Vec<String>, Vec<(String, Annotation)>) = match &a.coco {
        Some(path) => {
            let d = load_coco_subset(path, a.max_images)?;
            let anns = d
                .images
                .iter()
                .filter_map(|img| Some((img.file_name.clone(), img.annotation(task.kind, task.resolution, &d.categories)?)))
                .collect();
            (d.categories, anns)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_override(a.seed)?);
            let scene = gen_scene(&mut rng, &SceneConfig::for_task(task.kind));
            let ann = scene.annotation(task.kind, 0).context("scene has no shape to ground")?;
            (class_names(), vec![("synthetic".to_string(), ann)])
        }
    };
    let cat_refs: Vec<&str> = if task.kind.is_grid() { cats.iter().map(String::as_str).collect() } else { Vec::new() };
    let vocab = build_task_vocabulary(&task, &cat_refs, &model.composer(), Arc::new(Tokenizer::builtin()))?;
    for (name, ann) in anns {
        let assigned = assign_targets(&task, &vocab, &grid, &ann, OverflowPolicy::KeepBest)?;
        let tracks: Vec<_> = grid.points.iter().copied().zip(assigned.targets).collect();
        println!("# image {name}");
        print!("{}", dump_tracks(&task, &vocab, &tracks));
    }
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let task = task_spec(&a.common)?;
    let (model, manifest) = load_model(&a.checkpoint)?;
    let cats = manifest.categories.get(task.kind.short()).cloned().unwrap_or_else(|| categories_for(task.kind, &[]));
    let cat_refs: Vec<&str> = cats.iter().map(String::as_str).collect();
    let vocab = build_task_vocabulary(&task, &cat_refs, &model.composer(), Arc::new(Tokenizer::builtin()))?;
    let image = read_png(&a.image, task.resolution)?;
    let instruction = if a.instruction.is_empty() { Vec::new() } else { vocab.tokenizer().tokenize(&a.instruction)? };
    if task.kind == TaskKind::Grounding && instruction.is_empty() {
        return Err(UliError::Config("grounding needs --instruction".into()).into());
    }
    let grid = make_grid(&task)?;
    let named = |b: &ScoredBox| json!({"bbox": b.bbox.to_array(), "score": b.score, "category": cats.get(b.category)});
    let mut out = json!({"task": task.kind.short()});
    match task.kind {
        TaskKind::Caption if a.beam > 1 => {
            let (tokens, log_prob) = beam_decode(&model, &vocab, &task, &image, a.beam)?;
            out["caption"] = json!(vocab.tokenizer().detokenize(&tokens));
            out["log_prob"] = json!(log_prob);
        }
        _ => {
            let tracks = parallel_decode(&model, &vocab, &task, &image, &instruction, &grid.points)?;
            match task.kind {
                TaskKind::Detection => {
                    let boxes = postprocess_detection(&task, &vocab, &tracks, a.nms)?;
                    out["boxes"] = boxes.iter().map(named).collect();
                }
                TaskKind::InstanceSeg => {
                    let inst = postprocess_instance(&task, &vocab, &tracks)?;
                    out["boxes"] = inst
                        .iter()
                        .map(|i| {
                            let poly: Vec<[f64; 2]> = i.polygon.iter().map(|p| [p.x, p.y]).collect();
                            json!({"bbox": i.bbox.to_array(), "score": i.score, "category": cats.get(i.category), "polygon": poly})
                        })
                        .collect();
                }
                TaskKind::SemanticSeg => {
                    let map = postprocess_semseg(&task, &vocab, &tracks)?;
                    if let Some(path) = &a.mask_out {
                        let raw: Vec<u8> = map.labels.iter().map(|&l| l.min(255) as u8).collect();
                        image::GrayImage::from_raw(map.width as u32, map.height as u32, raw)
                            .context("label map size")?
                            .save(path)
                            .with_context(|| format!("writing {}", path.display()))?;
                        out["mask_png"] = json!(path.display().to_string());
                    }
                    out["boxes"] = json!([]);
                    out["shape"] = json!([map.height, map.width]);
                }
                TaskKind::Caption => out["caption"] = json!(postprocess_caption(&vocab, &tracks[0])),
                TaskKind::Grounding => {
                    let b = postprocess_grounding(&task, &vocab, &tracks[0])?;
                    out["boxes"] = json!([{"bbox": b.to_array(), "score": tracks[0].score(), "category": a.instruction}]);
                }
            }
        }
    }
    let text = serde_json::to_string_pretty(&out)?;
    if let Some(p) = &a.out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?, &a.profile)?,
        None => TrainConfig { profile: a.profile.clone(), ..TrainConfig::default() },
    };
    cfg.seed = seed_override(cfg.seed)?;
    if !a.tasks.is_empty() {
        cfg = cfg.with_tasks(&a.tasks);
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let profile = Profile::by_name(&cfg.profile)?;
    let mut categories = BTreeMap::new();
    let mut data = Vec::new();
    for (i, (kind, _)) in cfg.task_weights()?.into_iter().enumerate() {
        let scene = SceneConfig { resolution: profile.resolution(kind), ..SceneConfig::for_task(kind) };
        let d = scene_dataset(kind, cfg.scenes, cfg.seed.wrapping_add(i as u64 * 7919), &scene);
        categories.insert(kind.short().to_string(), d.categories.clone());
        data.push(d);
    }
    let model = Model32::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let (iterations, every, log_every) = (cfg.iterations, cfg.checkpoint_every, cfg.log_every.max(1));
    let mut trainer = Trainer::new(model, cfg, data)?;
    let start = Instant::now();
    let mut failure = None;
    trainer.run(iterations, |t, r| {
        if r.iteration % log_every == 0 || r.iteration + 1 == iterations {
            log::info!(
                "iter {:>5} {:<9} loss {:.4} |g| {:.3} lr {:.2e} ({:.1}s)",
                r.iteration,
                r.task.short(),
                r.loss,
                r.grad_norm,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
        if every > 0 && (r.iteration + 1) % every == 0 && failure.is_none() {
            failure = checkpoint::save(&a.out, &t.model, r.iteration + 1, categories.clone()).err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    checkpoint::save(&a.out, &trainer.model, trainer.iteration, categories)?;
    println!("saved {} after {} iterations", a.out.display(), trainer.iteration);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let task = task_spec(&a.common)?;
    let (model, _) = load_model(&a.checkpoint)?;
    let scene = SceneConfig { resolution: task.resolution, ..SceneConfig::for_task(task.kind) };
    let data = scene_dataset(task.kind, a.scenes, seed_override(a.seed)?, &scene);
    let opts = EvalOptions { nms_iou: a.nms, beam_width: a.beam, limit: 0 };
    let report = evaluate(&model, &data, &opts)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn inspect_view(view: View, a: &InspectArgs) -> Result<()> {
    let kind = a.task.ok_or_else(|| UliError::Config("inspect mask/assign needs --task".into()))?;
    let profile = Profile::by_name(&a.profile)?;
    let task = TaskSpec::new(kind, &profile);
    let grid = make_grid(&task)?;
    match view {
        View::Mask => {
            let text_conditioning = ModelConfig::desk().text_conditioning;
            let mask = AttentionMask::new(build_layout(&task, &grid, a.instruction_len), text_conditioning);
            print!("{}", mask.to_pbm());
        }
        View::Assign => {
            if !matches!(kind, TaskKind::Detection | TaskKind::InstanceSeg) {
                return Err(UliError::Config(format!("{kind} has no box assignment")).into());
            }
            let cfg = SceneConfig { resolution: task.resolution, ..SceneConfig::for_task(kind) };
            let scene = gen_scene(&mut ChaCha8Rng::seed_from_u64(seed_override(a.seed)?), &cfg);
            let boxes: Vec<_> = scene.shapes.iter().map(|s| s.bbox).collect();
            let assignment = hungarian_match(&grid, &boxes, OverflowPolicy::KeepBest)?;
            let names = class_names();
            println!("# {kind}: {} boxes onto {} points, cost {:.4}", boxes.len(), grid.len(), assignment.cost);
            for (i, (p, m)) in grid.points.iter().zip(&assignment.matched).enumerate() {
                match m {
                    Some(b) => {
                        let [x1, y1, x2, y2] = boxes[*b].to_array();
                        let name = &names[scene.shapes[*b].class()];
                        println!("{i:>4} ({:.1}, {:.1}) box {b} {name} [{x1:.1} {y1:.1} {x2:.1} {y2:.1}]", p.x, p.y);
                    }
                    None => println!("{i:>4} ({:.1}, {:.1}) background", p.x, p.y),
                }
            }
        }
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    if let Some(view) = a.view {
        return inspect_view(view, &a);
    }
    if let Some(dir) = &a.checkpoint {
        let (model, manifest) = load_model(dir)?;
        let c = &model.config;
        println!("profile      {}", c.profile);
        println!("dim/heads    {}/{}", c.dim, c.heads);
        println!("layers       {} pretrained + {} new, global at {:?}", c.pretrained_layers, c.new_layers, c.global_layers());
        println!("accelerated  {}", c.accelerated);
        println!("iteration    {}", manifest.iteration);
        println!("parameters   {} ({} in the layer stack)", model.params.numel(), model.layer_param_count());
        for (task, cats) in &manifest.categories {
            println!("categories   {task}: {}", cats.join(", "));
        }
    }
    if let Some(kind) = a.task {
        let task = TaskSpec::new(kind, &Profile::by_name(&a.profile)?);
        let grid = make_grid(&task)?;
        let g = task.patch_grid();
        println!("task         {kind} at {} px, patch {}", task.resolution, task.patch);
        println!("image tokens {}", g * g);
        println!("tracks       {} of {} positions ({} decode steps)", grid.len(), task.steps() + 2, task.steps());
        println!("coord bins   {}", task.coord_bins());
        let slices: Vec<String> = task.schedule.iter().map(|s| format!("{s:?}")).collect();
        println!("schedule     {}", slices.join(" "));
    }
    if a.checkpoint.is_none() && a.task.is_none() {
        return Err(UliError::Config("inspect needs --checkpoint or --task".into()).into());
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let task = task_spec(&a.common)?;
    let cfg = SceneConfig { resolution: task.resolution, ..SceneConfig::for_task(task.kind) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed_override(a.seed)?);
    let img_dir = a.out.join("images");
    fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    let (mut images, mut anns) = (Vec::new(), Vec::new());
    let mut next_ann = 1;
    for id in 1..=a.count {
        let scene = gen_scene(&mut rng, &cfg);
        let file = format!("{id:06}.png");
        write_png(&img_dir.join(&file), &scene.image)?;
        images.push(json!({"id": id, "file_name": file, "width": cfg.resolution, "height": cfg.resolution}));
        for s in &scene.shapes {
            let flat: Vec<f64> = s.polygon.iter().flat_map(|p| [p.x, p.y]).collect();
            let b = s.bbox;
            anns.push(json!({
                "id": next_ann, "image_id": id, "category_id": s.class() + 1, "iscrowd": 0,
                "bbox": [b.x1, b.y1, b.width(), b.height()], "area": b.area(), "segmentation": [flat],
            }));
            next_ann += 1;
        }
        anns.push(json!({"id": next_ann, "image_id": id, "caption": scene.caption}));
        next_ann += 1;
    }
    let cats: Vec<_> = class_names().iter().enumerate().map(|(i, n)| json!({"id": i + 1, "name": n})).collect();
    let doc = json!({"images": images, "annotations": anns, "categories": cats});
    let path = a.out.join("annotations.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Vocab(a) => cmd_vocab(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Gen(a) => cmd_gen(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // bad input of any kind is a validation failure; I/O trouble is not
            let validation = matches!(e.downcast_ref::<UliError>(), Some(err) if !matches!(err, UliError::Io(_)));
            if validation {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
