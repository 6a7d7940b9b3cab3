use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use structinpaint::exec;
use structinpaint::imageops::{
    canny_edges, gradient_magnitude, load_image, save_png, sobel_gradient_map, visualize, CannyParams,
};
use structinpaint::losses::RandomConvExtractor;
use structinpaint::maskgen::{load_mask_png, save_mask_png, MaskSpec};
use structinpaint::metrics::{evaluate_set, EvalPair, Skipped};
use structinpaint::suites::{run_suite, Suite, SuiteOptions};
use structinpaint::tensor::npy::write_plane;
use structinpaint::trainer::{
    inpaint, load_generator, resume, run_ablation, synth_dataset, train, SynthSpec, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "sinpaint", version, about = "Structure-aware image inpainting")]
struct Cli {
    /// Random seed; overrides the config file.
    #[arg(long, global = true, env = "SINPAINT_SEED")]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true, env = "SINPAINT_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for per-file and per-tensor parallelism.
    #[arg(long, global = true, env = "SINPAINT_JOBS")]
    jobs: Option<usize>,
    /// Print results as JSON on stdout and errors as JSON on stderr.
    #[arg(long, global = true, env = "SINPAINT_JSON")]
    json: bool,
    /// Training config in TOML; lowest precedence.
    #[arg(long, global = true, env = "SINPAINT_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes Sobel gradient maps and Canny edges for an image or a directory.
    ExtractStructure(ExtractArgs),
    /// Generates mask PNGs.
    MakeMasks(MaskArgs),
    /// Writes the synthetic shape dataset as PNGs.
    SynthData(SynthArgs),
    /// Trains a model, optionally resuming from a checkpoint.
    Train(TrainArgs),
    /// Inpaints one image with a trained checkpoint.
    Inpaint(InpaintArgs),
    /// Computes the metric battery over matching prediction/ground-truth files.
    Evaluate(EvaluateArgs),
    /// Runs the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Runs the four ablation rows and writes a comparison table.
    Ablate(TrainOverrides),
}

#[derive(Args, Debug)]
struct CannyArgs {
    #[arg(long, env = "SINPAINT_SIGMA")]
    sigma: Option<f64>,
    #[arg(long, env = "SINPAINT_LOW")]
    low: Option<f64>,
    #[arg(long, env = "SINPAINT_HIGH")]
    high: Option<f64>,
}

impl CannyArgs {
    fn apply(&self, mut p: CannyParams) -> CannyParams {
        p.sigma = self.sigma.unwrap_or(p.sigma);
        p.low = self.low.unwrap_or(p.low);
        p.high = self.high.unwrap_or(p.high);
        p
    }
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// An image file or a directory of PNG/JPEG files.
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    canny: CannyArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskKind {
    Irregular,
    Regular,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Defaults to the config file's mask spec, else irregular strokes.
    #[arg(long, value_enum)]
    kind: Option<MaskKind>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Debug)]
struct TrainOverrides {
    #[arg(long, env = "SINPAINT_STEPS")]
    steps: Option<u64>,
    #[arg(long, env = "SINPAINT_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "SINPAINT_LR")]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InpaintArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Directory for the predicted gradient maps, one NPY and PNG per scale.
    #[arg(long)]
    dump_structure: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    module: String,
    /// Perturbs every analytic gradient; every check is expected to fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Settings shared by all commands after merging file, env and flags.
struct Ctx {
    seed: u64,
    out: Option<PathBuf>,
    json: bool,
    config: TrainConfig,
    has_config: bool,
}

impl Ctx {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("--out is required for this command"))
    }

    fn emit(&self, text: &str, value: Value) {
        if self.json {
            println!("{value}");
        } else if !text.is_empty() {
            println!("{text}");
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<(TrainConfig, bool)> {
    match path {
        None => Ok((TrainConfig::default(), false)),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok((TrainConfig::from_toml(&text)?, true))
        }
    }
}

fn setup_jobs(jobs: Option<usize>) -> Result<()> {
    match jobs {
        None => Ok(()),
        Some(0) => bail!("--jobs must be at least 1"),
        Some(1) => {
            exec::set_parallel(false);
            Ok(())
        }
        Some(n) => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
            #[cfg(not(feature = "parallel"))]
            log::warn!("built without the parallel feature; ignoring --jobs {n}");
            Ok(())
        }
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn extract_one(path: &Path, out: &Path, canny: CannyParams) -> Result<Vec<PathBuf>> {
    let img = load_image(path)?;
    let grads = sobel_gradient_map(&img)?;
    let edges = canny_edges(&img, canny)?;
    let name = stem(path);
    let files = [
        out.join(format!("{name}_grad.npy")),
        out.join(format!("{name}_edges.png")),
        out.join(format!("{name}_grad_vis.png")),
    ];
    let (h, w, c) = grads.shape();
    write_plane(&files[0], (h, w, c), grads.data())?;
    save_png(&edges, &files[1])?;
    save_png(&visualize(&gradient_magnitude(&grads)), &files[2])?;
    Ok(files.to_vec())
}

fn cmd_extract(ctx: &Ctx, a: &ExtractArgs) -> Result<bool> {
    let out = ctx.out()?;
    fs::create_dir_all(out)?;
    let canny = a.canny.apply(ctx.config.canny);
    let files = if a.input.is_dir() { image_files(&a.input)? } else { vec![a.input.clone()] };
    if files.is_empty() {
        bail!("no PNG/JPEG files in {}", a.input.display());
    }
    let results = exec::map_indexed(files.len(), |i| extract_one(&files[i], out, canny));
    let mut written = Vec::new();
    let mut failed = Vec::new();
    for (f, r) in files.iter().zip(results) {
        match r {
            Ok(paths) => written.push(json!({ "input": f, "outputs": paths })),
            Err(e) => {
                eprintln!("{}: {e:#}", f.display());
                failed.push(json!({ "input": f, "error": format!("{e:#}") }));
            }
        }
    }
    let ok = failed.is_empty();
    ctx.emit(
        &format!("extracted {} of {} images into {}", written.len(), files.len(), out.display()),
        json!({ "command": "extract-structure", "written": written, "failed": failed }),
    );
    Ok(ok)
}

fn cmd_masks(ctx: &Ctx, a: &MaskArgs) -> Result<bool> {
    use rand::SeedableRng;
    let out = ctx.out()?;
    fs::create_dir_all(out)?;
    let spec = match a.kind {
        Some(MaskKind::Regular) => MaskSpec::regular_half(a.size),
        Some(MaskKind::Irregular) => MaskSpec::default(),
        None if ctx.has_config => ctx.config.mask,
        None => MaskSpec::default(),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut records = Vec::new();
    for i in 0..a.count {
        let m = spec.generate((a.size, a.size), &mut rng)?;
        let name = format!("mask_{i:05}.png");
        save_mask_png(&m, &out.join(&name))?;
        records.push(json!({ "file": name, "area_ratio": m.area_ratio() }));
    }
    let manifest = json!({ "seed": ctx.seed, "size": a.size, "spec": spec, "masks": records });
    fs::write(out.join("masks.json"), serde_json::to_string_pretty(&manifest)?)?;
    ctx.emit(&format!("wrote {} masks to {}", a.count, out.display()), manifest);
    Ok(true)
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<bool> {
    let out = ctx.out()?;
    fs::create_dir_all(out)?;
    let spec = SynthSpec { count: a.count, size: a.size, ..SynthSpec::default() };
    let images = synth_dataset(&spec, ctx.seed, ctx.config.canny)?;
    for (i, img) in images.iter().enumerate() {
        save_png(img, &out.join(format!("img_{i:05}.png")))?;
    }
    let digest = structinpaint::trainer::images_digest(&images);
    ctx.emit(
        &format!("wrote {} images to {} (digest {digest})", images.len(), out.display()),
        json!({ "command": "synth-data", "count": images.len(), "digest": digest }),
    );
    Ok(true)
}

fn train_config(ctx: &Ctx, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = ctx.config.clone();
    cfg.seed = ctx.seed;
    if let Some(s) = o.steps {
        cfg.steps = s;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.optimizer.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<bool> {
    let out = ctx.out()?;
    let cfg = train_config(ctx, &a.overrides)?;
    log::info!("training {} steps, batch {}, seed {}", cfg.steps, cfg.batch_size, cfg.seed);
    let outcome = match &a.resume {
        Some(ckpt) => resume(&cfg, ckpt, Some(out))?,
        None => train(&cfg, Some(out))?,
    };
    let last = outcome.reports.last().and_then(|r| r.get("total"));
    let digest = outcome.state.digest();
    ctx.emit(
        &format!(
            "trained to step {} (final total {}), checkpoint {} digest {digest}",
            outcome.state.step,
            last.map_or("n/a".into(), |v| format!("{v:.4}")),
            out.join("final").display()
        ),
        json!({
            "command": "train",
            "step": outcome.state.step,
            "final_total": last,
            "checkpoint": out.join("final"),
            "digest": digest,
            "data_digest": outcome.data_digest,
        }),
    );
    Ok(true)
}

fn cmd_inpaint(ctx: &Ctx, a: &InpaintArgs) -> Result<bool> {
    let out = ctx.out()?;
    let (params, model) = load_generator(&a.ckpt)?;
    let image = load_image(&a.input)?;
    let mask = load_mask_png(&a.mask)?;
    let result = inpaint(&params, &model.generator, &image, &mask, model.canny)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_png(&result.composite, out)?;
    let mut dumped = Vec::new();
    if let Some(dir) = &a.dump_structure {
        fs::create_dir_all(dir)?;
        for (i, c) in result.structure.iter().enumerate() {
            let npy = dir.join(format!("structure_s{i}.npy"));
            write_plane(&npy, c.shape(), c.data())?;
            save_png(&visualize(&gradient_magnitude(c)), &dir.join(format!("structure_s{i}.png")))?;
            dumped.push(npy);
        }
    }
    ctx.emit(
        &format!("wrote {}", out.display()),
        json!({ "command": "inpaint", "output": out, "structure": dumped }),
    );
    Ok(true)
}

fn cmd_evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<bool> {
    let out = ctx.out()?;
    let name_of = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let preds = image_files(&a.pred)?;
    let gts = image_files(&a.gt)?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for p in &preds {
        let name = name_of(p);
        let g = a.gt.join(&name);
        if !g.is_file() {
            skipped.push(Skipped { name, reason: "no ground-truth file with this name".into() });
            continue;
        }
        match (load_image(p), load_image(&g)) {
            (Ok(output), Ok(truth)) if output.shape() == truth.shape() => pairs.push(EvalPair { name, output, truth }),
            (Ok(o), Ok(t)) => skipped.push(Skipped {
                name,
                reason: format!("size mismatch: prediction {:?}, ground truth {:?}", o.shape(), t.shape()),
            }),
            (Err(e), _) | (_, Err(e)) => skipped.push(Skipped { name, reason: format!("unreadable: {e}") }),
        }
    }
    for g in &gts {
        let name = name_of(g);
        if !a.pred.join(&name).is_file() {
            skipped.push(Skipped { name, reason: "no prediction file with this name".into() });
        }
    }
    let fx = RandomConvExtractor::<f64>::default();
    let mut report = evaluate_set(&pairs, &fx)?;
    report.skipped = skipped;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, report.to_json())?;
    let table = report.table("evaluated");
    fs::write(out.with_extension("txt"), &table)?;
    let mut text = table;
    for s in &report.skipped {
        text.push_str(&format!("skipped {}: {}\n", s.name, s.reason));
    }
    ctx.emit(text.trim_end(), serde_json::to_value(&report)?);
    Ok(true)
}

fn cmd_gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<bool> {
    let suites = Suite::parse(&a.module)?;
    let opts = SuiteOptions { fault: a.inject_fault, seed: ctx.seed };
    let mut reports = Vec::new();
    let mut text = String::new();
    for s in suites {
        let r = run_suite(s, opts)?;
        for c in &r.results {
            text.push_str(&format!("{c}\n"));
        }
        text.push_str(&format!("{}: {} in {:.1}s\n", s.name(), if r.passed() { "PASS" } else { "FAIL" }, r.seconds));
        reports.push(r);
    }
    let ok = reports.iter().all(|r| r.passed());
    let value = json!({ "command": "gradcheck", "passed": ok, "suites": reports });
    if let Some(out) = &ctx.out {
        fs::write(out, serde_json::to_string_pretty(&value)?)?;
    }
    ctx.emit(text.trim_end(), value);
    Ok(ok)
}

fn cmd_ablate(ctx: &Ctx, o: &TrainOverrides) -> Result<bool> {
    let out = ctx.out()?;
    let cfg = train_config(ctx, o)?;
    let report = run_ablation(&cfg, Some(out))?;
    ctx.emit(
        report.table().trim_end(),
        json!({ "command": "ablate", "table": report.table(), "out": out }),
    );
    Ok(true)
}

fn run(cli: &Cli) -> Result<bool> {
    setup_jobs(cli.jobs)?;
    let (config, has_config) = load_config(cli.config.as_deref())?;
    let ctx = Ctx { seed: cli.seed.unwrap_or(config.seed), out: cli.out.clone(), json: cli.json, config, has_config };
    match &cli.command {
        Command::ExtractStructure(a) => cmd_extract(&ctx, a),
        Command::MakeMasks(a) => cmd_masks(&ctx, a),
        Command::SynthData(a) => cmd_synth(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Inpaint(a) => cmd_inpaint(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            if cli.json {
                let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
                eprintln!("{}", json!({ "error": format!("{e:#}"), "chain": chain }));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
