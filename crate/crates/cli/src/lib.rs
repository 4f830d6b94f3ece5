//! Command-line front end: `solve` runs the per-pixel reconstruction on a
//! dataset directory, `render` produces a synthetic sphere dataset, `eval`
//! scores a normal map against ground truth.
//!
//! Settings resolve with the precedence flags > config file > defaults. The
//! optional config file is flat JSON whose keys mirror the long flag names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use psbp_core::dataset::{
    load_dataset, load_normals_pfm, save_dataset, save_normals_pfm, save_result, DatasetSummary,
    LoadOptions, RunReport,
};
use psbp_core::noise::NoiseSpec;
use psbp_core::pipeline::{run_bp, run_ps, RunConfig, SolverModel};
use psbp_core::synth::{aae, render_sphere, SphereScene, NOISE_RNG_ALGORITHM};
use psbp_core::types::{LightingConfig, Mask};
use psbp_core::RlmConfig;

#[derive(Parser)]
#[command(
    name = "psbp",
    about = "Photometric stereo with Lambertian and Blinn-Phong reflectance",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recover normals, albedo and specular parameters from a dataset.
    Solve(SolveArgs),
    /// Render a synthetic sphere dataset with ground-truth normals.
    Render(RenderArgs),
    /// Print the average angular error between two normal maps.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Reflectance model: lambertian | blinn-phong
    #[arg(long)]
    model: Option<String>,
    /// Dataset directory
    #[arg(long)]
    input: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config file; flags take precedence over its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Noise std-dev per sample in normalised intensity units
    #[arg(long)]
    sigma: Option<f64>,
    /// Confidence level for the noise ball bound
    #[arg(long)]
    confidence: Option<f64>,
    /// Linearised residual contraction per step
    #[arg(long)]
    rho: Option<f64>,
    /// Discrepancy factor
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long = "scherzer-cap")]
    scherzer_cap: Option<f64>,
    /// Pyramid levels; 1 disables coarse-to-fine
    #[arg(long = "ctf-levels")]
    ctf_levels: Option<usize>,
    #[arg(long = "max-iters")]
    max_iters: Option<usize>,
    /// Initial specular coefficient seed
    #[arg(long = "init-r")]
    init_r: Option<f64>,
    /// Initial shininess seed (> 1)
    #[arg(long = "init-alpha")]
    init_alpha: Option<f64>,
    /// Drop observations below this intensity from the classical fit
    #[arg(long = "min-intensity")]
    min_intensity: Option<f64>,
    /// Perspective projection (default orthographic)
    #[arg(long, default_value_t = false)]
    perspective: bool,
    /// Focal length in pixels (perspective only)
    #[arg(long)]
    focal: Option<f64>,
    /// Use the unnormalised view vector in the halfway construction
    #[arg(long = "raw-view", default_value_t = false)]
    raw_view: bool,
    /// Solve pixels sequentially in a canonical order
    #[arg(long, default_value_t = false)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Light directions file (one "Lx Ly Lz" row per light); defaults to the
    /// built-in five-light rig
    #[arg(long = "lights-file")]
    lights_file: Option<PathBuf>,
    #[arg(long = "rho-d", default_value_t = 0.85)]
    rho_d: f64,
    #[arg(long = "rho-s", default_value_t = 0.15)]
    rho_s: f64,
    #[arg(long, default_value_t = 100.0)]
    alpha: f64,
    #[arg(long = "radius-fraction", default_value_t = 0.9)]
    radius_fraction: f64,
    #[arg(long, default_value_t = 0.005)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Mask image (nonzero = evaluate); defaults to pixels with a unit-length
    /// ground-truth normal
    #[arg(long)]
    mask: Option<PathBuf>,
}

/// Flat key-value config file mirroring the long flag names.
struct FileConfig(serde_json::Map<String, serde_json::Value>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig(serde_json::Map::new())),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("failed to read {}", path.display()))?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .with_context(|| format!("failed to parse {}", path.display()))?;
                match value {
                    serde_json::Value::Object(map) => Ok(FileConfig(map)),
                    _ => bail!("{}: config file must be a JSON object", path.display()),
                }
            }
        }
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .with_context(|| format!("config key {key:?} must be a number")),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(|v| Some(v as usize))
                .with_context(|| format!("config key {key:?} must be a non-negative integer")),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(|s| Some(s.to_string()))
                .with_context(|| format!("config key {key:?} must be a string")),
        }
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_bool()
                .map(Some)
                .with_context(|| format!("config key {key:?} must be a boolean")),
        }
    }
}

fn worker_threads() -> usize {
    match std::env::var("PS_THREADS") {
        Err(_) => 0,
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                log::warn!("PS_THREADS={raw:?} is not a number; using the default pool");
                0
            }
        },
    }
}

fn run_solve(args: &SolveArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;

    let model_name = args
        .model
        .clone()
        .or(file.string("model")?)
        .unwrap_or_else(|| "lambertian".to_string());
    let model = match model_name.as_str() {
        "lambertian" => SolverModel::Lambertian,
        "blinn-phong" | "blinn_phong" => SolverModel::BlinnPhong,
        other => bail!("unknown model {other:?}: expected lambertian or blinn-phong"),
    };

    let sigma = args.sigma.or(file.f64("sigma")?).unwrap_or(0.01);
    let confidence = args.confidence.or(file.f64("confidence")?).unwrap_or(0.95);
    let rho = args.rho.or(file.f64("rho")?).unwrap_or(0.5);
    let tau = args.tau.or(file.f64("tau")?).unwrap_or(2.5);
    let scherzer_cap = args
        .scherzer_cap
        .or(file.f64("scherzer-cap")?)
        .unwrap_or(2000.0);
    let ctf_levels = args.ctf_levels.or(file.usize("ctf-levels")?).unwrap_or(1);
    let max_iters = args.max_iters.or(file.usize("max-iters")?).unwrap_or(50);
    let init_r = args.init_r.or(file.f64("init-r")?).unwrap_or(0.01);
    let init_alpha = args.init_alpha.or(file.f64("init-alpha")?).unwrap_or(2.0);
    let min_intensity = args
        .min_intensity
        .or(file.f64("min-intensity")?)
        .unwrap_or(0.0);
    let perspective = args.perspective || file.bool("perspective")?.unwrap_or(false);
    let focal = args.focal.or(file.f64("focal")?).unwrap_or(0.0);
    let raw_view = args.raw_view || file.bool("raw-view")?.unwrap_or(false);
    let sequential = args.sequential || file.bool("sequential")?.unwrap_or(false);

    if !(sigma > 0.0) {
        bail!("sigma must be > 0, got {sigma}");
    }

    // validate the numeric configuration before touching the dataset
    let rlm = RlmConfig {
        rho,
        tau,
        scherzer_cap,
        max_iters,
        ..RlmConfig::default()
    };
    rlm.validate()?;
    if perspective && !(focal > 0.0) {
        bail!("--perspective requires --focal F with F > 0");
    }

    let dataset = load_dataset(
        &args.input,
        &LoadOptions {
            perspective,
            focal_length_px: focal,
            principal_point: None,
        },
    )?;
    let noise = NoiseSpec::derive(sigma, dataset.num_images(), confidence)?;
    let threads = worker_threads();

    let mut cfg = RunConfig::new(model, noise);
    cfg.rlm = rlm;
    cfg.ctf_levels = ctf_levels;
    cfg.init_r = init_r;
    cfg.init_alpha = init_alpha;
    cfg.min_intensity = min_intensity;
    cfg.parallel = !sequential;
    cfg.threads = threads;
    cfg.raw_view = raw_view;
    cfg.validate()?;

    let result = match model {
        SolverModel::Lambertian => run_ps(&dataset, &cfg)?,
        SolverModel::BlinnPhong => run_bp(&dataset, &cfg)?,
    };

    // score against ground truth when the dataset ships it
    let gt_path = args.input.join("gt_normals.pfm");
    let aae_degrees = if gt_path.exists() {
        let (mut gt, w, h) = load_normals_pfm(&gt_path)?;
        renormalise(&mut gt);
        if (w, h) == (dataset.width(), dataset.height()) {
            Some(aae(&result.normals, &gt, &dataset.mask)?)
        } else {
            log::warn!("gt_normals.pfm dimensions differ from the dataset; skipping AAE");
            None
        }
    } else {
        None
    };

    let negative_r_pixels = result
        .r_map
        .as_ref()
        .map(|r| {
            r.iter()
                .zip(&result.status)
                .filter(|(v, s)| s.is_some() && **v < 0.0)
                .count()
        })
        .unwrap_or(0);

    let config_echo = serde_json::json!({
        "model": model.as_str(),
        "input": args.input.display().to_string(),
        "out": args.out.display().to_string(),
        "sigma": sigma,
        "confidence": confidence,
        "delta": noise.delta,
        "rho": rho,
        "tau": tau,
        "scherzer-cap": scherzer_cap,
        "ctf-levels": ctf_levels,
        "max-iters": max_iters,
        "init-r": init_r,
        "init-alpha": init_alpha,
        "min-intensity": min_intensity,
        "perspective": perspective,
        "focal": focal,
        "raw-view": raw_view,
        "sequential": sequential,
        "threads": threads,
    });
    let report = RunReport {
        command: "solve".into(),
        model: model.as_str().into(),
        config: config_echo,
        dataset: DatasetSummary::of(&dataset),
        status_counts: result
            .status_counts()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect::<BTreeMap<_, _>>(),
        negative_r_pixels,
        aae_degrees,
        rng: None,
    };
    save_result(&args.out, &result, &report)?;
    if let Some(aae) = aae_degrees {
        println!("AAE: {aae:.3}");
    }
    println!(
        "solved {} pixels -> {}",
        dataset.mask.count_set(),
        args.out.display()
    );
    Ok(())
}

fn read_lights_file(path: &Path) -> Result<LightingConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("failed to read {}", path.display()))?;
    let mut dirs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}: line {}", path.display(), lineno + 1))?;
        if fields.len() != 3 {
            bail!("{}: line {} must hold 3 floats", path.display(), lineno + 1);
        }
        dirs.push(Vector3::new(fields[0], fields[1], fields[2]));
    }
    Ok(LightingConfig::uniform(dirs, 1.0)?)
}

fn run_render(args: &RenderArgs) -> Result<()> {
    let mut scene = SphereScene::standard();
    scene.image_size = args.size;
    scene.radius_fraction = args.radius_fraction;
    scene.rho_d = args.rho_d;
    scene.rho_s = args.rho_s;
    scene.alpha = args.alpha;
    scene.sigma = args.sigma;
    scene.seed = args.seed;
    if let Some(path) = &args.lights_file {
        scene.lighting = read_lights_file(path)?;
    }
    let (dataset, truth) = render_sphere(&scene)?;
    save_dataset(&args.out, &dataset)?;
    save_normals_pfm(
        &args.out.join("gt_normals.pfm"),
        &truth.normals,
        dataset.width(),
        dataset.height(),
    )?;

    let config_echo = serde_json::json!({
        "size": args.size,
        "radius-fraction": args.radius_fraction,
        "rho-d": args.rho_d,
        "rho-s": args.rho_s,
        "alpha": args.alpha,
        "sigma": args.sigma,
        "seed": args.seed,
        "lights-file": args.lights_file.as_ref().map(|p| p.display().to_string()),
        "out": args.out.display().to_string(),
    });
    let report = RunReport {
        command: "render".into(),
        model: "blinn_phong".into(),
        config: config_echo,
        dataset: DatasetSummary::of(&dataset),
        status_counts: BTreeMap::new(),
        negative_r_pixels: 0,
        aae_degrees: None,
        rng: Some(NOISE_RNG_ALGORITHM.into()),
    };
    let report_path = args.out.join("report.json");
    let file = std::fs::File::create(&report_path)
        .with_context(|| format!("failed to create {}", report_path.display()))?;
    serde_json::to_writer_pretty(file, &report)?;
    println!(
        "rendered {}x{} sphere with {} lights -> {}",
        args.size,
        args.size,
        dataset.num_images(),
        args.out.display()
    );
    Ok(())
}

/// Restores unit length after the f32 quantisation of the file format.
fn renormalise(normals: &mut [Vector3<f64>]) {
    for n in normals {
        let len = n.norm();
        if len > 0.0 {
            *n /= len;
        }
    }
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (mut est, ew, eh) = load_normals_pfm(&args.est)?;
    let (mut gt, gw, gh) = load_normals_pfm(&args.gt)?;
    if (ew, eh) != (gw, gh) {
        bail!("normal maps differ in size: {ew}x{eh} vs {gw}x{gh}");
    }
    renormalise(&mut est);
    renormalise(&mut gt);
    let mask = match &args.mask {
        Some(path) => {
            let img = image::open(path)
                .with_context(|| format!("failed to read {}", path.display()))?
                .to_luma8();
            if (img.width() as usize, img.height() as usize) != (ew, eh) {
                bail!("mask size differs from the normal maps");
            }
            let data = img.pixels().map(|p| p.0[0] > 0).collect();
            Mask::from_vec(ew, eh, data)?
        }
        None => {
            let data = gt.iter().map(|n| n.norm() > 0.5).collect();
            Mask::from_vec(ew, eh, data)?
        }
    };
    let err = aae(&est, &gt, &mask)?;
    println!("AAE: {err:.3}");
    Ok(())
}

/// Entry point shared by main and the tests; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own usage/diagnostic
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match &cli.command {
        Command::Solve(args) => run_solve(args),
        Command::Render(args) => run_render(args),
        Command::Eval(args) => run_eval(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
