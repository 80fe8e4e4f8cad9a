//! Command-line interface: every pipeline stage as a subcommand.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, bad config,
//! precondition violations), 2 on runtime failures (I/O, parse errors,
//! diverged training).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::dataset::{self, LayoutConfig};
use crate::error::{LfError, Result};
use crate::lightfield::{EpiOrientation, Image};
use crate::metrics;
use crate::net::{four_branch_parameter_count, NetworkParams};
use crate::numerics::checkpoint::{read_checkpoint, write_checkpoint};
use crate::numerics::gradcheck;
use crate::numerics::tensor::{Element, Precision};
use crate::pfm;
use crate::refocus::{self, Interp};
use crate::synth::{gen_lightfield, SyntheticScene};
use crate::train::{self, SceneData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InterpArg {
    Nearest,
    Linear,
}

impl From<InterpArg> for Interp {
    fn from(i: InterpArg) -> Self {
        match i {
            InterpArg::Nearest => Interp::Nearest,
            InterpArg::Linear => Interp::Linear,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "lfdepth",
    version,
    about = "Light-field depth estimation from EPI patch pairs",
    disable_help_subcommand = true
)]
struct Cli {
    /// Seed override for any randomized stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force single-threaded, fixed-order execution (already the default
    /// engine behavior; recorded in run fingerprints).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Numeric precision override.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic benchmark-layout dataset (views, ground truth,
    /// parameters file).
    Synth(SynthArgs),
    /// Export an EPI slice as a PNG image.
    Slice(SliceArgs),
    /// Refocus a dataset by a disparity shift and write the result.
    Refocus(RefocusArgs),
    /// Sample patch pairs, run the refocusing augmentation, report the
    /// bookkeeping.
    Augment(AugmentArgs),
    /// Train the network and write a checkpoint.
    Train(TrainArgs),
    /// Estimate a disparity map for a dataset with a trained model.
    Infer(InferArgs),
    /// Compare a predicted disparity map against ground truth.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Run the 4-cell ablation grid (baseline / ORM / EPIR / full).
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Layer disparities front-to-back: one value renders a single plane,
    /// two render an occluding rectangle over a background.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.0")]
    layers: Vec<f32>,
    /// Spatial resolution (square).
    #[arg(long, default_value_t = 64)]
    spatial: usize,
    /// Angular resolution (square).
    #[arg(long, default_value_t = 9)]
    views: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
}

#[derive(Debug, Args)]
struct SliceArgs {
    /// Dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Slice orientation.
    #[arg(long, value_enum, default_value_t = OrientationArg::Horizontal)]
    orientation: OrientationArg,
    /// Row (horizontal) or column (vertical) index.
    #[arg(long)]
    index: usize,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OrientationArg {
    Horizontal,
    Vertical,
}

#[derive(Debug, Args)]
struct RefocusArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Disparity shift in pixels per view step.
    #[arg(long, allow_hyphen_values = true)]
    shift: f32,
    #[arg(long, value_enum, default_value_t = InterpArg::Linear)]
    interp: InterpArg,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Dataset directory (needs ground truth).
    #[arg(long)]
    input: PathBuf,
    /// Number of seed samples to draw.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Refocusing shifts; defaults to the x8 set.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    shifts: Option<Vec<f32>>,
    /// Patch width.
    #[arg(long, default_value_t = 29)]
    patch_w: usize,
    /// Directory to dump a few augmented patches into, as PNGs.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directories with ground truth; a synthetic set is generated
    /// per the config when omitted.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Also append `iter,loss,lr,seconds` rows to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory to run on.
    #[arg(long)]
    input: PathBuf,
    /// Output disparity map (PFM).
    #[arg(long)]
    out: PathBuf,
    /// Expected config; inference refuses a checkpoint whose architecture
    /// fingerprint disagrees, unless --force.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Pixels per forward batch.
    #[arg(long, default_value_t = 128)]
    chunk: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predicted disparity map (PFM).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth disparity map (PFM).
    #[arg(long)]
    gt: PathBuf,
    /// Optional mask PNG; non-zero pixels are evaluated.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = metrics::BADPIX_THRESHOLD)]
    threshold: f32,
    /// Write the binary error map as a PNG.
    #[arg(long)]
    errmap: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Number of random seeds per check.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Per-op relative error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// End-to-end miniature-network tolerance.
    #[arg(long, default_value_t = 1e-3)]
    e2e_tolerance: f64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Config file; the built-in toy scale applies when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the report to this file as well as stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        deterministic: cli.deterministic,
        precision: cli.precision.map(Into::into),
    };
    match cli.command {
        Command::Synth(args) => cmd_synth(args, &overrides),
        Command::Slice(args) => cmd_slice(args),
        Command::Refocus(args) => cmd_refocus(args),
        Command::Augment(args) => cmd_augment(args, &overrides),
        Command::Train(args) => cmd_train(args, &overrides),
        Command::Infer(args) => cmd_infer(args, &overrides),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => cmd_ablate(args, &overrides),
    }
}

struct Overrides {
    seed: Option<u64>,
    deterministic: bool,
    precision: Option<Precision>,
}

impl Overrides {
    fn apply(&self, cfg: &mut Config) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| LfError::io(p, e))?;
            Config::from_text(&text)?
        }
        None => Config::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(args: SynthArgs, overrides: &Overrides) -> Result<()> {
    let seed = overrides.seed.unwrap_or(0);
    if args.layers.is_empty() || args.layers.len() > 2 {
        return Err(LfError::Argument(format!(
            "--layers wants 1 or 2 disparities, got {}",
            args.layers.len()
        )));
    }
    let scene = if args.layers.len() == 1 {
        SyntheticScene::single_plane(
            args.layers[0],
            args.spatial,
            args.spatial,
            args.views,
            args.views,
            args.channels,
            seed,
        )?
    } else {
        SyntheticScene::two_plane(
            args.layers[0],
            args.layers[1],
            args.spatial,
            args.spatial,
            args.views,
            args.views,
            args.channels,
            seed,
        )?
    };
    let (lf, gt) = gen_lightfield(&scene)?;
    let lfq = lf.quantized_u8();
    let lo = args.layers.iter().copied().fold(f32::INFINITY, f32::min) - 0.5;
    let hi = args.layers.iter().copied().fold(f32::NEG_INFINITY, f32::max) + 0.5;
    let params = dataset::synthetic_params(&lfq, lo, hi);
    dataset::save_dataset(&args.out, &lfq, Some(&gt), &params, &LayoutConfig::default())?;
    println!(
        "wrote {} views + ground truth to {}",
        args.views * args.views,
        args.out.display()
    );
    Ok(())
}

fn epi_to_image(epi: &crate::lightfield::Epi) -> Image {
    Image {
        height: epi.angular,
        width: epi.spatial,
        channels: epi.channels,
        data: epi.data.clone(),
    }
}

fn cmd_slice(args: SliceArgs) -> Result<()> {
    let scene = dataset::load_dataset(&args.input, &LayoutConfig::default())?;
    let epi = match args.orientation {
        OrientationArg::Horizontal => scene.lightfield.horizontal_epi(args.index)?,
        OrientationArg::Vertical => scene.lightfield.vertical_epi(args.index)?,
    };
    dataset::write_view_png(&epi_to_image(&epi), &args.out)?;
    println!(
        "wrote {:?} EPI {} ({}x{}) to {}",
        match epi.orientation {
            EpiOrientation::Horizontal => "horizontal",
            EpiOrientation::Vertical => "vertical",
        },
        args.index,
        epi.angular,
        epi.spatial,
        args.out.display()
    );
    Ok(())
}

fn cmd_refocus(args: RefocusArgs) -> Result<()> {
    let scene = dataset::load_dataset(&args.input, &LayoutConfig::default())?;
    let refocused = refocus::refocus_lightfield(&scene.lightfield, args.shift, args.interp.into())?;
    let refocused = refocused.quantized_u8();
    let gt = scene.gt.map(|mut map| {
        for v in map.values.iter_mut() {
            *v = refocus::adjust_gt(*v, args.shift);
        }
        map
    });
    let mut params = scene.params.clone();
    params.disp_min -= args.shift;
    params.disp_max -= args.shift;
    if params.disp_min > params.disp_max {
        std::mem::swap(&mut params.disp_min, &mut params.disp_max);
    }
    dataset::save_dataset(&args.out, &refocused, gt.as_ref(), &params, &LayoutConfig::default())?;
    println!("refocused by {} into {}", args.shift, args.out.display());
    Ok(())
}

fn cmd_augment(args: AugmentArgs, overrides: &Overrides) -> Result<()> {
    use rand::SeedableRng;
    let scene = dataset::load_dataset(&args.input, &LayoutConfig::default())?;
    let data = SceneData::from_loaded(scene)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(overrides.seed.unwrap_or(0));
    let pool = train::sample_patches(std::slice::from_ref(&data), args.count, args.patch_w, true, &mut rng)?;
    let shifts = args.shifts.unwrap_or_else(refocus::default_shift_set);
    let seeds: Vec<_> = pool.into_iter().map(|s| s.sample).collect();
    let limit = refocus::representable_slope(seeds[0].horizontal.height, args.patch_w) * 0.9;
    let out = refocus::augment(&seeds, &shifts, Interp::Linear, Some(limit))?;
    let expected = seeds.len() * (shifts.len() + 1);
    println!("seeds: {}", seeds.len());
    println!("shifts: {shifts:?}");
    println!("slope limit: {limit:.3}");
    println!("augmented: {} (expected {expected}, dropped {})", out.len(), expected - out.len());
    for &s in &shifts {
        let n = out.iter().filter(|a| a.shift == s).count();
        println!("  shift {s:+.2}: {n}");
    }
    if let Some(dir) = args.dump_dir {
        std::fs::create_dir_all(&dir).map_err(|e| LfError::io(&dir, e))?;
        for (i, sample) in out.iter().take(16).enumerate() {
            let p = &sample.horizontal;
            let img = Image {
                height: p.height,
                width: p.width,
                channels: p.channels,
                data: p.data.clone(),
            };
            dataset::write_view_png(&img, &dir.join(format!("patch{i:02}_s{:+.2}.png", sample.shift)))?;
        }
        println!("dumped sample patches to {}", dir.display());
    }
    Ok(())
}

fn load_scenes(paths: &[PathBuf], cfg: &Config) -> Result<Vec<SceneData>> {
    if paths.is_empty() {
        return train::synthetic_training_scenes(cfg);
    }
    paths
        .iter()
        .map(|p| dataset::load_dataset(p, &LayoutConfig::default()).and_then(SceneData::from_loaded))
        .collect()
}

fn cmd_train(args: TrainArgs, overrides: &Overrides) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), overrides)?;
    match cfg.precision {
        Precision::Single => train_typed::<f32>(&args, &cfg),
        Precision::Double => train_typed::<f64>(&args, &cfg),
    }
}

fn train_typed<T: Element>(args: &TrainArgs, cfg: &Config) -> Result<()> {
    use std::io::Write;
    let scenes = load_scenes(&args.data, cfg)?;
    println!("config fingerprint: {:016x}", cfg.fingerprint());
    println!(
        "parameters: {} (4-branch variant would use {})",
        {
            use rand::SeedableRng;
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(2);
            NetworkParams::<f32>::init(cfg.net_config(), &mut r)?.parameter_count()
        },
        four_branch_parameter_count(&cfg.net_config())?
    );
    let mut log_file = match &args.log {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| LfError::io(p, e))?),
        None => None,
    };
    let mut on_log = |row: &train::LogRow| {
        println!("{}", row.csv());
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{}", row.csv());
        }
    };
    let ckpt_path = args.out.clone();
    let cfg_text = cfg.canonical_text();
    let arch = cfg.arch_fingerprint();
    let mut on_ckpt = |iter: usize, params: &NetworkParams<T>| -> Result<()> {
        write_checkpoint(&ckpt_path, arch, &cfg_text, &params.to_named_tensors())?;
        log::info!("checkpoint at iteration {iter} -> {}", ckpt_path.display());
        Ok(())
    };
    let outcome = train::train::<T>(cfg, &scenes, Some(&mut on_log), Some(&mut on_ckpt))?;
    dataset::write_meta(
        &args.out,
        cfg.fingerprint(),
        &[
            ("kind", "checkpoint".to_string()),
            ("val_mae", outcome.val_mae.map(|v| format!("{v:.5}")).unwrap_or_else(|| "n/a".into())),
            ("pool", format!("{} -> {}", outcome.pool_originals, outcome.pool_after_augment)),
        ],
    )?;
    if let Some(mae) = outcome.val_mae {
        println!("val_mae: {mae:.5} over {} held-out samples", outcome.val_samples);
    }
    println!("checkpoint: {}", args.out.display());
    Ok(())
}

fn cmd_infer(args: InferArgs, overrides: &Overrides) -> Result<()> {
    let probe = read_checkpoint::<f32>(&args.model)?;
    let stored_cfg = Config::from_text(&probe.config_text)
        .map_err(|e| LfError::Checkpoint(format!("embedded config does not parse: {e}")))?;
    if let Some(cfg_path) = &args.config {
        let wanted = load_config(Some(cfg_path), overrides)?;
        if wanted.arch_fingerprint() != stored_cfg.arch_fingerprint() && !args.force {
            return Err(LfError::Argument(format!(
                "checkpoint architecture {:016x} does not match requested config {:016x}; pass --force to override",
                stored_cfg.arch_fingerprint(),
                wanted.arch_fingerprint()
            )));
        }
    }
    let precision = overrides.precision.unwrap_or(stored_cfg.precision);
    match precision {
        Precision::Single => infer_typed::<f32>(&args, &stored_cfg),
        Precision::Double => infer_typed::<f64>(&args, &stored_cfg),
    }
}

fn infer_typed<T: Element>(args: &InferArgs, cfg: &Config) -> Result<()> {
    let ck = read_checkpoint::<T>(&args.model)?;
    let params = NetworkParams::<T>::from_named_tensors(cfg.net_config(), &ck.tensors)?;
    let scene = dataset::load_dataset(&args.input, &LayoutConfig::default())?;
    let start = std::time::Instant::now();
    let map = train::infer_map(&scene.lightfield, &params, args.chunk)?;
    let seconds = start.elapsed().as_secs_f64();
    pfm::write_pfm(&pfm::PfmImage::from_disparity(&map), &args.out)?;
    dataset::write_meta(
        &args.out,
        cfg.fingerprint(),
        &[
            ("kind", "disparity-map".to_string()),
            ("model", args.model.display().to_string()),
            ("input", args.input.display().to_string()),
            ("seconds", format!("{seconds:.2}")),
        ],
    )?;
    println!(
        "inferred {}x{} map in {seconds:.2}s -> {}",
        map.width,
        map.height,
        args.out.display()
    );
    Ok(())
}

fn read_mask_png(path: &Path, width: usize, height: usize) -> Result<Vec<bool>> {
    let img = dataset::read_view_png(path, 1)?;
    if img.width != width || img.height != height {
        return Err(LfError::Argument(format!(
            "mask is {}x{}, maps are {width}x{height}",
            img.width, img.height
        )));
    }
    Ok(img.data.iter().map(|&v| v > 0.0).collect())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let pred = pfm::read_pfm(&args.pred)?.into_disparity()?;
    let gt = pfm::read_pfm(&args.gt)?.into_disparity()?;
    let mask = match &args.mask {
        Some(p) => {
            let m = read_mask_png(p, pred.width, pred.height)?;
            m.iter().zip(&gt.mask).map(|(&a, &b)| a && b).collect()
        }
        None => gt.mask.clone(),
    };
    let badpix = metrics::badpix(&pred, &gt, &mask, args.threshold)?;
    let mse = metrics::mse100(&pred, &gt, &mask)?;
    println!("BadPix: {badpix:.2}");
    println!("MSE: {mse:.4}");
    if let Some(out) = &args.errmap {
        let map = metrics::error_map(&pred, &gt, &mask, args.threshold)?;
        dataset::write_view_png(&map, out)?;
        println!("error map: {}", out.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let seeds: Vec<u64> = (1..=args.seeds).collect();
    let results = gradcheck::run_op_suite(&seeds, args.tolerance)?;
    let mut ok = true;
    for r in &results {
        println!("{r}");
        ok &= r.passed();
    }
    let mut worst_e2e = 0.0f64;
    for &seed in &seeds {
        worst_e2e = worst_e2e.max(crate::net::end_to_end_gradcheck(seed, 48)?);
    }
    let e2e_ok = worst_e2e < args.e2e_tolerance;
    println!(
        "{} {:<28} max rel err {:.3e} (tol {:.0e}, {} seeds)",
        if e2e_ok { "PASS" } else { "FAIL" },
        "network_end_to_end",
        worst_e2e,
        args.e2e_tolerance,
        seeds.len()
    );
    if ok && e2e_ok {
        Ok(())
    } else {
        Err(LfError::Training("gradient checks failed".into()))
    }
}

fn cmd_ablate(args: AblateArgs, overrides: &Overrides) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => load_config(Some(p), overrides)?,
        None => {
            let mut cfg = toy_ablation_config();
            overrides.apply(&mut cfg);
            cfg
        }
    };
    match cfg.precision {
        Precision::Single => ablate_typed::<f32>(&args, &cfg),
        Precision::Double => ablate_typed::<f64>(&args, &cfg),
    }
}

/// Desk-scale defaults for the ablation grid.
pub fn toy_ablation_config() -> Config {
    let mut cfg = Config::default();
    cfg.width = 8;
    cfg.orm_embed = 8;
    cfg.iterations = 400;
    cfg.batch_size = 16;
    cfg.pool_size = 4000;
    cfg.synth_scenes = 8;
    cfg.synth_spatial = 48;
    cfg.lr = 1e-3;
    cfg.disp_min = -1.2;
    cfg.disp_max = 1.2;
    cfg.shifts = vec![-1.0, -0.5, 0.5, 1.0];
    cfg.log_every = 100;
    cfg
}

fn ablate_typed<T: Element>(args: &AblateArgs, cfg: &Config) -> Result<()> {
    let scenes = train::synthetic_training_scenes(cfg)?;
    let eval_scene = train::synthetic_eval_scene(cfg, 7)?;
    let mut progress = |label: &str| println!("training cell: {label}");
    let report = train::ablate::<T>(cfg, &scenes, &eval_scene, Some(&mut progress))?;
    print!("{report}");
    if let Some(out) = &args.out {
        let mut text = format!("{report}");
        text.push_str(&format!("config_fingerprint: {:016x}\n", report.config_fingerprint));
        let dir = out.parent().unwrap_or_else(|| Path::new("."));
        let _ = std::fs::create_dir_all(dir);
        std::fs::write(out, text).map_err(|e| LfError::io(out, e))?;
        dataset::write_meta(out, report.config_fingerprint, &[("kind", "ablation-report".to_string())])?;
        println!("report: {}", out.display());
    }
    Ok(())
}
