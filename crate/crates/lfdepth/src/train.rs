//! Patch sampling, the training loop, full-image inference, and the
//! ablation harness.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{LfError, Result};
use crate::lightfield::{BorderPolicy, DisparityMap, LightField4D};
use crate::metrics;
use crate::net::{patches_to_tensor, Mode, NetworkParams, Runner};
use crate::numerics::rmsprop::{Rmsprop, RmspropConfig};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::{Element, Shape, Tensor};
use crate::refocus::{augment, representable_slope, AugmentedSample, Interp};
use crate::synth::{gen_lightfield, SyntheticScene};

/// A scene ready for training: rendered light field plus ground truth.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub name: String,
    pub lightfield: LightField4D,
    pub gt: DisparityMap,
}

impl SceneData {
    pub fn from_loaded(scene: crate::dataset::LoadedScene) -> Result<Self> {
        let gt = scene.gt.ok_or_else(|| {
            LfError::Dataset(format!("scene `{}` has no ground truth; cannot train on it", scene.name))
        })?;
        Ok(SceneData { name: scene.name, lightfield: scene.lightfield, gt })
    }
}

/// One pooled sample plus the scene it came from (for stratified splits).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sample: AugmentedSample,
    pub scene: usize,
}

/// Draw patch pairs uniformly over (scene, pixel).
///
/// With `interior_only` the patch must fit without replication; otherwise
/// border pixels are admitted and replicate edges.
pub fn sample_patches(
    scenes: &[SceneData],
    n: usize,
    patch_w: usize,
    interior_only: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSample>> {
    if scenes.is_empty() {
        return Err(LfError::Argument("empty dataset".into()));
    }
    let half = (patch_w - 1) / 2;
    let border = if interior_only { BorderPolicy::Reject } else { BorderPolicy::Replicate };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let s = rng.random_range(0..scenes.len());
        let scene = &scenes[s];
        let (w, h) = (scene.lightfield.width(), scene.lightfield.height());
        if interior_only && (w <= 2 * half || h <= 2 * half) {
            return Err(LfError::Argument(format!(
                "scene `{}` ({w}x{h}) is smaller than the patch window",
                scene.name
            )));
        }
        let (x, y) = if interior_only {
            (rng.random_range(half..w - half), rng.random_range(half..h - half))
        } else {
            (rng.random_range(0..w), rng.random_range(0..h))
        };
        let hepi = scene.lightfield.horizontal_epi(y)?;
        let vepi = scene.lightfield.vertical_epi(x)?;
        let mut ph = hepi.extract_patch(x, patch_w, border)?;
        let mut pv = vepi.extract_patch(y, patch_w, border)?;
        let gt = scene.gt.at(y, x);
        ph.gt_disparity = Some(gt);
        pv.gt_disparity = Some(gt);
        out.push(TrainSample { sample: AugmentedSample::new(ph, pv, gt)?, scene: s });
    }
    Ok(out)
}

/// One `iter,loss,lr,seconds` line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{:.6},{:.6e},{:.3}", self.iter, self.loss, self.lr, self.seconds)
    }
}

/// Result of one training run.
pub struct TrainOutcome<T> {
    pub params: NetworkParams<T>,
    pub log: Vec<LogRow>,
    pub pool_originals: usize,
    pub pool_after_augment: usize,
    pub val_samples: usize,
    /// Mean absolute error on the held-out split, when one exists.
    pub val_mae: Option<f64>,
}

/// Learning rate at a 1-based iteration: optionally halved after each third
/// of the run.
pub fn lr_at(config: &Config, iter: usize) -> f64 {
    if config.lr_halving {
        let third = (3 * (iter - 1)) / config.iterations.max(1);
        config.lr * 0.5f64.powi(third as i32)
    } else {
        config.lr
    }
}

fn batch_tensors<T: Element>(
    pool: &[TrainSample],
    indices: &[usize],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let hs: Vec<_> = indices.iter().map(|&i| &pool[i].sample.horizontal).collect();
    let vs: Vec<_> = indices.iter().map(|&i| &pool[i].sample.vertical).collect();
    let ph = patches_to_tensor::<T>(&hs)?;
    let pv = patches_to_tensor::<T>(&vs)?;
    let gt = Tensor::from_vec(
        Shape::d1(indices.len()),
        indices.iter().map(|&i| T::from_f64c(pool[i].sample.gt as f64)).collect(),
    )?;
    Ok((ph, pv, gt))
}

/// Mean absolute error of the network over a sample set, in eval mode.
pub fn eval_mae<T: Element>(params: &NetworkParams<T>, pool: &[TrainSample], chunk: usize) -> Result<f64> {
    if pool.is_empty() {
        return Err(LfError::Argument("empty evaluation pool".into()));
    }
    let mut params = params.clone();
    let mut total = 0.0f64;
    for block in (0..pool.len()).collect::<Vec<_>>().chunks(chunk.max(1)) {
        let (ph, pv, gt) = batch_tensors::<T>(pool, block)?;
        let mut tape = Tape::new();
        let h = tape.constant(ph);
        let v = tape.constant(pv);
        let mut runner = Runner::new(&mut tape, &params, Mode::Eval);
        let out = runner.network(&mut params, h, v)?;
        let pred = tape.value(out).data();
        for (p, g) in pred.iter().zip(gt.data()) {
            total += (p.to_f64c() - g.to_f64c()).abs();
        }
    }
    Ok(total / pool.len() as f64)
}

/// Stratified train/validation split: within each scene, every k-th sample
/// goes to validation.
fn split_pool(pool: Vec<TrainSample>, val_fraction: f64) -> (Vec<TrainSample>, Vec<TrainSample>) {
    if val_fraction <= 0.0 {
        return (pool, Vec::new());
    }
    let k = (1.0 / val_fraction).round().max(2.0) as usize;
    let mut counters = std::collections::BTreeMap::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in pool {
        let c = counters.entry(s.scene).or_insert(0usize);
        *c += 1;
        if *c % k == 0 {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

/// Run the training loop on pre-rendered scenes.
///
/// Callbacks: `on_log` fires for every emitted log row; `on_checkpoint`
/// fires every `checkpoint_every` iterations (when non-zero) and once at the
/// end.
pub fn train<T: Element>(
    config: &Config,
    scenes: &[SceneData],
    mut on_log: Option<&mut dyn FnMut(&LogRow)>,
    mut on_checkpoint: Option<&mut dyn FnMut(usize, &NetworkParams<T>) -> Result<()>>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    for scene in scenes {
        let lf = &scene.lightfield;
        if lf.views_u() != config.patch_h || lf.views_v() != config.patch_h {
            return Err(LfError::Argument(format!(
                "scene `{}` has angular extents {}x{}, network patches need {}",
                scene.name,
                lf.views_u(),
                lf.views_v(),
                config.patch_h
            )));
        }
        if lf.channels() != config.channels {
            return Err(LfError::Argument(format!(
                "scene `{}` has {} channels, config says {}",
                scene.name,
                lf.channels(),
                config.channels
            )));
        }
    }

    let mut rng_data = ChaCha8Rng::seed_from_u64(config.seed);
    rng_data.set_stream(1);
    let mut rng_init = ChaCha8Rng::seed_from_u64(config.seed);
    rng_init.set_stream(2);
    let mut rng_batch = ChaCha8Rng::seed_from_u64(config.seed);
    rng_batch.set_stream(3);

    let pool = sample_patches(scenes, config.pool_size, config.patch_w, true, &mut rng_data)?;
    let pool_originals = pool.len();
    let (mut train_pool, val_pool) = split_pool(pool, config.val_fraction);
    if config.epir_enabled && !config.shifts.is_empty() {
        let limit = representable_slope(config.patch_h, config.patch_w) * 0.9;
        let scene_ids: Vec<usize> = train_pool.iter().map(|s| s.scene).collect();
        let samples: Vec<AugmentedSample> = train_pool.into_iter().map(|s| s.sample).collect();
        let augmented = augment(&samples, &config.shifts, Interp::Linear, Some(limit))?;
        // augment emits each seed's original (shift 0) followed by its copies
        let mut rebuilt = Vec::with_capacity(augmented.len());
        let mut seed_idx = 0usize;
        let mut emitted = 0usize;
        for sample in augmented {
            if sample.shift == 0.0 && emitted > 0 {
                seed_idx += 1;
            }
            emitted += 1;
            rebuilt.push(TrainSample { sample, scene: scene_ids[seed_idx] });
        }
        train_pool = rebuilt;
    }
    if train_pool.is_empty() {
        return Err(LfError::Argument("training pool is empty after split/augmentation".into()));
    }
    let pool_after_augment = train_pool.len();

    let mut params = NetworkParams::<T>::init(config.net_config(), &mut rng_init)?;
    log::info!(
        "network: {} trainable scalars ({} tensors)",
        params.parameter_count(),
        params.trainable_indices().len()
    );
    let opt_cfg = RmspropConfig {
        lr: config.lr,
        rho: config.rho,
        eps: config.eps,
        weight_decay: config.weight_decay,
    };
    let mut optimizer = Rmsprop::<T>::new(opt_cfg, &params.trainable_shapes());
    let trainable = params.trainable_indices();

    let start = Instant::now();
    let mut log_rows = Vec::new();
    for iter in 1..=config.iterations {
        let lr = lr_at(config, iter);
        optimizer.set_lr(lr);
        let indices: Vec<usize> =
            (0..config.batch_size).map(|_| rng_batch.random_range(0..train_pool.len())).collect();
        let (ph, pv, gt) = batch_tensors::<T>(&train_pool, &indices)?;
        let gt_stats = {
            let d = gt.data();
            let mean = d.iter().map(|v| v.to_f64c()).sum::<f64>() / d.len() as f64;
            let min = d.iter().map(|v| v.to_f64c()).fold(f64::INFINITY, f64::min);
            let max = d.iter().map(|v| v.to_f64c()).fold(f64::NEG_INFINITY, f64::max);
            (mean, min, max)
        };

        let mut tape = Tape::new();
        let h = tape.constant(ph);
        let v = tape.constant(pv);
        let t = tape.constant(gt);
        let mut runner = Runner::new(&mut tape, &params, Mode::Train);
        let out = runner.network(&mut params, h, v)?;
        let loss_var = runner.tape.mae_loss(out, t)?;
        let bound = runner.into_bound();
        let loss = tape.value(loss_var).item().to_f64c();
        if !loss.is_finite() {
            return Err(LfError::Training(format!(
                "non-finite loss {loss} at iteration {iter} (lr {lr:.3e}, batch gt mean {:.3} min {:.3} max {:.3})",
                gt_stats.0, gt_stats.1, gt_stats.2
            )));
        }
        let grads = tape.backward(loss_var)?;
        {
            let grad_refs: Vec<Option<&Tensor<T>>> =
                trainable.iter().map(|&idx| bound[idx].and_then(|var| grads.get(var))).collect();
            let mut param_refs = params.trainable_tensors_mut();
            optimizer.step(&mut param_refs, &grad_refs)?;
        }

        if iter == 1 || iter % config.log_every.max(1) == 0 || iter == config.iterations {
            let row = LogRow { iter, loss, lr, seconds: start.elapsed().as_secs_f64() };
            if let Some(cb) = on_log.as_deref_mut() {
                cb(&row);
            }
            log_rows.push(row);
        }
        if config.checkpoint_every > 0 && iter % config.checkpoint_every == 0 {
            if let Some(cb) = on_checkpoint.as_deref_mut() {
                cb(iter, &params)?;
            }
        }
    }
    if let Some(cb) = on_checkpoint.as_deref_mut() {
        cb(config.iterations, &params)?;
    }

    let val_mae = if val_pool.is_empty() {
        None
    } else {
        Some(eval_mae(&params, &val_pool, 256)?)
    };
    if let Some(mae) = val_mae {
        log::info!("validation MAE over {} samples: {mae:.4}", val_pool.len());
    }
    Ok(TrainOutcome {
        params,
        log: log_rows,
        pool_originals,
        pool_after_augment,
        val_samples: val_pool.len(),
        val_mae,
    })
}

/// Disparity estimate for every center-view pixel.
///
/// Patches replicate at the borders; the validity mask marks the interior
/// band where the full patch fit without replication.
pub fn infer_map<T: Element>(
    lf: &LightField4D,
    params: &NetworkParams<T>,
    chunk: usize,
) -> Result<DisparityMap> {
    let config = &params.config;
    if lf.views_u() != config.patch_h || lf.views_v() != config.patch_h {
        return Err(LfError::Argument(format!(
            "light field has angular extents {}x{}, network patches need {}",
            lf.views_u(),
            lf.views_v(),
            config.patch_h
        )));
    }
    if lf.channels() != config.channels {
        return Err(LfError::Argument(format!(
            "light field has {} channels, network wants {}",
            lf.channels(),
            config.channels
        )));
    }
    if params.bn_uninitialized() {
        log::warn!("inference before any training step: batch norm uses initialized running stats (mean 0, var 1)");
    }
    let mut params = params.clone();
    let (w, h) = (lf.width(), lf.height());
    let half = (config.patch_w - 1) / 2;
    let mut map = DisparityMap::new(h, w);
    // vertical EPIs are reused across rows
    let vepis: Vec<_> = (0..w).map(|x| lf.vertical_epi(x)).collect::<Result<_>>()?;
    let chunk = chunk.max(1);
    let mut pending: Vec<(usize, usize)> = Vec::with_capacity(chunk);
    let mut patches_h = Vec::with_capacity(chunk);
    let mut patches_v = Vec::with_capacity(chunk);
    let flush = |pending: &mut Vec<(usize, usize)>,
                     patches_h: &mut Vec<crate::lightfield::EpiPatch>,
                     patches_v: &mut Vec<crate::lightfield::EpiPatch>,
                     map: &mut DisparityMap,
                     params: &mut NetworkParams<T>|
     -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let hs: Vec<_> = patches_h.iter().collect();
        let vs: Vec<_> = patches_v.iter().collect();
        let ph = patches_to_tensor::<T>(&hs)?;
        let pv = patches_to_tensor::<T>(&vs)?;
        let mut tape = Tape::new();
        let hv = tape.constant(ph);
        let vv = tape.constant(pv);
        let mut runner = Runner::new(&mut tape, params, Mode::Eval);
        let out = runner.network(params, hv, vv)?;
        let pred = tape.value(out).data();
        for (&(x, y), value) in pending.iter().zip(pred) {
            let interior = x >= half && x + half < w && y >= half && y + half < h;
            map.set(y, x, value.to_f64c() as f32, interior);
        }
        pending.clear();
        patches_h.clear();
        patches_v.clear();
        Ok(())
    };
    for y in 0..h {
        let hepi = lf.horizontal_epi(y)?;
        for x in 0..w {
            patches_h.push(hepi.extract_patch(x, config.patch_w, BorderPolicy::Replicate)?);
            patches_v.push(vepis[x].extract_patch(y, config.patch_w, BorderPolicy::Replicate)?);
            pending.push((x, y));
            if pending.len() == chunk {
                flush(&mut pending, &mut patches_h, &mut patches_v, &mut map, &mut params)?;
            }
        }
    }
    flush(&mut pending, &mut patches_h, &mut patches_v, &mut map, &mut params)?;
    Ok(map)
}

/// Evaluation mask for a scene: interior band intersected with the ground
/// truth's own validity.
pub fn interior_eval_mask(map: &DisparityMap, gt: &DisparityMap) -> Vec<bool> {
    map.mask.iter().zip(&gt.mask).map(|(&a, &b)| a && b).collect()
}

/// Synthetic training set: single-plane scenes with disparities spread over
/// the configured range, plus two-plane occlusion scenes.
pub fn synthetic_training_scenes(config: &Config) -> Result<Vec<SceneData>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(11);
    let mut scenes = Vec::with_capacity(config.synth_scenes);
    let span = config.disp_max - config.disp_min;
    for i in 0..config.synth_scenes {
        let seed = rng.random::<u64>();
        let scene = if i % 4 == 3 {
            let a = config.disp_min + span * rng.random_range(0.0..1.0f32);
            let b = config.disp_min + span * rng.random_range(0.0..1.0f32);
            let (front, back) = if a > b { (a, b) } else { (b, a) };
            let front = if front - back < 0.25 { back + 0.25 } else { front };
            SyntheticScene::two_plane(
                front.min(config.disp_max + 0.25),
                back,
                config.synth_spatial,
                config.synth_spatial,
                config.patch_h,
                config.patch_h,
                config.channels,
                seed,
            )?
        } else {
            // stratified so the pool covers the range roughly uniformly
            let t = (i as f32 + rng.random_range(0.0..1.0f32)) / config.synth_scenes as f32;
            SyntheticScene::single_plane(
                config.disp_min + span * t,
                config.synth_spatial,
                config.synth_spatial,
                config.patch_h,
                config.patch_h,
                config.channels,
                seed,
            )?
        };
        let (lf, gt) = gen_lightfield(&scene)?;
        scenes.push(SceneData { name: format!("synth{i:03}"), lightfield: lf, gt });
    }
    Ok(scenes)
}

/// A held-out two-plane scene for end-to-end evaluation.
pub fn synthetic_eval_scene(config: &Config, tag: u64) -> Result<SceneData> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15 ^ tag);
    rng.set_stream(13);
    let seed = rng.random::<u64>();
    let front = rng.random_range(0.6..1.4f32);
    let back = rng.random_range(-0.8..0.0f32);
    let scene = SyntheticScene::two_plane(
        front,
        back,
        config.synth_spatial,
        config.synth_spatial,
        config.patch_h,
        config.patch_h,
        config.channels,
        seed,
    )?;
    let (lf, gt) = gen_lightfield(&scene)?;
    Ok(SceneData { name: format!("eval{tag}"), lightfield: lf, gt })
}

/// One cell of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: &'static str,
    pub orm: bool,
    pub epir: bool,
    pub badpix: f64,
    pub mse100: f64,
    pub val_mae: Option<f64>,
}

/// Results of the 4-cell ablation grid.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub threshold: f32,
    pub config_fingerprint: u64,
}

impl std::fmt::Display for AblationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:<8}", "Metric")?;
        for cell in &self.cells {
            write!(f, " {:>12}", cell.label)?;
        }
        writeln!(f)?;
        write!(f, "{:<8}", "BadPix")?;
        for cell in &self.cells {
            write!(f, " {:>12.2}", cell.badpix)?;
        }
        writeln!(f)?;
        write!(f, "{:<8}", "MSE")?;
        for cell in &self.cells {
            write!(f, " {:>12.3}", cell.mse100)?;
        }
        writeln!(f)
    }
}

/// Train and evaluate the Baseline / w ORM / w EPIR / Full grid on one seed.
pub fn ablate<T: Element>(
    base: &Config,
    train_scenes: &[SceneData],
    eval_scene: &SceneData,
    mut on_progress: Option<&mut dyn FnMut(&str)>,
) -> Result<AblationReport> {
    let grid: [(&'static str, bool, bool); 4] = [
        ("Baseline", false, false),
        ("w/ ORM", true, false),
        ("w/ EPIR", false, true),
        ("Full model", true, true),
    ];
    let mut cells = Vec::new();
    for (label, orm, epir) in grid {
        let mut cfg = base.clone();
        cfg.orm_enabled = orm;
        cfg.epir_enabled = epir;
        if let Some(cb) = on_progress.as_deref_mut() {
            cb(label);
        }
        let outcome = train::<T>(&cfg, train_scenes, None, None)?;
        let map = infer_map(&eval_scene.lightfield, &outcome.params, cfg.batch_size)?;
        let mask = interior_eval_mask(&map, &eval_scene.gt);
        let badpix = metrics::badpix(&map, &eval_scene.gt, &mask, metrics::BADPIX_THRESHOLD)?;
        let mse = metrics::mse100(&map, &eval_scene.gt, &mask)?;
        cells.push(AblationCell { label, orm, epir, badpix, mse100: mse, val_mae: outcome.val_mae });
    }
    let full = &cells[3];
    let base_cell = &cells[0];
    log::info!(
        "ablation direction: Full BadPix {:.2} vs Baseline {:.2} ({})",
        full.badpix,
        base_cell.badpix,
        if full.badpix < base_cell.badpix { "improved" } else { "no improvement at this scale" }
    );
    Ok(AblationReport {
        cells,
        threshold: metrics::BADPIX_THRESHOLD,
        config_fingerprint: base.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> Config {
        let mut cfg = Config::default();
        cfg.width = 4;
        cfg.orm_embed = 4;
        cfg.iterations = 3;
        cfg.batch_size = 4;
        cfg.pool_size = 60;
        cfg.synth_scenes = 3;
        cfg.synth_spatial = 40;
        cfg.log_every = 1;
        cfg.epir_enabled = false;
        cfg.seed = 9;
        cfg
    }

    #[test]
    fn sample_patches_are_well_formed() {
        let cfg = toy_config();
        let scenes = synthetic_training_scenes(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = sample_patches(&scenes, 128, 29, true, &mut rng).unwrap();
        assert_eq!(pool.len(), 128);
        for s in &pool {
            assert_eq!((s.sample.horizontal.height, s.sample.horizontal.width), (9, 29));
            assert_eq!(s.sample.horizontal.center, s.sample.vertical.center);
            let (x, y) = s.sample.horizontal.center;
            assert_eq!(s.sample.gt, scenes[s.scene].gt.at(y, x));
            assert!(!s.sample.horizontal.replicated);
        }
        // deterministic given the seed
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let pool2 = sample_patches(&scenes, 128, 29, true, &mut rng2).unwrap();
        for (a, b) in pool.iter().zip(&pool2) {
            assert_eq!(a.sample.horizontal.data, b.sample.horizontal.data);
        }
    }

    #[test]
    fn sample_patches_rejects_empty_dataset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_patches(&[], 4, 29, true, &mut rng),
            Err(LfError::Argument(_))
        ));
    }

    #[test]
    fn one_training_step_changes_parameters() {
        let cfg = toy_config();
        let scenes = synthetic_training_scenes(&cfg).unwrap();
        let mut one = cfg.clone();
        one.iterations = 1;
        one.val_fraction = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let fresh = NetworkParams::<f32>::init(one.net_config(), &mut rng).unwrap();
        let outcome = train::<f32>(&one, &scenes, None, None).unwrap();
        let mut changed = 0usize;
        for idx in fresh.trainable_indices() {
            if fresh.tensor(idx).data() != outcome.params.tensor(idx).data() {
                changed += 1;
            }
        }
        assert!(changed > 0, "no parameter changed after one step");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let cfg = toy_config();
        let scenes = synthetic_training_scenes(&cfg).unwrap();
        let a = train::<f32>(&cfg, &scenes, None, None).unwrap();
        let b = train::<f32>(&cfg, &scenes, None, None).unwrap();
        for idx in 0..a.params.len() {
            let (ta, tb) = (a.params.tensor(idx), b.params.tensor(idx));
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {}", a.params.name(idx));
            }
        }
        // wall-clock column aside, the logs agree exactly
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!((ra.iter, ra.loss.to_bits(), ra.lr), (rb.iter, rb.loss.to_bits(), rb.lr));
        }
    }

    #[test]
    fn log_rows_follow_the_format() {
        let cfg = toy_config();
        let scenes = synthetic_training_scenes(&cfg).unwrap();
        let mut seen = Vec::new();
        let mut log_cb = |row: &LogRow| seen.push(row.csv());
        let outcome = train::<f32>(&cfg, &scenes, Some(&mut log_cb), None).unwrap();
        assert_eq!(seen.len(), outcome.log.len());
        for line in &seen {
            let parts: Vec<_> = line.split(',').collect();
            assert_eq!(parts.len(), 4, "bad log line {line}");
            parts[0].parse::<usize>().unwrap();
            parts[1].parse::<f64>().unwrap();
            parts[2].parse::<f64>().unwrap();
            parts[3].parse::<f64>().unwrap();
        }
    }

    #[test]
    fn lr_schedule_halves_by_thirds() {
        let mut cfg = Config::default();
        cfg.iterations = 300;
        cfg.lr = 1e-3;
        cfg.lr_halving = true;
        assert_eq!(lr_at(&cfg, 1), 1e-3);
        assert_eq!(lr_at(&cfg, 100), 1e-3);
        assert_eq!(lr_at(&cfg, 101), 5e-4);
        assert_eq!(lr_at(&cfg, 201), 2.5e-4);
        assert_eq!(lr_at(&cfg, 300), 2.5e-4);
        cfg.lr_halving = false;
        assert_eq!(lr_at(&cfg, 299), 1e-3);
    }

    #[test]
    fn infer_map_geometry_and_mask() {
        let cfg = toy_config();
        let scene = synthetic_eval_scene(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = NetworkParams::<f32>::init(cfg.net_config(), &mut rng).unwrap();
        let map = infer_map(&scene.lightfield, &params, 64).unwrap();
        assert_eq!((map.height, map.width), (40, 40));
        assert!(map.values.iter().all(|v| v.is_finite()));
        // 14-pixel border band is excluded from the interior mask
        for y in 0..40 {
            for x in 0..40 {
                let interior = (14..26).contains(&x) && (14..26).contains(&y);
                assert_eq!(map.masked(y, x), interior, "x={x} y={y}");
            }
        }
    }

    #[test]
    fn infer_map_rejects_angular_mismatch() {
        let mut cfg = toy_config();
        cfg.synth_spatial = 34;
        let scene = synthetic_eval_scene(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // a 5-view network on a 5x13 patch schedule cannot consume 9-view fields
        let mut net_cfg = cfg.net_config();
        net_cfg.patch_h = 5;
        net_cfg.patch_w = 13;
        net_cfg.conv_blocks = vec![crate::net::BlockKernels { k1: (2, 2), k2: (1, 2) }; 4];
        net_cfg.res_blocks = vec![crate::net::BlockKernels { k1: (1, 2), k2: (1, 2) }; 1];
        net_cfg.merge_block1 = crate::net::BlockKernels { k1: (1, 2), k2: (1, 2) };
        let params = NetworkParams::<f32>::init(net_cfg, &mut rng).unwrap();
        assert!(matches!(
            infer_map(&scene.lightfield, &params, 16),
            Err(LfError::Argument(_))
        ));
    }

    #[test]
    fn nan_in_pool_aborts_with_diagnostic() {
        let cfg = toy_config();
        let mut scenes = synthetic_training_scenes(&cfg).unwrap();
        // poison one ground-truth value; the loss turns non-finite
        let w = scenes[0].gt.width;
        for y in 0..scenes[0].gt.height {
            for x in 0..w {
                scenes[0].gt.set(y, x, f32::INFINITY, true);
            }
        }
        match train::<f32>(&cfg, &scenes, None, None) {
            Err(LfError::Training(msg)) => assert!(msg.contains("iteration"), "{msg}"),
            Err(other) => panic!("expected training abort, got {other}"),
            Ok(_) => panic!("expected training abort, training succeeded"),
        }
    }
}
