//! Disparity-map evaluation: bad-pixel ratio, scaled mean squared error,
//! and binary error maps.

use crate::error::{LfError, Result};
use crate::lightfield::{DisparityMap, Image};

/// Default bad-pixel threshold in pixels.
pub const BADPIX_THRESHOLD: f32 = 0.07;

fn check_inputs(pred: &DisparityMap, gt: &DisparityMap, mask: &[bool]) -> Result<usize> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(LfError::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if mask.len() != pred.values.len() {
        return Err(LfError::Shape(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            pred.values.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(LfError::Argument("evaluation mask is empty".into()));
    }
    Ok(n)
}

/// Percentage of masked pixels whose absolute disparity error is strictly
/// greater than `threshold`.
pub fn badpix(pred: &DisparityMap, gt: &DisparityMap, mask: &[bool], threshold: f32) -> Result<f64> {
    let n = check_inputs(pred, gt, mask)?;
    let bad = pred
        .values
        .iter()
        .zip(&gt.values)
        .zip(mask)
        .filter(|((p, g), &m)| m && (**p - **g).abs() > threshold)
        .count();
    Ok(100.0 * bad as f64 / n as f64)
}

/// Mean squared disparity error over the mask, scaled by 100.
pub fn mse100(pred: &DisparityMap, gt: &DisparityMap, mask: &[bool]) -> Result<f64> {
    let n = check_inputs(pred, gt, mask)?;
    let sum: f64 = pred
        .values
        .iter()
        .zip(&gt.values)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, g), _)| {
            let d = (*p - *g) as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64 * 100.0)
}

/// One-channel image: 1.0 where the masked error exceeds the threshold.
pub fn error_map(pred: &DisparityMap, gt: &DisparityMap, mask: &[bool], threshold: f32) -> Result<Image> {
    check_inputs(pred, gt, mask)?;
    let mut img = Image::new(pred.height, pred.width, 1);
    for (i, ((p, g), &m)) in pred.values.iter().zip(&gt.values).zip(mask).enumerate() {
        if m && (p - g).abs() > threshold {
            img.data[i] = 1.0;
        }
    }
    Ok(img)
}

/// Evaluation results of one scene.
#[derive(Debug, Clone)]
pub struct SceneEval {
    pub name: String,
    pub badpix: f64,
    pub mse100: f64,
    pub masked_pixels: usize,
    pub runtime_s: f64,
}

/// A benchmark-style report: one row per scene plus the run fingerprint and
/// which evaluation region convention produced the mask.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
    pub threshold: f32,
    /// "interior" for synthetic scenes, "dataset-mask" when the benchmark
    /// provides one. The two conventions are not interchangeable.
    pub region: String,
    pub config_fingerprint: u64,
}

impl EvalReport {
    pub fn new(threshold: f32, region: impl Into<String>, config_fingerprint: u64) -> Self {
        EvalReport { scenes: Vec::new(), threshold, region: region.into(), config_fingerprint }
    }

    pub fn push(&mut self, eval: SceneEval) {
        self.scenes.push(eval);
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "threshold: {}", self.threshold)?;
        writeln!(f, "region: {}", self.region)?;
        writeln!(f, "config_fingerprint: {:016x}", self.config_fingerprint)?;
        writeln!(f, "scene|badpix|mse100|masked|seconds")?;
        for s in &self.scenes {
            writeln!(
                f,
                "{}|{:.2}|{:.4}|{}|{:.2}",
                s.name, s.badpix, s.mse100, s.masked_pixels, s.runtime_s
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(values: Vec<f32>, w: usize) -> DisparityMap {
        let h = values.len() / w;
        DisparityMap { height: h, width: w, mask: vec![true; values.len()], values }
    }

    #[test]
    fn identical_maps_score_zero() {
        let a = map_from(vec![0.5; 12], 4);
        let mask = vec![true; 12];
        assert_eq!(badpix(&a, &a, &mask, 0.07).unwrap(), 0.0);
        assert_eq!(mse100(&a, &a, &mask).unwrap(), 0.0);
    }

    #[test]
    fn error_exactly_at_threshold_is_not_bad() {
        let gt = map_from(vec![1.0; 10], 5);
        let pred = map_from(vec![1.07; 10], 5);
        let mask = vec![true; 10];
        // strict inequality: |1.07 - 1.0| == 0.07 exactly in f32
        assert!(((1.07f32 - 1.0) - 0.07).abs() < 1e-7);
        assert_eq!(badpix(&pred, &gt, &mask, 1.07 - 1.0).unwrap(), 0.0);
    }

    #[test]
    fn one_bad_pixel_in_hundred_is_one_percent() {
        let gt = map_from(vec![0.0; 100], 10);
        let mut pred = map_from(vec![0.0; 100], 10);
        pred.values[37] = 0.1;
        let mask = vec![true; 100];
        assert_eq!(badpix(&pred, &gt, &mask, 0.07).unwrap(), 1.0);
    }

    #[test]
    fn mse_examples() {
        let gt = map_from(vec![0.0; 16], 4);
        let pred = map_from(vec![0.1; 16], 4);
        let mask = vec![true; 16];
        let v = mse100(&pred, &gt, &mask).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
        let pred_neg = map_from(vec![-0.1; 16], 4);
        let v2 = mse100(&pred_neg, &gt, &mask).unwrap();
        assert!((v - v2).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_translation_invariant() {
        let gt = map_from((0..20).map(|i| i as f32 / 10.0).collect(), 5);
        let pred = map_from((0..20).map(|i| i as f32 / 10.0 + if i % 7 == 0 { 0.2 } else { 0.01 }).collect(), 5);
        let mask = vec![true; 20];
        let b0 = badpix(&pred, &gt, &mask, 0.07).unwrap();
        let shift = |m: &DisparityMap, c: f32| {
            let mut out = m.clone();
            for v in out.values.iter_mut() {
                *v += c;
            }
            out
        };
        let b1 = badpix(&shift(&pred, 4.0), &shift(&gt, 4.0), &mask, 0.07).unwrap();
        assert_eq!(b0, b1);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = map_from(vec![0.0; 4], 2);
        let mask = vec![false; 4];
        assert!(matches!(badpix(&a, &a, &mask, 0.07), Err(LfError::Argument(_))));
        assert!(matches!(mse100(&a, &a, &mask), Err(LfError::Argument(_))));
    }

    #[test]
    fn error_map_agrees_with_badpix_exactly() {
        let gt = map_from((0..64).map(|i| (i % 9) as f32 * 0.1).collect(), 8);
        let pred = map_from(
            (0..64).map(|i| (i % 9) as f32 * 0.1 + ((i * 13) % 5) as f32 * 0.03).collect(),
            8,
        );
        let mut mask = vec![true; 64];
        for i in 0..10 {
            mask[i * 6] = false;
        }
        let b = badpix(&pred, &gt, &mask, 0.07).unwrap();
        let m = error_map(&pred, &gt, &mask, 0.07).unwrap();
        let on = m.data.iter().filter(|&&v| v == 1.0).count();
        let masked = mask.iter().filter(|&&x| x).count();
        assert_eq!(b, 100.0 * on as f64 / masked as f64);
    }
}
