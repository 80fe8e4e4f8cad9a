//! Refocusing: per-view disparity shifts, EPI and light-field shearing, and
//! the refocusing-based sample augmentation.
//!
//! Refocusing by a shift `s` resamples view `u` at `x + (u0 - u) * s` (and
//! view `v` at `y + (v0 - v) * s`), so an EPI line of slope `d` becomes a
//! line of slope `d - s` while the center view stays untouched. Augmentation
//! exploits this to manufacture new training slopes from the same pixels.

use crate::error::{LfError, Result};
use crate::lightfield::{Epi, EpiPatch, LightField4D};

/// Resampling kernel used when a shift lands between pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Linear,
}

/// Shift for one refocusing pass, in pixels per view step.
///
/// The shift is the quantity `f * du / Z`; the optical triple is accepted as
/// a convenience but everything downstream works in disparity units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefocusParams {
    shift: f32,
}

impl RefocusParams {
    pub fn from_shift(shift: f32) -> Result<Self> {
        if !shift.is_finite() {
            return Err(LfError::Argument(format!("shift must be finite, got {shift}")));
        }
        Ok(RefocusParams { shift })
    }

    /// Derive the shift from focal distance, view baseline and depth.
    pub fn from_optics(focal: f32, baseline: f32, depth: f32) -> Result<Self> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(LfError::Argument(format!("depth must be positive, got {depth}")));
        }
        RefocusParams::from_shift(focal * baseline / depth)
    }

    pub fn shift(&self) -> f32 {
        self.shift
    }
}

/// Horizontal displacement of view `u` relative to the reference view `u0`
/// for a disparity shift `s`: exactly `(u0 - u) * s`.
#[inline]
pub fn view_shift(u: usize, u0: usize, s: f32) -> f32 {
    (u0 as f32 - u as f32) * s
}

/// Resample one row at positions `x + offset` with edge replication.
#[inline]
fn resample_row(src: &[f32], spatial: usize, channels: usize, offset: f32, interp: Interp, dst: &mut [f32]) {
    debug_assert_eq!(src.len(), spatial * channels);
    debug_assert_eq!(dst.len(), spatial * channels);
    match interp {
        Interp::Nearest => {
            for x in 0..spatial {
                let pos = x as f32 + offset;
                let i = (pos.round() as isize).clamp(0, spatial as isize - 1) as usize;
                dst[x * channels..(x + 1) * channels]
                    .copy_from_slice(&src[i * channels..(i + 1) * channels]);
            }
        }
        Interp::Linear => {
            for x in 0..spatial {
                let pos = x as f32 + offset;
                let x0 = pos.floor();
                let w = pos - x0;
                let i0 = (x0 as isize).clamp(0, spatial as isize - 1) as usize;
                let i1 = (x0 as isize + 1).clamp(0, spatial as isize - 1) as usize;
                for c in 0..channels {
                    dst[x * channels + c] =
                        (1.0 - w) * src[i0 * channels + c] + w * src[i1 * channels + c];
                }
            }
        }
    }
}

/// Shear an `(A, S, C)` block: row `a` is resampled at `x + (a0 - a) * s`.
fn refocus_block(data: &[f32], angular: usize, spatial: usize, channels: usize, s: f32, interp: Interp) -> Vec<f32> {
    let a0 = (angular - 1) / 2;
    let row = spatial * channels;
    let mut out = vec![0.0f32; data.len()];
    for a in 0..angular {
        let offset = view_shift(a, a0, s);
        resample_row(
            &data[a * row..(a + 1) * row],
            spatial,
            channels,
            offset,
            interp,
            &mut out[a * row..(a + 1) * row],
        );
    }
    out
}

/// Refocus an EPI by `s` pixels per view step.
///
/// Out-of-range samples replicate the edge column; the center row comes back
/// bitwise unchanged.
pub fn refocus_epi(epi: &Epi, s: f32, interp: Interp) -> Result<Epi> {
    if !s.is_finite() {
        return Err(LfError::Argument(format!("shift must be finite, got {s}")));
    }
    let mut out = epi.clone();
    out.data = refocus_block(&epi.data, epi.angular, epi.spatial, epi.channels, s, interp);
    Ok(out)
}

/// Refocus a patch by `s`, adjusting its ground-truth disparity to `gt - s`
/// so the label keeps matching the pixel content.
pub fn refocus_patch(patch: &EpiPatch, s: f32, interp: Interp) -> Result<EpiPatch> {
    if !s.is_finite() {
        return Err(LfError::Argument(format!("shift must be finite, got {s}")));
    }
    let mut out = patch.clone();
    out.data = refocus_block(&patch.data, patch.height, patch.width, patch.channels, s, interp);
    out.gt_disparity = patch.gt_disparity.map(|g| adjust_gt(g, s));
    Ok(out)
}

/// Refocus the whole light field: view `(u, v)` is resampled at
/// `(x + (u0-u)*s, y + (v0-v)*s)`.
///
/// The x pass reuses the same row resampler as [`refocus_epi`], so slicing a
/// horizontal EPI out of the result equals refocusing the original EPI
/// bitwise.
pub fn refocus_lightfield(lf: &LightField4D, s: f32, interp: Interp) -> Result<LightField4D> {
    if !s.is_finite() {
        return Err(LfError::Argument(format!("shift must be finite, got {s}")));
    }
    if !lf.has_center_view() {
        return Err(LfError::Argument(format!(
            "refocusing needs odd angular extents, got {}x{}",
            lf.views_u(),
            lf.views_v()
        )));
    }
    let (u_n, v_n) = (lf.views_u(), lf.views_v());
    let (x_n, y_n, c_n) = (lf.width(), lf.height(), lf.channels());
    let row = x_n * c_n;
    let mut out = LightField4D::new(u_n, v_n, x_n, y_n, c_n)?;

    let mut src_row = vec![0.0f32; row];
    let mut r0 = vec![0.0f32; row];
    let mut r1 = vec![0.0f32; row];
    for v in 0..v_n {
        let dy = view_shift(v, lf.v0(), s);
        for u in 0..u_n {
            let dx = view_shift(u, lf.u0(), s);
            for y in 0..y_n {
                let pos = y as f32 + dy;
                let fill = |lfq: &LightField4D, yy: usize, buf: &mut Vec<f32>| {
                    for x in 0..x_n {
                        for c in 0..c_n {
                            buf[x * c_n + c] = lfq.at(u, v, x, yy, c);
                        }
                    }
                };
                let write_out = |out: &mut LightField4D, buf: &[f32], y: usize| {
                    for x in 0..x_n {
                        for c in 0..c_n {
                            out.set(u, v, x, y, c, buf[x * c_n + c]);
                        }
                    }
                };
                match interp {
                    Interp::Nearest => {
                        let yy = (pos.round() as isize).clamp(0, y_n as isize - 1) as usize;
                        fill(lf, yy, &mut src_row);
                        resample_row(&src_row, x_n, c_n, dx, interp, &mut r0);
                        write_out(&mut out, &r0, y);
                    }
                    Interp::Linear => {
                        let y0 = pos.floor();
                        let w = pos - y0;
                        let i0 = (y0 as isize).clamp(0, y_n as isize - 1) as usize;
                        fill(lf, i0, &mut src_row);
                        resample_row(&src_row, x_n, c_n, dx, interp, &mut r0);
                        if w != 0.0 {
                            let i1 = (y0 as isize + 1).clamp(0, y_n as isize - 1) as usize;
                            fill(lf, i1, &mut src_row);
                            resample_row(&src_row, x_n, c_n, dx, interp, &mut r1);
                            for (o, &b) in r0.iter_mut().zip(r1.iter()) {
                                *o = (1.0 - w) * *o + w * b;
                            }
                        }
                        write_out(&mut out, &r0, y);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Ground truth after refocusing by `s`: the slope that remains in the data.
#[inline]
pub fn adjust_gt(gt: f32, s: f32) -> f32 {
    gt - s
}

/// One training sample: a horizontal/vertical patch pair over the same scene
/// pixel, its (possibly shift-adjusted) ground truth, and the shift that
/// produced it (0 for originals).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub horizontal: EpiPatch,
    pub vertical: EpiPatch,
    pub gt: f32,
    pub shift: f32,
}

impl AugmentedSample {
    pub fn new(horizontal: EpiPatch, vertical: EpiPatch, gt: f32) -> Result<Self> {
        if horizontal.center != vertical.center {
            return Err(LfError::Argument(format!(
                "patch pair centers differ: {:?} vs {:?}",
                horizontal.center, vertical.center
            )));
        }
        Ok(AugmentedSample { horizontal, vertical, gt, shift: 0.0 })
    }
}

/// Largest EPI-line slope a `w`-wide, `a`-tall patch can represent.
pub fn representable_slope(a: usize, w: usize) -> f32 {
    (w as f32 - 1.0) / (2.0 * (a as f32 - 1.0))
}

/// Multiply samples by refocusing each one with every shift in `shifts`.
///
/// The originals are always kept, so the output holds
/// `|samples| * (|shifts| + 1)` entries, minus any copies whose adjusted
/// ground truth exceeds `slope_limit` (evidence would have left the patch).
/// Shifts must be distinct and must not contain 0.
pub fn augment(
    samples: &[AugmentedSample],
    shifts: &[f32],
    interp: Interp,
    slope_limit: Option<f32>,
) -> Result<Vec<AugmentedSample>> {
    for (i, &s) in shifts.iter().enumerate() {
        if s == 0.0 {
            return Err(LfError::Argument("shift set must not contain 0 (originals are always kept)".into()));
        }
        if !s.is_finite() {
            return Err(LfError::Argument(format!("shift must be finite, got {s}")));
        }
        if shifts[..i].contains(&s) {
            return Err(LfError::Argument(format!("duplicate shift value {s}")));
        }
    }
    let mut out = Vec::with_capacity(samples.len() * (shifts.len() + 1));
    for sample in samples {
        out.push(sample.clone());
        for &s in shifts {
            let gt = adjust_gt(sample.gt, s);
            if let Some(limit) = slope_limit {
                if gt.abs() > limit {
                    continue;
               }
            }
            let mut copy = AugmentedSample {
                horizontal: refocus_patch(&sample.horizontal, s, interp)?,
                vertical: refocus_patch(&sample.vertical, s, interp)?,
                gt,
                shift: s,
            };
            copy.horizontal.gt_disparity = Some(gt);
            copy.vertical.gt_disparity = Some(gt);
            out.push(copy);
        }
    }
    Ok(out)
}

/// The shift set behind the x8 augmentation default: seven refocusing passes
/// spanning both sides of the original depth plane, plus the original.
pub fn default_shift_set() -> Vec<f32> {
    vec![-1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lightfield::{BorderPolicy, EpiOrientation};

    fn ramp_epi(angular: usize, spatial: usize, channels: usize) -> Epi {
        let mut epi = Epi::new(EpiOrientation::Horizontal, angular, spatial, channels, 4, 0);
        for a in 0..angular {
            for s in 0..spatial {
                for c in 0..channels {
                    let code = (a * spatial + s) * channels + c;
                    epi.set(a, s, c, (code % 97) as f32 / 96.0);
                }
            }
        }
        epi
    }

    #[test]
    fn view_shift_examples() {
        assert_eq!(view_shift(4, 4, 0.7), 0.0);
        assert_eq!(view_shift(2, 4, 0.5), 1.0);
        assert_eq!(view_shift(8, 4, -1.0), 4.0);
    }

    #[test]
    fn refocus_zero_is_bitwise_identity() {
        let epi = ramp_epi(9, 33, 3);
        for interp in [Interp::Nearest, Interp::Linear] {
            let out = refocus_epi(&epi, 0.0, interp).unwrap();
            assert_eq!(out.data, epi.data);
        }
    }

    #[test]
    fn center_row_unchanged_for_any_shift() {
        let epi = ramp_epi(9, 33, 3);
        for s in [-2.0f32, -0.7, 0.3, 1.9] {
            let out = refocus_epi(&epi, s, Interp::Linear).unwrap();
            let a0 = epi.center_row();
            for x in 0..33 {
                for c in 0..3 {
                    assert_eq!(out.at(a0, x, c), epi.at(a0, x, c));
                }
            }
        }
    }

    #[test]
    fn integer_shifts_compose_exactly_with_nearest() {
        let epi = ramp_epi(9, 41, 1);
        let once = refocus_epi(&refocus_epi(&epi, 1.0, Interp::Nearest).unwrap(), 2.0, Interp::Nearest).unwrap();
        let direct = refocus_epi(&epi, 3.0, Interp::Nearest).unwrap();
        // away from borders the two routes agree exactly
        let a0 = 4i32;
        for a in 0..9i32 {
            let margin = (3 * (a0 - a).abs()) as usize;
            for x in 12.max(margin)..(41 - 12).min(41 - margin) {
                assert_eq!(once.at(a as usize, x, 0), direct.at(a as usize, x, 0));
            }
        }
    }

    #[test]
    fn adjust_gt_examples() {
        assert_eq!(adjust_gt(1.2, 0.0), 1.2);
        assert_eq!(adjust_gt(1.2, 1.2), 0.0);
        assert_eq!(adjust_gt(0.4, -0.6), 1.0);
    }

    #[test]
    fn adjust_gt_round_trip_is_exact_on_dyadic_values() {
        for i in -64i32..=64 {
            for j in -64i32..=64 {
                let g = i as f32 / 32.0;
                let s = j as f32 / 32.0;
                assert_eq!(adjust_gt(adjust_gt(g, s), -s), g);
            }
        }
    }

    #[test]
    fn refocus_params_conversion() {
        let p = RefocusParams::from_optics(2.0, 1.5, 3.0).unwrap();
        assert_eq!(p.shift(), 1.0);
        assert!(RefocusParams::from_optics(2.0, 1.5, 0.0).is_err());
        assert!(RefocusParams::from_shift(f32::NAN).is_err());
    }

    fn patch_pair(gt: f32) -> AugmentedSample {
        let epi = ramp_epi(9, 41, 3);
        let mut h = epi.extract_patch(20, 29, BorderPolicy::Reject).unwrap();
        let mut v = h.clone();
        v.orientation = EpiOrientation::Vertical;
        h.gt_disparity = Some(gt);
        v.gt_disparity = Some(gt);
        AugmentedSample::new(h, v, gt).unwrap()
    }

    #[test]
    fn augment_empty_shift_set_returns_originals() {
        let seeds = vec![patch_pair(0.5), patch_pair(-0.25)];
        let out = augment(&seeds, &[], Interp::Linear, None).unwrap();
        assert_eq!(out, seeds);
    }

    #[test]
    fn augment_multiplies_by_shifts_plus_one() {
        let seeds: Vec<_> = (0..100).map(|i| patch_pair(i as f32 / 100.0 - 0.5)).collect();
        let shifts = [-0.75f32, -0.5, -0.25, 0.25, 0.5, 0.75, 1.0];
        let out = augment(&seeds, &shifts, Interp::Linear, None).unwrap();
        assert_eq!(out.len(), 800);
        // adjusted gt and shift bookkeeping
        for (i, sample) in out.iter().enumerate() {
            let seed = &seeds[i / 8];
            if i % 8 == 0 {
                assert_eq!(sample.gt, seed.gt);
                assert_eq!(sample.shift, 0.0);
            } else {
                let s = shifts[i % 8 - 1];
                assert_eq!(sample.shift, s);
                assert_eq!(sample.gt, adjust_gt(seed.gt, s));
            }
        }
    }

    #[test]
    fn augment_rejects_zero_and_duplicate_shifts() {
        let seeds = vec![patch_pair(0.0)];
        assert!(matches!(
            augment(&seeds, &[0.5, 0.0], Interp::Linear, None),
            Err(LfError::Argument(_))
        ));
        assert!(matches!(
            augment(&seeds, &[0.5, 0.5], Interp::Linear, None),
            Err(LfError::Argument(_))
        ));
    }

    #[test]
    fn augment_drops_unrepresentable_slopes() {
        let seeds = vec![patch_pair(0.0)];
        let limit = representable_slope(9, 29) * 0.9;
        let out = augment(&seeds, &[-3.0, 0.5], Interp::Linear, Some(limit)).unwrap();
        // the -3.0 copy has adjusted gt 3.0 > 1.575 and is dropped
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].shift, 0.5);
    }
}
