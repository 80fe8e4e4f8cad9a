//! Finite-difference verification of tape gradients.
//!
//! Central differences `(f(x+h) - f(x-h)) / 2h` on a random coordinate
//! subset, compared against the analytic gradients, in double precision.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Shape, Tensor};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max rel err {:.3e} (tol {:.0e}, {} coords)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.coords_checked
        )
    }
}

/// Compare tape gradients of `build` against central differences.
///
/// `build` must construct a scalar loss from the given leaf variables (one
/// per entry of `inputs`, all trainable). At least `min_coords` coordinates
/// are sampled across all inputs (or every coordinate if there are fewer).
pub fn finite_diff_check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    h: f64,
    min_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;

    // flat coordinate universe: (input index, offset)
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            coords.push((i, j));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    let take = coords.len().min(min_coords.max(64));
    let mut max_rel = 0.0f64;
    for &(i, j) in coords.iter().take(take) {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += h;
        let (tp, _, lp) = eval(&plus)?;
        let fp = tp.value(lp).item();
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= h;
        let (tm, _, lm) = eval(&minus)?;
        let fm = tm.value(lm).item();
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads.get(vars[i]).map(|g| g.data()[j]).unwrap_or(0.0);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / denom;
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn randn(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Nudge values away from the ReLU/absolute-value kinks so central
/// differences stay two-sided.
fn desaturate(mut t: Tensor<f64>, floor: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < floor {
            *v = floor * if *v < 0.0 { -1.0 } else { 1.0 };
        }
    }
    t
}

/// Per-op finite-difference suite. One entry per differentiable op plus a
/// randomly composed chain that exercises op composition on the same tape.
pub fn run_op_suite(seeds: &[u64], tolerance: f64) -> Result<Vec<CheckResult>> {
    let h = 1e-5;
    let mut results = Vec::new();
    let mut record = |name: &str, worst: f64, coords: usize| {
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: worst,
            tolerance,
            coords_checked: coords,
        });
    };

    let mut worst_conv = 0.0f64;
    for &seed in seeds {
        let x = randn(Shape::d4(2, 5, 7, 3), seed ^ 0x11);
        let k = randn(Shape::d4(2, 2, 3, 4), seed ^ 0x22);
        let b = randn(Shape::d1(4), seed ^ 0x33);
        let t = randn(Shape::d4(2, 4, 6, 4), seed ^ 0x44);
        let rel = finite_diff_check(
            |tape, vars| {
                let y = tape.conv2d_valid(vars[0], vars[1], Some(vars[2]))?;
                let tv = tape.constant(t.clone());
                tape.mae_loss(y, tv)
            },
            &[x, k, b],
            h,
            64,
            seed,
        )?;
        worst_conv = worst_conv.max(rel);
    }
    record("conv2d_valid", worst_conv, 64 * seeds.len());

    let mut worst = 0.0f64;
    for &seed in seeds {
        let x = desaturate(randn(Shape::d4(2, 4, 4, 3), seed ^ 0x55), 0.05);
        let t = randn(Shape::d4(2, 4, 4, 3), seed ^ 0x66);
        let rel = finite_diff_check(
            |tape, vars| {
                let y = tape.relu(vars[0])?;
                let tv = tape.constant(t.clone());
                tape.mae_loss(y, tv)
            },
            &[x],
            h,
            64,
            seed,
        )?;
        worst = worst.max(rel);
    }
    record("relu", worst, 64 * seeds.len());

    let mut worst = 0.0f64;
    for &seed in seeds {
        let x = randn(Shape::d4(4, 3, 3, 2), seed ^ 0x77);
        let gamma = desaturate(randn(Shape::d1(2), seed ^ 0x88), 0.2);
        let beta = randn(Shape::d1(2), seed ^ 0x99);
        let t = randn(Shape::d4(4, 3, 3, 2), seed ^ 0xaa);
        let rel = finite_diff_check(
            |tape, vars| {
                let (y, _, _) = tape.batchnorm_train(vars[0], vars[1], vars[2], 1e-5)?;
                let tv = tape.constant(t.clone());
                tape.mae_loss(y, tv)
            },
            &[x, gamma, beta],
            h,
            96,
            seed,
        )?;
        worst = worst.max(rel);
    }
    record("batchnorm_train", worst, 96 * seeds.len());

    let mut worst = 0.0f64;
    for &seed in seeds {
        let x = randn(Shape::d4(2, 3, 3, 2), seed ^ 0xab);
        let gamma = desaturate(randn(Shape::d1(2), seed ^ 0xbc), 0.2);
        let beta = randn(Shape::d1(2), seed ^ 0xcd);
        let rm = randn(Shape::d1(2), seed ^ 0xde);
        let mut rv = randn(Shape::d1(2), seed ^ 0xef);
        for v in rv.data_mut() {
            *v = v.abs() + 0.5;
        }
        let t = randn(Shape::d4(2, 3, 3, 2), seed ^ 0xf0);
        let rel = finite_diff_check(
            |tape, vars| {
                let y = tape.batchnorm_eval(vars[0], vars[1], vars[2], &rm, &rv, 1e-5)?;
                let tv = tape.constant(t.clone());
                tape.mae_loss(y, tv)
            },
            &[x, gamma, beta],
            h,
            64,
            seed,
        )?;
        worst = worst.max(rel);
    }
    record("batchnorm_eval", worst, 64 * seeds.len());

    let mut worst = 0.0f64;
    for &seed in seeds {
        let a = randn(Shape::d2(5, 4), seed ^ 0x101);
        let b = randn(Shape::d2(4, 6), seed ^ 0x102);
        let t = randn(Shape::d2(5, 6), seed ^ 0x103);
        let rel = finite_diff_check(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                let tv = tape.constant(t.clone());
                tape.mae_loss(y, tv)
            },
            &[a, b],
            h,
            64,
            seed,
        )?;
        worst = worst.max(rel);
    }
    record("matmul", worst, 64 * seeds.len());

    let mut worst = 0.0f64;
    for &seed in seeds {
        let a = randn(Shape::d3(2, 6, 3), seed ^ 0x201);
        let b = randn(Shape::d3(2, 5, 3), seed ^ 0x202);
        let t = randn(Shape::d3(2, 6, 5), seed ^ 0x203);
        let rel = finite_diff_check(
            |tape, vars| {
                let y = tape.bmm_nt(vars[0], vars[1])?;
                let tv = tape.constant(t.clone());
                tape.mae_loss(y, tv)
            },
            &[a, b],
            h,
            64,
            seed,
        )?;
        worst = worst.max(rel);
    }
    record("bmm_nt", worst, 64 * seeds.len());

    let mut worst = 0.0f64;
    for &seed in seeds {
        let x = randn(Shape::d3(2, 15, 15), seed ^ 0x301);
        let t = randn(Shape::d4(2, 3, 5, 5), seed ^ 0x302);
        let rel = finite_diff_check(
            |tape, vars| {
                let y = tape.center_relations(vars[0], 3, 5)?;
                let tv = tape.constant(t.clone());
                tape.mae_loss(y, tv)
            },
            &[x],
            h,
            64,
            seed,
        )?;
        worst = worst.max(rel);
    }
    record("center_relations", worst, 64 * seeds.len());

    let mut worst = 0.0f64;
    for &seed in seeds {
        let x = randn(Shape::d4(2, 5, 9, 3), seed ^ 0x401);
        let t = randn(Shape::d4(2, 3, 5, 3), seed ^ 0x402);
        let rel = finite_diff_check(
            |tape, vars| {
                let y = tape.center_slice(vars[0], 3, 5)?;
                let tv = tape.constant(t.clone());
                tape.mae_loss(y, tv)
            },
            &[x],
            h,
            64,
            seed,
        )?;
        worst = worst.max(rel);
    }
    record("center_slice", worst, 64 * seeds.len());

    let mut worst = 0.0f64;
    for &seed in seeds {
        let a = randn(Shape::d4(1, 4, 4, 2), seed ^ 0x501);
        let b = randn(Shape::d4(1, 4, 4, 3), seed ^ 0x502);
        let t = randn(Shape::d4(1, 4, 4, 5), seed ^ 0x503);
        let rel = finite_diff_check(
            |tape, vars| {
                let y = tape.concat_channels(vars[0], vars[1])?;
                let tv = tape.constant(t.clone());
                tape.mae_loss(y, tv)
            },
            &[a, b],
            h,
            64,
            seed,
        )?;
        worst = worst.max(rel);
    }
    record("concat_channels", worst, 64 * seeds.len());

    let mut worst = 0.0f64;
    for &seed in seeds {
        // keep pred and target apart so no coordinate crosses a tie
        let mut p = randn(Shape::d1(24), seed ^ 0x601);
        let t = randn(Shape::d1(24), seed ^ 0x602);
        for (pv, &tv) in p.data_mut().iter_mut().zip(t.data()) {
            if (*pv - tv).abs() < 0.05 {
                *pv = tv + 0.1;
            }
        }
        let rel = finite_diff_check(
            |tape, vars| {
                let tv = tape.constant(t.clone());
                tape.mae_loss(vars[0], tv)
            },
            &[p],
            h,
            24,
            seed,
        )?;
        worst = worst.max(rel);
    }
    record("mae_loss", worst, 24 * seeds.len());

    // composed chain: conv -> relu -> center_slice -> reshape -> matmul ->
    // add -> mae; catches tape bugs that per-op tests miss
    let mut worst = 0.0f64;
    for &seed in seeds {
        let x = randn(Shape::d4(2, 5, 6, 2), seed ^ 0x701);
        let k = randn(Shape::d4(2, 2, 2, 3), seed ^ 0x702);
        let w = randn(Shape::d2(3, 4), seed ^ 0x703);
        let c = randn(Shape::d2(12, 4), seed ^ 0x704);
        let t = randn(Shape::d2(12, 4), seed ^ 0x705);
        let rel = finite_diff_check(
            |tape, vars| {
                let y = tape.conv2d_valid(vars[0], vars[1], None)?;
                let y = tape.relu(y)?;
                let y = tape.center_slice(y, 2, 3)?;
                let y = tape.reshape(y, Shape::d2(12, 3))?;
                let y = tape.matmul(y, vars[2])?;
                let y = tape.add(y, vars[3])?;
                let tv = tape.constant(t.clone());
                tape.mae_loss(y, tv)
            },
            &[x, k, w, c],
            h,
            96,
            seed,
        )?;
        worst = worst.max(rel);
    }
    record("composed_chain", worst, 96 * seeds.len());

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_on_three_seeds() {
        let results = run_op_suite(&[1, 2, 3], 1e-4).unwrap();
        for r in &results {
            assert!(r.passed(), "{r}");
        }
        assert!(results.iter().any(|r| r.name == "composed_chain"));
    }

    #[test]
    fn exact_gradient_reports_near_zero_error() {
        let x = randn(Shape::d1(8), 3);
        let t = randn(Shape::d1(8), 4);
        let rel = finite_diff_check(
            |tape, vars| {
                let tv = tape.constant(t.clone());
                tape.mae_loss(vars[0], tv)
            },
            &[x],
            1e-5,
            8,
            0,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel {rel}");
    }
}
