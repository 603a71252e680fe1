//! Central finite-difference verification of tape gradients, and a suite
//! that applies it to every differentiable operator and to the full
//! training loss of a small network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    build_model, forward_patch, global_forward, global_heads, global_loss, patch_loss, total_loss, BoundParams,
    GgpfnConfig, GlobalTargets, PatchTargets, PatchWindow,
};
use crate::ops;
use crate::tensor::Tensor;
use crate::volume::Grid2;

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Finite-difference step used by the suite.
pub const GRAD_STEP: f64 = 1e-6;

/// Compares the tape gradient of scalar `f` at `inputs` against central
/// differences with step `h`.
///
/// Returns the maximum over all input elements of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    finite_diff_check_sampled(f, inputs, h, usize::MAX)
}

/// As [`finite_diff_check_many`], but probes at most `per_input` evenly
/// spaced elements of each input (always including the first and last).
pub fn finite_diff_check_sampled<F>(f: F, inputs: &[Tensor<f64>], h: f64, per_input: usize) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(Error::Usage(format!("checked function returned shape {:?}", out.shape())));
    }
    let grads = out.backward()?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(grads);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, grad) in analytic.iter().enumerate() {
        let n = inputs[ti].numel();
        for i in probe_indices(n, per_input) {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn probe_indices(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    if k <= 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> = (0..k).map(|j| j * (n - 1) / (k - 1)).collect();
    idx.dedup();
    idx
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOLERANCE
    }
}

/// Identity whose backward pass scales the gradient by 1.5. Used to prove
/// that the suite catches a wrong derivative.
fn faulty_identity<'t>(x: Var<'t, f64>) -> Var<'t, f64> {
    let value = (*x.value()).clone();
    x.tape().record(value, &[x], |g| vec![Some(g.map(|v| 1.5 * v))])
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so that every
/// output element receives a distinct upstream gradient.
fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0));
    Ok(ops::sum(ops::mul(out, out.tape().constant(r))?))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of the
/// finite-difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced far apart relative to the step, so pooling never
/// switches its argmax under perturbation.
fn well_separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

type CaseFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut cases = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $f:expr) => {
            cases.push(Case { name: $name, inputs: vec![$($input),*], f: Box::new($f) })
        };
    }
    case!("relu", [away_from_zero(&[2, 3, 4], &mut rng)], |_, v| project(ops::relu(v[0]), 1));
    case!("sigmoid", [random(&[2, 3, 4], &mut rng)], |_, v| project(ops::sigmoid(v[0]), 2));
    case!("add", [random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], |_, v| project(ops::add(v[0], v[1])?, 3));
    case!("mul", [random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], |_, v| project(ops::mul(v[0], v[1])?, 4));
    case!("sum", [random(&[5], &mut rng)], |_, v| Ok(ops::sum(v[0])));
    case!("weighted_sum", [random(&[1], &mut rng), random(&[1], &mut rng)], |_, v| {
        ops::weighted_sum(&[(v[0], 0.7), (v[1], -1.3)])
    });
    case!("concat_channels", [random(&[2, 3, 3], &mut rng), random(&[1, 3, 3], &mut rng)], |_, v| {
        project(ops::concat_channels(v[0], v[1])?, 5)
    });
    case!("center_crop", [random(&[2, 3, 7, 6], &mut rng)], |_, v| project(ops::center_crop(v[0], &[1, 4, 3])?, 6));
    case!("center_depth_slice", [random(&[2, 5, 3, 3], &mut rng)], |_, v| {
        project(ops::center_depth_slice(v[0])?, 7)
    });
    case!("reshape", [random(&[2, 6], &mut rng)], |_, v| project(ops::reshape(v[0], &[3, 4])?, 8));
    case!("max_pool_2d", [well_separated(&[2, 4, 6], &mut rng)], |_, v| project(ops::max_pool(v[0], &[2, 2])?, 9));
    case!("max_pool_3d", [well_separated(&[2, 3, 4, 4], &mut rng)], |_, v| {
        project(ops::max_pool(v[0], &[1, 2, 2])?, 10)
    });
    case!("bilinear_sample", [random(&[2, 4, 5], &mut rng)], |_, v| {
        let coords = [(0.0, 0.0), (0.31, 0.77), (0.5, 0.5), (0.93, 0.12), (1.0, 1.0)];
        project(ops::bilinear_sample(v[0], &coords)?, 11)
    });
    let target = Tensor::from_fn(vec![2, 3, 3], |i| (i % 3 == 0) as u8 as f64);
    case!("bce_loss", [Tensor::from_fn(vec![2, 3, 3], |i| 0.05 + 0.9 * ((i * 7) % 18) as f64 / 17.0)], move |t, v| {
        let p = ops::mul(v[0], t.constant(Tensor::full(vec![2, 3, 3], 1.0)))?;
        ops::bce_loss(p, &target)
    });
    case!(
        "conv3d_dvalid",
        [random(&[2, 5, 4, 5], &mut rng), random(&[3, 2, 3, 3, 3], &mut rng), random(&[3], &mut rng)],
        |_, v| project(ops::conv3d_dvalid(v[0], v[1], v[2])?, 12)
    );
    case!(
        "conv3d_planar",
        [random(&[2, 3, 4, 4], &mut rng), random(&[2, 2, 1, 3, 3], &mut rng), random(&[2], &mut rng)],
        |_, v| project(ops::conv3d_dvalid(v[0], v[1], v[2])?, 13)
    );
    case!("conv2d", [random(&[2, 5, 4], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)], |_, v| {
        project(ops::conv2d(v[0], v[1], v[2])?, 14)
    });
    case!(
        "conv2d_1x1",
        [random(&[3, 4, 4], &mut rng), random(&[1, 3, 1, 1], &mut rng), random(&[1], &mut rng)],
        |_, v| project(ops::conv2d(v[0], v[1], v[2])?, 15)
    );
    case!(
        "conv2d_stride2",
        [random(&[2, 5, 6], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)],
        |_, v| project(ops::conv2d_stride2(v[0], v[1], v[2])?, 16)
    );
    case!(
        "transposed_conv2d",
        [random(&[2, 3, 4], &mut rng), random(&[2, 3, 2, 2], &mut rng), random(&[3], &mut rng)],
        |_, v| project(ops::transposed_conv2d(v[0], v[1], v[2])?, 17)
    );
    cases
}

/// Names of the operator checks, in suite order.
pub fn op_check_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

/// Checks every differentiable operator. When `fault` names a check, that
/// check's output passes through an identity with a wrong derivative.
pub fn op_suite(fault: Option<&str>) -> Result<Vec<GradReport>> {
    if let Some(name) = fault {
        if !op_check_names().contains(&name) && name != MODEL_CHECK {
            return Err(Error::Usage(format!("unknown gradient check '{name}'")));
        }
    }
    op_cases()
        .into_iter()
        .map(|case| {
            let faulty = fault == Some(case.name);
            let f = &case.f;
            let err = finite_diff_check_many(
                |t, v| {
                    let out = f(t, v)?;
                    Ok(if faulty { faulty_identity(out) } else { out })
                },
                &case.inputs,
                GRAD_STEP,
            )?;
            Ok(GradReport { name: case.name.to_string(), max_rel_err: err })
        })
        .collect()
}

/// Name of the full-loss check.
pub const MODEL_CHECK: &str = "model_loss";

/// Checks the gradient of the full training loss (patch terms plus both
/// global terms) with respect to every parameter tensor of `cfg`, on a
/// synthetic `patch_h × patch_w` slab. At most `per_tensor` elements of
/// each parameter are probed.
pub fn model_loss_check(cfg: &GgpfnConfig, seed: u64, per_tensor: usize, faulty: bool) -> Result<GradReport> {
    cfg.validate()?;
    let store = build_model::<f64>(cfg, seed)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();

    let (h, w) = (cfg.patch_h, cfg.patch_w);
    let depth = cfg.required_depth();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let slab = Tensor::from_fn(vec![1, depth, h, w], |_| rng.random_range(-0.5..1.0));
    // A centered disc as ground truth.
    let mask = Grid2::new(
        h,
        w,
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 - h as f64 / 2.0, (i % w) as f64 - w as f64 / 2.0);
                (y * y + x * x < (h.min(w) as f64 / 3.0).powi(2)) as u8
            })
            .collect(),
    )?;
    let center = slab.data()[(depth / 2) * h * w..][..h * w].to_vec();
    let global_in =
        crate::volume::resize_area(&Grid2::new(h, w, center.iter().map(|&v| v as f32).collect())?, cfg.hg, cfg.wg)?;
    let patch_targets = PatchTargets::<f64>::from_mask(&mask);
    let global_targets = GlobalTargets::<f64>::from_mask(&mask, cfg.hg, cfg.wg)?;
    let (alpha, beta) = (0.5, 0.5);

    let err = finite_diff_check_sampled(
        |tape, vars| {
            let p = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
            let gf = if cfg.global_enabled {
                Some(global_forward(tape.constant(global_in.to_tensor()), &p, cfg)?)
            } else {
                None
            };
            let out = forward_patch(
                tape.constant(slab.clone()),
                PatchWindow::whole(h, w),
                (h, w),
                gf.as_ref(),
                &p,
                cfg,
                true,
            )?;
            let heads = out.heads.expect("heads requested");
            let patch = patch_loss(out.prob, &heads, &patch_targets)?;
            let global = match &gf {
                Some(gf) => {
                    let (pf, pfp) = global_heads(gf, &p)?;
                    global_loss(pf, pfp, &global_targets, alpha, beta)?
                }
                None => None,
            };
            let loss = total_loss(&[patch], global)?;
            Ok(if faulty { faulty_identity(loss) } else { loss })
        },
        &inputs,
        GRAD_STEP,
        per_tensor,
    )?;
    Ok(GradReport { name: MODEL_CHECK.to_string(), max_rel_err: err })
}

/// Operator checks followed by the full-loss check on the tiny
/// configuration, probing every parameter element unless `per_tensor` caps it.
pub fn run_suite(fault: Option<&str>, per_tensor: Option<usize>) -> Result<Vec<GradReport>> {
    let mut reports = op_suite(fault)?;
    let cap = per_tensor.unwrap_or(usize::MAX);
    reports.push(model_loss_check(&GgpfnConfig::tiny(), 0, cap, fault == Some(MODEL_CHECK))?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn every_operator_passes() {
        for r in op_suite(None).unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let reports = op_suite(Some("conv2d")).unwrap();
        for r in &reports {
            assert_eq!(r.passed(), r.name != "conv2d", "{}: {}", r.name, r.max_rel_err);
        }
        assert!(op_suite(Some("no_such_op")).is_err());
    }

    #[test]
    fn sampled_model_check_passes_and_catches_fault() {
        let ok = model_loss_check(&GgpfnConfig::tiny(), 1, 3, false).unwrap();
        assert!(ok.passed(), "{}", ok.max_rel_err);
        assert!(!model_loss_check(&GgpfnConfig::tiny(), 1, 1, true).unwrap().passed());
    }

    #[test]
    fn probe_indices_cover_ends() {
        assert_eq!(probe_indices(5, 10), vec![0, 1, 2, 3, 4]);
        assert_eq!(probe_indices(10, 3), vec![0, 4, 9]);
    }

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.37 - 1.0);
        let err = finite_diff_check(|_, x| Ok(ops::sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
