mod common;

use common::*;
use ggpfn::{ops, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn operators_match_brute_force() {
    for (name, err) in oracle_errors(60, 11) {
        assert!(err <= 1e-12, "{name}: {err}");
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

type ConvOp =
    for<'t> fn(ggpfn::Var<'t, f64>, ggpfn::Var<'t, f64>, ggpfn::Var<'t, f64>) -> ggpfn::Result<ggpfn::Var<'t, f64>>;

/// `⟨A x, y⟩ = ⟨x, Aᵀ y⟩`, with `Aᵀ y` taken from the backward pass.
fn adjoint_gap(op: ConvOp, x: Tensor<f64>, w: Tensor<f64>, k: usize, seed: u64) -> f64 {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = op(xv, tape.constant(w), tape.constant(Tensor::zeros(vec![k]))).unwrap();
    let y = random_tensor(&out.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    let ax = (*out.value()).clone();
    let loss = ops::sum(ops::mul(out, tape.constant(y.clone())).unwrap());
    let aty = loss.backward().unwrap().get_or_zeros(&xv);
    (dot(&ax, &y) - dot(&x, &aty)).abs() / dot(&ax, &y).abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_backward_is_the_adjoint(seed in any::<u64>(), c in 1usize..4, k in 1usize..4, h in 1usize..8, w in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[c, h, w], &mut rng);
        prop_assert!(adjoint_gap(ops::conv2d, x.clone(), random_tensor(&[k, c, 3, 3], &mut rng), k, seed) < 1e-12);
        prop_assert!(adjoint_gap(ops::conv2d_stride2, x.clone(), random_tensor(&[k, c, 3, 3], &mut rng), k, seed) < 1e-12);
        prop_assert!(adjoint_gap(ops::transposed_conv2d, x, random_tensor(&[c, k, 2, 2], &mut rng), k, seed) < 1e-12);
        let x3 = random_tensor(&[c, 4, h, w], &mut rng);
        prop_assert!(adjoint_gap(ops::conv3d_dvalid, x3, random_tensor(&[k, c, 3, 3, 3], &mut rng), k, seed) < 1e-12);
    }

    #[test]
    fn conv2d_matches_reference(seed in any::<u64>(), c in 1usize..4, k in 1usize..4, h in 1usize..7, w in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[c, h, w], &mut rng);
        let wt = random_tensor(&[k, c, 3, 5], &mut rng);
        let b = random_tensor(&[k], &mut rng);
        let tape = Tape::new();
        let got = ops::conv2d(tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone())).unwrap();
        prop_assert!(rel_err(&got.value(), &naive_conv2d(&x, &wt, &b)) < 1e-12);
    }
}

#[test]
fn depth_underflow_is_reported() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(vec![1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(vec![1, 1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(vec![1]));
    assert!(matches!(ops::conv3d_dvalid(x, w, b), Err(ggpfn::Error::DepthUnderflow { depth: 2, kernel: 3 })));
}
