use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, primitive_suite};
use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn square_forward_and_backward() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    assert_eq!(tape.value(y).item(), 9.0);
    let g = tape.backward(y, None).unwrap();
    assert_eq!(g.wrt(x).item(), 6.0);
}

#[test]
fn identity_graph_is_bitwise() {
    let mut tape = Tape::new();
    let v = t(&[3], &[0.1, -1e-300, 7.25]);
    let x = tape.param(v.clone());
    let y = tape.reshape(x, &[3]).unwrap();
    assert_eq!(tape.value(y).data(), v.data());
}

#[test]
fn matmul_matches_hand_expansion() {
    let (a, b) = ([1.5, -2.0, 0.25, 3.0], [0.5, 4.0, -1.0, 2.0]);
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &a));
    let y = tape.constant(t(&[2, 2], &b));
    let z = tape.matmul(x, y).unwrap();
    let hand = [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ];
    for (v, h) in tape.value(z).data().iter().zip(hand) {
        assert!((v - h).abs() < 1e-12);
    }
}

#[test]
fn shape_errors_name_primitive_and_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let y = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(x, y).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let z = tape.constant(Tensor::zeros(&[4]));
    let msg = tape.add(x, z).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[4]"), "{msg}");
}

#[test]
fn constants_and_unused_inputs_have_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let unused = tape.param(Tensor::full(&[2], 5.0));
    let c = tape.constant(Tensor::scalar(4.0));
    let y = tape.mul(x, c).unwrap();
    let g = tape.backward(y, None).unwrap();
    assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
    assert_eq!(g.wrt(c).item(), 0.0);
    assert_eq!(g.wrt(x).item(), 4.0);
}

#[test]
fn backward_state_errors() {
    let tape = Tape::new();
    let mut other = Tape::new();
    let v = other.param(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(v, None), Err(Error::State(_))));
    let mut tape = Tape::new();
    tape.param(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(v, None), Err(Error::State(_))));
}

#[test]
fn fan_out_gradients_accumulate() {
    // y = x*x + 3x + sin(x): three uses of x
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.7));
    let a = tape.mul(x, x).unwrap();
    let b = tape.scale(x, 3.0).unwrap();
    let c = tape.sin(x).unwrap();
    let ab = tape.add(a, b).unwrap();
    let y = tape.add(ab, c).unwrap();
    let g = tape.backward(y, None).unwrap().wrt(x).item();
    let branches = 2.0 * 0.7 + 3.0 + 0.7f64.cos();
    assert!((g - branches).abs() < 1e-12);
}

#[test]
fn bilinear_knots_midpoints_and_masks() {
    let mut tape = Tape::new();
    let map = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let coords = tape.constant(t(&[4, 2], &[1.0, 0.0, 0.5, 0.5, -0.1, 0.0, 0.0, 1.5]));
    let s = tape.bilinear_sample(map, coords).unwrap();
    assert_eq!(tape.value(s.values).data(), &[2.0, 2.5, 0.0, 0.0]);
    assert_eq!(s.mask.data(), &[1.0, 1.0, 0.0, 0.0]);
    let bad = tape.constant(t(&[2, 2], &[0.0, 0.0, f64::NAN, 1.0]));
    assert!(matches!(tape.bilinear_sample(map, bad), Err(Error::NonFinite { index: 1, .. })));
    let small = tape.constant(Tensor::zeros(&[1, 3, 1]));
    assert!(tape.bilinear_sample(small, coords).is_err());
}

#[test]
fn out_of_bounds_samples_get_no_gradient() {
    let mut tape = Tape::new();
    let map = tape.param(Tensor::ones(&[3, 3, 2]));
    let coords = tape.param(t(&[1, 2], &[5.0, 1.0]));
    let s = tape.bilinear_sample(map, coords).unwrap();
    let l = tape.sum(s.values).unwrap();
    let g = tape.backward(l, None).unwrap();
    assert_eq!(g.wrt(map).max_abs(), 0.0);
    assert_eq!(g.wrt(coords).max_abs(), 0.0);
}

#[test]
fn gru_hand_cases() {
    let mut tape = Tape::new();
    let h = tape.constant(t(&[1, 2], &[0.8, -0.4]));
    let x = tape.constant(Tensor::ones(&[1, 3]));
    let w = GruWeights {
        w_x: tape.constant(Tensor::zeros(&[3, 6])),
        w_h: tape.constant(Tensor::zeros(&[2, 6])),
        b: tape.constant(Tensor::zeros(&[6])),
    };
    let y = tape.gru_cell(h, x, w).unwrap();
    assert_eq!(tape.value(y).data(), &[0.4, -0.2]);
    let h0 = tape.constant(Tensor::zeros(&[1, 2]));
    let x0 = tape.constant(Tensor::zeros(&[1, 3]));
    let y0 = tape.gru_cell(h0, x0, w).unwrap();
    assert_eq!(tape.value(y0).data(), &[0.0, 0.0]);
    let wide = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(tape.gru_cell(wide, x, w), Err(Error::Shape(_))));
}

#[test]
fn masked_moments_hand_values_and_permutation() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 5.0, 5.0]));
    let b = tape.constant(t(&[2, 2], &[3.0, 6.0, 9.0, 5.0]));
    let m = tape.masked_moments(&[a, b], &[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
    // pixel 0: mean (2, 4), variance (1, 4); pixel 1: only view a
    assert_eq!(tape.value(m).data(), &[2.0, 4.0, 1.0, 4.0, 5.0, 5.0, 0.0, 0.0]);
    let m2 = tape.masked_moments(&[b, a], &[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
    assert_eq!(tape.value(m).data(), tape.value(m2).data());
    let none = tape.masked_moments(&[a], &[vec![0.0, 0.0]]).unwrap();
    assert_eq!(tape.value(none).max_abs(), 0.0);
}

#[test]
fn upsample_is_grid_aligned() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 3, 1], &[0.0, 2.0, 4.0]));
    let x = tape.broadcast_to(x, &[1, 2, 3, 1]).unwrap();
    let y = tape.upsample2x(x).unwrap();
    assert_eq!(&tape.value(y).data()[..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
}

#[test]
fn primitive_gradients_match_finite_differences() {
    for case in primitive_suite() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (case.inputs)(&mut rng);
            let r = check(&inputs, case.graph).unwrap();
            assert!(r.passes(1e-4), "{} seed {seed}: {r:?}", case.name);
        }
    }
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let case = primitive_suite().into_iter().find(|c| c.name == "conv2d_s2").unwrap();
        let inputs = (case.inputs)(&mut rng);
        let mut tape = Tape::new();
        let v: Vec<_> = inputs.into_iter().map(|x| tape.param(x)).collect();
        let y = (case.graph)(&mut tape, &v).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s, None).unwrap();
        (tape.value(y).clone(), g.wrt(v[0]), g.wrt(v[1]))
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn gradient_is_linear_over_branches(x in -2.0f64..2.0, y in -2.0f64..2.0) {
        // d/dx [f + g] computed jointly equals the sum of separate passes
        let joint = {
            let mut tape = Tape::new();
            let a = tape.param(Tensor::scalar(x));
            let b = tape.constant(Tensor::scalar(y));
            let f = tape.tanh(a).unwrap();
            let p = tape.mul(a, b).unwrap();
            let g = tape.exp(p).unwrap();
            let s = tape.add(f, g).unwrap();
            tape.backward(s, None).unwrap().wrt(a).item()
        };
        let parts = {
            let mut tape = Tape::new();
            let a = tape.param(Tensor::scalar(x));
            let f = tape.tanh(a).unwrap();
            let gf = tape.backward(f, None).unwrap().wrt(a).item();
            let mut tape = Tape::new();
            let a = tape.param(Tensor::scalar(x));
            let b = tape.constant(Tensor::scalar(y));
            let p = tape.mul(a, b).unwrap();
            let g = tape.exp(p).unwrap();
            gf + tape.backward(g, None).unwrap().wrt(a).item()
        };
        prop_assert!((joint - parts).abs() <= 1e-12 * joint.abs().max(1.0));
    }

    #[test]
    fn gradient_shapes_match_values(r in 1usize..4, c in 1usize..4) {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[r, c]));
        let y = tape.sum_axis(x, 1).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s, None).unwrap();
        let gx = g.wrt(x);
        prop_assert_eq!(gx.shape(), &[r, c][..]);
    }
}
