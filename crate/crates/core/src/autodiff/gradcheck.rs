//! Central finite-difference checking of tape gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Step used by [`check`] unless a caller overrides it.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest relative error seen; `|a - n| / max(|a|, |n|, floor)`.
    pub max_rel: f64,
    /// Input and element index of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel <= tol
    }
}

/// Deterministic projection weights, so non-scalar outputs reduce to a scalar
/// with every output element contributing.
fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + ((i as f64 * 0.618_033_988_75).fract())).collect()
}

fn contract(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(y);
    }
    let w = Tensor::new(&shape, projection(shape.iter().product()))?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let s = contract(&mut tape, y)?;
    Ok(tape.value(s).item())
}

/// Compares analytic gradients of `f` against central differences with step
/// `h`, for every element of every input flagged in `wrt`.
pub fn check_with<F>(inputs: &[Tensor], wrt: &[bool], f: F, h: f64, floor: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let s = contract(&mut tape, y)?;
    let grads = tape.backward(s, None)?;
    let mut report = GradReport { max_rel: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    for (k, input) in inputs.iter().enumerate() {
        if !wrt.get(k).copied().unwrap_or(true) {
            continue;
        }
        let g = grads.wrt(vars[k]);
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let numeric = (evaluate(&f, &plus)? - evaluate(&f, &minus)?) / (2.0 * h);
            let analytic = g.data()[e];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel || !rel.is_finite() {
                report = GradReport { max_rel: rel, worst: (k, e), analytic, numeric };
            }
        }
    }
    Ok(report)
}

/// [`check_with`] over all inputs with the default step and a magnitude
/// floor of `1e-3`.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(inputs, &[], f, DEFAULT_STEP, 1e-3)
}

/// One entry of the primitive catalogue: an input generator and a graph.
pub struct Case {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub graph: fn(&mut Tape, &[Var]) -> Result<Var>,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Continuous coordinates whose fractional parts avoid texel boundaries.
fn interior_coords(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> Tensor {
    Tensor::from_fn(&[n, 2], |i| {
        let extent = if i % 2 == 0 { w } else { h };
        rng.gen_range(0..extent - 1) as f64 + rng.gen_range(0.05..0.95)
    })
}

/// Every differentiable primitive of the tape, each wrapped in a small graph
/// with randomised inputs.
pub fn primitive_suite() -> Vec<Case> {
    vec![
        Case { name: "add", inputs: |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[3, 4], -1.0, 1.0)], graph: |t, v| t.add(v[0], v[1]) },
        Case {
            name: "add_broadcast",
            inputs: |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[4], -1.0, 1.0)],
            graph: |t, v| t.add(v[0], v[1]),
        },
        Case { name: "sub", inputs: |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[3, 1], -1.0, 1.0)], graph: |t, v| t.sub(v[0], v[1]) },
        Case { name: "mul", inputs: |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[1, 4], -1.0, 1.0)], graph: |t, v| t.mul(v[0], v[1]) },
        Case {
            name: "div",
            inputs: |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), away_from_zero(r, &[3, 4])],
            graph: |t, v| t.div(v[0], v[1]),
        },
        Case { name: "scale", inputs: |r| vec![rand_t(r, &[5], -1.0, 1.0)], graph: |t, v| t.scale(v[0], -2.5) },
        Case { name: "add_scalar", inputs: |r| vec![rand_t(r, &[5], -1.0, 1.0)], graph: |t, v| t.add_scalar(v[0], 0.7) },
        Case {
            name: "matmul",
            inputs: |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[4, 2], -1.0, 1.0)],
            graph: |t, v| t.matmul(v[0], v[1]),
        },
        Case { name: "transpose", inputs: |r| vec![rand_t(r, &[3, 4], -1.0, 1.0)], graph: |t, v| t.transpose(v[0]) },
        Case {
            name: "conv2d_s1",
            inputs: |r| vec![rand_t(r, &[1, 5, 5, 2], -1.0, 1.0), rand_t(r, &[3, 3, 2, 3], -1.0, 1.0)],
            graph: |t, v| t.conv2d(v[0], v[1], 1, 1),
        },
        Case {
            name: "conv2d_s2",
            inputs: |r| vec![rand_t(r, &[2, 6, 6, 2], -1.0, 1.0), rand_t(r, &[3, 3, 2, 2], -1.0, 1.0)],
            graph: |t, v| t.conv2d(v[0], v[1], 2, 1),
        },
        Case { name: "relu", inputs: |r| vec![away_from_zero(r, &[8])], graph: |t, v| t.relu(v[0]) },
        Case { name: "sigmoid", inputs: |r| vec![rand_t(r, &[8], -4.0, 4.0)], graph: |t, v| t.sigmoid(v[0]) },
        Case { name: "tanh", inputs: |r| vec![rand_t(r, &[8], -3.0, 3.0)], graph: |t, v| t.tanh(v[0]) },
        Case { name: "exp", inputs: |r| vec![rand_t(r, &[8], -2.0, 2.0)], graph: |t, v| t.exp(v[0]) },
        Case { name: "log", inputs: |r| vec![rand_t(r, &[8], 0.1, 3.0)], graph: |t, v| t.log(v[0]) },
        Case { name: "pow", inputs: |r| vec![rand_t(r, &[8], 0.2, 2.0)], graph: |t, v| t.pow(v[0], -1.7) },
        Case { name: "sqrt", inputs: |r| vec![rand_t(r, &[8], 0.2, 2.0)], graph: |t, v| t.sqrt(v[0]) },
        Case { name: "abs", inputs: |r| vec![away_from_zero(r, &[8])], graph: |t, v| t.abs(v[0]) },
        Case { name: "softplus", inputs: |r| vec![rand_t(r, &[8], -5.0, 5.0)], graph: |t, v| t.softplus(v[0]) },
        Case { name: "sin", inputs: |r| vec![rand_t(r, &[8], -3.0, 3.0)], graph: |t, v| t.sin(v[0]) },
        Case { name: "cos", inputs: |r| vec![rand_t(r, &[8], -3.0, 3.0)], graph: |t, v| t.cos(v[0]) },
        Case {
            name: "clamp",
            inputs: |r| {
                let x = Tensor::from_fn(&[8], |i| if i % 2 == 0 { r.gen_range(-0.9..0.9) } else { r.gen_range(1.1..2.0) });
                vec![x]
            },
            graph: |t, v| t.clamp(v[0], -1.0, 1.0),
        },
        Case { name: "sum", inputs: |r| vec![rand_t(r, &[3, 4], -1.0, 1.0)], graph: |t, v| t.sum(v[0]) },
        Case { name: "mean", inputs: |r| vec![rand_t(r, &[3, 4], -1.0, 1.0)], graph: |t, v| t.mean(v[0]) },
        Case { name: "sum_axis", inputs: |r| vec![rand_t(r, &[2, 3, 4], -1.0, 1.0)], graph: |t, v| t.sum_axis(v[0], 1) },
        Case { name: "mean_axis", inputs: |r| vec![rand_t(r, &[2, 3, 4], -1.0, 1.0)], graph: |t, v| t.mean_axis(v[0], 2) },
        Case { name: "max_axis", inputs: |r| vec![rand_t(r, &[3, 5], -1.0, 1.0)], graph: |t, v| t.max_axis(v[0], 1) },
        Case { name: "min_axis", inputs: |r| vec![rand_t(r, &[3, 5], -1.0, 1.0)], graph: |t, v| t.min_axis(v[0], 0) },
        Case { name: "broadcast", inputs: |r| vec![rand_t(r, &[3, 1], -1.0, 1.0)], graph: |t, v| t.broadcast_to(v[0], &[2, 3, 4]) },
        Case {
            name: "concat",
            inputs: |r| vec![rand_t(r, &[2, 3], -1.0, 1.0), rand_t(r, &[2, 2], -1.0, 1.0)],
            graph: |t, v| t.concat(&[v[0], v[1], v[0]], 1),
        },
        Case { name: "slice", inputs: |r| vec![rand_t(r, &[3, 5], -1.0, 1.0)], graph: |t, v| t.slice(v[0], 1, 1, 4) },
        Case { name: "reshape", inputs: |r| vec![rand_t(r, &[3, 4], -1.0, 1.0)], graph: |t, v| t.reshape(v[0], &[2, 6]) },
        Case { name: "gather_rows", inputs: |r| vec![rand_t(r, &[4, 3], -1.0, 1.0)], graph: |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]) },
        Case {
            name: "bilinear_sample",
            inputs: |r| vec![rand_t(r, &[4, 5, 2], -1.0, 1.0), interior_coords(r, 6, 5, 4)],
            graph: |t, v| Ok(t.bilinear_sample(v[0], v[1])?.values),
        },
        Case { name: "upsample2x", inputs: |r| vec![rand_t(r, &[1, 3, 4, 2], -1.0, 1.0)], graph: |t, v| t.upsample2x(v[0]) },
        Case {
            name: "gru_cell",
            inputs: |r| {
                vec![
                    rand_t(r, &[2, 3], -1.0, 1.0),
                    rand_t(r, &[2, 4], -1.0, 1.0),
                    rand_t(r, &[4, 9], -1.0, 1.0),
                    rand_t(r, &[3, 9], -1.0, 1.0),
                    rand_t(r, &[9], -0.5, 0.5),
                ]
            },
            graph: |t, v| t.gru_cell(v[0], v[1], super::GruWeights { w_x: v[2], w_h: v[3], b: v[4] }),
        },
        Case {
            name: "se3_exp",
            inputs: |r| {
                // mix large and small rotations so both coefficient branches run
                let big = rand_t(r, &[1, 6], -1.5, 1.5);
                let small = Tensor::from_fn(&[1, 6], |i| if i < 3 { r.gen_range(-0.02..0.02) } else { r.gen_range(-1.0..1.0) });
                let mut d = big.into_data();
                d.extend(small.into_data());
                vec![Tensor::new(&[2, 6], d).unwrap()]
            },
            graph: |t, v| t.se3_exp(v[0]),
        },
        Case {
            name: "masked_moments",
            inputs: |r| vec![rand_t(r, &[4, 3], -1.0, 1.0), rand_t(r, &[4, 3], -1.0, 1.0), rand_t(r, &[4, 3], -1.0, 1.0)],
            graph: |t, v| {
                let masks = vec![vec![1.0, 1.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0, 0.0]];
                t.masked_moments(&v[..3], &masks)
            },
        },
    ]
}
