//! Central finite differences against the reverse sweep.
//!
//! [`suite`] lists one randomized case generator per differentiable op;
//! [`check_op`] runs a case over seeded instances.

use super::{Tape, Tensor, TensorError, Var};
use crate::rng::{self, RngExt};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

pub type Build = dyn for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError> + Send + Sync;
pub type Case = (Vec<Tensor>, Box<Build>);

pub struct OpCase {
    pub name: &'static str,
    pub gen: fn(&mut rng::Rng) -> Case,
}

pub fn random(shape: &[usize], rng: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Reduces an op output to a scalar with fixed weights so that every output
/// entry contributes.
fn weighted_sum<'a>(tape: &mut Tape<'a>, out: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Largest relative error between analytic and numeric gradients of
/// `build` over every entry of every input.
pub fn max_relative_error(inputs: &[Tensor], build: &Build, weight_seed: u64) -> Result<f64, TensorError> {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = build(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let weights = random(&out_shape, &mut rng::seeded(weight_seed));
    let loss_of = |ins: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t)).collect();
        let out = build(&mut tape, &vars)?;
        let l = weighted_sum(&mut tape, out, &weights)?;
        Ok(tape.value(l)[0])
    };
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = build(&mut tape, &vars)?;
        let l = weighted_sum(&mut tape, out, &weights)?;
        let grads = tape.backward(l)?;
        inputs
            .iter()
            .map(|t| grads.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    Ok(worst)
}

/// Worst error over [`INSTANCES`] seeded instances of `op`.
pub fn check_op(op: &OpCase) -> Result<f64, TensorError> {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let (inputs, build) = (op.gen)(&mut rng::seeded(1000 + seed));
        worst = worst.max(max_relative_error(&inputs, &*build, 77 + seed)?);
    }
    Ok(worst)
}

fn dim(r: &mut rng::Rng) -> usize {
    r.gen_range(1..5)
}

pub fn suite() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            gen: |r| {
                let (m, k, n) = (dim(r), dim(r), dim(r));
                (vec![random(&[m, k], r), random(&[k, n], r)], Box::new(|t, v| t.matmul(v[0], v[1])))
            },
        },
        OpCase {
            name: "transpose",
            gen: |r| {
                let (m, n) = (dim(r), dim(r));
                (vec![random(&[m, n], r)], Box::new(|t, v| t.transpose(v[0])))
            },
        },
        OpCase {
            name: "add",
            gen: |r| {
                let s = [dim(r), dim(r)];
                (vec![random(&s, r), random(&s, r)], Box::new(|t, v| t.add(v[0], v[1])))
            },
        },
        OpCase {
            name: "mul",
            gen: |r| {
                let s = [dim(r), dim(r)];
                (vec![random(&s, r), random(&s, r)], Box::new(|t, v| t.mul(v[0], v[1])))
            },
        },
        OpCase {
            name: "add_row",
            gen: |r| {
                let (m, n) = (dim(r), dim(r));
                (vec![random(&[m, n], r), random(&[n], r)], Box::new(|t, v| t.add_row(v[0], v[1])))
            },
        },
        OpCase {
            name: "scale",
            gen: |r| {
                let s = r.gen_range(-2.0..2.0);
                (vec![random(&[dim(r), dim(r)], r)], Box::new(move |t, v| t.scale(v[0], s)))
            },
        },
        OpCase {
            name: "gelu",
            gen: |r| {
                let x = random(&[dim(r), dim(r)], r);
                let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| 3.0 * v).collect()).expect("same shape");
                (vec![x], Box::new(|t, v| t.gelu(v[0])))
            },
        },
        OpCase {
            name: "softmax_rows",
            gen: |r| (vec![random(&[dim(r), dim(r) + 1], r)], Box::new(|t, v| t.softmax_rows(v[0]))),
        },
        OpCase {
            name: "masked_softmax_rows",
            gen: |r| {
                let (m, n) = (dim(r), dim(r) + 1);
                let mut allowed: Vec<bool> = (0..m * n).map(|_| r.gen_bool(0.6)).collect();
                for row in 0..m {
                    allowed[row * n + r.gen_range(0..n)] = true;
                }
                (vec![random(&[m, n], r)], Box::new(move |t, v| t.masked_softmax_rows(v[0], allowed.clone())))
            },
        },
        OpCase {
            name: "layer_norm",
            gen: |r| {
                let (m, n) = (dim(r), dim(r) + 1);
                (
                    vec![random(&[m, n], r), random(&[n], r), random(&[n], r)],
                    Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
                )
            },
        },
        OpCase {
            name: "cross_entropy",
            gen: |r| {
                let (m, n) = (dim(r), dim(r) + 1);
                let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..n)).collect();
                (vec![random(&[m, n], r)], Box::new(move |t, v| t.cross_entropy(v[0], targets.clone())))
            },
        },
        OpCase {
            name: "gather_rows",
            gen: |r| {
                let (rows, n) = (dim(r) + 1, dim(r));
                let ids: Vec<usize> = (0..dim(r) + 2).map(|_| r.gen_range(0..rows)).collect();
                (vec![random(&[rows, n], r)], Box::new(move |t, v| t.gather_rows(v[0], ids.clone())))
            },
        },
        OpCase {
            name: "slice_cols",
            gen: |r| {
                let (m, n) = (dim(r), dim(r) + 2);
                let start = r.gen_range(0..n - 1);
                let len = r.gen_range(1..=n - start);
                (vec![random(&[m, n], r)], Box::new(move |t, v| t.slice_cols(v[0], start, len)))
            },
        },
        OpCase {
            name: "concat_cols",
            gen: |r| {
                let m = dim(r);
                (
                    vec![random(&[m, dim(r)], r), random(&[m, dim(r)], r), random(&[m, dim(r)], r)],
                    Box::new(|t, v| t.concat_cols(v)),
                )
            },
        },
        OpCase {
            name: "mean_rows",
            gen: |r| {
                let (m, n) = (dim(r) + 1, dim(r));
                let mut mask: Vec<bool> = (0..m).map(|_| r.gen_bool(0.5)).collect();
                mask[r.gen_range(0..m)] = true;
                (vec![random(&[m, n], r)], Box::new(move |t, v| t.mean_rows(v[0], mask.clone())))
            },
        },
        OpCase {
            name: "sum",
            gen: |r| (vec![random(&[dim(r), dim(r)], r)], Box::new(|t, v| t.sum(v[0]))),
        },
        // softmax(QKᵀ/√d) V under a causal mask: the chain attention is
        // built from.
        OpCase {
            name: "attention",
            gen: |r| {
                let (n, d) = (dim(r) + 1, dim(r) + 1);
                let allowed: Vec<bool> = (0..n * n).map(|i| i % n <= i / n).collect();
                let scale = 1.0 / (d as f64).sqrt();
                (
                    vec![random(&[n, d], r), random(&[n, d], r), random(&[n, d], r)],
                    Box::new(move |t, v| {
                        let kt = t.transpose(v[1])?;
                        let s = t.matmul(v[0], kt)?;
                        let s = t.scale(s, scale)?;
                        let p = t.masked_softmax_rows(s, allowed.clone())?;
                        t.matmul(p, v[2])
                    }),
                )
            },
        },
    ]
}
