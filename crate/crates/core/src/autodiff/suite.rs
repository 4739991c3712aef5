//! Central-difference checks for every differentiable tape primitive.

use rand::Rng as _;

use super::{grad_check_many, GradCheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::{derive_seed, stream, Rng};

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in ±[0.2, 1.5], away from the kinks of relu/abs.
fn off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weighted sum with fixed random weights so each output coordinate matters.
fn project(tape: &mut Tape, y: Var, salt: u64) -> Result<Var> {
    let mut rng = stream(derive_seed(0x5eed, salt));
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p, None)
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = stream(seed);
    let r = &mut rng;
    let mut v: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], $(move)? |$tape:ident, $x:ident| $body:expr) => {{
            let salt = v.len() as u64;
            v.push((
                $name,
                vec![$($t),*],
                Box::new(move |$tape: &mut Tape, $x: &[Var]| {
                    let y = $body?;
                    project($tape, y, salt)
                }),
            ));
        }};
    }
    let m = r.random_range(1..=4);
    let n = r.random_range(2..=5);
    let k = r.random_range(1..=4);
    let a = uniform(r, &[m, n], -1.0, 1.0);
    let b = uniform(r, &[m, n], -1.0, 1.0);
    let row = uniform(r, &[n], -1.0, 1.0);
    case!("add", [a.clone(), b.clone()], |t, x| t.add(x[0], x[1]));
    case!("add_broadcast", [a.clone(), row.clone()], |t, x| t.add(x[0], x[1]));
    case!("sub", [a.clone(), row.clone()], |t, x| t.sub(x[0], x[1]));
    case!("mul", [a.clone(), b.clone()], |t, x| t.mul(x[0], x[1]));
    case!("mul_broadcast", [a.clone(), row.clone()], |t, x| t.mul(x[0], x[1]));
    let pos = uniform(r, &[m, n], 0.5, 2.0);
    case!("div", [a.clone(), pos.clone()], |t, x| t.div(x[0], x[1]));
    // separated operands keep min/max away from ties
    let lo = uniform(r, &[m, n], -1.0, 0.0);
    let hi = Tensor::from_fn(&[m, n], |i| lo.data()[i] + 0.3 + 0.5 * (i % 3) as f64);
    let mixed_a = Tensor::from_fn(&[m, n], |i| if i % 2 == 0 { lo.data()[i] } else { hi.data()[i] });
    let mixed_b = Tensor::from_fn(&[m, n], |i| if i % 2 == 0 { hi.data()[i] } else { lo.data()[i] });
    case!("minimum", [mixed_a.clone(), mixed_b.clone()], |t, x| t.minimum(x[0], x[1]));
    case!("maximum", [mixed_a, mixed_b], |t, x| t.maximum(x[0], x[1]));
    case!("scale", [a.clone()], |t, x| Ok::<_, crate::Error>(t.scale(x[0], -2.5)));
    case!("add_scalar", [a.clone()], |t, x| Ok::<_, crate::Error>(t.add_scalar(x[0], 0.7)));
    case!("tanh", [uniform(r, &[m, n], -2.0, 2.0)], |t, x| Ok::<_, crate::Error>(t.tanh(x[0])));
    case!("sigmoid", [uniform(r, &[m, n], -3.0, 3.0)], |t, x| Ok::<_, crate::Error>(t.sigmoid(x[0])));
    case!("relu", [off_zero(r, &[m, n])], |t, x| Ok::<_, crate::Error>(t.relu(x[0])));
    case!("exp", [uniform(r, &[m, n], -1.5, 1.5)], |t, x| Ok::<_, crate::Error>(t.exp(x[0])));
    case!("log", [pos.clone()], |t, x| Ok::<_, crate::Error>(t.log(x[0])));
    case!("abs", [off_zero(r, &[m, n])], |t, x| Ok::<_, crate::Error>(t.abs(x[0])));
    // grid spaced 0.25 apart, offset so no point sits within 0.03 of a bound
    let offset = r.random_range(-1.45..-1.3);
    let spread = Tensor::from_fn(&[12], |i| {
        let v = offset + 0.25 * i as f64;
        if (v + 0.6).abs() < 0.03 || (v - 0.8).abs() < 0.03 {
            v + 0.1
        } else {
            v
        }
    });
    case!("clamp", [spread], |t, x| Ok::<_, crate::Error>(t.clamp(x[0], -0.6, 0.8)));
    case!("matmul", [a.clone(), uniform(r, &[n, k], -1.0, 1.0)], |t, x| t.matmul(x[0], x[1]));
    case!("transpose", [a.clone()], |t, x| t.transpose(x[0]));
    case!("reshape", [a.clone()], move |t, x| t.reshape(x[0], &[n, m]));
    case!("concat_axis0", [a.clone(), uniform(r, &[k, n], -1.0, 1.0)], |t, x| t.concat(x, 0));
    case!("concat_axis1", [a.clone(), uniform(r, &[m, k], -1.0, 1.0)], |t, x| t.concat(x, 1));
    case!("slice", [uniform(r, &[k, n, m], -1.0, 1.0)], move |t, x| t.slice(x[0], 1, 1, n - 1));
    let rows: Vec<usize> = (0..m + 2).map(|_| r.random_range(0..m)).collect();
    case!("gather_rows", [a.clone()], move |t, x| t.gather_rows(x[0], &rows));
    let cube = uniform(r, &[k, m, n], -1.0, 1.0);
    case!("sum_axis", [cube.clone()], |t, x| t.sum(x[0], Some(1)));
    case!("mean_axis", [cube.clone()], |t, x| t.mean(x[0], Some(2)));
    case!("mean_all", [cube.clone()], |t, x| {
        let m = t.mean(x[0], None)?;
        Ok::<_, crate::Error>(t.tanh(m))
    });
    case!("softmax", [uniform(r, &[m, n], -2.0, 2.0)], |t, x| t.softmax(x[0], 1));
    case!("softmax_axis0", [cube.clone()], |t, x| t.softmax(x[0], 0));
    case!("log_softmax", [uniform(r, &[m, n], -2.0, 2.0)], |t, x| t.log_softmax(x[0], 1));
    case!("layer_norm", [uniform(r, &[m, n + 1], -2.0, 2.0)], |t, x| t.layer_norm(x[0], 1e-5));
    let (c, hh, ww) = (r.random_range(1..=2), r.random_range(3..=6), r.random_range(3..=6));
    case!("im2col", [uniform(r, &[c, hh, ww], -1.0, 1.0)], |t, x| t.im2col(x[0], 3, 2, 1));
    v
}

/// Runs every primitive check; returns `(name, report)` in a fixed order.
pub fn primitive_suite(seed: u64, h: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, grad_check_many(|t, x| f(t, x), &inputs, h)?)))
        .collect()
}
