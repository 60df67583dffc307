//! Central finite-difference verification of tape gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, OpKind, Regions, SampleTaps, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `backward` against central differences for a single-input scalar
/// function and returns the maximum elementwise relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), step, None)
}

/// Multi-input variant. `fault` perturbs one primitive's backward pass.
pub fn check_many<F>(f: F, inputs: &[Tensor], step: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item()?.is_finite() {
        return Err(Error::NonFinite("function value".into()));
    }
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + step;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - step;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Compares analytic and central-difference directional derivatives along
/// `directions` random unit-scale directions; returns the worst relative error.
pub fn directional_check<F>(f: F, inputs: &[Tensor], step: f64, directions: usize, seed: u64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        Ok(v)
    };
    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dir: Vec<Tensor> = inputs
            .iter()
            .map(|t| uniform(&mut rng, t.shape(), -1.0, 1.0))
            .collect();
        let along: f64 = analytic
            .iter()
            .zip(&dir)
            .map(|(a, d)| a.data().iter().zip(d.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        let shifted = |s: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dir)
                .map(|(t, d)| Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] + s * d.data()[i]))
                .collect()
        };
        let numeric = (eval(&shifted(step))? - eval(&shifted(-step))?) / (2.0 * step);
        worst = worst.max(relative_error(along, numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform values whose magnitude is at least `min_abs`, kept away from kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64, max_abs: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(min_abs..max_abs);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A fixed random readout `Σ r ⊙ y` so every output element carries weight.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(y).to_vec();
    let r = g.constant(uniform(&mut rng, &shape, 0.5, 1.5));
    let p = g.mul(y, r)?;
    g.sum_all(p)
}

/// One shape-representative scalar function per primitive, with its inputs.
type Case = (OpKind, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let s = rng.random::<u64>();
    let mut cases: Vec<Case> = Vec::new();
    let a = uniform(rng, &[3, 4], -1.0, 1.0);
    let b = uniform(rng, &[3, 4], -1.0, 1.0);
    let pos = uniform(rng, &[3, 4], 0.5, 2.0);
    cases.push((OpKind::Add, vec![a.clone(), b.clone()], Box::new(move |g, v| {
        let y = g.add(v[0], v[1])?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Sub, vec![a.clone(), b.clone()], Box::new(move |g, v| {
        let y = g.sub(v[0], v[1])?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Mul, vec![a.clone(), b.clone()], Box::new(move |g, v| {
        let y = g.mul(v[0], v[1])?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Div, vec![a.clone(), pos.clone()], Box::new(move |g, v| {
        let y = g.div(v[0], v[1])?;
        readout(g, y, s)
    })));
    cases.push((OpKind::ScalarMul, vec![a.clone()], Box::new(move |g, v| {
        let y = g.scalar_mul(v[0], -1.7)?;
        readout(g, y, s)
    })));
    let m1 = uniform(rng, &[3, 5], -1.0, 1.0);
    let m2 = uniform(rng, &[5, 2], -1.0, 1.0);
    cases.push((OpKind::MatMul, vec![m1, m2], Box::new(move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        readout(g, y, s)
    })));
    let img = uniform(rng, &[2, 5, 6], -1.0, 1.0);
    let k2 = uniform(rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b2 = uniform(rng, &[3], -0.5, 0.5);
    cases.push((OpKind::Conv2d, vec![img, k2, b2], Box::new(move |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], [2, 1], [1, 1])?;
        readout(g, y, s)
    })));
    let vol = uniform(rng, &[2, 4, 3, 5], -1.0, 1.0);
    let k3 = uniform(rng, &[2, 2, 3, 3, 3], -0.5, 0.5);
    let b3 = uniform(rng, &[2], -0.5, 0.5);
    cases.push((OpKind::Conv3d, vec![vol, k3, b3], Box::new(move |g, v| {
        let y = g.conv3d(v[0], v[1], v[2], [2, 1, 1], [1, 1, 1])?;
        readout(g, y, s)
    })));
    let kinked = away_from_zero(rng, &[3, 4], 0.1, 1.5);
    cases.push((OpKind::Relu, vec![kinked], Box::new(move |g, v| {
        let y = g.relu(v[0])?;
        readout(g, y, s)
    })));
    let wide = uniform(rng, &[3, 4], -3.0, 3.0);
    cases.push((OpKind::Sigmoid, vec![wide.clone()], Box::new(move |g, v| {
        let y = g.sigmoid(v[0])?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Tanh, vec![wide.clone()], Box::new(move |g, v| {
        let y = g.tanh(v[0])?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Exp, vec![a.clone()], Box::new(move |g, v| {
        let y = g.exp(v[0])?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Log, vec![pos.clone()], Box::new(move |g, v| {
        let y = g.log(v[0])?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Softplus, vec![wide.clone()], Box::new(move |g, v| {
        let y = g.softplus(v[0])?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Softmax, vec![wide.clone()], Box::new(move |g, v| {
        let y = g.softmax_axis(v[0], 1)?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Sum, vec![a.clone()], Box::new(move |g, v| {
        let y = g.sum_axis(v[0], 0)?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Mean, vec![a.clone()], Box::new(move |g, v| {
        let y = g.mean_axis(v[0], 1)?;
        readout(g, y, s)
    })));
    let c2 = uniform(rng, &[3, 2], -1.0, 1.0);
    cases.push((OpKind::Concat, vec![a.clone(), c2], Box::new(move |g, v| {
        let y = g.concat_axis(&[v[0], v[1]], 1)?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Slice, vec![a.clone()], Box::new(move |g, v| {
        let y = g.slice(v[0], 1, 1, 3)?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Transpose, vec![a.clone()], Box::new(move |g, v| {
        let y = g.transpose(v[0])?;
        readout(g, y, s)
    })));
    // Bilinear taps over a 3×4 grid with arbitrary fractional sources.
    let mut tb = SampleTaps::builder(12, vec![5]);
    for _ in 0..5 {
        let (u, v) = (rng.random_range(0.0..3.0), rng.random_range(0.0..2.0));
        let (u0, v0) = (u as usize, v as usize);
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        tb.push(v0 * 4 + u0, (1.0 - fu) * (1.0 - fv));
        tb.push(v0 * 4 + u0 + 1, fu * (1.0 - fv));
        tb.push((v0 + 1) * 4 + u0, (1.0 - fu) * fv);
        tb.push((v0 + 1) * 4 + u0 + 1, fu * fv);
        tb.end_row();
    }
    let taps = Arc::new(tb.finish().expect("taps"));
    let chan = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    cases.push((OpKind::Sample, vec![chan], Box::new(move |g, v| {
        let y = g.sample(v[0], taps.clone())?;
        readout(g, y, s)
    })));
    // Distinct values keep each region's argmax unambiguous.
    let mut vals: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let pool_in = Tensor::new(vec![2, 12], vals).expect("shape");
    let regions = Regions {
        n_in: 12,
        sets: vec![vec![0, 1, 5], vec![2, 3, 4, 11], vec![], vec![6, 7, 8, 9, 10]],
    };
    cases.push((OpKind::MaxPool, vec![pool_in], Box::new(move |g, v| {
        let y = g.max_pool_region(v[0], &regions)?;
        readout(g, y, s)
    })));
    let row = uniform(rng, &[1, 4], -1.0, 1.0);
    cases.push((OpKind::Broadcast, vec![row], Box::new(move |g, v| {
        let y = g.broadcast(v[0], &[3, 4])?;
        readout(g, y, s)
    })));
    cases.push((OpKind::Reshape, vec![a], Box::new(move |g, v| {
        let y = g.reshape(v[0], &[2, 6])?;
        readout(g, y, s)
    })));
    cases
}

/// Checks every primitive at `points` random configurations and returns the
/// worst relative error per primitive, in [`OpKind::PRIMITIVES`] order.
pub fn primitive_suite(seed: u64, points: usize, fault: Option<OpKind>) -> Result<Vec<(OpKind, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(OpKind, f64)> = OpKind::PRIMITIVES.iter().map(|&k| (k, 0.0)).collect();
    for _ in 0..points {
        for (kind, inputs, f) in primitive_cases(&mut rng) {
            let err = check_many(|g, v| f(g, v), &inputs, 1e-6, fault)?;
            let slot = worst.iter_mut().find(|(k, _)| *k == kind).expect("listed primitive");
            slot.1 = slot.1.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        // f is linear, so a wide step has no truncation error and little roundoff.
        let err = finite_difference_check(|g, v| g.sum_all(v), &x, 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn zero_step_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_check(|g, v| g.sum_all(v), &x, 0.0).is_err());
    }

    #[test]
    fn tanh_conv_on_5x5_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform(&mut rng, &[1, 5, 5], -1.0, 1.0);
        let k = uniform(&mut rng, &[1, 1, 3, 3], -0.5, 0.5);
        let err = finite_difference_check(
            |g, v| {
                let w = g.constant(k.clone());
                let b = g.constant(Tensor::zeros(vec![1]));
                let y = g.conv2d(v, w, b, [1, 1], [1, 1])?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_primitive_passes_at_ten_points() {
        for (kind, err) in primitive_suite(11, 10, None).unwrap() {
            assert!(err < 1e-5, "{}: {err}", kind.name());
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let res = primitive_suite(1, 1, Some(OpKind::Tanh)).unwrap();
        for (kind, err) in res {
            if kind == OpKind::Tanh {
                assert!(err > 1e-3, "{err}");
            } else {
                assert!(err < 1e-5, "{}: {err}", kind.name());
            }
        }
    }
}
