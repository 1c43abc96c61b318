//! Finite-difference cases shared by the gradient and acceptance suites.

#![allow(dead_code)]

use epcr::diffcore::{
    grad_check, GradCheckOptions, GradCheckReport, Graph, Reduction, Tensor, Var,
};
use epcr::error::Result;
use rand::seq::SliceRandom;
use rand::Rng;

pub const GRAD_TOL: f64 = 1e-4;

pub fn random(shape: [usize; 4], key: u64) -> Tensor<f64> {
    let mut rng = epcr::rng::stream(7, &[key]);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so relu kinks stay outside the FD step.
pub fn away_from_zero(shape: [usize; 4], key: u64) -> Tensor<f64> {
    let mut rng = epcr::rng::stream(8, &[key]);
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Distinct values with gaps well above the FD step, shuffled.
pub fn distinct(shape: [usize; 4], key: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    vals.shuffle(&mut epcr::rng::stream(9, &[key]));
    Tensor::new(shape, vals).unwrap()
}

/// Weighted sum with fixed random weights, so every output coordinate matters.
pub fn weighted_sum(g: &mut Graph<f64>, v: Var, key: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(v), 1000 + key));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn run<F>(params: &[Tensor<f64>], f: F) -> GradCheckReport
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check(params, f, &GradCheckOptions::default()).unwrap()
}

/// One report per kernel configuration.
pub fn kernel_reports() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for (key, stride, pad, k) in [(1, 1, 1, 3), (2, 2, 1, 3), (3, 1, 0, 1), (4, 2, 0, 2)] {
        let params = [
            random([2, 3, 6, 6], key),
            random([4, 3, k, k], key + 10),
            random([1, 4, 1, 1], key + 20),
        ];
        let r = run(&params, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            weighted_sum(g, y, key)
        });
        out.push((format!("conv2d stride {stride} pad {pad} k {k}"), r));
    }

    let params = [
        random([3, 2, 3, 3], 30),
        random([1, 2, 1, 1], 31),
        random([1, 2, 1, 1], 32),
    ];
    let r = run(&params, |g, v| {
        let (y, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y, 33)
    });
    out.push(("batchnorm train".into(), r));

    let params = [
        random([2, 3, 2, 2], 40),
        random([1, 3, 1, 1], 41),
        random([1, 3, 1, 1], 42),
    ];
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    let r = run(&params, |g, v| {
        let y = g.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        weighted_sum(g, y, 43)
    });
    out.push(("batchnorm eval".into(), r));

    let r = run(&[away_from_zero([2, 3, 4, 4], 50)], |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, 51)
    });
    out.push(("relu".into(), r));

    let r = run(&[distinct([2, 2, 4, 6], 60)], |g, v| {
        let y = g.maxpool2d(v[0], 2)?;
        weighted_sum(g, y, 61)
    });
    out.push(("maxpool".into(), r));

    let params = [random([2, 3, 2, 2], 70), random([2, 3, 2, 2], 71)];
    let r = run(&params, |g, v| {
        let a = g.add(v[0], v[1])?;
        let m = g.mul(a, v[1])?;
        let s = g.scale(m, -1.7);
        Ok(g.sum(s))
    });
    out.push(("add, mul, scale, sum".into(), r));

    let r = run(&[random([4, 2, 2, 2], 80)], |g, v| {
        let y = g.select(v[0], &[3, 0, 3])?;
        weighted_sum(g, y, 81)
    });
    out.push(("select".into(), r));

    for (key, reduction) in [(90, Reduction::Sum), (91, Reduction::Mean)] {
        let params = [random([2, 5, 3, 3], key), random([2, 5, 3, 3], key + 10)];
        let r = run(&params, |g, v| g.dense_similarity(v[0], v[1], reduction));
        out.push((format!("dense similarity {reduction:?}"), r));
    }

    let params = [random([3, 1, 3, 3], 100), random([3, 1, 3, 3], 101)];
    out.push(("mse".into(), run(&params, |g, v| g.mse(v[0], v[1]))));

    let params = [random([1, 4, 2, 2], 110), random([1, 4, 2, 2], 111)];
    let r = run(&params, |g, v| {
        let t = g.stop_gradient(v[1]);
        let ds = g.dense_similarity(v[0], t, Reduction::Mean)?;
        Ok(g.scale(ds, -1.0))
    });
    out.push(("stop gradient".into(), r));
    out
}
