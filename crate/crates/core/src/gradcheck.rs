//! Central finite-difference checks against the graph's analytic gradients.
//!
//! Relative error is `|numeric - analytic| / max(|numeric|, |analytic|, 1e-5)`;
//! the floor keeps entries whose true gradient is ~0 from dominating.

use ndarray::Array2;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

pub const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-5;

pub fn rel_err(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(FLOOR)
}

/// Worst relative error over every element of `params` for the scalar
/// built by `build`.
pub fn param_grad_error<F>(store: &ParamStore, params: &[ParamId], build: F) -> f64
where
    F: Fn(&mut Graph) -> Var,
{
    let mut mask = vec![false; store.len()];
    for id in params {
        mask[id.index()] = true;
    }
    let analytic: Vec<(ParamId, Array2<f64>)> = {
        let mut g = Graph::training(store, &mask);
        let out = build(&mut g);
        g.backward(out);
        g.param_grads()
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore| {
        let mut g = Graph::inference(s);
        let out = build(&mut g);
        g.scalar(out)
    };
    let mut worst = 0.0f64;
    for &id in params {
        let ana = analytic
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Array2::zeros(store.get(id).dim()));
        for idx in 0..store.get(id).len() {
            let orig = store.get(id).as_slice().expect("standard layout")[idx];
            probe.get_mut(id).as_slice_mut().expect("standard layout")[idx] = orig + STEP;
            let up = eval(&probe);
            probe.get_mut(id).as_slice_mut().expect("standard layout")[idx] = orig - STEP;
            let down = eval(&probe);
            probe.get_mut(id).as_slice_mut().expect("standard layout")[idx] = orig;
            let num = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(num, ana.as_slice().expect("standard layout")[idx]));
        }
    }
    worst
}

/// Worst relative error of `grad` as the gradient of `f` at `x`.
pub fn array_grad_error<F>(x: &Array2<f64>, grad: &Array2<f64>, f: F) -> f64
where
    F: Fn(&Array2<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for idx in 0..x.len() {
        let orig = x.as_slice().expect("standard layout")[idx];
        probe.as_slice_mut().expect("standard layout")[idx] = orig + STEP;
        let up = f(&probe);
        probe.as_slice_mut().expect("standard layout")[idx] = orig - STEP;
        let down = f(&probe);
        probe.as_slice_mut().expect("standard layout")[idx] = orig;
        let num = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_err(num, grad.as_slice().expect("standard layout")[idx]));
    }
    worst
}
