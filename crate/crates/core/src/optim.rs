//! Adam over a subset of a [`ParamStore`], with global-norm clipping.

use ndarray::Array2;

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    ids: Vec<ParamId>,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: &[ParamId], lr: f64) -> Self {
        let zeros = |id: &ParamId| Array2::zeros(store.get(*id).dim());
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            ids: ids.to_vec(),
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads` may omit parameters (treated as zero gradient);
    /// entries for parameters outside this optimizer are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (k, id) in self.ids.iter().enumerate() {
            let g = grads.iter().find(|(gid, _)| gid == id).map(|(_, g)| g);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            match g {
                Some(g) => {
                    m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
                    v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
                }
                None => {
                    m.mapv_inplace(|m| self.beta1 * m);
                    v.mapv_inplace(|v| self.beta2 * v);
                }
            }
            let (lr, eps) = (self.lr, self.eps);
            let p = store.get_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / b1t) / ((v / b2t).sqrt() + eps);
            });
        }
    }
}

pub fn global_norm(grads: &[(ParamId, Array2<f64>)]) -> f64 {
    grads.iter().map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Array2<f64>)], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm && n > 0.0 {
        let c = max_norm / n;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| x * c);
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("adapt.w", array![[1.0, -2.0]]).unwrap();
        let mut opt = Adam::new(&store, &[id], 0.1);
        opt.step(&mut store, &[(id, array![[3.0, -0.5]])]);
        let p = store.get(id);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("adapt.w", array![[5.0, -3.0]]).unwrap();
        let mut opt = Adam::new(&store, &[id], 0.05);
        for _ in 0..2000 {
            let g = store.get(id).mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut store, &[(id, g)]);
        }
        assert!(store.get(id).iter().all(|&x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        let id = store.add("adapt.w", array![[0.0, 0.0]]).unwrap();
        let mut grads = vec![(id, array![[3.0, 4.0]])];
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
        let mut small = vec![(id, array![[0.3, 0.4]])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].1, array![[0.3, 0.4]]);
    }

    #[test]
    fn untouched_parameters_stay_bitwise_equal() {
        let mut store = ParamStore::new();
        let a = store.add("adapt.a", array![[1.0]]).unwrap();
        let b = store.add("base.b", array![[0.123456789]]).unwrap();
        let mut opt = Adam::new(&store, &[a], 0.1);
        opt.step(&mut store, &[(a, array![[1.0]]), (b, array![[1.0]])]);
        assert_eq!(store.get(b)[[0, 0]].to_bits(), 0.123456789f64.to_bits());
    }
}
