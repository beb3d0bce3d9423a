//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::tensor::{GradBuf, Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { learning_rate: 0.001, weight_decay: 1e-6, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    /// Rows that have ever received a gradient. Rows outside this set have
    /// zero moments, so the adaptive step leaves them unchanged and only the
    /// decay applies.
    touched: Vec<bool>,
    width: usize,
}

/// Optimizer state: one pair of moment tensors per parameter.
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|t| {
                let (rows, width) = t.matrix_shape();
                Moments {
                    first: vec![0.0; t.values.len()],
                    second: vec![0.0; t.values.len()],
                    touched: vec![false; rows],
                    width,
                }
            })
            .collect();
        AdamW { config, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.moments[index].first
    }

    /// One bias-corrected Adam step followed by `theta *= 1 - lr * wd`.
    /// Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamWConfig { learning_rate: lr, weight_decay: wd, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * wd;

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let mo = &mut self.moments[id.index()];
            let theta = &mut store.get_mut(id).values;
            let w = mo.width;
            match grads.buf(id) {
                Some(GradBuf::Dense(_)) => mo.touched.iter_mut().for_each(|t| *t = true),
                Some(GradBuf::Rows { rows, .. }) => rows.keys().for_each(|&r| mo.touched[r] = true),
                None => {}
            }
            let dense = match grads.buf(id) {
                Some(GradBuf::Dense(d)) => Some(d.as_slice()),
                _ => None,
            };
            let sparse = match grads.buf(id) {
                Some(GradBuf::Rows { rows, .. }) => Some(rows),
                _ => None,
            };
            for (r, &touched) in mo.touched.iter().enumerate() {
                let span = r * w..(r + 1) * w;
                if !touched {
                    if decay != 1.0 {
                        theta[span].iter_mut().for_each(|t| *t *= decay);
                    }
                    continue;
                }
                let row_grad: Option<&[f64]> = match (dense, sparse) {
                    (Some(d), _) => Some(&d[span.clone()]),
                    (_, Some(s)) => s.get(&r).map(|v| v.as_slice()),
                    _ => None,
                };
                for (j, k) in span.enumerate() {
                    let g = row_grad.map_or(0.0, |rg| rg[j]);
                    let m = b1 * mo.first[k] + (1.0 - b1) * g;
                    let v = b2 * mo.second[k] + (1.0 - b2) * g * g;
                    mo.first[k] = m;
                    mo.second[k] = v;
                    let update = (m / bc1) / ((v / bc2).sqrt() + eps);
                    theta[k] = (theta[k] - lr * update) * decay;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add(Tensor::new("theta", vec![1], vec![v]));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7);
        let g = Gradients::new(&s);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        opt.step(&mut s, &g);
        assert_eq!(s.iter().next().unwrap().values, vec![0.7]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps).
        let mut s = scalar_store(1.0);
        let id = s.find("theta").unwrap();
        let mut g = Gradients::new(&s);
        g.accumulate_dense(id, &[1.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        opt.step(&mut s, &g);
        let expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(id).values[0] - expected).abs() < 1e-15);
        assert!((s.get(id).values[0] - 0.999).abs() < 1e-10);
        assert_eq!(g.dense(id), vec![1.0]);
    }

    #[test]
    fn pure_decay_scales_exactly() {
        let mut s = ParamStore::new();
        let id = s.add(Tensor::new("w", vec![2, 2], vec![1.0, -3.0, 0.25, 8.0]));
        let g = Gradients::new(&s);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &g);
        opt.step(&mut s, &g);
        let f = 1.0 - 0.001 * 1e-6;
        let expected: Vec<f64> = [1.0, -3.0, 0.25, 8.0].iter().map(|v| v * f * f).collect();
        assert_eq!(s.get(id).values, expected);
        assert!(opt.first_moment(id.index()).iter().all(|&m| m == 0.0));
    }

    #[test]
    fn sparse_rows_match_dense_updates() {
        let mut dense_store = ParamStore::new();
        let id = dense_store.add(Tensor::new("e", vec![3, 2], vec![0.5, -0.5, 0.0, 0.0, 1.0, 2.0]));
        let mut sparse_store = dense_store.clone();
        let mut od = AdamW::new(AdamWConfig::default(), &dense_store);
        let mut os = AdamW::new(AdamWConfig::default(), &sparse_store);
        for step in 0..4 {
            let mut gd = Gradients::new(&dense_store);
            let mut gs = Gradients::new(&sparse_store);
            let row = if step % 2 == 0 { 2 } else { 0 };
            let mut full = vec![0.0; 6];
            full[row * 2] = 0.3;
            full[row * 2 + 1] = -1.0;
            gd.accumulate_dense(id, &full);
            gs.accumulate_row(id, row, &[0.3, -1.0]);
            od.step(&mut dense_store, &gd);
            os.step(&mut sparse_store, &gs);
        }
        assert_eq!(dense_store, sparse_store);
    }
}
