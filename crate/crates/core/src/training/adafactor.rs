//! Adafactor with relative step sizes, parameter scaling, update clipping
//! and no momentum.

use crate::numeric::{Gradients, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
enum Moment {
    /// Row and column accumulators of a matrix.
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adafactor {
    pub eps1: f64,
    pub eps2: f64,
    pub clip_threshold: f64,
    pub decay_rate: f64,
    step: u64,
    moments: Vec<Option<Moment>>,
}

/// What one call to [`Adafactor::step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub applied: bool,
    pub step: u64,
    pub learning_rate: f64,
}

impl Default for Adafactor {
    fn default() -> Self {
        Adafactor { eps1: 1e-30, eps2: 1e-3, clip_threshold: 1.0, decay_rate: -0.8, step: 0, moments: Vec::new() }
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

impl Adafactor {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Relative step size for step t (1-based).
    pub fn relative_step(t: u64) -> f64 {
        (1.0 / (t as f64).sqrt()).min(1e-2)
    }

    /// Updates every parameter that has a gradient. A non-finite gradient
    /// skips the whole step and leaves the counter unchanged.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> StepReport {
        if !grads.all_finite() {
            log::warn!("non-finite gradient at step {}, update skipped", self.step + 1);
            return StepReport { applied: false, step: self.step, learning_rate: 0.0 };
        }
        self.step += 1;
        let t = self.step;
        let rho = Self::relative_step(t);
        let beta2 = 1.0 - (t as f64).powf(self.decay_rate);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for id in store.ids() {
            let Some(grad) = grads.get(id) else { continue };
            let param = store.get(id);
            let (rows, cols) = (param.rows(), param.cols());
            let alpha = rho * self.eps2.max(rms(param.data()));
            let moment = self.moments[id.0].get_or_insert_with(|| {
                if rows > 1 && cols > 1 {
                    Moment::Factored { row: vec![0.0; rows], col: vec![0.0; cols] }
                } else {
                    Moment::Full(vec![0.0; rows * cols])
                }
            });
            let g = grad.data();
            let mut update = vec![0.0; g.len()];
            match moment {
                Moment::Factored { row, col } => {
                    for (r, acc) in row.iter_mut().enumerate() {
                        let mean = g[r * cols..(r + 1) * cols].iter().map(|x| x * x + self.eps1).sum::<f64>() / cols as f64;
                        *acc = beta2 * *acc + (1.0 - beta2) * mean;
                    }
                    for (c, acc) in col.iter_mut().enumerate() {
                        let mean = (0..rows).map(|r| g[r * cols + c].powi(2) + self.eps1).sum::<f64>() / rows as f64;
                        *acc = beta2 * *acc + (1.0 - beta2) * mean;
                    }
                    let row_mean = row.iter().sum::<f64>() / rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            let v = row[r] * col[c] / row_mean;
                            update[r * cols + c] = g[r * cols + c] / v.sqrt();
                        }
                    }
                }
                Moment::Full(v) => {
                    for ((acc, u), &x) in v.iter_mut().zip(update.iter_mut()).zip(g) {
                        *acc = beta2 * *acc + (1.0 - beta2) * (x * x + self.eps1);
                        *u = x / acc.sqrt();
                    }
                }
            }
            let denom = (rms(&update) / self.clip_threshold).max(1.0);
            let data: Vec<f64> = param.data().iter().zip(&update).map(|(p, u)| p - alpha * u / denom).collect();
            let shape = param.shape().to_vec();
            store.set(id, Tensor::new(shape, data).expect("same shape")).expect("same shape");
        }
        StepReport { applied: true, step: t, learning_rate: rho }
    }

    /// Current second-moment estimate for parameter `index`, expanded to
    /// full size.
    pub fn second_moment(&self, index: usize) -> Option<Vec<f64>> {
        match self.moments.get(index)?.as_ref()? {
            Moment::Full(v) => Some(v.clone()),
            Moment::Factored { row, col } => {
                let row_mean = row.iter().sum::<f64>() / row.len() as f64;
                Some(row.iter().flat_map(|r| col.iter().map(move |c| r * c / row_mean)).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{ParamId, Precision};

    fn grads(n: usize, id: ParamId, t: Tensor) -> Gradients {
        let mut g = Gradients::new(n);
        g.accumulate(id, &t);
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new(Precision::F64);
        let id = store.add("w", Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap()).unwrap();
        let before = store.get(id).clone();
        let mut opt = Adafactor::default();
        for _ in 0..3 {
            assert!(opt.step(&mut store, &grads(1, id, Tensor::zeros(&[2, 3]))).applied);
        }
        assert_eq!(store.get(id), &before);
        // Accumulators hold only eps1 after any number of zero steps.
        for v in opt.second_moment(0).unwrap() {
            assert!((v - 1e-30).abs() < 1e-40);
        }
    }

    #[test]
    fn quadratic_shrinks_monotonically() {
        let mut store = ParamStore::new(Precision::F64);
        let id = store.add("x", Tensor::scalar(1.0)).unwrap();
        let mut opt = Adafactor::default();
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let x = store.get(id).item();
            opt.step(&mut store, &grads(1, id, Tensor::scalar(2.0 * x)));
            let next = store.get(id).item();
            assert!(next.abs() < prev.abs());
            prev = next;
        }
    }

    #[test]
    fn factored_moment_is_exact_for_rank_one() {
        let a = [0.5, -1.5, 2.0];
        let b = [1.0, -0.25, 3.0, 0.75];
        let g: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
        let mut store = ParamStore::new(Precision::F64);
        let id = store.add("w", Tensor::zeros(&[3, 4])).unwrap();
        let mut opt = Adafactor::default();
        opt.step(&mut store, &grads(1, id, Tensor::matrix(3, 4, g.clone()).unwrap()));
        // First step has beta2 = 0, so the estimate is built from g² alone.
        let v = opt.second_moment(0).unwrap();
        for (est, x) in v.iter().zip(&g) {
            assert!((est - x * x).abs() <= 1e-12 * x * x);
        }
        // Update direction is sign(g), scaled by rho * eps2 for a zero matrix.
        for (p, x) in store.get(id).data().iter().zip(&g) {
            assert!((p + 1e-2 * 1e-3 * x.signum()).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut store = ParamStore::new(Precision::F64);
        let id = store.add("x", Tensor::scalar(1.0)).unwrap();
        let mut opt = Adafactor::default();
        let r = opt.step(&mut store, &grads(1, id, Tensor::scalar(f64::NAN)));
        assert!(!r.applied);
        assert_eq!(opt.steps_taken(), 0);
        assert_eq!(store.get(id).item(), 1.0);
    }

    #[test]
    fn positive_gradient_moves_parameter() {
        let mut store = ParamStore::new(Precision::F32);
        let id = store.add("b", Tensor::row(vec![0.25, -0.5])).unwrap();
        let before = store.get(id).clone();
        let mut opt = Adafactor::default();
        opt.step(&mut store, &grads(1, id, Tensor::row(vec![1e-3, 2.0])));
        for (a, b) in store.get(id).data().iter().zip(before.data()) {
            assert!(a < b);
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut store = ParamStore::new(Precision::F64);
            let id = store.add("w", Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
            let mut opt = Adafactor::default();
            for k in 0..5 {
                let t = Tensor::matrix(2, 2, vec![k as f64, 1.0, -2.0, 0.5]).unwrap();
                opt.step(&mut store, &grads(1, id, t));
            }
            store.get(id).clone()
        };
        assert_eq!(run(), run());
    }
}
