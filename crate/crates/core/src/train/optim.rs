use tmc_tensor::Tensor;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected step. Parameters absent from `grads` are left
    /// untouched together with their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if let Some(bad) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient in {} at element {bad}",
                    store.name(*id)
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (id, g) in grads {
            let k = id.index();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.get_mut(*id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without an improvement larger than `threshold` over the best value,
/// then resets the counter. The best value starts at a pre-training baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub best: f64,
    pub bad: usize,
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
}

impl Plateau {
    pub fn new(baseline: f64, patience: usize, factor: f64, threshold: f64) -> Self {
        Self {
            best: baseline,
            bad: 0,
            patience,
            factor,
            threshold,
        }
    }

    pub fn observe(&mut self, value: f64, lr: f64) -> f64 {
        if value > self.best + self.threshold {
            self.best = value;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Learning rate after each epoch as a pure function of the validation series.
pub fn lr_schedule(
    baseline: f64,
    history: &[f64],
    lr0: f64,
    patience: usize,
    factor: f64,
    threshold: f64,
) -> Vec<f64> {
    let mut p = Plateau::new(baseline, patience, factor, threshold);
    let mut lr = lr0;
    history
        .iter()
        .map(|&v| {
            lr = p.observe(v, lr);
            lr
        })
        .collect()
}

/// Stops after `patience` consecutive non-improving epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    pub best: f64,
    pub bad: usize,
    pub patience: usize,
    pub threshold: f64,
}

impl EarlyStop {
    pub fn new(baseline: f64, patience: usize, threshold: f64) -> Self {
        Self {
            best: baseline,
            bad: 0,
            patience,
            threshold,
        }
    }

    /// Returns `true` when training should stop.
    pub fn observe(&mut self, value: f64) -> bool {
        if value > self.best + self.threshold {
            self.best = value;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_closed_form() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[(id, Tensor::scalar(1.0))], 0.1).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((store.get(id).item() - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::filled(&[3], 0.7));
        let mut adam = Adam::new(&store);
        for _ in 0..5 {
            adam.step(&mut store, &[(id, Tensor::zeros(&[3]))], 0.1).unwrap();
        }
        assert_eq!(store.get(id).data(), &[0.7; 3]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("enc.w", Tensor::zeros(&[2]));
        let mut adam = Adam::new(&store);
        let g = Tensor::new(&[2], vec![0.0, f64::NAN]).unwrap();
        let err = adam.step(&mut store, &[(id, g)], 0.1).unwrap_err();
        assert!(err.to_string().contains("enc.w"), "{err}");
    }

    #[test]
    fn plateau_cases() {
        let improving: Vec<f64> = (1..=30).map(|i| i as f64 * 0.01).collect();
        assert!(lr_schedule(0.0, &improving, 1.0, 10, 0.1, 1e-5).iter().all(|&l| l == 1.0));
        let flat10 = lr_schedule(0.5, &[0.5; 10], 1.0, 10, 0.1, 1e-5);
        assert_eq!(*flat10.last().unwrap(), 0.1);
        assert_eq!(flat10.iter().filter(|&&l| l == 1.0).count(), 9);
        let flat20 = lr_schedule(0.5, &[0.5; 20], 1.0, 10, 0.1, 1e-5);
        assert!((flat20.last().unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn early_stop_cases() {
        let mut e = EarlyStop::new(0.5, 20, 1e-5);
        for _ in 0..18 {
            assert!(!e.observe(0.5));
        }
        assert!(!e.observe(0.6));
        assert_eq!(e.bad, 0);
        let mut e = EarlyStop::new(0.5, 20, 1e-5);
        let stops: Vec<bool> = (0..20).map(|_| e.observe(0.5)).collect();
        assert!(stops[..19].iter().all(|&s| !s) && stops[19]);
    }
}
