//! Adam optimizer applied uniformly to dense tensors and TT cores.

use std::collections::BTreeMap;

use crate::autograd::GradMap;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Anything holding named trainable tensors.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, &DenseTensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor));

    fn param_tensors(&self) -> BTreeMap<String, DenseTensor> {
        let mut map = BTreeMap::new();
        self.visit(&mut |name, t| {
            map.insert(name.to_string(), t.clone());
        });
        map
    }

    fn num_param_elements(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.len());
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (DenseTensor, DenseTensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update. Aborts with diagnostics on non-finite
    /// gradients so divergence studies can catch the step that blew up.
    pub fn step(&mut self, params: &mut dyn Parameterized, grads: &GradMap) -> Result<()> {
        for (name, grad) in grads.entries() {
            if !grad.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for parameter {name} at adam step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t as i32);
        let bias2 = 1.0 - c.beta2.powi(t as i32);
        let mut failure: Option<Error> = None;
        params.visit_mut(&mut |name, value| {
            if failure.is_some() {
                return;
            }
            let Some(grad) = grads.get(name) else {
                return; // parameter not touched this step
            };
            if grad.shape() != value.shape() {
                failure = Some(Error::ShapeMismatch(format!(
                    "gradient shape {:?} != parameter {name} shape {:?}",
                    grad.shape(),
                    value.shape()
                )));
                return;
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| {
                    (
                        DenseTensor::zeros(value.shape().to_vec()),
                        DenseTensor::zeros(value.shape().to_vec()),
                    )
                });
            let theta = value.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..theta.len() {
                let g = grad.data()[i];
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g * g;
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                theta[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Snapshot for checkpointing, ordered by parameter name.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &(DenseTensor, DenseTensor))> {
        self.moments.iter()
    }

    pub fn restore_moment(&mut self, name: &str, m: DenseTensor, v: DenseTensor) {
        self.moments.insert(name.to_string(), (m, v));
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    struct Flat(BTreeMap<String, DenseTensor>);

    impl Parameterized for Flat {
        fn visit(&self, f: &mut dyn FnMut(&str, &DenseTensor)) {
            for (name, t) in &self.0 {
                f(name, t);
            }
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor)) {
            for (name, t) in &mut self.0 {
                f(name, t);
            }
        }
    }

    fn grads_of(values: &[(&str, DenseTensor)]) -> GradMap {
        let mut tape = Tape::new();
        let vars: Vec<_> = values
            .iter()
            .map(|(name, t)| tape.param(name, t.clone()))
            .collect();
        let flat: Vec<_> = vars
            .iter()
            .map(|&v| {
                let n = tape.value(v).len();
                let sq = tape.hadamard(v, v).unwrap();
                tape.reshape(sq, vec![n]).unwrap()
            })
            .collect();
        let cat = tape.concat(0, &flat).unwrap();
        let loss = tape.sum_all(cat);
        tape.backward_scalar(loss).unwrap()
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut params = Flat(BTreeMap::from([(
            "a".to_string(),
            DenseTensor::new(vec![2], vec![1.5, -2.5]).unwrap(),
        )]));
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        let mut tape = Tape::new();
        let p = tape.param("a", DenseTensor::zeros(vec![2]));
        let s = tape.affine(p, 0.0, 0.0);
        let loss = tape.sum_all(s);
        let zero = tape.backward_scalar(loss).unwrap();
        adam.step(&mut params, &zero).unwrap();
        assert_eq!(params.0["a"].data(), &[1.5, -2.5]);
    }

    #[test]
    fn scalar_quadratic_converges_to_minimum() {
        // f(theta) = (theta - 3)^2, minimum at 3
        let mut theta = DenseTensor::new(vec![1], vec![-4.0]).unwrap();
        let mut params = Flat(BTreeMap::from([("t".to_string(), theta.clone())]));
        let mut adam = AdamState::new(AdamConfig::with_lr(0.05));
        for _ in 0..500 {
            theta = params.0["t"].clone();
            let mut tape = Tape::new();
            let tv = tape.param("t", theta.clone());
            let shifted = tape.affine(tv, 1.0, -3.0);
            let sq = tape.hadamard(shifted, shifted).unwrap();
            let loss = tape.sum_all(sq);
            let grads = tape.backward_scalar(loss).unwrap();
            adam.step(&mut params, &grads).unwrap();
        }
        assert!((params.0["t"].data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn update_is_invariant_to_parameter_ordering() {
        let a = DenseTensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let b = DenseTensor::new(vec![3], vec![2.0, 0.25, -0.75]).unwrap();
        let run = |swap: bool| {
            let entries: Vec<(&str, DenseTensor)> = if swap {
                vec![("b", b.clone()), ("a", a.clone())]
            } else {
                vec![("a", a.clone()), ("b", b.clone())]
            };
            let grads = grads_of(&entries);
            let mut params = Flat(BTreeMap::from([
                ("a".to_string(), a.clone()),
                ("b".to_string(), b.clone()),
            ]));
            let mut adam = AdamState::new(AdamConfig::with_lr(0.01));
            adam.step(&mut params, &grads).unwrap();
            (params.0["a"].clone(), params.0["b"].clone())
        };
        let (a1, b1) = run(false);
        let (a2, b2) = run(true);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn non_finite_gradient_aborts_with_diagnostics() {
        let mut params = Flat(BTreeMap::from([(
            "a".to_string(),
            DenseTensor::zeros(vec![1]),
        )]));
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        let mut tape = Tape::new();
        let p = tape.param("a", DenseTensor::new(vec![1], vec![1e308]).unwrap());
        let sq = tape.hadamard(p, p).unwrap();
        let sq2 = tape.hadamard(sq, sq).unwrap();
        let loss = tape.sum_all(sq2);
        let grads = tape.backward_scalar(loss).unwrap();
        let err = adam.step(&mut params, &grads);
        assert!(matches!(err, Err(Error::Divergence(_))));
    }
}
