use std::collections::BTreeMap;

use super::TrainError;
use crate::autodiff::Tensor;
use crate::model::ModelParams;

/// Adam with bias correction. Moments are kept per named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |p: &ModelParams| {
            p.iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update to every parameter named in `grads`.
    ///
    /// All gradients are checked before anything is modified, so a rejected
    /// step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<(), TrainError> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(name.clone()));
            }
            let p = params.get(name).ok_or_else(|| TrainError::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(TrainError::Config(format!("gradient shape {:?} for {name} {:?}", g.shape(), p.shape())));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("moments cover every parameter");
            let v = self.v.get_mut(name).expect("moments cover every parameter");
            let p = params.get_mut(name).expect("checked above");
            let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((p, m), v), &g) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            n_airports: 2,
            hidden_dim: 1,
            embed_dim: 1,
            hops: 1,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 0).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = tiny();
        let before = p.get("out.b").unwrap().data()[0];
        let mut adam = Adam::new(&p);
        let grads = BTreeMap::from([("out.b".to_string(), Tensor::ones(&[1]))]);
        adam.step(&mut p, &grads, 1e-3).unwrap();
        let moved = before - p.get("out.b").unwrap().data()[0];
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = tiny();
        let before = p.clone();
        let mut adam = Adam::new(&p);
        let grads = p.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        adam.step(&mut p, &grads, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = tiny();
        let before = p.clone();
        let mut adam = Adam::new(&p);
        let grads = BTreeMap::from([
            ("out.b".to_string(), Tensor::ones(&[1])),
            ("out.w".to_string(), Tensor::full(&[1, 1], f64::NAN)),
        ]);
        let err = adam.step(&mut p, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("out.w"));
        assert_eq!(p, before);
        assert_eq!(adam.steps_taken(), 0);
    }
}
