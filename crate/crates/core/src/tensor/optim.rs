use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamW,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamW, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        AdamWState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One decoupled-weight-decay Adam update. `grads` is in store order.
    /// Nothing is modified if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }
        self.step += 1;
        let AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *pv = *pv * (1.0 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[(&str, f64)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.insert(n, Tensor::new(vec![1], vec![*v]).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn decay_only_path_scales_by_one_minus_lr_wd() {
        let mut p = store(&[("w", 2.5)]);
        let mut st = AdamWState::new(AdamW::default(), &p);
        st.step(&mut p, &[Tensor::zeros(vec![1])]).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 2.5 * (1.0 - 0.001 * 0.01));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_hand_evaluated_update() {
        // Step 1: m = (1-β1)g, v = (1-β2)g², bias-corrected to m̂ = g, v̂ = g².
        // With g = 1: w' = 1 - lr · 1 / (1 + eps).
        let cfg = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = store(&[("w", 1.0)]);
        let mut st = AdamWState::new(cfg, &p);
        st.step(&mut p, &[Tensor::full(vec![1], 1.0)]).unwrap();
        let expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut p = store(&[("a", 0.3), ("b", 0.3)]);
        let mut st = AdamWState::new(AdamW::default(), &p);
        for k in 0..5 {
            let g = Tensor::full(vec![1], 0.1 * k as f64 - 0.2);
            st.step(&mut p, &[g.clone(), g]).unwrap();
        }
        assert_eq!(p.get("a").unwrap(), p.get("b").unwrap());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(&[("a", 0.3), ("bad", 0.3)]);
        let mut st = AdamWState::new(AdamW::default(), &p);
        let err = st
            .step(&mut p, &[Tensor::zeros(vec![1]), Tensor::full(vec![1], f64::NAN)])
            .unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
        assert_eq!(st.step, 0);
        assert_eq!(p.get("a").unwrap().data()[0], 0.3);
    }
}
