use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{Grads, Param, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept only for trainable paths.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every trainable parameter. Frozen parameters are never touched.
    pub fn update(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        let trainable: Vec<String> = params.trainable_paths().map(str::to_string).collect();
        for path in &trainable {
            let g = grads
                .get(path)
                .ok_or_else(|| Error::Contract(format!("no gradient for trainable parameter {path}")))?;
            if g.len() != params.get(path)?.data.len() {
                return Err(Error::Shape(format!("gradient for {path} has {} elements", g.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {path}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = (1.0 - (c.beta1 as f64).powf(t)) as f32;
        let bc2 = (1.0 - (c.beta2 as f64).powf(t)) as f32;
        for path in &trainable {
            let g = &grads[path];
            let p = params.get_mut(path)?;
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moments as a parameter set (`m.<path>`, `v.<path>`) for checkpointing.
    pub fn to_params(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (prefix, table) in [("m", &self.m), ("v", &self.v)] {
            for (k, data) in table {
                out.set(format!("{prefix}.{k}"), Param::new(&[data.len()], data.clone()).expect("1-d"));
            }
        }
        out
    }

    pub fn from_params(config: AdamConfig, step: u64, table: &ParamSet) -> Result<Self> {
        let mut st = Self::new(config);
        st.step = step;
        for (k, p) in table.iter() {
            if let Some(rest) = k.strip_prefix("m.") {
                st.m.insert(rest.to_string(), p.data.clone());
            } else if let Some(rest) = k.strip_prefix("v.") {
                st.v.insert(rest.to_string(), p.data.clone());
            } else {
                return Err(Error::format(format!("unexpected optimizer entry {k}")));
            }
        }
        Ok(st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.eps), (1e-4, 0.9, 0.999, 1e-8));
    }

    #[test]
    fn one_step_matches_hand_formula() {
        let mut p = ParamSet::new();
        p.insert("x", Param::new(&[1], vec![0.5]).unwrap()).unwrap();
        let mut st = AdamState::new(AdamConfig {
            lr: 0.01,
            ..Default::default()
        });
        let g = 0.3f64;
        let grads: Grads = [("x".to_string(), vec![g as f32])].into();
        st.update(&mut p, &grads).unwrap();
        // by hand: m = 0.1 g, v = 0.001 g², mhat = g, vhat = g²
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let expected = 0.5 - 0.01 * (m / 0.1) / ((v / 0.001).sqrt() + 1e-8);
        assert!((p.get("x").unwrap().data[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = ParamSet::new();
        p.insert("x", Param::new(&[2], vec![0.5, -1.0]).unwrap()).unwrap();
        let mut st = AdamState::new(AdamConfig::default());
        let grads: Grads = [("x".to_string(), vec![0.0, 0.0])].into();
        st.update(&mut p, &grads).unwrap();
        assert_eq!(p.get("x").unwrap().data, vec![0.5, -1.0]);
    }

    #[test]
    fn frozen_untouched_and_missing_grad_rejected() {
        let mut p = ParamSet::new();
        p.insert("lm.w", Param::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        p.insert("ad.w", Param::new(&[1], vec![1.0]).unwrap()).unwrap();
        p.freeze("lm.w").unwrap();
        let before: Vec<u32> = p.get("lm.w").unwrap().data.iter().map(|v| v.to_bits()).collect();
        let mut st = AdamState::new(AdamConfig::default());
        let grads: Grads = [("ad.w".to_string(), vec![1.0]), ("lm.w".to_string(), vec![5.0, 5.0])].into();
        for _ in 0..3 {
            st.update(&mut p, &grads).unwrap();
        }
        let after: Vec<u32> = p.get("lm.w").unwrap().data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert!(!st.m.contains_key("lm.w"));
        let empty = Grads::new();
        assert!(matches!(st.update(&mut p, &empty), Err(Error::Contract(_))));
    }

    #[test]
    fn state_round_trips_through_params() {
        let mut p = ParamSet::new();
        p.insert("x", Param::new(&[2], vec![0.5, -1.0]).unwrap()).unwrap();
        let mut st = AdamState::new(AdamConfig::default());
        let grads: Grads = [("x".to_string(), vec![0.2, -0.1])].into();
        st.update(&mut p, &grads).unwrap();
        let back = AdamState::from_params(st.config, st.step, &st.to_params()).unwrap();
        assert_eq!(back, st);
    }
}
