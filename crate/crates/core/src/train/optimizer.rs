use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::graph::{Gradients, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(invalid!("unknown optimizer `{s}`, expected adam or sgd")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Default::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(invalid!("Adam needs betas in [0, 1) and a positive epsilon"));
        }
        Ok(())
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam or plain SGD over the trainable parameters of a graph. Moment
/// estimates are kept in f64 per parameter name.
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must name exactly the trainable
    /// parameters; frozen parameters are never written.
    pub fn step(&mut self, graph: &mut Graph, grads: &Gradients) -> Result<()> {
        let mut params = graph.params_mut();
        for name in grads.keys() {
            match params.iter().find(|p| &p.name == name) {
                None => return Err(Error::Invariant(format!("gradient for unknown parameter `{name}`"))),
                Some(p) if !p.trainable => {
                    return Err(Error::Invariant(format!("gradient for frozen parameter `{name}`")))
                }
                Some(_) => {}
            }
        }
        if let Some(p) = params.iter().find(|p| p.trainable && !grads.contains_key(&p.name)) {
            return Err(Error::Invariant(format!("no gradient for trainable parameter `{}`", p.name)));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for p in params.iter_mut().filter(|p| p.trainable) {
            let g = &grads[&p.name];
            if g.shape() != p.tensor.shape() {
                return Err(Error::Invariant(format!(
                    "gradient {:?} does not match parameter `{}` {:?}",
                    g.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, &d) in p.tensor.data_mut().iter_mut().zip(g.data()) {
                        *w = (*w as f64 - c.learning_rate * d as f64) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    for (i, (w, &d)) in p.tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = d as f64;
                        st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * d;
                        st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * d * d;
                        let update = c.learning_rate * (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + c.epsilon);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Op;
    use crate::ops::DenseParams;
    use crate::tensor::Tensor;

    fn scalar_model(x: f32) -> Graph {
        let mut g = Graph::new("input", 1, 1, 1).unwrap();
        let dense = DenseParams::new(Tensor::new([1, 1], vec![x]).unwrap(), Tensor::zeros([1])).unwrap();
        g.add("fc", Op::Dense(dense), &["input"]).unwrap();
        g
    }

    fn weight(g: &Graph) -> f32 {
        g.node("fc").unwrap().op.params()[0].1.data()[0]
    }

    fn grads(w: f32, b: f32) -> Gradients {
        let mut m = Gradients::new();
        m.insert("fc.weight".into(), Tensor::new([1, 1], vec![w]).unwrap());
        m.insert("fc.bias".into(), Tensor::new([1], vec![b]).unwrap());
        m
    }

    #[test]
    fn sgd_step() {
        let mut g = scalar_model(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        opt.step(&mut g, &grads(2.0, 0.0)).unwrap();
        assert!((weight(&g) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut g = scalar_model(0.37);
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        for _ in 0..5 {
            opt.step(&mut g, &grads(0.0, 0.0)).unwrap();
        }
        assert_eq!(weight(&g), 0.37);
    }

    #[test]
    fn frozen_gradient_is_an_invariant_violation() {
        let mut g = scalar_model(1.0);
        g.set_trainable("fc.weight", false).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        assert!(matches!(opt.step(&mut g, &grads(1.0, 1.0)), Err(Error::Invariant(_))));
        assert_eq!(weight(&g), 1.0);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(Optimizer::new(OptimizerConfig::adam(0.0)).is_err());
        assert_eq!("sgd".parse::<OptimizerKind>().unwrap(), OptimizerKind::Sgd);
    }
}
