use std::collections::HashMap;

use super::{NumError, ParamSet, Result};

/// Learning rates keyed by parameter-name prefix; the longest matching
/// prefix wins.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LrMap {
    entries: Vec<(String, f32)>,
}

impl LrMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// One rate for every parameter.
    pub fn uniform(lr: f32) -> Self {
        Self::new().with("", lr)
    }

    pub fn with(mut self, prefix: impl Into<String>, lr: f32) -> Self {
        let prefix = prefix.into();
        self.entries.retain(|(p, _)| *p != prefix);
        self.entries.push((prefix, lr));
        self
    }

    pub fn resolve(&self, name: &str) -> Result<f32> {
        self.entries
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map(|&(_, lr)| lr)
            .ok_or_else(|| NumError::UnmatchedLr(name.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    Adam { beta1: f32, beta2: f32, eps: f32 },
    /// Plain gradient descent, `p -= lr * g`.
    Sgd,
}

impl Default for OptimKind {
    fn default() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

/// Per-parameter optimizer. Moment state is keyed by parameter name and
/// persists across [`Optimizer::step`] calls.
#[derive(Clone, Debug, Default)]
pub struct Optimizer {
    kind: OptimKind,
    state: HashMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimKind) -> Self {
        Self {
            kind,
            state: HashMap::new(),
        }
    }

    pub fn adam() -> Self {
        Self::new(OptimKind::default())
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    /// Applies one update to every parameter of `params` using its current
    /// gradient. Rates are resolved for the whole set before anything moves.
    pub fn step(&mut self, params: &mut ParamSet, lr: &LrMap) -> Result<()> {
        let rates = params
            .iter()
            .map(|p| lr.resolve(p.name()))
            .collect::<Result<Vec<_>>>()?;
        for (p, rate) in params.iter_mut().zip(rates) {
            match self.kind {
                OptimKind::Sgd => {
                    for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= rate * g;
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let n = p.value.len();
                    let st = self.state.entry(p.name().to_string()).or_insert_with(|| Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        t: 0,
                    });
                    st.t += 1;
                    let bc1 = 1.0 - beta1.powi(st.t);
                    let bc2 = 1.0 - beta2.powi(st.t);
                    let grads = p.grad.data();
                    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grads[i];
                        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                        let mhat = st.m[i] / bc1;
                        let vhat = st.v[i] / bc2;
                        *w -= rate * mhat / (vhat.sqrt() + eps);
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
    use crate::numcore::Tensor;

    fn set_with(name: &str, value: f32, grad: f32) -> ParamSet {
        let mut s = ParamSet::new();
        s.insert(name, Tensor::scalar(value)).unwrap();
        s.get_mut(name).unwrap().grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn longest_prefix_wins() {
        let lr = LrMap::new().with("", 1e-3).with("encoder.", 1e-4);
        assert_eq!(lr.resolve("encoder.conv1.weight").unwrap(), 1e-4);
        assert_eq!(lr.resolve("q_head.fc1.weight").unwrap(), 1e-3);
        let strict = LrMap::new().with("q_head.", 1e-3);
        assert_eq!(
            strict.resolve("encoder.w"),
            Err(NumError::UnmatchedLr("encoder.w".into()))
        );
    }

    #[test]
    fn unmatched_name_fails_without_mutation() {
        let mut s = set_with("a", 1.0, 1.0);
        s.insert("b", Tensor::scalar(1.0)).unwrap();
        let mut opt = Optimizer::new(OptimKind::Sgd);
        assert!(opt.step(&mut s, &LrMap::new().with("a", 0.1)).is_err());
        assert_eq!(s.get("a").unwrap().value[0], 1.0);
    }

    #[test]
    fn plain_gradient_step() {
        let mut s = set_with("p", 1.0, 0.5);
        Optimizer::new(OptimKind::Sgd)
            .step(&mut s, &LrMap::uniform(0.1))
            .unwrap();
        assert!((s.get("p").unwrap().value[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_rate_and_zero_grad_are_identity() {
        let mut s = set_with("p", 0.7, 3.0);
        let mut opt = Optimizer::adam();
        opt.step(&mut s, &LrMap::uniform(0.0)).unwrap();
        assert_eq!(s.get("p").unwrap().value[0], 0.7);
        let mut z = set_with("p", 0.7, 0.0);
        Optimizer::adam().step(&mut z, &LrMap::uniform(0.1)).unwrap();
        assert_eq!(z.get("p").unwrap().value[0], 0.7);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut s = set_with("p", 1.0, 0.25);
        Optimizer::adam().step(&mut s, &LrMap::uniform(0.01)).unwrap();
        assert!((s.get("p").unwrap().value[0] - 0.99).abs() < 1e-6);
    }
}
