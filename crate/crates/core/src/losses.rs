//! Training objectives: the forward and reverse cycle losses, the TD target,
//! the two-branch augmented TD loss and their weighted sum.
//!
//! Every loss is built on a caller-owned [`Graph`], so the same code serves
//! training in `f32` and gradient checks in `f64`.

use rand_distr::{Distribution, StandardNormal};

use crate::augment::{augment, AugKind};
use crate::envsim::{stack_observations, Observation, Transition, NUM_ACTIONS};
use crate::models::{self, LatentVars, ModelBundle, ModelError, GENERAL_DIM};
use crate::numcore::{Graph, NumError, ParamSet, Real, Tensor, Var};
use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),
    #[error("loss weight `{name}` must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f32 },
    #[error("pair batch halves differ in length: {0} vs {1}")]
    UnevenPairs(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<NumError> for LossError {
    fn from(e: NumError) -> Self {
        LossError::Model(ModelError::Num(e))
    }
}

type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    beta1: f32,
    beta2: f32,
    kl_weight: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            kl_weight: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn new(beta1: f32, beta2: f32, kl_weight: f32) -> Result<Self> {
        for (name, value) in [("beta1", beta1), ("beta2", beta2), ("kl_weight", kl_weight)] {
            if !(value >= 0.0) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(Self {
            beta1,
            beta2,
            kl_weight,
        })
    }

    pub fn beta1(&self) -> f32 {
        self.beta1
    }

    pub fn beta2(&self) -> f32 {
        self.beta2
    }

    pub fn kl_weight(&self) -> f32 {
        self.kl_weight
    }
}

/// How the bootstrap value of the next state is formed from the target
/// Q-values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetRule {
    /// `max_a' Q(s', a')`, the greedy policy's value.
    Max,
    /// `mean_a' Q(s', a')`, the value of the uniform random policy that
    /// generated the pretraining data.
    Mean,
}

/// The encoder/projection/decoder used by the cycle losses. Implemented by
/// [`ModelBundle`]; tests substitute stubs.
pub trait CycleModel<T: Real> {
    fn split(&self, g: &mut Graph<T>, obs: Var) -> Result<LatentVars>;
    fn decode(&self, g: &mut Graph<T>, specific: Var, general: Var) -> Result<Var>;
}

impl<T: Real> CycleModel<T> for ModelBundle {
    fn split(&self, g: &mut Graph<T>, obs: Var) -> Result<LatentVars> {
        let z = models::encode(g, &self.encoder, obs)?;
        Ok(models::project(g, &self.projection, z)?)
    }

    fn decode(&self, g: &mut Graph<T>, specific: Var, general: Var) -> Result<Var> {
        Ok(models::decode(g, &self.decoder, specific, general)?)
    }
}

/// Observation pairs; `first[i]` goes with `second[i]`.
#[derive(Clone, Debug, Default)]
pub struct PairBatch {
    pub first: Vec<Observation>,
    pub second: Vec<Observation>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    fn tensors<T: Real>(&self, op: &'static str) -> Result<(Tensor<T>, Tensor<T>)> {
        if self.first.len() != self.second.len() {
            return Err(LossError::UnevenPairs(self.first.len(), self.second.len()));
        }
        if self.is_empty() {
            return Err(LossError::EmptyBatch(op));
        }
        Ok((
            stack_observations(&self.first).cast(),
            stack_observations(&self.second).cast(),
        ))
    }
}

fn gaussian<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = seed::rng(seed);
    Tensor::from_fn(shape, |_| {
        let x: f32 = StandardNormal.sample(&mut rng);
        T::from_f32(x)
    })
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` summed over dimensions and averaged
/// over rows.
pub fn kl_to_unit<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    let rows = g.value(mu).shape()[0];
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -1.0)?;
    let s = g.sum(t)?;
    Ok(g.scale(s, 0.5 / rows as f64)?)
}

fn mse<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

/// Mean absolute difference over every element.
pub fn mean_abs_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d)?;
    Ok(g.mean(ad)?)
}

/// Swap-reconstruction loss on same-domain pairs: `Dec(ŝ2, s̄1) ≈ s1` and
/// `Dec(ŝ1, s̄2) ≈ s2`, with `s̄` sampled by reparameterization, plus the
/// weighted KL of both general posteriors.
pub fn forward_cycle_loss<T: Real, M: CycleModel<T>>(
    g: &mut Graph<T>,
    model: &M,
    pairs: &PairBatch,
    kl_weight: f32,
    noise_seed: u64,
) -> Result<Var> {
    let (a, b) = pairs.tensors::<T>("forward_cycle_loss")?;
    let n = pairs.len();
    let s1 = g.constant(a);
    let s2 = g.constant(b);
    let l1 = model.split(g, s1)?;
    let l2 = model.split(g, s2)?;
    let gen1 = models::reparameterize(g, l1.mu, l1.logvar, gaussian(&[n, GENERAL_DIM], seed::derive(noise_seed, 1)))?;
    let gen2 = models::reparameterize(g, l2.mu, l2.logvar, gaussian(&[n, GENERAL_DIM], seed::derive(noise_seed, 2)))?;
    let r1 = model.decode(g, l2.specific, gen1)?;
    let r2 = model.decode(g, l1.specific, gen2)?;
    let e1 = mse(g, r1, s1)?;
    let e2 = mse(g, r2, s2)?;
    let rec = g.add(e1, e2)?;
    let rec = g.scale(rec, 0.5)?;
    if kl_weight == 0.0 {
        return Ok(rec);
    }
    let k1 = kl_to_unit(g, l1.mu, l1.logvar)?;
    let k2 = kl_to_unit(g, l2.mu, l2.logvar)?;
    let kl = g.add(k1, k2)?;
    let kl = g.scale(kl, 0.5 * kl_weight as f64)?;
    Ok(g.add(rec, kl)?)
}

/// Reverse-cycle images: each observation's specific code decoded with one
/// shared prior sample of the general code.
#[derive(Clone, Debug)]
pub struct ReverseDecodes {
    pub first: Tensor,
    pub second: Tensor,
}

/// Decodes for [`reverse_cycle_loss`], computed without gradient tracking
/// like TD targets. If the reverse loss reaches the decoder, the decoder
/// learns to ignore the specific code and the loss vanishes without making
/// the encoder invariant.
pub fn reverse_decodes<M: CycleModel<f32>>(model: &M, pairs: &PairBatch, noise_seed: u64) -> Result<ReverseDecodes> {
    let (a, b) = pairs.tensors::<f32>("reverse_cycle_loss")?;
    let n = pairs.len();
    let mut g = Graph::<f32>::inference();
    let s1 = g.constant(a);
    let s2 = g.constant(b);
    let l1 = model.split(&mut g, s1)?;
    let l2 = model.split(&mut g, s2)?;
    let shared = g.constant(gaussian(&[n, GENERAL_DIM], noise_seed));
    let d1 = model.decode(&mut g, l1.specific, shared)?;
    let d2 = model.decode(&mut g, l2.specific, shared)?;
    Ok(ReverseDecodes {
        first: g.value(d1).clone(),
        second: g.value(d2).clone(),
    })
}

/// Re-encodes both decodes and penalizes the L1 gap between their general
/// means.
pub fn reverse_cycle_loss<T: Real, M: CycleModel<T>>(g: &mut Graph<T>, model: &M, decodes: &ReverseDecodes) -> Result<Var> {
    let d1 = g.constant(decodes.first.cast());
    let d2 = g.constant(decodes.second.cast());
    let m1 = model.split(g, d1)?.mu;
    let m2 = model.split(g, d2)?.mu;
    mean_abs_diff(g, m1, m2)
}

/// `r + gamma * (1 - done) * V(q_next)` for one sample.
pub fn bootstrap(reward: f32, q_next: &[f32], done: bool, gamma: f32, rule: TargetRule) -> f32 {
    if done {
        return reward;
    }
    let v = match rule {
        TargetRule::Max => q_next.iter().copied().fold(f32::NEG_INFINITY, f32::max),
        TargetRule::Mean => q_next.iter().sum::<f32>() / q_next.len() as f32,
    };
    reward + gamma * v
}

/// TD targets from the target networks on clean next observations. Runs on
/// its own inference graph, so nothing flows back into any parameter.
pub fn td_target(bundle: &ModelBundle, batch: &[&Transition], gamma: f32, rule: TargetRule) -> Result<Vec<f32>> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch("td_target"));
    }
    let mut g = Graph::<f32>::inference();
    let x = g.constant(stack_observations(batch.iter().map(|t| &t.next_obs)));
    let q = bundle.q_forward(&mut g, x, true)?;
    let q = g.value(q).data();
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| bootstrap(t.reward, &q[i * NUM_ACTIONS..][..NUM_ACTIONS], t.done, gamma, rule))
        .collect())
}

/// `sum_b sum_i (pred - target)^2 / n` where `q` stacks `blocks` copies of
/// an `n`-sample batch. Each block is summed on its own, so identical blocks
/// contribute bit-identical terms.
pub fn td_error<T: Real>(g: &mut Graph<T>, q: Var, actions: &[usize], targets: &[f32], blocks: usize) -> Result<Var> {
    let n = actions.len();
    let idx: Vec<usize> = actions.iter().copied().cycle().take(n * blocks).collect();
    let tgt: Tensor<T> = Tensor::from_fn(&[idx.len()], |i| T::from_f32(targets[i % n]));
    let pred = g.gather(q, &idx)?;
    let t = g.constant(tgt);
    let d = g.sub(pred, t)?;
    let sq = g.square(d)?;
    let mut total = None;
    for b in 0..blocks {
        let mask = g.constant(Tensor::from_fn(&[n * blocks], |i| if i / n == b { T::one() } else { T::zero() }));
        let part = g.mul(sq, mask)?;
        let part = g.sum(part)?;
        total = Some(match total {
            None => part,
            Some(acc) => g.add(acc, part)?,
        });
    }
    let total = total.ok_or(LossError::EmptyBatch("td_error"))?;
    Ok(g.scale(total, 1.0 / n as f64)?)
}

/// One-branch TD loss `mean((Q(s, a) - q_tgt)^2)` through the online
/// networks.
pub fn td_loss<T: Real>(
    g: &mut Graph<T>,
    bundle: &ModelBundle,
    batch: &[&Transition],
    targets: &[f32],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch("td_loss"));
    }
    let x = g.constant(stack_observations(batch.iter().map(|t| &t.obs)).cast());
    let q = bundle.q_forward(g, x, false)?;
    let actions: Vec<usize> = batch.iter().map(|t| t.action.index()).collect();
    td_error(g, q, &actions, targets, 1)
}

/// Two-branch TD loss: clean and augmented copies of each state regress on
/// the same clean target. `aug = None` uses the identity, which makes the
/// result exactly twice [`td_loss`]. Both branches share one forward pass.
pub fn svea_loss<T: Real>(
    g: &mut Graph<T>,
    bundle: &ModelBundle,
    batch: &[&Transition],
    targets: &[f32],
    aug: Option<AugKind>,
    seed: u64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch("svea_loss"));
    }
    let augmented: Vec<Observation> = batch
        .iter()
        .enumerate()
        .map(|(i, t)| match aug {
            Some(kind) => augment(kind, &t.obs, seed::derive(seed, i as u64)),
            None => t.obs.clone(),
        })
        .collect();
    let both = stack_observations(batch.iter().map(|t| &t.obs).chain(&augmented));
    let x = g.constant(both.cast());
    let q = bundle.q_forward(g, x, false)?;
    let actions: Vec<usize> = batch.iter().map(|t| t.action.index()).collect();
    td_error(g, q, &actions, targets, 2)
}

/// Scalar values of the three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub forward: f64,
    pub reverse: f64,
    pub svea: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn combine(weights: &LossWeights, forward: f64, reverse: f64, svea: f64) -> Self {
        let total = weights.beta1 as f64 * (forward + reverse) + weights.beta2 as f64 * svea;
        Self {
            forward,
            reverse,
            svea,
            total,
        }
    }
}

/// Inputs of the combined objective.
pub struct UsraBatch<'a> {
    pub forward_pairs: &'a PairBatch,
    pub reverse: &'a ReverseDecodes,
    pub transitions: &'a [&'a Transition],
    pub targets: &'a [f32],
    pub aug: Option<AugKind>,
}

/// `beta1 * (forward + reverse) + beta2 * svea`. Terms with a zero weight are
/// not built and report 0.
pub fn usra_loss<T: Real>(
    g: &mut Graph<T>,
    bundle: &ModelBundle,
    batch: &UsraBatch<'_>,
    weights: &LossWeights,
    seed: u64,
) -> Result<(Var, LossComponents)> {
    let weights = LossWeights::new(weights.beta1, weights.beta2, weights.kl_weight)?;
    let mut terms = Vec::new();
    let (mut fwd, mut rev, mut sv) = (0.0, 0.0, 0.0);
    if weights.beta1 > 0.0 {
        let f = forward_cycle_loss(g, bundle, batch.forward_pairs, weights.kl_weight, seed::derive(seed, 10))?;
        let r = reverse_cycle_loss(g, bundle, batch.reverse)?;
        fwd = scalar(g, f);
        rev = scalar(g, r);
        let c = g.add(f, r)?;
        terms.push(g.scale(c, weights.beta1 as f64)?);
    }
    if weights.beta2 > 0.0 {
        let s = svea_loss(g, bundle, batch.transitions, batch.targets, batch.aug, seed::derive(seed, 12))?;
        sv = scalar(g, s);
        terms.push(g.scale(s, weights.beta2 as f64)?);
    }
    let total = match terms.as_slice() {
        [] => g.constant(Tensor::scalar(T::zero())),
        [t] => *t,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!("at most two terms"),
    };
    let mut comps = LossComponents::combine(&weights, fwd, rev, sv);
    comps.total = scalar(g, total);
    Ok((total, comps))
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().map_or(f64::NAN, |x| x.as_f64())
}

/// Names of online parameters, for tests and logging.
pub fn online_param_names(bundle: &ModelBundle) -> Vec<String> {
    bundle
        .online_sets()
        .into_iter()
        .flat_map(ParamSet::iter)
        .map(|p| p.name().to_string())
        .collect()
}
