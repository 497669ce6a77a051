//! The encoder, split projection, decoder and Q-head, plus EMA-tracked
//! target copies of the encoder and Q-head.
//!
//! Forward passes are free functions over a [`Graph`] so the same code runs
//! in training (`f32`), inference and gradient checking (`f64`). Every
//! network lives in its own [`ParamSet`] whose names carry the network
//! prefix, e.g. `encoder.conv1.weight`.

use rand::Rng;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::envsim::{stack_observations, ActionId, Observation, NUM_ACTIONS, OBS_CHANNELS};
use crate::numcore::{Graph, NumError, ParamSet, Real, Tensor, Var};
use crate::seed;

pub const LATENT_DIM: usize = 64;
pub const SPECIFIC_DIM: usize = 16;
pub const GENERAL_DIM: usize = 48;
pub const Q_HIDDEN: usize = 128;
pub const LOGVAR_LIMIT: f64 = 10.0;

const ENC_CHANNELS: [usize; 5] = [OBS_CHANNELS, 32, 32, 64, 64];
const DEC_CHANNELS: [usize; 5] = [64, 64, 32, 32, OBS_CHANNELS];
/// Spatial extent after four stride-2 stages on a 48×48 input.
const BOTTLENECK: usize = 3;
const FLAT_DIM: usize = 64 * BOTTLENECK * BOTTLENECK;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("parameter sets are misaligned at `{target}` vs `{online}`")]
    Misaligned { target: String, online: String },
    #[error("checkpoint is missing network `{0}`")]
    MissingNetwork(String),
}

type Result<T, E = ModelError> = std::result::Result<T, E>;

/// What the Q-head reads: the full latent `z`, or only the mean of the
/// domain-general factor (the frozen-representation baseline).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QInput {
    Latent,
    GeneralMean,
}

impl QInput {
    pub fn dim(self) -> usize {
        match self {
            QInput::Latent => LATENT_DIM,
            QInput::GeneralMean => GENERAL_DIM,
        }
    }
}

/// Split representation of one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub specific: Tensor,
    pub general_mu: Tensor,
    pub general_logvar: Tensor,
}

fn local<'a>(set: &'a ParamSet, name: &str) -> std::result::Result<&'a crate::numcore::Parameter, NumError> {
    set.iter()
        .find(|p| p.name().split_once('.').map(|(_, l)| l) == Some(name))
        .ok_or_else(|| NumError::UnknownParam(name.to_string()))
}

fn p<T: Real>(g: &mut Graph<T>, set: &ParamSet, name: &str) -> std::result::Result<Var, NumError> {
    Ok(g.param(local(set, name)?))
}

fn dense<T: Real>(g: &mut Graph<T>, set: &ParamSet, layer: &str, x: Var) -> std::result::Result<Var, NumError> {
    let w = p(g, set, &format!("{layer}.weight"))?;
    let b = p(g, set, &format!("{layer}.bias"))?;
    g.linear(x, w, b)
}

fn conv<T: Real>(
    g: &mut Graph<T>,
    set: &ParamSet,
    layer: &str,
    x: Var,
    stride: usize,
) -> std::result::Result<Var, NumError> {
    let k = p(g, set, &format!("{layer}.weight"))?;
    let b = p(g, set, &format!("{layer}.bias"))?;
    let y = g.conv2d(x, k, stride)?;
    g.channel_bias(y, b)
}

/// `[n, 9, 48, 48]` → `[n, 64]`: four stride-2 3×3 convolutions, flatten,
/// dense, tanh after every layer.
pub fn encode<T: Real>(g: &mut Graph<T>, enc: &ParamSet, obs: Var) -> Result<Var> {
    let n = g.value(obs).shape()[0];
    let mut h = obs;
    for i in 1..=4 {
        let y = conv(g, enc, &format!("conv{i}"), h, 2)?;
        h = g.tanh(y)?;
    }
    let flat = g.reshape(h, &[n, FLAT_DIM])?;
    let z = dense(g, enc, "fc", flat)?;
    Ok(g.tanh(z)?)
}

/// Graph handles of the projection heads.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub specific: Var,
    pub mu: Var,
    pub logvar: Var,
}

pub fn project<T: Real>(g: &mut Graph<T>, proj: &ParamSet, z: Var) -> Result<LatentVars> {
    let specific = dense(g, proj, "specific", z)?;
    let mu = dense(g, proj, "mu", z)?;
    let raw = dense(g, proj, "logvar", z)?;
    let logvar = g.clamp(raw, -LOGVAR_LIMIT, LOGVAR_LIMIT)?;
    Ok(LatentVars {
        specific,
        mu,
        logvar,
    })
}

/// `mu + exp(logvar / 2) * noise`.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var, noise: Tensor<T>) -> Result<Var> {
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let eps = g.constant(noise);
    let scaled = g.mul(std, eps)?;
    Ok(g.add(mu, scaled)?)
}

/// `([n, 16], [n, 48])` → `[n, 9, 48, 48]` in `(0, 1)`.
pub fn decode<T: Real>(g: &mut Graph<T>, dec: &ParamSet, specific: Var, general: Var) -> Result<Var> {
    let n = g.value(specific).shape()[0];
    let latent = g.concat_cols(specific, general)?;
    let h = dense(g, dec, "fc", latent)?;
    let h = g.tanh(h)?;
    let mut h = g.reshape(h, &[n, DEC_CHANNELS[0], BOTTLENECK, BOTTLENECK])?;
    for i in 1..=4 {
        let k = p(g, dec, &format!("conv{i}.weight"))?;
        let b = p(g, dec, &format!("conv{i}.bias"))?;
        let y = g.upsample_conv2d(h, k)?;
        let y = g.channel_bias(y, b)?;
        h = if i < 4 { g.tanh(y)? } else { g.sigmoid(y)? };
    }
    Ok(h)
}

/// `[n, d]` → `[n, 5]`.
pub fn q_values<T: Real>(g: &mut Graph<T>, qh: &ParamSet, input: Var) -> Result<Var> {
    let h = dense(g, qh, "fc1", input)?;
    let h = g.tanh(h)?;
    Ok(dense(g, qh, "fc2", h)?)
}

/// Parameters of all networks. `target_*` sets are EMA copies of their
/// online counterparts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub encoder: ParamSet,
    pub projection: ParamSet,
    pub decoder: ParamSet,
    pub q_head: ParamSet,
    pub target_encoder: ParamSet,
    pub target_q_head: ParamSet,
}

struct Init<'a> {
    set: ParamSet,
    prefix: &'a str,
    seed: u64,
    count: u64,
}

impl Init<'_> {
    /// Fan-in scaled uniform weights, `U(-sqrt(3/fan_in), sqrt(3/fan_in))`,
    /// and zero biases.
    fn layer(&mut self, name: &str, weight_shape: &[usize], out: usize) {
        let fan_in: usize = weight_shape[1..].iter().product();
        let bound = (3.0 / fan_in as f32).sqrt();
        let mut rng = seed::rng(seed::derive(self.seed, self.count));
        self.count += 1;
        let w = Tensor::from_fn(weight_shape, |_| rng.random_range(-bound..bound));
        self.set
            .insert(format!("{}.{name}.weight", self.prefix), w)
            .expect("unique layer names");
        self.set
            .insert(format!("{}.{name}.bias", self.prefix), Tensor::zeros(&[out]))
            .expect("unique layer names");
    }
}

impl ModelBundle {
    pub fn new(seed: u64, q_input: QInput) -> Self {
        let init = |prefix: &'static str, stream: u64| Init {
            set: ParamSet::new(),
            prefix,
            seed: seed::derive(seed, stream),
            count: 0,
        };

        let mut enc = init("encoder", 0);
        for i in 1..=4 {
            let (ci, co) = (ENC_CHANNELS[i - 1], ENC_CHANNELS[i]);
            enc.layer(&format!("conv{i}"), &[co, ci, 3, 3], co);
        }
        enc.layer("fc", &[LATENT_DIM, FLAT_DIM], LATENT_DIM);

        let mut proj = init("projection", 1);
        proj.layer("specific", &[SPECIFIC_DIM, LATENT_DIM], SPECIFIC_DIM);
        proj.layer("mu", &[GENERAL_DIM, LATENT_DIM], GENERAL_DIM);
        proj.layer("logvar", &[GENERAL_DIM, LATENT_DIM], GENERAL_DIM);

        let mut dec = init("decoder", 2);
        dec.layer("fc", &[FLAT_DIM, SPECIFIC_DIM + GENERAL_DIM], FLAT_DIM);
        for i in 1..=4 {
            let (ci, co) = (DEC_CHANNELS[i - 1], DEC_CHANNELS[i]);
            dec.layer(&format!("conv{i}"), &[co, ci, 3, 3], co);
        }

        let mut q = init("q_head", 3);
        q.layer("fc1", &[Q_HIDDEN, q_input.dim()], Q_HIDDEN);
        q.layer("fc2", &[NUM_ACTIONS, Q_HIDDEN], NUM_ACTIONS);

        let (encoder, q_head) = (enc.set, q.set);
        Self {
            target_encoder: encoder.renamed("encoder.", "target_encoder."),
            target_q_head: q_head.renamed("q_head.", "target_q_head."),
            encoder,
            projection: proj.set,
            decoder: dec.set,
            q_head,
        }
    }

    pub fn q_input(&self) -> QInput {
        match local(&self.q_head, "fc1.weight").map(|p| p.shape()[1]) {
            Ok(GENERAL_DIM) => QInput::GeneralMean,
            _ => QInput::Latent,
        }
    }

    pub fn online_sets(&self) -> [&ParamSet; 4] {
        [&self.encoder, &self.projection, &self.decoder, &self.q_head]
    }

    pub fn all_sets(&self) -> [&ParamSet; 6] {
        [
            &self.encoder,
            &self.projection,
            &self.decoder,
            &self.q_head,
            &self.target_encoder,
            &self.target_q_head,
        ]
    }

    pub fn zero_grad(&mut self) {
        for s in [
            &mut self.encoder,
            &mut self.projection,
            &mut self.decoder,
            &mut self.q_head,
        ] {
            s.zero_grad();
        }
    }

    /// Q-values `[n, 5]` for an observation batch, from the online or the
    /// target networks. The general-mean variant reads the online projection
    /// in both cases.
    pub fn q_forward<T: Real>(&self, g: &mut Graph<T>, obs: Var, target: bool) -> Result<Var> {
        let (enc, qh) = if target {
            (&self.target_encoder, &self.target_q_head)
        } else {
            (&self.encoder, &self.q_head)
        };
        let z = encode(g, enc, obs)?;
        let input = match self.q_input() {
            QInput::Latent => z,
            QInput::GeneralMean => project(g, &self.projection, z)?.mu,
        };
        q_values(g, qh, input)
    }

    /// Online Q-values of a batch, no gradient tracking.
    pub fn q_batch(&self, obs: &[&Observation]) -> Result<Tensor> {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(stack_observations(obs.iter().copied()));
        let q = self.q_forward(&mut g, x, false)?;
        Ok(g.value(q).clone())
    }

    pub fn q_of(&self, obs: &Observation) -> Result<Tensor> {
        let q = self.q_batch(&[obs])?;
        Ok(q.reshape(&[NUM_ACTIONS])?)
    }

    pub fn greedy_action(&self, obs: &Observation) -> Result<ActionId> {
        Ok(argmax_action(self.q_of(obs)?.data()))
    }

    pub fn encode_obs(&self, obs: &Observation) -> Result<Tensor> {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(stack_observations([obs]));
        let z = encode(&mut g, &self.encoder, x)?;
        Ok(g.value(z).clone().reshape(&[LATENT_DIM])?)
    }

    pub fn project_split(&self, z: &Tensor) -> Result<LatentState> {
        let mut g = Graph::<f32>::inference();
        let zv = g.constant(z.clone().reshape(&[1, LATENT_DIM])?);
        let lv = project(&mut g, &self.projection, zv)?;
        let row = |v: Var, d: usize| g.value(v).clone().reshape(&[d]);
        Ok(LatentState {
            z: z.clone().reshape(&[LATENT_DIM])?,
            specific: row(lv.specific, SPECIFIC_DIM)?,
            general_mu: row(lv.mu, GENERAL_DIM)?,
            general_logvar: row(lv.logvar, GENERAL_DIM)?,
        })
    }

    /// Domain-general means `[n, 48]` for a batch.
    pub fn general_means(&self, obs: &[&Observation]) -> Result<Tensor> {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(stack_observations(obs.iter().copied()));
        let z = encode(&mut g, &self.encoder, x)?;
        let lv = project(&mut g, &self.projection, z)?;
        Ok(g.value(lv.mu).clone())
    }

    pub fn decode_latent(&self, specific: &Tensor, general: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::inference();
        let s = g.constant(specific.clone().reshape(&[1, SPECIFIC_DIM])?);
        let gen = g.constant(general.clone().reshape(&[1, GENERAL_DIM])?);
        let img = decode(&mut g, &self.decoder, s, gen)?;
        Ok(g.value(img).clone().reshape(&[OBS_CHANNELS, 48, 48])?)
    }

    /// Soft update of both target networks toward the online ones.
    pub fn update_targets(&mut self, zeta: f32) -> Result<()> {
        ema_update(&mut self.target_encoder, &self.encoder, zeta)?;
        ema_update(&mut self.target_q_head, &self.q_head, zeta)
    }

    pub fn to_checkpoint(&self, meta: &[(&str, f32)]) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for set in self.all_sets() {
            for p in set {
                ck.entries.push((p.name().to_string(), p.value.clone()));
            }
        }
        for (k, v) in meta {
            ck.entries.push((format!("meta.{k}"), Tensor::scalar(*v)));
        }
        ck
    }

    /// Rebuilds a bundle from checkpoint entries; returns it with the
    /// `meta.*` entries.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Vec<(String, f32)>)> {
        let mut sets: [(&str, ParamSet); 6] = [
            ("encoder.", ParamSet::new()),
            ("projection.", ParamSet::new()),
            ("decoder.", ParamSet::new()),
            ("q_head.", ParamSet::new()),
            ("target_encoder.", ParamSet::new()),
            ("target_q_head.", ParamSet::new()),
        ];
        let mut meta = Vec::new();
        for (name, value) in &ck.entries {
            if let Some(key) = name.strip_prefix("meta.") {
                meta.push((key.to_string(), value.item().unwrap_or(f32::NAN)));
                continue;
            }
            let slot = sets
                .iter_mut()
                .find(|(prefix, _)| name.starts_with(prefix))
                .ok_or_else(|| NumError::UnknownParam(name.clone()))?;
            slot.1.insert(name.clone(), value.clone())?;
        }
        for (prefix, set) in &sets {
            if set.is_empty() {
                return Err(ModelError::MissingNetwork(prefix.trim_end_matches('.').to_string()));
            }
        }
        let [(_, encoder), (_, projection), (_, decoder), (_, q_head), (_, target_encoder), (_, target_q_head)] =
            sets;
        let bundle = Self {
            encoder,
            projection,
            decoder,
            q_head,
            target_encoder,
            target_q_head,
        };
        let template = ModelBundle::new(0, bundle.q_input());
        for (got, want) in bundle.all_sets().into_iter().zip(template.all_sets()) {
            check_aligned(got, want)?;
        }
        Ok((bundle, meta))
    }
}

/// Lowest-index maximum.
pub fn argmax_action(q: &[f32]) -> ActionId {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    ActionId::new(best).expect("q has one entry per action")
}

fn local_name(name: &str) -> &str {
    name.split_once('.').map_or(name, |(_, l)| l)
}

fn check_aligned(target: &ParamSet, online: &ParamSet) -> Result<()> {
    let mismatch = |t: &str, o: &str| ModelError::Misaligned {
        target: t.to_string(),
        online: o.to_string(),
    };
    if target.len() != online.len() {
        let t = target.iter().last().map_or("<empty>", |p| p.name());
        let o = online.iter().last().map_or("<empty>", |p| p.name());
        return Err(mismatch(t, o));
    }
    for (t, o) in target.iter().zip(online) {
        if local_name(t.name()) != local_name(o.name()) || t.shape() != o.shape() {
            return Err(mismatch(t.name(), o.name()));
        }
    }
    Ok(())
}

/// `target <- (1 - zeta) * target + zeta * online`, parameter by parameter.
/// Sets are aligned by position; local names and shapes must agree.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, zeta: f32) -> Result<()> {
    check_aligned(target, online)?;
    for (t, o) in target.iter_mut().zip(online) {
        for (tv, &ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *tv = (1.0 - zeta) * *tv + zeta * ov;
        }
    }
    Ok(())
}
