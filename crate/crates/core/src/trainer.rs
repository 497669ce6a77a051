//! The two-phase training protocol, its baselines, and the replay buffer.
//!
//! Phase 1 pretrains the representation on random-policy frames; phase 2 runs
//! epsilon-greedy Q-learning on the train domain. `usra` runs both with the
//! combined loss, `lusr` pretrains without the TD term and then trains only a
//! Q-head on the frozen general means, `svea` skips phase 1.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;

use crate::augment::{augment, sample_aug, AugKind};
use crate::envsim::{ActionId, DomainSpec, Observation, StriderWorld, Transition, NUM_ACTIONS};
use crate::losses::{self, LossComponents, LossError, LossWeights, PairBatch, TargetRule, UsraBatch};
use crate::models::{self, argmax_action, ModelBundle, ModelError, QInput};
use crate::numcore::{Graph, LrMap, NumError, Optimizer, ParamSet, Tensor};
use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("method `{0}` has no pretraining phase")]
    NoPretraining(Method),
    #[error("replay buffer holds {have} transitions, {want} requested")]
    Undersized { have: usize, want: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Loss(#[from] LossError),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Loss(LossError::Model(e))
    }
}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> Self {
        TrainError::Loss(LossError::from(e))
    }
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Usra,
    Lusr,
    Svea,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Usra, Method::Svea, Method::Lusr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Usra => "usra",
            Method::Lusr => "lusr",
            Method::Svea => "svea",
        }
    }

    pub fn has_pretraining(self) -> bool {
        self != Method::Svea
    }

    pub fn q_input(self) -> QInput {
        match self {
            Method::Lusr => QInput::GeneralMean,
            _ => QInput::Latent,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected usra, lusr or svea)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f32,
    pub zeta: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub kl_weight: f32,
    pub lr_base: f32,
    pub encoder_lr_divisor: u32,
    pub pretrain_frames: usize,
    pub pretrain_epochs: usize,
    pub batch_lusr: usize,
    pub batch_svea: usize,
    pub episodes: usize,
    pub episode_length: u32,
    pub replay_capacity: usize,
    pub warmup_steps: usize,
    pub update_every: usize,
    pub epsilon_start: f32,
    pub epsilon_end: f32,
    pub epsilon_fraction: f32,
    pub aug_kind: AugKind,
    pub method: Method,
    pub seed: u64,
    /// Keep the cycle losses in phase 2 (usra only).
    pub p2_cycle_loss: bool,
    /// Fill the `wall_time_s` metrics column; off keeps logs byte-stable.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            zeta: 0.01,
            beta1: 1.0,
            beta2: 1.0,
            kl_weight: 1e-3,
            lr_base: 1e-3,
            encoder_lr_divisor: 10,
            pretrain_frames: 1000,
            pretrain_epochs: 40,
            batch_lusr: 16,
            batch_svea: 128,
            episodes: 150,
            episode_length: 200,
            replay_capacity: 100_000,
            warmup_steps: 1000,
            update_every: 2,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.3,
            aug_kind: AugKind::RandConv,
            method: Method::Usra,
            seed: 0,
            p2_cycle_loss: false,
            record_wall_time: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| TrainError::Invalid {
        key: key.to_string(),
        reason: format!("cannot parse `{value}`"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(TrainError::Invalid {
            key: key.to_string(),
            reason: format!("expected true or false, got `{value}`"),
        }),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 24] = [
        "gamma",
        "zeta",
        "beta1",
        "beta2",
        "kl_weight",
        "lr_base",
        "encoder_lr_divisor",
        "pretrain_frames",
        "pretrain_epochs",
        "batch_lusr",
        "batch_svea",
        "episodes",
        "episode_length",
        "replay_capacity",
        "warmup_steps",
        "update_every",
        "epsilon_start",
        "epsilon_end",
        "epsilon_fraction",
        "aug_kind",
        "method",
        "seed",
        "p2_cycle_loss",
        "record_wall_time",
    ];

    /// Sets one field from its textual form. Range checks happen in
    /// [`TrainConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "gamma" => self.gamma = parse(key, value)?,
            "zeta" => self.zeta = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "kl_weight" => self.kl_weight = parse(key, value)?,
            "lr_base" => self.lr_base = parse(key, value)?,
            "encoder_lr_divisor" => self.encoder_lr_divisor = parse(key, value)?,
            "pretrain_frames" => self.pretrain_frames = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "batch_lusr" => self.batch_lusr = parse(key, value)?,
            "batch_svea" => self.batch_svea = parse(key, value)?,
            "episodes" => self.episodes = parse(key, value)?,
            "episode_length" => self.episode_length = parse(key, value)?,
            "replay_capacity" => self.replay_capacity = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "update_every" => self.update_every = parse(key, value)?,
            "epsilon_start" => self.epsilon_start = parse(key, value)?,
            "epsilon_end" => self.epsilon_end = parse(key, value)?,
            "epsilon_fraction" => self.epsilon_fraction = parse(key, value)?,
            "aug_kind" => {
                self.aug_kind = value.parse().map_err(|e: crate::augment::UnknownAug| TrainError::Invalid {
                    key: key.into(),
                    reason: e.to_string(),
                })?
            }
            "method" => {
                self.method = value.parse().map_err(|reason| TrainError::Invalid {
                    key: key.into(),
                    reason,
                })?
            }
            "seed" => self.seed = parse(key, value)?,
            "p2_cycle_loss" => self.p2_cycle_loss = parse_bool(key, value)?,
            "record_wall_time" => self.record_wall_time = parse_bool(key, value)?,
            _ => return Err(TrainError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every field as `(key, value)` in [`TrainConfig::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.gamma.to_string(),
            self.zeta.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.kl_weight.to_string(),
            self.lr_base.to_string(),
            self.encoder_lr_divisor.to_string(),
            self.pretrain_frames.to_string(),
            self.pretrain_epochs.to_string(),
            self.batch_lusr.to_string(),
            self.batch_svea.to_string(),
            self.episodes.to_string(),
            self.episode_length.to_string(),
            self.replay_capacity.to_string(),
            self.warmup_steps.to_string(),
            self.update_every.to_string(),
            self.epsilon_start.to_string(),
            self.epsilon_end.to_string(),
            self.epsilon_fraction.to_string(),
            self.aug_kind.to_string(),
            self.method.to_string(),
            self.seed.to_string(),
            self.p2_cycle_loss.to_string(),
            self.record_wall_time.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(TrainError::Invalid {
                key: key.to_string(),
                reason: reason.to_string(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        for (key, v) in [
            ("zeta", self.zeta),
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("epsilon_fraction", self.epsilon_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(key, "must lie in [0, 1]");
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("kl_weight", self.kl_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be non-negative");
            }
        }
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return bad("lr_base", "must be positive");
        }
        if !matches!(self.encoder_lr_divisor, 1 | 10) {
            return bad("encoder_lr_divisor", "must be 1 or 10");
        }
        for (key, v) in [
            ("pretrain_frames", self.pretrain_frames),
            ("pretrain_epochs", self.pretrain_epochs),
            ("batch_lusr", self.batch_lusr),
            ("batch_svea", self.batch_svea),
            ("episodes", self.episodes),
            ("episode_length", self.episode_length as usize),
            ("replay_capacity", self.replay_capacity),
            ("update_every", self.update_every),
        ] {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if self.pretrain_frames < 2 {
            return bad("pretrain_frames", "must be at least 2");
        }
        if self.batch_svea > self.replay_capacity {
            return bad("batch_svea", "exceeds replay_capacity");
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<LossWeights> {
        Ok(LossWeights::new(self.beta1, self.beta2, self.kl_weight)?)
    }

    pub fn total_steps(&self) -> usize {
        self.episodes * self.episode_length as usize
    }

    /// Learning rates for phase 2. Differential mode gives every `encoder.`
    /// parameter `lr_base / encoder_lr_divisor`.
    pub fn phase2_lr(&self) -> LrMap {
        let base = LrMap::uniform(self.lr_base);
        match self.method {
            Method::Usra => base.with("encoder.", self.lr_base / self.encoder_lr_divisor as f32),
            _ => base,
        }
    }
}

/// Linear decay from `start` to `end` over the first `fraction` of
/// `total_steps`, constant afterwards.
pub fn epsilon_at(step: usize, total_steps: usize, start: f32, end: f32, fraction: f32) -> f32 {
    let horizon = fraction * total_steps as f32;
    if horizon <= 0.0 || step as f32 >= horizon {
        return end;
    }
    start + (end - start) * (step as f32 / horizon)
}

/// The exploratory branch of epsilon-greedy: `Some(uniform action)` with
/// probability `epsilon`, else `None`.
pub fn explore(epsilon: f32, seed: u64) -> Option<ActionId> {
    let mut rng = seed::rng(seed);
    if rng.random::<f32>() < epsilon {
        ActionId::new(rng.random_range(0..NUM_ACTIONS))
    } else {
        None
    }
}

/// Uniform action with probability `epsilon`, else the lowest-index argmax.
pub fn epsilon_greedy(q: &Tensor, epsilon: f32, seed: u64) -> ActionId {
    explore(epsilon, seed).unwrap_or_else(|| argmax_action(q.data()))
}

/// FIFO transition store with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `batch` distinct transitions, uniformly at random.
    pub fn sample(&self, batch: usize, seed: u64) -> Result<Vec<&Transition>> {
        if batch > self.items.len() {
            return Err(TrainError::Undersized {
                have: self.items.len(),
                want: batch,
            });
        }
        let mut rng = seed::rng(seed);
        Ok(index::sample(&mut rng, self.items.len(), batch)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

/// Random-policy frames from the train domain.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `transitions[i].obs` is frame `i`.
    pub transitions: Vec<Transition>,
    pub episode: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn obs(&self, i: usize) -> &Observation {
        &self.transitions[i].obs
    }

    /// Index range of every episode.
    fn episodes(&self) -> Vec<std::ops::Range<usize>> {
        let mut out: Vec<std::ops::Range<usize>> = Vec::new();
        for (i, &e) in self.episode.iter().enumerate() {
            match out.last_mut() {
                Some(r) if self.episode[r.start] == e => r.end = i + 1,
                _ => out.push(i..i + 1),
            }
        }
        out
    }
}

/// `n_frames` uniform-random steps on the train domain; a new episode with a
/// fresh random start begins whenever one ends.
pub fn collect_random(spec: &DomainSpec, n_frames: usize, episode_length: u32, seed: u64) -> Dataset {
    let mut rng = seed::rng(seed::derive(seed, 0x636f_6c6c));
    let mut transitions = Vec::with_capacity(n_frames);
    let mut episode = Vec::with_capacity(n_frames);
    let mut ep = 0u32;
    let mut world = StriderWorld::with_episode_length(spec.clone(), seed::derive(seed, 0), episode_length);
    while transitions.len() < n_frames {
        let obs = world.observation().clone();
        let action = ActionId::new(rng.random_range(0..NUM_ACTIONS)).expect("action index");
        let step = world.step(action).expect("episode not finished");
        transitions.push(Transition {
            obs,
            action,
            reward: step.reward,
            next_obs: step.obs,
            done: step.done,
        });
        episode.push(ep);
        if step.done {
            ep += 1;
            world.reset(seed::derive(seed, ep as u64));
        }
    }
    Dataset { transitions, episode }
}

/// Mean loss components of one pretraining epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossComponents,
}

pub const PRETRAIN_CSV_HEADER: &str = "epoch,loss_forward,loss_reverse,loss_svea,loss_total";

pub fn pretrain_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{PRETRAIN_CSV_HEADER}\n");
    for e in log {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.loss.forward, e.loss.reverse, e.loss.svea, e.loss.total
        ));
    }
    s
}

/// Progress notifications; the trainer itself never prints.
pub enum TrainEvent<'a> {
    Epoch(&'a EpochLog),
    Episode(&'a MetricsRow),
}

/// Same-episode pairs for the forward cycle. Half of the pairs receive one
/// shared augmentation, standing in for an unseen domain.
fn forward_pairs(data: &Dataset, episodes: &[std::ops::Range<usize>], n: usize, aug: AugKind, seed: u64) -> PairBatch {
    let mut rng = seed::rng(seed);
    let mut b = PairBatch::default();
    for _ in 0..n {
        let i = rng.random_range(0..data.len());
        let ep = episodes
            .iter()
            .find(|r| r.contains(&i))
            .expect("every frame belongs to an episode");
        let mut j = rng.random_range(ep.clone());
        if j == i && ep.len() > 1 {
            j = if j + 1 < ep.end { j + 1 } else { ep.start };
        }
        let (mut a, mut c) = (data.obs(i).clone(), data.obs(j).clone());
        if rng.random::<bool>() {
            let op = sample_aug(aug, rng.random());
            a = op.apply(&a);
            c = op.apply(&c);
        }
        b.first.push(a);
        b.second.push(c);
    }
    b
}

/// `(s, aug(s))` pairs for the reverse cycle.
fn reverse_pairs<'a>(obs: impl Iterator<Item = &'a Observation>, aug: AugKind, seed: u64) -> PairBatch {
    let mut b = PairBatch::default();
    for (k, o) in obs.enumerate() {
        b.second.push(augment(aug, o, seed::derive(seed, k as u64)));
        b.first.push(o.clone());
    }
    b
}

fn step_sets(
    opt: &mut Optimizer,
    grads: &crate::numcore::Gradients<f32>,
    sets: &mut [&mut ParamSet],
    lr: &LrMap,
) -> Result<()> {
    for set in sets.iter_mut() {
        set.zero_grad();
        grads.apply_to(set);
        opt.step(set, lr)?;
    }
    Ok(())
}

/// Phase 1: minimizes the combined loss on the random-policy dataset
/// (`lusr` drops the TD term). The TD term bootstraps with the random
/// policy's value, the policy that generated the data, read from the target
/// networks as they were when the phase started. They stay frozen for the
/// whole phase and are synced to the online networks at its end.
pub fn pretrain_phase1(
    bundle: &mut ModelBundle,
    data: &Dataset,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<Vec<EpochLog>> {
    if !cfg.method.has_pretraining() {
        return Err(TrainError::NoPretraining(cfg.method));
    }
    if data.len() < 2 {
        return Err(TrainError::EmptyDataset);
    }
    let weights = match cfg.method {
        Method::Lusr => LossWeights::new(cfg.beta1, 0.0, cfg.kl_weight)?,
        _ => cfg.weights()?,
    };
    let episodes = data.episodes();
    let steps_per_epoch = data.len().div_ceil(2 * cfg.batch_lusr);
    let batch_svea = cfg.batch_svea.min(data.len());
    let lr = LrMap::uniform(cfg.lr_base);
    let mut opt = Optimizer::adam();
    let mut log = Vec::with_capacity(cfg.pretrain_epochs);
    let base = seed::derive(cfg.seed, 1);

    for epoch in 1..=cfg.pretrain_epochs {
        let mut acc = LossComponents::default();
        for s in 0..steps_per_epoch {
            let step_seed = seed::derive(base, (epoch * steps_per_epoch + s) as u64);
            let mut rng = seed::rng(step_seed);
            let fp = forward_pairs(data, &episodes, cfg.batch_lusr, cfg.aug_kind, rng.random());
            let picks: Vec<usize> = (0..cfg.batch_lusr).map(|_| rng.random_range(0..data.len())).collect();
            let rp = reverse_pairs(picks.iter().map(|&k| data.obs(k)), cfg.aug_kind, rng.random());
            let rd = losses::reverse_decodes(bundle, &rp, rng.random())?;

            let trans: Vec<&Transition> = if weights.beta2() > 0.0 {
                index::sample(&mut rng, data.len(), batch_svea)
                    .into_iter()
                    .map(|i| &data.transitions[i])
                    .collect()
            } else {
                Vec::new()
            };
            let targets = if trans.is_empty() {
                Vec::new()
            } else {
                losses::td_target(bundle, &trans, cfg.gamma, TargetRule::Mean)?
            };
            let batch = UsraBatch {
                forward_pairs: &fp,
                reverse: &rd,
                transitions: &trans,
                targets: &targets,
                aug: Some(cfg.aug_kind),
            };
            let mut g = Graph::<f32>::new();
            let (total, comps) = losses::usra_loss(&mut g, bundle, &batch, &weights, rng.random())?;
            let grads = g.backward(total)?;
            drop(g);
            let ModelBundle {
                encoder,
                projection,
                decoder,
                q_head,
                ..
            } = bundle;
            let mut sets: Vec<&mut ParamSet> = vec![encoder, projection, decoder];
            if weights.beta2() > 0.0 {
                sets.push(q_head);
            }
            step_sets(&mut opt, &grads, &mut sets, &lr)?;

            acc.forward += comps.forward;
            acc.reverse += comps.reverse;
            acc.svea += comps.svea;
            acc.total += comps.total;
        }
        let n = steps_per_epoch as f64;
        let entry = EpochLog {
            epoch,
            loss: LossComponents {
                forward: acc.forward / n,
                reverse: acc.reverse / n,
                svea: acc.svea / n,
                total: acc.total / n,
            },
        };
        on_event(TrainEvent::Epoch(&entry));
        log.push(entry);
    }
    bundle.update_targets(1.0)?;
    Ok(log)
}

/// One line of the phase-2 metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub episode: usize,
    pub phase: String,
    pub train_return: f64,
    pub loss_forward: f64,
    pub loss_reverse: f64,
    pub loss_svea: f64,
    pub epsilon: f32,
    pub env_steps: usize,
    pub wall_time_s: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "episode,phase,train_return,loss_forward,loss_reverse,loss_svea,epsilon,env_steps,wall_time_s";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.3}\n",
            r.episode,
            r.phase,
            r.train_return,
            r.loss_forward,
            r.loss_reverse,
            r.loss_svea,
            r.epsilon,
            r.env_steps,
            r.wall_time_s
        ));
    }
    s
}

/// Parses a metrics log. Errors name the 1-based line.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_CSV_HEADER => {}
        Some(h) => return Err(format!("line 1: unexpected header `{h}`")),
        None => return Err("empty file".into()),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(format!("line {lineno}: expected 9 fields, found {}", f.len()));
        }
        let num = |k: usize| -> Result<f64, String> {
            f[k].trim()
                .parse::<f64>()
                .map_err(|_| format!("line {lineno}: bad number `{}`", f[k]))
        };
        rows.push(MetricsRow {
            episode: num(0)? as usize,
            phase: f[1].trim().to_string(),
            train_return: num(2)?,
            loss_forward: num(3)?,
            loss_reverse: num(4)?,
            loss_svea: num(5)?,
            epsilon: num(6)? as f32,
            env_steps: num(7)? as usize,
            wall_time_s: num(8)?,
        });
    }
    Ok(rows)
}

/// Phase 2: epsilon-greedy Q-learning on the train domain. Actions are always
/// chosen from clean frames. After warmup, every `update_every` steps one
/// minibatch update runs, followed by the EMA target update.
pub fn finetune_phase2(
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<Vec<MetricsRow>> {
    let started = Instant::now();
    let total = cfg.total_steps();
    let lr = cfg.phase2_lr();
    let mut opt = Optimizer::adam();
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let weights = cfg.weights()?;
    let base = seed::derive(cfg.seed, 2);
    let mut world = StriderWorld::with_episode_length(DomainSpec::train(), 0, cfg.episode_length);
    let mut rows = Vec::with_capacity(cfg.episodes);
    let mut env_steps = 0usize;
    let mut epsilon = cfg.epsilon_start;

    for episode in 1..=cfg.episodes {
        world.reset(seed::derive(base, episode as u64));
        let mut ret = 0.0f64;
        let mut acc = LossComponents::default();
        let mut updates = 0usize;
        while !world.is_done() {
            epsilon = epsilon_at(env_steps, total, cfg.epsilon_start, cfg.epsilon_end, cfg.epsilon_fraction);
            let obs = world.observation().clone();
            let action_seed = seed::derive(base, (1 << 40) + env_steps as u64);
            let action = match explore(epsilon, action_seed) {
                Some(a) => a,
                None => bundle.greedy_action(&obs)?,
            };
            let step = world.step(action).expect("episode not finished");
            ret += step.reward as f64;
            replay.push(Transition {
                obs,
                action,
                reward: step.reward,
                next_obs: step.obs,
                done: step.done,
            });
            env_steps += 1;

            if env_steps >= cfg.warmup_steps && env_steps % cfg.update_every == 0 && replay.len() >= cfg.batch_svea {
                let c = update_step(bundle, &replay, cfg, &weights, &lr, &mut opt, seed::derive(base, (2 << 40) + env_steps as u64))?;
                acc.forward += c.forward;
                acc.reverse += c.reverse;
                acc.svea += c.svea;
                updates += 1;
            }
        }
        let n = updates.max(1) as f64;
        let row = MetricsRow {
            episode,
            phase: "p2".into(),
            train_return: ret,
            loss_forward: acc.forward / n,
            loss_reverse: acc.reverse / n,
            loss_svea: acc.svea / n,
            epsilon,
            env_steps,
            wall_time_s: if cfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_event(TrainEvent::Episode(&row));
        rows.push(row);
    }
    Ok(rows)
}

fn update_step(
    bundle: &mut ModelBundle,
    replay: &ReplayBuffer,
    cfg: &TrainConfig,
    weights: &LossWeights,
    lr: &LrMap,
    opt: &mut Optimizer,
    step_seed: u64,
) -> Result<LossComponents> {
    let mut rng = seed::rng(step_seed);
    let batch = replay.sample(cfg.batch_svea, rng.random())?;
    let targets = losses::td_target(bundle, &batch, cfg.gamma, TargetRule::Max)?;

    let comps = match cfg.method {
        Method::Lusr => {
            // frozen representation: only the Q-head sees gradients
            let means = bundle.general_means(&batch.iter().map(|t| &t.obs).collect::<Vec<_>>())?;
            let mut g = Graph::<f32>::new();
            let x = g.constant(means);
            let q = models::q_values(&mut g, &bundle.q_head, x)?;
            let actions: Vec<usize> = batch.iter().map(|t| t.action.index()).collect();
            let pred = g.gather(q, &actions)?;
            let t = g.constant(Tensor::new(&[targets.len()], targets)?);
            let d = g.sub(pred, t)?;
            let sq = g.square(d)?;
            let loss = g.mean(sq)?;
            let value = g.value(loss)[0] as f64;
            let grads = g.backward(loss)?;
            drop(g);
            step_sets(opt, &grads, &mut [&mut bundle.q_head], lr)?;
            LossComponents {
                svea: value,
                total: value,
                ..Default::default()
            }
        }
        Method::Svea | Method::Usra => {
            let mut g = Graph::<f32>::new();
            let cycle = cfg.p2_cycle_loss && cfg.method == Method::Usra;
            let (loss, comps) = if cycle {
                let fp = PairBatch {
                    first: batch.iter().take(cfg.batch_lusr).map(|t| t.obs.clone()).collect(),
                    second: batch.iter().take(cfg.batch_lusr).map(|t| t.next_obs.clone()).collect(),
                };
                let rp = reverse_pairs(batch.iter().take(cfg.batch_lusr).map(|t| &t.obs), cfg.aug_kind, rng.random());
                let rd = losses::reverse_decodes(bundle, &rp, rng.random())?;
                let ub = UsraBatch {
                    forward_pairs: &fp,
                    reverse: &rd,
                    transitions: &batch,
                    targets: &targets,
                    aug: Some(cfg.aug_kind),
                };
                losses::usra_loss(&mut g, bundle, &ub, weights, rng.random())?
            } else {
                let l = losses::svea_loss(&mut g, bundle, &batch, &targets, Some(cfg.aug_kind), rng.random())?;
                let v = g.value(l)[0] as f64;
                (
                    l,
                    LossComponents {
                        svea: v,
                        total: v,
                        ..Default::default()
                    },
                )
            };
            let grads = g.backward(loss)?;
            drop(g);
            let ModelBundle {
                encoder,
                projection,
                decoder,
                q_head,
                ..
            } = bundle;
            let mut sets: Vec<&mut ParamSet> = vec![encoder, q_head];
            if cycle {
                sets.push(projection);
                sets.push(decoder);
            }
            step_sets(opt, &grads, &mut sets, lr)?;
            comps
        }
    };
    bundle.update_targets(cfg.zeta)?;
    Ok(comps)
}

/// Everything a full run produces.
pub struct RunOutput {
    pub bundle: ModelBundle,
    pub pretrain_log: Vec<EpochLog>,
    pub metrics: Vec<MetricsRow>,
}

/// Fresh bundle for a method, seeded from the config.
pub fn init_bundle(cfg: &TrainConfig) -> ModelBundle {
    ModelBundle::new(seed::derive(cfg.seed, 0), cfg.method.q_input())
}

/// Collects data and runs phase 1 on a fresh bundle.
pub fn run_pretrain(cfg: &TrainConfig, on_event: &mut dyn FnMut(TrainEvent<'_>)) -> Result<(ModelBundle, Vec<EpochLog>)> {
    cfg.validate()?;
    let data = collect_random(&DomainSpec::train(), cfg.pretrain_frames, cfg.episode_length, seed::derive(cfg.seed, 3));
    let mut bundle = init_bundle(cfg);
    let log = pretrain_phase1(&mut bundle, &data, cfg, on_event)?;
    Ok((bundle, log))
}

/// Both phases in order (phase 2 only for `svea`).
pub fn run(cfg: &TrainConfig, on_event: &mut dyn FnMut(TrainEvent<'_>)) -> Result<RunOutput> {
    cfg.validate()?;
    let (mut bundle, pretrain_log) = if cfg.method.has_pretraining() {
        run_pretrain(cfg, on_event)?
    } else {
        (init_bundle(cfg), Vec::new())
    };
    let metrics = finetune_phase2(&mut bundle, cfg, on_event)?;
    Ok(RunOutput {
        bundle,
        pretrain_log,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chi_square(counts: &[usize], expected: f64) -> f64 {
        counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let mut c = TrainConfig::default();
        c.set("gamma", "1.5").unwrap();
        assert!(matches!(c.validate(), Err(TrainError::Invalid { key, .. }) if key == "gamma"));
        assert!(matches!(c.set("gama", "0.5"), Err(TrainError::UnknownKey(_))));
        let mut c = TrainConfig::default();
        c.set("encoder_lr_divisor", "3").unwrap();
        assert!(c.validate().is_err());
        assert!(c.set("method", "ppo").is_err());
        assert!(c.set("aug_kind", "cutout").is_err());
    }

    #[test]
    fn pairs_round_trip_through_set() {
        let mut c = TrainConfig {
            method: Method::Lusr,
            aug_kind: AugKind::Jitter,
            seed: 17,
            ..TrainConfig::default()
        };
        c.kl_weight = 0.25;
        let mut back = TrainConfig::default();
        for (k, v) in c.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn epsilon_schedule() {
        let c = TrainConfig::default();
        let total = c.total_steps();
        let e = |s| epsilon_at(s, total, 1.0, 0.05, 0.3);
        assert_eq!(e(0), 1.0);
        assert_eq!(e(9000), 0.05);
        assert_eq!(e(total), 0.05);
        assert!((e(4500) - 0.525).abs() < 1e-6);
    }

    #[test]
    fn greedy_tie_break() {
        let q = Tensor::new(&[5], vec![0.0, 3.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(epsilon_greedy(&q, 0.0, 1).index(), 1);
        assert_eq!(epsilon_greedy(&Tensor::zeros(&[5]), 0.0, 1).index(), 0);
    }

    #[test]
    fn uniform_exploration() {
        let q = Tensor::zeros(&[5]);
        let mut counts = [0usize; 5];
        for s in 0..10_000 {
            counts[epsilon_greedy(&q, 1.0, s).index()] += 1;
        }
        let sigma = (10_000.0f64 * 0.2 * 0.8).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - 2000.0).abs() <= 3.0 * sigma), "{counts:?}");
        // 4 degrees of freedom, 99.9% quantile
        assert!(chi_square(&counts, 2000.0) < 18.47);
    }

    fn dummy(tag: f32) -> Transition {
        let obs = Observation::repeated(Tensor::full(&[3, 48, 48], tag));
        Transition {
            next_obs: obs.clone(),
            obs,
            action: ActionId::new(0).unwrap(),
            reward: tag,
            done: false,
        }
    }

    #[test]
    fn replay_fifo_and_sampling() {
        let mut r = ReplayBuffer::new(3);
        for i in 0..4 {
            r.push(dummy(i as f32));
        }
        assert_eq!(r.len(), 3);
        assert_eq!(r.get(0).unwrap().reward, 1.0);
        let mut all: Vec<f32> = r.sample(3, 5).unwrap().iter().map(|t| t.reward).collect();
        all.sort_by(f32::total_cmp);
        assert_eq!(all, vec![1.0, 2.0, 3.0]);
        assert!(matches!(r.sample(4, 0), Err(TrainError::Undersized { have: 3, want: 4 })));
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut r = ReplayBuffer::new(10);
        for i in 0..10 {
            r.push(dummy(i as f32));
        }
        let mut counts = [0usize; 10];
        for s in 0..10_000 {
            counts[r.sample(1, s).unwrap()[0].reward as usize] += 1;
        }
        let sigma = (10_000.0f64 * 0.1 * 0.9).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - 1000.0).abs() <= 3.0 * sigma), "{counts:?}");
    }

    #[test]
    fn random_collection() {
        let d = collect_random(&DomainSpec::train(), 1000, 200, 4);
        assert_eq!(d.len(), 1000);
        assert_eq!(d.episodes().len(), 5);
        let again = collect_random(&DomainSpec::train(), 1000, 200, 4);
        assert!(d
            .transitions
            .iter()
            .zip(&again.transitions)
            .all(|(a, b)| a.obs == b.obs && a.action == b.action));

        let big = collect_random(&DomainSpec::train(), 10_000, 200, 9);
        let mut counts = [0usize; 5];
        for t in &big.transitions {
            counts[t.action.index()] += 1;
        }
        let sigma = (10_000.0f64 * 0.2 * 0.8).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - 2000.0).abs() <= 3.0 * sigma), "{counts:?}");
    }

    #[test]
    fn forward_pairs_share_an_episode() {
        let d = collect_random(&DomainSpec::train(), 60, 20, 1);
        let eps = d.episodes();
        let b = forward_pairs(&d, &eps, 32, AugKind::RandConv, 3);
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn svea_has_no_pretraining() {
        let cfg = TrainConfig {
            method: Method::Svea,
            ..TrainConfig::default()
        };
        let d = collect_random(&DomainSpec::train(), 10, 5, 1);
        let mut b = init_bundle(&cfg);
        assert!(matches!(
            pretrain_phase1(&mut b, &d, &cfg, &mut |_| {}),
            Err(TrainError::NoPretraining(Method::Svea))
        ));
    }

    #[test]
    fn differential_learning_rates() {
        let cfg = TrainConfig::default();
        let lr = cfg.phase2_lr();
        let b = init_bundle(&cfg);
        for p in b.online_sets().into_iter().flatten() {
            let want = if p.name().starts_with("encoder.") { cfg.lr_base / 10.0 } else { cfg.lr_base };
            assert_eq!(lr.resolve(p.name()).unwrap(), want, "{}", p.name());
        }
        let stat = TrainConfig {
            encoder_lr_divisor: 1,
            ..cfg
        };
        assert_eq!(stat.phase2_lr().resolve("encoder.fc.weight").unwrap(), 1e-3);
    }

    fn tiny(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            pretrain_frames: 40,
            pretrain_epochs: 2,
            batch_lusr: 4,
            batch_svea: 8,
            episodes: 3,
            episode_length: 10,
            warmup_steps: 10,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lusr_freezes_the_representation() {
        let cfg = tiny(Method::Lusr);
        let (mut b, log) = run_pretrain(&cfg, &mut |_| {}).unwrap();
        assert!(log.iter().all(|e| e.loss.svea == 0.0));
        let before = b.clone();
        let rows = finetune_phase2(&mut b, &cfg, &mut |_| {}).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(b.encoder, before.encoder);
        assert_eq!(b.projection, before.projection);
        assert_eq!(b.decoder, before.decoder);
        assert_ne!(b.q_head, before.q_head);
    }

    #[test]
    fn runs_are_deterministic() {
        for method in [Method::Usra, Method::Svea] {
            let cfg = tiny(method);
            let a = run(&cfg, &mut |_| {}).unwrap();
            let b = run(&cfg, &mut |_| {}).unwrap();
            assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
            assert_eq!(pretrain_csv(&a.pretrain_log), pretrain_csv(&b.pretrain_log));
            assert_eq!(a.bundle, b.bundle);
            assert_eq!(a.metrics.len(), cfg.episodes);
            assert_eq!(a.pretrain_log.is_empty(), method == Method::Svea);
        }
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![MetricsRow {
            episode: 1,
            phase: "p2".into(),
            train_return: -3.5,
            loss_forward: 0.0,
            loss_reverse: 0.0,
            loss_svea: 0.125,
            epsilon: 0.5,
            env_steps: 200,
            wall_time_s: 0.0,
        }];
        let text = metrics_csv(&rows);
        assert!(text.starts_with(METRICS_CSV_HEADER));
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        assert!(parse_metrics_csv("episode,foo\n").is_err());
        assert!(parse_metrics_csv(&format!("{METRICS_CSV_HEADER}\n1,p2,x,0,0,0,0,0,0\n"))
            .unwrap_err()
            .contains("line 2"));
    }
}
