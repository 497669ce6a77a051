//! StriderWorld: a deterministic pixel-control task with one agent pushed
//! along a wrapping track. Reward is the forward velocity; the background
//! scrolls with the agent's position so velocity is visible across stacked
//! frames. Five domain variants change colors or overlay animated patterns
//! while leaving the dynamics untouched.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::color::{hsv_to_rgb, Rgb};
use crate::numcore::Tensor;
use crate::seed;

pub const FRAME_SIZE: usize = 48;
pub const FRAME_CHANNELS: usize = 3;
pub const STACK: usize = 3;
pub const OBS_CHANNELS: usize = FRAME_CHANNELS * STACK;
pub const FRAME_LEN: usize = FRAME_CHANNELS * FRAME_SIZE * FRAME_SIZE;
pub const OBS_LEN: usize = OBS_CHANNELS * FRAME_SIZE * FRAME_SIZE;
pub const EPISODE_LENGTH: u32 = 200;
pub const NUM_ACTIONS: usize = 5;

const FORCES: [f32; NUM_ACTIONS] = [-1.0, -0.5, 0.0, 0.5, 1.0];
const FRICTION: f32 = 0.95;
const FORCE_GAIN: f32 = 0.1;
const POSITION_GAIN: f32 = 0.05;

const PLATFORM_TOP: usize = 36;
const AGENT_ROWS: std::ops::RangeInclusive<usize> = 28..=35;
const AGENT_COLS: std::ops::RangeInclusive<usize> = 21..=26;
const MARKER_ROW: usize = 27;
const MARKER_COL: i32 = 23;
const STRIPE_PERIOD: i64 = 12;
const SCROLL_PX_PER_UNIT: f32 = 200.0;

pub const CANONICAL_BACKGROUND: Rgb = [0.2, 0.3, 0.6];
pub const CANONICAL_PLATFORM: Rgb = [0.5, 0.5, 0.5];
pub const CANONICAL_AGENT: Rgb = [0.9, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvError {
    #[error("episode finished at step {0}; reset before stepping")]
    EpisodeDone(u32),
    #[error("unknown domain variant `{0}`")]
    UnknownVariant(String),
    #[error("observation tensor has shape {0:?}, expected [9, 48, 48]")]
    BadObservation(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysState {
    /// Position on the wrapping track, in `[0, 1)`.
    pub x: f32,
    /// Velocity, in `[-1, 1]`.
    pub v: f32,
    pub t: u32,
}

/// One of five discrete force levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionId(u8);

impl ActionId {
    pub const ALL: [ActionId; NUM_ACTIONS] =
        [ActionId(0), ActionId(1), ActionId(2), ActionId(3), ActionId(4)];

    pub fn new(index: usize) -> Option<Self> {
        (index < NUM_ACTIONS).then_some(ActionId(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn force(self) -> f32 {
        FORCES[self.index()]
    }

    pub fn from_force(f: f32) -> Option<Self> {
        FORCES.iter().position(|&x| x == f).map(|i| ActionId(i as u8))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Train,
    ColorEasy,
    ColorHard,
    VideoEasy,
    VideoHard,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Train,
        Variant::ColorEasy,
        Variant::ColorHard,
        Variant::VideoEasy,
        Variant::VideoHard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Train => "train",
            Variant::ColorEasy => "color_easy",
            Variant::ColorHard => "color_hard",
            Variant::VideoEasy => "video_easy",
            Variant::VideoHard => "video_hard",
        }
    }

    fn is_video(self) -> bool {
        matches!(self, Variant::VideoEasy | Variant::VideoHard)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, EnvError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| EnvError::UnknownVariant(s.to_string()))
    }
}

/// Visual parameters of one domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainSpec {
    pub variant: Variant,
    pub background_color: Rgb,
    pub platform_color: Rgb,
    pub agent_color: Rgb,
    pub pattern_seed: u64,
    /// Hue cycles per step of the animated pattern (video variants).
    pub pattern_speed: f32,
}

impl DomainSpec {
    pub fn train() -> Self {
        Self {
            variant: Variant::Train,
            background_color: CANONICAL_BACKGROUND,
            platform_color: CANONICAL_PLATFORM,
            agent_color: CANONICAL_AGENT,
            pattern_seed: 0,
            pattern_speed: 0.0,
        }
    }

    fn pattern(&self, c: usize, r: usize, t: u32) -> Rgb {
        let h0 = seed::unit(self.pattern_seed);
        let hue = h0 + self.pattern_speed * t as f32 + 0.02 * c as f32 + 0.03 * r as f32;
        hsv_to_rgb(hue.fract(), 0.6, 0.9)
    }
}

fn sample_color(rng: &mut impl Rng) -> Rgb {
    let hue = rng.random::<f32>();
    let value = rng.random_range(0.5f32..=1.0);
    hsv_to_rgb(hue, 0.6, value)
}

pub fn make_domain(variant: Variant, seed: u64) -> DomainSpec {
    let mut spec = DomainSpec {
        variant,
        ..DomainSpec::train()
    };
    let mut rng = seed::rng(seed::derive(seed, 0x646f_6d61_696e + variant as u64));
    match variant {
        Variant::Train => {}
        Variant::ColorEasy => {
            spec.background_color = sample_color(&mut rng);
            spec.platform_color = sample_color(&mut rng);
        }
        Variant::ColorHard => {
            spec.background_color = sample_color(&mut rng);
            spec.platform_color = sample_color(&mut rng);
            spec.agent_color = sample_color(&mut rng);
        }
        Variant::VideoEasy | Variant::VideoHard => {
            spec.pattern_seed = rng.random();
            spec.pattern_speed = rng.random_range(0.01f32..0.05);
        }
    }
    spec
}

/// Renders one RGB frame `[3, 48, 48]`. Pure in `(state, spec)`.
pub fn render(state: &PhysState, spec: &DomainSpec) -> Tensor {
    let n = FRAME_SIZE;
    let mut img = vec![0.0f32; FRAME_LEN];
    let mut put = |r: usize, c: usize, rgb: Rgb| {
        for (ch, &val) in rgb.iter().enumerate() {
            img[(ch * n + r) * n + c] = val;
        }
    };
    let offset = (state.x * SCROLL_PX_PER_UNIT).round() as i64;
    for r in 0..n {
        for c in 0..n {
            let rgb = if r < PLATFORM_TOP {
                let base = if spec.variant.is_video() {
                    spec.pattern(c, r, state.t)
                } else {
                    spec.background_color
                };
                let stripe = if (c as i64 + offset).rem_euclid(STRIPE_PERIOD) < STRIPE_PERIOD / 2 {
                    1.0
                } else {
                    0.8
                };
                base.map(|x| x * stripe)
            } else if spec.variant == Variant::VideoHard {
                spec.pattern(c, r, state.t)
            } else {
                spec.platform_color
            };
            put(r, c, rgb);
        }
    }
    for r in AGENT_ROWS {
        for c in AGENT_COLS {
            put(r, c, spec.agent_color);
        }
    }
    let marker = (MARKER_COL + (2.0 * state.v).round() as i32) as usize;
    for r in MARKER_ROW..MARKER_ROW + 2 {
        for c in marker..marker + 2 {
            put(r, c, spec.agent_color);
        }
    }
    Tensor::new(&[FRAME_CHANNELS, n, n], img).expect("frame shape")
}

/// Stack of the three most recent frames, oldest first. Frames are shared
/// between consecutive observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    frames: [Arc<Tensor>; STACK],
}

impl Observation {
    pub fn repeated(frame: Tensor) -> Self {
        let f = Arc::new(frame);
        Self {
            frames: [f.clone(), f.clone(), f],
        }
    }

    /// Drops the oldest frame and appends `frame` as the newest.
    pub fn pushed(&self, frame: Tensor) -> Self {
        let [_, b, c] = &self.frames;
        Self {
            frames: [b.clone(), c.clone(), Arc::new(frame)],
        }
    }

    pub fn frames(&self) -> &[Arc<Tensor>; STACK] {
        &self.frames
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, EnvError> {
        if t.shape() != [OBS_CHANNELS, FRAME_SIZE, FRAME_SIZE] {
            return Err(EnvError::BadObservation(t.shape().to_vec()));
        }
        let frame = |i: usize| {
            let data = t.data()[i * FRAME_LEN..(i + 1) * FRAME_LEN].to_vec();
            Arc::new(Tensor::new(&[FRAME_CHANNELS, FRAME_SIZE, FRAME_SIZE], data).expect("frame"))
        };
        Ok(Self {
            frames: [frame(0), frame(1), frame(2)],
        })
    }

    pub fn write_into(&self, out: &mut [f32]) {
        for (i, f) in self.frames.iter().enumerate() {
            out[i * FRAME_LEN..(i + 1) * FRAME_LEN].copy_from_slice(f.data());
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = vec![0.0; OBS_LEN];
        self.write_into(&mut data);
        Tensor::new(&[OBS_CHANNELS, FRAME_SIZE, FRAME_SIZE], data).expect("obs shape")
    }
}

/// Batches observations into `[n, 9, 48, 48]`.
pub fn stack_observations<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for o in obs {
        let start = data.len();
        data.resize(start + OBS_LEN, 0.0);
        o.write_into(&mut data[start..]);
        n += 1;
    }
    Tensor::new(&[n, OBS_CHANNELS, FRAME_SIZE, FRAME_SIZE], data).expect("non-empty batch")
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Observation,
    pub action: ActionId,
    pub reward: f32,
    pub next_obs: Observation,
    pub done: bool,
}

/// Samples the initial state (`x` uniform, at rest) and its observation.
pub fn reset(spec: &DomainSpec, seed: u64) -> (PhysState, Observation) {
    let mut rng = seed::rng(seed::derive(seed, 0x7265_7365_74));
    let state = PhysState {
        x: rng.random::<f32>(),
        v: 0.0,
        t: 0,
    };
    let obs = Observation::repeated(render(&state, spec));
    (state, obs)
}

/// Physics only: returns the next state and the reward.
pub fn dynamics(state: &PhysState, action: ActionId) -> (PhysState, f32) {
    let v = (FRICTION * state.v + FORCE_GAIN * action.force()).clamp(-1.0, 1.0);
    let x = (state.x + POSITION_GAIN * v).rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    let x = if x >= 1.0 { 0.0 } else { x };
    (PhysState { x, v, t: state.t + 1 }, v)
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct Step {
    pub state: PhysState,
    pub obs: Observation,
    pub reward: f32,
    pub done: bool,
}

pub fn step(
    state: &PhysState,
    obs: &Observation,
    action: ActionId,
    spec: &DomainSpec,
    episode_length: u32,
) -> Result<Step, EnvError> {
    if state.t >= episode_length {
        return Err(EnvError::EpisodeDone(state.t));
    }
    let (next, reward) = dynamics(state, action);
    Ok(Step {
        obs: obs.pushed(render(&next, spec)),
        reward,
        done: next.t == episode_length,
        state: next,
    })
}

/// Stateful wrapper holding the current physics state and frame stack.
#[derive(Clone, Debug)]
pub struct StriderWorld {
    spec: DomainSpec,
    episode_length: u32,
    state: PhysState,
    obs: Observation,
}

impl StriderWorld {
    pub fn new(spec: DomainSpec, seed: u64) -> Self {
        Self::with_episode_length(spec, seed, EPISODE_LENGTH)
    }

    pub fn with_episode_length(spec: DomainSpec, seed: u64, episode_length: u32) -> Self {
        let (state, obs) = reset(&spec, seed);
        Self {
            spec,
            episode_length,
            state,
            obs,
        }
    }

    pub fn reset(&mut self, seed: u64) -> &Observation {
        let (state, obs) = reset(&self.spec, seed);
        self.state = state;
        self.obs = obs;
        &self.obs
    }

    pub fn step(&mut self, action: ActionId) -> Result<Step, EnvError> {
        let s = step(&self.state, &self.obs, action, &self.spec, self.episode_length)?;
        self.state = s.state;
        self.obs = s.obs.clone();
        Ok(s)
    }

    pub fn state(&self) -> &PhysState {
        &self.state
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.episode_length
    }
}

/// Writes one `[3, h, w]` frame as binary PPM (P6), values `round(v * 255)`.
pub fn write_ppm(frame: &Tensor, mut out: impl Write) -> io::Result<()> {
    let [c, h, w] = frame.shape() else {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame must be [3, h, w]"));
    };
    if *c != 3 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame must have 3 channels"));
    }
    write!(out, "P6\n{w} {h}\n255\n")?;
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push((frame[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(img: &Tensor, r: usize, c: usize) -> Rgb {
        let n = FRAME_SIZE;
        [img[r * n + c], img[(n + r) * n + c], img[(2 * n + r) * n + c]]
    }

    fn state(x: f32, v: f32) -> PhysState {
        PhysState { x, v, t: 0 }
    }

    #[test]
    fn action_mapping_is_bijective() {
        for a in ActionId::ALL {
            assert_eq!(ActionId::from_force(a.force()), Some(a));
        }
        assert!(ActionId::new(5).is_none());
    }

    #[test]
    fn train_domain_is_canonical() {
        for s in [0, 1, 99] {
            assert_eq!(make_domain(Variant::Train, s), DomainSpec::train());
        }
    }

    #[test]
    fn color_easy_is_deterministic_and_diverse() {
        assert_eq!(make_domain(Variant::ColorEasy, 1), make_domain(Variant::ColorEasy, 1));
        let mut seen: Vec<Rgb> = Vec::new();
        for s in 1..=100 {
            let bg = make_domain(Variant::ColorEasy, s).background_color;
            if !seen.contains(&bg) {
                seen.push(bg);
            }
        }
        assert!(seen.len() >= 95);
        let d = make_domain(Variant::ColorEasy, 3);
        assert_eq!(d.agent_color, CANONICAL_AGENT);
        assert_ne!(make_domain(Variant::ColorHard, 3).agent_color, CANONICAL_AGENT);
    }

    #[test]
    fn reset_contract() {
        let spec = DomainSpec::train();
        let (s, o) = reset(&spec, 4);
        assert_eq!(s.v, 0.0);
        assert_eq!(s.t, 0);
        assert!((0.0..1.0).contains(&s.x));
        let f = o.frames();
        assert_eq!(f[0], f[1]);
        assert_eq!(f[1], f[2]);
        assert_eq!(reset(&spec, 4).1.to_tensor(), o.to_tensor());
    }

    #[test]
    fn step_arithmetic() {
        let (s, r) = dynamics(&state(0.5, 0.0), ActionId::new(2).unwrap());
        assert_eq!((s.v, r), (0.0, 0.0));
        let (s, r) = dynamics(&state(0.5, 0.0), ActionId::new(4).unwrap());
        assert!((s.v - 0.1).abs() < 1e-7 && (r - 0.1).abs() < 1e-7);
        assert!((s.x - 0.505).abs() < 1e-6);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn stepping_a_finished_episode_fails() {
        let mut env = StriderWorld::with_episode_length(DomainSpec::train(), 0, 2);
        let a = ActionId::new(4).unwrap();
        assert!(!env.step(a).unwrap().done);
        assert!(env.step(a).unwrap().done);
        assert_eq!(env.step(a).err(), Some(EnvError::EpisodeDone(2)));
    }

    #[test]
    fn full_push_return_matches_recurrence() {
        // closed form v_t = min(1, 2 (1 - 0.95^t))
        let oracle: f64 = (1..=200).map(|t| (2.0 * (1.0 - 0.95f64.powi(t))).min(1.0)).sum();
        let mut env = StriderWorld::new(DomainSpec::train(), 3);
        let mut ret = 0.0f64;
        loop {
            let s = env.step(ActionId::new(4).unwrap()).unwrap();
            ret += s.reward as f64;
            if s.done {
                break;
            }
        }
        assert!((ret - oracle).abs() < 1e-3, "{ret} vs {oracle}");
        assert!((ret - 194.5).abs() < 0.01);
    }

    #[test]
    fn platform_pixel_in_train_domain() {
        let spec = DomainSpec::train();
        for x in [0.0, 0.37, 0.99] {
            let img = render(&state(x, 0.3), &spec);
            assert_eq!(px(&img, 40, 10), CANONICAL_PLATFORM);
        }
    }

    #[test]
    fn render_is_pure() {
        let spec = make_domain(Variant::VideoHard, 8);
        let s = PhysState { x: 0.3, v: -0.4, t: 17 };
        assert_eq!(render(&s, &spec), render(&s, &spec));
    }

    #[test]
    fn background_scrolls_with_position() {
        let spec = DomainSpec::train();
        let a = render(&state(0.30, 0.0), &spec);
        let b = render(&state(0.36, 0.0), &spec);
        let c = render(&state(0.33, 0.0), &spec);
        for r in 0..PLATFORM_TOP {
            for col in 0..FRAME_SIZE - 12 {
                if AGENT_COLS.contains(&col) || AGENT_COLS.contains(&(col + 12)) {
                    continue;
                }
                if r >= MARKER_ROW {
                    continue;
                }
                assert_eq!(px(&b, r, col), px(&a, r, col + 12));
            }
            for col in 0..FRAME_SIZE - 6 {
                if r < MARKER_ROW {
                    assert_eq!(px(&c, r, col), px(&a, r, col + 6));
                }
            }
        }
        // the stripe pattern itself has period 12, so a half-period shift changes pixels
        assert_ne!(a, c);
        for r in AGENT_ROWS {
            for col in AGENT_COLS {
                assert_eq!(px(&a, r, col), CANONICAL_AGENT);
                assert_eq!(px(&b, r, col), CANONICAL_AGENT);
            }
        }
    }

    #[test]
    fn agent_mask_is_domain_general() {
        let s = PhysState { x: 0.42, v: 0.7, t: 5 };
        let mask = |spec: &DomainSpec| -> Vec<bool> {
            let img = render(&s, spec);
            (0..FRAME_SIZE * FRAME_SIZE)
                .map(|p| px(&img, p / FRAME_SIZE, p % FRAME_SIZE) == spec.agent_color)
                .collect()
        };
        let base = mask(&DomainSpec::train());
        for v in [Variant::ColorEasy, Variant::ColorHard] {
            for seed in 0..5 {
                assert_eq!(mask(&make_domain(v, seed)), base);
            }
        }
    }

    #[test]
    fn video_patterns_animate() {
        let spec = make_domain(Variant::VideoEasy, 2);
        let a = render(&PhysState { x: 0.1, v: 0.0, t: 0 }, &spec);
        let b = render(&PhysState { x: 0.1, v: 0.0, t: 10 }, &spec);
        assert_ne!(px(&a, 5, 5), px(&b, 5, 5));
        // platform survives in video_easy, not in video_hard
        assert_eq!(px(&a, 40, 10), CANONICAL_PLATFORM);
        let hard = render(&PhysState { x: 0.1, v: 0.0, t: 0 }, &make_domain(Variant::VideoHard, 2));
        assert_ne!(px(&hard, 40, 10), CANONICAL_PLATFORM);
    }

    #[test]
    fn random_policy_first_step_is_zero_mean() {
        let total: f32 = ActionId::ALL
            .iter()
            .map(|&a| dynamics(&state(0.2, 0.0), a).1)
            .sum();
        assert!(total.abs() < 1e-7);
    }

    #[test]
    fn ppm_dump() {
        let img = render(&state(0.0, 0.0), &DomainSpec::train());
        let mut buf = Vec::new();
        write_ppm(&img, &mut buf).unwrap();
        let header = b"P6\n48 48\n255\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(buf.len(), header.len() + 3 * 48 * 48);
        // pixel (40, 10) is the grey platform: round(0.5 * 255) = 128
        let p = header.len() + 3 * (40 * 48 + 10);
        assert_eq!(&buf[p..p + 3], &[128, 128, 128]);
    }

    #[test]
    fn values_in_unit_range() {
        for v in Variant::ALL {
            let spec = make_domain(v, 11);
            let img = render(&PhysState { x: 0.9, v: -1.0, t: 199 }, &spec);
            assert!(img.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
