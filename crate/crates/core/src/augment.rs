//! Seeded image augmentations used to synthesize surrogate domains:
//! random 3×3 convolution and color jitter. Each operator transforms all
//! three stacked frames identically and keeps values in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::color::{hsv_to_rgb, rgb_to_hsv};
use crate::envsim::{Observation, FRAME_CHANNELS, FRAME_SIZE};
use crate::numcore::Tensor;
use crate::seed;

pub const KERNEL_STD: f32 = 1.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugKind {
    RandConv,
    Jitter,
}

impl AugKind {
    pub fn name(self) -> &'static str {
        match self {
            AugKind::RandConv => "randconv",
            AugKind::Jitter => "jitter",
        }
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown augmentation `{0}` (expected randconv or jitter)")]
pub struct UnknownAug(pub String);

impl FromStr for AugKind {
    type Err = UnknownAug;
    fn from_str(s: &str) -> Result<Self, UnknownAug> {
        match s {
            "randconv" => Ok(AugKind::RandConv),
            "jitter" => Ok(AugKind::Jitter),
            other => Err(UnknownAug(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugParams {
    /// Row-major 3×3 kernel shared by every channel.
    RandConv { kernel: [f32; 9] },
    Jitter {
        hue_shift: f32,
        brightness: f32,
        contrast: f32,
        saturation: f32,
    },
}

/// A fully parameterized augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentOp {
    pub params: AugParams,
    pub seed: u64,
}

impl AugmentOp {
    pub fn kind(&self) -> AugKind {
        match self.params {
            AugParams::RandConv { .. } => AugKind::RandConv,
            AugParams::Jitter { .. } => AugKind::Jitter,
        }
    }

    pub fn with_kernel(kernel: [f32; 9]) -> Self {
        Self {
            params: AugParams::RandConv { kernel },
            seed: 0,
        }
    }

    pub fn with_jitter(hue_shift: f32, brightness: f32, contrast: f32, saturation: f32) -> Self {
        Self {
            params: AugParams::Jitter {
                hue_shift,
                brightness,
                contrast,
                saturation,
            },
            seed: 0,
        }
    }

    pub fn identity_kernel() -> Self {
        let mut k = [0.0; 9];
        k[4] = 1.0;
        Self::with_kernel(k)
    }

    pub fn apply(&self, obs: &Observation) -> Observation {
        let frames = obs.frames();
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            let data = match self.params {
                AugParams::RandConv { kernel } => convolve_frame(f.data(), &kernel),
                AugParams::Jitter {
                    hue_shift,
                    brightness,
                    contrast,
                    saturation,
                } => jitter_frame(f.data(), hue_shift, brightness, contrast, saturation),
            };
            out.push(data);
        }
        let mut stacked = Vec::with_capacity(out.iter().map(Vec::len).sum());
        out.into_iter().for_each(|d| stacked.extend(d));
        let t = Tensor::new(&[3 * FRAME_CHANNELS, FRAME_SIZE, FRAME_SIZE], stacked).expect("obs");
        Observation::from_tensor(&t).expect("obs shape")
    }
}

pub fn sample_aug(kind: AugKind, seed: u64) -> AugmentOp {
    let mut rng = seed::rng(seed::derive(seed, 0x6175_6720 + kind as u64));
    let params = match kind {
        AugKind::RandConv => {
            let normal = Normal::new(0.0f32, KERNEL_STD).expect("valid std");
            let mut kernel = [0.0; 9];
            kernel.iter_mut().for_each(|k| *k = normal.sample(&mut rng));
            AugParams::RandConv { kernel }
        }
        AugKind::Jitter => AugParams::Jitter {
            hue_shift: rng.random_range(-0.5f32..=0.5),
            brightness: rng.random_range(0.9f32..=1.1),
            contrast: rng.random_range(0.9f32..=1.1),
            saturation: rng.random_range(0.9f32..=1.1),
        },
    };
    AugmentOp { params, seed }
}

pub fn random_conv(obs: &Observation, seed: u64) -> Observation {
    sample_aug(AugKind::RandConv, seed).apply(obs)
}

pub fn color_jitter(obs: &Observation, seed: u64) -> Observation {
    sample_aug(AugKind::Jitter, seed).apply(obs)
}

pub fn augment(kind: AugKind, obs: &Observation, seed: u64) -> Observation {
    sample_aug(kind, seed).apply(obs)
}

/// Same 3×3 kernel on every channel plane, replicate padding, clamped output.
fn convolve_frame(frame: &[f32], kernel: &[f32; 9]) -> Vec<f32> {
    let n = FRAME_SIZE;
    let mut out = vec![0.0; frame.len()];
    for (src, dst) in frame.chunks(n * n).zip(out.chunks_mut(n * n)) {
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0f32;
                for ky in 0..3 {
                    let iy = (y + ky).saturating_sub(1).min(n - 1);
                    for kx in 0..3 {
                        let ix = (x + kx).saturating_sub(1).min(n - 1);
                        acc += kernel[ky * 3 + kx] * src[iy * n + ix];
                    }
                }
                dst[y * n + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn jitter_frame(frame: &[f32], hue_shift: f32, brightness: f32, contrast: f32, saturation: f32) -> Vec<f32> {
    let plane = FRAME_SIZE * FRAME_SIZE;
    let mut hsv: Vec<(f32, f32, f32)> = (0..plane)
        .map(|p| {
            let (h, s, v) = rgb_to_hsv([frame[p], frame[plane + p], frame[2 * plane + p]]);
            ((h + hue_shift).rem_euclid(1.0), (s * saturation).min(1.0), v * brightness)
        })
        .collect();
    let mean_v = hsv.iter().map(|&(_, _, v)| v as f64).sum::<f64>() as f32 / plane as f32;
    hsv.iter_mut()
        .for_each(|(_, _, v)| *v = (mean_v + contrast * (*v - mean_v)).max(0.0));
    let mut out = vec![0.0; frame.len()];
    for (p, &(h, s, v)) in hsv.iter().enumerate() {
        let rgb = hsv_to_rgb(h, s, v);
        for ch in 0..3 {
            out[ch * plane + p] = rgb[ch].clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{make_domain, render, PhysState, Variant};

    fn sample_obs() -> Observation {
        let spec = make_domain(Variant::ColorHard, 5);
        let s = |x: f32, t: u32| PhysState { x, v: 0.4, t };
        Observation::repeated(render(&s(0.1, 0), &spec))
            .pushed(render(&s(0.13, 1), &spec))
            .pushed(render(&s(0.17, 2), &spec))
    }

    fn checkerboard() -> Observation {
        let t = Tensor::from_fn(&[9, FRAME_SIZE, FRAME_SIZE], |i| {
            let (r, c) = ((i / FRAME_SIZE) % FRAME_SIZE, i % FRAME_SIZE);
            if (r / 4 + c / 4) % 2 == 0 {
                0.8
            } else {
                0.2
            }
        });
        Observation::from_tensor(&t).unwrap()
    }

    fn max_diff(a: &Observation, b: &Observation) -> f32 {
        a.to_tensor()
            .data()
            .iter()
            .zip(b.to_tensor().data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let o = sample_obs();
        assert_eq!(AugmentOp::identity_kernel().apply(&o), o);
    }

    #[test]
    fn random_conv_is_deterministic() {
        let o = sample_obs();
        assert_eq!(random_conv(&o, 9), random_conv(&o, 9));
        assert_ne!(random_conv(&o, 9), random_conv(&o, 10));
        assert_eq!(sample_aug(AugKind::RandConv, 1), sample_aug(AugKind::RandConv, 1));
    }

    #[test]
    fn random_conv_matches_nested_loop_reference() {
        let o = checkerboard();
        let AugParams::RandConv { kernel } = sample_aug(AugKind::RandConv, 3).params else {
            unreachable!()
        };
        let input = o.to_tensor();
        let out = random_conv(&o, 3).to_tensor();
        let n = FRAME_SIZE as i64;
        for ch in 0..9i64 {
            for y in 0..n {
                for x in 0..n {
                    let mut s = 0.0f64;
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let iy = (y + dy).clamp(0, n - 1);
                            let ix = (x + dx).clamp(0, n - 1);
                            let w = kernel[((dy + 1) * 3 + dx + 1) as usize] as f64;
                            s += w * input[((ch * n + iy) * n + ix) as usize] as f64;
                        }
                    }
                    let expect = s.clamp(0.0, 1.0);
                    let got = out[((ch * n + y) * n + x) as usize] as f64;
                    assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn kernel_sampling_statistics() {
        let w: Vec<f64> = (0..1000u64)
            .flat_map(|s| match sample_aug(AugKind::RandConv, s).params {
                AugParams::RandConv { kernel } => kernel.map(|k| k as f64),
                _ => unreachable!(),
            })
            .collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((std - 1.0 / 3.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn jitter_parameters_in_range() {
        for s in 0..200 {
            let AugParams::Jitter {
                hue_shift,
                brightness,
                contrast,
                saturation,
            } = sample_aug(AugKind::Jitter, s).params
            else {
                unreachable!()
            };
            assert!((-0.5..=0.5).contains(&hue_shift));
            for f in [brightness, contrast, saturation] {
                assert!((0.9..=1.1).contains(&f));
            }
        }
    }

    #[test]
    fn jitter_identity_parameters() {
        let o = sample_obs();
        let out = AugmentOp::with_jitter(0.0, 1.0, 1.0, 1.0).apply(&o);
        assert!(max_diff(&o, &out) < 1e-6);
    }

    #[test]
    fn half_turn_twice_restores_hue() {
        let o = sample_obs();
        let half = AugmentOp::with_jitter(0.5, 1.0, 1.0, 1.0);
        let back = half.apply(&half.apply(&o));
        assert!(max_diff(&o, &back) < 1e-4);
    }

    #[test]
    fn gray_is_hue_invariant() {
        let t = Tensor::from_fn(&[9, FRAME_SIZE, FRAME_SIZE], |i| ((i % FRAME_SIZE) as f32) / 60.0);
        let o = Observation::from_tensor(&t).unwrap();
        for shift in [-0.5, -0.2, 0.3, 0.5] {
            let out = AugmentOp::with_jitter(shift, 1.0, 1.0, 1.0).apply(&o);
            assert!(max_diff(&o, &out) < 1e-6);
        }
    }

    #[test]
    fn shape_and_range_preserved() {
        let o = sample_obs();
        for kind in [AugKind::RandConv, AugKind::Jitter] {
            for s in 0..10 {
                let t = augment(kind, &o, s).to_tensor();
                assert_eq!(t.shape(), &[9, 48, 48]);
                assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("randconv".parse::<AugKind>().unwrap(), AugKind::RandConv);
        assert!("cutmix".parse::<AugKind>().is_err());
    }
}
