//! Deterministic synthetic two-person interactions.
//!
//! The actor stands at `+x` facing `-x`, the reactor at `-x` facing `+x`;
//! `y` is up. Each class drives a few joints of a 15-joint body with smooth
//! ramps, then the configured joint subset is extracted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::topology::humanoid::{self, FULL};
use super::{Dataset, InteractionSample, MotionSequence, Pose, SkeletonTopology};
use crate::error::{Error, Result};

pub const BUILTIN_CLASSES: [&str; 5] = ["push", "wave", "kick", "approach", "still"];

/// Frames by which the waving reactor trails the actor.
pub const WAVE_LAG: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    pub samples_per_class: usize,
    pub joints: usize,
    /// Inclusive `[min, max]` sequence length.
    pub t_range: [usize; 2],
    pub noise_sd: f64,
    pub frame_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: BUILTIN_CLASSES.iter().map(|s| s.to_string()).collect(),
            samples_per_class: 40,
            joints: 10,
            t_range: [20, 30],
            noise_sd: 0.005,
            frame_rate: 15.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Push,
    Wave,
    Kick,
    Approach,
    Still,
}

impl Class {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "push" => Class::Push,
            "wave" => Class::Wave,
            "kick" => Class::Kick,
            "approach" => Class::Approach,
            "still" => Class::Still,
            other => {
                return Err(Error::Config(format!(
                    "unknown class `{other}` (expected one of {BUILTIN_CLASSES:?})"
                )))
            }
        })
    }
}

/// Per-sample randomisation.
#[derive(Debug, Clone, Copy)]
struct Variation {
    amp: f64,
    onset: f64,
    separation: f64,
    body_scale: f64,
    wave_freq: f64,
    wave_phase: f64,
}

impl Variation {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            amp: rng.gen_range(0.8..1.2),
            onset: rng.gen_range(0.1..0.3),
            separation: rng.gen_range(1.3..1.6),
            body_scale: rng.gen_range(0.92..1.08),
            wave_freq: rng.gen_range(1.2..1.8),
            wave_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }
}

fn smooth(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

type Body = [[f64; 3]; 15];

/// Body-frame pose plus the forward root translation.
struct LocalPose {
    joints: Body,
    forward: f64,
}

impl LocalPose {
    fn rest(v: &Variation) -> Self {
        let mut joints = [[0.0; 3]; 15];
        for (j, def) in FULL.iter().enumerate() {
            joints[j] = [
                def.rest[0],
                def.rest[1] * v.body_scale,
                def.rest[2] * v.body_scale,
            ];
        }
        Self {
            joints,
            forward: 0.0,
        }
    }

    fn shift(&mut self, joint: usize, d: [f64; 3]) {
        for (x, dx) in self.joints[joint].iter_mut().zip(d) {
            *x += dx;
        }
    }

    /// Rotates the upper body backwards about the torso by `angle` radians.
    fn lean_back(&mut self, angle: f64) {
        let pivot = self.joints[humanoid::TORSO];
        let (s, c) = angle.sin_cos();
        for (j, def) in FULL.iter().enumerate() {
            let upper = def.rest[1] > FULL[humanoid::TORSO].rest[1] || (4..=8).contains(&j);
            if j == humanoid::TORSO || !upper {
                continue;
            }
            let x = self.joints[j][0] - pivot[0];
            let y = self.joints[j][1] - pivot[1];
            self.joints[j][0] = pivot[0] + x * c - y * s;
            self.joints[j][1] = pivot[1] + x * s + y * c;
        }
    }

    fn to_world(&self, base_x: f64, facing: f64) -> Body {
        let mut out = [[0.0; 3]; 15];
        for (o, j) in out.iter_mut().zip(&self.joints) {
            *o = [base_x + facing * (j[0] + self.forward), j[1], facing * j[2]];
        }
        out
    }
}

fn wave_pose(v: &Variation, t: usize, fps: f64) -> LocalPose {
    let mut p = LocalPose::rest(v);
    let raise = smooth(t as f64 / 3.0);
    let swing = raise
        * 0.12
        * v.amp
        * (std::f64::consts::TAU * v.wave_freq * t as f64 / fps + v.wave_phase).sin();
    p.shift(
        humanoid::R_ELBOW,
        [0.05 * raise, 0.3 * raise, -0.05 * raise],
    );
    p.shift(
        humanoid::R_HAND,
        [0.05 * raise, 0.85 * raise, -0.08 * raise + swing],
    );
    p
}

fn action_pose(class: Class, v: &Variation, t: usize, len: usize, fps: f64) -> LocalPose {
    let u = if len > 1 {
        t as f64 / (len - 1) as f64
    } else {
        0.0
    };
    let mut p = LocalPose::rest(v);
    match class {
        Class::Push => {
            let e = v.amp * smooth((u - v.onset) / 0.3);
            p.shift(humanoid::R_ELBOW, [0.25 * e, 0.25 * e, 0.0]);
            p.shift(humanoid::R_HAND, [0.55 * e, 0.5 * e, 0.0]);
            p.forward = 0.1 * e;
        }
        Class::Wave => p = wave_pose(v, t, fps),
        Class::Kick => {
            let e = v.amp * smooth((u - v.onset) / 0.25);
            p.shift(humanoid::R_KNEE, [0.25 * e, 0.2 * e, 0.0]);
            p.shift(humanoid::R_FOOT, [0.55 * e, 0.45 * e, 0.0]);
        }
        Class::Approach => p.forward = 0.5 * v.amp * smooth((u - 0.05) / 0.8),
        Class::Still => p.forward = -0.5 * v.amp * smooth((u - 0.05) / 0.8),
    }
    p
}

fn reaction_pose(class: Class, v: &Variation, t: usize, len: usize, fps: f64) -> LocalPose {
    let u = if len > 1 {
        t as f64 / (len - 1) as f64
    } else {
        0.0
    };
    let mut p = LocalPose::rest(v);
    match class {
        Class::Push => {
            let q = smooth((u - v.onset - 0.15) / 0.35);
            p.forward = -0.4 * v.amp * q;
            p.lean_back(0.15 * q);
        }
        Class::Wave => p = wave_pose(v, t.saturating_sub(WAVE_LAG), fps),
        Class::Kick => {
            let q = smooth((u - v.onset - 0.1) / 0.35);
            p.forward = -0.25 * v.amp * q;
            p.lean_back(0.35 * v.amp * q);
        }
        Class::Approach => p.forward = 0.5 * v.amp * smooth((u - 0.05) / 0.8),
        Class::Still => {}
    }
    p
}

fn to_sequence(
    bodies: Vec<Body>,
    selected: &[usize],
    noise: Option<Normal<f64>>,
    rng: &mut ChaCha8Rng,
    fps: f64,
    label: &str,
) -> Result<MotionSequence> {
    let frames = bodies
        .into_iter()
        .map(|b| {
            let joints = selected
                .iter()
                .map(|&j| {
                    let mut p = b[j];
                    if let Some(n) = noise {
                        for v in &mut p {
                            *v += n.sample(rng);
                        }
                    }
                    p
                })
                .collect();
            Pose::new(joints)
        })
        .collect();
    Ok(MotionSequence::new(frames, fps)?.with_label(label))
}

/// Generates `samples_per_class` samples for each configured class, classes
/// in configuration order. Identical configurations give identical output.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be at least 1".into()));
    }
    if cfg.classes.is_empty() {
        return Err(Error::Config("class list is empty".into()));
    }
    let [lo, hi] = cfg.t_range;
    if lo < 2 || lo > hi {
        return Err(Error::Config(format!(
            "invalid t_range [{lo}, {hi}] (need 2 <= min <= max)"
        )));
    }
    if !(cfg.noise_sd >= 0.0 && cfg.noise_sd.is_finite()) {
        return Err(Error::Config(format!("invalid noise_sd {}", cfg.noise_sd)));
    }
    if !(cfg.frame_rate > 0.0) {
        return Err(Error::Config(format!(
            "invalid frame_rate {}",
            cfg.frame_rate
        )));
    }
    let classes = cfg
        .classes
        .iter()
        .map(|c| Class::parse(c))
        .collect::<Result<Vec<_>>>()?;
    let topology = SkeletonTopology::humanoid(cfg.joints)?;
    let selected = humanoid::selected_joints(cfg.joints);
    let noise = (cfg.noise_sd > 0.0).then(|| Normal::new(0.0, cfg.noise_sd).expect("finite sd"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fps = cfg.frame_rate;

    let mut samples = Vec::with_capacity(classes.len() * cfg.samples_per_class);
    for (class, name) in classes.iter().zip(&cfg.classes) {
        for _ in 0..cfg.samples_per_class {
            let len = rng.gen_range(lo..=hi);
            let v = Variation::draw(&mut rng);
            let half = v.separation / 2.0;
            let action: Vec<Body> = (0..len)
                .map(|t| action_pose(*class, &v, t, len, fps).to_world(half, -1.0))
                .collect();
            let reaction: Vec<Body> = (0..len)
                .map(|t| reaction_pose(*class, &v, t, len, fps).to_world(-half, 1.0))
                .collect();
            let action = to_sequence(action, &selected, noise, &mut rng, fps, name)?;
            let reaction = to_sequence(reaction, &selected, noise, &mut rng, fps, name)?;
            samples.push(InteractionSample::new(action, reaction, name.clone())?);
        }
    }
    Ok(Dataset { topology, samples })
}
