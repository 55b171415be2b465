//! Autoregressive reaction generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InterFormerModel;
use crate::numerics::{Graph, Tensor};
use crate::skeleton::{MotionSequence, Pose};

/// Decoding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub max_len: usize,
    /// A frame is EOS when its mean absolute deviation from the sentinel is
    /// below `eos_threshold * |sentinel|`.
    pub eos_threshold: f64,
    /// Standard deviation of the encoder noise; 0 disables it.
    pub noise_sd: f64,
    pub chunk_len: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            max_len: 10_000,
            eos_threshold: 0.5,
            noise_sd: 0.0,
            chunk_len: 50,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.chunk_len < 2 {
            return Err(Error::Config(format!(
                "chunk_len must be at least 2, got {}",
                self.chunk_len
            )));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::Config(format!(
                "noise_sd must be a non-negative number, got {}",
                self.noise_sd
            )));
        }
        if !(self.eos_threshold > 0.0) {
            return Err(Error::Config("eos_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Why generation stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    ActionEnd,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub sequence: MotionSequence,
    pub stop: StopReason,
    /// EOS fired before the action ended, or the action ended without the
    /// model predicting EOS on the next step.
    pub eos_mismatch: bool,
    /// Frames produced by each chunk (a single entry unless chunked).
    pub chunks: Vec<usize>,
}

pub fn is_eos(frame: &[f64], sentinel: f64, threshold: f64) -> bool {
    let mad = frame.iter().map(|c| (c - sentinel).abs()).sum::<f64>() / frame.len() as f64;
    mad < threshold * sentinel.abs()
}

fn encoder_noise(t: usize, d: usize, sd: f64, seed: u64, stream: u64) -> Result<Option<Tensor>> {
    if sd == 0.0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
    let data = (0..t * d).map(|_| normal.sample(&mut rng)).collect();
    Ok(Some(Tensor::new(&[t, d], data)?))
}

fn check_inputs(
    model: &InterFormerModel,
    action: &MotionSequence,
    first_frame: &Pose,
) -> Result<()> {
    let k = model.config().k;
    if action.joint_count() != k || first_frame.joint_count() != k {
        return Err(Error::JointCount(format!(
            "model has {k} joints; action has {}, first frame {}",
            action.joint_count(),
            first_frame.joint_count()
        )));
    }
    if !first_frame.is_finite() {
        return Err(Error::Invalid(
            "first frame has non-finite coordinates".into(),
        ));
    }
    Ok(())
}

fn generate_with_noise(
    model: &InterFormerModel,
    action: &MotionSequence,
    first_frame: &Pose,
    config: &GenConfig,
    noise: Option<&Tensor>,
) -> Result<Generated> {
    check_inputs(model, action, first_frame)?;
    let d = model.config().d();
    let sentinel = model.config().eos_sentinel;
    let t = action.len();
    let cap = t.min(config.max_len);
    let action_m = action.to_matrix();

    let g = Graph::new();
    let p = model.bind(&g, false);
    let z = model.encode(&g, &p, &action_m, noise)?;
    let mut inputs = first_frame.flatten();
    let mut frames: Vec<Pose> = Vec::with_capacity(cap);
    let mut stop = None;
    let predict_next = |inputs: &[f64], step: usize| -> Result<Vec<f64>> {
        let rows = inputs.len() / d;
        let y_in = Tensor::new(&[rows, d], inputs.to_vec())?;
        let y = model.decode(&g, &p, &y_in, z, &action_m)?.value();
        let last = y.row(rows - 1).to_vec();
        if last.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                step,
                what: "generated frame".into(),
            });
        }
        Ok(last)
    };
    for step in 0..cap {
        let next = predict_next(&inputs, step)?;
        if step > 0 && is_eos(&next, sentinel, config.eos_threshold) {
            stop = Some(StopReason::Eos);
            break;
        }
        frames.push(Pose::from_flat(&next)?);
        inputs.extend_from_slice(&next);
    }
    let (stop, eos_mismatch) = match stop {
        Some(s) => (s, frames.len() != t),
        None if cap == t => {
            let next = predict_next(&inputs, cap)?;
            (
                StopReason::ActionEnd,
                !is_eos(&next, sentinel, config.eos_threshold),
            )
        }
        None => (StopReason::MaxLen, false),
    };
    let n = frames.len();
    Ok(Generated {
        sequence: MotionSequence::new(frames, action.frame_rate)?,
        stop,
        eos_mismatch,
        chunks: vec![n],
    })
}

/// Greedy autoregressive generation seeded with `first_frame`. Stops at the
/// first EOS prediction (never on the first step) or after
/// `min(len(action), max_len)` frames. Encoder noise is used when
/// `config.noise_sd > 0`.
pub fn generate(
    model: &InterFormerModel,
    action: &MotionSequence,
    first_frame: &Pose,
    config: &GenConfig,
) -> Result<Generated> {
    config.validate()?;
    let noise = encoder_noise(
        action.len(),
        model.config().d(),
        config.noise_sd,
        config.seed,
        0,
    )?;
    generate_with_noise(model, action, first_frame, config, noise.as_ref())
}

/// Generates in consecutive windows of `chunk_len` action frames. Each
/// window after the first is seeded with the last frame generated by the
/// previous one. Short actions fall back to [`generate`].
pub fn generate_long(
    model: &InterFormerModel,
    action: &MotionSequence,
    first_frame: &Pose,
    config: &GenConfig,
) -> Result<Generated> {
    config.validate()?;
    if action.len() <= config.chunk_len {
        return generate(model, action, first_frame, config);
    }
    let d = model.config().d();
    let mut seed_frame = first_frame.clone();
    let mut frames = Vec::with_capacity(action.len());
    let mut chunks = Vec::new();
    let mut eos_mismatch = false;
    let mut stop = StopReason::ActionEnd;
    for (c, start) in (0..action.len()).step_by(config.chunk_len).enumerate() {
        let end = (start + config.chunk_len).min(action.len());
        let window = action.slice(start, end)?;
        let noise = encoder_noise(window.len(), d, config.noise_sd, config.seed, c as u64)?;
        let out = generate_with_noise(model, &window, &seed_frame, config, noise.as_ref())?;
        eos_mismatch |= out.eos_mismatch;
        stop = out.stop;
        chunks.push(out.sequence.len());
        seed_frame = out
            .sequence
            .frames
            .last()
            .expect("at least one frame")
            .clone();
        frames.extend(out.sequence.frames);
        if frames.len() >= config.max_len {
            frames.truncate(config.max_len);
            stop = StopReason::MaxLen;
            break;
        }
    }
    Ok(Generated {
        sequence: MotionSequence::new(frames, action.frame_rate)?,
        stop,
        eos_mismatch,
        chunks,
    })
}

/// `n_samples` generations, sample `i` using encoder-noise stream `i`.
/// Sample 0 equals [`generate`] with the same config.
pub fn generate_diverse(
    model: &InterFormerModel,
    action: &MotionSequence,
    first_frame: &Pose,
    config: &GenConfig,
    n_samples: usize,
) -> Result<Vec<Generated>> {
    config.validate()?;
    if config.noise_sd <= 0.0 {
        return Err(Error::Config(
            "diverse generation needs noise_sd > 0".into(),
        ));
    }
    let d = model.config().d();
    (0..n_samples as u64)
        .map(|i| {
            let noise = encoder_noise(action.len(), d, config.noise_sd, config.seed, i)?;
            generate_with_noise(model, action, first_frame, config, noise.as_ref())
        })
        .collect()
}

/// `first_frame` repeated `length` times.
pub fn zero_velocity_baseline(
    first_frame: &Pose,
    length: usize,
    frame_rate: f64,
) -> Result<MotionSequence> {
    if length == 0 {
        return Err(Error::Length(
            "zero-velocity baseline needs length >= 1".into(),
        ));
    }
    MotionSequence::new(vec![first_frame.clone(); length], frame_rate)
}
