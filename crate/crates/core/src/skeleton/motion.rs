use serde::{Deserialize, Serialize};

use super::SkeletonTopology;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One frame: `k` joints with `(x, y, z)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub joints: Vec<[f64; 3]>,
}

impl Pose {
    pub fn new(joints: Vec<[f64; 3]>) -> Self {
        Self { joints }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Flattened `[x1, y1, z1, x2, ...]` of length `3k`.
    pub fn flatten(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(3) {
            return Err(Error::JointCount(format!(
                "{} values do not form xyz triples",
                values.len()
            )));
        }
        Ok(Self {
            joints: values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    /// Pose filled with a single value, used as the end-of-sequence marker.
    pub fn filled(k: usize, value: f64) -> Self {
        Self {
            joints: vec![[value; 3]; k],
        }
    }
}

/// `T` poses of a single character.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<Pose>,
    pub frame_rate: f64,
    pub label: Option<String>,
}

impl MotionSequence {
    pub fn new(frames: Vec<Pose>, frame_rate: f64) -> Result<Self> {
        let seq = Self {
            frames,
            frame_rate,
            label: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::Length("motion sequence has no frames".into()))?;
        let k = first.joint_count();
        if let Some((t, p)) = self
            .frames
            .iter()
            .enumerate()
            .find(|(_, p)| p.joint_count() != k)
        {
            return Err(Error::JointCount(format!(
                "frame {t}: expected {k} joints, found {}",
                p.joint_count()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, Pose::joint_count)
    }

    /// Row-per-frame matrix of shape `[T, 3k]`.
    pub fn to_matrix(&self) -> Tensor {
        let d = 3 * self.joint_count();
        let data = self.frames.iter().flat_map(Pose::flatten).collect();
        Tensor::new(&[self.len(), d], data).expect("validated sequence")
    }

    pub fn from_matrix(m: &Tensor, frame_rate: f64) -> Result<Self> {
        if m.shape().len() != 2 {
            return Err(Error::JointCount(format!(
                "expected [T, d] matrix, got {:?}",
                m.shape()
            )));
        }
        let frames = (0..m.shape()[0])
            .map(|t| Pose::from_flat(m.row(t)))
            .collect::<Result<_>>()?;
        Self::new(frames, frame_rate)
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().all(Pose::is_finite)
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Length(format!(
                "slice {start}..{end} out of range for {} frames",
                self.len()
            )));
        }
        Ok(Self {
            frames: self.frames[start..end].to_vec(),
            frame_rate: self.frame_rate,
            label: self.label.clone(),
        })
    }
}

/// An action `X` and the reaction `Y` it elicited.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSample {
    pub action: MotionSequence,
    pub reaction: MotionSequence,
    pub label: String,
}

impl InteractionSample {
    pub fn new(
        action: MotionSequence,
        reaction: MotionSequence,
        label: impl Into<String>,
    ) -> Result<Self> {
        action.validate()?;
        reaction.validate()?;
        if action.len() != reaction.len() {
            return Err(Error::Length(format!(
                "action has {} frames, reaction {}",
                action.len(),
                reaction.len()
            )));
        }
        if action.joint_count() != reaction.joint_count() {
            return Err(Error::JointCount(format!(
                "action has {} joints, reaction {}",
                action.joint_count(),
                reaction.joint_count()
            )));
        }
        Ok(Self {
            action,
            reaction,
            label: label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.action.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    None,
    CenterScale,
}

/// Affine map `p -> (p - offset) / scale` applied to every joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub offset: [f64; 3],
    pub scale: f64,
}

impl Normalizer {
    pub const IDENTITY: Normalizer = Normalizer {
        offset: [0.0; 3],
        scale: 1.0,
    };

    /// Fits the map for `sample`: offset is the action's root joint in its
    /// first frame, scale the action's mean bone length over all frames.
    pub fn fit(
        sample: &InteractionSample,
        topology: &SkeletonTopology,
        mode: NormMode,
    ) -> Result<Self> {
        Self::fit_action(&sample.action, topology, mode)
    }

    /// Same map as [`Normalizer::fit`], from the action alone.
    pub fn fit_action(
        action: &MotionSequence,
        topology: &SkeletonTopology,
        mode: NormMode,
    ) -> Result<Self> {
        match mode {
            NormMode::None => Ok(Self::IDENTITY),
            NormMode::CenterScale => {
                let offset = action.frames[0].joints[topology.root()];
                let scale = mean_bone_length(action, topology);
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(Error::Invalid(format!(
                        "cannot normalise: mean bone length is {scale}"
                    )));
                }
                Ok(Self { offset, scale })
            }
        }
    }

    pub fn apply(&self, seq: &MotionSequence) -> MotionSequence {
        self.map(seq, |v, c| (v - self.offset[c]) / self.scale)
    }

    pub fn invert(&self, seq: &MotionSequence) -> MotionSequence {
        self.map(seq, |v, c| v * self.scale + self.offset[c])
    }

    fn map(&self, seq: &MotionSequence, f: impl Fn(f64, usize) -> f64) -> MotionSequence {
        let frames = seq
            .frames
            .iter()
            .map(|p| Pose {
                joints: p
                    .joints
                    .iter()
                    .map(|j| [f(j[0], 0), f(j[1], 1), f(j[2], 2)])
                    .collect(),
            })
            .collect();
        MotionSequence {
            frames,
            frame_rate: seq.frame_rate,
            label: seq.label.clone(),
        }
    }
}

/// Normalises both sequences of a sample with the map fitted on its action.
pub fn normalize_sample(
    sample: &InteractionSample,
    topology: &SkeletonTopology,
    mode: NormMode,
) -> Result<(InteractionSample, Normalizer)> {
    let n = Normalizer::fit(sample, topology, mode)?;
    let out = InteractionSample {
        action: n.apply(&sample.action),
        reaction: n.apply(&sample.reaction),
        label: sample.label.clone(),
    };
    Ok((out, n))
}

pub fn mean_bone_length(seq: &MotionSequence, topology: &SkeletonTopology) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for pose in &seq.frames {
        for (c, p) in topology.bones() {
            let (a, b) = (pose.joints[c], pose.joints[p]);
            total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            count += 1;
        }
    }
    total / count as f64
}
