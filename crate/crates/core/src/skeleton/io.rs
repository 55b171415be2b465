//! JSON dataset and sequence files.
//!
//! ```text
//! {"topology": {"parents": [...], "root": 0, "names": [...]},
//!  "samples": [{"label": "push", "frame_rate": 15.0,
//!               "action": [[[x, y, z], ...k], ...T], "reaction": [...]}]}
//! ```
//!
//! A single-sequence file uses the same frame array under `"frames"`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InteractionSample, MotionSequence, Pose, SkeletonTopology};
use crate::error::{Error, Result};

type FrameArray = Vec<Vec<[f64; 3]>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyRecord {
    parents: Vec<usize>,
    root: usize,
    names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    label: String,
    frame_rate: f64,
    action: FrameArray,
    reaction: FrameArray,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    topology: TopologyRecord,
    samples: Vec<SampleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    topology: TopologyRecord,
    frame_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    frames: FrameArray,
}

/// A skeleton topology with its interaction samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub topology: SkeletonTopology,
    pub samples: Vec<InteractionSample>,
}

impl Dataset {
    /// Class labels in order of first appearance.
    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.label) {
                out.push(s.label.clone());
            }
        }
        out
    }
}

fn topology_record(t: &SkeletonTopology) -> TopologyRecord {
    TopologyRecord {
        parents: t.parents().to_vec(),
        root: t.root(),
        names: t.names().to_vec(),
    }
}

fn frames_record(seq: &MotionSequence) -> FrameArray {
    seq.frames.iter().map(|p| p.joints.clone()).collect()
}

fn frames_from_record(
    frames: FrameArray,
    k: usize,
    frame_rate: f64,
    context: &str,
) -> Result<MotionSequence> {
    if frames.is_empty() {
        return Err(Error::Parse {
            context: context.to_string(),
            message: "no frames".into(),
        });
    }
    for (t, f) in frames.iter().enumerate() {
        if f.len() != k {
            return Err(Error::Parse {
                context: format!("{context} frame {t}"),
                message: format!("expected {k} joints, found {}", f.len()),
            });
        }
        if f.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                context: format!("{context} frame {t}"),
                message: "non-finite coordinate".into(),
            });
        }
    }
    MotionSequence::new(frames.into_iter().map(Pose::new).collect(), frame_rate)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        context: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    }
}

pub fn dataset_to_json(ds: &Dataset) -> String {
    let rec = DatasetRecord {
        topology: topology_record(&ds.topology),
        samples: ds
            .samples
            .iter()
            .map(|s| SampleRecord {
                label: s.label.clone(),
                frame_rate: s.action.frame_rate,
                action: frames_record(&s.action),
                reaction: frames_record(&s.reaction),
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("dataset serialises")
}

pub fn dataset_from_json(text: &str, origin: &Path) -> Result<Dataset> {
    let rec: DatasetRecord = serde_json::from_str(text).map_err(|e| json_error(origin, e))?;
    let t = rec.topology;
    let topology = SkeletonTopology::new(t.parents, t.root, t.names)?;
    let k = topology.joint_count();
    let samples = rec
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let ctx = |part: &str| format!("{} sample {i} {part}", origin.display());
            let mut action = frames_from_record(s.action, k, s.frame_rate, &ctx("action"))?;
            let mut reaction = frames_from_record(s.reaction, k, s.frame_rate, &ctx("reaction"))?;
            action.label = Some(s.label.clone());
            reaction.label = Some(s.label.clone());
            InteractionSample::new(action, reaction, s.label).map_err(|e| Error::Parse {
                context: format!("{} sample {i}", origin.display()),
                message: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { topology, samples })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write(path, &dataset_to_json(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_json(&read(path)?, path)
}

pub fn save_sequence(path: &Path, topology: &SkeletonTopology, seq: &MotionSequence) -> Result<()> {
    let rec = SequenceRecord {
        topology: topology_record(topology),
        frame_rate: seq.frame_rate,
        label: seq.label.clone(),
        frames: frames_record(seq),
    };
    write(
        path,
        &serde_json::to_string(&rec).expect("sequence serialises"),
    )
}

pub fn load_sequence(path: &Path) -> Result<(SkeletonTopology, MotionSequence)> {
    let rec: SequenceRecord =
        serde_json::from_str(&read(path)?).map_err(|e| json_error(path, e))?;
    let t = rec.topology;
    let topology = SkeletonTopology::new(t.parents, t.root, t.names)?;
    let mut seq = frames_from_record(
        rec.frames,
        topology.joint_count(),
        rec.frame_rate,
        &path.display().to_string(),
    )?;
    seq.label = rec.label;
    Ok((topology, seq))
}

/// Writes `frame,joint,x,y,z` rows for external plotting.
pub fn save_sequence_csv(path: &Path, seq: &MotionSequence) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(["frame", "joint", "x", "y", "z"])
        .map_err(wrap)?;
    for (t, pose) in seq.frames.iter().enumerate() {
        for (j, p) in pose.joints.iter().enumerate() {
            w.write_record(&[
                t.to_string(),
                j.to_string(),
                p[0].to_string(),
                p[1].to_string(),
                p[2].to_string(),
            ])
            .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl Serialize for SkeletonTopology {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        topology_record(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SkeletonTopology {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let t = TopologyRecord::deserialize(d)?;
        SkeletonTopology::new(t.parents, t.root, t.names).map_err(serde::de::Error::custom)
    }
}
