//! Skeleton topology, adjacency masks, interaction distance, motion data,
//! dataset files, and the synthetic interaction generator.

mod io;
mod masks;
mod motion;
mod synth;
mod topology;

pub use io::{
    dataset_from_json, dataset_to_json, load_dataset, load_sequence, save_dataset, save_sequence,
    save_sequence_csv, Dataset,
};
pub use masks::{interaction_distance, AdjacencyHops, AdjacencyMasks};
pub use motion::{
    mean_bone_length, normalize_sample, InteractionSample, MotionSequence, NormMode, Normalizer,
    Pose,
};
pub use synth::{synthesize_dataset, SynthConfig, BUILTIN_CLASSES, WAVE_LAG};
pub use topology::SkeletonTopology;
