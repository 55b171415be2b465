use serde::{Deserialize, Serialize};

use super::{Pose, SkeletonTopology};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Reach of the inward/outward relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyHops {
    /// Direct parent (inward) and direct children (outward).
    #[default]
    One,
    /// Every ancestor on the path to the root (inward) and every descendant
    /// (outward).
    Path,
}

/// Binary `k x k` relation matrices of a skeleton and their union.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMasks {
    k: usize,
    identity: Vec<bool>,
    inward: Vec<bool>,
    outward: Vec<bool>,
    mask: Vec<bool>,
}

impl AdjacencyMasks {
    pub fn build(topology: &SkeletonTopology, hops: AdjacencyHops) -> Self {
        let k = topology.joint_count();
        let mut identity = vec![false; k * k];
        let mut inward = vec![false; k * k];
        let mut outward = vec![false; k * k];
        for i in 0..k {
            identity[i * k + i] = true;
            let targets = match hops {
                AdjacencyHops::One if i == topology.root() => vec![],
                AdjacencyHops::One => vec![topology.parent(i)],
                AdjacencyHops::Path => topology.ancestors(i),
            };
            for j in targets {
                inward[i * k + j] = true;
                outward[j * k + i] = true;
            }
        }
        let mask = (0..k * k)
            .map(|x| identity[x] || inward[x] || outward[x])
            .collect();
        Self {
            k,
            identity,
            inward,
            outward,
            mask,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.k
    }

    pub fn identity(&self, i: usize, j: usize) -> bool {
        self.identity[i * self.k + j]
    }

    /// `j` lies toward the root from `i`.
    pub fn inward(&self, i: usize, j: usize) -> bool {
        self.inward[i * self.k + j]
    }

    /// `j` lies toward the extremities from `i`.
    pub fn outward(&self, i: usize, j: usize) -> bool {
        self.outward[i * self.k + j]
    }

    pub fn mask(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.k + j]
    }

    /// Row-major `M`, `true` where attention is kept.
    pub fn mask_flat(&self) -> &[bool] {
        &self.mask
    }

    /// `M` as a 0/1 tensor of shape `[k, k]`.
    pub fn mask_tensor(&self) -> Tensor {
        let data = self
            .mask
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[self.k, self.k], data).expect("k x k")
    }
}

/// `Dist[i][j] = -|a_i - b_j|`: negated distance between joint `i` of the
/// first pose and joint `j` of the second, so nearer pairs score higher.
pub fn interaction_distance(a: &Pose, b: &Pose) -> Result<Tensor> {
    let k = a.joint_count();
    if b.joint_count() != k {
        return Err(Error::JointCount(format!(
            "interaction distance between {k} and {} joints",
            b.joint_count()
        )));
    }
    let mut data = Vec::with_capacity(k * k);
    for p in &a.joints {
        for q in &b.joints {
            let d2: f64 = (0..3).map(|c| (p[c] - q[c]).powi(2)).sum();
            data.push(-d2.sqrt());
        }
    }
    Ok(Tensor::new(&[k, k], data)?)
}
