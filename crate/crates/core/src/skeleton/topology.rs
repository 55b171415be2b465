use crate::error::{Error, Result};

/// Kinematic tree of a skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    parents: Vec<usize>,
    root: usize,
    names: Vec<String>,
    children: Vec<Vec<usize>>,
    extremities: Vec<usize>,
}

impl SkeletonTopology {
    /// Validates that `parents` forms a tree rooted at `root` (whose parent is
    /// itself) and derives children and extremities.
    pub fn new(parents: Vec<usize>, root: usize, names: Vec<String>) -> Result<Self> {
        let k = parents.len();
        if k < 2 {
            return Err(Error::Topology(format!("need at least 2 joints, got {k}")));
        }
        if names.len() != k {
            return Err(Error::Topology(format!(
                "{} names for {k} joints",
                names.len()
            )));
        }
        if root >= k {
            return Err(Error::Topology(format!("root {root} out of range")));
        }
        if parents[root] != root {
            return Err(Error::Topology(format!(
                "root {root} must be its own parent"
            )));
        }
        for (j, &p) in parents.iter().enumerate() {
            if p >= k {
                return Err(Error::Topology(format!(
                    "joint {j} has parent {p} out of range"
                )));
            }
            if j != root && p == j {
                return Err(Error::Topology(format!(
                    "joint {j} is its own parent but is not the root"
                )));
            }
        }
        for start in 0..k {
            let mut j = start;
            let mut hops = 0;
            while j != root {
                j = parents[j];
                hops += 1;
                if hops > k {
                    return Err(Error::Topology(format!(
                        "parent links from joint {start} form a cycle"
                    )));
                }
            }
        }
        let mut children = vec![Vec::new(); k];
        for (j, &p) in parents.iter().enumerate() {
            if j != root {
                children[p].push(j);
            }
        }
        let extremities = (0..k).filter(|&j| children[j].is_empty()).collect();
        Ok(Self {
            parents,
            root,
            names,
            children,
            extremities,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn parent(&self, joint: usize) -> usize {
        self.parents[joint]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn children(&self, joint: usize) -> &[usize] {
        &self.children[joint]
    }

    /// Leaf joints (no children).
    pub fn extremities(&self) -> &[usize] {
        &self.extremities
    }

    /// `(child, parent)` pairs, one per bone.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.joint_count())
            .filter(move |&j| j != self.root)
            .map(move |j| (j, self.parents[j]))
    }

    /// Proper ancestors of `joint`, nearest first.
    pub fn ancestors(&self, joint: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut j = joint;
        while j != self.root {
            j = self.parents[j];
            out.push(j);
        }
        out
    }

    /// Built-in humanoid with `k` joints, 5 ≤ k ≤ 15.
    ///
    /// Joints are taken from a 15-joint body in a fixed priority order
    /// (torso, head, hands, feet, then intermediate joints); each selected
    /// joint is attached to its nearest selected ancestor.
    pub fn humanoid(k: usize) -> Result<Self> {
        let full = humanoid::FULL;
        if !(5..=full.len()).contains(&k) {
            return Err(Error::Topology(format!(
                "humanoid skeleton supports 5..={} joints, got {k}",
                full.len()
            )));
        }
        let selected = humanoid::selected_joints(k);
        let position = |full_idx: usize| selected.iter().position(|&s| s == full_idx);
        let mut parents = Vec::with_capacity(k);
        for &j in &selected {
            let mut p = full[j].parent;
            while position(p).is_none() {
                p = full[p].parent;
            }
            parents.push(position(p).expect("torso is always selected"));
        }
        let names = selected.iter().map(|&j| full[j].name.to_string()).collect();
        let root = position(humanoid::TORSO).expect("torso selected");
        Self::new(parents, root, names)
    }
}

pub(crate) mod humanoid {
    pub struct JointDef {
        pub name: &'static str,
        pub parent: usize,
        /// Rest position in the body frame: x forward, y up, z toward the left.
        pub rest: [f64; 3],
    }

    pub const TORSO: usize = 0;
    pub const R_ELBOW: usize = 7;
    pub const R_HAND: usize = 8;
    pub const R_KNEE: usize = 13;
    pub const R_FOOT: usize = 14;

    pub const FULL: [JointDef; 15] = [
        JointDef {
            name: "torso",
            parent: 0,
            rest: [0.0, 1.0, 0.0],
        },
        JointDef {
            name: "neck",
            parent: 0,
            rest: [0.0, 1.45, 0.0],
        },
        JointDef {
            name: "head",
            parent: 1,
            rest: [0.0, 1.65, 0.0],
        },
        JointDef {
            name: "l_shoulder",
            parent: 1,
            rest: [0.0, 1.42, 0.2],
        },
        JointDef {
            name: "l_elbow",
            parent: 3,
            rest: [0.0, 1.15, 0.25],
        },
        JointDef {
            name: "l_hand",
            parent: 4,
            rest: [0.0, 0.9, 0.27],
        },
        JointDef {
            name: "r_shoulder",
            parent: 1,
            rest: [0.0, 1.42, -0.2],
        },
        JointDef {
            name: "r_elbow",
            parent: 6,
            rest: [0.0, 1.15, -0.25],
        },
        JointDef {
            name: "r_hand",
            parent: 7,
            rest: [0.0, 0.9, -0.27],
        },
        JointDef {
            name: "l_hip",
            parent: 0,
            rest: [0.0, 0.9, 0.1],
        },
        JointDef {
            name: "l_knee",
            parent: 9,
            rest: [0.0, 0.5, 0.1],
        },
        JointDef {
            name: "l_foot",
            parent: 10,
            rest: [0.0, 0.05, 0.1],
        },
        JointDef {
            name: "r_hip",
            parent: 0,
            rest: [0.0, 0.9, -0.1],
        },
        JointDef {
            name: "r_knee",
            parent: 12,
            rest: [0.0, 0.5, -0.1],
        },
        JointDef {
            name: "r_foot",
            parent: 13,
            rest: [0.0, 0.05, -0.1],
        },
    ];

    const PRIORITY: [usize; 15] = [0, 2, 8, 5, 14, 11, 1, 7, 4, 13, 10, 6, 3, 12, 9];

    /// Full-body indices of the first `k` joints by priority, ascending.
    pub fn selected_joints(k: usize) -> Vec<usize> {
        let mut s = PRIORITY[..k].to_vec();
        s.sort_unstable();
        s
    }
}
