//! Tool skeleton and the partitioned adjacency used by the spatial step of
//! each graph convolution unit.
//!
//! Inter-frame (trajectory) edges are not materialized: they link a joint to
//! itself in the neighbouring frames, which is exactly the receptive field of
//! the temporal convolution over each joint column.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Error, Result};
use crate::numerics::Tensor;

/// Partition index of the root group (the node itself and equidistant neighbours).
pub const ROOT: usize = 0;
/// Partition index of neighbours closer to the gravity center than the root.
pub const CENTRIPETAL: usize = 1;
/// Partition index of neighbours farther from the gravity center than the root.
pub const CENTRIFUGAL: usize = 2;

/// Relative tolerance under which two distances count as equal.
const TIE_RTOL: f64 = 1e-9;

const SKELETON_FORMAT: &str = "stgcn-skeleton";
const SKELETON_VERSION: u32 = 1;

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    joint_names: Vec<String>,
    edges: Vec<(usize, usize)>,
    center_joint: usize,
    reference_pose: Option<Vec<Point>>,
}

impl SkeletonSpec {
    pub fn new(
        joint_names: Vec<String>,
        edges: Vec<(usize, usize)>,
        center_joint: usize,
        reference_pose: Option<Vec<Point>>,
    ) -> Result<Self> {
        let v = joint_names.len();
        if v == 0 {
            return Err(config("skeleton has no joints"));
        }
        if center_joint >= v {
            return Err(config(format!(
                "center joint {center_joint} out of range for {v} joints"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &edges {
            if a >= v || b >= v {
                return Err(config(format!(
                    "edge ({a},{b}) out of range for {v} joints"
                )));
            }
            if a == b {
                return Err(config(format!("self-loop on joint {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(config(format!("duplicate edge ({a},{b})")));
            }
        }
        if let Some(pose) = &reference_pose {
            if pose.len() != v {
                return Err(config(format!(
                    "reference pose has {} points for {v} joints",
                    pose.len()
                )));
            }
            if pose.iter().flatten().any(|c| !c.is_finite()) {
                return Err(config("reference pose has non-finite coordinates"));
            }
        }
        let spec = SkeletonSpec {
            joint_names,
            edges,
            center_joint,
            reference_pose,
        };
        if spec.hop_distances(0).iter().any(Option::is_none) {
            return Err(config("skeleton edges do not connect every joint"));
        }
        Ok(spec)
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn center_joint(&self) -> usize {
        self.center_joint
    }

    pub fn reference_pose(&self) -> Option<&[Point]> {
        self.reference_pose.as_deref()
    }

    pub fn without_reference_pose(mut self) -> Self {
        self.reference_pose = None;
        self
    }

    pub fn neighbors(&self, joint: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == joint {
                    Some(b)
                } else if b == joint {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Breadth-first hop counts from `from`; `None` for unreachable joints.
    pub fn hop_distances(&self, from: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_joints()];
        dist[from] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(j) = queue.pop_front() {
            let d = dist[j].unwrap();
            for n in self.neighbors(j) {
                if dist[n].is_none() {
                    dist[n] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn diameter(&self) -> usize {
        (0..self.num_joints())
            .flat_map(|j| self.hop_distances(j))
            .map(|d| d.unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SkeletonFile =
            toml::from_str(text).map_err(|e| config(format!("skeleton file: {e}")))?;
        if file.format != SKELETON_FORMAT || file.version != SKELETON_VERSION {
            return Err(config(format!(
                "unsupported skeleton format {} v{} (expected {SKELETON_FORMAT} v{SKELETON_VERSION})",
                file.format, file.version
            )));
        }
        SkeletonSpec::new(
            file.joints,
            file.edges.into_iter().map(|[a, b]| (a, b)).collect(),
            file.center_joint,
            file.reference_pose,
        )
    }

    pub fn to_toml_string(&self) -> String {
        let file = SkeletonFile {
            format: SKELETON_FORMAT.into(),
            version: SKELETON_VERSION,
            joints: self.joint_names.clone(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            center_joint: self.center_joint,
            reference_pose: self.reference_pose.clone(),
        };
        toml::to_string(&file).expect("skeleton serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    format: String,
    version: u32,
    joints: Vec<String>,
    edges: Vec<[usize; 2]>,
    center_joint: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_pose: Option<Vec<Point>>,
}

/// Five-joint grasper: arm, wrist, shaft, and two end effectors branching
/// off the shaft. The reference pose is the straight, half-open grasper
/// arm(0,0) wrist(0,1) shaft(0,2) effectors(∓0.5,3).
pub fn default_tool_skeleton() -> SkeletonSpec {
    SkeletonSpec::new(
        ["arm", "wrist", "shaft", "effector_a", "effector_b"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        vec![(0, 1), (1, 2), (2, 3), (2, 4)],
        2,
        Some(vec![
            [0.0, 0.0],
            [0.0, 1.0],
            [0.0, 2.0],
            [-0.5, 3.0],
            [0.5, 3.0],
        ]),
    )
    .expect("default skeleton is valid")
}

/// Symmetric 0/1 adjacency with zero diagonal.
pub fn build_adjacency(spec: &SkeletonSpec) -> Tensor {
    let v = spec.num_joints();
    let mut a = Tensor::zeros(&[v, v]);
    for &(i, j) in spec.edges() {
        a.set(&[i, j], 1.0);
        a.set(&[j, i], 1.0);
    }
    a
}

/// Stack of `K` adjacency matrices, stored as a `K×V×V` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedAdjacency {
    matrices: Tensor,
}

impl PartitionedAdjacency {
    pub fn from_tensor(matrices: Tensor) -> Result<Self> {
        let s = matrices.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(invalid(format!("partition stack must be K×V×V, got {s:?}")));
        }
        Ok(PartitionedAdjacency { matrices })
    }

    pub fn num_partitions(&self) -> usize {
        self.matrices.shape()[0]
    }

    pub fn num_joints(&self) -> usize {
        self.matrices.shape()[1]
    }

    pub fn matrix(&self, k: usize) -> &[f64] {
        let vv = self.num_joints() * self.num_joints();
        &self.matrices.data()[k * vv..(k + 1) * vv]
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.matrices.get(&[k, i, j])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrices
    }

    pub fn into_tensor(self) -> Tensor {
        self.matrices
    }

    /// Elementwise sum over partitions, `V×V`.
    pub fn total(&self) -> Tensor {
        let v = self.num_joints();
        let mut out = Tensor::zeros(&[v, v]);
        for k in 0..self.num_partitions() {
            for (o, a) in out.data_mut().iter_mut().zip(self.matrix(k)) {
                *o += a;
            }
        }
        out
    }

    /// Partition holding relation `(i, j)`, if any.
    pub fn label(&self, i: usize, j: usize) -> Option<usize> {
        (0..self.num_partitions()).find(|&k| self.get(k, i, j) != 0.0)
    }
}

pub fn gravity_center(pose: &[Point]) -> Point {
    let n = pose.len() as f64;
    let (sx, sy) = pose
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [sx / n, sy / n]
}

fn compare_distance(root: f64, other: f64) -> usize {
    if (other - root).abs() <= TIE_RTOL * root.max(other) {
        ROOT
    } else if other < root {
        CENTRIPETAL
    } else {
        CENTRIFUGAL
    }
}

fn partition_by(
    spec: &SkeletonSpec,
    label: impl Fn(usize, usize) -> usize,
) -> PartitionedAdjacency {
    let v = spec.num_joints();
    let mut m = Tensor::zeros(&[3, v, v]);
    for i in 0..v {
        m.set(&[label(i, i), i, i], 1.0);
        for j in spec.neighbors(i) {
            m.set(&[label(i, j), i, j], 1.0);
        }
    }
    PartitionedAdjacency { matrices: m }
}

/// Spatial-configuration partition (un-normalized) for one pose: each
/// neighbour `j` of root `i` is labelled by comparing its distance to the
/// pose's gravity center with the root's.
pub fn spatial_config_partition(
    spec: &SkeletonSpec,
    pose: &[Point],
) -> Result<PartitionedAdjacency> {
    if pose.len() != spec.num_joints() {
        return Err(invalid(format!(
            "pose has {} joints, skeleton has {}",
            pose.len(),
            spec.num_joints()
        )));
    }
    let c = gravity_center(pose);
    let dist: Vec<f64> = pose
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt())
        .collect();
    Ok(partition_by(spec, |i, j| {
        compare_distance(dist[i], dist[j])
    }))
}

/// Same labelling rule with hop distance to the center joint in place of
/// Euclidean distance to the gravity center.
pub fn hop_partition(spec: &SkeletonSpec) -> PartitionedAdjacency {
    let hops: Vec<usize> = spec
        .hop_distances(spec.center_joint())
        .into_iter()
        .map(|d| d.expect("validated skeleton is connected"))
        .collect();
    partition_by(spec, |i, j| match hops[j].cmp(&hops[i]) {
        std::cmp::Ordering::Equal => ROOT,
        std::cmp::Ordering::Less => CENTRIPETAL,
        std::cmp::Ordering::Greater => CENTRIFUGAL,
    })
}

/// Single-partition `A + I`, the unpartitioned baseline.
pub fn uniform_partition(spec: &SkeletonSpec) -> PartitionedAdjacency {
    let v = spec.num_joints();
    let mut m = build_adjacency(spec)
        .reshape(&[1, v, v])
        .expect("same size");
    for i in 0..v {
        m.set(&[0, i, i], 1.0);
    }
    PartitionedAdjacency { matrices: m }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `Λ⁻¹ A`
    #[default]
    Row,
    /// `Λ^-½ A Λ^-½`
    Symmetric,
}

/// Degree-normalizes each partition matrix with `Λ[i,i] = Σ_j A[i,j] + alpha`.
pub fn normalize_partitions(
    p: &PartitionedAdjacency,
    alpha: f64,
    norm: Normalization,
) -> Result<PartitionedAdjacency> {
    if !(alpha > 0.0) {
        return Err(config(format!(
            "normalization alpha must be positive, got {alpha}"
        )));
    }
    let v = p.num_joints();
    let mut out = p.matrices.clone();
    for k in 0..p.num_partitions() {
        let m = &mut out.data_mut()[k * v * v..(k + 1) * v * v];
        let degree: Vec<f64> = m
            .chunks(v)
            .map(|row| row.iter().sum::<f64>() + alpha)
            .collect();
        for i in 0..v {
            for j in 0..v {
                m[i * v + j] = match norm {
                    Normalization::Row => m[i * v + j] / degree[i],
                    Normalization::Symmetric => {
                        m[i * v + j] / (degree[i].sqrt() * degree[j].sqrt())
                    }
                };
            }
        }
    }
    Ok(PartitionedAdjacency { matrices: out })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// One stack for the whole run, from the reference pose (hop distance
    /// when the skeleton has none).
    #[default]
    Static,
    /// A stack per frame from that frame's own gravity center.
    PerFrame,
    /// Single `A + I` partition.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub mode: PartitionMode,
    pub normalization: Normalization,
    pub alpha: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            mode: PartitionMode::Static,
            normalization: Normalization::Row,
            alpha: 0.001,
        }
    }
}

impl GraphConfig {
    pub fn num_partitions(&self) -> usize {
        match self.mode {
            PartitionMode::Uniform => 1,
            PartitionMode::Static | PartitionMode::PerFrame => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PartitionStack {
    Static(PartitionedAdjacency),
    PerFrame(Vec<PartitionedAdjacency>),
}

/// Normalized partition stack(s). `frames` supplies one pose per frame and is
/// required in per-frame mode; other modes ignore it.
pub fn build_partition_stack(
    spec: &SkeletonSpec,
    cfg: &GraphConfig,
    frames: Option<&[Vec<Point>]>,
) -> Result<PartitionStack> {
    let norm = |p: PartitionedAdjacency| normalize_partitions(&p, cfg.alpha, cfg.normalization);
    match cfg.mode {
        PartitionMode::Uniform => Ok(PartitionStack::Static(norm(uniform_partition(spec))?)),
        PartitionMode::Static => {
            let raw = match spec.reference_pose() {
                Some(pose) => spatial_config_partition(spec, pose)?,
                None => hop_partition(spec),
            };
            Ok(PartitionStack::Static(norm(raw)?))
        }
        PartitionMode::PerFrame => {
            let frames =
                frames.ok_or_else(|| invalid("per-frame partitioning needs pose coordinates"))?;
            frames
                .iter()
                .map(|pose| norm(spatial_config_partition(spec, pose)?))
                .collect::<Result<Vec<_>>>()
                .map(PartitionStack::PerFrame)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a_plus_i(spec: &SkeletonSpec) -> Tensor {
        let mut a = build_adjacency(spec);
        for i in 0..spec.num_joints() {
            a.set(&[i, i], 1.0);
        }
        a
    }

    #[test]
    fn default_skeleton_shape() {
        let s = default_tool_skeleton();
        assert_eq!(s.num_joints(), 5);
        assert_eq!(s.edges().len(), 4);
        assert_eq!(s.center_joint(), 2);
        // A connected graph with V−1 edges is a tree.
        assert_eq!(s.edges().len(), s.num_joints() - 1);
        assert_eq!(s.diameter(), 3);
        let a = build_adjacency(&s);
        for i in 0..5 {
            assert_eq!(a.get(&[i, i]), 0.0);
            for j in 0..5 {
                assert_eq!(a.get(&[i, j]), a.get(&[j, i]));
            }
        }
        let ones: Vec<(usize, usize)> = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .filter(|&(i, j)| a.get(&[i, j]) == 1.0)
            .collect();
        assert_eq!(
            ones,
            vec![
                (0, 1),
                (1, 0),
                (1, 2),
                (2, 1),
                (2, 3),
                (2, 4),
                (3, 2),
                (4, 2)
            ]
        );
    }

    #[test]
    fn two_joint_adjacency() {
        let s = SkeletonSpec::new(vec!["a".into(), "b".into()], vec![(0, 1)], 0, None).unwrap();
        assert_eq!(build_adjacency(&s).data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn invalid_skeletons_rejected() {
        let names = || vec!["a".to_string(), "b".into(), "c".into()];
        assert!(
            SkeletonSpec::new(names(), vec![(0, 1)], 0, None).is_err(),
            "disconnected"
        );
        assert!(SkeletonSpec::new(names(), vec![(0, 1), (1, 1), (1, 2)], 0, None).is_err());
        assert!(SkeletonSpec::new(names(), vec![(0, 1), (1, 0), (1, 2)], 0, None).is_err());
        assert!(SkeletonSpec::new(names(), vec![(0, 1), (1, 3)], 0, None).is_err());
        assert!(SkeletonSpec::new(names(), vec![(0, 1), (1, 2)], 3, None).is_err());
        assert!(
            SkeletonSpec::new(names(), vec![(0, 1), (1, 2)], 0, Some(vec![[0.0, 0.0]])).is_err()
        );
    }

    #[test]
    fn reference_pose_labels() {
        let s = default_tool_skeleton();
        let pose = s.reference_pose().unwrap().to_vec();
        let c = gravity_center(&pose);
        assert!((c[0] - 0.0).abs() < 1e-15 && (c[1] - 1.8).abs() < 1e-12);
        let p = spatial_config_partition(&s, &pose).unwrap();
        assert_eq!(p.label(2, 2), Some(ROOT));
        assert_eq!(p.label(2, 1), Some(CENTRIFUGAL));
        assert_eq!(p.label(2, 3), Some(CENTRIFUGAL));
        assert_eq!(p.label(2, 4), Some(CENTRIFUGAL));
        assert_eq!(p.label(1, 2), Some(CENTRIPETAL));
        assert_eq!(p.label(1, 0), Some(CENTRIFUGAL));
        assert_eq!(p.label(0, 1), Some(CENTRIPETAL));
        assert_eq!(p.label(3, 2), Some(CENTRIPETAL));
        assert_eq!(p.total(), a_plus_i(&s));
    }

    #[test]
    fn coincident_joints_all_root() {
        let s = default_tool_skeleton();
        let p = spatial_config_partition(&s, &[[0.3, -0.7]; 5]).unwrap();
        assert_eq!(p.total(), a_plus_i(&s));
        assert!(p.matrix(CENTRIPETAL).iter().all(|&v| v == 0.0));
        assert!(p.matrix(CENTRIFUGAL).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_guards_empty_rows() {
        let s = default_tool_skeleton();
        let p = spatial_config_partition(&s, &[[0.0, 0.0]; 5]).unwrap();
        let n = normalize_partitions(&p, 0.001, Normalization::Row).unwrap();
        assert!(n.matrix(CENTRIFUGAL).iter().all(|&v| v == 0.0));
        assert!(n.tensor().first_non_finite().is_none());
        let row: f64 = (0..5).map(|j| n.get(ROOT, 2, j)).sum();
        // Row of A+I at the shaft has 4 entries.
        assert!((row - 4.0 / 4.001).abs() < 1e-15);
        assert!(normalize_partitions(&p, 0.0, Normalization::Row).is_err());
    }

    #[test]
    fn uniform_partition_degrees() {
        let s = default_tool_skeleton();
        let u = uniform_partition(&s);
        let degrees: Vec<f64> = u.matrix(0).chunks(5).map(|r| r.iter().sum()).collect();
        assert_eq!(degrees, vec![2.0, 3.0, 4.0, 2.0, 2.0]);
        let n = normalize_partitions(&u, 1e-12, Normalization::Row).unwrap();
        for row in n.matrix(0).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn static_stack_composes_partition_and_normalization() {
        let s = default_tool_skeleton();
        let cfg = GraphConfig::default();
        let PartitionStack::Static(stack) = build_partition_stack(&s, &cfg, None).unwrap() else {
            panic!("static mode");
        };
        let want = normalize_partitions(
            &spatial_config_partition(&s, s.reference_pose().unwrap()).unwrap(),
            0.001,
            Normalization::Row,
        )
        .unwrap();
        assert_eq!(stack, want);

        let uniform = GraphConfig {
            mode: PartitionMode::Uniform,
            ..cfg.clone()
        };
        let PartitionStack::Static(u) = build_partition_stack(&s, &uniform, None).unwrap() else {
            panic!("uniform is static");
        };
        assert_eq!(u.num_partitions(), 1);

        let per_frame = GraphConfig {
            mode: PartitionMode::PerFrame,
            ..cfg
        };
        assert!(build_partition_stack(&s, &per_frame, None).is_err());
        let frames = vec![s.reference_pose().unwrap().to_vec(); 3];
        let PartitionStack::PerFrame(stacks) =
            build_partition_stack(&s, &per_frame, Some(&frames)).unwrap()
        else {
            panic!("per frame");
        };
        assert_eq!(stacks.len(), 3);
        assert_eq!(stacks[1], want);
    }

    #[test]
    fn hop_fallback_labels() {
        let s = default_tool_skeleton().without_reference_pose();
        let hops: Vec<usize> = s.hop_distances(2).into_iter().map(Option::unwrap).collect();
        assert_eq!(hops, vec![2, 1, 0, 1, 1]);
        let p = hop_partition(&s);
        assert_eq!(p.label(1, 2), Some(CENTRIPETAL));
        assert_eq!(p.label(1, 0), Some(CENTRIFUGAL));
        assert_eq!(p.label(1, 1), Some(ROOT));
        assert_eq!(p.total(), a_plus_i(&s));
        let PartitionStack::Static(stack) =
            build_partition_stack(&s, &GraphConfig::default(), None).unwrap()
        else {
            panic!()
        };
        assert_eq!(
            stack,
            normalize_partitions(&p, 0.001, Normalization::Row).unwrap()
        );
    }

    #[test]
    fn skeleton_file_round_trip_and_version_check() {
        let s = default_tool_skeleton();
        let text = s.to_toml_string();
        assert_eq!(SkeletonSpec::from_toml_str(&text).unwrap(), s);
        let bumped = text.replace("version = 1", "version = 2");
        assert!(SkeletonSpec::from_toml_str(&bumped).is_err());
    }

    fn pose_strategy() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(prop::array::uniform2(-1.0f64..1.0), 5)
    }

    proptest! {
        #[test]
        fn partitions_are_exhaustive(pose in pose_strategy()) {
            let s = default_tool_skeleton();
            let p = spatial_config_partition(&s, &pose).unwrap();
            prop_assert_eq!(p.total(), a_plus_i(&s));
        }

        #[test]
        fn labels_invariant_under_similarity(
            pose in pose_strategy(),
            angle in -3.1f64..3.1,
            shift in prop::array::uniform2(-5.0f64..5.0),
            scale in 0.2f64..5.0,
            pivot in prop::array::uniform2(-2.0f64..2.0),
        ) {
            let s = default_tool_skeleton();
            let (sin, cos) = angle.sin_cos();
            let moved: Vec<Point> = pose
                .iter()
                .map(|p| {
                    let (x, y) = (p[0] - pivot[0], p[1] - pivot[1]);
                    [
                        scale * (cos * x - sin * y) + pivot[0] + shift[0],
                        scale * (sin * x + cos * y) + pivot[1] + shift[1],
                    ]
                })
                .collect();
            let a = spatial_config_partition(&s, &pose).unwrap();
            let b = spatial_config_partition(&s, &moved).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn normalization_stays_finite_and_sub_stochastic(
            entries in prop::collection::vec(0.0f64..10.0, 75),
            alpha in 1e-6f64..1.0,
        ) {
            let p = PartitionedAdjacency::from_tensor(Tensor::new(&[3, 5, 5], entries).unwrap()).unwrap();
            let n = normalize_partitions(&p, alpha, Normalization::Row).unwrap();
            prop_assert!(n.tensor().first_non_finite().is_none());
            for k in 0..3 {
                for row in n.matrix(k).chunks(5) {
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!(row.iter().sum::<f64>() <= 1.0);
                }
            }
        }
    }
}
