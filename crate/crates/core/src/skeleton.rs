//! Skeleton topologies, hop distances and per-hop adjacency matrices.
//!
//! Hop sets follow two conventions. The short-range set of radius `S`
//! contains every node within `S` bone edges of the target, the target
//! included. A long-range ring of radius `k` contains only nodes at exactly
//! `k` edges, so the rings partition the skeleton and never count a closer
//! node twice.

use std::collections::{HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::GraphError;

/// Name of the built-in 17-joint Human3.6M skeleton.
pub const H36M_PRESET: &str = "h36m17";

/// Undirected, connected skeleton graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkeletonTopology {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    left_right_pairs: Vec<[usize; 2]>,
    root: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    joint_names: Vec<String>,
    #[serde(skip)]
    neighbors: Vec<Vec<usize>>,
}

impl<'de> Deserialize<'de> for SkeletonTopology {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = TopologyFile::deserialize(d)?;
        SkeletonTopology::from_file_repr(file).map_err(serde::de::Error::custom)
    }
}

/// On-disk form of a topology (JSON or TOML).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopologyFile {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub left_right_pairs: Vec<[usize; 2]>,
    #[serde(default)]
    pub root: usize,
    #[serde(default)]
    pub joint_names: Vec<String>,
}

impl SkeletonTopology {
    /// Validates indices, rejects self-loops and duplicates, and checks that
    /// every node is reachable from `root`.
    pub fn new(
        num_nodes: usize,
        edges: &[(usize, usize)],
        left_right_pairs: &[(usize, usize)],
        root: usize,
    ) -> Result<Self, GraphError> {
        if num_nodes == 0 || edges.is_empty() {
            return Err(GraphError::Empty);
        }
        let check = |index: usize| {
            if index >= num_nodes {
                Err(GraphError::IndexOutOfRange { index, num_nodes })
            } else {
                Ok(())
            }
        };
        check(root)?;
        let mut seen = HashSet::new();
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            check(a)?;
            check(b)?;
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(GraphError::DuplicateEdge(a, b));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let mut used = HashSet::new();
        for &(l, r) in left_right_pairs {
            check(l)?;
            check(r)?;
            for ix in [l, r] {
                if !used.insert(ix) {
                    return Err(GraphError::OverlappingPairs(ix));
                }
            }
        }
        let topo = SkeletonTopology {
            num_nodes,
            edges: edges.iter().map(|&(a, b)| [a, b]).collect(),
            left_right_pairs: left_right_pairs.iter().map(|&(l, r)| [l, r]).collect(),
            root,
            joint_names: Vec::new(),
            neighbors,
        };
        let dist = topo.bfs(root);
        if let Some(unreached) = dist.iter().position(|d| d.is_none()) {
            return Err(GraphError::DisconnectedGraph(unreached));
        }
        Ok(topo)
    }

    pub fn with_joint_names(mut self, names: Vec<String>) -> Self {
        if names.len() == self.num_nodes {
            self.joint_names = names;
        }
        self
    }

    pub fn from_file_repr(file: TopologyFile) -> Result<Self, GraphError> {
        let edges: Vec<_> = file.edges.iter().map(|e| (e[0], e[1])).collect();
        let pairs: Vec<_> = file.left_right_pairs.iter().map(|p| (p[0], p[1])).collect();
        Ok(Self::new(file.num_nodes, &edges, &pairs, file.root)?.with_joint_names(file.joint_names))
    }

    pub fn to_file_repr(&self) -> TopologyFile {
        TopologyFile {
            num_nodes: self.num_nodes,
            edges: self.edges.clone(),
            left_right_pairs: self.left_right_pairs.clone(),
            root: self.root,
            joint_names: self.joint_names.clone(),
        }
    }

    /// Loads a topology file; `.toml` files are parsed as TOML, anything else
    /// as JSON.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read topology {}: {e}", path.display()))?;
        let file: TopologyFile = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text)?
        } else {
            serde_json::from_str(&text)?
        };
        Ok(Self::from_file_repr(file)?)
    }

    /// Resolves a preset name or a path to a topology file.
    pub fn from_preset_or_path(name: &str) -> anyhow::Result<Self> {
        if let Some(topo) = Self::preset(name) {
            return Ok(topo);
        }
        let path = Path::new(name);
        if path.exists() {
            Self::load(path)
        } else {
            Err(GraphError::UnknownPreset(name.to_string()).into())
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            H36M_PRESET | "h36m" => Some(Self::h36m17()),
            _ => None,
        }
    }

    /// 17-joint Human3.6M skeleton rooted at the pelvis.
    pub fn h36m17() -> Self {
        const EDGES: [(usize, usize); 16] = [
            (0, 1),
            (1, 2),
            (2, 3),
            (0, 4),
            (4, 5),
            (5, 6),
            (0, 7),
            (7, 8),
            (8, 9),
            (9, 10),
            (8, 11),
            (11, 12),
            (12, 13),
            (8, 14),
            (14, 15),
            (15, 16),
        ];
        const PAIRS: [(usize, usize); 6] = [(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)];
        const NAMES: [&str; 17] = [
            "pelvis",
            "right_hip",
            "right_knee",
            "right_ankle",
            "left_hip",
            "left_knee",
            "left_ankle",
            "spine",
            "thorax",
            "neck",
            "head",
            "left_shoulder",
            "left_elbow",
            "left_wrist",
            "right_shoulder",
            "right_elbow",
            "right_wrist",
        ];
        Self::new(17, &EDGES, &PAIRS, 0)
            .expect("built-in skeleton is valid")
            .with_joint_names(NAMES.iter().map(|s| s.to_string()).collect())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn left_right_pairs(&self) -> &[[usize; 2]] {
        &self.left_right_pairs
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_name(&self, i: usize) -> String {
        self.joint_names.get(i).cloned().unwrap_or_else(|| format!("joint_{i}"))
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.num_nodes
    }

    /// Mirror permutation: `perm[i]` is the joint that `i` swaps with.
    pub fn mirror_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.num_nodes).collect();
        for &[l, r] in &self.left_right_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }

    /// Parent of every node in the breadth-first tree from the root.
    pub fn bfs_parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.num_nodes];
        let mut visited = vec![false; self.num_nodes];
        let mut queue = VecDeque::from([self.root]);
        visited[self.root] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        parent
    }

    /// Nodes in breadth-first order from the root.
    pub fn bfs_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.num_nodes);
        let mut visited = vec![false; self.num_nodes];
        let mut queue = VecDeque::from([self.root]);
        visited[self.root] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &v in &self.neighbors[u] {
                if !visited[v] {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
        }
        order
    }

    fn bfs(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Dense 0/1 edge adjacency without self-loops.
    pub fn adjacency(&self) -> BinaryMatrix {
        let mut m = BinaryMatrix::zeros(self.num_nodes);
        for &[a, b] in &self.edges {
            m.set(a, b, true);
            m.set(b, a, true);
        }
        m
    }
}

/// Square boolean matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(n: usize) -> Self {
        BinaryMatrix {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn ones(n: usize) -> Self {
        BinaryMatrix {
            n,
            bits: vec![true; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.n + j] = v;
    }

    pub fn or(&self, other: &BinaryMatrix) -> BinaryMatrix {
        assert_eq!(self.n, other.n);
        BinaryMatrix {
            n: self.n,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn and(&self, other: &BinaryMatrix) -> BinaryMatrix {
        assert_eq!(self.n, other.n);
        BinaryMatrix {
            n: self.n,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Column indices set in row `i`.
    pub fn row(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.get(i, j)).collect()
    }

    /// All set `(row, col)` pairs in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.n, self.n], data).expect("square")
    }
}

/// All-pairs hop distances plus the derived ring and short-range masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HopPartition {
    n: usize,
    max_hop: usize,
    hop_dist: Vec<usize>,
    rings: Vec<BinaryMatrix>,
}

/// Breadth-first all-pairs distances; rings `1..=max_hop` are precomputed.
pub fn compute_hop_partition(topo: &SkeletonTopology, max_hop: usize) -> Result<HopPartition, GraphError> {
    if max_hop == 0 {
        return Err(GraphError::InvalidMaxHop);
    }
    let n = topo.num_nodes();
    let mut hop_dist = vec![0; n * n];
    for s in 0..n {
        for (t, d) in topo.bfs(s).into_iter().enumerate() {
            hop_dist[s * n + t] = d.ok_or(GraphError::DisconnectedGraph(t))?;
        }
    }
    let rings = (1..=max_hop)
        .map(|k| {
            let mut m = BinaryMatrix::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    if hop_dist[i * n + j] == k {
                        m.set(i, j, true);
                    }
                }
            }
            m
        })
        .collect();
    Ok(HopPartition {
        n,
        max_hop,
        hop_dist,
        rings,
    })
}

impl HopPartition {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn max_hop(&self) -> usize {
        self.max_hop
    }

    pub fn dist(&self, i: usize, j: usize) -> usize {
        self.hop_dist[i * self.n + j]
    }

    /// Largest finite hop distance in the graph.
    pub fn diameter(&self) -> usize {
        self.hop_dist.iter().copied().max().unwrap_or(0)
    }

    /// Nodes at exactly distance `k`; empty beyond the precomputed range.
    pub fn ring(&self, k: usize) -> BinaryMatrix {
        if k == 0 {
            return BinaryMatrix::identity(self.n);
        }
        match self.rings.get(k - 1) {
            Some(m) => m.clone(),
            None => self.within(k).and(&self.beyond(k - 1)),
        }
    }

    /// Nodes within distance `s`, the target itself included.
    pub fn short_range(&self, s: usize) -> BinaryMatrix {
        self.within(s)
    }

    /// Neighbourhood used for long-range hop `k`: the exact ring, or the
    /// cumulative ball of radius `k` when `cumulative` is set.
    pub fn long_range(&self, k: usize, cumulative: bool) -> BinaryMatrix {
        if cumulative {
            self.within(k)
        } else {
            self.ring(k)
        }
    }

    fn within(&self, s: usize) -> BinaryMatrix {
        let mut m = BinaryMatrix::zeros(self.n);
        for (bit, &d) in m.bits.iter_mut().zip(&self.hop_dist) {
            *bit = d <= s;
        }
        m
    }

    fn beyond(&self, s: usize) -> BinaryMatrix {
        let mut m = BinaryMatrix::zeros(self.n);
        for (bit, &d) in m.bits.iter_mut().zip(&self.hop_dist) {
            *bit = d > s;
        }
        m
    }
}

/// Adjacency normalization mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Each row sums to one.
    #[default]
    Row,
    /// `D^{-1/2} A D^{-1/2}` with `D` the row-sum diagonal.
    Symmetric,
}

/// Normalizes a nonnegative square matrix. Every row must have a nonzero
/// entry.
pub fn normalize_adjacency(a: &Tensor, mode: NormMode) -> Result<Tensor, GraphError> {
    normalize_impl(a, mode, false)
}

/// Like [`normalize_adjacency`] but leaves all-zero rows at zero. Used for
/// hop rings, where distant rings are empty for central joints.
pub fn normalize_adjacency_lenient(a: &Tensor, mode: NormMode) -> Result<Tensor, GraphError> {
    normalize_impl(a, mode, true)
}

fn normalize_impl(a: &Tensor, mode: NormMode, allow_empty: bool) -> Result<Tensor, GraphError> {
    let n = a.shape()[0];
    assert_eq!(a.shape(), &[n, n], "adjacency must be square");
    let v = a.data();
    for i in 0..n {
        for j in 0..n {
            let x = v[i * n + j];
            if !(x.is_finite() && x >= 0.0) {
                return Err(GraphError::InvalidEntry(i, j));
            }
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| v[i * n..(i + 1) * n].iter().sum()).collect();
    if !allow_empty {
        if let Some(i) = deg.iter().position(|&d| d == 0.0) {
            return Err(GraphError::ZeroRow(i));
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        if deg[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            let x = v[i * n + j];
            if x == 0.0 {
                continue;
            }
            out[i * n + j] = match mode {
                NormMode::Row => x / deg[i],
                NormMode::Symmetric => x / (deg[i].sqrt() * deg[j].sqrt()),
            };
        }
    }
    Ok(Tensor::new(vec![n, n], out).expect("square"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> SkeletonTopology {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        SkeletonTopology::new(n, &edges, &[], 0).unwrap()
    }

    #[test]
    fn single_edge_topology() {
        let t = SkeletonTopology::new(2, &[(0, 1)], &[], 0).unwrap();
        let h = compute_hop_partition(&t, 1).unwrap();
        assert_eq!(h.dist(0, 1), 1);
    }

    #[test]
    fn construction_errors() {
        assert_eq!(
            SkeletonTopology::new(3, &[(0, 1)], &[], 0),
            Err(GraphError::DisconnectedGraph(2))
        );
        assert_eq!(
            SkeletonTopology::new(2, &[(0, 2)], &[], 0),
            Err(GraphError::IndexOutOfRange { index: 2, num_nodes: 2 })
        );
        assert_eq!(
            SkeletonTopology::new(2, &[(1, 1)], &[], 0),
            Err(GraphError::SelfLoop(1))
        );
        assert_eq!(
            SkeletonTopology::new(2, &[(0, 1), (1, 0)], &[], 0),
            Err(GraphError::DuplicateEdge(1, 0))
        );
        assert_eq!(
            SkeletonTopology::new(3, &[(0, 1), (1, 2)], &[(0, 1), (1, 2)], 0),
            Err(GraphError::OverlappingPairs(1))
        );
        assert_eq!(SkeletonTopology::new(2, &[], &[], 0), Err(GraphError::Empty));
    }

    #[test]
    fn path_graph_distance() {
        let h = compute_hop_partition(&path(4), 3).unwrap();
        assert_eq!(h.dist(0, 3), 3);
        assert_eq!(h.diameter(), 3);
    }

    #[test]
    fn ring_one_is_adjacency() {
        let t = SkeletonTopology::h36m17();
        let h = compute_hop_partition(&t, 6).unwrap();
        assert_eq!(h.ring(1), t.adjacency());
    }

    #[test]
    fn h36m_preset_is_a_tree_with_diameter_eight() {
        let t = SkeletonTopology::h36m17();
        assert!(t.is_tree());
        let h = compute_hop_partition(&t, 8).unwrap();
        // ankle to opposite wrist: ankle-knee-hip-pelvis-spine-thorax-shoulder-elbow-wrist
        assert_eq!(h.diameter(), 8);
        assert_eq!(h.dist(3, 13), 8);
    }

    #[test]
    fn short_range_includes_diagonal() {
        let h = compute_hop_partition(&path(5), 2).unwrap();
        for s in 0..4 {
            let m = h.short_range(s);
            for i in 0..5 {
                assert!(m.get(i, i));
            }
        }
        let expect = BinaryMatrix::identity(5).or(&h.ring(1)).or(&h.ring(2));
        assert_eq!(h.short_range(2), expect);
    }

    #[test]
    fn rings_beyond_precomputed_range() {
        let h = compute_hop_partition(&path(6), 2).unwrap();
        assert_eq!(h.ring(4).pairs(), vec![(0, 4), (1, 5), (4, 0), (5, 1)]);
        assert!(h.ring(9).is_zero());
        assert_eq!(h.long_range(3, true), h.short_range(3));
    }

    #[test]
    fn normalize_examples() {
        let ones = Tensor::full(&[2, 2], 1.0);
        let r = normalize_adjacency(&ones, NormMode::Row).unwrap();
        assert_eq!(r.data(), &[0.5, 0.5, 0.5, 0.5]);
        for mode in [NormMode::Row, NormMode::Symmetric] {
            assert_eq!(normalize_adjacency(&Tensor::eye(3), mode).unwrap(), Tensor::eye(3));
        }
        let h = compute_hop_partition(&path(3), 1).unwrap();
        let a = normalize_adjacency(&h.short_range(1).to_tensor(), NormMode::Row).unwrap();
        // rows: {0,1}, {0,1,2}, {1,2}
        assert_eq!(
            a.data(),
            &[0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.5, 0.5]
        );
        for i in 0..3 {
            let s: f64 = a.data()[i * 3..i * 3 + 3].iter().sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn symmetric_normalization_matches_formula() {
        let h = compute_hop_partition(&path(3), 1).unwrap();
        let a = normalize_adjacency(&h.short_range(1).to_tensor(), NormMode::Symmetric).unwrap();
        let deg = [2.0f64, 3.0, 2.0];
        for i in 0..3 {
            for j in 0..3 {
                let expect = if h.dist(i, j) <= 1 {
                    1.0 / (deg[i] * deg[j]).sqrt()
                } else {
                    0.0
                };
                assert!((a.at(&[i, j]) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_row_is_rejected_unless_lenient() {
        let h = compute_hop_partition(&path(3), 2).unwrap();
        let ring2 = h.ring(2).to_tensor();
        assert_eq!(normalize_adjacency(&ring2, NormMode::Row), Err(GraphError::ZeroRow(1)));
        let r = normalize_adjacency_lenient(&ring2, NormMode::Row).unwrap();
        assert_eq!(&r.data()[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn file_repr_round_trip() {
        let t = SkeletonTopology::h36m17();
        let json = serde_json::to_string(&t.to_file_repr()).unwrap();
        let back: TopologyFile = serde_json::from_str(&json).unwrap();
        assert_eq!(SkeletonTopology::from_file_repr(back).unwrap(), t);
    }
}
