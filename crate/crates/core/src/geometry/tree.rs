use std::ops::Range;

use super::points::PointSet;
use crate::error::{Error, Result};

/// Relative tolerance under which two boxes separated by a gap still count as touching.
pub const ADJACENCY_RTOL: f64 = 1e-10;

const ROOT_MARGIN: f64 = 1e-12;
const MAX_DEPTH: usize = 64;

/// Axis-aligned box; only the first `dim` entries are meaningful.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl BBox {
    fn width(&self, d: usize) -> f64 {
        self.hi[d] - self.lo[d]
    }

    /// Boxes touch or overlap in every dimension, up to [`ADJACENCY_RTOL`].
    pub fn adjacent(&self, other: &BBox, dim: usize) -> bool {
        (0..dim).all(|d| {
            let tol = ADJACENCY_RTOL * self.width(d).max(other.width(d));
            self.lo[d] <= other.hi[d] + tol && other.lo[d] <= self.hi[d] + tol
        })
    }

    pub fn contains_box(&self, other: &BBox, dim: usize) -> bool {
        (0..dim).all(|d| self.lo[d] <= other.lo[d] && other.hi[d] <= self.hi[d])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    /// Leaf level is 1, the root sits on level `L`.
    pub level: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Contiguous range of tree-ordered point indices.
    pub range: Range<usize>,
    pub bbox: BBox,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

/// H2 block classes for a same-level node pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockType {
    /// Near field: `j` is adjacent to `i`.
    Type1,
    /// Far, and already inside a far block of the parents.
    Type2,
    /// Far, with near (or identical) parents: stored in low-rank form.
    Type3,
}

/// A `2^d`-ary spatial partition of a point set.
///
/// Every leaf sits on level 1. Leaves that bisection reaches early are
/// extended by single-child chains so that each level partitions the index set.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionTree {
    dim: usize,
    nodes: Vec<Node>,
    /// `perm[k]` is the original index of the point at tree position `k`.
    perm: Vec<usize>,
    /// `levels[k - 1]` lists the nodes on level `k`, in index-range order.
    levels: Vec<Vec<usize>>,
    near: Vec<Vec<usize>>,
    interaction: Vec<Vec<usize>>,
    leaf_cap: usize,
}

struct Proto {
    range: Range<usize>,
    bbox: BBox,
    children: Vec<Proto>,
}

impl Proto {
    fn depth(&self) -> usize {
        1 + self.children.iter().map(Proto::depth).max().unwrap_or(0)
    }
}

fn tight_box(points: &PointSet, idx: &[usize]) -> BBox {
    let dim = points.dim();
    let mut b = BBox { lo: [0.0; 3], hi: [0.0; 3] };
    for d in 0..dim {
        b.lo[d] = f64::INFINITY;
        b.hi[d] = f64::NEG_INFINITY;
    }
    for &i in idx {
        let x = points.point(i);
        for d in 0..dim {
            b.lo[d] = b.lo[d].min(x[d]);
            b.hi[d] = b.hi[d].max(x[d]);
        }
    }
    b
}

fn octant(x: &[f64], mid: &[f64; 3], dim: usize) -> usize {
    (0..dim).fold(0, |code, d| code | (usize::from(x[d] > mid[d]) << d))
}

fn child_box(parent: &BBox, mid: &[f64; 3], code: usize, dim: usize) -> BBox {
    let mut b = *parent;
    for d in 0..dim {
        if code >> d & 1 == 1 {
            b.lo[d] = mid[d];
        } else {
            b.hi[d] = mid[d];
        }
    }
    b
}

fn split(points: &PointSet, perm: &mut [usize], offset: usize, mut bbox: BBox, leaf_cap: usize, depth: usize) -> Proto {
    let dim = points.dim();
    let n = perm.len();
    let range = offset..offset + n;
    if n < leaf_cap || n <= 1 || depth >= MAX_DEPTH {
        return Proto { range, bbox, children: Vec::new() };
    }
    let tight = tight_box(points, perm);
    if (0..dim).all(|d| tight.lo[d] == tight.hi[d]) {
        // Coincident points cannot be separated.
        return Proto { range, bbox, children: Vec::new() };
    }
    let nchild = 1 << dim;
    let mut guard = depth;
    loop {
        let mut mid = [0.0; 3];
        for d in 0..dim {
            mid[d] = 0.5 * (bbox.lo[d] + bbox.hi[d]);
        }
        let mut counts = vec![0usize; nchild];
        let codes: Vec<usize> = perm.iter().map(|&i| octant(points.point(i), &mid, dim)).collect();
        for &c in &codes {
            counts[c] += 1;
        }
        let nonempty = counts.iter().filter(|&&c| c > 0).count();
        if nonempty == 1 && guard < MAX_DEPTH {
            // Collapse the single populated child into this node.
            bbox = child_box(&bbox, &mid, codes[0], dim);
            guard += 1;
            continue;
        }
        if nonempty == 1 {
            return Proto { range, bbox, children: Vec::new() };
        }
        let mut starts = vec![0usize; nchild + 1];
        for c in 0..nchild {
            starts[c + 1] = starts[c] + counts[c];
        }
        let mut sorted = vec![0usize; n];
        let mut fill = starts.clone();
        for (k, &c) in codes.iter().enumerate() {
            sorted[fill[c]] = perm[k];
            fill[c] += 1;
        }
        perm.copy_from_slice(&sorted);
        let mut children = Vec::with_capacity(nonempty);
        for c in 0..nchild {
            if counts[c] == 0 {
                continue;
            }
            let sub = &mut perm[starts[c]..starts[c + 1]];
            let cb = child_box(&bbox, &mid, c, dim);
            children.push(split(points, sub, offset + starts[c], cb, leaf_cap, depth + 1));
        }
        return Proto { range, bbox, children };
    }
}

impl PartitionTree {
    /// Recursively bisects the enclosing box of `points` in every dimension
    /// until each leaf holds fewer than `leaf_cap` points (single points and
    /// coincident clusters always terminate).
    pub fn build(points: &PointSet, leaf_cap: usize) -> Result<Self> {
        if leaf_cap == 0 {
            return Err(Error::invalid("leaf_cap must be at least 1"));
        }
        let dim = points.dim();
        let mut perm: Vec<usize> = (0..points.len()).collect();
        let mut root_box = tight_box(points, &perm);
        let extent = (0..dim).map(|d| root_box.width(d)).fold(0.0f64, f64::max);
        let scale = if extent > 0.0 { extent } else { 1.0 };
        for d in 0..dim {
            root_box.lo[d] -= ROOT_MARGIN * scale;
            root_box.hi[d] += ROOT_MARGIN * scale;
        }
        let proto = split(points, &mut perm, 0, root_box, leaf_cap, 0);
        let num_levels = proto.depth();

        let mut tree = PartitionTree {
            dim,
            nodes: Vec::new(),
            perm,
            levels: vec![Vec::new(); num_levels],
            near: Vec::new(),
            interaction: Vec::new(),
            leaf_cap,
        };
        tree.emit(&proto, num_levels, None);
        tree.compute_lists();
        Ok(tree)
    }

    fn emit(&mut self, proto: &Proto, level: usize, parent: Option<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            level,
            parent,
            children: Vec::new(),
            range: proto.range.clone(),
            bbox: proto.bbox,
        });
        self.levels[level - 1].push(id);
        if let Some(p) = parent {
            self.nodes[p].children.push(id);
        }
        if level > 1 {
            if proto.children.is_empty() {
                // Pad a shallow leaf down to level 1.
                self.emit(proto, level - 1, Some(id));
            } else {
                for c in &proto.children {
                    self.emit(c, level - 1, Some(id));
                }
            }
        }
        id
    }

    fn compute_lists(&mut self) {
        let n = self.nodes.len();
        self.near = vec![Vec::new(); n];
        self.interaction = vec![Vec::new(); n];
        for k in (1..self.num_levels()).rev() {
            for &i in &self.levels[k - 1] {
                let p = self.nodes[i].parent.expect("nonroot node has a parent");
                let mut cands: Vec<usize> = self.nodes[p].children.clone();
                for &q in &self.near[p] {
                    cands.extend_from_slice(&self.nodes[q].children);
                }
                cands.sort_unstable();
                let mut near = Vec::new();
                let mut far = Vec::new();
                for j in cands {
                    if j == i {
                        continue;
                    }
                    if self.nodes[i].bbox.adjacent(&self.nodes[j].bbox, self.dim) {
                        near.push(j);
                    } else {
                        far.push(j);
                    }
                }
                self.near[i] = near;
                self.interaction[i] = far;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaf_cap(&self) -> usize {
        self.leaf_cap
    }

    pub fn num_points(&self) -> usize {
        self.perm.len()
    }

    /// Number of levels `L`; the root is on level `L`.
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes on level `k` (1-based), ordered by index range.
    pub fn level(&self, k: usize) -> &[usize] {
        &self.levels[k - 1]
    }

    pub fn leaves(&self) -> &[usize] {
        &self.levels[0]
    }

    /// Largest number of children of any node.
    pub fn max_branching(&self) -> usize {
        self.nodes.iter().map(|n| n.children.len()).max().unwrap_or(0)
    }

    /// Tree position → original point index.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Original point index → tree position.
    pub fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (k, &i) in self.perm.iter().enumerate() {
            inv[i] = k;
        }
        inv
    }

    /// The point set reordered into tree order.
    pub fn permute_points(&self, points: &PointSet) -> PointSet {
        points.permuted(&self.perm)
    }

    /// Matrix row range of node `i` when every point owns `block_size` rows.
    pub fn matrix_range(&self, i: usize, block_size: usize) -> Range<usize> {
        let r = &self.nodes[i].range;
        r.start * block_size..r.end * block_size
    }

    /// Same-level nodes adjacent to `i` (excluding `i`).
    pub fn near(&self, i: usize) -> &[usize] {
        &self.near[i]
    }

    /// Same-level far nodes whose parents are near: the stored low-rank blocks of row `i`.
    pub fn interaction_list(&self, i: usize) -> &[usize] {
        &self.interaction[i]
    }

    /// Ancestor of `i` on level `k` (`i` itself when `k` equals its level).
    pub fn ancestor_at_level(&self, mut i: usize, k: usize) -> usize {
        assert!(k >= self.nodes[i].level, "level {k} is below node {i}");
        while self.nodes[i].level < k {
            i = self.nodes[i].parent.expect("level within tree height");
        }
        i
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.nodes[i].bbox.adjacent(&self.nodes[j].bbox, self.dim)
    }

    /// Far field `F_i`: nodes on `i`'s level whose boxes are not adjacent to `i`'s box.
    pub fn far_field(&self, i: usize) -> Vec<usize> {
        self.level(self.nodes[i].level)
            .iter()
            .copied()
            .filter(|&j| j != i && !self.adjacent(i, j))
            .collect()
    }

    /// The HSS specialization of the far field: every other node on the level.
    pub fn far_field_hss(&self, i: usize) -> Vec<usize> {
        self.level(self.nodes[i].level).iter().copied().filter(|&j| j != i).collect()
    }

    pub fn classify_block(&self, i: usize, j: usize) -> Result<BlockType> {
        if i >= self.nodes.len() || j >= self.nodes.len() {
            return Err(Error::invalid(format!("node pair ({i}, {j}) out of range")));
        }
        if self.nodes[i].level != self.nodes[j].level {
            return Err(Error::invalid(format!(
                "nodes {i} and {j} are on levels {} and {}",
                self.nodes[i].level, self.nodes[j].level
            )));
        }
        if i == j {
            return Err(Error::invalid("diagonal blocks have no block type"));
        }
        if self.adjacent(i, j) {
            return Ok(BlockType::Type1);
        }
        let (pi, pj) = match (self.nodes[i].parent, self.nodes[j].parent) {
            (Some(a), Some(b)) => (a, b),
            _ => return Ok(BlockType::Type3),
        };
        if pi != pj && !self.adjacent(pi, pj) {
            Ok(BlockType::Type2)
        } else {
            Ok(BlockType::Type3)
        }
    }

    /// Checks structural invariants; used when loading untrusted data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::format(m));
        let n = self.nodes.len();
        if n == 0 || self.levels.is_empty() {
            return bad("empty tree".into());
        }
        if !(2..=3).contains(&self.dim) {
            return bad(format!("tree dimension {}", self.dim));
        }
        let npts = self.perm.len();
        let mut seen = vec![false; npts];
        for &p in &self.perm {
            if p >= npts || seen[p] {
                return bad("permutation is not a bijection".into());
            }
            seen[p] = true;
        }
        let l = self.levels.len();
        let root = &self.nodes[0];
        if root.parent.is_some() || root.level != l || root.range != (0..npts) {
            return bad("malformed root".into());
        }
        let mut counted = 0;
        for (k, lvl) in self.levels.iter().enumerate() {
            let mut next = 0;
            for &i in lvl {
                if i >= n || self.nodes[i].level != k + 1 {
                    return bad(format!("level list {} holds node {i} of another level", k + 1));
                }
                let r = &self.nodes[i].range;
                if r.start != next || r.end < r.start {
                    return bad(format!("level {} ranges do not tile the index set", k + 1));
                }
                next = r.end;
            }
            if next != npts {
                return bad(format!("level {} ranges do not cover all points", k + 1));
            }
            counted += lvl.len();
        }
        if counted != n {
            return bad("level lists do not cover all nodes".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_empty() {
                return bad(format!("node {i} is empty"));
            }
            if (node.level == 1) != node.is_leaf() {
                return bad(format!("node {i}: leaves must sit exactly on level 1"));
            }
            if let Some(p) = node.parent {
                if p >= n || !self.nodes[p].children.contains(&i) {
                    return bad(format!("node {i} has inconsistent parent"));
                }
            } else if i != 0 {
                return bad(format!("node {i} has no parent"));
            }
            let mut next = node.range.start;
            for &c in &node.children {
                if c >= n || self.nodes[c].parent != Some(i) || self.nodes[c].level + 1 != node.level {
                    return bad(format!("node {i} has inconsistent child {c}"));
                }
                if self.nodes[c].range.start != next {
                    return bad(format!("children of node {i} do not partition its range"));
                }
                next = self.nodes[c].range.end;
            }
            if !node.children.is_empty() && next != node.range.end {
                return bad(format!("children of node {i} do not partition its range"));
            }
            for d in 0..self.dim {
                if !(node.bbox.lo[d].is_finite() && node.bbox.hi[d].is_finite())
                    || node.bbox.lo[d] > node.bbox.hi[d]
                {
                    return bad(format!("node {i} has an invalid box"));
                }
            }
        }
        Ok(())
    }

    /// Reassembles a tree from serialized parts and recomputes neighbor lists.
    pub(crate) fn from_parts(dim: usize, nodes: Vec<Node>, perm: Vec<usize>, leaf_cap: usize) -> Result<Self> {
        let num_levels = nodes.first().map(|n| n.level).unwrap_or(0);
        if num_levels == 0 || num_levels > nodes.len() {
            return Err(Error::format("invalid root level"));
        }
        let mut levels = vec![Vec::new(); num_levels];
        for (i, node) in nodes.iter().enumerate() {
            if node.level == 0 || node.level > num_levels {
                return Err(Error::format(format!("node {i} has level {}", node.level)));
            }
            levels[node.level - 1].push(i);
        }
        for lvl in &mut levels {
            lvl.sort_by_key(|&i| (nodes[i].range.start, nodes[i].range.end));
        }
        let mut tree = PartitionTree {
            dim,
            nodes,
            perm,
            levels,
            near: Vec::new(),
            interaction: Vec::new(),
            leaf_cap,
        };
        tree.validate()?;
        tree.compute_lists();
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::points::generate_ball_points;

    fn cube_corners() -> PointSet {
        let mut c = Vec::new();
        for k in 0..8 {
            c.extend([(k & 1) as f64, (k >> 1 & 1) as f64, (k >> 2 & 1) as f64]);
        }
        PointSet::new(3, c).unwrap()
    }

    #[test]
    fn small_set_is_single_node() {
        let p = generate_ball_points(100, 1).unwrap();
        let t = PartitionTree::build(&p, 400).unwrap();
        assert_eq!(t.num_levels(), 1);
        assert_eq!(t.num_nodes(), 1);
        assert!(t.far_field(0).is_empty());
        t.validate().unwrap();
    }

    #[test]
    fn cube_corners_split_into_eight_leaves() {
        let t = PartitionTree::build(&cube_corners(), 1).unwrap();
        assert_eq!(t.num_levels(), 2);
        assert_eq!(t.node(0).children.len(), 8);
        for &l in t.leaves() {
            assert_eq!(t.node(l).len(), 1);
        }
        // All eight octants share the centre of the cube.
        for &l in t.leaves() {
            assert!(t.far_field(l).is_empty());
        }
    }

    #[test]
    fn ball_tree_partitions_indices() {
        let p = generate_ball_points(5000, 2).unwrap();
        let t = PartitionTree::build(&p, 400).unwrap();
        t.validate().unwrap();
        let mut next = 0;
        for &l in t.leaves() {
            let r = &t.node(l).range;
            assert_eq!(r.start, next);
            assert!(r.len() < 400);
            next = r.end;
        }
        assert_eq!(next, 5000);
        assert!(t.max_branching() <= 8);
        // Every point lies inside the box of each of its ancestors.
        let pts = t.permute_points(&p);
        for node in t.nodes() {
            for k in node.range.clone() {
                let x = pts.point(k);
                for d in 0..3 {
                    assert!(node.bbox.lo[d] <= x[d] && x[d] <= node.bbox.hi[d]);
                }
            }
            for &c in &node.children {
                assert!(node.bbox.contains_box(&t.node(c).bbox, 3));
            }
        }
    }

    #[test]
    fn coincident_points_terminate() {
        let p = PointSet::new(2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let t = PartitionTree::build(&p, 1).unwrap();
        t.validate().unwrap();
        let sizes: Vec<usize> = t.leaves().iter().map(|&l| t.node(l).len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 4);
        assert!(sizes.contains(&3));
    }

    #[test]
    fn single_populated_octant_collapses() {
        // Three points clustered in one corner of a large box.
        let p = PointSet::new(2, vec![0.0, 0.0, 100.0, 100.0, 99.0, 99.5, 99.5, 99.0]).unwrap();
        let t = PartitionTree::build(&p, 2).unwrap();
        t.validate().unwrap();
        for node in t.nodes() {
            if !node.is_leaf() {
                // A node with one child is only ever a padding chain over a leaf.
                if node.children.len() == 1 {
                    assert_eq!(t.node(node.children[0]).range, node.range);
                    assert_eq!(t.node(node.children[0]).bbox, node.bbox);
                }
            }
        }
    }

    #[test]
    fn far_field_is_symmetric_and_classes_partition() {
        let p = generate_ball_points(4000, 9).unwrap();
        let t = PartitionTree::build(&p, 64).unwrap();
        assert!(t.num_levels() >= 3);
        for k in 1..=t.num_levels() {
            for &i in t.level(k) {
                let fi = t.far_field(i);
                for &j in &fi {
                    assert!(t.far_field(j).contains(&i));
                }
                for &j in t.level(k) {
                    if i == j {
                        assert!(t.classify_block(i, j).is_err());
                        continue;
                    }
                    let ty = t.classify_block(i, j).unwrap();
                    assert_eq!(ty == BlockType::Type1, !fi.contains(&j));
                    match ty {
                        BlockType::Type2 => {
                            let (pi, pj) = (t.node(i).parent.unwrap(), t.node(j).parent.unwrap());
                            assert!(t.far_field(pi).contains(&pj));
                        }
                        BlockType::Type3 => {
                            assert!(t.interaction_list(i).contains(&j));
                        }
                        BlockType::Type1 => assert!(t.near(i).contains(&j)),
                    }
                }
                assert_eq!(
                    t.near(i).len() + t.far_field(i).len() + 1,
                    t.level(k).len(),
                    "near list must hold every adjacent node"
                );
            }
        }
    }

    #[test]
    fn type2_blocks_sit_inside_a_type3_ancestor_pair() {
        let p = generate_ball_points(4000, 21).unwrap();
        let t = PartitionTree::build(&p, 50).unwrap();
        let mut type2 = 0;
        for k in 1..t.num_levels() {
            for &i in t.level(k) {
                for &j in t.level(k) {
                    if i == j || t.classify_block(i, j).unwrap() != BlockType::Type2 {
                        continue;
                    }
                    type2 += 1;
                    let (mut a, mut b) = (i, j);
                    loop {
                        a = t.node(a).parent.unwrap();
                        b = t.node(b).parent.unwrap();
                        if t.classify_block(a, b).unwrap() == BlockType::Type3 {
                            break;
                        }
                    }
                    assert!(t.node(a).bbox.contains_box(&t.node(i).bbox, 3));
                    assert!(t.node(b).bbox.contains_box(&t.node(j).bbox, 3));
                }
            }
        }
        assert!(type2 > 0);
    }

    #[test]
    fn face_sharing_siblings_are_near() {
        let p = PointSet::new(2, vec![0.1, 0.5, 0.9, 0.5, 0.2, 0.4, 0.8, 0.6]).unwrap();
        let t = PartitionTree::build(&p, 3).unwrap();
        let leaves = t.leaves();
        assert!(leaves.len() >= 2);
        let (a, b) = (leaves[0], leaves[1]);
        assert_eq!(t.classify_block(a, b).unwrap(), BlockType::Type1);
        assert!(!t.far_field(a).contains(&b));
    }

    #[test]
    fn mismatched_levels_rejected() {
        let p = generate_ball_points(2000, 3).unwrap();
        let t = PartitionTree::build(&p, 100).unwrap();
        let leaf = t.leaves()[0];
        assert!(matches!(t.classify_block(leaf, t.root()), Err(Error::InvalidArgument(_))));
    }
}
