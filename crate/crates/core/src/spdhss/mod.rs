//! SPD HSS approximations: representation, products and constructions.

mod accelerated;
mod general;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::PartitionTree;
use crate::h2::DENSIFY_CAP;

pub use accelerated::{construct_accelerated, AcceleratedOptions, AcceleratedStats, Workspace};
pub use general::{construct_general, construct_general_with, BlockAccess, GeneralOptions, KernelBlocks, NodeBases};

/// An HSS matrix in tree order.
///
/// Leaves carry their dense diagonal block and basis `U_i`; nonroot nonleaf
/// nodes carry a transfer matrix `R_i`; every nonleaf `p` carries the
/// coefficient blocks of its children, assembled as `𝐁_pp` with zero diagonal blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdHss {
    pub(crate) tree: PartitionTree,
    pub(crate) block_size: usize,
    pub(crate) rank: usize,
    pub(crate) leaf_diag: Vec<DMatrix<f64>>,
    pub(crate) basis: Vec<DMatrix<f64>>,
    pub(crate) coupling: Vec<DMatrix<f64>>,
}

impl SpdHss {
    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Matrix dimension.
    pub fn dim(&self) -> usize {
        self.tree.num_points() * self.block_size
    }

    /// Target rank used in the construction.
    pub fn target_rank(&self) -> usize {
        self.rank
    }

    /// Column count of node `i`'s basis (0 for the root).
    pub fn rank(&self, i: usize) -> usize {
        self.basis[i].ncols()
    }

    pub fn leaf_diag(&self, i: usize) -> &DMatrix<f64> {
        &self.leaf_diag[i]
    }

    /// `U_i` of a leaf.
    pub fn leaf_basis(&self, i: usize) -> &DMatrix<f64> {
        &self.basis[i]
    }

    /// `R_i` of a nonleaf, nonroot node.
    pub fn transfer(&self, i: usize) -> &DMatrix<f64> {
        &self.basis[i]
    }

    /// `𝐁_pp` of a nonleaf node.
    pub fn children_coupling(&self, p: usize) -> &DMatrix<f64> {
        &self.coupling[p]
    }

    /// `B_ij` for siblings `i ≠ j`.
    pub fn sibling_b(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        let (pi, pj) = (self.tree.node(i).parent, self.tree.node(j).parent);
        match (pi, pj) {
            (Some(p), Some(q)) if p == q && i != j => {
                let (oi, oj) = (self.child_offset(p, i), self.child_offset(p, j));
                Ok(self.coupling[p].view((oi, oj), (self.rank(i), self.rank(j))).into_owned())
            }
            _ => Err(Error::invalid(format!("nodes {i} and {j} are not distinct siblings"))),
        }
    }

    fn child_offset(&self, p: usize, c: usize) -> usize {
        let mut off = 0;
        for &ch in &self.tree.node(p).children {
            if ch == c {
                return off;
            }
            off += self.rank(ch);
        }
        unreachable!("{c} is not a child of {p}")
    }

    /// Number of reals stored in diagonal blocks, bases, transfers and couplings.
    pub fn storage_entries(&self) -> usize {
        self.leaf_diag.iter().chain(&self.basis).chain(&self.coupling).map(|m| m.len()).sum()
    }

    pub fn matvec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("vector has length {}, matrix dimension is {}", x.len(), self.dim())));
        }
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(DVector::from_column_slice(self.apply(&xm).as_slice()))
    }

    pub fn matmat(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.dim() {
            return Err(Error::invalid(format!("operand has {} rows, matrix dimension is {}", x.nrows(), self.dim())));
        }
        Ok(self.apply(x))
    }

    pub(crate) fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let tree = &self.tree;
        let bs = self.block_size;
        let c = x.ncols();
        let l = tree.num_levels();
        let nn = tree.num_nodes();
        let mut y = DMatrix::zeros(x.nrows(), c);
        let mut xhat: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, c); nn];
        let mut yhat: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, c); nn];
        for k in 1..l {
            for &i in tree.level(k) {
                let node = tree.node(i);
                xhat[i] = if node.is_leaf() {
                    let r = tree.matrix_range(i, bs);
                    self.basis[i].tr_mul(&x.rows(r.start, r.len()))
                } else {
                    self.basis[i].tr_mul(&stack_children(&xhat, &node.children, c))
                };
            }
        }
        for k in 2..=l {
            for &p in tree.level(k) {
                let node = tree.node(p);
                let xs = stack_children(&xhat, &node.children, c);
                let ys = &self.coupling[p] * xs;
                let mut off = 0;
                for &ch in &node.children {
                    let kc = self.rank(ch);
                    yhat[ch] = ys.rows(off, kc).into_owned();
                    off += kc;
                }
            }
        }
        for k in (1..l).rev() {
            for &i in tree.level(k) {
                let node = tree.node(i);
                let down = &self.basis[i] * &yhat[i];
                if node.is_leaf() {
                    let r = tree.matrix_range(i, bs);
                    let mut dst = y.rows_mut(r.start, r.len());
                    dst += down;
                    dst.gemm(1.0, &self.leaf_diag[i], &x.rows(r.start, r.len()), 1.0);
                } else {
                    let mut off = 0;
                    for &ch in &node.children {
                        let kc = self.rank(ch);
                        yhat[ch] += down.rows(off, kc);
                        off += kc;
                    }
                }
            }
        }
        if l == 1 {
            y.gemm(1.0, &self.leaf_diag[tree.root()], x, 0.0);
        }
        y
    }

    pub fn densify(&self) -> Result<DMatrix<f64>> {
        self.densify_with_cap(DENSIFY_CAP)
    }

    pub fn densify_with_cap(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if n > cap {
            return Err(Error::DensifyCap { dim: n, cap });
        }
        let mut out = self.apply(&DMatrix::identity(n, n));
        for j in 0..n {
            for i in j + 1..n {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }

    /// Checks shapes and symmetry of the stored blocks; used on decoded data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::format(m));
        let tree = &self.tree;
        let nn = tree.num_nodes();
        if self.leaf_diag.len() != nn || self.basis.len() != nn || self.coupling.len() != nn {
            return bad("per-node arrays do not match the tree".into());
        }
        if self.block_size != 1 && self.block_size != 3 {
            return bad(format!("block size {}", self.block_size));
        }
        let root = tree.root();
        for (i, node) in tree.nodes().iter().enumerate() {
            let rows = if node.is_leaf() {
                node.len() * self.block_size
            } else {
                node.children.iter().map(|&c| self.rank(c)).sum()
            };
            if node.is_leaf() {
                let d = &self.leaf_diag[i];
                if d.shape() != (rows, rows) {
                    return bad(format!("leaf {i}: diagonal block has shape {:?}", d.shape()));
                }
            } else {
                if !self.leaf_diag[i].is_empty() {
                    return bad(format!("nonleaf {i} holds a diagonal block"));
                }
                let b = &self.coupling[i];
                if b.shape() != (rows, rows) {
                    return bad(format!("node {i}: coupling has shape {:?}", b.shape()));
                }
            }
            if i == root {
                if self.basis[i].ncols() != 0 {
                    return bad("root carries a basis".into());
                }
            } else if self.basis[i].nrows() != rows || self.basis[i].ncols() > rows {
                return bad(format!("node {i}: basis has shape {:?}", self.basis[i].shape()));
            }
            if node.is_leaf() && !self.coupling[i].is_empty() {
                return bad(format!("leaf {i} holds a coupling block"));
            }
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !self.leaf_diag.iter().chain(&self.basis).chain(&self.coupling).all(finite) {
            return bad("non-finite entry".into());
        }
        Ok(())
    }
}

pub(crate) fn stack_children(parts: &[DMatrix<f64>], children: &[usize], c: usize) -> DMatrix<f64> {
    let rows = children.iter().map(|&ch| parts[ch].nrows()).sum();
    let mut out = DMatrix::zeros(rows, c);
    let mut off = 0;
    for &ch in children {
        let n = parts[ch].nrows();
        out.rows_mut(off, n).copy_from(&parts[ch]);
        off += n;
    }
    out
}

/// Coefficient blocks `B_ij` of one level, stored once per unordered pair.
#[derive(Clone, Debug, Default)]
pub(crate) struct PairBlocks {
    map: HashMap<(usize, usize), DMatrix<f64>>,
}

impl PairBlocks {
    pub(crate) fn insert(&mut self, i: usize, j: usize, b: DMatrix<f64>) {
        if i <= j {
            self.map.insert((i, j), b);
        } else {
            self.map.insert((j, i), b.transpose());
        }
    }

    pub(crate) fn get(&self, i: usize, j: usize) -> Option<DMatrix<f64>> {
        if i <= j {
            self.map.get(&(i, j)).cloned()
        } else {
            self.map.get(&(j, i)).map(|b| b.transpose())
        }
    }
}

/// `[B_{a b}]` over children `a` of `i` and `b` of `j`, zero on the diagonal when `i == j`.
pub(crate) fn assemble_children(
    tree: &PartitionTree,
    ranks: &[usize],
    blocks: &PairBlocks,
    i: usize,
    j: usize,
) -> Result<DMatrix<f64>> {
    let ci = &tree.node(i).children;
    let cj = &tree.node(j).children;
    let rows: usize = ci.iter().map(|&a| ranks[a]).sum();
    let cols: usize = cj.iter().map(|&b| ranks[b]).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut ro = 0;
    for &a in ci {
        let mut co = 0;
        for &b in cj {
            if a != b {
                let blk = blocks
                    .get(a, b)
                    .ok_or_else(|| Error::contract(format!("coefficient block ({a}, {b}) has not been computed")))?;
                out.view_mut((ro, co), (ranks[a], ranks[b])).copy_from(&blk);
            }
            co += ranks[b];
        }
        ro += ranks[a];
    }
    Ok(out)
}

/// Assembles the output representation from per-node pieces.
pub(crate) fn finish(
    tree: &PartitionTree,
    block_size: usize,
    rank: usize,
    leaf_diag: Vec<DMatrix<f64>>,
    basis: Vec<DMatrix<f64>>,
    siblings: &[PairBlocks],
) -> Result<SpdHss> {
    let nn = tree.num_nodes();
    let ranks: Vec<usize> = basis.iter().map(|b| b.ncols()).collect();
    let mut coupling = vec![DMatrix::zeros(0, 0); nn];
    for k in 2..=tree.num_levels() {
        for &p in tree.level(k) {
            coupling[p] = assemble_children(tree, &ranks, &siblings[k - 2], p, p)?;
        }
    }
    Ok(SpdHss { tree: tree.clone(), block_size, rank, leaf_diag, basis, coupling })
}
