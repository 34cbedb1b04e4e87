//! H2 matrices: nested bases with strong (adjacency-based) admissibility.
//!
//! All matrices live in tree order: row `p·bs + c` is component `c` of the
//! point at tree position `p`.

mod apply;
mod build;

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{PartitionTree, PointSet};
use crate::kernels::KernelSpec;

pub use build::H2Options;

/// Largest dimension [`H2Matrix::densify`] expands by default.
pub const DENSIFY_CAP: usize = 20_000;

#[derive(Debug)]
pub struct H2Matrix {
    pub(crate) kernel: KernelSpec,
    /// Points in tree order, with the kernel's block size.
    pub(crate) points: PointSet,
    pub(crate) tree: PartitionTree,
    pub(crate) tol: f64,
    /// Leaf: orthonormal `U_i`. Nonleaf: transfer `R_i`. Root: empty.
    pub(crate) bases: Vec<DMatrix<f64>>,
    /// Skeleton matrix rows of each node.
    pub(crate) skel: Vec<Vec<usize>>,
    /// `k_i × k_i` factor with `U_i·T_i` the interpolation matrix of node `i`.
    pub(crate) tfac: Vec<DMatrix<f64>>,
    /// Leaf pairs `(i, j)` with `i ≤ j` and `j` adjacent to `i` or equal.
    pub(crate) near_pairs: Vec<(usize, usize)>,
    pub(crate) near_blocks: Option<Vec<DMatrix<f64>>>,
    /// Interaction-list pairs `(i, j)` with `i < j`.
    pub(crate) far_pairs: Vec<(usize, usize)>,
    pub(crate) far_blocks: Option<Vec<DMatrix<f64>>>,
    pub(crate) far_index: HashMap<(usize, usize), usize>,
    pub(crate) near_index: HashMap<(usize, usize), usize>,
    pub(crate) flops: AtomicU64,
}

impl H2Matrix {
    pub fn build(kernel: &KernelSpec, points: &PointSet, tree: &PartitionTree, opts: &H2Options) -> Result<Self> {
        build::build(kernel, points, tree, opts)
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    /// Points in tree order.
    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn block_size(&self) -> usize {
        self.kernel.block_size()
    }

    pub fn dim(&self) -> usize {
        self.tree.num_points() * self.block_size()
    }

    /// Column count of node `i`'s basis.
    pub fn rank(&self, i: usize) -> usize {
        self.bases[i].ncols()
    }

    pub fn max_rank(&self) -> usize {
        self.bases.iter().map(|b| b.ncols()).max().unwrap_or(0)
    }

    /// `U_i^{H2}` of a leaf.
    pub fn leaf_basis(&self, i: usize) -> &DMatrix<f64> {
        debug_assert!(self.tree.node(i).is_leaf());
        &self.bases[i]
    }

    /// `R_i^{H2}` of a nonleaf, stacked over the children in order.
    pub fn transfer(&self, i: usize) -> &DMatrix<f64> {
        debug_assert!(!self.tree.node(i).is_leaf());
        &self.bases[i]
    }

    pub fn skeleton(&self, i: usize) -> &[usize] {
        &self.skel[i]
    }

    pub fn near_pairs(&self) -> &[(usize, usize)] {
        &self.near_pairs
    }

    /// Stored low-rank pairs `(i, j)`, `i < j`.
    pub fn coupling_pairs(&self) -> &[(usize, usize)] {
        &self.far_pairs
    }

    pub fn is_coupled(&self, i: usize, j: usize) -> bool {
        self.far_index.contains_key(&(i.min(j), i.max(j)))
    }

    pub fn near_stored(&self) -> bool {
        self.near_blocks.is_some()
    }

    pub fn couplings_stored(&self) -> bool {
        self.far_blocks.is_some()
    }

    /// Coefficient block `B_ij^{H2}` of an interaction-list pair.
    pub fn coupling(&self, i: usize, j: usize) -> Result<Cow<'_, DMatrix<f64>>> {
        let (a, b) = (i.min(j), i.max(j));
        let &p = self
            .far_index
            .get(&(a, b))
            .ok_or_else(|| Error::contract(format!("({i}, {j}) is not a stored low-rank pair")))?;
        let blk = match &self.far_blocks {
            Some(blocks) => Cow::Borrowed(&blocks[p]),
            None => Cow::Owned(self.eval_coupling(a, b)),
        };
        Ok(if i <= j { blk } else { Cow::Owned(blk.transpose()) })
    }

    pub(crate) fn eval_coupling(&self, i: usize, j: usize) -> DMatrix<f64> {
        let k = self.kernel.eval_matrix_entries(&self.points, &self.skel[i], &self.skel[j]);
        &self.tfac[i] * k * self.tfac[j].transpose()
    }

    /// Dense block `A_ij` of two leaves that are adjacent or equal.
    pub fn near_block(&self, i: usize, j: usize) -> Result<Cow<'_, DMatrix<f64>>> {
        let (a, b) = (i.min(j), i.max(j));
        let &p = self
            .near_index
            .get(&(a, b))
            .ok_or_else(|| Error::contract(format!("({i}, {j}) is not a near-field leaf pair")))?;
        let blk = match &self.near_blocks {
            Some(blocks) => Cow::Borrowed(&blocks[p]),
            None => Cow::Owned(self.eval_near(a, b)),
        };
        Ok(if i <= j { blk } else { Cow::Owned(blk.transpose()) })
    }

    pub(crate) fn eval_near(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.kernel
            .eval_block(&self.points, self.tree.node(i).range.clone(), self.tree.node(j).range.clone())
    }

    /// Number of reals held in bases, couplings and near blocks.
    pub fn storage_entries(&self) -> usize {
        let mut n: usize = self.bases.iter().chain(&self.tfac).map(|m| m.len()).sum();
        n += self.skel.iter().map(Vec::len).sum::<usize>();
        if let Some(b) = &self.near_blocks {
            n += b.iter().map(|m| m.len()).sum::<usize>();
        }
        if let Some(b) = &self.far_blocks {
            n += b.iter().map(|m| m.len()).sum::<usize>();
        }
        n
    }

    /// Floating-point operations spent in products since the last reset.
    pub fn flops(&self) -> u64 {
        self.flops.load(Ordering::Relaxed)
    }

    pub fn reset_flops(&self) {
        self.flops.store(0, Ordering::Relaxed);
    }

    pub(crate) fn add_flops(&self, n: u64) {
        self.flops.fetch_add(n, Ordering::Relaxed);
    }

    /// `A·X`.
    pub fn matmat(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(x)?;
        Ok(self.apply(x, None))
    }

    /// `(A − blockdiag{A_ii : i on level k})·X` for `1 ≤ k ≤ L − 1`.
    pub fn matmat_minus_leveldiag(&self, k: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let l = self.tree.num_levels();
        if k == 0 || k >= l {
            return Err(Error::invalid(format!("level {k} outside 1..={}", l.saturating_sub(1))));
        }
        self.check_rows(x)?;
        Ok(self.apply(x, Some(k)))
    }

    /// [`matmat_minus_leveldiag`](Self::matmat_minus_leveldiag) for several
    /// levels, evaluating each block once.
    pub fn matmat_minus_leveldiags(&self, levels: &[usize], x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let l = self.tree.num_levels();
        if let Some(&k) = levels.iter().find(|&&k| k == 0 || k >= l) {
            return Err(Error::invalid(format!("level {k} outside 1..={}", l.saturating_sub(1))));
        }
        self.check_rows(x)?;
        Ok(self.apply_minus_leveldiags(x, levels))
    }

    fn check_rows(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.dim() {
            return Err(Error::invalid(format!("operand has {} rows, matrix dimension is {}", x.nrows(), self.dim())));
        }
        Ok(())
    }

    pub fn densify(&self) -> Result<DMatrix<f64>> {
        self.densify_with_cap(DENSIFY_CAP)
    }

    pub fn densify_with_cap(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if n > cap {
            return Err(Error::DensifyCap { dim: n, cap });
        }
        let before = self.flops();
        let mut out = self.apply(&DMatrix::identity(n, n), None);
        self.flops.store(before, Ordering::Relaxed);
        // Roundoff in the two triangles differs; average them.
        for j in 0..n {
            for i in j + 1..n {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }
}
