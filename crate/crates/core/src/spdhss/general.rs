use std::ops::Range;

use nalgebra::DMatrix;

use super::{assemble_children, finish, PairBlocks, SpdHss};
use crate::error::{Error, Result};
use crate::geometry::{PartitionTree, PointSet};
use crate::kernels::KernelSpec;
use crate::linalg::{cholesky_lower, projection_basis, solve_lower, solve_lower_transpose, sym_sqrt_pair, SqrtMode};

/// Source of dense blocks of a symmetric matrix in tree order.
pub trait BlockAccess {
    fn dim(&self) -> usize;
    fn block(&self, rows: Range<usize>, cols: Range<usize>) -> DMatrix<f64>;
}

impl BlockAccess for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn block(&self, rows: Range<usize>, cols: Range<usize>) -> DMatrix<f64> {
        self.view((rows.start, cols.start), (rows.len(), cols.len())).into_owned()
    }
}

/// Kernel matrix blocks evaluated on demand.
#[derive(Clone, Debug)]
pub struct KernelBlocks {
    kernel: KernelSpec,
    points: PointSet,
}

impl KernelBlocks {
    /// `points` are given in their original order and reordered by `tree`.
    pub fn new(kernel: &KernelSpec, points: &PointSet, tree: &PartitionTree) -> Result<Self> {
        if points.len() != tree.num_points() {
            return Err(Error::invalid("point set and tree sizes differ"));
        }
        let points = tree.permute_points(points).with_block_size(kernel.block_size())?;
        Ok(KernelBlocks { kernel: *kernel, points })
    }

    /// The full matrix; for tests and small problems.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.points.len();
        self.kernel.eval_block(&self.points, 0..n, 0..n)
    }
}

impl BlockAccess for KernelBlocks {
    fn dim(&self) -> usize {
        self.points.matrix_dim()
    }

    fn block(&self, rows: Range<usize>, cols: Range<usize>) -> DMatrix<f64> {
        let bs = self.kernel.block_size();
        let aligned = |r: &Range<usize>| r.start % bs == 0 && r.end % bs == 0;
        if aligned(&rows) && aligned(&cols) {
            self.kernel
                .eval_block(&self.points, rows.start / bs..rows.end / bs, cols.start / bs..cols.end / bs)
        } else {
            let r: Vec<usize> = rows.collect();
            let c: Vec<usize> = cols.collect();
            self.kernel.eval_matrix_entries(&self.points, &r, &c)
        }
    }
}

/// Per-node orthonormal bases: `V_i` at leaves, `V̄_i` at nonleaf nodes, empty at the root.
pub type NodeBases = Vec<DMatrix<f64>>;

#[derive(Clone, Debug)]
pub struct GeneralOptions {
    pub rank: usize,
    /// Scale blocks by the diagonal Cholesky factors. Turning this off gives a
    /// regular HSS approximation with no definiteness guarantee.
    pub scaled: bool,
    pub sqrt_mode: SqrtMode,
    /// Use these bases instead of computing them.
    pub bases: Option<NodeBases>,
}

impl GeneralOptions {
    pub fn new(rank: usize) -> Self {
        GeneralOptions { rank, scaled: true, sqrt_mode: SqrtMode::Strict, bases: None }
    }

    pub fn unscaled(rank: usize) -> Self {
        GeneralOptions { scaled: false, ..Self::new(rank) }
    }
}

/// Quadratic-cost SPD HSS construction from dense blocks.
pub fn construct_general(access: &dyn BlockAccess, tree: &PartitionTree, rank: usize) -> Result<SpdHss> {
    construct_general_with(access, tree, &GeneralOptions::new(rank)).map(|(h, _)| h)
}

pub(crate) fn check_inputs(dim: usize, tree: &PartitionTree, rank: usize) -> Result<usize> {
    if rank == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    if tree.num_levels() < 2 {
        return Err(Error::invalid("the partition tree needs at least two levels"));
    }
    let n = tree.num_points();
    if dim % n != 0 || !(dim / n == 1 || dim / n == 3) {
        return Err(Error::invalid(format!("matrix dimension {dim} does not fit {n} points")));
    }
    Ok(dim / n)
}

pub(crate) fn sqrt_at(b: &DMatrix<f64>, mode: SqrtMode, node: usize, level: usize) -> Result<crate::linalg::SqrtPair> {
    sym_sqrt_pair(b, mode).map_err(|e| match e {
        Error::NotPositiveDefinite { value, .. } => Error::Indefinite { node, level, min_eig: value },
        other => other,
    })
}

pub(crate) fn leaf_cholesky(a: &DMatrix<f64>, leaf: usize) -> Result<DMatrix<f64>> {
    cholesky_lower(a).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, value, .. } => {
            Error::NotPositiveDefinite { context: format!("diagonal block of leaf {leaf}"), pivot, value }
        }
        other => other,
    })
}

pub(crate) fn injected(bases: &Option<NodeBases>, i: usize, rows: usize) -> Result<Option<DMatrix<f64>>> {
    match bases {
        None => Ok(None),
        Some(b) => {
            let v = b.get(i).ok_or_else(|| Error::invalid(format!("no injected basis for node {i}")))?;
            if v.nrows() != rows {
                return Err(Error::invalid(format!("injected basis of node {i} has {} rows, expected {rows}", v.nrows())));
            }
            Ok(Some(v.clone()))
        }
    }
}

/// Quadratic-cost construction returning the bases it used.
pub fn construct_general_with(
    access: &dyn BlockAccess,
    tree: &PartitionTree,
    opts: &GeneralOptions,
) -> Result<(SpdHss, NodeBases)> {
    let n = access.dim();
    let bs = check_inputs(n, tree, opts.rank)?;
    let nn = tree.num_nodes();
    let l = tree.num_levels();
    let r = opts.rank;
    let leaves = tree.leaves();

    let mut leaf_diag = vec![DMatrix::zeros(0, 0); nn];
    let mut chol = vec![DMatrix::zeros(0, 0); nn];
    let mut v: NodeBases = vec![DMatrix::zeros(0, 0); nn];
    let mut basis = vec![DMatrix::zeros(0, 0); nn];
    // Φ_i = V_iᵀ·S_i⁻¹ for leaves.
    let mut phi = vec![DMatrix::zeros(0, 0); nn];

    for &i in leaves {
        let ri = tree.matrix_range(i, bs);
        let a = access.block(ri.clone(), ri.clone());
        if opts.scaled {
            chol[i] = leaf_cholesky(&a, i)?;
        }
        leaf_diag[i] = a;
    }
    let scale_rows = |s: &DMatrix<f64>, m: &DMatrix<f64>| if opts.scaled { solve_lower(s, m) } else { m.clone() };

    for &i in leaves {
        let ri = tree.matrix_range(i, bs);
        let vi = match injected(&opts.bases, i, ri.len())? {
            Some(vi) => vi,
            None => {
                let row = scale_rows(&chol[i], &access.block(ri.clone(), 0..n));
                let mut c = DMatrix::zeros(ri.len(), n - ri.len());
                let mut off = 0;
                for &j in leaves {
                    if j == i {
                        continue;
                    }
                    let rj = tree.matrix_range(j, bs);
                    let blk = row.columns(rj.start, rj.len()).transpose();
                    let scaled = scale_rows(&chol[j], &blk).transpose();
                    c.columns_mut(off, rj.len()).copy_from(&scaled);
                    off += rj.len();
                }
                projection_basis(&c, r).v
            }
        };
        phi[i] = if opts.scaled { solve_lower_transpose(&chol[i], &vi).transpose() } else { vi.transpose() };
        basis[i] = if opts.scaled { &chol[i] * &vi } else { vi.clone() };
        v[i] = vi;
    }

    let mut prev = PairBlocks::default();
    for (a, &i) in leaves.iter().enumerate() {
        let ri = tree.matrix_range(i, bs);
        let z = &phi[i] * access.block(ri, 0..n);
        for &j in &leaves[a + 1..] {
            let rj = tree.matrix_range(j, bs);
            prev.insert(i, j, z.columns(rj.start, rj.len()) * phi[j].transpose());
        }
    }

    let mut ranks: Vec<usize> = basis.iter().map(|b| b.ncols()).collect();
    let mut siblings = vec![sibling_subset(tree, &prev, 1)];
    for k in 2..l {
        let nodes = tree.level(k);
        let mut sq = Vec::with_capacity(nodes.len());
        for &i in nodes {
            let bii = assemble_children(tree, &ranks, &prev, i, i)?;
            if opts.scaled {
                let s = sqrt_at(&bii, opts.sqrt_mode, i, k)?;
                sq.push((s.sqrt, s.inv_sqrt));
            } else {
                let m = DMatrix::identity(bii.nrows(), bii.nrows());
                sq.push((m.clone(), m));
            }
        }
        // G_ij = M_i·𝐁_ij·M_j for a < b.
        let mut g = PairBlocks::default();
        for (a, &i) in nodes.iter().enumerate() {
            for (b, &j) in nodes.iter().enumerate().skip(a + 1) {
                let bij = assemble_children(tree, &ranks, &prev, i, j)?;
                g.insert(i, j, &sq[a].1 * bij * &sq[b].1);
            }
        }
        for (a, &i) in nodes.iter().enumerate() {
            let rows = sq[a].0.nrows();
            let vbar = match injected(&opts.bases, i, rows)? {
                Some(vb) => vb,
                None => {
                    let blocks: Vec<DMatrix<f64>> =
                        nodes.iter().filter(|&&j| j != i).map(|&j| g.get(i, j).expect("all pairs")).collect();
                    let width = blocks.iter().map(|b| b.ncols()).sum();
                    let mut e = DMatrix::zeros(rows, width);
                    let mut off = 0;
                    for blk in &blocks {
                        e.columns_mut(off, blk.ncols()).copy_from(blk);
                        off += blk.ncols();
                    }
                    projection_basis(&e, r).v
                }
            };
            basis[i] = &sq[a].0 * &vbar;
            v[i] = vbar;
        }
        let mut next = PairBlocks::default();
        for (a, &i) in nodes.iter().enumerate() {
            for &j in &nodes[a + 1..] {
                let gij = g.get(i, j).expect("all pairs");
                next.insert(i, j, v[i].transpose() * gij * &v[j]);
            }
        }
        for &i in nodes {
            ranks[i] = basis[i].ncols();
        }
        siblings.push(sibling_subset(tree, &next, k));
        prev = next;
    }

    let root = tree.root();
    let broot = assemble_children(tree, &ranks, &prev, root, root)?;
    if opts.scaled {
        sqrt_at(&broot, opts.sqrt_mode, root, l)?;
    }
    basis[root] = DMatrix::zeros(broot.nrows(), 0);
    let h = finish(tree, bs, r, leaf_diag, basis, &siblings)?;
    Ok((h, v))
}

pub(crate) fn sibling_subset(tree: &PartitionTree, all: &PairBlocks, level: usize) -> PairBlocks {
    let mut out = PairBlocks::default();
    for &i in tree.level(level) {
        let p = tree.node(i).parent.expect("nonroot");
        for &j in &tree.node(p).children {
            if i < j {
                if let Some(b) = all.get(i, j) {
                    out.insert(i, j, b);
                }
            }
        }
    }
    out
}
