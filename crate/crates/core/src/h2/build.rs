use std::sync::atomic::AtomicU64;

use nalgebra::DMatrix;

use super::H2Matrix;
use crate::error::{Error, Result};
use crate::geometry::{PartitionTree, PointSet};
use crate::kernels::KernelSpec;
use crate::linalg::row_id_floored;

/// Knobs of the algebraic H2 build.
#[derive(Clone, Debug, PartialEq)]
pub struct H2Options {
    /// Relative Frobenius tolerance of each interpolative compression. Blocks
    /// are never compressed beyond `tol·|A_00|·√rows` in absolute terms.
    pub tol: f64,
    /// Rank cap per node; exceeding it while above `tol` is an error.
    pub max_rank: usize,
    /// Farthest-point samples kept per node to stand in for its columns.
    pub samples_per_node: usize,
    /// Rough cap on far-field sample points used to compress one node.
    pub candidate_cap: usize,
    /// Reals allowed for stored near and coupling blocks; anything beyond is
    /// evaluated on the fly during products.
    pub storage_budget: usize,
}

impl Default for H2Options {
    fn default() -> Self {
        H2Options { tol: 1e-8, max_rank: 300, samples_per_node: 32, candidate_cap: 800, storage_budget: 1 << 26 }
    }
}

impl H2Options {
    pub fn with_tol(tol: f64) -> Self {
        H2Options { tol, ..Self::default() }
    }
}

/// Greedy farthest-point ordering of `cands`, truncated at `count`.
fn farthest_points(points: &PointSet, cands: &[usize], count: usize) -> Vec<usize> {
    if cands.len() <= 1 || count == 0 {
        return cands.iter().copied().take(count).collect();
    }
    let dist2 = |a: usize, b: usize| -> f64 {
        points.point(a).iter().zip(points.point(b)).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let count = count.min(cands.len());
    let mut out = Vec::with_capacity(count);
    let mut best: Vec<f64> = vec![f64::INFINITY; cands.len()];
    let mut next = 0;
    for _ in 0..count {
        let p = cands[next];
        out.push(p);
        let mut far = (0, -1.0);
        for (k, &c) in cands.iter().enumerate() {
            let d = dist2(p, c).min(best[k]);
            best[k] = d;
            if d > far.1 {
                far = (k, d);
            }
        }
        if far.1 <= 0.0 {
            break;
        }
        next = far.0;
    }
    out
}

fn matrix_indices(pts: &[usize], bs: usize) -> Vec<usize> {
    pts.iter().flat_map(|&p| (0..bs).map(move |c| p * bs + c)).collect()
}

fn thin_qr(x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = x.ncols();
    if k == 0 {
        return (DMatrix::zeros(x.nrows(), 0), DMatrix::zeros(0, 0));
    }
    let qr = x.clone().qr();
    (qr.q(), qr.r())
}

pub(super) fn build(kernel: &KernelSpec, points: &PointSet, tree: &PartitionTree, opts: &H2Options) -> Result<H2Matrix> {
    if points.len() != tree.num_points() {
        return Err(Error::invalid(format!(
            "tree covers {} points but the point set has {}",
            tree.num_points(),
            points.len()
        )));
    }
    if points.dim() != tree.dim() {
        return Err(Error::invalid("point and tree dimensions differ"));
    }
    if !(opts.tol > 0.0 && opts.tol < 1.0) {
        return Err(Error::invalid(format!("tolerance must lie in (0, 1), got {}", opts.tol)));
    }
    if opts.max_rank == 0 || opts.samples_per_node == 0 || opts.candidate_cap == 0 {
        return Err(Error::invalid("rank cap and sample counts must be positive"));
    }
    let bs = kernel.block_size();
    let pts = tree.permute_points(points).with_block_size(bs)?;
    let nn = tree.num_nodes();
    let l = tree.num_levels();

    // Representative samples per node, bottom-up.
    let q = opts.samples_per_node;
    let mut samples: Vec<Vec<usize>> = vec![Vec::new(); nn];
    for k in 1..=l {
        for &i in tree.level(k) {
            let node = tree.node(i);
            let pool: Vec<usize> = if node.is_leaf() {
                node.range.clone().collect()
            } else {
                node.children.iter().flat_map(|&c| samples[c].iter().copied()).collect()
            };
            samples[i] = farthest_points(&pts, &pool, q);
        }
    }

    // Far-field candidate points per node, top-down. Lists are kept in
    // farthest-point order so that prefixes stay spread out.
    let cap = opts.candidate_cap;
    let mut cands: Vec<Vec<usize>> = vec![Vec::new(); nn];
    for k in (1..l).rev() {
        for &i in tree.level(k) {
            let il = tree.interaction_list(i);
            let per = if il.is_empty() { 0 } else { (cap / il.len()).clamp(q.min(4), q) };
            let mut pool: Vec<usize> = il.iter().flat_map(|&j| samples[j].iter().copied().take(per)).collect();
            let parent = tree.node(i).parent.expect("nonroot");
            pool.extend(cands[parent].iter().copied().take(cap));
            cands[i] = if tree.node(i).is_leaf() { pool } else { farthest_points(&pts, &pool, cap) };
        }
    }

    let diag_scale = kernel.eval_matrix_entries(&pts, &[0], &[0])[(0, 0)].abs();

    // Interpolative bases, bottom-up.
    let mut bases: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); nn];
    let mut skel: Vec<Vec<usize>> = vec![Vec::new(); nn];
    let mut tfac: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); nn];
    for k in 1..l {
        for &i in tree.level(k) {
            let node = tree.node(i);
            let rows: Vec<usize> = if node.is_leaf() {
                tree.matrix_range(i, bs).collect()
            } else {
                node.children.iter().flat_map(|&c| skel[c].iter().copied()).collect()
            };
            let cols = matrix_indices(&cands[i], bs);
            let (sk, x) = if rows.is_empty() || cols.is_empty() {
                (Vec::new(), DMatrix::zeros(rows.len(), 0))
            } else {
                let m = kernel.eval_matrix_entries(&pts, &rows, &cols);
                // Blocks far below the diagonal scale only need absolute accuracy.
                let floor = opts.tol * diag_scale * (rows.len() as f64).sqrt();
                let id = row_id_floored(&m, opts.tol, floor, opts.max_rank);
                if id.skel.len() >= opts.max_rank && id.rel_residual * m.norm() > floor.max(opts.tol * m.norm()) {
                    return Err(Error::Compression { node: i, achieved: id.rel_residual, rank_cap: opts.max_rank });
                }
                (id.skel.iter().map(|&r| rows[r]).collect(), id.interp)
            };
            let g = if node.is_leaf() {
                x
            } else {
                // Interpolation in terms of the children's orthonormal bases.
                let mut g = x;
                let mut off = 0;
                for &c in &node.children {
                    let kc = tfac[c].nrows();
                    let blk = &tfac[c] * g.rows(off, kc);
                    g.rows_mut(off, kc).copy_from(&blk);
                    off += kc;
                }
                g
            };
            let (qf, t) = thin_qr(&g);
            bases[i] = qf;
            tfac[i] = t;
            skel[i] = sk;
        }
    }
    if l >= 1 {
        let root = tree.root();
        let width: usize = tree.node(root).children.iter().map(|&c| bases[c].ncols()).sum();
        bases[root] = DMatrix::zeros(width, 0);
    }

    Ok(H2Matrix::assemble(*kernel, pts, tree.clone(), opts.tol, bases, skel, tfac, opts.storage_budget))
}

impl H2Matrix {
    /// Derives the block lists from the tree and stores blocks within `budget`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        kernel: KernelSpec,
        points: PointSet,
        tree: PartitionTree,
        tol: f64,
        bases: Vec<DMatrix<f64>>,
        skel: Vec<Vec<usize>>,
        tfac: Vec<DMatrix<f64>>,
        budget: usize,
    ) -> H2Matrix {
        let l = tree.num_levels();
        let mut far_pairs = Vec::new();
        for k in 1..l {
            for &i in tree.level(k) {
                for &j in tree.interaction_list(i) {
                    if i < j {
                        far_pairs.push((i, j));
                    }
                }
            }
        }
        let mut near_pairs = Vec::new();
        for &i in tree.leaves() {
            near_pairs.push((i, i));
            for &j in tree.near(i) {
                if i < j {
                    near_pairs.push((i, j));
                }
            }
        }
        let far_index = far_pairs.iter().enumerate().map(|(p, &ij)| (ij, p)).collect();
        let near_index = near_pairs.iter().enumerate().map(|(p, &ij)| (ij, p)).collect();
        let mut h2 = H2Matrix {
            kernel,
            points,
            tree,
            tol,
            bases,
            skel,
            tfac,
            near_pairs,
            near_blocks: None,
            far_pairs,
            far_blocks: None,
            far_index,
            near_index,
            flops: AtomicU64::new(0),
        };
        h2.store_blocks(budget);
        h2
    }

    /// Materializes near and coupling blocks while they fit in `budget` reals.
    pub(crate) fn store_blocks(&mut self, budget: usize) {
        let bs = self.block_size();
        let near_size: usize = self
            .near_pairs
            .iter()
            .map(|&(i, j)| self.tree.node(i).len() * self.tree.node(j).len() * bs * bs)
            .sum();
        let far_size: usize = self.far_pairs.iter().map(|&(i, j)| self.rank(i) * self.rank(j)).sum();
        let mut left = budget;
        if near_size <= left {
            self.near_blocks = Some(self.near_pairs.iter().map(|&(i, j)| self.eval_near(i, j)).collect());
            left -= near_size;
        }
        if far_size <= left {
            self.far_blocks = Some(self.far_pairs.iter().map(|&(i, j)| self.eval_coupling(i, j)).collect());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_ball_points;

    #[test]
    fn farthest_points_spreads_out() {
        let p = PointSet::new(2, vec![0.0, 0.0, 0.1, 0.0, 10.0, 0.0, 5.0, 0.0]).unwrap();
        let order = farthest_points(&p, &[0, 1, 2, 3], 3);
        assert_eq!(order, vec![0, 2, 3]);
    }

    #[test]
    fn farthest_points_stops_on_duplicates() {
        let p = PointSet::new(2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(farthest_points(&p, &[0, 1, 2], 3), vec![0]);
    }

    #[test]
    fn samples_are_within_node() {
        let p = generate_ball_points(3000, 2).unwrap();
        let tree = PartitionTree::build(&p, 100).unwrap();
        let tp = tree.permute_points(&p);
        for &leaf in tree.leaves() {
            let r: Vec<usize> = tree.node(leaf).range.clone().collect();
            let s = farthest_points(&tp, &r, 8);
            assert!(s.iter().all(|x| tree.node(leaf).range.contains(x)));
        }
    }
}
