//! Symmetric ULV factorization of an [`SpdHss`] and the matching solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::PartitionTree;
use crate::linalg::{cholesky_lower, solve_lower_in_place, solve_lower_transpose_in_place};
use crate::spdhss::SpdHss;

/// Elimination data of one node.
#[derive(Clone, Debug, Default)]
struct NodeFactor {
    /// Explicit `Qᵀ` of a full QR of the node basis; its first `kept` rows span the basis.
    qt: DMatrix<f64>,
    kept: usize,
    /// Cholesky factor of the eliminated diagonal block.
    pivot: DMatrix<f64>,
    /// `L⁻¹·D_ek`.
    w: DMatrix<f64>,
}

/// Factors of `H = ULV`-style elimination, kept apart from the matrix itself.
#[derive(Clone, Debug)]
pub struct UlvFactors {
    tree: PartitionTree,
    block_size: usize,
    nodes: Vec<NodeFactor>,
    root: DMatrix<f64>,
    flops_per_solve: u64,
}

fn gemm_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

fn pivot_error(e: Error, node: usize) -> Error {
    match e {
        Error::NotPositiveDefinite { pivot, value, .. } => {
            Error::NotPositiveDefinite { context: format!("ULV pivot of node {node}"), pivot, value }
        }
        other => other,
    }
}

fn block_diag_owned(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let refs: Vec<&DMatrix<f64>> = parts.iter().collect();
    crate::linalg::block_diag(&refs)
}

/// Factors `h`; fails if any pivot block is not positive definite.
pub fn ulv_factorize(h: &SpdHss) -> Result<UlvFactors> {
    h.validate()?;
    let tree = h.tree();
    let nn = tree.num_nodes();
    let l = tree.num_levels();
    let mut nodes = vec![NodeFactor::default(); nn];
    // Reduced diagonal block and reduced basis handed to the parent.
    let mut dred: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); nn];
    let mut ured: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); nn];
    let mut flops = 0u64;

    let root = tree.root();
    for k in 1..=l {
        for &i in tree.level(k) {
            let node = tree.node(i);
            let (d, u) = if node.is_leaf() {
                (h.leaf_diag(i).clone(), h.leaf_basis(i).clone())
            } else {
                let dd = block_diag_owned(&node.children.iter().map(|&c| std::mem::take(&mut dred[c])).collect::<Vec<_>>());
                let uu = block_diag_owned(&node.children.iter().map(|&c| std::mem::take(&mut ured[c])).collect::<Vec<_>>());
                let d = dd + &uu * h.children_coupling(i) * uu.transpose();
                let u = if i == root { DMatrix::zeros(d.nrows(), 0) } else { uu * h.transfer(i) };
                (d, u)
            };
            if i == root {
                let c = cholesky_lower(&d).map_err(|e| pivot_error(e, i))?;
                flops += gemm_flops(c.nrows(), c.nrows(), 1);
                return Ok(UlvFactors {
                    tree: tree.clone(),
                    block_size: h.block_size(),
                    nodes,
                    root: c,
                    flops_per_solve: flops,
                });
            }
            let n = d.nrows();
            let qt = if u.ncols() == 0 {
                DMatrix::identity(n, n)
            } else {
                u.clone().qr().q_tr_mul_identity(n)
            };
            let kept = u.ncols().min(n);
            let dh = &qt * d * qt.transpose();
            let ne = n - kept;
            let pivot = cholesky_lower(&dh.view((kept, kept), (ne, ne)).into_owned()).map_err(|e| pivot_error(e, i))?;
            let mut w = dh.view((kept, 0), (ne, kept)).into_owned();
            solve_lower_in_place(&pivot, &mut w);
            let schur = dh.view((0, 0), (kept, kept)) - w.tr_mul(&w);
            let ut = (&qt * &u).rows(0, kept).into_owned();
            flops += 2 * gemm_flops(n, n, 1) + 2 * gemm_flops(ne, ne, 1) / 2 + 2 * gemm_flops(ne, kept, 1);
            dred[i] = schur;
            ured[i] = ut;
            nodes[i] = NodeFactor { qt, kept, pivot, w };
        }
    }
    unreachable!("the root is the only node of the top level")
}

trait QrExt {
    fn q_tr_mul_identity(self, n: usize) -> DMatrix<f64>;
}

impl QrExt for nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn> {
    fn q_tr_mul_identity(self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::identity(n, n);
        self.q_tr_mul(&mut m);
        m
    }
}

impl UlvFactors {
    pub fn dim(&self) -> usize {
        self.tree.num_points() * self.block_size
    }

    /// Floating-point operations of one single-vector solve.
    pub fn flops_per_solve(&self) -> u64 {
        self.flops_per_solve
    }

    /// Reals held by the factors.
    pub fn storage_entries(&self) -> usize {
        self.root.len() + self.nodes.iter().map(|f| f.qt.len() + f.pivot.len() + f.w.len()).sum::<usize>()
    }

    /// Solves `H·X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::invalid(format!("right-hand side has {} rows, matrix dimension is {}", b.nrows(), self.dim())));
        }
        let tree = &self.tree;
        let c = b.ncols();
        let l = tree.num_levels();
        let nn = tree.num_nodes();
        let root = tree.root();
        let mut rhs: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, c); nn];
        let mut ye: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, c); nn];
        for k in 1..=l {
            for &i in tree.level(k) {
                let node = tree.node(i);
                let bi = if node.is_leaf() {
                    let r = tree.matrix_range(i, self.block_size);
                    b.rows(r.start, r.len()).into_owned()
                } else {
                    crate::spdhss::stack_children(&rhs, &node.children, c)
                };
                if i == root {
                    rhs[i] = bi;
                    continue;
                }
                let f = &self.nodes[i];
                let bt = &f.qt * bi;
                let mut y = bt.rows(f.kept, bt.nrows() - f.kept).into_owned();
                solve_lower_in_place(&f.pivot, &mut y);
                rhs[i] = bt.rows(0, f.kept) - f.w.tr_mul(&y);
                ye[i] = y;
            }
        }
        let mut x = std::mem::take(&mut rhs[root]);
        solve_lower_in_place(&self.root, &mut x);
        solve_lower_transpose_in_place(&self.root, &mut x);
        let mut sol: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, c); nn];
        sol[root] = x;
        let mut out = DMatrix::zeros(b.nrows(), c);
        for k in (1..=l).rev() {
            for &i in tree.level(k) {
                let node = tree.node(i);
                let xi = std::mem::take(&mut sol[i]);
                let full = if i == root {
                    xi
                } else {
                    let f = &self.nodes[i];
                    let mut xe = &ye[i] - &f.w * &xi;
                    solve_lower_transpose_in_place(&f.pivot, &mut xe);
                    let mut stacked = DMatrix::zeros(f.qt.nrows(), c);
                    stacked.rows_mut(0, f.kept).copy_from(&xi);
                    stacked.rows_mut(f.kept, xe.nrows()).copy_from(&xe);
                    f.qt.tr_mul(&stacked)
                };
                if node.is_leaf() {
                    let r = tree.matrix_range(i, self.block_size);
                    out.rows_mut(r.start, r.len()).copy_from(&full);
                } else {
                    let mut off = 0;
                    for &ch in &node.children {
                        let kc = self.nodes[ch].kept;
                        sol[ch] = full.rows(off, kc).into_owned();
                        off += kc;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Solves `H·x = b` with the factors of `H`.
pub fn ulv_solve(f: &UlvFactors, b: &DVector<f64>) -> Result<DVector<f64>> {
    let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    if b.len() != f.dim() {
        return Err(Error::invalid(format!("right-hand side has length {}, matrix dimension is {}", b.len(), f.dim())));
    }
    let x = f.solve_matrix(&bm)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_ball_points;
    use crate::kernels::KernelSpec;
    use crate::linalg::gaussian_matrix;
    use crate::spdhss::{construct_general, KernelBlocks};

    fn hss(n: usize, cap: usize, r: usize, seed: u64) -> SpdHss {
        let p = generate_ball_points(n, seed).unwrap();
        let tree = PartitionTree::build(&p, cap).unwrap();
        let k = KernelSpec::matern32(0.1, 1e-2).unwrap();
        construct_general(&KernelBlocks::new(&k, &p, &tree).unwrap(), &tree, r).unwrap()
    }

    #[test]
    fn identity_solve_is_identity() {
        let p = generate_ball_points(300, 1).unwrap();
        let tree = PartitionTree::build(&p, 40).unwrap();
        let h = construct_general(&DMatrix::<f64>::identity(300, 300), &tree, 4).unwrap();
        let f = ulv_factorize(&h).unwrap();
        let b = gaussian_matrix(300, 2, 3);
        assert!((f.solve_matrix(&b).unwrap() - &b).norm() < 1e-13 * b.norm());
    }

    #[test]
    fn solves_against_dense_oracle() {
        let h = hss(800, 40, 8, 2);
        assert!(h.tree().num_levels() >= 3);
        let d = h.densify().unwrap();
        let f = ulv_factorize(&h).unwrap();
        let b = gaussian_matrix(800, 20, 4);
        let x = f.solve_matrix(&b).unwrap();
        let res = &d * &x - &b;
        for j in 0..20 {
            assert!(res.column(j).norm() <= 1e-10 * b.column(j).norm(), "column {j}");
        }
    }

    #[test]
    fn zero_and_round_trip() {
        let h = hss(600, 40, 6, 3);
        let f = ulv_factorize(&h).unwrap();
        let z = ulv_solve(&f, &DVector::zeros(600)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let ones = DVector::from_element(600, 1.0);
        let x = ulv_solve(&f, &h.matvec(&ones).unwrap()).unwrap();
        assert!((x - &ones).norm() <= 1e-9 * ones.norm());
        assert!(ulv_solve(&f, &DVector::zeros(5)).is_err());
    }

    #[test]
    fn single_leaf_tree_uses_dense_root() {
        let p = generate_ball_points(50, 1).unwrap();
        let tree = PartitionTree::build(&p, 400).unwrap();
        let k = KernelSpec::gaussian(0.1, 1e-1).unwrap();
        let a = KernelBlocks::new(&k, &p, &tree).unwrap().dense();
        let h = SpdHss {
            tree: tree.clone(),
            block_size: 1,
            rank: 1,
            leaf_diag: vec![a.clone()],
            basis: vec![DMatrix::zeros(50, 0)],
            coupling: vec![DMatrix::zeros(0, 0)],
        };
        let f = ulv_factorize(&h).unwrap();
        let b = gaussian_matrix(50, 1, 2);
        assert!((&a * f.solve_matrix(&b).unwrap() - &b).norm() < 1e-10 * b.norm());
    }

    #[test]
    fn indefinite_input_names_the_node() {
        let mut h = hss(300, 40, 4, 5);
        let leaf = h.tree().leaves()[2];
        h.leaf_diag[leaf] *= -1.0;
        assert!(matches!(ulv_factorize(&h), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn implied_inverse_is_symmetric_and_positive() {
        let h = hss(700, 40, 5, 6);
        let f = ulv_factorize(&h).unwrap();
        let v = gaussian_matrix(700, 100, 8);
        let s = f.solve_matrix(&v).unwrap();
        for j in 0..100 {
            assert!(v.column(j).dot(&s.column(j)) > 0.0);
        }
        let (x, y) = (v.column(0), v.column(1));
        let a = x.dot(&s.column(1));
        let b = y.dot(&s.column(0));
        assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
        assert!(f.flops_per_solve() > 0);
    }
}
