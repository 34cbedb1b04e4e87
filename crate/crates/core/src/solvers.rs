//! Preconditioned conjugate gradients and the baseline preconditioners.

use std::cell::Cell;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{PartitionTree, PointSet};
use crate::h2::H2Matrix;
use crate::kernels::KernelSpec;
use crate::linalg::{cholesky_lower, solve_lower_in_place, solve_lower_transpose_in_place};
use crate::spdhss::SpdHss;
use crate::ulv::{ulv_solve, UlvFactors};

/// A symmetric linear map.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

/// An SPD approximation of `A⁻¹`.
pub trait Preconditioner {
    fn dim(&self) -> usize;
    fn apply_inverse(&self, r: &DVector<f64>) -> Result<DVector<f64>>;
    fn label(&self) -> String;
}

fn check_len(len: usize, dim: usize) -> Result<()> {
    if len != dim {
        return Err(Error::invalid(format!("vector has length {len}, operator dimension is {dim}")));
    }
    Ok(())
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(x.len(), self.nrows())?;
        Ok(self * x)
    }
}

impl LinearOperator for H2Matrix {
    fn dim(&self) -> usize {
        H2Matrix::dim(self)
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(DVector::from_column_slice(self.matmat(&xm)?.as_slice()))
    }
}

impl LinearOperator for SpdHss {
    fn dim(&self) -> usize {
        SpdHss::dim(self)
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.matvec(x)
    }
}

/// Wraps an operator and counts its applications.
pub struct Counted<'a, A: LinearOperator + ?Sized> {
    inner: &'a A,
    count: Cell<usize>,
}

impl<'a, A: LinearOperator + ?Sized> Counted<'a, A> {
    pub fn new(inner: &'a A) -> Self {
        Counted { inner, count: Cell::new(0) }
    }

    pub fn count(&self) -> usize {
        self.count.get()
    }
}

impl<A: LinearOperator + ?Sized> LinearOperator for Counted<'_, A> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.count.set(self.count.get() + 1);
        self.inner.apply(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    /// Relative residual after each iteration, from the CG recurrence.
    pub residual_history: Vec<f64>,
    pub wall_time: f64,
    pub matvec_count: usize,
    /// Set when `pᵀAp` was not positive and the iteration had to stop.
    pub breakdown: Option<String>,
}

impl SolveReport {
    pub fn final_rel_res(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(1.0)
    }
}

/// Preconditioned conjugate gradients from a zero initial guess.
pub fn pcg(
    a: &dyn LinearOperator,
    m: &dyn Preconditioner,
    b: &DVector<f64>,
    tol: f64,
    maxit: usize,
) -> Result<(DVector<f64>, SolveReport)> {
    let n = a.dim();
    if m.dim() != n {
        return Err(Error::invalid(format!("preconditioner dimension {} differs from {n}", m.dim())));
    }
    check_len(b.len(), n)?;
    let bnorm = b.norm();
    if bnorm == 0.0 || !bnorm.is_finite() {
        return Err(Error::invalid("right-hand side must be nonzero and finite"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let start = Instant::now();
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut z = m.apply_inverse(&r)?;
    let mut rz = r.dot(&z);
    if !(rz > 0.0) {
        return Err(Error::IndefinitePreconditioner { iteration: 0, value: rz });
    }
    let mut p = z.clone();
    let mut report = SolveReport {
        iterations: 0,
        converged: false,
        residual_history: Vec::new(),
        wall_time: 0.0,
        matvec_count: 0,
        breakdown: None,
    };
    for it in 1..=maxit {
        let q = a.apply(&p)?;
        report.matvec_count += 1;
        let pq = p.dot(&q);
        if !(pq > 0.0) || !pq.is_finite() {
            report.breakdown = Some(format!("pᵀAp = {pq:e} at iteration {it}"));
            break;
        }
        let alpha = rz / pq;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &q, 1.0);
        let rel = r.norm() / bnorm;
        report.iterations = it;
        report.residual_history.push(rel);
        if rel <= tol {
            report.converged = true;
            break;
        }
        z = m.apply_inverse(&r)?;
        let rz_new = r.dot(&z);
        if !(rz_new > 0.0) {
            return Err(Error::IndefinitePreconditioner { iteration: it, value: rz_new });
        }
        p = &z + (rz_new / rz) * p;
        rz = rz_new;
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((x, report))
}

/// Right-hand side with entries drawn uniformly from `[-0.5, 0.5]`.
pub fn uniform_rhs(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-0.5, 0.5).expect("valid bounds");
    DVector::from_fn(n, |_, _| dist.sample(&mut rng))
}

/// No preconditioning.
#[derive(Clone, Debug)]
pub struct Identity(pub usize);

impl Preconditioner for Identity {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply_inverse(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(r.len(), self.0)?;
        Ok(r.clone())
    }

    fn label(&self) -> String {
        "none".into()
    }
}

/// Exact inverses of the leaf diagonal blocks, in tree order.
#[derive(Clone, Debug)]
pub struct BlockJacobi {
    ranges: Vec<std::ops::Range<usize>>,
    factors: Vec<DMatrix<f64>>,
    dim: usize,
}

/// Block Jacobi from the leaves of `tree`; `points` are in their original order.
pub fn build_block_jacobi(kernel: &KernelSpec, points: &PointSet, tree: &PartitionTree) -> Result<BlockJacobi> {
    if points.len() != tree.num_points() {
        return Err(Error::invalid("point set and tree sizes differ"));
    }
    let bs = kernel.block_size();
    let pts = tree.permute_points(points).with_block_size(bs)?;
    let mut ranges = Vec::new();
    let mut factors = Vec::new();
    for &leaf in tree.leaves() {
        let r = tree.node(leaf).range.clone();
        let a = kernel.eval_block(&pts, r.clone(), r);
        let l = cholesky_lower(&a).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot, value, .. } => {
                Error::NotPositiveDefinite { context: format!("block Jacobi leaf {leaf}"), pivot, value }
            }
            other => other,
        })?;
        ranges.push(tree.matrix_range(leaf, bs));
        factors.push(l);
    }
    Ok(BlockJacobi { ranges, factors, dim: pts.matrix_dim() })
}

impl Preconditioner for BlockJacobi {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply_inverse(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(r.len(), self.dim)?;
        let mut out = r.clone();
        for (range, l) in self.ranges.iter().zip(&self.factors) {
            let mut blk = DMatrix::from_column_slice(range.len(), 1, &r.as_slice()[range.clone()]);
            solve_lower_in_place(l, &mut blk);
            solve_lower_transpose_in_place(l, &mut blk);
            out.rows_mut(range.start, range.len()).copy_from(&blk);
        }
        Ok(out)
    }

    fn label(&self) -> String {
        "bj".into()
    }
}

/// Factorized sparse approximate inverse `M⁻¹ = GᵀG`.
#[derive(Clone, Debug)]
pub struct Fsai {
    rows: Vec<(Vec<usize>, Vec<f64>)>,
    k: usize,
}

impl Fsai {
    /// Row `i` of `G` as (column indices, values), the last entry being the diagonal.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (c, v) = &self.rows[i];
        (c, v)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|(c, _)| c.len()).sum()
    }

    pub fn k_neighbors(&self) -> usize {
        self.k
    }
}

/// Indices of the `k` points nearest to `i` among `0..=i`, in increasing order.
/// Ties are broken by index.
fn previous_neighbors(points: &PointSet, i: usize, k: usize) -> Vec<usize> {
    let pi = points.point(i);
    let mut cand: Vec<(f64, usize)> = (0..=i)
        .map(|j| (points.point(j).iter().zip(pi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    let mut out: Vec<usize> = cand.into_iter().map(|(_, j)| j).collect();
    out.sort_unstable();
    out
}

/// FSAI with a nearest-neighbour pattern. Point `i`'s row uses the `k`
/// nearest points among `0..=i` (itself included); for 3x3 kernels it uses
/// `k/3` points with all their components.
pub fn build_fsai(kernel: &KernelSpec, points: &PointSet, k_neighbors: usize) -> Result<Fsai> {
    let bs = kernel.block_size();
    let pts = points.clone().with_block_size(bs)?;
    build_fsai_with(&pts, k_neighbors, |idx| kernel.eval_matrix_entries(&pts, idx, idx))
}

/// FSAI from a principal-submatrix oracle: `local(idx)` returns `A[idx, idx]`
/// in matrix indices. The block size is taken from `points`.
pub fn build_fsai_with<F>(points: &PointSet, k_neighbors: usize, local: F) -> Result<Fsai>
where
    F: Fn(&[usize]) -> DMatrix<f64>,
{
    let bs = points.block_size();
    if k_neighbors == 0 || k_neighbors % bs != 0 {
        return Err(Error::invalid(format!("neighbour count {k_neighbors} must be a positive multiple of {bs}")));
    }
    let kp = k_neighbors / bs;
    let mut rows = Vec::with_capacity(points.matrix_dim());
    for i in 0..points.len() {
        let nbrs = previous_neighbors(points, i, kp);
        for c in 0..bs {
            let row = i * bs + c;
            let mut cols: Vec<usize> = Vec::with_capacity(nbrs.len() * bs);
            for &j in &nbrs {
                for cj in 0..bs {
                    let col = j * bs + cj;
                    if col <= row {
                        cols.push(col);
                    }
                }
            }
            let a = local(&cols);
            let l = cholesky_lower(&a).map_err(|e| match e {
                Error::NotPositiveDefinite { pivot, value, .. } => {
                    Error::NotPositiveDefinite { context: format!("FSAI row {row}"), pivot, value }
                }
                other => other,
            })?;
            let m = cols.len();
            let mut g = DMatrix::zeros(m, 1);
            g[(m - 1, 0)] = 1.0;
            solve_lower_in_place(&l, &mut g);
            solve_lower_transpose_in_place(&l, &mut g);
            let scale = 1.0 / g[(m - 1, 0)].sqrt();
            rows.push((cols, g.iter().map(|v| v * scale).collect()));
        }
    }
    Ok(Fsai { rows, k: k_neighbors })
}

impl Preconditioner for Fsai {
    fn dim(&self) -> usize {
        self.rows.len()
    }

    fn apply_inverse(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(r.len(), self.rows.len())?;
        let w: Vec<f64> = self.rows.iter().map(|(c, v)| c.iter().zip(v).map(|(&j, g)| g * r[j]).sum()).collect();
        let mut out = DVector::zeros(r.len());
        for ((c, v), wi) in self.rows.iter().zip(w) {
            for (&j, g) in c.iter().zip(v) {
                out[j] += g * wi;
            }
        }
        Ok(out)
    }

    fn label(&self) -> String {
        "fsai".into()
    }
}

/// An SPD HSS approximation applied through its ULV factors.
#[derive(Clone, Debug)]
pub struct SpdHssPreconditioner {
    factors: UlvFactors,
    rank: usize,
}

impl SpdHssPreconditioner {
    pub fn factors(&self) -> &UlvFactors {
        &self.factors
    }
}

/// Wraps `f`, which must factor `h`.
pub fn spdhss_preconditioner(h: &SpdHss, f: UlvFactors) -> Result<SpdHssPreconditioner> {
    if h.dim() != f.dim() {
        return Err(Error::invalid("factors do not match the matrix"));
    }
    Ok(SpdHssPreconditioner { factors: f, rank: h.target_rank() })
}

impl Preconditioner for SpdHssPreconditioner {
    fn dim(&self) -> usize {
        self.factors.dim()
    }

    fn apply_inverse(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        ulv_solve(&self.factors, r)
    }

    fn label(&self) -> String {
        format!("spdhss(r={})", self.rank)
    }
}
