//! Dense primitives: Cholesky, symmetric square roots, projection bases,
//! pivoted QR and the randomized range finder.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative column-norm ratio below which pivoted QR declares rank deficiency.
pub const RANK_RTOL: f64 = 1e-12;

/// Relative eigenvalue floor for `(I + B)^{±1/2}`.
pub const EIG_FLOOR: f64 = 1e-12;

/// Lower Cholesky factor `L` with `L·Lᵀ = A`. Only the lower triangle of `A` is read.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::invalid(format!("cholesky of a {}x{} matrix", n, a.ncols())));
    }
    let mut l = a.clone();
    for j in 0..n {
        if j > 0 {
            let (left, mut right) = l.columns_range_pair_mut(0..j, j..j + 1);
            let lj = left.row(j).transpose();
            let mut col = right.view_mut((j, 0), (n - j, 1));
            col.gemm(-1.0, &left.view((j, 0), (n - j, j)), &lj, 1.0);
        }
        let d = l[(j, j)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { context: "cholesky".into(), pivot: j, value: d });
        }
        let s = d.sqrt();
        l[(j, j)] = s;
        for i in j + 1..n {
            l[(i, j)] /= s;
        }
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
    }
    Ok(l)
}

/// `L⁻¹·B` in place for lower-triangular `L`.
pub fn solve_lower_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    debug_assert_eq!(b.nrows(), n);
    for c in 0..b.ncols() {
        let mut col = b.column_mut(c);
        for j in 0..n {
            let x = col[j] / l[(j, j)];
            col[j] = x;
            if x != 0.0 {
                for i in j + 1..n {
                    col[i] -= l[(i, j)] * x;
                }
            }
        }
    }
}

/// `L⁻ᵀ·B` in place for lower-triangular `L`.
pub fn solve_lower_transpose_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    debug_assert_eq!(b.nrows(), n);
    for c in 0..b.ncols() {
        let mut col = b.column_mut(c);
        for j in (0..n).rev() {
            let lj = l.column(j);
            let mut s = col[j];
            for i in j + 1..n {
                s -= lj[i] * col[i];
            }
            col[j] = s / lj[j];
        }
    }
}

pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    solve_lower_in_place(l, &mut x);
    x
}

pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    solve_lower_transpose_in_place(l, &mut x);
    x
}

/// `S⁻¹·A·S⁻ᵀ` for lower-triangular `S`.
pub fn congruence_inverse(s: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let t = solve_lower(s, a);
    let mut tt = t.transpose();
    solve_lower_in_place(s, &mut tt);
    tt.transpose()
}

/// How [`sym_sqrt_pair`] treats eigenvalues of `I + B` at or below the floor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SqrtMode {
    /// Fail with the offending eigenvalue.
    #[default]
    Strict,
    /// Replace small eigenvalues with the floor.
    Clamp,
}

#[derive(Clone, Debug)]
pub struct SqrtPair {
    /// `(I + B)^{1/2}`
    pub sqrt: DMatrix<f64>,
    /// `(I + B)^{-1/2}`
    pub inv_sqrt: DMatrix<f64>,
    /// Smallest eigenvalue of `I + B` before any clamping.
    pub min_eig: f64,
}

/// `(I + B)^{1/2}` and its inverse from a symmetric eigendecomposition.
///
/// In strict mode an eigenvalue at or below `EIG_FLOOR·λ_max` is reported as a
/// not-positive-definite error whose `pivot` is the eigenvalue's index.
pub fn sym_sqrt_pair(b: &DMatrix<f64>, mode: SqrtMode) -> Result<SqrtPair> {
    let n = b.nrows();
    if b.ncols() != n {
        return Err(Error::invalid("sym_sqrt_pair needs a square matrix"));
    }
    if n == 0 {
        return Ok(SqrtPair { sqrt: DMatrix::zeros(0, 0), inv_sqrt: DMatrix::zeros(0, 0), min_eig: f64::INFINITY });
    }
    let mut a = b.clone();
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    // Symmetrize against roundoff in the assembled input.
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    let vals = eig.eigenvalues;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { context: "I + B eigenvalues".into(), pivot: 0, value: f64::NAN });
    }
    let max = vals.max();
    let (imin, min) = vals.argmin();
    let floor = EIG_FLOOR * max.max(0.0);
    if min <= floor || max <= 0.0 {
        match mode {
            SqrtMode::Strict => {
                return Err(Error::NotPositiveDefinite { context: "I + B eigenvalues".into(), pivot: imin, value: min })
            }
            SqrtMode::Clamp if max <= 0.0 => {
                return Err(Error::NotPositiveDefinite { context: "I + B eigenvalues".into(), pivot: imin, value: min })
            }
            SqrtMode::Clamp => {}
        }
    }
    let q = eig.eigenvectors;
    let s: DVector<f64> = vals.map(|v| v.max(floor).sqrt());
    let mut qs = q.clone();
    let mut qi = q.clone();
    for (j, &sj) in s.iter().enumerate() {
        qs.column_mut(j).scale_mut(sj);
        qi.column_mut(j).scale_mut(1.0 / sj);
    }
    let sqrt = &qs * q.transpose();
    let inv_sqrt = &qi * q.transpose();
    Ok(SqrtPair {
        sqrt: (&sqrt + sqrt.transpose()) * 0.5,
        inv_sqrt: (&inv_sqrt + inv_sqrt.transpose()) * 0.5,
        min_eig: min,
    })
}

/// An orthonormal basis, with a flag set when fewer columns than requested were available.
#[derive(Clone, Debug)]
pub struct Basis {
    pub v: DMatrix<f64>,
    pub rank_deficient: bool,
}

impl Basis {
    pub fn rank(&self) -> usize {
        self.v.ncols()
    }
}

/// Left singular vectors sorted by decreasing singular value.
fn left_singular(h: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let (m, n) = h.shape();
    if m == 0 || n == 0 {
        return (DMatrix::zeros(m, 0), Vec::new());
    }
    let (u, s) = if n > m {
        // H = Rᵀ·Qᵀ with Hᵀ = Q·R, so H and Rᵀ share left singular vectors.
        let r = h.transpose().qr().r();
        let svd = SVD::new(r.transpose(), true, false);
        (svd.u.expect("requested"), svd.singular_values)
    } else {
        let svd = SVD::new(h.clone(), true, false);
        (svd.u.expect("requested"), svd.singular_values)
    };
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
    let s = order.iter().map(|&k| s[k]).collect();
    (u, s)
}

/// Orthonormal `V` with at most `r` columns minimizing `‖H − V·Vᵀ·H‖_F`.
///
/// Singular values below `RANK_RTOL` times the largest are treated as zero, so
/// the result may be narrower than `r`.
pub fn projection_basis(h: &DMatrix<f64>, r: usize) -> Basis {
    let (u, s) = left_singular(h);
    let smax = s.first().copied().unwrap_or(0.0);
    let numerical = s.iter().take_while(|&&v| smax > 0.0 && v > RANK_RTOL * smax).count();
    let k = r.min(numerical);
    Basis { v: u.columns(0, k).into_owned(), rank_deficient: k < r }
}

/// Column-pivoted Householder QR, truncated early.
#[derive(Clone, Debug)]
pub struct PivotedQr {
    /// `m × k` with orthonormal columns.
    pub q: DMatrix<f64>,
    /// `k × n` upper trapezoidal, columns in pivot order.
    pub r: DMatrix<f64>,
    /// `perm[j]` is the original column in pivot position `j`.
    pub perm: Vec<usize>,
    /// Frobenius norm of the part of `A` left out.
    pub residual: f64,
}

impl PivotedQr {
    pub fn rank(&self) -> usize {
        self.q.ncols()
    }
}

/// When [`pivoted_qr`] stops.
#[derive(Clone, Copy, Debug)]
pub enum QrStop {
    /// At `max_rank` columns or when the largest remaining column norm
    /// falls below `RANK_RTOL` times the first pivot norm.
    Rank(usize),
    /// At `max_rank` columns or when the Frobenius norm of the trailing block
    /// falls to `rel_tol·‖A‖_F`.
    Tolerance { max_rank: usize, rel_tol: f64 },
}

pub fn pivoted_qr(a: &DMatrix<f64>, stop: QrStop) -> PivotedQr {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut norms: Vec<f64> = (0..n).map(|j| w.column(j).norm_squared()).collect();
    let mut exact = norms.clone();
    let total: f64 = norms.iter().sum();
    let max_rank = match stop {
        QrStop::Rank(r) => r,
        QrStop::Tolerance { max_rank, .. } => max_rank,
    }
    .min(m)
    .min(n);
    let mut taus = Vec::with_capacity(max_rank);
    let mut first = 0.0;
    let mut k = 0;
    while k < max_rank {
        let (p, &best) = norms[k..]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, v)| (i + k, v))
            .expect("nonempty");
        let remaining: f64 = norms[k..].iter().sum();
        match stop {
            QrStop::Rank(_) => {
                if k == 0 {
                    first = best.sqrt();
                }
                if best.sqrt() <= RANK_RTOL * first || best == 0.0 {
                    break;
                }
            }
            QrStop::Tolerance { rel_tol, .. } => {
                if remaining.max(0.0).sqrt() <= rel_tol * total.sqrt() || best == 0.0 {
                    break;
                }
            }
        }
        if p != k {
            w.swap_columns(p, k);
            perm.swap(p, k);
            norms.swap(p, k);
            exact.swap(p, k);
        }
        // Householder reflector for w[k.., k].
        let alpha = w[(k, k)];
        let xnorm = w.view((k, k), (m - k, 1)).norm();
        let beta = if alpha >= 0.0 { -xnorm } else { xnorm };
        let tau = if xnorm == 0.0 { 0.0 } else { (beta - alpha) / beta };
        if xnorm != 0.0 {
            let scale = 1.0 / (alpha - beta);
            for i in k + 1..m {
                w[(i, k)] *= scale;
            }
            w[(k, k)] = beta;
        }
        taus.push(tau);
        if k + 1 < n && tau != 0.0 {
            let mut v = DVector::zeros(m - k);
            v[0] = 1.0;
            for i in k + 1..m {
                v[i - k] = w[(i, k)];
            }
            let mut trail = w.view_mut((k, k + 1), (m - k, n - k - 1));
            let wv = trail.tr_mul(&v);
            trail.ger(-tau, &v, &wv, 1.0);
        }
        for j in k + 1..n {
            let rkj = w[(k, j)];
            norms[j] -= rkj * rkj;
            if norms[j] <= 1e-8 * exact[j] {
                let c = w.view((k + 1, j), (m - k - 1, 1)).norm_squared();
                norms[j] = c;
                exact[j] = c;
            }
        }
        k += 1;
    }
    let residual = norms[k..].iter().map(|v| v.max(0.0)).sum::<f64>().sqrt();
    let mut r = DMatrix::zeros(k, n);
    for j in 0..n {
        for i in 0..k.min(j + 1) {
            r[(i, j)] = w[(i, j)];
        }
    }
    // Q = H_0·H_1·…·H_{k-1} applied to the first k unit vectors.
    let mut q = DMatrix::zeros(m, k);
    for i in 0..k {
        q[(i, i)] = 1.0;
    }
    for s in (0..k).rev() {
        let tau = taus[s];
        if tau == 0.0 {
            continue;
        }
        let mut v = DVector::zeros(m - s);
        v[0] = 1.0;
        for i in s + 1..m {
            v[i - s] = w[(i, s)];
        }
        let mut block = q.view_mut((s, 0), (m - s, k));
        let wv = block.tr_mul(&v);
        block.ger(-tau, &v, &wv, 1.0);
    }
    PivotedQr { q, r, perm, residual }
}

/// First `r` columns of the pivoted-QR `Q` factor of `Ψ`, truncated at numerical rank.
pub fn pivoted_qr_basis(psi: &DMatrix<f64>, r: usize) -> Basis {
    let qr = pivoted_qr(psi, QrStop::Rank(r));
    let rank_deficient = qr.rank() < r;
    Basis { v: qr.q, rank_deficient }
}

/// A row interpolative decomposition `M ≈ X·M[skel, :]`.
#[derive(Clone, Debug)]
pub struct RowId {
    /// Selected rows of `M`, in pivot order.
    pub skel: Vec<usize>,
    /// `rows(M) × skel.len()`; equals the identity on the skeleton rows.
    pub interp: DMatrix<f64>,
    /// `‖M − X·M[skel, :]‖_F / ‖M‖_F` bound from the QR residual.
    pub rel_residual: f64,
}

/// Row interpolative decomposition of `M` to relative Frobenius tolerance `tol`.
pub fn row_id(m: &DMatrix<f64>, tol: f64, max_rank: usize) -> RowId {
    row_id_floored(m, tol, 0.0, max_rank)
}

/// [`row_id`] that also stops once the absolute residual reaches `floor`.
pub fn row_id_floored(m: &DMatrix<f64>, tol: f64, floor: f64, max_rank: usize) -> RowId {
    let rows = m.nrows();
    if rows == 0 || m.ncols() == 0 {
        return RowId { skel: Vec::new(), interp: DMatrix::zeros(rows, 0), rel_residual: 0.0 };
    }
    let mt = m.transpose();
    let fro = mt.norm();
    let rel_tol = if fro > 0.0 { tol.max(floor / fro) } else { tol };
    let qr = pivoted_qr(&mt, QrStop::Tolerance { max_rank, rel_tol });
    let k = qr.rank();
    let skel = qr.perm[..k].to_vec();
    // Mᵀ[:, P] ≈ Q·[R11 R12] gives Mᵀ[:, rest] ≈ Mᵀ[:, skel]·R11⁻¹R12.
    let r11 = qr.r.columns(0, k).into_owned();
    let r12 = qr.r.columns(k, rows - k).into_owned();
    let t = if k == 0 {
        DMatrix::zeros(0, rows - k)
    } else {
        r11.solve_upper_triangular(&r12).unwrap_or_else(|| DMatrix::zeros(k, rows - k))
    };
    let mut interp = DMatrix::zeros(rows, k);
    for (c, &row) in qr.perm[..k].iter().enumerate() {
        interp[(row, c)] = 1.0;
    }
    for (c, &row) in qr.perm[k..].iter().enumerate() {
        for s in 0..k {
            interp[(row, s)] = t[(s, c)];
        }
    }
    let rel_residual = if fro > 0.0 { qr.residual / fro } else { 0.0 };
    RowId { skel, interp, rel_residual }
}

/// A seeded Gaussian test matrix `Ω`.
///
/// Entries come from a ChaCha8 stream seeded with `seed`, converted with the
/// Ziggurat sampler of `rand_distr::StandardNormal`, filled column by column.
#[derive(Clone, Debug)]
pub struct RandomSketch {
    pub omega: DMatrix<f64>,
    pub seed: u64,
    pub r: usize,
    pub p: usize,
}

impl RandomSketch {
    pub fn new(rows: usize, r: usize, p: usize, seed: u64) -> Self {
        RandomSketch { omega: gaussian_matrix(rows, r + p, seed), seed, r, p }
    }

    pub fn width(&self) -> usize {
        self.r + self.p
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    DMatrix::from_vec(rows, cols, data)
}

/// Randomized range finder: `Ψ = H·Ω`, then the first `r` pivoted-QR columns of `Ψ`.
///
/// `apply` receives `Ω` with `ncols` rows and `r + p` columns.
pub fn randomized_basis<F>(ncols: usize, apply: F, r: usize, p: usize, seed: u64) -> Result<Basis>
where
    F: FnOnce(&DMatrix<f64>) -> DMatrix<f64>,
{
    if r == 0 {
        return Err(Error::invalid("target rank must be at least 1"));
    }
    let sketch = RandomSketch::new(ncols, r, p, seed);
    let psi = apply(&sketch.omega);
    if psi.ncols() != r + p {
        return Err(Error::contract(format!("operator returned {} columns, expected {}", psi.ncols(), r + p)));
    }
    Ok(pivoted_qr_basis(&psi, r))
}

/// Frobenius norm of `A − B`, relative to `‖B‖_F`.
pub fn rel_fro_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let nb = b.norm();
    let d = (a - b).norm();
    if nb == 0.0 {
        d
    } else {
        d / nb
    }
}

/// Block diagonal matrix from a list of blocks.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), b.shape()).copy_from(*b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        gaussian_matrix(m, n, seed)
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let g = random_matrix(n, n, seed);
        let mut a = &g * g.transpose();
        for i in 0..n {
            a[(i, i)] += n as f64;
        }
        a
    }

    fn projector(v: &DMatrix<f64>) -> DMatrix<f64> {
        v * v.transpose()
    }

    #[test]
    fn cholesky_examples() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert_eq!(cholesky_lower(&i).unwrap(), i);

        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let l = cholesky_lower(&a).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]));
        assert!(rel_fro_error(&(&l * l.transpose()), &a) < 1e-15);

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match cholesky_lower(&bad) {
            Err(Error::NotPositiveDefinite { pivot, value, .. }) => {
                assert_eq!(pivot, 1);
                assert!((value + 3.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cholesky_reconstructs_and_solves() {
        let a = random_spd(60, 3);
        let l = cholesky_lower(&a).unwrap();
        assert!(rel_fro_error(&(&l * l.transpose()), &a) < 1e-12);
        let b = random_matrix(60, 4, 9);
        let x = solve_lower_transpose(&l, &solve_lower(&l, &b));
        assert!(rel_fro_error(&(&a * &x), &b) < 1e-12);
        let c = congruence_inverse(&l, &a);
        assert!(rel_fro_error(&c, &DMatrix::identity(60, 60)) < 1e-12);
    }

    #[test]
    fn sqrt_pair_examples() {
        let z = DMatrix::<f64>::zeros(3, 3);
        let sp = sym_sqrt_pair(&z, SqrtMode::Strict).unwrap();
        assert!(rel_fro_error(&sp.sqrt, &DMatrix::identity(3, 3)) < 1e-15);
        assert!(rel_fro_error(&sp.inv_sqrt, &DMatrix::identity(3, 3)) < 1e-15);

        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.0]));
        let sp = sym_sqrt_pair(&b, SqrtMode::Strict).unwrap();
        assert!((sp.sqrt[(0, 0)] - 2.0).abs() < 1e-14 && (sp.sqrt[(1, 1)] - 1.0).abs() < 1e-14);
        assert!((sp.inv_sqrt[(0, 0)] - 0.5).abs() < 1e-14 && (sp.inv_sqrt[(1, 1)] - 1.0).abs() < 1e-14);
        assert!(sp.sqrt[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn sqrt_pair_rejects_indefinite_unless_clamped() {
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.5, 0.2]));
        match sym_sqrt_pair(&b, SqrtMode::Strict) {
            Err(Error::NotPositiveDefinite { value, .. }) => assert!((value + 0.5).abs() < 1e-14),
            other => panic!("unexpected {other:?}"),
        }
        let sp = sym_sqrt_pair(&b, SqrtMode::Clamp).unwrap();
        assert!((sp.min_eig + 0.5).abs() < 1e-14);
        assert!(sp.sqrt.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn projection_basis_examples() {
        let h = DMatrix::<f64>::identity(5, 5);
        let b = projection_basis(&h, 2);
        assert_eq!(b.rank(), 2);
        let resid = (&h - projector(&b.v) * &h).norm_squared();
        assert!((resid - 3.0).abs() < 1e-12);

        let u = DVector::from_vec(vec![1.0, 2.0, -2.0]);
        let v = DVector::from_vec(vec![0.5, 1.0, 3.0, -1.0]);
        let h = &u * v.transpose();
        let b = projection_basis(&h, 1);
        let expect = &u / u.norm();
        let got = b.v.column(0).into_owned();
        assert!((&got - &expect).norm() < 1e-12 || (&got + &expect).norm() < 1e-12);

        let b = projection_basis(&h, 3);
        assert_eq!(b.rank(), 1);
        assert!(b.rank_deficient);
    }

    #[test]
    fn projection_basis_wide_and_duplicated_columns() {
        let h = random_matrix(8, 30, 5);
        let err = |h: &DMatrix<f64>, r| {
            let b = projection_basis(h, r);
            (h - projector(&b.v) * h).norm()
        };
        let mut h2 = DMatrix::zeros(8, 31);
        h2.columns_mut(0, 30).copy_from(&h);
        h2.column_mut(30).copy_from(&h.column(0));
        // Duplicating a column changes singular values, so compare against the SVD tail directly.
        let sv = SVD::new(h2.clone(), false, false).singular_values;
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let tail: f64 = s[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((err(&h2, 3) - tail).abs() < 1e-10 * tail);
        let b = projection_basis(&h, 4);
        assert!(rel_fro_error(&(b.v.transpose() * &b.v), &DMatrix::identity(4, 4)) < 1e-12);
    }

    #[test]
    fn pivoted_qr_basis_examples() {
        let psi = projection_basis(&random_matrix(10, 4, 1), 4).v;
        let u = pivoted_qr_basis(&psi, 4);
        let pp = psi.transpose() * projector(&u.v) * &psi;
        assert!(rel_fro_error(&pp, &DMatrix::identity(4, 4)) < 1e-12);

        let v = DVector::from_vec(vec![3.0, 0.0, 4.0]);
        let mut psi = DMatrix::zeros(3, 2);
        psi.set_column(0, &v);
        psi.set_column(1, &(&v * 2.0));
        let u = pivoted_qr_basis(&psi, 1);
        let e = &v / 5.0;
        let got = u.v.column(0).into_owned();
        assert!((&got - &e).norm() < 1e-12 || (&got + &e).norm() < 1e-12);
        let u = pivoted_qr_basis(&psi, 2);
        assert_eq!(u.rank(), 1);
        assert!(u.rank_deficient);
    }

    #[test]
    fn pivoted_qr_factors_reproduce_input() {
        let a = random_matrix(12, 7, 21);
        let qr = pivoted_qr(&a, QrStop::Rank(7));
        let mut ap = DMatrix::zeros(12, 7);
        for (j, &p) in qr.perm.iter().enumerate() {
            ap.set_column(j, &a.column(p));
        }
        assert!(rel_fro_error(&(&qr.q * &qr.r), &ap) < 1e-13);
        assert!(rel_fro_error(&(qr.q.transpose() * &qr.q), &DMatrix::identity(7, 7)) < 1e-13);
    }

    #[test]
    fn row_id_recovers_low_rank() {
        let m = random_matrix(40, 6, 2) * random_matrix(6, 50, 3);
        let id = row_id(&m, 1e-12, 40);
        assert_eq!(id.skel.len(), 6);
        let sk = DMatrix::from_fn(6, 50, |i, j| m[(id.skel[i], j)]);
        assert!(rel_fro_error(&(&id.interp * sk), &m) < 1e-10);
    }

    #[test]
    fn randomized_basis_examples() {
        let u = randomized_basis(6, |o| o.clone(), 2, 2, 1).unwrap();
        assert!(rel_fro_error(&(u.v.transpose() * &u.v), &DMatrix::identity(2, 2)) < 1e-13);

        let mut e1 = DMatrix::zeros(7, 7);
        e1[(0, 0)] = 1.0;
        let u = randomized_basis(7, |o| &e1 * o, 1, 5, 4).unwrap();
        assert!((u.v[(0, 0)].abs() - 1.0).abs() < 1e-10);

        let h = random_matrix(50, 5, 7) * random_matrix(5, 40, 8);
        let u = randomized_basis(40, |o| &h * o, 5, 10, 11).unwrap();
        assert!(rel_fro_error(&(projector(&u.v) * &h), &h) < 1e-10);

        let a = randomized_basis(40, |o| &h * o, 5, 10, 11).unwrap();
        assert_eq!(a.v, u.v);
    }

    #[test]
    fn block_diag_layout() {
        let a = DMatrix::from_element(2, 1, 1.0);
        let b = DMatrix::from_element(1, 3, 2.0);
        let d = block_diag(&[&a, &b]);
        assert_eq!(d.shape(), (3, 4));
        assert_eq!(d[(1, 0)], 1.0);
        assert_eq!(d[(2, 3)], 2.0);
        assert_eq!(d[(0, 1)], 0.0);
    }
}
