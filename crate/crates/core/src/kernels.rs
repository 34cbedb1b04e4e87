//! Closed-form kernel functions and dense block assembly.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::PointSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    /// `(1 + √3·l·d)·exp(−√3·l·d)`
    Matern32,
    /// `exp(−l·d²)`
    Gaussian,
    /// `1 / √(1 + l·d²)`
    Imq,
    /// Rotne–Prager–Yamakawa 3×3 mobility tensor for particles of radius `a`.
    Rpy,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Imq => "imq",
            KernelFamily::Rpy => "rpy",
        }
    }

    pub fn block_size(self) -> usize {
        if self == KernelFamily::Rpy {
            3
        } else {
            1
        }
    }

    fn code(self) -> u8 {
        match self {
            KernelFamily::Matern32 => 0,
            KernelFamily::Gaussian => 1,
            KernelFamily::Imq => 2,
            KernelFamily::Rpy => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => KernelFamily::Matern32,
            1 => KernelFamily::Gaussian,
            2 => KernelFamily::Imq,
            3 => KernelFamily::Rpy,
            _ => return None,
        })
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "matern32" | "matern" => Ok(KernelFamily::Matern32),
            "gaussian" => Ok(KernelFamily::Gaussian),
            "imq" => Ok(KernelFamily::Imq),
            "rpy" => Ok(KernelFamily::Rpy),
            other => Err(Error::invalid(format!("unknown kernel family {other:?}"))),
        }
    }
}

/// Value of a kernel at one pair of points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelValue {
    Scalar(f64),
    Tensor([[f64; 3]; 3]),
}

/// A kernel family with its parameter and the diagonal shift `σ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    param: f64,
    shift: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, param: f64, shift: f64) -> Result<Self> {
        if !(param.is_finite() && param > 0.0) {
            return Err(Error::invalid(format!("kernel parameter must be positive, got {param}")));
        }
        if !(shift.is_finite() && shift >= 0.0) {
            return Err(Error::invalid(format!("diagonal shift must be nonnegative, got {shift}")));
        }
        Ok(KernelSpec { family, param, shift })
    }

    pub fn matern32(l: f64, shift: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern32, l, shift)
    }

    pub fn gaussian(l: f64, shift: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, l, shift)
    }

    pub fn imq(l: f64, shift: f64) -> Result<Self> {
        Self::new(KernelFamily::Imq, l, shift)
    }

    /// RPY with particle radius `a` and no diagonal shift.
    pub fn rpy(a: f64) -> Result<Self> {
        Self::new(KernelFamily::Rpy, a, 0.0)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn param(&self) -> f64 {
        self.param
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn block_size(&self) -> usize {
        self.family.block_size()
    }

    pub(crate) fn to_code(self) -> u8 {
        self.family.code()
    }

    pub(crate) fn from_parts(code: u8, param: f64, shift: f64) -> Result<Self> {
        let family = KernelFamily::from_code(code).ok_or_else(|| Error::format(format!("kernel code {code}")))?;
        Self::new(family, param, shift).map_err(|e| Error::format(e.to_string()))
    }

    #[inline]
    fn scalar(&self, d2: f64) -> f64 {
        let l = self.param;
        match self.family {
            KernelFamily::Matern32 => {
                let t = 3f64.sqrt() * l * d2.sqrt();
                (1.0 + t) * (-t).exp()
            }
            KernelFamily::Gaussian => (-l * d2).exp(),
            KernelFamily::Imq => 1.0 / (1.0 + l * d2).sqrt(),
            KernelFamily::Rpy => unreachable!("tensor kernel"),
        }
    }

    #[inline]
    fn tensor(&self, r: [f64; 3]) -> [[f64; 3]; 3] {
        let a = self.param;
        let d2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
        let mut out = [[0.0; 3]; 3];
        if d2 == 0.0 {
            for (k, row) in out.iter_mut().enumerate() {
                row[k] = 1.0 / a;
            }
            return out;
        }
        let d = d2.sqrt();
        let (c_id, c_rr) = if d >= 2.0 * a {
            let c1 = 3.0 / (4.0 * d);
            let c2 = 3.0 * a * a / (2.0 * d2 * d);
            (c1 + c2 / 3.0, c1 - c2)
        } else {
            ((1.0 - 9.0 * d / (32.0 * a)) / a, 3.0 * d / (32.0 * a * a))
        };
        for i in 0..3 {
            for j in 0..3 {
                let rr = r[i] * r[j] / d2;
                out[i][j] = c_rr * rr + if i == j { c_id } else { 0.0 };
            }
        }
        out
    }

    /// Kernel value `K(x, y)` without the diagonal shift.
    pub fn eval_entry(&self, x: &[f64], y: &[f64]) -> Result<KernelValue> {
        if x.len() != y.len() {
            return Err(Error::invalid("points of different dimension"));
        }
        if self.family == KernelFamily::Rpy {
            if x.len() != 3 {
                return Err(Error::invalid("the RPY kernel is defined for 3D points"));
            }
            Ok(KernelValue::Tensor(self.tensor([x[0] - y[0], x[1] - y[1], x[2] - y[2]])))
        } else {
            Ok(KernelValue::Scalar(self.scalar(dist2(x, y))))
        }
    }

    /// Dense kernel block for contiguous point ranges, with `σ` added on
    /// entries that sit on the global diagonal.
    pub fn eval_block(&self, points: &PointSet, rows: Range<usize>, cols: Range<usize>) -> DMatrix<f64> {
        let r: Vec<usize> = rows.collect();
        let c: Vec<usize> = cols.collect();
        self.eval_block_indexed(points, &r, &c)
    }

    /// Dense kernel block for arbitrary point index lists.
    pub fn eval_block_indexed(&self, points: &PointSet, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let bs = self.block_size();
        let mut m = DMatrix::zeros(rows.len() * bs, cols.len() * bs);
        self.fill_block(points, rows, cols, &mut m);
        m
    }

    /// Dense block for arbitrary matrix row and column indices (point `k / bs`,
    /// component `k % bs`), with `σ` on entries whose global indices coincide.
    pub fn eval_matrix_entries(&self, points: &PointSet, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let bs = self.block_size();
        if bs == 1 {
            return self.eval_block_indexed(points, rows, cols);
        }
        let mut m = DMatrix::zeros(rows.len(), cols.len());
        for (jc, &j) in cols.iter().enumerate() {
            let y = points.point(j / 3);
            for (ir, &i) in rows.iter().enumerate() {
                let x = points.point(i / 3);
                let t = self.tensor([x[0] - y[0], x[1] - y[1], x[2] - y[2]]);
                let mut v = t[i % 3][j % 3];
                if i == j {
                    v += self.shift;
                }
                m[(ir, jc)] = v;
            }
        }
        m
    }

    pub(crate) fn fill_block(&self, points: &PointSet, rows: &[usize], cols: &[usize], out: &mut DMatrix<f64>) {
        let bs = self.block_size();
        debug_assert_eq!(out.nrows(), rows.len() * bs);
        debug_assert_eq!(out.ncols(), cols.len() * bs);
        if bs == 1 {
            for (jc, &j) in cols.iter().enumerate() {
                let y = points.point(j);
                let col = out.column_mut(jc);
                for (v, &i) in col.into_iter().zip(rows) {
                    let mut val = self.scalar(dist2(points.point(i), y));
                    if i == j {
                        val += self.shift;
                    }
                    *v = val;
                }
            }
        } else {
            for (jc, &j) in cols.iter().enumerate() {
                let y = points.point(j);
                for (ir, &i) in rows.iter().enumerate() {
                    let x = points.point(i);
                    let t = self.tensor([x[0] - y[0], x[1] - y[1], x[2] - y[2]]);
                    for a in 0..3 {
                        for b in 0..3 {
                            let mut val = t[a][b];
                            if i == j && a == b {
                                val += self.shift;
                            }
                            out[(3 * ir + a, 3 * jc + b)] = val;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dist2(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_ball_points;
    use nalgebra::SymmetricEigen;

    fn scalar(v: KernelValue) -> f64 {
        match v {
            KernelValue::Scalar(s) => s,
            KernelValue::Tensor(_) => panic!("expected scalar"),
        }
    }

    #[test]
    fn scalar_kernel_values() {
        let g = KernelSpec::gaussian(2.0, 0.0).unwrap();
        assert_eq!(scalar(g.eval_entry(&[0.3, 0.2, 0.1], &[0.3, 0.2, 0.1]).unwrap()), 1.0);

        let m = KernelSpec::matern32(0.1, 0.0).unwrap();
        let v = scalar(m.eval_entry(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap());
        let t = 3f64.sqrt() * 0.1;
        assert!((v - (1.0 + t) * (-t).exp()).abs() < 1e-15);
        assert!((v - 0.986_624_564_889_706).abs() < 1e-12);

        let q = KernelSpec::imq(1.0, 0.0).unwrap();
        let v = scalar(q.eval_entry(&[0.0, 0.0], &[3.0, 4.0]).unwrap());
        assert!((v - 1.0 / 26f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rpy_self_term_and_branch_continuity() {
        let a = 0.29;
        let k = KernelSpec::rpy(a).unwrap();
        match k.eval_entry(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() {
            KernelValue::Tensor(t) => {
                for i in 0..3 {
                    for j in 0..3 {
                        let e = if i == j { 1.0 / a } else { 0.0 };
                        assert_eq!(t[i][j], e);
                    }
                }
            }
            _ => panic!(),
        }
        // Both branch formulas evaluated at |r| = 2a.
        let dir = [0.6, -0.8, 0.0];
        let d = 2.0 * a;
        let r = [dir[0] * d, dir[1] * d, dir[2] * d];
        let far = {
            let c1 = 3.0 / (4.0 * d);
            let c2 = 3.0 * a * a / (2.0 * d * d * d);
            (c1 + c2 / 3.0, c1 - c2)
        };
        let near = ((1.0 - 9.0 * d / (32.0 * a)) / a, 3.0 * d / (32.0 * a * a));
        assert!(((far.0 - near.0) / near.0).abs() < 1e-12);
        assert!(((far.1 - near.1) / near.1).abs() < 1e-12);
        let t = k.tensor(r);
        let t2 = k.tensor([r[0] * (1.0 - 1e-14), r[1] * (1.0 - 1e-14), 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((t[i][j] - t2[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rpy_requires_3d() {
        let k = KernelSpec::rpy(0.3).unwrap();
        assert!(k.eval_entry(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(KernelSpec::gaussian(0.0, 0.0).is_err());
        assert!(KernelSpec::imq(1.0, -1.0).is_err());
        assert!(KernelSpec::matern32(f64::NAN, 0.0).is_err());
        assert!("laplace".parse::<KernelFamily>().is_err());
        assert_eq!("IMQ".parse::<KernelFamily>().unwrap(), KernelFamily::Imq);
    }

    #[test]
    fn single_point_block_includes_shift() {
        let p = generate_ball_points(3, 1).unwrap();
        let k = KernelSpec::matern32(0.5, 0.01).unwrap();
        let b = k.eval_block(&p, 1..2, 1..2);
        assert_eq!(b.shape(), (1, 1));
        assert!((b[(0, 0)] - 1.01).abs() < 1e-15);

        let pr = p.clone().with_block_size(3).unwrap();
        let kr = KernelSpec::new(KernelFamily::Rpy, 0.42, 0.5).unwrap();
        let b = kr.eval_block(&pr, 2..3, 2..3);
        assert_eq!(b.shape(), (3, 3));
        for i in 0..3 {
            assert!((b[(i, i)] - (1.0 / 0.42 + 0.5)).abs() < 1e-14);
        }
    }

    #[test]
    fn blocks_are_transpose_symmetric() {
        let p = generate_ball_points(40, 8).unwrap().with_block_size(3).unwrap();
        for k in [
            KernelSpec::matern32(0.1, 0.01).unwrap(),
            KernelSpec::gaussian(0.3, 0.01).unwrap(),
            KernelSpec::imq(1.0, 0.01).unwrap(),
            KernelSpec::rpy(0.29).unwrap(),
        ] {
            let a = k.eval_block(&p, 3..17, 10..30);
            let b = k.eval_block(&p, 10..30, 3..17);
            assert_eq!(a, b.transpose());
        }
    }

    #[test]
    fn shifted_gaussian_matrix_is_spd() {
        let p = generate_ball_points(50, 4).unwrap();
        let k = KernelSpec::gaussian(0.01, 1e-2).unwrap();
        let a = k.eval_block(&p, 0..50, 0..50);
        let eig = SymmetricEigen::new(a.clone()).eigenvalues;
        assert!(eig.min() > 0.0);
        // Shift moves the spectrum by exactly σ.
        let k0 = KernelSpec::gaussian(0.01, 0.0).unwrap();
        let eig0 = SymmetricEigen::new(k0.eval_block(&p, 0..50, 0..50)).eigenvalues;
        assert!((eig.min() - (eig0.min() + 1e-2)).abs() < 1e-10);
    }
}
