use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};

/// A finite set of points in 2D or 3D, stored row-major.
///
/// `block_size` is the number of matrix rows each point owns: 1 for scalar
/// kernels and 3 for tensor kernels such as RPY.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
    block_size: usize,
}

impl PointSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::invalid(format!("point dimension must be 2 or 3, got {dim}")));
        }
        if coords.is_empty() || coords.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "coordinate array of length {} is not a nonempty multiple of {dim}",
                coords.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("non-finite coordinate at point {}", pos / dim)));
        }
        Ok(PointSet { dim, coords, block_size: 1 })
    }

    /// Sets the number of matrix rows per point (1 or 3).
    pub fn with_block_size(mut self, block_size: usize) -> Result<Self> {
        if block_size != 1 && block_size != 3 {
            return Err(Error::invalid(format!("block size must be 1 or 3, got {block_size}")));
        }
        if block_size == 3 && self.dim != 3 {
            return Err(Error::invalid("3x3 tensor kernels require 3D points"));
        }
        self.block_size = block_size;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Matrix dimension implied by the point count and block size.
    pub fn matrix_dim(&self) -> usize {
        self.len() * self.block_size
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    /// Returns the points reordered so that new point `k` is old point `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> PointSet {
        let mut coords = Vec::with_capacity(self.coords.len());
        for &i in order {
            coords.extend_from_slice(self.point(i));
        }
        PointSet { dim: self.dim, coords, block_size: self.block_size }
    }

    /// Writes one point per line as `x,y[,z]` with round-trip precision.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for p in self.iter() {
            let line: Vec<String> = p.iter().map(|c| format!("{c:?}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Parses the CSV layout written by [`PointSet::write_csv`]. Blank lines are skipped.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut dim = None;
        let mut coords = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let start = coords.len();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::format(format!("line {}: cannot parse {field:?} as a number", lineno + 1))
                })?;
                coords.push(v);
            }
            let n = coords.len() - start;
            match dim {
                None => dim = Some(n),
                Some(d) if d != n => {
                    return Err(Error::format(format!(
                        "line {}: expected {d} coordinates, found {n}",
                        lineno + 1
                    )))
                }
                _ => {}
            }
        }
        let dim = dim.ok_or_else(|| Error::format("no points in input"))?;
        PointSet::new(dim, coords).map_err(|e| Error::format(e.to_string()))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        Self::read_csv(text.as_bytes())
    }
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("point count must be at least 1"));
    }
    Ok(())
}

fn unit_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-300 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

/// Radius of the ball holding `n` points at unit density.
pub fn ball_radius(n: usize) -> f64 {
    (3.0 * n as f64 / (4.0 * PI)).cbrt()
}

/// Radius of the sphere holding `n` points at unit surface density.
pub fn sphere_radius(n: usize) -> f64 {
    (n as f64 / (4.0 * PI)).sqrt()
}

/// `n` points uniformly distributed in the 3D ball of radius `(3n/(4π))^(1/3)`.
///
/// Directions come from normalized Gaussian triples and radii from `R·u^(1/3)`,
/// drawn from a ChaCha8 stream seeded with `seed`.
pub fn generate_ball_points(n: usize, seed: u64) -> Result<PointSet> {
    check_count(n)?;
    let radius = ball_radius(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
    let mut coords = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let d = unit_direction(&mut rng);
        let rho = radius * unit.sample(&mut rng).cbrt();
        coords.extend(d.iter().map(|c| c * rho));
    }
    PointSet::new(3, coords)
}

/// `n` points uniformly distributed on the sphere of radius `(n/(4π))^(1/2)`.
pub fn generate_sphere_points(n: usize, seed: u64) -> Result<PointSet> {
    check_count(n)?;
    let radius = sphere_radius(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let d = unit_direction(&mut rng);
        coords.extend(d.iter().map(|c| c * radius));
    }
    PointSet::new(3, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_ball_point_is_inside_radius() {
        let r1 = (3.0 / (4.0 * PI)).cbrt();
        assert!((r1 - 0.6204).abs() < 1e-4);
        for seed in 0..50 {
            let p = generate_ball_points(1, seed).unwrap();
            let x = p.point(0);
            let norm = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            assert!(norm <= r1);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(generate_ball_points(1000, 7).unwrap(), generate_ball_points(1000, 7).unwrap());
        assert_eq!(generate_sphere_points(500, 3).unwrap(), generate_sphere_points(500, 3).unwrap());
        assert_ne!(generate_ball_points(100, 1).unwrap(), generate_ball_points(100, 2).unwrap());
    }

    #[test]
    fn ball_radial_distribution_is_uniform() {
        // For uniform points in a ball, (|x|/R)^3 is uniform on [0,1] with mean 1/2.
        let n = 10_000;
        let p = generate_ball_points(n, 11).unwrap();
        let r3 = ball_radius(n).powi(3);
        let mean: f64 = p
            .iter()
            .map(|x| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).powf(1.5) / r3)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn sphere_points_lie_on_sphere() {
        let p = generate_sphere_points(1, 0).unwrap();
        let x = p.point(0);
        let norm = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        assert!((norm - (1.0 / (4.0 * PI)).sqrt()).abs() < 1e-12);

        let n = 10_000;
        let p = generate_sphere_points(n, 5).unwrap();
        let radius = sphere_radius(n);
        for d in 0..3 {
            let mean: f64 = p.iter().map(|x| x[d]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.05 * radius, "coordinate {d} mean {mean}");
        }
        for x in p.iter() {
            let norm = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            assert!((norm - radius).abs() < 1e-9 * radius);
        }
    }

    #[test]
    fn zero_points_rejected() {
        assert!(matches!(generate_ball_points(0, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate_sphere_points(0, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let p = generate_ball_points(20, 4).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(PointSet::read_csv(&buf[..]).unwrap(), p);

        let q = PointSet::parse_csv("0,1\n2,3\n\n4.5,-1e-3\n").unwrap();
        assert_eq!(q.dim(), 2);
        assert_eq!(q.len(), 3);

        assert!(PointSet::parse_csv("").is_err());
        assert!(PointSet::parse_csv("1,2\n1,2,3\n").is_err());
        assert!(PointSet::parse_csv("1,x\n").is_err());
        assert!(PointSet::parse_csv("1\n").is_err());
        assert!(PointSet::parse_csv("1,2,nan\n").is_err());
    }
}
