//! Sweep execution, error curves and scaling tables.

use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use spdhss::geometry::{generate_ball_points, generate_sphere_points};
use spdhss::h2::{H2Matrix, H2Options};
use spdhss::linalg::gaussian_matrix;
use spdhss::solvers::{
    build_block_jacobi, build_fsai, pcg, spdhss_preconditioner, uniform_rhs, Identity, Preconditioner, SolveReport,
};
use spdhss::spdhss::{construct_accelerated, AcceleratedOptions};
use spdhss::ulv::ulv_factorize;
use spdhss::{KernelFamily, KernelSpec, PartitionTree, PointSet, SpdHss};

use crate::config::{ExperimentConfig, PointKind, PrecondSpec};
use crate::BenchError;

pub const CSV_HEADER: &str = "kernel,param,N,precond,rank_or_k,iters,converged,seconds,final_rel_res,config_hash,status,\
h2_seconds,precond_seconds,h2_bytes,precond_bytes,matvec_err,threads";

/// Columns of [`CSV_HEADER`] holding wall times.
pub const TIMING_COLUMNS: &[&str] = &["seconds", "h2_seconds", "precond_seconds"];

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Converged,
    /// Hit the iteration cap.
    MaxIterations,
    /// PCG stopped on a non-positive curvature.
    Breakdown(String),
    /// Something raised an error; counts as a hard failure.
    Failed(String),
}

impl CellStatus {
    pub fn is_hard_failure(&self) -> bool {
        matches!(self, CellStatus::Failed(_))
    }

    fn csv(&self) -> String {
        let clean = |s: &str| s.replace([',', '\n'], ";");
        match self {
            CellStatus::Converged => "ok".into(),
            CellStatus::MaxIterations => "maxit".into(),
            CellStatus::Breakdown(m) => format!("breakdown: {}", clean(m)),
            CellStatus::Failed(m) => format!("failed: {}", clean(m)),
        }
    }
}

/// One cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub kernel: KernelFamily,
    pub param: f64,
    pub n: usize,
    pub precond: PrecondSpec,
    pub report: Option<SolveReport>,
    pub status: CellStatus,
    pub h2_seconds: f64,
    pub precond_seconds: f64,
    pub h2_bytes: usize,
    pub precond_bytes: usize,
    /// Mean relative error of SPD HSS products against H2 products.
    pub matvec_error: Option<f64>,
    pub config_hash: String,
}

impl RunRecord {
    pub fn csv_row(&self) -> String {
        let (iters, conv, secs, res) = match &self.report {
            Some(r) => (r.iterations.to_string(), r.converged.to_string(), r.wall_time, r.final_rel_res().to_string()),
            None => (String::new(), "false".into(), 0.0, String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{:.6},{},{},{},{:.6},{:.6},{},{},{},1",
            self.kernel,
            self.param,
            self.n,
            self.precond.name(),
            self.precond.size(),
            iters,
            conv,
            secs,
            res,
            self.config_hash,
            self.status.csv(),
            self.h2_seconds,
            self.precond_seconds,
            self.h2_bytes,
            self.precond_bytes,
            self.matvec_error.map(|e| format!("{e:e}")).unwrap_or_default(),
        )
    }

    /// Table entry: iteration count, `-` when the cap was hit, `/` on failure.
    pub fn table_entry(&self) -> String {
        match (&self.status, &self.report) {
            (CellStatus::Converged, Some(r)) => r.iterations.to_string(),
            (CellStatus::MaxIterations, _) => "-".into(),
            _ => "/".into(),
        }
    }
}

/// Points carrying `block_size` unknowns each.
pub fn make_points(kind: PointKind, n: usize, seed: u64, block_size: usize) -> spdhss::Result<PointSet> {
    let p = match kind {
        PointKind::Ball => generate_ball_points(n, seed)?,
        PointKind::Sphere => generate_sphere_points(n, seed)?,
    };
    p.with_block_size(block_size)
}

/// Points, tree and H2 matrix of one `(param, N)` system.
pub struct System {
    pub kernel: KernelSpec,
    pub points: PointSet,
    pub tree: PartitionTree,
    pub h2: H2Matrix,
    pub h2_seconds: f64,
}

impl System {
    pub fn build(cfg: &ExperimentConfig, param: f64, n: usize) -> spdhss::Result<Self> {
        let kernel = KernelSpec::new(cfg.kernel, param, cfg.shift_value())?;
        let points = make_points(cfg.points, n, cfg.seed, kernel.block_size())?;
        let start = Instant::now();
        let tree = PartitionTree::build(&points, cfg.leaf_cap)?;
        let h2 = H2Matrix::build(&kernel, &points, &tree, &H2Options::with_tol(cfg.h2_tol))?;
        Ok(System { kernel, points, tree, h2, h2_seconds: start.elapsed().as_secs_f64() })
    }

    /// Accelerated SPD HSS of rank `r` using the config's oversampling and seed.
    pub fn spdhss(&self, cfg: &ExperimentConfig, r: usize) -> spdhss::Result<SpdHss> {
        let opts = AcceleratedOptions { oversampling: cfg.oversampling, ..AcceleratedOptions::new(r).with_seed(cfg.seed) };
        Ok(construct_accelerated(&self.h2, &opts)?.0)
    }
}

/// Relative 2-norm errors of `h·x` against `h2·x` over Gaussian probes.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCurve {
    pub errors: Vec<f64>,
    pub mean: f64,
}

impl ErrorCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("probe,rel_error\n");
        for (i, e) in self.errors.iter().enumerate() {
            let _ = writeln!(s, "{i},{e:e}");
        }
        let _ = writeln!(s, "mean,{:e}", self.mean);
        s
    }
}

pub fn emit_error_curve(h2: &H2Matrix, h: &SpdHss, probes: usize, seed: u64) -> Result<ErrorCurve, BenchError> {
    if h2.dim() != h.dim() {
        return Err(BenchError::Config(format!("dimension mismatch: {} vs {}", h2.dim(), h.dim())));
    }
    if probes == 0 {
        return Err(BenchError::Config("need at least one probe".into()));
    }
    let x = gaussian_matrix(h.dim(), probes, seed);
    let exact = h2.matmat(&x)?;
    let approx = h.matmat(&x)?;
    let errors: Vec<f64> =
        (0..probes).map(|j| (approx.column(j) - exact.column(j)).norm() / exact.column(j).norm()).collect();
    let mean = errors.iter().sum::<f64>() / probes as f64;
    Ok(ErrorCurve { errors, mean })
}

fn build_precond(
    sys: &System,
    cfg: &ExperimentConfig,
    spec: PrecondSpec,
) -> spdhss::Result<(Box<dyn Preconditioner>, usize, Option<f64>)> {
    let n = sys.h2.dim();
    Ok(match spec {
        PrecondSpec::None => (Box::new(Identity(n)), 0, None),
        PrecondSpec::BlockJacobi => {
            let bj = build_block_jacobi(&sys.kernel, &sys.points, &sys.tree)?;
            let bytes = sys.tree.leaves().iter().map(|&l| (sys.tree.node(l).len() * sys.kernel.block_size()).pow(2) * 8).sum();
            (Box::new(bj), bytes, None)
        }
        PrecondSpec::Fsai(k) => {
            let f = build_fsai(&sys.kernel, &sys.tree.permute_points(&sys.points), k)?;
            let bytes = f.nnz() * 16;
            (Box::new(f), bytes, None)
        }
        PrecondSpec::SpdHss(r) => {
            let h = sys.spdhss(cfg, r)?;
            let f = ulv_factorize(&h)?;
            let err = emit_error_curve(&sys.h2, &h, cfg.error_probes, cfg.seed ^ 0x5eed)
                .map(|c| c.mean)
                .map_err(|e| spdhss::Error::InvalidArgument(e.to_string()))?;
            let bytes = (h.storage_entries() + f.storage_entries()) * 8;
            (Box::new(spdhss_preconditioner(&h, f)?), bytes, Some(err))
        }
    })
}

fn run_cell(sys: &System, cfg: &ExperimentConfig, spec: PrecondSpec, b: &DVector<f64>, hash: &str) -> RunRecord {
    let mut rec = RunRecord {
        kernel: cfg.kernel,
        param: sys.kernel.param(),
        n: sys.points.len(),
        precond: spec,
        report: None,
        status: CellStatus::Converged,
        h2_seconds: sys.h2_seconds,
        precond_seconds: 0.0,
        h2_bytes: sys.h2.storage_entries() * 8,
        precond_bytes: 0,
        matvec_error: None,
        config_hash: hash.to_string(),
    };
    let start = Instant::now();
    let built = build_precond(sys, cfg, spec);
    rec.precond_seconds = start.elapsed().as_secs_f64();
    let (m, bytes, err) = match built {
        Ok(x) => x,
        Err(e) => {
            rec.status = CellStatus::Failed(e.to_string());
            return rec;
        }
    };
    rec.precond_bytes = bytes;
    rec.matvec_error = err;
    match pcg(&sys.h2, m.as_ref(), b, cfg.pcg_tol, cfg.maxit) {
        Ok((_, report)) => {
            rec.status = if report.converged {
                CellStatus::Converged
            } else if let Some(why) = &report.breakdown {
                CellStatus::Breakdown(why.clone())
            } else {
                CellStatus::MaxIterations
            };
            rec.report = Some(report);
        }
        Err(e) => rec.status = CellStatus::Failed(e.to_string()),
    }
    rec
}

/// Records of a sweep plus the rendered outputs.
#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub records: Vec<RunRecord>,
    pub csv: String,
    pub table: String,
}

impl SweepOutput {
    pub fn any_hard_failure(&self) -> bool {
        self.records.iter().any(|r| r.status.is_hard_failure())
    }
}

/// Runs every `(param, N, preconditioner)` cell and writes `results.csv` and
/// `table.txt` to the output directory.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput, BenchError> {
    cfg.validate()?;
    prepare_output(cfg)?;
    let out = run_sweep_in_memory(cfg);
    fs::write(cfg.output.join("results.csv"), &out.csv)?;
    fs::write(cfg.output.join("table.txt"), &out.table)?;
    Ok(out)
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<(), BenchError> {
    fs::create_dir_all(&cfg.output)?;
    let probe = cfg.output.join(".write-test");
    fs::write(&probe, b"")?;
    fs::remove_file(probe)?;
    Ok(())
}

/// [`run_sweep`] without touching the file system.
pub fn run_sweep_in_memory(cfg: &ExperimentConfig) -> SweepOutput {
    let hash = cfg.hash();
    let specs = cfg.precond_specs();
    let mut records = Vec::new();
    for &n in &cfg.sizes {
        for &param in &cfg.params {
            match System::build(cfg, param, n) {
                Ok(sys) => {
                    let b = uniform_rhs(sys.h2.dim(), cfg.seed);
                    for &spec in &specs {
                        records.push(run_cell(&sys, cfg, spec, &b, &hash));
                    }
                }
                Err(e) => {
                    for &spec in &specs {
                        records.push(RunRecord {
                            kernel: cfg.kernel,
                            param,
                            n,
                            precond: spec,
                            report: None,
                            status: CellStatus::Failed(e.to_string()),
                            h2_seconds: 0.0,
                            precond_seconds: 0.0,
                            h2_bytes: 0,
                            precond_bytes: 0,
                            matvec_error: None,
                            config_hash: hash.clone(),
                        });
                    }
                }
            }
        }
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let table = render_table(cfg, &records);
    SweepOutput { records, csv, table }
}

/// Iteration counts with preconditioners as rows and kernel parameters as
/// columns, one block per problem size.
pub fn render_table(cfg: &ExperimentConfig, records: &[RunRecord]) -> String {
    let specs = cfg.precond_specs();
    let mut out = String::new();
    for &n in &cfg.sizes {
        let _ = writeln!(out, "{} kernel, {} points, N = {n}", cfg.kernel, cfg.points);
        let head: Vec<String> = cfg.params.iter().map(|p| format!("l={p}")).collect();
        let w0 = specs.iter().map(|s| s.row_label().len()).max().unwrap_or(4).max(4);
        let wc = head.iter().map(|h| h.len()).max().unwrap_or(4).max(6);
        let _ = write!(out, "{:w0$}", "");
        for h in &head {
            let _ = write!(out, "  {h:>wc$}");
        }
        out.push('\n');
        for spec in &specs {
            let _ = write!(out, "{:w0$}", spec.row_label());
            for &p in &cfg.params {
                let e = records
                    .iter()
                    .find(|r| r.n == n && r.param == p && r.precond == *spec)
                    .map(|r| r.table_entry())
                    .unwrap_or_default();
                let _ = write!(out, "  {e:>wc$}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// One size of a scaling study.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub levels: usize,
    pub h2_build_seconds: f64,
    pub h2_matvec_seconds: f64,
    pub h2_matvec_flops: u64,
    pub h2_bytes: usize,
    /// Accelerated SPD HSS construction.
    pub construct_seconds: f64,
    pub ulv_seconds: f64,
    pub solve_seconds: f64,
    pub solve_flops: u64,
    pub hss_bytes: usize,
    /// Storage of the ULV factors used for solves.
    pub ulv_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingTable {
    pub rank: usize,
    pub rows: Vec<ScalingRow>,
}

fn median3(mut f: impl FnMut() -> Result<(), BenchError>) -> Result<f64, BenchError> {
    let mut t = [0.0; 3];
    for slot in &mut t {
        let s = Instant::now();
        f()?;
        *slot = s.elapsed().as_secs_f64();
    }
    t.sort_by(f64::total_cmp);
    Ok(t[1])
}

impl ScalingTable {
    /// Adjacent-size ratios of one column.
    pub fn ratios(&self, col: impl Fn(&ScalingRow) -> f64) -> Vec<f64> {
        self.rows.windows(2).map(|w| col(&w[1]) / col(&w[0])).collect()
    }

    pub fn to_csv(&self) -> String {
        let cols: [(&str, fn(&ScalingRow) -> f64); 10] = [
            ("h2_build_seconds", |r| r.h2_build_seconds),
            ("h2_matvec_seconds", |r| r.h2_matvec_seconds),
            ("h2_matvec_flops", |r| r.h2_matvec_flops as f64),
            ("h2_bytes", |r| r.h2_bytes as f64),
            ("construct_seconds", |r| r.construct_seconds),
            ("ulv_seconds", |r| r.ulv_seconds),
            ("solve_seconds", |r| r.solve_seconds),
            ("solve_flops", |r| r.solve_flops as f64),
            ("hss_bytes", |r| r.hss_bytes as f64),
            ("ulv_bytes", |r| r.ulv_bytes as f64),
        ];
        let mut s = String::from("N,levels,rank");
        for (name, _) in &cols {
            let _ = write!(s, ",{name}");
        }
        for (name, _) in &cols {
            let _ = write!(s, ",{name}_ratio");
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(s, "{},{},{}", row.n, row.levels, self.rank);
            for (_, f) in &cols {
                let _ = write!(s, ",{}", f(row));
            }
            for (_, f) in &cols {
                if i == 0 {
                    s.push(',');
                } else {
                    let _ = write!(s, ",{:.4}", f(row) / f(&self.rows[i - 1]));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Timing and storage per problem size, using the first kernel parameter and rank of `cfg`.
pub fn emit_scaling_table(cfg: &ExperimentConfig) -> Result<ScalingTable, BenchError> {
    cfg.validate()?;
    let sizes = &cfg.sizes;
    if sizes.len() < 4 || sizes.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(BenchError::Config("scaling needs at least four sizes, each double the previous".into()));
    }
    let param = cfg.params[0];
    let rank = cfg.ranks[0];
    let mut rows = Vec::new();
    for &n in sizes {
        let sys = System::build(cfg, param, n)?;
        let dim = sys.h2.dim();
        let x = DMatrix::from_column_slice(dim, 1, uniform_rhs(dim, cfg.seed).as_slice());
        sys.h2.reset_flops();
        sys.h2.matmat(&x)?;
        let h2_matvec_flops = sys.h2.flops();
        let h2_matvec_seconds = median3(|| sys.h2.matmat(&x).map(|_| ()).map_err(Into::into))?;
        let start = Instant::now();
        let h = sys.spdhss(cfg, rank)?;
        let construct_seconds = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let f = ulv_factorize(&h)?;
        let ulv_seconds = start.elapsed().as_secs_f64();
        let solve_seconds = median3(|| f.solve_matrix(&x).map(|_| ()).map_err(Into::into))?;
        rows.push(ScalingRow {
            n,
            levels: sys.tree.num_levels(),
            h2_build_seconds: sys.h2_seconds,
            h2_matvec_seconds,
            h2_matvec_flops,
            h2_bytes: sys.h2.storage_entries() * 8,
            construct_seconds,
            ulv_seconds,
            solve_seconds,
            solve_flops: f.flops_per_solve(),
            hss_bytes: h.storage_entries() * 8,
            ulv_bytes: f.storage_entries() * 8,
        });
    }
    Ok(ScalingTable { rank, rows })
}

/// Drops the [`TIMING_COLUMNS`] from a results CSV.
pub fn strip_timing(csv: &str) -> String {
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    let keep: Vec<bool> = header.iter().map(|h| !TIMING_COLUMNS.contains(h)).collect();
    csv.lines()
        .map(|line| {
            let cells: Vec<&str> = line.split(',').zip(&keep).filter(|(_, &k)| k).map(|(c, _)| c).collect();
            cells.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &[&str]) -> ExperimentConfig {
        let text = "kernel = matern32\nparams = 0.1\npoints = ball\nn = 2000\nseed = 7\nprecond = spdhss\nranks = 50\n";
        let o: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::parse(text, &o).unwrap()
    }

    #[test]
    fn one_cell_converges() {
        let out = run_sweep_in_memory(&cfg(&[]));
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert_eq!(r.status, CellStatus::Converged, "{:?}", r.status);
        assert!(r.matvec_error.unwrap() < 0.1);
        assert!(out.csv.starts_with("kernel,param,N,precond,rank_or_k,iters,converged"));
        assert!(out.csv.lines().nth(1).unwrap().contains(",true,"));
        assert!(r.h2_seconds >= 0.0 && r.precond_seconds >= 0.0 && r.precond_bytes > 0);
    }

    #[test]
    fn sweeps_are_deterministic_and_order_independent() {
        let base = ["n = 600", "params = 0.1,1", "precond = none,bj,fsai,spdhss", "ranks = 10", "fsai_k = 20", "leaf_cap = 60"];
        let a = run_sweep_in_memory(&cfg(&base));
        let b = run_sweep_in_memory(&cfg(&base));
        assert_eq!(strip_timing(&a.csv), strip_timing(&b.csv));
        assert_eq!(a.table, b.table);

        let mut shuffled = base;
        shuffled[1] = "params = 1,0.1";
        shuffled[2] = "precond = spdhss,fsai,none,bj";
        let c = run_sweep_in_memory(&cfg(&shuffled));
        let mut rows_a: Vec<String> = strip_timing(&a.csv).lines().skip(1).map(str::to_string).collect();
        let mut rows_c: Vec<String> = strip_timing(&c.csv).lines().skip(1).map(str::to_string).collect();
        rows_a.sort();
        rows_c.sort();
        assert_eq!(rows_a, rows_c);
    }

    #[test]
    fn rpy_cells_run() {
        let c = cfg(&["kernel = rpy", "params = 0.3", "n = 300", "leaf_cap = 60", "precond = bj,fsai,spdhss", "ranks = 20", "fsai_k = 30"]);
        let out = run_sweep_in_memory(&c);
        for r in &out.records {
            assert_eq!(r.status, CellStatus::Converged, "{:?}", r);
        }
    }

    #[test]
    fn table_marks_unconverged_cells() {
        let out = run_sweep_in_memory(&cfg(&["n = 300", "leaf_cap = 60", "precond = none", "maxit = 2", "params = 0.1"]));
        assert_eq!(out.records[0].status, CellStatus::MaxIterations);
        let row = out.table.lines().find(|l| l.starts_with("none")).unwrap();
        assert!(row.trim_end().ends_with('-'), "{row}");
    }

    #[test]
    fn unwritable_output_is_a_startup_error() {
        let file = std::env::temp_dir().join(format!("spdhss-bench-not-a-dir-{}", std::process::id()));
        fs::write(&file, b"x").unwrap();
        let c = cfg(&[&format!("output = {}", file.join("sub").display())]);
        assert!(matches!(run_sweep(&c), Err(BenchError::Io(_))));
        fs::remove_file(file).unwrap();
    }

    #[test]
    fn error_curve_is_zero_for_exact_rank() {
        let c = cfg(&["n = 300", "leaf_cap = 60", "h2_tol = 1e-12"]);
        let sys = System::build(&c, 0.5, 300).unwrap();
        let h = sys.spdhss(&c, 10_000).unwrap();
        let curve = emit_error_curve(&sys.h2, &h, 10, 1).unwrap();
        assert_eq!(curve.errors.len(), 10);
        assert!(curve.mean <= 1e-9, "{}", curve.mean);
        let csv = curve.to_csv();
        assert_eq!(csv.lines().count(), 12);
        assert!(emit_error_curve(&sys.h2, &h, 0, 1).is_err());
    }

    #[test]
    fn ratios_divide_adjacent_rows() {
        let row = |n: usize, t: f64| ScalingRow {
            n,
            levels: 2,
            h2_build_seconds: t,
            h2_matvec_seconds: t,
            h2_matvec_flops: n as u64,
            h2_bytes: n,
            construct_seconds: t,
            ulv_seconds: t,
            solve_seconds: t,
            solve_flops: 1,
            hss_bytes: 3 * n,
            ulv_bytes: n,
        };
        let t = ScalingTable { rank: 5, rows: vec![row(10, 1.0), row(20, 3.0), row(40, 4.5)] };
        assert_eq!(t.ratios(|r| r.construct_seconds), vec![3.0, 1.5]);
        assert_eq!(t.ratios(|r| r.hss_bytes as f64), vec![2.0, 2.0]);
        let csv = t.to_csv();
        assert!(csv.lines().nth(2).unwrap().contains(",3.0000,"));
        assert!(emit_scaling_table(&cfg(&["n = 100,200,400"])).is_err());
    }
}
