use nalgebra::DMatrix;

use super::general::{check_inputs, injected, leaf_cholesky, sibling_subset, sqrt_at, NodeBases};
use super::{assemble_children, finish, stack_children, PairBlocks, SpdHss};
use crate::error::{Error, Result};
use crate::h2::H2Matrix;
use crate::linalg::{block_diag, gaussian_matrix, pivoted_qr_basis, solve_lower, solve_lower_transpose, SqrtMode, SqrtPair};

#[derive(Clone, Debug)]
pub struct AcceleratedOptions {
    pub rank: usize,
    /// Oversampling of the random sketch.
    pub oversampling: usize,
    pub seed: u64,
    pub sqrt_mode: SqrtMode,
    /// Skip sketching and use these bases.
    pub bases: Option<NodeBases>,
}

impl AcceleratedOptions {
    pub fn new(rank: usize) -> Self {
        AcceleratedOptions { rank, oversampling: 10, seed: 0, sqrt_mode: SqrtMode::Strict, bases: None }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Counters collected during an accelerated construction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AcceleratedStats {
    /// One `(level, columns)` entry per level sketch `(A − blockdiag_k(A))·Ω`.
    pub sketch_calls: Vec<(usize, usize)>,
    /// Coefficient blocks formed from near-field data.
    pub near_blocks: usize,
    /// Coefficient blocks formed from H2 couplings.
    pub far_blocks: usize,
}

/// State of a level-by-level accelerated construction.
///
/// Levels must be processed in order: `process_leaf_level`, then
/// `process_level(k)` for `k = 2..L-1`, then `finish`.
pub struct Workspace<'a> {
    h2: &'a H2Matrix,
    opts: AcceleratedOptions,
    bs: usize,
    done: usize,
    sketches: Vec<DMatrix<f64>>,
    chol: Vec<DMatrix<f64>>,
    leaf_diag: Vec<DMatrix<f64>>,
    v: NodeBases,
    // Leaf: V_iᵀ·S_i⁻¹.
    phi: Vec<DMatrix<f64>>,
    sqrt: Vec<Option<SqrtPair>>,
    phi_u: Vec<DMatrix<f64>>,
    basis: Vec<DMatrix<f64>>,
    blocks: Vec<PairBlocks>,
    stats: AcceleratedStats,
}

impl<'a> Workspace<'a> {
    pub fn new(h2: &'a H2Matrix, opts: AcceleratedOptions) -> Result<Self> {
        let tree = h2.tree();
        let bs = check_inputs(h2.dim(), tree, opts.rank)?;
        let nn = tree.num_nodes();
        let empty = || vec![DMatrix::zeros(0, 0); nn];
        Ok(Workspace {
            h2,
            opts,
            bs,
            done: 0,
            sketches: Vec::new(),
            chol: empty(),
            leaf_diag: empty(),
            v: empty(),
            phi: empty(),
            sqrt: vec![None; nn],
            phi_u: empty(),
            basis: empty(),
            blocks: Vec::new(),
            stats: AcceleratedStats::default(),
        })
    }

    pub fn stats(&self) -> &AcceleratedStats {
        &self.stats
    }

    /// Levels completed so far.
    pub fn levels_done(&self) -> usize {
        self.done
    }

    /// Bases chosen so far (`V_i` at leaves, `V̄_i` above).
    pub fn bases(&self) -> &NodeBases {
        &self.v
    }

    fn sketch(&mut self, k: usize) -> Result<()> {
        if self.opts.bases.is_some() {
            return Ok(());
        }
        if self.sketches.is_empty() {
            let width = self.opts.rank + self.opts.oversampling;
            let omega = gaussian_matrix(self.h2.dim(), width, self.opts.seed);
            let l = self.h2.tree().num_levels();
            let levels: Vec<usize> = (1..l).collect();
            self.sketches = self.h2.matmat_minus_leveldiags(&levels, &omega)?;
            self.stats.sketch_calls.extend(levels.iter().map(|&lvl| (lvl, width)));
        }
        debug_assert!(k >= 1 && k <= self.sketches.len());
        Ok(())
    }

    fn ranks(&self) -> Vec<usize> {
        self.basis.iter().map(|b| b.ncols()).collect()
    }

    pub fn process_leaf_level(&mut self) -> Result<()> {
        if self.done != 0 {
            return Err(Error::contract("leaf level already processed"));
        }
        self.sketch(1)?;
        let h2 = self.h2;
        let tree = h2.tree();
        let r = self.opts.rank;
        for &i in tree.leaves() {
            let ri = tree.matrix_range(i, self.bs);
            let a = h2.near_block(i, i)?.into_owned();
            let s = leaf_cholesky(&a, i)?;
            let vi = match injected(&self.opts.bases, i, ri.len())? {
                Some(vi) => vi,
                None => {
                    let y = self.sketches[0].rows(ri.start, ri.len()).into_owned();
                    pivoted_qr_basis(&solve_lower(&s, &y), r).v
                }
            };
            let phi = solve_lower_transpose(&s, &vi).transpose();
            self.phi_u[i] = &phi * h2.leaf_basis(i);
            self.basis[i] = &s * &vi;
            self.phi[i] = phi;
            self.v[i] = vi;
            self.chol[i] = s;
            self.leaf_diag[i] = a;
        }
        let mut blocks = PairBlocks::default();
        for &i in tree.leaves() {
            for &j in tree.near(i) {
                if i < j {
                    blocks.insert(i, j, self.compute_bij_recursive_in(&blocks, i, j)?);
                    self.stats.near_blocks += 1;
                }
            }
            for &j in tree.interaction_list(i) {
                if i < j {
                    blocks.insert(i, j, self.compute_bij_type3(i, j)?);
                    self.stats.far_blocks += 1;
                }
            }
        }
        self.blocks.push(blocks);
        self.done = 1;
        Ok(())
    }

    /// Computes `(I + 𝐁_ii)^{±1/2}` for the nodes of level `k`, which needs level `k-1` done.
    pub fn prepare_level(&mut self, k: usize) -> Result<()> {
        let tree = self.h2.tree();
        if k < 2 || k > tree.num_levels() || self.done != k - 1 {
            return Err(Error::contract(format!("level {k} cannot be prepared after {} levels", self.done)));
        }
        let ranks = self.ranks();
        for &i in tree.level(k) {
            if self.sqrt[i].is_none() {
                let bii = assemble_children(tree, &ranks, &self.blocks[k - 2], i, i)?;
                self.sqrt[i] = Some(sqrt_at(&bii, self.opts.sqrt_mode, i, k)?);
            }
        }
        Ok(())
    }

    /// Maps a sketch of the unscaled matrix to the scaled sketch of each node
    /// at level `k`, returned in the order of `tree.level(k)`.
    ///
    /// Level 1 gives `S_i⁻¹·y_i`; higher levels give `M_i·stack(T_c)` where
    /// `T` is propagated upward through the bases of the finished levels.
    pub fn apply_phi_sketch(&self, k: usize, y: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let tree = self.h2.tree();
        if y.nrows() != self.h2.dim() {
            return Err(Error::invalid("sketch has the wrong number of rows"));
        }
        if k == 0 || k > tree.num_levels() || self.done == 0 || self.done + 1 < k {
            return Err(Error::contract(format!("level {k} sketch needs the levels below it")));
        }
        let c = y.ncols();
        let rows = |i: usize| y.rows(tree.matrix_range(i, self.bs).start, tree.matrix_range(i, self.bs).len());
        if k == 1 {
            return Ok(tree.leaves().iter().map(|&i| solve_lower(&self.chol[i], &rows(i).into_owned())).collect());
        }
        let nn = tree.num_nodes();
        let mut t: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, c); nn];
        for &i in tree.leaves() {
            t[i] = &self.phi[i] * rows(i);
        }
        for lvl in 2..k {
            for &i in tree.level(lvl) {
                let node = tree.node(i);
                let m = &self.sqrt[i].as_ref().expect("finished level").inv_sqrt;
                t[i] = self.v[i].tr_mul(&(m * stack_children(&t, &node.children, c)));
            }
        }
        let mut out = Vec::new();
        for &i in tree.level(k) {
            let sq = self.sqrt[i]
                .as_ref()
                .ok_or_else(|| Error::contract(format!("node {i} has no square root yet")))?;
            out.push(&sq.inv_sqrt * stack_children(&t, &tree.node(i).children, c));
        }
        Ok(out)
    }

    pub fn process_level(&mut self, k: usize) -> Result<()> {
        let tree = self.h2.tree();
        if k < 2 || k >= tree.num_levels() {
            return Err(Error::invalid(format!("level {k} is not an interior level")));
        }
        self.prepare_level(k)?;
        self.sketch(k)?;
        let nodes = tree.level(k);
        let sketched = if self.opts.bases.is_none() { Some(self.apply_phi_sketch(k, &self.sketches[k - 1])?) } else { None };
        for (a, &i) in nodes.iter().enumerate() {
            let sq = self.sqrt[i].as_ref().expect("prepared");
            let rows = sq.sqrt.nrows();
            let vbar = match injected(&self.opts.bases, i, rows)? {
                Some(vb) => vb,
                None => pivoted_qr_basis(&sketched.as_ref().expect("sketched")[a], self.opts.rank).v,
            };
            let node = tree.node(i);
            let diag: Vec<&DMatrix<f64>> = node.children.iter().map(|&ch| &self.phi_u[ch]).collect();
            let bd = block_diag(&diag);
            self.phi_u[i] = vbar.tr_mul(&(&sq.inv_sqrt * bd * self.h2.transfer(i)));
            self.basis[i] = &sq.sqrt * &vbar;
            self.v[i] = vbar;
        }
        let mut blocks = PairBlocks::default();
        for &i in nodes {
            for &j in tree.near(i) {
                if i < j {
                    blocks.insert(i, j, self.compute_bij_recursive_in(&self.blocks[k - 2], i, j)?);
                    self.stats.near_blocks += 1;
                }
            }
            for &j in tree.interaction_list(i) {
                if i < j {
                    blocks.insert(i, j, self.compute_bij_type3(i, j)?);
                    self.stats.far_blocks += 1;
                }
            }
        }
        self.blocks.push(blocks);
        self.done = k;
        Ok(())
    }

    /// `B_ij` through the H2 coupling of a well-separated pair.
    pub fn compute_bij_type3(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        if !self.h2.is_coupled(i, j) {
            return Err(Error::contract(format!("nodes {i} and {j} have no H2 coupling")));
        }
        let b = self.h2.coupling(i, j)?;
        Ok(&self.phi_u[i] * b.as_ref() * self.phi_u[j].transpose())
    }

    /// `B_ij` from dense leaf data or from the blocks of the children.
    pub fn compute_bij_recursive(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        let tree = self.h2.tree();
        let lvl = tree.node(i).level;
        if lvl != tree.node(j).level {
            return Err(Error::invalid(format!("nodes {i} and {j} lie on different levels")));
        }
        if lvl == 1 {
            return self.compute_bij_recursive_in(&PairBlocks::default(), i, j);
        }
        let below = self
            .blocks
            .get(lvl - 2)
            .ok_or_else(|| Error::contract(format!("level {} has not been processed", lvl - 1)))?;
        self.compute_bij_recursive_in(below, i, j)
    }

    fn compute_bij_recursive_in(&self, below: &PairBlocks, i: usize, j: usize) -> Result<DMatrix<f64>> {
        let tree = self.h2.tree();
        if tree.node(i).is_leaf() && tree.node(j).is_leaf() {
            // Exact kernel data; pairs outside the near field are evaluated directly.
            let a = match self.h2.near_block(i, j) {
                Ok(a) => a.into_owned(),
                Err(_) => self.h2.eval_near(i, j),
            };
            return Ok(&self.phi[i] * a * self.phi[j].transpose());
        }
        let (si, sj) = match (&self.sqrt[i], &self.sqrt[j]) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::contract(format!("nodes {i} and {j} are not ready"))),
        };
        let bij = assemble_children(tree, &self.ranks(), below, i, j)?;
        let left = self.v[i].tr_mul(&si.inv_sqrt);
        let right = &sj.inv_sqrt * &self.v[j];
        Ok(left * bij * right)
    }

    /// Checks the root and assembles the representation.
    pub fn finish(mut self) -> Result<(SpdHss, AcceleratedStats)> {
        let tree = self.h2.tree();
        let l = tree.num_levels();
        if self.done != l - 1 {
            return Err(Error::contract(format!("only {} of {} levels processed", self.done, l - 1)));
        }
        self.prepare_level(l)?;
        let root = tree.root();
        let width = self.sqrt[root].as_ref().expect("prepared").sqrt.nrows();
        self.basis[root] = DMatrix::zeros(width, 0);
        let siblings: Vec<PairBlocks> =
            self.blocks.iter().enumerate().map(|(k, b)| sibling_subset(tree, b, k + 1)).collect();
        let h = finish(tree, self.bs, self.opts.rank, self.leaf_diag, self.basis, &siblings)?;
        Ok((h, self.stats))
    }
}

/// Builds an SPD HSS approximation of the matrix represented by `h2`.
pub fn construct_accelerated(h2: &H2Matrix, opts: &AcceleratedOptions) -> Result<(SpdHss, AcceleratedStats)> {
    let mut ws = Workspace::new(h2, opts.clone())?;
    ws.process_leaf_level()?;
    for k in 2..h2.tree().num_levels() {
        ws.process_level(k)?;
    }
    ws.finish()
}
