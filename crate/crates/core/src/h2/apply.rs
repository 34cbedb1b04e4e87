use nalgebra::DMatrix;

use super::H2Matrix;

fn gemm_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

impl H2Matrix {
    /// Lowest level whose diagonal blocks contain block `(i, j)`.
    fn merge_level(&self, mut i: usize, mut j: usize) -> usize {
        let tree = &self.tree;
        while i != j {
            i = tree.node(i).parent.expect("same-level nodes share the root");
            j = tree.node(j).parent.expect("same-level nodes share the root");
        }
        tree.node(i).level
    }

    pub(crate) fn apply(&self, x: &DMatrix<f64>, exclude: Option<usize>) -> DMatrix<f64> {
        let mut out = match exclude {
            None => self.apply_buckets(x, 1, |_, _| Some(0)),
            Some(k) => self.apply_buckets(x, 1, |i, j| (self.merge_level(i, j) > k).then_some(0)),
        };
        out.pop().expect("one bucket")
    }

    /// `(A − blockdiag_k(A))·X` for every `k` in `levels`, in one traversal.
    pub(crate) fn apply_minus_leveldiags(&self, x: &DMatrix<f64>, levels: &[usize]) -> Vec<DMatrix<f64>> {
        let l = self.tree.num_levels();
        // Bucket b holds the blocks first absorbed by the level-b diagonal.
        let buckets = self.apply_buckets(x, l + 1, |i, j| Some(self.merge_level(i, j)));
        levels
            .iter()
            .map(|&k| {
                let mut y = DMatrix::zeros(x.nrows(), x.ncols());
                for b in &buckets[k + 1..] {
                    y += b;
                }
                y
            })
            .collect()
    }

    /// Splits `A·X` by block: the product of block `(i, j)` lands in
    /// `bucket(i, j)`, or nowhere when that is `None`.
    fn apply_buckets(
        &self,
        x: &DMatrix<f64>,
        nb: usize,
        bucket: impl Fn(usize, usize) -> Option<usize>,
    ) -> Vec<DMatrix<f64>> {
        let tree = &self.tree;
        let bs = self.block_size();
        let c = x.ncols();
        let l = tree.num_levels();
        let nn = tree.num_nodes();
        let mut y: Vec<DMatrix<f64>> = (0..nb).map(|_| DMatrix::zeros(x.nrows(), c)).collect();
        let mut flops = 0u64;

        if !self.far_pairs.is_empty() {
            // Upward pass: x̂_i = U_iᵀ·x_i.
            let mut xhat: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, c); nn];
            for k in 1..l {
                for &i in tree.level(k) {
                    let node = tree.node(i);
                    let b = &self.bases[i];
                    if b.ncols() == 0 {
                        xhat[i] = DMatrix::zeros(0, c);
                        continue;
                    }
                    if node.is_leaf() {
                        let r = tree.matrix_range(i, bs);
                        xhat[i] = b.tr_mul(&x.rows(r.start, r.len()));
                    } else {
                        let stacked = stack(node.children.iter().map(|&ch| &xhat[ch]), c);
                        xhat[i] = b.tr_mul(&stacked);
                    }
                    flops += gemm_flops(b.nrows(), b.ncols(), c);
                }
            }

            // Coupling; bucket b occupies columns b·c..(b+1)·c of ŷ.
            let mut yhat: Vec<DMatrix<f64>> = (0..nn).map(|i| DMatrix::zeros(self.rank(i), nb * c)).collect();
            match &self.far_blocks {
                Some(blocks) => {
                    for (p, &(i, j)) in self.far_pairs.iter().enumerate() {
                        let Some(bk) = bucket(i, j) else { continue };
                        let b = &blocks[p];
                        yhat[i].columns_mut(bk * c, c).gemm(1.0, b, &xhat[j], 1.0);
                        yhat[j].columns_mut(bk * c, c).gemm_tr(1.0, b, &xhat[i], 1.0);
                        flops += 2 * gemm_flops(b.nrows(), b.ncols(), c);
                    }
                }
                None => {
                    let z: Vec<DMatrix<f64>> = (0..nn)
                        .map(|i| if self.rank(i) == 0 { DMatrix::zeros(0, c) } else { self.tfac[i].tr_mul(&xhat[i]) })
                        .collect();
                    let mut w: Vec<DMatrix<f64>> = (0..nn).map(|i| DMatrix::zeros(self.rank(i), nb * c)).collect();
                    for &(i, j) in &self.far_pairs {
                        if self.rank(i) == 0 || self.rank(j) == 0 {
                            continue;
                        }
                        let Some(bk) = bucket(i, j) else { continue };
                        let kij = self.kernel.eval_matrix_entries(&self.points, &self.skel[i], &self.skel[j]);
                        w[i].columns_mut(bk * c, c).gemm(1.0, &kij, &z[j], 1.0);
                        w[j].columns_mut(bk * c, c).gemm_tr(1.0, &kij, &z[i], 1.0);
                        flops += 2 * gemm_flops(kij.nrows(), kij.ncols(), c);
                    }
                    for i in 0..nn {
                        let r = self.rank(i);
                        if r > 0 {
                            yhat[i] = &self.tfac[i] * &w[i];
                            flops += 2 * gemm_flops(r, r, nb * c);
                        }
                    }
                }
            }

            // Downward pass.
            for k in (1..l).rev() {
                for &i in tree.level(k) {
                    let node = tree.node(i);
                    let b = &self.bases[i];
                    if b.ncols() == 0 {
                        continue;
                    }
                    let down = b * &yhat[i];
                    flops += gemm_flops(b.nrows(), b.ncols(), nb * c);
                    if node.is_leaf() {
                        let r = tree.matrix_range(i, bs);
                        for (bk, yb) in y.iter_mut().enumerate() {
                            let mut dst = yb.rows_mut(r.start, r.len());
                            dst += down.columns(bk * c, c);
                        }
                    } else {
                        let mut off = 0;
                        for &ch in &node.children {
                            let kc = self.rank(ch);
                            yhat[ch] += down.rows(off, kc);
                            off += kc;
                        }
                    }
                }
            }
        }

        // Near field.
        for (p, &(i, j)) in self.near_pairs.iter().enumerate() {
            let Some(bk) = bucket(i, j) else { continue };
            let owned;
            let a = match &self.near_blocks {
                Some(blocks) => &blocks[p],
                None => {
                    owned = self.eval_near(i, j);
                    &owned
                }
            };
            let ri = tree.matrix_range(i, bs);
            let rj = tree.matrix_range(j, bs);
            let yb = &mut y[bk];
            yb.rows_mut(ri.start, ri.len()).gemm(1.0, a, &x.rows(rj.start, rj.len()), 1.0);
            flops += gemm_flops(a.nrows(), a.ncols(), c);
            if i != j {
                yb.rows_mut(rj.start, rj.len()).gemm_tr(1.0, a, &x.rows(ri.start, ri.len()), 1.0);
                flops += gemm_flops(a.nrows(), a.ncols(), c);
            }
        }
        self.add_flops(flops);
        y
    }
}

fn stack<'a>(blocks: impl Iterator<Item = &'a DMatrix<f64>> + Clone, c: usize) -> DMatrix<f64> {
    let rows: usize = blocks.clone().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, c);
    let mut off = 0;
    for b in blocks {
        out.rows_mut(off, b.nrows()).copy_from(b);
        off += b.nrows();
    }
    out
}
