//! Versioned little-endian binary formats for [`H2Matrix`] and [`SpdHss`].
//!
//! Matrices are written column-major after their row and column counts.
//! Decoders validate every structural invariant and never trust lengths
//! beyond the bytes actually present.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{BBox, Node, PartitionTree, PointSet};
use crate::h2::H2Matrix;
use crate::kernels::KernelSpec;
use crate::spdhss::SpdHss;

const H2_MAGIC: &[u8; 8] = b"SPDH2MAT";
const HSS_MAGIC: &[u8; 8] = b"SPDHSSMT";
pub const FORMAT_VERSION: u32 = 1;
const NONE: u64 = u64::MAX;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn indices(&mut self, v: &[usize]) {
        self.usize(v.len());
        for &x in v {
            self.usize(x);
        }
    }

    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for &x in m.as_slice() {
            self.f64(x);
        }
    }

    fn tree(&mut self, t: &PartitionTree) {
        self.usize(t.dim());
        self.usize(t.leaf_cap());
        self.indices(t.permutation());
        self.usize(t.num_nodes());
        for node in t.nodes() {
            self.usize(node.level);
            self.u64(node.parent.map_or(NONE, |p| p as u64));
            self.indices(&node.children);
            self.usize(node.range.start);
            self.usize(node.range.end);
            for d in 0..3 {
                self.f64(node.bbox.lo[d]);
                self.f64(node.bbox.hi[d]);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("count does not fit in memory"))
    }

    /// A count of items occupying at least `item_bytes` each.
    fn count(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.checked_mul(item_bytes).is_none_or(|b| b > self.remaining()) {
            return Err(Error::format(format!("count {n} exceeds the remaining data")));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn indices(&mut self) -> Result<Vec<usize>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let len = rows.checked_mul(cols).ok_or_else(|| Error::format("matrix size overflows"))?;
        if len.checked_mul(8).is_none_or(|b| b > self.remaining()) {
            return Err(Error::format(format!("{rows}x{cols} matrix exceeds the remaining data")));
        }
        let data: Vec<f64> = (0..len).map(|_| self.f64()).collect::<Result<_>>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("non-finite matrix entry"));
        }
        Ok(DMatrix::from_vec(rows, cols, data))
    }

    fn tree(&mut self) -> Result<PartitionTree> {
        let dim = self.usize()?;
        let leaf_cap = self.usize()?;
        let perm = self.indices()?;
        // Level, parent, child count, range and box take at least 88 bytes.
        let nn = self.count(88)?;
        let mut nodes = Vec::with_capacity(nn);
        for _ in 0..nn {
            let level = self.usize()?;
            let parent = match self.u64()? {
                NONE => None,
                p => Some(usize::try_from(p).map_err(|_| Error::format("parent index"))?),
            };
            let children = self.indices()?;
            let (start, end) = (self.usize()?, self.usize()?);
            let mut bbox = BBox { lo: [0.0; 3], hi: [0.0; 3] };
            for d in 0..3 {
                bbox.lo[d] = self.f64()?;
                bbox.hi[d] = self.f64()?;
            }
            nodes.push(Node { level, parent, children, range: start..end, bbox });
        }
        PartitionTree::from_parts(dim, nodes, perm, leaf_cap)
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::format("bad magic bytes"));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

impl H2Matrix {
    /// Serializes bases, skeletons and the tree. Stored blocks are flagged and
    /// re-evaluated from the kernel on load.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(H2_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.kernel.to_code());
        w.f64(self.kernel.param());
        w.f64(self.kernel.shift());
        w.f64(self.tol);
        w.tree(&self.tree);
        for &c in self.points.coords() {
            w.f64(c);
        }
        for i in 0..self.tree.num_nodes() {
            w.matrix(&self.bases[i]);
            w.indices(&self.skel[i]);
            w.matrix(&self.tfac[i]);
        }
        w.u8(self.near_blocks.is_some() as u8);
        w.u8(self.far_blocks.is_some() as u8);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.header(H2_MAGIC)?;
        let code = r.u8()?;
        let (param, shift) = (r.f64()?, r.f64()?);
        let kernel = KernelSpec::from_parts(code, param, shift)?;
        let tol = r.f64()?;
        if !(tol > 0.0 && tol < 1.0) {
            return Err(Error::format(format!("tolerance {tol}")));
        }
        let tree = r.tree()?;
        let npts = tree.num_points();
        let ncoords = npts.checked_mul(tree.dim()).ok_or_else(|| Error::format("point count overflows"))?;
        if ncoords.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(Error::format("point data exceeds the remaining bytes"));
        }
        let coords: Vec<f64> = (0..ncoords).map(|_| r.f64()).collect::<Result<_>>()?;
        let points = PointSet::new(tree.dim(), coords)
            .and_then(|p| p.with_block_size(kernel.block_size()))
            .map_err(|e| Error::format(e.to_string()))?;
        let nn = tree.num_nodes();
        let mut bases = Vec::with_capacity(nn);
        let mut skel = Vec::with_capacity(nn);
        let mut tfac = Vec::with_capacity(nn);
        for _ in 0..nn {
            bases.push(r.matrix()?);
            skel.push(r.indices()?);
            tfac.push(r.matrix()?);
        }
        let near = r.u8()?;
        let far = r.u8()?;
        if near > 1 || far > 1 {
            return Err(Error::format("bad storage flags"));
        }
        r.finish()?;
        check_h2_shapes(&tree, kernel.block_size(), &bases, &skel, &tfac)?;
        let mut h2 = H2Matrix::assemble(kernel, points, tree, tol, bases, skel, tfac, 0);
        if near == 1 {
            h2.near_blocks = Some(h2.near_pairs.iter().map(|&(i, j)| h2.eval_near(i, j)).collect());
        }
        if far == 1 {
            h2.far_blocks = Some(h2.far_pairs.iter().map(|&(i, j)| h2.eval_coupling(i, j)).collect());
        }
        Ok(h2)
    }
}

fn check_h2_shapes(
    tree: &PartitionTree,
    bs: usize,
    bases: &[DMatrix<f64>],
    skel: &[Vec<usize>],
    tfac: &[DMatrix<f64>],
) -> Result<()> {
    let bad = |m: String| Err(Error::format(m));
    let root = tree.root();
    for (i, node) in tree.nodes().iter().enumerate() {
        let rows: usize = if node.is_leaf() {
            node.len() * bs
        } else {
            node.children.iter().map(|&c| bases[c].ncols()).sum()
        };
        let k = bases[i].ncols();
        if bases[i].nrows() != rows {
            return bad(format!("node {i}: basis has {} rows, expected {rows}", bases[i].nrows()));
        }
        if i == root {
            if k != 0 || !skel[i].is_empty() || !tfac[i].is_empty() {
                return bad("root carries a basis".into());
            }
            continue;
        }
        if k > rows || skel[i].len() != k || tfac[i].shape() != (k, k) {
            return bad(format!("node {i}: inconsistent rank data"));
        }
        let r = tree.matrix_range(i, bs);
        if skel[i].iter().any(|s| !r.contains(s)) {
            return bad(format!("node {i}: skeleton index outside the node"));
        }
    }
    Ok(())
}

impl SpdHss {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(HSS_MAGIC);
        w.u32(FORMAT_VERSION);
        w.usize(self.block_size);
        w.usize(self.rank);
        w.tree(&self.tree);
        for i in 0..self.tree.num_nodes() {
            w.matrix(&self.leaf_diag[i]);
            w.matrix(&self.basis[i]);
            w.matrix(&self.coupling[i]);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.header(HSS_MAGIC)?;
        let block_size = r.usize()?;
        let rank = r.usize()?;
        let tree = r.tree()?;
        let nn = tree.num_nodes();
        let mut leaf_diag = Vec::with_capacity(nn);
        let mut basis = Vec::with_capacity(nn);
        let mut coupling = Vec::with_capacity(nn);
        for _ in 0..nn {
            leaf_diag.push(r.matrix()?);
            basis.push(r.matrix()?);
            coupling.push(r.matrix()?);
        }
        r.finish()?;
        let h = SpdHss { tree, block_size, rank, leaf_diag, basis, coupling };
        h.validate()?;
        Ok(h)
    }
}
