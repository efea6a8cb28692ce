//! Dense f64 tensors with tape-based reverse-mode differentiation and Adam.
//!
//! The tape records every forward operation into a flat arena; replaying it
//! backward yields gradients for all registered parameters. 64-bit floats are
//! used throughout so finite-difference checks can run at tight tolerances.

use std::sync::Arc;

use rand_chacha::rand_core::RngCore;

use crate::error::{Error, Result};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sentinel bucket index meaning "no bias entry for this logit" (null column).
pub const BIAS_SKIP: usize = usize::MAX;

// ── Tensor ───────────────────────────────────────────────────────────

/// Row-major dense tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Gaussian init via Box-Muller, deterministic for a given RNG stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl RngCore) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1 = unit_open(rng);
            let u2 = unit_open(rng);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            data.push(r * c * std);
            if data.len() < n {
                data.push(r * s * std);
            }
        }
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Uniform sample in (0, 1], avoiding ln(0).
fn unit_open(rng: &mut impl RngCore) -> f64 {
    loop {
        let v = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        if v > 0.0 {
            return v;
        }
    }
}

// ── Parameter sets ───────────────────────────────────────────────────

/// Named, ordered collection of trainable tensors. Order is the contract:
/// gradients, Adam moments, and checkpoints all align to it.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Register every tensor on a tape, returning buffer ids in set order.
    pub fn register(&self, tape: &mut Tape) -> Vec<BufId> {
        self.tensors
            .iter()
            .map(|t| tape.input(t.shape(), t.data().to_vec()))
            .collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

pub type BufId = usize;

#[derive(Debug, Clone)]
struct TapeBuf {
    data: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
enum TapeOp {
    /// out(m,n) = a(m,k) @ b(k,n)
    Matmul { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    /// out(m,n) = a(m,k) @ b(n,k)^T
    MatmulBt { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    /// out = a + b, elementwise
    Add { a: BufId, b: BufId, out: BufId },
    /// out[r, :] = x[r, :] + v
    AddRowVec { x: BufId, v: BufId, out: BufId, rows: usize, cols: usize },
    /// out = c * x
    Scale { x: BufId, c: f64, out: BufId },
    /// tanh-approximated GELU
    Gelu { x: BufId, out: BufId },
    /// row-wise layer norm with affine
    LayerNorm { x: BufId, gain: BufId, bias: BufId, out: BufId, rows: usize, cols: usize },
    /// row-wise softmax over logits + additive mask; blocked entries get
    /// weight 0, so the backward pass needs only the outputs
    MaskedSoftmax { x: BufId, out: BufId, rows: usize, cols: usize },
    /// out rows = table rows selected by ix
    Gather { table: BufId, ix: Arc<Vec<usize>>, out: BufId, d: usize },
    /// out rows = x rows selected by ix (x is a tape matrix)
    GatherRows { x: BufId, ix: Arc<Vec<usize>>, out: BufId, cols: usize },
    /// horizontal concat of (buf, width) parts, all with `rows` rows
    ConcatCols { parts: Arc<Vec<(BufId, usize)>>, out: BufId, rows: usize },
    /// vertical concat of (buf, nrows) parts, all with `cols` columns
    ConcatRows { parts: Arc<Vec<(BufId, usize)>>, out: BufId, cols: usize },
    /// out = x[:, start..start+width]
    SliceCols { x: BufId, start: usize, width: usize, out: BufId, rows: usize, cols: usize },
    /// out = x[start..start+nrows, :]
    SliceRows { x: BufId, start: usize, nrows: usize, out: BufId, cols: usize },
    /// out[i,j] = x[i,j] + table[buckets[i*cols+j]]; BIAS_SKIP entries pass through
    AddIndexedBias { x: BufId, table: BufId, buckets: Arc<Vec<usize>>, out: BufId },
    /// scalar: logsumexp(scores) - scores[0]
    NegLogSoftmax { scores: BufId, out: BufId, n: usize },
    /// scalar: sum of scalar buffers
    SumScalars { xs: Arc<Vec<BufId>>, out: BufId },
}

/// Reverse-mode differentiation tape. One tape per training step.
pub struct Tape {
    bufs: Vec<TapeBuf>,
    ops: Vec<TapeOp>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { bufs: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    fn alloc(&mut self, shape: Vec<usize>, data: Vec<f64>) -> BufId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.bufs.push(TapeBuf { data, shape });
        self.grads.push(None);
        self.bufs.len() - 1
    }

    /// Register an input/parameter buffer (cloned; later mutation of the
    /// source does not affect the tape).
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> BufId {
        self.alloc(shape.to_vec(), data)
    }

    pub fn value(&self, id: BufId) -> &[f64] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn scalar(&self, id: BufId) -> f64 {
        debug_assert_eq!(self.bufs[id].data.len(), 1);
        self.bufs[id].data[0]
    }

    /// Gradient of a buffer, or None if no path to the loss reached it.
    pub fn grad(&self, id: BufId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// Gradient of a parameter buffer; zeros when no gradient flowed.
    pub fn grad_or_zeros(&self, id: BufId) -> Vec<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.bufs[id].data.len()],
        }
    }

    fn rows_cols(&self, id: BufId) -> (usize, usize) {
        let s = &self.bufs[id].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("expected 1- or 2-d buffer, got {:?}", s),
        }
    }

    // ── forward ops ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, ka) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        if ka != kb {
            return Err(Error::Config(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.bufs[a].shape, self.bufs[b].shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.bufs[a].data, &self.bufs[b].data, &mut out, m, ka, n);
        let id = self.alloc(vec![m, n], out);
        self.ops.push(TapeOp::Matmul { a, b, out: id, m, k: ka, n });
        Ok(id)
    }

    /// a(m,k) @ b(n,k)^T, i.e. pairwise row dot products.
    pub fn matmul_bt(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, ka) = self.rows_cols(a);
        let (n, kb) = self.rows_cols(b);
        if ka != kb {
            return Err(Error::Config(format!(
                "matmul_bt inner dims disagree: {:?} x {:?}^T",
                self.bufs[a].shape, self.bufs[b].shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_raw(&self.bufs[a].data, &self.bufs[b].data, &mut out, m, ka, n);
        let id = self.alloc(vec![m, n], out);
        self.ops.push(TapeOp::MatmulBt { a, b, out: id, m, k: ka, n });
        Ok(id)
    }

    /// Inner product of two equal-length vectors, as a 1x1 buffer.
    pub fn dot(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (ra, ca) = self.rows_cols(a);
        let (rb, cb) = self.rows_cols(b);
        if ra != 1 || rb != 1 || ca != cb {
            return Err(Error::Config(format!(
                "dot expects equal-length vectors, got {:?} and {:?}",
                self.bufs[a].shape, self.bufs[b].shape
            )));
        }
        self.matmul_bt(a, b)
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.bufs[a].shape != self.bufs[b].shape {
            return Err(Error::Config(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.bufs[a].shape, self.bufs[b].shape
            )));
        }
        let out: Vec<f64> = self.bufs[a]
            .data
            .iter()
            .zip(self.bufs[b].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        let id = self.alloc(shape, out);
        self.ops.push(TapeOp::Add { a, b, out: id });
        Ok(id)
    }

    pub fn add_row_vec(&mut self, x: BufId, v: BufId) -> Result<BufId> {
        let (rows, cols) = self.rows_cols(x);
        let (vr, vc) = self.rows_cols(v);
        if vr != 1 || vc != cols {
            return Err(Error::Config(format!(
                "add_row_vec: vector {:?} does not match row width {}",
                self.bufs[v].shape, cols
            )));
        }
        let mut out = self.bufs[x].data.clone();
        for r in 0..rows {
            for (o, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(&self.bufs[v].data) {
                *o += b;
            }
        }
        let shape = self.bufs[x].shape.clone();
        let id = self.alloc(shape, out);
        self.ops.push(TapeOp::AddRowVec { x, v, out: id, rows, cols });
        Ok(id)
    }

    pub fn scale(&mut self, x: BufId, c: f64) -> BufId {
        let out: Vec<f64> = self.bufs[x].data.iter().map(|v| c * v).collect();
        let shape = self.bufs[x].shape.clone();
        let id = self.alloc(shape, out);
        self.ops.push(TapeOp::Scale { x, c, out: id });
        id
    }

    pub fn gelu(&mut self, x: BufId) -> BufId {
        let out: Vec<f64> = self.bufs[x].data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.bufs[x].shape.clone();
        let id = self.alloc(shape, out);
        self.ops.push(TapeOp::Gelu { x, out: id });
        id
    }

    pub fn layer_norm(&mut self, x: BufId, gain: BufId, bias: BufId) -> Result<BufId> {
        let (rows, cols) = self.rows_cols(x);
        let (_, gc) = self.rows_cols(gain);
        let (_, bc) = self.rows_cols(bias);
        if gc != cols || bc != cols {
            return Err(Error::Config(format!(
                "layer_norm affine width {}/{} does not match {}",
                gc, bc, cols
            )));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &self.bufs[x].data[r * cols..(r + 1) * cols];
            let (mean, rstd) = row_mean_rstd(xr);
            for j in 0..cols {
                out[r * cols + j] =
                    (xr[j] - mean) * rstd * self.bufs[gain].data[j] + self.bufs[bias].data[j];
            }
        }
        let shape = self.bufs[x].shape.clone();
        let id = self.alloc(shape, out);
        self.ops.push(TapeOp::LayerNorm { x, gain, bias, out: id, rows, cols });
        Ok(id)
    }

    /// Softmax of each row under a blocked mask (true = blocked). Fully
    /// blocked rows produce an all-zero row; the returned flags mark them.
    pub fn masked_softmax(&mut self, x: BufId, blocked: &[bool]) -> Result<(BufId, Vec<bool>)> {
        let (rows, cols) = self.rows_cols(x);
        if blocked.len() != rows * cols {
            return Err(Error::Config(format!(
                "masked_softmax: mask has {} entries for a {}x{} matrix",
                blocked.len(),
                rows,
                cols
            )));
        }
        let mut out = vec![0.0; rows * cols];
        let mut degenerate = vec![false; rows];
        for r in 0..rows {
            let xr = &self.bufs[x].data[r * cols..(r + 1) * cols];
            let br = &blocked[r * cols..(r + 1) * cols];
            degenerate[r] = !masked_softmax_row(xr, br, &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.bufs[x].shape.clone();
        let id = self.alloc(shape, out);
        self.ops.push(TapeOp::MaskedSoftmax { x, out: id, rows, cols });
        Ok((id, degenerate))
    }

    pub fn gather(&mut self, table: BufId, ix: Arc<Vec<usize>>) -> Result<BufId> {
        let (nrows, d) = self.rows_cols(table);
        if let Some(&bad) = ix.iter().find(|&&i| i >= nrows) {
            return Err(Error::Config(format!(
                "gather index {} out of range for table with {} rows",
                bad, nrows
            )));
        }
        let mut out = vec![0.0; ix.len() * d];
        for (r, &i) in ix.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&self.bufs[table].data[i * d..(i + 1) * d]);
        }
        let id = self.alloc(vec![ix.len(), d], out);
        self.ops.push(TapeOp::Gather { table, ix, out: id, d });
        Ok(id)
    }

    pub fn gather_rows(&mut self, x: BufId, ix: Arc<Vec<usize>>) -> Result<BufId> {
        let (nrows, cols) = self.rows_cols(x);
        if let Some(&bad) = ix.iter().find(|&&i| i >= nrows) {
            return Err(Error::Config(format!(
                "gather_rows index {} out of range for {} rows",
                bad, nrows
            )));
        }
        let mut out = vec![0.0; ix.len() * cols];
        for (r, &i) in ix.iter().enumerate() {
            out[r * cols..(r + 1) * cols]
                .copy_from_slice(&self.bufs[x].data[i * cols..(i + 1) * cols]);
        }
        let id = self.alloc(vec![ix.len(), cols], out);
        self.ops.push(TapeOp::GatherRows { x, ix, out: id, cols });
        Ok(id)
    }

    pub fn concat_cols(&mut self, parts: &[BufId]) -> Result<BufId> {
        let rows = self.rows_cols(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(Error::Config(format!(
                    "concat_cols: part has {} rows, expected {}",
                    r, rows
                )));
            }
            widths.push((p, c));
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &(p, w) in &widths {
            for r in 0..rows {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&self.bufs[p].data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let id = self.alloc(vec![rows, total], out);
        self.ops.push(TapeOp::ConcatCols { parts: Arc::new(widths), out: id, rows });
        Ok(id)
    }

    pub fn concat_rows(&mut self, parts: &[BufId]) -> Result<BufId> {
        let cols = self.rows_cols(parts[0]).1;
        let mut heights = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(Error::Config(format!(
                    "concat_rows: part has {} cols, expected {}",
                    c, cols
                )));
            }
            heights.push((p, r));
            total += r;
        }
        let mut out = Vec::with_capacity(total * cols);
        for &(p, _) in &heights {
            out.extend_from_slice(&self.bufs[p].data);
        }
        let id = self.alloc(vec![total, cols], out);
        self.ops.push(TapeOp::ConcatRows { parts: Arc::new(heights), out: id, cols });
        Ok(id)
    }

    pub fn slice_cols(&mut self, x: BufId, start: usize, width: usize) -> Result<BufId> {
        let (rows, cols) = self.rows_cols(x);
        if start + width > cols {
            return Err(Error::Config(format!(
                "slice_cols {}..{} out of range for width {}",
                start,
                start + width,
                cols
            )));
        }
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&self.bufs[x].data[r * cols + start..r * cols + start + width]);
        }
        let id = self.alloc(vec![rows, width], out);
        self.ops.push(TapeOp::SliceCols { x, start, width, out: id, rows, cols });
        Ok(id)
    }

    pub fn slice_rows(&mut self, x: BufId, start: usize, nrows: usize) -> Result<BufId> {
        let (rows, cols) = self.rows_cols(x);
        if start + nrows > rows {
            return Err(Error::Config(format!(
                "slice_rows {}..{} out of range for {} rows",
                start,
                start + nrows,
                rows
            )));
        }
        let out = self.bufs[x].data[start * cols..(start + nrows) * cols].to_vec();
        let id = self.alloc(vec![nrows, cols], out);
        self.ops.push(TapeOp::SliceRows { x, start, nrows, out: id, cols });
        Ok(id)
    }

    /// Add per-entry bias values gathered from a flat table. `buckets` maps
    /// each (row, col) to a table index, or BIAS_SKIP for no bias.
    pub fn add_indexed_bias(&mut self, x: BufId, table: BufId, buckets: Arc<Vec<usize>>) -> Result<BufId> {
        let (rows, cols) = self.rows_cols(x);
        if buckets.len() != rows * cols {
            return Err(Error::Config(format!(
                "add_indexed_bias: {} bucket entries for {}x{} matrix",
                buckets.len(),
                rows,
                cols
            )));
        }
        let tlen = self.bufs[table].data.len();
        let mut out = self.bufs[x].data.clone();
        for (o, &bk) in out.iter_mut().zip(buckets.iter()) {
            if bk != BIAS_SKIP {
                if bk >= tlen {
                    return Err(Error::Config(format!(
                        "bias bucket {} out of range for table of {}",
                        bk, tlen
                    )));
                }
                *o += self.bufs[table].data[bk];
            }
        }
        let shape = self.bufs[x].shape.clone();
        let id = self.alloc(shape, out);
        self.ops.push(TapeOp::AddIndexedBias { x, table, buckets, out: id });
        Ok(id)
    }

    /// -log softmax(scores)[0], with scores[0] the positive entry.
    pub fn neg_log_softmax0(&mut self, scores: BufId) -> Result<BufId> {
        let n = self.bufs[scores].data.len();
        if n == 0 {
            return Err(Error::Config("neg_log_softmax0 on empty scores".into()));
        }
        let s = &self.bufs[scores].data;
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - s[0];
        let id = self.alloc(vec![1], vec![loss]);
        self.ops.push(TapeOp::NegLogSoftmax { scores, out: id, n });
        Ok(id)
    }

    pub fn sum_scalars(&mut self, xs: &[BufId]) -> Result<BufId> {
        let mut total = 0.0;
        for &x in xs {
            if self.bufs[x].data.len() != 1 {
                return Err(Error::Config("sum_scalars expects scalar buffers".into()));
            }
            total += self.bufs[x].data[0];
        }
        let id = self.alloc(vec![1], vec![total]);
        self.ops.push(TapeOp::SumScalars { xs: Arc::new(xs.to_vec()), out: id });
        Ok(id)
    }

    // ── backward ─────────────────────────────────────────────────

    fn accum(&mut self, id: BufId, g: &[f64]) {
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => self.grads[id] = Some(g.to_vec()),
        }
    }

    /// Replay the tape backward from a scalar loss.
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if self.bufs[loss].data.len() != 1 {
            return Err(Error::Config("backward seed must be a scalar".into()));
        }
        if self.grads[loss].is_none() {
            self.grads[loss] = Some(vec![1.0]);
        }
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &TapeOp) {
        match op {
            TapeOp::Matmul { a, b, out, m, k, n } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                // dA = dOut @ B^T
                let mut d_a = vec![0.0; m * k];
                matmul_bt_raw(&d_out, &self.bufs[*b].data, &mut d_a, *m, *n, *k);
                self.accum(*a, &d_a);
                // dB = A^T @ dOut
                let mut d_b = vec![0.0; k * n];
                matmul_tn_raw(&self.bufs[*a].data, &d_out, &mut d_b, *m, *k, *n);
                self.accum(*b, &d_b);
            }
            TapeOp::MatmulBt { a, b, out, m, k, n } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                // dA = dOut @ B
                let mut d_a = vec![0.0; m * k];
                matmul_raw(&d_out, &self.bufs[*b].data, &mut d_a, *m, *n, *k);
                self.accum(*a, &d_a);
                // dB = dOut^T @ A
                let mut d_b = vec![0.0; n * k];
                matmul_tn_raw(&d_out, &self.bufs[*a].data, &mut d_b, *m, *n, *k);
                self.accum(*b, &d_b);
            }
            TapeOp::Add { a, b, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                self.accum(*a, &d_out);
                self.accum(*b, &d_out);
            }
            TapeOp::AddRowVec { x, v, out, rows, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                self.accum(*x, &d_out);
                let mut d_v = vec![0.0; *cols];
                for r in 0..*rows {
                    for (dv, g) in d_v.iter_mut().zip(&d_out[r * cols..(r + 1) * cols]) {
                        *dv += g;
                    }
                }
                self.accum(*v, &d_v);
            }
            TapeOp::Scale { x, c, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let d_x: Vec<f64> = d_out.iter().map(|g| c * g).collect();
                self.accum(*x, &d_x);
            }
            TapeOp::Gelu { x, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let d_x: Vec<f64> = self.bufs[*x]
                    .data
                    .iter()
                    .zip(d_out.iter())
                    .map(|(&v, &g)| g * gelu_grad(v))
                    .collect();
                self.accum(*x, &d_x);
            }
            TapeOp::LayerNorm { x, gain, bias, out, rows, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let n = *cols as f64;
                let mut d_x = vec![0.0; rows * cols];
                let mut d_g = vec![0.0; *cols];
                let mut d_b = vec![0.0; *cols];
                for r in 0..*rows {
                    let xr = &self.bufs[*x].data[r * cols..(r + 1) * cols];
                    let (mean, rstd) = row_mean_rstd(xr);
                    let dy = &d_out[r * cols..(r + 1) * cols];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..*cols {
                        let xh = (xr[j] - mean) * rstd;
                        let dxh = dy[j] * self.bufs[*gain].data[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        d_g[j] += dy[j] * xh;
                        d_b[j] += dy[j];
                    }
                    for j in 0..*cols {
                        let xh = (xr[j] - mean) * rstd;
                        let dxh = dy[j] * self.bufs[*gain].data[j];
                        d_x[r * cols + j] = rstd * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
                    }
                }
                self.accum(*x, &d_x);
                self.accum(*gain, &d_g);
                self.accum(*bias, &d_b);
            }
            TapeOp::MaskedSoftmax { x, out, rows, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let mut d_x = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let y = &self.bufs[*out].data[r * cols..(r + 1) * cols];
                    let dy = &d_out[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..*cols {
                        // masked entries have y = 0, so their grad is exactly 0
                        d_x[r * cols + j] = y[j] * (dy[j] - dot);
                    }
                }
                self.accum(*x, &d_x);
            }
            TapeOp::Gather { table, ix, out, d } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let mut d_t = vec![0.0; self.bufs[*table].data.len()];
                for (r, &i) in ix.iter().enumerate() {
                    for (t, g) in d_t[i * d..(i + 1) * d].iter_mut().zip(&d_out[r * d..(r + 1) * d]) {
                        *t += g;
                    }
                }
                self.accum(*table, &d_t);
            }
            TapeOp::GatherRows { x, ix, out, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let mut d_x = vec![0.0; self.bufs[*x].data.len()];
                for (r, &i) in ix.iter().enumerate() {
                    for (t, g) in
                        d_x[i * cols..(i + 1) * cols].iter_mut().zip(&d_out[r * cols..(r + 1) * cols])
                    {
                        *t += g;
                    }
                }
                self.accum(*x, &d_x);
            }
            TapeOp::ConcatCols { parts, out, rows } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let total: usize = parts.iter().map(|&(_, w)| w).sum();
                let mut off = 0;
                for &(p, w) in parts.iter() {
                    let mut d_p = vec![0.0; rows * w];
                    for r in 0..*rows {
                        d_p[r * w..(r + 1) * w]
                            .copy_from_slice(&d_out[r * total + off..r * total + off + w]);
                    }
                    self.accum(p, &d_p);
                    off += w;
                }
            }
            TapeOp::ConcatRows { parts, out, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let mut off = 0;
                for &(p, h) in parts.iter() {
                    self.accum(p, &d_out[off * cols..(off + h) * cols]);
                    off += h;
                }
            }
            TapeOp::SliceCols { x, start, width, out, rows, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let mut d_x = vec![0.0; rows * cols];
                for r in 0..*rows {
                    d_x[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&d_out[r * width..(r + 1) * width]);
                }
                self.accum(*x, &d_x);
            }
            TapeOp::SliceRows { x, start, nrows, out, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let mut d_x = vec![0.0; self.bufs[*x].data.len()];
                d_x[start * cols..(start + nrows) * cols].copy_from_slice(&d_out);
                self.accum(*x, &d_x);
            }
            TapeOp::AddIndexedBias { x, table, buckets, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                self.accum(*x, &d_out);
                let mut d_t = vec![0.0; self.bufs[*table].data.len()];
                for (g, &bk) in d_out.iter().zip(buckets.iter()) {
                    if bk != BIAS_SKIP {
                        d_t[bk] += g;
                    }
                }
                self.accum(*table, &d_t);
            }
            TapeOp::NegLogSoftmax { scores, out, n } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let s = &self.bufs[*scores].data;
                let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = s.iter().map(|v| (v - max).exp()).sum();
                let mut d_s = vec![0.0; *n];
                for j in 0..*n {
                    let p = (s[j] - max).exp() / sum;
                    d_s[j] = d_out[0] * (p - if j == 0 { 1.0 } else { 0.0 });
                }
                self.accum(*scores, &d_s);
            }
            TapeOp::SumScalars { xs, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                for &x in xs.iter() {
                    self.accum(x, &d_out);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// out(m,n) += a(m,k) @ b(k,n)
fn matmul_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out(m,n) += a(m,k) @ b(n,k)^T
fn matmul_bt_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out(k,n) += a(m,k)^T @ b(m,n)
fn matmul_tn_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn row_mean_rstd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax of one row under a blocked mask. Returns false (and zero weights)
/// when every position is blocked.
fn masked_softmax_row(x: &[f64], blocked: &[bool], out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (v, &b) in x.iter().zip(blocked) {
        if !b && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let mut sum = 0.0;
    for ((o, v), &b) in out.iter_mut().zip(x).zip(blocked) {
        if b {
            *o = 0.0;
        } else {
            *o = (v - max).exp();
            sum += *o;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    true
}

/// Row-level masked softmax on plain slices: weights plus a degenerate flag.
pub fn softmax_masked(logits: &[f64], blocked: &[bool]) -> Result<(Vec<f64>, bool)> {
    if logits.len() != blocked.len() {
        return Err(Error::Config(format!(
            "softmax_masked: {} logits vs {} mask entries",
            logits.len(),
            blocked.len()
        )));
    }
    let mut out = vec![0.0; logits.len()];
    let ok = masked_softmax_row(logits, blocked, &mut out);
    Ok((out, !ok))
}

/// Row-wise layer norm of a plain tensor (no tape).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xb = tape.input(x.shape(), x.data().to_vec());
    let gb = tape.input(gain.shape(), gain.data().to_vec());
    let bb = tape.input(bias.shape(), bias.data().to_vec());
    let out = tape.layer_norm(xb, gb, bb)?;
    Tensor::from_vec(tape.shape(out), tape.value(out).to_vec())
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> AdamConfig {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// First/second moment accumulators aligned to a ParamSet.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> AdamState {
        AdamState {
            step: 0,
            m: (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect(),
            v: (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam update over a full parameter set.
/// `grads` must align with `params`; non-finite gradients abort the step.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Config(format!(
            "adam_step: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter '{}'",
                params.name(i)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params.tensor_mut(i).data_mut();
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * cfg.weight_decay * p[j] + cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ── gradient checking ────────────────────────────────────────────────

/// Max relative error between tape gradients and central finite differences,
/// sampled over up to `samples_per_tensor` coordinates of each parameter.
///
/// `forward` must be deterministic: it is re-evaluated under perturbed
/// parameters to obtain the numeric derivative.
pub fn grad_check<F>(
    params: &ParamSet,
    forward: F,
    samples_per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[BufId]) -> Result<BufId>,
{
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let loss = forward(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let ids = p.register(&mut t);
        let loss = forward(&mut t, &ids)?;
        Ok(t.scalar(loss))
    };

    let mut max_rel = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let coords: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let mut plus = params.clone();
            plus.tensor_mut(pi).data_mut()[c] += step;
            let mut minus = params.clone();
            minus.tensor_mut(pi).data_mut()[c] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = grads[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

// ── tests ────────────────────────────────────────────────────────────
