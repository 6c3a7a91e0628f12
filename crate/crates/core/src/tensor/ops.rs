//! Forward builders and gradient rules for every recorded operation.
//!
//! Each `Tape` method validates shapes, computes the forward value with
//! sequential row-major summation, and records an [`Op`] holding the input
//! node ids plus whatever context the backward rule needs (saved softmax
//! probabilities, row norms, rotation tables). `Op::backward` computes the
//! input gradient contributions from the output gradient and accumulates
//! them into the input nodes.

use super::{accumulate, Node, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

/// Recorded operation: input ids plus saved backward context.
pub enum Op<S> {
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: S },
    Tanh { a: usize },
    Gelu { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    L2NormRows { a: usize },
    Matmul { a: usize, b: usize },
    MatmulTB { a: usize, b: usize },
    AddRowBias { a: usize, b: usize },
    RmsNormRows { a: usize, gain: usize, inv_rms: Vec<S> },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    Diagonal { a: usize },
    Transpose2D { a: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    SelectPositions { a: usize, positions: Vec<usize> },
    MaskedMeanRows { a: usize, lengths: Vec<usize> },
    Rope { a: usize, n_heads: usize, cos_tab: Vec<S>, sin_tab: Vec<S> },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        n_heads: usize,
        lengths: Vec<usize>,
        probs: Vec<S>,
    },
    BmmBroadcastNT { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    MaskedSoftmaxLast { a: usize, lengths: Vec<usize> },
    MeanDim1 { a: usize },
    SliceCols { a: usize },
    NormalizeRows { a: usize, norms: Vec<S> },
}

/// Split a shape into (flattened leading rows, last extent).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().rev().skip(1).product::<usize>();
    (rows, cols)
}

// Dense kernels. All loops run in fixed sequential order so results are
// bitwise reproducible; the inner updates are contiguous so they vectorize.

/// C[m,n] = A[m,k] . B[k,n]
pub(crate) fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &al) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += al * bv;
            }
        }
    }
    c
}

/// C[m,p] = A[m,k] . B[p,k]^T
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, p: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * p];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            c[i * p + j] = dot(arow, brow);
        }
    }
    c
}

/// C[m,n] = A[r,m]^T . B[r,n]
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], r: usize, m: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for l in 0..r {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(GELU_K);
    let half = S::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(GELU_K);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

/// Softmax over `cols` values with max subtraction, written into `out`.
fn softmax_into<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut total = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        total += e;
    }
    let inv = S::one() / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

impl<S: Scalar> Tape<S> {
    fn rank_at_least(&self, op: &'static str, t: Tensor, rank: usize) -> Result<()> {
        if self.nodes[t.id].shape.len() < rank {
            return Err(Error::shape(
                op,
                format!(
                    "expected rank >= {rank}, found shape {:?}",
                    self.nodes[t.id].shape
                ),
            ));
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, t: Tensor, rank: usize) -> Result<()> {
        if self.nodes[t.id].shape.len() != rank {
            return Err(Error::shape(
                op,
                format!(
                    "expected rank {rank}, found shape {:?}",
                    self.nodes[t.id].shape
                ),
            ));
        }
        Ok(())
    }

    fn out_flags(&self, inputs: &[Tensor]) -> bool {
        inputs.iter().any(|t| self.nodes[t.id].requires_grad)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(Error::shape(
                "add",
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a.id].shape, self.nodes[b.id].shape
                ),
            ));
        }
        let data: Vec<S> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.out_flags(&[a, b]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(shape, data, rg, Some(Op::Add { a: a.id, b: b.id })))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(Error::shape(
                "mul",
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a.id].shape, self.nodes[b.id].shape
                ),
            ));
        }
        let data: Vec<S> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.out_flags(&[a, b]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(shape, data, rg, Some(Op::Mul { a: a.id, b: b.id })))
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, a: Tensor, c: S) -> Result<Tensor> {
        let data: Vec<S> = self.nodes[a.id].data.iter().map(|&x| x * c).collect();
        let rg = self.out_flags(&[a]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(shape, data, rg, Some(Op::Scale { a: a.id, c })))
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<S> = self.nodes[a.id].data.iter().map(|&x| x.tanh()).collect();
        let rg = self.out_flags(&[a]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(shape, data, rg, Some(Op::Tanh { a: a.id })))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<S> = self.nodes[a.id]
            .data
            .iter()
            .map(|&x| gelu_scalar(x))
            .collect();
        let rg = self.out_flags(&[a]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(shape, data, rg, Some(Op::Gelu { a: a.id })))
    }

    /// Sum of all elements, producing a scalar (empty shape).
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let mut acc = S::zero();
        for &v in &self.nodes[a.id].data {
            acc += v;
        }
        let rg = self.out_flags(&[a]);
        Ok(self.push(vec![], vec![acc], rg, Some(Op::Sum { a: a.id })))
    }

    /// Arithmetic mean of all elements, producing a scalar.
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let n = self.nodes[a.id].data.len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let mut acc = S::zero();
        for &v in &self.nodes[a.id].data {
            acc += v;
        }
        let rg = self.out_flags(&[a]);
        Ok(self.push(
            vec![],
            vec![acc / S::from_usize(n)],
            rg,
            Some(Op::Mean { a: a.id }),
        ))
    }

    /// Euclidean norm of each row of a rank-2 tensor: [r, c] -> [r].
    pub fn l2norm_rows(&mut self, a: Tensor) -> Result<Tensor> {
        self.expect_rank("l2norm_rows", a, 2)?;
        let (rows, cols) = rows_cols(&self.nodes[a.id].shape);
        let x = &self.nodes[a.id].data;
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            out.push(dot(row, row).sqrt());
        }
        let rg = self.out_flags(&[a]);
        Ok(self.push(vec![rows], out, rg, Some(Op::L2NormRows { a: a.id })))
    }

    /// Matrix product. `a` may carry extra leading dimensions, which are
    /// flattened into rows: [..., k] x [k, p] -> [..., p].
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.rank_at_least("matmul", a, 1)?;
        self.expect_rank("matmul", b, 2)?;
        let (rows, k) = rows_cols(&self.nodes[a.id].shape);
        let (bk, p) = rows_cols(&self.nodes[b.id].shape);
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} vs {:?}",
                    self.nodes[a.id].shape, self.nodes[b.id].shape
                ),
            ));
        }
        let data = matmul_nn(&self.nodes[a.id].data, &self.nodes[b.id].data, rows, k, p);
        let mut shape = self.nodes[a.id].shape.clone();
        *shape.last_mut().unwrap() = p;
        let rg = self.out_flags(&[a, b]);
        Ok(self.push(shape, data, rg, Some(Op::Matmul { a: a.id, b: b.id })))
    }

    /// A . B^T for rank-2 inputs sharing their trailing extent:
    /// [m, k] x [p, k] -> [m, p]. Row i of the output holds the dot products
    /// of a's row i against every row of b.
    pub fn matmul_tb(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.expect_rank("matmul_tb", a, 2)?;
        self.expect_rank("matmul_tb", b, 2)?;
        let (m, k) = rows_cols(&self.nodes[a.id].shape);
        let (p, bk) = rows_cols(&self.nodes[b.id].shape);
        if k != bk {
            return Err(Error::shape(
                "matmul_tb",
                format!(
                    "trailing dimensions disagree: {:?} vs {:?}",
                    self.nodes[a.id].shape, self.nodes[b.id].shape
                ),
            ));
        }
        let data = matmul_nt(&self.nodes[a.id].data, &self.nodes[b.id].data, m, k, p);
        let rg = self.out_flags(&[a, b]);
        Ok(self.push(
            vec![m, p],
            data,
            rg,
            Some(Op::MatmulTB { a: a.id, b: b.id }),
        ))
    }

    /// Add a length-p bias vector to every row of [..., p].
    pub fn add_row_bias(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        self.rank_at_least("add_row_bias", a, 1)?;
        self.expect_rank("add_row_bias", bias, 1)?;
        let (rows, p) = rows_cols(&self.nodes[a.id].shape);
        if p != self.nodes[bias.id].shape[0] {
            return Err(Error::shape(
                "add_row_bias",
                format!(
                    "{:?} rows vs bias {:?}",
                    self.nodes[a.id].shape, self.nodes[bias.id].shape
                ),
            ));
        }
        let x = &self.nodes[a.id].data;
        let b = &self.nodes[bias.id].data;
        let mut data = Vec::with_capacity(x.len());
        for i in 0..rows {
            for j in 0..p {
                data.push(x[i * p + j] + b[j]);
            }
        }
        let rg = self.out_flags(&[a, bias]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(
            shape,
            data,
            rg,
            Some(Op::AddRowBias { a: a.id, b: bias.id }),
        ))
    }

    /// Root-mean-square normalization of each trailing-dimension row,
    /// multiplied by a learned gain: y = x / sqrt(mean(x^2) + eps) * gain.
    pub fn rmsnorm_rows(&mut self, a: Tensor, gain: Tensor, eps: S) -> Result<Tensor> {
        self.rank_at_least("rmsnorm_rows", a, 1)?;
        self.expect_rank("rmsnorm_rows", gain, 1)?;
        let (rows, d) = rows_cols(&self.nodes[a.id].shape);
        if d != self.nodes[gain.id].shape[0] {
            return Err(Error::shape(
                "rmsnorm_rows",
                format!(
                    "{:?} rows vs gain {:?}",
                    self.nodes[a.id].shape, self.nodes[gain.id].shape
                ),
            ));
        }
        let x = &self.nodes[a.id].data;
        let g = &self.nodes[gain.id].data;
        let inv_d = S::one() / S::from_usize(d);
        let mut data = Vec::with_capacity(x.len());
        let mut inv_rms = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &x[i * d..(i + 1) * d];
            let ms = dot(row, row) * inv_d;
            let inv = S::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                data.push(row[j] * inv * g[j]);
            }
        }
        let rg = self.out_flags(&[a, gain]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(
            shape,
            data,
            rg,
            Some(Op::RmsNormRows {
                a: a.id,
                gain: gain.id,
                inv_rms,
            }),
        ))
    }

    /// Softmax over the trailing dimension, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        self.rank_at_least("softmax_rows", a, 1)?;
        let (rows, cols) = rows_cols(&self.nodes[a.id].shape);
        let x = &self.nodes[a.id].data;
        let mut data = vec![S::zero(); x.len()];
        for i in 0..rows {
            softmax_into(
                &x[i * cols..(i + 1) * cols],
                &mut data[i * cols..(i + 1) * cols],
            );
        }
        let rg = self.out_flags(&[a]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(shape, data, rg, Some(Op::SoftmaxRows { a: a.id })))
    }

    /// Log-softmax over the trailing dimension: x - logsumexp(row).
    pub fn log_softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        self.rank_at_least("log_softmax_rows", a, 1)?;
        let (rows, cols) = rows_cols(&self.nodes[a.id].shape);
        let x = &self.nodes[a.id].data;
        let mut data = Vec::with_capacity(x.len());
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let mut max = row[0];
            for &v in &row[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut total = S::zero();
            for &v in row {
                total += (v - max).exp();
            }
            let lse = max + total.ln();
            for &v in row {
                data.push(v - lse);
            }
        }
        let rg = self.out_flags(&[a]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(shape, data, rg, Some(Op::LogSoftmaxRows { a: a.id })))
    }

    /// Main diagonal of a square matrix: [n, n] -> [n].
    pub fn diagonal(&mut self, a: Tensor) -> Result<Tensor> {
        self.expect_rank("diagonal", a, 2)?;
        let shape = &self.nodes[a.id].shape;
        if shape[0] != shape[1] {
            return Err(Error::shape(
                "diagonal",
                format!("matrix must be square, found {shape:?}"),
            ));
        }
        let n = shape[0];
        let x = &self.nodes[a.id].data;
        let data: Vec<S> = (0..n).map(|i| x[i * n + i]).collect();
        let rg = self.out_flags(&[a]);
        Ok(self.push(vec![n], data, rg, Some(Op::Diagonal { a: a.id })))
    }

    pub fn transpose2d(&mut self, a: Tensor) -> Result<Tensor> {
        self.expect_rank("transpose2d", a, 2)?;
        let (rows, cols) = rows_cols(&self.nodes[a.id].shape);
        let data = transpose(&self.nodes[a.id].data, rows, cols);
        let rg = self.out_flags(&[a]);
        Ok(self.push(
            vec![cols, rows],
            data,
            rg,
            Some(Op::Transpose2D { a: a.id }),
        ))
    }

    /// Row lookup into a [v, d] table. `ids` are row indices; the output is
    /// shaped `leading ++ [d]` with `product(leading) == ids.len()`.
    pub fn gather_rows(&mut self, table: Tensor, ids: &[usize], leading: &[usize]) -> Result<Tensor> {
        self.expect_rank("gather_rows", table, 2)?;
        let (v, d) = rows_cols(&self.nodes[table.id].shape);
        if leading.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "gather_rows",
                format!("leading shape {leading:?} does not cover {} ids", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: id {bad} out of range for table with {v} rows"
            )));
        }
        let x = &self.nodes[table.id].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let mut shape = leading.to_vec();
        shape.push(d);
        let rg = self.out_flags(&[table]);
        Ok(self.push(
            shape,
            data,
            rg,
            Some(Op::GatherRows {
                table: table.id,
                ids: ids.to_vec(),
            }),
        ))
    }

    /// Pick one sequence position per batch row: [n, l, d] -> [n, d].
    pub fn select_positions(&mut self, a: Tensor, positions: &[usize]) -> Result<Tensor> {
        self.expect_rank("select_positions", a, 3)?;
        let shape = self.nodes[a.id].shape.clone();
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        if positions.len() != n {
            return Err(Error::shape(
                "select_positions",
                format!("{} positions for batch of {n}", positions.len()),
            ));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= l) {
            return Err(Error::InvalidArgument(format!(
                "select_positions: position {bad} out of range for {l} positions"
            )));
        }
        let x = &self.nodes[a.id].data;
        let mut data = Vec::with_capacity(n * d);
        for (i, &p) in positions.iter().enumerate() {
            let base = (i * l + p) * d;
            data.extend_from_slice(&x[base..base + d]);
        }
        let rg = self.out_flags(&[a]);
        Ok(self.push(
            vec![n, d],
            data,
            rg,
            Some(Op::SelectPositions {
                a: a.id,
                positions: positions.to_vec(),
            }),
        ))
    }

    /// Mean over the first `lengths[i]` sequence positions of each batch
    /// row: [n, l, d] -> [n, d]. Padded positions never contribute.
    pub fn masked_mean_rows(&mut self, a: Tensor, lengths: &[usize]) -> Result<Tensor> {
        self.expect_rank("masked_mean_rows", a, 3)?;
        let shape = self.nodes[a.id].shape.clone();
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        check_lengths("masked_mean_rows", lengths, n, l)?;
        let x = &self.nodes[a.id].data;
        let mut data = vec![S::zero(); n * d];
        for (i, &len) in lengths.iter().enumerate() {
            let out = &mut data[i * d..(i + 1) * d];
            for t in 0..len {
                let row = &x[(i * l + t) * d..(i * l + t) * d + d];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let inv = S::one() / S::from_usize(len);
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.out_flags(&[a]);
        Ok(self.push(
            vec![n, d],
            data,
            rg,
            Some(Op::MaskedMeanRows {
                a: a.id,
                lengths: lengths.to_vec(),
            }),
        ))
    }

    /// Rotary position encoding applied per head to [n, l, d]: consecutive
    /// element pairs within each head are rotated by position-dependent
    /// angles theta(t, j) = t * base^(-2j / head_dim).
    pub fn rope(&mut self, a: Tensor, n_heads: usize, base: f64) -> Result<Tensor> {
        self.expect_rank("rope", a, 3)?;
        let shape = self.nodes[a.id].shape.clone();
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        let dh = head_dim("rope", d, n_heads)?;
        if dh % 2 != 0 {
            return Err(Error::shape(
                "rope",
                format!("head dimension {dh} must be even for pairwise rotation"),
            ));
        }
        let half = dh / 2;
        let mut cos_tab = Vec::with_capacity(l * half);
        let mut sin_tab = Vec::with_capacity(l * half);
        for t in 0..l {
            for j in 0..half {
                let freq = base.powf(-2.0 * j as f64 / dh as f64);
                let angle = t as f64 * freq;
                cos_tab.push(S::from_f64(angle.cos()));
                sin_tab.push(S::from_f64(angle.sin()));
            }
        }
        let x = &self.nodes[a.id].data;
        let mut data = x.clone();
        apply_rotation(&mut data, n, l, d, n_heads, &cos_tab, &sin_tab, false);
        let rg = self.out_flags(&[a]);
        Ok(self.push(
            shape,
            data,
            rg,
            Some(Op::Rope {
                a: a.id,
                n_heads,
                cos_tab,
                sin_tab,
            }),
        ))
    }

    /// Fused multi-head scaled-dot-product attention with a causal mask and
    /// right-padding exclusion. Position t of batch row i attends to
    /// positions s <= t; rows at t >= lengths[i] produce zeros. Softmax
    /// probabilities are saved for the backward pass when gradients are
    /// required.
    pub fn causal_attention(
        &mut self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        n_heads: usize,
        lengths: &[usize],
    ) -> Result<Tensor> {
        for t in [q, k, v] {
            self.expect_rank("causal_attention", t, 3)?;
        }
        let shape = self.nodes[q.id].shape.clone();
        if self.nodes[k.id].shape != shape || self.nodes[v.id].shape != shape {
            return Err(Error::shape(
                "causal_attention",
                format!(
                    "q {:?}, k {:?}, v {:?} must agree",
                    shape, self.nodes[k.id].shape, self.nodes[v.id].shape
                ),
            ));
        }
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        let dh = head_dim("causal_attention", d, n_heads)?;
        check_lengths("causal_attention", lengths, n, l)?;
        let rg = self.out_flags(&[q, k, v]);
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let qd = &self.nodes[q.id].data;
        let kd = &self.nodes[k.id].data;
        let vd = &self.nodes[v.id].data;
        let mut out = vec![S::zero(); n * l * d];
        let mut probs = vec![S::zero(); if rg { n * n_heads * l * l } else { 0 }];
        let mut scores = vec![S::zero(); l];
        let mut prow = vec![S::zero(); l];
        for i in 0..n {
            let len = lengths[i];
            for a in 0..n_heads {
                let col = a * dh;
                for t in 0..len {
                    let qrow = &qd[(i * l + t) * d + col..(i * l + t) * d + col + dh];
                    for s in 0..=t {
                        let krow = &kd[(i * l + s) * d + col..(i * l + s) * d + col + dh];
                        scores[s] = dot(qrow, krow) * scale;
                    }
                    softmax_into(&scores[..=t], &mut prow[..=t]);
                    let orow = &mut out[(i * l + t) * d + col..(i * l + t) * d + col + dh];
                    for s in 0..=t {
                        let vrow = &vd[(i * l + s) * d + col..(i * l + s) * d + col + dh];
                        axpy(prow[s], vrow, orow);
                    }
                    if rg {
                        let pbase = ((i * n_heads + a) * l + t) * l;
                        probs[pbase..pbase + t + 1].copy_from_slice(&prow[..=t]);
                    }
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            rg,
            Some(Op::CausalAttention {
                q: q.id,
                k: k.id,
                v: v.id,
                n_heads,
                lengths: lengths.to_vec(),
                probs,
            }),
        ))
    }

    /// Shared-query batched product: A[r, c] . B[i]^T for every batch row of
    /// b: [r, c] x [n, l, c] -> [n, r, l].
    pub fn bmm_broadcast_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.expect_rank("bmm_broadcast_nt", a, 2)?;
        self.expect_rank("bmm_broadcast_nt", b, 3)?;
        let (r, c) = rows_cols(&self.nodes[a.id].shape);
        let bshape = self.nodes[b.id].shape.clone();
        let (n, l, bc) = (bshape[0], bshape[1], bshape[2]);
        if c != bc {
            return Err(Error::shape(
                "bmm_broadcast_nt",
                format!(
                    "trailing dimensions disagree: {:?} vs {:?}",
                    self.nodes[a.id].shape, bshape
                ),
            ));
        }
        let ad = &self.nodes[a.id].data;
        let bd = &self.nodes[b.id].data;
        let mut data = Vec::with_capacity(n * r * l);
        for i in 0..n {
            for x in 0..r {
                let arow = &ad[x * c..(x + 1) * c];
                for t in 0..l {
                    let brow = &bd[(i * l + t) * c..(i * l + t) * c + c];
                    data.push(dot(arow, brow));
                }
            }
        }
        let rg = self.out_flags(&[a, b]);
        Ok(self.push(
            vec![n, r, l],
            data,
            rg,
            Some(Op::BmmBroadcastNT { a: a.id, b: b.id }),
        ))
    }

    /// Batched matrix product: [n, r, l] x [n, l, d] -> [n, r, d].
    pub fn bmm(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.expect_rank("bmm", a, 3)?;
        self.expect_rank("bmm", b, 3)?;
        let ashape = self.nodes[a.id].shape.clone();
        let bshape = self.nodes[b.id].shape.clone();
        if ashape[0] != bshape[0] || ashape[2] != bshape[1] {
            return Err(Error::shape(
                "bmm",
                format!("{ashape:?} vs {bshape:?}"),
            ));
        }
        let (n, r, l, d) = (ashape[0], ashape[1], ashape[2], bshape[2]);
        let ad = &self.nodes[a.id].data;
        let bd = &self.nodes[b.id].data;
        let mut data = Vec::with_capacity(n * r * d);
        for i in 0..n {
            let block = matmul_nn(
                &ad[i * r * l..(i + 1) * r * l],
                &bd[i * l * d..(i + 1) * l * d],
                r,
                l,
                d,
            );
            data.extend_from_slice(&block);
        }
        let rg = self.out_flags(&[a, b]);
        Ok(self.push(
            vec![n, r, d],
            data,
            rg,
            Some(Op::Bmm { a: a.id, b: b.id }),
        ))
    }

    /// Softmax over the trailing dimension restricted to the first
    /// `lengths[i]` entries of batch row i; masked entries become zero.
    pub fn masked_softmax_last(&mut self, a: Tensor, lengths: &[usize]) -> Result<Tensor> {
        self.expect_rank("masked_softmax_last", a, 3)?;
        let shape = self.nodes[a.id].shape.clone();
        let (n, r, l) = (shape[0], shape[1], shape[2]);
        check_lengths("masked_softmax_last", lengths, n, l)?;
        let x = &self.nodes[a.id].data;
        let mut data = vec![S::zero(); x.len()];
        for i in 0..n {
            let len = lengths[i];
            for row in 0..r {
                let base = (i * r + row) * l;
                softmax_into(&x[base..base + len], &mut data[base..base + len]);
            }
        }
        let rg = self.out_flags(&[a]);
        Ok(self.push(
            shape,
            data,
            rg,
            Some(Op::MaskedSoftmaxLast {
                a: a.id,
                lengths: lengths.to_vec(),
            }),
        ))
    }

    /// Mean over the middle dimension: [n, r, d] -> [n, d].
    pub fn mean_dim1(&mut self, a: Tensor) -> Result<Tensor> {
        self.expect_rank("mean_dim1", a, 3)?;
        let shape = self.nodes[a.id].shape.clone();
        let (n, r, d) = (shape[0], shape[1], shape[2]);
        let x = &self.nodes[a.id].data;
        let inv = S::one() / S::from_usize(r);
        let mut data = vec![S::zero(); n * d];
        for i in 0..n {
            let out = &mut data[i * d..(i + 1) * d];
            for row in 0..r {
                let src = &x[(i * r + row) * d..(i * r + row) * d + d];
                for (o, &v) in out.iter_mut().zip(src) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.out_flags(&[a]);
        Ok(self.push(vec![n, d], data, rg, Some(Op::MeanDim1 { a: a.id })))
    }

    /// Keep the first `width` columns of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Tensor, width: usize) -> Result<Tensor> {
        self.expect_rank("slice_cols", a, 2)?;
        let (rows, cols) = rows_cols(&self.nodes[a.id].shape);
        if width == 0 || width > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("width {width} outside 1..={cols}"),
            ));
        }
        let x = &self.nodes[a.id].data;
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&x[i * cols..i * cols + width]);
        }
        let rg = self.out_flags(&[a]);
        Ok(self.push(
            vec![rows, width],
            data,
            rg,
            Some(Op::SliceCols { a: a.id }),
        ))
    }

    /// Scale each row of a rank-2 tensor to unit Euclidean norm. A zero row
    /// cannot be normalized and is reported with its index.
    pub fn normalize_rows(&mut self, a: Tensor) -> Result<Tensor> {
        self.expect_rank("normalize_rows", a, 2)?;
        let (rows, cols) = rows_cols(&self.nodes[a.id].shape);
        let x = &self.nodes[a.id].data;
        let mut data = Vec::with_capacity(x.len());
        let mut norms = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let norm = dot(row, row).sqrt();
            if norm <= S::zero() || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "normalize_rows: row {i} has norm {} and cannot be normalized",
                    norm.to_f64()
                )));
            }
            norms.push(norm);
            for &v in row {
                data.push(v / norm);
            }
        }
        let rg = self.out_flags(&[a]);
        let shape = self.nodes[a.id].shape.clone();
        Ok(self.push(
            shape,
            data,
            rg,
            Some(Op::NormalizeRows { a: a.id, norms }),
        ))
    }
}

fn check_lengths(op: &'static str, lengths: &[usize], n: usize, l: usize) -> Result<()> {
    if lengths.len() != n {
        return Err(Error::shape(
            op,
            format!("{} lengths for batch of {n}", lengths.len()),
        ));
    }
    for (i, &len) in lengths.iter().enumerate() {
        if len == 0 || len > l {
            return Err(Error::InvalidArgument(format!(
                "{op}: length {len} of batch row {i} outside 1..={l}"
            )));
        }
    }
    Ok(())
}

fn head_dim(op: &'static str, d: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::shape(
            op,
            format!("model dimension {d} not divisible into {n_heads} heads"),
        ));
    }
    Ok(d / n_heads)
}

/// Rotate (or inverse-rotate, for the gradient) element pairs in place.
#[allow(clippy::too_many_arguments)]
fn apply_rotation<S: Scalar>(
    x: &mut [S],
    n: usize,
    l: usize,
    d: usize,
    n_heads: usize,
    cos_tab: &[S],
    sin_tab: &[S],
    inverse: bool,
) {
    let dh = d / n_heads;
    let half = dh / 2;
    for i in 0..n {
        for t in 0..l {
            let base = (i * l + t) * d;
            for a in 0..n_heads {
                for j in 0..half {
                    let cos = cos_tab[t * half + j];
                    let sin = if inverse {
                        -sin_tab[t * half + j]
                    } else {
                        sin_tab[t * half + j]
                    };
                    let i0 = base + a * dh + 2 * j;
                    let (x0, x1) = (x[i0], x[i0 + 1]);
                    x[i0] = x0 * cos - x1 * sin;
                    x[i0 + 1] = x0 * sin + x1 * cos;
                }
            }
        }
    }
}

impl<S: Scalar> Op<S> {
    pub(crate) fn backward(
        &self,
        gout: &[S],
        out_data: &[S],
        nodes: &mut [Node<S>],
    ) -> Result<()> {
        match self {
            Op::Add { a, b } => {
                accumulate(nodes, *a, gout);
                accumulate(nodes, *b, gout);
            }
            Op::Mul { a, b } => {
                let ga: Vec<S> = gout
                    .iter()
                    .zip(&nodes[*b].data)
                    .map(|(&g, &y)| g * y)
                    .collect();
                let gb: Vec<S> = gout
                    .iter()
                    .zip(&nodes[*a].data)
                    .map(|(&g, &x)| g * x)
                    .collect();
                accumulate(nodes, *a, &ga);
                accumulate(nodes, *b, &gb);
            }
            Op::Scale { a, c } => {
                let ga: Vec<S> = gout.iter().map(|&g| g * *c).collect();
                accumulate(nodes, *a, &ga);
            }
            Op::Tanh { a } => {
                let ga: Vec<S> = gout
                    .iter()
                    .zip(out_data)
                    .map(|(&g, &y)| g * (S::one() - y * y))
                    .collect();
                accumulate(nodes, *a, &ga);
            }
            Op::Gelu { a } => {
                let ga: Vec<S> = gout
                    .iter()
                    .zip(&nodes[*a].data)
                    .map(|(&g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                accumulate(nodes, *a, &ga);
            }
            Op::Sum { a } => {
                let ga = vec![gout[0]; nodes[*a].data.len()];
                accumulate(nodes, *a, &ga);
            }
            Op::Mean { a } => {
                let n = nodes[*a].data.len();
                let ga = vec![gout[0] / S::from_usize(n); n];
                accumulate(nodes, *a, &ga);
            }
            Op::L2NormRows { a } => {
                let (rows, cols) = rows_cols(&nodes[*a].shape);
                let x = &nodes[*a].data;
                let mut ga = vec![S::zero(); x.len()];
                for i in 0..rows {
                    let norm = out_data[i];
                    if norm <= S::zero() {
                        return Err(Error::NonFinite(format!(
                            "l2norm_rows gradient: row {i} has zero norm"
                        )));
                    }
                    let scale = gout[i] / norm;
                    for j in 0..cols {
                        ga[i * cols + j] = scale * x[i * cols + j];
                    }
                }
                accumulate(nodes, *a, &ga);
            }
            Op::Matmul { a, b } => {
                let (rows, k) = rows_cols(&nodes[*a].shape);
                let (_, p) = rows_cols(&nodes[*b].shape);
                if nodes[*a].requires_grad {
                    let bt = transpose(&nodes[*b].data, k, p);
                    let ga = matmul_nn(gout, &bt, rows, p, k);
                    accumulate(nodes, *a, &ga);
                }
                if nodes[*b].requires_grad {
                    let gb = matmul_tn(&nodes[*a].data, gout, rows, k, p);
                    accumulate(nodes, *b, &gb);
                }
            }
            Op::MatmulTB { a, b } => {
                let (m, k) = rows_cols(&nodes[*a].shape);
                let (p, _) = rows_cols(&nodes[*b].shape);
                if nodes[*a].requires_grad {
                    let ga = matmul_nn(gout, &nodes[*b].data, m, p, k);
                    accumulate(nodes, *a, &ga);
                }
                if nodes[*b].requires_grad {
                    let gb = matmul_tn(gout, &nodes[*a].data, m, p, k);
                    accumulate(nodes, *b, &gb);
                }
            }
            Op::AddRowBias { a, b } => {
                accumulate(nodes, *a, gout);
                if nodes[*b].requires_grad {
                    let p = nodes[*b].data.len();
                    let rows = gout.len() / p;
                    let mut gb = vec![S::zero(); p];
                    for i in 0..rows {
                        for j in 0..p {
                            gb[j] += gout[i * p + j];
                        }
                    }
                    accumulate(nodes, *b, &gb);
                }
            }
            Op::RmsNormRows { a, gain, inv_rms } => {
                let (rows, d) = rows_cols(&nodes[*a].shape);
                let x = &nodes[*a].data;
                let g = &nodes[*gain].data;
                let inv_d = S::one() / S::from_usize(d);
                let mut ga = vec![S::zero(); x.len()];
                let mut ggain = vec![S::zero(); d];
                for i in 0..rows {
                    let inv = inv_rms[i];
                    let row = &x[i * d..(i + 1) * d];
                    let grow = &gout[i * d..(i + 1) * d];
                    let mut proj = S::zero();
                    for j in 0..d {
                        proj += grow[j] * g[j] * row[j];
                    }
                    let coef = inv * inv * inv * inv_d * proj;
                    for j in 0..d {
                        ga[i * d + j] = inv * g[j] * grow[j] - coef * row[j];
                        ggain[j] += grow[j] * row[j] * inv;
                    }
                }
                accumulate(nodes, *a, &ga);
                accumulate(nodes, *gain, &ggain);
            }
            Op::SoftmaxRows { a } => {
                let (rows, cols) = rows_cols(&nodes[*a].shape);
                let mut ga = vec![S::zero(); gout.len()];
                for i in 0..rows {
                    let p = &out_data[i * cols..(i + 1) * cols];
                    let g = &gout[i * cols..(i + 1) * cols];
                    let mut inner = S::zero();
                    for j in 0..cols {
                        inner += g[j] * p[j];
                    }
                    for j in 0..cols {
                        ga[i * cols + j] = p[j] * (g[j] - inner);
                    }
                }
                accumulate(nodes, *a, &ga);
            }
            Op::LogSoftmaxRows { a } => {
                let (rows, cols) = rows_cols(&nodes[*a].shape);
                let mut ga = vec![S::zero(); gout.len()];
                for i in 0..rows {
                    let y = &out_data[i * cols..(i + 1) * cols];
                    let g = &gout[i * cols..(i + 1) * cols];
                    let mut gsum = S::zero();
                    for &gv in g {
                        gsum += gv;
                    }
                    for j in 0..cols {
                        ga[i * cols + j] = g[j] - y[j].exp() * gsum;
                    }
                }
                accumulate(nodes, *a, &ga);
            }
            Op::Diagonal { a } => {
                let n = nodes[*a].shape[0];
                let mut ga = vec![S::zero(); n * n];
                for i in 0..n {
                    ga[i * n + i] = gout[i];
                }
                accumulate(nodes, *a, &ga);
            }
            Op::Transpose2D { a } => {
                let (rows, cols) = rows_cols(&nodes[*a].shape);
                // gout is [cols, rows]; transposing it back gives d(a).
                let ga = transpose(gout, cols, rows);
                accumulate(nodes, *a, &ga);
            }
            Op::GatherRows { table, ids } => {
                if nodes[*table].requires_grad {
                    let (_, d) = rows_cols(&nodes[*table].shape);
                    let mut gt = vec![S::zero(); nodes[*table].data.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &gout[r * d..(r + 1) * d];
                        let dst = &mut gt[i * d..(i + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    accumulate(nodes, *table, &gt);
                }
            }
            Op::SelectPositions { a, positions } => {
                let shape = &nodes[*a].shape;
                let (l, d) = (shape[1], shape[2]);
                let mut ga = vec![S::zero(); nodes[*a].data.len()];
                for (i, &p) in positions.iter().enumerate() {
                    let base = (i * l + p) * d;
                    ga[base..base + d].copy_from_slice(&gout[i * d..(i + 1) * d]);
                }
                accumulate(nodes, *a, &ga);
            }
            Op::MaskedMeanRows { a, lengths } => {
                let shape = &nodes[*a].shape;
                let (l, d) = (shape[1], shape[2]);
                let mut ga = vec![S::zero(); nodes[*a].data.len()];
                for (i, &len) in lengths.iter().enumerate() {
                    let inv = S::one() / S::from_usize(len);
                    let src = &gout[i * d..(i + 1) * d];
                    for t in 0..len {
                        let dst = &mut ga[(i * l + t) * d..(i * l + t) * d + d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v * inv;
                        }
                    }
                }
                accumulate(nodes, *a, &ga);
            }
            Op::Rope {
                a,
                n_heads,
                cos_tab,
                sin_tab,
            } => {
                let shape = &nodes[*a].shape;
                let (n, l, d) = (shape[0], shape[1], shape[2]);
                let mut ga = gout.to_vec();
                // Rotations are orthogonal, so the gradient is the inverse
                // rotation of the output gradient.
                apply_rotation(&mut ga, n, l, d, *n_heads, cos_tab, sin_tab, true);
                accumulate(nodes, *a, &ga);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                lengths,
                probs,
            } => {
                let shape = &nodes[*q].shape;
                let (n, l, d) = (shape[0], shape[1], shape[2]);
                let h = *n_heads;
                let dh = d / h;
                let scale = S::from_f64(1.0 / (dh as f64).sqrt());
                let qd = &nodes[*q].data;
                let kd = &nodes[*k].data;
                let vd = &nodes[*v].data;
                let mut gq = vec![S::zero(); qd.len()];
                let mut gk = vec![S::zero(); kd.len()];
                let mut gv = vec![S::zero(); vd.len()];
                let mut dp = vec![S::zero(); l];
                let mut ds = vec![S::zero(); l];
                for i in 0..n {
                    let len = lengths[i];
                    for a in 0..h {
                        let col = a * dh;
                        for t in 0..len {
                            let pbase = ((i * h + a) * l + t) * l;
                            let p = &probs[pbase..pbase + t + 1];
                            let grow = &gout[(i * l + t) * d + col..(i * l + t) * d + col + dh];
                            // dV[s] += p[s] * g; dP[s] = g . V[s]
                            for s in 0..=t {
                                let vbase = (i * l + s) * d + col;
                                axpy(p[s], grow, &mut gv[vbase..vbase + dh]);
                                dp[s] = dot(grow, &vd[vbase..vbase + dh]);
                            }
                            // Softmax jacobian: dS = P * (dP - sum(dP * P))
                            let mut inner = S::zero();
                            for s in 0..=t {
                                inner += dp[s] * p[s];
                            }
                            for s in 0..=t {
                                ds[s] = p[s] * (dp[s] - inner) * scale;
                            }
                            // dQ[t] += dS[s] * K[s]; dK[s] += dS[s] * Q[t]
                            let qbase = (i * l + t) * d + col;
                            let qrow = qd[qbase..qbase + dh].to_vec();
                            for s in 0..=t {
                                let kbase = (i * l + s) * d + col;
                                axpy(ds[s], &kd[kbase..kbase + dh], &mut gq[qbase..qbase + dh]);
                                axpy(ds[s], &qrow, &mut gk[kbase..kbase + dh]);
                            }
                        }
                    }
                }
                accumulate(nodes, *q, &gq);
                accumulate(nodes, *k, &gk);
                accumulate(nodes, *v, &gv);
            }
            Op::BmmBroadcastNT { a, b } => {
                let (r, c) = rows_cols(&nodes[*a].shape);
                let bshape = &nodes[*b].shape;
                let (n, l) = (bshape[0], bshape[1]);
                let ad = &nodes[*a].data;
                let bd = &nodes[*b].data;
                let mut ga = vec![S::zero(); ad.len()];
                let mut gb = vec![S::zero(); bd.len()];
                for i in 0..n {
                    for x in 0..r {
                        let arow = &ad[x * c..(x + 1) * c];
                        let garow_base = x * c;
                        for t in 0..l {
                            let g = gout[(i * r + x) * l + t];
                            let bbase = (i * l + t) * c;
                            axpy(g, &bd[bbase..bbase + c], &mut ga[garow_base..garow_base + c]);
                            axpy(g, arow, &mut gb[bbase..bbase + c]);
                        }
                    }
                }
                accumulate(nodes, *a, &ga);
                accumulate(nodes, *b, &gb);
            }
            Op::Bmm { a, b } => {
                let ashape = &nodes[*a].shape;
                let bshape = &nodes[*b].shape;
                let (n, r, l, d) = (ashape[0], ashape[1], ashape[2], bshape[2]);
                let ad = &nodes[*a].data;
                let bd = &nodes[*b].data;
                let mut ga = Vec::with_capacity(ad.len());
                let mut gb = Vec::with_capacity(bd.len());
                for i in 0..n {
                    let g = &gout[i * r * d..(i + 1) * r * d];
                    let bblock = &bd[i * l * d..(i + 1) * l * d];
                    let ablock = &ad[i * r * l..(i + 1) * r * l];
                    let bt = transpose(bblock, l, d);
                    ga.extend_from_slice(&matmul_nn(g, &bt, r, d, l));
                    gb.extend_from_slice(&matmul_tn(ablock, g, r, l, d));
                }
                accumulate(nodes, *a, &ga);
                accumulate(nodes, *b, &gb);
            }
            Op::MaskedSoftmaxLast { a, lengths } => {
                let shape = &nodes[*a].shape;
                let (n, r, l) = (shape[0], shape[1], shape[2]);
                let mut ga = vec![S::zero(); gout.len()];
                for i in 0..n {
                    let len = lengths[i];
                    for row in 0..r {
                        let base = (i * r + row) * l;
                        let p = &out_data[base..base + len];
                        let g = &gout[base..base + len];
                        let mut inner = S::zero();
                        for s in 0..len {
                            inner += g[s] * p[s];
                        }
                        for s in 0..len {
                            ga[base + s] = p[s] * (g[s] - inner);
                        }
                    }
                }
                accumulate(nodes, *a, &ga);
            }
            Op::MeanDim1 { a } => {
                let shape = &nodes[*a].shape;
                let (n, r, d) = (shape[0], shape[1], shape[2]);
                let inv = S::one() / S::from_usize(r);
                let mut ga = vec![S::zero(); nodes[*a].data.len()];
                for i in 0..n {
                    let src = &gout[i * d..(i + 1) * d];
                    for row in 0..r {
                        let dst = &mut ga[(i * r + row) * d..(i * r + row) * d + d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = v * inv;
                        }
                    }
                }
                accumulate(nodes, *a, &ga);
            }
            Op::SliceCols { a } => {
                let (rows, cols) = rows_cols(&nodes[*a].shape);
                let width = gout.len() / rows;
                let mut ga = vec![S::zero(); nodes[*a].data.len()];
                for i in 0..rows {
                    ga[i * cols..i * cols + width]
                        .copy_from_slice(&gout[i * width..(i + 1) * width]);
                }
                accumulate(nodes, *a, &ga);
            }
            Op::NormalizeRows { a, norms } => {
                let (rows, cols) = rows_cols(&nodes[*a].shape);
                let mut ga = vec![S::zero(); gout.len()];
                for i in 0..rows {
                    let y = &out_data[i * cols..(i + 1) * cols];
                    let g = &gout[i * cols..(i + 1) * cols];
                    let inv = S::one() / norms[i];
                    let inner = dot(g, y);
                    for j in 0..cols {
                        ga[i * cols + j] = (g[j] - y[j] * inner) * inv;
                    }
                }
                accumulate(nodes, *a, &ga);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut t = tape();
        let i = t.var(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.var(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut t = tape();
        let a = t.var(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.var(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut t = tape();
        let a = t.var(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.var(&[2, 2], vec![0.0; 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut t = tape();
        let a = t.var(&[1, 2], vec![0.0, 0.0]).unwrap();
        let s = t.softmax_rows(a).unwrap();
        assert_eq!(t.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut t = tape();
        let a = t.var(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax_rows(a).unwrap();
        let out = t.data(s);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_known_two_logit_row() {
        let mut t = tape();
        let a = t.var(&[1, 2], vec![1.0, 0.0]).unwrap();
        let s = t.softmax_rows(a).unwrap();
        let e = std::f64::consts::E;
        let expect = [e / (e + 1.0), 1.0 / (e + 1.0)];
        for (got, want) in t.data(s).iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((t.data(s)[0] - 0.7311).abs() < 1e-4);
        assert!((t.data(s)[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = tape();
        let a = t
            .var(&[3, 4], (0..12).map(|i| (i as f64) * 0.7 - 3.0).collect())
            .unwrap();
        let s = t.softmax_rows(a).unwrap();
        for i in 0..3 {
            let row_sum: f64 = t.data(s)[i * 4..(i + 1) * 4].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2norm_three_four_five() {
        let mut t = tape();
        let a = t.var(&[1, 2], vec![3.0, 4.0]).unwrap();
        let n = t.l2norm_rows(a).unwrap();
        assert_eq!(t.data(n), &[5.0]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = tape();
        let a = t.var(&[2, 3], vec![0.5; 6]).unwrap();
        let s = t.sum(a).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn mean_of_constant_pair() {
        let mut t = tape();
        let a = t.var(&[2], vec![2.0, 2.0]).unwrap();
        let m = t.mean(a).unwrap();
        assert_eq!(t.scalar_value(m).unwrap(), 2.0);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut t = tape();
        let a = t.var(&[2], vec![0.0; 2]).unwrap();
        let b = t.var(&[3], vec![0.0; 3]).unwrap();
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn normalize_three_four() {
        let mut t = tape();
        let a = t.var(&[1, 2], vec![3.0, 4.0]).unwrap();
        let n = t.normalize_rows(a).unwrap();
        assert_eq!(t.data(n), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_zero_row_reports_index() {
        let mut t = tape();
        let a = t.var(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let err = t.normalize_rows(a).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut t = tape();
        let a = t.var(&[1, 3], vec![0.3, -1.2, 2.2]).unwrap();
        let n1 = t.normalize_rows(a).unwrap();
        let n2 = t.normalize_rows(n1).unwrap();
        for (x, y) in t.data(n1).iter().zip(t.data(n2)) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn diagonal_extracts_main_diagonal() {
        let mut t = tape();
        let a = t.var(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = t.diagonal(a).unwrap();
        assert_eq!(t.data(d), &[1.0, 4.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let mut t = tape();
        let a = t.var(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let tr = t.transpose2d(a).unwrap();
        assert_eq!(t.shape(tr), &[3, 2]);
        let back = t.transpose2d(tr).unwrap();
        assert_eq!(t.data(back), t.data(a));
    }

    #[test]
    fn masked_mean_ignores_padding_garbage() {
        let mut t = tape();
        let a = t
            .var(&[1, 2, 2], vec![2.0, 2.0, 999.0, -999.0])
            .unwrap();
        let m = t.masked_mean_rows(a, &[1]).unwrap();
        assert_eq!(t.data(m), &[2.0, 2.0]);
    }

    #[test]
    fn masked_mean_averages_real_positions() {
        let mut t = tape();
        let a = t.var(&[1, 2, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        let m = t.masked_mean_rows(a, &[2]).unwrap();
        assert_eq!(t.data(m), &[2.0, 2.0]);
    }

    #[test]
    fn select_positions_picks_rows() {
        let mut t = tape();
        let a = t
            .var(&[2, 3, 2], (0..12).map(|v| v as f64).collect())
            .unwrap();
        let s = t.select_positions(a, &[2, 0]).unwrap();
        assert_eq!(t.data(s), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn slice_cols_keeps_prefix() {
        let mut t = tape();
        let a = t.var(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let s = t.slice_cols(a, 2).unwrap();
        assert_eq!(t.data(s), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn causal_attention_single_position_returns_value() {
        // With one position the softmax is trivially 1, so out = v.
        let mut t = tape();
        let q = t.var(&[1, 1, 2], vec![0.3, -0.7]).unwrap();
        let k = t.var(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let v = t.var(&[1, 1, 2], vec![5.0, -3.0]).unwrap();
        let o = t.causal_attention(q, k, v, 1, &[1]).unwrap();
        assert_eq!(t.data(o), &[5.0, -3.0]);
    }

    #[test]
    fn causal_attention_masks_padded_positions() {
        let mut t = tape();
        let q = t.var(&[1, 2, 2], vec![0.1; 4]).unwrap();
        let k = t.var(&[1, 2, 2], vec![0.2; 4]).unwrap();
        let v = t.var(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let o = t.causal_attention(q, k, v, 1, &[1]).unwrap();
        // Row 1 is padding: output zeros.
        assert_eq!(t.data(o), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn rope_leaves_position_zero_unchanged() {
        let mut t = tape();
        let a = t.var(&[1, 2, 4], vec![1.0; 8]).unwrap();
        let r = t.rope(a, 1, 10000.0).unwrap();
        assert_eq!(&t.data(r)[..4], &[1.0; 4]);
        assert_ne!(&t.data(r)[4..], &[1.0; 4]);
    }

    #[test]
    fn rope_preserves_norms() {
        let mut t = tape();
        let a = t
            .var(&[1, 3, 4], (0..12).map(|v| v as f64 * 0.25 - 1.0).collect())
            .unwrap();
        let r = t.rope(a, 2, 10000.0).unwrap();
        for pos in 0..3 {
            let x = &t.data(a)[pos * 4..(pos + 1) * 4];
            let y = &t.data(r)[pos * 4..(pos + 1) * 4];
            let nx: f64 = x.iter().map(|v| v * v).sum();
            let ny: f64 = y.iter().map(|v| v * v).sum();
            assert!((nx - ny).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_over_valid_region() {
        let mut t = tape();
        let a = t
            .var(&[1, 2, 3], vec![0.5, 1.0, 9.0, -1.0, 2.0, 9.0])
            .unwrap();
        let s = t.masked_softmax_last(a, &[2]).unwrap();
        let d = t.data(s);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
        assert!((d[3] + d[4] - 1.0).abs() < 1e-12);
        assert_eq!(d[5], 0.0);
    }

    #[test]
    fn bmm_shapes_and_values() {
        let mut t = tape();
        let a = t.var(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.var(&[1, 2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let c = t.bmm(a, b).unwrap();
        assert_eq!(t.shape(c), &[1, 2, 3]);
        assert_eq!(t.data(c), t.data(b));
    }

    #[test]
    fn bmm_broadcast_nt_matches_manual_dots() {
        let mut t = tape();
        let a = t.var(&[2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let b = t
            .var(&[1, 2, 2], vec![3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let c = t.bmm_broadcast_nt(a, b).unwrap();
        assert_eq!(t.shape(c), &[1, 2, 2]);
        assert_eq!(t.data(c), &[11.0, 17.0, -1.0, -2.0]);
    }

    #[test]
    fn scale_is_scalar_broadcast() {
        let mut t = tape();
        let a = t.var(&[2], vec![1.0, 2.0]).unwrap();
        let s = t.scale(a, -2.0).unwrap();
        assert_eq!(t.data(s), &[-2.0, -4.0]);
    }
}
