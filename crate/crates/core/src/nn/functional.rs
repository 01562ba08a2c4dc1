//! Stateless layer kernels and their vector-Jacobian products.
//!
//! Forward kernels accumulate every output element in a fixed order
//! (input channel, kernel row, kernel column for convolutions; feature
//! index for dense layers) so results do not depend on thread count and
//! match a naive loop bit for bit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped below by this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Allowed deviation of a probability row sum from 1.
pub const NORMALIZATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = input else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be NCHW, got {input:?}"),
            ));
        };
        let [o, ci, kh, kw] = kernel else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be OIHW, got {kernel:?}"),
            ));
        };
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("input {input:?} has {c} channels but kernel {kernel:?} expects {ci}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d: stride must be positive".into(),
            ));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if *kh > ph || *kw > pw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(Self {
            n: *n,
            c: *c,
            h: *h,
            w: *w,
            o: *o,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.o * self.p()
    }

    /// Unfolds one sample into a `[K, P]` matrix; padded taps are zero.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let p = self.p();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatters a `[K, P]` column gradient back onto one input sample.
    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let p = self.p();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        let src = &cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight fixed interleaved partial sums.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// 2-D cross-correlation of an NCHW input with an OIHW kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_forward(input, kernel, None, stride, padding)
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} outputs", b.shape(), g.o),
            ));
        }
    }
    let (k, p) = (g.k(), g.p());
    let w = kernel.data();
    let mut out = vec![0.0f32; g.n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(input.data().par_chunks(g.in_len()))
        .for_each_init(
            || vec![0.0f32; k * p],
            |cols, (y, x)| {
                g.im2col(x, cols);
                for o in 0..g.o {
                    let yrow = &mut y[o * p..(o + 1) * p];
                    let wrow = &w[o * k..(o + 1) * k];
                    for (ki, &wv) in wrow.iter().enumerate() {
                        axpy(wv, &cols[ki * p..(ki + 1) * p], yrow);
                    }
                    if let Some(b) = bias {
                        let bv = b.data()[o];
                        yrow.iter_mut().for_each(|v| *v += bv);
                    }
                }
            },
        );
    Tensor::new([g.n, g.o, g.oh, g.ow], out)
}

/// Gradients of a convolution; each output is computed only when requested.
pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    upstream: &Tensor,
    stride: usize,
    pad: usize,
    want: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    if upstream.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream {:?}", upstream.shape()),
        ));
    }
    let (want_x, want_w, want_b) = want;
    let (k, p) = (g.k(), g.p());
    let w = kernel.data();
    let dy = upstream.data();

    // (input gradient, weight gradient) of each sample.
    type Partials = (Option<Vec<f32>>, Option<Vec<f32>>);
    let per_sample: Vec<Partials> = (0..g.n)
        .into_par_iter()
        .map_init(
            || (vec![0.0f32; k * p], vec![0.0f32; k * p]),
            |(cols, dcols), s| {
                let dys = &dy[s * g.out_len()..(s + 1) * g.out_len()];
                let dx = want_x.then(|| {
                    dcols.fill(0.0);
                    for o in 0..g.o {
                        let dyrow = &dys[o * p..(o + 1) * p];
                        for ki in 0..k {
                            axpy(w[o * k + ki], dyrow, &mut dcols[ki * p..(ki + 1) * p]);
                        }
                    }
                    let mut dx = vec![0.0f32; g.in_len()];
                    g.col2im(dcols, &mut dx);
                    dx
                });
                let dw = want_w.then(|| {
                    g.im2col(&input.data()[s * g.in_len()..(s + 1) * g.in_len()], cols);
                    let mut dw = vec![0.0f32; g.o * k];
                    for o in 0..g.o {
                        let dyrow = &dys[o * p..(o + 1) * p];
                        for ki in 0..k {
                            dw[o * k + ki] = dot(dyrow, &cols[ki * p..(ki + 1) * p]);
                        }
                    }
                    dw
                });
                (dx, dw)
            },
        )
        .collect();

    let input_grad = if want_x {
        let mut data = Vec::with_capacity(g.n * g.in_len());
        for (dx, _) in &per_sample {
            data.extend_from_slice(dx.as_ref().expect("dx computed"));
        }
        Some(Tensor::new(input.shape(), data)?)
    } else {
        None
    };
    let kernel_grad = if want_w {
        let mut acc = vec![0.0f32; g.o * k];
        for (_, dw) in &per_sample {
            for (a, v) in acc.iter_mut().zip(dw.as_ref().expect("dw computed")) {
                *a += *v;
            }
        }
        Some(Tensor::new(kernel.shape(), acc)?)
    } else {
        None
    };
    let bias_grad = want_b.then(|| {
        let mut db = vec![0.0f32; g.o];
        for s in 0..g.n {
            for (o, d) in db.iter_mut().enumerate() {
                let base = s * g.out_len() + o * p;
                *d += dy[base..base + p].iter().sum::<f32>();
            }
        }
        Tensor::from_vec(db)
    });
    Ok(ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    })
}

/// Non-overlapping max pooling; returns the output and, per output
/// element, the flat input index of the first maximal element.
pub(crate) fn maxpool2d_forward(input: &Tensor, window: usize) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::shape(
            "maxpool2d",
            format!("input must be NCHW, got {:?}", input.shape()),
        ));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial dims {h}x{w} not divisible by window {window}"),
        ));
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, arg))
}

/// Max pooling with a square non-overlapping window.
pub fn maxpool2d(input: &Tensor, window: usize) -> Result<Tensor> {
    maxpool2d_forward(input, window).map(|(t, _)| t)
}

pub(crate) fn maxpool2d_backward(
    input_shape: &[usize],
    argmax: &[u32],
    upstream: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != upstream.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            "upstream/argmax length mismatch",
        ));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(upstream.data()) {
        d[i as usize] += g;
    }
    Ok(dx)
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// `a · b` for `[m, k] × [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0f32; m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        for kk in 0..k {
            axpy(a.data()[i * k + kk], &b.data()[kk * n..(kk + 1) * n], row);
        }
    }
    Tensor::new([m, n], out)
}

/// Returns `(da, db)` for `c = a · b` given `dc`.
pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    dc: &Tensor,
    want: (bool, bool),
) -> (Option<Tensor>, Option<Tensor>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let da = want.0.then(|| {
        let mut da = vec![0.0f32; m * k];
        for i in 0..m {
            let dcrow = &dc.data()[i * n..(i + 1) * n];
            for kk in 0..k {
                da[i * k + kk] = dot(dcrow, &b.data()[kk * n..(kk + 1) * n]);
            }
        }
        Tensor::new([m, k], da).expect("shape")
    });
    let db = want.1.then(|| {
        let mut db = vec![0.0f32; k * n];
        for i in 0..m {
            let dcrow = &dc.data()[i * n..(i + 1) * n];
            for kk in 0..k {
                axpy(a.data()[i * k + kk], dcrow, &mut db[kk * n..(kk + 1) * n]);
            }
        }
        Tensor::new([k, n], db).expect("shape")
    });
    (da, db)
}

/// Fully connected layer: `input · weight + bias` with the bias broadcast over rows.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, f) = matrix_dims("dense", input)?;
    let (f2, g) = matrix_dims("dense", weight)?;
    if f != f2 {
        return Err(Error::shape(
            "dense",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        ));
    }
    if bias.shape() != [g] {
        return Err(Error::shape(
            "dense",
            format!("bias {:?} for {g} outputs", bias.shape()),
        ));
    }
    let mut out = matmul(input, weight)?;
    for row in out.data_mut().chunks_mut(g) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += *b;
        }
    }
    Ok(out)
}

fn rows(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let (n, c) = matrix_dims(op, t)?;
    t.check_finite(op)?;
    Ok((n, c))
}

/// Row-wise log-softmax computed in f64 with max subtraction.
pub(crate) fn log_softmax_rows(logits: &[f32], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
        out.extend(row.iter().map(|&v| v as f64 - lse));
    }
    out
}

/// Row-wise softmax of an `N × C` logit matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = rows("softmax", logits)?;
    let probs = log_softmax_rows(logits.data(), c)
        .into_iter()
        .map(|l| l.exp() as f32)
        .collect();
    Tensor::new(logits.shape(), probs)
}

/// `dL/dlogits` for `p = softmax(logits)` given `dL/dp`.
pub(crate) fn softmax_backward(probs: &Tensor, upstream: &Tensor) -> Tensor {
    let c = probs.shape()[1];
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.data().chunks(c).zip(upstream.data().chunks(c)) {
        let inner: f32 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - inner)));
    }
    Tensor::new(probs.shape(), out).expect("shape")
}

fn check_labels(op: &'static str, n: usize, c: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(
            op,
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "{op}: label {bad} out of range [0, {c})"
        )));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let (n, c) = rows("cross_entropy", logits)?;
    check_labels("cross_entropy", n, c, labels)?;
    let ls = log_softmax_rows(logits.data(), c);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -ls[i * c + l])
        .sum();
    Ok((total / n as f64) as f32)
}

pub(crate) fn cross_entropy_backward(logits: &Tensor, labels: &[usize], upstream: f32) -> Tensor {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let ls = log_softmax_rows(logits.data(), c);
    let scale = upstream as f64 / n as f64;
    let mut out: Vec<f32> = ls.iter().map(|l| (l.exp() * scale) as f32).collect();
    for (i, &l) in labels.iter().enumerate() {
        out[i * c + l] = ((ls[i * c + l].exp() - 1.0) * scale) as f32;
    }
    Tensor::new(logits.shape(), out).expect("shape")
}

/// Sum over the batch of `logits[i, labels[i]]`.
pub(crate) fn select_sum(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let (n, c) = matrix_dims("select_sum", logits)?;
    check_labels("select_sum", n, c, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| logits.data()[i * c + l])
        .sum())
}

/// Mean over the batch of `Σ_c p_c (ln p_c − ln q_c)` for probability rows.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f32> {
    let (n, c) = rows("kl_divergence", p)?;
    rows("kl_divergence", q)?;
    if p.shape() != q.shape() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", p.shape(), q.shape()),
        ));
    }
    for (name, t) in [("p", p), ("q", q)] {
        for (i, row) in t.data().chunks(c).enumerate() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL || row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "kl_divergence: row {i} of {name} is not a distribution (sum {s})"
                )));
            }
        }
    }
    let mut total = 0.0f64;
    for (pr, qr) in p.data().chunks(c).zip(q.data().chunks(c)) {
        for (&pi, &qi) in pr.iter().zip(qr) {
            if pi > 0.0 {
                let (pi, qi) = (pi as f64, (qi as f64).max(PROB_FLOOR));
                total += pi * (pi.ln() - qi.ln());
            }
        }
    }
    Ok((total / n as f64) as f32)
}

/// KL(softmax(a) ∥ softmax(b)) averaged over rows, from logits.
pub fn kl_from_logits(a: &Tensor, b: &Tensor) -> Result<f32> {
    let (n, c) = rows("kl_from_logits", a)?;
    rows("kl_from_logits", b)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "kl_from_logits",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (la, lb) = (log_softmax_rows(a.data(), c), log_softmax_rows(b.data(), c));
    let total: f64 = la.iter().zip(&lb).map(|(x, y)| x.exp() * (x - y)).sum();
    Ok((total / n as f64) as f32)
}

pub(crate) fn kl_from_logits_backward(a: &Tensor, b: &Tensor, upstream: f32) -> (Tensor, Tensor) {
    let (n, c) = (a.shape()[0], a.shape()[1]);
    let (la, lb) = (log_softmax_rows(a.data(), c), log_softmax_rows(b.data(), c));
    let scale = upstream as f64 / n as f64;
    let mut da = Vec::with_capacity(a.len());
    let mut db = Vec::with_capacity(b.len());
    for (ra, rb) in la.chunks(c).zip(lb.chunks(c)) {
        let row_kl: f64 = ra.iter().zip(rb).map(|(x, y)| x.exp() * (x - y)).sum();
        for (x, y) in ra.iter().zip(rb) {
            let (p, q) = (x.exp(), y.exp());
            da.push((scale * p * ((x - y) - row_kl)) as f32);
            db.push((scale * (q - p)) as f32);
        }
    }
    (
        Tensor::new(a.shape(), da).expect("shape"),
        Tensor::new(b.shape(), db).expect("shape"),
    )
}
