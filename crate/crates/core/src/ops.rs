//! Fused convolution and normalisation ops with hand-written CPU kernels.
//! Candle's generic backward for broadcasts, slices and grouped reductions
//! dominates the cost of a small convolutional network; these ops compute
//! their gradients directly.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{shape_err, Result};

pub trait Float: WithDType + Default + std::ops::AddAssign {
    /// `C = A B + beta C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the slices cover the strided extents asserted above
                // for the packed layouts used in this module.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

fn host_vec<T: Float>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.contiguous()?.flatten_all()?.to_vec1::<T>()
}

pub fn conv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: conv_output_size(h, k, stride, pad),
            wo: conv_output_size(w, k, stride, pad),
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap of one
    /// image; column rows are ordered `(c, ki, kj)`.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let hw = self.cols();
        for ch in 0..self.c {
            let in_base = ch * self.h * self.w;
            for ki in 0..k {
                for kj in 0..k {
                    let col_base = (ch * k * k + ki * k + kj) * hw;
                    for oy in 0..self.ho {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let row = in_base + iy as usize * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < self.w as isize {
                                f(col_base + oy * self.wo + ox, row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Float>(&self, x: &[T], cols: &mut [T]) {
        cols.fill(T::default());
        self.for_each(|ci, xi| cols[ci] = x[xi]);
    }

    fn col2im<T: Float>(&self, cols: &[T], x: &mut [T]) {
        self.for_each(|ci, xi| x[xi] += cols[ci]);
    }
}

/// Convolution `(x, weight, bias)` with square kernels.
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl Conv2dOp {
    fn geom(&self, x: &[usize], w: &[usize]) -> ConvGeom {
        ConvGeom::new(x[1], x[2], x[3], w[2], self.stride, self.pad)
    }

    fn fwd<T: Float>(&self, x: &[T], w: &[T], b: &[T], batch: usize, cout: usize, g: &ConvGeom) -> Vec<T> {
        let (kk, hw) = (g.rows(), g.cols());
        let in_len = g.c * g.h * g.w;
        let mut cols = vec![T::default(); kk * hw];
        let mut out = vec![T::default(); batch * cout * hw];
        for (n, o) in out.chunks_mut(cout * hw).enumerate() {
            g.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
            for (co, row) in o.chunks_mut(hw).enumerate() {
                row.fill(b[co]);
            }
            T::gemm(cout, kk, hw, w, kk as isize, 1, &cols, hw as isize, 1, T::from_f64(1.0), o, hw as isize, 1);
        }
        out
    }

    fn bwd<T: Float>(&self, x: &Tensor, w: &Tensor, grad: &Tensor) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let (batch, _, _, _) = x.dims4()?;
        let cout = w.dim(0)?;
        let g = self.geom(x.dims(), w.dims());
        let (kk, hw) = (g.rows(), g.cols());
        let in_len = g.c * g.h * g.w;
        let xv = host_vec::<T>(x)?;
        let wv = host_vec::<T>(w)?;
        let gv = host_vec::<T>(grad)?;
        let mut dx = vec![T::default(); xv.len()];
        let mut dw = vec![T::default(); wv.len()];
        let mut db = vec![0f64; cout];
        let mut cols = vec![T::default(); kk * hw];
        let mut dcols = vec![T::default(); kk * hw];
        for n in 0..batch {
            let gb = &gv[n * cout * hw..(n + 1) * cout * hw];
            for (co, row) in gb.chunks(hw).enumerate() {
                db[co] += row.iter().map(|v| v.to_f64()).sum::<f64>();
            }
            g.im2col(&xv[n * in_len..(n + 1) * in_len], &mut cols);
            // dW += G cols^T
            T::gemm(cout, hw, kk, gb, hw as isize, 1, &cols, 1, hw as isize, T::from_f64(1.0), &mut dw, kk as isize, 1);
            // dcols = W^T G
            T::gemm(kk, cout, hw, &wv, 1, kk as isize, gb, hw as isize, 1, T::from_f64(0.0), &mut dcols, hw as isize, 1);
            g.col2im(&dcols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
        let dev = x.device();
        Ok((
            Tensor::from_vec(dx, x.shape(), dev)?,
            Tensor::from_vec(dw, w.shape(), dev)?,
            Tensor::from_vec(db.into_iter().map(T::from_f64).collect::<Vec<T>>(), cout, dev)?,
        ))
    }
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-fused"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geom(l1.dims(), l2.dims());
        let (batch, cout) = (l1.dims()[0], l2.dims()[0]);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(self.fwd(
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                contiguous(b, l3)?,
                batch,
                cout,
                &g,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(self.fwd(
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                contiguous(b, l3)?,
                batch,
                cout,
                &g,
            )),
            _ => candle_core::bail!("conv2d supports matching f32 or f64 inputs only"),
        };
        Ok((out, Shape::from((batch, cout, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dw, db) = match x.dtype() {
            DType::F32 => self.bwd::<f32>(x, w, grad)?,
            DType::F64 => self.bwd::<f64>(x, w, grad)?,
            dt => candle_core::bail!("conv2d backward does not support {dt:?}"),
        };
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

/// `x: (B, C, H, W)`, `weight: (Cout, C, k, k)`, `bias: (Cout,)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (cout, cin, kh, kw) = weight.dims4()?;
    if c != cin || kh != kw || bias.dims() != [cout] {
        return Err(shape_err!(
            "conv weight {:?} / bias {:?} incompatible with input {:?}",
            weight.dims(),
            bias.dims(),
            x.dims()
        ));
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err!("input {h}x{w} too small for kernel {kh} with padding {pad}"));
    }
    Ok(x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, Conv2dOp { stride, pad })?)
}

fn row_stats<T: Float>(row: &[T], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Group normalisation with per-channel affine `(x, gamma, beta)`.
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

impl GroupNormOp {
    /// `(channels per group, spatial size)` for a `(B, C, H, W)` input.
    fn split(&self, dims: &[usize]) -> (usize, usize) {
        (dims[1] / self.groups, dims[2] * dims[3])
    }

    fn fwd<T: Float>(&self, x: &[T], gamma: &[T], beta: &[T], dims: &[usize]) -> Vec<T> {
        let (cpg, hw) = self.split(dims);
        let group_len = cpg * hw;
        let mut out = vec![T::default(); x.len()];
        for (gi, (row, o)) in x.chunks(group_len).zip(out.chunks_mut(group_len)).enumerate() {
            let (mean, inv) = row_stats(row, self.eps);
            let ch0 = (gi % self.groups) * cpg;
            for (j, (v, y)) in row.iter().zip(o.iter_mut()).enumerate() {
                let ch = ch0 + j / hw;
                *y = T::from_f64((v.to_f64() - mean) * inv * gamma[ch].to_f64() + beta[ch].to_f64());
            }
        }
        out
    }

    fn bwd<T: Float>(&self, x: &Tensor, gamma: &Tensor, grad: &Tensor) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let dims = x.dims().to_vec();
        let c = dims[1];
        let (cpg, hw) = self.split(&dims);
        let group_len = cpg * hw;
        let xv = host_vec::<T>(x)?;
        let gam = host_vec::<T>(gamma)?;
        let gv = host_vec::<T>(grad)?;
        let mut dx = vec![T::default(); xv.len()];
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        let mut xhat = vec![0f64; group_len];
        let mut dxhat = vec![0f64; group_len];
        for (gi, ((row, g), out)) in xv
            .chunks(group_len)
            .zip(gv.chunks(group_len))
            .zip(dx.chunks_mut(group_len))
            .enumerate()
        {
            let (mean, inv) = row_stats(row, self.eps);
            let ch0 = (gi % self.groups) * cpg;
            let (mut m1, mut m2) = (0.0, 0.0);
            for j in 0..group_len {
                let ch = ch0 + j / hw;
                let gj = g[j].to_f64();
                xhat[j] = (row[j].to_f64() - mean) * inv;
                dgamma[ch] += gj * xhat[j];
                dbeta[ch] += gj;
                dxhat[j] = gj * gam[ch].to_f64();
                m1 += dxhat[j];
                m2 += dxhat[j] * xhat[j];
            }
            let n = group_len as f64;
            let (m1, m2) = (m1 / n, m2 / n);
            for j in 0..group_len {
                out[j] = T::from_f64(inv * (dxhat[j] - m1 - xhat[j] * m2));
            }
        }
        let dev = x.device();
        let to_t = |v: Vec<f64>| -> candle_core::Result<Tensor> {
            Tensor::from_vec(v.into_iter().map(T::from_f64).collect::<Vec<T>>(), c, dev)
        };
        Ok((Tensor::from_vec(dx, x.shape(), dev)?, to_t(dgamma)?, to_t(dbeta)?))
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm-fused"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.dims();
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(self.fwd(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, dims))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(self.fwd(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, dims))
            }
            _ => candle_core::bail!("group norm supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => self.bwd::<f32>(x, gamma, grad)?,
            DType::F64 => self.bwd::<f64>(x, gamma, grad)?,
            dt => candle_core::bail!("group norm backward does not support {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// `x: (B, C, H, W)`; statistics over each group of `C / groups` channels.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if groups == 0 || c % groups != 0 || gamma.dims() != [c] || beta.dims() != [c] {
        return Err(shape_err!("group norm with {groups} groups incompatible with {c} channels"));
    }
    Ok(x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormOp { groups, eps })?)
}

/// Zero-mean, unit-variance normalisation over the last axis.
struct NormalizeLast {
    eps: f64,
}

struct NormalizeLastBwd {
    eps: f64,
}

fn normalize_rows<T: Float>(x: &[T], n: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let (mean, inv) = row_stats(row, eps);
        out.extend(row.iter().map(|v| T::from_f64((v.to_f64() - mean) * inv)));
    }
    out
}

/// `dx = inv * (dy - mean(dy) - y * mean(dy * y))` per row.
fn normalize_rows_bwd<T: Float>(x: &[T], dy: &[T], n: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let nf = n as f64;
    for (row, g) in x.chunks(n).zip(dy.chunks(n)) {
        let (mean, inv) = row_stats(row, eps);
        let y: Vec<f64> = row.iter().map(|v| (v.to_f64() - mean) * inv).collect();
        let g_mean = g.iter().map(|v| v.to_f64()).sum::<f64>() / nf;
        let gy_mean = g.iter().zip(&y).map(|(a, b)| a.to_f64() * b).sum::<f64>() / nf;
        out.extend(
            g.iter()
                .zip(&y)
                .map(|(gi, yi)| T::from_f64(inv * (gi.to_f64() - g_mean - yi * gy_mean))),
        );
    }
    out
}

impl CustomOp1 for NormalizeLast {
    fn name(&self) -> &'static str {
        "normalize-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *l.dims().last().unwrap_or(&1);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(normalize_rows(contiguous(v, l)?, n, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(normalize_rows(contiguous(v, l)?, n, self.eps)),
            _ => candle_core::bail!("normalisation supports f32 and f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &NormalizeLastBwd { eps: self.eps })?))
    }
}

impl CustomOp2 for NormalizeLastBwd {
    fn name(&self) -> &'static str {
        "normalize-last-bwd"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *l1.dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(normalize_rows_bwd(contiguous(x, l1)?, contiguous(g, l2)?, n, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(normalize_rows_bwd(contiguous(x, l1)?, contiguous(g, l2)?, n, self.eps))
            }
            _ => candle_core::bail!("normalisation backward supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Normalises every row along the last axis to zero mean and unit
/// variance (population variance plus `eps`).
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(NormalizeLast { eps })?)
}
