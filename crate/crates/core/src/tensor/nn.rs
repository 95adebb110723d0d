//! Fused neural-network operations with hand-written backward rules.
//!
//! Spatial tensors are laid out `[batch, channel, spatial...]` with one to
//! three spatial axes. Kernels parallelize over disjoint output planes, so
//! results do not depend on the thread count.

use std::rc::Rc;

use rayon::prelude::*;

use super::{numel_of, Tensor};
use crate::error::{Error, Result};

/// Spatial extents padded to (depth, height, width).
fn dhw(spatial: &[usize]) -> Result<[usize; 3]> {
    match *spatial {
        [w] => Ok([1, 1, w]),
        [h, w] => Ok([1, h, w]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(Error::Dimension(format!(
            "expected 1 to 3 spatial axes, got {}",
            spatial.len()
        ))),
    }
}

fn pad3(rank: usize, padding: usize) -> [usize; 3] {
    match rank {
        1 => [0, 0, padding],
        2 => [0, padding, padding],
        _ => [padding, padding, padding],
    }
}

/// Largest im2col buffer (f64 elements per batch item) for the GEMM path.
const IM2COL_LIMIT: usize = 1 << 22;

struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    ker: [usize; 3],
    out: [usize; 3],
    pad: [usize; 3],
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }
    fn ker_vol(&self) -> usize {
        self.ker.iter().product()
    }

    /// Small column buffers go through im2col + GEMM; large volumes use
    /// the direct kernels.
    fn use_gemm(&self) -> bool {
        self.cin * self.ker_vol() * self.out_plane() <= IM2COL_LIMIT
    }

    /// Output index range along one axis for which `o + k - pad` lands inside the input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let p = self.pad[axis];
        let lo = p.saturating_sub(k);
        let hi = (self.inp[axis] + p).saturating_sub(k).min(self.out[axis]);
        (lo, hi.max(lo))
    }
}

/// Zero-padded, stride-1 cross-correlation.
///
/// `x`: `[B, Cin, S...]`, `kernel`: `[Cout, Cin, K...]`, `bias`: `[Cout]`.
pub fn conv(x: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let srank = x
        .rank()
        .checked_sub(2)
        .filter(|r| (1..=3).contains(r))
        .ok_or_else(|| {
            Error::Dimension(format!(
                "conv input must be [B, C, S...], got {:?}",
                x.shape()
            ))
        })?;
    if kernel.rank() != srank + 2 {
        return Err(Error::Dimension(format!(
            "kernel rank {} does not match input spatial rank {}",
            kernel.rank(),
            srank
        )));
    }
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let (cout, kcin) = (kernel.shape()[0], kernel.shape()[1]);
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "input has {cin} channels, kernel expects {kcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Dimension(format!(
            "bias shape {:?}, expected [{cout}]",
            bias.shape()
        )));
    }
    let inp = dhw(&x.shape()[2..])?;
    let ker = dhw(&kernel.shape()[2..])?;
    let pad = pad3(srank, padding);
    let mut out = [0usize; 3];
    for a in 0..3 {
        let span = inp[a] + 2 * pad[a];
        if span < ker[a] {
            return Err(Error::Dimension(format!(
                "kernel extent {} exceeds padded input {}",
                ker[a], span
            )));
        }
        out[a] = span - ker[a] + 1;
    }
    let g = Rc::new(ConvGeom {
        batch,
        cin,
        cout,
        inp,
        ker,
        out,
        pad,
    });
    let out_plane = g.out_plane();
    let _ = out_plane;
    let data = if g.use_gemm() {
        conv_forward_gemm(&g, x.data(), kernel.data(), bias.data())
    } else {
        conv_forward_direct(&g, x.data(), kernel.data(), bias.data())
    };
    let mut shape = vec![batch, cout];
    shape.extend_from_slice(&out[3 - srank..]);
    let (xc, kc) = (x.clone(), kernel.clone());
    let need_bias = bias.requires_grad();
    Ok(Tensor::from_op(
        "conv",
        data,
        shape,
        &[x, kernel, bias],
        move |grad| {
            let g = &*g;
            let gemm = g.use_gemm();
            let gx = xc.requires_grad().then(|| {
                if gemm {
                    conv_grad_input_gemm(g, grad, kc.data())
                } else {
                    conv_grad_input(g, grad, kc.data())
                }
            });
            let gk = kc.requires_grad().then(|| {
                if gemm {
                    conv_grad_kernel_gemm(g, grad, xc.data())
                } else {
                    conv_grad_kernel(g, grad, xc.data())
                }
            });
            let gb = need_bias.then(|| {
                (0..g.cout)
                    .map(|o| {
                        (0..g.batch)
                            .map(|b| {
                                grad[(b * g.cout + o) * g.out_plane()..][..g.out_plane()]
                                    .iter()
                                    .sum::<f64>()
                            })
                            .sum()
                    })
                    .collect()
            });
            vec![gx, gk, gb]
        },
    ))
}

/// plane[z,y,x] += Σ_k w[k] · src[z+kz-pd, y+ky-ph, x+kx-pw]
fn accumulate_correlation(g: &ConvGeom, src: &[f64], w: &[f64], plane: &mut [f64]) {
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let [pd, ph, pw] = g.pad;
    let [kd, kh, kw] = g.ker;
    for kz in 0..kd {
        let (z0, z1) = g.valid(0, kz);
        for ky in 0..kh {
            let (y0, y1) = g.valid(1, ky);
            for kx in 0..kw {
                let wv = w[(kz * kh + ky) * kw + kx];
                if wv == 0.0 {
                    continue;
                }
                let (x0, x1) = g.valid(2, kx);
                for z in z0..z1 {
                    let iz = z + kz - pd;
                    for y in y0..y1 {
                        let iy = y + ky - ph;
                        let orow = &mut plane[(z * oh + y) * ow + x0..(z * oh + y) * ow + x1];
                        let irow = &src[(iz * ih + iy) * iw + x0 + kx - pw..];
                        orow.iter_mut().zip(irow).for_each(|(o, i)| *o += wv * i);
                    }
                }
            }
        }
    }
}

fn conv_forward_direct(g: &ConvGeom, xd: &[f64], kd: &[f64], bd: &[f64]) -> Vec<f64> {
    let out_plane = g.out_plane();
    let mut data = vec![0.0; g.batch * g.cout * out_plane];
    data.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(bo, plane)| {
            let (b, o) = (bo / g.cout, bo % g.cout);
            plane.fill(bd[o]);
            for c in 0..g.cin {
                let src = &xd[(b * g.cin + c) * g.in_plane()..][..g.in_plane()];
                let w = &kd[(o * g.cin + c) * g.ker_vol()..][..g.ker_vol()];
                accumulate_correlation(g, src, w, plane);
            }
        });
    data
}

/// Visits every (column row, output row segment, input row offset) triple of
/// the im2col matrix `[Cin·K, P]` for one batch item.
fn for_each_column_run(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let [pd, ph, pw] = g.pad;
    let [kd, kh, kw] = g.ker;
    let (in_plane, kv) = (g.in_plane(), g.ker_vol());
    for c in 0..g.cin {
        for kz in 0..kd {
            let (z0, z1) = g.valid(0, kz);
            for ky in 0..kh {
                let (y0, y1) = g.valid(1, ky);
                for kx in 0..kw {
                    let (x0, x1) = g.valid(2, kx);
                    let row = c * kv + (kz * kh + ky) * kw + kx;
                    for z in z0..z1 {
                        let iz = z + kz - pd;
                        for y in y0..y1 {
                            let iy = y + ky - ph;
                            let o = (z * oh + y) * ow + x0;
                            let i = c * in_plane + (iz * ih + iy) * iw + x0 + kx - pw;
                            f(row, o, i, x1 - x0);
                        }
                    }
                }
            }
        }
    }
}

fn im2col(g: &ConvGeom, src: &[f64], cols: &mut [f64]) {
    let p = g.out_plane();
    cols.fill(0.0);
    for_each_column_run(g, |row, o, i, len| {
        cols[row * p + o..row * p + o + len].copy_from_slice(&src[i..i + len]);
    });
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dst: &mut [f64]) {
    let p = g.out_plane();
    for_each_column_run(g, |row, o, i, len| {
        dst[i..i + len]
            .iter_mut()
            .zip(&cols[row * p + o..row * p + o + len])
            .for_each(|(d, c)| *d += c);
    });
}

/// `c[m×n] = alpha·a·b + beta·c` on row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    // SAFETY: the caller's strides address only elements inside `a` and `b`
    // (checked by the shapes at each call site) and `c` holds m·n values.
    unsafe {
        matrixmultiply::dgemm(
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
            n as isize,
            1,
        );
    }
}

fn conv_forward_gemm(g: &ConvGeom, xd: &[f64], kd: &[f64], bd: &[f64]) -> Vec<f64> {
    let (p, ckv) = (g.out_plane(), g.cin * g.ker_vol());
    let in_item = g.cin * g.in_plane();
    let mut data = vec![0.0; g.batch * g.cout * p];
    data.par_chunks_mut(g.cout * p)
        .enumerate()
        .for_each(|(b, out)| {
            let mut cols = vec![0.0; ckv * p];
            im2col(g, &xd[b * in_item..][..in_item], &mut cols);
            for (o, plane) in out.chunks_mut(p).enumerate() {
                plane.fill(bd[o]);
            }
            gemm(
                g.cout,
                ckv,
                p,
                kd,
                (ckv as isize, 1),
                &cols,
                (p as isize, 1),
                1.0,
                out,
            );
        });
    data
}

fn conv_grad_input_gemm(g: &ConvGeom, grad: &[f64], kd: &[f64]) -> Vec<f64> {
    let (p, ckv) = (g.out_plane(), g.cin * g.ker_vol());
    let in_item = g.cin * g.in_plane();
    let mut gx = vec![0.0; g.batch * in_item];
    gx.par_chunks_mut(in_item).enumerate().for_each(|(b, dst)| {
        let mut cols = vec![0.0; ckv * p];
        let gb = &grad[b * g.cout * p..][..g.cout * p];
        // Kᵀ [ckv × cout] · G_b [cout × P]
        gemm(
            ckv,
            g.cout,
            p,
            kd,
            (1, ckv as isize),
            gb,
            (p as isize, 1),
            0.0,
            &mut cols,
        );
        col2im_add(g, &cols, dst);
    });
    gx
}

fn conv_grad_kernel_gemm(g: &ConvGeom, grad: &[f64], xd: &[f64]) -> Vec<f64> {
    let (p, ckv) = (g.out_plane(), g.cin * g.ker_vol());
    let in_item = g.cin * g.in_plane();
    let mut gk = vec![0.0; g.cout * ckv];
    let mut cols = vec![0.0; ckv * p];
    // batch items accumulate in order, so the sum is thread-count independent
    for b in 0..g.batch {
        im2col(g, &xd[b * in_item..][..in_item], &mut cols);
        let gb = &grad[b * g.cout * p..][..g.cout * p];
        // G_b [cout × P] · colsᵀ [P × ckv]
        gemm(
            g.cout,
            p,
            ckv,
            gb,
            (p as isize, 1),
            &cols,
            (1, p as isize),
            1.0,
            &mut gk,
        );
    }
    gk
}

fn conv_grad_input(g: &ConvGeom, grad: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (in_plane, out_plane, kv) = (g.in_plane(), g.out_plane(), g.ker_vol());
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let [pd, ph, pw] = g.pad;
    let [kd, kh, kw] = g.ker;
    let mut gx = vec![0.0; g.batch * g.cin * in_plane];
    gx.par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(bc, dst)| {
            let (b, c) = (bc / g.cin, bc % g.cin);
            for o in 0..g.cout {
                let go = &grad[(b * g.cout + o) * out_plane..][..out_plane];
                let w = &kernel[(o * g.cin + c) * kv..][..kv];
                for kz in 0..kd {
                    let (z0, z1) = g.valid(0, kz);
                    for ky in 0..kh {
                        let (y0, y1) = g.valid(1, ky);
                        for kx in 0..kw {
                            let wv = w[(kz * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (x0, x1) = g.valid(2, kx);
                            for z in z0..z1 {
                                let iz = z + kz - pd;
                                for y in y0..y1 {
                                    let iy = y + ky - ph;
                                    let grow = &go[(z * oh + y) * ow + x0..(z * oh + y) * ow + x1];
                                    let start = (iz * ih + iy) * iw + x0 + kx - pw;
                                    dst[start..start + grow.len()]
                                        .iter_mut()
                                        .zip(grow)
                                        .for_each(|(d, gv)| *d += wv * gv);
                                }
                            }
                        }
                    }
                }
            }
        });
    gx
}

fn conv_grad_kernel(g: &ConvGeom, grad: &[f64], x: &[f64]) -> Vec<f64> {
    let (in_plane, out_plane, kv) = (g.in_plane(), g.out_plane(), g.ker_vol());
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let [pd, ph, pw] = g.pad;
    let [kd, kh, kw] = g.ker;
    let mut gk = vec![0.0; g.cout * g.cin * kv];
    gk.par_chunks_mut(g.cin * kv)
        .enumerate()
        .for_each(|(o, dst)| {
            for b in 0..g.batch {
                let go = &grad[(b * g.cout + o) * out_plane..][..out_plane];
                for c in 0..g.cin {
                    let src = &x[(b * g.cin + c) * in_plane..][..in_plane];
                    for kz in 0..kd {
                        let (z0, z1) = g.valid(0, kz);
                        for ky in 0..kh {
                            let (y0, y1) = g.valid(1, ky);
                            for kx in 0..kw {
                                let (x0, x1) = g.valid(2, kx);
                                let mut acc = 0.0;
                                for z in z0..z1 {
                                    let iz = z + kz - pd;
                                    for y in y0..y1 {
                                        let iy = y + ky - ph;
                                        let grow =
                                            &go[(z * oh + y) * ow + x0..(z * oh + y) * ow + x1];
                                        let irow = &src[(iz * ih + iy) * iw + x0 + kx - pw..];
                                        acc +=
                                            grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                }
                                dst[c * kv + (kz * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        });
    gk
}

/// Max pooling with window 2 and stride 2 on every spatial axis (floor division).
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    if !(3..=5).contains(&x.rank()) {
        return Err(Error::Dimension(format!(
            "max_pool2 expects [B, C, S...], got {:?}",
            x.shape()
        )));
    }
    let srank = x.rank() - 2;
    let [d, h, w] = dhw(&x.shape()[2..])?;
    let win = match srank {
        1 => [1, 1, 2],
        2 => [1, 2, 2],
        _ => [2, 2, 2],
    };
    let (od, oh, ow) = (d / win[0], h / win[1], w / win[2]);
    if od == 0 || oh == 0 || ow == 0 {
        return Err(Error::Dimension(format!(
            "spatial extents {:?} too small to pool",
            &x.shape()[2..]
        )));
    }
    let planes = x.shape()[0] * x.shape()[1];
    let (ip, op) = (d * h * w, od * oh * ow);
    let mut out = vec![0.0; planes * op];
    let mut arg = vec![0usize; planes * op];
    let xd = x.data();
    for p in 0..planes {
        let src = &xd[p * ip..][..ip];
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dz in 0..win[0] {
                        for dy in 0..win[1] {
                            for dx in 0..win[2] {
                                let i = ((z * win[0] + dz) * h + y * win[1] + dy) * w
                                    + xo * win[2]
                                    + dx;
                                if src[i] > best {
                                    best = src[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    let o = p * op + (z * oh + y) * ow + xo;
                    out[o] = best;
                    arg[o] = p * ip + bi;
                }
            }
        }
    }
    let mut shape = x.shape()[..2].to_vec();
    shape.extend([od, oh, ow][3 - srank..].iter().copied());
    let n_in = x.numel();
    Ok(Tensor::from_op("max_pool2", out, shape, &[x], move |g| {
        let mut gx = vec![0.0; n_in];
        for (gi, &a) in g.iter().zip(&arg) {
            gx[a] += gi;
        }
        vec![Some(gx)]
    }))
}

/// Mean over all spatial positions: `[B, C, S...]` → `[B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 3 {
        return Err(Error::Dimension(format!(
            "global_avg_pool expects [B, C, S...], got {:?}",
            x.shape()
        )));
    }
    let planes = x.shape()[0] * x.shape()[1];
    let ps = numel_of(&x.shape()[2..]);
    let out: Vec<f64> = x
        .data()
        .chunks_exact(ps)
        .map(|c| c.iter().sum::<f64>() / ps as f64)
        .collect();
    debug_assert_eq!(out.len(), planes);
    Ok(Tensor::from_op(
        "global_avg_pool",
        out,
        x.shape()[..2].to_vec(),
        &[x],
        move |g| {
            let inv = 1.0 / ps as f64;
            vec![Some(
                g.iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, ps))
                    .collect(),
            )]
        },
    ))
}

/// `x·W + b` for `x: [B×in]`, `W: [in×out]`, `b: [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let y = x.matmul(weight)?;
    let (rows, cols) = (y.shape()[0], y.shape()[1]);
    if bias.shape() != [cols] {
        return Err(Error::Dimension(format!(
            "bias shape {:?}, expected [{cols}]",
            bias.shape()
        )));
    }
    let mut data = y.data().to_vec();
    for r in 0..rows {
        data[r * cols..(r + 1) * cols]
            .iter_mut()
            .zip(bias.data())
            .for_each(|(v, b)| *v += b);
    }
    let yc = y.clone();
    let need_b = bias.requires_grad();
    Ok(Tensor::from_op(
        "linear",
        data,
        vec![rows, cols],
        &[&y, bias],
        move |g| {
            let gy = yc.requires_grad().then(|| g.to_vec());
            let gb = need_b.then(|| {
                let mut s = vec![0.0; cols];
                for r in 0..rows {
                    s.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(a, b)| *a += b);
                }
                s
            });
            vec![gy, gb]
        },
    ))
}

/// Statistics produced by [`batch_norm`].
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Unbiased (n−1) variance, as used for running-statistic updates.
    pub var_unbiased: Vec<f64>,
    pub count: usize,
}

fn channel_layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    if x.rank() < 2 || x.shape()[1] != channels {
        return Err(Error::Dimension(format!(
            "expected channel axis of size {channels}, got shape {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], numel_of(&x.shape()[2..])))
}

/// Per-channel statistics over batch and spatial positions.
pub fn channel_stats(x: &Tensor, channels: usize) -> Result<ChannelStats> {
    let (batch, ps) = channel_layout(x, channels)?;
    let count = batch * ps;
    let xd = x.data();
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            s += xd[(b * channels + c) * ps..][..ps].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0;
        for b in 0..batch {
            ss += xd[(b * channels + c) * ps..][..ps]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = if count > 1 {
            ss / (count - 1) as f64
        } else {
            0.0
        };
    }
    Ok(ChannelStats {
        mean,
        var_unbiased: var,
        count,
    })
}

/// Batch normalization over the channel axis (axis 1).
///
/// With `fixed = None` the batch statistics (biased variance) normalize the
/// input and gradients flow through them; with `fixed = Some((mean, var))`
/// the given statistics are treated as constants.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    fixed: Option<(&[f64], &[f64])>,
    eps: f64,
) -> Result<Tensor> {
    let channels = gamma.numel();
    if beta.numel() != channels {
        return Err(Error::Dimension("gamma/beta size mismatch".into()));
    }
    let (batch, ps) = channel_layout(x, channels)?;
    let count = (batch * ps) as f64;
    let (mean, inv_std): (Vec<f64>, Vec<f64>) = match fixed {
        Some((m, v)) => {
            if m.len() != channels || v.len() != channels {
                return Err(Error::Dimension("running statistics size mismatch".into()));
            }
            (
                m.to_vec(),
                v.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
            )
        }
        None => {
            let st = channel_stats(x, channels)?;
            let biased: Vec<f64> = st
                .var_unbiased
                .iter()
                .map(|v| v * (count - 1.0) / count)
                .collect();
            (
                st.mean,
                biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
            )
        }
    };
    let xd = x.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * ps;
            for i in base..base + ps {
                xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                out[i] = gamma.data()[c] * xhat[i] + beta.data()[c];
            }
        }
    }
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    let batch_stats = fixed.is_none();
    Ok(Tensor::from_op(
        "batch_norm",
        out,
        x.shape().to_vec(),
        &[x, gamma, beta],
        move |g| {
            let mut sum_g = vec![0.0; channels];
            let mut sum_gx = vec![0.0; channels];
            for b in 0..batch {
                for c in 0..channels {
                    let base = (b * channels + c) * ps;
                    for i in base..base + ps {
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
            }
            let gx = xc.requires_grad().then(|| {
                let mut gx = vec![0.0; g.len()];
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * ps;
                        let k = gc.data()[c] * inv_std[c];
                        for i in base..base + ps {
                            gx[i] = if batch_stats {
                                k * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                gx
            });
            let gg = gc.requires_grad().then(|| sum_gx.clone());
            let gb = bc.requires_grad().then(|| sum_g.clone());
            vec![gx, gg, gb]
        },
    ))
}

/// Weighted mean negative log-softmax at the true class.
///
/// `loss = Σ_i w[y_i]·(−log softmax(z_i)[y_i]) / Σ_i w[y_i]`.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let k = logits.shape()[1];
    if weights.len() != k {
        return Err(Error::Dimension(format!(
            "{} class weights for {k} classes",
            weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax_rows(logits.data(), k);
    let wsum: f64 = labels.iter().map(|&y| weights[y]).sum();
    let loss: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            weights[y] * (lse - row[y])
        })
        .sum::<f64>()
        / wsum;
    let labels = labels.to_vec();
    let weights = weights.to_vec();
    Ok(Tensor::from_op(
        "weighted_cross_entropy",
        vec![loss],
        vec![],
        &[logits],
        move |g| {
            let mut gz = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                let s = g[0] * weights[y] / wsum;
                for j in 0..k {
                    gz[i * k + j] *= s;
                }
                gz[i * k + y] -= s;
            }
            vec![Some(gz)]
        },
    ))
}

/// Row-wise softmax of a `[rows × k]` buffer.
pub fn softmax_rows(z: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for (row, dst) in z.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (v - mx).exp();
            s += *d;
        }
        dst.iter_mut().for_each(|d| *d /= s);
    }
    out
}

/// Square sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triples; duplicates are summed.
    pub fn from_triples(n: usize, mut triples: Vec<(usize, usize, f64)>) -> Self {
        triples.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; n + 1];
        let mut indices = Vec::with_capacity(triples.len());
        let mut values: Vec<f64> = Vec::with_capacity(triples.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triples {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        CsrMatrix {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(move |i| (self.indices[i], self.values[i]))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                d[r * self.n + c] += v;
            }
        }
        d
    }
}

/// Sparse-dense product `A·H` for a constant `A` and `H: [n×f]`.
pub fn sparse_matmul(a: &Rc<CsrMatrix>, h: &Tensor) -> Result<Tensor> {
    if h.rank() != 2 || h.shape()[0] != a.n {
        return Err(Error::Dimension(format!(
            "adjacency is {}×{}, features {:?}",
            a.n,
            a.n,
            h.shape()
        )));
    }
    let f = h.shape()[1];
    let hd = h.data();
    let mut out = vec![0.0; a.n * f];
    for r in 0..a.n {
        let dst = &mut out[r * f..(r + 1) * f];
        for (c, v) in a.row(r) {
            dst.iter_mut()
                .zip(&hd[c * f..(c + 1) * f])
                .for_each(|(d, x)| *d += v * x);
        }
    }
    let a = Rc::clone(a);
    Ok(Tensor::from_op(
        "sparse_matmul",
        out,
        vec![a.n, f],
        &[h],
        move |g| {
            // Aᵀ·G by scattering rows
            let mut gh = vec![0.0; a.n * f];
            for r in 0..a.n {
                let src = &g[r * f..(r + 1) * f];
                for (c, v) in a.row(r) {
                    gh[c * f..(c + 1) * f]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, x)| *d += v * x);
                }
            }
            vec![Some(gh)]
        },
    ))
}

/// Mean of rows grouped by `segments[row]`: `[n×f]` → `[groups×f]`.
pub fn segment_mean(h: &Tensor, segments: &[usize], groups: usize) -> Result<Tensor> {
    if h.rank() != 2 || h.shape()[0] != segments.len() {
        return Err(Error::Dimension(format!(
            "{} segment ids for features {:?}",
            segments.len(),
            h.shape()
        )));
    }
    let f = h.shape()[1];
    let mut counts = vec![0usize; groups];
    for &s in segments {
        if s >= groups {
            return Err(Error::Input(format!("segment id {s} ≥ {groups}")));
        }
        counts[s] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Input("empty segment in segment_mean".into()));
    }
    let mut out = vec![0.0; groups * f];
    for (r, &s) in segments.iter().enumerate() {
        out[s * f..(s + 1) * f]
            .iter_mut()
            .zip(&h.data()[r * f..(r + 1) * f])
            .for_each(|(d, x)| *d += x);
    }
    for s in 0..groups {
        out[s * f..(s + 1) * f]
            .iter_mut()
            .for_each(|v| *v /= counts[s] as f64);
    }
    let segs = segments.to_vec();
    Ok(Tensor::from_op(
        "segment_mean",
        out,
        vec![groups, f],
        &[h],
        move |g| {
            let mut gh = vec![0.0; segs.len() * f];
            for (r, &s) in segs.iter().enumerate() {
                let inv = 1.0 / counts[s] as f64;
                gh[r * f..(r + 1) * f]
                    .iter_mut()
                    .zip(&g[s * f..(s + 1) * f])
                    .for_each(|(d, x)| *d = x * inv);
            }
            vec![Some(gh)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gemm_and_direct_conv_agree() {
        let mut seed = 17u64;
        let mut next = move || {
            seed = seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let cases = [
            ([1, 1, 9], [1, 1, 3], [0, 0, 1]),
            ([1, 6, 5], [1, 3, 3], [0, 1, 1]),
            ([4, 5, 3], [3, 3, 3], [1, 1, 1]),
            ([1, 7, 6], [1, 3, 3], [0, 0, 0]),
        ];
        for (inp, ker, pad) in cases {
            let out: [usize; 3] = std::array::from_fn(|a| inp[a] + 2 * pad[a] + 1 - ker[a]);
            let g = ConvGeom {
                batch: 3,
                cin: 2,
                cout: 4,
                inp,
                ker,
                out,
                pad,
            };
            let x: Vec<f64> = (0..g.batch * g.cin * g.in_plane())
                .map(|_| next())
                .collect();
            let k: Vec<f64> = (0..g.cout * g.cin * g.ker_vol()).map(|_| next()).collect();
            let b: Vec<f64> = (0..g.cout).map(|_| next()).collect();
            let gy: Vec<f64> = (0..g.batch * g.cout * g.out_plane())
                .map(|_| next())
                .collect();
            let pairs = [
                (
                    conv_forward_gemm(&g, &x, &k, &b),
                    conv_forward_direct(&g, &x, &k, &b),
                ),
                (
                    conv_grad_input_gemm(&g, &gy, &k),
                    conv_grad_input(&g, &gy, &k),
                ),
                (
                    conv_grad_kernel_gemm(&g, &gy, &x),
                    conv_grad_kernel(&g, &gy, &x),
                ),
            ];
            for (fast, direct) in pairs {
                assert_eq!(fast.len(), direct.len());
                for (a, d) in fast.iter().zip(&direct) {
                    assert_abs_diff_eq!(a, d, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::new((0..20).map(|v| v as f64).collect(), &[1, 1, 4, 5]).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let k = Tensor::new(k, &[1, 1, 3, 3]).unwrap();
        let y = conv(&x, &k, &Tensor::zeros(&[1]).unwrap(), 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_edge_counts() {
        let x = Tensor::new(vec![1.0; 25], &[1, 1, 5, 5]).unwrap();
        let k = Tensor::new(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
        let y = conv(&x, &k, &Tensor::zeros(&[1]).unwrap(), 1).unwrap();
        let d = y.data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[2], 6.0);
        assert_eq!(d[12], 9.0);
        assert_eq!(d[24], 4.0);
    }

    #[test]
    fn conv3d_ones_kernel_corner() {
        let x = Tensor::new(vec![1.0; 27], &[1, 1, 3, 3, 3]).unwrap();
        let k = Tensor::new(vec![1.0; 27], &[1, 1, 3, 3, 3]).unwrap();
        let y = conv(&x, &k, &Tensor::zeros(&[1]).unwrap(), 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3, 3]);
        assert_eq!(y.data()[0], 8.0);
        assert_eq!(y.data()[13], 27.0);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let k = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        let r = conv(&x, &k, &Tensor::zeros(&[1]).unwrap(), 1);
        assert!(matches!(r, Err(Error::Dimension(_))));
        let k3 = Tensor::zeros(&[1, 2, 3, 3, 3]).unwrap();
        assert!(conv(&x, &k3, &Tensor::zeros(&[1]).unwrap(), 1).is_err());
    }

    #[test]
    fn first_layer_shape_at_224() {
        let x = Tensor::zeros(&[1, 1, 224, 224]).unwrap();
        let k = Tensor::zeros(&[32, 1, 3, 3]).unwrap();
        let y = conv(&x, &k, &Tensor::zeros(&[32]).unwrap(), 1).unwrap();
        assert_eq!(y.shape(), &[1, 32, 224, 224]);
    }

    #[test]
    fn max_pool_floors_odd_extents() {
        let x = Tensor::new((0..35).map(|v| v as f64).collect(), &[1, 1, 5, 7]).unwrap();
        let y = max_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
        assert_eq!(y.data(), &[8.0, 10.0, 12.0, 22.0, 24.0, 26.0]);
        let v = Tensor::zeros(&[2, 3, 5, 4, 9]).unwrap();
        assert_eq!(max_pool2(&v).unwrap().shape(), &[2, 3, 2, 2, 4]);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0], &[2, 2, 2]).unwrap();
        let g = Tensor::new(vec![1.0, 1.0], &[2]).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let y = batch_norm(&x, &g, &b, None, 0.0).unwrap();
        let st = channel_stats(&y, 2).unwrap();
        for c in 0..2 {
            assert_abs_diff_eq!(st.mean[c], 0.0, epsilon = 1e-12);
            // biased variance 1 ⇒ unbiased 4/3
            assert_abs_diff_eq!(st.var_unbiased[c], 4.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_balanced_equals_unweighted() {
        let z = Tensor::new(vec![0.3, -0.2, 1.0, 0.5, -1.0, 2.0], &[3, 2]).unwrap();
        let labels = [0, 1, 1];
        let w = weighted_cross_entropy(&z, &labels, &[1.0, 1.0])
            .unwrap()
            .item();
        let p = softmax_rows(z.data(), 2);
        let manual = -(p[0].ln() + p[3].ln() + p[5].ln()) / 3.0;
        assert_abs_diff_eq!(w, manual, epsilon = 1e-14);
    }

    #[test]
    fn csr_sums_duplicates() {
        let a = CsrMatrix::from_triples(2, vec![(1, 0, 1.0), (0, 1, 2.0), (1, 0, 0.5)]);
        assert_eq!(a.to_dense(), vec![0.0, 2.0, 1.5, 0.0]);
    }
}
