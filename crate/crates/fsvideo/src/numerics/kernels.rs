//! Raw computation kernels shared by the tape's forward and backward passes.
//!
//! Everything here is plain index arithmetic on row-major buffers; the tape
//! in `tape.rs` owns shape validation and gradient bookkeeping.

use crate::error::{Error, Result};
use crate::numerics::tensor::{numel_of, strides_of, Tensor};

/// Temporal padding behaviour of the 3D convolution.
///
/// All modes keep the frame count unchanged. Spatial padding is always
/// symmetric zero padding; temporal padding replicates edge frames so that
/// constant clips stay constant through temporal-only kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Output frame t depends on input frames <= t. Past-side padding
    /// replicates frame 0.
    Causal,
    /// Frames are partitioned into consecutive groups of the given size;
    /// output frames in a group see groups <= their own. Reads past the
    /// group boundary replicate the group's last frame.
    GroupCausal(usize),
    /// Centered kernel; both temporal edges replicate.
    NonCausal,
}

impl ConvMode {
    /// Source frame for output frame `t_out` and kernel tap `dt`.
    pub fn source_frame(self, t_out: usize, dt: usize, kt: usize, t_len: usize) -> usize {
        let t_out = t_out as isize;
        let dt = dt as isize;
        let kt = kt as isize;
        let last = t_len as isize - 1;
        let s = match self {
            ConvMode::Causal => (t_out + dt - (kt - 1)).clamp(0, last),
            ConvMode::NonCausal => (t_out + dt - (kt - 1) / 2).clamp(0, last),
            ConvMode::GroupCausal(g) => {
                let g = g as isize;
                let group_end = (((t_out / g) + 1) * g - 1).min(last);
                (t_out + dt - (kt - 1) / 2).clamp(0, group_end)
            }
        };
        s as usize
    }
}

// ---------------------------------------------------------------------------
// broadcasting

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                left: a.to_vec(),
                right: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides for reading `shape` as if broadcast to `out_shape` (0 on
/// broadcast axes), left-padded to the output rank.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let strides = strides_of(shape);
    let mut out = vec![0usize; rank];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n = numel_of(&out_shape);
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (ad, bd) = (a.data(), b.data());
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for _ in 0..n {
        data.push(f(ad[off_a], bd[off_b]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off_a += sa[d];
            off_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off_a -= sa[d] * out_shape[d];
            off_b -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

/// Sum `grad` down to `target` shape (the adjoint of broadcasting).
pub fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let out_rank = grad.rank();
    let offset = out_rank - target.len();
    let mut padded = vec![1usize; out_rank];
    padded[offset..].copy_from_slice(target);
    let st = {
        let strides = strides_of(&padded);
        let mut s = vec![0usize; out_rank];
        for i in 0..out_rank {
            s[i] = if padded[i] == 1 { 0 } else { strides[i] };
        }
        s
    };
    let mut out = Tensor::zeros(target);
    let out_data = out.data_mut();
    let gshape = grad.shape().to_vec();
    let mut idx = vec![0usize; out_rank];
    let mut off = 0usize;
    for &g in grad.data() {
        out_data[off] += g;
        for d in (0..out_rank).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < gshape[d] {
                break;
            }
            off -= st[d] * gshape[d];
            idx[d] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// linear algebra

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] @ B[n,k]^T
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T @ B[m,n]
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// lane iteration (softmax / axis reductions)

/// Decompose a shape around `axis` into (outer, len, inner).
pub fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Softmax along `axis`, shifted by the lane max for stability.
pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = lanes(x.shape(), axis);
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(xd[base + k * inner]);
            }
            let mut sum = 0.0;
            for k in 0..len {
                let e = (xd[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                out[base + k * inner] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax preserves shape")
}

/// VJP of softmax: g_x = s * (g - sum(g * s, axis)).
pub fn softmax_backward(s: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = lanes(s.shape(), axis);
    let mut out = vec![0.0; s.numel()];
    let (sd, gd) = (s.data(), g.data());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for k in 0..len {
                dot += sd[base + k * inner] * gd[base + k * inner];
            }
            for k in 0..len {
                let p = base + k * inner;
                out[p] = sd[p] * (gd[p] - dot);
            }
        }
    }
    Tensor::new(s.shape().to_vec(), out).expect("softmax_backward preserves shape")
}

// ---------------------------------------------------------------------------
// convolution

pub struct ConvDims {
    pub ci: usize,
    pub co: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
}

/// Shape-preserving 3D convolution; see [`ConvMode`] for padding rules.
pub fn conv3d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, mode: ConvMode, d: &ConvDims) -> Tensor {
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let mut out = vec![0.0; d.co * d.t * d.h * d.w];
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let x_frame = d.h * d.w;
    let x_chan = d.t * x_frame;
    for o in 0..d.co {
        let out_base = o * d.t * x_frame;
        for tt in 0..d.t {
            for dt in 0..d.kt {
                let st = mode.source_frame(tt, dt, d.kt, d.t);
                for i in 0..d.ci {
                    let w_base = (((o * d.ci + i) * d.kt + dt) * d.kh) * d.kw;
                    let x_base = i * x_chan + st * x_frame;
                    for y in 0..d.h {
                        for dy in 0..d.kh {
                            let sy = y as isize + dy as isize - ph as isize;
                            if sy < 0 || sy >= d.h as isize {
                                continue;
                            }
                            let x_row = x_base + sy as usize * d.w;
                            let o_row = out_base + tt * x_frame + y * d.w;
                            let w_row = w_base + dy * d.kw;
                            for xx in 0..d.w {
                                let mut acc = 0.0;
                                for dx in 0..d.kw {
                                    let sx = xx as isize + dx as isize - pw as isize;
                                    if sx < 0 || sx >= d.w as isize {
                                        continue;
                                    }
                                    acc += wd[w_row + dx] * xd[x_row + sx as usize];
                                }
                                out[o_row + xx] += acc;
                            }
                        }
                    }
                }
            }
            // bias once per output location
            let o_t = out_base + tt * x_frame;
            if bd[o] != 0.0 {
                for p in 0..x_frame {
                    out[o_t + p] += bd[o];
                }
            }
        }
    }
    Tensor::new(vec![d.co, d.t, d.h, d.w], out).expect("conv3d output shape")
}

/// Accumulates input/weight/bias gradients for conv3d.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    x: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    mode: ConvMode,
    d: &ConvDims,
    dx: Option<&mut Tensor>,
    dw: Option<&mut Tensor>,
    db: Option<&mut Tensor>,
) {
    let (ph, pw) = ((d.kh - 1) / 2, (d.kw - 1) / 2);
    let xd = x.data();
    let wd = weight.data();
    let gd = g.data();
    let x_frame = d.h * d.w;
    let x_chan = d.t * x_frame;

    if let Some(db) = db {
        let dbd = db.data_mut();
        for o in 0..d.co {
            let base = o * d.t * x_frame;
            let mut s = 0.0;
            for p in 0..d.t * x_frame {
                s += gd[base + p];
            }
            dbd[o] += s;
        }
    }

    let mut dxd = dx.map(|t| t.data_mut());
    let mut dwd = dw.map(|t| t.data_mut());
    for o in 0..d.co {
        let g_base = o * x_chan;
        for tt in 0..d.t {
            for dt in 0..d.kt {
                let st = mode.source_frame(tt, dt, d.kt, d.t);
                for i in 0..d.ci {
                    let w_base = (((o * d.ci + i) * d.kt + dt) * d.kh) * d.kw;
                    let x_base = i * x_chan + st * x_frame;
                    for y in 0..d.h {
                        for dy in 0..d.kh {
                            let sy = y as isize + dy as isize - ph as isize;
                            if sy < 0 || sy >= d.h as isize {
                                continue;
                            }
                            let x_row = x_base + sy as usize * d.w;
                            let g_row = g_base + tt * x_frame + y * d.w;
                            let w_row = w_base + dy * d.kw;
                            for xx in 0..d.w {
                                let gv = gd[g_row + xx];
                                if gv == 0.0 {
                                    continue;
                                }
                                for dx_ in 0..d.kw {
                                    let sx = xx as isize + dx_ as isize - pw as isize;
                                    if sx < 0 || sx >= d.w as isize {
                                        continue;
                                    }
                                    let xi = x_row + sx as usize;
                                    if let Some(dxd) = dxd.as_deref_mut() {
                                        dxd[xi] += wd[w_row + dx_] * gv;
                                    }
                                    if let Some(dwd) = dwd.as_deref_mut() {
                                        dwd[w_row + dx_] += xd[xi] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// bilinear spatial interpolation

/// Per-axis bilinear taps: (index0, index1, weight on index1).
fn interp_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let mut taps = Vec::with_capacity(dst_len);
    // align-corners convention: endpoints map to endpoints exactly.
    let scale = if dst_len > 1 {
        (src_len - 1) as f64 / (dst_len - 1) as f64
    } else {
        0.0
    };
    for i in 0..dst_len {
        let src = i as f64 * scale;
        let i0 = src.floor() as usize;
        let i0 = i0.min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        taps.push((i0, i1, src - i0 as f64));
    }
    taps
}

/// Bilinear interpolation of each (c, t) slice to (th, tw).
pub fn interp_spatial_forward(x: &Tensor, th: usize, tw: usize) -> Tensor {
    let (c, t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ty = interp_taps(h, th);
    let tx = interp_taps(w, tw);
    let xd = x.data();
    let mut out = vec![0.0; c * t * th * tw];
    for ct in 0..c * t {
        let src_base = ct * h * w;
        let dst_base = ct * th * tw;
        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v00 = xd[src_base + y0 * w + x0];
                let v01 = xd[src_base + y0 * w + x1];
                let v10 = xd[src_base + y1 * w + x0];
                let v11 = xd[src_base + y1 * w + x1];
                let top = v00 + wx * (v01 - v00);
                let bot = v10 + wx * (v11 - v10);
                out[dst_base + i * tw + j] = top + wy * (bot - top);
            }
        }
    }
    Tensor::new(vec![c, t, th, tw], out).expect("interp output shape")
}

pub fn interp_spatial_backward(x_shape: &[usize], g: &Tensor, th: usize, tw: usize) -> Tensor {
    let (c, t, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let ty = interp_taps(h, th);
    let tx = interp_taps(w, tw);
    let gd = g.data();
    let mut out = Tensor::zeros(x_shape);
    let od = out.data_mut();
    for ct in 0..c * t {
        let src_base = ct * h * w;
        let dst_base = ct * th * tw;
        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = gd[dst_base + i * tw + j];
                od[src_base + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                od[src_base + y0 * w + x1] += gv * (1.0 - wy) * wx;
                od[src_base + y1 * w + x0] += gv * wy * (1.0 - wx);
                od[src_base + y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// temporal average pooling

pub fn avgpool_t_out_len(t_in: usize, kernel: usize, skip_first: bool) -> usize {
    if skip_first {
        1 + (t_in - 1) / kernel
    } else {
        t_in / kernel
    }
}

/// Average consecutive frame groups; with `skip_first` frame 0 passes through.
pub fn avgpool_t_forward(x: &Tensor, kernel: usize, skip_first: bool) -> Tensor {
    let (c, t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let t_out = avgpool_t_out_len(t, kernel, skip_first);
    let frame = h * w;
    let xd = x.data();
    let mut out = vec![0.0; c * t_out * frame];
    let inv = 1.0 / kernel as f64;
    for ch in 0..c {
        for to in 0..t_out {
            let dst = (ch * t_out + to) * frame;
            if skip_first && to == 0 {
                let src = ch * t * frame;
                out[dst..dst + frame].copy_from_slice(&xd[src..src + frame]);
                continue;
            }
            let start = if skip_first { 1 + (to - 1) * kernel } else { to * kernel };
            for k in 0..kernel {
                let src = (ch * t + start + k) * frame;
                for p in 0..frame {
                    out[dst + p] += xd[src + p];
                }
            }
            for p in 0..frame {
                out[dst + p] *= inv;
            }
        }
    }
    Tensor::new(vec![c, t_out, h, w], out).expect("avgpool output shape")
}

pub fn avgpool_t_backward(x_shape: &[usize], g: &Tensor, kernel: usize, skip_first: bool) -> Tensor {
    let (c, t, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let t_out = avgpool_t_out_len(t, kernel, skip_first);
    let frame = h * w;
    let gd = g.data();
    let mut out = Tensor::zeros(x_shape);
    let od = out.data_mut();
    let inv = 1.0 / kernel as f64;
    for ch in 0..c {
        for to in 0..t_out {
            let src = (ch * t_out + to) * frame;
            if skip_first && to == 0 {
                let dst = ch * t * frame;
                for p in 0..frame {
                    od[dst + p] += gd[src + p];
                }
                continue;
            }
            let start = if skip_first { 1 + (to - 1) * kernel } else { to * kernel };
            for k in 0..kernel {
                let dst = (ch * t + start + k) * frame;
                for p in 0..frame {
                    od[dst + p] += gd[src + p] * inv;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// time-spatial pixel shuffle

/// Down: (c,t,h,w) -> (c*ft*fh*fw, t/ft, h/fh, w/fw), with output channel
/// index ((c*ft + dt)*fh + dy)*fw + dx. Up is the exact inverse.
pub fn shuffle_forward(x: &Tensor, factors: [usize; 3], down: bool) -> Tensor {
    let [ft, fh, fw] = factors;
    let block = ft * fh * fw;
    let s = x.shape();
    if down {
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        let (to, ho, wo) = (t / ft, h / fh, w / fw);
        let co = c * block;
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for ci in 0..c {
            for dt in 0..ft {
                for dy in 0..fh {
                    for dx in 0..fw {
                        let cout = ((ci * ft + dt) * fh + dy) * fw + dx;
                        for tt in 0..to {
                            for y in 0..ho {
                                for xx in 0..wo {
                                    let src = ((ci * t + tt * ft + dt) * h + y * fh + dy) * w
                                        + xx * fw
                                        + dx;
                                    let dst = ((cout * to + tt) * ho + y) * wo + xx;
                                    out[dst] = xd[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![co, to, ho, wo], out).expect("shuffle down shape")
    } else {
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        let co = c / block;
        let (to, ho, wo) = (t * ft, h * fh, w * fw);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for ci in 0..co {
            for dt in 0..ft {
                for dy in 0..fh {
                    for dx in 0..fw {
                        let cin = ((ci * ft + dt) * fh + dy) * fw + dx;
                        for tt in 0..t {
                            for y in 0..h {
                                for xx in 0..w {
                                    let src = ((cin * t + tt) * h + y) * w + xx;
                                    let dst = ((ci * to + tt * ft + dt) * ho + y * fh + dy) * wo
                                        + xx * fw
                                        + dx;
                                    out[dst] = xd[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![co, to, ho, wo], out).expect("shuffle up shape")
    }
}

// ---------------------------------------------------------------------------
// permutation

pub fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    let rank = perm.len();
    let mut idx = vec![0usize; rank];
    // walk output in row-major order, mapping to input offsets
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = xd[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute shape")
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_match_numpy() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        let g = Tensor::from_fn(&[2, 3], |idx| (idx[0] * 3 + idx[1]) as f64);
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[3.0, 5.0, 7.0]);
        let r2 = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r2.data(), &[3.0, 12.0]);
        let r3 = reduce_to_shape(&g, &[]);
        assert_eq!(r3.data(), &[15.0]);
    }

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn causal_source_frames_never_look_ahead() {
        for t_out in 0..6 {
            for dt in 0..3 {
                let s = ConvMode::Causal.source_frame(t_out, dt, 3, 6);
                assert!(s <= t_out);
            }
        }
    }

    #[test]
    fn group_causal_respects_group_boundary() {
        let mode = ConvMode::GroupCausal(2);
        for t_out in 0..6 {
            let group_end = (t_out / 2 + 1) * 2 - 1;
            for dt in 0..5 {
                let s = mode.source_frame(t_out, dt, 5, 6);
                assert!(s <= group_end.min(5));
            }
        }
    }

    #[test]
    fn shuffle_roundtrip_is_identity() {
        let x = Tensor::from_fn(&[4, 2, 4, 4], |idx| {
            (idx[0] * 1000 + idx[1] * 100 + idx[2] * 10 + idx[3]) as f64
        });
        let down = shuffle_forward(&x, [2, 2, 2], true);
        assert_eq!(down.shape(), &[32, 1, 2, 2]);
        let up = shuffle_forward(&down, [2, 2, 2], false);
        assert_eq!(up, x);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_fn(&[2, 3, 4], |idx| (idx[0] * 12 + idx[1] * 4 + idx[2]) as f64);
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        let back = permute_tensor(&p, &inverse_perm(&[2, 0, 1]));
        assert_eq!(back, x);
    }
}
