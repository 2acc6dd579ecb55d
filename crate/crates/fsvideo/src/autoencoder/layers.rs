//! Building-block layers for the video autoencoder: convolution wrappers,
//! pixel norm, height/width-only attention, noise injection, and the
//! first-frame cross-attention used by the decoder.

use crate::error::Result;
use crate::numerics::rng::SplitRng;
use crate::numerics::tape::{Tape, Value};
use crate::numerics::tensor::Tensor;
use crate::numerics::ConvMode;
use crate::params::{Binding, ParamId, ParamSet};

/// Default additive guard for pixel norm; applied inside the root as eps^2.
pub const PIXEL_NORM_EPS: f64 = 1e-6;

/// Normalize each (t, h, w) location's channel vector to unit RMS:
/// x / sqrt(mean_c(x^2) + eps^2).
pub fn pixel_norm(tape: &mut Tape, x: Value, eps: f64) -> Result<Value> {
    tape.rms_norm(x, 0, eps)
}

/// x + weight * g with g drawn standard normal from `rng`; weight 0 is the
/// exact identity and consumes no randomness.
pub fn noise_inject(tape: &mut Tape, x: Value, rng: &mut SplitRng, weight: f64) -> Result<Value> {
    if weight == 0.0 {
        return Ok(x);
    }
    let g = Tensor::randn(&tape.shape(x).to_vec(), rng);
    let noise = tape.leaf(g);
    let scaled = tape.scale(noise, weight)?;
    tape.add(x, scaled)
}

/// Self-attention over the h*w token axis, independently per frame:
/// softmax(Q K^T / sqrt(c)) V with Q = x Wq, K = x Wk, V = x Wv per frame.
/// Input and projections are full-width (no head splitting); the output is
/// the attended value projection, without an output projection.
pub fn hw_attention(tape: &mut Tape, x: Value, wq: Value, wk: Value, wv: Value) -> Result<Value> {
    let (c, t, h, w) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2], s[3])
    };
    let tokens = {
        let p = tape.permute(x, &[1, 2, 3, 0])?; // (t,h,w,c)
        tape.reshape(p, &[t * h * w, c])?
    };
    let q = tape.matmul(tokens, wq)?;
    let k = tape.matmul(tokens, wk)?;
    let v = tape.matmul(tokens, wv)?;
    let q = tape.reshape(q, &[t, h * w, c])?;
    let k = tape.reshape(k, &[t, h * w, c])?;
    let v = tape.reshape(v, &[t, h * w, c])?;
    let kt = tape.permute(k, &[0, 2, 1])?; // (t,c,hw)
    let scores = tape.bmm(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (c as f64).sqrt())?;
    let attn = tape.softmax(scaled, 2)?;
    let out = tape.bmm(attn, v)?; // (t,hw,c)
    let out = tape.reshape(out, &[t, h, w, c])?;
    tape.permute(out, &[3, 0, 1, 2])
}

/// Shape-preserving conv3d layer with bias.
#[derive(Clone, Debug)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub mode: ConvMode,
    pub kernel: (usize, usize, usize),
}

impl Conv3dLayer {
    pub fn init(
        params: &mut ParamSet,
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize, usize),
        mode: ConvMode,
    ) -> Self {
        let (kt, kh, kw) = kernel;
        let fan_in = (c_in * kt * kh * kw) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = params.add_normal(&format!("{name}.weight"), &[c_out, c_in, kt, kh, kw], std, seed);
        let bias = params.add_zeros(&format!("{name}.bias"), &[c_out]);
        Conv3dLayer {
            weight,
            bias,
            mode,
            kernel,
        }
    }

    /// Zero-initialized variant; the layer contributes nothing at init.
    pub fn init_zero(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize, usize),
        mode: ConvMode,
    ) -> Self {
        let (kt, kh, kw) = kernel;
        let weight = params.add_zeros(&format!("{name}.weight"), &[c_out, c_in, kt, kh, kw]);
        let bias = params.add_zeros(&format!("{name}.bias"), &[c_out]);
        Conv3dLayer {
            weight,
            bias,
            mode,
            kernel,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Value) -> Result<Value> {
        tape.conv3d(x, bound.get(self.weight), bound.get(self.bias), self.mode)
    }

    /// Causal streaming step: `cache`, when present, holds the last
    /// kt-1 frames of this layer's input stream from previous chunks.
    /// Returns the chunk's outputs and the cache for the next chunk.
    pub fn forward_streaming(
        &self,
        tape: &mut Tape,
        bound: &Binding,
        x: Value,
        cache: Option<&Tensor>,
    ) -> Result<(Value, Tensor)> {
        debug_assert_eq!(self.mode, ConvMode::Causal, "streaming requires causal conv");
        let ctx_len = self.kernel.0 - 1;
        let full = match cache {
            Some(c) => {
                let ctx = tape.leaf(c.clone());
                tape.concat(&[ctx, x], 1)?
            }
            None => x,
        };
        let y = self.forward(tape, bound, full)?;
        let out = match cache {
            // with exactly kt-1 real context frames, outputs at positions
            // >= ctx_len never touch the replicated padding, so dropping the
            // context rows reproduces the full-clip result
            Some(_) => tape.slice(y, 1, ctx_len, tape.shape(y)[1] - ctx_len)?,
            None => y,
        };
        let t_full = tape.shape(full)[1];
        let keep = ctx_len.min(t_full);
        let tail = tape.slice(full, 1, t_full - keep, keep)?;
        Ok((out, tape.value(tail).clone()))
    }
}

/// Per-frame spatial attention block with residual connection:
/// x + (hw_attention(pixel_norm(x)) Wo). Wo starts at zero so the block is
/// the identity at init.
#[derive(Clone, Debug)]
pub struct HwAttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl HwAttentionBlock {
    pub fn init(params: &mut ParamSet, seed: u64, name: &str, c: usize) -> Self {
        let std = (1.0 / c as f64).sqrt();
        HwAttentionBlock {
            wq: params.add_normal(&format!("{name}.wq"), &[c, c], std, seed),
            wk: params.add_normal(&format!("{name}.wk"), &[c, c], std, seed),
            wv: params.add_normal(&format!("{name}.wv"), &[c, c], std, seed),
            wo: params.add_zeros(&format!("{name}.wo"), &[c, c]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Value) -> Result<Value> {
        let (c, t, h, w) = {
            let s = tape.shape(x);
            (s[0], s[1], s[2], s[3])
        };
        let normed = pixel_norm(tape, x, PIXEL_NORM_EPS)?;
        let attended = hw_attention(
            tape,
            normed,
            bound.get(self.wq),
            bound.get(self.wk),
            bound.get(self.wv),
        )?;
        let tokens = {
            let p = tape.permute(attended, &[1, 2, 3, 0])?;
            tape.reshape(p, &[t * h * w, c])?
        };
        let projected = tape.matmul(tokens, bound.get(self.wo))?;
        let back = tape.reshape(projected, &[t, h, w, c])?;
        let back = tape.permute(back, &[3, 0, 1, 2])?;
        tape.add(x, back)
    }
}

/// Cross-attention from decoder locations onto first-frame encoder features.
/// Queries come from every decoder token; keys/values from the feature map's
/// spatial tokens. The output projection starts at zero, so with zero
/// features or at init the block passes `x` through unchanged.
#[derive(Clone, Debug)]
pub struct FirstFrameInjection {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub q_dim: usize,
    pub kv_dim: usize,
}

impl FirstFrameInjection {
    pub fn init(params: &mut ParamSet, seed: u64, name: &str, q_dim: usize, kv_dim: usize) -> Self {
        let std_q = (1.0 / q_dim as f64).sqrt();
        let std_kv = (1.0 / kv_dim as f64).sqrt();
        FirstFrameInjection {
            wq: params.add_normal(&format!("{name}.wq"), &[q_dim, q_dim], std_q, seed),
            wk: params.add_normal(&format!("{name}.wk"), &[kv_dim, q_dim], std_kv, seed),
            wv: params.add_normal(&format!("{name}.wv"), &[kv_dim, q_dim], std_kv, seed),
            wo: params.add_zeros(&format!("{name}.wo"), &[q_dim, q_dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Value, feature: Value) -> Result<Value> {
        let (c, t, h, w) = {
            let s = tape.shape(x);
            (s[0], s[1], s[2], s[3])
        };
        let fs = tape.shape(feature).to_vec();
        debug_assert_eq!(fs[0], self.kv_dim);
        let n_kv = fs[1] * fs[2] * fs[3];

        let q_tokens = {
            let p = tape.permute(x, &[1, 2, 3, 0])?;
            tape.reshape(p, &[t * h * w, c])?
        };
        let kv_tokens = {
            let p = tape.permute(feature, &[1, 2, 3, 0])?;
            tape.reshape(p, &[n_kv, self.kv_dim])?
        };
        let q = tape.matmul(q_tokens, bound.get(self.wq))?;
        let k = tape.matmul(kv_tokens, bound.get(self.wk))?;
        let v = tape.matmul(kv_tokens, bound.get(self.wv))?;
        let kt = tape.permute(k, &[1, 0])?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (self.q_dim as f64).sqrt())?;
        let attn = tape.softmax(scaled, 1)?;
        let out = tape.matmul(attn, v)?;
        let projected = tape.matmul(out, bound.get(self.wo))?;
        let back = tape.reshape(projected, &[t, h, w, c])?;
        let back = tape.permute(back, &[3, 0, 1, 2])?;
        tape.add(x, back)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor};

    #[test]
    fn pixel_norm_hand_values() {
        // channel vector (3, 4): rms = sqrt(12.5)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 1, 1, 1], vec![3.0, 4.0]).unwrap());
        let y = pixel_norm(&mut tape, x, PIXEL_NORM_EPS).unwrap();
        let d = tape.value(y).data();
        let rms = 12.5f64.sqrt();
        assert!((d[0] - 3.0 / rms).abs() < 1e-9);
        assert!((d[1] - 4.0 / rms).abs() < 1e-9);
        assert!((d[0] - 0.8485).abs() < 1e-4);
        assert!((d[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn pixel_norm_unit_rms_and_scale_invariance() {
        let mut rng = SplitRng::new(1, 0);
        let x = Tensor::randn(&[4, 2, 3, 3], &mut rng);
        let scaled = {
            // per-location positive scaling
            let factors = Tensor::uniform(&[1, 2, 3, 3], &mut rng, 0.5, 3.0);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let f = tape.leaf(factors);
            let prod = tape.mul(xv, f).unwrap();
            tape.value(prod).clone()
        };
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let b = tape.leaf(scaled);
        let na = pixel_norm(&mut tape, a, PIXEL_NORM_EPS).unwrap();
        let nb = pixel_norm(&mut tape, b, PIXEL_NORM_EPS).unwrap();
        assert!(tape.value(na).max_abs_diff(tape.value(nb)) < 1e-9);

        // unit RMS at every location
        let v = tape.value(na);
        for t in 0..2 {
            for y in 0..3 {
                for xx in 0..3 {
                    let ms: f64 = (0..4).map(|c| v.get(&[c, t, y, xx]).powi(2)).sum::<f64>() / 4.0;
                    assert!((ms.sqrt() - 1.0).abs() < 1e-9);
                }
            }
        }

        let ones = tape.leaf(Tensor::ones(&[3, 1, 2, 2]));
        let normed = pixel_norm(&mut tape, ones, PIXEL_NORM_EPS).unwrap();
        for &val in tape.value(normed).data() {
            assert!((val - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pixel_norm_grad_check() {
        let f = |tape: &mut Tape, inputs: &[Value]| -> Result<Value> {
            let n = pixel_norm(tape, inputs[0], PIXEL_NORM_EPS)?;
            let sq = tape.mul(n, n)?;
            let w = tape.exp(inputs[1])?;
            let weighted = tape.mul(sq, w)?;
            tape.mean_all(weighted)
        };
        let mut rng = SplitRng::new(2, 0);
        let x = Tensor::randn(&[4, 1, 2, 2], &mut rng);
        let w = Tensor::randn(&[4, 1, 2, 2], &mut rng);
        let err = grad_check(&f, &[x, w], 1e-5).unwrap();
        assert!(err < 1e-6, "pixel norm grad error {err}");
    }

    #[test]
    fn noise_inject_weight_zero_is_identity() {
        let mut rng = SplitRng::new(5, 0);
        let x = Tensor::randn(&[2, 3, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = noise_inject(&mut tape, v, &mut rng, 0.0).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn noise_inject_is_reproducible() {
        let x = Tensor::zeros(&[2, 2, 2, 2]);
        let run = || {
            let mut rng = SplitRng::new(9, 4);
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let y = noise_inject(&mut tape, v, &mut rng, 0.05).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noise_inject_empirical_std() {
        let mut rng = SplitRng::new(11, 0);
        let x = Tensor::zeros(&[1_000_000]);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = noise_inject(&mut tape, v, &mut rng, 0.05).unwrap();
        let d = tape.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.05).abs() < 0.001, "std {std}");
    }

    #[test]
    fn hw_attention_is_temporally_equivariant() {
        let mut rng = SplitRng::new(3, 0);
        let c = 3;
        let frame0 = Tensor::randn(&[c, 1, 2, 2], &mut rng);
        let frame1 = Tensor::randn(&[c, 1, 2, 2], &mut rng);
        let wq = Tensor::randn(&[c, c], &mut rng);
        let wk = Tensor::randn(&[c, c], &mut rng);
        let wv = Tensor::randn(&[c, c], &mut rng);

        let run = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let fa = tape.leaf(a.clone());
            let fb = tape.leaf(b.clone());
            let x = tape.concat(&[fa, fb], 1).unwrap();
            let (q, k, v) = (
                tape.leaf(wq.clone()),
                tape.leaf(wk.clone()),
                tape.leaf(wv.clone()),
            );
            let y = hw_attention(&mut tape, x, q, k, v).unwrap();
            tape.value(y).clone()
        };
        let fwd = run(&frame0, &frame1);
        let swapped = run(&frame1, &frame0);
        for ch in 0..c {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(fwd.get(&[ch, 0, y, x]), swapped.get(&[ch, 1, y, x]));
                    assert_eq!(fwd.get(&[ch, 1, y, x]), swapped.get(&[ch, 0, y, x]));
                }
            }
        }
    }

    #[test]
    fn hw_attention_single_token_is_value_projection() {
        let mut rng = SplitRng::new(6, 0);
        let c = 4;
        let x = Tensor::randn(&[c, 2, 1, 1], &mut rng);
        let wq = Tensor::randn(&[c, c], &mut rng);
        let wk = Tensor::randn(&[c, c], &mut rng);
        let wv = Tensor::randn(&[c, c], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (q, k, v) = (
            tape.leaf(wq),
            tape.leaf(wk),
            tape.leaf(wv.clone()),
        );
        let y = hw_attention(&mut tape, xv, q, k, v).unwrap();
        // expected: x W_v per frame token
        for t in 0..2 {
            for out_c in 0..c {
                let mut expect = 0.0;
                for in_c in 0..c {
                    expect += x.get(&[in_c, t, 0, 0]) * wv.get(&[in_c, out_c]);
                }
                let got = tape.value(y).get(&[out_c, t, 0, 0]);
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hw_attention_matches_dense_reference_per_frame() {
        let mut rng = SplitRng::new(8, 0);
        let (c, t, h, w) = (3usize, 2usize, 2usize, 2usize);
        let x = Tensor::randn(&[c, t, h, w], &mut rng);
        let wq = Tensor::randn(&[c, c], &mut rng);
        let wk = Tensor::randn(&[c, c], &mut rng);
        let wv = Tensor::randn(&[c, c], &mut rng);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (qv, kv, vv) = (
            tape.leaf(wq.clone()),
            tape.leaf(wk.clone()),
            tape.leaf(wv.clone()),
        );
        let y = hw_attention(&mut tape, xv, qv, kv, vv).unwrap();

        // dense double-loop reference
        let n = h * w;
        let proj = |frame: &[Vec<f64>], m: &Tensor| -> Vec<Vec<f64>> {
            frame
                .iter()
                .map(|tok| {
                    (0..c)
                        .map(|o| (0..c).map(|i| tok[i] * m.get(&[i, o])).sum())
                        .collect()
                })
                .collect()
        };
        for ft in 0..t {
            let tokens: Vec<Vec<f64>> = (0..n)
                .map(|p| (0..c).map(|ch| x.get(&[ch, ft, p / w, p % w])).collect())
                .collect();
            let (q, k, v) = (proj(&tokens, &wq), proj(&tokens, &wk), proj(&tokens, &wv));
            for p in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|r| {
                        (0..c).map(|d| q[p][d] * k[r][d]).sum::<f64>() / (c as f64).sqrt()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for out_c in 0..c {
                    let expect: f64 =
                        (0..n).map(|r| exps[r] / z * v[r][out_c]).sum();
                    let got = tape.value(y).get(&[out_c, ft, p / w, p % w]);
                    assert!(
                        (got - expect).abs() < 1e-10,
                        "frame {ft} token {p} channel {out_c}: {got} vs {expect}"
                    );
                }
            }
        }
    }
}
