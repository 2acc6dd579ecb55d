//! Latent-space accounting and geometry: compression-ratio arithmetic,
//! transformer sequence-length arithmetic, and intrinsic-dimension
//! estimation for latent point clouds.

mod gride;

pub use gride::{gride_estimate, id_profile, twonn_closed_form, GrideReport, PointCloud};

use crate::error::{Error, Result};

/// Downsampling factors and channel count of a video autoencoder.
///
/// Factors use the ratio-of-extents convention: `f_h = H / h`, so an encoder
/// that maps 512 pixels to 8 latent cells has `f_h = 64`. `r_t` is 1 for
/// causal encoders (the first frame maps to its own latent frame) and 0
/// otherwise, making the temporal factor `f_t = (T - r_t) / (t - r_t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompressionSpec {
    pub f_h: u32,
    pub f_w: u32,
    pub f_t: u32,
    pub c: u32,
    pub r_t: u32,
}

impl CompressionSpec {
    pub fn new(f_h: u32, f_w: u32, f_t: u32, c: u32, r_t: u32) -> Result<Self> {
        if f_h == 0 || f_w == 0 || f_t == 0 || c == 0 {
            return Err(Error::invalid_arg("CompressionSpec", "factors and channels must be >= 1"));
        }
        if r_t > 1 {
            return Err(Error::invalid_arg("CompressionSpec", "r_t must be 0 or 1"));
        }
        Ok(CompressionSpec { f_h, f_w, f_t, c, r_t })
    }

    /// Latent shape for an input video of shape (3, T, H, W).
    pub fn latent_shape(&self, t_in: usize, h_in: usize, w_in: usize) -> Result<(usize, usize, usize, usize)> {
        let r = self.r_t as usize;
        let ft = self.f_t as usize;
        if t_in < r || (t_in - r) % ft != 0 {
            return Err(Error::Divisibility {
                op: "latent_shape",
                dim: "T - r_t",
                value: t_in.saturating_sub(r),
                divisor: ft,
            });
        }
        for (dim, (len, f)) in [("H", (h_in, self.f_h as usize)), ("W", (w_in, self.f_w as usize))] {
            if len % f != 0 {
                return Err(Error::Divisibility {
                    op: "latent_shape",
                    dim,
                    value: len,
                    divisor: f,
                });
            }
        }
        Ok((
            self.c as usize,
            r + (t_in - r) / ft,
            h_in / self.f_h as usize,
            w_in / self.f_w as usize,
        ))
    }
}

/// Denominator N of the "1:N" total-compression notation: input element
/// count over latent element count, `f_h * f_w * f_t * 3 / c`.
pub fn total_compression(spec: &CompressionSpec) -> f64 {
    let factors = spec.f_h as f64 * spec.f_w as f64 * spec.f_t as f64;
    factors * 3.0 / spec.c as f64
}

/// Token count of a latent video under (1,1,1)-kernel patchification of a
/// 64x-spatial, 4x-temporal encoder: (1 + F/4) * (H/64) * (W/64), where F is
/// the frame count minus one.
pub fn sequence_length(frames_minus_one: usize, height: usize, width: usize) -> Result<usize> {
    if frames_minus_one % 4 != 0 {
        return Err(Error::Divisibility {
            op: "sequence_length",
            dim: "F",
            value: frames_minus_one,
            divisor: 4,
        });
    }
    for (dim, len) in [("H", height), ("W", width)] {
        if len % 64 != 0 {
            return Err(Error::Divisibility {
                op: "sequence_length",
                dim,
                value: len,
                divisor: 64,
            });
        }
    }
    Ok((1 + frames_minus_one / 4) * (height / 64) * (width / 64))
}

/// The published comparison rows reproduced by `fsv compress-table`.
pub fn reference_compression_rows() -> Vec<(&'static str, CompressionSpec)> {
    let spec = |f_h, f_w, f_t, c| CompressionSpec::new(f_h, f_w, f_t, c, 1).expect("static spec");
    vec![
        ("hunyuan-vae", spec(8, 8, 4, 16)),
        ("wan-2.1-vae", spec(8, 8, 4, 16)),
        ("cogvideox-1.5-vae", spec(8, 8, 4, 16)),
        ("step-video-vae", spec(16, 16, 8, 64)),
        ("cosmos-cv-f8", spec(8, 8, 8, 16)),
        ("ltx-video", spec(32, 32, 8, 128)),
        ("cosmos-cv-f16", spec(16, 16, 8, 16)),
        ("fsae-standard", spec(64, 64, 4, 128)),
        ("fsae-lite", spec(64, 64, 4, 128)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compression_reference_rows() {
        let case = |f_h, f_w, f_t, c, expected: f64| {
            let spec = CompressionSpec::new(f_h, f_w, f_t, c, 1).unwrap();
            assert_eq!(total_compression(&spec), expected);
        };
        case(8, 8, 4, 16, 48.0);
        case(16, 16, 8, 64, 96.0);
        case(8, 8, 8, 16, 96.0);
        case(32, 32, 8, 128, 192.0);
        case(16, 16, 8, 16, 384.0);
        case(64, 64, 4, 128, 384.0);
        case(16, 16, 4, 4, 768.0);
        // identity autoencoder
        case(1, 1, 1, 3, 1.0);
    }

    #[test]
    fn sequence_length_cases() {
        assert_eq!(sequence_length(120, 512, 512).unwrap(), 1984);
        assert_eq!(sequence_length(0, 64, 64).unwrap(), 1);
        assert_eq!(sequence_length(4, 128, 64).unwrap(), 4);
    }

    #[test]
    fn sequence_length_names_offending_dimension() {
        let err = sequence_length(3, 64, 64).unwrap_err().to_string();
        assert!(err.contains('F'), "{err}");
        let err = sequence_length(4, 100, 64).unwrap_err().to_string();
        assert!(err.contains('H'), "{err}");
        let err = sequence_length(4, 64, 100).unwrap_err().to_string();
        assert!(err.contains('W'), "{err}");
    }

    #[test]
    fn latent_shape_arithmetic() {
        let spec = CompressionSpec::new(4, 4, 2, 8, 1).unwrap();
        assert_eq!(spec.latent_shape(5, 16, 16).unwrap(), (8, 3, 4, 4));
        let spec = CompressionSpec::new(8, 8, 4, 16, 1).unwrap();
        assert_eq!(spec.latent_shape(5, 16, 16).unwrap(), (16, 2, 2, 2));
        assert!(spec.latent_shape(6, 16, 16).is_err());
    }
}
