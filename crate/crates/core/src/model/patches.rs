//! Patch <-> image layout conversion.
//!
//! Token row `k` holds the flattened `k`-th patch in raster order; within a
//! row the layout is channel-major (`c*p*p + py*p + px`). `patchify` and
//! `unpatchify` are exact inverses, bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn check_divisible(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} not divisible by patch size {p}"
        )));
    }
    Ok(())
}

/// `[C,H,W] -> [n, p²·C]` with `n = (H/p)·(W/p)`.
pub fn patchify<E: Element>(image: &Tensor<E>, p: usize) -> Result<Tensor<E>> {
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::config(format!("patchify expects [C,H,W], got {:?}", image.shape())))?;
    check_divisible(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let n = gh * gw;
    let d = p * p * c;
    let mut out = Vec::with_capacity(n * d);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for py in 0..p {
                    let y = gy * p + py;
                    let base = ch * h * w + y * w + gx * p;
                    out.extend_from_slice(&image.data()[base..base + p]);
                }
            }
        }
    }
    Tensor::from_vec(&[n, d], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<E: Element>(
    tokens: &Tensor<E>,
    p: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<E>> {
    let perm = unpatchify_perm(p, channels, h, w)?;
    let n = tokens.numel();
    if n != perm.len() {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            left: tokens.shape().to_vec(),
            right: vec![channels, h, w],
        });
    }
    let mut out = vec![E::zero(); n];
    for (i, &src) in perm.iter().enumerate() {
        out[i] = tokens.data()[src];
    }
    Tensor::from_vec(&[channels, h, w], out)
}

/// Element permutation mapping flat image index -> flat token index, for
/// use with `Tape::gather_flat` (differentiable unpatchify).
pub fn unpatchify_perm(p: usize, channels: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    check_divisible(h, w, p)?;
    let gw = w / p;
    let d = p * p * channels;
    let mut perm = vec![0usize; channels * h * w];
    for ch in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let (gy, gx) = (y / p, x / p);
                let (py, px) = (y % p, x % p);
                let token = gy * gw + gx;
                let within = ch * p * p + py * p + px;
                perm[ch * h * w + y * w + x] = token * d + within;
            }
        }
    }
    Ok(perm)
}
