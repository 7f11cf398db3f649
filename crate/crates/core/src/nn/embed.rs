//! Patch embedding and 2×2 patch merging.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::norm::NormVars;
use crate::tensor::Element;

/// Flattens non-overlapping `P×P` patches of `images[B×C×H×W]` into rows
/// ordered `(channel, dy, dx)`, patches row-major, and embeds them with
/// `w_e[(C·P²) × d]`. Returns `[B·n × d]`, `n = (H/P)·(W/P)`.
pub fn patch_embed<'t, T: Element>(images: &Var<'t, T>, patch: usize, w_e: &Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = images.shape();
    let (b, c, h, w) = match shape.as_slice() {
        [b, c, h, w] => (*b, *c, *h, *w),
        [c, h, w] => (1, *c, *h, *w),
        _ => return Err(Error::dim("patch_embed", &shape, &[0, 0, 0, 0])),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let flat = c * patch * patch;
    let mut index = Vec::with_capacity(b * gh * gw * flat);
    for bi in 0..b {
        for gr in 0..gh {
            for gc in 0..gw {
                for ch in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            index.push(((bi * c + ch) * h + gr * patch + py) * w + gc * patch + px);
                        }
                    }
                }
            }
        }
    }
    images.gather(&[b * gh * gw, flat], index)?.matmul(w_e)
}

/// Concatenates every 2×2 neighbourhood in the order top-left, bottom-left,
/// top-right, bottom-right, optionally normalizes, and maps `4d → 2d`.
pub fn patch_merge<'t, T: Element>(
    x: &Var<'t, T>,
    height: usize,
    width: usize,
    norm: Option<&NormVars<'t, T>>,
    w_m: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "patch merge needs an even grid, got {height}x{width}"
        )));
    }
    let shape = x.shape();
    let n = height * width;
    if shape.len() != 2 || !shape[0].is_multiple_of(n) {
        return Err(Error::dim("patch_merge", &shape, &[n]));
    }
    let (batch, d) = (shape[0] / n, shape[1]);
    let mut index = Vec::with_capacity(shape[0] * d);
    for b in 0..batch {
        for i in 0..height / 2 {
            for j in 0..width / 2 {
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let row = b * n + (2 * i + di) * width + 2 * j + dj;
                    index.extend((0..d).map(|c| row * d + c));
                }
            }
        }
    }
    let mut merged = x.gather(&[batch * n / 4, 4 * d], index)?;
    if let Some(norm) = norm {
        merged = norm.apply(&merged)?;
    }
    merged.matmul(w_m)
}
