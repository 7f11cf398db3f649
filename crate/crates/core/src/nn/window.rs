//! Window partitioning of a patch grid, with optional cyclic shift.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Additive logit applied to token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    /// Window side `M`.
    pub window: usize,
    /// Cyclic shift applied before partitioning (0 or `M/2`).
    pub shift: usize,
    pub height: usize,
    pub width: usize,
}

impl WindowSpec {
    pub fn new(window: usize, shift: usize, height: usize, width: usize) -> Result<Self> {
        if window == 0 || height == 0 || width == 0 {
            return Err(Error::Config("window and grid sizes must be positive".into()));
        }
        if !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return Err(Error::Config(format!(
                "grid {height}x{width} is not divisible by window {window}"
            )));
        }
        if shift >= window {
            return Err(Error::Config(format!(
                "shift {shift} must be smaller than window {window}"
            )));
        }
        Ok(WindowSpec {
            window,
            shift,
            height,
            width,
        })
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn window_area(&self) -> usize {
        self.window * self.window
    }

    pub fn num_windows(&self) -> usize {
        self.tokens() / self.window_area()
    }

    /// Original row-major token index of every slot, grouped by window.
    ///
    /// Windows are enumerated row-major over the (shifted) grid and slots
    /// row-major inside each window. Slot `(i, j)` of the shifted grid holds
    /// original token `((i + s) mod H, (j + s) mod W)`.
    pub fn window_tokens(&self) -> Vec<Vec<usize>> {
        let m = self.window;
        let (h, w, s) = (self.height, self.width, self.shift);
        let mut out = Vec::with_capacity(self.num_windows());
        for wr in 0..h / m {
            for wc in 0..w / m {
                let mut win = Vec::with_capacity(m * m);
                for pr in 0..m {
                    for pc in 0..m {
                        let i = (wr * m + pr + s) % h;
                        let j = (wc * m + pc + s) % w;
                        win.push(i * w + j);
                    }
                }
                out.push(win);
            }
        }
        out
    }

    fn region(pos: usize, len: usize, m: usize, s: usize) -> usize {
        if pos < len - m {
            0
        } else if pos < len - s {
            1
        } else {
            2
        }
    }

    /// Pairs inside a window that came from non-adjacent regions before the
    /// shift; `[windows × M² × M²]`, `true` where attention is blocked.
    /// `None` when there is no shift.
    pub fn blocked_pairs(&self) -> Option<Vec<bool>> {
        if self.shift == 0 {
            return None;
        }
        let m = self.window;
        let (h, w, s) = (self.height, self.width, self.shift);
        let area = m * m;
        let mut out = Vec::with_capacity(self.num_windows() * area * area);
        for wr in 0..h / m {
            for wc in 0..w / m {
                let ids: Vec<usize> = (0..area)
                    .map(|p| {
                        let i = wr * m + p / m;
                        let j = wc * m + p % m;
                        3 * Self::region(i, h, m, s) + Self::region(j, w, m, s)
                    })
                    .collect();
                for a in &ids {
                    for b in &ids {
                        out.push(a != b);
                    }
                }
            }
        }
        Some(out)
    }

    /// Additive mask `[windows × M² × M²]` built from [`Self::blocked_pairs`].
    pub fn additive_mask(&self) -> Option<Vec<f64>> {
        self.blocked_pairs()
            .map(|b| b.into_iter().map(|x| if x { MASK_VALUE } else { 0.0 }).collect())
    }
}

/// `[B·n × d] → [B·windows × M² × d]`; batch items are consecutive blocks of `n` rows.
pub fn window_partition<'t, T: Element>(x: &Var<'t, T>, w: &WindowSpec) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (rows, d) = match shape.as_slice() {
        [r, d] => (*r, *d),
        _ => return Err(Error::dim("window_partition", &shape, &[w.tokens(), 0])),
    };
    let n = w.tokens();
    if rows % n != 0 {
        return Err(Error::dim("window_partition", &shape, &[n, d]));
    }
    let batch = rows / n;
    let windows = w.window_tokens();
    let mut index = Vec::with_capacity(rows * d);
    for b in 0..batch {
        for win in &windows {
            for &tok in win {
                let row = b * n + tok;
                index.extend((0..d).map(|c| row * d + c));
            }
        }
    }
    x.gather(&[batch * w.num_windows(), w.window_area(), d], index)
}

/// Inverse of [`window_partition`], undoing the shift.
pub fn window_reverse<'t, T: Element>(x: &Var<'t, T>, w: &WindowSpec) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (groups, area, d) = match shape.as_slice() {
        [g, a, d] => (*g, *a, *d),
        _ => return Err(Error::dim("window_reverse", &shape, &[0, w.window_area(), 0])),
    };
    if area != w.window_area() || groups % w.num_windows() != 0 {
        return Err(Error::dim(
            "window_reverse",
            &shape,
            &[w.num_windows(), w.window_area(), d],
        ));
    }
    let batch = groups / w.num_windows();
    let n = w.tokens();
    let mut index = vec![0; batch * n * d];
    for b in 0..batch {
        for (l, win) in w.window_tokens().iter().enumerate() {
            for (p, &tok) in win.iter().enumerate() {
                let src = ((b * w.num_windows() + l) * area + p) * d;
                let dst = (b * n + tok) * d;
                for c in 0..d {
                    index[dst + c] = src + c;
                }
            }
        }
    }
    x.gather(&[batch * n, d], index)
}
