//! Scored multi-head attention: global (MSA) and windowed (W-MSA).
//!
//! One score vector of length `d_head` is shared by the query, key and value
//! embeddings of every head and every window: `Q̃_j = Q_j·diag(α)`, likewise
//! for `K_j` and `V_j`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::window::WindowSpec;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T: Element = f32> {
    /// Query embedding `[d × h·d_head]`; head `j` owns columns `j·d_head..(j+1)·d_head`.
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// Output projection `[h·d_head × d]`.
    pub w_o: Tensor<T>,
    pub heads: usize,
    /// Dimension under the softmax square root. Fixed at the unpruned head
    /// dimension; surgery never changes it.
    pub scale_dim: usize,
    /// Relative position bias table `[(2M−1)² × h]`, when enabled.
    pub rel_pos_bias: Option<Tensor<T>>,
}

impl<T: Element> AttentionParams<T> {
    pub fn new(
        w_q: Tensor<T>,
        w_k: Tensor<T>,
        w_v: Tensor<T>,
        w_o: Tensor<T>,
        heads: usize,
        scale_dim: usize,
    ) -> Result<Self> {
        let p = AttentionParams {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
            scale_dim,
            rel_pos_bias: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, width) = self.w_q.dims2()?;
        if self.heads == 0 || width == 0 || width % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {width} is not a positive multiple of {} heads",
                self.heads
            )));
        }
        for w in [&self.w_k, &self.w_v] {
            if w.shape() != self.w_q.shape() {
                return Err(Error::dim("attention params", self.w_q.shape(), w.shape()));
            }
        }
        if self.w_o.shape() != [width, d] {
            return Err(Error::dim("attention params", &[width, d], self.w_o.shape()));
        }
        if self.scale_dim == 0 {
            return Err(Error::Config("scale_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.shape()[1] / self.heads
    }

    /// Columns of `w` belonging to head `j`, as a `[d × d_head]` matrix.
    pub fn head_slice(w: &Tensor<T>, heads: usize, j: usize) -> Tensor<T> {
        let (d, width) = w.dims2().expect("rank-2 embedding");
        let dh = width / heads;
        let data = (0..d)
            .flat_map(|r| (0..dh).map(move |c| (r, j * dh + c)))
            .map(|(r, c)| w.at2(r, c))
            .collect();
        Tensor::new(&[d, dh], data).expect("head slice shape")
    }

    pub fn parameter_count(&self) -> usize {
        self.w_q.numel()
            + self.w_k.numel()
            + self.w_v.numel()
            + self.w_o.numel()
            + self.rel_pos_bias.as_ref().map_or(0, Tensor::numel)
    }

    pub fn cast<U: Element>(&self) -> AttentionParams<U> {
        AttentionParams {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
            heads: self.heads,
            scale_dim: self.scale_dim,
            rel_pos_bias: self.rel_pos_bias.as_ref().map(Tensor::cast),
        }
    }

    /// Records the weights on `tape` as named leaves under `prefix`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, prefix: &str) -> AttentionVars<'t, T> {
        AttentionVars {
            w_q: tape.param(format!("{prefix}.w_q"), &self.w_q),
            w_k: tape.param(format!("{prefix}.w_k"), &self.w_k),
            w_v: tape.param(format!("{prefix}.w_v"), &self.w_v),
            w_o: tape.param(format!("{prefix}.w_o"), &self.w_o),
            heads: self.heads,
            head_dim: self.head_dim(),
            scale_dim: self.scale_dim,
            rel_pos_bias: self
                .rel_pos_bias
                .as_ref()
                .map(|t| tape.param(format!("{prefix}.rel_pos_bias"), t)),
        }
    }
}

/// Attention weights recorded on a tape.
#[derive(Clone, Debug)]
pub struct AttentionVars<'t, T: Element = f32> {
    pub w_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub w_o: Var<'t, T>,
    pub heads: usize,
    pub head_dim: usize,
    pub scale_dim: usize,
    pub rel_pos_bias: Option<Var<'t, T>>,
}

/// `σ(QKᵀ/√scale_dim + mask)·V` for a single head, `Q, K, V ∈ ℝ^{n×d_h}`.
pub fn scaled_dot_attention<'t, T: Element>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
    scale_dim: usize,
    mask: Option<&Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 2 || sq != sk || sv.len() != 2 || sv[0] != sq[0] {
        return Err(Error::dim("scaled_dot_attention", &sq, &sk));
    }
    if scale_dim == 0 {
        return Err(Error::Config("scale_dim must be positive".into()));
    }
    let n = sq[0];
    let q3 = q.reshape(&[1, n, sq[1]])?;
    let k3 = k.reshape(&[1, n, sk[1]])?;
    let v3 = v.reshape(&[1, n, sv[1]])?;
    let mut logits = q3.bmm(&k3, true)?.scale(1.0 / (scale_dim as f64).sqrt());
    if let Some(m) = mask {
        logits = logits.add(&m.reshape(&[1, n, n])?)?;
    }
    let attn = logits.softmax_rows()?;
    attn.bmm(&v3, false)?.reshape(&[n, sv[1]])
}

/// Tokens attending to each other: every group lists `len` row indices of
/// the input. Groups partition the rows.
pub(crate) struct TokenGroups {
    pub groups: Vec<Vec<usize>>,
    /// Additive mask per group pattern, `[patterns × len × len]`; group `g`
    /// uses pattern `g % patterns`.
    pub mask: Option<Vec<f64>>,
    /// Window side, when relative position bias applies.
    pub window: Option<usize>,
}

impl TokenGroups {
    fn len(&self) -> usize {
        self.groups[0].len()
    }
}

fn tile_scores<'t, T: Element>(scores: Option<&Var<'t, T>>, p: &AttentionVars<'t, T>) -> Result<Option<Var<'t, T>>> {
    let Some(s) = scores else { return Ok(None) };
    let shape = s.shape();
    if shape != [p.head_dim] {
        return Err(Error::Config(format!(
            "attention score length {:?} does not match head dim {}",
            shape, p.head_dim
        )));
    }
    let index = (0..p.heads * p.head_dim).map(|c| c % p.head_dim).collect();
    Ok(Some(s.gather(&[p.heads * p.head_dim], index)?))
}

pub(crate) fn grouped_attention<'t, T: Element>(
    x: &Var<'t, T>,
    p: &AttentionVars<'t, T>,
    scores: Option<&Var<'t, T>>,
    layout: &TokenGroups,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let rows = shape[0];
    let (h, dh) = (p.heads, p.head_dim);
    let width = h * dh;
    let tiled = tile_scores(scores, p)?;
    let embed = |w: &Var<'t, T>| -> Result<Var<'t, T>> {
        let e = x.matmul(w)?;
        match &tiled {
            Some(a) => e.mul_row(a),
            None => Ok(e),
        }
    };
    let (q, k, v) = (embed(&p.w_q)?, embed(&p.w_k)?, embed(&p.w_v)?);

    let len = layout.len();
    let groups = layout.groups.len();
    let g_total = groups * h;
    let mut split = Vec::with_capacity(rows * width);
    for grp in &layout.groups {
        for j in 0..h {
            for &row in grp {
                split.extend((0..dh).map(|c| row * width + j * dh + c));
            }
        }
    }
    let heads_shape = [g_total, len, dh];
    let qg = q.gather(&heads_shape, split.clone())?;
    let kg = k.gather(&heads_shape, split.clone())?;
    let vg = v.gather(&heads_shape, split)?;

    let tape = x.tape();
    let mut logits = qg.bmm(&kg, true)?.scale(1.0 / (p.scale_dim as f64).sqrt());
    if let (Some(table), Some(m)) = (&p.rel_pos_bias, layout.window) {
        let side = 2 * m - 1;
        let mut index = Vec::with_capacity(g_total * len * len);
        for _ in 0..groups {
            for j in 0..h {
                for a in 0..len {
                    for b in 0..len {
                        let dr = (a / m) as isize - (b / m) as isize + m as isize - 1;
                        let dc = (a % m) as isize - (b % m) as isize + m as isize - 1;
                        index.push((dr as usize * side + dc as usize) * h + j);
                    }
                }
            }
        }
        logits = logits.add(&table.gather(&[g_total, len, len], index)?)?;
    }
    if let Some(mask) = &layout.mask {
        let patterns = mask.len() / (len * len);
        let mut full = Vec::with_capacity(g_total * len * len);
        for g in 0..groups {
            let pat = &mask[(g % patterns) * len * len..(g % patterns + 1) * len * len];
            for _ in 0..h {
                full.extend_from_slice(pat);
            }
        }
        logits = logits.add(&tape.constant(&Tensor::from_f64(&[g_total, len, len], &full)?))?;
    }
    let attn = logits.softmax_rows()?;
    let out = attn.bmm(&vg, false)?;

    let mut merge = vec![0; rows * width];
    for (gi, grp) in layout.groups.iter().enumerate() {
        for j in 0..h {
            for (pos, &row) in grp.iter().enumerate() {
                let src = ((gi * h + j) * len + pos) * dh;
                let dst = row * width + j * dh;
                for c in 0..dh {
                    merge[dst + c] = src + c;
                }
            }
        }
    }
    out.gather(&[rows, width], merge)?.matmul(&p.w_o)
}

/// Scored multi-head self-attention over all rows of `x ∈ ℝ^{n×d}`.
pub fn msa_forward<'t, T: Element>(
    x: &Var<'t, T>,
    p: &AttentionVars<'t, T>,
    scores: Option<&Var<'t, T>>,
) -> Result<Var<'t, T>> {
    msa_forward_batch(x, p, scores, 1)
}

/// [`msa_forward`] over `batch` consecutive, independent sequences.
pub fn msa_forward_batch<'t, T: Element>(
    x: &Var<'t, T>,
    p: &AttentionVars<'t, T>,
    scores: Option<&Var<'t, T>>,
    batch: usize,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 2 || batch == 0 || !shape[0].is_multiple_of(batch) {
        return Err(Error::dim("msa_forward", &shape, &[batch]));
    }
    let n = shape[0] / batch;
    let layout = TokenGroups {
        groups: (0..batch).map(|b| (b * n..(b + 1) * n).collect()).collect(),
        mask: None,
        window: None,
    };
    grouped_attention(x, p, scores, &layout)
}

/// Scored window attention. `x` holds one or more images of `w.tokens()`
/// consecutive rows each.
pub fn wmsa_forward<'t, T: Element>(
    x: &Var<'t, T>,
    p: &AttentionVars<'t, T>,
    scores: Option<&Var<'t, T>>,
    w: &WindowSpec,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let n = w.tokens();
    if shape.len() != 2 || !shape[0].is_multiple_of(n) {
        return Err(Error::dim("wmsa_forward", &shape, &[n]));
    }
    let batch = shape[0] / n;
    let windows = w.window_tokens();
    let groups = (0..batch)
        .flat_map(|b| windows.iter().map(move |win| win.iter().map(|t| b * n + t).collect()))
        .collect();
    let layout = TokenGroups {
        groups,
        mask: w.additive_mask(),
        window: Some(w.window),
    };
    grouped_attention(x, p, scores, &layout)
}
