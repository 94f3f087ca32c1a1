//! Sentence-level multimodal transformer with multi-scale window masks, a
//! text-only branch, and per-channel dynamic fusion of the branch outputs.

use crate::config::{TrainConfig, Window};
use crate::error::{HmtError, Result};
use crate::mmt::{transformer_stack, AttentionMask};
use crate::params::{ParamBinding, DMMT_SHARED_PREFIX, DMMT_TEXT_PREFIX};
use crate::tensor::{Graph, Tensor, Var};

/// Binary `(n+m+1)²` attention allow-matrix over `[CLS; sentences; images]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowMask {
    pub window: Window,
    pub mask: Tensor,
}

/// Sentence `i` may attend sentence `j` iff `|i-j| <= w/2`; CLS and image
/// rows/columns are always open.
pub fn build_window_mask(n: usize, m: usize, window: Window) -> Result<WindowMask> {
    let size = n + m + 1;
    let radius = match window {
        Window::Size(w) if w % 2 == 0 || w == 0 => {
            return Err(HmtError::Config(format!("window size {w} must be odd")))
        }
        Window::Size(w) => Some(w / 2),
        Window::Full => None,
    };
    let is_sentence = |i: usize| (1..=n).contains(&i);
    let mut mask = Tensor::zeros(&[size, size]);
    for i in 0..size {
        for j in 0..size {
            let open = match radius {
                Some(rad) if is_sentence(i) && is_sentence(j) => i.abs_diff(j) <= rad,
                _ => true,
            };
            if open {
                mask.data_mut()[i * size + j] = 1.0;
            }
        }
    }
    Ok(WindowMask { window, mask })
}

/// Per-head boost masks and the full dynamic weight matrix.
#[derive(Clone, Copy)]
pub struct Boost<'a> {
    pub masks: &'a [Tensor],
    pub wm: Var,
}

pub struct BranchOutput {
    /// CLS row, `1 × d`.
    pub y: Var,
    pub attention: Vec<Var>,
}

/// One multimodal branch over `f_sv` under a window mask, optionally
/// boosted by transferred masks. Weights are shared across branches.
pub fn masked_mm_forward(
    g: &mut Graph,
    f_sv: Var,
    window: &WindowMask,
    boost: Option<Boost<'_>>,
    pb: &mut ParamBinding<'_>,
    cfg: &TrainConfig,
) -> Result<BranchOutput> {
    let size = g.value(f_sv).dims2().0;
    if window.mask.dims2() != (size, size) {
        return Err(HmtError::dim("window_mask", window.mask.shape(), &[size, size]));
    }
    let boost = match boost {
        Some(b) => {
            let wm = g.slice_block(b.wm, 0, size, 0, size)?;
            Some((b.masks, wm))
        }
        None => None,
    };
    let mask = AttentionMask {
        allow: Some(&window.mask),
        boost,
        mode: cfg.mask_mode,
    };
    let block = transformer_stack(g, f_sv, DMMT_SHARED_PREFIX, pb, cfg, mask)?;
    let y = g.row(block.out, 0)?;
    Ok(BranchOutput {
        y,
        attention: block.attention,
    })
}

/// Plain transformer over `[CLS_s; Ŝ]`; never sees image rows.
pub fn text_branch_forward(g: &mut Graph, text_seq: Var, pb: &mut ParamBinding<'_>, cfg: &TrainConfig) -> Result<Var> {
    let block = transformer_stack(g, text_seq, DMMT_TEXT_PREFIX, pb, cfg, AttentionMask::default())?;
    g.row(block.out, 0)
}

pub struct FusedOutput {
    /// `1 × d` after summing over branches (shape `[d]`).
    pub y_sv: Var,
    /// `branches × d`, each column a probability vector.
    pub alpha: Var,
}

/// `α = softmax_branches(F2(relu(F1(y))))` per channel, `y_sv = Σ α_i ⊙ y_i`.
/// With `dynamic = false` every branch gets weight `1/branches`.
pub fn dynamic_fuse(g: &mut Graph, y_stack: Var, pb: &mut ParamBinding<'_>, dynamic: bool) -> Result<FusedOutput> {
    let (branches, d) = g.value(y_stack).dims2();
    let alpha = if dynamic {
        let (w1, b1) = (pb.var(g, "dmmt.f1.w")?, pb.var(g, "dmmt.f1.b")?);
        let (w2, b2) = (pb.var(g, "dmmt.f2.w")?, pb.var(g, "dmmt.f2.b")?);
        let z = g.affine(y_stack, w1, b1)?;
        let z = g.relu(z)?;
        let y_fuse = g.affine(z, w2, b2)?;
        g.softmax_cols(y_fuse)?
    } else {
        g.constant(Tensor::filled(&[branches, d], 1.0 / branches as f64))
    };
    let weighted = g.mul(alpha, y_stack)?;
    let y_sv = g.sum_rows(weighted)?;
    Ok(FusedOutput { y_sv, alpha })
}

pub struct DmmtOutput {
    pub y_sv: Var,
    pub alpha: Var,
    /// Branch CLS outputs in stacking order (text branch first when enabled).
    pub branch_outputs: Vec<Var>,
    /// Per multimodal branch, per head.
    pub attention: Vec<Vec<Var>>,
}

pub fn dmmt_forward(
    g: &mut Graph,
    f_sv: Var,
    text_seq: Var,
    n: usize,
    m: usize,
    boost: Option<Boost<'_>>,
    pb: &mut ParamBinding<'_>,
    cfg: &TrainConfig,
) -> Result<DmmtOutput> {
    let mut outputs = Vec::with_capacity(cfg.windows.len() + 1);
    if cfg.enable_text_branch {
        outputs.push(text_branch_forward(g, text_seq, pb, cfg)?);
    }
    let mut attention = Vec::with_capacity(cfg.windows.len());
    for &w in &cfg.windows {
        let mask = build_window_mask(n, m, w)?;
        let branch = masked_mm_forward(g, f_sv, &mask, boost, pb, cfg)?;
        outputs.push(branch.y);
        attention.push(branch.attention);
    }
    let stack = g.concat_rows(&outputs)?;
    let fused = dynamic_fuse(g, stack, pb, cfg.enable_dynamic_fusion)?;
    Ok(DmmtOutput {
        y_sv: fused.y_sv,
        alpha: fused.alpha,
        branch_outputs: outputs,
        attention,
    })
}
