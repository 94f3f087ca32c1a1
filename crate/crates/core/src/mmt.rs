//! Pre-norm transformer block and the section-level multimodal transformer.

use crate::config::{MaskMode, TrainConfig};
use crate::error::{HmtError, Result};
use crate::params::{BlockNames, ParamBinding, MMT_PREFIX};
use crate::tensor::{Graph, Tensor, Var};

/// How attention logits are masked inside one block.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionMask<'a> {
    /// Binary `N × N` allow-matrix; `None` means all-ones.
    pub allow: Option<&'a Tensor>,
    /// Per-head binary boost masks (`N × N` each) with the dynamic weight
    /// matrix, already sliced to `N × N`. Logits become
    /// `logits ⊙ (1 + boost_h) ⊙ W_m`.
    pub boost: Option<(&'a [Tensor], Var)>,
    pub mode: MaskMode,
}

/// Output of one block: the new sequence and the per-head post-softmax
/// attention matrices.
pub struct BlockOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// `E = X + MHSA(LN(X))`, `out = E + MLP(LN(E))`, with `d_k = d / h` and
/// logits scaled by `1/√d_k`.
pub fn transformer_block(
    g: &mut Graph,
    x: Var,
    names: &BlockNames,
    pb: &mut ParamBinding<'_>,
    h: usize,
    mask: AttentionMask<'_>,
) -> Result<BlockOutput> {
    let (seq, d) = g.value(x).dims2();
    if d % h != 0 {
        return Err(HmtError::Config(format!("h = {h} must divide d = {d}")));
    }
    if let Some((boost, _)) = mask.boost {
        if boost.len() != h {
            return Err(HmtError::Config(format!(
                "boost mask has {} heads, block has {h}",
                boost.len()
            )));
        }
    }
    let dk = d / h;
    let scale = 1.0 / (dk as f64).sqrt();

    let (g1, b1) = (pb.var(g, &names.ln1_g)?, pb.var(g, &names.ln1_b)?);
    let xn = g.layer_norm(x, g1, b1, 1e-5)?;
    let (wq, wk, wv) = (pb.var(g, &names.wq)?, pb.var(g, &names.wk)?, pb.var(g, &names.wv)?);
    let q = g.matmul(xn, wq)?;
    let k = g.matmul(xn, wk)?;
    let v = g.matmul(xn, wv)?;

    let literal_mask = match (mask.mode, mask.allow) {
        (MaskMode::Literal, Some(allow)) => Some(g.constant(allow.clone())),
        _ => None,
    };

    let mut heads = Vec::with_capacity(h);
    let mut attention = Vec::with_capacity(h);
    for head in 0..h {
        let qh = g.slice_cols(q, head * dk, dk)?;
        let kh = g.slice_cols(k, head * dk, dk)?;
        let vh = g.slice_cols(v, head * dk, dk)?;
        let raw = g.matmul_bt(qh, kh)?;
        let mut logits = g.scale(raw, scale)?;
        if let Some(dm) = literal_mask {
            logits = g.mul(logits, dm)?;
        }
        if let Some((boost, wm)) = mask.boost {
            if boost[head].dims2() != (seq, seq) {
                return Err(HmtError::dim("boost", boost[head].shape(), &[seq, seq]));
            }
            let factor = Tensor::new(
                vec![seq, seq],
                boost[head].data().iter().map(|b| 1.0 + b).collect(),
            )?;
            let factor = g.constant(factor);
            logits = g.mul(logits, factor)?;
            logits = g.mul(logits, wm)?;
        }
        let allow = match mask.mode {
            MaskMode::Exclusive => mask.allow,
            MaskMode::Literal => None,
        };
        let a = g.softmax_rows(logits, allow)?;
        heads.push(g.matmul(a, vh)?);
        attention.push(a);
    }
    let concat = g.concat_cols(&heads)?;
    let wo = pb.var(g, &names.wo)?;
    let attn_out = g.matmul(concat, wo)?;
    let e = g.add(x, attn_out)?;

    let (g2, b2) = (pb.var(g, &names.ln2_g)?, pb.var(g, &names.ln2_b)?);
    let en = g.layer_norm(e, g2, b2, 1e-5)?;
    let (w1, bb1) = (pb.var(g, &names.w1)?, pb.var(g, &names.b1)?);
    let hidden = g.affine(en, w1, bb1)?;
    let hidden = g.gelu(hidden)?;
    let (w2, bb2) = (pb.var(g, &names.w2)?, pb.var(g, &names.b2)?);
    let mlp = g.affine(hidden, w2, bb2)?;
    let out = g.add(e, mlp)?;
    Ok(BlockOutput { out, attention })
}

/// Runs `cfg.layers` blocks with the same mask and returns the final
/// sequence plus the first layer's attention.
pub fn transformer_stack(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    pb: &mut ParamBinding<'_>,
    cfg: &TrainConfig,
    mask: AttentionMask<'_>,
) -> Result<BlockOutput> {
    let mut cur = x;
    let mut first_attention = None;
    for layer in 0..cfg.layers {
        let block = transformer_block(g, cur, &BlockNames::new(prefix, layer), pb, cfg.h, mask)?;
        cur = block.out;
        first_attention.get_or_insert(block.attention);
    }
    Ok(BlockOutput {
        out: cur,
        attention: first_attention.unwrap_or_default(),
    })
}

#[derive(Debug, Clone)]
pub struct MmtOutput {
    /// CLS row of the output, `1 × d`.
    pub y_pv: Var,
    /// Post-softmax attention per head, `(l+m+1) × (l+m+1)` each.
    pub attention: Vec<Tensor>,
}

pub fn mmt_forward(g: &mut Graph, f_pv: Var, pb: &mut ParamBinding<'_>, cfg: &TrainConfig) -> Result<MmtOutput> {
    let block = transformer_stack(g, f_pv, MMT_PREFIX, pb, cfg, AttentionMask::default())?;
    let y_pv = g.row(block.out, 0)?;
    let attention = block.attention.iter().map(|&a| g.value(a).clone()).collect();
    Ok(MmtOutput { y_pv, attention })
}
