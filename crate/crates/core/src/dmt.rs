//! Dynamic mask transfer: section↔image attention from the section-level
//! transformer becomes sparse sentence↔image boost masks for the
//! sentence-level branches.
//!
//! Everything here works on plain values; the selected masks are constants
//! as far as differentiation is concerned.

use serde_json::{json, Value};

use crate::error::{HmtError, Result};
use crate::tensor::Tensor;

pub use crate::assembly::membership as build_membership;

/// Splits per-head `(l+m+1)²` attention into the section→image (`l×m`) and
/// image→section (`m×l`) blocks. Row/column 0 is CLS.
pub fn extract_cross_blocks(attention: &[Tensor], l: usize, m: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let size = l + m + 1;
    let mut d_pv = Vec::with_capacity(attention.len());
    let mut d_vp = Vec::with_capacity(attention.len());
    for a in attention {
        if a.dims2() != (size, size) {
            return Err(HmtError::dim("extract_cross_blocks", a.shape(), &[size, size]));
        }
        let mut pv = Tensor::zeros(&[l, m]);
        for i in 0..l {
            for j in 0..m {
                pv.data_mut()[i * m + j] = a.at(1 + i, 1 + l + j);
            }
        }
        let mut vp = Tensor::zeros(&[m, l]);
        for j in 0..m {
            for i in 0..l {
                vp.data_mut()[j * l + i] = a.at(1 + l + j, 1 + i);
            }
        }
        d_pv.push(pv);
        d_vp.push(vp);
    }
    Ok((d_pv, d_vp))
}

/// Per row: softmax the scores, then keep the smallest prefix of entries in
/// descending probability (ties by ascending index) whose mass exceeds `eta`.
pub fn topk_select(scores: &Tensor, eta: f64) -> Tensor {
    let (rows, cols) = scores.dims2();
    let mut out = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        let row = scores.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| exp[b].total_cmp(&exp[a]).then(a.cmp(&b)));
        let mut mass = 0.0;
        for &j in &order {
            out.data_mut()[i * cols + j] = 1.0;
            mass += exp[j] / total;
            if mass > eta {
                break;
            }
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Keeps sentence `i` only when its feature has strictly positive cosine
/// similarity with its own section's feature. Returns `(M_sp, T̃_sp)`.
pub fn sparsify_transfer(s: &Tensor, p: &Tensor, t_sp: &Tensor) -> Result<(Vec<bool>, Tensor)> {
    let (n, d) = s.dims2();
    let (l, d2) = p.dims2();
    if d != d2 || t_sp.dims2() != (n, l) {
        return Err(HmtError::dim("sparsify_transfer", s.shape(), t_sp.shape()));
    }
    let mut keep = Vec::with_capacity(n);
    let mut filtered = t_sp.clone();
    for i in 0..n {
        let row = t_sp.row(i);
        let section = row.iter().position(|&v| v != 0.0);
        let k = section.is_some_and(|j| cosine(s.row(i), p.row(j)) > 0.0);
        keep.push(k);
        if !k {
            filtered.data_mut()[i * l..(i + 1) * l].fill(0.0);
        }
    }
    Ok((keep, filtered))
}

fn binary_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, q) = a.dims2();
    let (_, s) = b.dims2();
    let mut c = Tensor::zeros(&[p, s]);
    for i in 0..p {
        for k in 0..q {
            if a.at(i, k) == 0.0 {
                continue;
            }
            for j in 0..s {
                c.data_mut()[i * s + j] += a.at(i, k) * b.at(k, j);
            }
        }
    }
    c
}

/// Per head: `D̃_sv = T̃_sp·D̃_pv`, `D̃_vs = D̃_vp·T̃_spᵀ`, and the assembled
/// `(n+m+1)²` mask holding them in the sentence→image and image→sentence
/// blocks, zero elsewhere.
pub fn compose_masks(
    t_tilde: &Tensor,
    d_pv: &[Tensor],
    d_vp: &[Tensor],
) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)> {
    let (n, l) = t_tilde.dims2();
    let mut svs = Vec::with_capacity(d_pv.len());
    let mut vss = Vec::with_capacity(d_pv.len());
    let mut full = Vec::with_capacity(d_pv.len());
    let t_t = {
        let mut t = Tensor::zeros(&[l, n]);
        for i in 0..n {
            for j in 0..l {
                t.data_mut()[j * n + i] = t_tilde.at(i, j);
            }
        }
        t
    };
    for (pv, vp) in d_pv.iter().zip(d_vp) {
        let (l2, m) = pv.dims2();
        if l2 != l || vp.dims2() != (m, l) {
            return Err(HmtError::dim("compose_masks", pv.shape(), vp.shape()));
        }
        let sv = binary_matmul(t_tilde, pv);
        let vs = binary_matmul(vp, &t_t);
        let size = n + m + 1;
        let mut mask = Tensor::zeros(&[size, size]);
        for i in 0..n {
            for j in 0..m {
                mask.data_mut()[(1 + i) * size + 1 + n + j] = sv.at(i, j);
                mask.data_mut()[(1 + n + j) * size + 1 + i] = vs.at(j, i);
            }
        }
        svs.push(sv);
        vss.push(vs);
        full.push(mask);
    }
    Ok((svs, vss, full))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferMasks {
    /// `h × l × m`
    pub d_pv: Vec<Tensor>,
    /// `h × m × l`
    pub d_vp: Vec<Tensor>,
    /// `n`
    pub m_sp: Vec<bool>,
    /// `n × l`
    pub t_tilde: Tensor,
    /// `h × n × m`
    pub d_sv: Vec<Tensor>,
    /// `h × m × n`
    pub d_vs: Vec<Tensor>,
    /// `h × (n+m+1) × (n+m+1)`
    pub d_mask: Vec<Tensor>,
}

/// Masks are binary, so rows are written as 0/1 integers.
fn nested(t: &Tensor) -> Value {
    let (p, _) = t.dims2();
    Value::Array(
        (0..p)
            .map(|i| json!(t.row(i).iter().map(|&v| u8::from(v != 0.0)).collect::<Vec<_>>()))
            .collect(),
    )
}

fn nested_heads(ts: &[Tensor]) -> Value {
    Value::Array(ts.iter().map(nested).collect())
}

impl TransferMasks {
    /// Head-major nested arrays.
    pub fn to_json(&self) -> Value {
        json!({
            "d_pv": nested_heads(&self.d_pv),
            "d_vp": nested_heads(&self.d_vp),
            "m_sp": self.m_sp.iter().map(|&b| u8::from(b)).collect::<Vec<_>>(),
            "t_sp": nested(&self.t_tilde),
            "d_sv": nested_heads(&self.d_sv),
            "d_vs": nested_heads(&self.d_vs),
            "d_mask": nested_heads(&self.d_mask),
        })
    }
}

/// Runs selection, sparsification and composition for every head.
/// `s` are the sentence features, `p` the section features.
pub fn dmt_pipeline(
    attention: &[Tensor],
    s: &Tensor,
    p: &Tensor,
    t_sp: &Tensor,
    eta: f64,
    dmmt_heads: usize,
) -> Result<TransferMasks> {
    if attention.len() != dmmt_heads {
        return Err(HmtError::Config(format!(
            "section transformer has {} heads, sentence transformer {dmmt_heads}",
            attention.len()
        )));
    }
    let (l, _) = p.dims2();
    let size = attention.first().map_or(0, |a| a.dims2().0);
    let m = size.checked_sub(l + 1).filter(|&m| m > 0).ok_or_else(|| {
        HmtError::Config(format!("attention of size {size} cannot hold {l} sections and an image"))
    })?;
    let (raw_pv, raw_vp) = extract_cross_blocks(attention, l, m)?;
    let d_pv: Vec<Tensor> = raw_pv.iter().map(|t| topk_select(t, eta)).collect();
    let d_vp: Vec<Tensor> = raw_vp.iter().map(|t| topk_select(t, eta)).collect();
    let (m_sp, t_tilde) = sparsify_transfer(s, p, t_sp)?;
    let (d_sv, d_vs, d_mask) = compose_masks(&t_tilde, &d_pv, &d_vp)?;
    Ok(TransferMasks {
        d_pv,
        d_vp,
        m_sp,
        t_tilde,
        d_sv,
        d_vs,
        d_mask,
    })
}
