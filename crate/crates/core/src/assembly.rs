//! Turns a feature bundle into the two token sequences the transformers
//! consume: `[CLS_p; P; H]` at section level and `[CLS_s; Ŝ; H]` at
//! sentence level.

use crate::config::TrainConfig;
use crate::docfeat::{ensure_valid, sentence_sections, DocFeatureBundle};
use crate::error::{HmtError, Result};
use crate::params::ParamBinding;
use crate::tensor::{Graph, Tensor, Var};

/// Sentence features: per-sentence column max over its word rows, then an
/// affine map. Padding slots (id 0) never pool.
pub fn stg(g: &mut Graph, words: Var, s_mask: &[u32], w: Var, b: Var) -> Result<Var> {
    let n = s_mask.iter().copied().max().unwrap_or(0);
    if n == 0 {
        return Err(HmtError::EmptyPool);
    }
    let mut pooled = Vec::with_capacity(n as usize);
    for id in 1..=n {
        let select: Vec<bool> = s_mask.iter().map(|&v| v == id).collect();
        pooled.push(g.col_max_pool(words, Some(&select))?);
    }
    let stacked = g.concat_rows(&pooled)?;
    g.affine(stacked, w, b)
}

pub fn project_images(g: &mut Graph, raw: Var, w: Var, b: Var) -> Result<Var> {
    g.affine(raw, w, b)
}

/// `ŝ_i = [s_i ; maxpool(H)] · W_c + b_c`
pub fn fuse_sentences(g: &mut Graph, s: Var, h: Var, w: Var, b: Var) -> Result<Var> {
    let n = g.value(s).dims2().0;
    let pooled = g.col_max_pool(h, None)?;
    let tiled = g.concat_rows(&vec![pooled; n])?;
    let joined = g.concat_cols(&[s, tiled])?;
    g.affine(joined, w, b)
}

/// Binary `n × l` sentence→section membership.
pub fn membership(s_mask: &[u32], l: usize, r: usize) -> Tensor {
    let owners = sentence_sections(s_mask, l, r);
    let mut t = Tensor::zeros(&[owners.len().max(1), l]);
    for (i, &j) in owners.iter().enumerate() {
        t.data_mut()[i * l + j] = 1.0;
    }
    t
}

/// Graph handles for one assembled document.
#[derive(Debug, Clone)]
pub struct AssembledDoc {
    pub l: usize,
    pub n: usize,
    pub m: usize,
    /// `(l+m+1) × d`
    pub f_pv: Var,
    /// `(n+m+1) × d`
    pub f_sv: Var,
    /// `(n+1) × d`, the text-only prefix of `f_sv`
    pub text_seq: Var,
    /// Raw sentence features `n × d` (before image fusion).
    pub s: Var,
    /// Section features as read from the bundle.
    pub p: Var,
    /// Projected image features `m × d`.
    pub h: Var,
    /// `n × l`
    pub t_sp: Tensor,
}

pub fn build_sequences(
    g: &mut Graph,
    bundle: &DocFeatureBundle,
    pb: &mut ParamBinding<'_>,
    cfg: &TrainConfig,
) -> Result<AssembledDoc> {
    ensure_valid(bundle)?;
    let (l, n, m) = (bundle.l, bundle.n, bundle.m);
    if bundle.d != cfg.d || bundle.r != cfg.r {
        return Err(HmtError::Config(format!(
            "document {} has (d, r) = ({}, {}), model expects ({}, {})",
            bundle.doc_id, bundle.d, bundle.r, cfg.d, cfg.r
        )));
    }
    if l > cfg.l_max || n > cfg.n_max || m > cfg.m_max {
        return Err(HmtError::Config(format!(
            "document {} has (l, n, m) = ({l}, {n}, {m}), limits are ({}, {}, {})",
            bundle.doc_id, cfg.l_max, cfg.n_max, cfg.m_max
        )));
    }

    let words = g.constant(bundle.words.clone());
    let p = g.constant(bundle.sections.clone());
    let raw_images = if cfg.enable_mmt_images {
        bundle.images.clone()
    } else {
        Tensor::zeros(bundle.images.shape())
    };
    let raw_images = g.constant(raw_images);

    let (ws, bs) = (pb.var(g, "stg.w")?, pb.var(g, "stg.b")?);
    let s = stg(g, words, &bundle.s_mask, ws, bs)?;
    let (wh, bh) = (pb.var(g, "img.w")?, pb.var(g, "img.b")?);
    let h = project_images(g, raw_images, wh, bh)?;
    let (wc, bc) = (pb.var(g, "fuse.w")?, pb.var(g, "fuse.b")?);
    let s_hat = fuse_sentences(g, s, h, wc, bc)?;

    let pos_sec = pb.var(g, "pos.section")?;
    let pos_sec = g.slice_rows(pos_sec, 0, l)?;
    let p_pos = g.add(p, pos_sec)?;
    let pos_sen = pb.var(g, "pos.sentence")?;
    let pos_sen = g.slice_rows(pos_sen, 0, n)?;
    let s_pos = g.add(s_hat, pos_sen)?;

    let cls_p = pb.var(g, "cls.section")?;
    let cls_s = pb.var(g, "cls.sentence")?;
    let f_pv = g.concat_rows(&[cls_p, p_pos, h])?;
    let text_seq = g.concat_rows(&[cls_s, s_pos])?;
    let f_sv = g.concat_rows(&[text_seq, h])?;

    Ok(AssembledDoc {
        l,
        n,
        m,
        f_pv,
        f_sv,
        text_seq,
        s,
        p,
        h,
        t_sp: membership(&bundle.s_mask, l, bundle.r),
    })
}
