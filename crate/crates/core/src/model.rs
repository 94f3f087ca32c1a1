//! Full model: assembly, section-level transformer, mask transfer,
//! sentence-level branches, fusion and the classification head.

use crate::assembly::build_sequences;
use crate::config::TrainConfig;
use crate::dmmt::{dmmt_forward, Boost};
use crate::dmt::{dmt_pipeline, TransferMasks};
use crate::docfeat::DocFeatureBundle;
use crate::error::{HmtError, Result};
use crate::mmt::mmt_forward;
use crate::params::{Gradients, ModelParams, ParamBinding};
use crate::tensor::{Graph, Tensor, Var};

/// Values recorded during one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// `branches × d` fusion weights; `None` without the sentence level.
    pub alpha: Option<Tensor>,
    pub transfer: Option<TransferMasks>,
    /// Section-level attention per head.
    pub mmt_attention: Vec<Tensor>,
    /// Sentence-level attention per multimodal branch, per head.
    pub dmmt_attention: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Length `classes`.
    pub logits: Tensor,
    pub diagnostics: Diagnostics,
}

/// Where the sentence-level boost masks come from.
#[derive(Debug, Clone, Copy)]
pub enum BoostSource<'a> {
    /// Computed by mask transfer when `enable_dmt` is set, absent otherwise.
    Transfer,
    /// Caller-supplied per-head `(n+m+1)²` masks, used regardless of `enable_dmt`.
    Fixed(&'a [Tensor]),
}

struct Traced {
    logits: Var,
    diagnostics: Diagnostics,
}

fn trace(
    g: &mut Graph,
    bundle: &DocFeatureBundle,
    pb: &mut ParamBinding<'_>,
    cfg: &TrainConfig,
    source: BoostSource<'_>,
) -> Result<Traced> {
    let doc = build_sequences(g, bundle, pb, cfg)?;
    let mmt = mmt_forward(g, doc.f_pv, pb, cfg)?;
    let mut diagnostics = Diagnostics {
        mmt_attention: mmt.attention.clone(),
        ..Diagnostics::default()
    };

    let u = if cfg.enable_dmmt {
        let masks = match source {
            BoostSource::Fixed(m) => Some(m.to_vec()),
            BoostSource::Transfer if cfg.enable_dmt => {
                let s = g.value(doc.s).clone();
                let p = g.value(doc.p).clone();
                let transfer = dmt_pipeline(&mmt.attention, &s, &p, &doc.t_sp, cfg.eta, cfg.h)?;
                let masks = transfer.d_mask.clone();
                diagnostics.transfer = Some(transfer);
                Some(masks)
            }
            BoostSource::Transfer => None,
        };
        let boost = match &masks {
            Some(m) => Some(Boost {
                masks: m,
                wm: pb.var(g, "dmmt.wm")?,
            }),
            None => None,
        };
        let out = dmmt_forward(g, doc.f_sv, doc.text_seq, doc.n, doc.m, boost, pb, cfg)?;
        diagnostics.alpha = Some(g.value(out.alpha).clone());
        diagnostics.dmmt_attention = out
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&a| g.value(a).clone()).collect())
            .collect();
        let stack = g.concat_rows(&[mmt.y_pv, out.y_sv])?;
        g.col_max_pool(stack, None)?
    } else {
        g.col_max_pool(mmt.y_pv, None)?
    };

    let (wu, bu) = (pb.var(g, "head.w")?, pb.var(g, "head.b")?);
    let logits = g.affine(u, wu, bu)?;
    Ok(Traced { logits, diagnostics })
}

fn logits_vector(t: &Tensor) -> Tensor {
    Tensor::vector(t.data().to_vec()).expect("non-empty logits")
}

pub fn model_forward(bundle: &DocFeatureBundle, params: &ModelParams, cfg: &TrainConfig) -> Result<ForwardOutput> {
    model_forward_with(bundle, params, cfg, BoostSource::Transfer)
}

pub fn model_forward_with(
    bundle: &DocFeatureBundle,
    params: &ModelParams,
    cfg: &TrainConfig,
    source: BoostSource<'_>,
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let mut pb = ParamBinding::new(params, false);
    let traced = trace(&mut g, bundle, &mut pb, cfg, source)?;
    Ok(ForwardOutput {
        logits: logits_vector(g.value(traced.logits)),
        diagnostics: traced.diagnostics,
    })
}

/// `-ln softmax(logits)[label]`.
pub fn loss_ce(logits: &Tensor, label: usize) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let loss = g.cross_entropy(z, label)?;
    Ok(g.value(loss).data()[0])
}

/// Loss and per-parameter gradients for one document.
pub fn loss_and_gradients(
    bundle: &DocFeatureBundle,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients)> {
    let label = bundle.label as usize;
    if label >= cfg.classes {
        return Err(HmtError::LabelOutOfRange {
            label,
            classes: cfg.classes,
        });
    }
    let mut g = Graph::new();
    let mut pb = ParamBinding::new(params, true);
    let traced = trace(&mut g, bundle, &mut pb, cfg, BoostSource::Transfer)?;
    let loss = g.cross_entropy(traced.logits, label)?;
    g.backward(loss)?;
    Ok((g.value(loss).data()[0], pb.gradients(&g)))
}

/// Loss only, with parameters as constants.
pub fn document_loss(bundle: &DocFeatureBundle, params: &ModelParams, cfg: &TrainConfig) -> Result<f64> {
    let out = model_forward(bundle, params, cfg)?;
    loss_ce(&out.logits, bundle.label as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docfeat::{synth_generate, SynthSpec};

    fn docs(n: usize, classes: usize) -> Vec<DocFeatureBundle> {
        synth_generate(&SynthSpec {
            docs: n,
            classes,
            seed: 3,
            ..SynthSpec::default()
        })
        .unwrap()
        .docs
    }

    #[test]
    fn zero_head_gives_uniform_prediction() {
        let cfg = TrainConfig {
            classes: 3,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(&cfg).unwrap();
        params.set("head.w", Tensor::zeros(&[cfg.d, 3])).unwrap();
        params.set("head.b", Tensor::zeros(&[3])).unwrap();
        let doc = &docs(1, 3)[0];
        let out = model_forward(doc, &params, &cfg).unwrap();
        assert_eq!(out.logits.data(), &[0.0, 0.0, 0.0]);
        let loss = loss_ce(&out.logits, 0).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn disabled_transfer_matches_neutral_boost() {
        let cfg = TrainConfig::default();
        let params = ModelParams::init(&cfg).unwrap();
        let off = TrainConfig {
            enable_dmt: false,
            ..cfg.clone()
        };
        for doc in &docs(5, 2) {
            let size = doc.n + doc.m + 1;
            let neutral = vec![Tensor::zeros(&[size, size]); cfg.h];
            let a = model_forward(doc, &params, &off).unwrap();
            let b = model_forward_with(doc, &params, &cfg, BoostSource::Fixed(&neutral)).unwrap();
            assert_eq!(a.logits.data(), b.logits.data());
        }
    }

    #[test]
    fn diagnostics_shapes() {
        let cfg = TrainConfig::default();
        let params = ModelParams::init(&cfg).unwrap();
        let doc = &docs(1, 2)[0];
        let out = model_forward(doc, &params, &cfg).unwrap();
        let d = &out.diagnostics;
        assert_eq!(d.alpha.as_ref().unwrap().shape(), &[cfg.windows.len() + 1, cfg.d]);
        assert_eq!(d.dmmt_attention.len(), cfg.windows.len());
        assert_eq!(d.mmt_attention.len(), cfg.h);
        let t = d.transfer.as_ref().unwrap();
        assert_eq!(t.d_mask[0].shape(), &[doc.n + doc.m + 1, doc.n + doc.m + 1]);
    }

    #[test]
    fn section_level_only_ignores_sentence_params() {
        let cfg = TrainConfig {
            enable_dmmt: false,
            ..TrainConfig::default()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let doc = &docs(1, 2)[0];
        let (_, grads) = loss_and_gradients(doc, &params, &cfg).unwrap();
        assert!(grads["dmmt.f1.w"].iter().all(|&v| v == 0.0));
        assert!(grads["head.w"].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn loss_matches_forward() {
        let cfg = TrainConfig::default();
        let params = ModelParams::init(&cfg).unwrap();
        for doc in &docs(3, 2) {
            let (loss, _) = loss_and_gradients(doc, &params, &cfg).unwrap();
            assert_eq!(loss, document_loss(doc, &params, &cfg).unwrap());
        }
    }
}
