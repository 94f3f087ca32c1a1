//! End-to-end central-difference check of every parameter gradient.

use serde::Serialize;

use crate::config::TrainConfig;
use crate::docfeat::{synth_generate, SynthSpec};
use crate::docfeat::DocFeatureBundle;
use crate::error::Result;
use crate::exec::Exec;
use crate::model::{document_loss, loss_and_gradients};
use crate::params::ModelParams;

pub const FD_STEP: f64 = 1e-5;
/// Gradient norms below this are compared on an absolute scale.
pub const NORM_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, NORM_FLOOR)`
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params: Vec<ParamCheck>,
    pub loss: f64,
}

/// One document shaped to the config limits: `l_max` sections, `m_max`
/// images and at most `n_max` sentences.
pub fn desk_document(cfg: &TrainConfig, seed: u64) -> Result<DocFeatureBundle> {
    let per_section = (cfg.n_max / cfg.l_max).max(1);
    let split = synth_generate(&SynthSpec {
        docs: 1,
        classes: cfg.classes,
        d: cfg.d,
        r: cfg.r,
        sections: (cfg.l_max, cfg.l_max),
        images: (cfg.m_max, cfg.m_max),
        sentences_per_section: (1, per_section.min(cfg.r)),
        seed,
        ..SynthSpec::default()
    })?;
    Ok(split.docs.into_iter().next().expect("one document"))
}

fn rel(diff: f64, a: f64, b: f64) -> f64 {
    diff / a.max(b).max(NORM_FLOOR)
}

/// Compares backprop gradients with `(L(θ+h) − L(θ−h)) / 2h` for every
/// scalar of every parameter tensor.
pub fn gradcheck(doc: &DocFeatureBundle, params: &ModelParams, cfg: &TrainConfig, exec: Exec) -> Result<GradcheckReport> {
    let (loss, analytic) = loss_and_gradients(doc, params, cfg)?;
    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.to_string(), i)))
        .collect();
    let numeric = exec.map_init(
        &coords,
        || params.clone(),
        |local, (name, i)| -> Result<f64> {
            let original = local.get(name)?.data()[*i];
            local.get_mut(name)?.data_mut()[*i] = original + FD_STEP;
            let plus = document_loss(doc, local, cfg);
            local.get_mut(name)?.data_mut()[*i] = original - FD_STEP;
            let minus = document_loss(doc, local, cfg);
            local.get_mut(name)?.data_mut()[*i] = original;
            Ok((plus? - minus?) / (2.0 * FD_STEP))
        },
    );
    let numeric: Vec<f64> = numeric.into_iter().collect::<Result<_>>()?;

    let mut checks = Vec::new();
    let mut offset = 0;
    for (name, t) in params.iter() {
        let a = &analytic[name];
        let n = &numeric[offset..offset + t.numel()];
        offset += t.numel();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
        checks.push(ParamCheck {
            name: name.to_string(),
            elements: t.numel(),
            rel_err: rel(norm(&diff), norm(a), norm(n)),
            max_abs_err: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
            grad_norm: norm(a),
        });
    }
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("at least one parameter");
    Ok(GradcheckReport {
        max_rel_err: worst.rel_err,
        worst_param: worst.name.clone(),
        loss,
        params: checks.clone(),
    })
}
