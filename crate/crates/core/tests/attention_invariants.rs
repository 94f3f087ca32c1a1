use hmt_core::config::{MaskMode, TrainConfig, Window};
use hmt_core::dmmt::build_window_mask;
use hmt_core::docfeat::{synth_generate, SynthMode, SynthSpec};
use hmt_core::model::model_forward;
use hmt_core::params::ModelParams;
use hmt_core::Tensor;
use proptest::prelude::*;

fn rows_sum_to_one(a: &Tensor) -> bool {
    let (p, _) = a.dims2();
    (0..p).all(|i| (a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9)
}

fn config(windows: Vec<Window>, layers: usize, dmt: bool) -> TrainConfig {
    TrainConfig { d: 16, h: 2, layers, windows, enable_dmt: dmt, ..TrainConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_and_fusion_are_normalised(
        seed in any::<u64>(),
        param_seed in 0u64..1000,
        layers in 1usize..=2,
        dmt in any::<bool>(),
        half in 0usize..3,
        xor in any::<bool>(),
    ) {
        let windows = vec![Window::Size(2 * half + 1), Window::Full];
        let cfg = TrainConfig { seed: param_seed, ..config(windows.clone(), layers, dmt) };
        let mode = if xor { SynthMode::Xor } else { SynthMode::Planted };
        let split = synth_generate(&SynthSpec { docs: 2, d: 16, mode, seed, ..SynthSpec::default() }).unwrap();
        let params = ModelParams::init(&cfg).unwrap();
        for doc in &split.docs {
            let out = model_forward(doc, &params, &cfg).unwrap();
            let diag = &out.diagnostics;
            prop_assert_eq!(diag.mmt_attention.len(), cfg.h);
            for a in &diag.mmt_attention {
                prop_assert_eq!(a.dims2(), (doc.l + doc.m + 1, doc.l + doc.m + 1));
                prop_assert!(rows_sum_to_one(a));
            }
            prop_assert_eq!(diag.dmmt_attention.len(), windows.len());
            for (branch, &w) in diag.dmmt_attention.iter().zip(&windows) {
                let mask = build_window_mask(doc.n, doc.m, w).unwrap().mask;
                for a in branch {
                    prop_assert!(rows_sum_to_one(a));
                    for (v, allow) in a.data().iter().zip(mask.data()) {
                        if *allow == 0.0 {
                            prop_assert_eq!(*v, 0.0);
                        }
                    }
                }
            }
            let alpha = diag.alpha.as_ref().unwrap();
            let (b, d) = alpha.dims2();
            prop_assert_eq!(b, windows.len() + 1);
            for j in 0..d {
                let col: f64 = (0..b).map(|i| alpha.at(i, j)).sum();
                prop_assert!((col - 1.0).abs() < 1e-9);
            }
            prop_assert!(out.logits.data().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn literal_mode_rows_still_normalise() {
    let cfg = TrainConfig { mask_mode: MaskMode::Literal, ..config(vec![Window::Size(3)], 1, true) };
    let split = synth_generate(&SynthSpec { docs: 4, d: 16, seed: 9, ..SynthSpec::default() }).unwrap();
    let params = ModelParams::init(&cfg).unwrap();
    for doc in &split.docs {
        let out = model_forward(doc, &params, &cfg).unwrap();
        for a in out.diagnostics.dmmt_attention.iter().flatten() {
            assert!(rows_sum_to_one(a));
        }
    }
}
