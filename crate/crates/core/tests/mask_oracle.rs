mod common;

use common::*;
use hmt_core::config::Window;
use hmt_core::dmmt::build_window_mask;
use hmt_core::dmt::{build_membership, compose_masks, dmt_pipeline, sparsify_transfer, topk_select};
use hmt_core::Tensor;
use proptest::prelude::*;

#[test]
fn window_seven_over_twenty_five_sentences() {
    let got = build_window_mask(25, 5, Window::Size(7)).unwrap();
    assert_eq!(to_mat(&got.mask), brute_window(25, 5, Some(7)));
}

#[test]
fn window_masks_match_enumeration() {
    for n in 1..=12 {
        for m in 1..=4 {
            for w in [1, 3, 5, 7, 9, 31] {
                let got = build_window_mask(n, m, Window::Size(w)).unwrap();
                assert_eq!(to_mat(&got.mask), brute_window(n, m, Some(w)), "n={n} m={m} w={w}");
            }
            let full = build_window_mask(n, m, Window::Full).unwrap();
            assert_eq!(to_mat(&full.mask), brute_window(n, m, None));
        }
    }
}

#[test]
fn worked_selection_example() {
    // softmax([ln 5, ln 3, ln 2]) = [0.5, 0.3, 0.2]; 0.5 ≤ 0.65 < 0.8
    let scores = Tensor::from_rows(&[vec![5f64.ln(), 3f64.ln(), 2f64.ln()]]).unwrap();
    assert_eq!(topk_select(&scores, 0.65).data(), &[1., 1., 0.]);
    assert_eq!(topk_select(&scores, 0.45).data(), &[1., 0., 0.]);
    assert_eq!(topk_select(&scores, 0.85).data(), &[1., 1., 1.]);
}

#[test]
fn worked_example_threaded_end_to_end() {
    // l = 2, m = 3, one head; section 0 puts 0.5/0.3/0.2 on the images,
    // section 1 splits evenly.
    let (l, m) = (2, 3);
    let size = l + m + 1;
    let mut a = vec![vec![1.0 / size as f64; size]; size];
    a[1] = vec![0.0, 0.0, 0.0, 5f64.ln(), 3f64.ln(), 2f64.ln()];
    a[2] = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let s = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
    let p = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let owner = [0, 0, 1];
    let t_sp = to_tensor(&owner.iter().map(|&o| (0..l).map(|j| f64::from(u8::from(j == o))).collect()).collect());
    let got = dmt_pipeline(&[to_tensor(&a)], &to_tensor(&s), &to_tensor(&p), &t_sp, 0.65, 1).unwrap();
    assert_eq!(got.m_sp, vec![true, false, true]);
    // raw cross block entries enter a second softmax
    let brute = brute_dmt(&[a], &s, &p, &owner, 0.65);
    assert_eq!(to_mat(&got.d_sv[0]), brute.d_sv[0]);
    assert_eq!(to_mat(&got.d_mask[0]), brute.d_mask[0]);
    assert_eq!(brute.d_sv[0][1], vec![0.0; 3]);
}

#[test]
fn hundred_random_instances_match_brute_force() {
    let mut r = rng(2024);
    for case in 0..100 {
        let inst = random_instance(&mut r);
        let attention: Vec<Tensor> = inst.attention.iter().map(to_tensor).collect();
        let got = dmt_pipeline(
            &attention,
            &to_tensor(&inst.s),
            &to_tensor(&inst.p),
            &to_tensor(&inst.t_sp()),
            0.65,
            inst.h,
        )
        .unwrap();
        let want = brute_dmt(&inst.attention, &inst.s, &inst.p, &inst.owner, 0.65);
        let mats = |v: &[Tensor]| v.iter().map(to_mat).collect::<Vec<_>>();
        assert_eq!(mats(&got.d_pv), want.d_pv, "case {case}");
        assert_eq!(mats(&got.d_vp), want.d_vp, "case {case}");
        assert_eq!(got.m_sp, want.keep, "case {case}");
        assert_eq!(to_mat(&got.t_tilde), want.t_tilde, "case {case}");
        assert_eq!(mats(&got.d_sv), want.d_sv, "case {case}");
        assert_eq!(mats(&got.d_vs), want.d_vs, "case {case}");
        assert_eq!(mats(&got.d_mask), want.d_mask, "case {case}");
    }
}

#[test]
fn membership_from_masks() {
    // section 0: sentences 1, 2; sentence 2 spills into section 1 for one slot
    let s_mask = [1, 1, 2, 2, 2, 3, 3, 0];
    let t = build_membership(&s_mask, 2, 4);
    assert_eq!(to_mat(&t), vec![vec![1., 0.], vec![1., 0.], vec![0., 1.]]);
}

#[test]
fn eta_near_one_selects_every_image() {
    let scores = Tensor::from_rows(&[vec![0.3, -0.1, 0.7, 0.2], vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
    let sel = topk_select(&scores, 1.0 - 1e-12);
    assert!(sel.data().iter().all(|&v| v == 1.0));
    let t = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.], vec![0., 1.]]).unwrap();
    let vp = Tensor::ones(&[4, 2]);
    let (sv, _, _) = compose_masks(&t, &[sel], &[vp]).unwrap();
    assert!(sv[0].data().iter().all(|&v| v == 1.0));
}

fn scores_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=4, 1usize..=6).prop_flat_map(|(rows, cols)| {
        proptest::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |v| (rows, cols, v))
    })
}

proptest! {
    #[test]
    fn topk_matches_exhaustive_search((rows, cols, v) in scores_strategy(), eta in 0.05f64..0.99) {
        let t = Tensor::new(vec![rows, cols], v.clone()).unwrap();
        let got = topk_select(&t, eta);
        for i in 0..rows {
            prop_assert_eq!(got.row(i).to_vec(), exhaustive_topk(&v[i * cols..(i + 1) * cols], eta));
        }
    }

    #[test]
    fn selection_is_nonempty_and_monotone_in_eta((rows, cols, v) in scores_strategy(), a in 0.05f64..0.99, b in 0.05f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t = Tensor::new(vec![rows, cols], v).unwrap();
        let small = topk_select(&t, lo);
        let large = topk_select(&t, hi);
        for i in 0..rows {
            prop_assert!(small.row(i).iter().sum::<f64>() >= 1.0);
            for (x, y) in small.row(i).iter().zip(large.row(i)) {
                prop_assert!(*x <= *y);
            }
        }
    }

    #[test]
    fn composed_masks_are_binary_and_respect_filter(seed in any::<u64>()) {
        let inst = random_instance(&mut rng(seed));
        let attention: Vec<Tensor> = inst.attention.iter().map(to_tensor).collect();
        let out = dmt_pipeline(&attention, &to_tensor(&inst.s), &to_tensor(&inst.p), &to_tensor(&inst.t_sp()), 0.65, inst.h).unwrap();
        for t in out.d_sv.iter().chain(&out.d_vs).chain(&out.d_mask).chain(&out.d_pv).chain(&out.d_vp) {
            prop_assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        for sv in &out.d_sv {
            for (i, &keep) in out.m_sp.iter().enumerate() {
                if !keep {
                    prop_assert!(sv.row(i).iter().all(|&v| v == 0.0));
                }
            }
        }
        for pv in &out.d_pv {
            for i in 0..pv.dims2().0 {
                prop_assert!(pv.row(i).iter().sum::<f64>() >= 1.0);
            }
        }
    }

    #[test]
    fn window_masks_are_symmetric_with_open_globals(n in 1usize..30, m in 1usize..6, half in 0usize..8) {
        let w = build_window_mask(n, m, Window::Size(2 * half + 1)).unwrap().mask;
        let size = n + m + 1;
        for i in 0..size {
            prop_assert_eq!(w.at(i, i), 1.0);
            prop_assert_eq!(w.at(0, i), 1.0);
            prop_assert_eq!(w.at(i, 0), 1.0);
            for j in 0..size {
                prop_assert_eq!(w.at(i, j), w.at(j, i));
                if i > n || j > n {
                    prop_assert_eq!(w.at(i, j), 1.0);
                }
            }
        }
    }

    #[test]
    fn sparsify_only_removes_rows(seed in any::<u64>()) {
        let inst = random_instance(&mut rng(seed));
        let t = to_tensor(&inst.t_sp());
        let (keep, filtered) = sparsify_transfer(&to_tensor(&inst.s), &to_tensor(&inst.p), &t).unwrap();
        for (i, &k) in keep.iter().enumerate() {
            let expected: Vec<f64> = if k { t.row(i).to_vec() } else { vec![0.0; inst.p.len()] };
            prop_assert_eq!(filtered.row(i).to_vec(), expected);
        }
    }
}
