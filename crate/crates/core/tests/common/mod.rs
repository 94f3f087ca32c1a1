//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use hmt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (p, _) = t.dims2();
    (0..p).map(|i| t.row(i).to_vec()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

/// Window mask built by listing each sentence's neighbourhood.
pub fn brute_window(n: usize, m: usize, w: Option<usize>) -> Mat {
    let size = n + m + 1;
    let mut out = vec![vec![0.0; size]; size];
    for i in 0..size {
        for j in 0..size {
            let sentence_pair = (1..=n).contains(&i) && (1..=n).contains(&j);
            if !sentence_pair {
                out[i][j] = 1.0;
            }
        }
    }
    for i in 1..=n {
        let (lo, hi) = match w {
            Some(w) => (i.saturating_sub(w / 2).max(1), (i + w / 2).min(n)),
            None => (1, n),
        };
        for j in lo..=hi {
            out[i][j] = 1.0;
        }
    }
    out
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Over every subset: the smallest ones whose mass exceeds `eta`, then the
/// heaviest of those, then the lexicographically smallest index set.
pub fn exhaustive_topk(scores: &[f64], eta: f64) -> Vec<f64> {
    let p = softmax(scores);
    let k = p.len();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for bits in 1u32..(1 << k) {
        let set: Vec<usize> = (0..k).filter(|j| bits & (1 << j) != 0).collect();
        let mut by_mass = set.clone();
        by_mass.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        let mass = by_mass.iter().fold(0.0, |acc, &j| acc + p[j]);
        if mass <= eta {
            continue;
        }
        let better = match &best {
            None => true,
            Some((size, m, idx)) => {
                set.len() < *size || (set.len() == *size && (mass > *m || (mass == *m && set < *idx)))
            }
        };
        if better {
            best = Some((set.len(), mass, set));
        }
    }
    let mut out = vec![0.0; k];
    if let Some((_, _, set)) = best {
        for j in set {
            out[j] = 1.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteMasks {
    pub d_pv: Vec<Mat>,
    pub d_vp: Vec<Mat>,
    pub keep: Vec<bool>,
    pub t_tilde: Mat,
    pub d_sv: Vec<Mat>,
    pub d_vs: Vec<Mat>,
    pub d_mask: Vec<Mat>,
}

/// Transfer masks from their element-wise definitions.
pub fn brute_dmt(attention: &[Mat], s: &Mat, p: &Mat, owner: &[usize], eta: f64) -> BruteMasks {
    let (n, l) = (s.len(), p.len());
    let m = attention[0].len() - l - 1;
    let keep: Vec<bool> = (0..n)
        .map(|i| {
            let dot: f64 = s[i].iter().zip(&p[owner[i]]).map(|(a, b)| a * b).sum();
            let zero = s[i].iter().all(|&v| v == 0.0) || p[owner[i]].iter().all(|&v| v == 0.0);
            !zero && dot > 0.0
        })
        .collect();
    let t_tilde: Mat = (0..n)
        .map(|i| (0..l).map(|j| f64::from(u8::from(keep[i] && owner[i] == j))).collect())
        .collect();
    let mut out = BruteMasks {
        d_pv: vec![],
        d_vp: vec![],
        keep: keep.clone(),
        t_tilde: t_tilde.clone(),
        d_sv: vec![],
        d_vs: vec![],
        d_mask: vec![],
    };
    for a in attention {
        let pv: Mat = (0..l).map(|i| exhaustive_topk(&a[1 + i][1 + l..], eta)).collect();
        let vp: Mat = (0..m).map(|j| exhaustive_topk(&a[1 + l + j][1..1 + l], eta)).collect();
        let sv: Mat = (0..n)
            .map(|i| (0..m).map(|j| f64::from(u8::from((0..l).any(|k| t_tilde[i][k] == 1.0 && pv[k][j] == 1.0)))).collect())
            .collect();
        let vs: Mat = (0..m)
            .map(|j| (0..n).map(|i| f64::from(u8::from((0..l).any(|k| vp[j][k] == 1.0 && t_tilde[i][k] == 1.0)))).collect())
            .collect();
        let size = n + m + 1;
        let mut dm = vec![vec![0.0; size]; size];
        for i in 0..n {
            for j in 0..m {
                dm[1 + i][1 + n + j] = sv[i][j];
                dm[1 + n + j][1 + i] = vs[j][i];
            }
        }
        out.d_pv.push(pv);
        out.d_vp.push(vp);
        out.d_sv.push(sv);
        out.d_vs.push(vs);
        out.d_mask.push(dm);
    }
    out
}

pub struct DmtInstance {
    pub attention: Vec<Mat>,
    pub s: Mat,
    pub p: Mat,
    pub owner: Vec<usize>,
    pub h: usize,
}

impl DmtInstance {
    pub fn t_sp(&self) -> Mat {
        self.owner
            .iter()
            .map(|&o| (0..self.p.len()).map(|j| f64::from(u8::from(j == o))).collect())
            .collect()
    }
}

/// Random instance with `n ≤ 8`, `l ≤ 3`, `m ≤ 4`, `h ≤ 2`; attention rows
/// are softmaxed random logits, a few sentence features are zero.
pub fn random_instance(rng: &mut ChaCha8Rng) -> DmtInstance {
    let l = rng.random_range(1..=3);
    let m = rng.random_range(1..=4);
    let n = rng.random_range(l..=8);
    let h = rng.random_range(1..=2);
    let d = 4;
    let size = l + m + 1;
    let attention = (0..h)
        .map(|_| {
            (0..size)
                .map(|_| softmax(&(0..size).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let row = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let s = (0..n)
        .map(|_| if rng.random_bool(0.1) { vec![0.0; d] } else { row(rng) })
        .collect();
    let p = (0..l).map(|_| row(rng)).collect();
    let owner = (0..n).map(|i| if i < l { i } else { rng.random_range(0..l) }).collect();
    DmtInstance { attention, s, p, owner, h }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Confusion-matrix metrics by direct counting.
pub struct OracleMetrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
}

pub fn oracle_metrics(pred: &[usize], label: &[usize], classes: usize) -> OracleMetrics {
    let count = |f: &dyn Fn(usize, usize) -> bool| pred.iter().zip(label).filter(|(&p, &y)| f(p, y)).count() as u64;
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut precision = vec![];
    let mut recall = vec![];
    let mut f1 = vec![];
    for c in 0..classes {
        let tp = count(&|p, y| p == c && y == c);
        let fp = count(&|p, y| p == c && y != c);
        let fneg = count(&|p, y| p != c && y == c);
        let pr = div(tp, tp + fp);
        let re = div(tp, tp + fneg);
        precision.push(pr);
        recall.push(re);
        f1.push(if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) });
    }
    let confusion = (0..classes)
        .map(|y| (0..classes).map(|p| count(&|pp, yy| pp == p && yy == y)).collect())
        .collect();
    OracleMetrics {
        accuracy: div(count(&|p, y| p == y), pred.len() as u64),
        macro_f1: f1.iter().sum::<f64>() / classes as f64,
        precision,
        recall,
        f1,
        confusion,
    }
}
