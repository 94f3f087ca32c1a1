// Plain slice kernels. Summation order is fixed (ascending inner index) so
// results are bit-reproducible.

/// `c[p×s] = a[p×q] · b[q×s]`
pub(crate) fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, s: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * s];
    for i in 0..p {
        let crow = &mut c[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * s..(k + 1) * s];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

/// `c[p×s] = a[p×q] · b[s×q]ᵀ`
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], p: usize, q: usize, s: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * s];
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..s {
            let brow = &b[j * q..(j + 1) * q];
            c[i * s + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[q×s] = a[p×q]ᵀ · b[p×s]`
pub(crate) fn matmul_at(a: &[f64], b: &[f64], p: usize, q: usize, s: usize) -> Vec<f64> {
    let mut c = vec![0.0; q * s];
    for k in 0..p {
        let brow = &b[k * s..(k + 1) * s];
        for i in 0..q {
            let aki = a[k * q + i];
            let crow = &mut c[i * s..(i + 1) * s];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aki * bj;
            }
        }
    }
    c
}

pub(crate) fn transpose(a: &[f64], p: usize, q: usize) -> Vec<f64> {
    let mut t = vec![0.0; p * q];
    for i in 0..p {
        for j in 0..q {
            t[j * p + i] = a[i * q + j];
        }
    }
    t
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Softmax over one row, restricted to `allow` when given. Disallowed entries
/// come out as exactly 0. Returns `None` when nothing is allowed.
pub(crate) fn softmax_row(x: &[f64], allow: Option<&[bool]>) -> Option<Vec<f64>> {
    let allowed = |j: usize| allow.is_none_or(|a| a[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(j, &v)| if allowed(j) { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Some(out)
}
