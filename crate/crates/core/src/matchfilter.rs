//! Soft mutual nearest-neighbour gating and the hard mutual-NN baseline.

use crate::correlation::{CorrTensor, Stage};
use crate::tensor4::{Pair, Tensor4};

/// Denominator guard for the ratio terms.
pub const MNN_EPS: f32 = 1e-8;

/// Gates every score by its ratios to the best score along each image's
/// axis pair: `ĉ = rA · rB · c⁺` with `c⁺ = relu(c)`,
/// `rA = c⁺ / (max_ab c⁺_abkl + ε)` and `rB = c⁺ / (max_cd c⁺_ijcd + ε)`.
///
/// Raw volumes advance to `Mnn`, consensus outputs to `Final`.
pub fn soft_mutual_nn(c: &CorrTensor) -> CorrTensor {
    let out = soft_mnn_tensor(c.tensor());
    let to = match c.stage() {
        Stage::Raw => Stage::Mnn,
        Stage::Nc => Stage::Final,
        s => s,
    };
    if to == c.stage() {
        CorrTensor::new(out, to).expect("single channel")
    } else {
        CorrTensor::advance(out, c.stage(), to)
    }
}

pub(crate) fn soft_mnn_tensor(c: &Tensor4) -> Tensor4 {
    let cp = c.relu();
    let (ma, _) = cp.max_over_pair(Pair::First).expect("single channel");
    let (mb, _) = cp.max_over_pair(Pair::Second).expect("single channel");
    let [d1, d2, d3, d4] = c.dims();
    let a = d1 * d2;
    let b = d3 * d4;
    let mut out = cp.clone();
    let (ma, mb) = (ma.data(), mb.data());
    for p in 0..a {
        let row = &mut out.data_mut()[p * b..(p + 1) * b];
        let db = mb[p] + MNN_EPS;
        for q in 0..b {
            let v = row[q];
            row[q] = (v / (ma[q] + MNN_EPS)) * (v / db) * v;
        }
    }
    out
}

/// Gradient of [`soft_mnn_tensor`] at `c` given the output gradient. The
/// slice maxima pass their gradient to the argmax entry only.
pub(crate) fn soft_mnn_backward(c: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let cp = c.relu();
    let (ma, arg_a) = cp.max_over_pair(Pair::First).expect("single channel");
    let (mb, arg_b) = cp.max_over_pair(Pair::Second).expect("single channel");
    let [d1, d2, d3, d4] = c.dims();
    let a = d1 * d2;
    let b = d3 * d4;
    let x = cp.data();
    let g = grad_out.data();
    let mut gin = vec![0.0f32; a * b];
    let mut g_ma = vec![0.0f32; b];
    let mut g_mb = vec![0.0f32; a];
    for p in 0..a {
        let db = mb.data()[p] + MNN_EPS;
        for q in 0..b {
            let n = p * b + q;
            let v = x[n];
            if v == 0.0 {
                continue;
            }
            let da = ma.data()[q] + MNN_EPS;
            let out = (v / da) * (v / db) * v;
            gin[n] += g[n] * 3.0 * v * v / (da * db);
            g_ma[q] -= g[n] * out / da;
            g_mb[p] -= g[n] * out / db;
        }
    }
    for q in 0..b {
        gin[arg_a.index[q] * b + q] += g_ma[q];
    }
    for p in 0..a {
        gin[p * b + arg_b.index[p]] += g_mb[p];
    }
    // relu mask
    for (gv, &cv) in gin.iter_mut().zip(c.data()) {
        if cv <= 0.0 {
            *gv = 0.0;
        }
    }
    Tensor4::from_vec(1, c.dims(), gin).expect("shape")
}

/// All `(i, j, k, l)` that are each other's best match in both directions,
/// in row-major order.
pub fn hard_mutual_nn(c: &CorrTensor) -> Vec<[usize; 4]> {
    let t = c.tensor();
    let (_, arg_a) = t.max_over_pair(Pair::First).expect("single channel");
    let (_, arg_b) = t.max_over_pair(Pair::Second).expect("single channel");
    let [d1, d2, _, d4] = t.dims();
    let mut out = Vec::new();
    for p in 0..d1 * d2 {
        let q = arg_b.index[p];
        if arg_a.index[q] == p {
            out.push([p / d2, p % d2, q / d4, q % d4]);
        }
    }
    out
}
