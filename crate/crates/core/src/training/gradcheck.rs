//! Central finite-difference check of the analytic gradients.
//!
//! The loss is re-evaluated by a separate 64-bit implementation of the
//! whole pipeline written with plain loops. It shares no numerical code
//! with the 32-bit training path.

use crate::error::Result;
use crate::features::{FeatureMap, TrainSample};
use crate::ncnet::NcNetParams;

use super::{loss_and_grad, Gradients};

/// A parameter passes when its absolute error is within `abs` or its
/// relative error is within `rel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    /// Perturbation applied to each parameter in each direction. It is
    /// kept small so that the two evaluations rarely straddle a ReLU or
    /// argmax switch; the 64-bit oracle keeps the quotient accurate.
    pub step: f64,
    /// How many times a failing parameter is retried with a step ten times
    /// smaller. A kink closer than `step` to the parameter spoils the
    /// central difference but not its limit; a wrong gradient keeps
    /// failing at every step.
    pub refinements: u32,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rel: 1e-3,
            abs: 1e-6,
            step: 1e-6,
            refinements: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: usize,
    pub params: usize,
    pub failures: usize,
    /// Parameters that passed only after refining the step.
    pub refined: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "layer,params,failures,refined,max_abs_err,max_rel_err")?;
        for l in &self.layers {
            writeln!(
                f,
                "{},{},{},{},{:.3e},{:.3e}",
                l.layer, l.params, l.failures, l.refined, l.max_abs_err, l.max_rel_err
            )?;
        }
        write!(f, "{}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Compares [`super::backward_pipeline`] against central differences.
pub fn finite_diff_check(
    sample: &TrainSample,
    params: &NcNetParams,
    tol: Tolerance,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(sample, params)?;
    finite_diff_check_against(sample, params, &analytic, tol)
}

/// Same check against caller-supplied gradients.
pub fn finite_diff_check_against(
    sample: &TrainSample,
    params: &NcNetParams,
    analytic: &Gradients,
    tol: Tolerance,
) -> Result<GradCheckReport> {
    if !analytic.congruent(params) {
        return Err(crate::error::NcError::Shape(
            "gradients do not match the parameters".into(),
        ));
    }
    let net = Net64::from_params(params);
    let oracle = Oracle::new(sample);
    let mut layers = Vec::new();
    let mut passed = true;
    for n in 0..net.layers.len() {
        let ctx = oracle.context(&net, n);
        let layer = &net.layers[n];
        let per_out = layer.cin * layer.k.pow(4);
        let count = layer.w.len() + layer.b.len();
        let mut check = LayerCheck {
            layer: n,
            params: count,
            failures: 0,
            refined: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        };
        let an = analytic.layers[n]
            .weights
            .iter()
            .chain(&analytic.layers[n].bias)
            .map(|&v| v as f64);
        let mut trial = layer.clone();
        for (idx, a) in (0..count).zip(an) {
            // a parameter only reaches its own output channel of layer n
            let o = if idx < layer.w.len() {
                idx / per_out
            } else {
                idx - layer.w.len()
            };
            let orig = trial.param(idx);
            let mut step = tol.step;
            let mut attempt = 0;
            let (abs, rel, ok) = loop {
                trial.set_param(idx, orig + step);
                let plus = oracle.perturbed_loss(&net, &ctx, &trial, o);
                trial.set_param(idx, orig - step);
                let minus = oracle.perturbed_loss(&net, &ctx, &trial, o);
                trial.set_param(idx, orig);
                let fd = (plus - minus) / (2.0 * step);
                let abs = (fd - a).abs();
                let denom = fd.abs().max(a.abs());
                let rel = if denom > 0.0 { abs / denom } else { 0.0 };
                let ok = abs <= tol.abs || rel <= tol.rel;
                if ok || attempt == tol.refinements {
                    break (abs, rel, ok);
                }
                attempt += 1;
                step /= 10.0;
            };
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
            if !ok {
                check.failures += 1;
            } else if attempt > 0 {
                check.refined += 1;
            }
        }
        passed &= check.failures == 0;
        layers.push(check);
    }
    Ok(GradCheckReport { layers, passed })
}

/// Loss of a sample evaluated entirely in 64-bit arithmetic.
pub fn oracle_loss(sample: &TrainSample, params: &NcNetParams) -> f64 {
    Oracle::new(sample).full_loss(&Net64::from_params(params))
}

#[derive(Clone)]
struct Layer64 {
    cin: usize,
    cout: usize,
    k: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Layer64 {
    fn param(&self, idx: usize) -> f64 {
        if idx < self.w.len() {
            self.w[idx]
        } else {
            self.b[idx - self.w.len()]
        }
    }

    fn set_param(&mut self, idx: usize, v: f64) {
        if idx < self.w.len() {
            self.w[idx] = v;
        } else {
            let n = idx - self.w.len();
            self.b[n] = v;
        }
    }
}

#[derive(Clone)]
struct Net64 {
    layers: Vec<Layer64>,
    final_relu: bool,
}

impl Net64 {
    fn from_params(p: &NcNetParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| Layer64 {
                    cin: l.in_ch,
                    cout: l.out_ch,
                    k: l.k,
                    w: l.weights.iter().map(|&v| v as f64).collect(),
                    b: l.bias.iter().map(|&v| v as f64).collect(),
                })
                .collect(),
            final_relu: p.config.final_relu,
        }
    }

    fn relu_after(&self, n: usize) -> bool {
        n + 1 < self.layers.len() || self.final_relu
    }
}

struct Oracle {
    y: f64,
    dims: [usize; 4],
    gated: Vec<f64>,
}

impl Oracle {
    fn new(sample: &TrainSample) -> Self {
        let (fa, fb) = (&sample.fa, &sample.fb);
        let dims = [fa.h(), fa.w(), fb.h(), fb.w()];
        let corr = correlate64(fa, fb);
        Self {
            y: sample.label.sign() as f64,
            dims,
            gated: gate64(&corr, dims),
        }
    }

    fn directions(&self) -> [([usize; 4], Vec<f64>); 2] {
        [
            (self.dims, self.gated.clone()),
            (swapped(self.dims), transpose64(&self.gated, self.dims)),
        ]
    }

    /// Activations around layer `n` with the unperturbed network.
    fn context(&self, net: &Net64, n: usize) -> Vec<DirCtx> {
        self.directions()
            .into_iter()
            .map(|(dims, mut x)| {
                for m in 0..n {
                    x = layer64(&x, dims, &net.layers[m], net.relu_after(m));
                }
                let act = layer64(&x, dims, &net.layers[n], net.relu_after(n));
                let next_pre = net.layers.get(n + 1).map(|l| layer64(&act, dims, l, false));
                DirCtx {
                    n,
                    dims,
                    input: x,
                    act,
                    next_pre,
                }
            })
            .collect()
    }

    /// Loss with layer `ctx.n` replaced by `trial`, which differs from the
    /// network's layer only in output channel `o`.
    fn perturbed_loss(&self, net: &Net64, ctx: &[DirCtx], trial: &Layer64, o: usize) -> f64 {
        let outs: Vec<Vec<f64>> = ctx
            .iter()
            .map(|c| {
                let len: usize = c.dims.iter().product();
                let taps = trial.k.pow(4);
                let mut ch = vec![trial.b[o]; len];
                for i in 0..trial.cin {
                    let w = &trial.w[(o * trial.cin + i) * taps..][..taps];
                    conv_acc(&mut ch, &c.input[i * len..][..len], c.dims, w, trial.k);
                }
                if net.relu_after(c.n) {
                    ch.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                let Some(next_pre) = &c.next_pre else {
                    let mut out = c.act.clone();
                    out[o * len..][..len].copy_from_slice(&ch);
                    return out;
                };
                let delta: Vec<f64> = ch
                    .iter()
                    .zip(&c.act[o * len..][..len])
                    .map(|(x, y)| x - y)
                    .collect();
                let next = &net.layers[c.n + 1];
                let taps = next.k.pow(4);
                let mut x = next_pre.clone();
                for o2 in 0..next.cout {
                    let w = &next.w[(o2 * next.cin + o) * taps..][..taps];
                    conv_acc(&mut x[o2 * len..][..len], &delta, c.dims, w, next.k);
                }
                if net.relu_after(c.n + 1) {
                    x.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                for m in c.n + 2..net.layers.len() {
                    x = layer64(&x, c.dims, &net.layers[m], net.relu_after(m));
                }
                x
            })
            .collect();
        self.loss_of(&outs[0], &outs[1])
    }

    fn full_loss(&self, net: &Net64) -> f64 {
        let outs: Vec<Vec<f64>> = self
            .directions()
            .into_iter()
            .map(|(dims, mut x)| {
                for (m, l) in net.layers.iter().enumerate() {
                    x = layer64(&x, dims, l, net.relu_after(m));
                }
                x
            })
            .collect();
        self.loss_of(&outs[0], &outs[1])
    }

    /// Loss from the network outputs of both directions.
    fn loss_of(&self, f: &[f64], r: &[f64]) -> f64 {
        let back = transpose64(r, swapped(self.dims));
        let nc: Vec<f64> = f.iter().zip(&back).map(|(a, b)| a + b).collect();
        let fin = gate64(&nc, self.dims);

        let [d1, d2, d3, d4] = self.dims;
        let (a, b) = (d1 * d2, d3 * d4);
        // s̄B: best softmax score along each row
        let mut sbar_b = 0.0;
        for p in 0..a {
            let row = &fin[p * b..(p + 1) * b];
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            sbar_b += 1.0 / z;
        }
        let mut sbar_a = 0.0;
        for q in 0..b {
            let m = (0..a).map(|p| fin[p * b + q]).fold(f64::MIN, f64::max);
            let z: f64 = (0..a).map(|p| (fin[p * b + q] - m).exp()).sum();
            sbar_a += 1.0 / z;
        }
        -self.y * (sbar_a / b as f64 + sbar_b / a as f64)
    }
}

struct DirCtx {
    n: usize,
    dims: [usize; 4],
    /// input of layer n
    input: Vec<f64>,
    /// output of layer n after its nonlinearity
    act: Vec<f64>,
    /// pre-activation of layer n + 1
    next_pre: Option<Vec<f64>>,
}

fn swapped(d: [usize; 4]) -> [usize; 4] {
    [d[2], d[3], d[0], d[1]]
}

fn correlate64(fa: &FeatureMap, fb: &FeatureMap) -> Vec<f64> {
    let mut out = Vec::with_capacity(fa.h() * fa.w() * fb.h() * fb.w());
    for i in 0..fa.h() {
        for j in 0..fa.w() {
            let x = fa.descriptor(i, j);
            let nx = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            for k in 0..fb.h() {
                for l in 0..fb.w() {
                    let z = fb.descriptor(k, l);
                    let nz = z.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    if nx < 1e-12 || nz < 1e-12 {
                        out.push(0.0);
                    } else {
                        let d: f64 = x.iter().zip(z).map(|(&p, &q)| p as f64 * q as f64).sum();
                        out.push(d / (nx * nz));
                    }
                }
            }
        }
    }
    out
}

fn gate64(c: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let a = dims[0] * dims[1];
    let b = dims[2] * dims[3];
    let eps = crate::matchfilter::MNN_EPS as f64;
    let cp: Vec<f64> = c.iter().map(|&v| v.max(0.0)).collect();
    let mut col = vec![0.0f64; b];
    let mut row = vec![0.0f64; a];
    for p in 0..a {
        for q in 0..b {
            let v = cp[p * b + q];
            col[q] = col[q].max(v);
            row[p] = row[p].max(v);
        }
    }
    let mut out = vec![0.0; a * b];
    for p in 0..a {
        for q in 0..b {
            let v = cp[p * b + q];
            out[p * b + q] = v * v * v / ((col[q] + eps) * (row[p] + eps));
        }
    }
    out
}

fn transpose64(c: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let a = dims[0] * dims[1];
    let b = dims[2] * dims[3];
    let mut out = vec![0.0; a * b];
    for p in 0..a {
        for q in 0..b {
            out[q * a + p] = c[p * b + q];
        }
    }
    out
}

/// Zero-padded 4D convolution followed by an optional ReLU.
fn layer64(input: &[f64], dims: [usize; 4], l: &Layer64, relu: bool) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let taps = l.k.pow(4);
    let mut out = vec![0.0; l.cout * n];
    for o in 0..l.cout {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.iter_mut().for_each(|v| *v = l.b[o]);
        for i in 0..l.cin {
            let w = &l.w[(o * l.cin + i) * taps..][..taps];
            conv_acc(dst, &input[i * n..(i + 1) * n], dims, w, l.k);
        }
    }
    if relu {
        out.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

/// `dst[p] += sum_t w[t] * src[p + t - r]` over in-range positions.
fn conv_acc(dst: &mut [f64], src: &[f64], dims: [usize; 4], w: &[f64], k: usize) {
    let r = (k / 2) as isize;
    let range = |t: usize, len: usize| -> (usize, usize) {
        // valid output positions p with 0 <= p + t - r < len
        let off = t as isize - r;
        let lo = (-off).max(0) as usize;
        let hi = (len as isize - off).min(len as isize).max(0) as usize;
        (lo, hi)
    };
    let [d1, d2, d3, d4] = dims;
    for ta in 0..k {
        let (a0, a1) = range(ta, d1);
        for tb in 0..k {
            let (b0, b1) = range(tb, d2);
            for tc in 0..k {
                let (c0, c1) = range(tc, d3);
                for td in 0..k {
                    let (e0, e1) = range(td, d4);
                    let wt = w[((ta * k + tb) * k + tc) * k + td];
                    if wt == 0.0 {
                        continue;
                    }
                    for p0 in a0..a1 {
                        let q0 = (p0 as isize + ta as isize - r) as usize;
                        for p1 in b0..b1 {
                            let q1 = (p1 as isize + tb as isize - r) as usize;
                            for p2 in c0..c1 {
                                let q2 = (p2 as isize + tc as isize - r) as usize;
                                let po = ((p0 * d2 + p1) * d3 + p2) * d4;
                                let qs =
                                    (((q0 * d2 + q1) * d3 + q2) * d4) as isize + td as isize - r;
                                for p3 in e0..e1 {
                                    dst[po + p3] += wt * src[(qs + p3 as isize) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_pair, SynthConfig};
    use crate::ncnet::{init_params, NetConfig};
    use crate::training::forward_pipeline;

    fn sample() -> TrainSample {
        let mut cfg = SynthConfig::new(21, 4, 4, 8);
        cfg.noise_sigma = 0.3;
        cfg.shift = (1, 1);
        synth_pair(&cfg).unwrap()
    }

    fn small_net(seed: u64) -> NcNetParams {
        let cfg = NetConfig {
            num_layers: 2,
            k: 3,
            hidden: 4,
            final_relu: true,
        };
        init_params(cfg, seed).unwrap()
    }

    #[test]
    fn oracle_agrees_with_f32_forward() {
        let s = sample();
        let p = small_net(1);
        let (_, rec, _) = forward_pipeline(&s, &p).unwrap();
        assert!((oracle_loss(&s, &p) - rec.loss as f64).abs() < 1e-5);
    }

    #[test]
    fn incremental_loss_matches_full_evaluation() {
        let s = sample();
        let p = small_net(7);
        let net = Net64::from_params(&p);
        let oracle = Oracle::new(&s);
        for n in 0..2 {
            let ctx = oracle.context(&net, n);
            let mut trial = net.layers[n].clone();
            let per_out = trial.cin * trial.k.pow(4);
            let last = trial.w.len();
            for idx in [0, (per_out + 40) % last, last] {
                let o = if idx < last {
                    idx / per_out
                } else {
                    idx - last
                };
                trial.set_param(idx, trial.param(idx) + 0.3);
                let mut full = net.clone();
                full.layers[n] = trial.clone();
                let a = oracle.perturbed_loss(&net, &ctx, &trial, o);
                assert!((a - oracle.full_loss(&full)).abs() < 1e-12);
                trial = net.layers[n].clone();
            }
        }
    }

    #[test]
    fn passes_on_fresh_params() {
        let report = finite_diff_check(&sample(), &small_net(2), Tolerance::default()).unwrap();
        assert!(report.passed, "{report}");
        assert_eq!(report.layers.len(), 2);
        assert_eq!(report.layers[0].params, 4 * 81 + 4);
    }

    #[test]
    fn kink_within_step_is_resolved_by_refinement() {
        // one ReLU of channel 7 switches less than 1e-6 above four of its
        // weights; the left difference matches the analytic value there
        let mut cfg = SynthConfig::new(100, 6, 6, 8);
        cfg.noise_sigma = 0.3;
        cfg.shift = (1, 1);
        let s = synth_pair(&cfg).unwrap();
        let net = NetConfig {
            num_layers: 2,
            k: 3,
            hidden: 16,
            final_relu: true,
        };
        let p = init_params(net, 0).unwrap();
        let strict = Tolerance {
            refinements: 0,
            ..Tolerance::default()
        };
        let r = finite_diff_check(&s, &p, strict).unwrap();
        assert_eq!(r.layers[0].failures, 4, "{r}");
        let r = finite_diff_check(&s, &p, Tolerance::default()).unwrap();
        assert!(r.passed, "{r}");
        assert_eq!(r.layers[0].refined, 4);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let s = sample();
        let p = small_net(3);
        let (_, mut g) = loss_and_grad(&s, &p).unwrap();
        let w = &mut g.layers[1].weights;
        let n = w.iter().position(|v| v.abs() > 1e-4).unwrap();
        w[n] *= 1.5;
        let report = finite_diff_check_against(&s, &p, &g, Tolerance::default()).unwrap();
        assert!(!report.passed);
        assert_eq!(report.layers[1].failures, 1);
        assert_eq!(report.layers[0].failures, 0);
    }

    #[test]
    fn zero_tolerance_fails() {
        let tol = Tolerance {
            rel: 0.0,
            abs: 0.0,
            ..Tolerance::default()
        };
        assert!(
            !finite_diff_check(&sample(), &small_net(4), tol)
                .unwrap()
                .passed
        );
    }
}
