//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the lines always appear in `cargo test` output.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ncnet_core::assignment::{pck, pck_partial, PckReference};
use ncnet_core::bench::{run_bench, BenchConfig};
use ncnet_core::correlation::transpose_pairs;
use ncnet_core::ncnet::{ncnet_forward, InitScheme};
use ncnet_core::pipeline::{
    filter_pair, ground_truth_keypoints, match_pair, mnn_baseline_transfer, pipeline_transfer,
};
use ncnet_core::training::{finite_diff_check, train, Tolerance, TrainConfig};
use ncnet_core::{
    conv4d_aggregated, conv4d_direct, hard_mutual_nn, init_params, init_params_with,
    ncnet_symmetric, soft_mutual_nn, synth_pair, Conv4dLayer, CorrTensor, FeatureMap, NcError,
    NcNetParams, NetConfig, Pair, Stage, SynthBenchmark, SynthConfig, Tensor4,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, ch: usize, dims: [usize; 4], lo: f32, hi: f32) -> Tensor4 {
    let n = ch * dims.iter().product::<usize>();
    Tensor4::from_vec(ch, dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_layer(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> Conv4dLayer {
    let w = (0..cin * cout * k.pow(4))
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    let b = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
    Conv4dLayer::new(cin, cout, k, w, b).unwrap()
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    let data = (0..h * w * d)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    FeatureMap::new(h, w, d, 8 * h, 8 * w, data).unwrap()
}

fn conv_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // the two extreme cases first, then random ones under a work cap
    let mut cases = vec![([8; 4], 16, 16, 3), ([8; 4], 16, 1, 5)];
    while cases.len() < 24 {
        let dims = [0; 4].map(|_| rng.random_range(1..=8usize));
        let k: usize = if rng.random_bool(0.5) { 3 } else { 5 };
        let cin = rng.random_range(1..=16usize);
        let cout = rng.random_range(1..=16usize);
        let work = dims.iter().product::<usize>() * cin * cout * k.pow(4);
        if work <= 60_000_000 {
            cases.push((dims, cin, cout, k));
        }
    }
    let mut worst = 0f64;
    for (dims, cin, cout, k) in &cases {
        let x = random_tensor(&mut rng, *cin, *dims, -1.0, 1.0);
        let layer = random_layer(&mut rng, *cin, *cout, *k);
        let d = conv4d_direct(&x, &layer).unwrap();
        let a = conv4d_aggregated(&x, &layer).unwrap();
        let scale = d.data().iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-30);
        let err = a
            .data()
            .iter()
            .zip(d.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0f32, f32::max);
        let rel = (err / scale) as f64;
        worst = worst.max(rel);
        ensure(rel <= 1e-5, || {
            format!("dims {dims:?} {cin}->{cout} k{k}: relative error {rel:.2e}")
        })?;
    }
    Ok(format!(
        "{} cases, worst relative error {worst:.2e}",
        cases.len()
    ))
}

fn gradient_correctness() -> Outcome {
    let net = NetConfig {
        num_layers: 2,
        k: 3,
        hidden: 16,
        final_relu: true,
    };
    let tol = Tolerance {
        rel: 1e-3,
        abs: 1e-6,
        ..Tolerance::default()
    };
    let (mut worst, mut refined) = (0f64, 0);
    for seed in 0..3 {
        let mut cfg = SynthConfig::new(100 + seed, 6, 6, 8);
        cfg.noise_sigma = 0.3;
        cfg.shift = (1, 1);
        let sample = synth_pair(&cfg).unwrap();
        let params = init_params(net, seed).unwrap();
        let report = finite_diff_check(&sample, &params, tol).unwrap();
        ensure(report.passed, || format!("seed {seed}:\n{report}"))?;
        for l in &report.layers {
            worst = worst.max(l.max_abs_err);
            refined += l.refined;
        }
    }
    Ok(format!(
        "3 seeds, 2609 parameters each, worst abs error {worst:.2e}, \
         {refined} parameters needed a finer step near a kink"
    ))
}

fn soft_mnn_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = ncnet_core::matchfilter::MNN_EPS as f64;
    let mut worst_oracle = 0f64;
    for case in 0..100 {
        let dims = [0; 4].map(|_| rng.random_range(1..=5usize));
        let t = random_tensor(&mut rng, 1, dims, -1.0, 1.0);
        let c = CorrTensor::new(t, Stage::Raw).unwrap();
        let g = soft_mutual_nn(&c);
        let (cv, gv) = (c.tensor().data(), g.tensor().data());
        for (x, y) in gv.iter().zip(cv) {
            ensure(*x <= y.max(0.0), || format!("case {case}: {x} > relu({y})"))?;
        }
        // mutual nearest neighbours keep their score up to the epsilon terms
        for idx in hard_mutual_nn(&c) {
            let v = c.get(idx) as f64;
            if v <= 0.0 {
                continue;
            }
            let out = g.get(idx) as f64;
            let bound = v * (1.0 - (v / (v + eps)).powi(2)) + 4.0 * f32::EPSILON as f64 * v;
            ensure((v - out).abs() <= bound, || {
                format!("case {case}: mutual entry {idx:?} moved from {v} to {out}")
            })?;
        }
        let [d1, d2, d3, d4] = dims;
        let cp = |n: usize| (cv[n] as f64).max(0.0);
        let (a, b) = (d1 * d2, d3 * d4);
        for p in 0..a {
            for q in 0..b {
                let col = (0..a).map(|r| cp(r * b + q)).fold(0.0, f64::max);
                let row = (0..b).map(|s| cp(p * b + s)).fold(0.0, f64::max);
                let v = cp(p * b + q);
                let expect = (v / (col + eps)) * (v / (row + eps)) * v;
                let err = (gv[p * b + q] as f64 - expect).abs();
                worst_oracle = worst_oracle.max(err);
                ensure(err <= 1e-6, || {
                    format!("case {case}: oracle mismatch {err:.2e}")
                })?;
            }
        }
    }
    Ok(format!(
        "100 tensors, worst oracle error {worst_oracle:.2e}"
    ))
}

fn slice_sums(t: &Tensor4, pair: Pair) -> Vec<f64> {
    let [d1, d2, d3, d4] = t.dims();
    let (a, b) = (d1 * d2, d3 * d4);
    let x = t.data();
    match pair {
        Pair::Second => (0..a)
            .map(|p| x[p * b..(p + 1) * b].iter().map(|&v| v as f64).sum())
            .collect(),
        Pair::First => (0..b)
            .map(|q| (0..a).map(|p| x[p * b + q] as f64).sum())
            .collect(),
    }
}

fn softmax_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut inputs = Vec::new();
    for _ in 0..50 {
        let dims = [0; 4].map(|_| rng.random_range(1..=6usize));
        inputs.push(random_tensor(&mut rng, 1, dims, -5.0, 5.0));
    }
    for scale in [1e2f32, 1e4, 1e6, 1e30] {
        inputs.push(random_tensor(&mut rng, 1, [4, 3, 5, 4], -scale, scale));
    }
    inputs.push(Tensor4::filled(1, [3, 3, 3, 3], 1e30));
    inputs.push(Tensor4::filled(1, [3, 3, 3, 3], -1e30));
    let mut spike = Tensor4::filled(1, [4, 4, 4, 4], -1e4);
    spike.set(0, [1, 2, 3, 0], 1e4);
    inputs.push(spike);
    inputs.push(Tensor4::from_fn([5, 5, 5, 5], |[i, j, k, l]| {
        if (i + j + k + l) % 2 == 0 {
            f32::MAX
        } else {
            -f32::MAX
        }
    }));
    let mut worst = 0f64;
    for (n, t) in inputs.iter().enumerate() {
        for pair in [Pair::First, Pair::Second] {
            let s = t.softmax_over_pair(pair).unwrap();
            ensure(s.data().iter().all(|v| v.is_finite() && *v >= 0.0), || {
                format!("input {n}: non-finite or negative output")
            })?;
            for sum in slice_sums(&s, pair) {
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("slice sum off by {worst:.2e}"))?;
    Ok(format!(
        "{} inputs incl. magnitudes up to f32::MAX, worst |sum - 1| {worst:.2e}",
        inputs.len()
    ))
}

fn order_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0f32;
    for n in 0..10 {
        let (ha, wa, hb, wb) = (
            rng.random_range(3..=6),
            rng.random_range(3..=6),
            rng.random_range(3..=6),
            rng.random_range(3..=6),
        );
        let fa = random_map(&mut rng, ha, wa, 12);
        let fb = random_map(&mut rng, hb, wb, 12);
        let scheme = if n % 2 == 0 {
            InitScheme::Uniform
        } else {
            InitScheme::CenterIdentity
        };
        let params = init_params_with(NetConfig::INSTANCE, n, scheme).unwrap();
        let (ab, _) = filter_pair(&fa, &fb, &params, false).unwrap();
        let (ba, _) = filter_pair(&fb, &fa, &params, false).unwrap();
        let back = transpose_pairs(&ba);
        for (x, y) in ab.tensor().data().iter().zip(back.tensor().data()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("max difference {worst:.2e}"))?;
    Ok(format!("10 pairs, max difference {worst:.2e}"))
}

fn translation_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dims = [8usize; 4];
    let x = random_tensor(&mut rng, 1, dims, 0.0, 1.0);
    let mut worst = 0f32;
    let mut checked = 0usize;
    for (n, net) in [NetConfig::INSTANCE, NetConfig::CATEGORY]
        .into_iter()
        .enumerate()
    {
        let params = init_params(net, 10 + n as u64).unwrap();
        let radius = (net.num_layers * (net.k / 2)) as isize;
        for shift in [[1, 0, 0, 0], [0, 0, 0, 1], [1, 1, 0, 0], [0, 1, 1, 0]] {
            let sh: [isize; 4] = shift;
            let moved = Tensor4::from_fn(dims, |p| {
                let src: Vec<isize> = (0..4).map(|a| p[a] as isize - sh[a]).collect();
                if src.iter().all(|&v| v >= 0) {
                    x.get(0, [0, 1, 2, 3].map(|a| src[a] as usize))
                } else {
                    0.0
                }
            });
            let raw = |t: &Tensor4| CorrTensor::new(t.clone(), Stage::Raw).unwrap();
            let outputs = [
                (
                    ncnet_forward(&x, &params).unwrap(),
                    ncnet_forward(&moved, &params).unwrap(),
                ),
                (
                    ncnet_symmetric(&raw(&x), &params).unwrap().into_tensor(),
                    ncnet_symmetric(&raw(&moved), &params)
                        .unwrap()
                        .into_tensor(),
                ),
            ];
            // interior: receptive fields of p and p - shift avoid the padding
            let lo = |a: usize| radius + sh[a];
            let hi = |_a: usize| dims[0] as isize - 1 - radius;
            for (y, ym) in &outputs {
                for i in lo(0)..=hi(0) {
                    for j in lo(1)..=hi(1) {
                        for k in lo(2)..=hi(2) {
                            for l in lo(3)..=hi(3) {
                                let p = [i, j, k, l].map(|v| v as usize);
                                let q = [i - sh[0], j - sh[1], k - sh[2], l - sh[3]]
                                    .map(|v| v as usize);
                                worst = worst.max((ym.get(0, p) - y.get(0, q)).abs());
                                checked += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    ensure(checked > 0 && worst <= 1e-6, || {
        format!("max interior difference {worst:.2e}")
    })?;
    Ok(format!(
        "{checked} interior entries, two presets, plain and symmetric, max difference {worst:.2e}"
    ))
}

fn synthetic_reproduction() -> Outcome {
    let bench = SynthBenchmark {
        h: 8,
        w: 8,
        d: 16,
        repetition_period: Some(4),
        noise_sigma: 0.3,
        max_shift: 2,
    };
    let train_set = bench.generate(200, 200, 1).unwrap();
    let val = bench.generate(20, 20, 2).unwrap();
    let test = bench.generate(50, 0, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        lr: 5e-4,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = train(&train_set, &val, &cfg).unwrap();
    let mean_pck = |params: &NcNetParams| -> (f64, f64) {
        let (mut full, mut base) = (0.0, 0.0);
        for s in &test {
            let (ka, kb) = ground_truth_keypoints(s).unwrap();
            let img = [s.fb.image_h(), s.fb.image_w()];
            let pred = pipeline_transfer(&s.fa, &s.fb, params, &ka).unwrap();
            full += pck(&pred, &kb, img, 0.1).unwrap();
            let mnn = mnn_baseline_transfer(&s.fa, &s.fb, &ka).unwrap();
            let reference = PckReference::Image {
                height: img[0],
                width: img[1],
            };
            base += pck_partial(&mnn, &kb, reference, 0.1).unwrap();
        }
        (full / test.len() as f64, base / test.len() as f64)
    };
    let untrained = init_params_with(cfg.net, cfg.seed, cfg.init).unwrap();
    let (pck0, _) = mean_pck(&untrained);
    let (full, base) = mean_pck(&out.params);
    let v0 = out.log[0].val_loss.unwrap();
    let v5 = out.log[5].val_loss.unwrap();
    let detail = format!(
        "PCK@0.1 full {full:.4} vs raw+hard-MNN {base:.4} (untrained full {pck0:.4}); \
         val loss {v0:.4} -> {v5:.4}"
    );
    ensure(full > base && v5 < v0, || detail.clone())?;
    Ok(detail)
}

fn relocalization() -> Outcome {
    // B is A moved right by one full-resolution cell
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w, d) = (8, 8, 16);
    let scene = random_map(&mut rng, h, w + 1, d);
    let mut window = |x0: usize| {
        let mut data = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let mut v = scene.descriptor(i, j + x0).to_vec();
                v.iter_mut()
                    .for_each(|c| *c += rng.random_range(-0.01..0.01));
                data.extend(v);
            }
        }
        FeatureMap::new(h, w, d, 64, 64, data).unwrap()
    };
    let fa = window(1);
    let fb = window(0);
    let identity = NcNetParams::from_layers(vec![Conv4dLayer::delta(3).unwrap()], true).unwrap();
    let m = match_pair(&fa, &fb, &identity, true).unwrap();
    let pitch = 8.0;
    let mut exact = 0;
    for mm in &m.matches.matches {
        let dx = mm.pixel_dst.0 - mm.pixel_src.0;
        let dy = mm.pixel_dst.1 - mm.pixel_src.1;
        // fa[i, j] = fb[i, j + 1]: one full-res cell = half a pooled cell
        if dx == pitch && dy == 0.0 {
            exact += 1;
        }
    }
    let total = m.matches.matches.len();
    ensure(exact == total, || {
        format!("{exact} of {total} pooled matches recover the half-cell offset")
    })?;
    Ok(format!(
        "{exact}/{total} pooled matches offset by exactly one full-res cell ({pitch} px = half a pooled cell)"
    ))
}

fn io_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut f = random_map(&mut rng, 5, 7, 9);
    let mut data = f.data().to_vec();
    data[0] = -0.0;
    data[1] = f32::MIN_POSITIVE / 8.0;
    data[2] = f32::MAX;
    f = FeatureMap::new(5, 7, 9, 40, 56, data).unwrap();
    let mut bytes = Vec::new();
    f.write_to(&mut bytes).unwrap();
    let back = FeatureMap::from_bytes(&bytes).unwrap();
    let bits = |m: &FeatureMap| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&back) == bits(&f) && back.image_w() == 56, || {
        "NCF1 values changed".into()
    })?;
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    ensure(again == bytes, || "NCF1 bytes changed".into())?;

    let p = init_params(NetConfig::CATEGORY, 3).unwrap();
    let mut wbytes = Vec::new();
    p.write_to(&mut wbytes).unwrap();
    let q = NcNetParams::from_bytes(&wbytes).unwrap();
    let mut wagain = Vec::new();
    q.write_to(&mut wagain).unwrap();
    ensure(q == p && wagain == wbytes, || {
        "NCW1 round trip changed".into()
    })?;

    let dir = std::env::temp_dir().join(format!("ncnet-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("w.ncw");
    ncnet_core::save_params(&p, &path).unwrap();
    let loaded = ncnet_core::load_params(&path).unwrap();
    let wrong = ncnet_core::ncnet::load_params_for(&path, NetConfig::INSTANCE);
    std::fs::remove_dir_all(&dir).unwrap();
    ensure(loaded == p, || "NCW1 file round trip changed".into())?;
    ensure(matches!(wrong, Err(NcError::ConfigMismatch(_))), || {
        format!("loading category weights as instance gave {wrong:?}")
    })?;

    let mut checks = 0;
    let mut expect = |name: &str, r: Result<(), NcError>, ok: fn(&NcError) -> bool| {
        checks += 1;
        match r {
            Err(e) if ok(&e) => Ok(()),
            other => Err(format!("{name}: unexpected {other:?}")),
        }
    };
    let ncf = |b: &[u8]| FeatureMap::from_bytes(b).map(|_| ());
    let ncw = |b: &[u8]| NcNetParams::from_bytes(b).map(|_| ());
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NCW1");
    expect("ncf magic", ncf(&bad), |e| {
        matches!(e, NcError::BadMagic { .. })
    })?;
    expect("ncf truncated", ncf(&bytes[..bytes.len() - 3]), |e| {
        matches!(e, NcError::Truncated { .. })
    })?;
    expect("ncf header only", ncf(&bytes[..10]), |e| {
        matches!(e, NcError::Truncated { .. })
    })?;
    let mut huge = bytes[..24].to_vec();
    huge[4..16].copy_from_slice(&[0xff; 12]);
    expect("ncf overflow", ncf(&huge), |e| {
        matches!(e, NcError::DimensionOverflow(_))
    })?;
    let mut trailing = bytes.clone();
    trailing.push(0);
    expect("ncf trailing", ncf(&trailing), |e| {
        matches!(e, NcError::Shape(_))
    })?;
    let mut bad = wbytes.clone();
    bad[..4].copy_from_slice(b"NCF1");
    expect("ncw magic", ncw(&bad), |e| {
        matches!(e, NcError::BadMagic { .. })
    })?;
    expect("ncw truncated", ncw(&wbytes[..wbytes.len() - 1]), |e| {
        matches!(e, NcError::Truncated { .. })
    })?;
    expect("ncw empty", ncw(&[]), |e| {
        matches!(e, NcError::Truncated { .. })
    })?;
    Ok(format!(
        "NCF1 and NCW1 bit-exact, {checks} malformed inputs rejected with the right class"
    ))
}

fn complexity_trend() -> Outcome {
    let cfg = BenchConfig {
        sizes: vec![8, 16, 32],
        descriptor_dim: 64,
        channels: 1,
        k: 3,
        repeats: 5,
        seed: 0,
        memory_limit: 1 << 30,
    };
    let report = run_bench(&cfg).map_err(|e| e.to_string())?;
    let detail = report
        .trends
        .iter()
        .map(|t| {
            format!(
                "{}->{}: time x{:.1}, memory x{:.1}",
                t.from, t.to, t.time_ratio, t.memory_ratio
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    ensure(report.trends_ok(), || {
        format!("expected x16 within factor 2: {detail}")
    })?;
    Ok(format!("expected x16 within factor 2: {detail}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 10] = [
        (
            "convolution equivalence",
            conv_equivalence,
            Some(Duration::from_secs(60)),
        ),
        (
            "gradient correctness",
            gradient_correctness,
            Some(Duration::from_secs(300)),
        ),
        ("soft-MNN contract", soft_mnn_contract, None),
        ("probabilistic normalization", softmax_normalization, None),
        ("order invariance", order_invariance, None),
        ("translation equivariance", translation_equivariance, None),
        (
            "synthetic end-to-end",
            synthetic_reproduction,
            Some(Duration::from_secs(600)),
        ),
        ("relocalization", relocalization, None),
        ("I/O round trips", io_round_trips, None),
        ("complexity trend", complexity_trend, None),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (n, (name, run, budget)) in criteria.iter().enumerate() {
        let id = n + 1;
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| f == &id.to_string() || name.contains(f.as_str()))
        {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let result = match (result, budget) {
            (Ok(d), Some(b)) if took > *b => Err(format!("{d}; took {took:.1?}, budget {b:?}")),
            (r, _) => r,
        };
        match result {
            Ok(d) => println!(
                "acceptance {id:>2} {name}: PASS ({d}) [{:.1}s]",
                took.as_secs_f64()
            ),
            Err(d) => {
                failed += 1;
                println!(
                    "acceptance {id:>2} {name}: FAIL ({d}) [{:.1}s]",
                    took.as_secs_f64()
                );
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
