use std::fs::File;
use std::io::{BufWriter, Write};

use ncnet_core::assignment::{
    pck, read_matches_jsonl, transfer_keypoints, write_matches_jsonl, KeypointFile, MatchSet,
};
use ncnet_core::bench::{run_bench as bench_kernels, BenchConfig};
use ncnet_core::features::{patch_descriptor, read_features, read_pgm, write_features};
use ncnet_core::ncnet::{init_params, load_params_for, save_params, NetConfig};
use ncnet_core::pipeline::{load_dataset, match_pair, write_dataset, Preset, SynthBenchmark};
use ncnet_core::training::{
    finite_diff_check_against, loss_and_grad, train, write_loss_csv, Tolerance, TrainConfig,
};
use ncnet_core::{InitScheme, NcError, SynthConfig};

use crate::{
    BenchArgs, DescribeArgs, EvalArgs, GradcheckArgs, InitArg, MatchArgs, PresetArg, SynthArgs,
    TrainArgs,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(NcError),
    Check(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl From<NcError> for CliError {
    fn from(e: NcError) -> Self {
        match e {
            NcError::InvalidArgument(m) => CliError::Usage(m),
            e @ NcError::ResourceLimit { .. } => CliError::Usage(format!(
                "{e}; choose smaller sizes or raise --memory-limit-mb"
            )),
            e => CliError::Data(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult = Result<(), CliError>;

impl PresetArg {
    fn net(self) -> NetConfig {
        match self {
            PresetArg::Category => Preset::Category,
            PresetArg::Instance => Preset::Instance,
        }
        .net_config()
    }
}

pub fn run_match(a: MatchArgs) -> CliResult {
    let fa = read_features(&a.features_a)?;
    let fb = read_features(&a.features_b)?;
    let params = load_params_for(&a.weights, a.preset.net())?;
    let m = match_pair(&fa, &fb, &params, a.relocalize)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    write_matches_jsonl(&m.matches, &mut w)?;
    w.flush()?;
    eprintln!(
        "{} matches written to {}",
        m.matches.matches.len(),
        a.out.display()
    );
    Ok(())
}

pub fn run_train(a: TrainArgs) -> CliResult {
    let data = load_dataset(&a.data)?;
    let val = match &a.val {
        Some(dir) => load_dataset(dir)?,
        None => Vec::new(),
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        net: a.preset.net(),
        init: match a.init {
            InitArg::CenterIdentity => InitScheme::CenterIdentity,
            InitArg::Uniform => InitScheme::Uniform,
        },
    };
    if !(cfg.lr >= 0.0) {
        return Err(CliError::Usage(format!("lr must be >= 0, got {}", cfg.lr)));
    }
    let out = train(&data, &val, &cfg)?;
    for e in &out.log {
        match e.val_loss {
            Some(v) => println!("epoch {} train {:.6} val {:.6}", e.epoch, e.train_loss, v),
            None => println!("epoch {} train {:.6}", e.epoch, e.train_loss),
        }
    }
    save_params(&out.params, &a.weights_out)?;
    write_loss_csv(&out.log, &a.loss_csv)?;
    Ok(())
}

pub fn run_eval_pck(a: EvalArgs) -> CliResult {
    if !(a.alpha > 0.0) {
        return Err(CliError::Usage(format!(
            "alpha must be > 0, got {}",
            a.alpha
        )));
    }
    let kp = KeypointFile::load(&a.keypoints)?;
    let set = if let Some(path) = &a.matches {
        MatchSet::from_records(&read_matches_jsonl(path)?, kp.image_a.hw(), kp.image_b.hw())?
    } else if let (Some(w), Some(pa), Some(pb)) = (&a.weights, &a.features_a, &a.features_b) {
        let fa = read_features(pa)?;
        let fb = read_features(pb)?;
        let params = load_params_for(w, a.preset.net())?;
        match_pair(&fa, &fb, &params, a.relocalize)?.matches
    } else {
        return Err(CliError::Usage(
            "give --matches, or --weights with --features-a and --features-b".into(),
        ));
    };
    let pred = transfer_keypoints(&kp.points_a(), &set)?;
    let value = pck(&pred, &kp.points_b(), kp.image_b.hw(), a.alpha)?;
    println!("{value:.4}");
    if let Some(out) = &a.out {
        std::fs::write(out, format!("{value:.4}\n"))?;
    }
    Ok(())
}

pub fn run_gradcheck(a: GradcheckArgs) -> CliResult {
    let mut synth = SynthConfig::new(a.seed, a.grid, a.grid, a.dim);
    synth.noise_sigma = 0.3;
    synth.shift = (1.min(a.grid as isize - 1), 0);
    let sample = ncnet_core::synth_pair(&synth)?;
    let net = NetConfig {
        num_layers: a.layers,
        k: a.k,
        hidden: a.hidden,
        final_relu: true,
    };
    let params = init_params(net, a.seed)?;
    let (_, mut grads) = loss_and_grad(&sample, &params)?;
    if a.corrupt {
        let w = &mut grads.layers.last_mut().unwrap().weights;
        let (n, _) =
            w.iter().enumerate().fold(
                (0, 0.0f32),
                |b, (n, v)| if v.abs() > b.1 { (n, v.abs()) } else { b },
            );
        w[n] = w[n] * 1.5 + 1e-3;
    }
    let tol = Tolerance {
        rel: a.rel_tol,
        abs: a.abs_tol,
        ..Tolerance::default()
    };
    let report = finite_diff_check_against(&sample, &params, &grads, tol)?;
    println!("{report}");
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Check("gradient check failed".into()))
    }
}

pub fn run_bench(a: BenchArgs) -> CliResult {
    let cfg = BenchConfig {
        sizes: a.sizes,
        descriptor_dim: a.dim,
        channels: a.channels,
        k: a.k,
        repeats: a.repeats,
        seed: a.seed,
        memory_limit: a.memory_limit_mb.saturating_mul(1 << 20),
    };
    let report = bench_kernels(&cfg)?;
    match &a.out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            report.write_csv(&mut w)?;
            w.flush()?;
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    for t in &report.trends {
        eprintln!(
            "correlate {} -> {}: expected x{:.1}, time x{:.2}, memory x{:.2}{}",
            t.from,
            t.to,
            t.expected,
            t.time_ratio,
            t.memory_ratio,
            if t.within_factor_two() {
                ""
            } else {
                " (outside factor 2)"
            }
        );
    }
    if a.check_trend && !report.trends_ok() {
        return Err(CliError::Check(
            "correlation growth outside factor 2 of (hw)^2".into(),
        ));
    }
    Ok(())
}

pub fn run_synth(a: SynthArgs) -> CliResult {
    let bench = SynthBenchmark {
        h: a.grid,
        w: a.grid,
        d: a.dim,
        repetition_period: (a.period > 0).then_some(a.period),
        noise_sigma: a.noise,
        max_shift: a.max_shift,
    };
    let samples = bench.generate(a.positives, a.negatives, a.seed)?;
    write_dataset(&a.out, &samples)?;
    eprintln!("{} pairs written to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn run_describe(a: DescribeArgs) -> CliResult {
    let img = read_pgm(&a.image)?;
    let f = patch_descriptor(&img, a.stride, a.patch)?;
    write_features(&f, &a.out)?;
    eprintln!("{}x{} grid, {} dims", f.h(), f.w(), f.d());
    Ok(())
}
