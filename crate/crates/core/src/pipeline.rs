//! End-to-end matching of a feature pair, the hard mutual-NN baseline, and
//! on-disk datasets of labelled pairs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{extract_matches, transfer_keypoints, ImageDims, KeypointFile, MatchSet};
use crate::correlation::{correlate, maxpool_downsample, CorrTensor, RelocShifts};
use crate::error::{NcError, Result};
use crate::features::{
    read_features, synth_negative, synth_pair, write_features, FeatureMap, Label, SynthConfig,
    TrainSample,
};
use crate::matchfilter::{hard_mutual_nn, soft_mutual_nn};
use crate::ncnet::{ncnet_symmetric, NcNetParams, NetConfig};

/// Network size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Category,
    Instance,
}

impl Preset {
    pub fn net_config(self) -> NetConfig {
        match self {
            Preset::Category => NetConfig::CATEGORY,
            Preset::Instance => NetConfig::INSTANCE,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = NcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(Preset::Category),
            "instance" => Ok(Preset::Instance),
            other => Err(NcError::InvalidArgument(format!(
                "unknown preset {other:?} (expected category or instance)"
            ))),
        }
    }
}

/// Settings shared by the command-line entry points.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub relocalize: bool,
    pub alpha: f64,
    pub seed: u64,
    pub lr: f32,
    pub epochs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Instance,
            relocalize: false,
            alpha: 0.1,
            seed: 0,
            lr: 5e-4,
            epochs: 5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(NcError::InvalidArgument(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PairMatches {
    /// Filtered volume after the second gating.
    pub final_tensor: CorrTensor,
    pub shifts: Option<RelocShifts>,
    pub matches: MatchSet,
}

/// Correlation, gating, symmetric consensus, gating and extraction. With
/// `relocalize`, the volume is max-pooled once before filtering and the
/// recorded shifts refine the output coordinates.
pub fn match_pair(
    fa: &FeatureMap,
    fb: &FeatureMap,
    params: &NcNetParams,
    relocalize: bool,
) -> Result<PairMatches> {
    let (final_tensor, shifts) = filter_pair(fa, fb, params, relocalize)?;
    let matches = extract_matches(&final_tensor, fa, fb, shifts.as_ref())?;
    Ok(PairMatches {
        final_tensor,
        shifts,
        matches,
    })
}

/// The filtering stages of [`match_pair`] without extraction.
pub fn filter_pair(
    fa: &FeatureMap,
    fb: &FeatureMap,
    params: &NcNetParams,
    relocalize: bool,
) -> Result<(CorrTensor, Option<RelocShifts>)> {
    let mut c = correlate(fa, fb)?;
    let mut shifts = None;
    if relocalize {
        let (pooled, s) = maxpool_downsample(&c)?;
        c = pooled;
        shifts = Some(s);
    }
    let gated = soft_mutual_nn(&c);
    let nc = ncnet_symmetric(&gated, params)?;
    Ok((soft_mutual_nn(&nc), shifts))
}

/// Keypoint transfer through the mutual nearest neighbours of the raw
/// correlation. A keypoint is mapped through the cell whose center is
/// nearest; it has no prediction when that cell has no mutual match.
pub fn mnn_baseline_transfer(
    fa: &FeatureMap,
    fb: &FeatureMap,
    keypoints: &[(f64, f64)],
) -> Result<Vec<Option<(f64, f64)>>> {
    let c = correlate(fa, fb)?;
    let mut partner: Vec<Option<[usize; 2]>> = vec![None; fa.h() * fa.w()];
    for [i, j, k, l] in hard_mutual_nn(&c) {
        partner[i * fa.w() + j] = Some([k, l]);
    }
    let (px, py) = fa.cell_pitch();
    keypoints
        .iter()
        .map(|&(x, y)| {
            if !(x >= 0.0 && y >= 0.0 && x <= fa.image_w() as f64 && y <= fa.image_h() as f64) {
                return Err(NcError::OutOfBounds(format!(
                    "keypoint ({x}, {y}) outside {}x{} image",
                    fa.image_w(),
                    fa.image_h()
                )));
            }
            let i = nearest_cell(y, py, fa.h());
            let j = nearest_cell(x, px, fa.w());
            Ok(partner[i * fa.w() + j].map(|[k, l]| fb.cell_to_pixel(k as f64, l as f64)))
        })
        .collect()
}

fn nearest_cell(v: f64, pitch: f64, n: usize) -> usize {
    // ties between two centers go to the lower cell, as in transfer
    let c = (v / pitch - 0.5).max(0.0);
    let lo = c.floor();
    let idx = if c - lo > 0.5 { lo + 1.0 } else { lo };
    (idx as usize).min(n - 1)
}

/// Keypoint transfer through the full pipeline's A-to-B matches.
pub fn pipeline_transfer(
    fa: &FeatureMap,
    fb: &FeatureMap,
    params: &NcNetParams,
    keypoints: &[(f64, f64)],
) -> Result<Vec<(f64, f64)>> {
    let m = match_pair(fa, fb, params, false)?;
    transfer_keypoints(keypoints, &m.matches)
}

/// Pixel centers of a sample's ground-truth cell pairs, as `(A, B)` lists.
pub fn ground_truth_keypoints(sample: &TrainSample) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let gt = sample
        .ground_truth
        .as_ref()
        .ok_or_else(|| NcError::Dataset("sample has no ground truth".into()))?;
    Ok(gt
        .iter()
        .map(|&([i, j], [k, l])| {
            (
                sample.fa.cell_to_pixel(i as f64, j as f64),
                sample.fb.cell_to_pixel(k as f64, l as f64),
            )
        })
        .unzip())
}

/// Ground-truth keypoints of a sample in the on-disk keypoint format.
pub fn keypoint_file(sample: &TrainSample) -> Result<KeypointFile> {
    let (a, b) = ground_truth_keypoints(sample)?;
    Ok(KeypointFile {
        image_a: ImageDims {
            height: sample.fa.image_h(),
            width: sample.fa.image_w(),
        },
        image_b: ImageDims {
            height: sample.fb.image_h(),
            width: sample.fb.image_w(),
        },
        pairs: a
            .iter()
            .zip(&b)
            .map(|(p, q)| [p.0, p.1, q.0, q.1])
            .collect(),
    })
}

/// A family of synthetic translation pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBenchmark {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub repetition_period: Option<usize>,
    pub noise_sigma: f32,
    /// Shifts are drawn uniformly from `-max_shift..=max_shift` per axis.
    pub max_shift: usize,
}

impl SynthBenchmark {
    fn config(&self, seed: u64, shift: (isize, isize)) -> SynthConfig {
        let mut c = SynthConfig::new(seed, self.h, self.w, self.d);
        c.repetition_period = self.repetition_period;
        c.noise_sigma = self.noise_sigma;
        c.shift = shift;
        c
    }

    /// `positives` translated pairs followed by `negatives` unrelated
    /// pairs, all derived from `seed`.
    pub fn generate(
        &self,
        positives: usize,
        negatives: usize,
        seed: u64,
    ) -> Result<Vec<TrainSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.max_shift as i64;
        let mut out = Vec::with_capacity(positives + negatives);
        for _ in 0..positives {
            let shift = (
                rng.random_range(-m..=m) as isize,
                rng.random_range(-m..=m) as isize,
            );
            out.push(synth_pair(&self.config(rng.random(), shift))?);
        }
        for _ in 0..negatives {
            let cfg = self.config(rng.random(), (0, 0));
            out.push(synth_negative(&cfg, rng.random())?);
        }
        Ok(out)
    }
}

/// One line of a dataset manifest: `path_a path_b +1|-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub label: Label,
}

/// File name of the manifest inside a dataset directory.
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Parses a manifest. Blank lines and lines starting with `#` are skipped;
/// relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| NcError::Parse {
            path: path.to_path_buf(),
            msg: format!("line {}: {msg}", n + 1),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [a, b, y] = fields[..] else {
            return Err(err(format!("expected 3 fields, got {}", fields.len())));
        };
        let label = match y {
            "+1" | "1" => Label::Positive,
            "-1" => Label::Negative,
            other => return Err(err(format!("label must be +1 or -1, got {other:?}"))),
        };
        out.push(ManifestEntry {
            path_a: base.join(a),
            path_b: base.join(b),
            label,
        });
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        let y = match e.label {
            Label::Positive => "+1",
            Label::Negative => "-1",
        };
        text.push_str(&format!(
            "{} {} {y}\n",
            e.path_a.display(),
            e.path_b.display()
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Loads every pair listed in `dir/manifest.txt`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<TrainSample>> {
    let entries = read_manifest(dir.as_ref().join(MANIFEST_NAME))?;
    entries
        .iter()
        .map(|e| {
            TrainSample::new(
                read_features(&e.path_a)?,
                read_features(&e.path_b)?,
                e.label,
            )
        })
        .collect()
}

/// Writes samples as `NNNN_a.ncf` / `NNNN_b.ncf` plus a manifest with
/// relative paths. Samples with ground truth also get `NNNN_kp.json`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[TrainSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (n, s) in samples.iter().enumerate() {
        let a = PathBuf::from(format!("{n:04}_a.ncf"));
        let b = PathBuf::from(format!("{n:04}_b.ncf"));
        write_features(&s.fa, dir.join(&a))?;
        write_features(&s.fb, dir.join(&b))?;
        if s.ground_truth.is_some() {
            keypoint_file(s)?.save(dir.join(format!("{n:04}_kp.json")))?;
        }
        entries.push(ManifestEntry {
            path_a: a,
            path_b: b,
            label: s.label,
        });
    }
    write_manifest(&entries, dir.join(MANIFEST_NAME))
}
