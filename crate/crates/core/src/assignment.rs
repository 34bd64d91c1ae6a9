//! Match extraction: softmax scores, hard assignment, pixel mapping,
//! keypoint transfer and PCK.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlation::{apply_relocalization, CorrTensor, RelocShifts, Stage};
use crate::error::{NcError, Result};
use crate::features::FeatureMap;
use crate::tensor4::{argmax_slice, Pair, Tensor4};

/// `(sA, sB)`: softmax over image A's axes and over image B's axes.
pub fn scores(c: &CorrTensor) -> Result<(Tensor4, Tensor4)> {
    c.require_stage(&[Stage::Final], "final")?;
    Ok((
        c.tensor().softmax_over_pair(Pair::First)?,
        c.tensor().softmax_over_pair(Pair::Second)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    AtoB,
    BtoA,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    /// Cell in the source image of the direction.
    pub src: [usize; 2],
    pub dst: [usize; 2],
    pub score: f32,
    /// `(x, y)` pixel position in the source image.
    pub pixel_src: (f64, f64),
    pub pixel_dst: (f64, f64),
}

/// One assignment per source cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub direction: Direction,
    pub src_grid: [usize; 2],
    pub dst_grid: [usize; 2],
    /// Source image `(height, width)` in pixels.
    pub src_image: [usize; 2],
    pub dst_image: [usize; 2],
    pub matches: Vec<Match>,
}

impl MatchSet {
    /// The `(i, j, k, l)` index of a match with A's cell first.
    pub fn index4(&self, m: &Match) -> [usize; 4] {
        match self.direction {
            Direction::AtoB => [m.src[0], m.src[1], m.dst[0], m.dst[1]],
            Direction::BtoA => [m.dst[0], m.dst[1], m.src[0], m.src[1]],
        }
    }

    pub fn to_records(&self) -> Vec<MatchRecord> {
        self.matches
            .iter()
            .map(|m| {
                let [i, j, k, l] = self.index4(m);
                let (pa, pb) = match self.direction {
                    Direction::AtoB => (m.pixel_src, m.pixel_dst),
                    Direction::BtoA => (m.pixel_dst, m.pixel_src),
                };
                MatchRecord {
                    i,
                    j,
                    k,
                    l,
                    score: m.score,
                    xa: pa.0,
                    ya: pa.1,
                    xb: pb.0,
                    yb: pb.1,
                }
            })
            .collect()
    }

    /// Rebuilds an A-to-B match set from JSONL records. Grid dims are
    /// inferred from the indices, image dims are supplied by the caller.
    pub fn from_records(
        records: &[MatchRecord],
        image_a: [usize; 2],
        image_b: [usize; 2],
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(NcError::InvalidArgument("no matches".into()));
        }
        let src_grid = [
            records.iter().map(|r| r.i).max().unwrap() + 1,
            records.iter().map(|r| r.j).max().unwrap() + 1,
        ];
        let dst_grid = [
            records.iter().map(|r| r.k).max().unwrap() + 1,
            records.iter().map(|r| r.l).max().unwrap() + 1,
        ];
        Ok(MatchSet {
            direction: Direction::AtoB,
            src_grid,
            dst_grid,
            src_image: image_a,
            dst_image: image_b,
            matches: records
                .iter()
                .map(|r| Match {
                    src: [r.i, r.j],
                    dst: [r.k, r.l],
                    score: r.score,
                    pixel_src: (r.xa, r.ya),
                    pixel_dst: (r.xb, r.yb),
                })
                .collect(),
        })
    }
}

/// For every source cell, the mode of its conditional score distribution.
/// `s` is `sB` for `AtoB` and `sA` for `BtoA`. Pixel coordinates are left
/// in cell units (cell centers at `+0.5`).
pub fn hard_assign(s: &Tensor4, direction: Direction) -> Result<MatchSet> {
    s.require_single_channel("hard_assign")?;
    let [d1, d2, d3, d4] = s.dims();
    let unit = |r: usize, c: usize| (c as f64 + 0.5, r as f64 + 0.5);
    let mut matches = Vec::new();
    match direction {
        Direction::AtoB => {
            for (p, row) in s.data().chunks_exact(d3 * d4).enumerate() {
                let (q, v) = argmax_slice(row);
                let (src, dst) = ([p / d2, p % d2], [q / d4, q % d4]);
                matches.push(Match {
                    src,
                    dst,
                    score: v,
                    pixel_src: unit(src[0], src[1]),
                    pixel_dst: unit(dst[0], dst[1]),
                });
            }
            Ok(MatchSet {
                direction,
                src_grid: [d1, d2],
                dst_grid: [d3, d4],
                src_image: [d1, d2],
                dst_image: [d3, d4],
                matches,
            })
        }
        Direction::BtoA => {
            let (vals, arg) = s.max_over_pair(Pair::First)?;
            for q in 0..d3 * d4 {
                let p = arg.index[q];
                let (src, dst) = ([q / d4, q % d4], [p / d2, p % d2]);
                matches.push(Match {
                    src,
                    dst,
                    score: vals.data()[q],
                    pixel_src: unit(src[0], src[1]),
                    pixel_dst: unit(dst[0], dst[1]),
                });
            }
            Ok(MatchSet {
                direction,
                src_grid: [d3, d4],
                dst_grid: [d1, d2],
                src_image: [d3, d4],
                dst_image: [d1, d2],
                matches,
            })
        }
    }
}

/// A-to-B correspondences from a final volume, in pixel coordinates.
///
/// Without shifts the volume must match the two feature grids. With shifts
/// the feature maps are the full-resolution ones the volume was pooled from
/// (twice its size per axis), and each match is moved by half a pooled cell
/// per set shift bit before mapping to the center of the full-resolution
/// cell it came from.
pub fn extract_matches(
    c: &CorrTensor,
    fa: &FeatureMap,
    fb: &FeatureMap,
    shifts: Option<&RelocShifts>,
) -> Result<MatchSet> {
    let scale = if shifts.is_some() { 2 } else { 1 };
    let expect = [fa.h(), fa.w(), fb.h(), fb.w()];
    let dims = c.dims();
    if dims.map(|n| n * scale) != expect {
        return Err(NcError::Shape(format!(
            "correlation dims {dims:?} (x{scale}) do not match feature grids {expect:?}"
        )));
    }
    if let Some(s) = shifts {
        if s.dims() != dims {
            return Err(NcError::Shape(format!(
                "shift grid {:?} does not match correlation dims {dims:?}",
                s.dims()
            )));
        }
    }
    let (_, sb) = scores(c)?;
    let mut set = hard_assign(&sb, Direction::AtoB)?;
    for m in &mut set.matches {
        let idx = [m.src[0], m.src[1], m.dst[0], m.dst[1]];
        let pos = match shifts {
            Some(s) => apply_relocalization(idx, s)?.map(|v| 2.0 * v),
            None => idx.map(|v| v as f64),
        };
        m.pixel_src = fa.cell_to_pixel(pos[0], pos[1]);
        m.pixel_dst = fb.cell_to_pixel(pos[2], pos[3]);
    }
    set.src_image = [fa.image_h(), fa.image_w()];
    set.dst_image = [fb.image_h(), fb.image_w()];
    Ok(set)
}

/// Moves each keypoint `(x, y)` of the source image to the destination of
/// the match whose source pixel is nearest (ties to the earliest match).
pub fn transfer_keypoints(keypoints: &[(f64, f64)], set: &MatchSet) -> Result<Vec<(f64, f64)>> {
    let [h, w] = set.src_image;
    keypoints
        .iter()
        .map(|&(x, y)| {
            if !(x >= 0.0 && y >= 0.0 && x <= w as f64 && y <= h as f64) {
                return Err(NcError::OutOfBounds(format!(
                    "keypoint ({x}, {y}) outside {w}x{h} image"
                )));
            }
            let mut best = None;
            let mut best_d = f64::INFINITY;
            for m in &set.matches {
                let d = (m.pixel_src.0 - x).powi(2) + (m.pixel_src.1 - y).powi(2);
                if d < best_d {
                    best_d = d;
                    best = Some(m.pixel_dst);
                }
            }
            best.ok_or_else(|| NcError::InvalidArgument("empty match set".into()))
        })
        .collect()
}

/// Reference length that `alpha` is multiplied with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PckReference {
    /// `max(height, width)` of image B.
    Image { height: usize, width: usize },
    /// `max(height, width)` of the ground-truth keypoints' bounding box.
    KeypointBox,
}

/// Fraction of predictions within `alpha * max(H_B, W_B)` of the truth.
pub fn pck(
    predicted: &[(f64, f64)],
    ground_truth: &[(f64, f64)],
    image_b: [usize; 2],
    alpha: f64,
) -> Result<f64> {
    pck_with_reference(
        predicted,
        ground_truth,
        PckReference::Image {
            height: image_b[0],
            width: image_b[1],
        },
        alpha,
    )
}

pub fn pck_with_reference(
    predicted: &[(f64, f64)],
    ground_truth: &[(f64, f64)],
    reference: PckReference,
    alpha: f64,
) -> Result<f64> {
    let preds: Vec<Option<(f64, f64)>> = predicted.iter().copied().map(Some).collect();
    pck_partial(&preds, ground_truth, reference, alpha)
}

/// PCK where some keypoints have no prediction; those count as wrong.
pub fn pck_partial(
    predicted: &[Option<(f64, f64)>],
    ground_truth: &[(f64, f64)],
    reference: PckReference,
    alpha: f64,
) -> Result<f64> {
    if predicted.len() != ground_truth.len() {
        return Err(NcError::InvalidArgument(format!(
            "{} predictions for {} ground-truth keypoints",
            predicted.len(),
            ground_truth.len()
        )));
    }
    if ground_truth.is_empty() {
        return Err(NcError::InvalidArgument("no keypoints".into()));
    }
    if !(alpha > 0.0) {
        return Err(NcError::InvalidArgument(format!(
            "alpha must be > 0, got {alpha}"
        )));
    }
    let len = match reference {
        PckReference::Image { height, width } => height.max(width) as f64,
        PckReference::KeypointBox => {
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &(x, y) in ground_truth {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
            (x1 - x0).max(y1 - y0)
        }
    };
    let thresh = alpha * len;
    let correct = predicted
        .iter()
        .zip(ground_truth)
        .filter(|(p, g)| match p {
            Some(p) => ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt() <= thresh,
            None => false,
        })
        .count();
    Ok(correct as f64 / ground_truth.len() as f64)
}

/// One line of the match JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub score: f32,
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
}

pub fn write_matches_jsonl(set: &MatchSet, mut w: impl Write) -> Result<()> {
    for r in set.to_records() {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_matches_jsonl(path: impl AsRef<Path>) -> Result<Vec<MatchRecord>> {
    let path = path.as_ref();
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| NcError::Parse {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn hw(self) -> [usize; 2] {
        [self.height, self.width]
    }
}

/// Ground-truth keypoint pairs between two images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub image_a: ImageDims,
    pub image_b: ImageDims,
    /// `[xa, ya, xb, yb]` per keypoint.
    pub pairs: Vec<[f64; 4]>,
}

impl KeypointFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| NcError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn points_a(&self) -> Vec<(f64, f64)> {
        self.pairs.iter().map(|p| (p[0], p[1])).collect()
    }

    pub fn points_b(&self) -> Vec<(f64, f64)> {
        self.pairs.iter().map(|p| (p[2], p[3])).collect()
    }
}
