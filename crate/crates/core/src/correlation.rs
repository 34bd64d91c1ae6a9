//! 4D correlation volumes between two feature maps, the pair transpose, and
//! factor-2 max-pooling with relocalization shifts.

use crate::error::{NcError, Result};
use crate::features::FeatureMap;
use crate::tensor4::Tensor4;

/// Pipeline stage of a correlation volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Cosine similarities straight from the feature maps.
    Raw,
    /// After the first soft mutual-NN gating.
    Mnn,
    /// After the symmetric consensus network.
    Nc,
    /// After the second gating; ready for match extraction.
    Final,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Mnn => "mnn",
            Stage::Nc => "nc",
            Stage::Final => "final",
        }
    }
}

/// Single-channel `(hA, wA, hB, wB)` score volume tagged with its stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrTensor {
    tensor: Tensor4,
    stage: Stage,
}

impl CorrTensor {
    pub fn new(tensor: Tensor4, stage: Stage) -> Result<Self> {
        tensor.require_single_channel("CorrTensor")?;
        Ok(Self { tensor, stage })
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.tensor
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// `(hA, wA, hB, wB)`.
    pub fn dims(&self) -> [usize; 4] {
        self.tensor.dims()
    }

    pub fn get(&self, idx: [usize; 4]) -> f32 {
        self.tensor.get(0, idx)
    }

    pub(crate) fn require_stage(&self, allowed: &[Stage], expected: &'static str) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(NcError::WrongStage {
                expected,
                actual: self.stage,
            })
        }
    }

    /// Re-tags the volume; stages only move forward.
    pub(crate) fn advance(tensor: Tensor4, from: Stage, to: Stage) -> Self {
        debug_assert!(to > from);
        Self { tensor, stage: to }
    }
}

/// Exhaustive pairwise cosine similarities; a cell whose descriptor norm is
/// below `1e-12` correlates to 0 with everything.
pub fn correlate(fa: &FeatureMap, fb: &FeatureMap) -> Result<CorrTensor> {
    if fa.d() != fb.d() {
        return Err(NcError::DescriptorMismatch {
            a: fa.d(),
            b: fb.d(),
        });
    }
    let d = fa.d();
    let sq = |f: &FeatureMap| -> Vec<f32> {
        f.data()
            .chunks_exact(d)
            .map(|v| v.iter().map(|x| x * x).sum())
            .collect()
    };
    let ssa = sq(fa);
    let ssb = sq(fb);
    const TINY: f32 = 1e-24; // (1e-12)^2
    let nb = fb.h() * fb.w();
    let mut out = Vec::with_capacity(ssa.len() * nb);
    for (va, &sa) in fa.data().chunks_exact(d).zip(&ssa) {
        for (vb, &sb) in fb.data().chunks_exact(d).zip(&ssb) {
            if sa < TINY || sb < TINY {
                out.push(0.0);
                continue;
            }
            let dot: f32 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
            // sqrt(sa * sa) == sa exactly, so identical cells give exactly 1
            out.push(dot / (sa * sb).sqrt());
        }
    }
    let t = Tensor4::from_vec(1, [fa.h(), fa.w(), fb.h(), fb.w()], out)?;
    CorrTensor::new(t, Stage::Raw)
}

/// `out[i,j,k,l] = c[k,l,i,j]`; the stage is preserved.
pub fn transpose_pairs(c: &CorrTensor) -> CorrTensor {
    CorrTensor {
        tensor: c.tensor.transpose_pairs(),
        stage: c.stage,
    }
}

/// In-block argmax offsets recorded by [`maxpool_downsample`], one binary
/// grid per axis over the pooled dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelocShifts {
    dims: [usize; 4],
    shifts: [Vec<u8>; 4],
}

impl RelocShifts {
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// `(δa, δb, δc, δd)` at a pooled index.
    pub fn at(&self, idx: [usize; 4]) -> [u8; 4] {
        let o = self.linear(idx);
        [
            self.shifts[0][o],
            self.shifts[1][o],
            self.shifts[2][o],
            self.shifts[3][o],
        ]
    }

    /// Shift grid for one axis.
    pub fn axis(&self, axis: usize) -> &[u8] {
        &self.shifts[axis]
    }

    fn linear(&self, idx: [usize; 4]) -> usize {
        let [_, d2, d3, d4] = self.dims;
        ((idx[0] * d2 + idx[1]) * d3 + idx[2]) * d4 + idx[3]
    }

    /// The shifts seen from the other image: axis pairs swapped.
    pub fn transpose_pairs(&self) -> RelocShifts {
        let [d1, d2, d3, d4] = self.dims;
        let mut out = RelocShifts {
            dims: [d3, d4, d1, d2],
            shifts: std::array::from_fn(|_| vec![0; self.shifts[0].len()]),
        };
        for a in 0..d1 {
            for b in 0..d2 {
                for c in 0..d3 {
                    for d in 0..d4 {
                        let s = self.at([a, b, c, d]);
                        let o = out.linear([c, d, a, b]);
                        out.shifts[0][o] = s[2];
                        out.shifts[1][o] = s[3];
                        out.shifts[2][o] = s[0];
                        out.shifts[3][o] = s[1];
                    }
                }
            }
        }
        out
    }
}

/// 2x2x2x2 max-pooling. Ties resolve to the lowest in-block offset.
pub fn maxpool_downsample(c: &CorrTensor) -> Result<(CorrTensor, RelocShifts)> {
    let dims = c.dims();
    for (axis, &size) in dims.iter().enumerate() {
        if size % 2 != 0 {
            return Err(NcError::OddDimension { axis, size });
        }
    }
    let pd = dims.map(|n| n / 2);
    let n = pd.iter().product::<usize>();
    let mut values = Vec::with_capacity(n);
    let mut shifts: [Vec<u8>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    let t = &c.tensor;
    for a in 0..pd[0] {
        for b in 0..pd[1] {
            for cc in 0..pd[2] {
                for d in 0..pd[3] {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = [0u8; 4];
                    for o in 0..16u8 {
                        let off = [o >> 3 & 1, o >> 2 & 1, o >> 1 & 1, o & 1];
                        let v = t.get(
                            0,
                            [
                                2 * a + off[0] as usize,
                                2 * b + off[1] as usize,
                                2 * cc + off[2] as usize,
                                2 * d + off[3] as usize,
                            ],
                        );
                        if v > best {
                            best = v;
                            arg = off;
                        }
                    }
                    values.push(best);
                    for (s, v) in shifts.iter_mut().zip(arg) {
                        s.push(v);
                    }
                }
            }
        }
    }
    let pooled = CorrTensor {
        tensor: Tensor4::from_vec(1, pd, values)?,
        stage: c.stage,
    };
    Ok((pooled, RelocShifts { dims: pd, shifts }))
}

/// Re-localized positions `(a + δa/2, b + δb/2, c + δc/2, d + δd/2)` in
/// pooled-cell units.
pub fn apply_relocalization(idx: [usize; 4], shifts: &RelocShifts) -> Result<[f64; 4]> {
    if idx.iter().zip(shifts.dims).any(|(&i, n)| i >= n) {
        return Err(NcError::OutOfBounds(format!(
            "index {idx:?} outside pooled dims {:?}",
            shifts.dims
        )));
    }
    let s = shifts.at(idx);
    Ok(std::array::from_fn(|n| idx[n] as f64 + s[n] as f64 / 2.0))
}
