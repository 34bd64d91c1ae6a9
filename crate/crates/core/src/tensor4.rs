//! Dense multi-channel 4D tensor.
//!
//! Storage is channel-major and then row-major over the four spatial axes,
//! so a fixed `(channel, d1)` index selects a contiguous 3D block.

use crate::error::{NcError, Result};

/// A pair of axes of a 4D tensor: `First` is `(d1, d2)`, `Second` is `(d3, d4)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pair {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    channels: usize,
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(channels: usize, dims: [usize; 4]) -> Self {
        Self::filled(channels, dims, 0.0)
    }

    pub fn filled(channels: usize, dims: [usize; 4], value: f32) -> Self {
        assert!(channels > 0 && dims.iter().all(|&d| d > 0), "empty tensor");
        let len = channels * dims.iter().product::<usize>();
        Self {
            channels,
            dims,
            data: vec![value; len],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.iter().any(|&d| d == 0) {
            return Err(NcError::Shape(format!(
                "channels and dims must be positive, got {channels} x {dims:?}"
            )));
        }
        let expected = channels * dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(NcError::Shape(format!(
                "data length {} does not match {channels} x {dims:?} = {expected}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    /// Builds a single-channel tensor by evaluating `f` at every index.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut t = Self::zeros(1, dims);
        let mut n = 0;
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    for l in 0..dims[3] {
                        t.data[n] = f([i, j, k, l]);
                        n += 1;
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// Number of spatial elements per channel.
    #[inline]
    pub fn spatial_len(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Row-major linear offset of a spatial index within one channel.
    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, d2, d3, d4] = self.dims;
        ((idx[0] * d2 + idx[1]) * d3 + idx[2]) * d4 + idx[3]
    }

    #[inline]
    pub fn get(&self, c: usize, idx: [usize; 4]) -> f32 {
        self.data[c * self.spatial_len() + self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, idx: [usize; 4], v: f32) {
        let o = c * self.spatial_len() + self.offset(idx);
        self.data[o] = v;
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Tensor4 {
        let mut out = self.clone();
        out.relu_in_place();
        out
    }

    pub fn relu_in_place(&mut self) {
        for v in &mut self.data {
            // `max` keeps -0.0 as is; force a clean zero
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Swaps the two axis pairs: `out[i,j,k,l] = self[k,l,i,j]` for every channel.
    pub fn transpose_pairs(&self) -> Tensor4 {
        let [d1, d2, d3, d4] = self.dims;
        let a = d1 * d2;
        let b = d3 * d4;
        let mut out = Tensor4::zeros(self.channels, [d3, d4, d1, d2]);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for p in 0..a {
                for q in 0..b {
                    dst[q * a + p] = src[p * b + q];
                }
            }
        }
        out
    }

    /// Maximum over one axis pair, with the argmax as a linear index within
    /// that pair. Ties break to the lowest row-major index.
    pub fn max_over_pair(&self, pair: Pair) -> Result<(Tensor4, ArgmaxGrid)> {
        self.require_single_channel("max_over_pair")?;
        let [d1, d2, d3, d4] = self.dims;
        let a = d1 * d2;
        let b = d3 * d4;
        let x = &self.data;
        match pair {
            Pair::Second => {
                let mut values = Vec::with_capacity(a);
                let mut argmax = Vec::with_capacity(a);
                for row in x.chunks_exact(b) {
                    let (idx, v) = argmax_slice(row);
                    values.push(v);
                    argmax.push(idx);
                }
                Ok((
                    Tensor4::from_vec(1, [d1, d2, 1, 1], values)?,
                    ArgmaxGrid {
                        rows: [d1, d2],
                        reduced: [d3, d4],
                        index: argmax,
                    },
                ))
            }
            Pair::First => {
                let mut values = x[..b].to_vec();
                let mut argmax = vec![0usize; b];
                for p in 1..a {
                    let row = &x[p * b..(p + 1) * b];
                    for q in 0..b {
                        if row[q] > values[q] {
                            values[q] = row[q];
                            argmax[q] = p;
                        }
                    }
                }
                Ok((
                    Tensor4::from_vec(1, [1, 1, d3, d4], values)?,
                    ArgmaxGrid {
                        rows: [d3, d4],
                        reduced: [d1, d2],
                        index: argmax,
                    },
                ))
            }
        }
    }

    /// Softmax over one axis pair, with per-slice max subtraction.
    pub fn softmax_over_pair(&self, pair: Pair) -> Result<Tensor4> {
        self.require_single_channel("softmax_over_pair")?;
        let [d1, d2, d3, d4] = self.dims;
        let a = d1 * d2;
        let b = d3 * d4;
        let mut out = self.clone();
        let y = &mut out.data;
        match pair {
            Pair::Second => {
                for row in y.chunks_exact_mut(b) {
                    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0f32;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        sum += *v;
                    }
                    let inv = 1.0 / sum;
                    for v in row.iter_mut() {
                        *v *= inv;
                    }
                }
            }
            Pair::First => {
                let mut m = vec![f32::NEG_INFINITY; b];
                for row in y.chunks_exact(b) {
                    for (mq, &v) in m.iter_mut().zip(row) {
                        *mq = mq.max(v);
                    }
                }
                let mut sum = vec![0.0f32; b];
                for row in y.chunks_exact_mut(b) {
                    for q in 0..b {
                        row[q] = (row[q] - m[q]).exp();
                        sum[q] += row[q];
                    }
                }
                let inv: Vec<f32> = sum.iter().map(|s| 1.0 / s).collect();
                for row in y.chunks_exact_mut(b) {
                    for (v, s) in row.iter_mut().zip(&inv) {
                        *v *= s;
                    }
                }
                debug_assert_eq!(y.len(), a * b);
            }
        }
        Ok(out)
    }

    pub(crate) fn require_single_channel(&self, what: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(NcError::Shape(format!(
                "{what} needs a single-channel tensor, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Lowest index of the maximum of a non-empty slice, and the maximum.
#[inline]
pub(crate) fn argmax_slice(xs: &[f32]) -> (usize, f32) {
    let mut best = 0;
    let mut m = xs[0];
    for (n, &v) in xs.iter().enumerate().skip(1) {
        if v > m {
            m = v;
            best = n;
        }
    }
    (best, m)
}

/// Argmax positions produced by [`Tensor4::max_over_pair`].
///
/// `rows` are the dims of the kept pair, `reduced` the dims of the pair
/// the maximum was taken over; `index` holds one linear index into
/// `reduced` per kept position, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxGrid {
    pub rows: [usize; 2],
    pub reduced: [usize; 2],
    pub index: Vec<usize>,
}

impl ArgmaxGrid {
    /// Argmax `(a, b)` for the kept position `(r, s)`.
    pub fn get(&self, r: usize, s: usize) -> (usize, usize) {
        let n = self.index[r * self.rows[1] + s];
        (n / self.reduced[1], n % self.reduced[1])
    }

    pub fn linear(&self, r: usize, s: usize) -> usize {
        self.index[r * self.rows[1] + s]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], seed: u64, scale: f32) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_| rng.random_range(-scale..scale))
    }

    #[test]
    fn relu_cases() {
        let t = Tensor4::from_vec(1, [1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(t.relu().data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor4::filled(1, [2, 2, 2, 2], -0.5);
        assert!(neg.relu().data().iter().all(|&v| v == 0.0));
        let pos = random([2, 2, 2, 2], 1, 1.0).relu();
        assert_eq!(pos.relu(), pos);
    }

    #[test]
    fn max_unique_and_constant() {
        let mut t = Tensor4::zeros(1, [2, 3, 2, 2]);
        t.set(0, [1, 2, 0, 1], 5.0);
        let (v, am) = t.max_over_pair(Pair::First).unwrap();
        assert_eq!(v.get(0, [0, 0, 0, 1]), 5.0);
        assert_eq!(am.get(0, 1), (1, 2));
        assert_eq!(am.get(1, 1), (0, 0));
        let (v, am) = t.max_over_pair(Pair::Second).unwrap();
        assert_eq!(v.get(0, [1, 2, 0, 0]), 5.0);
        assert_eq!(am.get(1, 2), (0, 1));

        let c = Tensor4::filled(1, [3, 3, 3, 3], 0.7);
        for pair in [Pair::First, Pair::Second] {
            let (v, am) = c.max_over_pair(pair).unwrap();
            assert!(v.data().iter().all(|&x| x == 0.7));
            assert!(am.index.iter().all(|&n| n == 0));
        }
    }

    #[test]
    fn max_matches_exhaustive_scan() {
        let t = random([3, 3, 3, 3], 7, 1.0);
        let (vf, af) = t.max_over_pair(Pair::First).unwrap();
        let (vs, as_) = t.max_over_pair(Pair::Second).unwrap();
        for k in 0..3 {
            for l in 0..3 {
                let mut best = (0, 0);
                let mut m = f32::NEG_INFINITY;
                for a in 0..3 {
                    for b in 0..3 {
                        if t.get(0, [a, b, k, l]) > m {
                            m = t.get(0, [a, b, k, l]);
                            best = (a, b);
                        }
                    }
                }
                assert_eq!(vf.get(0, [0, 0, k, l]), m);
                assert_eq!(af.get(k, l), best);

                let (i, j) = (k, l);
                let mut best = (0, 0);
                let mut m = f32::NEG_INFINITY;
                for c in 0..3 {
                    for d in 0..3 {
                        if t.get(0, [i, j, c, d]) > m {
                            m = t.get(0, [i, j, c, d]);
                            best = (c, d);
                        }
                    }
                }
                assert_eq!(vs.get(0, [i, j, 0, 0]), m);
                assert_eq!(as_.get(i, j), best);
            }
        }
    }

    #[test]
    fn multichannel_rejected() {
        let t = Tensor4::zeros(2, [2, 2, 2, 2]);
        assert!(t.max_over_pair(Pair::First).is_err());
        assert!(t.softmax_over_pair(Pair::Second).is_err());
    }

    #[test]
    fn softmax_uniform_and_naive() {
        let z = Tensor4::zeros(1, [5, 5, 5, 5]);
        for pair in [Pair::First, Pair::Second] {
            let s = z.softmax_over_pair(pair).unwrap();
            assert!(s.data().iter().all(|&v| (v - 0.04).abs() < 1e-7));
        }

        let t = random([4, 4, 4, 4], 3, 2.0);
        let sb = t.softmax_over_pair(Pair::Second).unwrap();
        let sa = t.softmax_over_pair(Pair::First).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let den_b: f64 = (0..16)
                    .map(|n| (t.get(0, [i, j, n / 4, n % 4]) as f64).exp())
                    .sum();
                let den_a: f64 = (0..16)
                    .map(|n| (t.get(0, [n / 4, n % 4, i, j]) as f64).exp())
                    .sum();
                for k in 0..4 {
                    for l in 0..4 {
                        let eb = (t.get(0, [i, j, k, l]) as f64).exp() / den_b;
                        assert!((sb.get(0, [i, j, k, l]) as f64 - eb).abs() < 1e-6);
                        let ea = (t.get(0, [k, l, i, j]) as f64).exp() / den_a;
                        assert!((sa.get(0, [k, l, i, j]) as f64 - ea).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_is_involution() {
        let t = random([2, 3, 4, 5], 9, 1.0);
        let tt = t.transpose_pairs();
        assert_eq!(tt.dims(), [4, 5, 2, 3]);
        assert_eq!(tt.get(0, [3, 1, 1, 2]), t.get(0, [1, 2, 3, 1]));
        assert_eq!(tt.transpose_pairs(), t);
    }

    fn slice_sums(s: &Tensor4, pair: Pair) -> Vec<f64> {
        let [d1, d2, d3, d4] = s.dims();
        let a = d1 * d2;
        let b = d3 * d4;
        let x = s.data();
        match pair {
            Pair::Second => x
                .chunks_exact(b)
                .map(|r| r.iter().map(|&v| v as f64).sum())
                .collect(),
            Pair::First => (0..b)
                .map(|q| (0..a).map(|p| x[p * b + q] as f64).sum())
                .collect(),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn max_dominates_slice(seed in 0u64..1000, d in 1usize..4) {
            let t = random([d, d + 1, d + 1, d], seed, 3.0);
            let (v, am) = t.max_over_pair(Pair::Second).unwrap();
            for i in 0..d {
                for j in 0..d + 1 {
                    let m = v.get(0, [i, j, 0, 0]);
                    let (c, e) = am.get(i, j);
                    prop_assert_eq!(t.get(0, [i, j, c, e]), m);
                    for k in 0..d + 1 {
                        for l in 0..d {
                            prop_assert!(m >= t.get(0, [i, j, k, l]));
                        }
                    }
                }
            }
        }

        #[test]
        fn softmax_positive_normalized_shift_invariant(
            seed in 0u64..1000,
            scale in 0.1f32..80.0,
            shift in -50.0f32..50.0,
        ) {
            let t = random([3, 2, 4, 3], seed, scale);
            for pair in [Pair::First, Pair::Second] {
                let s = t.softmax_over_pair(pair).unwrap();
                prop_assert!(s.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
                for sum in slice_sums(&s, pair) {
                    prop_assert!((sum - 1.0).abs() < 1e-6);
                }
            }
            // constant shift per slice (here: the whole tensor) leaves softmax
            // unchanged up to the rounding of the shifted inputs
            let tol = 1e-6 + 2.0 * (scale + shift.abs()) * f32::EPSILON;
            let mut shifted = t.clone();
            shifted.data_mut().iter_mut().for_each(|v| *v += shift);
            let a = t.softmax_over_pair(Pair::Second).unwrap();
            let b = shifted.softmax_over_pair(Pair::Second).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < tol);
            }
        }

        #[test]
        fn relu_idempotent(seed in 0u64..1000) {
            let t = random([2, 3, 2, 3], seed, 1.0);
            let r = t.relu();
            prop_assert_eq!(r.relu(), r);
        }
    }
}
