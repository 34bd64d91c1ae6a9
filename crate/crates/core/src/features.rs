//! Dense feature maps: construction, normalization, the built-in patch
//! descriptor, the synthetic pair generator and the `NCF1` file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{NcError, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"NCF1";

/// Descriptor grid over an `h x w` cell lattice, stored `[i][j][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    d: usize,
    image_h: usize,
    image_w: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        h: usize,
        w: usize,
        d: usize,
        image_h: usize,
        image_w: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(NcError::Shape(format!(
                "feature map dims must be positive, got {h}x{w}x{d}"
            )));
        }
        if image_h < h || image_w < w {
            return Err(NcError::Shape(format!(
                "image {image_h}x{image_w} is smaller than the {h}x{w} grid"
            )));
        }
        if data.len() != h * w * d {
            return Err(NcError::Shape(format!(
                "data length {} != {h}*{w}*{d}",
                data.len()
            )));
        }
        Ok(Self {
            h,
            w,
            d,
            image_h,
            image_w,
            data,
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn image_h(&self) -> usize {
        self.image_h
    }
    pub fn image_w(&self) -> usize {
        self.image_w
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn descriptor(&self, i: usize, j: usize) -> &[f32] {
        let o = (i * self.w + j) * self.d;
        &self.data[o..o + self.d]
    }

    /// Pixel size of one grid cell as `(rows, cols)`.
    pub fn cell_pitch(&self) -> (f64, f64) {
        (
            self.image_h as f64 / self.h as f64,
            self.image_w as f64 / self.w as f64,
        )
    }

    /// Pixel position `(x, y)` of a (possibly fractional) grid coordinate,
    /// using the cell-center convention: cell `(i, j)` sits at
    /// `((j + 0.5) * pitch_x, (i + 0.5) * pitch_y)`.
    pub fn cell_to_pixel(&self, i: f64, j: f64) -> (f64, f64) {
        let (py, px) = self.cell_pitch();
        ((j + 0.5) * px, (i + 0.5) * py)
    }

    /// Divides every descriptor by its L2 norm; zero descriptors pass through.
    pub fn normalize(&self) -> FeatureMap {
        let mut out = self.clone();
        for cell in out.data.chunks_exact_mut(self.d) {
            normalize_in_place(cell);
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.data.len() * 4);
        buf.extend_from_slice(&FEATURE_MAGIC);
        for v in [self.h, self.w, self.d, self.image_h, self.image_w] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(FEATURE_MAGIC)?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let d = r.u32()? as usize;
        let image_h = r.u32()? as usize;
        let image_w = r.u32()? as usize;
        let count = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some())
            .ok_or_else(|| NcError::DimensionOverflow(format!("{h}x{w}x{d} floats")))?;
        let data = r.f32s(count)?;
        r.finish()?;
        FeatureMap::new(h, w, d, image_h, image_w, data)
    }
}

pub fn write_features(f: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut bw = std::io::BufWriter::new(file);
    f.write_to(&mut bw)?;
    bw.flush()?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let bytes = std::fs::read(path)?;
    FeatureMap::from_bytes(&bytes)
}

pub(crate) fn normalize_in_place(v: &mut [f32]) {
    let ss: f32 = v.iter().map(|x| x * x).sum();
    if ss > 0.0 {
        let inv = 1.0 / ss.sqrt();
        v.iter_mut().for_each(|x| *x *= inv);
    }
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(NcError::Truncated {
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(NcError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(NcError::Shape(format!(
                "{} trailing bytes after payload",
                self.remaining()
            )));
        }
        Ok(())
    }
}

/// 8-bit grayscale image with intensities scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    #[inline]
    fn at(&self, y: isize, x: isize) -> f32 {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            0.0
        } else {
            self.pixels[y as usize * self.width + x as usize]
        }
    }
}

/// Reads a binary (P5) 8-bit PGM file.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes).map_err(|msg| NcError::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // single whitespace byte separates header from raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(format!("expected P5, found {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    let width = num(&fields[1])?;
    let height = num(&fields[2])?;
    let maxval = num(&fields[3])?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("only 8-bit PGM supported, maxval {maxval}"));
    }
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(format!("raster truncated: need {n} bytes"));
    }
    let pixels = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f32 / maxval as f32)
        .collect();
    Ok(GrayImage {
        height,
        width,
        pixels,
    })
}

/// Writes an 8-bit P5 PGM; intensities are clamped to `[0, 1]`.
pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, out)?;
    Ok(())
}

/// Mean-subtracted, L2-normalized `patch x patch` intensity windows sampled
/// on a grid of the given stride. A stand-in for a learned backbone.
pub fn patch_descriptor(image: &GrayImage, stride: usize, patch: usize) -> Result<FeatureMap> {
    if patch % 2 == 0 {
        return Err(NcError::InvalidArgument(format!(
            "patch size must be odd, got {patch}"
        )));
    }
    if stride == 0 {
        return Err(NcError::InvalidArgument("stride must be positive".into()));
    }
    if image.height < patch || image.width < patch || image.height < stride || image.width < stride
    {
        return Err(NcError::InvalidArgument(format!(
            "image {}x{} too small for patch {patch} / stride {stride}",
            image.height, image.width
        )));
    }
    let h = image.height / stride;
    let w = image.width / stride;
    let d = patch * patch;
    let r = (patch / 2) as isize;
    let mut data = Vec::with_capacity(h * w * d);
    let mut window = vec![0.0f32; d];
    for i in 0..h {
        let cy = (i * stride + stride / 2) as isize;
        for j in 0..w {
            let cx = (j * stride + stride / 2) as isize;
            let mut n = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    window[n] = image.at(cy + dy, cx + dx);
                    n += 1;
                }
            }
            let mean = window.iter().sum::<f32>() / d as f32;
            window.iter_mut().for_each(|v| *v -= mean);
            normalize_in_place(&mut window);
            data.extend_from_slice(&window);
        }
    }
    FeatureMap::new(h, w, d, image.height, image.width, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn sign(self) -> f32 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    pub fn from_sign(s: i32) -> Result<Self> {
        match s {
            1 => Ok(Label::Positive),
            -1 => Ok(Label::Negative),
            _ => Err(NcError::InvalidArgument(format!(
                "label must be +1 or -1, got {s}"
            ))),
        }
    }
}

/// Correspondence `((i, j), (k, l))` between a cell of A and a cell of B.
pub type CellPair = ([usize; 2], [usize; 2]);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub fa: FeatureMap,
    pub fb: FeatureMap,
    pub label: Label,
    pub ground_truth: Option<Vec<CellPair>>,
}

impl TrainSample {
    pub fn new(fa: FeatureMap, fb: FeatureMap, label: Label) -> Result<Self> {
        if fa.d() != fb.d() {
            return Err(NcError::DescriptorMismatch {
                a: fa.d(),
                b: fb.d(),
            });
        }
        Ok(Self {
            fa,
            fb,
            label,
            ground_truth: None,
        })
    }

    /// The same tensors with the opposite label.
    pub fn relabeled(&self, label: Label) -> Self {
        Self {
            label,
            ..self.clone()
        }
    }
}

/// Parameters of the synthetic pair generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// Translation `(dy, dx)` in cells applied from A to B.
    pub shift: (isize, isize),
    pub noise_sigma: f32,
    pub repetition_period: Option<usize>,
    /// Pixels per cell used to fill in the image dimensions.
    pub cell_px: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, h: usize, w: usize, d: usize) -> Self {
        Self {
            seed,
            h,
            w,
            d,
            shift: (0, 0),
            noise_sigma: 0.0,
            repetition_period: None,
            cell_px: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.d == 0 || self.cell_px == 0 {
            return Err(NcError::InvalidArgument(
                "synthetic dims must be positive".into(),
            ));
        }
        let (dy, dx) = self.shift;
        if dy.unsigned_abs() >= self.h || dx.unsigned_abs() >= self.w {
            return Err(NcError::InvalidArgument(format!(
                "shift ({dy}, {dx}) out of range for a {}x{} grid",
                self.h, self.w
            )));
        }
        if self.repetition_period == Some(0) {
            return Err(NcError::InvalidArgument(
                "repetition period must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(NcError::InvalidArgument("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Weight of the per-cell component mixed into tiled descriptors. Each
/// tile repeat is then only weakly distinguishable on its own, and a match
/// is resolved by the context of its neighbours.
pub const UNIQUE_WEIGHT: f32 = 0.5;

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let ss: f32 = v.iter().map(|x| x * x).sum();
        if ss > 1e-12 {
            normalize_in_place(&mut v);
            return v;
        }
        v.clear();
    }
}

/// Scene of `rows x cols` unit descriptors, optionally tiled.
fn synth_scene(rng: &mut ChaCha8Rng, rows: usize, cols: usize, cfg: &SynthConfig) -> Vec<f32> {
    let d = cfg.d;
    let tile: Option<(usize, Vec<f32>)> = cfg.repetition_period.map(|p| {
        let t: Vec<f32> = (0..p * p).flat_map(|_| random_unit(rng, d)).collect();
        (p, t)
    });
    let mut scene = Vec::with_capacity(rows * cols * d);
    for y in 0..rows {
        for x in 0..cols {
            let mut v = random_unit(rng, d);
            if let Some((p, t)) = &tile {
                let o = ((y % p) * p + x % p) * d;
                for (c, u) in v.iter_mut().enumerate() {
                    *u = t[o + c] + UNIQUE_WEIGHT * *u;
                }
                normalize_in_place(&mut v);
            }
            scene.extend_from_slice(&v);
        }
    }
    scene
}

fn window(scene: &[f32], scene_cols: usize, oy: usize, ox: usize, cfg: &SynthConfig) -> Vec<f32> {
    let d = cfg.d;
    let mut out = Vec::with_capacity(cfg.h * cfg.w * d);
    for i in 0..cfg.h {
        let row = (i + oy) * scene_cols;
        for j in 0..cfg.w {
            let o = (row + j + ox) * d;
            out.extend_from_slice(&scene[o..o + d]);
        }
    }
    out
}

fn add_noise(rng: &mut ChaCha8Rng, data: &mut [f32], d: usize, sigma: f32) {
    if sigma == 0.0 {
        return;
    }
    for cell in data.chunks_exact_mut(d) {
        for v in cell.iter_mut() {
            let n: f32 = rng.sample(StandardNormal);
            *v += sigma * n;
        }
        normalize_in_place(cell);
    }
}

fn to_map(cfg: &SynthConfig, data: Vec<f32>) -> Result<FeatureMap> {
    FeatureMap::new(
        cfg.h,
        cfg.w,
        cfg.d,
        cfg.h * cfg.cell_px,
        cfg.w * cfg.cell_px,
        data,
    )
}

/// Positive pair: B is A translated by `shift`, with cells that enter the
/// frame drawn from the same scene process, and independent noise on both.
pub fn synth_pair(cfg: &SynthConfig) -> Result<TrainSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dy, dx) = cfg.shift;
    let rows = cfg.h + dy.unsigned_abs();
    let cols = cfg.w + dx.unsigned_abs();
    let scene = synth_scene(&mut rng, rows, cols, cfg);

    // fb[k, l] = fa[k - dy, l - dx]
    let (ay, by) = if dy >= 0 {
        (dy as usize, 0)
    } else {
        (0, (-dy) as usize)
    };
    let (ax, bx) = if dx >= 0 {
        (dx as usize, 0)
    } else {
        (0, (-dx) as usize)
    };
    let mut fa = window(&scene, cols, ay, ax, cfg);
    let mut fb = window(&scene, cols, by, bx, cfg);
    add_noise(&mut rng, &mut fa, cfg.d, cfg.noise_sigma);
    add_noise(&mut rng, &mut fb, cfg.d, cfg.noise_sigma);

    let mut gt = Vec::new();
    for i in 0..cfg.h {
        for j in 0..cfg.w {
            let k = i as isize + dy;
            let l = j as isize + dx;
            if k >= 0 && l >= 0 && (k as usize) < cfg.h && (l as usize) < cfg.w {
                gt.push(([i, j], [k as usize, l as usize]));
            }
        }
    }
    Ok(TrainSample {
        fa: to_map(cfg, fa)?,
        fb: to_map(cfg, fb)?,
        label: Label::Positive,
        ground_truth: Some(gt),
    })
}

/// Negative pair: A and B drawn from independent scenes (`cfg.seed` and
/// `seed_b`), same generator settings, no ground truth.
pub fn synth_negative(cfg: &SynthConfig, seed_b: u64) -> Result<TrainSample> {
    cfg.validate()?;
    let single = |seed: u64| -> Result<FeatureMap> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = synth_scene(&mut rng, cfg.h, cfg.w, cfg);
        add_noise(&mut rng, &mut data, cfg.d, cfg.noise_sigma);
        to_map(cfg, data)
    };
    Ok(TrainSample {
        fa: single(cfg.seed)?,
        fb: single(seed_b)?,
        label: Label::Negative,
        ground_truth: None,
    })
}
