//! Synthetic 20×20 glyphs.
//!
//! Each class is a random pattern of smooth blobs and one stroke, about half
//! ink and half background. Training images are distorted copies produced by
//! thickening or thinning, shifting, blurring and additive noise. Every image draws from its own ChaCha stream keyed by
//! `(seed, index)`, so any index range can be generated independently and a
//! held-out set is simply a later range.
//!
//! File layout (little-endian): `GLY1`, then `n_classes`, `n_patterns`,
//! `width`, `height` as `u32`, then per pattern a `u32` label followed by
//! `width · height` `f32` pixels.

use std::io::{ErrorKind, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::Mat32;
use crate::nn::Batch;

pub const WIDTH: usize = 20;
pub const HEIGHT: usize = 20;
pub const PIXELS: usize = WIDTH * HEIGHT;
pub const MAGIC: &[u8; 4] = b"GLY1";

/// Stream offset separating prototype draws from image draws.
const PROTOTYPE_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphImage {
    /// Row-major grey levels in `[0, 1]`.
    pub pixels: [f32; PIXELS],
    pub label: u32,
}

impl GlyphImage {
    pub fn blank(label: u32) -> Self {
        GlyphImage {
            pixels: [0.0; PIXELS],
            label,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * WIDTH + col]
    }

    pub fn l2_distance(&self, other: &GlyphImage) -> f32 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt()
    }

    pub fn in_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    fn map_neighbourhood(&self, f: impl Fn(&mut dyn Iterator<Item = f32>) -> f32, cross: bool) -> GlyphImage {
        let mut out = GlyphImage::blank(self.label);
        for r in 0..HEIGHT {
            for c in 0..WIDTH {
                let mut it = (-1i32..=1)
                    .flat_map(|dr| (-1i32..=1).map(move |dc| (dr, dc)))
                    .filter(|&(dr, dc)| !cross || dr == 0 || dc == 0)
                    .filter_map(|(dr, dc)| {
                        let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                        ((0..HEIGHT as i32).contains(&rr) && (0..WIDTH as i32).contains(&cc))
                            .then(|| self.at(rr as usize, cc as usize))
                    });
                out.pixels[r * WIDTH + c] = f(&mut it);
            }
        }
        out
    }
}

/// Grey-scale dilation with a 3×3 cross.
pub fn thicken(img: &GlyphImage) -> GlyphImage {
    img.map_neighbourhood(|it| it.fold(0.0, f32::max), true)
}

/// Grey-scale erosion with a 3×3 cross; pixels outside the image are ignored.
pub fn thin(img: &GlyphImage) -> GlyphImage {
    img.map_neighbourhood(|it| it.fold(1.0, f32::min), true)
}

/// Integer translation with zero fill.
pub fn shift(img: &GlyphImage, dx: i32, dy: i32) -> GlyphImage {
    let mut out = GlyphImage::blank(img.label);
    for r in 0..HEIGHT as i32 {
        for c in 0..WIDTH as i32 {
            let (sr, sc) = (r - dy, c - dx);
            if (0..HEIGHT as i32).contains(&sr) && (0..WIDTH as i32).contains(&sc) {
                out.pixels[(r as usize) * WIDTH + c as usize] = img.at(sr as usize, sc as usize);
            }
        }
    }
    out
}

/// 3×3 box filter with edge pixels repeated outward.
pub fn blur(img: &GlyphImage) -> GlyphImage {
    let mut out = GlyphImage::blank(img.label);
    for r in 0..HEIGHT {
        for c in 0..WIDTH {
            let mut s = 0.0f32;
            for dr in -1i32..=1 {
                for dc in -1i32..=1 {
                    let rr = (r as i32 + dr).clamp(0, HEIGHT as i32 - 1) as usize;
                    let cc = (c as i32 + dc).clamp(0, WIDTH as i32 - 1) as usize;
                    s += img.at(rr, cc);
                }
            }
            out.pixels[r * WIDTH + c] = (s / 9.0).clamp(0.0, 1.0);
        }
    }
    out
}

/// Adds uniform noise in `[−amplitude, amplitude]` and clamps to `[0, 1]`.
pub fn add_noise<R: Rng>(img: &GlyphImage, amplitude: f32, rng: &mut R) -> GlyphImage {
    let mut out = img.clone();
    if amplitude > 0.0 {
        for p in out.pixels.iter_mut() {
            *p = (*p + rng.gen_range(-amplitude..=amplitude)).clamp(0.0, 1.0);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Thicken,
    Thin,
    Shift,
    Blur,
    Noise,
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "thicken" => TransformKind::Thicken,
            "thin" => TransformKind::Thin,
            "shift" => TransformKind::Shift,
            "blur" => TransformKind::Blur,
            "noise" => TransformKind::Noise,
            _ => return Err(Error::Invalid(format!("unknown transform '{s}'"))),
        })
    }
}

pub const MAX_SHIFT: i32 = 2;
pub const MAX_NOISE: f32 = 0.2;

/// One transformation with its random parameters drawn from `rng`.
pub fn transform<R: Rng>(img: &GlyphImage, kind: TransformKind, rng: &mut R) -> GlyphImage {
    match kind {
        TransformKind::Thicken => thicken(img),
        TransformKind::Thin => thin(img),
        TransformKind::Shift => {
            let dx = rng.gen_range(-MAX_SHIFT..=MAX_SHIFT);
            let dy = rng.gen_range(-MAX_SHIFT..=MAX_SHIFT);
            shift(img, dx, dy)
        }
        TransformKind::Blur => blur(img),
        TransformKind::Noise => add_noise(img, MAX_NOISE, rng),
    }
}

/// Probability of each distortion; thickening and thinning exclude each
/// other.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformMix {
    pub thicken: f64,
    pub thin: f64,
    pub shift: f64,
    pub blur: f64,
    pub noise: f64,
    pub noise_amplitude: f32,
}

impl Default for TransformMix {
    fn default() -> Self {
        TransformMix {
            thicken: 0.3,
            thin: 0.2,
            shift: 0.6,
            blur: 0.4,
            noise: 0.8,
            noise_amplitude: MAX_NOISE,
        }
    }
}

impl TransformMix {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.thicken, self.thin, self.shift, self.blur, self.noise];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || self.thicken + self.thin > 1.0 {
            return Err(Error::Invalid("transform probabilities must lie in [0, 1]".into()));
        }
        if !(0.0..=MAX_NOISE).contains(&self.noise_amplitude) {
            return Err(Error::Invalid(format!("noise amplitude must lie in [0, {MAX_NOISE}]")));
        }
        Ok(())
    }

    /// Applies the mix in a fixed order: morphology, shift, blur, noise.
    pub fn apply<R: Rng>(&self, img: &GlyphImage, rng: &mut R) -> GlyphImage {
        let u: f64 = rng.gen();
        let mut out = if u < self.thicken {
            thicken(img)
        } else if u < self.thicken + self.thin {
            thin(img)
        } else {
            img.clone()
        };
        if rng.gen_bool(self.shift) {
            out = transform(&out, TransformKind::Shift, rng);
        }
        if rng.gen_bool(self.blur) {
            out = blur(&out);
        }
        if rng.gen_bool(self.noise) {
            out = add_noise(&out, self.noise_amplitude, rng);
        }
        out
    }
}

pub const DEFAULT_MARGIN: f32 = 5.0;
const MAX_ATTEMPTS: usize = 200;

fn draw_segment(img: &mut GlyphImage, (r0, c0): (f32, f32), (r1, c1): (f32, f32)) {
    let steps = ((r1 - r0).abs().max((c1 - c0).abs()) * 4.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f32 / steps as f32;
        let r = (r0 + t * (r1 - r0)).round() as usize;
        let c = (c0 + t * (c1 - c0)).round() as usize;
        if r < HEIGHT && c < WIDTH {
            img.pixels[r * WIDTH + c] = 1.0;
        }
    }
}

fn random_prototype<R: Rng>(label: u32, rng: &mut R) -> GlyphImage {
    // A few signed Gaussian blobs plus a stroke, squashed into [0, 1].
    let mut field = [0.0f32; PIXELS];
    let blobs = rng.gen_range(4..=7);
    for _ in 0..blobs {
        let (cr, cc) = (rng.gen_range(2.0..18.0f32), rng.gen_range(2.0..18.0f32));
        let width = rng.gen_range(1.5..4.0f32);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        for r in 0..HEIGHT {
            for c in 0..WIDTH {
                let d2 = (r as f32 - cr).powi(2) + (c as f32 - cc).powi(2);
                field[r * WIDTH + c] += sign * (-d2 / (2.0 * width * width)).exp();
            }
        }
    }
    let mut stroke = GlyphImage::blank(label);
    let a = (rng.gen_range(3.0..16.0), rng.gen_range(3.0..16.0));
    let b = (rng.gen_range(3.0..16.0), rng.gen_range(3.0..16.0));
    draw_segment(&mut stroke, a, b);
    let mut out = GlyphImage::blank(label);
    for ((o, f), s) in out.pixels.iter_mut().zip(&field).zip(&stroke.pixels) {
        *o = (1.0 / (1.0 + (-4.0 * (f + s)).exp())).clamp(0.0, 1.0);
    }
    out
}

/// Class prototypes at pairwise L2 distance of at least `margin`.
pub fn generate_prototypes(n_classes: usize, seed: u64, margin: f32) -> Result<Vec<GlyphImage>> {
    if n_classes < 2 {
        return Err(Error::Invalid("at least two classes are required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROTOTYPE_STREAM);
    let mut out: Vec<GlyphImage> = Vec::with_capacity(n_classes);
    for label in 0..n_classes as u32 {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let cand = random_prototype(label, &mut rng);
            if out.iter().all(|p| p.l2_distance(&cand) >= margin) {
                out.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Invalid(format!(
                "could not place class {label} at distance {margin} from the others"
            )));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetCfg {
    pub n_classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub margin: f32,
    /// Index of the first generated image; a later range gives a disjoint
    /// sample from the same classes.
    pub first_index: u64,
    pub mix: TransformMix,
}

impl Default for DatasetCfg {
    fn default() -> Self {
        DatasetCfg {
            n_classes: 50,
            per_class: 400,
            seed: 1,
            margin: DEFAULT_MARGIN,
            first_index: 0,
            mix: TransformMix::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub images: Vec<GlyphImage>,
}

/// Generates `n_classes · per_class` images; image `i` has label
/// `i mod n_classes`.
pub fn build_dataset(cfg: &DatasetCfg) -> Result<Dataset> {
    cfg.mix.validate()?;
    let n = cfg
        .n_classes
        .checked_mul(cfg.per_class)
        .ok_or_else(|| Error::Invalid("dataset size overflows".into()))?;
    if cfg.per_class == 0 {
        return Err(Error::Invalid("per_class must be at least 1".into()));
    }
    let protos = generate_prototypes(cfg.n_classes, cfg.seed, cfg.margin)?;
    let images = (0..n as u64)
        .map(|k| {
            let idx = cfg.first_index + k;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(idx);
            cfg.mix.apply(&protos[(idx % cfg.n_classes as u64) as usize], &mut rng)
        })
        .collect();
    Ok(Dataset {
        n_classes: cfg.n_classes,
        images,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label as usize).collect()
    }

    /// Inputs mapped to `[−1, 1]`, targets ±1 one-hot.
    pub fn to_batch(&self) -> Result<Batch> {
        let x = Mat32::from_fn(self.len(), PIXELS, |i, j| 2.0 * self.images[i].pixels[j] - 1.0);
        let t = Mat32::from_fn(self.len(), self.n_classes, |i, j| {
            if self.images[i].label as usize == j {
                1.0
            } else {
                -1.0
            }
        });
        Batch::new(x, t)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        check_header(self.n_classes, self.len())?;
        let n_classes = u32::try_from(self.n_classes).map_err(|_| Error::Invalid("too many classes".into()))?;
        let n = u32::try_from(self.len()).map_err(|_| Error::Invalid("too many patterns".into()))?;
        w.write_all(MAGIC)?;
        for v in [n_classes, n, WIDTH as u32, HEIGHT as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 + 4 * PIXELS);
        for img in &self.images {
            buf.clear();
            buf.extend_from_slice(&img.label.to_le_bytes());
            for p in &img.pixels {
                buf.extend_from_slice(&p.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a glyph dataset (bad magic)".into()));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let (n_classes, n, w, h) = (word()? as usize, word()? as usize, word()? as usize, word()? as usize);
        if (w, h) != (WIDTH, HEIGHT) {
            return Err(Error::Format(format!("images are {w}×{h}, expected {WIDTH}×{HEIGHT}")));
        }
        check_header(n_classes, n).map_err(|e| Error::Format(e.to_string()))?;
        let mut images = Vec::with_capacity(n.min(1 << 20));
        let mut buf = vec![0u8; 4 + 4 * PIXELS];
        for i in 0..n {
            read_exact(&mut r, &mut buf)?;
            let label = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes"));
            if label as usize >= n_classes {
                return Err(Error::Format(format!("pattern {i} has label {label} of {n_classes} classes")));
            }
            let mut img = GlyphImage::blank(label);
            for (p, b) in img.pixels.iter_mut().zip(buf[4..].chunks_exact(4)) {
                *p = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
            images.push(img);
        }
        Ok(Dataset { n_classes, images })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn open(path: &Path) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        Dataset::read(std::io::BufReader::new(f))
    }
}

/// Reads a dataset file into a batch and its labels.
pub fn load_dataset(path: &Path) -> Result<(Batch, Vec<usize>)> {
    let ds = Dataset::open(path)?;
    Ok((ds.to_batch()?, ds.labels()))
}

fn check_header(n_classes: usize, n: usize) -> Result<()> {
    if n_classes < 2 || n < n_classes {
        return Err(Error::Invalid(format!(
            "need n_patterns ≥ n_classes ≥ 2, got {n} patterns of {n_classes} classes"
        )));
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Format("file is truncated".into())
        } else {
            Error::Io(e)
        }
    })
}
