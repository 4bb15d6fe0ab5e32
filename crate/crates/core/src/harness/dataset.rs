//! Displaced-glyph classification data.
//!
//! Each image shows one class glyph at a random position over textured noise
//! and a few diagonal distractor strokes. Pixels are stored as bytes; every
//! sample has its own RNG stream, so any sample can be regenerated alone.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::param_rng;
use crate::tensor::Tensor;

/// Distinct glyph shapes; one per class.
pub const GLYPHS: [&str; 8] = ["bar", "cross", "blob", "ring", "corner", "saltire", "tee", "frame"];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub samples: usize,
    pub size: usize,
    /// Standard deviation of per-pixel noise, in intensity units of [0, 1].
    pub noise: f64,
    /// Amplitude of the background gratings.
    pub texture: f64,
    /// Extra strokes per image that do not depend on the label.
    pub distractors: usize,
    /// Opacity of glyph and distractor strokes.
    pub contrast: f64,
    /// Fraction of each class held out for validation.
    pub val_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples: 4000,
            size: 64,
            noise: 0.1,
            texture: 0.05,
            distractors: 2,
            contrast: 1.0,
            val_fraction: 0.1,
        }
    }
}

impl DatasetSpec {
    pub fn entries(&self) -> std::collections::BTreeMap<&'static str, String> {
        std::collections::BTreeMap::from([
            ("classes", self.classes.to_string()),
            ("samples", self.samples.to_string()),
            ("size", self.size.to_string()),
            ("noise", format!("{:?}", self.noise)),
            ("texture", format!("{:?}", self.texture)),
            ("distractors", self.distractors.to_string()),
            ("contrast", format!("{:?}", self.contrast)),
            ("val_fraction", format!("{:?}", self.val_fraction)),
        ])
    }

    /// Applies one `key=value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Format(format!("invalid value for {key}: {value:?}"));
        let uint = || value.parse::<usize>().map_err(|_| bad());
        let float = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "classes" => self.classes = uint()?,
            "samples" => self.samples = uint()?,
            "size" => self.size = uint()?,
            "noise" => self.noise = float()?,
            "texture" => self.texture = float()?,
            "distractors" => self.distractors = uint()?,
            "contrast" => self.contrast = float()?,
            "val_fraction" => self.val_fraction = float()?,
            _ => return Err(Error::Format(format!("unknown data key {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    /// `[N, size, size, 3]` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    /// Pixels covered by the label glyph, per sample.
    pub glyph_pixels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Whether offset `(dx, dy)` from the glyph centre is inside glyph `kind`
/// of half-extent `r` and stroke width `t`.
fn inside(kind: usize, dx: f64, dy: f64, r: f64, t: f64) -> bool {
    let h = t / 2.0;
    let (ax, ay) = (dx.abs(), dy.abs());
    let box_ = ax <= r && ay <= r;
    match kind {
        0 => ax <= r && ay <= h,
        1 => (ax <= r && ay <= h) || (ay <= r && ax <= h),
        2 => dx * dx + dy * dy <= (0.75 * r).powi(2),
        3 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= r - t
        }
        4 => box_ && (dx <= -r + t || dy >= r - t),
        5 => box_ && (ax - ay).abs() <= h * std::f64::consts::SQRT_2,
        6 => box_ && (dy <= -r + t || ax <= h),
        7 => box_ && (ax >= r - t || ay >= r - t),
        // single diagonal stroke; never a class shape
        SLASH => box_ && (dx + dy).abs() <= h * std::f64::consts::SQRT_2,
        _ => unreachable!("glyph kind {kind}"),
    }
}

const SLASH: usize = 8;

struct Canvas {
    size: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    /// Blends a glyph in `colour` and returns the number of covered pixels.
    fn stamp(&mut self, kind: usize, cx: f64, cy: f64, r: f64, t: f64, colour: [f64; 3], alpha: f64) -> usize {
        let mut covered = 0;
        let lo = |c: f64| (c - r - 1.0).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + r + 1.0).ceil() as usize).min(self.size - 1);
        for y in lo(cy)..=hi(cy) {
            for x in lo(cx)..=hi(cx) {
                if inside(kind, x as f64 - cx, y as f64 - cy, r, t) {
                    covered += 1;
                    let p = &mut self.rgb[(y * self.size + x) * 3..][..3];
                    for (v, c) in p.iter_mut().zip(colour) {
                        *v = (1.0 - alpha) * *v + alpha * c;
                    }
                }
            }
        }
        covered
    }
}

fn render<R: Rng>(spec: &DatasetSpec, label: usize, rng: &mut R) -> (Vec<u8>, usize) {
    let s = spec.size;
    let mut canvas = Canvas { size: s, rgb: vec![0.5; s * s * 3] };
    // background: a few oriented gratings with per-channel weights
    for _ in 0..3 {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let wavelength = rng.random_range(6.0..24.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let weights: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0) * spec.texture / 3.0);
        let (kx, ky) = (theta.cos() * std::f64::consts::TAU / wavelength, theta.sin() * std::f64::consts::TAU / wavelength);
        for y in 0..s {
            for x in 0..s {
                let v = (kx * x as f64 + ky * y as f64 + phase).sin();
                for (c, w) in weights.iter().enumerate() {
                    canvas.rgb[(y * s + x) * 3 + c] += w * v;
                }
            }
        }
    }
    let stroke = |rng: &mut R, kind: usize, canvas: &mut Canvas| {
        let r = rng.random_range(6.0..10.0);
        let t = if rng.random_bool(0.5) { 2.0 } else { 3.0 };
        let cx = rng.random_range(r + 1.0..s as f64 - r - 2.0);
        let cy = rng.random_range(r + 1.0..s as f64 - r - 2.0);
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        canvas.stamp(kind, cx, cy, r, t, colour, spec.contrast)
    };
    // distractors share colour, size and stroke width with the glyph
    for _ in 0..spec.distractors {
        stroke(rng, SLASH, &mut canvas);
    }
    let covered = stroke(rng, label, &mut canvas);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let bytes = canvas
        .rgb
        .iter()
        .map(|&v| ((v + noise.sample(rng)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    (bytes, covered)
}

/// Generates `spec.samples` images with balanced labels (`i mod K`) and a
/// per-class validation split.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    if spec.classes < 2 || spec.classes > GLYPHS.len() {
        return Err(Error::Domain(format!("class count must lie in 2..={}, got {}", GLYPHS.len(), spec.classes)));
    }
    if spec.size < 24 {
        return Err(Error::Domain(format!("image size {} too small for the glyphs", spec.size)));
    }
    if !(0.0..1.0).contains(&spec.val_fraction) || !(0.0..=1.0).contains(&spec.contrast) {
        return Err(Error::Domain("val_fraction must lie in [0, 1) and contrast in [0, 1]".into()));
    }
    let n = spec.samples;
    let per = spec.size * spec.size * 3;
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    let mut glyph_pixels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.classes;
        let (bytes, covered) = render(spec, label, &mut param_rng(seed, &format!("sample/{i}")));
        pixels.extend_from_slice(&bytes);
        labels.push(label);
        glyph_pixels.push(covered);
    }
    let (mut train, mut val) = (vec![], vec![]);
    for k in 0..spec.classes {
        let members: Vec<usize> = (k..n).step_by(spec.classes).collect();
        let n_val = (members.len() as f64 * spec.val_fraction).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        seed,
        pixels,
        labels,
        glyph_pixels,
        train,
        val,
    })
}

/// Per-channel normalization applied when batching.
const MEAN: f64 = 0.5;
const STD: f64 = 0.25;

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let per = self.spec.size * self.spec.size * 3;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Normalized `[B, size, size, 3]` images and labels for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.spec.size;
        let mut data = Vec::with_capacity(indices.len() * s * s * 3);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Domain(format!("sample {i} out of range")));
            }
            data.extend(self.image_bytes(i).iter().map(|&b| (b as f64 / 255.0 - MEAN) / STD));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(&[indices.len(), s, s, 3], data)?, labels))
    }

    pub fn glyph_fraction(&self, i: usize) -> f64 {
        self.glyph_pixels[i] as f64 / (self.spec.size * self.spec.size) as f64
    }
}
