//! Synthetic shape/color image–caption corpus, PPM I/O and loaders.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TokenBatch;
use crate::error::{HarmonyError, Result};
use crate::image::Image;
use crate::rng::{purpose, stream};
use crate::text::Tokenizer;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const NUM_CLASSES: usize = SHAPES.len() * COLORS.len();
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

const SHAPE_SYNONYMS: [[&str; 2]; 4] = [
    ["circle", "disc"],
    ["square", "box"],
    ["triangle", "wedge"],
    ["cross", "plus"],
];
const COLOR_SYNONYMS: [[&str; 2]; 4] = [
    ["red", "crimson"],
    ["green", "emerald"],
    ["blue", "azure"],
    ["yellow", "golden"],
];
const COLOR_RGB: [[u8; 3]; 4] = [[220, 40, 40], [40, 190, 60], [50, 80, 230], [235, 215, 40]];

/// Words of the caption grammar, in vocabulary order.
pub const CAPTION_WORDS: &[&str] = &[
    "a",
    "an",
    "photo",
    "image",
    "picture",
    "of",
    "on",
    "the",
    "in",
    "there",
    "is",
    "near",
    "with",
    "background",
    "red",
    "crimson",
    "green",
    "emerald",
    "blue",
    "azure",
    "yellow",
    "golden",
    "circle",
    "disc",
    "square",
    "box",
    "triangle",
    "wedge",
    "cross",
    "plus",
    "small",
    "large",
    "tiny",
    "big",
    "top",
    "bottom",
    "left",
    "right",
    "center",
    "dark",
    "light",
    "plain",
    "noisy",
    "gray",
];

pub fn class_id(shape: usize, color: usize) -> usize {
    shape * COLORS.len() + color
}

pub fn class_parts(class: usize) -> (usize, usize) {
    (class / COLORS.len(), class % COLORS.len())
}

pub fn class_name(class: usize) -> String {
    let (s, c) = class_parts(class);
    format!("{} {}", COLORS[c], SHAPES[s])
}

pub fn caption_tokenizer(context_length: usize) -> Result<Tokenizer> {
    Tokenizer::new(CAPTION_WORDS.iter().copied(), context_length)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Standard deviation of per-pixel background noise, in `[0, 1]` units.
    pub noise_level: f64,
    /// Fraction of captions that describe a different class.
    pub mismatch_fraction: f64,
    /// Assign classes round-robin so every class appears equally often.
    pub balanced: bool,
    pub context_length: usize,
    /// Shape half-extent range as fractions of the image side.
    pub radius_range: (f64, f64),
    /// Maximum offset of the shape center from the image center, as a
    /// fraction of the image side.
    pub position_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            seed: 0,
            image_size: 32,
            noise_level: 0.05,
            mismatch_fraction: 0.0,
            balanced: true,
            context_length: 32,
            radius_range: (0.22, 0.32),
            position_jitter: 0.08,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(HarmonyError::Config("n_samples must be >= 1".into()));
        }
        if self.image_size < 8 {
            return Err(HarmonyError::Config("image_size must be >= 8".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) || !(0.0..=1.0).contains(&self.mismatch_fraction) {
            return Err(HarmonyError::Config(
                "noise_level and mismatch_fraction must lie in [0, 1]".into(),
            ));
        }
        let (lo, hi) = self.radius_range;
        if !(0.05 <= lo && lo <= hi && hi <= 0.45) {
            return Err(HarmonyError::Config(
                "radius_range must satisfy 0.05 <= lo <= hi <= 0.45".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.position_jitter) {
            return Err(HarmonyError::Config("position_jitter must lie in [0, 0.5]".into()));
        }
        if self.context_length < 12 {
            return Err(HarmonyError::Config(
                "context_length must be >= 12 for the caption grammar".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to render one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: usize,
    pub color: usize,
    /// Center in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Half-extent in pixels.
    pub radius: f64,
    /// Background gray level in `[0, 1]`.
    pub background: f64,
    pub noise_level: f64,
}

impl SceneSpec {
    pub fn class_id(&self) -> usize {
        class_id(self.shape, self.color)
    }

    /// Draws size, position and background; the center is jittered around
    /// the image center and clamped so the shape stays on the canvas.
    pub fn sample(class: usize, cfg: &DataConfig, rng: &mut impl Rng) -> Self {
        let (shape, color) = class_parts(class);
        let s = cfg.image_size as f64;
        let (lo, hi) = cfg.radius_range;
        let radius = rng.random_range(lo * s..=hi * s);
        let j = cfg.position_jitter * s;
        let mut center = || {
            let c = s / 2.0 + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
            c.clamp(radius, s - radius)
        };
        let (cx, cy) = (center(), center());
        let background = rng.random_range(0.1..=0.6);
        let noise_level = cfg.noise_level;
        Self {
            shape,
            color,
            cx,
            cy,
            radius,
            background,
            noise_level,
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.radius;
        match self.shape {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            2 => {
                // apex up, base at cy + r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            _ => {
                let arm = 0.3 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }

    /// 8-bit RGB pixels, row-major interleaved.
    pub fn render(&self, size: usize, rng: &mut impl Rng) -> Vec<u8> {
        let mut px = Vec::with_capacity(size * size * 3);
        let fg = COLOR_RGB[self.color];
        for y in 0..size {
            for x in 0..size {
                let inside = self.inside(x as f64 + 0.5, y as f64 + 0.5);
                for &fc in &fg {
                    let noise = if self.noise_level > 0.0 {
                        rng.random_range(-1.0..=1.0) * self.noise_level * 3f64.sqrt()
                    } else {
                        0.0
                    };
                    let v = if inside {
                        fc as f64 / 255.0
                    } else {
                        self.background + noise
                    };
                    px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        px
    }

    fn size_word(&self, size: usize) -> &'static str {
        let rel = self.radius / size as f64;
        match rel {
            r if r < 0.245 => "tiny",
            r if r < 0.27 => "small",
            r if r < 0.295 => "large",
            _ => "big",
        }
    }

    fn position_word(&self, size: usize) -> &'static str {
        let (x, y) = (self.cx / size as f64 - 0.5, self.cy / size as f64 - 0.5);
        if x.abs() < 0.04 && y.abs() < 0.04 {
            "center"
        } else if x.abs() > y.abs() {
            if x < 0.0 {
                "left"
            } else {
                "right"
            }
        } else if y < 0.0 {
            "top"
        } else {
            "bottom"
        }
    }

    fn background_word(&self) -> &'static str {
        if self.noise_level > 0.1 {
            "noisy"
        } else if self.background < 0.25 {
            "dark"
        } else if self.background > 0.45 {
            "light"
        } else {
            "gray"
        }
    }
}

/// Caption for `spec`, naming `class` (which differs from the rendered
/// class for mismatched records).
pub fn caption_for(spec: &SceneSpec, class: usize, size: usize, rng: &mut impl Rng) -> String {
    let (s, c) = class_parts(class);
    let color = COLOR_SYNONYMS[c][usize::from(rng.random_bool(0.3))];
    let shape = SHAPE_SYNONYMS[s][usize::from(rng.random_bool(0.3))];
    let sz = spec.size_word(size);
    let pos = spec.position_word(size);
    let bg = spec.background_word();
    match rng.random_range(0..7) {
        0 => format!("a photo of a {color} {shape}"),
        1 => format!("a {sz} {color} {shape} on a {bg} background"),
        2 => format!("a {color} {shape} in the {pos}"),
        3 => format!("there is a {sz} {color} {shape} near the {pos}"),
        4 => format!("a picture of a {color} {shape} with a {bg} background"),
        5 => format!("an image of a {sz} {color} {shape}"),
        _ => format!("a {color} {shape} on the {pos} of a {bg} image"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFormat {
    pub kind: String,
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub image_path: String,
    pub caption: String,
    pub class_id: usize,
    /// Whether the caption names a different class than the image shows.
    pub mismatched: bool,
}

/// First line of the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    version: u32,
    image_format: ImageFormat,
    seed: u64,
    context_length: usize,
    vocabulary: Vec<String>,
    records: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_format: ImageFormat,
    pub seed: u64,
    pub context_length: usize,
    pub vocabulary: Vec<String>,
    pub records: Vec<Record>,
}

/// One rendered sample kept in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spec: SceneSpec,
    pub pixels: Vec<u8>,
    pub caption: String,
    pub class_id: usize,
    pub mismatched: bool,
}

impl Sample {
    pub fn image(&self, size: usize) -> Image {
        pixels_to_image(&self.pixels, size, size)
    }
}

/// Renders sample `index` of the corpus defined by `cfg`.
pub fn render_sample(cfg: &DataConfig, index: usize) -> Sample {
    let mut rng = stream(cfg.seed, &[purpose::DATA, index as u64]);
    let class = if cfg.balanced {
        index % NUM_CLASSES
    } else {
        rng.random_range(0..NUM_CLASSES)
    };
    let spec = SceneSpec::sample(class, cfg, &mut rng);
    let pixels = spec.render(cfg.image_size, &mut rng);
    let mismatched = rng.random_bool(cfg.mismatch_fraction);
    let named = if mismatched {
        (class + rng.random_range(1..NUM_CLASSES)) % NUM_CLASSES
    } else {
        class
    };
    let caption = caption_for(&spec, named, cfg.image_size, &mut rng);
    Sample {
        spec,
        pixels,
        caption,
        class_id: class,
        mismatched,
    }
}

pub fn pixels_to_image(pixels: &[u8], height: usize, width: usize) -> Image {
    let mut img = Image::new(height, width);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                img.set(c, y, x, pixels[(y * width + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    img
}

pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(HarmonyError::Data(format!(
            "{} bytes for a {width}x{height} PPM",
            pixels.len()
        )));
    }
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| HarmonyError::io(path, e))
}

/// Reads a binary PPM with maxval 255; returns `(width, height, pixels)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| HarmonyError::io(path, e))?;
    parse_ppm(&bytes).map_err(|m| HarmonyError::Data(format!("{}: {m}", path.display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
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
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("maxval {max} unsupported"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(format!(
            "payload has {} of {need} bytes",
            bytes.len().saturating_sub(pos)
        ));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Writes `n_samples` PPM images and the manifest under `out_dir`.
pub fn generate_dataset(cfg: &DataConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| HarmonyError::io(&images, e))?;
    let tokenizer = caption_tokenizer(cfg.context_length)?;
    let mut records = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let s = render_sample(cfg, i);
        tokenizer.encode(&s.caption)?;
        let rel = format!("images/{i:06}.ppm");
        write_ppm(&out_dir.join(&rel), cfg.image_size, cfg.image_size, &s.pixels)?;
        records.push(Record {
            id: i,
            image_path: rel,
            caption: s.caption,
            class_id: s.class_id,
            mismatched: s.mismatched,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        image_format: ImageFormat {
            kind: "ppm_p6".into(),
            width: cfg.image_size,
            height: cfg.image_size,
            maxval: 255,
        },
        seed: cfg.seed,
        context_length: cfg.context_length,
        vocabulary: tokenizer.vocab.clone(),
        records,
    };
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

pub fn write_manifest(m: &DatasetManifest, dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let header = ManifestHeader {
        version: m.version,
        image_format: m.image_format.clone(),
        seed: m.seed,
        context_length: m.context_length,
        vocabulary: m.vocabulary.clone(),
        records: m.records.len(),
    };
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for r in &m.records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| HarmonyError::io(&path, e))?;
    f.write_all(&out).map_err(|e| HarmonyError::io(&path, e))?;
    let vpath = dir.join(VOCAB_FILE);
    let vocab: serde_json::Map<String, serde_json::Value> = m
        .vocabulary
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), serde_json::Value::from(i)))
        .collect();
    fs::write(&vpath, serde_json::to_vec_pretty(&vocab)?).map_err(|e| HarmonyError::io(&vpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let f = fs::File::open(&path).map_err(|e| HarmonyError::io(&path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| HarmonyError::Data(format!("{} is empty", path.display())))?
        .map_err(|e| HarmonyError::io(&path, e))?;
    let header: ManifestHeader = serde_json::from_str(&first)?;
    if header.version != MANIFEST_VERSION {
        return Err(HarmonyError::Data(format!(
            "manifest version {} unsupported",
            header.version
        )));
    }
    let mut records = Vec::with_capacity(header.records);
    for line in lines {
        let line = line.map_err(|e| HarmonyError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<Record>(&line)?);
    }
    if records.len() != header.records {
        return Err(HarmonyError::Data(format!(
            "manifest lists {} records, header says {}",
            records.len(),
            header.records
        )));
    }
    Ok(DatasetManifest {
        version: header.version,
        image_format: header.image_format,
        seed: header.seed,
        context_length: header.context_length,
        vocabulary: header.vocabulary,
        records,
    })
}

/// A loaded batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<Image>,
    pub tokens: TokenBatch,
    pub captions: Vec<String>,
    pub class_ids: Vec<usize>,
}

/// In-memory corpus.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub captions: Vec<String>,
    pub class_ids: Vec<usize>,
    pub tokenizer: Tokenizer,
    pub image_size: usize,
    pub root: Option<PathBuf>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let all: Vec<usize> = (0..manifest.records.len()).collect();
        let tokenizer = Tokenizer::from_vocab(manifest.vocabulary.clone(), manifest.context_length)?;
        let batch = load_batch(&manifest, dir, &all, &tokenizer)?;
        Ok(Self {
            images: batch.images,
            captions: batch.captions,
            class_ids: batch.class_ids,
            tokenizer,
            image_size: manifest.image_format.height,
            root: Some(dir.to_path_buf()),
        })
    }

    /// Renders the corpus directly, without touching disk.
    pub fn in_memory(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = caption_tokenizer(cfg.context_length)?;
        let mut images = Vec::with_capacity(cfg.n_samples);
        let mut captions = Vec::with_capacity(cfg.n_samples);
        let mut class_ids = Vec::with_capacity(cfg.n_samples);
        for i in 0..cfg.n_samples {
            let s = render_sample(cfg, i);
            images.push(s.image(cfg.image_size));
            captions.push(s.caption);
            class_ids.push(s.class_id);
        }
        Ok(Self {
            images,
            captions,
            class_ids,
            tokenizer,
            image_size: cfg.image_size,
            root: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(HarmonyError::InvalidArgument(format!("sample {bad} out of range")));
        }
        let captions: Vec<String> = indices.iter().map(|&i| self.captions[i].clone()).collect();
        Ok(Batch {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            tokens: self.tokenizer.encode_batch(&captions)?,
            captions,
            class_ids: indices.iter().map(|&i| self.class_ids[i]).collect(),
        })
    }

    /// The first `n` samples and the rest, for train/validation splits.
    pub fn split(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Self {
            images: self.images[r.clone()].to_vec(),
            captions: self.captions[r.clone()].to_vec(),
            class_ids: self.class_ids[r].to_vec(),
            tokenizer: self.tokenizer.clone(),
            image_size: self.image_size,
            root: self.root.clone(),
        };
        (part(0..n), part(n..self.len()))
    }
}

/// Reads the listed records from disk.
pub fn load_batch(manifest: &DatasetManifest, dir: &Path, indices: &[usize], tokenizer: &Tokenizer) -> Result<Batch> {
    let mut images = Vec::with_capacity(indices.len());
    let mut captions = Vec::with_capacity(indices.len());
    let mut class_ids = Vec::with_capacity(indices.len());
    for &i in indices {
        let r = manifest
            .records
            .get(i)
            .ok_or_else(|| HarmonyError::InvalidArgument(format!("record {i} out of range")))?;
        let (w, h, px) = read_ppm(&dir.join(&r.image_path))?;
        if (w, h) != (manifest.image_format.width, manifest.image_format.height) {
            return Err(HarmonyError::Data(format!("{} is {w}x{h}", r.image_path)));
        }
        images.push(pixels_to_image(&px, h, w));
        captions.push(r.caption.clone());
        class_ids.push(r.class_id);
    }
    Ok(Batch {
        images,
        tokens: tokenizer.encode_batch(&captions)?,
        captions,
        class_ids,
    })
}

/// Sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[purpose::SHUFFLE, epoch]));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_fits_default_size() {
        let t = caption_tokenizer(32).unwrap();
        assert!(t.vocab_size() <= 64, "{}", t.vocab_size());
    }

    #[test]
    fn every_caption_template_tokenizes() {
        let cfg = DataConfig {
            n_samples: 400,
            mismatch_fraction: 0.2,
            noise_level: 0.15,
            ..DataConfig::default()
        };
        let t = caption_tokenizer(cfg.context_length).unwrap();
        for i in 0..cfg.n_samples {
            let s = render_sample(&cfg, i);
            let (_, eos) = t.encode(&s.caption).unwrap();
            assert!(eos < 16);
        }
    }

    #[test]
    fn shapes_stay_inside_canvas() {
        let cfg = DataConfig {
            radius_range: (0.3, 0.45),
            position_jitter: 0.5,
            ..DataConfig::default()
        };
        for class in 0..NUM_CLASSES {
            for seed in 0..20 {
                let mut rng = stream(seed, &[class as u64]);
                let s = SceneSpec::sample(class, &cfg, &mut rng);
                assert!(s.cx - s.radius >= 0.0 && s.cx + s.radius <= 32.0);
                assert!(s.cy - s.radius >= 0.0 && s.cy + s.radius <= 32.0);
            }
        }
    }

    #[test]
    fn ppm_header_errors() {
        assert!(parse_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(parse_ppm(b"P6\n2 2\n255\n\x01\x02").is_err());
        assert!(parse_ppm(b"P6\n# c\n1 1\n255\n\x01\x02\x03").is_ok());
        assert!(parse_ppm(b"P6\n1").is_err());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 1);
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
