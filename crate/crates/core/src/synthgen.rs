//! Procedural word-image generator over three toy bitmap scripts.
//!
//! Script A (Gujarati codepoints) and script B (Devanagari codepoints) share
//! six glyph shapes; script C (Bengali codepoints) shares none. B and C draw
//! a top connector line across each word.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, sample_affine, AffineParams, SampleMode};
use crate::tensor::Tensor;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
/// Native canvas height: margin, connector row, glyph rows, margin.
const CANVAS_H: usize = GLYPH_H + 3;
const GLYPH_TOP: usize = 2;

const SHAPES: [(char, [&str; GLYPH_H]); 28] = [
    ('0', [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
    ('A', [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
    ('B', ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."]),
    ('C', [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."]),
    ('D', ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."]),
    ('E', ["#####", "#....", "#....", "####.", "#....", "#....", "#####"]),
    ('F', ["#####", "#....", "#....", "####.", "#....", "#....", "#...."]),
    ('G', [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"]),
    ('H', ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
    ('I', [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('J', ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."]),
    ('K', ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"]),
    ('L', ["#....", "#....", "#....", "#....", "#....", "#....", "#####"]),
    ('M', ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"]),
    ('N', ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"]),
    ('O', [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."]),
    ('P', ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."]),
    ('Q', [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"]),
    ('R', ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"]),
];

/// Bitmap rows, bit 4 is the leftmost column.
pub type Glyph = [u8; GLYPH_H];

fn shape(key: char) -> Glyph {
    let rows = SHAPES.iter().find(|(k, _)| *k == key).expect("known shape").1;
    rows.map(|r| r.bytes().fold(0u8, |acc, b| (acc << 1) | u8::from(b == b'#')))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Script {
    A,
    B,
    C,
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Script::A => "A",
            Script::B => "B",
            Script::C => "C",
        })
    }
}

impl FromStr for Script {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Script::A),
            "B" | "b" => Ok(Script::B),
            "C" | "c" => Ok(Script::C),
            other => Err(Error::BadConfig(format!("unknown script {other:?} (expected A, B or C)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphAtlas {
    pub script: Script,
    pub glyphs: BTreeMap<char, Glyph>,
    pub connector: bool,
    /// Vowel-like symbols, most frequent first in generated lexicons.
    pub vowels: Vec<char>,
}

impl GlyphAtlas {
    pub fn builtin(script: Script) -> Self {
        // (codepoint, shape); the first four are vowels and vowel signs.
        let table: &[(char, char)] = match script {
            Script::A => &[
                ('\u{0A85}', '0'),
                ('\u{0A86}', '1'),
                ('\u{0ABE}', '2'),
                ('\u{0ABF}', '3'),
                ('\u{0A95}', '4'),
                ('\u{0A97}', '5'),
                ('\u{0A9A}', '6'),
                ('\u{0AA4}', '7'),
                ('\u{0AA8}', '8'),
                ('\u{0AB0}', '9'),
            ],
            Script::B => &[
                ('\u{0905}', '0'),
                ('\u{0906}', '1'),
                ('\u{093E}', '2'),
                ('\u{093F}', '3'),
                ('\u{0915}', '4'),
                ('\u{0917}', '5'),
                ('\u{091A}', 'A'),
                ('\u{0924}', 'B'),
                ('\u{0928}', 'C'),
                ('\u{0930}', 'D'),
                ('\u{092E}', 'E'),
                ('\u{0938}', 'F'),
            ],
            Script::C => &[
                ('\u{0985}', 'G'),
                ('\u{0986}', 'H'),
                ('\u{09BE}', 'I'),
                ('\u{09BF}', 'J'),
                ('\u{0995}', 'K'),
                ('\u{0997}', 'L'),
                ('\u{099A}', 'M'),
                ('\u{09A4}', 'N'),
                ('\u{09A8}', 'O'),
                ('\u{09B0}', 'P'),
                ('\u{09AE}', 'Q'),
                ('\u{09B8}', 'R'),
            ],
        };
        Self {
            script,
            glyphs: table.iter().map(|&(cp, key)| (cp, shape(key))).collect(),
            connector: script != Script::A,
            vowels: table[..4].iter().map(|&(cp, _)| cp).collect(),
        }
    }

    pub fn codepoints(&self) -> Vec<char> {
        self.glyphs.keys().copied().collect()
    }

    /// Number of distinct bitmaps present in both atlases.
    pub fn shared_shapes(&self, other: &GlyphAtlas) -> usize {
        let mine: BTreeSet<Glyph> = self.glyphs.values().copied().collect();
        let theirs: BTreeSet<Glyph> = other.glyphs.values().copied().collect();
        mine.intersection(&theirs).count()
    }

    /// Symbols ordered by generation frequency: vowels, then the rest in
    /// codepoint order.
    pub fn frequency_order(&self) -> Vec<char> {
        let mut order = self.vowels.clone();
        order.extend(self.glyphs.keys().filter(|c| !self.vowels.contains(c)));
        order
    }
}

pub fn builtin_scripts() -> (GlyphAtlas, GlyphAtlas, GlyphAtlas) {
    (GlyphAtlas::builtin(Script::A), GlyphAtlas::builtin(Script::B), GlyphAtlas::builtin(Script::C))
}

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::BadImage(format!("{height}x{width} image with {} pixels", pixels.len())));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width] }
    }

    /// Bilinear resize; a no-op copy when the size already matches.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let t = Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone())?;
        let r = resize_bilinear(&t, (height, width))?;
        Self::new(height, width, r.into_data())
    }

    /// Binary 8-bit PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::BadImage("truncated PGM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(Error::BadImage("not a binary PGM (P5)".into()));
        }
        let mut num = || -> Result<usize> { token()?.parse().map_err(|_| Error::BadImage("bad PGM header number".into())) };
        let (width, height, maxval) = (num()?, num()?, num()?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::BadImage(format!("unsupported PGM maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let data = bytes.get(pos + 1..).ok_or_else(|| Error::BadImage("missing PGM raster".into()))?;
        if data.len() < width * height {
            return Err(Error::BadImage(format!("PGM raster has {} of {} bytes", data.len(), width * height)));
        }
        let pixels = data[..width * height].iter().map(|&b| b as f32 / maxval as f32).collect();
        Self::new(height, width, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_pgm())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pgm(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Uniform scale factor range.
    pub scale_jitter: (f64, f64),
    /// Rotation drawn uniformly from ±this many degrees.
    pub rotation_deg: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Ink-minus-background intensity range.
    pub contrast: (f64, f64),
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { height: 32, width: 100, scale_jitter: (0.92, 1.08), rotation_deg: 2.0, noise: 0.03, contrast: (0.6, 1.0), seed: 0 }
    }
}

impl RenderConfig {
    /// No degradation: white ink on black, exact composition.
    pub fn clean(height: usize, width: usize) -> Self {
        Self { height, width, scale_jitter: (1.0, 1.0), rotation_deg: 0.0, noise: 0.0, contrast: (1.0, 1.0), seed: 0 }
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.scale_jitter.0, self.scale_jitter.1, self.rotation_deg, self.noise, self.contrast.0, self.contrast.1]
            .iter()
            .all(|v| v.is_finite());
        let ordered = self.scale_jitter.0 <= self.scale_jitter.1 && self.contrast.0 <= self.contrast.1;
        if !finite || !ordered || self.height == 0 || self.width == 0 || self.scale_jitter.0 <= 0.0 || self.noise < 0.0 {
            return Err(Error::BadConfig(format!("invalid render config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordSample {
    pub image: GrayImage,
    pub label: String,
    pub script: Script,
    pub seed: u64,
}

/// Binary composition of `word` at native resolution, before padding.
pub fn compose(word: &str, atlas: &GlyphAtlas) -> Result<GrayImage> {
    let glyphs = word
        .chars()
        .map(|c| atlas.glyphs.get(&c).copied().ok_or_else(|| Error::MissingGlyph { script: atlas.script.to_string(), codepoint: c }))
        .collect::<Result<Vec<_>>>()?;
    if glyphs.is_empty() {
        return Err(Error::BadConfig("cannot render an empty word".into()));
    }
    let width = 2 + glyphs.len() * (GLYPH_W + 1) - 1;
    let mut img = GrayImage::blank(CANVAS_H, width);
    if atlas.connector {
        img.pixels[width + 1..2 * width - 1].fill(1.0);
    }
    for (k, g) in glyphs.iter().enumerate() {
        let x0 = 1 + k * (GLYPH_W + 1);
        for (r, bits) in g.iter().enumerate() {
            for c in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - c) & 1 == 1 {
                    img.pixels[(GLYPH_TOP + r) * width + x0 + c] = 1.0;
                }
            }
        }
    }
    Ok(img)
}

/// Centers `img` on a black canvas with the aspect ratio of `height × width`.
pub fn pad_to_aspect(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    let target = width as f64 / height as f64;
    let (h, w) = if (img.width as f64) / (img.height as f64) < target {
        (img.height, (img.height as f64 * target).round() as usize)
    } else {
        ((img.width as f64 / target).round() as usize, img.width)
    };
    let (h, w) = (h.max(img.height), w.max(img.width));
    let (top, left) = ((h - img.height) / 2, (w - img.width) / 2);
    let mut out = GrayImage::blank(h, w);
    for r in 0..img.height {
        out.pixels[(top + r) * w + left..(top + r) * w + left + img.width].copy_from_slice(&img.pixels[r * img.width..(r + 1) * img.width]);
    }
    out
}

pub fn render_word(word: &str, atlas: &GlyphAtlas, cfg: &RenderConfig) -> Result<WordSample> {
    cfg.validate()?;
    let padded = pad_to_aspect(&compose(word, atlas)?, cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = rng.random_range(cfg.scale_jitter.0..=cfg.scale_jitter.1);
    let angle = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians();
    let contrast = rng.random_range(cfg.contrast.0..=cfg.contrast.1);
    let background = rng.random_range(0.0..=(1.0 - contrast).max(0.0) * 0.5);

    let mut image = if scale == 1.0 && angle == 0.0 {
        padded.resized(cfg.height, cfg.width)?
    } else {
        // Rotation about the center in pixel space, expressed in the
        // sampler's normalized coordinates of the padded canvas.
        let aspect = padded.width as f64 / padded.height as f64;
        let (s, c) = angle.sin_cos();
        let theta = AffineParams([c / scale, -s / aspect / scale, 0.0, s * aspect / scale, c / scale, 0.0]);
        let t = Tensor::new(&[1, 1, padded.height, padded.width], padded.pixels)?;
        let out = sample_affine(&t, &theta, (cfg.height, cfg.width), SampleMode::Bilinear)?;
        GrayImage::new(cfg.height, cfg.width, out.into_data())?
    };
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::BadConfig(e.to_string()))?;
    for p in &mut image.pixels {
        let mut v = background + contrast * f64::from(*p);
        if cfg.noise > 0.0 {
            v += noise.sample(&mut rng);
        }
        *p = v.clamp(0.0, 1.0) as f32;
    }
    Ok(WordSample { image, label: word.to_string(), script: atlas.script, seed: cfg.seed })
}

/// Unique words whose symbols follow a Zipf law over
/// [`GlyphAtlas::frequency_order`] (exponent 1).
pub fn zipf_lexicon(atlas: &GlyphAtlas, size: usize, lengths: (usize, usize), seed: u64) -> Result<Vec<String>> {
    let (lo, hi) = lengths;
    if size == 0 || lo == 0 || lo > hi {
        return Err(Error::EmptyLexicon);
    }
    let order = atlas.frequency_order();
    let capacity: f64 = (lo..=hi).map(|l| (order.len() as f64).powi(l as i32)).sum();
    if (size as f64) > capacity {
        return Err(Error::BadConfig(format!("cannot draw {size} unique words of length {lo}..={hi}")));
    }
    let weights: Vec<f64> = (1..=order.len()).map(|r| 1.0 / r as f64).collect();
    let dist = rand_distr::weighted::WeightedIndex::new(&weights).expect("positive weights");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let len = rng.random_range(lo..=hi);
        let w: String = (0..len).map(|_| order[dist.sample(&mut rng)]).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    Ok(words)
}

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub label: String,
    pub script: Script,
}

/// Summary of one written manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSummary {
    pub dir: PathBuf,
    pub rows: usize,
    pub manifest_hash: String,
}

fn seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn write_split(dir: &Path, words: &[String], count: usize, atlas: &GlyphAtlas, cfg: &RenderConfig, seed: u64) -> Result<SplitSummary> {
    if words.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<&String> = (0..count).map(|_| &words[rng.random_range(0..words.len())]).collect();
    let sample_seeds = seeds(rng.next_u64(), count);
    let rows = picks
        .par_iter()
        .zip(sample_seeds.par_iter())
        .enumerate()
        .map(|(i, (word, &s))| {
            let sample = render_word(word, atlas, &RenderConfig { seed: s, ..cfg.clone() })?;
            let name = format!("{i:06}.pgm");
            sample.image.save(&dir.join(&name))?;
            Ok(ManifestRow { path: name, label: sample.label, script: atlas.script })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = Vec::new();
    for r in &rows {
        writeln!(manifest, "{}\t{}\t{}", r.path, r.label, r.script)?;
    }
    fs::write(dir.join(MANIFEST), &manifest)?;
    Ok(SplitSummary { dir: dir.to_path_buf(), rows: rows.len(), manifest_hash: hex::encode(Sha256::digest(&manifest)) })
}

/// Renders `count` images of words drawn uniformly with replacement from
/// `lexicon` into `out`.
///
/// With `split = Some(r)` the lexicon is shuffled and cut into disjoint
/// train and test word lists (fraction `r` for training); `out/train` and
/// `out/test` each receive their share of `count` and their own manifest.
pub fn generate_dataset(lexicon: &[String], atlas: &GlyphAtlas, cfg: &RenderConfig, count: usize, out: &Path, split: Option<f64>) -> Result<Vec<SplitSummary>> {
    if lexicon.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    if count == 0 {
        return Err(Error::BadConfig("count must be at least 1".into()));
    }
    cfg.validate()?;
    let mut unique: Vec<String> = lexicon.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    match split {
        None => Ok(vec![write_split(out, &unique, count, atlas, cfg, cfg.seed)?]),
        Some(r) => {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::BadConfig(format!("split ratio must be in (0, 1), got {r}")));
            }
            if unique.len() < 2 || count < 2 {
                return Err(Error::BadConfig("a split needs at least two words and two images".into()));
            }
            unique.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            let cut = ((unique.len() as f64 * r).round() as usize).clamp(1, unique.len() - 1);
            let n_train = ((count as f64 * r).round() as usize).clamp(1, count - 1);
            let seeds = seeds(cfg.seed ^ 0x5EED, 2);
            let train = write_split(&out.join("train"), &unique[..cut], n_train, atlas, cfg, seeds[0])?;
            let test = write_split(&out.join("test"), &unique[cut..], count - n_train, atlas, cfg, seeds[1])?;
            Ok(vec![train, test])
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            let [path, label, script] = cols[..] else {
                return Err(Error::Corrupt(format!("manifest line {} has {} columns", i + 1, cols.len())));
            };
            Ok(ManifestRow { path: path.to_string(), label: label.to_string(), script: script.parse()? })
        })
        .collect()
}

/// SHA-256 of a split's manifest bytes, hex encoded.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(dir.join(MANIFEST))?)))
}

/// SHA-256 over the manifest and every image it references, in order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(MANIFEST))?);
    for row in read_manifest(dir)? {
        h.update(fs::read(dir.join(&row.path))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Labelled images loaded from a manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<GrayImage>,
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let rows = read_manifest(dir)?;
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let images = rows.par_iter().map(|r| GrayImage::load(&dir.join(&r.path))).collect::<Result<Vec<_>>>()?;
        Ok(Self { images, labels: rows.into_iter().map(|r| r.label).collect() })
    }

    /// Renders samples in memory, bypassing the file system.
    pub fn render(words: &[String], atlas: &GlyphAtlas, cfg: &RenderConfig) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let s = seeds(cfg.seed, words.len());
        let images = words
            .par_iter()
            .zip(s.par_iter())
            .map(|(w, &seed)| Ok(render_word(w, atlas, &RenderConfig { seed, ..cfg.clone() })?.image))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images, labels: words.to_vec() })
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self { images: self.images[range.clone()].to_vec(), labels: self.labels[range].to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcodec::{clean_text, ngram_table, Vocabulary};
    use proptest::prelude::*;

    #[test]
    fn script_inventories() {
        let (a, b, c) = builtin_scripts();
        assert_eq!((a.glyphs.len(), b.glyphs.len(), c.glyphs.len()), (10, 12, 12));
        assert_eq!(a.shared_shapes(&b), 6);
        assert_eq!(a.shared_shapes(&c), 0);
        assert_eq!(b.shared_shapes(&c), 0);
        let all: BTreeSet<Glyph> = SHAPES.iter().map(|(k, _)| shape(*k)).collect();
        assert_eq!(all.len(), 28);
        for atlas in [&a, &b, &c] {
            assert!(atlas.glyphs.values().all(|g| g.iter().any(|&r| r != 0)));
            let word: String = atlas.codepoints().into_iter().collect();
            assert!(render_word(&word, atlas, &RenderConfig::default()).is_ok());
            assert_eq!(Vocabulary::build([&word]).unwrap().len(), atlas.glyphs.len());
        }
    }

    #[test]
    fn zero_jitter_composition_is_exact() {
        let a = GlyphAtlas::builtin(Script::A);
        let word = "\u{0A85}\u{0AB0}";
        // Canvas 10 × 13; aspect 13/10 → padding to 10 × 13 is a no-op.
        let s = render_word(word, &a, &RenderConfig::clean(10, 13)).unwrap();
        let mut expect = vec![0.0f32; 130];
        for (k, key) in ['0', '9'].iter().enumerate() {
            let rows = SHAPES.iter().find(|(c, _)| c == key).unwrap().1;
            for (r, row) in rows.iter().enumerate() {
                for (c, ch) in row.chars().enumerate() {
                    if ch == '#' {
                        expect[(2 + r) * 13 + 1 + k * 6 + c] = 1.0;
                    }
                }
            }
        }
        assert_eq!(s.image.pixels, expect);

        // The connector spans the word one row above the glyphs.
        let b = GlyphAtlas::builtin(Script::B);
        let s = render_word("\u{0905}\u{0906}", &b, &RenderConfig::clean(10, 13)).unwrap();
        assert!(s.image.pixels[13 + 1..13 + 12].iter().all(|&p| p == 1.0));
        assert_eq!(s.image.pixels[13], 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = GlyphAtlas::builtin(Script::A);
        let cfg = RenderConfig { seed: 77, ..RenderConfig::default() };
        let x = render_word("\u{0A95}\u{0ABE}\u{0AA8}", &a, &cfg).unwrap();
        let y = render_word("\u{0A95}\u{0ABE}\u{0AA8}", &a, &cfg).unwrap();
        assert_eq!(x, y);
        let z = render_word("\u{0A95}\u{0ABE}\u{0AA8}", &a, &RenderConfig { seed: 78, ..cfg }).unwrap();
        assert_ne!(x.image, z.image);
        assert_eq!((x.image.height, x.image.width), (32, 100));
    }

    #[test]
    fn missing_glyph() {
        let a = GlyphAtlas::builtin(Script::A);
        match render_word("\u{0A85}\u{0905}", &a, &RenderConfig::default()) {
            Err(Error::MissingGlyph { codepoint: '\u{0905}', .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::new(2, 3, vec![0.0, 1.0, 0.5, 0.25, 1.0, 0.0]).unwrap();
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = GrayImage::from_pgm(&bytes).unwrap();
        assert_eq!(back.to_pgm(), bytes);
        assert!(matches!(GrayImage::from_pgm(b"P2\n1 1\n255\n0"), Err(Error::BadImage(_))));
        assert!(matches!(GrayImage::from_pgm(b"P5\n4 4\n255\n\x00"), Err(Error::BadImage(_))));
        assert!(GrayImage::from_pgm(b"P5\n# comment\n1 1\n255\n\x80").is_ok());
    }

    #[test]
    fn dataset_manifest_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let a = GlyphAtlas::builtin(Script::A);
        let lex = zipf_lexicon(&a, 50, (2, 5), 1).unwrap();
        let cfg = RenderConfig { seed: 9, ..RenderConfig::default() };
        let s = generate_dataset(&lex, &a, &cfg, 100, dir.path(), None).unwrap();
        let rows = read_manifest(dir.path()).unwrap();
        assert_eq!(rows.len(), 100);
        assert!(rows.iter().all(|r| dir.path().join(&r.path).exists() && r.script == Script::A));
        let again = tempfile::tempdir().unwrap();
        let t = generate_dataset(&lex, &a, &cfg, 100, again.path(), None).unwrap();
        assert_eq!(s[0].manifest_hash, t[0].manifest_hash);
        assert_eq!(dataset_hash(dir.path()).unwrap(), dataset_hash(again.path()).unwrap());
        assert_eq!(manifest_hash(dir.path()).unwrap(), s[0].manifest_hash);
        let d = Dataset::load(dir.path()).unwrap();
        assert_eq!(d.len(), 100);
    }

    #[test]
    fn split_is_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let c = GlyphAtlas::builtin(Script::C);
        let lex = zipf_lexicon(&c, 40, (2, 4), 3).unwrap();
        let s = generate_dataset(&lex, &c, &RenderConfig::default(), 50, dir.path(), Some(0.8)).unwrap();
        assert_eq!((s[0].rows, s[1].rows), (40, 10));
        let train: BTreeSet<String> = read_manifest(&dir.path().join("train")).unwrap().into_iter().map(|r| r.label).collect();
        let test: BTreeSet<String> = read_manifest(&dir.path().join("test")).unwrap().into_iter().map(|r| r.label).collect();
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn empty_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let a = GlyphAtlas::builtin(Script::A);
        assert!(matches!(generate_dataset(&[], &a, &RenderConfig::default(), 5, dir.path(), None), Err(Error::EmptyLexicon)));
        assert!(matches!(zipf_lexicon(&a, 0, (2, 3), 0), Err(Error::EmptyLexicon)));
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Io(_))));
        fs::write(dir.path().join(MANIFEST), "").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn zipf_vowels_lead_unigrams() {
        let a = GlyphAtlas::builtin(Script::A);
        let lex = zipf_lexicon(&a, 3000, (2, 7), 5).unwrap();
        let top: Vec<char> = ngram_table(&lex, 1).unwrap().top_k(5).into_iter().map(|(g, _)| g.chars().next().unwrap()).collect();
        assert!(top.iter().filter(|c| a.vowels.contains(c)).count() >= 3, "{top:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pixels_in_range_and_labels_clean(seed: u64, script in 0usize..3, len in 1usize..8) {
            let atlas = GlyphAtlas::builtin([Script::A, Script::B, Script::C][script]);
            let word = zipf_lexicon(&atlas, 1, (len, len), seed).unwrap().remove(0);
            prop_assert_eq!(clean_text(&word), word.clone());
            let cfg = RenderConfig { seed, noise: 0.2, ..RenderConfig::default() };
            let s = render_word(&word, &atlas, &cfg).unwrap();
            prop_assert!(s.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }

        #[test]
        fn any_split_ratio_is_disjoint(r in 0.05f64..0.95, seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let a = GlyphAtlas::builtin(Script::A);
            let lex = zipf_lexicon(&a, 12, (1, 3), seed).unwrap();
            let cfg = RenderConfig { seed, height: 8, width: 24, ..RenderConfig::default() };
            generate_dataset(&lex, &a, &cfg, 12, dir.path(), Some(r)).unwrap();
            let train: BTreeSet<String> = read_manifest(&dir.path().join("train")).unwrap().into_iter().map(|r| r.label).collect();
            let test: BTreeSet<String> = read_manifest(&dir.path().join("test")).unwrap().into_iter().map(|r| r.label).collect();
            prop_assert!(train.is_disjoint(&test));
        }
    }
}
