//! Deterministic synthetic digit images for self-contained runs.
//!
//! Each sample renders a 7x5 digit glyph scaled into a 28x28 canvas with
//! seeded position jitter, per-sample intensity, and pixel noise. Samples
//! are reproducible from (seed, index) alone, and the generator can emit
//! standard IDX files consumed by the loader.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{to_idx_bytes, IdxContent, Image, RawDataset};
use crate::error::{Error, Result};

const GLYPH_H: usize = 7;
const GLYPH_W: usize = 5;

/// 7x5 bitmaps for digits 0-9, row strings of '#' and '.'.
const GLYPHS: [[&str; GLYPH_H]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    [".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Integer glyph cell size in pixels.
    pub scale: usize,
    /// Maximum absolute offset of the glyph from the centered position.
    pub jitter: usize,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { height: 28, width: 28, scale: 3, jitter: 3, noise: 0.12, seed: 0 }
    }
}

impl SynthConfig {
    fn validated(&self) -> Result<()> {
        let gh = GLYPH_H * self.scale;
        let gw = GLYPH_W * self.scale;
        if self.scale == 0 || gh + 2 * self.jitter > self.height || gw + 2 * self.jitter > self.width
        {
            return Err(Error::Argument(format!(
                "glyph {gh}x{gw} with jitter {} does not fit in {}x{}",
                self.jitter, self.height, self.width
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Argument(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        Ok(())
    }
}

/// Renders sample `index` of class `digit`. Deterministic in
/// (config.seed, digit, index).
pub fn render_digit(config: &SynthConfig, digit: u8, index: u64) -> Result<Image> {
    config.validated()?;
    if digit > 9 {
        return Err(Error::Argument(format!("digit {digit} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream((digit as u64) << 56 | index);
    let (h, w) = (config.height, config.width);
    let gh = GLYPH_H * config.scale;
    let gw = GLYPH_W * config.scale;
    let base_y = (h - gh) / 2;
    let base_x = (w - gw) / 2;
    let dy = rng.gen_range(-(config.jitter as i64)..=config.jitter as i64);
    let dx = rng.gen_range(-(config.jitter as i64)..=config.jitter as i64);
    let top = (base_y as i64 + dy) as usize;
    let left = (base_x as i64 + dx) as usize;
    let ink = rng.gen_range(0.65..1.0);
    let mut pixels = vec![0.0f64; h * w];
    let glyph = &GLYPHS[digit as usize];
    for (gy, row) in glyph.iter().enumerate() {
        for (gx, cell) in row.bytes().enumerate() {
            if cell != b'#' {
                continue;
            }
            for yy in 0..config.scale {
                for xx in 0..config.scale {
                    pixels[(top + gy * config.scale + yy) * w + left + gx * config.scale + xx] =
                        ink;
                }
            }
        }
    }
    for p in pixels.iter_mut() {
        *p = (*p + rng.gen_range(-config.noise..config.noise)).clamp(0.0, 1.0);
    }
    Image::new(h, w, 1, pixels)
}

/// A balanced labelled dataset: classes cycle 0..=9 across `count` samples.
pub fn generate(config: &SynthConfig, count: usize) -> Result<RawDataset> {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let digit = (i % 10) as u8;
        images.push(render_digit(config, digit, (i / 10) as u64)?);
        labels.push(digit);
    }
    RawDataset::new(images, labels, 10)
}

/// Writes `train-images.idx`/`train-labels.idx` and the `t10k-` pair in IDX
/// format under `dir`, split 6:1 like the usual digit benchmark layout.
pub fn write_idx_dataset(config: &SynthConfig, dir: &Path, train: usize, test: usize) -> Result<()> {
    let data = generate(config, train + test)?;
    fs::create_dir_all(dir)?;
    let dump = |prefix: &str, range: std::ops::Range<usize>| -> Result<()> {
        let imgs: Vec<Image> = data.images[range.clone()].to_vec();
        let labels = data.labels[range].to_vec();
        fs::write(
            dir.join(format!("{prefix}-images.idx")),
            to_idx_bytes(&IdxContent::Images(imgs))?,
        )?;
        fs::write(
            dir.join(format!("{prefix}-labels.idx")),
            to_idx_bytes(&IdxContent::Labels(labels))?,
        )?;
        Ok(())
    };
    dump("train", 0..train)?;
    dump("t10k", train..train + test)?;
    Ok(())
}
