//! Samples, palettes, manifests and the preprocessing applied before a
//! forward pass.

pub mod netpbm;
pub mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::labels::GroundTruth;
use crate::rng::Prng;
use crate::tensor::{Real, Tensor};

pub use synth::{gen_ambiguous, gen_shapes};

/// One image in `[0, 1]` with its per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub gt: GroundTruth,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, gt: GroundTruth, id: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || gt.n != 1 || s.h != gt.h || s.w != gt.w {
            return Err(Error::Data(format!(
                "image {s} and labels ({}, {}, {}) do not align",
                gt.n, gt.h, gt.w
            )));
        }
        Ok(Sample {
            image,
            gt,
            id: id.into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaletteEntry {
    pub index: u32,
    pub rgb: [u8; 3],
    pub name: String,
}

/// Class colors and names, dense in `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
}

impl Palette {
    pub fn new(mut entries: Vec<PaletteEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.index);
        for (i, e) in entries.iter().enumerate() {
            if e.index as usize != i {
                return Err(Error::Data(format!(
                    "palette indices must be unique and dense from 0; found {} at position {i}",
                    e.index
                )));
            }
            if e.name.is_empty() || e.name.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("palette name {:?} must be one word", e.name)));
            }
        }
        Ok(Palette { entries })
    }

    /// Parses lines of `index r g b name`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Data(format!("palette line {}: expected `index r g b name`", ln + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad());
            let byte = |s: &str| s.parse::<u8>().map_err(|_| bad());
            entries.push(PaletteEntry {
                index: num(f[0])?,
                rgb: [byte(f[1])?, byte(f[2])?, byte(f[3])?],
                name: f[4].to_string(),
            });
        }
        Palette::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Palette::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let [r, g, b] = e.rgb;
            writeln!(s, "{} {r} {g} {b} {}", e.index, e.name).expect("string write");
        }
        s
    }

    /// A palette of evenly spread hues for `classes` classes named `class{i}`.
    pub fn generic(classes: usize) -> Self {
        let entries = (0..classes)
            .map(|i| {
                let t = i as f64 / classes.max(1) as f64;
                let ch = |phase: f64| (127.5 + 127.5 * (2.0 * std::f64::consts::PI * (t + phase)).cos()).round() as u8;
                PaletteEntry {
                    index: i as u32,
                    rgb: [ch(0.0), ch(1.0 / 3.0), ch(2.0 / 3.0)],
                    name: format!("class{i}"),
                }
            })
            .collect();
        Palette { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn color(&self, class: u32) -> Option<[u8; 3]> {
        self.entries.get(class as usize).map(|e| e.rgb)
    }

    pub fn name(&self, class: usize) -> &str {
        &self.entries[class].name
    }

    /// Class whose color is closest in squared RGB distance.
    pub fn nearest(&self, rgb: [u8; 3]) -> u32 {
        let d = |e: &PaletteEntry| {
            (0..3)
                .map(|c| (e.rgb[c] as i32 - rgb[c] as i32).pow(2))
                .sum::<i32>()
        };
        self.entries.iter().min_by_key(|e| d(e)).map_or(0, |e| e.index)
    }

    /// RGB bytes of a label map; ignored or unknown labels render black.
    pub fn colorize(&self, gt: &GroundTruth) -> Vec<u8> {
        gt.labels[..gt.h * gt.w]
            .iter()
            .flat_map(|&v| self.color(v).unwrap_or([0, 0, 0]))
            .collect()
    }
}

/// Reads a manifest of `image_path label_path` lines. Relative paths are
/// resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 {
            return Err(Error::Data(format!(
                "{}:{}: expected `image_path label_path`",
                path.display(),
                ln + 1
            )));
        }
        out.push((base.join(f[0]), base.join(f[1])));
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    read_manifest(path)?
        .into_iter()
        .map(|(img, lbl)| {
            let image = netpbm::load_image_ppm(&img)?;
            let gt = netpbm::load_labels_pgm(&lbl)?;
            let id = img
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Sample::new(image, gt, id)
        })
        .collect()
}

/// Same window applied to image and labels, origin drawn uniformly.
pub fn random_crop(sample: &Sample, crop_h: usize, crop_w: usize, rng: &mut Prng) -> Result<Sample> {
    let s = sample.image.shape();
    if crop_h == 0 || crop_w == 0 || crop_h > s.h || crop_w > s.w {
        return Err(Error::InvalidArgument(format!(
            "crop {crop_h}x{crop_w} does not fit image {}x{}",
            s.h, s.w
        )));
    }
    let y0 = rng.below(s.h - crop_h + 1);
    let x0 = rng.below(s.w - crop_w + 1);
    Ok(crop_at(sample, y0, x0, crop_h, crop_w))
}

pub fn crop_at(sample: &Sample, y0: usize, x0: usize, h: usize, w: usize) -> Sample {
    let image = Tensor::from_fn([1, 3, h, w], |_, c, y, x| sample.image.at(0, c, y0 + y, x0 + x));
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            labels.push(sample.gt.get(0, y0 + y, x0 + x));
        }
    }
    Sample {
        image,
        gt: GroundTruth::with_ignore(1, h, w, labels, sample.gt.ignore_index).expect("crop shape"),
        id: sample.id.clone(),
    }
}

/// Per-channel `(x − mean) / std`.
pub fn normalize<T: Real>(image: &Tensor<T>, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<T>> {
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("normalization std {std:?} must be positive")));
    }
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::shape("normalize", format!("expected 3 channels, got {s}")));
    }
    Ok(Tensor::from_fn(s, |n, c, y, x| {
        (image.at(n, c, y, x) - T::lit(mean[c])) / T::lit(std[c])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_cases() {
        let img = Tensor::full([1, 3, 2, 2], 0.8f64);
        assert_eq!(normalize(&img, [0.0; 3], [1.0; 3]).unwrap(), img);
        let z = normalize(&img, [0.8; 3], [0.3; 3]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let v = normalize(&img, [0.5; 3], [0.25; 3]).unwrap();
        assert!(v.data().iter().all(|&v| (v - 1.2).abs() < 1e-12));
        assert!(normalize(&img, [0.5; 3], [0.25, 0.0, 1.0]).is_err());
    }

    #[test]
    fn full_size_crop_is_identity() {
        let s = &gen_shapes(&mut Prng::new(1), 1, 32, 4).unwrap()[0];
        assert_eq!(&random_crop(s, 32, 32, &mut Prng::new(2)).unwrap(), s);
        assert!(random_crop(s, 33, 8, &mut Prng::new(2)).is_err());
    }

    #[test]
    fn crops_stay_in_bounds() {
        let mut rng = Prng::new(5);
        let (h, w) = (40usize, 24usize);
        for _ in 0..1000 {
            let (ch, cw) = (1 + rng.below(h), 1 + rng.below(w));
            let y0 = rng.below(h - ch + 1);
            let x0 = rng.below(w - cw + 1);
            assert!(y0 + ch <= h && x0 + cw <= w);
        }
        let s = Sample::new(Tensor::zeros([1, 3, h, w]), GroundTruth::filled(1, h, w, 0), "z").unwrap();
        for _ in 0..1000 {
            let c = random_crop(&s, 16, 8, &mut rng).unwrap();
            assert_eq!((c.gt.h, c.gt.w), (16, 8));
        }
    }

    #[test]
    fn crop_keeps_labels_aligned_with_pixels() {
        // Single-shape images; recount the shape by color in the cropped image.
        let pal = synth::shapes_palette(2).unwrap();
        let mut rng = Prng::new(8);
        for s in gen_shapes(&mut Prng::new(7), 25, 64, 2).unwrap() {
            let c = random_crop(&s, 32, 32, &mut rng).unwrap();
            let plane = 32 * 32;
            let by_color = (0..plane)
                .filter(|&i| {
                    let px = [0, 1, 2].map(|ch| (c.image.data()[ch * plane + i] * 255.0).round() as u8);
                    pal.nearest(px) == 1
                })
                .count();
            let by_label = c.gt.labels.iter().filter(|&&v| v == 1).count();
            assert_eq!(by_color, by_label);
        }
    }

    #[test]
    fn palette_text_round_trip_and_validation() {
        let p = synth::shapes_palette(4).unwrap();
        assert_eq!(Palette::parse(&p.to_text()).unwrap(), p);
        assert!(Palette::parse("0 1 2 3 a\n2 1 2 3 b\n").is_err());
        assert!(Palette::parse("0 1 2 a\n").is_err());
        assert!(Palette::parse("0 1 2 300 a\n").is_err());
    }

    #[test]
    fn sample_rejects_misaligned_labels() {
        assert!(Sample::new(Tensor::zeros([1, 3, 4, 4]), GroundTruth::filled(1, 4, 2, 0), "x").is_err());
    }
}
