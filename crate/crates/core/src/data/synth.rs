//! Seeded synthetic datasets.
//!
//! * `shapes`: 1-4 rectangles or discs on a dark background; the class of a
//!   shape is given by its color.
//! * `ambiguous`: one textured patch whose appearance is the same for both
//!   object classes. Its class is given only by the tint of a small square in
//!   the diagonally opposite corner, at least half the image away.
//!
//! Pixel values are quantized to multiples of 1/255 so that writing a sample
//! to PPM and reading it back yields the identical tensor.

use crate::error::{Error, Result};
use crate::labels::GroundTruth;
use crate::rng::Prng;
use crate::tensor::Tensor;

use super::{Palette, PaletteEntry, Sample};

const SHAPE_COLORS: [(u8, u8, u8, &str); 8] = [
    (40, 40, 40, "background"),
    (220, 40, 40, "red"),
    (40, 200, 60, "green"),
    (50, 80, 230, "blue"),
    (230, 210, 40, "yellow"),
    (200, 60, 200, "magenta"),
    (40, 200, 210, "cyan"),
    (240, 140, 30, "orange"),
];

pub const MAX_SHAPE_CLASSES: usize = SHAPE_COLORS.len();
const NOISE: f64 = 10.0;

const AMBIG_BACKGROUND: (u8, u8, u8) = (128, 128, 128);
const AMBIG_CUES: [(u8, u8, u8); 2] = [(210, 90, 90), (90, 90, 210)];
const CHECK_A: (u8, u8, u8) = (230, 220, 60);
const CHECK_B: (u8, u8, u8) = (30, 30, 30);

pub fn shapes_palette(classes: usize) -> Result<Palette> {
    if !(2..=MAX_SHAPE_CLASSES).contains(&classes) {
        return Err(Error::InvalidArgument(format!(
            "shapes dataset supports 2..={MAX_SHAPE_CLASSES} classes, got {classes}"
        )));
    }
    Palette::new(
        SHAPE_COLORS[..classes]
            .iter()
            .enumerate()
            .map(|(i, &(r, g, b, name))| PaletteEntry {
                index: i as u32,
                rgb: [r, g, b],
                name: name.to_string(),
            })
            .collect(),
    )
}

pub fn ambiguous_palette() -> Palette {
    let e = |i: u32, rgb: [u8; 3], name: &str| PaletteEntry {
        index: i,
        rgb,
        name: name.to_string(),
    };
    Palette::new(vec![
        e(0, [128, 128, 128], "background"),
        e(1, [210, 90, 90], "object_red_context"),
        e(2, [90, 90, 210], "object_blue_context"),
    ])
    .expect("static palette")
}

struct Canvas {
    size: usize,
    rgb: Vec<[u8; 3]>,
    labels: Vec<u32>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            rgb: vec![[0; 3]; size * size],
            labels: vec![0; size * size],
        }
    }

    fn paint(&mut self, y: usize, x: usize, rgb: (u8, u8, u8), label: u32, noise: f64, rng: &mut Prng) {
        let jitter = |v: u8, rng: &mut Prng| {
            if noise == 0.0 {
                v
            } else {
                (v as f64 + rng.range(-noise, noise)).round().clamp(0.0, 255.0) as u8
            }
        };
        let i = y * self.size + x;
        self.rgb[i] = [jitter(rgb.0, rng), jitter(rgb.1, rng), jitter(rgb.2, rng)];
        self.labels[i] = label;
    }

    fn into_sample(self, id: String) -> Sample {
        let s = self.size;
        let plane = s * s;
        let mut data = vec![0f32; 3 * plane];
        for (i, px) in self.rgb.iter().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Sample {
            image: Tensor::new([1, 3, s, s], data).expect("canvas shape"),
            gt: GroundTruth::new(1, s, s, self.labels).expect("canvas shape"),
            id,
        }
    }
}

/// `n` square images of side `size` with 1-4 colored shapes each. Labels are
/// background 0 and one class per shape color in `1..classes`.
pub fn gen_shapes(rng: &mut Prng, n: usize, size: usize, classes: usize) -> Result<Vec<Sample>> {
    shapes_palette(classes)?;
    if size < 8 {
        return Err(Error::InvalidArgument(format!("image size {size} is too small")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut canvas = Canvas::new(size);
        for y in 0..size {
            for x in 0..size {
                let (r, g, b, _) = SHAPE_COLORS[0];
                canvas.paint(y, x, (r, g, b), 0, NOISE, rng);
            }
        }
        let count = 1 + rng.below((classes - 1).min(4));
        let mut pool: Vec<u32> = (1..classes as u32).collect();
        rng.shuffle(&mut pool);
        for &class in &pool[..count] {
            let (r, g, b, _) = SHAPE_COLORS[class as usize];
            let color = (r, g, b);
            if rng.coin() {
                let lo = (size / 8).max(2);
                let hi = (size / 3).max(lo + 1);
                let h = lo + rng.below(hi - lo);
                let w = lo + rng.below(hi - lo);
                let y0 = rng.below(size - h + 1);
                let x0 = rng.below(size - w + 1);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        canvas.paint(y, x, color, class, NOISE, rng);
                    }
                }
            } else {
                let lo = (size / 16).max(1);
                let hi = (size / 6).max(lo + 1);
                let r = lo + rng.below(hi - lo);
                let cy = r + rng.below(size - 2 * r);
                let cx = r + rng.below(size - 2 * r);
                let r2 = (r * r) as isize;
                for y in cy - r..cy + r {
                    for x in cx - r..cx + r {
                        let (dy, dx) = (y as isize - cy as isize, x as isize - cx as isize);
                        // Pixel-center test against a disc centered at (cy, cx).
                        let (fy, fx) = (2 * dy + 1, 2 * dx + 1);
                        if fy * fy + fx * fx <= 4 * r2 {
                            canvas.paint(y, x, color, class, NOISE, rng);
                        }
                    }
                }
            }
        }
        out.push(canvas.into_sample(format!("shapes_{i:05}")));
    }
    Ok(out)
}

/// Side of the context-cue square.
pub fn cue_size(size: usize) -> usize {
    size / 8
}

/// Side of the ambiguous patch.
pub fn patch_size(size: usize) -> usize {
    size / 4
}

/// Pixel of the fixed checkerboard texture at patch-relative `(y, x)`.
pub fn patch_texel(y: usize, x: usize) -> (u8, u8, u8) {
    if (y / 2 + x / 2) % 2 == 0 {
        CHECK_A
    } else {
        CHECK_B
    }
}

/// `n` three-class images: a checkerboard patch (class 1 or 2) in one corner
/// region and a tinted cue square in the opposite corner that alone decides
/// the class. Every patch is pixel-identical regardless of class.
pub fn gen_ambiguous(rng: &mut Prng, n: usize, size: usize) -> Result<Vec<Sample>> {
    if size < 16 || size % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "ambiguous dataset needs a size divisible by 8 and at least 16, got {size}"
        )));
    }
    let (cue, patch) = (cue_size(size), patch_size(size));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = 1 + rng.below(2) as u32;
        let corner = rng.below(4);
        let (cue_low_y, cue_low_x) = (corner / 2 == 0, corner % 2 == 0);
        // Patch origin along an axis: far side from the cue, leaving a gap of
        // at least size/2 between any cue pixel and any patch pixel.
        let mut place = |cue_low: bool| {
            let jitter = rng.below(size / 8 + 1);
            if cue_low {
                5 * size / 8 + jitter
            } else {
                jitter
            }
        };
        let py = place(cue_low_y);
        let px = place(cue_low_x);
        let mut canvas = Canvas::new(size);
        for y in 0..size {
            for x in 0..size {
                canvas.paint(y, x, AMBIG_BACKGROUND, 0, NOISE, rng);
            }
        }
        let cy0 = if cue_low_y { 0 } else { size - cue };
        let cx0 = if cue_low_x { 0 } else { size - cue };
        for y in cy0..cy0 + cue {
            for x in cx0..cx0 + cue {
                canvas.paint(y, x, AMBIG_CUES[class as usize - 1], 0, NOISE, rng);
            }
        }
        for y in 0..patch {
            for x in 0..patch {
                canvas.paint(py + y, px + x, patch_texel(y, x), class, 0.0, rng);
            }
        }
        out.push(canvas.into_sample(format!("ambiguous_{i:05}")));
    }
    Ok(out)
}
