use crate::error::{Error, Result};

pub const DEFAULT_IGNORE: u32 = 255;

/// Per-pixel class indices for a batch, `(n, h, w)` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
    pub ignore_index: u32,
}

impl GroundTruth {
    pub fn new(n: usize, h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        Self::with_ignore(n, h, w, labels, DEFAULT_IGNORE)
    }

    pub fn with_ignore(n: usize, h: usize, w: usize, labels: Vec<u32>, ignore_index: u32) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(Error::shape(
                "ground truth",
                format!("{} labels for ({n}, {h}, {w})", labels.len()),
            ));
        }
        Ok(GroundTruth {
            n,
            h,
            w,
            labels,
            ignore_index,
        })
    }

    pub fn filled(n: usize, h: usize, w: usize, label: u32) -> Self {
        GroundTruth {
            n,
            h,
            w,
            labels: vec![label; n * h * w],
            ignore_index: DEFAULT_IGNORE,
        }
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize) -> u32 {
        self.labels[(n * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u32) {
        self.labels[(n * self.h + y) * self.w + x] = v;
    }

    pub fn is_ignored(&self, v: u32) -> bool {
        v == self.ignore_index
    }

    /// Fails on the first non-ignored label `>= classes`, naming its pixel.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        for (i, &v) in self.labels.iter().enumerate() {
            if v != self.ignore_index && v as usize >= classes {
                let plane = self.h * self.w;
                return Err(Error::LabelOutOfRange {
                    n: i / plane,
                    y: (i % plane) / self.w,
                    x: i % self.w,
                    value: v,
                    classes,
                });
            }
        }
        Ok(())
    }

    /// Pixel count per class, ignoring `ignore_index`. Labels `>= classes`
    /// are an error.
    pub fn class_counts(&self, classes: usize) -> Result<Vec<u64>> {
        self.check_classes(classes)?;
        let mut counts = vec![0u64; classes];
        for &v in &self.labels {
            if v != self.ignore_index {
                counts[v as usize] += 1;
            }
        }
        Ok(counts)
    }
}
