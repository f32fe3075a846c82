//! Binary PPM (P6) images and PGM (P5) label maps, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{GroundTruth, DEFAULT_IGNORE};
use crate::tensor::{Real, Tensor};

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let bad = |detail: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and '#' comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let name = ["width", "height", "maxval"][i];
            return Err(bad(format!("missing or non-numeric {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| bad(format!("bad number: {e}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("expected a single whitespace byte after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad(format!("degenerate size {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let expected = h.width * h.height * channels;
    let found = bytes.len() - h.data_start;
    if found < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(&bytes[h.data_start..h.data_start + expected])
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes a P6 image into a `(1, 3, h, w)` tensor scaled to `[0, 1]` by
/// `/maxval` (i.e. `/255` for ordinary files).
pub fn decode_ppm<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let h = parse_header(bytes, b"P6", path)?;
    let px = payload(bytes, &h, 3, path)?;
    let scale = h.maxval as f64;
    let plane = h.width * h.height;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::lit(rgb[c] as f64 / scale);
        }
    }
    Tensor::new([1, 3, h.height, h.width], data)
}

pub fn load_image_ppm<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    decode_ppm(&read(path)?, path)
}

/// Decodes a P5 label map: each byte is a class index, 255 means ignore.
pub fn decode_pgm_labels(bytes: &[u8], path: &Path) -> Result<GroundTruth> {
    let h = parse_header(bytes, b"P5", path)?;
    if h.maxval != 255 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            detail: format!("label maps must use maxval 255, found {}", h.maxval),
        });
    }
    let px = payload(bytes, &h, 1, path)?;
    GroundTruth::with_ignore(1, h.height, h.width, px.iter().map(|&b| b as u32).collect(), DEFAULT_IGNORE)
}

pub fn load_labels_pgm(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    decode_pgm_labels(&read(path)?, path)
}

/// Encodes the first image of a 3-channel tensor as P6, rounding `x * 255`
/// after clamping to `[0, 1]`.
pub fn encode_ppm<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.c != 3 || s.n != 1 {
        return Err(Error::shape("encode_ppm", format!("expected (1, 3, h, w), got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            let v = d[c * plane + i].as_f64().clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Encodes RGB bytes laid out row-major, interleaved.
pub fn encode_ppm_rgb(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Encodes the first map of `gt` as P5. Labels above 255 are an error.
pub fn encode_pgm_labels(gt: &GroundTruth) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", gt.w, gt.h).into_bytes();
    for &v in &gt.labels[..gt.h * gt.w] {
        let b = u8::try_from(v)
            .map_err(|_| Error::Data(format!("label {v} does not fit an 8-bit PGM")))?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn all_zero_pgm_is_background() {
        let bytes = [b"P5\n3 2\n255\n".as_slice(), &[0u8; 6]].concat();
        let gt = decode_pgm_labels(&bytes, p()).unwrap();
        assert_eq!((gt.h, gt.w), (2, 3));
        assert!(gt.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn white_ppm_is_all_ones() {
        let bytes = [b"P6 2 2 255\n".as_slice(), &[255u8; 12]].concat();
        let t: Tensor<f32> = decode_ppm(&bytes, p()).unwrap();
        assert_eq!(t.shape().as_array(), [1, 3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = [b"P5\n# made by hand\n1 1\n# more\n255\n".as_slice(), &[7u8]].concat();
        assert_eq!(decode_pgm_labels(&bytes, p()).unwrap().labels, vec![7]);
    }

    #[test]
    fn errors_are_distinct() {
        let wrong_magic = decode_pgm_labels(b"P6\n1 1\n255\n\0", p()).unwrap_err();
        assert!(matches!(wrong_magic, Error::MalformedHeader { .. }));
        let no_height = decode_pgm_labels(b"P5\n1 \n", p()).unwrap_err();
        assert!(matches!(no_height, Error::MalformedHeader { .. }), "{no_height}");
        let truncated = decode_ppm::<f32>(b"P6\n2 2\n255\n\x01\x02", p()).unwrap_err();
        assert!(matches!(truncated, Error::TruncatedPayload { expected: 12, found: 2, .. }));
        let deep = decode_pgm_labels(b"P5\n1 1\n65535\n\0\0", p()).unwrap_err();
        assert!(deep.to_string().contains("maxval"));
        assert_ne!(wrong_magic.to_string(), truncated.to_string());
    }

    #[test]
    fn label_out_of_range_is_caught_at_use() {
        let bytes = [b"P5\n2 1\n255\n".as_slice(), &[1u8, 9]].concat();
        let gt = decode_pgm_labels(&bytes, p()).unwrap();
        assert!(matches!(gt.check_classes(4), Err(Error::LabelOutOfRange { value: 9, .. })));
        assert!(gt.check_classes(10).is_ok());
    }

    proptest! {
        #[test]
        fn ppm_round_trip_is_bit_exact(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let mut rng = crate::rng::Prng::new(seed);
            let rgb: Vec<u8> = (0..w * h * 3).map(|_| rng.below(256) as u8).collect();
            let bytes = encode_ppm_rgb(w, h, &rgb);
            let t: Tensor<f32> = decode_ppm(&bytes, p()).unwrap();
            prop_assert_eq!(encode_ppm(&t).unwrap(), bytes);
        }

        #[test]
        fn pgm_round_trip_is_bit_exact(labels in proptest::collection::vec(0u32..256, 12)) {
            let gt = GroundTruth::new(1, 3, 4, labels).unwrap();
            let bytes = encode_pgm_labels(&gt).unwrap();
            prop_assert_eq!(decode_pgm_labels(&bytes, p()).unwrap(), gt);
        }
    }
}
