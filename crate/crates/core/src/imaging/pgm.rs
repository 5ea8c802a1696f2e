use std::io::Write;
use std::path::Path;

use super::{ImageGray, ImagingError};
use crate::fsutil::write_atomic;

/// Reads a binary (P5) or ASCII (P2) PGM and scales samples by `1 / maxval`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGray, ImagingError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ImagingError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pgm(&bytes)
}

/// Writes `img` as an 8-bit P5 PGM, `round(i * 255)` clamped to `[0, 255]`.
///
/// The file is written to a temporary sibling and renamed into place.
pub fn save_image(img: &ImageGray, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    save_image_with_depth(img, path, BitDepth::Eight)
}

/// Sample width for written PGMs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BitDepth {
    #[default]
    Eight,
    /// maxval 65535, big-endian samples.
    Sixteen,
}

impl BitDepth {
    pub fn bits(self) -> u32 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }

    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

impl std::str::FromStr for BitDepth {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "8" => Ok(BitDepth::Eight),
            "16" => Ok(BitDepth::Sixteen),
            _ => Err(format!("bit depth must be 8 or 16, got {s:?}")),
        }
    }
}

pub fn save_image_with_depth(img: &ImageGray, path: impl AsRef<Path>, depth: BitDepth) -> Result<(), ImagingError> {
    let path = path.as_ref();
    write_atomic(path, |w| write_pgm_with_depth(img, w, depth)).map_err(|source| ImagingError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_pgm(img: &ImageGray, w: &mut impl Write) -> std::io::Result<()> {
    write_pgm_with_depth(img, w, BitDepth::Eight)
}

pub fn write_pgm_with_depth(img: &ImageGray, w: &mut impl Write, depth: BitDepth) -> std::io::Result<()> {
    let maxval = depth.maxval();
    write!(w, "P5\n{} {}\n{maxval}\n", img.width(), img.height())?;
    let payload: Vec<u8> = match depth {
        BitDepth::Eight => img.data().iter().map(|&v| quantize(v, maxval) as u8).collect(),
        BitDepth::Sixteen => img
            .data()
            .iter()
            .flat_map(|&v| (quantize(v, maxval) as u16).to_be_bytes())
            .collect(),
    };
    w.write_all(&payload)
}

// Round half up.
fn quantize(v: f64, maxval: u32) -> u32 {
    let m = f64::from(maxval);
    (v * m + 0.5).floor().clamp(0.0, m) as u32
}

pub(crate) fn decode_pgm(bytes: &[u8]) -> Result<ImageGray, ImagingError> {
    if bytes.len() < 2 {
        return Err(ImagingError::MalformedHeader {
            field: "magic",
            offset: 0,
        });
    }
    let magic = &bytes[..2];
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => {
            return Err(ImagingError::UnsupportedFormat {
                magic: String::from_utf8_lossy(magic).into_owned(),
            })
        }
    };
    let mut cursor = Cursor { bytes, pos: 2 };
    let width = cursor.header_number("width")?;
    let height = cursor.header_number("height")?;
    let maxval = cursor.header_number("maxval")?;
    if width == 0 {
        return Err(ImagingError::MalformedHeader {
            field: "width",
            offset: cursor.pos,
        });
    }
    if height == 0 {
        return Err(ImagingError::MalformedHeader {
            field: "height",
            offset: cursor.pos,
        });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(ImagingError::MalformedHeader {
            field: "maxval",
            offset: cursor.pos,
        });
    }
    let width = width as usize;
    let height = height as usize;
    let count = width * height;
    let scale = 1.0 / maxval as f64;
    let mut data = Vec::with_capacity(count);

    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(cursor.pos) {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            _ => {
                return Err(ImagingError::MalformedHeader {
                    field: "raster separator",
                    offset: cursor.pos,
                })
            }
        }
        let sample_bytes = if maxval > 255 { 2 } else { 1 };
        let payload = &bytes[cursor.pos..];
        let available = payload.len() / sample_bytes;
        if available < count {
            return Err(ImagingError::Truncated {
                offset: cursor.pos + available * sample_bytes,
                expected: count,
                found: available,
            });
        }
        for i in 0..count {
            let value = if sample_bytes == 2 {
                u32::from(u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]))
            } else {
                u32::from(payload[i])
            };
            if value > maxval {
                return Err(ImagingError::SampleOutOfRange {
                    offset: cursor.pos + i * sample_bytes,
                    value,
                    maxval,
                });
            }
            data.push(value as f64 * scale);
        }
    } else {
        for i in 0..count {
            let offset = cursor.pos;
            let value = cursor.ascii_number().ok_or(ImagingError::Truncated {
                offset,
                expected: count,
                found: i,
            })?;
            if value > maxval {
                return Err(ImagingError::SampleOutOfRange {
                    offset,
                    value,
                    maxval,
                });
            }
            data.push(value as f64 * scale);
        }
    }
    ImageGray::new(height, width, data)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn ascii_number(&mut self) -> Option<u32> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit())
        {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }

    fn header_number(&mut self, field: &'static str) -> Result<u32, ImagingError> {
        // Header tokens must be separated from the magic / previous token.
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() || *b == b'#' => {}
            _ => {
                return Err(ImagingError::MalformedHeader {
                    field,
                    offset: self.pos,
                })
            }
        }
        self.skip_whitespace_and_comments();
        let offset = self.pos;
        self.ascii_number()
            .ok_or(ImagingError::MalformedHeader { field, offset })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_scaled_by_maxval() {
        let img = decode_pgm(b"P2\n2 2\n255\n0 255\n255 0\n").unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!((img.height(), img.width()), (2, 2));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pgm(b"P2 # made by hand\n3 1\n# max\n4\n0 2 4").unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn p3_is_rejected() {
        let err = decode_pgm(b"P3\n1 1\n255\n0 0 0\n").unwrap_err();
        assert!(matches!(err, ImagingError::UnsupportedFormat { ref magic } if magic == "P3"));
    }

    #[test]
    fn truncated_binary_payload_names_offset() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend_from_slice(&[7u8; 10]);
        match decode_pgm(&bytes).unwrap_err() {
            ImagingError::Truncated {
                offset,
                expected,
                found,
            } => {
                assert_eq!((expected, found), (16, 10));
                assert_eq!(offset, 11 + 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_header_names_field() {
        match decode_pgm(b"P5\n4 x\n255\n").unwrap_err() {
            ImagingError::MalformedHeader { field, offset } => {
                assert_eq!(field, "height");
                assert_eq!(offset, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n70000\n\0\0").unwrap_err(),
            ImagingError::MalformedHeader {
                field: "maxval",
                ..
            }
        ));
    }

    #[test]
    fn sixteen_bit_samples_are_big_endian() {
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x80, 0x00]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.get(0, 0), 1.0);
        assert!((img.get(0, 1) - 32768.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn sixteen_bit_round_trip_is_fine_grained() {
        let img = ImageGray::from_fn(3, 5, |r, c| (r * 5 + c) as f64 / 14.0 * 0.999);
        let mut out = Vec::new();
        write_pgm_with_depth(&img, &mut out, BitDepth::Sixteen).unwrap();
        assert!(out.starts_with(b"P5\n5 3\n65535\n"));
        let back = decode_pgm(&out).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5, 255), 128);
        assert_eq!(quantize(1.0, 255), 255);
        assert_eq!(quantize(0.0, 255), 0);
        assert_eq!(quantize(-0.2, 255), 0);
        assert_eq!(quantize(1.7, 255), 255);
    }

    #[test]
    fn zero_image_writes_zero_bytes() {
        let mut out = Vec::new();
        write_pgm(&ImageGray::zeros(4, 4), &mut out).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&out[..header.len()], header);
        assert_eq!(&out[header.len()..], &[0u8; 16]);
    }
}
