//! Binary PGM (P5): 16-bit big-endian intensity images and 8-bit label maps.

use lfc_core::data::{Image, LabelMap};

pub const IMAGE_MAXVAL: u32 = 65535;
pub const LABEL_MAXVAL: u32 = 255;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PgmError {
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("expected maxval {expected}, found {found}")]
    WrongMaxval { expected: u32, found: u32 },
    #[error("payload holds {found} bytes, {expected} expected")]
    SizeMismatch { expected: usize, found: usize },
}

/// Intensity in `[0, 1]` to its 16-bit code.
pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * f64::from(IMAGE_MAXVAL)).round() as u16
}

pub fn dequantize(q: u16) -> f64 {
    f64::from(q) / f64::from(IMAGE_MAXVAL)
}

fn header(width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

pub fn encode_image(image: &Image) -> Vec<u8> {
    let mut out = header(image.width(), image.height(), IMAGE_MAXVAL);
    for &v in image.pixels.data() {
        out.extend_from_slice(&quantize(v).to_be_bytes());
    }
    out
}

pub fn encode_label(label: &LabelMap) -> Vec<u8> {
    let mut out = header(label.width, label.height, LABEL_MAXVAL);
    out.extend_from_slice(&label.data);
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    payload_at: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::MalformedHeader("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
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
            return Err(PgmError::MalformedHeader(format!("field {} is not a number", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| PgmError::MalformedHeader(format!("field {} out of range", i + 1)))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::MalformedHeader("no whitespace after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(PgmError::MalformedHeader(format!("empty image {width}x{height}")));
    }
    Ok(Header {
        width,
        height,
        maxval: u32::try_from(maxval).unwrap_or(u32::MAX),
        payload_at: pos + 1,
    })
}

fn payload(bytes: &[u8], expected_maxval: u32, bytes_per_pixel: usize) -> Result<(Header, &[u8]), PgmError> {
    let h = parse_header(bytes)?;
    if h.maxval != expected_maxval {
        return Err(PgmError::WrongMaxval {
            expected: expected_maxval,
            found: h.maxval,
        });
    }
    let data = &bytes[h.payload_at..];
    let expected = h.width * h.height * bytes_per_pixel;
    if data.len() != expected {
        return Err(PgmError::SizeMismatch {
            expected,
            found: data.len(),
        });
    }
    Ok((h, data))
}

pub fn decode_image(bytes: &[u8], id: u32) -> Result<Image, PgmError> {
    let (h, data) = payload(bytes, IMAGE_MAXVAL, 2)?;
    let pixels = data
        .chunks_exact(2)
        .map(|c| dequantize(u16::from_be_bytes([c[0], c[1]])))
        .collect();
    Ok(Image::new(id, h.height, h.width, pixels).expect("size checked"))
}

pub fn decode_label(bytes: &[u8]) -> Result<LabelMap, PgmError> {
    let (h, data) = payload(bytes, LABEL_MAXVAL, 1)?;
    Ok(LabelMap::new(h.height, h.width, data.to_vec()).expect("size checked"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_payload_size() {
        let img = Image::new(0, 64, 64, vec![0.5; 64 * 64]).unwrap();
        let bytes = encode_image(&img);
        let header = b"P5\n64 64\n65535\n".len();
        assert_eq!(bytes.len() - header, 8192);
    }

    #[test]
    fn background_label_is_zero_bytes() {
        let bytes = encode_label(&LabelMap::filled(4, 3, 0));
        assert_eq!(&bytes[..b"P5\n3 4\n255\n".len()], b"P5\n3 4\n255\n");
        assert!(bytes[b"P5\n3 4\n255\n".len()..].iter().all(|&b| b == 0));
        assert_eq!(decode_label(&bytes).unwrap(), LabelMap::filled(4, 3, 0));
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2]);
        assert_eq!(decode_label(&bytes).unwrap().data, vec![1, 2]);
    }

    #[test]
    fn errors_are_distinct() {
        let img = Image::new(0, 2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let bytes = encode_image(&img);
        assert!(matches!(decode_image(b"P6\n2 2\n65535\n", 0), Err(PgmError::MalformedHeader(_))));
        assert!(matches!(decode_image(b"P5\n2 x\n65535\n", 0), Err(PgmError::MalformedHeader(_))));
        assert_eq!(
            decode_label(&bytes).unwrap_err(),
            PgmError::WrongMaxval {
                expected: 255,
                found: 65535
            }
        );
        assert_eq!(
            decode_image(&bytes[..bytes.len() - 1], 0).unwrap_err(),
            PgmError::SizeMismatch { expected: 8, found: 7 }
        );
    }
}
