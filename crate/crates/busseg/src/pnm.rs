//! Binary netpbm images: P6 (RGB) and P5 (grey), 8-bit only.
//!
//! Writers emit the minimal header `P6\n<width> <height>\n255\n` (or `P5`)
//! followed by raw samples in row-major order. Readers accept any header
//! whitespace and `#` comments, and require a maxval of 255.

use busseg_core::{ImageTensor, LabelMap};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PnmError {
    #[error("bad magic number, expected {expected}")]
    Magic { expected: &'static str },
    #[error("malformed header: {0}")]
    Header(&'static str),
    #[error("unsupported maxval {0}, only 255 is supported")]
    Maxval(u32),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after pixel data")]
    Trailing(usize),
}

/// Decoded header plus the offset where the samples start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &'static str) -> Result<Header, PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(PnmError::Magic { expected: magic });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // Whitespace and comments may appear between any two header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(PnmError::Header("unexpected end of header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::Header("expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(PnmError::Header("number out of range"))?;
    }
    // Exactly one whitespace byte separates the maxval from the samples.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PnmError::Header("missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PnmError::Maxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(PnmError::Header("zero image dimension"));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        data_start: pos + 1,
    })
}

fn samples<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8], PnmError> {
    let expected = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(PnmError::Header("image too large"))?;
    let data = &bytes[header.data_start..];
    if data.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            found: data.len(),
        });
    }
    if data.len() > expected {
        return Err(PnmError::Trailing(data.len() - expected));
    }
    Ok(data)
}

fn encode(magic: &str, width: usize, height: usize, data: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend(data);
    out
}

/// Maps `[0, 1]` to the nearest 8-bit level.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &ImageTensor) -> Vec<u8> {
    let (h, w) = image.dims();
    encode("P6", w, h, image.data().iter().map(|&v| to_byte(v)))
}

/// Raw RGB bytes as a P6 image.
pub fn encode_rgb(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    encode("P6", width, height, rgb.iter().copied())
}

/// Decodes a P6 image into `[0, 1]` values of the form `k / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor, PnmError> {
    let header = parse_header(bytes, "P6")?;
    let data = samples(bytes, &header, 3)?;
    let values = data.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ImageTensor::new(header.height, header.width, values).expect("sample count checked"))
}

pub fn encode_pgm(label: &LabelMap) -> Vec<u8> {
    let (h, w) = label.dims();
    encode("P5", w, h, label.data().iter().copied())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap, PnmError> {
    let header = parse_header(bytes, "P5")?;
    let data = samples(bytes, &header, 1)?;
    Ok(LabelMap::new(header.height, header.width, data.to_vec()).expect("sample count checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_minimal() {
        let img = ImageTensor::new(1, 2, vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.2]).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 0, 51]);
        let lab = LabelMap::new(2, 1, vec![3, 255]).unwrap();
        assert_eq!(encode_pgm(&lab), b"P5\n1 2\n255\n\x03\xff");
    }

    #[test]
    fn reader_accepts_comments_and_loose_whitespace() {
        let bytes = b"P5 # grey\n  2\t1 # dims\n255\n\x07\x09";
        let lab = decode_pgm(bytes).unwrap();
        assert_eq!(lab.dims(), (1, 2));
        assert_eq!(lab.data(), &[7, 9]);
    }

    #[test]
    fn reader_rejects_bad_inputs() {
        assert_eq!(decode_pgm(b"P6\n1 1\n255\n\0\0\0"), Err(PnmError::Magic { expected: "P5" }));
        assert_eq!(decode_pgm(b"P5\n1 1\n65535\n\0\0"), Err(PnmError::Maxval(65535)));
        assert_eq!(
            decode_ppm(b"P6\n2 1\n255\n\0\0\0"),
            Err(PnmError::Truncated { expected: 6, found: 3 })
        );
        assert_eq!(decode_pgm(b"P5\n1 1\n255\n\0\0"), Err(PnmError::Trailing(1)));
        assert!(matches!(decode_pgm(b"P5\n0 1\n255\n"), Err(PnmError::Header(_))));
        assert!(matches!(decode_pgm(b"P5\n1"), Err(PnmError::Header(_))));
    }

    proptest! {
        #[test]
        fn quantized_images_round_trip_exactly(
            (h, w, bytes) in (1usize..6, 1usize..6)
                .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(any::<u8>(), h * w * 3)))
        ) {
            let values = bytes.iter().map(|&b| b as f64 / 255.0).collect();
            let img = ImageTensor::new(h, w, values).unwrap();
            let encoded = encode_ppm(&img);
            prop_assert_eq!(&encoded[encoded.len() - bytes.len()..], &bytes[..]);
            prop_assert_eq!(decode_ppm(&encoded).unwrap(), img);
        }

        #[test]
        fn labels_round_trip_exactly(
            (h, w, data) in (1usize..8, 1usize..8)
                .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(any::<u8>(), h * w)))
        ) {
            let lab = LabelMap::new(h, w, data).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&lab)).unwrap(), lab);
        }
    }
}
