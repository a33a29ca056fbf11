use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PpmError {
    #[error("not a binary PPM (expected `P6`)")]
    BadMagic,
    #[error("malformed PPM header: {0}")]
    Header(String),
    #[error("only maxval 255 is supported, found {0}")]
    MaxVal(u32),
    #[error("pixel data is {got} bytes, header promises {want}")]
    Truncated { got: usize, want: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(width, height, pixels))
}

/// Parses `P6 <w> <h> 255` followed by one whitespace byte and raw RGB.
/// `#` comments are allowed between header fields.
pub fn decode_ppm(bytes: &[u8]) -> Result<PpmImage, PpmError> {
    if !bytes.starts_with(b"P6") {
        return Err(PpmError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
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
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| PpmError::Header(format!("expected a number at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PpmError::Header("missing separator after maxval".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(PpmError::MaxVal(maxval));
    }
    if w == 0 || h == 0 {
        return Err(PpmError::Header(format!("zero dimension {w}x{h}")));
    }
    let want = w as usize * h as usize * 3;
    let data = &bytes[pos..];
    if data.len() != want {
        return Err(PpmError::Truncated { got: data.len(), want });
    }
    Ok(PpmImage { width: w as usize, height: h as usize, pixels: data.to_vec() })
}

pub fn read_ppm(path: &Path) -> Result<PpmImage, PpmError> {
    decode_ppm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let px: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 13).collect();
        let enc = encode_ppm(2, 3, &px);
        assert_eq!(decode_ppm(&enc).unwrap(), PpmImage { width: 2, height: 3, pixels: px.clone() });
        let mut commented = b"P6\n# made by hand\n2 3\n255\n".to_vec();
        commented.extend_from_slice(&px);
        assert_eq!(decode_ppm(&commented).unwrap().pixels, px);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n123"), Err(PpmError::BadMagic)));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(PpmError::MaxVal(65535))));
        assert!(matches!(decode_ppm(b"P6\n2 1\n255\n\0\0\0"), Err(PpmError::Truncated { got: 3, want: 6 })));
        assert!(matches!(decode_ppm(b"P6\nx 1\n255\n"), Err(PpmError::Header(_))));
    }
}
