//! Binary PPM (P6) images and PGM (P5) masks, maxval 255.

use std::path::Path;

use crate::error::{GmsError, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    payload_start: usize,
}

fn parse_err(offset: usize, message: impl Into<String>) -> GmsError {
    GmsError::Parse {
        offset,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
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
            return Err(parse_err(start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| parse_err(start, format!("number {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(pos, "expected single whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(
            pos - 1,
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, "zero image dimension"));
    }
    Ok(Header {
        width,
        height,
        payload_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let expected = h.width * h.height * channels;
    let actual = bytes.len() - h.payload_start;
    if actual < expected {
        return Err(parse_err(
            h.payload_start,
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        ));
    }
    Ok(&bytes[h.payload_start..h.payload_start + expected])
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` image in `[0, 1]` from P6 bytes.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &h, 3)?;
    let plane = h.width * h.height;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h.height, h.width], out)
}

pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(GmsError::dim("image", "[3, H, W]", format!("{s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

/// Raw 8-bit `[H, W]` gray levels from P5 bytes.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &h, 1)?;
    Ok((h.height, h.width, data.to_vec()))
}

/// `[H, W]` gray map in `[0, 1]`, quantized to 8 bits.
pub fn encode_pgm(gray: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = gray.shape();
    if s.len() != 2 {
        return Err(GmsError::dim("gray map", "[H, W]", format!("{s:?}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(gray.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Binary mask from P5 bytes: 0 stays 0, 255 becomes 1, anything else is
/// rejected.
pub fn decode_mask(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (h, w, raw) = decode_pgm(bytes)?;
    let data = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            0 => Ok(0.0),
            255 => Ok(1.0),
            other => Err(GmsError::Validation(format!(
                "mask pixel {i} has value {other}, expected 0 or 255"
            ))),
        })
        .collect::<Result<Vec<f32>>>()?;
    Tensor::new(&[h, w], data)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| GmsError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| GmsError::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_ppm(&read(path.as_ref())?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    write(path.as_ref(), &encode_ppm(img)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_mask(&read(path.as_ref())?)
}

pub fn write_pgm(path: impl AsRef<Path>, gray: &Tensor<f32>) -> Result<()> {
    write(path.as_ref(), &encode_pgm(gray)?)
}
