//! Binary PPM (P6) / PGM (P5) codecs, bilinear resize and [0, 1] scaling.
//!
//! Images are `[H, W, 3]` tensors of raw 0..=255 values in R, G, B order;
//! grayscale input is replicated across the three channels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 {
        return Err("file too short for a header".into());
    }
    let magic = [bytes[0], bytes[1]];
    if &magic != b"P5" && &magic != b"P6" {
        return Err(format!(
            "unsupported magic {:?} (expected P5 or P6)",
            String::from_utf8_lossy(&magic)
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header field out of range")?;
    }
    // exactly one whitespace byte precedes the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} is not an 8-bit depth"));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_offset: pos + 1,
    })
}

/// Decodes P5/P6 bytes into a raw `[H, W, 3]` tensor.
pub fn decode_pnm<F: Scalar>(bytes: &[u8]) -> std::result::Result<Tensor<F>, String> {
    let h = parse_header(bytes)?;
    let channels = if &h.magic == b"P6" { 3 } else { 1 };
    let needed = h.width * h.height * channels;
    let raster = &bytes[h.data_offset.min(bytes.len())..];
    if raster.len() < needed {
        return Err(format!(
            "truncated payload: {} of {needed} bytes",
            raster.len()
        ));
    }
    let scale = 255.0 / h.maxval as f64;
    let level = |b: u8| F::from_f64(if h.maxval == 255 { b as f64 } else { (b as f64 * scale).round() });
    let mut data = Vec::with_capacity(h.width * h.height * 3);
    if channels == 3 {
        data.extend(raster[..needed].iter().map(|&b| level(b)));
    } else {
        for &b in &raster[..needed] {
            let v = level(b);
            data.extend([v, v, v]);
        }
    }
    Tensor::from_vec(&[h.height, h.width, 3], data).map_err(|e| e.to_string())
}

/// Reads a PPM (P6) or PGM (P5) file into raw 0..=255 values.
pub fn load_image<F: Scalar>(path: &Path) -> Result<Tensor<F>> {
    let bytes = fs::read(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_pnm(&bytes).map_err(|reason| Error::Image {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "PGM raster size mismatch");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "PPM raster size mismatch");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    fs::write(path, encode_ppm(width, height, rgb)).map_err(|e| Error::io(path, e))
}

/// Bilinear resize of an `[H, W, C]` image using half-pixel centres:
/// `src = (dst + 0.5) * in / out - 0.5`, clamped to the edge pixels.
pub fn resize_bilinear<F: Scalar>(img: &Tensor<F>, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    let (h, w, c) = match *img.shape() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::size(format!("expected [H, W, C], got {:?}", img.shape()))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::size(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    let src = img.data();
    let at = |y: usize, x: usize, ch: usize| src[(y * w + x) * c + ch].as_f64();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                let bottom = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                out.push(F::from_f64(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::from_vec(&[out_h, out_w, c], out)
}

/// Scales raw 0..=255 pixel values into [0, 1] by exact division.
pub fn normalize<F: Scalar>(img: &Tensor<F>) -> Tensor<F> {
    let denom = F::from_f64(255.0);
    img.map(|v| v / denom)
}

/// Loads, resizes and scales one image into `[H, W, 3]` values in [0, 1].
pub fn preprocess<F: Scalar>(path: &Path, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    let raw = load_image(path)?;
    Ok(normalize(&resize_bilinear(&raw, out_h, out_w)?))
}
