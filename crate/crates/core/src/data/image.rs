//! 8-bit RGB images: PNG and binary PPM (P6) decode, PPM and PNG encode.

use std::io::{BufReader, Cursor};
use std::path::Path;

use scb_tensor::Tensor;

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB pixels, row major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        RgbImage { width, height, data: fill.repeat(width * height) }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[3, H, W]` tensor of `byte / 255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn([3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            self.data[p * 3 + c] as f32 / 255.0
        })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("in-memory png header");
            w.write_image_data(&self.data).expect("in-memory png data");
        }
        out
    }
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), message: message.into() }
}

/// Decodes a binary PPM (`P6`, maxval 255, `#` comments allowed in the header).
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, "truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad(path, "PPM header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad(path, format!("unsupported PPM magic `{}` (only binary P6)", fields[0])));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(path, format!("PPM {what} `{s}` is not a number")));
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(bad(path, format!("unsupported PPM maxval {maxval} (only 8-bit, 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    let have = bytes.len().saturating_sub(pos);
    if have < need {
        return Err(bad(path, format!("truncated PPM raster: expected {need} bytes, found {have}")));
    }
    Ok(RgbImage { width: w, height: h, data: bytes[pos..pos + need].to_vec() })
}

/// Decodes an 8-bit RGB PNG; any other colour type or bit depth is rejected.
pub fn parse_png(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let mut dec = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| bad(path, format!("PNG decode: {e}")))?;
    let info = reader.info();
    let (ct, depth) = (info.color_type, info.bit_depth);
    if ct != png::ColorType::Rgb || depth != png::BitDepth::Eight {
        return Err(bad(path, format!("unsupported PNG format {ct:?} at {depth:?} bits (only 8-bit RGB)")));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad(path, "PNG too large"))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| bad(path, format!("PNG decode: {e}")))?;
    buf.truncate(frame.buffer_size());
    if frame.line_size != w * 3 {
        return Err(bad(path, "unexpected PNG row layout"));
    }
    Ok(RgbImage { width: w, height: h, data: buf })
}

/// Reads a PNG or PPM file, chosen by its leading bytes.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        parse_png(&bytes, path)
    } else if bytes.starts_with(b"P") {
        parse_ppm(&bytes, path)
    } else {
        Err(bad(path, "unrecognised image format (expected PNG or binary PPM)"))
    }
}

/// `[3, H, W]` tensor with values `byte / 255`.
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(read_image(path)?.to_tensor())
}
