//! Binary PGM (P5) and PPM (P6) with maxval 255.
//!
//! Samples map to `[0, 1]` by `v / 255` on read and back by
//! `floor(v * 255 + 0.5)` (clamped) on write.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// An 8-bit single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn put(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            Shape::new(1, self.height, self.width),
            self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        )
        .expect("non-empty image")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}

pub fn quantize(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.pos as u64, msg)
    }

    fn skip_space_and_comments(&mut self) -> Result<()> {
        let mut saw_space = false;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    saw_space = true;
                    self.pos += 1;
                }
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                    saw_space = true;
                }
                Some(_) if saw_space => return Ok(()),
                Some(_) => return Err(self.err("expected whitespace")),
                None => return Err(self.err("truncated header")),
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(start as u64, "number out of range"))
    }
}

/// Decodes P5 or P6 into a 1- or 3-feature tensor.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 {
        return Err(Error::format(0, "truncated magic"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        m => return Err(Error::format(0, format!("unsupported magic {:?}", String::from_utf8_lossy(m)))),
    };
    let mut c = Cursor { bytes, pos: 2 };
    c.skip_space_and_comments()?;
    let width = c.number()?;
    c.skip_space_and_comments()?;
    let height = c.number()?;
    c.skip_space_and_comments()?;
    let maxval_at = c.pos;
    let maxval = c.number()?;
    if maxval != 255 {
        return Err(Error::format(maxval_at as u64, format!("maxval {maxval} is not 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero image dimension"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected a single whitespace after maxval")),
    }
    let n = width * height * channels;
    let data = &bytes[c.pos..];
    if data.len() < n {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated raster: need {n} bytes, have {}", data.len()),
        ));
    }
    let plane = width * height;
    let mut out = Tensor::zeros(Shape::new(channels, height, width));
    let d = out.data_mut();
    for (i, &v) in data[..n].iter().enumerate() {
        d[(i % channels) * plane + i / channels] = v as f32 / 255.0;
    }
    Ok(out)
}

/// Encodes a 1-feature tensor as P5 or a 3-feature tensor as P6.
pub fn encode_pnm(img: &Tensor) -> Result<Vec<u8>> {
    let (magic, channels) = match img.features() {
        1 => ("P5", 1),
        3 => ("P6", 3),
        n => return Err(Error::dim(format!("cannot write {n}-channel image"))),
    };
    let (h, w) = (img.height(), img.width());
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(plane * channels);
    for i in 0..plane {
        for c in 0..channels {
            out.push(quantize(img.data()[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_image(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pnm(img)?)?;
    Ok(())
}
