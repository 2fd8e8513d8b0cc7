//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Nearest-neighbour resize, used to bring proxy images to the video
    /// grid.
    pub fn resize_nearest(&self, width: usize, height: usize) -> RgbImage {
        let mut out = RgbImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let sx = x * self.width / width;
                let sy = y * self.height / height;
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pnm {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl Pnm {
    pub fn into_rgb(self) -> RgbImage {
        match self {
            Pnm::Rgb(img) => img,
            Pnm::Gray(g) => RgbImage {
                width: g.width,
                height: g.height,
                data: g.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
        }
    }
}

const MAX_DIM: usize = 1 << 14;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
            if self.pos - start > 9 {
                return Err(Error::malformed("pnm", format!("{what} too large")));
            }
        }
        if start == self.pos {
            return Err(Error::malformed("pnm", format!("missing {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        Ok(s.parse().expect("bounded digit string"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::malformed("pnm", "missing magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        other => return Err(Error::malformed("pnm", format!("unsupported type P{}", other as char))),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::malformed("pnm", format!("bad dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::malformed("pnm", format!("only 8-bit maxval 255 supported, got {maxval}")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::malformed("pnm", "missing separator before raster"));
    }
    let start = h.pos + 1;
    let len = width * height * channels;
    let data = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::malformed("pnm", "truncated raster"))?
        .to_vec();
    Ok(if channels == 1 {
        Pnm::Gray(GrayImage { width, height, data })
    } else {
        Pnm::Rgb(RgbImage { width, height, data })
    })
}

pub fn load(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
