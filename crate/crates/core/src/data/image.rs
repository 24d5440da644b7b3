//! 8-bit images and the portable pixmap formats (binary PGM `P5` / PPM `P6`,
//! plain `P2` / `P3` on input).

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn put(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Writes `rgb` (gray images take the first component), ignoring out-of-bounds pixels.
    pub fn plot(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        for c in 0..self.channels {
            self.put(x as usize, y as usize, c, rgb[c.min(2)]);
        }
    }

    /// Three-channel copy (gray is replicated).
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image { width: self.width, height: self.height, channels: 3, data }
    }

    /// Bilinear sample at pixel-centre coordinates `(x, y)`; outside the image reads `fill`.
    pub fn sample(&self, x: f64, y: f64, c: usize, fill: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = (x - x0, y - y0);
        let px = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                fill
            } else {
                f64::from(self.get(xi as usize, yi as usize, c))
            }
        };
        let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1.0, y0) * fx;
        let bottom = px(x0, y0 + 1.0) * (1.0 - fx) + px(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Binary PGM for one channel, PPM for three.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let (channels, binary) = match magic.as_str() {
            "P2" => (1, false),
            "P3" => (3, false),
            "P5" => (1, true),
            "P6" => (3, true),
            m => return Err(Error::Image(format!("unsupported image magic {m:?}; convert to PPM/PGM first"))),
        };
        let width = parse_num(&next_token(bytes, &mut pos)?)?;
        let height = parse_num(&next_token(bytes, &mut pos)?)?;
        let maxval = parse_num(&next_token(bytes, &mut pos)?)?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
            return Err(Error::Image(format!("unsupported header {width}x{height} maxval {maxval}")));
        }
        let n = width * height * channels;
        let scale = |v: usize| ((v * 255 + maxval / 2) / maxval) as u8;
        let data = if binary {
            pos += 1;
            let body = bytes.get(pos..pos + n).ok_or_else(|| Error::Image("truncated pixel data".into()))?;
            body.iter().map(|&v| scale(usize::from(v).min(maxval))).collect()
        } else {
            (0..n)
                .map(|_| Ok(scale(parse_num(&next_token(bytes, &mut pos)?)?.min(maxval))))
                .collect::<Result<Vec<u8>>>()?
        };
        Ok(Self { width, height, channels, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Image(format!("cannot read {}: {e}", path.display())))?;
        Self::from_pnm(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pnm())?;
        Ok(())
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_num(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Image(format!("expected a number, got {s:?}")))
}
