//! Images and scalar maps, with binary PPM / PGM / PFM codecs.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// RGB image, rows top to bottom, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Single-channel map such as depth or opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::arg(
                "image",
                format!("{width}x{height} needs {} values, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image { width, height, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[3, H, W]` values remapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_signed_chw(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c] * 2.0 - 1.0;
            }
        }
        out
    }

    /// Inverse of [`Image::to_signed_chw`], clamping into `[0, 1]`.
    pub fn from_signed_chw(width: usize, height: usize, chw: &[f64]) -> Self {
        let hw = width * height;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = ((chw[c * hw + p] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Image { width, height, data }
    }

    /// ITU-R BT.601 luma.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::arg(
                "scalar map",
                format!("{width}x{height} needs {} values, got {}", width * height, data.len()),
            ));
        }
        Ok(ScalarMap { width, height, data })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_ppm(img))
}

pub fn encode_pgm(map: &ScalarMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.data.iter().map(|&v| quantize(v)));
    out
}

pub fn write_pgm(path: &Path, map: &ScalarMap) -> Result<()> {
    write_file(path, &encode_pgm(map))
}

/// Little-endian PFM (scale -1.0); rows are stored bottom to top.
pub fn encode_pfm(map: &ScalarMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    for row in (0..map.height).rev() {
        for v in &map.data[row * map.width..(row + 1) * map.width] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<()> {
    write_file(path, &encode_pfm(map))
}

/// Splits a netpbm-style header into `count` whitespace tokens and returns
/// them with the payload offset (one whitespace byte after the last token).
fn header_tokens(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(path, 1, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i + 1))
}

fn dims(tokens: &[String], path: &Path) -> Result<(usize, usize)> {
    let w = tokens[1].parse().map_err(|_| Error::parse(path, 1, "bad width"))?;
    let h = tokens[2].parse().map_err(|_| Error::parse(path, 1, "bad height"))?;
    Ok((w, h))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let (tok, off) = header_tokens(bytes, 4, path)?;
    if tok[0] != "P6" || tok[3] != "255" {
        return Err(Error::parse(path, 1, "expected binary P6 with maxval 255"));
    }
    let (w, h) = dims(&tok, path)?;
    let payload = bytes.get(off..off + w * h * 3).ok_or_else(|| Error::parse(path, 1, "truncated payload"))?;
    Image::new(w, h, payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_bytes(path)?, path)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<ScalarMap> {
    let (tok, off) = header_tokens(bytes, 4, path)?;
    if tok[0] != "P5" || tok[3] != "255" {
        return Err(Error::parse(path, 1, "expected binary P5 with maxval 255"));
    }
    let (w, h) = dims(&tok, path)?;
    let payload = bytes.get(off..off + w * h).ok_or_else(|| Error::parse(path, 1, "truncated payload"))?;
    ScalarMap::new(w, h, payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn read_pgm(path: &Path) -> Result<ScalarMap> {
    decode_pgm(&read_bytes(path)?, path)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<ScalarMap> {
    let (tok, off) = header_tokens(bytes, 4, path)?;
    if tok[0] != "Pf" {
        return Err(Error::parse(path, 1, "expected greyscale Pf"));
    }
    let (w, h) = dims(&tok, path)?;
    let scale: f64 = tok[3].parse().map_err(|_| Error::parse(path, 1, "bad scale"))?;
    let payload = bytes.get(off..off + w * h * 4).ok_or_else(|| Error::parse(path, 1, "truncated payload"))?;
    let vals: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            if scale < 0.0 {
                f32::from_le_bytes(b) as f64
            } else {
                f32::from_be_bytes(b) as f64
            }
        })
        .collect();
    let mut data = vec![0.0; w * h];
    for (i, row) in vals.chunks(w.max(1)).enumerate().take(h) {
        let dst = h - 1 - i;
        data[dst * w..(dst + 1) * w].copy_from_slice(row);
    }
    ScalarMap::new(w, h, data)
}

pub fn read_pfm(path: &Path) -> Result<ScalarMap> {
    decode_pfm(&read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_quantised() {
        let img = Image::new(2, 1, vec![0.0, 0.5, 1.0, 0.25, 0.75, 2.0]).unwrap();
        let back = decode_ppm(&encode_ppm(&img), Path::new("x")).unwrap();
        let expect = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0, 191.0 / 255.0, 1.0];
        for (a, b) in back.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let map = ScalarMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&map);
        let off = b"Pf\n2 2\n-1.0\n".len();
        assert_eq!(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 3.0);
        assert_eq!(decode_pfm(&bytes, Path::new("x")).unwrap(), map);
    }

    #[test]
    fn signed_layout_round_trip() {
        let img = Image::new(1, 2, vec![0.0, 0.5, 1.0, 1.0, 0.25, 0.0]).unwrap();
        let chw = img.to_signed_chw();
        assert_eq!(chw, vec![-1.0, 1.0, 0.0, -0.5, 1.0, -1.0]);
        assert_eq!(Image::from_signed_chw(1, 2, &chw), img);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let img = Image::filled(3, 3, [0.1, 0.2, 0.3]);
        let mut b = encode_ppm(&img);
        b.truncate(b.len() - 2);
        assert!(decode_ppm(&b, Path::new("x")).is_err());
    }
}
