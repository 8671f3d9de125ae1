//! Minimal image containers plus binary PPM/PGM readers and writers.
//! Values are held as f64 in [0, 1]; files are 8-bit except the 16-bit
//! depth PGM variant.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        ImageRgb { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn from_flat(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width * height);
        ImageRgb { width, height, data }
    }

    /// Block-average downscale by an integer factor.
    pub fn downscale(&self, factor: usize) -> ImageRgb {
        if factor <= 1 {
            return self.clone();
        }
        let w = self.width / factor;
        let h = self.height / factor;
        let mut out = ImageRgb::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.data[(y * factor + dy) * self.width + x * factor + dx];
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                let n = (factor * factor) as f64;
                out.data[y * w + x] = [acc[0] / n, acc[1] / n, acc[2] / n];
            }
        }
        out
    }
}

impl ImageGray {
    pub fn new(width: usize, height: usize) -> Self {
        ImageGray { width, height, data: vec![0.0; width * height] }
    }

    pub fn downscale(&self, factor: usize) -> ImageGray {
        if factor <= 1 {
            return self.clone();
        }
        let w = self.width / factor;
        let h = self.height / factor;
        let mut out = ImageGray::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += self.data[(y * factor + dy) * self.width + x * factor + dx];
                    }
                }
                out.data[y * w + x] = acc / (factor * factor) as f64;
            }
        }
        out
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a flat color buffer (e.g. a render output) as PPM.
pub fn write_ppm_from_flat(path: &Path, width: usize, height: usize, data: &[[f64; 3]]) -> Result<()> {
    assert_eq!(data.len(), width * height);
    let img = ImageRgb { width, height, data: data.to_vec() };
    write_ppm(path, &img)
}

pub fn write_ppm(path: &Path, img: &ImageRgb) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + img.data.len() * 3);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    for px in &img.data {
        buf.push(quantize(px[0]));
        buf.push(quantize(px[1]));
        buf.push(quantize(px[2]));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &ImageGray) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + img.data.len());
    buf.extend_from_slice(format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    for &v in &img.data {
        buf.push(quantize(v));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// 16-bit PGM (most significant byte first, per the netpbm convention).
/// Values are meters scaled by `scale` and clamped to the u16 range.
pub fn write_pgm16(path: &Path, img: &ImageGray, scale: f64) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + img.data.len() * 2);
    buf.extend_from_slice(format!("P5\n{} {}\n65535\n", img.width, img.height).as_bytes());
    for &v in &img.data {
        let q = (v * scale).clamp(0.0, 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct PnmHeader {
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_pnm_header(path: &Path, bytes: &[u8], magic: &str) -> Result<PnmHeader> {
    let bad = |reason: &str| Error::parse(path, reason);
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(bad(&format!("expected {magic} magic")));
    }
    // Three whitespace-separated fields after the magic, '#' comments allowed.
    let mut fields = Vec::new();
    let mut i = 2;
    while fields.len() < 3 && i < bytes.len() {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            break;
        }
        let text = std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-utf8 header"))?;
        fields.push(text.parse::<usize>().map_err(|_| bad("bad header field"))?);
    }
    if fields.len() != 3 {
        return Err(bad("truncated header"));
    }
    // Exactly one whitespace byte separates header and data.
    i += 1;
    Ok(PnmHeader { width: fields[0], height: fields[1], maxval: fields[2], data_offset: i })
}

pub fn read_ppm(path: &Path) -> Result<ImageRgb> {
    let bytes = read_file(path)?;
    let h = parse_pnm_header(path, &bytes, "P6")?;
    if h.maxval != 255 {
        return Err(Error::parse(path, "only 8-bit PPM supported"));
    }
    let need = h.width * h.height * 3;
    let data = &bytes[h.data_offset..];
    if data.len() < need {
        return Err(Error::parse(path, "truncated pixel data"));
    }
    let pixels = data[..need]
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Ok(ImageRgb { width: h.width, height: h.height, data: pixels })
}

pub fn read_pgm(path: &Path) -> Result<ImageGray> {
    let bytes = read_file(path)?;
    let h = parse_pnm_header(path, &bytes, "P5")?;
    let data = &bytes[h.data_offset..];
    let (need, values): (usize, Vec<f64>) = match h.maxval {
        255 => {
            let need = h.width * h.height;
            if data.len() < need {
                return Err(Error::parse(path, "truncated pixel data"));
            }
            (need, data[..need].iter().map(|&b| b as f64 / 255.0).collect())
        }
        65535 => {
            let need = h.width * h.height * 2;
            if data.len() < need {
                return Err(Error::parse(path, "truncated pixel data"));
            }
            (
                need,
                data[..need]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
                    .collect(),
            )
        }
        other => return Err(Error::parse(path, format!("unsupported maxval {other}"))),
    };
    let _ = need;
    Ok(ImageGray { width: h.width, height: h.height, data: values })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Writes with a buffered writer; helper shared by the text formats.
pub(crate) fn write_text(path: &Path, content: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(content.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageRgb::new(5, 3);
        for (i, p) in img.data.iter_mut().enumerate() {
            *p = [i as f64 / 14.0, 1.0 - i as f64 / 14.0, 0.5];
        }
        let p1 = dir.path().join("a.ppm");
        let p2 = dir.path().join("b.ppm");
        write_ppm(&p1, &img).unwrap();
        let loaded = read_ppm(&p1).unwrap();
        write_ppm(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageGray::new(4, 4);
        for (i, p) in img.data.iter_mut().enumerate() {
            *p = (i % 2) as f64;
        }
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &img).unwrap();
        let loaded = read_pgm(&p).unwrap();
        assert_eq!(loaded.data, img.data);
    }

    #[test]
    fn pgm16_depth() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageGray::new(2, 2);
        img.data = vec![0.0, 0.5, 1.0, 2.0];
        let p = dir.path().join("d.pgm");
        write_pgm16(&p, &img, 10000.0).unwrap();
        let loaded = read_pgm(&p).unwrap();
        // 0.5m -> 5000/65535.
        assert!((loaded.data[1] - 5000.0 / 65535.0).abs() < 1e-9);
    }

    #[test]
    fn missing_file_is_reported() {
        let r = read_ppm(Path::new("/nonexistent/q.ppm"));
        assert!(matches!(r, Err(Error::MissingFile { .. })));
    }
}
