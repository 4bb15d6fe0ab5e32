//! Binary PPM (`P6`) and PGM (`P5`) images with 8-bit samples.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB; gray inputs are expanded on read.
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut fields = vec![];
    let mut i = 0;
    while fields.len() < count {
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
        ensure!(i > start, "truncated image header");
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the samples
    ensure!(i < bytes.len(), "image has no pixel data");
    Ok((fields, i + 1))
}

pub fn parse(bytes: &[u8]) -> Result<Image> {
    let (fields, start) = header_fields(bytes, 4)?;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => bail!("unsupported image type {other:?}; expected binary PPM (P6) or PGM (P5)"),
    };
    let num = |s: &str| s.parse::<usize>().with_context(|| format!("bad header number {s:?}"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    ensure!(width > 0 && height > 0, "empty image");
    ensure!((1..=255).contains(&maxval), "only 8-bit images are supported (maxval {maxval})");
    let n = width * height * channels;
    let data = bytes.get(start..start + n).context("truncated pixel data")?;
    let scale = |v: u8| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8;
    let rgb = if channels == 3 {
        data.iter().map(|&v| scale(v)).collect()
    } else {
        data.iter().flat_map(|&v| [scale(v); 3]).collect()
    };
    Ok(Image { width, height, rgb })
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).with_context(|| format!("reading image {}", path.display()))?;
    parse(&bytes).with_context(|| format!("decoding image {}", path.display()))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}
