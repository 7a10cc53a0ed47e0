use std::fs;
use std::path::Path;

use super::RgbImage;
use crate::error::{Error, Result};

/// Loads a binary PPM (`P6`, maxval 255) or, by extension, a PNG file.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        return load_ppm_bytes(&bytes);
    }
    if bytes.starts_with(b"\x89PNG") {
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        return RgbImage::new(w as usize, h as usize, img.into_raw());
    }
    Err(Error::Codec(format!(
        "{}: unsupported image format (expected P6 PPM or PNG)",
        path.display()
    )))
}

/// Writes PPM unless the extension is `.png`.
pub fn save_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        to_png_bytes(img)?
    } else {
        to_ppm_bytes(img)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn to_png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        img.pixels(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Codec(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn to_ppm_bytes(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn load_ppm_bytes(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::Parse(format!(
            "expected P6 magic, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = parse_uint(next_token(bytes, &mut pos)?)?;
    let height = parse_uint(next_token(bytes, &mut pos)?)?;
    let maxval = parse_uint(next_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Codec(format!(
            "PPM maxval {maxval} unsupported; only 8-bit (255) images are handled"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Parse("missing whitespace after PPM header".into()));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Parse("PPM dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Parse(format!(
            "PPM raster has {} bytes, expected {need}",
            raster.len()
        )));
    }
    RgbImage::new(width, height, raster[..need].to_vec()).map_err(|e| Error::Parse(e.to_string()))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
        return Err(Error::Parse("truncated PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_uint(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::Parse(format!(
                "bad PPM header field {:?}",
                String::from_utf8_lossy(tok)
            ))
        })
}
