use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Image, Result};

/// Write a binary PPM (P6, maxval 255). Interleaved RGB rows; pixel values
/// are rounded from the internal f32 planes.
pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(img.width() * img.height() * 3 + 32);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", img.width(), img.height()).as_bytes());
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                let v = (img.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
                buf.push(v);
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;

    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::MalformedPpm("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P6" {
        return Err(DataError::MalformedPpm("expected P6 magic".into()));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| DataError::MalformedPpm("bad width".into()))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| DataError::MalformedPpm("bad height".into()))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| DataError::MalformedPpm("bad maxval".into()))?;
    if maxval != 255 {
        return Err(DataError::MalformedPpm(format!(
            "only maxval 255 supported, got {maxval}"
        )));
    }
    pos += 1; // single whitespace after maxval
    let needed = width * height * 3;
    if bytes.len() < pos + needed {
        return Err(DataError::MalformedPpm("truncated pixel data".into()));
    }

    let mut img = Image::zeros(width, height);
    let mut i = pos;
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                img.set(c, y, x, bytes[i] as f32 / 255.0);
                i += 1;
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, GeneratorFamily};

    #[test]
    fn roundtrip_within_quantization() {
        let dir = std::env::temp_dir().join("vlmdet_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sample.ppm");
        let img = generate_sample(GeneratorFamily::GanLike, 2, 99, 16).image;
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.width(), 16);
        for (&a, &b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join("vlmdet_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ppm");
        std::fs::write(&path, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(read_ppm(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
