//! Binary PPM (P6) and PGM (P5) files with 8-bit samples.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::Path;

use image::codecs::pnm::PnmDecoder;
use image::{ColorType, ImageDecoder};

use crate::error::{Error, Result};

/// An 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn encode(r: &Raster, comment: Option<&str>) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n").into_bytes();
    if let Some(c) = comment {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{} {}\n255\n", r.width, r.height).as_bytes());
    out.extend_from_slice(&r.data);
    out
}

/// Writes `r` as P6 (3 channels) or P5 (1 channel), with optional header
/// comment lines.
pub fn write(path: impl AsRef<Path>, r: &Raster, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    assert!(r.channels == 1 || r.channels == 3);
    assert_eq!(r.data.len(), r.width * r.height * r.channels);
    fs::write(path, encode(r, comment)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dec = PnmDecoder::new(BufReader::new(Cursor::new(bytes)))
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = dec.dimensions();
    let channels = match dec.color_type() {
        ColorType::L8 => 1,
        ColorType::Rgb8 => 3,
        other => return Err(Error::format(path, format!("unsupported pixel type {other:?}"))),
    };
    let mut data = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Raster {
        width: w as usize,
        height: h as usize,
        channels,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Raster {
            width: 3,
            height: 2,
            channels: 3,
            data: (0..18).collect(),
        };
        let p = dir.path().join("a.ppm");
        write(&p, &rgb, Some("gain 10")).unwrap();
        assert_eq!(read(&p).unwrap(), rgb);

        let gray = Raster {
            width: 2,
            height: 2,
            channels: 1,
            data: vec![0, 7, 200, 255],
        };
        let p = dir.path().join("b.pgm");
        write(&p, &gray, None).unwrap();
        assert_eq!(read(&p).unwrap(), gray);
    }

    #[test]
    fn garbage_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        fs::write(&p, b"P9 nope").unwrap();
        assert!(matches!(read(&p), Err(Error::Format { .. })));
    }
}
