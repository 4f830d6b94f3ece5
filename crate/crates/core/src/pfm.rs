//! Portable float map (PFM) reader and writer.
//!
//! Header: `PF` (3-channel) or `Pf` (grayscale), dimensions, then a scale
//! whose sign encodes endianness (negative = little-endian). Rows are stored
//! bottom-to-top; this module presents buffers top-down, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum PfmImage {
    Gray {
        width: usize,
        height: usize,
        data: Vec<f32>,
    },
    Rgb {
        width: usize,
        height: usize,
        data: Vec<[f32; 3]>,
    },
}

impl PfmImage {
    pub fn dimensions(&self) -> (usize, usize) {
        match self {
            PfmImage::Gray { width, height, .. } | PfmImage::Rgb { width, height, .. } => {
                (*width, *height)
            }
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PsError {
    PsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> PsError {
    PsError::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads one whitespace-delimited header token.
fn read_token(reader: &mut impl Read, path: &Path) -> Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte).map_err(|e| io_err(path, e))?;
        if n == 0 {
            return Err(parse_err(path, "unexpected end of PFM header"));
        }
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
    }
    String::from_utf8(token).map_err(|_| parse_err(path, "non-UTF8 PFM header"))
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);

    let magic = read_token(&mut reader, path)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(parse_err(path, format!("bad PFM magic {other:?}"))),
    };
    let width: usize = read_token(&mut reader, path)?
        .parse()
        .map_err(|_| parse_err(path, "bad PFM width"))?;
    let height: usize = read_token(&mut reader, path)?
        .parse()
        .map_err(|_| parse_err(path, "bad PFM height"))?;
    let scale: f64 = read_token(&mut reader, path)?
        .parse()
        .map_err(|_| parse_err(path, "bad PFM scale"))?;
    if width == 0 || height == 0 {
        return Err(parse_err(path, "zero PFM dimensions"));
    }
    let little_endian = scale < 0.0;

    let mut raw = vec![0u8; width * height * channels * 4];
    reader.read_exact(&mut raw).map_err(|e| io_err(path, e))?;
    let mut samples = Vec::with_capacity(width * height * channels);
    for chunk in raw.chunks_exact(4) {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        samples.push(v);
    }

    // flip bottom-to-top storage into top-down rows
    let row_len = width * channels;
    let mut flipped = vec![0.0f32; samples.len()];
    for row in 0..height {
        let src = (height - 1 - row) * row_len;
        flipped[row * row_len..(row + 1) * row_len].copy_from_slice(&samples[src..src + row_len]);
    }

    if channels == 1 {
        Ok(PfmImage::Gray {
            width,
            height,
            data: flipped,
        })
    } else {
        let data = flipped
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(PfmImage::Rgb {
            width,
            height,
            data,
        })
    }
}

fn write_header(
    writer: &mut impl Write,
    magic: &str,
    width: usize,
    height: usize,
    path: &Path,
) -> Result<()> {
    write!(writer, "{magic}\n{width} {height}\n-1.0\n").map_err(|e| io_err(path, e))
}

pub fn write_pfm_gray(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(PsError::Validation(format!(
            "PFM buffer has {} samples, expected {width}x{height}",
            data.len()
        )));
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    write_header(&mut writer, "Pf", width, height, path)?;
    for row in (0..height).rev() {
        for col in 0..width {
            writer
                .write_all(&data[row * width + col].to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
    }
    writer.flush().map_err(|e| io_err(path, e))
}

pub fn write_pfm_rgb(path: &Path, width: usize, height: usize, data: &[[f32; 3]]) -> Result<()> {
    if data.len() != width * height {
        return Err(PsError::Validation(format!(
            "PFM buffer has {} pixels, expected {width}x{height}",
            data.len()
        )));
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    write_header(&mut writer, "PF", width, height, path)?;
    for row in (0..height).rev() {
        for col in 0..width {
            for channel in data[row * width + col] {
                writer
                    .write_all(&channel.to_le_bytes())
                    .map_err(|e| io_err(path, e))?;
            }
        }
    }
    writer.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn gray_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        let data: Vec<f32> = (0..12).map(|i| (i as f32) * 0.125 - 0.5).collect();
        write_pfm_gray(&path, 4, 3, &data).unwrap();
        match read_pfm(&path).unwrap() {
            PfmImage::Gray {
                width,
                height,
                data: back,
            } => {
                assert_eq!((width, height), (4, 3));
                assert_eq!(back, data);
            }
            other => panic!("expected gray, got {other:?}"),
        }
    }

    #[test]
    fn rgb_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        let data: Vec<[f32; 3]> = (0..6)
            .map(|i| [i as f32, -(i as f32) * 0.5, 1.0 / (i as f32 + 1.0)])
            .collect();
        write_pfm_rgb(&path, 3, 2, &data).unwrap();
        match read_pfm(&path).unwrap() {
            PfmImage::Rgb { data: back, .. } => assert_eq!(back, data),
            other => panic!("expected rgb, got {other:?}"),
        }
    }

    #[test]
    fn reads_big_endian_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.25f32.to_be_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        match read_pfm(&path).unwrap() {
            PfmImage::Gray { data, .. } => assert_eq!(data, vec![0.25, -2.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_file_errors_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pfm");
        std::fs::write(&path, b"Pf\n4 4\n-1.0\nxx").unwrap();
        let err = read_pfm(&path).unwrap_err();
        assert!(err.to_string().contains("short.pfm"), "{err}");
    }

    #[test]
    fn bad_magic_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"P6\n1 1\n-1.0\n....").unwrap();
        assert!(matches!(read_pfm(&path), Err(PsError::Parse { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_property(values in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let width = values.len();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.pfm");
            write_pfm_gray(&path, width, 1, &values).unwrap();
            match read_pfm(&path).unwrap() {
                PfmImage::Gray { data, .. } => prop_assert_eq!(data, values),
                _ => prop_assert!(false),
            }
        }
    }
}
