//! Bit-exact file I/O.
//!
//! Two formats are supported:
//! - binary PGM (`P5`), maxval 255 or 65535 (16-bit words big-endian per
//!   the PGM convention), rescaled to `[0, 1]` on load;
//! - a raw tensor format: 8-byte magic `CTXTENS1`, little-endian `u32`
//!   rank, `u32` dims, then little-endian `f32` payload. Lossless for
//!   `f32`-representable values and trivially parseable from any language.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Image;

pub const TENSOR_MAGIC: &[u8; 8] = b"CTXTENS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Raw tensor format, lossless.
    RawTensor,
    /// 8-bit binary PGM.
    Pgm8,
    /// 16-bit binary PGM, big-endian words.
    Pgm16,
}

impl ImageFormat {
    /// Pick a format from a file extension; `.pgm` defaults to 16-bit.
    pub fn from_path(path: &Path) -> ImageFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => ImageFormat::Pgm16,
            _ => ImageFormat::RawTensor,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn header_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::MalformedHeader { path: path.to_path_buf(), detail: detail.into() }
}

/// Encode an image as raw tensor bytes (rank 2, dims = [height, width]).
pub fn tensor_to_bytes(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.len() + 8);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decode raw tensor bytes. Rank 1 tensors come back as 1xN images.
pub fn tensor_from_bytes(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(header_err(path, "missing CTXTENS1 magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rank == 0 || rank > 2 {
        return Err(header_err(path, format!("unsupported rank {rank}")));
    }
    if bytes.len() < 12 + 4 * rank {
        return Err(header_err(path, "truncated dims"));
    }
    let mut dims = [1usize; 2];
    for (i, d) in dims.iter_mut().rev().take(rank).rev().enumerate() {
        let off = 12 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let (height, width) = if rank == 1 { (1, dims[1]) } else { (dims[0], dims[1]) };
    let expected = height
        .checked_mul(width)
        .ok_or_else(|| header_err(path, "dimension overflow"))?;
    let payload = &bytes[12 + 4 * rank..];
    let found = payload.len() / 4;
    if !payload.len().is_multiple_of(4) || found != expected {
        return Err(Error::DimensionMismatch { expected, found });
    }
    let mut data = Vec::with_capacity(expected);
    for (index, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
        data.push(v);
    }
    Image::new(height, width, data)
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    // Header tokens separated by whitespace; '#' starts a comment to EOL.
    let mut pos = 2; // past "P5"
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(header_err(path, "truncated PGM header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| header_err(path, "non-ascii PGM header"))?;
        let val: usize = tok
            .parse()
            .map_err(|_| header_err(path, format!("bad header token '{tok}'")))?;
        tokens.push(val);
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(header_err(path, "missing separator before payload"));
    }
    pos += 1;
    let (width, height, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 && maxval != 65535 {
        return Err(header_err(path, format!("unsupported maxval {maxval}")));
    }
    let npix = width
        .checked_mul(height)
        .ok_or_else(|| header_err(path, "dimension overflow"))?;
    let bytes_per = if maxval == 255 { 1 } else { 2 };
    let payload = &bytes[pos..];
    if payload.len() != npix * bytes_per {
        return Err(Error::DimensionMismatch {
            expected: npix,
            found: payload.len() / bytes_per,
        });
    }
    let scale = 1.0 / maxval as f64;
    let data: Vec<f64> = if maxval == 255 {
        payload.iter().map(|&b| b as f64 * scale).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    };
    Image::new(height, width, data)
}

/// Load a canonical image. The format is sniffed from the file contents,
/// not the extension. Intensities are rescaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut img = if bytes.starts_with(b"P5") {
        parse_pgm(&bytes, path)?
    } else if bytes.starts_with(TENSOR_MAGIC) {
        tensor_from_bytes(&bytes, path)?
    } else {
        return Err(header_err(path, "unrecognized format (need P5 or CTXTENS1)"));
    };
    img.clamp01();
    Ok(img)
}

/// Save a canonical image. PGM words are round-half-up quantized.
pub fn save_image(img: &Image, path: &Path, format: ImageFormat) -> Result<()> {
    debug_assert!(img.is_canonical(), "save_image expects a canonical image");
    let bytes = match format {
        ImageFormat::RawTensor => tensor_to_bytes(img),
        ImageFormat::Pgm8 | ImageFormat::Pgm16 => {
            let maxval: u32 = if format == ImageFormat::Pgm8 { 255 } else { 65535 };
            let mut out =
                format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
            for &v in img.data() {
                let word = (v * maxval as f64 + 0.5).floor() as u32;
                let word = word.min(maxval);
                if maxval == 255 {
                    out.push(word as u8);
                } else {
                    out.extend_from_slice(&(word as u16).to_be_bytes());
                }
            }
            out
        }
    };
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("dact-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pgm8_load_rescales() {
        let path = tmpfile("a.pgm");
        fs::write(&path, [b"P5\n2 2\n255\n".as_ref(), &[0, 255, 128, 64]].concat()).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.height(), 2);
        assert_eq!(img.width(), 2);
        let want = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, b) in img.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_tensor_identity() {
        let path = tmpfile("b.ctx");
        let img = Image::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        save_image(&img, &path, ImageFormat::RawTensor).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn payload_shorter_than_header_is_dimension_mismatch() {
        let path = tmpfile("c.pgm");
        fs::write(&path, [b"P5\n2 2\n255\n".as_ref(), &[0, 1, 2]].concat()).unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 4, found: 3 }));
    }

    #[test]
    fn raw_roundtrip_is_bit_identical() {
        // Values quantized to f32 so the 32-bit payload is lossless.
        let mut rng = Rng::new(5);
        let img = Image::from_fn(8, 8, |_, _| rng.next_f64() as f32 as f64);
        let path = tmpfile("d.ctx");
        save_image(&img, &path, ImageFormat::RawTensor).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn pgm16_rounding() {
        let path = tmpfile("e.pgm");
        let img = Image::new(1, 2, vec![0.5, 1.0]).unwrap();
        save_image(&img, &path, ImageFormat::Pgm16).unwrap();
        let bytes = fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 4..];
        // 0.5 * 65535 = 32767.5 rounds half-up to 32768; 1.0 hits the endpoint.
        assert_eq!(u16::from_be_bytes([payload[0], payload[1]]), 32768);
        assert_eq!(u16::from_be_bytes([payload[2], payload[3]]), 65535);
    }

    #[test]
    fn pgm_roundtrip_within_half_lsb() {
        let mut rng = Rng::new(9);
        let img = Image::from_fn(8, 8, |_, _| rng.next_f64());
        for (fmt, maxval) in [(ImageFormat::Pgm8, 255.0), (ImageFormat::Pgm16, 65535.0)] {
            let path = tmpfile("f.pgm");
            save_image(&img, &path, fmt).unwrap();
            let back = load_image(&path).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 0.5 / maxval + 1e-12);
            }
        }
    }

    #[test]
    fn unrecognized_magic_errors() {
        let path = tmpfile("g.bin");
        fs::write(&path, b"NOTAFORMAT").unwrap();
        assert!(matches!(load_image(&path).unwrap_err(), Error::MalformedHeader { .. }));
    }
}
