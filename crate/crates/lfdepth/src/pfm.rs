//! Portable float map reader/writer.
//!
//! Header: `Pf` (one channel) or `PF` (three channels), then width, height,
//! then a non-zero scale whose sign encodes endianness (negative = little).
//! Rows are stored bottom-up. In memory row 0 is the top row; the writer
//! emits little-endian with scale -1.0 and a write/read round trip is
//! bitwise for finite single-precision data.

use std::io::Write;
use std::path::Path;

use crate::error::{LfError, Result};
use crate::lightfield::DisparityMap;

/// A float image in top-down row-major `(y, x, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn from_disparity(map: &DisparityMap) -> Self {
        PfmImage {
            width: map.width,
            height: map.height,
            channels: 1,
            data: map.values.clone(),
        }
    }

    /// Interpret a one-channel image as a disparity map; non-finite entries
    /// are masked out.
    pub fn into_disparity(self) -> Result<DisparityMap> {
        if self.channels != 1 {
            return Err(LfError::Argument(format!(
                "disparity maps are one-channel, file has {}",
                self.channels
            )));
        }
        let mask = self.data.iter().map(|v| v.is_finite()).collect();
        Ok(DisparityMap { height: self.height, width: self.width, values: self.data, mask })
    }
}

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn err(&self, message: impl Into<String>) -> LfError {
        LfError::Parse { offset: self.pos as u64, message: message.into() }
    }

    /// Next whitespace-delimited ASCII token.
    fn token(&mut self) -> Result<&'a str> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| self.err("header token is not ascii"))
    }
}

/// Read a PFM file.
pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    let bytes = std::fs::read(path).map_err(|e| LfError::io(path, e))?;
    parse_pfm(&bytes)
}

/// Parse PFM bytes; errors carry the byte offset of the problem.
pub fn parse_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let mut s = Scanner { bytes, pos: 0 };
    let magic = s.token()?;
    let channels = match magic {
        "PF" => 3,
        "Pf" => 1,
        other => {
            return Err(LfError::Parse {
                offset: 0,
                message: format!("bad magic `{other}`, expected `PF` or `Pf`"),
            })
        }
    };
    let width: usize = {
        let t = s.token()?;
        t.parse().map_err(|_| s.err(format!("bad width `{t}`")))?
    };
    let height: usize = {
        let t = s.token()?;
        t.parse().map_err(|_| s.err(format!("bad height `{t}`")))?
    };
    let scale: f32 = {
        let t = s.token()?;
        t.parse().map_err(|_| s.err(format!("bad scale `{t}`")))?
    };
    if scale == 0.0 || !scale.is_finite() {
        return Err(s.err(format!("scale must be finite and non-zero, got {scale}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if s.pos >= bytes.len() || !bytes[s.pos].is_ascii_whitespace() {
        return Err(s.err("missing whitespace after scale"));
    }
    s.pos += 1;
    let little_endian = scale < 0.0;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| s.err("image dimensions overflow"))?;
    let want = n * 4;
    if bytes.len() - s.pos < want {
        return Err(LfError::Parse {
            offset: bytes.len() as u64,
            message: format!(
                "payload truncated: want {want} bytes, have {}",
                bytes.len() - s.pos
            ),
        });
    }
    let payload = &bytes[s.pos..s.pos + want];
    // rows are stored bottom-up; flip into top-down memory order
    let mut data = vec![0.0f32; n];
    let row_len = width * channels;
    for file_row in 0..height {
        let mem_row = height - 1 - file_row;
        let src = &payload[file_row * row_len * 4..][..row_len * 4];
        let dst = &mut data[mem_row * row_len..][..row_len];
        for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(4)) {
            let raw: [u8; 4] = chunk.try_into().unwrap();
            *d = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
    }
    Ok(PfmImage { width, height, channels, data })
}

/// Write a PFM file atomically (temp file + rename), little-endian.
pub fn write_pfm(image: &PfmImage, path: &Path) -> Result<()> {
    if image.channels != 1 && image.channels != 3 {
        return Err(LfError::Argument(format!(
            "PFM supports 1 or 3 channels, got {}",
            image.channels
        )));
    }
    if image.data.len() != image.width * image.height * image.channels {
        return Err(LfError::Shape(format!(
            "{}x{}x{} image with {} values",
            image.width,
            image.height,
            image.channels,
            image.data.len()
        )));
    }
    let magic = if image.channels == 1 { "Pf" } else { "PF" };
    let mut out = Vec::with_capacity(32 + image.data.len() * 4);
    out.extend_from_slice(format!("{magic}\n{} {}\n-1.0\n", image.width, image.height).as_bytes());
    let row_len = image.width * image.channels;
    for file_row in 0..image.height {
        let mem_row = image.height - 1 - file_row;
        for &v in &image.data[mem_row * row_len..][..row_len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| LfError::io(dir, e))?;
    tmp.write_all(&out).map_err(|e| LfError::io(path, e))?;
    tmp.persist(path).map_err(|e| LfError::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pfm");
        let img = PfmImage {
            width: 2,
            height: 2,
            channels: 1,
            data: vec![1.5, -2.25, 1e-30, 3.4e38],
        };
        write_pfm(&img, &path).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.width, 2);
        assert_eq!(back.height, 2);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn negative_scale_means_little_endian() {
        let img = PfmImage { width: 1, height: 1, channels: 1, data: vec![1.0f32] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pfm");
        write_pfm(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"Pf\n1 1\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn big_endian_payload_is_decoded() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-4.0f32).to_be_bytes());
        let img = parse_pfm(&bytes).unwrap();
        assert_eq!(img.data, vec![0.5, -4.0]);
    }

    #[test]
    fn rows_are_flipped_bottom_up() {
        // 1 column, 3 rows; file stores bottom row first
        let mut bytes = b"Pf\n1 3\n-1.0\n".to_vec();
        for v in [10.0f32, 20.0, 30.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let img = parse_pfm(&bytes).unwrap();
        // top row in memory is the last row in the file
        assert_eq!(img.data, vec![30.0, 20.0, 10.0]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        match parse_pfm(b"PX\n1 1\n-1.0\nxxxx") {
            Err(LfError::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match parse_pfm(b"Pf\n2 2\n-1.0\nshort") {
            Err(LfError::Parse { offset, message }) => {
                assert!(message.contains("truncated"), "{message}");
                assert!(offset > 0);
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_pfm(b"Pf\n1 1\n0.0\n....").is_err());
        assert!(parse_pfm(b"Pf\n1 one\n-1.0\n....").is_err());
    }
}
