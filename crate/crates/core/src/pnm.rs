//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit raster with `channels` interleaved samples per pixel (1 or 3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

/// Quantizes `v ∈ [0, 1]` to `round(255 v)`, rounding halves up.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    pub fn decode(bytes: &[u8], record: &str) -> Result<Raster> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() {
                match bytes[pos] {
                    b'#' => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    b if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::corrupt(record, "truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::corrupt(record, format!("unsupported magic `{other}`"))),
        };
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::corrupt(record, format!("bad {what} `{s}`")))
        };
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        if parse(&fields[3], "maxval")? != 255 {
            return Err(Error::corrupt(record, "only maxval 255 is supported"));
        }
        let n = width * height * channels;
        let samples = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::corrupt(record, "truncated raster"))?
            .to_vec();
        Ok(Raster {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Raster> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Raster::decode(&bytes, &path.display().to_string())
    }

    /// Planar `C×H×W` values in `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; self.channels * hw];
        for (i, px) in self.samples.chunks(self.channels).enumerate() {
            for (c, &s) in px.iter().enumerate() {
                out[c * hw + i] = dequantize(s);
            }
        }
        out
    }

    /// Quantizes planar `C×H×W` values in `[0, 1]`.
    pub fn from_planar(planar: &[f64], channels: usize, height: usize, width: usize) -> Raster {
        let hw = width * height;
        let mut samples = vec![0; channels * hw];
        for c in 0..channels {
            for i in 0..hw {
                samples[i * channels + c] = quantize(planar[c * hw + i]);
            }
        }
        Raster {
            width,
            height,
            channels,
            samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128); // 127.5 → 128
        assert_eq!(quantize(0.3), 77); // 76.5 → 77
        assert_eq!(quantize(1.7), 255);
    }

    #[test]
    fn encode_decode_round_trip() {
        let r = Raster {
            width: 3,
            height: 2,
            channels: 3,
            samples: (0..18).map(|i| (i * 13) as u8).collect(),
        };
        let bytes = r.encode();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(Raster::decode(&bytes, "x").unwrap(), r);
    }

    #[test]
    fn decode_handles_comments_and_rejects_truncation() {
        let bytes = b"P5\n# a comment\n2 2\n255\n\x00\x01\x02\x03";
        let r = Raster::decode(bytes, "x").unwrap();
        assert_eq!(r.samples, vec![0, 1, 2, 3]);
        assert!(Raster::decode(b"P5\n2 2\n255\n\x00", "x").is_err());
        assert!(Raster::decode(b"P3\n1 1\n255\n0", "x").is_err());
    }

    #[test]
    fn planar_round_trip_is_exact_at_8_bits() {
        let r = Raster {
            width: 2,
            height: 2,
            channels: 3,
            samples: (0..12).map(|i| (i * 21) as u8).collect(),
        };
        let planar = r.to_planar();
        assert_eq!(Raster::from_planar(&planar, 3, 2, 2), r);
    }
}
