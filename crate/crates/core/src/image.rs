//! Image planes and binary PGM/PPM file handling.
//!
//! Pixels are f64 in `[0, 1]`, stored row-major with channels interleaved
//! (H x W x C). Single-channel planes serialize as binary PGM (P5), three
//! channel as binary PPM (P6), both with maxval 255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pixels: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::contract(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::contract(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImagePlane {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImagePlane::new(height, width, channels, vec![value; height * width * channels])
            .expect("constant plane in range")
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    // ── PGM / PPM ────────────────────────────────────────────────────

    pub fn write_pnm<W: Write>(&self, w: &mut W) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            _ => unreachable!(),
        };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_pnm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_pnm(&mut w)
    }

    pub fn read_pnm<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let parse_err = |pos: usize, msg: &str| Error::Parse {
            offset: pos as u64,
            message: msg.to_string(),
        };

        // header tokens separated by whitespace, '#' starts a comment
        let next_token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
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
                return Err(parse_err(start, "unexpected end of header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };

        let magic = next_token(&bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(parse_err(0, &format!("unsupported magic {other:?}"))),
        };
        let width: usize = next_token(&bytes, &mut pos)?
            .parse()
            .map_err(|_| parse_err(pos, "bad width"))?;
        let height: usize = next_token(&bytes, &mut pos)?
            .parse()
            .map_err(|_| parse_err(pos, "bad height"))?;
        let maxval: usize = next_token(&bytes, &mut pos)?
            .parse()
            .map_err(|_| parse_err(pos, "bad maxval"))?;
        if maxval != 255 {
            return Err(parse_err(
                pos,
                &format!("maxval {maxval} unsupported, expected 255"),
            ));
        }
        pos += 1; // single whitespace byte after maxval
        let need = width * height * channels;
        if bytes.len() < pos + need {
            return Err(parse_err(
                bytes.len(),
                &format!(
                    "payload truncated: need {need} bytes, have {}",
                    bytes.len().saturating_sub(pos)
                ),
            ));
        }
        let pixels = bytes[pos..pos + need]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        ImagePlane::new(height, width, channels, pixels)
    }

    pub fn load_pnm(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_pnm(&mut r)
    }
}
