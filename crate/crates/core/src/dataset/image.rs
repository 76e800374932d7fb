//! `H x W x 3` float images and plain-text PPM (P3) I/O.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Channel-last image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major `[height][width][channel]`.
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::invalid(format!(
                "image {height}x{width}x{CHANNELS} needs {} values, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * CHANNELS + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[self.index(row, col, ch)]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col, ch);
        self.pixels[i] = v;
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    /// Round to the 8-bit grid a PPM round trip would produce.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&v| to_byte(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn to_ppm(&self) -> String {
        let mut out = String::with_capacity(self.pixels.len() * 4 + 32);
        let _ = write!(out, "P3\n{} {}\n255\n", self.width, self.height);
        for row in 0..self.height {
            let line: Vec<String> = (0..self.width * CHANNELS)
                .map(|i| to_byte(self.pixels[row * self.width * CHANNELS + i]).to_string())
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse_ppm(text: &str) -> std::result::Result<Self, String> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        match tokens.next() {
            Some("P3") => {}
            other => return Err(format!("expected P3 magic, found {other:?}")),
        }
        let mut header = [0usize; 3];
        for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
            *slot = tokens
                .next()
                .ok_or_else(|| format!("missing {name}"))?
                .parse()
                .map_err(|e| format!("bad {name}: {e}"))?;
        }
        let [width, height, maxval] = header;
        if maxval == 0 || maxval > 65535 {
            return Err(format!("maxval {maxval} out of range"));
        }
        let n = width * height * CHANNELS;
        let mut pixels = Vec::with_capacity(n);
        for tok in tokens.by_ref().take(n) {
            let v: usize = tok.parse().map_err(|e| format!("bad sample `{tok}`: {e}"))?;
            if v > maxval {
                return Err(format!("sample {v} exceeds maxval {maxval}"));
            }
            pixels.push(v as f64 / maxval as f64);
        }
        if pixels.len() != n {
            return Err(format!("expected {n} samples, found {}", pixels.len()));
        }
        if tokens.next().is_some() {
            return Err("trailing data after pixel samples".into());
        }
        Ok(Self { height, width, pixels })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ppm(&text).map_err(|msg| Error::Image {
            path: path.to_path_buf(),
            msg,
        })
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
