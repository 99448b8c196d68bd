//! Dense flow fields, ground truth, and their on-disk formats.
//!
//! Flow files use the Middlebury `.flo` layout; validity masks are binary
//! PGM (P5) sidecars where any nonzero byte marks a valid pixel.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `PIEH` read as a little-endian f32.
pub const FLO_MAGIC: f32 = 202021.25;

/// Per-pixel displacement in pixels over one prediction window.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    /// Builds a field from a `[1, 2, H, W]` tensor (channel 0 = u, 1 = v).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b != 1 || c != 2 {
            return Err(Error::shape(
                "flow",
                format!("expected [1, 2, H, W], got {:?}", t.shape()),
            ));
        }
        let (u, v) = t.data().split_at(h * w);
        Ok(Self {
            width: w,
            height: h,
            u: u.to_vec(),
            v: v.to_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.u.len());
        data.extend_from_slice(&self.u);
        data.extend_from_slice(&self.v);
        Tensor::new(vec![1, 2, self.height, self.width], data).expect("flow extents are consistent")
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|a| a * factor).collect(),
            v: self.v.iter().map(|a| a * factor).collect(),
        }
    }

    pub fn add(&self, other: &FlowField) -> Result<Self> {
        self.check_extents(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            u: self.u.iter().zip(&other.u).map(|(a, b)| a + b).collect(),
            v: self.v.iter().zip(&other.v).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn check_extents(&self, other: &FlowField) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(
                "flow",
                format!(
                    "{}x{} vs {}x{}",
                    self.width, self.height, other.width, other.height
                ),
            ));
        }
        Ok(())
    }

    pub fn mean_magnitude(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| a.hypot(*b))
            .sum::<f64>()
            / self.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|a| a.is_finite())
    }

    pub fn write_flo(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_flo_bytes())?;
        Ok(())
    }

    pub fn to_flo_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.len());
        out.write_f32::<LittleEndian>(FLO_MAGIC).unwrap();
        out.write_i32::<LittleEndian>(self.width as i32).unwrap();
        out.write_i32::<LittleEndian>(self.height as i32).unwrap();
        for (u, v) in self.u.iter().zip(&self.v) {
            out.write_f32::<LittleEndian>(*u as f32).unwrap();
            out.write_f32::<LittleEndian>(*v as f32).unwrap();
        }
        out
    }

    pub fn read_flo(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_flo_bytes(&bytes).map_err(|detail| Error::format(path, detail))
    }

    fn from_flo_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Cursor::new(bytes);
        let magic = r.read_f32::<LittleEndian>().map_err(|_| "truncated header")?;
        if magic != FLO_MAGIC {
            return Err("bad magic, expected PIEH".into());
        }
        let width = r.read_i32::<LittleEndian>().map_err(|_| "truncated header")?;
        let height = r.read_i32::<LittleEndian>().map_err(|_| "truncated header")?;
        if width < 0 || height < 0 {
            return Err(format!("negative extents {width}x{height}"));
        }
        let (width, height) = (width as usize, height as usize);
        let n = width * height;
        if bytes.len() != 12 + 8 * n {
            return Err(format!(
                "expected {} bytes for {}x{}, found {}",
                12 + 8 * n,
                width,
                height,
                bytes.len()
            ));
        }
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            u.push(r.read_f32::<LittleEndian>().map_err(|e| e.to_string())? as f64);
            v.push(r.read_f32::<LittleEndian>().map_err(|e| e.to_string())? as f64);
        }
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }
}

/// Reference flow with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthFlow {
    pub flow: FlowField,
    pub valid: Vec<bool>,
}

impl GroundTruthFlow {
    pub fn new(flow: FlowField, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != flow.len() {
            return Err(Error::shape(
                "ground truth",
                format!("mask has {} pixels, flow has {}", valid.len(), flow.len()),
            ));
        }
        Ok(Self { flow, valid })
    }

    pub fn fully_valid(flow: FlowField) -> Self {
        let valid = vec![true; flow.len()];
        Self { flow, valid }
    }

    /// Writes `<path>` as `.flo` and the mask next to it as `<path>.mask.pgm`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.flow.write_flo(path)?;
        write_mask_pgm(
            mask_path(path),
            self.flow.width,
            self.flow.height,
            &self.valid,
        )
    }

    /// Reads a `.flo` file and its mask sidecar; a missing sidecar means all valid.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let flow = FlowField::read_flo(path)?;
        let mpath = mask_path(path);
        let valid = if mpath.exists() {
            let (w, h, valid) = read_mask_pgm(&mpath)?;
            if w != flow.width || h != flow.height {
                return Err(Error::format(
                    mpath,
                    format!(
                        "mask is {}x{} but flow is {}x{}",
                        w, h, flow.width, flow.height
                    ),
                ));
            }
            valid
        } else {
            vec![true; flow.len()]
        };
        Self::new(flow, valid)
    }
}

pub fn mask_path(flo: &Path) -> std::path::PathBuf {
    let mut s = flo.as_os_str().to_owned();
    s.push(".mask.pgm");
    s.into()
}

pub fn write_mask_pgm(path: impl AsRef<Path>, width: usize, height: usize, valid: &[bool]) -> Result<()> {
    let mut out = Vec::with_capacity(valid.len() + 32);
    write!(out, "P5\n{} {}\n255\n", width, height)?;
    out.extend(valid.iter().map(|&v| if v { 255u8 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}

pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|detail| Error::format(path, detail))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<bool>), String> {
    let mut r = Cursor::new(bytes);
    let mut fields = Vec::new();
    // magic, width, height, maxval separated by whitespace; '#' comments allowed
    while fields.len() < 4 {
        let mut tok = Vec::new();
        loop {
            let mut b = [0u8];
            if r.read(&mut b).map_err(|e| e.to_string())? == 0 {
                return Err("truncated PGM header".into());
            }
            match b[0] {
                b'#' if tok.is_empty() => loop {
                    if r.read(&mut b).map_err(|e| e.to_string())? == 0 || b[0] == b'\n' {
                        break;
                    }
                },
                c if c.is_ascii_whitespace() => {
                    if !tok.is_empty() {
                        break;
                    }
                }
                c => tok.push(c),
            }
        }
        fields.push(String::from_utf8_lossy(&tok).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected P5 magic, found {}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM field {s:?}"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let start = r.position() as usize;
    let body = &bytes[start..];
    if body.len() != w * h {
        return Err(format!("expected {} pixels, found {}", w * h, body.len()));
    }
    Ok((w, h, body.iter().map(|&b| b != 0).collect()))
}
