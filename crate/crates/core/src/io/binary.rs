//! Little-endian binary containers for cubes, heatmaps and attention weights.
//!
//! Cube (`RFC1`): `u32 K, M, T`, `f64 start_freq, bandwidth, sample_period,
//! fps`, then `K*M*T` interleaved `(re, im)` f32 pairs, `k` fastest, `t` slowest.
//!
//! Heatmap (`RFH1`): `u32 W, H, T`, `u8 tag`, `f64 origin_a, origin_b,
//! cell_size`, then f32 values row-major, frame-major. Tag bit 0 is the plane
//! (0 horizontal, 1 vertical); bit 1 set means one real value per cell instead
//! of an `(re, im)` pair.
//!
//! Weights (`RFW1`): `u32` byte length of a JSON header `{layers, heads,
//! d_model, order}`, the header, then per layer the f32 tensors
//! `wq bq wk bk wv bv wo bo` (matrices `D x D` row-major).

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beamform::{Heatmap, PlaneGrid, RealHeatmap};
use crate::error::{Error, Result};
use crate::fusion::{AttentionLayer, AttentionWeights, TENSOR_ORDER};
use crate::radar::{ChirpConfig, Orientation, RadarFrameCube, VirtualArray};

pub const CUBE_MAGIC: &[u8; 4] = b"RFC1";
pub const HEATMAP_MAGIC: &[u8; 4] = b"RFH1";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"RFW1";

const REAL_FLAG: u8 = 0b10;

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact(r)?))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    Ok(f32::from_le_bytes(read_exact(r)?))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let got: [u8; 4] = read_exact(r)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
}

/// Raw contents of a cube file; the array geometry is not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeFile {
    pub config: ChirpConfig,
    pub elements: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl CubeFile {
    pub fn into_cube(self, array: VirtualArray) -> Result<RadarFrameCube> {
        if array.len() != self.elements {
            return Err(Error::ShapeMismatch(format!(
                "file has {} elements, array has {}",
                self.elements,
                array.len()
            )));
        }
        RadarFrameCube::from_data(self.data, self.config, array, self.frames)
    }
}

pub fn write_cube(w: &mut impl Write, cube: &RadarFrameCube) -> Result<()> {
    let mut buf = Vec::with_capacity(48 + cube.data.len() * 8);
    buf.extend_from_slice(CUBE_MAGIC);
    buf.extend_from_slice(&to_u32(cube.num_samples(), "K")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(cube.num_elements(), "M")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(cube.frames, "T")?.to_le_bytes());
    let c = &cube.config;
    for v in [
        c.start_freq,
        c.bandwidth,
        c.sample_period,
        c.frames_per_second,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &cube.data {
        buf.extend_from_slice(&(s.re as f32).to_le_bytes());
        buf.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_cube(r: &mut impl Read) -> Result<CubeFile> {
    expect_magic(r, CUBE_MAGIC)?;
    let k = read_u32(r)? as usize;
    let m = read_u32(r)? as usize;
    let t = read_u32(r)? as usize;
    let config = ChirpConfig::new(read_f64(r)?, read_f64(r)?, k, read_f64(r)?, read_f64(r)?)?;
    let n = k
        .checked_mul(m)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| Error::Format("cube dimensions overflow".into()))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let re = read_f32(r)? as f64;
        let im = read_f32(r)? as f64;
        data.push(Complex64::new(re, im));
    }
    Ok(CubeFile {
        config,
        elements: m,
        frames: t,
        data,
    })
}

/// Either kind of heatmap a file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum HeatmapFile {
    Complex(Heatmap),
    Real(RealHeatmap),
}

impl HeatmapFile {
    pub fn grid(&self) -> &PlaneGrid {
        match self {
            HeatmapFile::Complex(h) => &h.grid,
            HeatmapFile::Real(h) => &h.grid,
        }
    }
}

fn write_heatmap_header(
    buf: &mut Vec<u8>,
    grid: &PlaneGrid,
    frames: usize,
    real: bool,
) -> Result<()> {
    buf.extend_from_slice(HEATMAP_MAGIC);
    buf.extend_from_slice(&to_u32(grid.width, "W")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(grid.height, "H")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(frames, "T")?.to_le_bytes());
    buf.push(grid.plane.tag() | if real { REAL_FLAG } else { 0 });
    for v in [grid.origin[0], grid.origin[1], grid.cell_size] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn write_heatmap(w: &mut impl Write, h: &Heatmap) -> Result<()> {
    let mut buf = Vec::with_capacity(41 + h.values.len() * 8);
    write_heatmap_header(&mut buf, &h.grid, h.frames, false)?;
    for v in &h.values {
        buf.extend_from_slice(&(v.re as f32).to_le_bytes());
        buf.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_real_heatmap(w: &mut impl Write, h: &RealHeatmap) -> Result<()> {
    let mut buf = Vec::with_capacity(41 + h.values.len() * 4);
    write_heatmap_header(&mut buf, &h.grid, h.frames, true)?;
    for v in &h.values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_heatmap(r: &mut impl Read) -> Result<HeatmapFile> {
    expect_magic(r, HEATMAP_MAGIC)?;
    let width = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let frames = read_u32(r)? as usize;
    let [tag] = read_exact::<1>(r)?;
    let plane = Orientation::from_tag(tag & 1).expect("bit 0 is a valid plane");
    if tag & !(1 | REAL_FLAG) != 0 {
        return Err(Error::Format(format!("unknown heatmap tag {tag:#04x}")));
    }
    let origin = [read_f64(r)?, read_f64(r)?];
    let grid = PlaneGrid::new(plane, origin, read_f64(r)?, width, height)?;
    let n = grid.cells() * frames;
    if tag & REAL_FLAG != 0 {
        let values = (0..n)
            .map(|_| read_f32(r).map(f64::from))
            .collect::<Result<_>>()?;
        Ok(HeatmapFile::Real(RealHeatmap {
            grid,
            frames,
            values,
        }))
    } else {
        let values = (0..n)
            .map(|_| Ok(Complex64::new(read_f32(r)? as f64, read_f32(r)? as f64)))
            .collect::<Result<_>>()?;
        Ok(HeatmapFile::Complex(Heatmap {
            grid,
            frames,
            values,
        }))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsHeader {
    layers: usize,
    heads: usize,
    d_model: usize,
    order: Vec<String>,
}

pub fn write_weights(w: &mut impl Write, weights: &AttentionWeights) -> Result<()> {
    weights.validate()?;
    let header = serde_json::to_vec(&WeightsHeader {
        layers: weights.layers.len(),
        heads: weights.heads,
        d_model: weights.d_model,
        order: TENSOR_ORDER.iter().map(|s| s.to_string()).collect(),
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&to_u32(header.len(), "header length")?.to_le_bytes());
    buf.extend_from_slice(&header);
    for layer in &weights.layers {
        for t in layer.tensors() {
            for v in t {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_weights(r: &mut impl Read) -> Result<AttentionWeights> {
    expect_magic(r, WEIGHTS_MAGIC)?;
    let len = read_u32(r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated weights header".into()))?;
    let header: WeightsHeader = serde_json::from_slice(&header)?;
    if header.order != TENSOR_ORDER {
        return Err(Error::Format(format!(
            "unsupported tensor order {:?}",
            header.order
        )));
    }
    let d = header.d_model;
    let mut layers = Vec::with_capacity(header.layers);
    for _ in 0..header.layers {
        let mut layer = AttentionLayer::zeros(d);
        for t in layer.tensors_mut() {
            for v in t.iter_mut() {
                *v = read_f32(r)? as f64;
            }
        }
        layers.push(layer);
    }
    let weights = AttentionWeights {
        d_model: d,
        heads: header.heads,
        layers,
    };
    weights.validate()?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::Vec3;

    #[test]
    fn cube_header_layout() {
        let cfg = ChirpConfig::horizontal(3);
        let array =
            VirtualArray::mimo_equivalent(2, &cfg, Orientation::Horizontal, Vec3::zeros()).unwrap();
        let mut cube = RadarFrameCube::zeros(cfg, array.clone(), 1);
        cube.data[1] = Complex64::new(1.5, -2.0);
        let mut bytes = Vec::new();
        write_cube(&mut bytes, &cube).unwrap();
        assert_eq!(&bytes[..4], b"RFC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 77e9);
        assert_eq!(bytes.len(), 48 + 3 * 2 * 8);
        // sample k=1: second (re, im) pair
        assert_eq!(f32::from_le_bytes(bytes[56..60].try_into().unwrap()), 1.5);
        assert_eq!(f32::from_le_bytes(bytes[60..64].try_into().unwrap()), -2.0);
        let back = read_cube(&mut bytes.as_slice())
            .unwrap()
            .into_cube(array)
            .unwrap();
        assert_eq!(back, cube);
    }

    #[test]
    fn cube_rejects_bad_magic_and_truncation() {
        assert!(matches!(
            read_cube(&mut &b"XXXX"[..]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_cube(&mut &b"RFC1\x01"[..]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn heatmap_real_and_complex() {
        let grid = PlaneGrid::new(Orientation::Vertical, [0.5, -1.0], 0.25, 3, 2).unwrap();
        let mut h = Heatmap::zeros(grid.clone(), 2);
        h.values[7] = Complex64::new(-3.0, 4.0);
        let mut bytes = Vec::new();
        write_heatmap(&mut bytes, &h).unwrap();
        assert_eq!(bytes[16], 1);
        assert_eq!(
            read_heatmap(&mut bytes.as_slice()).unwrap(),
            HeatmapFile::Complex(h.clone())
        );

        let real = h.magnitude();
        let mut bytes = Vec::new();
        write_real_heatmap(&mut bytes, &real).unwrap();
        assert_eq!(bytes[16], 0b11);
        assert_eq!(bytes.len(), 41 + 12 * 4);
        assert_eq!(
            read_heatmap(&mut bytes.as_slice()).unwrap(),
            HeatmapFile::Real(real)
        );
    }

    #[test]
    fn weights_round_trip() {
        let mut w = AttentionWeights::seeded(2, 2, 4, 11).unwrap();
        for l in &mut w.layers {
            for t in l.tensors_mut() {
                t.iter_mut().for_each(|v| *v = (*v as f32) as f64);
            }
        }
        let mut bytes = Vec::new();
        write_weights(&mut bytes, &w).unwrap();
        assert_eq!(&bytes[..4], b"RFW1");
        assert_eq!(read_weights(&mut bytes.as_slice()).unwrap(), w);
    }
}
