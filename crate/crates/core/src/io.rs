//! GridFile: a JSON header `<name>.json` plus little-endian planar payload
//! `<name>.raw` (x fastest, channel slowest).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{Dims, Field, LabelGrid, ScalarGrid, VectorGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub channels: usize,
    pub dtype: DType,
    /// Label grids only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_count: Option<usize>,
}

/// Header and payload paths for `base`, which may carry a `.json` or
/// `.raw` extension or none.
pub fn grid_paths(base: &Path) -> (PathBuf, PathBuf) {
    let stem = match base.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_grid(base: &Path, header: &GridHeader, payload: Vec<u8>) -> Result<()> {
    let (json, raw) = grid_paths(base);
    write_json(&json, header)?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

fn f32_payload(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn header_for(dims: &Dims, spacing: &[f64], channels: usize, dtype: DType) -> GridHeader {
    GridHeader {
        dims: dims.sizes().to_vec(),
        spacing: spacing.to_vec(),
        channels,
        dtype,
        region_count: None,
    }
}

pub fn write_scalar(base: &Path, g: &ScalarGrid) -> Result<()> {
    write_grid(base, &header_for(g.dims(), g.spacing(), 1, DType::F32), f32_payload(g.data()))
}

pub fn write_vector(base: &Path, g: &VectorGrid) -> Result<()> {
    let nd = g.dims().ndim();
    write_grid(base, &header_for(g.dims(), g.spacing(), nd, DType::F32), f32_payload(g.data()))
}

pub fn write_labels(base: &Path, g: &LabelGrid) -> Result<()> {
    let mut h = header_for(g.dims(), g.spacing(), 1, DType::U8);
    h.region_count = Some(g.region_count());
    write_grid(base, &h, g.data().to_vec())
}

/// Tensors carry no spacing; unit spacing is recorded.
pub fn write_tensor(base: &Path, t: &Tensor) -> Result<()> {
    let sp = vec![1.0; t.dims().ndim()];
    write_grid(base, &header_for(t.dims(), &sp, t.channels(), DType::F32), f32_payload(t.data()))
}

pub fn read_header(base: &Path) -> Result<GridHeader> {
    read_json(&grid_paths(base).0)
}

fn read_payload(base: &Path, want: DType) -> Result<(GridHeader, Dims, Vec<u8>)> {
    let (json, raw) = grid_paths(base);
    let h: GridHeader = read_json(&json)?;
    if h.dtype != want {
        return Err(Error::shape(format!(
            "{} holds {:?} data, expected {:?}",
            json.display(),
            h.dtype,
            want
        )));
    }
    let dims = if h.dims.is_empty() {
        Dims::scalar()
    } else {
        Dims::new(&h.dims)?
    };
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let width = match want {
        DType::F32 => 4,
        DType::U8 => 1,
    };
    if bytes.len() != dims.len() * h.channels * width {
        return Err(Error::shape(format!(
            "{} holds {} bytes, header implies {}",
            raw.display(),
            bytes.len(),
            dims.len() * h.channels * width
        )));
    }
    Ok((h, dims, bytes))
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn read_scalar(base: &Path) -> Result<ScalarGrid> {
    let (h, dims, bytes) = read_payload(base, DType::F32)?;
    if h.channels != 1 {
        return Err(Error::shape(format!("scalar grid with {} channels", h.channels)));
    }
    ScalarGrid::new(dims, h.spacing, decode_f32(&bytes))
}

pub fn read_vector(base: &Path) -> Result<VectorGrid> {
    let (h, dims, bytes) = read_payload(base, DType::F32)?;
    if h.channels != dims.ndim() {
        return Err(Error::shape(format!(
            "vector grid with {} channels on a {}-D lattice",
            h.channels,
            dims.ndim()
        )));
    }
    VectorGrid::new(dims, h.spacing, decode_f32(&bytes))
}

/// Label grids without a recorded region count default to `default_regions`.
pub fn read_labels(base: &Path, default_regions: usize) -> Result<LabelGrid> {
    let (h, dims, bytes) = read_payload(base, DType::U8)?;
    if h.channels != 1 {
        return Err(Error::shape(format!("label grid with {} channels", h.channels)));
    }
    LabelGrid::new(dims, h.spacing, bytes, h.region_count.unwrap_or(default_regions))
}

pub fn read_tensor(base: &Path) -> Result<Tensor> {
    let (h, dims, bytes) = read_payload(base, DType::F32)?;
    Tensor::new(h.channels, dims, decode_f32(&bytes))
}

/// Channel `c` of any f32 grid, or the labels of a u8 grid, as f64 values.
pub fn read_channel(base: &Path, c: usize) -> Result<(GridHeader, Vec<f64>)> {
    let h = read_header(base)?;
    let (h, dims, bytes) = read_payload(base, h.dtype)?;
    if c >= h.channels {
        return Err(Error::shape(format!("channel {c} out of range (grid has {})", h.channels)));
    }
    let n = dims.len();
    let vals = match h.dtype {
        DType::F32 => decode_f32(&bytes[c * n * 4..(c + 1) * n * 4]),
        DType::U8 => bytes[c * n..(c + 1) * n].iter().map(|&b| b as f64).collect(),
    };
    Ok((h, vals))
}

/// Rounds every value to f32 precision, matching what a GridFile stores.
pub fn quantize<G: Field>(g: &G) -> G {
    let data = g.data().iter().map(|&v| v as f32 as f64).collect();
    g.rebuild(*g.dims(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dims::new(&[3, 2]).unwrap();
        let s = ScalarGrid::new(d, vec![1.5, 2.0], vec![0.0, 1.0, 2.5, -3.25, 4.0, 5.5]).unwrap();
        write_scalar(&dir.path().join("img"), &s).unwrap();
        assert_eq!(read_scalar(&dir.path().join("img.json")).unwrap(), s);
        let raw = std::fs::read(dir.path().join("img.raw")).unwrap();
        assert_eq!(&raw[4..8], &1.0f32.to_le_bytes());

        let v = VectorGrid::from_fn(d, vec![1.0, 1.0], |c| [c[0] as f64 * 0.1, -(c[1] as f64), 0.0]).unwrap();
        write_vector(&dir.path().join("u"), &v).unwrap();
        assert_eq!(read_vector(&dir.path().join("u")).unwrap(), quantize(&v));

        let l = LabelGrid::new(d, vec![1.0, 1.0], vec![0, 1, 2, 3, 3, 0], 4).unwrap();
        write_labels(&dir.path().join("lab"), &l).unwrap();
        assert_eq!(read_labels(&dir.path().join("lab.raw"), 9).unwrap(), l);
        let h = read_header(&dir.path().join("lab")).unwrap();
        assert_eq!(h.dtype, DType::U8);

        let bias = Tensor::new(3, Dims::scalar(), vec![0.5, -1.0, 2.0]).unwrap();
        write_tensor(&dir.path().join("bias"), &bias).unwrap();
        assert_eq!(read_tensor(&dir.path().join("bias")).unwrap(), bias);

        assert!(matches!(read_scalar(&dir.path().join("lab")), Err(Error::Shape(_))));
        assert!(matches!(read_scalar(&dir.path().join("missing")), Err(Error::Io { .. })));
        std::fs::write(dir.path().join("img.raw"), [0u8; 5]).unwrap();
        assert!(matches!(read_scalar(&dir.path().join("img")), Err(Error::Shape(_))));
    }
}
