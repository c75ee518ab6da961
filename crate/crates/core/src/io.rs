//! On-disk formats: binary grids, kernel CSV with JSON sidecars, and dataset indexes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Units};
use crate::kernel::{kernel_from_csv, kernel_to_csv, BlurKernel};
use crate::synthetic::{BlurFamily, PlantedPair};

pub const GRID_MAGIC: [u8; 4] = *b"PCF1";
const HEADER_LEN: u64 = 12;

/// Encodes a field as `PCF1`, u32 LE height, u32 LE width, f32 LE values.
pub fn encode_grid(field: &Field) -> Result<Vec<u8>> {
    let (h, w) = field.shape();
    let (h32, w32) = match (u32::try_from(h), u32::try_from(w)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => {
            return Err(Error::DimensionOverflow {
                height: h as u64,
                width: w as u64,
            })
        }
    };
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + 4 * field.len());
    buf.extend_from_slice(&GRID_MAGIC);
    buf.extend_from_slice(&h32.to_le_bytes());
    buf.extend_from_slice(&w32.to_le_bytes());
    for &v in field.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

/// Decodes a grid; `path` only labels errors. Values are read as data units.
pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<Field> {
    if bytes.len() < 4 || bytes[..4] != GRID_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: GRID_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            actual: bytes.len() as u64,
        });
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(Error::DimensionOverflow { height: h, width: w })?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::TrailingData {
            path: path.to_path_buf(),
            extra: actual - expected,
        });
    }
    let values = bytes[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Field::new(h as usize, w as usize, values, Units::Data)
}

pub fn write_grid(path: &Path, field: &Field) -> Result<()> {
    let bytes = encode_grid(field)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Field> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}

/// Sidecar written next to every kernel dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    pub size: usize,
    /// Reverse step the kernel was captured at; 0 for the final kernel.
    pub step: usize,
    pub mean: f64,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes the kernel CSV and its `{size, step, mean}` sidecar.
pub fn write_kernel(path: &Path, kernel: &BlurKernel, step: usize) -> Result<()> {
    fs::write(path, kernel_to_csv(kernel)).map_err(|e| Error::io(path, e))?;
    let meta = KernelMeta {
        size: kernel.size(),
        step,
        mean: kernel.mean(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

pub fn read_kernel(path: &Path) -> Result<BlurKernel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    kernel_from_csv(&text)
}

pub fn read_kernel_meta(csv_path: &Path) -> Result<KernelMeta> {
    let side = sidecar_path(csv_path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub const INDEX_FILE: &str = "index.json";

/// One planted pair in a dataset directory; paths are relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub clean: String,
    pub blurry: String,
    pub kernel: String,
    pub family: BlurFamily,
    pub severity: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Self = serde_json::from_str(&text)?;
        Ok(index)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(INDEX_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

/// Writes `pairs` as grids and kernels under `dir` and returns the index.
pub fn write_dataset(dir: &Path, pairs: &[PlantedPair]) -> Result<DatasetIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = DatasetIndex::default();
    for (i, pair) in pairs.iter().enumerate() {
        let id = format!("{i:05}");
        let entry = DatasetEntry {
            clean: format!("{id}_clean.pcf"),
            blurry: format!("{id}_blurry.pcf"),
            kernel: format!("{id}_kernel.csv"),
            family: pair.family,
            severity: pair.lead_index,
            id,
        };
        write_grid(&dir.join(&entry.clean), &pair.clean)?;
        write_grid(&dir.join(&entry.blurry), &pair.blurry)?;
        write_kernel(&dir.join(&entry.kernel), &pair.kernel_true, 0)?;
        index.entries.push(entry);
    }
    index.save(dir)?;
    Ok(index)
}

/// Reads every pair listed in `dir`'s index.
pub fn read_dataset(dir: &Path) -> Result<Vec<(DatasetEntry, PlantedPair)>> {
    let index = DatasetIndex::load(dir)?;
    index
        .entries
        .into_iter()
        .map(|e| {
            let pair = PlantedPair {
                clean: read_grid(&dir.join(&e.clean))?,
                blurry: read_grid(&dir.join(&e.blurry))?,
                kernel_true: read_kernel(&dir.join(&e.kernel))?,
                family: e.family,
                lead_index: e.severity,
            };
            pair.clean.check_same_shape(&pair.blurry)?;
            Ok((e, pair))
        })
        .collect()
}

/// Sorted `*.pcf` files in `dir`.
pub fn list_grids(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "pcf") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
