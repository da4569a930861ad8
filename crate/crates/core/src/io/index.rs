//! Binary map index.
//!
//! ```text
//! "XPRIDX01" | version u16 | n_places u32 | n_entries u32 | descriptor_dim u32
//! | rows u32 | cols u32 | n_classes u32 | config_len u32 | config JSON
//! | places:  place_id u32, position 3 x f64
//! | entries: place_id u32, viewpoint u32, rotation 9 x f64 (row-major),
//!            translation 3 x f64, zero flag u8, descriptor d x f32,
//!            semantic rows*cols x u8 (row-major), histogram n_classes x f64
//! ```

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{put_config, read_file, write_file, Reader};
use crate::aggregation::GlobalDescriptor;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::matching::{IndexEntry, MapIndex, PlaceRecord};
use crate::projection::SemanticImage;
use crate::types::Pose;

pub const INDEX_MAGIC: &[u8; 8] = b"XPRIDX01";
pub const INDEX_VERSION: u16 = 1;

/// Exact size in bytes of a serialized index.
pub fn index_file_size(cfg: &Config, n_places: usize, n_entries: usize) -> usize {
    let header = 8 + 2 + 7 * 4 + cfg.to_json().len();
    let place = 4 + 3 * 8;
    let entry = 4 + 4 + 12 * 8 + 1 + 4 * cfg.descriptor_dim + cfg.range_rows * cfg.range_cols + 8 * cfg.n_classes;
    header + n_places * place + n_entries * entry
}

/// Serializes an index. Descriptors are stored as f32, so only f32-exact
/// descriptors (see [`GlobalDescriptor::quantized`]) round-trip bit-exactly.
pub fn write_index(index: &MapIndex) -> Result<Vec<u8>> {
    index.validate()?;
    let cfg = &index.config;
    let mut out = Vec::with_capacity(index_file_size(cfg, index.places.len(), index.entries.len()));
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    for v in [
        index.places.len(),
        index.entries.len(),
        cfg.descriptor_dim,
        cfg.range_rows,
        cfg.range_cols,
        cfg.n_classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    put_config(&mut out, cfg);
    for p in &index.places {
        out.extend_from_slice(&p.place_id.to_le_bytes());
        p.position.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    for e in &index.entries {
        out.extend_from_slice(&e.place_id.to_le_bytes());
        out.extend_from_slice(&e.viewpoint.to_le_bytes());
        for r in 0..3 {
            for c in 0..3 {
                out.extend_from_slice(&e.pose.rotation[(r, c)].to_le_bytes());
            }
        }
        e.pose.translation.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.push(e.descriptor.zero as u8);
        e.descriptor
            .values
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
        out.extend_from_slice(&e.semantic.labels);
        e.histogram.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(out)
}

pub fn read_index(path: &Path, bytes: &[u8]) -> Result<MapIndex> {
    let mut r = Reader::new(path, bytes);
    r.magic(INDEX_MAGIC)?;
    let version = r.u16()?;
    if version != INDEX_VERSION {
        return Err(r.err_at(8, format!("unsupported version {version}")));
    }
    let n_places = r.u32()? as usize;
    let n_entries = r.u32()? as usize;
    let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let cfg = r.config()?;
    if dims != [cfg.descriptor_dim, cfg.range_rows, cfg.range_cols, cfg.n_classes] {
        return Err(r.err("header dimensions disagree with the config echo"));
    }
    let expected = index_file_size(&cfg, n_places, n_entries);
    if bytes.len() != expected {
        return Err(r.err(format!("file is {} bytes, header implies {expected}", bytes.len())));
    }
    let mut places = Vec::with_capacity(n_places);
    for _ in 0..n_places {
        let place_id = r.u32()?;
        let position = [r.f64()?, r.f64()?, r.f64()?];
        places.push(PlaceRecord { place_id, position });
    }
    let cells = cfg.range_rows * cfg.range_cols;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let place_id = r.u32()?;
        let viewpoint = r.u32()?;
        let mut rot = [0.0; 9];
        for v in rot.iter_mut() {
            *v = r.f64()?;
        }
        let translation = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let flag = r.u8()?;
        if flag > 1 {
            return Err(r.err("bad zero-descriptor flag"));
        }
        let values = (0..cfg.descriptor_dim)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let labels = r.take(cells)?.to_vec();
        let histogram = (0..cfg.n_classes).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        entries.push(IndexEntry {
            place_id,
            viewpoint,
            pose: Pose {
                rotation: Matrix3::from_row_slice(&rot),
                translation,
            },
            descriptor: GlobalDescriptor { values, zero: flag == 1 },
            semantic: SemanticImage {
                rows: cfg.range_rows,
                cols: cfg.range_cols,
                labels,
            },
            histogram,
        });
    }
    r.finish()?;
    MapIndex::new(cfg, places, entries).map_err(|e| match e {
        Error::Format { .. } => e,
        other => Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            reason: other.to_string(),
        },
    })
}

pub fn save_index(path: &Path, index: &MapIndex) -> Result<()> {
    write_file(path, &write_index(index)?)
}

pub fn load_index(path: &Path) -> Result<MapIndex> {
    read_index(path, &read_file(path)?)
}
