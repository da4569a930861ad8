//! Query observation files.
//!
//! ```text
//! "XPRQOBS1" | query_id u32 | place_id u32 | heading f64 | position 3 x f64
//! | rows u32 | cols u32 | channels u32 | raw rows*cols*channels x f64
//! | mask rows*cols x u8 | gt labels rows*cols x u8
//! ```

use std::path::Path;

use super::{read_file, write_file, Reader};
use crate::encoder::QueryObservation;
use crate::error::Result;
use crate::projection::SemanticImage;

pub const QUERY_MAGIC: &[u8; 8] = b"XPRQOBS1";

/// A query observation with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: u32,
    pub place_id: u32,
    /// Heading relative to the place anchor, radians.
    pub heading: f64,
    pub position: [f64; 3],
    pub obs: QueryObservation,
}

pub fn save_query(path: &Path, q: &QueryRecord) -> Result<()> {
    let o = &q.obs;
    let cells = o.rows * o.cols;
    let mut out = Vec::with_capacity(64 + cells * (8 * o.channels + 2));
    out.extend_from_slice(QUERY_MAGIC);
    out.extend_from_slice(&q.query_id.to_le_bytes());
    out.extend_from_slice(&q.place_id.to_le_bytes());
    out.extend_from_slice(&q.heading.to_le_bytes());
    q.position.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for d in [o.rows, o.cols, o.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    o.raw.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out.extend(o.mask.iter().map(|&m| m as u8));
    out.extend_from_slice(&o.gt_labels.labels);
    write_file(path, &out)
}

pub fn load_query(path: &Path) -> Result<QueryRecord> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(QUERY_MAGIC)?;
    let query_id = r.u32()?;
    let place_id = r.u32()?;
    let heading = r.f64()?;
    let position = [r.f64()?, r.f64()?, r.f64()?];
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let cells = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(channels * 8 + 2).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| r.err("dimensions exceed the file size"))?;
    let raw = (0..cells * channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let mut mask = Vec::with_capacity(cells);
    for _ in 0..cells {
        match r.u8()? {
            0 => mask.push(false),
            1 => mask.push(true),
            _ => return Err(r.err("bad mask byte")),
        }
    }
    let labels = r.take(cells)?.to_vec();
    r.finish()?;
    Ok(QueryRecord {
        query_id,
        place_id,
        heading,
        position,
        obs: QueryObservation {
            rows,
            cols,
            channels,
            raw,
            mask,
            gt_labels: SemanticImage { rows, cols, labels },
        },
    })
}
