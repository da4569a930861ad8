//! On-disk formats: KITTI-style clouds, labels and poses, plus the binary
//! index, checkpoint and query-observation files and the dataset layout.
//! Every multi-byte value is little-endian.

mod checkpoint;
mod dataset;
mod index;
mod kitti;
mod query;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use dataset::{
    load_dataset, load_meta, load_queries, synthetic_class_map, write_dataset, Dataset, DatasetMeta, MetaPlace,
};
pub use index::{index_file_size, load_index, read_index, save_index, write_index, INDEX_MAGIC, INDEX_VERSION};
pub use kitti::{
    load_cloud_bin, load_labels, load_poses, read_poses, remap_label, write_cloud_bin, write_labels, write_poses,
    ClassMap,
};
pub use query::{load_query, save_query, QueryRecord, QUERY_MAGIC};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Bounds-checked little-endian reader that reports byte offsets on failure.
pub(crate) struct Reader<'a> {
    path: PathBuf,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &Path, buf: &'a [u8]) -> Self {
        Self {
            path: path.to_path_buf(),
            buf,
            pos: 0,
        }
    }

    pub(crate) fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    pub(crate) fn err_at(&self, offset: usize, reason: String) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: offset as u64,
            reason,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            self.pos = at;
            return Err(self.err("non-finite value"));
        }
        Ok(v)
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            self.pos = at;
            return Err(self.err("non-finite value"));
        }
        Ok(v)
    }

    pub(crate) fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let got = self.take(expected.len()).map_err(|_| self.err("bad magic"))?;
        if got != expected {
            self.pos -= expected.len();
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn config(&mut self) -> Result<crate::config::Config> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        let text = std::str::from_utf8(bytes).map_err(|_| self.err_at(at, "config is not UTF-8".into()))?;
        crate::config::Config::from_json(text).map_err(|e| self.err_at(at, format!("config: {e}")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_config(out: &mut Vec<u8>, cfg: &crate::config::Config) {
    let json = cfg.to_json();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
