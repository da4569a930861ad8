//! Dataset directory layout:
//!
//! ```text
//! root/meta.json            config echo, class map, places, provenance
//! root/poses.txt            one sensor pose per cloud
//! root/velodyne/NNNNNN.bin  clouds in their sensor frame
//! root/labels/NNNNNN.label  raw per-point label ids
//! root/queries/<split>/NNNNNN.qobs
//! ```
//!
//! Cloud `i` belongs to place `places[i]`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kitti::{load_cloud_bin, load_labels, load_poses, write_cloud_bin, write_labels, write_poses, ClassMap};
use super::query::{load_query, QueryRecord};
use super::{read_file, write_file};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::matching::PlaceRecord;
use crate::types::{LabeledPointCloud, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaPlace {
    pub place_id: u32,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub provenance: String,
    pub config: Config,
    /// Raw label id to class id.
    pub class_map: ClassMap,
    pub places: Vec<MetaPlace>,
}

impl DatasetMeta {
    pub fn place_records(&self) -> Vec<PlaceRecord> {
        self.places
            .iter()
            .map(|p| PlaceRecord {
                place_id: p.place_id,
                position: p.position,
            })
            .collect()
    }
}

/// A loaded dataset; clouds are in the world frame.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub poses: Vec<Pose>,
    pub clouds: Vec<LabeledPointCloud>,
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

/// Writes the layout. `clouds` are in their sensor frames (see `poses`).
pub fn write_dataset(root: &Path, meta: &DatasetMeta, poses: &[Pose], clouds: &[LabeledPointCloud]) -> Result<()> {
    if poses.len() != clouds.len() || meta.places.len() != clouds.len() {
        return Err(Error::Shape(format!(
            "{} places, {} poses, {} clouds",
            meta.places.len(),
            poses.len(),
            clouds.len()
        )));
    }
    std::fs::create_dir_all(root.join("velodyne"))?;
    std::fs::create_dir_all(root.join("labels"))?;
    let json = serde_json::to_string_pretty(meta)?;
    write_file(&root.join("meta.json"), json.as_bytes())?;
    write_poses(&root.join("poses.txt"), poses)?;
    clouds.par_iter().enumerate().try_for_each(|(i, c)| {
        write_cloud_bin(&root.join("velodyne").join(frame_name(i, "bin")), c)?;
        write_labels(&root.join("labels").join(frame_name(i, "label")), c, &meta.class_map)
    })
}

pub fn load_meta(root: &Path) -> Result<DatasetMeta> {
    let path = root.join("meta.json");
    let text = read_file(&path)?;
    let meta: DatasetMeta = serde_json::from_slice(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    meta.config.clone().validate()?;
    Ok(meta)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta = load_meta(root)?;
    let poses = load_poses(&root.join("poses.txt"))?;
    if poses.len() != meta.places.len() {
        return Err(Error::InvalidInput(format!(
            "{} poses for {} places",
            poses.len(),
            meta.places.len()
        )));
    }
    let clouds = (0..poses.len())
        .into_par_iter()
        .map(|i| {
            let cloud = load_cloud_bin(&root.join("velodyne").join(frame_name(i, "bin")))?;
            let cloud = load_labels(&root.join("labels").join(frame_name(i, "label")), cloud, &meta.class_map)?;
            cloud.validate(meta.config.n_classes)?;
            Ok(cloud.transformed(&poses[i]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        meta,
        poses,
        clouds,
    })
}

/// All `.qobs` files in `dir`, sorted by file name. A missing directory is an
/// error; an empty one yields no queries.
pub fn load_queries(dir: &Path) -> Result<Vec<QueryRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "qobs"))
        .collect();
    paths.sort();
    paths.par_iter().map(|p| load_query(p)).collect()
}

/// Class map used by the synthetic generator, in SemanticKITTI raw ids.
pub fn synthetic_class_map() -> ClassMap {
    BTreeMap::from([(40, 2), (50, 3), (70, 4), (72, 1), (80, 5)])
}
