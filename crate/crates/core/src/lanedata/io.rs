//! Dataset directory layout: `images/NNNNN.ppm`, `masks/NNNNN.pgm`,
//! `lanes/NNNNN.json`, plus `manifest.json` with dims, class count, and the
//! generator parameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::{read_pgm_mask, read_ppm, write_pgm_mask, write_ppm};
use super::{DataError, GenParams, LanePolyline, LaneScene, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub label_width: usize,
    pub count: usize,
    pub seed: u64,
    pub params: GenParams,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<LaneScene>,
}

#[derive(Serialize, Deserialize)]
struct LaneRecord {
    existence: Vec<bool>,
    lanes: Vec<LanePolyline>,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn file_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::File { path: path.display().to_string(), reason: reason.into() }
}

fn scene_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("images").join(format!("{index:05}.ppm")),
        dir.join("masks").join(format!("{index:05}.pgm")),
        dir.join("lanes").join(format!("{index:05}.json")),
    )
}

/// Write a dataset directory. The manifest count must match the scene list.
pub fn save_dataset(dir: &Path, scenes: &[LaneScene], manifest: &Manifest) -> Result<()> {
    if manifest.count != scenes.len() {
        return Err(file_err(dir, format!("manifest count {} != {} scenes", manifest.count, scenes.len())));
    }
    for sub in ["images", "masks", "lanes"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(&dir.join(sub), e))?;
    }
    for (i, scene) in scenes.iter().enumerate() {
        let (img_path, mask_path, lane_path) = scene_paths(dir, i);
        write_ppm(&img_path, &scene.image)?;
        write_pgm_mask(&mask_path, &scene.mask)?;
        let record = LaneRecord { existence: scene.existence.clone(), lanes: scene.lanes.clone() };
        let json = serde_json::to_string_pretty(&record)
            .map_err(|e| file_err(&lane_path, format!("encoding lanes: {e}")))?;
        std::fs::write(&lane_path, json).map_err(|e| io_err(&lane_path, e))?;
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| file_err(&manifest_path, format!("encoding manifest: {e}")))?;
    std::fs::write(&manifest_path, json).map_err(|e| io_err(&manifest_path, e))?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| file_err(&manifest_path, format!("parsing manifest: {e}")))?;

    let mut scenes = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let (img_path, mask_path, lane_path) = scene_paths(dir, i);
        let image = read_ppm(&img_path)?;
        let mask = read_pgm_mask(&mask_path)?;
        if mask.height() != manifest.height || mask.width() != manifest.width {
            return Err(file_err(
                &mask_path,
                format!(
                    "mask {}x{} does not match manifest {}x{}",
                    mask.height(),
                    mask.width(),
                    manifest.height,
                    manifest.width
                ),
            ));
        }
        if (mask.max_class() as usize) >= manifest.num_classes {
            return Err(file_err(
                &mask_path,
                format!("class {} out of range for {} classes", mask.max_class(), manifest.num_classes),
            ));
        }
        let text = std::fs::read_to_string(&lane_path).map_err(|e| io_err(&lane_path, e))?;
        let record: LaneRecord = serde_json::from_str(&text)
            .map_err(|e| file_err(&lane_path, format!("parsing lanes: {e}")))?;
        scenes.push(LaneScene {
            image,
            mask,
            lanes: record.lanes,
            existence: record.existence,
            label_width: manifest.label_width,
        });
    }
    Ok(Dataset { manifest, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lanedata::{gen_dataset, GenParams};

    fn manifest_for(params: &GenParams, seed: u64, count: usize) -> Manifest {
        Manifest {
            width: params.width,
            height: params.height,
            channels: params.channels,
            num_classes: params.num_classes(),
            label_width: params.lane_width_px,
            count,
            seed,
            params: params.clone(),
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let params = GenParams::default();
        let manifest = manifest_for(&params, 0, 0);
        save_dataset(dir.path(), &[], &manifest).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, manifest);
        assert!(back.scenes.is_empty());
    }

    #[test]
    fn dataset_round_trip_preserves_labels_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let params = GenParams::default();
        let scenes = gen_dataset(&params, 5, 4).unwrap();
        let manifest = manifest_for(&params, 5, 4);
        save_dataset(dir.path(), &scenes, &manifest).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.scenes.len(), 4);
        for (orig, loaded) in scenes.iter().zip(&back.scenes) {
            assert_eq!(orig.mask, loaded.mask, "masks are lossless");
            assert_eq!(orig.existence, loaded.existence);
            assert_eq!(orig.lanes, loaded.lanes, "lattice coords survive JSON");
            assert_eq!(orig.label_width, loaded.label_width);
            for (a, b) in orig.image.data().iter().zip(loaded.image.data()) {
                assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn missing_scene_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let params = GenParams::default();
        let scenes = gen_dataset(&params, 1, 2).unwrap();
        save_dataset(dir.path(), &scenes, &manifest_for(&params, 1, 2)).unwrap();
        std::fs::remove_file(dir.path().join("masks/00001.pgm")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("00001.pgm"), "{err}");
    }
}
