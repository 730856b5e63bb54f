//! On-disk dataset layout:
//!
//! ```text
//! <root>/tiles/<tile_id>.png
//! <root>/annotations.csv     tile_id,label,x_min,y_min,x_max,y_max
//! <root>/slides/<slide_id>.json
//! ```
//!
//! Positive tiles get one annotation row per box; negative tiles get a
//! single row with empty box fields.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Slide, SlideManifest, SynthDataset};
use crate::tiling::{load_image, save_image};
use crate::types::{BBox, Label, TileImage};

pub const ANNOTATIONS_FILE: &str = "annotations.csv";

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    tile_id: String,
    label: String,
    x_min: Option<f32>,
    y_min: Option<f32>,
    x_max: Option<f32>,
    y_max: Option<f32>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &SynthDataset, root: &Path) -> Result<()> {
    create_dir(&root.join("tiles"))?;
    create_dir(&root.join("slides"))?;
    let all_tiles = ds.tiles.iter().chain(ds.slides.iter().flat_map(|s| s.tiles.iter()));
    let ann_path = root.join(ANNOTATIONS_FILE);
    let mut writer = csv::Writer::from_path(&ann_path)?;
    for tile in all_tiles {
        save_image(&tile.pixels, &root.join("tiles").join(format!("{}.png", tile.tile_id)))?;
        if tile.boxes.is_empty() {
            writer.serialize(AnnotationRow {
                tile_id: tile.tile_id.clone(),
                label: tile.label.as_str().into(),
                x_min: None,
                y_min: None,
                x_max: None,
                y_max: None,
            })?;
        }
        for b in &tile.boxes {
            writer.serialize(AnnotationRow {
                tile_id: tile.tile_id.clone(),
                label: tile.label.as_str().into(),
                x_min: Some(b.x_min),
                y_min: Some(b.y_min),
                x_max: Some(b.x_max),
                y_max: Some(b.y_max),
            })?;
        }
    }
    writer.flush().map_err(|e| Error::io(&ann_path, e))?;
    for slide in &ds.slides {
        let path = root.join("slides").join(format!("{}.json", slide.manifest.slide_id));
        let json = serde_json::to_string_pretty(&slide.manifest)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads the annotation table into `tile_id -> (label, boxes)`, keeping
/// file order.
pub fn read_annotations(root: &Path) -> Result<Vec<(String, Label, Vec<BBox>)>> {
    let path = root.join(ANNOTATIONS_FILE);
    if !path.exists() {
        return Err(Error::Dataset(format!("missing {}", path.display())));
    }
    let mut reader = csv::Reader::from_path(&path)?;
    let mut order: Vec<(String, Label, Vec<BBox>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: AnnotationRow = row?;
        let label = Label::parse(&row.label)?;
        let slot = *index.entry(row.tile_id.clone()).or_insert_with(|| {
            order.push((row.tile_id.clone(), label, Vec::new()));
            order.len() - 1
        });
        if let (Some(x0), Some(y0), Some(x1), Some(y1)) = (row.x_min, row.y_min, row.x_max, row.y_max) {
            order[slot].2.push(BBox::new(x0, y0, x1, y1));
        }
    }
    Ok(order)
}

pub fn read_slide_manifest(path: &Path) -> Result<SlideManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_tile(root: &Path, tile_id: &str, label: Label, boxes: Vec<BBox>) -> Result<TileImage> {
    let pixels = load_image(&root.join("tiles").join(format!("{tile_id}.png")))?;
    TileImage::new(tile_id, pixels, label, boxes)
}

/// Loads a dataset written by [`write_dataset`]. Tiles referenced by a slide
/// manifest are attached to that slide; all others are stand-alone tiles.
pub fn load_dataset(root: &Path) -> Result<SynthDataset> {
    let annotations = read_annotations(root)?;
    let mut manifests = Vec::new();
    let slide_dir = root.join("slides");
    if slide_dir.exists() {
        let mut paths: Vec<_> = fs::read_dir(&slide_dir)
            .map_err(|e| Error::io(&slide_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            manifests.push(read_slide_manifest(&p)?);
        }
    }
    let in_slide: HashSet<&str> = manifests
        .iter()
        .flat_map(|m| m.tile_ids.iter().map(String::as_str))
        .collect();
    let mut by_id = BTreeMap::new();
    let mut tiles = Vec::new();
    for (id, label, boxes) in annotations {
        let tile = load_tile(root, &id, label, boxes)?;
        if in_slide.contains(id.as_str()) {
            by_id.insert(id, tile);
        } else {
            tiles.push(tile);
        }
    }
    let mut slides = Vec::with_capacity(manifests.len());
    for manifest in manifests {
        let mut slide_tiles = Vec::with_capacity(manifest.tile_ids.len());
        for id in &manifest.tile_ids {
            let tile = by_id
                .remove(id)
                .ok_or_else(|| Error::Dataset(format!("slide {} references unknown tile {id}", manifest.slide_id)))?;
            slide_tiles.push(tile);
        }
        let any_pos = slide_tiles.iter().any(|t| t.label.is_positive());
        if any_pos != manifest.slide_label.is_positive() {
            return Err(Error::Dataset(format!(
                "slide {} label disagrees with its tiles",
                manifest.slide_id
            )));
        }
        slides.push(Slide {
            manifest,
            tiles: slide_tiles,
        });
    }
    Ok(SynthDataset { tiles, slides })
}

/// Loads the tiles of one slide manifest, resolving them against the
/// dataset root two levels above the manifest file.
pub fn load_slide(manifest_path: &Path, data_root: Option<&Path>) -> Result<Slide> {
    let manifest = read_slide_manifest(manifest_path)?;
    let root = match data_root {
        Some(r) => r.to_path_buf(),
        None => manifest_path
            .parent()
            .and_then(Path::parent)
            .ok_or_else(|| Error::Dataset("cannot infer dataset root from slide path".into()))?
            .to_path_buf(),
    };
    let ann: BTreeMap<String, (Label, Vec<BBox>)> = read_annotations(&root)
        .unwrap_or_default()
        .into_iter()
        .map(|(id, l, b)| (id, (l, b)))
        .collect();
    let mut tiles = Vec::with_capacity(manifest.tile_ids.len());
    for id in &manifest.tile_ids {
        let (label, boxes) = ann.get(id).cloned().unwrap_or((Label::Negative, Vec::new()));
        tiles.push(load_tile(&root, id, label, boxes)?);
    }
    Ok(Slide { manifest, tiles })
}
