//! On-disk layouts of mosaic collections and extracted patch sets.
//!
//! A mosaic directory holds `mosaics/mosaic_NNNN.ppm` and `boxes.txt`. A
//! patch directory holds one PPM per patch under a directory named after
//! its split and a `manifest.txt` indexing them with paths relative to the
//! patch directory.

use std::path::{Path, PathBuf};

use aerocon_core::augment::Image;
use aerocon_core::data::{LabeledDataset, Mosaic, PatchOrigin, PatchSet, Split};

use crate::error::{self, AppError, Result};
use crate::manifest::{self, Entry, Manifest};
use crate::ppm;

pub const BOXES_FILE: &str = "boxes.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PRE_SPLIT: &str = "pre";
pub const LT_SPLITS: [&str; 3] = ["train", "val", "test"];

fn mosaic_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("mosaics").join(format!("mosaic_{id:04}.ppm"))
}

pub fn write_mosaics(dir: &Path, mosaics: &[Mosaic]) -> Result<()> {
    let mut boxes = Vec::new();
    for (id, m) in mosaics.iter().enumerate() {
        ppm::write_image(&mosaic_path(dir, id), &m.image)?;
        boxes.extend(m.boxes.iter().map(|b| (id, *b)));
    }
    error::write(&dir.join(BOXES_FILE), manifest::render_boxes(&boxes))
}

/// Reads `mosaic_0000.ppm`, `mosaic_0001.ppm`, … up to the first gap.
pub fn read_mosaics(dir: &Path) -> Result<Vec<Mosaic>> {
    let boxes_path = dir.join(BOXES_FILE);
    let boxes = manifest::parse_boxes(&error::read_text(&boxes_path)?).map_err(|e| AppError::format(&boxes_path, e))?;
    let mut mosaics = Vec::new();
    loop {
        let path = mosaic_path(dir, mosaics.len());
        if !path.exists() {
            break;
        }
        mosaics.push(Mosaic {
            image: ppm::read_image(&path)?,
            boxes: Vec::new(),
        });
    }
    if mosaics.is_empty() {
        return Err(AppError::format(&dir.join("mosaics"), "no mosaic images"));
    }
    for (id, b) in boxes {
        let m = mosaics
            .get_mut(id)
            .ok_or_else(|| AppError::format(&boxes_path, format!("box refers to missing mosaic {id}")))?;
        m.boxes.push(b);
    }
    Ok(mosaics)
}

fn entry(split: &str, index: usize, label: Option<u8>, o: &PatchOrigin) -> Entry {
    Entry {
        path: format!("{split}/patch_{index:05}.ppm"),
        label,
        split: split.to_string(),
        mosaic: o.mosaic,
        x: o.left,
        y: o.top,
    }
}

fn write_entries<'a>(dir: &Path, items: impl Iterator<Item = (Entry, &'a Image)>) -> Result<()> {
    let mut m = Manifest::default();
    for (e, img) in items {
        ppm::write_image(&dir.join(&e.path), img)?;
        m.entries.push(e);
    }
    error::write(&dir.join(MANIFEST_FILE), m.render())
}

pub fn write_pretraining_set(dir: &Path, set: &PatchSet) -> Result<()> {
    write_entries(
        dir,
        set.patches
            .iter()
            .zip(&set.origins)
            .enumerate()
            .map(|(i, (p, o))| (entry(PRE_SPLIT, i, None, o), p)),
    )
}

pub fn write_labeled(dir: &Path, data: &LabeledDataset) -> Result<()> {
    let splits = [&data.train, &data.val, &data.test];
    write_entries(
        dir,
        LT_SPLITS.iter().zip(splits).flat_map(|(name, s)| {
            s.patches
                .iter()
                .zip(&s.labels)
                .zip(&s.origins)
                .enumerate()
                .map(move |(i, ((p, &l), o))| (entry(name, i, Some(l), o), p))
        }),
    )
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    Manifest::parse(&error::read_text(&path)?).map_err(|e| AppError::format(&path, e))
}

fn origin(e: &Entry) -> PatchOrigin {
    PatchOrigin {
        mosaic: e.mosaic,
        top: e.y,
        left: e.x,
    }
}

/// Every patch of a patch directory with its manifest entry.
pub fn read_patches(dir: &Path) -> Result<Vec<(Entry, Image)>> {
    read_manifest(dir)?
        .entries
        .into_iter()
        .map(|e| {
            let img = ppm::read_image(&dir.join(&e.path))?;
            Ok((e, img))
        })
        .collect()
}

/// The unlabeled pretraining patches of a directory written by
/// [`write_pretraining_set`].
pub fn read_pretraining_set(dir: &Path) -> Result<PatchSet> {
    let items: Vec<(Entry, Image)> = read_patches(dir)?
        .into_iter()
        .filter(|(e, _)| e.split == PRE_SPLIT)
        .collect();
    let Some(size) = items.first().map(|(_, p)| p.height()) else {
        return Err(AppError::format(&dir.join(MANIFEST_FILE), "no pretraining patches"));
    };
    if let Some((e, _)) = items.iter().find(|(_, p)| p.height() != size || p.width() != size) {
        return Err(AppError::format(&dir.join(&e.path), format!("patch is not {size}x{size}")));
    }
    Ok(PatchSet {
        size,
        origins: items.iter().map(|(e, _)| origin(e)).collect(),
        patches: items.into_iter().map(|(_, p)| p).collect(),
    })
}

/// The labeled train/val/test splits of a directory written by
/// [`write_labeled`]. Split mosaic lists hold the mosaics that contributed
/// at least one patch.
pub fn read_labeled(dir: &Path) -> Result<LabeledDataset> {
    let mut splits: [Split; 3] = Default::default();
    let mut mosaics: [Vec<usize>; 3] = Default::default();
    for (e, img) in read_patches(dir)? {
        let Some(s) = LT_SPLITS.iter().position(|&n| n == e.split) else {
            continue;
        };
        let label = e
            .label
            .ok_or_else(|| AppError::format(&dir.join(MANIFEST_FILE), format!("{} has no label", e.path)))?;
        splits[s].patches.push(img);
        splits[s].labels.push(label);
        splits[s].origins.push(origin(&e));
        if !mosaics[s].contains(&e.mosaic) {
            mosaics[s].push(e.mosaic);
        }
    }
    for (name, s) in LT_SPLITS.iter().zip(&splits) {
        if s.is_empty() {
            return Err(AppError::format(&dir.join(MANIFEST_FILE), format!("split {name} is empty")));
        }
    }
    mosaics.iter_mut().for_each(|m| m.sort_unstable());
    let [train, val, test] = splits;
    Ok(LabeledDataset {
        train,
        val,
        test,
        mosaics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use aerocon_core::config::DataConfig;
    use aerocon_core::data::{extract_lt, generate_mosaics, lt_options, pretraining_set};

    fn small() -> DataConfig {
        DataConfig {
            mosaics: 10,
            mosaic_size: 96,
            animal_mosaic_prob: 0.6,
            trees: 2,
            grass_patches: 2,
            dead_trunks: 1,
            pre_patch: 32,
            crops_per_image: 2,
            extra_crops_with_animals: 1,
            lt_bg_patch: 24,
            lt_fg_patch: 20,
            bg_per_fg: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn directories_round_trip() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let mosaics = generate_mosaics(&cfg).unwrap();
        write_mosaics(dir.path(), &mosaics).unwrap();
        let back = read_mosaics(dir.path()).unwrap();
        assert_eq!(back.len(), mosaics.len());
        for (a, b) in back.iter().zip(&mosaics) {
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(ppm::encode(&a.image), ppm::encode(&b.image));
        }

        let pre = pretraining_set(&back, &cfg).unwrap();
        let pre_dir = dir.path().join("pre");
        write_pretraining_set(&pre_dir, &pre).unwrap();
        let pre_back = read_pretraining_set(&pre_dir).unwrap();
        assert_eq!(pre_back.origins, pre.origins);
        assert_eq!(pre_back.patches, pre.patches);

        let lt = extract_lt(&back, &lt_options(&cfg)).unwrap();
        let lt_dir = dir.path().join("lt");
        write_labeled(&lt_dir, &lt).unwrap();
        let lt_back = read_labeled(&lt_dir).unwrap();
        assert_eq!((&lt_back.train, &lt_back.val, &lt_back.test), (&lt.train, &lt.val, &lt.test));
        for (got, all) in lt_back.mosaics.iter().zip(&lt.mosaics) {
            assert!(got.iter().all(|m| all.contains(m)));
        }
    }
}
