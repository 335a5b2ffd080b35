//! Patch extraction: the unlabeled pretraining set and the labeled long-tail
//! set, plus label-fraction subsampling.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::mosaic::Mosaic;
use crate::augment::Image;
use crate::rng::{stream, Tag};
use crate::{Error, Result};

/// Where a patch was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchOrigin {
    pub mosaic: usize,
    pub top: usize,
    pub left: usize,
}

/// Unlabeled patches of one fixed size.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub patches: Vec<Image>,
    pub origins: Vec<PatchOrigin>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Label of a background patch.
pub const BACKGROUND: u8 = 0;
/// Label of a patch containing at least one whole animal.
pub const FOREGROUND: u8 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub patches: Vec<Image>,
    pub labels: Vec<u8>,
    pub origins: Vec<PatchOrigin>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// `(background, foreground)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let fg = self.labels.iter().filter(|&&l| l == FOREGROUND).count();
        (self.labels.len() - fg, fg)
    }

    fn push(&mut self, patch: Image, label: u8, origin: PatchOrigin) {
        self.patches.push(patch);
        self.labels.push(label);
        self.origins.push(origin);
    }

    /// Keeps the samples at `keep` (ascending).
    pub fn select(&self, keep: &[usize]) -> Split {
        Split {
            patches: keep.iter().map(|&i| self.patches[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            origins: keep.iter().map(|&i| self.origins[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    /// Mosaic ids of the train, val and test splits.
    pub mosaics: [Vec<usize>; 3],
}

/// Unlabeled pretraining extraction: `per_image` uniform random crops from
/// every mosaic plus `extra` more from mosaics that contain animals.
pub fn extract_pre<R: Rng + ?Sized>(
    mosaics: &[Mosaic],
    patch: usize,
    per_image: usize,
    extra: usize,
    rng: &mut R,
) -> Result<PatchSet> {
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let mut out = PatchSet {
        size: patch,
        patches: Vec::new(),
        origins: Vec::new(),
    };
    for (id, m) in mosaics.iter().enumerate() {
        let (h, w) = (m.image.height(), m.image.width());
        if patch > h || patch > w {
            return Err(Error::invalid(format!("patch {patch} larger than mosaic {id} ({h}x{w})")));
        }
        let count = per_image + if m.boxes.is_empty() { 0 } else { extra };
        for _ in 0..count {
            let top = rng.random_range(0..=h - patch);
            let left = rng.random_range(0..=w - patch);
            out.patches.push(m.image.crop(top, left, patch, patch)?);
            out.origins.push(PatchOrigin { mosaic: id, top, left });
        }
    }
    Ok(out)
}

/// Long-tail extraction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LtOptions {
    pub bg_patch: usize,
    pub fg_patch: usize,
    /// Background patches per foreground patch in the train split.
    pub bg_per_fg: usize,
    /// Train, val and test mosaic shares.
    pub ratios: [usize; 3],
    /// Largest offset between an animal box centre and its patch centre.
    pub fg_jitter: usize,
    pub seed: u64,
}

/// Split sizes of `n` items in the given ratios. Each split receives at
/// least one item when `n` allows it.
fn split_sizes(n: usize, ratios: [usize; 3]) -> [usize; 3] {
    let total: usize = ratios.iter().sum();
    let share = |r: usize| (n * r + total / 2) / total;
    let mut val = share(ratios[1]);
    let mut test = share(ratios[2]);
    if n >= 3 {
        val = val.max(1);
        test = test.max(1);
    }
    while val + test > n {
        if val >= test {
            val -= 1;
        } else {
            test -= 1;
        }
    }
    [n - val - test, val, test]
}

/// Mosaic ids per split. Mosaics with and without animals are split
/// separately so that every split gets foreground material.
pub fn split_mosaics(mosaics: &[Mosaic], ratios: [usize; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if ratios.iter().any(|&r| r == 0) {
        return Err(Error::invalid("split ratios must be positive"));
    }
    let mut rng = stream(seed, 0, 0, Tag::Split);
    let mut out: [Vec<usize>; 3] = Default::default();
    for with_animals in [true, false] {
        let mut ids: Vec<usize> = (0..mosaics.len())
            .filter(|&i| mosaics[i].boxes.is_empty() != with_animals)
            .collect();
        ids.shuffle(&mut rng);
        let sizes = split_sizes(ids.len(), ratios);
        let mut rest = &ids[..];
        for (s, n) in sizes.iter().enumerate() {
            out[s].extend_from_slice(&rest[..*n]);
            rest = &rest[*n..];
        }
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    Ok(out)
}

/// Range of window offsets along one axis that keep `[lo, lo+len)` inside
/// a window of `size` placed within `[0, extent)`.
fn containing_range(lo: usize, len: usize, size: usize, extent: usize) -> Option<(usize, usize)> {
    if len > size || size > extent {
        return None;
    }
    let min = (lo + len).saturating_sub(size);
    let max = lo.min(extent - size);
    (min <= max).then_some((min, max))
}

fn jittered_offset<R: Rng + ?Sized>(
    lo: usize,
    len: usize,
    size: usize,
    extent: usize,
    jitter: usize,
    rng: &mut R,
) -> Option<usize> {
    let (min, max) = containing_range(lo, len, size, extent)?;
    // Offset that centres the box, then shifted by at most `jitter`.
    let centred = (2 * lo + len) as isize / 2 - size as isize / 2;
    let a = (centred - jitter as isize).max(min as isize);
    let b = (centred + jitter as isize).min(max as isize);
    if a <= b {
        Some(rng.random_range(a as i64..=b as i64) as usize)
    } else {
        Some(if centred < min as isize { min } else { max })
    }
}

const BG_TRIES_PER_PATCH: usize = 1000;

fn build_split<R: Rng + ?Sized>(
    mosaics: &[Mosaic],
    ids: &[usize],
    opts: &LtOptions,
    bg_per_fg: Option<usize>,
    name: &str,
    rng: &mut R,
) -> Result<Split> {
    let mut split = Split::default();
    let (f, b) = (opts.fg_patch, opts.bg_patch);
    for &id in ids {
        let m = &mosaics[id];
        let (h, w) = (m.image.height(), m.image.width());
        if b > h || b > w || f > h || f > w {
            return Err(Error::invalid(format!("patch sizes {b}/{f} exceed mosaic {id} ({h}x{w})")));
        }
        for bx in &m.boxes {
            let top = jittered_offset(bx.y, bx.h, f, h, opts.fg_jitter, rng);
            let left = jittered_offset(bx.x, bx.w, f, w, opts.fg_jitter, rng);
            if let (Some(top), Some(left)) = (top, left) {
                split.push(m.image.crop(top, left, f, f)?, FOREGROUND, PatchOrigin { mosaic: id, top, left });
            }
        }
    }
    let fg = split.len();
    if fg == 0 {
        return Err(Error::Insufficient(format!(
            "{name} split has no foreground patches ({} mosaics)",
            ids.len()
        )));
    }
    let bg = fg * bg_per_fg.unwrap_or(1);
    let mut made = 0;
    let mut tries = 0;
    while made < bg {
        if tries >= BG_TRIES_PER_PATCH * bg {
            return Err(Error::Insufficient(format!(
                "{name} split: found {made} of {bg} box-free background windows"
            )));
        }
        tries += 1;
        let id = ids[rng.random_range(0..ids.len())];
        let m = &mosaics[id];
        let top = rng.random_range(0..=m.image.height() - b);
        let left = rng.random_range(0..=m.image.width() - b);
        if m.boxes.iter().any(|bx| bx.intersects(top, left, b, b)) {
            continue;
        }
        split.push(m.image.crop(top, left, b, b)?, BACKGROUND, PatchOrigin { mosaic: id, top, left });
        made += 1;
    }
    Ok(split)
}

/// Labeled long-tail extraction. Foreground patches are crops jittered
/// around each ground-truth box that keep the whole box; background patches
/// are random crops touching no box. The train split holds `bg_per_fg`
/// background patches per foreground patch, val and test are balanced.
pub fn extract_lt(mosaics: &[Mosaic], opts: &LtOptions) -> Result<LabeledDataset> {
    if opts.bg_patch == 0 || opts.fg_patch == 0 || opts.bg_per_fg == 0 {
        return Err(Error::invalid("patch sizes and bg_per_fg must be positive"));
    }
    let ids = split_mosaics(mosaics, opts.ratios, opts.seed)?;
    let names = ["train", "val", "test"];
    let mut splits = Vec::with_capacity(3);
    for (s, ids) in ids.iter().enumerate() {
        // One independent stream per split.
        let mut rng = stream(opts.seed, 0, s as u64, Tag::ExtractLt);
        let ratio = (s == 0).then_some(opts.bg_per_fg);
        splits.push(build_split(mosaics, ids, opts, ratio, names[s], &mut rng)?);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(LabeledDataset {
        train,
        val,
        test,
        mosaics: ids,
    })
}

/// Keeps `⌊fraction·n_c⌋` random train samples of every class `c`, in their
/// original order. Val and test are untouched.
pub fn subsample_labels<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    fraction: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("label fraction {fraction} not in (0, 1]")));
    }
    let mut keep = Vec::new();
    for class in [BACKGROUND, FOREGROUND] {
        let members: Vec<usize> = (0..dataset.train.len())
            .filter(|&i| dataset.train.labels[i] == class)
            .collect();
        let n = libm::floor(fraction * members.len() as f64) as usize;
        if class == FOREGROUND && n == 0 {
            return Err(Error::Insufficient(format!(
                "fraction {fraction} keeps no foreground patch out of {}",
                members.len()
            )));
        }
        keep.extend(index::sample(rng, members.len(), n).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    Ok(LabeledDataset {
        train: dataset.train.select(&keep),
        val: dataset.val.clone(),
        test: dataset.test.clone(),
        mosaics: dataset.mosaics.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mosaic::{generate_mosaic, MosaicSpec};

    fn mosaics(n: usize, with_animals: usize) -> Vec<Mosaic> {
        (0..n)
            .map(|i| {
                let spec = MosaicSpec {
                    height: 128,
                    width: 128,
                    animals: if i < with_animals { 3 } else { 0 },
                    animals_beneath_trees: usize::from(i < with_animals && i % 2 == 0),
                    trees: 3,
                    grass_patches: 2,
                    tire_marks: 1,
                    dead_trunks: 2,
                    animal_len: (4, 12),
                };
                generate_mosaic(&spec, &mut stream(5, 0, i as u64, Tag::Mosaic)).unwrap()
            })
            .collect()
    }

    fn opts() -> LtOptions {
        LtOptions {
            bg_patch: 32,
            fg_patch: 24,
            bg_per_fg: 18,
            ratios: [8, 1, 1],
            fg_jitter: 4,
            seed: 3,
        }
    }

    #[test]
    fn pre_counts() {
        let ms = mosaics(10, 4);
        let set = extract_pre(&ms, 32, 15, 15, &mut stream(0, 0, 0, Tag::ExtractPre)).unwrap();
        assert_eq!(set.len(), 210);
        assert!(set.patches.iter().all(|p| p.height() == 32 && p.width() == 32));
        let set = extract_pre(&ms[4..5], 32, 15, 15, &mut stream(0, 0, 0, Tag::ExtractPre)).unwrap();
        assert_eq!(set.len(), 15);
    }

    #[test]
    fn pre_patch_too_large() {
        let ms = mosaics(1, 0);
        assert!(extract_pre(&ms, 129, 15, 15, &mut stream(0, 0, 0, Tag::ExtractPre)).is_err());
    }

    #[test]
    fn split_sizes_follow_ratio() {
        assert_eq!(split_sizes(10, [8, 1, 1]), [8, 1, 1]);
        assert_eq!(split_sizes(20, [8, 1, 1]), [16, 2, 2]);
        assert_eq!(split_sizes(3, [8, 1, 1]), [1, 1, 1]);
        assert_eq!(split_sizes(2, [8, 1, 1]), [2, 0, 0]);
        assert_eq!(split_sizes(0, [8, 1, 1]), [0, 0, 0]);
    }

    #[test]
    fn lt_protocol() {
        let ms = mosaics(20, 12);
        let ds = extract_lt(&ms, &opts()).unwrap();
        let (bg, fg) = ds.train.class_counts();
        assert_eq!(bg, 18 * fg);
        for split in [&ds.val, &ds.test] {
            let (bg, fg) = split.class_counts();
            assert_eq!(bg, fg);
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            assert!(ds.mosaics[a].iter().all(|m| !ds.mosaics[b].contains(m)));
        }
        for split in [&ds.train, &ds.val, &ds.test] {
            for (o, &l) in split.origins.iter().zip(&split.labels) {
                let boxes = &ms[o.mosaic].boxes;
                if l == FOREGROUND {
                    assert!(boxes.iter().any(|b| b.inside(o.top, o.left, 24, 24)));
                } else {
                    assert!(boxes.iter().all(|b| !b.intersects(o.top, o.left, 32, 32)));
                }
            }
        }
    }

    #[test]
    fn lt_without_animals_fails() {
        let ms = mosaics(10, 0);
        assert!(matches!(extract_lt(&ms, &opts()), Err(Error::Insufficient(_))));
    }

    #[test]
    fn subsample_identity_and_floor() {
        let ms = mosaics(20, 12);
        let ds = extract_lt(&ms, &opts()).unwrap();
        let same = subsample_labels(&ds, 1.0, &mut stream(0, 0, 0, Tag::Subsample)).unwrap();
        assert_eq!(same, ds);
        let (bg, fg) = ds.train.class_counts();
        let sub = subsample_labels(&ds, 0.5, &mut stream(0, 0, 0, Tag::Subsample)).unwrap();
        assert_eq!(sub.train.class_counts(), (bg / 2, fg / 2));
        assert!(subsample_labels(&ds, 0.0, &mut stream(0, 0, 0, Tag::Subsample)).is_err());
        assert!(subsample_labels(&ds, 1e-6, &mut stream(0, 0, 0, Tag::Subsample)).is_err());
    }
}
