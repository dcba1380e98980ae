//! Minority-class augmentation: consistent and randomized defect
//! transplants, oversampling with replacement, and generator-backed
//! synthesis.

mod mask;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{save_png, ClassLabel, DatasetManifest, ImageTile, ManifestEntry, Split};
use crate::error::{Error, Result};

pub use mask::{extract_mask, BBox, Background, DefectMask, Extraction, MaskPixel, DEFAULT_TAU};

/// Pastes mask pixels onto `base` at their recorded coordinates and relabels
/// the result with the mask's class.
pub fn cds(base: &ImageTile, mask: &DefectMask) -> Result<ImageTile> {
    place(base, mask, 0, 0)
}

/// Translation `(d_row, d_col)` that [`rds`] applies for this seed.
pub fn rds_offset(base: &ImageTile, mask: &DefectMask, seed: u64) -> Result<(isize, isize)> {
    let b = mask.bbox();
    if b.height() > base.height() || b.width() > base.width() || mask.source_shape[2] > base.channels() {
        return Err(Error::contract(format!(
            "{}x{} defect does not fit a {}x{} image",
            b.height(),
            b.width(),
            base.height(),
            base.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=base.height() - b.height());
    let left = rng.random_range(0..=base.width() - b.width());
    Ok((top as isize - b.min_row as isize, left as isize - b.min_col as isize))
}

/// Pastes the mask at a uniformly random in-bounds translation.
pub fn rds(base: &ImageTile, mask: &DefectMask, seed: u64) -> Result<ImageTile> {
    let (dr, dc) = rds_offset(base, mask, seed)?;
    place(base, mask, dr, dc)
}

fn place(base: &ImageTile, mask: &DefectMask, dr: isize, dc: isize) -> Result<ImageTile> {
    let b = mask.bbox();
    let fits = |lo: usize, hi: usize, d: isize, n: usize| lo as isize + d >= 0 && ((hi as isize + d) as usize) < n;
    if !fits(b.min_row, b.max_row, dr, base.height()) || !fits(b.min_col, b.max_col, dc, base.width()) {
        return Err(Error::contract(format!(
            "mask box rows {}..={} cols {}..={} shifted by ({dr}, {dc}) leaves the {}x{} image",
            b.min_row,
            b.max_row,
            b.min_col,
            b.max_col,
            base.height(),
            base.width()
        )));
    }
    let mut out = base.clone().with_class(mask.source_class);
    for p in mask.pixels() {
        if p.channel >= base.channels() {
            return Err(Error::contract(format!("mask channel {} not in image", p.channel)));
        }
        out.set((p.row as isize + dr) as usize, (p.col as isize + dc) as usize, p.channel, p.value);
    }
    Ok(out)
}

/// Split whose entries a balancing pass counts and extends: the training
/// entries when the manifest has been split, otherwise the untagged ones.
pub fn working_split(manifest: &DatasetManifest) -> Split {
    if manifest.entries().iter().any(|e| e.split == Split::Train) {
        Split::Train
    } else {
        Split::Unsplit
    }
}

fn members(manifest: &DatasetManifest, class: ClassLabel, split: Split) -> Vec<&ManifestEntry> {
    manifest
        .entries()
        .iter()
        .filter(|e| e.class == class && e.split == split)
        .collect()
}

/// Oversamples `class` to `target` entries by appending seeded duplicates
/// of existing entries.
pub fn sam(manifest: &DatasetManifest, class: ClassLabel, target: usize, seed: u64) -> Result<DatasetManifest> {
    let split = working_split(manifest);
    let pool: Vec<ManifestEntry> = members(manifest, class, split).into_iter().cloned().collect();
    if pool.is_empty() {
        return Err(Error::MissingResource {
            resource: "images to oversample",
            class: class.to_string(),
        });
    }
    if target < pool.len() {
        return Err(Error::contract(format!(
            "target {target} for {class} is below its current count {}",
            pool.len()
        )));
    }
    let mut out = manifest.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in pool.len()..target {
        out.push(pool[rng.random_range(0..pool.len())].clone())?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Cds,
    Rds,
    Sam,
    Gan,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Cds => "cds",
            Strategy::Rds => "rds",
            Strategy::Sam => "sam",
            Strategy::Gan => "gan",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cds" => Ok(Strategy::Cds),
            "rds" => Ok(Strategy::Rds),
            "sam" => Ok(Strategy::Sam),
            "gan" => Ok(Strategy::Gan),
            _ => Err(format!("unknown strategy {s:?} (expected cds, rds, sam or gan)")),
        }
    }
}

/// Source of synthetic images for one class.
pub trait ClassGenerator {
    fn class(&self) -> ClassLabel;
    fn sample(&self, n: usize, seed: u64) -> Result<Vec<ImageTile>>;
}

/// Inputs a balancing strategy may draw on.
#[derive(Default)]
pub struct Resources<'a> {
    /// Defect masks per minority class (cds, rds).
    pub masks: BTreeMap<ClassLabel, Vec<DefectMask>>,
    /// Defect-free tiles to paste onto (cds, rds).
    pub clean: Vec<ImageTile>,
    /// One trained generator per minority class (gan).
    pub generators: BTreeMap<ClassLabel, &'a dyn ClassGenerator>,
}

impl<'a> Resources<'a> {
    /// Masks read from the `.mask` file next to each defect tile of the
    /// working split, or, when absent, found by thresholding against a 5×5
    /// median background. Clean tiles are the working split's defect-free
    /// images.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let split = working_split(manifest);
        let mut res = Resources::default();
        for e in manifest.entries().iter().filter(|e| e.split == split) {
            if !e.class.is_defect() {
                res.clean.push(e.load()?);
                continue;
            }
            let mask_path = mask_path_for(&e.path);
            let mask = if mask_path.is_file() {
                Some(DefectMask::load(&mask_path)?)
            } else {
                match extract_mask(
                    &e.load()?,
                    Extraction::Threshold {
                        tau: DEFAULT_TAU,
                        background: Background::Median5,
                    },
                ) {
                    Ok(m) => Some(m),
                    Err(Error::EmptyMask) => None,
                    Err(other) => return Err(other),
                }
            };
            if let Some(m) = mask {
                res.masks.entry(e.class).or_default().push(m.with_class(e.class));
            }
        }
        Ok(res)
    }
}

/// `tile.png` → `tile.mask`.
pub fn mask_path_for(tile: &Path) -> PathBuf {
    tile.with_extension("mask")
}

/// Brings every class in `targets` up to its target count within the
/// working split. Generated tiles are written as
/// `out_root/<class>/synthetic_<strategy>_<n>.png`; `sam` only appends
/// references to existing files. Classes not named in `targets` are left
/// untouched.
pub fn balance(
    manifest: &DatasetManifest,
    strategy: Strategy,
    targets: &[(ClassLabel, usize)],
    seed: u64,
    resources: &Resources<'_>,
    out_root: &Path,
) -> Result<DatasetManifest> {
    let split = working_split(manifest);
    let needs: Vec<(ClassLabel, usize)> = targets
        .iter()
        .map(|&(class, target)| {
            let have = members(manifest, class, split).len();
            if target < have {
                return Err(Error::contract(format!(
                    "target {target} for {class} is below its current count {have}"
                )));
            }
            Ok((class, target - have))
        })
        .collect::<Result<_>>()?;
    // Check every resource up front so a failure leaves nothing half-written.
    for &(class, need) in &needs {
        if need == 0 {
            continue;
        }
        let missing = match strategy {
            Strategy::Sam => members(manifest, class, split).is_empty().then_some("images to oversample"),
            Strategy::Cds | Strategy::Rds => {
                if resources.masks.get(&class).is_none_or(|m| m.is_empty()) {
                    Some("defect masks")
                } else if resources.clean.is_empty() {
                    Some("defect-free base images")
                } else {
                    None
                }
            }
            Strategy::Gan => (!resources.generators.contains_key(&class)).then_some("trained generator"),
        };
        if let Some(resource) = missing {
            return Err(Error::MissingResource {
                resource,
                class: class.to_string(),
            });
        }
    }

    let mut out = manifest.clone();
    for (k, &(class, need)) in needs.iter().enumerate() {
        if need == 0 {
            continue;
        }
        let class_seed = seed.wrapping_add(k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        if strategy == Strategy::Sam {
            let target = members(&out, class, split).len() + need;
            out = sam(&out, class, target, class_seed)?;
            continue;
        }
        let tiles = match strategy {
            Strategy::Gan => resources.generators[&class].sample(need, class_seed)?,
            _ => {
                let masks = &resources.masks[&class];
                let mut rng = ChaCha8Rng::seed_from_u64(class_seed);
                let mut tiles = Vec::with_capacity(need);
                for _ in 0..need {
                    let base = &resources.clean[rng.random_range(0..resources.clean.len())];
                    let mask = &masks[rng.random_range(0..masks.len())];
                    let mask = mask.clone().with_class(class);
                    tiles.push(match strategy {
                        Strategy::Cds => cds(base, &mask)?,
                        _ => rds(base, &mask, rng.random())?,
                    });
                }
                tiles
            }
        };
        let dir = out_root.join(class.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, tile) in tiles.into_iter().enumerate() {
            let path = dir.join(format!("synthetic_{strategy}_{i:05}.png"));
            save_png(&tile, &path)?;
            out.push(ManifestEntry::new(path, class, split))?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabelSet;

    fn gradient(h: usize, w: usize) -> ImageTile {
        let px = (0..h * w * 3).map(|i| (i % 97) as f32 / 96.0).collect();
        ImageTile::new(h, w, 3, px, "base", ClassLabel::NoDefect).unwrap()
    }

    fn blob() -> DefectMask {
        let px = [(2, 3), (2, 4), (3, 3), (4, 5)]
            .iter()
            .flat_map(|&(r, c)| (0..3).map(move |ch| MaskPixel { row: r, col: c, channel: ch, value: 0.95 }))
            .collect();
        DefectMask::new(px, ClassLabel::Seeded3, [16, 16, 3]).unwrap()
    }

    #[test]
    fn cds_touches_only_mask_pixels_and_is_idempotent() {
        let base = gradient(16, 16);
        let m = blob();
        let out = cds(&base, &m).unwrap();
        assert_eq!(out.class, ClassLabel::Seeded3);
        let masked: Vec<usize> = m.pixels().iter().map(|p| base.index(p.row, p.col, p.channel)).collect();
        for i in 0..base.pixels().len() {
            if masked.contains(&i) {
                assert_eq!(out.pixels()[i], 0.95);
            } else {
                assert_eq!(out.pixels()[i], base.pixels()[i]);
            }
        }
        assert_eq!(cds(&out, &m).unwrap(), out);
    }

    #[test]
    fn cds_rejects_masks_outside_the_base() {
        assert!(cds(&gradient(4, 4), &blob()).is_err());
    }

    #[test]
    fn rds_sweep_stays_in_bounds_and_moves() {
        let one = DefectMask::new(vec![MaskPixel { row: 0, col: 0, channel: 0, value: 1.0 }], ClassLabel::Seeded2, [8, 8, 3]).unwrap();
        let base = ImageTile::filled(8, 8, 3, 0.0, ClassLabel::NoDefect);
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..200 {
            let (dr, dc) = rds_offset(&base, &one, seed).unwrap();
            assert!((0..8).contains(&dr) && (0..8).contains(&dc));
            seen.insert((dr, dc));
        }
        assert!(seen.len() > 10);
        assert_eq!(rds(&base, &one, 4).unwrap(), rds(&base, &one, 4).unwrap());
    }

    #[test]
    fn rds_rejects_oversized_masks() {
        assert!(rds(&gradient(2, 2), &blob(), 0).is_err());
    }

    fn manifest(counts: &[(ClassLabel, usize)]) -> DatasetManifest {
        let mut m = DatasetManifest::new(LabelSet::Hr1);
        for &(c, n) in counts {
            for i in 0..n {
                m.push(ManifestEntry::new(format!("{c}/{i}.png"), c, Split::Unsplit)).unwrap();
            }
        }
        m
    }

    #[test]
    fn sam_grows_a_19_item_class_to_500() {
        let m = manifest(&[(ClassLabel::NoDefect, 30), (ClassLabel::Seeded2, 19)]);
        let out = sam(&m, ClassLabel::Seeded2, 500, 3).unwrap();
        assert_eq!(out.count(ClassLabel::Seeded2), 500);
        assert_eq!(out.count(ClassLabel::NoDefect), 30);
        let originals: Vec<_> = m.entries().iter().map(|e| e.path.clone()).collect();
        assert!(out.entries()[m.len()..].iter().all(|e| originals.contains(&e.path)));
        assert_eq!(out, sam(&m, ClassLabel::Seeded2, 500, 3).unwrap());
        assert_eq!(sam(&m, ClassLabel::Seeded2, 19, 3).unwrap(), m);
        assert!(sam(&m, ClassLabel::Seeded1, 5, 0).is_err());
    }

    #[test]
    fn balance_checks_resources_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(&[(ClassLabel::NoDefect, 3), (ClassLabel::Seeded1, 1)]);
        let err = balance(&m, Strategy::Gan, &[(ClassLabel::Seeded1, 4)], 0, &Resources::default(), dir.path()).unwrap_err();
        assert!(err.to_string().contains("seeded_1"), "{err}");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        let same = balance(&m, Strategy::Cds, &[(ClassLabel::Seeded1, 1)], 0, &Resources::default(), dir.path()).unwrap();
        assert_eq!(same, m);
    }

    #[test]
    fn balance_with_cds_writes_labelled_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(&[(ClassLabel::NoDefect, 3), (ClassLabel::Seeded3, 1)]);
        let mut res = Resources::default();
        res.clean.push(gradient(16, 16));
        res.masks.insert(ClassLabel::Seeded3, vec![blob()]);
        let out = balance(&m, Strategy::Cds, &[(ClassLabel::Seeded3, 5)], 1, &res, dir.path()).unwrap();
        assert_eq!(out.count(ClassLabel::Seeded3), 5);
        assert_eq!(out.count(ClassLabel::NoDefect), 3);
        let want = cds(&res.clean[0], &blob()).unwrap();
        for e in &out.entries()[m.len()..] {
            let tile = e.load().unwrap();
            assert_eq!(tile.class, ClassLabel::Seeded3);
            for (a, b) in tile.pixels().iter().zip(want.pixels()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
