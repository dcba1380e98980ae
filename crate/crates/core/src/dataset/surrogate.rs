//! Procedural stand-in for thermal layer tiles.
//!
//! Each tile is a powder bed with an optional brighter part cross-section,
//! a gentle illumination gradient and a faint scan hatch. Defects are
//! intensity shapes painted on top:
//!
//! | class                   | shape                                      |
//! |-------------------------|--------------------------------------------|
//! | short-feed              | dark horizontal band across the tile       |
//! | had-defect              | 1-3 bright blobs                           |
//! | short-feed+had-defect   | both of the above                          |
//! | seeded_1                | one large dark pocket                      |
//! | seeded_2                | a cluster of small dark pores              |
//! | seeded_3                | a cluster of small bright spots            |
//!
//! Background and defects draw from separate seeded streams, so the clean
//! counterpart of any tile can be regenerated exactly. All values are
//! quantized to multiples of 1/255 and survive a PNG round trip unchanged.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{quantize, save_png, ClassLabel, DatasetManifest, ImageTile, LabelSet, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::kv::{KvFile, KvWriter};
use crate::synthdata::{mask_path_for, DefectMask, MaskPixel};

const CHANNELS: usize = 3;

/// Generator settings. Geometry is given as fractions of the tile size so
/// a config means the same thing at 64 and at 400 pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConfig {
    pub tile_size: usize,
    pub label_set: LabelSet,
    pub counts: BTreeMap<ClassLabel, usize>,
    pub seed: u64,
    pub powder_min: f32,
    pub powder_max: f32,
    /// Brightness of the part region above the powder.
    pub part_min: f32,
    pub part_max: f32,
    /// Largest end-to-end illumination drift across the tile.
    pub gradient_max: f32,
    pub hatch_amplitude: f32,
    /// Hatch period in pixels at a 64-pixel tile; scales with tile size.
    pub hatch_period: f32,
    /// Every defect pixel differs from its background by at least this.
    pub contrast: f32,
    /// Largest defect intensity offset.
    pub depth_max: f32,
    pub band_min: f32,
    pub band_max: f32,
    pub blob_min: f32,
    pub blob_max: f32,
    pub pocket_min: f32,
    pub pocket_max: f32,
    pub pore_min: f32,
    pub pore_max: f32,
    pub pore_count_min: usize,
    pub pore_count_max: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        let label_set = LabelSet::Hr1;
        let counts = label_set.classes().iter().copied().zip([1914, 42, 22, 22]).collect();
        Self {
            tile_size: 64,
            label_set,
            counts,
            seed: 0,
            powder_min: 0.30,
            powder_max: 0.38,
            part_min: 0.15,
            part_max: 0.25,
            gradient_max: 0.04,
            hatch_amplitude: 0.008,
            hatch_period: 6.0,
            contrast: 0.25,
            depth_max: 0.35,
            band_min: 0.10,
            band_max: 0.20,
            blob_min: 0.05,
            blob_max: 0.09,
            pocket_min: 0.10,
            pocket_max: 0.16,
            pore_min: 0.03,
            pore_max: 0.05,
            pore_count_min: 3,
            pore_count_max: 6,
        }
    }
}

macro_rules! float_keys {
    ($m:ident) => {
        $m!(
            powder_min,
            powder_max,
            part_min,
            part_max,
            gradient_max,
            hatch_amplitude,
            hatch_period,
            contrast,
            depth_max,
            band_min,
            band_max,
            blob_min,
            blob_max,
            pocket_min,
            pocket_max,
            pore_min,
            pore_max
        )
    };
}

impl SurrogateConfig {
    /// Default geometry with explicit class counts; the label set is the
    /// first one containing every named class.
    pub fn with_counts(counts: &[(ClassLabel, usize)], seed: u64) -> Result<Self> {
        let label_set = [LabelSet::Hr1, LabelSet::Jbk75, LabelSet::Combined]
            .into_iter()
            .find(|s| counts.iter().all(|(c, _)| s.contains(*c)))
            .unwrap_or(LabelSet::Combined);
        let cfg = Self {
            label_set,
            counts: counts.iter().copied().collect(),
            seed,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(format!("surrogate config: {m}")));
        if self.tile_size < 8 {
            return bad(format!("tile_size {} is below 8", self.tile_size));
        }
        if self.total() == 0 {
            return bad("total tile count is zero".into());
        }
        if let Some(c) = self.counts.keys().find(|c| !self.label_set.contains(**c)) {
            return bad(format!("class {c} is not part of label set {}", self.label_set));
        }
        let ranges = [
            ("powder", self.powder_min, self.powder_max),
            ("part", self.part_min, self.part_max),
            ("band", self.band_min, self.band_max),
            ("blob", self.blob_min, self.blob_max),
            ("pocket", self.pocket_min, self.pocket_max),
            ("pore", self.pore_min, self.pore_max),
        ];
        for (name, lo, hi) in ranges {
            if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
                return bad(format!("{name} range [{lo}, {hi}] must satisfy 0 <= min <= max <= 1"));
            }
        }
        if self.pore_count_min == 0 || self.pore_count_min > self.pore_count_max {
            return bad("pore counts need 1 <= pore_count_min <= pore_count_max".into());
        }
        if !(self.contrast > 0.0 && self.contrast < 0.5) {
            return bad(format!("contrast {} must lie in (0, 0.5)", self.contrast));
        }
        if self.depth_max < self.contrast {
            return bad("depth_max must be at least contrast".into());
        }
        if self.hatch_period <= 0.0 || self.hatch_amplitude < 0.0 || self.gradient_max < 0.0 {
            return bad("hatch period must be positive; amplitudes non-negative".into());
        }
        Ok(())
    }

    /// Reads a `key = value` file on top of the defaults. Class counts use
    /// keys `count.<class name>`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = Self::default();
        kv.reject_unknown(|k| {
            macro_rules! known {
                ($($f:ident),*) => { [$(stringify!($f)),*].contains(&k) };
            }
            float_keys!(known)
                || ["tile_size", "label_set", "seed", "pore_count_min", "pore_count_max"].contains(&k)
                || k.strip_prefix("count.").is_some_and(|c| c.parse::<ClassLabel>().is_ok())
        })?;
        kv.set("tile_size", &mut cfg.tile_size)?;
        kv.set("seed", &mut cfg.seed)?;
        kv.set("pore_count_min", &mut cfg.pore_count_min)?;
        kv.set("pore_count_max", &mut cfg.pore_count_max)?;
        macro_rules! read {
            ($($f:ident),*) => { $( kv.set(stringify!($f), &mut cfg.$f)?; )* };
        }
        float_keys!(read);
        if let Some(ls) = kv.get::<LabelSet>("label_set")? {
            cfg.label_set = ls;
        }
        let explicit: Vec<(ClassLabel, usize)> = kv
            .keys()
            .filter_map(|k| k.strip_prefix("count.").map(|c| (k, c.parse::<ClassLabel>().unwrap())))
            .map(|(k, c)| Ok((c, kv.get::<usize>(k)?.unwrap_or(0))))
            .collect::<Result<_>>()?;
        if !explicit.is_empty() {
            cfg.counts = explicit.into_iter().collect();
        } else if cfg.label_set != LabelSet::Hr1 {
            return Err(Error::contract(format!(
                "label set {} needs explicit count.<class> keys",
                cfg.label_set
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        w.pair("tile_size", self.tile_size)
            .pair("label_set", self.label_set)
            .pair("seed", self.seed);
        for (c, n) in &self.counts {
            w.pair(&format!("count.{c}"), n);
        }
        macro_rules! write {
            ($($f:ident),*) => { $( w.pair(stringify!($f), self.$f); )* };
        }
        float_keys!(write);
        w.pair("pore_count_min", self.pore_count_min)
            .pair("pore_count_max", self.pore_count_max);
        w.finish()
    }

    /// `(class, global tile index)` for every tile, in label-set order.
    pub fn tiles(&self) -> Vec<(ClassLabel, u64)> {
        let mut out = Vec::with_capacity(self.total());
        for &class in self.label_set.classes() {
            for _ in 0..self.counts.get(&class).copied().unwrap_or(0) {
                out.push((class, out.len() as u64));
            }
        }
        out
    }
}

fn stream(seed: u64, index: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index * 2 + lane);
    rng
}

/// The defect-free background of tile `index`.
pub fn clean_tile(cfg: &SurrogateConfig, index: u64) -> ImageTile {
    let s = cfg.tile_size;
    let mut rng = stream(cfg.seed, index, 0);
    let sf = s as f32;
    let powder = rng.random_range(cfg.powder_min..=cfg.powder_max);
    let part = rng.random_range(cfg.part_min..=cfg.part_max);
    let shape = rng.random_range(0..3u8);
    let (cy, cx) = (rng.random_range(0.0..sf), rng.random_range(0.0..sf));
    let radius = rng.random_range(0.35..0.7) * sf;
    let (half_h, half_w) = (rng.random_range(0.2..0.5) * sf, rng.random_range(0.2..0.5) * sf);
    let (gy, gx) = (
        rng.random_range(-1.0..=1.0) * cfg.gradient_max,
        rng.random_range(-1.0..=1.0) * cfg.gradient_max,
    );
    let theta = [0.0, 0.5 * PI, 0.25 * PI, 0.75 * PI][rng.random_range(0..4)];
    let phase = rng.random_range(0.0..2.0 * PI);
    let period = cfg.hatch_period * sf / 64.0;

    let mut px = Vec::with_capacity(s * s * CHANNELS);
    for r in 0..s {
        for c in 0..s {
            let (y, x) = (r as f32 + 0.5, c as f32 + 0.5);
            let inside = match shape {
                0 => false,
                1 => (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius,
                _ => (y - cy).abs() <= half_h && (x - cx).abs() <= half_w,
            };
            let mut v = powder + gy * (y / sf - 0.5) + gx * (x / sf - 0.5);
            if inside {
                let t = (x * theta.cos() + y * theta.sin()) * 2.0 * PI / period + phase;
                v += part + cfg.hatch_amplitude * t.sin();
            }
            let q = quantize(v);
            px.extend([q; CHANNELS]);
        }
    }
    ImageTile::new(s, s, CHANNELS, px, format!("surrogate:{index}"), ClassLabel::NoDefect)
        .expect("surrogate background is well-formed")
}

/// Integer pixels of a filled, rotated ellipse clipped to the tile. Never
/// empty when the center is inside the tile.
fn ellipse(s: usize, cy: f32, cx: f32, a: f32, b: f32, angle: f32) -> Vec<(usize, usize)> {
    let (a, b) = (a.max(0.75), b.max(0.75));
    let reach = a.max(b).ceil() as isize + 1;
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::new();
    let (r0, c0) = (cy.floor() as isize, cx.floor() as isize);
    for r in r0 - reach..=r0 + reach {
        for c in c0 - reach..=c0 + reach {
            if r < 0 || c < 0 || r >= s as isize || c >= s as isize {
                continue;
            }
            let (dy, dx) = (r as f32 + 0.5 - cy, c as f32 + 0.5 - cx);
            let u = (dy * cos + dx * sin) / a;
            let v = (-dy * sin + dx * cos) / b;
            if u * u + v * v <= 1.0 || (r == r0 && c == c0) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

struct Painter<'a> {
    cfg: &'a SurrogateConfig,
    clean: &'a ImageTile,
    img: ImageTile,
    marked: BTreeMap<(usize, usize), f32>,
}

impl Painter<'_> {
    /// Offsets every listed pixel by `sign · depth` from its clean value.
    fn paint(&mut self, pixels: &[(usize, usize)], sign: f32, depth: f32) {
        for &(r, c) in pixels {
            let bg = self.clean.get(r, c, 0);
            let mut v = quantize(bg + sign * depth);
            if (v - bg).abs() < self.cfg.contrast {
                v = if sign < 0.0 { 0.0 } else { 1.0 };
            }
            for ch in 0..CHANNELS {
                self.img.set(r, c, ch, v);
            }
            self.marked.insert((r, c), v);
        }
    }
}

/// Renders tile `index` as `class`: the clean background, and for defect
/// classes the painted tile with its exact mask.
pub fn render(cfg: &SurrogateConfig, class: ClassLabel, index: u64) -> (ImageTile, Option<DefectMask>) {
    let clean = clean_tile(cfg, index);
    if !class.is_defect() {
        return (clean.with_class(class), None);
    }
    let s = cfg.tile_size;
    let sf = s as f32;
    let mut rng = stream(cfg.seed, index, 1);
    let mut p = Painter {
        cfg,
        clean: &clean,
        img: clean.clone(),
        marked: BTreeMap::new(),
    };
    let depth = |rng: &mut ChaCha8Rng| rng.random_range(cfg.contrast + 0.05..=cfg.depth_max.max(cfg.contrast + 0.05));

    let band = |p: &mut Painter, rng: &mut ChaCha8Rng| {
        let h = (rng.random_range(cfg.band_min..=cfg.band_max) * sf).round().max(1.0) as usize;
        let top = rng.random_range(0..=s - h.min(s)) as isize;
        let d = depth(rng);
        let mut pixels = Vec::new();
        let (mut up, mut down) = (0isize, 0isize);
        for c in 0..s {
            up = (up + rng.random_range(-1i32..=1) as isize).clamp(-2, 2);
            down = (down + rng.random_range(-1i32..=1) as isize).clamp(-2, 2);
            let lo = (top + up).max(0);
            let hi = (top + h as isize + down).min(s as isize).max(lo + 1);
            for r in lo..hi.min(s as isize) {
                pixels.push((r as usize, c));
            }
        }
        p.paint(&pixels, -1.0, d);
    };
    let blobs = |p: &mut Painter, rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32, sign: f32, cluster: Option<(f32, f32, f32)>| {
        for _ in 0..n {
            let (cy, cx) = match cluster {
                Some((y, x, spread)) => (
                    (y + rng.random_range(-spread..=spread)).clamp(0.0, sf - 1.0),
                    (x + rng.random_range(-spread..=spread)).clamp(0.0, sf - 1.0),
                ),
                None => (rng.random_range(0.0..sf), rng.random_range(0.0..sf)),
            };
            let a = rng.random_range(lo..=hi) * sf;
            let b = a * rng.random_range(0.6..=1.0);
            let angle = rng.random_range(0.0..PI);
            let d = depth(rng);
            p.paint(&ellipse(s, cy, cx, a, b, angle), sign, d);
        }
    };
    let cluster = |rng: &mut ChaCha8Rng| {
        let margin = 0.15 * sf;
        (
            rng.random_range(margin..sf - margin),
            rng.random_range(margin..sf - margin),
            0.15 * sf,
        )
    };

    match class {
        ClassLabel::NoDefect => unreachable!(),
        ClassLabel::ShortFeed => band(&mut p, &mut rng),
        ClassLabel::HadDefect => {
            let n = rng.random_range(1..=3);
            blobs(&mut p, &mut rng, n, cfg.blob_min, cfg.blob_max, 1.0, None);
        }
        ClassLabel::ShortFeedHadDefect => {
            band(&mut p, &mut rng);
            let n = rng.random_range(1..=3);
            blobs(&mut p, &mut rng, n, cfg.blob_min, cfg.blob_max, 1.0, None);
        }
        ClassLabel::Seeded1 => blobs(&mut p, &mut rng, 1, cfg.pocket_min, cfg.pocket_max, -1.0, None),
        ClassLabel::Seeded2 | ClassLabel::Seeded3 => {
            let n = rng.random_range(cfg.pore_count_min..=cfg.pore_count_max);
            let sign = if class == ClassLabel::Seeded2 { -1.0 } else { 1.0 };
            let at = cluster(&mut rng);
            blobs(&mut p, &mut rng, n, cfg.pore_min, cfg.pore_max, sign, Some(at));
        }
    }

    let pixels = p
        .marked
        .iter()
        .flat_map(|(&(row, col), &value)| (0..CHANNELS).map(move |channel| MaskPixel { row, col, channel, value }))
        .collect();
    let mask = DefectMask::new(pixels, class, [s, s, CHANNELS]).expect("every defect paints at least one pixel");
    (p.img.with_class(class), Some(mask))
}

#[derive(Debug)]
pub struct SurrogateOutput {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    /// Ground-truth mask of every defect tile, keyed by tile path.
    pub masks: Vec<(PathBuf, DefectMask)>,
}

/// Writes `root/<class>/<class>_<n>.png` tiles, a `.mask` file beside each
/// defect tile, and `root/manifest.tsv` with every entry untagged.
pub fn generate(cfg: &SurrogateConfig, root: &Path) -> Result<SurrogateOutput> {
    cfg.validate()?;
    let mut manifest = DatasetManifest::new(cfg.label_set);
    let mut masks = Vec::new();
    let mut per_class: BTreeMap<ClassLabel, usize> = BTreeMap::new();
    for (class, index) in cfg.tiles() {
        let n = per_class.entry(class).or_default();
        let path = root.join(class.name()).join(format!("{}_{:05}.png", class.name(), *n));
        *n += 1;
        let (tile, mask) = render(cfg, class, index);
        save_png(&tile, &path)?;
        if let Some(m) = mask {
            m.save(&mask_path_for(&path))?;
            masks.push((path.clone(), m));
        }
        manifest.push(ManifestEntry::new(path, class, Split::Unsplit))?;
    }
    let manifest_path = root.join("manifest.tsv");
    manifest.save(&manifest_path)?;
    Ok(SurrogateOutput {
        manifest,
        manifest_path,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(counts: &[(ClassLabel, usize)]) -> SurrogateConfig {
        SurrogateConfig {
            tile_size: 32,
            ..SurrogateConfig::with_counts(counts, 11).unwrap()
        }
    }

    #[test]
    fn only_clean_tiles_means_no_masks() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&small(&[(ClassLabel::NoDefect, 10)]), dir.path()).unwrap();
        assert_eq!(out.manifest.len(), 10);
        assert!(out.masks.is_empty());
        assert!(out.manifest.entries().iter().all(|e| e.class == ClassLabel::NoDefect));
    }

    #[test]
    fn zero_tiles_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SurrogateConfig {
            counts: [(ClassLabel::NoDefect, 0)].into(),
            ..SurrogateConfig::default()
        };
        assert!(generate(&cfg, dir.path()).is_err());
        assert!(SurrogateConfig::with_counts(&[(ClassLabel::NoDefect, 0)], 0).is_err());
    }

    #[test]
    fn every_class_paints_contrasting_pixels_only_inside_the_mask() {
        let cfg = SurrogateConfig {
            tile_size: 48,
            ..SurrogateConfig::with_counts(&ClassLabel::ALL.map(|c| (c, 3)), 5).unwrap()
        };
        for (class, index) in cfg.tiles() {
            let (tile, mask) = render(&cfg, class, index);
            let clean = clean_tile(&cfg, index);
            let Some(mask) = mask else {
                assert_eq!(tile.pixels(), clean.pixels());
                continue;
            };
            assert_eq!(mask.source_class, class);
            let mut inside = vec![false; tile.pixels().len()];
            for p in mask.pixels() {
                let i = tile.index(p.row, p.col, p.channel);
                inside[i] = true;
                assert_eq!(tile.pixels()[i], p.value);
                assert!((p.value - clean.pixels()[i]).abs() >= cfg.contrast - 1e-6);
            }
            for (i, &m) in inside.iter().enumerate() {
                if !m {
                    assert_eq!(tile.pixels()[i], clean.pixels()[i]);
                }
            }
        }
    }

    #[test]
    fn kv_round_trip() {
        let cfg = SurrogateConfig {
            tile_size: 40,
            contrast: 0.2,
            ..SurrogateConfig::with_counts(&[(ClassLabel::NoDefect, 5), (ClassLabel::ShortFeed, 2)], 3).unwrap()
        };
        let kv = KvFile::parse(&cfg.to_kv(), Path::new("cfg")).unwrap();
        assert_eq!(SurrogateConfig::from_kv(&kv).unwrap(), cfg);
        let bad = KvFile::parse("count.seeded_9 = 4\n", Path::new("cfg")).unwrap();
        assert!(SurrogateConfig::from_kv(&bad).is_err());
    }

    #[test]
    fn values_are_png_exact() {
        let cfg = small(&[(ClassLabel::NoDefect, 1), (ClassLabel::Seeded3, 1)]);
        let (tile, _) = render(&cfg, ClassLabel::Seeded3, 1);
        let back = crate::dataset::decode_png(&crate::dataset::encode_png(&tile).unwrap(), "t").unwrap();
        assert_eq!(back.pixels(), tile.pixels());
    }
}
