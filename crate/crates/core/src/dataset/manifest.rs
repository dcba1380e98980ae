use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{load_png, ClassLabel, ImageTile, LabelSet};
use crate::error::{Error, Result};

/// Share of items that go to the training split (3:1).
pub const TRAIN_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// Not yet assigned; what the surrogate generator emits.
    Unsplit,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unsplit => "unsplit",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unsplit" => Ok(Split::Unsplit),
            _ => Err(format!("unknown split tag {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: ClassLabel,
    pub split: Split,
}

impl ManifestEntry {
    pub fn new(path: impl Into<PathBuf>, class: ClassLabel, split: Split) -> Self {
        Self {
            path: path.into(),
            class,
            split,
        }
    }

    /// Loads the tile and stamps it with this entry's label.
    pub fn load(&self) -> Result<ImageTile> {
        Ok(load_png(&self.path)?.with_class(self.class))
    }
}

/// Ordered list of labelled image files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub label_set: LabelSet,
    /// Seed of the split that produced the tags, if any.
    pub seed: Option<u64>,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(label_set: LabelSet) -> Self {
        Self {
            label_set,
            seed: None,
            entries: Vec::new(),
        }
    }

    pub fn from_entries(label_set: LabelSet, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut m = Self::new(label_set);
        for e in entries {
            m.push(e)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, entry: ManifestEntry) -> Result<()> {
        if !self.label_set.contains(entry.class) {
            return Err(Error::contract(format!(
                "class {} is not part of label set {}",
                entry.class, self.label_set
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, class: ClassLabel) -> usize {
        self.entries.iter().filter(|e| e.class == class).count()
    }

    /// Entries carrying `split`, as a new manifest with the same label set.
    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            label_set: self.label_set,
            seed: self.seed,
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    /// Parses a manifest file. Relative paths resolve against the manifest's
    /// directory and every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.into(),
            line,
            message,
        };
        let mut label_set = None;
        let mut seed = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if let Some(header) = line.strip_prefix('#') {
                if let Some((k, v)) = header.trim().split_once('=') {
                    match k.trim() {
                        "label_set" => label_set = Some(v.trim().parse::<LabelSet>().map_err(|e| parse_err(n, e))?),
                        "seed" => {
                            let v = v.trim();
                            if v != "none" {
                                seed = Some(v.parse::<u64>().map_err(|e| parse_err(n, e.to_string()))?);
                            }
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [p, c, s] = fields[..] else {
                return Err(parse_err(n, format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let class = c.parse::<ClassLabel>().map_err(|e| parse_err(n, e))?;
            let split = s.parse::<Split>().map_err(|e| parse_err(n, e))?;
            let resolved = base.join(p);
            if !resolved.is_file() {
                return Err(parse_err(n, format!("listed file {} does not exist", resolved.display())));
            }
            entries.push(ManifestEntry::new(resolved, class, split));
        }
        let label_set = label_set.ok_or_else(|| parse_err(1, "missing `# label_set=` header".into()))?;
        let mut m = Self::from_entries(label_set, entries)?;
        m.seed = seed;
        Ok(m)
    }

    /// Writes the manifest with paths relative to its own directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        if !base.as_os_str().is_empty() {
            std::fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
        }
        let abs_base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        let mut out = format!("# label_set={}\n", self.label_set);
        match self.seed {
            Some(s) => out.push_str(&format!("# seed={s}\n")),
            None => out.push_str("# seed=none\n"),
        }
        for e in &self.entries {
            let abs = std::path::absolute(&e.path).map_err(|err| Error::io(&e.path, err))?;
            let rel = pathdiff::diff_paths(&abs, &abs_base).unwrap_or(abs);
            let shown = rel.to_string_lossy().replace('\\', "/");
            out.push_str(&format!("{shown}\t{}\t{}\n", e.class, e.split));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Tags every entry train or test with `|train| = round(0.75·N)`.
///
/// Stratified mode gives each class `floor(0.75·n_c)` train slots and hands
/// the remaining slots out by largest fractional remainder, so per-class
/// proportions stay within one item of the global ratio. Entry order is
/// preserved; only tags change.
pub fn split(manifest: &DatasetManifest, seed: u64, stratified: bool) -> Result<DatasetManifest> {
    let n = manifest.len();
    if n == 0 {
        return Err(Error::contract("cannot split an empty manifest"));
    }
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_train = vec![false; n];
    if stratified {
        let classes = manifest.label_set.classes();
        let members: Vec<Vec<usize>> = classes
            .iter()
            .map(|&c| (0..n).filter(|&i| manifest.entries[i].class == c).collect())
            .collect();
        let mut quota: Vec<usize> = members
            .iter()
            .map(|m| (TRAIN_FRACTION * m.len() as f64).floor() as usize)
            .collect();
        let mut order: Vec<usize> = (0..classes.len()).collect();
        let remainder = |k: usize| TRAIN_FRACTION * members[k].len() as f64 - quota[k] as f64;
        order.sort_by(|&a, &b| remainder(b).total_cmp(&remainder(a)).then(a.cmp(&b)));
        let mut left = n_train - quota.iter().sum::<usize>();
        for &k in order.iter().cycle().take(order.len() * 2) {
            if left == 0 {
                break;
            }
            if quota[k] < members[k].len() {
                quota[k] += 1;
                left -= 1;
            }
        }
        for (mut idx, q) in members.into_iter().zip(quota) {
            idx.shuffle(&mut rng);
            for &i in &idx[..q] {
                is_train[i] = true;
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train] {
            is_train[i] = true;
        }
    }
    let entries = manifest
        .entries
        .iter()
        .zip(is_train)
        .map(|(e, t)| ManifestEntry {
            split: if t { Split::Train } else { Split::Test },
            ..e.clone()
        })
        .collect();
    Ok(DatasetManifest {
        label_set: manifest.label_set,
        seed: Some(seed),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCount {
    pub class: ClassLabel,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub total: usize,
    pub classes: Vec<ClassCount>,
}

impl ClassStats {
    pub fn count(&self, class: ClassLabel) -> usize {
        self.classes.iter().find(|c| c.class == class).map_or(0, |c| c.count)
    }
}

impl fmt::Display for ClassStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{:>8}{:>9}", "class", "count", "percent")?;
        for c in &self.classes {
            writeln!(f, "{:<24}{:>8}{:>8.1}%", c.class.name(), c.count, c.percent)?;
        }
        write!(f, "{:<24}{:>8}", "total", self.total)
    }
}

/// Per-class counts in label-set order. An empty manifest yields an empty
/// report.
pub fn class_stats(manifest: &DatasetManifest) -> ClassStats {
    let total = manifest.len();
    if total == 0 {
        return ClassStats {
            total,
            classes: Vec::new(),
        };
    }
    let classes = manifest
        .label_set
        .classes()
        .iter()
        .map(|&class| {
            let count = manifest.count(class);
            ClassCount {
                class,
                count,
                percent: 100.0 * count as f64 / total as f64,
            }
        })
        .collect();
    ClassStats { total, classes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic(label_set: LabelSet, counts: &[(ClassLabel, usize)]) -> DatasetManifest {
        let mut m = DatasetManifest::new(label_set);
        let mut i = 0;
        for &(c, n) in counts {
            for _ in 0..n {
                m.push(ManifestEntry::new(format!("t/{i}.png"), c, Split::Unsplit)).unwrap();
                i += 1;
            }
        }
        m
    }

    fn percents(stats: &ClassStats) -> Vec<String> {
        stats.classes.iter().map(|c| format!("{:.1}", c.percent)).collect()
    }

    #[test]
    fn hr1_counts_give_published_percentages() {
        use ClassLabel::*;
        let m = synthetic(LabelSet::Hr1, &[(NoDefect, 16738), (Seeded1, 376), (Seeded2, 188), (Seeded3, 188)]);
        assert_eq!(percents(&class_stats(&m)), ["95.7", "2.1", "1.1", "1.1"]);
    }

    #[test]
    fn jbk75_defect_free_share() {
        use ClassLabel::*;
        let m = synthetic(
            LabelSet::Jbk75,
            &[(NoDefect, 19899), (ShortFeed, 957), (HadDefect, 19), (ShortFeedHadDefect, 12)],
        );
        let stats = class_stats(&m);
        assert_eq!(format!("{:.1}", stats.classes[0].percent), "95.3");
        assert_eq!(stats.total, 20887);
    }

    #[test]
    fn single_class_and_empty() {
        let m = synthetic(LabelSet::Hr1, &[(ClassLabel::Seeded2, 7)]);
        assert_eq!(class_stats(&m).classes[2].percent, 100.0);
        assert!(class_stats(&DatasetManifest::new(LabelSet::Hr1)).classes.is_empty());
    }

    #[test]
    fn plain_split_sizes_and_determinism() {
        let m = synthetic(LabelSet::Hr1, &[(ClassLabel::NoDefect, 100)]);
        let a = split(&m, 7, false).unwrap();
        assert_eq!(a.subset(Split::Train).len(), 75);
        assert_eq!(a.subset(Split::Test).len(), 25);
        assert_eq!(a, split(&m, 7, false).unwrap());
        assert_ne!(a, split(&m, 8, false).unwrap());
    }

    #[test]
    fn stratified_split_keeps_one_defect_in_test() {
        let m = synthetic(LabelSet::Hr1, &[(ClassLabel::NoDefect, 96), (ClassLabel::Seeded1, 4)]);
        for seed in 0..20 {
            let s = split(&m, seed, true).unwrap();
            let test = s.subset(Split::Test);
            assert_eq!(test.len(), 25);
            assert_eq!(test.count(ClassLabel::Seeded1), 1);
        }
    }

    #[test]
    fn split_of_empty_manifest_is_rejected() {
        assert!(split(&DatasetManifest::new(LabelSet::Hr1), 0, true).is_err());
    }

    #[test]
    fn save_load_round_trip_uses_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTile::filled(4, 4, 3, 0.5, ClassLabel::NoDefect);
        let tile = dir.path().join("no-defect/a.png");
        crate::dataset::save_png(&img, &tile).unwrap();
        let mut m = DatasetManifest::new(LabelSet::Hr1);
        m.push(ManifestEntry::new(&tile, ClassLabel::NoDefect, Split::Train)).unwrap();
        m.seed = Some(5);
        let path = dir.path().join("manifest.tsv");
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("no-defect/a.png\tno-defect\ttrain"), "{text}");
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.seed, Some(5));
        assert_eq!(back.entries()[0].class, ClassLabel::NoDefect);
        assert_eq!(back.entries()[0].load().unwrap().shape(), [4, 4, 3]);
    }

    #[test]
    fn load_rejects_missing_files_and_foreign_classes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "# label_set=hr1\nnope.png\tno-defect\ttrain\n").unwrap();
        assert!(DatasetManifest::load(&path).unwrap_err().to_string().contains("does not exist"));
        let mut m = DatasetManifest::new(LabelSet::Hr1);
        assert!(m.push(ManifestEntry::new("x", ClassLabel::ShortFeed, Split::Train)).is_err());
    }

    fn counts_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..60, 4)
    }

    proptest! {
        #[test]
        fn split_partitions_and_respects_ratio(counts in counts_strategy(), seed in any::<u64>(), stratified in any::<bool>()) {
            let classes = LabelSet::Hr1.classes();
            let spec: Vec<_> = classes.iter().copied().zip(counts.iter().copied()).collect();
            let m = synthetic(LabelSet::Hr1, &spec);
            prop_assume!(!m.is_empty());
            let s = split(&m, seed, stratified).unwrap();
            let n = m.len();
            let train = s.subset(Split::Train);
            let test = s.subset(Split::Test);
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert_eq!(train.len(), (0.75 * n as f64).round() as usize);
            for (a, b) in s.entries().iter().zip(m.entries()) {
                prop_assert_eq!(&a.path, &b.path);
            }
            if stratified {
                for &c in classes {
                    let want = 0.75 * m.count(c) as f64;
                    prop_assert!((train.count(c) as f64 - want).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn stats_are_order_invariant(counts in counts_strategy(), seed in any::<u64>()) {
            let classes = LabelSet::Hr1.classes();
            let spec: Vec<_> = classes.iter().copied().zip(counts.iter().copied()).collect();
            let m = synthetic(LabelSet::Hr1, &spec);
            let mut shuffled = m.entries().to_vec();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let other = DatasetManifest::from_entries(LabelSet::Hr1, shuffled).unwrap();
            let a = class_stats(&m);
            prop_assert_eq!(&a, &class_stats(&other));
            prop_assert_eq!(a.classes.iter().map(|c| c.count).sum::<usize>(), a.total);
            if a.total > 0 {
                let pct: f64 = a.classes.iter().map(|c| c.percent).sum();
                prop_assert!((pct - 100.0).abs() <= 0.1);
            }
        }
    }
}
