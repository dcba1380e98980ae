//! Accuracy, confusion matrices and SSIM.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, ImageTile, LabelSet};
use crate::error::{Error, Result};

/// SSIM window edge (uniform weights, stride 1).
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.len() != truth.len() || preds.is_empty() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions for {} labels", preds.len(), truth.len()),
        ));
    }
    let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub label_set: LabelSet,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.trace() as f64 / n as f64)
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn recall(&self, class: usize) -> Option<f64> {
        let s = self.support(class);
        (s > 0).then(|| self.counts[class][class] as f64 / s as f64)
    }

    pub fn precision(&self, class: usize) -> Option<f64> {
        let predicted: u64 = self.counts.iter().map(|row| row[class]).sum();
        (predicted > 0).then(|| self.counts[class][class] as f64 / predicted as f64)
    }

    /// Mean recall over the defect classes that occur in the test set.
    pub fn minority_recall(&self) -> Option<f64> {
        let recalls: Vec<f64> = self
            .label_set
            .classes()
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_defect())
            .filter_map(|(i, _)| self.recall(i))
            .collect();
        (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
    }
}

pub fn confusion(preds: &[usize], truth: &[usize], label_set: LabelSet) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} predictions for {} labels", preds.len(), truth.len()),
        ));
    }
    let k = label_set.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::contract(format!("label pair ({t}, {p}) out of range for {k} classes")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { label_set, counts })
}

/// Summed-area table with a zero first row and column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let stride = w + 1;
        let mut sums = vec![0.0; (h + 1) * stride];
        for r in 0..h {
            let mut row = 0.0;
            for c in 0..w {
                row += value(r, c);
                sums[(r + 1) * stride + c + 1] = sums[r * stride + c + 1] + row;
            }
        }
        Self { w, sums }
    }

    fn window(&self, r: usize, c: usize, n: usize) -> f64 {
        let s = self.w + 1;
        let at = |r: usize, c: usize| self.sums[r * s + c];
        at(r + n, c + n) - at(r, c + n) - at(r + n, c) + at(r, c)
    }
}

fn ssim_term(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Structural similarity with dynamic range 1: mean over every 8×8 window
/// (stride 1) and channel of the local SSIM, using population moments.
/// Images smaller than the window use a single window of their own size.
pub fn ssim(a: &ImageTile, b: &ImageTile) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let [h, w, c] = a.shape();
    let n = SSIM_WINDOW.min(h).min(w);
    if n == 0 {
        return Err(Error::shape("ssim", "empty image"));
    }
    let (pa, pb) = (a.pixels(), b.pixels());
    let area = (n * n) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..c {
        let x = |r: usize, col: usize| pa[(r * w + col) * c + ch] as f64;
        let y = |r: usize, col: usize| pb[(r * w + col) * c + ch] as f64;
        let sx = Integral::new(h, w, x);
        let sy = Integral::new(h, w, y);
        let sxx = Integral::new(h, w, |r, col| x(r, col) * x(r, col));
        let syy = Integral::new(h, w, |r, col| y(r, col) * y(r, col));
        let sxy = Integral::new(h, w, |r, col| x(r, col) * y(r, col));
        for r in 0..=h - n {
            for col in 0..=w - n {
                let ma = sx.window(r, col, n) / area;
                let mb = sy.window(r, col, n) / area;
                let va = (sxx.window(r, col, n) / area - ma * ma).max(0.0);
                let vb = (syy.window(r, col, n) / area - mb * mb).max(0.0);
                let cov = sxy.window(r, col, n) / area - ma * mb;
                total += ssim_term(ma, mb, va, vb, cov);
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimReport {
    pub window: usize,
    pub per_pair: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl SsimReport {
    pub fn from_values(per_pair: Vec<f64>) -> Option<Self> {
        if per_pair.is_empty() {
            return None;
        }
        let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
        let min = per_pair.iter().copied().fold(f64::INFINITY, f64::min);
        let max = per_pair.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            window: SSIM_WINDOW,
            per_pair,
            mean,
            min,
            max,
        })
    }
}

/// Pairwise SSIM of aligned tile lists.
pub fn ssim_pairs(a: &[ImageTile], b: &[ImageTile]) -> Result<Option<SsimReport>> {
    if a.len() != b.len() {
        return Err(Error::shape("ssim_pairs", format!("{} vs {} tiles", a.len(), b.len())));
    }
    let values = a.iter().zip(b).map(|(x, y)| ssim(x, y)).collect::<Result<Vec<_>>>()?;
    Ok(SsimReport::from_values(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ClassLabel,
    pub support: u64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
}

/// Results of one test pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label_set: LabelSet,
    pub samples: u64,
    /// Fraction correct.
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub classes: Vec<ClassMetrics>,
    pub minority_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<SsimReport>,
}

impl EvalReport {
    pub fn new(preds: &[usize], truth: &[usize], label_set: LabelSet) -> Result<Self> {
        let confusion = confusion(preds, truth, label_set)?;
        let acc = accuracy(preds, truth)?;
        let classes = label_set
            .classes()
            .iter()
            .enumerate()
            .map(|(i, &class)| ClassMetrics {
                class,
                support: confusion.support(i),
                recall: confusion.recall(i),
                precision: confusion.precision(i),
            })
            .collect();
        Ok(Self {
            label_set,
            samples: preds.len() as u64,
            accuracy: acc,
            minority_recall: confusion.minority_recall(),
            confusion,
            classes,
            ssim: None,
        })
    }

    pub fn with_ssim(mut self, ssim: Option<SsimReport>) -> Self {
        self.ssim = ssim;
        self
    }

    /// Accuracy in percent, one decimal.
    pub fn accuracy_percent(&self) -> String {
        format!("{:.1}", 100.0 * self.accuracy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::contract(format!("bad report JSON: {e}")))
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "label set: {}   samples: {}", self.label_set, self.samples)?;
        writeln!(f, "accuracy (%): {}", self.accuracy_percent())?;
        writeln!(f, "minority recall (%): {}", pct(self.minority_recall))?;
        if let Some(s) = &self.ssim {
            writeln!(
                f,
                "SSIM ({0}x{0} uniform window, stride 1, RGB mean): mean {1:.3}  min {2:.3}  max {3:.3}  pairs {4}",
                s.window,
                s.mean,
                s.min,
                s.max,
                s.per_pair.len()
            )?;
        }
        let width = self.label_set.classes().iter().map(|c| c.name().len()).max().unwrap_or(5).max(6);
        let mut line = format!("\n{:<width$} |", "true\\pred");
        for c in self.label_set.classes() {
            let _ = write!(line, " {:>8}", abbreviate(c.name()));
        }
        writeln!(f, "{line}")?;
        for (c, row) in self.label_set.classes().iter().zip(&self.confusion.counts) {
            let mut line = format!("{:<width$} |", c.name());
            for v in row {
                let _ = write!(line, " {v:>8}");
            }
            writeln!(f, "{line}")?;
        }
        writeln!(f, "\n{:<width$} | {:>7} | {:>10} | {:>13}", "class", "support", "recall (%)", "precision (%)")?;
        for m in &self.classes {
            writeln!(
                f,
                "{:<width$} | {:>7} | {:>10} | {:>13}",
                m.class.name(),
                m.support,
                pct(m.recall),
                pct(m.precision)
            )?;
        }
        Ok(())
    }
}

fn abbreviate(name: &str) -> &str {
    &name[..name.len().min(8)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tile(h: usize, w: usize, c: usize, px: Vec<f32>) -> ImageTile {
        ImageTile::new(h, w, c, px, "t", ClassLabel::NoDefect).unwrap()
    }

    fn random(h: usize, w: usize, seed: u64) -> ImageTile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tile(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect())
    }

    /// Direct per-window evaluation, no summed-area tables.
    fn brute_ssim(a: &ImageTile, b: &ImageTile) -> f64 {
        let [h, w, c] = a.shape();
        let n = SSIM_WINDOW.min(h).min(w);
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..c {
            for r in 0..=h - n {
                for col in 0..=w - n {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for dr in 0..n {
                        for dc in 0..n {
                            xs.push(a.get(r + dr, col + dc, ch) as f64);
                            ys.push(b.get(r + dr, col + dc, ch) as f64);
                        }
                    }
                    let m = xs.len() as f64;
                    let mx = xs.iter().sum::<f64>() / m;
                    let my = ys.iter().sum::<f64>() / m;
                    let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / m;
                    let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / m;
                    let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / m;
                    let (c1, c2) = (1e-4, 9e-4);
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn confusion_hand_tally() {
        // (truth, pred): (0,0) (0,1) (1,1) (2,2) (2,0) (3,3)
        let truth = [0, 0, 1, 2, 2, 3];
        let preds = [0, 1, 1, 2, 0, 3];
        let m = confusion(&preds, &truth, LabelSet::Hr1).unwrap();
        let want = vec![vec![1, 1, 0, 0], vec![0, 1, 0, 0], vec![1, 0, 1, 0], vec![0, 0, 0, 1]];
        assert_eq!(m.counts, want);
        assert_eq!(m.support(0), 2);
        assert_eq!(m.accuracy(), Some(accuracy(&preds, &truth).unwrap()));
        assert_eq!(m.recall(2), Some(0.5));
        assert_eq!(m.precision(0), Some(0.5));
        assert!(confusion(&[4], &[0], LabelSet::Hr1).is_err());
        let perfect = confusion(&truth, &truth, LabelSet::Hr1).unwrap();
        for (i, row) in perfect.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!(i == j || v == 0);
            }
        }
    }

    #[test]
    fn minority_recall_averages_defect_classes() {
        // Hr1: no-defect, seeded_1, seeded_2, seeded_3
        let truth = [0, 0, 1, 1, 3];
        let preds = [0, 0, 1, 0, 0];
        let m = confusion(&preds, &truth, LabelSet::Hr1).unwrap();
        assert_eq!(m.minority_recall(), Some(0.25));
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = random(16, 16, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let x = tile(16, 16, 3, vec![0.5; 768]);
        let y = tile(16, 16, 3, vec![0.7; 768]);
        let want = (2.0 * 0.35 + 1e-4) / (0.25 + 0.49 + 1e-4);
        assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-6);
        assert!((want - 0.9460).abs() < 1e-3);
        assert!(ssim(&x, &random(8, 16, 2)).is_err());
    }

    #[test]
    fn ssim_matches_brute_force() {
        for seed in 0..10 {
            let a = random(16, 16, seed);
            let b = random(16, 16, seed + 100);
            assert!((ssim(&a, &b).unwrap() - brute_ssim(&a, &b)).abs() < 1e-6);
        }
        let small_a = random(5, 7, 3);
        let small_b = random(5, 7, 4);
        assert!((ssim(&small_a, &small_b).unwrap() - brute_ssim(&small_a, &small_b)).abs() < 1e-6);
    }

    #[test]
    fn report_json_round_trip_and_table() {
        let r = EvalReport::new(&[0, 1, 1, 3], &[0, 1, 2, 3], LabelSet::Hr1)
            .unwrap()
            .with_ssim(SsimReport::from_values(vec![0.5, 0.9]));
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(r.accuracy_percent(), "75.0");
        let text = r.to_string();
        assert!(text.contains("accuracy (%): 75.0"), "{text}");
        assert!(text.contains("seeded_1"));
        let s = r.ssim.unwrap();
        assert!(s.min <= s.mean && s.mean <= s.max);
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_bounded(sa in any::<u64>(), sb in any::<u64>()) {
            let a = random(12, 10, sa);
            let b = random(12, 10, sb);
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn accuracy_equals_confusion_trace(pairs in proptest::collection::vec((0usize..7, 0usize..7), 1..60)) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = confusion(&p, &t, LabelSet::Combined).unwrap();
            prop_assert_eq!(m.accuracy().unwrap(), accuracy(&p, &t).unwrap());
        }
    }
}
