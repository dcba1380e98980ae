use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Defect classes across both alloys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "no-defect")]
    NoDefect,
    #[serde(rename = "had-defect")]
    HadDefect,
    #[serde(rename = "short-feed+had-defect")]
    ShortFeedHadDefect,
    #[serde(rename = "short-feed")]
    ShortFeed,
    #[serde(rename = "seeded_1")]
    Seeded1,
    #[serde(rename = "seeded_2")]
    Seeded2,
    #[serde(rename = "seeded_3")]
    Seeded3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 7] = [
        ClassLabel::NoDefect,
        ClassLabel::HadDefect,
        ClassLabel::ShortFeedHadDefect,
        ClassLabel::ShortFeed,
        ClassLabel::Seeded1,
        ClassLabel::Seeded2,
        ClassLabel::Seeded3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::NoDefect => "no-defect",
            ClassLabel::HadDefect => "had-defect",
            ClassLabel::ShortFeedHadDefect => "short-feed+had-defect",
            ClassLabel::ShortFeed => "short-feed",
            ClassLabel::Seeded1 => "seeded_1",
            ClassLabel::Seeded2 => "seeded_2",
            ClassLabel::Seeded3 => "seeded_3",
        }
    }

    pub fn is_defect(self) -> bool {
        self != ClassLabel::NoDefect
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassLabel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown class {s:?}"))
    }
}

/// A declared set of classes a classifier is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSet {
    /// no-defect, short-feed, had-defect, short-feed+had-defect
    Jbk75,
    /// no-defect, seeded_1, seeded_2, seeded_3
    Hr1,
    /// all seven classes of the merged corpus
    Combined,
}

impl LabelSet {
    pub fn id(self) -> &'static str {
        match self {
            LabelSet::Jbk75 => "jbk75",
            LabelSet::Hr1 => "hr1",
            LabelSet::Combined => "combined",
        }
    }

    pub fn classes(self) -> &'static [ClassLabel] {
        use ClassLabel::*;
        match self {
            LabelSet::Jbk75 => &[NoDefect, ShortFeed, HadDefect, ShortFeedHadDefect],
            LabelSet::Hr1 => &[NoDefect, Seeded1, Seeded2, Seeded3],
            LabelSet::Combined => &ClassLabel::ALL,
        }
    }

    pub fn len(self) -> usize {
        self.classes().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn index_of(self, class: ClassLabel) -> Option<usize> {
        self.classes().iter().position(|&c| c == class)
    }

    pub fn class_at(self, index: usize) -> Option<ClassLabel> {
        self.classes().get(index).copied()
    }

    pub fn contains(self, class: ClassLabel) -> bool {
        self.index_of(class).is_some()
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for LabelSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jbk75" | "jbk-75" => Ok(LabelSet::Jbk75),
            "hr1" | "hr-1" => Ok(LabelSet::Hr1),
            "combined" => Ok(LabelSet::Combined),
            _ => Err(format!("unknown label set {s:?} (expected jbk75, hr1 or combined)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for c in ClassLabel::ALL {
            assert_eq!(c.name().parse::<ClassLabel>().unwrap(), c);
        }
        assert!("seeded_4".parse::<ClassLabel>().is_err());
    }

    #[test]
    fn label_set_sizes() {
        assert_eq!(LabelSet::Jbk75.len(), 4);
        assert_eq!(LabelSet::Hr1.len(), 4);
        assert_eq!(LabelSet::Combined.len(), 7);
        assert_eq!(LabelSet::Hr1.index_of(ClassLabel::Seeded2), Some(2));
        assert_eq!(LabelSet::Hr1.index_of(ClassLabel::ShortFeed), None);
    }
}
