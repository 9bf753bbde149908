use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the three processing paths. The discriminant is the index used by
/// every per-path array in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoutePath {
    #[serde(rename = "text")]
    Text = 0,
    #[serde(rename = "image")]
    Image = 1,
    #[serde(rename = "fusion")]
    Fusion = 2,
}

impl RoutePath {
    pub const ALL: [RoutePath; 3] = [RoutePath::Text, RoutePath::Image, RoutePath::Fusion];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoutePath::Text => "text",
            RoutePath::Image => "image",
            RoutePath::Fusion => "fusion",
        }
    }
}

impl fmt::Display for RoutePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutePath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "text-only" => Ok(RoutePath::Text),
            "image" | "image-only" => Ok(RoutePath::Image),
            "fusion" => Ok(RoutePath::Fusion),
            other => Err(format!("unknown path {other:?}")),
        }
    }
}

/// Benchmark a table-query instance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetTag {
    #[serde(rename = "tabmwp")]
    TabMwp,
    #[serde(rename = "wtq")]
    Wtq,
    #[serde(rename = "hitab")]
    HiTab,
    #[serde(rename = "tatqa")]
    TatQa,
    #[serde(rename = "fetaqa")]
    FeTaQa,
    #[serde(rename = "tabfact")]
    TabFact,
    #[serde(rename = "infotabs")]
    InfoTabs,
}

impl DatasetTag {
    pub const ALL: [DatasetTag; 7] = [
        DatasetTag::TabMwp,
        DatasetTag::Wtq,
        DatasetTag::HiTab,
        DatasetTag::TatQa,
        DatasetTag::FeTaQa,
        DatasetTag::TabFact,
        DatasetTag::InfoTabs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::TabMwp => "tabmwp",
            DatasetTag::Wtq => "wtq",
            DatasetTag::HiTab => "hitab",
            DatasetTag::TatQa => "tatqa",
            DatasetTag::FeTaQa => "fetaqa",
            DatasetTag::TabFact => "tabfact",
            DatasetTag::InfoTabs => "infotabs",
        }
    }

    /// FeTaQA (BLEU-scored) and HiTab (hierarchical tables) are evaluation-only.
    pub fn is_trainable(self) -> bool {
        !matches!(self, DatasetTag::FeTaQa | DatasetTag::HiTab)
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        DatasetTag::ALL
            .into_iter()
            .find(|t| t.as_str() == key)
            .ok_or_else(|| format!("unknown dataset tag {s:?}"))
    }
}

/// Per-path binary correctness scores in path order.
pub type PathScores = [u8; 3];
