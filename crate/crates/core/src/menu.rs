//! The resolution range, the discrete annotation menu and the sizes a target
//! model accepts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MenuError {
    #[error("menu needs at least 2 entries, got {0}")]
    TooFewEntries(usize),
    #[error("menu entries must be positive")]
    NonPositiveEntry,
    #[error("menu entries must be strictly increasing (entry {index}: {value})")]
    EntriesNotIncreasing { index: usize, value: u32 },
    #[error("range_min {range_min} exceeds first entry {first}")]
    RangeMinAboveFirst { range_min: u32, first: u32 },
    #[error("last entry {last} exceeds range_max {range_max}")]
    LastAboveRangeMax { last: u32, range_max: u32 },
    #[error("supported_sizes must be strictly increasing and positive (index {0})")]
    SupportedNotIncreasing(usize),
    #[error("supported_sizes max {max} is below the largest menu entry {last}")]
    SupportedTooSmall { max: u32, last: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawMenu {
    entries: Vec<u32>,
    #[serde(default)]
    range_min: Option<u32>,
    #[serde(default)]
    range_max: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    supported_sizes: Option<SupportedSizes>,
}

/// Deployment-acceptable side lengths, either listed or described as a grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SupportedSizes {
    List(Vec<u32>),
    Grid { start: u32, stop: u32, step: u32 },
}

impl SupportedSizes {
    /// Expands to an explicit ascending list. A grid always includes `stop`.
    pub fn expand(&self) -> Vec<u32> {
        match self {
            SupportedSizes::List(v) => v.clone(),
            SupportedSizes::Grid { start, stop, step } => {
                let step = (*step).max(1);
                let mut out: Vec<u32> = (*start..=*stop).step_by(step as usize).collect();
                if out.last() != Some(stop) && stop >= start {
                    out.push(*stop);
                }
                out
            }
        }
    }
}

/// Ordered discrete resolution menu inside `[range_min, range_max]`.
///
/// Resolutions are longest-side pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMenu", into = "RawMenu")]
pub struct ResolutionMenu {
    entries: Vec<u32>,
    range_min: u32,
    range_max: u32,
    supported: Option<Vec<u32>>,
}

impl TryFrom<RawMenu> for ResolutionMenu {
    type Error = MenuError;

    fn try_from(raw: RawMenu) -> Result<Self, MenuError> {
        let supported = raw.supported_sizes.map(|s| s.expand());
        ResolutionMenu::new(raw.entries, raw.range_min, raw.range_max, supported)
    }
}

impl From<ResolutionMenu> for RawMenu {
    fn from(m: ResolutionMenu) -> RawMenu {
        RawMenu {
            entries: m.entries,
            range_min: Some(m.range_min),
            range_max: Some(m.range_max),
            supported_sizes: m.supported.map(SupportedSizes::List),
        }
    }
}

impl ResolutionMenu {
    /// Validates every menu invariant. Missing range bounds default to the
    /// first and last entries.
    pub fn new(
        entries: Vec<u32>,
        range_min: Option<u32>,
        range_max: Option<u32>,
        supported_sizes: Option<Vec<u32>>,
    ) -> Result<Self, MenuError> {
        if entries.len() < 2 {
            return Err(MenuError::TooFewEntries(entries.len()));
        }
        if entries[0] == 0 {
            return Err(MenuError::NonPositiveEntry);
        }
        for (i, w) in entries.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(MenuError::EntriesNotIncreasing { index: i + 1, value: w[1] });
            }
        }
        let first = entries[0];
        let last = *entries.last().unwrap();
        let range_min = range_min.unwrap_or(first);
        let range_max = range_max.unwrap_or(last);
        if range_min > first {
            return Err(MenuError::RangeMinAboveFirst { range_min, first });
        }
        if last > range_max {
            return Err(MenuError::LastAboveRangeMax { last, range_max });
        }
        if let Some(sizes) = &supported_sizes {
            if sizes.is_empty() {
                return Err(MenuError::SupportedTooSmall { max: 0, last });
            }
            if sizes[0] == 0 {
                return Err(MenuError::SupportedNotIncreasing(0));
            }
            if let Some(i) = sizes.windows(2).position(|w| w[1] <= w[0]) {
                return Err(MenuError::SupportedNotIncreasing(i + 1));
            }
            let max = *sizes.last().unwrap();
            if max < last {
                return Err(MenuError::SupportedTooSmall { max, last });
            }
        }
        Ok(ResolutionMenu { entries, range_min, range_max, supported: supported_sizes })
    }

    /// `{384, 768, 1024}` over `[384, 1024]`.
    pub fn default_menu() -> Self {
        Self::new(vec![384, 768, 1024], Some(384), Some(1024), None).unwrap()
    }

    /// `{384, 1024}`, the two-class ablation.
    pub fn binary_menu() -> Self {
        Self::new(vec![384, 1024], Some(384), Some(1024), None).unwrap()
    }

    pub fn with_supported_sizes(self, sizes: Vec<u32>) -> Result<Self, MenuError> {
        Self::new(self.entries, Some(self.range_min), Some(self.range_max), Some(sizes))
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min(&self) -> u32 {
        self.entries[0]
    }

    pub fn max(&self) -> u32 {
        *self.entries.last().unwrap()
    }

    pub fn range(&self) -> (u32, u32) {
        (self.range_min, self.range_max)
    }

    pub fn index_of(&self, resolution: u32) -> Option<usize> {
        self.entries.binary_search(&resolution).ok()
    }

    /// Sizes a target model accepts; the menu entries when none were declared.
    pub fn supported_sizes(&self) -> &[u32] {
        self.supported.as_deref().unwrap_or(&self.entries)
    }

    pub fn has_explicit_supported_sizes(&self) -> bool {
        self.supported.is_some()
    }

    /// Same entries, ignoring supported sizes and range.
    pub fn same_entries(&self, other: &ResolutionMenu) -> bool {
        self.entries == other.entries
    }
}

impl Default for ResolutionMenu {
    fn default() -> Self {
        Self::default_menu()
    }
}
