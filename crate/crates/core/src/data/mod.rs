//! Dataset manifest, stratified splitting, image preprocessing, augmentation
//! and class rebalancing.
//!
//! A dataset root holds one directory per class:
//!
//! ```text
//! <root>/healthy/*.png
//! <root>/northern_leaf_blight/*.png
//! <root>/gray_leaf_spot/*.jpg
//! <root>/common_rust/*.jpg
//! ```

mod augment;
mod raster;
mod loader;
mod manifest;

pub use self::augment::{augment, augment_forced, rotate, AugmentPolicy, GeometricOp};
pub use self::raster::{load_rgb, preprocess, preprocess_sized, resize_bilinear, to_unit_range};
pub use self::loader::{balance_classes, one_hot, Batch, BatchLoader, Sample};
pub use self::manifest::{build_manifest, split_counts, split_records, DatasetManifest, Record, SplitRatios};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The four maize leaf classes, in the fixed order used for logits and
/// confusion matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    Healthy,
    NorthernLeafBlight,
    GrayLeafSpot,
    CommonRust,
}

impl Class {
    pub const ALL: [Class; 4] = [
        Class::Healthy,
        Class::NorthernLeafBlight,
        Class::GrayLeafSpot,
        Class::CommonRust,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    /// Directory and manifest label.
    pub fn name(self) -> &'static str {
        match self {
            Class::Healthy => "healthy",
            Class::NorthernLeafBlight => "northern_leaf_blight",
            Class::GrayLeafSpot => "gray_leaf_spot",
            Class::CommonRust => "common_rust",
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Class::Healthy => "H",
            Class::NorthernLeafBlight => "NLB",
            Class::GrayLeafSpot => "GLS",
            Class::CommonRust => "CR",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Class::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Labeling(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown split `{s}`, expected train, val or test")))
    }
}
