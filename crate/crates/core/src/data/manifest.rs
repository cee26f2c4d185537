use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::{Class, Split};
use crate::checkpoint::write_atomic;
use crate::error::{invalid, Error, Result};

/// Extensions picked up when scanning a class directory.
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "ppm", "pnm"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: PathBuf,
    pub class: Class,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.10,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r)) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(invalid!("split ratios must be in [0, 1] and sum to 1, got {all:?}"));
        }
        Ok(())
    }
}

/// Per-class split sizes: `floor(train·n)`, `floor(val·n)`, remainder to test.
/// The floors get a 1e-9 nudge so products like `0.7 × 10` that land a hair
/// under an integer still count it.
pub fn split_counts(n: usize, ratios: &SplitRatios) -> (usize, usize, usize) {
    let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let train = floor(ratios.train).min(n);
    let val = floor(ratios.val).min(n - train);
    (train, val, n - train - val)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Per-class counts in one split, indexed by [`Class::index`].
    pub fn class_counts(&self, split: Split) -> [usize; 4] {
        let mut counts = [0; 4];
        for r in self.split(split) {
            counts[r.class.index()] += 1;
        }
        counts
    }

    /// CSV with header `path,label,split` and LF line endings.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(["path", "label", "split"])?;
        for r in &self.records {
            let path = r
                .path
                .to_str()
                .ok_or_else(|| invalid!("path `{}` is not valid UTF-8", r.path.display()))?;
            w.write_record([path, r.class.name(), r.split.name()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invariant(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("inputs were UTF-8"))
    }

    /// Parses a manifest CSV. The seed is not stored in the file and is set
    /// to 0.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(invalid!("manifest header must be `path,label,split`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")));
        }
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            records.push(Record {
                path: PathBuf::from(&row[0]),
                class: row[1].parse()?,
                split: row[2].parse()?,
            });
        }
        Ok(DatasetManifest { records, seed: 0 })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv()?.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Stratified split of labelled paths. Each class is shuffled with its own
/// seeded stream and cut by [`split_counts`]. Record order is class, then
/// split, then shuffled order.
pub fn split_records(items: Vec<(PathBuf, Class)>, ratios: &SplitRatios, seed: u64) -> Result<DatasetManifest> {
    ratios.validate()?;
    let mut records = Vec::with_capacity(items.len());
    for class in Class::ALL {
        let mut paths: Vec<PathBuf> = items.iter().filter(|(_, c)| *c == class).map(|(p, _)| p.clone()).collect();
        if paths.is_empty() {
            return Err(invalid!("class `{class}` has no images"));
        }
        paths.sort();
        paths.shuffle(&mut crate::rng::stream(seed, "split", class.index() as u64));
        let (train, val, _) = split_counts(paths.len(), ratios);
        for (i, path) in paths.into_iter().enumerate() {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            records.push(Record { path, class, split });
        }
    }
    Ok(DatasetManifest { records, seed })
}

/// Scans `<root>/<class>/` and splits per class. Paths in the manifest are
/// `root` joined with the class directory and file name.
pub fn build_manifest(root: impl AsRef<Path>, ratios: &SplitRatios, seed: u64) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut items = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !entry.path().is_dir() {
            continue;
        }
        let class: Class = name.parse()?;
        let dir = root.join(&name);
        for file in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let file = file.map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(file.file_name());
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if is_image && path.is_file() {
                items.push((path, class));
            }
        }
    }
    split_records(items, ratios, seed)
}
