use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::augment::{augment, augment_forced, AugmentPolicy};
use super::{load_rgb, preprocess_sized, Class, DatasetManifest, Record, Split};
use crate::arch::INPUT_SIZE;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// One entry of a training or evaluation list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub class: Class,
    /// Set on oversampled duplicates; the loader always augments these.
    pub forced_augment: bool,
}

impl From<&Record> for Sample {
    fn from(r: &Record) -> Self {
        Sample {
            path: r.path.clone(),
            class: r.class,
            forced_augment: false,
        }
    }
}

/// Oversamples every minority class of the train split, with replacement, up
/// to the largest train class count. Duplicates are flagged for forced
/// augmentation. Val and test records are not touched.
pub fn balance_classes(manifest: &DatasetManifest, rng: &mut impl Rng) -> Vec<Sample> {
    let train: Vec<&Record> = manifest.split(Split::Train).collect();
    let counts = manifest.class_counts(Split::Train);
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut out: Vec<Sample> = train.iter().map(|r| Sample::from(*r)).collect();
    for class in Class::ALL {
        let pool: Vec<&&Record> = train.iter().filter(|r| r.class == class).collect();
        if pool.is_empty() {
            continue;
        }
        for _ in counts[class.index()]..target {
            let pick = pool[rng.random_range(0..pool.len())];
            out.push(Sample {
                forced_augment: true,
                ..Sample::from(*pick)
            });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `b×h×w×3` in [−1, 1].
    pub input: Tensor,
    /// `b×4` one-hot.
    pub labels: Tensor,
    pub classes: Vec<Class>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

pub fn one_hot(classes: &[Class]) -> Tensor {
    Tensor::from_fn([classes.len(), Class::ALL.len()], |i| {
        if classes[i / Class::ALL.len()].index() == i % Class::ALL.len() {
            1.0
        } else {
            0.0
        }
    })
}

/// Turns a sample list into batches. Images are decoded per batch, in
/// parallel, but every sample draws from its own seeded stream so the output
/// does not depend on the worker count.
#[derive(Clone, Debug)]
pub struct BatchLoader {
    samples: Vec<Sample>,
    batch_size: usize,
    policy: AugmentPolicy,
    size: (usize, usize),
}

impl BatchLoader {
    pub fn new(samples: Vec<Sample>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        Ok(BatchLoader {
            samples,
            batch_size,
            policy: AugmentPolicy::none(),
            size: (INPUT_SIZE, INPUT_SIZE),
        })
    }

    pub fn from_split(manifest: &DatasetManifest, split: Split, batch_size: usize) -> Result<Self> {
        Self::new(manifest.split(split).map(Sample::from).collect(), batch_size)
    }

    pub fn with_augmentation(mut self, policy: AugmentPolicy) -> Result<Self> {
        policy.validate()?;
        self.policy = policy;
        Ok(self)
    }

    /// Resize target; 224×224 unless changed.
    pub fn with_size(mut self, h: usize, w: usize) -> Self {
        self.size = (h, w);
        self
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_batches(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// Sample order for one epoch, shuffled by `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut crate::rng::stream(seed, "epoch", epoch as u64));
        order
    }

    /// Shuffled, augmented batches for training. The last batch may be short.
    pub fn epoch(&self, seed: u64, epoch: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.epoch_order(seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        let base = (epoch as u64) << 32;
        chunks.into_iter().enumerate().map(move |(b, idx)| {
            let first = (b * self.batch_size) as u64;
            self.assemble(&idx, Some((seed, base + first)))
        })
    }

    /// Batches in list order without augmentation, for evaluation.
    pub fn ordered(&self) -> impl Iterator<Item = Result<Batch>> + '_ {
        let idx: Vec<usize> = (0..self.samples.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.assemble(&c, None))
    }

    fn assemble(&self, idx: &[usize], augment_stream: Option<(u64, u64)>) -> Result<Batch> {
        let (h, w) = self.size;
        let images: Vec<Tensor> = idx
            .par_iter()
            .enumerate()
            .map(|(pos, &i)| {
                let s = &self.samples[i];
                self.load(s, augment_stream.map(|(seed, first)| (seed, first + pos as u64)))
                    .map_err(|e| Error::Record {
                        path: s.path.clone(),
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(idx.len() * h * w * 3);
        for img in images {
            data.extend_from_slice(img.data());
        }
        let classes: Vec<Class> = idx.iter().map(|&i| self.samples[i].class).collect();
        Ok(Batch {
            input: Tensor::new([idx.len(), h, w, 3], data)?,
            labels: one_hot(&classes),
            classes,
        })
    }

    fn load(&self, s: &Sample, stream: Option<(u64, u64)>) -> Result<Tensor> {
        let x = preprocess_sized(&load_rgb(&s.path)?, self.size.0, self.size.1)?;
        match stream {
            Some((seed, index)) => {
                let mut rng = crate::rng::stream(seed, "augment", index);
                if s.forced_augment {
                    augment_forced(&x, &self.policy, &mut rng)
                } else {
                    augment(&x, &self.policy, &mut rng)
                }
            }
            None => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_records, SplitRatios};
    use image::{Rgb, RgbImage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn manifest(counts: [usize; 4]) -> DatasetManifest {
        let items = Class::ALL
            .into_iter()
            .zip(counts)
            .flat_map(|(c, n)| (0..n).map(move |i| (PathBuf::from(format!("{c}/{i}.png")), c)))
            .collect();
        split_records(items, &SplitRatios::default(), 3).unwrap()
    }

    #[test]
    fn balancing_raises_minorities_to_the_max() {
        let m = manifest([513, 1192, 1162, 985]);
        assert_eq!(m.class_counts(Split::Train), [359, 834, 813, 689]);
        let out = balance_classes(&m, &mut ChaCha8Rng::seed_from_u64(0));
        let mut counts = [0; 4];
        for s in &out {
            counts[s.class.index()] += 1;
        }
        assert_eq!(counts, [834; 4]);
        assert_eq!(out.iter().filter(|s| s.forced_augment).count(), 4 * 834 - (359 + 834 + 813 + 689));
    }

    #[test]
    fn balanced_input_is_identity() {
        let m = manifest([10, 10, 10, 10]);
        let out = balance_classes(&m, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out, m.split(Split::Train).map(Sample::from).collect::<Vec<_>>());
    }

    fn write_images(dir: &std::path::Path, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let path = dir.join(format!("{i}.png"));
                RgbImage::from_pixel(8, 8, Rgb([i as u8 * 20, 0, 255])).save(&path).unwrap();
                Sample {
                    path,
                    class: Class::ALL[i % 4],
                    forced_augment: i % 3 == 0,
                }
            })
            .collect()
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let loader = BatchLoader::new(write_images(dir.path(), 10), 4)
            .unwrap()
            .with_size(8, 8)
            .with_augmentation(AugmentPolicy::default())
            .unwrap();
        let a: Vec<Batch> = loader.epoch(5, 2).collect::<Result<_>>().unwrap();
        assert_eq!(a.iter().map(Batch::len).collect::<Vec<_>>(), [4, 4, 2]);
        let b: Vec<Batch> = loader.epoch(5, 2).collect::<Result<_>>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.input, y.input);
            assert_eq!(x.classes, y.classes);
        }
        for batch in &a {
            for row in batch.labels.data().chunks(4) {
                assert_eq!(row.iter().sum::<f32>(), 1.0);
            }
        }
        assert_ne!(loader.epoch_order(5, 2), loader.epoch_order(5, 3));
    }

    #[test]
    fn unreadable_file_is_a_record_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = write_images(dir.path(), 3);
        samples[1].path = dir.path().join("missing.png");
        let loader = BatchLoader::new(samples, 2).unwrap().with_size(8, 8);
        let err = loader.ordered().next().unwrap().unwrap_err();
        match err {
            Error::Record { path, .. } => assert!(path.ends_with("missing.png")),
            other => panic!("unexpected {other}"),
        }
    }
}
