//! Deterministic image-level train/val/test partitions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::coco::Dataset;
use crate::error::{Error, Result};

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
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Image id → split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub by_image: BTreeMap<u64, Split>,
}

impl SplitAssignment {
    pub fn get(&self, image_id: u64) -> Option<Split> {
        self.by_image.get(&image_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.by_image.values().filter(|&&s| s == split).count()
    }

    /// One `image_id<TAB>split` line per image, ascending by id.
    pub fn to_text(&self) -> String {
        self.by_image.iter().map(|(id, s)| format!("{id}\t{s}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut by_image = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidArgument(format!("split file line {}: expected id<TAB>split", n + 1)))?;
            let id: u64 = id
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("split file line {}: bad image id {id:?}", n + 1)))?;
            if by_image.insert(id, split.trim().parse()?).is_some() {
                return Err(Error::InvalidArgument(format!("split file line {}: image {id} listed twice", n + 1)));
            }
        }
        Ok(Self { by_image })
    }
}

/// Shuffles image ids with `seed` and cuts them by `ratios` (normalized).
///
/// Val and test sizes are `round(n · r / Σr)`; train takes the rest.
pub fn split_dataset(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::InvalidArgument(format!("split ratios must be positive, got {ratios:?}")));
    }
    let mut ids: Vec<u64> = dataset.images.iter().map(|i| i.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let total: f64 = ratios.iter().sum();
    let n_val = ((n as f64 * ratios[1] / total).round() as usize).min(n);
    let n_test = ((n as f64 * ratios[2] / total).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    let by_image = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, s)
        })
        .collect();
    Ok(SplitAssignment { by_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::coco::ImageInfo;
    use proptest::prelude::*;

    fn dataset(n: u64) -> Dataset {
        Dataset {
            images: (0..n).map(|id| ImageInfo { id: id * 3 + 1, file_name: format!("{id}.ppm"), width: 4, height: 4 }).collect(),
            ..Dataset::default()
        }
    }

    #[test]
    fn ten_images_split_eight_one_one() {
        let a = split_dataset(&dataset(10), [8.0, 1.0, 1.0], 5).unwrap();
        assert_eq!([a.count(Split::Train), a.count(Split::Val), a.count(Split::Test)], [8, 1, 1]);
        assert_eq!(a, split_dataset(&dataset(10), [8.0, 1.0, 1.0], 5).unwrap());
    }

    #[test]
    fn empty_dataset_and_bad_ratios_error() {
        assert!(split_dataset(&dataset(0), [8.0, 1.0, 1.0], 0).is_err());
        assert!(split_dataset(&dataset(3), [8.0, 0.0, 1.0], 0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let a = split_dataset(&dataset(17), [8.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(SplitAssignment::from_text(&a.to_text()).unwrap(), a);
        assert!(SplitAssignment::from_text("1\ttrain\n1\tval\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn split_is_a_partition(seed in any::<u64>(), n in 1u64..120) {
            let ds = dataset(n);
            let a = split_dataset(&ds, [8.0, 1.0, 1.0], seed).unwrap();
            prop_assert_eq!(a.by_image.len(), ds.images.len());
            for img in &ds.images {
                prop_assert!(a.get(img.id).is_some());
            }
            let sizes: usize = Split::ALL.iter().map(|&s| a.count(s)).sum();
            prop_assert_eq!(sizes, ds.images.len());
        }
    }
}
