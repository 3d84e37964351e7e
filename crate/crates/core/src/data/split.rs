use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    ClassDisjoint,
    QueryGallery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_class_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::ClassDisjoint,
            train_class_fraction: 0.5,
            validation_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("train_class_fraction", self.train_class_fraction),
            ("validation_fraction", self.validation_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, "must lie strictly between 0 and 1"));
            }
        }
        Ok(())
    }
}

/// Disjoint partitions of sample ids. In class-disjoint mode `query` and
/// `gallery` are empty; in query/gallery mode `test` is empty and the
/// test-side classes are split between `query` and `gallery`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// The first `ceil(fraction * classes)` class ids form the training pool;
/// a stratified `validation_fraction` of each pool class is held out for
/// validation.
pub fn split(data: &Dataset, spec: &SplitSpec, seed: u64) -> Result<Split> {
    spec.validate()?;
    let by_class = data.ids_by_class();
    let present: Vec<usize> = (0..data.num_classes)
        .filter(|&c| !by_class[c].is_empty())
        .collect();
    if present.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 classes, have {}",
            present.len()
        )));
    }
    let n_train = ((spec.train_class_fraction * present.len() as f64).ceil() as usize)
        .clamp(1, present.len() - 1);
    let (train_classes, test_classes) = present.split_at(n_train);
    let mut rng = rng::seeded(seed, rng::stream::SPLIT);

    let mut out = Split {
        train_classes: train_classes.to_vec(),
        test_classes: test_classes.to_vec(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    for &c in train_classes {
        let mut ids = by_class[c].clone();
        ids.shuffle(&mut rng);
        let n_val = (spec.validation_fraction * ids.len() as f64).round() as usize;
        out.val.extend_from_slice(&ids[..n_val]);
        out.train.extend_from_slice(&ids[n_val..]);
    }
    for &c in test_classes {
        let ids = &by_class[c];
        match spec.mode {
            SplitMode::ClassDisjoint => out.test.extend_from_slice(ids),
            SplitMode::QueryGallery => {
                if ids.len() < 2 {
                    return Err(Error::Data(format!(
                        "class {c} has {} sample(s); query/gallery needs at least 2",
                        ids.len()
                    )));
                }
                let mut ids = ids.clone();
                ids.shuffle(&mut rng);
                let half = ids.len() / 2;
                out.query.extend_from_slice(&ids[..half]);
                out.gallery.extend_from_slice(&ids[half..]);
            }
        }
    }
    for part in [
        &mut out.train,
        &mut out.val,
        &mut out.test,
        &mut out.query,
        &mut out.gallery,
    ] {
        part.sort_unstable();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use std::collections::BTreeSet;

    #[test]
    fn four_classes_half_train() {
        let d = gen_synthetic(4, 10, (4, 4), 0.1, 0).unwrap();
        let s = split(&d, &SplitSpec::default(), 1).unwrap();
        assert_eq!(s.train_classes, vec![0, 1]);
        assert_eq!(s.test_classes, vec![2, 3]);
        assert_eq!(s.val.len(), 4);
        assert_eq!(s.train.len(), 16);
        assert_eq!(s.test.len(), 20);
        assert!(s.test.iter().all(|&i| d.images[i].class_id >= 2));
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        let d = gen_synthetic(5, 7, (4, 4), 0.1, 0).unwrap();
        for mode in [SplitMode::ClassDisjoint, SplitMode::QueryGallery] {
            let s = split(
                &d,
                &SplitSpec {
                    mode,
                    ..SplitSpec::default()
                },
                3,
            )
            .unwrap();
            let mut seen = BTreeSet::new();
            for part in [&s.train, &s.val, &s.test, &s.query, &s.gallery] {
                for &id in part.iter() {
                    assert!(seen.insert(id), "id {id} in two partitions");
                }
            }
            assert_eq!(seen.len(), d.len());
        }
    }

    #[test]
    fn query_gallery_needs_two_per_class() {
        let d = gen_synthetic(3, 1, (4, 4), 0.1, 0).unwrap();
        let spec = SplitSpec {
            mode: SplitMode::QueryGallery,
            ..SplitSpec::default()
        };
        assert!(split(&d, &spec, 0).is_err());
        let single = gen_synthetic(1, 5, (4, 4), 0.1, 0).unwrap();
        assert!(split(&single, &SplitSpec::default(), 0).is_err());
    }

    #[test]
    fn rejects_degenerate_fractions() {
        let d = gen_synthetic(4, 4, (4, 4), 0.1, 0).unwrap();
        let bad = SplitSpec {
            validation_fraction: 1.0,
            ..SplitSpec::default()
        };
        assert!(split(&d, &bad, 0).is_err());
    }
}
