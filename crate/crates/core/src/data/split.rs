use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instance::{CxrSample, MultimodalInstance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid(format!("split fractions {parts:?} must lie in [0, 1]")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Subject counts per split: rounded targets, each at least one.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        if n < 3 {
            return Err(Error::invalid(format!(
                "{n} subjects cannot fill three splits"
            )));
        }
        let mut train = ((self.train * n as f64).round() as usize).clamp(1, n - 2);
        let val = ((self.val * n as f64).round() as usize).clamp(1, n - train - 1);
        if train + val >= n {
            train = n - val - 1;
        }
        Ok([train, val, n - train - val])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// Patient-level train/validation/test partition plus image-only samples
/// used to pretrain the image encoder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<MultimodalInstance>,
    pub val: Vec<MultimodalInstance>,
    pub test: Vec<MultimodalInstance>,
    pub cxr_train: Vec<CxrSample>,
    pub cxr_val: Vec<CxrSample>,
    pub cxr_test: Vec<CxrSample>,
    pub fractions: SplitFractions,
}

impl DatasetSplit {
    pub fn part(&self, name: SplitName) -> &[MultimodalInstance] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn cxr_only(&self, name: SplitName) -> &[CxrSample] {
        match name {
            SplitName::Train => &self.cxr_train,
            SplitName::Val => &self.cxr_val,
            SplitName::Test => &self.cxr_test,
        }
    }

    /// All labelled images of a split: image-only samples plus the images
    /// of paired instances.
    pub fn cxr_pool(&self, name: SplitName) -> Vec<CxrSample> {
        let mut pool = self.cxr_only(name).to_vec();
        pool.extend(self.part(name).iter().filter_map(CxrSample::from_instance));
        pool
    }
}

/// Groups subject ids in first-appearance order.
fn subjects_in_order<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashMap::new();
    let mut order = Vec::new();
    for id in ids {
        if seen.insert(id.to_string(), ()).is_none() {
            order.push(id.to_string());
        }
    }
    order
}

fn assign_subjects(subjects: Vec<String>, fractions: &SplitFractions, seed: u64) -> Result<HashMap<String, SplitName>> {
    let counts = fractions.counts(subjects.len())?;
    let mut shuffled = subjects;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut map = HashMap::new();
    let mut it = shuffled.into_iter();
    for (name, count) in SplitName::ALL.into_iter().zip(counts) {
        for s in it.by_ref().take(count) {
            map.insert(s, name);
        }
    }
    Ok(map)
}

/// Shuffles subjects with `seed` and assigns every instance of a subject to
/// the same split.
pub fn split_by_subject(
    instances: Vec<MultimodalInstance>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplit> {
    let subjects = subjects_in_order(instances.iter().map(|i| i.subject_id.as_str()));
    let map = assign_subjects(subjects, &fractions, seed)?;
    let mut split = DatasetSplit {
        fractions,
        ..Default::default()
    };
    for inst in instances {
        match map[&inst.subject_id] {
            SplitName::Train => split.train.push(inst),
            SplitName::Val => split.val.push(inst),
            SplitName::Test => split.test.push(inst),
        }
    }
    Ok(split)
}

/// Splits image-only samples by subject, the same way as [`split_by_subject`].
pub fn split_cxr_by_subject(
    samples: Vec<CxrSample>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<[Vec<CxrSample>; 3]> {
    let mut out: [Vec<CxrSample>; 3] = Default::default();
    if samples.is_empty() {
        return Ok(out);
    }
    let subjects = subjects_in_order(samples.iter().map(|s| s.subject_id.as_str()));
    let map = assign_subjects(subjects, &fractions, seed)?;
    for s in samples {
        let idx = match map[&s.subject_id] {
            SplitName::Train => 0,
            SplitName::Val => 1,
            SplitName::Test => 2,
        };
        out[idx].push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::config::Task;
    use std::collections::HashSet;

    fn instance(id: usize, subject: usize) -> MultimodalInstance {
        MultimodalInstance {
            instance_id: format!("i{id}"),
            subject_id: format!("s{subject}"),
            task: Task::Mortality,
            x_ehr: Tensor::zeros([1, 76]),
            x_cxr: None,
            y_task: vec![0.0],
            y_cxr: None,
            age: None,
        }
    }

    fn subjects(v: &[MultimodalInstance]) -> HashSet<String> {
        v.iter().map(|i| i.subject_id.clone()).collect()
    }

    #[test]
    fn ten_subjects_split_seven_one_two() {
        let split = split_by_subject((0..10).map(|i| instance(i, i)).collect(), SplitFractions::default(), 4).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (7, 1, 2));
    }

    #[test]
    fn subjects_stay_together() {
        let mut items: Vec<_> = (0..20).map(|i| instance(i, i)).collect();
        items.extend((20..23).map(|i| instance(i, 5)));
        let split = split_by_subject(items, SplitFractions::default(), 9).unwrap();
        let holders: Vec<_> = [&split.train, &split.val, &split.test]
            .iter()
            .filter(|p| p.iter().any(|i| i.subject_id == "s5"))
            .map(|p| p.iter().filter(|i| i.subject_id == "s5").count())
            .collect();
        assert_eq!(holders, vec![4]);
        let (a, b, c) = (subjects(&split.train), subjects(&split.val), subjects(&split.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }

    #[test]
    fn seeded_assignment_is_reproducible() {
        let make = |seed| split_by_subject((0..50).map(|i| instance(i, i)).collect(), SplitFractions::default(), seed).unwrap();
        assert_eq!(make(1), make(1));
        assert_ne!(subjects(&make(1).train), subjects(&make(2).train));
    }

    #[test]
    fn validation_errors() {
        assert!(split_by_subject(vec![instance(0, 0), instance(1, 1)], SplitFractions::default(), 0).is_err());
        let bad = SplitFractions { train: 0.5, val: 0.1, test: 0.2 };
        assert!(split_by_subject((0..10).map(|i| instance(i, i)).collect(), bad, 0).is_err());
    }

    #[test]
    fn counts_within_one_of_target() {
        let f = SplitFractions::default();
        for n in 3..200 {
            let c = f.counts(n).unwrap();
            assert_eq!(c.iter().sum::<usize>(), n);
            for (k, frac) in c.iter().zip([f.train, f.val, f.test]) {
                assert!((*k as f64 - frac * n as f64).abs() <= 1.0 + 1e-9 || n < 10, "n={n} {c:?}");
            }
        }
    }
}
