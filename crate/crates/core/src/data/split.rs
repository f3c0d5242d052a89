use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::natural_cmp;
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Disjoint train / validation / test subject sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Adopts explicit subject lists verbatim, checking they are disjoint.
    pub fn from_lists(train: Vec<String>, validation: Vec<String>, test: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for id in train.iter().chain(&validation).chain(&test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Contract(format!("subject {id:?} appears in more than one split")));
            }
        }
        Ok(DatasetSplit {
            train,
            validation,
            test,
        })
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            validation: self.validation.len(),
            test: self.test.len(),
        }
    }
}

/// Seeded random partition of `subjects` into the requested sizes.
pub fn split_subjects(subjects: &[String], sizes: SplitSizes, rng: &mut RngState) -> Result<DatasetSplit> {
    let unique: BTreeSet<&String> = subjects.iter().collect();
    let need = sizes.train + sizes.validation + sizes.test;
    if need > unique.len() {
        return Err(Error::Sizing(format!(
            "requested {need} subjects ({}/{}/{}) but only {} available",
            sizes.train,
            sizes.validation,
            sizes.test,
            unique.len()
        )));
    }
    let mut pool: Vec<String> = unique.into_iter().cloned().collect();
    pool.sort_by(|a, b| natural_cmp(a, b));
    rng.shuffle(&mut pool);
    let mut it = pool.into_iter();
    let mut take = |n: usize| {
        let mut v: Vec<String> = it.by_ref().take(n).collect();
        v.sort_by(|a, b| natural_cmp(a, b));
        v
    };
    let train = take(sizes.train);
    let validation = take(sizes.validation);
    let test = take(sizes.test);
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

/// One subject id per line; blank lines and `#` comments ignored.
pub fn read_subject_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}
