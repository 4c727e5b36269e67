use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataprepError, ImageRecord};
use crate::dtree::Grade;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitParams {
    pub per_grade: usize,
    pub refs_per_grade: usize,
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            per_grade: 30,
            refs_per_grade: 1,
            seed: 0,
        }
    }
}

/// A grade with fewer records than the training budget; all of them went
/// to the training subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub grade: Grade,
    pub available: usize,
    pub requested: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub task: String,
    pub params: SplitParams,
    pub grades: Vec<Grade>,
    /// Grouped by grade (grade-set order), seeded order within a grade.
    pub train: Vec<ImageRecord>,
    /// Subset of `train`, `refs_per_grade` per grade.
    pub references: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub shortfalls: Vec<Shortfall>,
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn train_for(&self, grade: &Grade) -> impl Iterator<Item = &ImageRecord> {
        let g = grade.clone();
        self.train.iter().filter(move |r| r.grade == g)
    }

    pub fn reference_for(&self, grade: &Grade) -> Option<&ImageRecord> {
        self.references.iter().find(|r| &r.grade == grade)
    }
}

/// Stratified few-shot split.
///
/// Records of each grade are sorted by id, shuffled with a seeded ChaCha
/// stream, and the first `per_grade` go to training; the rest are test.
/// Records flagged `reference` are moved to the front so they land in
/// training and serve as the grade's reference image; otherwise the first
/// training record in seeded order is the reference. A grade with fewer
/// than `per_grade` records contributes all of them and is reported as a
/// shortfall.
pub fn stratified_split(
    task: &str,
    grades: &[Grade],
    records: &[ImageRecord],
    params: SplitParams,
) -> Result<DatasetSplit, DataprepError> {
    for r in records {
        if !grades.contains(&r.grade) {
            return Err(DataprepError::UnknownGrade {
                record: r.id.clone(),
                grade: r.grade.clone(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut split = DatasetSplit {
        task: task.to_string(),
        params,
        grades: grades.to_vec(),
        train: Vec::new(),
        references: Vec::new(),
        test: Vec::new(),
        shortfalls: Vec::new(),
        warnings: Vec::new(),
    };

    for grade in grades {
        let mut group: Vec<&ImageRecord> = records.iter().filter(|r| &r.grade == grade).collect();
        if group.is_empty() {
            return Err(DataprepError::EmptyGrade(grade.clone()));
        }
        group.sort_by(|a, b| a.id.cmp(&b.id));
        group.shuffle(&mut rng);
        // Stable: flagged references first, seeded order otherwise kept.
        group.sort_by_key(|r| !r.reference);

        let take = params.per_grade.min(group.len());
        if take < params.per_grade {
            split.shortfalls.push(Shortfall {
                grade: grade.clone(),
                available: group.len(),
                requested: params.per_grade,
            });
            split.warnings.push(format!(
                "grade {grade}: only {} records available, {} requested; all used for training",
                group.len(),
                params.per_grade
            ));
        }
        let (train, test) = group.split_at(take);
        let refs = params.refs_per_grade.min(train.len());
        if refs < params.refs_per_grade {
            split.warnings.push(format!(
                "grade {grade}: {refs} reference image(s) available, {} requested",
                params.refs_per_grade
            ));
        }
        split.references.extend(train[..refs].iter().map(|r| (*r).clone()));
        split.train.extend(train.iter().map(|r| (*r).clone()));
        split.test.extend(test.iter().map(|r| (*r).clone()));
    }
    if split.test.is_empty() {
        split
            .warnings
            .push("test subset is empty: every record went to training".to_string());
    }
    for w in &split.warnings {
        log::warn!("task {task}: {w}");
    }
    Ok(split)
}
