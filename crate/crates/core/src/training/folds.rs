//! Cross-validation folds with unseen subjects and unseen stimuli.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, SubjectRange};

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub validation_subject_ids: BTreeSet<u32>,
    /// manifest recording indices
    pub train_recordings: Vec<usize>,
    pub validation_recordings: Vec<usize>,
    /// validation-subject recordings dropped because training heard their stimulus
    pub excluded_validation_recordings: Vec<usize>,
}

/// Builds one fold per subject range. Validation takes the listed subjects'
/// recordings minus those whose stimulus occurs in any training recording;
/// training takes every other subject's recordings.
pub fn make_folds(manifest: &DatasetManifest, fold_defs: &[SubjectRange]) -> Result<Vec<FoldSpec>> {
    let known = manifest.subject_ids();
    let mut folds = Vec::with_capacity(fold_defs.len());
    for (fold_id, range) in fold_defs.iter().enumerate() {
        if let Some(missing) = range.ids().find(|id| !known.contains(id)) {
            return Err(Error::UnknownSubject(missing));
        }
        let validation_subject_ids: BTreeSet<u32> = range.ids().collect();
        let (val_all, train): (Vec<usize>, Vec<usize>) = (0..manifest.recordings.len())
            .partition(|&i| validation_subject_ids.contains(&manifest.recordings[i].subject_id));
        let seen: BTreeSet<&str> = train.iter().map(|&i| manifest.recordings[i].stimulus_id.as_str()).collect();
        let (excluded, validation): (Vec<usize>, Vec<usize>) =
            val_all.into_iter().partition(|&i| seen.contains(manifest.recordings[i].stimulus_id.as_str()));
        folds.push(FoldSpec {
            fold_id,
            validation_subject_ids,
            train_recordings: train,
            validation_recordings: validation,
            excluded_validation_recordings: excluded,
        });
    }
    Ok(folds)
}
