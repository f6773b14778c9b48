//! Train/test split construction. Subject-dependent schemes (trial ratio,
//! k-fold) partition each subject's trials by their chronological order in
//! the dataset; leave-one-subject-out holds out every subject once.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    /// Per subject: first `train` parts of each `train+test` trials train,
    /// the rest test (e.g. 9:6).
    TrialRatio { train: usize, test: usize },
    /// Per subject: `k` contiguous chronological chunks, each a test fold.
    KFold { k: usize },
    /// One fold per subject; that subject is the test set.
    Loso,
}

impl Scheme {
    /// `loso`, `ratio:9:6`, or `kfold:5`.
    pub fn parse(s: &str) -> Result<Scheme, SplitError> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["loso"] => Ok(Scheme::Loso),
            ["ratio", a, b] => {
                let train = a.parse().map_err(|_| SplitError::BadScheme(s.into()))?;
                let test = b.parse().map_err(|_| SplitError::BadScheme(s.into()))?;
                Ok(Scheme::TrialRatio { train, test })
            }
            ["kfold", k] => {
                let k = k.parse().map_err(|_| SplitError::BadScheme(s.into()))?;
                Ok(Scheme::KFold { k })
            }
            _ => Err(SplitError::BadScheme(s.into())),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Scheme::TrialRatio { train, test } => format!("ratio:{train}:{test}"),
            Scheme::KFold { k } => format!("kfold:{k}"),
            Scheme::Loso => "loso".into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("cannot parse scheme {0:?}; expected loso, ratio:a:b, or kfold:k")]
    BadScheme(String),
    #[error("trial ratio parts must be positive")]
    ZeroRatio,
    #[error("k-fold needs k >= 2, got {0}")]
    TooFewFolds(usize),
    #[error("subject {subject} has {trials} trials, fewer than {need} required by the scheme")]
    TooFewTrials { subject: u32, trials: usize, need: usize },
    #[error("leave-one-subject-out needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub scheme: Scheme,
    pub folds: Vec<Split>,
}

/// Dataset indices grouped per subject, in dataset (chronological) order.
fn by_subject(subject_id: &[u32]) -> Vec<(u32, Vec<usize>)> {
    let mut subjects: Vec<u32> = subject_id.to_vec();
    subjects.sort_unstable();
    subjects.dedup();
    subjects
        .into_iter()
        .map(|s| {
            let idx: Vec<usize> = subject_id
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == s)
                .map(|(i, _)| i)
                .collect();
            (s, idx)
        })
        .collect()
}

pub fn make_splits(subject_id: &[u32], scheme: &Scheme) -> Result<SplitPlan, SplitError> {
    let groups = by_subject(subject_id);
    let folds = match *scheme {
        Scheme::TrialRatio { train, test } => {
            if train == 0 || test == 0 {
                return Err(SplitError::ZeroRatio);
            }
            let mut tr = Vec::new();
            let mut te = Vec::new();
            for (subject, idx) in &groups {
                let n = idx.len();
                if n < 2 {
                    return Err(SplitError::TooFewTrials { subject: *subject, trials: n, need: 2 });
                }
                // proportional cut, rounded to nearest, kept strictly interior
                let cut = ((n * train) as f64 / (train + test) as f64).round() as usize;
                let cut = cut.clamp(1, n - 1);
                tr.extend_from_slice(&idx[..cut]);
                te.extend_from_slice(&idx[cut..]);
            }
            vec![Split { train: tr, test: te }]
        }
        Scheme::KFold { k } => {
            if k < 2 {
                return Err(SplitError::TooFewFolds(k));
            }
            for (subject, idx) in &groups {
                if idx.len() < k {
                    return Err(SplitError::TooFewTrials {
                        subject: *subject,
                        trials: idx.len(),
                        need: k,
                    });
                }
            }
            (0..k)
                .map(|fold| {
                    let mut tr = Vec::new();
                    let mut te = Vec::new();
                    for (_, idx) in &groups {
                        let n = idx.len();
                        let lo = fold * n / k;
                        let hi = (fold + 1) * n / k;
                        tr.extend_from_slice(&idx[..lo]);
                        te.extend_from_slice(&idx[lo..hi]);
                        tr.extend_from_slice(&idx[hi..]);
                    }
                    Split { train: tr, test: te }
                })
                .collect()
        }
        Scheme::Loso => {
            if groups.len() < 2 {
                return Err(SplitError::TooFewSubjects(groups.len()));
            }
            groups
                .iter()
                .map(|(held_out, test_idx)| {
                    let train: Vec<usize> = groups
                        .iter()
                        .filter(|(s, _)| s != held_out)
                        .flat_map(|(_, idx)| idx.iter().copied())
                        .collect();
                    Split { train, test: test_idx.clone() }
                })
                .collect()
        }
    };
    Ok(SplitPlan { scheme: scheme.clone(), folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::collections::BTreeSet;

    fn subjects(blocks: &[(u32, usize)]) -> Vec<u32> {
        blocks
            .iter()
            .flat_map(|&(s, n)| std::iter::repeat(s).take(n))
            .collect()
    }

    fn assert_partition(plan_fold: &Split, n: usize) {
        let train: BTreeSet<usize> = plan_fold.train.iter().copied().collect();
        let test: BTreeSet<usize> = plan_fold.test.iter().copied().collect();
        assert_eq!(train.len(), plan_fold.train.len(), "duplicate train indices");
        assert_eq!(test.len(), plan_fold.test.len(), "duplicate test indices");
        assert!(train.is_disjoint(&test), "train/test overlap");
        assert_eq!(train.len() + test.len(), n, "indices must cover the dataset");
        assert!(train.iter().chain(&test).all(|&i| i < n));
    }

    #[test]
    fn ratio_nine_six() {
        let sid = subjects(&[(0, 15), (1, 15)]);
        let plan = make_splits(&sid, &Scheme::TrialRatio { train: 9, test: 6 }).unwrap();
        assert_eq!(plan.folds.len(), 1);
        let f = &plan.folds[0];
        assert_partition(f, 30);
        // subject 0: first 9 train, last 6 test, chronological
        assert_eq!(&f.train[..9], &[0, 1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(&f.test[..6], &[9, 10, 11, 12, 13, 14]);
        // subject 1 likewise, offset by 15
        assert_eq!(&f.train[9..], &[15, 16, 17, 18, 19, 20, 21, 22, 23]);
        assert_eq!(&f.test[6..], &[24, 25, 26, 27, 28, 29]);
    }

    #[test]
    fn kfold_partitions() {
        let sid = subjects(&[(0, 10), (1, 10)]);
        let plan = make_splits(&sid, &Scheme::KFold { k: 5 }).unwrap();
        assert_eq!(plan.folds.len(), 5);
        let mut all_test = Vec::new();
        for f in &plan.folds {
            assert_partition(f, 20);
            assert_eq!(f.test.len(), 4);
            all_test.extend_from_slice(&f.test);
        }
        all_test.sort_unstable();
        assert_eq!(all_test, (0..20).collect::<Vec<_>>(), "test folds must tile the dataset");
    }

    #[test]
    fn loso_folds() {
        let sid = subjects(&[(3, 4), (1, 5), (7, 6)]);
        let plan = make_splits(&sid, &Scheme::Loso).unwrap();
        assert_eq!(plan.folds.len(), 3);
        for f in &plan.folds {
            assert_partition(f, 15);
            let test_subjects: BTreeSet<u32> = f.test.iter().map(|&i| sid[i]).collect();
            assert_eq!(test_subjects.len(), 1, "test fold must be one subject");
            let train_subjects: BTreeSet<u32> = f.train.iter().map(|&i| sid[i]).collect();
            assert!(train_subjects.is_disjoint(&test_subjects));
        }
        // every subject held out exactly once
        let held: BTreeSet<u32> = plan.folds.iter().map(|f| sid[f.test[0]]).collect();
        assert_eq!(held, [1, 3, 7].into_iter().collect());
    }

    #[test]
    fn errors() {
        let sid = subjects(&[(0, 5)]);
        assert!(matches!(make_splits(&sid, &Scheme::Loso), Err(SplitError::TooFewSubjects(1))));
        assert!(matches!(
            make_splits(&sid, &Scheme::KFold { k: 6 }),
            Err(SplitError::TooFewTrials { .. })
        ));
        assert!(matches!(
            make_splits(&sid, &Scheme::KFold { k: 1 }),
            Err(SplitError::TooFewFolds(1))
        ));
        assert!(matches!(
            make_splits(&sid, &Scheme::TrialRatio { train: 0, test: 6 }),
            Err(SplitError::ZeroRatio)
        ));
        let one_trial = subjects(&[(0, 1), (1, 5)]);
        assert!(make_splits(&one_trial, &Scheme::TrialRatio { train: 1, test: 1 }).is_err());
    }

    #[test]
    fn scheme_parsing_round_trips() {
        for (s, want) in [
            ("loso", Scheme::Loso),
            ("ratio:9:6", Scheme::TrialRatio { train: 9, test: 6 }),
            ("kfold:10", Scheme::KFold { k: 10 }),
        ] {
            let parsed = Scheme::parse(s).unwrap();
            assert_eq!(parsed, want);
            assert_eq!(Scheme::parse(&parsed.describe()).unwrap(), parsed);
        }
        assert!(Scheme::parse("bogus").is_err());
        assert!(Scheme::parse("ratio:9").is_err());
        assert!(Scheme::parse("kfold:x").is_err());
    }

    /// 1000 randomized subject structures; every scheme that accepts the
    /// structure must produce disjoint, exhaustive folds.
    #[test]
    fn randomized_structural_cases() {
        let mut rng = Rng::new(1234);
        let mut accepted = 0usize;
        for case in 0..1000 {
            let n_subj = 2 + rng.below(5);
            let blocks: Vec<(u32, usize)> = (0..n_subj)
                .map(|s| (s as u32, 2 + rng.below(30)))
                .collect();
            let sid = subjects(&blocks);
            let n = sid.len();
            let schemes = [
                Scheme::TrialRatio {
                    train: 1 + rng.below(9),
                    test: 1 + rng.below(9),
                },
                Scheme::KFold { k: 2 + rng.below(5) },
                Scheme::Loso,
            ];
            for scheme in schemes {
                match make_splits(&sid, &scheme) {
                    Ok(plan) => {
                        accepted += 1;
                        assert!(!plan.folds.is_empty(), "case {case}");
                        for f in &plan.folds {
                            assert_partition(f, n);
                            assert!(!f.train.is_empty() && !f.test.is_empty(), "case {case}");
                        }
                        if let Scheme::KFold { k } = scheme {
                            assert_eq!(plan.folds.len(), k);
                            let mut all: Vec<usize> =
                                plan.folds.iter().flat_map(|f| f.test.iter().copied()).collect();
                            all.sort_unstable();
                            assert_eq!(all, (0..n).collect::<Vec<_>>(), "case {case}");
                        }
                        if matches!(scheme, Scheme::Loso) {
                            assert_eq!(plan.folds.len(), n_subj);
                        }
                    }
                    Err(SplitError::TooFewTrials { .. }) => {}
                    Err(e) => panic!("case {case}: unexpected rejection {e}"),
                }
            }
        }
        assert!(accepted > 1500, "too few accepted cases ({accepted}) to be meaningful");
    }

    #[test]
    fn interleaved_subject_order_is_handled() {
        // subjects need not be contiguous in the dataset
        let sid = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let plan = make_splits(&sid, &Scheme::TrialRatio { train: 1, test: 1 }).unwrap();
        let f = &plan.folds[0];
        assert_partition(f, 8);
        // subject 0 occupies dataset indices 0,2,4,6; first half train
        assert!(f.train.contains(&0) && f.train.contains(&2));
        assert!(f.test.contains(&4) && f.test.contains(&6));
    }
}
