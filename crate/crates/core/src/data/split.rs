use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, NUM_CLASSES};
use crate::error::{Error, Result};

/// Patient-level fold assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.assignments.get(patient).copied()
    }

    /// Sample indices of the test fold and of the remaining (training) folds.
    pub fn split(&self, data: &Dataset, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in data.samples.iter().enumerate() {
            let f = self
                .fold_of(&s.patient_id)
                .ok_or_else(|| Error::Split(format!("patient `{}` is not covered by the fold plan", s.patient_id)))?;
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, test))
    }

    pub fn patients_in(&self, fold: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, &f)| f == fold).map(|(p, _)| p.as_str()).collect()
    }
}

/// Seeded shuffle of patients, dealt round-robin into `k` folds.
///
/// With `stratified`, patients are shuffled within each class (label of the
/// first visit) and dealt class by class, continuing the round-robin.
pub fn group_kfold(data: &Dataset, k: usize, seed: u64, stratified: bool) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Split(format!("k must be at least 2, got {k}")));
    }
    let patients = data.patients();
    if patients.len() < k {
        return Err(Error::Split(format!("{} patients cannot fill {k} folds", patients.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<String> = if stratified {
        let mut first_label = BTreeMap::new();
        for s in &data.samples {
            first_label.entry(s.patient_id.clone()).or_insert(s.label.map_or(NUM_CLASSES, |l| l.index()));
        }
        let mut order = Vec::with_capacity(patients.len());
        for c in 0..=NUM_CLASSES {
            let mut group: Vec<String> = patients.iter().filter(|p| first_label[*p] == c).cloned().collect();
            group.shuffle(&mut rng);
            order.extend(group);
        }
        order
    } else {
        let mut p = patients;
        p.shuffle(&mut rng);
        p
    };
    let assignments = order.into_iter().enumerate().map(|(i, p)| (p, i % k)).collect();
    Ok(FoldPlan { k, assignments })
}

/// Splits sample indices into (train, validation) by patient.
///
/// `round(fraction · patients)` patients, at least one, go to validation.
pub fn validation_split(data: &Dataset, indices: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut patients: Vec<&str> = indices.iter().map(|&i| data.samples[i].patient_id.as_str()).collect();
    patients.sort_unstable();
    patients.dedup();
    let n_val = ((fraction * patients.len() as f64).round() as usize).max(1);
    if !(fraction > 0.0 && fraction < 1.0) || n_val >= patients.len() {
        return Err(Error::Config(format!(
            "validation fraction {fraction} leaves no usable split of {} patients",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let val: std::collections::BTreeSet<&str> = patients[..n_val].iter().copied().collect();
    let (v, t): (Vec<usize>, Vec<usize>) = indices.iter().partition(|&&i| val.contains(data.samples[i].patient_id.as_str()));
    Ok((t, v))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{sample, schema};
    use super::super::Label;
    use super::*;

    fn data(patients: usize, visits: usize) -> Dataset {
        let sc = schema(1, 0);
        let mut rows = Vec::new();
        for p in 0..patients {
            for v in 0..visits {
                let label = Label::from_index(p % 3);
                rows.push(sample(&sc, &format!("P{p:03}"), &format!("v{v}"), label, vec![Some(p as f64)]));
            }
        }
        Dataset::new(sc, rows).unwrap()
    }

    #[test]
    fn ten_patients_five_folds_of_two() {
        let plan = group_kfold(&data(10, 1), 5, 3, false).unwrap();
        for f in 0..5 {
            assert_eq!(plan.patients_in(f).len(), 2);
        }
    }

    #[test]
    fn visits_share_their_patient_fold() {
        let d = data(7, 3);
        let plan = group_kfold(&d, 3, 11, false).unwrap();
        for f in 0..3 {
            let (train, test) = plan.split(&d, f).unwrap();
            let tp: std::collections::BTreeSet<_> = train.iter().map(|&i| &d.samples[i].patient_id).collect();
            assert!(test.iter().all(|&i| !tp.contains(&d.samples[i].patient_id)));
            assert_eq!(test.len() % 3, 0);
        }
    }

    #[test]
    fn same_seed_same_plan() {
        let d = data(20, 2);
        assert_eq!(group_kfold(&d, 5, 9, false).unwrap(), group_kfold(&d, 5, 9, false).unwrap());
        assert_ne!(group_kfold(&d, 5, 9, false).unwrap(), group_kfold(&d, 5, 10, false).unwrap());
    }

    #[test]
    fn too_few_patients() {
        assert!(matches!(group_kfold(&data(3, 2), 5, 0, false), Err(Error::Split(_))));
        assert!(matches!(group_kfold(&data(3, 2), 1, 0, false), Err(Error::Split(_))));
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let d = data(30, 1);
        let plan = group_kfold(&d, 5, 1, true).unwrap();
        for f in 0..5 {
            let (_, test) = plan.split(&d, f).unwrap();
            let mut c = [0; 3];
            for i in test {
                c[d.samples[i].label.unwrap().index()] += 1;
            }
            assert_eq!(c, [2, 2, 2]);
        }
    }

    #[test]
    fn validation_split_is_grouped() {
        let d = data(20, 3);
        let all: Vec<usize> = (0..d.len()).collect();
        let (t, v) = validation_split(&d, &all, 0.15, 4).unwrap();
        assert_eq!(v.len(), 3 * 3);
        let vp: std::collections::BTreeSet<_> = v.iter().map(|&i| &d.samples[i].patient_id).collect();
        assert!(t.iter().all(|&i| !vp.contains(&d.samples[i].patient_id)));
        assert!(matches!(validation_split(&d, &all[..3], 0.15, 4), Err(Error::Config(_))));
    }
}
