//! ANOVA-based feature scoring and the gated, weighted top-k selection.

mod stats;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ModalityKind, NUM_CLASSES};
use crate::error::{Error, Result};

pub use stats::{anova_f, f_survival, ln_beta, ln_gamma, regularized_incomplete_beta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub p_threshold: f64,
    pub w_f: f64,
    pub w_p: f64,
    pub k: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { p_threshold: 0.01, w_f: 0.7, w_p: 0.3, k: 139 }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_threshold > 0.0 && self.p_threshold < 1.0) {
            return Err(Error::Config(format!("p_threshold must lie in (0, 1), got {}", self.p_threshold)));
        }
        if self.w_f < 0.0 || self.w_p < 0.0 || (self.w_f + self.w_p - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights must be non-negative and sum to 1, got {} + {}", self.w_f, self.w_p)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-feature test result. `combined` is set only for features passing the p-value gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature_name: String,
    #[serde(with = "extended_f64")]
    pub f_score: f64,
    pub p_value: f64,
    pub combined: Option<f64>,
}

impl FeatureScore {
    pub fn new(name: impl Into<String>, f_score: f64, p_value: f64) -> Self {
        Self { feature_name: name.into(), f_score, p_value, combined: None }
    }
}

/// Scores every numeric feature of `kind` with a one-way ANOVA across classes.
///
/// Only labelled samples with the modality present and the entry observed
/// contribute. A feature without enough data for the test gets `F = 0, p = 1`.
pub fn score_features(data: &Dataset, kind: ModalityKind) -> Vec<FeatureScore> {
    data.schema
        .modality(kind)
        .numeric
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut groups: [Vec<f64>; NUM_CLASSES] = Default::default();
            for s in data.samples.iter().filter(|s| s.is_present(kind)) {
                if let (Some(l), Some(v)) = (s.label, s.block(kind).numeric[j]) {
                    groups[l.index()].push(v);
                }
            }
            let groups: Vec<Vec<f64>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
            let (f, p) = anova_f(&groups).unwrap_or((0.0, 1.0));
            FeatureScore::new(name.clone(), f, p)
        })
        .collect()
}

/// Scores with `combined` filled in, plus the selected names in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub scores: Vec<FeatureScore>,
    pub selected: Vec<String>,
}

fn neg_log10(p: f64) -> f64 {
    -p.max(f64::MIN_POSITIVE).log10()
}

/// Gates by p-value, min-max normalises F and `-log10 p` over the survivors,
/// mixes them `w_f : w_p`, and returns the top `k`.
///
/// Ties break by feature name. Infinite-F features rank above every finite
/// survivor. A single survivor (or a constant column) normalises to 1.
pub fn combined_rank(scores: &[FeatureScore], config: &SelectionConfig) -> Ranking {
    rank_with(scores, config, neg_log10)
}

fn min_max(values: &[f64]) -> impl Fn(f64) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    move |v: f64| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 1.0 }
}

fn rank_with(scores: &[FeatureScore], config: &SelectionConfig, neg_log: fn(f64) -> f64) -> Ranking {
    let mut out: Vec<FeatureScore> = scores.iter().cloned().map(|mut s| {
        s.combined = None;
        s
    }).collect();
    let survivors: Vec<usize> = (0..out.len()).filter(|&i| out[i].p_value <= config.p_threshold).collect();
    if survivors.is_empty() {
        log::warn!("SelectionEmpty: no feature passed p <= {}", config.p_threshold);
        return Ranking { scores: out, selected: Vec::new() };
    }
    let finite: Vec<usize> = survivors.iter().copied().filter(|&i| out[i].f_score.is_finite()).collect();
    let f_norm = min_max(&finite.iter().map(|&i| out[i].f_score).collect::<Vec<_>>());
    let p_norm = min_max(&finite.iter().map(|&i| neg_log(out[i].p_value)).collect::<Vec<_>>());
    for &i in &survivors {
        let s = &mut out[i];
        s.combined = Some(if s.f_score.is_finite() {
            config.w_f * f_norm(s.f_score) + config.w_p * p_norm(neg_log(s.p_value))
        } else {
            1.0
        });
    }
    let mut order = survivors;
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&out[a], &out[b]);
        sb.f_score
            .is_infinite()
            .cmp(&sa.f_score.is_infinite())
            .then(sb.combined.partial_cmp(&sa.combined).expect("finite combined scores"))
            .then(sa.feature_name.cmp(&sb.feature_name))
    });
    let selected = order.into_iter().take(config.k).map(|i| out[i].feature_name.clone()).collect();
    Ranking { scores: out, selected }
}

/// Contents of `selection_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub config: SelectionConfig,
    pub modality: ModalityKind,
    pub features: Vec<SelectionEntry>,
    pub selected: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<crate::data::Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub feature: String,
    #[serde(with = "extended_f64")]
    pub f: f64,
    pub p: f64,
    pub combined: Option<f64>,
    pub selected: bool,
}

impl SelectionReport {
    pub fn new(config: &SelectionConfig, modality: ModalityKind, ranking: &Ranking) -> Self {
        let features = ranking
            .scores
            .iter()
            .map(|s| SelectionEntry {
                feature: s.feature_name.clone(),
                f: s.f_score,
                p: s.p_value,
                combined: s.combined,
                selected: ranking.selected.contains(&s.feature_name),
            })
            .collect();
        Self { config: config.clone(), modality, features, selected: ranking.selected.clone(), provenance: None }
    }
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub(crate) mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("invalid float `{other}`"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(name: &str, f: f64, p: f64) -> FeatureScore {
        FeatureScore::new(name, f, p)
    }

    #[test]
    fn seventy_thirty_weighting() {
        // a: max F, min -log p  -> (Fn, Pn) = (1, 0); b: the reverse
        let scores = [score("a", 10.0, 0.009), score("b", 2.0, 0.0001)];
        let r = combined_rank(&scores, &SelectionConfig::default());
        assert!((r.scores[0].combined.unwrap() - 0.7).abs() < 1e-12);
        assert!((r.scores[1].combined.unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(r.selected, vec!["a", "b"]);
    }

    #[test]
    fn single_survivor_normalises_to_one() {
        let scores = [score("x", 3.0, 0.5), score("y", 9.0, 0.001)];
        let r = combined_rank(&scores, &SelectionConfig::default());
        assert_eq!(r.scores[1].combined, Some(1.0));
        assert_eq!(r.scores[0].combined, None);
        assert_eq!(r.selected, vec!["y"]);
    }

    #[test]
    fn top_k_caps_survivors() {
        let scores: Vec<FeatureScore> =
            (0..230).map(|i| score(&format!("G{i:03}"), i as f64, if i % 3 == 0 { 0.5 } else { 1e-3 / (1.0 + i as f64) })).collect();
        let survivors = scores.iter().filter(|s| s.p_value <= 0.01).count();
        let r = combined_rank(&scores, &SelectionConfig::default());
        assert_eq!(r.selected.len(), survivors.min(139));
        let r = combined_rank(&scores, &SelectionConfig { k: 500, ..Default::default() });
        assert_eq!(r.selected.len(), survivors);
    }

    #[test]
    fn empty_gate_returns_nothing() {
        let r = combined_rank(&[score("a", 0.1, 0.9)], &SelectionConfig::default());
        assert!(r.selected.is_empty());
    }

    #[test]
    fn infinite_f_ranks_first_and_ties_break_by_name() {
        let scores = [score("m", 50.0, 1e-9), score("z", f64::INFINITY, 0.0), score("b", 5.0, 0.001), score("a", 5.0, 0.001)];
        let r = combined_rank(&scores, &SelectionConfig::default());
        assert_eq!(r.selected, vec!["z", "m", "a", "b"]);
    }

    #[test]
    fn log_base_does_not_change_ranking() {
        let scores: Vec<FeatureScore> =
            (0..40).map(|i| score(&format!("g{i}"), (i * 7 % 13) as f64 + 0.5, 10f64.powf(-((i * 5 % 11) as f64) - 2.1))).collect();
        let cfg = SelectionConfig { k: 15, ..Default::default() };
        let a = rank_with(&scores, &cfg, neg_log10);
        let b = rank_with(&scores, &cfg, |p| -p.max(f64::MIN_POSITIVE).ln());
        assert_eq!(a.selected, b.selected);
    }

    #[test]
    fn config_validation() {
        assert!(SelectionConfig::default().validate().is_ok());
        assert!(SelectionConfig { w_f: 0.6, ..Default::default() }.validate().is_err());
        assert!(SelectionConfig { p_threshold: 1.0, ..Default::default() }.validate().is_err());
        assert!(SelectionConfig { k: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn report_serializes_infinite_f() {
        let r = combined_rank(&[score("z", f64::INFINITY, 0.0)], &SelectionConfig::default());
        let rep = SelectionReport::new(&SelectionConfig::default(), ModalityKind::Genes, &r);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"f\":\"inf\""));
        let back: SelectionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.features[0].f, f64::INFINITY);
    }
}
