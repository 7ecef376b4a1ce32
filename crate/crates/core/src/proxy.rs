//! Rule-based proxy labels.
//!
//! A rule is a conjunction of threshold/category conditions over the
//! unstandardized window features; a window is a proxy anomaly when at least
//! one rule matches. Labels are only used to evaluate the detectors.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureMatrix, FeatureSchema, RawFeatures, WindowRef, LANE_KEEPING_QUALITY, RELATIVE_SPEED_RANGE, TTC_RISKINESS};
use crate::ingest::csv_io;

pub const FAMILY_SPEED: &str = "extreme speed variation";
pub const FAMILY_COMBINATION: &str = "unusual signal combination";
pub const FAMILY_RISK: &str = "risky event";

/// Relative speed range above which a window counts as extreme.
pub const EXTREME_SPEED_RANGE: f64 = 0.6;
/// Relative speed range counted as "high" when combined with other conditions.
pub const HIGH_SPEED_RANGE: f64 = 0.3;
/// Collision riskiness above which a window counts as a risky event.
pub const HIGH_COLLISION_RISK: f64 = 0.8;

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("rule `{rule}` references unknown feature `{name}`")]
    UnknownFeature { rule: String, name: String },
    #[error("rule `{rule}`: {reason}")]
    InvalidRule { rule: String, reason: String },
    #[error("duplicate rule name `{0}`")]
    DuplicateRule(String),
    #[error("label file is malformed: {0}")]
    Format(String),
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "in")]
    In,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Number(f64),
    Category(String),
    Categories(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: String,
    pub op: Comparator,
    pub value: Threshold,
}

impl Condition {
    pub fn gt(feature: &str, value: f64) -> Self {
        Self { feature: feature.into(), op: Comparator::Gt, value: Threshold::Number(value) }
    }

    pub fn lt(feature: &str, value: f64) -> Self {
        Self { feature: feature.into(), op: Comparator::Lt, value: Threshold::Number(value) }
    }

    pub fn is(feature: &str, category: &str) -> Self {
        Self { feature: feature.into(), op: Comparator::Eq, value: Threshold::Category(category.into()) }
    }

    pub fn one_of(feature: &str, categories: &[&str]) -> Self {
        Self {
            feature: feature.into(),
            op: Comparator::In,
            value: Threshold::Categories(categories.iter().map(|c| c.to_string()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyRule {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    pub all_of: Vec<Condition>,
}

/// Serialized as a bare JSON list of rules.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProxyRuleSet {
    pub rules: Vec<ProxyRule>,
}

impl ProxyRuleSet {
    pub fn new(rules: Vec<ProxyRule>) -> Result<Self, ProxyError> {
        let set = Self { rules };
        set.check_names()?;
        Ok(set)
    }

    fn check_names(&self) -> Result<(), ProxyError> {
        let mut seen = HashSet::new();
        for r in &self.rules {
            if !seen.insert(r.name.as_str()) {
                return Err(ProxyError::DuplicateRule(r.name.clone()));
            }
            if r.all_of.is_empty() {
                return Err(ProxyError::InvalidRule { rule: r.name.clone(), reason: "no conditions".into() });
            }
        }
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, ProxyError> {
        let f = File::open(path).map_err(|e| not_found(e, path))?;
        let set: Self = serde_json::from_reader(BufReader::new(f)).map_err(|e| ProxyError::Format(e.to_string()))?;
        set.check_names()?;
        Ok(set)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), ProxyError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Replace the threshold of every numeric condition on `feature` whose
    /// threshold currently equals `from`.
    pub fn retarget(&mut self, feature: &str, from: f64, to: f64) {
        for c in self.rules.iter_mut().flat_map(|r| r.all_of.iter_mut()) {
            if c.feature == feature && c.value == Threshold::Number(from) {
                c.value = Threshold::Number(to);
            }
        }
    }
}

fn not_found(e: std::io::Error, path: &Path) -> ProxyError {
    if e.kind() == std::io::ErrorKind::NotFound {
        ProxyError::FileNotFound(path.to_path_buf())
    } else {
        ProxyError::Io(e)
    }
}

/// The eight shipped heuristics across the three rule families.
pub fn default_ruleset() -> ProxyRuleSet {
    let rule = |name: &str, family: &str, all_of: Vec<Condition>| ProxyRule {
        name: name.into(),
        family: Some(family.into()),
        all_of,
    };
    let bad_lanes = || Condition::one_of(LANE_KEEPING_QUALITY, &["Bad", "Worst"]);
    ProxyRuleSet {
        rules: vec![
            rule(
                "extreme speed variation",
                FAMILY_SPEED,
                vec![Condition::gt(RELATIVE_SPEED_RANGE, EXTREME_SPEED_RANGE)],
            ),
            rule(
                "severe rain on dry road",
                FAMILY_COMBINATION,
                vec![Condition::is("rain_severe", "Severe"), Condition::is("road_condition", "Dry")],
            ),
            rule(
                "severe rain with severe sun ray",
                FAMILY_COMBINATION,
                vec![Condition::is("rain_severe", "Severe"), Condition::is("sunray_severe", "Severe")],
            ),
            rule(
                "severe sun ray with blur image",
                FAMILY_COMBINATION,
                vec![Condition::is("sunray_severe", "Severe"), Condition::is("blur_severe", "Severe")],
            ),
            rule(
                "bad lane keeping under severe rain",
                FAMILY_RISK,
                vec![bad_lanes(), Condition::is("rain_severe", "Severe")],
            ),
            rule(
                "bad lane keeping with high speed range",
                FAMILY_RISK,
                vec![bad_lanes(), Condition::gt(RELATIVE_SPEED_RANGE, HIGH_SPEED_RANGE)],
            ),
            rule(
                "high speed range on wet or snow-covered road",
                FAMILY_RISK,
                vec![
                    Condition::gt(RELATIVE_SPEED_RANGE, HIGH_SPEED_RANGE),
                    Condition::one_of("road_condition", &["Wet", "Snow-covered"]),
                ],
            ),
            rule(
                "high collision riskiness",
                FAMILY_RISK,
                vec![Condition::gt(TTC_RISKINESS, HIGH_COLLISION_RISK)],
            ),
        ],
    }
}

enum Compiled {
    Numeric { column: usize, op: Comparator, value: f64 },
    Category { column: usize, allowed: Vec<String> },
}

impl Compiled {
    fn matches(&self, raw: &RawFeatures) -> bool {
        match self {
            Compiled::Numeric { column, op, value } => {
                let x = raw.continuous[*column];
                match op {
                    Comparator::Gt => x > *value,
                    Comparator::Lt => x < *value,
                    Comparator::Eq => x == *value,
                    Comparator::In => unreachable!("rejected at compile time"),
                }
            }
            Compiled::Category { column, allowed } => allowed.iter().any(|c| *c == raw.categorical[*column]),
        }
    }
}

fn compile(rule: &ProxyRule, schema: &FeatureSchema) -> Result<Vec<Compiled>, ProxyError> {
    let invalid = |reason: String| ProxyError::InvalidRule { rule: rule.name.clone(), reason };
    if rule.all_of.is_empty() {
        return Err(invalid("no conditions".into()));
    }
    let mut out = Vec::with_capacity(rule.all_of.len());
    for c in &rule.all_of {
        if let Some(column) = schema.raw_continuous_index(&c.feature) {
            let value = match (&c.op, &c.value) {
                (Comparator::In, _) => return Err(invalid(format!("`in` used on numeric feature `{}`", c.feature))),
                (_, Threshold::Number(v)) => *v,
                _ => return Err(invalid(format!("numeric feature `{}` needs a numeric threshold", c.feature))),
            };
            out.push(Compiled::Numeric { column, op: c.op, value });
        } else if let Some(column) = schema.categorical_index(&c.feature) {
            let allowed = match (&c.op, &c.value) {
                (Comparator::Eq, Threshold::Category(s)) => vec![s.clone()],
                (Comparator::In, Threshold::Categories(v)) => v.clone(),
                (Comparator::In, Threshold::Category(s)) => vec![s.clone()],
                _ => {
                    return Err(invalid(format!("categorical feature `{}` supports `=` and `in` with category names", c.feature)))
                }
            };
            let known = &schema.categorical_features[column].categories;
            if let Some(bad) = allowed.iter().find(|a| !known.contains(a)) {
                return Err(invalid(format!("`{bad}` is not a category of `{}`", c.feature)));
            }
            out.push(Compiled::Category { column, allowed });
        } else {
            return Err(ProxyError::UnknownFeature { rule: rule.name.clone(), name: c.feature.clone() });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEntry {
    pub window_ref: WindowRef,
    /// Names of the matching rules, in rule-set order. Empty for normal windows.
    pub matched_rules: Vec<String>,
}

impl LabelEntry {
    pub fn is_proxy(&self) -> bool {
        !self.matched_rules.is_empty()
    }
}

/// Proxy labels aligned with the rows of the labeled feature matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProxyLabeling {
    pub entries: Vec<LabelEntry>,
}

impl ProxyLabeling {
    pub fn flags(&self) -> Vec<bool> {
        self.entries.iter().map(LabelEntry::is_proxy).collect()
    }

    pub fn flagged_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_proxy()).count()
    }

    pub fn prevalence(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.flagged_count() as f64 / self.entries.len() as f64
        }
    }

    /// Labels keyed by window for joins against other tables.
    pub fn by_window(&self) -> HashMap<WindowKey, &LabelEntry> {
        self.entries.iter().map(|e| (WindowKey::of(&e.window_ref), e)).collect()
    }
}

/// Hashable form of a [`WindowRef`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WindowKey(String, u64);

impl WindowKey {
    pub fn of(w: &WindowRef) -> Self {
        Self(w.measurement_id.clone(), w.start_time.to_bits())
    }
}

/// Evaluate every rule on the raw values of every window.
pub fn apply_rules(rules: &ProxyRuleSet, matrix: &FeatureMatrix) -> Result<ProxyLabeling, ProxyError> {
    rules.check_names()?;
    let compiled = rules
        .rules
        .iter()
        .map(|r| compile(r, &matrix.schema))
        .collect::<Result<Vec<_>, _>>()?;
    let entries = matrix
        .raw
        .par_iter()
        .map(|raw| LabelEntry {
            window_ref: raw.window_ref.clone(),
            matched_rules: rules
                .rules
                .iter()
                .zip(&compiled)
                .filter(|(_, conds)| conds.iter().all(|c| c.matches(raw)))
                .map(|(r, _)| r.name.clone())
                .collect(),
        })
        .collect();
    Ok(ProxyLabeling { entries })
}

pub const LABEL_PROXY: &str = "proxy-anomaly";
pub const LABEL_NORMAL: &str = "normal";

/// CSV with columns `measurement_id, window_start, label, matched_rules`;
/// rule names are joined with `;`.
pub fn write_labels_csv(labels: &ProxyLabeling, path: &Path) -> Result<(), ProxyError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["measurement_id", "window_start", "label", "matched_rules"]).map_err(csv_io)?;
    for e in &labels.entries {
        let label = if e.is_proxy() { LABEL_PROXY } else { LABEL_NORMAL };
        w.write_record([
            e.window_ref.measurement_id.as_str(),
            &format!("{}", e.window_ref.start_time),
            label,
            &e.matched_rules.join(";"),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<ProxyLabeling, ProxyError> {
    let f = File::open(path).map_err(|e| not_found(e, path))?;
    let mut rdr = csv::Reader::from_reader(BufReader::new(f));
    let fmt = |e: csv::Error| ProxyError::Format(e.to_string());
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(fmt)?;
        if rec.len() != 4 {
            return Err(ProxyError::Format(format!("expected 4 columns, got {}", rec.len())));
        }
        let start_time: f64 = rec[1].parse().map_err(|_| ProxyError::Format(format!("bad window_start `{}`", &rec[1])))?;
        let matched_rules: Vec<String> =
            if rec[3].is_empty() { Vec::new() } else { rec[3].split(';').map(str::to_string).collect() };
        let proxy = match &rec[2] {
            LABEL_PROXY => true,
            LABEL_NORMAL => false,
            other => return Err(ProxyError::Format(format!("unknown label `{other}`"))),
        };
        if proxy == matched_rules.is_empty() {
            return Err(ProxyError::Format(format!("label `{}` disagrees with matched rules", &rec[2])));
        }
        entries.push(LabelEntry {
            window_ref: WindowRef { measurement_id: rec[0].to_string(), start_time },
            matched_rules,
        });
    }
    Ok(ProxyLabeling { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{CategoricalFeature, ContinuousFeature, FeatureVector};
    use proptest::prelude::*;

    fn schema() -> FeatureSchema {
        let cat = |name: &str, cats: &[&str]| CategoricalFeature {
            name: name.into(),
            categories: cats.iter().map(|c| c.to_string()).collect(),
        };
        FeatureSchema {
            raw_continuous: vec![RELATIVE_SPEED_RANGE.into(), TTC_RISKINESS.into()],
            continuous_features: vec![ContinuousFeature { name: RELATIVE_SPEED_RANGE.into(), mean: 0.0, stddev: 1.0 }],
            categorical_features: vec![
                cat("rain_severe", &["Severe", "Normal"]),
                cat("sunray_severe", &["Severe", "Normal"]),
                cat("blur_severe", &["Severe", "Normal"]),
                cat("road_condition", &["Dry", "Wet", "Snow-covered"]),
                cat(LANE_KEEPING_QUALITY, &["Good", "Bad", "Worst"]),
            ],
        }
    }

    fn window(i: usize, rsr: f64, risk: f64, cats: [&str; 5]) -> RawFeatures {
        RawFeatures {
            window_ref: WindowRef { measurement_id: "m".into(), start_time: 3.0 * i as f64 },
            end_time: 3.0 * i as f64 + 6.0,
            continuous: vec![rsr, risk],
            categorical: cats.iter().map(|c| c.to_string()).collect(),
        }
    }

    const CALM: [&str; 5] = ["Normal", "Normal", "Normal", "Dry", "Good"];

    fn matrix(raw: Vec<RawFeatures>) -> FeatureMatrix {
        let rows = raw.iter().map(|r| FeatureVector { window_ref: r.window_ref.clone(), values: vec![0.0] }).collect();
        FeatureMatrix { schema: schema(), rows, raw }
    }

    #[test]
    fn speed_rule_flags_the_thirty_to_ten_window() {
        let rsr = (30.0 - 10.0) / 30.0;
        let m = matrix(vec![window(0, rsr, 0.0, CALM), window(1, 0.1, 0.0, CALM)]);
        let labels = apply_rules(&default_ruleset(), &m).unwrap();
        assert_eq!(labels.entries[0].matched_rules, vec!["extreme speed variation".to_string()]);
        assert!(!labels.entries[1].is_proxy());
    }

    #[test]
    fn empty_ruleset_flags_nothing() {
        let m = matrix(vec![window(0, 0.9, 1.0, ["Severe", "Severe", "Severe", "Dry", "Worst"])]);
        let labels = apply_rules(&ProxyRuleSet::default(), &m).unwrap();
        assert_eq!(labels.flagged_count(), 0);
    }

    #[test]
    fn rain_on_dry_road_is_an_unusual_combination() {
        let m = matrix(vec![window(0, 0.05, 0.0, ["Severe", "Normal", "Normal", "Dry", "Good"])]);
        let labels = apply_rules(&default_ruleset(), &m).unwrap();
        assert_eq!(labels.entries[0].matched_rules, vec!["severe rain on dry road".to_string()]);
        let rule = default_ruleset().rules.into_iter().find(|r| r.name == "severe rain on dry road").unwrap();
        assert_eq!(rule.family.as_deref(), Some(FAMILY_COMBINATION));
    }

    #[test]
    fn default_set_covers_all_families() {
        let set = default_ruleset();
        assert!(set.rules.len() >= 7);
        for fam in [FAMILY_SPEED, FAMILY_COMBINATION, FAMILY_RISK] {
            assert!(set.rules.iter().any(|r| r.family.as_deref() == Some(fam)), "{fam}");
        }
        ProxyRuleSet::new(set.rules).unwrap();
    }

    #[test]
    fn every_default_rule_can_fire() {
        let cases = [
            window(0, 0.7, 0.0, CALM),
            window(1, 0.0, 0.0, ["Severe", "Normal", "Normal", "Dry", "Good"]),
            window(2, 0.0, 0.0, ["Severe", "Severe", "Normal", "Wet", "Good"]),
            window(3, 0.0, 0.0, ["Normal", "Severe", "Severe", "Dry", "Good"]),
            window(4, 0.0, 0.0, ["Severe", "Normal", "Normal", "Wet", "Bad"]),
            window(5, 0.4, 0.0, ["Normal", "Normal", "Normal", "Dry", "Worst"]),
            window(6, 0.4, 0.0, ["Normal", "Normal", "Normal", "Snow-covered", "Good"]),
            window(7, 0.0, 0.9, CALM),
        ];
        let set = default_ruleset();
        let labels = apply_rules(&set, &matrix(cases.to_vec())).unwrap();
        for (rule, entry) in set.rules.iter().zip(&labels.entries) {
            assert!(entry.matched_rules.contains(&rule.name), "{} did not fire", rule.name);
        }
    }

    #[test]
    fn unknown_feature_and_bad_category_are_rejected() {
        let m = matrix(vec![window(0, 0.0, 0.0, CALM)]);
        let set = ProxyRuleSet::new(vec![ProxyRule {
            name: "x".into(),
            family: None,
            all_of: vec![Condition::gt("lateral_acceleration", 3.0)],
        }])
        .unwrap();
        assert!(matches!(apply_rules(&set, &m), Err(ProxyError::UnknownFeature { name, .. }) if name == "lateral_acceleration"));
        let set = ProxyRuleSet::new(vec![ProxyRule {
            name: "y".into(),
            family: None,
            all_of: vec![Condition::is("road_condition", "Icy")],
        }])
        .unwrap();
        assert!(matches!(apply_rules(&set, &m), Err(ProxyError::InvalidRule { .. })));
    }

    #[test]
    fn duplicate_and_empty_rules_are_rejected() {
        let r = ProxyRule { name: "a".into(), family: None, all_of: vec![Condition::gt(TTC_RISKINESS, 0.5)] };
        assert!(matches!(ProxyRuleSet::new(vec![r.clone(), r.clone()]), Err(ProxyError::DuplicateRule(_))));
        let empty = ProxyRule { name: "b".into(), family: None, all_of: vec![] };
        assert!(matches!(ProxyRuleSet::new(vec![empty]), Err(ProxyError::InvalidRule { .. })));
    }

    #[test]
    fn rule_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.json");
        let set = default_ruleset();
        set.save_json(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.trim_start().starts_with('['));
        assert!(text.contains("\"op\": \">\""));
        assert_eq!(ProxyRuleSet::load_json(&path).unwrap(), set);
    }

    #[test]
    fn hand_written_rule_file_parses() {
        let json = r#"[{"name": "wet and fast", "all_of": [
            {"feature": "road_condition", "op": "in", "value": ["Wet", "Snow-covered"]},
            {"feature": "relative_speed_range", "op": ">", "value": 0.2}]}]"#;
        let set: ProxyRuleSet = serde_json::from_str(json).unwrap();
        let m = matrix(vec![
            window(0, 0.25, 0.0, ["Normal", "Normal", "Normal", "Wet", "Good"]),
            window(1, 0.25, 0.0, CALM),
        ]);
        let labels = apply_rules(&set, &m).unwrap();
        assert_eq!(labels.flags(), vec![true, false]);
    }

    #[test]
    fn labels_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let m = matrix(vec![window(0, 0.7, 0.9, CALM), window(1, 0.0, 0.0, CALM)]);
        let labels = apply_rules(&default_ruleset(), &m).unwrap();
        write_labels_csv(&labels, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("proxy-anomaly,extreme speed variation;high collision riskiness"));
        assert_eq!(read_labels_csv(&path).unwrap(), labels);
    }

    fn arb_window() -> impl Strategy<Value = RawFeatures> {
        let cats = (
            prop::sample::select(vec!["Severe", "Normal"]),
            prop::sample::select(vec!["Severe", "Normal"]),
            prop::sample::select(vec!["Severe", "Normal"]),
            prop::sample::select(vec!["Dry", "Wet", "Snow-covered"]),
            prop::sample::select(vec!["Good", "Bad", "Worst"]),
        );
        (0.0..1.0f64, 0.0..1.0f64, cats).prop_map(|(rsr, risk, (a, b, c, d, e))| window(0, rsr, risk, [a, b, c, d, e]))
    }

    proptest! {
        #[test]
        fn raising_a_threshold_never_grows_the_flagged_set(
            raw in prop::collection::vec(arb_window(), 1..60),
            lo in 0.0..1.0f64,
            delta in 0.0..0.5f64,
        ) {
            let m = matrix(raw);
            let mut loose = default_ruleset();
            loose.retarget(RELATIVE_SPEED_RANGE, EXTREME_SPEED_RANGE, lo);
            let mut tight = default_ruleset();
            tight.retarget(RELATIVE_SPEED_RANGE, EXTREME_SPEED_RANGE, lo + delta);
            let a = apply_rules(&loose, &m).unwrap().flags();
            let b = apply_rules(&tight, &m).unwrap().flags();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!y || *x);
            }
        }

        #[test]
        fn union_of_rule_sets_is_union_of_flags(
            raw in prop::collection::vec(arb_window(), 1..60),
            split in 0usize..8,
        ) {
            let m = matrix(raw);
            let all = default_ruleset();
            let (r1, r2) = all.rules.split_at(split);
            let f1 = apply_rules(&ProxyRuleSet { rules: r1.to_vec() }, &m).unwrap().flags();
            let f2 = apply_rules(&ProxyRuleSet { rules: r2.to_vec() }, &m).unwrap().flags();
            let mut reversed = all.clone();
            reversed.rules.reverse();
            let fu = apply_rules(&all, &m).unwrap().flags();
            let fr = apply_rules(&reversed, &m).unwrap().flags();
            for i in 0..fu.len() {
                prop_assert_eq!(fu[i], f1[i] || f2[i]);
                prop_assert_eq!(fu[i], fr[i]);
            }
        }
    }
}
