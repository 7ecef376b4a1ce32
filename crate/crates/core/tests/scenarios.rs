use std::collections::HashMap;

use raredrive::features::{build_feature_matrix, FeatureOptions};
use raredrive::proxy::{apply_rules, default_ruleset};
use raredrive::synth::{generate_measurements, InjectionKind, InjectionSpec, ScenarioConfig};

fn only(kind: InjectionKind, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_measurements: 4,
        duration_seconds: 603.0,
        injections: vec![InjectionSpec { kind, rate: 0.5 }],
        seed,
        ..ScenarioConfig::default()
    }
}

#[test]
fn every_injection_is_flagged_by_its_rule_family() {
    let rules = default_ruleset();
    let family: HashMap<&str, &str> =
        rules.rules.iter().map(|r| (r.name.as_str(), r.family.as_deref().unwrap_or_default())).collect();
    for kind in InjectionKind::ALL {
        let (measurements, injections) = generate_measurements(&only(kind, 9)).unwrap();
        assert!(injections.len() >= 5, "{kind}: only {} injections", injections.len());
        let matrix = build_feature_matrix(&measurements, &FeatureOptions::default()).unwrap();
        let labels = apply_rules(&rules, &matrix).unwrap();
        for inj in &injections {
            let hit = labels.entries.iter().zip(&matrix.raw).any(|(entry, raw)| {
                raw.window_ref.measurement_id == inj.measurement_id
                    && inj.overlaps(raw.window_ref.start_time, raw.end_time)
                    && entry.matched_rules.iter().any(|r| family[r.as_str()] == kind.family())
            });
            assert!(hit, "{kind} at {}@{} not flagged by `{}`", inj.measurement_id, inj.start_time, kind.family());
        }
    }
}

#[test]
fn baseline_without_injections_is_rarely_flagged() {
    let config = ScenarioConfig { n_measurements: 4, seed: 2, ..ScenarioConfig::default() }.without_injections();
    let (measurements, injections) = generate_measurements(&config).unwrap();
    assert!(injections.is_empty());
    let matrix = build_feature_matrix(&measurements, &FeatureOptions::default()).unwrap();
    let labels = apply_rules(&default_ruleset(), &matrix).unwrap();
    assert!(labels.prevalence() < 0.03, "baseline prevalence {}", labels.prevalence());
}
