mod common;

use std::fs;
use std::path::PathBuf;

use nextplace::prompt::{
    ablation_variants, extract_prompt_data, format_stays, render_sections, render_with, PromptConfig, Section,
    TemplateStore, Variant,
};
use nextplace::{DayOfWeek, PlaceId, PredictionSample, Stay, TargetSlot};

fn golden_sample() -> PredictionSample {
    let stay = |t: u16, d: DayOfWeek, dur: u32, p: u64| Stay::new(t, d, dur, PlaceId(p)).unwrap();
    use DayOfWeek::*;
    PredictionSample {
        sample_id: "u7#000012".into(),
        user_id: "u7".into(),
        target_index: 12,
        history: vec![
            stay(450, Monday, 540, 1),
            stay(1050, Monday, 35, 7),
            stay(1140, Monday, 720, 0),
            stay(465, Tuesday, 525, 1),
            stay(1110, Tuesday, 750, 0),
            stay(600, Wednesday, 90, 12),
            stay(780, Wednesday, 300, 1),
        ],
        context: vec![
            stay(1125, Wednesday, 735, 0),
            stay(455, Thursday, 530, 1),
            stay(1080, Thursday, 40, 7),
            stay(1170, Thursday, 700, 0),
            stay(470, Friday, 280, 1),
        ],
        target: TargetSlot::new(913, Friday).unwrap(),
        ground_truth: PlaceId(12),
    }
}

fn golden_dir(template: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(template)
}

/// Set UPDATE_GOLDEN=1 to rewrite the snapshots after an intended change.
fn check_golden(template: &str, name: &str, text: &str) {
    let path = golden_dir(template).join(format!("{name}.txt"));
    if std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1") {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, text).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, expected, "snapshot {} differs", path.display());
}

#[test]
fn snapshots_for_every_variant_and_builtin_template() {
    let store = TemplateStore::builtin();
    let sample = golden_sample();
    for template_id in TemplateStore::builtin_ids() {
        let template = store.load(template_id).unwrap();
        let base = PromptConfig {
            template_id: template_id.to_string(),
            ..PromptConfig::default()
        };
        for (variant, cfg) in ablation_variants(&base) {
            let prompt = render_with(&sample, &cfg, &template).unwrap();
            check_golden(template_id, variant.name(), &prompt.text);
        }
        let k1 = PromptConfig { k: 1, ..base.clone() };
        check_golden(template_id, "Full_k1", &render_with(&sample, &k1, &template).unwrap().text);
    }
}

#[test]
fn each_variant_drops_exactly_its_own_block() {
    let store = TemplateStore::builtin();
    let sample = golden_sample();
    let template = store.load("main_v1").unwrap();
    let variants = ablation_variants(&PromptConfig::default());
    let full = render_sections(&sample, &variants[0].1, &template).unwrap();
    assert_eq!(variants[0].0, Variant::Full);
    for (variant, cfg) in &variants[1..] {
        let sections = render_sections(&sample, cfg, &template).unwrap();
        let expected: Vec<(Section, String)> = full
            .iter()
            .filter(|(s, _)| !variant.removed_sections().contains(s))
            .cloned()
            .collect();
        assert_eq!(sections, expected, "{variant}");
        assert!(sections.len() < full.len(), "{variant} removed nothing");
    }
}

#[test]
fn history_block_round_trips_through_extractor() {
    let store = TemplateStore::builtin();
    let sample = golden_sample();
    for template_id in TemplateStore::builtin_ids() {
        let cfg = PromptConfig {
            template_id: template_id.to_string(),
            ..PromptConfig::default()
        };
        let prompt = nextplace::prompt::render_prompt(&sample, &cfg, &store).unwrap();
        let data = extract_prompt_data(&prompt.text).unwrap();
        assert_eq!(data.history.as_deref(), Some(sample.history.as_slice()));
        assert_eq!(data.context.as_deref(), Some(sample.context.as_slice()));
        assert_eq!(data.target, Some(sample.target));
        assert!(prompt.text.contains(&format_stays(&sample.history)));
    }
}
