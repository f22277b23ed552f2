//! Prompt rendering from versioned section templates, ablation variants, and
//! the reference extractor that reads stays back out of a rendered prompt.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mobility::{format_clock, parse_clock, DayOfWeek, PlaceId, PredictionSample, Stay, TargetSlot};

pub const DEFAULT_TEMPLATE: &str = "main_v1";

const BUILTIN_TEMPLATES: &[(&str, &str)] = &[
    ("main_v1", include_str!("../templates/main_v1.txt")),
    ("paraphrase_v1", include_str!("../templates/paraphrase_v1.txt")),
];

pub const HISTORY_MARKER: &str = "<history>: ";
pub const CONTEXT_MARKER: &str = "<context>: ";
pub const TARGET_MARKER: &str = "<target_stay>: ";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {0:?} not found")]
    TemplateMissing(String),
    #[error("template {template:?} is malformed: {detail}")]
    MalformedTemplate { template: String, detail: String },
    #[error("section {section} references {{{placeholder}}}, which this configuration does not provide")]
    PlaceholderUnfilled { section: Section, placeholder: String },
    #[error("invalid prompt configuration: {0}")]
    InvalidConfig(String),
}

/// Template sections in render order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Section {
    Task,
    DescribeHistory,
    DescribeContext,
    DescribeStays,
    DescribeTarget,
    DataHistory,
    DataContext,
    DataTarget,
    GuidanceIntro,
    GuidanceHistory,
    GuidanceContext,
    GuidanceTime,
    OutputCount,
    OutputReason,
    OutputFormat,
}

impl Section {
    pub const ALL: [Section; 15] = [
        Section::Task,
        Section::DescribeHistory,
        Section::DescribeContext,
        Section::DescribeStays,
        Section::DescribeTarget,
        Section::DataHistory,
        Section::DataContext,
        Section::DataTarget,
        Section::GuidanceIntro,
        Section::GuidanceHistory,
        Section::GuidanceContext,
        Section::GuidanceTime,
        Section::OutputCount,
        Section::OutputReason,
        Section::OutputFormat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Section::Task => "task",
            Section::DescribeHistory => "describe_history",
            Section::DescribeContext => "describe_context",
            Section::DescribeStays => "describe_stays",
            Section::DescribeTarget => "describe_target",
            Section::DataHistory => "data_history",
            Section::DataContext => "data_context",
            Section::DataTarget => "data_target",
            Section::GuidanceIntro => "guidance_intro",
            Section::GuidanceHistory => "guidance_history",
            Section::GuidanceContext => "guidance_context",
            Section::GuidanceTime => "guidance_time",
            Section::OutputCount => "output_count",
            Section::OutputReason => "output_reason",
            Section::OutputFormat => "output_format",
        }
    }

    fn included(self, cfg: &PromptConfig) -> bool {
        let guide = cfg.include_guidance;
        match self {
            Section::Task | Section::DescribeStays | Section::OutputCount | Section::OutputFormat => true,
            Section::DescribeHistory | Section::DataHistory => cfg.include_history,
            Section::DescribeContext | Section::DataContext => cfg.include_context,
            Section::DescribeTarget | Section::DataTarget => cfg.time_aware,
            Section::GuidanceIntro => guide,
            Section::GuidanceHistory => guide && cfg.include_history,
            Section::GuidanceContext => guide && cfg.include_context,
            Section::GuidanceTime => guide && cfg.time_aware,
            Section::OutputReason => cfg.ask_reason,
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Section {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Section::ALL
            .iter()
            .copied()
            .find(|sec| sec.name() == s)
            .ok_or_else(|| format!("unknown section {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub k: usize,
    pub time_aware: bool,
    pub include_history: bool,
    pub include_context: bool,
    pub include_guidance: bool,
    pub ask_reason: bool,
    pub template_id: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            k: 10,
            time_aware: true,
            include_history: true,
            include_context: true,
            include_guidance: true,
            ask_reason: true,
            template_id: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.k == 0 {
            return Err(PromptError::InvalidConfig("k must be at least 1".into()));
        }
        if !self.include_history && !self.include_context {
            return Err(PromptError::InvalidConfig(
                "at least one of history and context must be included".into(),
            ));
        }
        Ok(())
    }
}

/// A parsed template: one body per section.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    id: String,
    sections: BTreeMap<Section, String>,
}

impl Template {
    /// Parses `@@ <section>` delimited text. Lines starting with `#` before
    /// the first section are comments.
    pub fn parse(id: &str, source: &str) -> Result<Self, PromptError> {
        let malformed = |detail: String| PromptError::MalformedTemplate {
            template: id.to_string(),
            detail,
        };
        let mut sections = BTreeMap::new();
        let mut current: Option<(Section, Vec<&str>)> = None;
        for line in source.lines() {
            if let Some(name) = line.strip_prefix("@@") {
                if let Some((sec, body)) = current.take() {
                    sections.insert(sec, join_body(&body));
                }
                let sec: Section = name.trim().parse().map_err(malformed)?;
                if sections.contains_key(&sec) {
                    return Err(malformed(format!("section {sec} appears twice")));
                }
                current = Some((sec, Vec::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push(line);
            } else if !(line.trim().is_empty() || line.starts_with('#')) {
                return Err(malformed("text before the first section".into()));
            }
        }
        if let Some((sec, body)) = current {
            sections.insert(sec, join_body(&body));
        }
        let missing: Vec<_> = Section::ALL
            .iter()
            .filter(|s| !sections.contains_key(s))
            .map(|s| s.name())
            .collect();
        if !missing.is_empty() {
            return Err(malformed(format!("missing sections: {}", missing.join(", "))));
        }
        Ok(Self {
            id: id.to_string(),
            sections,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn section(&self, sec: Section) -> &str {
        &self.sections[&sec]
    }
}

fn join_body(lines: &[&str]) -> String {
    lines.join("\n").trim_end().to_string()
}

/// Resolves template ids: `<dir>/<id>.txt` when a directory is configured,
/// then the built-in templates.
#[derive(Debug, Clone, Default)]
pub struct TemplateStore {
    dir: Option<PathBuf>,
}

impl TemplateStore {
    pub fn builtin() -> Self {
        Self { dir: None }
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn builtin_ids() -> Vec<&'static str> {
        BUILTIN_TEMPLATES.iter().map(|(id, _)| *id).collect()
    }

    pub fn load(&self, template_id: &str) -> Result<Template, PromptError> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{template_id}.txt"));
            if path.is_file() {
                let source = std::fs::read_to_string(&path).map_err(|e| PromptError::MalformedTemplate {
                    template: template_id.to_string(),
                    detail: format!("{}: {e}", path.display()),
                })?;
                return Template::parse(template_id, &source);
            }
        }
        BUILTIN_TEMPLATES
            .iter()
            .find(|(id, _)| *id == template_id)
            .map(|(id, src)| Template::parse(id, src))
            .unwrap_or_else(|| Err(PromptError::TemplateMissing(template_id.to_string())))
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub prompt_hash: String,
    pub template_id: String,
    pub k: usize,
}

impl PromptText {
    pub fn new(template_id: &str, text: String, k: usize) -> Self {
        let prompt_hash = prompt_hash(template_id, &text, k);
        Self {
            text,
            prompt_hash,
            template_id: template_id.to_string(),
            k,
        }
    }
}

pub fn prompt_hash(template_id: &str, text: &str, k: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(template_id.as_bytes());
    hasher.update([0]);
    hasher.update(text.as_bytes());
    hasher.update([0]);
    hasher.update(k.to_string().as_bytes());
    hex::encode(hasher.finalize())
}

/// `("17:30", "Tuesday", 35, 1)`
pub fn format_stay(stay: &Stay) -> String {
    format!(
        "(\"{}\", \"{}\", {}, {})",
        format_clock(stay.start_time()),
        stay.day_of_week(),
        stay.duration(),
        stay.place_id()
    )
}

pub fn format_stays(stays: &[Stay]) -> String {
    let items: Vec<String> = stays.iter().map(format_stay).collect();
    format!("[{}]", items.join(", "))
}

/// `(15:13, Friday)`
pub fn format_target(target: &TargetSlot) -> String {
    format!("({}, {})", format_clock(target.start_time()), target.day_of_week())
}

fn prediction_shape(k: usize) -> String {
    if k == 1 {
        "an integer place ID".to_string()
    } else {
        format!("a list of {k} distinct integer place IDs")
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"))
}

fn fill(section: Section, body: &str, values: &BTreeMap<&str, Option<String>>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(body.len());
    let mut last = 0;
    for caps in placeholder_re().captures_iter(body) {
        let whole = caps.get(0).expect("match");
        let name = &caps[1];
        let value = values.get(name).and_then(|v| v.as_deref()).ok_or_else(|| {
            PromptError::PlaceholderUnfilled {
                section,
                placeholder: name.to_string(),
            }
        })?;
        out.push_str(&body[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&body[last..]);
    Ok(out)
}

/// Renders each included section in order.
pub fn render_sections(
    sample: &PredictionSample,
    cfg: &PromptConfig,
    template: &Template,
) -> Result<Vec<(Section, String)>, PromptError> {
    cfg.validate()?;
    let values: BTreeMap<&str, Option<String>> = BTreeMap::from([
        ("history", cfg.include_history.then(|| format_stays(&sample.history))),
        ("context", cfg.include_context.then(|| format_stays(&sample.context))),
        ("target_time", cfg.time_aware.then(|| format_target(&sample.target))),
        ("k", Some(cfg.k.to_string())),
        ("prediction_shape", Some(prediction_shape(cfg.k))),
    ]);
    Section::ALL
        .iter()
        .filter(|s| s.included(cfg))
        .map(|&s| fill(s, template.section(s), &values).map(|text| (s, text)))
        .collect()
}

pub fn render_with(sample: &PredictionSample, cfg: &PromptConfig, template: &Template) -> Result<PromptText, PromptError> {
    let sections = render_sections(sample, cfg, template)?;
    let text = sections
        .into_iter()
        .map(|(_, body)| body)
        .collect::<Vec<_>>()
        .join("\n");
    Ok(PromptText::new(template.id(), text, cfg.k))
}

pub fn render_prompt(sample: &PredictionSample, cfg: &PromptConfig, store: &TemplateStore) -> Result<PromptText, PromptError> {
    let template = store.load(&cfg.template_id)?;
    render_with(sample, cfg, &template)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoHistory,
    NoContext,
    NoTime,
    NoGuide,
    NoReason,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoHistory,
        Variant::NoContext,
        Variant::NoTime,
        Variant::NoGuide,
        Variant::NoReason,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::NoHistory => "NoHistory",
            Variant::NoContext => "NoContext",
            Variant::NoTime => "NoTime",
            Variant::NoGuide => "NoGuide",
            Variant::NoReason => "NoReason",
        }
    }

    /// Sections that disappear when this variant's flag is switched off.
    pub fn removed_sections(self) -> &'static [Section] {
        match self {
            Variant::Full => &[],
            Variant::NoHistory => &[Section::DescribeHistory, Section::DataHistory, Section::GuidanceHistory],
            Variant::NoContext => &[Section::DescribeContext, Section::DataContext, Section::GuidanceContext],
            Variant::NoTime => &[Section::DescribeTarget, Section::DataTarget, Section::GuidanceTime],
            Variant::NoGuide => &[
                Section::GuidanceIntro,
                Section::GuidanceHistory,
                Section::GuidanceContext,
                Section::GuidanceTime,
            ],
            Variant::NoReason => &[Section::OutputReason],
        }
    }

    pub fn apply(self, full: &PromptConfig) -> PromptConfig {
        let mut cfg = full.clone();
        match self {
            Variant::Full => {}
            Variant::NoHistory => cfg.include_history = false,
            Variant::NoContext => cfg.include_context = false,
            Variant::NoTime => cfg.time_aware = false,
            Variant::NoGuide => cfg.include_guidance = false,
            Variant::NoReason => cfg.ask_reason = false,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

/// The full configuration and the five single-flag ablations of it. `k` and
/// the template are taken from `base`; all content flags of Full are on.
pub fn ablation_variants(base: &PromptConfig) -> Vec<(Variant, PromptConfig)> {
    let full = PromptConfig {
        time_aware: true,
        include_history: true,
        include_context: true,
        include_guidance: true,
        ask_reason: true,
        ..base.clone()
    };
    Variant::ALL.iter().map(|&v| (v, v.apply(&full))).collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("prompt contains neither a history nor a context block")]
    NoData,
    #[error("malformed {block} block: {detail}")]
    Malformed { block: &'static str, detail: String },
}

/// Data recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtractedData {
    pub history: Option<Vec<Stay>>,
    pub context: Option<Vec<Stay>>,
    pub target: Option<TargetSlot>,
}

fn stay_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"\("(\d{2}:\d{2})", "([A-Za-z]+)", (\d+), (\d+)\)"#).expect("valid regex"))
}

fn target_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\((\d{2}:\d{2}), ([A-Za-z]+)\)$").expect("valid regex"))
}

fn block_line<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    text.lines().rev().find_map(|l| l.strip_prefix(marker)).map(str::trim_end)
}

fn parse_stay_list(block: &'static str, raw: &str) -> Result<Vec<Stay>, ExtractError> {
    let malformed = |detail: String| ExtractError::Malformed { block, detail };
    let mut stays = Vec::new();
    for caps in stay_re().captures_iter(raw) {
        let start = parse_clock(&caps[1]).map_err(|e| malformed(e.to_string()))?;
        let day: DayOfWeek = caps[2].parse().map_err(|e: crate::mobility::MobilityError| malformed(e.to_string()))?;
        let duration: u32 = caps[3].parse().map_err(|_| malformed(format!("duration {}", &caps[3])))?;
        let place: u64 = caps[4].parse().map_err(|_| malformed(format!("place {}", &caps[4])))?;
        stays.push(Stay::new(start, day, duration, PlaceId(place)).map_err(|e| malformed(e.to_string()))?);
    }
    // Everything in the block must be accounted for by the parsed tuples.
    if format_stays(&stays) != raw {
        return Err(malformed(format!("does not round-trip: {raw:.80}")));
    }
    Ok(stays)
}

/// Recovers the serialized stays and target slot from a rendered prompt.
/// When a block occurs more than once (for example in a repair prompt that
/// repeats the original), the last occurrence wins.
pub fn extract_prompt_data(text: &str) -> Result<ExtractedData, ExtractError> {
    let history = block_line(text, HISTORY_MARKER)
        .map(|raw| parse_stay_list("history", raw))
        .transpose()?;
    let context = block_line(text, CONTEXT_MARKER)
        .map(|raw| parse_stay_list("context", raw))
        .transpose()?;
    let target = block_line(text, TARGET_MARKER)
        .map(|raw| {
            let malformed = |detail: String| ExtractError::Malformed { block: "target", detail };
            let caps = target_re().captures(raw).ok_or_else(|| malformed(raw.to_string()))?;
            let start = parse_clock(&caps[1]).map_err(|e| malformed(e.to_string()))?;
            let day: DayOfWeek = caps[2].parse().map_err(|e: crate::mobility::MobilityError| malformed(e.to_string()))?;
            TargetSlot::new(start, day).map_err(|e| malformed(e.to_string()))
        })
        .transpose()?;
    if history.is_none() && context.is_none() {
        return Err(ExtractError::NoData);
    }
    Ok(ExtractedData { history, context, target })
}
