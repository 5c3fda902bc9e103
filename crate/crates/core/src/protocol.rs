//! Dataset manifests, the two evaluation protocols, per-task rank-1 tables
//! and timing reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::classify::{rank_curve, ScoreVector};
use crate::error::{Error, Result};
use crate::lightfield::CropBox;

/// Canonical variation vocabulary, in canonical order.
pub const TAGS: [&str; 20] = [
    "neutral",
    "happy",
    "angry",
    "surprise",
    "eyes-closed",
    "mouth-open",
    "look-up",
    "look-down",
    "right-half-profile",
    "right-profile",
    "left-half-profile",
    "left-profile",
    "high-illum",
    "low-illum",
    "hand-on-eye",
    "hand-on-mouth",
    "glasses",
    "sunglasses",
    "mask",
    "hat",
];

pub fn tag_index(tag: &str) -> Result<usize> {
    TAGS.iter()
        .position(|&t| t == tag)
        .ok_or_else(|| Error::UnknownTag(tag.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskGroup {
    NeutralEmotion,
    Action,
    Pose,
    Illumination,
    Occlusion,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 5] = [
        TaskGroup::NeutralEmotion,
        TaskGroup::Action,
        TaskGroup::Pose,
        TaskGroup::Illumination,
        TaskGroup::Occlusion,
    ];

    pub fn of_tag(tag: &str) -> Result<TaskGroup> {
        Ok(match tag_index(tag)? {
            0..=3 => TaskGroup::NeutralEmotion,
            4..=5 => TaskGroup::Action,
            6..=11 => TaskGroup::Pose,
            12..=13 => TaskGroup::Illumination,
            _ => TaskGroup::Occlusion,
        })
    }

    pub fn title(&self) -> &'static str {
        match self {
            TaskGroup::NeutralEmotion => "Neutral & Emotion",
            TaskGroup::Action => "Action",
            TaskGroup::Pose => "Pose",
            TaskGroup::Illumination => "Illumination",
            TaskGroup::Occlusion => "Occlusion",
        }
    }
}

pub const REPORT_COLUMNS: [&str; 6] = ["Neutral & Emotion", "Action", "Pose", "Illumination", "Occlusion", "Average"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sa_container: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_image_id: Option<String>,
    /// `[left, top, width, height]` on the central view.
    pub crop: [usize; 4],
}

impl Record {
    pub fn crop_box(&self) -> CropBox {
        let [left, top, width, height] = self.crop;
        CropBox { left, top, width, height }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub sessions: BTreeMap<String, Vec<Record>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<Subject>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Checks tag vocabulary, uniqueness of tags per session and of subject ids.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for subject in &self.subjects {
            if !ids.insert(subject.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate subject id {}", subject.id)));
            }
            for (session, records) in &subject.sessions {
                let mut seen = HashSet::new();
                for r in records {
                    tag_index(&r.tag)?;
                    if !seen.insert(r.tag.as_str()) {
                        return Err(Error::Dataset(format!(
                            "subject {} session {session}: duplicate tag {}",
                            subject.id, r.tag
                        )));
                    }
                    if r.sa_container.is_none() && r.embedding_image_id.is_none() {
                        return Err(Error::Dataset(format!(
                            "subject {} session {session} tag {}: no sa_container or embedding_image_id",
                            subject.id, r.tag
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn record(&self, r: &RecordRef) -> Option<&Record> {
        self.subjects
            .get(r.subject)?
            .sessions
            .get(&r.session.to_string())?
            .iter()
            .find(|rec| rec.tag == r.tag)
    }

    fn require(&self, subject: usize, session: u8, tags: &[&str]) -> Result<Vec<RecordRef>> {
        let s = &self.subjects[subject];
        let records = s.sessions.get(&session.to_string()).ok_or_else(|| {
            Error::Dataset(format!("subject {} has no session {session} records", s.id))
        })?;
        tags.iter()
            .map(|&tag| {
                if records.iter().any(|r| r.tag == tag) {
                    Ok(RecordRef {
                        subject,
                        session,
                        tag: tag.to_string(),
                    })
                } else {
                    Err(Error::Dataset(format!(
                        "subject {} session {session} is missing tag {tag}",
                        s.id
                    )))
                }
            })
            .collect()
    }
}

/// A `(subject index, session, tag)` reference into a manifest. The subject
/// index doubles as the class id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordRef {
    pub subject: usize,
    pub session: u8,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<RecordRef>,
    pub validation: Vec<RecordRef>,
    pub test: Vec<RecordRef>,
    pub disjoint: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn part(&self, part: SplitPart) -> &[RecordRef] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }

    fn finish(train: Vec<RecordRef>, validation: Vec<RecordRef>, test: Vec<RecordRef>) -> Split {
        let mut all = HashSet::new();
        let total = train.len() + validation.len() + test.len();
        all.extend(train.iter().chain(&validation).chain(&test));
        Split {
            disjoint: all.len() == total,
            train,
            validation,
            test,
        }
    }
}

/// Train: session-1 neutral. Validation: session-1 right and left half
/// profiles. Test: all of session 2.
pub fn split_protocol1(manifest: &DatasetManifest) -> Result<Split> {
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..manifest.subjects.len() {
        train.extend(manifest.require(s, 1, &["neutral"])?);
        validation.extend(manifest.require(s, 1, &["right-half-profile", "left-half-profile"])?);
        test.extend(manifest.require(s, 2, &TAGS)?);
    }
    Ok(Split::finish(train, validation, test))
}

/// Train: all of session 1. Session 2 alternates over the canonical tag
/// order, even positions to validation and odd positions to test.
pub fn split_protocol2(manifest: &DatasetManifest) -> Result<Split> {
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..manifest.subjects.len() {
        train.extend(manifest.require(s, 1, &TAGS)?);
        for (i, r) in manifest.require(s, 2, &TAGS)?.into_iter().enumerate() {
            if i % 2 == 0 {
                validation.push(r);
            } else {
                test.push(r);
            }
        }
    }
    Ok(Split::finish(train, validation, test))
}

pub fn split_protocol(manifest: &DatasetManifest, protocol: u8) -> Result<Split> {
    match protocol {
        1 => split_protocol1(manifest),
        2 => split_protocol2(manifest),
        other => Err(Error::Config(format!("protocol must be 1 or 2, got {other}"))),
    }
}

/// One scored probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredProbe {
    pub image_id: String,
    pub tag: String,
    pub true_label: usize,
    pub scores: ScoreVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskCell {
    pub correct: usize,
    pub total: usize,
}

impl TaskCell {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<(TaskGroup, TaskCell)>,
    /// Over all probes, not over groups.
    pub average: TaskCell,
    /// Rank-k accuracy for k = 1..=classes.
    pub rank_curve: Vec<f64>,
}

pub fn score_table(probes: &[ScoredProbe]) -> Result<EvalReport> {
    if probes.is_empty() {
        return Err(Error::Empty("score_table"));
    }
    let mut cells: BTreeMap<TaskGroup, TaskCell> =
        TaskGroup::ALL.iter().map(|&g| (g, TaskCell { correct: 0, total: 0 })).collect();
    let mut average = TaskCell { correct: 0, total: 0 };
    for p in probes {
        let group = TaskGroup::of_tag(&p.tag)?;
        let hit = p.scores.rank_of(p.true_label) == 1;
        let cell = cells.get_mut(&group).unwrap();
        cell.total += 1;
        average.total += 1;
        if hit {
            cell.correct += 1;
            average.correct += 1;
        }
    }
    let scores: Vec<ScoreVector> = probes.iter().map(|p| p.scores.clone()).collect();
    let labels: Vec<usize> = probes.iter().map(|p| p.true_label).collect();
    Ok(EvalReport {
        tasks: cells.into_iter().collect(),
        average,
        rank_curve: rank_curve(&scores, &labels)?,
    })
}

fn percent(x: Option<f64>) -> String {
    x.map_or("n/a".to_string(), |a| format!("{:.2}%", 100.0 * a))
}

impl EvalReport {
    pub fn row(&self) -> Vec<Option<f64>> {
        self.tasks
            .iter()
            .map(|(_, c)| c.accuracy())
            .chain(std::iter::once(self.average.accuracy()))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        let cells: Vec<String> = self.row().into_iter().map(|a| a.map_or(String::new(), |v| format!("{v:.6}"))).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
        out
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<String> = self.row().into_iter().map(percent).collect();
        let widths: Vec<usize> = REPORT_COLUMNS.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        let mut out = String::new();
        for (h, w) in REPORT_COLUMNS.iter().zip(&widths) {
            let _ = write!(out, "{h:>w$}  ");
        }
        out = out.trim_end().to_string();
        out.push('\n');
        let mut line = String::new();
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(line, "{c:>w$}  ");
        }
        out.push_str(line.trim_end());
        out.push('\n');
        out
    }

    pub fn rank_curve_csv(&self) -> String {
        let mut out = String::from("k,accuracy\n");
        for (k, a) in self.rank_curve.iter().enumerate() {
            let _ = writeln!(out, "{},{a:.6}", k + 1);
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub spatial: Duration,
    pub angular: Duration,
    pub classification: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.spatial + self.angular + self.classification
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub phase: String,
    pub times: PhaseTimes,
    pub images: usize,
    pub description_elements: usize,
    pub description_bytes: usize,
}

/// Elements of the spatio-angular description: every cell's hidden state.
pub fn description_elements(branch_lengths: &[usize], hidden_dim: usize) -> usize {
    branch_lengths.iter().sum::<usize>() * hidden_dim
}

pub fn timing_report(phase: &str, times: PhaseTimes, images: usize, branch_lengths: &[usize], hidden_dim: usize) -> TimingReport {
    let elements = description_elements(branch_lengths, hidden_dim);
    TimingReport {
        phase: phase.to_string(),
        times,
        images,
        description_elements: elements,
        description_bytes: elements * std::mem::size_of::<f32>(),
    }
}

impl TimingReport {
    pub fn per_image(&self, d: Duration) -> f64 {
        if self.images == 0 {
            0.0
        } else {
            d.as_secs_f64() / self.images as f64
        }
    }

    fn rows(&self) -> Vec<(&'static str, Duration)> {
        vec![
            ("spatial description", self.times.spatial),
            ("angular description", self.times.angular),
            ("classification", self.times.classification),
            ("total", self.times.total()),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,stage,total_s,per_image_s\n");
        for (name, d) in self.rows() {
            let _ = writeln!(out, "{},{name},{:.6},{:.6}", self.phase, d.as_secs_f64(), self.per_image(d));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} timing over {} light-field images\n", self.phase, self.images);
        let _ = writeln!(out, "{:<22}{:>12}{:>14}", "stage", "total (s)", "per image (s)");
        for (name, d) in self.rows() {
            let _ = writeln!(out, "{name:<22}{:>12.3}{:>14.4}", d.as_secs_f64(), self.per_image(d));
        }
        let _ = writeln!(
            out,
            "description size: {} elements, {} bytes",
            self.description_elements, self.description_bytes
        );
        out
    }
}
