//! Desk-scale synthetic light-field face datasets.
//!
//! Subject `s` draws its texture from pattern group `s / k` and its
//! disparity from `disparities[s % k]`, `k = disparities.len()`. With more
//! than one disparity level, subjects in a group share a central view and
//! differ only in how the texture shifts across views.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lightfield::{save_sa_container, synth_lightfield, MultiViewSAArray, SynthDims, SyntheticSceneSpec};
use crate::protocol::{DatasetManifest, Record, Subject, TAGS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetConfig {
    pub subjects: usize,
    /// Variations per session, taken from the head of the canonical tag list.
    pub variations: usize,
    pub sessions: usize,
    pub views_u: usize,
    pub views_v: usize,
    pub width: usize,
    pub height: usize,
    pub disparities: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        SynthDatasetConfig {
            subjects: 4,
            variations: TAGS.len(),
            sessions: 2,
            views_u: 9,
            views_v: 9,
            width: 32,
            height: 32,
            disparities: vec![0.5, 1.0],
            noise_sigma: 6.0,
            seed: 0,
        }
    }
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl SynthDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.variations == 0 || self.sessions == 0 {
            return Err(Error::Config("subjects, variations and sessions must be >= 1".into()));
        }
        if self.variations > TAGS.len() {
            return Err(Error::Config(format!("at most {} variations per session", TAGS.len())));
        }
        if self.disparities.is_empty() {
            return Err(Error::Config("need at least one disparity level".into()));
        }
        Ok(())
    }

    pub fn subject_id(&self, subject: usize) -> String {
        format!("subject{subject:03}")
    }

    pub fn image_id(&self, subject: usize, session: usize, tag: &str) -> String {
        format!("{}_s{session}_{tag}", self.subject_id(subject))
    }

    pub fn scene(&self, subject: usize, session: usize, variation: usize) -> SyntheticSceneSpec {
        let k = self.disparities.len();
        SyntheticSceneSpec {
            subject_seed: mix(self.seed ^ mix((subject as u64) << 32 | (session as u64) << 16 | variation as u64)),
            base_pattern: mix(self.seed.wrapping_add(1) ^ mix((subject / k) as u64)),
            disparity_px_per_view: self.disparities[subject % k],
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn dims(&self) -> SynthDims {
        SynthDims::new(self.views_u, self.views_v, self.width, self.height)
    }

    /// Centered face box covering three quarters of the view.
    pub fn crop(&self) -> [usize; 4] {
        let (w, h) = (self.width * 3 / 4, self.height * 3 / 4);
        [(self.width - w) / 2, (self.height - h) / 2, w.max(1), h.max(1)]
    }

    pub fn render(&self, subject: usize, session: usize, variation: usize) -> Result<MultiViewSAArray> {
        synth_lightfield(
            &self.scene(subject, session, variation),
            &self.dims(),
            self.image_id(subject, session, TAGS[variation]),
        )
    }
}

/// Writes one SA container per (subject, session, variation) under
/// `out/containers/` and a dataset manifest at `out/manifest.json`.
pub fn write_dataset(config: &SynthDatasetConfig, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let mut subjects = Vec::with_capacity(config.subjects);
    for s in 0..config.subjects {
        let mut sessions = BTreeMap::new();
        for session in 1..=config.sessions {
            let mut records = Vec::with_capacity(config.variations);
            for (variation, tag) in TAGS.iter().enumerate().take(config.variations) {
                let image_id = config.image_id(s, session, tag);
                let rel = format!("containers/{image_id}");
                save_sa_container(&config.render(s, session, variation)?, out.join(&rel))?;
                records.push(Record {
                    tag: tag.to_string(),
                    sa_container: Some(rel),
                    embedding_image_id: None,
                    crop: config.crop(),
                });
            }
            sessions.insert(session.to_string(), records);
        }
        subjects.push(Subject {
            id: config.subject_id(s),
            sessions,
        });
    }
    let manifest = DatasetManifest { subjects };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}
