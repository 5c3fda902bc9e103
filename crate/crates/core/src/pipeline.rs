//! End-to-end encoding and scoring of manifest records: load, crop and
//! resize, select views, describe, run the angular model, score.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angular::LstmModel;
use crate::classify::{aggregate, combine_branches, Aggregation, ScoreVector};
use crate::angular::stack_descriptions;
use crate::descriptor::{describe_sequence, DescriptorBackend, ViewInput};
use crate::error::{Error, Result};
use crate::lightfield::{crop_and_resize, default_vignette_mask, load_sa_container};
use crate::numerics::Matrix;
use crate::protocol::{score_table, DatasetManifest, EvalReport, PhaseTimes, RecordRef, ScoredProbe};
use crate::selection::{select_views, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub topology: Topology,
    pub target_w: usize,
    pub target_h: usize,
    /// Grid assumed for records that carry only embedding ids.
    pub grid_u: usize,
    pub grid_v: usize,
    pub aggregation: Aggregation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            topology: "mid-hv-fuse".parse().unwrap(),
            target_w: 224,
            target_h: 224,
            grid_u: 15,
            grid_v: 15,
            aggregation: Aggregation::Mean,
        }
    }
}

/// Description sequences of one light-field image, one matrix per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRecord {
    pub image_id: String,
    pub tag: String,
    pub label: usize,
    pub branches: Vec<Matrix>,
}

pub fn encode_record(
    manifest: &DatasetManifest,
    base_dir: &Path,
    r: &RecordRef,
    config: &PipelineConfig,
    backend: &DescriptorBackend,
) -> Result<EncodedRecord> {
    let record = manifest.record(r).ok_or_else(|| {
        Error::Dataset(format!("no record for subject {} session {} tag {}", r.subject, r.session, r.tag))
    })?;
    let branches = match (&record.sa_container, backend) {
        (Some(container), _) => {
            let mut array = load_sa_container(base_dir.join(container))?;
            if backend.input_size().is_some() {
                array = crop_and_resize(&array, record.crop_box(), config.target_w, config.target_h)?;
            }
            if let Some(id) = &record.embedding_image_id {
                array.image_id = id.clone();
            }
            let seqs = select_views(&config.topology, array.views_u, array.views_v, array.valid_mask())?;
            let image_id = array.image_id.clone();
            let branches = seqs
                .iter()
                .map(|s| stack_descriptions(&describe_sequence(backend, &array, s)?))
                .collect::<Result<Vec<_>>>()?;
            return Ok(EncodedRecord {
                image_id,
                tag: r.tag.clone(),
                label: r.subject,
                branches,
            });
        }
        (None, DescriptorBackend::EmbeddingFile(_)) => {
            let id = record.embedding_image_id.as_deref().unwrap_or_default();
            let mask = default_vignette_mask(config.grid_u, config.grid_v);
            let seqs = select_views(&config.topology, config.grid_u, config.grid_v, &mask)?;
            let no_pixels = ViewInput { pixels: &[], width: 0, height: 0 };
            seqs.iter()
                .map(|s| {
                    let descriptions = s
                        .positions
                        .iter()
                        .map(|&(u, v)| {
                            backend.describe(no_pixels, id, u, v).map_err(|e| Error::AtPosition {
                                u,
                                v,
                                source: Box::new(e),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    stack_descriptions(&descriptions)
                })
                .collect::<Result<Vec<_>>>()?
        }
        (None, _) => {
            return Err(Error::Dataset(format!(
                "record {} / {}: pixel backends need an sa_container",
                r.subject, r.tag
            )))
        }
    };
    Ok(EncodedRecord {
        image_id: record.embedding_image_id.clone().unwrap_or_default(),
        tag: r.tag.clone(),
        label: r.subject,
        branches,
    })
}

/// Encodes records over the current rayon pool; output order follows `refs`.
pub fn encode_records(
    manifest: &DatasetManifest,
    base_dir: &Path,
    refs: &[RecordRef],
    config: &PipelineConfig,
    backend: &DescriptorBackend,
) -> Result<Vec<EncodedRecord>> {
    refs.par_iter()
        .map(|r| encode_record(manifest, base_dir, r, config, backend))
        .collect()
}

/// Rank-1 table plus the per-probe scores and phase timings.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub probes: Vec<ScoredProbe>,
    pub times: PhaseTimes,
}

/// Scores encoded records. One model serves every branch, or one model per
/// branch for fusion topologies.
pub fn score_records(models: &[&LstmModel], records: &[EncodedRecord], aggregation: Aggregation) -> Result<EvalOutcome> {
    let first = models.first().ok_or(Error::Empty("score_records models"))?;
    let classes = first.class_count();
    if let Some(r) = records.iter().find(|r| r.label >= classes) {
        return Err(Error::shape("score_records", format!("{classes} model classes"), format!("label {}", r.label)));
    }
    let pick = |b: usize| models[if models.len() == 1 { 0 } else { b }];

    let start = Instant::now();
    let hidden: Vec<Vec<Vec<Vec<f64>>>> = records
        .par_iter()
        .map(|r| {
            r.branches
                .iter()
                .enumerate()
                .map(|(b, seq)| pick(b).hidden_states(seq))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let angular = start.elapsed();

    let start = Instant::now();
    let scores: Vec<ScoreVector> = hidden
        .par_iter()
        .map(|branches| {
            let per_branch = branches
                .iter()
                .enumerate()
                .map(|(b, hs)| aggregate(&crate::classify::cell_scores(hs, &pick(b).head)?, aggregation))
                .collect::<Result<Vec<_>>>()?;
            combine_branches(&per_branch)
        })
        .collect::<Result<_>>()?;
    let classification = start.elapsed();

    let probes: Vec<ScoredProbe> = records
        .iter()
        .zip(scores)
        .map(|(r, s)| ScoredProbe {
            image_id: r.image_id.clone(),
            tag: r.tag.clone(),
            true_label: r.label,
            scores: s,
        })
        .collect();
    Ok(EvalOutcome {
        report: score_table(&probes)?,
        probes,
        times: PhaseTimes {
            spatial: Duration::ZERO,
            angular,
            classification,
        },
    })
}

/// Encodes and scores one split part.
pub fn evaluate(
    models: &[&LstmModel],
    manifest: &DatasetManifest,
    base_dir: &Path,
    refs: &[RecordRef],
    config: &PipelineConfig,
    backend: &DescriptorBackend,
) -> Result<EvalOutcome> {
    let start = Instant::now();
    let records = encode_records(manifest, base_dir, refs, config, backend)?;
    let spatial = start.elapsed();
    let mut outcome = score_records(models, &records, config.aggregation)?;
    outcome.times.spatial = spatial;
    Ok(outcome)
}

/// Prediction dump: `image_id,true_label,predicted_label,rank_of_true,top1_score`.
pub fn predictions_csv(probes: &[ScoredProbe], class_ids: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "true_label", "predicted_label", "rank_of_true", "top1_score"])?;
    for p in probes {
        let predicted = p.scores.argmax();
        let name = |i: usize| class_ids.get(i).cloned().unwrap_or_else(|| i.to_string());
        w.write_record([
            p.image_id.clone(),
            name(p.true_label),
            name(predicted),
            p.scores.rank_of(p.true_label).to_string(),
            format!("{:.9}", p.scores.scores[predicted]),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angular::{train, Sample, TrainConfig};
    use crate::descriptor::{EmbeddingIndex, RandomProjection};
    use crate::protocol::split_protocol2;
    use crate::synth::{write_dataset, SynthDatasetConfig};

    fn small_dataset(dir: &Path) -> (DatasetManifest, SynthDatasetConfig) {
        let cfg = SynthDatasetConfig {
            subjects: 3,
            views_u: 5,
            views_v: 5,
            width: 16,
            height: 16,
            disparities: vec![1.0],
            noise_sigma: 4.0,
            ..SynthDatasetConfig::default()
        };
        (write_dataset(&cfg, dir).unwrap(), cfg)
    }

    #[test]
    fn encode_mid_hv_fuse_from_containers() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = small_dataset(dir.path());
        let config = PipelineConfig {
            target_w: 8,
            target_h: 8,
            ..PipelineConfig::default()
        };
        let backend = DescriptorBackend::RandomProjection(RandomProjection::new(8, 8, 6, 1).unwrap());
        let split = split_protocol2(&manifest).unwrap();
        let enc = encode_records(&manifest, dir.path(), &split.test[..4], &config, &backend).unwrap();
        assert_eq!(enc.len(), 4);
        assert_eq!(enc[0].branches.len(), 2);
        assert_eq!(enc[0].branches[0].shape(), (5, 6));
        assert_eq!(enc[0].image_id, "subject000_s2_happy");
        let serial: Vec<EncodedRecord> = split.test[..4]
            .iter()
            .map(|r| encode_record(&manifest, dir.path(), r, &config, &backend).unwrap())
            .collect();
        assert_eq!(serial, enc);
    }

    #[test]
    fn embedding_only_records() {
        let mut index = EmbeddingIndex::new(2);
        for u in 0..3u8 {
            for v in 0..3u8 {
                index.insert("img", u, v, vec![u as f32, v as f32]).unwrap();
            }
        }
        let manifest: DatasetManifest = serde_json::from_str(
            r#"{"subjects":[{"id":"a","sessions":{"1":[{"tag":"neutral","embedding_image_id":"img","crop":[0,0,1,1]}]}}]}"#,
        )
        .unwrap();
        let config = PipelineConfig {
            topology: "low-h".parse().unwrap(),
            grid_u: 3,
            grid_v: 3,
            ..PipelineConfig::default()
        };
        let r = RecordRef { subject: 0, session: 1, tag: "neutral".into() };
        let enc = encode_record(&manifest, Path::new("."), &r, &config, &DescriptorBackend::EmbeddingFile(index)).unwrap();
        assert_eq!(enc.branches[0].data(), &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn scoring_and_dump() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = small_dataset(dir.path());
        let config = PipelineConfig {
            topology: "mid-h".parse().unwrap(),
            target_w: 8,
            target_h: 8,
            ..PipelineConfig::default()
        };
        let backend = DescriptorBackend::RandomProjection(RandomProjection::new(8, 8, 6, 1).unwrap());
        let split = split_protocol2(&manifest).unwrap();
        let train_set = encode_records(&manifest, dir.path(), &split.train, &config, &backend).unwrap();
        let samples: Vec<Sample> = train_set
            .iter()
            .map(|r| Sample { sequence: r.branches[0].clone(), label: r.label })
            .collect();
        let tc = TrainConfig { hidden_dim: 6, epochs: 5, ..TrainConfig::default() };
        let model = train(&samples, 3, &tc).unwrap().model;
        let out = evaluate(&[&model], &manifest, dir.path(), &split.test, &config, &backend).unwrap();
        assert_eq!(out.probes.len(), 30);
        assert_eq!(out.report.average.total, 30);
        let csv = predictions_csv(&out.probes, &manifest.class_ids()).unwrap();
        assert_eq!(csv.lines().count(), 31);
        assert!(csv.starts_with("image_id,true_label,predicted_label,rank_of_true,top1_score\n"));
    }
}
