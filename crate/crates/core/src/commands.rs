//! The four top-level commands behind the `lfface` binary. Each writes its
//! artifacts under the configured output directory and records its
//! effective parameters in `run.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::angular::{train, LstmModel, Sample, TrainConfig};
use crate::config::RunConfig;
use crate::descriptor::DescriptorBackend;
use crate::error::{Error, Result};
use crate::pipeline::{encode_records, predictions_csv, score_records, EncodedRecord, EvalOutcome};
use crate::protocol::{split_protocol, timing_report, DatasetManifest, Split, TimingReport};
use crate::selection::Topology;
use crate::synth::{write_dataset, SynthDatasetConfig};

pub const RUN_FILE: &str = "run.json";
pub const CLASSES_FILE: &str = "classes.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

const BRANCH_SUFFIXES: [&str; 2] = ["h", "v"];

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Merges `entry` under `command` in `dir/run.json`, keeping other commands' entries.
pub fn record_run(dir: &Path, command: &str, entry: Value) -> Result<()> {
    let path = dir.join(RUN_FILE);
    let mut root = match fs::read_to_string(&path) {
        Ok(text) => match serde_json::from_str::<Value>(&text)? {
            Value::Object(map) => map,
            _ => Map::new(),
        },
        Err(_) => Map::new(),
    };
    root.insert(command.to_string(), entry);
    write(&path, serde_json::to_string_pretty(&Value::Object(root))? + "\n")
}

fn config_json(run: &RunConfig) -> Value {
    Value::Object(run.entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect())
}

/// Runs `f` on a rayon pool of the configured size.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Model file names for a topology: one per branch, unless shared or single.
pub fn model_files(topology: &Topology, shared: bool) -> Vec<String> {
    if topology.branch_count() == 1 || shared {
        vec!["model.lflm".into()]
    } else {
        BRANCH_SUFFIXES[..topology.branch_count()]
            .iter()
            .map(|s| format!("model_{s}.lflm"))
            .collect()
    }
}

/// A loaded manifest with its split and the backend it is described with.
struct Dataset {
    manifest: DatasetManifest,
    base_dir: PathBuf,
    split: Split,
    backend: DescriptorBackend,
}

impl Dataset {
    fn open(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let path = run.manifest_path()?;
        let manifest = DatasetManifest::load(path)?;
        let split = split_protocol(&manifest, run.protocol)?;
        let backend = run.backend.build(run.target, run.target)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Dataset { manifest, base_dir, split, backend })
    }

    fn classes(&self) -> usize {
        self.manifest.subjects.len()
    }

    fn encode(&self, refs: &[crate::protocol::RecordRef], run: &RunConfig, topology: Topology) -> Result<Vec<EncodedRecord>> {
        let pipeline = crate::pipeline::PipelineConfig { topology, ..run.pipeline() };
        encode_records(&self.manifest, &self.base_dir, refs, &pipeline, &self.backend)
    }
}

/// Trained models, one per entry of [`model_files`], with their loss curves.
pub struct Fitted {
    pub models: Vec<LstmModel>,
    pub losses: Vec<Vec<f64>>,
}

/// Trains the angular models of a topology on encoded records. Independent
/// branch models use seeds `seed`, `seed + 1`; a shared model sees every
/// branch sequence as its own sample.
pub fn fit(records: &[EncodedRecord], classes: usize, topology: &Topology, shared: bool, config: &TrainConfig) -> Result<Fitted> {
    let branches = topology.branch_count();
    let samples_of = |b: usize| -> Vec<Sample> {
        records
            .iter()
            .map(|r| Sample { sequence: r.branches[b].clone(), label: r.label })
            .collect()
    };
    let mut fitted = Fitted { models: Vec::new(), losses: Vec::new() };
    if branches == 1 || shared {
        let samples: Vec<Sample> = (0..branches).flat_map(samples_of).collect();
        let out = train(&samples, classes, config)?;
        fitted.models.push(out.model);
        fitted.losses.push(out.epoch_losses);
    } else {
        for b in 0..branches {
            let cfg = TrainConfig { seed: config.seed.wrapping_add(b as u64), ..config.clone() };
            let out = train(&samples_of(b), classes, &cfg)?;
            fitted.models.push(out.model);
            fitted.losses.push(out.epoch_losses);
        }
    }
    Ok(fitted)
}

fn loss_csv(files: &[String], losses: &[Vec<f64>]) -> String {
    let mut out = String::from("epoch");
    for f in files {
        out.push_str(&format!(",loss_{}", f.trim_end_matches(".lflm")));
    }
    out.push('\n');
    for epoch in 0..losses.first().map_or(0, Vec::len) {
        out.push_str(&(epoch + 1).to_string());
        for l in losses {
            out.push_str(&format!(",{:.12e}", l[epoch]));
        }
        out.push('\n');
    }
    out
}

/// Generates a synthetic dataset under `out` and returns its manifest.
pub fn cmd_synth(config: &SynthDatasetConfig, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    create_dir(out)?;
    let manifest = write_dataset(config, out)?;
    record_run(out, "synth", serde_json::to_value(config)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub model_paths: Vec<PathBuf>,
    pub final_losses: Vec<f64>,
    pub train_images: usize,
}

/// Trains on the protocol's training part and writes the model file(s),
/// `loss.csv`, `classes.txt` and a `run.json` echo.
pub fn cmd_train(run: &RunConfig) -> Result<TrainSummary> {
    with_workers(run.workers, || {
        let data = Dataset::open(run)?;
        let records = data.encode(&data.split.train, run, run.topology)?;
        let fitted = fit(&records, data.classes(), &run.topology, run.share_branch_weights, &run.train_config())?;

        create_dir(&run.out)?;
        let files = model_files(&run.topology, run.share_branch_weights);
        let mut model_paths = Vec::new();
        for (model, file) in fitted.models.iter().zip(&files) {
            let path = run.out.join(file);
            model.save(&path)?;
            model_paths.push(path);
        }
        write(&run.out.join(LOSS_FILE), loss_csv(&files, &fitted.losses))?;
        write(&run.out.join(CLASSES_FILE), data.manifest.class_ids().join("\n") + "\n")?;
        write(&run.out.join("config.txt"), run.to_text())?;
        let final_losses: Vec<f64> = fitted.losses.iter().filter_map(|l| l.last().copied()).collect();
        record_run(
            &run.out,
            "train",
            json!({
                "config": config_json(run),
                "models": files,
                "train_images": records.len(),
                "final_loss": final_losses,
            }),
        )?;
        Ok(TrainSummary { model_paths, final_losses, train_images: records.len() })
    })
}

pub fn load_models(run: &RunConfig) -> Result<Vec<LstmModel>> {
    model_files(&run.topology, run.share_branch_weights)
        .iter()
        .map(|f| LstmModel::load(run.models_dir().join(f)))
        .collect()
}

fn check_models(models: &[LstmModel], data: &Dataset, models_dir: &Path) -> Result<()> {
    let classes = data.classes();
    for m in models {
        if m.class_count() != classes {
            return Err(Error::Dataset(format!(
                "model has {} classes, manifest has {classes} subjects",
                m.class_count()
            )));
        }
        if m.input_dim() != data.backend.dim() {
            return Err(Error::Dataset(format!(
                "model expects {}-dim descriptions, backend produces {}",
                m.input_dim(),
                data.backend.dim()
            )));
        }
    }
    if let Ok(text) = fs::read_to_string(models_dir.join(CLASSES_FILE)) {
        let trained: Vec<&str> = text.lines().collect();
        let ids = data.manifest.class_ids();
        if trained != ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Dataset("model classes differ from the manifest subjects".into()));
        }
    }
    Ok(())
}

/// Evaluation artifacts returned by [`cmd_eval`].
pub struct EvalSummary {
    pub outcome: EvalOutcome,
    pub timing: TimingReport,
}

/// Scores the configured split part and writes `report.csv`, `report.txt`,
/// `rank_curve.csv`, `predictions.csv`, `timing.csv` and `timing.txt`.
pub fn cmd_eval(run: &RunConfig) -> Result<EvalSummary> {
    with_workers(run.workers, || {
        let data = Dataset::open(run)?;
        let models = load_models(run)?;
        check_models(&models, &data, run.models_dir())?;
        let refs = data.split.part(run.eval_part);

        let start = std::time::Instant::now();
        let records = data.encode(refs, run, run.topology)?;
        let spatial = start.elapsed();
        let model_refs: Vec<&LstmModel> = models.iter().collect();
        let mut outcome = score_records(&model_refs, &records, run.aggregation)?;
        outcome.times.spatial = spatial;

        let lengths: Vec<usize> = records.first().map_or_else(Vec::new, |r| r.branches.iter().map(|b| b.rows()).collect());
        let timing = timing_report("eval", outcome.times.clone(), records.len(), &lengths, models[0].hidden_dim());

        create_dir(&run.out)?;
        write(&run.out.join("report.csv"), outcome.report.to_csv())?;
        write(&run.out.join("report.txt"), outcome.report.to_text())?;
        write(&run.out.join("rank_curve.csv"), outcome.report.rank_curve_csv())?;
        write(&run.out.join("predictions.csv"), predictions_csv(&outcome.probes, &data.manifest.class_ids())?)?;
        write(&run.out.join("timing.csv"), timing.to_csv())?;
        write(&run.out.join("timing.txt"), timing.to_text())?;
        record_run(
            &run.out,
            "eval",
            json!({
                "config": config_json(run),
                "images": records.len(),
                "average_rank1": outcome.report.average.accuracy(),
            }),
        )?;
        Ok(EvalSummary { outcome, timing })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub topology: Topology,
    pub hidden: usize,
    pub batches: usize,
    pub epochs: usize,
    /// Validation rank-1, or the error that stopped this point.
    pub result: std::result::Result<f64, String>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("topology,hidden,batches,epochs,val_rank1,error\n");
    for r in rows {
        let (acc, err) = match &r.result {
            Ok(a) => (format!("{a:.6}"), String::new()),
            Err(e) => (String::new(), e.replace([',', '\n'], ";")),
        };
        out.push_str(&format!("{},{},{},{},{acc},{err}\n", r.topology, r.hidden, r.batches, r.epochs));
    }
    out
}

/// Trains one model set per grid point and scores the validation part.
/// Points run one after another; a failing point is recorded and skipped.
pub fn cmd_sweep(run: &RunConfig) -> Result<Vec<SweepRow>> {
    with_workers(run.workers, || {
        let data = Dataset::open(run)?;
        if data.split.validation.is_empty() {
            return Err(Error::Dataset("sweep needs a nonempty validation part".into()));
        }
        let or = |list: &[usize], one: usize| if list.is_empty() { vec![one] } else { list.to_vec() };
        let topologies = if run.sweep_topologies.is_empty() { vec![run.topology] } else { run.sweep_topologies.clone() };
        let mut rows = Vec::new();
        for topology in topologies {
            let train_set = data.encode(&data.split.train, run, topology)?;
            let val_set = data.encode(&data.split.validation, run, topology)?;
            for &hidden in &run.sweep_hidden {
                for &batches in &or(&run.sweep_batches, run.batches) {
                    for &epochs in &or(&run.sweep_epochs, run.epochs) {
                        let cfg = TrainConfig { hidden_dim: hidden, num_batches: batches, epochs, ..run.train_config() };
                        let result = fit(&train_set, data.classes(), &topology, run.share_branch_weights, &cfg)
                            .and_then(|f| {
                                let refs: Vec<&LstmModel> = f.models.iter().collect();
                                score_records(&refs, &val_set, run.aggregation)
                            })
                            .map(|o| o.report.average.accuracy().unwrap_or(0.0))
                            .map_err(|e| e.to_string());
                        rows.push(SweepRow { topology, hidden, batches, epochs, result });
                    }
                }
            }
        }
        create_dir(&run.out)?;
        write(&run.out.join(SWEEP_FILE), sweep_csv(&rows))?;
        record_run(&run.out, "sweep", json!({ "config": config_json(run), "points": rows.len() }))?;
        Ok(rows)
    })
}
