//! End-to-end stages behind the command-line tool. Every stage reads and
//! writes plain files so runs can be resumed or inspected step by step.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{crop_patch, require_two_classes, synth_case, Case, Label, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::explain::{default_layers, render_overlay, siamese_local_cam, OverlaySpec};
use crate::inference::{
    classification_report, encode_cases, roc_auc, roc_curve, Neighbor, Prediction, SupportIndex,
};
use crate::seeds::{splitmix, stream_seed};
use crate::tensor::{write_tensor, TensorDescriptor};
use crate::trainer::{train, Checkpoint, EpochRecord};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GENERATION_FILE: &str = "generation.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const ROC_FILE: &str = "roc.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const PREDICTION_FILE: &str = "prediction.json";
pub const EXPLANATION_FILE: &str = "explanation.json";
/// Synthetic volume size; leaves room around a 16×16×8 patch.
pub const DEFAULT_VOLUME: [usize; 3] = [24, 24, 12];

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Generation {
    seed: u64,
    counts: [usize; 3],
    dims: [usize; 3],
}

/// Balanced synthetic splits under `out`: `cases/<id>/` plus the manifest.
/// Labels alternate within each split, starting benign.
pub fn gen_data(out: &Path, counts: [usize; 3], seed: u64, dims: [usize; 3]) -> Result<Manifest> {
    let data_seed = stream_seed(seed, "data");
    create_dir(&out.join("cases"))?;
    let mut entries = Vec::new();
    let mut serial = 0u64;
    for (split, &n) in SPLITS.iter().zip(&counts) {
        for i in 0..n {
            let label = if i % 2 == 0 { Label::Benign } else { Label::Malignant };
            let mut case = synth_case(label, dims, splitmix(data_seed ^ serial));
            case.id = format!("case-{serial:05}");
            serial += 1;
            let rel = format!("cases/{}", case.id);
            case.save(&out.join(&rel))?;
            entries.push(ManifestEntry {
                dir: rel,
                split: split.to_string(),
            });
        }
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    write_json(&out.join(GENERATION_FILE), &Generation { seed, counts, dims })?;
    Ok(manifest)
}

/// Accepts either a manifest file or the directory holding `manifest.json`.
pub fn load_manifest(data: &Path) -> Result<Manifest> {
    if data.is_dir() {
        Manifest::load(&data.join(MANIFEST_FILE))
    } else {
        Manifest::load(data)
    }
}

fn load_split_with_dirs(manifest: &Manifest, split: &str) -> Result<Vec<(Case, PathBuf)>> {
    let dirs = manifest.split_dirs(split);
    let cases = manifest.load_split(split)?;
    Ok(cases.into_iter().zip(dirs).collect())
}

/// Trains on the manifest's train/val splits and writes the resolved
/// config, a JSON-lines epoch log and the best checkpoint under `out`.
/// On divergence the last good checkpoint is still written.
pub fn train_stage(config: &RunConfig, data: &Path, out: &Path) -> Result<Checkpoint> {
    config.validate()?;
    let manifest = load_manifest(data)?;
    let train_cases = manifest.load_split("train")?;
    let val_cases = manifest.load_split("val")?;
    create_dir(out)?;
    config.write_resolved(out)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut on_epoch = |r: &EpochRecord| -> Result<()> {
        writeln!(log, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&log_path, e))
    };
    match train(config, &train_cases, &val_cases, &mut on_epoch) {
        Ok(ck) => {
            ck.save(&out.join(CHECKPOINT_DIR))?;
            Ok(ck)
        }
        Err(Error::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            last_good.save(&out.join(CHECKPOINT_DIR))?;
            Err(Error::Diverged {
                epoch,
                reason,
                last_good,
            })
        }
        Err(e) => Err(e),
    }
}

/// Accepts a checkpoint directory or a training output directory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if path.join(CHECKPOINT_DIR).is_dir() {
        Checkpoint::load(&path.join(CHECKPOINT_DIR))
    } else {
        Checkpoint::load(path)
    }
}

/// Support index over train ∪ val with the configured default `k`.
pub fn build_index_stage(ck: &Checkpoint, manifest: &Manifest) -> Result<SupportIndex> {
    let mut support = load_split_with_dirs(manifest, "train")?;
    support.extend(load_split_with_dirs(manifest, "val")?);
    let cases: Vec<Case> = support.iter().map(|(c, _)| c.clone()).collect();
    require_two_classes(&cases, "support set")?;
    let mut entries = encode_cases(&ck.model, &cases)?;
    for (e, (_, dir)) in entries.iter_mut().zip(&support) {
        e.source = Some(fs::canonicalize(dir).map_err(|err| Error::io(dir, err))?);
    }
    let k = ck.config.inference.default_k.min(odd_floor(entries.len()));
    SupportIndex::from_entries(entries, ck.head.clone(), k)
}

fn odd_floor(n: usize) -> usize {
    if n.is_multiple_of(2) {
        n.saturating_sub(1)
    } else {
        n
    }
}

/// Picks `k` on the val split from the checkpoint's grid.
pub fn tune_k_stage(index: SupportIndex, ck: &Checkpoint, manifest: &Manifest) -> Result<SupportIndex> {
    let val = manifest.load_split("val")?;
    let codes = encode_cases(&ck.model, &val)?;
    let k = index.tune_k(&codes, &ck.config.inference.k_grid)?;
    log::info!("tuned k = {k}");
    index.with_k(k)
}

pub fn calibrate_stage(index: SupportIndex) -> Result<SupportIndex> {
    let tau = index.calibrate_threshold()?;
    log::info!("confidence threshold tau = {tau}");
    index.with_tau(tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub query_id: String,
    pub label: Label,
    pub score: f64,
    pub confident: bool,
    pub d_min: f64,
    pub tau: f64,
    pub neighbors: Vec<Neighbor>,
}

impl PredictionReport {
    fn new(query_id: &str, p: Prediction, tau: f64) -> Self {
        PredictionReport {
            query_id: query_id.to_string(),
            label: p.label,
            score: p.score,
            confident: p.confident,
            d_min: p.d_min,
            tau,
            neighbors: p.neighbors,
        }
    }
}

pub fn predict_case(index: &SupportIndex, ck: &Checkpoint, case: &Case) -> Result<PredictionReport> {
    let tau = index
        .tau()
        .ok_or_else(|| Error::Usage("index is not calibrated; run calibrate first".into()))?;
    let (patch, _) = crop_patch(case, ck.config.unet.patch_shape)?;
    let p = index.predict(&ck.model, &patch)?;
    Ok(PredictionReport::new(&case.id, p, tau))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    /// 0 for the query panel, neighbour rank (1-based) otherwise.
    pub rank: usize,
    pub case_id: String,
    pub image: String,
    pub slice: usize,
    pub distance: f64,
    pub attention: TensorDescriptor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub query_id: String,
    pub threshold: f64,
    pub panels: Vec<PanelRecord>,
    /// Query attention against each neighbour, by rank.
    pub query_attention: Vec<TensorDescriptor>,
}

/// Writes `query.png` (attention from the nearest pair) and one
/// `support_<rank>.png` per neighbour, plus the raw attention volumes.
pub fn explain_prediction(
    report: &PredictionReport,
    index: &SupportIndex,
    ck: &Checkpoint,
    query: &Case,
    out: &Path,
) -> Result<ExplanationReport> {
    create_dir(out)?;
    let spec = OverlaySpec::default();
    let patch_shape = ck.config.unet.patch_shape;
    let (q_patch, _) = crop_patch(query, patch_shape)?;
    let layers = default_layers(&ck.model);
    let mut panels = Vec::new();
    let mut query_attention = Vec::new();
    for (i, nb) in report.neighbors.iter().enumerate() {
        let rank = i + 1;
        let entry = index
            .entries()
            .iter()
            .find(|e| e.id == nb.id)
            .ok_or_else(|| Error::Format(format!("neighbour {} missing from index", nb.id)))?;
        let dir = entry.source.as_ref().ok_or_else(|| {
            Error::Usage(format!("index has no case directory for {}; rebuild it to explain", nb.id))
        })?;
        let support = Case::load(dir)?;
        let (s_patch, _) = crop_patch(&support, patch_shape)?;
        let cam = siamese_local_cam(&ck.model, index.head(), &q_patch, &s_patch, &layers)?;
        let qdesc = write_tensor(out, &format!("query_attention_{rank}"), &cam.query.values)?;
        if rank == 1 {
            let slice = render_overlay(&q_patch, &cam.query.values, &spec, &out.join("query.png"))?;
            panels.push(PanelRecord {
                rank: 0,
                case_id: query.id.clone(),
                image: "query.png".into(),
                slice,
                distance: 0.0,
                attention: qdesc.clone(),
            });
        }
        query_attention.push(qdesc);
        let image = format!("support_{rank}.png");
        let slice = render_overlay(&s_patch, &cam.support.values, &spec, &out.join(&image))?;
        panels.push(PanelRecord {
            rank,
            case_id: nb.id.clone(),
            image,
            slice,
            distance: nb.distance,
            attention: write_tensor(out, &format!("support_attention_{rank}"), &cam.support.values)?,
        });
    }
    let ex = ExplanationReport {
        query_id: query.id.clone(),
        threshold: spec.threshold,
        panels,
        query_attention,
    };
    write_json(&out.join(EXPLANATION_FILE), &ex)?;
    Ok(ex)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: String,
    pub n_cases: usize,
    pub k: usize,
    pub tau: f64,
    pub auc: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub confident_fraction: f64,
}

/// Metrics over a labeled split; writes `metrics.json`, `roc.csv` and
/// per-case `predictions.jsonl` under `out`.
pub fn evaluate_stage(
    index: &SupportIndex,
    ck: &Checkpoint,
    manifest: &Manifest,
    split: &str,
    out: &Path,
) -> Result<EvaluationReport> {
    let cases = manifest.load_split(split)?;
    require_two_classes(&cases, &format!("split {split}"))?;
    let tau = index
        .tau()
        .ok_or_else(|| Error::Usage("index is not calibrated; run calibrate first".into()))?;
    let reports = cases
        .iter()
        .map(|c| predict_case(index, ck, c))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Label> = cases.iter().map(|c| c.label).collect();
    let scores: Vec<f64> = reports.iter().map(|r| r.score).collect();
    let predicted: Vec<Label> = reports.iter().map(|r| r.label).collect();
    let cls = classification_report(&predicted, &labels)?;
    let report = EvaluationReport {
        split: split.to_string(),
        n_cases: cases.len(),
        k: index.k(),
        tau,
        auc: roc_auc(&scores, &labels)?,
        accuracy: cls.accuracy,
        recall: cls.recall,
        precision: cls.precision,
        f1: cls.f1,
        confident_fraction: reports.iter().filter(|r| r.confident).count() as f64 / reports.len() as f64,
    };
    create_dir(out)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    let mut csv = String::from("fpr,tpr,threshold\n");
    for p in roc_curve(&scores, &labels)? {
        csv.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    let roc_path = out.join(ROC_FILE);
    fs::write(&roc_path, csv).map_err(|e| Error::io(&roc_path, e))?;
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    let pred_path = out.join(PREDICTIONS_FILE);
    fs::write(&pred_path, lines).map_err(|e| Error::io(&pred_path, e))?;
    Ok(report)
}

pub fn write_prediction(report: &PredictionReport, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            create_dir(parent)?;
        }
    }
    write_json(out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_data_is_balanced_disjoint_and_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = gen_data(a.path(), [4, 4, 4], 3, [12, 12, 6]).unwrap();
        gen_data(b.path(), [4, 4, 4], 3, [12, 12, 6]).unwrap();
        assert_eq!(m.entries.len(), 12);
        assert_eq!(fs::read_dir(a.path().join("cases")).unwrap().count(), 12);
        for split in SPLITS {
            let cases = m.load_split(split).unwrap();
            let malignant = cases.iter().filter(|c| c.label == Label::Malignant).count();
            assert_eq!((cases.len(), malignant), (4, 2));
        }
        for e in &m.entries {
            for f in ["meta.json", "image.f32raw", "mask.u8raw"] {
                let (x, y) = (a.path().join(&e.dir).join(f), b.path().join(&e.dir).join(f));
                assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }
}
