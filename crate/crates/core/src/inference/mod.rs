//! Case-based classification: a support index of latent codes, exact k-NN
//! under AlignDist, majority voting, k tuning, confidence calibration and
//! evaluation metrics.

mod metrics;

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use metrics::{classification_report, f1_score, roc_auc, roc_curve, ClassificationReport, RocPoint};

use crate::data::{crop_patch, require_two_classes, Case, Label};
use crate::error::{Error, Result};
use crate::model::{align_distance_raw, AlignDistHead, LatentCode, UNetModel};
use crate::tensor::{read_tensor, write_tensor, Tensor, TensorDescriptor};

pub const INDEX_FORMAT_VERSION: u32 = 1;
pub const INDEX_MANIFEST: &str = "index.json";
pub const DEFAULT_K_GRID: [usize; 8] = [1, 3, 5, 7, 9, 11, 13, 15];
const WEIGHT_EPS: f64 = 1e-8;
const CONFIDENCE_QUANTILE: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct SupportEntry {
    pub id: String,
    pub label: Label,
    pub code: LatentCode,
    /// Case directory the code came from, when known.
    pub source: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub label: Label,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub score: f64,
    pub neighbors: Vec<Neighbor>,
    pub confident: bool,
    pub d_min: f64,
}

/// Centre-crop codes with augmentation off.
pub fn encode_cases(model: &UNetModel, cases: &[Case]) -> Result<Vec<SupportEntry>> {
    cases
        .iter()
        .map(|c| {
            let (patch, _) = crop_patch(c, model.config.patch_shape)?;
            Ok(SupportEntry {
                id: c.id.clone(),
                label: c.label,
                code: model.encode(&patch)?,
                source: None,
            })
        })
        .collect()
}

/// Majority label (ties go benign, which odd `k` never produces) and the
/// inverse-distance-weighted malignant fraction.
pub fn vote(neighbors: &[Neighbor]) -> (Label, f64) {
    let malignant = neighbors.iter().filter(|n| n.label == Label::Malignant).count();
    let label = if 2 * malignant > neighbors.len() {
        Label::Malignant
    } else {
        Label::Benign
    };
    let (mut num, mut den) = (0.0, 0.0);
    for n in neighbors {
        let w = 1.0 / (n.distance + WEIGHT_EPS);
        den += w;
        if n.label == Label::Malignant {
            num += w;
        }
    }
    let score = if den > 0.0 { num / den } else { 0.0 };
    (label, score)
}

/// Nearest-rank percentile: the `⌈q·n⌉`-th smallest value.
pub fn nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Parameter("nearest_rank of an empty collection".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Parameter(format!("quantile must be in (0,1], got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

/// Labeled support codes plus the alignment head, neighbour count and
/// confidence threshold used to query them. Read-only once built.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportIndex {
    entries: Vec<SupportEntry>,
    head: AlignDistHead,
    k: usize,
    tau: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexManifest {
    format_version: u32,
    k: usize,
    tau: Option<f64>,
    entries: Vec<EntryMeta>,
    codes: TensorDescriptor,
    align_a: TensorDescriptor,
    align_b: TensorDescriptor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryMeta {
    id: String,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<PathBuf>,
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Parameter(format!("k must be odd and positive, got {k}")));
    }
    Ok(())
}

impl SupportIndex {
    pub fn from_entries(entries: Vec<SupportEntry>, head: AlignDistHead, k: usize) -> Result<Self> {
        let malignant = entries.iter().filter(|e| e.label == Label::Malignant).count();
        if malignant == 0 || malignant == entries.len() {
            return Err(Error::Data("support set must contain both benign and malignant cases".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for e in &entries {
            if e.code.len() != head.len() {
                return Err(Error::Dimension(format!(
                    "support code {} has length {}, AlignDist has {}",
                    e.id,
                    e.code.len(),
                    head.len()
                )));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate support id {}", e.id)));
            }
        }
        check_k(k)?;
        if k > entries.len() {
            return Err(Error::Parameter(format!("k = {k} exceeds support size {}", entries.len())));
        }
        Ok(SupportIndex {
            entries,
            head,
            k,
            tau: None,
        })
    }

    pub fn build(model: &UNetModel, head: &AlignDistHead, support: &[Case], k: usize) -> Result<Self> {
        require_two_classes(support, "support set")?;
        Self::from_entries(encode_cases(model, support)?, head.clone(), k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SupportEntry] {
        &self.entries
    }

    pub fn head(&self) -> &AlignDistHead {
        &self.head
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn with_k(mut self, k: usize) -> Result<Self> {
        check_k(k)?;
        if k > self.len() {
            return Err(Error::Parameter(format!("k = {k} exceeds support size {}", self.len())));
        }
        self.k = k;
        Ok(self)
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Calibration(format!("threshold must be positive and finite, got {tau}")));
        }
        self.tau = Some(tau);
        Ok(self)
    }

    /// The `k` nearest entries, ascending by distance then id.
    pub fn knn_query(&self, code: &LatentCode, k: usize) -> Result<Vec<Neighbor>> {
        self.knn_excluding(code, k, None)
    }

    /// As [`Self::knn_query`], skipping the entry whose id is `exclude`.
    pub fn knn_excluding(&self, code: &LatentCode, k: usize, exclude: Option<&str>) -> Result<Vec<Neighbor>> {
        if code.len() != self.head.len() {
            return Err(Error::Dimension(format!(
                "query code has length {}, AlignDist has {}",
                code.len(),
                self.head.len()
            )));
        }
        let mut scored: Vec<(f64, &SupportEntry)> = self
            .entries
            .iter()
            .filter(|e| Some(e.id.as_str()) != exclude)
            .map(|e| (align_distance_raw(&self.head.a.data, &code.0, &e.code.0), e))
            .collect();
        if k == 0 || k > scored.len() {
            return Err(Error::Parameter(format!(
                "k = {k} outside 1..={} candidates",
                scored.len()
            )));
        }
        let cmp = |a: &(f64, &SupportEntry), b: &(f64, &SupportEntry)| -> Ordering {
            a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(distance, e)| Neighbor {
                id: e.id.clone(),
                label: e.label,
                distance,
            })
            .collect())
    }

    /// Classifies a code with the index's `k`; needs a calibrated `τ`.
    pub fn predict_code(&self, code: &LatentCode) -> Result<Prediction> {
        let tau = self
            .tau
            .ok_or_else(|| Error::Usage("index has no confidence threshold; run calibration first".into()))?;
        let neighbors = self.knn_query(code, self.k)?;
        let (label, score) = vote(&neighbors);
        let d_min = neighbors[0].distance;
        Ok(Prediction {
            label,
            score,
            confident: d_min <= tau,
            d_min,
            neighbors,
        })
    }

    pub fn predict(&self, model: &UNetModel, patch: &Tensor) -> Result<Prediction> {
        self.predict_code(&model.encode(patch)?)
    }

    /// Per-`k` accuracy on `val`; ids present in the index are excluded
    /// from their own neighbour lists.
    pub fn k_accuracies(&self, val: &[SupportEntry], grid: &[usize]) -> Result<Vec<(usize, f64)>> {
        if grid.is_empty() {
            return Err(Error::Parameter("k grid is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Parameter("no validation cases for k tuning".into()));
        }
        for &k in grid {
            check_k(k)?;
        }
        let k_max = *grid.iter().max().unwrap();
        let mut correct = vec![0usize; grid.len()];
        for v in val {
            // The sorted top-k_max list contains every smaller top-k as a prefix.
            let all = self.knn_excluding(&v.code, k_max, Some(&v.id))?;
            for (slot, &k) in grid.iter().enumerate() {
                correct[slot] += (vote(&all[..k]).0 == v.label) as usize;
            }
        }
        Ok(grid
            .iter()
            .zip(correct)
            .map(|(&k, c)| (k, c as f64 / val.len() as f64))
            .collect())
    }

    /// Most accurate `k` on `val`, smallest on ties.
    pub fn tune_k(&self, val: &[SupportEntry], grid: &[usize]) -> Result<usize> {
        let accs = self.k_accuracies(val, grid)?;
        let mut best = accs[0];
        for &(k, acc) in &accs[1..] {
            if acc > best.1 || (acc == best.1 && k < best.0) {
                best = (k, acc);
            }
        }
        Ok(best.0)
    }

    /// Nearest-neighbour distances of support items whose leave-one-out
    /// prediction is correct.
    pub fn calibration_distances(&self) -> Result<Vec<f64>> {
        for label in [Label::Benign, Label::Malignant] {
            if self.entries.iter().filter(|e| e.label == label).count() < 2 {
                return Err(Error::Calibration(format!(
                    "leave-one-out needs at least two {} support cases",
                    label.name()
                )));
            }
        }
        if self.k >= self.len() {
            return Err(Error::Calibration(format!(
                "leave-one-out with k = {} needs more than {} support cases",
                self.k,
                self.len()
            )));
        }
        let mut out = Vec::new();
        for e in &self.entries {
            let nb = self.knn_excluding(&e.code, self.k, Some(&e.id))?;
            if vote(&nb).0 == e.label {
                out.push(nb[0].distance);
            }
        }
        Ok(out)
    }

    /// `τ` = nearest-rank 95th percentile of [`Self::calibration_distances`].
    pub fn calibrate_threshold(&self) -> Result<f64> {
        let d = self.calibration_distances()?;
        if d.is_empty() {
            return Err(Error::Calibration("no support item is classified correctly by leave-one-out".into()));
        }
        let tau = nearest_rank(&d, CONFIDENCE_QUANTILE)?;
        if !(tau > 0.0) {
            return Err(Error::Calibration(format!(
                "calibrated threshold {tau} is not positive (duplicate support codes?)"
            )));
        }
        Ok(tau)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dim = self.head.len();
        let mut flat = Vec::with_capacity(self.len() * dim);
        for e in &self.entries {
            flat.extend_from_slice(&e.code.0);
        }
        let codes = Tensor::new(vec![self.len(), dim], flat)?;
        let manifest = IndexManifest {
            format_version: INDEX_FORMAT_VERSION,
            k: self.k,
            tau: self.tau,
            entries: self
                .entries
                .iter()
                .map(|e| EntryMeta {
                    id: e.id.clone(),
                    label: e.label,
                    source: e.source.clone(),
                })
                .collect(),
            codes: write_tensor(dir, "codes", &codes)?,
            align_a: write_tensor(dir, "align.A", &self.head.a)?,
            align_b: write_tensor(dir, "align.b", &self.head.b)?,
        };
        let path = dir.join(INDEX_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_MANIFEST);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: IndexManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "index format version {} is not supported (expected {INDEX_FORMAT_VERSION})",
                m.format_version
            )));
        }
        let a = read_tensor(dir, &m.align_a)?;
        let b = read_tensor(dir, &m.align_b)?;
        let codes = read_tensor(dir, &m.codes)?;
        let dim = a.numel();
        if codes.shape != [m.entries.len(), dim] {
            return Err(Error::Format(format!(
                "codes tensor has shape {:?}, expected [{}, {dim}]",
                codes.shape,
                m.entries.len()
            )));
        }
        let head = AlignDistHead::new(a.data, b.data).map_err(|e| Error::Format(e.to_string()))?;
        let entries = m
            .entries
            .into_iter()
            .zip(codes.data.chunks(dim.max(1)))
            .map(|(meta, c)| SupportEntry {
                id: meta.id,
                label: meta.label,
                code: LatentCode(c.to_vec()),
                source: meta.source,
            })
            .collect();
        let index = SupportIndex::from_entries(entries, head, m.k)?;
        match m.tau {
            Some(t) => index.with_tau(t),
            None => Ok(index),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Benign as B, Malignant as M};

    fn entry(id: &str, label: Label, code: &[f64]) -> SupportEntry {
        SupportEntry {
            id: id.into(),
            label,
            code: LatentCode(code.to_vec()),
            source: None,
        }
    }

    fn line_index(points: &[(f64, Label)], k: usize) -> SupportIndex {
        let entries = points
            .iter()
            .enumerate()
            .map(|(i, &(x, l))| entry(&format!("s{i:02}"), l, &[x]))
            .collect();
        SupportIndex::from_entries(entries, AlignDistHead::identity(1), k).unwrap()
    }

    fn nb(label: Label, distance: f64) -> Neighbor {
        Neighbor {
            id: String::new(),
            label,
            distance,
        }
    }

    #[test]
    fn vote_examples() {
        assert_eq!(vote(&[nb(M, 0.1), nb(M, 0.5), nb(M, 2.0)]), (M, 1.0));
        assert_eq!(vote(&[nb(B, 0.1), nb(B, 0.5), nb(B, 2.0)]), (B, 0.0));
        assert_eq!(vote(&[nb(B, 0.3), nb(M, 0.3)]).1, 0.5);
    }

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.95).unwrap(), 19.0);
        assert_eq!(nearest_rank(&[2.5; 7], 0.95).unwrap(), 2.5);
    }

    #[test]
    fn knn_basics() {
        let idx = line_index(&[(0.0, B), (1.0, B), (5.0, M), (6.0, M), (1.0, M)], 3);
        let all = idx.knn_query(&LatentCode(vec![0.0]), 5).unwrap();
        assert_eq!(all.len(), 5);
        // s01 and s04 tie at distance 1; id order decides
        let ids: Vec<&str> = all.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, ["s00", "s01", "s04", "s02", "s03"]);
        let self_hit = idx.knn_query(&LatentCode(vec![5.0]), 1).unwrap();
        assert_eq!((self_hit[0].id.as_str(), self_hit[0].distance), ("s02", 0.0));
        assert!(matches!(idx.knn_query(&LatentCode(vec![0.0]), 6), Err(Error::Parameter(_))));
        assert!(matches!(idx.knn_query(&LatentCode(vec![0.0]), 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn single_class_support_is_data_error() {
        let e = vec![entry("a", B, &[0.0]), entry("b", B, &[1.0])];
        assert!(matches!(
            SupportIndex::from_entries(e, AlignDistHead::identity(1), 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn tune_k_prefers_vote_over_outlier() {
        // A malignant outlier sits next to the benign query.
        let idx = line_index(
            &[(0.0, B), (0.3, B), (-0.3, B), (0.5, B), (0.11, M), (10.0, M), (10.5, M), (9.5, M)],
            1,
        );
        let val = [entry("q", B, &[0.1])];
        assert_eq!(idx.k_accuracies(&val, &[1, 5]).unwrap(), vec![(1, 0.0), (5, 1.0)]);
        assert_eq!(idx.tune_k(&val, &[1, 5]).unwrap(), 5);
        assert_eq!(idx.tune_k(&val, &[1]).unwrap(), 1);
        assert_eq!(idx.tune_k(&val, &[5, 3]).unwrap(), 3);
        assert!(matches!(idx.tune_k(&val, &[]), Err(Error::Parameter(_))));
        assert!(matches!(idx.tune_k(&val, &[2]), Err(Error::Parameter(_))));
    }

    #[test]
    fn tune_k_excludes_self_matches() {
        let idx = line_index(&[(0.0, B), (0.1, M), (0.2, M), (5.0, B), (5.1, B), (5.2, M)], 1);
        // Without exclusion every member would match itself at k = 1.
        let val: Vec<SupportEntry> = idx.entries().to_vec();
        let accs = idx.k_accuracies(&val, &[1]).unwrap();
        assert!(accs[0].1 < 1.0);
    }

    #[test]
    fn calibration_threshold() {
        let idx = line_index(&[(0.0, B), (1.0, B), (2.0, B), (10.0, M), (11.0, M), (12.0, M)], 1);
        assert_eq!(idx.calibration_distances().unwrap(), vec![1.0; 6]);
        assert_eq!(idx.calibrate_threshold().unwrap(), 1.0);

        let bad = line_index(&[(0.0, B), (1.0, M), (2.0, B), (3.0, M)], 1);
        assert!(matches!(bad.calibrate_threshold(), Err(Error::Calibration(_))));
    }

    #[test]
    fn predict_requires_tau_and_flags_confidence() {
        let idx = line_index(&[(0.0, B), (1.0, B), (10.0, M), (11.0, M)], 1);
        assert!(matches!(idx.predict_code(&LatentCode(vec![0.0])), Err(Error::Usage(_))));
        let idx = idx.with_tau(0.5).unwrap();
        let p = idx.predict_code(&LatentCode(vec![10.0])).unwrap();
        assert_eq!((p.label, p.score, p.d_min, p.confident), (M, 1.0, 0.0, true));
        assert!(!idx.predict_code(&LatentCode(vec![5.0])).unwrap().confident);
        assert!(idx.clone().with_tau(0.0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let head = AlignDistHead::new(vec![0.5, 2.0], vec![0.1, -0.2]).unwrap();
        let mut a = entry("a", B, &[0.1, 0.2]);
        a.source = Some(PathBuf::from("cases/a"));
        let entries = vec![a, entry("b", M, &[1.0 / 3.0, -7.5]), entry("c", M, &[0.0, 1e-300])];
        let idx = SupportIndex::from_entries(entries, head, 3).unwrap().with_tau(0.25).unwrap();
        idx.save(dir.path()).unwrap();
        assert_eq!(SupportIndex::load(dir.path()).unwrap(), idx);

        fs::write(dir.path().join("codes.bin"), [0u8; 5]).unwrap();
        assert!(matches!(SupportIndex::load(dir.path()), Err(Error::Format(_))));
    }
}
