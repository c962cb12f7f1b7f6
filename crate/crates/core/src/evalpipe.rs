//! Dataset manifests, frame aggregation, classification metrics and the
//! inference timing harness.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::TokenSequence;
use crate::error::{Error, Result};
use crate::sgns::EmbeddingTable;

pub const FRAME_SECONDS: f64 = 5.0;
pub const DEFAULT_BUDGET_SECONDS: f64 = 5400.0;
pub const DEFAULT_PROJECTION_FILES: usize = 700;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: PathBuf,
    pub label: String,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::Data(format!("duplicate clip id {:?}", e.clip_id)));
            }
        }
        Ok(())
    }

    /// One JSON object per non-blank line.
    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Data(format!("manifest line {}: {err}", n + 1)))?;
            entries.push(e);
        }
        Self::new(entries)
    }

    /// Reads a manifest; relative clip paths are resolved against the
    /// manifest's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse_jsonl(&text)?;
        if let Some(dir) = path.parent() {
            for e in &mut m.entries {
                if e.path.is_relative() {
                    e.path = dir.join(&e.path);
                }
            }
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    /// Sorted distinct labels; a label's position is its class id.
    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.entries.iter().map(|e| e.label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == which)
    }
}

/// Per-class train/validation split. Classes with fewer than two clips are
/// dropped; each kept class gets `round(ratio * n)` training clips, clamped
/// so both sides hold at least one.
pub fn stratified_split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    manifest.validate()?;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class.entry(&e.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned = vec![None; manifest.entries.len()];
    for members in by_class.values_mut() {
        let n = members.len();
        if n < 2 {
            continue;
        }
        members.shuffle(&mut rng);
        let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        for (k, &i) in members.iter().enumerate() {
            assigned[i] = Some(if k < n_train { Split::Train } else { Split::Val });
        }
    }
    let entries: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .zip(&assigned)
        .filter_map(|(e, s)| s.map(|split| ManifestEntry { split, ..e.clone() }))
        .collect();
    if entries.is_empty() {
        return Err(Error::Data("no class has at least two clips".into()));
    }
    Ok(DatasetManifest { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEmbedding {
    pub clip_id: String,
    pub frame_index: usize,
    /// Number of tokens averaged into `vector`.
    pub n_tokens: usize,
    pub vector: Vec<f64>,
}

pub fn tokens_per_frame(frames_per_second: f64, frame_seconds: f64) -> Result<usize> {
    let n = frames_per_second * frame_seconds;
    if !(n >= 1.0) || (n - n.round()).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "{frames_per_second} tokens/s over {frame_seconds} s is not a positive whole number of tokens"
        )));
    }
    Ok(n.round() as usize)
}

/// Averages token embeddings over consecutive non-overlapping frames. A
/// trailing partial frame is averaged over the tokens it has.
pub fn frame_embed_stsg(
    table: &EmbeddingTable,
    seq: &TokenSequence,
    frame_seconds: f64,
) -> Result<Vec<FrameEmbedding>> {
    let per_frame = tokens_per_frame(seq.frames_per_second, frame_seconds)?;
    let (v, d) = table.input_vectors.dim();
    let mut out = Vec::with_capacity(seq.tokens.len().div_ceil(per_frame));
    for (frame_index, chunk) in seq.tokens.chunks(per_frame).enumerate() {
        let mut acc = vec![0.0f64; d];
        for &t in chunk {
            let t = usize::from(t);
            if t >= v {
                return Err(Error::Data(format!("token {t} out of range for a {v}-token table")));
            }
            for (a, &x) in acc.iter_mut().zip(table.input_vectors.row(t)) {
                *a += f64::from(x);
            }
        }
        let n = chunk.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        out.push(FrameEmbedding {
            clip_id: seq.clip_id.clone(),
            frame_index,
            n_tokens: chunk.len(),
            vector: acc,
        });
    }
    Ok(out)
}

/// Maps each window `[start, start + window_len)` to the frame
/// `[f * frame_len, (f + 1) * frame_len)` it overlaps by at least half the
/// window length. A window split exactly in half between two frames goes to
/// the earlier one.
pub fn window_assign(window_starts: &[f64], window_len: f64, frame_len: f64) -> Result<Vec<Option<usize>>> {
    if !(window_len > 0.0 && frame_len > 0.0) {
        return Err(Error::Parameter("window and frame lengths must be positive".into()));
    }
    let need = window_len / 2.0 - 1e-9;
    Ok(window_starts
        .iter()
        .map(|&start| {
            let end = start + window_len;
            let first = (start / frame_len).floor().max(0.0) as usize;
            let last = (end / frame_len).ceil().max(0.0) as usize;
            (first..last).find(|&f| {
                let lo = f as f64 * frame_len;
                let overlap = end.min(lo + frame_len) - start.max(lo);
                overlap >= need
            })
        })
        .collect())
}

/// Mean of the window embeddings assigned to each of `n_frames` frames;
/// frames without windows are `None`.
pub fn mean_pool_windows(
    assignment: &[Option<usize>],
    windows: ArrayView2<f64>,
    n_frames: usize,
) -> Result<Vec<Option<Array1<f64>>>> {
    if assignment.len() != windows.nrows() {
        return Err(Error::Data(format!(
            "{} window assignments for {} window embeddings",
            assignment.len(),
            windows.nrows()
        )));
    }
    let mut sums: Vec<Option<(Array1<f64>, usize)>> = vec![None; n_frames];
    for (w, frame) in assignment.iter().enumerate() {
        let Some(f) = *frame else { continue };
        if f >= n_frames {
            continue;
        }
        let slot = sums[f].get_or_insert_with(|| (Array1::zeros(windows.ncols()), 0));
        slot.0 += &windows.row(w);
        slot.1 += 1;
    }
    Ok(sums.into_iter().map(|s| s.map(|(sum, n)| sum / n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

/// Per-class precision, recall and F1 (0/0 taken as 0); macro averages over
/// all `n_classes`.
pub fn f1_scores(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<F1Scores> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::Data(format!("class {bad} out of range for {n_classes} classes")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = (0..n_classes)
        .map(|c| {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fn_[c]);
            let f1 = ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn_[c]);
            ClassMetrics {
                class: c,
                label: c.to_string(),
                precision,
                recall,
                f1,
                support: tp[c] + fn_[c],
                auc: None,
            }
        })
        .collect();
    let correct: usize = tp.iter().sum();
    let accuracy = ratio(correct, truth.len());
    let macro_f1 = if n_classes == 0 {
        0.0
    } else {
        per_class.iter().map(|m| m.f1).sum::<f64>() / n_classes as f64
    };
    Ok(F1Scores {
        macro_f1,
        micro_f1: accuracy,
        accuracy,
        per_class,
    })
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucScores {
    pub macro_auc: f64,
    pub per_class: Vec<Option<f64>>,
    pub n_skipped: usize,
}

/// One-vs-rest ROC AUC per class from the Mann-Whitney statistic, averaged
/// over classes that have both positives and negatives.
pub fn roc_auc_macro(scores: ArrayView2<f64>, truth: &[usize], n_classes: usize) -> Result<AucScores> {
    if scores.nrows() != truth.len() || scores.ncols() != n_classes {
        return Err(Error::shape(
            format!("{}x{n_classes} scores", truth.len()),
            format!("{}x{}", scores.nrows(), scores.ncols()),
        ));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let n = truth.len();
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let pos = truth.iter().filter(|&&t| t == c).count();
            let neg = n - pos;
            if pos == 0 || neg == 0 {
                return None;
            }
            let col: Vec<f64> = scores.column(c).to_vec();
            let ranks = average_ranks(&col);
            let rank_sum: f64 = truth.iter().zip(&ranks).filter(|(&t, _)| t == c).map(|(_, r)| r).sum();
            let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
            Some(u / (pos as f64 * neg as f64))
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::UndefinedMetric(
            "every class lacks positives or negatives".into(),
        ));
    }
    Ok(AucScores {
        macro_auc: scored.iter().sum::<f64>() / scored.len() as f64,
        n_skipped: n_classes - scored.len(),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub roc_auc_macro: Option<f64>,
    pub n_skipped_classes: usize,
    pub per_class: Vec<ClassMetrics>,
}

impl EvalReport {
    /// Scores rows of class scores; predictions are the row argmax.
    pub fn from_scores(scores: ArrayView2<f64>, truth: &[usize], labels: &[String]) -> Result<Self> {
        let c = labels.len();
        let pred = crate::nn::argmax_rows(&scores.to_owned());
        let f1 = f1_scores(&pred, truth, c)?;
        let (auc, skipped, per_auc) = match roc_auc_macro(scores, truth, c) {
            Ok(a) => (Some(a.macro_auc), a.n_skipped, a.per_class),
            Err(Error::UndefinedMetric(_)) => (None, c, vec![None; c]),
            Err(e) => return Err(e),
        };
        let per_class = f1
            .per_class
            .into_iter()
            .zip(per_auc)
            .zip(labels)
            .map(|((m, auc), label)| ClassMetrics { auc, label: label.clone(), ..m })
            .collect();
        Ok(Self {
            n_samples: truth.len(),
            macro_f1: f1.macro_f1,
            micro_f1: f1.micro_f1,
            accuracy: f1.accuracy,
            roc_auc_macro: auc,
            n_skipped_classes: skipped,
            per_class,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let fmt_auc = |a: Option<f64>| a.map_or("skipped".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "samples       {}", self.n_samples);
        let _ = writeln!(s, "macro F1      {:.4}", self.macro_f1);
        let _ = writeln!(s, "micro F1      {:.4}", self.micro_f1);
        let _ = writeln!(s, "accuracy      {:.4}", self.accuracy);
        let _ = writeln!(s, "ROC-AUC       {}", fmt_auc(self.roc_auc_macro));
        let _ = writeln!(s, "skipped (AUC) {}", self.n_skipped_classes);
        let w = self.per_class.iter().map(|m| m.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            s,
            "\n{:<w$}  {:>9}  {:>9}  {:>9}  {:>7}  {:>9}",
            "class", "precision", "recall", "f1", "support", "auc"
        );
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}  {:>9}",
                m.label,
                m.precision,
                m.recall,
                m.f1,
                m.support,
                fmt_auc(m.auc)
            );
        }
        s
    }

    /// Per-class rows: `class,label,precision,recall,f1,support,auc`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,label,precision,recall,f1,support,auc\n");
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.class,
                csv_field(&m.label),
                m.precision,
                m.recall,
                m.f1,
                m.support,
                m.auc.map_or(String::new(), |a| a.to_string())
            );
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub clip_ids: Vec<String>,
    pub per_file_seconds: Vec<f64>,
    pub avg_seconds_per_file: f64,
    pub n_projection: usize,
    pub projected_total_seconds: f64,
    pub budget_seconds: f64,
    pub within_budget: bool,
}

impl TimingReport {
    pub fn from_measurements(
        clip_ids: Vec<String>,
        per_file_seconds: Vec<f64>,
        n_projection: usize,
        budget_seconds: f64,
    ) -> Result<Self> {
        if per_file_seconds.is_empty() {
            return Err(Error::Data("timing needs at least one file".into()));
        }
        let avg = per_file_seconds.iter().sum::<f64>() / per_file_seconds.len() as f64;
        let projected = avg * n_projection as f64;
        Ok(Self {
            clip_ids,
            per_file_seconds,
            avg_seconds_per_file: avg,
            n_projection,
            projected_total_seconds: projected,
            budget_seconds,
            within_budget: projected <= budget_seconds,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let w = self.clip_ids.iter().map(|c| c.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(s, "{:<w$}  {:>10}", "clip", "seconds");
        for (id, t) in self.clip_ids.iter().zip(&self.per_file_seconds) {
            let _ = writeln!(s, "{id:<w$}  {t:>10.4}");
        }
        let _ = writeln!(s, "\navg s/file    {:.4}", self.avg_seconds_per_file);
        let _ = writeln!(
            s,
            "projected     {:.1} s for {} files (budget {:.0} s, {})",
            self.projected_total_seconds,
            self.n_projection,
            self.budget_seconds,
            if self.within_budget { "within" } else { "over" }
        );
        s
    }
}

/// Times `infer` on each clip after one untimed warm-up call on the first.
pub fn bench_inference<C, T>(
    clips: &[C],
    id: impl Fn(&C) -> String,
    mut infer: impl FnMut(&C) -> Result<T>,
    n_projection: usize,
    budget_seconds: f64,
) -> Result<TimingReport> {
    let first = clips.first().ok_or_else(|| Error::Data("no clips to benchmark".into()))?;
    std::hint::black_box(infer(first)?);
    let mut times = Vec::with_capacity(clips.len());
    for clip in clips {
        let t0 = Instant::now();
        std::hint::black_box(infer(clip)?);
        times.push(t0.elapsed().as_secs_f64());
    }
    TimingReport::from_measurements(clips.iter().map(id).collect(), times, n_projection, budget_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn entry(id: &str, label: &str) -> ManifestEntry {
        ManifestEntry {
            clip_id: id.into(),
            path: PathBuf::from(format!("{id}.wav")),
            label: label.into(),
            split: Split::Unassigned,
        }
    }

    fn manifest(counts: &[(&str, usize)]) -> DatasetManifest {
        let mut entries = Vec::new();
        for (label, n) in counts {
            for i in 0..*n {
                entries.push(entry(&format!("{label}{i}"), label));
            }
        }
        DatasetManifest::new(entries).unwrap()
    }

    fn count(m: &DatasetManifest, label: &str, split: Split) -> usize {
        m.split(split).filter(|e| e.label == label).count()
    }

    #[test]
    fn split_drops_singletons_and_respects_ratio() {
        let m = manifest(&[("a", 1), ("b", 10), ("c", 2), ("d", 7)]);
        let s = stratified_split(&m, 0.8, 3).unwrap();
        assert_eq!(count(&s, "a", Split::Train) + count(&s, "a", Split::Val), 0);
        assert_eq!((count(&s, "b", Split::Train), count(&s, "b", Split::Val)), (8, 2));
        assert_eq!((count(&s, "c", Split::Train), count(&s, "c", Split::Val)), (1, 1));
        let d_train = count(&s, "d", Split::Train);
        assert!((d_train as f64 - 0.8 * 7.0).abs() <= 1.0 && d_train < 7);
        assert_eq!(s, stratified_split(&m, 0.8, 3).unwrap());
        assert_eq!(s.labels(), vec!["b", "c", "d"]);
    }

    #[test]
    fn split_extreme_ratios_keep_both_sides() {
        let m = manifest(&[("x", 5)]);
        for r in [0.01, 0.99] {
            let s = stratified_split(&m, r, 0).unwrap();
            assert!(count(&s, "x", Split::Train) >= 1 && count(&s, "x", Split::Val) >= 1);
        }
    }

    #[test]
    fn split_errors() {
        assert!(matches!(stratified_split(&manifest(&[("a", 1), ("b", 1)]), 0.8, 0), Err(Error::Data(_))));
        assert!(stratified_split(&manifest(&[("a", 3)]), 1.0, 0).is_err());
        assert!(DatasetManifest::new(vec![entry("x", "a"), entry("x", "b")]).is_err());
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let text = "{\"clip_id\":\"c1\",\"path\":\"a/c1.wav\",\"label\":\"owl\",\"split\":\"train\"}\n\n\
                    {\"clip_id\":\"c2\",\"path\":\"c2.wav\",\"label\":\"wren\"}\n";
        let m = DatasetManifest::parse_jsonl(text).unwrap();
        assert_eq!(m.entries[0].split, Split::Train);
        assert_eq!(m.entries[1].split, Split::Unassigned);
        assert_eq!(DatasetManifest::parse_jsonl(&m.to_jsonl()).unwrap(), m);
        assert!(DatasetManifest::parse_jsonl("{not json").is_err());
    }

    fn table(v: usize, d: usize, seed: u64) -> EmbeddingTable {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingTable {
            input_vectors: Array2::from_shape_simple_fn((v, d), || r.random_range(-1.0..1.0f32)),
            output_vectors: None,
            config: Default::default(),
        }
    }

    fn seq(tokens: Vec<u16>) -> TokenSequence {
        TokenSequence { clip_id: "c".into(), tokens, frames_per_second: 8.0 }
    }

    #[test]
    fn frame_counts() {
        let t = table(16, 4, 0);
        assert_eq!(frame_embed_stsg(&t, &seq(vec![1; 480]), 5.0).unwrap().len(), 12);
        let f = frame_embed_stsg(&t, &seq(vec![2; 60]), 5.0).unwrap();
        assert_eq!(f.iter().map(|f| f.n_tokens).collect::<Vec<_>>(), vec![40, 20]);
        assert!(frame_embed_stsg(&t, &seq(vec![]), 5.0).unwrap().is_empty());
        assert!(frame_embed_stsg(&t, &seq(vec![1]), 0.1).is_err());
    }

    #[test]
    fn identical_tokens_give_their_embedding() {
        let t = table(16, 4, 1);
        for f in frame_embed_stsg(&t, &seq(vec![5; 100]), 5.0).unwrap() {
            for (a, &b) in f.vector.iter().zip(t.input_vectors.row(5)) {
                assert!((a - f64::from(b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frame_means_conserve_mass() {
        let t = table(16, 4, 2);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let tokens: Vec<u16> = (0..137).map(|_| r.random_range(0..16)).collect();
        let frames = frame_embed_stsg(&t, &seq(tokens.clone()), 5.0).unwrap();
        for j in 0..4 {
            let weighted: f64 = frames.iter().map(|f| f.vector[j] * f.n_tokens as f64).sum::<f64>() / 137.0;
            let direct: f64 = tokens.iter().map(|&k| f64::from(t.input_vectors[[k as usize, j]])).sum::<f64>() / 137.0;
            assert!((weighted - direct).abs() < 1e-9);
        }
        let bad = seq(vec![16]);
        assert!(matches!(frame_embed_stsg(&t, &bad, 5.0), Err(Error::Data(_))));
    }

    #[test]
    fn window_overlap_rule() {
        let a = window_assign(&[0.0, 3.0, 6.0, 9.0, 12.0], 3.0, 5.0).unwrap();
        assert_eq!(a, vec![Some(0), Some(0), Some(1), Some(2), Some(2)]);
        assert_eq!(window_assign(&[1.0], 3.0, 5.0).unwrap(), vec![Some(0)]);
        // [3.5, 6.5) splits 1.5/1.5: earlier frame wins.
        assert_eq!(window_assign(&[3.5], 3.0, 5.0).unwrap(), vec![Some(0)]);
        // A 12 s window never covers 6 s of a 5 s frame.
        assert_eq!(window_assign(&[0.0], 12.0, 5.0).unwrap(), vec![None]);
        assert!(window_assign(&[0.0], 0.0, 5.0).is_err());
    }

    #[test]
    fn sliding_windows_map_to_at_most_one_frame() {
        let starts: Vec<f64> = (0..58).map(f64::from).collect();
        let got = window_assign(&starts, 3.0, 5.0).unwrap();
        for (s, g) in starts.iter().zip(&got) {
            let qualifying: Vec<usize> = (0..12)
                .filter(|&f| {
                    let lo = f as f64 * 5.0;
                    (s + 3.0).min(lo + 5.0) - s.max(lo) >= 1.5
                })
                .collect();
            assert!(qualifying.len() <= 1);
            assert_eq!(*g, qualifying.first().copied());
        }
    }

    #[test]
    fn pooling() {
        let w = Array2::from_shape_vec((2, 2), vec![1.0, -2.0, -1.0, 2.0]).unwrap();
        let p = mean_pool_windows(&[Some(0), Some(0)], w.view(), 2).unwrap();
        assert_eq!(p[0].as_ref().unwrap().to_vec(), vec![0.0, 0.0]);
        assert!(p[1].is_none());
        let id = mean_pool_windows(&[Some(1), Some(0)], w.view(), 2).unwrap();
        assert_eq!(id[1].as_ref().unwrap(), &w.row(0));

        let mut r = ChaCha8Rng::seed_from_u64(4);
        let w = Array2::from_shape_simple_fn((30, 3), || r.random_range(-1.0..1.0));
        let assign: Vec<Option<usize>> = (0..30).map(|_| r.random_bool(0.8).then(|| r.random_range(0..5))).collect();
        let got = mean_pool_windows(&assign, w.view(), 5).unwrap();
        for (f, pooled) in got.iter().enumerate() {
            let members: Vec<usize> = (0..30).filter(|&i| assign[i] == Some(f)).collect();
            match pooled {
                None => assert!(members.is_empty()),
                Some(v) => {
                    for j in 0..3 {
                        let naive = members.iter().map(|&i| w[[i, j]]).sum::<f64>() / members.len() as f64;
                        assert!((v[j] - naive).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn f1_examples() {
        let s = f1_scores(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!((s.macro_f1, s.micro_f1, s.accuracy), (1.0, 1.0, 1.0));
        // Each class: TP 1, FP 1, FN 1.
        let s = f1_scores(&[0, 1, 1, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((s.macro_f1 - 0.5).abs() < 1e-12);
        let s = f1_scores(&[0, 0, 0], &[0, 1, 2], 4).unwrap();
        assert!((s.macro_f1 - 0.5 / 4.0).abs() < 1e-12);
        assert_eq!(s.per_class[3].f1, 0.0);
        assert!(f1_scores(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn micro_f1_is_accuracy_and_order_free() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let pred: Vec<usize> = (0..50).map(|_| r.random_range(0..4)).collect();
        let truth: Vec<usize> = (0..50).map(|_| r.random_range(0..4)).collect();
        let a = f1_scores(&pred, &truth, 4).unwrap();
        let acc = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / 50.0;
        assert_eq!(a.micro_f1, acc);
        let (mut p2, mut t2) = (pred.clone(), truth.clone());
        p2.reverse();
        t2.reverse();
        assert_eq!(f1_scores(&p2, &t2, 4).unwrap().macro_f1, a.macro_f1);
    }

    fn pairwise_auc(scores: &Array2<f64>, truth: &[usize], c: usize) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..truth.len() {
            for j in 0..truth.len() {
                if truth[i] == c && truth[j] != c {
                    den += 1.0;
                    let (a, b) = (scores[[i, c]], scores[[j, c]]);
                    num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn auc_matches_pairwise_oracle_and_is_rank_invariant() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let (n, c) = (50, 6);
        let scores = Array2::from_shape_simple_fn((n, c), || (r.random_range(0..10) as f64) / 10.0);
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let got = roc_auc_macro(scores.view(), &truth, c).unwrap();
        for k in 0..c {
            let oracle = pairwise_auc(&scores, &truth, k);
            match (got.per_class[k], oracle) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
        let warped = scores.mapv(|v| (3.0 * v).exp() - 7.0);
        assert_eq!(roc_auc_macro(warped.view(), &truth, c).unwrap(), got);
    }

    #[test]
    fn auc_edge_cases() {
        let truth = [0, 1, 2, 0];
        let constant = Array2::from_elem((4, 4), 0.3);
        let a = roc_auc_macro(constant.view(), &truth, 4).unwrap();
        assert_eq!(a.macro_auc, 0.5);
        assert_eq!(a.n_skipped, 1);
        assert_eq!(a.per_class[3], None);
        let perfect = Array2::from_shape_fn((4, 3), |(i, k)| if truth[i] == k { 1.0 } else { 0.0 });
        assert_eq!(roc_auc_macro(perfect.view(), &truth, 3).unwrap().macro_auc, 1.0);
        let single = Array2::zeros((2, 2));
        assert!(matches!(roc_auc_macro(single.view(), &[0, 0], 1), Err(Error::Shape { .. })));
        let one_class = Array2::zeros((2, 1));
        assert!(matches!(roc_auc_macro(one_class.view(), &[0, 0], 1), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn report_formats() {
        let scores = Array2::from_shape_vec((3, 2), vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4]).unwrap();
        let labels = vec!["owl".to_string(), "wren, house".to_string()];
        let r = EvalReport::from_scores(scores.view(), &[0, 1, 1], &labels).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.roc_auc_macro, Some(1.0));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("wren, house"));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("\"wren, house\""));
    }

    #[test]
    fn timing_projection_arithmetic() {
        let fast = TimingReport::from_measurements(vec!["a".into()], vec![0.5], 700, DEFAULT_BUDGET_SECONDS).unwrap();
        assert_eq!(fast.projected_total_seconds, 350.0);
        assert!(fast.within_budget);
        let slow = TimingReport::from_measurements(vec!["a".into()], vec![17.0], 700, DEFAULT_BUDGET_SECONDS).unwrap();
        assert_eq!(slow.projected_total_seconds, 11_900.0);
        assert!(!slow.within_budget);
        assert!(TimingReport::from_measurements(vec![], vec![], 700, 1.0).is_err());
    }

    #[test]
    fn bench_excludes_warm_up() {
        let mut calls = 0;
        let r = bench_inference(&[1u32], |c| c.to_string(), |_| { calls += 1; Ok(()) }, 1, 10.0).unwrap();
        assert_eq!(calls, 2);
        assert_eq!(r.per_file_seconds.len(), 1);
        assert_eq!(r.projected_total_seconds, r.per_file_seconds[0]);
        assert!(r.to_table().contains("within"));
    }
}
