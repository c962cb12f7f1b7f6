//! End-to-end glue: tokenization, frame features, classifier training and
//! evaluation.

use std::borrow::Cow;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::codebook::{fit_kmeans, Codebook, TokenSequence};
use crate::config::PipelineConfig;
use crate::dsp::{normalize_rows, AudioClip, MelExtractor, MelFrameMatrix, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::evalpipe::{frame_embed_stsg, DatasetManifest, EvalReport, Split};
use crate::nn::{train_head, ClassifierHead, TrainConfig};
use crate::reduce::{fit_pca, subsample_rows, PcaModel};
use crate::sgns::{build_negative_sampler, build_vocab, train_sgns, EmbeddingTable, SgnsConfig, TrainReport};
use crate::store::{Container, Persist, Tensor};

/// Audio to token sequence: mel frames, PCA projection, nearest centroid.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub extractor: MelExtractor,
    pub pca: PcaModel,
    pub codebook: Codebook,
}

impl Tokenizer {
    pub fn new(spectrogram: SpectrogramConfig, pca: PcaModel, codebook: Codebook) -> Result<Self> {
        if pca.input_dim() != spectrogram.n_mels {
            return Err(Error::shape(
                format!("PCA over {} mel bands", spectrogram.n_mels),
                format!("{}", pca.input_dim()),
            ));
        }
        if codebook.dim() != pca.k() {
            return Err(Error::shape(
                format!("{}-dimensional centroids", pca.k()),
                format!("{}", codebook.dim()),
            ));
        }
        Ok(Self {
            extractor: MelExtractor::new(spectrogram)?,
            pca,
            codebook,
        })
    }

    pub fn frames_per_second(&self) -> f64 {
        self.extractor.config().frames_per_second()
    }

    /// Projects `mel`, normalizing it first unless it is marked normalized.
    pub fn reduce(&self, mel: &MelFrameMatrix) -> Result<Array2<f64>> {
        self.pca.transform(normalized(mel).view())
    }

    pub fn tokenize_mel(&self, clip_id: &str, mel: &MelFrameMatrix) -> Result<TokenSequence> {
        self.codebook.tokenize(clip_id, self.reduce(mel)?.view(), mel.frames_per_second)
    }

    pub fn tokenize(&self, clip: &AudioClip) -> Result<TokenSequence> {
        self.tokenize_mel(&clip.id, &self.extractor.features(clip)?)
    }
}

fn normalized(mel: &MelFrameMatrix) -> Cow<'_, Array2<f64>> {
    if mel.normalized {
        Cow::Borrowed(&mel.frames)
    } else {
        let mut frames = mel.frames.clone();
        normalize_rows(&mut frames);
        Cow::Owned(frames)
    }
}

/// A classification head together with its class names.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub head: ClassifierHead,
    pub labels: Vec<String>,
}

impl Persist for Classifier {
    const KIND: &'static str = "classifier";

    fn to_container(&self) -> Result<Container> {
        self.head.check_invariants()?;
        if self.labels.len() != self.head.n_classes() {
            return Err(Error::Data(format!(
                "{} labels for {} classes",
                self.labels.len(),
                self.head.n_classes()
            )));
        }
        let h = &self.head;
        Ok(Container::new(Self::KIND, json!({ "labels": self.labels }))
            .with(Tensor::f64("hidden.weight", &h.hidden.weight))
            .with(Tensor::f64("hidden.bias", &h.hidden.bias))
            .with(Tensor::f64("output.weight", &h.output.weight))
            .with(Tensor::f64("output.bias", &h.output.bias)))
    }

    fn from_container(c: &Container) -> Result<Self> {
        let head = ClassifierHead {
            hidden: crate::nn::layers::Linear {
                weight: c.f64("hidden.weight")?,
                bias: c.f64("hidden.bias")?,
            },
            output: crate::nn::layers::Linear {
                weight: c.f64("output.weight")?,
                bias: c.f64("output.bias")?,
            },
        };
        let labels: Vec<String> = c.meta("labels")?;
        let out = Self { head, labels };
        out.head.check_invariants()?;
        if out.labels.len() != out.head.n_classes() {
            return Err(Error::Data("label count disagrees with head width".into()));
        }
        Ok(out)
    }
}

/// Frame-averaged embeddings for every sequence, stacked, with the index of
/// the source sequence for each row.
pub fn frame_features(
    table: &EmbeddingTable,
    seqs: &[TokenSequence],
    frame_seconds: f64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let d = table.dim();
    let mut data = Vec::new();
    let mut owner = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        for f in frame_embed_stsg(table, seq, frame_seconds)? {
            data.extend_from_slice(&f.vector);
            owner.push(i);
        }
    }
    let x = Array2::from_shape_vec((owner.len(), d), data).expect("rows of width d");
    Ok((x, owner))
}

/// Builds the vocabulary statistics and negative sampler, then trains.
pub fn train_embeddings(
    corpus: &[TokenSequence],
    vocab_size: usize,
    cfg: &SgnsConfig,
) -> Result<(EmbeddingTable, TrainReport)> {
    let stats = build_vocab(corpus, vocab_size, cfg.min_count, cfg.sample)?;
    let sampler = build_negative_sampler(&stats, cfg.ns_exponent)?;
    train_sgns(corpus, &stats, &sampler, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub clip_id: String,
    pub frame_index: usize,
    pub top_k: Vec<(String, f64)>,
}

/// The full inference chain: tokenize, embed, frame-average, classify.
#[derive(Debug, Clone)]
pub struct StsgClassifier {
    pub tokenizer: Tokenizer,
    pub table: EmbeddingTable,
    pub classifier: Classifier,
    pub frame_seconds: f64,
}

impl StsgClassifier {
    pub fn new(tokenizer: Tokenizer, table: EmbeddingTable, classifier: Classifier, frame_seconds: f64) -> Result<Self> {
        if table.vocab_size() != tokenizer.codebook.vocab_size() {
            return Err(Error::shape(
                format!("{} embedding rows", tokenizer.codebook.vocab_size()),
                format!("{}", table.vocab_size()),
            ));
        }
        if classifier.head.input_dim() != table.dim() {
            return Err(Error::shape(
                format!("head input {}", table.dim()),
                format!("{}", classifier.head.input_dim()),
            ));
        }
        Ok(Self {
            tokenizer,
            table,
            classifier,
            frame_seconds,
        })
    }

    /// Class probabilities, one row per frame.
    pub fn frame_probabilities(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        let seq = self.tokenizer.tokenize(clip)?;
        let (x, _) = frame_features(&self.table, std::slice::from_ref(&seq), self.frame_seconds)?;
        self.classifier.head.predict_proba(x.view())
    }

    pub fn predict(&self, clip: &AudioClip, top_k: usize) -> Result<Vec<FramePrediction>> {
        let probs = self.frame_probabilities(clip)?;
        Ok(probs
            .rows()
            .into_iter()
            .enumerate()
            .map(|(frame_index, row)| {
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                FramePrediction {
                    clip_id: clip.id.clone(),
                    frame_index,
                    top_k: order
                        .into_iter()
                        .take(top_k)
                        .map(|c| (self.classifier.labels[c].clone(), row[c]))
                        .collect(),
                }
            })
            .collect())
    }
}

/// Trains a classifier on frame embeddings, each frame labelled with its
/// clip's class.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    table: &EmbeddingTable,
    seqs: &[TokenSequence],
    labels: &[usize],
    label_names: &[String],
    validation: Option<(&[TokenSequence], &[usize])>,
    hidden: usize,
    cfg: &TrainConfig,
    frame_seconds: f64,
) -> Result<Classifier> {
    if seqs.len() != labels.len() {
        return Err(Error::Data(format!("{} sequences but {} labels", seqs.len(), labels.len())));
    }
    let (x, owner) = frame_features(table, seqs, frame_seconds)?;
    let y: Vec<usize> = owner.iter().map(|&i| labels[i]).collect();
    let val = match validation {
        Some((vs, vl)) => {
            let (vx, vo) = frame_features(table, vs, frame_seconds)?;
            Some((vx, vo.iter().map(|&i| vl[i]).collect::<Vec<_>>()))
        }
        None => None,
    };
    let head = train_head(
        x.view(),
        &y,
        label_names.len(),
        val.as_ref().map(|(vx, vy)| (vx.view(), vy.as_slice())),
        hidden,
        cfg,
    )?;
    Ok(Classifier {
        head,
        labels: label_names.to_vec(),
    })
}

/// Frame-level metrics on labelled sequences.
pub fn evaluate_classifier(
    table: &EmbeddingTable,
    classifier: &Classifier,
    seqs: &[TokenSequence],
    labels: &[usize],
    frame_seconds: f64,
) -> Result<EvalReport> {
    let (x, owner) = frame_features(table, seqs, frame_seconds)?;
    let y: Vec<usize> = owner.iter().map(|&i| labels[i]).collect();
    let scores = classifier.head.predict_proba(x.view())?;
    EvalReport::from_scores(scores.view(), &y, &classifier.labels)
}

/// A labelled clip reduced to PCA space.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub clip_id: String,
    pub label: usize,
    pub split: Split,
    pub reduced: Array2<f64>,
}

/// Mel features of a split dataset projected with a PCA fitted on the
/// training clips. Codebooks and embeddings for different settings can be
/// fitted on top without recomputing features.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub labels: Vec<String>,
    pub clips: Vec<PreparedClip>,
    pub frames_per_second: f64,
    pub pca: PcaModel,
}

pub fn stack_rows<'a>(mats: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Array2<f64>> {
    let views: Vec<ArrayView2<f64>> = mats.into_iter().collect();
    if views.is_empty() {
        return Err(Error::Data("no frames to stack".into()));
    }
    concatenate(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))
}

impl PreparedCorpus {
    /// `mels[i]` holds the features of `manifest.entries[i]`; every entry must
    /// carry a train or val split. Unnormalized matrices are normalized here.
    pub fn build(manifest: &DatasetManifest, mels: &[MelFrameMatrix], cfg: &PipelineConfig) -> Result<Self> {
        if mels.len() != manifest.entries.len() {
            return Err(Error::Data(format!(
                "{} feature matrices for {} manifest entries",
                mels.len(),
                manifest.entries.len()
            )));
        }
        if manifest.entries.iter().any(|e| e.split == Split::Unassigned) {
            return Err(Error::Data("every manifest entry needs a train or val split".into()));
        }
        let labels = manifest.labels();
        let frames: Vec<Cow<'_, Array2<f64>>> = mels.iter().map(normalized).collect();
        let train = stack_rows(
            manifest
                .entries
                .iter()
                .zip(&frames)
                .filter(|(e, _)| e.split == Split::Train)
                .map(|(_, m)| m.view()),
        )?;
        let sample = if cfg.pca_max_rows == 0 { train } else { subsample_rows(train.view(), cfg.pca_max_rows, cfg.seed) };
        let pca = fit_pca(sample.view(), cfg.pca_k, cfg.seed)?;
        let clips = manifest
            .entries
            .iter()
            .zip(&frames)
            .map(|(e, m)| {
                Ok(PreparedClip {
                    clip_id: e.clip_id.clone(),
                    label: labels.binary_search(&e.label).expect("label from this manifest"),
                    split: e.split,
                    reduced: pca.transform(m.view())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            labels,
            clips,
            frames_per_second: cfg.spectrogram.frames_per_second(),
            pca,
        })
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &PreparedClip> {
        self.clips.iter().filter(move |c| c.split == which)
    }

    /// K-means over the training frames.
    pub fn fit_codebook(&self, vocab_size: usize, max_iters: usize, max_rows: usize, seed: u64) -> Result<Codebook> {
        let train = stack_rows(self.split(Split::Train).map(|c| c.reduced.view()))?;
        let data = if max_rows == 0 { train } else { subsample_rows(train.view(), max_rows, seed) };
        fit_kmeans(data.view(), vocab_size, max_iters, seed)
    }

    pub fn tokenize(&self, book: &Codebook, which: Split) -> Result<(Vec<TokenSequence>, Vec<usize>)> {
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for c in self.split(which) {
            seqs.push(book.tokenize(&c.clip_id, c.reduced.view(), self.frames_per_second)?);
            labels.push(c.label);
        }
        Ok((seqs, labels))
    }
}

/// Everything produced by one embedding-plus-head experiment.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub table: EmbeddingTable,
    pub classifier: Classifier,
    pub report: EvalReport,
}

/// Tokenizes both splits with `book`, trains embeddings and a head on the
/// training split and evaluates frame-level metrics on the validation split.
pub fn run_cell(
    corpus: &PreparedCorpus,
    book: &Codebook,
    sgns: &SgnsConfig,
    head: &TrainConfig,
    hidden: usize,
    frame_seconds: f64,
) -> Result<CellOutcome> {
    let (train_seqs, train_labels) = corpus.tokenize(book, Split::Train)?;
    let (val_seqs, val_labels) = corpus.tokenize(book, Split::Val)?;
    let (table, _) = train_embeddings(&train_seqs, book.vocab_size(), sgns)?;
    let classifier = train_classifier(
        &table,
        &train_seqs,
        &train_labels,
        &corpus.labels,
        None,
        hidden,
        head,
        frame_seconds,
    )?;
    let report = evaluate_classifier(&table, &classifier, &val_seqs, &val_labels, frame_seconds)?;
    Ok(CellOutcome {
        table,
        classifier,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{synth_clip, Tone};
    use crate::evalpipe::ManifestEntry;
    use crate::store::{from_bytes, to_bytes};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.spectrogram.n_mels = 32;
        cfg.pca_k = 4;
        cfg.vocab_size = 8;
        cfg.sgns = SgnsConfig { vector_size: 6, window: 4, epochs: 3, sample: 1e-2, ..Default::default() };
        cfg.head = TrainConfig { epochs: 30, ..Default::default() };
        cfg.head_hidden = 16;
        cfg
    }

    fn clip(id: &str, freq: f64, seed: u64) -> AudioClip {
        let tones = [Tone { start: 0.5, duration: 8.0, frequency: freq, amplitude: 0.5 }];
        synth_clip(id, &tones, 0.01, 32_000, 10.0, seed).unwrap()
    }

    #[test]
    fn tokenizer_shapes_and_errors() {
        let cfg = small_config();
        let ex = MelExtractor::new(cfg.spectrogram.clone()).unwrap();
        let mel = ex.features(&clip("a", 1000.0, 1)).unwrap();
        let pca = fit_pca(mel.frames.view(), 4, 0).unwrap();
        let book = fit_kmeans(pca.transform(mel.frames.view()).unwrap().view(), 8, 10, 0).unwrap();
        let tok = Tokenizer::new(cfg.spectrogram.clone(), pca.clone(), book.clone()).unwrap();
        let seq = tok.tokenize(&clip("b", 1000.0, 2)).unwrap();
        assert_eq!(seq.tokens.len(), 80);
        assert_eq!(seq.clip_id, "b");
        let raw = ex.extract(&clip("b", 1000.0, 2)).unwrap();
        assert!(!raw.normalized);
        assert_eq!(tok.tokenize_mel("b", &raw).unwrap(), seq);
        let wrong = fit_kmeans(mel.frames.view(), 8, 5, 0).unwrap();
        assert!(matches!(Tokenizer::new(cfg.spectrogram.clone(), pca, wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn small_corpus_end_to_end() {
        let cfg = small_config();
        let ex = MelExtractor::new(cfg.spectrogram.clone()).unwrap();
        let mut entries = Vec::new();
        let mut mels = Vec::new();
        for i in 0..12 {
            let (label, freq) = if i % 2 == 0 { ("low", 800.0) } else { ("high", 6000.0) };
            let id = format!("c{i}");
            mels.push(ex.features(&clip(&id, freq, i)).unwrap());
            entries.push(ManifestEntry {
                clip_id: id,
                path: "unused.wav".into(),
                label: label.into(),
                split: if i < 8 { Split::Train } else { Split::Val },
            });
        }
        let manifest = DatasetManifest::new(entries).unwrap();
        let corpus = PreparedCorpus::build(&manifest, &mels, &cfg).unwrap();
        assert_eq!(corpus.labels, vec!["high", "low"]);
        let book = corpus.fit_codebook(8, 10, 0, 0).unwrap();
        let out = run_cell(&corpus, &book, &cfg.sgns, &cfg.head, 16, 5.0).unwrap();
        assert_eq!(out.report.n_samples, 8);
        assert!(out.report.accuracy >= 0.99, "{}", out.report.to_table());

        let again = run_cell(&corpus, &book, &cfg.sgns, &cfg.head, 16, 5.0).unwrap();
        assert_eq!(again.report, out.report);

        let tok = Tokenizer::new(cfg.spectrogram.clone(), corpus.pca.clone(), book).unwrap();
        let full = StsgClassifier::new(tok, out.table, out.classifier.clone(), 5.0).unwrap();
        let preds = full.predict(&clip("new", 6000.0, 99), 2).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].top_k[0].0, "high");
        assert!(preds[0].top_k[0].1 >= preds[0].top_k[1].1);

        let back: Classifier = from_bytes(&to_bytes(&out.classifier).unwrap()).unwrap();
        assert_eq!(back, out.classifier);
    }

    #[test]
    fn frame_features_track_owners() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let table = EmbeddingTable {
            input_vectors: Array2::from_shape_simple_fn((4, 3), || rand::Rng::random_range(&mut r, -1.0..1.0f32)),
            output_vectors: None,
            config: Default::default(),
        };
        let seq = |n| TokenSequence { clip_id: "x".into(), tokens: vec![1; n], frames_per_second: 8.0 };
        let (x, owner) = frame_features(&table, &[seq(45), seq(40), seq(0)], 5.0).unwrap();
        assert_eq!(owner, vec![0, 0, 1]);
        assert_eq!(x.nrows(), 3);
    }
}
