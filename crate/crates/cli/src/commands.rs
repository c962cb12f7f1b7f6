use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde_json::json;

use stsg::codebook::{fit_kmeans, Codebook, TokenSequence};
use stsg::config::PipelineConfig;
use stsg::dsp::{load_audio, normalize_frames, AudioClip, MelExtractor, MelFrameMatrix};
use stsg::evalpipe::{bench_inference, stratified_split, tokens_per_frame, DatasetManifest, Split};
use stsg::nn::{train_student, TrainConfig};
use stsg::pipeline::{
    evaluate_classifier, run_cell, stack_rows, train_classifier, train_embeddings, Classifier, PreparedCorpus,
    StsgClassifier, Tokenizer,
};
use stsg::reduce::{fit_pca, subsample_rows, PcaModel};
use stsg::sgns::EmbeddingTable;
use stsg::store::{load_object, save_object, write_atomic, KeyedMatrix, TokenFile};

use crate::args::*;
use crate::error::{CliError, CliResult};

const SIDECAR: &str = "config.toml";

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::Featurize(a) => featurize(cfg, a),
        Command::FitPca(a) => fit_pca_cmd(cfg, a),
        Command::FitCodebook(a) => fit_codebook(cfg, a),
        Command::Tokenize(a) => tokenize(cfg, a),
        Command::TrainEmbeddings(a) => train_embeddings_cmd(cfg, a),
        Command::TrainHead(a) => train_head(cfg, a),
        Command::Distill(a) => distill(cfg, a),
        Command::Predict(a) => predict(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Bench(a) => bench(cfg, a),
        Command::Sweep(a) => sweep(cfg, a),
    }
}

fn finish(cfg: &PipelineConfig) -> CliResult<()> {
    cfg.validate()?;
    Ok(())
}

/// Clip ids become file names, so they must not name other directories.
fn check_id(id: &str) -> CliResult<()> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']) {
        return Err(CliError::Data(format!("clip id {id:?} cannot be used as a file name")));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| stsg::Error::io(dir, e).into())
}

fn dir_sidecar(cfg: &PipelineConfig, dir: &Path) -> CliResult<()> {
    write_atomic(&dir.join(SIDECAR), cfg.to_toml().as_bytes())?;
    Ok(())
}

/// `(clip_id, path)` for every requested clip.
fn clip_list(input: &ClipInput) -> CliResult<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if let Some(m) = &input.manifest {
        let manifest = DatasetManifest::read(m)?;
        out.extend(manifest.entries.into_iter().map(|e| (e.clip_id, e.path)));
    }
    for p in &input.audio {
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((id, p.clone()));
    }
    if out.is_empty() {
        return Err(CliError::Usage("no input clips: pass --manifest or audio files".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for (id, _) in &out {
        check_id(id)?;
        if !seen.insert(id.clone()) {
            return Err(CliError::Data(format!("duplicate clip id {id:?}")));
        }
    }
    Ok(out)
}

fn load_clip(id: &str, path: &Path, cfg: &PipelineConfig) -> CliResult<AudioClip> {
    let mut clip = load_audio(path, cfg.spectrogram.sample_rate)?;
    clip.id = id.to_string();
    Ok(clip)
}

fn mel_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.mel.stsg"))
}

fn token_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.stsk"))
}

/// Reads a manifest and, when nothing is marked for training, assigns a
/// stratified train/val split.
fn read_manifest(path: &Path, cfg: &PipelineConfig) -> CliResult<DatasetManifest> {
    let m = DatasetManifest::read(path)?;
    if m.split(Split::Train).next().is_some() {
        return Ok(m);
    }
    Ok(stratified_split(&m, cfg.eval.split_ratio, cfg.seed)?)
}

/// Normalized Mel frames for each entry, from the feature directory or the
/// audio.
fn manifest_mels(
    manifest: &DatasetManifest,
    features: Option<&Path>,
    cfg: &PipelineConfig,
) -> CliResult<Vec<MelFrameMatrix>> {
    let ex = MelExtractor::new(cfg.spectrogram.clone())?;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            check_id(&e.clip_id)?;
            match features {
                Some(dir) => {
                    let mel: MelFrameMatrix = load_object(&mel_path(dir, &e.clip_id))?;
                    if mel.n_mels() != cfg.spectrogram.n_mels || mel.frames_per_second != cfg.spectrogram.frames_per_second() {
                        return Err(CliError::Data(format!(
                            "{}: features do not match the configured spectrogram",
                            e.clip_id
                        )));
                    }
                    Ok(if mel.normalized { mel } else { normalize_frames(mel) })
                }
                None => Ok(ex.features(&load_clip(&e.clip_id, &e.path, cfg)?)?),
            }
        })
        .collect()
}

fn featurize(cfg: PipelineConfig, a: FeaturizeArgs) -> CliResult<()> {
    finish(&cfg)?;
    let clips = clip_list(&a.input)?;
    let ex = MelExtractor::new(cfg.spectrogram.clone())?;
    create_dir(&a.out_dir)?;
    clips.par_iter().try_for_each(|(id, path)| -> CliResult<()> {
        let mel = ex.features(&load_clip(id, path, &cfg)?)?;
        save_object(&mel, &mel_path(&a.out_dir, id))?;
        Ok(())
    })?;
    dir_sidecar(&cfg, &a.out_dir)?;
    println!("{}", json!({ "clips": clips.len(), "out_dir": a.out_dir }));
    Ok(())
}

fn train_frames(manifest: &DatasetManifest, mels: &[MelFrameMatrix]) -> CliResult<Array2<f64>> {
    Ok(stack_rows(
        manifest
            .entries
            .iter()
            .zip(mels)
            .filter(|(e, _)| e.split == Split::Train)
            .map(|(_, m)| m.frames.view()),
    )?)
}

fn fit_pca_cmd(mut cfg: PipelineConfig, a: FitPcaArgs) -> CliResult<()> {
    if let Some(k) = a.k {
        cfg.pca_k = k;
    }
    if let Some(n) = a.max_rows {
        cfg.pca_max_rows = n;
    }
    finish(&cfg)?;
    let manifest = read_manifest(&a.data.manifest, &cfg)?;
    let mels = manifest_mels(&manifest, a.data.features.as_deref(), &cfg)?;
    let frames = train_frames(&manifest, &mels)?;
    let sample = if cfg.pca_max_rows == 0 { frames } else { subsample_rows(frames.view(), cfg.pca_max_rows, cfg.seed) };
    let pca = fit_pca(sample.view(), cfg.pca_k, cfg.seed)?;
    save_object(&pca, &a.out)?;
    cfg.write_sidecar(&a.out)?;
    println!(
        "{}",
        json!({ "k": cfg.pca_k, "rows": sample.nrows(), "cumulative_variance": pca.cumulative_ratio() })
    );
    Ok(())
}

fn fit_codebook(mut cfg: PipelineConfig, a: FitCodebookArgs) -> CliResult<()> {
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v;
    }
    if let Some(n) = a.max_iters {
        cfg.kmeans_max_iters = n;
    }
    if let Some(n) = a.max_rows {
        cfg.kmeans_max_rows = n;
    }
    let pca: PcaModel = load_object(&a.pca)?;
    cfg.pca_k = pca.k();
    finish(&cfg)?;
    let manifest = read_manifest(&a.data.manifest, &cfg)?;
    let mels = manifest_mels(&manifest, a.data.features.as_deref(), &cfg)?;
    let reduced = pca.transform(train_frames(&manifest, &mels)?.view())?;
    let data = if cfg.kmeans_max_rows == 0 {
        reduced
    } else {
        subsample_rows(reduced.view(), cfg.kmeans_max_rows, cfg.seed)
    };
    let book = fit_kmeans(data.view(), cfg.vocab_size, cfg.kmeans_max_iters, cfg.seed)?;
    save_object(&book, &a.out)?;
    cfg.write_sidecar(&a.out)?;
    println!(
        "{}",
        json!({ "vocab_size": book.vocab_size(), "rows": data.nrows(), "iterations": book.iterations_run, "objective": book.final_objective })
    );
    Ok(())
}

fn load_tokenizer(cfg: &mut PipelineConfig, pca: &Path, codebook: &Path) -> CliResult<Tokenizer> {
    let pca: PcaModel = load_object(pca)?;
    let book: Codebook = load_object(codebook)?;
    cfg.pca_k = pca.k();
    cfg.vocab_size = book.vocab_size();
    finish(cfg)?;
    Ok(Tokenizer::new(cfg.spectrogram.clone(), pca, book)?)
}

fn tokenize(mut cfg: PipelineConfig, a: TokenizeArgs) -> CliResult<()> {
    let tok = load_tokenizer(&mut cfg, &a.pca, &a.codebook)?;
    let clips = clip_list(&a.input)?;
    create_dir(&a.out_dir)?;
    let vocab_size = tok.codebook.vocab_size() as u32;
    let counts: Vec<usize> = clips
        .par_iter()
        .map(|(id, path)| -> CliResult<usize> {
            let cached = a.features.as_ref().map(|d| mel_path(d, id)).filter(|p| p.exists());
            let sequence = match cached {
                Some(p) => tok.tokenize_mel(id, &load_object(&p)?)?,
                None => tok.tokenize(&load_clip(id, path, &cfg)?)?,
            };
            let n = sequence.tokens.len();
            TokenFile { sequence, vocab_size }.save(&token_path(&a.out_dir, id))?;
            Ok(n)
        })
        .collect::<CliResult<_>>()?;
    dir_sidecar(&cfg, &a.out_dir)?;
    println!(
        "{}",
        json!({ "clips": clips.len(), "tokens": counts.iter().sum::<usize>(), "out_dir": a.out_dir })
    );
    Ok(())
}

/// Token files in `dir`, sorted by clip id, optionally restricted to `ids`.
fn read_token_dir(dir: &Path, ids: Option<&[String]>) -> CliResult<Vec<TokenFile>> {
    let files: Vec<TokenFile> = match ids {
        Some(ids) => ids
            .iter()
            .map(|id| Ok(TokenFile::load(&token_path(dir, id))?))
            .collect::<CliResult<_>>()?,
        None => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| stsg::Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "stsk"))
                .collect();
            paths.sort();
            paths.iter().map(|p| Ok(TokenFile::load(p)?)).collect::<CliResult<_>>()?
        }
    };
    if files.is_empty() {
        return Err(CliError::Data(format!("no token files in {}", dir.display())));
    }
    let v = files[0].vocab_size;
    if let Some(f) = files.iter().find(|f| f.vocab_size != v) {
        return Err(CliError::Data(format!(
            "{}: vocabulary size {} differs from {v}",
            f.sequence.clip_id, f.vocab_size
        )));
    }
    Ok(files)
}

fn train_embeddings_cmd(mut cfg: PipelineConfig, a: TrainEmbeddingsArgs) -> CliResult<()> {
    let s = &mut cfg.sgns;
    if let Some(v) = a.vector_size {
        s.vector_size = v;
    }
    if let Some(v) = a.window {
        s.window = v;
    }
    if let Some(v) = a.negative {
        s.negative = v;
    }
    if let Some(v) = a.ns_exponent {
        s.ns_exponent = v;
    }
    if let Some(v) = a.sample {
        s.sample = v;
    }
    if let Some(v) = a.epochs {
        s.epochs = v;
    }
    let ids: Option<Vec<String>> = match &a.manifest {
        Some(m) => Some(read_manifest(m, &cfg)?.split(Split::Train).map(|e| e.clip_id.clone()).collect()),
        None => None,
    };
    let files = read_token_dir(&a.tokens, ids.as_deref())?;
    cfg.vocab_size = files[0].vocab_size as usize;
    finish(&cfg)?;
    let corpus: Vec<TokenSequence> = files.into_iter().map(|f| f.sequence).collect();
    let (table, report) = train_embeddings(&corpus, cfg.vocab_size, &cfg.sgns)?;
    save_object(&table, &a.out)?;
    cfg.write_sidecar(&a.out)?;
    println!(
        "{}",
        json!({ "sequences": corpus.len(), "vector_size": table.dim(), "epoch_loss": report.epoch_loss })
    );
    Ok(())
}

fn apply_train(t: &mut TrainConfig, o: &TrainOverrides) {
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
}

/// Token sequences and class ids for one split.
fn labelled_split(
    manifest: &DatasetManifest,
    tokens: &Path,
    which: Split,
    labels: &[String],
) -> CliResult<(Vec<TokenSequence>, Vec<usize>)> {
    let entries: Vec<_> = manifest.split(which).collect();
    let ids: Vec<String> = entries.iter().map(|e| e.clip_id.clone()).collect();
    if ids.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let seqs = read_token_dir(tokens, Some(&ids))?.into_iter().map(|f| f.sequence).collect();
    let y = entries
        .iter()
        .map(|e| {
            labels
                .binary_search(&e.label)
                .map_err(|_| CliError::Data(format!("label {:?} unknown to the classifier", e.label)))
        })
        .collect::<CliResult<_>>()?;
    Ok((seqs, y))
}

fn train_head(mut cfg: PipelineConfig, a: TrainHeadArgs) -> CliResult<()> {
    if let Some(h) = a.hidden {
        cfg.head_hidden = h;
    }
    apply_train(&mut cfg.head, &a.train);
    finish(&cfg)?;
    let manifest = read_manifest(&a.manifest, &cfg)?;
    let labels = manifest.labels();
    let table: EmbeddingTable = load_object(&a.embeddings)?;
    let (train, y) = labelled_split(&manifest, &a.tokens, Split::Train, &labels)?;
    let (val, vy) = labelled_split(&manifest, &a.tokens, Split::Val, &labels)?;
    let validation = (!val.is_empty()).then_some((val.as_slice(), vy.as_slice()));
    let fs = cfg.eval.frame_seconds;
    let classifier = train_classifier(&table, &train, &y, &labels, validation, cfg.head_hidden, &cfg.head, fs)?;
    save_object(&classifier, &a.out)?;
    cfg.write_sidecar(&a.out)?;
    let train_report = evaluate_classifier(&table, &classifier, &train, &y, fs)?;
    let mut summary = json!({ "classes": labels.len(), "train_macro_f1": train_report.macro_f1 });
    if !val.is_empty() {
        summary["val_macro_f1"] = json!(evaluate_classifier(&table, &classifier, &val, &vy, fs)?.macro_f1);
    }
    println!("{summary}");
    Ok(())
}

fn read_teacher(path: &Path) -> CliResult<KeyedMatrix> {
    if path.extension().is_none_or(|x| x != "csv") {
        return Ok(load_object(path)?);
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut fields = rec.iter();
        ids.push(fields.next().unwrap_or_default().to_string());
        let row: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Data(format!("{} row {}: {e}", path.display(), n + 2)))?;
        if *width.get_or_insert(row.len()) != row.len() || row.is_empty() {
            return Err(CliError::Data(format!("{} row {}: ragged or empty row", path.display(), n + 2)));
        }
        data.extend(row);
    }
    let w = width.ok_or_else(|| CliError::Data(format!("{}: no rows", path.display())))?;
    let m = KeyedMatrix {
        values: Array2::from_shape_vec((ids.len(), w), data).expect("rows of equal width"),
        ids,
    };
    m.check_invariants()?;
    Ok(m)
}

fn distill(mut cfg: PipelineConfig, a: DistillArgs) -> CliResult<()> {
    apply_train(&mut cfg.student.train, &a.train);
    if let Some(t) = a.temperature {
        cfg.student.temperature = t;
    }
    let init: Option<EmbeddingTable> = a.init_embeddings.as_deref().map(load_object).transpose()?;
    if let Some(table) = &init {
        cfg.student.init_from_sgns = true;
        cfg.student.embed_dim = table.dim();
    }
    let files = read_token_dir(&a.tokens, None)?;
    cfg.vocab_size = files[0].vocab_size as usize;
    finish(&cfg)?;
    let teacher = read_teacher(&a.teacher)?;
    let per_frame = tokens_per_frame(cfg.spectrogram.frames_per_second(), cfg.eval.frame_seconds)?;
    let rows: HashMap<&str, usize> = teacher.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    let (mut tokens, mut targets, mut unmatched) = (Vec::new(), Vec::new(), 0usize);
    for f in &files {
        for (k, chunk) in f.sequence.tokens.chunks_exact(per_frame).enumerate() {
            match rows.get(format!("{}#{k}", f.sequence.clip_id).as_str()) {
                Some(&r) => {
                    tokens.extend_from_slice(chunk);
                    targets.push(r);
                }
                None => unmatched += 1,
            }
        }
    }
    if targets.is_empty() {
        return Err(CliError::Data("no token frame has a teacher row (ids are <clip_id>#<frame_index>)".into()));
    }
    let tokens = Array2::from_shape_vec((targets.len(), per_frame), tokens).expect("whole frames");
    let teacher_rows = teacher.values.select(ndarray::Axis(0), &targets);
    let arch = cfg.student.arch(cfg.vocab_size, teacher.values.ncols());
    let (model, report) = train_student(tokens.view(), teacher_rows.view(), arch, &cfg.student.train, init.as_ref())?;
    save_object(&model, &a.out)?;
    cfg.write_sidecar(&a.out)?;
    println!(
        "{}",
        json!({ "frames": targets.len(), "frames_without_teacher": unmatched, "report": report })
    );
    Ok(())
}

fn load_model(cfg: &mut PipelineConfig, m: &ModelArgs) -> CliResult<StsgClassifier> {
    let tok = load_tokenizer(cfg, &m.pca, &m.codebook)?;
    let table: EmbeddingTable = load_object(&m.embeddings)?;
    let classifier: Classifier = load_object(&m.classifier)?;
    Ok(StsgClassifier::new(tok, table, classifier, cfg.eval.frame_seconds)?)
}

fn output(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| stsg::Error::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn predict(mut cfg: PipelineConfig, a: PredictArgs) -> CliResult<()> {
    if let Some(k) = a.top_k {
        cfg.eval.top_k = k;
    }
    let model = load_model(&mut cfg, &a.model)?;
    let clips = clip_list(&a.input)?;
    let rows: Vec<String> = clips
        .par_iter()
        .map(|(id, path)| -> CliResult<Vec<String>> {
            let preds = model.predict(&load_clip(id, path, &cfg)?, cfg.eval.top_k)?;
            Ok(preds
                .iter()
                .map(|p| {
                    let scores: Vec<_> = p.top_k.iter().map(|(l, s)| json!({ "label": l, "score": s })).collect();
                    json!({ "clip_id": p.clip_id, "frame_index": p.frame_index, "top_k": scores }).to_string()
                })
                .collect())
        })
        .collect::<CliResult<Vec<_>>>()?
        .concat();
    let mut text = rows.join("\n");
    text.push('\n');
    output(a.out.as_deref(), &text)?;
    if let Some(p) = &a.out {
        cfg.write_sidecar(p)?;
    }
    Ok(())
}

fn eval(cfg: PipelineConfig, a: EvalArgs) -> CliResult<()> {
    finish(&cfg)?;
    let manifest = read_manifest(&a.manifest, &cfg)?;
    let table: EmbeddingTable = load_object(&a.embeddings)?;
    let classifier: Classifier = load_object(&a.classifier)?;
    let which = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let (seqs, y) = labelled_split(&manifest, &a.tokens, which, &classifier.labels)?;
    if seqs.is_empty() {
        return Err(CliError::Data(format!("the {which:?} split is empty")));
    }
    let report = evaluate_classifier(&table, &classifier, &seqs, &y, cfg.eval.frame_seconds)?;
    let text = match a.format {
        Format::Table => report.to_table(),
        Format::Json => report.to_json() + "\n",
        Format::Csv => report.to_csv(),
    };
    output(a.out.as_deref(), &text)?;
    if let Some(p) = &a.out {
        cfg.write_sidecar(p)?;
    }
    Ok(())
}

fn bench(mut cfg: PipelineConfig, a: BenchArgs) -> CliResult<()> {
    if let Some(n) = a.n_projection {
        cfg.eval.n_projection = n;
    }
    if let Some(b) = a.budget {
        cfg.eval.budget_seconds = b;
    }
    let model = load_model(&mut cfg, &a.model)?;
    let clips = clip_list(&a.input)?
        .iter()
        .map(|(id, path)| load_clip(id, path, &cfg))
        .collect::<CliResult<Vec<_>>>()?;
    let report = bench_inference(
        &clips,
        |c| c.id.clone(),
        |c| model.frame_probabilities(c),
        cfg.eval.n_projection,
        cfg.eval.budget_seconds,
    )?;
    let text = match a.format {
        Format::Json => report.to_json() + "\n",
        _ => report.to_table(),
    };
    output(None, &text)?;
    if !report.within_budget {
        return Err(CliError::Budget(format!(
            "projected {:.1} s for {} files exceeds the {:.1} s budget",
            report.projected_total_seconds, report.n_projection, report.budget_seconds
        )));
    }
    Ok(())
}

const SWEEP_AXES: [&str; 5] = ["vector_size", "window", "ns_exponent", "sample", "vocab_size"];

/// Parses `name=v1,v2,...`.
fn parse_axis(spec: &str) -> CliResult<(String, Vec<f64>)> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("axis {spec:?} is not NAME=V1,V2,...")))?;
    let name = name.trim();
    if !SWEEP_AXES.contains(&name) {
        return Err(CliError::Usage(format!("unknown axis {name:?}; expected one of {}", SWEEP_AXES.join(", "))));
    }
    let values: Vec<f64> = values
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("axis {name}: {e}")))?;
    let integral = !matches!(name, "ns_exponent" | "sample");
    if values.is_empty() || (integral && values.iter().any(|v| v.fract() != 0.0 || *v < 1.0)) {
        return Err(CliError::Usage(format!("axis {name}: values must be positive integers")));
    }
    Ok((name.to_string(), values))
}

/// Every combination, first axis varying slowest.
fn grid(axes: &[(String, Vec<f64>)]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |cells, (_, values)| {
        cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |&v| {
                    let mut c = c.clone();
                    c.push(v);
                    c
                })
            })
            .collect()
    })
}

fn cell_config(base: &PipelineConfig, axes: &[(String, Vec<f64>)], cell: &[f64]) -> PipelineConfig {
    let mut cfg = base.clone();
    for ((name, _), &v) in axes.iter().zip(cell) {
        match name.as_str() {
            "vector_size" => cfg.sgns.vector_size = v as usize,
            "window" => cfg.sgns.window = v as usize,
            "ns_exponent" => cfg.sgns.ns_exponent = v,
            "sample" => cfg.sgns.sample = v,
            "vocab_size" => cfg.vocab_size = v as usize,
            _ => unreachable!("axis names are checked on parse"),
        }
    }
    cfg
}

fn sweep(cfg: PipelineConfig, a: SweepArgs) -> CliResult<()> {
    let axes = a.axes.iter().map(|s| parse_axis(s)).collect::<CliResult<Vec<_>>>()?;
    if let Some(dup) = axes.iter().enumerate().find(|(i, (n, _))| axes[..*i].iter().any(|(m, _)| m == n)) {
        return Err(CliError::Usage(format!("axis {} given twice", dup.1 .0)));
    }
    let cells = grid(&axes);
    let configs: Vec<PipelineConfig> = cells.iter().map(|c| cell_config(&cfg, &axes, c)).collect();
    for c in &configs {
        finish(c)?;
    }
    let manifest = read_manifest(&a.data.manifest, &cfg)?;
    let mels = manifest_mels(&manifest, a.data.features.as_deref(), &cfg)?;
    let corpus = PreparedCorpus::build(&manifest, &mels, &cfg)?;

    let mut books: HashMap<usize, Codebook> = HashMap::new();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["cell".into()];
    header.extend(axes.iter().map(|(n, _)| n.clone()));
    header.extend(["f1_macro", "roc_auc", "seconds", "delta_f1_macro", "delta_roc_auc"].map(String::from));
    let csv_err = |e: csv::Error| CliError::Data(e.to_string());
    writer.write_record(&header).map_err(csv_err)?;
    let mut first: Option<(f64, Option<f64>)> = None;
    for (i, (cell, ccfg)) in cells.iter().zip(&configs).enumerate() {
        let t0 = Instant::now();
        let book = match books.entry(ccfg.vocab_size) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                e.insert(corpus.fit_codebook(ccfg.vocab_size, ccfg.kmeans_max_iters, ccfg.kmeans_max_rows, ccfg.seed)?)
            }
        };
        let out = run_cell(
            &corpus,
            book,
            &ccfg.sgns,
            &ccfg.head,
            ccfg.head_hidden,
            ccfg.eval.frame_seconds,
        )?;
        let seconds = t0.elapsed().as_secs_f64();
        let (f1, auc) = (out.report.macro_f1, out.report.roc_auc_macro);
        let (f1_0, auc_0) = *first.get_or_insert((f1, auc));
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut row = vec![i.to_string()];
        row.extend(cell.iter().map(|v| v.to_string()));
        row.extend([
            format!("{f1:.6}"),
            opt(auc),
            format!("{seconds:.3}"),
            format!("{:.6}", f1 - f1_0),
            opt(auc.zip(auc_0).map(|(x, y)| x - y)),
        ]);
        writer.write_record(&row).map_err(csv_err)?;
    }
    let bytes = writer.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&a.out, &bytes)?;
    cfg.write_sidecar(&a.out)?;
    output(None, &String::from_utf8_lossy(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        let (n, v) = parse_axis("vector_size=128,256,384,512,1024").unwrap();
        assert_eq!(n, "vector_size");
        assert_eq!(v.len(), 5);
        assert_eq!(parse_axis("ns_exponent=-0.75,0,0.75").unwrap().1, vec![-0.75, 0.0, 0.75]);
        for bad in ["vector_size", "depth=1,2", "window=1.5", "vocab_size=0", "sample=x"] {
            assert!(matches!(parse_axis(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn grid_order() {
        let axes = vec![("window".to_string(), vec![5.0, 10.0]), ("sample".to_string(), vec![1e-3, 1e-4, 1e-5])];
        let g = grid(&axes);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], vec![5.0, 1e-3]);
        assert_eq!(g[1], vec![5.0, 1e-4]);
        assert_eq!(g[3], vec![10.0, 1e-3]);
        let c = cell_config(&PipelineConfig::default(), &axes, &g[4]);
        assert_eq!((c.sgns.window, c.sgns.sample), (10, 1e-4));
    }

    #[test]
    fn ids_must_be_file_names() {
        assert!(check_id("XC1234").is_ok());
        for bad in ["", "..", "a/b", "a\\b"] {
            assert!(check_id(bad).is_err(), "{bad:?}");
        }
    }
}
