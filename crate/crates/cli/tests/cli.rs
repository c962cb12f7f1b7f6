use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use serde_json::Value;
use stsg::codebook::Codebook;
use stsg::dsp::{synth_clip, write_wav_pcm16, MelExtractor, SpectrogramConfig, Tone};
use stsg::reduce::fit_pca;
use stsg::store::{save_object, TokenFile};
use stsg::synth::{default_motifs, motif_corpus};

const SMALL: &str = r#"
seed = 3
pca_k = 16
vocab_size = 64

[sgns]
vector_size = 16
window = 5
epochs = 20
sample = 1e-3

head_hidden = 32

[head]
epochs = 40
batch_size = 16
"#;

fn stsg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stsg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stsg(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("{last:?}: {e}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three motif classes, six 10 s clips each, as WAV files plus a manifest
/// with no splits assigned.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clips = motif_corpus(&default_motifs(), 6, 10.0, 0.02, 32_000, 5).unwrap();
        let mut manifest = String::new();
        std::fs::create_dir(dir.path().join("audio")).unwrap();
        for c in &clips {
            write_wav_pcm16(dir.path().join("audio").join(format!("{}.wav", c.clip.id)), &c.clip).unwrap();
            manifest.push_str(&format!(
                "{{\"clip_id\":\"{}\",\"path\":\"audio/{}.wav\",\"label\":\"{}\"}}\n",
                c.clip.id, c.clip.id, c.label
            ));
        }
        std::fs::write(dir.path().join("manifest.jsonl"), manifest).unwrap();
        std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs the stages up to trained embeddings and classifier.
    fn train(&self) {
        let (cfg, m) = (self.p("small.toml"), self.p("manifest.jsonl"));
        let (feat, pca, book, tok, emb, clf) =
            (self.p("features"), self.p("pca.stsg"), self.p("codebook.stsg"), self.p("tokens"), self.p("emb.stsg"), self.p("clf.stsg"));
        ok(&["featurize", "--config", s(&cfg), "--manifest", s(&m), "--out-dir", s(&feat)]);
        ok(&["fit-pca", "--config", s(&cfg), "--manifest", s(&m), "--features", s(&feat), "--out", s(&pca)]);
        ok(&["fit-codebook", "--config", s(&cfg), "--manifest", s(&m), "--features", s(&feat), "--pca", s(&pca), "--out", s(&book)]);
        ok(&["tokenize", "--config", s(&cfg), "--manifest", s(&m), "--features", s(&feat), "--pca", s(&pca), "--codebook", s(&book), "--out-dir", s(&tok)]);
        ok(&["train-embeddings", "--config", s(&cfg), "--tokens", s(&tok), "--manifest", s(&m), "--out", s(&emb)]);
        ok(&["train-head", "--config", s(&cfg), "--manifest", s(&m), "--tokens", s(&tok), "--embeddings", s(&emb), "--out", s(&clf)]);
    }

    fn model_args(&self) -> Vec<String> {
        ["pca", "codebook", "embeddings", "classifier"]
            .iter()
            .zip(["pca.stsg", "codebook.stsg", "emb.stsg", "clf.stsg"])
            .flat_map(|(flag, file)| [format!("--{flag}"), self.p(file).to_string_lossy().into_owned()])
            .collect()
    }
}

#[test]
fn staged_pipeline_end_to_end() {
    let fx = Fixture::new();
    fx.train();
    let cfg = fx.p("small.toml");
    for sidecar in ["pca.stsg.config.toml", "codebook.stsg.config.toml", "emb.stsg.config.toml", "clf.stsg.config.toml", "tokens/config.toml"] {
        assert!(fx.p(sidecar).exists(), "{sidecar}");
    }
    let tokens = TokenFile::load(&fx.p("tokens/whistle-000.stsk")).unwrap();
    assert_eq!(tokens.sequence.tokens.len(), 80);
    assert_eq!(tokens.vocab_size, 64);

    let report: Value = serde_json::from_str(&ok(&[
        "eval", "--config", s(&cfg), "--manifest", s(&fx.p("manifest.jsonl")), "--tokens", s(&fx.p("tokens")),
        "--embeddings", s(&fx.p("emb.stsg")), "--classifier", s(&fx.p("clf.stsg")), "--format", "json",
    ]))
    .unwrap();
    assert!(report["macro_f1"].as_f64().unwrap() >= 0.8, "{report}");
    assert_eq!(report["per_class"].as_array().unwrap().len(), 3);

    let mut args: Vec<String> = vec!["predict".into(), "--config".into(), s(&cfg).into(), "--top-k".into(), "2".into()];
    args.extend(fx.model_args());
    args.push(s(&fx.p("audio/trill-001.wav")).into());
    let out = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let rows: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["clip_id"], "trill-001");
    assert_eq!(rows[1]["frame_index"], 1);
    assert_eq!(rows[0]["top_k"].as_array().unwrap().len(), 2);

    let bench = |budget: &str| {
        let mut a: Vec<String> = vec!["bench".into(), "--config".into(), s(&cfg).into(), "--format".into(), "json".into(), "--budget".into(), budget.into()];
        a.extend(fx.model_args());
        a.push(s(&fx.p("audio/hoot-000.wav")).into());
        stsg(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let fast = bench("5400");
    assert!(fast.status.success());
    let timing: Value = serde_json::from_slice(&fast.stdout).unwrap();
    assert_eq!(timing["n_projection"], 700);
    assert_eq!(timing["within_budget"], true);
    let slow = bench("1e-9");
    assert_eq!(slow.status.code(), Some(3));
    assert_eq!(error_line(&slow)["code"], 3);
}

#[test]
fn stages_are_deterministic() {
    let fx = Fixture::new();
    fx.train();
    let first: Vec<Vec<u8>> = ["codebook.stsg", "emb.stsg", "clf.stsg"].iter().map(|f| std::fs::read(fx.p(f)).unwrap()).collect();
    fx.train();
    let second: Vec<Vec<u8>> = ["codebook.stsg", "emb.stsg", "clf.stsg"].iter().map(|f| std::fs::read(fx.p(f)).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let fx = Fixture::new();
    let out = fx.p("sweep.csv");
    let stdout = ok(&[
        "sweep", "--config", s(&fx.p("small.toml")), "--manifest", s(&fx.p("manifest.jsonl")),
        "--axis", "vector_size=4,8,12,16,24", "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(stdout, text);
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["cell", "vector_size", "f1_macro", "roc_auc", "seconds", "delta_f1_macro", "delta_roc_auc"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(&rows[0][5], "0.000000");
    assert_eq!(&rows[4][1], "24");
    assert!(fx.p("sweep.csv.config.toml").exists());
}

#[test]
fn sweep_grid_over_two_axes() {
    let fx = Fixture::new();
    let out = fx.p("grid.csv");
    ok(&[
        "sweep", "--config", s(&fx.p("small.toml")), "--manifest", s(&fx.p("manifest.jsonl")),
        "--axis", "vocab_size=16,64", "--axis", "ns_exponent=-0.75,0.75", "--out", s(&out),
    ]);
    let rows: Vec<csv::StringRecord> =
        csv::Reader::from_path(&out).unwrap().records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!((&rows[1][1], &rows[1][2]), ("16", "0.75"));
}

#[test]
fn tokenize_default_config_gives_eight_tokens_per_second() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SpectrogramConfig::default();
    let tones: Vec<Tone> = (0..60)
        .map(|i| Tone { start: i as f64, duration: 0.5, frequency: 400.0 + 130.0 * i as f64, amplitude: 0.3 })
        .collect();
    let clip = synth_clip("long", &tones, 0.05, spec.sample_rate, 60.0, 1).unwrap();
    write_wav_pcm16(dir.path().join("long.wav"), &clip).unwrap();
    let mel = MelExtractor::new(spec).unwrap().features(&clip).unwrap();
    let pca = fit_pca(mel.frames.view(), 128, 0).unwrap();
    let reduced = pca.transform(mel.frames.view()).unwrap();
    let centroids = Array2::from_shape_fn((16_384, 128), |(i, j)| reduced[[i % reduced.nrows(), j]] + (i / 480) as f64);
    save_object(&pca, &dir.path().join("pca.stsg")).unwrap();
    save_object(&Codebook::from_centroids(centroids).unwrap(), &dir.path().join("book.stsg")).unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    ok(&["tokenize", "--pca", &p("pca.stsg"), "--codebook", &p("book.stsg"), "--out-dir", &p("tok"), &p("long.wav")]);
    let tokens = TokenFile::load(&dir.path().join("tok/long.stsk")).unwrap();
    assert_eq!(tokens.sequence.tokens.len(), 480);
    assert_eq!(tokens.vocab_size, 16_384);
}

#[test]
fn distill_from_csv_teacher() {
    let fx = Fixture::new();
    fx.train();
    let mut csv = String::from("id,whistle,trill,hoot\n");
    for entry in std::fs::read_dir(fx.p("tokens")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|x| x == "stsk") {
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            let logits = match id.split('-').next().unwrap() {
                "whistle" => "4,0,0",
                "trill" => "0,4,0",
                _ => "0,0,4",
            };
            for k in 0..2 {
                csv.push_str(&format!("{id}#{k},{logits}\n"));
            }
        }
    }
    std::fs::write(fx.p("teacher.csv"), csv).unwrap();
    let cfg = format!("{SMALL}\n[student]\nembed_dim = 8\nchannels = 8\nhidden = 8\n[student.train]\nepochs = 3\nbatch_size = 8\n");
    std::fs::write(fx.p("student.toml"), cfg).unwrap();
    let out = ok(&[
        "distill", "--config", s(&fx.p("student.toml")), "--tokens", s(&fx.p("tokens")),
        "--teacher", s(&fx.p("teacher.csv")), "--init-embeddings", s(&fx.p("emb.stsg")), "--out", s(&fx.p("student.stsg")),
    ]);
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["frames"], 36);
    assert_eq!(summary["frames_without_teacher"], 0);
    assert_eq!(summary["report"]["epoch_train_loss"].as_array().unwrap().len(), 3);
    assert_eq!(stsg::store::peek_kind(&fx.p("student.stsg")).unwrap(), "student");

    std::fs::write(fx.p("stranger.csv"), "id,a,b,c\nnobody#0,1,2,3\n").unwrap();
    let out = stsg(&[
        "distill", "--config", s(&fx.p("student.toml")), "--tokens", s(&fx.p("tokens")),
        "--teacher", s(&fx.p("stranger.csv")), "--out", s(&fx.p("x.stsg")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_and_error_lines() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();

    let out = stsg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "usage");

    let out = stsg(&["fit-pca", "--manifest", &p("missing.jsonl"), "--out", &p("pca.stsg")]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "data");

    std::fs::write(p("bad.toml"), "pca_k = 4000\n").unwrap();
    let out = stsg(&["fit-pca", "--config", &p("bad.toml"), "--manifest", &p("m.jsonl"), "--out", &p("pca.stsg")]);
    assert_eq!(out.status.code(), Some(1));

    let out = stsg(&["sweep", "--manifest", &p("m.jsonl"), "--axis", "depth=1,2", "--out", &p("s.csv")]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(p("garbage.stsg"), b"not a container").unwrap();
    let out = stsg(&["tokenize", "--pca", &p("garbage.stsg"), "--codebook", &p("garbage.stsg"), "--out-dir", &p("t"), &p("x.wav")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("magic"));

    assert!(stsg(&["--help"]).status.success());
}
