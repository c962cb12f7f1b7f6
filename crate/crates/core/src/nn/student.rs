//! Token-sequence CNN trained to match a teacher's logits.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::update;
use super::layers::{
    global_max_pool, global_max_pool_backward, relu, relu_backward, BatchNorm, BatchNormCache, Conv1d,
    Linear,
};
use super::loss::{kl_distill_loss, kl_rows};
use super::optim::{Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::sgns::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentArch {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub channels: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub kernel: usize,
    pub temperature: f64,
}

impl Default for StudentArch {
    fn default() -> Self {
        Self {
            vocab_size: 16384,
            embed_dim: 768,
            channels: 512,
            hidden: 512,
            n_classes: 10932,
            kernel: 3,
            temperature: 3.0,
        }
    }
}

impl StudentArch {
    pub fn validate(&self) -> Result<()> {
        if [self.vocab_size, self.embed_dim, self.channels, self.hidden, self.n_classes]
            .contains(&0)
        {
            return Err(Error::Config("student dimensions must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub arch: StudentArch,
    /// `vocab x embed_dim`
    pub embedding: Array2<f64>,
    pub conv: Conv1d,
    pub bn1: BatchNorm,
    pub proj: Linear,
    pub bn2: BatchNorm,
    pub head: Linear,
}

struct Cache {
    tokens: Array2<usize>,
    embedded: Array3<f64>,
    conv_pre: Array2<f64>,
    bn1: BatchNormCache,
    argmax: Array2<usize>,
    pooled: Array2<f64>,
    proj_pre: Array2<f64>,
    bn2: BatchNormCache,
    bn2_out: Array2<f64>,
}

struct Grads {
    embedding: Array2<f64>,
    conv_w: Array3<f64>,
    conv_b: ndarray::Array1<f64>,
    bn1_g: ndarray::Array1<f64>,
    bn1_b: ndarray::Array1<f64>,
    proj_w: Array2<f64>,
    proj_b: ndarray::Array1<f64>,
    bn2_g: ndarray::Array1<f64>,
    bn2_b: ndarray::Array1<f64>,
    head_w: Array2<f64>,
    head_b: ndarray::Array1<f64>,
}

impl StudentModel {
    /// Embedding rows drawn from N(0, 1)-like uniform noise of unit variance,
    /// other layers with fan-in uniform initialization.
    pub fn new(arch: StudentArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 3f64.sqrt();
        let embedding = super::layers::uniform((arch.vocab_size, arch.embed_dim), bound, &mut rng);
        Ok(Self {
            arch,
            embedding,
            conv: Conv1d::new(arch.embed_dim, arch.channels, arch.kernel, &mut rng)?,
            bn1: BatchNorm::new(arch.channels),
            proj: Linear::new(arch.channels, arch.hidden, &mut rng),
            bn2: BatchNorm::new(arch.hidden),
            head: Linear::new(arch.hidden, arch.n_classes, &mut rng),
        })
    }

    /// Copies the input vectors of a trained embedding table into the token
    /// embedding.
    pub fn init_embedding_from(&mut self, table: &EmbeddingTable) -> Result<()> {
        if table.vocab_size() != self.arch.vocab_size || table.dim() != self.arch.embed_dim {
            return Err(Error::shape(
                format!("{}x{}", self.arch.vocab_size, self.arch.embed_dim),
                format!("{}x{}", table.vocab_size(), table.dim()),
            ));
        }
        self.embedding = table.input_vectors.mapv(f64::from);
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.arch.validate()?;
        let a = &self.arch;
        let ok = self.embedding.dim() == (a.vocab_size, a.embed_dim)
            && self.conv.weight.dim() == (a.kernel, a.embed_dim, a.channels)
            && self.bn1.features() == a.channels
            && self.proj.weight.dim() == (a.channels, a.hidden)
            && self.bn2.features() == a.hidden
            && self.head.weight.dim() == (a.hidden, a.n_classes);
        if !ok {
            return Err(Error::Data("student parameter shapes disagree with architecture".into()));
        }
        Ok(())
    }

    fn lookup(&self, tokens: ArrayView2<u16>) -> Result<(Array2<usize>, Array3<f64>)> {
        let (b, seq) = tokens.dim();
        if b == 0 || seq == 0 {
            return Err(Error::Data("student input needs at least one token per sequence".into()));
        }
        let idx = tokens.mapv(usize::from);
        if let Some(&bad) = idx.iter().find(|&&t| t >= self.arch.vocab_size) {
            return Err(Error::Data(format!(
                "token {bad} outside vocabulary of {}",
                self.arch.vocab_size
            )));
        }
        let mut emb = Array3::zeros((b, seq, self.arch.embed_dim));
        for ((bi, si), &t) in idx.indexed_iter() {
            emb.slice_mut(s![bi, si, ..]).assign(&self.embedding.row(t));
        }
        Ok((idx, emb))
    }

    fn run(&mut self, tokens: ArrayView2<u16>, mode: Mode) -> Result<(Array2<f64>, Cache)> {
        let (idx, embedded) = self.lookup(tokens)?;
        let (b, seq) = idx.dim();
        let conv_out = self.conv.forward(embedded.view())?;
        let conv_pre = conv_out
            .into_shape_with_order((b * seq, self.arch.channels))
            .expect("contiguous conv output");
        let act = relu(&conv_pre);
        let (norm1, bn1) = match mode {
            Mode::Train => self.bn1.forward_train(act.view()),
            Mode::Eval => self.bn1.forward_eval(act.view()),
        };
        let norm1 = norm1
            .into_shape_with_order((b, seq, self.arch.channels))
            .expect("contiguous bn output");
        let (pooled, argmax) = global_max_pool(norm1.view());
        let proj_pre = self.proj.forward(pooled.view())?;
        let act2 = relu(&proj_pre);
        let (bn2_out, bn2) = match mode {
            Mode::Train => self.bn2.forward_train(act2.view()),
            Mode::Eval => self.bn2.forward_eval(act2.view()),
        };
        let logits = self.head.forward(bn2_out.view())?;
        Ok((
            logits,
            Cache {
                tokens: idx,
                embedded,
                conv_pre,
                bn1,
                argmax,
                pooled,
                proj_pre,
                bn2,
                bn2_out,
            },
        ))
    }

    /// Logits for a `batch x seq` token matrix. Train mode normalizes with
    /// batch statistics and updates the running estimates.
    pub fn forward(&mut self, tokens: ArrayView2<u16>, mode: Mode) -> Result<Array2<f64>> {
        Ok(self.run(tokens, mode)?.0)
    }

    /// Inference with frozen running statistics.
    pub fn forward_eval(&self, tokens: ArrayView2<u16>) -> Result<Array2<f64>> {
        let mut frozen = self.clone();
        Ok(frozen.run(tokens, Mode::Eval)?.0)
    }

    fn backward(&self, cache: &Cache, grad_logits: ArrayView2<f64>) -> Grads {
        let (b, seq) = cache.tokens.dim();
        let (d_bn2, g_head) = self.head.backward(cache.bn2_out.view(), grad_logits);
        let (d_act2, g_bn2) = self.bn2.backward(&cache.bn2, d_bn2.view());
        let d_proj_pre = relu_backward(cache.proj_pre.view(), d_act2.view());
        let (d_pooled, g_proj) = self.proj.backward(cache.pooled.view(), d_proj_pre.view());
        let d_norm1 = global_max_pool_backward(&cache.argmax, seq, d_pooled.view())
            .into_shape_with_order((b * seq, self.arch.channels))
            .expect("contiguous pool gradient");
        let (d_act1, g_bn1) = self.bn1.backward(&cache.bn1, d_norm1.view());
        let d_conv = relu_backward(cache.conv_pre.view(), d_act1.view())
            .into_shape_with_order((b, seq, self.arch.channels))
            .expect("contiguous conv gradient");
        let (d_emb, g_conv) = self.conv.backward(cache.embedded.view(), d_conv.view());
        let mut embedding = Array2::zeros(self.embedding.dim());
        for ((bi, si), &t) in cache.tokens.indexed_iter() {
            let mut row = embedding.row_mut(t);
            row += &d_emb.slice(s![bi, si, ..]);
        }
        Grads {
            embedding,
            conv_w: g_conv.weight,
            conv_b: g_conv.bias,
            bn1_g: g_bn1.gamma,
            bn1_b: g_bn1.beta,
            proj_w: g_proj.weight,
            proj_b: g_proj.bias,
            bn2_g: g_bn2.gamma,
            bn2_b: g_bn2.beta,
            head_w: g_head.weight,
            head_b: g_head.bias,
        }
    }

    fn apply(&mut self, opt: &mut Optimizer, g: &Grads) {
        opt.begin_step();
        update(opt, 0, &mut self.embedding, &g.embedding);
        update(opt, 1, &mut self.conv.weight, &g.conv_w);
        update(opt, 2, &mut self.conv.bias, &g.conv_b);
        update(opt, 3, &mut self.bn1.gamma, &g.bn1_g);
        update(opt, 4, &mut self.bn1.beta, &g.bn1_b);
        update(opt, 5, &mut self.proj.weight, &g.proj_w);
        update(opt, 6, &mut self.proj.bias, &g.proj_b);
        update(opt, 7, &mut self.bn2.gamma, &g.bn2_g);
        update(opt, 8, &mut self.bn2.beta, &g.bn2_b);
        update(opt, 9, &mut self.head.weight, &g.head_w);
        update(opt, 10, &mut self.head.bias, &g.head_b);
    }

    /// Mean `KL(teacher || student)` at the model temperature, eval mode.
    pub fn mean_kl(&self, tokens: ArrayView2<u16>, teacher: ArrayView2<f64>) -> Result<f64> {
        let logits = self.forward_eval(tokens)?;
        if logits.dim() != teacher.dim() {
            return Err(Error::shape(format!("{:?}", logits.dim()), format!("{:?}", teacher.dim())));
        }
        Ok(kl_rows(logits.view(), teacher, self.arch.temperature).mean().unwrap_or(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentReport {
    pub train_sequences: usize,
    pub validation_sequences: usize,
    pub initial_validation_kl: Option<f64>,
    pub best_validation_kl: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epoch_train_loss: Vec<f64>,
}

/// Splits `0..n` into shuffled train and validation index sets with
/// `round(0.2 n)` validation items, keeping at least one training item.
pub(crate) fn holdout_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * 0.2).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Trains a student on `tokens` (`n x seq`) against one teacher logit row per
/// sequence. Returns the parameters with the lowest validation KL over a
/// seeded 80/20 split, or the final parameters when there is no validation
/// data.
pub fn train_student(
    tokens: ArrayView2<u16>,
    teacher: ArrayView2<f64>,
    arch: StudentArch,
    cfg: &TrainConfig,
    init: Option<&EmbeddingTable>,
) -> Result<(StudentModel, StudentReport)> {
    cfg.validate()?;
    if tokens.nrows() != teacher.nrows() {
        return Err(Error::Data(format!(
            "{} sequences but {} teacher logit rows",
            tokens.nrows(),
            teacher.nrows()
        )));
    }
    if teacher.ncols() != arch.n_classes {
        return Err(Error::shape(format!("{} teacher classes", arch.n_classes), format!("{}", teacher.ncols())));
    }
    let mut model = StudentModel::new(arch, cfg.seed)?;
    if let Some(table) = init {
        model.init_embedding_from(table)?;
    }
    let (train, val) = holdout_split(tokens.nrows(), cfg.seed);
    let val_tokens = tokens.select(Axis(0), &val);
    let val_teacher = teacher.select(Axis(0), &val);
    let score = |m: &StudentModel| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            m.mean_kl(val_tokens.view(), val_teacher.view()).map(Some)
        }
    };

    let mut report = StudentReport {
        train_sequences: train.len(),
        validation_sequences: val.len(),
        initial_validation_kl: score(&model)?,
        best_validation_kl: None,
        best_epoch: None,
        epoch_train_loss: Vec::new(),
    };
    let mut best: Option<StudentModel> = None;
    let mut stale = 0;
    let mut opt = Optimizer::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order = train.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // A single-row batch has no batch statistics; fold it into the previous one.
        let merged;
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
            merged = order[order.len() - cfg.batch_size - 1..].to_vec();
            *batches.last_mut().expect("previous batch") = &merged;
        }
        let mut total = 0.0;
        for batch in &batches {
            let bt = tokens.select(Axis(0), batch);
            let tt = teacher.select(Axis(0), batch);
            let (logits, cache) = model.run(bt.view(), Mode::Train)?;
            let (loss, grad) = kl_distill_loss(logits.view(), tt.view(), arch.temperature)?;
            total += loss * batch.len() as f64;
            let grads = model.backward(&cache, grad.view());
            model.apply(&mut opt, &grads);
        }
        report.epoch_train_loss.push(total / train.len().max(1) as f64);

        if let Some(kl) = score(&model)? {
            if report.best_validation_kl.is_none_or(|b| kl < b) {
                report.best_validation_kl = Some(kl);
                report.best_epoch = Some(epoch);
                best = Some(model.clone());
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok((best.unwrap_or(model), report))
}
