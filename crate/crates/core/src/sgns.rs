//! Skip-gram negative-sampling embeddings over token sequences.
//!
//! For a center token with input vector `w`, a true context token with output
//! vector `c` and `k` sampled negatives `c_1..c_k`, each positive pair
//! minimizes
//!
//! ```text
//! l = -log s(w.c) - sum_i log s(-w.c_i),    s(x) = 1 / (1 + e^-x)
//! ```
//!
//! Negatives are drawn from `P(c) = f(c)^a / sum f(c')^a` over the observed
//! vocabulary (`a` is `ns_exponent`; `a = 0` is uniform, `a < 0` favors rare
//! tokens). Before each pass a token is kept with probability
//! `min(1, sqrt(t / r) + t / r)`, where `r` is its relative frequency and `t`
//! the `sample` threshold.

use std::cell::Cell;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::TokenSequence;
use crate::error::{Error, Result};

/// Attempts at drawing a negative different from the positive context.
const NEGATIVE_REDRAWS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Single worker, bit-for-bit reproducible for a fixed seed.
    #[default]
    Deterministic,
    /// Sequence-sharded workers updating shared tables without locks.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgnsConfig {
    pub vector_size: usize,
    pub window: usize,
    pub negative: usize,
    pub ns_exponent: f64,
    pub sample: f64,
    pub min_count: u64,
    pub epochs: usize,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub seed: u64,
    pub mode: TrainingMode,
    /// Worker count in parallel mode; ignored when deterministic.
    pub workers: usize,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self {
            vector_size: 384,
            window: 80,
            negative: 5,
            ns_exponent: 0.0,
            sample: 1e-5,
            min_count: 1,
            epochs: 100,
            initial_lr: 0.025,
            final_lr: 1e-4,
            seed: 0,
            mode: TrainingMode::Deterministic,
            workers: 4,
        }
    }
}

impl SgnsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vector_size == 0 {
            return bad("vector_size must be positive");
        }
        if self.window == 0 {
            return bad("window must be >= 1");
        }
        if self.negative == 0 {
            return bad("negative must be >= 1");
        }
        if !(self.sample > 0.0 && self.sample <= 1.0) {
            return bad("sample must lie in (0, 1]");
        }
        if !self.ns_exponent.is_finite() {
            return bad("ns_exponent must be finite");
        }
        if !(self.initial_lr > self.final_lr && self.final_lr > 0.0) {
            return bad("need initial_lr > final_lr > 0");
        }
        if self.mode == TrainingMode::Parallel && self.workers == 0 {
            return bad("parallel mode needs at least one worker");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabStats {
    pub counts: Vec<u64>,
    pub total_tokens: u64,
    pub keep_prob: Vec<f64>,
    /// Tokens below `min_count`; never trained on or drawn as negatives.
    pub pruned: Vec<bool>,
}

impl VocabStats {
    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    /// Subsampling draw for one occurrence of `token`.
    #[inline]
    pub fn keep<R: Rng>(&self, token: usize, rng: &mut R) -> bool {
        !self.pruned[token] && {
            let p = self.keep_prob[token];
            p >= 1.0 || rng.random::<f64>() < p
        }
    }
}

/// `min(1, sqrt(t / r) + t / r)` for relative frequency `r`.
pub fn keep_probability(relative_freq: f64, sample: f64) -> f64 {
    if relative_freq <= 0.0 {
        return 1.0;
    }
    let ratio = sample / relative_freq;
    (ratio.sqrt() + ratio).min(1.0)
}

pub fn build_vocab(
    corpus: &[TokenSequence],
    vocab_size: usize,
    min_count: u64,
    sample: f64,
) -> Result<VocabStats> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut counts = vec![0u64; vocab_size];
    for seq in corpus {
        for &t in &seq.tokens {
            let slot = counts.get_mut(t as usize).ok_or_else(|| {
                Error::Data(format!(
                    "token {t} in clip {:?} exceeds vocabulary size {vocab_size}",
                    seq.clip_id
                ))
            })?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let keep_prob = counts
        .iter()
        .map(|&c| keep_probability(c as f64 / total as f64, sample))
        .collect();
    let pruned = counts.iter().map(|&c| c < min_count.max(1)).collect();
    Ok(VocabStats {
        counts,
        total_tokens: total,
        keep_prob,
        pruned,
    })
}

/// Vose alias table: O(1) draws from a fixed discrete distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    /// `weights` must be non-negative with a positive sum.
    pub fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![1.0; n];
        let mut alias: Vec<usize> = (0..n).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // leftovers are 1 up to rounding
        for i in small.into_iter().chain(large) {
            prob[i] = 1.0;
        }
        Self { prob, alias }
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    #[inline]
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if self.prob[i] >= 1.0 || rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSampler {
    /// `P(c)` over the whole vocabulary; zero for pruned or unseen tokens.
    pub probs: Vec<f64>,
    pub alpha: f64,
    support: Vec<u32>,
    table: AliasTable,
}

impl NegativeSampler {
    #[inline]
    pub fn draw<R: Rng>(&self, rng: &mut R) -> u32 {
        self.support[self.table.sample(rng)]
    }
}

pub fn build_negative_sampler(stats: &VocabStats, alpha: f64) -> Result<NegativeSampler> {
    let support: Vec<u32> = (0..stats.vocab_size())
        .filter(|&t| !stats.pruned[t] && stats.counts[t] > 0)
        .map(|t| t as u32)
        .collect();
    if support.is_empty() {
        return Err(Error::Data("every token is pruned".into()));
    }
    let weights: Vec<f64> = support
        .iter()
        .map(|&t| (stats.counts[t as usize] as f64).powf(alpha))
        .collect();
    let norm: f64 = weights.iter().sum();
    let mut probs = vec![0.0; stats.vocab_size()];
    for (&t, &w) in support.iter().zip(&weights) {
        probs[t as usize] = w / norm;
    }
    Ok(NegativeSampler {
        probs,
        alpha,
        table: AliasTable::new(&weights),
        support,
    })
}

/// `log s(x)` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_c: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// Loss and analytic gradients for one positive pair and its negatives.
pub fn sgns_pair_loss(w: &[f64], c: &[f64], negatives: &[&[f64]]) -> PairLoss {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos = dot(w, c);
    let mut loss = -log_sigmoid(pos);
    let g_pos = sigmoid(pos) - 1.0;
    let mut grad_w: Vec<f64> = c.iter().map(|v| g_pos * v).collect();
    let grad_c = w.iter().map(|v| g_pos * v).collect();
    let grad_negatives = negatives
        .iter()
        .map(|n| {
            let s = dot(w, n);
            loss -= log_sigmoid(-s);
            let g = sigmoid(s);
            grad_w.iter_mut().zip(n.iter()).for_each(|(gw, v)| *gw += g * v);
            w.iter().map(|v| g * v).collect()
        })
        .collect();
    PairLoss {
        loss,
        grad_w,
        grad_c,
        grad_negatives,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// `V x d` token embeddings.
    pub input_vectors: Array2<f32>,
    /// `V x d` context vectors; only needed to resume training.
    pub output_vectors: Option<Array2<f32>>,
    pub config: SgnsConfig,
}

impl EmbeddingTable {
    pub fn vocab_size(&self) -> usize {
        self.input_vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.input_vectors.ncols()
    }

    pub fn vector(&self, token: usize) -> ArrayView1<'_, f32> {
        self.input_vectors.row(token)
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (u, v) = (self.vector(a), self.vector(b));
        let dot: f64 = u.iter().zip(v.iter()).map(|(x, y)| *x as f64 * *y as f64).sum();
        let nu: f64 = u.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            0.0
        } else {
            dot / (nu * nv)
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.input_vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding".into()));
        }
        if let Some(out) = &self.output_vectors {
            if out.dim() != self.input_vectors.dim() || out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("context vectors inconsistent with embeddings".into()));
            }
        }
        Ok(())
    }
}

/// Row `i` is the embedding of `seq.tokens[i]`.
pub fn embed_tokens(table: &EmbeddingTable, seq: &TokenSequence) -> Result<Array2<f64>> {
    let (v, d) = table.input_vectors.dim();
    let mut out = Array2::zeros((seq.len(), d));
    for (mut row, &t) in out.rows_mut().into_iter().zip(&seq.tokens) {
        if t as usize >= v {
            return Err(Error::Data(format!(
                "token {t} out of range for a {v}-token table"
            )));
        }
        row.iter_mut()
            .zip(table.input_vectors.row(t as usize))
            .for_each(|(o, &x)| *o = x as f64);
    }
    Ok(out)
}

/// Per-epoch diagnostics from [`train_sgns`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub pairs_per_epoch: Vec<u64>,
}

/// Flat weight storage the pair kernel can read and update through `&self`.
trait Weights {
    fn get(&self, i: usize) -> f32;
    fn set(&self, i: usize, v: f32);
}

impl Weights for [Cell<f32>] {
    #[inline(always)]
    fn get(&self, i: usize) -> f32 {
        self[i].get()
    }
    #[inline(always)]
    fn set(&self, i: usize, v: f32) {
        self[i].set(v)
    }
}

/// Shared tables for parallel training. Relaxed loads and stores race between
/// workers (lost updates are tolerated) without undefined behavior.
impl Weights for [AtomicU32] {
    #[inline(always)]
    fn get(&self, i: usize) -> f32 {
        f32::from_bits(self[i].load(Ordering::Relaxed))
    }
    #[inline(always)]
    fn set(&self, i: usize, v: f32) {
        self[i].store(v.to_bits(), Ordering::Relaxed)
    }
}

/// One SGD step on a (center, context) pair. Returns the pair loss.
#[inline]
#[allow(clippy::too_many_arguments)]
fn sgd_pair<W: Weights + ?Sized>(
    input: &W,
    output: &W,
    dim: usize,
    center: usize,
    context: usize,
    negatives: &[u32],
    lr: f32,
    grad: &mut [f32],
) -> f64 {
    let wi = center * dim;
    grad.fill(0.0);
    let mut loss = 0.0;
    let mut step = |target: usize, label: bool, grad: &mut [f32]| {
        let co = target * dim;
        let mut dot = 0.0f32;
        for j in 0..dim {
            dot += input.get(wi + j) * output.get(co + j);
        }
        let dot = dot as f64;
        let g = if label {
            loss -= log_sigmoid(dot);
            sigmoid(dot) - 1.0
        } else {
            loss -= log_sigmoid(-dot);
            sigmoid(dot)
        } as f32;
        for (j, gj) in grad.iter_mut().enumerate() {
            let c = output.get(co + j);
            *gj += g * c;
            output.set(co + j, c - lr * g * input.get(wi + j));
        }
    };
    step(context, true, grad);
    for &n in negatives {
        step(n as usize, false, grad);
    }
    for (j, gj) in grad.iter().enumerate() {
        input.set(wi + j, input.get(wi + j) - lr * gj);
    }
    loss
}

struct Schedule {
    initial: f64,
    final_: f64,
    total: f64,
}

impl Schedule {
    #[inline]
    fn lr(&self, processed: u64) -> f32 {
        let progress = (processed as f64 / self.total).min(1.0);
        (self.initial - (self.initial - self.final_) * progress) as f32
    }
}

/// Per-sequence training pass. Returns (summed loss, pair count).
#[allow(clippy::too_many_arguments)]
fn train_sequence<W: Weights + ?Sized, R: Rng>(
    seq: &[u16],
    stats: &VocabStats,
    sampler: &NegativeSampler,
    cfg: &SgnsConfig,
    input: &W,
    output: &W,
    rng: &mut R,
    lr: f32,
    kept: &mut Vec<usize>,
    negs: &mut Vec<u32>,
    grad: &mut [f32],
) -> (f64, u64) {
    let dim = cfg.vector_size;
    kept.clear();
    kept.extend(
        seq.iter()
            .map(|&t| t as usize)
            .filter(|&t| stats.keep(t, rng)),
    );
    let (mut loss, mut pairs) = (0.0, 0u64);
    for i in 0..kept.len() {
        let reach = rng.random_range(1..=cfg.window);
        let lo = i.saturating_sub(reach);
        let hi = (i + reach).min(kept.len() - 1);
        for j in lo..=hi {
            if j == i {
                continue;
            }
            let context = kept[j] as u32;
            negs.clear();
            for _ in 0..cfg.negative {
                let mut n = sampler.draw(rng);
                for _ in 0..NEGATIVE_REDRAWS {
                    if n != context {
                        break;
                    }
                    n = sampler.draw(rng);
                }
                negs.push(n);
            }
            loss += sgd_pair(input, output, dim, kept[i], context as usize, negs, lr, grad);
            pairs += 1;
        }
    }
    (loss, pairs)
}

fn init_input(vocab: usize, dim: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 / dim as f32;
    Array2::from_shape_simple_fn((vocab, dim), || rng.random_range(-half..half))
}

/// Trains SGNS embeddings. Input vectors start uniform in `(-0.5/d, 0.5/d)`,
/// context vectors at zero. Each center token gets a symmetric window of
/// uniformly drawn radius in `[1, window]` that never crosses a sequence
/// boundary. The learning rate decays linearly over the tokens processed.
pub fn train_sgns(
    corpus: &[TokenSequence],
    stats: &VocabStats,
    sampler: &NegativeSampler,
    cfg: &SgnsConfig,
) -> Result<(EmbeddingTable, TrainReport)> {
    cfg.validate()?;
    let vocab = stats.vocab_size();
    if sampler.probs.len() != vocab {
        return Err(Error::Config(format!(
            "sampler covers {} tokens, vocabulary has {vocab}",
            sampler.probs.len()
        )));
    }
    if let Some(seq) = corpus
        .iter()
        .find(|s| s.tokens.iter().any(|&t| t as usize >= vocab))
    {
        return Err(Error::Config(format!(
            "clip {:?} has tokens outside the {vocab}-token vocabulary",
            seq.clip_id
        )));
    }
    let dim = cfg.vector_size;
    let mut input = init_input(vocab, dim, cfg.seed);
    let mut output = Array2::<f32>::zeros((vocab, dim));
    let corpus_tokens: u64 = corpus.iter().map(|s| s.len() as u64).sum();
    let schedule = Schedule {
        initial: cfg.initial_lr,
        final_: cfg.final_lr,
        total: (corpus_tokens * cfg.epochs as u64).max(1) as f64,
    };

    let report = match cfg.mode {
        TrainingMode::Deterministic => {
            let inp = Cell::from_mut(input.as_slice_mut().unwrap()).as_slice_of_cells();
            let out = Cell::from_mut(output.as_slice_mut().unwrap()).as_slice_of_cells();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            let (mut kept, mut negs, mut grad) = (Vec::new(), Vec::new(), vec![0.0f32; dim]);
            let mut report = TrainReport::default();
            let mut processed = 0u64;
            for _ in 0..cfg.epochs {
                let (mut loss, mut pairs) = (0.0, 0u64);
                for seq in corpus {
                    let lr = schedule.lr(processed);
                    let (l, p) = train_sequence(
                        &seq.tokens, stats, sampler, cfg, inp, out, &mut rng, lr, &mut kept,
                        &mut negs, &mut grad,
                    );
                    loss += l;
                    pairs += p;
                    processed += seq.len() as u64;
                }
                report.epoch_loss.push(if pairs > 0 { loss / pairs as f64 } else { 0.0 });
                report.pairs_per_epoch.push(pairs);
            }
            report
        }
        TrainingMode::Parallel => {
            let shared_in: Vec<AtomicU32> = input.iter().map(|v| AtomicU32::new(v.to_bits())).collect();
            let shared_out: Vec<AtomicU32> = output.iter().map(|v| AtomicU32::new(v.to_bits())).collect();
            let report = train_parallel(corpus, stats, sampler, cfg, &shared_in, &shared_out, &schedule);
            for (dst, src) in input.iter_mut().zip(&shared_in) {
                *dst = f32::from_bits(src.load(Ordering::Relaxed));
            }
            for (dst, src) in output.iter_mut().zip(&shared_out) {
                *dst = f32::from_bits(src.load(Ordering::Relaxed));
            }
            report
        }
    };

    let table = EmbeddingTable {
        input_vectors: input,
        output_vectors: Some(output),
        config: cfg.clone(),
    };
    table.check_invariants()?;
    Ok((table, report))
}

fn train_parallel(
    corpus: &[TokenSequence],
    stats: &VocabStats,
    sampler: &NegativeSampler,
    cfg: &SgnsConfig,
    input: &[AtomicU32],
    output: &[AtomicU32],
    schedule: &Schedule,
) -> TrainReport {
    let workers = cfg.workers.max(1).min(corpus.len().max(1));
    let shard = corpus.len().div_ceil(workers).max(1);
    let processed = AtomicU64::new(0);
    let mut report = TrainReport::default();
    let mut rngs: Vec<ChaCha8Rng> = (0..workers)
        .map(|w| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(2 + w as u64);
            r
        })
        .collect();
    for _ in 0..cfg.epochs {
        let totals: Vec<(f64, u64)> = std::thread::scope(|scope| {
            let handles: Vec<_> = corpus
                .chunks(shard)
                .zip(rngs.iter_mut())
                .map(|(chunk, rng)| {
                    let processed = &processed;
                    scope.spawn(move || {
                        let (mut kept, mut negs) = (Vec::new(), Vec::new());
                        let mut grad = vec![0.0f32; cfg.vector_size];
                        let (mut loss, mut pairs) = (0.0, 0u64);
                        for seq in chunk {
                            let lr = schedule.lr(processed.load(Ordering::Relaxed));
                            let (l, p) = train_sequence(
                                &seq.tokens, stats, sampler, cfg, input, output, rng, lr,
                                &mut kept, &mut negs, &mut grad,
                            );
                            loss += l;
                            pairs += p;
                            processed.fetch_add(seq.len() as u64, Ordering::Relaxed);
                        }
                        (loss, pairs)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let (loss, pairs) = totals
            .into_iter()
            .fold((0.0, 0u64), |(a, b), (l, p)| (a + l, b + p));
        report.epoch_loss.push(if pairs > 0 { loss / pairs as f64 } else { 0.0 });
        report.pairs_per_epoch.push(pairs);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: &[u16]) -> TokenSequence {
        TokenSequence {
            clip_id: "s".into(),
            tokens: tokens.to_vec(),
            frames_per_second: 8.0,
        }
    }

    fn small_cfg() -> SgnsConfig {
        SgnsConfig {
            vector_size: 16,
            window: 3,
            negative: 5,
            ns_exponent: 0.75,
            sample: 1.0,
            epochs: 10,
            ..SgnsConfig::default()
        }
    }

    /// Two disjoint random walks: tokens 0..5 and 5..10 never share a clip.
    fn two_cluster_corpus(n: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let base = if i % 2 == 0 { 0 } else { 5 };
                let tokens = (0..len).map(|_| base + rng.random_range(0..5u16)).collect();
                TokenSequence {
                    clip_id: format!("c{i}"),
                    tokens,
                    frames_per_second: 8.0,
                }
            })
            .collect()
    }

    #[test]
    fn counting_and_keep_probability() {
        let stats = build_vocab(&[seq(&[0, 0, 0, 1])], 2, 1, 1e-3).unwrap();
        assert_eq!(stats.counts, vec![3, 1]);
        assert_eq!(stats.total_tokens, 4);
        assert!((keep_probability(0.1, 1e-3) - 0.11).abs() < 1e-12);
        let all = build_vocab(&[seq(&[0, 0, 1, 2, 2, 2])], 4, 1, 1.0).unwrap();
        assert!(all.keep_prob.iter().all(|&p| p == 1.0));
        assert_eq!(all.pruned, vec![false, false, false, true]);
        assert!(build_vocab(&[seq(&[])], 2, 1, 1e-3).is_err());
        assert!(build_vocab(&[seq(&[5])], 2, 1, 1e-3).is_err());
    }

    #[test]
    fn min_count_prunes() {
        let stats = build_vocab(&[seq(&[0, 0, 0, 1, 2, 2])], 3, 2, 1.0).unwrap();
        assert_eq!(stats.pruned, vec![false, true, false]);
        let sampler = build_negative_sampler(&stats, 1.0).unwrap();
        assert_eq!(sampler.probs[1], 0.0);
        let everything = build_vocab(&[seq(&[0, 1])], 2, 5, 1.0).unwrap();
        assert!(matches!(
            build_negative_sampler(&everything, 0.75),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn sampler_probabilities() {
        let stats = build_vocab(&[seq(&[0; 9]), seq(&[1])], 2, 1, 1.0).unwrap();
        let half = build_negative_sampler(&stats, 0.5).unwrap();
        assert!((half.probs[0] - 0.75).abs() < 1e-12 && (half.probs[1] - 0.25).abs() < 1e-12);
        let raw = build_negative_sampler(&stats, 1.0).unwrap();
        assert!((raw.probs[0] - 0.9).abs() < 1e-12 && (raw.probs[1] - 0.1).abs() < 1e-12);
        let flat = build_negative_sampler(&stats, 0.0).unwrap();
        assert_eq!(flat.probs, vec![0.5, 0.5]);
        let rare = build_negative_sampler(&stats, -0.75).unwrap();
        assert!(rare.probs[1] > rare.probs[0]);
    }

    #[test]
    fn alias_table_uniform_entries_are_exact() {
        let t = AliasTable::new(&[1.0; 7]);
        assert!(t.prob.iter().all(|&p| p == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let skewed = AliasTable::new(&[0.0, 1.0, 3.0]);
        let mut hits = [0usize; 3];
        for _ in 0..40_000 {
            hits[skewed.sample(&mut rng)] += 1;
        }
        assert_eq!(hits[0], 0);
        assert!((hits[2] as f64 / 40_000.0 - 0.75).abs() < 0.01);
    }

    #[test]
    fn pair_loss_examples() {
        let z = [0.0; 4];
        let l = sgns_pair_loss(&z, &[1.0, 2.0, 3.0, 4.0], &[&[0.5, 0.5, 0.5, 0.5]]);
        assert!((l.loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(l.grad_c.iter().chain(&l.grad_negatives[0]).all(|&g| g == 0.0));
        // -s(0) c + s(0) n
        let expect = [-0.25, -0.75, -1.25, -1.75];
        assert!(l.grad_w.iter().zip(expect).all(|(g, e)| (g - e).abs() < 1e-12));

        let sat = sgns_pair_loss(&[30.0], &[1.0], &[]);
        assert!(sat.loss < 1e-12 && sat.loss >= 0.0);
        assert!(log_sigmoid(-800.0).is_finite() && log_sigmoid(800.0) == 0.0);
    }

    #[test]
    fn kernel_step_matches_analytic_gradient() {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut input: Vec<f32> = (0..3 * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut output: Vec<f32> = (0..3 * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let row = |v: &[f32], i: usize| v[i * d..(i + 1) * d].iter().map(|&x| x as f64).collect::<Vec<_>>();
        let (w, c, n) = (row(&input, 0), row(&output, 1), row(&output, 2));
        let analytic = sgns_pair_loss(&w, &c, &[&n]);
        let lr = 0.1f32;
        let loss = {
            let inp = Cell::from_mut(input.as_mut_slice()).as_slice_of_cells();
            let out = Cell::from_mut(output.as_mut_slice()).as_slice_of_cells();
            sgd_pair(inp, out, d, 0, 1, &[2], lr, &mut vec![0.0; d])
        };
        assert!((loss - analytic.loss).abs() < 1e-5);
        for j in 0..d {
            assert!((input[j] as f64 - (w[j] - 0.1 * analytic.grad_w[j])).abs() < 1e-5);
            assert!((output[d + j] as f64 - (c[j] - 0.1 * analytic.grad_c[j])).abs() < 1e-5);
            assert!((output[2 * d + j] as f64 - (n[j] - 0.1 * analytic.grad_negatives[0][j])).abs() < 1e-5);
        }
    }

    #[test]
    fn window_one_counts_two_pairs() {
        let corpus = [seq(&[0, 1])];
        let stats = build_vocab(&corpus, 2, 1, 1.0).unwrap();
        let sampler = build_negative_sampler(&stats, 0.75).unwrap();
        let cfg = SgnsConfig {
            window: 1,
            epochs: 3,
            ..small_cfg()
        };
        let (_, report) = train_sgns(&corpus, &stats, &sampler, &cfg).unwrap();
        assert_eq!(report.pairs_per_epoch, vec![2, 2, 2]);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = two_cluster_corpus(4, 20, 0);
        let stats = build_vocab(&corpus, 10, 1, 1.0).unwrap();
        let sampler = build_negative_sampler(&stats, 0.75).unwrap();
        let cfg = SgnsConfig {
            epochs: 0,
            ..small_cfg()
        };
        let (table, report) = train_sgns(&corpus, &stats, &sampler, &cfg).unwrap();
        assert!(report.epoch_loss.is_empty());
        assert_eq!(table.input_vectors, init_input(10, 16, cfg.seed));
        let bound = 0.5 / 16.0;
        assert!(table.input_vectors.iter().all(|v| v.abs() < bound));
        assert!(table.output_vectors.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn co_occurring_tokens_end_up_closer() {
        let corpus = two_cluster_corpus(40, 60, 1);
        let stats = build_vocab(&corpus, 10, 1, 1.0).unwrap();
        let sampler = build_negative_sampler(&stats, 0.75).unwrap();
        let (table, report) = train_sgns(&corpus, &stats, &sampler, &small_cfg()).unwrap();
        let (same, other) = (table.cosine(0, 1), table.cosine(0, 5));
        assert!(same > other + 0.2, "same {same} other {other}");
        assert!(report.epoch_loss[9] < report.epoch_loss[0]);
    }

    #[test]
    fn deterministic_mode_is_bit_identical() {
        let corpus = two_cluster_corpus(10, 30, 2);
        let stats = build_vocab(&corpus, 10, 1, 0.05).unwrap();
        let sampler = build_negative_sampler(&stats, 0.0).unwrap();
        let cfg = SgnsConfig {
            epochs: 3,
            ..small_cfg()
        };
        let a = train_sgns(&corpus, &stats, &sampler, &cfg).unwrap();
        let b = train_sgns(&corpus, &stats, &sampler, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_mode_learns_the_same_structure() {
        let corpus = two_cluster_corpus(40, 60, 1);
        let stats = build_vocab(&corpus, 10, 1, 1.0).unwrap();
        let sampler = build_negative_sampler(&stats, 0.75).unwrap();
        let cfg = SgnsConfig {
            mode: TrainingMode::Parallel,
            workers: 4,
            ..small_cfg()
        };
        let (table, report) = train_sgns(&corpus, &stats, &sampler, &cfg).unwrap();
        assert_eq!(report.pairs_per_epoch.len(), 10);
        assert!(table.cosine(0, 1) > table.cosine(0, 5) + 0.2);
    }

    #[test]
    fn vocabulary_mismatch_is_a_config_error() {
        let corpus = [seq(&[0, 1, 2])];
        let stats = build_vocab(&corpus, 3, 1, 1.0).unwrap();
        let sampler = build_negative_sampler(&stats, 0.75).unwrap();
        let small = build_vocab(&[seq(&[0, 1])], 2, 1, 1.0).unwrap();
        assert!(matches!(
            train_sgns(&corpus, &small, &sampler, &small_cfg()),
            Err(Error::Config(_))
        ));
        let bad = SgnsConfig {
            initial_lr: 1e-5,
            ..small_cfg()
        };
        assert!(train_sgns(&corpus, &stats, &sampler, &bad).is_err());
    }

    #[test]
    fn embedding_lookup() {
        let table = EmbeddingTable {
            input_vectors: Array2::from_shape_fn((5, 3), |(i, j)| (i * 10 + j) as f32),
            output_vectors: None,
            config: SgnsConfig::default(),
        };
        let m = embed_tokens(&table, &seq(&[3, 3, 1])).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![30.0, 31.0, 32.0]);
        assert_eq!(m.row(0), m.row(1));
        assert!(matches!(embed_tokens(&table, &seq(&[7])), Err(Error::Data(_))));
    }
}
