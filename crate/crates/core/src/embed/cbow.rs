//! CBOW with negative sampling.
//!
//! For a centre token `o` with context window `C`, the context vector is the
//! mean `h` of the input vectors in `C`, and the per-position loss is
//!
//! `L = -log sigmoid(u_o . h) - sum_k log sigmoid(-u_k . h)`
//!
//! over `negatives` noise tokens `k` drawn from the unigram^0.75 distribution,
//! where `u` are output vectors. Updates are plain SGD with a linearly decayed
//! learning rate; context rows take the unscaled error of `h`.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use log::debug;
use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EmbedError, EmbeddingMatrix, TokenCorpus, Variant};
use crate::scalar::Scalar;
use crate::splits::playlist_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbowConfig {
    pub dim: usize,
    /// Half-width of the symmetric context window.
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub rng_seed: u64,
    /// 1 = deterministic single-threaded training. More threads update
    /// shared rows without locks; results then vary run to run.
    pub threads: usize,
}

impl CbowConfig {
    pub fn for_variant(variant: Variant, rng_seed: u64) -> Self {
        CbowConfig {
            dim: 200,
            window: variant.default_window(),
            negatives: 5,
            epochs: 5,
            initial_lr: 0.025,
            rng_seed,
            threads: 1,
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn mean_of<T: Scalar>(rows: &[&[T]]) -> Vec<T> {
    let dim = rows[0].len();
    let n = T::of_usize(rows.len());
    let mut h = vec![T::zero(); dim];
    for r in rows {
        h.iter_mut().zip(r.iter()).for_each(|(a, &b)| *a += b);
    }
    h.iter_mut().for_each(|a| *a /= n);
    h
}

/// Loss of one (context, centre, negatives) instance.
pub fn cbow_pair_loss<T: Scalar>(context: &[&[T]], center: &[T], negatives: &[&[T]]) -> T {
    let h = mean_of(context);
    -log_sigmoid(dot(center, &h)) - negatives.iter().map(|u| log_sigmoid(-dot(u, &h))).sum::<T>()
}

/// Gradients of [`cbow_pair_loss`] with respect to every vector it reads.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGradients<T> {
    pub context: Vec<Vec<T>>,
    pub center: Vec<T>,
    pub negatives: Vec<Vec<T>>,
}

pub fn cbow_pair_gradients<T: Scalar>(context: &[&[T]], center: &[T], negatives: &[&[T]]) -> PairGradients<T> {
    let h = mean_of(context);
    let mut grad_h = vec![T::zero(); h.len()];
    // dL/dscore = sigmoid(score) - label
    let mut out_grad = |u: &[T], label: T| -> Vec<T> {
        let g = sigmoid(dot(u, &h)) - label;
        grad_h.iter_mut().zip(u).for_each(|(a, &b)| *a += g * b);
        h.iter().map(|&x| g * x).collect()
    };
    let center_grad = out_grad(center, T::one());
    let negative_grads = negatives.iter().map(|u| out_grad(u, T::zero())).collect();
    let n = T::of_usize(context.len());
    let ctx_grad: Vec<T> = grad_h.iter().map(|&g| g / n).collect();
    PairGradients {
        context: vec![ctx_grad; context.len()],
        center: center_grad,
        negatives: negative_grads,
    }
}

/// Raw views of the two parameter matrices. Rows are only touched through
/// short-lived slices; with one worker no two live slices overlap.
#[derive(Clone, Copy)]
struct Params<T> {
    input: *mut T,
    output: *mut T,
    dim: usize,
}

// SAFETY: used from several threads only in the lock-free mode, where
// concurrent row updates are accepted (word2vec-style asynchronous SGD).
unsafe impl<T: Send> Send for Params<T> {}
unsafe impl<T: Sync> Sync for Params<T> {}

impl<T: Scalar> Params<T> {
    #[allow(clippy::mut_from_ref)]
    unsafe fn input_row(&self, r: u32) -> &mut [T] {
        std::slice::from_raw_parts_mut(self.input.add(r as usize * self.dim), self.dim)
    }

    #[allow(clippy::mut_from_ref)]
    unsafe fn output_row(&self, r: u32) -> &mut [T] {
        std::slice::from_raw_parts_mut(self.output.add(r as usize * self.dim), self.dim)
    }
}

struct Scratch<T> {
    ctx: Vec<u32>,
    h: Vec<T>,
    grad_h: Vec<T>,
}

/// Window positions around `i`, excluding `i`.
fn context_ids(seq: &[u32], i: usize, window: usize, out: &mut Vec<u32>) {
    out.clear();
    let lo = i.saturating_sub(window);
    let hi = (i + window + 1).min(seq.len());
    out.extend((lo..hi).filter(|&j| j != i).map(|j| seq[j]));
}

/// One SGD step for centre `center` against `negs`; returns false when a
/// non-finite score shows up. Each context row receives the full error of
/// `h` (as in the reference word2vec code) rather than its 1/|C| share.
fn sgd_step<T: Scalar>(params: Params<T>, s: &mut Scratch<T>, center: u32, negs: &[u32], lr: T) -> bool {
    let n = T::of_usize(s.ctx.len());
    s.h.iter_mut().for_each(|x| *x = T::zero());
    for &c in &s.ctx {
        let row = unsafe { params.input_row(c) };
        s.h.iter_mut().zip(row.iter()).for_each(|(a, &b)| *a += b);
    }
    s.h.iter_mut().for_each(|x| *x /= n);
    s.grad_h.iter_mut().for_each(|x| *x = T::zero());
    let targets = std::iter::once((center, T::one())).chain(negs.iter().map(|&k| (k, T::zero())));
    for (w, label) in targets {
        let u = unsafe { params.output_row(w) };
        let score = dot(u, &s.h);
        if !score.is_finite() {
            return false;
        }
        let g = (label - sigmoid(score)) * lr;
        s.grad_h.iter_mut().zip(u.iter()).for_each(|(a, &b)| *a += g * b);
        u.iter_mut().zip(s.h.iter()).for_each(|(a, &b)| *a += g * b);
    }
    for &c in &s.ctx {
        let row = unsafe { params.input_row(c) };
        row.iter_mut().zip(s.grad_h.iter()).for_each(|(a, &b)| *a += b);
    }
    true
}

struct Trainer<'a, T> {
    cfg: &'a CbowConfig,
    noise: WeightedIndex<f64>,
    total: usize,
    done: AtomicUsize,
    failed: AtomicBool,
    params: Params<T>,
}

impl<T: Scalar> Trainer<'_, T> {
    fn lr(&self) -> T {
        let progress = self.done.load(Ordering::Relaxed) as f64 / self.total.max(1) as f64;
        T::of(self.cfg.initial_lr * (1.0 - progress).max(1e-4))
    }

    fn run_sequence(&self, seq: &[u32], rng: &mut ChaCha8Rng, s: &mut Scratch<T>, negs: &mut Vec<u32>) -> bool {
        for (i, &center) in seq.iter().enumerate() {
            context_ids(seq, i, self.cfg.window, &mut s.ctx);
            if s.ctx.is_empty() {
                continue;
            }
            negs.clear();
            for _ in 0..self.cfg.negatives {
                let k = self.noise.sample(rng) as u32;
                if k != center {
                    negs.push(k);
                }
            }
            if !sgd_step(self.params, s, center, negs, self.lr()) {
                return false;
            }
        }
        self.done.fetch_add(seq.len(), Ordering::Relaxed);
        true
    }
}

fn token_counts(corpus: &TokenCorpus) -> Vec<u64> {
    let mut counts = vec![0u64; corpus.vocab.len()];
    corpus.sequences.iter().flatten().for_each(|&t| counts[t as usize] += 1);
    counts
}

fn noise_distribution(counts: &[u64]) -> WeightedIndex<f64> {
    WeightedIndex::new(counts.iter().map(|&c| (c as f64).powf(0.75))).expect("non-empty vocabulary with counts")
}

pub fn train_cbow<T: Scalar>(
    corpus: &TokenCorpus,
    variant: Variant,
    cfg: &CbowConfig,
) -> Result<EmbeddingMatrix<T>, EmbedError> {
    let v = corpus.vocab.len();
    if v < 2 {
        return Err(EmbedError::VocabularyTooSmall(v));
    }
    if cfg.window == 0 || cfg.negatives == 0 || cfg.dim == 0 || cfg.epochs == 0 || cfg.threads == 0 {
        return Err(EmbedError::Config(format!(
            "window, negatives, dim, epochs and threads must be >= 1 (got {cfg:?})"
        )));
    }
    let dim = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let half = 0.5 / dim as f64;
    let init = Uniform::new(-half, half).expect("valid range");
    let mut input: Vec<T> = (0..v * dim).map(|_| T::of(rng.sample(init))).collect();
    let mut output: Vec<T> = vec![T::zero(); v * dim];

    let trainer = Trainer {
        cfg,
        noise: noise_distribution(&token_counts(corpus)),
        total: cfg.epochs * corpus.num_tokens(),
        done: AtomicUsize::new(0),
        failed: AtomicBool::new(false),
        params: Params {
            input: input.as_mut_ptr(),
            output: output.as_mut_ptr(),
            dim,
        },
    };
    let scratch = || Scratch {
        ctx: Vec::new(),
        h: vec![T::zero(); dim],
        grad_h: vec![T::zero(); dim],
    };

    for epoch in 0..cfg.epochs {
        if cfg.threads == 1 {
            let mut s = scratch();
            let mut negs = Vec::with_capacity(cfg.negatives);
            for (i, seq) in corpus.sequences.iter().enumerate() {
                if !trainer.run_sequence(seq, &mut rng, &mut s, &mut negs) {
                    return Err(EmbedError::NonFinite {
                        epoch,
                        sequence: i,
                        row: first_bad_row(&input, &output, dim),
                    });
                }
            }
        } else {
            let chunk = corpus.sequences.len().div_ceil(cfg.threads).max(1);
            corpus.sequences.par_chunks(chunk).enumerate().for_each(|(c, seqs)| {
                let stream = playlist_seed(cfg.rng_seed, (epoch * cfg.threads + c) as u64 + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                let mut s = scratch();
                let mut negs = Vec::with_capacity(cfg.negatives);
                for seq in seqs {
                    if trainer.failed.load(Ordering::Relaxed) || !trainer.run_sequence(seq, &mut rng, &mut s, &mut negs) {
                        trainer.failed.store(true, Ordering::Relaxed);
                        return;
                    }
                }
            });
            if trainer.failed.load(Ordering::Relaxed) {
                return Err(EmbedError::NonFinite {
                    epoch,
                    sequence: 0,
                    row: first_bad_row(&input, &output, dim),
                });
            }
        }
        debug!("{variant}: epoch {} done, lr {}", epoch + 1, trainer.lr());
    }
    drop(trainer);
    if input.iter().chain(&output).any(|x| !x.is_finite()) {
        return Err(EmbedError::NonFinite {
            epoch: cfg.epochs,
            sequence: 0,
            row: first_bad_row(&input, &output, dim),
        });
    }
    Ok(EmbeddingMatrix::new(variant, dim, corpus.vocab.clone(), input, output))
}

fn first_bad_row<T: Scalar>(input: &[T], output: &[T], dim: usize) -> usize {
    input
        .chunks(dim)
        .zip(output.chunks(dim))
        .position(|(a, b)| a.iter().chain(b).any(|x| !x.is_finite()))
        .unwrap_or(usize::MAX)
}

/// Mean per-position loss over `corpus` with negatives drawn from a fixed
/// seed, so two parameter states can be compared on identical samples.
pub fn mean_corpus_loss<T: Scalar>(
    emb: &EmbeddingMatrix<T>,
    corpus: &TokenCorpus,
    window: usize,
    negatives: usize,
    seed: u64,
) -> T {
    assert!(!emb.output.is_empty(), "loss needs output vectors");
    let noise = noise_distribution(&token_counts(corpus));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = Vec::new();
    let mut total = T::zero();
    let mut n = 0usize;
    for seq in &corpus.sequences {
        for (i, &center) in seq.iter().enumerate() {
            context_ids(seq, i, window, &mut ctx);
            if ctx.is_empty() {
                continue;
            }
            let context: Vec<&[T]> = ctx.iter().map(|&c| emb.row(c as usize)).collect();
            let negs: Vec<&[T]> = (0..negatives)
                .map(|_| noise.sample(&mut rng) as u32)
                .filter(|&k| k != center)
                .map(|k| emb.output_row(k as usize))
                .collect();
            total += cbow_pair_loss(&context, emb.output_row(center as usize), &negs);
            n += 1;
        }
    }
    total / T::of_usize(n.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Token;
    use crate::corpus::TrackId;

    fn toy_corpus(seqs: &[&[u32]]) -> TokenCorpus {
        let mut c = TokenCorpus::default();
        for s in seqs {
            c.push_sequence(s.iter().map(|&t| Token::Track(TrackId(t))));
        }
        c
    }

    #[test]
    fn shape() {
        let c = toy_corpus(&[&[0, 1, 2], &[2, 1]]);
        let cfg = CbowConfig {
            dim: 2,
            ..CbowConfig::for_variant(Variant::Emb1, 1)
        };
        let m = train_cbow::<f64>(&c, Variant::Emb1, &cfg).unwrap();
        assert_eq!((m.vocab.len(), m.dim, m.input.len()), (3, 2, 6));
    }

    #[test]
    fn tiny_vocabulary_rejected() {
        let c = toy_corpus(&[&[0, 0]]);
        let cfg = CbowConfig::for_variant(Variant::Emb1, 1);
        assert!(matches!(train_cbow::<f32>(&c, Variant::Emb1, &cfg), Err(EmbedError::VocabularyTooSmall(1))));
    }

    #[test]
    fn deterministic_single_thread() {
        let c = toy_corpus(&[&[0, 1, 2, 3], &[3, 2, 4]]);
        let cfg = CbowConfig {
            dim: 8,
            ..CbowConfig::for_variant(Variant::Emb1, 5)
        };
        let a = train_cbow::<f32>(&c, Variant::Emb1, &cfg).unwrap();
        let b = train_cbow::<f32>(&c, Variant::Emb1, &cfg).unwrap();
        assert_eq!(a.input, b.input);
    }

    #[test]
    fn huge_lr_reports_non_finite() {
        let c = toy_corpus(&[&[0, 1, 2, 3, 0, 1, 2, 3]]);
        let cfg = CbowConfig {
            dim: 4,
            initial_lr: 1e300,
            epochs: 50,
            ..CbowConfig::for_variant(Variant::Emb1, 5)
        };
        assert!(matches!(train_cbow::<f64>(&c, Variant::Emb1, &cfg), Err(EmbedError::NonFinite { .. })));
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        // one context row, centre row 1, one negative row 2
        let dim = 3;
        let mut input = vec![0.1, -0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut output = vec![0.0, 0.0, 0.0, 0.5, 0.1, -0.4, -0.3, 0.2, 0.6];
        let ctx0: Vec<f64> = input[..3].to_vec();
        let (c1, c2) = (output[3..6].to_vec(), output[6..9].to_vec());
        let grads = cbow_pair_gradients(&[&ctx0], &c1, &[&c2]);
        let lr = 0.1;
        let params = Params {
            input: input.as_mut_ptr(),
            output: output.as_mut_ptr(),
            dim,
        };
        let mut s = Scratch {
            ctx: vec![0],
            h: vec![0.0; dim],
            grad_h: vec![0.0; dim],
        };
        assert!(sgd_step(params, &mut s, 1, &[2], lr));
        for k in 0..dim {
            assert!((input[k] - (ctx0[k] - lr * grads.context[0][k])).abs() < 1e-12);
            assert!((output[3 + k] - (c1[k] - lr * grads.center[k])).abs() < 1e-12);
            assert!((output[6 + k] - (c2[k] - lr * grads.negatives[0][k])).abs() < 1e-12);
        }
    }

    fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 4;
        let mut vec = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let (ctx, center, negs) = (vec(3), vec(1).remove(0), vec(2));
        fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
            v.iter().map(Vec::as_slice).collect()
        }
        let g = cbow_pair_gradients(&refs(&ctx), &center, &refs(&negs));
        let num = finite_difference(|c| cbow_pair_loss(&refs(&ctx), c, &refs(&negs)), &center, 1e-4);
        for (a, n) in g.center.iter().zip(&num) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()));
        }
        let num = finite_difference(
            |c| {
                let mut ctx2 = ctx.clone();
                ctx2[1] = c.to_vec();
                cbow_pair_loss(&refs(&ctx2), &center, &refs(&negs))
            },
            &ctx[1],
            1e-4,
        );
        for (a, n) in g.context[1].iter().zip(&num) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()));
        }
    }

    fn cosine(a: &[f32], b: &[f32]) -> f32 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn two_cliques_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seqs: Vec<Vec<u32>> = (0..200)
            .map(|p| {
                let base = if p % 2 == 0 { 0 } else { 10 };
                let mut s: Vec<u32> = (base..base + 10).collect();
                for i in (1..s.len()).rev() {
                    s.swap(i, rng.random_range(0..=i));
                }
                s
            })
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let c = toy_corpus(&refs);
        let m = train_cbow::<f32>(&c, Variant::Emb1, &CbowConfig::for_variant(Variant::Emb1, 1)).unwrap();
        let v = |t: u32| m.track_vector(TrackId(t)).unwrap();
        let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0, 0);
        for a in 0..20u32 {
            for b in a + 1..20 {
                if (a < 10) == (b < 10) {
                    intra += cosine(v(a), v(b));
                    ni += 1;
                } else {
                    inter += cosine(v(a), v(b));
                    nx += 1;
                }
            }
        }
        let gap = intra / ni as f32 - inter / nx as f32;
        assert!(gap >= 0.2, "gap {gap}");
    }

    #[test]
    fn loss_does_not_increase_in_first_epoch() {
        let c = toy_corpus(&[&[0, 1, 2, 3, 4], &[4, 3, 5, 6], &[0, 2, 6, 1]]);
        let cfg = CbowConfig {
            dim: 8,
            window: 2,
            epochs: 1,
            initial_lr: 0.01,
            ..CbowConfig::for_variant(Variant::Emb1, 2)
        };
        let before = {
            let zero = CbowConfig { initial_lr: 0.0, ..cfg.clone() };
            train_cbow::<f64>(&c, Variant::Emb1, &zero).unwrap()
        };
        let after = train_cbow::<f64>(&c, Variant::Emb1, &cfg).unwrap();
        let l0 = mean_corpus_loss(&before, &c, 2, 5, 9);
        let l1 = mean_corpus_loss(&after, &c, 2, 5, 9);
        assert!(l1 <= l0, "{l1} > {l0}");
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0f64) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0f64).is_finite());
        assert_eq!(log_sigmoid(800.0f64), 0.0);
    }
}
