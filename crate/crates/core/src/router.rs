//! Query-to-head router.
//!
//! Each pool head owns a learned embedding. A query embedding is projected
//! into head-embedding space, multiplied elementwise with every head
//! embedding, and reduced by a shared output vector into one logit per head:
//!
//! ```text
//! g       = W1ᵀ e_q + b
//! alpha_m = W2ᵀ (E_m ⊙ g)
//! p_m     = sigmoid(alpha_m)
//! ```
//!
//! Training minimizes the per-head binary cross-entropy summed over heads plus
//! `lambda * Σ p_m`, averaged over each mini-batch.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::HeadPool;
use crate::relevance::HeadId;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RHRT";
pub const WEIGHTS_VERSION: u32 = 1;
pub const DEFAULT_HEAD_DIM: usize = 64;
const INIT_SCALE: f64 = 0.1;
const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub d_q: usize,
    pub d_h: usize,
    pub k: usize,
    pub seed: u64,
    /// `k x d_h`, row m is the embedding of pool head m.
    pub head_embeddings: Vec<f64>,
    /// `d_q x d_h`.
    pub w1: Vec<f64>,
    /// `d_h`.
    pub bias: Vec<f64>,
    /// `d_h`.
    pub w2: Vec<f64>,
}

impl RouterParams {
    /// Uniform `[-0.1, 0.1]` weights from a seeded ChaCha stream, zero bias.
    pub fn init(d_q: usize, d_h: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(d_q, d_h, k, seed, &mut rng)
    }

    fn init_with(d_q: usize, d_h: usize, k: usize, seed: u64, rng: &mut ChaCha8Rng) -> Self {
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
                .collect()
        };
        let head_embeddings = uniform(k * d_h);
        let w1 = uniform(d_q * d_h);
        let w2 = uniform(d_h);
        RouterParams {
            d_q,
            d_h,
            k,
            seed,
            head_embeddings,
            w1,
            bias: vec![0.0; d_h],
            w2,
        }
    }

    pub fn zeros(d_q: usize, d_h: usize, k: usize) -> Self {
        RouterParams {
            d_q,
            d_h,
            k,
            seed: 0,
            head_embeddings: vec![0.0; k * d_h],
            w1: vec![0.0; d_q * d_h],
            bias: vec![0.0; d_h],
            w2: vec![0.0; d_h],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            (
                "head embeddings",
                self.head_embeddings.len(),
                self.k * self.d_h,
            ),
            ("W1", self.w1.len(), self.d_q * self.d_h),
            ("bias", self.bias.len(), self.d_h),
            ("W2", self.w2.len(), self.d_h),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Dimension(format!(
                    "{name} has {got} values, expected {want}"
                )));
            }
        }
        if self.tensors().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Invariant(
                "router parameters contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        [&self.head_embeddings, &self.w1, &self.bias, &self.w2].into_iter()
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        [
            &mut self.head_embeddings,
            &mut self.w1,
            &mut self.bias,
            &mut self.w2,
        ]
        .into_iter()
    }

    /// Flattened view over every parameter, in storage order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut offset = index;
        for t in self.tensors_mut() {
            if offset < t.len() {
                t[offset] = value;
                return;
            }
            offset -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    fn check_query(&self, e_q: &[f64]) -> Result<()> {
        if e_q.len() != self.d_q {
            return Err(Error::Dimension(format!(
                "query embedding has dimension {}, router expects {}",
                e_q.len(),
                self.d_q
            )));
        }
        Ok(())
    }

    fn projection(&self, e_q: &[f64]) -> Vec<f64> {
        let mut g = self.bias.clone();
        for (i, &x) in e_q.iter().enumerate() {
            let row = &self.w1[i * self.d_h..(i + 1) * self.d_h];
            for (gj, w) in g.iter_mut().zip(row) {
                *gj += w * x;
            }
        }
        g
    }

    fn head_embedding(&self, m: usize) -> &[f64] {
        &self.head_embeddings[m * self.d_h..(m + 1) * self.d_h]
    }

    /// Binary layout: magic, version, d_q, d_h, k (u32 LE), seed (u64 LE),
    /// then E, W1, b, W2 as row-major f32 LE.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        for v in [
            WEIGHTS_VERSION,
            self.d_q as u32,
            self.d_h as u32,
            self.k as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        for t in self.tensors() {
            for &v in t {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |msg: String| Error::InvalidMatrix(format!("router weights: {msg}"));
        let io = |e: std::io::Error| bad(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        let mut header = [0u32; 4];
        for slot in header.iter_mut() {
            r.read_exact(&mut word).map_err(io)?;
            *slot = u32::from_le_bytes(word);
        }
        let [version, d_q, d_h, k] = header;
        if version != WEIGHTS_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed).map_err(io)?;
        let mut params = RouterParams::zeros(d_q as usize, d_h as usize, k as usize);
        params.seed = u64::from_le_bytes(seed);
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                r.read_exact(&mut word).map_err(io)?;
                *v = f32::from_le_bytes(word) as f64;
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        params.validate()?;
        Ok(params)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    pub alpha: Vec<f64>,
    pub p: Vec<f64>,
}

pub fn forward(params: &RouterParams, e_q: &[f64]) -> Result<RouterOutput> {
    params.check_query(e_q)?;
    let g = params.projection(e_q);
    let alpha: Vec<f64> = (0..params.k)
        .map(|m| {
            params
                .head_embedding(m)
                .iter()
                .zip(&g)
                .zip(&params.w2)
                .map(|((e, g), w)| w * e * g)
                .sum()
        })
        .collect();
    let p = alpha.iter().map(|&a| sigmoid(a)).collect();
    Ok(RouterOutput { alpha, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub route: f64,
    pub sparse: f64,
}

pub fn loss(output: &RouterOutput, y: &[f64], lambda: f64) -> Result<LossBreakdown> {
    if y.len() != output.p.len() {
        return Err(Error::Dimension(format!(
            "label has {} entries, router has {} heads",
            y.len(),
            output.p.len()
        )));
    }
    let route = output
        .p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>();
    let sparse = lambda * output.p.iter().sum::<f64>();
    Ok(LossBreakdown {
        total: route + sparse,
        route,
        sparse,
    })
}

/// Gradient of the total loss, laid out like [`RouterParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub head_embeddings: Vec<f64>,
    pub w1: Vec<f64>,
    pub bias: Vec<f64>,
    pub w2: Vec<f64>,
    /// d loss / d alpha, per head.
    pub alpha: Vec<f64>,
}

impl Gradients {
    fn zeros(params: &RouterParams) -> Self {
        Gradients {
            head_embeddings: vec![0.0; params.head_embeddings.len()],
            w1: vec![0.0; params.w1.len()],
            bias: vec![0.0; params.bias.len()],
            w2: vec![0.0; params.w2.len()],
            alpha: vec![0.0; params.k],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        [&self.head_embeddings, &self.w1, &self.bias, &self.w2]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    fn accumulate(&mut self, other: &Gradients, scale: f64) {
        let pairs = [
            (&mut self.head_embeddings, &other.head_embeddings),
            (&mut self.w1, &other.w1),
            (&mut self.bias, &other.bias),
            (&mut self.w2, &other.w2),
        ];
        for (acc, g) in pairs {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += scale * v;
            }
        }
    }
}

/// Closed-form gradient of `loss(forward(params, e_q), y, lambda).total`.
#[allow(clippy::needless_range_loop)]
pub fn backward(params: &RouterParams, e_q: &[f64], y: &[f64], lambda: f64) -> Result<Gradients> {
    params.check_query(e_q)?;
    if y.len() != params.k {
        return Err(Error::Dimension(format!(
            "label has {} entries, router has {} heads",
            y.len(),
            params.k
        )));
    }
    let g = params.projection(e_q);
    let out = forward(params, e_q)?;
    let d_h = params.d_h;
    let mut grads = Gradients::zeros(params);
    let mut d_g = vec![0.0; d_h];

    for m in 0..params.k {
        let p = out.p[m];
        let delta = (p - y[m]) + lambda * p * (1.0 - p);
        grads.alpha[m] = delta;
        let e = params.head_embedding(m);
        let d_e = &mut grads.head_embeddings[m * d_h..(m + 1) * d_h];
        for j in 0..d_h {
            d_e[j] = delta * params.w2[j] * g[j];
            grads.w2[j] += delta * e[j] * g[j];
            d_g[j] += delta * params.w2[j] * e[j];
        }
    }
    grads.bias.copy_from_slice(&d_g);
    for (i, &x) in e_q.iter().enumerate() {
        for j in 0..d_h {
            grads.w1[i * d_h + j] = x * d_g[j];
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub head_dim: usize,
    pub threshold: f64,
    pub fallback_top_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            learning_rate: 0.05,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            head_dim: DEFAULT_HEAD_DIM,
            threshold: 0.5,
            fallback_top_n: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail("lambda must be >= 0");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning rate must be > 0");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.head_dim == 0 {
            return fail("epochs, batch size and head dimension must be >= 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must be in (0, 1)");
        }
        if self.fallback_top_n == 0 {
            return fail("fallback top-n must be >= 1");
        }
        Ok(())
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            threshold: self.threshold,
            fallback_top_n: self.fallback_top_n,
        }
    }
}

/// One training pair: a query embedding and its multi-hot target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub embedding: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-query losses observed during the epoch.
    pub loss: LossBreakdown,
}

pub fn train(
    dataset: &[TrainingExample],
    config: &TrainConfig,
) -> Result<(RouterParams, Vec<EpochLog>)> {
    config.validate()?;
    let first = dataset.first().ok_or(Error::Empty("training dataset"))?;
    let (d_q, k) = (first.embedding.len(), first.targets.len());
    if let Some(bad) = dataset
        .iter()
        .position(|ex| ex.embedding.len() != d_q || ex.targets.len() != k)
    {
        return Err(Error::Dimension(format!(
            "training example {bad} does not match d_q={d_q}, K={k}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = RouterParams::init_with(d_q, config.head_dim, k, config.seed, &mut rng);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for batch in order.chunks(config.batch_size) {
            let mut acc = Gradients::zeros(&params);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &dataset[i];
                let l = loss(
                    &forward(&params, &ex.embedding)?,
                    &ex.targets,
                    config.lambda,
                )?;
                epoch_loss.total += l.total;
                epoch_loss.route += l.route;
                epoch_loss.sparse += l.sparse;
                let g = backward(&params, &ex.embedding, &ex.targets, config.lambda)?;
                acc.accumulate(&g, scale);
            }
            let step = -config.learning_rate;
            for (p, g) in
                params
                    .tensors_mut()
                    .zip([&acc.head_embeddings, &acc.w1, &acc.bias, &acc.w2])
            {
                for (pv, gv) in p.iter_mut().zip(g) {
                    *pv += step * gv;
                }
            }
        }
        let n = dataset.len() as f64;
        log.push(EpochLog {
            epoch,
            loss: LossBreakdown {
                total: epoch_loss.total / n,
                route: epoch_loss.route / n,
                sparse: epoch_loss.sparse / n,
            },
        });
    }
    params.validate()?;
    Ok((params, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub threshold: f64,
    pub fallback_top_n: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            threshold: 0.5,
            fallback_top_n: 1,
        }
    }
}

/// Pool positions whose probability exceeds the threshold; when none do, the
/// `fallback_top_n` most probable heads (ties to the lowest flat index).
pub fn select_from_probabilities(
    p: &[f64],
    pool: &HeadPool,
    config: &SelectionConfig,
) -> Result<Vec<HeadId>> {
    if p.len() != pool.k() {
        return Err(Error::Dimension(format!(
            "router emits {} probabilities for a pool of {}",
            p.len(),
            pool.k()
        )));
    }
    let mut chosen: Vec<HeadId> = pool
        .heads
        .iter()
        .zip(p)
        .filter(|(_, &pm)| pm > config.threshold)
        .map(|(&h, _)| h)
        .collect();
    if chosen.is_empty() {
        let mut ranked: Vec<(HeadId, f64)> =
            pool.heads.iter().copied().zip(p.iter().copied()).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.flat.cmp(&b.0.flat)));
        chosen = ranked
            .into_iter()
            .take(config.fallback_top_n.max(1))
            .map(|(h, _)| h)
            .collect();
    }
    chosen.sort();
    Ok(chosen)
}

pub fn select_heads(
    params: &RouterParams,
    e_q: &[f64],
    pool: &HeadPool,
    config: &SelectionConfig,
) -> Result<Vec<HeadId>> {
    if params.k != pool.k() {
        return Err(Error::Dimension(format!(
            "router trained for {} heads, pool has {}",
            params.k,
            pool.k()
        )));
    }
    let out = forward(params, e_q)?;
    select_from_probabilities(&out.p, pool, config)
}

/// Micro-averaged F1 of thresholded predictions against binary targets.
pub fn micro_f1(predictions: &[Vec<bool>], targets: &[Vec<f64>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (pred, tgt) in predictions.iter().zip(targets) {
        for (&p, &t) in pred.iter().zip(tgt) {
            match (p, t > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp == 0 {
        return if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 };
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{
        any, prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig,
    };

    fn pool(n: u32) -> HeadPool {
        HeadPool {
            heads: (0..n).map(|f| HeadId::from_flat(f, 4)).collect(),
            solo_scores: vec![0.0; n as usize],
            provenance: String::new(),
        }
    }

    #[test]
    fn forward_examples() {
        let mut p = RouterParams::init(3, 4, 5, 7);
        p.w2 = vec![0.0; 4];
        let out = forward(&p, &[0.3, -1.0, 2.0]).unwrap();
        assert!(out.alpha.iter().all(|&a| a == 0.0));
        assert!(out.p.iter().all(|&v| v == 0.5));

        let mut p = RouterParams::init(3, 4, 5, 7);
        p.head_embeddings[2 * 4..3 * 4].fill(0.0);
        let out = forward(&p, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(out.alpha[2], 0.0);
        assert_eq!(out.p[2], 0.5);

        let p = RouterParams {
            d_q: 1,
            d_h: 1,
            k: 1,
            seed: 0,
            head_embeddings: vec![3.0],
            w1: vec![2.0],
            bias: vec![0.0],
            w2: vec![1.0],
        };
        let out = forward(&p, &[1.0]).unwrap();
        assert_eq!(out.alpha, vec![6.0]);
        assert!((out.p[0] - 0.99753).abs() < 1e-5);

        assert!(matches!(forward(&p, &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn loss_examples() {
        let out = RouterOutput {
            alpha: vec![0.0, 0.0],
            p: vec![0.5, 0.5],
        };
        let l = loss(&out, &[1.0, 0.0], 0.0).unwrap();
        assert!((l.route - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.route - 1.38629).abs() < 1e-5);
        assert_eq!(l.total, l.route);
        assert_eq!(l.sparse, 0.0);

        let l = loss(&out, &[1.0, 0.0], 0.1).unwrap();
        assert!((l.sparse - 0.1).abs() < 1e-15);
        assert!((l.total - 1.48629).abs() < 1e-5);

        let exact = RouterOutput {
            alpha: vec![f64::INFINITY, f64::NEG_INFINITY],
            p: vec![1.0, 0.0],
        };
        let l = loss(&exact, &[1.0, 0.0], 0.0).unwrap();
        assert!(l.route.is_finite() && l.route < 1e-10);
    }

    #[test]
    fn backward_stationary_and_annihilation() {
        let mut p = RouterParams::init(3, 4, 2, 1);
        let e_q = [0.5, -0.2, 0.9];
        let out = forward(&p, &e_q).unwrap();
        let g = backward(&p, &e_q, &out.p, 0.0).unwrap();
        assert!(g.alpha.iter().all(|&d| d == 0.0));

        p.w2 = vec![0.0; 4];
        let g = backward(&p, &e_q, &[1.0, 0.0], 0.3).unwrap();
        assert!(g.head_embeddings.iter().all(|&d| d == 0.0));
    }

    /// Central differences over every parameter.
    fn finite_difference(
        p: &RouterParams,
        e_q: &[f64],
        y: &[f64],
        lambda: f64,
        step: f64,
    ) -> Vec<f64> {
        let base = p.flat();
        (0..base.len())
            .map(|i| {
                let mut plus = p.clone();
                plus.set_flat(i, base[i] + step);
                let mut minus = p.clone();
                minus.set_flat(i, base[i] - step);
                let f =
                    |q: &RouterParams| loss(&forward(q, e_q).unwrap(), y, lambda).unwrap().total;
                (f(&plus) - f(&minus)) / (2.0 * step)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradients_match_finite_differences(
            d_q in 1usize..=8, d_h in 1usize..=8, k in 1usize..=8,
            seed in any::<u64>(), lambda in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = RouterParams::init(d_q, d_h, k, seed);
            for t in p.tensors_mut() {
                t.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
            let e_q: Vec<f64> = (0..d_q).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..k).map(|_| f64::from(rng.random_bool(0.5))).collect();
            let analytic = backward(&p, &e_q, &y, lambda).unwrap().flat();
            let numeric = finite_difference(&p, &e_q, &y, lambda, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                prop_assert!((a - n).abs() / denom < 1e-4, "analytic {a} numeric {n}");
            }
        }

        #[test]
        fn probabilities_open_interval(seed in any::<u64>(), x in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let p = RouterParams::init(4, 6, 5, seed);
            let out = forward(&p, &x).unwrap();
            for (a, pm) in out.alpha.iter().zip(&out.p) {
                prop_assert!(*pm > 0.0 && *pm < 1.0);
                prop_assert_eq!(*pm == 0.5, *a == 0.0);
            }
        }

        #[test]
        fn fallback_head_survives_positive_w2_scaling(seed in any::<u64>(), c in 0.01f64..50.0) {
            let p = RouterParams::init(3, 4, 6, seed);
            let cfg = SelectionConfig { threshold: 0.999, fallback_top_n: 1 };
            let e_q = [0.2, -0.4, 0.1];
            let mut scaled = p.clone();
            scaled.w2.iter_mut().for_each(|w| *w *= c);
            prop_assume!(forward(&scaled, &e_q).unwrap().p.iter().all(|&v| v <= 0.999));
            prop_assert_eq!(
                select_heads(&p, &e_q, &pool(6), &cfg).unwrap(),
                select_heads(&scaled, &e_q, &pool(6), &cfg).unwrap()
            );
        }
    }

    #[test]
    fn loss_decomposes() {
        let p = RouterParams::init(2, 3, 4, 9);
        let out = forward(&p, &[1.0, -1.0]).unwrap();
        let l = loss(&out, &[1.0, 0.0, 0.0, 1.0], 0.25).unwrap();
        assert_eq!(l.total, l.route + l.sparse);
        assert_eq!(loss(&out, &[1.0, 0.0, 0.0, 1.0], 0.0).unwrap().sparse, 0.0);
    }

    #[test]
    fn selection_examples() {
        let cfg = SelectionConfig::default();
        let picked = select_from_probabilities(&[0.9, 0.1, 0.6], &pool(3), &cfg).unwrap();
        assert_eq!(
            picked,
            vec![HeadId::from_flat(0, 4), HeadId::from_flat(2, 4)]
        );

        let picked = select_from_probabilities(&[0.2, 0.4, 0.1], &pool(3), &cfg).unwrap();
        assert_eq!(picked, vec![HeadId::from_flat(1, 4)]);

        let picked = select_from_probabilities(&[0.3, 0.3, 0.3], &pool(3), &cfg).unwrap();
        assert_eq!(picked, vec![HeadId::from_flat(0, 4)]);

        let two = SelectionConfig {
            threshold: 0.5,
            fallback_top_n: 2,
        };
        let picked = select_from_probabilities(&[0.2, 0.4, 0.3], &pool(3), &two).unwrap();
        assert_eq!(
            picked,
            vec![HeadId::from_flat(1, 4), HeadId::from_flat(2, 4)]
        );
    }

    #[test]
    fn train_rejects_empty_and_is_deterministic() {
        assert!(matches!(
            train(&[], &TrainConfig::default()),
            Err(Error::Empty(_))
        ));
        let data: Vec<TrainingExample> = (0..10)
            .map(|i| TrainingExample {
                embedding: vec![i as f64 / 10.0, 1.0 - i as f64 / 10.0],
                targets: vec![f64::from(i % 2 == 0), 1.0],
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 5,
            head_dim: 4,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let (a, log_a) = train(&data, &cfg).unwrap();
        let (b, log_b) = train(&data, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(log_a, log_b);
        let (c, _) = train(&data, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn overfits_single_example() {
        let data = vec![TrainingExample {
            embedding: vec![0.5, -0.3, 0.8],
            targets: vec![1.0, 0.0, 1.0, 0.0],
        }];
        let cfg = TrainConfig {
            lambda: 0.0,
            learning_rate: 0.5,
            epochs: 2000,
            batch_size: 1,
            head_dim: 8,
            ..TrainConfig::default()
        };
        let (params, log) = train(&data, &cfg).unwrap();
        let l = loss(
            &forward(&params, &data[0].embedding).unwrap(),
            &data[0].targets,
            0.0,
        )
        .unwrap();
        assert!(l.route < 0.01, "route loss {}", l.route);
        assert!(log.last().unwrap().loss.route < log[0].loss.route);
    }

    #[test]
    fn weights_roundtrip_through_f32() {
        let p = RouterParams::init(3, 5, 4, 42);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"RHRT");
        assert_eq!(bytes.len(), 4 + 16 + 8 + 4 * (4 * 5 + 3 * 5 + 5 + 5));
        let back = RouterParams::read_from(&bytes[..]).unwrap();
        assert_eq!((back.d_q, back.d_h, back.k, back.seed), (3, 5, 4, 42));
        for (a, b) in p.flat().iter().zip(back.flat()) {
            assert_eq!(*a as f32 as f64, b);
        }
        assert_eq!(back.to_bytes(), bytes);
        assert!(RouterParams::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RouterParams::read_from(&bad[..]).is_err());
    }

    #[test]
    fn f1_edge_cases() {
        assert_eq!(micro_f1(&[vec![true, false]], &[vec![1.0, 0.0]]), 1.0);
        assert_eq!(micro_f1(&[vec![false, false]], &[vec![0.0, 0.0]]), 1.0);
        assert_eq!(micro_f1(&[vec![true, false]], &[vec![0.0, 1.0]]), 0.0);
        assert!((micro_f1(&[vec![true, true]], &[vec![1.0, 0.0]]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
