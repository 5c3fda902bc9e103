//! Peephole LSTM over a sequence of spatial descriptions, with a shared
//! softmax head, input batch normalization, per-cell MSE loss,
//! backpropagation through time and Adam training.
//!
//! Cell equations (input and forget gates peek at `c_prev`, the output gate
//! at the new `c`):
//!
//! ```text
//! i = σ(W_i x + U_i h_prev + p_i ⊙ c_prev + b_i)
//! f = σ(W_f x + U_f h_prev + p_f ⊙ c_prev + b_f)
//! g = tanh(W_c x + U_c h_prev + b_c)
//! c = f ⊙ c_prev + i ⊙ g
//! o = σ(W_o x + U_o h_prev + p_o ⊙ c + b_o)
//! h = o ⊙ tanh(c)
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{ScoreVector, SoftmaxHead};
use crate::descriptor::{ByteReader, SpatialDescription};
use crate::error::{Error, Result};
use crate::numerics::{batchnorm_forward, sigmoid, softmax, BatchNormState, BnCache, BnMode, Matrix};

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_BATCHES: usize = 3;
pub const DEFAULT_EPOCHS: usize = 130;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

pub const LSTM_BLOCK_NAMES: [&str; 15] = [
    "W_i", "W_f", "W_o", "W_c", "U_i", "U_f", "U_o", "U_c", "p_i", "p_f", "p_o", "b_i", "b_f", "b_o", "b_c",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_i: Matrix,
    pub w_f: Matrix,
    pub w_o: Matrix,
    pub w_c: Matrix,
    pub u_i: Matrix,
    pub u_f: Matrix,
    pub u_o: Matrix,
    pub u_c: Matrix,
    pub p_i: Vec<f64>,
    pub p_f: Vec<f64>,
    pub p_o: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_o: Vec<f64>,
    pub b_c: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Matrix::zeros(hidden_dim, input_dim);
        let u = || Matrix::zeros(hidden_dim, hidden_dim);
        let v = || vec![0.0; hidden_dim];
        LstmParams {
            input_dim,
            hidden_dim,
            w_i: w(),
            w_f: w(),
            w_o: w(),
            w_c: w(),
            u_i: u(),
            u_f: u(),
            u_o: u(),
            u_c: u(),
            p_i: v(),
            p_f: v(),
            p_o: v(),
            b_i: v(),
            b_f: v(),
            b_o: v(),
            b_c: v(),
        }
    }

    /// Uniform ±1/√fan_in per block, zero biases except forget bias +1.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = LstmParams::zeros(input_dim, hidden_dim);
        let wb = 1.0 / (input_dim as f64).sqrt();
        let ub = 1.0 / (hidden_dim as f64).sqrt();
        for (name, block) in p.blocks_mut() {
            let bound = match name.as_bytes()[0] {
                b'W' => wb,
                b'U' | b'p' => ub,
                _ => continue,
            };
            block.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        }
        p.b_f.iter_mut().for_each(|b| *b = 1.0);
        p
    }

    /// Parameter blocks in declared (and file) order.
    pub fn blocks(&self) -> [(&'static str, &[f64]); 15] {
        [
            ("W_i", self.w_i.data()),
            ("W_f", self.w_f.data()),
            ("W_o", self.w_o.data()),
            ("W_c", self.w_c.data()),
            ("U_i", self.u_i.data()),
            ("U_f", self.u_f.data()),
            ("U_o", self.u_o.data()),
            ("U_c", self.u_c.data()),
            ("p_i", &self.p_i),
            ("p_f", &self.p_f),
            ("p_o", &self.p_o),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("b_c", &self.b_c),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 15] {
        [
            ("W_i", self.w_i.data_mut()),
            ("W_f", self.w_f.data_mut()),
            ("W_o", self.w_o.data_mut()),
            ("W_c", self.w_c.data_mut()),
            ("U_i", self.u_i.data_mut()),
            ("U_f", self.u_f.data_mut()),
            ("U_o", self.u_o.data_mut()),
            ("U_c", self.u_c.data_mut()),
            ("p_i", &mut self.p_i),
            ("p_f", &mut self.p_f),
            ("p_o", &mut self.p_o),
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_o", &mut self.b_o),
            ("b_c", &mut self.b_c),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
struct StepCache {
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn step(x: &[f64], prev: &LstmState, p: &LstmParams) -> StepCache {
    let n = p.hidden_dim;
    let gate = |w: &Matrix, u: &Matrix, b: &[f64]| {
        let mut a = b.to_vec();
        w.mul_vec_acc(x, &mut a);
        u.mul_vec_acc(&prev.h, &mut a);
        a
    };
    let mut i = gate(&p.w_i, &p.u_i, &p.b_i);
    let mut f = gate(&p.w_f, &p.u_f, &p.b_f);
    let mut g = gate(&p.w_c, &p.u_c, &p.b_c);
    let mut o = gate(&p.w_o, &p.u_o, &p.b_o);
    let mut c = vec![0.0; n];
    for k in 0..n {
        i[k] = sigmoid(i[k] + p.p_i[k] * prev.c[k]);
        f[k] = sigmoid(f[k] + p.p_f[k] * prev.c[k]);
        g[k] = g[k].tanh();
        c[k] = f[k] * prev.c[k] + i[k] * g[k];
        o[k] = sigmoid(o[k] + p.p_o[k] * c[k]);
    }
    let tanh_c: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
    let h = o.iter().zip(&tanh_c).map(|(a, b)| a * b).collect();
    StepCache { i, f, o, g, c, tanh_c, h }
}

fn check_step_input(x: &[f64], prev: &LstmState, params: &LstmParams) -> Result<()> {
    if x.len() != params.input_dim {
        return Err(Error::shape("cell_forward input", params.input_dim, x.len()));
    }
    if prev.h.len() != params.hidden_dim || prev.c.len() != params.hidden_dim {
        return Err(Error::shape(
            "cell_forward state",
            params.hidden_dim,
            format!("h {} / c {}", prev.h.len(), prev.c.len()),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cell_forward input".into()));
    }
    Ok(())
}

/// One peephole LSTM step on an already normalized description.
pub fn cell_forward(x: &[f64], prev: &LstmState, params: &LstmParams) -> Result<LstmState> {
    check_step_input(x, prev, params)?;
    let s = step(x, prev, params);
    Ok(LstmState { h: s.h, c: s.c })
}

/// Stacks descriptions into a `T × dim` matrix.
pub fn stack_descriptions(descriptions: &[SpatialDescription]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = descriptions.iter().map(|d| d.values.clone()).collect();
    if rows.is_empty() {
        return Err(Error::Empty("stack_descriptions"));
    }
    Matrix::from_rows(&rows)
}

/// Runs the chain from the zero state. In `Train` mode the normalization
/// statistics come from this sequence alone.
pub fn sequence_forward(
    descriptions: &Matrix,
    params: &LstmParams,
    bn: &BatchNormState,
    mode: BnMode,
) -> Result<Vec<LstmState>> {
    if descriptions.rows() == 0 {
        return Err(Error::Empty("sequence_forward"));
    }
    let normalized = batchnorm_forward(descriptions, bn, mode)?.normalized;
    run_normalized(&normalized, params)
}

fn run_normalized(normalized: &Matrix, params: &LstmParams) -> Result<Vec<LstmState>> {
    let mut state = LstmState::zeros(params.hidden_dim);
    let mut out = Vec::with_capacity(normalized.rows());
    for t in 0..normalized.rows() {
        state = cell_forward(normalized.row(t), &state, params).map_err(|e| Error::AtStep {
            index: t,
            source: Box::new(e),
        })?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Mean over cells of the per-class mean squared error between each cell's
/// softmax output and the one-hot label.
pub fn loss(hidden_states: &[Vec<f64>], head: &SoftmaxHead, one_hot: &[f64]) -> Result<f64> {
    if one_hot.len() != head.class_count() {
        return Err(Error::shape("loss label", head.class_count(), one_hot.len()));
    }
    if hidden_states.is_empty() {
        return Err(Error::Empty("loss"));
    }
    let c = one_hot.len() as f64;
    let mut total = 0.0;
    for h in hidden_states {
        let p = head.probabilities(h)?;
        total += p.scores.iter().zip(one_hot).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c;
    }
    Ok(total / hidden_states.len() as f64)
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// One training sequence: `T × input_dim` descriptions and a class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sequence: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub params: LstmParams,
    pub bn: BatchNormState,
    pub head: SoftmaxHead,
}

impl LstmModel {
    pub fn init(input_dim: usize, hidden_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let params = LstmParams::init(input_dim, hidden_dim, rng);
        let mut head = SoftmaxHead::zeros(classes, hidden_dim);
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        head.weights.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        LstmModel {
            params,
            bn: BatchNormState::new(input_dim),
            head,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.hidden_dim
    }

    pub fn class_count(&self) -> usize {
        self.head.class_count()
    }

    /// Inference-mode hidden states of one sequence.
    pub fn hidden_states(&self, sequence: &Matrix) -> Result<Vec<Vec<f64>>> {
        Ok(sequence_forward(sequence, &self.params, &self.bn, BnMode::Infer)?
            .into_iter()
            .map(|s| s.h)
            .collect())
    }

    /// Inference-mode per-cell class distributions.
    pub fn cell_scores(&self, sequence: &Matrix) -> Result<Vec<ScoreVector>> {
        crate::classify::cell_scores(&self.hidden_states(sequence)?, &self.head)
    }

    /// Trainable blocks: LSTM parameters, softmax head, then batch-norm
    /// scale and shift.
    pub fn trainable_blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = self.params.blocks().into_iter().collect();
        out.push(("W_s", self.head.weights.data()));
        out.push(("b_s", &self.head.bias));
        out.push(("bn_gamma", &self.bn.gamma));
        out.push(("bn_beta", &self.bn.beta));
        out
    }

    pub fn trainable_blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = self.params.blocks_mut().into_iter().collect();
        out.push(("W_s", self.head.weights.data_mut()));
        out.push(("b_s", &mut self.head.bias));
        out.push(("bn_gamma", &mut self.bn.gamma));
        out.push(("bn_beta", &mut self.bn.beta));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

/// Gradients shaped like the trainable blocks of an [`LstmModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub params: LstmParams,
    pub head: SoftmaxHead,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &LstmModel) -> Self {
        ModelGrads {
            params: LstmParams::zeros(model.input_dim(), model.hidden_dim()),
            head: SoftmaxHead::zeros(model.class_count(), model.hidden_dim()),
            bn_gamma: vec![0.0; model.input_dim()],
            bn_beta: vec![0.0; model.input_dim()],
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = self.params.blocks().into_iter().collect();
        out.push(("W_s", self.head.weights.data()));
        out.push(("b_s", &self.head.bias));
        out.push(("bn_gamma", &self.bn_gamma));
        out.push(("bn_beta", &self.bn_beta));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = self.params.blocks_mut().into_iter().collect();
        out.push(("W_s", self.head.weights.data_mut()));
        out.push(("b_s", &mut self.head.bias));
        out.push(("bn_gamma", &mut self.bn_gamma));
        out.push(("bn_beta", &mut self.bn_beta));
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, b) in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

fn check_batch(batch: &[Sample], model: &LstmModel) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for (k, s) in batch.iter().enumerate() {
        if s.sequence.rows() == 0 {
            return Err(Error::Empty("sequence"));
        }
        if s.sequence.cols() != model.input_dim() {
            return Err(Error::shape(
                "batch sample",
                format!("input dim {}", model.input_dim()),
                format!("sample {k} dim {}", s.sequence.cols()),
            ));
        }
        if s.label >= model.class_count() {
            return Err(Error::shape("batch label", model.class_count(), s.label));
        }
    }
    Ok(())
}

/// Normalizes every row of every sequence in the batch with shared
/// feature statistics.
fn normalize_batch(batch: &[Sample], bn: &BatchNormState, mode: BnMode) -> Result<(Vec<Matrix>, BnCache, Matrix, Option<BatchNormState>)> {
    let cols = bn.features();
    let total: usize = batch.iter().map(|s| s.sequence.rows()).sum();
    let mut data = Vec::with_capacity(total * cols);
    for s in batch {
        data.extend_from_slice(s.sequence.data());
    }
    let stacked = Matrix::new(total, cols, data)?;
    let out = batchnorm_forward(&stacked, bn, mode)?;
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut row = 0;
    for s in batch {
        let t = s.sequence.rows();
        let slice = out.normalized.data()[row * cols..(row + t) * cols].to_vec();
        per_sample.push(Matrix::new(t, cols, slice)?);
        row += t;
    }
    Ok((per_sample, out.cache, out.normalized, out.updated))
}

/// Mean batch loss with the given normalization mode. Pure.
pub fn batch_loss(batch: &[Sample], model: &LstmModel, mode: BnMode) -> Result<f64> {
    check_batch(batch, model)?;
    let (normalized, ..) = normalize_batch(batch, &model.bn, mode)?;
    let mut total = 0.0;
    for (s, x) in batch.iter().zip(&normalized) {
        let hs: Vec<Vec<f64>> = run_normalized(x, &model.params)?.into_iter().map(|st| st.h).collect();
        total += loss(&hs, &model.head, &one_hot(s.label, model.class_count()))?;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone)]
pub struct BpttOutput {
    pub loss: f64,
    pub grads: ModelGrads,
    /// Batch-norm state with running statistics advanced by this batch.
    pub bn: BatchNormState,
}

/// Analytic gradients of the mean batch loss (train-mode normalization)
/// with respect to every trainable block.
pub fn bptt(batch: &[Sample], model: &LstmModel) -> Result<BpttOutput> {
    check_batch(batch, model)?;
    let (normalized, bn_cache, _, updated) = normalize_batch(batch, &model.bn, BnMode::Train)?;
    let p = &model.params;
    let n = p.hidden_dim;
    let d = p.input_dim;
    let classes = model.class_count();
    let mut grads = ModelGrads::zeros_like(model);
    let mut dx_all = Matrix::zeros(bn_cache.x_hat.rows(), d);
    let mut total_loss = 0.0;
    let mut row_base = 0;
    for (sample, x) in batch.iter().zip(&normalized) {
        let steps_n = x.rows();
        let mut caches = Vec::with_capacity(steps_n);
        let mut state = LstmState::zeros(n);
        for t in 0..steps_n {
            let cache = step(x.row(t), &state, p);
            state = LstmState {
                h: cache.h.clone(),
                c: cache.c.clone(),
            };
            caches.push(cache);
        }
        let y = one_hot(sample.label, classes);
        let scale = 2.0 / (batch.len() * steps_n * classes) as f64;
        let mut dh_head = Vec::with_capacity(steps_n);
        for cache in &caches {
            let probs = softmax(&model.head.logits(&cache.h)?)?;
            total_loss += probs.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / (classes as f64 * steps_n as f64 * batch.len() as f64);
            let dp: Vec<f64> = probs.iter().zip(&y).map(|(a, b)| (a - b) * scale).collect();
            let inner: f64 = probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let dz: Vec<f64> = probs.iter().zip(&dp).map(|(a, b)| a * (b - inner)).collect();
            grads.head.weights.add_outer(&dz, &cache.h);
            for (b, z) in grads.head.bias.iter_mut().zip(&dz) {
                *b += z;
            }
            let mut dh = vec![0.0; n];
            model.head.weights.mul_vec_t_acc(&dz, &mut dh);
            dh_head.push(dh);
        }

        let mut dh_next = vec![0.0; n];
        let mut dc_next = vec![0.0; n];
        let zeros = vec![0.0; n];
        for t in (0..steps_n).rev() {
            let cache = &caches[t];
            let (h_prev, c_prev) = if t == 0 {
                (&zeros, &zeros)
            } else {
                (&caches[t - 1].h, &caches[t - 1].c)
            };
            let mut dai = vec![0.0; n];
            let mut daf = vec![0.0; n];
            let mut dao = vec![0.0; n];
            let mut dag = vec![0.0; n];
            let mut dc_prev = vec![0.0; n];
            for k in 0..n {
                let dh = dh_head[t][k] + dh_next[k];
                let (i, f, o, g) = (cache.i[k], cache.f[k], cache.o[k], cache.g[k]);
                let tc = cache.tanh_c[k];
                dao[k] = dh * tc * o * (1.0 - o);
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc) + dao[k] * p.p_o[k];
                dag[k] = dc * i * (1.0 - g * g);
                dai[k] = dc * g * i * (1.0 - i);
                daf[k] = dc * c_prev[k] * f * (1.0 - f);
                dc_prev[k] = dc * f + dai[k] * p.p_i[k] + daf[k] * p.p_f[k];
                grads.params.p_o[k] += dao[k] * cache.c[k];
                grads.params.p_i[k] += dai[k] * c_prev[k];
                grads.params.p_f[k] += daf[k] * c_prev[k];
            }
            let xt = x.row(t);
            let g = &mut grads.params;
            g.w_i.add_outer(&dai, xt);
            g.w_f.add_outer(&daf, xt);
            g.w_o.add_outer(&dao, xt);
            g.w_c.add_outer(&dag, xt);
            g.u_i.add_outer(&dai, h_prev);
            g.u_f.add_outer(&daf, h_prev);
            g.u_o.add_outer(&dao, h_prev);
            g.u_c.add_outer(&dag, h_prev);
            for k in 0..n {
                g.b_i[k] += dai[k];
                g.b_f[k] += daf[k];
                g.b_o[k] += dao[k];
                g.b_c[k] += dag[k];
            }
            let mut dh_prev = vec![0.0; n];
            p.u_i.mul_vec_t_acc(&dai, &mut dh_prev);
            p.u_f.mul_vec_t_acc(&daf, &mut dh_prev);
            p.u_o.mul_vec_t_acc(&dao, &mut dh_prev);
            p.u_c.mul_vec_t_acc(&dag, &mut dh_prev);
            let dx = dx_all.row_mut(row_base + t);
            p.w_i.mul_vec_t_acc(&dai, dx);
            p.w_f.mul_vec_t_acc(&daf, dx);
            p.w_o.mul_vec_t_acc(&dao, dx);
            p.w_c.mul_vec_t_acc(&dag, dx);
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        row_base += steps_n;
    }
    let (dgamma, dbeta) = model.bn.param_grads(&bn_cache, &dx_all);
    grads.bn_gamma = dgamma;
    grads.bn_beta = dbeta;
    for (name, block) in grads.blocks() {
        if block.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    Ok(BpttOutput {
        loss: total_loss,
        grads,
        bn: updated.expect("train mode returns updated statistics"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub num_batches: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: DEFAULT_HIDDEN,
            num_batches: DEFAULT_BATCHES,
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            clip_norm: Some(DEFAULT_CLIP_NORM),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, samples: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden size must be >= 1".into()));
        }
        if self.num_batches == 0 || self.num_batches > samples {
            return Err(Error::Config(format!(
                "number of batches {} must lie in 1..={samples}",
                self.num_batches
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state over the trainable blocks.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &LstmModel, learning_rate: f64) -> Self {
        let shapes: Vec<usize> = model.trainable_blocks().iter().map(|(_, b)| b.len()).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut LstmModel, grads: &ModelGrads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let grad_blocks = grads.blocks();
        for (k, (_, params)) in model.trainable_blocks_mut().into_iter().enumerate() {
            let g = grad_blocks[k].1;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..params.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                params[j] -= self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Splits `n` items into `k` contiguous batches whose sizes differ by at
/// most one, larger batches first.
pub fn batch_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LstmModel,
    /// Sample-weighted mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train(samples: &[Sample], classes: usize, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate(samples.len())?;
    if classes < 2 {
        return Err(Error::Config(format!("need >= 2 classes, got {classes}")));
    }
    let input_dim = samples[0].sequence.cols();
    let mut seen = vec![false; classes];
    for s in samples {
        if s.label >= classes {
            return Err(Error::shape("train label", classes, s.label));
        }
        seen[s.label] = true;
    }
    if let Some(missing) = seen.iter().position(|&b| !b) {
        return Err(Error::MissingClass(missing));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LstmModel::init(input_dim, config.hidden_dim, classes, &mut rng);
    check_batch(samples, &model)?;
    let mut adam = Adam::new(&model, config.learning_rate);
    let sizes = batch_sizes(samples.len(), config.num_batches);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut start = 0;
        for &size in &sizes {
            let batch: Vec<Sample> = order[start..start + size].iter().map(|&i| samples[i].clone()).collect();
            start += size;
            let out = match bptt(&batch, &model) {
                Ok(out) => out,
                Err(Error::NonFiniteGradient(_)) | Err(Error::NonFinite(_)) => {
                    return Err(Error::Divergence { epoch, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() {
                return Err(Error::Divergence { epoch, loss: out.loss });
            }
            weighted += out.loss * size as f64;
            let mut grads = out.grads;
            if let Some(limit) = config.clip_norm {
                let norm = grads.global_norm();
                if norm > limit {
                    grads.scale(limit / norm);
                }
            }
            adam.step(&mut model, &grads);
            model.bn.running_mean = out.bn.running_mean;
            model.bn.running_var = out.bn.running_var;
        }
        let epoch_loss = weighted / samples.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: epoch_loss });
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome { model, epoch_losses })
}

const MODEL_MAGIC: &[u8; 4] = b"LFLM";
const MODEL_VERSION: u32 = 1;

impl LstmModel {
    /// `LFLM` little-endian encoding: header, LSTM blocks in declared order,
    /// batch-norm state, softmax head. All reals as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * (self.parameter_count() + 2 * self.input_dim() + 2));
        out.extend_from_slice(MODEL_MAGIC);
        for x in [MODEL_VERSION, self.input_dim() as u32, self.hidden_dim() as u32, self.class_count() as u32] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let mut put = |values: &[f64]| {
            for x in values {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (_, block) in self.params.blocks() {
            put(block);
        }
        put(&self.bn.gamma);
        put(&self.bn.beta);
        put(&self.bn.running_mean);
        put(&self.bn.running_var);
        put(&[self.bn.epsilon, self.bn.momentum]);
        put(self.head.weights.data());
        put(&self.head.bias);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "model");
        if r.take(4)? != MODEL_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let input_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let classes = r.u32()? as usize;
        if input_dim == 0 || hidden_dim == 0 || classes < 2 {
            return Err(r.fail("degenerate dimensions"));
        }
        let mut read = |n: usize| (0..n).map(|_| r.f64()).collect::<Result<Vec<f64>>>();
        let mut params = LstmParams::zeros(input_dim, hidden_dim);
        for (_, block) in params.blocks_mut() {
            let values = read(block.len())?;
            block.copy_from_slice(&values);
        }
        let gamma = read(input_dim)?;
        let beta = read(input_dim)?;
        let running_mean = read(input_dim)?;
        let running_var = read(input_dim)?;
        let tail = read(2)?;
        let bn = BatchNormState {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon: tail[0],
            momentum: tail[1],
        };
        let weights = Matrix::new(classes, hidden_dim, read(classes * hidden_dim)?)?;
        let bias = read(classes)?;
        if !r.is_done() {
            return Err(r.fail("trailing bytes"));
        }
        bn.validate()?;
        let model = LstmModel {
            params,
            bn,
            head: SoftmaxHead { weights, bias },
        };
        if model.trainable_blocks().iter().any(|(_, b)| b.iter().any(|x| !x.is_finite())) {
            return Err(Error::Format {
                kind: "model",
                reason: "non-finite parameter".into(),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
