//! Recurrent (LSTM) sleep model trained from scratch.
//!
//! The network is a stage embedding, a stack of LSTM layers and a softmax
//! output projection. A sixth, learned "start" embedding row is fed as the
//! input for the first prediction of each record, so recurrent and n-gram
//! models are scored over identical event sets.
//!
//! Everything is plain `f64` in one flat parameter vector. Per layer the four
//! gate blocks are stacked in the order input, forget, cell, output:
//!
//! ```text
//! z = w_input * x + w_hidden * h_prev + bias            (4H)
//! i = sigmoid(z_i)   f = sigmoid(z_f)   g = tanh(z_g)   o = sigmoid(z_o)
//! c = f . c_prev + i . g                                 h = o . tanh(c)
//! ```
//!
//! Training minimizes mean next-stage cross-entropy with truncated
//! backpropagation through time and an Adam step, and keeps the parameters
//! with the best validation perplexity. The analytic gradients are checked
//! against central finite differences by [`LstmSlm::gradient_check`].

use crate::error::{Error, Result};
use crate::hypnogram::Hypnogram;
use crate::metrics::perplexity;
use crate::model::SequenceModel;
use crate::stage::{SleepStage, StageDistribution, STAGE_COUNT};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Embedding rows: five stages plus the record-start marker.
const EMBED_ROWS: usize = STAGE_COUNT + 1;
/// Embedding row index of the record-start marker.
const START_ROW: usize = STAGE_COUNT;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;
const GRADIENT_CLIP_NORM: f64 = 5.0;
const INIT_SCALE: f64 = 0.08;

/// Architecture presets mirroring the large-model grid (layers, hidden).
pub const PRESET_GRID: [(usize, usize); 4] = [(2, 256), (2, 1024), (4, 256), (4, 1024)];

/// Hyperparameters for [`LstmSlm::train`]. `batch_size` counts truncated-BPTT
/// windows per optimizer step; every random choice (initialization, record
/// shuffling) is derived from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub bptt_len: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults; a 5-symbol alphabet does not need more.
    fn default() -> Self {
        TrainConfig {
            layers: 1,
            hidden: 64,
            embedding_dim: 16,
            learning_rate: 1e-3,
            max_epochs: 30,
            bptt_len: 32,
            batch_size: 16,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk defaults with one of the [`PRESET_GRID`] architectures.
    pub fn preset(layers: usize, hidden: usize) -> Self {
        TrainConfig {
            layers,
            hidden,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("embedding_dim", self.embedding_dim),
            ("max_epochs", self.max_epochs),
            ("bptt_len", self.bptt_len),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Parameter-vector layout shared by the model, gradients and serialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Shape {
    layers: usize,
    hidden: usize,
    emb: usize,
}

impl Shape {
    fn input_size(&self, layer: usize) -> usize {
        if layer == 0 {
            self.emb
        } else {
            self.hidden
        }
    }

    fn embed_len(&self) -> usize {
        EMBED_ROWS * self.emb
    }

    fn layer_len(&self, layer: usize) -> usize {
        let h4 = 4 * self.hidden;
        h4 * self.input_size(layer) + h4 * self.hidden + h4
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.embed_len() + (0..layer).map(|l| self.layer_len(l)).sum::<usize>()
    }

    fn w_input_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.layer_offset(layer);
        start..start + 4 * self.hidden * self.input_size(layer)
    }

    fn w_hidden_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.w_input_range(layer).end;
        start..start + 4 * self.hidden * self.hidden
    }

    fn bias_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.w_hidden_range(layer).end;
        start..start + 4 * self.hidden
    }

    fn out_w_range(&self) -> std::ops::Range<usize> {
        let start = self.layer_offset(self.layers);
        start..start + STAGE_COUNT * self.hidden
    }

    fn out_b_range(&self) -> std::ops::Range<usize> {
        let start = self.out_w_range().end;
        start..start + STAGE_COUNT
    }

    fn total(&self) -> usize {
        self.out_b_range().end
    }

    fn embed_row_range(&self, row: usize) -> std::ops::Range<usize> {
        row * self.emb..(row + 1) * self.emb
    }
}

/// The trained recurrent sleep model.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmSlm {
    shape: Shape,
    params: Vec<f64>,
}

/// Per-layer hidden and cell vectors; all zeros at a record start.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

impl LstmState {
    fn zeros(shape: &Shape) -> Self {
        LstmState {
            h: vec![vec![0.0; shape.hidden]; shape.layers],
            c: vec![vec![0.0; shape.hidden]; shape.layers],
        }
    }

    fn matches(&self, shape: &Shape) -> bool {
        self.h.len() == shape.layers
            && self.c.len() == shape.layers
            && self.h.iter().chain(&self.c).all(|v| v.len() == shape.hidden)
    }
}

/// Input of one recurrent step: the record-start marker or the previously
/// observed stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LstmInput {
    Start,
    Stage(SleepStage),
}

impl LstmInput {
    fn embed_row(self) -> usize {
        match self {
            LstmInput::Start => START_ROW,
            LstmInput::Stage(s) => s.index(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// y += W x for a row-major `rows x cols` block.
fn mat_vec_add(w: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (r, out) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *out += acc;
    }
}

/// y += W^T d for a row-major `rows x cols` block (d has `rows` entries).
fn mat_t_vec_add(w: &[f64], d: &[f64], y: &mut [f64]) {
    let cols = y.len();
    for (r, dr) in d.iter().enumerate() {
        if *dr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (out, a) in y.iter_mut().zip(row) {
            *out += dr * a;
        }
    }
}

/// Forward activations of one step, kept for backpropagation.
struct StepTrace {
    input_row: usize,
    target: usize,
    /// Per layer: activated gates (i, f, g, o stacked), tanh(cell), hidden,
    /// and the incoming hidden/cell.
    gates: Vec<Vec<f64>>,
    tanh_c: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    h_prev: Vec<Vec<f64>>,
    c_prev: Vec<Vec<f64>>,
    probs: [f64; STAGE_COUNT],
}

impl LstmSlm {
    /// Randomly initialized model; weights uniform in `[-0.08, 0.08]`, biases
    /// zero except the forget gates at 1.
    pub fn new_random(layers: usize, hidden: usize, embedding_dim: usize, seed: u64) -> Result<Self> {
        if layers == 0 || hidden == 0 || embedding_dim == 0 {
            return Err(Error::InvalidArgument(
                "layers, hidden and embedding_dim must be positive".into(),
            ));
        }
        let shape = Shape {
            layers,
            hidden,
            emb: embedding_dim,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<f64> = (0..shape.total())
            .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
            .collect();
        for l in 0..layers {
            let bias = &mut params[shape.bias_range(l)];
            for b in bias.iter_mut() {
                *b = 0.0;
            }
            for b in &mut bias[hidden..2 * hidden] {
                *b = 1.0; // forget-gate bias
            }
        }
        Ok(LstmSlm { shape, params })
    }

    pub fn layer_count(&self) -> usize {
        self.shape.layers
    }

    pub fn hidden_size(&self) -> usize {
        self.shape.hidden
    }

    pub fn embedding_dim(&self) -> usize {
        self.shape.emb
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// One recurrent step: consumes `input`, returns the next-stage
    /// distribution and the successor state.
    pub fn step(&self, state: &LstmState, input: LstmInput) -> Result<(StageDistribution, LstmState)> {
        if !state.matches(&self.shape) {
            return Err(Error::InvalidArgument(format!(
                "state dimensions do not match model ({} layers x {} hidden)",
                self.shape.layers, self.shape.hidden
            )));
        }
        let mut next = state.clone();
        self.advance_raw(&mut next, input.embed_row());
        let dist = self.output_distribution(&next);
        Ok((dist, next))
    }

    /// Advances `state` in place through all layers for one input row.
    fn advance_raw(&self, state: &mut LstmState, input_row: usize) {
        let h = self.shape.hidden;
        let mut x: Vec<f64> = self.params[self.shape.embed_row_range(input_row)].to_vec();
        for l in 0..self.shape.layers {
            let mut z = vec![0.0; 4 * h];
            z.copy_from_slice(&self.params[self.shape.bias_range(l)]);
            mat_vec_add(&self.params[self.shape.w_input_range(l)], &x, &mut z);
            mat_vec_add(&self.params[self.shape.w_hidden_range(l)], &state.h[l], &mut z);
            let c_prev = &state.c[l];
            let mut c_new = vec![0.0; h];
            let mut h_new = vec![0.0; h];
            for u in 0..h {
                let i = sigmoid(z[u]);
                let f = sigmoid(z[h + u]);
                let g = z[2 * h + u].tanh();
                let o = sigmoid(z[3 * h + u]);
                let c = f * c_prev[u] + i * g;
                c_new[u] = c;
                h_new[u] = o * c.tanh();
            }
            state.c[l] = c_new;
            x = h_new.clone();
            state.h[l] = h_new;
        }
    }

    /// Softmax over the output projection of the top hidden vector.
    fn output_distribution(&self, state: &LstmState) -> StageDistribution {
        let h_top = &state.h[self.shape.layers - 1];
        let mut logits = [0.0; STAGE_COUNT];
        logits.copy_from_slice(&self.params[self.shape.out_b_range()]);
        mat_vec_add(&self.params[self.shape.out_w_range()], h_top, &mut logits);
        StageDistribution::new_unchecked(softmax(&logits))
    }

    /// Runs one truncated-BPTT window forward from `state` (which is advanced
    /// in place to the window end), returning traces and summed cross-entropy.
    fn forward_window(
        &self,
        state: &mut LstmState,
        inputs: &[usize],
        targets: &[SleepStage],
    ) -> (Vec<StepTrace>, f64) {
        debug_assert_eq!(inputs.len(), targets.len());
        let shape = &self.shape;
        let h = shape.hidden;
        let mut traces = Vec::with_capacity(inputs.len());
        let mut loss = 0.0;
        for (&input_row, &target) in inputs.iter().zip(targets) {
            let mut gates_all = Vec::with_capacity(shape.layers);
            let mut tanh_c_all = Vec::with_capacity(shape.layers);
            let mut h_all = Vec::with_capacity(shape.layers);
            let h_prev = state.h.clone();
            let c_prev = state.c.clone();
            let mut x: Vec<f64> = self.params[shape.embed_row_range(input_row)].to_vec();
            for l in 0..shape.layers {
                let mut z = vec![0.0; 4 * h];
                z.copy_from_slice(&self.params[shape.bias_range(l)]);
                mat_vec_add(&self.params[shape.w_input_range(l)], &x, &mut z);
                mat_vec_add(&self.params[shape.w_hidden_range(l)], &state.h[l], &mut z);
                let mut c_new = vec![0.0; h];
                let mut tanh_c = vec![0.0; h];
                let mut h_new = vec![0.0; h];
                for u in 0..h {
                    z[u] = sigmoid(z[u]);
                    z[h + u] = sigmoid(z[h + u]);
                    z[2 * h + u] = z[2 * h + u].tanh();
                    z[3 * h + u] = sigmoid(z[3 * h + u]);
                    let c = z[h + u] * state.c[l][u] + z[u] * z[2 * h + u];
                    c_new[u] = c;
                    tanh_c[u] = c.tanh();
                    h_new[u] = z[3 * h + u] * tanh_c[u];
                }
                state.c[l] = c_new;
                state.h[l] = h_new.clone();
                x = h_new.clone();
                gates_all.push(z);
                tanh_c_all.push(tanh_c);
                h_all.push(h_new);
            }
            let mut logits = [0.0; STAGE_COUNT];
            logits.copy_from_slice(&self.params[shape.out_b_range()]);
            mat_vec_add(
                &self.params[shape.out_w_range()],
                &h_all[shape.layers - 1],
                &mut logits,
            );
            let probs = softmax(&logits);
            loss -= probs[target.index()].ln();
            traces.push(StepTrace {
                input_row,
                target: target.index(),
                gates: gates_all,
                tanh_c: tanh_c_all,
                h: h_all,
                h_prev,
                c_prev,
                probs,
            });
        }
        (traces, loss)
    }

    /// Accumulates the gradients of the summed window loss into `grads`.
    fn backward_window(&self, traces: &[StepTrace], grads: &mut [f64]) {
        let shape = &self.shape;
        let h = shape.hidden;
        let layers = shape.layers;
        let mut dh_next = vec![vec![0.0; h]; layers];
        let mut dc_next = vec![vec![0.0; h]; layers];
        for trace in traces.iter().rev() {
            // Output projection.
            let mut dlogits = trace.probs;
            dlogits[trace.target] -= 1.0;
            let h_top = &trace.h[layers - 1];
            {
                let out_w_grad = &mut grads[shape.out_w_range()];
                for (j, d) in dlogits.iter().enumerate() {
                    for (u, hv) in h_top.iter().enumerate() {
                        out_w_grad[j * h + u] += d * hv;
                    }
                }
            }
            {
                let out_b_grad = &mut grads[shape.out_b_range()];
                for (j, d) in dlogits.iter().enumerate() {
                    out_b_grad[j] += d;
                }
            }
            let mut dx_above = vec![0.0; h];
            mat_t_vec_add(&self.params[shape.out_w_range()], &dlogits, &mut dx_above);

            for l in (0..layers).rev() {
                let mut dh = dx_above.clone();
                for (a, b) in dh.iter_mut().zip(&dh_next[l]) {
                    *a += b;
                }
                let gates = &trace.gates[l];
                let tanh_c = &trace.tanh_c[l];
                let c_prev = &trace.c_prev[l];
                let mut dz = vec![0.0; 4 * h];
                let mut dc_out = vec![0.0; h];
                for u in 0..h {
                    let i = gates[u];
                    let f = gates[h + u];
                    let g = gates[2 * h + u];
                    let o = gates[3 * h + u];
                    let tc = tanh_c[u];
                    let dc = dh[u] * o * (1.0 - tc * tc) + dc_next[l][u];
                    dz[u] = dc * g * i * (1.0 - i);
                    dz[h + u] = dc * c_prev[u] * f * (1.0 - f);
                    dz[2 * h + u] = dc * i * (1.0 - g * g);
                    dz[3 * h + u] = dh[u] * tc * o * (1.0 - o);
                    dc_out[u] = dc * f;
                }
                dc_next[l] = dc_out;

                let x: &[f64] = if l == 0 {
                    &self.params[shape.embed_row_range(trace.input_row)]
                } else {
                    &trace.h[l - 1]
                };
                let in_len = x.len();
                {
                    let w_in_grad = &mut grads[shape.w_input_range(l)];
                    for (r, d) in dz.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        let row = &mut w_in_grad[r * in_len..(r + 1) * in_len];
                        for (slot, xv) in row.iter_mut().zip(x) {
                            *slot += d * xv;
                        }
                    }
                }
                {
                    let w_rec_grad = &mut grads[shape.w_hidden_range(l)];
                    let h_prev = &trace.h_prev[l];
                    for (r, d) in dz.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        let row = &mut w_rec_grad[r * h..(r + 1) * h];
                        for (slot, hv) in row.iter_mut().zip(h_prev) {
                            *slot += d * hv;
                        }
                    }
                }
                {
                    let bias_grad = &mut grads[shape.bias_range(l)];
                    for (slot, d) in bias_grad.iter_mut().zip(&dz) {
                        *slot += d;
                    }
                }
                let mut dx = vec![0.0; in_len];
                mat_t_vec_add(&self.params[shape.w_input_range(l)], &dz, &mut dx);
                let mut dh_prev = vec![0.0; h];
                mat_t_vec_add(&self.params[shape.w_hidden_range(l)], &dz, &mut dh_prev);
                dh_next[l] = dh_prev;
                dx_above = dx;
            }
            // dx_above now carries the embedding-row gradient.
            let embed_grad = &mut grads[shape.embed_row_range(trace.input_row)];
            for (slot, d) in embed_grad.iter_mut().zip(&dx_above) {
                *slot += d;
            }
        }
    }

    /// Total cross-entropy of `stages` scored from the record start.
    pub fn sequence_loss(&self, stages: &[SleepStage]) -> f64 {
        let (inputs, targets) = record_events(stages);
        let mut state = LstmState::zeros(&self.shape);
        let (_, loss) = self.forward_window(&mut state, &inputs, targets);
        loss
    }

    /// Analytic gradients of [`LstmSlm::sequence_loss`] for every parameter.
    pub fn sequence_gradients(&self, stages: &[SleepStage]) -> Vec<f64> {
        let (inputs, targets) = record_events(stages);
        let mut state = LstmState::zeros(&self.shape);
        let (traces, _) = self.forward_window(&mut state, &inputs, targets);
        let mut grads = vec![0.0; self.params.len()];
        self.backward_window(&traces, &mut grads);
        grads
    }

    /// Central finite differences of [`LstmSlm::sequence_loss`].
    pub fn finite_difference_gradients(&self, stages: &[SleepStage], step: f64) -> Vec<f64> {
        let mut probe = self.clone();
        let mut grads = vec![0.0; self.params.len()];
        for idx in 0..probe.params.len() {
            let original = probe.params[idx];
            probe.params[idx] = original + step;
            let up = probe.sequence_loss(stages);
            probe.params[idx] = original - step;
            let down = probe.sequence_loss(stages);
            probe.params[idx] = original;
            grads[idx] = (up - down) / (2.0 * step);
        }
        grads
    }

    /// Compares every analytic gradient against central finite differences
    /// (step 1e-5) and returns the maximum relative error
    /// `|a - n| / max(1, |a|, |n|)`. Restricted to short sequences and small
    /// models, where finite differences are trustworthy.
    pub fn gradient_check(&self, stages: &[SleepStage]) -> Result<f64> {
        if stages.is_empty() || stages.len() > 8 {
            return Err(Error::InvalidArgument(
                "gradient check needs a sequence of 1..=8 stages".into(),
            ));
        }
        if self.shape.hidden > 8 {
            return Err(Error::InvalidArgument(
                "gradient check is limited to hidden sizes <= 8".into(),
            ));
        }
        let analytic = self.sequence_gradients(stages);
        let numeric = self.finite_difference_gradients(stages, 1e-5);
        Ok(max_relative_error(&analytic, &numeric))
    }

    /// Trains a fresh model on `train`, early-stopping on `valid` perplexity.
    /// Returns the best model and the per-epoch validation perplexities.
    pub fn train(
        train: &[Hypnogram],
        valid: &[Hypnogram],
        config: &TrainConfig,
    ) -> Result<(LstmSlm, Vec<f64>)> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyInput("training split has no records".into()));
        }
        if valid.is_empty() {
            return Err(Error::EmptyInput("validation split has no records".into()));
        }
        let mut model =
            LstmSlm::new_random(config.layers, config.hidden, config.embedding_dim, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let mut adam = AdamState::new(model.params.len(), config.learning_rate);
        let mut grads = vec![0.0; model.params.len()];
        let mut batch_windows = 0usize;
        let mut batch_targets = 0usize;

        let mut history = Vec::new();
        let mut best_params: Option<Vec<f64>> = None;
        let mut best_ppl = f64::INFINITY;
        let mut epochs_since_best = 0usize;

        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=config.max_epochs {
            order.shuffle(&mut rng);
            for &record_idx in &order {
                let stages = train[record_idx].stages();
                let (inputs, targets) = record_events(stages);
                let mut state = LstmState::zeros(&model.shape);
                let mut pos = 0usize;
                while pos < inputs.len() {
                    let end = (pos + config.bptt_len).min(inputs.len());
                    let (traces, loss) =
                        model.forward_window(&mut state, &inputs[pos..end], &targets[pos..end]);
                    if !loss.is_finite() {
                        return Err(Error::Numeric(format!(
                            "training diverged: non-finite loss at optimizer step {} (epoch {epoch})",
                            adam.step_count + 1
                        )));
                    }
                    model.backward_window(&traces, &mut grads);
                    batch_targets += end - pos;
                    batch_windows += 1;
                    pos = end;
                    if batch_windows == config.batch_size {
                        adam.apply(&mut model.params, &mut grads, batch_targets);
                        batch_windows = 0;
                        batch_targets = 0;
                    }
                }
            }
            if batch_windows > 0 {
                adam.apply(&mut model.params, &mut grads, batch_targets);
                batch_windows = 0;
                batch_targets = 0;
            }

            let valid_ppl = perplexity(&model, valid)?;
            if !valid_ppl.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: non-finite validation perplexity after epoch {epoch}"
                )));
            }
            history.push(valid_ppl);
            if valid_ppl < best_ppl {
                best_ppl = valid_ppl;
                best_params = Some(model.params.clone());
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best >= config.patience {
                    break;
                }
            }
        }
        if let Some(params) = best_params {
            model.params = params;
        }
        Ok((model, history))
    }

    /// Renders the model text format: header, then named arrays with explicit
    /// dimensions, rows of full-precision floats.
    pub fn to_text(&self) -> String {
        let shape = &self.shape;
        let mut out = String::from("SLM-LSTM v1\n");
        writeln!(
            out,
            "layers={} hidden={} embedding={}",
            shape.layers, shape.hidden, shape.emb
        )
        .expect("string write");
        let mut write_array = |name: &str, rows: usize, cols: usize, data: &[f64]| {
            debug_assert_eq!(data.len(), rows * cols);
            writeln!(out, "array {name} {rows} {cols}").expect("string write");
            for r in 0..rows {
                for (i, v) in data[r * cols..(r + 1) * cols].iter().enumerate() {
                    if i > 0 {
                        out.push(' ');
                    }
                    write!(out, "{v}").expect("string write");
                }
                out.push('\n');
            }
        };
        write_array("embedding", EMBED_ROWS, shape.emb, &self.params[..shape.embed_len()]);
        for l in 0..shape.layers {
            write_array(
                &format!("layer{l}.w_input"),
                4 * shape.hidden,
                shape.input_size(l),
                &self.params[shape.w_input_range(l)],
            );
            write_array(
                &format!("layer{l}.w_hidden"),
                4 * shape.hidden,
                shape.hidden,
                &self.params[shape.w_hidden_range(l)],
            );
            write_array(
                &format!("layer{l}.bias"),
                1,
                4 * shape.hidden,
                &self.params[shape.bias_range(l)],
            );
        }
        write_array(
            "output.weight",
            STAGE_COUNT,
            shape.hidden,
            &self.params[shape.out_w_range()],
        );
        write_array("output.bias", 1, STAGE_COUNT, &self.params[shape.out_b_range()]);
        out
    }

    pub fn parse_text(input: &str, origin: &str) -> Result<Self> {
        let mut lines = input.lines().enumerate().peekable();
        let Some((_, first)) = lines.next() else {
            return Err(Error::parse(origin, 1, "empty input"));
        };
        if first.trim() != "SLM-LSTM v1" {
            return Err(Error::parse(
                origin,
                1,
                format!("expected header \"SLM-LSTM v1\", found {first:?}"),
            ));
        }
        let Some((_, dims_line)) = lines.next() else {
            return Err(Error::parse(origin, 2, "missing dimension line"));
        };
        let fields: Vec<&str> = dims_line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                origin,
                2,
                "expected \"layers=<L> hidden=<H> embedding=<D>\"",
            ));
        }
        let layers: usize = parse_kv(fields[0], "layers", origin)?;
        let hidden: usize = parse_kv(fields[1], "hidden", origin)?;
        let emb: usize = parse_kv(fields[2], "embedding", origin)?;
        if layers == 0 || hidden == 0 || emb == 0 {
            return Err(Error::parse(origin, 2, "dimensions must be positive"));
        }
        let shape = Shape {
            layers,
            hidden,
            emb,
        };
        let mut params = vec![0.0; shape.total()];

        let mut expected: Vec<(String, usize, usize, std::ops::Range<usize>)> = Vec::new();
        expected.push(("embedding".into(), EMBED_ROWS, emb, 0..shape.embed_len()));
        for l in 0..layers {
            expected.push((
                format!("layer{l}.w_input"),
                4 * hidden,
                shape.input_size(l),
                shape.w_input_range(l),
            ));
            expected.push((
                format!("layer{l}.w_hidden"),
                4 * hidden,
                hidden,
                shape.w_hidden_range(l),
            ));
            expected.push((format!("layer{l}.bias"), 1, 4 * hidden, shape.bias_range(l)));
        }
        expected.push(("output.weight".into(), STAGE_COUNT, hidden, shape.out_w_range()));
        expected.push(("output.bias".into(), 1, STAGE_COUNT, shape.out_b_range()));

        for (name, rows, cols, range) in expected {
            let Some((idx, line)) = lines.next() else {
                return Err(Error::parse(
                    origin,
                    0,
                    format!("truncated file: missing array {name}"),
                ));
            };
            let line_no = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 || fields[0] != "array" {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("expected \"array {name} {rows} {cols}\", found {line:?}"),
                ));
            }
            if fields[1] != name {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("expected array {name}, found {}", fields[1]),
                ));
            }
            let got_rows: usize = fields[2]
                .parse()
                .map_err(|_| Error::parse(origin, line_no, "invalid row count"))?;
            let got_cols: usize = fields[3]
                .parse()
                .map_err(|_| Error::parse(origin, line_no, "invalid column count"))?;
            if got_rows != rows || got_cols != cols {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!(
                        "dimension mismatch for {name}: declared {got_rows}x{got_cols}, model requires {rows}x{cols}"
                    ),
                ));
            }
            let slot = &mut params[range];
            for r in 0..rows {
                let Some((idx, line)) = lines.next() else {
                    return Err(Error::parse(
                        origin,
                        0,
                        format!("truncated array {name}: {r} of {rows} rows present"),
                    ));
                };
                let line_no = idx + 1;
                let values: Vec<&str> = line.split_whitespace().collect();
                if values.len() != cols {
                    return Err(Error::parse(
                        origin,
                        line_no,
                        format!("expected {cols} values in array {name}, found {}", values.len()),
                    ));
                }
                for (i, v) in values.iter().enumerate() {
                    let value: f64 = v.parse().map_err(|_| {
                        Error::parse(origin, line_no, format!("invalid float {v:?}"))
                    })?;
                    if !value.is_finite() {
                        return Err(Error::parse(
                            origin,
                            line_no,
                            format!("non-finite value {value} in array {name}"),
                        ));
                    }
                    slot[r * cols + i] = value;
                }
            }
        }
        if let Some((idx, line)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse(
                origin,
                idx + 1,
                format!("unexpected trailing content {line:?}"),
            ));
        }
        Ok(LstmSlm { shape, params })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_text(&text, &path.display().to_string())
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Inputs and targets of one record: the start marker then all stages but the
/// last predict, and every stage is a target exactly once.
fn record_events(stages: &[SleepStage]) -> (Vec<usize>, &[SleepStage]) {
    let mut inputs = Vec::with_capacity(stages.len());
    inputs.push(START_ROW);
    inputs.extend(stages[..stages.len() - 1].iter().map(|s| s.index()));
    (inputs, stages)
}

fn softmax(logits: &[f64; STAGE_COUNT]) -> [f64; STAGE_COUNT] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; STAGE_COUNT];
    let mut sum = 0.0;
    for (p, l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        sum += *p;
    }
    for p in &mut probs {
        *p /= sum;
    }
    probs
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

fn parse_kv<T: std::str::FromStr>(field: &str, name: &str, origin: &str) -> Result<T> {
    let value = field
        .strip_prefix(name)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| {
            Error::parse(origin, 2, format!("expected \"{name}=<value>\", found {field:?}"))
        })?;
    value
        .parse()
        .map_err(|_| Error::parse(origin, 2, format!("invalid value in {field:?}")))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    learning_rate: f64,
    step_count: u64,
}

impl AdamState {
    fn new(len: usize, learning_rate: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            learning_rate,
            step_count: 0,
        }
    }

    /// Averages the accumulated gradients over `targets`, clips the global
    /// norm at 5 and applies one bias-corrected Adam update. Clears `grads`.
    fn apply(&mut self, params: &mut [f64], grads: &mut [f64], targets: usize) {
        let scale = 1.0 / targets.max(1) as f64;
        let mut norm_sq = 0.0;
        for g in grads.iter_mut() {
            *g *= scale;
            norm_sq += *g * *g;
        }
        let norm = norm_sq.sqrt();
        if norm > GRADIENT_CLIP_NORM {
            let shrink = GRADIENT_CLIP_NORM / norm;
            for g in grads.iter_mut() {
                *g *= shrink;
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let m_corr = 1.0 - ADAM_BETA1.powi(t);
        let v_corr = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter_mut())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * *g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * *g * *g;
            let m_hat = *m / m_corr;
            let v_hat = *v / v_corr;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            *g = 0.0;
        }
    }
}

impl SequenceModel for LstmSlm {
    type State = LstmState;

    fn start(&self) -> LstmState {
        let mut state = LstmState::zeros(&self.shape);
        self.advance_raw(&mut state, START_ROW);
        state
    }

    fn predict(&self, state: &LstmState) -> StageDistribution {
        self.output_distribution(state)
    }

    fn advance(&self, state: &mut LstmState, observed: SleepStage) {
        self.advance_raw(state, observed.index());
    }
}
