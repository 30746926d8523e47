//! The AttentionLSTM encoder-decoder and its two baselines.
//!
//! Encoder: every window row is augmented with its Time2Vec embedding and
//! passed through a stack of LSTM layers (14 then 7 units by default), each
//! followed by layer normalization, with dropout between layers. The
//! decoder is one LSTM cell initialized from the top encoder layer's final
//! state; it consumes the (augmented) last window row. Fine-grained
//! attention over the top layer's normalized states, scored against the
//! decoder's previous state, produces a context vector, and a linear head
//! maps `concat(context, decoder h)` to the next scaled target value.
//!
//! Multi-step forecasts are recursive: the prediction replaces the target
//! column of a copy of the last row, exogenous columns are carried forward,
//! and the window slides by one day.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionKind, AttentionResult, AttentionScorerParams, AttentionScorerVars};
use crate::error::{Error, Result};
use crate::layers::{
    check_dropout_rate, dense, dropout, layer_norm, lstm_sequence, lstm_step, time2vec, DenseParams,
    DenseVars, LayerNormParams, LayerNormVars, LstmCellParams, LstmCellVars, LstmState,
    LstmStateVars, Mode, Parameters, Time2VecParams, Time2VecVars,
};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    AttentionLstm,
    PlainLstm,
    Persistence,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::AttentionLstm => "attention_lstm",
            ModelKind::PlainLstm => "plain_lstm",
            ModelKind::Persistence => "persistence",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::AttentionLstm => "AttentionLSTM",
            ModelKind::PlainLstm => "LSTM",
            ModelKind::Persistence => "Persistence",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention_lstm" => Some(ModelKind::AttentionLstm),
            "plain_lstm" => Some(ModelKind::PlainLstm),
            "persistence" => Some(ModelKind::Persistence),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub encoder_layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub time2vec_l: usize,
    pub feature_count: usize,
    /// Column of the window holding the forecast target.
    pub target_index: usize,
    pub kind: ModelKind,
    pub attention: AttentionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 7,
            encoder_layer_sizes: vec![14, 7],
            dropout_rate: 0.20,
            time2vec_l: 7,
            feature_count: 3,
            target_index: 0,
            kind: ModelKind::AttentionLstm,
            attention: AttentionKind::FineGrained,
        }
    }
}

fn lstm_param_count(input: usize, hidden: usize) -> usize {
    4 * (hidden * (hidden + input) + hidden)
}

impl ModelConfig {
    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 {
            return Err(Error::Config("lookback must be at least 1".into()));
        }
        if self.encoder_layer_sizes.is_empty() || self.encoder_layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "encoder layer sizes must be positive, got {:?}",
                self.encoder_layer_sizes
            )));
        }
        if self.encoder_layer_sizes.iter().any(|&m| m < 2) {
            return Err(Error::Config(
                "layer normalization needs every encoder layer to have at least 2 units".into(),
            ));
        }
        check_dropout_rate(self.dropout_rate)?;
        if self.feature_count == 0 || self.target_index >= self.feature_count {
            return Err(Error::Config(format!(
                "target index {} outside {} features",
                self.target_index, self.feature_count
            )));
        }
        Ok(())
    }

    pub fn top_size(&self) -> usize {
        *self.encoder_layer_sizes.last().expect("validated")
    }

    /// Width of an encoder input row.
    pub fn encoder_input_size(&self) -> usize {
        match self.kind {
            ModelKind::AttentionLstm => self.feature_count + self.time2vec_l + 1,
            _ => self.feature_count,
        }
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut input = self.encoder_input_size();
        let mut encoder = 0;
        for &m in &self.encoder_layer_sizes {
            encoder += lstm_param_count(input, m) + 2 * m;
            input = m;
        }
        let top = self.top_size();
        match self.kind {
            ModelKind::Persistence => 0,
            ModelKind::PlainLstm => encoder + top + 1,
            ModelKind::AttentionLstm => {
                let arity = match self.attention {
                    AttentionKind::Basic => 1,
                    AttentionKind::FineGrained => top,
                };
                let t2v = 2 * (self.time2vec_l + 1);
                let decoder = lstm_param_count(self.encoder_input_size(), top);
                let scorer = (2 * top) * top + top + top * arity + arity;
                let head = 2 * top + 1;
                t2v + encoder + decoder + scorer + head
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<LstmCellParams>,
    pub norms: Vec<LayerNormParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLstmModel {
    pub t2v: Time2VecParams,
    pub encoder: Encoder,
    pub decoder: LstmCellParams,
    pub scorer: AttentionScorerParams,
    pub output: DenseParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainLstmModel {
    pub encoder: Encoder,
    pub output: DenseParams,
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Network {
    AttentionLstm(AttentionLstmModel),
    PlainLstm(PlainLstmModel),
    Persistence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub network: Network,
}

/// Predictions in scaled space plus the attention weights behind each.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastPath {
    pub predictions: Vec<f64>,
    pub attention_traces: Vec<AttentionResult>,
}

struct EncoderVars {
    layers: Vec<LstmCellVars>,
    norms: Vec<LayerNormVars>,
}

enum NetworkVars {
    AttentionLstm {
        t2v: Time2VecVars,
        encoder: EncoderVars,
        decoder: LstmCellVars,
        scorer: AttentionScorerVars,
        output: DenseVars,
    },
    PlainLstm {
        encoder: EncoderVars,
        output: DenseVars,
    },
    Persistence,
}

/// Model parameters bound as trainable leaves of one graph.
pub struct BoundModel {
    leaves: Vec<Var>,
    vars: NetworkVars,
}

impl BoundModel {
    /// Leaves in [`Model::named_tensors`] order.
    pub fn vars(&self) -> &[Var] {
        &self.leaves
    }
}

struct Leaves<'a>(std::slice::Iter<'a, Var>);

impl Leaves<'_> {
    fn next(&mut self) -> Var {
        *self.0.next().expect("leaf count checked")
    }

    fn dense(&mut self) -> DenseVars {
        DenseVars {
            weight: self.next(),
            bias: self.next(),
        }
    }

    fn lstm(&mut self, p: &LstmCellParams) -> LstmCellVars {
        LstmCellVars {
            input_size: p.input_size,
            hidden_size: p.hidden_size,
            forget: self.dense(),
            input: self.dense(),
            candidate: self.dense(),
            output: self.dense(),
        }
    }

    fn encoder(&mut self, e: &Encoder) -> EncoderVars {
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for (layer, norm) in e.layers.iter().zip(&e.norms) {
            layers.push(self.lstm(layer));
            norms.push(LayerNormVars {
                gain: self.next(),
                offset: self.next(),
                epsilon: norm.epsilon,
            });
        }
        EncoderVars { layers, norms }
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    /// Scalar prediction, shape `[1]`.
    pub prediction: Var,
    /// Top encoder states `[lookback × top]` (absent for persistence).
    pub states: Option<Var>,
    pub attention: Option<crate::attention::AttentionVars>,
}

impl Encoder {
    fn init(config: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let mut input = config.encoder_input_size();
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for &m in &config.encoder_layer_sizes {
            layers.push(LstmCellParams::init(input, m, rng));
            norms.push(LayerNormParams::new(m));
            input = m;
        }
        Encoder { layers, norms }
    }

    fn zeros(config: &ModelConfig) -> Self {
        let mut input = config.encoder_input_size();
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for &m in &config.encoder_layer_sizes {
            layers.push(LstmCellParams::zeros(input, m));
            norms.push(LayerNormParams::zeros(m));
            input = m;
        }
        Encoder { layers, norms }
    }
}

impl Parameters for Encoder {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, (layer, norm)) in self.layers.iter().zip(&self.norms).enumerate() {
            layer.tensors(&format!("{prefix}lstm{}.", i + 1), out);
            norm.tensors(&format!("{prefix}norm{}.", i + 1), out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for (layer, norm) in self.layers.iter_mut().zip(self.norms.iter_mut()) {
            layer.tensors_mut(out);
            norm.tensors_mut(out);
        }
    }
}

/// Runs the encoder stack over `rows`, returning the normalized top-layer
/// states `[T × top]` and the top layer's final raw LSTM state.
fn encode_rows(
    g: &mut Graph,
    encoder: &EncoderVars,
    rows: Vec<Var>,
    dropout_rate: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Var, LstmStateVars)> {
    let depth = encoder.layers.len();
    let mut inputs = rows;
    let mut final_state = None;
    for (i, (layer, norm)) in encoder.layers.iter().zip(&encoder.norms).enumerate() {
        let init = LstmState::zeros(layer.hidden_size).bind(g);
        let (states, last) = lstm_sequence(g, layer, init, &inputs)?;
        let mut next = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let h = g.row(states, t)?;
            let mut y = layer_norm(g, norm, h)?;
            if i + 1 < depth {
                y = dropout(g, dropout_rate, y, mode, rng)?;
            }
            next.push(y);
        }
        inputs = next;
        final_state = Some(last);
    }
    let top = g.stack_rows(&inputs)?;
    Ok((top, final_state.expect("at least one layer")))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let network = match config.kind {
            ModelKind::AttentionLstm => {
                let top = config.top_size();
                let input = config.encoder_input_size();
                let t2v = Time2VecParams::init(config.time2vec_l, &mut rng);
                let encoder = Encoder::init(&config, &mut rng);
                let decoder = LstmCellParams::init(input, top, &mut rng);
                let scorer = AttentionScorerParams::init(config.attention, top, top, top, &mut rng);
                let output = DenseParams::init(2 * top, 1, &mut rng);
                Network::AttentionLstm(AttentionLstmModel {
                    t2v,
                    encoder,
                    decoder,
                    scorer,
                    output,
                })
            }
            ModelKind::PlainLstm => {
                let encoder = Encoder::init(&config, &mut rng);
                let output = DenseParams::init(config.top_size(), 1, &mut rng);
                Network::PlainLstm(PlainLstmModel { encoder, output })
            }
            ModelKind::Persistence => Network::Persistence,
        };
        Ok(Model { config, network })
    }

    /// Every parameter zero, including normalization gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let top = config.top_size();
        let network = match config.kind {
            ModelKind::AttentionLstm => Network::AttentionLstm(AttentionLstmModel {
                t2v: Time2VecParams::zeros(config.time2vec_l),
                encoder: Encoder::zeros(&config),
                decoder: LstmCellParams::zeros(config.encoder_input_size(), top),
                scorer: AttentionScorerParams::zeros(config.attention, top, top, top),
                output: DenseParams::zeros(2 * top, 1),
            }),
            ModelKind::PlainLstm => Network::PlainLstm(PlainLstmModel {
                encoder: Encoder::zeros(&config),
                output: DenseParams::zeros(top, 1),
            }),
            ModelKind::Persistence => Network::Persistence,
        };
        Ok(Model { config, network })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.network {
            Network::AttentionLstm(m) => {
                m.t2v.tensors("t2v.", &mut out);
                m.encoder.tensors("encoder.", &mut out);
                m.decoder.tensors("decoder.", &mut out);
                m.scorer.tensors("scorer.", &mut out);
                m.output.tensors("head.", &mut out);
            }
            Network::PlainLstm(m) => {
                m.encoder.tensors("encoder.", &mut out);
                m.output.tensors("head.", &mut out);
            }
            Network::Persistence => {}
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        match &mut self.network {
            Network::AttentionLstm(m) => {
                m.t2v.tensors_mut(&mut out);
                m.encoder.tensors_mut(&mut out);
                m.decoder.tensors_mut(&mut out);
                m.scorer.tensors_mut(&mut out);
                m.output.tensors_mut(&mut out);
            }
            Network::PlainLstm(m) => {
                m.encoder.tensors_mut(&mut out);
                m.output.tensors_mut(&mut out);
            }
            Network::Persistence => {}
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Binds the model's tensors as fresh trainable leaves of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let leaves: Vec<Var> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect();
        self.bind_leaves(&leaves).expect("leaf count matches")
    }

    /// Interprets `leaves` (in [`Model::named_tensors`] order) as this
    /// model's parameters.
    pub fn bind_leaves(&self, leaves: &[Var]) -> Result<BoundModel> {
        let expected = self.named_tensors().len();
        if leaves.len() != expected {
            return Err(Error::dim("model leaves", &[expected], &[leaves.len()]));
        }
        let mut it = Leaves(leaves.iter());
        let vars = match &self.network {
            Network::AttentionLstm(m) => NetworkVars::AttentionLstm {
                t2v: Time2VecVars {
                    alpha: it.next(),
                    beta: it.next(),
                },
                encoder: it.encoder(&m.encoder),
                decoder: it.lstm(&m.decoder),
                scorer: AttentionScorerVars {
                    hidden: it.dense(),
                    output: it.dense(),
                },
                output: it.dense(),
            },
            Network::PlainLstm(m) => NetworkVars::PlainLstm {
                encoder: it.encoder(&m.encoder),
                output: it.dense(),
            },
            Network::Persistence => NetworkVars::Persistence,
        };
        Ok(BoundModel {
            leaves: leaves.to_vec(),
            vars,
        })
    }

    fn check_window(&self, window: &Tensor, times: &[f64]) -> Result<()> {
        let expected = [self.config.lookback, self.config.feature_count];
        if window.shape() != expected {
            return Err(Error::dim("model window", &expected, window.shape()));
        }
        if times.len() != self.config.lookback {
            return Err(Error::dim("window time indices", &[self.config.lookback], &[times.len()]));
        }
        if !window.all_finite() {
            return Err(Error::NonFinite("model window".into()));
        }
        Ok(())
    }

    /// Builds the forward pass for one window on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        window: &Tensor,
        times: &[f64],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardVars> {
        self.check_window(window, times)?;
        let lookback = self.config.lookback;
        let row = |g: &mut Graph, t: usize| g.constant(Tensor::vector(window.row(t).to_vec()));
        match &bound.vars {
            NetworkVars::Persistence => {
                let last = window.get2(lookback - 1, self.config.target_index);
                let prediction = g.constant(Tensor::vector(vec![last]));
                Ok(ForwardVars {
                    prediction,
                    states: None,
                    attention: None,
                })
            }
            NetworkVars::PlainLstm { encoder, output } => {
                let rows = (0..lookback).map(|t| row(g, t)).collect();
                let (states, _) =
                    encode_rows(g, encoder, rows, self.config.dropout_rate, mode, rng)?;
                let last = g.row(states, lookback - 1)?;
                let prediction = dense(g, output, last)?;
                Ok(ForwardVars {
                    prediction,
                    states: Some(states),
                    attention: None,
                })
            }
            NetworkVars::AttentionLstm {
                t2v,
                encoder,
                decoder,
                scorer,
                output,
            } => {
                let mut rows = Vec::with_capacity(lookback);
                for (t, &time) in times.iter().enumerate() {
                    let x = row(g, t);
                    let emb = time2vec(g, t2v, time)?;
                    rows.push(g.concat(x, emb, 0)?);
                }
                let decoder_input = *rows.last().expect("lookback >= 1");
                let (states, last) =
                    encode_rows(g, encoder, rows, self.config.dropout_rate, mode, rng)?;
                let d_prev = last.h;
                let next = lstm_step(g, decoder, last, decoder_input)?;
                let att = attend(g, self.config.attention, scorer, states, d_prev)?;
                let joint = g.concat(att.context, next.h, 0)?;
                let prediction = dense(g, output, joint)?;
                Ok(ForwardVars {
                    prediction,
                    states: Some(states),
                    attention: Some(att),
                })
            }
        }
    }

    /// Top encoder states `[lookback × top]`.
    pub fn encode(
        &self,
        window: &Tensor,
        times: &[f64],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward(&mut g, &bound, window, times, mode, rng)?;
        let states = out
            .states
            .ok_or_else(|| Error::Contract("persistence model has no encoder".into()))?;
        Ok(g.value(states).clone())
    }

    pub fn predict_one(
        &self,
        window: &Tensor,
        times: &[f64],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Option<AttentionResult>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward(&mut g, &bound, window, times, mode, rng)?;
        let y = g.value(out.prediction).data()[0];
        if !y.is_finite() {
            return Err(Error::NonFinite("prediction".into()));
        }
        Ok((y, out.attention.map(|a| a.read(&g))))
    }

    /// Eval-mode prediction; needs no randomness.
    pub fn predict(&self, window: &Tensor, times: &[f64]) -> Result<(f64, Option<AttentionResult>)> {
        self.predict_one(window, times, Mode::Eval, &mut NoRng)
    }

    /// Recursive `horizon`-step forecast in scaled space.
    pub fn forecast_recursive(
        &self,
        window: &Tensor,
        times: &[f64],
        horizon: usize,
    ) -> Result<ForecastPath> {
        if horizon == 0 {
            return Err(Error::Contract("forecast horizon must be at least 1".into()));
        }
        self.check_window(window, times)?;
        let mut window = window.clone();
        let mut times = times.to_vec();
        let mut path = ForecastPath {
            predictions: Vec::with_capacity(horizon),
            attention_traces: Vec::new(),
        };
        for step in 0..horizon {
            let (y, trace) = self.predict(&window, &times)?;
            path.predictions.push(y);
            path.attention_traces.extend(trace);
            if step + 1 < horizon {
                let (next_window, next_times) = self.slide(&window, &times, y)?;
                window = next_window;
                times = next_times;
            }
        }
        Ok(path)
    }

    /// Drops the oldest row and appends a copy of the newest row with the
    /// target column set to `prediction`; time advances by one.
    pub fn slide(&self, window: &Tensor, times: &[f64], prediction: f64) -> Result<(Tensor, Vec<f64>)> {
        let lookback = self.config.lookback;
        let mut rows: Vec<Vec<f64>> = (1..lookback).map(|t| window.row(t).to_vec()).collect();
        let mut next = window.row(lookback - 1).to_vec();
        next[self.config.target_index] = prediction;
        rows.push(next);
        let mut next_times = times[1..].to_vec();
        next_times.push(times[lookback - 1] + 1.0);
        Ok((Tensor::matrix(&rows)?, next_times))
    }
}

/// Random source for eval mode, where dropout never draws.
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval mode does not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval mode does not sample")
    }
    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("eval mode does not sample")
    }
    fn try_fill_bytes(&mut self, _dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("eval mode does not sample")
    }
}
