//! The view-set network: adapter, attention encoder, max‖mean transition and
//! MLP decoder.
//!
//! A shape is a set of per-view feature rows. The adapter maps each row to
//! the view dimension, the encoder lets every view attend to every other
//! view, and the transition pools the rows with column max and column mean.
//! With position embeddings and the class token switched off (the default)
//! nothing in the pipeline can observe row order, so the prediction is a
//! function of the set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::{self, Matrix};

/// Momentum of the decoder's running batch statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of the raw per-view features fed to the adapter.
    pub dim_in: usize,
    /// View representation width `D`.
    pub dim_view: usize,
    /// Number of attention blocks. Zero keeps only adapter, pooling and
    /// decoder (the encoder-free ablation).
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub use_position_encoding: bool,
    pub use_class_token: bool,
    /// Rows in the position table when position encoding is on.
    pub max_views: usize,
    /// Number of affine layers in the decoder (1, 2 or 3).
    pub decoder_depth: usize,
    pub decoder_hidden: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim_in: 512,
            dim_view: 512,
            num_blocks: 4,
            num_heads: 8,
            mlp_ratio: 2,
            dropout_rate: 0.1,
            num_classes: 40,
            use_position_encoding: false,
            use_class_token: false,
            max_views: 20,
            decoder_depth: 2,
            decoder_hidden: 512,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim_in == 0 || self.dim_view == 0 {
            return fail("feature widths must be positive".into());
        }
        if self.num_heads == 0 || !self.dim_view.is_multiple_of(self.num_heads) {
            return fail(format!(
                "dim_view {} is not divisible by num_heads {}",
                self.dim_view, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if !(1..=3).contains(&self.decoder_depth) {
            return fail(format!("decoder_depth {} not in 1..=3", self.decoder_depth));
        }
        if self.decoder_depth > 1 && self.decoder_hidden == 0 {
            return fail("decoder_hidden must be positive".into());
        }
        if self.use_position_encoding && self.max_views == 0 {
            return fail("max_views must be positive with position encoding".into());
        }
        if self.norm_eps <= 0.0 {
            return fail("norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim_view / self.num_heads
    }

    pub fn descriptor_dim(&self) -> usize {
        2 * self.dim_view
    }
}

/// Forward-pass mode. Training enables dropout and batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The views of one shape. Row order carries no meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatureSet {
    pub shape_id: String,
    pub features: Matrix,
    pub label: usize,
    pub sublabel: Option<usize>,
}

impl ViewFeatureSet {
    pub fn num_views(&self) -> usize {
        self.features.rows()
    }
}

/// Pooled `2D` descriptor: column max followed by column mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SetDescriptor {
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = tensor::softmax_rows(&Matrix::row_vector(&logits)).into_vec();
        Self {
            logits,
            probabilities,
        }
    }

    /// Predicted class (lowest index on ties).
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}

/// Parameter ids of one attention block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
    pub mlp_in_w: ParamId,
    pub mlp_in_b: ParamId,
    pub mlp_out_w: ParamId,
    pub mlp_out_b: ParamId,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    weight: ParamId,
    bias: ParamId,
    /// Hidden layers carry a batch norm followed by ReLU.
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct Layout {
    adapter_w: ParamId,
    adapter_b: ParamId,
    position: Option<ParamId>,
    class_token: Option<ParamId>,
    token_proj: Option<(ParamId, ParamId)>,
    blocks: Vec<BlockParams>,
    decoder: Vec<DecoderLayer>,
}

/// Running estimates for one decoder batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
        }
    }
}

/// Parameter counts split by stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub adapter: usize,
    /// Position table, class token and its projection (zero by default).
    pub ablation_extras: usize,
    pub encoder: usize,
    pub decoder: usize,
}

impl ParamCount {
    /// Encoder plus decoder; the transition has no parameters.
    pub fn encoder_and_head(&self) -> usize {
        self.encoder + self.decoder
    }

    pub fn total(&self) -> usize {
        self.adapter + self.ablation_extras + self.encoder + self.decoder
    }
}

/// Head-averaged attention of one block, `M x M` with stochastic rows.
pub type AttentionMap = Matrix;

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    running: Vec<RunningStats>,
}

/// Tape outputs of a batched forward pass.
#[derive(Debug)]
pub struct BatchForward {
    /// `B x K` logits.
    pub logits: Var,
    /// Batch statistics of every training-mode decoder norm, in layer order.
    pub norm_stats: Vec<BatchStats>,
}

impl Model {
    /// Builds a model with freshly initialized weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim_view;

        let (adapter_w, adapter_b) = linear(&mut params, &mut rng, "adapter", config.dim_in, d);

        let mut blocks = Vec::with_capacity(config.num_blocks);
        for l in 0..config.num_blocks {
            let p = format!("blocks.{l}");
            let (norm1_gamma, norm1_beta) = norm(&mut params, &format!("{p}.norm1"), d);
            let (query_w, query_b) =
                linear(&mut params, &mut rng, &format!("{p}.attn.query"), d, d);
            let (key_w, key_b) = linear(&mut params, &mut rng, &format!("{p}.attn.key"), d, d);
            let (value_w, value_b) =
                linear(&mut params, &mut rng, &format!("{p}.attn.value"), d, d);
            let (out_w, out_b) = linear(&mut params, &mut rng, &format!("{p}.attn.out"), d, d);
            let (norm2_gamma, norm2_beta) = norm(&mut params, &format!("{p}.norm2"), d);
            let hidden = config.mlp_ratio * d;
            let (mlp_in_w, mlp_in_b) =
                linear(&mut params, &mut rng, &format!("{p}.mlp.fc1"), d, hidden);
            let (mlp_out_w, mlp_out_b) =
                linear(&mut params, &mut rng, &format!("{p}.mlp.fc2"), hidden, d);
            blocks.push(BlockParams {
                norm1_gamma,
                norm1_beta,
                query_w,
                query_b,
                key_w,
                key_b,
                value_w,
                value_b,
                out_w,
                out_b,
                norm2_gamma,
                norm2_beta,
                mlp_in_w,
                mlp_in_b,
                mlp_out_w,
                mlp_out_b,
            });
        }

        let embed_bound = (1.0 / d as f64).sqrt();
        let position = config.use_position_encoding.then(|| {
            params.add(
                "position",
                uniform(config.max_views, d, embed_bound, &mut rng),
            )
        });
        let (class_token, token_proj) = if config.use_class_token {
            let tok = params.add("class_token", uniform(1, d, embed_bound, &mut rng));
            let proj = linear(&mut params, &mut rng, "token_proj", d, 2 * d);
            (Some(tok), Some(proj))
        } else {
            (None, None)
        };

        let mut decoder = Vec::with_capacity(config.decoder_depth);
        let mut running = Vec::new();
        let mut width = config.descriptor_dim();
        for i in 0..config.decoder_depth {
            let last = i + 1 == config.decoder_depth;
            let out = if last {
                config.num_classes
            } else {
                config.decoder_hidden
            };
            let (weight, bias) = linear(&mut params, &mut rng, &format!("decoder.{i}"), width, out);
            let norm = (!last).then(|| {
                running.push(RunningStats::new(out));
                norm(&mut params, &format!("decoder.{i}.norm"), out)
            });
            decoder.push(DecoderLayer { weight, bias, norm });
            width = out;
        }

        Ok(Self {
            config,
            params,
            layout: Layout {
                adapter_w,
                adapter_b,
                position,
                class_token,
                token_proj,
                blocks,
                decoder,
            },
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.layout.blocks
    }

    /// Adapter weight (`dim_in x D`, applied as `x · W + b`) and bias ids.
    pub fn adapter(&self) -> (ParamId, ParamId) {
        (self.layout.adapter_w, self.layout.adapter_b)
    }

    pub fn position_table(&self) -> Option<ParamId> {
        self.layout.position
    }

    /// Applies the decoder's running-statistics update from one training step.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let size = |id: ParamId| self.params.get(id).len();
        let pair = |(a, b): (ParamId, ParamId)| size(a) + size(b);
        let adapter = pair((self.layout.adapter_w, self.layout.adapter_b));
        let mut ablation_extras = 0;
        if let Some(p) = self.layout.position {
            ablation_extras += size(p);
        }
        if let Some(t) = self.layout.class_token {
            ablation_extras += size(t);
        }
        if let Some(p) = self.layout.token_proj {
            ablation_extras += pair(p);
        }
        let encoder = self
            .layout
            .blocks
            .iter()
            .map(|b| {
                [
                    b.norm1_gamma,
                    b.norm1_beta,
                    b.query_w,
                    b.query_b,
                    b.key_w,
                    b.key_b,
                    b.value_w,
                    b.value_b,
                    b.out_w,
                    b.out_b,
                    b.norm2_gamma,
                    b.norm2_beta,
                    b.mlp_in_w,
                    b.mlp_in_b,
                    b.mlp_out_w,
                    b.mlp_out_b,
                ]
                .into_iter()
                .map(size)
                .sum::<usize>()
            })
            .sum();
        let decoder = self
            .layout
            .decoder
            .iter()
            .map(|l| pair((l.weight, l.bias)) + l.norm.map_or(0, pair))
            .sum();
        ParamCount {
            adapter,
            ablation_extras,
            encoder,
            decoder,
        }
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.rows() == 0 {
            return Err(Error::Shape("a view set needs at least one view".into()));
        }
        if features.cols() != self.config.dim_in {
            return Err(Error::Shape(format!(
                "features have width {}, model expects {}",
                features.cols(),
                self.config.dim_in
            )));
        }
        if self.config.use_position_encoding && features.rows() > self.config.max_views {
            return Err(Error::Shape(format!(
                "{} views exceed the position table size {}",
                features.rows(),
                self.config.max_views
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("non-finite view features".into()));
        }
        Ok(())
    }

    /// Projects raw view features to the view dimension: `z⁰ = x·W + b`.
    pub fn init_features(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Var {
        let z = tape.matmul(features, bound[self.layout.adapter_w]);
        tape.add_row(z, bound[self.layout.adapter_b])
    }

    /// One pre-norm block: `ẑ = Drop(MSA(LN(z))) + z`, `z' = Drop(MLP(LN(ẑ))) + ẑ`.
    /// When `attention` is given, the head-averaged attention is pushed to it.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        block: &BlockParams,
        z: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        attention: Option<&mut Vec<AttentionMap>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let eps = cfg.norm_eps;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let h = tape.layer_norm(z, bound[block.norm1_gamma], bound[block.norm1_beta], eps);
        let q = affine(tape, h, bound[block.query_w], bound[block.query_b]);
        let k = affine(tape, h, bound[block.key_w], bound[block.key_b]);
        let v = affine(tape, h, bound[block.value_w], bound[block.value_b]);

        let m = tape.value(z).rows();
        let mut heads = Vec::with_capacity(cfg.num_heads);
        let mut avg = attention.is_some().then(|| Matrix::zeros(m, m));
        for head in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            if let Some(avg) = avg.as_mut() {
                avg.add_assign(tape.value(weights));
            }
            heads.push(tape.matmul(weights, vh));
        }
        if let (Some(avg), Some(out)) = (avg, attention) {
            out.push(avg.scale(1.0 / cfg.num_heads as f64));
        }
        let merged = tape.concat_cols(&heads);
        let msa = affine(tape, merged, bound[block.out_w], bound[block.out_b]);
        let msa = self.dropout(tape, msa, mode, rng)?;
        let z_hat = tape.add(msa, z);

        let h2 = tape.layer_norm(
            z_hat,
            bound[block.norm2_gamma],
            bound[block.norm2_beta],
            eps,
        );
        let hidden = affine(tape, h2, bound[block.mlp_in_w], bound[block.mlp_in_b]);
        let hidden = tape.gelu(hidden);
        let mlp = affine(tape, hidden, bound[block.mlp_out_w], bound[block.mlp_out_b]);
        let mlp = self.dropout(tape, mlp, mode, rng)?;
        Ok(tape.add(mlp, z_hat))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        match mode {
            Mode::Train => tape.dropout(x, self.config.dropout_rate, rng),
            Mode::Eval => Ok(x),
        }
    }

    /// Runs the attention blocks over `z⁰`, adding position embeddings and
    /// prepending the class token first when those toggles are on.
    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z0: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        mut attention: Option<&mut Vec<AttentionMap>>,
    ) -> Result<Var> {
        let m = tape.value(z0).rows();
        let mut z = z0;
        if let Some(pos) = self.layout.position {
            if m > self.config.max_views {
                return Err(Error::Shape(format!(
                    "{m} views exceed the position table size {}",
                    self.config.max_views
                )));
            }
            let rows = tape.slice_rows(bound[pos], 0, m);
            z = tape.add(z, rows);
        }
        if let Some(tok) = self.layout.class_token {
            z = tape.concat_rows(&[bound[tok], z]);
        }
        for block in &self.layout.blocks {
            z = self.attention_block(tape, bound, block, z, mode, rng, attention.as_deref_mut())?;
        }
        Ok(z)
    }

    /// Pools encoder output into the `1 x 2D` set descriptor.
    pub fn transition(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Var {
        match self.layout.token_proj {
            Some((w, b)) => {
                let token = tape.slice_rows(z, 0, 1);
                affine(tape, token, bound[w], bound[b])
            }
            None => tape.max_mean_pool(z),
        }
    }

    /// Maps `B x 2D` descriptors to `B x K` logits.
    pub fn decoder(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        descriptors: Var,
        mode: Mode,
    ) -> (Var, Vec<BatchStats>) {
        let mut x = descriptors;
        let mut stats = Vec::new();
        let mut norm_index = 0;
        for layer in &self.layout.decoder {
            x = affine(tape, x, bound[layer.weight], bound[layer.bias]);
            if let Some((gamma, beta)) = layer.norm {
                let eps = self.config.norm_eps;
                x = match mode {
                    Mode::Train => {
                        let (y, s) = tape.batch_norm(x, bound[gamma], bound[beta], eps);
                        stats.push(s);
                        y
                    }
                    Mode::Eval => {
                        let r = &self.running[norm_index];
                        tape.frozen_norm(x, &r.mean, &r.var, bound[gamma], bound[beta], eps)
                    }
                };
                norm_index += 1;
                x = tape.relu(x);
            }
        }
        (x, stats)
    }

    /// Encodes one view set down to its descriptor row.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &Matrix,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        attention: Option<&mut Vec<AttentionMap>>,
    ) -> Result<Var> {
        self.check_features(features)?;
        let x = tape.leaf(features.clone());
        let z0 = self.init_features(tape, bound, x);
        let z = self.encoder_forward(tape, bound, z0, mode, rng, attention)?;
        Ok(self.transition(tape, bound, z))
    }

    /// Forward pass over a batch of view sets sharing one decoder call.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&Matrix],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let rows = batch
            .iter()
            .map(|f| self.encode(tape, bound, f, mode, rng, None))
            .collect::<Result<Vec<_>>>()?;
        let descriptors = tape.concat_rows(&rows);
        let (logits, norm_stats) = self.decoder(tape, bound, descriptors, mode);
        Ok(BatchForward { logits, norm_stats })
    }

    /// Eval-mode prediction for one shape.
    pub fn forward(&self, shape: &ViewFeatureSet) -> Result<Prediction> {
        self.predict_features(&shape.features)
    }

    pub fn predict_features(&self, features: &Matrix) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_batch(&mut tape, &bound, &[features], Mode::Eval, &mut rng)?;
        Ok(Prediction::from_logits(
            tape.value(out.logits).row(0).to_vec(),
        ))
    }

    /// Eval-mode set descriptor for one shape.
    pub fn descriptor(&self, features: &Matrix) -> Result<SetDescriptor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = self.encode(&mut tape, &bound, features, Mode::Eval, &mut rng, None)?;
        Ok(SetDescriptor {
            values: tape.value(t).data().to_vec(),
        })
    }

    /// Head-averaged attention maps of every block, in block order.
    pub fn export_attention(&self, shape: &ViewFeatureSet) -> Result<Vec<AttentionMap>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut maps = Vec::with_capacity(self.config.num_blocks);
        self.encode(
            &mut tape,
            &bound,
            &shape.features,
            Mode::Eval,
            &mut rng,
            Some(&mut maps),
        )?;
        Ok(maps)
    }

    /// Every named tensor that defines the model: parameters followed by
    /// the decoder's running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = self
            .params
            .iter()
            .map(|(n, m)| (n.to_string(), m.clone()))
            .collect();
        for (i, r) in self.running.iter().enumerate() {
            out.push((format!("running.{i}.mean"), Matrix::row_vector(&r.mean)));
            out.push((format!("running.{i}.var"), Matrix::row_vector(&r.var)));
        }
        out
    }

    /// Rebuilds a model from a config and the output of [`Model::named_tensors`].
    pub fn from_named_tensors(config: ModelConfig, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        let expected = model.params.len() + 2 * model.running.len();
        if tensors.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            if let Some(rest) = name.strip_prefix("running.") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Shape(format!("bad tensor name {name}")))?;
                let idx: usize = idx
                    .parse()
                    .map_err(|_| Error::Shape(format!("bad tensor name {name}")))?;
                let slot = model
                    .running
                    .get_mut(idx)
                    .ok_or_else(|| Error::Shape(format!("unexpected tensor {name}")))?;
                let target = match field {
                    "mean" => &mut slot.mean,
                    "var" => &mut slot.var,
                    _ => return Err(Error::Shape(format!("unexpected tensor {name}"))),
                };
                if value.len() != target.len() {
                    return Err(Error::Shape(format!("{name} has the wrong length")));
                }
                target.copy_from_slice(value.data());
            } else {
                let id = model
                    .params
                    .find(&name)
                    .ok_or_else(|| Error::Shape(format!("unexpected tensor {name}")))?;
                let slot = model.params.get_mut(id);
                if slot.shape() != value.shape() {
                    return Err(Error::Shape(format!(
                        "{name}: expected {:?}, found {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value;
            }
        }
        Ok(model)
    }
}

fn linear(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (ParamId, ParamId) {
    let bound = (1.0 / fan_in as f64).sqrt();
    let w = params.add(
        format!("{name}.weight"),
        uniform(fan_in, fan_out, bound, rng),
    );
    let b = params.add(format!("{name}.bias"), uniform(1, fan_out, bound, rng));
    (w, b)
}

fn norm(params: &mut ParamStore, name: &str, width: usize) -> (ParamId, ParamId) {
    (
        params.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0)),
        params.add(format!("{name}.beta"), Matrix::zeros(1, width)),
    )
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            dim_in: 6,
            dim_view: 4,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 2,
            dropout_rate: 0.0,
            num_classes: 3,
            decoder_hidden: 5,
            ..ModelConfig::default()
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        uniform(rows, cols, 1.0, rng)
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.num_heads = 3;
        assert!(Model::new(c, 0).is_err());
        let mut c = small_config();
        c.num_classes = 1;
        assert!(Model::new(c, 0).is_err());
        let mut c = small_config();
        c.decoder_depth = 4;
        assert!(Model::new(c, 0).is_err());
    }

    #[test]
    fn identity_adapter_passes_features_through() {
        let cfg = ModelConfig {
            dim_in: 4,
            ..small_config()
        };
        let mut model = Model::new(cfg, 1).unwrap();
        let (w, b) = model.adapter();
        *model.params_mut().get_mut(w) = Matrix::identity(4);
        *model.params_mut().get_mut(b) = Matrix::zeros(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = random(3, 4, &mut rng);
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let x = tape.leaf(raw.clone());
        let z = model.init_features(&mut tape, &bound, x);
        assert_eq!(tape.value(z), &raw);
    }

    #[test]
    fn zero_adapter_yields_bias_rows() {
        let mut model = Model::new(small_config(), 1).unwrap();
        let (w, b) = model.adapter();
        *model.params_mut().get_mut(w) = Matrix::zeros(6, 4);
        let bias = Matrix::row_vector(&[0.5, -1.0, 2.0, 0.25]);
        *model.params_mut().get_mut(b) = bias.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let x = tape.leaf(random(3, 6, &mut rng));
        let z = model.init_features(&mut tape, &bound, x);
        for r in 0..3 {
            assert_eq!(tape.value(z).row(r), bias.data());
        }
    }

    #[test]
    fn adapter_matches_matmul_oracle() {
        let cfg = ModelConfig {
            dim_in: 16,
            ..small_config()
        };
        let model = Model::new(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = random(3, 16, &mut rng);
        let (w, b) = model.adapter();
        let (w, b) = (model.params().get(w), model.params().get(b));
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let x = tape.leaf(raw.clone());
        let z = model.init_features(&mut tape, &bound, x);
        for i in 0..3 {
            for j in 0..4 {
                let mut s = b.get(0, j);
                for p in 0..16 {
                    s += raw.get(i, p) * w.get(p, j);
                }
                assert!((tape.value(z).get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_block_is_identity_in_eval() {
        let mut model = Model::new(small_config(), 3).unwrap();
        let block = model.blocks()[0].clone();
        for id in [
            block.norm1_gamma,
            block.norm1_beta,
            block.query_w,
            block.query_b,
            block.key_w,
            block.key_b,
            block.value_w,
            block.value_b,
            block.out_w,
            block.out_b,
            block.norm2_gamma,
            block.norm2_beta,
            block.mlp_in_w,
            block.mlp_in_b,
            block.mlp_out_w,
            block.mlp_out_b,
        ] {
            let (r, c) = model.params().get(id).shape();
            *model.params_mut().get_mut(id) = Matrix::zeros(r, c);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random(5, 4, &mut rng);
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let out = model
            .attention_block(&mut tape, &bound, &block, zv, Mode::Eval, &mut rng, None)
            .unwrap();
        assert_eq!(tape.value(out), &z);
    }

    #[test]
    fn single_view_attention_reduces_to_value_path() {
        let model = Model::new(small_config(), 6).unwrap();
        let block = model.blocks()[0].clone();
        let p = model.params();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random(1, 4, &mut rng);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let mut maps = Vec::new();
        let out = model
            .attention_block(
                &mut tape,
                &bound,
                &block,
                zv,
                Mode::Eval,
                &mut rng,
                Some(&mut maps),
            )
            .unwrap();
        assert_eq!(maps[0].data(), &[1.0]);

        // closed form: weight 1 on the only row
        let ln = |x: &Matrix, g: ParamId, b: ParamId| {
            tensor::layer_norm(x, p.get(g).data(), p.get(b).data(), 1e-5)
        };
        let lin = |x: &Matrix, w: ParamId, b: ParamId| {
            let mut y = tensor::matmul(x, p.get(w)).unwrap();
            y.add_assign(p.get(b));
            y
        };
        let h = ln(&z, block.norm1_gamma, block.norm1_beta);
        let v = lin(&h, block.value_w, block.value_b);
        let mut z_hat = lin(&v, block.out_w, block.out_b);
        z_hat.add_assign(&z);
        let h2 = ln(&z_hat, block.norm2_gamma, block.norm2_beta);
        let a = lin(&h2, block.mlp_in_w, block.mlp_in_b).map(tensor::gelu);
        let mut want = lin(&a, block.mlp_out_w, block.mlp_out_b);
        want.add_assign(&z_hat);
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn transition_halves_agree_for_one_view() {
        let model = Model::new(small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = model.descriptor(&random(1, 6, &mut rng)).unwrap();
        assert_eq!(t.values.len(), 8);
        assert_eq!(&t.values[..4], &t.values[4..]);
    }

    #[test]
    fn depth_one_decoder_with_zero_weights_returns_bias() {
        let cfg = ModelConfig {
            decoder_depth: 1,
            ..small_config()
        };
        let mut model = Model::new(cfg, 2).unwrap();
        let w = model.params().find("decoder.0.weight").unwrap();
        let b = model.params().find("decoder.0.bias").unwrap();
        *model.params_mut().get_mut(w) = Matrix::zeros(8, 3);
        *model.params_mut().get_mut(b) = Matrix::row_vector(&[1.0, -2.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let p = model.predict_features(&random(4, 6, &mut rng)).unwrap();
            assert_eq!(p.logits, vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn probabilities_normalized_for_every_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for depth in 1..=3 {
            let cfg = ModelConfig {
                decoder_depth: depth,
                ..small_config()
            };
            let model = Model::new(cfg, depth as u64).unwrap();
            let p = model.predict_features(&random(3, 6, &mut rng)).unwrap();
            let total: f64 = p.probabilities.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn default_decoder_parameter_count() {
        let model = Model::new(ModelConfig::default(), 0).unwrap();
        let k = 40;
        let want = 1024 * 512 + 512 + 2 * 512 + 512 * k + k;
        assert_eq!(model.param_count().decoder, want);
        let enumerated: usize = model
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("decoder."))
            .map(|(_, m)| m.len())
            .sum();
        assert_eq!(enumerated, want);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = Model::new(small_config(), 0).unwrap();
        assert!(model.predict_features(&Matrix::zeros(3, 5)).is_err());
        assert!(model.predict_features(&Matrix::zeros(0, 6)).is_err());

        let cfg = ModelConfig {
            use_position_encoding: true,
            max_views: 2,
            ..small_config()
        };
        let model = Model::new(cfg, 0).unwrap();
        assert!(model.predict_features(&Matrix::zeros(3, 6)).is_err());
    }

    #[test]
    fn export_attention_single_view() {
        let model = Model::new(small_config(), 0).unwrap();
        let shape = ViewFeatureSet {
            shape_id: "a".into(),
            features: Matrix::filled(1, 6, 0.3),
            label: 0,
            sublabel: None,
        };
        let maps = model.export_attention(&shape).unwrap();
        assert_eq!(maps.len(), 2);
        for m in maps {
            assert_eq!(m.data(), &[1.0]);
        }
    }

    #[test]
    fn named_tensor_round_trip() {
        let cfg = ModelConfig {
            use_class_token: true,
            use_position_encoding: true,
            ..small_config()
        };
        let model = Model::new(cfg.clone(), 9).unwrap();
        let back = Model::from_named_tensors(cfg, model.named_tensors()).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.running_stats(), model.running_stats());
    }
}
