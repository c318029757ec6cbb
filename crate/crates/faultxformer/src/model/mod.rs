//! The dual-stage encoder architecture.
//!
//! Stage 1 (feature extractor) embeds the two input channels, adds sinusoidal
//! positional encoding, and runs a shallow encoder stack. Stage 2 (task head)
//! re-applies positional encoding to the frozen stage-1 encodings, runs a
//! deeper stack, pools over time, and classifies.
//!
//! Attention uses one fused `d -> 3d` input projection with bias plus an
//! output projection with bias; this is the layout whose parameter count
//! matches the published per-block totals.

mod checkpoint;
mod infer32;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use infer32::Model32;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    FaultType,
    FaultLocation,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::FaultType => "type",
            Task::FaultLocation => "location",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "type" => Ok(Task::FaultType),
            "location" => Ok(Task::FaultLocation),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    FeatureExtractor,
    TaskHead,
}

/// Shape of one encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Trainable parameters in one encoder layer:
    /// attention 4d^2+4d, feed-forward 2*d*ff+ff+d, two layer norms 4d.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        let ff = self.d_ff;
        4 * d * d + 4 * d + 2 * d * ff + ff + d + 4 * d
    }

    pub fn attention_param_count(&self) -> usize {
        4 * self.d_model * self.d_model + 4 * self.d_model
    }
}

/// Full model description: encoder stack plus optional input embedding
/// (stage 1) and optional classification head (stage 2 and the temporary
/// stage-1 training head).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub task: Task,
    pub stage: Stage,
    pub encoder: EncoderConfig,
    /// Input channels projected by the embedding layer; 0 means the model
    /// consumes `d_model`-wide inputs directly.
    pub in_features: usize,
    /// Output classes; 0 means no head (pure feature extractor).
    pub n_classes: usize,
    pub use_positional_encoding: bool,
}

pub const SEQ_LEN: usize = 100;
pub const INPUT_FEATURES: usize = 2;
pub const TYPE_CLASSES: usize = 8;
pub const LOCATION_CLASSES: usize = 20;

impl ModelConfig {
    fn d_model_for(task: Task) -> usize {
        match task {
            Task::FaultType => 68,
            Task::FaultLocation => 90,
        }
    }

    fn heads_for(task: Task) -> usize {
        match task {
            Task::FaultType => 4,
            Task::FaultLocation => 5,
        }
    }

    /// Stage-1 feature extractor with its temporary training head attached.
    pub fn stage1(task: Task, n_classes: usize) -> ModelConfig {
        ModelConfig {
            task,
            stage: Stage::FeatureExtractor,
            encoder: EncoderConfig {
                d_model: Self::d_model_for(task),
                n_heads: Self::heads_for(task),
                d_ff: 16,
                n_layers: 2,
                max_len: SEQ_LEN,
            },
            in_features: INPUT_FEATURES,
            n_classes,
            use_positional_encoding: true,
        }
    }

    /// Stage-2 task classifier with the default class count for the task.
    pub fn stage2(task: Task) -> ModelConfig {
        let c = match task {
            Task::FaultType => TYPE_CLASSES,
            Task::FaultLocation => LOCATION_CLASSES,
        };
        Self::stage2_with_classes(task, c)
    }

    pub fn stage2_with_classes(task: Task, n_classes: usize) -> ModelConfig {
        ModelConfig {
            task,
            stage: Stage::TaskHead,
            encoder: EncoderConfig {
                d_model: Self::d_model_for(task),
                n_heads: Self::heads_for(task),
                d_ff: match task {
                    Task::FaultType => 64,
                    Task::FaultLocation => 128,
                },
                n_layers: 3,
                max_len: SEQ_LEN,
            },
            in_features: 0,
            n_classes,
            use_positional_encoding: true,
        }
    }

    pub fn param_count(&self) -> usize {
        let d = self.encoder.d_model;
        let mut total = self.encoder.n_layers * self.encoder.layer_param_count();
        if self.in_features > 0 {
            total += linear_param_count(self.in_features, d);
        }
        if self.n_classes > 0 {
            total += linear_param_count(d, self.n_classes);
        }
        total
    }
}

/// Parameters of an affine map `in -> out`: in*out weights plus out biases.
pub fn linear_param_count(input: usize, output: usize) -> usize {
    input * output + output
}

/// Sinusoidal positional encoding, row-major `[max_len, d_model]`:
/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model.div_ceil(2) {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[pos * d_model + 2 * i] = angle.sin();
            if 2 * i + 1 < d_model {
                pe[pos * d_model + 2 * i + 1] = angle.cos();
            }
        }
    }
    pe
}

#[derive(Debug, Clone, Copy)]
struct LinearRef {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerRef {
    qkv: LinearRef,
    out: LinearRef,
    ln1: (usize, usize),
    ff1: LinearRef,
    ff2: LinearRef,
    ln2: (usize, usize),
}

/// One stage of the dual-stage model: named parameter tensors plus the fixed
/// positional-encoding table.
#[derive(Debug)]
pub struct FaultXformer {
    pub cfg: ModelConfig,
    tensors: Vec<Tensor>,
    names: Vec<String>,
    embed: Option<LinearRef>,
    layers: Vec<LayerRef>,
    head: Option<LinearRef>,
    pe: Vec<f64>,
}

/// Tape handles for one bound copy of the parameters.
pub struct Bound {
    vars: Vec<Var>,
    pe: Var,
}

/// Forward results: the encoded sequence, logits when a head exists, and the
/// per-layer attention weight tensors (`[B, h, L, L]`).
pub struct ForwardOutput {
    pub encoded: Var,
    pub logits: Option<Var>,
    pub attention: Vec<Var>,
}

/// Dropout behaviour for one forward pass.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng, dropout_p: f64 },
}

impl FaultXformer {
    /// Initialize with uniform `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` weights
    /// and biases; layer norm starts at identity.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<FaultXformer> {
        cfg.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = FaultXformer {
            cfg,
            tensors: Vec::new(),
            names: Vec::new(),
            embed: None,
            layers: Vec::new(),
            head: None,
            pe: positional_encoding(cfg.encoder.max_len, cfg.encoder.d_model),
        };
        let d = cfg.encoder.d_model;
        if cfg.in_features > 0 {
            model.embed = Some(model.push_linear("embed", cfg.in_features, d, &mut rng));
        }
        for l in 0..cfg.encoder.n_layers {
            let qkv = model.push_linear(&format!("layers.{l}.attn.qkv"), d, 3 * d, &mut rng);
            let out = model.push_linear(&format!("layers.{l}.attn.out"), d, d, &mut rng);
            let ln1 = model.push_layer_norm(&format!("layers.{l}.ln1"), d);
            let ff1 = model.push_linear(&format!("layers.{l}.ffn.lin1"), d, cfg.encoder.d_ff, &mut rng);
            let ff2 = model.push_linear(&format!("layers.{l}.ffn.lin2"), cfg.encoder.d_ff, d, &mut rng);
            let ln2 = model.push_layer_norm(&format!("layers.{l}.ln2"), d);
            model.layers.push(LayerRef { qkv, out, ln1, ff1, ff2, ln2 });
        }
        if cfg.n_classes > 0 {
            model.head = Some(model.push_linear("head", d, cfg.n_classes, &mut rng));
        }
        Ok(model)
    }

    fn push_tensor(&mut self, name: String, t: Tensor) -> usize {
        self.tensors.push(t);
        self.names.push(name);
        self.tensors.len() - 1
    }

    fn push_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> LinearRef {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w_data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let b_data: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let w = self.push_tensor(
            format!("{prefix}.weight"),
            Tensor::new(vec![fan_in, fan_out], w_data).expect("w shape"),
        );
        let b = self.push_tensor(format!("{prefix}.bias"), Tensor::new(vec![fan_out], b_data).expect("b shape"));
        LinearRef { w, b }
    }

    fn push_layer_norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        let g = self.push_tensor(format!("{prefix}.gamma"), Tensor::new(vec![d], vec![1.0; d]).expect("gamma"));
        let b = self.push_tensor(format!("{prefix}.beta"), Tensor::zeros(vec![d]));
        (g, b)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn param_tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn positional_table(&self) -> &[f64] {
        &self.pe
    }

    pub(crate) fn tensor_by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Drop the temporary classification head, leaving a pure extractor.
    pub fn strip_head(&mut self) {
        if let Some(head) = self.head.take() {
            // head tensors are always the last two pushed
            debug_assert_eq!(head.b, self.tensors.len() - 1);
            self.tensors.truncate(head.w);
            self.names.truncate(head.w);
            self.cfg.n_classes = 0;
        }
    }

    /// Register all parameters on a tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = trainable;
                tape.leaf(t)
            })
            .collect();
        let pe_t = Tensor::new(vec![self.cfg.encoder.max_len, self.cfg.encoder.d_model], self.pe.clone())
            .expect("pe shape");
        let pe = tape.constant(pe_t);
        Bound { vars, pe }
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, x: Var, lin: LinearRef) -> Result<Var> {
        let xw = tape.matmul(x, bound.vars[lin.w])?;
        tape.add_broadcast(xw, bound.vars[lin.b])
    }

    fn attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: &LayerRef,
        x: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let d = self.cfg.encoder.d_model;
        let h = self.cfg.encoder.n_heads;
        let dk = d / h;
        let l = self.cfg.encoder.max_len;

        let qkv = self.linear(tape, bound, x, layer.qkv)?;
        let split_heads = |tape: &mut Tape, offset: usize| -> Result<Var> {
            let part = tape.narrow_last(qkv, offset, d)?;
            let part = tape.reshape(part, vec![batch, l, h, dk])?;
            tape.swap_axes(part, 1, 2) // [B,h,L,dk]
        };
        let q = split_heads(tape, 0)?;
        let k = split_heads(tape, d)?;
        let v = split_heads(tape, 2 * d)?;
        let kt = tape.swap_axes(k, 2, 3)?; // [B,h,dk,L]
        let scores = tape.matmul(q, kt)?; // [B,h,L,L]
        let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = tape.softmax_last(scaled);
        let ctx = tape.matmul(weights, v)?; // [B,h,L,dk]
        let merged = tape.swap_axes(ctx, 1, 2)?;
        let merged = tape.reshape(merged, vec![batch, l, d])?;
        let out = self.linear(tape, bound, merged, layer.out)?;
        Ok((out, weights))
    }

    fn maybe_dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode) -> Result<Var> {
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train { rng, dropout_p } => tape.dropout(x, *dropout_p, true, *rng),
        }
    }

    /// Run the full stage: optional embedding, positional encoding, encoder
    /// layers, and (when a head is present) pooling plus classification.
    ///
    /// `x` is `[B, L, in_features]` for embedding models, `[B, L, d_model]`
    /// otherwise.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: &mut Mode) -> Result<ForwardOutput> {
        let batch = tape.value(x).shape[0];
        let mut cur = match self.embed {
            Some(embed) => self.linear(tape, bound, x, embed)?,
            None => x,
        };
        if self.cfg.use_positional_encoding {
            cur = tape.add_broadcast(cur, bound.pe)?;
        }
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (attn_out, weights) = self.attention(tape, bound, layer, cur, batch)?;
            attention.push(weights);
            let attn_out = self.maybe_dropout(tape, attn_out, mode)?;
            let sum1 = tape.add(cur, attn_out)?;
            let h1 = tape.layer_norm(sum1, bound.vars[layer.ln1.0], bound.vars[layer.ln1.1], 1e-5)?;
            let ff_in = self.linear(tape, bound, h1, layer.ff1)?;
            let ff_act = tape.relu(ff_in);
            let ff_out = self.linear(tape, bound, ff_act, layer.ff2)?;
            let ff_out = self.maybe_dropout(tape, ff_out, mode)?;
            let sum2 = tape.add(h1, ff_out)?;
            cur = tape.layer_norm(sum2, bound.vars[layer.ln2.0], bound.vars[layer.ln2.1], 1e-5)?;
        }
        let logits = match self.head {
            Some(head) => {
                let pooled = tape.mean_axis(cur, 1)?; // global average over time
                Some(self.linear(tape, bound, pooled, head)?)
            }
            None => None,
        };
        Ok(ForwardOutput { encoded: cur, logits, attention })
    }

    /// Convenience: eval-mode logits for a `[B, L, F]` input batch.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, &mut Mode::Eval)?;
        let logits = out
            .logits
            .ok_or_else(|| Error::InvalidArgument("model has no classification head".into()))?;
        Ok(tape.value(logits).data.clone())
    }

    /// Convenience: eval-mode encoded sequence for a `[B, L, F]` input batch.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, &mut Mode::Eval)?;
        Ok(tape.value(out.encoded).data.clone())
    }

    /// Copy gradients recorded on a bound tape back out, in parameter order.
    pub fn collect_grads<'t>(&self, tape: &'t Tape, bound: &Bound) -> Vec<Option<&'t [f64]>> {
        bound.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_base_row_and_range() {
        let pe = positional_encoding(100, 68);
        for i in 0..34 {
            assert_eq!(pe[2 * i], 0.0, "PE[0, even] = sin 0");
            assert_eq!(pe[2 * i + 1], 1.0, "PE[0, odd] = cos 0");
        }
        assert!((pe[68] - 1.0f64.sin()).abs() < 1e-15, "PE[1,0] = sin(1)");
        assert!(pe.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn positional_encoding_matches_formula_at_sampled_points() {
        let (max_len, d) = (100, 90);
        let pe = positional_encoding(max_len, d);
        let mut state = 12345u64;
        let mut next = move |m: usize| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize % m
        };
        for _ in 0..50 {
            let pos = next(max_len);
            let i = next(d / 2);
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            assert!((pe[pos * d + 2 * i] - angle.sin()).abs() < 1e-12);
            assert!((pe[pos * d + 2 * i + 1] - angle.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_param_counts_match_published_table() {
        let type_cfg = ModelConfig::stage2(Task::FaultType);
        let loc_cfg = ModelConfig::stage2(Task::FaultLocation);
        assert_eq!(type_cfg.encoder.attention_param_count(), 18_768);
        assert_eq!(loc_cfg.encoder.attention_param_count(), 32_760);
        assert_eq!(type_cfg.encoder.layer_param_count(), 27_876);
        assert_eq!(loc_cfg.encoder.layer_param_count(), 56_378);
    }

    #[test]
    fn stage2_totals_match_published_table() {
        let type7 = FaultXformer::init(ModelConfig::stage2_with_classes(Task::FaultType, 7), 0).unwrap();
        assert_eq!(type7.param_count(), 84_111);
        let loc = FaultXformer::init(ModelConfig::stage2(Task::FaultLocation), 0).unwrap();
        assert_eq!(loc.param_count(), 170_954);
        assert_eq!(linear_param_count(68, 64), 4_416);
        assert_eq!(linear_param_count(64, 68), 4_420);
        assert_eq!(linear_param_count(128, 90), 11_610);
        assert_eq!(linear_param_count(90, 128), 11_648);
        assert_eq!(linear_param_count(68, 7), 483);
        assert_eq!(linear_param_count(90, 20), 1_820);
    }

    #[test]
    fn stage_shapes_are_preserved() {
        for (task, d) in [(Task::FaultType, 68), (Task::FaultLocation, 90)] {
            let s1 = FaultXformer::init(ModelConfig::stage1(task, 4), 1).unwrap();
            let x = Tensor::zeros(vec![2, SEQ_LEN, INPUT_FEATURES]);
            let encoded = s1.encode(&x).unwrap();
            assert_eq!(encoded.len(), 2 * SEQ_LEN * d);
        }
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let model = FaultXformer::init(ModelConfig::stage1(Task::FaultType, 8), 3).unwrap();
        let data: Vec<f64> = (0..2 * SEQ_LEN * 2).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
        let x = Tensor::new(vec![2, SEQ_LEN, 2], data).unwrap();
        assert_eq!(model.logits(&x).unwrap(), model.logits(&x).unwrap());
    }

    #[test]
    fn zero_output_projection_gives_zero_attention_output() {
        let mut model = FaultXformer::init(ModelConfig::stage2_with_classes(Task::FaultType, 0), 5).unwrap();
        // zero the first layer's output projection; the attention block then
        // contributes nothing and the residual passes x through to LN1
        let wo_idx = model.names.iter().position(|n| n == "layers.0.attn.out.weight").unwrap();
        let bo_idx = model.names.iter().position(|n| n == "layers.0.attn.out.bias").unwrap();
        model.tensors[wo_idx].data.iter_mut().for_each(|v| *v = 0.0);
        model.tensors[bo_idx].data.iter_mut().for_each(|v| *v = 0.0);

        let x = Tensor::new(
            vec![1, SEQ_LEN, 68],
            (0..SEQ_LEN * 68).map(|i| (i as f64 * 0.01).sin()).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.constant(x);
        let pe_in = tape.add_broadcast(xv, bound.pe).unwrap();
        let layer = model.layers[0];
        let (attn_out, _) = model.attention(&mut tape, &bound, &layer, pe_in, 1).unwrap();
        assert!(tape.value(attn_out).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let model = FaultXformer::init(ModelConfig::stage2(Task::FaultType), 7).unwrap();
        let x = Tensor::new(
            vec![2, SEQ_LEN, 68],
            (0..2 * SEQ_LEN * 68).map(|i| (i as f64 * 0.013).cos()).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &bound, xv, &mut Mode::Eval).unwrap();
        for &w in &out.attention {
            for row in tape.value(w).data.chunks_exact(SEQ_LEN) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn pooled_logits_permutation_invariance_without_pe() {
        let seq = 10;
        let mut cfg = ModelConfig::stage2_with_classes(Task::FaultType, 5);
        cfg.encoder.max_len = seq;
        cfg.use_positional_encoding = false;
        let model = FaultXformer::init(cfg, 11).unwrap();

        let base: Vec<f64> = (0..seq * 68).map(|i| (i as f64 * 0.37).sin()).collect();
        // rotate the time axis by 3 steps
        let mut permuted = vec![0.0; seq * 68];
        for t in 0..seq {
            let src = (t + 3) % seq;
            permuted[t * 68..(t + 1) * 68].copy_from_slice(&base[src * 68..(src + 1) * 68]);
        }
        let lx = model.logits(&Tensor::new(vec![1, seq, 68], base.clone()).unwrap()).unwrap();
        let lp = model.logits(&Tensor::new(vec![1, seq, 68], permuted.clone()).unwrap()).unwrap();
        for (a, b) in lx.iter().zip(lp.iter()) {
            assert!((a - b).abs() < 1e-9, "pooled logits should be permutation-invariant without PE");
        }

        let mut cfg_pe = cfg;
        cfg_pe.use_positional_encoding = true;
        let model_pe = FaultXformer::init(cfg_pe, 11).unwrap();
        let lx = model_pe.logits(&Tensor::new(vec![1, seq, 68], base).unwrap()).unwrap();
        let lp = model_pe.logits(&Tensor::new(vec![1, seq, 68], permuted).unwrap()).unwrap();
        let max_diff = lx.iter().zip(lp.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "positional encoding should break permutation invariance");
    }

    #[test]
    fn tiny_encoder_gradients_match_finite_differences() {
        use crate::numerics::fd_check_multi;
        let cfg = ModelConfig {
            task: Task::FaultType,
            stage: Stage::FeatureExtractor,
            encoder: EncoderConfig { d_model: 8, n_heads: 2, d_ff: 4, n_layers: 1, max_len: 5 },
            in_features: 2,
            n_classes: 3,
            use_positional_encoding: true,
        };
        // seed chosen so no ReLU unit sits at its kink: coordinates with a
        // truly zero gradient otherwise surface pure finite-difference noise
        // against the 1e-8 denominator floor
        let model = FaultXformer::init(cfg, 23).unwrap();
        let mut inputs: Vec<Tensor> = model.tensors.clone();
        let x_data: Vec<f64> = (0..2 * 5 * 2).map(|i| ((i * 29 % 17) as f64 / 8.5 - 1.0) * 0.8).collect();
        inputs.push(Tensor::new(vec![2, 5, 2], x_data).unwrap());
        let targets = [1usize, 2];

        let err = fd_check_multi(
            &|tape, vars| {
                let (param_vars, x) = vars.split_at(vars.len() - 1);
                let bound = Bound {
                    vars: param_vars.to_vec(),
                    pe: tape.constant(Tensor::new(vec![5, 8], positional_encoding(5, 8)).unwrap()),
                };
                let out = model.forward(tape, &bound, x[0], &mut Mode::Eval).unwrap();
                tape.cross_entropy(out.logits.unwrap(), &targets).unwrap()
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-3, "max relative error {err}");
    }
}
