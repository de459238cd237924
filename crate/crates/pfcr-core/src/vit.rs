//! Toy Vision Transformer with attachable fake-quantizers.
//!
//! Blocks follow the pre-LayerNorm layout with residual shortcuts inside
//! each unit: attention units compute `x + MHSA(LN(x))`, feed-forward units
//! compute `y + MLP(LN(y))`. Tokens are mean-pooled before the classifier.
//!
//! Weights are channel-wise uniform quantized; activations are layer-wise
//! quantized at the points listed by [`ModelState::act_point_names`], with
//! the log2 scheme on attention probabilities. With both mode flags off, a
//! model with attached quantizers is bit-identical to the plain model.

use crate::quant::{params_from_range, QuantError, QuantSpec, Quantizer};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("calibration failed: {0}")]
    Calibration(#[from] QuantError),
    #[error("calibration batch is empty")]
    EmptyCalibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Number of transformer blocks (L).
    pub depth: usize,
    /// Token feature width (D).
    pub embed_dim: usize,
    /// Attention heads (H); must divide `embed_dim`.
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth < 1 {
            return Err(ModelError::BadConfig("depth must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::BadConfig(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(ModelError::BadConfig("in_channels and num_classes must be positive".into()));
        }
        if self.hidden_dim() == 0 {
            return Err(ModelError::BadConfig("mlp_ratio too small".into()));
        }
        Ok(())
    }

    /// Token count N = (image_size / patch_size)^2.
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }
}

/// A named weight tensor plus its optional quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S: Scalar> {
    pub tensor: Tensor<S>,
    pub quant: Option<Quantizer<S>>,
}

/// Full set of named weights, attached quantizers, and quantization mode
/// flags. Parameter iteration order is the sorted name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<S: Scalar> {
    pub config: ViTConfig,
    params: BTreeMap<String, Param<S>>,
    act_quant: BTreeMap<String, Quantizer<S>>,
    pub weight_quant_enabled: bool,
    pub act_quant_enabled: bool,
}

fn block(l: usize) -> String {
    format!("blocks.{l:02}")
}

impl<S: Scalar> ModelState<S> {
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut params: BTreeMap<String, Param<S>> = BTreeMap::new();
        let mat = |params: &mut BTreeMap<String, Param<S>>, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            params.insert(name, Param { tensor: Tensor::trunc_normal(vec![rows, cols], INIT_STD, rng), quant: None });
        };
        let vec_of = |params: &mut BTreeMap<String, Param<S>>, name: String, len: usize, value: S| {
            params.insert(name, Param { tensor: Tensor::full(vec![len], value), quant: None });
        };

        mat(&mut params, "embed.w".into(), config.patch_dim(), d, &mut rng);
        vec_of(&mut params, "embed.b".into(), d, S::zero());
        params.insert(
            "embed.pos".into(),
            Param { tensor: Tensor::trunc_normal(vec![config.tokens(), d], INIT_STD, &mut rng), quant: None },
        );
        for l in 0..config.depth {
            let b = block(l);
            vec_of(&mut params, format!("{b}.ln1.g"), d, S::one());
            vec_of(&mut params, format!("{b}.ln1.b"), d, S::zero());
            for w in ["wq", "wk", "wv", "wo"] {
                mat(&mut params, format!("{b}.attn.{w}"), d, d, &mut rng);
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                vec_of(&mut params, format!("{b}.attn.{bias}"), d, S::zero());
            }
            vec_of(&mut params, format!("{b}.ln2.g"), d, S::one());
            vec_of(&mut params, format!("{b}.ln2.b"), d, S::zero());
            mat(&mut params, format!("{b}.mlp.w1"), d, config.hidden_dim(), &mut rng);
            vec_of(&mut params, format!("{b}.mlp.b1"), config.hidden_dim(), S::zero());
            mat(&mut params, format!("{b}.mlp.w2"), config.hidden_dim(), d, &mut rng);
            vec_of(&mut params, format!("{b}.mlp.b2"), d, S::zero());
        }
        vec_of(&mut params, "final_ln.g".into(), d, S::one());
        vec_of(&mut params, "final_ln.b".into(), d, S::zero());
        mat(&mut params, "head.w".into(), d, config.num_classes, &mut rng);
        vec_of(&mut params, "head.b".into(), config.num_classes, S::zero());

        Ok(ModelState {
            config: config.clone(),
            params,
            act_quant: BTreeMap::new(),
            weight_quant_enabled: false,
            act_quant_enabled: false,
        })
    }

    // ── parameter access ─────────────────────────────────────────────

    pub fn param(&self, name: &str) -> &Param<S> {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter()
    }

    pub fn act_quantizers(&self) -> impl Iterator<Item = (&String, &Quantizer<S>)> {
        self.act_quant.iter()
    }

    pub fn act_quantizer(&self, point: &str) -> Option<&Quantizer<S>> {
        self.act_quant.get(point)
    }

    pub fn set_param_tensor(&mut self, name: &str, tensor: Tensor<S>) {
        let p = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(p.tensor.shape, tensor.shape, "parameter {name}: shape mismatch");
        p.tensor = tensor;
    }

    pub fn set_weight_quantizer(&mut self, name: &str, q: Option<Quantizer<S>>) {
        self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).quant = q;
    }

    pub fn set_act_quantizer(&mut self, point: String, q: Quantizer<S>) {
        self.act_quant.insert(point, q);
    }

    /// Mutable view of the storage a trainable key refers to: plain weights
    /// by name, quantizer scales by `<name>#s` / `act.<point>#s`.
    pub fn trainable_slice_mut(&mut self, key: &str) -> &mut [S] {
        if let Some(stripped) = key.strip_suffix("#s") {
            if let Some(point) = stripped.strip_prefix("act.") {
                let q = self.act_quant.get_mut(point).unwrap_or_else(|| panic!("no activation quantizer at {point}"));
                return &mut q.params.scale;
            }
            let p = self.params.get_mut(stripped).unwrap_or_else(|| panic!("unknown parameter {stripped}"));
            let q = p.quant.as_mut().unwrap_or_else(|| panic!("parameter {stripped} has no quantizer"));
            return &mut q.params.scale;
        }
        &mut self.params.get_mut(key).unwrap_or_else(|| panic!("unknown parameter {key}")).tensor.data
    }

    /// FNV-1a over every parameter and quantizer scale, for frozen-state
    /// assertions in tests.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (_, p) in self.params.iter() {
            for &v in &p.tensor.data {
                eat(v.to_f64());
            }
            if let Some(q) = &p.quant {
                for &v in &q.params.scale {
                    eat(v.to_f64());
                }
            }
        }
        for (_, q) in self.act_quant.iter() {
            for &v in &q.params.scale {
                eat(v.to_f64());
            }
        }
        h
    }

    // ── structure listings ───────────────────────────────────────────

    /// The 2D projection matrices that receive weight quantizers.
    pub fn weight_matrix_names(&self) -> Vec<String> {
        let mut names = vec!["embed.w".to_string()];
        for l in 0..self.config.depth {
            let b = block(l);
            for w in ["wq", "wk", "wv", "wo"] {
                names.push(format!("{b}.attn.{w}"));
            }
            names.push(format!("{b}.mlp.w1"));
            names.push(format!("{b}.mlp.w2"));
        }
        names.push("head.w".to_string());
        names
    }

    /// Activation quantization points in network order; the flag marks
    /// post-softmax points (attention probabilities, log2 scheme).
    pub fn act_point_names(&self) -> Vec<(String, bool)> {
        let mut pts = vec![("embed.out".to_string(), false)];
        for l in 0..self.config.depth {
            let b = block(l);
            pts.push((format!("{b}.ln1.out"), false));
            pts.push((format!("{b}.attn.q"), false));
            pts.push((format!("{b}.attn.k"), false));
            pts.push((format!("{b}.attn.v"), false));
            pts.push((format!("{b}.attn.probs"), true));
            pts.push((format!("{b}.attn.ctx"), false));
            pts.push((format!("{b}.attn.out"), false));
            pts.push((format!("{b}.ln2.out"), false));
            pts.push((format!("{b}.mlp.fc1"), false));
            pts.push((format!("{b}.mlp.gelu"), false));
            pts.push((format!("{b}.mlp.fc2"), false));
        }
        pts.push(("final_ln.out".to_string(), false));
        pts
    }

    fn unit_weight_names(&self, unit: usize) -> Vec<String> {
        let b = block(unit / 2);
        if unit % 2 == 0 {
            let mut v = vec![format!("{b}.ln1.g"), format!("{b}.ln1.b")];
            for w in ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"] {
                v.push(format!("{b}.attn.{w}"));
            }
            v
        } else {
            vec![
                format!("{b}.ln2.g"),
                format!("{b}.ln2.b"),
                format!("{b}.mlp.w1"),
                format!("{b}.mlp.b1"),
                format!("{b}.mlp.w2"),
                format!("{b}.mlp.b2"),
            ]
        }
    }

    fn unit_act_points(&self, unit: usize) -> Vec<String> {
        let b = block(unit / 2);
        if unit % 2 == 0 {
            ["ln1.out", "attn.q", "attn.k", "attn.v", "attn.probs", "attn.ctx", "attn.out"]
                .iter()
                .map(|p| format!("{b}.{p}"))
                .collect()
        } else {
            ["ln2.out", "mlp.fc1", "mlp.gelu", "mlp.fc2"].iter().map(|p| format!("{b}.{p}")).collect()
        }
    }

    /// Everything reconstruction may update inside a finest unit: its weight
    /// tensors plus every attached-and-active quantizer scale.
    pub fn trainable_keys_for_unit(&self, unit: usize) -> BTreeSet<String> {
        let mut keys = BTreeSet::new();
        for name in self.unit_weight_names(unit) {
            if self.weight_quant_enabled && self.params[&name].quant.is_some() {
                keys.insert(format!("{name}#s"));
            }
            keys.insert(name);
        }
        if self.act_quant_enabled {
            for point in self.unit_act_points(unit) {
                if self.act_quant.contains_key(&point) {
                    keys.insert(format!("act.{point}#s"));
                }
            }
        }
        keys
    }

    // ── quantizer attachment ─────────────────────────────────────────

    /// Channel-wise uniform quantizers on every projection matrix,
    /// calibrated from the current weight values.
    pub fn attach_weight_quantizers(&mut self, bits: u32) -> Result<(), ModelError> {
        for name in self.weight_matrix_names() {
            let spec = QuantSpec::weight(bits);
            let q = Quantizer::calibrated(spec, &self.params[&name].tensor)?;
            self.params.get_mut(&name).unwrap().quant = Some(q);
        }
        Ok(())
    }

    /// Layer-wise quantizers at every activation point (log2 after softmax),
    /// calibrated by recording min/max during forwards over `calib_batches`.
    pub fn attach_act_quantizers(&mut self, bits: u32, calib_batches: &[Tensor<S>]) -> Result<(), ModelError> {
        if calib_batches.is_empty() || calib_batches.iter().any(|b| b.data.is_empty()) {
            return Err(ModelError::EmptyCalibration);
        }
        let mut ranges: BTreeMap<String, (S, S)> = BTreeMap::new();
        for batch in calib_batches {
            let mut tape = Tape::new();
            let images = tape.leaf(batch.clone());
            let mut sess =
                FwdSession { model: self, trainable: None, bindings: Vec::new(), recorder: Some(&mut ranges) };
            let _ = sess.forward_logits(&mut tape, images);
        }
        for (point, is_post_softmax) in self.act_point_names() {
            let spec = if is_post_softmax { QuantSpec::post_softmax(bits) } else { QuantSpec::activation(bits) };
            let &(lo, hi) = ranges
                .get(&point)
                .unwrap_or_else(|| panic!("activation point {point} not visited during calibration"));
            self.act_quant.insert(point, Quantizer { spec, params: params_from_range(lo, hi, &spec) });
        }
        Ok(())
    }

    /// Weight and activation quantizers together.
    pub fn attach_quantizers(&mut self, weight_bits: u32, act_bits: u32, calib_batches: &[Tensor<S>]) -> Result<(), ModelError> {
        self.attach_act_quantizers(act_bits, calib_batches)?;
        self.attach_weight_quantizers(weight_bits)
    }

    pub fn weight_quantizer_count(&self) -> usize {
        self.params.values().filter(|p| p.quant.is_some()).count()
    }

    // ── forward passes ───────────────────────────────────────────────

    pub fn session<'a>(&'a self, trainable: Option<&'a BTreeSet<String>>) -> FwdSession<'a, S> {
        FwdSession { model: self, trainable, bindings: Vec::new(), recorder: None }
    }

    /// Logits for an image batch, detached.
    pub fn logits(&self, images: &Tensor<S>) -> Tensor<S> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let mut sess = self.session(None);
        let out = sess.forward_logits(&mut tape, x);
        tape.detach(out)
    }

    /// Input snapshots of every finest unit in network order: the attention
    /// unit input X_l and feed-forward unit input Y_l of each block, under
    /// the current quantization mode. Detached.
    pub fn capture_intermediates(&self, images: &Tensor<S>) -> Vec<Tensor<S>> {
        let mut tape = Tape::new();
        let imgs = tape.leaf(images.clone());
        let mut sess = self.session(None);
        let mut x = sess.embed(&mut tape, imgs);
        let mut snaps = Vec::with_capacity(2 * self.config.depth);
        for u in 0..2 * self.config.depth {
            snaps.push(tape.detach(x));
            x = sess.unit(&mut tape, u, x);
        }
        snaps
    }

    /// Runs the network up to (not including) finest unit `unit` and returns
    /// that unit's input, detached. Used to propagate reconstruction inputs.
    pub fn forward_to_unit(&self, images: &Tensor<S>, unit: usize) -> Tensor<S> {
        assert!(unit <= 2 * self.config.depth, "unit index out of range");
        let mut tape = Tape::new();
        let imgs = tape.leaf(images.clone());
        let mut sess = self.session(None);
        let mut x = sess.embed(&mut tape, imgs);
        for u in 0..unit {
            x = sess.unit(&mut tape, u, x);
        }
        tape.detach(x)
    }
}

/// One forward pass over a model: inserts parameters as leaves, applies
/// fake-quantizers per the mode flags, and remembers which leaves want
/// gradients (`bindings`).
pub struct FwdSession<'a, S: Scalar> {
    model: &'a ModelState<S>,
    trainable: Option<&'a BTreeSet<String>>,
    pub bindings: Vec<(String, TensorId)>,
    recorder: Option<&'a mut BTreeMap<String, (S, S)>>,
}

impl<'a, S: Scalar> FwdSession<'a, S> {
    fn wants(&self, key: &str) -> bool {
        self.trainable.map(|t| t.contains(key)).unwrap_or(false)
    }

    fn param(&mut self, tape: &mut Tape<S>, name: &str) -> TensorId {
        let p = self.model.param(name);
        let mut tensor = Tensor::new(p.tensor.shape.clone(), p.tensor.data.clone());
        let wants = self.wants(name);
        tensor.requires_grad = wants;
        let id = tape.leaf(tensor);
        if wants {
            self.bindings.push((name.to_string(), id));
        }
        if self.model.weight_quant_enabled {
            if let Some(q) = &p.quant {
                let key = format!("{name}#s");
                let trainable = self.wants(&key);
                let (out, scale_id) = q.fake_quant(tape, id, trainable);
                if trainable {
                    self.bindings.push((key, scale_id));
                }
                return out;
            }
        }
        id
    }

    fn act(&mut self, tape: &mut Tape<S>, point: &str, x: TensorId) -> TensorId {
        if let Some(rec) = self.recorder.as_deref_mut() {
            let mut lo = S::infinity();
            let mut hi = S::neg_infinity();
            for &v in tape.data(x) {
                if v < lo {
                    lo = v;
                }
                if v > hi {
                    hi = v;
                }
            }
            rec.entry(point.to_string())
                .and_modify(|(l, h)| {
                    *l = (*l).min(lo);
                    *h = (*h).max(hi);
                })
                .or_insert((lo, hi));
        }
        if self.model.act_quant_enabled {
            if let Some(q) = self.model.act_quant.get(point) {
                let key = format!("act.{point}#s");
                let trainable = self.wants(&key);
                let (out, scale_id) = q.fake_quant(tape, x, trainable);
                if trainable {
                    self.bindings.push((key, scale_id));
                }
                return out;
            }
        }
        x
    }

    /// `x [rows, in] * W [in, out] + b [out]`
    fn linear(&mut self, tape: &mut Tape<S>, x: TensorId, w: &str, b: &str) -> TensorId {
        let wid = self.param(tape, w);
        let bid = self.param(tape, b);
        let prod = tape.matmul(x, wid);
        tape.add(prod, bid)
    }

    fn layernorm(&mut self, tape: &mut Tape<S>, x: TensorId, gamma: &str, beta: &str) -> TensorId {
        let g = self.param(tape, gamma);
        let b = self.param(tape, beta);
        tape.layernorm(x, g, b, S::from_f64(LN_EPS))
    }

    /// Patch embedding: flatten non-overlapping patches, project, add
    /// learned positions. `[B, C, H, W] -> [B, N, D]`.
    pub fn embed(&mut self, tape: &mut Tape<S>, images: TensorId) -> TensorId {
        let cfg = &self.model.config;
        let bsz = tape.shape(images)[0];
        let patches = tape.extract_patches(images, cfg.patch_size);
        let flat = tape.reshape(patches, vec![bsz * cfg.tokens(), cfg.patch_dim()]);
        let proj = self.linear(tape, flat, "embed.w", "embed.b");
        let proj = self.act(tape, "embed.out", proj);
        let proj3 = tape.reshape(proj, vec![bsz, cfg.tokens(), cfg.embed_dim]);
        let pos = self.param(tape, "embed.pos");
        tape.add(proj3, pos)
    }

    /// `x + MHSA(LN(x))` for block `l`; `[B, N, D] -> [B, N, D]`.
    pub fn mhsa_unit(&mut self, tape: &mut Tape<S>, l: usize, x: TensorId) -> TensorId {
        let cfg = &self.model.config;
        let (bsz, n, d) = (tape.shape(x)[0], cfg.tokens(), cfg.embed_dim);
        let (h, dh) = (cfg.heads, cfg.head_dim());
        let b = block(l);

        let ln = self.layernorm(tape, x, &format!("{b}.ln1.g"), &format!("{b}.ln1.b"));
        let ln = self.act(tape, &format!("{b}.ln1.out"), ln);
        let flat = tape.reshape(ln, vec![bsz * n, d]);

        let q = self.linear(tape, flat, &format!("{b}.attn.wq"), &format!("{b}.attn.bq"));
        let q = self.act(tape, &format!("{b}.attn.q"), q);
        let k = self.linear(tape, flat, &format!("{b}.attn.wk"), &format!("{b}.attn.bk"));
        let k = self.act(tape, &format!("{b}.attn.k"), k);
        let v = self.linear(tape, flat, &format!("{b}.attn.wv"), &format!("{b}.attn.bv"));
        let v = self.act(tape, &format!("{b}.attn.v"), v);

        let q4 = tape.reshape(q, vec![bsz, n, h, dh]);
        let q4 = tape.permute(q4, &[0, 2, 1, 3]);
        let k4 = tape.reshape(k, vec![bsz, n, h, dh]);
        let k4t = tape.permute(k4, &[0, 2, 3, 1]);
        let v4 = tape.reshape(v, vec![bsz, n, h, dh]);
        let v4 = tape.permute(v4, &[0, 2, 1, 3]);

        let scores = tape.matmul(q4, k4t);
        let scores = tape.scalar_mul(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
        let probs = tape.softmax(scores, 3);
        let probs = self.act(tape, &format!("{b}.attn.probs"), probs);

        let ctx = tape.matmul(probs, v4);
        let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
        let ctx = tape.reshape(ctx, vec![bsz * n, d]);
        let ctx = self.act(tape, &format!("{b}.attn.ctx"), ctx);

        let out = self.linear(tape, ctx, &format!("{b}.attn.wo"), &format!("{b}.attn.bo"));
        let out = self.act(tape, &format!("{b}.attn.out"), out);
        let out3 = tape.reshape(out, vec![bsz, n, d]);
        tape.add(out3, x)
    }

    /// `y + MLP(LN(y))` for block `l`.
    pub fn mlp_unit(&mut self, tape: &mut Tape<S>, l: usize, y: TensorId) -> TensorId {
        let cfg = &self.model.config;
        let (bsz, n, d) = (tape.shape(y)[0], cfg.tokens(), cfg.embed_dim);
        let b = block(l);

        let ln = self.layernorm(tape, y, &format!("{b}.ln2.g"), &format!("{b}.ln2.b"));
        let ln = self.act(tape, &format!("{b}.ln2.out"), ln);
        let flat = tape.reshape(ln, vec![bsz * n, d]);

        let h1 = self.linear(tape, flat, &format!("{b}.mlp.w1"), &format!("{b}.mlp.b1"));
        let h1 = self.act(tape, &format!("{b}.mlp.fc1"), h1);
        let hg = tape.gelu(h1);
        let hg = self.act(tape, &format!("{b}.mlp.gelu"), hg);
        let out = self.linear(tape, hg, &format!("{b}.mlp.w2"), &format!("{b}.mlp.b2"));
        let out = self.act(tape, &format!("{b}.mlp.fc2"), out);
        let out3 = tape.reshape(out, vec![bsz, n, d]);
        tape.add(out3, y)
    }

    /// Finest unit `u`: even indices are attention units, odd are MLP units.
    pub fn unit(&mut self, tape: &mut Tape<S>, u: usize, x: TensorId) -> TensorId {
        if u % 2 == 0 {
            self.mhsa_unit(tape, u / 2, x)
        } else {
            self.mlp_unit(tape, u / 2, x)
        }
    }

    /// Final LayerNorm, token mean-pool, classifier.
    pub fn head(&mut self, tape: &mut Tape<S>, x: TensorId) -> TensorId {
        let ln = self.layernorm(tape, x, "final_ln.g", "final_ln.b");
        let ln = self.act(tape, "final_ln.out", ln);
        let pooled = tape.mean_axis(ln, 1);
        self.linear(tape, pooled, "head.w", "head.b")
    }

    pub fn forward_logits(&mut self, tape: &mut Tape<S>, images: TensorId) -> TensorId {
        let mut x = self.embed(tape, images);
        for u in 0..2 * self.model.config.depth {
            x = self.unit(tape, u, x);
        }
        self.head(tape, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ViTConfig {
        ViTConfig {
            depth: 2,
            embed_dim: 16,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            in_channels: 1,
            mlp_ratio: 2.0,
            num_classes: 3,
        }
    }

    fn rand_images(cfg: &ViTConfig, bsz: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = bsz * cfg.in_channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            vec![bsz, cfg.in_channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn rejects_depth_zero() {
        let cfg = ViTConfig { depth: 0, ..toy_config() };
        assert!(ModelState::<f32>::init(&cfg, 0).is_err());
    }

    #[test]
    fn token_count_matches_grid() {
        let cfg = ViTConfig { image_size: 32, patch_size: 8, ..toy_config() };
        assert_eq!(cfg.tokens(), 16);
    }

    #[test]
    fn logits_shape_and_determinism() {
        let cfg = toy_config();
        let m = ModelState::<f32>::init(&cfg, 3).unwrap();
        let imgs = rand_images(&cfg, 4, 9);
        let a = m.logits(&imgs);
        assert_eq!(a.shape, vec![4, 3]);
        let m2 = ModelState::<f32>::init(&cfg, 3).unwrap();
        assert_eq!(m2, m);
        assert_eq!(m2.logits(&imgs).data, a.data);
    }

    #[test]
    fn zero_branch_weights_make_units_identity() {
        let cfg = toy_config();
        let mut m = ModelState::<f32>::init(&cfg, 5).unwrap();
        for l in 0..cfg.depth {
            let b = format!("blocks.{l:02}");
            for w in ["wq", "wk", "wv", "wo"] {
                let name = format!("{b}.attn.{w}");
                let shape = m.param(&name).tensor.shape.clone();
                m.set_param_tensor(&name, Tensor::zeros(shape));
            }
            for w in ["w1", "w2"] {
                let name = format!("{b}.mlp.{w}");
                let shape = m.param(&name).tensor.shape.clone();
                m.set_param_tensor(&name, Tensor::zeros(shape));
            }
        }
        let imgs = rand_images(&cfg, 2, 1);
        let mut tape = Tape::new();
        let ii = tape.leaf(imgs);
        let mut sess = m.session(None);
        let x = sess.embed(&mut tape, ii);
        let y = sess.unit(&mut tape, 0, x);
        assert_eq!(tape.data(y), tape.data(x), "attention unit should be the identity");
        let z = sess.unit(&mut tape, 1, y);
        assert_eq!(tape.data(z), tape.data(y), "mlp unit should be the identity");
    }

    #[test]
    fn zero_images_and_zero_pos_give_broadcast_bias() {
        let cfg = toy_config();
        let mut m = ModelState::<f32>::init(&cfg, 5).unwrap();
        m.set_param_tensor("embed.pos", Tensor::zeros(vec![cfg.tokens(), cfg.embed_dim]));
        let imgs = Tensor::zeros(vec![2, 1, 8, 8]);
        let mut tape = Tape::new();
        let ii = tape.leaf(imgs);
        let mut sess = m.session(None);
        let x = sess.embed(&mut tape, ii);
        let bias = &m.param("embed.b").tensor.data;
        for (i, &v) in tape.data(x).iter().enumerate() {
            assert_eq!(v, bias[i % cfg.embed_dim]);
        }
    }

    #[test]
    fn capture_matches_standalone_unit_forward() {
        let cfg = toy_config();
        let m = ModelState::<f32>::init(&cfg, 8).unwrap();
        let imgs = rand_images(&cfg, 2, 4);
        let snaps = m.capture_intermediates(&imgs);
        assert_eq!(snaps.len(), 2 * cfg.depth);

        // X_1 is the embedding output.
        let mut tape = Tape::new();
        let ii = tape.leaf(imgs.clone());
        let mut sess = m.session(None);
        let e = sess.embed(&mut tape, ii);
        assert_eq!(tape.data(e), snaps[0].data.as_slice());

        // Y_1 recomputed standalone from X_1, bit-exact.
        let mut tape2 = Tape::new();
        let x1 = tape2.leaf(snaps[0].clone());
        let mut sess2 = m.session(None);
        let y1 = sess2.unit(&mut tape2, 0, x1);
        assert_eq!(tape2.data(y1), snaps[1].data.as_slice());
    }

    #[test]
    fn attachment_with_modes_off_is_bit_exact_noop() {
        let cfg = toy_config();
        let mut m = ModelState::<f32>::init(&cfg, 21).unwrap();
        let imgs = rand_images(&cfg, 3, 2);
        let before = m.logits(&imgs);
        m.attach_quantizers(4, 4, std::slice::from_ref(&imgs)).unwrap();
        assert!(!m.weight_quant_enabled && !m.act_quant_enabled);
        let after = m.logits(&imgs);
        assert_eq!(before.data, after.data);
    }

    #[test]
    fn weight_quantizer_count_matches_matrices() {
        let cfg = toy_config();
        let mut m = ModelState::<f32>::init(&cfg, 21).unwrap();
        m.attach_weight_quantizers(4).unwrap();
        assert_eq!(m.weight_quantizer_count(), m.weight_matrix_names().len());
        assert_eq!(m.weight_quantizer_count(), 6 * cfg.depth + 2);
    }

    #[test]
    fn post_softmax_points_use_log2() {
        let cfg = toy_config();
        let mut m = ModelState::<f32>::init(&cfg, 21).unwrap();
        let imgs = rand_images(&cfg, 2, 2);
        m.attach_act_quantizers(4, std::slice::from_ref(&imgs)).unwrap();
        for (point, q) in m.act_quantizers() {
            if point.ends_with("attn.probs") {
                assert_eq!(q.spec.scheme, crate::quant::Scheme::Log2, "{point}");
            } else {
                assert_eq!(q.spec.scheme, crate::quant::Scheme::Uniform, "{point}");
            }
        }
    }

    #[test]
    fn attention_rows_stay_in_probability_range() {
        let cfg = toy_config();
        let m = ModelState::<f32>::init(&cfg, 13).unwrap();
        let imgs = rand_images(&cfg, 2, 3);
        let mut ranges = BTreeMap::new();
        let mut tape = Tape::new();
        let ii = tape.leaf(imgs);
        let mut sess =
            FwdSession { model: &m, trainable: None, bindings: Vec::new(), recorder: Some(&mut ranges) };
        let _ = sess.forward_logits(&mut tape, ii);
        let (lo, hi) = ranges["blocks.00.attn.probs"];
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn mlp_hidden_width_matches_ratio() {
        let cfg = toy_config();
        let m = ModelState::<f32>::init(&cfg, 1).unwrap();
        assert_eq!(m.param("blocks.00.mlp.w1").tensor.shape, vec![16, 32]);
    }

    #[test]
    fn trainable_keys_cover_weights_and_scales() {
        let cfg = toy_config();
        let mut m = ModelState::<f32>::init(&cfg, 1).unwrap();
        let imgs = rand_images(&cfg, 2, 3);
        m.attach_quantizers(3, 3, std::slice::from_ref(&imgs)).unwrap();
        m.weight_quant_enabled = true;
        m.act_quant_enabled = true;
        let keys = m.trainable_keys_for_unit(0);
        assert!(keys.contains("blocks.00.attn.wq"));
        assert!(keys.contains("blocks.00.attn.wq#s"));
        assert!(keys.contains("act.blocks.00.attn.probs#s"));
        assert!(keys.contains("blocks.00.ln1.g"));
        assert!(!keys.contains("blocks.00.ln2.g"));

        let mlp_keys = m.trainable_keys_for_unit(1);
        assert!(mlp_keys.contains("blocks.00.mlp.w1"));
        assert!(mlp_keys.contains("act.blocks.00.mlp.gelu#s"));
        assert!(!mlp_keys.contains("blocks.00.attn.wq"));
    }
}
