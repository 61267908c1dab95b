//! Encoder-decoder transformer over the autodiff tensors.
//!
//! Pre-LN blocks (the residual stream is normalized before each sublayer,
//! with one final norm after the stack), sinusoidal positions, and a
//! weight-tied output head by default. Attention is composed per head from
//! 2-D primitives, so every parameter is reachable by the gradient checker.
//!
//! Two source paths exist: the ordinary one embeds token ids; the soft one
//! accepts a caller-built `[s, d_model]` embedding matrix, which is how the
//! review bridge feeds student predictions into the refinement model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Elem, Tensor};
use crate::tokenizer::{EncodedInput, TokenSequence, BOS, EOS};

const MASK_OFF: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Positional {
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Longest encoder input the positional table must cover.
    pub max_src_len: usize,
    /// Longest decoder input, counting the leading bos.
    pub max_tgt_len: usize,
    /// Seeds the parameter initialization only; training draws (shuffling,
    /// dropout) come from the run seed.
    pub seed: u64,
    pub activation: Activation,
    pub positional: Positional,
    pub tie_embeddings: bool,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_src_len: 48,
            max_tgt_len: 32,
            seed: 0,
            activation: Activation::Gelu,
            positional: Positional::Sinusoidal,
            tie_embeddings: true,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 6 {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size {} leaves no room for real tokens after the 5 sentinels",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(ModelError::InvalidConfig(
                "n_layers and d_ff must be positive".into(),
            ));
        }
        if self.max_src_len < 2 || self.max_tgt_len < 2 {
            return Err(ModelError::InvalidConfig(
                "max_src_len and max_tgt_len must be at least 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn pos_rows(&self) -> usize {
        self.max_src_len.max(self.max_tgt_len)
    }
}

struct LnParams<E: Elem> {
    g: Tensor<E>,
    b: Tensor<E>,
}

struct AttnParams<E: Elem> {
    wq: Tensor<E>,
    bq: Tensor<E>,
    wk: Tensor<E>,
    bk: Tensor<E>,
    wv: Tensor<E>,
    bv: Tensor<E>,
    wo: Tensor<E>,
    bo: Tensor<E>,
}

struct FfnParams<E: Elem> {
    w1: Tensor<E>,
    b1: Tensor<E>,
    w2: Tensor<E>,
    b2: Tensor<E>,
}

struct EncLayer<E: Elem> {
    ln1: LnParams<E>,
    attn: AttnParams<E>,
    ln2: LnParams<E>,
    ffn: FfnParams<E>,
}

struct DecLayer<E: Elem> {
    ln1: LnParams<E>,
    self_attn: AttnParams<E>,
    ln2: LnParams<E>,
    cross_attn: AttnParams<E>,
    ln3: LnParams<E>,
    ffn: FfnParams<E>,
}

/// Everything a teacher-forced pass exposes downstream: token logits plus
/// the normalized hidden states both losses pool over.
pub struct ForwardOutput<E: Elem> {
    pub logits: Tensor<E>,
    pub decoder_hidden: Tensor<E>,
    pub encoder_hidden: Tensor<E>,
}

pub struct Seq2Seq<E: Elem> {
    cfg: ModelConfig,
    embedding: Tensor<E>,
    out_proj: Option<Tensor<E>>,
    out_bias: Tensor<E>,
    enc_final: LnParams<E>,
    dec_final: LnParams<E>,
    enc_layers: Vec<EncLayer<E>>,
    dec_layers: Vec<DecLayer<E>>,
    pos_table: Vec<E>,
}

fn xavier<E: Elem>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<E> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let vals = (0..rows * cols)
        .map(|_| E::from_f64(rng.random_range(-a..a)))
        .collect();
    Tensor::param(vec![rows, cols], vals)
}

fn zeros<E: Elem>(n: usize) -> Tensor<E> {
    Tensor::param(vec![n], vec![E::ZERO; n])
}

fn ln_params<E: Elem>(d: usize) -> LnParams<E> {
    LnParams {
        g: Tensor::param(vec![d], vec![E::ONE; d]),
        b: zeros(d),
    }
}

fn attn_params<E: Elem>(rng: &mut ChaCha8Rng, d: usize) -> AttnParams<E> {
    AttnParams {
        wq: xavier(rng, d, d),
        bq: zeros(d),
        wk: xavier(rng, d, d),
        bk: zeros(d),
        wv: xavier(rng, d, d),
        bv: zeros(d),
        wo: xavier(rng, d, d),
        bo: zeros(d),
    }
}

fn ffn_params<E: Elem>(rng: &mut ChaCha8Rng, d: usize, d_ff: usize) -> FfnParams<E> {
    FfnParams {
        w1: xavier(rng, d, d_ff),
        b1: zeros(d_ff),
        w2: xavier(rng, d_ff, d),
        b2: zeros(d),
    }
}

/// Sinusoidal table, row-major `[max_len, d]`.
fn sinusoidal_table<E: Elem>(max_len: usize, d: usize) -> Vec<E> {
    let mut t = vec![E::ZERO; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t[pos * d + i] = E::from_f64(v);
        }
    }
    t
}

impl<E: Elem> Seq2Seq<E> {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let embedding = xavier(&mut rng, cfg.vocab_size, d);
        let out_proj = if cfg.tie_embeddings {
            None
        } else {
            Some(xavier(&mut rng, d, cfg.vocab_size))
        };
        let out_bias = zeros(cfg.vocab_size);
        let enc_layers = (0..cfg.n_layers)
            .map(|_| EncLayer {
                ln1: ln_params(d),
                attn: attn_params(&mut rng, d),
                ln2: ln_params(d),
                ffn: ffn_params(&mut rng, d, cfg.d_ff),
            })
            .collect();
        let dec_layers = (0..cfg.n_layers)
            .map(|_| DecLayer {
                ln1: ln_params(d),
                self_attn: attn_params(&mut rng, d),
                ln2: ln_params(d),
                cross_attn: attn_params(&mut rng, d),
                ln3: ln_params(d),
                ffn: ffn_params(&mut rng, d, cfg.d_ff),
            })
            .collect();
        let pos_table = match cfg.positional {
            Positional::Sinusoidal => sinusoidal_table(cfg.pos_rows(), d),
            Positional::None => vec![E::ZERO; cfg.pos_rows() * d],
        };
        Ok(Seq2Seq {
            cfg,
            embedding,
            out_proj,
            out_bias,
            enc_final: ln_params(d),
            dec_final: ln_params(d),
            enc_layers,
            dec_layers,
            pos_table,
        })
    }

    /// Independent copy with the same weights. `Clone` on the tensors would
    /// alias storage; here a fresh parameter set is built from the config and
    /// this model's values are written over it, so the copies train apart.
    pub fn deep_clone(&self) -> Self {
        let fresh = Seq2Seq::new(self.cfg.clone())
            .expect("config was validated when this model was built");
        for ((_, dst), (_, src)) in fresh.named_params().iter().zip(self.named_params()) {
            let sv = src.values();
            dst.update_values(|vals| vals.copy_from_slice(&sv));
        }
        fresh
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &Tensor<E> {
        &self.embedding
    }

    /// All trainable tensors with stable names, in a fixed order the
    /// checkpoint format relies on.
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out: Vec<(String, Tensor<E>)> = Vec::new();
        let mut push = |name: String, t: &Tensor<E>| out.push((name, t.clone()));
        push("embedding".into(), &self.embedding);
        if let Some(p) = &self.out_proj {
            push("out_proj".into(), p);
        }
        push("out_bias".into(), &self.out_bias);
        for (pre, ln) in [("enc_final", &self.enc_final), ("dec_final", &self.dec_final)] {
            push(format!("{pre}.g"), &ln.g);
            push(format!("{pre}.b"), &ln.b);
        }
        let attn = |out: &mut Vec<(String, Tensor<E>)>, pre: String, a: &AttnParams<E>| {
            for (n, t) in [
                ("wq", &a.wq),
                ("bq", &a.bq),
                ("wk", &a.wk),
                ("bk", &a.bk),
                ("wv", &a.wv),
                ("bv", &a.bv),
                ("wo", &a.wo),
                ("bo", &a.bo),
            ] {
                out.push((format!("{pre}.{n}"), t.clone()));
            }
        };
        let ln = |out: &mut Vec<(String, Tensor<E>)>, pre: String, l: &LnParams<E>| {
            out.push((format!("{pre}.g"), l.g.clone()));
            out.push((format!("{pre}.b"), l.b.clone()));
        };
        let ffn = |out: &mut Vec<(String, Tensor<E>)>, pre: String, f: &FfnParams<E>| {
            for (n, t) in [("w1", &f.w1), ("b1", &f.b1), ("w2", &f.w2), ("b2", &f.b2)] {
                out.push((format!("{pre}.{n}"), t.clone()));
            }
        };
        for (i, l) in self.enc_layers.iter().enumerate() {
            ln(&mut out, format!("enc.{i}.ln1"), &l.ln1);
            attn(&mut out, format!("enc.{i}.attn"), &l.attn);
            ln(&mut out, format!("enc.{i}.ln2"), &l.ln2);
            ffn(&mut out, format!("enc.{i}.ffn"), &l.ffn);
        }
        for (i, l) in self.dec_layers.iter().enumerate() {
            ln(&mut out, format!("dec.{i}.ln1"), &l.ln1);
            attn(&mut out, format!("dec.{i}.self"), &l.self_attn);
            ln(&mut out, format!("dec.{i}.ln2"), &l.ln2);
            attn(&mut out, format!("dec.{i}.cross"), &l.cross_attn);
            ln(&mut out, format!("dec.{i}.ln3"), &l.ln3);
            ffn(&mut out, format!("dec.{i}.ffn"), &l.ffn);
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn positional(&self, t: usize) -> Tensor<E> {
        assert!(
            t <= self.cfg.pos_rows(),
            "sequence of {t} exceeds positional table {}",
            self.cfg.pos_rows()
        );
        Tensor::constant(vec![t, self.cfg.d_model], self.pos_table[..t * self.cfg.d_model].to_vec())
    }

    /// Raw token embeddings scaled by sqrt(d_model), positions added.
    fn embed_and_position(&self, ids: &[u32]) -> Tensor<E> {
        let scaled = self
            .embedding
            .embed(ids)
            .scale(E::from_f64((self.cfg.d_model as f64).sqrt()));
        scaled.add(&self.positional(ids.len()))
    }

    fn source_from_embeddings(&self, raw: &Tensor<E>) -> Tensor<E> {
        let t = raw.shape()[0];
        raw.scale(E::from_f64((self.cfg.d_model as f64).sqrt()))
            .add(&self.positional(t))
    }

    fn activation(&self, x: Tensor<E>) -> Tensor<E> {
        match self.cfg.activation {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }

    fn maybe_dropout(&self, x: Tensor<E>, rng: &mut Option<&mut ChaCha8Rng>) -> Tensor<E> {
        match rng {
            Some(r) if self.cfg.dropout > 0.0 => x.dropout(self.cfg.dropout, &mut **r),
            _ => x,
        }
    }

    /// Multi-head attention: queries from `q_in`, keys and values from
    /// `kv_in`, optional additive mask on the score matrix.
    fn attention(
        &self,
        p: &AttnParams<E>,
        q_in: &Tensor<E>,
        kv_in: &Tensor<E>,
        mask: Option<&Tensor<E>>,
    ) -> Tensor<E> {
        let scale = E::from_f64(1.0 / (self.cfg.d_head() as f64).sqrt());
        let q = q_in.matmul(&p.wq).add_bias(&p.bq);
        let k = kv_in.matmul(&p.wk).add_bias(&p.bk);
        let v = kv_in.matmul(&p.wv).add_bias(&p.bv);
        let heads = Tensor::attention_heads(&q, &k, &v, self.cfg.n_heads, scale, mask);
        heads.matmul(&p.wo).add_bias(&p.bo)
    }

    fn encoder_stack(
        &self,
        x0: Tensor<E>,
        src_mask: &Tensor<E>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Tensor<E> {
        let eps = E::from_f64(self.cfg.ln_eps);
        let mut x = self.maybe_dropout(x0, rng);
        for l in &self.enc_layers {
            let n1 = x.layer_norm(&l.ln1.g, &l.ln1.b, eps);
            let a = self.attention(&l.attn, &n1, &n1, Some(src_mask));
            let x1 = x.add(&self.maybe_dropout(a, rng));
            let h = x1.layer_norm(&l.ln2.g, &l.ln2.b, eps);
            let f = self
                .activation(h.matmul(&l.ffn.w1).add_bias(&l.ffn.b1))
                .matmul(&l.ffn.w2)
                .add_bias(&l.ffn.b2);
            x = x1.add(&self.maybe_dropout(f, rng));
        }
        x.layer_norm(&self.enc_final.g, &self.enc_final.b, eps)
    }

    fn decoder_stack(
        &self,
        ids: &[u32],
        enc_h: &Tensor<E>,
        cross_mask: &Tensor<E>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Tensor<E> {
        let eps = E::from_f64(self.cfg.ln_eps);
        let t = ids.len();
        let causal = causal_mask::<E>(t);
        let mut x = self.maybe_dropout(self.embed_and_position(ids), rng);
        for l in &self.dec_layers {
            let n1 = x.layer_norm(&l.ln1.g, &l.ln1.b, eps);
            let a = self.attention(&l.self_attn, &n1, &n1, Some(&causal));
            let x1 = x.add(&self.maybe_dropout(a, rng));
            let n2 = x1.layer_norm(&l.ln2.g, &l.ln2.b, eps);
            let c = self.attention(&l.cross_attn, &n2, enc_h, Some(cross_mask));
            let x2 = x1.add(&self.maybe_dropout(c, rng));
            let n3 = x2.layer_norm(&l.ln3.g, &l.ln3.b, eps);
            let f = self
                .activation(n3.matmul(&l.ffn.w1).add_bias(&l.ffn.b1))
                .matmul(&l.ffn.w2)
                .add_bias(&l.ffn.b2);
            x = x2.add(&self.maybe_dropout(f, rng));
        }
        x.layer_norm(&self.dec_final.g, &self.dec_final.b, eps)
    }

    fn output_logits(&self, dec_h: &Tensor<E>) -> Tensor<E> {
        // The tied head reuses input-scale embeddings, so its logits are
        // scaled by 1/sqrt(d) (the usual shared-embedding convention);
        // this keeps untrained per-token loss near ln(vocab).
        let proj = match &self.out_proj {
            Some(w) => dec_h.matmul(w),
            None => dec_h
                .matmul(&self.embedding.transpose())
                .scale(E::from_f64(1.0 / (self.cfg.d_model as f64).sqrt())),
        };
        proj.add_bias(&self.out_bias)
    }

    fn run(
        &self,
        src_positioned: Tensor<E>,
        src_key_mask: &[E],
        dec_inputs: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> ForwardOutput<E> {
        let s = src_key_mask.len();
        assert!(
            s <= self.cfg.max_src_len,
            "source length {s} exceeds max_src_len {}",
            self.cfg.max_src_len
        );
        assert!(
            dec_inputs.len() <= self.cfg.max_tgt_len,
            "decoder length {} exceeds max_tgt_len {}",
            dec_inputs.len(),
            self.cfg.max_tgt_len
        );
        let self_mask = key_padding_mask::<E>(s, src_key_mask);
        let enc_h = self.encoder_stack(src_positioned, &self_mask, &mut rng);
        let cross = key_padding_mask::<E>(dec_inputs.len(), src_key_mask);
        let dec_h = self.decoder_stack(dec_inputs, &enc_h, &cross, &mut rng);
        let logits = self.output_logits(&dec_h);
        ForwardOutput {
            logits,
            decoder_hidden: dec_h,
            encoder_hidden: enc_h,
        }
    }

    /// Teacher-forced pass over an encoded source and a target sequence.
    pub fn forward_teacher_forced(
        &self,
        source: &EncodedInput,
        target: &TokenSequence,
        rng: Option<&mut ChaCha8Rng>,
    ) -> ForwardOutput<E> {
        let mask: Vec<E> = source.attention_mask();
        let src = self.embed_and_position(&source.ids);
        self.run(src, &mask, target.decoder_inputs(), rng)
    }

    /// Teacher-forced pass whose source embeddings are supplied by the
    /// caller (raw table-space rows; scaling and positions are applied
    /// here, identically to the id path).
    pub fn forward_soft_source(
        &self,
        src_embeddings: &Tensor<E>,
        src_key_mask: &[E],
        target: &TokenSequence,
        rng: Option<&mut ChaCha8Rng>,
    ) -> ForwardOutput<E> {
        assert_eq!(
            src_embeddings.shape()[1],
            self.cfg.d_model,
            "soft source width {} != d_model {}",
            src_embeddings.shape()[1],
            self.cfg.d_model
        );
        let src = self.source_from_embeddings(src_embeddings);
        self.run(src, src_key_mask, target.decoder_inputs(), rng)
    }

    /// Greedy argmax decoding: starts from `<s>`, stops at `</s>` or
    /// `max_out` generated tokens. Returns generated ids without the
    /// leading `<s>`; ties resolve to the lowest id.
    pub fn greedy_decode(&self, source: &EncodedInput, max_out: usize) -> Vec<u32> {
        assert!(
            max_out < self.cfg.max_tgt_len,
            "max_out {max_out} leaves no room for the bos prefix in max_tgt_len {}",
            self.cfg.max_tgt_len
        );
        let mask: Vec<E> = source.attention_mask();
        let s = source.ids.len();
        let self_mask = key_padding_mask::<E>(s, &mask);
        let src = self.embed_and_position(&source.ids);
        let enc_h = self.encoder_stack(src, &self_mask, &mut None);
        let mut out: Vec<u32> = Vec::new();
        let mut prefix = vec![BOS];
        for _ in 0..max_out {
            let cross = key_padding_mask::<E>(prefix.len(), &mask);
            let dec_h = self.decoder_stack(&prefix, &enc_h, &cross, &mut None);
            let logits = self.output_logits(&dec_h);
            let v = self.cfg.vocab_size;
            let vals = logits.values();
            let last = &vals[(prefix.len() - 1) * v..prefix.len() * v];
            let mut best = 0usize;
            for (j, val) in last.iter().enumerate() {
                if *val > last[best] {
                    best = j;
                }
            }
            drop(vals);
            let tok = best as u32;
            out.push(tok);
            if tok == EOS {
                break;
            }
            prefix.push(tok);
        }
        out
    }
}

/// Checkpoint header fields besides the model config itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Hash of the training configuration that produced the parameters.
    pub config_hash: String,
    pub tool_version: String,
}

const CKPT_MAGIC: &[u8; 4] = b"RVDS";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file: bad magic bytes")]
    BadMagic,
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint header field {field}: {message}")]
    CorruptHeader { field: String, message: String },
    #[error("checkpoint truncated while reading {field}")]
    Truncated { field: String },
    #[error("parameter block {index} is {found}, expected {expected}")]
    FieldMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint has {found} trailing bytes after parameter {last}")]
    TrailingBytes { last: String, found: usize },
    #[error("invalid model config in checkpoint: {0}")]
    InvalidConfig(#[from] ModelError),
}

/// Serializes config, provenance meta, and every named parameter block as
/// little-endian f32 with its declared shape. Loading rebuilds the exact
/// model; the round trip is bitwise lossless.
pub fn save_checkpoint(
    model: &Seq2Seq<f32>,
    meta: &CheckpointMeta,
    path: &std::path::Path,
) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let header = serde_json::json!({ "config": model.config(), "meta": meta });
    let header = serde_json::to_vec(&header).expect("header serializes");
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let params = model.named_params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.to_vec() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { field: field.into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint, validating the version, the config, every block
/// name against the config-derived parameter list, and every shape.
pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(Seq2Seq<f32>, CheckpointMeta), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32("version")?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let header_len = c.u32("header length")? as usize;
    let header = c.take(header_len, "header")?;
    let header: serde_json::Value =
        serde_json::from_slice(header).map_err(|e| CheckpointError::CorruptHeader {
            field: "header".into(),
            message: e.to_string(),
        })?;
    let cfg: ModelConfig = serde_json::from_value(header["config"].clone()).map_err(|e| {
        CheckpointError::CorruptHeader {
            field: "config".into(),
            message: e.to_string(),
        }
    })?;
    let meta: CheckpointMeta = serde_json::from_value(header["meta"].clone()).map_err(|e| {
        CheckpointError::CorruptHeader {
            field: "meta".into(),
            message: e.to_string(),
        }
    })?;
    let model = Seq2Seq::<f32>::new(cfg)?;
    let expected = model.named_params();
    let n_blocks = c.u32("parameter count")? as usize;
    if n_blocks != expected.len() {
        return Err(CheckpointError::CorruptHeader {
            field: "parameter count".into(),
            message: format!("{n_blocks} blocks, config implies {}", expected.len()),
        });
    }
    for (index, (want_name, t)) in expected.iter().enumerate() {
        let name_len = c.u32(want_name)? as usize;
        let name = String::from_utf8(c.take(name_len, want_name)?.to_vec()).map_err(|_| {
            CheckpointError::CorruptHeader {
                field: want_name.clone(),
                message: "parameter name is not utf-8".into(),
            }
        })?;
        if name != *want_name {
            return Err(CheckpointError::FieldMismatch {
                index,
                expected: want_name.clone(),
                found: name,
            });
        }
        let ndim = c.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64(&name)? as usize);
        }
        if shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: t.shape().to_vec(),
                found: shape,
            });
        }
        let raw = c.take(4 * t.len(), &name)?;
        t.update_values(|dst| {
            for (slot, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *slot = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        });
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            last: expected.last().map(|(n, _)| n.clone()).unwrap_or_default(),
            found: bytes.len() - c.pos,
        });
    }
    Ok((model, meta))
}

/// Additive `[t, s]` mask: 0 on real keys, a large negative on padding.
fn key_padding_mask<E: Elem>(t: usize, key_mask: &[E]) -> Tensor<E> {
    let s = key_mask.len();
    let off = E::from_f64(MASK_OFF);
    let mut vals = vec![E::ZERO; t * s];
    for i in 0..t {
        for j in 0..s {
            if key_mask[j] == E::ZERO {
                vals[i * s + j] = off;
            }
        }
    }
    Tensor::constant(vec![t, s], vals)
}

/// Additive `[t, t]` causal mask: position i may attend to j <= i.
fn causal_mask<E: Elem>(t: usize) -> Tensor<E> {
    let off = E::from_f64(MASK_OFF);
    let mut vals = vec![E::ZERO; t * t];
    for i in 0..t {
        for j in i + 1..t {
            vals[i * t + j] = off;
        }
    }
    Tensor::constant(vec![t, t], vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::tokenizer::Vocabulary;

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_src_len: 16,
            max_tgt_len: 16,
            ..ModelConfig::default()
        }
    }

    fn model(vocab: usize, seed: u64) -> Seq2Seq<f32> {
        Seq2Seq::new(ModelConfig { seed, ..tiny_cfg(vocab) }).unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["x", "=", "1", "2", "fix", "a"])
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut c = tiny_cfg(11);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
        let mut c = tiny_cfg(5);
        c.n_heads = 2;
        assert!(c.validate().is_err());
        assert!(tiny_cfg(11).validate().is_ok());
    }

    #[test]
    fn forward_shapes_match_windows() {
        let v = vocab();
        let m = model(v.len(), 1);
        let src = v.encode_student_input("x = 1", 8).unwrap();
        let tgt = v.encode_target("fix x", 6).unwrap();
        let out = m.forward_teacher_forced(&src, &tgt, None);
        assert_eq!(out.logits.shape(), &[5, v.len()]);
        assert_eq!(out.decoder_hidden.shape(), &[5, 16]);
        assert_eq!(out.encoder_hidden.shape(), &[8, 16]);
    }

    #[test]
    fn decoder_is_causal_under_teacher_forcing() {
        let v = vocab();
        let m = model(v.len(), 2);
        let src = v.encode_student_input("x = 1", 8).unwrap();
        let a = v.encode_target("fix x a", 8).unwrap();
        let b = v.encode_target("fix x =", 8).unwrap();
        let la = m.forward_teacher_forced(&src, &a, None).logits.to_vec();
        let lb = m.forward_teacher_forced(&src, &b, None).logits.to_vec();
        let vsz = v.len();
        // Targets differ only at position 3, so logits at earlier positions
        // must be identical.
        for p in 0..3 {
            for j in 0..vsz {
                assert_eq!(la[p * vsz + j], lb[p * vsz + j], "leak at position {p}");
            }
        }
        assert_ne!(la[3 * vsz..4 * vsz], lb[3 * vsz..4 * vsz]);
    }

    #[test]
    fn masked_source_positions_cannot_influence_output() {
        let v = vocab();
        let m = model(v.len(), 3);
        let src = v.encode_student_input("x = 1", 8).unwrap();
        let tgt = v.encode_target("fix", 5).unwrap();
        let key_mask: Vec<f32> = src.attention_mask();
        let base = m.embedding().embed(&src.ids).detach();
        let l0 = m
            .forward_soft_source(&base, &key_mask, &tgt, None)
            .logits
            .to_vec();
        // Perturb an embedding row at a padded position: no effect.
        let mut poked = base.to_vec();
        let pad_pos = 5;
        assert_eq!(key_mask[pad_pos], 0.0);
        for x in &mut poked[pad_pos * 16..(pad_pos + 1) * 16] {
            *x += 37.0;
        }
        let poked = Tensor::constant(base.shape().to_vec(), poked);
        let l1 = m
            .forward_soft_source(&poked, &key_mask, &tgt, None)
            .logits
            .to_vec();
        assert_eq!(l0, l1);
        // Perturbing a real position must change the logits.
        let mut real = base.to_vec();
        for x in &mut real[16..32] {
            *x += 1.0;
        }
        let real = Tensor::constant(base.shape().to_vec(), real);
        let l2 = m
            .forward_soft_source(&real, &key_mask, &tgt, None)
            .logits
            .to_vec();
        assert_ne!(l0, l2);
    }

    #[test]
    fn soft_source_with_true_embeddings_matches_id_path() {
        let v = vocab();
        let m = model(v.len(), 4);
        let src = v.encode_student_input("x = 1", 8).unwrap();
        let tgt = v.encode_target("fix x", 6).unwrap();
        let hard = m.forward_teacher_forced(&src, &tgt, None).logits.to_vec();
        let key_mask: Vec<f32> = src.attention_mask();
        let emb = m.embedding().embed(&src.ids);
        let soft = m
            .forward_soft_source(&emb, &key_mask, &tgt, None)
            .logits
            .to_vec();
        for (a, b) in hard.iter().zip(&soft) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn greedy_decode_is_deterministic_and_bounded() {
        let v = vocab();
        let m = model(v.len(), 5);
        let src = v.encode_student_input("x = 1", 8).unwrap();
        let a = m.greedy_decode(&src, 10);
        let b = m.greedy_decode(&src, 10);
        assert_eq!(a, b);
        assert!(a.len() <= 10);
        if let Some(pos) = a.iter().position(|&t| t == EOS) {
            assert_eq!(pos, a.len() - 1, "nothing may follow </s>");
        }
    }

    #[test]
    fn untied_model_has_extra_projection() {
        let mut cfg = ModelConfig { seed: 1, ..tiny_cfg(11) };
        let tied: Seq2Seq<f32> = Seq2Seq::new(cfg.clone()).unwrap();
        cfg.tie_embeddings = false;
        let untied: Seq2Seq<f32> = Seq2Seq::new(cfg).unwrap();
        assert_eq!(
            untied.params().len(),
            tied.params().len() + 1,
            "untied head adds exactly one tensor"
        );
        let n: usize = tied.params().iter().map(|p| p.len()).sum();
        let nu: usize = untied.params().iter().map(|p| p.len()).sum();
        assert_eq!(nu - n, 16 * 11);
    }

    #[test]
    fn sinusoidal_table_reference_values() {
        let t = sinusoidal_table::<f64>(3, 4);
        assert_eq!(t[0], 0.0); // sin(0)
        assert_eq!(t[1], 1.0); // cos(0)
        assert!((t[4] - 1f64.sin()).abs() < 1e-12);
        assert!((t[5] - 1f64.cos()).abs() < 1e-12);
        assert!((t[6] - 0.01f64.sin()).abs() < 1e-12);
        assert!((t[7] - 0.01f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn disabling_positions_makes_table_zero() {
        let mut cfg = ModelConfig { seed: 1, ..tiny_cfg(11) };
        cfg.positional = Positional::None;
        let m: Seq2Seq<f32> = Seq2Seq::new(cfg).unwrap();
        assert!(m.pos_table.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = model(11, 9);
        let b = model(11, 9);
        let c = model(11, 10);
        for ((_, x), (_, y)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
        assert_ne!(
            a.named_params()[0].1.to_vec(),
            c.named_params()[0].1.to_vec()
        );
    }

    #[test]
    fn whole_model_gradient_check() {
        // d=8 single layer in f64: verifies attention, layer norm, tying,
        // and masking end to end against finite differences.
        let v = vocab();
        let cfg = ModelConfig {
            vocab_size: v.len(),
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_src_len: 8,
            max_tgt_len: 8,
            seed: 11,
            ..ModelConfig::default()
        };
        let m: Seq2Seq<f64> = Seq2Seq::new(cfg).unwrap();
        let src = v.encode_student_input("x = 1", 6).unwrap();
        let tgt = v.encode_target("fix x", 5).unwrap();
        let params = m.params();
        let report = gradcheck(
            &params,
            |_| {
                let out = m.forward_teacher_forced(&src, &tgt, None);
                let probs = out.logits.softmax_rows();
                let (lp, _) = probs.gather_index(tgt.labels()).ln_clamped(1e-12);
                lp.masked_mean(&tgt.label_mask()).scale(-1.0)
            },
            1e-5,
        );
        // 1e-4 bar: elements with near-zero gradients sit at the finite-
        // difference noise floor, which dominates the comparison there.
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} over {} elements",
            report.max_rel_err,
            report.checked
        );
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            config_hash: "deadbeef".into(),
            tool_version: "0.1.0-test".into(),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(11, 7);
        save_checkpoint(&m, &meta(), &path).unwrap();
        let (back, got_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(got_meta, meta());
        assert_eq!(back.config(), m.config());
        for ((na, a), (nb, b)) in m.named_params().iter().zip(back.named_params()) {
            assert_eq!(*na, nb);
            let av = a.to_vec();
            let bv = b.to_vec();
            assert_eq!(av.len(), bv.len());
            for (x, y) in av.iter().zip(&bv) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {na} drifted");
            }
        }
        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&back, &meta(), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption_with_named_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(11, 7);
        save_checkpoint(&m, &meta(), &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"nope".to_vec()).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(CheckpointError::BadMagic) | Err(CheckpointError::Truncated { .. })
        ));

        let mut v = good.clone();
        v[4] = 99; // version field
        std::fs::write(&bad, &v).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(CheckpointError::VersionMismatch { found: 99, .. })
        ));

        let mut h = good.clone();
        h[16] = b'!'; // inside the json header
        std::fs::write(&bad, &h).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(CheckpointError::CorruptHeader { .. })
        ));

        let mut t = good.clone();
        t.truncate(good.len() - 9);
        std::fs::write(&bad, &t).unwrap();
        match load_checkpoint(&bad).err() {
            Some(CheckpointError::Truncated { field }) => {
                assert!(!field.is_empty(), "error must name the failing field")
            }
            other => panic!("expected truncation error, got {other:?}"),
        }

        let mut extra = good.clone();
        extra.extend_from_slice(&[0u8; 3]);
        std::fs::write(&bad, &extra).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(CheckpointError::TrailingBytes { found: 3, .. })
        ));
    }

    #[test]
    fn checkpoint_shape_mismatch_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(11, 7);
        save_checkpoint(&m, &meta(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // The first block is the embedding: magic(4) version(4) hlen(4)
        // header, then block count(4), name len(4), "embedding"(9),
        // ndim(4), then dims as u64. Bump the first dim.
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim_at = 12 + hlen + 4 + 4 + 9 + 4;
        bytes[dim_at] = bytes[dim_at].wrapping_add(1);
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path).err() {
            Some(CheckpointError::ShapeMismatch { name, .. }) => assert_eq!(name, "embedding"),
            // Size change also shows up as truncation further in; both name a field.
            Some(CheckpointError::Truncated { .. }) => panic!("shape check must fire first"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}

