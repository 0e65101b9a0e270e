//! Sequence-to-sequence backbone: token + position embeddings, a
//! bi-directional (fully connected) self-attention encoder, a causal
//! decoder with cross-attention, and a linear LM head.
//!
//! The desk-scale instance built by [`build_tiny_backbone`] is fully
//! trainable and deterministic given its seed. Pretrained weights enter
//! through [`load_pretrained`], which reads the same checkpoint layout
//! [`Backbone::save`] writes.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{assign_entry, entry_from, read_json, write_json, WeightMap};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{
    build_attention, build_feed_forward, build_layer_norm, build_linear, embedding_init,
    AttentionNodes, AttentionParams, FeedForwardNodes, FeedForwardParams, LayerNormNodes,
    LayerNormParams, LinearNodes, LinearParams, ParamReg,
};
use crate::scalar::Scalar;
use crate::tokenizer::{WordTokenizer, BOS_ID, EOS_ID, PAD_ID, UNK_ID};

/// Hyper-parameters of a backbone instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Hidden width d.
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Vocabulary size S (id space of the tokenizer).
    pub vocab_size: usize,
    /// Maximum token positions for both encoder input and decoder prefix.
    pub max_input_length: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden_dim: 32,
            layers: 2,
            heads: 2,
            vocab_size: 512,
            max_input_length: 128,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::config("hidden_dim, layers, and heads must be positive"));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} must be divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.max_input_length == 0 {
            return Err(Error::config("max_input_length must be at least 1"));
        }
        if self.vocab_size <= 4 {
            return Err(Error::config("vocab_size must exceed the 4 special tokens"));
        }
        Ok(())
    }
}

/// Per-token hidden vectors from the encoder, plus the padding mask that
/// produced them (`true` marks a real position).
#[derive(Debug, Clone)]
pub struct EncoderStates<F: Scalar> {
    states: Array2<F>,
    mask: Vec<bool>,
}

impl<F: Scalar> EncoderStates<F> {
    pub fn new(states: Array2<F>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != states.nrows() {
            return Err(Error::contract(format!(
                "encoder mask length {} does not match {} states",
                mask.len(),
                states.nrows()
            )));
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("encoder states contain non-finite entries"));
        }
        Ok(EncoderStates { states, mask })
    }

    pub fn states(&self) -> &Array2<F> {
        &self.states
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-token hidden vectors from the decoder.
#[derive(Debug, Clone)]
pub struct DecoderStates<F: Scalar> {
    states: Array2<F>,
    mask: Vec<bool>,
}

impl<F: Scalar> DecoderStates<F> {
    pub fn new(states: Array2<F>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != states.nrows() {
            return Err(Error::contract(format!(
                "decoder mask length {} does not match {} states",
                mask.len(),
                states.nrows()
            )));
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("decoder states contain non-finite entries"));
        }
        Ok(DecoderStates { states, mask })
    }

    pub fn states(&self) -> &Array2<F> {
        &self.states
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayerParams<F: Scalar> {
    ln1: LayerNormParams<F>,
    attn: AttentionParams<F>,
    ln2: LayerNormParams<F>,
    ffn: FeedForwardParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayerParams<F: Scalar> {
    ln1: LayerNormParams<F>,
    self_attn: AttentionParams<F>,
    ln2: LayerNormParams<F>,
    cross_attn: AttentionParams<F>,
    ln3: LayerNormParams<F>,
    ffn: FeedForwardParams<F>,
}

pub(crate) struct EncoderLayerNodes {
    ln1: LayerNormNodes,
    attn: AttentionNodes,
    ln2: LayerNormNodes,
    ffn: FeedForwardNodes,
}

pub(crate) struct DecoderLayerNodes {
    ln1: LayerNormNodes,
    self_attn: AttentionNodes,
    ln2: LayerNormNodes,
    cross_attn: AttentionNodes,
    ln3: LayerNormNodes,
    ffn: FeedForwardNodes,
}

/// Leaf ids of every backbone parameter in one graph.
pub(crate) struct BackboneNodes {
    pub tok_embed: NodeId,
    pub pos_embed: NodeId,
    enc: Vec<EncoderLayerNodes>,
    enc_norm: LayerNormNodes,
    dec: Vec<DecoderLayerNodes>,
    dec_norm: LayerNormNodes,
    pub lm: LinearNodes,
}

/// Pre-norm transformer encoder/decoder with tied position table for both
/// sides; see the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<F: Scalar> {
    config: BackboneConfig,
    tokenizer: WordTokenizer,
    tok_embed: Array2<F>,
    pos_embed: Array2<F>,
    enc_layers: Vec<EncoderLayerParams<F>>,
    enc_norm: LayerNormParams<F>,
    dec_layers: Vec<DecoderLayerParams<F>>,
    dec_norm: LayerNormParams<F>,
    lm: LinearParams<F>,
}

/// Build the desk-scale backbone with seeded deterministic weights and an
/// empty word vocabulary ([`Backbone::fit_tokenizer`] fills it).
pub fn build_tiny_backbone<F: Scalar>(config: &BackboneConfig) -> Result<Backbone<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.hidden_dim;
    let enc_layers = (0..config.layers)
        .map(|_| EncoderLayerParams {
            ln1: LayerNormParams::init(d),
            attn: AttentionParams::init(&mut rng, d),
            ln2: LayerNormParams::init(d),
            ffn: FeedForwardParams::init(&mut rng, d),
        })
        .collect();
    let dec_layers = (0..config.layers)
        .map(|_| DecoderLayerParams {
            ln1: LayerNormParams::init(d),
            self_attn: AttentionParams::init(&mut rng, d),
            ln2: LayerNormParams::init(d),
            cross_attn: AttentionParams::init(&mut rng, d),
            ln3: LayerNormParams::init(d),
            ffn: FeedForwardParams::init(&mut rng, d),
        })
        .collect();
    Ok(Backbone {
        tokenizer: WordTokenizer::from_words(Vec::new(), config.vocab_size),
        tok_embed: embedding_init(&mut rng, config.vocab_size, d),
        pos_embed: embedding_init(&mut rng, config.max_input_length, d),
        enc_layers,
        enc_norm: LayerNormParams::init(d),
        dec_layers,
        dec_norm: LayerNormParams::init(d),
        lm: LinearParams::init(&mut rng, d, config.vocab_size),
        config: config.clone(),
    })
}

impl<F: Scalar> Backbone<F> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn max_input_length(&self) -> usize {
        self.config.max_input_length
    }

    /// Fit the word vocabulary from raw texts. Must happen before training
    /// or context-vector initialization; refitting remaps word ids.
    pub fn fit_tokenizer<'a>(&mut self, texts: impl IntoIterator<Item = &'a str>) -> Result<()> {
        self.tokenizer = WordTokenizer::fit(texts, self.config.vocab_size)?;
        Ok(())
    }

    pub fn set_tokenizer(&mut self, tokenizer: WordTokenizer) -> Result<()> {
        if tokenizer.vocab_size() != self.config.vocab_size {
            return Err(Error::config(format!(
                "tokenizer capacity {} does not match backbone vocab size {}",
                tokenizer.vocab_size(),
                self.config.vocab_size
            )));
        }
        self.tokenizer = tokenizer;
        Ok(())
    }

    fn check_ids(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embedding lookup; rows are the embeddings of `tokens`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Array2<F>> {
        self.check_ids(tokens)?;
        let d = self.config.hidden_dim;
        let mut out = Array2::zeros((tokens.len(), d));
        for (i, &t) in tokens.iter().enumerate() {
            out.row_mut(i).assign(&self.tok_embed.row(t as usize));
        }
        Ok(out)
    }

    /// Encode an unpadded token sequence.
    pub fn encode(&self, tokens: &[u32]) -> Result<EncoderStates<F>> {
        self.encode_with_mask(tokens, &vec![true; tokens.len()])
    }

    /// Encode a possibly padded sequence; `mask[i] = false` marks padding
    /// that no real position may attend to.
    pub fn encode_with_mask(&self, tokens: &[u32], mask: &[bool]) -> Result<EncoderStates<F>> {
        if tokens.len() > self.config.max_input_length {
            return Err(Error::contract(format!(
                "input of {} tokens exceeds max_input_length {}; truncate the input before encoding",
                tokens.len(),
                self.config.max_input_length
            )));
        }
        if mask.len() != tokens.len() {
            return Err(Error::contract(format!(
                "mask length {} does not match {} tokens",
                mask.len(),
                tokens.len()
            )));
        }
        self.check_ids(tokens)?;
        let mut g = Graph::new();
        let mut reg = ParamReg::new();
        let nodes = self.bind(&mut g, &mut reg);
        let enc = self.build_encoder(&mut g, &nodes, tokens, mask);
        EncoderStates::new(g.value(enc).clone(), mask.to_vec())
    }

    /// Run the causal decoder over a bos-shifted target, cross-attending to
    /// `encoder_states`.
    pub fn decode(
        &self,
        encoder_states: &EncoderStates<F>,
        shifted_target: &[u32],
    ) -> Result<DecoderStates<F>> {
        if shifted_target.first() != Some(&BOS_ID) {
            return Err(Error::contract(
                "decoder input must begin with the bos token <s>",
            ));
        }
        if encoder_states.is_empty() {
            return Err(Error::contract("cannot decode against empty encoder states"));
        }
        if shifted_target.len() > self.config.max_input_length {
            return Err(Error::contract(format!(
                "decoder prefix of {} tokens exceeds the {} available positions",
                shifted_target.len(),
                self.config.max_input_length
            )));
        }
        self.check_ids(shifted_target)?;
        let mut g = Graph::new();
        let mut reg = ParamReg::new();
        let nodes = self.bind(&mut g, &mut reg);
        let enc = g.leaf(encoder_states.states().clone());
        let dec = self.build_decoder(&mut g, &nodes, enc, encoder_states.mask(), shifted_target);
        DecoderStates::new(g.value(dec).clone(), vec![true; shifted_target.len()])
    }

    /// Project decoder states to vocabulary logits (k x S).
    pub fn lm_head(&self, decoder_states: &DecoderStates<F>) -> Result<Array2<F>> {
        if decoder_states.is_empty() {
            return Ok(Array2::zeros((0, self.config.vocab_size)));
        }
        let mut g = Graph::new();
        let mut reg = ParamReg::new();
        let lm = self.lm.bind(&mut g, &mut reg, "lm");
        let x = g.leaf(decoder_states.states().clone());
        let logits = build_linear(&mut g, &lm, x);
        Ok(g.value(logits).clone())
    }

    pub(crate) fn bind(&self, g: &mut Graph<F>, reg: &mut ParamReg) -> BackboneNodes {
        BackboneNodes {
            tok_embed: reg.leaf(g, "tok_embed".into(), &self.tok_embed),
            pos_embed: reg.leaf(g, "pos_embed".into(), &self.pos_embed),
            enc: self
                .enc_layers
                .iter()
                .enumerate()
                .map(|(i, l)| EncoderLayerNodes {
                    ln1: l.ln1.bind(g, reg, &format!("enc.{i}.ln1")),
                    attn: l.attn.bind(g, reg, &format!("enc.{i}.attn")),
                    ln2: l.ln2.bind(g, reg, &format!("enc.{i}.ln2")),
                    ffn: l.ffn.bind(g, reg, &format!("enc.{i}.ffn")),
                })
                .collect(),
            enc_norm: self.enc_norm.bind(g, reg, "enc_norm"),
            dec: self
                .dec_layers
                .iter()
                .enumerate()
                .map(|(i, l)| DecoderLayerNodes {
                    ln1: l.ln1.bind(g, reg, &format!("dec.{i}.ln1")),
                    self_attn: l.self_attn.bind(g, reg, &format!("dec.{i}.self_attn")),
                    ln2: l.ln2.bind(g, reg, &format!("dec.{i}.ln2")),
                    cross_attn: l.cross_attn.bind(g, reg, &format!("dec.{i}.cross_attn")),
                    ln3: l.ln3.bind(g, reg, &format!("dec.{i}.ln3")),
                    ffn: l.ffn.bind(g, reg, &format!("dec.{i}.ffn")),
                })
                .collect(),
            dec_norm: self.dec_norm.bind(g, reg, "dec_norm"),
            lm: self.lm.bind(g, reg, "lm"),
        }
    }

    fn build_embedding(&self, g: &mut Graph<F>, nodes: &BackboneNodes, ids: &[u32]) -> NodeId {
        let tok = g.gather_rows(nodes.tok_embed, ids.iter().map(|&t| t as usize).collect());
        let pos = g.gather_rows(nodes.pos_embed, (0..ids.len()).collect());
        g.add(tok, pos)
    }

    pub(crate) fn build_encoder(
        &self,
        g: &mut Graph<F>,
        nodes: &BackboneNodes,
        tokens: &[u32],
        mask: &[bool],
    ) -> NodeId {
        let l = tokens.len();
        let mut x = self.build_embedding(g, nodes, tokens);
        let attn_mask = if mask.iter().all(|&m| m) {
            None
        } else {
            Some(Array2::from_shape_fn((l, l), |(_, j)| mask[j]))
        };
        for layer in &nodes.enc {
            let h = build_layer_norm(g, &layer.ln1, x);
            let a = build_attention(g, &layer.attn, h, h, self.config.heads, attn_mask.as_ref());
            x = g.add(x, a);
            let h2 = build_layer_norm(g, &layer.ln2, x);
            let f = build_feed_forward(g, &layer.ffn, h2);
            x = g.add(x, f);
        }
        build_layer_norm(g, &nodes.enc_norm, x)
    }

    pub(crate) fn build_decoder(
        &self,
        g: &mut Graph<F>,
        nodes: &BackboneNodes,
        encoder_out: NodeId,
        encoder_mask: &[bool],
        shifted_target: &[u32],
    ) -> NodeId {
        let k = shifted_target.len();
        let l = encoder_mask.len();
        let mut x = self.build_embedding(g, nodes, shifted_target);
        let causal = Array2::from_shape_fn((k, k), |(i, j)| j <= i);
        let cross_mask = if encoder_mask.iter().all(|&m| m) {
            None
        } else {
            Some(Array2::from_shape_fn((k, l), |(_, j)| encoder_mask[j]))
        };
        for layer in &nodes.dec {
            let h = build_layer_norm(g, &layer.ln1, x);
            let a = build_attention(
                g,
                &layer.self_attn,
                h,
                h,
                self.config.heads,
                Some(&causal),
            );
            x = g.add(x, a);
            let h2 = build_layer_norm(g, &layer.ln2, x);
            let c = build_attention(
                g,
                &layer.cross_attn,
                h2,
                encoder_out,
                self.config.heads,
                cross_mask.as_ref(),
            );
            x = g.add(x, c);
            let h3 = build_layer_norm(g, &layer.ln3, x);
            let f = build_feed_forward(g, &layer.ffn, h3);
            x = g.add(x, f);
        }
        build_layer_norm(g, &nodes.dec_norm, x)
    }

    pub(crate) fn build_lm(&self, g: &mut Graph<F>, nodes: &BackboneNodes, dec: NodeId) -> NodeId {
        build_linear(g, &nodes.lm, dec)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Array2<F>)) {
        f("tok_embed".into(), &self.tok_embed);
        f("pos_embed".into(), &self.pos_embed);
        for (i, l) in self.enc_layers.iter().enumerate() {
            l.ln1.visit(&format!("enc.{i}.ln1"), f);
            l.attn.visit(&format!("enc.{i}.attn"), f);
            l.ln2.visit(&format!("enc.{i}.ln2"), f);
            l.ffn.visit(&format!("enc.{i}.ffn"), f);
        }
        self.enc_norm.visit("enc_norm", f);
        for (i, l) in self.dec_layers.iter().enumerate() {
            l.ln1.visit(&format!("dec.{i}.ln1"), f);
            l.self_attn.visit(&format!("dec.{i}.self_attn"), f);
            l.ln2.visit(&format!("dec.{i}.ln2"), f);
            l.cross_attn.visit(&format!("dec.{i}.cross_attn"), f);
            l.ln3.visit(&format!("dec.{i}.ln3"), f);
            l.ffn.visit(&format!("dec.{i}.ffn"), f);
        }
        self.dec_norm.visit("dec_norm", f);
        self.lm.visit("lm", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<F>)) {
        f("tok_embed".into(), &mut self.tok_embed);
        f("pos_embed".into(), &mut self.pos_embed);
        for (i, l) in self.enc_layers.iter_mut().enumerate() {
            l.ln1.visit_mut(&format!("enc.{i}.ln1"), f);
            l.attn.visit_mut(&format!("enc.{i}.attn"), f);
            l.ln2.visit_mut(&format!("enc.{i}.ln2"), f);
            l.ffn.visit_mut(&format!("enc.{i}.ffn"), f);
        }
        self.enc_norm.visit_mut("enc_norm", f);
        for (i, l) in self.dec_layers.iter_mut().enumerate() {
            l.ln1.visit_mut(&format!("dec.{i}.ln1"), f);
            l.self_attn.visit_mut(&format!("dec.{i}.self_attn"), f);
            l.ln2.visit_mut(&format!("dec.{i}.ln2"), f);
            l.cross_attn.visit_mut(&format!("dec.{i}.cross_attn"), f);
            l.ln3.visit_mut(&format!("dec.{i}.ln3"), f);
            l.ffn.visit_mut(&format!("dec.{i}.ffn"), f);
        }
        self.dec_norm.visit_mut("dec_norm", f);
        self.lm.visit_mut("lm", f);
    }

    /// Total number of backbone parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, a| n += a.len());
        n
    }

    /// Write `manifest.json`, `weights.json`, and `tokenizer.json` into `dir`.
    pub fn save(&self, dir: &Path, id: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = CheckpointManifest {
            schema_version: SCHEMA_VERSION,
            id: id.to_string(),
            d: self.config.hidden_dim,
            layers: self.config.layers,
            heads: self.config.heads,
            vocab_size: self.config.vocab_size,
            pad_id: PAD_ID,
            bos_id: BOS_ID,
            eos_id: EOS_ID,
            unk_id: UNK_ID,
            max_input_length: self.config.max_input_length,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        let mut weights = WeightMap::new();
        self.visit_params(&mut |name, array| {
            weights.insert(name, entry_from(array));
        });
        write_json(&dir.join("weights.json"), &weights)?;
        write_json(&dir.join("tokenizer.json"), &self.tokenizer.to_file())?;
        Ok(())
    }
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub id: String,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub pad_id: u32,
    pub bos_id: u32,
    pub eos_id: u32,
    pub unk_id: u32,
    pub max_input_length: usize,
}

/// Load a backbone from a checkpoint directory, validating that the
/// manifest, weights, and tokenizer agree. Errors name the offending
/// component.
pub fn load_pretrained<F: Scalar>(dir: &Path) -> Result<Backbone<F>> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::checkpoint(format!(
            "manifest: schema version {} unsupported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if (manifest.pad_id, manifest.bos_id, manifest.eos_id, manifest.unk_id)
        != (PAD_ID, BOS_ID, EOS_ID, UNK_ID)
    {
        return Err(Error::checkpoint(
            "manifest: special token ids do not match the pad=0/bos=1/eos=2/unk=3 layout",
        ));
    }
    let config = BackboneConfig {
        hidden_dim: manifest.d,
        layers: manifest.layers,
        heads: manifest.heads,
        vocab_size: manifest.vocab_size,
        max_input_length: manifest.max_input_length,
        seed: 0,
    };
    config
        .validate()
        .map_err(|e| Error::checkpoint(format!("manifest: {e}")))?;

    let tokenizer = WordTokenizer::from_file(read_json(&dir.join("tokenizer.json"))?)?;
    if tokenizer.vocab_size() != manifest.vocab_size {
        return Err(Error::checkpoint(format!(
            "tokenizer: capacity {} does not match manifest vocab size {}",
            tokenizer.vocab_size(),
            manifest.vocab_size
        )));
    }

    let mut backbone = build_tiny_backbone::<F>(&config)?;
    backbone.set_tokenizer(tokenizer)?;

    let mut weights: WeightMap = read_json(&dir.join("weights.json"))?;
    let mut missing = Vec::new();
    let mut failure: Option<Error> = None;
    backbone.visit_params_mut(&mut |name, array| {
        if failure.is_some() {
            return;
        }
        match weights.remove(&name) {
            Some(entry) => {
                if let Err(e) = assign_entry(array, &entry, &name) {
                    failure = Some(e);
                }
            }
            None => missing.push(name),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::checkpoint(format!(
            "weights: missing parameters [{}]",
            missing.join(", ")
        )));
    }
    if !weights.is_empty() {
        let extras: Vec<String> = weights.keys().cloned().collect();
        return Err(Error::checkpoint(format!(
            "weights: unexpected parameters [{}]",
            extras.join(", ")
        )));
    }
    Ok(backbone)
}
