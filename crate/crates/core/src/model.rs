//! The multi-task model: per-term attention pooling over encoder and
//! decoder states, concat fusion, a two-layer classifier over 4 attitudes,
//! and the joint forward pass that shares one encoder run between the
//! summarization and classification paths.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneNodes, DecoderStates, EncoderStates};
use crate::checkpoint::{assign_entry, entry_from, read_json, write_json, WeightMap};
use crate::corpus::{Attitude, TermVocabulary, NUM_ATTITUDES, NUM_TERMS};
use crate::error::{Error, Result};
use crate::graph::{softmax_rows_masked, Graph, NodeId};
use crate::nn::{build_linear, LinearNodes, LinearParams, ParamReg};
use crate::scalar::Scalar;
use crate::tokenizer::BOS_ID;

/// Which license representation feeds the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Encoder-side and decoder-side pooled vectors concatenated (width 2d).
    Concat,
    /// Encoder-side pooled vector only (width d).
    Encoder,
    /// Decoder-side pooled vector only (width d).
    Decoder,
}

impl AblationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Concat => "concat",
            AblationMode::Encoder => "encoder",
            AblationMode::Decoder => "decoder",
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Head hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Classifier hidden width d'; defaults to the backbone hidden width.
    pub d_prime: Option<usize>,
    pub dropout_rate: f64,
    pub ablation: AblationMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            d_prime: None,
            dropout_rate: 0.1,
            ablation: AblationMode::Concat,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} must be in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.d_prime == Some(0) {
            return Err(Error::config("d_prime must be positive"));
        }
        Ok(())
    }
}

/// Learnable per-term context vectors driving term attention, one row per
/// license term for each side.
#[derive(Debug, Clone, PartialEq)]
pub struct TermContextVectors<F: Scalar> {
    pub u_enc: Array2<F>,
    pub u_dec: Array2<F>,
}

/// Initialize the context vectors from term semantics: each term phrase is
/// encoded, and u^E is the mean of its encoder states; u^D is the mean of
/// the decoder states when the phrase is teacher-forced through the
/// decoder conditioned on its own encoding.
pub fn init_term_context_vectors<F: Scalar>(
    backbone: &Backbone<F>,
    term_vocab: &TermVocabulary,
) -> Result<TermContextVectors<F>> {
    let d = backbone.hidden_dim();
    let mut u_enc = Array2::zeros((term_vocab.len(), d));
    let mut u_dec = Array2::zeros((term_vocab.len(), d));
    for (t, name) in term_vocab.terms().iter().enumerate() {
        let ids = backbone.tokenizer().encode(name);
        if ids.is_empty() {
            return Err(Error::contract(format!(
                "term '{name}' tokenizes to an empty sequence"
            )));
        }
        let enc = backbone.encode(&ids)?;
        u_enc.row_mut(t).assign(&enc.states().mean_axis(Axis(0)).unwrap());

        let mut shifted = vec![BOS_ID];
        shifted.extend_from_slice(&ids);
        let dec = backbone.decode(&enc, &shifted)?;
        u_dec.row_mut(t).assign(&dec.states().mean_axis(Axis(0)).unwrap());
    }
    Ok(TermContextVectors { u_enc, u_dec })
}

/// Term-attention pooling: softmax of `states . context` over unmasked
/// positions (max-subtracted), then the weighted average of the states.
/// Returns the full-length weight vector (zeros at masked positions) and
/// the pooled vector.
pub fn term_attention<F: Scalar>(
    states: &Array2<F>,
    mask: &[bool],
    context: ArrayView1<'_, F>,
) -> Result<(Array1<F>, Array1<F>)> {
    let (l, d) = states.dim();
    if mask.len() != l {
        return Err(Error::contract(format!(
            "mask length {} does not match {l} states",
            mask.len()
        )));
    }
    if context.len() != d {
        return Err(Error::contract(format!(
            "context width {} does not match state width {d}",
            context.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::contract("all positions are masked in term attention"));
    }
    let scores = Array2::from_shape_fn((1, l), |(_, i)| states.row(i).dot(&context));
    let mask_row = Array2::from_shape_fn((1, l), |(_, i)| mask[i]);
    let weights_row = softmax_rows_masked(&scores, Some(&mask_row));
    let weights = weights_row.row(0).to_owned();
    let mut pooled = Array1::zeros(d);
    for i in 0..l {
        if weights[i] != F::zero() {
            pooled.scaled_add(weights[i], &states.row(i));
        }
    }
    Ok((weights, pooled))
}

/// Concatenate encoder-side and decoder-side term vectors, encoder first.
pub fn fuse<F: Scalar>(enc_vec: ArrayView1<'_, F>, dec_vec: ArrayView1<'_, F>) -> Result<Array1<F>> {
    if enc_vec.len() != dec_vec.len() {
        return Err(Error::contract(format!(
            "fuse width mismatch: encoder side {} vs decoder side {}",
            enc_vec.len(),
            dec_vec.len()
        )));
    }
    let mut out = Array1::zeros(enc_vec.len() * 2);
    out.slice_mut(ndarray::s![..enc_vec.len()]).assign(&enc_vec);
    out.slice_mut(ndarray::s![enc_vec.len()..]).assign(&dec_vec);
    Ok(out)
}

/// Output of one joint forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput<F: Scalar> {
    /// Vocabulary logits for the summary, k x S.
    pub summary_logits: Array2<F>,
    /// 23 x 4 attitude logits.
    pub term_logits: Array2<F>,
    /// Per-term attention over encoder positions (23 x l), when that side
    /// participates in the classifier input.
    pub encoder_attention: Option<Array2<F>>,
    /// Per-term attention over decoder positions (23 x k).
    pub decoder_attention: Option<Array2<F>>,
}

pub(crate) struct HeadNodes {
    pub u_enc: NodeId,
    pub u_dec: NodeId,
    pub lin1: LinearNodes,
    pub lin2: LinearNodes,
}

pub(crate) struct TermLogitsBuild {
    pub logits: NodeId,
    pub encoder_attention: Option<NodeId>,
    pub decoder_attention: Option<NodeId>,
}

/// The classification head: context vectors plus the two-layer classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskHead<F: Scalar> {
    term_vocab: TermVocabulary,
    ctx: TermContextVectors<F>,
    lin1: LinearParams<F>,
    lin2: LinearParams<F>,
    dropout_rate: f64,
    ablation: AblationMode,
}

impl<F: Scalar> MultiTaskHead<F> {
    /// Build a head for `backbone`, initializing context vectors from term
    /// semantics and classifier weights from `rng`.
    pub fn new(backbone: &Backbone<F>, config: &HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let term_vocab = TermVocabulary::default();
        let ctx = init_term_context_vectors(backbone, &term_vocab)?;
        let d = backbone.hidden_dim();
        let d_prime = config.d_prime.unwrap_or(d);
        let fused_width = match config.ablation {
            AblationMode::Concat => 2 * d,
            AblationMode::Encoder | AblationMode::Decoder => d,
        };
        Ok(MultiTaskHead {
            term_vocab,
            ctx,
            lin1: LinearParams::init(rng, fused_width, d_prime),
            lin2: LinearParams::init(rng, d_prime, NUM_ATTITUDES),
            dropout_rate: config.dropout_rate,
            ablation: config.ablation,
        })
    }

    pub fn term_vocab(&self) -> &TermVocabulary {
        &self.term_vocab
    }

    pub fn ablation(&self) -> AblationMode {
        self.ablation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn context_vectors(&self) -> &TermContextVectors<F> {
        &self.ctx
    }

    /// Width of the classifier input under the configured ablation mode.
    pub fn classifier_input_width(&self) -> usize {
        self.lin1.w.nrows()
    }

    pub fn d_prime(&self) -> usize {
        self.lin1.w.ncols()
    }

    /// Parameters this head adds on top of the backbone.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, a| n += a.len());
        n
    }

    /// Classifier MLP on one fused vector: ReLU(W1 x + b1), dropout in
    /// training mode, then W2 (.) + b2.
    pub fn classify_term(
        &self,
        fused: ArrayView1<'_, F>,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array1<F>> {
        if fused.len() != self.lin1.w.nrows() {
            return Err(Error::contract(format!(
                "classifier input width {} does not match expected {}",
                fused.len(),
                self.lin1.w.nrows()
            )));
        }
        let mut hidden: Array1<F> = fused.dot(&self.lin1.w) + &self.lin1.b.row(0);
        hidden.mapv_inplace(|x| if x > F::zero() { x } else { F::zero() });
        if training && self.dropout_rate > 0.0 {
            let rng = rng.ok_or_else(|| {
                Error::contract("training-mode dropout requires an rng")
            })?;
            let keep = F::cast(1.0 / (1.0 - self.dropout_rate));
            hidden.mapv_inplace(|x| {
                if rng.random::<f64>() < self.dropout_rate {
                    F::zero()
                } else {
                    x * keep
                }
            });
        }
        Ok(hidden.dot(&self.lin2.w) + &self.lin2.b.row(0))
    }

    pub(crate) fn bind(&self, g: &mut Graph<F>, reg: &mut ParamReg) -> HeadNodes {
        HeadNodes {
            u_enc: reg.leaf(g, "head.u_enc".into(), &self.ctx.u_enc),
            u_dec: reg.leaf(g, "head.u_dec".into(), &self.ctx.u_dec),
            lin1: self.lin1.bind(g, reg, "head.classifier.lin1"),
            lin2: self.lin2.bind(g, reg, "head.classifier.lin2"),
        }
    }

    /// Attention-pool states per term and classify. `enc`/`dec` are graph
    /// nodes of the encoder and decoder state matrices.
    pub(crate) fn build_term_logits(
        &self,
        g: &mut Graph<F>,
        nodes: &HeadNodes,
        enc: NodeId,
        enc_mask: &[bool],
        dec: NodeId,
        dec_mask: &[bool],
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TermLogitsBuild> {
        let use_enc = matches!(self.ablation, AblationMode::Concat | AblationMode::Encoder);
        let use_dec = matches!(self.ablation, AblationMode::Concat | AblationMode::Decoder);

        let pool = |g: &mut Graph<F>, u: NodeId, states: NodeId, mask: &[bool]| -> Result<(NodeId, NodeId)> {
            if !mask.iter().any(|&m| m) {
                return Err(Error::contract("all positions are masked in term attention"));
            }
            let states_t = g.transpose(states);
            let scores = g.matmul(u, states_t);
            let attn_mask = if mask.iter().all(|&m| m) {
                None
            } else {
                Some(Array2::from_shape_fn((NUM_TERMS, mask.len()), |(_, j)| mask[j]))
            };
            let weights = g.softmax_rows(scores, attn_mask);
            let pooled = g.matmul(weights, states);
            Ok((weights, pooled))
        };

        let enc_side = if use_enc {
            Some(pool(g, nodes.u_enc, enc, enc_mask)?)
        } else {
            None
        };
        let dec_side = if use_dec {
            Some(pool(g, nodes.u_dec, dec, dec_mask)?)
        } else {
            None
        };

        let fused = match (&enc_side, &dec_side) {
            (Some((_, e)), Some((_, d))) => g.concat_cols(*e, *d),
            (Some((_, e)), None) => *e,
            (None, Some((_, d))) => *d,
            (None, None) => unreachable!("one side always participates"),
        };

        let h1 = build_linear(g, &nodes.lin1, fused);
        let act = g.relu(h1);
        let dropped = if training && self.dropout_rate > 0.0 {
            let rng = rng.ok_or_else(|| Error::contract("training-mode dropout requires an rng"))?;
            let keep_scale = F::cast(1.0 / (1.0 - self.dropout_rate));
            let keep = Array2::from_shape_fn(g.value(act).dim(), |_| {
                if rng.random::<f64>() < self.dropout_rate {
                    F::zero()
                } else {
                    keep_scale
                }
            });
            g.dropout(act, keep)
        } else {
            act
        };
        let logits = build_linear(g, &nodes.lin2, dropped);

        Ok(TermLogitsBuild {
            logits,
            encoder_attention: enc_side.map(|(w, _)| w),
            decoder_attention: dec_side.map(|(w, _)| w),
        })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Array2<F>)) {
        f("head.u_enc".into(), &self.ctx.u_enc);
        f("head.u_dec".into(), &self.ctx.u_dec);
        self.lin1.visit("head.classifier.lin1", f);
        self.lin2.visit("head.classifier.lin2", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<F>)) {
        f("head.u_enc".into(), &mut self.ctx.u_enc);
        f("head.u_dec".into(), &mut self.ctx.u_dec);
        self.lin1.visit_mut("head.classifier.lin1", f);
        self.lin2.visit_mut("head.classifier.lin2", f);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut weights = WeightMap::new();
        self.visit_params(&mut |name, array| {
            weights.insert(name, entry_from(array));
        });
        let file = HeadFile {
            schema_version: crate::backbone::SCHEMA_VERSION,
            d_prime: self.d_prime(),
            dropout_rate: self.dropout_rate,
            ablation: self.ablation,
            term_order: self.term_vocab.terms().to_vec(),
            attitude_order: Attitude::ALL.iter().map(|a| a.as_str().to_string()).collect(),
            weights,
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path, backbone_dim: usize) -> Result<Self> {
        let file: HeadFile = read_json(path)?;
        if file.schema_version != crate::backbone::SCHEMA_VERSION {
            return Err(Error::checkpoint(format!(
                "head: schema version {} unsupported",
                file.schema_version
            )));
        }
        let vocab = TermVocabulary::default();
        if file.term_order != vocab.terms() {
            return Err(Error::checkpoint("head: term vocabulary order mismatch"));
        }
        let expected: Vec<String> = Attitude::ALL.iter().map(|a| a.as_str().to_string()).collect();
        if file.attitude_order != expected {
            return Err(Error::checkpoint("head: attitude order mismatch"));
        }
        let d = backbone_dim;
        let fused_width = match file.ablation {
            AblationMode::Concat => 2 * d,
            _ => d,
        };
        let mut head = MultiTaskHead {
            term_vocab: vocab,
            ctx: TermContextVectors {
                u_enc: Array2::zeros((NUM_TERMS, d)),
                u_dec: Array2::zeros((NUM_TERMS, d)),
            },
            lin1: LinearParams {
                w: Array2::zeros((fused_width, file.d_prime)),
                b: Array2::zeros((1, file.d_prime)),
            },
            lin2: LinearParams {
                w: Array2::zeros((file.d_prime, NUM_ATTITUDES)),
                b: Array2::zeros((1, NUM_ATTITUDES)),
            },
            dropout_rate: file.dropout_rate,
            ablation: file.ablation,
        };
        let mut weights = file.weights;
        let mut missing = Vec::new();
        let mut failure: Option<Error> = None;
        head.visit_params_mut(&mut |name, array| {
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
                "head: missing parameters [{}]",
                missing.join(", ")
            )));
        }
        Ok(head)
    }
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    schema_version: u32,
    d_prime: usize,
    dropout_rate: f64,
    ablation: AblationMode,
    term_order: Vec<String>,
    attitude_order: Vec<String>,
    weights: WeightMap,
}

/// Backbone plus multi-task head; the unit that trains, infers, and
/// checkpoints together.
#[derive(Debug, Clone, PartialEq)]
pub struct LiSumModel<F: Scalar> {
    pub backbone: Backbone<F>,
    pub head: MultiTaskHead<F>,
    pub id: String,
}

pub(crate) struct ModelNodes {
    pub backbone: BackboneNodes,
    pub head: HeadNodes,
}

impl<F: Scalar> LiSumModel<F> {
    pub fn new(backbone: Backbone<F>, head: MultiTaskHead<F>) -> Self {
        LiSumModel { backbone, head, id: "unsaved".to_string() }
    }

    /// Convenience constructor: tiny backbone, tokenizer fitted on `texts`
    /// plus the term names, semantically initialized head.
    pub fn build(
        backbone_config: &crate::backbone::BackboneConfig,
        head_config: &HeadConfig,
        texts: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let mut backbone = crate::backbone::build_tiny_backbone(backbone_config)?;
        let mut fit_texts: Vec<String> = texts.into_iter().collect();
        fit_texts.extend(TermVocabulary::default().terms().iter().cloned());
        backbone.fit_tokenizer(fit_texts.iter().map(|s| s.as_str()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(backbone_config.seed ^ 0x9e37_79b9);
        let head = MultiTaskHead::new(&backbone, head_config, &mut rng)?;
        Ok(LiSumModel::new(backbone, head))
    }

    pub(crate) fn bind(&self, g: &mut Graph<F>, reg: &mut ParamReg) -> ModelNodes {
        ModelNodes {
            backbone: self.backbone.bind(g, reg),
            head: self.head.bind(g, reg),
        }
    }

    /// Joint forward pass: one encoder run feeds both the LM head (through
    /// the decoder) and the term classifier.
    pub fn forward(
        &self,
        document_tokens: &[u32],
        shifted_summary: &[u32],
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelOutput<F>> {
        let mut g = Graph::new();
        let mut reg = ParamReg::new();
        let nodes = self.bind(&mut g, &mut reg);
        let doc_mask = vec![true; document_tokens.len()];
        self.check_forward_preconditions(document_tokens, shifted_summary)?;
        let enc = self.backbone.build_encoder(&mut g, &nodes.backbone, document_tokens, &doc_mask);
        let dec = self.backbone.build_decoder(
            &mut g,
            &nodes.backbone,
            enc,
            &doc_mask,
            shifted_summary,
        );
        let summary_logits = self.backbone.build_lm(&mut g, &nodes.backbone, dec);
        let dec_mask = vec![true; shifted_summary.len()];
        let build = self.head.build_term_logits(
            &mut g,
            &nodes.head,
            enc,
            &doc_mask,
            dec,
            &dec_mask,
            training,
            rng,
        )?;
        self.assemble_output(&g, summary_logits, build)
    }

    fn check_forward_preconditions(&self, doc: &[u32], shifted: &[u32]) -> Result<()> {
        if doc.is_empty() {
            return Err(Error::contract("document token sequence is empty"));
        }
        if doc.len() > self.backbone.max_input_length() {
            return Err(Error::contract(format!(
                "document of {} tokens exceeds max_input_length {}; truncate the input before the forward pass",
                doc.len(),
                self.backbone.max_input_length()
            )));
        }
        if shifted.first() != Some(&BOS_ID) {
            return Err(Error::contract("shifted summary must begin with the bos token <s>"));
        }
        if shifted.len() > self.backbone.max_input_length() {
            return Err(Error::contract(format!(
                "shifted summary of {} tokens exceeds the {} available positions",
                shifted.len(),
                self.backbone.max_input_length()
            )));
        }
        Ok(())
    }

    fn assemble_output(
        &self,
        g: &Graph<F>,
        summary_logits: NodeId,
        build: TermLogitsBuild,
    ) -> Result<ModelOutput<F>> {
        let term_logits = g.value(build.logits).clone();
        if term_logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("term logits contain non-finite entries"));
        }
        let encoder_attention = build.encoder_attention.map(|id| g.value(id).clone());
        let decoder_attention = build.decoder_attention.map(|id| g.value(id).clone());
        for attn in [&encoder_attention, &decoder_attention].into_iter().flatten() {
            for row in attn.rows() {
                let sum = row.iter().fold(F::zero(), |a, &w| a + w);
                if (sum - F::one()).abs() > F::cast(1e-6) {
                    return Err(Error::contract("attention row does not sum to 1"));
                }
            }
        }
        Ok(ModelOutput {
            summary_logits: g.value(summary_logits).clone(),
            term_logits,
            encoder_attention,
            decoder_attention,
        })
    }

    /// Eval-mode term logits from precomputed states (used at inference,
    /// where decoder states come from the generated hypothesis).
    pub fn term_logits_from_states(
        &self,
        encoder_states: &EncoderStates<F>,
        decoder_states: &DecoderStates<F>,
    ) -> Result<Array2<F>> {
        let mut g = Graph::new();
        let mut reg = ParamReg::new();
        let head_nodes = self.head.bind(&mut g, &mut reg);
        let enc = g.leaf(encoder_states.states().clone());
        let dec = g.leaf(decoder_states.states().clone());
        let build = self.head.build_term_logits(
            &mut g,
            &head_nodes,
            enc,
            encoder_states.mask(),
            dec,
            decoder_states.mask(),
            false,
            None,
        )?;
        Ok(g.value(build.logits).clone())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Array2<F>)) {
        self.backbone.visit_params(f);
        self.head.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<F>)) {
        self.backbone.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.head.param_count()
    }

    /// Write the full checkpoint directory (backbone files plus head.json).
    pub fn save(&self, dir: &Path) -> Result<()> {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".to_string());
        self.backbone.save(dir, &id)?;
        self.head.save(&dir.join("head.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let backbone = crate::backbone::load_pretrained::<F>(dir)?;
        let head = MultiTaskHead::load(&dir.join("head.json"), backbone.hidden_dim())?;
        let manifest: crate::backbone::CheckpointManifest =
            read_json(&dir.join("manifest.json"))?;
        Ok(LiSumModel { backbone, head, id: manifest.id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_tiny_backbone, BackboneConfig};
    use ndarray::array;

    fn tiny_model() -> LiSumModel<f64> {
        let config = BackboneConfig {
            hidden_dim: 8,
            layers: 1,
            heads: 2,
            vocab_size: 64,
            max_input_length: 16,
            seed: 7,
        };
        LiSumModel::build(
            &config,
            &HeadConfig { dropout_rate: 0.0, ..Default::default() },
            ["you may distribute and modify this software freely".to_string()],
        )
        .unwrap()
    }

    #[test]
    fn context_vectors_are_mean_pooled_term_states() {
        let m = tiny_model();
        let vocab = TermVocabulary::default();

        // single-token term: u^E equals that token's sole encoder state
        let t = vocab.index_of("Distribute").unwrap();
        let ids = m.backbone.tokenizer().encode("Distribute");
        assert_eq!(ids.len(), 1);
        let enc = m.backbone.encode(&ids).unwrap();
        for j in 0..8 {
            assert!((m.head.ctx.u_enc[(t, j)] - enc.states()[(0, j)]).abs() < 1e-12);
        }

        // two-token term: u^E is the arithmetic mean of the two rows
        let t = vocab.index_of("Commercial Use").unwrap();
        let ids = m.backbone.tokenizer().encode("Commercial Use");
        assert_eq!(ids.len(), 2);
        let enc = m.backbone.encode(&ids).unwrap();
        for j in 0..8 {
            let mean = (enc.states()[(0, j)] + enc.states()[(1, j)]) / 2.0;
            assert!((m.head.ctx.u_enc[(t, j)] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn context_vector_init_is_deterministic() {
        let a = tiny_model();
        let b = tiny_model();
        assert_eq!(a.head.ctx, b.head.ctx);
    }

    #[test]
    fn term_attention_uniform_singleton_and_hand_case() {
        // zero context: all dot products equal, weights uniform
        let states: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let ctx = array![0.0, 0.0];
        let (w, _) = term_attention(&states, &[true; 3], ctx.view()).unwrap();
        for i in 0..3 {
            assert!((w[i] - 1.0 / 3.0).abs() < 1e-12);
        }

        // single unmasked position takes all the weight
        let (w, pooled) = term_attention(&states, &[false, true, false], ctx.view()).unwrap();
        assert_eq!(w.to_vec(), vec![0.0, 1.0, 0.0]);
        assert_eq!(pooled.to_vec(), vec![0.0, 1.0]);

        // dots [0, ln 2] over states [[1,0],[0,1]] give weights [1/3, 2/3]
        let states = array![[1.0, 0.0], [0.0, 1.0]];
        let ctx = array![0.0, 2.0_f64.ln()];
        let (w, pooled) = term_attention(&states, &[true, true], ctx.view()).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((pooled[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((pooled[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn term_attention_rejects_fully_masked() {
        let states = array![[1.0, 0.0]];
        let ctx = array![1.0, 1.0];
        assert!(term_attention(&states, &[false], ctx.view()).is_err());
    }

    #[test]
    fn fuse_concatenates_and_slices_back() {
        let a = array![1.0, 2.0];
        let b = array![3.0, 4.0];
        let f = fuse(a.view(), b.view()).unwrap();
        assert_eq!(f.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

        let zeros = array![0.0, 0.0];
        let f2 = fuse(a.view(), zeros.view()).unwrap();
        assert_eq!(f2.to_vec(), vec![1.0, 2.0, 0.0, 0.0]);

        assert_eq!(f.slice(ndarray::s![..2]).to_vec(), a.to_vec());
        assert_eq!(f.slice(ndarray::s![2..]).to_vec(), b.to_vec());

        let wide = array![1.0, 2.0, 3.0];
        assert!(fuse(a.view(), wide.view()).is_err());
    }

    #[test]
    fn classify_term_zero_input_yields_bias() {
        let mut m = tiny_model();
        m.head.lin2.b = array![[0.5, -0.25, 0.0, 1.0]];
        let fused = Array1::zeros(m.head.classifier_input_width());
        let logits = m.head.classify_term(fused.view(), false, None).unwrap();
        assert_eq!(logits.to_vec(), vec![0.5, -0.25, 0.0, 1.0]);
    }

    #[test]
    fn classify_term_relu_zeroes_negative_preactivations() {
        let mut m = tiny_model();
        // 2-wide hidden: first unit strongly negative, second positive
        let width = m.head.classifier_input_width();
        m.head.lin1 = LinearParams {
            w: Array2::from_shape_fn((width, 2), |(i, j)| {
                if i == 0 {
                    if j == 0 { -1.0 } else { 2.0 }
                } else {
                    0.0
                }
            }),
            b: Array2::zeros((1, 2)),
        };
        m.head.lin2 = LinearParams {
            w: array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]],
            b: Array2::zeros((1, 4)),
        };
        let mut fused = Array1::zeros(width);
        fused[0] = 1.0; // pre-activations [-1, 2] -> hidden [0, 2]
        let logits = m.head.classify_term(fused.view(), false, None).unwrap();
        assert_eq!(logits.to_vec(), vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_dropout_training_equals_eval() {
        let m = tiny_model();
        assert_eq!(m.head.dropout_rate(), 0.0);
        let fused = Array1::from_elem(m.head.classifier_input_width(), 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = m.head.classify_term(fused.view(), true, Some(&mut rng)).unwrap();
        let eval = m.head.classify_term(fused.view(), false, None).unwrap();
        assert_eq!(train.to_vec(), eval.to_vec());
    }

    #[test]
    fn forward_shapes_and_attention_rows() {
        let config = BackboneConfig::default();
        let m = LiSumModel::<f64>::build(
            &config,
            &HeadConfig { dropout_rate: 0.0, ..Default::default() },
            ["one two three four five six seven eight nine ten".to_string()],
        )
        .unwrap();
        let doc = m.backbone.tokenizer().encode("one two three four five six seven eight nine ten");
        assert_eq!(doc.len(), 10);
        let shifted = vec![BOS_ID, 4, 5, 6, 7];
        let out = m.forward(&doc, &shifted, false, None).unwrap();
        assert_eq!(out.summary_logits.dim(), (5, 512));
        assert_eq!(out.term_logits.dim(), (23, 4));
        let enc_attn = out.encoder_attention.unwrap();
        assert_eq!(enc_attn.dim(), (23, 10));
        for row in enc_attn.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
        let dec_attn = out.decoder_attention.unwrap();
        assert_eq!(dec_attn.dim(), (23, 5));
    }

    #[test]
    fn forward_matches_free_function_ops() {
        // the graph path and the standalone term_attention/classify_term
        // ops must agree in eval mode
        let m = tiny_model();
        let doc = m.backbone.tokenizer().encode("you may distribute this software");
        let shifted = vec![BOS_ID, 4, 5];
        let out = m.forward(&doc, &shifted, false, None).unwrap();

        let enc = m.backbone.encode(&doc).unwrap();
        let dec = m.backbone.decode(&enc, &shifted).unwrap();
        for t in 0..NUM_TERMS {
            let (_, pe) =
                term_attention(enc.states(), enc.mask(), m.head.ctx.u_enc.row(t)).unwrap();
            let (_, pd) =
                term_attention(dec.states(), dec.mask(), m.head.ctx.u_dec.row(t)).unwrap();
            let fused = fuse(pe.view(), pd.view()).unwrap();
            let logits = m.head.classify_term(fused.view(), false, None).unwrap();
            for c in 0..NUM_ATTITUDES {
                assert!(
                    (logits[c] - out.term_logits[(t, c)]).abs() < 1e-9,
                    "term {t} class {c}"
                );
            }
        }
    }

    #[test]
    fn encoder_ablation_equals_encoder_side_of_full_forward() {
        let m = tiny_model();
        let doc = m.backbone.tokenizer().encode("you may distribute this software");
        let shifted = vec![BOS_ID, 4, 5];

        // encoder-mode head sharing the same context vectors
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut enc_head = MultiTaskHead::new(
            &m.backbone,
            &HeadConfig {
                ablation: AblationMode::Encoder,
                dropout_rate: 0.0,
                d_prime: None,
            },
            &mut rng,
        )
        .unwrap();
        enc_head.ctx = m.head.ctx.clone();
        assert_eq!(enc_head.classifier_input_width(), m.backbone.hidden_dim());

        let enc_model = LiSumModel::new(m.backbone.clone(), enc_head);
        let out = enc_model.forward(&doc, &shifted, false, None).unwrap();
        assert!(out.decoder_attention.is_none());

        // expected: full forward's encoder-side pooled vectors through the
        // width-d classifier
        let enc = m.backbone.encode(&doc).unwrap();
        for t in 0..NUM_TERMS {
            let (_, pooled) =
                term_attention(enc.states(), enc.mask(), m.head.ctx.u_enc.row(t)).unwrap();
            let logits = enc_model.head.classify_term(pooled.view(), false, None).unwrap();
            for c in 0..NUM_ATTITUDES {
                assert!((logits[c] - out.term_logits[(t, c)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn head_parameter_count_matches_formula() {
        let m = tiny_model();
        let d = m.backbone.hidden_dim();
        let dp = m.head.d_prime();
        let expected = 23 * 2 * d + dp * 2 * d + dp + 4 * dp + 4;
        assert_eq!(m.head.param_count(), expected);
    }

    #[test]
    fn attention_pooled_vector_stays_in_state_hull() {
        let m = tiny_model();
        let doc = m.backbone.tokenizer().encode("you may distribute and modify this software");
        let enc = m.backbone.encode(&doc).unwrap();
        for t in 0..NUM_TERMS {
            let (_, pooled) =
                term_attention(enc.states(), enc.mask(), m.head.ctx.u_enc.row(t)).unwrap();
            for j in 0..enc.states().ncols() {
                let col: Vec<f64> = (0..enc.states().nrows()).map(|i| enc.states()[(i, j)]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(pooled[j] >= lo - 1e-9 && pooled[j] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let m = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        m.save(&path).unwrap();
        let loaded = LiSumModel::<f64>::load(&path).unwrap();
        assert_eq!(loaded.id, "ckpt");
        assert_eq!(m.head, loaded.head);

        let doc = m.backbone.tokenizer().encode("you may distribute");
        let shifted = vec![BOS_ID, 4];
        let a = m.forward(&doc, &shifted, false, None).unwrap();
        let b = loaded.forward(&doc, &shifted, false, None).unwrap();
        for (x, y) in a.term_logits.iter().zip(b.term_logits.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
