//! Task heads over the shared sentence encoder: the three warrant-selection
//! variants and the inference head used for pretraining, plus the full-model
//! checkpoint container.
//!
//! All three warrant heads share the same first stage — an argument feature
//! layer and a warrant feature layer — and differ in how candidate scores are
//! produced: the shared scorer applies one weight vector to both slots
//! (making the model equivariant under swapping the candidates), while the
//! per-slot scorer learns a separate row per slot and can therefore absorb
//! positional artifacts of the data.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{Graph, Mode, NodeId};
use crate::corpus::{ArctInstance, NliInstance, Vocab};
use crate::encoder::{
    container_bytes, encode_steps, parse_container, take_f64s, DirectionNodes, EncoderNodes,
    EncoderParams,
};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Which warrant-selection variant a model implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Claim and reason feed the argument layer; shared scorer.
    Comp,
    /// Claim and reason feed the argument layer; per-slot scorer.
    Corr,
    /// Reason only feeds the argument layer (the claim is never encoded);
    /// shared scorer.
    CompRw,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Comp => "comp",
            ModelKind::Corr => "corr",
            ModelKind::CompRw => "comp-rw",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ModelKind> {
        match s {
            "comp" => Ok(ModelKind::Comp),
            "corr" => Ok(ModelKind::Corr),
            "comp-rw" => Ok(ModelKind::CompRw),
            other => Err(Error::Parameter(format!(
                "unknown model kind {other:?} (expected comp, corr, or comp-rw)"
            ))),
        }
    }
}

impl ModelKind {
    /// Width of the argument layer input: the encoded claim/reason pair, or
    /// the encoded reason alone.
    fn arg_input_dim(self, d: usize) -> usize {
        match self {
            ModelKind::CompRw => 2 * d,
            _ => 4 * d,
        }
    }
}

/// The candidate scoring stage.
#[derive(Clone, Debug, PartialEq)]
pub enum Scorer {
    /// One weight vector of length 2h applied to [a; w''] for each slot in
    /// turn, plus a scalar bias. Slot-symmetric by construction.
    Shared { weight: Tensor, bias: Tensor },
    /// A [2, 3h] matrix applied to [a; w0''; w1''] jointly, plus a bias per
    /// slot. Each output row can specialize to its slot.
    PerSlot { weight: Tensor, bias: Tensor },
}

impl Scorer {
    fn param_count(&self) -> usize {
        match self {
            Scorer::Shared { weight, bias } | Scorer::PerSlot { weight, bias } => {
                weight.numel() + bias.numel()
            }
        }
    }
}

/// Head weights shared by all three warrant-selection variants.
#[derive(Clone, Debug, PartialEq)]
pub struct WarrantHead {
    /// [h, 4d] (claim+reason variants) or [h, 2d] (reason-only variant).
    pub arg_weight: Tensor,
    pub arg_bias: Tensor,
    /// [h, 2d], shared between the two warrant slots.
    pub warrant_weight: Tensor,
    pub warrant_bias: Tensor,
    pub scorer: Scorer,
}

impl WarrantHead {
    pub fn param_count(&self) -> usize {
        self.arg_weight.numel()
            + self.arg_bias.numel()
            + self.warrant_weight.numel()
            + self.warrant_bias.numel()
            + self.scorer.param_count()
    }
}

/// A complete warrant-selection model: embeddings, encoder, and head, plus
/// the vocabulary that fixes the embedding row order.
#[derive(Clone, Debug)]
pub struct WarrantModel {
    pub kind: ModelKind,
    pub vocab: Vocab,
    /// [vocab, input_dim]
    pub embeddings: Tensor,
    pub encoder: EncoderParams,
    pub head: WarrantHead,
    pub h: usize,
}

/// Which learning-rate group a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Encoder,
    Head,
}

fn init_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(vec![rows, cols]);
    t.fill_uniform(rng, -bound, bound);
    t
}

fn init_vector(len: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(vec![len]);
    t.fill_uniform(rng, -bound, bound);
    t
}

/// Fresh head weights: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per weight
/// tensor, zero biases. Draw order: argument weight, warrant weight, scorer
/// weight.
pub fn init_warrant_head(kind: ModelKind, d: usize, h: usize, rng: &mut Rng) -> Result<WarrantHead> {
    if d == 0 || h == 0 {
        return Err(Error::Parameter(format!("head dims d={d}, h={h}")));
    }
    let arg_in = kind.arg_input_dim(d);
    let arg_weight = init_matrix(h, arg_in, arg_in, rng);
    let warrant_weight = init_matrix(h, 2 * d, 2 * d, rng);
    let scorer = match kind {
        ModelKind::Corr => Scorer::PerSlot {
            weight: init_matrix(2, 3 * h, 3 * h, rng),
            bias: Tensor::zeros(vec![2]),
        },
        _ => Scorer::Shared {
            weight: init_vector(2 * h, 2 * h, rng),
            bias: Tensor::zeros(vec![1]),
        },
    };
    Ok(WarrantHead {
        arg_weight,
        arg_bias: Tensor::zeros(vec![h]),
        warrant_weight,
        warrant_bias: Tensor::zeros(vec![h]),
        scorer,
    })
}

impl WarrantModel {
    /// Assemble and validate a model. All dimension checks happen here so a
    /// forward pass can never fail on shapes.
    pub fn new(
        kind: ModelKind,
        vocab: Vocab,
        embeddings: Tensor,
        encoder: EncoderParams,
        head: WarrantHead,
        h: usize,
    ) -> Result<WarrantModel> {
        let d = encoder.d;
        if embeddings.shape() != [vocab.len(), encoder.input_dim] {
            return Err(Error::Dimension(format!(
                "embeddings {:?} for vocab of {} and input dimension {}",
                embeddings.shape(),
                vocab.len(),
                encoder.input_dim
            )));
        }
        let arg_in = kind.arg_input_dim(d);
        if head.arg_weight.shape() != [h, arg_in]
            || head.arg_bias.shape() != [h]
            || head.warrant_weight.shape() != [h, 2 * d]
            || head.warrant_bias.shape() != [h]
        {
            return Err(Error::Dimension(format!(
                "head feature layers inconsistent with d={d}, h={h}"
            )));
        }
        let scorer_ok = match (&head.scorer, kind) {
            (Scorer::Shared { weight, bias }, ModelKind::Comp | ModelKind::CompRw) => {
                weight.shape() == [2 * h] && bias.shape() == [1]
            }
            (Scorer::PerSlot { weight, bias }, ModelKind::Corr) => {
                weight.shape() == [2, 3 * h] && bias.shape() == [2]
            }
            _ => false,
        };
        if !scorer_ok {
            return Err(Error::Dimension(format!(
                "scorer inconsistent with kind {kind} and h={h}"
            )));
        }
        Ok(WarrantModel {
            kind,
            vocab,
            embeddings,
            encoder,
            head,
            h,
        })
    }

    /// Parameter tensors in canonical order: embeddings; encoder forward
    /// (W_x, W_h, b) and backward (W_x, W_h, b); head (argument weight/bias,
    /// warrant weight/bias, scorer weight/bias).
    pub fn params(&self) -> Vec<(ParamGroup, &Tensor)> {
        let (sw, sb) = match &self.head.scorer {
            Scorer::Shared { weight, bias } | Scorer::PerSlot { weight, bias } => (weight, bias),
        };
        vec![
            (ParamGroup::Embedding, &self.embeddings),
            (ParamGroup::Encoder, &self.encoder.forward.w_x),
            (ParamGroup::Encoder, &self.encoder.forward.w_h),
            (ParamGroup::Encoder, &self.encoder.forward.b),
            (ParamGroup::Encoder, &self.encoder.backward.w_x),
            (ParamGroup::Encoder, &self.encoder.backward.w_h),
            (ParamGroup::Encoder, &self.encoder.backward.b),
            (ParamGroup::Head, &self.head.arg_weight),
            (ParamGroup::Head, &self.head.arg_bias),
            (ParamGroup::Head, &self.head.warrant_weight),
            (ParamGroup::Head, &self.head.warrant_bias),
            (ParamGroup::Head, sw),
            (ParamGroup::Head, sb),
        ]
    }

    /// Mutable view in the same order as `params`.
    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let (sw, sb) = match &mut self.head.scorer {
            Scorer::Shared { weight, bias } | Scorer::PerSlot { weight, bias } => (weight, bias),
        };
        vec![
            (ParamGroup::Embedding, &mut self.embeddings),
            (ParamGroup::Encoder, &mut self.encoder.forward.w_x),
            (ParamGroup::Encoder, &mut self.encoder.forward.w_h),
            (ParamGroup::Encoder, &mut self.encoder.forward.b),
            (ParamGroup::Encoder, &mut self.encoder.backward.w_x),
            (ParamGroup::Encoder, &mut self.encoder.backward.w_h),
            (ParamGroup::Encoder, &mut self.encoder.backward.b),
            (ParamGroup::Head, &mut self.head.arg_weight),
            (ParamGroup::Head, &mut self.head.arg_bias),
            (ParamGroup::Head, &mut self.head.warrant_weight),
            (ParamGroup::Head, &mut self.head.warrant_bias),
            (ParamGroup::Head, sw),
            (ParamGroup::Head, sb),
        ]
    }

    /// Insert all parameters as graph leaves, in `params` order.
    pub fn insert(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params().iter().map(|(_, t)| g.leaf((*t).clone())).collect()
    }

    /// Total scalar parameter count. With `include_embeddings` false (the
    /// default accounting), this is encoder + head:
    ///
    /// encoder: 2 (4d·input_dim + 4d·d + 4d)
    /// head:    h·arg_in + h + h·2d + h + scorer
    /// scorer:  shared 2h + 1; per-slot 2·3h + 2
    ///
    /// so the per-slot variant exceeds the shared one by exactly 4h + 1.
    pub fn count_params(&self, include_embeddings: bool) -> usize {
        let core = self.encoder.param_count() + self.head.param_count();
        if include_embeddings {
            core + self.embeddings.numel()
        } else {
            core
        }
    }
}

/// An instance with every sentence resolved to embedding-row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedInstance {
    pub claim: Vec<usize>,
    pub reason: Vec<usize>,
    pub warrant0: Vec<usize>,
    pub warrant1: Vec<usize>,
    pub label: usize,
}

impl IndexedInstance {
    pub fn from_arct(inst: &ArctInstance, vocab: &Vocab) -> IndexedInstance {
        IndexedInstance {
            claim: vocab.indices(inst.claim.tokens()),
            reason: vocab.indices(inst.reason.tokens()),
            warrant0: vocab.indices(inst.warrant0.tokens()),
            warrant1: vocab.indices(inst.warrant1.tokens()),
            label: inst.label,
        }
    }

    /// Exchange the candidate slots and flip the label.
    pub fn swapped(&self) -> IndexedInstance {
        IndexedInstance {
            claim: self.claim.clone(),
            reason: self.reason.clone(),
            warrant0: self.warrant1.clone(),
            warrant1: self.warrant0.clone(),
            label: 1 - self.label,
        }
    }
}

/// A premise/hypothesis pair resolved to embedding-row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedPair {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub label: usize,
}

impl IndexedPair {
    pub fn from_nli(inst: &NliInstance, vocab: &Vocab) -> IndexedPair {
        IndexedPair {
            premise: vocab.indices(inst.premise.tokens()),
            hypothesis: vocab.indices(inst.hypothesis.tokens()),
            label: inst.label,
        }
    }
}

/// Node handles of one forward pass, for loss backprop and inspection.
#[derive(Clone, Copy, Debug)]
pub struct GraphForward {
    pub loss: NodeId,
    pub yhat: NodeId,
    /// Raw candidate scores, slot 0 first.
    pub scores: NodeId,
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct TaskOutput {
    pub yhat: Tensor,
    pub loss: f64,
    pub s0: f64,
    pub s1: f64,
}

fn encoder_nodes_from(nodes: &[NodeId], d: usize) -> EncoderNodes {
    EncoderNodes {
        forward: DirectionNodes {
            w_x: nodes[1],
            w_h: nodes[2],
            b: nodes[3],
        },
        backward: DirectionNodes {
            w_x: nodes[4],
            w_h: nodes[5],
            b: nodes[6],
        },
        d,
    }
}

fn encode_indices(
    g: &mut Graph,
    emb: NodeId,
    enc: EncoderNodes,
    indices: &[usize],
    dropout_p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<NodeId> {
    let steps: Vec<NodeId> = indices
        .iter()
        .map(|&i| g.row(emb, i))
        .collect::<Result<_>>()?;
    encode_steps(g, enc, &steps, dropout_p, mode, rng)
}

/// Feature layer shared by the warrant heads: ReLU(W x + b) with dropout.
fn feature_layer(
    g: &mut Graph,
    weight: NodeId,
    bias: NodeId,
    input: NodeId,
    dropout_p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<NodeId> {
    let lin = g.matvec(weight, input)?;
    let pre = g.add(lin, bias)?;
    let act = g.relu(pre);
    g.dropout(act, dropout_p, mode, rng)
}

impl WarrantModel {
    /// Record one forward pass on an existing graph whose leaves were made by
    /// `insert`. The reason-only variant never touches the claim indices —
    /// neither the embedding rows nor the dropout stream depend on them.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        nodes: &[NodeId],
        inst: &IndexedInstance,
        dropout_p: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<GraphForward> {
        let emb = nodes[0];
        let enc = encoder_nodes_from(nodes, self.encoder.d);
        let (arg_w, arg_b) = (nodes[7], nodes[8]);
        let (war_w, war_b) = (nodes[9], nodes[10]);
        let (score_w, score_b) = (nodes[11], nodes[12]);

        let arg_input = match self.kind {
            ModelKind::CompRw => {
                encode_indices(g, emb, enc, &inst.reason, dropout_p, mode, rng)?
            }
            _ => {
                let claim = encode_indices(g, emb, enc, &inst.claim, dropout_p, mode, rng)?;
                let reason = encode_indices(g, emb, enc, &inst.reason, dropout_p, mode, rng)?;
                g.concat(&[claim, reason], 0)?
            }
        };
        let w0 = encode_indices(g, emb, enc, &inst.warrant0, dropout_p, mode, rng)?;
        let w1 = encode_indices(g, emb, enc, &inst.warrant1, dropout_p, mode, rng)?;

        let a = feature_layer(g, arg_w, arg_b, arg_input, dropout_p, mode, rng)?;
        let w0f = feature_layer(g, war_w, war_b, w0, dropout_p, mode, rng)?;
        let w1f = feature_layer(g, war_w, war_b, w1, dropout_p, mode, rng)?;

        let scores = match self.head.scorer {
            Scorer::Shared { .. } => {
                // The identical operation sequence scores each slot, so
                // exchanging the slots exchanges the scores bit for bit.
                let mut slot_score = |wf: NodeId| -> Result<NodeId> {
                    let feats = g.concat(&[a, wf], 0)?;
                    let s = g.dot(score_w, feats)?;
                    g.add(s, score_b)
                };
                let s0 = slot_score(w0f)?;
                let s1 = slot_score(w1f)?;
                g.concat(&[s0, s1], 0)?
            }
            Scorer::PerSlot { .. } => {
                let feats = g.concat(&[a, w0f, w1f], 0)?;
                let lin = g.matvec(score_w, feats)?;
                g.add(lin, score_b)?
            }
        };
        let loss = g.cross_entropy_loss(scores, inst.label)?;
        let yhat = g.softmax_row(scores)?;
        Ok(GraphForward { loss, yhat, scores })
    }

    /// One forward pass in a throwaway graph.
    pub fn forward(
        &self,
        inst: &IndexedInstance,
        dropout_p: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<TaskOutput> {
        let mut g = Graph::new();
        let nodes = self.insert(&mut g);
        let fwd = self.forward_graph(&mut g, &nodes, inst, dropout_p, mode, rng)?;
        let scores = g.value(fwd.scores);
        Ok(TaskOutput {
            s0: scores.data()[0],
            s1: scores.data()[1],
            yhat: g.value(fwd.yhat).clone(),
            loss: g.value(fwd.loss).item(),
        })
    }
}

/// The inference head used for pretraining: a hidden ReLU layer over the
/// four-part pair features [u; v; |u-v|; u (*) v], then a 3-way classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct NliHead {
    /// [hidden, 8d]
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    /// [3, hidden]
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

impl NliHead {
    pub fn param_count(&self) -> usize {
        self.hidden_weight.numel()
            + self.hidden_bias.numel()
            + self.out_weight.numel()
            + self.out_bias.numel()
    }
}

/// Conventional hidden width of the inference head.
pub const NLI_HIDDEN_DEFAULT: usize = 512;

pub fn init_nli_head(d: usize, hidden: usize, rng: &mut Rng) -> Result<NliHead> {
    if d == 0 || hidden == 0 {
        return Err(Error::Parameter(format!("head dims d={d}, hidden={hidden}")));
    }
    Ok(NliHead {
        hidden_weight: init_matrix(hidden, 8 * d, 8 * d, rng),
        hidden_bias: Tensor::zeros(vec![hidden]),
        out_weight: init_matrix(3, hidden, hidden, rng),
        out_bias: Tensor::zeros(vec![3]),
    })
}

/// A complete inference model for encoder pretraining.
#[derive(Clone, Debug)]
pub struct NliModel {
    pub vocab: Vocab,
    pub embeddings: Tensor,
    pub encoder: EncoderParams,
    pub head: NliHead,
    pub hidden: usize,
}

/// Values of one inference forward pass.
#[derive(Clone, Debug)]
pub struct NliOutput {
    pub yhat: Tensor,
    pub loss: f64,
}

impl NliModel {
    pub fn new(
        vocab: Vocab,
        embeddings: Tensor,
        encoder: EncoderParams,
        head: NliHead,
        hidden: usize,
    ) -> Result<NliModel> {
        let d = encoder.d;
        if embeddings.shape() != [vocab.len(), encoder.input_dim] {
            return Err(Error::Dimension(format!(
                "embeddings {:?} for vocab of {} and input dimension {}",
                embeddings.shape(),
                vocab.len(),
                encoder.input_dim
            )));
        }
        if head.hidden_weight.shape() != [hidden, 8 * d]
            || head.hidden_bias.shape() != [hidden]
            || head.out_weight.shape() != [3, hidden]
            || head.out_bias.shape() != [3]
        {
            return Err(Error::Dimension(format!(
                "inference head inconsistent with d={d}, hidden={hidden}"
            )));
        }
        Ok(NliModel {
            vocab,
            embeddings,
            encoder,
            head,
            hidden,
        })
    }

    /// Parameter tensors in canonical order: embeddings, six encoder tensors,
    /// then hidden weight/bias and output weight/bias.
    pub fn params(&self) -> Vec<(ParamGroup, &Tensor)> {
        vec![
            (ParamGroup::Embedding, &self.embeddings),
            (ParamGroup::Encoder, &self.encoder.forward.w_x),
            (ParamGroup::Encoder, &self.encoder.forward.w_h),
            (ParamGroup::Encoder, &self.encoder.forward.b),
            (ParamGroup::Encoder, &self.encoder.backward.w_x),
            (ParamGroup::Encoder, &self.encoder.backward.w_h),
            (ParamGroup::Encoder, &self.encoder.backward.b),
            (ParamGroup::Head, &self.head.hidden_weight),
            (ParamGroup::Head, &self.head.hidden_bias),
            (ParamGroup::Head, &self.head.out_weight),
            (ParamGroup::Head, &self.head.out_bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        vec![
            (ParamGroup::Embedding, &mut self.embeddings),
            (ParamGroup::Encoder, &mut self.encoder.forward.w_x),
            (ParamGroup::Encoder, &mut self.encoder.forward.w_h),
            (ParamGroup::Encoder, &mut self.encoder.forward.b),
            (ParamGroup::Encoder, &mut self.encoder.backward.w_x),
            (ParamGroup::Encoder, &mut self.encoder.backward.w_h),
            (ParamGroup::Encoder, &mut self.encoder.backward.b),
            (ParamGroup::Head, &mut self.head.hidden_weight),
            (ParamGroup::Head, &mut self.head.hidden_bias),
            (ParamGroup::Head, &mut self.head.out_weight),
            (ParamGroup::Head, &mut self.head.out_bias),
        ]
    }

    pub fn insert(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params().iter().map(|(_, t)| g.leaf((*t).clone())).collect()
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        nodes: &[NodeId],
        pair: &IndexedPair,
        dropout_p: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<GraphForward> {
        let emb = nodes[0];
        let enc = encoder_nodes_from(nodes, self.encoder.d);
        let (hid_w, hid_b) = (nodes[7], nodes[8]);
        let (out_w, out_b) = (nodes[9], nodes[10]);

        let u = encode_indices(g, emb, enc, &pair.premise, dropout_p, mode, rng)?;
        let v = encode_indices(g, emb, enc, &pair.hypothesis, dropout_p, mode, rng)?;
        let features = pair_features(g, u, v)?;
        let hidden = {
            let lin = g.matvec(hid_w, features)?;
            let pre = g.add(lin, hid_b)?;
            g.relu(pre)
        };
        let scores = {
            let lin = g.matvec(out_w, hidden)?;
            g.add(lin, out_b)?
        };
        let loss = g.cross_entropy_loss(scores, pair.label)?;
        let yhat = g.softmax_row(scores)?;
        Ok(GraphForward { loss, yhat, scores })
    }

    pub fn forward(
        &self,
        pair: &IndexedPair,
        dropout_p: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<NliOutput> {
        let mut g = Graph::new();
        let nodes = self.insert(&mut g);
        let fwd = self.forward_graph(&mut g, &nodes, pair, dropout_p, mode, rng)?;
        Ok(NliOutput {
            yhat: g.value(fwd.yhat).clone(),
            loss: g.value(fwd.loss).item(),
        })
    }
}

/// The four-part pair feature vector [u; v; |u-v|; u (*) v] of length 8d.
pub fn pair_features(g: &mut Graph, u: NodeId, v: NodeId) -> Result<NodeId> {
    let diff = g.abs_diff(u, v)?;
    let prod = g.hadamard(u, v)?;
    g.concat(&[u, v, diff, prod], 0)
}

/// Index of the largest probability; ties resolve to the lowest index.
pub fn predict(yhat: &Tensor) -> usize {
    let mut best = 0;
    for (i, &p) in yhat.data().iter().enumerate().skip(1) {
        if p > yhat.data()[best] {
            best = i;
        }
    }
    best
}

const MODEL_MAGIC: &[u8; 8] = b"ARCTMDL1";

/// Write a self-contained model checkpoint.
///
/// Layout: magic `ARCTMDL1`; one textual config line
/// `kind=<kind> h=<h> vocab=<hex fingerprint> ntokens=<n>`; the vocabulary,
/// one token per line in index order; the encoder container; the six head
/// tensors as little-endian f64 in declaration order; the embedding matrix
/// rows in vocabulary order, same encoding.
pub fn save_model(model: &WarrantModel, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(
        format!(
            "kind={} h={} vocab={:016x} ntokens={}\n",
            model.kind,
            model.h,
            model.vocab.fingerprint(),
            model.vocab.len()
        )
        .as_bytes(),
    );
    for tok in model.vocab.tokens() {
        out.extend_from_slice(tok.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(&container_bytes(&model.encoder));
    let head_tensors = [
        &model.head.arg_weight,
        &model.head.arg_bias,
        &model.head.warrant_weight,
        &model.head.warrant_bias,
    ];
    let (sw, sb) = match &model.head.scorer {
        Scorer::Shared { weight, bias } | Scorer::PerSlot { weight, bias } => (weight, bias),
    };
    for t in head_tensors.into_iter().chain([sw, sb]) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in model.embeddings.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn read_line(bytes: &[u8], pos: &mut usize, origin: &str) -> Result<String> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Corrupt(format!("{origin}: unterminated text line")))?;
    let line = std::str::from_utf8(&rest[..end])
        .map_err(|_| Error::Corrupt(format!("{origin}: non-UTF-8 text line")))?
        .to_string();
    *pos += end + 1;
    Ok(line)
}

/// Exact inverse of `save_model`.
pub fn load_model(path: &Path) -> Result<WarrantModel> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let origin = path.display().to_string();
    if bytes.len() < 8 || &bytes[0..8] != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "{origin}: not a model checkpoint (bad magic)"
        )));
    }
    let mut pos = 8;
    let config = read_line(&bytes, &mut pos, &origin)?;
    let mut kind: Option<ModelKind> = None;
    let mut h: Option<usize> = None;
    let mut fingerprint: Option<u64> = None;
    let mut ntokens: Option<usize> = None;
    for field in config.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| {
            Error::Corrupt(format!("{origin}: malformed config field {field:?}"))
        })?;
        match key {
            "kind" => kind = Some(value.parse()?),
            "h" => {
                h = Some(value.parse().map_err(|_| {
                    Error::Corrupt(format!("{origin}: bad h {value:?}"))
                })?)
            }
            "vocab" => {
                fingerprint = Some(u64::from_str_radix(value, 16).map_err(|_| {
                    Error::Corrupt(format!("{origin}: bad vocab fingerprint {value:?}"))
                })?)
            }
            "ntokens" => {
                ntokens = Some(value.parse().map_err(|_| {
                    Error::Corrupt(format!("{origin}: bad ntokens {value:?}"))
                })?)
            }
            _ => {} // unknown fields are ignored for forward compatibility
        }
    }
    let (kind, h, fingerprint, ntokens) = match (kind, h, fingerprint, ntokens) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => {
            return Err(Error::Corrupt(format!(
                "{origin}: config line missing fields: {config:?}"
            )))
        }
    };
    let mut tokens = Vec::with_capacity(ntokens);
    for _ in 0..ntokens {
        tokens.push(read_line(&bytes, &mut pos, &origin)?);
    }
    let vocab = Vocab::from_tokens(tokens)?;
    if vocab.fingerprint() != fingerprint {
        return Err(Error::Corrupt(format!(
            "{origin}: vocabulary fingerprint mismatch"
        )));
    }
    let encoder = parse_container(&bytes, &mut pos, &origin)?;
    let d = encoder.d;
    let arg_in = kind.arg_input_dim(d);
    let arg_weight = Tensor::new(
        vec![h, arg_in],
        take_f64s(&bytes, &mut pos, h * arg_in, &origin)?,
    )?;
    let arg_bias = Tensor::vector(take_f64s(&bytes, &mut pos, h, &origin)?);
    let warrant_weight = Tensor::new(
        vec![h, 2 * d],
        take_f64s(&bytes, &mut pos, h * 2 * d, &origin)?,
    )?;
    let warrant_bias = Tensor::vector(take_f64s(&bytes, &mut pos, h, &origin)?);
    let scorer = match kind {
        ModelKind::Corr => Scorer::PerSlot {
            weight: Tensor::new(
                vec![2, 3 * h],
                take_f64s(&bytes, &mut pos, 2 * 3 * h, &origin)?,
            )?,
            bias: Tensor::vector(take_f64s(&bytes, &mut pos, 2, &origin)?),
        },
        _ => Scorer::Shared {
            weight: Tensor::vector(take_f64s(&bytes, &mut pos, 2 * h, &origin)?),
            bias: Tensor::vector(take_f64s(&bytes, &mut pos, 1, &origin)?),
        },
    };
    let embeddings = Tensor::new(
        vec![ntokens, encoder.input_dim],
        take_f64s(&bytes, &mut pos, ntokens * encoder.input_dim, &origin)?,
    )?;
    if pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{origin}: {} trailing bytes after declared payload",
            bytes.len() - pos
        )));
    }
    WarrantModel::new(
        kind,
        vocab,
        embeddings,
        encoder,
        WarrantHead {
            arg_weight,
            arg_bias,
            warrant_weight,
            warrant_bias,
            scorer,
        },
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_adaptive;
    use crate::encoder::init_encoder;

    const D: usize = 4;
    const H: usize = 3;
    const INPUT: usize = 4;
    const VOCAB: usize = 8;

    fn toy_vocab() -> Vocab {
        let toks: Vec<String> = (0..VOCAB - 1).map(|i| format!("tok{i}")).collect();
        let lists = [toks];
        Vocab::build(lists.iter().map(|s| s.as_slice()))
    }

    fn toy_model(kind: ModelKind, seed: u64) -> WarrantModel {
        let mut rng = Rng::new(seed);
        let encoder = init_encoder(D, INPUT, &mut rng).unwrap();
        let mut embeddings = Tensor::zeros(vec![VOCAB, INPUT]);
        embeddings.fill_uniform(&mut rng, -0.5, 0.5);
        let head = init_warrant_head(kind, D, H, &mut rng).unwrap();
        WarrantModel::new(kind, toy_vocab(), embeddings, encoder, head, H).unwrap()
    }

    fn toy_instance() -> IndexedInstance {
        IndexedInstance {
            claim: vec![1, 2],
            reason: vec![3, 4, 5],
            warrant0: vec![6],
            warrant1: vec![7, 1],
            label: 0,
        }
    }

    fn zero_scorer(model: &mut WarrantModel) {
        match &mut model.head.scorer {
            Scorer::Shared { weight, bias } | Scorer::PerSlot { weight, bias } => {
                weight.scale_assign(0.0);
                bias.scale_assign(0.0);
            }
        }
    }

    #[test]
    fn zero_scorer_gives_uniform_prediction() {
        for kind in [ModelKind::Comp, ModelKind::Corr, ModelKind::CompRw] {
            let mut model = toy_model(kind, 3);
            zero_scorer(&mut model);
            let mut rng = Rng::new(0);
            let out = model
                .forward(&toy_instance(), 0.0, Mode::Eval, &mut rng)
                .unwrap();
            assert_eq!(out.yhat.data(), &[0.5, 0.5], "{kind}");
            assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn shared_scorer_swap_equivariance_is_bitwise() {
        let model = toy_model(ModelKind::Comp, 7);
        let inst = toy_instance();
        let mut rng = Rng::new(0);
        let orig = model.forward(&inst, 0.0, Mode::Eval, &mut rng).unwrap();
        let swapped = model
            .forward(&inst.swapped(), 0.0, Mode::Eval, &mut rng)
            .unwrap();
        // Bit-exact exchanges, not approximate ones.
        assert_eq!(orig.s0.to_bits(), swapped.s1.to_bits());
        assert_eq!(orig.s1.to_bits(), swapped.s0.to_bits());
        assert_eq!(orig.yhat.data()[0].to_bits(), swapped.yhat.data()[1].to_bits());
        assert_eq!(orig.yhat.data()[1].to_bits(), swapped.yhat.data()[0].to_bits());
        assert_eq!(orig.loss.to_bits(), swapped.loss.to_bits());
    }

    /// A random instance with sentence lengths 2-4 and indices over the toy
    /// vocabulary.
    fn random_instance(rng: &mut Rng) -> IndexedInstance {
        let sent = |rng: &mut Rng| -> Vec<usize> {
            let len = 2 + rng.below(3);
            (0..len).map(|_| rng.below(VOCAB)).collect()
        };
        IndexedInstance {
            claim: sent(rng),
            reason: sent(rng),
            warrant0: sent(rng),
            warrant1: sent(rng),
            label: rng.below(2),
        }
    }

    /// For generic random parameters the per-slot scorer treats the two slots
    /// differently, so a swap (with flipped label) changes the loss. The rare
    /// exception is the degenerate draw where every ReLU feature dies and the
    /// scores collapse; probing two independent instances per draw makes that
    /// vanishingly unlikely.
    fn per_slot_swap_changes_loss(model: &WarrantModel, draw_rng: &mut Rng) -> bool {
        (0..2).any(|_| {
            let inst = random_instance(draw_rng);
            let mut rng = Rng::new(0);
            let orig = model.forward(&inst, 0.0, Mode::Eval, &mut rng).unwrap();
            let swapped = model
                .forward(&inst.swapped(), 0.0, Mode::Eval, &mut rng)
                .unwrap();
            (orig.loss - swapped.loss).abs() > 1e-9
        })
    }

    #[test]
    fn per_slot_scorer_breaks_swap_equivariance() {
        let mut draw_rng = Rng::new(424242);
        let mut changed = 0;
        for seed in 0..100 {
            let model = toy_model(ModelKind::Corr, 1000 + seed);
            if per_slot_swap_changes_loss(&model, &mut draw_rng) {
                changed += 1;
            }
        }
        assert!(changed >= 99, "loss changed in only {changed}/100 draws");
    }

    #[test]
    fn slot_zero_score_ignores_other_warrant() {
        let model = toy_model(ModelKind::Comp, 11);
        let inst = toy_instance();
        let mut variant = inst.clone();
        variant.warrant1 = vec![2, 3, 4]; // entirely different slot-1 indices

        let mut rng = Rng::new(0);
        let a = model.forward(&inst, 0.0, Mode::Eval, &mut rng).unwrap();
        let b = model.forward(&variant, 0.0, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a.s0.to_bits(), b.s0.to_bits());
        assert_ne!(a.s1.to_bits(), b.s1.to_bits());

        // The gradient of s0 with respect to slot-1 embedding rows is exactly
        // zero: slot 1 feeds s1 only.
        let mut g = Graph::new();
        let nodes = model.insert(&mut g);
        let fwd = model
            .forward_graph(&mut g, &nodes, &inst, 0.0, Mode::Eval, &mut Rng::new(0))
            .unwrap();
        let s0 = g.slice(fwd.scores, 0, 1).unwrap();
        let grads = g.backward(s0).unwrap();
        let emb_grad = grads.wrt(nodes[0]);
        // Row 7 appears only in warrant1.
        let row7 = &emb_grad.data()[7 * INPUT..8 * INPUT];
        assert!(row7.iter().all(|&v| v == 0.0), "{row7:?}");
        // Row 6 appears only in warrant0 and must receive gradient.
        let row6 = &emb_grad.data()[6 * INPUT..7 * INPUT];
        assert!(row6.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn reason_only_variant_is_claim_invariant() {
        let model = toy_model(ModelKind::CompRw, 13);
        let inst = toy_instance();
        let mut other = inst.clone();
        other.claim = vec![5, 5, 5, 5];
        let mut rng = Rng::new(0);
        let a = model.forward(&inst, 0.0, Mode::Eval, &mut rng).unwrap();
        let b = model.forward(&other, 0.0, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.s0.to_bits(), b.s0.to_bits());
        assert_eq!(a.s1.to_bits(), b.s1.to_bits());
        // Claim-invariance holds in train mode too: the dropout stream must
        // not depend on the claim.
        let mut r1 = Rng::new(42);
        let mut r2 = Rng::new(42);
        let ta = model.forward(&inst, 0.3, Mode::Train, &mut r1).unwrap();
        let tb = model.forward(&other, 0.3, Mode::Train, &mut r2).unwrap();
        assert_eq!(ta.loss.to_bits(), tb.loss.to_bits());
    }

    #[test]
    fn probabilities_sum_to_one_and_loss_nonnegative() {
        for kind in [ModelKind::Comp, ModelKind::Corr, ModelKind::CompRw] {
            for seed in 0..10 {
                let model = toy_model(kind, 100 + seed);
                let mut rng = Rng::new(seed);
                let out = model
                    .forward(&toy_instance(), 0.0, Mode::Eval, &mut rng)
                    .unwrap();
                let total: f64 = out.yhat.data().iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                assert!(out.loss >= 0.0);
            }
        }
    }

    // Scalar objective for gradient checks: the loss, or one score via a
    // length-1 slice. Returns the objective value and analytic gradients in
    // canonical parameter order.
    fn warrant_run(
        model: &WarrantModel,
        inst: &IndexedInstance,
        score_slot: Option<usize>,
        p: &[Tensor],
    ) -> (f64, Vec<Tensor>) {
        let mut m = model.clone();
        for ((_, dst), src) in m.params_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        let mut g = Graph::new();
        let nodes = m.insert(&mut g);
        let fwd = m
            .forward_graph(&mut g, &nodes, inst, 0.0, Mode::Eval, &mut Rng::new(0))
            .unwrap();
        let root = match score_slot {
            None => fwd.loss,
            Some(i) => g.slice(fwd.scores, i, 1).unwrap(),
        };
        let grads = g.backward(root).unwrap();
        (
            g.value(root).item(),
            nodes.iter().map(|&n| grads.wrt(n).clone()).collect(),
        )
    }

    fn warrant_grad_check(kind: ModelKind) {
        let model = toy_model(kind, 19);
        let inst = toy_instance();
        let tensors: Vec<Tensor> = model.params().iter().map(|(_, t)| (*t).clone()).collect();
        let (_, analytic) = warrant_run(&model, &inst, None, &tensors);
        let err = grad_check_adaptive(
            |p| warrant_run(&model, &inst, None, p).0,
            &tensors,
            &analytic,
        )
        .unwrap();
        assert!(err < 1e-6, "{kind} loss: max rel err {err}");
    }

    #[test]
    fn comp_gradients_match_finite_differences() {
        warrant_grad_check(ModelKind::Comp);
    }

    #[test]
    fn corr_gradients_match_finite_differences() {
        warrant_grad_check(ModelKind::Corr);
    }

    #[test]
    fn comp_rw_gradients_match_finite_differences() {
        warrant_grad_check(ModelKind::CompRw);
    }

    // With a shared scorer the loss barely sees the argument side (see the
    // invariance test below), so the per-slot scores are the objectives that
    // exercise those gradient paths with real signal.
    #[test]
    fn shared_scorer_score_gradients_match_finite_differences() {
        for kind in [ModelKind::Comp, ModelKind::CompRw] {
            let model = toy_model(kind, 19);
            let inst = toy_instance();
            let tensors: Vec<Tensor> =
                model.params().iter().map(|(_, t)| (*t).clone()).collect();
            for slot in [0usize, 1] {
                let (_, analytic) = warrant_run(&model, &inst, Some(slot), &tensors);
                let err = grad_check_adaptive(
                    |p| warrant_run(&model, &inst, Some(slot), p).0,
                    &tensors,
                    &analytic,
                )
                .unwrap();
                assert!(err < 1e-6, "{kind} score {slot}: max rel err {err}");
            }
        }
    }

    // The shared scorer adds the same argument term to both scores, and a
    // two-way softmax is invariant to a common shift: the loss is exactly
    // independent of the argument head, the argument block of the scorer, the
    // scorer bias, and embedding rows used only by the argument side. Both
    // the analytic gradients and the loss under large perturbations of that
    // whole set must vanish to rounding error.
    #[test]
    fn shared_scorer_loss_ignores_argument_path() {
        for kind in [ModelKind::Comp, ModelKind::CompRw] {
            let model = toy_model(kind, 19);
            let inst = toy_instance();
            let tensors: Vec<Tensor> = model.params().iter().map(|(_, t)| (*t).clone()).collect();
            // Embedding rows not shared with either warrant; for the
            // reason-warrant variant the claim rows are unused as well.
            let arg_only_rows: &[usize] = match kind {
                ModelKind::Comp => &[2, 3, 4, 5],
                ModelKind::CompRw => &[2, 3, 4, 5],
                ModelKind::Corr => unreachable!(),
            };
            let in_set = |pi: usize, j: usize| match pi {
                0 => arg_only_rows.contains(&(j / INPUT)),
                7 | 8 => true,       // argument weight and bias
                11 => j < H,         // argument block of the scorer weight
                12 => true,          // scorer bias
                _ => false,
            };

            let (base_loss, analytic) = warrant_run(&model, &inst, None, &tensors);
            let mut max_grad = 0.0f64;
            let mut shoved = tensors.clone();
            for (pi, t) in shoved.iter_mut().enumerate() {
                for j in 0..t.numel() {
                    if in_set(pi, j) {
                        max_grad = max_grad.max(analytic[pi].data()[j].abs());
                        t.data_mut()[j] += 0.37;
                    }
                }
            }
            assert!(max_grad < 1e-14, "{kind}: argument-path gradient {max_grad}");
            let (shoved_loss, _) = warrant_run(&model, &inst, None, &shoved);
            assert!(
                (shoved_loss - base_loss).abs() < 1e-12,
                "{kind}: loss moved by {}",
                (shoved_loss - base_loss).abs()
            );
        }
    }

    fn toy_nli_model(seed: u64) -> NliModel {
        let mut rng = Rng::new(seed);
        let encoder = init_encoder(D, INPUT, &mut rng).unwrap();
        let mut embeddings = Tensor::zeros(vec![VOCAB, INPUT]);
        embeddings.fill_uniform(&mut rng, -0.5, 0.5);
        let head = init_nli_head(D, 4, &mut rng).unwrap();
        NliModel::new(toy_vocab(), embeddings, encoder, head, 4).unwrap()
    }

    #[test]
    fn nli_equal_pair_zeroes_difference_block() {
        let model = toy_nli_model(23);
        let mut g = Graph::new();
        let nodes = model.insert(&mut g);
        let enc = encoder_nodes_from(&nodes, D);
        let mut rng = Rng::new(0);
        let u = encode_indices(&mut g, nodes[0], enc, &[1, 2], 0.0, Mode::Eval, &mut rng).unwrap();
        let v = encode_indices(&mut g, nodes[0], enc, &[1, 2], 0.0, Mode::Eval, &mut rng).unwrap();
        let feats = pair_features(&mut g, u, v).unwrap();
        let vals = g.value(feats).data();
        // Blocks: u (2d), v (2d), |u-v| (2d), u*v (2d).
        assert!(vals[4 * D..6 * D].iter().all(|&x| x == 0.0));
        assert_eq!(vals.len(), 8 * D);
    }

    #[test]
    fn nli_zero_output_weights_give_uniform() {
        let mut model = toy_nli_model(29);
        model.head.out_weight.scale_assign(0.0);
        model.head.out_bias.scale_assign(0.0);
        let pair = IndexedPair {
            premise: vec![1, 2, 3],
            hypothesis: vec![4, 5],
            label: 1,
        };
        let mut rng = Rng::new(0);
        let out = model.forward(&pair, 0.0, Mode::Eval, &mut rng).unwrap();
        for &p in out.yhat.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((out.loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nli_gradients_match_finite_differences() {
        let model = toy_nli_model(31);
        let pair = IndexedPair {
            premise: vec![1, 2],
            hypothesis: vec![3, 4, 5],
            label: 2,
        };
        let tensors: Vec<Tensor> = model.params().iter().map(|(_, t)| (*t).clone()).collect();
        let run = |p: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut m = model.clone();
            for ((_, dst), src) in m.params_mut().into_iter().zip(p) {
                *dst = src.clone();
            }
            let mut g = Graph::new();
            let nodes = m.insert(&mut g);
            let fwd = m
                .forward_graph(&mut g, &nodes, &pair, 0.0, Mode::Eval, &mut Rng::new(0))
                .unwrap();
            let grads = g.backward(fwd.loss).unwrap();
            (
                g.value(fwd.loss).item(),
                nodes.iter().map(|&n| grads.wrt(n).clone()).collect(),
            )
        };
        let (_, analytic) = run(&tensors);
        let err = grad_check_adaptive(|p| run(p).0, &tensors, &analytic).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn predict_breaks_ties_to_lowest_index() {
        assert_eq!(predict(&Tensor::vector(vec![0.6, 0.4])), 0);
        assert_eq!(predict(&Tensor::vector(vec![0.5, 0.5])), 0);
        assert_eq!(predict(&Tensor::vector(vec![0.1, 0.2, 0.7])), 2);
        assert_eq!(predict(&Tensor::vector(vec![0.2, 0.6, 0.2])), 1);
    }

    #[test]
    fn per_slot_exceeds_shared_count_by_4h_plus_1() {
        for h in [8usize, 64, 512] {
            let mut rng = Rng::new(1);
            let shared = init_warrant_head(ModelKind::Comp, D, h, &mut rng).unwrap();
            let per_slot = init_warrant_head(ModelKind::Corr, D, h, &mut rng).unwrap();
            assert_eq!(
                per_slot.param_count() - shared.param_count(),
                4 * h + 1,
                "h={h}"
            );
        }
    }

    #[test]
    fn shared_scorer_weight_count_at_h512() {
        let mut rng = Rng::new(2);
        let head = init_warrant_head(ModelKind::Comp, D, 512, &mut rng).unwrap();
        match head.scorer {
            Scorer::Shared { weight, bias } => {
                assert_eq!(weight.numel() + bias.numel(), 1025);
            }
            Scorer::PerSlot { .. } => unreachable!(),
        }
    }

    /// Closed-form count for the claim+reason shared-scorer model, checked
    /// against an independent shape-sum over the instantiated tensors.
    #[test]
    fn full_size_parameter_count_is_pinned() {
        let (d, input_dim, h) = (512usize, 300usize, 512usize);
        let encoder_formula = 2 * (4 * d * input_dim + 4 * d * d + 4 * d);
        let head_formula = h * 4 * d + h + h * 2 * d + h + 2 * h + 1;
        assert_eq!(encoder_formula + head_formula, 4_904_961);

        let mut rng = Rng::new(3);
        let encoder = init_encoder(d, input_dim, &mut rng).unwrap();
        let head = init_warrant_head(ModelKind::Comp, d, h, &mut rng).unwrap();
        let shape_sum: usize = [
            encoder.forward.w_x.numel(),
            encoder.forward.w_h.numel(),
            encoder.forward.b.numel(),
            encoder.backward.w_x.numel(),
            encoder.backward.w_h.numel(),
            encoder.backward.b.numel(),
            head.param_count(),
        ]
        .iter()
        .sum();
        assert_eq!(shape_sum, 4_904_961);
    }

    #[test]
    fn count_params_includes_embeddings_on_request() {
        let model = toy_model(ModelKind::Comp, 5);
        let without = model.count_params(false);
        let with = model.count_params(true);
        assert_eq!(with - without, VOCAB * INPUT);
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        let mut rng = Rng::new(1);
        let encoder = init_encoder(D, INPUT, &mut rng).unwrap();
        let embeddings = Tensor::zeros(vec![VOCAB, INPUT]);
        // Head built for the wrong kind: per-slot scorer with comp kind.
        let head = init_warrant_head(ModelKind::Corr, D, H, &mut rng).unwrap();
        let err = WarrantModel::new(
            ModelKind::Comp,
            toy_vocab(),
            embeddings.clone(),
            encoder.clone(),
            head,
            H,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));

        // Wrong embedding width.
        let bad_emb = Tensor::zeros(vec![VOCAB, INPUT + 1]);
        let head = init_warrant_head(ModelKind::Comp, D, H, &mut rng).unwrap();
        let err =
            WarrantModel::new(ModelKind::Comp, toy_vocab(), bad_emb, encoder, head, H).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn checkpoint_round_trip_all_kinds() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [ModelKind::Comp, ModelKind::Corr, ModelKind::CompRw] {
            let model = toy_model(kind, 37);
            let path = dir.path().join(format!("{kind}.ckpt"));
            save_model(&model, &path).unwrap();
            let reread = load_model(&path).unwrap();
            assert_eq!(reread.kind, kind);
            assert_eq!(reread.h, model.h);
            assert_eq!(reread.embeddings, model.embeddings);
            assert_eq!(reread.encoder, model.encoder);
            assert_eq!(reread.head, model.head);
            assert_eq!(reread.vocab.tokens(), model.vocab.tokens());

            // Same bytes on re-save; same forward output after reload.
            let path2 = dir.path().join(format!("{kind}-2.ckpt"));
            save_model(&reread, &path2).unwrap();
            assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

            let mut rng = Rng::new(0);
            let a = model
                .forward(&toy_instance(), 0.0, Mode::Eval, &mut rng)
                .unwrap();
            let b = reread
                .forward(&toy_instance(), 0.0, Mode::Eval, &mut rng)
                .unwrap();
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy_model(ModelKind::Comp, 41);
        let path = dir.path().join("m.ckpt");
        save_model(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad.ckpt");
        fs::write(&bad_magic, b"NOTMAGIC").unwrap();
        assert!(matches!(load_model(&bad_magic), Err(Error::Format(_))));

        let trunc = dir.path().join("trunc.ckpt");
        fs::write(&trunc, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_model(&trunc), Err(Error::Corrupt(_))));

        let long = dir.path().join("long.ckpt");
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 16]);
        fs::write(&long, &extended).unwrap();
        assert!(matches!(load_model(&long), Err(Error::Corrupt(_))));
    }
}
