//! Annealed Adam training for the warrant models and for encoder
//! pretraining on the inference task.
//!
//! One optimizer drives three parameter groups — embeddings, encoder, head —
//! each at its own learning rate or fully frozen. After every epoch the dev
//! accuracy decides the schedule: an epoch that fails to strictly improve on
//! the best previous one divides every active rate by the anneal factor, and
//! training stops once the divided principal rate falls below the floor.
//! The parameters kept at the end are those of the best dev epoch, not the
//! last one. All randomness (init, dropout, batch order) derives from the
//! configured seed, so a run is reproducible bit for bit.

use std::fmt;
use std::path::PathBuf;

use crate::autodiff::{Graph, Mode};
use crate::corpus::{
    arct_token_lists, embeddings_for_vocab, nli_token_lists, random_embeddings, ArctInstance,
    NliInstance, Vocab,
};
use crate::encoder::{init_encoder, load_encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::{
    init_nli_head, init_warrant_head, predict, IndexedInstance, IndexedPair, ModelKind, NliModel,
    ParamGroup, WarrantModel,
};
use crate::tensor::{Rng, Tensor, GOLDEN};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment accumulators per parameter tensor, plus the
/// shared step count. Bias correction uses the step count, so the state must
/// live as long as the run it drives.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    /// Zeroed moments shaped like the given parameter list.
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update over all tensors. `rates[i] = None` freezes
    /// parameter `i` completely: neither its values nor its moments move, so
    /// the tensor stays bitwise identical.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        rates: &[Option<f64>],
    ) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || rates.len() != n {
            return Err(Error::Dimension(format!(
                "optimizer over {n} tensors got {} parameters, {} gradients, {} rates",
                params.len(),
                grads.len(),
                rates.len()
            )));
        }
        for i in 0..n {
            if params[i].shape() != grads[i].shape() || params[i].shape() != self.m[i].shape() {
                return Err(Error::Dimension(format!(
                    "parameter {i}: value {:?}, gradient {:?}, moments {:?}",
                    params[i].shape(),
                    grads[i].shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..n {
            let Some(lr) = rates[i] else { continue };
            let gd = grads[i].data();
            let md = self.m[i].data_mut();
            let vd = self.v[i].data_mut();
            let pd = params[i].data_mut();
            for j in 0..pd.len() {
                md[j] = ADAM_BETA1 * md[j] + (1.0 - ADAM_BETA1) * gd[j];
                vd[j] = ADAM_BETA2 * vd[j] + (1.0 - ADAM_BETA2) * gd[j] * gd[j];
                let mhat = md[j] / c1;
                let vhat = vd[j] / c2;
                pd[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Learning-rate decision after one epoch.
///
/// `history` holds the dev accuracies of all completed epochs, the current
/// one last. The rate is kept when the latest accuracy strictly exceeds the
/// best previous epoch — a first epoch always counts as an improvement — and
/// divided by `factor` otherwise. The flag is true once the returned rate
/// has fallen below `floor`, which ends training.
pub fn anneal_update(current_lr: f64, history: &[f64], factor: f64, floor: f64) -> (f64, bool) {
    let Some((&latest, prior)) = history.split_last() else {
        return (current_lr, current_lr < floor);
    };
    let best_prior = prior.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lr = if latest > best_prior { current_lr } else { current_lr / factor };
    (lr, lr < floor)
}

/// Knobs for one run. The defaults mirror the reference setup: principal
/// rate 2e-3 annealed by 5 down past 1e-5, batches of 16 with mean-loss
/// gradients, dropout 0.1, frozen embeddings, trainable encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Encoder state size per direction.
    pub d: usize,
    /// Head feature width (hidden width for the inference head).
    pub h: usize,
    /// Word vector dimension.
    pub input_dim: usize,
    /// Learning rate for the encoder and head groups.
    pub principal_lr: f64,
    /// Separate rate for tuned embeddings; `None` tunes them at the
    /// principal rate. Ignored while embeddings are frozen.
    pub embedding_lr: Option<f64>,
    /// Keep the embedding matrix bitwise constant.
    pub freeze_embeddings: bool,
    /// Update the encoder; set false to probe a fixed (e.g. pretrained)
    /// encoder.
    pub tune_encoder: bool,
    pub batch_size: usize,
    pub dropout_p: f64,
    /// Training stops once the annealed principal rate falls below this.
    pub lr_floor: f64,
    pub anneal_factor: f64,
    /// Hard cap; the annealing stop normally fires first.
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            d: 512,
            h: 512,
            input_dim: 300,
            principal_lr: 2e-3,
            embedding_lr: None,
            freeze_embeddings: true,
            tune_encoder: true,
            batch_size: 16,
            dropout_p: 0.1,
            lr_floor: 1e-5,
            anneal_factor: 5.0,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.input_dim == 0 {
            return Err(Error::Parameter(format!(
                "model dims d={}, h={}, input={} must all be positive",
                self.d, self.h, self.input_dim
            )));
        }
        if !(self.principal_lr > 0.0 && self.principal_lr.is_finite()) {
            return Err(Error::Parameter(format!("principal rate {}", self.principal_lr)));
        }
        if let Some(lr) = self.embedding_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Parameter(format!("embedding rate {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Parameter(format!("dropout probability {}", self.dropout_p)));
        }
        if !(self.lr_floor > 0.0) {
            return Err(Error::Parameter(format!("rate floor {}", self.lr_floor)));
        }
        if !(self.anneal_factor > 1.0) {
            return Err(Error::Parameter(format!("anneal factor {}", self.anneal_factor)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Parameter("epoch cap 0".into()));
        }
        Ok(())
    }
}

/// The three labelled splits of a task corpus.
#[derive(Clone, Debug)]
pub struct ArctSplits {
    pub train: Vec<ArctInstance>,
    pub dev: Vec<ArctInstance>,
    pub test: Vec<ArctInstance>,
}

/// Train and dev splits for pretraining.
#[derive(Clone, Debug)]
pub struct NliSplits {
    pub train: Vec<NliInstance>,
    pub dev: Vec<NliInstance>,
}

/// Where the encoder weights come from.
#[derive(Clone, Debug)]
pub enum EncoderSource {
    /// Fresh init from the run seed.
    Random,
    /// A container saved by pretraining; its dimensions must match the
    /// configuration.
    Path(PathBuf),
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss per training instance over the epoch.
    pub train_loss: f64,
    pub dev_acc: f64,
    /// The rate the epoch ran at (before any anneal that follows it).
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.epoch, self.train_loss, self.dev_acc, self.lr)
    }
}

/// Accuracy summary of one completed run. Train and test accuracy are
/// measured on the retained (best-dev) parameters; `dev_acc` is the best
/// dev accuracy observed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub train_acc: f64,
    pub dev_acc: f64,
    pub test_acc: f64,
    pub epochs_run: usize,
    pub final_lr: f64,
}

/// A trained warrant model with its accuracy summary and epoch log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub result: RunResult,
    pub model: WarrantModel,
    pub log: Vec<EpochLog>,
}

/// A pretrained inference model; transfer uses the encoder inside it.
#[derive(Clone, Debug)]
pub struct NliOutcome {
    pub model: NliModel,
    pub dev_acc: f64,
    pub epochs_run: usize,
    pub final_lr: f64,
    pub log: Vec<EpochLog>,
}

/// The pieces of a model the shared epoch loop needs.
trait TrainTask {
    type Item;
    fn group_list(&self) -> Vec<ParamGroup>;
    fn snapshot(&self) -> Vec<Tensor>;
    fn restore(&mut self, saved: &[Tensor]);
    fn loss_and_grads(
        &self,
        item: &Self::Item,
        dropout_p: f64,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<Tensor>)>;
    fn is_correct(&self, item: &Self::Item) -> Result<bool>;
    fn apply(&mut self, opt: &mut AdamState, grads: &[Tensor], rates: &[Option<f64>])
        -> Result<()>;
}

impl TrainTask for WarrantModel {
    type Item = IndexedInstance;

    fn group_list(&self) -> Vec<ParamGroup> {
        self.params().iter().map(|(g, _)| *g).collect()
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.params().iter().map(|(_, t)| (*t).clone()).collect()
    }

    fn restore(&mut self, saved: &[Tensor]) {
        for ((_, p), s) in self.params_mut().into_iter().zip(saved) {
            *p = s.clone();
        }
    }

    fn loss_and_grads(
        &self,
        inst: &IndexedInstance,
        dropout_p: f64,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let nodes = self.insert(&mut g);
        let fwd = self.forward_graph(&mut g, &nodes, inst, dropout_p, Mode::Train, rng)?;
        let loss = g.value(fwd.loss).item();
        let grads = g.backward(fwd.loss)?;
        Ok((loss, nodes.iter().map(|&n| grads.wrt(n).clone()).collect()))
    }

    fn is_correct(&self, inst: &IndexedInstance) -> Result<bool> {
        let out = self.forward(inst, 0.0, Mode::Eval, &mut Rng::new(0))?;
        Ok(predict(&out.yhat) == inst.label)
    }

    fn apply(
        &mut self,
        opt: &mut AdamState,
        grads: &[Tensor],
        rates: &[Option<f64>],
    ) -> Result<()> {
        let mut params: Vec<&mut Tensor> =
            self.params_mut().into_iter().map(|(_, t)| t).collect();
        opt.step(&mut params, grads, rates)
    }
}

impl TrainTask for NliModel {
    type Item = IndexedPair;

    fn group_list(&self) -> Vec<ParamGroup> {
        self.params().iter().map(|(g, _)| *g).collect()
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.params().iter().map(|(_, t)| (*t).clone()).collect()
    }

    fn restore(&mut self, saved: &[Tensor]) {
        for ((_, p), s) in self.params_mut().into_iter().zip(saved) {
            *p = s.clone();
        }
    }

    fn loss_and_grads(
        &self,
        pair: &IndexedPair,
        dropout_p: f64,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let nodes = self.insert(&mut g);
        let fwd = self.forward_graph(&mut g, &nodes, pair, dropout_p, Mode::Train, rng)?;
        let loss = g.value(fwd.loss).item();
        let grads = g.backward(fwd.loss)?;
        Ok((loss, nodes.iter().map(|&n| grads.wrt(n).clone()).collect()))
    }

    fn is_correct(&self, pair: &IndexedPair) -> Result<bool> {
        let out = self.forward(pair, 0.0, Mode::Eval, &mut Rng::new(0))?;
        Ok(predict(&out.yhat) == pair.label)
    }

    fn apply(
        &mut self,
        opt: &mut AdamState,
        grads: &[Tensor],
        rates: &[Option<f64>],
    ) -> Result<()> {
        let mut params: Vec<&mut Tensor> =
            self.params_mut().into_iter().map(|(_, t)| t).collect();
        opt.step(&mut params, grads, rates)
    }
}

/// Per-group base rates at the unannealed principal rate; `None` freezes.
fn base_rates(groups: &[ParamGroup], config: &TrainConfig) -> Vec<Option<f64>> {
    groups
        .iter()
        .map(|g| match g {
            ParamGroup::Embedding => {
                if config.freeze_embeddings {
                    None
                } else {
                    Some(config.embedding_lr.unwrap_or(config.principal_lr))
                }
            }
            ParamGroup::Encoder => config.tune_encoder.then_some(config.principal_lr),
            ParamGroup::Head => Some(config.principal_lr),
        })
        .collect()
}

/// Accuracy of a trained model on raw instances, indexed with the model's
/// own vocabulary.
pub fn evaluate_model(model: &WarrantModel, data: &[ArctInstance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation on no instances".into()));
    }
    let items: Vec<IndexedInstance> = data
        .iter()
        .map(|inst| IndexedInstance::from_arct(inst, &model.vocab))
        .collect();
    accuracy(model, &items)
}

fn accuracy<T: TrainTask>(model: &T, items: &[T::Item]) -> Result<f64> {
    let mut correct = 0usize;
    for item in items {
        if model.is_correct(item)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

struct LoopOutcome {
    best_dev: f64,
    epochs_run: usize,
    final_lr: f64,
    log: Vec<EpochLog>,
}

/// The annealed epoch loop shared by both tasks. Batch order reshuffles
/// every epoch from `seed + epoch`; the dropout stream is seeded once from
/// the run seed and advances across epochs; gradients are means over the
/// batch (a final short batch averages over its own size). Leaves the model
/// holding the parameters of the best dev epoch.
fn run_annealed<T: TrainTask>(
    model: &mut T,
    train: &[T::Item],
    dev: &[T::Item],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<LoopOutcome> {
    let groups = model.group_list();
    let base = base_rates(&groups, config);
    let init = model.snapshot();
    let mut opt = AdamState::new(&init);
    let mut best_params = init;
    let mut best_dev = f64::NEG_INFINITY;
    let mut dropout_rng = Rng::new(config.seed ^ GOLDEN);
    let mut lr = config.principal_lr;
    let mut history: Vec<f64> = Vec::new();
    let mut log: Vec<EpochLog> = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::new(config.seed.wrapping_add(epoch as u64)).shuffle(&mut order);
        let scale = lr / config.principal_lr;
        let rates: Vec<Option<f64>> = base.iter().map(|b| b.map(|r| r * scale)).collect();

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &idx in batch {
                let (loss, grads) =
                    model.loss_and_grads(&train[idx], config.dropout_p, &mut dropout_rng)?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss {loss} in epoch {epoch}"
                    )));
                }
                loss_sum += loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(sum) => {
                        for (a, g) in sum.iter_mut().zip(&grads) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            let mut mean = acc.expect("chunks are never empty");
            let inv = 1.0 / batch.len() as f64;
            for t in &mut mean {
                t.scale_assign(inv);
            }
            model.apply(&mut opt, &mean, &rates)?;
        }

        let train_loss = loss_sum / train.len() as f64;
        let dev_acc = accuracy(model, dev)?;
        history.push(dev_acc);
        if dev_acc > best_dev {
            best_dev = dev_acc;
            best_params = model.snapshot();
        }
        let line = EpochLog { epoch, train_loss, dev_acc, lr };
        on_epoch(&line);
        log.push(line);

        let (next_lr, stop) = anneal_update(lr, &history, config.anneal_factor, config.lr_floor);
        lr = next_lr;
        if stop {
            break;
        }
    }

    model.restore(&best_params);
    Ok(LoopOutcome { best_dev, epochs_run, final_lr: lr, log })
}

fn resolve_encoder(
    source: &EncoderSource,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<EncoderParams> {
    match source {
        EncoderSource::Random => init_encoder(config.d, config.input_dim, rng),
        EncoderSource::Path(path) => {
            let enc = load_encoder(path)?;
            if enc.d != config.d || enc.input_dim != config.input_dim {
                return Err(Error::Value(format!(
                    "encoder container {} holds d={}, input={} but the configuration wants d={}, input={}",
                    path.display(),
                    enc.d,
                    enc.input_dim,
                    config.d,
                    config.input_dim
                )));
            }
            Ok(enc)
        }
    }
}

fn build_embeddings(
    vocab: &Vocab,
    config: &TrainConfig,
    word_vectors: Option<&(Vec<String>, Tensor)>,
) -> Result<Tensor> {
    match word_vectors {
        Some((tokens, matrix)) => {
            if matrix.cols() != config.input_dim {
                return Err(Error::Value(format!(
                    "word vectors of dimension {} with configured input dimension {}",
                    matrix.cols(),
                    config.input_dim
                )));
            }
            embeddings_for_vocab(vocab, tokens, matrix, config.seed)
        }
        None => random_embeddings(vocab, config.input_dim, config.seed),
    }
}

/// Train a warrant model from raw splits.
///
/// The vocabulary covers every token of all three splits. Embedding rows
/// come from the pretrained vectors when given and from seeded noise
/// otherwise. The encoder starts fresh or from a saved container. Returns
/// the best-dev model with its accuracy summary and the full epoch log;
/// `on_epoch` sees each log line as it is produced.
pub fn train_model(
    kind: ModelKind,
    splits: &ArctSplits,
    config: &TrainConfig,
    encoder_source: &EncoderSource,
    word_vectors: Option<&(Vec<String>, Tensor)>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Empty("training split has no instances".into()));
    }
    if splits.dev.is_empty() {
        return Err(Error::Empty("dev split has no instances".into()));
    }
    if splits.test.is_empty() {
        return Err(Error::Empty("test split has no instances".into()));
    }

    let vocab = Vocab::build(
        arct_token_lists(&splits.train)
            .into_iter()
            .chain(arct_token_lists(&splits.dev))
            .chain(arct_token_lists(&splits.test)),
    );
    let embeddings = build_embeddings(&vocab, config, word_vectors)?;
    let mut init_rng = Rng::new(config.seed);
    let encoder = resolve_encoder(encoder_source, config, &mut init_rng)?;
    let head = init_warrant_head(kind, config.d, config.h, &mut init_rng)?;
    let mut model = WarrantModel::new(kind, vocab, embeddings, encoder, head, config.h)?;

    let train_idx: Vec<IndexedInstance> =
        splits.train.iter().map(|i| IndexedInstance::from_arct(i, &model.vocab)).collect();
    let dev_idx: Vec<IndexedInstance> =
        splits.dev.iter().map(|i| IndexedInstance::from_arct(i, &model.vocab)).collect();
    let test_idx: Vec<IndexedInstance> =
        splits.test.iter().map(|i| IndexedInstance::from_arct(i, &model.vocab)).collect();

    let outcome = run_annealed(&mut model, &train_idx, &dev_idx, config, &mut on_epoch)?;
    let train_acc = accuracy(&model, &train_idx)?;
    let test_acc = accuracy(&model, &test_idx)?;
    Ok(TrainOutcome {
        result: RunResult {
            seed: config.seed,
            train_acc,
            dev_acc: outcome.best_dev,
            test_acc,
            epochs_run: outcome.epochs_run,
            final_lr: outcome.final_lr,
        },
        model,
        log: outcome.log,
    })
}

/// Pretrain an encoder on the three-way inference task. `config.h` is the
/// head's hidden width. The returned outcome carries the whole model at its
/// best dev epoch; transfer saves and reuses only the encoder inside it.
pub fn pretrain_nli(
    splits: &NliSplits,
    config: &TrainConfig,
    word_vectors: Option<&(Vec<String>, Tensor)>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<NliOutcome> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Empty("pretraining split has no instances".into()));
    }
    if splits.dev.is_empty() {
        return Err(Error::Empty("pretraining dev split has no instances".into()));
    }

    let vocab = Vocab::build(
        nli_token_lists(&splits.train)
            .into_iter()
            .chain(nli_token_lists(&splits.dev)),
    );
    let embeddings = build_embeddings(&vocab, config, word_vectors)?;
    let mut init_rng = Rng::new(config.seed);
    let encoder = init_encoder(config.d, config.input_dim, &mut init_rng)?;
    let head = init_nli_head(config.d, config.h, &mut init_rng)?;
    let mut model = NliModel::new(vocab, embeddings, encoder, head, config.h)?;

    let train_idx: Vec<IndexedPair> =
        splits.train.iter().map(|p| IndexedPair::from_nli(p, &model.vocab)).collect();
    let dev_idx: Vec<IndexedPair> =
        splits.dev.iter().map(|p| IndexedPair::from_nli(p, &model.vocab)).collect();

    let outcome = run_annealed(&mut model, &train_idx, &dev_idx, config, &mut on_epoch)?;
    Ok(NliOutcome {
        model,
        dev_acc: outcome.best_dev,
        epochs_run: outcome.epochs_run,
        final_lr: outcome.final_lr,
        log: outcome.log,
    })
}
