//! The optimization loop: batching, epoch-level archetype refresh,
//! optimizer steps, divergence guarding, checkpointing, and the ablation
//! matrix.
//!
//! Training is fully deterministic for a fixed (seed, config, dataset):
//! the only randomness is parameter initialization and the per-epoch
//! shuffle, both driven by seeded ChaCha streams, and every reduction runs
//! in a fixed order.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;

pub use checkpoint::{read_train_state, write_train_state, BestMetric, TrainState, TRAIN_STATE_MAGIC};
pub use gradcheck::{tiny_model_gradcheck, GradCheckOutcome};
pub use optim::{OptimizerKind, OptimizerState};

use crate::config::ConfigError;
use crate::data::{windowize, DataError, Dataset, DatasetSplit};
use crate::encoder::{
    encode_batch, BatchEncoding, CheckpointError, EgtConfig, EncoderError, ModelDims, ModelParams,
    Neighborhood, NodeFeatureSnapshot, NormMode, ParamNodes,
};
use crate::eval::{encode_split, evaluate_topk, retrieval_metrics, EvalError, RetrievalMetrics};
use crate::graph::PositionalEncodings;
use crate::objectives::{
    alignment_loss_on_tape, compute_archetypes, cross_entropy_on_tape, gac_channel_loss_on_tape,
    gac_seq_loss_on_tape, ArchetypeBank, ClassEmbeddingTable, LossConfig, LossError,
};
use crate::tensor::{Matrix, NodeId, Tape, TensorError};

/// Momentum of the batchnorm running-statistics update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step} (non-finite loss or parameters)")]
    Diverged { step: u64 },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Flat per-channel features with a linear classifier (cross-entropy).
    Baseline,
    /// Alignment contrastive learning on flat features, no graph encoder.
    Nc,
    /// Graph-transformer encoder trained with cross-entropy only.
    EgtNc,
    /// Full method: encoder with alignment plus archetype contrastive loss.
    EgtGac,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Nc => "NC",
            Self::EgtNc => "EGT_NC",
            Self::EgtGac => "EGT_GAC",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text.to_ascii_lowercase().as_str() {
            "baseline" => Some(Self::Baseline),
            "nc" => Some(Self::Nc),
            "egt_nc" | "egt-nc" => Some(Self::EgtNc),
            "egt_gac" | "egt-gac" => Some(Self::EgtGac),
            _ => None,
        }
    }

    fn mix(&self) -> LossMix {
        match self {
            Self::Baseline | Self::EgtNc => LossMix { align: false, gac: false, ce: true },
            Self::Nc => LossMix { align: true, gac: false, ce: false },
            Self::EgtGac => LossMix { align: true, gac: true, ce: false },
        }
    }
}

/// Which loss terms participate in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossMix {
    pub align: bool,
    pub gac: bool,
    pub ce: bool,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub ablation: Ablation,
    pub loss: LossConfig,
    /// Samples per window; defaults to `samples / snapshots`.
    pub window_length: Option<usize>,
    /// Restrict attention support to adjacency neighbors plus self.
    pub masked_attention: bool,
    /// Dimension of the class-embedding space.
    pub align_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 42,
            ablation: Ablation::EgtGac,
            loss: LossConfig::default(),
            window_length: None,
            masked_attention: false,
            align_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.learning_rate < 0.0 || self.learning_rate.is_nan() {
            return Err(TrainError::InvalidConfig("learning_rate must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.align_dim == 0 {
            return Err(TrainError::InvalidConfig("align_dim must be at least 1".into()));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Everything the trainer reads but does not own.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a DatasetSplit,
    pub pe: &'a PositionalEncodings,
    pub neighborhood: &'a Neighborhood,
    pub table: &'a ClassEmbeddingTable,
}

/// Per-step loss record; disabled terms log as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_align: f64,
    pub loss_gac_seq: f64,
    pub loss_gac_ch: f64,
    pub loss_ce: f64,
}

/// Per-epoch evaluation record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub test_top1: f64,
}

/// Output of a training run.
#[derive(Debug)]
pub struct TrainRun {
    pub state: TrainState,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn subseed(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Composes the total objective on the tape from the batch encoding.
/// Returns the total node plus each enabled component's node.
pub struct BatchLoss {
    pub total: NodeId,
    pub align: Option<NodeId>,
    pub gac_seq: Option<NodeId>,
    pub gac_ch: Option<NodeId>,
    pub ce: Option<NodeId>,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_total_loss(
    tape: &mut Tape,
    nodes: &ParamNodes,
    encoding: &BatchEncoding,
    labels: &[usize],
    bank: Option<&ArchetypeBank>,
    table: &ClassEmbeddingTable,
    loss_cfg: &LossConfig,
    mix: LossMix,
) -> Result<BatchLoss, TrainError> {
    let mut parts: Vec<NodeId> = Vec::new();
    let mut align_node = None;
    let mut seq_node = None;
    let mut ch_node = None;
    let mut ce_node = None;

    if mix.align {
        let align = alignment_loss_on_tape(
            tape,
            &encoding.sequences,
            labels,
            table,
            loss_cfg.tau_align,
            (nodes.align_w, nodes.align_b),
        )?;
        align_node = Some(align);
        parts.push(tape.scale(align, loss_cfg.beta_align)?);
    }
    if mix.gac {
        let bank = bank.ok_or_else(|| {
            TrainError::InvalidConfig("archetype objective requires a bank".into())
        })?;
        let seq = gac_seq_loss_on_tape(tape, &encoding.sequences, labels, bank, loss_cfg.tau1)?;
        let ch = gac_channel_loss_on_tape(
            tape,
            &encoding.snapshots,
            labels,
            bank,
            (nodes.f1_w, nodes.f1_b),
            (nodes.f2_w, nodes.f2_b),
            loss_cfg.tau2,
        )?;
        seq_node = Some(seq);
        ch_node = Some(ch);
        let seq_scaled = tape.scale(seq, loss_cfg.alpha)?;
        let ch_scaled = tape.scale(ch, 1.0 - loss_cfg.alpha)?;
        let gac = tape.add(seq_scaled, ch_scaled)?;
        parts.push(tape.scale(gac, loss_cfg.beta_gac)?);
    }
    if mix.ce {
        let classifier = nodes.classifier.ok_or_else(|| {
            TrainError::InvalidConfig("cross-entropy objective requires a classifier head".into())
        })?;
        let stacked = tape.concat_rows(&encoding.sequences)?;
        let logits = tape.matmul_nt(stacked, classifier)?;
        let ce = cross_entropy_on_tape(tape, logits, labels)?;
        ce_node = Some(ce);
        parts.push(ce);
    }
    let mut total = *parts
        .first()
        .ok_or_else(|| TrainError::InvalidConfig("no loss terms enabled".into()))?;
    for part in &parts[1..] {
        total = tape.add(total, *part)?;
    }
    Ok(BatchLoss { total, align: align_node, gac_seq: seq_node, gac_ch: ch_node, ce: ce_node })
}

/// Stateful trainer with explicit step control. Epoch boundaries (archetype
/// refresh plus reshuffle) happen lazily inside [`Trainer::step`].
pub struct Trainer<'a> {
    inputs: TrainInputs<'a>,
    config: TrainConfig,
    egt: EgtConfig,
    mix: LossMix,
    window_length: usize,
    /// Windowized snapshots for every dataset sequence.
    snapshots: Vec<Vec<NodeFeatureSnapshot>>,
    rng: ChaCha8Rng,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        inputs: TrainInputs<'a>,
        egt: EgtConfig,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        egt.validate().map_err(TrainError::Encoder)?;
        if matches!(config.ablation, Ablation::Baseline | Ablation::Nc) {
            return Err(TrainError::InvalidConfig(
                "baseline and NC rows bypass the encoder; use run_ablation".into(),
            ));
        }
        let mix = config.ablation.mix();
        let n_classes = inputs.dataset.n_classes();
        let dims = ModelDims {
            config: egt,
            align_dim: config.align_dim,
            n_classes,
            with_classifier: mix.ce,
        };
        let params = ModelParams::init(dims, config.seed)?;
        let shapes: Vec<(usize, usize)> =
            params.tensors().iter().map(|(_, m)| m.shape()).collect();
        let optimizer = OptimizerState::new(config.optimizer, &shapes);
        let rng_seed = subseed(config.seed, 5);
        let state = TrainState {
            params,
            optimizer,
            epoch: 0,
            step: 0,
            rng_seed,
            rng_word_pos: 0,
            epoch_order: Vec::new(),
            cursor: 0,
            bank: None,
            best: None,
        };
        Self::with_state(inputs, egt, config, state)
    }

    /// Resumes from a checkpointed state.
    pub fn from_state(
        inputs: TrainInputs<'a>,
        config: TrainConfig,
        state: TrainState,
    ) -> Result<Self, TrainError> {
        let egt = state.params.dims.config;
        Self::with_state(inputs, egt, config, state)
    }

    fn with_state(
        inputs: TrainInputs<'a>,
        egt: EgtConfig,
        config: TrainConfig,
        state: TrainState,
    ) -> Result<Self, TrainError> {
        if inputs.split.train.is_empty() {
            return Err(TrainError::InvalidConfig("empty train split".into()));
        }
        let window_length = match config.window_length {
            Some(w) => w,
            None => inputs.dataset.samples / egt.snapshots,
        };
        if window_length == 0 || window_length * egt.snapshots > inputs.dataset.samples {
            return Err(TrainError::InvalidConfig(format!(
                "{} windows of {} samples exceed sequence length {}",
                egt.snapshots, window_length, inputs.dataset.samples
            )));
        }
        if inputs.pe.n_nodes() != inputs.dataset.channels {
            return Err(TrainError::InvalidConfig(format!(
                "positional encodings cover {} nodes, dataset has {} channels",
                inputs.pe.n_nodes(),
                inputs.dataset.channels
            )));
        }
        let snapshots = inputs
            .dataset
            .sequences
            .iter()
            .map(|seq| windowize(seq, egt.snapshots, window_length))
            .collect::<Result<Vec<_>, _>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
        rng.set_word_pos(state.rng_word_pos);
        let mix = config.ablation.mix();
        Ok(Self { inputs, config, egt, mix, window_length, snapshots, rng, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    /// True when the epoch in progress is exhausted (the next step starts a
    /// new one).
    pub fn at_epoch_boundary(&self) -> bool {
        self.state.cursor as usize >= self.state.epoch_order.len()
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.inputs.split.train.len();
        n.div_ceil(self.config.batch_size)
    }

    fn start_epoch(&mut self) -> Result<(), TrainError> {
        if self.mix.gac {
            let reps = self.encode_indices_eval(&self.inputs.split.train)?;
            let pairs: Vec<(Vec<f64>, usize)> =
                reps.into_iter().map(|e| (e.sequence, e.label)).collect();
            let bank =
                compute_archetypes(&pairs, self.inputs.dataset.n_classes(), self.state.epoch)?;
            self.state.bank = Some(bank);
        }
        let mut order: Vec<u32> = self.inputs.split.train.iter().map(|&i| i as u32).collect();
        order.shuffle(&mut self.rng);
        self.state.rng_word_pos = self.rng.get_word_pos();
        self.state.epoch_order = order;
        self.state.cursor = 0;
        Ok(())
    }

    fn encode_indices_eval(
        &self,
        indices: &[usize],
    ) -> Result<Vec<crate::eval::EncodedSequence>, TrainError> {
        Ok(encode_split(
            &self.state.params,
            self.inputs.pe,
            self.inputs.neighborhood,
            self.inputs.dataset,
            indices,
            self.window_length,
        )?)
    }

    /// Runs one mini-batch: forward, total loss, backward, optimizer step,
    /// and running-statistics update. Non-finite losses or parameters abort
    /// with the pre-step state intact.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        if self.at_epoch_boundary() {
            if !self.state.epoch_order.is_empty() {
                self.state.epoch += 1;
            }
            self.start_epoch()?;
        }
        let start = self.state.cursor as usize;
        let end = (start + self.config.batch_size).min(self.state.epoch_order.len());
        let batch_indices: Vec<usize> =
            self.state.epoch_order[start..end].iter().map(|&i| i as usize).collect();
        let labels: Vec<usize> =
            batch_indices.iter().map(|&i| self.inputs.dataset.sequences[i].label).collect();
        let batch_snaps: Vec<&[NodeFeatureSnapshot]> =
            batch_indices.iter().map(|&i| self.snapshots[i].as_slice()).collect();

        let step_id = self.state.step + 1;
        let diverged = |e: TensorError| match e {
            TensorError::LogDomain { .. } | TensorError::NonFinite { .. } => {
                TrainError::Diverged { step: step_id }
            }
            other => TrainError::Tensor(other),
        };

        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &self.state.params);
        let encoding = encode_batch(
            &mut tape,
            &nodes,
            &self.state.params,
            &batch_snaps,
            self.inputs.pe,
            &self.egt,
            self.inputs.neighborhood,
            NormMode::Train,
        )
        .map_err(|e| match e {
            EncoderError::Tensor(t) => diverged(t),
            other => TrainError::Encoder(other),
        })?;
        let loss = batch_total_loss(
            &mut tape,
            &nodes,
            &encoding,
            &labels,
            self.state.bank.as_ref(),
            self.inputs.table,
            &self.config.loss,
            self.mix,
        )
        .map_err(|e| match e {
            TrainError::Tensor(t) => diverged(t),
            TrainError::Loss(LossError::Tensor(t)) => diverged(t),
            other => other,
        })?;
        let total_value = tape.value(loss.total).at(0, 0);
        if !total_value.is_finite() {
            return Err(TrainError::Diverged { step: step_id });
        }

        let grads = tape.backward(loss.total)?;
        let ids = nodes.ids();
        let pre_params = self.state.params.clone();
        let pre_optimizer = self.state.optimizer.clone();
        {
            let grad_refs: Vec<Option<&Matrix>> = ids.iter().map(|&id| grads.get(id)).collect();
            let mut tensors = self.state.params.tensors_mut();
            let mut refs: Vec<&mut Matrix> = tensors.iter_mut().map(|m| &mut **m).collect();
            self.state.optimizer.step(&mut refs, &grad_refs, self.config.learning_rate);
        }
        let finite = self.state.params.tensors().iter().all(|(_, m)| m.all_finite());
        if !finite {
            self.state.params = pre_params;
            self.state.optimizer = pre_optimizer;
            return Err(TrainError::Diverged { step: step_id });
        }

        // Running statistics take the batch moments recorded on the tape,
        // in (layer, bn1, bn2) execution order.
        let mut bn_iter = encoding.bn_nodes.iter();
        for layer in self.state.params.layers.iter_mut() {
            for bn in [&mut layer.bn1, &mut layer.bn2] {
                if let Some(&node) = bn_iter.next() {
                    let (mean, var) = tape.batch_stats(node).expect("train-mode bn node");
                    bn.update_running(mean, var, BN_MOMENTUM);
                }
            }
        }

        self.state.cursor = end as u64;
        self.state.step = step_id;
        let value = |n: Option<NodeId>| n.map_or(0.0, |n| tape.value(n).at(0, 0));
        Ok(StepRecord {
            step: step_id,
            loss_total: total_value,
            loss_align: value(loss.align),
            loss_gac_seq: value(loss.gac_seq),
            loss_gac_ch: value(loss.gac_ch),
            loss_ce: value(loss.ce),
        })
    }

    /// Test-split top-1: zero-shot ranking for alignment objectives,
    /// classifier accuracy for cross-entropy ones.
    pub fn evaluate_test_top1(&self) -> Result<f64, TrainError> {
        let encoded = self.encode_indices_eval(&self.inputs.split.test)?;
        if encoded.is_empty() {
            return Err(TrainError::Eval(EvalError::EmptySplit));
        }
        if self.mix.ce {
            let classifier = self
                .state
                .params
                .classifier
                .as_ref()
                .ok_or_else(|| TrainError::InvalidConfig("classifier head missing".into()))?;
            let mut correct = 0usize;
            for e in &encoded {
                let mut best = (0usize, f64::NEG_INFINITY);
                for r in 0..classifier.rows() {
                    let score: f64 =
                        classifier.row(r).iter().zip(&e.sequence).map(|(w, v)| w * v).sum();
                    if score > best.1 {
                        best = (r, score);
                    }
                }
                if best.0 == e.label {
                    correct += 1;
                }
            }
            Ok(correct as f64 / encoded.len() as f64)
        } else {
            let report = evaluate_topk(
                &encoded,
                &self.state.params.align_w,
                &self.state.params.align_b,
                self.inputs.table,
                &[1],
            )?;
            Ok(report.per_k[0].1)
        }
    }
}

/// Runs `config.epochs` epochs from scratch, logging per-step losses and
/// per-epoch test top-1. With `out_dir` set, writes `loss.csv`,
/// `epochs.csv`, `model.ckpt`, and `state.ckpt` there (and
/// `diverged_state.ckpt` with the last good state if training diverges).
pub fn train(
    inputs: TrainInputs<'_>,
    egt: EgtConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainRun, TrainError> {
    let mut trainer = Trainer::new(inputs, egt, config.clone())?;
    let run = drive(&mut trainer, config.epochs, out_dir);
    finalize(trainer, run, out_dir)
}

/// Continues a checkpointed run for `extra_epochs` more epochs.
pub fn continue_training(
    inputs: TrainInputs<'_>,
    config: &TrainConfig,
    state: TrainState,
    extra_epochs: usize,
    out_dir: Option<&Path>,
) -> Result<TrainRun, TrainError> {
    let mut trainer = Trainer::from_state(inputs, config.clone(), state)?;
    let run = drive(&mut trainer, extra_epochs, out_dir);
    finalize(trainer, run, out_dir)
}

fn drive(
    trainer: &mut Trainer<'_>,
    epochs: usize,
    out_dir: Option<&Path>,
) -> Result<(Vec<StepRecord>, Vec<EpochRecord>), TrainError> {
    // The loss curve is appended line by line as steps complete, so the
    // CSV survives a divergence abort.
    let mut loss_writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("loss.csv"))?);
            writeln!(w, "step,loss_total,loss_align,loss_gac_seq,loss_gac_ch,loss_ce")?;
            Some(w)
        }
        None => None,
    };
    let append = |w: &mut Option<std::io::BufWriter<std::fs::File>>,
                  r: &StepRecord|
     -> std::io::Result<()> {
        if let Some(w) = w {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step, r.loss_total, r.loss_align, r.loss_gac_seq, r.loss_gac_ch, r.loss_ce
            )?;
        }
        Ok(())
    };
    let steps_per_epoch = trainer.steps_per_epoch();
    let mut steps = Vec::with_capacity(epochs * steps_per_epoch);
    let mut epoch_records = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        for _ in 0..steps_per_epoch {
            match trainer.step() {
                Ok(record) => {
                    append(&mut loss_writer, &record)?;
                    steps.push(record);
                }
                Err(TrainError::Diverged { step }) => {
                    if let Some(w) = &mut loss_writer {
                        w.flush()?;
                    }
                    if let Some(dir) = out_dir {
                        let mut w = std::io::BufWriter::new(std::fs::File::create(
                            dir.join("diverged_state.ckpt"),
                        )?);
                        write_train_state(&mut w, trainer.state())?;
                        w.flush()?;
                    }
                    return Err(TrainError::Diverged { step });
                }
                Err(other) => return Err(other),
            }
        }
        if let Some(w) = &mut loss_writer {
            w.flush()?;
        }
        let top1 = trainer.evaluate_test_top1()?;
        let epoch = trainer.state().epoch;
        epoch_records.push(EpochRecord { epoch, test_top1: top1 });
        let improved = trainer.state().best.is_none_or(|b| top1 > b.top1);
        if improved {
            trainer.state.best = Some(BestMetric { epoch, top1 });
        }
    }
    if let Some(w) = &mut loss_writer {
        w.flush()?;
    }
    Ok((steps, epoch_records))
}

fn finalize(
    trainer: Trainer<'_>,
    run: Result<(Vec<StepRecord>, Vec<EpochRecord>), TrainError>,
    out_dir: Option<&Path>,
) -> Result<TrainRun, TrainError> {
    let (steps, epochs) = run?;
    let state = trainer.into_state();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_epoch_csv(&epochs, &mut std::fs::File::create(dir.join("epochs.csv"))?)?;
        let mut mw = std::io::BufWriter::new(std::fs::File::create(dir.join("model.ckpt"))?);
        crate::encoder::write_model(&mut mw, &state.params)?;
        mw.flush()?;
        let mut sw = std::io::BufWriter::new(std::fs::File::create(dir.join("state.ckpt"))?);
        write_train_state(&mut sw, &state)?;
        sw.flush()?;
    }
    Ok(TrainRun { state, steps, epochs })
}

/// Writes the per-step loss curve CSV.
pub fn write_loss_csv(steps: &[StepRecord], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "step,loss_total,loss_align,loss_gac_seq,loss_gac_ch,loss_ce")?;
    for s in steps {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.step, s.loss_total, s.loss_align, s.loss_gac_seq, s.loss_gac_ch, s.loss_ce
        )?;
    }
    Ok(())
}

pub fn write_epoch_csv(epochs: &[EpochRecord], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,test_top1")?;
    for e in epochs {
        writeln!(w, "{},{}", e.epoch, e.test_top1)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablation matrix.
// ---------------------------------------------------------------------------

/// Metrics of one ablation configuration.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub overall: RetrievalMetrics,
    /// Per test subject, ascending id.
    pub per_subject: Vec<(usize, RetrievalMetrics)>,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "config,subject,map,rank1")?;
        for row in &self.rows {
            writeln!(w, "{},all,{},{}", row.name, row.overall.map, row.overall.rank1)?;
            for (subject, m) in &row.per_subject {
                writeln!(w, "{},{},{},{}", row.name, subject, m.map, m.rank1)?;
            }
        }
        Ok(())
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10} {:>8} {:>8}   per-subject (mAP/R1)\n", "config", "mAP", "R1"));
        for row in &self.rows {
            let per: Vec<String> = row
                .per_subject
                .iter()
                .map(|(s, m)| format!("s{}: {:.3}/{:.3}", s, m.map, m.rank1))
                .collect();
            out.push_str(&format!(
                "{:<10} {:>8.4} {:>8.4}   {}\n",
                row.name,
                row.overall.map,
                row.overall.rank1,
                per.join("  ")
            ));
        }
        out
    }
}

/// Flat per-channel features: the windowized statistics concatenated over
/// windows and channels (`f * J * 3` values per sequence).
pub fn flat_features(
    dataset: &Dataset,
    indices: &[usize],
    snapshots: usize,
    window_length: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let snaps = windowize(&dataset.sequences[idx], snapshots, window_length)?;
        let mut flat = Vec::with_capacity(snapshots * dataset.channels * 3);
        for snap in &snaps {
            flat.extend_from_slice(snap.features.data());
        }
        out.push(flat);
    }
    Ok(out)
}

fn init_uniform(rows: usize, cols: usize, fan_in: usize, seed: u64) -> Matrix {
    use rand::distributions::{Distribution, Uniform};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
}

/// Trains a linear classifier on fixed flat features with cross-entropy.
fn train_flat_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    config: &TrainConfig,
) -> Result<Matrix, TrainError> {
    let dim = features[0].len();
    let mut weights = init_uniform(n_classes, dim, dim, subseed(config.seed, 8));
    let mut optimizer = OptimizerState::new(config.optimizer, &[weights.shape()]);
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, 9));
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x = Matrix::from_fn(chunk.len(), dim, |i, j| features[chunk[i]][j]);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let w = tape.param(weights.clone());
            let xc = tape.constant(x);
            let logits = tape.matmul_nt(xc, w)?;
            let loss = cross_entropy_on_tape(&mut tape, logits, &batch_labels)?;
            let grads = tape.backward(loss)?;
            let grad = grads.get(w);
            optimizer.step(&mut [&mut weights], &[grad], config.learning_rate);
        }
    }
    Ok(weights)
}

/// Trains an alignment projection head on fixed flat features.
fn train_flat_alignment(
    features: &[Vec<f64>],
    labels: &[usize],
    table: &ClassEmbeddingTable,
    config: &TrainConfig,
) -> Result<(Matrix, Matrix), TrainError> {
    let dim = features[0].len();
    let d_e = table.dim();
    let mut proj_w = init_uniform(d_e, dim, dim, subseed(config.seed, 10));
    let mut proj_b = init_uniform(1, d_e, dim, subseed(config.seed, 11));
    let shapes = [proj_w.shape(), proj_b.shape()];
    let mut optimizer = OptimizerState::new(config.optimizer, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, 12));
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let wn = tape.param(proj_w.clone());
            let bn = tape.param(proj_b.clone());
            let seq_nodes: Vec<NodeId> = chunk
                .iter()
                .map(|&i| tape.constant(Matrix::row_vector(features[i].clone()).expect("finite")))
                .collect();
            let loss = alignment_loss_on_tape(
                &mut tape,
                &seq_nodes,
                &batch_labels,
                table,
                config.loss.tau_align,
                (wn, bn),
            )?;
            let grads = tape.backward(loss)?;
            let gw = grads.get(wn);
            let gb = grads.get(bn);
            optimizer.step(&mut [&mut proj_w, &mut proj_b], &[gw, gb], config.learning_rate);
        }
    }
    Ok((proj_w, proj_b))
}

fn per_subject_metrics(
    features: &[Vec<f64>],
    labels: &[usize],
    subjects: &[usize],
) -> Result<(RetrievalMetrics, Vec<(usize, RetrievalMetrics)>), TrainError> {
    let overall = retrieval_metrics(features, labels)?;
    let mut subject_ids: Vec<usize> = subjects.to_vec();
    subject_ids.sort_unstable();
    subject_ids.dedup();
    let mut per = Vec::with_capacity(subject_ids.len());
    for s in subject_ids {
        let mut fs = Vec::new();
        let mut ls = Vec::new();
        for ((f, &l), &subj) in features.iter().zip(labels).zip(subjects) {
            if subj == s {
                fs.push(f.clone());
                ls.push(l);
            }
        }
        per.push((s, retrieval_metrics(&fs, &ls)?));
    }
    Ok((overall, per))
}

/// Runs the four ablation rows on one split and reports leave-one-out
/// retrieval metrics of each row's test features.
pub fn run_ablation(
    inputs: TrainInputs<'_>,
    egt: EgtConfig,
    base: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<AblationTable, TrainError> {
    base.validate()?;
    let window_length = match base.window_length {
        Some(w) => w,
        None => inputs.dataset.samples / egt.snapshots,
    };
    let train_flat = flat_features(inputs.dataset, &inputs.split.train, egt.snapshots, window_length)?;
    let test_flat = flat_features(inputs.dataset, &inputs.split.test, egt.snapshots, window_length)?;
    let train_labels: Vec<usize> =
        inputs.split.train.iter().map(|&i| inputs.dataset.sequences[i].label).collect();
    let test_labels: Vec<usize> =
        inputs.split.test.iter().map(|&i| inputs.dataset.sequences[i].label).collect();
    let test_subjects: Vec<usize> =
        inputs.split.test.iter().map(|&i| inputs.dataset.sequences[i].subject).collect();
    let n_classes = inputs.dataset.n_classes();

    let mut rows = Vec::with_capacity(4);

    // Baseline: the classifier trains on the fixed flat features; retrieval
    // sees those same raw features.
    let mut baseline_cfg = base.clone();
    baseline_cfg.ablation = Ablation::Baseline;
    let _ = train_flat_classifier(&train_flat, &train_labels, n_classes, &baseline_cfg)?;
    let (overall, per_subject) = per_subject_metrics(&test_flat, &test_labels, &test_subjects)?;
    rows.push(AblationRow { name: Ablation::Baseline.name(), overall, per_subject });

    // NC: alignment-trained projection of the flat features.
    let mut nc_cfg = base.clone();
    nc_cfg.ablation = Ablation::Nc;
    let (proj_w, proj_b) = train_flat_alignment(&train_flat, &train_labels, inputs.table, &nc_cfg)?;
    let projected: Vec<Vec<f64>> = test_flat
        .iter()
        .map(|f| crate::eval::project_feature(f, &proj_w, &proj_b))
        .collect();
    let (overall, per_subject) = per_subject_metrics(&projected, &test_labels, &test_subjects)?;
    rows.push(AblationRow { name: Ablation::Nc.name(), overall, per_subject });

    // Encoder rows.
    for ablation in [Ablation::EgtNc, Ablation::EgtGac] {
        let mut cfg = base.clone();
        cfg.ablation = ablation;
        let sub_dir = out_dir.map(|d| d.join(ablation.name().to_ascii_lowercase()));
        let run = train(inputs, egt, &cfg, sub_dir.as_deref())?;
        let encoded = encode_split(
            &run.state.params,
            inputs.pe,
            inputs.neighborhood,
            inputs.dataset,
            &inputs.split.test,
            window_length,
        )?;
        let features: Vec<Vec<f64>> = encoded.iter().map(|e| e.sequence.clone()).collect();
        let (overall, per_subject) = per_subject_metrics(&features, &test_labels, &test_subjects)?;
        rows.push(AblationRow { name: ablation.name(), overall, per_subject });
    }

    let table = AblationTable { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        table.write_csv(std::fs::File::create(dir.join("ablation.csv"))?)?;
    }
    Ok(table)
}
