//! End-to-end gradient verification: analytic gradients of the total loss
//! on a small but complete model (every parameter tensor exercised)
//! against central finite differences.

use crate::data::{generate_synthetic_dataset, windowize, SynthConfig};
use crate::encoder::{
    encode_batch, EgtConfig, ModelDims, ModelParams, Neighborhood, NodeFeatureSnapshot, NormMode,
    ParamNodes,
};
use crate::graph::{
    build_spatial_adjacency, normalized_laplacian, positional_encodings, ElectrodeLayout,
    PositionalEncodings, SpatialRule,
};
use crate::objectives::{compute_archetypes, ArchetypeBank, ClassEmbeddingTable, LossConfig};
use crate::tensor::{compare_gradients, finite_diff_gradient, GradCheckReport, Tape};
use crate::trainer::{batch_total_loss, LossMix, TrainError};

/// Everything the check produced, including the worst offender for
/// diagnostics.
#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub report: GradCheckReport,
    pub n_params: usize,
    pub loss_value: f64,
    pub worst_tensor: String,
    pub elapsed: std::time::Duration,
}

struct TinyProblem {
    params: ModelParams,
    pe: PositionalEncodings,
    snapshots: Vec<Vec<NodeFeatureSnapshot>>,
    labels: Vec<usize>,
    bank: ArchetypeBank,
    table: ClassEmbeddingTable,
    loss_cfg: LossConfig,
}

fn tiny_problem(seed: u64) -> Result<TinyProblem, TrainError> {
    let egt = EgtConfig {
        embed_dim: 6,
        n_heads: 2,
        n_layers: 2,
        pe_dim: 2,
        head_dim: 3,
        snapshots: 2,
    };
    let dims = ModelDims { config: egt, align_dim: 4, n_classes: 3, with_classifier: true };
    let params = ModelParams::init(dims, seed)?;

    let layout = ElectrodeLayout::synthetic_cap(4);
    let adjacency = build_spatial_adjacency(&layout, SpatialRule::Knn(2))?;
    let laplacian = normalized_laplacian(&adjacency)?;
    let pe = positional_encodings(&laplacian, 2)?;

    let synth = SynthConfig {
        subjects: 1,
        classes: 3,
        sequences_per: 2,
        channels: 4,
        samples: 32,
        noise_sigma: 0.5,
        seed: seed ^ 0x5EED,
        subject_shift: 0.1,
        sample_rate: 32.0,
    };
    let dataset = generate_synthetic_dataset(&synth, &layout)?;
    let snapshots: Vec<Vec<NodeFeatureSnapshot>> = dataset
        .sequences
        .iter()
        .map(|s| windowize(s, egt.snapshots, 16))
        .collect::<Result<_, _>>()?;
    let labels: Vec<usize> = dataset.sequences.iter().map(|s| s.label).collect();

    // The archetype bank is a constant of the check: gradients never flow
    // into it, so it is frozen from the initial parameters.
    let reps: Vec<(Vec<f64>, usize)> = dataset
        .sequences
        .iter()
        .zip(&snapshots)
        .map(|(seq, snaps)| {
            crate::encoder::encode_sequence(snaps, &pe, &params, &egt, &Neighborhood::Full)
                .map(|rep| (rep.sequence, seq.label))
        })
        .collect::<Result<_, _>>()?;
    let bank = compute_archetypes(&reps, 3, 0)?;
    let table = ClassEmbeddingTable::seeded(3, 4, seed ^ 0xA11C);
    Ok(TinyProblem {
        params,
        pe,
        snapshots,
        labels,
        bank,
        table,
        loss_cfg: LossConfig::default(),
    })
}

fn total_loss_and_grads(
    problem: &TinyProblem,
    params: &ModelParams,
    want_grads: bool,
) -> Result<(f64, Option<Vec<f64>>), TrainError> {
    let egt = params.dims.config;
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let batch: Vec<&[NodeFeatureSnapshot]> =
        problem.snapshots.iter().map(|s| s.as_slice()).collect();
    let encoding = encode_batch(
        &mut tape,
        &nodes,
        params,
        &batch,
        &problem.pe,
        &egt,
        &Neighborhood::Full,
        NormMode::Train,
    )?;
    let mix = LossMix { align: true, gac: true, ce: true };
    let loss = batch_total_loss(
        &mut tape,
        &nodes,
        &encoding,
        &problem.labels,
        Some(&problem.bank),
        &problem.table,
        &problem.loss_cfg,
        mix,
    )?;
    let value = tape.value(loss.total).at(0, 0);
    if !want_grads {
        return Ok((value, None));
    }
    let grads = tape.backward(loss.total)?;
    let mut flat = Vec::with_capacity(params.n_trainable());
    for (id, (_, tensor)) in nodes.ids().iter().zip(params.tensors()) {
        match grads.get(*id) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat_n(0.0, tensor.len())),
        }
    }
    Ok((value, Some(flat)))
}

/// Runs the finite-difference check on the complete tiny model (4 nodes,
/// 6-dim embeddings, 2 heads, 2 layers, 2 snapshots, 3 classes) with all
/// loss terms enabled. Tolerances: relative 1e-4, absolute 1e-7 where
/// gradients are below 1e-3.
pub fn tiny_model_gradcheck(seed: u64, h: f64) -> Result<GradCheckOutcome, TrainError> {
    let start = std::time::Instant::now();
    let problem = tiny_problem(seed)?;
    let theta = problem.params.flatten_trainable();
    let (loss_value, analytic) = total_loss_and_grads(&problem, &problem.params, true)?;
    let analytic = analytic.expect("gradients requested");

    let mut scratch = problem.params.clone();
    let numeric = finite_diff_gradient(
        |flat| {
            scratch.set_from_flat(flat);
            total_loss_and_grads(&problem, &scratch, false)
                .expect("forward evaluation")
                .0
        },
        &theta,
        h,
    );
    let report = compare_gradients(&analytic, &numeric, 1e-4, 1e-7, 1e-3);
    let worst_tensor = tensor_of_flat_index(&problem.params, report.worst_index);
    Ok(GradCheckOutcome {
        report,
        n_params: theta.len(),
        loss_value,
        worst_tensor,
        elapsed: start.elapsed(),
    })
}

fn tensor_of_flat_index(params: &ModelParams, flat_index: usize) -> String {
    let mut offset = 0;
    for (name, tensor) in params.tensors() {
        if flat_index < offset + tensor.len() {
            return format!("{name}[{}]", flat_index - offset);
        }
        offset += tensor.len();
    }
    "<out of range>".to_string()
}
