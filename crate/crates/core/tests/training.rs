//! Training-loop behavior: determinism, zero-learning-rate fixpoints,
//! checkpoint resume, the divergence guard, and loss descent on a small
//! synthetic problem.

use egt_core::data::{generate_synthetic_dataset, make_split, Protocol, SynthConfig};
use egt_core::encoder::{EgtConfig, Neighborhood};
use egt_core::graph::{
    build_spatial_adjacency, normalized_laplacian, positional_encodings, ElectrodeLayout,
    SpatialRule,
};
use egt_core::objectives::ClassEmbeddingTable;
use egt_core::trainer::{
    read_train_state, train, write_train_state, Ablation, TrainConfig, TrainError, TrainInputs,
    Trainer,
};

struct Fixture {
    dataset: egt_core::data::Dataset,
    split: egt_core::data::DatasetSplit,
    pe: egt_core::graph::PositionalEncodings,
    table: ClassEmbeddingTable,
}

fn small_fixture() -> Fixture {
    let synth = SynthConfig {
        subjects: 2,
        classes: 3,
        sequences_per: 8,
        channels: 8,
        samples: 64,
        noise_sigma: 0.4,
        seed: 11,
        subject_shift: 0.2,
        sample_rate: 64.0,
    };
    let layout = ElectrodeLayout::synthetic_cap(synth.channels);
    let dataset = generate_synthetic_dataset(&synth, &layout).unwrap();
    let split = make_split(&dataset, Protocol::SubjectDependent { subject: 0 }, 11).unwrap();
    let adjacency = build_spatial_adjacency(&layout, SpatialRule::Knn(3)).unwrap();
    let laplacian = normalized_laplacian(&adjacency).unwrap();
    let pe = positional_encodings(&laplacian, 4).unwrap();
    let table = ClassEmbeddingTable::seeded(3, 8, 77);
    Fixture { dataset, split, pe, table }
}

fn small_egt() -> EgtConfig {
    EgtConfig { embed_dim: 16, n_heads: 2, n_layers: 1, pe_dim: 4, head_dim: 8, snapshots: 2 }
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, align_dim: 8, seed: 5, ..TrainConfig::default() }
}

impl Fixture {
    fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs {
            dataset: &self.dataset,
            split: &self.split,
            pe: &self.pe,
            neighborhood: &Neighborhood::Full,
            table: &self.table,
        }
    }
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let fx = small_fixture();
    let mut cfg = small_config(2);
    cfg.learning_rate = 0.0;
    let mut trainer = Trainer::new(fx.inputs(), small_egt(), cfg.clone()).unwrap();
    let before = trainer.state().params.flatten_trainable();
    for _ in 0..2 * trainer.steps_per_epoch() {
        trainer.step().unwrap();
    }
    let after = trainer.state().params.flatten_trainable();
    assert_eq!(before, after);
}

#[test]
fn loss_decreases_within_first_epochs() {
    let fx = small_fixture();
    let run = train(fx.inputs(), small_egt(), &small_config(3), None).unwrap();
    let first = run.steps.first().unwrap().loss_total;
    let last = run.steps.last().unwrap().loss_total;
    assert!(
        last < first,
        "total loss should drop: first {first}, last {last}"
    );
}

#[test]
fn same_seed_gives_bit_identical_curves() {
    let fx = small_fixture();
    let a = train(fx.inputs(), small_egt(), &small_config(2), None).unwrap();
    let b = train(fx.inputs(), small_egt(), &small_config(2), None).unwrap();
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.state.params, b.state.params);

    let mut other = small_config(2);
    other.seed = 6;
    let c = train(fx.inputs(), small_egt(), &other, None).unwrap();
    assert_ne!(a.steps, c.steps);
}

#[test]
fn checkpoint_round_trip_resumes_bit_identically() {
    let fx = small_fixture();
    let cfg = small_config(2);

    // Uninterrupted reference: 4 steps then 3 more.
    let mut uninterrupted = Trainer::new(fx.inputs(), small_egt(), cfg.clone()).unwrap();
    for _ in 0..4 {
        uninterrupted.step().unwrap();
    }
    let mut reference = Vec::new();
    for _ in 0..3 {
        reference.push(uninterrupted.step().unwrap());
    }

    // Same 4 steps, checkpoint through bytes, resume, 3 more steps.
    let mut first = Trainer::new(fx.inputs(), small_egt(), cfg.clone()).unwrap();
    for _ in 0..4 {
        first.step().unwrap();
    }
    let mut buf = Vec::new();
    write_train_state(&mut buf, first.state()).unwrap();
    let restored = read_train_state(&mut buf.as_slice()).unwrap();
    assert_eq!(restored, *first.state());

    let mut resumed = Trainer::from_state(fx.inputs(), cfg, restored).unwrap();
    for expected in &reference {
        let record = resumed.step().unwrap();
        assert_eq!(record, *expected);
    }
    assert_eq!(resumed.state().params, uninterrupted.state().params);
    assert_eq!(resumed.state().optimizer, uninterrupted.state().optimizer);
}

#[test]
fn divergence_guard_aborts_and_keeps_last_good_state() {
    let fx = small_fixture();
    let mut cfg = small_config(4);
    cfg.learning_rate = 1e18;
    let mut trainer = Trainer::new(fx.inputs(), small_egt(), cfg).unwrap();
    let mut last_good = trainer.state().params.clone();
    let mut diverged_at = None;
    for _ in 0..16 {
        match trainer.step() {
            Ok(_) => last_good = trainer.state().params.clone(),
            Err(TrainError::Diverged { step }) => {
                diverged_at = Some(step);
                break;
            }
            Err(other) => panic!("unexpected error: {other}"),
        }
    }
    let step = diverged_at.expect("a 1e18 learning rate must diverge");
    assert!(step >= 1);
    // The retained state is the last finite one.
    assert_eq!(trainer.state().params, last_good);
    assert!(trainer.state().params.tensors().iter().all(|(_, m)| m.all_finite()));
}

#[test]
fn egt_nc_trains_with_classifier_objective() {
    let fx = small_fixture();
    let mut cfg = small_config(2);
    cfg.ablation = Ablation::EgtNc;
    let run = train(fx.inputs(), small_egt(), &cfg, None).unwrap();
    assert!(run.state.params.classifier.is_some());
    assert!(run.steps.iter().all(|s| s.loss_align == 0.0 && s.loss_gac_seq == 0.0));
    assert!(run.steps.iter().all(|s| s.loss_ce > 0.0));
    // Epoch records carry classifier accuracy in [0, 1].
    assert!(run.epochs.iter().all(|e| (0.0..=1.0).contains(&e.test_top1)));
}

#[test]
fn baseline_config_is_rejected_by_encoder_trainer() {
    let fx = small_fixture();
    let mut cfg = small_config(1);
    cfg.ablation = Ablation::Baseline;
    assert!(matches!(
        Trainer::new(fx.inputs(), small_egt(), cfg),
        Err(TrainError::InvalidConfig(_))
    ));
}

#[test]
fn archetype_bank_is_stable_within_an_epoch() {
    let fx = small_fixture();
    let cfg = small_config(2);
    let mut trainer = Trainer::new(fx.inputs(), small_egt(), cfg).unwrap();
    trainer.step().unwrap();
    let bank_after_first = trainer.state().bank.clone().unwrap();
    // Remaining steps of the epoch see the identical bank.
    for _ in 1..trainer.steps_per_epoch() {
        trainer.step().unwrap();
        assert_eq!(trainer.state().bank.as_ref().unwrap(), &bank_after_first);
    }
    // The next epoch refreshes it.
    trainer.step().unwrap();
    let bank_next = trainer.state().bank.clone().unwrap();
    assert_ne!(bank_next, bank_after_first);
    assert_eq!(bank_next.epoch_tag, 1);
}

/// Trained 5-class model: same-class features are more cosine-similar than
/// cross-class features, and the RSA matrix over class means is symmetric
/// with a unit diagonal.
#[test]
fn trained_features_separate_classes_in_rsa_terms() {
    use egt_core::eval::{class_separation, encode_split, rsa_matrix};
    let synth = SynthConfig {
        subjects: 1,
        classes: 5,
        sequences_per: 8,
        channels: 8,
        samples: 64,
        noise_sigma: 1.0,
        seed: 13,
        subject_shift: 0.2,
        sample_rate: 64.0,
    };
    let layout = ElectrodeLayout::synthetic_cap(synth.channels);
    let dataset = generate_synthetic_dataset(&synth, &layout).unwrap();
    let split = make_split(&dataset, Protocol::SubjectDependent { subject: 0 }, 13).unwrap();
    let adjacency = build_spatial_adjacency(&layout, SpatialRule::Knn(3)).unwrap();
    let pe = positional_encodings(&normalized_laplacian(&adjacency).unwrap(), 4).unwrap();
    let table = ClassEmbeddingTable::seeded(5, 8, 14);
    let inputs = TrainInputs {
        dataset: &dataset,
        split: &split,
        pe: &pe,
        neighborhood: &Neighborhood::Full,
        table: &table,
    };
    let cfg = TrainConfig { epochs: 12, batch_size: 8, align_dim: 8, seed: 3, ..TrainConfig::default() };
    let run = train(inputs, small_egt(), &cfg, None).unwrap();

    let encoded = encode_split(
        &run.state.params,
        &pe,
        &Neighborhood::Full,
        &dataset,
        &split.test,
        dataset.samples / 2,
    )
    .unwrap();
    let features: Vec<Vec<f64>> = encoded.iter().map(|e| e.sequence.clone()).collect();
    let labels: Vec<usize> = encoded.iter().map(|e| e.label).collect();
    let (within, between) = class_separation(&features, &labels);
    assert!(within > between, "within {within} must exceed between {between}");

    let mut classes: Vec<usize> = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let rsa = rsa_matrix(&features, &labels, &classes).unwrap();
    for i in 0..classes.len() {
        assert!((rsa.matrix.at(i, i) - 1.0).abs() <= 1e-9);
        for j in 0..classes.len() {
            assert!((rsa.matrix.at(i, j) - rsa.matrix.at(j, i)).abs() <= 1e-12);
        }
    }
}

/// Ablation table shape: four rows, overall plus per-subject retrieval
/// metrics each carrying (mAP, R1); flat features through an untrained
/// projection score at chance level.
#[test]
fn ablation_table_shape_and_baseline_chance() {
    use egt_core::eval::zero_shot_classify;
    use egt_core::tensor::Matrix;
    use egt_core::trainer::{flat_features, run_ablation};
    use rand::{Rng, SeedableRng};

    let fx = small_fixture();
    let mut cfg = small_config(2);
    cfg.align_dim = 8;
    let table = run_ablation(fx.inputs(), small_egt(), &cfg, None).unwrap();
    assert_eq!(table.rows.len(), 4);
    let names: Vec<&str> = table.rows.iter().map(|r| r.name).collect();
    assert_eq!(names, vec!["baseline", "NC", "EGT_NC", "EGT_GAC"]);
    for row in &table.rows {
        assert!(row.overall.map.is_finite() && row.overall.rank1.is_finite());
        assert_eq!(row.per_subject.len(), 1, "subject-dependent split has one test subject");
    }

    // Untrained-quality features: random projection of the flat features
    // ranks at chance within the 5-sigma binomial bound.
    let flats = flat_features(&fx.dataset, &fx.split.test, 2, 32).unwrap();
    let labels: Vec<usize> = fx.split.test.iter().map(|&i| fx.dataset.sequences[i].label).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(200);
    let dim = flats[0].len();
    let proj_w = Matrix::from_fn(8, dim, |_, _| rng.gen_range(-0.1..0.1));
    let proj_b = Matrix::zeros(1, 8);
    let mut hits = 0usize;
    for (f, &label) in flats.iter().zip(&labels) {
        let pred = zero_shot_classify(f, &proj_w, &proj_b, &fx.table, label).unwrap();
        if pred.hit_within(1) {
            hits += 1;
        }
    }
    let acc = hits as f64 / flats.len() as f64;
    let chance = 1.0 / 3.0;
    let sigma = (chance * (1.0 - chance) / flats.len() as f64).sqrt();
    assert!(
        (acc - chance).abs() <= 5.0 * sigma,
        "untrained baseline top-1 {acc} strays from chance {chance}"
    );
}

#[test]
fn invalid_configs_are_rejected() {
    let fx = small_fixture();
    let mut cfg = small_config(1);
    cfg.batch_size = 1;
    assert!(Trainer::new(fx.inputs(), small_egt(), cfg).is_err());
    let mut cfg = small_config(1);
    cfg.learning_rate = -1.0;
    assert!(Trainer::new(fx.inputs(), small_egt(), cfg).is_err());
    let mut cfg = small_config(1);
    cfg.window_length = Some(10_000);
    assert!(Trainer::new(fx.inputs(), small_egt(), cfg).is_err());
}
