//! Evaluation: zero-shot top-k classification against class embeddings,
//! leave-one-out retrieval metrics, representational similarity matrices,
//! and feature export.

use std::io::Write;

use thiserror::Error;

use crate::data::{windowize, DataError, Dataset};
use crate::encoder::{encode_sequence, EncoderError, ModelParams, Neighborhood};
use crate::graph::PositionalEncodings;
use crate::objectives::{ClassEmbeddingTable, LossError};
use crate::tensor::{cosine_similarity, Matrix, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty split")]
    EmptySplit,
    #[error("feature {0} has zero norm after projection")]
    DegenerateFeature(usize),
    #[error("no valid retrieval queries (all classes are singletons)")]
    NoValidQueries,
    #[error("no features for class {0}")]
    MissingClass(usize),
    #[error("features and labels disagree: {features} vs {labels}")]
    LengthMismatch { features: usize, labels: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Full class ranking for one sequence, most similar first. Ties break
/// toward the lower class id, so rankings are deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedPrediction {
    pub true_class: usize,
    pub ranked_classes: Vec<usize>,
}

impl RankedPrediction {
    pub fn hit_within(&self, k: usize) -> bool {
        self.ranked_classes.iter().take(k).any(|&c| c == self.true_class)
    }
}

/// One encoded test sequence.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub subject: usize,
    pub label: usize,
    /// Sequence-level representation S.
    pub sequence: Vec<f64>,
    /// Per-snapshot representations s^t.
    pub snapshots: Vec<Vec<f64>>,
}

/// Encodes the given dataset indices with the eval-mode forward pass.
pub fn encode_split(
    params: &ModelParams,
    pe: &PositionalEncodings,
    neighborhood: &Neighborhood,
    dataset: &Dataset,
    indices: &[usize],
    window_length: usize,
) -> Result<Vec<EncodedSequence>, EvalError> {
    let cfg = params.dims.config;
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let seq = &dataset.sequences[idx];
        let snaps = windowize(seq, cfg.snapshots, window_length)?;
        let rep = encode_sequence(&snaps, pe, params, &cfg, neighborhood)?;
        out.push(EncodedSequence {
            subject: seq.subject,
            label: seq.label,
            sequence: rep.sequence,
            snapshots: rep.snapshot_means,
        });
    }
    Ok(out)
}

/// Projects a sequence representation into class-embedding space.
pub fn project_feature(s: &[f64], align_w: &Matrix, align_b: &Matrix) -> Vec<f64> {
    (0..align_w.rows())
        .map(|r| {
            align_b.at(0, r) + align_w.row(r).iter().zip(s).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

/// Ranks every class in the table by cosine similarity to the projected,
/// unit-normalized feature.
pub fn zero_shot_classify(
    s: &[f64],
    align_w: &Matrix,
    align_b: &Matrix,
    table: &ClassEmbeddingTable,
    true_class: usize,
) -> Result<RankedPrediction, EvalError> {
    let z = project_feature(s, align_w, align_b);
    let norm: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EvalError::DegenerateFeature(0));
    }
    let mut scored: Vec<(usize, f64)> = (0..table.n_classes())
        .map(|k| {
            let e = table.embedding(k)?;
            let sim = z.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / norm;
            Ok((k, sim))
        })
        .collect::<Result<_, LossError>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(RankedPrediction { true_class, ranked_classes: scored.into_iter().map(|(k, _)| k).collect() })
}

/// Top-k accuracy over a set of encoded sequences, overall and per subject.
#[derive(Debug, Clone)]
pub struct TopkReport {
    /// `(k, accuracy)` in the order requested.
    pub per_k: Vec<(usize, f64)>,
    /// Per subject (ascending id): `(subject, [(k, accuracy)])`.
    pub per_subject: Vec<(usize, Vec<(usize, f64)>)>,
    pub n_sequences: usize,
}

/// Evaluates zero-shot top-k accuracy for every requested k.
pub fn evaluate_topk(
    encoded: &[EncodedSequence],
    align_w: &Matrix,
    align_b: &Matrix,
    table: &ClassEmbeddingTable,
    k_list: &[usize],
) -> Result<TopkReport, EvalError> {
    if encoded.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let predictions: Vec<(usize, RankedPrediction)> = encoded
        .iter()
        .map(|e| {
            zero_shot_classify(&e.sequence, align_w, align_b, table, e.label)
                .map(|p| (e.subject, p))
        })
        .collect::<Result<_, _>>()?;
    let accuracy = |preds: &[&RankedPrediction], k: usize| {
        preds.iter().filter(|p| p.hit_within(k)).count() as f64 / preds.len() as f64
    };
    let all: Vec<&RankedPrediction> = predictions.iter().map(|(_, p)| p).collect();
    let per_k = k_list.iter().map(|&k| (k, accuracy(&all, k))).collect();
    let mut subjects: Vec<usize> = predictions.iter().map(|(s, _)| *s).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let per_subject = subjects
        .into_iter()
        .map(|s| {
            let preds: Vec<&RankedPrediction> =
                predictions.iter().filter(|(ps, _)| *ps == s).map(|(_, p)| p).collect();
            (s, k_list.iter().map(|&k| (k, accuracy(&preds, k))).collect())
        })
        .collect();
    Ok(TopkReport { per_k, per_subject, n_sequences: encoded.len() })
}

/// Leave-one-out retrieval quality of a feature set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalMetrics {
    /// Mean average precision of same-class retrieval.
    pub map: f64,
    /// Fraction of queries whose nearest neighbor shares the class.
    pub rank1: f64,
    /// Queries skipped because their class has no other sample.
    pub skipped: usize,
}

/// Cosine leave-one-out retrieval: each sample queries all others.
pub fn retrieval_metrics(
    features: &[Vec<f64>],
    labels: &[usize],
) -> Result<RetrievalMetrics, EvalError> {
    if features.len() != labels.len() {
        return Err(EvalError::LengthMismatch { features: features.len(), labels: labels.len() });
    }
    if features.len() < 2 {
        return Err(EvalError::NoValidQueries);
    }
    let n = features.len();
    let mut ap_sum = 0.0;
    let mut rank1_hits = 0usize;
    let mut valid = 0usize;
    let mut skipped = 0usize;
    for q in 0..n {
        let positives = labels.iter().enumerate().filter(|(i, &l)| *i != q && l == labels[q]).count();
        if positives == 0 {
            skipped += 1;
            continue;
        }
        valid += 1;
        let mut ranked: Vec<(usize, f64)> = (0..n)
            .filter(|&i| i != q)
            .map(|i| {
                let sim = cosine_similarity(&features[q], &features[i]).unwrap_or(0.0);
                (i, sim)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if labels[ranked[0].0] == labels[q] {
            rank1_hits += 1;
        }
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, (i, _)) in ranked.iter().enumerate() {
            if labels[*i] == labels[q] {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / positives as f64;
    }
    if valid == 0 {
        return Err(EvalError::NoValidQueries);
    }
    Ok(RetrievalMetrics {
        map: ap_sum / valid as f64,
        rank1: rank1_hits as f64 / valid as f64,
        skipped,
    })
}

/// Pairwise cosine similarities between per-class mean features, in the
/// given class order.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub classes: Vec<usize>,
    pub matrix: Matrix,
}

impl SimilarityMatrix {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let header: Vec<String> = self.classes.iter().map(|c| format!("class_{c}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.matrix.rows() {
            let row: Vec<String> =
                self.matrix.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Representational similarity matrix over concept-mean features.
pub fn rsa_matrix(
    features: &[Vec<f64>],
    labels: &[usize],
    class_order: &[usize],
) -> Result<SimilarityMatrix, EvalError> {
    if features.len() != labels.len() {
        return Err(EvalError::LengthMismatch { features: features.len(), labels: labels.len() });
    }
    let mut means = Vec::with_capacity(class_order.len());
    for &class in class_order {
        let members: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == class)
            .map(|(f, _)| f)
            .collect();
        if members.is_empty() {
            return Err(EvalError::MissingClass(class));
        }
        let d = members[0].len();
        let mut mean = vec![0.0; d];
        for m in &members {
            for (acc, v) in mean.iter_mut().zip(m.iter()) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= members.len() as f64;
        }
        means.push(mean);
    }
    let n = means.len();
    let mut matrix = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let sim = cosine_similarity(&means[i], &means[j])
                .ok_or(EvalError::DegenerateFeature(i))?;
            matrix.set(i, j, sim);
            matrix.set(j, i, sim);
        }
    }
    Ok(SimilarityMatrix { classes: class_order.to_vec(), matrix })
}

/// Mean within-class and between-class cosine similarity of per-sequence
/// features (a separation statistic for trained representations).
pub fn class_separation(features: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let n = features.len();
    let mut within = (0.0, 0usize);
    let mut between = (0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let sim = cosine_similarity(&features[i], &features[j]).unwrap_or(0.0);
            if labels[i] == labels[j] {
                within.0 += sim;
                within.1 += 1;
            } else {
                between.0 += sim;
                between.1 += 1;
            }
        }
    }
    (
        if within.1 > 0 { within.0 / within.1 as f64 } else { 0.0 },
        if between.1 > 0 { between.0 / between.1 as f64 } else { 0.0 },
    )
}

/// Writes `subject,label,S_0..S_{d-1}` rows, one per sequence, at 17
/// significant digits so reloading reproduces the values exactly.
pub fn export_features(encoded: &[EncodedSequence], mut w: impl Write) -> Result<(), EvalError> {
    if encoded.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let d = encoded[0].sequence.len();
    let header: Vec<String> = ["subject".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..d).map(|i| format!("S_{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for e in encoded {
        let mut row = vec![e.subject.to_string(), e.label.to_string()];
        row.extend(e.sequence.iter().map(|v| format!("{v:.16e}")));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_proj(d: usize) -> (Matrix, Matrix) {
        (Matrix::identity(d), Matrix::zeros(1, d))
    }

    #[test]
    fn zero_shot_exact_match_ranks_first() {
        let table = ClassEmbeddingTable::from_vectors(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let (w, b) = identity_proj(3);
        let pred = zero_shot_classify(&[0.0, 0.0, 0.8], &w, &b, &table, 2).unwrap();
        assert_eq!(pred.ranked_classes[0], 2);
        assert!(pred.hit_within(1));
    }

    #[test]
    fn zero_shot_ties_rank_by_ascending_class_id() {
        // All similarities zero: feature orthogonal to every embedding.
        let table = ClassEmbeddingTable::from_vectors(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![-1.0, 1.0, 0.0],
        ])
        .unwrap();
        let (w, b) = identity_proj(3);
        let pred = zero_shot_classify(&[0.0, 0.0, 1.0], &w, &b, &table, 0).unwrap();
        assert_eq!(pred.ranked_classes, vec![0, 1, 2]);
    }

    #[test]
    fn zero_shot_matches_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let table = ClassEmbeddingTable::seeded(5, 4, 6);
        let w = Matrix::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
        let b = Matrix::from_fn(1, 4, |_, _| rng.gen_range(-0.2..0.2));
        let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pred = zero_shot_classify(&s, &w, &b, &table, 3).unwrap();

        // Independent cosine + sort oracle.
        let z = project_feature(&s, &w, &b);
        let mut sims: Vec<(usize, f64)> = (0..5)
            .map(|k| (k, cosine_similarity(&z, table.embedding(k).unwrap()).unwrap()))
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let expect: Vec<usize> = sims.into_iter().map(|(k, _)| k).collect();
        assert_eq!(pred.ranked_classes, expect);
    }

    #[test]
    fn zero_shot_degenerate_feature_rejected() {
        let table = ClassEmbeddingTable::seeded(2, 3, 1);
        let w = Matrix::zeros(3, 3);
        let b = Matrix::zeros(1, 3);
        assert!(matches!(
            zero_shot_classify(&[1.0, 2.0, 3.0], &w, &b, &table, 0),
            Err(EvalError::DegenerateFeature(0))
        ));
    }

    fn fake_encoded(labels: &[usize], subjects: &[usize], d: usize) -> Vec<EncodedSequence> {
        labels
            .iter()
            .zip(subjects)
            .map(|(&label, &subject)| {
                let mut s = vec![0.0; d];
                s[label] = 1.0;
                EncodedSequence { subject, label, sequence: s, snapshots: vec![] }
            })
            .collect()
    }

    #[test]
    fn topk_full_ranking_hits_one_and_is_monotone() {
        let table = ClassEmbeddingTable::seeded(4, 4, 9);
        // Random projection: accuracy may be poor, but top-C is 1 and
        // accuracy never decreases in k.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let w = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let b = Matrix::zeros(1, 4);
        let encoded = fake_encoded(&[0, 1, 2, 3, 1, 0], &[0, 0, 0, 1, 1, 1], 4);
        let report = evaluate_topk(&encoded, &w, &b, &table, &[1, 2, 3, 4]).unwrap();
        assert_eq!(report.per_k.last().unwrap().1, 1.0);
        for pair in report.per_k.windows(2) {
            assert!(pair[0].1 <= pair[1].1);
        }
        assert_eq!(report.per_subject.len(), 2);
        assert!(matches!(
            evaluate_topk(&[], &w, &b, &table, &[1]),
            Err(EvalError::EmptySplit)
        ));
    }

    #[test]
    fn retrieval_two_same_class_samples() {
        let features = vec![vec![1.0, 0.1], vec![0.9, 0.2]];
        let m = retrieval_metrics(&features, &[0, 0]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.rank1, 1.0);
        assert_eq!(m.skipped, 0);
    }

    #[test]
    fn retrieval_all_singletons_is_an_error() {
        let features = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(retrieval_metrics(&features, &[0, 1]), Err(EvalError::NoValidQueries)));
    }

    #[test]
    fn retrieval_matches_brute_force_ap_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let n = 12;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let features: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
                v[labels[i]] += 1.5;
                v
            })
            .collect();
        let m = retrieval_metrics(&features, &labels).unwrap();

        // Brute-force AP oracle, written independently.
        let mut ap_total = 0.0;
        let mut r1 = 0;
        for q in 0..n {
            let mut others: Vec<(usize, f64)> = (0..n)
                .filter(|&i| i != q)
                .map(|i| (i, cosine_similarity(&features[q], &features[i]).unwrap()))
                .collect();
            others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            if labels[others[0].0] == labels[q] {
                r1 += 1;
            }
            let n_pos = labels.iter().enumerate().filter(|(i, &l)| *i != q && l == labels[q]).count();
            let mut found = 0;
            let mut ap = 0.0;
            for (rank, (i, _)) in others.iter().enumerate() {
                if labels[*i] == labels[q] {
                    found += 1;
                    ap += found as f64 / (rank + 1) as f64;
                }
            }
            ap_total += ap / n_pos as f64;
        }
        assert!((m.map - ap_total / n as f64).abs() <= 1e-10);
        assert!((m.rank1 - r1 as f64 / n as f64).abs() <= 1e-12);
    }

    #[test]
    fn retrieval_invariant_to_global_positive_scaling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let features: Vec<Vec<f64>> =
            (0..10).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a = retrieval_metrics(&features, &labels).unwrap();
        let scaled: Vec<Vec<f64>> =
            features.iter().map(|f| f.iter().map(|v| v * 10.0).collect()).collect();
        let b = retrieval_metrics(&scaled, &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rsa_identical_features_all_ones() {
        let features = vec![vec![0.3, 0.4]; 6];
        let labels = vec![0, 0, 1, 1, 2, 2];
        let rsa = rsa_matrix(&features, &labels, &[0, 1, 2]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((rsa.matrix.at(i, j) - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rsa_orthogonal_class_means() {
        let features = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let rsa = rsa_matrix(&features, &[0, 1], &[0, 1]).unwrap();
        assert!((rsa.matrix.at(0, 1)).abs() <= 1e-12);
        assert!((rsa.matrix.at(0, 0) - 1.0).abs() <= 1e-9);
        // Symmetric with unit diagonal.
        assert_eq!(rsa.matrix.at(0, 1), rsa.matrix.at(1, 0));
        assert!(matches!(
            rsa_matrix(&features, &[0, 1], &[0, 3]),
            Err(EvalError::MissingClass(3))
        ));
    }

    #[test]
    fn export_round_trips_to_printed_precision() {
        let encoded = vec![
            EncodedSequence {
                subject: 1,
                label: 2,
                sequence: vec![std::f64::consts::PI, -1.0 / 3.0],
                snapshots: vec![],
            },
            EncodedSequence {
                subject: 0,
                label: 1,
                sequence: vec![1e-17, 2.5e8],
                snapshots: vec![],
            },
        ];
        let mut buf = Vec::new();
        export_features(&encoded, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "subject,label,S_0,S_1");
        for (line, e) in lines[1..].iter().zip(&encoded) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 2 + 2);
            assert_eq!(fields[0].parse::<usize>().unwrap(), e.subject);
            assert_eq!(fields[1].parse::<usize>().unwrap(), e.label);
            for (f, v) in fields[2..].iter().zip(&e.sequence) {
                assert_eq!(f.parse::<f64>().unwrap(), *v);
            }
        }
    }
}
