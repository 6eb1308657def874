//! Pseudo-labeling of target samples by spherical k-means over unit
//! embeddings, initialized from class prototypes.
//!
//! Prototypes come from one of two places: per-class mean directions of
//! labeled source embeddings, or the rows of a prepared (frozen,
//! row-normalized) classifier when no source data is available.
//!
//! The k-means objective is the mean dot product between each sample and
//! its assigned unit center; with unit-norm rows, as produced by the
//! encoder, that is the mean cosine similarity. Every iteration first
//! re-fits centers to the current assignment (normalized mean direction,
//! which maximizes the within-cluster sum), then reassigns each sample to
//! its best center, so the objective trace never decreases.

use crate::error::{Error, Result};
use crate::model::{Domain, FeatureBatch, Model};
use crate::numerics::{dot, l2_normalize, Matrix, ZERO_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeSource {
    /// Per-class mean of source embeddings.
    SampleMeans,
    /// Rows of a prepared classifier.
    ClassifierWeights,
}

/// Unit-norm class centers, one row per class.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub centers: Matrix,
    pub source: PrototypeSource,
}

/// Class prototypes as re-normalized per-class means of the batch's unit
/// embeddings. Every class in `0..classes` must appear at least once.
pub fn source_prototypes(features: &FeatureBatch, classes: usize) -> Result<PrototypeSet> {
    if features.z.rows == 0 {
        return Err(Error::EmptyInput("prototype batch"));
    }
    if features.labels.len() != features.z.rows {
        return Err(Error::DimensionMismatch {
            expected: features.z.rows,
            got: features.labels.len(),
            context: "prototype batch labels",
        });
    }
    let dim = features.z.cols;
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (r, &y) in features.labels.iter().enumerate() {
        if y < 0 {
            return Err(Error::LabelsRequired("prototype batch"));
        }
        let y = y as usize;
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                label: y as i64,
                classes,
            });
        }
        for (s, &v) in sums[y].iter_mut().zip(features.z.row(r)) {
            *s += v;
        }
        counts[y] += 1;
    }
    let mut centers = Matrix::zeros(classes, dim);
    for m in 0..classes {
        if counts[m] == 0 {
            return Err(Error::EmptyClass(m));
        }
        let mean: Vec<f64> = sums[m].iter().map(|s| s / counts[m] as f64).collect();
        centers.row_mut(m).copy_from_slice(&l2_normalize(&mean)?);
    }
    Ok(PrototypeSet {
        centers,
        source: PrototypeSource::SampleMeans,
    })
}

/// Class prototypes as the rows of a prepared classifier. The model must
/// have gone through `prepare_source_free`, which normalizes and freezes
/// the rows.
pub fn classifier_prototypes(model: &Model) -> Result<PrototypeSet> {
    if !model.classifier_frozen {
        return Err(Error::NotPrepared);
    }
    Ok(PrototypeSet {
        centers: model.classifier_w.clone(),
        source: PrototypeSource::ClassifierWeights,
    })
}

#[derive(Debug, Clone)]
pub struct PseudoLabelResult {
    /// Assigned cluster per sample.
    pub labels: Vec<i32>,
    /// Dot product between each sample and its assigned center.
    pub confidences: Vec<f64>,
    /// `confidences[i] >= threshold`; all true until filtered.
    pub retained: Vec<bool>,
    /// Final centers, unit rows. Clusters that never received a sample
    /// keep their initial center bit for bit.
    pub centers: Matrix,
    /// Mean assigned similarity after the initial assignment and after
    /// each iteration. Never decreasing.
    pub objective_trace: Vec<f64>,
    /// Center-update iterations actually run.
    pub iterations: usize,
}

fn assign(features: &Matrix, centers: &Matrix) -> (Vec<i32>, Vec<f64>) {
    let mut labels = Vec::with_capacity(features.rows);
    let mut sims = Vec::with_capacity(features.rows);
    for r in 0..features.rows {
        let row = features.row(r);
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for m in 0..centers.rows {
            let s = dot(row, centers.row(m));
            // strict improvement only: ties keep the lowest index
            if s > best_sim {
                best_sim = s;
                best = m;
            }
        }
        labels.push(best as i32);
        sims.push(best_sim);
    }
    (labels, sims)
}

fn mean_sim(sims: &[f64]) -> f64 {
    sims.iter().sum::<f64>() / sims.len() as f64
}

/// Spherical k-means from explicit initial centers.
///
/// Rows of `features` are expected unit-norm (the encoder guarantees
/// this); centers stay unit-norm throughout. Stops when an iteration
/// leaves the assignment unchanged, improves the objective by less than
/// `tol`, or hits `max_iters`. `max_iters == 0` returns the pure
/// nearest-center assignment under the initial centers.
pub fn spherical_kmeans(
    features: &Matrix,
    init: &Matrix,
    max_iters: usize,
    tol: f64,
) -> Result<PseudoLabelResult> {
    if features.rows == 0 {
        return Err(Error::EmptyInput("kmeans features"));
    }
    if init.rows == 0 {
        return Err(Error::EmptyInput("kmeans centers"));
    }
    if init.cols != features.cols {
        return Err(Error::DimensionMismatch {
            expected: features.cols,
            got: init.cols,
            context: "kmeans center dimension",
        });
    }
    let mut centers = init.clone();
    let (mut labels, mut sims) = assign(features, &centers);
    let mut trace = vec![mean_sim(&sims)];
    let mut iterations = 0;

    for _ in 0..max_iters {
        // re-fit: normalized mean direction per cluster
        for m in 0..centers.rows {
            let mut sum = vec![0.0; features.cols];
            let mut count = 0usize;
            for (r, &y) in labels.iter().enumerate() {
                if y as usize == m {
                    for (s, &v) in sum.iter_mut().zip(features.row(r)) {
                        *s += v;
                    }
                    count += 1;
                }
            }
            if count == 0 {
                continue;
            }
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= ZERO_NORM_EPS {
                continue;
            }
            for (c, s) in centers.row_mut(m).iter_mut().zip(&sum) {
                *c = s / norm;
            }
        }
        let (new_labels, new_sims) = assign(features, &centers);
        let obj = mean_sim(&new_sims);
        let gain = obj - *trace.last().unwrap();
        let unchanged = new_labels == labels;
        labels = new_labels;
        sims = new_sims;
        trace.push(obj);
        iterations += 1;
        if unchanged || gain < tol {
            break;
        }
    }

    let retained = vec![true; labels.len()];
    Ok(PseudoLabelResult {
        labels,
        confidences: sims,
        retained,
        centers,
        objective_trace: trace,
        iterations,
    })
}

/// Mark samples whose assigned similarity clears `threshold`.
pub fn filter_by_confidence(result: &mut PseudoLabelResult, threshold: f64) {
    result.retained = result.confidences.iter().map(|&c| c >= threshold).collect();
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelingMode {
    /// Prototypes from labeled source embeddings.
    Standard,
    /// Prototypes from the prepared classifier; no source data touched.
    SourceFree,
}

#[derive(Debug, Clone, Copy)]
pub struct PseudoLabelConfig {
    pub confidence_threshold: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            confidence_threshold: 0.0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// Full pseudo-labeling pass over raw target inputs: eval-mode encoding,
/// prototype initialization, spherical k-means, confidence filtering.
///
/// `Standard` needs `source` as raw inputs plus labels and re-encodes
/// them for prototypes. `SourceFree` rejects source data outright so a
/// source-free run can never depend on it.
pub fn generate_pseudo_labels(
    model: &Model,
    target_x: &Matrix,
    mode: LabelingMode,
    source: Option<(&Matrix, &[i32])>,
    cfg: &PseudoLabelConfig,
) -> Result<PseudoLabelResult> {
    let prototypes = match mode {
        LabelingMode::Standard => {
            let (sx, sy) = source.ok_or(Error::LabelsRequired(
                "source data for standard pseudo-labeling",
            ))?;
            let sb = model.encode_eval(sx, sy, Domain::Source)?;
            source_prototypes(&sb, model.classes)?
        }
        LabelingMode::SourceFree => {
            if source.is_some() {
                return Err(Error::InvalidConfig(
                    "source data is not used in source-free mode".into(),
                ));
            }
            classifier_prototypes(model)?
        }
    };
    let tb = model.encode_eval(target_x, &[], Domain::Target)?;
    let mut result = spherical_kmeans(&tb.z, &prototypes.centers, cfg.max_iters, cfg.tol)?;
    filter_by_confidence(&mut result, cfg.confidence_threshold);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, EncoderConfig, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, dim);
        for r in 0..rows {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0) + 0.01).collect();
            m.row_mut(r).copy_from_slice(&l2_normalize(&v).unwrap());
        }
        m
    }

    /// Clustered unit vectors: well-separated random centers plus noise.
    fn clustered(
        rng: &mut ChaCha8Rng,
        n: usize,
        classes: usize,
        dim: usize,
        noise: f64,
    ) -> (Matrix, Matrix) {
        let centers = loop {
            let c = unit_rows(rng, classes, dim);
            let mut ok = true;
            for a in 0..classes {
                for b in (a + 1)..classes {
                    if dot(c.row(a), c.row(b)) > 0.5 {
                        ok = false;
                    }
                }
            }
            if ok {
                break c;
            }
        };
        let mut x = Matrix::zeros(n, dim);
        for r in 0..n {
            let m = r % classes;
            let v: Vec<f64> = centers
                .row(m)
                .iter()
                .map(|&c| c + noise * rng.gen_range(-1.0..1.0))
                .collect();
            x.row_mut(r).copy_from_slice(&l2_normalize(&v).unwrap());
        }
        (x, centers)
    }

    #[test]
    fn zero_iterations_is_nearest_center_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, centers) = clustered(&mut rng, 12, 3, 4, 0.2);
        let res = spherical_kmeans(&x, &centers, 0, 1e-6).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.objective_trace.len(), 1);
        assert_eq!(res.centers.as_slice(), centers.as_slice());
        for (r, &y) in res.labels.iter().enumerate() {
            for m in 0..3 {
                assert!(
                    dot(x.row(r), centers.row(m)) <= dot(x.row(r), centers.row(y as usize)) + 1e-15
                );
            }
            assert!(
                (res.confidences[r] - dot(x.row(r), centers.row(y as usize))).abs() < 1e-15
            );
        }
    }

    #[test]
    fn objective_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(4..=64);
            let classes = rng.gen_range(2..=6);
            let dim = rng.gen_range(2..=8);
            let x = unit_rows(&mut rng, n, dim);
            let init = unit_rows(&mut rng, classes, dim);
            let res = spherical_kmeans(&x, &init, 100, 0.0).unwrap();
            for w in res.objective_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-10, "trace dipped: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn final_assignment_is_switch_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(4..=40);
            let classes = rng.gen_range(2..=5);
            let x = unit_rows(&mut rng, n, 5);
            let init = unit_rows(&mut rng, classes, 5);
            let res = spherical_kmeans(&x, &init, 500, 0.0).unwrap();
            // each sample sits at its best center, so no single switch
            // can raise the objective
            for (r, &y) in res.labels.iter().enumerate() {
                let own = dot(x.row(r), res.centers.row(y as usize));
                for m in 0..classes {
                    assert!(dot(x.row(r), res.centers.row(m)) <= own + 1e-12);
                }
            }
        }
    }

    #[test]
    fn matches_exhaustive_search_on_separated_data() {
        // global optimum over all labelings: sum over clusters of the
        // norm of the summed embeddings (best unit center is the mean
        // direction), divided by n to match the mean objective
        fn global_best(x: &Matrix, classes: usize) -> f64 {
            let n = x.rows;
            let mut best = f64::NEG_INFINITY;
            let total = classes.pow(n as u32);
            for code in 0..total {
                let mut c = code;
                let mut sums = vec![vec![0.0; x.cols]; classes];
                for r in 0..n {
                    let m = c % classes;
                    c /= classes;
                    for (s, &v) in sums[m].iter_mut().zip(x.row(r)) {
                        *s += v;
                    }
                }
                let obj: f64 = sums
                    .iter()
                    .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .sum();
                best = best.max(obj / n as f64);
            }
            best
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut hits = 0;
        let trials = 15;
        for _ in 0..trials {
            let classes = rng.gen_range(2..=3);
            let n = rng.gen_range(4..=8);
            let (x, centers) = clustered(&mut rng, n, classes, 3, 0.3);
            let res = spherical_kmeans(&x, &centers, 200, 0.0).unwrap();
            let best = global_best(&x, classes);
            let got = *res.objective_trace.last().unwrap();
            assert!(got <= best + 1e-9);
            if (best - got).abs() <= 1e-9 {
                hits += 1;
            }
        }
        assert!(hits * 10 >= trials * 9, "only {hits}/{trials} reached the global optimum");
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let centers = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let x = Matrix::from_rows(&[vec![s, s]]);
        let res = spherical_kmeans(&x, &centers, 0, 0.0).unwrap();
        assert_eq!(res.labels, vec![0]);
    }

    #[test]
    fn starved_cluster_keeps_its_initial_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, mut centers3) = {
            let (x, c2) = clustered(&mut rng, 10, 2, 4, 0.1);
            let mut c3 = Matrix::zeros(3, 4);
            c3.row_mut(0).copy_from_slice(c2.row(0));
            c3.row_mut(1).copy_from_slice(c2.row(1));
            (x, c3)
        };
        // third center on the far side of the sphere from all the data
        let mean: Vec<f64> = (0..4)
            .map(|c| -(0..x.rows).map(|r| x.row(r)[c]).sum::<f64>())
            .collect();
        centers3.row_mut(2).copy_from_slice(&l2_normalize(&mean).unwrap());
        let before = centers3.row(2).to_vec();
        let res = spherical_kmeans(&x, &centers3, 50, 0.0).unwrap();
        assert!(res.labels.iter().all(|&y| y < 2), "far center captured a sample");
        assert_eq!(res.centers.row(2), &before[..]);
    }

    #[test]
    fn confidence_filter_is_a_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = unit_rows(&mut rng, 30, 4);
        let init = unit_rows(&mut rng, 3, 4);
        let mut res = spherical_kmeans(&x, &init, 50, 0.0).unwrap();
        assert!(res.retained.iter().all(|&r| r));
        let threshold = 0.4;
        filter_by_confidence(&mut res, threshold);
        for (i, &keep) in res.retained.iter().enumerate() {
            assert_eq!(keep, res.confidences[i] >= threshold);
        }
    }

    #[test]
    fn source_prototypes_are_renormalized_class_means() {
        let z = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.6, 0.8],
        ]);
        let fb = FeatureBatch {
            raw: z.clone(),
            z,
            labels: vec![0, 1, 0],
            domain: Domain::Source,
        };
        let protos = source_prototypes(&fb, 2).unwrap();
        let expect0 = l2_normalize(&[0.8, 0.4]).unwrap();
        assert!(protos
            .centers
            .row(0)
            .iter()
            .zip(&expect0)
            .all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(protos.centers.row(1), &[0.0, 1.0][..]);
        assert_eq!(protos.source, PrototypeSource::SampleMeans);
    }

    #[test]
    fn prototype_error_cases() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let fb = FeatureBatch {
            raw: z.clone(),
            z: z.clone(),
            labels: vec![0, 0],
            domain: Domain::Source,
        };
        assert!(matches!(source_prototypes(&fb, 2), Err(Error::EmptyClass(1))));
        let unlabeled = FeatureBatch {
            raw: z.clone(),
            z: z.clone(),
            labels: vec![0, -1],
            domain: Domain::Source,
        };
        assert!(matches!(
            source_prototypes(&unlabeled, 2),
            Err(Error::LabelsRequired(_))
        ));
        let wide = FeatureBatch {
            raw: z.clone(),
            z,
            labels: vec![0, 5],
            domain: Domain::Source,
        };
        assert!(matches!(
            source_prototypes(&wide, 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    fn tiny_model(seed: u64) -> Model {
        let cfg = EncoderConfig {
            input_dim: 4,
            hidden_dims: vec![6],
            feature_dim: 3,
            activation: Activation::Tanh,
            per_domain_bn: false,
            bottleneck: true,
        };
        Model::init(&cfg, 3, seed).unwrap()
    }

    #[test]
    fn classifier_prototypes_require_preparation() {
        let mut model = tiny_model(8);
        assert!(matches!(classifier_prototypes(&model), Err(Error::NotPrepared)));
        model.prepare_source_free().unwrap();
        let protos = classifier_prototypes(&model).unwrap();
        assert_eq!(protos.centers.as_slice(), model.classifier_w.as_slice());
        assert_eq!(protos.source, PrototypeSource::ClassifierWeights);
    }

    #[test]
    fn standard_mode_matches_manual_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = tiny_model(9);
        let sx = Matrix::from_vec(9, 4, (0..36).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let sy: Vec<i32> = (0..9).map(|i| (i % 3) as i32).collect();
        let tx = Matrix::from_vec(12, 4, (0..48).map(|_| rng.gen_range(-2.0..2.0)).collect());
        // warm the running statistics so eval encoding is meaningful
        for _ in 0..3 {
            model.encode(&sx, &sy, Domain::Source, Mode::Train).unwrap();
            model.encode(&tx, &[], Domain::Target, Mode::Train).unwrap();
        }
        let cfg = PseudoLabelConfig {
            confidence_threshold: 0.1,
            ..PseudoLabelConfig::default()
        };
        let got =
            generate_pseudo_labels(&model, &tx, LabelingMode::Standard, Some((&sx, &sy)), &cfg)
                .unwrap();
        let sb = model.encode_eval(&sx, &sy, Domain::Source).unwrap();
        let protos = source_prototypes(&sb, 3).unwrap();
        let tb = model.encode_eval(&tx, &[], Domain::Target).unwrap();
        let mut expect = spherical_kmeans(&tb.z, &protos.centers, 100, 1e-6).unwrap();
        filter_by_confidence(&mut expect, 0.1);
        assert_eq!(got.labels, expect.labels);
        assert_eq!(got.retained, expect.retained);
        assert_eq!(got.centers.as_slice(), expect.centers.as_slice());
        assert_eq!(got.objective_trace, expect.objective_trace);
    }

    #[test]
    fn source_free_mode_uses_classifier_and_rejects_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = tiny_model(10);
        let tx = Matrix::from_vec(10, 4, (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect());
        model.encode(&tx, &[], Domain::Target, Mode::Train).unwrap();
        let cfg = PseudoLabelConfig::default();
        assert!(matches!(
            generate_pseudo_labels(&model, &tx, LabelingMode::SourceFree, None, &cfg),
            Err(Error::NotPrepared)
        ));
        model.prepare_source_free().unwrap();
        let sx = Matrix::zeros(2, 4);
        assert!(matches!(
            generate_pseudo_labels(&model, &tx, LabelingMode::SourceFree, Some((&sx, &[0, 1])), &cfg),
            Err(Error::InvalidConfig(_))
        ));
        let got = generate_pseudo_labels(&model, &tx, LabelingMode::SourceFree, None, &cfg).unwrap();
        let tb = model.encode_eval(&tx, &[], Domain::Target).unwrap();
        let expect = spherical_kmeans(&tb.z, &model.classifier_w, 100, 1e-6).unwrap();
        assert_eq!(got.labels, expect.labels);
        assert_eq!(got.centers.as_slice(), expect.centers.as_slice());
    }

    #[test]
    fn standard_mode_requires_source() {
        let model = tiny_model(11);
        let tx = Matrix::zeros(3, 4);
        let tx = {
            let mut m = tx;
            for r in 0..3 {
                m.row_mut(r)[r] = 1.0;
            }
            m
        };
        assert!(matches!(
            generate_pseudo_labels(
                &model,
                &tx,
                LabelingMode::Standard,
                None,
                &PseudoLabelConfig::default()
            ),
            Err(Error::LabelsRequired(_))
        ));
    }
}
