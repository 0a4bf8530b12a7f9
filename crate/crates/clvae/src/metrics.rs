//! Quantitative evaluation: Fréchet distance between Gaussian feature
//! fits (FID), reconstruction MSE, ROC curves with trapezoid AUC, and
//! TPR/FPR with anomaly as the positive class.
//!
//! FID here uses the fixed seeded backbone from the losses module rather
//! than an Inception network, so absolute values are not comparable to
//! published Inception-based scores; relative orderings are the target.

use crate::datamodel::Label;
use crate::losses::PerceptualBackbone;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub type MetricResult<T> = Result<T, MetricError>;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("scores and labels must have equal nonzero length")]
    BadInput,
    #[error("roc requires both labels present")]
    SingleClass,
    #[error("tpr undefined: no positive samples")]
    NoPositives,
    #[error("fpr undefined: no negative samples")]
    NoNegatives,
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub n: usize,
}

/// Fits mean and unbiased covariance; requires n ≥ 2.
pub fn fit_gaussian_stats(features: &Array2<f64>) -> MetricResult<GaussianStats> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(MetricError::TooFewSamples(n));
    }
    let mean = features
        .mean_axis(ndarray::Axis(0))
        .expect("nonzero rows");
    let mut cov = Array2::zeros((d, d));
    for row in features.rows() {
        let centered: Vec<f64> = row.iter().zip(mean.iter()).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[[i, j]] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[[i, j]] /= denom;
            cov[[j, i]] = cov[[i, j]];
        }
    }
    Ok(GaussianStats { mean, cov, n })
}

/// Trace of the PSD square root of a symmetric matrix, via
/// eigendecomposition with eigenvalues clipped at 0.
fn trace_sqrt_psd(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum()
}

/// PSD square root of a symmetric matrix (eigenvalues clipped at 0).
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let d = eig.eigenvalues.len();
    let mut diag = DMatrix::zeros(d, d);
    for i in 0..d {
        diag[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * diag * eig.eigenvectors.transpose()
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

/// Fréchet distance between two Gaussians:
/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2·(Σ_a Σ_b)^{1/2})`, clipped at 0.
///
/// The cross term uses the symmetric reformulation
/// `Tr((Σ_b^{1/2} Σ_a Σ_b^{1/2})^{1/2})`, computed by eigendecomposition of
/// the symmetrized product with eigenvalues clipped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> MetricResult<f64> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(MetricError::DimMismatch(d, b.mean.len()));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| {
            let diff = x - y;
            diff * diff
        })
        .sum();
    let ca = to_dmatrix(&a.cov);
    let cb = to_dmatrix(&b.cov);
    let sqrt_b = sqrt_psd(&cb);
    let inner = &sqrt_b * &ca * &sqrt_b;
    let cross = trace_sqrt_psd(&inner);
    let value = mean_term + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// FID between two image sets: the Fréchet distance over pooled final-tap
/// backbone features. Inputs must be 3-channel batches with ≥ 2 images.
pub fn fid(
    real: &Array4<f64>,
    generated: &Array4<f64>,
    backbone: &PerceptualBackbone,
) -> MetricResult<f64> {
    if real.dim().0 < 2 || generated.dim().0 < 2 {
        return Err(MetricError::TooFewSamples(real.dim().0.min(generated.dim().0)));
    }
    let fa = backbone.pooled_features_batch(real)?;
    let fb = backbone.pooled_features_batch(generated)?;
    let ga = fit_gaussian_stats(&fa)?;
    let gb = fit_gaussian_stats(&fb)?;
    frechet_distance(&ga, &gb)
}

/// ROC curve points and trapezoid AUC, anomaly as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (threshold, fpr, tpr), thresholds descending from +inf; the curve
    /// runs from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64, f64)>,
    pub auc: f64,
}

/// Standard threshold sweep with tied scores grouped. Requires both labels.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> MetricResult<RocCurve> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(MetricError::BadInput);
    }
    let pos = labels.iter().filter(|&&l| l == Label::Anomaly).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group before emitting a point
        while i < order.len() && scores[order[i]] == threshold {
            match labels[order[i]] {
                Label::Anomaly => tp += 1,
                Label::Normal => fp += 1,
            }
            i += 1;
        }
        points.push((threshold, fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = points
        .windows(2)
        .map(|w| {
            let (_, x1, y1) = w[0];
            let (_, x2, y2) = w[1];
            (x2 - x1) * (y1 + y2) / 2.0
        })
        .sum();
    Ok(RocCurve { points, auc })
}

/// True/false positive rates of hard predictions, anomaly positive.
/// Absent positives (or negatives) are an error rather than a NaN.
pub fn tpr_fpr(predicted: &[Label], truth: &[Label]) -> MetricResult<(f64, f64)> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(MetricError::BadInput);
    }
    let (mut tp, mut fn_, mut fp, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth.iter()) {
        match (t, p) {
            (Label::Anomaly, Label::Anomaly) => tp += 1,
            (Label::Anomaly, Label::Normal) => fn_ += 1,
            (Label::Normal, Label::Anomaly) => fp += 1,
            (Label::Normal, Label::Normal) => tn += 1,
        }
    }
    if tp + fn_ == 0 {
        return Err(MetricError::NoPositives);
    }
    if fp + tn == 0 {
        return Err(MetricError::NoNegatives);
    }
    Ok((
        tp as f64 / (tp + fn_) as f64,
        fp as f64 / (fp + tn) as f64,
    ))
}

/// Final metrics block of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub mse: f64,
    pub auroc: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub config_hash: String,
}

/// Writes ROC points as CSV (`threshold, fpr, tpr`).
pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> MetricResult<()> {
    let io_err = |source| MetricError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    writeln!(f, "threshold,fpr,tpr").map_err(io_err)?;
    for (t, fpr, tpr) in &curve.points {
        writeln!(f, "{t},{fpr},{tpr}").map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_stats_identical_points_zero_covariance() {
        let f = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let g = fit_gaussian_stats(&f).unwrap();
        assert_eq!(g.mean, array![1.0, 2.0, 3.0]);
        assert!(g.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_stats_single_point_rejected() {
        let f = Array2::zeros((1, 3));
        assert!(matches!(
            fit_gaussian_stats(&f),
            Err(MetricError::TooFewSamples(1))
        ));
    }

    #[test]
    fn gaussian_stats_standard_normal_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let n = 100_000;
        let d = 4;
        let f = Array2::from_shape_fn((n, d), |_| rng.sample(normal));
        let g = fit_gaussian_stats(&f).unwrap();
        let nf = n as f64;
        // 3σ bounds: mean ~ N(0, 1/n); covariance entries ~ 1/sqrt(n) scale
        for m in g.mean.iter() {
            assert!(m.abs() < 3.0 / nf.sqrt());
        }
        for i in 0..d {
            for j in 0..d {
                let expected = f64::from(u8::from(i == j));
                let sigma = if i == j { (2.0 / nf).sqrt() } else { (1.0 / nf).sqrt() };
                assert!((g.cov[[i, j]] - expected).abs() < 3.0 * sigma);
            }
        }
    }

    fn stats(mean: &[f64], cov: Array2<f64>) -> GaussianStats {
        GaussianStats {
            mean: Array1::from_vec(mean.to_vec()),
            cov,
            n: 10,
        }
    }

    #[test]
    fn frechet_self_distance_zero_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 5;
        // random PSD covariances (A·Aᵀ)
        let mk = |rng: &mut ChaCha8Rng| {
            let a = Array2::from_shape_fn((d, d), |_| rng.random_range(-1.0..1.0));
            let mut c = Array2::zeros((d, d));
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        c[[i, j]] += a[[i, k]] * a[[j, k]];
                    }
                }
            }
            c
        };
        let ga = stats(
            &(0..d).map(|i| i as f64 / 3.0).collect::<Vec<_>>(),
            mk(&mut rng),
        );
        let gb = stats(
            &(0..d).map(|i| -(i as f64) / 4.0).collect::<Vec<_>>(),
            mk(&mut rng),
        );
        assert!(frechet_distance(&ga, &ga).unwrap() <= 1e-8);
        let ab = frechet_distance(&ga, &gb).unwrap();
        let ba = frechet_distance(&gb, &ga).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab >= 0.0);
    }

    #[test]
    fn frechet_equal_covariance_reduces_to_mean_distance() {
        // closed form: trace terms cancel when Σ_a = Σ_b
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = 4;
        let a = Array2::from_shape_fn((d, d), |_| rng.random_range(-1.0..1.0));
        let mut cov = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    cov[[i, j]] += a[[i, k]] * a[[j, k]];
                }
            }
        }
        let mu_a = [0.3, -0.2, 0.9, 0.0];
        let mu_b = [1.3, 0.4, -0.1, 0.5];
        let expected: f64 = mu_a
            .iter()
            .zip(mu_b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let got = frechet_distance(&stats(&mu_a, cov.clone()), &stats(&mu_b, cov)).unwrap();
        assert!((got - expected).abs() / expected <= 1e-6);
    }

    #[test]
    fn frechet_diagonal_closed_form() {
        // commuting diagonal covariances: Σ(√σ_a − √σ_b)² + ‖Δμ‖²
        let sa = [0.5, 1.0, 2.0];
        let sb = [1.5, 0.25, 3.0];
        let mu_a = [0.0, 1.0, -1.0];
        let mu_b = [0.5, 0.0, 0.0];
        let diag = |s: &[f64]| {
            Array2::from_shape_fn((3, 3), |(i, j)| if i == j { s[i] } else { 0.0 })
        };
        let expected: f64 = sa
            .iter()
            .zip(sb.iter())
            .map(|(x, y): (&f64, &f64)| {
                let d = x.sqrt() - y.sqrt();
                d * d
            })
            .sum::<f64>()
            + mu_a
                .iter()
                .zip(mu_b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        let got = frechet_distance(&stats(&mu_a, diag(&sa)), &stats(&mu_b, diag(&sb))).unwrap();
        assert!((got - expected).abs() / expected <= 1e-6);
    }

    #[test]
    fn fid_identical_and_shuffled_sets_are_zero() {
        let backbone = PerceptualBackbone::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let imgs = Array4::from_shape_fn((6, 3, 16, 16), |_| rng.random_range(0.0..1.0));
        assert!(fid(&imgs, &imgs, &backbone).unwrap() <= 1e-10);
        // shuffled copy: same feature set, same Gaussian
        let perm = [3usize, 0, 5, 1, 4, 2];
        let shuffled = Array4::from_shape_fn((6, 3, 16, 16), |(b, c, y, x)| {
            imgs[[perm[b], c, y, x]]
        });
        assert!(fid(&imgs, &shuffled, &backbone).unwrap() <= 1e-10);
    }

    #[test]
    fn fid_increases_with_brightness_shift() {
        let backbone = PerceptualBackbone::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        // keep headroom so the shift never clips
        let imgs = Array4::from_shape_fn((8, 3, 16, 16), |_| rng.random_range(0.0..0.6));
        let mut last = 0.0;
        for shift in [0.1, 0.2, 0.3] {
            let shifted = imgs.mapv(|v| v + shift);
            let d = fid(&imgs, &shifted, &backbone).unwrap();
            assert!(d > last, "shift {shift}: {d} not > {last}");
            last = d;
        }
    }

    #[test]
    fn roc_perfect_separation_and_all_ties() {
        let labels = vec![
            Label::Anomaly,
            Label::Anomaly,
            Label::Normal,
            Label::Normal,
        ];
        let curve = roc_curve(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap();
        assert!((curve.auc - 1.0).abs() < 1e-12);
        assert_eq!(curve.points.first().unwrap().1, 0.0);
        assert_eq!(curve.points.first().unwrap().2, 0.0);
        assert_eq!(curve.points.last().unwrap().1, 1.0);
        assert_eq!(curve.points.last().unwrap().2, 1.0);

        let curve = roc_curve(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap();
        assert!((curve.auc - 0.5).abs() < 1e-12);
        // a single diagonal segment: (0,0) then (1,1)
        assert_eq!(curve.points.len(), 2);
    }

    #[test]
    fn roc_rejects_single_class() {
        assert!(matches!(
            roc_curve(&[0.1, 0.2], &[Label::Normal, Label::Normal]),
            Err(MetricError::SingleClass)
        ));
    }

    /// Mann-Whitney oracle (pairs, ties ½) over every score list of length
    /// ≤ 8 with scores from {0, ½, 1} and both labels present. Exact match.
    #[test]
    fn roc_auc_equals_mann_whitney_exhaustively() {
        let score_alphabet = [0.0, 0.5, 1.0];
        for len in 2..=8usize {
            let combos = 6usize.pow(len as u32);
            for code in 0..combos {
                let mut c = code;
                let mut scores = Vec::with_capacity(len);
                let mut labels = Vec::with_capacity(len);
                for _ in 0..len {
                    scores.push(score_alphabet[c % 3]);
                    labels.push(if (c / 3) % 2 == 0 {
                        Label::Normal
                    } else {
                        Label::Anomaly
                    });
                    c /= 6;
                }
                let pos = labels.iter().filter(|&&l| l == Label::Anomaly).count();
                if pos == 0 || pos == len {
                    continue;
                }
                let auc = roc_curve(&scores, &labels).unwrap().auc;
                // O(n²) oracle
                let mut wins = 0.0;
                let mut pairs = 0.0;
                for i in 0..len {
                    if labels[i] != Label::Anomaly {
                        continue;
                    }
                    for j in 0..len {
                        if labels[j] != Label::Normal {
                            continue;
                        }
                        pairs += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
                let oracle = wins / pairs;
                assert!(
                    (auc - oracle).abs() < 1e-12,
                    "len {len} code {code}: auc {auc} vs oracle {oracle}"
                );
            }
        }
    }

    #[test]
    fn roc_auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<Label> = (0..50)
            .map(|i| {
                if (i + usize::from(rng.random_range(0..3) == 0)) % 3 == 0 {
                    Label::Anomaly
                } else {
                    Label::Normal
                }
            })
            .collect();
        let base = roc_curve(&scores, &labels).unwrap().auc;
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 7.0).collect();
        let got = roc_curve(&warped, &labels).unwrap().auc;
        assert!((base - got).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// AUC stays in [0, 1]; the curve runs (0,0) → (1,1) with both
            /// rates nondecreasing, for arbitrary score/label lists.
            #[test]
            fn roc_curve_structure(
                scores in proptest::collection::vec(0.0f64..1.0, 2..40),
                flags in proptest::collection::vec(proptest::bool::ANY, 2..40),
            ) {
                let n = scores.len().min(flags.len());
                let scores = &scores[..n];
                let labels: Vec<Label> = flags[..n]
                    .iter()
                    .map(|&b| if b { Label::Anomaly } else { Label::Normal })
                    .collect();
                let pos = labels.iter().filter(|&&l| l == Label::Anomaly).count();
                prop_assume!(pos > 0 && pos < n);
                let curve = roc_curve(scores, &labels).unwrap();
                prop_assert!((0.0..=1.0).contains(&curve.auc));
                let first = curve.points.first().unwrap();
                let last = curve.points.last().unwrap();
                prop_assert_eq!((first.1, first.2), (0.0, 0.0));
                prop_assert_eq!((last.1, last.2), (1.0, 1.0));
                for w in curve.points.windows(2) {
                    prop_assert!(w[1].1 >= w[0].1 && w[1].2 >= w[0].2);
                    prop_assert!(w[1].0 <= w[0].0, "thresholds descending");
                }
            }
        }
    }

    #[test]
    fn tpr_fpr_cases() {
        let truth = vec![
            Label::Anomaly,
            Label::Anomaly,
            Label::Normal,
            Label::Normal,
        ];
        assert_eq!(tpr_fpr(&truth, &truth).unwrap(), (1.0, 0.0));
        let all_anom = vec![Label::Anomaly; 4];
        assert_eq!(tpr_fpr(&all_anom, &truth).unwrap(), (1.0, 1.0));
        // permutation invariance
        let pred = vec![
            Label::Anomaly,
            Label::Normal,
            Label::Anomaly,
            Label::Normal,
        ];
        let (tpr1, fpr1) = tpr_fpr(&pred, &truth).unwrap();
        let perm = [2usize, 0, 3, 1];
        let pred_p: Vec<Label> = perm.iter().map(|&i| pred[i]).collect();
        let truth_p: Vec<Label> = perm.iter().map(|&i| truth[i]).collect();
        assert_eq!(tpr_fpr(&pred_p, &truth_p).unwrap(), (tpr1, fpr1));
        // degenerate inputs are errors, not NaN
        let all_norm = vec![Label::Normal; 4];
        assert!(matches!(
            tpr_fpr(&pred, &all_norm),
            Err(MetricError::NoPositives)
        ));
        assert!(matches!(
            tpr_fpr(&pred, &all_anom),
            Err(MetricError::NoNegatives)
        ));
    }
}
