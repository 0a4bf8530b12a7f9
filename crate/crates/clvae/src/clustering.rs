//! Test-time classification: k-means over flattened latent codes with a
//! majority-vote cluster→label mapping, plus a 2-D PCA projection for
//! latent-space scatter exports.
//!
//! Fitting works on a canonically ordered copy of the inputs (sorted
//! lexicographically), so results are bit-identical under any permutation
//! of the training input order, given the same seed.

use crate::datamodel::Label;
use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub type ClusterResult<T> = Result<T, ClusterError>;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least {k} distinct points, got {distinct}")]
    TooFewDistinctPoints { k: usize, distinct: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("inconsistent point dimension: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("need at least {0} points for PCA, got {1}")]
    TooFewPointsForPca(usize, usize),
    #[error("model has no cluster-to-label mapping yet")]
    Unmapped,
    #[error("labels must accompany every latent")]
    MissingLabels,
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const CONVERGENCE_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 300;

/// Fitted k-means model over flattened latent vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index → label; `None` until mapped against labeled data.
    pub cluster_to_label: Option<Vec<Label>>,
    /// Within-cluster sum of squared distances at convergence.
    pub inertia: f64,
    pub seed: u64,
}

fn dim_checked(points: &[Vec<f64>]) -> ClusterResult<usize> {
    let d = points.first().ok_or(ClusterError::EmptyInput)?.len();
    for p in points {
        if p.len() != d {
            return Err(ClusterError::DimMismatch(d, p.len()));
        }
    }
    Ok(d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Indices sorted by lexicographic point order; ties keep index order.
fn canonical_order(points: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(points[b].iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic given the seed
/// and invariant to input order. Iterates until the maximum centroid shift
/// drops below 1e-6 or 300 iterations.
pub fn kmeans_fit(latents: &[Vec<f64>], k: usize, seed: u64) -> ClusterResult<ClusterModel> {
    let _d = dim_checked(latents)?;
    let order = canonical_order(latents);
    // distinct count on the canonical ordering (equal points are adjacent)
    let distinct = 1 + order
        .windows(2)
        .filter(|w| latents[w[0]] != latents[w[1]])
        .count();
    if distinct < k || k == 0 {
        return Err(ClusterError::TooFewDistinctPoints { k, distinct });
    }
    let canon: Vec<&Vec<f64>> = order.iter().map(|&i| &latents[i]).collect();
    let n = canon.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ over the canonical order
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(canon[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = canon.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let dist = WeightedIndex::new(&d2).expect("positive total weight");
            dist.sample(&mut rng)
        } else {
            rng.random_range(0..n)
        };
        centroids.push(canon[next].clone());
        let newest = centroids.last().expect("just pushed").clone();
        for (di, p) in d2.iter_mut().zip(canon.iter()) {
            let d = sq_dist(p, &newest);
            if d < *di {
                *di = d;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut prev_sse = f64::INFINITY;
    for _iter in 0..MAX_ITERS {
        // assign
        let mut sse = 0.0;
        for (a, p) in assignments.iter_mut().zip(canon.iter()) {
            let (c, d) = nearest(&centroids, p);
            *a = c;
            sse += d;
        }
        // Lloyd's iterations never increase the within-cluster SSE
        assert!(
            sse <= prev_sse * (1.0 + 1e-12) + 1e-12,
            "SSE increased: {prev_sse} -> {sse}"
        );
        prev_sse = sse;

        // update (accumulate in canonical order for bit determinism)
        let dims = canon[0].len();
        let mut sums = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(canon.iter()) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut new_centroids = centroids.clone();
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its
                // assigned centroid; ties break on canonical position
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(canon[a], &centroids[assignments[a]])
                            .total_cmp(&sq_dist(canon[b], &centroids[assignments[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("nonempty input");
                new_centroids[c] = canon[far].clone();
                continue;
            }
            for (nc, s) in new_centroids[c].iter_mut().zip(sums[c].iter()) {
                *nc = s / counts[c] as f64;
            }
        }

        let shift = centroids
            .iter()
            .zip(new_centroids.iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centroids = new_centroids;
        if shift < CONVERGENCE_TOL {
            break;
        }
    }

    let inertia = canon
        .iter()
        .map(|p| nearest(&centroids, p).1)
        .sum::<f64>();
    Ok(ClusterModel {
        k,
        centroids,
        cluster_to_label: None,
        inertia,
        seed,
    })
}

/// Maps each cluster to its majority label. For k = 2 the mapping is kept
/// bijective: on a tie, or when both clusters share the same majority, the
/// cluster with the higher anomaly fraction becomes the anomaly cluster
/// (equal fractions: the higher cluster index).
pub fn map_clusters_to_labels(
    mut model: ClusterModel,
    latents: &[Vec<f64>],
    labels: &[Label],
) -> ClusterResult<ClusterModel> {
    if latents.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if latents.len() != labels.len() {
        return Err(ClusterError::MissingLabels);
    }
    let mut anomaly = vec![0usize; model.k];
    let mut total = vec![0usize; model.k];
    for (p, &label) in latents.iter().zip(labels.iter()) {
        let (c, _) = nearest(&model.centroids, p);
        total[c] += 1;
        if label == Label::Anomaly {
            anomaly[c] += 1;
        }
    }
    let fraction = |c: usize| {
        if total[c] == 0 {
            0.0
        } else {
            anomaly[c] as f64 / total[c] as f64
        }
    };
    let majority: Vec<Label> = (0..model.k)
        .map(|c| {
            if fraction(c) > 0.5 {
                Label::Anomaly
            } else {
                Label::Normal
            }
        })
        .collect();
    let mapping = if model.k == 2 {
        let bijective = majority[0] != majority[1]
            && fraction(0) != 0.5
            && fraction(1) != 0.5;
        if bijective {
            majority
        } else {
            let anomaly_cluster = match fraction(1).total_cmp(&fraction(0)) {
                std::cmp::Ordering::Less => 0,
                _ => 1,
            };
            (0..2)
                .map(|c| {
                    if c == anomaly_cluster {
                        Label::Anomaly
                    } else {
                        Label::Normal
                    }
                })
                .collect()
        }
    } else {
        majority
    };
    model.cluster_to_label = Some(mapping);
    Ok(model)
}

/// Classifies a latent vector by its nearest centroid. An exact distance
/// tie resolves to anomaly.
pub fn classify(model: &ClusterModel, latent: &[f64]) -> ClusterResult<Label> {
    let mapping = model
        .cluster_to_label
        .as_ref()
        .ok_or(ClusterError::Unmapped)?;
    let dists: Vec<f64> = model
        .centroids
        .iter()
        .map(|c| sq_dist(c, latent))
        .collect();
    let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let tied_anomaly = dists
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == best)
        .any(|(c, _)| mapping[c] == Label::Anomaly);
    if tied_anomaly {
        Ok(Label::Anomaly)
    } else {
        let (c, _) = nearest(&model.centroids, latent);
        Ok(mapping[c])
    }
}

/// Top-2 principal directions of the (centered) latent cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    /// Two orthonormal component vectors, rows of a 2×d matrix.
    pub components: Vec<Vec<f64>>,
    /// Explained variances of the two components, nonincreasing.
    pub explained_variance: (f64, f64),
    pub mean: Vec<f64>,
}

impl PcaProjection {
    pub fn project(&self, point: &[f64]) -> (f64, f64) {
        let mut out = [0.0; 2];
        for (o, comp) in out.iter_mut().zip(self.components.iter()) {
            *o = point
                .iter()
                .zip(self.mean.iter())
                .zip(comp.iter())
                .map(|((x, m), c)| (x - m) * c)
                .sum();
        }
        (out[0], out[1])
    }
}

/// Fits a 2-component PCA on the latents and returns the projection plus
/// the projected points in input order. Requires at least 3 points.
pub fn pca_fit_project(latents: &[Vec<f64>]) -> ClusterResult<(PcaProjection, Vec<(f64, f64)>)> {
    let d = dim_checked(latents)?;
    let n = latents.len();
    if n < 3 {
        return Err(ClusterError::TooFewPointsForPca(3, n));
    }
    let mut mean = vec![0.0; d];
    for p in latents {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // centered data matrix X (n × d)
    let x = DMatrix::from_fn(n, d, |i, j| latents[i][j] - mean[j]);

    // eigendecompose the smaller of XᵀX (d×d) and XXᵀ (n×n)
    let scale = 1.0 / (n as f64 - 1.0);
    let (mut comps, mut vars): (Vec<DVector<f64>>, Vec<f64>) = if d <= n {
        let cov = (x.transpose() * &x) * scale;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        (
            idx.iter()
                .take(2)
                .map(|&i| eig.eigenvectors.column(i).into_owned())
                .collect(),
            idx.iter()
                .take(2)
                .map(|&i| eig.eigenvalues[i].max(0.0))
                .collect(),
        )
    } else {
        // dual form: eigenvectors u of XXᵀ give components Xᵀu/‖Xᵀu‖
        let gram = (&x * x.transpose()) * scale;
        let eig = nalgebra::SymmetricEigen::new(gram);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut comps = Vec::new();
        let mut vars = Vec::new();
        for &i in idx.iter().take(2) {
            let lambda = eig.eigenvalues[i].max(0.0);
            let u = eig.eigenvectors.column(i);
            let v = x.transpose() * u;
            let norm = v.norm();
            if norm > 1e-12 {
                comps.push(v / norm);
            } else {
                comps.push(DVector::zeros(d));
            }
            vars.push(lambda);
        }
        (comps, vars)
    };

    // degenerate second directions get a deterministic orthonormal filler
    for i in 0..comps.len() {
        if comps[i].norm() < 1e-12 || vars[i] <= 1e-300 {
            vars[i] = vars[i].max(0.0);
            let mut filler = DVector::zeros(d);
            'basis: for b in 0..d {
                let mut cand = DVector::zeros(d);
                cand[b] = 1.0;
                for prev in comps.iter().take(i) {
                    let proj = prev.dot(&cand);
                    cand -= prev * proj;
                }
                if cand.norm() > 1e-6 {
                    filler = cand.normalize();
                    break 'basis;
                }
            }
            comps[i] = filler;
        }
    }
    // re-orthonormalize against roundoff
    if comps.len() == 2 {
        let proj = comps[0].dot(&comps[1]);
        let adjusted = &comps[1] - &comps[0] * proj;
        if adjusted.norm() > 1e-12 {
            comps[1] = adjusted.normalize();
        }
    }

    let projection = PcaProjection {
        components: comps
            .iter()
            .map(|c| c.iter().copied().collect())
            .collect(),
        explained_variance: (vars[0], vars[1]),
        mean,
    };
    let points = latents.iter().map(|p| projection.project(p)).collect();
    Ok((projection, points))
}

/// One row of the latent scatter export.
#[derive(Debug, Clone, Serialize)]
pub struct ScatterRow {
    pub id: String,
    pub pc1: f64,
    pub pc2: f64,
    pub true_label: Label,
    pub predicted_label: Label,
    pub dataset: String,
}

/// Writes scatter rows as CSV
/// (`id, pc1, pc2, true_label, predicted_label, dataset`).
pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> ClusterResult<()> {
    let io_err = |source| ClusterError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    writeln!(f, "id,pc1,pc2,true_label,predicted_label,dataset").map_err(io_err)?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.id, r.pc1, r.pc2, r.true_label, r.predicted_label, r.dataset
        )
        .map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn blob(center: &[f64], n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|c| c + rng.sample(normal))
                    .collect::<Vec<f64>>()
            })
            .collect()
    }

    #[test]
    fn two_points_become_the_centroids() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let model = kmeans_fit(&pts, 2, 0).unwrap();
        let mut cs = model.centroids.clone();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, pts);
        assert!(model.inertia.abs() < 1e-18);
    }

    #[test]
    fn too_few_distinct_points_rejected() {
        let pts = vec![vec![1.0, 2.0]; 5];
        assert!(matches!(
            kmeans_fit(&pts, 2, 0),
            Err(ClusterError::TooFewDistinctPoints { .. })
        ));
    }

    #[test]
    fn same_seed_identical_centroids_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = blob(&[0.0; 4], 20, 0.5, &mut rng);
        pts.extend(blob(&[5.0, 0.0, 0.0, 0.0], 20, 0.5, &mut rng));
        let a = kmeans_fit(&pts, 2, 42).unwrap();
        let b = kmeans_fit(&pts, 2, 42).unwrap();
        for (ca, cb) in a.centroids.iter().zip(b.centroids.iter()) {
            for (x, y) in ca.iter().zip(cb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn permutation_of_inputs_does_not_change_classification() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = blob(&[0.0; 3], 30, 0.4, &mut rng);
        pts.extend(blob(&[4.0, 4.0, 0.0], 30, 0.4, &mut rng));
        let model_a = kmeans_fit(&pts, 2, 7).unwrap();
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng);
        let model_b = kmeans_fit(&shuffled, 2, 7).unwrap();
        for (ca, cb) in model_a.centroids.iter().zip(model_b.centroids.iter()) {
            for (x, y) in ca.iter().zip(cb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    /// Brute-force oracle: best 2-partition by within-cluster SSE on a small
    /// subsample; k-means on two well-separated blobs must match it.
    #[test]
    fn separated_blobs_recover_generating_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = blob(&[-5.0, 0.0], 20, 0.1, &mut rng);
        let b = blob(&[5.0, 0.0], 20, 0.1, &mut rng);
        let mut pts = a.clone();
        pts.extend(b.clone());
        let model = kmeans_fit(&pts, 2, 11).unwrap();
        // generating labels must match cluster assignment
        let assign_of = |p: &Vec<f64>| nearest(&model.centroids, p).0;
        let ca = assign_of(&pts[0]);
        assert!(a.iter().all(|p| assign_of(p) == ca));
        assert!(b.iter().all(|p| assign_of(p) != ca));

        // exhaustive best-SSE 2-partition on a 10-point subsample
        let sub: Vec<Vec<f64>> = pts.iter().step_by(4).cloned().collect();
        assert_eq!(sub.len(), 10);
        let sse_of = |mask: u32| -> f64 {
            let mut groups = [Vec::new(), Vec::new()];
            for (i, p) in sub.iter().enumerate() {
                groups[usize::from(mask >> i & 1 == 1)].push(p.clone());
            }
            if groups[0].is_empty() || groups[1].is_empty() {
                return f64::INFINITY;
            }
            groups
                .iter()
                .map(|g| {
                    let d = g[0].len();
                    let mut mean = vec![0.0; d];
                    for p in g {
                        for (m, v) in mean.iter_mut().zip(p) {
                            *m += v;
                        }
                    }
                    for m in &mut mean {
                        *m /= g.len() as f64;
                    }
                    g.iter().map(|p| sq_dist(p, &mean)).sum::<f64>()
                })
                .sum()
        };
        let best_mask = (1u32..(1 << 10) - 1).min_by(|&x, &y| sse_of(x).total_cmp(&sse_of(y)));
        let best_mask = best_mask.unwrap();
        // the oracle's best partition groups the sub-points exactly like k-means
        let km_side: Vec<bool> = sub.iter().map(|p| assign_of(p) == ca).collect();
        let oracle_side: Vec<bool> = (0..10).map(|i| best_mask >> i & 1 == 1).collect();
        let same = km_side == oracle_side;
        let flipped = km_side.iter().zip(&oracle_side).all(|(a, b)| a != b);
        assert!(same || flipped);
    }

    #[test]
    fn mapping_identity_when_clusters_pure() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![5.0, 5.0],
            vec![5.1, 5.0],
        ];
        let labels = vec![
            Label::Normal,
            Label::Normal,
            Label::Anomaly,
            Label::Anomaly,
        ];
        let model = kmeans_fit(&pts, 2, 0).unwrap();
        let model = map_clusters_to_labels(model, &pts, &labels).unwrap();
        let mapping = model.cluster_to_label.clone().unwrap();
        assert_eq!(mapping.len(), 2);
        assert_ne!(mapping[0], mapping[1]);
        for (p, l) in pts.iter().zip(labels.iter()) {
            assert_eq!(classify(&model, p).unwrap(), *l);
        }
    }

    #[test]
    fn tie_breaks_toward_higher_anomaly_fraction() {
        // cluster around 0 is a 50/50 tie; cluster around 5 is pure normal
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![5.0, 0.0],
            vec![5.1, 0.0],
        ];
        let labels = vec![
            Label::Anomaly,
            Label::Normal,
            Label::Normal,
            Label::Normal,
        ];
        let model = kmeans_fit(&pts, 2, 1).unwrap();
        let model = map_clusters_to_labels(model, &pts, &labels).unwrap();
        // the tied cluster (higher anomaly fraction) becomes anomaly
        assert_eq!(classify(&model, &[0.05, 0.0]).unwrap(), Label::Anomaly);
        assert_eq!(classify(&model, &[5.05, 0.0]).unwrap(), Label::Normal);
    }

    #[test]
    fn shared_majority_stays_bijective() {
        // both clusters majority-normal; the one with more anomalies maps
        // to anomaly anyway
        let pts = vec![
            vec![0.0],
            vec![0.1],
            vec![0.2],
            vec![5.0],
            vec![5.1],
            vec![5.2],
        ];
        let labels = vec![
            Label::Normal,
            Label::Normal,
            Label::Normal,
            Label::Normal,
            Label::Normal,
            Label::Anomaly,
        ];
        let model = kmeans_fit(&pts, 2, 2).unwrap();
        let model = map_clusters_to_labels(model, &pts, &labels).unwrap();
        let mapping = model.cluster_to_label.clone().unwrap();
        assert_ne!(mapping[0], mapping[1]);
        assert_eq!(classify(&model, &[5.1]).unwrap(), Label::Anomaly);
        assert_eq!(classify(&model, &[0.1]).unwrap(), Label::Normal);
    }

    /// Oracle: of the two possible bijections, mapping must pick the one
    /// with higher accuracy on random labeled blobs.
    #[test]
    fn mapping_matches_best_bijection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let n_norm = rng.random_range(10..30);
            let n_anom = rng.random_range(10..30);
            let mut pts = blob(&[0.0, 0.0], n_norm, 0.6, &mut rng);
            pts.extend(blob(&[4.0, 3.0], n_anom, 0.6, &mut rng));
            let mut labels = vec![Label::Normal; n_norm];
            labels.extend(vec![Label::Anomaly; n_anom]);
            let model = kmeans_fit(&pts, 2, trial).unwrap();
            let mapped = map_clusters_to_labels(model.clone(), &pts, &labels).unwrap();
            let accuracy = |mapping: [Label; 2]| {
                pts.iter()
                    .zip(labels.iter())
                    .filter(|(p, &l)| mapping[nearest(&model.centroids, p).0] == l)
                    .count()
            };
            let acc_a = accuracy([Label::Normal, Label::Anomaly]);
            let acc_b = accuracy([Label::Anomaly, Label::Normal]);
            let got = mapped.cluster_to_label.unwrap();
            let got_acc = accuracy([got[0], got[1]]);
            assert_eq!(got_acc, acc_a.max(acc_b), "trial {trial}");
        }
    }

    #[test]
    fn classify_prefers_anomaly_on_exact_tie() {
        let model = ClusterModel {
            k: 2,
            centroids: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            cluster_to_label: Some(vec![Label::Normal, Label::Anomaly]),
            inertia: 0.0,
            seed: 0,
        };
        assert_eq!(classify(&model, &[0.0, 5.0]).unwrap(), Label::Anomaly);
        assert_eq!(classify(&model, &[-1.0, 0.0]).unwrap(), Label::Normal);
        assert_eq!(classify(&model, &[1.0, 0.0]).unwrap(), Label::Anomaly);
    }

    #[test]
    fn classify_agrees_with_explicit_distance_comparison() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = ClusterModel {
            k: 2,
            centroids: vec![vec![-2.0, 1.0, 0.5], vec![1.5, -1.0, 2.0]],
            cluster_to_label: Some(vec![Label::Normal, Label::Anomaly]),
            inertia: 0.0,
            seed: 0,
        };
        for _ in 0..100 {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let d0: f64 = sq_dist(&model.centroids[0], &p);
            let d1: f64 = sq_dist(&model.centroids[1], &p);
            let expected = if d1 <= d0 { Label::Anomaly } else { Label::Normal };
            assert_eq!(classify(&model, &p).unwrap(), expected);
        }
    }

    #[test]
    fn classify_requires_mapping() {
        let model = ClusterModel {
            k: 2,
            centroids: vec![vec![0.0], vec![1.0]],
            cluster_to_label: None,
            inertia: 0.0,
            seed: 0,
        };
        assert!(matches!(
            classify(&model, &[0.5]),
            Err(ClusterError::Unmapped)
        ));
    }

    #[test]
    fn pca_line_degenerates_second_variance_to_zero() {
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64, 2.0 * i as f64, 0.0])
            .collect();
        let (proj, _) = pca_fit_project(&pts).unwrap();
        assert!(proj.explained_variance.1.abs() < 1e-9);
        assert!(proj.explained_variance.0 > 0.0);
    }

    #[test]
    fn pca_components_orthonormal_and_mean_projects_to_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (proj, _) = pca_fit_project(&pts).unwrap();
        let dot = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| x * y).sum()
        };
        let c0 = &proj.components[0];
        let c1 = &proj.components[1];
        assert!((dot(c0, c0) - 1.0).abs() < 1e-10);
        assert!((dot(c1, c1) - 1.0).abs() < 1e-10);
        assert!(dot(c0, c1).abs() < 1e-10);
        assert!(proj.explained_variance.0 >= proj.explained_variance.1);
        let origin = proj.project(&proj.mean);
        assert!(origin.0.abs() < 1e-10 && origin.1.abs() < 1e-10);
    }

    #[test]
    fn pca_isotropic_cloud_has_comparable_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..2).map(|_| rng.sample(normal)).collect())
            .collect();
        let (proj, _) = pca_fit_project(&pts).unwrap();
        let (v1, v2) = proj.explained_variance;
        assert!((v1 - v2) / v1 < 0.10, "v1 {v1}, v2 {v2}");
    }

    #[test]
    fn pca_dual_form_matches_covariance_form() {
        // d > n forces the dual path; compare against the direct path on
        // the same data padded into the d <= n regime
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (dual, dual_pts) = pca_fit_project(&pts).unwrap();
        // direct covariance eigenvalues via nalgebra on the same data
        let n = pts.len();
        let d = pts[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let x = DMatrix::from_fn(n, d, |i, j| pts[i][j] - mean[j]);
        let cov = (x.transpose() * &x) / (n as f64 - 1.0);
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        assert!((dual.explained_variance.0 - ev[0]).abs() < 1e-8);
        assert!((dual.explained_variance.1 - ev[1]).abs() < 1e-8);
        // sample variance along each projected axis equals the eigenvalue
        let var_along = |idx: usize| {
            let vals: Vec<f64> = dual_pts
                .iter()
                .map(|p| if idx == 0 { p.0 } else { p.1 })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() as f64 - 1.0)
        };
        assert!((var_along(0) - ev[0]).abs() < 1e-8);
        assert!((var_along(1) - ev[1]).abs() < 1e-8);
    }

    #[test]
    fn pca_needs_three_points() {
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(
            pca_fit_project(&pts),
            Err(ClusterError::TooFewPointsForPca(3, 2))
        ));
    }
}
