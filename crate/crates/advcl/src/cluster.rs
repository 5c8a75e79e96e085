//! Pseudo-supervision stimulus: feature extraction, K-means clustering and
//! pseudo-label tables for an ensemble of cluster counts.
//!
//! K-means canonicalizes its input by sorting rows under a value hash, so
//! permuting the input permutes the assignments identically. Initialization
//! is k-means++ with an explicit seed; Lloyd iterations repair empty
//! clusters by donating the farthest point.

use crate::data::{rng_for, stream, Dataset};
use crate::error::{Error, Result};
use crate::model::RobustModel;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Row-major feature matrix, optionally ℓ2-normalized.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    pub rows: Array2<f64>,
    pub normalized: bool,
}

impl FeatureMatrix {
    pub fn new(rows: Array2<f64>) -> Self {
        FeatureMatrix {
            rows,
            normalized: false,
        }
    }

    /// ℓ2-normalizes every row in place.
    pub fn normalize(mut self) -> Self {
        for mut row in self.rows.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
        }
        self.normalized = true;
        self
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Eval-mode features of every dataset image under the `normal` route, in
/// dataset order, without normalization.
pub fn extract_raw_features(
    model: &RobustModel,
    data: &Dataset,
    batch_size: usize,
) -> Result<Array2<f64>> {
    let mut rows = Array2::<f64>::zeros((data.len(), model.config.feature_dim));
    let mut offset = 0;
    for batch in data.batches(batch_size) {
        let feats = model.extract_features(&batch.images.data)?;
        rows.slice_mut(ndarray::s![offset..offset + feats.nrows(), ..])
            .assign(&feats);
        offset += feats.nrows();
    }
    Ok(rows)
}

/// Eval-mode features of every dataset image under the `normal` route,
/// ℓ2-normalized, in dataset order.
pub fn extract_features(
    model: &RobustModel,
    data: &Dataset,
    batch_size: usize,
) -> Result<FeatureMatrix> {
    Ok(FeatureMatrix::new(extract_raw_features(model, data, batch_size)?).normalize())
}

/// Result of one k-means fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KmeansFit {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Post-update inertia per Lloyd iteration (non-increasing).
    pub inertia_trace: Vec<f64>,
}

fn row_hash(row: &[f64], seed: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for v in row {
        h.update(v.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], row: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Stops after `max_iter`
/// iterations or when centroids shift less than `tol` with stable
/// assignments and no repairs.
pub fn kmeans(features: &FeatureMatrix, k: usize, seed: u64) -> Result<KmeansFit> {
    let n = features.len();
    if k == 0 {
        return Err(Error::Validation("K must be >= 1".into()));
    }
    if k > n {
        return Err(Error::Validation(format!("K = {k} exceeds {n} points")));
    }
    let d = features.rows.ncols();
    // canonical processing order keyed on row values
    let mut order: Vec<usize> = (0..n).collect();
    let hashes: Vec<u64> = (0..n)
        .map(|i| row_hash(features.rows.row(i).as_slice().unwrap(), seed))
        .collect();
    order.sort_by(|&a, &b| {
        hashes[a].cmp(&hashes[b]).then_with(|| {
            let (ra, rb) = (features.rows.row(a), features.rows.row(b));
            ra.iter()
                .partial_cmp(rb.iter())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let rows: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| features.rows.row(i).to_vec())
        .collect();

    let mut rng = rng_for(seed, &[stream::CLUSTER, k as u64]);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(rows[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // duplicates exhausted the spread; take the first point not
            // already a centroid
            (0..n)
                .find(|&i| !centroids.iter().any(|c| sq_dist(c, &rows[i]) == 0.0))
                .unwrap_or(0)
        } else {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        centroids.push(rows[next].clone());
        let last = centroids.last().unwrap();
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, last));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut inertia_trace = Vec::new();
    let mut prev_inertia = f64::INFINITY;
    for _iter in 0..300 {
        // assignment
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let (c, _) = nearest(&centroids, r);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        // empty-cluster repair: donate the globally farthest point
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        let mut repaired = false;
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(&rows[a], &centroids[assignments[a]]);
                    let db = sq_dist(&rows[b], &centroids[assignments[b]]);
                    da.partial_cmp(&db).unwrap()
                });
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = empty;
                counts[empty] = 1;
                repaired = true;
            }
        }
        // update
        let mut sums = vec![vec![0.0; d]; k];
        let mut sizes = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            let a = assignments[i];
            sizes[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut max_shift: f64 = 0.0;
        for c in 0..k {
            if sizes[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / sizes[c] as f64).collect();
            max_shift = max_shift.max(sq_dist(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        let inertia: f64 = rows
            .iter()
            .zip(&assignments)
            .map(|(r, &a)| sq_dist(r, &centroids[a]))
            .sum();
        debug_assert!(
            inertia <= prev_inertia + 1e-9,
            "Lloyd inertia increased: {inertia} > {prev_inertia}"
        );
        inertia_trace.push(inertia);
        prev_inertia = inertia;
        if !changed && !repaired && max_shift < 1e-6 {
            break;
        }
    }
    // final consistency pass in the converged state
    let inertia: f64 = rows
        .iter()
        .zip(&assignments)
        .map(|(r, &a)| sq_dist(r, &centroids[a]))
        .sum();

    // map assignments back to the caller's row order
    let mut out = vec![0usize; n];
    for (pos, &orig) in order.iter().enumerate() {
        out[orig] = assignments[pos];
    }
    Ok(KmeansFit {
        k,
        assignments: out,
        centroids,
        inertia,
        inertia_trace,
    })
}

/// Pseudo-label table: one k-means fit per ensemble cluster count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoLabelTable {
    /// Fingerprint of the feature extractor that produced the features.
    pub extractor_fingerprint: String,
    pub seed: u64,
    pub k_list: Vec<usize>,
    pub fits: Vec<KmeansFit>,
}

impl PseudoLabelTable {
    pub fn labels_for_head(&self, head: usize) -> Result<&[usize]> {
        self.fits
            .get(head)
            .map(|f| f.assignments.as_slice())
            .ok_or_else(|| Error::Validation(format!("no pseudo table for head {head}")))
    }

    pub fn num_samples(&self) -> usize {
        self.fits.first().map_or(0, |f| f.assignments.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = std::fs::File::create(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Independent k-means per ensemble entry, with per-K derived seeds.
pub fn build_pseudo_tables(
    features: &FeatureMatrix,
    k_list: &[usize],
    seed: u64,
    extractor_fingerprint: &str,
) -> Result<PseudoLabelTable> {
    let fits = k_list
        .iter()
        .map(|&k| kmeans(features, k, seed ^ (k as u64).wrapping_mul(0x9e37_79b9)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelTable {
        extractor_fingerprint: extractor_fingerprint.to_string(),
        seed,
        k_list: k_list.to_vec(),
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, Split, SyntheticSpec};
    use crate::model::{Architecture, EncoderConfig};

    fn blob_features(n_per: usize, sep: f64, spread: f64, seed: u64) -> FeatureMatrix {
        let mut rng = rng_for(seed, &[stream::CLUSTER, 99]);
        let mut rows = Array2::<f64>::zeros((2 * n_per, 2));
        for i in 0..2 * n_per {
            let center = if i < n_per { 0.0 } else { sep };
            rows[(i, 0)] = center + rng.gen_range(-spread..spread);
            rows[(i, 1)] = center + rng.gen_range(-spread..spread);
        }
        FeatureMatrix::new(rows)
    }

    #[test]
    fn k1_closed_form() {
        let f = blob_features(8, 5.0, 0.5, 0);
        let fit = kmeans(&f, 1, 7).unwrap();
        assert!(fit.assignments.iter().all(|&a| a == 0));
        let mean: Vec<f64> = (0..2)
            .map(|j| f.rows.column(j).sum() / f.rows.nrows() as f64)
            .collect();
        for (c, m) in fit.centroids[0].iter().zip(&mean) {
            assert!((c - m).abs() < 1e-6);
        }
    }

    #[test]
    fn k_equals_n_distinct_rows_zero_inertia() {
        let f = blob_features(4, 10.0, 1.0, 1);
        let fit = kmeans(&f, f.len(), 3).unwrap();
        assert!(fit.inertia < 1e-12, "inertia {}", fit.inertia);
        let mut seen = vec![false; f.len()];
        for &a in &fit.assignments {
            seen[a] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn k_bounds_rejected() {
        let f = blob_features(4, 10.0, 1.0, 2);
        assert!(matches!(kmeans(&f, 0, 0), Err(Error::Validation(_))));
        assert!(matches!(
            kmeans(&f, f.len() + 1, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn two_blobs_recovered_across_seeds() {
        // inter-center distance >= 10x intra-spread
        let f = blob_features(20, 10.0, 0.5, 3);
        for seed in 0..5u64 {
            let fit = kmeans(&f, 2, seed).unwrap();
            let first = fit.assignments[0];
            assert!(fit.assignments[..20].iter().all(|&a| a == first), "seed {seed}");
            assert!(
                fit.assignments[20..].iter().all(|&a| a == 1 - first),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn lloyd_inertia_monotone() {
        let f = blob_features(30, 3.0, 2.0, 4);
        let fit = kmeans(&f, 5, 11).unwrap();
        for w in fit.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "trace {:?}", fit.inertia_trace);
        }
    }

    #[test]
    fn assignments_consistent_with_centroids() {
        let f = blob_features(25, 4.0, 1.5, 5);
        let fit = kmeans(&f, 4, 13).unwrap();
        for i in 0..f.len() {
            let (c, _) = nearest(&fit.centroids, f.rows.row(i).as_slice().unwrap());
            let d_assigned = sq_dist(
                f.rows.row(i).as_slice().unwrap(),
                &fit.centroids[fit.assignments[i]],
            );
            let d_nearest = sq_dist(f.rows.row(i).as_slice().unwrap(), &fit.centroids[c]);
            assert!(
                (d_assigned - d_nearest).abs() < 1e-12,
                "point {i} assigned at {d_assigned}, nearest {d_nearest}"
            );
        }
        // inertia definition
        let direct: f64 = (0..f.len())
            .map(|i| {
                sq_dist(
                    f.rows.row(i).as_slice().unwrap(),
                    &fit.centroids[fit.assignments[i]],
                )
            })
            .sum();
        assert!((direct - fit.inertia).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariance() {
        let f = blob_features(12, 6.0, 1.0, 6);
        let fit = kmeans(&f, 3, 17).unwrap();
        let n = f.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let mut permuted = Array2::<f64>::zeros((n, 2));
        for (dst, &src) in perm.iter().enumerate() {
            permuted.row_mut(dst).assign(&f.rows.row(src));
        }
        let fit_p = kmeans(&FeatureMatrix::new(permuted), 3, 17).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(fit_p.assignments[dst], fit.assignments[src]);
        }
    }

    #[test]
    fn pseudo_tables_deterministic_and_persisted() {
        let f = blob_features(30, 8.0, 1.0, 7).normalize();
        let a = build_pseudo_tables(&f, &[2, 5, 10], 21, "fp").unwrap();
        let b = build_pseudo_tables(&f, &[2, 5, 10], 21, "fp").unwrap();
        for (fa, fb) in a.fits.iter().zip(b.fits.iter()) {
            assert_eq!(fa.assignments, fb.assignments);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tables.json");
        a.save(&path).unwrap();
        let c = PseudoLabelTable::load(&path).unwrap();
        assert_eq!(c.extractor_fingerprint, "fp");
        assert_eq!(c.k_list, vec![2, 5, 10]);
        for (fa, fc) in a.fits.iter().zip(c.fits.iter()) {
            assert_eq!(fa.assignments, fc.assignments);
            assert_eq!(fa.inertia, fc.inertia);
        }
    }

    #[test]
    fn table_ranges_match_k_list() {
        let f = blob_features(300, 5.0, 2.0, 8);
        let table = build_pseudo_tables(&f, &[2, 10, 50, 100, 500], 3, "fp").unwrap();
        for (fit, &k) in table.fits.iter().zip(&[2usize, 10, 50, 100, 500]) {
            assert_eq!(fit.k, k);
            assert!(fit.assignments.iter().all(|&a| a < k));
            let mut seen = vec![false; k];
            for &a in &fit.assignments {
                seen[a] = true;
            }
            assert!(seen.iter().all(|&s| s), "K={k} has empty clusters");
        }
        // K > n rejected
        let small = blob_features(4, 5.0, 1.0, 9);
        assert!(build_pseudo_tables(&small, &[10], 0, "fp").is_err());
    }

    #[test]
    fn extract_features_unit_norm_and_deterministic() {
        let spec = SyntheticSpec {
            n: 12,
            image_size: 8,
            ..Default::default()
        };
        let data = load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec)).unwrap();
        let model = RobustModel::new(
            EncoderConfig {
                architecture: Architecture::TinyCnn,
                feature_dim: 8,
                projection_dim: 4,
                input_channels: 1,
                input_size: 8,
            },
            0,
        )
        .unwrap();
        let f1 = extract_features(&model, &data, 5).unwrap();
        let f2 = extract_features(&model, &data, 4).unwrap();
        assert_eq!(f1.rows, f2.rows);
        assert_eq!(f1.len(), 12);
        for row in f1.rows.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
