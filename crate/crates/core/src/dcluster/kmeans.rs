//! Spherical k-means on unit-norm rows.

use rand::Rng;

use crate::error::{HexaError, Result};
use crate::tensor::Tensor;

/// Unit-norm centroids and the cluster index of every clustered row.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
}

impl PrototypeBank {
    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    /// Targets of the given rows.
    pub fn targets(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&i| {
                self.assignments.get(i).copied().ok_or_else(|| {
                    HexaError::contract(format!(
                        "image {i} has no assignment (bank covers {} images)",
                        self.assignments.len()
                    ))
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KmeansConfig {
    pub k: usize,
    pub iters: usize,
    pub restarts: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            k: 30,
            iters: 10,
            restarts: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansResult {
    pub bank: PrototypeBank,
    /// `Σ_i z_i · c_{y_i}` of the returned bank.
    pub objective: f64,
    /// Objective after every assignment and centroid step of the kept restart.
    pub trace: Vec<f64>,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn objective(z: &Tensor, c: &Tensor, y: &[usize]) -> f64 {
    y.iter().enumerate().map(|(i, &j)| dot(z.row(i), c.row(j))).sum()
}

/// Index of the most similar centroid (lowest index on ties).
fn nearest(row: &[f32], c: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..c.shape()[0] {
        let s = dot(row, c.row(j));
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

/// k-means++ seeding with cosine distance `1 - z·c`.
fn seed_centroids(z: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
    let n = z.shape()[0];
    let d = z.row_len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| (1.0 - dot(z.row(i), z.row(chosen[0]))).max(0.0)).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total <= 0.0 {
            // Every row coincides with a centroid; take any unused row.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        };
        chosen.push(next);
        for (i, slot) in dist.iter_mut().enumerate() {
            *slot = slot.min((1.0 - dot(z.row(i), z.row(next))).max(0.0));
        }
    }
    let mut c = Tensor::zeros(&[k, d]);
    for (j, &i) in chosen.iter().enumerate() {
        c.row_mut(j).copy_from_slice(z.row(i));
    }
    c
}

fn assign(z: &Tensor, c: &Tensor, y: &mut [usize]) -> bool {
    let mut changed = false;
    for (i, slot) in y.iter_mut().enumerate() {
        let (j, _) = nearest(z.row(i), c);
        changed |= *slot != j;
        *slot = j;
    }
    changed
}

/// Normalized member sums; an empty cluster takes the row least similar to
/// its own centroid, which then moves into it.
fn update(z: &Tensor, c: &mut Tensor, y: &mut [usize]) {
    let (k, d) = (c.shape()[0], c.row_len());
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (i, &j) in y.iter().enumerate() {
        counts[j] += 1;
        for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(z.row(i)) {
            *s += v as f64;
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            continue;
        }
        let norm = sums[j * d..(j + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (o, s) in c.row_mut(j).iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                *o = (s / norm) as f32;
            }
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let far = (0..y.len())
            .filter(|&i| counts[y[i]] > 1)
            .min_by(|&a, &b| {
                dot(z.row(a), c.row(y[a]))
                    .partial_cmp(&dot(z.row(b), c.row(y[b])))
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        if let Some(i) = far {
            counts[y[i]] -= 1;
            counts[j] = 1;
            y[i] = j;
            let row = z.row(i).to_vec();
            c.row_mut(j).copy_from_slice(&row);
        }
    }
}

/// Single-row moves (Hartigan style): move a row to another cluster whenever
/// that raises `Σ_j ‖S_j‖`, the objective at optimal centroids. Lloyd
/// iterations stop at any fixed point of the assignment rule; this escapes
/// the ones a single move can improve.
fn refine(z: &Tensor, k: usize, y: &mut [usize], max_passes: usize) {
    let d = z.row_len();
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (i, &j) in y.iter().enumerate() {
        counts[j] += 1;
        for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(z.row(i)) {
            *s += v as f64;
        }
    }
    let mut sq: Vec<f64> = (0..k).map(|j| sums[j * d..(j + 1) * d].iter().map(|v| v * v).sum()).collect();
    for _ in 0..max_passes {
        let mut moved = false;
        for i in 0..y.len() {
            let a = y[i];
            if counts[a] < 2 {
                continue;
            }
            let row = z.row(i);
            let zz = dot(row, row);
            let dots: Vec<f64> = (0..k)
                .map(|j| sums[j * d..(j + 1) * d].iter().zip(row).map(|(&s, &v)| s * v as f64).sum())
                .collect();
            let without = (sq[a] - 2.0 * dots[a] + zz).max(0.0);
            let loss_a = sq[a].sqrt() - without.sqrt();
            let mut best = (a, 0.0f64);
            for b in (0..k).filter(|&b| b != a) {
                let gain = (sq[b] + 2.0 * dots[b] + zz).max(0.0).sqrt() - sq[b].sqrt() - loss_a;
                if gain > best.1 + 1e-12 {
                    best = (b, gain);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            for (t, &v) in row.iter().enumerate() {
                sums[a * d + t] -= v as f64;
                sums[b * d + t] += v as f64;
            }
            sq[a] = sums[a * d..(a + 1) * d].iter().map(|v| v * v).sum();
            sq[b] = sums[b * d..(b + 1) * d].iter().map(|v| v * v).sum();
            counts[a] -= 1;
            counts[b] += 1;
            y[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
    }
}

fn single_run(z: &Tensor, k: usize, iters: usize, rng: &mut impl Rng) -> KmeansResult {
    let mut c = seed_centroids(z, k, rng);
    let mut y = vec![usize::MAX; z.shape()[0]];
    let mut trace = Vec::with_capacity(2 * iters + 1);
    for _ in 0..iters {
        let changed = assign(z, &c, &mut y);
        trace.push(objective(z, &c, &y));
        if !changed && trace.len() > 1 {
            break;
        }
        update(z, &mut c, &mut y);
        trace.push(objective(z, &c, &y));
    }
    refine(z, k, &mut y, 100);
    update(z, &mut c, &mut y);
    trace.push(objective(z, &c, &y));
    // End on an assignment step so every row sits with its most similar centroid.
    assign(z, &c, &mut y);
    let obj = objective(z, &c, &y);
    trace.push(obj);
    KmeansResult {
        bank: PrototypeBank {
            centroids: c,
            assignments: y,
        },
        objective: obj,
        trace,
    }
}

/// Clusters unit-norm `N×d` rows, keeping the best of `restarts` runs.
pub fn spherical_kmeans(latents: &Tensor, cfg: &KmeansConfig, rng: &mut impl Rng) -> Result<KmeansResult> {
    if latents.ndim() != 2 {
        return Err(HexaError::contract(format!("kmeans expects N×d rows, got {:?}", latents.shape())));
    }
    let n = latents.shape()[0];
    if cfg.k == 0 || n < cfg.k {
        return Err(HexaError::contract(format!("kmeans needs N >= K >= 1, got N={n}, K={}", cfg.k)));
    }
    if cfg.iters == 0 || cfg.restarts == 0 {
        return Err(HexaError::config("kmeans needs at least one iteration and one restart"));
    }
    let mut best: Option<KmeansResult> = None;
    for _ in 0..cfg.restarts {
        let run = single_run(latents, cfg.k, cfg.iters, rng);
        if best.as_ref().is_none_or(|b| run.objective > b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fraction of rows whose cluster changed, after mapping every new cluster
/// to the old cluster most of its members came from.
pub fn assignment_churn(old: &[usize], new: &[usize]) -> Result<f64> {
    if old.len() != new.len() {
        return Err(HexaError::contract("churn: assignment tables differ in length"));
    }
    if old.is_empty() {
        return Ok(0.0);
    }
    let k_new = new.iter().max().map_or(0, |m| m + 1);
    let k_old = old.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![0usize; k_new * k_old];
    for (&o, &n) in old.iter().zip(new) {
        votes[n * k_old + o] += 1;
    }
    let mapping: Vec<usize> = (0..k_new)
        .map(|n| {
            let row = &votes[n * k_old..(n + 1) * k_old];
            (0..k_old).max_by_key(|&o| (row[o], std::cmp::Reverse(o))).unwrap_or(0)
        })
        .collect();
    let changed = old.iter().zip(new).filter(|&(&o, &n)| mapping[n] != o).count();
    Ok(changed as f64 / old.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn angles(deg: &[f32]) -> Tensor {
        let rows: Vec<Vec<f32>> = deg
            .iter()
            .map(|d| {
                let r = d.to_radians();
                vec![r.cos(), r.sin()]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_cluster_is_normalized_mean() {
        let z = angles(&[0.0, 30.0, 60.0]);
        let cfg = KmeansConfig { k: 1, iters: 5, restarts: 1 };
        let r = spherical_kmeans(&z, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.bank.assignments, vec![0, 0, 0]);
        let c = r.bank.centroids.row(0);
        let expected = 30f32.to_radians();
        assert!((c[0] - expected.cos()).abs() < 1e-6 && (c[1] - expected.sin()).abs() < 1e-6);
    }

    #[test]
    fn separates_two_angle_groups() {
        let z = angles(&[0.0, 10.0, 90.0, 100.0]);
        let cfg = KmeansConfig { k: 2, iters: 10, restarts: 3 };
        let r = spherical_kmeans(&z, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y = &r.bank.assignments;
        assert_eq!(y[0], y[1]);
        assert_eq!(y[2], y[3]);
        assert_ne!(y[0], y[2]);
    }

    #[test]
    fn trace_is_monotone_and_assignments_are_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut z = Tensor::randn(&[200, 8], 1.0, &mut rng);
        z.normalize_rows();
        let r = spherical_kmeans(&z, &KmeansConfig { k: 7, iters: 10, restarts: 2 }, &mut rng).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        for (i, &j) in r.bank.assignments.iter().enumerate() {
            assert_eq!(nearest(z.row(i), &r.bank.centroids).0, j);
        }
    }

    fn best_two_partition(z: &Tensor) -> f64 {
        let n = z.shape()[0];
        let d = z.row_len();
        let mut best = f64::NEG_INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut sums = [vec![0.0f64; d], vec![0.0f64; d]];
            for i in 0..n {
                let side = ((mask >> i) & 1) as usize;
                for (s, &v) in sums[side].iter_mut().zip(z.row(i)) {
                    *s += v as f64;
                }
            }
            let obj: f64 = sums.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
            best = best.max(obj);
        }
        best
    }

    #[test]
    fn matches_exhaustive_partition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = KmeansConfig { k: 2, iters: 50, restarts: 10 };
        for trial in 0..300 {
            let n = 3 + trial % 6;
            let mut z = Tensor::randn(&[n, 3], 1.0, &mut rng);
            z.normalize_rows();
            let r = spherical_kmeans(&z, &cfg, &mut rng).unwrap();
            let oracle = best_two_partition(&z);
            assert!(r.objective >= oracle - 1e-6, "trial {trial}: {} < {oracle}", r.objective);
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let z = angles(&[0.0]);
        let err = spherical_kmeans(&z, &KmeansConfig { k: 2, iters: 1, restarts: 1 }, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(HexaError::Contract(_))));
    }

    #[test]
    fn churn_ignores_relabeling() {
        assert_eq!(assignment_churn(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(assignment_churn(&[0, 0, 1, 1], &[1, 1, 0, 1]).unwrap(), 0.25);
    }
}
