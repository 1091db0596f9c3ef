//! Clustering-based data reduction.
//!
//! Sentences are vertices of a complete graph whose edge weights are cosine
//! distances between embeddings. Picking the size-k subset with the largest
//! total edge weight is NP-hard, so the reduction runs k-means and keeps, for
//! every non-empty cluster, the member closest to the centroid in cosine
//! distance. [`brute_force_best_subset`] solves tiny instances exactly so the
//! heuristic can be compared against the true optimum.
//!
//! K-means runs with Euclidean distance on unit-normalized embeddings, which
//! orders neighbours the same way cosine distance does.

use std::path::Path;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Embedding, InferenceBackend};
use crate::corpus::{read_json_lines, write_json_lines, SentenceLookup};
use crate::error::{Error, Result};
use crate::filter::{QueryPool, Stage};

pub const DEFAULT_ITERATIONS: usize = 300;
pub const EXHAUSTIVE_LIMIT: u128 = 200_000;

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn squared_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub(crate) fn cosine_distance_f64(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector { cluster: None });
    }
    Ok((1.0 - dot(u, v) / (nu * nv)).clamp(0.0, 2.0))
}

/// `1 - cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &Embedding, v: &Embedding) -> Result<f64> {
    cosine_distance_f64(&u.to_f64(), &v.to_f64())
}

fn normalized(points: &[Embedding]) -> Result<Vec<Vec<f64>>> {
    let dim = points.first().map(Embedding::dim).unwrap_or(0);
    points
        .iter()
        .map(|p| {
            if p.dim() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    found: p.dim(),
                });
            }
            let v = p.to_f64();
            let n = norm(&v);
            if n == 0.0 {
                return Err(Error::DegenerateVector { cluster: None });
            }
            Ok(v.into_iter().map(|x| x / n).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Centroids in the normalized embedding space.
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations_run: usize,
    pub inertia: f64,
    /// Inertia after the initial assignment and after every iteration.
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn non_empty_clusters(&self) -> usize {
        self.cluster_sizes().iter().filter(|&&s| s > 0).count()
    }
}

/// Nearest centroid per point; equal distances go to the lower index.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .par_iter()
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_distance(p, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

/// Mean of each cluster's members, summed in point order. Clusters that
/// lost all members keep their previous centroid.
fn update(points: &[Vec<f64>], assignment: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p) {
            *s += x;
        }
    }
    for ((centroid, sum), count) in centroids.iter_mut().zip(sums).zip(counts) {
        if count > 0 {
            *centroid = sum.into_iter().map(|s| s / count as f64).collect();
        }
    }
}

/// k-means++ seeding: the first point uniformly, each further point with
/// probability proportional to its squared distance from the nearest chosen
/// one. When every remaining weight is zero the lowest unchosen index is
/// taken. Returned indices are sorted.
fn seed_centroids(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut taken = vec![false; points.len()];
    taken[chosen[0]] = true;
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest
            .iter()
            .zip(&taken)
            .filter(|(_, t)| !**t)
            .map(|(d, _)| d)
            .sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in nearest.iter().enumerate() {
                if taken[i] || *d == 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total weight")
        } else {
            taken.iter().position(|t| !t).expect("k <= n")
        };
        taken[next] = true;
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[next]));
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Lloyd's k-means for at most `t` iterations, stopping early once the
/// assignment stops changing.
pub fn kmeans(points: &[Embedding], k: usize, t: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    if k > points.len() {
        return Err(Error::KTooLarge { k, n: points.len() });
    }
    if t == 0 {
        return Err(Error::InvalidValue("k-means needs at least one iteration".into()));
    }
    let pts = normalized(points)?;
    let init = seed_centroids(&pts, k, seed);
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| pts[i].clone()).collect();

    let (mut assignment, dists) = assign(&pts, &centroids);
    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations_run = 0;
    for _ in 0..t {
        update(&pts, &assignment, &mut centroids);
        let (next, dists) = assign(&pts, &centroids);
        iterations_run += 1;
        trace.push(dists.iter().sum());
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
    }
    Ok(ClusterModel {
        centroids,
        assignment,
        iterations_run,
        inertia: *trace.last().unwrap(),
        inertia_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterChoice {
    pub cluster: usize,
    pub id: u64,
    pub distance_to_centroid: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionResult {
    /// Chosen ids, sorted ascending.
    pub representatives: QueryPool,
    pub objective_value: f64,
    pub per_cluster_choice: Vec<ClusterChoice>,
    pub iterations_run: usize,
    pub inertia: f64,
}

/// For every non-empty cluster, the member with the smallest cosine distance
/// to its centroid (smallest id on ties).
pub fn select_representatives(
    model: &ClusterModel,
    points: &[Embedding],
    ids: &[u64],
) -> Result<ReductionResult> {
    if points.len() != model.assignment.len() || ids.len() != points.len() {
        return Err(Error::Shape {
            expected: model.assignment.len(),
            found: points.len().min(ids.len()),
        });
    }
    let mut best: Vec<Option<(f64, u64, usize)>> = vec![None; model.k()];
    for (i, (p, &c)) in points.iter().zip(&model.assignment).enumerate() {
        let d = cosine_distance_f64(&p.to_f64(), &model.centroids[c]).map_err(|e| match e {
            Error::DegenerateVector { .. } if norm(&model.centroids[c]) == 0.0 => {
                Error::DegenerateVector { cluster: Some(c) }
            }
            other => other,
        })?;
        let better = match best[c] {
            None => true,
            Some((bd, bid, _)) => d < bd || (d == bd && ids[i] < bid),
        };
        if better {
            best[c] = Some((d, ids[i], i));
        }
    }
    let mut per_cluster_choice = Vec::new();
    let mut chosen_idx = Vec::new();
    for (cluster, b) in best.iter().enumerate() {
        if let Some((d, id, i)) = *b {
            per_cluster_choice.push(ClusterChoice {
                cluster,
                id,
                distance_to_centroid: d,
            });
            chosen_idx.push(i);
        }
    }
    let objective_value = drc_objective(&chosen_idx, points)?.value;
    let mut rep_ids: Vec<u64> = per_cluster_choice.iter().map(|c| c.id).collect();
    rep_ids.sort_unstable();
    Ok(ReductionResult {
        representatives: QueryPool::new(rep_ids, Stage::Reduced)?,
        objective_value,
        per_cluster_choice,
        iterations_run: model.iterations_run,
        inertia: model.inertia,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub value: f64,
    /// Set when the subset has fewer than two members and no edges.
    pub degenerate: bool,
}

/// Sum of cosine distances over all unordered pairs of `subset` (indices
/// into `embeddings`).
pub fn drc_objective(subset: &[usize], embeddings: &[Embedding]) -> Result<Objective> {
    if let Some(&bad) = subset.iter().find(|&&i| i >= embeddings.len()) {
        return Err(Error::InvalidValue(format!("subset index {bad} out of range")));
    }
    if subset.len() < 2 {
        return Ok(Objective {
            value: 0.0,
            degenerate: true,
        });
    }
    let vecs: Vec<Vec<f64>> = subset.iter().map(|&i| embeddings[i].to_f64()).collect();
    let mut value = 0.0;
    for a in 0..vecs.len() {
        for b in a + 1..vecs.len() {
            value += cosine_distance_f64(&vecs[a], &vecs[b])?;
        }
    }
    Ok(Objective {
        value,
        degenerate: false,
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exact maximizer of [`drc_objective`] over all size-k subsets. Returns the
/// lexicographically smallest subset among ties.
pub fn brute_force_best_subset(embeddings: &[Embedding], k: usize) -> Result<(Vec<usize>, f64)> {
    let n = embeddings.len();
    if k == 0 {
        return Err(Error::InvalidK);
    }
    if k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let combinations = binomial(n, k);
    if combinations > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge {
            combinations,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let vecs: Vec<Vec<f64>> = embeddings.iter().map(Embedding::to_f64).collect();
    let mut dist = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let d = cosine_distance_f64(&vecs[a], &vecs[b])?;
            dist[a][b] = d;
            dist[b][a] = d;
        }
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for subset in (0..n).combinations(k) {
        let value: f64 = subset
            .iter()
            .tuple_combinations()
            .map(|(&a, &b)| dist[a][b])
            .sum();
        if best.as_ref().is_none_or(|(_, bv)| value > *bv) {
            best = Some((subset, value));
        }
    }
    Ok(best.expect("at least one subset"))
}

/// Embed the pool, cluster it into `k` groups and keep one representative per
/// non-empty cluster. Points are processed in id order, so the result does not
/// depend on the order of the input pool.
pub fn reduce<L: SentenceLookup + ?Sized>(
    pool: &QueryPool,
    lookup: &L,
    backend: &dyn InferenceBackend,
    k: usize,
    t: usize,
    seed: u64,
) -> Result<ReductionResult> {
    pool.expect_stage(Stage::Filtered)?;
    if k == 0 {
        return Err(Error::InvalidK);
    }
    if k > pool.len() {
        return Err(Error::ShortPool {
            requested: k,
            available: pool.len(),
        });
    }
    let mut ids = pool.ids().to_vec();
    ids.sort_unstable();
    let sentences = ids
        .iter()
        .map(|&id| lookup.sentence(id))
        .collect::<Result<Vec<_>>>()?;
    let points = backend.embed_batch(&sentences)?;
    let model = kmeans(&points, k, t, seed)?;
    select_representatives(&model, &points, &ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionFooter {
    pub objective_value: f64,
    pub iterations_run: usize,
    pub inertia: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ReductionLine {
    Choice(ClusterChoice),
    Footer(ReductionFooter),
}

/// One `{cluster, id, distance_to_centroid}` line per representative, then a
/// `{objective_value, iterations_run, inertia}` footer.
pub fn write_reduction(path: impl AsRef<Path>, result: &ReductionResult) -> Result<()> {
    let mut lines: Vec<ReductionLine> = result
        .per_cluster_choice
        .iter()
        .copied()
        .map(ReductionLine::Choice)
        .collect();
    lines.push(ReductionLine::Footer(ReductionFooter {
        objective_value: result.objective_value,
        iterations_run: result.iterations_run,
        inertia: result.inertia,
    }));
    write_json_lines(path.as_ref(), &lines)
}

pub fn read_reduction(path: impl AsRef<Path>) -> Result<ReductionResult> {
    let lines: Vec<ReductionLine> = read_json_lines(path.as_ref(), "reduction result")?;
    let mut choices = Vec::new();
    let mut footer = None;
    for line in lines {
        match line {
            ReductionLine::Choice(c) if footer.is_none() => choices.push(c),
            ReductionLine::Footer(f) if footer.is_none() => footer = Some(f),
            _ => return Err(Error::format("reduction result", "records after the footer")),
        }
    }
    let footer = footer.ok_or_else(|| Error::format("reduction result", "missing footer"))?;
    let mut ids: Vec<u64> = choices.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    Ok(ReductionResult {
        representatives: QueryPool::new(ids, Stage::Reduced)?,
        objective_value: footer.objective_value,
        per_cluster_choice: choices,
        iterations_run: footer.iterations_run,
        inertia: footer.inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::CacheBackend;
    use crate::corpus::{Sentence, SentenceSet};

    fn e(v: &[f64]) -> Embedding {
        Embedding::from_f64(v).unwrap()
    }

    fn unit(deg: f64) -> Embedding {
        let r = deg.to_radians();
        e(&[r.cos(), r.sin()])
    }

    #[test]
    fn cosine_distance_cases() {
        let v = e(&[0.3, -1.2, 2.0]);
        assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-7);
        assert!((cosine_distance(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&e(&[1.0, 0.0]), &e(&[-1.0, 0.0])).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            cosine_distance(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])),
            Err(Error::DegenerateVector { cluster: None })
        ));
        assert!(matches!(
            cosine_distance(&e(&[1.0, 0.0]), &e(&[1.0, 0.0, 0.0])),
            Err(Error::Shape { .. })
        ));
    }

    /// Inertia of the best 2-partition, by enumerating every split.
    fn best_two_partition(points: &[Vec<f64>]) -> (Vec<usize>, f64) {
        let n = points.len();
        let mut best = (vec![], f64::INFINITY);
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut inertia = 0.0;
            for c in 0..2 {
                let members: Vec<&Vec<f64>> =
                    (0..n).filter(|&i| labels[i] == c).map(|i| &points[i]).collect();
                let dim = points[0].len();
                let mean: Vec<f64> = (0..dim)
                    .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
                    .collect();
                inertia += members.iter().map(|m| squared_distance(m, &mean)).sum::<f64>();
            }
            if inertia < best.1 {
                best = (labels, inertia);
            }
        }
        best
    }

    #[test]
    fn well_separated_pairs() {
        let raw = [[0.0, 1.0], [0.0, 0.9], [5.0, 0.0], [5.1, 0.0]];
        let points: Vec<Embedding> = raw.iter().map(|p| e(p)).collect();
        let normalized_pts = normalized(&points).unwrap();
        let (labels, _) = best_two_partition(&normalized_pts);
        for seed in 0..10 {
            let m = kmeans(&points, 2, 300, seed).unwrap();
            let same = |a: usize, b: usize| m.assignment[a] == m.assignment[b];
            assert!(same(0, 1) && same(2, 3) && !same(0, 2));
            assert_eq!(labels[0] == labels[1], same(0, 1));
        }
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let points: Vec<Embedding> = (0..6).map(|i| unit(i as f64 * 50.0)).collect();
        let m = kmeans(&points, 6, 10, 3).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut a = m.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn single_cluster_centroid_is_the_mean() {
        let points: Vec<Embedding> = [10.0, 40.0, 75.0, 100.0].iter().map(|&d| unit(d)).collect();
        let m = kmeans(&points, 1, 5, 0).unwrap();
        let raw: Vec<Vec<f64>> = points.iter().map(|p| p.to_f64()).collect();
        for j in 0..2 {
            let mean = raw.iter().map(|r| r[j]).sum::<f64>() / 4.0;
            assert!((m.centroids[0][j] - mean).abs() < 1e-7);
        }
    }

    #[test]
    fn kmeans_argument_errors() {
        let pts = vec![unit(0.0), unit(90.0)];
        assert!(matches!(kmeans(&pts, 0, 10, 0), Err(Error::InvalidK)));
        assert!(matches!(
            kmeans(&pts, 3, 10, 0),
            Err(Error::KTooLarge { k: 3, n: 2 })
        ));
        assert!(kmeans(&pts, 1, 0, 0).is_err());
        assert!(matches!(
            kmeans(&[unit(0.0), e(&[0.0, 0.0])], 1, 10, 0),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn representative_cases() {
        // single-member cluster
        let m = ClusterModel {
            centroids: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            assignment: vec![0, 1, 0],
            iterations_run: 1,
            inertia: 0.0,
            inertia_trace: vec![0.0],
        };
        let pts = vec![e(&[1.0, 0.0]), e(&[0.2, 0.8]), e(&[0.9, 0.1])];
        let r = select_representatives(&m, &pts, &[4, 5, 6]).unwrap();
        assert_eq!(r.per_cluster_choice[1].id, 5);
        assert_eq!(r.per_cluster_choice[0].id, 4);

        // nearest of two, compared by direct computation
        let m = ClusterModel {
            centroids: vec![vec![0.95, 0.05]],
            assignment: vec![0, 0],
            iterations_run: 1,
            inertia: 0.0,
            inertia_trace: vec![0.0],
        };
        let pts = vec![e(&[1.0, 0.0]), e(&[0.9, 0.1])];
        let d0 = 1.0 - 0.95 / (0.95f64.hypot(0.05));
        let d1 = 1.0 - (0.9 * 0.95 + 0.1 * 0.05) / (0.9f64.hypot(0.1) * 0.95f64.hypot(0.05));
        let expected = if d0 < d1 { 10 } else { 11 };
        let r = select_representatives(&m, &pts, &[10, 11]).unwrap();
        assert_eq!(r.representatives.ids(), &[expected]);
        assert_eq!(expected, 10);

        // symmetric about the centroid direction: smaller id wins
        let m = ClusterModel {
            centroids: vec![vec![1.0, 0.0]],
            assignment: vec![0, 0],
            iterations_run: 1,
            inertia: 0.0,
            inertia_trace: vec![0.0],
        };
        let pts = vec![e(&[1.0, 0.5]), e(&[1.0, -0.5])];
        let r = select_representatives(&m, &pts, &[9, 3]).unwrap();
        assert_eq!(r.representatives.ids(), &[3]);
    }

    #[test]
    fn zero_centroid_is_flagged() {
        let m = ClusterModel {
            centroids: vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            assignment: vec![0, 1],
            iterations_run: 1,
            inertia: 0.0,
            inertia_trace: vec![0.0],
        };
        let pts = vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])];
        assert!(matches!(
            select_representatives(&m, &pts, &[0, 1]),
            Err(Error::DegenerateVector { cluster: Some(1) })
        ));
    }

    #[test]
    fn objective_cases() {
        // a pair at distance 0.4
        let c = 0.6f64;
        let pair = vec![e(&[1.0, 0.0]), e(&[c, (1.0 - c * c).sqrt()])];
        assert!((drc_objective(&[0, 1], &pair).unwrap().value - 0.4).abs() < 1e-7);
        let ortho = vec![e(&[1.0, 0.0, 0.0]), e(&[0.0, 1.0, 0.0]), e(&[0.0, 0.0, 1.0])];
        assert!((drc_objective(&[0, 1, 2], &ortho).unwrap().value - 3.0).abs() < 1e-12);
        let single = drc_objective(&[1], &ortho).unwrap();
        assert!(single.degenerate && single.value == 0.0);
        assert!(drc_objective(&[0, 7], &ortho).is_err());
    }

    #[test]
    fn objective_matches_loop_oracle() {
        let b = crate::backend::DeterministicBackend::new(5, 9, &[] as &[&str]).unwrap();
        let pts: Vec<Embedding> = (0..6).map(|i| b.embed_text(&format!("p{i}"))).collect();
        let mut oracle = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if i < j {
                    let (u, v) = (pts[i].to_f64(), pts[j].to_f64());
                    let c = dot(&u, &v) / (norm(&u) * norm(&v));
                    oracle += 1.0 - c;
                }
            }
        }
        let got = drc_objective(&[0, 1, 2, 3, 4, 5], &pts).unwrap().value;
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn brute_force_cases() {
        let three = vec![unit(0.0), unit(30.0), unit(200.0)];
        assert_eq!(brute_force_best_subset(&three, 3).unwrap().0, vec![0, 1, 2]);

        let four = vec![unit(0.0), unit(5.0), unit(120.0), unit(240.0)];
        let mut expected = (vec![], f64::NEG_INFINITY);
        for s in [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]] {
            let v = drc_objective(&s, &four).unwrap().value;
            if v > expected.1 {
                expected = (s.to_vec(), v);
            }
        }
        let (subset, value) = brute_force_best_subset(&four, 3).unwrap();
        assert_eq!(subset, expected.0);
        assert_eq!(subset, vec![0, 2, 3]);
        assert!((value - expected.1).abs() < 1e-12);
    }

    #[test]
    fn brute_force_guard_and_ties() {
        let many: Vec<Embedding> = (0..40).map(|i| unit(i as f64 * 9.0)).collect();
        assert!(matches!(
            brute_force_best_subset(&many, 20),
            Err(Error::TooLarge { .. })
        ));
        // identical points: every subset ties, lexicographically first wins
        let same = vec![unit(10.0); 5];
        assert_eq!(brute_force_best_subset(&same, 2).unwrap().0, vec![0, 1]);
    }

    fn cache_from(points: &[(u64, Embedding)]) -> (SentenceSet, CacheBackend) {
        let set: SentenceSet = points
            .iter()
            .map(|(id, _)| Sentence::new(*id, format!("s{id}")))
            .collect();
        let cache = CacheBackend::new()
            .with_embeddings(points.iter().cloned())
            .unwrap();
        (set, cache)
    }

    #[test]
    fn reduce_whole_pool_when_k_equals_n() {
        let pts: Vec<(u64, Embedding)> = (0..5).map(|i| (i * 2, unit(i as f64 * 70.0))).collect();
        let (set, cache) = cache_from(&pts);
        let pool = QueryPool::new(pts.iter().map(|p| p.0).collect(), Stage::Filtered).unwrap();
        let r = reduce(&pool, &set, &cache, 5, 300, 1).unwrap();
        assert_eq!(r.representatives.ids(), &[0, 2, 4, 6, 8]);
        assert_eq!(r.representatives.stage(), Stage::Reduced);
    }

    #[test]
    fn reduce_k1_picks_point_nearest_global_mean() {
        let pts: Vec<(u64, Embedding)> = [0.0, 20.0, 35.0, 80.0, 81.0]
            .iter()
            .enumerate()
            .map(|(i, &d)| (i as u64, unit(d)))
            .collect();
        let (set, cache) = cache_from(&pts);
        let pool = QueryPool::new((0..5).collect(), Stage::Filtered).unwrap();
        let r = reduce(&pool, &set, &cache, 1, 300, 4).unwrap();
        let mean: Vec<f64> = (0..2)
            .map(|j| pts.iter().map(|(_, e)| e.to_f64()[j]).sum::<f64>() / 5.0)
            .collect();
        let nearest = pts
            .iter()
            .min_by(|a, b| {
                let da = cosine_distance_f64(&a.1.to_f64(), &mean).unwrap();
                let db = cosine_distance_f64(&b.1.to_f64(), &mean).unwrap();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
            .0;
        assert_eq!(r.representatives.ids(), &[nearest]);
    }

    #[test]
    fn reduce_short_pool_and_stage() {
        let pts: Vec<(u64, Embedding)> = (0..3).map(|i| (i, unit(i as f64 * 10.0))).collect();
        let (set, cache) = cache_from(&pts);
        let pool = QueryPool::new(vec![0, 1, 2], Stage::Filtered).unwrap();
        assert!(matches!(
            reduce(&pool, &set, &cache, 4, 10, 0),
            Err(Error::ShortPool {
                requested: 4,
                available: 3
            })
        ));
        let orig = QueryPool::new(vec![0, 1, 2], Stage::Original).unwrap();
        assert!(matches!(
            reduce(&orig, &set, &cache, 2, 10, 0),
            Err(Error::StageOrder { .. })
        ));
    }

    #[test]
    fn reduce_ignores_pool_order() {
        let b = crate::backend::DeterministicBackend::new(6, 2, &[] as &[&str]).unwrap();
        let pts: Vec<(u64, Embedding)> = (0..40).map(|i| (i, b.embed_text(&format!("x{i}")))).collect();
        let (set, cache) = cache_from(&pts);
        let forward = QueryPool::new((0..40).collect(), Stage::Filtered).unwrap();
        let backward = QueryPool::new((0..40).rev().collect(), Stage::Filtered).unwrap();
        let a = reduce(&forward, &set, &cache, 6, 300, 17).unwrap();
        let b = reduce(&backward, &set, &cache, 6, 300, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reduction_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qr.jsonl");
        let b = crate::backend::DeterministicBackend::new(4, 2, &[] as &[&str]).unwrap();
        let pts: Vec<(u64, Embedding)> = (0..20).map(|i| (i, b.embed_text(&format!("y{i}")))).collect();
        let (set, cache) = cache_from(&pts);
        let pool = QueryPool::new((0..20).collect(), Stage::Filtered).unwrap();
        let r = reduce(&pool, &set, &cache, 4, 300, 5).unwrap();
        write_reduction(&path, &r).unwrap();
        assert_eq!(read_reduction(&path).unwrap(), r);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().last().unwrap().starts_with("{\"objective_value\""));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_points(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
            proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, d), n)
                .prop_filter("no zero vectors", |ps| ps.iter().all(|p| norm(p) > 1e-3))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn inertia_never_increases(raw in arb_points(40, 4), k in 1usize..8, seed in 0u64..1000) {
                let pts: Vec<Embedding> = raw.iter().map(|p| e(p)).collect();
                let m = kmeans(&pts, k, 50, seed).unwrap();
                for w in m.inertia_trace.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
                }
                prop_assert!(m.assignment.iter().all(|&c| c < k));
            }

            #[test]
            fn representatives_are_distinct_members(raw in arb_points(25, 3), k in 1usize..6, seed in 0u64..100) {
                let pts: Vec<Embedding> = raw.iter().map(|p| e(p)).collect();
                let ids: Vec<u64> = (0..25).map(|i| 100 + i).collect();
                let m = kmeans(&pts, k, 30, seed).unwrap();
                let r = select_representatives(&m, &pts, &ids).unwrap();
                prop_assert_eq!(r.representatives.len(), m.non_empty_clusters());
                for c in &r.per_cluster_choice {
                    let idx = (c.id - 100) as usize;
                    prop_assert_eq!(m.assignment[idx], c.cluster);
                }
            }
        }
    }
}
