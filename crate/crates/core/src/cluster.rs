//! PCA + per-position k-means over dense-token outputs, producing one
//! length-`v` code tuple per item.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::DenseEmbeddingMatrix;

pub const MAX_LLOYD_ITERS: usize = 300;

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d` orthonormal directions of length `D`, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Variances along each kept component.
    pub eigenvalues: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// Sum of all covariance eigenvalues.
    pub total_variance: f64,
}

fn check_rows(x: &[Vec<f64>], op: &'static str) -> Result<usize> {
    let dim = x.first().map(Vec::len).ok_or_else(|| Error::Invalid(format!("{op}: no points")))?;
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::dim(op, "rows of unequal length"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(dim)
}

impl PcaModel {
    /// Eigendecomposition of the (population) covariance of `x`.
    pub fn fit(x: &[Vec<f64>], d: usize) -> Result<Self> {
        let dim = check_rows(x, "pca_fit")?;
        let n = x.len();
        if d == 0 || d > dim || n <= d {
            return Err(Error::Invalid(format!("pca needs 0 < d <= D and n > d (n={n}, D={dim}, d={d})")));
        }
        let mut mean = vec![0.0; dim];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, dim, |i, j| x[i][j] - mean[j]);
        let cov = (centered.transpose() * &centered) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let largest = values[0];
        let rank = values.iter().filter(|&&l| l > RANK_TOL * largest.max(f64::MIN_POSITIVE)).count();
        if largest <= 0.0 || rank < d {
            return Err(Error::RankDeficient { rank: if largest <= 0.0 { 0 } else { rank }, requested: d });
        }
        let total: f64 = values.iter().sum();
        let mut components = Vec::with_capacity(d);
        for &i in &order[..d] {
            let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            c.iter_mut().for_each(|v| *v /= norm);
            // Sign convention: the largest-magnitude coordinate is positive (first one on ties).
            let mut pivot = 0;
            for (j, v) in c.iter().enumerate() {
                if v.abs() > c[pivot].abs() {
                    pivot = j;
                }
            }
            if c[pivot] < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(c);
        }
        let eigenvalues = values[..d].to_vec();
        let explained_ratio = eigenvalues.iter().map(|l| l / total).collect();
        Ok(PcaModel { mean, components, eigenvalues, explained_ratio, total_variance: total })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn transform(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let dim = check_rows(x, "pca_transform")?;
        if dim != self.mean.len() {
            return Err(Error::dim("pca_transform", format!("points of width {dim}, model width {}", self.mean.len())));
        }
        Ok(x.iter()
            .map(|row| {
                self.components
                    .iter()
                    .map(|c| c.iter().zip(row).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum())
                    .collect()
            })
            .collect())
    }

    pub fn inverse_transform(&self, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        z.iter()
            .map(|coords| {
                let mut out = self.mean.clone();
                for (c, a) in self.components.iter().zip(coords) {
                    for (o, w) in out.iter_mut().zip(c) {
                        *o += a * w;
                    }
                }
                out
            })
            .collect()
    }

    /// Mean squared distance between points and their projections.
    pub fn reconstruction_error(&self, x: &[Vec<f64>]) -> Result<f64> {
        let back = self.inverse_transform(&self.transform(x)?);
        let total: f64 = x.iter().zip(&back).map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()).sum();
        Ok(total / x.len() as f64)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    /// Training-point assignments (0-based cluster indices).
    pub assignments: Vec<usize>,
    /// Inertia after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    pub fn predict(&self, point: &[f64]) -> usize {
        nearest(point, &self.centroids)
    }

    /// Cluster indices ordered by distance from `point` (ties by index).
    pub fn ranked(&self, point: &[f64]) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = self.centroids.iter().enumerate().map(|(c, m)| (sq_dist(point, m), c)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().map(|(_, c)| c).collect()
    }

    /// k-means++ seeding followed by Lloyd iterations until the assignment
    /// stops changing or [`MAX_LLOYD_ITERS`] is reached.
    pub fn fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Self> {
        check_rows(points, "kmeans_fit")?;
        let n = points.len();
        if k == 0 || n < k {
            return Err(Error::Invalid(format!("k-means needs 1 <= k <= n (n={n}, k={k})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = plus_plus(points, k, &mut rng);
        let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let mut history = Vec::new();
        let mut iterations = 0;
        loop {
            iterations += 1;
            centroids = recompute(points, &assignments, &centroids);
            reseed_empty(points, &mut assignments, &mut centroids);
            let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
            let changed = next != assignments;
            assignments = next;
            history.push(inertia(points, &assignments, &centroids));
            if !changed || iterations >= MAX_LLOYD_ITERS {
                break;
            }
        }
        if reseed_empty(points, &mut assignments, &mut centroids) {
            centroids = recompute(points, &assignments, &centroids);
            history.push(inertia(points, &assignments, &centroids));
        }
        let mut counts = vec![0; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        Ok(KMeansModel { centroids, counts, assignments, inertia_history: history, iterations })
    }
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            // Guard against float drift landing on an already-covered point.
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn recompute(points: &[Vec<f64>], assignments: &[usize], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(old)
        .map(|((s, c), o)| if c == 0 { o.clone() } else { s.into_iter().map(|v| v / c as f64).collect() })
        .collect()
}

/// Moves the point farthest from its centroid (among clusters with at
/// least two members) into each empty cluster. Returns whether anything moved.
fn reseed_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) -> bool {
    let k = centroids.len();
    let mut moved = false;
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return moved };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[a]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let i = far.expect("n >= k leaves a cluster with two members");
        assignments[i] = empty;
        centroids[empty] = points[i].clone();
        moved = true;
    }
}

fn inertia(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

/// `v × n` matrix of 1-based cluster indices; column `j` is item `j`'s id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    pub v: usize,
    pub k: usize,
    pub item_ids: Vec<String>,
    data: Vec<u32>,
}

pub type SemanticId = Vec<u32>;

impl CodeMatrix {
    pub fn new(v: usize, k: usize, item_ids: Vec<String>, data: Vec<u32>) -> Result<Self> {
        if data.len() != v * item_ids.len() {
            return Err(Error::dim("code matrix", format!("{v}x{} from {} codes", item_ids.len(), data.len())));
        }
        if let Some(bad) = data.iter().find(|&&c| c == 0 || c as usize > k) {
            return Err(Error::Invalid(format!("code {bad} outside 1..={k}")));
        }
        Ok(CodeMatrix { v, k, item_ids, data })
    }

    pub fn n(&self) -> usize {
        self.item_ids.len()
    }

    pub fn get(&self, pos: usize, j: usize) -> u32 {
        self.data[pos * self.n() + j]
    }

    fn set(&mut self, pos: usize, j: usize, code: u32) {
        let n = self.n();
        self.data[pos * n + j] = code;
    }

    pub fn column(&self, j: usize) -> SemanticId {
        (0..self.v).map(|pos| self.get(pos, j)).collect()
    }

    pub fn columns(&self) -> Vec<SemanticId> {
        (0..self.n()).map(|j| self.column(j)).collect()
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.item_ids.iter().position(|i| i == item_id)
    }

    pub fn codes_of(&self, item_id: &str) -> Result<SemanticId> {
        self.index_of(item_id).map(|j| self.column(j)).ok_or_else(|| Error::UnknownItem(item_id.to_string()))
    }

    pub fn row(&self, pos: usize) -> &[u32] {
        &self.data[pos * self.n()..(pos + 1) * self.n()]
    }

    /// Groups of column indices that share a code tuple (size ≥ 2 only).
    pub fn duplicate_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: BTreeMap<SemanticId, Vec<usize>> = BTreeMap::new();
        for j in 0..self.n() {
            groups.entry(self.column(j)).or_default().push(j);
        }
        groups.into_values().filter(|g| g.len() > 1).collect()
    }

    pub fn all_distinct(&self) -> bool {
        self.duplicate_groups().is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("item_id");
        for pos in 1..=self.v {
            out.push_str(&format!("\tc_{pos}"));
        }
        out.push('\n');
        for j in 0..self.n() {
            out.push_str(&self.item_ids[j]);
            for pos in 0..self.v {
                out.push_str(&format!("\t{}", self.get(pos, j)));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str, k: usize) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| Error::Invalid("empty code file".into()))?.split('\t').collect();
        if header.first() != Some(&"item_id") || header.len() < 2 {
            return Err(Error::Invalid("code file header must start with item_id".into()));
        }
        let v = header.len() - 1;
        let mut ids = Vec::new();
        let mut cols = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != v + 1 {
                return Err(Error::Invalid(format!("code row `{line}` has {} fields, expected {}", fields.len(), v + 1)));
            }
            ids.push(fields[0].to_string());
            let col: Vec<u32> = fields[1..]
                .iter()
                .map(|f| f.parse::<u32>().map_err(|e| Error::Invalid(format!("bad code `{f}`: {e}"))))
                .collect::<Result<_>>()?;
            cols.push(col);
        }
        let n = ids.len();
        let mut data = vec![0; v * n];
        for (j, col) in cols.iter().enumerate() {
            for pos in 0..v {
                data[pos * n + j] = col[pos];
            }
        }
        CodeMatrix::new(v, k, ids, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_file(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path, k: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CodeMatrix::from_tsv(&text, k).map_err(|e| Error::Artifact { path: path.to_path_buf(), detail: e.to_string() })
    }
}

pub fn hamming_distance(a: &[u32], b: &[u32]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::dim("hamming_distance", format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    /// Fit one PCA on all positions instead of one per position.
    pub global_pca: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeAssignment {
    pub codes: CodeMatrix,
    pub pcas: Vec<PcaModel>,
    pub kmeans: Vec<KMeansModel>,
    /// Reduced points per position (`v` lists of `n` vectors).
    pub reduced: Vec<Vec<Vec<f64>>>,
}

fn position_points(e: &DenseEmbeddingMatrix, pos: usize) -> Vec<Vec<f64>> {
    (0..e.n()).map(|j| e.get(pos, j).iter().map(|&x| x as f64).collect()).collect()
}

/// Per-position PCA + k-means over `E`, before collision resolution.
pub fn assign_codes(e: &DenseEmbeddingMatrix, config: &ClusterConfig) -> Result<CodeAssignment> {
    let n = e.n();
    if n < config.k {
        return Err(Error::Invalid(format!("{n} items cannot fill {} clusters", config.k)));
    }
    let global = if config.global_pca {
        let all: Vec<Vec<f64>> = (0..e.v).flat_map(|pos| position_points(e, pos)).collect();
        Some(PcaModel::fit(&all, config.d)?)
    } else {
        None
    };
    let mut pcas = Vec::with_capacity(e.v);
    let mut kmeans = Vec::with_capacity(e.v);
    let mut reduced = Vec::with_capacity(e.v);
    let mut data = vec![0u32; e.v * n];
    for pos in 0..e.v {
        let points = position_points(e, pos);
        let pca = match &global {
            Some(g) => g.clone(),
            None => PcaModel::fit(&points, config.d)?,
        };
        let z = pca.transform(&points)?;
        let km = KMeansModel::fit(&z, config.k, config.seed.wrapping_add(pos as u64))?;
        for j in 0..n {
            data[pos * n + j] = km.predict(&z[j]) as u32 + 1;
        }
        pcas.push(pca);
        kmeans.push(km);
        reduced.push(z);
    }
    let codes = CodeMatrix::new(e.v, config.k, e.item_ids.clone(), data)?;
    Ok(CodeAssignment { codes, pcas, kmeans, reduced })
}

/// Candidate suffixes over the last `depth` positions for item `j`, cheapest
/// (summed squared centroid distance) first, ties by code tuple.
fn suffix_candidates(assignment: &CodeAssignment, j: usize, depth: usize) -> Vec<Vec<u32>> {
    let v = assignment.codes.v;
    let k = assignment.codes.k;
    let mut out: Vec<(f64, Vec<u32>)> = vec![(0.0, Vec::new())];
    for pos in v - depth..v {
        let z = &assignment.reduced[pos][j];
        let costs: Vec<f64> = assignment.kmeans[pos].centroids.iter().map(|c| sq_dist(z, c)).collect();
        let mut next = Vec::with_capacity(out.len() * k);
        for (cost, prefix) in &out {
            for (c, extra) in costs.iter().enumerate() {
                let mut p = prefix.clone();
                p.push(c as u32 + 1);
                next.push((cost + extra, p));
            }
        }
        out = next;
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    out.into_iter().map(|(_, s)| s).collect()
}

/// Cap on the candidate suffixes enumerated for one item.
const MAX_SUFFIX_CANDIDATES: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub codes: CodeMatrix,
    /// Columns whose codes changed, ascending.
    pub modified: Vec<usize>,
    /// Items that had to change a position before the last one.
    pub deep_moves: usize,
}

/// Makes every column distinct. In each duplicate group the item nearest its
/// last-position centroid keeps its codes; the others (ascending item id)
/// take their next-nearest last-position centroid giving an unused column.
/// When no last-position code is free, earlier positions are opened up one
/// at a time, choosing the cheapest unused suffix.
pub fn resolve_collisions(assignment: &CodeAssignment) -> Result<Resolution> {
    let mut codes = assignment.codes.clone();
    let v = codes.v;
    let last = v - 1;
    let mut used: HashSet<SemanticId> = codes.columns().into_iter().collect();
    let mut groups = codes.duplicate_groups();
    for g in &mut groups {
        g.sort_by(|&a, &b| codes.item_ids[a].cmp(&codes.item_ids[b]));
    }
    groups.sort_by(|a, b| codes.item_ids[a[0]].cmp(&codes.item_ids[b[0]]));
    let mut modified = Vec::new();
    let mut unresolved = Vec::new();
    let mut deep_moves = 0;
    for group in groups {
        let dist = |j: usize| {
            let c = codes.get(last, j) as usize - 1;
            sq_dist(&assignment.reduced[last][j], &assignment.kmeans[last].centroids[c])
        };
        let keeper = *group.iter().min_by(|&&a, &&b| dist(a).total_cmp(&dist(b))).expect("non-empty group");
        for &j in group.iter().filter(|&&j| j != keeper) {
            let current = codes.column(j);
            let mut placed = None;
            for depth in 1..=v {
                if codes.k.checked_pow(depth as u32).is_none_or(|c| c > MAX_SUFFIX_CANDIDATES) {
                    break;
                }
                for suffix in suffix_candidates(assignment, j, depth) {
                    let mut col = current[..v - depth].to_vec();
                    col.extend(&suffix);
                    if !used.contains(&col) {
                        placed = Some((col, depth));
                        break;
                    }
                }
                if placed.is_some() {
                    break;
                }
            }
            match placed {
                Some((col, depth)) => {
                    if depth > 1 {
                        deep_moves += 1;
                    }
                    for (pos, &c) in col.iter().enumerate() {
                        codes.set(pos, j, c);
                    }
                    used.insert(col);
                    modified.push(j);
                }
                None => unresolved.push(codes.item_ids[j].clone()),
            }
        }
    }
    if !unresolved.is_empty() {
        return Err(Error::UnresolvedCollision { items: unresolved });
    }
    modified.sort_unstable();
    Ok(Resolution { codes, modified, deep_moves })
}

/// Element counts behind the storage comparison: centroid tables plus
/// integer codes versus one dense vector per item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryFootprint {
    pub code_storage: u64,
    pub dense_storage: u64,
}

pub fn memory_footprint(n: u64, dim: u64, k: u64, v: u64) -> MemoryFootprint {
    MemoryFootprint { code_storage: k * v * dim + n * v, dense_storage: n * dim }
}

/// Number of distinct identifiers with `v` positions of `k` codes.
pub fn identifier_capacity(k: u64, v: u32) -> f64 {
    (k as f64).powi(v as i32)
}

/// Persists the fitted PCA and k-means models of every position.
pub fn save_models(dir: &Path, assignment: &CodeAssignment) -> Result<()> {
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    let mut meta_pos = Vec::new();
    for (pos, (pca, km)) in assignment.pcas.iter().zip(&assignment.kmeans).enumerate() {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let dim = pca.mean.len();
        owned.push((format!("pos{pos}.mean"), Tensor::new(vec![dim], f(&pca.mean))?));
        let comps: Vec<f64> = pca.components.iter().flatten().copied().collect();
        owned.push((format!("pos{pos}.components"), Tensor::new(vec![pca.dim(), dim], f(&comps))?));
        let cents: Vec<f64> = km.centroids.iter().flatten().copied().collect();
        owned.push((format!("pos{pos}.centroids"), Tensor::new(vec![km.k(), pca.dim()], f(&cents))?));
        meta_pos.push(serde_json::json!({
            "eigenvalues": pca.eigenvalues,
            "explained_ratio": pca.explained_ratio,
            "counts": km.counts,
            "iterations": km.iterations,
            "inertia": km.inertia(),
        }));
    }
    let named: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    checkpoint::save(dir, serde_json::json!({"kind": "cluster_models", "positions": meta_pos}), &named)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_on_a_line_have_one_component() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let pca = PcaModel::fit(&x, 1).unwrap();
        assert!((pca.explained_ratio[0] - 1.0).abs() < 1e-6);
        assert!(matches!(PcaModel::fit(&x, 2), Err(Error::RankDeficient { rank: 1, requested: 2 })));
    }

    #[test]
    fn mean_maps_to_origin() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![(i * i) as f64, (i % 3) as f64, 1.0 - i as f64]).collect();
        let pca = PcaModel::fit(&x, 2).unwrap();
        let z = pca.transform(std::slice::from_ref(&pca.mean)).unwrap();
        assert!(z[0].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn components_are_orthonormal_with_positive_pivot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
        let pca = PcaModel::fit(&x, 4).unwrap();
        for (a, ca) in pca.components.iter().enumerate() {
            for (b, cb) in pca.components.iter().enumerate() {
                let dot: f64 = ca.iter().zip(cb).map(|(p, q)| p * q).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
            let pivot = ca.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(pivot > 0.0);
        }
        assert!(pca.explained_ratio.windows(2).all(|w| w[0] >= w[1]));
        assert!(pca.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let x = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        assert!(PcaModel::fit(&x, 2).is_err());
    }

    #[test]
    fn saturated_kmeans_has_zero_inertia() {
        let pts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let km = KMeansModel::fit(&pts, 7, 1).unwrap();
        assert_eq!(km.inertia(), 0.0);
        assert!(km.counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn kmeans_needs_enough_points() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(KMeansModel::fit(&pts, 3, 0).is_err());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = vec![vec![0.0], vec![0.0], vec![0.0], vec![5.0]];
        let km = KMeansModel::fit(&pts, 3, 2).unwrap();
        assert!(km.counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn nearest_prefers_lower_index_on_ties() {
        assert_eq!(nearest(&[0.0], &[vec![1.0], vec![-1.0]]), 0);
    }

    #[test]
    fn hamming_cases() {
        assert_eq!(hamming_distance(&[3, 7, 1, 9], &[3, 7, 1, 9]).unwrap(), 0);
        assert_eq!(hamming_distance(&[3, 7, 1, 9], &[3, 7, 2, 9]).unwrap(), 1);
        assert!(hamming_distance(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn code_tsv_round_trip() {
        let c = CodeMatrix::new(2, 16, vec!["a".into(), "b".into()], vec![1, 16, 5, 2]).unwrap();
        let text = c.to_tsv();
        assert!(text.starts_with("item_id\tc_1\tc_2\na\t1\t5\n"));
        assert_eq!(CodeMatrix::from_tsv(&text, 16).unwrap(), c);
        assert!(CodeMatrix::new(1, 4, vec!["a".into()], vec![0]).is_err());
    }

    #[test]
    fn paper_memory_claim_holds() {
        let m = memory_footprint(25_634, 1024, 256, 4);
        assert!(m.code_storage < m.dense_storage);
        assert!((identifier_capacity(256, 4) - 4.294967296e9).abs() < 1.0);
        assert_eq!(identifier_capacity(16, 2), 256.0);
    }
}
