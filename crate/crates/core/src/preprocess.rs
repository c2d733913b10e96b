//! Preprocessing: assembling per-view language maps from masks, PCA into the
//! low-dimensional (LD) space, cosine k-means with silhouette-based cluster
//! count selection, and codebook initialization from the cluster centroids.
//!
//! Numerical policy: accumulation runs in f64 (covariances, means, cosine
//! sums) while all stored artifacts are f32.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scene::{LdMap, ViewSupervision};

/// Orthonormal PCA basis with the data mean and per-component variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub dim_high: usize,
    pub dim_low: usize,
    /// D-vector data mean.
    pub mean: Vec<f32>,
    /// D x d basis, row-major: basis[i * d + j] = component i of column j.
    pub basis: Vec<f32>,
    /// Descending, nonnegative variances of the d retained components.
    pub explained_variance: Vec<f32>,
}

/// The structured language codebook: N_c prototype rows in language space.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub n_entries: usize,
    pub dim: usize,
    /// N_c x D row-major entries.
    pub entries: Vec<f32>,
}

impl Codebook {
    pub fn entry(&self, j: usize) -> &[f32] {
        &self.entries[j * self.dim..(j + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_entries == 0 || self.entries.len() != self.n_entries * self.dim {
            return Err(Error::validation("codebook shape mismatch"));
        }
        for j in 0..self.n_entries {
            let row = self.entry(j);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("codebook row {j} not finite")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::validation(format!("codebook row {j} is zero")));
            }
        }
        Ok(())
    }
}

/// Dense per-pixel language map: each supervised pixel carries its mask's
/// feature; unsupervised pixels are zero and flagged.
#[derive(Debug, Clone)]
pub struct LanguageMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub supervised: Vec<bool>,
}

/// Scatter per-mask features onto pixels according to the mask-id map.
pub fn assemble_language_map(
    width: usize,
    height: usize,
    masks: &[i32],
    features: &[f32],
    n_masks: usize,
    dim: usize,
) -> Result<LanguageMap> {
    if masks.len() != width * height || features.len() != n_masks * dim {
        return Err(Error::validation("language map input shapes disagree"));
    }
    let mut data = vec![0.0f32; width * height * dim];
    let mut supervised = vec![false; width * height];
    for (pix, &id) in masks.iter().enumerate() {
        if id < 0 {
            if id < -1 {
                return Err(Error::validation(format!("mask id {id} out of range")));
            }
            continue;
        }
        let id = id as usize;
        if id >= n_masks {
            return Err(Error::validation(format!(
                "mask id {id} out of range for {n_masks} features"
            )));
        }
        data[pix * dim..(pix + 1) * dim].copy_from_slice(&features[id * dim..(id + 1) * dim]);
        supervised[pix] = true;
    }
    Ok(LanguageMap {
        width,
        height,
        dim,
        data,
        supervised,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major d x d).
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let fro: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * fro.max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= tol / (d as f64) {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}

/// Fit PCA to n x D features. The basis columns are the top-d eigenvectors of
/// the sample covariance (denominator n-1); the sign convention makes each
/// column's largest-magnitude component positive. When the data rank is below
/// d, the trailing columns span the orthogonal complement with zero variance.
pub fn fit_pca(features: &[f32], n: usize, dim: usize, d: usize) -> Result<PcaProjection> {
    if features.len() != n * dim {
        return Err(Error::validation("feature buffer shape mismatch"));
    }
    if n <= d {
        return Err(Error::validation(format!(
            "need more samples ({n}) than output dimensions ({d})"
        )));
    }
    if d == 0 || d > dim {
        return Err(Error::validation(format!(
            "output dimension {d} must be in [1, {dim}]"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("features must be finite"));
    }

    let mut mean = vec![0.0f64; dim];
    for row in features.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0f64; dim * dim];
    let mut centered = vec![0.0f64; dim];
    for row in features.chunks_exact(dim) {
        for (c, (&x, &m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = x as f64 - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            for j in i..dim {
                cov[i * dim + j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / denom;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let total_var: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    if total_var <= 1e-18 {
        return Err(Error::validation(
            "features have zero variance; no principal direction to extract",
        ));
    }

    let (eig, vecs) = jacobi_eigen(cov, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig[b].partial_cmp(&eig[a]).unwrap().then(a.cmp(&b)));

    let mut basis = vec![0.0f32; dim * d];
    let mut explained = Vec::with_capacity(d);
    for (j, &col) in order.iter().take(d).enumerate() {
        // Sign convention: largest-magnitude component positive.
        let mut arg = 0;
        let mut best = -1.0f64;
        for i in 0..dim {
            let m = vecs[i * dim + col].abs();
            if m > best {
                best = m;
                arg = i;
            }
        }
        let flip = if vecs[arg * dim + col] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            basis[i * d + j] = (vecs[i * dim + col] * flip) as f32;
        }
        explained.push(eig[col].max(0.0) as f32);
    }
    Ok(PcaProjection {
        dim_high: dim,
        dim_low: d,
        mean: mean.iter().map(|&m| m as f32).collect(),
        basis,
        explained_variance: explained,
    })
}

impl PcaProjection {
    /// basis^T (x - mean).
    pub fn project(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.dim_high {
            return Err(Error::validation("project: dimension mismatch"));
        }
        let d = self.dim_low;
        let mut out = vec![0.0f64; d];
        for (i, (&xi, &mi)) in x.iter().zip(&self.mean).enumerate() {
            let c = (xi - mi) as f64;
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.basis[i * d + j] as f64 * c;
            }
        }
        Ok(out.iter().map(|&v| v as f32).collect())
    }

    /// basis y + mean.
    pub fn lift(&self, y: &[f32]) -> Result<Vec<f32>> {
        if y.len() != self.dim_low {
            return Err(Error::validation("lift: dimension mismatch"));
        }
        let d = self.dim_low;
        let mut out: Vec<f64> = self.mean.iter().map(|&m| m as f64).collect();
        for (i, o) in out.iter_mut().enumerate() {
            for (j, &yj) in y.iter().enumerate() {
                *o += self.basis[i * d + j] as f64 * yj as f64;
            }
        }
        Ok(out.iter().map(|&v| v as f32).collect())
    }
}

/// Project a view's per-mask features and scatter them into the dense
/// H*W*d LD map (zeros at unsupervised pixels).
pub fn compute_ld_map(view: &ViewSupervision, pca: &PcaProjection) -> Result<LdMap> {
    if view.feature_dim != pca.dim_high {
        return Err(Error::validation("view feature dim does not match PCA"));
    }
    let d = pca.dim_low;
    let mut per_mask = Vec::with_capacity(view.n_masks);
    for k in 0..view.n_masks {
        per_mask.push(pca.project(view.mask_feature(k))?);
    }
    let mut data = vec![0.0f32; view.width * view.height * d];
    for (pix, &id) in view.masks.iter().enumerate() {
        if id >= 0 {
            data[pix * d..(pix + 1) * d].copy_from_slice(&per_mask[id as usize]);
        }
    }
    Ok(LdMap { d, data })
}

/// Result of one k-means run.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignments: Vec<u32>,
    /// k x dim unnormalized arithmetic-mean centroids (stale for clusters
    /// that ended up empty; see `cluster_sizes`).
    pub centroids: Vec<f32>,
    pub cluster_sizes: Vec<usize>,
    /// Objective sum(1 - cos(x_i, centroid)) recorded after each assignment.
    pub objective_trace: Vec<f64>,
}

impl KmeansResult {
    pub fn n_nonempty(&self) -> usize {
        self.cluster_sizes.iter().filter(|&&s| s > 0).count()
    }
}

fn normalize_rows(features: &[f32], n: usize, dim: usize) -> Result<Vec<f64>> {
    let mut unit = vec![0.0f64; n * dim];
    for (i, row) in features.chunks_exact(dim).enumerate() {
        let norm: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::validation(format!(
                "feature row {i} is zero; cosine distance undefined"
            )));
        }
        for (o, &v) in unit[i * dim..(i + 1) * dim].iter_mut().zip(row) {
            *o = v as f64 / norm;
        }
    }
    Ok(unit)
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spherical k-means: assignment by maximum cosine against normalized
/// centroids, k-means++ style seeding on cosine distance, ties broken toward
/// the lowest cluster index, empty clusters reseeded to the point farthest
/// from its own centroid. The returned centroids are the plain arithmetic
/// means of the original (unnormalized) member features.
pub fn cosine_kmeans(
    features: &[f32],
    n: usize,
    dim: usize,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KmeansResult> {
    if features.len() != n * dim {
        return Err(Error::validation("feature buffer shape mismatch"));
    }
    if k == 0 || k > n {
        return Err(Error::validation(format!("k = {k} must be in [1, {n}]")));
    }
    let unit = normalize_rows(features, n, dim)?;
    let row = |i: usize| -> &[f64] { &unit[i * dim..(i + 1) * dim] };

    // Seeding: first center uniform, then proportional to squared cosine
    // distance to the nearest chosen center.
    let mut rng = stream_rng(seed, Stream::KmeansSeeding);
    let mut center_rows: Vec<usize> = vec![rng.gen_range(0..n)];
    let mut min_dist: Vec<f64> = (0..n)
        .map(|i| 1.0 - dot64(row(i), row(center_rows[0])))
        .collect();
    while center_rows.len() < k {
        let total: f64 = min_dist.iter().map(|&d| d * d).sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with chosen centers; take the
            // lowest index not already chosen.
            (0..n)
                .find(|i| !center_rows.contains(i))
                .unwrap_or(center_rows.len() % n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in min_dist.iter().enumerate() {
                target -= d * d;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        center_rows.push(next);
        for i in 0..n {
            let d = 1.0 - dot64(row(i), row(next));
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }

    // Normalized centroid directions used for assignment.
    let mut dirs: Vec<f64> = Vec::with_capacity(k * dim);
    for &c in &center_rows {
        dirs.extend_from_slice(row(c));
    }

    let mut assignments = vec![0u32; n];
    let mut sizes = vec![0usize; k];
    let mut trace = Vec::new();
    for _ in 0..max_iter {
        // Assignment by max cosine; ties toward the lowest cluster index.
        let mut changed = false;
        let mut objective = 0.0f64;
        for i in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0u32;
            for j in 0..k {
                let c = dot64(row(i), &dirs[j * dim..(j + 1) * dim]);
                if c > best {
                    best = c;
                    arg = j as u32;
                }
            }
            objective += 1.0 - best;
            if assignments[i] != arg {
                assignments[i] = arg;
                changed = true;
            }
        }
        trace.push(objective);

        // Update: mean of the normalized members, renormalized.
        let mut sums = vec![0.0f64; k * dim];
        sizes.iter_mut().for_each(|s| *s = 0);
        for (i, &a) in assignments.iter().enumerate() {
            let a = a as usize;
            sizes[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut reseeded = false;
        for j in 0..k {
            if sizes[j] > 0 {
                let norm = dot64(&sums[j * dim..(j + 1) * dim], &sums[j * dim..(j + 1) * dim]).sqrt();
                if norm > 1e-12 {
                    for s in sums[j * dim..(j + 1) * dim].iter_mut() {
                        *s /= norm;
                    }
                    dirs[j * dim..(j + 1) * dim].copy_from_slice(&sums[j * dim..(j + 1) * dim]);
                }
            } else {
                // Reseed to the point farthest from its own centroid.
                let mut far_d = 0.0f64;
                let mut far_i = usize::MAX;
                for (i, &a) in assignments.iter().enumerate() {
                    let d = 1.0 - dot64(row(i), &dirs[a as usize * dim..(a as usize + 1) * dim]);
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                if far_i != usize::MAX && far_d > 0.0 {
                    dirs[j * dim..(j + 1) * dim].copy_from_slice(row(far_i));
                    reseeded = true;
                }
            }
        }
        if !changed && !reseeded && trace.len() > 1 {
            break;
        }
    }

    // Output centroids: arithmetic means of the original features.
    let mut centroids64 = vec![0.0f64; k * dim];
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        for (c, &v) in centroids64[a * dim..(a + 1) * dim]
            .iter_mut()
            .zip(&features[i * dim..(i + 1) * dim])
        {
            *c += v as f64;
        }
    }
    let mut centroids = vec![0.0f32; k * dim];
    for j in 0..k {
        if sizes[j] > 0 {
            for (o, &s) in centroids[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(&centroids64[j * dim..(j + 1) * dim])
            {
                *o = (s / sizes[j] as f64) as f32;
            }
        } else {
            // Keep the stale direction so the row stays meaningful.
            for (o, &s) in centroids[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(&dirs[j * dim..(j + 1) * dim])
            {
                *o = s as f32;
            }
        }
    }
    Ok(KmeansResult {
        assignments,
        centroids,
        cluster_sizes: sizes,
        objective_trace: trace,
    })
}

/// Mean silhouette with cosine distance (1 - cos). Points in singleton
/// clusters score 0, and 0/0 is defined as 0. When n exceeds 2000 a seeded
/// subsample of 2000 points is scored instead.
pub fn silhouette_score(
    features: &[f32],
    n: usize,
    dim: usize,
    assignments: &[u32],
    seed: u64,
) -> Result<f64> {
    if assignments.len() != n || features.len() != n * dim {
        return Err(Error::validation("silhouette input shapes disagree"));
    }
    let unit = normalize_rows(features, n, dim)?;

    let mut idx: Vec<usize> = (0..n).collect();
    if n > 2000 {
        let mut rng = stream_rng(seed, Stream::SilhouetteSubsample);
        idx.shuffle(&mut rng);
        idx.truncate(2000);
        idx.sort_unstable();
    }

    // Remap cluster ids present in the sample to 0..m.
    let mut present: Vec<u32> = idx.iter().map(|&i| assignments[i]).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::validation(
            "silhouette requires at least 2 nonempty clusters",
        ));
    }
    let cluster_of = |i: usize| -> usize {
        present.binary_search(&assignments[i]).unwrap()
    };
    let m = present.len();
    let mut counts = vec![0usize; m];
    for &i in &idx {
        counts[cluster_of(i)] += 1;
    }

    let mut total = 0.0f64;
    let mut sums = vec![0.0f64; m];
    for &i in &idx {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for &j in &idx {
            if i == j {
                continue;
            }
            let d = 1.0 - dot64(&unit[i * dim..(i + 1) * dim], &unit[j * dim..(j + 1) * dim]);
            sums[cluster_of(j)] += d;
        }
        let own = cluster_of(i);
        if counts[own] <= 1 {
            continue; // singleton: s_i = 0
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..m {
            if c != own && counts[c] > 0 {
                b = b.min(sums[c] / counts[c] as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / idx.len() as f64)
}

/// Sweep k in [k_min, k_max], returning the silhouette-maximizing cluster
/// count (ties toward the smallest k) and its k-means run.
pub fn select_codebook_sweep(
    features: &[f32],
    n: usize,
    dim: usize,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<(usize, KmeansResult)> {
    if k_min < 2 {
        return Err(Error::validation("k_min must be at least 2"));
    }
    if k_max < k_min || k_max > n {
        return Err(Error::validation(format!(
            "k range [{k_min}, {k_max}] invalid for {n} samples"
        )));
    }
    let mut best: Option<(f64, usize, KmeansResult)> = None;
    for k in k_min..=k_max {
        let run = cosine_kmeans(features, n, dim, k, seed, 100)?;
        // Degenerate runs (duplicate data collapsing clusters) score below
        // the silhouette range so any valid k wins over them.
        let score = if run.n_nonempty() < 2 {
            -2.0
        } else {
            silhouette_score(features, n, dim, &run.assignments, seed)?
        };
        let better = match &best {
            None => true,
            Some((s, _, _)) => score > *s,
        };
        if better {
            best = Some((score, k, run));
        }
    }
    let (score, k, run) = best.unwrap();
    if score <= -2.0 {
        return Err(Error::validation(
            "no k in range produced at least 2 nonempty clusters",
        ));
    }
    Ok((k, run))
}

pub fn select_codebook_size(
    features: &[f32],
    n: usize,
    dim: usize,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<usize> {
    select_codebook_sweep(features, n, dim, k_min, k_max, seed).map(|(k, _)| k)
}

/// Run the silhouette sweep and return the centroid codebook. Clusters that
/// ended up empty at the selected k are dropped.
pub fn init_codebook(
    features: &[f32],
    n: usize,
    dim: usize,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<Codebook> {
    let (k, run) = select_codebook_sweep(features, n, dim, k_min, k_max, seed)?;
    let mut entries = Vec::new();
    let mut n_entries = 0;
    for j in 0..k {
        if run.cluster_sizes[j] > 0 {
            entries.extend_from_slice(&run.centroids[j * dim..(j + 1) * dim]);
            n_entries += 1;
        }
    }
    let cb = Codebook {
        n_entries,
        dim,
        entries,
    };
    cb.validate()?;
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos32(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn language_map_piecewise_constant() {
        // Two half-image masks.
        let (w, h, d) = (4, 2, 3);
        let masks: Vec<i32> = (0..w * h).map(|i| if i % w < 2 { 0 } else { 1 }).collect();
        let features = vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0];
        let map = assemble_language_map(w, h, &masks, &features, 2, d).unwrap();
        for pix in 0..w * h {
            let row = &map.data[pix * d..(pix + 1) * d];
            if pix % w < 2 {
                assert_eq!(row, &[1.0, 0.0, 0.0]);
            } else {
                assert_eq!(row, &[0.0, 2.0, 0.0]);
            }
        }
        // All -1 yields zero supervised pixels.
        let map = assemble_language_map(w, h, &vec![-1; w * h], &features, 2, d).unwrap();
        assert!(map.supervised.iter().all(|&s| !s));
    }

    #[test]
    fn pca_line_through_origin_reconstructs_exactly() {
        let dir = [0.6f32, -0.8, 0.0];
        let n = 9;
        let feats: Vec<f32> = (0..n)
            .flat_map(|i| {
                let t = i as f32 - 4.0;
                [dir[0] * t, dir[1] * t, dir[2] * t]
            })
            .collect();
        let pca = fit_pca(&feats, n, 3, 1).unwrap();
        for row in feats.chunks_exact(3) {
            let back = pca.lift(&pca.project(row).unwrap()).unwrap();
            for (a, b) in row.iter().zip(&back) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pca_basis_orthonormal_and_roundtrip() {
        let mut rng = crate::rng::stream_rng(3, crate::rng::Stream::GradCheck);
        use rand::Rng;
        let (n, dim, d) = (40, 6, 4);
        let feats: Vec<f32> = (0..n * dim).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let pca = fit_pca(&feats, n, dim, d).unwrap();
        // Columns orthonormal.
        for j in 0..d {
            for l in 0..=j {
                let dot: f64 = (0..dim)
                    .map(|i| pca.basis[i * d + j] as f64 * pca.basis[i * d + l] as f64)
                    .sum();
                let expect = if j == l { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-5, "col {j},{l}: {dot}");
            }
        }
        // Variances descending.
        for w in pca.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
        // project(lift(y)) = y.
        let y = vec![0.3f32, -0.7, 0.2, 0.9];
        let back = pca.project(&pca.lift(&y).unwrap()).unwrap();
        for (a, b) in y.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
        // x = mean projects to 0.
        let z = pca.project(&pca.mean.clone()).unwrap();
        assert!(z.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn pca_full_basis_is_identity_on_centered_data() {
        let mut rng = crate::rng::stream_rng(5, crate::rng::Stream::GradCheck);
        use rand::Rng;
        let (n, dim) = (30, 5);
        let feats: Vec<f32> = (0..n * dim).map(|_| rng.gen::<f32>()).collect();
        let pca = fit_pca(&feats, n, dim, dim).unwrap();
        for row in feats.chunks_exact(dim) {
            let back = pca.lift(&pca.project(row).unwrap()).unwrap();
            for (a, b) in row.iter().zip(&back) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pca_isotropic_cloud_has_unit_variances() {
        // Analytic oracle: an isotropic unit-variance cloud has all
        // covariance eigenvalues equal to 1, up to sampling error.
        let mut rng = crate::rng::stream_rng(11, crate::rng::Stream::GradCheck);
        use rand_distr::StandardNormal;
        let (n, dim) = (4000, 6);
        let feats: Vec<f32> = (0..n * dim)
            .map(|_| {
                let z: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                z as f32
            })
            .collect();
        let pca = fit_pca(&feats, n, dim, dim).unwrap();
        for &v in &pca.explained_variance {
            assert!((v - 1.0).abs() < 0.15, "variance {v} far from 1");
        }
    }

    #[test]
    fn pca_reconstruction_error_non_increasing_in_d() {
        let mut rng = crate::rng::stream_rng(12, crate::rng::Stream::GradCheck);
        use rand::Rng;
        let (n, dim) = (60, 16);
        let feats: Vec<f32> = (0..n * dim).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let mut prev = f64::INFINITY;
        for d in [2usize, 4, 8, 16] {
            let pca = fit_pca(&feats, n, dim, d).unwrap();
            let mut err = 0.0f64;
            for row in feats.chunks_exact(dim) {
                let back = pca.lift(&pca.project(row).unwrap()).unwrap();
                err += row
                    .iter()
                    .zip(&back)
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>();
            }
            assert!(err <= prev + 1e-9, "reconstruction error rose at d = {d}");
            prev = err;
        }
        assert!(prev < 1e-8, "full basis should reconstruct exactly");
    }

    #[test]
    fn pca_rejects_degenerate_inputs() {
        assert!(fit_pca(&[1.0; 12], 3, 4, 3).is_err()); // n <= d
        let same = vec![0.5f32; 5 * 3];
        assert!(fit_pca(&same, 5, 3, 2).is_err()); // zero variance
    }

    #[test]
    fn kmeans_separates_antipodal_clusters() {
        let mut feats = Vec::new();
        for i in 0..10 {
            let eps = (i as f32) * 1e-3;
            feats.extend_from_slice(&[1.0, eps]);
        }
        for i in 0..10 {
            let eps = (i as f32) * 1e-3;
            feats.extend_from_slice(&[-1.0, eps]);
        }
        let run = cosine_kmeans(&feats, 20, 2, 2, 7, 100).unwrap();
        let a0 = run.assignments[0];
        assert!(run.assignments[..10].iter().all(|&a| a == a0));
        assert!(run.assignments[10..].iter().all(|&a| a != a0));
    }

    #[test]
    fn kmeans_k_equals_n_gives_zero_objective() {
        let feats = vec![1.0f32, 0.0, 0.0, 1.0, -1.0, 0.0];
        let run = cosine_kmeans(&feats, 3, 2, 3, 1, 100).unwrap();
        let mut sorted = run.assignments.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
        assert!(run.objective_trace.last().unwrap() < &1e-9);
    }

    #[test]
    fn kmeans_matches_bruteforce_on_planar_angles() {
        // Unit vectors at 0, 5, 180, 185 degrees.
        let angles = [0.0f64, 5.0, 180.0, 185.0];
        let feats: Vec<f32> = angles
            .iter()
            .flat_map(|a| {
                let r = a.to_radians();
                [r.cos() as f32, r.sin() as f32]
            })
            .collect();

        // Brute-force oracle: best 2-partition by cosine distortion with
        // normalized-mean centroids.
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1..7u32 {
            let groups: Vec<Vec<usize>> = (0..2)
                .map(|g| {
                    (0..4)
                        .filter(|&i| ((mask >> i) & 1) as usize == g)
                        .collect()
                })
                .collect();
            if groups.iter().any(|g| g.is_empty()) {
                continue;
            }
            let mut obj = 0.0;
            for g in &groups {
                let mut c = [0.0f64; 2];
                for &i in g {
                    c[0] += feats[i * 2] as f64;
                    c[1] += feats[i * 2 + 1] as f64;
                }
                let n = (c[0] * c[0] + c[1] * c[1]).sqrt();
                for &i in g {
                    obj += 1.0
                        - (feats[i * 2] as f64 * c[0] + feats[i * 2 + 1] as f64 * c[1]) / n;
                }
            }
            if obj < best.0 {
                best = (obj, mask);
            }
        }
        // The optimal partition is {0,1} vs {2,3} (either labeling).
        assert!(best.1 == 0b1100 || best.1 == 0b0011, "mask {:04b}", best.1);

        let run = cosine_kmeans(&feats, 4, 2, 2, 3, 100).unwrap();
        assert_eq!(run.assignments[0], run.assignments[1]);
        assert_eq!(run.assignments[2], run.assignments[3]);
        assert_ne!(run.assignments[0], run.assignments[2]);
        // Centroids are the pairwise means of the original vectors.
        let c_front = run.assignments[0] as usize;
        for (i, pair) in [(0usize, 1usize), (2, 3)].iter().enumerate() {
            let j = if i == 0 { c_front } else { 1 - c_front };
            let mean = [
                (feats[pair.0 * 2] + feats[pair.1 * 2]) / 2.0,
                (feats[pair.0 * 2 + 1] + feats[pair.1 * 2 + 1]) / 2.0,
            ];
            assert!((run.centroids[j * 2] - mean[0]).abs() < 1e-6);
            assert!((run.centroids[j * 2 + 1] - mean[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        let mut rng = crate::rng::stream_rng(9, crate::rng::Stream::GradCheck);
        use rand::Rng;
        let (n, dim) = (60, 4);
        let feats: Vec<f32> = (0..n * dim).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let run = cosine_kmeans(&feats, n, dim, 5, 2, 100).unwrap();
        for w in run.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective went up: {w:?}");
        }
        // Post-convergence assignment optimality.
        let mut dirs = vec![0.0f64; 5 * dim];
        let mut counts = vec![0usize; 5];
        let unit = normalize_rows(&feats, n, dim).unwrap();
        for (i, &a) in run.assignments.iter().enumerate() {
            counts[a as usize] += 1;
            for (s, &v) in dirs[a as usize * dim..(a as usize + 1) * dim]
                .iter_mut()
                .zip(&unit[i * dim..(i + 1) * dim])
            {
                *s += v;
            }
        }
        for j in 0..5 {
            let norm = dot64(&dirs[j * dim..(j + 1) * dim], &dirs[j * dim..(j + 1) * dim]).sqrt();
            if norm > 0.0 {
                dirs[j * dim..(j + 1) * dim].iter_mut().for_each(|v| *v /= norm);
            }
        }
        for i in 0..n {
            let assigned = run.assignments[i] as usize;
            let own = dot64(&unit[i * dim..(i + 1) * dim], &dirs[assigned * dim..(assigned + 1) * dim]);
            for j in 0..5 {
                if counts[j] == 0 {
                    continue;
                }
                let c = dot64(&unit[i * dim..(i + 1) * dim], &dirs[j * dim..(j + 1) * dim]);
                assert!(c <= own + 1e-9, "point {i} prefers cluster {j}");
            }
        }
    }

    #[test]
    fn kmeans_scaling_invariance() {
        let mut rng = crate::rng::stream_rng(4, crate::rng::Stream::GradCheck);
        use rand::Rng;
        let (n, dim) = (30, 3);
        let feats: Vec<f32> = (0..n * dim).map(|_| rng.gen::<f32>() + 0.1).collect();
        let scaled: Vec<f32> = feats.iter().map(|&v| v * 2.0).collect();
        let a = cosine_kmeans(&feats, n, dim, 3, 5, 100).unwrap();
        let b = cosine_kmeans(&scaled, n, dim, 3, 5, 100).unwrap();
        assert_eq!(a.assignments, b.assignments);
        for (x, y) in a.centroids.iter().zip(&b.centroids) {
            assert!((x * 2.0 - y).abs() < 1e-4);
        }
    }

    #[test]
    fn silhouette_far_clusters_score_high() {
        let mut feats = Vec::new();
        let mut assign = Vec::new();
        for i in 0..15 {
            feats.extend_from_slice(&[1.0, (i as f32) * 1e-3]);
            assign.push(0u32);
        }
        for i in 0..15 {
            feats.extend_from_slice(&[-1.0, (i as f32) * 1e-3]);
            assign.push(1u32);
        }
        let s = silhouette_score(&feats, 30, 2, &assign, 0).unwrap();
        assert!(s > 0.9, "score {s}");
        assert!(s <= 1.0);
    }

    #[test]
    fn silhouette_identical_points_score_zero() {
        let feats = vec![0.5f32; 8 * 2];
        let assign = vec![0u32, 0, 0, 0, 1, 1, 1, 1];
        let s = silhouette_score(&feats, 8, 2, &assign, 0).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn silhouette_single_cluster_errors() {
        let feats = vec![1.0f32, 0.0, 0.9, 0.1];
        assert!(silhouette_score(&feats, 2, 2, &[0, 0], 0).is_err());
    }

    #[test]
    fn select_recovers_two_classes_and_degenerate_range() {
        let mut feats = Vec::new();
        for i in 0..12 {
            let eps = (i % 4) as f32 * 0.01;
            if i < 6 {
                feats.extend_from_slice(&[1.0, eps, 0.0]);
            } else {
                feats.extend_from_slice(&[0.0, eps, 1.0]);
            }
        }
        let k = select_codebook_size(&feats, 12, 3, 2, 6, 1).unwrap();
        assert_eq!(k, 2);
        // k_min == k_max pins the answer.
        let k = select_codebook_size(&feats, 12, 3, 5, 5, 1).unwrap();
        assert_eq!(k, 5);
    }

    #[test]
    fn codebook_from_separated_classes_matches_embeddings() {
        let mut rng = crate::rng::stream_rng(8, crate::rng::Stream::SceneEmbeddings);
        let embeds =
            crate::scene::sample_separated_embeddings(&mut rng, 8, 24, 0.3).unwrap();
        // 16 copies of each embedding, as per-mask features across views.
        let mut feats = Vec::new();
        for _ in 0..16 {
            for e in &embeds {
                feats.extend_from_slice(e);
            }
        }
        let cb = init_codebook(&feats, 16 * 8, 24, 2, 16, 0).unwrap();
        assert_eq!(cb.n_entries, 8);
        for e in &embeds {
            let best = (0..cb.n_entries)
                .map(|j| cos32(cb.entry(j), e))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(best >= 0.99, "centroid missing for an embedding: {best}");
        }
        // Determinism.
        let cb2 = init_codebook(&feats, 16 * 8, 24, 2, 16, 0).unwrap();
        assert_eq!(cb, cb2);
    }
}
