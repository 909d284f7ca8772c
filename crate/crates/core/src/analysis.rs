//! Clustering of latent images and hidden feature maps, decoded cluster
//! centers, concept alignment scores and PNG image grids.

use std::collections::HashSet;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataSet, Image28, PIXELS, SIDE};
use crate::model::{self, ModelParams};
use crate::{Error, Result};

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub centers: Vec<Vec<f32>>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances of every vector to its assigned center.
    pub inertia: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest center (ties go to the lower id) and its squared
/// distance.
pub fn nearest(v: &[f32], centers: &[Vec<f32>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(v, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(vectors: &[Vec<f32>], centers: &[Vec<f32>]) -> (Vec<usize>, Vec<f64>) {
    vectors.iter().map(|v| nearest(v, centers)).unzip()
}

fn distinct_count(vectors: &[Vec<f32>], stop_at: usize) -> usize {
    let mut seen = HashSet::new();
    for v in vectors {
        seen.insert(v.iter().map(|x| x.to_bits()).collect::<Vec<u32>>());
        if seen.len() >= stop_at {
            break;
        }
    }
    seen.len()
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Iteration stops when an assignment repeats, when the summed squared
/// center shift falls below `rel_tol` times the mean per-dimension variance
/// of the data, or after `max_iter` rounds. A cluster that becomes empty is
/// reseeded at the vector farthest from its current center.
pub fn kmeans(vectors: &[Vec<f32>], k: usize, seed: u64, max_iter: usize, rel_tol: f64) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let distinct = distinct_count(vectors, k);
    if distinct < k {
        return Err(Error::TooFewVectors { k, distinct });
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch("vectors of unequal length".into()));
    }
    let n = vectors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers: Vec<Vec<f32>> = vec![vectors[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            // Guard against landing on a zero-weight point through rounding.
            if d2[idx] == 0.0 {
                idx = d2.iter().enumerate().fold(0, |b, (i, &d)| if d > d2[b] { i } else { b });
            }
            idx
        } else {
            unreachable!("fewer distinct vectors than clusters")
        };
        centers.push(vectors[pick].clone());
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, centers.last().expect("just pushed")));
        }
    }

    let variance = {
        let mut mean = vec![0.0f64; dim];
        for v in vectors {
            for (m, &x) in mean.iter_mut().zip(v) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let var: f64 = vectors.iter().map(|v| v.iter().zip(&mean).map(|(&x, m)| (x as f64 - m).powi(2)).sum::<f64>()).sum();
        var / (n as f64 * dim as f64)
    };
    let tol = rel_tol * variance;

    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut iterations = 0;
    let (mut assignment, mut dists) = assign(vectors, &centers);
    history.push(dists.iter().sum());
    while iterations < max_iter {
        iterations += 1;
        if previous.as_ref() == Some(&assignment) {
            break;
        }
        // Update step.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(v) {
                *s += x as f64;
            }
        }
        let mut shift = 0.0;
        let mut taken: HashSet<usize> = HashSet::new();
        for c in 0..k {
            let new: Vec<f32> = if counts[c] > 0 {
                sums[c].iter().map(|s| (s / counts[c] as f64) as f32).collect()
            } else {
                let far = (0..n).filter(|i| !taken.contains(i)).fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
                let far = far.expect("n >= k");
                taken.insert(far);
                vectors[far].clone()
            };
            shift += sq_dist(&new, &centers[c]);
            centers[c] = new;
        }
        previous = Some(assignment);
        (assignment, dists) = assign(vectors, &centers);
        history.push(dists.iter().sum());
        if shift <= tol {
            break;
        }
    }
    Ok(Clustering {
        k,
        centers,
        assignment,
        inertia: dists.iter().sum(),
        seed,
        iterations,
        inertia_history: history,
    })
}

/// Flattened `mu` maps of every sample (deterministic encoding).
pub fn latent_vectors(params: &ModelParams<f32>, data: &DataSet) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(crate::training::EVAL_BATCH) {
        let imgs: Vec<&Image28> = chunk.iter().map(|s| s.image()).collect();
        let dist = model::encode_batch(params, &model::images_to_tensor::<f32>(&imgs))?;
        out.extend((0..imgs.len()).map(|n| model::flatten_latent(&dist, n)));
    }
    Ok(out)
}

/// Channel-mean of decoder layer `layer` for every sample, with `z = mu`.
pub fn layer_mean_maps(params: &ModelParams<f32>, data: &DataSet, layer: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(crate::training::EVAL_BATCH) {
        let imgs: Vec<&Image28> = chunk.iter().map(|s| s.image()).collect();
        let pass = model::forward_eval(params, &model::images_to_tensor::<f32>(&imgs))?;
        out.extend((0..imgs.len()).map(|n| pass.trace.channel_mean(layer, n)));
    }
    Ok(out)
}

pub fn cluster_latents(params: &ModelParams<f32>, data: &DataSet, k: usize, seed: u64) -> Result<Clustering> {
    kmeans(&latent_vectors(params, data)?, k, seed, KMEANS_MAX_ITER, KMEANS_REL_TOL)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    #[serde(skip)]
    pub center_images: Vec<Image28>,
    pub sizes: Vec<usize>,
    pub dominant_label: Vec<Option<u8>>,
    pub purity: Vec<f64>,
    pub inertia: f64,
    pub grid_path: Option<String>,
    pub alignment_score: Option<f64>,
}

impl ClusterReport {
    /// Clusters whose purity exceeds `threshold`.
    pub fn count_purer_than(&self, threshold: f64) -> usize {
        self.purity.iter().filter(|&&p| p > threshold).count()
    }
}

/// Per-cluster label histograms.
pub fn label_histograms(assignment: &[usize], labels: &[u8], k: usize) -> Vec<[usize; 28]> {
    let mut h = vec![[0usize; 28]; k];
    for (&a, &l) in assignment.iter().zip(labels) {
        h[a][l as usize] += 1;
    }
    h
}

/// Majority label (lowest label on ties) and its share for each cluster.
pub fn majority(hist: &[[usize; 28]]) -> (Vec<Option<u8>>, Vec<f64>) {
    hist.iter()
        .map(|h| {
            let total: usize = h.iter().sum();
            if total == 0 {
                return (None, 0.0);
            }
            let (label, &count) = h.iter().enumerate().fold((0, &0), |best, (l, c)| if *c > *best.1 { (l, c) } else { best });
            (Some(label as u8), count as f64 / total as f64)
        })
        .unzip()
}

fn report(clustering: &Clustering, labels: &[u8], center_images: Vec<Image28>) -> Result<ClusterReport> {
    if labels.len() != clustering.assignment.len() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} vectors", labels.len(), clustering.assignment.len())));
    }
    let hist = label_histograms(&clustering.assignment, labels, clustering.k);
    let (dominant_label, purity) = majority(&hist);
    Ok(ClusterReport {
        k: clustering.k,
        center_images,
        sizes: clustering.sizes(),
        dominant_label,
        purity,
        inertia: clustering.inertia,
        grid_path: None,
        alignment_score: None,
    })
}

/// Decodes every latent center and computes dominant labels with purity.
pub fn decode_centers(params: &ModelParams<f32>, clustering: &Clustering, labels: &[u8]) -> Result<ClusterReport> {
    let z = model::unflatten_latents::<f32>(&params.config, &clustering.centers)?;
    let trace = model::decode(params, &z)?;
    let images = (0..clustering.k).map(|n| trace.output_image(n)).collect();
    report(clustering, labels, images)
}

/// Rescales to `[0, 1]` by min/max (constant maps become all zero).
pub fn minmax_image(v: &[f32]) -> Result<Image28> {
    let (lo, hi) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    let px: Vec<f32> = v.iter().map(|&x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect();
    Image28::from_pixels_clamped(&px)
}

/// Clusters the channel-mean maps of decoder layer `layer`. The centers are
/// already 28x28 images; for display they are min/max rescaled.
pub fn cluster_layer_maps(params: &ModelParams<f32>, data: &DataSet, layer: usize, k: usize, seed: u64) -> Result<(Clustering, ClusterReport)> {
    let maps = layer_mean_maps(params, data, layer)?;
    if maps.first().map(|m| m.len()) != Some(PIXELS) {
        return Err(Error::ShapeMismatch(format!("decoder layer {layer} is not 28x28")));
    }
    let clustering = kmeans(&maps, k, seed, KMEANS_MAX_ITER, KMEANS_REL_TOL)?;
    let images = clustering.centers.iter().map(|c| minmax_image(c)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = data.iter().map(|s| s.label()).collect();
    let report = report(&clustering, &labels, images)?;
    Ok((clustering, report))
}

pub fn cluster_layer3(params: &ModelParams<f32>, data: &DataSet, k: usize, seed: u64) -> Result<(Clustering, ClusterReport)> {
    cluster_layer_maps(params, data, 3, k, seed)
}

/// Zero-normalized cross-correlation; 0 if either input is constant.
pub fn zncc(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    // Relative threshold so float noise on a constant image does not count
    // as structure.
    let scale_a = a.iter().map(|&x| (x as f64).abs()).fold(0.0, f64::max).max(1e-30);
    let scale_b = b.iter().map(|&x| (x as f64).abs()).fold(0.0, f64::max).max(1e-30);
    if va <= 1e-20 * scale_a * scale_a * n || vb <= 1e-20 * scale_b * scale_b * n {
        return 0.0;
    }
    num / (va * vb).sqrt()
}

/// Mean over centers of the best ZNCC against any template.
pub fn alignment_score(centers: &[Vec<f32>], templates: &[Image28]) -> f64 {
    if centers.is_empty() {
        return 0.0;
    }
    let total: f64 = centers
        .iter()
        .map(|c| templates.iter().map(|t| zncc(c, t.pixels())).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / centers.len() as f64
}

/// Optimal one-to-one assignment of `k <= 16` clusters to labels `0..k`
/// maximizing the summed per-cluster label share (ties keep the
/// lexicographically smallest assignment). Returns `assigned[cluster] = label`.
pub fn assign_labels(hist: &[[usize; 28]], labels: usize) -> Result<Vec<u8>> {
    let k = hist.len();
    if k != labels || k > 16 {
        return Err(Error::InvalidArgument(format!("need as many clusters as labels (<= 16), got {k} and {labels}")));
    }
    if let Some(c) = hist.iter().position(|h| h.iter().sum::<usize>() == 0) {
        return Err(Error::InvalidArgument(format!("cluster {c} is empty; assignment is ambiguous")));
    }
    let share = |c: usize, l: usize| hist[c][l] as f64 / hist[c].iter().sum::<usize>() as f64;
    // best[mask] = best total for clusters 0..popcount(mask) using the labels in mask,
    // filled from the last cluster backwards so the tie rule is lexicographic.
    let full = (1usize << k) - 1;
    let mut best = vec![f64::NEG_INFINITY; 1 << k];
    let mut choice = vec![usize::MAX; 1 << k];
    best[full] = 0.0;
    for mask in (0..full).rev() {
        let c = mask.count_ones() as usize;
        for l in 0..k {
            if mask & (1 << l) == 0 {
                let next = mask | (1 << l);
                let v = share(c, l) + best[next];
                if v > best[mask] + 1e-12 {
                    best[mask] = v;
                    choice[mask] = l;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(k);
    let mut mask = 0;
    for _ in 0..k {
        let l = choice[mask];
        out.push(l as u8);
        mask |= 1 << l;
    }
    Ok(out)
}

/// 8-bit pixels of a grid: `columns` wide, 2-px gray separators between and
/// around tiles, unused tiles black.
pub fn grid_pixels(images: &[Image28], columns: usize) -> Result<(u32, u32, Vec<u8>)> {
    if images.is_empty() || columns == 0 {
        return Err(Error::InvalidArgument("grid needs at least one image and one column".into()));
    }
    const SEP: usize = 2;
    const SEP_VALUE: u8 = 128;
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let width = cols * SIDE + (cols + 1) * SEP;
    let height = rows * SIDE + (rows + 1) * SEP;
    let mut px = vec![SEP_VALUE; width * height];
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let (x0, y0) = (SEP + c * (SIDE + SEP), SEP + r * (SIDE + SEP));
            for y in 0..SIDE {
                for x in 0..SIDE {
                    px[(y0 + y) * width + x0 + x] = match images.get(idx) {
                        Some(img) => (img.get(y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                        None => 0,
                    };
                }
            }
        }
    }
    Ok((width as u32, height as u32, px))
}

/// Writes a grayscale PNG grid of `images`.
pub fn render_grid(images: &[Image28], columns: usize, path: &Path) -> Result<()> {
    let (w, h, px) = grid_pixels(images, columns)?;
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Balanced);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&px)?;
    writer.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f32, f32)]) -> Vec<Vec<f32>> {
        v.iter().map(|&(a, b)| vec![a, b]).collect()
    }

    #[test]
    fn two_pairs_brute_force() {
        let v = pts(&[(0.0, 0.0), (0.0, 1.0), (10.0, 10.0), (11.0, 10.0)]);
        // Brute force over all 2-partitions of 4 points.
        let mut best = f64::INFINITY;
        for mask in 1u32..15 {
            let mut inertia = 0.0;
            for side in [true, false] {
                let members: Vec<&Vec<f32>> = v.iter().enumerate().filter(|(i, _)| (mask >> i & 1 == 1) == side).map(|(_, p)| p).collect();
                let c: Vec<f32> = (0..2).map(|d| members.iter().map(|p| p[d]).sum::<f32>() / members.len() as f32).collect();
                inertia += members.iter().map(|p| sq_dist(p, &c)).sum::<f64>();
            }
            best = best.min(inertia);
        }
        let c = kmeans(&v, 2, 1, 300, 1e-4).unwrap();
        assert!((c.inertia - best).abs() < 1e-9);
        assert!((best - 1.0).abs() < 1e-12);
        let mut centers = c.centers.clone();
        centers.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(centers, vec![vec![0.0, 0.5], vec![10.5, 10.0]]);
    }

    #[test]
    fn k_equals_n() {
        let v = pts(&[(0.0, 0.0), (1.0, 5.0), (3.0, 2.0)]);
        let c = kmeans(&v, 3, 0, 300, 1e-4).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut a = c.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn too_few_distinct() {
        let v = pts(&[(1.0, 1.0), (1.0, 1.0), (2.0, 2.0)]);
        assert!(matches!(kmeans(&v, 3, 0, 300, 1e-4), Err(Error::TooFewVectors { k: 3, distinct: 2 })));
    }

    #[test]
    fn inertia_monotone_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<Vec<f32>> = (0..300).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let c = kmeans(&v, 7, 3, 300, 1e-4).unwrap();
        for w in c.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let (again, _) = assign(&v, &c.centers);
        assert_eq!(again, c.assignment);
        assert_eq!(c, kmeans(&v, 7, 3, 300, 1e-4).unwrap());
    }

    #[test]
    fn majority_matches_histogram() {
        let assignment = [0, 0, 0, 1, 1, 2];
        let labels = [3, 3, 5, 7, 8, 9];
        let h = label_histograms(&assignment, &labels, 3);
        let (dom, purity) = majority(&h);
        assert_eq!(dom, vec![Some(3), Some(7), Some(9)]);
        assert_eq!(purity, vec![2.0 / 3.0, 0.5, 1.0]);
    }

    #[test]
    fn zncc_properties() {
        let a: Vec<f32> = (0..PIXELS).map(|i| (i % 13) as f32).collect();
        assert!((zncc(&a, &a) - 1.0).abs() < 1e-12);
        let scaled: Vec<f32> = a.iter().map(|x| 3.0 * x + 2.0).collect();
        assert!((zncc(&scaled, &a) - 1.0).abs() < 1e-9);
        assert_eq!(zncc(&[0.5; PIXELS], &a), 0.0);
    }

    #[test]
    fn alignment_of_permuted_templates() {
        let templates: Vec<Image28> = (0..18)
            .map(|t| {
                let px: Vec<f32> = (0..PIXELS).map(|i| if (i + t * 7) % 19 < 4 { 1.0 } else { 0.0 }).collect();
                Image28::from_pixels(&px).unwrap()
            })
            .collect();
        let centers: Vec<Vec<f32>> = templates.iter().rev().map(|t| t.pixels().to_vec()).collect();
        assert!((alignment_score(&centers, &templates) - 1.0).abs() < 1e-9);
        let rescaled: Vec<Vec<f32>> = centers.iter().map(|c| c.iter().map(|x| 0.2 * x - 5.0).collect()).collect();
        assert!((alignment_score(&rescaled, &templates) - alignment_score(&centers, &templates)).abs() < 1e-9);
    }

    #[test]
    fn noise_centers_score_near_zero() {
        let templates: Vec<Image28> = (0..18)
            .map(|t| {
                let (r0, c0) = (2 + t % 6 * 3, 3 + t / 6 * 6);
                let px: Vec<f32> = (0..PIXELS)
                    .map(|i| if (r0..r0 + 8).contains(&(i / 28)) && (c0..c0 + 5).contains(&(i % 28)) { 1.0 } else { 0.0 })
                    .collect();
                Image28::from_pixels(&px).unwrap()
            })
            .collect();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centers: Vec<Vec<f32>> = (0..18).map(|_| (0..PIXELS).map(|_| rng.random::<f32>()).collect()).collect();
            let score = alignment_score(&centers, &templates);
            assert!(score.abs() < 0.2, "seed {seed}: {score}");
        }
    }

    #[test]
    fn assignment_matches_exhaustive_search() {
        // Noisy 6-cluster fixture where greedy and optimal differ.
        let k = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let hist: Vec<[usize; 28]> = (0..k)
                .map(|_| {
                    let mut h = [0; 28];
                    for slot in &mut h[..k] {
                        *slot = rng.random_range(0..20);
                    }
                    h[0] += 1;
                    h
                })
                .collect();
            let got = assign_labels(&hist, k).unwrap();
            let share = |c: usize, l: usize| hist[c][l] as f64 / hist[c].iter().sum::<usize>() as f64;
            let score = |a: &[u8]| a.iter().enumerate().map(|(c, &l)| share(c, l as usize)).sum::<f64>();
            // Heap's algorithm over all permutations.
            let mut perm: Vec<u8> = (0..k as u8).collect();
            let mut best = score(&perm);
            let mut c = vec![0; k];
            let mut i = 0;
            while i < k {
                if c[i] < i {
                    if i % 2 == 0 { perm.swap(0, i) } else { perm.swap(c[i], i) }
                    best = best.max(score(&perm));
                    c[i] += 1;
                    i = 0;
                } else {
                    c[i] = 0;
                    i += 1;
                }
            }
            assert!((score(&got) - best).abs() < 1e-9);
            let mut sorted = got.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..k as u8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn grid_layout() {
        let imgs = vec![Image28::filled(0.5).unwrap(); 10];
        let (w, h, _) = grid_pixels(&imgs, 5).unwrap();
        assert_eq!((w, h), (5 * 28 + 6 * 2, 2 * 28 + 3 * 2));
        assert!(grid_pixels(&[], 3).is_err());
    }

    #[test]
    fn single_image_png_round_trip() {
        let px: Vec<f32> = (0..PIXELS).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = Image28::from_pixels(&px).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.png");
        render_grid(std::slice::from_ref(&img), 4, &path).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (32, 32));
        assert_eq!(info.color_type, png::ColorType::Grayscale);
        let raw = img.to_raw();
        for y in 0..SIDE {
            for x in 0..SIDE {
                assert_eq!(buf[(y + 2) * 32 + x + 2], raw[y * SIDE + x]);
            }
        }
        let first = std::fs::read(&path).unwrap();
        render_grid(std::slice::from_ref(&img), 4, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }
}
