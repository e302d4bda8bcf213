//! Pixel-wise K-means over the last block's feature map.
//!
//! Every spatial position of the feature map is a point in channel space.
//! The points are clustered, the resulting label map is lifted to image
//! resolution, and each cluster becomes a masked copy of the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{normalize_to_input, resize_bilinear, upsample_nearest, BinaryMask, LabelMap, RasterImage, Tensor};
use crate::refnet::{ModelSpec, INPUT_MEAN, INPUT_STD};

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub seed: u64,
    pub fill: [u8; 3],
    /// Longest image side fed to the trunk; larger images are shrunk first.
    pub max_side: Option<usize>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            k: 3,
            max_iters: 50,
            tol: 1e-4,
            seed: 0,
            fill: [0, 0, 0],
            max_side: Some(512),
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max iterations must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tolerance must be >= 0".into()));
        }
        if self.max_side == Some(0) {
            return Err(Error::Config("max side must be >= 1".into()));
        }
        Ok(())
    }
}

/// K-means result with the per-iteration objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub labels: LabelMap,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid, recorded after
    /// every assignment step.
    pub objective: Vec<f64>,
}

/// A cluster of the image: its mask and the image with everything outside
/// the mask replaced by the fill color.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub cluster: u32,
    pub mask: BinaryMask,
    pub image: RasterImage,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the target just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            chosen.iter().position(|&c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

/// Assigns every point. With `repair`, each empty cluster's centroid then
/// moves onto the point farthest from its current centroid.
fn assign(points: &[Vec<f64>], centroids: &mut [Vec<f64>], labels: &mut [usize], repair: bool) -> f64 {
    let k = centroids.len();
    let mut dist = vec![0.0; points.len()];
    let mut sizes = vec![0usize; k];
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p, centroids);
        labels[i] = c;
        dist[i] = d;
        sizes[c] += 1;
    }
    for c in 0..k {
        if !repair || sizes[c] > 0 {
            continue;
        }
        let mut far = None;
        for (i, &d) in dist.iter().enumerate() {
            if sizes[labels[i]] > 1 && far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { break };
        sizes[labels[i]] -= 1;
        sizes[c] = 1;
        labels[i] = c;
        dist[i] = 0.0;
        centroids[c] = points[i].clone();
    }
    dist.iter().sum()
}

fn recenter(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = centroids[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(centroids)
        .map(|((s, n), old)| {
            if n == 0 {
                old.clone()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

/// Clusters the `H*W` feature vectors of a `[C, H, W]` map.
pub fn cluster_pixels(fm: &Tensor, cfg: &SegmentationConfig) -> Result<Clustering> {
    cfg.validate()?;
    let (c, h, w) = match fm.dims() {
        &[c, h, w] if c > 0 => (c, h, w),
        d => return Err(Error::shape("[C, H, W]", format!("{d:?}"))),
    };
    let n = h * w;
    if cfg.k > n {
        return Err(Error::Config(format!("k = {} exceeds the {n} feature pixels", cfg.k)));
    }
    let data = fm.data();
    let points: Vec<Vec<f64>> = (0..n).map(|i| (0..c).map(|ch| data[ch * n + i] as f64).collect()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_pp(&points, cfg.k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut objective = Vec::new();
    for _ in 0..cfg.max_iters {
        objective.push(assign(&points, &mut centroids, &mut labels, true));
        let next = recenter(&points, &labels, &centroids);
        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < cfg.tol {
            break;
        }
    }
    objective.push(assign(&points, &mut centroids, &mut labels, false));

    let labels = LabelMap::new(h, w, cfg.k, labels.into_iter().map(|l| l as u32).collect())?;
    Ok(Clustering {
        labels,
        centroids,
        objective,
    })
}

/// Label map at feature resolution.
pub fn pixel_kmeans(fm: &Tensor, cfg: &SegmentationConfig) -> Result<LabelMap> {
    Ok(cluster_pixels(fm, cfg)?.labels)
}

/// Lifts `labels` to the image size and emits one segment per non-empty
/// cluster, in cluster order.
pub fn masks_to_segments(img: &RasterImage, labels: &LabelMap, cfg: &SegmentationConfig) -> Result<Vec<Segment>> {
    let (h, w) = (img.height(), img.width());
    let up = upsample_nearest(labels, h, w)?;
    let mut segments = Vec::new();
    for cluster in 0..labels.num_labels as u32 {
        let mask = BinaryMask::new(h, w, up.labels.iter().map(|&l| l == cluster).collect())?;
        if mask.count() == 0 {
            continue;
        }
        let pixels = img
            .pixels()
            .iter()
            .zip(mask.bits())
            .map(|(&p, &on)| if on { p } else { cfg.fill })
            .collect();
        segments.push(Segment {
            cluster,
            mask,
            image: RasterImage::new(h, w, pixels)?,
        });
    }
    Ok(segments)
}

/// Normalized trunk input for segmentation, shrunk to `max_side` if needed.
fn segmentation_input(img: &RasterImage, max_side: Option<usize>) -> Result<Tensor> {
    let longest = img.height().max(img.width());
    match max_side {
        Some(side) if longest > side => {
            let scale = side as f64 / longest as f64;
            let h = ((img.height() as f64 * scale).round() as usize).max(1);
            let w = ((img.width() as f64 * scale).round() as usize).max(1);
            normalize_to_input(&resize_bilinear(img, h, w)?, INPUT_MEAN, INPUT_STD)
        }
        _ => normalize_to_input(img, INPUT_MEAN, INPUT_STD),
    }
}

/// Cluster labels of the image's last-block features.
pub fn segment_labels(m: &ModelSpec, img: &RasterImage, cfg: &SegmentationConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let fm = m.last_feature_map(&segmentation_input(img, cfg.max_side)?)?;
    pixel_kmeans(&fm, cfg)
}

/// Segments an image by clustering the model's last-block features.
///
/// The trunk runs fully convolutionally on the image at its own size
/// (capped by `max_side`) so that the feature grid is fine enough to
/// cluster.
pub fn segment_image(m: &ModelSpec, img: &RasterImage, cfg: &SegmentationConfig) -> Result<Vec<Segment>> {
    let labels = segment_labels(m, img, cfg)?;
    masks_to_segments(img, &labels, cfg)
}
