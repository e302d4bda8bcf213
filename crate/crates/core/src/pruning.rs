//! Block pruning driven by structural similarity of block outputs.
//!
//! Each block's output on a probe image is summed over channels; the
//! pairwise SSIM of those maps forms a similarity matrix. The most similar
//! pair whose later block is shape-preserving loses that later block, the
//! network is fine-tuned, and the cycle repeats until the best remaining
//! similarity drops below a threshold.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{resize_plane, Plane, RasterImage, Tensor};
use crate::refnet::{conv_macs, train, ModelSpec, Sample, TrainConfig};

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Symmetric block-by-block similarity values.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    size: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from row-major values, checking symmetry, the unit
    /// diagonal and the `[-1, 1]` range.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::shape(format!("{size}x{size} matrix"), "ragged rows"));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        for i in 0..size {
            if values[i * size + i] != 1.0 {
                return Err(Error::Config(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..size {
                let v = values[i * size + j];
                if v != values[j * size + i] || !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("entry ({i},{j}) = {v} breaks symmetry or range")));
                }
            }
        }
        Ok(SimilarityMatrix { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.size).map(|r| r.to_vec()).collect()
    }
}

/// Sum over the channel axis of a `(C, H, W)` tensor.
pub fn channel_sum(fm: &Tensor) -> Result<Plane> {
    let &[c, h, w] = fm.dims() else {
        return Err(Error::shape("(C, H, W)", format!("{:?}", fm.dims())));
    };
    let plane = h * w;
    let mut out = vec![0.0f32; plane];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&fm.data()[ch * plane..(ch + 1) * plane]) {
            *o += v;
        }
    }
    Plane::new(h, w, out)
}

fn min_max(p: &Plane) -> Vec<f64> {
    let lo = p.data.iter().fold(f32::INFINITY, |a, &b| a.min(b)) as f64;
    let hi = p.data.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let range = hi - lo;
    if range > 0.0 {
        p.data.iter().map(|&v| (v as f64 - lo) / range).collect()
    } else {
        vec![0.0; p.data.len()]
    }
}

/// Global SSIM of two maps after resizing both to the smaller extent and
/// min-max scaling each to `[0, 1]` (dynamic range 1).
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    if a.data.is_empty() || b.data.is_empty() {
        return Err(Error::Empty("ssim input map"));
    }
    let h = a.height.min(b.height);
    let w = a.width.min(b.width);
    let a = min_max(&resize_plane(a, h, w)?);
    let b = min_max(&resize_plane(b, h, w)?);
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(&b) {
        let dx = x - mu_a;
        let dy = y - mu_b;
        var_a += dx * dx;
        var_b += dy * dy;
        cov += dx * dy;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2);
    let den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2);
    Ok((num / den).clamp(-1.0, 1.0))
}

/// Pairwise SSIM of the channel-summed block outputs on one probe image.
pub fn similarity_matrix(m: &ModelSpec, probe: &RasterImage) -> Result<SimilarityMatrix> {
    let b = m.blocks.len();
    if b < 2 {
        return Err(Error::Model(format!("similarity needs >= 2 blocks, model has {b}")));
    }
    let maps = m
        .block_feature_maps(&m.preprocess(probe)?)?
        .iter()
        .map(channel_sum)
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![1.0; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let v = ssim(&maps[i], &maps[j])?;
            values[i * b + j] = v;
            values[j * b + i] = v;
        }
    }
    Ok(SimilarityMatrix { size: b, values })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrunePair {
    pub i: usize,
    /// Later block of the pair; this is the one removed.
    pub j: usize,
    pub value: f64,
}

/// Most similar off-diagonal pair `(i, j)`, `i < j`, whose block `j` is
/// removable. Ties go to the lexicographically smallest `(i, j)`.
pub fn select_prune_pair(s: &SimilarityMatrix, prunable: &[bool]) -> Result<PrunePair> {
    if prunable.len() != s.size {
        return Err(Error::shape(format!("{} eligibility flags", s.size), prunable.len()));
    }
    let mut best: Option<PrunePair> = None;
    for i in 0..s.size {
        for j in i + 1..s.size {
            if !prunable[j] {
                continue;
            }
            let value = s.get(i, j);
            if best.is_none_or(|b| value > b.value) {
                best = Some(PrunePair { i, j, value });
            }
        }
    }
    best.ok_or(Error::PruningExhausted)
}

/// Analytic multiply-accumulate count of one forward pass.
pub fn flops_estimate(m: &ModelSpec) -> u64 {
    block_macs(m).iter().sum::<u64>() + stem_and_head_macs(m)
}

fn stem_and_head_macs(m: &ModelSpec) -> u64 {
    let s = m.input_size;
    m.stem.macs(s, s) + conv_macs(1, m.feature_width(), m.num_classes(), 1, 1)
}

/// Per-block conv MACs at the model's input size.
pub fn block_macs(m: &ModelSpec) -> Vec<u64> {
    let (mut h, mut w) = m.stem.out_size(m.input_size, m.input_size);
    m.blocks
        .iter()
        .map(|b| {
            let macs = b.layer.macs(h, w);
            (h, w) = b.layer.out_size(h, w);
            macs
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PruneConfig {
    pub threshold: f64,
    pub max_rounds: usize,
    pub finetune: TrainConfig,
    /// Image used for the similarity matrix; the first validation image
    /// when unset.
    pub probe: Option<RasterImage>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            threshold: 0.8,
            max_rounds: 4,
            finetune: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            probe: None,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::Config("max rounds must be >= 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        self.finetune.validate()
    }
}

/// Fine-tuning and validation data for pruning.
#[derive(Clone, Copy, Debug)]
pub struct PruneData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub pair_i: usize,
    pub pair_j: usize,
    pub max_ssim: f64,
    pub removed: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_after: u64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    BelowThreshold { max_ssim: f64 },
    MaxRounds,
    Exhausted,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopReason::BelowThreshold { max_ssim } => write!(f, "max eligible ssim {max_ssim:.4} below threshold"),
            StopReason::MaxRounds => write!(f, "max rounds reached"),
            StopReason::Exhausted => write!(f, "no removable block left"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneLog {
    pub initial_params: usize,
    pub initial_flops: u64,
    pub rounds: Vec<RoundLog>,
    pub stop: StopReason,
}

pub const PRUNE_LOG_HEADER: &str = "round,pair_i,pair_j,max_ssim,removed,params_before,params_after,flops_after,val_accuracy";

impl PruneLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(PRUNE_LOG_HEADER);
        s.push('\n');
        for r in &self.rounds {
            writeln!(
                s,
                "{},{},{},{:.6},{},{},{},{},{:.6}",
                r.round, r.pair_i, r.pair_j, r.max_ssim, r.removed, r.params_before, r.params_after, r.flops_after, r.val_accuracy
            )
            .unwrap();
        }
        s
    }
}

fn probe_image<'a>(cfg: &'a PruneConfig, data: &PruneData<'a>) -> Result<&'a RasterImage> {
    cfg.probe
        .as_ref()
        .or_else(|| data.val.first().map(|s| &s.image))
        .ok_or(Error::Empty("probe image (no probe configured and no validation images)"))
}

fn eligible(m: &ModelSpec) -> Vec<bool> {
    m.blocks.iter().map(|b| b.spec.prunable).collect()
}

fn apply_removal(mut m: ModelSpec, pair: PrunePair, round: usize, cfg: &PruneConfig, data: &PruneData) -> Result<(ModelSpec, RoundLog)> {
    let params_before = m.param_count();
    m.remove_block(pair.j)?;
    if !data.train.is_empty() {
        m = train(m, data.train, &cfg.finetune)?.0;
    }
    let val_accuracy = if data.val.is_empty() { 0.0 } else { m.accuracy(data.val)? };
    let log = RoundLog {
        round,
        pair_i: pair.i,
        pair_j: pair.j,
        max_ssim: pair.value,
        removed: pair.j,
        params_before,
        params_after: m.param_count(),
        flops_after: flops_estimate(&m),
        val_accuracy,
    };
    Ok((m, log))
}

/// One cycle: similarity matrix, pair selection, removal, fine-tune.
pub fn prune_round(m: ModelSpec, cfg: &PruneConfig, data: &PruneData) -> Result<(ModelSpec, RoundLog)> {
    cfg.validate()?;
    let s = similarity_matrix(&m, probe_image(cfg, data)?)?;
    let pair = select_prune_pair(&s, &eligible(&m))?;
    apply_removal(m, pair, 1, cfg, data)
}

/// Repeats [`prune_round`] until the best eligible similarity falls below
/// the threshold, the round cap is hit, or nothing is removable.
pub fn prune_loop(mut m: ModelSpec, cfg: &PruneConfig, data: &PruneData) -> Result<(ModelSpec, PruneLog)> {
    cfg.validate()?;
    let probe = probe_image(cfg, data)?;
    let mut log = PruneLog {
        initial_params: m.param_count(),
        initial_flops: flops_estimate(&m),
        rounds: Vec::new(),
        stop: StopReason::MaxRounds,
    };
    for round in 1..=cfg.max_rounds {
        let pair = if m.blocks.len() < 2 {
            Err(Error::PruningExhausted)
        } else {
            select_prune_pair(&similarity_matrix(&m, probe)?, &eligible(&m))
        };
        let pair = match pair {
            Ok(p) => p,
            Err(Error::PruningExhausted) => {
                log.stop = StopReason::Exhausted;
                return Ok((m, log));
            }
            Err(e) => return Err(e),
        };
        if pair.value < cfg.threshold {
            log.stop = StopReason::BelowThreshold { max_ssim: pair.value };
            return Ok((m, log));
        }
        let (next, entry) = apply_removal(m, pair, round, cfg, data)?;
        m = next;
        log.rounds.push(entry);
    }
    Ok((m, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refnet::{ArchConfig, BACKGROUND};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
        Plane::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    /// Straight-from-definition SSIM: luminance * contrast * structure with
    /// C3 = C2 / 2, moments via E[xy] - E[x]E[y].
    fn ssim_oracle(a: &[f64], b: &[f64]) -> f64 {
        let norm = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::MAX, f64::min);
            let hi = v.iter().cloned().fold(f64::MIN, f64::max);
            v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect::<Vec<_>>()
        };
        let (a, b) = (norm(a), norm(b));
        let n = a.len() as f64;
        let e = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).sum::<f64>() / n;
        let ma = e(&|i| a[i]);
        let mb = e(&|i| b[i]);
        let va = e(&|i| a[i] * a[i]) - ma * ma;
        let vb = e(&|i| b[i] * b[i]) - mb * mb;
        let cab = e(&|i| a[i] * b[i]) - ma * mb;
        let (sa, sb) = (va.max(0.0).sqrt(), vb.max(0.0).sqrt());
        let c3 = C2 / 2.0;
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        let c = (2.0 * sa * sb + C2) / (va + vb + C2);
        let s = (cab + c3) / (sa * sb + c3);
        l * c * s
    }

    #[test]
    fn channel_sum_cases() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(channel_sum(&t).unwrap().data, vec![1.0, 2.0, 3.0, 4.0]);

        let t = Tensor::filled(vec![2, 4, 4], 1.0);
        assert!(channel_sum(&t).unwrap().data.iter().all(|&v| v == 2.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::new(vec![3, 2, 2], (0..12).map(|_| rng.random::<f32>()).collect()).unwrap();
        let got = channel_sum(&t).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let mut s = 0.0f32;
                for c in 0..3 {
                    s += t.data()[c * 4 + y * 2 + x];
                }
                assert_eq!(got.at(y, x), s);
            }
        }
        assert!(channel_sum(&Tensor::zeros(vec![4, 4])).is_err());
    }

    #[test]
    fn ssim_self_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = plane(&mut rng, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);

        let check: Vec<f32> = (0..64).map(|i| ((i / 8 + i % 8) % 2) as f32).collect();
        let inv: Vec<f32> = check.iter().map(|v| 1.0 - v).collect();
        let a = Plane::new(8, 8, check).unwrap();
        let b = Plane::new(8, 8, inv).unwrap();
        let v = ssim(&a, &b).unwrap();
        assert!(v < 0.0);
        let oracle = ssim_oracle(
            &a.data.iter().map(|&x| x as f64).collect::<Vec<_>>(),
            &b.data.iter().map(|&x| x as f64).collect::<Vec<_>>(),
        );
        assert!((v - oracle).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = plane(&mut rng, 32, 32);
        let b = plane(&mut rng, 32, 32);
        let f = |p: &Plane| p.data.iter().map(|&x| x as f64).collect::<Vec<_>>();
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&f(&a), &f(&b))).abs() < 1e-6);
    }

    #[test]
    fn ssim_constant_and_unequal_sizes() {
        let flat = Plane::new(4, 4, vec![3.0; 16]).unwrap();
        let v = ssim(&flat, &flat).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let big = plane(&mut rng, 16, 16);
        let small = plane(&mut rng, 4, 4);
        let v = ssim(&big, &small).unwrap();
        assert!((-1.0..=1.0).contains(&v));
        assert_eq!(v, ssim(&small, &big).unwrap());
        assert!(ssim(&Plane::new(0, 0, vec![]).unwrap(), &small).is_err());
    }

    fn brute_force(s: &SimilarityMatrix, ok: &[bool]) -> Option<(usize, usize, f64)> {
        let mut all: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..s.size() {
            for j in 0..s.size() {
                if i < j && ok[j] {
                    all.push((i, j, s.get(i, j)));
                }
            }
        }
        let max = all.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
        all.into_iter().filter(|t| t.2 == max).min_by_key(|t| (t.0, t.1))
    }

    #[test]
    fn select_small_cases() {
        let s = SimilarityMatrix::from_rows(vec![vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let p = select_prune_pair(&s, &[true, true]).unwrap();
        // 1-based (1, 2) in the usual table numbering
        assert_eq!((p.i + 1, p.j + 1, p.value), (1, 2, 0.5));
        assert!(matches!(select_prune_pair(&s, &[true, false]), Err(Error::PruningExhausted)));
        assert!(select_prune_pair(&s, &[true]).is_err());
    }

    #[test]
    fn select_ties_prefer_smallest_pair() {
        let rows = vec![vec![1.0, 0.7, 0.7], vec![0.7, 1.0, 0.7], vec![0.7, 0.7, 1.0]];
        let s = SimilarityMatrix::from_rows(rows).unwrap();
        let p = select_prune_pair(&s, &[true; 3]).unwrap();
        assert_eq!((p.i, p.j), (0, 1));
    }

    #[test]
    fn from_rows_validates() {
        assert!(SimilarityMatrix::from_rows(vec![vec![1.0, 0.2], vec![0.3, 1.0]]).is_err());
        assert!(SimilarityMatrix::from_rows(vec![vec![0.9, 0.2], vec![0.2, 1.0]]).is_err());
        assert!(SimilarityMatrix::from_rows(vec![vec![1.0, 1.2], vec![1.2, 1.0]]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn select_equals_brute_force(size in 2usize..=20, seed: u64, quant in 1u32..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = vec![vec![1.0; size]; size];
            for i in 0..size {
                for j in i + 1..size {
                    // coarse quantization forces ties
                    let v = (rng.random_range(-1.0f64..1.0) * quant as f64).round() / quant as f64;
                    rows[i][j] = v;
                    rows[j][i] = v;
                }
            }
            let s = SimilarityMatrix::from_rows(rows).unwrap();
            let ok: Vec<bool> = (0..size).map(|_| rng.random_bool(0.6)).collect();
            let got = select_prune_pair(&s, &ok).ok().map(|p| (p.i, p.j, p.value));
            proptest::prop_assert_eq!(got, brute_force(&s, &ok));
        }

        #[test]
        fn ssim_symmetric_and_bounded(seed: u64, h in 1usize..12, w in 1usize..12, h2 in 1usize..12, w2 in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = plane(&mut rng, h, w);
            let b = plane(&mut rng, h2, w2);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            proptest::prop_assert!((ab - ba).abs() < 1e-9);
            proptest::prop_assert!((-1.0..=1.0).contains(&ab));
            proptest::prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    fn classes() -> Vec<String> {
        vec!["a".into(), "b".into(), BACKGROUND.into()]
    }

    fn probe() -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let px = (0..64 * 64).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        RasterImage::new(64, 64, px).unwrap()
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let m = ModelSpec::reference(classes(), 1).unwrap();
        let s = similarity_matrix(&m, &probe()).unwrap();
        assert_eq!(s.size(), 12);
        for i in 0..12 {
            assert_eq!(s.get(i, i), 1.0);
            for j in 0..12 {
                assert!((s.get(i, j) - s.get(j, i)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_blocks_score_one() {
        // blocks 1 and 2 sit on the same residual stream; zeroing block 2's
        // branch makes its output equal block 1's
        let mut m = ModelSpec::reference(classes(), 2).unwrap();
        m.blocks[2].layer.scale.fill(0.0);
        m.blocks[2].layer.shift.fill(0.0);
        let s = similarity_matrix(&m, &probe()).unwrap();
        assert!((s.get(1, 2) - 1.0).abs() < 1e-6);
        let p = select_prune_pair(&s, &eligible(&m)).unwrap();
        assert_eq!((p.i, p.j), (1, 2));
    }

    #[test]
    fn too_few_blocks() {
        let arch = ArchConfig {
            input_size: 16,
            stem_width: 4,
            stage_widths: vec![4],
            blocks_per_stage: 1,
            kernel: 3,
        };
        let m = ModelSpec::build(&arch, classes(), 0).unwrap();
        assert!(similarity_matrix(&m, &probe()).is_err());
    }

    #[test]
    fn conv_mac_arithmetic() {
        assert_eq!(conv_macs(1, 1, 1, 4, 4), 16);
        let mut m = ModelSpec::reference(classes(), 0).unwrap();
        let per_block = block_macs(&m);
        let before = flops_estimate(&m);
        m.remove_block(5).unwrap();
        assert_eq!(before - flops_estimate(&m), per_block[5]);
    }

    #[test]
    fn reference_flops_regression() {
        let m = ModelSpec::reference(classes(), 0).unwrap();
        // stem 442_368; stage 1 downsampler 589_824, later downsamplers 294_912 each;
        // every residual block 589_824; head 128 x 3
        assert_eq!(flops_estimate(&m), 6_635_904);
    }

    fn tiny_data() -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (0..6)
            .map(|i| {
                let base = if i % 2 == 0 { [220u8, 30, 30] } else { [30u8, 30, 220] };
                let px = (0..64 * 64).map(|_| base.map(|c| c.saturating_add(rng.random_range(0..20)))).collect();
                Sample {
                    image: RasterImage::new(64, 64, px).unwrap(),
                    label: if i % 2 == 0 { "a".into() } else { "b".into() },
                }
            })
            .collect()
    }

    fn quick_cfg(threshold: f64, max_rounds: usize) -> PruneConfig {
        PruneConfig {
            threshold,
            max_rounds,
            finetune: TrainConfig {
                epochs: 1,
                batch_size: 3,
                learning_rate: 0.01,
                seed: 0,
            },
            probe: None,
        }
    }

    #[test]
    fn round_removes_one_block() {
        let data = tiny_data();
        let d = PruneData { train: &data, val: &data };
        let m = ModelSpec::reference(classes(), 3).unwrap();
        let before = m.param_count();
        let (m, log) = prune_round(m, &quick_cfg(0.8, 4), &d).unwrap();
        assert_eq!(m.blocks.len(), 11);
        assert!(log.params_after < before);
        assert_eq!(log.params_before, before);
        assert_eq!(log.removed, log.pair_j);
        m.validate().unwrap();
    }

    #[test]
    fn loop_stop_rules() {
        let data = tiny_data();
        let d = PruneData { train: &data, val: &data };
        let m = ModelSpec::reference(classes(), 3).unwrap();

        let (same, log) = prune_loop(m.clone(), &quick_cfg(1.01, 4), &d).unwrap();
        assert!(log.rounds.is_empty());
        assert!(matches!(log.stop, StopReason::BelowThreshold { .. }));
        assert_eq!(same, m);

        let (one, log) = prune_loop(m.clone(), &quick_cfg(0.0, 1), &d).unwrap();
        assert_eq!(log.rounds.len(), 1);
        assert_eq!(log.stop, StopReason::MaxRounds);
        assert_eq!(one.blocks.len(), 11);
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with(PRUNE_LOG_HEADER));

        let (all, log) = prune_loop(m, &quick_cfg(-2.0, 20), &d).unwrap();
        assert_eq!(log.stop, StopReason::Exhausted);
        assert_eq!(log.rounds.len(), 8);
        assert!(all.prunable_indices().is_empty());
        let params: Vec<usize> = log.rounds.iter().map(|r| r.params_after).collect();
        assert!(params.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn probe_required() {
        let m = ModelSpec::reference(classes(), 3).unwrap();
        let d = PruneData { train: &[], val: &[] };
        assert!(prune_loop(m, &quick_cfg(0.8, 1), &d).is_err());
    }
}
