//! Region classification and fusion into per-image ingredient sets.
//!
//! Algorithm 1 reduces each source list (locating, sliding) to one label
//! by plurality vote and combines the two. Algorithm 2 pools both lists,
//! keeps the top `n` predictions and merges repeated labels.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::localization::{locate_regions, sliding_regions, CandidateRegion, LocateConfig};
use crate::numerics::RasterImage;
use crate::refnet::{argmax, ModelSpec, BACKGROUND};
use crate::segmentation::{segment_image, SegmentationConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: String,
    pub score: f64,
}

impl Prediction {
    pub fn new(label: impl Into<String>, score: f64) -> Self {
        Prediction {
            label: label.into(),
            score,
        }
    }
}

/// Distinct labels, highest score first.
pub type DecisionSet = Vec<Prediction>;

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionConfig {
    pub top_n: usize,
    /// Regions scoring below this are rejected.
    pub tau: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig { top_n: 2, tau: 0.5 }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::Config("top-n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// Score descending, then label ascending.
fn rank(a: &Prediction, b: &Prediction) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.label.cmp(&b.label))
}

/// Mean of the scores, summed in ascending order so the result does not
/// depend on input order.
fn mean(scores: &mut [f64]) -> f64 {
    scores.sort_by(f64::total_cmp);
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn group(preds: &[Prediction]) -> BTreeMap<&str, Vec<f64>> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for p in preds {
        groups.entry(p.label.as_str()).or_default().push(p.score);
    }
    groups
}

/// Top-1 class per region, dropping background and scores below `tau`.
pub fn classify_regions(m: &ModelSpec, regions: &[CandidateRegion], tau: f64) -> Result<Vec<Prediction>> {
    let crops: Vec<&RasterImage> = regions.iter().map(|r| &r.crop).collect();
    classify_images(m, &crops, tau)
}

fn classify_images(m: &ModelSpec, images: &[&RasterImage], tau: f64) -> Result<Vec<Prediction>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let probs = m.predict(images)?;
    Ok(probs
        .iter()
        .filter_map(|p| {
            let best = argmax(p);
            let label = &m.class_names[best];
            let score = p[best] as f64;
            (label != BACKGROUND && score >= tau).then(|| Prediction::new(label.clone(), score))
        })
        .collect())
}

/// Plurality label of one list; ties go to the higher mean score, then to
/// the lexicographically smaller label.
fn plurality(preds: &[Prediction]) -> Option<Prediction> {
    let mut best: Option<(usize, Prediction)> = None;
    for (label, mut scores) in group(preds) {
        let count = scores.len();
        let score = mean(&mut scores);
        let better = match &best {
            None => true,
            Some((c, p)) => count > *c || (count == *c && score > p.score),
        };
        if better {
            best = Some((count, Prediction::new(label, score)));
        }
    }
    best.map(|(_, p)| p)
}

/// Single-label decision for one segment.
pub fn algorithm1(locating: &[Prediction], sliding: &[Prediction]) -> Option<Prediction> {
    match (plurality(locating), plurality(sliding)) {
        (Some(a), Some(b)) if a.label == b.label => {
            let score = (a.score + b.score) / 2.0;
            Some(Prediction::new(a.label, score))
        }
        (Some(a), Some(b)) => Some(if rank(&a, &b) == Ordering::Greater { b } else { a }),
        (a, b) => a.or(b),
    }
}

/// Up to `n` labels from the pooled lists.
pub fn algorithm2(locating: &[Prediction], sliding: &[Prediction], n: usize) -> DecisionSet {
    let mut pool: Vec<Prediction> = locating.iter().chain(sliding).cloned().collect();
    pool.sort_by(rank);
    pool.truncate(n);
    let mut merged: DecisionSet = group(&pool)
        .into_iter()
        .map(|(label, mut scores)| Prediction::new(label, mean(&mut scores)))
        .collect();
    merged.sort_by(rank);
    merged
}

/// Merges sets, keeping the best score per label.
pub fn union_max(sets: impl IntoIterator<Item = DecisionSet>) -> DecisionSet {
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for p in sets.into_iter().flatten() {
        let e = best.entry(p.label).or_insert(p.score);
        *e = e.max(p.score);
    }
    let mut out: DecisionSet = best.into_iter().map(|(l, s)| Prediction::new(l, s)).collect();
    out.sort_by(rank);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Whole masked segment classified once, no localization.
    Baseline,
    Algorithm1,
    Algorithm2,
}

/// Image the sliding windows are laid over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WindowsOn {
    #[default]
    Segment,
    Original,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RecognizeConfig {
    pub segmentation: SegmentationConfig,
    pub locate: LocateConfig,
    pub decision: DecisionConfig,
    pub windows_on: WindowsOn,
}

/// Classified regions of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentEvidence {
    pub cluster: u32,
    pub locating: Vec<Prediction>,
    pub sliding: Vec<Prediction>,
    /// Classification of the whole masked segment.
    pub whole: Option<Prediction>,
}

/// Segments the image and classifies every candidate region once, so that
/// several decision methods can be applied to the same evidence.
pub fn gather_evidence(m: &ModelSpec, img: &RasterImage, cfg: &RecognizeConfig) -> Result<Vec<SegmentEvidence>> {
    cfg.decision.validate()?;
    let tau = cfg.decision.tau;
    let shared_windows = match cfg.windows_on {
        WindowsOn::Original => Some(classify_regions(m, &sliding_regions(img, m.input_size)?, tau)?),
        WindowsOn::Segment => None,
    };
    segment_image(m, img, &cfg.segmentation)?
        .into_iter()
        .map(|seg| {
            let located = locate_regions(&seg, &cfg.locate, m.input_size)?;
            let sliding = match &shared_windows {
                Some(p) => p.clone(),
                None => classify_regions(m, &sliding_regions(&seg.image, m.input_size)?, tau)?,
            };
            Ok(SegmentEvidence {
                cluster: seg.cluster,
                locating: classify_regions(m, &located, tau)?,
                sliding,
                whole: classify_images(m, &[&seg.image], tau)?.pop(),
            })
        })
        .collect()
}

/// Applies a decision method to every segment and merges the results.
pub fn decide(evidence: &[SegmentEvidence], method: Method, top_n: usize) -> DecisionSet {
    union_max(evidence.iter().map(|e| match method {
        Method::Baseline => e.whole.clone().into_iter().collect(),
        Method::Algorithm1 => algorithm1(&e.locating, &e.sliding).into_iter().collect(),
        Method::Algorithm2 => algorithm2(&e.locating, &e.sliding, top_n),
    }))
}

/// Full pipeline for one image.
pub fn recognize_image(m: &ModelSpec, img: &RasterImage, cfg: &RecognizeConfig, method: Method) -> Result<DecisionSet> {
    Ok(decide(&gather_evidence(m, img, cfg)?, method, cfg.decision.top_n))
}

/// `<path>\t<label:score;...>` with four-decimal scores.
pub fn format_record(path: &str, set: &[Prediction]) -> String {
    let mut s = format!("{path}\t");
    for (i, p) in set.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        write!(s, "{}:{:.4}", p.label, p.score).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Just, Strategy};
    use std::collections::BTreeSet;

    fn p(label: &str, score: f64) -> Prediction {
        Prediction::new(label, score)
    }

    fn labels(set: &[Prediction]) -> BTreeSet<String> {
        set.iter().map(|p| p.label.clone()).collect()
    }

    fn close(a: &Prediction, label: &str, score: f64) {
        assert_eq!(a.label, label);
        assert!((a.score - score).abs() < 1e-12, "{a:?}");
    }

    #[test]
    fn algorithm1_examples() {
        let r = algorithm1(&[p("lettuce", 0.9), p("lettuce", 0.8), p("tomato", 0.7)], &[]).unwrap();
        close(&r, "lettuce", 0.85);
        close(&algorithm1(&[p("egg", 0.9)], &[p("egg", 0.7)]).unwrap(), "egg", 0.8);
        close(&algorithm1(&[p("swine", 0.6)], &[p("cattle", 0.9)]).unwrap(), "cattle", 0.9);
        assert_eq!(algorithm1(&[], &[]), None);
        close(&algorithm1(&[], &[p("rice", 0.6)]).unwrap(), "rice", 0.6);
    }

    #[test]
    fn algorithm1_ties() {
        // equal counts: higher mean wins
        close(&algorithm1(&[p("a", 0.6), p("b", 0.7)], &[]).unwrap(), "b", 0.7);
        // equal counts and means: smaller label wins
        close(&algorithm1(&[p("b", 0.7), p("a", 0.7)], &[]).unwrap(), "a", 0.7);
        // disagreeing methods with equal scores
        close(&algorithm1(&[p("z", 0.8)], &[p("y", 0.8)]).unwrap(), "y", 0.8);
    }

    #[test]
    fn algorithm2_examples() {
        let pool = [
            p("cucumber", 0.95),
            p("meat product", 0.9),
            p("cucumber", 0.88),
            p("cucumber", 0.8),
            p("meat product", 0.75),
            p("rice", 0.6),
            p("tofu", 0.55),
        ];
        let out = algorithm2(&pool[..3], &pool[3..], 5);
        assert_eq!(labels(&out), ["cucumber", "meat product"].map(String::from).into());

        let out = algorithm2(&[p("rice", 0.9), p("tofu", 0.8)], &[], 1);
        assert_eq!(out, vec![p("rice", 0.9)]);

        let out = algorithm2(&[p("a", 0.9), p("a", 0.7)], &[p("b", 0.8), p("c", 0.6)], 3);
        assert_eq!(out.len(), 2);
        close(&out[0], "a", 0.8);
        close(&out[1], "b", 0.8);

        assert!(algorithm2(&[], &[], 3).is_empty());
    }

    #[test]
    fn union_keeps_best_score() {
        let u = union_max([vec![p("a", 0.5), p("b", 0.9)], vec![p("a", 0.7)]]);
        assert_eq!(u, vec![p("b", 0.9), p("a", 0.7)]);
    }

    #[test]
    fn record_format() {
        assert_eq!(format_record("x/y.png", &[p("egg", 0.81234), p("rice", 0.5)]), "x/y.png\tegg:0.8123;rice:0.5000");
        assert_eq!(format_record("e.png", &[]), "e.png\t");
    }

    #[test]
    fn config_validation() {
        assert!(DecisionConfig { top_n: 0, tau: 0.5 }.validate().is_err());
        assert!(DecisionConfig { top_n: 1, tau: 1.5 }.validate().is_err());
        assert!(DecisionConfig::default().validate().is_ok());
    }

    /// Pass-through trunk whose head scores class `a` by the red channel.
    fn red_model() -> ModelSpec {
        let mut m = crate::refnet::passthrough_model(vec!["a".into(), BACKGROUND.into()]);
        let f = m.feature_width();
        m.head_weight.data_mut()[0] = 2.0;
        m.head_weight.data_mut()[f + 2] = 2.0;
        m
    }

    fn crop(rgb: [u8; 3]) -> CandidateRegion {
        CandidateRegion {
            bbox: crate::localization::BBox { top: 0, left: 0, height: 64, width: 64 },
            source: crate::localization::RegionSource::Sliding,
            crop: RasterImage::filled(64, 64, rgb),
        }
    }

    #[test]
    fn red_crop_is_class_a() {
        let m = red_model();
        let region = crop([230, 10, 10]);
        let preds = classify_regions(&m, std::slice::from_ref(&region), 0.5).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].label, "a");

        // two-class softmax from the pooled features by hand
        let (_, pooled) = m.forward_traced(&m.preprocess(&region.crop).unwrap()).unwrap();
        let plane = pooled.dims()[1] * pooled.dims()[2];
        let avg = |c: usize| pooled.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let diff = 2.0 * avg(0) - 2.0 * avg(2);
        let expected = 1.0 / (1.0 + (-diff).exp());
        assert!(expected >= 0.5);
        assert!((preds[0].score - expected).abs() < 1e-6, "{} vs {expected}", preds[0].score);
    }

    #[test]
    fn background_and_weak_regions_are_null() {
        let m = red_model();
        assert!(classify_regions(&m, &[crop([10, 10, 230])], 0.5).unwrap().is_empty());
        // zero head: uniform 0.5 over two classes, argmax picks `a`
        let flat = crate::refnet::passthrough_model(vec!["a".into(), BACKGROUND.into()]);
        assert_eq!(classify_regions(&flat, &[crop([0, 0, 0])], 0.5).unwrap().len(), 1);
        assert!(classify_regions(&flat, &[crop([0, 0, 0])], 0.6).unwrap().is_empty());
    }

    #[test]
    fn all_background_image_is_empty() {
        let m = red_model();
        let img = RasterImage::filled(128, 128, [20, 20, 220]);
        let cfg = RecognizeConfig {
            segmentation: SegmentationConfig { k: 2, ..Default::default() },
            ..Default::default()
        };
        for method in [Method::Baseline, Method::Algorithm1, Method::Algorithm2] {
            assert!(recognize_image(&m, &img, &cfg, method).unwrap().is_empty());
        }
    }

    #[test]
    fn two_fields_two_labels() {
        // class a responds to red, class b to green, background to blue
        let mut m = crate::refnet::passthrough_model(vec!["a".into(), "b".into(), BACKGROUND.into()]);
        let f = m.feature_width();
        let w = m.head_weight.data_mut();
        w[0] = 3.0;
        w[f + 1] = 3.0;
        w[2 * f + 2] = 3.0;
        let mut img = RasterImage::filled(192, 192, [10, 220, 10]);
        for y in 0..192 {
            for x in 0..96 {
                img.set(y, x, [220, 10, 10]);
            }
        }
        let cfg = RecognizeConfig {
            segmentation: SegmentationConfig { k: 2, ..Default::default() },
            decision: DecisionConfig { top_n: 2, tau: 0.4 },
            ..Default::default()
        };
        let out = recognize_image(&m, &img, &cfg, Method::Algorithm1).unwrap();
        assert_eq!(labels(&out), ["a", "b"].map(String::from).into());
        // shared windows put both fields in every pool; top 2 alone would
        // only see the stronger green scores
        let original = RecognizeConfig {
            windows_on: WindowsOn::Original,
            decision: DecisionConfig { top_n: 8, tau: 0.4 },
            ..cfg
        };
        let out = recognize_image(&m, &img, &original, Method::Algorithm2).unwrap();
        assert_eq!(labels(&out), ["a", "b"].map(String::from).into());
    }

    fn pool() -> impl Strategy<Value = Vec<Prediction>> {
        prop::collection::vec((0u8..6, 0u32..=20), 0..12)
            .prop_map(|v| v.into_iter().map(|(l, s)| p(&((b'a' + l) as char).to_string(), s as f64 / 20.0)).collect())
    }

    fn shuffled(v: &[Prediction], seed: u64) -> Vec<Prediction> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut out = v.to_vec();
        out.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        out
    }

    proptest! {
        #[test]
        fn algorithm2_is_bounded_and_monotone(loc in pool(), slide in pool(), n in 1usize..8) {
            let small = algorithm2(&loc, &slide, n);
            let big = algorithm2(&loc, &slide, n + 1);
            prop_assert!(small.len() <= n);
            prop_assert_eq!(labels(&small).len(), small.len());
            prop_assert!(labels(&small).is_subset(&labels(&big)));
        }

        #[test]
        fn order_free(loc in pool(), slide in pool(), n in 1usize..6, seed: u64) {
            let (l2, s2) = (shuffled(&loc, seed), shuffled(&slide, seed ^ 1));
            prop_assert_eq!(algorithm1(&loc, &slide), algorithm1(&l2, &s2));
            prop_assert_eq!(algorithm2(&loc, &slide, n), algorithm2(&l2, &s2, n));
        }

        #[test]
        fn algorithm1_label_is_scale_free(loc in pool(), slide in pool(), e in (-3i32..3).prop_flat_map(Just)) {
            // powers of two scale exactly, so every comparison is preserved
            let c = 2f64.powi(e);
            let scale = |v: &[Prediction]| v.iter().map(|q| p(&q.label, q.score * c)).collect::<Vec<_>>();
            let a = algorithm1(&loc, &slide).map(|q| q.label);
            let b = algorithm1(&scale(&loc), &scale(&slide)).map(|q| q.label);
            prop_assert_eq!(a, b);
        }
    }
}
