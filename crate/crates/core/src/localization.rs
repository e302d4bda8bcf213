//! Candidate regions inside a segment.
//!
//! Two sources: morphology on the segment mask (erode, dilate, connected
//! components, bounding boxes) and a fixed 3×3 grid of windows.

use crate::error::{Error, Result};
use crate::numerics::{resize_bilinear, LabelMap, RasterImage};
use crate::segmentation::Segment;

pub use crate::numerics::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionSource {
    Locating,
    Sliding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRegion {
    pub bbox: BBox,
    pub source: RegionSource,
    /// Crop resized to the model input size.
    pub crop: RasterImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocateConfig {
    /// Side of the square structuring element.
    pub se_side: usize,
    /// Boxes smaller than this fraction of the image area are dropped.
    pub min_area_fraction: f64,
}

impl Default for LocateConfig {
    fn default() -> Self {
        LocateConfig {
            se_side: 5,
            min_area_fraction: 0.01,
        }
    }
}

fn check_se(side: usize) -> Result<usize> {
    if side == 0 || side % 2 == 0 {
        return Err(Error::Config(format!("structuring element side must be odd and >= 1, got {side}")));
    }
    Ok(side / 2)
}

/// Separable 1-D pass. `all` selects erosion (every covered pixel set,
/// out-of-bounds counting as unset) over dilation (any covered pixel set).
fn pass(src: &[bool], h: usize, w: usize, r: usize, horizontal: bool, all: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    let (outer, inner) = if horizontal { (h, w) } else { (w, h) };
    let at = |o: usize, i: usize| if horizontal { o * w + i } else { i * w + o };
    for o in 0..outer {
        // prefix count of set pixels along the line
        let mut pre = vec![0usize; inner + 1];
        for i in 0..inner {
            pre[i + 1] = pre[i] + src[at(o, i)] as usize;
        }
        for i in 0..inner {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(inner);
            let set = pre[hi] - pre[lo];
            out[at(o, i)] = if all { set == 2 * r + 1 } else { set > 0 };
        }
    }
    out
}

fn morph(m: &BinaryMask, side: usize, all: bool) -> Result<BinaryMask> {
    let r = check_se(side)?;
    let (h, w) = (m.height(), m.width());
    let rows = pass(m.bits(), h, w, r, true, all);
    BinaryMask::new(h, w, pass(&rows, h, w, r, false, all))
}

/// Erosion by a `side`×`side` square; pixels outside the mask count as 0.
pub fn erode(m: &BinaryMask, side: usize) -> Result<BinaryMask> {
    morph(m, side, true)
}

/// Dilation by a `side`×`side` square.
pub fn dilate(m: &BinaryMask, side: usize) -> Result<BinaryMask> {
    morph(m, side, false)
}

/// Erosion followed by dilation.
pub fn open(m: &BinaryMask, side: usize) -> Result<BinaryMask> {
    dilate(&erode(m, side)?, side)
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// 8-connected components. Background is 0; components are numbered from
/// 1 in row-major order of their first pixel. Returns the map and count.
pub fn connected_components(m: &BinaryMask) -> (LabelMap, usize) {
    let (h, w) = (m.height(), m.width());
    let mut provisional = vec![0u32; h * w];
    let mut parent = vec![0u32];
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            let mut neighbors = [0u32; 4];
            let mut k = 0;
            let mut push = |yy: usize, xx: usize| {
                let l = provisional[yy * w + xx];
                if l != 0 {
                    neighbors[k] = l;
                    k += 1;
                }
            };
            if x > 0 {
                push(y, x - 1);
            }
            if y > 0 {
                if x > 0 {
                    push(y - 1, x - 1);
                }
                push(y - 1, x);
                if x + 1 < w {
                    push(y - 1, x + 1);
                }
            }
            let label = if k == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let root = neighbors[..k].iter().map(|&l| find(&mut parent, l)).min().unwrap();
                for &l in &neighbors[..k] {
                    let r = find(&mut parent, l);
                    parent[r as usize] = root;
                }
                root
            };
            provisional[y * w + x] = label;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let labels = provisional
        .iter()
        .map(|&l| {
            if l == 0 {
                return 0;
            }
            let r = find(&mut parent, l) as usize;
            if remap[r] == 0 {
                count += 1;
                remap[r] = count;
            }
            remap[r]
        })
        .collect();
    let map = LabelMap::new(h, w, count as usize + 1, labels).expect("labels bounded by count");
    (map, count as usize)
}

/// Tight bounding box of each component, indexed by label - 1.
pub fn component_boxes(labels: &LabelMap, count: usize) -> Vec<BBox> {
    let mut ext = vec![(usize::MAX, usize::MAX, 0usize, 0usize); count];
    for y in 0..labels.height {
        for x in 0..labels.width {
            let l = labels.at(y, x) as usize;
            if l == 0 {
                continue;
            }
            let e = &mut ext[l - 1];
            e.0 = e.0.min(y);
            e.1 = e.1.min(x);
            e.2 = e.2.max(y);
            e.3 = e.3.max(x);
        }
    }
    ext.into_iter()
        .map(|(t, l, b, r)| BBox {
            top: t,
            left: l,
            height: b - t + 1,
            width: r - l + 1,
        })
        .collect()
}

fn crop_region(img: &RasterImage, bbox: BBox, source: RegionSource, input_size: usize) -> Result<CandidateRegion> {
    let crop = img.crop(bbox.top, bbox.left, bbox.height, bbox.width)?;
    Ok(CandidateRegion {
        bbox,
        source,
        crop: resize_bilinear(&crop, input_size, input_size)?,
    })
}

/// Boxes found by opening the segment mask and labelling what survives.
pub fn locate_boxes(mask: &BinaryMask, cfg: &LocateConfig) -> Result<Vec<BBox>> {
    let opened = open(mask, cfg.se_side)?;
    let (labels, count) = connected_components(&opened);
    let min_area = cfg.min_area_fraction * (mask.height() * mask.width()) as f64;
    Ok(component_boxes(&labels, count)
        .into_iter()
        .filter(|b| b.area() as f64 >= min_area)
        .collect())
}

/// Candidate regions from the segment's mask, cropped from its masked
/// image and resized to `input_size`.
pub fn locate_regions(seg: &Segment, cfg: &LocateConfig, input_size: usize) -> Result<Vec<CandidateRegion>> {
    locate_boxes(&seg.mask, cfg)?
        .into_iter()
        .map(|b| crop_region(&seg.image, b, RegionSource::Locating, input_size))
        .collect()
}

/// Nine windows of a third of each side, stepped by a third.
pub fn sliding_windows(height: usize, width: usize) -> Result<Vec<BBox>> {
    if height < 3 || width < 3 {
        return Err(Error::shape("image at least 3x3", format!("{height}x{width}")));
    }
    let (wh, ww) = (height / 3, width / 3);
    let mut boxes = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            boxes.push(BBox {
                top: i * wh,
                left: j * ww,
                height: wh,
                width: ww,
            });
        }
    }
    Ok(boxes)
}

/// Sliding-window crops of `img` resized to `input_size`.
pub fn sliding_regions(img: &RasterImage, input_size: usize) -> Result<Vec<CandidateRegion>> {
    sliding_windows(img.height(), img.width())?
        .into_iter()
        .map(|b| crop_region(img, b, RegionSource::Sliding, input_size))
        .collect()
}

/// Copy of `img` with each box outlined by a 2-px red border.
pub fn draw_boxes(img: &RasterImage, boxes: &[BBox]) -> RasterImage {
    const RED: [u8; 3] = [255, 0, 0];
    const T: usize = 2;
    let mut out = img.clone();
    for b in boxes {
        let bottom = (b.top + b.height).min(img.height());
        let right = (b.left + b.width).min(img.width());
        for y in b.top..bottom {
            for x in b.left..right {
                let edge = y < b.top + T || y + T >= b.top + b.height || x < b.left + T || x + T >= b.left + b.width;
                if edge {
                    out.set(y, x, RED);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, Strategy};

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
    }

    fn random_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap())
        })
    }

    /// Morphology straight from the definition.
    fn naive(m: &BinaryMask, side: usize, all: bool) -> BinaryMask {
        let r = (side / 2) as isize;
        BinaryMask::from_fn(m.height(), m.width(), |y, x| {
            let mut vals = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    let inside = yy >= 0 && xx >= 0 && (yy as usize) < m.height() && (xx as usize) < m.width();
                    vals.push(inside && m.get(yy as usize, xx as usize));
                }
            }
            if all {
                vals.iter().all(|&v| v)
            } else {
                vals.iter().any(|&v| v)
            }
        })
    }

    /// Recursive flood fill labelling in row-major seed order.
    fn flood_fill(m: &BinaryMask) -> (Vec<u32>, usize) {
        fn fill(m: &BinaryMask, out: &mut [u32], y: isize, x: isize, l: u32) {
            if y < 0 || x < 0 || y as usize >= m.height() || x as usize >= m.width() {
                return;
            }
            let i = y as usize * m.width() + x as usize;
            if !m.bits()[i] || out[i] != 0 {
                return;
            }
            out[i] = l;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    fill(m, out, y + dy, x + dx, l);
                }
            }
        }
        let mut out = vec![0; m.height() * m.width()];
        let mut n = 0;
        for i in 0..out.len() {
            if m.bits()[i] && out[i] == 0 {
                n += 1;
                fill(m, &mut out, (i / m.width()) as isize, (i % m.width()) as isize, n);
            }
        }
        (out, n as usize)
    }

    #[test]
    fn unit_element_is_identity() {
        let m = mask(&["#..#", ".##.", "#..."]);
        assert_eq!(erode(&m, 1).unwrap(), m);
        assert_eq!(dilate(&m, 1).unwrap(), m);
    }

    #[test]
    fn erosion_strips_border() {
        let e = erode(&BinaryMask::from_fn(10, 10, |_, _| true), 3).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let interior = (1..9).contains(&y) && (1..9).contains(&x);
                assert_eq!(e.get(y, x), interior);
            }
        }
    }

    #[test]
    fn isolated_pixel() {
        let m = mask(&[".....", ".....", "..#..", ".....", "....."]);
        assert_eq!(erode(&m, 3).unwrap().count(), 0);
        let d = dilate(&m, 3).unwrap();
        assert_eq!(d, mask(&[".....", ".###.", ".###.", ".###.", "....."]));
    }

    #[test]
    fn even_element_rejected() {
        assert!(erode(&BinaryMask::zeros(3, 3), 4).is_err());
        assert!(dilate(&BinaryMask::zeros(3, 3), 0).is_err());
    }

    #[test]
    fn component_basics() {
        assert_eq!(connected_components(&BinaryMask::zeros(4, 4)).1, 0);
        let (labels, n) = connected_components(&mask(&["#.", ".#"]));
        assert_eq!(n, 1);
        assert_eq!(labels.labels, vec![1, 0, 0, 1]);
        let (labels, n) = connected_components(&mask(&["..#", "#..", "#.#"]));
        assert_eq!(n, 3);
        assert_eq!(labels.labels, vec![0, 0, 1, 2, 0, 0, 2, 0, 3]);
    }

    #[test]
    fn u_shape_merges_late() {
        let (labels, n) = connected_components(&mask(&["#...#", "#...#", "#####"]));
        assert_eq!(n, 1);
        assert!(labels.labels.iter().all(|&l| l <= 1));
    }

    #[test]
    fn exhaustive_small_masks_match_flood_fill() {
        for bits in 0u32..1 << 9 {
            let m = BinaryMask::from_fn(3, 3, |y, x| bits >> (y * 3 + x) & 1 == 1);
            let (labels, n) = connected_components(&m);
            assert_eq!((labels.labels, n), flood_fill(&m));
        }
    }

    fn blob(m: &mut BinaryMask, top: usize, left: usize, h: usize, w: usize) {
        for y in top..top + h {
            for x in left..left + w {
                m.set(y, x, true);
            }
        }
    }

    fn segment_of(mask: BinaryMask) -> Segment {
        let image = RasterImage::filled(mask.height(), mask.width(), [50, 60, 70]);
        Segment { cluster: 0, mask, image }
    }

    #[test]
    fn empty_mask_gives_no_regions() {
        let seg = segment_of(BinaryMask::zeros(40, 40));
        assert!(locate_regions(&seg, &LocateConfig::default(), 16).unwrap().is_empty());
    }

    #[test]
    fn solid_square_is_found() {
        let mut m = BinaryMask::zeros(100, 100);
        blob(&mut m, 20, 30, 50, 50);
        let regions = locate_regions(&segment_of(m), &LocateConfig::default(), 16).unwrap();
        assert_eq!(regions.len(), 1);
        let b = regions[0].bbox;
        let near = |a: usize, e: usize| a.abs_diff(e) <= 5;
        assert!(near(b.top, 20) && near(b.left, 30) && near(b.height, 50) && near(b.width, 50), "{b:?}");
        assert_eq!(regions[0].source, RegionSource::Locating);
        assert_eq!((regions[0].crop.height(), regions[0].crop.width()), (16, 16));
    }

    #[test]
    fn speck_is_eroded_away() {
        let mut m = BinaryMask::zeros(100, 100);
        blob(&mut m, 5, 5, 30, 30);
        blob(&mut m, 60, 50, 25, 35);
        blob(&mut m, 90, 10, 1, 2);
        let boxes = locate_boxes(&m, &LocateConfig::default()).unwrap();
        assert_eq!(boxes.len(), 2);
    }

    #[test]
    fn small_boxes_are_filtered() {
        let mut m = BinaryMask::zeros(100, 100);
        blob(&mut m, 10, 10, 9, 9);
        let cfg = LocateConfig::default();
        assert!(locate_boxes(&m, &cfg).unwrap().is_empty());
        blob(&mut m, 10, 10, 10, 10);
        assert_eq!(locate_boxes(&m, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn windows_examples() {
        let b = sliding_windows(300, 300).unwrap();
        assert_eq!(b.len(), 9);
        let offsets: Vec<_> = b.iter().map(|b| (b.top, b.left)).collect();
        assert_eq!(offsets[4], (100, 100));
        assert!(b.iter().all(|b| b.height == 100 && b.width == 100));
        let b = sliding_windows(301, 301).unwrap();
        assert_eq!(b[8], BBox { top: 200, left: 200, height: 100, width: 100 });
        let b = sliding_windows(3, 3).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(b.iter().filter(|b| b.contains(y, x)).count(), 1);
            }
        }
        assert!(sliding_windows(2, 9).is_err());
    }

    #[test]
    fn boxes_are_drawn() {
        let img = RasterImage::filled(10, 10, [0, 0, 0]);
        let out = draw_boxes(&img, &[BBox { top: 1, left: 1, height: 6, width: 6 }]);
        assert_eq!(out.get(1, 1), [255, 0, 0]);
        assert_eq!(out.get(2, 6), [255, 0, 0]);
        assert_eq!(out.get(3, 3), [0, 0, 0]);
        assert_eq!(out.get(0, 0), [0, 0, 0]);
        assert_eq!(out.get(7, 7), [0, 0, 0]);
    }

    proptest! {
        #[test]
        fn separable_matches_definition(m in random_mask(), r in 0usize..3) {
            let side = 2 * r + 1;
            prop_assert_eq!(erode(&m, side).unwrap(), naive(&m, side, true));
            prop_assert_eq!(dilate(&m, side).unwrap(), naive(&m, side, false));
        }

        #[test]
        fn duality_away_from_border(m in random_mask(), r in 0usize..3) {
            // erosion treats outside pixels as 0, so the complement identity
            // only holds where the element stays inside the image
            let side = 2 * r + 1;
            let d = dilate(&m, side).unwrap();
            let dual = erode(&m.complement(), side).unwrap().complement();
            for y in r..m.height().saturating_sub(r) {
                for x in r..m.width().saturating_sub(r) {
                    prop_assert_eq!(d.get(y, x), dual.get(y, x));
                }
            }
        }

        #[test]
        fn monotone(m in random_mask(), extra in prop::collection::vec(any::<bool>(), 144), r in 0usize..3) {
            let side = 2 * r + 1;
            let bigger = BinaryMask::from_fn(m.height(), m.width(), |y, x| m.get(y, x) || extra[y * 12 + x]);
            prop_assert!(erode(&m, side).unwrap().is_subset(&erode(&bigger, side).unwrap()));
            prop_assert!(dilate(&m, side).unwrap().is_subset(&dilate(&bigger, side).unwrap()));
        }

        #[test]
        fn opening_is_idempotent(m in random_mask(), r in 0usize..3) {
            let side = 2 * r + 1;
            let once = open(&m, side).unwrap();
            prop_assert_eq!(open(&once, side).unwrap(), once);
        }

        #[test]
        fn components_match_flood_fill(m in random_mask()) {
            let (labels, n) = connected_components(&m);
            prop_assert_eq!((labels.labels, n), flood_fill(&m));
        }

        #[test]
        fn divisible_windows_tile(h in 1usize..12, w in 1usize..12) {
            let (h, w) = (3 * h, 3 * w);
            let boxes = sliding_windows(h, w).unwrap();
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(boxes.iter().filter(|b| b.contains(y, x)).count(), 1);
                }
            }
        }
    }
}
