//! Procedural food-like images for training and end-to-end checks.
//!
//! Eight ingredient classes differ by shape and color and are drawn on a
//! noisy gray table. Single-ingredient images are model-sized; composites
//! hold two or three different ingredients on a larger table.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::RasterImage;
use crate::refnet::{Sample, BACKGROUND};

pub const INGREDIENTS: [&str; 8] = ["tomato", "lettuce", "carrot", "egg", "eggplant", "corn", "beef", "blueberry"];

/// Ingredient names followed by the background class.
pub fn class_names() -> Vec<String> {
    INGREDIENTS.iter().map(|s| s.to_string()).chain([BACKGROUND.to_string()]).collect()
}

const BASE: [[u8; 3]; 8] = [
    [200, 35, 30],
    [70, 160, 50],
    [235, 125, 30],
    [235, 232, 220],
    [95, 45, 110],
    [235, 210, 70],
    [140, 60, 45],
    [45, 55, 130],
];

/// One ingredient instance: class, centre, radius, rotation, tint.
#[derive(Clone, Copy, Debug)]
struct Item {
    class: usize,
    cy: f64,
    cx: f64,
    r: f64,
    angle: f64,
    tint: [i32; 3],
}

fn jitter(c: [u8; 3], d: [i32; 3]) -> [u8; 3] {
    [0, 1, 2].map(|i| (c[i] as i32 + d[i]).clamp(0, 255) as u8)
}

impl Item {
    fn random(class: usize, cy: f64, cx: f64, r: f64, rng: &mut ChaCha8Rng) -> Self {
        Item {
            class,
            cy,
            cx,
            r,
            angle: rng.random_range(0.0..PI),
            tint: [0; 3].map(|_| rng.random_range(-15..=15)),
        }
    }

    /// Color of the item at pixel centre `(y, x)`, if covered.
    fn color_at(&self, y: f64, x: f64) -> Option<[u8; 3]> {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        // rotated frame
        let u = (dx * c + dy * s) / self.r;
        let v = (-dx * s + dy * c) / self.r;
        let d = (u * u + v * v).sqrt();
        let base = jitter(BASE[self.class], self.tint);
        let hit = match self.class {
            0 => d <= 1.0,
            1 => d <= 0.85 + 0.15 * (6.0 * v.atan2(u)).sin(),
            2 => (-1.0..=1.0).contains(&u) && v.abs() <= 0.45 * (1.0 - u) / 2.0 + 0.02,
            3 => {
                if d <= 0.42 {
                    return Some(jitter([245, 190, 40], self.tint));
                }
                d <= 1.0
            }
            4 => (u / 1.0).powi(2) + (v / 0.5).powi(2) <= 1.0,
            5 => {
                let inside = u.abs() <= 0.8 && v.abs() <= 0.8;
                let kernel = ((u * 5.0).rem_euclid(1.0) - 0.5).abs() < 0.18 && ((v * 5.0).rem_euclid(1.0) - 0.5).abs() < 0.18;
                if inside && kernel {
                    return Some(jitter([200, 160, 40], self.tint));
                }
                inside
            }
            6 => {
                let inside = u.abs() <= 0.95 && v.abs() <= 0.6;
                if inside && ((u * 3.0).rem_euclid(1.0)) < 0.2 {
                    return Some(jitter([215, 170, 160], self.tint));
                }
                inside
            }
            _ => {
                const CENTRES: [(f64, f64); 5] = [(0.0, 0.0), (0.6, 0.0), (-0.6, 0.0), (0.0, 0.6), (0.0, -0.6)];
                CENTRES.iter().any(|(a, b)| (u - a).powi(2) + (v - b).powi(2) <= 0.35f64.powi(2))
            }
        };
        hit.then_some(base)
    }
}

fn table(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RasterImage {
    let g: i32 = rng.random_range(140..=175);
    let tint = [rng.random_range(-6..=6), rng.random_range(-6..=6), rng.random_range(-6..=6)];
    let pixels = (0..h * w)
        .map(|_| {
            let n = rng.random_range(-10..=10);
            [0, 1, 2].map(|i| (g + tint[i] + n).clamp(0, 255) as u8)
        })
        .collect();
    RasterImage::new(h, w, pixels).expect("sized")
}

/// Paints items over `img`. With `black_rest`, uncovered pixels turn black,
/// as they would inside a masked segment.
fn paint(img: &mut RasterImage, items: &[Item], black_rest: bool, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (h, w) = (img.height(), img.width());
    let mut covered = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let hit = items.iter().rev().find_map(|it| it.color_at(y as f64 + 0.5, x as f64 + 0.5));
            match hit {
                Some(c) => {
                    let n = rng.random_range(-8..=8);
                    img.set(y, x, jitter(c, [n; 3]));
                    covered[y * w + x] = true;
                }
                None if black_rest => img.set(y, x, [0, 0, 0]),
                None => {}
            }
        }
    }
    covered
}

/// A `size`×`size` image of one ingredient, or of bare table when `class`
/// is `None`.
pub fn render_single(class: Option<usize>, size: usize, rng: &mut ChaCha8Rng) -> RasterImage {
    let mut img = table(size, size, rng);
    let s = size as f64;
    match class {
        Some(c) => {
            let r = s * rng.random_range(0.22..0.38);
            let cy = s * rng.random_range(0.3..0.7);
            let cx = s * rng.random_range(0.3..0.7);
            let item = Item::random(c, cy, cx, r, rng);
            let black = rng.random_bool(0.3);
            paint(&mut img, &[item], black, rng);
        }
        None => match rng.random_range(0..10) {
            // bare table
            0..=5 => {}
            // table with black holes left by masked-out ingredients
            6..=8 => {
                for _ in 0..rng.random_range(1..=2) {
                    let r = s * rng.random_range(0.2..0.45);
                    let (cy, cx) = (s * rng.random_range(0.0..1.0), s * rng.random_range(0.0..1.0));
                    for y in 0..size {
                        for x in 0..size {
                            if (y as f64 + 0.5 - cy).hypot(x as f64 + 0.5 - cx) <= r {
                                img.set(y, x, [0, 0, 0]);
                            }
                        }
                    }
                }
            }
            _ => img = RasterImage::filled(size, size, [0, 0, 0]),
        },
    }
    img
}

/// `per_class` images of every class (ingredients then background),
/// interleaved class by class.
pub fn single_label_set(per_class: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = class_names();
    let mut out = Vec::with_capacity(per_class * names.len());
    for _ in 0..per_class {
        for (c, name) in names.iter().enumerate() {
            let class = (c < INGREDIENTS.len()).then_some(c);
            out.push(Sample {
                image: render_single(class, size, &mut rng),
                label: name.clone(),
            });
        }
    }
    out
}

/// A multi-ingredient image and its ground-truth labels (sorted).
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub image: RasterImage,
    pub labels: Vec<String>,
}

/// Two or three different, non-overlapping ingredients on a table.
pub fn render_composite(side: usize, rng: &mut ChaCha8Rng) -> Composite {
    let count = rng.random_range(2..=3);
    let mut classes: Vec<usize> = (0..INGREDIENTS.len()).collect();
    for i in 0..count {
        let j = rng.random_range(i..classes.len());
        classes.swap(i, j);
    }
    let s = side as f64;
    let mut items: Vec<Item> = Vec::new();
    for &class in &classes[..count] {
        // rejection sampling; the radius shrinks if placement keeps failing
        let mut r = s * rng.random_range(0.13..0.18);
        loop {
            let mut placed = false;
            for _ in 0..200 {
                let cy = rng.random_range(r + 4.0..s - r - 4.0);
                let cx = rng.random_range(r + 4.0..s - r - 4.0);
                if items.iter().all(|o| (o.cy - cy).hypot(o.cx - cx) > o.r + r + 10.0) {
                    items.push(Item::random(class, cy, cx, r, rng));
                    placed = true;
                    break;
                }
            }
            if placed {
                break;
            }
            r *= 0.85;
        }
    }
    let mut image = table(side, side, rng);
    paint(&mut image, &items, false, rng);
    let mut labels: Vec<String> = classes[..count].iter().map(|&c| INGREDIENTS[c].to_string()).collect();
    labels.sort();
    Composite { image, labels }
}

pub fn composites(n: usize, side: usize, seed: u64) -> Vec<Composite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| render_composite(side, &mut rng)).collect()
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes samples as `<root>/<class>/<nnnn>.png`.
pub fn write_single_label(root: &Path, samples: &[Sample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let dir = root.join(&s.label);
        create_dir(&dir)?;
        s.image.write(dir.join(format!("{i:04}.png")))?;
    }
    Ok(())
}

/// Writes composites as `<root>/<nnnn>.png` with `.labels` and `.k`
/// sidecars (K = ingredient count + 1 for the table).
pub fn write_multi_label(root: &Path, items: &[Composite]) -> Result<()> {
    create_dir(root)?;
    for (i, c) in items.iter().enumerate() {
        let img = root.join(format!("{i:04}.png"));
        c.image.write(&img)?;
        let side = |ext: &str| root.join(format!("{i:04}.png.{ext}"));
        let labels = c.labels.join("\n") + "\n";
        fs::write(side("labels"), labels).map_err(|e| Error::io(side("labels"), e))?;
        fs::write(side("k"), format!("{}\n", c.labels.len() + 1)).map_err(|e| Error::io(side("k"), e))?;
    }
    Ok(())
}
