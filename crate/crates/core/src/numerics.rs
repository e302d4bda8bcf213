//! Tensor and raster primitives shared by the rest of the crate.
//!
//! Tensors are row-major `f32` arrays with channel-first layout. Conv
//! kernels are stored as `[out, in, kh, kw]`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                format!("{n} values for dims {dims:?}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the data with new dims of equal element count.
    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// A single-channel 2-D float map.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{}x{} plane", height, width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} = {} pixels", height * width),
                format!("{} pixels", pixels.len()),
            ));
        }
        Ok(RasterImage {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        RasterImage {
            height,
            width,
            pixels: vec![rgb; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[u8; 3]] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    /// Copies the `h`×`w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::shape(
                format!("window inside {}x{}", self.height, self.width),
                format!("{h}x{w} at ({top},{left})"),
            ));
        }
        let mut pixels = Vec::with_capacity(h * w);
        for y in top..top + h {
            let row = y * self.width;
            pixels.extend_from_slice(&self.pixels[row + left..row + left + w]);
        }
        Ok(RasterImage {
            height: h,
            width: w,
            pixels,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()?
            .into_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.pixels().map(|p| p.0).collect();
        RasterImage::new(h as usize, w as usize, pixels)
    }

    /// Writes PNG or binary PPM (P6), chosen by the file extension.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let flat: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => {
                let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
                bytes.extend_from_slice(&flat);
                std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
            }
            Some("png") => {
                image::save_buffer_with_format(
                    path,
                    &flat,
                    self.width as u32,
                    self.height as u32,
                    image::ExtendedColorType::Rgb8,
                    image::ImageFormat::Png,
                )?;
                Ok(())
            }
            other => Err(Error::Config(format!(
                "unsupported raster extension {other:?} for {}",
                path.display()
            ))),
        }
    }
}

/// Per-pixel integer labels with a declared label count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub num_labels: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_labels: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} labels"),
                format!("{}", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_labels) {
            return Err(Error::shape(
                format!("labels < {num_labels}"),
                format!("label {bad}"),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            num_labels,
            labels,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// One bit per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} bits"), bits.len()));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        BinaryMask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Source coordinate for output index `i` under the half-pixel-center
/// convention, clamped to the valid source range.
fn source_coord(i: usize, scale: f64, in_len: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f64)
}

fn bilinear_generic<const C: usize>(
    src: &[[f64; C]],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<[f64; C]> {
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, sx, in_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, sy, in_h);
        for &(x0, x1, fx) in &cols {
            let p00 = src[y0 * in_w + x0];
            let p01 = src[y0 * in_w + x1];
            let p10 = src[y1 * in_w + x0];
            let p11 = src[y1 * in_w + x1];
            let mut v = [0.0; C];
            for c in 0..C {
                let top = p00[c] + (p01[c] - p00[c]) * fx;
                let bot = p10[c] + (p11[c] - p10[c]) * fx;
                v[c] = top + (bot - top) * fy;
            }
            out.push(v);
        }
    }
    out
}

/// Bilinear resize with half-pixel sample centers (align-corners false).
pub fn resize_bilinear(img: &RasterImage, out_h: usize, out_w: usize) -> Result<RasterImage> {
    if img.height == 0 || img.width == 0 {
        return Err(Error::Empty("resize of a zero-sized image"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!("resize target {out_h}x{out_w}")));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let src: Vec<[f64; 3]> = img
        .pixels
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let out = bilinear_generic(&src, img.height, img.width, out_h, out_w);
    let pixels = out
        .into_iter()
        .map(|v| v.map(|c| c.round().clamp(0.0, 255.0) as u8))
        .collect();
    RasterImage::new(out_h, out_w, pixels)
}

/// Bilinear resize of a float plane, same sampling convention as
/// [`resize_bilinear`].
pub fn resize_plane(p: &Plane, out_h: usize, out_w: usize) -> Result<Plane> {
    if p.height == 0 || p.width == 0 {
        return Err(Error::Empty("resize of a zero-sized plane"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!("resize target {out_h}x{out_w}")));
    }
    if out_h == p.height && out_w == p.width {
        return Ok(p.clone());
    }
    let src: Vec<[f64; 1]> = p.data.iter().map(|&v| [v as f64]).collect();
    let out = bilinear_generic(&src, p.height, p.width, out_h, out_w);
    Plane::new(out_h, out_w, out.into_iter().map(|v| v[0] as f32).collect())
}

/// Nearest-neighbour upsampling of a label map.
pub fn upsample_nearest(m: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if out_h < m.height || out_w < m.width {
        return Err(Error::Config(format!(
            "upsample target {out_h}x{out_w} smaller than {}x{}",
            m.height, m.width
        )));
    }
    let pick = |i: usize, in_len: usize, out_len: usize| {
        (((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    let cols: Vec<usize> = (0..out_w).map(|x| pick(x, m.width, out_w)).collect();
    let mut labels = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, m.height, out_h);
        labels.extend(cols.iter().map(|&sx| m.labels[sy * m.width + sx]));
    }
    LabelMap::new(out_h, out_w, m.num_labels, labels)
}

/// `(pixel/255 - mean) / std` per channel, laid out as `(3, H, W)`.
pub fn normalize_to_input(img: &RasterImage, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor> {
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!("std must be positive, got {std:?}")));
    }
    let plane = img.height * img.width;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f32 / 255.0 - mean[c]) / std[c];
        }
    }
    Tensor::new(vec![3, img.height, img.width], data)
}
