//! Two-view augmentation pipeline.
//!
//! Per view, in order: random resized crop, horizontal flip, colour jitter,
//! grayscale, and (for [`AugKind::Plus`] only) Gaussian blur. Each view draws
//! from its own counter-based stream, so a view is a pure function of
//! `(image, config, stream key)`.
//!
//! Images are `[3×H×W]` tensors with values in `[0, 1]`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::compute::Tensor;
use crate::error::{config_err, dim_err, Error, Result};
use crate::par;
use crate::rng::StreamKey;

/// Luma weights used by grayscale, saturation and contrast.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugKind {
    Base,
    Plus,
}

impl AugKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AugKind::Base => "base",
            AugKind::Plus => "plus",
        }
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(AugKind::Base),
            "plus" => Ok(AugKind::Plus),
            _ => Err(config_err!("unknown augmentation kind `{s}` (expected base or plus)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterStrengths {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterStrengths {
    pub const ZERO: JitterStrengths = JitterStrengths { brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0 };
}

impl Default for JitterStrengths {
    fn default() -> Self {
        JitterStrengths { brightness: 0.4, contrast: 0.4, saturation: 0.4, hue: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub kind: AugKind,
    pub crop_scale: (f64, f64),
    pub crop_aspect: (f64, f64),
    pub flip_p: f64,
    pub jitter: JitterStrengths,
    pub jitter_p: f64,
    pub grayscale_p: f64,
    /// Only consulted when `kind` is `Plus`.
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
}

impl AugConfig {
    pub fn new(kind: AugKind) -> Self {
        AugConfig {
            kind,
            crop_scale: (0.2, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter: JitterStrengths::default(),
            jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("{name} = {p} is not a probability"));
            }
        }
        let (s0, s1) = self.crop_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(config_err!("crop scale interval [{s0}, {s1}] must lie in (0, 1]"));
        }
        let (a0, a1) = self.crop_aspect;
        if !(a0 > 0.0 && a0 <= a1 && a1.is_finite()) {
            return Err(config_err!("crop aspect interval [{a0}, {a1}] is invalid"));
        }
        let (b0, b1) = self.blur_sigma;
        if !(b0 > 0.0 && b0 <= b1 && b1.is_finite()) {
            return Err(config_err!("blur sigma interval [{b0}, {b1}] is invalid"));
        }
        let j = &self.jitter;
        for (name, s) in [
            ("brightness", j.brightness),
            ("contrast", j.contrast),
            ("saturation", j.saturation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(config_err!("jitter {name} strength {s} must be non-negative"));
            }
        }
        if !(0.0..=0.5).contains(&j.hue) {
            return Err(config_err!("jitter hue strength {} must lie in [0, 0.5]", j.hue));
        }
        Ok(())
    }
}

/// Two augmented views of one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_q: Tensor,
    pub view_k: Tensor,
    pub source_index: usize,
}

/// One applied transform, as recorded by the instrumentation trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugStep {
    Crop,
    Flip,
    Jitter,
    Grayscale,
    Blur,
}

/// Crop window in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn area_fraction(&self, h: usize, w: usize) -> f64 {
        (self.height * self.width) as f64 / (h * w) as f64
    }
}

/// Sampled colour-jitter factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(dim_err!("expected a [3×H×W] image, got {s:?}")),
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + u * (hi - lo)
}

/// Sample a crop window: up to 10 attempts, then a centred fallback.
pub fn sample_crop(h: usize, w: usize, scale: (f64, f64), aspect: (f64, f64), rng: &mut ChaCha8Rng) -> CropBox {
    let area = (h * w) as f64;
    let (log_a0, log_a1) = (aspect.0.ln(), aspect.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let ratio = uniform(rng, log_a0, log_a1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h {
            continue;
        }
        let frac = (cw * ch) as f64 / area;
        if frac < scale.0 || frac > scale.1 {
            continue;
        }
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        return CropBox { top, left, height: ch, width: cw };
    }
    center_crop(h, w, scale)
}

fn center_crop(h: usize, w: usize, scale: (f64, f64)) -> CropBox {
    let area = (h * w) as f64;
    let (ch, cw) = if scale.1 >= 1.0 {
        (h, w)
    } else {
        let mut side = (scale.1 * area).sqrt().floor() as usize;
        side = side.clamp(1, h.min(w));
        if ((side * side) as f64) < scale.0 * area {
            side = (side + 1).min(h.min(w));
        }
        (side, side)
    };
    CropBox { top: (h - ch) / 2, left: (w - cw) / 2, height: ch, width: cw }
}

/// Bilinear resize of a crop window to `out×out`, half-pixel centres.
pub fn resize_crop(img: &Tensor, crop: &CropBox, out: usize) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    if crop.height == 0 || crop.width == 0 || crop.top + crop.height > h || crop.left + crop.width > w {
        return Err(dim_err!("crop {crop:?} does not fit a {h}×{w} image"));
    }
    if out == 0 {
        return Err(config_err!("output side must be positive"));
    }
    let axis = |len: usize| -> Vec<(usize, usize, f64)> {
        let step = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * step - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(crop.height);
    let xs = axis(crop.width);
    let src = img.data();
    let mut data = Vec::with_capacity(3 * out * out);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            let r0 = &plane[(crop.top + y0) * w + crop.left..];
            let r1 = &plane[(crop.top + y1) * w + crop.left..];
            for &(x0, x1, wx) in &xs {
                let top = r0[x0] as f64 * (1.0 - wx) + r0[x1] as f64 * wx;
                let bot = r1[x0] as f64 * (1.0 - wx) + r1[x1] as f64 * wx;
                data.push((top * (1.0 - wy) + bot * wy) as f32);
            }
        }
    }
    Tensor::new(vec![3, out, out], data)
}

pub fn random_resized_crop(
    img: &Tensor,
    scale: (f64, f64),
    aspect: (f64, f64),
    out_hw: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    let crop = sample_crop(h, w, scale, aspect, rng);
    resize_crop(img, &crop, out_hw)
}

pub fn hflip(img: &Tensor) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    debug_assert_eq!(out.len(), 3 * h * w);
    Ok(out)
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

/// Sector formula; `h` is taken modulo 1.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn sample_jitter(strengths: &JitterStrengths, rng: &mut ChaCha8Rng) -> JitterFactors {
    let mut factor = |s: f64| uniform(rng, (1.0 - s).max(0.0), 1.0 + s);
    let brightness = factor(strengths.brightness);
    let contrast = factor(strengths.contrast);
    let saturation = factor(strengths.saturation);
    let hue = uniform(rng, -strengths.hue, strengths.hue);
    JitterFactors { brightness, contrast, saturation, hue }
}

/// Brightness, contrast, saturation, hue, clipping to `[0,1]` after each.
pub fn apply_jitter(img: &Tensor, f: &JitterFactors) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    let n = h * w;
    let mut px: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let clip = |v: f64| v.clamp(0.0, 1.0);
    if f.brightness != 1.0 {
        px.iter_mut().for_each(|v| *v = clip(*v * f.brightness));
    }
    if f.contrast != 1.0 {
        let mean = (0..n)
            .map(|i| LUMA[0] * px[i] + LUMA[1] * px[n + i] + LUMA[2] * px[2 * n + i])
            .sum::<f64>()
            / n as f64;
        px.iter_mut().for_each(|v| *v = clip(mean + f.contrast * (*v - mean)));
    }
    if f.saturation != 1.0 {
        for i in 0..n {
            let gray = LUMA[0] * px[i] + LUMA[1] * px[n + i] + LUMA[2] * px[2 * n + i];
            for c in 0..3 {
                let v = &mut px[c * n + i];
                *v = clip(gray + f.saturation * (*v - gray));
            }
        }
    }
    if f.hue != 0.0 {
        for i in 0..n {
            let (hh, s, v) = rgb_to_hsv(px[i], px[n + i], px[2 * n + i]);
            let (r, g, b) = hsv_to_rgb(hh + f.hue, s, v);
            px[i] = clip(r);
            px[n + i] = clip(g);
            px[2 * n + i] = clip(b);
        }
    }
    Tensor::new(vec![3, h, w], px.into_iter().map(|v| v as f32).collect())
}

pub fn color_jitter(img: &Tensor, strengths: &JitterStrengths, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let f = sample_jitter(strengths, rng);
    apply_jitter(img, &f)
}

pub fn grayscale(img: &Tensor) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    let n = h * w;
    let d = img.data();
    let gray: Vec<f32> = (0..n)
        .map(|i| {
            let g = LUMA[0] * d[i] as f64 + LUMA[1] * d[n + i] as f64 + LUMA[2] * d[2 * n + i] as f64;
            g.clamp(0.0, 1.0) as f32
        })
        .collect();
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    Tensor::new(vec![3, h, w], data)
}

/// Normalised 1-D Gaussian taps, radius `ceil(2σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(config_err!("blur sigma must be positive, got {sigma}"));
    }
    let r = (2.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Mirror index without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    let mut tmp = vec![0f64; h * w];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f64;
                for (t, kv) in k.iter().enumerate() {
                    acc += kv * plane[y * w + reflect(x as isize + t as isize - r, w)] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f64;
                for (t, kv) in k.iter().enumerate() {
                    acc += kv * tmp[reflect(y as isize + t as isize - r, h) * w + x];
                }
                out.push(acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// One augmented view. Applied steps are appended to `trace` when given.
pub fn augment_view(img: &Tensor, cfg: &AugConfig, key: StreamKey, mut trace: Option<&mut Vec<AugStep>>) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    let mut rng = key.rng();
    let mut note = |s: AugStep| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(s);
        }
    };
    let mut v = random_resized_crop(img, cfg.crop_scale, cfg.crop_aspect, h.min(w), &mut rng)?;
    note(AugStep::Crop);
    if rng.random::<f64>() < cfg.flip_p {
        v = hflip(&v)?;
        note(AugStep::Flip);
    }
    if rng.random::<f64>() < cfg.jitter_p {
        v = color_jitter(&v, &cfg.jitter, &mut rng)?;
        note(AugStep::Jitter);
    }
    if rng.random::<f64>() < cfg.grayscale_p {
        v = grayscale(&v)?;
        note(AugStep::Grayscale);
    }
    if cfg.kind == AugKind::Plus && rng.random::<f64>() < cfg.blur_p {
        let sigma = uniform(&mut rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
        v = gaussian_blur(&v, sigma)?;
        note(AugStep::Blur);
    }
    Ok(v)
}

/// Query view from `key.derive(0)`, key view from `key.derive(1)`.
pub fn two_views(img: &Tensor, cfg: &AugConfig, key: StreamKey, source_index: usize) -> Result<ViewPair> {
    Ok(ViewPair {
        view_q: augment_view(img, cfg, key.derive(0), None)?,
        view_k: augment_view(img, cfg, key.derive(1), None)?,
        source_index,
    })
}

/// [`two_views`] plus the per-view step traces.
pub fn two_views_traced(
    img: &Tensor,
    cfg: &AugConfig,
    key: StreamKey,
    source_index: usize,
) -> Result<(ViewPair, [Vec<AugStep>; 2])> {
    let mut tq = Vec::new();
    let mut tk = Vec::new();
    let view_q = augment_view(img, cfg, key.derive(0), Some(&mut tq))?;
    let view_k = augment_view(img, cfg, key.derive(1), Some(&mut tk))?;
    Ok((ViewPair { view_q, view_k, source_index }, [tq, tk]))
}

/// Batched views for dataset rows `indices` of `images` `[N×3×S×S]`.
/// Sample `i` uses stream `epoch_key.derive(i)`, so the result does not
/// depend on batch composition or on the execution mode.
pub fn view_batch(images: &Tensor, indices: &[usize], cfg: &AugConfig, epoch_key: StreamKey) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(dim_err!("expected 3-channel images, got {:?}", images.shape()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(dim_err!("sample index {bad} out of range for {n} images"));
    }
    let plane = 3 * h * w;
    let pairs = par::map_indices(indices.len(), |j| {
        let i = indices[j];
        let img = Tensor::new(vec![3, h, w], images.data()[i * plane..(i + 1) * plane].to_vec())?;
        two_views(&img, cfg, epoch_key.derive(i as u64), i)
    });
    let b = indices.len();
    let side = h.min(w);
    let mut q = Vec::with_capacity(b * 3 * side * side);
    let mut k = Vec::with_capacity(b * 3 * side * side);
    for p in pairs {
        let p = p?;
        q.extend_from_slice(p.view_q.data());
        k.extend_from_slice(p.view_k.data());
    }
    Ok((
        Tensor::new(vec![b, 3, side, side], q)?,
        Tensor::new(vec![b, 3, side, side], k)?,
    ))
}

/// Tile equally sized `[3×H×W]` images into a grid with `gap` white pixels.
pub fn tile_grid(rows: &[Vec<Tensor>], gap: usize) -> Result<Tensor> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| config_err!("empty image grid"))?;
    let (h, w) = image_dims(first)?;
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gh = rows.len() * h + (rows.len() - 1) * gap;
    let gw = ncols * w + (ncols - 1) * gap;
    let mut out = Tensor::full(&[3, gh, gw], 1.0f32);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            if image_dims(img)? != (h, w) {
                return Err(dim_err!("grid tiles must share one size, got {:?}", img.shape()));
            }
            let (oy, ox) = (ri * (h + gap), ci * (w + gap));
            for c in 0..3 {
                for y in 0..h {
                    let src = &img.data()[(c * h + y) * w..(c * h + y + 1) * w];
                    let at = (c * gh + oy + y) * gw + ox;
                    out.data_mut()[at..at + w].copy_from_slice(src);
                }
            }
        }
    }
    Ok(out)
}

/// Binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let n = h * w;
    let d = img.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..n {
        for c in 0..3 {
            bytes.push((d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}
