//! Pixel-space primitives: degradations, photometric controls, overlays,
//! and mean fusion. Images are float RGB in [0,1]; every op clamps back
//! into range and leaves pixels outside its region bit-identical.

use std::path::Path;

use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("unknown subtag `{0}`")]
    UnknownSubtag(String),
    #[error("png i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Float RGB image, row-major, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "empty image");
        ImageBuf {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = ImageBuf::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.put(y, x, f(y, x));
            }
        }
        img
    }

    pub fn splat(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        ImageBuf::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn px(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0].clamp(0.0, 1.0);
        self.data[i + 1] = rgb[1].clamp(0.0, 1.0);
        self.data[i + 2] = rgb[2].clamp(0.0, 1.0);
    }

    pub fn same_dims(&self, other: &ImageBuf) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// 8-bit PNG bytes (round(v·255), clamped).
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut raw = Vec::with_capacity(self.data.len());
        for v in &self.data {
            raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        let mut out = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            enc,
            &raw,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| ImagingError::Io(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| ImagingError::Io(format!("{path:?}: {e}")))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| ImagingError::Io(e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        Ok(ImageBuf {
            height: h,
            width: w,
            data,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| ImagingError::Io(format!("{path:?}: {e}")))?;
        ImageBuf::from_png_bytes(&bytes)
    }
}

/// Per-pixel boolean mask, paired with an image of the same dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBuf {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl MaskBuf {
    pub fn new(height: usize, width: usize) -> Self {
        MaskBuf {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        MaskBuf {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = MaskBuf::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.set(y, x, f(y, x));
            }
        }
        m
    }

    /// Axis-aligned rectangle [y0, y0+h) × [x0, x0+w).
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        MaskBuf::from_fn(height, width, |y, x| {
            y >= y0 && y < y0 + h && x >= x0 && x < x0 + w
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Black/white PNG (white = inside).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = ImageBuf::from_fn(self.height, self.width, |y, x| {
            if self.get(y, x) {
                [1.0; 3]
            } else {
                [0.0; 3]
            }
        });
        img.save_png(path)
    }

    /// Reads a mask back from a black/white PNG (>0.5 = inside).
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ImageBuf::load_png(path)?;
        Ok(MaskBuf::from_fn(img.height(), img.width(), |y, x| {
            img.px(y, x)[0] > 0.5
        }))
    }
}

/// One degradation applied inside a region.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum DegradeKind {
    /// Gaussian blur with kernel radius ceil(3σ) and reflected borders.
    Blur { sigma: f64 },
    /// Additive N(0, σ²) noise per channel.
    GaussNoise { sigma: f64 },
    /// Replace with i.i.d. U[0,1] per channel.
    NoiseMask,
}

/// Applies `kind` to the pixels selected by `region`. Pixels outside the
/// region are bit-identical to the input.
pub fn degrade(
    img: &ImageBuf,
    region: &MaskBuf,
    kind: DegradeKind,
    rng: &mut Rng,
) -> Result<ImageBuf> {
    if img.height() != region.height() || img.width() != region.width() {
        return Err(ImagingError::ShapeMismatch(format!(
            "image {}x{} vs region {}x{}",
            img.height(),
            img.width(),
            region.height(),
            region.width()
        )));
    }
    match kind {
        DegradeKind::Blur { sigma } => {
            if !(sigma > 0.0) {
                return Err(ImagingError::BadParam(format!("blur sigma {sigma} <= 0")));
            }
            Ok(blur_region(img, region, sigma))
        }
        DegradeKind::GaussNoise { sigma } => {
            if sigma < 0.0 {
                return Err(ImagingError::BadParam(format!("noise sigma {sigma} < 0")));
            }
            let mut out = img.clone();
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if region.get(y, x) {
                        let p = img.px(y, x);
                        let mut q = [0.0f32; 3];
                        for c in 0..3 {
                            q[c] = p[c] + (rng.normal() * sigma) as f32;
                        }
                        out.put(y, x, q);
                    }
                }
            }
            Ok(out)
        }
        DegradeKind::NoiseMask => {
            let mut out = img.clone();
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if region.get(y, x) {
                        out.put(
                            y,
                            x,
                            [
                                rng.uniform() as f32,
                                rng.uniform() as f32,
                                rng.uniform() as f32,
                            ],
                        );
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Gaussian blur of the full image restricted to `region`. Only the rows
/// needed for the region's bounding box are actually convolved.
fn blur_region(img: &ImageBuf, region: &MaskBuf, sigma: f64) -> ImageBuf {
    let (h, w) = (img.height(), img.width());
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel = gaussian_kernel(sigma, radius);

    // bounding box of the region
    let mut y0 = h;
    let mut y1 = 0usize;
    let mut x0 = w;
    let mut x1 = 0usize;
    for y in 0..h {
        for x in 0..w {
            if region.get(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y0 >= y1 {
        return img.clone(); // empty region
    }

    // horizontal pass over the rows the vertical pass will need
    let ry0 = y0.saturating_sub(radius as usize);
    let ry1 = (y1 + radius as usize).min(h);
    let mut tmp = vec![0.0f32; (ry1 - ry0) * w * 3];
    for y in ry0..ry1 {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = reflect(x as i64 + ki as i64 - radius, w);
                let p = img.px(y, sx);
                for c in 0..3 {
                    acc[c] += p[c] * kv;
                }
            }
            let i = ((y - ry0) * w + x) * 3;
            tmp[i..i + 3].copy_from_slice(&acc);
        }
    }

    // vertical pass, writing only region pixels
    let mut out = img.clone();
    for y in y0..y1 {
        for x in x0..x1 {
            if !region.get(y, x) {
                continue;
            }
            let mut acc = [0.0f32; 3];
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y as i64 + ki as i64 - radius, h);
                let sy = sy.clamp(ry0, ry1 - 1);
                let i = ((sy - ry0) * w + x) * 3;
                for c in 0..3 {
                    acc[c] += tmp[i + c] * kv;
                }
            }
            out.put(y, x, acc);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64, radius: i64) -> Vec<f32> {
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Symmetric border reflection: -1 -> 0, n -> n-1.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Photometric control levels, one per `<LIGHT±±>` / `<CONTRAST±>` subtag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ControlTag {
    LightPlusPlus,
    LightPlus,
    LightMinus,
    LightMinusMinus,
    ContrastPlus,
    ContrastMinus,
}

impl ControlTag {
    pub const ALL: [ControlTag; 6] = [
        ControlTag::LightPlusPlus,
        ControlTag::LightPlus,
        ControlTag::LightMinus,
        ControlTag::LightMinusMinus,
        ControlTag::ContrastPlus,
        ControlTag::ContrastMinus,
    ];

    pub fn from_subtag(s: &str) -> Result<Self> {
        match s {
            "LIGHT++" => Ok(ControlTag::LightPlusPlus),
            "LIGHT+" => Ok(ControlTag::LightPlus),
            "LIGHT-" => Ok(ControlTag::LightMinus),
            "LIGHT--" => Ok(ControlTag::LightMinusMinus),
            "CONTRAST+" => Ok(ControlTag::ContrastPlus),
            "CONTRAST-" => Ok(ControlTag::ContrastMinus),
            other => Err(ImagingError::UnknownSubtag(other.to_string())),
        }
    }

    pub fn subtag(&self) -> &'static str {
        match self {
            ControlTag::LightPlusPlus => "LIGHT++",
            ControlTag::LightPlus => "LIGHT+",
            ControlTag::LightMinus => "LIGHT-",
            ControlTag::LightMinusMinus => "LIGHT--",
            ControlTag::ContrastPlus => "CONTRAST+",
            ControlTag::ContrastMinus => "CONTRAST-",
        }
    }
}

/// Brightness is a gain of {1.4, 1.2, 0.8, 0.6}; contrast remaps around 0.5
/// by {1.3, 0.7}. Everything clamps back to [0,1].
pub fn adjust_photometric(img: &ImageBuf, tag: ControlTag) -> ImageBuf {
    let f = |v: f32| -> f32 {
        match tag {
            ControlTag::LightPlusPlus => v * 1.4,
            ControlTag::LightPlus => v * 1.2,
            ControlTag::LightMinus => v * 0.8,
            ControlTag::LightMinusMinus => v * 0.6,
            ControlTag::ContrastPlus => (v - 0.5) * 1.3 + 0.5,
            ControlTag::ContrastMinus => (v - 0.5) * 0.7 + 0.5,
        }
    };
    ImageBuf::from_fn(img.height(), img.width(), |y, x| {
        let p = img.px(y, x);
        [f(p[0]), f(p[1]), f(p[2])]
    })
}

pub const OVERLAY_ALPHA: f32 = 0.5;
pub const OVERLAY_BLUE: [f32; 3] = [0.0, 0.0, 1.0];

/// Alpha-blends `color` over the masked pixels.
pub fn overlay_mask(img: &ImageBuf, mask: &MaskBuf, alpha: f32, color: [f32; 3]) -> Result<ImageBuf> {
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(ImagingError::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            mask.height(),
            mask.width()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ImagingError::BadParam(format!("alpha {alpha} not in (0,1)")));
    }
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(y, x) {
                let p = img.px(y, x);
                out.put(
                    y,
                    x,
                    [
                        (1.0 - alpha) * p[0] + alpha * color[0],
                        (1.0 - alpha) * p[1] + alpha * color[1],
                        (1.0 - alpha) * p[2] + alpha * color[2],
                    ],
                );
            }
        }
    }
    Ok(out)
}

/// Inverse of [`overlay_mask`]: a pixel is inside the recovered mask iff any
/// channel moved by more than `tol`.
pub fn recover_mask(overlaid: &ImageBuf, original: &ImageBuf, tol: f32) -> Result<MaskBuf> {
    if !overlaid.same_dims(original) {
        return Err(ImagingError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            overlaid.height(),
            overlaid.width(),
            original.height(),
            original.width()
        )));
    }
    Ok(MaskBuf::from_fn(
        original.height(),
        original.width(),
        |y, x| {
            let a = overlaid.px(y, x);
            let b = original.px(y, x);
            (0..3).any(|c| (a[c] - b[c]).abs() > tol)
        },
    ))
}

pub const RECOVER_TOL: f32 = 1e-3;

/// Multiplies all channels by `gain`, clamping to [0,1]. Used to build
/// synthetic exposure ramps.
pub fn exposure(img: &ImageBuf, gain: f32) -> ImageBuf {
    ImageBuf::from_fn(img.height(), img.width(), |y, x| {
        let p = img.px(y, x);
        [p[0] * gain, p[1] * gain, p[2] * gain]
    })
}

/// Luminance (0.299R + 0.587G + 0.114B) replicated across channels; the
/// stand-in for an infrared view when synthesizing modality pairs.
pub fn to_luma(img: &ImageBuf) -> ImageBuf {
    ImageBuf::from_fn(img.height(), img.width(), |y, x| {
        let p = img.px(y, x);
        let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        [l, l, l]
    })
}

/// Per-pixel average of two images.
pub fn mean_fuse(a: &ImageBuf, b: &ImageBuf) -> Result<ImageBuf> {
    if !a.same_dims(b) {
        return Err(ImagingError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(ImageBuf::from_fn(a.height(), a.width(), |y, x| {
        let p = a.px(y, x);
        let q = b.px(y, x);
        [
            (p[0] + q[0]) * 0.5,
            (p[1] + q[1]) * 0.5,
            (p[2] + q[2]) * 0.5,
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_img(h: usize, w: usize) -> ImageBuf {
        ImageBuf::from_fn(h, w, |y, x| {
            [
                x as f32 / w as f32,
                y as f32 / h as f32,
                ((x + y) % 7) as f32 / 7.0,
            ]
        })
    }

    #[test]
    fn gauss_noise_sigma_zero_is_identity() {
        let img = gradient_img(8, 8);
        let mut rng = Rng::seed_from(1);
        let out = degrade(
            &img,
            &MaskBuf::full(8, 8),
            DegradeKind::GaussNoise { sigma: 0.0 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn blur_of_constant_is_unchanged() {
        let img = ImageBuf::splat(16, 16, [0.3, 0.6, 0.9]);
        let mut rng = Rng::seed_from(1);
        let out = degrade(
            &img,
            &MaskBuf::full(16, 16),
            DegradeKind::Blur { sigma: 2.0 },
            &mut rng,
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let img = gradient_img(4, 4);
        let mut rng = Rng::seed_from(1);
        assert!(matches!(
            degrade(
                &img,
                &MaskBuf::full(4, 4),
                DegradeKind::Blur { sigma: 0.0 },
                &mut rng
            ),
            Err(ImagingError::BadParam(_))
        ));
    }

    #[test]
    fn noise_mask_mean_is_near_half() {
        let img = ImageBuf::splat(16, 16, [0.0; 3]);
        let mut rng = Rng::seed_from(99);
        let out = degrade(&img, &MaskBuf::full(16, 16), DegradeKind::NoiseMask, &mut rng).unwrap();
        let mean: f32 = out.data().iter().sum::<f32>() / out.data().len() as f32;
        // Hoeffding bound over 768 uniforms: far outside [0.40, 0.60] is ~impossible
        assert!((0.40..=0.60).contains(&mean), "mean {mean}");
    }

    #[test]
    fn degrade_leaves_outside_pixels_bit_identical() {
        let img = gradient_img(16, 16);
        let region = MaskBuf::rect(16, 16, 4, 4, 8, 8);
        for kind in [
            DegradeKind::Blur { sigma: 1.5 },
            DegradeKind::GaussNoise { sigma: 0.2 },
            DegradeKind::NoiseMask,
        ] {
            let mut rng = Rng::seed_from(7);
            let out = degrade(&img, &region, kind, &mut rng).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    if !region.get(y, x) {
                        assert_eq!(out.px(y, x), img.px(y, x), "{kind:?} at ({y},{x})");
                    }
                }
            }
        }
    }

    #[test]
    fn photometric_levels() {
        let mid = ImageBuf::splat(2, 2, [0.5; 3]);
        let out = adjust_photometric(&mid, ControlTag::LightPlus);
        assert!((out.px(0, 0)[0] - 0.6).abs() < 1e-6);
        let out = adjust_photometric(&mid, ControlTag::ContrastPlus);
        assert!((out.px(0, 0)[0] - 0.5).abs() < 1e-6);
        let bright = ImageBuf::splat(2, 2, [0.9; 3]);
        let out = adjust_photometric(&bright, ControlTag::LightPlusPlus);
        assert_eq!(out.px(0, 0), [1.0; 3]); // 1.26 clamps
    }

    #[test]
    fn photometric_light_is_monotone() {
        let mut rng = Rng::seed_from(3);
        for tag in [
            ControlTag::LightPlusPlus,
            ControlTag::LightPlus,
            ControlTag::LightMinus,
            ControlTag::LightMinusMinus,
        ] {
            for _ in 0..200 {
                let a = rng.uniform() as f32;
                let b = rng.uniform() as f32;
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let img = ImageBuf::from_fn(1, 2, |_, x| [[lo; 3], [hi; 3]][x]);
                let out = adjust_photometric(&img, tag);
                assert!(out.px(0, 0)[0] <= out.px(0, 1)[0]);
            }
        }
    }

    #[test]
    fn unknown_subtag_is_rejected() {
        assert!(matches!(
            ControlTag::from_subtag("LIGHT+++"),
            Err(ImagingError::UnknownSubtag(_))
        ));
    }

    #[test]
    fn overlay_blend_arithmetic() {
        let red = ImageBuf::splat(2, 2, [1.0, 0.0, 0.0]);
        let out = overlay_mask(&red, &MaskBuf::full(2, 2), 0.5, OVERLAY_BLUE).unwrap();
        assert_eq!(out.px(0, 0), [0.5, 0.0, 0.5]);
        let empty = overlay_mask(&red, &MaskBuf::new(2, 2), 0.5, OVERLAY_BLUE).unwrap();
        assert_eq!(empty.data(), red.data());
        let black = ImageBuf::splat(2, 2, [0.0; 3]);
        let out = overlay_mask(&black, &MaskBuf::full(2, 2), 0.5, OVERLAY_BLUE).unwrap();
        assert_eq!(out.px(1, 1), [0.0, 0.0, 0.5]);
    }

    #[test]
    fn overlay_recover_roundtrip_on_random_masks() {
        let mut rng = Rng::seed_from(11);
        for _ in 0..100 {
            let img = ImageBuf::from_fn(12, 12, |_, _| {
                [
                    rng.uniform() as f32,
                    rng.uniform() as f32,
                    // keep blue < 0.998 so the blend always moves the pixel
                    (rng.uniform() * 0.99) as f32,
                ]
            });
            let mask = MaskBuf::from_fn(12, 12, |_, _| rng.gen_bool(0.5));
            let over = overlay_mask(&img, &mask, OVERLAY_ALPHA, OVERLAY_BLUE).unwrap();
            let rec = recover_mask(&over, &img, RECOVER_TOL).unwrap();
            assert_eq!(rec, mask);
        }
    }

    #[test]
    fn recover_mask_edges() {
        let img = gradient_img(4, 4);
        let rec = recover_mask(&img, &img, RECOVER_TOL).unwrap();
        assert!(rec.is_empty());
        let black = ImageBuf::splat(4, 4, [0.0; 3]);
        let blueish = ImageBuf::splat(4, 4, [0.0, 0.0, 0.5]);
        let rec = recover_mask(&blueish, &black, RECOVER_TOL).unwrap();
        assert_eq!(rec.count(), 16);
    }

    #[test]
    fn mean_fuse_cases() {
        let a = ImageBuf::splat(3, 3, [0.2; 3]);
        let b = ImageBuf::splat(3, 3, [0.6; 3]);
        let f = mean_fuse(&a, &b).unwrap();
        assert!((f.px(1, 1)[0] - 0.4).abs() < 1e-6);
        let same = mean_fuse(&a, &a).unwrap();
        assert_eq!(same.data(), a.data());
        let black = ImageBuf::splat(3, 3, [0.0; 3]);
        let white = ImageBuf::splat(3, 3, [1.0; 3]);
        let f = mean_fuse(&black, &white).unwrap();
        assert_eq!(f.px(0, 0), [0.5; 3]);
    }

    #[test]
    fn png_roundtrip_is_exact_at_8bit() {
        let img = gradient_img(9, 7);
        let bytes = img.to_png_bytes().unwrap();
        let back = ImageBuf::from_png_bytes(&bytes).unwrap();
        assert_eq!(back.height(), 9);
        assert_eq!(back.width(), 7);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // a second encode of the decoded image is byte-identical
        let again = ImageBuf::from_png_bytes(&bytes).unwrap().to_png_bytes().unwrap();
        assert_eq!(again, back.to_png_bytes().unwrap());
    }
}
