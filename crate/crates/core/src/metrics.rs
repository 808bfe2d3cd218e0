//! Classical fusion statistics (MSE/PSNR, entropy, standard deviation,
//! spatial frequency, average gradient) and dataset-aggregated mIoU.
//!
//! All scalar metrics run on the luminance image 0.299R + 0.587G + 0.114B
//! with pixel range [0,1] and peak 1 for PSNR.

use std::collections::BTreeMap;

use crate::imaging::{ImageBuf, MaskBuf};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {0} preds vs {1} ground truths")]
    LengthMismatch(usize, usize),
    #[error("bad input: {0}")]
    BadInput(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// H×W luminance plane in [0,1].
#[derive(Debug, Clone)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn from_rgb(img: &ImageBuf) -> Self {
        let mut data = Vec::with_capacity(img.height() * img.width());
        for y in 0..img.height() {
            for x in 0..img.width() {
                let p = img.px(y, x);
                data.push(0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]));
            }
        }
        GrayImage {
            height: img.height(),
            width: img.width(),
            data,
        }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

fn mean_sq_diff(a: &GrayImage, b: &GrayImage) -> f64 {
    let n = a.data.len() as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Source-referenced MSE (averaged against both inputs) and PSNR in dB.
/// A zero MSE reports PSNR as +∞.
pub fn mse_psnr(fused: &ImageBuf, src_a: &ImageBuf, src_b: &ImageBuf) -> Result<(f64, f64)> {
    if !fused.same_dims(src_a) || !fused.same_dims(src_b) {
        return Err(MetricsError::ShapeMismatch(format!(
            "fused {}x{}, a {}x{}, b {}x{}",
            fused.height(),
            fused.width(),
            src_a.height(),
            src_a.width(),
            src_b.height(),
            src_b.width()
        )));
    }
    let f = GrayImage::from_rgb(fused);
    let a = GrayImage::from_rgb(src_a);
    let b = GrayImage::from_rgb(src_b);
    let mse = 0.5 * (mean_sq_diff(&f, &a) + mean_sq_diff(&f, &b));
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    };
    Ok((mse, psnr))
}

/// Shannon entropy in bits over a 256-bin histogram of round(gray·255).
pub fn entropy(img: &ImageBuf) -> f64 {
    let gray = GrayImage::from_rgb(img);
    let mut histo = [0u64; 256];
    for v in &gray.data {
        let bin = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
        histo[bin.min(255)] += 1;
    }
    let n = gray.data.len() as f64;
    histo
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Population standard deviation of the luminance.
pub fn sd(img: &ImageBuf) -> f64 {
    let gray = GrayImage::from_rgb(img);
    let n = gray.data.len() as f64;
    let mu = gray.data.iter().sum::<f64>() / n;
    (gray.data.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt()
}

/// SF = sqrt(RF² + CF²) with RF/CF the RMS of horizontal/vertical
/// neighbor differences.
pub fn spatial_frequency(img: &ImageBuf) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    if h < 2 || w < 2 {
        return Err(MetricsError::BadInput(format!(
            "spatial frequency needs at least 2x2, got {h}x{w}"
        )));
    }
    let g = GrayImage::from_rgb(img);
    let mut rf = 0.0;
    for y in 0..h {
        for x in 1..w {
            let d = g.at(y, x) - g.at(y, x - 1);
            rf += d * d;
        }
    }
    rf /= (h * (w - 1)) as f64;
    let mut cf = 0.0;
    for y in 1..h {
        for x in 0..w {
            let d = g.at(y, x) - g.at(y - 1, x);
            cf += d * d;
        }
    }
    cf /= ((h - 1) * w) as f64;
    Ok((rf + cf).sqrt())
}

/// Mean over the interior of sqrt((Δx² + Δy²)/2) with forward differences.
pub fn average_gradient(img: &ImageBuf) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    if h < 2 || w < 2 {
        return Err(MetricsError::BadInput(format!(
            "average gradient needs at least 2x2, got {h}x{w}"
        )));
    }
    let g = GrayImage::from_rgb(img);
    let mut acc = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = g.at(y, x + 1) - g.at(y, x);
            let dy = g.at(y + 1, x) - g.at(y, x);
            acc += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(acc / ((h - 1) * (w - 1)) as f64)
}

/// Dataset-aggregated per-class IoU and their mean. Classes whose union is
/// empty over the whole dataset are excluded from the mean.
pub fn miou(
    preds: &[MaskBuf],
    gts: &[MaskBuf],
    classes: &[String],
) -> Result<(BTreeMap<String, f64>, f64)> {
    if preds.len() != gts.len() || preds.len() != classes.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), gts.len()));
    }
    let mut inter: BTreeMap<String, u64> = BTreeMap::new();
    let mut union: BTreeMap<String, u64> = BTreeMap::new();
    for (i, ((p, g), class)) in preds.iter().zip(gts).zip(classes).enumerate() {
        if p.height() != g.height() || p.width() != g.width() {
            return Err(MetricsError::ShapeMismatch(format!(
                "sample {i}: pred {}x{} vs gt {}x{}",
                p.height(),
                p.width(),
                g.height(),
                g.width()
            )));
        }
        let (mut i_cnt, mut u_cnt) = (0u64, 0u64);
        for (pv, gv) in p.data().iter().zip(g.data()) {
            if *pv && *gv {
                i_cnt += 1;
            }
            if *pv || *gv {
                u_cnt += 1;
            }
        }
        *inter.entry(class.clone()).or_default() += i_cnt;
        *union.entry(class.clone()).or_default() += u_cnt;
    }
    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    let mut kept = 0usize;
    for (class, &u) in &union {
        if u == 0 {
            continue; // no mass anywhere for this class
        }
        let iou = inter[class] as f64 / u as f64;
        per_class.insert(class.clone(), iou);
        sum += iou;
        kept += 1;
    }
    let mean = if kept == 0 { 0.0 } else { sum / kept as f64 };
    Ok((per_class, mean))
}

/// One row of the `eval` report.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub mse: f64,
    pub psnr: f64,
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub ag: f64,
}

/// Computes the full metric row for one fused image against its sources.
pub fn eval_row(
    id: &str,
    fused: &ImageBuf,
    src_a: &ImageBuf,
    src_b: &ImageBuf,
) -> Result<EvalRow> {
    let (mse, psnr) = mse_psnr(fused, src_a, src_b)?;
    Ok(EvalRow {
        id: id.to_string(),
        mse,
        psnr,
        en: entropy(fused),
        sd: sd(fused),
        sf: spatial_frequency(fused)?,
        ag: average_gradient(fused)?,
    })
}

/// CSV serialization: `id,mse,psnr,en,sd,sf,ag` rows plus a final MEAN row.
/// Means average over the listed rows; an infinite PSNR propagates.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("id,mse,psnr,en,sd,sf,ag\n");
    let fmt = |v: f64| {
        if v.is_infinite() {
            "inf".to_string()
        } else {
            format!("{v:.6}")
        }
    };
    let mut sums = [0.0f64; 6];
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id,
            fmt(r.mse),
            fmt(r.psnr),
            fmt(r.en),
            fmt(r.sd),
            fmt(r.sf),
            fmt(r.ag)
        ));
        for (s, v) in sums.iter_mut().zip([r.mse, r.psnr, r.en, r.sd, r.sf, r.ag]) {
            *s += v;
        }
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        out.push_str(&format!(
            "MEAN,{},{},{},{},{},{}\n",
            fmt(sums[0] / n),
            fmt(sums[1] / n),
            fmt(sums[2] / n),
            fmt(sums[3] / n),
            fmt(sums[4] / n),
            fmt(sums[5] / n)
        ));
    }
    out
}
