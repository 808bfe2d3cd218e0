//! Browser demo bindings: three interactive views over the core pipeline.
//!
//! 1. M3 explorer — plan a degradation grid and synthesize the two
//!    complementary views of a source image.
//! 2. Attention-mask viewer — parse a prompt, assemble the multimodal
//!    sequence, and expose the hybrid causal/bidirectional mask.
//! 3. Instruction preview — parse a prompt, mean-fuse two inputs, apply
//!    the photometric control it names, and report fusion statistics.
//!
//! All image buffers cross the boundary as RGBA8 (canvas `ImageData`).

use wasm_bindgen::prelude::*;

use ditfuse_core::imaging::{adjust_photometric, mean_fuse, ControlTag, ImageBuf};
use ditfuse_core::m3::{plan, synthesize_m3_pair, CellAssign, DegradeConfig};
use ditfuse_core::metrics;
use ditfuse_core::prompt::{
    assemble_sequence, build_attention_mask, parse_prompt, tokenize, Segment, Subtag, Vocab,
};
use ditfuse_core::rng::Rng;

fn rgba_to_image(rgba: &[u8], width: usize, height: usize) -> Result<ImageBuf, JsError> {
    if rgba.len() != width * height * 4 {
        return Err(JsError::new("rgba buffer does not match dimensions"));
    }
    let mut img = ImageBuf::new(height, width);
    for y in 0..height {
        for x in 0..width {
            let i = (y * width + x) * 4;
            img.put(
                y,
                x,
                [
                    f32::from(rgba[i]) / 255.0,
                    f32::from(rgba[i + 1]) / 255.0,
                    f32::from(rgba[i + 2]) / 255.0,
                ],
            );
        }
    }
    Ok(img)
}

fn image_to_rgba(img: &ImageBuf) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.height() * img.width() * 4);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.px(y, x);
            out.push((p[0].clamp(0.0, 1.0) * 255.0).round() as u8);
            out.push((p[1].clamp(0.0, 1.0) * 255.0).round() as u8);
            out.push((p[2].clamp(0.0, 1.0) * 255.0).round() as u8);
            out.push(255);
        }
    }
    out
}

/// Procedural demo image so the page works without uploads.
#[wasm_bindgen]
pub fn demo_image(width: usize, height: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::seed_from(seed);
    let cx = width as f32 * (0.3 + 0.4 * rng.uniform() as f32);
    let cy = height as f32 * (0.3 + 0.4 * rng.uniform() as f32);
    let stripes = 6.0 + 10.0 * rng.uniform() as f32;
    let img = ImageBuf::from_fn(height, width, |y, x| {
        let dx = x as f32 - cx;
        let dy = y as f32 - cy;
        let r = (dx * dx + dy * dy).sqrt() / width as f32;
        [
            0.5 + 0.5 * (stripes * r).sin(),
            (x as f32 / width as f32) * 0.8 + 0.1,
            0.5 + 0.5 * ((x as f32 + 2.0 * y as f32) / 17.0).cos(),
        ]
    });
    image_to_rgba(&img)
}

/// Result of one M3 synthesis: both degraded views plus the per-cell
/// assignment map.
#[wasm_bindgen]
pub struct M3Result {
    view_a: Vec<u8>,
    view_b: Vec<u8>,
    rows: usize,
    cols: usize,
    /// 0 = degrade A, 1 = degrade B, 2 = both.
    cells: Vec<u8>,
    counts: Vec<u32>,
}

#[wasm_bindgen]
impl M3Result {
    #[wasm_bindgen(getter)]
    pub fn view_a(&self) -> Vec<u8> {
        self.view_a.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn view_b(&self) -> Vec<u8> {
        self.view_b.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[wasm_bindgen(getter)]
    pub fn cells(&self) -> Vec<u8> {
        self.cells.clone()
    }

    /// [both, a, b] cell counts.
    #[wasm_bindgen(getter)]
    pub fn counts(&self) -> Vec<u32> {
        self.counts.clone()
    }
}

/// Plans and applies complementary degradations to an RGBA source.
#[wasm_bindgen]
pub fn synthesize_m3(
    rgba: &[u8],
    width: usize,
    height: usize,
    grid_px: usize,
    joint_fraction: f64,
    seed: u64,
) -> Result<M3Result, JsError> {
    let img = rgba_to_image(rgba, width, height)?;
    let mut rng = Rng::seed_from(seed);
    let p = plan(
        height,
        width,
        grid_px,
        joint_fraction,
        &DegradeConfig::default(),
        &mut rng,
    )
    .map_err(|e| JsError::new(&e.to_string()))?;
    let (a, b, _) = synthesize_m3_pair(&img, &p, &mut rng).map_err(|e| JsError::new(&e.to_string()))?;
    let (both, na, nb) = p.counts();
    Ok(M3Result {
        view_a: image_to_rgba(&a),
        view_b: image_to_rgba(&b),
        rows: p.rows,
        cols: p.cols,
        cells: p
            .cells
            .iter()
            .map(|c| match c.assign {
                CellAssign::DegradeA => 0,
                CellAssign::DegradeB => 1,
                CellAssign::DegradeBoth => 2,
            })
            .collect(),
        counts: vec![both as u32, na as u32, nb as u32],
    })
}

/// Sequence layout plus the visibility matrix for a prompt.
#[wasm_bindgen]
pub struct MaskResult {
    n: usize,
    bits: Vec<u8>,
    segments_json: String,
}

#[wasm_bindgen]
impl MaskResult {
    #[wasm_bindgen(getter)]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Row-major n×n, 1 = visible.
    #[wasm_bindgen(getter)]
    pub fn bits(&self) -> Vec<u8> {
        self.bits.clone()
    }

    /// JSON list of {kind, start, len} segments.
    #[wasm_bindgen(getter)]
    pub fn segments(&self) -> String {
        self.segments_json.clone()
    }
}

/// Parses and assembles a prompt, returning the hybrid attention mask.
#[wasm_bindgen]
pub fn attention_mask(
    prompt: &str,
    cond_tokens: usize,
    noisy_tokens: usize,
) -> Result<MaskResult, JsError> {
    parse_prompt(prompt).map_err(|e| JsError::new(&e.to_string()))?;
    let toks = tokenize(prompt);
    let seq = assemble_sequence(
        &toks,
        [cond_tokens.max(1), cond_tokens.max(1)],
        noisy_tokens.max(1),
        Vocab::builtin(),
    )
    .map_err(|e| JsError::new(&e.to_string()))?;
    let mask = build_attention_mask(&seq.layout);
    let segments: Vec<serde_json::Value> = seq
        .layout
        .segments
        .iter()
        .map(|s| {
            let (kind, range) = match s {
                Segment::Text { .. } => ("text", s.range()),
                Segment::CondImage { index, .. } => {
                    if *index == 0 {
                        ("image1", s.range())
                    } else {
                        ("image2", s.range())
                    }
                }
                Segment::NoisyImage { .. } => ("noisy", s.range()),
                Segment::Timestep { .. } => ("time", s.range()),
            };
            serde_json::json!({"kind": kind, "start": range.start, "len": range.len()})
        })
        .collect();
    Ok(MaskResult {
        n: mask.n(),
        bits: mask.as_bools().iter().map(|&b| u8::from(b)).collect(),
        segments_json: serde_json::to_string(&segments).expect("segments json"),
    })
}

/// Mean fusion plus the photometric control named by the prompt, with the
/// classical statistics of the result.
#[wasm_bindgen]
pub struct PreviewResult {
    rgba: Vec<u8>,
    info_json: String,
}

#[wasm_bindgen]
impl PreviewResult {
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// JSON: parsed tags plus {en, sd, sf, ag} of the output.
    #[wasm_bindgen(getter)]
    pub fn info(&self) -> String {
        self.info_json.clone()
    }
}

#[wasm_bindgen]
pub fn instruct_preview(
    rgba_a: &[u8],
    rgba_b: &[u8],
    width: usize,
    height: usize,
    prompt: &str,
) -> Result<PreviewResult, JsError> {
    let img_a = rgba_to_image(rgba_a, width, height)?;
    let img_b = rgba_to_image(rgba_b, width, height)?;
    let ast = parse_prompt(prompt).map_err(|e| JsError::new(&e.to_string()))?;
    let mut out = mean_fuse(&img_a, &img_b).map_err(|e| JsError::new(&e.to_string()))?;
    let mut control: Option<ControlTag> = None;
    if let Some(Subtag::Control(tag)) = ast.subtask {
        out = adjust_photometric(&out, tag);
        control = Some(tag);
    }
    let info = serde_json::json!({
        "task": ast.task.map(|t| t.as_str()),
        "subtask": ast.subtask.map(|s| s.as_str()),
        "control": control.map(|c| c.subtag()),
        "instruction": ast.instruction,
        "en": metrics::entropy(&out),
        "sd": metrics::sd(&out),
        "sf": metrics::spatial_frequency(&out).ok(),
        "ag": metrics::average_gradient(&out).ok(),
    });
    Ok(PreviewResult {
        rgba: image_to_rgba(&out),
        info_json: info.to_string(),
    })
}
