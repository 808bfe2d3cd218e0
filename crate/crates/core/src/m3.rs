//! Training-data construction: degradation planning, complementary pair
//! synthesis, per-task target building, and dataset-mixture manifests.
//!
//! An M3 sample duplicates one source image into two views, partitions the
//! canvas into g×g-pixel cells, degrades most cells in exactly one view
//! (complementary) and the rest in both (joint), and keeps the clean source
//! as the reconstruction target. Segmentation and control samples reuse the
//! same degraded pair with task-specific targets.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::imaging::{
    adjust_photometric, degrade, exposure, mean_fuse, overlay_mask, to_luma, ControlTag,
    DegradeKind, ImageBuf, ImagingError, MaskBuf, OVERLAY_ALPHA, OVERLAY_BLUE,
};
use crate::prompt::{parse_prompt, render_prompt, PromptAst, PromptError, Subtag, TaskTag};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, thiserror::Error)]
pub enum M3Error {
    #[error("image {h}x{w} not divisible by grid {grid}")]
    IndivisibleGrid { h: usize, w: usize, grid: usize },
    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pool for category {0:?} is empty or too small")]
    EmptyPool(Category),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("manifest line {line}: {err}")]
    BadManifest { line: usize, err: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub type Result<T> = std::result::Result<T, M3Error>;

/// Which view(s) of the pair a cell degrades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CellAssign {
    DegradeA,
    DegradeB,
    DegradeBoth,
}

/// Per-cell operation assignment. A cells carry `op_a`, B cells `op_b`,
/// Both cells carry two independently sampled ops.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CellPlan {
    pub assign: CellAssign,
    pub op_a: Option<DegradeKind>,
    pub op_b: Option<DegradeKind>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DegradationPlan {
    pub grid_px: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, rows × cols.
    pub cells: Vec<CellPlan>,
}

impl DegradationPlan {
    pub fn cell(&self, r: usize, c: usize) -> &CellPlan {
        &self.cells[r * self.cols + c]
    }

    /// (both, a, b) counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut n = (0, 0, 0);
        for c in &self.cells {
            match c.assign {
                CellAssign::DegradeBoth => n.0 += 1,
                CellAssign::DegradeA => n.1 += 1,
                CellAssign::DegradeB => n.2 += 1,
            }
        }
        n
    }
}

/// Degradation families enabled for sampling; dropping entries reproduces
/// the single-degradation ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeFamily {
    Blur,
    GaussNoise,
    NoiseMask,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub families: Vec<DegradeFamily>,
    /// Blur sigma range, sampled uniformly per cell.
    pub blur_sigma: [f64; 2],
    /// Gaussian-noise sigma range, sampled uniformly per cell.
    pub noise_sigma: [f64; 2],
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            families: vec![
                DegradeFamily::Blur,
                DegradeFamily::GaussNoise,
                DegradeFamily::NoiseMask,
            ],
            blur_sigma: [1.0, 3.0],
            noise_sigma: [0.05, 0.20],
        }
    }
}

impl DegradeConfig {
    fn sample_op(&self, rng: &mut Rng) -> DegradeKind {
        match self.families[rng.gen_range(self.families.len())] {
            DegradeFamily::Blur => DegradeKind::Blur {
                sigma: rng.uniform_in(self.blur_sigma[0], self.blur_sigma[1]),
            },
            DegradeFamily::GaussNoise => DegradeKind::GaussNoise {
                sigma: rng.uniform_in(self.noise_sigma[0], self.noise_sigma[1]),
            },
            DegradeFamily::NoiseMask => DegradeKind::NoiseMask,
        }
    }
}

/// Plans a degradation grid: exactly round(total·joint_fraction) cells are
/// jointly degraded; the rest split between the two views uniformly at
/// random with |#A − #B| ≤ 1.
pub fn plan(
    h: usize,
    w: usize,
    grid_px: usize,
    joint_fraction: f64,
    degrade_cfg: &DegradeConfig,
    rng: &mut Rng,
) -> Result<DegradationPlan> {
    if grid_px == 0 || h % grid_px != 0 || w % grid_px != 0 {
        return Err(M3Error::IndivisibleGrid { h, w, grid: grid_px });
    }
    if !(0.0..=1.0).contains(&joint_fraction) {
        return Err(M3Error::BadParam(format!(
            "joint_fraction {joint_fraction} outside [0,1]"
        )));
    }
    if degrade_cfg.families.is_empty() {
        return Err(M3Error::BadParam("no degradation families enabled".into()));
    }
    let (rows, cols) = (h / grid_px, w / grid_px);
    let total = rows * cols;
    let n_both = (total as f64 * joint_fraction).round() as usize;
    let n_rem = total - n_both;
    let n_a = n_rem / 2 + if n_rem % 2 == 1 && rng.gen_bool(0.5) { 1 } else { 0 };

    let mut order: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut order);
    let mut assigns = vec![CellAssign::DegradeB; total];
    for (i, &cell) in order.iter().enumerate() {
        assigns[cell] = if i < n_both {
            CellAssign::DegradeBoth
        } else if i < n_both + n_a {
            CellAssign::DegradeA
        } else {
            CellAssign::DegradeB
        };
    }

    let cells = assigns
        .into_iter()
        .map(|assign| {
            let (op_a, op_b) = match assign {
                CellAssign::DegradeA => (Some(degrade_cfg.sample_op(rng)), None),
                CellAssign::DegradeB => (None, Some(degrade_cfg.sample_op(rng))),
                CellAssign::DegradeBoth => (
                    Some(degrade_cfg.sample_op(rng)),
                    Some(degrade_cfg.sample_op(rng)),
                ),
            };
            CellPlan { assign, op_a, op_b }
        })
        .collect();

    Ok(DegradationPlan {
        grid_px,
        rows,
        cols,
        cells,
    })
}

/// Applies a plan to one source image: returns (viewA, viewB, target) where
/// the target is the untouched source. Cells assigned to one view stay
/// bit-identical in the other.
pub fn synthesize_m3_pair(
    img: &ImageBuf,
    plan: &DegradationPlan,
    rng: &mut Rng,
) -> Result<(ImageBuf, ImageBuf, ImageBuf)> {
    let g = plan.grid_px;
    if img.height() != plan.rows * g || img.width() != plan.cols * g {
        return Err(M3Error::ShapeMismatch(format!(
            "image {}x{} vs plan {}x{} cells of {}px",
            img.height(),
            img.width(),
            plan.rows,
            plan.cols,
            g
        )));
    }
    let mut view_a = img.clone();
    let mut view_b = img.clone();
    for r in 0..plan.rows {
        for c in 0..plan.cols {
            let cell = plan.cell(r, c);
            let region = MaskBuf::rect(img.height(), img.width(), r * g, c * g, g, g);
            if let Some(op) = cell.op_a {
                let mut cell_rng = rng.split();
                view_a = degrade(&view_a, &region, op, &mut cell_rng)?;
            }
            if let Some(op) = cell.op_b {
                let mut cell_rng = rng.split();
                view_b = degrade(&view_b, &region, op, &mut cell_rng)?;
            }
        }
    }
    Ok((view_a, view_b, img.clone()))
}

/// Ground-truth recipe per task family.
pub enum TargetSpec<'a> {
    /// Reconstruct the clean source.
    M3 { source: &'a ImageBuf },
    /// Mean fusion of the two modalities.
    Ivif { ir: &'a ImageBuf, vis: &'a ImageBuf },
    /// The normally exposed image.
    Mef { normal: &'a ImageBuf },
    /// The dataset's pseudo ground truth.
    Mff { pseudo_gt: &'a ImageBuf },
    /// Photometric adjustment of the base target.
    Control { base: &'a ImageBuf, tag: ControlTag },
    /// Translucent blue overlay on the labeled region.
    Seg { base: &'a ImageBuf, label: &'a MaskBuf },
}

pub fn build_target(spec: TargetSpec<'_>) -> Result<ImageBuf> {
    Ok(match spec {
        TargetSpec::M3 { source } => source.clone(),
        TargetSpec::Ivif { ir, vis } => mean_fuse(ir, vis)?,
        TargetSpec::Mef { normal } => normal.clone(),
        TargetSpec::Mff { pseudo_gt } => pseudo_gt.clone(),
        TargetSpec::Control { base, tag } => adjust_photometric(base, tag),
        TargetSpec::Seg { base, label } => overlay_mask(base, label, OVERLAY_ALPHA, OVERLAY_BLUE)?,
    })
}

/// The four manifest categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    M3,
    Seg,
    Control,
    Fusion,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::M3,
        Category::Seg,
        Category::Control,
        Category::Fusion,
    ];

    pub fn dir_name(&self) -> &'static str {
        match self {
            Category::M3 => "m3",
            Category::Seg => "seg",
            Category::Control => "control",
            Category::Fusion => "fusion",
        }
    }

    /// Category is implied by the tag pair: [FUSION] without a subtask is
    /// an M3 reconstruction sample.
    pub fn infer(task: Option<TaskTag>, subtask: Option<Subtag>) -> Option<Category> {
        match (task, subtask) {
            (Some(TaskTag::Fusion), None) => Some(Category::M3),
            (Some(TaskTag::Fusion), Some(_)) => Some(Category::Fusion),
            (Some(TaskTag::Control), _) => Some(Category::Control),
            (Some(TaskTag::Seg), _) => Some(Category::Seg),
            (None, _) => None,
        }
    }
}

/// Per-category mixture weights; must be non-negative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixWeights {
    pub m3: f64,
    pub seg: f64,
    pub control: f64,
    pub fusion: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        // fusion pinned at 4.3275% of the mixture; the rest follows the
        // M3-and-segmentation-heavy split
        MixWeights {
            m3: 0.55,
            seg: 0.30,
            control: 0.106725,
            fusion: 0.043275,
        }
    }
}

impl MixWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.m3, self.seg, self.control, self.fusion]
    }

    pub fn validate(&self) -> Result<()> {
        let arr = self.as_array();
        if arr.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(M3Error::BadParam("negative or non-finite weight".into()));
        }
        let sum: f64 = arr.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(M3Error::BadParam(format!("weights sum to {sum}, want 1")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` over the four categories:
/// exact integer counts that sum to `total`. Ties break in category order.
pub fn mix_counts(weights: &MixWeights, total: usize) -> Result<[usize; 4]> {
    weights.validate()?;
    let raw: Vec<f64> = weights.as_array().iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| {
        let fi = raw[i] - raw[i].floor();
        let fj = raw[j] - raw[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for k in 0..(total - assigned) {
        counts[order[k % 4]] += 1;
    }
    Ok([counts[0], counts[1], counts[2], counts[3]])
}

/// One manifest row. `seed` is the per-sample stream that regenerates the
/// sample's stochastic choices.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub task_tag: String,
    pub subtask_tag: Option<String>,
    pub prompt: String,
    pub path_a: String,
    pub path_b: String,
    pub path_target: String,
    pub seed: u64,
}

impl SampleRecord {
    pub fn category(&self) -> Option<Category> {
        let ast = parse_prompt(&self.prompt).ok()?;
        Category::infer(ast.task, ast.subtask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub counts: BTreeMap<Category, usize>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// UTF-8 JSON Lines, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record json"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Manifest> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(line).map_err(|e| M3Error::BadManifest {
                line: i + 1,
                err: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Manifest::from_records(records))
    }

    pub fn from_records(records: Vec<SampleRecord>) -> Manifest {
        let mut counts = BTreeMap::new();
        for r in &records {
            if let Some(cat) = r.category() {
                *counts.entry(cat).or_insert(0) += 1;
            }
        }
        Manifest { records, counts }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| M3Error::Io(format!("{path:?}: {e}")))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| M3Error::Io(format!("{path:?}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let f = std::fs::File::open(path).map_err(|e| M3Error::Io(format!("{path:?}: {e}")))?;
        let mut text = String::new();
        let mut reader = std::io::BufReader::new(f);
        loop {
            let mut line = String::new();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| M3Error::Io(e.to_string()))?;
            if n == 0 {
                break;
            }
            text.push_str(&line);
        }
        Manifest::from_jsonl(&text)
    }
}

/// Draws exactly `mix_counts` records per category from the pools and
/// shuffles the combined list deterministically by `seed`.
pub fn mix_manifest(
    pools: &BTreeMap<Category, Vec<SampleRecord>>,
    weights: &MixWeights,
    total: usize,
    seed: u64,
) -> Result<Manifest> {
    let counts = mix_counts(weights, total)?;
    let mut records = Vec::with_capacity(total);
    for (cat, &count) in Category::ALL.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let pool = pools.get(cat).map(Vec::as_slice).unwrap_or(&[]);
        if pool.len() < count {
            return Err(M3Error::EmptyPool(*cat));
        }
        records.extend_from_slice(&pool[..count]);
    }
    let mut rng = Rng::seed_from(derive_seed(seed, "mix_manifest"));
    rng.shuffle(&mut records);
    Ok(Manifest::from_records(records))
}

/// Dataset-shape knobs: grid sizes, joint fraction, mixture, total count.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub mix_weights: MixWeights,
    pub grid_sizes: Vec<usize>,
    pub joint_fraction: f64,
    pub total: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            mix_weights: MixWeights::default(),
            grid_sizes: vec![16, 32, 64],
            joint_fraction: 0.25,
            total: 64,
        }
    }
}

const M3_INSTRUCTIONS: [&str; 4] = [
    "Fuse the images.",
    "Restore the clean image from both inputs.",
    "Combine the two degraded views.",
    "Reconstruct the source from the pair.",
];

const SEG_LABELS: [&str; 6] = ["car", "person", "building", "tree", "road", "sky"];

fn control_instruction(tag: ControlTag) -> &'static str {
    match tag {
        ControlTag::LightPlusPlus => "Fuse the images and strongly increase the brightness.",
        ControlTag::LightPlus => "Fuse the images and increase the brightness.",
        ControlTag::LightMinus => "Fuse the images and decrease the brightness.",
        ControlTag::LightMinusMinus => "Fuse the images and strongly decrease the brightness.",
        ControlTag::ContrastPlus => "Fuse the images and increase the contrast.",
        ControlTag::ContrastMinus => "Fuse the images and reduce the contrast.",
    }
}

/// Crops to the largest top-left window whose sides are multiples of `m`.
fn crop_multiple(img: &ImageBuf, m: usize) -> Result<ImageBuf> {
    let h = (img.height() / m) * m;
    let w = (img.width() / m) * m;
    if h == 0 || w == 0 {
        return Err(M3Error::BadParam(format!(
            "source {}x{} smaller than one {}px cell",
            img.height(),
            img.width(),
            m
        )));
    }
    if h == img.height() && w == img.width() {
        return Ok(img.clone());
    }
    Ok(ImageBuf::from_fn(h, w, |y, x| img.px(y, x)))
}

/// Random axis-aligned rectangle covering a reasonable fraction of the
/// canvas; the synthetic segmentation target.
fn random_label_mask(h: usize, w: usize, rng: &mut Rng) -> MaskBuf {
    let mh = h / 4 + rng.gen_range(h / 2);
    let mw = w / 4 + rng.gen_range(w / 2);
    let y0 = rng.gen_range(h - mh);
    let x0 = rng.gen_range(w - mw);
    MaskBuf::rect(h, w, y0, x0, mh.max(1), mw.max(1))
}

struct BuiltSample {
    record: SampleRecord,
    view_a: ImageBuf,
    view_b: ImageBuf,
    target: ImageBuf,
    gt_mask: Option<MaskBuf>,
}

fn build_sample(
    category: Category,
    id: &str,
    sample_seed: u64,
    source: &ImageBuf,
    data_cfg: &DataConfig,
    degrade_cfg: &DegradeConfig,
) -> Result<BuiltSample> {
    let mut rng = Rng::seed_from(sample_seed);
    let rel = |suffix: &str| format!("data/{}/{}_{}.png", category.dir_name(), id, suffix);

    let (ast, view_a, view_b, target, gt_mask) = match category {
        Category::M3 | Category::Seg | Category::Control => {
            let grid = data_cfg.grid_sizes[rng.gen_range(data_cfg.grid_sizes.len())];
            let src = crop_multiple(source, grid)?;
            let plan = plan(
                src.height(),
                src.width(),
                grid,
                data_cfg.joint_fraction,
                degrade_cfg,
                &mut rng,
            )?;
            let (a, b, clean) = synthesize_m3_pair(&src, &plan, &mut rng)?;
            match category {
                Category::M3 => {
                    let instr = M3_INSTRUCTIONS[rng.gen_range(M3_INSTRUCTIONS.len())];
                    let ast = PromptAst::new(Some(TaskTag::Fusion), None, instr);
                    let target = build_target(TargetSpec::M3 { source: &clean })?;
                    (ast, a, b, target, None)
                }
                Category::Seg => {
                    let label = SEG_LABELS[rng.gen_range(SEG_LABELS.len())];
                    let mask = random_label_mask(src.height(), src.width(), &mut rng);
                    let ast =
                        PromptAst::new(Some(TaskTag::Seg), None, &format!("seg the {label}"));
                    let target = build_target(TargetSpec::Seg {
                        base: &clean,
                        label: &mask,
                    })?;
                    (ast, a, b, target, Some(mask))
                }
                _ => {
                    let tag = ControlTag::ALL[rng.gen_range(ControlTag::ALL.len())];
                    let ast = PromptAst::new(
                        Some(TaskTag::Control),
                        Some(Subtag::Control(tag)),
                        control_instruction(tag),
                    );
                    let target = build_target(TargetSpec::Control { base: &clean, tag })?;
                    (ast, a, b, target, None)
                }
            }
        }
        Category::Fusion => {
            // synthetic fusion pools: modality / exposure / focus pairs
            let src = crop_multiple(source, 8)?;
            match rng.gen_range(3) {
                0 => {
                    let ir = to_luma(&src);
                    let target = build_target(TargetSpec::Ivif { ir: &ir, vis: &src })?;
                    let ast = PromptAst::new(
                        Some(TaskTag::Fusion),
                        Some(Subtag::MultiModalities),
                        "Fuse the infrared and visible images.",
                    );
                    (ast, ir, src, target, None)
                }
                1 => {
                    let under = exposure(&src, 0.5);
                    let over = exposure(&src, 2.0);
                    let target = build_target(TargetSpec::Mef { normal: &src })?;
                    let ast = PromptAst::new(
                        Some(TaskTag::Fusion),
                        Some(Subtag::MultiExposure),
                        "Fuse the differently exposed images.",
                    );
                    (ast, under, over, target, None)
                }
                _ => {
                    let (h, w) = (src.height(), src.width());
                    let left = MaskBuf::rect(h, w, 0, 0, h, w / 2);
                    let right = MaskBuf::from_fn(h, w, |y, x| !left.get(y, x));
                    let blur = DegradeKind::Blur { sigma: 2.0 };
                    let mut r1 = rng.split();
                    let near = degrade(&src, &right, blur, &mut r1)?;
                    let mut r2 = rng.split();
                    let far = degrade(&src, &left, blur, &mut r2)?;
                    let target = build_target(TargetSpec::Mff { pseudo_gt: &src })?;
                    let ast = PromptAst::new(
                        Some(TaskTag::Fusion),
                        Some(Subtag::MultiFocus),
                        "Fuse the near and far focus images.",
                    );
                    (ast, near, far, target, None)
                }
            }
        }
    };

    let prompt = render_prompt(&ast)?;
    let record = SampleRecord {
        id: id.to_string(),
        task_tag: ast.task.map(|t| t.as_str().trim_matches(['[', ']']).to_string()).unwrap_or_default(),
        subtask_tag: ast
            .subtask
            .map(|s| s.as_str().trim_matches(['<', '>']).to_string()),
        prompt,
        path_a: rel("a"),
        path_b: rel("b"),
        path_target: rel("target"),
        seed: sample_seed,
    };
    Ok(BuiltSample {
        record,
        view_a,
        view_b,
        target,
        gt_mask,
    })
}

/// Runs the full construction pipeline: per-category pools sized by the
/// mixture counts, PNGs under `out_dir/data/<category>/`, and the shuffled
/// manifest at `out_dir/manifest.jsonl`. Fully determined by `seed`.
pub fn generate_dataset(
    sources: &[(String, ImageBuf)],
    data_cfg: &DataConfig,
    degrade_cfg: &DegradeConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if sources.is_empty() {
        return Err(M3Error::MissingInput("no source images".into()));
    }
    data_cfg.mix_weights.validate()?;
    if data_cfg.grid_sizes.is_empty() {
        return Err(M3Error::BadParam("no grid sizes configured".into()));
    }
    let counts = mix_counts(&data_cfg.mix_weights, data_cfg.total)?;
    let mut pools: BTreeMap<Category, Vec<SampleRecord>> = BTreeMap::new();

    for (cat, &count) in Category::ALL.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let dir = out_dir.join("data").join(cat.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| M3Error::Io(format!("{dir:?}: {e}")))?;
        let mut pool = Vec::with_capacity(count);
        for i in 0..count {
            let sample_seed = derive_seed(seed, &format!("{}/{}", cat.dir_name(), i));
            let id = format!("{}_{:05}_{:08x}", cat.dir_name(), i, sample_seed & 0xffff_ffff);
            let (_, source) = &sources[i % sources.len()];
            let built = build_sample(*cat, &id, sample_seed, source, data_cfg, degrade_cfg)?;
            let save = |img: &ImageBuf, rel: &str| -> Result<()> {
                img.save_png(&out_dir.join(rel))?;
                Ok(())
            };
            save(&built.view_a, &built.record.path_a)?;
            save(&built.view_b, &built.record.path_b)?;
            save(&built.target, &built.record.path_target)?;
            if let Some(mask) = &built.gt_mask {
                mask.save_png(&dir.join(format!("{id}_gt.png")))?;
            }
            pool.push(built.record);
        }
        pools.insert(*cat, pool);
    }

    let manifest = mix_manifest(&pools, &data_cfg.mix_weights, data_cfg.total, seed)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_img(h: usize, w: usize) -> ImageBuf {
        ImageBuf::from_fn(h, w, |y, x| {
            [
                ((x * 7 + y) % 23) as f32 / 23.0,
                ((y * 5 + x) % 19) as f32 / 19.0,
                ((x + y) % 11) as f32 / 11.0,
            ]
        })
    }

    #[test]
    fn plan_counts_on_4x4_grid() {
        let mut rng = Rng::seed_from(1);
        let p = plan(64, 64, 16, 0.25, &DegradeConfig::default(), &mut rng).unwrap();
        assert_eq!((p.rows, p.cols), (4, 4));
        let (both, a, b) = p.counts();
        assert_eq!(both, 4);
        assert_eq!(a, 6);
        assert_eq!(b, 6);
    }

    #[test]
    fn plan_extremes() {
        let mut rng = Rng::seed_from(2);
        let p = plan(32, 32, 16, 1.0, &DegradeConfig::default(), &mut rng).unwrap();
        assert_eq!(p.counts(), (4, 0, 0));
        let p = plan(32, 32, 16, 0.0, &DegradeConfig::default(), &mut rng).unwrap();
        let (both, a, b) = p.counts();
        assert_eq!(both, 0);
        assert_eq!(a + b, 4);
        assert!(a.abs_diff(b) <= 1);
    }

    #[test]
    fn plan_balance_and_assignment_structure() {
        let mut rng = Rng::seed_from(3);
        for _ in 0..200 {
            let grid = [16, 32][rng.gen_range(2)];
            let p = plan(128, 128, grid, 0.25, &DegradeConfig::default(), &mut rng).unwrap();
            let total = p.rows * p.cols;
            let (both, a, b) = p.counts();
            assert_eq!(both, ((total as f64) * 0.25).round() as usize);
            assert!(a.abs_diff(b) <= 1, "unbalanced: {a} vs {b}");
            // op specs follow the assignment
            for cell in &p.cells {
                match cell.assign {
                    CellAssign::DegradeA => {
                        assert!(cell.op_a.is_some() && cell.op_b.is_none())
                    }
                    CellAssign::DegradeB => {
                        assert!(cell.op_a.is_none() && cell.op_b.is_some())
                    }
                    CellAssign::DegradeBoth => {
                        assert!(cell.op_a.is_some() && cell.op_b.is_some())
                    }
                }
            }
        }
    }

    #[test]
    fn plan_is_deterministic_per_seed() {
        let cfg = DegradeConfig::default();
        let p1 = plan(64, 64, 16, 0.25, &cfg, &mut Rng::seed_from(9)).unwrap();
        let p2 = plan(64, 64, 16, 0.25, &cfg, &mut Rng::seed_from(9)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn plan_rejects_indivisible_and_bad_fraction() {
        let cfg = DegradeConfig::default();
        assert!(matches!(
            plan(60, 64, 16, 0.25, &cfg, &mut Rng::seed_from(1)),
            Err(M3Error::IndivisibleGrid { .. })
        ));
        assert!(matches!(
            plan(64, 64, 16, 1.5, &cfg, &mut Rng::seed_from(1)),
            Err(M3Error::BadParam(_))
        ));
    }

    #[test]
    fn synthesis_respects_complementarity() {
        let img = test_img(64, 64);
        let cfg = DegradeConfig::default();
        let mut rng = Rng::seed_from(4);
        let p = plan(64, 64, 16, 0.25, &cfg, &mut rng).unwrap();
        let (a, b, target) = synthesize_m3_pair(&img, &p, &mut rng).unwrap();
        assert_eq!(target.data(), img.data());
        let g = p.grid_px;
        for r in 0..p.rows {
            for c in 0..p.cols {
                let mut a_clean = true;
                let mut b_clean = true;
                for y in r * g..(r + 1) * g {
                    for x in c * g..(c + 1) * g {
                        a_clean &= a.px(y, x) == img.px(y, x);
                        b_clean &= b.px(y, x) == img.px(y, x);
                    }
                }
                match p.cell(r, c).assign {
                    CellAssign::DegradeA => assert!(b_clean, "B touched at ({r},{c})"),
                    CellAssign::DegradeB => assert!(a_clean, "A touched at ({r},{c})"),
                    CellAssign::DegradeBoth => {}
                }
            }
        }
    }

    #[test]
    fn stitching_clean_cells_reconstructs_source() {
        // cell-wise selection oracle: outside Both cells, picking the clean
        // view per cell rebuilds the source exactly
        let img = test_img(64, 64);
        let cfg = DegradeConfig::default();
        let mut rng = Rng::seed_from(5);
        let p = plan(64, 64, 16, 0.25, &cfg, &mut rng).unwrap();
        let (a, b, _) = synthesize_m3_pair(&img, &p, &mut rng).unwrap();
        let g = p.grid_px;
        for r in 0..p.rows {
            for c in 0..p.cols {
                let pick = match p.cell(r, c).assign {
                    CellAssign::DegradeA => &b,
                    CellAssign::DegradeB => &a,
                    CellAssign::DegradeBoth => continue,
                };
                for y in r * g..(r + 1) * g {
                    for x in c * g..(c + 1) * g {
                        assert_eq!(pick.px(y, x), img.px(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn synthesis_determinism_byte_exact() {
        let img = test_img(64, 64);
        let cfg = DegradeConfig::default();
        let mk = || {
            let mut rng = Rng::seed_from(6);
            let p = plan(64, 64, 16, 0.25, &cfg, &mut rng).unwrap();
            let (a, b, _) = synthesize_m3_pair(&img, &p, &mut rng).unwrap();
            (a.to_png_bytes().unwrap(), b.to_png_bytes().unwrap())
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn build_target_closed_forms() {
        let src = test_img(8, 8);
        let out = build_target(TargetSpec::M3 { source: &src }).unwrap();
        assert_eq!(out.data(), src.data());

        let black = ImageBuf::splat(8, 8, [0.0; 3]);
        let white = ImageBuf::splat(8, 8, [1.0; 3]);
        let out = build_target(TargetSpec::Ivif {
            ir: &black,
            vis: &white,
        })
        .unwrap();
        assert_eq!(out.px(0, 0), [0.5; 3]);

        let mid = ImageBuf::splat(8, 8, [0.5; 3]);
        let out = build_target(TargetSpec::Control {
            base: &mid,
            tag: ControlTag::LightPlus,
        })
        .unwrap();
        assert!((out.px(0, 0)[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn mix_counts_closed_forms() {
        // the headline mixture: 13,692 of 316,392 samples are fusion
        let counts = mix_counts(&MixWeights::default(), 316_392).unwrap();
        assert_eq!(counts[3], 13_692);
        assert_eq!(counts.iter().sum::<usize>(), 316_392);

        let w = MixWeights {
            m3: 0.5,
            seg: 0.25,
            control: 0.25,
            fusion: 0.0,
        };
        assert_eq!(mix_counts(&w, 100).unwrap(), [50, 25, 25, 0]);

        let w = MixWeights {
            m3: 0.5,
            seg: 0.3,
            control: 0.15,
            fusion: 0.05,
        };
        assert_eq!(mix_counts(&w, 200).unwrap(), [100, 60, 30, 10]);

        let single = MixWeights {
            m3: 1.0,
            seg: 0.0,
            control: 0.0,
            fusion: 0.0,
        };
        assert_eq!(mix_counts(&single, 7).unwrap(), [7, 0, 0, 0]);
    }

    #[test]
    fn mix_manifest_draws_and_errors() {
        let rec = |id: &str, prompt: &str| SampleRecord {
            id: id.into(),
            task_tag: "FUSION".into(),
            subtask_tag: None,
            prompt: prompt.into(),
            path_a: "a.png".into(),
            path_b: "b.png".into(),
            path_target: "t.png".into(),
            seed: 0,
        };
        let m3_prompt = "[FUSION] <img><|image_1|></img> <img><|image_2|></img> fuse";
        let mut pools = BTreeMap::new();
        pools.insert(
            Category::M3,
            (0..10).map(|i| rec(&format!("m{i}"), m3_prompt)).collect::<Vec<_>>(),
        );
        let w = MixWeights {
            m3: 1.0,
            seg: 0.0,
            control: 0.0,
            fusion: 0.0,
        };
        let m = mix_manifest(&pools, &w, 10, 42).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.counts[&Category::M3], 10);
        // deterministic shuffle
        let m2 = mix_manifest(&pools, &w, 10, 42).unwrap();
        assert_eq!(m, m2);
        // under-filled pool errors
        let w_half = MixWeights {
            m3: 0.5,
            seg: 0.5,
            control: 0.0,
            fusion: 0.0,
        };
        assert!(matches!(
            mix_manifest(&pools, &w_half, 30, 42),
            Err(M3Error::EmptyPool(Category::M3))
        ));
    }

    #[test]
    fn manifest_jsonl_roundtrip() {
        let rec = SampleRecord {
            id: "m3_00000_abcd1234".into(),
            task_tag: "FUSION".into(),
            subtask_tag: None,
            prompt: "[FUSION] <img><|image_1|></img> <img><|image_2|></img> fuse".into(),
            path_a: "data/m3/x_a.png".into(),
            path_b: "data/m3/x_b.png".into(),
            path_target: "data/m3/x_target.png".into(),
            seed: 7,
        };
        let m = Manifest::from_records(vec![rec]);
        let text = m.to_jsonl();
        let back = Manifest::from_jsonl(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.records[0].category(), Some(Category::M3));
    }

    #[test]
    fn generated_dataset_is_consistent() {
        let dir = std::env::temp_dir().join(format!("m3gen-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let sources = vec![
            ("s0".to_string(), test_img(128, 128)),
            ("s1".to_string(), test_img(128, 96)),
        ];
        let data_cfg = DataConfig {
            total: 12,
            ..DataConfig::default()
        };
        let m = generate_dataset(&sources, &data_cfg, &DegradeConfig::default(), 11, &dir).unwrap();
        assert_eq!(m.len(), 12);
        let sum: usize = m.counts.values().sum();
        assert_eq!(sum, 12);
        // every prompt parses and every referenced file exists
        for r in &m.records {
            parse_prompt(&r.prompt).unwrap();
            for p in [&r.path_a, &r.path_b, &r.path_target] {
                assert!(dir.join(p).exists(), "{p} missing");
            }
        }
        // manifest regeneration under the same seed is byte-identical
        let text1 = std::fs::read(dir.join("manifest.jsonl")).unwrap();
        let dir2 = std::env::temp_dir().join(format!("m3gen2-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir2);
        let m2 =
            generate_dataset(&sources, &data_cfg, &DegradeConfig::default(), 11, &dir2).unwrap();
        assert_eq!(m, m2);
        let text2 = std::fs::read(dir2.join("manifest.jsonl")).unwrap();
        assert_eq!(text1, text2);
        let _ = std::fs::remove_dir_all(&dir);
        let _ = std::fs::remove_dir_all(&dir2);
    }
}
