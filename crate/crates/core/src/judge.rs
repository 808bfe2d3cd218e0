//! Three-question binary evaluation protocol with ratio aggregation.
//!
//! Every segmentation output is judged on three independent yes/no
//! questions — precision (spurious area ≤ 20%), recall (≥ 80% of the
//! target captured), contour accuracy (IoU ≥ 0.80) — and a dataset-level
//! report collects the proportion of samples passing each. The stub
//! backend answers from ground-truth masks; remote backends plug in
//! behind the same trait and JSON contract.

use std::sync::Mutex;

use crate::imaging::{recover_mask, ImageBuf, ImagingError, MaskBuf, RECOVER_TOL};

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("ground-truth mask is empty")]
    DegenerateGt,
    #[error("backend timeout: {0}")]
    BackendTimeout(String),
    #[error("backend returned a non-boolean reply: {0}")]
    BackendMalformedReply(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("no verdicts to aggregate")]
    EmptyVerdictList,
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T> = std::result::Result<T, JudgeError>;

/// Spurious area ratio |pred∖gt|/|pred| must not exceed this.
pub const PRECISION_MAX_ERROR: f64 = 0.20;
/// Coverage |pred∩gt|/|gt| must reach this.
pub const RECALL_MIN_COVERAGE: f64 = 0.80;
/// Intersection-over-union must reach this.
pub const IOU_MIN: f64 = 0.80;

/// The three questions, asked in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Question {
    Precision,
    Recall,
    Iou,
}

impl Question {
    pub const ALL: [Question; 3] = [Question::Precision, Question::Recall, Question::Iou];

    /// Wire identifier used by remote backends.
    pub fn id(&self) -> &'static str {
        match self {
            Question::Precision => "precision",
            Question::Recall => "recall",
            Question::Iou => "iou",
        }
    }
}

/// One judged sample; all three answers are always populated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub id: String,
    pub label: String,
    pub precision_ok: bool,
    pub recall_ok: bool,
    pub iou_ok: bool,
}

/// Dataset-level proportions of passing verdicts.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioReport {
    pub p_ratio: f64,
    pub r_ratio: f64,
    pub i_ratio: f64,
    pub n: usize,
}

/// Deterministic oracle over ground-truth and predicted masks.
///
/// precision_ok ⇔ |pred∖gt|/|pred| ≤ 0.20 (an empty prediction fails);
/// recall_ok ⇔ |pred∩gt|/|gt| ≥ 0.80; iou_ok ⇔ IoU ≥ 0.80.
pub fn stub_judge(gt: &MaskBuf, pred: &MaskBuf) -> Result<(bool, bool, bool)> {
    if gt.height() != pred.height() || gt.width() != pred.width() {
        return Err(JudgeError::Imaging(ImagingError::ShapeMismatch(format!(
            "gt {}x{} vs pred {}x{}",
            gt.height(),
            gt.width(),
            pred.height(),
            pred.width()
        ))));
    }
    let gt_area = gt.count() as f64;
    if gt_area == 0.0 {
        return Err(JudgeError::DegenerateGt);
    }
    let pred_area = pred.count() as f64;
    let mut inter = 0u64;
    let mut spurious = 0u64;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => inter += 1,
            (true, false) => spurious += 1,
            _ => {}
        }
    }
    let precision_ok = pred_area > 0.0 && (spurious as f64 / pred_area) <= PRECISION_MAX_ERROR;
    let recall_ok = (inter as f64 / gt_area) >= RECALL_MIN_COVERAGE;
    let union = pred_area + gt_area - inter as f64;
    let iou_ok = union > 0.0 && (inter as f64 / union) >= IOU_MIN;
    Ok((precision_ok, recall_ok, iou_ok))
}

/// Answers one question about a fused/segmented image pair. Implementations
/// must be idempotent per (sample, question); failures surface as errors,
/// never as fabricated answers.
pub trait JudgeBackend: Sync {
    fn ask(
        &self,
        fused: &ImageBuf,
        segmented: &ImageBuf,
        label: &str,
        question: Question,
    ) -> Result<bool>;
}

/// Oracle backend: recovers the predicted mask from the overlay difference
/// and scores it against a known ground-truth mask.
pub struct StubBackend {
    pub gt: MaskBuf,
}

impl JudgeBackend for StubBackend {
    fn ask(
        &self,
        fused: &ImageBuf,
        segmented: &ImageBuf,
        _label: &str,
        question: Question,
    ) -> Result<bool> {
        let pred = recover_mask(segmented, fused, RECOVER_TOL)?;
        let (p, r, i) = stub_judge(&self.gt, &pred)?;
        Ok(match question {
            Question::Precision => p,
            Question::Recall => r,
            Question::Iou => i,
        })
    }
}

/// Asks the three questions in fixed order and assembles the verdict.
pub fn judge_sample(
    backend: &dyn JudgeBackend,
    id: &str,
    label: &str,
    fused: &ImageBuf,
    segmented: &ImageBuf,
) -> Result<Verdict> {
    if !fused.same_dims(segmented) {
        return Err(JudgeError::Imaging(ImagingError::ShapeMismatch(format!(
            "fused {}x{} vs segmented {}x{}",
            fused.height(),
            fused.width(),
            segmented.height(),
            segmented.width()
        ))));
    }
    let mut answers = [false; 3];
    for (slot, q) in answers.iter_mut().zip(Question::ALL) {
        *slot = backend.ask(fused, segmented, label, q)?;
    }
    Ok(Verdict {
        id: id.to_string(),
        label: label.to_string(),
        precision_ok: answers[0],
        recall_ok: answers[1],
        iou_ok: answers[2],
    })
}

/// Boolean means over the verdict list.
pub fn aggregate_ratios(verdicts: &[Verdict]) -> Result<RatioReport> {
    if verdicts.is_empty() {
        return Err(JudgeError::EmptyVerdictList);
    }
    let n = verdicts.len() as f64;
    let count = |f: fn(&Verdict) -> bool| verdicts.iter().filter(|v| f(v)).count() as f64 / n;
    Ok(RatioReport {
        p_ratio: count(|v| v.precision_ok),
        r_ratio: count(|v| v.recall_ok),
        i_ratio: count(|v| v.iou_ok),
        n: verdicts.len(),
    })
}

/// One unit of judging work.
pub struct JudgeItem {
    pub id: String,
    pub label: String,
    pub fused: ImageBuf,
    pub segmented: ImageBuf,
}

/// Judges a batch with up to `jobs` worker threads. Verdicts are re-sorted
/// by sample id, so the report is independent of scheduling; any backend
/// failure aborts the whole batch.
pub fn judge_many(
    backend: &dyn JudgeBackend,
    items: &[JudgeItem],
    jobs: usize,
) -> Result<Vec<Verdict>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    let next = Mutex::new(0usize);
    let out: Mutex<Vec<Option<Verdict>>> = Mutex::new(vec![None; items.len()]);
    let failure: Mutex<Option<JudgeError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    return;
                }
                let idx = {
                    let mut n = next.lock().unwrap();
                    if *n >= items.len() {
                        return;
                    }
                    let i = *n;
                    *n += 1;
                    i
                };
                let item = &items[idx];
                match judge_sample(backend, &item.id, &item.label, &item.fused, &item.segmented) {
                    Ok(v) => out.lock().unwrap()[idx] = Some(v),
                    Err(e) => {
                        let mut f = failure.lock().unwrap();
                        if f.is_none() {
                            *f = Some(e);
                        }
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let mut verdicts: Vec<Verdict> = out
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|v| v.expect("all slots filled"))
        .collect();
    verdicts.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(verdicts)
}

/// CSV report: one row per verdict plus a trailing ratio row.
pub fn judge_csv(verdicts: &[Verdict], report: &RatioReport) -> String {
    let mut out = String::from("id,label,precision_ok,recall_ok,iou_ok\n");
    for v in verdicts {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            v.id, v.label, v.precision_ok, v.recall_ok, v.iou_ok
        ));
    }
    out.push_str(&format!(
        "RATIO,-,{:.6},{:.6},{:.6}\n",
        report.p_ratio, report.r_ratio, report.i_ratio
    ));
    out
}

/// Request body of the JSON-over-HTTP judge contract.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct JudgeRequest {
    pub fused_png_b64: String,
    pub seg_png_b64: String,
    pub label: String,
    pub question: String,
}

/// Expected reply body: `{"answer": true|false}`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct JudgeReply {
    pub answer: bool,
}
