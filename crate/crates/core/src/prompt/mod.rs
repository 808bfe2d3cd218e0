//! Prompt grammar, toy tokenizer, multimodal sequence assembly, and the
//! hybrid attention-mask builder.
//!
//! Canonical prompt form:
//!
//! ```text
//! [TAG] <SUBTAG> <img><|image_1|></img> <img><|image_2|></img> instruction
//! ```
//!
//! Task and subtask tags are optional; tag-free prompts that carry the two
//! wrapped placeholders anywhere in their text are accepted as well.

mod seq;
mod vocab;

pub use seq::{
    assemble_sequence, build_attention_mask, AssembledSequence, AttnMask, Segment, SequenceLayout,
};
pub use vocab::{tokenize, Vocab};

use crate::imaging::ControlTag;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt is missing image placeholder {0}")]
    MissingPlaceholder(&'static str),
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("invalid tag combination: {0}")]
    InvalidTagCombination(String),
    #[error("malformed image wrapper: {0}")]
    MalformedImageWrapper(String),
    #[error("duplicate image placeholder {0}")]
    DuplicatePlaceholder(&'static str),
    #[error("bad sequence: {0}")]
    BadSequence(String),
    #[error("bad vocabulary file: {0}")]
    BadVocab(String),
}

pub type Result<T> = std::result::Result<T, PromptError>;

pub const IMG_OPEN: &str = "<img>";
pub const IMG_CLOSE: &str = "</img>";
pub const PLACEHOLDER_1: &str = "<|image_1|>";
pub const PLACEHOLDER_2: &str = "<|image_2|>";

/// `<img><|image_1|></img> <img><|image_2|></img>`
pub const CANONICAL_IMAGE_BLOCK: &str =
    "<img><|image_1|></img> <img><|image_2|></img>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaskTag {
    Fusion,
    Control,
    Seg,
}

impl TaskTag {
    pub const ALL: [TaskTag; 3] = [TaskTag::Fusion, TaskTag::Control, TaskTag::Seg];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskTag::Fusion => "[FUSION]",
            TaskTag::Control => "[CONTROL]",
            TaskTag::Seg => "[SEG]",
        }
    }

    fn from_str(s: &str) -> Option<Self> {
        match s {
            "[FUSION]" => Some(TaskTag::Fusion),
            "[CONTROL]" => Some(TaskTag::Control),
            "[SEG]" => Some(TaskTag::Seg),
            _ => None,
        }
    }
}

/// The nine subtask tags: three fusion modes and six photometric controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Subtag {
    MultiModalities,
    MultiExposure,
    MultiFocus,
    Control(ControlTag),
}

impl Subtag {
    pub const ALL: [Subtag; 9] = [
        Subtag::MultiModalities,
        Subtag::MultiExposure,
        Subtag::MultiFocus,
        Subtag::Control(ControlTag::LightPlusPlus),
        Subtag::Control(ControlTag::LightPlus),
        Subtag::Control(ControlTag::LightMinus),
        Subtag::Control(ControlTag::LightMinusMinus),
        Subtag::Control(ControlTag::ContrastPlus),
        Subtag::Control(ControlTag::ContrastMinus),
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Subtag::MultiModalities => "<MULTI-MODALITIES>",
            Subtag::MultiExposure => "<MULTI-EXPOSURE>",
            Subtag::MultiFocus => "<MULTI-FOCUS>",
            Subtag::Control(c) => match c {
                ControlTag::LightPlusPlus => "<LIGHT++>",
                ControlTag::LightPlus => "<LIGHT+>",
                ControlTag::LightMinus => "<LIGHT->",
                ControlTag::LightMinusMinus => "<LIGHT-->",
                ControlTag::ContrastPlus => "<CONTRAST+>",
                ControlTag::ContrastMinus => "<CONTRAST->",
            },
        }
    }

    fn from_str(s: &str) -> Option<Self> {
        Subtag::ALL.iter().copied().find(|t| t.as_str() == s)
    }

    /// Which task tag this subtag belongs to.
    pub fn task(&self) -> TaskTag {
        match self {
            Subtag::MultiModalities | Subtag::MultiExposure | Subtag::MultiFocus => TaskTag::Fusion,
            Subtag::Control(_) => TaskTag::Control,
        }
    }
}

/// Parsed prompt. The two image placeholders are implicit: canonical prompts
/// keep them out of `instruction`; tag-free prompts may embed the wrapped
/// placeholders anywhere in the text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAst {
    pub task: Option<TaskTag>,
    pub subtask: Option<Subtag>,
    pub instruction: String,
}

impl PromptAst {
    pub fn new(task: Option<TaskTag>, subtask: Option<Subtag>, instruction: &str) -> Self {
        PromptAst {
            task,
            subtask,
            instruction: instruction.to_string(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(sub) = self.subtask {
            match self.task {
                None => {
                    return Err(PromptError::InvalidTagCombination(format!(
                        "subtag {} without a task tag",
                        sub.as_str()
                    )))
                }
                Some(TaskTag::Seg) => {
                    return Err(PromptError::InvalidTagCombination(format!(
                        "[SEG] takes no subtask, got {}",
                        sub.as_str()
                    )))
                }
                Some(task) => {
                    if sub.task() != task {
                        return Err(PromptError::InvalidTagCombination(format!(
                            "{} does not belong to {}",
                            sub.as_str(),
                            task.as_str()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Canonical string for an AST. Errors on invalid tag combinations.
pub fn render_prompt(ast: &PromptAst) -> Result<String> {
    ast.validate()?;
    let mut parts: Vec<&str> = Vec::new();
    if let Some(t) = ast.task {
        parts.push(t.as_str());
    }
    if let Some(s) = ast.subtask {
        parts.push(s.as_str());
    }
    let embeds = ast.instruction.contains(PLACEHOLDER_1);
    if !embeds {
        parts.push(CANONICAL_IMAGE_BLOCK);
    }
    if !ast.instruction.is_empty() {
        parts.push(&ast.instruction);
    }
    Ok(parts.join(" "))
}

/// True for `<ALL-CAPS+->` style tokens, the shape of our tag vocabulary.
fn looks_like_tag(inner: &str) -> bool {
    !inner.is_empty()
        && inner
            .chars()
            .all(|c| c.is_ascii_uppercase() || c == '-' || c == '+')
}

/// Parses a prompt string. Leading `[TAG]` / `<SUBTAG>` tokens are
/// recognized greedily; the remainder is the instruction. Both wrapped
/// image placeholders must be present, in order, exactly once.
pub fn parse_prompt(s: &str) -> Result<PromptAst> {
    let mut rest = s.trim_start();
    let mut task = None;
    let mut subtask = None;

    if rest.starts_with('[') {
        let Some(end) = rest.find(']') else {
            return Err(PromptError::UnknownTag(rest.to_string()));
        };
        let tok = &rest[..=end];
        task = Some(TaskTag::from_str(tok).ok_or_else(|| PromptError::UnknownTag(tok.into()))?);
        rest = rest[end + 1..].trim_start();
    }

    if rest.starts_with('<') {
        if let Some(end) = rest.find('>') {
            let tok = &rest[..=end];
            if let Some(sub) = Subtag::from_str(tok) {
                subtask = Some(sub);
                rest = rest[end + 1..].trim_start();
            } else if looks_like_tag(&rest[1..end]) {
                return Err(PromptError::UnknownTag(tok.into()));
            }
        }
    }

    let instruction = match rest.strip_prefix(CANONICAL_IMAGE_BLOCK) {
        Some(after) => {
            let instr = after.trim_start();
            if instr.contains(PLACEHOLDER_1) || instr.contains(PLACEHOLDER_2) {
                return Err(PromptError::DuplicatePlaceholder("<|image_k|>"));
            }
            instr.to_string()
        }
        None => {
            check_embedded_placeholders(rest)?;
            rest.to_string()
        }
    };

    let ast = PromptAst {
        task,
        subtask,
        instruction,
    };
    ast.validate()?;
    Ok(ast)
}

/// A non-canonical prompt must still carry `<img><|image_k|></img>` for
/// k = 1, 2, in order, exactly once each.
fn check_embedded_placeholders(text: &str) -> Result<()> {
    let mut positions = [0usize; 2];
    for (k, ph) in [PLACEHOLDER_1, PLACEHOLDER_2].iter().enumerate() {
        let count = text.matches(ph).count();
        if count == 0 {
            return Err(PromptError::MissingPlaceholder(if k == 0 {
                PLACEHOLDER_1
            } else {
                PLACEHOLDER_2
            }));
        }
        if count > 1 {
            return Err(PromptError::DuplicatePlaceholder(if k == 0 {
                PLACEHOLDER_1
            } else {
                PLACEHOLDER_2
            }));
        }
        let pos = text.find(ph).unwrap();
        let wrapped = text[..pos].ends_with(IMG_OPEN) && text[pos + ph.len()..].starts_with(IMG_CLOSE);
        if !wrapped {
            return Err(PromptError::MalformedImageWrapper(format!(
                "{ph} must appear as <img>{ph}</img>"
            )));
        }
        positions[k] = pos;
    }
    if positions[0] >= positions[1] {
        return Err(PromptError::MalformedImageWrapper(
            "<|image_1|> must precede <|image_2|>".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn render_canonical_fusion() {
        let ast = PromptAst::new(
            Some(TaskTag::Fusion),
            Some(Subtag::MultiExposure),
            "Fuse the images.",
        );
        assert_eq!(
            render_prompt(&ast).unwrap(),
            "[FUSION] <MULTI-EXPOSURE> <img><|image_1|></img> <img><|image_2|></img> Fuse the images."
        );
    }

    #[test]
    fn render_seg_without_subtask() {
        let ast = PromptAst::new(Some(TaskTag::Seg), None, "seg the cars");
        assert_eq!(
            render_prompt(&ast).unwrap(),
            "[SEG] <img><|image_1|></img> <img><|image_2|></img> seg the cars"
        );
    }

    #[test]
    fn render_rejects_invalid_combinations() {
        let bad = PromptAst::new(
            Some(TaskTag::Seg),
            Some(Subtag::Control(ControlTag::LightPlus)),
            "x",
        );
        assert!(matches!(
            render_prompt(&bad),
            Err(PromptError::InvalidTagCombination(_))
        ));
        let bad = PromptAst::new(Some(TaskTag::Fusion), Some(Subtag::Control(ControlTag::LightPlus)), "x");
        assert!(matches!(
            render_prompt(&bad),
            Err(PromptError::InvalidTagCombination(_))
        ));
        let bad = PromptAst::new(None, Some(Subtag::MultiFocus), "x");
        assert!(matches!(
            render_prompt(&bad),
            Err(PromptError::InvalidTagCombination(_))
        ));
    }

    #[test]
    fn parse_control_prompt() {
        let ast = parse_prompt(
            "[CONTROL] <LIGHT+> <img><|image_1|></img> <img><|image_2|></img> brighten",
        )
        .unwrap();
        assert_eq!(ast.task, Some(TaskTag::Control));
        assert_eq!(ast.subtask, Some(Subtag::Control(ControlTag::LightPlus)));
        assert_eq!(ast.instruction, "brighten");
    }

    #[test]
    fn parse_tag_free_prompt() {
        let ast =
            parse_prompt("Fuse the <img><|image_1|></img> and <img><|image_2|></img>.").unwrap();
        assert_eq!(ast.task, None);
        assert_eq!(ast.subtask, None);
        assert!(ast.instruction.contains(PLACEHOLDER_1));
    }

    #[test]
    fn parse_rejects_unknown_tags() {
        assert!(matches!(
            parse_prompt("[BOGUS] <img><|image_1|></img> <img><|image_2|></img> x"),
            Err(PromptError::UnknownTag(_))
        ));
        assert!(matches!(
            parse_prompt("[FUSION] <LIGT+> <img><|image_1|></img> <img><|image_2|></img> x"),
            Err(PromptError::UnknownTag(_))
        ));
    }

    #[test]
    fn parse_rejects_missing_or_malformed_placeholders() {
        assert!(matches!(
            parse_prompt("[FUSION] no images here"),
            Err(PromptError::MissingPlaceholder(_))
        ));
        assert!(matches!(
            parse_prompt("bare <|image_1|> and <img><|image_2|></img>"),
            Err(PromptError::MalformedImageWrapper(_))
        ));
        assert!(matches!(
            parse_prompt("<img><|image_2|></img> then <img><|image_1|></img>"),
            Err(PromptError::MalformedImageWrapper(_))
        ));
        assert!(matches!(
            parse_prompt("<img><|image_1|></img> <img><|image_1|></img> <img><|image_2|></img>"),
            Err(PromptError::DuplicatePlaceholder(_))
        ));
    }

    #[test]
    fn roundtrip_random_valid_asts() {
        let mut rng = Rng::seed_from(5);
        let words = ["fuse", "the", "images", "brighten", "cars", "keep", "detail"];
        for _ in 0..500 {
            let task = match rng.gen_range(4) {
                0 => None,
                1 => Some(TaskTag::Fusion),
                2 => Some(TaskTag::Control),
                _ => Some(TaskTag::Seg),
            };
            let subtask = match task {
                Some(TaskTag::Fusion) if rng.gen_bool(0.5) => {
                    Some(Subtag::ALL[rng.gen_range(3)])
                }
                Some(TaskTag::Control) if rng.gen_bool(0.5) => {
                    Some(Subtag::ALL[3 + rng.gen_range(6)])
                }
                _ => None,
            };
            let n = rng.gen_range(6);
            let instruction = (0..n)
                .map(|_| words[rng.gen_range(words.len())])
                .collect::<Vec<_>>()
                .join(" ");
            let ast = PromptAst::new(task, subtask, &instruction);
            let s = render_prompt(&ast).unwrap();
            let back = parse_prompt(&s).unwrap();
            assert_eq!(back, ast, "prompt: {s}");
        }
    }
}
