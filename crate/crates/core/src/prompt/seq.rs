//! Token-sequence layout and the hybrid attention mask.
//!
//! A full model input is laid out as: prompt text with each image
//! placeholder expanded to `<img>` + condition-patch span + `</img>`,
//! then the wrapped noisy-image span, then a single timestep slot.
//! The wrapper tokens remain ordinary (causal) text; only the patch
//! spans get bidirectional visibility.

use super::{PromptError, Result, Vocab, IMG_CLOSE, IMG_OPEN, PLACEHOLDER_1, PLACEHOLDER_2};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text { start: usize, len: usize },
    CondImage { index: usize, start: usize, len: usize },
    NoisyImage { start: usize, len: usize },
    Timestep { pos: usize },
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        match *self {
            Segment::Text { start, len } => start..start + len,
            Segment::CondImage { start, len, .. } => start..start + len,
            Segment::NoisyImage { start, len } => start..start + len,
            Segment::Timestep { pos } => pos..pos + 1,
        }
    }
}

/// Ordered, disjoint segments covering `[0, len)`; the timestep slot is
/// always last and exactly one noisy span exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub segments: Vec<Segment>,
    pub len: usize,
}

impl SequenceLayout {
    /// Spans with intra-image bidirectional attention: both condition
    /// images and the noisy image.
    pub fn image_spans(&self) -> Vec<std::ops::Range<usize>> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::CondImage { .. } | Segment::NoisyImage { .. } => Some(s.range()),
                _ => None,
            })
            .collect()
    }

    pub fn noisy_span(&self) -> Option<std::ops::Range<usize>> {
        self.segments.iter().find_map(|s| match s {
            Segment::NoisyImage { .. } => Some(s.range()),
            _ => None,
        })
    }

    pub fn timestep_pos(&self) -> Option<usize> {
        self.segments.iter().find_map(|s| match s {
            Segment::Timestep { pos } => Some(*pos),
            _ => None,
        })
    }

    /// Checks the structural invariants; used by tests and on assembly.
    pub fn is_well_formed(&self) -> bool {
        let mut next = 0;
        let mut noisy = 0;
        let mut time_last = false;
        for s in &self.segments {
            let r = s.range();
            if r.start != next || r.is_empty() {
                return false;
            }
            next = r.end;
            match s {
                Segment::NoisyImage { .. } => noisy += 1,
                Segment::Timestep { pos } => time_last = *pos == self.len - 1,
                _ => {}
            }
        }
        next == self.len && noisy == 1 && time_last
    }
}

/// Layout plus the text token at each position (`None` on patch/time slots).
#[derive(Debug, Clone)]
pub struct AssembledSequence {
    pub layout: SequenceLayout,
    pub tokens: Vec<Option<u32>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Slot {
    Text(u32),
    Cond(usize),
    Noisy,
    Time,
}

/// Expands the prompt token stream into the full model sequence.
///
/// Each placeholder is replaced in place by its condition span; wrappers
/// already present around the placeholder are reused, bare placeholders get
/// wrappers inserted. The wrapped noisy span and the timestep slot are
/// appended at the end.
pub fn assemble_sequence(
    prompt_tokens: &[u32],
    cond_lens: [usize; 2],
    noisy_len: usize,
    vocab: &Vocab,
) -> Result<AssembledSequence> {
    if cond_lens[0] == 0 || cond_lens[1] == 0 || noisy_len == 0 {
        return Err(PromptError::BadSequence(
            "image token spans must be non-empty".into(),
        ));
    }
    let ph = [
        vocab
            .id_of(PLACEHOLDER_1)
            .ok_or_else(|| PromptError::BadVocab(PLACEHOLDER_1.into()))?,
        vocab
            .id_of(PLACEHOLDER_2)
            .ok_or_else(|| PromptError::BadVocab(PLACEHOLDER_2.into()))?,
    ];
    let img_open = vocab
        .id_of(IMG_OPEN)
        .ok_or_else(|| PromptError::BadVocab(IMG_OPEN.into()))?;
    let img_close = vocab
        .id_of(IMG_CLOSE)
        .ok_or_else(|| PromptError::BadVocab(IMG_CLOSE.into()))?;

    for (k, &id) in ph.iter().enumerate() {
        let name = if k == 0 { PLACEHOLDER_1 } else { PLACEHOLDER_2 };
        match prompt_tokens.iter().filter(|&&t| t == id).count() {
            0 => return Err(PromptError::MissingPlaceholder(name)),
            1 => {}
            _ => return Err(PromptError::DuplicatePlaceholder(name)),
        }
    }

    let mut slots: Vec<Slot> = Vec::with_capacity(prompt_tokens.len() + 64);
    let mut i = 0;
    while i < prompt_tokens.len() {
        let tok = prompt_tokens[i];
        if let Some(k) = ph.iter().position(|&p| p == tok) {
            let wrapped = i > 0
                && prompt_tokens[i - 1] == img_open
                && prompt_tokens.get(i + 1) == Some(&img_close);
            if !wrapped {
                slots.push(Slot::Text(img_open));
            }
            slots.extend(std::iter::repeat(Slot::Cond(k)).take(cond_lens[k]));
            if !wrapped {
                slots.push(Slot::Text(img_close));
            }
        } else {
            slots.push(Slot::Text(tok));
        }
        i += 1;
    }
    slots.push(Slot::Text(img_open));
    slots.extend(std::iter::repeat(Slot::Noisy).take(noisy_len));
    slots.push(Slot::Text(img_close));
    slots.push(Slot::Time);

    // group consecutive slots of the same kind into segments
    let mut segments = Vec::new();
    let mut tokens = Vec::with_capacity(slots.len());
    let mut pos = 0;
    while pos < slots.len() {
        let start = pos;
        match slots[pos] {
            Slot::Text(_) => {
                while pos < slots.len() && matches!(slots[pos], Slot::Text(_)) {
                    if let Slot::Text(id) = slots[pos] {
                        tokens.push(Some(id));
                    }
                    pos += 1;
                }
                segments.push(Segment::Text {
                    start,
                    len: pos - start,
                });
            }
            Slot::Cond(k) => {
                while pos < slots.len() && slots[pos] == Slot::Cond(k) {
                    tokens.push(None);
                    pos += 1;
                }
                segments.push(Segment::CondImage {
                    index: k,
                    start,
                    len: pos - start,
                });
            }
            Slot::Noisy => {
                while pos < slots.len() && slots[pos] == Slot::Noisy {
                    tokens.push(None);
                    pos += 1;
                }
                segments.push(Segment::NoisyImage {
                    start,
                    len: pos - start,
                });
            }
            Slot::Time => {
                tokens.push(None);
                pos += 1;
                segments.push(Segment::Timestep { pos: start });
            }
        }
    }

    let layout = SequenceLayout {
        segments,
        len: slots.len(),
    };
    debug_assert!(layout.is_well_formed());
    Ok(AssembledSequence { layout, tokens })
}

/// n×n visibility matrix: `true` means query row i may attend key column j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttnMask {
    /// All-visible mask, used to probe that the hybrid rule is load-bearing.
    pub fn full(n: usize) -> Self {
        AttnMask {
            n,
            bits: vec![true; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.bits
    }
}

/// mask[i][j] = (j ≤ i) OR (i and j lie in the same image span).
pub fn build_attention_mask(layout: &SequenceLayout) -> AttnMask {
    let n = layout.len;
    let mut bits = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            bits[i * n + j] = true;
        }
    }
    for span in layout.image_spans() {
        for i in span.clone() {
            for j in span.clone() {
                bits[i * n + j] = true;
            }
        }
    }
    AttnMask { n, bits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::tokenize;
    use crate::rng::Rng;

    fn assemble(text: &str, cond: [usize; 2], noisy: usize) -> AssembledSequence {
        assemble_sequence(&tokenize(text), cond, noisy, Vocab::builtin()).unwrap()
    }

    #[test]
    fn length_arithmetic() {
        // 3 text tokens plus bare placeholders: 3 + (1+4+1)*2 + (1+4+1) + 1 = 22
        let toks = vec![97, 270, 98, 271, 99];
        let seq = assemble_sequence(&toks, [4, 4], 4, Vocab::builtin()).unwrap();
        assert_eq!(seq.layout.len, 22);
        assert!(seq.layout.is_well_formed());
        assert_eq!(seq.layout.timestep_pos(), Some(21));
    }

    #[test]
    fn wrapped_placeholders_reuse_wrappers() {
        let seq = assemble("<img><|image_1|></img> <img><|image_2|></img>", [4, 4], 4);
        // <img> span </img> SP <img> span </img> <img> noisy </img> time
        assert_eq!(seq.layout.len, 1 + 4 + 1 + 1 + 1 + 4 + 1 + 1 + 4 + 1 + 1);
        let spans = seq.layout.image_spans();
        assert_eq!(spans.len(), 3);
        assert_eq!(spans[0], 1..5);
        assert_eq!(spans[1], 8..12);
        assert_eq!(spans[2], 14..18);
    }

    #[test]
    fn empty_instruction_is_valid() {
        let seq = assemble("<img><|image_1|></img> <img><|image_2|></img>", [2, 2], 2);
        assert!(seq.layout.is_well_formed());
        assert_eq!(seq.layout.timestep_pos(), Some(seq.layout.len - 1));
    }

    #[test]
    fn duplicate_placeholder_rejected() {
        let toks = tokenize("<img><|image_1|></img> <img><|image_1|></img> <img><|image_2|></img>");
        assert!(matches!(
            assemble_sequence(&toks, [2, 2], 2, Vocab::builtin()),
            Err(PromptError::DuplicatePlaceholder(_))
        ));
    }

    #[test]
    fn mask_pure_text_is_causal() {
        // no text-only layouts exist end-to-end, but the rule must reduce to
        // causal when no image span covers (i, j)
        let seq = assemble("abc <img><|image_1|></img> <img><|image_2|></img>", [1, 1], 1);
        let mask = build_attention_mask(&seq.layout);
        let spans = seq.layout.image_spans();
        for i in 0..mask.n() {
            for j in 0..mask.n() {
                let same_img = spans.iter().any(|s| s.contains(&i) && s.contains(&j));
                if !same_img {
                    assert_eq!(mask.visible(i, j), j <= i);
                }
            }
        }
    }

    #[test]
    fn mask_enumerated_small_case() {
        // layout: text 0, cond span {1,2}, time 3
        let layout = SequenceLayout {
            segments: vec![
                Segment::Text { start: 0, len: 1 },
                Segment::CondImage {
                    index: 0,
                    start: 1,
                    len: 2,
                },
                Segment::NoisyImage { start: 3, len: 1 },
                Segment::Timestep { pos: 4 },
            ],
            len: 5,
        };
        let mask = build_attention_mask(&layout);
        // row 1 sees {0,1,2}: causal plus its image partner ahead
        assert!(mask.visible(1, 0) && mask.visible(1, 1) && mask.visible(1, 2));
        assert!(!mask.visible(1, 3));
        // row 2 sees {0,1,2}
        assert!(mask.visible(2, 0) && mask.visible(2, 1) && mask.visible(2, 2));
        // last row sees everything
        for j in 0..5 {
            assert!(mask.visible(4, j));
        }
    }

    #[test]
    fn image1_never_sees_image2() {
        let seq = assemble("<img><|image_1|></img> <img><|image_2|></img> x", [3, 3], 3);
        let mask = build_attention_mask(&seq.layout);
        let spans = seq.layout.image_spans();
        let (s1, s2) = (spans[0].clone(), spans[1].clone());
        for i in s1.clone() {
            for j in s2.clone() {
                assert!(!mask.visible(i, j), "image1 token {i} sees image2 token {j}");
            }
        }
        for i in s2 {
            for j in s1.clone() {
                assert!(mask.visible(i, j), "image2 token {i} blind to image1 token {j}");
            }
        }
    }

    #[test]
    fn mask_matches_bruteforce_on_random_layouts() {
        let mut rng = Rng::seed_from(23);
        for _ in 0..200 {
            let text = "fuse <img><|image_1|></img> <img><|image_2|></img> now";
            let c0 = 1 + rng.gen_range(6);
            let c1 = 1 + rng.gen_range(6);
            let nz = 1 + rng.gen_range(6);
            let seq = assemble(text, [c0, c1], nz);
            let mask = build_attention_mask(&seq.layout);
            let spans = seq.layout.image_spans();
            for i in 0..mask.n() {
                for j in 0..mask.n() {
                    let expect =
                        j <= i || spans.iter().any(|s| s.contains(&i) && s.contains(&j));
                    assert_eq!(mask.visible(i, j), expect);
                }
            }
        }
    }

    #[test]
    fn diagonal_always_visible() {
        let seq = assemble("x <img><|image_1|></img> <img><|image_2|></img>", [2, 3], 4);
        let mask = build_attention_mask(&seq.layout);
        for i in 0..mask.n() {
            assert!(mask.visible(i, i));
        }
    }
}
