//! Byte-level toy tokenizer with frozen special tokens.
//!
//! Vocabulary = 256 byte tokens plus the specials listed in
//! `assets/vocab.v1.txt`, one per line; a special on 0-based line `k` gets
//! id `256 + k`. Specials match longest-first, so `<LIGHT-->` wins over
//! `<LIGHT->`.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::{PromptError, Result};

pub const VOCAB_V1: &str = include_str!("../../assets/vocab.v1.txt");

const BYTE_TOKENS: u32 = 256;

#[derive(Debug)]
pub struct Vocab {
    specials: Vec<String>,
    by_text: HashMap<String, u32>,
    /// Special indices ordered by decreasing byte length for longest-first scan.
    scan_order: Vec<usize>,
}

impl Vocab {
    pub fn from_lines(text: &str) -> Result<Self> {
        let specials: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if specials.is_empty() {
            return Err(PromptError::BadVocab("no special tokens".into()));
        }
        let mut by_text = HashMap::new();
        for (i, s) in specials.iter().enumerate() {
            if !s.is_ascii() {
                return Err(PromptError::BadVocab(format!("non-ascii special `{s}`")));
            }
            if by_text.insert(s.clone(), BYTE_TOKENS + i as u32).is_some() {
                return Err(PromptError::BadVocab(format!("duplicate special `{s}`")));
            }
        }
        let mut scan_order: Vec<usize> = (0..specials.len()).collect();
        scan_order.sort_by_key(|&i| std::cmp::Reverse(specials[i].len()));
        Ok(Vocab {
            specials,
            by_text,
            scan_order,
        })
    }

    /// The crate's frozen v1 vocabulary.
    pub fn builtin() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| Vocab::from_lines(VOCAB_V1).expect("builtin vocab"))
    }

    pub fn size(&self) -> usize {
        BYTE_TOKENS as usize + self.specials.len()
    }

    pub fn id_of(&self, special: &str) -> Option<u32> {
        self.by_text.get(special).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= BYTE_TOKENS && (id - BYTE_TOKENS) < self.specials.len() as u32
    }

    pub fn special_text(&self, id: u32) -> Option<&str> {
        if self.is_special(id) {
            Some(&self.specials[(id - BYTE_TOKENS) as usize])
        } else {
            None
        }
    }

    /// Longest-first special matching; everything else is byte tokens.
    pub fn encode(&self, s: &str) -> Vec<u32> {
        let bytes = s.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            for &si in &self.scan_order {
                let sp = self.specials[si].as_bytes();
                if bytes[i..].starts_with(sp) {
                    ids.push(BYTE_TOKENS + si as u32);
                    i += sp.len();
                    continue 'outer;
                }
            }
            ids.push(u32::from(bytes[i]));
            i += 1;
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < BYTE_TOKENS {
                bytes.push(id as u8);
            } else if let Some(text) = self.special_text(id) {
                bytes.extend_from_slice(text.as_bytes());
            } else {
                return Err(PromptError::BadSequence(format!("id {id} out of vocab")));
            }
        }
        String::from_utf8(bytes).map_err(|e| PromptError::BadSequence(e.to_string()))
    }
}

/// Tokenize with the builtin vocabulary.
pub fn tokenize(s: &str) -> Vec<u32> {
    Vocab::builtin().encode(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{render_prompt, PromptAst, Subtag, TaskTag};
    use crate::rng::Rng;

    #[test]
    fn empty_string_empty_sequence() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn specials_are_atomic() {
        let v = Vocab::builtin();
        assert_eq!(tokenize("<img>").len(), 1);
        assert_eq!(tokenize("<img>")[0], v.id_of("<img>").unwrap());
        // longest-first: <LIGHT--> is one token, not <LIGHT-> plus a byte
        assert_eq!(tokenize("<LIGHT-->").len(), 1);
        assert_eq!(tokenize("ab<img>").len(), 3);
    }

    #[test]
    fn ids_are_frozen() {
        let v = Vocab::builtin();
        assert_eq!(v.id_of("[FUSION]"), Some(256));
        assert_eq!(v.id_of("<img>"), Some(268));
        assert_eq!(v.id_of("</img>"), Some(269));
        assert_eq!(v.id_of("<|image_1|>"), Some(270));
        assert_eq!(v.id_of("<|image_2|>"), Some(271));
        assert_eq!(v.id_of("<|null|>"), Some(272));
        assert_eq!(v.id_of("<|time|>"), Some(273));
        assert_eq!(v.id_of("<|pad|>"), Some(274));
        assert_eq!(v.size(), 275);
    }

    #[test]
    fn decode_inverts_encode() {
        let v = Vocab::builtin();
        for s in [
            "",
            "plain text",
            "[FUSION] <MULTI-FOCUS> <img><|image_1|></img> x",
            "unicode: héllo ≤ wörld",
            "<LIGHT-><LIGHT-->",
        ] {
            assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn distinct_prompts_distinct_tokens() {
        let v = Vocab::builtin();
        let mut rng = Rng::seed_from(17);
        let mut seen: Vec<(String, Vec<u32>)> = Vec::new();
        for i in 0..200 {
            let task = TaskTag::ALL[rng.gen_range(3)];
            let sub = match task {
                TaskTag::Fusion => Some(Subtag::ALL[rng.gen_range(3)]),
                TaskTag::Control => Some(Subtag::ALL[3 + rng.gen_range(6)]),
                TaskTag::Seg => None,
            };
            let ast = PromptAst::new(Some(task), sub, &format!("instruction {i}"));
            let s = render_prompt(&ast).unwrap();
            let ids = v.encode(&s);
            for (other, other_ids) in &seen {
                if other != &s {
                    assert_ne!(other_ids, &ids, "{other} vs {s}");
                }
            }
            seen.push((s, ids));
        }
    }
}
