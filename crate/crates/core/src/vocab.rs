//! Character vocabulary with reserved blank / SOS / EOS / UNK ids.
//!
//! The blank sits at id 0 for the alignment losses; the three special
//! tokens follow, and real characters are assigned dense ids sorted by
//! codepoint so vocabularies are reproducible across runs.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const BLANK_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
/// Number of reserved ids before the first real character.
pub const RESERVED: usize = 4;

/// Character-id sequence; never contains the blank id.
pub type TokenSequence = Vec<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    chars: Vec<char>,
    to_id: HashMap<char, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from transcript lines: every distinct character
    /// plus the four reserved symbols.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set = BTreeSet::new();
        let mut saw_any_line = false;
        for line in corpus {
            saw_any_line = true;
            set.extend(line.chars());
        }
        if !saw_any_line {
            return Err(Error::invalid("vocab: empty corpus"));
        }
        Ok(Self::from_chars(set.into_iter().collect()))
    }

    /// Sorted-by-codepoint character list becomes ids `RESERVED..`.
    pub fn from_chars(mut chars: Vec<char>) -> Self {
        chars.sort_unstable();
        chars.dedup();
        let to_id = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, RESERVED + i))
            .collect();
        Vocabulary { chars, to_id }
    }

    /// Total number of ids including the reserved block.
    pub fn size(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id_of(&self, c: char) -> usize {
        self.to_id.get(&c).copied().unwrap_or(UNK_ID)
    }

    /// Out-of-vocabulary characters map to UNK.
    pub fn encode(&self, s: &str) -> TokenSequence {
        s.chars().map(|c| self.id_of(c)).collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in tokens {
            if id >= self.size() {
                return Err(Error::invalid(format!(
                    "decode: id {id} out of range (vocab size {})",
                    self.size()
                )));
            }
            match id {
                BLANK_ID => out.push('\u{2205}'), // should not appear in token sequences
                SOS_ID => out.push_str("<s>"),
                EOS_ID => out.push_str("</s>"),
                UNK_ID => out.push('\u{fffd}'),
                _ => out.push(self.chars[id - RESERVED]),
            }
        }
        Ok(out)
    }

    /// One character per line; line number = id offset past the reserved block.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for c in &self.chars {
            let _ = writeln!(s, "{c}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        let mut chars = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::data(
                        path.display().to_string(),
                        format!("line {}: expected exactly one character", lineno + 1),
                    ))
                }
            }
        }
        Ok(Self::from_chars(chars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counting_includes_reserved_block() {
        let v = Vocabulary::build(["ab", "bc"]).unwrap();
        assert_eq!(v.size(), 3 + RESERVED);
    }

    #[test]
    fn duplicate_lines_do_not_change_vocab() {
        let a = Vocabulary::build(["abc", "abc", "abc"]).unwrap();
        let b = Vocabulary::build(["abc"]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Vocabulary::build(std::iter::empty::<&str>()).is_err());
    }

    #[test]
    fn round_trip_on_in_vocab_text() {
        let v = Vocabulary::build(["ab"]).unwrap();
        let ids = v.encode("ab");
        assert_eq!(ids, vec![RESERVED, RESERVED + 1]);
        assert_eq!(v.decode(&ids).unwrap(), "ab");
    }

    #[test]
    fn unseen_char_maps_to_unk() {
        let v = Vocabulary::build(["ab"]).unwrap();
        assert_eq!(v.encode("axb"), vec![RESERVED, UNK_ID, RESERVED + 1]);
    }

    #[test]
    fn empty_string_round_trips() {
        let v = Vocabulary::build(["ab"]).unwrap();
        assert_eq!(v.encode(""), Vec::<usize>::new());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let v = Vocabulary::build(["ab"]).unwrap();
        assert!(v.decode(&[v.size()]).is_err());
    }

    #[test]
    fn reserved_ids_are_distinct_and_fixed() {
        let ids = [BLANK_ID, SOS_ID, EOS_ID, UNK_ID];
        let set: std::collections::HashSet<_> = ids.iter().collect();
        assert_eq!(set.len(), 4);
        assert_eq!(BLANK_ID, 0);
    }

    #[test]
    fn file_round_trip_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["cba", "ヤマ"]).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        // sorted by codepoint
        let mut sorted = v.chars().to_vec();
        sorted.sort_unstable();
        assert_eq!(v.chars(), sorted.as_slice());
    }

    proptest! {
        #[test]
        fn prop_round_trip_identity(s in "[a-z ]{0,40}") {
            let v = Vocabulary::build(["abcdefghijklmnopqrstuvwxyz "]).unwrap();
            let ids = v.encode(&s);
            prop_assert!(ids.iter().all(|&i| i != BLANK_ID));
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }
    }
}
