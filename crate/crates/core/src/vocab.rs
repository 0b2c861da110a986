//! Whitespace-token vocabulary with the reserved specials the objectives
//! need. Immutable after build; ids 0-4 are always the five specials.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]"];

#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds from a line iterator. Tokens below `min_freq` are dropped,
    /// the rest sorted by (frequency desc, token asc) after the specials,
    /// truncated to `max_size` total entries. Corpus tokens that collide
    /// with a reserved literal are never admitted (they encode as [UNK]).
    pub fn build<I, S>(corpus_lines: I, min_freq: usize, max_size: usize, lang_tags: &[String]) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_freq < 1 {
            return Err(Error::Vocab("min_freq must be >= 1".into()));
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        let mut saw_any = false;
        for line in corpus_lines {
            for tok in line.as_ref().split_whitespace() {
                saw_any = true;
                *freq.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(Error::Vocab("empty corpus".into()));
        }
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for tag in lang_tags {
            let tok = format!("[{}]", tag);
            if !id_to_token.contains(&tok) {
                id_to_token.push(tok);
            }
        }
        let reserved: Vec<&str> = SPECIALS.to_vec();
        let mut candidates: Vec<(String, u64)> = freq
            .into_iter()
            .filter(|(t, c)| *c as usize >= min_freq && !reserved.contains(&t.as_str()) && !id_to_token.contains(t))
            .collect();
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (tok, _) in candidates {
            if id_to_token.len() >= max_size {
                break;
            }
            id_to_token.push(tok);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { token_to_id, id_to_token })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Whitespace-splits and maps tokens, OOV -> [UNK]. Reserved literals
    /// appearing in text also map to [UNK]: plain text cannot mint specials.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| {
                if SPECIALS.contains(&t) {
                    UNK
                } else {
                    self.token_to_id.get(t).copied().unwrap_or(UNK)
                }
            })
            .collect()
    }

    /// Joins tokens with single spaces; specials render literally.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self
                .id_to_token
                .get(id)
                .ok_or_else(|| Error::Vocab(format!("id {} out of range (size {})", id, self.size())))?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    /// One token per line, line number == id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for tok in &self.id_to_token {
            writeln!(f, "{}", tok)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let f = std::fs::File::open(path)?;
        let mut id_to_token = Vec::new();
        for line in BufReader::new(f).lines() {
            id_to_token.push(line?);
        }
        if id_to_token.len() < SPECIALS.len() {
            return Err(Error::Vocab(format!("{}: fewer than {} entries", path.display(), SPECIALS.len())));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if id_to_token[i] != *s {
                return Err(Error::Vocab(format!(
                    "{}: line {} must be {}, found {:?}",
                    path.display(),
                    i,
                    s,
                    id_to_token[i]
                )));
            }
        }
        let token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(Error::Vocab(format!("{}: duplicate tokens", path.display())));
        }
        Ok(Vocab { token_to_id, id_to_token })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_ordering_after_specials() {
        let v = Vocab::build(["a a b"], 1, 1000, &[]).unwrap();
        assert_eq!(v.size(), 7);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
    }

    #[test]
    fn min_freq_filters_and_oov_maps_to_unk() {
        let v = Vocab::build(["a b", "a"], 2, 1000, &[]).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.encode("a b"), vec![5, UNK]);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(Vocab::build(Vec::<&str>::new(), 1, 100, &[]).is_err());
        assert!(Vocab::build(["   ", ""], 1, 100, &[]).is_err());
    }

    #[test]
    fn encode_decode_trivial() {
        let v = Vocab::build(["a a b"], 1, 1000, &[]).unwrap();
        assert_eq!(v.encode(""), Vec::<usize>::new());
        assert_eq!(v.encode("a b"), vec![5, 6]);
        assert_eq!(v.decode(&[5, 6]).unwrap(), "a b");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn reserved_collision_maps_to_unk() {
        let v = Vocab::build(["x [MASK] y"], 1, 1000, &[]).unwrap();
        // only x and y got fresh ids; the literal string stays the special
        assert_eq!(v.size(), 7);
        assert_eq!(v.id("[MASK]"), Some(MASK));
        let x = v.id("x").unwrap();
        let y = v.id("y").unwrap();
        assert_eq!(v.encode("x [MASK] y"), vec![x, UNK, y]);
    }

    #[test]
    fn max_size_caps_vocab() {
        let v = Vocab::build(["a b c d e f"], 1, 7, &[]).unwrap();
        assert_eq!(v.size(), 7);
    }

    #[test]
    fn language_tags_follow_specials() {
        let v = Vocab::build(["a"], 1, 100, &["en".to_string(), "de".to_string()]).unwrap();
        assert_eq!(v.id("[en]"), Some(5));
        assert_eq!(v.id("[de]"), Some(6));
        assert_eq!(v.id("a"), Some(7));
    }

    #[test]
    fn save_load_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["c b a a b c c"], 1, 100, &[]).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.size(), v.size());
        for id in 0..v.size() {
            assert_eq!(loaded.token(id), v.token(id));
        }
        // corrupt the specials head
        std::fs::write(&path, "[PAD]\n[BOS]\n[EOS]\n[UNK]\nnope\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }
}
