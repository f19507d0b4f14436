//! Byte-pair tokenizer with atomic extension tokens and digit splitting.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[pad]", "[bos]", "[eos]", "[unk]", "[sep]"];
pub const DEFAULT_BASE_VOCAB: usize = 4000;

/// Marks a word-initial space inside a symbol.
const SPACE: char = '\u{2581}';
const SEP_TEXT: &str = crate::corpus::TURN_SEPARATOR;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Special(u32),
    Extra(&'a str),
    Word(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "TokenizerData", try_from = "TokenizerData")]
pub struct Tokenizer {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    n_extra: usize,
    index: HashMap<String, u32>,
    merge_rank: HashMap<(String, String), usize>,
    /// Extension tokens, longest first.
    extras_by_len: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerData {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    n_extra: usize,
}

impl From<Tokenizer> for TokenizerData {
    fn from(t: Tokenizer) -> Self {
        TokenizerData {
            tokens: t.tokens,
            merges: t.merges,
            n_extra: t.n_extra,
        }
    }
}

impl TryFrom<TokenizerData> for Tokenizer {
    type Error = Error;

    fn try_from(d: TokenizerData) -> Result<Self> {
        if d.tokens.len() < SPECIALS.len() + d.n_extra || d.tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("tokenizer table lacks special tokens".into()));
        }
        Tokenizer::assemble(d.tokens, d.merges, d.n_extra)
    }
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges && self.n_extra == other.n_extra
    }
}

fn pretokenize<'a>(text: &str, extras_by_len: &'a [String]) -> Vec<Piece<'a>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(SEP_TEXT) {
            out.push(Piece::Special(SEP));
            rest = &rest[SEP_TEXT.len()..];
            continue;
        }
        if c == '<' {
            if let Some(x) = extras_by_len.iter().find(|x| rest.starts_with(x.as_str())) {
                out.push(Piece::Extra(x));
                rest = &rest[x.len()..];
                continue;
            }
        }
        let mut word = String::new();
        let mut chars = rest.char_indices().peekable();
        if c == ' ' {
            chars.next();
            if chars.peek().is_some_and(|&(_, n)| n.is_alphabetic()) {
                word.push(SPACE);
            } else {
                out.push(Piece::Word(" ".into()));
                rest = &rest[1..];
                continue;
            }
        }
        let mut end = rest.len();
        let mut took_letter = false;
        for (i, ch) in chars {
            if ch.is_alphabetic() {
                word.push(ch);
                took_letter = true;
            } else {
                if !took_letter && word.is_empty() {
                    word.push(ch);
                    end = i + ch.len_utf8();
                } else {
                    end = i;
                }
                break;
            }
        }
        out.push(Piece::Word(word));
        rest = &rest[end..];
    }
    out
}

fn symbols(word: &str) -> Vec<String> {
    word.chars().map(String::from).collect()
}

fn apply_merges(mut syms: Vec<String>, rank: &HashMap<(String, String), usize>) -> Vec<String> {
    loop {
        let best = syms
            .windows(2)
            .enumerate()
            .filter_map(|(i, w)| rank.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
            .min();
        let Some((_, i)) = best else { return syms };
        let merged = format!("{}{}", syms[i], syms[i + 1]);
        syms.splice(i..i + 2, [merged]);
    }
}

impl Tokenizer {
    fn assemble(tokens: Vec<String>, merges: Vec<(String, String)>, n_extra: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate token `{t}`")));
            }
        }
        let merge_rank = merges.iter().cloned().enumerate().map(|(r, m)| (m, r)).collect();
        let mut extras_by_len: Vec<String> = tokens[SPECIALS.len()..SPECIALS.len() + n_extra].to_vec();
        extras_by_len.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Ok(Tokenizer {
            tokens,
            merges,
            n_extra,
            index,
            merge_rank,
            extras_by_len,
        })
    }

    /// Learns merges on `train_texts`. `id_strings` only contribute their
    /// characters to the base inventory, so every id stays encodable.
    pub fn fit<S: AsRef<str>>(train_texts: &[S], id_strings: &[S], extra_vocab: &[String], base_vocab_size: usize) -> Result<Self> {
        if train_texts.is_empty() {
            return Err(Error::InvalidInput("tokenizer needs at least one training text".into()));
        }
        for x in extra_vocab {
            if !(x.starts_with('<') && x.ends_with('>') && x.len() > 2) {
                return Err(Error::InvalidInput(format!("extension token `{x}` is not angle-bracketed")));
            }
        }
        let mut extras_by_len = extra_vocab.to_vec();
        extras_by_len.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));

        let mut words: BTreeMap<String, u64> = BTreeMap::new();
        let mut alphabet: BTreeMap<char, ()> = BTreeMap::new();
        alphabet.insert(SPACE, ());
        for t in train_texts {
            for p in pretokenize(t.as_ref(), &extras_by_len) {
                if let Piece::Word(w) = p {
                    alphabet.extend(w.chars().map(|c| (c, ())));
                    *words.entry(w).or_insert(0) += 1;
                }
            }
        }
        for t in id_strings {
            for p in pretokenize(t.as_ref(), &extras_by_len) {
                if let Piece::Word(w) = p {
                    alphabet.extend(w.chars().map(|c| (c, ())));
                }
            }
        }
        if alphabet.len() > base_vocab_size {
            return Err(Error::config(
                "base_vocab_size",
                format!("{base_vocab_size} is below the character inventory of {}", alphabet.len()),
            ));
        }

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(extra_vocab.iter().cloned());
        tokens.extend(alphabet.keys().map(|c| c.to_string()));

        let mut corpus: Vec<(Vec<String>, u64)> = words
            .into_iter()
            .filter(|(w, _)| !w.chars().next().is_some_and(|c| c.is_ascii_digit()))
            .map(|(w, n)| (symbols(&w), n))
            .collect();
        let mut merges = Vec::new();
        while alphabet.len() + merges.len() < base_vocab_size {
            let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
            for (syms, n) in &corpus {
                for w in syms.windows(2) {
                    *counts.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += n;
                }
            }
            // Highest count; BTreeMap order breaks ties lexicographically.
            let Some((&(a, b), &n)) = counts.iter().rev().max_by(|x, y| x.1.cmp(y.1)) else { break };
            if n < 2 {
                break;
            }
            let pair = (a.to_string(), b.to_string());
            let merged = format!("{a}{b}");
            for (syms, _) in &mut corpus {
                let mut i = 0;
                while i + 1 < syms.len() {
                    if syms[i] == pair.0 && syms[i + 1] == pair.1 {
                        syms.splice(i..i + 2, [merged.clone()]);
                    }
                    i += 1;
                }
            }
            if !tokens.contains(&merged) {
                tokens.push(merged);
            }
            merges.push(pair);
        }
        Self::assemble(tokens, merges, extra_vocab.len())
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn extra_vocab(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..SPECIALS.len() + self.n_extra]
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for p in pretokenize(text, &self.extras_by_len) {
            match p {
                Piece::Special(id) => out.push(id),
                Piece::Extra(x) => out.push(self.index[x]),
                Piece::Word(w) => {
                    let syms = if w.chars().next().is_some_and(|c| c.is_ascii_digit()) {
                        symbols(&w)
                    } else {
                        apply_merges(symbols(&w), &self.merge_rank)
                    };
                    out.extend(syms.iter().map(|s| self.index.get(s).copied().unwrap_or(UNK)));
                }
            }
        }
        out
    }

    /// Inverse of [`Self::encode`]; pad, bos and eos are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                SEP => s.push_str(SEP_TEXT),
                _ => match self.tokens.get(id as usize) {
                    Some(t) => s.extend(t.chars().map(|c| if c == SPACE { ' ' } else { c })),
                    None => s.push_str(SPECIALS[UNK as usize]),
                },
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic_ids::lexicon;

    fn texts() -> Vec<String> {
        ["rock anthems", "gym rock", "chill rock anthems | more 80s please", "rocking the gym"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn semantic_ids_are_atomic() {
        let lex = lexicon(8);
        let t = Tokenizer::fit(&texts(), &[], &lex, 200).unwrap();
        let ids = t.encode("<+4><-0><+7>");
        assert_eq!(ids.len(), 3);
        assert_eq!(t.decode(&ids), "<+4><-0><+7>");
        assert_eq!(t.encode("<pad>").len(), 1);
        assert_eq!(t.vocab_size(), SPECIALS.len() + lex.len() + (t.vocab_size() - SPECIALS.len() - lex.len()));
    }

    #[test]
    fn digits_split() {
        let ids_text = vec!["1001_1001".to_string()];
        let t = Tokenizer::fit(&texts(), &ids_text, &[], 200).unwrap();
        let ids = t.encode("1001_1001");
        let toks: Vec<&str> = ids.iter().map(|&i| t.token(i).unwrap()).collect();
        assert_eq!(toks, ["1", "0", "0", "1", "_", "1", "0", "0", "1"]);
    }

    #[test]
    fn merges_learned_and_round_trip() {
        let t = Tokenizer::fit(&texts(), &[], &[], 200).unwrap();
        let ids = t.encode("rock anthems");
        assert!(ids.len() < "rock anthems".len(), "{ids:?}");
        for s in texts() {
            assert_eq!(t.decode(&t.encode(&s)), s);
        }
        let ids = t.encode("chill rock | gym");
        assert!(ids.contains(&SEP));
    }

    #[test]
    fn unknown_chars_map_to_unk() {
        let t = Tokenizer::fit(&texts(), &[], &[], 200).unwrap();
        assert!(t.encode("rock ☃").contains(&UNK));
    }

    #[test]
    fn budget_below_inventory_is_an_error() {
        assert!(Tokenizer::fit(&texts(), &[], &[], 5).is_err());
        assert!(Tokenizer::fit::<String>(&[], &[], &[], 100).is_err());
    }

    #[test]
    fn deterministic_and_serializable() {
        let extra = vec!["<1042>".to_string()];
        let a = Tokenizer::fit(&texts(), &[], &extra, 100).unwrap();
        let b = Tokenizer::fit(&texts(), &[], &extra, 100).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        let c: Tokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(a, c);
        assert_eq!(c.encode("<1042>_1000")[0], c.id("<1042>").unwrap());
    }

    proptest::proptest! {
        #[test]
        fn round_trip_on_inventory_strings(s in "[a-z0-9 _<>+-]{0,30}") {
            let ids = vec!["abcdefghijklmnopqrstuvwxyz0123456789 _<>+-".to_string()];
            let t = Tokenizer::fit(&texts(), &ids, &lexicon(4), 200).unwrap();
            proptest::prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }
    }
}
