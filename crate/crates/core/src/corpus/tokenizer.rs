//! Closed-vocabulary word tokenizer for template instructions.

use std::fmt;

use crate::error::{CoreError, Result};

pub const N_TOK: usize = 8;
pub const VOCAB_SIZE: usize = 48;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Words used by the instruction templates, in id order after the three
/// specials. Ids past the template words are reserved and never produced.
const WORDS: [&str; 19] = [
    "make", "the", "background", "add", "a", "remove", "turn", "into", "square", "circle", "triangle", "black",
    "white", "red", "green", "blue", "yellow", "purple", "orange",
];

const FIRST_WORD: usize = 3;

pub fn vocab_word(id: usize) -> Option<&'static str> {
    match id {
        PAD => Some("<pad>"),
        BOS => Some("<bos>"),
        EOS => Some("<eos>"),
        i if (FIRST_WORD..FIRST_WORD + WORDS.len()).contains(&i) => Some(WORDS[i - FIRST_WORD]),
        _ => None,
    }
}

pub fn word_id(word: &str) -> Option<usize> {
    WORDS.iter().position(|w| *w == word).map(|i| i + FIRST_WORD)
}

/// `[BOS, w.., EOS, PAD..]`, always exactly `N_TOK` ids.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tokens(pub [usize; N_TOK]);

impl Tokens {
    pub fn ids(&self) -> &[usize; N_TOK] {
        &self.0
    }

    /// Checks the BOS-first / EOS-terminated / PAD-suffix layout.
    pub fn is_well_formed(&self) -> bool {
        if self.0[0] != BOS {
            return false;
        }
        let Some(eos) = self.0.iter().position(|&t| t == EOS) else {
            return false;
        };
        self.0[1..eos].iter().all(|&t| t != PAD && t != BOS && t < VOCAB_SIZE)
            && self.0[eos + 1..].iter().all(|&t| t == PAD)
    }

    /// Number of non-PAD positions.
    pub fn len_non_pad(&self) -> usize {
        self.0.iter().filter(|&&t| t != PAD).count()
    }

    pub fn to_csv(&self) -> String {
        self.0.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn from_csv(s: &str) -> Result<Tokens> {
        let ids: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CoreError::Invalid(format!("bad token list `{s}`: {e}")))?;
        let arr: [usize; N_TOK] = ids
            .try_into()
            .map_err(|v: Vec<usize>| CoreError::Invalid(format!("expected {N_TOK} tokens, got {}", v.len())))?;
        if let Some(t) = arr.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(CoreError::Invalid(format!("token id {t} outside vocabulary")));
        }
        Ok(Tokens(arr))
    }
}

impl fmt::Debug for Tokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tokens({:?})", detokenize(self))
    }
}

impl fmt::Display for Tokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&detokenize(self))
    }
}

/// Words past `N_TOK - 2` are dropped and EOS takes the last slot.
pub fn tokenize(text: &str) -> Result<Tokens> {
    let mut ids = [PAD; N_TOK];
    ids[0] = BOS;
    let mut n = 1;
    for w in text.split_whitespace() {
        let id = word_id(w).ok_or_else(|| CoreError::OutOfVocabulary(w.to_string()))?;
        if n < N_TOK - 1 {
            ids[n] = id;
            n += 1;
        }
    }
    ids[n] = EOS;
    Ok(Tokens(ids))
}

/// Words between BOS and the first EOS (or the end). Specials and reserved
/// ids render in angle brackets so malformed decodes stay visible.
pub fn detokenize(t: &Tokens) -> String {
    let mut words = Vec::new();
    for &id in t.0.iter().skip(usize::from(t.0[0] == BOS)) {
        if id == EOS {
            break;
        }
        match vocab_word(id) {
            Some(w) => words.push(w.to_string()),
            None => words.push(format!("<r{id}>")),
        }
    }
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_example() {
        let t = tokenize("make the square red").unwrap();
        let w = |s| word_id(s).unwrap();
        assert_eq!(t.0, [BOS, w("make"), w("the"), w("square"), w("red"), EOS, PAD, PAD]);
        assert_eq!(detokenize(&t), "make the square red");
    }

    #[test]
    fn empty_instruction() {
        assert_eq!(tokenize("").unwrap().0, [BOS, EOS, PAD, PAD, PAD, PAD, PAD, PAD]);
    }

    #[test]
    fn truncation_forces_eos_last() {
        let t = tokenize("make the the the the the the the red").unwrap();
        assert_eq!(t.0[N_TOK - 1], EOS);
        assert!(t.0[1..N_TOK - 1].iter().all(|&x| x != EOS && x != PAD));
        assert!(t.is_well_formed());
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        assert!(matches!(tokenize("make it foggy"), Err(CoreError::OutOfVocabulary(w)) if w == "it"));
    }

    #[test]
    fn csv_roundtrip() {
        let t = tokenize("turn the square into a circle").unwrap();
        assert_eq!(Tokens::from_csv(&t.to_csv()).unwrap(), t);
        assert!(Tokens::from_csv("1,2,3").is_err());
    }

    #[test]
    fn vocabulary_has_48_slots() {
        assert!(FIRST_WORD + WORDS.len() <= VOCAB_SIZE);
        for id in 0..FIRST_WORD + WORDS.len() {
            assert!(vocab_word(id).is_some());
        }
    }
}
