//! Byte-level corpora, token windows and a seeded synthetic text generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AraError, Result};

/// Byte-level vocabulary size.
pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug)]
pub struct Corpus {
    tokens: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Self {
        Corpus::from_bytes(text.as_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Corpus {
            tokens: bytes.iter().map(|&b| b as usize).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AraError::io(path, e))?;
        if bytes.is_empty() {
            return Err(AraError::input(format!("corpus {} is empty", path.display())));
        }
        Ok(Corpus::from_bytes(&bytes))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Training prefix and held-out suffix; the suffix gets `heldout_fraction`
    /// of the tokens.
    pub fn split(&self, heldout_fraction: f64) -> (&[usize], &[usize]) {
        let cut = ((1.0 - heldout_fraction) * self.tokens.len() as f64).round() as usize;
        self.tokens.split_at(cut.min(self.tokens.len()))
    }
}

/// Draws `count` distinct non-overlapping windows of `len` tokens from the
/// aligned grid `tokens[i*len .. (i+1)*len]`.
pub fn sample_windows(
    tokens: &[usize],
    count: usize,
    len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(AraError::input("window length must be positive"));
    }
    let available = tokens.len() / len;
    if available == 0 {
        return Err(AraError::input(format!(
            "corpus of {} tokens is shorter than one window of {len}",
            tokens.len()
        )));
    }
    if count > available {
        return Err(AraError::input(format!(
            "requested {count} windows of {len} tokens but the corpus holds {available}"
        )));
    }
    let mut slots: Vec<usize> = (0..available).collect();
    slots.shuffle(rng);
    Ok(slots[..count]
        .iter()
        .map(|&i| tokens[i * len..(i + 1) * len].to_vec())
        .collect())
}

/// Consecutive non-overlapping windows covering `tokens` from the start;
/// a trailing partial window is kept if it has at least two tokens.
pub fn sequential_windows(tokens: &[usize], len: usize) -> Vec<Vec<usize>> {
    tokens
        .chunks(len.max(2))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
    "br", "ch", "cl", "dr", "fl", "gr", "pl", "pr", "sh", "st", "th", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "ie", "oo"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ng", "rk"];

const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some", "my", "our"];
const PREPOSITIONS: &[&str] = &["in", "on", "under", "near", "with", "from", "over", "beside"];
const CONJUNCTIONS: &[&str] = &["and", "but", "so", "while", "because"];

/// Deterministic pseudo-English lexicon; independent of the text seed so
/// that every generated corpus shares one "language".
struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
}

impl Lexicon {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1e71c0);
        let word = |rng: &mut ChaCha8Rng, syllables: usize| {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
                w.push_str(CODAS.choose(rng).unwrap());
            }
            w
        };
        let make = |count: usize, max_syl: usize, suffix: &str, rng: &mut ChaCha8Rng| {
            (0..count)
                .map(|_| {
                    let syl = rng.gen_range(1..=max_syl);
                    format!("{}{}", word(rng, syl), suffix)
                })
                .collect::<Vec<_>>()
        };
        let nouns = make(220, 3, "", &mut rng);
        let verbs = make(120, 2, "s", &mut rng);
        let adjectives = make(90, 2, "y", &mut rng);
        Lexicon {
            nouns,
            verbs,
            adjectives,
        }
    }
}

/// Zipf-distributed index in `0..n`.
fn zipf(rng: &mut impl Rng, n: usize) -> usize {
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let mut u = rng.gen::<f64>() * h;
    for k in 1..=n {
        u -= 1.0 / k as f64;
        if u <= 0.0 {
            return k - 1;
        }
    }
    n - 1
}

/// Generates at least `bytes` bytes of pseudo-English text from a small
/// stochastic grammar (noun phrases, verbs, prepositional phrases, clauses,
/// paragraphs) with Zipfian word choice.
pub fn synthetic_text(bytes: usize, seed: u64) -> String {
    let lex = Lexicon::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);

    let noun_phrase = |rng: &mut ChaCha8Rng, s: &mut String| {
        s.push_str(DETERMINERS[zipf(rng, DETERMINERS.len())]);
        s.push(' ');
        if rng.gen_bool(0.4) {
            s.push_str(&lex.adjectives[zipf(rng, lex.adjectives.len())]);
            s.push(' ');
        }
        let noun = &lex.nouns[zipf(rng, lex.nouns.len())];
        s.push_str(noun);
        if rng.gen_bool(0.2) {
            s.push('s');
        }
    };

    while out.len() < bytes {
        let sentences = rng.gen_range(3..8);
        for si in 0..sentences {
            let mut sentence = String::new();
            let clauses = if rng.gen_bool(0.3) { 2 } else { 1 };
            for ci in 0..clauses {
                if ci > 0 {
                    sentence.push_str(", ");
                    sentence.push_str(CONJUNCTIONS[zipf(&mut rng, CONJUNCTIONS.len())]);
                    sentence.push(' ');
                }
                noun_phrase(&mut rng, &mut sentence);
                sentence.push(' ');
                sentence.push_str(&lex.verbs[zipf(&mut rng, lex.verbs.len())]);
                if rng.gen_bool(0.7) {
                    sentence.push(' ');
                    noun_phrase(&mut rng, &mut sentence);
                }
                if rng.gen_bool(0.35) {
                    sentence.push(' ');
                    sentence.push_str(PREPOSITIONS[zipf(&mut rng, PREPOSITIONS.len())]);
                    sentence.push(' ');
                    noun_phrase(&mut rng, &mut sentence);
                }
            }
            let mut chars = sentence.chars();
            if let Some(first) = chars.next() {
                out.extend(first.to_uppercase());
                out.push_str(chars.as_str());
            }
            out.push(if rng.gen_bool(0.1) { '?' } else { '.' });
            if si + 1 < sentences {
                out.push(' ');
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_are_disjoint_and_in_bounds() {
        let tokens: Vec<usize> = (0..1000).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = sample_windows(&tokens, 20, 33, &mut rng).unwrap();
        let mut starts: Vec<usize> = w.iter().map(|x| x[0]).collect();
        starts.sort();
        for pair in starts.windows(2) {
            assert!(pair[1] - pair[0] >= 33);
        }
        assert!(w.iter().all(|x| x.len() == 33 && x[32] < 1000));
    }

    #[test]
    fn window_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_windows(&[1, 2, 3], 1, 5, &mut rng), Err(AraError::Input(_))));
        assert!(sample_windows(&[0; 10], 3, 5, &mut rng).is_err());
    }

    #[test]
    fn synthetic_text_is_deterministic() {
        let a = synthetic_text(5000, 3);
        assert_eq!(a, synthetic_text(5000, 3));
        assert_ne!(a, synthetic_text(5000, 4));
        assert!(a.len() >= 5000 && a.is_ascii());
    }

    #[test]
    fn split_and_sequential_windows() {
        let c = Corpus::from_text("abcdefghij");
        let (train, held) = c.split(0.2);
        assert_eq!((train.len(), held.len()), (8, 2));
        let w = sequential_windows(c.tokens(), 4);
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].len(), 2);
    }
}
