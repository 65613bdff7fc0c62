//! Small generated corpora for smoke runs and the property suite.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trainer::Example;

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// `count` distinct pronounceable words of two syllables.
pub fn lexicon(count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = Vec::with_capacity(count);
    while out.len() < count {
        let w: String = (0..2)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS.choose(&mut rng).expect("non-empty"),
                    VOWELS.choose(&mut rng).expect("non-empty")
                )
            })
            .collect();
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// Sentences of `min_words..=max_words` words drawn uniformly from a fixed
/// lexicon of `lexicon_size` words.
pub fn toy_corpus(
    sentences: usize,
    lexicon_size: usize,
    min_words: usize,
    max_words: usize,
    seed: u64,
) -> Vec<String> {
    let words = lexicon(lexicon_size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    (0..sentences)
        .map(|_| {
            let n = rng.random_range(min_words..=max_words);
            (0..n)
                .map(|_| words.choose(&mut rng).expect("non-empty").as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// A grammar in which the word `firsts[i]` is always followed by
/// `seconds[i]`, embedded among independent filler words.
#[derive(Debug, Clone)]
pub struct PairGrammar {
    pub firsts: Vec<String>,
    pub seconds: Vec<String>,
    pub fillers: Vec<String>,
    pub words: usize,
    /// Word index of the first member of the pair.
    pub slot: usize,
}

impl PairGrammar {
    pub fn new(pairs: usize, fillers: usize, words: usize, slot: usize) -> Self {
        assert!(slot + 1 < words, "pair must fit in the sentence");
        let lex = lexicon(2 * pairs + fillers, 0xB16);
        PairGrammar {
            firsts: lex[..pairs].to_vec(),
            seconds: lex[pairs..2 * pairs].to_vec(),
            fillers: lex[2 * pairs..].to_vec(),
            words,
            slot,
        }
    }

    pub fn sentence(&self, pair: usize, rng: &mut impl Rng) -> String {
        (0..self.words)
            .map(|i| {
                if i == self.slot {
                    self.firsts[pair].as_str()
                } else if i == self.slot + 1 {
                    self.seconds[pair].as_str()
                } else {
                    self.fillers.choose(rng).expect("fillers").as_str()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn corpus(&self, sentences: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..sentences)
            .map(|_| {
                let p = rng.random_range(0..self.firsts.len());
                self.sentence(p, &mut rng)
            })
            .collect()
    }
}

/// Labelled sentences over `toy_corpus`'s lexicon: the label says whether a
/// marker word from the first quarter of the lexicon occurs.
pub fn marker_task(
    examples: usize,
    lexicon_size: usize,
    seed: u64,
    lexicon_seed: u64,
) -> Vec<Example> {
    let words = lexicon(lexicon_size, lexicon_seed);
    let split = lexicon_size / 4;
    let (markers, rest) = words.split_at(split);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..examples)
        .map(|i| {
            let positive = i % 2 == 0;
            let n = rng.random_range(5..=8);
            let mut ws: Vec<&str> = (0..n)
                .map(|_| rest.choose(&mut rng).expect("non-empty").as_str())
                .collect();
            if positive {
                let at = rng.random_range(0..n);
                ws[at] = markers.choose(&mut rng).expect("non-empty");
            }
            Example {
                label: if positive { "yes" } else { "no" }.to_string(),
                text: ws.join(" "),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = toy_corpus(64, 48, 6, 10, 1);
        assert_eq!(a, toy_corpus(64, 48, 6, 10, 1));
        assert_eq!(a.len(), 64);
        assert!(a.iter().all(|s| (6..=10).contains(&s.split(' ').count())));
    }

    #[test]
    fn pair_grammar_places_pair() {
        let g = PairGrammar::new(4, 20, 6, 2);
        for s in g.corpus(50, 3) {
            let w: Vec<&str> = s.split(' ').collect();
            let i = g.firsts.iter().position(|f| f == w[2]).unwrap();
            assert_eq!(w[3], g.seconds[i]);
        }
    }

    #[test]
    fn marker_task_is_balanced() {
        let t = marker_task(200, 48, 0, 1);
        assert_eq!(t.iter().filter(|e| e.label == "yes").count(), 100);
    }
}
