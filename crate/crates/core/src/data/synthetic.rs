//! Seeded generator of English-like prose from a small phrase grammar, so
//! that experiments run without any external corpus.
//!
//! Each word class is a short list of real words followed by a long tail of
//! generated pseudo-words, drawn with Zipf frequencies, so a small model
//! keeps finding rare words to learn long after the common ones. Every
//! paragraph has a few topic nouns and a protagonist that recur within it.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOUNS: &[&str] = &[
    "river", "village", "farmer", "lantern", "garden", "mountain", "letter", "window", "teacher",
    "harbor", "market", "forest", "bridge", "kitchen", "sailor", "orchard", "winter", "candle",
    "road", "stone", "child", "merchant", "meadow", "tower", "clock", "story", "island", "horse",
    "library", "painter", "storm", "field", "song", "doctor", "wheel", "valley", "signal",
    "traveler", "engine", "shadow",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "narrow", "heavy", "green", "distant", "small", "patient", "cold",
    "golden", "careful", "broken", "gentle", "empty", "busy", "hidden", "early", "wide", "strange",
];
const VERBS: &[&str] = &[
    "watched",
    "carried",
    "found",
    "followed",
    "crossed",
    "painted",
    "opened",
    "remembered",
    "repaired",
    "visited",
    "described",
    "counted",
    "built",
    "heard",
    "answered",
    "measured",
    "guarded",
    "praised",
    "left",
    "wrote",
];
const INTRANSITIVE: &[&str] = &[
    "waited", "slept", "returned", "vanished", "laughed", "arrived", "rested", "wandered",
    "listened", "trembled",
];
const ADVERBS: &[&str] = &[
    "slowly",
    "again",
    "quietly",
    "at dawn",
    "before noon",
    "every morning",
    "without a word",
    "once more",
    "carefully",
    "in the rain",
];
const PREPOSITIONS: &[&str] = &[
    "near", "beyond", "under", "behind", "across", "beside", "toward", "inside",
];
const DETERMINERS: &[&str] = &["the", "a", "every", "that", "one", "the"];
const NAMES: &[&str] = &[
    "Anna", "Tomas", "Mira", "Elias", "Greta", "Jonah", "Ilse", "Pavel",
];
const CONNECTIVES: &[&str] = &["and", "but", "so", "while", "because"];

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "cl",
    "dr", "fl", "gr", "pl", "st", "tr", "sh", "th", "ch", "", "",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "io", "y"];
const CODAS: &[&str] = &[
    "", "", "", "n", "r", "l", "s", "t", "m", "nd", "st", "rn", "ck",
];

/// Sizes of the generated tails, per class.
const TAIL_NOUNS: usize = 1200;
const TAIL_ADJECTIVES: usize = 400;
const TAIL_VERBS: usize = 500;
const TAIL_INTRANSITIVE: usize = 150;
const TAIL_NAMES: usize = 200;

struct WordClass {
    words: Vec<String>,
    weights: WeightedIndex<f64>,
}

impl WordClass {
    fn new(head: &[&str], tail: Vec<String>) -> Self {
        let words: Vec<String> = head.iter().map(|w| w.to_string()).chain(tail).collect();
        let weights =
            WeightedIndex::new((1..=words.len()).map(|r| 1.0 / r as f64)).expect("non-empty class");
        WordClass { words, weights }
    }

    fn index(&self, rng: &mut ChaCha8Rng) -> usize {
        self.weights.sample(rng)
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(NUCLEI[rng.random_range(0..NUCLEI.len())]);
        w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    }
    w
}

fn tail(
    rng: &mut ChaCha8Rng,
    n: usize,
    suffix: &str,
    taken: &mut std::collections::HashSet<String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(1..=3);
        let w = format!("{}{suffix}", pseudo_word(rng, syllables));
        if w.len() > 2 && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn capitalized(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
        .unwrap_or_default()
}

struct Grammar {
    rng: ChaCha8Rng,
    nouns: WordClass,
    adjectives: WordClass,
    verbs: WordClass,
    intransitive: WordClass,
    names: WordClass,
    topic: Vec<usize>,
    protagonist: usize,
}

impl Grammar {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut taken = std::collections::HashSet::new();
        let mut class = |head: &[&str], n: usize, suffix: &str, rng: &mut ChaCha8Rng| {
            taken.extend(head.iter().map(|w| w.to_string()));
            WordClass::new(head, tail(rng, n, suffix, &mut taken))
        };
        let nouns = class(NOUNS, TAIL_NOUNS, "", &mut rng);
        let adjectives = class(ADJECTIVES, TAIL_ADJECTIVES, "ish", &mut rng);
        let verbs = class(VERBS, TAIL_VERBS, "ed", &mut rng);
        let intransitive = class(INTRANSITIVE, TAIL_INTRANSITIVE, "ed", &mut rng);
        let mut names = class(NAMES, TAIL_NAMES, "", &mut rng);
        names.words.iter_mut().for_each(|w| *w = capitalized(w));
        Grammar {
            rng,
            nouns,
            adjectives,
            verbs,
            intransitive,
            names,
            topic: Vec::new(),
            protagonist: 0,
        }
    }

    /// Zipf-like choice from a fixed list: earlier entries are more frequent.
    fn pick(&mut self, words: &[&'static str]) -> &'static str {
        let w =
            WeightedIndex::new((1..=words.len()).map(|r| 1.0 / r as f64)).expect("non-empty list");
        words[w.sample(&mut self.rng)]
    }

    fn start_paragraph(&mut self) {
        let n = self.rng.random_range(2..=4);
        self.topic = (0..n).map(|_| self.nouns.index(&mut self.rng)).collect();
        self.protagonist = self.names.index(&mut self.rng);
    }

    fn noun(&mut self, out: &mut String) {
        let i = if !self.topic.is_empty() && self.rng.random_bool(0.4) {
            self.topic[self.rng.random_range(0..self.topic.len())]
        } else {
            self.nouns.index(&mut self.rng)
        };
        out.push_str(&self.nouns.words[i]);
    }

    fn noun_phrase(&mut self, out: &mut String) {
        if self.rng.random_bool(0.15) {
            let i = if self.rng.random_bool(0.6) {
                self.protagonist
            } else {
                self.names.index(&mut self.rng)
            };
            out.push_str(&self.names.words[i]);
            return;
        }
        out.push_str(self.pick(DETERMINERS));
        out.push(' ');
        if self.rng.random_bool(0.4) {
            let i = self.adjectives.index(&mut self.rng);
            out.push_str(&self.adjectives.words[i]);
            out.push(' ');
        }
        self.noun(out);
        if self.rng.random_bool(0.2) {
            out.push(' ');
            out.push_str(self.pick(PREPOSITIONS));
            out.push_str(" the ");
            self.noun(out);
        }
    }

    fn clause(&mut self, out: &mut String) {
        self.noun_phrase(out);
        out.push(' ');
        if self.rng.random_bool(0.7) {
            let i = self.verbs.index(&mut self.rng);
            out.push_str(&self.verbs.words[i]);
            out.push(' ');
            self.noun_phrase(out);
        } else {
            let i = self.intransitive.index(&mut self.rng);
            out.push_str(&self.intransitive.words[i]);
        }
        if self.rng.random_bool(0.3) {
            out.push(' ');
            out.push_str(self.pick(ADVERBS));
        }
    }

    fn sentence(&mut self, out: &mut String) {
        let start = out.len();
        self.clause(out);
        if self.rng.random_bool(0.35) {
            out.push_str(", ");
            out.push_str(self.pick(CONNECTIVES));
            out.push(' ');
            self.clause(out);
        }
        out.push(if self.rng.random_bool(0.1) { '?' } else { '.' });
        if let Some(c) = out[start..].chars().next() {
            let upper = c.to_ascii_uppercase();
            out.replace_range(start..start + c.len_utf8(), &upper.to_string());
        }
    }
}

/// About `bytes` bytes of paragraphs; identical output for identical seeds.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut g = Grammar::new(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        g.start_paragraph();
        let sentences = g.rng.random_range(2..7);
        for s in 0..sentences {
            if s > 0 {
                out.push(' ');
            }
            g.sentence(&mut out);
        }
        out.push('\n');
    }
    out.truncate(bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synthetic_corpus(5000, 3);
        assert_eq!(a.len(), 5000);
        assert_eq!(a, synthetic_corpus(5000, 3));
        assert_ne!(a, synthetic_corpus(5000, 4));
        assert!(a.is_ascii());
        assert!(a.contains(". "));
    }
}
