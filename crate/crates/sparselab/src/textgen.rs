//! Deterministic synthetic English-like corpus.
//!
//! Templated clause grammar over a fixed lexicon, with punctuation,
//! paragraph breaks, and occasional numerals. The output has enough
//! byte-level structure (spellings, agreement, sentence rhythm) for a small
//! byte LM to learn, while staying fully reproducible from a seed — the
//! sandbox this toolkit targets has no external text to download.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DETS: &[&str] = &["the", "a", "this", "that", "every", "some", "no", "each"];
const ADJS: &[&str] = &[
    "old", "quiet", "bright", "heavy", "narrow", "green", "sudden", "warm", "pale", "rough",
    "clever", "hollow", "distant", "simple", "broken", "gentle", "sharp", "golden", "tired",
    "curious",
];
const NOUNS: &[&str] = &[
    "river", "lamp", "garden", "letter", "window", "mountain", "teacher", "engine", "harbor",
    "forest", "clock", "bridge", "stone", "market", "painter", "valley", "shadow", "door",
    "librarian", "orchard", "signal", "meadow", "captain", "village", "furnace",
];
const VERBS: &[&str] = &[
    "watches", "carries", "follows", "opens", "remembers", "crosses", "builds", "paints",
    "measures", "repairs", "gathers", "holds", "answers", "counts", "warms", "guards", "reads",
    "startles", "borrows", "sketches",
];
const ADVS: &[&str] = &[
    "slowly", "quietly", "often", "rarely", "twice", "again", "carefully", "at dusk", "in spring",
    "without a word",
];
const PREPS: &[&str] = &["near", "beyond", "under", "behind", "toward", "across from", "beside"];
const NAMES: &[&str] = &[
    "Mara", "Theo", "Ines", "Viktor", "Sana", "Old Pavel", "the mayor", "Brother Anselm",
];

/// Generate at least `n_bytes` of text, truncated to exactly `n_bytes`.
pub fn generate_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 256);
    while out.len() < n_bytes {
        let sentences = rng.random_range(3..=7);
        for i in 0..sentences {
            sentence(&mut out, &mut rng);
            if i + 1 < sentences {
                out.push(' ');
            }
        }
        out.push_str("\n\n");
    }
    out.truncate(n_bytes);
    out.into_bytes()
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

fn noun_phrase(out: &mut String, rng: &mut ChaCha8Rng) {
    if rng.random_bool(0.2) {
        out.push_str(pick(rng, NAMES));
        return;
    }
    out.push_str(pick(rng, DETS));
    out.push(' ');
    if rng.random_bool(0.45) {
        out.push_str(pick(rng, ADJS));
        out.push(' ');
    }
    out.push_str(pick(rng, NOUNS));
}

fn clause(out: &mut String, rng: &mut ChaCha8Rng) {
    noun_phrase(out, rng);
    out.push(' ');
    out.push_str(pick(rng, VERBS));
    match rng.random_range(0..10) {
        0..=4 => {
            out.push(' ');
            noun_phrase(out, rng);
        }
        5..=7 => {
            out.push(' ');
            out.push_str(pick(rng, PREPS));
            out.push(' ');
            noun_phrase(out, rng);
        }
        _ => {
            out.push(' ');
            out.push_str(pick(rng, ADVS));
        }
    }
    if rng.random_bool(0.12) {
        out.push_str(&format!(" for {} days", rng.random_range(2..40)));
    }
}

fn sentence(out: &mut String, rng: &mut ChaCha8Rng) {
    let mut body = String::new();
    clause(&mut body, rng);
    if rng.random_bool(0.3) {
        body.push_str(", and ");
        clause(&mut body, rng);
    }
    let mut chars = body.chars();
    if let Some(first) = chars.next() {
        out.extend(first.to_uppercase());
        out.push_str(chars.as_str());
    }
    out.push_str(match rng.random_range(0..12) {
        0 => "?",
        1 => "!",
        _ => ".",
    });
}
