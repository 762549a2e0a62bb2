//! Toy tokenizer: whitespace/punctuation splitting over a fixed vocabulary.
//!
//! Words are maximal alphabetic runs, every digit is its own token (so any
//! timestamp like `2.5` tokenizes without out-of-vocabulary entries), and
//! punctuation characters are single tokens. Anything unknown maps to the
//! reserved `UNK` id. Decoding joins tokens with spacing rules that make
//! `encode(decode(ids)) == ids` for any UNK-free id sequence.

use std::collections::HashMap;
use std::sync::OnceLock;

pub const UNK: usize = 0;
const UNK_SURFACE: &str = "<unk>";

const PUNCT: &[&str] = &[".", ",", "?", "!", ":", ";", "'", "-", "\""];
const DIGITS: &[&str] = &["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
const WORDS: &[&str] = &[
    // timestamp template
    "this", "frame", "is", "sampled", "at", "s",
    // instructions and answers
    "the", "person", "speaker", "says", "said", "feels", "feel", "feeling", "what", "emotion",
    "does", "describe", "video", "in", "clip", "their", "tone", "voice", "and", "a", "an", "of",
    "looks", "sounds", "seems", "they", "answer", "with", "one", "word", "main", "shown", "state",
    // emotion labels
    "happy", "sad", "angry", "fearful", "afraid", "disgusted", "surprised", "neutral", "calm",
    "excited", "anxious", "content", "annoyed", "worried", "tense", "bored", "confused", "gloomy",
    "cheerful", "upset", "nervous", "relaxed", "frustrated", "joyful", "miserable", "furious",
    // transcript filler
    "i", "you", "we", "it", "that", "so", "very", "not", "really", "today", "was", "went", "fine",
    "great", "terrible", "wonderful", "awful", "news", "why", "how", "oh", "no", "yes", "about",
    "talk", "know", "think", "day", "am", "are", "do", "did", "my", "me", "him", "her", "can",
    "cannot", "believe", "happened", "everything", "nothing", "again", "stop", "wait", "look",
    "went", "wrong", "right", "good", "bad", "best", "worst", "time", "now", "then", "here",
];

fn vocab() -> &'static Vec<&'static str> {
    static VOCAB: OnceLock<Vec<&'static str>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut v = vec![UNK_SURFACE];
        v.extend_from_slice(DIGITS);
        v.extend_from_slice(PUNCT);
        for w in WORDS {
            if !v.contains(w) {
                v.push(w);
            }
        }
        v
    })
}

fn lookup() -> &'static HashMap<&'static str, usize> {
    static MAP: OnceLock<HashMap<&'static str, usize>> = OnceLock::new();
    MAP.get_or_init(|| vocab().iter().enumerate().map(|(i, &w)| (w, i)).collect())
}

/// Number of distinct token ids (the LM vocabulary must be at least this).
pub fn vocab_size() -> usize {
    vocab().len()
}

pub fn token_surface(id: usize) -> &'static str {
    vocab().get(id).copied().unwrap_or(UNK_SURFACE)
}

fn is_digit_id(id: usize) -> bool {
    (1..=DIGITS.len()).contains(&id)
}

fn is_punct_id(id: usize) -> bool {
    (DIGITS.len() + 1..DIGITS.len() + 1 + PUNCT.len()).contains(&id)
}

pub fn encode(text: &str) -> Vec<usize> {
    let map = lookup();
    let lower = text.to_lowercase();
    let mut ids = Vec::new();
    let mut word = String::new();
    let mut flush = |word: &mut String, ids: &mut Vec<usize>| {
        if !word.is_empty() {
            ids.push(*map.get(word.as_str()).unwrap_or(&UNK));
            word.clear();
        }
    };
    for ch in lower.chars() {
        if ch.is_alphabetic() {
            word.push(ch);
        } else {
            flush(&mut word, &mut ids);
            if ch.is_whitespace() {
                continue;
            }
            let s = ch.to_string();
            ids.push(*map.get(s.as_str()).unwrap_or(&UNK));
        }
    }
    flush(&mut word, &mut ids);
    ids
}

/// Inverse of [`encode`] up to canonical spacing: no space before punctuation,
/// digits run together, a decimal point continues a number, and a word glued
/// to a preceding digit stays glued (`2.5s`).
pub fn decode(ids: &[usize]) -> String {
    let mut out = String::new();
    let mut prev: Option<usize> = None;
    let mut prev2: Option<usize> = None;
    for &id in ids {
        let surf = token_surface(id);
        let attach = match prev {
            None => true,
            Some(p) => {
                if is_punct_id(id) {
                    true
                } else if is_digit_id(id) {
                    // continue a number: "25" or "2.5"
                    is_digit_id(p)
                        || (token_surface(p) == "." && prev2.map(is_digit_id).unwrap_or(false))
                } else {
                    // unit suffix: "5s"
                    is_digit_id(p)
                }
            }
        };
        if !attach {
            out.push(' ');
        }
        out.push_str(surf);
        prev2 = prev;
        prev = Some(id);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn timestamp_template_round_trips() {
        let text = "this frame is sampled at 2.5s.";
        let ids = encode(text);
        assert!(!ids.contains(&UNK), "template must be fully in-vocabulary");
        assert_eq!(decode(&ids), text);
        assert_eq!(encode(&decode(&ids)), ids);
    }

    #[test]
    fn digits_split_individually() {
        let ids = encode("123.4");
        assert_eq!(ids.len(), 5);
        assert_eq!(decode(&ids), "123.4");
    }

    #[test]
    fn oov_maps_to_unk() {
        let ids = encode("zyzzyva");
        assert_eq!(ids, vec![UNK]);
    }

    #[test]
    fn sentences_round_trip() {
        for text in [
            "the person feels happy.",
            "what emotion does the person feel?",
            "i cannot believe this happened today!",
            "sampled at 0.0s. sampled at 12.5s.",
        ] {
            let ids = encode(text);
            assert_eq!(decode(&ids), text);
            assert_eq!(encode(&decode(&ids)), ids);
        }
    }

    proptest! {
        /// decode is a right inverse of encode on UNK-free id sequences.
        #[test]
        fn id_round_trip(ids in proptest::collection::vec(1..super::vocab_size(), 0..24)) {
            let text = decode(&ids);
            prop_assert_eq!(encode(&text), ids);
        }
    }
}
