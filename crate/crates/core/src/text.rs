//! Surface normalization and tokenization shared by the KG store, the
//! entity grounder, the pseudo text encoder and the LM tokenizer.

use unicode_normalization::UnicodeNormalization;

/// NFC, lower-case, trim and collapse internal whitespace runs to one space.
pub fn normalize_surface(s: &str) -> String {
    let folded: String = s.nfc().flat_map(char::to_lowercase).collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized word tokens with leading/trailing punctuation stripped.
///
/// Internal punctuation is kept (`ice-cream` stays one token). Tokens that
/// are punctuation only are dropped.
pub fn word_tokens(s: &str) -> Vec<String> {
    normalize_surface(s)
        .split(' ')
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
