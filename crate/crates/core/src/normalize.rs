//! Obfuscation-resistant text normalization.
//!
//! Detection patterns are matched against a normalized form of each span:
//! case-folded, homoglyphs mapped to canonical Latin letters via the
//! shipped table, zero-width characters stripped, and base64-looking
//! substrings decoded one level and appended for scanning, tagged as
//! derived text.

use std::collections::HashMap;
use std::sync::OnceLock;

/// Tag prepended to derived (decoded) text appended to the normalized
/// form. Rule packs may key encoded-payload signals on it.
pub const DECODED_TAG: &str = "[decoded]";

/// Minimum length of a base64-looking run before one-level decoding.
const BASE64_MIN_LEN: usize = 16;

fn homoglyph_table() -> &'static HashMap<char, char> {
    static TABLE: OnceLock<HashMap<char, char>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut map = HashMap::new();
        for line in include_str!("../data/homoglyphs.tsv").lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(from), Some(to)) = (parts.next(), parts.next()) else {
                continue;
            };
            let (Some(f), Some(t)) = (from.chars().next(), to.chars().next()) else {
                continue;
            };
            map.insert(f, t);
        }
        map
    })
}

fn is_zero_width(c: char) -> bool {
    matches!(
        c,
        '\u{200B}'..='\u{200F}' | '\u{202A}'..='\u{202E}' | '\u{2060}' | '\u{FEFF}' | '\u{00AD}'
    )
}

/// Case-fold only. This is the keyword-baseline view of the text: no
/// homoglyph mapping, no zero-width stripping, no decoding.
pub fn casefold(text: &str) -> String {
    text.to_lowercase()
}

/// Full normalization: case fold, strip zero-width characters, map
/// homoglyphs, then append one-level-decoded base64 runs tagged as
/// derived text.
pub fn normalize(text: &str) -> String {
    let table = homoglyph_table();
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if is_zero_width(c) {
            continue;
        }
        for lc in c.to_lowercase() {
            out.push(table.get(&lc).copied().unwrap_or(lc));
        }
    }
    // Scan the original text (zero-width stripped, case preserved) for
    // base64 runs; decoding is case-sensitive.
    let stripped: String = text.chars().filter(|c| !is_zero_width(*c)).collect();
    for run in base64_candidates(&stripped) {
        if let Some(decoded) = decode_base64_text(run) {
            out.push(' ');
            out.push_str(DECODED_TAG);
            out.push(' ');
            // One level only: the decoded text is folded, not re-scanned.
            for c in decoded.chars() {
                for lc in c.to_lowercase() {
                    out.push(table.get(&lc).copied().unwrap_or(lc));
                }
            }
        }
    }
    out
}

/// Maximal runs of base64-alphabet characters that plausibly carry an
/// encoded payload. Plain lowercase words are excluded: a run qualifies
/// only if it has padding, or mixes case, or mixes letters with digits
/// or `+`/`/`.
fn base64_candidates(text: &str) -> impl Iterator<Item = &str> {
    let bytes = text.as_bytes();
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &b) in bytes.iter().enumerate() {
        let in_alphabet = b.is_ascii_alphanumeric() || b == b'+' || b == b'/' || b == b'=';
        match (start, in_alphabet) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                runs.push(&text[s..i]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(&text[s..]);
    }
    runs.into_iter().filter(|run| {
        if run.len() < BASE64_MIN_LEN {
            return false;
        }
        let has_pad = run.contains('=');
        let has_upper = run.bytes().any(|b| b.is_ascii_uppercase());
        let has_lower = run.bytes().any(|b| b.is_ascii_lowercase());
        let has_digit_or_sym = run.bytes().any(|b| b.is_ascii_digit() || b == b'+' || b == b'/');
        has_pad || (has_upper && has_lower) || (has_digit_or_sym && (has_upper || has_lower))
    })
}

/// Decode one level of standard base64 and keep the result only when it
/// is printable UTF-8 text; binary noise is not worth scanning.
fn decode_base64_text(run: &str) -> Option<String> {
    let bytes = decode_base64(run.trim_end_matches('='))?;
    let text = String::from_utf8(bytes).ok()?;
    let printable = text.chars().filter(|c| !c.is_control() || *c == '\n' || *c == '\t').count();
    if text.is_empty() || printable * 10 < text.chars().count() * 9 {
        return None;
    }
    Some(text)
}

fn base64_val(b: u8) -> Option<u32> {
    match b {
        b'A'..=b'Z' => Some((b - b'A') as u32),
        b'a'..=b'z' => Some((b - b'a' + 26) as u32),
        b'0'..=b'9' => Some((b - b'0' + 52) as u32),
        b'+' => Some(62),
        b'/' => Some(63),
        _ => None,
    }
}

/// Standard base64 with padding. Used by fixture generators and tests;
/// decoding lives in the normalization path above.
pub fn encode_base64(bytes: &[u8]) -> String {
    const ALPHABET: &[u8; 64] =
        b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(ALPHABET[(n >> 18) as usize & 63] as char);
        out.push(ALPHABET[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 { ALPHABET[(n >> 6) as usize & 63] as char } else { '=' });
        out.push(if chunk.len() > 2 { ALPHABET[n as usize & 63] as char } else { '=' });
    }
    out
}

fn decode_base64(s: &str) -> Option<Vec<u8>> {
    let mut out = Vec::with_capacity(s.len() / 4 * 3 + 3);
    let mut acc: u32 = 0;
    let mut bits = 0u32;
    for b in s.bytes() {
        let v = base64_val(b)?;
        acc = (acc << 6) | v;
        bits += 6;
        if bits >= 8 {
            bits -= 8;
            out.push((acc >> bits) as u8);
            acc &= (1 << bits) - 1;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_fold() {
        assert_eq!(normalize("IGNORE"), "ignore");
    }

    #[test]
    fn zero_width_stripped() {
        assert_eq!(normalize("ign\u{200B}ore"), "ignore");
        assert_eq!(normalize("ig\u{FEFF}n\u{00AD}ore"), "ignore");
    }

    #[test]
    fn homoglyphs_mapped() {
        // Cyrillic о and е.
        assert_eq!(normalize("ign\u{043E}r\u{0435}"), "ignore");
    }

    #[test]
    fn base64_decoded_one_level_and_tagged() {
        // "aWdub3JlIHJ1bGVz" decodes to "ignore rules".
        let n = normalize("aWdub3JlIHJ1bGVz");
        assert!(n.starts_with("awdub3jlihj1bgvz"));
        assert!(n.contains(DECODED_TAG));
        assert!(n.ends_with("ignore rules"));
    }

    #[test]
    fn plain_long_words_are_not_decoded() {
        let n = normalize("internationalization is a long word");
        assert!(!n.contains(DECODED_TAG));
    }

    #[test]
    fn binary_decodes_are_dropped() {
        // Valid base64, but decodes to non-UTF-8 noise.
        let n = normalize("/////////////+//////");
        assert!(!n.contains(DECODED_TAG));
    }

    #[test]
    fn decode_roundtrip() {
        assert_eq!(decode_base64("aWdub3JlIHJ1bGVz").unwrap(), b"ignore rules");
        assert_eq!(decode_base64("aGk").unwrap(), b"hi");
        for text in ["a", "ab", "abc", "ignore rules", "padding test!"] {
            let enc = encode_base64(text.as_bytes());
            assert_eq!(decode_base64(enc.trim_end_matches('=')).unwrap(), text.as_bytes());
        }
    }
}
