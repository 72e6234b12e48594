//! Caption string normalization shared by the index, the filters and the
//! duplicate analyzer.

use unicode_normalization::UnicodeNormalization;

/// NFC, trimmed, with internal whitespace runs collapsed to one space.
/// Case is preserved.
pub fn normalize_caption(caption: &str) -> String {
    let nfc: String = caption.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for word in nfc.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}
