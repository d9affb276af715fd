//! Shared text canonicalization.

/// Lowercases, deletes apostrophes, turns every other non-alphanumeric,
/// non-whitespace character into a space and collapses whitespace runs.
///
/// `"AREDS + WACS vitamins."` becomes `"areds wacs vitamins"`, `"don't"`
/// becomes `"dont"`.
pub fn fold(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch == '\'' || ch == '\u{2019}' {
            continue;
        }
        if ch.is_alphanumeric() || ch.is_whitespace() {
            out.push(ch);
        } else {
            out.push(' ');
        }
    }
    collapse_whitespace(&out)
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Number of whitespace-separated tokens.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
