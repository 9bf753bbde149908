//! Answer normalization shared by expert simulation, fusion role
//! classification and policy analysis.

/// Trims, casefolds, collapses internal whitespace and strips surrounding
/// quotes and brackets.
pub fn normalize(answer: &str) -> String {
    let mut s = answer.trim();
    loop {
        let stripped = strip_wrapping(s);
        if stripped.len() == s.len() {
            break;
        }
        s = stripped.trim();
    }
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn strip_wrapping(s: &str) -> &str {
    const PAIRS: [(char, char); 6] = [
        ('"', '"'),
        ('\'', '\''),
        ('`', '`'),
        ('[', ']'),
        ('(', ')'),
        ('{', '}'),
    ];
    let mut chars = s.chars();
    let (Some(first), Some(last)) = (chars.next(), chars.next_back()) else {
        return s;
    };
    for (open, close) in PAIRS {
        if first == open && last == close {
            return &s[open.len_utf8()..s.len() - close.len_utf8()];
        }
    }
    s
}

pub fn answers_match(a: &str, b: &str) -> bool {
    normalize(a) == normalize(b)
}

/// Whitespace token count, used when a backend does not report its own.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize("  Bolivia "), "bolivia");
        assert_eq!(normalize("[\"True\"]"), "true");
        assert_eq!(normalize("'New   York'"), "new york");
        assert_eq!(normalize("(42)"), "42");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("\""), "\"");
        assert_eq!(normalize("a [b]"), "a [b]");
    }

    #[test]
    fn matching_is_symmetric() {
        assert!(answers_match("Entail", "[\"entail\"]"));
        assert!(!answers_match("Bolivia", "Bolivia ~t"));
    }

    #[test]
    fn token_count() {
        assert_eq!(whitespace_tokens("the answer is  42\n"), 4);
        assert_eq!(whitespace_tokens(""), 0);
    }
}
