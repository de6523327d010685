//! Frozen whitespace + punctuation tokenizer.
//!
//! Text is split on Unicode whitespace; inside each chunk every punctuation
//! character becomes its own token and maximal runs of other characters form
//! word tokens. Token spans elsewhere in the crate index into this output.

use std::ops::Range;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    /// Byte range in the source string.
    pub range: Range<usize>,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_ascii())
}

pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |start: &mut Option<usize>, end: usize, out: &mut Vec<Token>| {
        if let Some(s) = start.take() {
            out.push(Token {
                text: text[s..end].to_string(),
                range: s..end,
            });
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            flush(&mut word_start, i, &mut out);
        } else if is_punct(c) {
            flush(&mut word_start, i, &mut out);
            let end = i + c.len_utf8();
            out.push(Token {
                text: text[i..end].to_string(),
                range: i..end,
            });
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    flush(&mut word_start, text.len(), &mut out);
    out
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text)
        .into_iter()
        .map(|t| t.text)
        .collect()
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "," | "." | "!" | "?" | ";" | ":" | ")" | "]" | "}" | "'" | "%")
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "(" | "[" | "{")
}

/// Joins tokens with single spaces, gluing common punctuation to its
/// neighbour. `tokenize(detokenize(t)) == t` for any token list this
/// tokenizer produced.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for (k, t) in tokens.iter().enumerate() {
        if k > 0 && !attaches_left(t) && !attaches_right(&tokens[k - 1]) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}
