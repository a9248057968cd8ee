//! Reference tokenizer shared by both ends of the protocol.
//!
//! Words are maximal runs of characters that are neither whitespace nor ASCII
//! punctuation; every ASCII punctuation character is a token of its own.
//! Sentences end after `.`, `!` or `?` and at line breaks.

pub type Token = String;

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Split text into tokens, tagging each with a sentence index starting at 0.
/// Indices are contiguous and nondecreasing.
pub fn tokenize_sentences(text: &str) -> (Vec<Token>, Vec<u32>) {
    let mut tokens = Vec::new();
    let mut ids = Vec::new();
    let mut sentence = 0u32;
    let mut break_pending = false;
    let mut word = String::new();

    let mut push = |tok: String, tokens: &mut Vec<Token>, ids: &mut Vec<u32>, pending: &mut bool| {
        if *pending && !tokens.is_empty() {
            sentence += 1;
        }
        *pending = false;
        tokens.push(tok);
        ids.push(sentence);
    };

    for c in text.chars() {
        if c.is_whitespace() || c.is_ascii_punctuation() {
            if !word.is_empty() {
                push(std::mem::take(&mut word), &mut tokens, &mut ids, &mut break_pending);
            }
            if c == '\n' {
                break_pending = true;
            } else if c.is_ascii_punctuation() {
                push(c.to_string(), &mut tokens, &mut ids, &mut break_pending);
                if is_terminator(c) {
                    break_pending = true;
                }
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        push(word, &mut tokens, &mut ids, &mut break_pending);
    }
    (tokens, ids)
}

pub fn tokenize(text: &str) -> Vec<Token> {
    tokenize_sentences(text).0
}

/// Inverse of [`tokenize`] up to whitespace.
pub fn detokenize(tokens: &[Token]) -> String {
    tokens.join(" ")
}
