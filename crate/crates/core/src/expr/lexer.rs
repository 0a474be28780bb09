use super::{ExprError, Func};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Ident,
    Number,
    Punct,
    FuncName,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// Byte offsets `[start, end)` into the source.
    pub span: (usize, usize),
}

const TWO_CHAR_PUNCT: [&str; 4] = ["<=", ">=", "==", "!="];

pub fn tokenize(source: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            if Func::from_name(&source[start..i]).is_some() {
                TokenKind::FuncName
            } else {
                TokenKind::Ident
            }
        } else if c.is_ascii_digit() {
            i = scan_number(bytes, i).map_err(|offset| ExprError::Lex { offset, ch: char_at(source, offset) })?;
            TokenKind::Number
        } else if i + 1 < bytes.len() && TWO_CHAR_PUNCT.contains(&&source[i..i + 2]) {
            i += 2;
            TokenKind::Punct
        } else if b"+-*/(),<>".contains(&c) {
            i += 1;
            TokenKind::Punct
        } else {
            return Err(ExprError::Lex { offset: i, ch: char_at(source, i) });
        };
        tokens.push(Token { kind, text: source[start..i].to_string(), span: (start, i) });
    }
    Ok(tokens)
}

fn char_at(source: &str, offset: usize) -> char {
    source[offset..].chars().next().unwrap_or('\0')
}

/// Decimal digits with optional fraction and exponent; returns the end offset.
fn scan_number(bytes: &[u8], mut i: usize) -> Result<usize, usize> {
    let digits = |i: &mut usize| {
        let s = *i;
        while *i < bytes.len() && bytes[*i].is_ascii_digit() {
            *i += 1;
        }
        *i > s
    };
    digits(&mut i);
    if i < bytes.len() && bytes[i] == b'.' {
        i += 1;
        if !digits(&mut i) {
            return Err(i.min(bytes.len().saturating_sub(1)));
        }
    }
    if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
        i += 1;
        if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
            i += 1;
        }
        if !digits(&mut i) {
            return Err(i.min(bytes.len().saturating_sub(1)));
        }
    }
    Ok(i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<(TokenKind, String)> {
        tokenize(src).unwrap().into_iter().map(|t| (t.kind, t.text)).collect()
    }

    #[test]
    fn scaled_query() {
        use TokenKind::*;
        assert_eq!(
            kinds("q / sqrt(128)"),
            vec![
                (Ident, "q".into()),
                (Punct, "/".into()),
                (FuncName, "sqrt".into()),
                (Punct, "(".into()),
                (Number, "128".into()),
                (Punct, ")".into()),
            ]
        );
    }

    #[test]
    fn relu_as_max() {
        assert_eq!(tokenize("max(scores, 0)").unwrap().len(), 6);
    }

    #[test]
    fn numbers_and_comparisons() {
        let t = kinds("1.5e-3 <= x");
        assert_eq!(t[0], (TokenKind::Number, "1.5e-3".into()));
        assert_eq!(t[1], (TokenKind::Punct, "<=".into()));
    }

    #[test]
    fn spans_cover_non_whitespace() {
        let src = "  exp(scores -reduceMax(scores))  ";
        let toks = tokenize(src).unwrap();
        let mut covered = vec![false; src.len()];
        let mut last_end = 0;
        for t in &toks {
            assert!(t.span.0 >= last_end);
            last_end = t.span.1;
            for c in &mut covered[t.span.0..t.span.1] {
                *c = true;
            }
        }
        for (i, b) in src.bytes().enumerate() {
            assert_eq!(covered[i], !b.is_ascii_whitespace());
        }
    }

    #[test]
    fn illegal_character_reports_offset() {
        assert_eq!(tokenize("a $ b"), Err(ExprError::Lex { offset: 2, ch: '$' }));
        assert!(matches!(tokenize("1.e5"), Err(ExprError::Lex { .. })));
    }
}
