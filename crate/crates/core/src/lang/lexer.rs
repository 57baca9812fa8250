use std::sync::Arc;

use super::ast::Span;
use super::diag::Diagnostic;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Number(f64),
    Str(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Semi,
    Colon,
    Assign,
    At,
    Plus,
    Minus,
    Star,
    Slash,
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
    Ne,
    DotDot,
    Pipe,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Number(n) => format!("number {n}"),
            Tok::Str(_) => "string".into(),
            Tok::Eof => "end of input".into(),
            other => format!("`{}`", other.text()),
        }
    }

    pub fn text(&self) -> &'static str {
        match self {
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::LBracket => "[",
            Tok::RBracket => "]",
            Tok::Comma => ",",
            Tok::Semi => ";",
            Tok::Colon => ":",
            Tok::Assign => "=",
            Tok::At => "@",
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            Tok::Lt => "<",
            Tok::Le => "<=",
            Tok::Gt => ">",
            Tok::Ge => ">=",
            Tok::EqEq => "==",
            Tok::Ne => "!=",
            Tok::DotDot => "..",
            Tok::Pipe => "|",
            Tok::Ident(_) => "identifier",
            Tok::Number(_) => "number",
            Tok::Str(_) => "string",
            Tok::Eof => "end of input",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
}

pub fn tokenize(text: &str, file: &Arc<str>) -> Result<Vec<Token>, Diagnostic> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    let span = |line, col| Span::new(file.clone(), line, col);

    while i < chars.len() {
        let c = chars[i];
        let start = span(line, col);
        let advance = |i: &mut usize, col: &mut u32, n: usize| {
            *i += n;
            *col += n as u32;
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => advance(&mut i, &mut col, 1),
            '/' if chars.get(i + 1) == Some(&'/') => {
                while i < chars.len() && chars[i] != '\n' {
                    advance(&mut i, &mut col, 1);
                }
            }
            '"' => {
                let mut s = String::new();
                advance(&mut i, &mut col, 1);
                loop {
                    match chars.get(i) {
                        None | Some('\n') => {
                            return Err(Diagnostic::syntax(start, "unterminated string literal", vec![]));
                        }
                        Some('"') => {
                            advance(&mut i, &mut col, 1);
                            break;
                        }
                        Some('\\') => {
                            let esc = match chars.get(i + 1) {
                                Some('"') => '"',
                                Some('\\') => '\\',
                                Some('n') => '\n',
                                Some('t') => '\t',
                                _ => {
                                    return Err(Diagnostic::syntax(
                                        span(line, col),
                                        "invalid escape sequence",
                                        vec![],
                                    ))
                                }
                            };
                            s.push(esc);
                            advance(&mut i, &mut col, 2);
                        }
                        Some(&ch) => {
                            s.push(ch);
                            advance(&mut i, &mut col, 1);
                        }
                    }
                }
                out.push(Token { tok: Tok::Str(s), span: start });
            }
            c if c.is_ascii_digit() => {
                let from = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    advance(&mut i, &mut col, 1);
                }
                if chars.get(i) == Some(&'.') && chars.get(i + 1).is_some_and(char::is_ascii_digit) {
                    advance(&mut i, &mut col, 1);
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        advance(&mut i, &mut col, 1);
                    }
                }
                if matches!(chars.get(i), Some('e' | 'E')) {
                    let digit_at = if matches!(chars.get(i + 1), Some('+' | '-')) { i + 2 } else { i + 1 };
                    if chars.get(digit_at).is_some_and(char::is_ascii_digit) {
                        let n = digit_at - i;
                        advance(&mut i, &mut col, n);
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            advance(&mut i, &mut col, 1);
                        }
                    }
                }
                let lexeme: String = chars[from..i].iter().collect();
                let value = lexeme
                    .parse::<f64>()
                    .map_err(|_| Diagnostic::syntax(start.clone(), format!("invalid number `{lexeme}`"), vec![]))?;
                out.push(Token { tok: Tok::Number(value), span: start });
            }
            c if c.is_alphabetic() || c == '_' => {
                let from = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    advance(&mut i, &mut col, 1);
                }
                out.push(Token {
                    tok: Tok::Ident(chars[from..i].iter().collect()),
                    span: start,
                });
            }
            _ => {
                let next = chars.get(i + 1).copied();
                let (tok, n) = match (c, next) {
                    ('<', Some('=')) => (Tok::Le, 2),
                    ('>', Some('=')) => (Tok::Ge, 2),
                    ('=', Some('=')) => (Tok::EqEq, 2),
                    ('!', Some('=')) => (Tok::Ne, 2),
                    ('.', Some('.')) => (Tok::DotDot, 2),
                    ('(', _) => (Tok::LParen, 1),
                    (')', _) => (Tok::RParen, 1),
                    ('{', _) => (Tok::LBrace, 1),
                    ('}', _) => (Tok::RBrace, 1),
                    ('[', _) => (Tok::LBracket, 1),
                    (']', _) => (Tok::RBracket, 1),
                    (',', _) => (Tok::Comma, 1),
                    (';', _) => (Tok::Semi, 1),
                    (':', _) => (Tok::Colon, 1),
                    ('=', _) => (Tok::Assign, 1),
                    ('@', _) => (Tok::At, 1),
                    ('+', _) => (Tok::Plus, 1),
                    ('-', _) => (Tok::Minus, 1),
                    ('*', _) => (Tok::Star, 1),
                    ('/', _) => (Tok::Slash, 1),
                    ('<', _) => (Tok::Lt, 1),
                    ('>', _) => (Tok::Gt, 1),
                    ('|', _) => (Tok::Pipe, 1),
                    _ => {
                        return Err(Diagnostic::syntax(start, format!("unexpected character `{c}`"), vec![]));
                    }
                };
                advance(&mut i, &mut col, n);
                out.push(Token { tok, span: start });
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        span: span(line, col),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Tok> {
        tokenize(s, &Arc::from("t.afs")).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn period_and_span_tokens() {
        assert_eq!(
            toks("15min 7..17 1.5e3 2e"),
            vec![
                Tok::Number(15.0),
                Tok::Ident("min".into()),
                Tok::Number(7.0),
                Tok::DotDot,
                Tok::Number(17.0),
                Tok::Number(1500.0),
                Tok::Number(2.0),
                Tok::Ident("e".into()),
                Tok::Eof
            ]
        );
    }

    #[test]
    fn comments_and_positions() {
        let t = tokenize("// hi\n  x <= \"°C\"", &Arc::from("f")).unwrap();
        assert_eq!(t[0].tok, Tok::Ident("x".into()));
        assert_eq!((t[0].span.line, t[0].span.column), (2, 3));
        assert_eq!(t[1].tok, Tok::Le);
        assert_eq!(t[2].tok, Tok::Str("°C".into()));
        assert_eq!(t[2].span.column, 8);
    }

    #[test]
    fn bad_character() {
        let err = tokenize("a # b", &Arc::from("f")).unwrap_err();
        assert_eq!((err.span.line, err.span.column), (1, 3));
    }
}
