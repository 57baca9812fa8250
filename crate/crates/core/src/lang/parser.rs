//! Recursive-descent parser for `.afs` files.

use std::sync::Arc;

use super::ast::*;
use super::diag::Diagnostic;
use super::lexer::{tokenize, Tok, Token};

/// Words that may not be used as identifiers. Operator words match in any case.
const OPERATOR_WORDS: [&str; 9] = ["and", "or", "not", "implies", "if", "then", "else", "true", "false"];
const DECL_WORDS: [&str; 7] = ["sensor", "function", "rule", "characteristic", "metric", "timeroutine", "apply"];

pub fn is_reserved(word: &str) -> bool {
    OPERATOR_WORDS.iter().any(|k| k.eq_ignore_ascii_case(word)) || DECL_WORDS.contains(&word)
}

fn is_word(tok: &Tok, word: &str) -> bool {
    matches!(tok, Tok::Ident(s) if s.eq_ignore_ascii_case(word))
}

type PResult<T> = Result<T, Diagnostic>;

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

/// Parses one source file. All syntax errors are collected; parsing resumes
/// after the next `;` following an error.
pub fn parse(text: &str, filename: &str) -> Result<Fragment, Vec<Diagnostic>> {
    let file: Arc<str> = Arc::from(filename);
    let toks = tokenize(text, &file).map_err(|d| vec![d])?;
    let mut p = Parser { toks, pos: 0 };
    let mut decls = Vec::new();
    let mut errors = Vec::new();
    while p.peek() != &Tok::Eof {
        match p.decl() {
            Ok(d) => decls.push(d),
            Err(e) => {
                errors.push(e);
                p.recover();
            }
        }
    }
    if errors.is_empty() {
        Ok(Fragment { file, decls })
    } else {
        Err(errors)
    }
}

/// Parses a standalone expression (used by tests and tooling).
pub fn parse_expr(text: &str) -> Result<Expr, Diagnostic> {
    let file: Arc<str> = Arc::from("<expr>");
    let toks = tokenize(text, &file)?;
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr()?;
    p.expect(&Tok::Eof)?;
    Ok(e)
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }


    fn span(&self) -> Span {
        self.toks[self.pos].span.clone()
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn recover(&mut self) {
        while !matches!(self.peek(), Tok::Semi | Tok::Eof) {
            self.bump();
        }
        if self.peek() == &Tok::Semi {
            self.bump();
        }
    }

    fn unexpected(&self, expected: &[&str]) -> Diagnostic {
        let expected: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
        Diagnostic::syntax(
            self.span(),
            format!("unexpected {}", self.peek().describe()),
            expected,
        )
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == tok {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: &Tok) -> PResult<Span> {
        if self.peek() == tok {
            Ok(self.bump().span)
        } else {
            Err(self.unexpected(&[&format!("`{}`", tok.text())]))
        }
    }

    fn eat_word(&mut self, word: &str) -> bool {
        if is_word(self.peek(), word) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_word(&mut self, word: &str) -> PResult<()> {
        if self.eat_word(word) {
            Ok(())
        } else {
            Err(self.unexpected(&[&format!("`{word}`")]))
        }
    }

    fn ident(&mut self) -> PResult<(String, Span)> {
        match self.peek().clone() {
            Tok::Ident(s) if !is_reserved(&s) => {
                let t = self.bump();
                Ok((s, t.span))
            }
            _ => Err(self.unexpected(&["identifier"])),
        }
    }

    fn number(&mut self) -> PResult<f64> {
        let neg = self.eat(&Tok::Minus);
        match *self.peek() {
            Tok::Number(v) => {
                self.bump();
                Ok(if neg { -v } else { v })
            }
            _ => Err(self.unexpected(&["number"])),
        }
    }

    fn decl(&mut self) -> PResult<Decl> {
        let span = self.span();
        let kw = match self.peek() {
            Tok::Ident(s) if DECL_WORDS.contains(&s.as_str()) => s.clone(),
            _ => return Err(self.unexpected(&DECL_WORDS.map(|w| w))),
        };
        self.bump();
        let (mut name, _) = self.ident()?;
        let kind = match kw.as_str() {
            "sensor" => self.sensor()?,
            "function" => {
                let params = self.params()?;
                self.expect(&Tok::Assign)?;
                DeclKind::Function(FunctionDecl {
                    params,
                    body: self.expr()?,
                })
            }
            "rule" => {
                let params = self.params()?;
                let when = if self.eat_word("when") { Some(self.ident()?.0) } else { None };
                self.expect(&Tok::Assign)?;
                DeclKind::Rule(RuleDecl {
                    params,
                    when,
                    body: self.expr()?,
                })
            }
            "characteristic" => self.characteristic()?,
            "metric" => self.metric()?,
            "timeroutine" => self.timeroutine()?,
            "apply" => {
                // `apply <template> as <instance>`: the declared name is the instance
                let template = std::mem::take(&mut name);
                self.expect_word("as")?;
                name = self.ident()?.0;
                DeclKind::Apply(ApplyDecl {
                    template,
                    bindings: self.bindings()?,
                })
            }
            _ => unreachable!(),
        };
        self.expect(&Tok::Semi)?;
        Ok(Decl { name, kind, span })
    }

    fn sensor(&mut self) -> PResult<DeclKind> {
        self.expect(&Tok::Colon)?;
        let unit = match self.peek().clone() {
            Tok::Str(s) => {
                self.bump();
                s
            }
            _ => return Err(self.unexpected(&["unit string"])),
        };
        self.expect(&Tok::At)?;
        let span = self.span();
        let Tok::Number(n) = *self.peek() else {
            return Err(self.unexpected(&["period"]));
        };
        self.bump();
        let scale = match self.peek() {
            Tok::Ident(u) if u == "s" => 1.0,
            Tok::Ident(u) if u == "min" => 60.0,
            Tok::Ident(u) if u == "h" => 3600.0,
            _ => return Err(self.unexpected(&["`s`", "`min`", "`h`"])),
        };
        self.bump();
        let secs = n * scale;
        if secs < 1.0 || secs.fract() != 0.0 || secs > u32::MAX as f64 {
            return Err(Diagnostic::syntax(
                span,
                format!("period must be a whole number of seconds, at least 1 s (got {secs} s)"),
                vec![],
            ));
        }
        Ok(DeclKind::Sensor(SensorDecl {
            unit,
            period: secs as i64,
        }))
    }

    fn params(&mut self) -> PResult<Vec<Param>> {
        self.expect(&Tok::LParen)?;
        let mut params = Vec::new();
        if !self.eat(&Tok::RParen) {
            loop {
                let (name, _) = self.ident()?;
                let ty = if self.eat(&Tok::Colon) {
                    if self.eat_word("bool") {
                        ParamType::Bool
                    } else if self.eat_word("num") {
                        ParamType::Num
                    } else {
                        return Err(self.unexpected(&["`num`", "`bool`"]));
                    }
                } else {
                    ParamType::Num
                };
                params.push(Param { name, ty });
                if self.eat(&Tok::RParen) {
                    break;
                }
                self.expect(&Tok::Comma)?;
            }
        }
        Ok(params)
    }

    fn characteristic(&mut self) -> PResult<DeclKind> {
        self.expect(&Tok::LParen)?;
        let (x, _) = self.ident()?;
        let y = if self.eat(&Tok::Comma) { Some(self.ident()?.0) } else { None };
        self.expect(&Tok::RParen)?;
        let lower = if self.eat_word("lower") { Some(self.points()?) } else { None };
        let upper = if self.eat_word("upper") { Some(self.points()?) } else { None };
        Ok(DeclKind::Characteristic(CharacteristicDecl { x, y, lower, upper }))
    }

    fn points(&mut self) -> PResult<Points> {
        self.expect(&Tok::LBracket)?;
        let mut pts = Vec::new();
        loop {
            self.expect(&Tok::LParen)?;
            let x = self.number()?;
            self.expect(&Tok::Comma)?;
            let y = self.number()?;
            self.expect(&Tok::RParen)?;
            pts.push((x, y));
            if self.eat(&Tok::RBracket) {
                break;
            }
            self.expect(&Tok::Comma)?;
        }
        Ok(pts)
    }

    fn metric(&mut self) -> PResult<DeclKind> {
        self.expect(&Tok::Assign)?;
        let (aggregate, _) = self.ident()?;
        self.expect(&Tok::LParen)?;
        let (context, _) = self.ident()?;
        self.expect(&Tok::RParen)?;
        self.expect_word("per")?;
        let quantization = match self.peek() {
            Tok::Ident(s) => Quantization::from_keyword(s),
            _ => None,
        }
        .ok_or_else(|| self.unexpected(&["`day`", "`week`", "`month`", "`quarter`", "`year`"]))?;
        self.bump();
        let coverage = if self.eat_word("coverage") { Some(self.number()?) } else { None };
        Ok(DeclKind::Metric(MetricDecl {
            aggregate,
            context,
            quantization,
            coverage,
        }))
    }

    fn timeroutine(&mut self) -> PResult<DeclKind> {
        self.expect(&Tok::Assign)?;
        self.expect(&Tok::LBrace)?;
        let mut ranges = Vec::new();
        if !self.eat(&Tok::RBrace) {
            loop {
                ranges.push(self.field_pattern()?);
                if self.eat(&Tok::RBrace) {
                    break;
                }
                self.expect(&Tok::Comma)?;
            }
        }
        let includes = if self.eat_word("include") { self.idlist()? } else { Vec::new() };
        let excludes = if self.eat_word("exclude") { self.idlist()? } else { Vec::new() };
        Ok(DeclKind::TimeRoutine(TimeRoutineDecl {
            ranges,
            includes,
            excludes,
        }))
    }

    fn field_pattern(&mut self) -> PResult<FieldPattern> {
        let mut constraints = Vec::new();
        while let Tok::Ident(s) = self.peek() {
            let Some(field) = Field::from_keyword(s) else { break };
            self.bump();
            let mut values = Vec::new();
            loop {
                let lo = self.field_value(field)?;
                let hi = if self.eat(&Tok::DotDot) { self.field_value(field)? } else { lo };
                values.push(ValueSpan { lo, hi });
                if !self.eat(&Tok::Pipe) {
                    break;
                }
            }
            constraints.push(FieldConstraint { field, values });
        }
        if constraints.is_empty() {
            return Err(self.unexpected(&Field::ALL.map(|f| f.keyword())));
        }
        Ok(FieldPattern { constraints })
    }

    fn field_value(&mut self, field: Field) -> PResult<u32> {
        match (field, self.peek().clone()) {
            (Field::Weekday, Tok::Ident(name)) => {
                let idx = WEEKDAYS
                    .iter()
                    .position(|w| w.eq_ignore_ascii_case(&name))
                    .ok_or_else(|| self.unexpected(&WEEKDAYS))?;
                self.bump();
                Ok(idx as u32 + 1)
            }
            (Field::Weekday, _) => Err(self.unexpected(&WEEKDAYS)),
            (_, Tok::Number(v)) if v.fract() == 0.0 && v >= 0.0 && v <= u32::MAX as f64 => {
                self.bump();
                Ok(v as u32)
            }
            _ => Err(self.unexpected(&["integer"])),
        }
    }

    fn idlist(&mut self) -> PResult<Vec<String>> {
        let mut ids = vec![self.ident()?.0];
        while self.eat(&Tok::Comma) {
            ids.push(self.ident()?.0);
        }
        Ok(ids)
    }

    fn bindings(&mut self) -> PResult<Vec<(String, String)>> {
        self.expect_word("with")?;
        self.expect(&Tok::LParen)?;
        let mut out = Vec::new();
        if !self.eat(&Tok::RParen) {
            loop {
                let (formal, _) = self.ident()?;
                self.expect(&Tok::Assign)?;
                let (target, _) = self.ident()?;
                out.push((formal, target));
                if self.eat(&Tok::RParen) {
                    break;
                }
                self.expect(&Tok::Comma)?;
            }
        }
        Ok(out)
    }

    // expressions ---------------------------------------------------------

    fn can_start_expr(&self) -> bool {
        match self.peek() {
            Tok::Number(_) | Tok::LParen | Tok::Minus => true,
            Tok::Ident(s) => {
                !is_reserved(s) || ["not", "if", "true", "false"].iter().any(|k| k.eq_ignore_ascii_case(s))
            }
            _ => false,
        }
    }

    /// Parses the operand following an operator, blaming the operator when
    /// nothing follows.
    fn operand(&mut self, op: &Token, f: fn(&mut Self) -> PResult<Expr>) -> PResult<Expr> {
        if !self.can_start_expr() {
            let shown = match &op.tok {
                Tok::Ident(s) => s.clone(),
                t => t.text().to_string(),
            };
            return Err(Diagnostic::syntax(
                op.span.clone(),
                format!("expected an operand after `{shown}`, found {}", self.peek().describe()),
                vec!["expression".into()],
            ));
        }
        f(self)
    }

    fn expr(&mut self) -> PResult<Expr> {
        if !self.can_start_expr() {
            return Err(self.unexpected(&["expression"]));
        }
        self.implies()
    }

    fn implies(&mut self) -> PResult<Expr> {
        let lhs = self.or()?;
        if is_word(self.peek(), "implies") {
            let op = self.bump();
            let rhs = self.operand(&op, Self::implies)?;
            return Ok(binary(BinaryOp::Implies, lhs, rhs, op.span));
        }
        Ok(lhs)
    }

    fn or(&mut self) -> PResult<Expr> {
        let mut lhs = self.and()?;
        while is_word(self.peek(), "or") {
            let op = self.bump();
            let rhs = self.operand(&op, Self::and)?;
            lhs = binary(BinaryOp::Or, lhs, rhs, op.span);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> PResult<Expr> {
        let mut lhs = self.comparison()?;
        while is_word(self.peek(), "and") {
            let op = self.bump();
            let rhs = self.operand(&op, Self::comparison)?;
            lhs = binary(BinaryOp::And, lhs, rhs, op.span);
        }
        Ok(lhs)
    }

    fn comparison_op(&self) -> Option<BinaryOp> {
        Some(match self.peek() {
            Tok::Lt => BinaryOp::Lt,
            Tok::Le => BinaryOp::Le,
            Tok::Gt => BinaryOp::Gt,
            Tok::Ge => BinaryOp::Ge,
            Tok::EqEq => BinaryOp::Eq,
            Tok::Ne => BinaryOp::Ne,
            _ => return None,
        })
    }

    fn comparison(&mut self) -> PResult<Expr> {
        let lhs = self.additive()?;
        if let Some(kind) = self.comparison_op() {
            let op = self.bump();
            let rhs = self.operand(&op, Self::additive)?;
            if self.comparison_op().is_some() {
                return Err(Diagnostic::syntax(
                    self.span(),
                    "comparisons cannot be chained; combine them with `and`",
                    vec![],
                ));
            }
            return Ok(binary(kind, lhs, rhs, op.span));
        }
        Ok(lhs)
    }

    fn additive(&mut self) -> PResult<Expr> {
        let mut lhs = self.multiplicative()?;
        loop {
            let kind = match self.peek() {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            let op = self.bump();
            let rhs = self.operand(&op, Self::multiplicative)?;
            lhs = binary(kind, lhs, rhs, op.span);
        }
    }

    fn multiplicative(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let kind = match self.peek() {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            let op = self.bump();
            let rhs = self.operand(&op, Self::unary)?;
            lhs = binary(kind, lhs, rhs, op.span);
        }
    }

    fn unary(&mut self) -> PResult<Expr> {
        if is_word(self.peek(), "not") {
            let op = self.bump();
            let operand = self.operand(&op, Self::unary)?;
            return Ok(Expr::new(
                ExprKind::Unary {
                    op: UnaryOp::Not,
                    operand: Box::new(operand),
                },
                op.span,
            ));
        }
        if self.peek() == &Tok::Minus {
            let op = self.bump();
            let operand = self.operand(&op, Self::unary)?;
            // a negated literal is a negative literal
            if let ExprKind::Number { value, unit } = operand.kind {
                return Ok(Expr::new(ExprKind::Number { value: -value, unit }, op.span));
            }
            return Ok(Expr::new(
                ExprKind::Unary {
                    op: UnaryOp::Neg,
                    operand: Box::new(operand),
                },
                op.span,
            ));
        }
        self.primary()
    }

    fn primary(&mut self) -> PResult<Expr> {
        let span = self.span();
        match self.peek().clone() {
            Tok::Number(value) => {
                self.bump();
                let unit = if let Tok::Str(u) = self.peek().clone() {
                    self.bump();
                    Some(u)
                } else {
                    None
                };
                Ok(Expr::new(ExprKind::Number { value, unit }, span))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(&Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(s) if s.eq_ignore_ascii_case("true") || s.eq_ignore_ascii_case("false") => {
                self.bump();
                Ok(Expr::new(ExprKind::Bool(s.eq_ignore_ascii_case("true")), span))
            }
            Tok::Ident(s) if s.eq_ignore_ascii_case("if") => {
                self.bump();
                let cond = self.expr()?;
                self.expect_word("then")?;
                let then_branch = self.expr()?;
                self.expect_word("else")?;
                let else_branch = self.expr()?;
                Ok(Expr::new(
                    ExprKind::If {
                        cond: Box::new(cond),
                        then_branch: Box::new(then_branch),
                        else_branch: Box::new(else_branch),
                    },
                    span,
                ))
            }
            Tok::Ident(_) => {
                let (name, span) = self.ident()?;
                if self.eat(&Tok::LParen) {
                    let mut args = Vec::new();
                    if !self.eat(&Tok::RParen) {
                        loop {
                            args.push(self.expr()?);
                            if self.eat(&Tok::RParen) {
                                break;
                            }
                            self.expect(&Tok::Comma)?;
                        }
                    }
                    Ok(Expr::new(ExprKind::Call { name, args }, span))
                } else {
                    Ok(Expr::new(ExprKind::Name(name), span))
                }
            }
            _ => Err(self.unexpected(&["expression"])),
        }
    }
}

fn binary(op: BinaryOp, lhs: Expr, rhs: Expr, span: Span) -> Expr {
    Expr::new(
        ExprKind::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        },
        span,
    )
}
