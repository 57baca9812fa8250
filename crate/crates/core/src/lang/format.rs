//! Canonical pretty-printer. `parse(format(f))` reproduces `f` up to spans.

use std::fmt::Write;

use super::ast::*;

const UNARY_PREC: u8 = 7;
const ATOM_PREC: u8 = 8;

pub fn format_fragment(fragment: &Fragment) -> String {
    format_decls(&fragment.decls)
}

pub fn format_decls<'a>(decls: impl IntoIterator<Item = &'a Decl>) -> String {
    let mut out = String::new();
    for d in decls {
        out.push_str(&format_decl(d));
        out.push('\n');
    }
    out
}

pub fn format_decl(d: &Decl) -> String {
    let mut s = String::new();
    match &d.kind {
        DeclKind::Sensor(sd) => {
            write!(s, "sensor {} : {} @ {}", d.name, quote(&sd.unit), format_period(sd.period)).unwrap();
        }
        DeclKind::Function(f) => {
            write!(s, "function {}({}) = {}", d.name, format_params(&f.params), format_expr(&f.body)).unwrap();
        }
        DeclKind::Rule(r) => {
            write!(s, "rule {}({})", d.name, format_params(&r.params)).unwrap();
            if let Some(w) = &r.when {
                write!(s, " when {w}").unwrap();
            }
            write!(s, " = {}", format_expr(&r.body)).unwrap();
        }
        DeclKind::Characteristic(c) => {
            write!(s, "characteristic {}({}", d.name, c.x).unwrap();
            if let Some(y) = &c.y {
                write!(s, ", {y}").unwrap();
            }
            s.push(')');
            if let Some(p) = &c.lower {
                write!(s, " lower {}", format_points(p)).unwrap();
            }
            if let Some(p) = &c.upper {
                write!(s, " upper {}", format_points(p)).unwrap();
            }
        }
        DeclKind::Metric(m) => {
            write!(
                s,
                "metric {} = {}({}) per {}",
                d.name,
                m.aggregate,
                m.context,
                m.quantization.keyword()
            )
            .unwrap();
            if let Some(c) = m.coverage {
                write!(s, " coverage {}", format_number(c)).unwrap();
            }
        }
        DeclKind::TimeRoutine(t) => {
            let ranges: Vec<String> = t.ranges.iter().map(format_pattern).collect();
            if ranges.is_empty() {
                write!(s, "timeroutine {} = {{ }}", d.name).unwrap();
            } else {
                write!(s, "timeroutine {} = {{ {} }}", d.name, ranges.join(", ")).unwrap();
            }
            if !t.includes.is_empty() {
                write!(s, " include {}", t.includes.join(", ")).unwrap();
            }
            if !t.excludes.is_empty() {
                write!(s, " exclude {}", t.excludes.join(", ")).unwrap();
            }
        }
        DeclKind::Apply(a) => {
            let binds: Vec<String> = a.bindings.iter().map(|(f, t)| format!("{f} = {t}")).collect();
            write!(s, "apply {} as {} with ({})", a.template, d.name, binds.join(", ")).unwrap();
        }
    }
    s.push(';');
    s
}

fn format_params(params: &[Param]) -> String {
    params
        .iter()
        .map(|p| match p.ty {
            ParamType::Num => p.name.clone(),
            ParamType::Bool => format!("{}: bool", p.name),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn format_period(secs: i64) -> String {
    if secs % 3600 == 0 {
        format!("{}h", secs / 3600)
    } else if secs % 60 == 0 {
        format!("{}min", secs / 60)
    } else {
        format!("{secs}s")
    }
}

fn format_points(p: &Points) -> String {
    let inner: Vec<String> = p
        .iter()
        .map(|(x, y)| format!("({}, {})", format_number(*x), format_number(*y)))
        .collect();
    format!("[{}]", inner.join(", "))
}

fn format_pattern(p: &FieldPattern) -> String {
    p.constraints
        .iter()
        .map(|c| {
            let vals: Vec<String> = c
                .values
                .iter()
                .map(|v| {
                    let one = |x: u32| match c.field {
                        Field::Weekday => WEEKDAYS[(x as usize).clamp(1, 7) - 1].to_string(),
                        _ => x.to_string(),
                    };
                    if v.lo == v.hi {
                        one(v.lo)
                    } else {
                        format!("{}..{}", one(v.lo), one(v.hi))
                    }
                })
                .collect();
            format!("{} {}", c.field.keyword(), vals.join("|"))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn format_number(v: f64) -> String {
    format!("{v}")
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn precedence(e: &Expr) -> u8 {
    match &e.kind {
        ExprKind::Binary { op, .. } => op.precedence(),
        ExprKind::Unary { .. } => UNARY_PREC,
        ExprKind::If { .. } => 0,
        ExprKind::Number { value, .. } if value.is_sign_negative() => UNARY_PREC,
        _ => ATOM_PREC,
    }
}

pub fn format_expr(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, e);
    out
}

fn write_child(out: &mut String, e: &Expr, parens: bool) {
    if parens {
        out.push('(');
        write_expr(out, e);
        out.push(')');
    } else {
        write_expr(out, e);
    }
}

fn write_expr(out: &mut String, e: &Expr) {
    match &e.kind {
        ExprKind::Number { value, unit } => {
            out.push_str(&format_number(*value));
            if let Some(u) = unit {
                out.push(' ');
                out.push_str(&quote(u));
            }
        }
        ExprKind::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        ExprKind::Name(n) => out.push_str(n),
        ExprKind::Call { name, args } => {
            out.push_str(name);
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(out, a);
            }
            out.push(')');
        }
        ExprKind::Unary { op, operand } => {
            out.push_str(match op {
                UnaryOp::Not => "not ",
                UnaryOp::Neg => "-",
            });
            // `--x` and `-5` would re-lex differently without the parentheses
            let neg_clash = *op == UnaryOp::Neg
                && matches!(&operand.kind, ExprKind::Unary { op: UnaryOp::Neg, .. } | ExprKind::Number { .. });
            write_child(out, operand, precedence(operand) < UNARY_PREC || neg_clash);
        }
        ExprKind::Binary { op, lhs, rhs } => {
            let p = op.precedence();
            let right_assoc = *op == BinaryOp::Implies;
            let non_assoc = op.is_comparison();
            let lp = precedence(lhs);
            let rp = precedence(rhs);
            let lhs_parens = lp < p || (lp == p && (right_assoc || non_assoc));
            let rhs_parens = rp < p || (rp == p && !right_assoc);
            write_child(out, lhs, lhs_parens);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            write_child(out, rhs, rhs_parens);
        }
        ExprKind::If {
            cond,
            then_branch,
            else_branch,
        } => {
            out.push_str("if ");
            write_child(out, cond, matches!(cond.kind, ExprKind::If { .. }));
            out.push_str(" then ");
            write_child(out, then_branch, matches!(then_branch.kind, ExprKind::If { .. }));
            out.push_str(" else ");
            write_expr(out, else_branch);
        }
    }
}
