//! Pointwise evaluation of typed artifacts over equidistant series.
//!
//! Rules evaluate to four-valued results ([`BoolValue`]); functions and
//! characteristics to numeric samples. Evaluation is column-at-a-time over
//! the context grid and has no state across timestamps.

mod metric;
mod routine;

use std::cell::RefCell;
use std::collections::HashMap;

use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{
    format_expr, is_builtin, BinaryOp, CharacteristicDecl, Decl, DeclKind, Expr, ExprKind, Points, SpecModel,
    UnaryOp,
};
use crate::timeseries::{Quality, Sample, Series, SeriesKind, TimeGrid};

pub use metric::{bucket_span, eval_metric, MetricBucket, MetricSeries};
pub use routine::{eval_timeroutine, routine_matches, CivilTime};

/// Four-valued truth value of a rule at one timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoolValue {
    True,
    False,
    Missing,
    Undefined,
}

impl BoolValue {
    pub const ALL: [BoolValue; 4] = [BoolValue::True, BoolValue::False, BoolValue::Missing, BoolValue::Undefined];

    pub fn from_bool(b: bool) -> Self {
        if b {
            BoolValue::True
        } else {
            BoolValue::False
        }
    }

    /// Strong-Kleene conjunction; UNDEFINED outranks MISSING.
    pub fn and(self, other: Self) -> Self {
        use BoolValue::*;
        match (self, other) {
            (False, _) | (_, False) => False,
            (Undefined, _) | (_, Undefined) => Undefined,
            (Missing, _) | (_, Missing) => Missing,
            (True, True) => True,
        }
    }

    pub fn or(self, other: Self) -> Self {
        use BoolValue::*;
        match (self, other) {
            (True, _) | (_, True) => True,
            (Undefined, _) | (_, Undefined) => Undefined,
            (Missing, _) | (_, Missing) => Missing,
            (False, False) => False,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        match self {
            BoolValue::True => BoolValue::False,
            BoolValue::False => BoolValue::True,
            v => v,
        }
    }

    pub fn implies(self, other: Self) -> Self {
        self.not().or(other)
    }

    pub fn to_sample(self) -> Sample {
        match self {
            BoolValue::True => Sample::valid(1.0),
            BoolValue::False => Sample::valid(0.0),
            BoolValue::Missing => Sample::MISSING,
            BoolValue::Undefined => Sample::UNDEFINED,
        }
    }

    /// Reads a boolean-encoded sample; any non-zero VALID value is TRUE.
    pub fn from_sample(s: Sample) -> Self {
        match s.quality {
            Quality::Valid => BoolValue::from_bool(s.value != 0.0),
            Quality::Missing => BoolValue::Missing,
            Quality::Undefined => BoolValue::Undefined,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoolValue::True => "TRUE",
            BoolValue::False => "FALSE",
            BoolValue::Missing => "MISSING",
            BoolValue::Undefined => "UNDEFINED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("series `{sensor}` is not on the evaluation grid")]
    GridMismatch { sensor: String },
    #[error("`{0}` is not bound in the evaluation context")]
    Unbound(String),
    #[error("`{name}` is {found:?} where a {expected:?} series is needed")]
    KindMismatch {
        name: String,
        expected: SeriesKind,
        found: SeriesKind,
    },
    #[error("`{0}` cannot be evaluated as a series")]
    NotEvaluable(String),
    #[error("metric range is empty")]
    EmptyRange,
}

/// Inputs shared by one evaluation: the grid, the series bound to names, and
/// the model used to look up called artifacts and time routines.
pub struct EvalContext<'m> {
    grid: TimeGrid,
    tz: Tz,
    eps: f64,
    model: Option<&'m SpecModel>,
    bound: HashMap<String, Series>,
    routines: RefCell<HashMap<String, std::rc::Rc<Vec<BoolValue>>>>,
}

impl<'m> EvalContext<'m> {
    pub fn new(grid: TimeGrid, tz: Tz) -> Self {
        EvalContext {
            grid,
            tz,
            eps: 0.0,
            model: None,
            bound: HashMap::new(),
            routines: RefCell::new(HashMap::new()),
        }
    }

    /// Absolute tolerance for `==` and `!=`.
    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_model(mut self, model: &'m SpecModel) -> Self {
        self.model = Some(model);
        self
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn tz(&self) -> Tz {
        self.tz
    }

    /// Binds `name` (a formal or a sensor id) to a series on the context grid.
    pub fn bind(&mut self, name: impl Into<String>, series: Series) -> Result<(), EvalError> {
        if series.grid != self.grid {
            return Err(EvalError::GridMismatch {
                sensor: series.sensor_id,
            });
        }
        self.bound.insert(name.into(), series);
        Ok(())
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    fn routine(&self, name: &str) -> Option<std::rc::Rc<Vec<BoolValue>>> {
        if let Some(c) = self.routines.borrow().get(name) {
            return Some(c.clone());
        }
        let model = self.model?;
        model.time_routine(name)?;
        let col: Vec<BoolValue> = routine::membership(model, name, self.grid, self.tz)
            .into_iter()
            .map(BoolValue::from_bool)
            .collect();
        let col = std::rc::Rc::new(col);
        self.routines.borrow_mut().insert(name.to_string(), col.clone());
        Some(col)
    }
}

/// One evaluated expression over the whole grid.
#[derive(Debug, Clone)]
enum Col {
    Num(Vec<Sample>),
    Bool(Vec<BoolValue>),
}

impl Col {
    fn num(self, what: &str) -> Result<Vec<Sample>, EvalError> {
        match self {
            Col::Num(v) => Ok(v),
            Col::Bool(_) => Err(EvalError::KindMismatch {
                name: what.to_string(),
                expected: SeriesKind::Numeric,
                found: SeriesKind::Boolean,
            }),
        }
    }

    fn boolean(self, what: &str) -> Result<Vec<BoolValue>, EvalError> {
        match self {
            Col::Bool(v) => Ok(v),
            Col::Num(_) => Err(EvalError::KindMismatch {
                name: what.to_string(),
                expected: SeriesKind::Boolean,
                found: SeriesKind::Numeric,
            }),
        }
    }

    fn from_series(s: &Series) -> Col {
        match s.kind {
            SeriesKind::Numeric => Col::Num(s.samples.clone()),
            SeriesKind::Boolean => Col::Bool(s.samples.iter().map(|x| BoolValue::from_sample(*x)).collect()),
        }
    }

    fn into_series(self, id: String, grid: TimeGrid) -> Series {
        let (samples, kind) = match self {
            Col::Num(v) => (v, SeriesKind::Numeric),
            Col::Bool(v) => (v.into_iter().map(BoolValue::to_sample).collect(), SeriesKind::Boolean),
        };
        Series {
            sensor_id: id,
            grid,
            samples,
            kind,
        }
    }
}

/// Names visible while evaluating one body: call arguments first, then the
/// context's bound series.
struct Env<'a> {
    locals: HashMap<&'a str, Col>,
}

/// Combines numeric samples; UNDEFINED outranks MISSING, and a non-finite
/// result is UNDEFINED.
fn arith(a: Sample, b: Sample, f: impl Fn(f64, f64) -> f64) -> Sample {
    match (a.quality, b.quality) {
        (Quality::Undefined, _) | (_, Quality::Undefined) => Sample::UNDEFINED,
        (Quality::Missing, _) | (_, Quality::Missing) => Sample::MISSING,
        _ => finite(f(a.value, b.value)),
    }
}

fn finite(v: f64) -> Sample {
    if v.is_finite() {
        Sample::valid(v)
    } else {
        Sample::UNDEFINED
    }
}

fn compare(a: Sample, b: Sample, op: BinaryOp, eps: f64) -> BoolValue {
    match (a.quality, b.quality) {
        (Quality::Undefined, _) | (_, Quality::Undefined) => BoolValue::Undefined,
        (Quality::Missing, _) | (_, Quality::Missing) => BoolValue::Missing,
        _ => {
            let (x, y) = (a.value, b.value);
            BoolValue::from_bool(match op {
                BinaryOp::Lt => x < y,
                BinaryOp::Le => x <= y,
                BinaryOp::Gt => x > y,
                BinaryOp::Ge => x >= y,
                BinaryOp::Eq => (x - y).abs() <= eps,
                BinaryOp::Ne => (x - y).abs() > eps,
                _ => unreachable!("not a comparison"),
            })
        }
    }
}

/// Combines n-ary builtin arguments pointwise.
fn builtin(name: &str, args: Vec<Vec<Sample>>, len: usize) -> Vec<Sample> {
    (0..len)
        .map(|i| {
            let mut vals = Vec::with_capacity(args.len());
            let mut missing = false;
            for a in &args {
                match a[i].quality {
                    Quality::Undefined => return Sample::UNDEFINED,
                    Quality::Missing => missing = true,
                    Quality::Valid => vals.push(a[i].value),
                }
            }
            if missing {
                return Sample::MISSING;
            }
            let v = match name {
                "MIN" | "MINIMUM" => vals.iter().copied().fold(f64::INFINITY, f64::min),
                "MAX" | "MAXIMUM" => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                "ABS" => vals[0].abs(),
                "SUM" => vals.iter().sum(),
                "AVERAGE" => vals.iter().sum::<f64>() / vals.len() as f64,
                _ => unreachable!("unknown builtin {name}"),
            };
            finite(v)
        })
        .collect()
}

/// Piecewise-linear value of `points` at `x`, or `None` outside its domain.
pub fn interpolate(points: &Points, x: f64) -> Option<f64> {
    let (first, last) = (points.first()?, points.last()?);
    if !(first.0 <= x && x <= last.0) {
        return None;
    }
    let i = points.partition_point(|p| p.0 <= x);
    if i == points.len() {
        return Some(last.1);
    }
    let (x0, y0) = points[i - 1];
    let (x1, y1) = points[i];
    Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
}

/// Function-form characteristic: the curve value at `x`.
fn curve_at(c: &CharacteristicDecl, x: Sample) -> Sample {
    let curve = c.lower.as_ref().or(c.upper.as_ref()).expect("checked characteristic");
    match x.get() {
        None => x,
        Some(xv) => interpolate(curve, xv).map_or(Sample::UNDEFINED, Sample::valid),
    }
}

/// Rule-form characteristic: `lower(x) <= y <= upper(x)`, an absent curve
/// leaving its side open.
fn band_at(c: &CharacteristicDecl, x: Sample, y: Sample) -> BoolValue {
    match (x.quality, y.quality) {
        (Quality::Undefined, _) | (_, Quality::Undefined) => return BoolValue::Undefined,
        (Quality::Missing, _) | (_, Quality::Missing) => return BoolValue::Missing,
        _ => {}
    }
    let bound = |pts: &Option<Points>| pts.as_ref().map(|p| interpolate(p, x.value));
    match (bound(&c.lower), bound(&c.upper)) {
        (Some(None), _) | (_, Some(None)) => BoolValue::Undefined,
        (lo, hi) => {
            let ok_lo = lo.flatten().is_none_or(|l| l <= y.value);
            let ok_hi = hi.flatten().is_none_or(|h| y.value <= h);
            BoolValue::from_bool(ok_lo && ok_hi)
        }
    }
}

impl EvalContext<'_> {
    fn lookup(&self, name: &str, env: &Env) -> Result<Col, EvalError> {
        if let Some(c) = env.locals.get(name) {
            return Ok(c.clone());
        }
        if let Some(s) = self.bound.get(name) {
            return Ok(Col::from_series(s));
        }
        if let Some(r) = self.routine(name) {
            return Ok(Col::Bool(r.as_ref().clone()));
        }
        match self.model.and_then(|m| m.get(name)) {
            Some(d) if d.is_template_kind() && d.params().is_empty() => self.call(d, Vec::new()),
            _ => Err(EvalError::Unbound(name.to_string())),
        }
    }

    /// Evaluates a template artifact with its formals bound to `args`.
    fn call(&self, d: &Decl, args: Vec<Col>) -> Result<Col, EvalError> {
        let params = d.params();
        let env = Env {
            locals: params.iter().map(|p| p.name.as_str()).zip(args).collect(),
        };
        self.eval_decl_body(d, &env)
    }

    fn eval_decl_body(&self, d: &Decl, env: &Env) -> Result<Col, EvalError> {
        match &d.kind {
            DeclKind::Function(f) => Ok(Col::Num(self.eval(&f.body, env)?.num(&d.name)?)),
            DeclKind::Rule(r) => {
                let mut out = self.eval(&r.body, env)?.boolean(&d.name)?;
                if let Some(w) = &r.when {
                    let active = self.routine(w).ok_or_else(|| EvalError::Unbound(w.clone()))?;
                    for (o, a) in out.iter_mut().zip(active.iter()) {
                        if *a != BoolValue::True {
                            *o = BoolValue::True;
                        }
                    }
                }
                Ok(Col::Bool(out))
            }
            DeclKind::Characteristic(c) => {
                let x = self.lookup(&c.x, env)?.num(&c.x)?;
                let y = match &c.y {
                    Some(y) => Some(self.lookup(y, env)?.num(y)?),
                    None => None,
                };
                Ok(match y {
                    Some(y) => Col::Bool(x.iter().zip(&y).map(|(a, b)| band_at(c, *a, *b)).collect()),
                    None => Col::Num(x.iter().map(|a| curve_at(c, *a)).collect()),
                })
            }
            DeclKind::TimeRoutine(_) => Ok(Col::Bool(
                self.routine(&d.name).ok_or_else(|| EvalError::NotEvaluable(d.name.clone()))?.as_ref().clone(),
            )),
            _ => Err(EvalError::NotEvaluable(d.name.clone())),
        }
    }

    fn eval(&self, e: &Expr, env: &Env) -> Result<Col, EvalError> {
        let n = self.grid.count();
        Ok(match &e.kind {
            ExprKind::Number { value, .. } => Col::Num(vec![finite(*value); n]),
            ExprKind::Bool(b) => Col::Bool(vec![BoolValue::from_bool(*b); n]),
            ExprKind::Name(name) => self.lookup(name, env)?,
            ExprKind::Call { name, args } => {
                let callee = self.model.and_then(|m| m.get(name));
                match callee {
                    Some(d) => {
                        let args = args.iter().map(|a| self.eval(a, env)).collect::<Result<Vec<_>, _>>()?;
                        self.call(d, args)?
                    }
                    None if is_builtin(name) => {
                        let args = args
                            .iter()
                            .map(|a| self.eval(a, env)?.num(name))
                            .collect::<Result<Vec<_>, _>>()?;
                        Col::Num(builtin(name, args, n))
                    }
                    None => return Err(EvalError::Unbound(name.clone())),
                }
            }
            ExprKind::Unary { op, operand } => {
                let v = self.eval(operand, env)?;
                match op {
                    UnaryOp::Not => Col::Bool(v.boolean("not")?.into_iter().map(BoolValue::not).collect()),
                    UnaryOp::Neg => Col::Num(
                        v.num("-")?
                            .into_iter()
                            .map(|s| if s.is_valid() { Sample::valid(-s.value) } else { s })
                            .collect(),
                    ),
                }
            }
            ExprKind::Binary { op, lhs, rhs } => {
                let l = self.eval(lhs, env)?;
                let r = self.eval(rhs, env)?;
                let sym = op.symbol();
                if op.is_logical() {
                    let f: fn(BoolValue, BoolValue) -> BoolValue = match op {
                        BinaryOp::And => BoolValue::and,
                        BinaryOp::Or => BoolValue::or,
                        _ => BoolValue::implies,
                    };
                    let (l, r) = (l.boolean(sym)?, r.boolean(sym)?);
                    Col::Bool(l.into_iter().zip(r).map(|(a, b)| f(a, b)).collect())
                } else if op.is_comparison() {
                    let (l, r) = (l.num(sym)?, r.num(sym)?);
                    Col::Bool(l.into_iter().zip(r).map(|(a, b)| compare(a, b, *op, self.eps)).collect())
                } else {
                    let f: fn(f64, f64) -> f64 = match op {
                        BinaryOp::Add => |a, b| a + b,
                        BinaryOp::Sub => |a, b| a - b,
                        BinaryOp::Mul => |a, b| a * b,
                        _ => |a, b| a / b,
                    };
                    let (l, r) = (l.num(sym)?, r.num(sym)?);
                    Col::Num(l.into_iter().zip(r).map(|(a, b)| arith(a, b, f)).collect())
                }
            }
            ExprKind::If {
                cond,
                then_branch,
                else_branch,
            } => {
                let c = self.eval(cond, env)?.boolean("if")?;
                match (self.eval(then_branch, env)?, self.eval(else_branch, env)?) {
                    (Col::Num(t), Col::Num(f)) => Col::Num(
                        c.iter()
                            .zip(t.into_iter().zip(f))
                            .map(|(c, (t, f))| match c {
                                BoolValue::True => t,
                                BoolValue::False => f,
                                BoolValue::Missing => Sample::MISSING,
                                BoolValue::Undefined => Sample::UNDEFINED,
                            })
                            .collect(),
                    ),
                    (Col::Bool(t), Col::Bool(f)) => Col::Bool(
                        c.iter()
                            .zip(t.into_iter().zip(f))
                            .map(|(c, (t, f))| match c {
                                BoolValue::True => t,
                                BoolValue::False => f,
                                other => *other,
                            })
                            .collect(),
                    ),
                    (t, _) => {
                        let kind = if matches!(t, Col::Num(_)) {
                            SeriesKind::Numeric
                        } else {
                            SeriesKind::Boolean
                        };
                        return Err(EvalError::KindMismatch {
                            name: "else".into(),
                            expected: kind,
                            found: if kind == SeriesKind::Numeric {
                                SeriesKind::Boolean
                            } else {
                                SeriesKind::Numeric
                            },
                        });
                    }
                }
            }
        })
    }

    fn top(&self, d: &Decl) -> Result<Col, EvalError> {
        let env = Env {
            locals: HashMap::new(),
        };
        self.eval_decl_body(d, &env)
    }
}

/// Virtual sensor id for an evaluated artifact.
pub fn virtual_id(d: &Decl) -> String {
    match &d.kind {
        DeclKind::Rule(_) => format!("rule:{}", d.name),
        DeclKind::Characteristic(c) if c.is_rule() => format!("rule:{}", d.name),
        _ => format!("fn:{}", d.name),
    }
}

/// Evaluates a numeric function whose formals (or sensors) are bound in `ctx`.
pub fn eval_function(d: &Decl, ctx: &EvalContext) -> Result<Series, EvalError> {
    let col = ctx.top(d)?;
    Ok(Col::Num(col.num(&d.name)?).into_series(virtual_id(d), ctx.grid))
}

/// Evaluates a rule to a four-valued BOOLEAN series on the context grid.
pub fn eval_rule(d: &Decl, ctx: &EvalContext) -> Result<Series, EvalError> {
    let col = ctx.top(d)?;
    Ok(Col::Bool(col.boolean(&d.name)?).into_series(virtual_id(d), ctx.grid))
}

/// Evaluates either characteristic form.
pub fn eval_characteristic(d: &Decl, ctx: &EvalContext) -> Result<Series, EvalError> {
    if !matches!(d.kind, DeclKind::Characteristic(_)) {
        return Err(EvalError::NotEvaluable(d.name.clone()));
    }
    Ok(ctx.top(d)?.into_series(virtual_id(d), ctx.grid))
}

/// Evaluates any rule, function or characteristic.
pub fn eval_artifact(d: &Decl, ctx: &EvalContext) -> Result<Series, EvalError> {
    match &d.kind {
        DeclKind::Rule(_) => eval_rule(d, ctx),
        DeclKind::Function(_) => eval_function(d, ctx),
        DeclKind::Characteristic(_) => eval_characteristic(d, ctx),
        _ => Err(EvalError::NotEvaluable(d.name.clone())),
    }
}

/// Series for every compound sub-expression of a rule or function body,
/// labelled with its canonical text. Meant for debugging a specification.
pub fn eval_subexpressions(d: &Decl, ctx: &EvalContext) -> Result<Vec<(String, Series)>, EvalError> {
    let body = match &d.kind {
        DeclKind::Rule(r) => &r.body,
        DeclKind::Function(f) => &f.body,
        _ => return Ok(Vec::new()),
    };
    let mut nodes = Vec::new();
    body.walk(&mut |e| {
        if !matches!(e.kind, ExprKind::Number { .. } | ExprKind::Bool(_)) {
            nodes.push(e);
        }
    });
    let env = Env {
        locals: HashMap::new(),
    };
    nodes
        .into_iter()
        .map(|e| {
            let label = format_expr(e);
            let s = ctx.eval(e, &env)?.into_series(label.clone(), ctx.grid);
            Ok((label, s))
        })
        .collect()
}

/// Counts of each truth value in a rule series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Conformance {
    pub true_count: usize,
    pub false_count: usize,
    pub missing_count: usize,
    pub undefined_count: usize,
}

impl Conformance {
    pub fn total(&self) -> usize {
        self.true_count + self.false_count + self.missing_count + self.undefined_count
    }

    fn fraction(&self, n: usize) -> f64 {
        match self.total() {
            0 => 0.0,
            t => n as f64 / t as f64,
        }
    }

    /// Share of TRUE samples: correct operation.
    pub fn green(&self) -> f64 {
        self.fraction(self.true_count)
    }

    /// Share of FALSE samples: malfunction.
    pub fn red(&self) -> f64 {
        self.fraction(self.false_count)
    }

    pub fn missing(&self) -> f64 {
        self.fraction(self.missing_count)
    }

    pub fn undefined(&self) -> f64 {
        self.fraction(self.undefined_count)
    }

    pub fn count(&self, v: BoolValue) -> usize {
        match v {
            BoolValue::True => self.true_count,
            BoolValue::False => self.false_count,
            BoolValue::Missing => self.missing_count,
            BoolValue::Undefined => self.undefined_count,
        }
    }
}

pub fn conformance(rule_series: &Series) -> Conformance {
    let mut c = Conformance::default();
    for s in &rule_series.samples {
        match BoolValue::from_sample(*s) {
            BoolValue::True => c.true_count += 1,
            BoolValue::False => c.false_count += 1,
            BoolValue::Missing => c.missing_count += 1,
            BoolValue::Undefined => c.undefined_count += 1,
        }
    }
    c
}
