//! Syntax tree for `.afs` specification files.
//!
//! Equality on [`Expr`] and [`Decl`] is structural: source spans are ignored.

use std::fmt;
use std::sync::Arc;

/// Position of a node in its source file (1-based line and column).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub file: Arc<str>,
    pub line: u32,
    pub column: u32,
}

impl Span {
    pub fn new(file: Arc<str>, line: u32, column: u32) -> Self {
        Span { file, line, column }
    }

    /// Placeholder for synthesized nodes.
    pub fn synthetic() -> Self {
        Span {
            file: Arc::from("<generated>"),
            line: 0,
            column: 0,
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.file, self.line, self.column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
    Implies,
}

impl BinaryOp {
    /// Binding strength; higher binds tighter.
    pub fn precedence(self) -> u8 {
        use BinaryOp::*;
        match self {
            Implies => 1,
            Or => 2,
            And => 3,
            Lt | Le | Gt | Ge | Eq | Ne => 4,
            Add | Sub => 5,
            Mul | Div => 6,
        }
    }

    pub fn symbol(self) -> &'static str {
        use BinaryOp::*;
        match self {
            Add => "+",
            Sub => "-",
            Mul => "*",
            Div => "/",
            Lt => "<",
            Le => "<=",
            Gt => ">",
            Ge => ">=",
            Eq => "==",
            Ne => "!=",
            And => "and",
            Or => "or",
            Implies => "implies",
        }
    }

    pub fn is_comparison(self) -> bool {
        self.precedence() == 4
    }

    pub fn is_logical(self) -> bool {
        matches!(self, BinaryOp::And | BinaryOp::Or | BinaryOp::Implies)
    }

    pub fn is_arithmetic(self) -> bool {
        self.precedence() >= 5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Number { value: f64, unit: Option<String> },
    Bool(bool),
    /// A parameter, a time routine, or a zero-arity artifact.
    Name(String),
    Call { name: String, args: Vec<Expr> },
    Unary { op: UnaryOp, operand: Box<Expr> },
    Binary { op: BinaryOp, lhs: Box<Expr>, rhs: Box<Expr> },
    If { cond: Box<Expr>, then_branch: Box<Expr>, else_branch: Box<Expr> },
}

#[derive(Debug, Clone)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl Expr {
    pub fn new(kind: ExprKind, span: Span) -> Self {
        Expr { kind, span }
    }

    /// Visits this node and all descendants, parents first.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Expr)) {
        f(self);
        match &self.kind {
            ExprKind::Number { .. } | ExprKind::Bool(_) | ExprKind::Name(_) => {}
            ExprKind::Call { args, .. } => args.iter().for_each(|a| a.walk(f)),
            ExprKind::Unary { operand, .. } => operand.walk(f),
            ExprKind::Binary { lhs, rhs, .. } => {
                lhs.walk(f);
                rhs.walk(f);
            }
            ExprKind::If {
                cond,
                then_branch,
                else_branch,
            } => {
                cond.walk(f);
                then_branch.walk(f);
                else_branch.walk(f);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ParamType {
    #[default]
    Num,
    Bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: String,
    pub ty: ParamType,
}

impl Param {
    pub fn num(name: impl Into<String>) -> Self {
        Param {
            name: name.into(),
            ty: ParamType::Num,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorDecl {
    pub unit: String,
    /// Sampling period in seconds.
    pub period: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDecl {
    pub params: Vec<Param>,
    pub body: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleDecl {
    pub params: Vec<Param>,
    pub when: Option<String>,
    pub body: Expr,
}

/// Piecewise-linear curve as `(x, y)` support points.
pub type Points = Vec<(f64, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicDecl {
    pub x: String,
    /// Present for the rule (band check) form.
    pub y: Option<String>,
    pub lower: Option<Points>,
    pub upper: Option<Points>,
}

impl CharacteristicDecl {
    pub fn is_rule(&self) -> bool {
        self.y.is_some()
    }

    pub fn params(&self) -> Vec<Param> {
        std::iter::once(&self.x)
            .chain(self.y.iter())
            .map(|p| Param::num(p.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quantization {
    Day,
    Week,
    Month,
    Quarter,
    Year,
}

impl Quantization {
    pub const ALL: [Quantization; 5] = [
        Quantization::Day,
        Quantization::Week,
        Quantization::Month,
        Quantization::Quarter,
        Quantization::Year,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            Quantization::Day => "day",
            Quantization::Week => "week",
            Quantization::Month => "month",
            Quantization::Quarter => "quarter",
            Quantization::Year => "year",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|q| q.keyword() == s)
    }
}

/// Per-bucket aggregate of a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Aggregate {
    Average,
    Minimum,
    Maximum,
    Sum,
    Count,
    /// Library metric: sample standard deviation.
    StdDev,
}

impl Aggregate {
    pub const ALL: [Aggregate; 6] = [
        Aggregate::Average,
        Aggregate::Minimum,
        Aggregate::Maximum,
        Aggregate::Sum,
        Aggregate::Count,
        Aggregate::StdDev,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregate::Average => "AVERAGE",
            Aggregate::Minimum => "MINIMUM",
            Aggregate::Maximum => "MAXIMUM",
            Aggregate::Sum => "SUM",
            Aggregate::Count => "COUNT",
            Aggregate::StdDev => "STDDEV",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricDecl {
    pub aggregate: String,
    /// A sensor or an applied instance.
    pub context: String,
    pub quantization: Quantization,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Year,
    Month,
    Day,
    Hour,
    Minute,
    Second,
    Weekday,
}

impl Field {
    pub const ALL: [Field; 7] = [
        Field::Year,
        Field::Month,
        Field::Day,
        Field::Hour,
        Field::Minute,
        Field::Second,
        Field::Weekday,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            Field::Year => "year",
            Field::Month => "month",
            Field::Day => "day",
            Field::Hour => "hour",
            Field::Minute => "minute",
            Field::Second => "second",
            Field::Weekday => "weekday",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.keyword() == s)
    }

    /// Inclusive value bounds. Weekdays are numbered Mon = 1 .. Sun = 7.
    pub fn bounds(self) -> (u32, u32) {
        match self {
            Field::Year => (1970, 9999),
            Field::Month => (1, 12),
            Field::Day => (1, 31),
            Field::Hour => (0, 23),
            Field::Minute | Field::Second => (0, 59),
            Field::Weekday => (1, 7),
        }
    }
}

pub const WEEKDAYS: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

/// Inclusive span of field values; a single value has `lo == hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueSpan {
    pub lo: u32,
    pub hi: u32,
}

impl ValueSpan {
    pub fn contains(&self, v: u32) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldConstraint {
    pub field: Field,
    pub values: Vec<ValueSpan>,
}

/// Conjunction of field constraints, e.g. `weekday Mon..Fri hour 7..17`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldPattern {
    pub constraints: Vec<FieldConstraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeRoutineDecl {
    pub ranges: Vec<FieldPattern>,
    pub includes: Vec<String>,
    pub excludes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApplyDecl {
    pub template: String,
    /// `formal = target` pairs in source order.
    pub bindings: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeclKind {
    Sensor(SensorDecl),
    Function(FunctionDecl),
    Rule(RuleDecl),
    Characteristic(CharacteristicDecl),
    Metric(MetricDecl),
    TimeRoutine(TimeRoutineDecl),
    Apply(ApplyDecl),
}

impl DeclKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            DeclKind::Sensor(_) => "sensor",
            DeclKind::Function(_) => "function",
            DeclKind::Rule(_) => "rule",
            DeclKind::Characteristic(_) => "characteristic",
            DeclKind::Metric(_) => "metric",
            DeclKind::TimeRoutine(_) => "timeroutine",
            DeclKind::Apply(_) => "apply",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decl {
    pub name: String,
    pub kind: DeclKind,
    pub span: Span,
}

impl PartialEq for Decl {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.kind == other.kind
    }
}

impl Decl {
    /// Formal parameters of templates (rules, functions, characteristics).
    pub fn params(&self) -> Vec<Param> {
        match &self.kind {
            DeclKind::Function(f) => f.params.clone(),
            DeclKind::Rule(r) => r.params.clone(),
            DeclKind::Characteristic(c) => c.params(),
            _ => Vec::new(),
        }
    }

    pub fn is_template_kind(&self) -> bool {
        matches!(
            self.kind,
            DeclKind::Function(_) | DeclKind::Rule(_) | DeclKind::Characteristic(_)
        )
    }
}

/// Parsed contents of one source file.
#[derive(Debug, Clone)]
pub struct Fragment {
    pub file: Arc<str>,
    pub decls: Vec<Decl>,
}

impl PartialEq for Fragment {
    fn eq(&self, other: &Self) -> bool {
        self.decls == other.decls
    }
}
