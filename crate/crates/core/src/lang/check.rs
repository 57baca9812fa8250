//! Type checking and template instantiation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::ast::*;
use super::diag::{Diagnostic, DiagnosticKind, Diagnostics};
use super::resolve::{drop_failed, sort_diagnostics};
use super::{is_builtin, SpecModel};

/// A template bound to concrete sensors by an `apply` declaration.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub template: String,
    /// formal → bound sensor, instance, or time routine
    pub binding: BTreeMap<String, String>,
    /// The template with its formals substituted and renamed to `id`.
    pub decl: Decl,
}

impl Instance {
    pub fn result_type(&self) -> ParamType {
        decl_result_type(&self.decl).unwrap_or_default()
    }
}

/// A resolved model whose expressions are well typed, plus its instances.
#[derive(Debug, Clone, Default)]
pub struct TypedModel {
    pub model: SpecModel,
    pub instances: BTreeMap<String, Instance>,
    pub warnings: Vec<Diagnostic>,
}

impl TypedModel {
    /// Instances in dependency order: an instance bound to another instance
    /// comes after it.
    pub fn instance_order(&self) -> Vec<&Instance> {
        let mut done: BTreeSet<&str> = BTreeSet::new();
        let mut out = Vec::new();
        let mut pending: Vec<&Instance> = self.instances.values().collect();
        while !pending.is_empty() {
            let before = pending.len();
            pending.retain(|inst| {
                let ready = inst
                    .binding
                    .values()
                    .all(|t| !self.instances.contains_key(t) || done.contains(t.as_str()));
                if ready {
                    done.insert(&inst.id);
                    out.push(*inst);
                }
                !ready
            });
            // resolution guarantees acyclicity
            assert!(pending.len() < before, "instance graph has a cycle");
        }
        out
    }

    /// Sampling period of an instance: the common period of the sensors it
    /// is bound to, directly or through other instances.
    pub fn instance_period(&self, id: &str) -> Option<i64> {
        instance_period(&self.model, id)
    }
}

fn decl_result_type(d: &Decl) -> Option<ParamType> {
    Some(match &d.kind {
        DeclKind::Rule(_) | DeclKind::TimeRoutine(_) => ParamType::Bool,
        DeclKind::Function(_) | DeclKind::Sensor(_) => ParamType::Num,
        DeclKind::Characteristic(c) if c.is_rule() => ParamType::Bool,
        DeclKind::Characteristic(_) => ParamType::Num,
        _ => return None,
    })
}

fn type_name(t: ParamType) -> &'static str {
    match t {
        ParamType::Num => "NUMERIC",
        ParamType::Bool => "BOOLEAN",
    }
}

/// Result type of a model entry usable as a series: sensors, instances, routines.
fn target_type(model: &SpecModel, name: &str) -> Option<ParamType> {
    let d = model.get(name)?;
    match &d.kind {
        DeclKind::Sensor(_) => Some(ParamType::Num),
        DeclKind::TimeRoutine(_) => Some(ParamType::Bool),
        DeclKind::Apply(a) => model.get(&a.template).and_then(decl_result_type),
        _ => None,
    }
}

fn instance_period(model: &SpecModel, name: &str) -> Option<i64> {
    match model.get(name).map(|d| &d.kind) {
        Some(DeclKind::Sensor(s)) => Some(s.period),
        Some(DeclKind::Apply(a)) => a.bindings.iter().find_map(|(_, t)| instance_period(model, t)),
        _ => None,
    }
}

pub fn typecheck(model: SpecModel) -> Result<TypedModel, Diagnostics> {
    let (typed, diags) = typecheck_lenient(model);
    if diags.iter().any(Diagnostic::is_error) {
        Err(Diagnostics(diags))
    } else {
        Ok(typed)
    }
}

/// Checks every declaration; failing ones and their dependents are dropped.
pub fn typecheck_lenient(model: SpecModel) -> (TypedModel, Vec<Diagnostic>) {
    let mut diags = Vec::new();
    let mut failed = BTreeSet::new();
    let mut instances = BTreeMap::new();
    for d in model.decls() {
        let before = diags.len();
        check_decl(d, &model, &mut diags);
        if let DeclKind::Apply(a) = &d.kind {
            if !diags[before..].iter().any(Diagnostic::is_error) {
                match model.get(&a.template) {
                    Some(t) => {
                        let binding: BTreeMap<String, String> = a.bindings.iter().cloned().collect();
                        match instantiate(&model, t, &binding, &d.name) {
                            Ok(inst) => {
                                unit_warnings(&inst.decl, &model, &mut diags);
                                instances.insert(d.name.clone(), inst);
                            }
                            Err(e) => diags.push(e.for_artifact(&d.name)),
                        }
                    }
                    None => unreachable!("resolved template"),
                }
            }
        } else if d.is_template_kind() {
            unit_warnings(d, &model, &mut diags);
        }
        if diags[before..].iter().any(Diagnostic::is_error) {
            failed.insert(d.name.clone());
        }
    }
    let mut model = model;
    drop_failed(&mut model, failed, &mut diags);
    instances.retain(|id, _| model.contains(id));
    sort_diagnostics(&mut diags);
    let warnings = diags.iter().filter(|d| !d.is_error()).cloned().collect();
    (
        TypedModel {
            model,
            instances,
            warnings,
        },
        diags,
    )
}

fn check_decl(d: &Decl, model: &SpecModel, diags: &mut Vec<Diagnostic>) {
    let err = |kind, span: &Span, msg: String| Diagnostic::error(kind, span.clone(), msg).for_artifact(&d.name);
    match &d.kind {
        DeclKind::Sensor(_) => {}
        DeclKind::Function(f) => {
            let env = param_env(&f.params);
            match infer(&f.body, &env, model) {
                Ok(ParamType::Num) => {}
                Ok(t) => diags.push(err(
                    DiagnosticKind::TypeMismatch,
                    &f.body.span,
                    format!("function body must be NUMERIC, found {}", type_name(t)),
                )),
                Err(e) => diags.push(e.for_artifact(&d.name)),
            }
        }
        DeclKind::Rule(r) => {
            let env = param_env(&r.params);
            match infer(&r.body, &env, model) {
                Ok(ParamType::Bool) => {}
                Ok(t) => diags.push(err(
                    DiagnosticKind::TypeMismatch,
                    &r.body.span,
                    format!("rule body must be BOOLEAN, found {}", type_name(t)),
                )),
                Err(e) => diags.push(e.for_artifact(&d.name)),
            }
            if let Some(w) = &r.when {
                if model.time_routine(w).is_none() {
                    diags.push(err(
                        DiagnosticKind::TypeMismatch,
                        &d.span,
                        format!("`when` expects a time routine, `{w}` is a {}", kind_of(model, w)),
                    ));
                }
            }
        }
        DeclKind::Characteristic(c) => {
            if c.y.as_ref() == Some(&c.x) {
                diags.push(err(
                    DiagnosticKind::DuplicateDefinition,
                    &d.span,
                    format!("parameter `{}` declared twice", c.x),
                ));
            }
            match (c.is_rule(), &c.lower, &c.upper) {
                (_, None, None) => diags.push(err(
                    DiagnosticKind::InvalidDeclaration,
                    &d.span,
                    "characteristic needs a lower or an upper curve".into(),
                )),
                (false, Some(_), Some(_)) => diags.push(err(
                    DiagnosticKind::InvalidDeclaration,
                    &d.span,
                    "a characteristic with one parameter is a lookup curve and takes exactly one point list".into(),
                )),
                _ => {}
            }
            for (label, pts) in [("lower", &c.lower), ("upper", &c.upper)] {
                let Some(pts) = pts else { continue };
                if pts.len() < 2 {
                    diags.push(err(
                        DiagnosticKind::InvalidDeclaration,
                        &d.span,
                        format!("{label} curve needs at least two points"),
                    ));
                }
                if pts.windows(2).any(|w| !(w[0].0 < w[1].0)) {
                    diags.push(err(
                        DiagnosticKind::InvalidDeclaration,
                        &d.span,
                        format!("{label} curve x values must be strictly increasing"),
                    ));
                }
                if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                    diags.push(err(
                        DiagnosticKind::InvalidDeclaration,
                        &d.span,
                        format!("{label} curve has non-finite points"),
                    ));
                }
            }
        }
        DeclKind::Metric(m) => {
            if let Some(c) = m.coverage {
                if !(0.0..=1.0).contains(&c) {
                    diags.push(err(
                        DiagnosticKind::InvalidDeclaration,
                        &d.span,
                        format!("coverage threshold must lie in [0, 1], got {c}"),
                    ));
                }
            }
            let is_series = matches!(
                model.get(&m.context).map(|d| &d.kind),
                Some(DeclKind::Sensor(_) | DeclKind::Apply(_))
            );
            if !is_series || target_type(model, &m.context) != Some(ParamType::Num) {
                diags.push(err(
                    DiagnosticKind::TypeMismatch,
                    &d.span,
                    format!(
                        "metric context must be a numeric sensor or applied function, `{}` is a {}",
                        m.context,
                        kind_of(model, &m.context)
                    ),
                ));
            }
        }
        DeclKind::TimeRoutine(t) => {
            for range in &t.ranges {
                let mut fields = BTreeSet::new();
                for c in &range.constraints {
                    if !fields.insert(c.field) {
                        diags.push(err(
                            DiagnosticKind::InvalidDeclaration,
                            &d.span,
                            format!("field `{}` given twice in one range", c.field.keyword()),
                        ));
                    }
                    let (lo, hi) = c.field.bounds();
                    for v in &c.values {
                        if v.lo < lo || v.hi > hi {
                            diags.push(err(
                                DiagnosticKind::InvalidDeclaration,
                                &d.span,
                                format!("{} value out of range {lo}..{hi}", c.field.keyword()),
                            ));
                        } else if v.lo > v.hi {
                            diags.push(err(
                                DiagnosticKind::InvalidDeclaration,
                                &d.span,
                                format!("{} span {}..{} is descending", c.field.keyword(), v.lo, v.hi),
                            ));
                        }
                    }
                }
            }
            for n in t.includes.iter().chain(&t.excludes) {
                if model.time_routine(n).is_none() {
                    diags.push(err(
                        DiagnosticKind::TypeMismatch,
                        &d.span,
                        format!("`{n}` is a {}, not a time routine", kind_of(model, n)),
                    ));
                }
            }
        }
        DeclKind::Apply(a) => {
            let Some(t) = model.get(&a.template) else { return };
            if !t.is_template_kind() {
                diags.push(err(
                    DiagnosticKind::TypeMismatch,
                    &d.span,
                    format!("`{}` is a {} and cannot be applied", a.template, kind_of(model, &a.template)),
                ));
                return;
            }
            let mut seen = BTreeSet::new();
            for (formal, _) in &a.bindings {
                if !seen.insert(formal) {
                    diags.push(err(
                        DiagnosticKind::DuplicateDefinition,
                        &d.span,
                        format!("formal `{formal}` bound twice"),
                    ));
                }
            }
        }
    }
}

fn kind_of(model: &SpecModel, name: &str) -> &'static str {
    model.get(name).map_or("unknown name", |d| d.kind.keyword())
}

fn param_env(params: &[Param]) -> HashMap<&str, ParamType> {
    params.iter().map(|p| (p.name.as_str(), p.ty)).collect()
}

fn expect_type(e: &Expr, want: ParamType, env: &HashMap<&str, ParamType>, model: &SpecModel) -> Result<(), Diagnostic> {
    let got = infer(e, env, model)?;
    if got != want {
        return Err(Diagnostic::error(
            DiagnosticKind::TypeMismatch,
            e.span.clone(),
            format!("expected {}, found {}", type_name(want), type_name(got)),
        ));
    }
    Ok(())
}

/// Infers the type of `e`; reports the first error found.
pub(crate) fn infer(e: &Expr, env: &HashMap<&str, ParamType>, model: &SpecModel) -> Result<ParamType, Diagnostic> {
    use ParamType::*;
    let mismatch = |msg: String| Diagnostic::error(DiagnosticKind::TypeMismatch, e.span.clone(), msg);
    let arity = |msg: String| Diagnostic::error(DiagnosticKind::ArityMismatch, e.span.clone(), msg);
    match &e.kind {
        ExprKind::Number { .. } => Ok(Num),
        ExprKind::Bool(_) => Ok(Bool),
        ExprKind::Name(n) => {
            if let Some(t) = env.get(n.as_str()) {
                return Ok(*t);
            }
            if is_builtin(n) {
                return Err(arity(format!("builtin `{n}` needs arguments")));
            }
            let d = model
                .get(n)
                .ok_or_else(|| Diagnostic::error(DiagnosticKind::UnresolvedReference, e.span.clone(), format!("unresolved reference `{n}`")))?;
            match &d.kind {
                DeclKind::TimeRoutine(_) => Ok(Bool),
                DeclKind::Sensor(_) => Ok(Num),
                DeclKind::Apply(_) => target_type(model, n).ok_or_else(|| mismatch(format!("`{n}` has no value"))),
                DeclKind::Rule(_) | DeclKind::Function(_) | DeclKind::Characteristic(_) => {
                    let params = d.params();
                    if params.is_empty() {
                        Ok(decl_result_type(d).unwrap())
                    } else {
                        Err(arity(format!("`{n}` expects {} argument(s)", params.len())))
                    }
                }
                DeclKind::Metric(_) => Err(mismatch(format!("metric `{n}` cannot be used in an expression"))),
            }
        }
        ExprKind::Call { name, args } => {
            if is_builtin(name) && !model.contains(name) {
                if name == "ABS" && args.len() != 1 {
                    return Err(arity(format!("`ABS` expects 1 argument, got {}", args.len())));
                }
                if args.is_empty() {
                    return Err(arity(format!("`{name}` expects at least 1 argument")));
                }
                for a in args {
                    expect_type(a, Num, env, model)?;
                }
                return Ok(Num);
            }
            let d = model
                .get(name)
                .ok_or_else(|| Diagnostic::error(DiagnosticKind::UnresolvedReference, e.span.clone(), format!("unresolved reference `{name}`")))?;
            if !d.is_template_kind() {
                return Err(mismatch(format!("`{name}` is a {} and cannot be called", d.kind.keyword())));
            }
            let params = d.params();
            if params.len() != args.len() {
                return Err(arity(format!(
                    "`{name}` expects {} argument(s), got {}",
                    params.len(),
                    args.len()
                )));
            }
            for (p, a) in params.iter().zip(args) {
                expect_type(a, p.ty, env, model)?;
            }
            Ok(decl_result_type(d).unwrap())
        }
        ExprKind::Unary { op, operand } => {
            let want = match op {
                UnaryOp::Not => Bool,
                UnaryOp::Neg => Num,
            };
            expect_type(operand, want, env, model)?;
            Ok(want)
        }
        ExprKind::Binary { op, lhs, rhs } => {
            if op.is_logical() {
                expect_type(lhs, Bool, env, model)?;
                expect_type(rhs, Bool, env, model)?;
                Ok(Bool)
            } else {
                expect_type(lhs, Num, env, model)?;
                expect_type(rhs, Num, env, model)?;
                Ok(if op.is_comparison() { Bool } else { Num })
            }
        }
        ExprKind::If {
            cond,
            then_branch,
            else_branch,
        } => {
            expect_type(cond, Bool, env, model)?;
            let t = infer(then_branch, env, model)?;
            expect_type(else_branch, t, env, model)?;
            Ok(t)
        }
    }
}

/// Unit label of an expression, as far as it can be told without dimensional analysis.
fn unit_of<'a>(e: &'a Expr, model: &'a SpecModel) -> Option<&'a str> {
    match &e.kind {
        ExprKind::Number { unit, .. } => unit.as_deref(),
        ExprKind::Name(n) => model.sensor(n).map(|s| s.unit.as_str()),
        ExprKind::Unary { op: UnaryOp::Neg, operand } => unit_of(operand, model),
        ExprKind::Binary {
            op: BinaryOp::Add | BinaryOp::Sub,
            lhs,
            rhs,
        } => match (unit_of(lhs, model), unit_of(rhs, model)) {
            (Some(a), Some(b)) if a == b => Some(a),
            (Some(a), None) | (None, Some(a)) => Some(a),
            _ => None,
        },
        ExprKind::If {
            then_branch,
            else_branch,
            ..
        } => match (unit_of(then_branch, model), unit_of(else_branch, model)) {
            (Some(a), Some(b)) if a == b => Some(a),
            _ => None,
        },
        _ => None,
    }
}

fn unit_warnings(d: &Decl, model: &SpecModel, diags: &mut Vec<Diagnostic>) {
    let body = match &d.kind {
        DeclKind::Function(f) => &f.body,
        DeclKind::Rule(r) => &r.body,
        _ => return,
    };
    body.walk(&mut |e| {
        if let ExprKind::Binary { op, lhs, rhs } = &e.kind {
            if op.is_comparison() || matches!(op, BinaryOp::Add | BinaryOp::Sub) {
                if let (Some(a), Some(b)) = (unit_of(lhs, model), unit_of(rhs, model)) {
                    if a != b {
                        diags.push(
                            Diagnostic::warning(
                                DiagnosticKind::UnitMismatch,
                                e.span.clone(),
                                format!("`{}` combines values in \"{a}\" and \"{b}\"", op.symbol()),
                            )
                            .for_artifact(&d.name),
                        );
                    }
                }
            }
        }
    });
}

fn substitute(e: &Expr, map: &BTreeMap<String, String>) -> Expr {
    let kind = match &e.kind {
        ExprKind::Name(n) => ExprKind::Name(map.get(n).cloned().unwrap_or_else(|| n.clone())),
        ExprKind::Call { name, args } => ExprKind::Call {
            name: name.clone(),
            args: args.iter().map(|a| substitute(a, map)).collect(),
        },
        ExprKind::Unary { op, operand } => ExprKind::Unary {
            op: *op,
            operand: Box::new(substitute(operand, map)),
        },
        ExprKind::Binary { op, lhs, rhs } => ExprKind::Binary {
            op: *op,
            lhs: Box::new(substitute(lhs, map)),
            rhs: Box::new(substitute(rhs, map)),
        },
        ExprKind::If {
            cond,
            then_branch,
            else_branch,
        } => ExprKind::If {
            cond: Box::new(substitute(cond, map)),
            then_branch: Box::new(substitute(then_branch, map)),
            else_branch: Box::new(substitute(else_branch, map)),
        },
        k @ (ExprKind::Number { .. } | ExprKind::Bool(_)) => k.clone(),
    };
    Expr::new(kind, e.span.clone())
}

/// Binds a template's formals to concrete series names.
///
/// Substitution is simultaneous, so a binding may swap formal names without
/// capture. Bound targets must be declared in `model`, match the formal's
/// type, and share one sampling period.
pub fn instantiate(
    model: &SpecModel,
    template: &Decl,
    binding: &BTreeMap<String, String>,
    instance_id: &str,
) -> Result<Instance, Diagnostic> {
    let params = template.params();
    let span = model.span(instance_id).cloned().unwrap_or_else(|| template.span.clone());
    let err = |kind, msg: String| Diagnostic::error(kind, span.clone(), msg).for_artifact(instance_id);
    if let Some(p) = params.iter().find(|p| !binding.contains_key(&p.name)) {
        return Err(err(
            DiagnosticKind::IncompleteBinding,
            format!("binding for `{}` leaves formal `{}` unbound", template.name, p.name),
        ));
    }
    if let Some(extra) = binding.keys().find(|k| !params.iter().any(|p| &p.name == *k)) {
        return Err(err(
            DiagnosticKind::UnknownFormal,
            format!("`{}` has no formal named `{extra}`", template.name),
        ));
    }
    let mut period: Option<(i64, &str)> = None;
    for p in &params {
        let target = &binding[&p.name];
        match target_type(model, target) {
            None => {
                return Err(err(
                    DiagnosticKind::TypeMismatch,
                    format!("`{target}` is not a sensor, instance or time routine"),
                ))
            }
            Some(t) if t != p.ty => {
                return Err(err(
                    DiagnosticKind::TypeMismatch,
                    format!(
                        "formal `{}` is {} but `{target}` is {}",
                        p.name,
                        type_name(p.ty),
                        type_name(t)
                    ),
                ))
            }
            Some(_) => {}
        }
        if let Some(tp) = instance_period(model, target) {
            match period {
                Some((pp, other)) if pp != tp => {
                    return Err(err(
                        DiagnosticKind::PeriodMismatch,
                        format!("`{other}` is sampled every {pp} s but `{target}` every {tp} s"),
                    ))
                }
                None => period = Some((tp, target)),
                _ => {}
            }
        }
    }
    let kind = match &template.kind {
        DeclKind::Function(f) => DeclKind::Function(FunctionDecl {
            params: Vec::new(),
            body: substitute(&f.body, binding),
        }),
        DeclKind::Rule(r) => DeclKind::Rule(RuleDecl {
            params: Vec::new(),
            when: r.when.clone(),
            body: substitute(&r.body, binding),
        }),
        DeclKind::Characteristic(c) => DeclKind::Characteristic(CharacteristicDecl {
            x: binding[&c.x].clone(),
            y: c.y.as_ref().map(|y| binding[y].clone()),
            lower: c.lower.clone(),
            upper: c.upper.clone(),
        }),
        _ => {
            return Err(err(
                DiagnosticKind::TypeMismatch,
                format!("`{}` is a {} and cannot be applied", template.name, template.kind.keyword()),
            ))
        }
    };
    Ok(Instance {
        id: instance_id.to_string(),
        template: template.name.clone(),
        binding: binding.clone(),
        decl: Decl {
            name: instance_id.to_string(),
            kind,
            span,
        },
    })
}
