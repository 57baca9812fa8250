//! Name resolution and reference-graph checks.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::ast::*;
use super::diag::{Diagnostic, DiagnosticKind, Diagnostics, Severity};
use super::{is_builtin, SpecModel};

/// Global names a declaration refers to, with the span of each use.
/// Parameters and builtins are not included.
pub fn references(decl: &Decl) -> Vec<(String, Span)> {
    let mut out = Vec::new();
    let mut body_refs = |params: &[Param], body: &Expr| {
        body.walk(&mut |e| {
            let name = match &e.kind {
                ExprKind::Name(n) => n,
                ExprKind::Call { name, .. } => name,
                _ => return,
            };
            if !params.iter().any(|p| &p.name == name) && !is_builtin(name) {
                out.push((name.clone(), e.span.clone()));
            }
        });
    };
    match &decl.kind {
        DeclKind::Function(f) => body_refs(&f.params, &f.body),
        DeclKind::Rule(r) => {
            body_refs(&r.params, &r.body);
            if let Some(w) = &r.when {
                out.push((w.clone(), decl.span.clone()));
            }
        }
        DeclKind::Metric(m) => out.push((m.context.clone(), decl.span.clone())),
        DeclKind::TimeRoutine(t) => {
            for n in t.includes.iter().chain(&t.excludes) {
                out.push((n.clone(), decl.span.clone()));
            }
        }
        DeclKind::Apply(a) => {
            out.push((a.template.clone(), decl.span.clone()));
            for (_, target) in &a.bindings {
                out.push((target.clone(), decl.span.clone()));
            }
        }
        DeclKind::Sensor(_) | DeclKind::Characteristic(_) => {}
    }
    out
}

/// Strict resolution: any error fails the whole model.
pub fn resolve(fragments: &[Fragment], library: &SpecModel) -> Result<SpecModel, Diagnostics> {
    let (model, diags) = resolve_lenient(fragments, library);
    if diags.iter().any(Diagnostic::is_error) {
        Err(Diagnostics(diags))
    } else {
        Ok(model)
    }
}

/// Resolves what it can: declarations with errors, and everything depending
/// on them, are dropped from the returned model and reported.
pub fn resolve_lenient(fragments: &[Fragment], library: &SpecModel) -> (SpecModel, Vec<Diagnostic>) {
    let mut diags = Vec::new();
    let mut model = SpecModel::empty();

    // Source order across files is made canonical so the result does not
    // depend on the order fragments are passed in.
    let mut ws: Vec<&Decl> = fragments.iter().flat_map(|f| f.decls.iter()).collect();
    ws.sort_by(|a, b| a.span.cmp(&b.span).then_with(|| a.name.cmp(&b.name)));

    let mut seen: BTreeMap<&str, &Decl> = BTreeMap::new();
    for d in ws {
        if let Some(prev) = seen.get(d.name.as_str()) {
            diags.push(
                Diagnostic::error(
                    DiagnosticKind::DuplicateDefinition,
                    d.span.clone(),
                    format!("`{}` is already defined at {}", d.name, prev.span),
                )
                .for_artifact(&d.name),
            );
            continue;
        }
        seen.insert(&d.name, d);
        if is_builtin(&d.name) {
            diags.push(
                Diagnostic::error(
                    DiagnosticKind::DuplicateDefinition,
                    d.span.clone(),
                    format!("`{}` is a builtin and cannot be redefined", d.name),
                )
                .for_artifact(&d.name),
            );
            continue;
        }
        model.insert(d.clone(), false);
    }
    for d in library.decls() {
        if let Some(ws_decl) = seen.get(d.name.as_str()) {
            diags.push(Diagnostic::warning(
                DiagnosticKind::Shadowed,
                ws_decl.span.clone(),
                format!("`{}` shadows the library definition at {}", d.name, d.span),
            ));
        } else {
            model.insert(d.clone(), true);
        }
    }

    let mut failed: BTreeSet<String> = BTreeSet::new();
    for d in model.decls() {
        let before = diags.len();
        check_refs(d, &model, &mut diags);
        if diags[before..].iter().any(Diagnostic::is_error) {
            failed.insert(d.name.clone());
        }
    }

    for cycle in find_cycles(&model) {
        let span = model.span(&cycle[0]).cloned().unwrap_or_else(Span::synthetic);
        diags.push(
            Diagnostic::error(
                DiagnosticKind::CyclicReference,
                span,
                format!("cyclic reference: {}", cycle.join(" -> ")),
            )
            .for_artifact(&cycle[0]),
        );
        failed.extend(cycle);
    }

    drop_failed(&mut model, failed, &mut diags);
    sort_diagnostics(&mut diags);
    (model, diags)
}

pub(crate) fn sort_diagnostics(diags: &mut Vec<Diagnostic>) {
    diags.sort_by(|a, b| {
        a.span
            .cmp(&b.span)
            .then(a.severity.cmp(&b.severity))
            .then_with(|| a.message.cmp(&b.message))
    });
    diags.dedup();
}

/// Removes `failed` declarations and, transitively, their dependents.
pub(crate) fn drop_failed(model: &mut SpecModel, mut failed: BTreeSet<String>, diags: &mut Vec<Diagnostic>) {
    loop {
        let mut newly = Vec::new();
        for d in model.decls() {
            if failed.contains(&d.name) {
                continue;
            }
            if let Some((dep, _)) = references(d).into_iter().find(|(n, _)| failed.contains(n)) {
                newly.push((d.name.clone(), d.span.clone(), dep));
            }
        }
        if newly.is_empty() {
            break;
        }
        for (name, span, dep) in newly {
            diags.push(
                Diagnostic {
                    severity: Severity::Warning,
                    ..Diagnostic::error(
                        DiagnosticKind::Skipped,
                        span,
                        format!("`{name}` skipped: it depends on `{dep}`, which has errors"),
                    )
                }
                .for_artifact(&name),
            );
            failed.insert(name);
        }
    }
    for name in failed {
        model.remove(&name);
    }
}

fn check_refs(d: &Decl, model: &SpecModel, diags: &mut Vec<Diagnostic>) {
    let err = |kind, span: &Span, msg: String| Diagnostic::error(kind, span.clone(), msg).for_artifact(&d.name);
    match &d.kind {
        DeclKind::Function(FunctionDecl { params, body }) | DeclKind::Rule(RuleDecl { params, body, .. }) => {
            body.walk(&mut |e| {
                let (name, called) = match &e.kind {
                    ExprKind::Name(n) => (n, false),
                    ExprKind::Call { name, .. } => (name, true),
                    _ => return,
                };
                if params.iter().any(|p| &p.name == name) {
                    if called {
                        diags.push(err(
                            DiagnosticKind::TypeMismatch,
                            &e.span,
                            format!("parameter `{name}` cannot be called"),
                        ));
                    }
                    return;
                }
                match model.get(name).map(|t| &t.kind) {
                    None if is_builtin(name) => {}
                    None => diags.push(err(
                        DiagnosticKind::UnresolvedReference,
                        &e.span,
                        format!("unresolved reference `{name}`"),
                    )),
                    Some(DeclKind::Sensor(_) | DeclKind::Apply(_)) => diags.push(err(
                        DiagnosticKind::InvalidDeclaration,
                        &e.span,
                        format!("`{name}` is a concrete sensor; declare a parameter and bind it with `apply`"),
                    )),
                    Some(_) => {}
                }
            });
            if let DeclKind::Rule(RuleDecl { when: Some(w), .. }) = &d.kind {
                if !model.contains(w) {
                    diags.push(err(
                        DiagnosticKind::UnresolvedReference,
                        &d.span,
                        format!("unresolved time routine `{w}`"),
                    ));
                }
            }
            let mut names = HashSet::new();
            for p in params {
                if !names.insert(&p.name) {
                    diags.push(err(
                        DiagnosticKind::DuplicateDefinition,
                        &d.span,
                        format!("parameter `{}` declared twice", p.name),
                    ));
                }
            }
        }
        DeclKind::Metric(m) => {
            if Aggregate::from_name(&m.aggregate).is_none() {
                diags.push(err(
                    DiagnosticKind::UnresolvedReference,
                    &d.span,
                    format!(
                        "unknown aggregate `{}` (expected one of {})",
                        m.aggregate,
                        Aggregate::ALL.map(|a| a.name()).join(", ")
                    ),
                ));
            }
            if !model.contains(&m.context) {
                diags.push(err(
                    DiagnosticKind::UnresolvedReference,
                    &d.span,
                    format!("unresolved metric context `{}`", m.context),
                ));
            }
        }
        DeclKind::TimeRoutine(t) => {
            for n in t.includes.iter().chain(&t.excludes) {
                if !model.contains(n) {
                    diags.push(err(
                        DiagnosticKind::UnresolvedReference,
                        &d.span,
                        format!("unresolved time routine `{n}`"),
                    ));
                }
            }
        }
        DeclKind::Apply(a) => {
            if !model.contains(&a.template) {
                diags.push(err(
                    DiagnosticKind::UnresolvedReference,
                    &d.span,
                    format!("unresolved template `{}`", a.template),
                ));
            }
            for (formal, target) in &a.bindings {
                if !model.contains(target) {
                    diags.push(err(
                        DiagnosticKind::UnresolvedReference,
                        &d.span,
                        format!("unresolved sensor `{target}` bound to `{formal}`"),
                    ));
                }
            }
        }
        DeclKind::Sensor(_) | DeclKind::Characteristic(_) => {}
    }
}

/// Every elementary cycle reachable in name order, each as a closed path
/// `[a, b, ..., a]`. A node is reported in at most one cycle.
fn find_cycles(model: &SpecModel) -> Vec<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let names: Vec<&str> = model.names().collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let edges: Vec<Vec<usize>> = names
        .iter()
        .map(|n| {
            let mut out: Vec<usize> = references(model.get(n).unwrap())
                .into_iter()
                .filter_map(|(r, _)| index.get(r.as_str()).copied())
                .collect();
            out.sort_unstable();
            out.dedup();
            out
        })
        .collect();
    let mut mark = vec![Mark::New; names.len()];
    let mut in_cycle = vec![false; names.len()];
    let mut cycles = Vec::new();

    for root in 0..names.len() {
        if mark[root] != Mark::New {
            continue;
        }
        // iterative DFS: (node, next edge index)
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        mark[root] = Mark::Active;
        while let Some(top) = stack.last_mut() {
            let node = top.0;
            if let Some(&succ) = edges[node].get(top.1) {
                top.1 += 1;
                match mark[succ] {
                    Mark::New => {
                        mark[succ] = Mark::Active;
                        stack.push((succ, 0));
                    }
                    Mark::Active => {
                        let pos = stack.iter().position(|(n, _)| *n == succ).unwrap();
                        let members: Vec<usize> = stack[pos..].iter().map(|(n, _)| *n).collect();
                        if members.iter().all(|m| !in_cycle[*m]) {
                            members.iter().for_each(|m| in_cycle[*m] = true);
                            let mut path: Vec<String> = members.iter().map(|m| names[*m].to_string()).collect();
                            path.push(names[succ].to_string());
                            cycles.push(path);
                        }
                    }
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                stack.pop();
            }
        }
    }
    cycles
}
