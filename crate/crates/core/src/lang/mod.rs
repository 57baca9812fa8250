//! The specification language: parsing, name resolution, type checking and
//! template instantiation.
//!
//! A workspace is a set of `.afs` files plus an optional library directory.
//! The pipeline is [`parse`] per file, [`resolve`] over all fragments, then
//! [`typecheck`], which also instantiates every `apply` declaration.

pub mod ast;
mod check;
mod diag;
mod format;
mod lexer;
mod parser;
mod resolve;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub use ast::*;
pub use check::{instantiate, typecheck, typecheck_lenient, Instance, TypedModel};
pub use diag::{Diagnostic, DiagnosticKind, Diagnostics, Severity};
pub use format::{format_decl, format_decls, format_expr, format_fragment};
pub use parser::{is_reserved, parse, parse_expr};
pub use resolve::{references, resolve, resolve_lenient};

/// Pointwise numeric builtins available to every expression.
pub const BUILTINS: [&str; 7] = ["MIN", "MAX", "ABS", "AVERAGE", "SUM", "MAXIMUM", "MINIMUM"];

pub fn is_builtin(name: &str) -> bool {
    BUILTINS.contains(&name)
}

/// Resolved set of declarations, keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpecModel {
    decls: BTreeMap<String, Decl>,
    from_library: BTreeSet<String>,
}

impl SpecModel {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Decl> {
        self.decls.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.decls.contains_key(name)
    }

    pub fn decls(&self) -> impl Iterator<Item = &Decl> {
        self.decls.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.decls.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }

    pub fn is_library(&self, name: &str) -> bool {
        self.from_library.contains(name)
    }

    pub fn span(&self, name: &str) -> Option<&ast::Span> {
        self.decls.get(name).map(|d| &d.span)
    }

    pub fn sensor(&self, name: &str) -> Option<&SensorDecl> {
        match self.get(name).map(|d| &d.kind) {
            Some(DeclKind::Sensor(s)) => Some(s),
            _ => None,
        }
    }

    pub fn sensors(&self) -> impl Iterator<Item = (&str, &SensorDecl)> {
        self.decls.iter().filter_map(|(n, d)| match &d.kind {
            DeclKind::Sensor(s) => Some((n.as_str(), s)),
            _ => None,
        })
    }

    pub fn time_routine(&self, name: &str) -> Option<&TimeRoutineDecl> {
        match self.get(name).map(|d| &d.kind) {
            Some(DeclKind::TimeRoutine(t)) => Some(t),
            _ => None,
        }
    }

    pub fn metrics(&self) -> impl Iterator<Item = (&str, &MetricDecl)> {
        self.decls.iter().filter_map(|(n, d)| match &d.kind {
            DeclKind::Metric(m) => Some((n.as_str(), m)),
            _ => None,
        })
    }

    /// Workspace declarations only, in name order.
    pub fn workspace_decls(&self) -> impl Iterator<Item = &Decl> {
        self.decls.values().filter(|d| !self.from_library.contains(&d.name))
    }

    /// Canonical text of the workspace declarations.
    pub fn format(&self) -> String {
        format_decls(self.workspace_decls())
    }

    pub(crate) fn insert(&mut self, decl: Decl, library: bool) {
        if library {
            self.from_library.insert(decl.name.clone());
        } else {
            self.from_library.remove(&decl.name);
        }
        self.decls.insert(decl.name.clone(), decl);
    }

    pub(crate) fn remove(&mut self, name: &str) -> Option<Decl> {
        self.from_library.remove(name);
        self.decls.remove(name)
    }
}

/// Reads and parses every `.afs` file directly inside `dir`, in file-name order.
pub fn parse_dir(dir: &Path) -> std::io::Result<Result<Vec<Fragment>, Vec<Diagnostic>>> {
    let mut files: Vec<_> = match std::fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "afs"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e),
    };
    files.sort();
    parse_files(&files)
}

pub fn parse_files(files: &[impl AsRef<Path>]) -> std::io::Result<Result<Vec<Fragment>, Vec<Diagnostic>>> {
    let mut fragments = Vec::new();
    let mut errors = Vec::new();
    for f in files {
        let path = f.as_ref();
        let text = std::fs::read_to_string(path)?;
        match parse(&text, &path.display().to_string()) {
            Ok(fr) => fragments.push(fr),
            Err(mut e) => errors.append(&mut e),
        }
    }
    Ok(if errors.is_empty() { Ok(fragments) } else { Err(errors) })
}
