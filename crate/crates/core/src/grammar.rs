//! Command grammar: loading, conformance checking, sampling and line mutation.
//!
//! A grammar document is a JSON object mapping command names to argument
//! objects. Argument values are interpreted as follows:
//!
//! * an array of literals is a set of allowed values;
//! * `"No change"` (bare or as a one-element array) keeps the existing token;
//! * `["integer"]`, `["float"]`, `["identifier"]` are typed placeholders;
//! * the key `style_arg` maps alternative names to nested argument objects,
//!   one or more of which are emitted as `name args...` groups.
//!
//! The optional top-level key `$identifiers` declares the identifier pool used
//! by the `identifier` placeholder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::de::{self, Deserializer, MapAccess, SeqAccess, Visitor};
use serde::Deserialize;
use thiserror::Error;

use crate::script::ScriptLine;

pub const NO_CHANGE: &str = "No change";
pub const STYLE_ARG: &str = "style_arg";
pub const IDENTIFIER_POOL_KEY: &str = "$identifiers";

pub const INTEGER_RANGE: (i64, i64) = (0, 100_000);
pub const FLOAT_RANGE: (f64, f64) = (1e-6, 1e6);
/// Probability that a style position is rebuilt from two alternatives.
pub const TWO_STYLE_PROBABILITY: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("malformed grammar document: {0}")]
    Parse(String),
    #[error("grammar schema violation at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("no base value for unchanged argument {position} of `{command}`")]
    MissingBase { command: String, position: String },
    #[error("identifier placeholder used but the grammar declares no identifiers")]
    EmptyIdentifierPool,
    #[error("line `{line}` does not conform to the grammar: {reason}")]
    Nonconforming { line: String, reason: String },
}

fn schema(path: &str, reason: impl Into<String>) -> GrammarError {
    GrammarError::Schema {
        path: path.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaceholderKind {
    Integer,
    Float,
    Identifier,
}

impl PlaceholderKind {
    fn from_keyword(s: &str) -> Option<Self> {
        match s {
            "integer" => Some(Self::Integer),
            "float" => Some(Self::Float),
            "identifier" => Some(Self::Identifier),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArgSpec {
    ValueChoice(Vec<String>),
    Placeholder(PlaceholderKind),
    NoChange,
    StyleChoice(Vec<StyleAlternative>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleAlternative {
    pub name: String,
    pub args: Vec<ArgSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandSpec {
    pub name: String,
    pub args: Vec<ArgSpec>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grammar {
    commands: Vec<CommandSpec>,
    index: BTreeMap<String, usize>,
    identifiers: Vec<String>,
}

// Order-preserving JSON tree that keeps duplicate keys so they can be rejected.
enum Node {
    Null,
    Bool(bool),
    Number(serde_json::Number),
    String(String),
    Array(Vec<Node>),
    Object(Vec<(String, Node)>),
}

impl<'de> Deserialize<'de> for Node {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct NodeVisitor;
        impl<'de> Visitor<'de> for NodeVisitor {
            type Value = Node;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON value")
            }
            fn visit_unit<E: de::Error>(self) -> Result<Node, E> {
                Ok(Node::Null)
            }
            fn visit_bool<E: de::Error>(self, v: bool) -> Result<Node, E> {
                Ok(Node::Bool(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Node, E> {
                Ok(Node::Number(v.into()))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Node, E> {
                Ok(Node::Number(v.into()))
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Node, E> {
                serde_json::Number::from_f64(v)
                    .map(Node::Number)
                    .ok_or_else(|| E::custom("non-finite number"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Node, E> {
                Ok(Node::String(v.to_string()))
            }
            fn visit_string<E: de::Error>(self, v: String) -> Result<Node, E> {
                Ok(Node::String(v))
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Node, A::Error> {
                let mut items = Vec::new();
                while let Some(item) = seq.next_element()? {
                    items.push(item);
                }
                Ok(Node::Array(items))
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Node, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Node>()? {
                    entries.push((k, v));
                }
                Ok(Node::Object(entries))
            }
        }
        d.deserialize_any(NodeVisitor)
    }
}

fn check_unique_keys(entries: &[(String, Node)], path: &str) -> Result<(), GrammarError> {
    let mut seen = BTreeSet::new();
    for (k, _) in entries {
        if !seen.insert(k.as_str()) {
            return Err(schema(path, format!("duplicate key `{k}`")));
        }
    }
    Ok(())
}

fn literal_token(node: &Node, path: &str) -> Result<String, GrammarError> {
    match node {
        Node::Number(n) => Ok(n.to_string()),
        Node::String(s) => Ok(s.clone()),
        Node::Bool(b) => Ok(b.to_string()),
        _ => Err(schema(path, "choice values must be numbers or strings")),
    }
}

fn parse_arg_value(node: &Node, path: &str) -> Result<ArgSpec, GrammarError> {
    match node {
        Node::String(s) if s == NO_CHANGE => Ok(ArgSpec::NoChange),
        Node::String(s) => Err(schema(path, format!("unknown marker `{s}`"))),
        Node::Array(items) => {
            if items.is_empty() {
                return Err(schema(path, "empty choice list"));
            }
            let is_marker = |n: &Node| {
                matches!(n, Node::String(s) if s == NO_CHANGE || PlaceholderKind::from_keyword(s).is_some())
            };
            if items.iter().any(is_marker) {
                if items.len() != 1 {
                    return Err(schema(path, "a marker cannot be combined with other values"));
                }
                let Node::String(s) = &items[0] else { unreachable!() };
                return Ok(match PlaceholderKind::from_keyword(s) {
                    Some(kind) => ArgSpec::Placeholder(kind),
                    None => ArgSpec::NoChange,
                });
            }
            let values = items
                .iter()
                .enumerate()
                .map(|(i, n)| literal_token(n, &format!("{path}[{i}]")))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ArgSpec::ValueChoice(values))
        }
        _ => Err(schema(path, "argument must be a choice list or a marker")),
    }
}

fn is_arg_key(k: &str) -> bool {
    k.strip_prefix("arg_")
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

fn parse_arg_object(entries: &[(String, Node)], path: &str) -> Result<Vec<ArgSpec>, GrammarError> {
    check_unique_keys(entries, path)?;
    let mut args = Vec::with_capacity(entries.len());
    for (key, value) in entries {
        let sub = format!("{path}.{key}");
        if key == STYLE_ARG {
            let Node::Object(alts) = value else {
                return Err(schema(&sub, "style_arg must map alternative names to arguments"));
            };
            if alts.is_empty() {
                return Err(schema(&sub, "style_arg needs at least one alternative"));
            }
            check_unique_keys(alts, &sub)?;
            let mut parsed = Vec::with_capacity(alts.len());
            for (name, alt) in alts {
                if name.is_empty() {
                    return Err(schema(&sub, "empty alternative name"));
                }
                let alt_path = format!("{sub}.{name}");
                let alt_args = match alt {
                    Node::Object(inner) => parse_arg_object(inner, &alt_path)?,
                    other => vec![parse_arg_value(other, &alt_path)?],
                };
                parsed.push(StyleAlternative {
                    name: name.clone(),
                    args: alt_args,
                });
            }
            args.push(ArgSpec::StyleChoice(parsed));
        } else if is_arg_key(key) {
            args.push(parse_arg_value(value, &sub)?);
        } else {
            return Err(schema(&sub, format!("unknown key `{key}`")));
        }
    }
    Ok(args)
}

/// Loads and validates a grammar document.
pub fn load_grammar(text: &str) -> Result<Grammar, GrammarError> {
    let root: Node = serde_json::from_str(text).map_err(|e| GrammarError::Parse(e.to_string()))?;
    let Node::Object(entries) = root else {
        return Err(GrammarError::Parse("top level must be an object".into()));
    };
    check_unique_keys(&entries, "$")?;
    let mut grammar = Grammar::default();
    for (name, value) in &entries {
        let path = format!("$.{name}");
        if name == IDENTIFIER_POOL_KEY {
            let Node::Array(items) = value else {
                return Err(schema(&path, "identifier pool must be an array of strings"));
            };
            for item in items {
                match item {
                    Node::String(s) if !s.is_empty() => grammar.identifiers.push(s.clone()),
                    _ => return Err(schema(&path, "identifier pool must be an array of strings")),
                }
            }
            continue;
        }
        if name.is_empty() {
            return Err(schema(&path, "empty command name"));
        }
        let Node::Object(args) = value else {
            return Err(schema(&path, "command must map to an argument object"));
        };
        let spec = CommandSpec {
            name: name.clone(),
            args: parse_arg_object(args, &path)?,
        };
        grammar.index.insert(name.clone(), grammar.commands.len());
        grammar.commands.push(spec);
    }
    Ok(grammar)
}

/// Example lines supplying base values for `No change` positions when the
/// line being rebuilt has no token there.
#[derive(Debug, Clone, Default)]
pub struct Defaults {
    lines: BTreeMap<String, Vec<ScriptLine>>,
}

impl Defaults {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a ScriptLine>) -> Self {
        let mut d = Self::default();
        d.extend(lines);
        d
    }

    pub fn extend<'a>(&mut self, lines: impl IntoIterator<Item = &'a ScriptLine>) {
        for line in lines {
            let bucket = self.lines.entry(line.command.clone()).or_default();
            if !bucket.iter().any(|l| l.args == line.args) {
                bucket.push(line.clone());
            }
        }
    }

    pub fn lines_for(&self, command: &str) -> &[ScriptLine] {
        self.lines.get(command).map(Vec::as_slice).unwrap_or(&[])
    }
}

// Tokens of a line matched against argument positions.
#[derive(Debug)]
enum Aligned<'t> {
    Single(Option<&'t str>),
    Groups(Vec<(usize, Vec<Aligned<'t>>)>),
}

fn align<'t>(specs: &[ArgSpec], tokens: &'t [String], pos: &mut usize) -> Vec<Aligned<'t>> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        match spec {
            ArgSpec::StyleChoice(alts) => {
                let mut groups = Vec::new();
                while let Some(tok) = tokens.get(*pos) {
                    let Some(ai) = alts.iter().position(|a| a.name == *tok) else {
                        break;
                    };
                    *pos += 1;
                    let inner = align(&alts[ai].args, tokens, pos);
                    groups.push((ai, inner));
                }
                out.push(Aligned::Groups(groups));
            }
            _ => {
                let tok = tokens.get(*pos).map(String::as_str);
                if tok.is_some() {
                    *pos += 1;
                }
                out.push(Aligned::Single(tok));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
enum PathStep {
    Pos(usize),
    Alt(String),
}

fn lookup<'t>(aligned: &[Aligned<'t>], specs: &[ArgSpec], path: &[PathStep]) -> Option<&'t str> {
    let (PathStep::Pos(i), rest) = path.split_first()? else {
        return None;
    };
    match (aligned.get(*i)?, rest) {
        (Aligned::Single(tok), []) => *tok,
        (Aligned::Groups(groups), [PathStep::Alt(name), tail @ ..]) => {
            let ArgSpec::StyleChoice(alts) = &specs[*i] else {
                return None;
            };
            groups
                .iter()
                .find(|(ai, _)| alts[*ai].name == *name)
                .and_then(|(ai, inner)| lookup(inner, &alts[*ai].args, tail))
        }
        _ => None,
    }
}

fn render_path(path: &[PathStep]) -> String {
    path.iter()
        .map(|s| match s {
            PathStep::Pos(i) => format!("#{}", i + 1),
            PathStep::Alt(a) => a.clone(),
        })
        .collect::<Vec<_>>()
        .join("/")
}

/// Formats a float with six significant digits in plain notation.
pub fn format_float(v: f64) -> String {
    let rounded: f64 = format!("{v:.5e}").parse().unwrap_or(v);
    let s = format!("{rounded}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

struct Builder<'g, R: Rng + ?Sized> {
    grammar: &'g Grammar,
    command: &'g str,
    bases: Vec<(Vec<Aligned<'g>>, &'g [ArgSpec])>,
    rng: &'g mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn base_value(&self, path: &[PathStep]) -> Option<String> {
        self.bases
            .iter()
            .find_map(|(aligned, specs)| lookup(aligned, specs, path))
            .map(str::to_string)
    }

    fn placeholder(&mut self, kind: PlaceholderKind) -> Result<String, GrammarError> {
        Ok(match kind {
            PlaceholderKind::Integer => self
                .rng
                .random_range(INTEGER_RANGE.0..=INTEGER_RANGE.1)
                .to_string(),
            PlaceholderKind::Float => {
                let (lo, hi) = (FLOAT_RANGE.0.ln(), FLOAT_RANGE.1.ln());
                format_float(self.rng.random_range(lo..hi).exp())
            }
            PlaceholderKind::Identifier => {
                let pool = &self.grammar.identifiers;
                if pool.is_empty() {
                    return Err(GrammarError::EmptyIdentifierPool);
                }
                pool[self.rng.random_range(0..pool.len())].clone()
            }
        })
    }

    fn choose_alternatives(&mut self, n: usize) -> Vec<usize> {
        let first = self.rng.random_range(0..n);
        if n >= 2 && self.rng.random_bool(TWO_STYLE_PROBABILITY) {
            let mut second = self.rng.random_range(0..n - 1);
            if second >= first {
                second += 1;
            }
            vec![first, second]
        } else {
            vec![first]
        }
    }

    fn build(
        &mut self,
        specs: &[ArgSpec],
        path: &mut Vec<PathStep>,
        out: &mut Vec<String>,
    ) -> Result<(), GrammarError> {
        for (i, spec) in specs.iter().enumerate() {
            path.push(PathStep::Pos(i));
            match spec {
                ArgSpec::ValueChoice(values) => {
                    out.push(values[self.rng.random_range(0..values.len())].clone());
                }
                ArgSpec::Placeholder(kind) => {
                    let v = self.placeholder(*kind)?;
                    out.push(v);
                }
                ArgSpec::NoChange => match self.base_value(path) {
                    Some(v) => out.push(v),
                    None => {
                        return Err(GrammarError::MissingBase {
                            command: self.command.to_string(),
                            position: render_path(path),
                        })
                    }
                },
                ArgSpec::StyleChoice(alts) => {
                    for ai in self.choose_alternatives(alts.len()) {
                        let alt = &alts[ai];
                        out.push(alt.name.clone());
                        path.push(PathStep::Alt(alt.name.clone()));
                        self.build(&alt.args, path, out)?;
                        path.pop();
                    }
                }
            }
            path.pop();
        }
        Ok(())
    }
}

impl Grammar {
    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn command(&self, name: &str) -> Option<&CommandSpec> {
        self.index.get(name).map(|&i| &self.commands[i])
    }

    pub fn commands(&self) -> impl Iterator<Item = &CommandSpec> {
        self.commands.iter()
    }

    pub fn identifiers(&self) -> &[String] {
        &self.identifiers
    }

    fn spec(&self, name: &str) -> Result<&CommandSpec, GrammarError> {
        self.command(name)
            .ok_or_else(|| GrammarError::UnknownCommand(name.to_string()))
    }

    fn rebuild<'g, R: Rng + ?Sized>(
        &'g self,
        spec: &'g CommandSpec,
        original: Option<&'g ScriptLine>,
        defaults: &'g Defaults,
        index: usize,
        rng: &'g mut R,
    ) -> Result<ScriptLine, GrammarError> {
        let mut bases = Vec::new();
        for line in original.into_iter().chain(defaults.lines_for(&spec.name)) {
            let mut pos = 0;
            bases.push((align(&spec.args, &line.args, &mut pos), spec.args.as_slice()));
        }
        let mut builder = Builder {
            grammar: self,
            command: &spec.name,
            bases,
            rng,
        };
        let mut args = Vec::new();
        builder.build(&spec.args, &mut Vec::new(), &mut args)?;
        Ok(ScriptLine::new(index, spec.name.clone(), args))
    }

    /// Mutates every grammar-governed position of `line`.
    pub fn mutate_line<R: Rng + ?Sized>(
        &self,
        line: &ScriptLine,
        defaults: &Defaults,
        rng: &mut R,
    ) -> Result<ScriptLine, GrammarError> {
        let spec = self.spec(&line.command)?;
        self.rebuild(spec, Some(line), defaults, line.index, rng)
    }

    /// Draws a fresh conformant line for `name`.
    pub fn sample_command<R: Rng + ?Sized>(
        &self,
        name: &str,
        defaults: &Defaults,
        rng: &mut R,
    ) -> Result<ScriptLine, GrammarError> {
        let spec = self.spec(name)?;
        self.rebuild(spec, None, defaults, 0, rng)
    }

    /// Checks arity and membership of `line` against its command's rules.
    pub fn validate_line(&self, line: &ScriptLine) -> Result<(), GrammarError> {
        let spec = self.spec(&line.command)?;
        let fail = |reason: String| GrammarError::Nonconforming {
            line: line.to_string(),
            reason,
        };
        let mut pos = 0;
        let aligned = align(&spec.args, &line.args, &mut pos);
        if pos != line.args.len() {
            return Err(fail(format!(
                "{} trailing argument(s)",
                line.args.len() - pos
            )));
        }
        self.check(&spec.args, &aligned).map_err(fail)
    }

    fn check(&self, specs: &[ArgSpec], aligned: &[Aligned<'_>]) -> Result<(), String> {
        for (i, (spec, a)) in specs.iter().zip(aligned).enumerate() {
            match (spec, a) {
                (_, Aligned::Single(None)) => return Err(format!("missing argument {}", i + 1)),
                (ArgSpec::NoChange, Aligned::Single(Some(_))) => {}
                (ArgSpec::ValueChoice(values), Aligned::Single(Some(tok))) => {
                    if !values.iter().any(|v| same_value(v, tok)) {
                        return Err(format!("`{tok}` is not an allowed value"));
                    }
                }
                (ArgSpec::Placeholder(kind), Aligned::Single(Some(tok))) => {
                    let ok = match kind {
                        PlaceholderKind::Integer => tok.parse::<i64>().is_ok(),
                        PlaceholderKind::Float => tok.parse::<f64>().is_ok_and(f64::is_finite),
                        PlaceholderKind::Identifier => {
                            self.identifiers.is_empty() || self.identifiers.iter().any(|s| s == tok)
                        }
                    };
                    if !ok {
                        return Err(format!("`{tok}` does not match placeholder {kind:?}"));
                    }
                }
                (ArgSpec::StyleChoice(alts), Aligned::Groups(groups)) => {
                    if groups.is_empty() {
                        return Err(format!("argument {} needs a style keyword", i + 1));
                    }
                    for (ai, inner) in groups {
                        self.check(&alts[*ai].args, inner)?;
                    }
                }
                _ => return Err(format!("argument {} has the wrong shape", i + 1)),
            }
        }
        Ok(())
    }
}

fn same_value(allowed: &str, tok: &str) -> bool {
    if allowed == tok {
        return true;
    }
    matches!((allowed.parse::<f64>(), tok.parse::<f64>()), (Ok(a), Ok(b)) if a == b)
}

/// Positions within `line` that a mutation may never touch, as token indices.
pub fn no_change_positions(grammar: &Grammar, line: &ScriptLine) -> Vec<usize> {
    fn walk(specs: &[ArgSpec], aligned: &[Aligned<'_>], pos: &mut usize, out: &mut Vec<usize>, top: bool) {
        for (spec, a) in specs.iter().zip(aligned) {
            match (spec, a) {
                (ArgSpec::StyleChoice(alts), Aligned::Groups(groups)) => {
                    for (ai, inner) in groups {
                        *pos += 1;
                        walk(&alts[*ai].args, inner, pos, out, false);
                    }
                }
                (_, Aligned::Single(Some(_))) => {
                    if top && matches!(spec, ArgSpec::NoChange) {
                        out.push(*pos);
                    }
                    *pos += 1;
                }
                _ => {}
            }
        }
    }
    let Some(spec) = grammar.command(&line.command) else {
        return Vec::new();
    };
    let mut p = 0;
    let aligned = align(&spec.args, &line.args, &mut p);
    let mut out = Vec::new();
    walk(&spec.args, &aligned, &mut 0, &mut out, true);
    out
}
