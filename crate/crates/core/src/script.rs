//! Simulation scripts: one command per line, `#` starts a comment.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScriptLine {
    /// 0-based position within the script.
    pub index: usize,
    pub command: String,
    pub args: Vec<String>,
}

impl ScriptLine {
    pub fn new(index: usize, command: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            index,
            command: command.into(),
            args,
        }
    }

    /// Parses a single command line. Blank or comment-only text yields `None`.
    pub fn parse(index: usize, text: &str) -> Option<Self> {
        let body = match text.find('#') {
            Some(pos) => &text[..pos],
            None => text,
        };
        let mut tokens = body.split_whitespace().map(str::to_string);
        let command = tokens.next()?;
        Some(Self::new(index, command, tokens.collect()))
    }
}

impl fmt::Display for ScriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.command)?;
        for arg in &self.args {
            write!(f, " {arg}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("script contains no commands")]
    Empty,
    #[error("line {line}: {reason}")]
    Unreadable { line: usize, reason: String },
}

impl ParseError {
    /// 1-based source line of the failure, when there is one.
    pub fn line(&self) -> Option<usize> {
        match self {
            ParseError::Empty => None,
            ParseError::Unreadable { line, .. } => Some(*line),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Script {
    lines: Vec<ScriptLine>,
}

impl Script {
    /// Builds a script from lines, renumbering indices densely.
    pub fn from_lines(lines: impl IntoIterator<Item = ScriptLine>) -> Self {
        let lines = lines
            .into_iter()
            .enumerate()
            .map(|(i, mut l)| {
                l.index = i;
                l
            })
            .collect();
        Self { lines }
    }

    pub fn lines(&self) -> &[ScriptLine] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Returns a copy with line `index` replaced.
    pub fn with_line(&self, index: usize, mut line: ScriptLine) -> Self {
        let mut lines = self.lines.clone();
        line.index = index;
        lines[index] = line;
        Self { lines }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn is_command_token(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '/')
}

/// Parses script text. Every token must be printable ASCII and every command
/// name must look like an identifier.
pub fn parse_script(text: &str) -> Result<Script, ParseError> {
    let mut lines = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if let Some(c) = raw
            .chars()
            .find(|c| !(c.is_ascii_graphic() || *c == ' ' || *c == '\t' || *c == '\r'))
        {
            return Err(ParseError::Unreadable {
                line: lineno,
                reason: format!("unreadable character {:?}", c),
            });
        }
        let Some(line) = ScriptLine::parse(lines.len(), raw) else {
            continue;
        };
        if !is_command_token(&line.command) {
            return Err(ParseError::Unreadable {
                line: lineno,
                reason: format!("invalid command token `{}`", line.command),
            });
        }
        lines.push(line);
    }
    if lines.is_empty() {
        return Err(ParseError::Empty);
    }
    Ok(Script { lines })
}

/// Parses raw bytes, rejecting invalid UTF-8 with the offending line number.
pub fn parse_script_bytes(bytes: &[u8]) -> Result<Script, ParseError> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_script(text),
        Err(e) => {
            let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
            Err(ParseError::Unreadable {
                line,
                reason: "invalid UTF-8".to_string(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG3_LIKE: &str = "\
units          metal
dimension      3
boundary       p p p
atom_style     charge
lattice        fcc 5.43
region         box block 0 10 0 10 0 10
create_box     1 box
create_atoms   1 box
mass           1 12.01
set            group all charge 0.0
pair_style     comb
pair_coeff     * * ffield.comb Cu
timestep       0.005
thermo         1
thermo_style   custom step temp pe ke etotal press vol
thermo_modify  flush yes
velocity       all create 300 12345 dist gaussian
fix            1 all nve
run 10
";

    #[test]
    fn nineteen_line_script() {
        let s = parse_script(FIG3_LIKE).unwrap();
        assert_eq!(s.len(), 19);
        assert_eq!(s.lines()[18].command, "run");
        assert_eq!(s.lines()[18].args, vec!["10"]);
        assert!(s.lines().iter().enumerate().all(|(i, l)| l.index == i));
    }

    #[test]
    fn comments_only_is_empty() {
        assert_eq!(parse_script("# a\n\n   # b\n"), Err(ParseError::Empty));
    }

    #[test]
    fn minimal_script() {
        let s = parse_script("run 10").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.to_text(), "run 10\n");
    }

    #[test]
    fn trailing_comments_are_stripped() {
        let s = parse_script("run 10 # ten steps\n").unwrap();
        assert_eq!(s.lines()[0].args, vec!["10"]);
    }

    #[test]
    fn unreadable_tokens_report_line() {
        let err = parse_script("units lj\nru\u{7}n 10\n").unwrap_err();
        assert_eq!(err.line(), Some(2));
        let err = parse_script("units lj\n9run 10\n").unwrap_err();
        assert_eq!(err.line(), Some(2));
        let err = parse_script_bytes(b"units lj\nrun \xff\n").unwrap_err();
        assert_eq!(err.line(), Some(2));
    }
}
