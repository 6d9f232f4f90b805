//! Syntactic handling of single-theorem Lean sources.
//!
//! A declaration is split at its top-level colon and top-level `:=` into
//! binders, goal and proof. The scanner ignores text inside comments and
//! string literals and tracks bracket depth, so colons inside binders or
//! set-builder notation do not confuse it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormalError {
    #[error("no theorem or lemma declaration found")]
    NoDeclaration,
    #[error("declaration has no top-level `:` separating binders from the goal")]
    NoGoal,
    #[error("declaration has no top-level `:=`")]
    NoProof,
    #[error("the statement itself contains a placeholder")]
    PlaceholderInStatement,
    #[error("no Lean code in reply")]
    NoCode,
}

/// A declaration split into its syntactic parts. Parts are stored trimmed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeclParts {
    /// Doc comments and attributes preceding the keyword.
    pub prefix: String,
    pub keyword: String,
    pub name: String,
    pub binders: String,
    pub goal: String,
    pub proof: String,
}

impl DeclParts {
    pub fn signature(&self) -> String {
        let mut s = format!("{}{} {}", self.prefix, self.keyword, self.name);
        if !self.binders.is_empty() {
            s.push(' ');
            s.push_str(&self.binders);
        }
        s.push_str(" : ");
        s.push_str(&self.goal);
        s
    }

    pub fn render(&self) -> String {
        format!("{} := {}", self.signature(), self.proof)
    }

    /// Top-level bracketed binder groups, e.g. `["(n : ℕ)", "(h : n > 0)"]`.
    pub fn binder_groups(&self) -> Vec<String> {
        binder_groups(&self.binders)
    }
}

/// Character scanner that skips comments and string literals.
struct Scan {
    chars: Vec<(usize, char)>,
}

/// Byte offsets of structural characters visible at bracket depth 0, in
/// order, together with the character.
fn top_level(src: &str) -> Vec<(usize, char)> {
    let scan = Scan {
        chars: src.char_indices().collect(),
    };
    scan.run()
}

impl Scan {
    fn run(&self) -> Vec<(usize, char)> {
        let mut out = Vec::new();
        let mut depth = 0i32;
        let mut i = 0;
        let n = self.chars.len();
        while i < n {
            let (pos, c) = self.chars[i];
            let next = self.chars.get(i + 1).map(|x| x.1);
            match c {
                '-' if next == Some('-') => {
                    while i < n && self.chars[i].1 != '\n' {
                        i += 1;
                    }
                    continue;
                }
                '/' if next == Some('-') => {
                    let mut nest = 1;
                    i += 2;
                    while i < n && nest > 0 {
                        let c = self.chars[i].1;
                        let nx = self.chars.get(i + 1).map(|x| x.1);
                        if c == '/' && nx == Some('-') {
                            nest += 1;
                            i += 2;
                        } else if c == '-' && nx == Some('/') {
                            nest -= 1;
                            i += 2;
                        } else {
                            i += 1;
                        }
                    }
                    continue;
                }
                '"' => {
                    i += 1;
                    while i < n && self.chars[i].1 != '"' {
                        if self.chars[i].1 == '\\' {
                            i += 1;
                        }
                        i += 1;
                    }
                }
                '(' | '[' | '{' | '⦃' | '⟨' => depth += 1,
                ')' | ']' | '}' | '⦄' | '⟩' => depth -= 1,
                _ if depth == 0 => out.push((pos, c)),
                _ => {}
            }
            i += 1;
        }
        out
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '\'' | '.' | '!' | '?') || ('₀'..='₉').contains(&c)
}

/// Finds the first top-level occurrence of `word` delimited as a token.
fn find_keyword(src: &str, visible: &[(usize, char)], word: &str) -> Option<usize> {
    visible.iter().map(|(p, _)| *p).find(|&p| {
        src[p..].starts_with(word)
            && !src[..p].chars().next_back().is_some_and(is_ident_char)
            && !src[p + word.len()..].chars().next().is_some_and(is_ident_char)
    })
}

pub fn parse_declaration(src: &str) -> Result<DeclParts, FormalError> {
    let visible = top_level(src);
    let kw_pos = ["theorem", "lemma"]
        .iter()
        .filter_map(|kw| find_keyword(src, &visible, kw).map(|p| (p, *kw)))
        .min_by_key(|(p, _)| *p)
        .ok_or(FormalError::NoDeclaration)?;
    let (kw_start, keyword) = kw_pos;
    let after_kw = kw_start + keyword.len();
    let rest = &src[after_kw..];
    let name_start = after_kw + (rest.len() - rest.trim_start().len());
    let name_end = src[name_start..]
        .char_indices()
        .find(|(_, c)| c.is_whitespace() || matches!(c, '(' | '[' | '{' | '⦃' | ':'))
        .map(|(i, _)| name_start + i)
        .unwrap_or(src.len());
    if name_end == name_start {
        return Err(FormalError::NoDeclaration);
    }

    let colon = visible
        .iter()
        .map(|(p, _)| *p)
        .find(|&p| p >= name_end && src[p..].starts_with(':') && !src[p..].starts_with(":="))
        .ok_or(FormalError::NoGoal)?;
    let assign = visible
        .iter()
        .map(|(p, _)| *p)
        .find(|&p| p > colon && src[p..].starts_with(":="))
        .ok_or(FormalError::NoProof)?;

    Ok(DeclParts {
        prefix: src[..kw_start].to_string(),
        keyword: keyword.to_string(),
        name: src[name_start..name_end].to_string(),
        binders: src[name_end..colon].trim().to_string(),
        goal: src[colon + 1..assign].trim().to_string(),
        proof: src[assign + 2..].trim().to_string(),
    })
}

fn binder_groups(binders: &str) -> Vec<String> {
    let mut groups = Vec::new();
    let mut depth = 0i32;
    let mut start = None;
    for (i, c) in binders.char_indices() {
        match c {
            '(' | '[' | '{' | '⦃' => {
                if depth == 0 {
                    start = Some(i);
                }
                depth += 1;
            }
            ')' | ']' | '}' | '⦄' => {
                depth -= 1;
                if depth == 0 {
                    if let Some(s) = start.take() {
                        groups.push(binders[s..i + c.len_utf8()].to_string());
                    }
                }
            }
            _ => {}
        }
    }
    groups
}

/// Number of standalone `sorry` tokens outside comments and strings.
pub fn count_sorry(src: &str) -> usize {
    code_positions(src)
        .into_iter()
        .filter(|&p| {
            src[p..].starts_with("sorry")
                && !src[..p].chars().next_back().is_some_and(is_ident_char)
                && !src[p + 5..].chars().next().is_some_and(is_ident_char)
        })
        .count()
}

/// Positions of characters at any bracket depth, outside comments/strings.
fn code_positions(src: &str) -> Vec<usize> {
    // Flatten brackets to spaces and reuse the depth-0 scan.
    let flat: String = src
        .chars()
        .map(|c| match c {
            '(' | '[' | '{' | '⦃' | '⟨' | ')' | ']' | '}' | '⦄' | '⟩' => ' ',
            c => c,
        })
        .collect();
    // Replacement chars may differ in byte width; map back through indices.
    let src_idx: Vec<usize> = src.char_indices().map(|(p, _)| p).collect();
    let flat_idx: Vec<usize> = flat.char_indices().map(|(p, _)| p).collect();
    top_level(&flat)
        .into_iter()
        .filter_map(|(fp, _)| flat_idx.binary_search(&fp).ok().map(|k| src_idx[k]))
        .collect()
}

/// Extracts Lean source from a model reply: the last fenced code block, or
/// the whole reply if it has no fence but contains a declaration.
pub fn extract_lean_code(reply: &str) -> Option<String> {
    let mut blocks = Vec::new();
    let mut rest = reply;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                blocks.push(body[..close].to_string());
                rest = &body[close + 3..];
            }
            None => {
                blocks.push(body.to_string());
                break;
            }
        }
    }
    if let Some(b) = blocks.into_iter().rev().find(|b| !b.trim().is_empty()) {
        return Some(b.trim().to_string());
    }
    let t = reply.trim();
    (t.contains("theorem") || t.contains("lemma")).then(|| t.to_string())
}

const PREAMBLE_COMMANDS: &[&str] = &[
    "open",
    "set_option",
    "universe",
    "namespace",
    "section",
    "noncomputable",
    "variable",
];

/// A formal proof-assistant statement with a single placeholder hole.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormalStatement {
    /// Non-import preamble (`open`, `set_option`, ...). Imports are governed
    /// by the checker's startup header.
    pub header: String,
    pub body: String,
    pub theorem_name: String,
    pub origin_step: String,
    #[serde(default)]
    pub injected_hypotheses: Vec<u64>,
    #[serde(default)]
    pub backtranslation: Option<String>,
}

impl FormalStatement {
    /// Builds a statement from Lean code, normalizing the proof to a single
    /// `by sorry` hole.
    pub fn from_code(code: &str, origin_step: &str) -> Result<Self, FormalError> {
        let decl = parse_declaration(code)?;
        if count_sorry(&decl.signature()) > 0 {
            return Err(FormalError::PlaceholderInStatement);
        }
        let mut header = Vec::new();
        let mut attached = Vec::new();
        for line in decl.prefix.lines() {
            let t = line.trim_start();
            let word = t.split_whitespace().next().unwrap_or("");
            if word == "import" {
                continue;
            }
            let preamble = PREAMBLE_COMMANDS.contains(&word) && !t.trim_end().ends_with(" in");
            if preamble {
                header.push(line);
            } else if !t.is_empty() {
                attached.push(line);
            }
        }
        let mut prefix = attached.join("\n");
        if !prefix.is_empty() {
            prefix.push('\n');
        }
        let normalized = DeclParts {
            prefix,
            proof: "by sorry".into(),
            ..decl
        };
        Ok(Self {
            header: header.join("\n"),
            body: normalized.render(),
            theorem_name: normalized.name.clone(),
            origin_step: origin_step.to_string(),
            injected_hypotheses: Vec::new(),
            backtranslation: None,
        })
    }

    pub fn parts(&self) -> Result<DeclParts, FormalError> {
        parse_declaration(&self.body)
    }

    pub fn goal(&self) -> Result<String, FormalError> {
        self.parts().map(|p| p.goal)
    }

    /// Header and body as submitted after the checker's startup header.
    pub fn source(&self) -> String {
        join_source(&self.header, &self.body)
    }

    /// Source with the placeholder replaced by `proof` (text after `:=`).
    pub fn with_proof(&self, proof: &str) -> Result<String, FormalError> {
        let mut parts = self.parts()?;
        parts.proof = proof.trim().to_string();
        Ok(join_source(&self.header, &parts.render()))
    }

    pub fn renamed(&self, name: &str) -> Result<Self, FormalError> {
        let mut parts = self.parts()?;
        parts.name = name.to_string();
        Ok(Self {
            body: parts.render(),
            theorem_name: name.to_string(),
            ..self.clone()
        })
    }

    /// Replacement body keeping binders and wrapping the goal.
    pub fn with_goal(&self, goal: &str, name: &str) -> Result<Self, FormalError> {
        let mut parts = self.parts()?;
        parts.goal = goal.to_string();
        parts.name = name.to_string();
        Ok(Self {
            body: parts.render(),
            theorem_name: name.to_string(),
            ..self.clone()
        })
    }

    pub fn placeholder_count(&self) -> usize {
        count_sorry(&self.body)
    }
}

fn join_source(header: &str, body: &str) -> String {
    if header.trim().is_empty() {
        body.to_string()
    } else {
        format!("{header}\n\n{body}")
    }
}

/// Proof text following the top-level `:=` of the first declaration in a
/// model reply.
pub fn extract_proof(reply: &str) -> Option<String> {
    let code = extract_lean_code(reply)?;
    let parts = parse_declaration(&code).ok()?;
    let proof = parts.proof.trim();
    (!proof.is_empty()).then(|| proof.to_string())
}
