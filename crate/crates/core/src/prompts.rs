//! Prompt catalog: templates keyed by role and, for model-specific roles,
//! by a substring of the model name.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, ChatMessage, ChatReply, Role, ToolDeclaration, UsageRecord};

const BUILTIN: &str = include_str!("../prompts/catalog.toml");

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("reading prompt catalog {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing prompt catalog: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("prompt catalog: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolPrompt {
    pub name: String,
    pub description: String,
    pub parameter: String,
    pub parameter_description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    /// Theorem name the template asks the model to use, if any.
    #[serde(default)]
    pub theorem_name: Option<String>,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variants {
    pub default: String,
    pub variants: BTreeMap<String, Variant>,
}

impl Variants {
    /// First variant whose key occurs in the lowercased model name, else the
    /// default.
    pub fn for_model(&self, model: &str) -> &Variant {
        let model = model.to_lowercase();
        self.variants
            .iter()
            .find(|(key, _)| model.contains(key.to_lowercase().as_str()))
            .map(|(_, v)| v)
            .unwrap_or_else(|| &self.variants[&self.default])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub reask: String,
    pub tool: ToolPrompt,
    pub reasoner: Template,
    pub answer_check: Template,
    pub backtranslate: Template,
    pub equivalence: Template,
    pub prescreen: Template,
    pub autoformalizer: Variants,
    pub prover: Variants,
}

impl Catalog {
    /// The catalog shipped with the crate.
    pub fn builtin() -> &'static Catalog {
        static CATALOG: OnceLock<Catalog> = OnceLock::new();
        CATALOG.get_or_init(|| Catalog::from_toml(BUILTIN).expect("bundled prompt catalog is valid"))
    }

    pub fn from_toml(text: &str) -> Result<Self, CatalogError> {
        let c: Catalog = toml::from_str(text)?;
        for (role, v) in [("autoformalizer", &c.autoformalizer), ("prover", &c.prover)] {
            if !v.variants.contains_key(&v.default) {
                return Err(CatalogError::Invalid(format!(
                    "{role} default variant `{}` is not defined",
                    v.default
                )));
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn tool_declaration(&self) -> ToolDeclaration {
        ToolDeclaration {
            name: self.tool.name.clone(),
            description: self.tool.description.clone(),
            parameters: serde_json::json!({
                "type": "object",
                "properties": {
                    self.tool.parameter.clone(): {
                        "type": "string",
                        "description": self.tool.parameter_description,
                    }
                },
                "required": [self.tool.parameter],
            }),
        }
    }
}

/// Replaces every `<key>` in `template` in a single pass, so substituted
/// values are never scanned for further placeholders.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(i) = rest.find('<') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        for (key, value) in values {
            let tag_len = key.len() + 2;
            if rest.len() >= tag_len && rest[1..].starts_with(key) && rest[1 + key.len()..].starts_with('>') {
                out.push_str(value);
                rest = &rest[tag_len..];
                continue 'scan;
            }
        }
        out.push('<');
        rest = &rest[1..];
    }
    out.push_str(rest);
    out
}

/// Strict two-token reply parse: `True` or `False`, case-insensitive,
/// surrounding whitespace ignored.
pub fn parse_true_false(reply: &str) -> Option<bool> {
    let t = reply.trim();
    if t.eq_ignore_ascii_case("true") {
        Some(true)
    } else if t.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

/// Outcome of a yes/no question with one re-ask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Judgement {
    pub answer: Option<bool>,
    pub replies: Vec<ChatReply>,
}

/// Asks `prompt` of `role`; an unparseable reply is followed by exactly one
/// re-ask. Usage of every call is added to `usage`.
pub async fn ask_true_false(
    backends: &Backends,
    role: Role,
    prompt: &str,
    reask: &str,
    usage: &mut UsageRecord,
) -> Result<Judgement, BackendError> {
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut replies = Vec::new();
    for _ in 0..2 {
        let r = backends.chat(role, messages.clone(), &[], None).await?;
        usage.merge(&r.usage);
        let parsed = parse_true_false(&r.reply.content);
        messages.push(ChatMessage::assistant(r.reply.content.clone()));
        replies.push(r.reply);
        if let Some(answer) = parsed {
            return Ok(Judgement {
                answer: Some(answer),
                replies,
            });
        }
        messages.push(ChatMessage::user(reask));
    }
    Ok(Judgement { answer: None, replies })
}
