//! Annotation rubric, prompt rendering and structured-output parsing.

mod parse;
mod prompt;

use std::borrow::Borrow;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use parse::{format_decision, parse_model_output, ParseError, ParsedDecision};
pub use prompt::{
    render_adjudication_prompt, render_annotation_prompt, render_verification_prompt, Candidate,
    PromptError, PromptTemplates, RenderOptions, RenderedPrompt,
};

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(String);

impl CategoryId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&self.0, f)
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CategoryId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl From<String> for CategoryId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl Borrow<str> for CategoryId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl PartialEq<str> for CategoryId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for CategoryId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// Pipeline stage a prompt, record or usage figure belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Annotate,
    Verify,
    Adjudicate,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Annotate, Stage::Verify, Stage::Adjudicate];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Annotate => "annotate",
            Stage::Verify => "verify",
            Stage::Adjudicate => "adjudicate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub display_name: String,
    pub definition: String,
    #[serde(default)]
    pub positive_examples: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum SchemeError {
    #[error("failed to read scheme {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid scheme file: {0}")]
    Format(#[from] toml::de::Error),
    #[error("scheme has no categories")]
    Empty,
    #[error("duplicate category id {0:?}")]
    DuplicateCategory(String),
    #[error("none category {0:?} is not one of the scheme categories")]
    MissingNoneCategory(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemeFile {
    scheme_id: String,
    none_category: String,
    categories: Vec<Category>,
}

/// An annotation rubric: ordered categories plus the id of the "no move" class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelScheme {
    scheme_id: String,
    categories: Vec<Category>,
    none_category_id: CategoryId,
}

const TALK_MOVES: &str = include_str!("../../schemes/talk_moves.toml");

impl LabelScheme {
    pub fn new(
        scheme_id: impl Into<String>,
        categories: Vec<Category>,
        none_category_id: CategoryId,
    ) -> Result<Self, SchemeError> {
        if categories.is_empty() {
            return Err(SchemeError::Empty);
        }
        let mut seen = HashSet::new();
        for c in &categories {
            if !seen.insert(c.id.as_str()) {
                return Err(SchemeError::DuplicateCategory(c.id.to_string()));
            }
        }
        if !seen.contains(none_category_id.as_str()) {
            return Err(SchemeError::MissingNoneCategory(
                none_category_id.to_string(),
            ));
        }
        Ok(Self {
            scheme_id: scheme_id.into(),
            categories,
            none_category_id,
        })
    }

    /// The built-in seven-category Talk Moves rubric.
    pub fn talk_moves() -> Self {
        Self::from_toml_str(TALK_MOVES).expect("built-in scheme is valid")
    }

    pub fn from_toml_str(src: &str) -> Result<Self, SchemeError> {
        let file: SchemeFile = toml::from_str(src)?;
        Self::new(
            file.scheme_id,
            file.categories,
            CategoryId::from(file.none_category),
        )
    }

    pub fn load(path: &Path) -> Result<Self, SchemeError> {
        let src = std::fs::read_to_string(path).map_err(|source| SchemeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&src)
    }

    pub fn scheme_id(&self) -> &str {
        &self.scheme_id
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn category_ids(&self) -> impl Iterator<Item = &CategoryId> {
        self.categories.iter().map(|c| &c.id)
    }

    pub fn none_category(&self) -> &CategoryId {
        &self.none_category_id
    }

    pub fn contains(&self, id: &str) -> bool {
        self.categories.iter().any(|c| c.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    pub fn category(&self, id: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    /// Resolves a model-supplied label: exact id or display name, ignoring case.
    pub fn resolve_label(&self, raw: &str) -> Option<&CategoryId> {
        let raw = raw.trim();
        self.categories
            .iter()
            .find(|c| {
                c.id.as_str().eq_ignore_ascii_case(raw) || c.display_name.eq_ignore_ascii_case(raw)
            })
            .map(|c| &c.id)
    }

    /// Rubric block inserted into every prompt.
    pub fn rubric_text(&self) -> String {
        let mut out = String::new();
        for c in &self.categories {
            out.push_str(&format!(
                "- {} ({}): {}\n",
                c.id, c.display_name, c.definition
            ));
            if !c.positive_examples.is_empty() {
                let quoted: Vec<String> = c
                    .positive_examples
                    .iter()
                    .map(|e| format!("\"{e}\""))
                    .collect();
                out.push_str(&format!("  Examples: {}\n", quoted.join("; ")));
            }
        }
        out.pop();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scheme_has_seven_categories_in_table_order() {
        let s = LabelScheme::talk_moves();
        let ids: Vec<&str> = s.category_ids().map(CategoryId::as_str).collect();
        assert_eq!(
            ids,
            [
                "keep_together",
                "revoicing",
                "press_reason",
                "relate",
                "press_accuracy",
                "none",
                "restating"
            ]
        );
        assert_eq!(s.none_category(), "none");
    }

    #[test]
    fn custom_scheme_loads() {
        let src = r#"
            scheme_id = "tiny"
            none_category = "other"
            [[categories]]
            id = "question"
            display_name = "Question"
            definition = "asks something"
            [[categories]]
            id = "praise"
            display_name = "Praise"
            definition = "praises"
            [[categories]]
            id = "other"
            display_name = "Other"
            definition = "anything else"
        "#;
        let s = LabelScheme::from_toml_str(src).unwrap();
        assert_eq!(s.categories().len(), 3);
        assert_eq!(s.resolve_label("PRAISE").unwrap(), "praise");
    }

    #[test]
    fn missing_none_category_is_rejected() {
        let src = r#"
            scheme_id = "tiny"
            none_category = "nothing"
            [[categories]]
            id = "a"
            display_name = "A"
            definition = "a"
        "#;
        assert!(matches!(
            LabelScheme::from_toml_str(src),
            Err(SchemeError::MissingNoneCategory(_))
        ));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let cat = Category {
            id: "a".into(),
            display_name: "A".into(),
            definition: "a".into(),
            positive_examples: vec![],
        };
        let err = LabelScheme::new("x", vec![cat.clone(), cat], "a".into()).unwrap_err();
        assert!(matches!(err, SchemeError::DuplicateCategory(id) if id == "a"));
    }

    #[test]
    fn display_names_resolve_case_insensitively() {
        let s = LabelScheme::talk_moves();
        assert_eq!(s.resolve_label("press for reason").unwrap(), "press_reason");
        assert_eq!(s.resolve_label(" Keep Together ").unwrap(), "keep_together");
        assert!(s.resolve_label("Keeping Everyone Together!").is_none());
    }
}
