use serde::{Deserialize, Serialize};

use super::{CategoryId, LabelScheme};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParsedDecision {
    pub label: CategoryId,
    pub justification: String,
}

/// Both variants mean "ask again"; the orchestrator never guesses a label.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no structured annotation block found")]
    Unparseable,
    #[error("label {0:?} is not a category of the scheme")]
    UnknownLabel(String),
}

/// Renders a decision in the structured-output contract.
pub fn format_decision(decision: &ParsedDecision) -> String {
    format!(
        "```annotation\nlabel: {}\njustification: {}\n```",
        decision.label, decision.justification
    )
}

/// Body of the first ```` ```annotation ```` block, or failing that of the
/// first fenced block that has a `label:` line.
fn find_block(raw: &str) -> Option<&str> {
    let mut fallback = None;
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let header_end = after.find('\n')?;
        let tag = after[..header_end].trim();
        let body_and_more = &after[header_end + 1..];
        let close = body_and_more.find("```")?;
        let body = &body_and_more[..close];
        if tag.eq_ignore_ascii_case("annotation") {
            return Some(body);
        }
        if fallback.is_none() && body.lines().any(|l| key_value(l, "label").is_some()) {
            fallback = Some(body);
        }
        rest = &body_and_more[close + 3..];
    }
    fallback
}

fn key_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let line = line.trim_start();
    let (k, v) = line.split_once(':')?;
    k.trim().eq_ignore_ascii_case(key).then_some(v)
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for q in ['"', '\'', '`'] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return s[1..s.len() - 1].trim();
        }
    }
    s
}

/// Extracts `{label, justification}` from model text.
///
/// Repair is limited to ignoring prose around the block, stripping quotes
/// around the label and matching ids or display names case-insensitively.
pub fn parse_model_output(raw: &str, scheme: &LabelScheme) -> Result<ParsedDecision, ParseError> {
    let block = find_block(raw).ok_or(ParseError::Unparseable)?;
    let mut label = None;
    let mut justification: Option<String> = None;
    for line in block.lines() {
        if label.is_none() {
            if let Some(v) = key_value(line, "label") {
                label = Some(strip_quotes(v).to_string());
                continue;
            }
        }
        match justification.as_mut() {
            Some(j) => {
                j.push('\n');
                j.push_str(line);
            }
            None => {
                if let Some(v) = key_value(line, "justification") {
                    justification = Some(v.trim().to_string());
                }
            }
        }
    }
    let label = label.ok_or(ParseError::Unparseable)?;
    let id = scheme
        .resolve_label(&label)
        .ok_or_else(|| ParseError::UnknownLabel(label.clone()))?;
    Ok(ParsedDecision {
        label: id.clone(),
        justification: justification
            .map(|j| j.trim().to_string())
            .unwrap_or_default(),
    })
}
