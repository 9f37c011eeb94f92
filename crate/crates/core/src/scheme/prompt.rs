use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{format_decision, LabelScheme, ParsedDecision, Stage};
use crate::corpus::{Segment, SpeakerRole, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Rubric,
    Context,
    Target,
    Prior,
    Candidates,
}

impl Slot {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "rubric" => Slot::Rubric,
            "context" => Slot::Context,
            "target" => Slot::Target,
            "prior" => Slot::Prior,
            "candidates" => Slot::Candidates,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Slot::Rubric => "rubric",
            Slot::Context => "context",
            Slot::Target => "target",
            Slot::Prior => "prior",
            Slot::Candidates => "candidates",
        }
    }
}

#[derive(Debug, Clone)]
enum Piece {
    Text(String),
    Slot(Slot),
}

#[derive(Debug, Clone)]
struct Template {
    pieces: Vec<Piece>,
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("failed to read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage} template: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { stage: Stage, name: String },
    #[error("{stage} template: placeholder {{{name}}} is not available at this stage")]
    UnavailablePlaceholder { stage: Stage, name: &'static str },
    #[error("{stage} template: required placeholder {{{name}}} is missing")]
    MissingPlaceholder { stage: Stage, name: &'static str },
    #[error("{stage} template: unclosed placeholder")]
    Unclosed { stage: Stage },
    #[error("target {target:?} is not a target of segment {segment:?}")]
    TargetNotInSegment { target: String, segment: String },
    #[error("label {0:?} is not in the scheme")]
    LabelNotInScheme(String),
    #[error("adjudication needs at least two candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("no disagreement: all candidates carry label {0:?}")]
    NoDisagreement(String),
}

impl Template {
    fn parse(stage: Stage, src: &str) -> Result<Self, PromptError> {
        let (allowed, required): (&[Slot], &[Slot]) = match stage {
            Stage::Annotate => (
                &[Slot::Rubric, Slot::Context, Slot::Target],
                &[Slot::Rubric, Slot::Context, Slot::Target],
            ),
            Stage::Verify => (
                &[Slot::Rubric, Slot::Context, Slot::Target, Slot::Prior],
                &[Slot::Rubric, Slot::Context, Slot::Target, Slot::Prior],
            ),
            Stage::Adjudicate => (
                &[Slot::Rubric, Slot::Context, Slot::Target, Slot::Candidates],
                &[Slot::Rubric, Slot::Context, Slot::Target, Slot::Candidates],
            ),
        };

        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut rest = src;
        while let Some(pos) = rest.find(['{', '}']) {
            text.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if tail.starts_with("{{") || tail.starts_with("}}") {
                text.push_str(&tail[..1]);
                rest = &tail[2..];
                continue;
            }
            if let Some(after) = tail.strip_prefix('}') {
                text.push('}');
                rest = after;
                continue;
            }
            let close = tail.find('}').ok_or(PromptError::Unclosed { stage })?;
            let name = &tail[1..close];
            let slot = Slot::parse(name).ok_or_else(|| PromptError::UnknownPlaceholder {
                stage,
                name: name.to_string(),
            })?;
            if !allowed.contains(&slot) {
                return Err(PromptError::UnavailablePlaceholder {
                    stage,
                    name: slot.name(),
                });
            }
            if !text.is_empty() {
                pieces.push(Piece::Text(std::mem::take(&mut text)));
            }
            pieces.push(Piece::Slot(slot));
            rest = &tail[close + 1..];
        }
        text.push_str(rest);
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }

        for slot in required {
            if !pieces
                .iter()
                .any(|p| matches!(p, Piece::Slot(s) if s == slot))
            {
                return Err(PromptError::MissingPlaceholder {
                    stage,
                    name: slot.name(),
                });
            }
        }
        Ok(Self { pieces })
    }

    fn render(&self, fill: impl Fn(Slot) -> String) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(&fill(*s)),
            }
        }
        out
    }
}

/// Prompt templates for the three stages.
///
/// Templates are plain text with `{rubric}`, `{context}`, `{target}`,
/// `{prior}` (verify only) and `{candidates}` (adjudicate only) placeholders;
/// `{{` and `}}` produce literal braces. The structured-output instruction is
/// appended by the renderer and is not part of the template.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    annotate: Template,
    verify: Template,
    adjudicate: Template,
}

const ANNOTATE: &str = include_str!("../../templates/annotate.txt");
const VERIFY: &str = include_str!("../../templates/verify.txt");
const ADJUDICATE: &str = include_str!("../../templates/adjudicate.txt");

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::from_strings(ANNOTATE, VERIFY, ADJUDICATE).expect("built-in templates are valid")
    }
}

impl PromptTemplates {
    pub fn from_strings(
        annotate: &str,
        verify: &str,
        adjudicate: &str,
    ) -> Result<Self, PromptError> {
        Ok(Self {
            annotate: Template::parse(Stage::Annotate, annotate)?,
            verify: Template::parse(Stage::Verify, verify)?,
            adjudicate: Template::parse(Stage::Adjudicate, adjudicate)?,
        })
    }

    /// Loads `annotate.txt`, `verify.txt` and `adjudicate.txt` from `dir`.
    /// Files that do not exist fall back to the built-in template.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str, fallback: &str| -> Result<String, PromptError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(fallback.to_string());
            }
            std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        Self::from_strings(
            &read("annotate.txt", ANNOTATE)?,
            &read("verify.txt", VERIFY)?,
            &read("adjudicate.txt", ADJUDICATE)?,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Whether the verification prompt repeats the whole segment or only the
    /// target turn.
    pub verify_with_context: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            verify_with_context: true,
        }
    }
}

/// An adjudication candidate. `role_tag` names the candidate's role in the
/// pipeline (for example `initial` or `verified`) and never the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub role_tag: String,
    pub decision: ParsedDecision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub stage: Stage,
    pub text: String,
    pub target_utterance_id: String,
    /// Decision under audit (verify stage).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<ParsedDecision>,
    /// Decisions under review (adjudicate stage).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
}

impl RenderedPrompt {
    /// Hex SHA-256 of the prompt text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

fn role_name(role: SpeakerRole) -> &'static str {
    match role {
        SpeakerRole::Teacher => "Teacher",
        SpeakerRole::Student => "Student",
    }
}

fn utterance_line(u: &Utterance, target: bool) -> String {
    if target {
        format!(
            ">>> [{}] {}: {} <<<",
            u.index,
            role_name(u.speaker_role),
            u.text
        )
    } else {
        format!("[{}] {}: {}", u.index, role_name(u.speaker_role), u.text)
    }
}

fn context_block<'a>(turns: impl Iterator<Item = &'a Utterance>, target_id: &str) -> String {
    turns
        .map(|u| utterance_line(u, u.utterance_id == target_id))
        .collect::<Vec<_>>()
        .join("\n")
}

fn output_instruction(scheme: &LabelScheme, allowed: Option<&[&str]>) -> String {
    let ids: Vec<&str> = match allowed {
        Some(a) => a.to_vec(),
        None => scheme.category_ids().map(|c| c.as_str()).collect(),
    };
    format!(
        "\n\nRespond with exactly one fenced block in this form and nothing else inside it:\n```annotation\nlabel: <one of: {}>\njustification: <brief rationale grounded in the rubric>\n```\n",
        ids.join(", ")
    )
}

fn target_utterance<'a>(
    segment: &'a Segment,
    target_id: &str,
) -> Result<&'a Utterance, PromptError> {
    if !segment.contains_target(target_id) {
        return Err(PromptError::TargetNotInSegment {
            target: target_id.to_string(),
            segment: segment.segment_id.clone(),
        });
    }
    segment
        .utterance(target_id)
        .ok_or_else(|| PromptError::TargetNotInSegment {
            target: target_id.to_string(),
            segment: segment.segment_id.clone(),
        })
}

fn target_reference(u: &Utterance) -> String {
    format!("turn {} (id {})", u.index, u.utterance_id)
}

pub fn render_annotation_prompt(
    templates: &PromptTemplates,
    scheme: &LabelScheme,
    segment: &Segment,
    target_id: &str,
) -> Result<RenderedPrompt, PromptError> {
    let target = target_utterance(segment, target_id)?;
    let rubric = scheme.rubric_text();
    let context = context_block(segment.utterances.iter(), target_id);
    let mut text = templates.annotate.render(|slot| match slot {
        Slot::Rubric => rubric.clone(),
        Slot::Context => context.clone(),
        Slot::Target => target_reference(target),
        Slot::Prior | Slot::Candidates => String::new(),
    });
    text.push_str(&output_instruction(scheme, None));
    Ok(RenderedPrompt {
        stage: Stage::Annotate,
        text,
        target_utterance_id: target_id.to_string(),
        prior: None,
        candidates: Vec::new(),
    })
}

pub fn render_verification_prompt(
    templates: &PromptTemplates,
    scheme: &LabelScheme,
    segment: &Segment,
    target_id: &str,
    prior: &ParsedDecision,
    options: RenderOptions,
) -> Result<RenderedPrompt, PromptError> {
    if !scheme.contains(prior.label.as_str()) {
        return Err(PromptError::LabelNotInScheme(prior.label.to_string()));
    }
    let target = target_utterance(segment, target_id)?;
    let rubric = scheme.rubric_text();
    let context = if options.verify_with_context {
        context_block(segment.utterances.iter(), target_id)
    } else {
        context_block(std::iter::once(target), target_id)
    };
    let prior_text = format_decision(prior);
    let mut text = templates.verify.render(|slot| match slot {
        Slot::Rubric => rubric.clone(),
        Slot::Context => context.clone(),
        Slot::Target => target_reference(target),
        Slot::Prior => prior_text.clone(),
        Slot::Candidates => String::new(),
    });
    text.push_str(&output_instruction(scheme, None));
    Ok(RenderedPrompt {
        stage: Stage::Verify,
        text,
        target_utterance_id: target_id.to_string(),
        prior: Some(prior.clone()),
        candidates: Vec::new(),
    })
}

pub fn render_adjudication_prompt(
    templates: &PromptTemplates,
    scheme: &LabelScheme,
    segment: &Segment,
    target_id: &str,
    candidates: &[Candidate],
) -> Result<RenderedPrompt, PromptError> {
    if candidates.len() < 2 {
        return Err(PromptError::TooFewCandidates(candidates.len()));
    }
    if candidates
        .iter()
        .all(|c| c.decision.label == candidates[0].decision.label)
    {
        return Err(PromptError::NoDisagreement(
            candidates[0].decision.label.to_string(),
        ));
    }
    if let Some(bad) = candidates
        .iter()
        .find(|c| !scheme.contains(c.decision.label.as_str()))
    {
        return Err(PromptError::LabelNotInScheme(
            bad.decision.label.to_string(),
        ));
    }
    let target = target_utterance(segment, target_id)?;
    let rubric = scheme.rubric_text();
    let context = context_block(segment.utterances.iter(), target_id);
    let listing = candidates
        .iter()
        .map(|c| {
            format!(
                "- [{}] label: {}\n  justification: {}",
                c.role_tag, c.decision.label, c.decision.justification
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    let mut allowed: Vec<&str> = Vec::new();
    for c in candidates {
        if !allowed.contains(&c.decision.label.as_str()) {
            allowed.push(c.decision.label.as_str());
        }
    }
    let mut text = templates.adjudicate.render(|slot| match slot {
        Slot::Rubric => rubric.clone(),
        Slot::Context => context.clone(),
        Slot::Target => target_reference(target),
        Slot::Candidates => listing.clone(),
        Slot::Prior => String::new(),
    });
    text.push_str(&output_instruction(scheme, Some(&allowed)));
    Ok(RenderedPrompt {
        stage: Stage::Adjudicate,
        text,
        target_utterance_id: target_id.to_string(),
        prior: None,
        candidates: candidates.to_vec(),
    })
}
