use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::ledger::LedgerWriter;
use super::{
    AdjudicationScope, AnnotationRecord, Depth, OrchestratorError, RunLedger, StrategyConfig,
};
use crate::backend::{BackendError, Client, Completion, UsageRecord};
use crate::corpus::{build_segments, Corpus, Segment};
use crate::scheme::{
    parse_model_output, render_adjudication_prompt, render_annotation_prompt,
    render_verification_prompt, Candidate, CategoryId, LabelScheme, ParsedDecision,
    PromptTemplates, RenderOptions, RenderedPrompt,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop with [`OrchestratorError::Interrupted`] after this many targets
    /// have been finished in this invocation.
    pub halt_after_targets: Option<usize>,
}

/// Runs strategies against a set of clients.
pub struct Orchestrator {
    scheme: Arc<LabelScheme>,
    templates: PromptTemplates,
    clients: BTreeMap<String, Arc<Client>>,
    parallelism: usize,
}

struct Outcome {
    decision: Option<ParsedDecision>,
    usage: UsageRecord,
    usage_estimated: bool,
    attempts: u32,
    errors: Vec<String>,
    cached: bool,
}

/// A response accepted during target processing, written to the response
/// cache once the target's ledger lines are on disk.
struct Accepted {
    backend_id: String,
    prompt: RenderedPrompt,
    completion: Completion,
}

struct TargetResult {
    accepted: Vec<Accepted>,
    records: Vec<AnnotationRecord>,
    label: CategoryId,
    abstain: bool,
}

fn decision_of(record: &AnnotationRecord) -> ParsedDecision {
    ParsedDecision {
        label: record.label.clone(),
        justification: record.justification.clone(),
    }
}

/// Majority label, ties broken by first appearance.
fn majority(candidates: &[Candidate]) -> CategoryId {
    let mut best: Option<(&CategoryId, usize)> = None;
    for c in candidates {
        let n = candidates
            .iter()
            .filter(|o| o.decision.label == c.decision.label)
            .count();
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((&c.decision.label, n));
        }
    }
    best.expect("at least one candidate").0.clone()
}

impl Orchestrator {
    pub fn new(
        scheme: Arc<LabelScheme>,
        templates: PromptTemplates,
        clients: BTreeMap<String, Arc<Client>>,
    ) -> Self {
        Self {
            scheme,
            templates,
            clients,
            parallelism: 1,
        }
    }

    /// Number of targets processed concurrently. Ledger order does not
    /// depend on it.
    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn scheme(&self) -> &LabelScheme {
        &self.scheme
    }

    pub fn clients(&self) -> &BTreeMap<String, Arc<Client>> {
        &self.clients
    }

    fn client(&self, backend_id: &str) -> Result<&Client, OrchestratorError> {
        self.clients
            .get(backend_id)
            .map(Arc::as_ref)
            .ok_or_else(|| OrchestratorError::UnknownBackend(backend_id.to_string()))
    }

    /// Sends `prompt`, retrying unparseable answers `parse_retries` times and
    /// answers outside `allowed` `label_retries` times. A fresh accepted
    /// answer is pushed to `accepted`; rejected ones are never cached.
    fn call(
        &self,
        client: &Client,
        prompt: &RenderedPrompt,
        parse_retries: u32,
        allowed: Option<(&[&CategoryId], u32)>,
        accepted: &mut Vec<Accepted>,
    ) -> Result<Outcome, OrchestratorError> {
        let mut out = Outcome {
            decision: None,
            usage: UsageRecord::ZERO,
            usage_estimated: false,
            attempts: 0,
            errors: Vec::new(),
            cached: false,
        };
        let mut parse_left = parse_retries;
        let mut label_left = allowed.map_or(0, |(_, n)| n);
        let mut first = true;
        loop {
            let result = if first {
                client.complete(prompt)
            } else {
                client.complete_uncached(prompt)
            };
            first = false;
            let completion = match result {
                Ok(c) => c,
                Err(failure) => {
                    out.attempts += failure.attempts;
                    if matches!(
                        failure.error,
                        BackendError::AuthFailure(_) | BackendError::Config(_)
                    ) {
                        return Err(OrchestratorError::Backend {
                            backend_id: client.backend_id().to_string(),
                            error: failure.error,
                        });
                    }
                    out.errors.extend(failure.attempt_errors);
                    return Ok(out);
                }
            };
            out.attempts += completion.attempts;
            out.errors.extend(completion.attempt_errors.iter().cloned());
            out.usage += completion.usage;
            out.usage_estimated |= completion.usage_estimated;
            match parse_model_output(&completion.text, &self.scheme) {
                Ok(d) if allowed.is_none_or(|(a, _)| a.contains(&&d.label)) => {
                    out.cached = completion.cached && out.attempts == 0;
                    out.decision = Some(d);
                    if !completion.cached {
                        accepted.push(Accepted {
                            backend_id: client.backend_id().to_string(),
                            prompt: prompt.clone(),
                            completion,
                        });
                    }
                    return Ok(out);
                }
                Ok(d) => {
                    out.errors
                        .push(format!("label {} is not among the candidates", d.label));
                    if label_left == 0 {
                        return Ok(out);
                    }
                    label_left -= 1;
                }
                Err(e) => {
                    out.errors.push(e.to_string());
                    if parse_left == 0 {
                        return Ok(out);
                    }
                    parse_left -= 1;
                }
            }
        }
    }

    fn record(
        &self,
        segment: &Segment,
        client: &Client,
        prompt: &RenderedPrompt,
        outcome: Outcome,
        fallback: Option<CategoryId>,
    ) -> AnnotationRecord {
        let (label, justification, abstain, fallback) = match (outcome.decision, fallback) {
            (Some(d), _) => (d.label, d.justification, false, false),
            (None, Some(f)) => (f, String::new(), false, true),
            (None, None) => (
                self.scheme.none_category().clone(),
                String::new(),
                true,
                false,
            ),
        };
        AnnotationRecord {
            seq: 0,
            segment_id: segment.segment_id.clone(),
            utterance_id: prompt.target_utterance_id.clone(),
            stage: prompt.stage,
            backend_id: client.backend_id().to_string(),
            label,
            justification,
            usage: outcome.usage,
            usage_estimated: outcome.usage_estimated,
            attempts: outcome.attempts,
            attempt_errors: outcome.errors,
            cached: outcome.cached,
            prompt_hash: prompt.hash(),
            abstain,
            fallback,
        }
    }

    fn remember(&self, accepted: Vec<Accepted>) {
        for a in accepted {
            if let Some(client) = self.clients.get(&a.backend_id) {
                client.remember(&a.prompt, &a.completion);
            }
        }
    }

    /// Stage 1: one annotation of `target_id`.
    pub fn run_single_pass(
        &self,
        backend_id: &str,
        segment: &Segment,
        target_id: &str,
        parse_retries: u32,
    ) -> Result<AnnotationRecord, OrchestratorError> {
        let mut accepted = Vec::new();
        let record = self.annotate(&mut accepted, backend_id, segment, target_id, parse_retries)?;
        self.remember(accepted);
        Ok(record)
    }

    /// Stage 2: the same backend audits `prior`.
    pub fn run_self_verification(
        &self,
        backend_id: &str,
        segment: &Segment,
        target_id: &str,
        prior: &ParsedDecision,
        parse_retries: u32,
        options: RenderOptions,
    ) -> Result<AnnotationRecord, OrchestratorError> {
        let mut accepted = Vec::new();
        let record = self.verify(
            &mut accepted,
            backend_id,
            segment,
            target_id,
            prior,
            parse_retries,
            options,
        )?;
        self.remember(accepted);
        Ok(record)
    }

    /// Stage 3: an independent backend picks among conflicting candidates.
    /// If it keeps answering outside them, `fallback` is recorded instead.
    #[allow(clippy::too_many_arguments)]
    pub fn run_adjudication(
        &self,
        backend_id: &str,
        segment: &Segment,
        target_id: &str,
        candidates: &[Candidate],
        fallback: &CategoryId,
        parse_retries: u32,
        adjudicator_retries: u32,
    ) -> Result<AnnotationRecord, OrchestratorError> {
        let mut accepted = Vec::new();
        let record = self.adjudicate(
            &mut accepted,
            backend_id,
            segment,
            target_id,
            candidates,
            fallback,
            parse_retries,
            adjudicator_retries,
        )?;
        self.remember(accepted);
        Ok(record)
    }

    fn annotate(
        &self,
        accepted: &mut Vec<Accepted>,
        backend_id: &str,
        segment: &Segment,
        target_id: &str,
        parse_retries: u32,
    ) -> Result<AnnotationRecord, OrchestratorError> {
        let client = self.client(backend_id)?;
        let prompt = render_annotation_prompt(&self.templates, &self.scheme, segment, target_id)?;
        let outcome = self.call(client, &prompt, parse_retries, None, accepted)?;
        Ok(self.record(segment, client, &prompt, outcome, None))
    }

    #[allow(clippy::too_many_arguments)]
    fn verify(
        &self,
        accepted: &mut Vec<Accepted>,
        backend_id: &str,
        segment: &Segment,
        target_id: &str,
        prior: &ParsedDecision,
        parse_retries: u32,
        options: RenderOptions,
    ) -> Result<AnnotationRecord, OrchestratorError> {
        let client = self.client(backend_id)?;
        let prompt = render_verification_prompt(
            &self.templates,
            &self.scheme,
            segment,
            target_id,
            prior,
            options,
        )?;
        let outcome = self.call(client, &prompt, parse_retries, None, accepted)?;
        Ok(self.record(segment, client, &prompt, outcome, None))
    }

    #[allow(clippy::too_many_arguments)]
    fn adjudicate(
        &self,
        accepted: &mut Vec<Accepted>,
        backend_id: &str,
        segment: &Segment,
        target_id: &str,
        candidates: &[Candidate],
        fallback: &CategoryId,
        parse_retries: u32,
        adjudicator_retries: u32,
    ) -> Result<AnnotationRecord, OrchestratorError> {
        let client = self.client(backend_id)?;
        let prompt = render_adjudication_prompt(
            &self.templates,
            &self.scheme,
            segment,
            target_id,
            candidates,
        )?;
        let allowed: Vec<&CategoryId> = candidates.iter().map(|c| &c.decision.label).collect();
        let outcome = self.call(
            client,
            &prompt,
            parse_retries,
            Some((&allowed, adjudicator_retries)),
            accepted,
        )?;
        Ok(self.record(segment, client, &prompt, outcome, Some(fallback.clone())))
    }

    fn process_target(
        &self,
        config: &StrategyConfig,
        segment: &Segment,
        target_id: &str,
    ) -> Result<TargetResult, OrchestratorError> {
        let depth = config.strategy_id.depth;
        let options = RenderOptions {
            verify_with_context: config.verify_with_context,
        };
        let mut records = Vec::new();
        let mut accepted = Vec::new();
        let mut candidates = Vec::new();
        for (i, backend) in config.producers().into_iter().enumerate() {
            let initial = self.annotate(
                &mut accepted,
                backend,
                segment,
                target_id,
                config.parse_retries,
            )?;
            if depth == Depth::Annotated {
                let (label, abstain) = (initial.label.clone(), initial.abstain);
                records.push(initial);
                return Ok(TargetResult {
                    accepted,
                    records,
                    label,
                    abstain,
                });
            }
            let verified = self.verify(
                &mut accepted,
                backend,
                segment,
                target_id,
                &decision_of(&initial),
                config.parse_retries,
                options,
            )?;
            match config.adjudication_scope {
                AdjudicationScope::Chain => {
                    candidates.push(Candidate {
                        role_tag: "initial".into(),
                        decision: decision_of(&initial),
                    });
                    candidates.push(Candidate {
                        role_tag: "verified".into(),
                        decision: decision_of(&verified),
                    });
                }
                AdjudicationScope::Panel => candidates.push(Candidate {
                    role_tag: format!("panel_{}", i + 1),
                    decision: decision_of(&verified),
                }),
            }
            records.push(initial);
            records.push(verified);
            if depth == Depth::Verified {
                let last = records.last().expect("verified record");
                let (label, abstain) = (last.label.clone(), last.abstain);
                return Ok(TargetResult {
                    accepted,
                    records,
                    label,
                    abstain,
                });
            }
        }

        if candidates
            .iter()
            .all(|c| c.decision.label == candidates[0].decision.label)
        {
            let label = candidates[0].decision.label.clone();
            let abstain = records.iter().all(|r| r.abstain);
            return Ok(TargetResult {
                accepted,
                records,
                label,
                abstain,
            });
        }
        let fallback = match config.adjudication_scope {
            AdjudicationScope::Chain => candidates[1].decision.label.clone(),
            AdjudicationScope::Panel => majority(&candidates),
        };
        let adjudicator = config.adjudicator_backend.as_deref().ok_or_else(|| {
            OrchestratorError::InvalidStrategy {
                run_id: config.run_id.clone(),
                message: "missing adjudicator".into(),
            }
        })?;
        let verdict = self.adjudicate(
            &mut accepted,
            adjudicator,
            segment,
            target_id,
            &candidates,
            &fallback,
            config.parse_retries,
            config.adjudicator_retries,
        )?;
        let label = verdict.label.clone();
        let abstain = verdict.abstain;
        records.push(verdict);
        Ok(TargetResult {
            accepted,
            records,
            label,
            abstain,
        })
    }

    /// Runs one strategy over `targets`, appending to the ledger at
    /// `ledger_path` when given. An existing ledger for the same strategy is
    /// resumed: finished targets are kept and only the rest are processed.
    pub fn run_strategy<'a, I>(
        &self,
        config: &StrategyConfig,
        corpus: &Corpus,
        targets: I,
        ledger_path: Option<&Path>,
        options: RunOptions,
    ) -> Result<RunLedger, OrchestratorError>
    where
        I: IntoIterator<Item = &'a String>,
    {
        config.validate(&self.clients.keys().cloned().collect())?;
        let segments = build_segments(corpus, targets, config.window_k)?;
        let work: Vec<(&Segment, &str)> = segments
            .iter()
            .flat_map(|s| s.target_ids.iter().map(move |t| (s, t.as_str())))
            .collect();
        let fresh = RunLedger::new(config.clone(), self.scheme.scheme_id(), work.len());
        let (mut writer, mut ledger) = match ledger_path {
            Some(p) => {
                let (w, l) = LedgerWriter::open(p, fresh)?;
                (Some(w), l)
            }
            None => (None, fresh),
        };
        if ledger.complete {
            return Ok(ledger);
        }
        let pending: Vec<(&Segment, &str)> = work
            .into_iter()
            .filter(|(_, t)| !ledger.final_labels.contains_key(*t))
            .collect();
        log::info!(
            "{}: {} targets to process ({} already done)",
            config.run_id,
            pending.len(),
            ledger.final_labels.len()
        );

        let mut finished = 0usize;
        for chunk in pending.chunks(self.parallelism) {
            let results: Vec<Result<TargetResult, OrchestratorError>> = if chunk.len() == 1 {
                vec![self.process_target(config, chunk[0].0, chunk[0].1)]
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|(segment, target)| {
                            scope.spawn(move || self.process_target(config, segment, target))
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("target worker panicked"))
                        .collect()
                })
            };
            for ((_, target), result) in chunk.iter().zip(results) {
                let result = result?;
                let mut lines = Vec::with_capacity(result.records.len() + 1);
                for record in result.records {
                    lines.push(LedgerWriter::record_line(ledger.push_record(record)));
                }
                ledger.set_final(target, result.label, result.abstain);
                lines.push(LedgerWriter::final_line(&ledger, target));
                if let Some(w) = writer.as_mut() {
                    w.append(&lines)?;
                }
                self.remember(result.accepted);
                finished += 1;
                if options.halt_after_targets.is_some_and(|h| finished >= h) {
                    return Err(OrchestratorError::Interrupted {
                        completed: ledger.final_labels.len(),
                    });
                }
            }
        }
        ledger.complete = true;
        if let Some(w) = writer.as_mut() {
            w.append(&[LedgerWriter::complete_line(&ledger)])?;
        }
        Ok(ledger)
    }

    /// Runs several strategies in order. With `ledger_dir`, each writes
    /// `<ledger_dir>/<run_id>.jsonl`.
    pub fn run_all(
        &self,
        configs: &[StrategyConfig],
        corpus: &Corpus,
        targets: &[String],
        ledger_dir: Option<&Path>,
    ) -> Result<Vec<RunLedger>, OrchestratorError> {
        configs
            .iter()
            .map(|c| {
                let path = ledger_dir.map(|d| d.join(format!("{}.jsonl", c.run_id)));
                self.run_strategy(c, corpus, targets, path.as_deref(), RunOptions::default())
            })
            .collect()
    }
}
