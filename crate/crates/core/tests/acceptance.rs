//! Acceptance suite. Runs offline against the synthetic backend and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.
//!
//! Run with `cargo test -p annoflow-core --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use annoflow_core::backend::fault::{Fault, FaultyBackend};
use annoflow_core::backend::{
    Backend, Client, DirCache, RateLimiter, RetryPolicy, SyntheticAnnotatorConfig,
    SyntheticBackend, VirtualClock,
};
use annoflow_core::corpus::synthetic::{generate, SyntheticCorpusSpec};
use annoflow_core::corpus::{stratified_sample, Corpus, GoldLabel};
use annoflow_core::metrics::{
    cohen_kappa, confusion, macro_f1_with, pareto_frontier, per_category_f1, relative_gain,
    ParetoPoint, UndefinedPolicy,
};
use annoflow_core::orchestrator::{
    build_clients, total_usage, AdjudicationScope, ClientOptions, Depth, Orchestrator,
    OrchestratorError, Pipeline, RunConfig, RunOptions, StrategyConfig, StrategyId,
};
use annoflow_core::report::{
    emit_category_table, emit_per_category_figure, read_category_table, RunSummary,
};
use annoflow_core::scheme::{Category, CategoryId, LabelScheme, PromptTemplates, Stage};

type Q = Ratio<i64>;
type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric oracle equivalence", c1_metric_oracle, secs(10)),
        ("sampler exactness", c2_sampler_exactness, secs(5)),
        ("gating and cost law", c3_gating_cost_law, secs(120)),
        (
            "closed-form verification accuracy",
            c4_closed_form,
            secs(30),
        ),
        ("category table fixture", c5_table_fixture, secs(10)),
        ("pareto at published ratios", c6_pareto, secs(10)),
        ("relative-gain bands", c7_relative_gain, secs(1)),
        (
            "determinism and resumability",
            c8_determinism_resume,
            secs(120),
        ),
        ("rate-limit and in-flight compliance", c9_limits, secs(60)),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check)
            .unwrap_or_else(|_| Err("panicked".to_string()))
            .and_then(|detail| {
                let took = start.elapsed();
                if took > *budget {
                    Err(format!("took {took:.2?}, budget {budget:?}"))
                } else {
                    Ok(detail)
                }
            });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {} {name} ({took:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name} ({took:.2?}): {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---------------------------------------------------------------------------
// 1. Metrics against brute-force rational oracles.

fn scheme_of(k: usize) -> LabelScheme {
    let cats = (0..k)
        .map(|i| Category {
            id: CategoryId::from(format!("c{i}")),
            display_name: format!("C{i}"),
            definition: format!("category {i}"),
            positive_examples: vec![],
        })
        .collect();
    LabelScheme::new(
        format!("rand{k}"),
        cats,
        CategoryId::from(format!("c{}", k - 1)),
    )
    .expect("valid scheme")
}

struct OracleScores {
    counts: Vec<Vec<usize>>,
    f1: Vec<Option<Q>>,
    precision: Vec<Option<Q>>,
    recall: Vec<Option<Q>>,
}

/// Per-item tallies with no shared code: every count is recomputed by
/// scanning the items.
fn oracle_scores(items: &[(usize, usize)], k: usize) -> OracleScores {
    let count = |f: &dyn Fn(usize, usize) -> bool| items.iter().filter(|(g, p)| f(*g, *p)).count();
    let mut counts = vec![vec![0; k]; k];
    for (g, row) in counts.iter_mut().enumerate() {
        for (p, cell) in row.iter_mut().enumerate() {
            *cell = count(&|a, b| a == g && b == p);
        }
    }
    let (mut f1, mut precision, mut recall) = (vec![], vec![], vec![]);
    for c in 0..k {
        let tp = count(&|g, p| g == c && p == c) as i64;
        let fp = count(&|g, p| g != c && p == c) as i64;
        let fn_ = count(&|g, p| g == c && p != c) as i64;
        if tp + fp + fn_ == 0 {
            f1.push(None);
            precision.push(None);
            recall.push(None);
            continue;
        }
        precision.push(Some(if tp + fp == 0 {
            Q::from_integer(0)
        } else {
            Q::new(tp, tp + fp)
        }));
        recall.push(Some(if tp + fn_ == 0 {
            Q::from_integer(0)
        } else {
            Q::new(tp, tp + fn_)
        }));
        f1.push(Some(Q::new(2 * tp, 2 * tp + fp + fn_)));
    }
    OracleScores {
        counts,
        f1,
        precision,
        recall,
    }
}

fn oracle_macro(f1: &[Option<Q>], zero_fill: bool) -> Option<Q> {
    let defined: Vec<Q> = f1.iter().flatten().copied().collect();
    if defined.is_empty() {
        return None;
    }
    let n = if zero_fill { f1.len() } else { defined.len() };
    Some(defined.iter().sum::<Q>() / Q::from_integer(n as i64))
}

fn oracle_kappa(a: &[usize], b: &[usize], k: usize) -> (Q, Q, Option<Q>) {
    let n = a.len() as i64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as i64;
    let p_o = Q::new(agree, n);
    let mut p_e = Q::from_integer(0);
    for c in 0..k {
        let ca = a.iter().filter(|x| **x == c).count() as i64;
        let cb = b.iter().filter(|x| **x == c).count() as i64;
        p_e += Q::new(ca, n) * Q::new(cb, n);
    }
    let one = Q::from_integer(1);
    let kappa = if p_e != one {
        Some((p_o - p_e) / (one - p_e))
    } else if p_o == one {
        Some(one)
    } else {
        None
    };
    (p_o, p_e, kappa)
}

fn close(a: Option<f64>, b: Option<Q>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(q)) => (x - (*q.numer() as f64 / *q.denom() as f64)).abs() <= 1e-12,
        _ => false,
    }
}

fn c1_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut abstentions = 0usize;
    for instance in 0..1000 {
        let k = rng.gen_range(1..=7);
        let n = rng.gen_range(1..=300);
        let scheme = scheme_of(k);
        // skewed label draws so that some categories go missing
        let draw = |rng: &mut ChaCha8Rng| {
            let hi = rng.gen_range(1..=k);
            rng.gen_range(0..hi)
        };
        let mut gold = BTreeMap::new();
        let mut pred = BTreeMap::new();
        let mut items = Vec::new();
        for i in 0..n {
            let id = format!("u{i:03}");
            let g = draw(&mut rng);
            gold.insert(id.clone(), CategoryId::from(format!("c{g}")));
            // a missing prediction is scored as the none category
            let p = if rng.gen_bool(0.05) {
                abstentions += 1;
                k - 1
            } else {
                let p = draw(&mut rng);
                pred.insert(id, CategoryId::from(format!("c{p}")));
                p
            };
            items.push((g, p));
        }
        let oracle = oracle_scores(&items, k);
        let cm = confusion(&gold, &pred, &scheme).map_err(|e| e.to_string())?;
        ensure!(
            cm.counts == oracle.counts,
            "instance {instance}: confusion differs"
        );

        let exact = per_category_f1::<Q>(&cm);
        let float = per_category_f1::<f64>(&cm);
        for c in 0..k {
            ensure!(
                exact[c].f1 == oracle.f1[c]
                    && exact[c].precision == oracle.precision[c]
                    && exact[c].recall == oracle.recall[c],
                "instance {instance}: exact scores differ for c{c}"
            );
            ensure!(
                close(float[c].f1, oracle.f1[c])
                    && close(float[c].precision, oracle.precision[c])
                    && close(float[c].recall, oracle.recall[c]),
                "instance {instance}: f64 scores differ for c{c}"
            );
        }
        for (policy, zero_fill) in [
            (UndefinedPolicy::Exclude, false),
            (UndefinedPolicy::ZeroFill, true),
        ] {
            let want = oracle_macro(&oracle.f1, zero_fill);
            ensure!(
                macro_f1_with(&exact, policy).ok() == want,
                "instance {instance}: exact macro F1 differs ({policy:?})"
            );
            ensure!(
                close(macro_f1_with(&float, policy).ok(), want),
                "instance {instance}: f64 macro F1 differs ({policy:?})"
            );
        }

        let rater: Vec<usize> = (0..n).map(|_| draw(&mut rng)).collect();
        let gold_idx: Vec<usize> = items.iter().map(|(g, _)| *g).collect();
        let other: BTreeMap<String, CategoryId> = gold
            .keys()
            .zip(&rater)
            .map(|(id, r)| (id.clone(), CategoryId::from(format!("c{r}"))))
            .collect();
        let (p_o, p_e, kappa) = oracle_kappa(&gold_idx, &rater, k);
        let exact = cohen_kappa::<Q>(&gold, &other).map_err(|e| e.to_string())?;
        ensure!(
            exact.p_o == p_o && exact.p_e == p_e && exact.kappa == kappa,
            "instance {instance}: exact kappa differs"
        );
        let float = cohen_kappa::<f64>(&gold, &other).map_err(|e| e.to_string())?;
        ensure!(
            close(Some(float.p_o), Some(p_o))
                && close(Some(float.p_e), Some(p_e))
                && close(float.kappa, kappa),
            "instance {instance}: f64 kappa differs"
        );
    }
    Ok(format!(
        "1000 instances exact over rationals and within 1e-12 in f64 ({abstentions} abstentions)"
    ))
}

// ---------------------------------------------------------------------------
// 2. Stratified sampler counts and reproducibility.

fn c2_sampler_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    for case in 0..500 {
        let k = rng.gen_range(1..=7);
        let mut counts: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=120)).collect();
        if counts.iter().all(|c| *c == 0) {
            counts[0] = 1;
        }
        let total: usize = counts.iter().sum();
        let mut labels = Vec::new();
        for (c, &m) in counts.iter().enumerate() {
            for i in 0..m {
                labels.push(GoldLabel {
                    utterance_id: format!("c{c}-{i:03}"),
                    category: CategoryId::from(format!("c{c}")),
                });
            }
        }
        let n = rng.gen_range(0..=total);
        let seed = rng.gen();
        let picked = stratified_sample(&labels, n, seed).map_err(|e| e.to_string())?;
        ensure!(
            picked.len() == n,
            "case {case}: {} items, wanted {n}",
            picked.len()
        );
        for (c, &m) in counts.iter().enumerate() {
            let got = picked
                .iter()
                .filter(|id| id.starts_with(&format!("c{c}-")))
                .count();
            let floor = n * m / total;
            let ceil = floor + usize::from(n * m % total != 0);
            ensure!(
                got == floor || got == ceil,
                "case {case}: category c{c} got {got}, exact share {}/{total}",
                n * m
            );
        }
        let again = stratified_sample(&labels, n, seed).map_err(|e| e.to_string())?;
        ensure!(again == picked, "case {case}: same seed, different ids");
    }
    Ok("500 distributions: exact size, floor/ceil quotas, reproducible".into())
}

// ---------------------------------------------------------------------------
// Shared helpers for orchestrated runs.

fn synthetic_corpus(
    scheme: &LabelScheme,
    transcripts: usize,
    per: usize,
    share: f64,
    seed: u64,
) -> Corpus {
    generate(
        &SyntheticCorpusSpec {
            transcripts,
            utterances_per_transcript: per,
            teacher_share: share,
            label_weights: vec![],
            seed,
        },
        scheme,
    )
}

fn client(
    id: &str,
    cfg: SyntheticAnnotatorConfig,
    scheme: &Arc<LabelScheme>,
    corpus: &Corpus,
) -> Arc<Client> {
    let backend = SyntheticBackend::new(id, cfg, scheme.clone(), Arc::new(corpus.gold_map()))
        .expect("valid synthetic config");
    Arc::new(Client::new(Arc::new(backend), 8, 100_000).with_clock(Arc::new(VirtualClock::new())))
}

fn strategy(depth: Depth, scope: AdjudicationScope, window_k: usize, seed: u64) -> StrategyConfig {
    StrategyConfig {
        run_id: format!("nr_{}", depth.as_str()),
        model: "m".into(),
        strategy_id: StrategyId::new(Pipeline::NonReasoning, depth),
        annotator_backend: "a".into(),
        adjudicator_backend: Some("j".into()),
        adjudication_scope: scope,
        panel_backends: match scope {
            AdjudicationScope::Chain => vec![],
            AdjudicationScope::Panel => vec!["a".into(), "b".into()],
        },
        window_k,
        seed,
        parse_retries: 1,
        adjudicator_retries: 1,
        verify_with_context: true,
    }
}

fn gold_ids(corpus: &Corpus) -> Vec<String> {
    corpus
        .gold()
        .iter()
        .map(|g| g.utterance_id.clone())
        .collect()
}

// ---------------------------------------------------------------------------
// 3. Adjudication is gated on disagreement; cost grows with depth.

fn c3_gating_cost_law() -> Outcome {
    let scheme = Arc::new(LabelScheme::talk_moves());
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut adjudications = 0;
    let mut panels = 0;
    for config in 0..50 {
        let corpus = synthetic_corpus(&scheme, 2, rng.gen_range(10..=25), 0.6, rng.gen());
        let annotator = |rng: &mut ChaCha8Rng| {
            let mut c = SyntheticAnnotatorConfig::diagonal(rng.gen_range(0.2..0.95));
            c.verify_correct_prob = rng.gen_range(0.0..1.0);
            c.verify_corrupt_prob = rng.gen_range(0.0..0.3);
            c.adjudicate_correct_prob = rng.gen_range(0.5..1.0);
            c.tokens_per_response = rng.gen_range(5..80);
            c.seed = rng.gen();
            c
        };
        let mut clients = BTreeMap::new();
        for id in ["a", "b", "j"] {
            clients.insert(
                id.to_string(),
                client(id, annotator(&mut rng), &scheme, &corpus),
            );
        }
        let orch = Orchestrator::new(scheme.clone(), PromptTemplates::default(), clients)
            .with_parallelism(rng.gen_range(1..=6));
        let scope = if config % 5 == 4 {
            panels += 1;
            AdjudicationScope::Panel
        } else {
            AdjudicationScope::Chain
        };
        let window_k = rng.gen_range(0..=5);
        let seed = rng.gen();
        let targets = gold_ids(&corpus);
        let mut totals = Vec::new();
        for depth in Depth::ALL {
            let ledger = orch
                .run_strategy(
                    &strategy(depth, scope, window_k, seed),
                    &corpus,
                    &targets,
                    None,
                    RunOptions::default(),
                )
                .map_err(|e| format!("config {config}: {e}"))?;
            if depth == Depth::Adjudicated {
                let gate = ledger.disagreement_set();
                let adj = ledger.stage_count(Stage::Adjudicate);
                ensure!(
                    adj == gate.len(),
                    "config {config}: {adj} adjudications for {} disagreements",
                    gate.len()
                );
                ensure!(
                    ledger
                        .records
                        .iter()
                        .filter(|r| r.stage == Stage::Adjudicate)
                        .all(|r| gate.contains(&r.utterance_id)),
                    "config {config}: adjudication outside the disagreement set"
                );
                adjudications += adj;
            }
            totals.push(total_usage(&ledger).grand_total.total_tokens());
        }
        ensure!(
            totals[0] <= totals[1] && totals[1] <= totals[2],
            "config {config}: tokens {totals:?} not monotone"
        );
    }
    Ok(format!(
        "50 configs ({panels} panel), {adjudications} adjudications all gated, tokens monotone"
    ))
}

// ---------------------------------------------------------------------------
// 4. Measured verification accuracy against its analytic expectation.

fn c4_closed_form() -> Outcome {
    let (acc, fix, corrupt) = (0.7, 0.5, 0.0);
    let expected = acc * (1.0 - corrupt) + (1.0 - acc) * fix;
    let scheme = Arc::new(LabelScheme::talk_moves());
    let corpus = synthetic_corpus(&scheme, 500, 10, 1.0, 44);
    let targets = gold_ids(&corpus);
    ensure!(
        targets.len() == 5000,
        "{} targets, wanted 5000",
        targets.len()
    );
    let mut cfg = SyntheticAnnotatorConfig::diagonal(acc);
    cfg.verify_correct_prob = fix;
    cfg.verify_corrupt_prob = corrupt;
    cfg.seed = 2024;
    let mut clients = BTreeMap::new();
    clients.insert("a".to_string(), client("a", cfg, &scheme, &corpus));
    clients.insert(
        "j".to_string(),
        client(
            "j",
            SyntheticAnnotatorConfig::diagonal(0.9),
            &scheme,
            &corpus,
        ),
    );
    let orch =
        Orchestrator::new(scheme.clone(), PromptTemplates::default(), clients).with_parallelism(8);
    let ledger = orch
        .run_strategy(
            &strategy(Depth::Verified, AdjudicationScope::Chain, 1, 9),
            &corpus,
            &targets,
            None,
            RunOptions::default(),
        )
        .map_err(|e| e.to_string())?;
    let cm =
        confusion(&corpus.gold_map(), &ledger.final_labels, &scheme).map_err(|e| e.to_string())?;
    let measured: f64 = cm.accuracy().ok_or("empty confusion")?;
    ensure!(
        (measured - expected).abs() <= 0.02,
        "measured {measured:.4}, expected {expected:.4}"
    );
    Ok(format!(
        "measured {measured:.4} vs expected {expected:.4} over {} targets",
        cm.total()
    ))
}

// ---------------------------------------------------------------------------
// 5. Published per-category table: bold mask and cross-model means.

fn fixture_summaries(scheme: &LabelScheme) -> Result<Vec<RunSummary<f64>>, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/table1.csv");
    let file = std::fs::File::open(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    read_category_table(file, "table1", scheme).map_err(|e| e.to_string())
}

fn c5_table_fixture() -> Outcome {
    let scheme = LabelScheme::talk_moves();
    let summaries = fixture_summaries(&scheme)?;
    let (table, csv) = emit_category_table(&summaries, &scheme).map_err(|e| e.to_string())?;
    ensure!(table.rows.len() == 21, "{} rows", table.rows.len());
    let adjudicated: Vec<bool> = table
        .strategies
        .iter()
        .map(|s| s.depth == Depth::Adjudicated)
        .collect();
    for row in &table.rows {
        ensure!(
            row.bold.as_slice() == adjudicated.as_slice(),
            "{}/{}: bold mask {:?}",
            row.category,
            row.model,
            row.bold
        );
        // bold must be re-derivable from the cell values alone
        for half in [0..3, 3..6] {
            let max = row.cells[half.clone()]
                .iter()
                .flatten()
                .copied()
                .fold(f64::MIN, f64::max);
            let bold_cell = half.clone().find(|i| row.bold[*i]).ok_or("no bold cell")?;
            ensure!(
                row.cells[bold_cell] == Some(max),
                "{}/{}: bold cell is not the maximum",
                row.category,
                row.model
            );
        }
    }
    ensure!(
        csv.lines().count() == 22 && csv.lines().skip(1).all(|l| l.contains("fixture:table1")),
        "csv lacks rows or provenance"
    );

    let (figure, _) = emit_per_category_figure(&summaries, &scheme).map_err(|e| e.to_string())?;
    let nr_adj = StrategyId::new(Pipeline::NonReasoning, Depth::Adjudicated);
    let entry = figure
        .entry("revoicing", nr_adj)
        .ok_or("no revoicing entry")?;
    let mean = entry.mean.ok_or("undefined mean")?;
    ensure!(format!("{mean:.4}") == "0.3167", "revoicing mean {mean:.6}");
    // every mean against an exact rational recomputation from the fixture rows
    let exact = read_category_table::<Q, _>(
        std::fs::File::open(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/table1.csv"))
            .map_err(|e| e.to_string())?,
        "table1",
        &scheme,
    )
    .map_err(|e| e.to_string())?;
    for e in &figure.entries {
        let cells: Vec<Q> = exact
            .iter()
            .filter(|s| s.strategy_id == e.strategy_id)
            .filter_map(|s| s.f1(e.category.as_str()))
            .collect();
        let want = cells.iter().sum::<Q>() / Q::from_integer(cells.len() as i64);
        ensure!(
            close(e.mean, Some(want)),
            "{}/{}: mean {:?}",
            e.category,
            e.strategy_id,
            e.mean
        );
    }
    Ok(format!(
        "21 rows bold on both adjudicated columns; revoicing NR-adjudicated mean {mean:.4}; {} means exact",
        figure.entries.len()
    ))
}

// ---------------------------------------------------------------------------
// 6. Pareto flags at the published cost/performance ratios.

fn brute_dominated(points: &[(String, u64, f64)], who: &str) -> bool {
    let (_, t, f) = points.iter().find(|p| p.0 == who).expect("point present");
    points
        .iter()
        .any(|(id, t2, f2)| id != who && t2 <= t && f2 >= f && (t2 < t || f2 > f))
}

fn c6_pareto() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    let scale = 10_000u64;
    let mut dominated_cases = 0;
    let mut cases = 0;
    for nr_ratio in [0.75, 0.76, 0.77, 0.78, 0.79, 0.80] {
        for _ in 0..200 {
            let mut points = vec![
                ("reasoning_adjudicated".to_string(), scale, 0.61),
                (
                    "non_reasoning_adjudicated".to_string(),
                    (nr_ratio * scale as f64).round() as u64,
                    0.60,
                ),
            ];
            for id in [
                "non_reasoning_annotated",
                "non_reasoning_verified",
                "reasoning_annotated",
                "reasoning_verified",
            ] {
                points.push((
                    id.to_string(),
                    rng.gen_range(1_000..scale),
                    rng.gen_range(0.30..0.60),
                ));
            }
            let out = pareto_frontier(
                points
                    .iter()
                    .map(|(id, t, f)| ParetoPoint::new(id.clone(), *t, *f))
                    .collect(),
            );
            let flag = |id: &str| out.iter().find(|p| p.strategy_id == id).unwrap().dominated;
            ensure!(
                !flag("reasoning_adjudicated") && !flag("non_reasoning_adjudicated"),
                "adjudicated point dominated at ratio {nr_ratio}: {points:?}"
            );
            let rv = &points[5];
            let cheaper_at_least_as_good = points
                .iter()
                .any(|(id, t, f)| id != &rv.0 && *t < rv.1 && *f >= rv.2);
            if cheaper_at_least_as_good {
                dominated_cases += 1;
                ensure!(
                    flag("reasoning_verified"),
                    "reasoning_verified not dominated: {points:?}"
                );
            }
            for (id, _, _) in &points {
                ensure!(
                    flag(id) == brute_dominated(&points, id),
                    "{id} flag disagrees with brute force: {points:?}"
                );
            }
            cases += 1;
        }
    }
    Ok(format!(
        "{cases} point sets at NR-adjudicated ratios 0.75-0.80: both adjudicated points on the frontier; reasoning_verified dominated in all {dominated_cases} cases with a cheaper, no-worse point"
    ))
}

// ---------------------------------------------------------------------------
// 7. Relative-gain bands.

fn c7_relative_gain() -> Outcome {
    let a: f64 = relative_gain(0.30, 0.53).map_err(|e| e.to_string())?;
    let b: f64 = relative_gain(0.40, 0.60).map_err(|e| e.to_string())?;
    ensure!((70.0..=80.0).contains(&a), "0.30 -> 0.53 gives {a}");
    ensure!((45.0..=55.0).contains(&b), "0.40 -> 0.60 gives {b}");
    let exact: Q = relative_gain(Q::new(30, 100), Q::new(53, 100)).map_err(|e| e.to_string())?;
    ensure!(exact == Q::new(230, 3), "exact gain {exact}");
    Ok(format!("{a:.2}% and {b:.2}%"))
}

// ---------------------------------------------------------------------------
// 8. Byte-identical ledgers across executions and across a kill/resume.

const GRID: &str = r#"
seed = 21
window_k = 3
parallelism = 8

[sample]
size = 800

[synthetic_corpus]
transcripts = 45
utterances_per_transcript = 40
teacher_share = 0.6
seed = 21

[[backends]]
backend_id = "nr"
family = "synthetic"
requests_per_minute = 100000
max_in_flight = 8
[backends.synthetic]
confusion = { accuracy = 0.6 }
verify_correct_prob = 0.5
verify_corrupt_prob = 0.05
seed = 1

[[backends]]
backend_id = "r"
family = "synthetic"
requests_per_minute = 100000
max_in_flight = 8
[backends.synthetic]
confusion = { accuracy = 0.7 }
verify_correct_prob = 0.4
verify_corrupt_prob = 0.05
seed = 2
tokens_per_response = 120

[[backends]]
backend_id = "judge_nr"
family = "synthetic"
requests_per_minute = 100000
max_in_flight = 8
[backends.synthetic]
confusion = { accuracy = 0.8 }
adjudicate_correct_prob = 0.85
seed = 3

[[backends]]
backend_id = "judge_r"
family = "synthetic"
requests_per_minute = 100000
max_in_flight = 8
[backends.synthetic]
confusion = { accuracy = 0.8 }
adjudicate_correct_prob = 0.9
seed = 4

[[grid]]
model = "m"
non_reasoning = "nr"
reasoning = "r"
adjudicator_non_reasoning = "judge_nr"
adjudicator_reasoning = "judge_r"
"#;

struct Grid {
    config: RunConfig,
    scheme: Arc<LabelScheme>,
    corpus: Corpus,
    targets: Vec<String>,
    strategies: Vec<StrategyConfig>,
}

impl Grid {
    fn load() -> Result<Self, String> {
        let config = RunConfig::from_toml_str(GRID).map_err(|e| e.to_string())?;
        let scheme = Arc::new(LabelScheme::talk_moves());
        let spec = config.synthetic_corpus.clone().ok_or("no corpus spec")?;
        let corpus = generate(&spec, &scheme);
        let targets = config.targets(&corpus).map_err(|e| e.to_string())?;
        let strategies = config.strategy_configs().map_err(|e| e.to_string())?;
        Ok(Self {
            config,
            scheme,
            corpus,
            targets,
            strategies,
        })
    }

    /// A fresh orchestrator over a cache directory, as a new process would
    /// build it.
    fn orchestrator(&self, cache: &Path) -> Result<Orchestrator, String> {
        let options = ClientOptions {
            cache: Some(Arc::new(DirCache::new(cache))),
            ..ClientOptions::default()
        };
        let clients = build_clients(
            &self.config.backends,
            self.scheme.clone(),
            Arc::new(self.corpus.gold_map()),
            &options,
        )
        .map_err(|e| e.to_string())?;
        Ok(
            Orchestrator::new(self.scheme.clone(), PromptTemplates::default(), clients)
                .with_parallelism(self.config.parallelism),
        )
    }

    fn run(&self, out: &Path) -> Result<(), String> {
        let orch = self.orchestrator(&out.join("cache"))?;
        orch.run_all(
            &self.strategies,
            &self.corpus,
            &self.targets,
            Some(&out.join("ledgers")),
        )
        .map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Runs the grid, killing each strategy halfway through once: the run
    /// stops, a half-written line is left behind, and a fresh orchestrator
    /// resumes from the ledger on disk.
    fn run_with_kills(&self, out: &Path) -> Result<(), String> {
        let ledgers = out.join("ledgers");
        std::fs::create_dir_all(&ledgers).map_err(|e| e.to_string())?;
        let half = self.targets.len() / 2;
        for cfg in &self.strategies {
            let path = ledgers.join(format!("{}.jsonl", cfg.run_id));
            let orch = self.orchestrator(&out.join("cache"))?;
            match orch.run_strategy(
                cfg,
                &self.corpus,
                &self.targets,
                Some(&path),
                RunOptions {
                    halt_after_targets: Some(half),
                },
            ) {
                Err(OrchestratorError::Interrupted { completed }) if completed == half => {}
                other => return Err(format!("{}: expected a halt, got {other:?}", cfg.run_id)),
            }
            drop(orch);
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| e.to_string())?;
            std::io::Write::write_all(&mut f, b"{\"kind\":\"record\",\"seq\":12,\"segm")
                .map_err(|e| e.to_string())?;
            drop(f);
            let orch = self.orchestrator(&out.join("cache"))?;
            orch.run_strategy(
                cfg,
                &self.corpus,
                &self.targets,
                Some(&path),
                RunOptions::default(),
            )
            .map_err(|e| format!("{}: resume failed: {e}", cfg.run_id))?;
        }
        Ok(())
    }
}

fn ledger_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        out.insert(
            entry.file_name().to_string_lossy().into_owned(),
            std::fs::read(entry.path()).map_err(|e| e.to_string())?,
        );
    }
    Ok(out)
}

fn c8_determinism_resume() -> Outcome {
    let grid = Grid::load()?;
    ensure!(
        grid.targets.len() == 800,
        "{} targets, wanted 800",
        grid.targets.len()
    );
    let strategies: BTreeSet<StrategyId> = grid.strategies.iter().map(|s| s.strategy_id).collect();
    ensure!(strategies.len() == 6, "{} strategies", strategies.len());

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (first, second, killed) = (
        tmp.path().join("first"),
        tmp.path().join("second"),
        tmp.path().join("killed"),
    );
    grid.run(&first)?;
    grid.run(&second)?;
    grid.run_with_kills(&killed)?;

    let a = ledger_bytes(&first.join("ledgers"))?;
    let b = ledger_bytes(&second.join("ledgers"))?;
    let c = ledger_bytes(&killed.join("ledgers"))?;
    ensure!(a.len() == 6, "{} ledgers written", a.len());
    for (name, bytes) in &a {
        ensure!(
            b.get(name) == Some(bytes),
            "{name} differs across executions"
        );
        ensure!(
            c.get(name) == Some(bytes),
            "{name} differs after kill and resume"
        );
    }
    let size: usize = a.values().map(Vec::len).sum();
    Ok(format!(
        "6 ledgers x 800 targets ({size} bytes) identical across two executions and a 50% kill/resume"
    ))
}

// ---------------------------------------------------------------------------
// 9. Rate limit and in-flight bound under a virtual clock with faults.

fn c9_limits() -> Outcome {
    const RPM: usize = 40;
    const MAX_IN_FLIGHT: usize = 3;
    let scheme = Arc::new(LabelScheme::talk_moves());
    let corpus = synthetic_corpus(&scheme, 3, 30, 0.6, 19);
    let targets = gold_ids(&corpus);
    let clock = Arc::new(VirtualClock::new());
    let mut faulty = Vec::new();
    let mut clients = BTreeMap::new();
    for (id, acc) in [("a", 0.6), ("j", 0.85)] {
        let mut cfg = SyntheticAnnotatorConfig::diagonal(acc);
        cfg.verify_correct_prob = 0.5;
        cfg.verify_corrupt_prob = 0.1;
        cfg.seed = 17;
        let inner = SyntheticBackend::new(id, cfg, scheme.clone(), Arc::new(corpus.gold_map()))
            .map_err(|e| e.to_string())?;
        let backend =
            Arc::new(FaultyBackend::new(Arc::new(inner)).with_hold(Duration::from_millis(1)));
        faulty.push(backend.clone());
        let client = Client::new(backend, MAX_IN_FLIGHT, RPM)
            .with_clock(clock.clone())
            .with_limiter(RateLimiter::with_history(RPM))
            .with_retry(RetryPolicy {
                max_retries: 4,
                base_delay_ms: 250,
                max_delay_ms: 4_000,
            });
        clients.insert(id.to_string(), Arc::new(client));
    }
    for (i, t) in targets.iter().enumerate() {
        let faults = match i % 4 {
            0 => vec![Fault::Transient],
            1 => vec![Fault::RateLimited, Fault::Transient],
            2 => vec![Fault::Malformed],
            _ => vec![],
        };
        faulty[0].script(t, Stage::Annotate, faults.clone());
        faulty[0].script(t, Stage::Verify, faults);
        faulty[1].script(t, Stage::Adjudicate, vec![Fault::Transient]);
    }
    let orch = Orchestrator::new(scheme.clone(), PromptTemplates::default(), clients.clone())
        .with_parallelism(8);
    let ledger = orch
        .run_strategy(
            &strategy(Depth::Adjudicated, AdjudicationScope::Chain, 2, 5),
            &corpus,
            &targets,
            None,
            RunOptions::default(),
        )
        .map_err(|e| e.to_string())?;
    let retried = ledger.records.iter().filter(|r| r.attempts > 1).count();
    ensure!(retried > 0, "no retries observed");

    let mut grants = 0;
    let mut span = Duration::ZERO;
    for (id, client) in &clients {
        let mut times = client.limiter().history();
        times.sort();
        for (i, t) in times.iter().enumerate() {
            let in_window = times[i..]
                .iter()
                .take_while(|u| **u < *t + Duration::from_secs(60))
                .count();
            ensure!(
                in_window <= RPM,
                "{id}: {in_window} requests in the minute from {t:?}"
            );
        }
        ensure!(
            client.in_flight().peak() <= MAX_IN_FLIGHT,
            "{id}: {} permits held at once",
            client.in_flight().peak()
        );
        grants += times.len();
        span = span.max(times.last().copied().unwrap_or_default());
    }
    for b in &faulty {
        ensure!(
            b.peak_concurrency() <= MAX_IN_FLIGHT,
            "{}: {} requests outstanding at once",
            b.backend_id(),
            b.peak_concurrency()
        );
    }
    let calls: usize = faulty.iter().map(|b| b.calls()).sum();
    ensure!(calls == grants, "{calls} backend calls but {grants} grants");
    ensure!(
        span > Duration::from_secs(60),
        "limiter never had to wait ({span:?} of virtual time)"
    );
    let peak = faulty
        .iter()
        .map(|b| b.peak_concurrency())
        .max()
        .unwrap_or(0);
    Ok(format!(
        "{grants} requests over {:.0} virtual min, {retried} retried records, peak {peak}/{MAX_IN_FLIGHT} in flight",
        span.as_secs_f64() / 60.0
    ))
}
