//! Two-stage scheme search: a global sweep, then per-layer escalation with
//! skipping, then confirmation on the full evaluation set.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::scheme::{FallbackPrecision, GlobalScheme, LayerAction, LayerOverride, QuantScheme, TablePolicy};
use crate::calib::{calibrate, Calibration, DEFAULT_BINS};
use crate::dataset::{has_both_classes, LabeledSample};
use crate::error::{Error, Result};
use crate::graph::transform::{apply_scheme, fuse_fc_relu};
use crate::graph::{predict, ModelGraph, Precision, ReferenceBackend};
use crate::metrics::{compare_ne, normalized_entropy, per_layer_error, skipped_flops_ratio, LayerError, NeComparison};
use crate::par::Exec;
use crate::quant::{Granularity, RangeMethod};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub ne_diff_max: f64,
    pub max_skip_flops_ratio: f64,
    pub small_eval_size: usize,
    pub calib_size: usize,
    pub small_full_gap_max: f64,
    pub max_iterations: usize,
    pub max_retries: usize,
    /// Percentile used by the per-layer escalation.
    pub layer_percentile: f32,
    /// Percentile offered to the global sweep.
    pub global_percentile: f32,
    /// Include skip-last-FC variants in the global sweep.
    pub global_skip_last: bool,
    pub fallback: FallbackPrecision,
    pub tables: TablePolicy,
    pub bins: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            ne_diff_max: 0.0005,
            max_skip_flops_ratio: 0.2,
            small_eval_size: 4000,
            calib_size: 2000,
            small_full_gap_max: 0.0001,
            max_iterations: 40,
            max_retries: 3,
            layer_percentile: 0.99,
            global_percentile: 0.9999,
            global_skip_last: true,
            fallback: FallbackPrecision::Fp16,
            tables: TablePolicy::Int8,
            bins: DEFAULT_BINS,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.ne_diff_max > 0.0
            && self.max_skip_flops_ratio >= 0.0
            && self.small_full_gap_max > 0.0
            && self.small_eval_size > 0
            && self.calib_size > 0
            && self.bins >= 2;
        if !positive {
            return Err(Error::Config("search thresholds and sizes must be positive".into()));
        }
        RangeMethod::Percentile { q: self.layer_percentile }.validate()?;
        RangeMethod::Percentile { q: self.global_percentile }.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub calib: Vec<LabeledSample>,
    pub small_eval: Vec<LabeledSample>,
}

fn pick(src: &[LabeledSample], n: usize, rng: &mut crate::rng::Rng) -> Vec<LabeledSample> {
    if n >= src.len() {
        return src.to_vec();
    }
    let mut idx = sample(rng, src.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| src[i].clone()).collect()
}

/// Seeded uniform samples without replacement. The evaluation sample is
/// redrawn (up to 10 times) until it holds both label classes.
pub fn sample_datasets(
    train: &[LabeledSample],
    eval: &[LabeledSample],
    calib_size: usize,
    eval_size: usize,
    seed: u64,
) -> Result<Datasets> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Data("calibration and evaluation sources must be nonempty".into()));
    }
    let calib = pick(train, calib_size, &mut stream(seed, "search/calib-sample"));
    let mut rng = stream(seed, "search/eval-sample");
    for _ in 0..10 {
        let small_eval = pick(eval, eval_size, &mut rng);
        if has_both_classes(&small_eval) {
            return Ok(Datasets { calib, small_eval });
        }
    }
    Err(Error::Data(format!(
        "no evaluation sample of {eval_size} with both label classes after 10 draws"
    )))
}

/// The global candidates, in enumeration order.
pub fn global_candidates(cfg: &SearchConfig) -> Vec<GlobalScheme> {
    let acts = [
        RangeMethod::MinMax,
        RangeMethod::Percentile { q: cfg.global_percentile },
        RangeMethod::L2Min,
    ];
    let weights = [RangeMethod::MinMax, RangeMethod::Percentile { q: cfg.global_percentile }];
    let grans = [Granularity::PerTensor, Granularity::PerChannel];
    let skips: &[bool] = if cfg.global_skip_last { &[false, true] } else { &[false] };
    let mut out = Vec::new();
    for &skip_last_fc in skips {
        for &weight_granularity in &grans {
            for &weight_range in &weights {
                for &act_range in &acts {
                    out.push(GlobalScheme {
                        act_range,
                        weight_range,
                        weight_granularity,
                        skip_last_fc,
                        fallback: cfg.fallback,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum LogRecord {
    Candidate {
        index: usize,
        scheme: GlobalScheme,
        ne_diff: f64,
        skipped_ratio: f64,
    },
    GlobalBest {
        index: usize,
        ne_diff: f64,
        passes: bool,
    },
    Refine {
        iteration: usize,
        layer: String,
        action: LayerAction,
        ne_diff: f64,
        kept: bool,
        skipped_ratio: f64,
        layer_errors: Vec<LayerError>,
    },
    /// Global candidates re-swept after a skip, overrides held fixed.
    Reselect {
        iteration: usize,
        index: usize,
        ne_diff: f64,
        kept: bool,
        layer_errors: Vec<LayerError>,
    },
    Confirm {
        round: usize,
        ne_diff_small: f64,
        ne_diff_full: f64,
        gap: f64,
    },
    Stop {
        status: Status,
        reason: String,
    },
}

/// Append-only record of everything the search evaluated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchLog {
    pub records: Vec<LogRecord>,
}

impl SearchLog {
    fn push(&mut self, r: LogRecord) {
        debug!("{}", serde_json::to_string(&r).unwrap_or_default());
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("log record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub scheme: QuantScheme,
    pub status: Status,
    pub ne_diff_small: f64,
    pub ne_diff_full: Option<f64>,
    pub skipped_ratio: f64,
    pub iterations: usize,
    pub rounds: usize,
    pub reason: String,
}

/// Evaluates schemes against one calibration and one small evaluation set.
pub struct Evaluator<'a> {
    pub graph: ModelGraph,
    pub calib: Calibration,
    pub eval: &'a [LabeledSample],
    pub ne_fp32: f64,
    pub exec: Exec,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub ne: NeComparison,
    pub skipped_ratio: f64,
    pub layer_errors: Vec<LayerError>,
}

impl<'a> Evaluator<'a> {
    pub fn new(g: &ModelGraph, calib: Calibration, eval: &'a [LabeledSample], exec: Exec) -> Result<Self> {
        let graph = fuse_fc_relu(g);
        let preds = predict(&graph, &ReferenceBackend::default(), eval, exec)?;
        let ne_fp32 = normalized_entropy(&preds, eval)?.ne;
        Ok(Evaluator {
            graph,
            calib,
            eval,
            ne_fp32,
            exec,
        })
    }

    pub fn quantize(&self, scheme: &QuantScheme) -> Result<ModelGraph> {
        apply_scheme(&self.graph, scheme, &self.calib)
    }

    pub fn evaluate(&self, scheme: &QuantScheme, with_layers: bool) -> Result<Evaluation> {
        let q = self.quantize(scheme)?;
        let preds = predict(&q, &ReferenceBackend::default(), self.eval, self.exec)?;
        let ne = compare_ne(normalized_entropy(&preds, self.eval)?.ne, self.ne_fp32);
        let layer_errors = if with_layers {
            per_layer_error(&q, &self.graph, self.eval, self.exec)?
        } else {
            Vec::new()
        };
        Ok(Evaluation {
            ne,
            skipped_ratio: skipped_flops_ratio(&self.graph, scheme),
            layer_errors,
        })
    }

    /// Error of quantized (int8) FC layers only, worst first; ties keep
    /// graph order.
    fn ranked(&self, scheme: &QuantScheme, errors: &[LayerError]) -> Vec<(String, f64)> {
        let skipped = scheme.skipped_layers(&self.graph);
        let mut r: Vec<(String, f64)> = errors
            .iter()
            .filter(|e| {
                self.graph
                    .node(&e.node)
                    .is_some_and(|n| n.is_fc() && n.precision == Precision::Fp32)
                    && !skipped.contains(&e.node)
            })
            .map(|e| (e.node.clone(), e.error))
            .collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1));
        r
    }
}

/// Sweep the global candidates. Among passing candidates the one skipping
/// the fewest flops wins, then the lowest ne_diff. When none passes, the
/// lowest ne_diff among candidates without skips seeds the refinement.
/// Remaining ties prefer fewer refined range methods, then enumeration order.
pub fn global_search(
    ev: &Evaluator<'_>,
    cfg: &SearchConfig,
    log: &mut SearchLog,
) -> Result<(QuantScheme, Evaluation)> {
    let candidates = global_candidates(cfg);
    let results = ev.exec.map_indexed(candidates.len(), |i| {
        let mut s = QuantScheme::new(candidates[i]);
        s.tables = cfg.tables;
        ev.evaluate(&s, false).map(|e| (s, e))
    });
    let mut evaluated = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        let (s, e) = r?;
        log.push(LogRecord::Candidate {
            index: i,
            scheme: s.global,
            ne_diff: e.ne.ne_diff,
            skipped_ratio: e.skipped_ratio,
        });
        evaluated.push((i, s, e));
    }
    let key = |(i, s, e): &(usize, QuantScheme, Evaluation)| {
        (
            e.skipped_ratio,
            e.ne.ne_diff,
            s.global.refined_methods(),
            *i,
        )
    };
    let passing: Vec<_> = evaluated
        .iter()
        .filter(|c| c.2.ne.passes(cfg.ne_diff_max))
        .collect();
    let best = if passing.is_empty() {
        evaluated
            .iter()
            .filter(|c| c.2.skipped_ratio == 0.0)
            .min_by(|a, b| {
                let (ka, kb) = (key(a), key(b));
                (ka.1, ka.2, ka.3).partial_cmp(&(kb.1, kb.2, kb.3)).unwrap()
            })
    } else {
        passing
            .into_iter()
            .min_by(|a, b| key(a).partial_cmp(&key(b)).unwrap())
    };
    let (i, s, e) = best
        .cloned()
        .ok_or_else(|| Error::Config("the global sweep has no unskipped candidate".into()))?;
    log.push(LogRecord::GlobalBest {
        index: i,
        ne_diff: e.ne.ne_diff,
        passes: e.ne.passes(cfg.ne_diff_max),
    });
    info!("global best #{i}: ne_diff {:.6}", e.ne.ne_diff);
    Ok((s, e))
}

/// Re-sweep the global candidates that share `scheme`'s skip-last choice,
/// keeping its overrides. Returns the best one if it lowers ne_diff.
fn reselect_global(
    ev: &Evaluator<'_>,
    scheme: &QuantScheme,
    cur: &Evaluation,
    cfg: &SearchConfig,
    iteration: usize,
    log: &mut SearchLog,
) -> Result<Option<(QuantScheme, Evaluation)>> {
    let candidates: Vec<(usize, QuantScheme)> = global_candidates(cfg)
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.skip_last_fc == scheme.global.skip_last_fc && *c != scheme.global)
        .map(|(i, c)| {
            let mut s = scheme.clone();
            s.global = c;
            (i, s)
        })
        .collect();
    let results = ev.exec.map_indexed(candidates.len(), |i| ev.evaluate(&candidates[i].1, false));
    let mut scored = Vec::with_capacity(results.len());
    for (k, r) in results.into_iter().enumerate() {
        let (i, s) = &candidates[k];
        scored.push((r?.ne.ne_diff, s.global.refined_methods(), *i, k));
    }
    let Some(&(d, _, _, k)) = scored.iter().min_by(|a, b| a.partial_cmp(b).unwrap()) else {
        return Ok(None);
    };
    let kept = d < cur.ne.ne_diff;
    let e = if kept { Some(ev.evaluate(&candidates[k].1, true)?) } else { None };
    log.push(LogRecord::Reselect {
        iteration,
        index: candidates[k].0,
        ne_diff: d,
        kept,
        layer_errors: e.as_ref().map(|e| e.layer_errors.clone()).unwrap_or_default(),
    });
    info!("reselect after #{iteration}: global #{} -> ne_diff {d:.6} (kept: {kept})", candidates[k].0);
    Ok(e.map(|e| (candidates[k].1.clone(), e)))
}

const LADDER: usize = 3;

fn ladder(cfg: &SearchConfig, step: usize) -> LayerAction {
    match step {
        0 => LayerAction::PerChannelWeights,
        1 => LayerAction::PercentileActs { q: cfg.layer_percentile },
        2 => LayerAction::L2MinActs,
        _ => LayerAction::Skip,
    }
}

fn with_override(s: &QuantScheme, node: &str, action: LayerAction) -> QuantScheme {
    let mut s = s.clone();
    if action == LayerAction::Skip {
        // A skipped layer needs no earlier escalations.
        s.overrides.retain(|o| o.node != node);
    }
    s.overrides.push(LayerOverride {
        node: node.to_string(),
        action,
    });
    s
}

fn finish(scheme: QuantScheme, e: &Evaluation, status: Status, iterations: usize, reason: &str) -> SearchResult {
    SearchResult {
        scheme,
        status,
        ne_diff_small: e.ne.ne_diff,
        ne_diff_full: None,
        skipped_ratio: e.skipped_ratio,
        iterations,
        rounds: 1,
        reason: reason.to_string(),
    }
}

/// Per-layer escalation starting from `start`. Each step changes only the
/// layer that currently ranks worst: it tries per-channel weights, a
/// percentile activation range and an l2min activation range (keeping an
/// action only if it lowers ne_diff); once those are spent and the layer
/// still ranks worst, it is skipped.
pub fn iterative_refine(
    ev: &Evaluator<'_>,
    start: QuantScheme,
    start_eval: Evaluation,
    cfg: &SearchConfig,
    log: &mut SearchLog,
) -> Result<SearchResult> {
    let mut scheme = start;
    let mut cur = start_eval;
    if cur.ne.passes(cfg.ne_diff_max) {
        log.push(LogRecord::Stop {
            status: Status::Pass,
            reason: "start scheme passes".into(),
        });
        return Ok(finish(scheme, &cur, Status::Pass, 0, "start scheme passes"));
    }
    if cur.layer_errors.is_empty() {
        cur = ev.evaluate(&scheme, true)?;
    }
    let mut steps: BTreeMap<String, usize> = BTreeMap::new();
    let mut iterations = 0;
    loop {
        if iterations >= cfg.max_iterations {
            let reason = "iteration budget exhausted";
            log.push(LogRecord::Stop {
                status: Status::Fail,
                reason: reason.into(),
            });
            return Ok(finish(scheme, &cur, Status::Fail, iterations, reason));
        }
        let ranked = ev.ranked(&scheme, &cur.layer_errors);
        let Some((layer, _)) = ranked.first().cloned() else {
            let reason = "no quantized layer left to refine";
            log.push(LogRecord::Stop {
                status: Status::Fail,
                reason: reason.into(),
            });
            return Ok(finish(scheme, &cur, Status::Fail, iterations, reason));
        };
        let step = steps.entry(layer.clone()).or_insert(0);
        let action = ladder(cfg, *step);
        *step += 1;
        let candidate = with_override(&scheme, &layer, action);
        if action == LayerAction::Skip {
            let ratio = skipped_flops_ratio(&ev.graph, &candidate);
            if ratio > cfg.max_skip_flops_ratio {
                let reason = format!(
                    "skipping `{layer}` would raise the skipped-flops ratio to {ratio:.4} (limit {})",
                    cfg.max_skip_flops_ratio
                );
                log.push(LogRecord::Stop {
                    status: Status::Fail,
                    reason: reason.clone(),
                });
                return Ok(finish(scheme, &cur, Status::Fail, iterations, &reason));
            }
        }
        let e = ev.evaluate(&candidate, true)?;
        iterations += 1;
        let kept = action == LayerAction::Skip || e.ne.ne_diff < cur.ne.ne_diff;
        log.push(LogRecord::Refine {
            iteration: iterations,
            layer: layer.clone(),
            action,
            ne_diff: e.ne.ne_diff,
            kept,
            skipped_ratio: e.skipped_ratio,
            layer_errors: e.layer_errors.clone(),
        });
        info!("refine #{iterations}: {layer} {action:?} -> ne_diff {:.6} (kept: {kept})", e.ne.ne_diff);
        if kept {
            scheme = candidate;
            cur = e;
            if action == LayerAction::Skip && !cur.ne.passes(cfg.ne_diff_max) {
                if let Some((s, e)) = reselect_global(ev, &scheme, &cur, cfg, iterations, log)? {
                    scheme = s;
                    cur = e;
                }
            }
        }
        if cur.ne.passes(cfg.ne_diff_max) {
            log.push(LogRecord::Stop {
                status: Status::Pass,
                reason: "ne_diff within the gate".into(),
            });
            return Ok(finish(scheme, &cur, Status::Pass, iterations, "ne_diff within the gate"));
        }
        if *steps.get(&layer).unwrap() > LADDER {
            // Skipped; the layer leaves the ranking.
            continue;
        }
    }
}

/// Global sweep plus refinement on one pair of datasets.
pub fn search_once(
    g: &ModelGraph,
    ds: &Datasets,
    cfg: &SearchConfig,
    exec: Exec,
    log: &mut SearchLog,
) -> Result<(SearchResult, Calibration)> {
    let calib = calibrate(g, &ds.calib, cfg.bins, exec)?;
    let ev = Evaluator::new(g, calib, &ds.small_eval, exec)?;
    let (best, e) = global_search(&ev, cfg, log)?;
    let res = iterative_refine(&ev, best, e, cfg, log)?;
    Ok((res, ev.calib))
}

/// ne_diff of `scheme` on `full_eval`.
pub fn full_ne_diff(
    g: &ModelGraph,
    scheme: &QuantScheme,
    calib: &Calibration,
    full_eval: &[LabeledSample],
    exec: Exec,
) -> Result<f64> {
    let ev = Evaluator::new(g, calib.clone(), full_eval, exec)?;
    Ok(ev.evaluate(scheme, false)?.ne.ne_diff)
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub result: SearchResult,
    pub calibration: Calibration,
    pub log: SearchLog,
}

/// The full workflow. `initial` overrides the first round's sampled
/// datasets. After a passing round, the scheme is checked on `full_eval`;
/// if the small/full gap exceeds the limit, sizes double and the search
/// repeats with fresh samples, at most `max_retries` times.
pub fn run_search(
    g: &ModelGraph,
    train: &[LabeledSample],
    full_eval: &[LabeledSample],
    initial: Option<Datasets>,
    cfg: &SearchConfig,
    exec: Exec,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut log = SearchLog::default();
    let (mut calib_size, mut eval_size) = (cfg.calib_size, cfg.small_eval_size);
    let mut initial = initial;
    for round in 0..=cfg.max_retries {
        let ds = match initial.take() {
            Some(ds) => ds,
            None => sample_datasets(
                train,
                full_eval,
                calib_size,
                eval_size,
                crate::rng::derive_seed(cfg.seed, &format!("search/round{round}")),
            )?,
        };
        let (mut res, calibration) = search_once(g, &ds, cfg, exec, &mut log)?;
        res.rounds = round + 1;
        if res.status == Status::Fail {
            return Ok(SearchOutcome {
                result: res,
                calibration,
                log,
            });
        }
        let full = full_ne_diff(g, &res.scheme, &calibration, full_eval, exec)?;
        let gap = (full - res.ne_diff_small).abs();
        log.push(LogRecord::Confirm {
            round,
            ne_diff_small: res.ne_diff_small,
            ne_diff_full: full,
            gap,
        });
        res.ne_diff_full = Some(full);
        if gap <= cfg.small_full_gap_max {
            return Ok(SearchOutcome {
                result: res,
                calibration,
                log,
            });
        }
        if round == cfg.max_retries {
            res.status = Status::Fail;
            res.reason = format!(
                "small/full ne_diff gap {gap:.6} above {} after {} retries",
                cfg.small_full_gap_max, cfg.max_retries
            );
            log.push(LogRecord::Stop {
                status: Status::Fail,
                reason: res.reason.clone(),
            });
            return Ok(SearchOutcome {
                result: res,
                calibration,
                log,
            });
        }
        info!("gap {gap:.6} on round {round}; doubling sample sizes");
        calib_size = (calib_size * 2).min(train.len());
        eval_size = (eval_size * 2).min(full_eval.len());
    }
    unreachable!("the loop returns on its last round")
}
