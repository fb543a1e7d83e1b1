use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ngdraft_core::costmodel::{heatmap, simulated_times, AcceleratorProfile, LatencyGrid};
use ngdraft_core::engine::{run_generation, GenerationConfig, RunMetrics, NO_STRATEGY};
use ngdraft_core::strategy::{DraftTables, StrategyDrafter, StrategyKind};
use ngdraft_core::{TokenId, TokenSeq};
use rayon::prelude::*;
use serde::Serialize;

use crate::setup::{sample_prompts, Model, Workspace, BIGRAM_FILE, EXTENDED_FILE, WEIGHTS_FILE};
use crate::CliError;

/// How each generation is driven; shared by `run`, `sweep` and `ablate`.
#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub kind: StrategyKind,
    pub k: usize,
    pub w: usize,
    pub q: usize,
    pub stop_token: Option<TokenId>,
    pub prompts: usize,
    pub prompt_len: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

pub struct Generation {
    pub prompt: TokenSeq,
    /// Prompt followed by the generated tokens.
    pub output: TokenSeq,
}

pub struct DatasetResult {
    pub name: String,
    pub metrics: RunMetrics,
    pub baseline_time: f64,
    pub speculative_time: f64,
    pub generations: Vec<Generation>,
}

impl DatasetResult {
    pub fn sim_speedup(&self) -> f64 {
        self.baseline_time / self.speculative_time
    }
}

/// Runs every sampled prompt of every dataset. Prompts of dataset `i` are
/// drawn with seed `seed + i`.
pub fn evaluate(
    ws: &Workspace,
    tables: &DraftTables,
    profile: &AcceleratorProfile,
    cfg: &EvalConfig,
) -> Result<Vec<DatasetResult>, CliError> {
    if cfg.prompts < 1 {
        return Err(CliError::Config("--prompts must be at least 1".into()));
    }
    let drafter = StrategyDrafter {
        kind: cfg.kind,
        q: cfg.q,
        tables,
    };
    let config = GenerationConfig {
        k: cfg.k,
        w: cfg.w,
        stop_token: cfg.stop_token,
    };
    ws.datasets
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let mut result = DatasetResult {
                name: ds.name.clone(),
                metrics: RunMetrics::default(),
                baseline_time: 0.0,
                speculative_time: 0.0,
                generations: Vec::new(),
            };
            let seed = cfg.seed.wrapping_add(i as u64);
            for prompt in sample_prompts(ds, cfg.prompts, cfg.prompt_len, seed) {
                let (output, m) =
                    run_generation(ws.predictor(), &prompt, cfg.max_tokens, config, &drafter)?;
                let (b, s) = simulated_times(&m.trace, m.token_count as usize, profile)?;
                result.baseline_time += b;
                result.speculative_time += s;
                result.metrics.merge(&m);
                result.generations.push(Generation { prompt, output });
            }
            Ok(result)
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------- derive

/// Writes the bigram and extended tables (and toy weights) to `out`.
pub fn derive(
    ws: &Workspace,
    table_k: usize,
    depth: usize,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let tables = ws.derive_tables(table_k, depth)?;
    create_dir(out)?;
    let mut written = Vec::new();
    let mut create = |name: &str| -> Result<BufWriter<File>, CliError> {
        let path = out.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        written.push(path);
        Ok(BufWriter::new(file))
    };
    if let Some(b) = &tables.bigram {
        b.write_to(create(BIGRAM_FILE)?)?;
    }
    if let Some(e) = &tables.extended {
        e.write_to(create(EXTENDED_FILE)?)?;
    }
    if let Model::Toy(m) = &ws.model {
        m.write_to(create(WEIGHTS_FILE)?)?;
    }
    Ok(written)
}

// ---------------------------------------------------------------- run

#[derive(Debug, Clone, Serialize)]
pub struct DatasetReport {
    pub name: String,
    pub prompts: usize,
    pub tokens_per_call: f64,
    pub sim_speedup: f64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub model: String,
    pub strategy: String,
    pub k: usize,
    pub w: usize,
    pub q: usize,
    pub seed: u64,
    pub max_tokens: usize,
    pub tokens_per_call: f64,
    /// Total simulated baseline time over total speculative time.
    pub sim_speedup: f64,
    pub datasets: Vec<DatasetReport>,
    pub metrics: RunMetrics,
}

impl RunReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} k={} w={} q={} model={}\n",
            self.strategy, self.k, self.w, self.q, self.model
        );
        for d in &self.datasets {
            let _ = writeln!(
                s,
                "  {:<20} prompts={:<4} calls={:<6} tokens={:<7} tok/call={:.3} sim speedup={:.3}",
                d.name,
                d.prompts,
                d.metrics.call_count,
                d.metrics.token_count,
                d.tokens_per_call,
                d.sim_speedup
            );
        }
        let _ = writeln!(
            s,
            "  {:<20} calls={} tokens={} tok/call={:.3} sim speedup={:.3}",
            "total",
            self.metrics.call_count,
            self.metrics.token_count,
            self.tokens_per_call,
            self.sim_speedup
        );
        s
    }
}

pub fn build_report(model: String, cfg: &EvalConfig, results: &[DatasetResult]) -> RunReport {
    let mut total = RunMetrics::default();
    let (mut base, mut spec) = (0.0, 0.0);
    let datasets = results
        .iter()
        .map(|r| {
            total.merge(&r.metrics);
            base += r.baseline_time;
            spec += r.speculative_time;
            DatasetReport {
                name: r.name.clone(),
                prompts: r.generations.len(),
                tokens_per_call: r.metrics.tokens_per_call,
                sim_speedup: r.sim_speedup(),
                metrics: r.metrics.clone(),
            }
        })
        .collect();
    RunReport {
        model,
        strategy: cfg.kind.to_string(),
        k: cfg.k,
        w: cfg.w,
        q: cfg.q,
        seed: cfg.seed,
        max_tokens: cfg.max_tokens,
        tokens_per_call: total.tokens_per_call,
        sim_speedup: base / spec,
        datasets,
        metrics: total,
    }
}

/// Writes `metrics.json` and `generated.txt` to `out`.
pub fn run(
    ws: &Workspace,
    model_name: String,
    tables: &DraftTables,
    profile: &AcceleratorProfile,
    cfg: &EvalConfig,
    out: &Path,
) -> Result<RunReport, CliError> {
    let results = evaluate(ws, tables, profile, cfg)?;
    let report = build_report(model_name, cfg, &results);
    create_dir(out)?;
    let json = serde_json::to_string_pretty(&report).context("serializing metrics")?;
    write_file(&out.join("metrics.json"), &json)?;

    let mut text = String::new();
    for r in &results {
        for (i, g) in r.generations.iter().enumerate() {
            let _ = writeln!(text, "### {} prompt {i}", r.name);
            let _ = writeln!(text, "{}", ws.vocab.detokenize(&g.prompt));
            let _ = writeln!(text, "--- continuation");
            let _ = writeln!(text, "{}", ws.vocab.detokenize(&g.output[g.prompt.len()..]));
        }
    }
    write_file(&out.join("generated.txt"), &text)?;
    Ok(report)
}

// ---------------------------------------------------------------- sweep

pub const SWEEP_HEADER: &str = "strategy,k,w,tokens_per_call,sim_speedup";
pub const DEFAULT_SWEEP_KS: [usize; 5] = [1, 5, 10, 20, 25];
pub const DEFAULT_SWEEP_WS: [usize; 7] = [2, 4, 6, 8, 10, 12, 14];
pub const REFERENCE_CELL: (usize, usize) = (10, 10);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub strategy: String,
    pub k: usize,
    pub w: usize,
    pub tokens_per_call: f64,
    pub sim_speedup: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Cell with the largest simulated speedup (first in grid order on ties).
    pub best: SweepRow,
    pub reference: Option<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.strategy, r.k, r.w, r.tokens_per_call, r.sim_speedup
            );
        }
        s
    }
}

/// Evaluates every `(k, w)` cell, `k` outer. Cells run in parallel; rows
/// come back in grid order.
pub fn sweep(
    ws: &Workspace,
    tables: &DraftTables,
    profile: &AcceleratorProfile,
    base: &EvalConfig,
    ks: &[usize],
    ws_: &[usize],
    out: &Path,
) -> Result<SweepReport, CliError> {
    if ks.is_empty() || ws_.is_empty() {
        return Err(CliError::Config("sweep grid must be non-empty".into()));
    }
    let cells: Vec<(usize, usize)> = ks
        .iter()
        .flat_map(|&k| ws_.iter().map(move |&w| (k, w)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(k, w)| {
            let cfg = EvalConfig { k, w, ..*base };
            let report = build_report(String::new(), &cfg, &evaluate(ws, tables, profile, &cfg)?);
            Ok(SweepRow {
                strategy: cfg.kind.to_string(),
                k,
                w,
                tokens_per_call: report.tokens_per_call,
                sim_speedup: report.sim_speedup,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut best = &rows[0];
    for r in &rows[1..] {
        if r.sim_speedup > best.sim_speedup {
            best = r;
        }
    }
    let report = SweepReport {
        best: best.clone(),
        reference: rows.iter().find(|r| (r.k, r.w) == REFERENCE_CELL).cloned(),
        rows,
    };
    create_dir(out)?;
    write_file(&out.join("sweep.csv"), &report.to_csv())?;
    let json = serde_json::to_string_pretty(&report).context("serializing sweep")?;
    write_file(&out.join("sweep.json"), &json)?;
    Ok(report)
}

// ---------------------------------------------------------------- ablate

pub struct AblationTables {
    pub dataset: String,
    pub call_count: u64,
    /// `strategy,accepted_len,count`
    pub acceptance: String,
    /// `strategy,rank,count`, ranks one-based
    pub rank: String,
    /// `strategy,rows,count`; each strategy's block sums to the call count
    pub allocation: String,
}

fn histogram_csv(header: &str, hists: &[(&str, &[u64])], offset: usize, min_len: usize) -> String {
    let mut s = format!("{header}\n");
    for (name, h) in hists {
        for i in 0..h.len().max(min_len) {
            let _ = writeln!(
                s,
                "{name},{},{}",
                i + offset,
                h.get(i).copied().unwrap_or(0)
            );
        }
    }
    s
}

/// Drafted strategies in name order, fallback steps last.
fn ordered(map: &BTreeMap<String, Vec<u64>>) -> Vec<(&str, &[u64])> {
    let mut v: Vec<(&str, &[u64])> = map
        .iter()
        .filter(|(n, _)| n.as_str() != NO_STRATEGY)
        .map(|(n, h)| (n.as_str(), h.as_slice()))
        .collect();
    if let Some(h) = map.get(NO_STRATEGY) {
        v.push((NO_STRATEGY, h));
    }
    v
}

pub fn ablation_tables(name: &str, m: &RunMetrics, k: usize, w: usize) -> AblationTables {
    AblationTables {
        dataset: name.to_owned(),
        call_count: m.call_count,
        acceptance: histogram_csv(
            "strategy,accepted_len,count",
            &ordered(&m.acceptance_by_strategy),
            0,
            w + 1,
        ),
        rank: histogram_csv("strategy,rank,count", &ordered(&m.rank_by_strategy), 1, k),
        allocation: histogram_csv(
            "strategy,rows,count",
            &ordered(&m.allocation_histogram),
            0,
            k + 1,
        ),
    }
}

/// Mixed-strategy histograms per dataset, written as
/// `ablate_<dataset>_{acceptance,rank,allocation}.csv`.
pub fn ablate(
    ws: &Workspace,
    tables: &DraftTables,
    profile: &AcceleratorProfile,
    cfg: &EvalConfig,
    out: &Path,
) -> Result<Vec<AblationTables>, CliError> {
    if cfg.kind != StrategyKind::Mixed {
        return Err(CliError::Config(format!(
            "ablate runs the mixed strategy, got --strategy {}",
            cfg.kind
        )));
    }
    let results = evaluate(ws, tables, profile, cfg)?;
    create_dir(out)?;
    let mut all = Vec::new();
    for r in &results {
        let t = ablation_tables(&r.name, &r.metrics, cfg.k, cfg.w);
        for (kind, body) in [
            ("acceptance", &t.acceptance),
            ("rank", &t.rank),
            ("allocation", &t.allocation),
        ] {
            write_file(&out.join(format!("ablate_{}_{kind}.csv", r.name)), body)?;
        }
        all.push(t);
    }
    Ok(all)
}

// ---------------------------------------------------------------- heatmap

pub const DEFAULT_HEATMAP_LS: [usize; 3] = [25, 100, 500];

/// One `heatmap_l<l>.csv` per context length.
pub fn heatmaps(
    profile: &AcceleratorProfile,
    ls: &[usize],
    ks: &[usize],
    ws: &[usize],
    out: &Path,
) -> Result<Vec<LatencyGrid>, CliError> {
    create_dir(out)?;
    ls.iter()
        .map(|&l| {
            let grid = heatmap(profile, l, ks, ws)?;
            write_file(&out.join(format!("heatmap_l{l}.csv")), &grid.to_csv())?;
            Ok(grid)
        })
        .collect()
}
