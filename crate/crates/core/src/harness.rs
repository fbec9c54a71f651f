//! Experiment orchestration: configuration, the encode-select-merge-
//! summarize-assemble-prefill-decode pipeline, reports, and on-disk
//! artifacts with a content-hash manifest.
//!
//! Every run is a pure function of (config, seed); wall-clock fields are the
//! only nondeterministic outputs and are excluded from the determinism hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{measure_skip_divergence, ErrorReport};
use crate::error::{Error, Result};
use crate::flops::{dense_flops, skip_flops, FlopsQuery, FlopsReport};
use crate::model::{CaptureOptions, Model, ModelConfig, PrefillOutput, SkipSchedule, WeightInit};
use crate::numerics::{MacCounter, Matrix, Scalar, Scope};
use crate::reduce::{
    merge_tokens_with_stats, select_tokens, similarity_density, MergeConfig, SelectionConfig,
    SimilarityDensity,
};
use crate::summary::summarize;
use crate::tokens::{assemble_sequence, mock_encode, synthetic_text, MockEncoderConfig, TokenRole, TokenSequence};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub encoder: MockEncoderConfig,
    pub selection: SelectionConfig,
    pub merge: MergeConfig,
    pub schedule: SkipSchedule,
    pub decode_steps: usize,
    /// Synthetic text tokens appended after the visual block.
    #[serde(default = "default_n_text")]
    pub n_text: usize,
    /// Scale of the similarity error term in the KL bound.
    #[serde(default = "default_sim_scale")]
    pub sim_scale: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Export per-layer attention maps (raw f32 plus JSON sidecar).
    #[serde(default)]
    pub capture_attention: bool,
}

fn default_n_text() -> usize {
    8
}

fn default_sim_scale() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::stage("model config", e))?;
        self.encoder.validate().map_err(|e| Error::stage("encoder config", e))?;
        self.schedule.validate().map_err(|e| Error::stage("schedule", e))?;
        if self.encoder.dim != self.model.hidden {
            return Err(Error::invalid(format!(
                "encoder dim {} != model hidden {}",
                self.encoder.dim, self.model.hidden
            )));
        }
        if self.merge.k == 0 {
            return Err(Error::invalid("merge k must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed required"));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TokenCounts {
    /// Visual tokens the dense baseline would feed through every block
    /// (all encoder outputs except the Cls reference).
    pub baseline_visual: usize,
    pub retained: usize,
    pub skipped_before_merge: usize,
    pub skipped: usize,
    pub summaries: usize,
    pub text: usize,
    pub assembled_total: usize,
    /// Visual tokens through attention (N1): retained + skipped + summaries.
    pub attention_visual: usize,
    /// Visual tokens through the FFN (N2).
    pub ffn_visual: usize,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct WallClock {
    pub prefill_ms: f64,
    pub decode_ms: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MacSnapshot {
    pub attention_proj: u64,
    pub attention_score: u64,
    pub ffn: u64,
    pub other: u64,
    pub total: u64,
}

impl MacSnapshot {
    fn from_counter(c: &MacCounter) -> Self {
        MacSnapshot {
            attention_proj: c.scope_total(Scope::AttentionProj),
            attention_score: c.scope_total(Scope::AttentionScore),
            ffn: c.scope_total(Scope::Ffn),
            other: c.scope_total(Scope::Other),
            total: c.total(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub dense_baseline: FlopsReport,
    pub skip: FlopsReport,
    /// skip / dense over visual tokens only.
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub token_counts: TokenCounts,
    pub decoded_ids: Vec<usize>,
    pub evicted_positions: Vec<usize>,
    pub flops: FlopsSummary,
    pub instrumented_macs: MacSnapshot,
    pub theta: f64,
    pub error: Option<ErrorReport>,
    /// Median of five repetitions; excluded from the determinism hash.
    pub wall_clock: WallClock,
}

impl RunReport {
    /// JSON rendering with timing zeroed, used for determinism hashing.
    pub fn canonical_json(&self) -> String {
        let mut clone = self.clone();
        clone.wall_clock = WallClock::default();
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn mix_seed(run_seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the salted seed.
    let mut z = run_seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Assembled sequence plus bookkeeping from the front half of the pipeline.
pub struct AssembledRun<T> {
    pub model: Model<T>,
    pub sequence: TokenSequence<T>,
    pub counts: TokenCounts,
    pub theta: f64,
    pub text_ids: Vec<usize>,
}

/// Mock-encode, select, merge, summarize, and assemble for one run seed.
pub fn build_run<T: Scalar>(cfg: &ExperimentConfig, run_seed: u64) -> Result<AssembledRun<T>> {
    cfg.validate()?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = mix_seed(run_seed, cfg.model.seed.wrapping_add(1));
    let model: Model<T> = Model::new(&model_cfg).map_err(|e| Error::stage("model init", e))?;

    let mut encoder_cfg = cfg.encoder.clone();
    encoder_cfg.seed = mix_seed(run_seed, cfg.encoder.seed.wrapping_add(2));
    let visual: TokenSequence<T> = mock_encode(&encoder_cfg).map_err(|e| Error::stage("encode", e))?;
    let baseline_visual = cfg.encoder.n_global + cfg.encoder.n_local;

    let (retained, skipped_raw) =
        select_tokens(&visual, &cfg.selection).map_err(|e| Error::stage("select", e))?;
    let skipped_before_merge = skipped_raw.len();

    let (skipped, theta) = if cfg.schedule.merge && !skipped_raw.is_empty() {
        let k = cfg.merge.k.min(skipped_raw.len());
        let (merged, stats) = merge_tokens_with_stats(&skipped_raw, &MergeConfig { k })
            .map_err(|e| Error::stage("merge", e))?;
        (merged, stats.theta)
    } else {
        (skipped_raw, 1.0)
    };

    let s_former = if cfg.schedule.fs {
        Some(summarize(&retained.embeddings, &model.summary_former).map_err(|e| Error::stage("former summary", e))?)
    } else {
        None
    };
    let s_latter = if cfg.schedule.ls {
        // Latter summary aggregates the whole visual prefix: retained plus
        // (merged) skipped tokens.
        let mut stacked = retained.embeddings.clone();
        stacked.push_rows(&skipped.embeddings);
        Some(summarize(&stacked, &model.summary_latter).map_err(|e| Error::stage("latter summary", e))?)
    } else {
        None
    };

    let (text, text_ids) = synthetic_text(cfg.n_text, &model.embed, mix_seed(run_seed, 3));
    let sequence = assemble_sequence(
        &retained,
        &skipped,
        s_former.as_deref(),
        s_latter.as_deref(),
        &text,
    )
    .map_err(|e| Error::stage("assemble", e))?;

    let routing = cfg.schedule.ffn_routing(&sequence.roles);
    let is_visual = |role: &TokenRole| {
        matches!(
            role,
            TokenRole::RetainedVisual
                | TokenRole::SkippedVisual
                | TokenRole::SummaryFormer
                | TokenRole::SummaryLatter
        )
    };
    let attention_visual = sequence.roles.iter().filter(|r| is_visual(r)).count();
    let ffn_visual = sequence
        .roles
        .iter()
        .zip(&routing)
        .filter(|(r, routed)| is_visual(r) && **routed)
        .count();
    let summaries = usize::from(cfg.schedule.fs) + usize::from(cfg.schedule.ls);

    let counts = TokenCounts {
        baseline_visual,
        retained: retained.len(),
        skipped_before_merge,
        skipped: skipped.len(),
        summaries,
        text: text.len(),
        assembled_total: sequence.len(),
        attention_visual,
        ffn_visual,
    };

    Ok(AssembledRun {
        model,
        sequence,
        counts,
        theta,
        text_ids,
    })
}

const TIMING_REPS: usize = 5;

/// Execute one full experiment for one seed. Writes artifacts under
/// `out_dir/seed_<seed>/` when an output directory is given; returns the
/// report either way.
pub fn run_experiment(cfg: &ExperimentConfig, run_seed: u64, out_dir: Option<&Path>) -> Result<RunReport> {
    let run: AssembledRun<f32> = build_run(cfg, run_seed)?;
    let capture = CaptureOptions {
        activations: false,
        attention: cfg.capture_attention,
    };

    // First repetition keeps the outputs; four more time the phases.
    let mut prefill_times = Vec::with_capacity(TIMING_REPS);
    let mut decode_times = Vec::with_capacity(TIMING_REPS);
    let mut kept: Option<(PrefillOutput<f32>, Vec<usize>, MacCounter)> = None;
    for rep in 0..TIMING_REPS {
        let mut counter = MacCounter::new();
        let rep_capture = if rep == 0 { capture } else { CaptureOptions::default() };
        let t0 = Instant::now();
        let mut state = run
            .model
            .prefill(&run.sequence, &cfg.schedule, &mut counter, &rep_capture)
            .map_err(|e| Error::stage("prefill", e))?;
        prefill_times.push(t0.elapsed().as_secs_f64() * 1e3);

        let t1 = Instant::now();
        let ids = run
            .model
            .greedy_decode(&mut state, cfg.decode_steps, &Default::default(), &mut counter)
            .map_err(|e| Error::stage("decode", e))?;
        decode_times.push(t1.elapsed().as_secs_f64() * 1e3);
        if rep == 0 {
            kept = Some((state, ids, counter));
        }
    }
    let (state, decoded_ids, counter) = kept.expect("first repetition kept");

    let flops = flops_summary(cfg, &run.counts)?;
    let error = if cfg.schedule.sf {
        let model64: Model<f64> = {
            let mut mc = run.model.cfg.clone();
            mc.seed = run.model.cfg.seed;
            Model::new(&mc).map_err(|e| Error::stage("analysis model", e))?
        };
        let seq64 = run.sequence.cast::<f64>();
        Some(
            measure_skip_divergence(&model64, &seq64, &cfg.schedule, run.theta, cfg.sim_scale)
                .map_err(|e| Error::stage("error analysis", e))?,
        )
    } else {
        None
    };

    let report = RunReport {
        seed: run_seed,
        token_counts: run.counts,
        decoded_ids,
        evicted_positions: state.evicted_positions.clone(),
        flops,
        instrumented_macs: MacSnapshot::from_counter(&counter),
        theta: run.theta,
        error,
        wall_clock: WallClock {
            prefill_ms: median(&mut prefill_times),
            decode_ms: median(&mut decode_times),
        },
    };

    if let Some(dir) = out_dir {
        let seed_dir = dir.join(format!("seed_{run_seed}"));
        write_run_artifacts(cfg, &report, &run.sequence, &state, &seed_dir)
            .map_err(|e| Error::stage("artifacts", e))?;
    }
    Ok(report)
}

/// Fan every configured seed out (in parallel when enabled), writing
/// per-seed artifact directories and a single top-level manifest.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let out_dir = cfg.output_dir.clone();
    let results: Vec<Result<RunReport>> = crate::par::map_collect(&cfg.seeds, |&seed| {
        run_experiment(cfg, seed, out_dir.as_deref())
    });
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        reports.push(r?);
    }
    if let Some(dir) = &out_dir {
        let mut lines = BTreeMap::new();
        for report in &reports {
            lines.insert(
                format!("seed_{}", report.seed),
                format!("{:016x}", fnv1a(report.canonical_json().as_bytes())),
            );
        }
        let manifest = serde_json::to_string_pretty(&lines)?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join("runs.json"), manifest)?;
    }
    Ok(reports)
}

fn flops_summary(cfg: &ExperimentConfig, counts: &TokenCounts) -> Result<FlopsSummary> {
    let dense = dense_flops(&cfg.model, counts.baseline_visual)?;
    let skip = skip_flops(&FlopsQuery {
        cfg: cfg.model.clone(),
        total_tokens: counts.baseline_visual.max(counts.attention_visual),
        attention_tokens: counts.attention_visual,
        ffn_tokens: counts.ffn_visual,
    })?;
    let ratio = if dense.total_macs == 0 {
        1.0
    } else {
        skip.total_macs as f64 / dense.total_macs as f64
    };
    Ok(FlopsSummary {
        dense_baseline: dense,
        skip,
        ratio,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// The per-run artifact set: config echo, report JSON, token CSV, sequence
/// fixture, optional attention maps, and a manifest of content hashes plus
/// the timing-free determinism hash.
fn write_run_artifacts(
    cfg: &ExperimentConfig,
    report: &RunReport,
    sequence: &TokenSequence<f32>,
    state: &PrefillOutput<f32>,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let mut determinism = Vec::new();

    // `hash_bytes`: what the determinism hash sees for this file (None
    // excludes it; report.json contributes its timing-free rendering).
    let write_file = |files: &mut BTreeMap<String, String>,
                          determinism: &mut Vec<u8>,
                          name: &str,
                          bytes: &[u8],
                          hash_bytes: Option<&[u8]>|
     -> Result<()> {
        fs::write(dir.join(name), bytes)?;
        files.insert(name.to_string(), format!("{:016x}", fnv1a(bytes)));
        if let Some(h) = hash_bytes {
            determinism.extend_from_slice(h);
        }
        Ok(())
    };

    let config_json = serde_json::to_string_pretty(cfg)?;
    let canonical_config = {
        let mut c = cfg.clone();
        c.output_dir = None; // storage location must not affect the hash
        serde_json::to_string_pretty(&c)?
    };
    write_file(
        &mut files,
        &mut determinism,
        "config.json",
        config_json.as_bytes(),
        Some(canonical_config.as_bytes()),
    )?;

    let report_json = serde_json::to_string_pretty(report)?;
    let canonical = report.canonical_json();
    write_file(
        &mut files,
        &mut determinism,
        "report.json",
        report_json.as_bytes(),
        Some(canonical.as_bytes()),
    )?;

    let mut tokens_csv = String::from("index,position,role,provenance\n");
    for i in 0..sequence.len() {
        tokens_csv.push_str(&format!(
            "{},{},{:?},{}\n",
            i, sequence.positions[i], sequence.roles[i], sequence.provenance[i]
        ));
    }
    write_file(
        &mut files,
        &mut determinism,
        "tokens.csv",
        tokens_csv.as_bytes(),
        Some(tokens_csv.as_bytes()),
    )?;

    let sequence_json = serde_json::to_string(sequence)?;
    write_file(
        &mut files,
        &mut determinism,
        "sequence.json",
        sequence_json.as_bytes(),
        Some(sequence_json.as_bytes()),
    )?;

    if let Some(maps) = &state.attention_maps {
        for (layer, heads) in maps.iter().enumerate() {
            let (bin, sidecar) = attention_map_bytes(layer, heads, sequence);
            write_file(&mut files, &mut determinism, &format!("attn_l{layer}.bin"), &bin, Some(&bin))?;
            write_file(
                &mut files,
                &mut determinism,
                &format!("attn_l{layer}.json"),
                sidecar.as_bytes(),
                Some(sidecar.as_bytes()),
            )?;
        }
    }

    let manifest = Manifest {
        files,
        determinism_hash: format!("{:016x}", fnv1a(&determinism)),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
    /// Hash over every non-timing artifact; a pure function of (config, seed).
    pub determinism_hash: String,
}

impl Manifest {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Raw little-endian f32 attention weights (heads stacked row-major) plus a
/// JSON sidecar describing the shape and token roles.
fn attention_map_bytes(layer: usize, heads: &[Matrix<f32>], sequence: &TokenSequence<f32>) -> (Vec<u8>, String) {
    let rows = heads.first().map_or(0, |m| m.rows);
    let cols = heads.first().map_or(0, |m| m.cols);
    let mut bin = Vec::with_capacity(heads.len() * rows * cols * 4);
    for head in heads {
        for v in head.as_slice() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sidecar = serde_json::json!({
        "layer": layer,
        "heads": heads.len(),
        "rows": rows,
        "cols": cols,
        "dtype": "f32le",
        "roles": sequence.roles.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>(),
    });
    (bin, serde_json::to_string_pretty(&sidecar).expect("sidecar"))
}

/// One CSV row per config: id, visual token counts, FLOPs ratio, wall clock.
pub fn emit_tradeoff_curve(cfgs: &[ExperimentConfig]) -> Result<String> {
    if cfgs.is_empty() {
        return Err(Error::EmptyInput("emit_tradeoff_curve"));
    }
    let mut csv = String::from("config_id,n1,n2,flops_ratio,wall_clock_ms\n");
    for (id, cfg) in cfgs.iter().enumerate() {
        let report = run_experiment(cfg, cfg.seeds[0], None)?;
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.3}\n",
            id,
            report.token_counts.attention_visual,
            report.token_counts.ffn_visual,
            report.flops.ratio,
            report.wall_clock.prefill_ms + report.wall_clock.decode_ms,
        ));
    }
    Ok(csv)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundRow {
    pub seed: u64,
    pub report: ErrorReport,
}

/// Multi-seed bound verification: build a fresh (by default orthogonally
/// initialized, ungated) f64 model and sequence per seed, measure the skip
/// divergence, and evaluate the bounds. Seeds fan out in parallel; results
/// come back in seed order.
pub fn run_bound_experiment(
    cfg: &ExperimentConfig,
    n_seeds: u64,
    init: Option<WeightInit>,
) -> Result<Vec<BoundRow>> {
    cfg.validate()?;
    if !cfg.schedule.sf {
        return Err(Error::invalid("bound experiment requires SF on"));
    }
    let mut cfg = cfg.clone();
    if let Some(init) = init {
        cfg.model.init = init;
    }
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let rows: Vec<Result<BoundRow>> = crate::par::map_collect(&seeds, |&seed| {
        let run: AssembledRun<f64> = build_run(&cfg, seed)?;
        let report = measure_skip_divergence(&run.model, &run.sequence, &cfg.schedule, run.theta, cfg.sim_scale)?;
        Ok(BoundRow { seed, report })
    });
    rows.into_iter().collect()
}

pub fn bound_rows_csv(rows: &[BoundRow]) -> String {
    let mut csv = String::from("seed,eps_measured,eps_bound,kl_measured,kl_bound13,kl_bound14\n");
    for row in rows {
        csv.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            row.seed,
            row.report.eps_total_measured,
            row.report.eps_total_bound,
            row.report.kl_measured,
            row.report.kl_bound_eq13,
            row.report.kl_bound_eq14,
        ));
    }
    csv
}

/// Similarity-density statistics over a freshly encoded token stream.
pub fn merge_stats(cfg: &ExperimentConfig, run_seed: u64) -> Result<SimilarityDensity> {
    cfg.validate()?;
    let mut encoder_cfg = cfg.encoder.clone();
    encoder_cfg.seed = mix_seed(run_seed, cfg.encoder.seed.wrapping_add(2));
    let visual: TokenSequence<f32> = mock_encode(&encoder_cfg)?;
    similarity_density(&visual)
}

/// A small, fast configuration used by tests and the examples in the README.
pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            layers: 2,
            hidden: 16,
            ffn_inner: 32,
            n_heads: 2,
            n_kv_heads: 2,
            head_dim: 8,
            vocab: 31,
            use_bias: false,
            gated: true,
            untied_head: false,
            init: WeightInit::Gaussian,
            seed: 0,
        },
        encoder: MockEncoderConfig {
            n_global: 4,
            n_local: 16,
            window_scales: vec![1, 4],
            dim: 16,
            cluster_count: 3,
            noise_scale: 0.2,
            seed: 0,
        },
        selection: SelectionConfig::Provenance,
        merge: MergeConfig { k: 6 },
        schedule: SkipSchedule::full(),
        decode_steps: 4,
        n_text: 4,
        sim_scale: 1.0,
        seeds: vec![0],
        output_dir: None,
        capture_attention: false,
    }
}
