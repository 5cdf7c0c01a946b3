use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::manifest::{LayerOutcome, PhaseTimer, RunManifest, RunSettings, SizeReport, VerifyCheck};
use super::{
    seed_from_env, AnalyzeArgs, ExtractArgs, FactorDtypeArg, MergeArgs, MethodArg, PairArgs, VerifyArgs,
    AUTO_RANDOMIZED_MIN_DIM, DEFAULT_RANK, EXIT_ERROR, EXIT_OK, EXIT_PARTIAL,
};
use crate::adapter::{self, export_adapter, import_adapter, AdapterConfig, ExportOptions, ExtractionMeta};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Dtype};
use crate::delta::{delta_for_pair, pair_layers, LayerPair, PairingReport, TargetSpec, ZERO_DELTA_RTOL};
use crate::energy::{build_report, EnergyCurve};
use crate::error::{Error, Result};
use crate::factorizer::{factorize, factorize_to_threshold, merge as merge_layer, reconstruction_error};
use crate::linalg::{svd_thin, svd_truncated, SvdMethod};
use crate::LoraFactors;

/// Relative tolerance of the optimality check in `verify`.
pub const VERIFY_RTOL: f64 = 1e-6;

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub manifest: RunManifest,
    pub manifest_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
enum RankMode {
    Fixed(usize),
    Threshold(f64),
}

fn thread_pool(jobs: Option<u64>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j as usize);
    }
    builder
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))
}

fn target_spec(args: &PairArgs) -> Result<TargetSpec> {
    let spec = TargetSpec {
        include_patterns: args.target_patterns.clone(),
        exclude_patterns: args.exclude_patterns.clone(),
        min_dim: args.min_dim,
    };
    spec.validate()?;
    Ok(spec)
}

/// Per-layer seed, stable under reordering and parallel execution.
fn layer_seed(base: u64, name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    base ^ h
}

fn resolve_method(choice: MethodArg, rows: usize, cols: usize, seed: u64) -> SvdMethod {
    let randomized = match choice {
        MethodArg::Exact => false,
        MethodArg::Randomized => true,
        MethodArg::Auto => rows.min(cols) > AUTO_RANDOMIZED_MIN_DIM,
    };
    if randomized {
        SvdMethod::randomized(seed)
    } else {
        SvdMethod::Exact
    }
}

fn seed_of(method: &SvdMethod) -> Option<u64> {
    match method {
        SvdMethod::Randomized(cfg) => Some(cfg.seed),
        SvdMethod::Exact => None,
    }
}

fn check_threshold(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidThreshold(tau));
    }
    Ok(())
}

/// Targeted layers that did not make it into the output. Tensors that are not
/// 2-D (biases, norms) are listed in the pairing report but never make a run
/// partial, otherwise the default `*` pattern would flag every real model.
fn skipped_targets(report: &PairingReport, spec: &TargetSpec) -> Vec<String> {
    let unpaired = report
        .only_in_base
        .iter()
        .chain(&report.only_in_ft)
        .filter(|n| spec.matches(n))
        .cloned();
    unpaired
        .chain(report.skipped_zero_delta.iter().map(|s| s.name.clone()))
        .collect()
}

fn file_len(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path).map_err(|e| Error::io(path, e))?.len())
}

fn finish(mut manifest: RunManifest, exit_code: i32, path: Option<PathBuf>) -> Result<Outcome> {
    manifest.exit_code = exit_code;
    if let Some(p) = &path {
        manifest.write(p)?;
    }
    Ok(Outcome {
        exit_code,
        manifest,
        manifest_path: path,
    })
}

fn load_pair(args: &PairArgs, manifest: &mut RunManifest) -> Result<(Checkpoint, Checkpoint)> {
    manifest.input("base", &args.base);
    manifest.input("finetuned", &args.finetuned);
    Ok((load_checkpoint(&args.base)?, load_checkpoint(&args.finetuned)?))
}

enum LayerWork<T> {
    Zero { name: String, reason: String },
    Done(T),
}

fn zero_reason(delta_norm: f64) -> String {
    format!("delta Frobenius norm {delta_norm:e} is within {ZERO_DELTA_RTOL:e} of the base norm")
}

fn extract_layer(
    base: &Checkpoint,
    ft: &Checkpoint,
    pair: &LayerPair<'_>,
    mode: RankMode,
    choice: MethodArg,
    base_seed: u64,
) -> Result<LayerWork<(LoraFactors, LayerOutcome)>> {
    let (w_base, delta) = delta_for_pair(base, ft, pair)?;
    if delta.is_zero_relative_to(&w_base) {
        return Ok(LayerWork::Zero {
            name: pair.name.clone(),
            reason: zero_reason(delta.delta.frobenius_norm_sq().sqrt()),
        });
    }
    let (d, k) = delta.delta.shape();
    let method = resolve_method(choice, d, k, layer_seed(base_seed, &pair.name));
    let f = match mode {
        RankMode::Fixed(r) => factorize(&delta, r, method)?,
        RankMode::Threshold(tau) => factorize_to_threshold(&pair.name, &delta.delta, tau, method)?,
    };
    let (abs_error, rel_error) = reconstruction_error(&delta, &f)?;
    let outcome = LayerOutcome {
        name: pair.name.clone(),
        rows: d,
        cols: k,
        method: method.name().to_string(),
        seed: seed_of(&method),
        rank: f.rank,
        energy: f.preserved_energy(),
        abs_error,
        rel_error,
    };
    Ok(LayerWork::Done((f, outcome)))
}

/// `extract`: write an adapter directory and manifest.
pub fn extract(args: &ExtractArgs) -> Result<Outcome> {
    let mode = match (args.rank, args.energy_threshold) {
        (Some(_), Some(_)) => {
            return Err(Error::Usage("--rank and --energy-threshold are mutually exclusive".into()))
        }
        (None, Some(t)) => {
            check_threshold(t)?;
            RankMode::Threshold(t)
        }
        (Some(r), None) => RankMode::Fixed(r as usize),
        (None, None) => RankMode::Fixed(DEFAULT_RANK),
    };
    let seed = seed_from_env()?;
    let spec = target_spec(&args.pair)?;
    let mut manifest = RunManifest::new("extract");
    manifest.input("out", &args.out);
    manifest.target_spec = Some(spec.clone());
    manifest.settings = RunSettings {
        rank: match mode {
            RankMode::Fixed(r) => Some(r),
            RankMode::Threshold(_) => None,
        },
        energy_threshold: args.energy_threshold,
        method: Some(args.pair.method.as_str().to_string()),
        seed: Some(seed),
        ..RunSettings::default()
    };
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.join("phlora_manifest.json"));

    let mut timer = PhaseTimer::start();
    let (base, ft) = load_pair(&args.pair, &mut manifest)?;
    timer.lap(&mut manifest, "load");
    let (pairs, mut report) = pair_layers(&base, &ft, &spec)?;
    timer.lap(&mut manifest, "pair");

    let pool = thread_pool(args.pair.jobs)?;
    let results: Vec<Result<_>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|p| extract_layer(&base, &ft, p, mode, args.pair.method, seed))
            .collect()
    });
    let mut factors = Vec::new();
    for r in results {
        match r? {
            LayerWork::Zero { name, reason } => report.mark_zero_delta(&name, reason),
            LayerWork::Done((f, outcome)) => {
                for w in &f.warnings {
                    manifest.warn(format!("{}: {w}", f.layer_name));
                }
                factors.push(f);
                manifest.layers.push(outcome);
            }
        }
    }
    timer.lap(&mut manifest, "extract");

    let skipped = skipped_targets(&report, &spec);
    let mut exit = if skipped.is_empty() { EXIT_OK } else { EXIT_PARTIAL };
    if !skipped.is_empty() {
        manifest.warn(format!("{} targeted tensor(s) skipped: {}", skipped.len(), skipped.join(", ")));
    }
    if factors.is_empty() {
        manifest.warn("no layer produced a non-zero delta; no adapter written");
        exit = EXIT_PARTIAL;
    } else {
        let name_map: BTreeMap<String, String> = match &args.name_map {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Usage(format!("--name-map must be a JSON object of strings: {e}")))?
            }
            None => BTreeMap::new(),
        };
        let method_label = if manifest.layers.iter().all(|l| l.method == manifest.layers[0].method) {
            manifest.layers[0].method.clone()
        } else {
            "mixed".to_string()
        };
        let base_id = args
            .base_model_id
            .clone()
            .unwrap_or_else(|| args.pair.base.display().to_string());
        let cfg = AdapterConfig::for_factors(
            &factors,
            &base_id,
            Some(ExtractionMeta::new(&method_label, args.energy_threshold)),
        )?;
        let dtype = match args.factor_dtype {
            FactorDtypeArg::F64 => Dtype::F64,
            FactorDtypeArg::F32 => Dtype::F32,
            FactorDtypeArg::F16 => Dtype::F16,
        };
        let opts = ExportOptions {
            dtype: Some(dtype),
            name_map,
        };
        let summary = export_adapter(&factors, &cfg, &args.out, &opts)?;
        let finetuned_bytes = file_len(&args.pair.finetuned)?;
        manifest.sizes = Some(SizeReport {
            adapter_bytes: summary.tensor_file_bytes,
            adapter_payload_bytes: summary.payload_bytes,
            finetuned_bytes,
            compression_ratio: finetuned_bytes as f64 / summary.tensor_file_bytes as f64,
        });
    }
    timer.lap(&mut manifest, "write");
    manifest.pairing = Some(report);
    println!(
        "extracted {} layer(s) into {} (exit {exit})",
        manifest.layers.len(),
        args.out.display()
    );
    finish(manifest, exit, Some(report_path))
}

/// `merge`: apply an adapter to a base checkpoint.
pub fn merge(args: &MergeArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::new("merge");
    manifest.input("base", &args.base);
    manifest.input("adapter", &args.adapter);
    manifest.input("out", &args.out);
    manifest.settings.output_dtype = args.dtype.map(|d| Dtype::from(d).to_string());
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".manifest.json");
        PathBuf::from(p)
    });

    let mut timer = PhaseTimer::start();
    let base = load_checkpoint(&args.base)?;
    let (factors, _cfg) = import_adapter(&args.adapter)?;
    timer.lap(&mut manifest, "load");

    let missing: Vec<String> = factors
        .iter()
        .filter(|f| !base.contains(&f.layer_name))
        .map(|f| f.layer_name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingLayers(missing));
    }
    let by_name: BTreeMap<&str, &LoraFactors> = factors.iter().map(|f| (f.layer_name.as_str(), f)).collect();

    let mut out = Checkpoint::new();
    *out.metadata_mut() = base.metadata().clone();
    for rec in base.records() {
        match by_name.get(rec.name.as_str()) {
            Some(f) => {
                let w = base.matrix(&rec.name)?;
                let merged = merge_layer(&w, f)?;
                let dtype = args.dtype.map(Dtype::from).unwrap_or(rec.dtype);
                if dtype == Dtype::F16 && merged.max_abs() > 65504.0 {
                    manifest.warn(format!("{}: merged values overflow F16", rec.name));
                }
                out.insert_matrix(&rec.name, &merged, dtype)?;
                manifest.merged_layers.push(rec.name.clone());
            }
            None => out.insert(&rec.name, rec.dtype, rec.shape.clone(), base.bytes_of(rec))?,
        }
    }
    timer.lap(&mut manifest, "merge");
    save_checkpoint(&out, &args.out)?;
    timer.lap(&mut manifest, "write");
    println!(
        "merged {} layer(s) into {}",
        manifest.merged_layers.len(),
        args.out.display()
    );
    finish(manifest, EXIT_OK, Some(report_path))
}

/// Sort and de-duplicate probe ranks, warning when the input was not already
/// in that form.
fn normalize_probes(ranks: &[usize], manifest: &mut RunManifest) -> Result<Vec<usize>> {
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(Error::Usage("--ranks must list positive integers".into()));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted != ranks {
        manifest.warn(format!("probe ranks {ranks:?} normalized to {sorted:?}"));
    }
    Ok(sorted)
}

fn analyze_layer(
    base: &Checkpoint,
    ft: &Checkpoint,
    pair: &LayerPair<'_>,
    max_probe: usize,
    threshold: Option<f64>,
    choice: MethodArg,
    base_seed: u64,
) -> Result<LayerWork<(EnergyCurve, Option<usize>)>> {
    let (w_base, delta) = delta_for_pair(base, ft, pair)?;
    if delta.is_zero_relative_to(&w_base) {
        return Ok(LayerWork::Zero {
            name: pair.name.clone(),
            reason: zero_reason(delta.delta.frobenius_norm_sq().sqrt()),
        });
    }
    let (d, k) = delta.delta.shape();
    let method = resolve_method(choice, d, k, layer_seed(base_seed, &pair.name));
    let curve = match method {
        SvdMethod::Exact => {
            let svd = svd_thin(&delta.delta).map_err(|e| e.with_layer(&pair.name))?;
            EnergyCurve::from_sigma(&pair.name, d, k, &svd.sigma)
        }
        SvdMethod::Randomized(_) => {
            let width = max_probe.min(d.min(k));
            let svd = svd_truncated(&delta.delta, width, method).map_err(|e| e.with_layer(&pair.name))?;
            EnergyCurve::from_partial(&pair.name, d, k, &svd.sigma, delta.delta.frobenius_norm_sq())
        }
    };
    let selected = match threshold {
        None => None,
        Some(tau) => match curve.select_rank(tau)? {
            Some(r) => Some(r),
            None => Some(factorize_to_threshold(&pair.name, &delta.delta, tau, method)?.rank),
        },
    };
    Ok(LayerWork::Done((curve, selected)))
}

/// `analyze`: preserved-energy report over all targeted layers.
pub fn analyze(args: &AnalyzeArgs) -> Result<Outcome> {
    if let Some(t) = args.energy_threshold {
        check_threshold(t)?;
    }
    let seed = seed_from_env()?;
    let spec = target_spec(&args.pair)?;
    let mut manifest = RunManifest::new("analyze");
    let probes = normalize_probes(&args.ranks, &mut manifest)?;
    let max_probe = *probes.last().expect("non-empty");
    manifest.target_spec = Some(spec.clone());
    manifest.settings = RunSettings {
        energy_threshold: args.energy_threshold,
        method: Some(args.pair.method.as_str().to_string()),
        seed: Some(seed),
        probe_ranks: Some(probes.clone()),
        ..RunSettings::default()
    };

    let mut timer = PhaseTimer::start();
    let (base, ft) = load_pair(&args.pair, &mut manifest)?;
    timer.lap(&mut manifest, "load");
    let (pairs, mut report) = pair_layers(&base, &ft, &spec)?;
    timer.lap(&mut manifest, "pair");

    let pool = thread_pool(args.pair.jobs)?;
    let results: Vec<Result<_>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|p| analyze_layer(&base, &ft, p, max_probe, args.energy_threshold, args.pair.method, seed))
            .collect()
    });
    let mut curves = Vec::new();
    let mut selected = BTreeMap::new();
    for r in results {
        match r? {
            LayerWork::Zero { name, reason } => report.mark_zero_delta(&name, reason),
            LayerWork::Done((curve, sel)) => {
                if let Some(s) = sel {
                    selected.insert(curve.layer_name.clone(), s);
                }
                curves.push(curve);
            }
        }
    }
    timer.lap(&mut manifest, "analyze");

    let mut energy = build_report(curves, &probes)?;
    energy.energy_threshold = args.energy_threshold;
    energy.selected_ranks = selected;
    let csv = energy.to_csv();
    let json = energy.to_json();
    match &args.csv {
        Some(p) => fs::write(p, &csv).map_err(|e| Error::io(p, e))?,
        None if args.json.is_none() => print!("{csv}"),
        None => {}
    }
    if let Some(p) = &args.json {
        let mut text = serde_json::to_string_pretty(&json)?;
        text.push('\n');
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    timer.lap(&mut manifest, "write");

    let skipped = skipped_targets(&report, &spec);
    let exit = if skipped.is_empty() && !energy.curves.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    };
    if energy.curves.is_empty() {
        manifest.warn("no layer produced a non-zero delta");
    }
    manifest.energy_report = Some(serde_json::json!({
        "probe_ranks": energy.probe_ranks,
        "model_mean": energy.model_mean,
        "model_weighted_mean": energy.model_weighted_mean,
        "energy_threshold": energy.energy_threshold,
        "selected_ranks": energy.selected_ranks,
        "layers": energy.curves.iter().map(|c| c.layer_name.clone()).collect::<Vec<_>>(),
    }));
    manifest.pairing = Some(report);
    finish(manifest, exit, args.report.clone())
}

/// `verify`: Eckart–Young check of every adapter layer.
pub fn verify(args: &VerifyArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::new("verify");
    manifest.input("base", &args.base);
    manifest.input("finetuned", &args.finetuned);
    manifest.input("adapter", &args.adapter);

    let mut timer = PhaseTimer::start();
    let base = load_checkpoint(&args.base)?;
    let ft = load_checkpoint(&args.finetuned)?;
    let (factors, _cfg) = import_adapter(&args.adapter)?;
    let stored = load_checkpoint(args.adapter.join(adapter::TENSOR_FILE))?
        .records()
        .next()
        .map_or(Dtype::F32, |r| r.dtype);
    timer.lap(&mut manifest, "load");

    let missing: Vec<String> = factors
        .iter()
        .filter(|f| !base.contains(&f.layer_name) || !ft.contains(&f.layer_name))
        .map(|f| f.layer_name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingLayers(missing));
    }
    for f in &factors {
        let rec = base.get(&f.layer_name).expect("checked above");
        let (d, k) = rec.matrix_shape().ok_or_else(|| Error::NotTwoDimensional {
            name: rec.name.clone(),
            shape: rec.shape.clone(),
        })?;
        if (d, k) != (f.rows(), f.cols()) {
            return Err(Error::DimensionMismatch(format!(
                "layer '{}': adapter update is {}x{} but the base weight is {d}x{k}",
                f.layer_name,
                f.rows(),
                f.cols()
            )));
        }
        if f.rank > d.min(k) {
            return Err(Error::DimensionMismatch(format!(
                "layer '{}': adapter rank {} exceeds min({d}, {k})",
                f.layer_name, f.rank
            )));
        }
    }

    let u = stored.unit_roundoff().max(1e-13);
    let pool = thread_pool(args.jobs)?;
    let checks: Vec<Result<VerifyCheck>> = pool.install(|| {
        factors
            .par_iter()
            .map(|f| {
                let pair = LayerPair {
                    name: f.layer_name.clone(),
                    base: base.get(&f.layer_name).expect("checked"),
                    ft: ft.get(&f.layer_name).expect("checked"),
                };
                let (_, delta) = delta_for_pair(&base, &ft, &pair)?;
                let svd = svd_thin(&delta.delta).map_err(|e| e.with_layer(&f.layer_name))?;
                let tail = svd.tail_energy(f.rank);
                let residual_sq = delta.delta.sub(&f.update())?.frobenius_norm_sq();
                let total = delta.delta.frobenius_norm_sq();
                let tolerance = VERIFY_RTOL * tail + 16.0 * f.rank as f64 * u * u * total;
                Ok(VerifyCheck {
                    name: f.layer_name.clone(),
                    rank: f.rank,
                    residual_sq,
                    tail_energy: tail,
                    tolerance,
                    pass: (residual_sq - tail).abs() <= tolerance,
                })
            })
            .collect()
    });
    for c in checks {
        let c = c?;
        println!(
            "{} {} rank={} residual_sq={:.9e} tail_energy={:.9e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.rank,
            c.residual_sq,
            c.tail_energy
        );
        manifest.checks.push(c);
    }
    timer.lap(&mut manifest, "verify");
    let exit = if manifest.checks.iter().all(|c| c.pass) {
        EXIT_OK
    } else {
        let failed: Vec<&str> = manifest
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name.as_str())
            .collect();
        eprintln!("verification failed for: {}", failed.join(", "));
        EXIT_ERROR
    };
    finish(manifest, exit, args.report.clone())
}
