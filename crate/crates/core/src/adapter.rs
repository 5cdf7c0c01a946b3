//! On-disk adapter directory: `adapter_config.json` plus
//! `adapter_model.safetensors` holding `<layer>.lora_A.weight` (`r×k`) and
//! `<layer>.lora_B.weight` (`d×r`) for each layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Dtype};
use crate::error::{Error, Result};
use crate::{LoraFactors, Matrix};

pub const CONFIG_FILE: &str = "adapter_config.json";
pub const TENSOR_FILE: &str = "adapter_model.safetensors";
const A_SUFFIX: &str = ".lora_A.weight";
const B_SUFFIX: &str = ".lora_B.weight";

/// Provenance of an extracted adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMeta {
    pub method: String,
    pub energy_threshold: Option<f64>,
    pub version: String,
}

impl ExtractionMeta {
    pub fn new(method: &str, energy_threshold: Option<f64>) -> Self {
        Self {
            method: method.to_string(),
            energy_threshold,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Adapter descriptor in the common PEFT-style layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    #[serde(default = "lora_type")]
    pub peft_type: String,
    pub r: usize,
    pub lora_alpha: f64,
    pub target_modules: Vec<String>,
    #[serde(default)]
    pub base_model_name_or_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_pattern: Option<BTreeMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_pattern: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phlora_meta: Option<ExtractionMeta>,
}

fn lora_type() -> String {
    "LORA".into()
}

impl AdapterConfig {
    /// Config for a set of extracted factors. `alpha` always equals the rank so
    /// the applied update is exactly `B·A`; mixed ranks produce a
    /// `rank_pattern` (and a matching `alpha_pattern`) keyed by layer name.
    pub fn for_factors(factors: &[LoraFactors], base_model: &str, meta: Option<ExtractionMeta>) -> Result<Self> {
        let max = factors.iter().map(|f| f.rank).max().ok_or(Error::EmptyAdapter)?;
        let uniform = factors.iter().all(|f| f.rank == max);
        let (rank_pattern, alpha_pattern) = if uniform {
            (None, None)
        } else {
            let ranks: BTreeMap<String, usize> = factors.iter().map(|f| (f.layer_name.clone(), f.rank)).collect();
            let alphas = ranks.iter().map(|(k, &r)| (k.clone(), r as f64)).collect();
            (Some(ranks), Some(alphas))
        };
        Ok(Self {
            peft_type: lora_type(),
            r: max,
            lora_alpha: max as f64,
            target_modules: target_modules(factors.iter().map(|f| f.layer_name.as_str())),
            base_model_name_or_path: base_model.to_string(),
            rank_pattern,
            alpha_pattern,
            phlora_meta: meta,
        })
    }

    pub fn rank_for(&self, layer: &str) -> usize {
        self.rank_pattern
            .as_ref()
            .and_then(|p| p.get(layer).copied())
            .unwrap_or(self.r)
    }

    pub fn alpha_for(&self, layer: &str) -> f64 {
        self.alpha_pattern
            .as_ref()
            .and_then(|p| p.get(layer).copied())
            .unwrap_or(self.lora_alpha)
    }

    fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::MalformedConfig("r must be positive".into()));
        }
        if self.target_modules.is_empty() {
            return Err(Error::MalformedConfig("target_modules is empty".into()));
        }
        if !(self.lora_alpha.is_finite()) {
            return Err(Error::MalformedConfig("lora_alpha is not finite".into()));
        }
        Ok(())
    }
}

/// Module suffixes of the given layer names: the last dotted component after
/// dropping a trailing `.weight`.
pub fn target_modules<'a>(layers: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<String> = layers
        .map(|l| {
            let stem = l.strip_suffix(".weight").unwrap_or(l);
            stem.rsplit('.').next().unwrap_or(stem).to_string()
        })
        .collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, Default)]
pub struct ExportOptions {
    /// Storage dtype of the factors (F32 unless size matters more than precision).
    pub dtype: Option<Dtype>,
    /// Optional renaming of layer names before they are written.
    pub name_map: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportSummary {
    pub config_path: PathBuf,
    pub tensor_path: PathBuf,
    pub tensor_file_bytes: u64,
    pub payload_bytes: u64,
}

/// Bytes of factor data for the given factors at `dtype`:
/// `Σ (r·k + d·r) · width`.
pub fn payload_bytes(factors: &[LoraFactors], dtype: Dtype) -> u64 {
    factors
        .iter()
        .map(|f| ((f.rank * f.cols() + f.rows() * f.rank) * dtype.width()) as u64)
        .sum()
}

fn check_ranks(factors: &[LoraFactors], cfg: &AdapterConfig) -> Result<()> {
    if factors.is_empty() {
        return Err(Error::EmptyAdapter);
    }
    match &cfg.rank_pattern {
        None => {
            if let Some(f) = factors.iter().find(|f| f.rank != cfg.r) {
                return Err(Error::InconsistentRank(format!(
                    "layer '{}' has rank {} but the config declares uniform rank {}",
                    f.layer_name, f.rank, cfg.r
                )));
            }
        }
        Some(pattern) => {
            for f in factors {
                match pattern.get(&f.layer_name) {
                    Some(&r) if r == f.rank => {}
                    other => {
                        return Err(Error::InconsistentRank(format!(
                            "layer '{}' has rank {} but rank_pattern says {:?}",
                            f.layer_name, f.rank, other
                        )))
                    }
                }
            }
            let max = factors.iter().map(|f| f.rank).max().unwrap_or(0);
            if cfg.r != max {
                return Err(Error::InconsistentRank(format!(
                    "config r {} differs from the largest layer rank {max}",
                    cfg.r
                )));
            }
        }
    }
    Ok(())
}

/// Build the tensor container for a set of factors.
pub fn adapter_checkpoint(factors: &[LoraFactors], opts: &ExportOptions) -> Result<Checkpoint> {
    let dtype = opts.dtype.unwrap_or(Dtype::F32);
    let mut ckpt = Checkpoint::new();
    let mut ordered: Vec<&LoraFactors> = factors.iter().collect();
    ordered.sort_by(|a, b| a.layer_name.cmp(&b.layer_name));
    for f in ordered {
        let name = opts.name_map.get(&f.layer_name).unwrap_or(&f.layer_name);
        let (a, b) = unit_scale_factors(f);
        ckpt.insert_matrix(&format!("{name}{A_SUFFIX}"), &a, dtype)?;
        ckpt.insert_matrix(&format!("{name}{B_SUFFIX}"), &b, dtype)?;
    }
    ckpt.metadata_mut().insert("format".into(), "pt".into());
    Ok(ckpt)
}

/// Fold a non-unit scale into the factors so that `alpha = r` stays exact.
fn unit_scale_factors(f: &LoraFactors) -> (Matrix, Matrix) {
    if f.scale == 1.0 {
        (f.a.clone(), f.b.clone())
    } else if f.scale > 0.0 {
        let s = f.scale.sqrt();
        (f.a.scale(s), f.b.scale(s))
    } else {
        (f.a.clone(), f.b.scale(f.scale))
    }
}

/// Write an adapter directory (created if needed).
pub fn export_adapter(
    factors: &[LoraFactors],
    cfg: &AdapterConfig,
    dir: impl AsRef<Path>,
    opts: &ExportOptions,
) -> Result<ExportSummary> {
    check_ranks(factors, cfg)?;
    cfg.validate()?;
    if cfg.lora_alpha != cfg.r as f64 {
        return Err(Error::MalformedConfig(format!(
            "exported adapters use lora_alpha == r, got alpha {} for r {}",
            cfg.lora_alpha, cfg.r
        )));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut cfg = cfg.clone();
    if !opts.name_map.is_empty() {
        let rename = |k: &String| opts.name_map.get(k).cloned().unwrap_or_else(|| k.clone());
        cfg.rank_pattern = cfg
            .rank_pattern
            .map(|p| p.into_iter().map(|(k, v)| (rename(&k), v)).collect());
        cfg.alpha_pattern = cfg
            .alpha_pattern
            .map(|p| p.into_iter().map(|(k, v)| (rename(&k), v)).collect());
        cfg.target_modules = target_modules(factors.iter().map(|f| {
            opts.name_map
                .get(&f.layer_name)
                .map_or(f.layer_name.as_str(), String::as_str)
        }));
    }

    let ckpt = adapter_checkpoint(factors, opts)?;
    let config_path = dir.join(CONFIG_FILE);
    let tensor_path = dir.join(TENSOR_FILE);
    let mut json = serde_json::to_string_pretty(&cfg)?;
    json.push('\n');
    fs::write(&config_path, json).map_err(|e| Error::io(&config_path, e))?;
    save_checkpoint(&ckpt, &tensor_path)?;
    let tensor_file_bytes = fs::metadata(&tensor_path)
        .map_err(|e| Error::io(&tensor_path, e))?
        .len();
    Ok(ExportSummary {
        config_path,
        tensor_path,
        tensor_file_bytes,
        payload_bytes: payload_bytes(factors, opts.dtype.unwrap_or(Dtype::F32)),
    })
}

pub fn read_config(dir: impl AsRef<Path>) -> Result<AdapterConfig> {
    let path = dir.as_ref().join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg: AdapterConfig =
        serde_json::from_str(&text).map_err(|e| Error::MalformedConfig(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read an adapter directory back into factors (sorted by layer name).
///
/// Retained singular values are recovered as squared column norms of `B`,
/// which is exact only for adapters produced with the balanced split.
/// Adapters whose `alpha` differs from their rank get `scale = alpha / r`.
pub fn import_adapter(dir: impl AsRef<Path>) -> Result<(Vec<LoraFactors>, AdapterConfig)> {
    let dir = dir.as_ref();
    let cfg = read_config(dir)?;
    let ckpt = load_checkpoint(dir.join(TENSOR_FILE))?;

    let mut a_names = BTreeMap::new();
    let mut b_names = BTreeMap::new();
    for name in ckpt.names() {
        if let Some(layer) = name.strip_suffix(A_SUFFIX) {
            a_names.insert(layer.to_string(), name.to_string());
        } else if let Some(layer) = name.strip_suffix(B_SUFFIX) {
            b_names.insert(layer.to_string(), name.to_string());
        } else {
            return Err(Error::MalformedConfig(format!("unexpected tensor '{name}' in adapter")));
        }
    }
    if let Some(orphan) = a_names
        .iter()
        .find(|(l, _)| !b_names.contains_key(*l))
        .or_else(|| b_names.iter().find(|(l, _)| !a_names.contains_key(*l)))
    {
        return Err(Error::MissingCounterpart(orphan.1.clone()));
    }
    if a_names.is_empty() {
        return Err(Error::EmptyAdapter);
    }

    let foreign = cfg.phlora_meta.is_none();
    let mut factors = Vec::with_capacity(a_names.len());
    for (layer, a_name) in &a_names {
        let a = ckpt.matrix(a_name)?;
        let b = ckpt.matrix(&b_names[layer])?;
        if a.rows() != b.cols() {
            return Err(Error::DimensionMismatch(format!(
                "layer '{layer}': lora_A is {}x{} but lora_B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let rank = a.rows();
        let declared = cfg.rank_for(layer);
        if declared != rank {
            return Err(Error::DimensionMismatch(format!(
                "layer '{layer}': config declares rank {declared} but tensors have rank {rank}"
            )));
        }
        let retained_sigma: Vec<f64> = (0..rank)
            .map(|j| b.column(j).iter().map(|x| x * x).sum())
            .collect();
        let total_sq_energy = retained_sigma.iter().map(|s| s * s).sum();
        let mut warnings = Vec::new();
        if foreign {
            warnings.push("singular values estimated from lora_B column norms".to_string());
        }
        factors.push(LoraFactors {
            layer_name: layer.clone(),
            a,
            b,
            rank,
            retained_sigma,
            total_sq_energy,
            scale: cfg.alpha_for(layer) / declared as f64,
            warnings,
        });
    }
    Ok((factors, cfg))
}
