//! Preserved-energy curves, threshold-based rank selection and model-level
//! energy reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Slack applied when comparing a preserved-energy ratio against a threshold,
/// so ties such as `E = 0.5` vs `τ = 0.5` survive rounding in the SVD.
pub const THRESHOLD_SLACK: f64 = 1e-12;

/// Fraction of the total squared singular-value mass held by the first `r`
/// values. `r` is clamped to `[1, len]`; a zero-energy spectrum counts as fully
/// preserved.
pub fn preserved_energy<T: Scalar>(sigma: &[T], r: usize) -> f64 {
    let sq: Vec<f64> = sigma.iter().map(|s| s.as_f64() * s.as_f64()).collect();
    let total: f64 = sq.iter().sum();
    if total == 0.0 || sigma.is_empty() {
        return 1.0;
    }
    let r = r.clamp(1, sq.len());
    if r == sq.len() {
        return 1.0;
    }
    sq[..r].iter().sum::<f64>() / total
}

fn check_threshold(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidThreshold(tau));
    }
    Ok(())
}

/// Smallest `r >= 1` whose preserved energy reaches `tau`.
pub fn select_rank<T: Scalar>(sigma: &[T], tau: f64) -> Result<usize> {
    check_threshold(tau)?;
    let total: f64 = sigma.iter().map(|s| s.as_f64() * s.as_f64()).sum();
    Ok(select_rank_partial(sigma, total, tau)?.unwrap_or(sigma.len().max(1)))
}

/// Threshold selection over a leading slice of the spectrum when the total
/// energy is known separately (for example as `‖ΔW‖_F²`). Returns `None` when
/// the prefix never reaches `tau`.
pub fn select_rank_partial<T: Scalar>(leading_sigma: &[T], total: f64, tau: f64) -> Result<Option<usize>> {
    check_threshold(tau)?;
    if total == 0.0 {
        return Ok(Some(1));
    }
    let mut acc = 0.0;
    for (i, s) in leading_sigma.iter().enumerate() {
        acc += s.as_f64() * s.as_f64();
        if acc / total >= tau - THRESHOLD_SLACK {
            return Ok(Some(i + 1));
        }
    }
    Ok(None)
}

/// Cumulative preserved energy of one layer: `cumulative[r-1] = E_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCurve {
    pub layer_name: String,
    pub rows: usize,
    pub cols: usize,
    pub sigma_sq: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// Total squared energy of the delta; equals `Σ sigma_sq` for complete curves.
    pub total: f64,
}

impl EnergyCurve {
    pub fn from_sigma<T: Scalar>(layer_name: impl Into<String>, rows: usize, cols: usize, sigma: &[T]) -> Self {
        let sigma_sq: Vec<f64> = sigma.iter().map(|s| s.as_f64() * s.as_f64()).collect();
        let total: f64 = sigma_sq.iter().sum();
        let cumulative = if total == 0.0 {
            vec![1.0; sigma_sq.len()]
        } else {
            let mut acc = 0.0;
            let mut c: Vec<f64> = sigma_sq
                .iter()
                .map(|s| {
                    acc += s;
                    acc / total
                })
                .collect();
            if let Some(last) = c.last_mut() {
                *last = 1.0;
            }
            c
        };
        Self {
            layer_name: layer_name.into(),
            rows,
            cols,
            sigma_sq,
            cumulative,
            total,
        }
    }

    /// Curve over only the leading singular values, normalized by a separately
    /// known `total` (typically `‖ΔW‖_F²`). Ranks beyond the prefix are not
    /// represented; probe within `leading_sigma.len()`.
    pub fn from_partial<T: Scalar>(
        layer_name: impl Into<String>,
        rows: usize,
        cols: usize,
        leading_sigma: &[T],
        total: f64,
    ) -> Self {
        if leading_sigma.len() >= rows.min(cols) {
            return Self::from_sigma(layer_name, rows, cols, leading_sigma);
        }
        let sigma_sq: Vec<f64> = leading_sigma.iter().map(|s| s.as_f64() * s.as_f64()).collect();
        let mut acc = 0.0;
        let cumulative = sigma_sq
            .iter()
            .map(|s| {
                acc += s;
                if total == 0.0 {
                    1.0
                } else {
                    (acc / total).min(1.0)
                }
            })
            .collect();
        Self {
            layer_name: layer_name.into(),
            rows,
            cols,
            sigma_sq,
            cumulative,
            total,
        }
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Whether the curve covers the full spectrum.
    pub fn is_complete(&self) -> bool {
        self.sigma_sq.len() >= self.rows.min(self.cols)
    }

    /// `E_r`, with ranks beyond the spectrum length treated as full rank.
    pub fn at(&self, r: usize) -> f64 {
        if self.cumulative.is_empty() {
            return 1.0;
        }
        self.cumulative[r.clamp(1, self.cumulative.len()) - 1]
    }

    /// Smallest rank reaching `tau`. For partial curves this is `None` when the
    /// covered prefix falls short.
    pub fn select_rank(&self, tau: f64) -> Result<Option<usize>> {
        check_threshold(tau)?;
        if self.total == 0.0 {
            return Ok(Some(1));
        }
        let found = self
            .cumulative
            .iter()
            .position(|&e| e >= tau - THRESHOLD_SLACK)
            .map(|i| i + 1);
        Ok(match found {
            None if self.is_complete() => Some(self.cumulative.len()),
            other => other,
        })
    }
}

/// Model-level summary of per-layer energy curves at a set of probe ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub probe_ranks: Vec<usize>,
    pub curves: Vec<EnergyCurve>,
    /// Unweighted mean over layers of `E_r` at each probe rank.
    pub model_mean: Vec<f64>,
    /// Mean weighted by `rows × cols`.
    pub model_weighted_mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub selected_ranks: BTreeMap<String, usize>,
}

/// Aggregate curves at the given probe ranks. An empty curve set yields means
/// of 1.0 (nothing to lose).
pub fn build_report(curves: Vec<EnergyCurve>, probe_ranks: &[usize]) -> Result<EnergyReport> {
    if probe_ranks.is_empty() || probe_ranks.contains(&0) {
        return Err(Error::Usage("probe ranks must be a non-empty list of positive integers".into()));
    }
    let mut model_mean = Vec::with_capacity(probe_ranks.len());
    let mut model_weighted_mean = Vec::with_capacity(probe_ranks.len());
    for &r in probe_ranks {
        if curves.is_empty() {
            model_mean.push(1.0);
            model_weighted_mean.push(1.0);
            continue;
        }
        let sum: f64 = curves.iter().map(|c| c.at(r)).sum();
        model_mean.push(sum / curves.len() as f64);
        let (num, den) = curves.iter().fold((0.0, 0.0), |(n, d), c| {
            let w = (c.rows * c.cols) as f64;
            (n + w * c.at(r), d + w)
        });
        model_weighted_mean.push(num / den);
    }
    Ok(EnergyReport {
        probe_ranks: probe_ranks.to_vec(),
        curves,
        model_mean,
        model_weighted_mean,
        energy_threshold: None,
        selected_ranks: BTreeMap::new(),
    })
}

impl EnergyReport {
    /// Record per-layer ranks chosen by an energy threshold.
    pub fn with_threshold(mut self, tau: f64) -> Result<Self> {
        let mut selected = BTreeMap::new();
        for c in &self.curves {
            if let Some(r) = c.select_rank(tau)? {
                selected.insert(c.layer_name.clone(), r);
            }
        }
        self.energy_threshold = Some(tau);
        self.selected_ranks = selected;
        Ok(self)
    }

    /// `layer,rank,energy` rows for every layer and probe rank, followed by the
    /// `__model_mean__` and `__model_weighted_mean__` pseudo-layers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,rank,energy\n");
        for c in &self.curves {
            for &r in &self.probe_ranks {
                out.push_str(&format!("{},{},{}\n", csv_field(&c.layer_name), r, sig6(c.at(r))));
            }
        }
        for (label, values) in [
            ("__model_mean__", &self.model_mean),
            ("__model_weighted_mean__", &self.model_weighted_mean),
        ] {
            for (&r, &v) in self.probe_ranks.iter().zip(values) {
                out.push_str(&format!("{label},{r},{}\n", sig6(v)));
            }
        }
        out
    }

    /// JSON mirror of the CSV rows at full precision, plus the report summary.
    pub fn to_json(&self) -> serde_json::Value {
        let mut rows = Vec::new();
        for c in &self.curves {
            for &r in &self.probe_ranks {
                rows.push(serde_json::json!({"layer": c.layer_name, "rank": r, "energy": c.at(r)}));
            }
        }
        for (label, values) in [
            ("__model_mean__", &self.model_mean),
            ("__model_weighted_mean__", &self.model_weighted_mean),
        ] {
            for (&r, &v) in self.probe_ranks.iter().zip(values) {
                rows.push(serde_json::json!({"layer": label, "rank": r, "energy": v}));
            }
        }
        serde_json::json!({
            "rows": rows,
            "probe_ranks": self.probe_ranks,
            "model_mean": self.model_mean,
            "model_weighted_mean": self.model_weighted_mean,
            "energy_threshold": self.energy_threshold,
            "selected_ranks": self.selected_ranks,
            "curves": self.curves,
        })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Six significant digits, fixed notation for the [0, 1] range used here.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-5..=15).contains(&mag) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserved_energy_examples() {
        assert!((preserved_energy(&[3.0, 2.0, 1.0], 2) - 13.0 / 14.0).abs() < 1e-15);
        assert_eq!(preserved_energy(&[3.0, 2.0, 1.0], 3), 1.0);
        assert_eq!(preserved_energy(&[3.0, 2.0, 1.0], 7), 1.0);
        assert_eq!(preserved_energy(&[5.0, 0.0, 0.0], 1), 1.0);
        assert_eq!(preserved_energy(&[0.0, 0.0], 1), 1.0);
        assert!((preserved_energy(&[3.0f32, 2.0, 1.0], 1) - 9.0 / 14.0).abs() < 1e-7);
    }

    #[test]
    fn select_rank_examples() {
        let s = [3.0, 2.0, 1.0];
        assert_eq!(select_rank(&s, 0.9).unwrap(), 2);
        assert_eq!(select_rank(&s, 0.5).unwrap(), 1);
        assert_eq!(select_rank(&s, 0.999).unwrap(), 3);
        assert_eq!(select_rank(&[1.0, 1.0], 1.0).unwrap(), 2);
        assert_eq!(select_rank(&[1.0, 1.0], 0.5).unwrap(), 1);
        assert_eq!(select_rank(&[0.0, 0.0], 0.7).unwrap(), 1);
        for bad in [0.0, -0.1, 1.0001, f64::NAN] {
            assert!(matches!(select_rank(&s, bad), Err(Error::InvalidThreshold(_))));
        }
    }

    #[test]
    fn partial_selection() {
        let total = 14.0;
        assert_eq!(select_rank_partial(&[3.0], total, 0.9).unwrap(), None);
        assert_eq!(select_rank_partial(&[3.0, 2.0], total, 0.9).unwrap(), Some(2));
    }

    #[test]
    fn curve_invariants() {
        let c = EnergyCurve::from_sigma("l", 3, 3, &[3.0, 2.0, 1.0]);
        assert_eq!(c.sigma_sq, vec![9.0, 4.0, 1.0]);
        assert!((c.cumulative[0] - 9.0 / 14.0).abs() < 1e-12);
        assert_eq!(c.cumulative[2], 1.0);
        assert_eq!(c.at(10), 1.0);
        assert_eq!(c.select_rank(0.9).unwrap(), Some(2));
        assert!(c.is_complete());
        let z = EnergyCurve::from_sigma("z", 2, 2, &[0.0, 0.0]);
        assert_eq!(z.cumulative, vec![1.0, 1.0]);

        let p = EnergyCurve::from_partial("p", 3, 3, &[3.0], 14.0);
        assert!(!p.is_complete());
        assert!((p.at(1) - 9.0 / 14.0).abs() < 1e-15);
        assert_eq!(p.select_rank(0.5).unwrap(), Some(1));
        assert_eq!(p.select_rank(0.9).unwrap(), None);
    }

    #[test]
    fn report_examples() {
        let c = EnergyCurve::from_sigma("l", 3, 3, &[3.0, 2.0, 1.0]);
        let r = build_report(vec![c.clone()], &[1, 2, 3]).unwrap();
        let want = [9.0 / 14.0, 13.0 / 14.0, 1.0];
        for (a, b) in r.model_mean.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let two = build_report(vec![c.clone(), c.clone()], &[1, 2, 3]).unwrap();
        assert_eq!(two.model_mean, r.model_mean);
        let far = build_report(vec![c], &[50]).unwrap();
        assert_eq!(far.model_mean, vec![1.0]);
        assert!(build_report(vec![], &[]).is_err());
        assert!(build_report(vec![], &[0]).is_err());
    }

    #[test]
    fn weighted_mean_uses_layer_size() {
        let small = EnergyCurve::from_sigma("s", 1, 2, &[1.0, 1.0]); // E1 = 0.5, weight 2
        let big = EnergyCurve::from_sigma("b", 2, 3, &[1.0, 0.0]); // E1 = 1.0, weight 6
        let r = build_report(vec![small, big], &[1]).unwrap();
        assert!((r.model_mean[0] - 0.75).abs() < 1e-15);
        assert!((r.model_weighted_mean[0] - (2.0 * 0.5 + 6.0) / 8.0).abs() < 1e-15);
    }

    #[test]
    fn csv_and_json_layout() {
        let c = EnergyCurve::from_sigma("layer.0", 3, 3, &[3.0, 2.0, 1.0]);
        let r = build_report(vec![c], &[1, 2]).unwrap().with_threshold(0.9).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,rank,energy");
        assert_eq!(lines[1], "layer.0,1,0.642857");
        assert_eq!(lines[2], "layer.0,2,0.928571");
        assert_eq!(lines[3], "__model_mean__,1,0.642857");
        assert_eq!(lines[6], "__model_weighted_mean__,2,0.928571");
        let json = r.to_json();
        assert_eq!(json["rows"].as_array().unwrap().len(), 6);
        assert_eq!(json["selected_ranks"]["layer.0"], 2);
        assert_eq!(json["rows"][1]["energy"].as_f64().unwrap(), 13.0 / 14.0);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(0.5), "0.500000");
        assert_eq!(sig6(0.0123456789), "0.0123457");
        assert_eq!(sig6(0.0), "0");
    }
}
