//! Pairing of base and fine-tuned tensors and per-layer weight deltas.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::error::{Error, Result};
use crate::Matrix;

/// A delta whose Frobenius norm is at most this fraction of the base weight's
/// norm is treated as unchanged.
pub const ZERO_DELTA_RTOL: f64 = 1e-12;

/// Which tensors take part in extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub include_patterns: Vec<String>,
    #[serde(default)]
    pub exclude_patterns: Vec<String>,
    /// Layers with `min(d, k)` below this are skipped.
    #[serde(default = "default_min_dim")]
    pub min_dim: usize,
}

fn default_min_dim() -> usize {
    1
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            include_patterns: vec!["*".into()],
            exclude_patterns: Vec::new(),
            min_dim: 1,
        }
    }
}

impl TargetSpec {
    pub fn new(include: impl IntoIterator<Item = impl Into<String>>) -> Result<Self> {
        let spec = Self {
            include_patterns: include.into_iter().map(Into::into).collect(),
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.include_patterns.is_empty() {
            return Err(Error::Usage("at least one include pattern is required".into()));
        }
        Ok(())
    }

    /// Name passes the include and exclude globs.
    pub fn matches(&self, name: &str) -> bool {
        self.include_patterns.iter().any(|p| glob_match(p, name))
            && !self.exclude_patterns.iter().any(|p| glob_match(p, name))
    }
}

/// Case-sensitive wildcard match: `*` matches any substring, `?` one character.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let s: Vec<char> = name.chars().collect();
    let (mut pi, mut si) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while si < s.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == s[si]) {
            pi += 1;
            si += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, si));
            pi += 1;
        } else if let Some((sp, ss)) = star {
            pi = sp + 1;
            si = ss + 1;
            star = Some((sp, ss + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

impl Skipped {
    fn new(name: &str, reason: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

/// Where every tensor name from either checkpoint ended up. The lists are
/// disjoint and together cover the union of names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingReport {
    pub matched: Vec<String>,
    pub only_in_base: Vec<String>,
    pub only_in_ft: Vec<String>,
    pub skipped_non_2d: Vec<Skipped>,
    pub skipped_by_pattern: Vec<Skipped>,
    pub skipped_zero_delta: Vec<Skipped>,
}

impl PairingReport {
    /// Move a matched layer to the zero-delta list.
    pub fn mark_zero_delta(&mut self, name: &str, reason: impl Into<String>) {
        self.matched.retain(|n| n != name);
        self.skipped_zero_delta.push(Skipped::new(name, reason));
    }

    /// Every name mentioned by the report, in no particular order.
    pub fn all_names(&self) -> Vec<&str> {
        let skipped = self
            .skipped_non_2d
            .iter()
            .chain(&self.skipped_by_pattern)
            .chain(&self.skipped_zero_delta)
            .map(|s| s.name.as_str());
        self.matched
            .iter()
            .chain(&self.only_in_base)
            .chain(&self.only_in_ft)
            .map(String::as_str)
            .chain(skipped)
            .collect()
    }
}

/// A base/fine-tuned pair of 2-D tensors with identical names and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPair<'a> {
    pub name: String,
    pub base: &'a TensorRecord,
    pub ft: &'a TensorRecord,
}

/// Pair tensors by exact name. Names present in both checkpoints must agree
/// on shape; anything else is classified in the report rather than failing.
pub fn pair_layers<'a>(
    base: &'a Checkpoint,
    ft: &'a Checkpoint,
    spec: &TargetSpec,
) -> Result<(Vec<LayerPair<'a>>, PairingReport)> {
    spec.validate()?;
    let names: BTreeSet<&str> = base.names().chain(ft.names()).collect();
    let mut report = PairingReport::default();
    let mut pairs = Vec::new();

    for name in names {
        let (b, f) = match (base.get(name), ft.get(name)) {
            (Some(b), Some(f)) => (b, f),
            (Some(_), None) => {
                report.only_in_base.push(name.to_string());
                continue;
            }
            (None, Some(_)) => {
                report.only_in_ft.push(name.to_string());
                continue;
            }
            (None, None) => unreachable!("name came from one of the checkpoints"),
        };
        if b.shape != f.shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor '{name}' has shape {:?} in base but {:?} in fine-tuned checkpoint",
                b.shape, f.shape
            )));
        }
        if !spec.matches(name) {
            report
                .skipped_by_pattern
                .push(Skipped::new(name, "not selected by target patterns"));
            continue;
        }
        let Some((d, k)) = b.matrix_shape() else {
            report
                .skipped_non_2d
                .push(Skipped::new(name, format!("shape {:?} is not a 2-D matrix", b.shape)));
            continue;
        };
        if d.min(k) < spec.min_dim {
            report.skipped_by_pattern.push(Skipped::new(
                name,
                format!("min({d}, {k}) below min_dim {}", spec.min_dim),
            ));
            continue;
        }
        report.matched.push(name.to_string());
        pairs.push(LayerPair {
            name: name.to_string(),
            base: b,
            ft: f,
        });
    }
    Ok((pairs, report))
}

/// One layer's fine-tuning update `w_ft - w_base`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDelta {
    pub layer_name: String,
    pub delta: Matrix,
}

impl WeightDelta {
    pub fn new(layer_name: impl Into<String>, delta: Matrix) -> Self {
        Self {
            layer_name: layer_name.into(),
            delta,
        }
    }

    pub fn rows(&self) -> usize {
        self.delta.rows()
    }

    pub fn cols(&self) -> usize {
        self.delta.cols()
    }

    /// Whether the delta is negligible relative to the base weight.
    pub fn is_zero_relative_to(&self, w_base: &Matrix) -> bool {
        self.delta.frobenius_norm_sq().sqrt() <= ZERO_DELTA_RTOL * w_base.frobenius_norm_sq().sqrt()
    }
}

/// Element-wise `w_ft - w_base` in double precision.
pub fn compute_delta(w_base: &Matrix, w_ft: &Matrix) -> Result<WeightDelta> {
    Ok(WeightDelta::new(String::new(), w_ft.sub(w_base)?))
}

/// Decode a pair and compute its delta, attaching the layer name.
pub fn delta_for_pair(base: &Checkpoint, ft: &Checkpoint, pair: &LayerPair<'_>) -> Result<(Matrix, WeightDelta)> {
    let w_base = base.matrix(&pair.name)?;
    let w_ft = ft.matrix(&pair.name)?;
    let mut delta = compute_delta(&w_base, &w_ft).map_err(|e| e.with_layer(&pair.name))?;
    delta.layer_name = pair.name.clone();
    Ok((w_base, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Dtype;
    use proptest::prelude::*;

    fn ckpt(entries: &[(&str, Vec<usize>)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, shape) in entries {
            let n: usize = shape.iter().product();
            c.insert(name, Dtype::F32, shape.clone(), &vec![0u8; n * 4]).unwrap();
        }
        c
    }

    #[test]
    fn glob_semantics() {
        assert!(glob_match("*q_proj*", "layers.0.q_proj.weight"));
        assert!(glob_match("*", ""));
        assert!(glob_match("a?c", "abc"));
        assert!(!glob_match("a?c", "ac"));
        assert!(!glob_match("*Q_PROJ*", "layers.0.q_proj.weight"));
        assert!(glob_match("*.weight", "x.weight"));
        assert!(!glob_match("*.weight", "x.weight.bias"));
        assert!(glob_match("l*s.*.w*", "layers.3.wq"));
        assert!(glob_match("*mlp_fc1*", "blk.mlp_fc1"));
    }

    #[test]
    fn pairs_by_pattern() {
        let base = ckpt(&[("q_proj", vec![4, 4]), ("bias", vec![4])]);
        let ft = ckpt(&[("q_proj", vec![4, 4]), ("bias", vec![4])]);
        let spec = TargetSpec::new(["*q_proj*"]).unwrap();
        let (pairs, report) = pair_layers(&base, &ft, &spec).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].name, "q_proj");
        assert_eq!(report.matched, vec!["q_proj"]);
        assert_eq!(report.skipped_by_pattern[0].name, "bias");
    }

    #[test]
    fn unmatched_names_and_non_2d() {
        let base = ckpt(&[("a", vec![2, 2]), ("norm", vec![3]), ("gone", vec![2, 2])]);
        let ft = ckpt(&[("a", vec![2, 2]), ("norm", vec![3]), ("new", vec![1, 1])]);
        let (pairs, report) = pair_layers(&base, &ft, &TargetSpec::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(report.only_in_base, vec!["gone"]);
        assert_eq!(report.only_in_ft, vec!["new"]);
        assert_eq!(report.skipped_non_2d[0].name, "norm");
    }

    #[test]
    fn shape_mismatch_is_fatal() {
        let base = ckpt(&[("w", vec![4, 4])]);
        let ft = ckpt(&[("w", vec![4, 8])]);
        assert!(matches!(
            pair_layers(&base, &ft, &TargetSpec::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn min_dim_and_exclusions() {
        let base = ckpt(&[("small", vec![2, 16]), ("big", vec![8, 8]), ("skip.me", vec![8, 8])]);
        let spec = TargetSpec {
            include_patterns: vec!["*".into()],
            exclude_patterns: vec!["skip*".into()],
            min_dim: 4,
        };
        let (pairs, report) = pair_layers(&base, &base, &spec).unwrap();
        assert_eq!(pairs.iter().map(|p| p.name.as_str()).collect::<Vec<_>>(), vec!["big"]);
        assert_eq!(report.skipped_by_pattern.len(), 2);
        assert!(TargetSpec::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn delta_examples() {
        let i = Matrix::identity(2);
        let d = compute_delta(&i, &i.scale(2.0)).unwrap();
        assert_eq!(d.delta, i);

        let z = compute_delta(&i, &i).unwrap();
        assert!(z.delta.is_zero());
        assert!(z.is_zero_relative_to(&i));

        let ft = Matrix::from_rows(&[[1.5, -2.0], [0.0, 1.0]]).unwrap();
        let base = Matrix::from_rows(&[[1.0, -2.0], [0.0, 0.0]]).unwrap();
        assert_eq!(
            compute_delta(&base, &ft).unwrap().delta,
            Matrix::from_rows(&[[0.5, 0.0], [0.0, 1.0]]).unwrap()
        );
        assert!(matches!(
            compute_delta(&i, &Matrix::zeros(2, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn matrix_pair() -> impl Strategy<Value = (Matrix, Matrix)> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            (
                prop::collection::vec(-1e3f64..1e3, r * c),
                prop::collection::vec(-1e3f64..1e3, r * c),
            )
                .prop_map(move |(a, b)| {
                    (Matrix::from_vec(r, c, a).unwrap(), Matrix::from_vec(r, c, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn delta_is_antisymmetric((a, b) in matrix_pair()) {
            let ab = compute_delta(&a, &b).unwrap().delta;
            let ba = compute_delta(&b, &a).unwrap().delta;
            prop_assert_eq!(ab, ba.neg());
        }

        #[test]
        fn adding_delta_restores_ft((a, b) in matrix_pair()) {
            let d = compute_delta(&a, &b).unwrap().delta;
            let back = a.add(&d).unwrap();
            let scale = b.max_abs().max(a.max_abs()).max(1.0);
            prop_assert!(back.max_abs_diff(&b).unwrap() <= 1e-12 * scale);
        }

        #[test]
        fn report_partitions_all_names(
            base_names in prop::collection::btree_set("[a-d]{1,2}", 0..8),
            ft_names in prop::collection::btree_set("[a-d]{1,2}", 0..8),
        ) {
            let shape = |n: &str| if n.len() == 1 { vec![2, 2] } else { vec![3] };
            let mk = |names: &std::collections::BTreeSet<String>| {
                let mut c = Checkpoint::new();
                for n in names {
                    let s = shape(n);
                    let len = s.iter().product::<usize>() * 4;
                    c.insert(n, Dtype::F32, s, &vec![0; len]).unwrap();
                }
                c
            };
            let (b, f) = (mk(&base_names), mk(&ft_names));
            let spec = TargetSpec { include_patterns: vec!["*".into()], exclude_patterns: vec!["b*".into()], min_dim: 1 };
            let (_, report) = pair_layers(&b, &f, &spec).unwrap();
            let mut seen = report.all_names();
            seen.sort_unstable();
            let mut union: Vec<&str> = base_names.union(&ft_names).map(String::as_str).collect();
            union.sort_unstable();
            prop_assert_eq!(seen, union);
        }
    }
}
