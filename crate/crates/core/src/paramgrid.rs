//! Parameter space expansion.
//!
//! An experiment declares discrete classes and continuous ranges. Task
//! assignments are produced by taking the Cartesian product of all discrete
//! parameters, sampling it `n` times with minimal repetition (per-combination
//! occurrence counts differ by at most one), independently sampling each
//! continuous range `n` times, and randomly matching the continuous draws to
//! the discrete samples by a seed-derived permutation.
//!
//! Everything here is deterministic given `(params, n, seed)`. The generator
//! is pinned to ChaCha8 (`rand_chacha::ChaCha8Rng`), which produces the same
//! stream on every platform, and index shuffles draw 64-bit values so results
//! do not depend on pointer width. Sub-seeds are derived by hashing the base
//! seed with a purpose label ([`crate::util::derive_seed`]).

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("parameter {0:?} has an empty value list")]
    EmptyDomain(String),
    #[error("parameter {name:?} has an invalid range [{lo}, {hi}]")]
    BadRange { name: String, lo: f64, hi: f64 },
    #[error("unbound placeholder {0:?}")]
    UnboundPlaceholder(String),
}

/// A discrete class of values or a continuous range.
#[derive(Debug, Clone, PartialEq)]
pub enum ParameterSpec {
    Discrete { values: Vec<String> },
    Continuous { lo: f64, hi: f64 },
}

impl ParameterSpec {
    pub fn discrete<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ParameterSpec::Discrete {
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    pub fn continuous(lo: f64, hi: f64) -> Self {
        ParameterSpec::Continuous { lo, hi }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ParameterSpec::Discrete { .. })
    }
}

// Serialized shape matches the recipe schema: exactly one of `values` /
// `range` is present.
#[derive(Serialize, Deserialize)]
struct RawParameterSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    range: Option<[f64; 2]>,
}

impl Serialize for ParameterSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let raw = match self {
            ParameterSpec::Discrete { values } => RawParameterSpec {
                values: Some(values.clone()),
                range: None,
            },
            ParameterSpec::Continuous { lo, hi } => RawParameterSpec {
                values: None,
                range: Some([*lo, *hi]),
            },
        };
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParameterSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawParameterSpec::deserialize(deserializer)?;
        match (raw.values, raw.range) {
            (Some(values), None) => Ok(ParameterSpec::Discrete { values }),
            (None, Some([lo, hi])) => Ok(ParameterSpec::Continuous { lo, hi }),
            (Some(_), Some(_)) => Err(serde::de::Error::custom(
                "parameter declares both `values` and `range`",
            )),
            (None, None) => Err(serde::de::Error::custom(
                "parameter declares neither `values` nor `range`",
            )),
        }
    }
}

/// One concrete value bound to a parameter name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Continuous(f64),
    Discrete(String),
}

impl ParamValue {
    /// Command-line rendering: discrete values verbatim, continuous values
    /// as the shortest decimal that round-trips.
    pub fn render(&self) -> String {
        match self {
            ParamValue::Discrete(s) => s.clone(),
            ParamValue::Continuous(x) => format!("{x}"),
        }
    }
}

/// One sampled binding per parameter of an experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterAssignment {
    pub bindings: IndexMap<String, ParamValue>,
}

impl ParameterAssignment {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.bindings.get(name)
    }

    /// Stable textual form, used by tests for multiset comparisons.
    pub fn canonical(&self) -> String {
        let mut parts: Vec<String> = self
            .bindings
            .iter()
            .map(|(k, v)| format!("{k}={}", v.render()))
            .collect();
        parts.sort();
        parts.join(",")
    }
}

/// Cartesian product of discrete parameters, in deterministic order:
/// names in insertion order with later names varying fastest, values in
/// declared order.
pub fn cartesian(
    discrete: &IndexMap<String, Vec<String>>,
) -> Result<Vec<ParameterAssignment>, GridError> {
    for (name, values) in discrete {
        if values.is_empty() {
            return Err(GridError::EmptyDomain(name.clone()));
        }
    }
    let mut out = vec![ParameterAssignment::default()];
    for (name, values) in discrete {
        let mut next = Vec::with_capacity(out.len() * values.len());
        for base in &out {
            for value in values {
                let mut assignment = base.clone();
                assignment
                    .bindings
                    .insert(name.clone(), ParamValue::Discrete(value.clone()));
                next.push(assignment);
            }
        }
        out = next;
    }
    Ok(out)
}

/// Draw `n` items from `pool` so that per-item occurrence counts differ by
/// at most one: `⌊n/|pool|⌋` full shuffled copies followed by one shuffled
/// partial copy.
pub fn sample_minimal_repetition<T: Clone>(pool: &[T], n: usize, seed: u64) -> Vec<T> {
    assert!(!pool.is_empty(), "minimal-repetition sampling needs a non-empty pool");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let full_copies = n / pool.len();
    let remainder = n % pool.len();
    for _ in 0..full_copies {
        let mut indexes: Vec<usize> = (0..pool.len()).collect();
        shuffle(&mut indexes, &mut rng);
        out.extend(indexes.into_iter().map(|i| pool[i].clone()));
    }
    if remainder > 0 {
        let mut indexes: Vec<usize> = (0..pool.len()).collect();
        shuffle(&mut indexes, &mut rng);
        out.extend(indexes[..remainder].iter().map(|&i| pool[i].clone()));
    }
    out
}

/// `n` independent uniform draws from `[lo, hi]`.
pub fn sample_continuous(name: &str, lo: f64, hi: f64, n: usize, seed: u64) -> Result<Vec<f64>, GridError> {
    // NaN bounds fail the finiteness check.
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(GridError::BadRange {
            name: name.to_string(),
            lo,
            hi,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect())
}

/// Expand a parameter map into exactly `n` assignments.
pub fn expand(
    params: &IndexMap<String, ParameterSpec>,
    n: usize,
    seed: u64,
) -> Result<Vec<ParameterAssignment>, GridError> {
    let mut discrete = IndexMap::new();
    for (name, spec) in params {
        if let ParameterSpec::Discrete { values } = spec {
            discrete.insert(name.clone(), values.clone());
        }
    }
    let pool = cartesian(&discrete)?;
    let discrete_samples = sample_minimal_repetition(&pool, n, derive_seed(seed, "discrete"));

    // Each continuous parameter: n independent draws, permuted by its own
    // matching seed, zipped index-wise with the discrete samples.
    let mut continuous: IndexMap<String, Vec<f64>> = IndexMap::new();
    for (name, spec) in params {
        if let ParameterSpec::Continuous { lo, hi } = spec {
            let mut values =
                sample_continuous(name, *lo, *hi, n, derive_seed(seed, &format!("continuous:{name}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("match:{name}")));
            shuffle(&mut values, &mut rng);
            continuous.insert(name.clone(), values);
        }
    }

    let mut out = Vec::with_capacity(n);
    for (i, discrete_sample) in discrete_samples.into_iter().enumerate() {
        let mut bindings = IndexMap::with_capacity(params.len());
        for (name, spec) in params {
            let value = match spec {
                ParameterSpec::Discrete { .. } => discrete_sample
                    .get(name)
                    .expect("discrete sample binds every discrete parameter")
                    .clone(),
                ParameterSpec::Continuous { .. } => ParamValue::Continuous(continuous[name][i]),
            };
            bindings.insert(name.clone(), value);
        }
        out.push(ParameterAssignment { bindings });
    }
    Ok(out)
}

/// Substitute every `{{name}}` placeholder in `template` with the bound
/// value. Unbound placeholders are a hard error so rendered commands are
/// always fully bound.
pub fn render(template: &str, assignment: &ParameterAssignment) -> Result<String, GridError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) if is_placeholder_name(&after[..end]) => {
                let name = &after[..end];
                match assignment.get(name) {
                    Some(value) => out.push_str(&value.render()),
                    None => return Err(GridError::UnboundPlaceholder(name.to_string())),
                }
                rest = &after[end + 2..];
            }
            _ => {
                // Not a placeholder; keep the braces as literal text.
                out.push_str("{{");
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// All placeholder names appearing in a command template.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) if is_placeholder_name(&after[..end]) => {
                names.push(after[..end].to_string());
                rest = &after[end + 2..];
            }
            _ => rest = after,
        }
    }
    names
}

pub(crate) fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Fisher-Yates over explicitly 64-bit draws so shuffles are identical on
/// 32-bit and 64-bit targets.
fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn discrete_map(entries: &[(&str, &[&str])]) -> IndexMap<String, Vec<String>> {
        entries
            .iter()
            .map(|(name, values)| {
                (
                    name.to_string(),
                    values.iter().map(|v| v.to_string()).collect(),
                )
            })
            .collect()
    }

    fn counts(assignments: &[ParameterAssignment]) -> HashMap<String, usize> {
        let mut m = HashMap::new();
        for a in assignments {
            *m.entry(a.canonical()).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn cartesian_two_by_two() {
        let grid = cartesian(&discrete_map(&[("a", &["1", "2"]), ("b", &["x", "y"])])).unwrap();
        let got: Vec<String> = grid.iter().map(|a| a.canonical()).collect();
        assert_eq!(got, vec!["a=1,b=x", "a=1,b=y", "a=2,b=x", "a=2,b=y"]);
    }

    #[test]
    fn cartesian_empty_map_is_singleton_empty_assignment() {
        let grid = cartesian(&IndexMap::new()).unwrap();
        assert_eq!(grid.len(), 1);
        assert!(grid[0].bindings.is_empty());
    }

    #[test]
    fn cartesian_rejects_empty_domain() {
        let err = cartesian(&discrete_map(&[("a", &[])])).unwrap_err();
        assert_eq!(err, GridError::EmptyDomain("a".into()));
    }

    #[test]
    fn twelve_binary_parameters_make_4096_combinations() {
        let entries: Vec<(String, Vec<String>)> = (0..12)
            .map(|i| (format!("p{i:02}"), vec!["0".to_string(), "1".to_string()]))
            .collect();
        let map: IndexMap<String, Vec<String>> = entries.into_iter().collect();
        let grid = cartesian(&map).unwrap();
        assert_eq!(grid.len(), 4096);
        let distinct: std::collections::HashSet<String> =
            grid.iter().map(|a| a.canonical()).collect();
        assert_eq!(distinct.len(), 4096);
    }

    #[test]
    fn minimal_repetition_exact_permutation_when_n_equals_pool() {
        let pool = cartesian(&discrete_map(&[("a", &["1", "2"]), ("b", &["x", "y"])])).unwrap();
        let sample = sample_minimal_repetition(&pool, 4, 7);
        let c = counts(&sample);
        assert_eq!(c.len(), 4);
        assert!(c.values().all(|&n| n == 1));
    }

    #[test]
    fn minimal_repetition_counts_differ_by_at_most_one() {
        let pool = cartesian(&discrete_map(&[("a", &["1", "2"]), ("b", &["x", "y"])])).unwrap();
        let sample = sample_minimal_repetition(&pool, 6, 11);
        assert_eq!(sample.len(), 6);
        let c = counts(&sample);
        let mut occurrences: Vec<usize> = c.values().copied().collect();
        occurrences.sort_unstable();
        assert_eq!(occurrences, vec![1, 1, 2, 2]);
    }

    #[test]
    fn minimal_repetition_all_distinct_when_n_below_pool() {
        let pool = cartesian(&discrete_map(&[("a", &["1", "2"]), ("b", &["x", "y"])])).unwrap();
        let sample = sample_minimal_repetition(&pool, 3, 3);
        assert_eq!(counts(&sample).len(), 3);
    }

    #[test]
    fn continuous_draws_stay_in_bounds_with_plausible_mean() {
        let values = sample_continuous("lr", 0.0, 1.0, 1000, 42).unwrap();
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn continuous_narrow_range_stays_in_bounds() {
        let values = sample_continuous("x", 5.0, 5.0 + 1e-9, 100, 1).unwrap();
        assert!(values.iter().all(|v| (5.0..=5.0 + 1e-9).contains(v)));
    }

    #[test]
    fn continuous_rejects_bad_range() {
        assert!(matches!(
            sample_continuous("x", 1.0, 1.0, 4, 0),
            Err(GridError::BadRange { .. })
        ));
        assert!(matches!(
            sample_continuous("x", 2.0, 1.0, 4, 0),
            Err(GridError::BadRange { .. })
        ));
    }

    #[test]
    fn continuous_is_seed_deterministic() {
        let a = sample_continuous("x", -1.0, 3.0, 64, 9).unwrap();
        let b = sample_continuous("x", -1.0, 3.0, 64, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn expand_discrete_counts_follow_minimal_repetition() {
        let mut params = IndexMap::new();
        params.insert("a".to_string(), ParameterSpec::discrete(["1", "2"]));
        let out = expand(&params, 4, 5).unwrap();
        assert_eq!(out.len(), 4);
        let mut ones = 0;
        let mut twos = 0;
        for a in &out {
            match a.get("a").unwrap() {
                ParamValue::Discrete(v) if v == "1" => ones += 1,
                ParamValue::Discrete(v) if v == "2" => twos += 1,
                other => panic!("unexpected value {other:?}"),
            }
        }
        assert_eq!((ones, twos), (2, 2));
    }

    #[test]
    fn expand_mixes_discrete_and_continuous() {
        let mut params = IndexMap::new();
        params.insert("a".to_string(), ParameterSpec::discrete(["1", "2"]));
        params.insert("lr".to_string(), ParameterSpec::continuous(0.0, 1.0));
        let out = expand(&params, 4, 5).unwrap();
        assert_eq!(out.len(), 4);
        let mut discrete_values = Vec::new();
        for a in &out {
            match (a.get("a").unwrap(), a.get("lr").unwrap()) {
                (ParamValue::Discrete(v), ParamValue::Continuous(lr)) => {
                    assert!((0.0..=1.0).contains(lr));
                    discrete_values.push(v.clone());
                }
                other => panic!("unexpected shapes {other:?}"),
            }
        }
        discrete_values.sort();
        assert_eq!(discrete_values, vec!["1", "1", "2", "2"]);
    }

    #[test]
    fn expand_no_params_yields_empty_assignments() {
        let out = expand(&IndexMap::new(), 3, 0).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|a| a.bindings.is_empty()));
    }

    #[test]
    fn expand_is_deterministic_per_seed() {
        let mut params = IndexMap::new();
        params.insert("a".to_string(), ParameterSpec::discrete(["1", "2", "3"]));
        params.insert("lr".to_string(), ParameterSpec::continuous(0.0, 1.0));
        let a = expand(&params, 17, 123).unwrap();
        let b = expand(&params, 17, 123).unwrap();
        assert_eq!(a, b);
        let c = expand(&params, 17, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn render_substitutes_and_repeats() {
        let mut assignment = ParameterAssignment::default();
        assignment
            .bindings
            .insert("lr".to_string(), ParamValue::Continuous(0.01));
        assert_eq!(
            render("train --lr {{lr}}", &assignment).unwrap(),
            "train --lr 0.01"
        );
        let mut a2 = ParameterAssignment::default();
        a2.bindings
            .insert("a".to_string(), ParamValue::Discrete("x".into()));
        assert_eq!(render("run {{a}} {{a}}", &a2).unwrap(), "run x x");
    }

    #[test]
    fn render_rejects_unbound_placeholder() {
        let mut assignment = ParameterAssignment::default();
        assignment
            .bindings
            .insert("a".to_string(), ParamValue::Discrete("1".into()));
        assert_eq!(
            render("run {{b}}", &assignment).unwrap_err(),
            GridError::UnboundPlaceholder("b".into())
        );
    }

    #[test]
    fn render_leaves_non_placeholder_braces_alone() {
        let assignment = ParameterAssignment::default();
        assert_eq!(
            render("echo {{ not a name }}", &assignment).unwrap(),
            "echo {{ not a name }}"
        );
    }

    #[test]
    fn placeholders_extracts_names_in_order() {
        assert_eq!(placeholders("x {{a}} y {{b-2}} {{a}}"), vec!["a", "b-2", "a"]);
        assert!(placeholders("no placeholders {} {{ }}").is_empty());
    }

    #[test]
    fn parameter_spec_serde_shape() {
        let d = ParameterSpec::discrete(["1", "2"]);
        assert_eq!(serde_json::to_string(&d).unwrap(), r#"{"values":["1","2"]}"#);
        let c = ParameterSpec::continuous(0.0, 1.5);
        assert_eq!(serde_json::to_string(&c).unwrap(), r#"{"range":[0.0,1.5]}"#);
        let back: ParameterSpec = serde_json::from_str(r#"{"range":[0.0,1.5]}"#).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ParameterSpec>(r#"{"values":["1"],"range":[0.0,1.0]}"#).is_err());
        assert!(serde_json::from_str::<ParameterSpec>(r#"{}"#).is_err());
    }
}
