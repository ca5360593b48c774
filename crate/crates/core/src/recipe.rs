//! YAML recipes and the workflow DAG built from them.
//!
//! A recipe declares experiments (command template, parameter specs,
//! hardware, dependencies); parsing validates names, dependency edges,
//! acyclicity and placeholder binding, and [`build_workflow`] expands each
//! experiment into concrete tasks via [`crate::paramgrid::expand`].
//!
//! The normative schema:
//!
//! ```yaml
//! version: 1
//! experiments:
//!   train:
//!     image: pytorch/pytorch:2.1      # optional label, default "default"
//!     workers: 2                      # optional, default 1
//!     hardware:                       # optional
//!       profile: gpu-small            #   default "cpu-small"
//!       spot: true                    #   default false
//!     command: "python train.py --lr {{lr}} --depth {{depth}}"
//!     params:
//!       depth: { values: [4, 8] }     # discrete class
//!       lr: { range: [0.0001, 0.1] }  # continuous range
//!     samples: 8                      # optional; defaults to the discrete
//!                                     # Cartesian product size
//!     depends_on: [prep]
//! ```

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::paramgrid::{self, ParameterAssignment, ParameterSpec};
use crate::scheduler::TaskAttempt;
use crate::util::{canonical_json, derive_seed, sha256_hex};

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("YAML syntax error: {0}")]
    Syntax(String),
    #[error("invalid recipe at {path}: {message}")]
    Validation { path: String, message: String },
}

impl RecipeError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        RecipeError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Opaque environment/hardware labels for an experiment. `spot` marks the
/// experiment's workers as preemptible, which is what the failure injector
/// keys on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub profile: String,
    pub spot: bool,
}

impl Default for HardwareSpec {
    fn default() -> Self {
        Self {
            profile: "cpu-small".to_string(),
            spot: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub image: String,
    pub workers: u32,
    pub hardware: HardwareSpec,
    pub command: String,
    pub params: IndexMap<String, ParameterSpec>,
    /// Number of tasks to generate; resolved at parse time.
    pub samples: u64,
    pub depends_on: Vec<String>,
}

/// A parsed, validated recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub version: u64,
    pub experiments: IndexMap<String, ExperimentSpec>,
    /// Non-fatal findings (e.g. `samples` exceeding the discrete grid).
    /// Recomputed on every parse, never serialized.
    #[serde(skip)]
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Raw (pre-validation) schema
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecipe {
    version: Option<i64>,
    experiments: Option<IndexMap<String, RawExperiment>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    image: Option<String>,
    workers: Option<i64>,
    hardware: Option<RawHardware>,
    command: Option<String>,
    params: Option<IndexMap<String, RawParameter>>,
    samples: Option<i64>,
    depends_on: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHardware {
    profile: Option<String>,
    spot: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParameter {
    values: Option<Vec<Scalar>>,
    range: Option<[f64; 2]>,
}

/// YAML scalars in `values` lists are coerced to strings: discrete values
/// are opaque command-line tokens.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Scalar {
    fn into_string(self) -> String {
        match self {
            Scalar::Bool(b) => b.to_string(),
            Scalar::Int(i) => i.to_string(),
            Scalar::Float(f) => format!("{f}"),
            Scalar::Str(s) => s,
        }
    }
}

fn valid_name(name: &str) -> bool {
    paramgrid::is_placeholder_name(name)
}

/// Parse and validate a YAML recipe.
pub fn parse_recipe(text: &str) -> Result<Recipe, RecipeError> {
    // Phase 1: YAML syntax.
    let value: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| RecipeError::Syntax(e.to_string()))?;

    // Phase 2: schema shape, with field paths on mismatch.
    let raw: RawRecipe = serde_path_to_error::deserialize(value)
        .map_err(|e| RecipeError::at(e.path().to_string(), e.inner().to_string()))?;

    // Phase 3: semantic validation.
    let version = raw.version.unwrap_or(1);
    if version < 1 {
        return Err(RecipeError::at("version", "must be a positive integer"));
    }

    let mut experiments = IndexMap::new();
    let mut warnings = Vec::new();
    for (name, raw_exp) in raw.experiments.unwrap_or_default() {
        let path = format!("experiments.{name}");
        if !valid_name(&name) {
            return Err(RecipeError::at(
                path,
                "experiment names must match [A-Za-z0-9_-]+",
            ));
        }
        let spec = validate_experiment(&name, raw_exp, &mut warnings)?;
        experiments.insert(name, spec);
    }

    // Dependency edges resolve and form a DAG.
    for (name, spec) in &experiments {
        for (i, dep) in spec.depends_on.iter().enumerate() {
            if !experiments.contains_key(dep) {
                return Err(RecipeError::at(
                    format!("experiments.{name}.depends_on[{i}]"),
                    format!("unknown experiment {dep:?}"),
                ));
            }
        }
    }
    let names: Vec<String> = experiments.keys().cloned().collect();
    let edges: Vec<(String, String)> = experiments
        .iter()
        .flat_map(|(name, spec)| {
            spec.depends_on
                .iter()
                .map(|dep| (dep.clone(), name.clone()))
                .collect::<Vec<_>>()
        })
        .collect();
    topo_sort(&names, &edges).map_err(|cycle| {
        RecipeError::at(
            "experiments",
            format!("dependency cycle through {}", cycle.join(" -> ")),
        )
    })?;

    Ok(Recipe {
        version: version as u64,
        experiments,
        warnings,
    })
}

fn validate_experiment(
    name: &str,
    raw: RawExperiment,
    warnings: &mut Vec<String>,
) -> Result<ExperimentSpec, RecipeError> {
    let path = |field: &str| format!("experiments.{name}.{field}");

    let command = match raw.command {
        Some(c) if !c.trim().is_empty() => c,
        _ => return Err(RecipeError::at(path("command"), "command is required")),
    };
    let workers = match raw.workers {
        None => 1,
        Some(w) if w >= 1 => w as u32,
        Some(w) => {
            return Err(RecipeError::at(
                path("workers"),
                format!("workers must be >= 1, got {w}"),
            ))
        }
    };
    let hardware = match raw.hardware {
        None => HardwareSpec::default(),
        Some(h) => {
            let profile = h.profile.unwrap_or_else(|| "cpu-small".to_string());
            if profile.is_empty() {
                return Err(RecipeError::at(
                    path("hardware.profile"),
                    "profile must be non-empty",
                ));
            }
            HardwareSpec {
                profile,
                spot: h.spot.unwrap_or(false),
            }
        }
    };

    let mut params = IndexMap::new();
    for (pname, rp) in raw.params.unwrap_or_default() {
        let ppath = format!("experiments.{name}.params.{pname}");
        if !valid_name(&pname) {
            return Err(RecipeError::at(
                ppath,
                "parameter names must match [A-Za-z0-9_-]+",
            ));
        }
        let spec = match (rp.values, rp.range) {
            (Some(values), None) => {
                if values.is_empty() {
                    return Err(RecipeError::at(ppath, "values must be non-empty"));
                }
                let values: Vec<String> = values.into_iter().map(Scalar::into_string).collect();
                let mut seen = std::collections::HashSet::new();
                for v in &values {
                    if !seen.insert(v) {
                        return Err(RecipeError::at(ppath, format!("duplicate value {v:?}")));
                    }
                }
                ParameterSpec::Discrete { values }
            }
            (None, Some([lo, hi])) => {
                if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                    return Err(RecipeError::at(
                        ppath,
                        format!("range requires finite lo < hi, got [{lo}, {hi}]"),
                    ));
                }
                ParameterSpec::Continuous { lo, hi }
            }
            (Some(_), Some(_)) => {
                return Err(RecipeError::at(ppath, "declare either values or range, not both"))
            }
            (None, None) => {
                return Err(RecipeError::at(ppath, "declare one of values or range"))
            }
        };
        params.insert(pname, spec);
    }

    // Every placeholder in the command must be a declared parameter.
    for placeholder in paramgrid::placeholders(&command) {
        if !params.contains_key(&placeholder) {
            return Err(RecipeError::at(
                path("command"),
                format!("unbound placeholder {placeholder}"),
            ));
        }
    }

    let discrete_product: u64 = params
        .values()
        .filter_map(|p| match p {
            ParameterSpec::Discrete { values } => Some(values.len() as u64),
            ParameterSpec::Continuous { .. } => None,
        })
        .product();
    let has_continuous = params.values().any(|p| !p.is_discrete());
    let samples = match raw.samples {
        Some(s) if s >= 1 => s as u64,
        Some(s) => {
            return Err(RecipeError::at(
                path("samples"),
                format!("samples must be >= 1, got {s}"),
            ))
        }
        None if has_continuous => {
            return Err(RecipeError::at(
                path("samples"),
                "samples is required when continuous parameters are present",
            ))
        }
        None => discrete_product,
    };
    // Replicated tasks with no parameters at all are normal (identical
    // data-parallel workers); oversampling an actual grid is worth flagging.
    if !params.is_empty() && !has_continuous && samples > discrete_product {
        warnings.push(format!(
            "experiments.{name}: samples ({samples}) exceeds the discrete grid size \
             ({discrete_product}); combinations will repeat with minimal repetition"
        ));
    }

    Ok(ExperimentSpec {
        image: raw.image.unwrap_or_else(|| "default".to_string()),
        workers,
        hardware,
        command,
        params,
        samples,
        depends_on: raw.depends_on.unwrap_or_default(),
    })
}

/// Serialize a recipe back to YAML. `parse_recipe(serialize_recipe(r)) == r`
/// for every valid recipe.
pub fn serialize_recipe(recipe: &Recipe) -> String {
    serde_yaml::to_string(recipe).expect("recipe serializes")
}

// ---------------------------------------------------------------------------
// Workflow
// ---------------------------------------------------------------------------

/// Lifecycle phases, in forward order. `Failed` is reachable from any phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Provisioning,
    Orchestrating,
    Executing,
    MonitoringComplete,
    Failed,
}

impl Phase {
    fn order(self) -> u8 {
        match self {
            Phase::Provisioning => 0,
            Phase::Orchestrating => 1,
            Phase::Executing => 2,
            Phase::MonitoringComplete => 3,
            Phase::Failed => 4,
        }
    }

    /// Phases only move forward; `Failed` is allowed from anywhere.
    pub fn can_advance_to(self, next: Phase) -> bool {
        next == Phase::Failed || next.order() > self.order()
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::MonitoringComplete | Phase::Failed)
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Provisioning => "provisioning",
            Phase::Orchestrating => "orchestrating",
            Phase::Executing => "executing",
            Phase::MonitoringComplete => "monitoring-complete",
            Phase::Failed => "failed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskState {
    Pending,
    Assigned,
    Running,
    Succeeded,
    Failed,
    Rescheduled,
}

impl TaskState {
    /// Eligible for (re)assignment.
    pub fn is_assignable(self) -> bool {
        matches!(self, TaskState::Pending | TaskState::Rescheduled)
    }

    pub fn is_in_flight(self) -> bool {
        matches!(self, TaskState::Assigned | TaskState::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub experiment: String,
    pub assignment: ParameterAssignment,
    pub rendered_command: String,
    pub state: TaskState,
    pub attempts: Vec<TaskAttempt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: String,
    pub name: String,
    pub spec: ExperimentSpec,
    pub tasks: Vec<Task>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    pub id: String,
    pub experiments: Vec<Experiment>,
    /// Dependency edges as (from-experiment-id, to-experiment-id): `from`
    /// must complete before `to` is released.
    pub edges: Vec<(String, String)>,
    pub phase: Phase,
}

impl Workflow {
    pub fn experiment(&self, name: &str) -> Option<&Experiment> {
        self.experiments.iter().find(|e| e.name == name)
    }

    pub fn task_count(&self) -> usize {
        self.experiments.iter().map(|e| e.tasks.len()).sum()
    }

    /// Rewrite the workflow id (and the derived experiment/task ids), used
    /// by the master to give each submission a unique identity.
    pub fn with_id(mut self, new_id: &str) -> Workflow {
        self.id = new_id.to_string();
        for exp in &mut self.experiments {
            exp.id = experiment_id(new_id, &exp.name);
            for (i, task) in exp.tasks.iter_mut().enumerate() {
                task.id = task_id(new_id, &exp.name, i);
            }
        }
        self.edges = self
            .edges
            .iter()
            .map(|(from, to)| {
                let from_name = from.rsplit('/').next().unwrap();
                let to_name = to.rsplit('/').next().unwrap();
                (
                    experiment_id(new_id, from_name),
                    experiment_id(new_id, to_name),
                )
            })
            .collect();
        self
    }
}

pub fn experiment_id(workflow_id: &str, name: &str) -> String {
    format!("{workflow_id}/{name}")
}

pub fn task_id(workflow_id: &str, experiment: &str, index: usize) -> String {
    format!("{workflow_id}/{experiment}.{index}")
}

/// Expand a recipe into a workflow. Deterministic in `(recipe, seed)`,
/// including the generated ids.
pub fn build_workflow(recipe: &Recipe, seed: u64) -> Result<Workflow, RecipeError> {
    let digest = sha256_hex(format!("{}#{seed}", canonical_json(recipe)).as_bytes());
    let workflow_id = format!("wf-{}", &digest[..12]);

    let mut experiments = Vec::with_capacity(recipe.experiments.len());
    for (name, spec) in &recipe.experiments {
        let assignments = paramgrid::expand(
            &spec.params,
            spec.samples as usize,
            derive_seed(seed, &format!("experiment:{name}")),
        )
        .map_err(|e| RecipeError::at(format!("experiments.{name}"), e.to_string()))?;
        let tasks = assignments
            .into_iter()
            .enumerate()
            .map(|(i, assignment)| {
                let rendered_command = paramgrid::render(&spec.command, &assignment)
                    .map_err(|e| RecipeError::at(format!("experiments.{name}.command"), e.to_string()))?;
                Ok(Task {
                    id: task_id(&workflow_id, name, i),
                    experiment: name.clone(),
                    assignment,
                    rendered_command,
                    state: TaskState::Pending,
                    attempts: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>, RecipeError>>()?;
        experiments.push(Experiment {
            id: experiment_id(&workflow_id, name),
            name: name.clone(),
            spec: spec.clone(),
            tasks,
        });
    }

    let edges = recipe
        .experiments
        .iter()
        .flat_map(|(name, spec)| {
            spec.depends_on
                .iter()
                .map(|dep| {
                    (
                        experiment_id(&workflow_id, dep),
                        experiment_id(&workflow_id, name),
                    )
                })
                .collect::<Vec<_>>()
        })
        .collect();

    Ok(Workflow {
        id: workflow_id,
        experiments,
        edges,
        phase: Phase::Provisioning,
    })
}

/// Kahn's algorithm; `Err` carries one witness cycle path.
pub fn topo_sort(names: &[String], edges: &[(String, String)]) -> Result<Vec<String>, Vec<String>> {
    use std::collections::{BTreeMap, VecDeque};
    let mut indegree: BTreeMap<&str, usize> = names.iter().map(|n| (n.as_str(), 0)).collect();
    let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (from, to) in edges {
        *indegree.get_mut(to.as_str()).expect("edge endpoint exists") += 1;
        children.entry(from.as_str()).or_default().push(to.as_str());
    }
    let mut queue: VecDeque<&str> = names
        .iter()
        .map(String::as_str)
        .filter(|n| indegree[n] == 0)
        .collect();
    let mut order = Vec::with_capacity(names.len());
    while let Some(n) = queue.pop_front() {
        order.push(n.to_string());
        for &child in children.get(n).map(Vec::as_slice).unwrap_or_default() {
            let d = indegree.get_mut(child).unwrap();
            *d -= 1;
            if *d == 0 {
                queue.push_back(child);
            }
        }
    }
    if order.len() == names.len() {
        Ok(order)
    } else {
        let cycle: Vec<String> = names
            .iter()
            .filter(|n| !order.contains(n))
            .cloned()
            .collect();
        Err(cycle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramgrid::ParamValue;
    use std::collections::HashSet;

    fn parse_err(text: &str) -> RecipeError {
        parse_recipe(text).expect_err("recipe should be rejected")
    }

    #[test]
    fn minimal_recipe_parses() {
        let recipe = parse_recipe("version: 1\nexperiments:\n  hello:\n    command: echo hi\n").unwrap();
        assert_eq!(recipe.experiments.len(), 1);
        let spec = &recipe.experiments["hello"];
        assert_eq!(spec.command, "echo hi");
        assert!(spec.depends_on.is_empty());
        assert_eq!(spec.workers, 1);
        assert_eq!(spec.samples, 1);
        assert_eq!(spec.hardware, HardwareSpec::default());
    }

    #[test]
    fn unknown_dependency_names_the_field() {
        let err = parse_err(
            "version: 1\nexperiments:\n  B:\n    command: echo\n    depends_on: [A]\n",
        );
        match err {
            RecipeError::Validation { path, message } => {
                assert_eq!(path, "experiments.B.depends_on[0]");
                assert!(message.contains("unknown experiment"), "{message}");
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn two_cycle_is_rejected() {
        let err = parse_err(
            "version: 1\nexperiments:\n  A:\n    command: echo\n    depends_on: [B]\n  B:\n    command: echo\n    depends_on: [A]\n",
        );
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn unbound_placeholder_is_rejected() {
        let err = parse_err("version: 1\nexperiments:\n  t:\n    command: \"run --lr {{lr}}\"\n");
        assert!(err.to_string().contains("unbound placeholder lr"), "{err}");
    }

    #[test]
    fn malformed_yaml_is_a_syntax_error() {
        match parse_err("version: [unclosed") {
            RecipeError::Syntax(_) => {}
            other => panic!("expected syntax error, got {other}"),
        }
    }

    #[test]
    fn nonpositive_workers_and_samples_are_rejected() {
        let err = parse_err("version: 1\nexperiments:\n  t:\n    command: echo\n    workers: 0\n");
        assert!(err.to_string().contains("workers"), "{err}");
        let err = parse_err("version: 1\nexperiments:\n  t:\n    command: echo\n    samples: 0\n");
        assert!(err.to_string().contains("samples"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected_with_path() {
        let err = parse_err("version: 1\nexperiments:\n  t:\n    command: echo\n    imagee: x\n");
        assert!(err.to_string().contains("experiments.t"), "{err}");
    }

    #[test]
    fn continuous_params_require_samples() {
        let err = parse_err(
            "version: 1\nexperiments:\n  t:\n    command: \"run {{lr}}\"\n    params:\n      lr: { range: [0.0, 1.0] }\n",
        );
        assert!(err.to_string().contains("samples"), "{err}");
    }

    #[test]
    fn oversampling_discrete_grid_warns() {
        let recipe = parse_recipe(
            "version: 1\nexperiments:\n  t:\n    command: \"run {{a}}\"\n    params:\n      a: { values: [1, 2] }\n    samples: 6\n",
        )
        .unwrap();
        assert_eq!(recipe.warnings.len(), 1);
        assert!(recipe.warnings[0].contains("exceeds the discrete grid size"));
    }

    #[test]
    fn default_samples_is_discrete_product() {
        let recipe = parse_recipe(
            "version: 1\nexperiments:\n  t:\n    command: \"run {{a}} {{b}}\"\n    params:\n      a: { values: [1, 2] }\n      b: { values: [x, y, z] }\n",
        )
        .unwrap();
        assert_eq!(recipe.experiments["t"].samples, 6);
    }

    #[test]
    fn numeric_discrete_values_are_stringified() {
        let recipe = parse_recipe(
            "version: 1\nexperiments:\n  t:\n    command: \"run {{a}}\"\n    params:\n      a: { values: [4, 0.5, true, relu] }\n",
        )
        .unwrap();
        match &recipe.experiments["t"].params["a"] {
            ParameterSpec::Discrete { values } => {
                assert_eq!(values, &["4", "0.5", "true", "relu"]);
            }
            other => panic!("expected discrete, got {other:?}"),
        }
    }

    #[test]
    fn parse_serialize_roundtrip_is_identity() {
        let text = "version: 2\nexperiments:\n  prep:\n    image: base\n    workers: 2\n    hardware: { profile: cpu-big, spot: true }\n    command: \"prep {{shards}}\"\n    params:\n      shards: { values: [4, 8] }\n  train:\n    command: \"train --lr {{lr}} --d {{depth}}\"\n    params:\n      depth: { values: [2, 3] }\n      lr: { range: [0.001, 0.1] }\n    samples: 5\n    depends_on: [prep]\n";
        let recipe = parse_recipe(text).unwrap();
        let roundtripped = parse_recipe(&serialize_recipe(&recipe)).unwrap();
        assert_eq!(recipe, roundtripped);
    }

    #[test]
    fn build_workflow_mirrors_depends_on_as_edges() {
        let recipe = parse_recipe(
            "version: 1\nexperiments:\n  prep:\n    command: echo prep\n  train:\n    command: echo train\n    depends_on: [prep]\n",
        )
        .unwrap();
        let wf = build_workflow(&recipe, 0).unwrap();
        assert_eq!(wf.phase, Phase::Provisioning);
        assert_eq!(wf.edges.len(), 1);
        assert_eq!(wf.edges[0].0, experiment_id(&wf.id, "prep"));
        assert_eq!(wf.edges[0].1, experiment_id(&wf.id, "train"));
        assert!(wf.experiments.iter().all(|e| e
            .tasks
            .iter()
            .all(|t| t.state == TaskState::Pending && t.attempts.is_empty())));
    }

    #[test]
    fn build_workflow_covers_discrete_product() {
        let recipe = parse_recipe(
            "version: 1\nexperiments:\n  t:\n    command: \"run {{a}} {{b}}\"\n    params:\n      a: { values: [1, 2] }\n      b: { values: [x, y] }\n    samples: 4\n",
        )
        .unwrap();
        let wf = build_workflow(&recipe, 42).unwrap();
        let tasks = &wf.experiments[0].tasks;
        assert_eq!(tasks.len(), 4);
        let got: HashSet<String> = tasks.iter().map(|t| t.assignment.canonical()).collect();
        let want: HashSet<String> = ["a=1,b=x", "a=1,b=y", "a=2,b=x", "a=2,b=y"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn build_workflow_is_deterministic() {
        let recipe = parse_recipe(
            "version: 1\nexperiments:\n  t:\n    command: \"run {{a}} {{lr}}\"\n    params:\n      a: { values: [1, 2, 3] }\n      lr: { range: [0.0, 1.0] }\n    samples: 7\n",
        )
        .unwrap();
        let a = build_workflow(&recipe, 9).unwrap();
        let b = build_workflow(&recipe, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rendered_commands_substitute_assignment_values() {
        let recipe = parse_recipe(
            "version: 1\nexperiments:\n  t:\n    command: \"run --a {{a}}\"\n    params:\n      a: { values: [7] }\n",
        )
        .unwrap();
        let wf = build_workflow(&recipe, 1).unwrap();
        let task = &wf.experiments[0].tasks[0];
        assert_eq!(task.rendered_command, "run --a 7");
        match task.assignment.get("a").unwrap() {
            ParamValue::Discrete(v) => assert_eq!(v, "7"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn with_id_rewrites_all_ids() {
        let recipe = parse_recipe(
            "version: 1\nexperiments:\n  a:\n    command: echo\n  b:\n    command: echo\n    depends_on: [a]\n",
        )
        .unwrap();
        let wf = build_workflow(&recipe, 0).unwrap().with_id("wf-7");
        assert_eq!(wf.id, "wf-7");
        assert_eq!(wf.experiments[0].id, "wf-7/a");
        assert_eq!(wf.experiments[0].tasks[0].id, "wf-7/a.0");
        assert_eq!(wf.edges[0], ("wf-7/a".to_string(), "wf-7/b".to_string()));
    }

    #[test]
    fn phase_transitions_only_move_forward() {
        assert!(Phase::Provisioning.can_advance_to(Phase::Orchestrating));
        assert!(Phase::Orchestrating.can_advance_to(Phase::Executing));
        assert!(Phase::Executing.can_advance_to(Phase::MonitoringComplete));
        assert!(!Phase::Executing.can_advance_to(Phase::Orchestrating));
        assert!(!Phase::MonitoringComplete.can_advance_to(Phase::Executing));
        for phase in [
            Phase::Provisioning,
            Phase::Orchestrating,
            Phase::Executing,
            Phase::MonitoringComplete,
        ] {
            assert!(phase.can_advance_to(Phase::Failed));
        }
    }

    #[test]
    fn shipped_sample_recipes_are_valid() {
        for name in ["train.yaml", "grid.yaml"] {
            let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("../../recipes")
                .join(name);
            let text = std::fs::read_to_string(&path).unwrap();
            let recipe = parse_recipe(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
            build_workflow(&recipe, 0).unwrap();
        }
        let grid = parse_recipe(
            &std::fs::read_to_string(
                std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes/grid.yaml"),
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(grid.experiments["sweep"].samples, 4096);
    }

    #[test]
    fn topo_sort_detects_cycles_and_orders() {
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let order = topo_sort(
            &names,
            &[("a".into(), "b".into()), ("b".into(), "c".into())],
        )
        .unwrap();
        assert_eq!(order, vec!["a", "b", "c"]);
        assert!(topo_sort(
            &names,
            &[("a".into(), "b".into()), ("b".into(), "a".into())]
        )
        .is_err());
    }
}
