//! Run configuration: a small line-based `key = value` format with
//! `[section]` headers and `#` comments.
//!
//! ```text
//! [run]
//! experiment = converge
//! profile = ci
//!
//! [mesh]
//! levels = 27, 41
//! ```
//!
//! Every key is optional apart from `run.experiment`; omitted keys take the
//! defaults of the chosen experiment. Unknown sections and keys are rejected.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;

use serde::Serialize;

use crate::ensemble::CflForm;
use crate::experiments::{ConvergenceOptions, CylinderOptions, PerturbationMode};
use crate::sampling::{monte_carlo_draws, Magnitudes, PerturbationKind, PerturbationSpec, SamplingError};

/// Largest generator resolution accepted by the `ci` profile.
pub const CI_MAX_M: usize = 61;
/// Longest final time accepted by the `ci` profile.
pub const CI_MAX_T: f64 = 10.0;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("duplicate key `{key}` on lines {first} and {second}")]
    DuplicateKey { key: String, first: usize, second: usize },
    #[error("line {line}: `{key}` expects {expected}, found `{found}`")]
    Type {
        line: usize,
        key: String,
        expected: &'static str,
        found: String,
    },
    #[error("{}`{key}`: {message}", line_prefix(*.line))]
    Constraint {
        line: Option<usize>,
        key: String,
        message: String,
    },
}

fn line_prefix(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

impl ConfigError {
    /// Key the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Syntax { .. } | ConfigError::UnknownSection { .. } => None,
            ConfigError::UnknownKey { key, .. }
            | ConfigError::DuplicateKey { key, .. }
            | ConfigError::Type { key, .. }
            | ConfigError::Constraint { key, .. } => Some(key),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Converge,
    Cylinder,
    /// Forced flow on an arbitrary mesh with no-slip walls.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Ci,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshSource {
    /// Uniform triangulations of the Taylor-Green square, one per `m`.
    Generated { levels: Vec<usize> },
    /// A gmsh file together with its nominal mesh size.
    File { path: PathBuf, lc: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub experiment: Experiment,
    pub profile: Profile,
    pub mesh: MeshSource,
    pub nu: f64,
    /// Penalty; `None` means `ε = Δt`.
    pub eps: Option<f64>,
    /// Fixed initial timestep; `None` means `dt_factor · h`.
    pub dt: Option<f64>,
    pub dt_factor: f64,
    pub t_final: f64,
    pub dt_min: Option<f64>,
    pub regrow: bool,
    pub cfl: CflForm,
    pub members: usize,
    pub perturbation: PerturbationSpec,
    pub mode: PerturbationMode,
    pub output_dir: PathBuf,
    /// Write a VTK snapshot every this many accepted steps; 0 disables.
    pub snapshot_every: usize,
    pub track_energy: bool,
}

impl SimulationConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        match experiment {
            Experiment::Converge => SimulationConfig {
                experiment,
                profile: Profile::Ci,
                mesh: MeshSource::Generated {
                    levels: vec![27, 41, 61],
                },
                nu: 1.0,
                eps: None,
                dt: None,
                dt_factor: 0.1,
                t_final: 1.0,
                dt_min: None,
                regrow: false,
                cfl: CflForm::Theoretical { c: 1.0 },
                members: 2,
                perturbation: PerturbationSpec {
                    kind: PerturbationKind::Multiplicative,
                    magnitudes: Magnitudes::List(vec![1e-3, -1e-3]),
                    seed: 0,
                },
                mode: PerturbationMode::IcAndForcing,
                output_dir: PathBuf::from("out/converge"),
                snapshot_every: 0,
                track_energy: true,
            },
            Experiment::Cylinder | Experiment::Custom => SimulationConfig {
                experiment,
                profile: Profile::Ci,
                mesh: MeshSource::File {
                    path: PathBuf::from("meshes/offset_cylinder_lc0.1.msh"),
                    lc: 0.1,
                },
                nu: 1.0 / 150.0,
                eps: None,
                dt: None,
                dt_factor: 0.1,
                t_final: 10.0,
                dt_min: None,
                regrow: false,
                cfl: CflForm::Experimental { c: 1200.0 },
                members: 2,
                perturbation: PerturbationSpec {
                    kind: PerturbationKind::Bump,
                    magnitudes: Magnitudes::List(vec![0.1, -0.1]),
                    seed: 0,
                },
                mode: PerturbationMode::IcOnly,
                output_dir: PathBuf::from(if experiment == Experiment::Cylinder {
                    "out/cylinder"
                } else {
                    "out/custom"
                }),
                snapshot_every: 0,
                track_energy: true,
            },
        }
    }

    /// Checks every constraint that does not depend on where a key came from.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = |key: &str, message: String| ConfigError::Constraint {
            line: None,
            key: key.to_string(),
            message,
        };
        positive("nu", self.nu).map_err(|m| c("nu", m))?;
        positive("t_final", self.t_final).map_err(|m| c("t_final", m))?;
        positive("dt_factor", self.dt_factor).map_err(|m| c("dt_factor", m))?;
        if let Some(e) = self.eps {
            positive("eps (ε)", e).map_err(|m| c("eps", m))?;
        }
        if let Some(d) = self.dt {
            positive("dt", d).map_err(|m| c("dt", m))?;
        }
        if let Some(d) = self.dt_min {
            positive("dt_min", d).map_err(|m| c("dt_min", m))?;
        }
        let cfl_c = match self.cfl {
            CflForm::Theoretical { c } | CflForm::Experimental { c } => c,
        };
        positive("constant", cfl_c).map_err(|m| c("constant", m))?;
        if self.members == 0 {
            return Err(c("members", "the ensemble needs at least one member".into()));
        }
        match &self.perturbation.magnitudes {
            Magnitudes::List(v) => {
                if v.len() != self.members {
                    return Err(c(
                        "magnitudes",
                        format!("{} magnitudes given for {} members", v.len(), self.members),
                    ));
                }
                if let Some(d) = v.iter().find(|d| !d.is_finite()) {
                    return Err(c("magnitudes", format!("magnitude {d} is not finite")));
                }
            }
            Magnitudes::Uniform { delta: s } | Magnitudes::Normal { sigma: s } => {
                if !(s.is_finite() && *s >= 0.0) {
                    return Err(c("scale", format!("must be finite and nonnegative, got {s}")));
                }
            }
        }
        match &self.mesh {
            MeshSource::Generated { levels } => {
                if levels.is_empty() {
                    return Err(c("levels", "at least one level is required".into()));
                }
                if let Some(m) = levels.iter().find(|&&m| m == 0) {
                    return Err(c("levels", format!("level {m} must be at least 1")));
                }
                if self.profile == Profile::Ci {
                    if let Some(m) = levels.iter().find(|&&m| m > CI_MAX_M) {
                        return Err(c("levels", format!("m = {m} exceeds the ci profile cap of {CI_MAX_M}")));
                    }
                }
            }
            MeshSource::File { path, lc } => {
                if path.as_os_str().is_empty() {
                    return Err(c("file", "empty path".into()));
                }
                positive("lc", *lc).map_err(|m| c("lc", m))?;
            }
        }
        if self.profile == Profile::Ci && self.t_final > CI_MAX_T {
            return Err(c(
                "t_final",
                format!("{} exceeds the ci profile cap of {CI_MAX_T}", self.t_final),
            ));
        }
        match self.experiment {
            Experiment::Converge => {
                if !matches!(self.mesh, MeshSource::Generated { .. }) {
                    return Err(c("file", "the convergence study runs on generated meshes only".into()));
                }
                if self.dt.is_some() {
                    return Err(c("dt", "the convergence study ties Δt to h; set dt_factor".into()));
                }
                if self.perturbation.kind != PerturbationKind::Multiplicative {
                    return Err(c("kind", "the convergence study perturbs multiplicatively".into()));
                }
            }
            Experiment::Cylinder => {
                if !matches!(self.mesh, MeshSource::File { .. }) {
                    return Err(c("levels", "the cylinder study needs a mesh file".into()));
                }
                if self.perturbation.kind != PerturbationKind::Bump {
                    return Err(c("kind", "the cylinder study perturbs with the bump".into()));
                }
            }
            Experiment::Custom => {
                if let MeshSource::Generated { levels } = &self.mesh {
                    if levels.len() != 1 {
                        return Err(c("levels", "a custom run takes exactly one level".into()));
                    }
                }
                if self.perturbation.kind != PerturbationKind::Bump {
                    return Err(c("kind", "custom runs start from zero and perturb with the bump".into()));
                }
            }
        }
        Ok(())
    }

    /// The `δ_j`, drawn from the perturbation spec.
    pub fn deltas(&self) -> Result<Vec<f64>, SamplingError> {
        monte_carlo_draws(&self.perturbation, self.members)
    }

    pub fn convergence_options(&self) -> Result<ConvergenceOptions, SamplingError> {
        let levels = match &self.mesh {
            MeshSource::Generated { levels } => levels.clone(),
            MeshSource::File { .. } => Vec::new(),
        };
        Ok(ConvergenceOptions {
            levels,
            t_final: self.t_final,
            nu: self.nu,
            deltas: self.deltas()?,
            mode: self.mode,
            dt_factor: self.dt_factor,
            eps: self.eps,
            cfl: self.cfl,
            track_energy: self.track_energy,
        })
    }

    /// Options for the cylinder and custom runs. For a generated mesh the
    /// nominal size is `1/m`.
    pub fn cylinder_options(&self) -> Result<CylinderOptions, SamplingError> {
        let lc = match &self.mesh {
            MeshSource::File { lc, .. } => *lc,
            MeshSource::Generated { levels } => 1.0 / levels.first().copied().unwrap_or(1) as f64,
        };
        Ok(CylinderOptions {
            lc,
            t_final: self.t_final,
            nu: self.nu,
            deltas: self.deltas()?,
            dt: Some(self.dt.unwrap_or(self.dt_factor * lc)),
            eps: self.eps,
            cfl: self.cfl,
            dt_min: self.dt_min,
            regrow: self.regrow,
            track_energy: self.track_energy,
        })
    }

    /// Canonical text form; `parse_config(&c.serialize()) == Ok(c)`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "experiment = {}", self.experiment);
        let _ = writeln!(s, "profile = {}", self.profile);
        let _ = writeln!(s, "output = {}", self.output_dir.display());
        let _ = writeln!(s, "snapshot_every = {}", self.snapshot_every);
        let _ = writeln!(s, "track_energy = {}", self.track_energy);
        let _ = writeln!(s, "\n[mesh]");
        match &self.mesh {
            MeshSource::Generated { levels } => {
                let _ = writeln!(s, "levels = {}", join(levels.iter().map(|m| m.to_string())));
            }
            MeshSource::File { path, lc } => {
                let _ = writeln!(s, "file = {}", path.display());
                let _ = writeln!(s, "lc = {lc:e}");
            }
        }
        let _ = writeln!(s, "\n[physics]");
        let _ = writeln!(s, "nu = {:e}", self.nu);
        let _ = writeln!(s, "\n[time]");
        let _ = writeln!(s, "t_final = {:e}", self.t_final);
        let _ = writeln!(s, "dt_factor = {:e}", self.dt_factor);
        if let Some(d) = self.dt {
            let _ = writeln!(s, "dt = {d:e}");
        }
        if let Some(e) = self.eps {
            let _ = writeln!(s, "eps = {e:e}");
        }
        if let Some(d) = self.dt_min {
            let _ = writeln!(s, "dt_min = {d:e}");
        }
        let _ = writeln!(s, "regrow = {}", self.regrow);
        let _ = writeln!(s, "\n[cfl]");
        let (form, c) = match self.cfl {
            CflForm::Theoretical { c } => ("theoretical", c),
            CflForm::Experimental { c } => ("experimental", c),
        };
        let _ = writeln!(s, "form = {form}");
        let _ = writeln!(s, "constant = {c:e}");
        let _ = writeln!(s, "\n[perturbation]");
        let _ = writeln!(s, "kind = {}", kind_name(self.perturbation.kind));
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "members = {}", self.members);
        match &self.perturbation.magnitudes {
            Magnitudes::List(v) => {
                let _ = writeln!(s, "magnitudes = {}", join(v.iter().map(|d| format!("{d:e}"))));
            }
            Magnitudes::Uniform { delta } => {
                let _ = writeln!(s, "distribution = uniform");
                let _ = writeln!(s, "scale = {delta:e}");
            }
            Magnitudes::Normal { sigma } => {
                let _ = writeln!(s, "distribution = normal");
                let _ = writeln!(s, "scale = {sigma:e}");
            }
        }
        let _ = writeln!(s, "seed = {}", self.perturbation.seed);
        s
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Converge => "converge",
            Experiment::Cylinder => "cylinder",
            Experiment::Custom => "custom",
        })
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Ci => "ci",
            Profile::Full => "full",
        })
    }
}

fn kind_name(k: PerturbationKind) -> &'static str {
    match k {
        PerturbationKind::Multiplicative => "multiplicative",
        PerturbationKind::Bump => "bump",
        PerturbationKind::ForcingScale => "forcing-scale",
    }
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(", ")
}

fn positive(name: &str, v: f64) -> Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name} must be positive and finite, got {v}"))
    }
}

const KEYS: &[(&str, &[&str])] = &[
    ("run", &["experiment", "profile", "output", "snapshot_every", "track_energy"]),
    ("mesh", &["levels", "file", "lc"]),
    ("physics", &["nu", "re"]),
    ("time", &["t_final", "dt", "dt_factor", "eps", "dt_min", "regrow"]),
    ("cfl", &["form", "constant"]),
    (
        "perturbation",
        &["kind", "mode", "members", "magnitudes", "distribution", "scale", "seed"],
    ),
];

struct Entry {
    line: usize,
    value: String,
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<SimulationConfig, ConfigError> {
    let entries = collect_entries(text)?;
    let get = |k: &str| entries.get(k);

    let experiment = match get("run.experiment") {
        Some(e) => match e.value.as_str() {
            "converge" => Experiment::Converge,
            "cylinder" => Experiment::Cylinder,
            "custom" => Experiment::Custom,
            other => return Err(type_err(e.line, "run.experiment", "converge, cylinder or custom", other)),
        },
        None => {
            return Err(ConfigError::Constraint {
                line: None,
                key: "run.experiment".into(),
                message: "is required".into(),
            })
        }
    };
    let mut cfg = SimulationConfig::defaults(experiment);

    if let Some(e) = get("run.profile") {
        cfg.profile = match e.value.as_str() {
            "ci" => Profile::Ci,
            "full" => Profile::Full,
            other => return Err(type_err(e.line, "run.profile", "ci or full", other)),
        };
    }
    if let Some(e) = get("run.output") {
        cfg.output_dir = PathBuf::from(&e.value);
    }
    if let Some(e) = get("run.snapshot_every") {
        cfg.snapshot_every = parse_usize(e, "run.snapshot_every")?;
    }
    if let Some(e) = get("run.track_energy") {
        cfg.track_energy = parse_bool(e, "run.track_energy")?;
    }

    match (get("mesh.levels"), get("mesh.file")) {
        (Some(a), Some(b)) => {
            return Err(ConfigError::Constraint {
                line: Some(a.line.max(b.line)),
                key: "mesh.file".into(),
                message: format!("conflicts with mesh.levels on line {}", a.line.min(b.line)),
            })
        }
        (Some(e), None) => {
            if let Some(lc) = get("mesh.lc") {
                return Err(constraint(lc.line, "mesh.lc", "only applies to mesh files"));
            }
            let levels = e
                .value
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| type_err(e.line, "mesh.levels", "a comma-separated list of integers", &e.value))?;
            cfg.mesh = MeshSource::Generated { levels };
        }
        (None, Some(e)) => {
            let lc = match get("mesh.lc") {
                Some(l) => parse_f64(l, "mesh.lc")?,
                None => match &cfg.mesh {
                    MeshSource::File { lc, .. } => *lc,
                    MeshSource::Generated { .. } => {
                        return Err(constraint(e.line, "mesh.lc", "is required alongside mesh.file"))
                    }
                },
            };
            cfg.mesh = MeshSource::File {
                path: PathBuf::from(&e.value),
                lc,
            };
        }
        (None, None) => {
            if let Some(l) = get("mesh.lc") {
                match &mut cfg.mesh {
                    MeshSource::File { lc, .. } => *lc = parse_f64(l, "mesh.lc")?,
                    MeshSource::Generated { .. } => {
                        return Err(constraint(l.line, "mesh.lc", "only applies to mesh files"))
                    }
                }
            }
        }
    }

    match (get("physics.nu"), get("physics.re")) {
        (Some(a), Some(b)) => {
            return Err(ConfigError::Constraint {
                line: Some(a.line.max(b.line)),
                key: "physics.re".into(),
                message: format!("conflicts with physics.nu on line {}; give one of them", a.line.min(b.line)),
            })
        }
        (Some(e), None) => cfg.nu = checked_positive(e, "physics.nu")?,
        (None, Some(e)) => cfg.nu = 1.0 / checked_positive(e, "physics.re")?,
        (None, None) => {}
    }

    if let Some(e) = get("time.t_final") {
        cfg.t_final = checked_positive(e, "time.t_final")?;
    }
    if let Some(e) = get("time.dt_factor") {
        cfg.dt_factor = checked_positive(e, "time.dt_factor")?;
    }
    if let Some(e) = get("time.dt") {
        cfg.dt = Some(checked_positive(e, "time.dt")?);
    }
    if let Some(e) = get("time.eps") {
        let v = parse_f64(e, "time.eps")?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(constraint(
                e.line,
                "time.eps",
                &format!("penalty ε must be positive and finite, got {v}"),
            ));
        }
        cfg.eps = Some(v);
    }
    if let Some(e) = get("time.dt_min") {
        cfg.dt_min = Some(checked_positive(e, "time.dt_min")?);
    }
    if let Some(e) = get("time.regrow") {
        cfg.regrow = parse_bool(e, "time.regrow")?;
    }

    if get("cfl.form").is_some() || get("cfl.constant").is_some() {
        let (mut theoretical, mut c) = match cfg.cfl {
            CflForm::Theoretical { c } => (true, c),
            CflForm::Experimental { c } => (false, c),
        };
        if let Some(e) = get("cfl.form") {
            theoretical = match e.value.as_str() {
                "theoretical" => true,
                "experimental" => false,
                other => return Err(type_err(e.line, "cfl.form", "theoretical or experimental", other)),
            };
        }
        if let Some(e) = get("cfl.constant") {
            c = checked_positive(e, "cfl.constant")?;
        }
        cfg.cfl = if theoretical {
            CflForm::Theoretical { c }
        } else {
            CflForm::Experimental { c }
        };
    }

    if let Some(e) = get("perturbation.kind") {
        cfg.perturbation.kind = match e.value.as_str() {
            "multiplicative" => PerturbationKind::Multiplicative,
            "bump" => PerturbationKind::Bump,
            "forcing-scale" => PerturbationKind::ForcingScale,
            other => {
                return Err(type_err(
                    e.line,
                    "perturbation.kind",
                    "multiplicative, bump or forcing-scale",
                    other,
                ))
            }
        };
    }
    if let Some(e) = get("perturbation.mode") {
        cfg.mode = match e.value.as_str() {
            "ic" => PerturbationMode::IcOnly,
            "ic+forcing" => PerturbationMode::IcAndForcing,
            other => return Err(type_err(e.line, "perturbation.mode", "ic or ic+forcing", other)),
        };
    }
    if let Some(e) = get("perturbation.seed") {
        cfg.perturbation.seed = e
            .value
            .parse()
            .map_err(|_| type_err(e.line, "perturbation.seed", "an unsigned integer", &e.value))?;
    }
    let members = get("perturbation.members")
        .map(|e| parse_usize(e, "perturbation.members"))
        .transpose()?;
    match (get("perturbation.magnitudes"), get("perturbation.distribution")) {
        (Some(a), Some(b)) => {
            return Err(ConfigError::Constraint {
                line: Some(a.line.max(b.line)),
                key: "perturbation.distribution".into(),
                message: format!("conflicts with perturbation.magnitudes on line {}", a.line.min(b.line)),
            })
        }
        (Some(e), None) => {
            if let Some(s) = get("perturbation.scale") {
                return Err(constraint(s.line, "perturbation.scale", "only applies to a distribution"));
            }
            let v = e
                .value
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| type_err(e.line, "perturbation.magnitudes", "a comma-separated list of numbers", &e.value))?;
            if let Some(m) = members {
                if m != v.len() {
                    return Err(constraint(
                        e.line,
                        "perturbation.magnitudes",
                        &format!("{} magnitudes given for {m} members", v.len()),
                    ));
                }
            }
            cfg.members = v.len();
            cfg.perturbation.magnitudes = Magnitudes::List(v);
        }
        (None, Some(e)) => {
            let scale = match get("perturbation.scale") {
                Some(s) => {
                    let v = parse_f64(s, "perturbation.scale")?;
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(constraint(s.line, "perturbation.scale", "must be finite and nonnegative"));
                    }
                    v
                }
                None => return Err(constraint(e.line, "perturbation.scale", "is required with a distribution")),
            };
            cfg.perturbation.magnitudes = match e.value.as_str() {
                "uniform" => Magnitudes::Uniform { delta: scale },
                "normal" => Magnitudes::Normal { sigma: scale },
                other => return Err(type_err(e.line, "perturbation.distribution", "uniform or normal", other)),
            };
            match members {
                Some(m) => cfg.members = m,
                None => return Err(constraint(e.line, "perturbation.members", "is required with a distribution")),
            }
        }
        (None, None) => {
            if let Some(s) = get("perturbation.scale") {
                return Err(constraint(s.line, "perturbation.scale", "only applies to a distribution"));
            }
            if let (Some(m), Some(e)) = (members, get("perturbation.members")) {
                if let Magnitudes::List(v) = &cfg.perturbation.magnitudes {
                    if v.len() != m {
                        return Err(constraint(
                            e.line,
                            "perturbation.members",
                            &format!("the default magnitudes define {} members", v.len()),
                        ));
                    }
                }
            }
        }
    }

    cfg.validate().map_err(|err| match err {
        ConfigError::Constraint { line: None, key, message } => {
            let full = qualify(&key);
            ConfigError::Constraint {
                line: entries.get(&full).map(|e| e.line),
                key: full,
                message,
            }
        }
        other => other,
    })?;
    Ok(cfg)
}

fn qualify(key: &str) -> String {
    KEYS.iter()
        .find(|(_, keys)| keys.contains(&key))
        .map(|(section, _)| format!("{section}.{key}"))
        .unwrap_or_else(|| key.to_string())
}

fn collect_entries(text: &str) -> Result<HashMap<String, Entry>, ConfigError> {
    let mut section: Option<&str> = None;
    let mut out: HashMap<String, Entry> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("unterminated section header `{content}`"),
            })?;
            let name = name.trim();
            let known = KEYS.iter().find(|(s, _)| *s == name).ok_or_else(|| ConfigError::UnknownSection {
                line,
                section: name.to_string(),
            })?;
            section = Some(known.0);
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected `key = value`, found `{content}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        let sec = section.ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("key `{key}` appears before any [section]"),
        })?;
        let full = format!("{sec}.{key}");
        let allowed = KEYS.iter().any(|(s, keys)| *s == sec && keys.contains(&key));
        if !allowed {
            return Err(ConfigError::UnknownKey { line, key: full });
        }
        if value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                message: format!("`{full}` has no value"),
            });
        }
        if let Some(prev) = out.get(&full) {
            return Err(ConfigError::DuplicateKey {
                key: full,
                first: prev.line,
                second: line,
            });
        }
        out.insert(
            full,
            Entry {
                line,
                value: value.to_string(),
            },
        );
    }
    Ok(out)
}

fn type_err(line: usize, key: &str, expected: &'static str, found: &str) -> ConfigError {
    ConfigError::Type {
        line,
        key: key.to_string(),
        expected,
        found: found.to_string(),
    }
}

fn constraint(line: usize, key: &str, message: &str) -> ConfigError {
    ConfigError::Constraint {
        line: Some(line),
        key: key.to_string(),
        message: message.to_string(),
    }
}

fn parse_f64(e: &Entry, key: &str) -> Result<f64, ConfigError> {
    e.value.parse().map_err(|_| type_err(e.line, key, "a number", &e.value))
}

fn checked_positive(e: &Entry, key: &str) -> Result<f64, ConfigError> {
    let v = parse_f64(e, key)?;
    positive(key, v).map_err(|m| constraint(e.line, key, &m))?;
    Ok(v)
}

fn parse_usize(e: &Entry, key: &str) -> Result<usize, ConfigError> {
    e.value
        .parse()
        .map_err(|_| type_err(e.line, key, "a nonnegative integer", &e.value))
}

fn parse_bool(e: &Entry, key: &str) -> Result<bool, ConfigError> {
    match e.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(type_err(e.line, key, "true or false", other)),
    }
}
