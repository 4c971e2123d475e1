//! Experiment configuration: a sectioned TOML file validated per experiment
//! kind before anything runs. Validation errors carry field paths.

use serde::Deserialize;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    HoKalman,
    Spc,
    Deepc,
    Pem,
    Rnn,
    Ssnn,
    Ssnno,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hokalman" => Some(Self::HoKalman),
            "spc" => Some(Self::Spc),
            "deepc" => Some(Self::Deepc),
            "pem" => Some(Self::Pem),
            "rnn" => Some(Self::Rnn),
            "ssnn" => Some(Self::Ssnn),
            "ssnno" => Some(Self::Ssnno),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::HoKalman => "hokalman",
            Self::Spc => "spc",
            Self::Deepc => "deepc",
            Self::Pem => "pem",
            Self::Rnn => "rnn",
            Self::Ssnn => "ssnn",
            Self::Ssnno => "ssnno",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: ExperimentSection,
    pub plant: PlantSection,
    pub data: DataSection,
    pub horizons: Option<HorizonsSection>,
    pub weights: Option<WeightsSection>,
    pub bounds: Option<BoundsSection>,
    pub reference: Option<ReferenceSection>,
    pub ident: Option<IdentSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: String,
    pub seed: u64,
    pub out_dir: Option<String>,
    /// Closed-loop length N_T.
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    /// "lti" or "cstr".
    pub kind: String,
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub c: Option<Vec<Vec<f64>>>,
    pub x0: Option<Vec<f64>>,
    pub b_const: Option<f64>,
    pub da: Option<f64>,
    pub db: Option<f64>,
    pub sampling: Option<f64>,
    pub noise_std: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Record length D.
    pub samples: usize,
    /// "prms" (default) or "impulse".
    pub kind: Option<String>,
    pub levels: Option<usize>,
    pub dwell: Option<usize>,
    pub u_min: Option<f64>,
    pub u_max: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonsSection {
    /// Prediction horizon N.
    pub prediction: usize,
    /// Past horizon M (subspace methods).
    pub past: Option<usize>,
    /// Training-column count H (subspace methods).
    pub training: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    /// Diagonal of the per-step tracking weight.
    pub q: Vec<f64>,
    /// Diagonal of the per-step input weight.
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub u_min: Option<Vec<f64>>,
    pub u_max: Option<Vec<f64>>,
    pub x_min: Option<Vec<f64>>,
    pub x_max: Option<Vec<f64>>,
    pub y_min: Option<Vec<f64>>,
    pub y_max: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Breakpoint {
    pub at: usize,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    /// Quadrant-style schedule: equal spans of `quadrant` instants.
    pub values: Option<Vec<f64>>,
    pub quadrant: Option<usize>,
    /// Explicit breakpoints as an alternative to the quadrant form.
    pub breakpoints: Option<Vec<Breakpoint>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct IdentSection {
    /// Model order hypothesis (pem) or latent order (ssnn/ssnno).
    pub order: Option<usize>,
    /// Singular-value threshold (hokalman).
    pub epsilon: Option<f64>,
    pub block_rows: Option<usize>,
    pub block_cols: Option<usize>,
    /// Selector regularization weight (deepc).
    pub alpha: Option<f64>,
    /// Hidden widths of the recurrent/state net.
    pub hidden: Option<Vec<usize>>,
    /// Hidden widths of the output net (ssnn/ssnno).
    pub h_hidden: Option<Vec<usize>>,
    pub starts: Option<usize>,
    pub max_iters: Option<usize>,
    pub train_fraction: Option<f64>,
    /// Ordered-variance loss weights (ssnno).
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub alpha3: Option<f64>,
    pub alpha4: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "config error: {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

pub fn load(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(vec![format!("cannot read {}: {e}", path.display())]))?;
    let cfg: ConfigFile =
        toml::from_str(&text).map_err(|e| ConfigError(vec![format!("parse: {e}")]))?;
    validate(&cfg)?;
    Ok(cfg)
}

pub fn kind_of(cfg: &ConfigFile) -> ExperimentKind {
    ExperimentKind::parse(&cfg.experiment.kind).expect("validated")
}

/// Schema check only; no side effects.
pub fn validate(cfg: &ConfigFile) -> Result<(), ConfigError> {
    let mut errors = Vec::new();
    let Some(kind) = ExperimentKind::parse(&cfg.experiment.kind) else {
        return Err(ConfigError(vec![format!(
            "experiment.kind: unknown kind '{}' (expected hokalman|spc|deepc|pem|rnn|ssnn|ssnno)",
            cfg.experiment.kind
        )]));
    };

    // plant
    match cfg.plant.kind.as_str() {
        "lti" => {
            for (field, value) in [("a", &cfg.plant.a), ("b", &cfg.plant.b), ("c", &cfg.plant.c)]
            {
                if value.is_none() {
                    errors.push(format!("plant.{field}: required for an lti plant"));
                }
            }
            if let (Some(a), Some(b), Some(c)) = (&cfg.plant.a, &cfg.plant.b, &cfg.plant.c) {
                let n = a.len();
                if a.iter().any(|row| row.len() != n) {
                    errors.push("plant.a: must be square".into());
                }
                if b.len() != n {
                    errors.push("plant.b: row count must match plant.a".into());
                }
                if c.iter().any(|row| row.len() != n) {
                    errors.push("plant.c: column count must match plant.a".into());
                }
                if let Some(x0) = &cfg.plant.x0 {
                    if x0.len() != n {
                        errors.push("plant.x0: length must match plant.a".into());
                    }
                }
            }
        }
        "cstr" => {
            if matches!(kind, ExperimentKind::HoKalman | ExperimentKind::Spc
                | ExperimentKind::Deepc | ExperimentKind::Pem)
            {
                errors.push(format!(
                    "plant.kind: the {kind} experiment identifies a linear model; use an lti plant"
                ));
            }
            if let Some(x0) = &cfg.plant.x0 {
                if x0.len() != 2 {
                    errors.push("plant.x0: reactor state has 2 components".into());
                }
            }
            if cfg.plant.sampling.map(|t| t <= 0.0).unwrap_or(false) {
                errors.push("plant.sampling: must be positive".into());
            }
            if cfg.plant.noise_std.map(|s| s < 0.0).unwrap_or(false) {
                errors.push("plant.noise_std: must be nonnegative".into());
            }
        }
        other => errors.push(format!("plant.kind: unknown plant '{other}'")),
    }

    // data
    let d = cfg.data.samples;
    if d == 0 {
        errors.push("data.samples: must be positive".into());
    }
    match cfg.data.kind.as_deref().unwrap_or("prms") {
        "prms" => {
            if cfg.data.u_min.is_none() || cfg.data.u_max.is_none() {
                errors.push("data.u_min/data.u_max: required for prms excitation".into());
            } else if cfg.data.u_min >= cfg.data.u_max {
                errors.push("data.u_min: must be below data.u_max".into());
            }
            if cfg.data.levels.map(|l| l < 2).unwrap_or(false) {
                errors.push("data.levels: need at least 2 levels".into());
            }
            if cfg.data.dwell.map(|w| w == 0).unwrap_or(false) {
                errors.push("data.dwell: must be at least 1".into());
            }
        }
        "impulse" => {}
        other => errors.push(format!("data.kind: unknown excitation '{other}'")),
    }

    // kind-specific requirements
    let ident = cfg.ident.clone().unwrap_or_default();
    match kind {
        ExperimentKind::HoKalman => {
            let rows = ident.block_rows.unwrap_or(0);
            let cols = ident.block_cols.unwrap_or(0);
            if rows == 0 {
                errors.push("ident.block_rows: required for hokalman".into());
            }
            if cols == 0 {
                errors.push("ident.block_cols: required for hokalman".into());
            }
            if rows > cols {
                errors.push("ident.block_rows: must not exceed ident.block_cols".into());
            }
            if rows + cols > 0 && rows + cols - 1 > d {
                errors.push(format!(
                    "data.samples: need block_rows + block_cols - 1 = {} <= D = {d}",
                    rows + cols - 1
                ));
            }
            if ident.epsilon.map(|e| e <= 0.0).unwrap_or(false) {
                errors.push("ident.epsilon: must be positive".into());
            }
            if cfg.horizons.is_none() {
                errors.push("horizons.prediction: required for the receding-horizon run".into());
            }
        }
        ExperimentKind::Spc | ExperimentKind::Deepc => {
            match &cfg.horizons {
                None => errors.push("horizons: required (prediction, past, training)".into()),
                Some(h) => {
                    let m = h.past.unwrap_or(0);
                    let cols = h.training.unwrap_or(0);
                    if m == 0 {
                        errors.push("horizons.past: required".into());
                    }
                    if cols == 0 {
                        errors.push("horizons.training: required".into());
                    }
                    if h.prediction + m + cols > 0 && h.prediction + m + cols - 1 > d {
                        errors.push(format!(
                            "data.samples: need N + M + H - 1 = {} <= D = {d}",
                            h.prediction + m + cols - 1
                        ));
                    }
                }
            }
            if kind == ExperimentKind::Deepc && ident.alpha.is_none() {
                errors.push("ident.alpha: required for deepc".into());
            }
            if ident.alpha.map(|a| a < 0.0).unwrap_or(false) {
                errors.push("ident.alpha: must be nonnegative".into());
            }
            if cfg.reference.is_none() {
                errors.push("reference: required for tracking experiments".into());
            }
        }
        ExperimentKind::Pem => {
            if ident.order.unwrap_or(0) == 0 {
                errors.push("ident.order: required for pem".into());
            }
            if cfg.horizons.is_none() {
                errors.push("horizons.prediction: required".into());
            }
            if cfg.reference.is_none() {
                errors.push("reference: required for tracking experiments".into());
            }
        }
        ExperimentKind::Rnn => {
            if ident.hidden.as_ref().map(|h| h.is_empty()).unwrap_or(true) {
                errors.push("ident.hidden: at least one hidden width required for rnn".into());
            }
            if cfg.horizons.is_none() {
                errors.push("horizons.prediction: required".into());
            }
            if cfg.reference.is_none() {
                errors.push("reference: required for tracking experiments".into());
            }
        }
        ExperimentKind::Ssnn | ExperimentKind::Ssnno => {
            if ident.order.unwrap_or(0) == 0 {
                errors.push("ident.order: latent order required".into());
            }
            if ident.hidden.as_ref().map(|h| h.is_empty()).unwrap_or(true) {
                errors.push("ident.hidden: state-net hidden widths required".into());
            }
            if kind == ExperimentKind::Ssnn {
                if cfg.horizons.is_none() {
                    errors.push("horizons.prediction: required".into());
                }
                if cfg.reference.is_none() {
                    errors.push("reference: required for tracking experiments".into());
                }
            }
            if kind == ExperimentKind::Ssnno && ident.delta.is_none() {
                errors.push("ident.delta: variance threshold required for ssnno".into());
            }
        }
    }

    // weights required for every closed-loop kind
    if kind != ExperimentKind::Ssnno && cfg.weights.is_none() {
        errors.push("weights: required (q, r diagonals)".into());
    }
    if let Some(w) = &cfg.weights {
        if w.q.is_empty() || w.r.is_empty() {
            errors.push("weights.q/weights.r: must be nonempty diagonals".into());
        }
    }

    // reference shape
    if let Some(r) = &cfg.reference {
        let has_quadrants = r.values.is_some();
        let has_breaks = r.breakpoints.is_some();
        if has_quadrants == has_breaks {
            errors.push(
                "reference: give either values+quadrant or breakpoints, not both/neither".into(),
            );
        }
        if has_quadrants && r.quadrant.unwrap_or(0) == 0 {
            errors.push("reference.quadrant: span must be positive".into());
        }
        if let Some(bps) = &r.breakpoints {
            if bps.first().map(|b| b.at != 0).unwrap_or(true) {
                errors.push("reference.breakpoints: must start at instant 0".into());
            }
            if bps.windows(2).any(|w| w[1].at <= w[0].at) {
                errors.push("reference.breakpoints: instants must be strictly increasing".into());
            }
        }
    }

    if errors.is_empty() {
        Ok(())
    } else {
        Err(ConfigError(errors))
    }
}
