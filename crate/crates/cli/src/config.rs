//! INI run configuration.
//!
//! ```ini
//! [run]
//! # 1d or bicycle
//! scenario = 1d
//! controllers = ccbf-qp, ecbf-schedule
//! seed = 0
//!
//! [one_dim]
//! gamma = 0.01, 0.1, 1.0
//! theta = 0, pi
//! ```
//!
//! Any key can be overridden from the environment as `CCBF_<SECTION>_<KEY>`,
//! e.g. `CCBF_RUN_DT=0.02` or `CCBF_ADAPTATION_W_MAX=20`.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use ccbf_core::scenarios::{
    build_scenario_1d_with, build_scenario_bicycle_with, default_eta_1d, AdaptationSettings, BicycleParams, Obstacle,
    OneDimParams, ECBF_GAIN_SCHEDULE,
};
use ccbf_core::{ControllerKind, Scenario};
use thiserror::Error;

pub const ENV_PREFIX: &str = "CCBF_";
const SECTIONS: [&str; 4] = ["run", "one_dim", "bicycle", "adaptation"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{field}: cannot parse `{value}` ({expected})")]
    BadValue { field: String, value: String, expected: &'static str },
    #[error("{field}: {constraint}")]
    Invalid { field: String, constraint: String },
}

fn invalid(field: &str, constraint: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), constraint: constraint.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    OneDim,
    Bicycle,
}

impl ScenarioKind {
    pub fn id(self) -> &'static str {
        match self {
            ScenarioKind::OneDim => "1d",
            ScenarioKind::Bicycle => "bicycle",
        }
    }
}

/// Adaptation settings given explicitly; the rest keep scenario defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptationOverrides {
    pub w_min: Option<f64>,
    pub w_max: Option<f64>,
    pub s: Option<f64>,
    pub gain: Option<f64>,
    pub eta_mu: Option<f64>,
    pub eta_nu: Option<f64>,
    pub tau: Option<f64>,
    pub convexity_floor: Option<f64>,
    pub q_smoothing: Option<f64>,
    pub init_horizon: Option<f64>,
}

impl AdaptationOverrides {
    pub fn apply(&self, base: &AdaptationSettings) -> AdaptationSettings {
        let pick = |o: Option<f64>, d: f64| o.unwrap_or(d);
        AdaptationSettings {
            w_min: pick(self.w_min, base.w_min),
            w_max: pick(self.w_max, base.w_max),
            s: pick(self.s, base.s),
            gain: pick(self.gain, base.gain),
            eta_mu: pick(self.eta_mu, base.eta_mu),
            eta_nu: pick(self.eta_nu, base.eta_nu),
            tau: pick(self.tau, base.tau),
            convexity_floor: pick(self.convexity_floor, base.convexity_floor),
            q_smoothing: pick(self.q_smoothing, base.q_smoothing),
            init_horizon: pick(self.init_horizon, base.init_horizon),
        }
    }
}

/// Parameters of one scenario instance in the matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioParams {
    OneDim(OneDimParams),
    Bicycle(BicycleParams),
}

impl ScenarioParams {
    pub fn build(&self) -> Scenario {
        match self {
            ScenarioParams::OneDim(p) => build_scenario_1d_with(p),
            ScenarioParams::Bicycle(p) => build_scenario_bicycle_with(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    pub scenarios: Vec<ScenarioParams>,
    pub controllers: Vec<ControllerKind>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn runs(&self) -> usize {
        self.scenarios.len() * self.controllers.len()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {} with {} runs, seed {}", self.scenario.id(), self.runs(), self.seed)?;
        for p in &self.scenarios {
            let sc = p.build();
            for c in &self.controllers {
                writeln!(f, "  {}  {}  (horizon {} s, dt {} s)", sc.id, c, sc.horizon, sc.dt)?;
            }
        }
        Ok(())
    }
}

/// Reads `path` and applies overrides from the process environment.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    let env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    parse_config_str(&text, &env)
}

/// `(line, section, key, value)` for every assignment in `text`. Blank lines
/// and lines starting with `#` or `;` are skipped.
fn read_entries(text: &str) -> Result<Vec<(usize, String, String, String)>, ConfigError> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| ConfigError::Parse { line, msg: format!("malformed section header `{s}`") })?;
            section = Some(name.to_ascii_lowercase());
            continue;
        }
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse { line, msg: format!("expected `key = value`, found `{s}`") })?;
        let key = key.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(ConfigError::Parse { line, msg: "empty key".into() });
        }
        let section = section
            .clone()
            .ok_or_else(|| ConfigError::Parse { line, msg: format!("`{key}` appears before any section header") })?;
        out.push((line, section, key, value.trim().to_string()));
    }
    Ok(out)
}

/// Parses config text; `env` holds `(name, value)` pairs, of which only the
/// `CCBF_`-prefixed ones are considered.
pub fn parse_config_str(text: &str, env: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut entries: Vec<(String, String, String)> = Vec::new();
    for (line, section, key, value) in read_entries(text)? {
        if !SECTIONS.contains(&section.as_str()) {
            return Err(ConfigError::UnknownKey(format!("{section}.{key} (line {line})")));
        }
        entries.push((section, key, value));
    }
    for (name, value) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
        let rest = rest.to_ascii_lowercase();
        let (section, key) = SECTIONS
            .iter()
            .find_map(|s| rest.strip_prefix(s).and_then(|k| k.strip_prefix('_')).map(|k| (s.to_string(), k.to_string())))
            .ok_or_else(|| ConfigError::UnknownKey(format!("{name} (environment)")))?;
        entries.push((section, key, value.trim().to_string()));
    }

    let mut b = Builder::default();
    for (section, key, value) in &entries {
        b.set(section, key, value)?;
    }
    b.finish()
}

#[derive(Debug, Default)]
struct Builder {
    scenario: Option<ScenarioKind>,
    controllers: Option<Vec<ControllerKind>>,
    seed: u64,
    out: Option<PathBuf>,
    horizon: Option<f64>,
    dt: Option<f64>,
    gammas: Option<Vec<f64>>,
    thetas: Option<Vec<f64>>,
    one_dim_p: Option<f64>,
    k_p: Option<f64>,
    x0: Option<f64>,
    one_dim_w: Option<Vec<f64>>,
    bicycle: BicycleParams,
    bicycle_w: Option<Vec<f64>>,
    adaptation: AdaptationOverrides,
}

fn number(field: &str, v: &str) -> Result<f64, ConfigError> {
    let x = match v.to_ascii_lowercase().as_str() {
        "pi" => PI,
        "-pi" => -PI,
        s => s.parse::<f64>().map_err(|_| ConfigError::BadValue {
            field: field.into(),
            value: v.into(),
            expected: "a number",
        })?,
    };
    if x.is_finite() {
        Ok(x)
    } else {
        Err(invalid(field, format!("{} must be finite", short(field))))
    }
}

fn list(field: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',').map(|s| number(field, s.trim())).collect()
}

fn pair(field: &str, v: &str) -> Result<(f64, f64), ConfigError> {
    match list(field, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(ConfigError::BadValue { field: field.into(), value: v.into(), expected: "two comma-separated numbers" }),
    }
}

fn short(field: &str) -> &str {
    field.rsplit('.').next().unwrap_or(field)
}

fn controllers(field: &str, v: &str) -> Result<Vec<ControllerKind>, ConfigError> {
    let mut out = Vec::new();
    for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "ccbf-qp" => out.push(ControllerKind::CcbfQp),
            "ccbf-flow" => out.push(ControllerKind::CcbfFlow),
            "nominal" => out.push(ControllerKind::NominalOnly),
            "ecbf-schedule" => out.extend(ECBF_GAIN_SCHEDULE.iter().map(|g| ControllerKind::EcbfQp(*g))),
            other => {
                let gains: Option<Vec<&str>> = other.strip_prefix("ecbf-qp:").map(|g| g.split(':').collect());
                match gains.as_deref() {
                    Some([k1, k2]) => out.push(ControllerKind::EcbfQp((number(field, k1)?, number(field, k2)?))),
                    _ => {
                        return Err(ConfigError::BadValue {
                            field: field.into(),
                            value: other.into(),
                            expected: "ccbf-qp, ccbf-flow, nominal, ecbf-schedule or ecbf-qp:<k1>:<k2>",
                        })
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `cx cy r, cx cy r, ...`
fn obstacles(field: &str, v: &str) -> Result<Vec<Obstacle>, ConfigError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let nums: Vec<f64> = item.split_whitespace().map(|s| number(field, s)).collect::<Result<_, _>>()?;
            match nums.as_slice() {
                [cx, cy, r] => Ok(Obstacle { cx: *cx, cy: *cy, r: *r }),
                _ => Err(ConfigError::BadValue { field: field.into(), value: item.into(), expected: "`cx cy r`" }),
            }
        })
        .collect()
}

impl Builder {
    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), ConfigError> {
        let field = format!("{section}.{key}");
        let f = field.as_str();
        let bp = &mut self.bicycle;
        let ad = &mut self.adaptation;
        match (section, key) {
            ("run", "scenario") => {
                self.scenario = Some(match v {
                    "1d" => ScenarioKind::OneDim,
                    "bicycle" => ScenarioKind::Bicycle,
                    _ => return Err(ConfigError::BadValue { field, value: v.into(), expected: "1d or bicycle" }),
                })
            }
            ("run", "controllers") => self.controllers = Some(controllers(f, v)?),
            ("run", "seed") => {
                self.seed = v.parse().map_err(|_| ConfigError::BadValue {
                    field: field.clone(),
                    value: v.into(),
                    expected: "a non-negative integer",
                })?
            }
            ("run", "out") => self.out = Some(PathBuf::from(v)),
            ("run", "horizon") => self.horizon = Some(number(f, v)?),
            ("run", "dt") => self.dt = Some(number(f, v)?),

            ("one_dim", "gamma") => self.gammas = Some(list(f, v)?),
            ("one_dim", "theta") => self.thetas = Some(list(f, v)?),
            ("one_dim", "p") => self.one_dim_p = Some(number(f, v)?),
            ("one_dim", "k_p") => self.k_p = Some(number(f, v)?),
            ("one_dim", "x0") => self.x0 = Some(number(f, v)?),
            ("one_dim", "w_guess") => self.one_dim_w = Some(list(f, v)?),

            ("bicycle", "obstacles") => bp.obstacles = obstacles(f, v)?,
            ("bicycle", "l_r") => bp.l_r = number(f, v)?,
            ("bicycle", "speed_limit") => bp.speed_limit = number(f, v)?,
            ("bicycle", "slip_limit") => bp.slip_limit = number(f, v)?,
            ("bicycle", "deadline") => bp.deadline = number(f, v)?,
            ("bicycle", "goal_radius") => bp.goal_radius = number(f, v)?,
            ("bicycle", "initial_radius") => bp.initial_radius = number(f, v)?,
            ("bicycle", "goal") => bp.goal = pair(f, v)?,
            ("bicycle", "start") => bp.start = pair(f, v)?,
            ("bicycle", "beta0") => bp.beta0 = number(f, v)?,
            ("bicycle", "v0") => bp.v0 = number(f, v)?,
            ("bicycle", "u_max") => bp.u_max = pair(f, v)?,
            ("bicycle", "w_guess") => self.bicycle_w = Some(list(f, v)?),

            ("adaptation", "w_min") => ad.w_min = Some(number(f, v)?),
            ("adaptation", "w_max") => ad.w_max = Some(number(f, v)?),
            ("adaptation", "s") => ad.s = Some(number(f, v)?),
            ("adaptation", "gain") => ad.gain = Some(number(f, v)?),
            ("adaptation", "eta_mu") => ad.eta_mu = Some(number(f, v)?),
            ("adaptation", "eta_nu") => ad.eta_nu = Some(number(f, v)?),
            ("adaptation", "tau") => ad.tau = Some(number(f, v)?),
            ("adaptation", "convexity_floor") => ad.convexity_floor = Some(number(f, v)?),
            ("adaptation", "q_smoothing") => ad.q_smoothing = Some(number(f, v)?),
            ("adaptation", "init_horizon") => ad.init_horizon = Some(number(f, v)?),

            _ => return Err(ConfigError::UnknownKey(field)),
        }
        Ok(())
    }

    fn finish(self) -> Result<RunConfig, ConfigError> {
        let scenario = self.scenario.ok_or_else(|| invalid("run.scenario", "scenario is required (1d or bicycle)"))?;
        let controllers = self.controllers.clone().unwrap_or_else(|| vec![ControllerKind::CcbfQp]);
        if controllers.is_empty() {
            return Err(invalid("run.controllers", "at least one controller is required"));
        }
        for c in &controllers {
            if let ControllerKind::EcbfQp((k1, k2)) = c {
                if !(*k1 > 0.0 && *k2 > 0.0) {
                    return Err(invalid("run.controllers", "E-CBF gains must be > 0"));
                }
            }
        }
        let scenarios = match scenario {
            ScenarioKind::OneDim => self.one_dim()?,
            ScenarioKind::Bicycle => vec![self.bicycle()?],
        };
        Ok(RunConfig { scenario, scenarios, controllers, seed: self.seed, out: self.out.clone() })
    }

    fn one_dim(&self) -> Result<Vec<ScenarioParams>, ConfigError> {
        let gammas = self.gammas.clone().unwrap_or_else(|| vec![0.1]);
        let thetas = self.thetas.clone().unwrap_or_else(|| vec![0.0]);
        if gammas.is_empty() || thetas.is_empty() {
            return Err(invalid("one_dim", "gamma and theta need at least one value"));
        }
        let mut out = Vec::new();
        for &gamma in &gammas {
            if !(gamma > 0.0) {
                return Err(invalid("one_dim.gamma", "gamma must be > 0"));
            }
            for &theta in &thetas {
                if theta.abs() > 1e-9 && (theta - PI).abs() > 1e-9 {
                    return Err(invalid("one_dim.theta", "theta must be 0 or pi"));
                }
                let mut p = OneDimParams::new(gamma, theta);
                let eta = default_eta_1d(gamma);
                let base = AdaptationSettings { eta_mu: eta, eta_nu: eta, ..p.adaptation.clone() };
                p.adaptation = self.adaptation.apply(&base);
                if let Some(v) = self.one_dim_p {
                    p.p = v;
                }
                if let Some(v) = self.k_p {
                    p.k_p = v;
                }
                if let Some(v) = self.x0 {
                    p.x0 = v;
                }
                if let Some(w) = &self.one_dim_w {
                    p.w_guess = w.clone();
                }
                p.horizon = self.horizon.unwrap_or(p.horizon);
                p.dt = self.dt.unwrap_or(p.dt);
                validate_common(&p.adaptation, &p.w_guess, 2, p.horizon, p.dt, "one_dim")?;
                if !(p.p > 0.0 && p.p < 2.0) {
                    return Err(invalid("one_dim.p", "p must lie in (0, 2)"));
                }
                if !(p.k_p > 0.0) {
                    return Err(invalid("one_dim.k_p", "k_p must be > 0"));
                }
                if !(p.x0.abs() < 2.0) {
                    return Err(invalid("one_dim.x0", "x0 must lie in (-2, 2)"));
                }
                out.push(ScenarioParams::OneDim(p));
            }
        }
        Ok(out)
    }

    fn bicycle(&self) -> Result<ScenarioParams, ConfigError> {
        let mut p = self.bicycle.clone();
        p.adaptation = self.adaptation.apply(&p.adaptation);
        p.horizon = self.horizon.unwrap_or(p.horizon);
        p.dt = self.dt.unwrap_or(p.dt);
        let c = p.obstacles.len() + 3;
        p.w_guess = match &self.bicycle_w {
            Some(w) => w.clone(),
            None => vec![1.0; c],
        };
        validate_common(&p.adaptation, &p.w_guess, c, p.horizon, p.dt, "bicycle")?;
        for (name, v) in [
            ("l_r", p.l_r),
            ("speed_limit", p.speed_limit),
            ("slip_limit", p.slip_limit),
            ("deadline", p.deadline),
            ("goal_radius", p.goal_radius),
            ("initial_radius", p.initial_radius),
            ("u_max", p.u_max.0.min(p.u_max.1)),
        ] {
            if !(v > 0.0) {
                return Err(invalid(&format!("bicycle.{name}"), format!("{name} must be > 0")));
            }
        }
        if p.obstacles.iter().any(|o| !(o.r > 0.0)) {
            return Err(invalid("bicycle.obstacles", "obstacle radii must be > 0"));
        }
        if !(p.slip_limit < PI / 2.0) {
            return Err(invalid("bicycle.slip_limit", "slip_limit must be < pi/2"));
        }
        if !(p.v0.abs() < p.speed_limit && p.beta0.abs() < p.slip_limit) {
            return Err(invalid("bicycle", "initial speed and slip must be inside their limits"));
        }
        Ok(ScenarioParams::Bicycle(p))
    }
}

fn validate_common(
    a: &AdaptationSettings,
    w_guess: &[f64],
    c: usize,
    horizon: f64,
    dt: f64,
    section: &str,
) -> Result<(), ConfigError> {
    if !(dt > 0.0) {
        return Err(invalid("run.dt", "dt must be > 0"));
    }
    if !(horizon > 0.0) {
        return Err(invalid("run.horizon", "horizon must be > 0"));
    }
    if dt > horizon {
        return Err(invalid("run.dt", "dt must not exceed the horizon"));
    }
    for (name, v) in [
        ("w_min", a.w_min),
        ("s", a.s),
        ("gain", a.gain),
        ("tau", a.tau),
        ("convexity_floor", a.convexity_floor),
        ("q_smoothing", a.q_smoothing),
        ("init_horizon", a.init_horizon),
    ] {
        if !(v > 0.0) {
            return Err(invalid(&format!("adaptation.{name}"), format!("{name} must be > 0")));
        }
    }
    if !(a.eta_mu >= 0.0 && a.eta_nu >= 0.0) {
        return Err(invalid("adaptation.eta_mu", "filter margins must be >= 0"));
    }
    if !(a.w_min < a.w_max) {
        return Err(invalid("adaptation.w_min", format!("w_min ({}) must be < w_max ({})", a.w_min, a.w_max)));
    }
    if w_guess.len() != c {
        return Err(invalid(&format!("{section}.w_guess"), format!("w_guess needs {c} entries, got {}", w_guess.len())));
    }
    if w_guess.iter().any(|w| !(*w > a.w_min && *w < a.w_max)) {
        return Err(invalid(&format!("{section}.w_guess"), "w_guess entries must lie strictly inside (w_min, w_max)"));
    }
    Ok(())
}
