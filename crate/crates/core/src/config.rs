//! Run configuration: defaults, a flat `key = value` file with dotted
//! module prefixes (a TOML subset) and a canonical rendering used for the
//! manifest hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::personalization::FitConfig;
use crate::scenario::{CcError, CohortConfig, ScenarioId, ScenarioSpec, SimConfig};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{}{msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl ConfigError {
    fn new(msg: impl Into<String>) -> Self {
        Self {
            line: None,
            msg: msg.into(),
        }
    }

    fn at(mut self, text: &str, key: &str) -> Self {
        self.line = line_of(text, key);
        self
    }
}

/// 1-based line of the first assignment to `key`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

/// Everything that determines the outputs of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub seed: u64,
    pub scenarios: Vec<ScenarioId>,
    pub noise: bool,
    /// Fit controller models on TRAIN; population models otherwise.
    pub personalize: bool,
    /// Sensor noise SD used when `noise` is on, mg/dL.
    pub noise_sigma: f64,
    pub cohort: CohortConfig,
    pub sim: SimConfig,
    pub fit: FitConfig,
    pub specs: BTreeMap<ScenarioId, ScenarioSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut specs = BTreeMap::new();
        for id in ScenarioId::TESTS.iter().chain([ScenarioId::Train].iter()) {
            specs.insert(*id, ScenarioSpec::preset(*id));
        }
        Self {
            n: 10,
            seed: 1,
            scenarios: vec![ScenarioId::S0],
            noise: false,
            personalize: true,
            noise_sigma: 2.0,
            cohort: CohortConfig::default(),
            sim: SimConfig::default(),
            fit: FitConfig::default(),
            specs,
        }
    }
}

/// Parses `S0..S9`, `S1,S3`, `S0..S2,S8` and `all`.
pub fn parse_scenarios(s: &str) -> Result<Vec<ScenarioId>, ConfigError> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part.eq_ignore_ascii_case("all") {
            out.extend(ScenarioId::TESTS);
            continue;
        }
        if let Some((a, b)) = part.split_once("..") {
            let a: ScenarioId = a.parse().map_err(|e| ConfigError::new(format!("{e}")))?;
            let b: ScenarioId = b.parse().map_err(|e| ConfigError::new(format!("{e}")))?;
            if a == ScenarioId::Train || b == ScenarioId::Train || a.index() > b.index() {
                return Err(ConfigError::new(format!("bad scenario range `{part}`")));
            }
            out.extend(&ScenarioId::TESTS[a.index()..=b.index()]);
        } else {
            out.push(part.parse().map_err(|e| ConfigError::new(format!("{e}")))?);
        }
    }
    if out.is_empty() {
        return Err(ConfigError::new("no scenarios selected"));
    }
    let mut seen = std::collections::BTreeSet::new();
    out.retain(|id| seen.insert(*id));
    Ok(out)
}

macro_rules! file_section {
    ($name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct $name {
            $($field: Option<$ty>,)*
        }
    };
}

macro_rules! apply {
    ($src:expr, $dst:expr, $($field:ident),* $(,)?) => {
        $(if let Some(v) = $src.$field { $dst.$field = v; })*
    };
}

file_section!(RunFile {
    n: usize,
    seed: u64,
    scenarios: String,
    noise: bool,
    personalize: bool,
    noise_sigma: f64,
});
file_section!(CohortFile {
    cv: f64,
    bw_min: f64,
    bw_max: f64,
    basal_fraction: f64,
    dia: f64,
    max_retries: usize,
    basal_glucose: f64,
});
file_section!(MpcFile {
    np: usize,
    nc: usize,
    target: f64,
    q_weight: f64,
    r_weight: f64,
    n_tdi_min: f64,
    n_tdi_max: f64,
    n_roc_high: f64,
    delta_u_min: f64,
    delta_u_max: f64,
    ts: f64,
    low_glucose_floor: f64,
    iob_threshold_scale: f64,
});
file_section!(IbdFile {
    bg_threshold: f64,
    min_since_meal: f64,
    min_since_correction: f64,
    alpha_double_up: f64,
    alpha_single_up: f64,
    alpha_diagonal_up: f64,
    alpha_other: f64,
    g_tar: f64,
});
file_section!(SensorFile {
    phi: f64,
    lo: f64,
    hi: f64,
});
file_section!(RescueFile {
    threshold: f64,
    interval: f64,
    grams: f64,
    tau_factor: f64,
});
file_section!(EkfFile { gate_sigmas: f64 });
file_section!(FitFile {
    lower_factor: f64,
    upper_factor: f64,
    starts: usize,
    max_evals: usize,
    xtol: f64,
    initial_step: f64,
    seed: u64,
});
file_section!(ScenarioFile {
    days: usize,
    basal_bias: Vec<f64>,
    cc_error: Vec<String>,
    announce_delay: Vec<f64>,
    initial_glucose: f64,
    rescue: bool,
    closed_loop: bool,
});

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    run: Option<RunFile>,
    cohort: Option<CohortFile>,
    mpc: Option<MpcFile>,
    ibd: Option<IbdFile>,
    sensor: Option<SensorFile>,
    rescue: Option<RescueFile>,
    ekf: Option<EkfFile>,
    fit: Option<FitFile>,
    scenario: Option<BTreeMap<String, ScenarioFile>>,
    /// Run metadata when a manifest is read back as a config.
    #[allow(dead_code)]
    manifest: Option<toml::Table>,
}

fn toml_error(text: &str, e: toml::de::Error) -> ConfigError {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    ConfigError {
        line,
        msg: e.message().to_string(),
    }
}

impl RunConfig {
    /// Applies a config file on top of `self`.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        let f: FileConfig = toml::from_str(text).map_err(|e| toml_error(text, e))?;
        if let Some(r) = f.run {
            if let Some(s) = &r.scenarios {
                self.scenarios = parse_scenarios(s).map_err(|e| e.at(text, "run.scenarios"))?;
            }
            apply!(r, self, n, seed, noise, personalize, noise_sigma);
        }
        if let Some(c) = f.cohort {
            apply!(c, self.cohort, cv, bw_min, bw_max, basal_fraction, dia, max_retries, basal_glucose);
        }
        if let Some(m) = f.mpc {
            apply!(
                m,
                self.sim.mpc,
                np,
                nc,
                target,
                q_weight,
                r_weight,
                n_tdi_min,
                n_tdi_max,
                n_roc_high,
                delta_u_min,
                delta_u_max,
                ts,
                low_glucose_floor,
                iob_threshold_scale
            );
        }
        if let Some(b) = f.ibd {
            apply!(
                b,
                self.sim.gate,
                bg_threshold,
                min_since_meal,
                min_since_correction,
                alpha_double_up,
                alpha_single_up,
                alpha_diagonal_up,
                alpha_other,
                g_tar
            );
            if let Some(g) = b.g_tar {
                self.sim.bolus_target = g;
            }
        }
        if let Some(s) = f.sensor {
            apply!(s, self.sim.sensor, phi, lo, hi);
        }
        if let Some(r) = f.rescue {
            apply!(r, self.sim.rescue, threshold, interval, grams, tau_factor);
        }
        if let Some(e) = f.ekf {
            if let Some(g) = e.gate_sigmas {
                self.sim.ekf_gate = g;
            }
        }
        if let Some(x) = f.fit {
            apply!(x, self.fit, lower_factor, upper_factor, starts, max_evals, xtol, initial_step, seed);
        }
        for (name, s) in f.scenario.unwrap_or_default() {
            let id: ScenarioId = name
                .parse()
                .map_err(|e| ConfigError::new(format!("{e}")).at(text, &format!("scenario.{name}")))?;
            let spec = self.specs.entry(id).or_insert_with(|| ScenarioSpec::preset(id));
            let key = |k: &str| format!("scenario.{name}.{k}");
            apply!(s, spec, days, basal_bias, rescue, closed_loop);
            if let Some(cc) = s.cc_error {
                spec.cc_error = cc
                    .iter()
                    .map(|c| c.parse::<CcError>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| ConfigError::new(e).at(text, &key("cc_error")))?;
            }
            if let Some(d) = s.announce_delay {
                spec.announce_delay = match d.as_slice() {
                    [] => None,
                    [a, b] => Some((*a, *b)),
                    _ => {
                        return Err(ConfigError::new("announce_delay needs [] or [lo, hi]")
                            .at(text, &key("announce_delay")))
                    }
                };
            }
            if let Some(g) = s.initial_glucose {
                spec.initial_glucose = Some(g);
            }
            spec.validate()
                .map_err(|e| ConfigError::new(format!("scenario {name}: {e}")).at(text, &format!("scenario.{name}")))?;
        }
        self.validate().map_err(|e| {
            let key = e.msg.split(':').next().unwrap_or("").to_string();
            e.at(text, &key)
        })
    }

    /// Field errors are reported as `dotted.key: reason`.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |k: &str, why: &str| Err(ConfigError::new(format!("{k}: {why}")));
        if self.n < 1 {
            return bad("run.n", "must be >= 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("run.noise_sigma", "must be >= 0");
        }
        let c = &self.cohort;
        if !(c.cv >= 0.0) {
            return bad("cohort.cv", "must be >= 0");
        }
        if !(c.bw_min > 0.0 && c.bw_max >= c.bw_min) {
            return bad("cohort.bw_min", "need 0 < bw_min <= bw_max");
        }
        if !(c.basal_fraction > 0.0 && c.basal_fraction <= 1.0) {
            return bad("cohort.basal_fraction", "must lie in (0, 1]");
        }
        if !(c.dia > 0.0) {
            return bad("cohort.dia", "must be positive");
        }
        if let Err(e) = self.sim.mpc.validate() {
            return bad("mpc.np", &e);
        }
        if self.sim.mpc.ts != crate::scenario::CONTROL_STEP_MIN {
            return bad("mpc.ts", "the simulator runs a 5-minute control step");
        }
        let s = &self.sim.sensor;
        if !(s.lo < s.hi) || !(s.phi.abs() < 1.0) {
            return bad("sensor.phi", "need |phi| < 1 and lo < hi");
        }
        if !(self.sim.rescue.interval > 0.0 && self.sim.rescue.tau_factor > 0.0) {
            return bad("rescue.interval", "interval and tau_factor must be positive");
        }
        let f = &self.fit;
        if !(f.lower_factor > 0.0 && f.upper_factor > f.lower_factor) || f.starts == 0 {
            return bad("fit.lower_factor", "need 0 < lower_factor < upper_factor and starts >= 1");
        }
        Ok(())
    }

    /// Simulation settings with the sensor noise toggle resolved.
    pub fn effective_sim(&self) -> SimConfig {
        let mut s = self.sim.clone();
        s.sensor.sigma = if self.noise { self.noise_sigma } else { 0.0 };
        s
    }

    pub fn spec(&self, id: ScenarioId) -> ScenarioSpec {
        self.specs.get(&id).cloned().unwrap_or_else(|| ScenarioSpec::preset(id))
    }

    /// Canonical text form; parses back to the same configuration.
    pub fn render(&self) -> String {
        let mut o = String::new();
        let ids: Vec<String> = self.scenarios.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(o, "run.n = {}", self.n);
        let _ = writeln!(o, "run.seed = {}", self.seed);
        let _ = writeln!(o, "run.scenarios = \"{}\"", ids.join(","));
        let _ = writeln!(o, "run.noise = {}", self.noise);
        let _ = writeln!(o, "run.personalize = {}", self.personalize);
        let _ = writeln!(o, "run.noise_sigma = {:?}", self.noise_sigma);
        let c = &self.cohort;
        for (k, v) in [
            ("cv", c.cv),
            ("bw_min", c.bw_min),
            ("bw_max", c.bw_max),
            ("basal_fraction", c.basal_fraction),
            ("dia", c.dia),
            ("basal_glucose", c.basal_glucose),
        ] {
            let _ = writeln!(o, "cohort.{k} = {v:?}");
        }
        let _ = writeln!(o, "cohort.max_retries = {}", c.max_retries);
        let m = &self.sim.mpc;
        let _ = writeln!(o, "mpc.np = {}", m.np);
        let _ = writeln!(o, "mpc.nc = {}", m.nc);
        for (k, v) in [
            ("target", m.target),
            ("q_weight", m.q_weight),
            ("r_weight", m.r_weight),
            ("n_tdi_min", m.n_tdi_min),
            ("n_tdi_max", m.n_tdi_max),
            ("n_roc_high", m.n_roc_high),
            ("delta_u_min", m.delta_u_min),
            ("delta_u_max", m.delta_u_max),
            ("ts", m.ts),
            ("low_glucose_floor", m.low_glucose_floor),
            ("iob_threshold_scale", m.iob_threshold_scale),
        ] {
            let _ = writeln!(o, "mpc.{k} = {v:?}");
        }
        let g = &self.sim.gate;
        for (k, v) in [
            ("bg_threshold", g.bg_threshold),
            ("min_since_meal", g.min_since_meal),
            ("min_since_correction", g.min_since_correction),
            ("alpha_double_up", g.alpha_double_up),
            ("alpha_single_up", g.alpha_single_up),
            ("alpha_diagonal_up", g.alpha_diagonal_up),
            ("alpha_other", g.alpha_other),
            ("g_tar", self.sim.bolus_target),
        ] {
            let _ = writeln!(o, "ibd.{k} = {v:?}");
        }
        let s = &self.sim.sensor;
        for (k, v) in [("phi", s.phi), ("lo", s.lo), ("hi", s.hi)] {
            let _ = writeln!(o, "sensor.{k} = {v:?}");
        }
        let r = &self.sim.rescue;
        for (k, v) in [
            ("threshold", r.threshold),
            ("interval", r.interval),
            ("grams", r.grams),
            ("tau_factor", r.tau_factor),
        ] {
            let _ = writeln!(o, "rescue.{k} = {v:?}");
        }
        let _ = writeln!(o, "ekf.gate_sigmas = {:?}", self.sim.ekf_gate);
        let f = &self.fit;
        for (k, v) in [
            ("lower_factor", f.lower_factor),
            ("upper_factor", f.upper_factor),
            ("xtol", f.xtol),
            ("initial_step", f.initial_step),
        ] {
            let _ = writeln!(o, "fit.{k} = {v:?}");
        }
        let _ = writeln!(o, "fit.starts = {}", f.starts);
        let _ = writeln!(o, "fit.max_evals = {}", f.max_evals);
        let _ = writeln!(o, "fit.seed = {}", f.seed);
        for (id, sp) in &self.specs {
            let p = format!("scenario.{id}");
            let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
            let _ = writeln!(o, "{p}.days = {}", sp.days);
            let _ = writeln!(o, "{p}.basal_bias = [{}]", list(&sp.basal_bias));
            let cc: Vec<String> = sp.cc_error.iter().map(|c| format!("\"{c}\"")).collect();
            let _ = writeln!(o, "{p}.cc_error = [{}]", cc.join(", "));
            let delay = sp.announce_delay.map_or(vec![], |(a, b)| vec![a, b]);
            let _ = writeln!(o, "{p}.announce_delay = [{}]", list(&delay));
            if let Some(g) = sp.initial_glucose {
                let _ = writeln!(o, "{p}.initial_glucose = {g:?}");
            }
            let _ = writeln!(o, "{p}.rescue = {}", sp.rescue);
            let _ = writeln!(o, "{p}.closed_loop = {}", sp.closed_loop);
        }
        o
    }

    /// SHA-256 of the canonical rendering, hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_lists() {
        assert_eq!(parse_scenarios("S0..S9").unwrap().len(), 10);
        assert_eq!(
            parse_scenarios("S1,S3..S4,S1").unwrap(),
            vec![ScenarioId::S1, ScenarioId::S3, ScenarioId::S4]
        );
        assert!(parse_scenarios("S3..S1").is_err());
        assert!(parse_scenarios("").is_err());
        assert!(parse_scenarios("S11").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.scenarios = parse_scenarios("S0..S9").unwrap();
        c.noise = true;
        let mut back = RunConfig::default();
        back.apply_file(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn overrides_apply() {
        let mut c = RunConfig::default();
        let text = "# comment\nrun.n = 3\nmpc.q_weight = 2e-6\nscenario.S5.basal_bias = [1, 1.5]\nscenario.S3.cc_error = [\"systematic(1.1)\"]\n";
        c.apply_file(text).unwrap();
        assert_eq!(c.n, 3);
        assert_eq!(c.sim.mpc.q_weight, 2e-6);
        assert_eq!(c.spec(ScenarioId::S5).basal_bias, vec![1.0, 1.5]);
        assert_eq!(c.spec(ScenarioId::S3).cc_error, vec![CcError::Systematic(1.1)]);
    }

    #[test]
    fn errors_carry_lines() {
        let mut c = RunConfig::default();
        let e = c.apply_file("run.n = 3\nmpc.bogus = 1\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = c.apply_file("run.n = 3\n\nmpc.np = 2\n").unwrap_err();
        assert_eq!(e.line, Some(3), "{e}");
        let e = c.apply_file("run.n = \n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = c.apply_file("scenario.S1.cc_error = [\"wobbly\"]\n").unwrap_err();
        assert_eq!(e.line, Some(1));
    }

    #[test]
    fn hash_changes_with_config() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
