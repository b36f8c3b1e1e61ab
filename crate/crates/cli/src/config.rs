//! Flat `section.key = value` configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use stepflow_core::continuum::Formulation;
use stepflow_core::geometry::{DomainParams, Profile};
use stepflow_core::integrator::Method;
use stepflow_core::mesoscopic::{IntegratorOptions, PotentialVariant};
use stepflow_core::spectral::is_power_of_two;

/// Configuration error naming the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("domain.L", "1"),
    ("domain.M", "128"),
    ("domain.K", "128"),
    ("profile.A", "0.2"),
    ("profile.k", "1"),
    ("ode.N", "32"),
    ("ode.N_sweep", "16,32,64,128"),
    ("ode.variant", "standard"),
    ("ode.T", "1e-3"),
    ("ode.method", "implicit"),
    ("ode.rtol", "1e-10"),
    ("ode.atol", "1e-12"),
    ("ode.dt_max", "inf"),
    ("ode.collision_eps", "0.05"),
    ("pde.formulation", "h"),
    ("pde.T", "1e-3"),
    ("pde.method", "implicit"),
    ("pde.rtol", "1e-10"),
    ("pde.atol", "1e-12"),
    ("pde.dt_max", "inf"),
    ("output.directory", ""),
    ("output.prefix", "run"),
    ("output.snapshot_stride", "1"),
];

/// Raw key/value pairs, validated against the known key set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !DEFAULTS.iter().any(|(k, _)| *k == key) {
            return Err(err(key, "unknown key"));
        }
        self.values
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parses `section.key = value` lines; `#` starts a comment.
    pub fn parse_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies a `--section.key=value` flag.
    pub fn apply_override(&mut self, flag: &str) -> Result<(), ConfigError> {
        let body = flag.trim_start_matches("--");
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| err(body, "override must have the form --section.key=value"))?;
        self.set(key, value)
    }

    fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| {
            DEFAULTS
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .expect("key listed in DEFAULTS")
        })
    }

    /// Every key with its effective value, sorted.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        DEFAULTS
            .iter()
            .map(|(k, _)| (k.to_string(), self.get(k).to_string()))
            .collect()
    }
}

fn parse_num<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<T, ConfigError> {
    let v = raw.get(key);
    v.parse()
        .map_err(|_| err(key, format!("cannot parse '{v}'")))
}

fn parse_float(raw: &RawConfig, key: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse_num(raw, key)?;
    if v.is_nan() {
        return Err(err(key, "must not be NaN"));
    }
    Ok(v)
}

fn parse_method(raw: &RawConfig, key: &str) -> Result<Method, ConfigError> {
    match raw.get(key) {
        "implicit" | "imex" | "esdirk" => Ok(Method::Implicit),
        "explicit" | "explicit_adaptive" | "dopri" => Ok(Method::ExplicitAdaptive),
        other => Err(err(key, format!("unknown method '{other}'"))),
    }
}

fn options(
    raw: &RawConfig,
    section: &str,
    stride: usize,
) -> Result<IntegratorOptions, ConfigError> {
    let key = |k: &str| format!("{section}.{k}");
    let collision_eps = if section == "ode" {
        parse_float(raw, &key("collision_eps"))?
    } else {
        IntegratorOptions::default().collision_eps
    };
    let opts = IntegratorOptions {
        method: parse_method(raw, &key("method"))?,
        rtol: parse_float(raw, &key("rtol"))?,
        atol: parse_float(raw, &key("atol"))?,
        dt_max: parse_float(raw, &key("dt_max"))?,
        collision_eps,
        snapshot_stride: stride,
    };
    if let Err(e) = opts.validate() {
        let msg = e.to_string();
        let field = ["rtol", "atol", "dt_max", "collision_eps", "snapshot_stride"]
            .into_iter()
            .find(|f| msg.contains(f))
            .unwrap_or("rtol");
        let k = if field == "snapshot_stride" {
            "output.snapshot_stride".to_string()
        } else {
            key(field)
        };
        return Err(err(&k, msg));
    }
    Ok(opts)
}

fn grid(raw: &RawConfig, key: &str, min: usize) -> Result<usize, ConfigError> {
    let v: usize = parse_num(raw, key)?;
    if v < min || !is_power_of_two(v) {
        return Err(err(
            key,
            format!("must be a power of two >= {min}, got {v}"),
        ));
    }
    Ok(v)
}

fn positive_time(raw: &RawConfig, key: &str) -> Result<f64, ConfigError> {
    let t = parse_float(raw, key)?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(err(key, format!("must be positive and finite, got {t}")));
    }
    Ok(t)
}

/// Fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub length: f64,
    pub grid_m: usize,
    pub grid_k: usize,
    pub profile: Profile,
    pub steps: usize,
    pub sweep: Vec<usize>,
    pub variant: PotentialVariant,
    pub ode_t: f64,
    pub ode: IntegratorOptions,
    pub formulation: Formulation,
    pub pde_t: f64,
    pub pde: IntegratorOptions,
    pub directory: Option<PathBuf>,
    pub prefix: String,
    pub resolved: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let length = parse_float(raw, "domain.L")?;
        if !(length > 0.0 && length.is_finite()) {
            return Err(err(
                "domain.L",
                format!("must be positive and finite, got {length}"),
            ));
        }
        let grid_m = grid(raw, "domain.M", 16)?;
        let grid_k = grid(raw, "domain.K", 16)?;
        let amplitude = parse_float(raw, "profile.A")?;
        let mode: u32 = parse_num(raw, "profile.k")?;
        let profile = Profile::new(amplitude, mode).map_err(|e| {
            err(
                if mode == 0 { "profile.k" } else { "profile.A" },
                e.to_string(),
            )
        })?;
        let steps: usize = parse_num(raw, "ode.N")?;
        DomainParams::new(length, steps).map_err(|e| err("ode.N", e.to_string()))?;
        let sweep = raw
            .get("ode.N_sweep")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| err("ode.N_sweep", format!("cannot parse '{s}'")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if sweep.is_empty()
            || sweep.windows(2).any(|w| w[1] != 2 * w[0])
            || !is_power_of_two(sweep[0])
        {
            return Err(err(
                "ode.N_sweep",
                "must be a dyadic sequence of powers of two",
            ));
        }
        let variant = raw
            .get("ode.variant")
            .parse()
            .map_err(|e: stepflow_core::StepflowError| err("ode.variant", e.to_string()))?;
        let stride: usize = parse_num(raw, "output.snapshot_stride")?;
        if stride == 0 {
            return Err(err("output.snapshot_stride", "must be >= 1"));
        }
        let formulation = raw
            .get("pde.formulation")
            .parse()
            .map_err(|e: stepflow_core::StepflowError| err("pde.formulation", e.to_string()))?;
        let directory = match raw.get("output.directory") {
            "" => None,
            d => Some(PathBuf::from(d)),
        };
        let prefix = raw.get("output.prefix").to_string();
        if prefix.is_empty() || prefix.contains(['/', '\\']) {
            return Err(err(
                "output.prefix",
                "must be a non-empty file-name component",
            ));
        }
        Ok(Self {
            length,
            grid_m,
            grid_k,
            profile,
            steps,
            sweep,
            variant,
            ode_t: positive_time(raw, "ode.T")?,
            ode: options(raw, "ode", stride)?,
            formulation,
            pde_t: positive_time(raw, "pde.T")?,
            pde: options(raw, "pde", stride)?,
            directory,
            prefix,
            resolved: raw.resolved(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::from_raw(&RawConfig::default()).unwrap();
        assert_eq!(cfg.steps, 32);
        assert_eq!(cfg.sweep, vec![16, 32, 64, 128]);
        assert_eq!(cfg.variant, PotentialVariant::Standard);
        assert_eq!(cfg.resolved.len(), DEFAULTS.len());
    }

    #[test]
    fn file_and_override_precedence() {
        let mut raw = RawConfig::default();
        raw.parse_text("# comment\nprofile.A = 0.3\node.N = 16  # trailing\n")
            .unwrap();
        raw.apply_override("--profile.A=0.1").unwrap();
        let cfg = RunConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.profile.amplitude, 0.1);
        assert_eq!(cfg.steps, 16);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut raw = RawConfig::default();
        let e = raw.apply_override("--ode.speed=3").unwrap_err();
        assert_eq!(e.key, "ode.speed");
        assert!(raw.parse_text("bogus = 1").is_err());
    }

    #[test]
    fn invalid_values_name_their_key() {
        let cases = [
            ("profile.A", "1.5", "profile not monotone"),
            ("domain.M", "100", "power of two"),
            ("ode.rtol", "0", "rtol"),
            ("ode.N_sweep", "16,48", "dyadic"),
            ("ode.variant", "fancy", "fancy"),
            ("pde.formulation", "u", "u"),
        ];
        for (key, value, text) in cases {
            let mut raw = RawConfig::default();
            raw.set(key, value).unwrap();
            let e = RunConfig::from_raw(&raw).unwrap_err();
            assert_eq!(e.key, key);
            assert!(e.to_string().contains(text), "{e}");
        }
    }
}
