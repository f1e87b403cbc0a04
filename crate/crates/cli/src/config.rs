//! The JSON problem document.
//!
//! ```json
//! {
//!   "horizon": 1.0,
//!   "regimes": 2,
//!   "generator": [[-1.0, 1.0], [2.0, -2.0]],
//!   "assets": 1,
//!   "noise": 1,
//!   "interpolation": "piecewise-constant-left",
//!   "coefficients": {
//!     "r":     { "values": [0.05, 0.02] },
//!     "mu":    { "grid": [0.0, 0.5, 1.0], "values": [[0.2, 0.25, 0.25], [0.1, 0.1, 0.1]] },
//!     "sigma": { "values": [[[0.3]], [[0.4]]] },
//!     "b":     { "values": [0.1, -0.05] },
//!     "rho":   { "values": [[0.05], [0.1]] }
//!   },
//!   "x0": 1.0, "i0": 0, "z": 1.2, "delta": 0.05
//! }
//! ```
//!
//! `values[i]` is regime `i`. With a `grid`, `values[i][k]` is the sample at
//! `grid[k]`; without one the coefficient is constant on `[0, horizon]`. A
//! sample is a number, a flat row-major array, or an array of rows. `r`, `mu`
//! and `sigma` are required; `b` and `rho` default to zero. Regimes are
//! numbered from 0.

use std::collections::BTreeMap;

use regime_lq::chain::{validate_generator, RegimeGenerator};
use regime_lq::market::MvAlmData;
use regime_lq::table::{CoefficientTable, Interpolation};
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpolationTag {
    #[serde(alias = "piecewise-constant")]
    PiecewiseConstantLeft,
    PiecewiseLinear,
}

impl From<InterpolationTag> for Interpolation {
    fn from(t: InterpolationTag) -> Self {
        match t {
            InterpolationTag::PiecewiseConstantLeft => Interpolation::PiecewiseConstantLeft,
            InterpolationTag::PiecewiseLinear => Interpolation::PiecewiseLinear,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    pub values: Vec<Value>,
    #[serde(default)]
    pub interpolation: Option<InterpolationTag>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub horizon: f64,
    #[serde(default)]
    pub regimes: Option<usize>,
    pub generator: Vec<Vec<f64>>,
    pub assets: usize,
    pub noise: usize,
    #[serde(default)]
    pub interpolation: Option<InterpolationTag>,
    pub coefficients: BTreeMap<String, CoefficientSpec>,
    pub x0: f64,
    pub i0: usize,
    pub z: f64,
    pub delta: f64,
}

/// A document that could not be turned into a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// Where in the document, e.g. `line 3 column 5` or `coefficients.sigma`.
    pub location: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(location: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError { location: location.into(), message: message.into() }
}

const KNOWN: [&str; 5] = ["r", "mu", "sigma", "b", "rho"];

/// Parses the document text.
pub fn parse(text: &str) -> Result<ProblemConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| {
        let message = e.to_string();
        let message = match message.rfind(" at line ") {
            Some(p) => message[..p].to_string(),
            None => message,
        };
        err(format!("line {} column {}", e.line(), e.column()), message)
    })
}

fn flatten(v: &Value, out: &mut Vec<f64>, at: &str) -> Result<(), ConfigError> {
    match v {
        Value::Number(n) => {
            out.push(n.as_f64().ok_or_else(|| err(at, "number out of range"))?);
            Ok(())
        }
        Value::Array(items) => items.iter().try_for_each(|x| flatten(x, out, at)),
        _ => Err(err(at, format!("expected a number or an array of numbers, got {v}"))),
    }
}

fn entry(v: &Value, size: usize, at: &str) -> Result<Vec<f64>, ConfigError> {
    let mut out = Vec::with_capacity(size);
    flatten(v, &mut out, at)?;
    if out.len() != size {
        return Err(err(at, format!("expected {size} entries, got {}", out.len())));
    }
    Ok(out)
}

impl ProblemConfig {
    fn regime_count(&self) -> usize {
        self.generator.len()
    }

    fn table(
        &self,
        name: &str,
        rows: usize,
        cols: usize,
        required: bool,
    ) -> Result<CoefficientTable, ConfigError> {
        let at = format!("coefficients.{name}");
        let l = self.regime_count();
        let Some(coef) = self.coefficients.get(name) else {
            if required {
                return Err(err("coefficients", format!("missing required coefficient `{name}`")));
            }
            return CoefficientTable::zeros(self.horizon, l, rows, cols).map_err(|e| err(at, e.to_string()));
        };
        if coef.values.len() != l {
            return Err(err(
                format!("{at}.values"),
                format!("expected one entry per regime ({l}), got {}", coef.values.len()),
            ));
        }
        let size = rows * cols;
        let interpolation: Interpolation = coef
            .interpolation
            .or(self.interpolation)
            .unwrap_or(InterpolationTag::PiecewiseConstantLeft)
            .into();
        let table = match &coef.grid {
            None => {
                let values = coef
                    .values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| entry(v, size, &format!("{at}.values[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                CoefficientTable::constant(self.horizon, rows, cols, &values)
                    .map(|t| t.with_interpolation(interpolation))
            }
            Some(grid) => {
                if let Some(&last) = grid.last() {
                    if (last - self.horizon).abs() > 1e-12 * self.horizon.abs().max(1.0) {
                        return Err(err(format!("{at}.grid"), format!("must end at the horizon {}, ends at {last}", self.horizon)));
                    }
                }
                let mut samples = Vec::with_capacity(l);
                for (i, per_node) in coef.values.iter().enumerate() {
                    let Value::Array(nodes) = per_node else {
                        return Err(err(format!("{at}.values[{i}]"), "expected one sample per grid node"));
                    };
                    if nodes.len() != grid.len() {
                        return Err(err(
                            format!("{at}.values[{i}]"),
                            format!("expected {} samples (one per grid node), got {}", grid.len(), nodes.len()),
                        ));
                    }
                    let mut s = Vec::with_capacity(grid.len() * size);
                    for (k, v) in nodes.iter().enumerate() {
                        s.extend(entry(v, size, &format!("{at}.values[{i}][{k}]"))?);
                    }
                    samples.push(s);
                }
                CoefficientTable::new(grid.clone(), rows, cols, samples, interpolation)
            }
        };
        table.map_err(|e| err(at, e.to_string()))
    }

    /// Builds the market data and the validated generator.
    pub fn build(&self) -> Result<(MvAlmData, RegimeGenerator), ConfigError> {
        if let Some(name) = self.coefficients.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(err("coefficients", format!("unknown coefficient `{name}`; expected one of {KNOWN:?}")));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(err("horizon", format!("must be positive, got {}", self.horizon)));
        }
        let l = self.regime_count();
        if let Some(r) = self.regimes {
            if r != l {
                return Err(err("regimes", format!("says {r} but the generator has {l} rows")));
            }
        }
        let gen = validate_generator(&self.generator).map_err(|e| err("generator", e.to_string()))?;
        let (m, n) = (self.assets, self.noise);
        let data = MvAlmData {
            horizon: self.horizon,
            regimes: l,
            assets: m,
            noise: n,
            rate: self.table("r", 1, 1, true)?,
            excess_return: self.table("mu", m, 1, true)?,
            volatility: self.table("sigma", m, n, true)?,
            liability_drift: self.table("b", 1, 1, false)?,
            liability_diffusion: self.table("rho", n, 1, false)?,
            x0: self.x0,
            i0: self.i0,
            z: self.z,
            delta: self.delta,
        };
        data.check_structure().map_err(|e| err("document", e.to_string()))?;
        Ok((data, gen))
    }
}

/// Parses and builds in one step.
pub fn load(text: &str) -> Result<(ProblemConfig, MvAlmData, RegimeGenerator), ConfigError> {
    let cfg = parse(text)?;
    let (data, gen) = cfg.build()?;
    Ok((cfg, data, gen))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "horizon": 2.0, "generator": [[-1.0, 1.0], [0.5, -0.5]], "assets": 2, "noise": 2,
        "coefficients": {
            "r": { "values": [0.03, 0.01] },
            "mu": { "grid": [0.0, 1.0, 2.0], "values": [[[0.1, 0.2], [0.1, 0.2], [0.3, 0.4]], [[0.0, 0.1], [0.0, 0.1], [0.2, 0.2]]] },
            "sigma": { "values": [[[0.2, 0.0], [0.1, 0.3]], [0.3, 0.0, 0.0, 0.3]] }
        },
        "x0": 1.0, "i0": 1, "z": 1.5, "delta": 0.01
    }"#;

    #[test]
    fn builds_tables_and_defaults() {
        let (_, data, gen) = load(BASE).unwrap();
        assert_eq!(gen.regimes(), 2);
        assert_eq!(data.excess_return.grid(), &[0.0, 1.0, 2.0]);
        assert_eq!(data.excess_return.evaluate(1.5, 0).unwrap(), vec![0.1, 0.2]);
        assert_eq!(data.volatility.evaluate(0.0, 0).unwrap(), vec![0.2, 0.0, 0.1, 0.3]);
        assert!(data.has_no_liability());
        assert_eq!(data.rate.horizon(), 2.0);
    }

    #[test]
    fn per_coefficient_interpolation_overrides_default() {
        let text = BASE.replace(r#""mu": { "grid""#, r#""mu": { "interpolation": "piecewise-linear", "grid""#);
        let (_, data, _) = load(&text).unwrap();
        let mu = data.excess_return.evaluate(1.5, 0).unwrap();
        assert!((mu[0] - 0.2).abs() < 1e-15 && (mu[1] - 0.3).abs() < 1e-15);
        assert_eq!(data.rate.interpolation(), Interpolation::PiecewiseConstantLeft);
    }

    #[test]
    fn errors_carry_locations() {
        let cases = [
            (BASE.replace("[0.3, 0.4]]", "[0.3]]"), "coefficients.mu.values[0][2]"),
            (BASE.replace("[0.0, 1.0, 2.0]", "[0.0, 1.0, 1.5]"), "coefficients.mu.grid"),
            (BASE.replace(r#""r": { "values": [0.03, 0.01] },"#, ""), "coefficients"),
            (BASE.replace("[0.5, -0.5]", "[0.5, -0.4]"), "generator"),
            (BASE.replace(r#""r":"#, r#""q":"#), "coefficients"),
            (BASE.replace(r#""horizon": 2.0,"#, r#""horizon": 2.0, "regimes": 3,"#), "regimes"),
        ];
        for (text, location) in cases {
            let e = load(&text).unwrap_err();
            assert_eq!(e.location, location, "{e}");
        }
        let e = load(&BASE.replace("\"x0\"", "\"x1\"")).unwrap_err();
        assert!(e.location.starts_with("line "), "{e}");
    }
}
