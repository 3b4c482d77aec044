//! Experiment configuration: JSON file merged under command-line flags.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use ccgeo_core::families::{builtin, default_center, FamilySpec};
use ccgeo_core::fields::{generate_commutators, CommutatorBasis};
use ccgeo_core::metrics::Metric;
use ccgeo_core::ode::IntegratorConfig;
use clap::Args;
use serde::{Deserialize, Serialize};

/// A built-in family by name or an inline definition.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum FamilySource {
    Name(String),
    Inline(FamilySpec),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
}

/// Every setting a subcommand may read. Keys are the long flag names with
/// dashes replaced by underscores.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilySource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuple: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub only: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<Tolerances>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enlarge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_radius: Option<f64>,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|e| format!("'{t}': {e}")))
        .collect()
}

fn floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    parse_list(s)
}

fn indices(s: &str) -> std::result::Result<Vec<usize>, String> {
    parse_list(s)
}

/// Command-line flags; each one overrides the same key from `--config`.
#[derive(Args, Clone, Debug, Default)]
pub struct Flags {
    /// Built-in family: euclid2in3, heisenberg, grushin, martinet, shear.
    #[arg(long, global = true)]
    pub family: Option<String>,
    /// JSON configuration file; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base point, comma separated.
    #[arg(long, global = true, value_parser = floats, allow_hyphen_values = true)]
    pub point: Option<::std::vec::Vec<f64>>,
    /// One-based indices into the commutator family; default is the maximal tuple.
    #[arg(long, global = true, value_parser = indices)]
    pub tuple: Option<::std::vec::Vec<usize>>,
    /// Ball radius r.
    #[arg(long, global = true)]
    pub radius: Option<f64>,
    /// Box size of Q_I(epsilon), in (0, 1].
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Control metric: cc or rho.
    #[arg(long, global = true)]
    pub metric: Option<Metric>,
    /// Monte Carlo sample count.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Random seed; equal seeds give identical reports.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for report.json and data.csv; without it the report goes to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Single criterion of `suite`, by name or number.
    #[arg(long, global = true)]
    pub only: Option<String>,
    /// One-based member of the commutator family for `flow`.
    #[arg(long, global = true)]
    pub field: Option<usize>,
    /// Flow time for `flow`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub time: Option<f64>,
    /// One-based letters of a bracket word for `exp-ap`.
    #[arg(long, global = true, value_parser = indices)]
    pub word: Option<::std::vec::Vec<usize>>,
    /// Parameter vector for `exp-ap` (one value), `map-e`, `map-phi` and `chi`.
    #[arg(long, global = true, value_parser = floats, allow_hyphen_values = true)]
    pub h: Option<::std::vec::Vec<f64>>,
    /// End point for `distance`.
    #[arg(long, global = true, value_parser = floats, allow_hyphen_values = true)]
    pub target: Option<::std::vec::Vec<f64>>,
    /// Ray direction for `a-ode`; normalized before use.
    #[arg(long, global = true, value_parser = floats, allow_hyphen_values = true)]
    pub omega: Option<::std::vec::Vec<f64>>,
    /// Largest radius for `a-ode`.
    #[arg(long, global = true)]
    pub rho_max: Option<f64>,
    /// Radii sampled by `a-ode`.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Grid points per axis for `injectivity`.
    #[arg(long, global = true)]
    pub density: Option<usize>,
    /// Shooting evaluations for `distance`.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// Enlargement of the right-hand ball for `poincare`.
    #[arg(long, global = true)]
    pub enlarge: Option<f64>,
    /// Largest acceptable Poincaré ratio.
    #[arg(long, global = true)]
    pub bound: Option<f64>,
    /// Radius of the random paths for `lift`.
    #[arg(long, global = true)]
    pub path_radius: Option<f64>,
}

impl Flags {
    /// Config file contents with flags layered on top.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let src = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str::<ExperimentConfig>(&src)
                    .map_err(|e| anyhow!("invalid config {}: {e}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = Some(v.clone()); } )* };
        }
        over!(
            tuple,
            point,
            radius,
            epsilon,
            metric,
            samples,
            seed,
            out,
            only,
            field,
            time,
            word,
            h,
            target,
            omega,
            rho_max,
            steps,
            density,
            budget,
            enlarge,
            bound,
            path_radius
        );
        if let Some(f) = &self.family {
            c.family = Some(FamilySource::Name(f.clone()));
        }
        Ok(c)
    }
}

/// Everything a subcommand needs once the family is loaded.
pub struct Setup {
    pub basis: CommutatorBasis,
    pub point: Vec<f64>,
    pub radius: f64,
    pub epsilon: f64,
    pub metric: Metric,
    pub seed: u64,
    pub cfg: IntegratorConfig,
}

impl ExperimentConfig {
    pub fn integrator(&self) -> Result<IntegratorConfig> {
        let mut cfg = IntegratorConfig::default();
        if let Some(t) = &self.tolerances {
            if let Some(v) = t.rel_tol {
                cfg.rel_tol = v;
            }
            if let Some(v) = t.abs_tol {
                cfg.abs_tol = v;
            }
        }
        cfg.validate().map_err(|e| anyhow!("tolerances: {e}"))?;
        Ok(cfg)
    }

    pub fn setup(&self) -> Result<Setup> {
        let (fam, name) = match &self.family {
            None => bail!("missing --family (or \"family\" in the config file)"),
            Some(FamilySource::Name(n)) => {
                (builtin(n).map_err(|e| anyhow!("family: {e}"))?, n.clone())
            }
            Some(FamilySource::Inline(spec)) => {
                let f = spec.build().map_err(|e| anyhow!("family: {e}"))?;
                let n = f.name.clone();
                (f, n)
            }
        };
        let basis = generate_commutators(&fam);
        let point = match &self.point {
            Some(p) => p.clone(),
            None if matches!(self.family, Some(FamilySource::Name(_))) => default_center(&name),
            None => vec![0.0; fam.dim()],
        };
        if point.len() != fam.dim() {
            bail!(
                "point: expected {} coordinates, got {}",
                fam.dim(),
                point.len()
            );
        }
        if !fam.contains(&point) {
            bail!("point: {point:?} lies outside the domain box of {name}");
        }
        let radius = self.radius.unwrap_or(0.1);
        if !(radius > 0.0 && radius.is_finite()) {
            bail!("radius: must be positive");
        }
        let epsilon = self.epsilon.unwrap_or(0.3);
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            bail!("epsilon: must lie in (0, 1]");
        }
        Ok(Setup {
            basis,
            point,
            radius,
            epsilon,
            metric: self.metric.unwrap_or(Metric::Cc),
            seed: self.seed.unwrap_or(0),
            cfg: self.integrator()?,
        })
    }
}
