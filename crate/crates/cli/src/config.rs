//! Run configuration, read from a TOML file.
//!
//! Relative paths inside the file resolve against the file's directory.
//! Matrices are either inline row lists or a path to a CSV file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::Deserialize;

use smnreg::gibbs::{ChainSettings, SamplerSpec};
use smnreg::io::read_matrix_csv;
use smnreg::{Dataset, MixingDensity, NIWPrior};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataSection>,
    pub model: Option<ModelSection>,
    pub mixing: Option<MixingSection>,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub output: OutputSection,
    pub simulate: Option<SimulateSection>,
    pub geweke: Option<GewekeSection>,
    #[serde(skip)]
    base: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub x: PathBuf,
    pub y: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixSource {
    Rows(Vec<Vec<f64>>),
    Csv(PathBuf),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum PriorSource {
    Named(String),
    Literal(PriorSection),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub b: MatrixSource,
    pub a: MatrixSource,
    pub nu: f64,
    pub theta: MatrixSource,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    Proper {
        #[serde(default)]
        prior: Option<PriorSource>,
    },
    ImproperT {
        nu_t: f64,
        /// Present only to reject it with a clear message.
        #[serde(default)]
        prior: Option<toml::Value>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixingSection {
    PointMass { u0: f64 },
    Gamma { shape: f64, rate: f64 },
    StudentT { nu: f64 },
    Tabulated {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        grid: Option<Vec<f64>>,
        #[serde(default)]
        values: Option<Vec<f64>>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { iters: 5000, burnin: 1000, thin: 1, chains: 1, seed: 1 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub emit_u: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), emit_u: false }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub beta: MatrixSource,
    pub sigma: MatrixSource,
    #[serde(default)]
    pub intercept: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GewekeSection {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub iterations: usize,
    #[serde(default = "default_z_limit")]
    pub z_limit: f64,
}

fn default_z_limit() -> f64 {
    4.0
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if let Some(ModelSection::ImproperT { prior, .. }) = &self.model {
            if prior.is_some() {
                bail!("the improper model uses the flat prior |Σ|^(-(d+1)/2); remove `prior` from [model]");
            }
            if self.mixing.is_some() {
                bail!("the improper model fixes Student-t errors through `nu_t`; remove the [mixing] section");
            }
        }
        if let Some(d) = &self.data {
            for p in [&d.x, &d.y] {
                let p = self.resolve(p);
                if !p.is_file() {
                    bail!("data file {} does not exist", p.display());
                }
            }
        }
        ChainSettings::new(self.sampler.iters, self.sampler.burnin, self.sampler.thin)?;
        if self.sampler.chains == 0 {
            bail!("[sampler] chains must be at least 1");
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn output_dir(&self, overridden: Option<&Path>) -> PathBuf {
        overridden.map(Path::to_path_buf).unwrap_or_else(|| self.resolve(&self.output.dir))
    }

    pub fn settings(&self) -> Result<ChainSettings> {
        Ok(ChainSettings::new(self.sampler.iters, self.sampler.burnin, self.sampler.thin)?)
    }

    pub fn matrix(&self, m: &MatrixSource, what: &str) -> Result<DMatrix<f64>> {
        match m {
            MatrixSource::Csv(p) => {
                let p = self.resolve(p);
                read_matrix_csv(&p).with_context(|| format!("reading {what} from {}", p.display()))
            }
            MatrixSource::Rows(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
                    bail!("{what} must be a non-empty list of equal-length rows");
                }
                Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
            }
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let Some(d) = &self.data else { bail!("this command needs a [data] section with `x` and `y` CSV paths") };
        Ok(Dataset::from_csv(self.resolve(&d.x), self.resolve(&d.y))?)
    }

    pub fn mixing(&self) -> Result<MixingDensity> {
        let Some(m) = &self.mixing else { bail!("the proper model needs a [mixing] section") };
        Ok(match m {
            MixingSection::PointMass { u0 } => MixingDensity::point_mass(*u0)?,
            MixingSection::Gamma { shape, rate } => MixingDensity::gamma(*shape, *rate)?,
            MixingSection::StudentT { nu } => MixingDensity::student_t(*nu)?,
            MixingSection::Tabulated { path: Some(p), grid: None, values: None } => {
                MixingDensity::tabulated_from_csv(self.resolve(p))?
            }
            MixingSection::Tabulated { path: None, grid: Some(g), values: Some(v) } => {
                MixingDensity::tabulated(g.clone(), v.clone())?
            }
            MixingSection::Tabulated { .. } => bail!("tabulated mixing needs either `path` or both `grid` and `values`"),
        })
    }

    pub fn prior(&self, p: usize, d: usize) -> Result<NIWPrior> {
        match &self.model {
            Some(ModelSection::Proper { prior: None }) => Ok(NIWPrior::weakly_informative(p, d)),
            Some(ModelSection::Proper { prior: Some(PriorSource::Named(name)) }) if name == "default" => {
                Ok(NIWPrior::weakly_informative(p, d))
            }
            Some(ModelSection::Proper { prior: Some(PriorSource::Named(name)) }) => {
                bail!("unknown prior {name:?}; use \"default\" or a table with b, a, nu, theta")
            }
            Some(ModelSection::Proper { prior: Some(PriorSource::Literal(s)) }) => Ok(NIWPrior::new(
                self.matrix(&s.b, "prior b")?,
                self.matrix(&s.a, "prior a")?,
                s.nu,
                self.matrix(&s.theta, "prior theta")?,
            )?),
            Some(ModelSection::ImproperT { .. }) => bail!("this command needs a proper model"),
            None => bail!("missing [model] section"),
        }
    }

    pub fn spec(&self, p: usize, d: usize) -> Result<SamplerSpec> {
        match &self.model {
            Some(ModelSection::ImproperT { nu_t, .. }) => Ok(SamplerSpec::improper_t(*nu_t)?),
            _ => Ok(SamplerSpec::proper(self.prior(p, d)?, self.mixing()?)),
        }
    }
}
