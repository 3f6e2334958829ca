//! Ergodicity report attached to every fit and produced by `check`.

use anyhow::Result;
use serde::Serialize;

use smnreg::ergodicity::{self, ConditionReport, ConditionStatus, DriftConstants, MomentCheck, UniformCheck};
use smnreg::gibbs::SamplerSpec;
use smnreg::{Dataset, Error};

#[derive(Debug, Serialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum CheckReport {
    Proper {
        geometric: MomentCheck,
        uniform: UniformCheck,
        /// Present when the geometric moment condition holds.
        drift_constants: Option<DriftConstants>,
    },
    ImproperT {
        condition: ConditionReport,
    },
}

pub fn build(data: &Dataset, spec: &SamplerSpec) -> Result<CheckReport> {
    Ok(match spec {
        SamplerSpec::Proper { prior, mixing } => {
            let geometric = ergodicity::check_proper_geometric(mixing, data.d());
            let drift_constants = match ergodicity::drift_constants_proper(data, prior, mixing) {
                Ok(c) => Some(c),
                Err(Error::DivergentMoment(_)) => None,
                Err(e) => return Err(e.into()),
            };
            CheckReport::Proper { geometric, uniform: ergodicity::check_uniform(data, mixing), drift_constants }
        }
        SamplerSpec::ImproperT { nu_t } => {
            CheckReport::ImproperT { condition: ergodicity::check_improper_condition(data, *nu_t)? }
        }
    })
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "holds"
    } else {
        "NOT verified"
    }
}

impl CheckReport {
    /// Whether geometric ergodicity of the configured chain is established.
    pub fn guaranteed(&self) -> bool {
        match self {
            Self::Proper { geometric, .. } => geometric.holds,
            Self::ImproperT { condition } => condition.holds,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self {
            Self::Proper { geometric, uniform, drift_constants } => {
                s.push_str("model: proper normal-inverse-Wishart prior\n");
                s.push_str(&format!(
                    "geometric ergodicity (moment of order {} finite): {}\n",
                    geometric.order,
                    yes_no(geometric.holds)
                ));
                if let Some(c) = drift_constants {
                    s.push_str(&format!(
                        "  drift constants: M1 = {:.6e}, M2 = {:.6e}, M3 = {:.6e}, M4 = {:.6e}, M5 = {:.6e}\n",
                        c.m1, c.m2, c.m3, c.m4, c.m5
                    ));
                }
                s.push_str(&format!(
                    "uniform ergodicity (rank X = p and moment of order {} finite): {}\n",
                    uniform.moment.order,
                    yes_no(uniform.holds)
                ));
                s.push_str(&format!("  rank X = {} of p = {}", uniform.rank, uniform.p));
                if !uniform.design_full_rank {
                    let sv: Vec<String> = uniform.singular_values.iter().map(|v| format!("{v:.3e}")).collect();
                    s.push_str(&format!("; singular values [{}]", sv.join(", ")));
                }
                s.push('\n');
            }
            Self::ImproperT { condition: c } => {
                s.push_str(&format!("model: improper prior, Student-t errors with nu_t = {}\n", c.nu_t));
                let status = match c.status {
                    ConditionStatus::Holds => "holds",
                    ConditionStatus::Boundary => "on the boundary, NOT verified",
                    ConditionStatus::NotVerified => "NOT verified",
                };
                s.push_str(&format!("geometric ergodicity condition: {status}\n"));
                s.push_str(&format!(
                    "  (n - p)/(nu_t + d - 2) = {:.9}  vs  g(0+) = {:.9}\n",
                    c.lhs, c.g_zero_plus
                ));
                if let Some(eps) = c.max_feasible_eps {
                    s.push_str(&format!("  largest feasible epsilon = {eps:.9}\n"));
                }
                s.push_str(&format!(
                    "legacy condition n < nu_t + p - 2 ({} < {}): {}\n",
                    c.n,
                    c.nu_t + c.p as f64 - 2.0,
                    if c.legacy_condition_holds { "holds" } else { "fails" }
                ));
            }
        }
        s
    }
}
