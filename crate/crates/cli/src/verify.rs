//! `flashsim verify --suite ...`: the acceptance checks as a table.

use clap::ValueEnum;
use flashsim::experiments as exp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Povm,
    Consistency,
    Covariance,
    Nosignal,
    Dilation,
    NonrelLimit,
    FockEquiv,
    NonAutonomy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `value <= bound` when `upper`, else `value > bound`.
    pub bound: f64,
    pub upper: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, upper: true }
    }

    fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, upper: false }
    }

    pub fn pass(&self) -> bool {
        if self.upper {
            self.value <= self.bound
        } else {
            self.value > self.bound
        }
    }
}

/// Upper-bound tolerances are multiplied by `scale`; lower bounds (effects
/// that must be visible) are left alone.
pub fn run_suite(suite: Suite, scale: f64) -> flashsim::Result<Vec<Check>> {
    let mut checks = Vec::new();
    let tol = |t: f64| t * scale;
    match suite {
        Suite::Povm => {
            let r = exp::povm_check::<f64>(&exp::PovmCheckConfig { refinements: 1, ..Default::default() })?;
            checks.push(Check::at_most("povm deficiency |1 - integral|, refined mesh", *r.deficiencies.last().unwrap_or(&f64::NAN), tol(1e-3)));
            let worse = r.deficiencies.windows(2).filter(|w| w[1] > w[0]).count();
            checks.push(Check::at_most("refinement steps where the deficiency grew", worse as f64, 0.0));
        }
        Suite::Consistency => {
            let s = exp::exponential_survival::<f64>(10.0)?;
            checks.push(Check::at_most("exponential survival, max |S - e^(-Nt/tau)|", s.iter().fold(0f64, |m, r| m.max(r.2)), tol(1e-10)));
            for (i, w) in exp::waiting_times::<f64>(&exp::WaitingTimeConfig::default())?.iter().enumerate() {
                checks.push(Check::at_most(format!("type {i} mean first wait, |mean - tau| / SE"), w.z, 3.0 * scale));
                checks.push(Check::above(format!("type {i} KS p-value against Exp(tau)"), w.ks_p_value, 0.01));
            }
            let g = exp::grw_consistency::<f64>()?;
            checks.push(Check::at_most("marginalise-and-survive identity, n <= 2", g.iter().fold(0f64, |m, x| m.max(*x)), tol(1e-6)));
            let c = exp::conditional_coherence::<f64>(&exp::RelBench::default())?;
            checks.push(Check::at_most("conditional routes (Bayes, psi_Sigma, phi_Sigma)", c.max_relative, tol(1e-8)));
            checks.push(Check::above("| |phi_Sigma|^2 - 1 | on an entangled state", (c.phi_norm_sqr - 1.0).abs(), 1e-3));
        }
        Suite::Covariance => {
            let m = exp::multitime_covariance::<f64>(7.0)?;
            checks.push(Check::at_most(format!("multi-time shift, {} configurations, max rel", m.configurations), m.max_rel_diff, tol(1e-8)));
            checks.push(Check::at_most("multi-time shift, max abs", m.max_abs_diff, tol(1e-8)));
            let l = exp::lorentz_check::<f64>(&exp::RelBench::default(), &[0.3, -0.3, 0.7, -0.7])?;
            for (eta, rel, _) in &l.boosts {
                checks.push(Check::at_most(format!("joint density under boost eta = {eta}"), *rel, tol(1e-6)));
            }
        }
        Suite::Nosignal => {
            let r = exp::no_signalling::<f64>(&exp::RelBench::default())?;
            checks.push(Check::at_most(format!("type-1 marginals across purifications, {} sequences", r.sequences), r.purification_gap, tol(1e-8)));
            checks.push(Check::at_most("reduced-state route against summing type 2", r.route_gap, tol(1e-8)));
            let t = 1e-10;
            let n = exp::nonlocality_check::<f64>(&exp::RelBench::default(), tol(t))?;
            checks.push(Check::above("entangled |joint/product - 1|", (n.entangled.ratio - 1.0).abs(), 10.0 * tol(t)));
            checks.push(Check::at_most("product |joint/product - 1|", (n.product.ratio - 1.0).abs(), tol(t)));
        }
        Suite::Dilation => {
            let r = exp::time_dilation::<f64>(&exp::TimeDilationConfig::default())?;
            checks.push(Check::at_most(format!("|rate x tau - {:.3}|, {} flashes", r.expected, r.flashes), (r.rate_median - r.expected).abs(), tol(0.02)));
        }
        Suite::NonrelLimit => {
            let r = exp::nonrel_limit::<f64>(&exp::NonrelLimitConfig::default())?;
            checks.push(Check::at_most("total variation to lattice GRW (upper bound)", r.total_variation, tol(0.05)));
        }
        Suite::FockEquiv => {
            let d = exp::fock_equivalence::<f64>(6, 3)?;
            checks.push(Check::at_most("fermions, sector sum vs smeared density", d[0], tol(1e-10)));
            checks.push(Check::at_most("bosons, sector sum vs smeared density", d[1], tol(1e-10)));
        }
        Suite::NonAutonomy => {
            let r = exp::non_autonomy_search::<f64>(&exp::NonAutonomyConfig::default())?;
            let (d1, d2) = r.best.as_ref().map_or((f64::INFINITY, 0.0), |w| (w.distance_first, w.distance_second));
            checks.push(Check::at_most(format!("best pair of {}: |rho_1 - rho_1'| bound", r.pairs_tried), d1, tol(1e-8)));
            checks.push(Check::above("same pair: |rho_2 - rho_2'| bound", d2, 1e-3));
        }
    }
    Ok(checks)
}

pub fn table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>12}  {:>14}  result\n", "check", "value", "bound");
    for c in checks {
        let bound = format!("{} {:.3e}", if c.upper { "<=" } else { ">" }, c.bound);
        out.push_str(&format!("{:<width$}  {:>12.4e}  {:>14}  {}\n", c.name, c.value, bound, if c.pass() { "PASS" } else { "FAIL" }));
    }
    out
}
