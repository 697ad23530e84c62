//! Experiment configuration (TOML). Unknown keys are rejected.

use crate::dn::bump;
use crate::domain::{build_domain, Conductivity, DomainConfig, DomainSpec, FracOrder, TimeGrid};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SCENARIOS: &[&str] = &[
    "forward-demo",
    "liouville-check",
    "dn-consistency",
    "exterior-recon",
    "integral-identity",
    "runge",
    "interior-recovery",
    "full-suite",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub conductivity: Phantom,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub liouville: LiouvilleConfig,
    #[serde(default)]
    pub dn: DnConfig,
    #[serde(default)]
    pub recon: ReconConfig,
    #[serde(default)]
    pub identity: IdentityConfig,
    #[serde(default)]
    pub runge: RungeConfig,
    #[serde(default)]
    pub recovery: RecoveryConfig,
}

fn default_seed() -> u64 {
    20240611
}

/// Box, grid, order and time stepping shared by scenarios unless they override `h` or `n_t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub box_halfwidth: f64,
    pub h: f64,
    pub omega: (f64, f64),
    /// Named exterior sets `[name, a, b]`.
    pub exterior: Vec<(String, f64, f64)>,
    #[serde(default)]
    pub disjoint_pairs: Vec<(String, String)>,
    pub s: f64,
    pub t_final: f64,
    pub n_t: usize,
    pub theta: f64,
    /// Ellipticity floor required of every conductivity.
    pub gamma0: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            box_halfwidth: 2.0,
            h: 0.02,
            omega: (-1.0, 1.0),
            exterior: vec![("W1".into(), 1.2, 1.8), ("W2".into(), -1.8, -1.2)],
            disjoint_pairs: vec![("W1".into(), "W2".into())],
            s: 0.5,
            t_final: 1.0,
            n_t: 50,
            theta: 1.0,
            gamma0: 0.2,
        }
    }
}

impl GridConfig {
    pub fn domain(&self, h: f64) -> Result<DomainSpec> {
        build_domain(&DomainConfig {
            box_halfwidth: self.box_halfwidth,
            h,
            omega: self.omega,
            exterior: self.exterior.clone(),
            disjoint_pairs: self.disjoint_pairs.clone(),
        })
    }

    pub fn order(&self) -> Result<FracOrder> {
        FracOrder::new(1, self.s)
    }

    pub fn time(&self, t_final: f64, n_t: usize) -> Result<TimeGrid> {
        TimeGrid::new(t_final, n_t, self.theta)
    }
}

/// Named analytic conductivity families.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Phantom {
    /// `γ = value`
    Constant { value: f64 },
    /// `γ = 1 + amplitude · b((x - center) / width)`
    InteriorBump { amplitude: f64, center: f64, width: f64 },
    /// `γ = 1 + amplitude · e^{-x²/spread} (1 + slope t/T) · b(x / cutoff)`
    SpaceTime { amplitude: f64, spread: f64, slope: f64, cutoff: f64 },
    /// `γ = 1 + amplitude · sin(π t / T)`
    TimeSine { amplitude: f64 },
}

impl Default for Phantom {
    fn default() -> Self {
        Phantom::InteriorBump { amplitude: 0.2, center: 0.0, width: 0.8 }
    }
}

impl Phantom {
    /// Closure `(x, t) -> γ`.
    pub fn closure(&self, t_final: f64) -> impl Fn(f64, f64) -> f64 + Send + Sync + Clone + 'static {
        let p = self.clone();
        move |x: f64, t: f64| match p {
            Phantom::Constant { value } => value,
            Phantom::InteriorBump { amplitude, center, width } => 1.0 + amplitude * bump((x - center) / width),
            Phantom::SpaceTime { amplitude, spread, slope, cutoff } => {
                1.0 + amplitude * (-x * x / spread).exp() * (1.0 + slope * t / t_final) * bump(x / cutoff)
            }
            Phantom::TimeSine { amplitude } => 1.0 + amplitude * (PI * t / t_final).sin(),
        }
    }

    pub fn time_independent(&self) -> bool {
        matches!(self, Phantom::Constant { .. } | Phantom::InteriorBump { .. })
    }

    pub fn conductivity(&self, spec: &DomainSpec, tg: &TimeGrid, gamma0: f64) -> Result<Conductivity> {
        if let Phantom::Constant { value } = self {
            return Conductivity::constant(*value, spec, tg);
        }
        let f = self.closure(tg.t_final);
        let dt: Option<crate::domain::ScalarFn> = match self.clone() {
            Phantom::SpaceTime { amplitude, spread, slope, cutoff } => {
                let t_final = tg.t_final;
                Some(std::sync::Arc::new(move |x: f64, _t: f64| amplitude * (-x * x / spread).exp() * slope / t_final * bump(x / cutoff)))
            }
            Phantom::TimeSine { amplitude } => {
                let t_final = tg.t_final;
                Some(std::sync::Arc::new(move |_x: f64, t: f64| amplitude * PI / t_final * (PI * t / t_final).cos()))
            }
            _ => None,
        };
        Conductivity::from_fn(f, dt, spec, tg, gamma0)
    }

    fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{name}: {m}")));
        match *self {
            Phantom::Constant { value } if !(value > 0.0 && value.is_finite()) => bad("constant must be positive"),
            Phantom::InteriorBump { width, .. } if !(width > 0.0) => bad("width must be positive"),
            Phantom::SpaceTime { spread, cutoff, .. } if !(spread > 0.0 && cutoff > 0.0) => bad("spread and cutoff must be positive"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub input_set: String,
    pub output_set: String,
    pub n_space: usize,
    pub n_time: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { input_set: "W1".into(), output_set: "W2".into(), n_space: 6, n_time: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub steady_state_l2: f64,
    pub liouville_identity: f64,
    pub liouville_constant: f64,
    pub min_rate: f64,
    pub partition: f64,
    pub old_new: f64,
    pub selfadjoint: f64,
    pub extension: f64,
    pub relation: f64,
    pub ibp: f64,
    pub identity_equal: f64,
    pub identity_fixed: f64,
    /// Residuals below this count as converged in rate checks.
    pub round_off_floor: f64,
    /// Required observed order for quantities expected to converge like `O(τ)`.
    pub tau_rate: f64,
    pub recon_constant: f64,
    pub recon_varying: f64,
    pub gradient: f64,
    pub recovery_crime: f64,
    pub recovery_honest: f64,
    pub recovery_noise: f64,
    pub runge_in_range: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            steady_state_l2: 2e-2,
            liouville_identity: 1e-10,
            liouville_constant: 1e-8,
            min_rate: 0.5,
            partition: 1e-14,
            old_new: 1e-9,
            selfadjoint: 1e-8,
            extension: 1e-8,
            relation: 1e-7,
            ibp: 1e-6,
            identity_equal: 1e-12,
            identity_fixed: 1e-6,
            round_off_floor: 1e-12,
            tau_rate: 0.9,
            recon_constant: 0.05,
            recon_varying: 0.10,
            gradient: 1e-5,
            recovery_crime: 0.05,
            recovery_honest: 0.10,
            recovery_noise: 0.15,
            runge_in_range: 1e-8,
        }
    }
}

impl Tolerances {
    fn validate(&self) -> Result<()> {
        let v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for (k, x) in v.as_object().into_iter().flatten() {
            if !(x.as_f64().unwrap_or(-1.0) > 0.0) {
                return Err(Error::Config(format!("tolerance {k} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardConfig {
    pub h: f64,
    pub t_final: f64,
    pub n_t: usize,
    /// Constant interior source.
    pub source: f64,
    /// Must be constant; the steady state is compared with the scaled torsion profile.
    pub phantom: Phantom,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self { h: 0.01, t_final: 8.0, n_t: 400, source: 1.0, phantom: Phantom::Constant { value: 1.0 } }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiouvilleConfig {
    /// Coarsest grid; each refinement halves `h` and `τ`.
    pub h: f64,
    pub n_t: usize,
    pub levels: usize,
    pub phantom: Phantom,
}

impl Default for LiouvilleConfig {
    fn default() -> Self {
        Self {
            h: 0.04,
            n_t: 25,
            levels: 3,
            phantom: Phantom::SpaceTime { amplitude: 0.5, spread: 0.1, slope: 1.0, cutoff: 1.6 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnConfig {
    /// Second conductivity, equal to the first outside Ω.
    pub phantom2: Phantom,
    pub refine_levels: usize,
}

impl Default for DnConfig {
    fn default() -> Self {
        Self { phantom2: Phantom::Constant { value: 1.0 }, refine_levels: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub h: f64,
    pub set: (f64, f64),
    pub x0: f64,
    pub r0: f64,
    pub n_max: usize,
    pub time_amplitude: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self { h: 0.005, set: (1.05, 1.95), x0: 1.5, r0: 0.8, n_max: 5, time_amplitude: 0.3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentityConfig {
    pub phantom2: Phantom,
    pub h: f64,
    pub n_t: usize,
    pub levels: usize,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self { phantom2: Phantom::InteriorBump { amplitude: 0.3, center: 0.0, width: 0.7 }, h: 0.04, n_t: 25, levels: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RungeConfig {
    pub sizes: Vec<usize>,
    pub n_space: usize,
    pub n_time: usize,
    pub eps: f64,
    pub target_bumps: usize,
}

impl Default for RungeConfig {
    fn default() -> Self {
        Self { sizes: vec![10, 20, 40], n_space: 8, n_time: 5, eps: 0.0, target_bumps: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub h: f64,
    pub n_t: usize,
    pub set_in: (f64, f64),
    pub set_out: (f64, f64),
    pub knots: usize,
    pub lambda: f64,
    pub lambda_honest: f64,
    pub max_iter: usize,
    pub noise_level: f64,
    pub discrepancy_safety: f64,
    pub lambda_grid: Vec<f64>,
    pub second_phantom: Phantom,
    pub fd_directions: usize,
    pub fd_step: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            h: 0.025,
            n_t: 50,
            set_in: (1.05, 1.95),
            set_out: (-1.95, -1.05),
            knots: 8,
            lambda: 1e-6,
            lambda_honest: 1e-5,
            max_iter: 50,
            noise_level: 0.01,
            discrepancy_safety: 1.1,
            lambda_grid: (2..=10).map(|j| 10f64.powi(-j)).collect(),
            second_phantom: Phantom::InteriorBump { amplitude: 0.15, center: 0.3, width: 0.5 },
            fd_directions: 5,
            fd_step: 1e-4,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !SCENARIOS.contains(&self.scenario.as_str()) {
            return Err(Error::Config(format!("unknown scenario {:?}; expected one of {}", self.scenario, SCENARIOS.join(", "))));
        }
        self.tolerances.validate()?;
        let g = &self.grid;
        // every grid the scenarios will build must be valid
        g.order()?;
        g.time(g.t_final, g.n_t)?;
        let spec = g.domain(g.h)?;
        for name in [&self.basis.input_set, &self.basis.output_set] {
            spec.exterior_set(name).map_err(|_| Error::Config(format!("basis refers to unknown exterior set {name}")))?;
        }
        if self.basis.n_space == 0 || self.basis.n_time == 0 {
            return Err(Error::Config("basis sizes must be positive".into()));
        }
        self.conductivity.validate("conductivity")?;
        if matches!(self.scenario.as_str(), "interior-recovery" | "full-suite") && !self.conductivity.time_independent() {
            return Err(Error::Config("interior recovery needs a time-independent conductivity".into()));
        }
        if !matches!(self.forward.phantom, Phantom::Constant { .. }) {
            return Err(Error::Config("forward.phantom must be constant".into()));
        }
        self.forward.phantom.validate("forward.phantom")?;
        self.liouville.phantom.validate("liouville.phantom")?;
        self.dn.phantom2.validate("dn.phantom2")?;
        self.identity.phantom2.validate("identity.phantom2")?;
        self.recovery.second_phantom.validate("recovery.second_phantom")?;
        if self.runge.sizes.iter().any(|&n| n == 0 || n > self.runge.n_space * self.runge.n_time) {
            return Err(Error::Config("runge sizes must lie in 1..=n_space*n_time".into()));
        }
        if !self.runge.sizes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("runge sizes must increase".into()));
        }
        if self.recovery.lambda_grid.is_empty() || self.recovery.lambda_grid.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("recovery.lambda_grid must hold positive values".into()));
        }
        if self.liouville.levels < 2 || self.identity.levels < 2 || self.dn.refine_levels < 2 {
            return Err(Error::Config("refinement studies need at least two levels".into()));
        }
        let with_sets = |h: f64, sets: Vec<(String, f64, f64)>| {
            GridConfig { exterior: sets, disjoint_pairs: vec![], ..g.clone() }.domain(h)
        };
        let mut grids = vec![(g.h, g.domain(g.h)), (self.forward.h, g.domain(self.forward.h)), (2.0 * self.forward.h, g.domain(2.0 * self.forward.h))];
        for l in 0..self.liouville.levels {
            let h = self.liouville.h / 2f64.powi(l as i32);
            grids.push((h, g.domain(h)));
        }
        for l in 0..self.identity.levels {
            let h = self.identity.h / 2f64.powi(l as i32);
            grids.push((h, g.domain(h)));
        }
        for l in 0..self.dn.refine_levels {
            let h = 2.0 * g.h / 2f64.powi(l as i32);
            grids.push((h, g.domain(h)));
        }
        let (rc, rv) = (&self.recon, &self.recovery);
        grids.push((rc.h, with_sets(rc.h, vec![("R".into(), rc.set.0, rc.set.1)])));
        let rec_sets = vec![("In".to_string(), rv.set_in.0, rv.set_in.1), ("Out".to_string(), rv.set_out.0, rv.set_out.1)];
        grids.push((rv.h, with_sets(rv.h, rec_sets.clone())));
        grids.push((rv.h / 2.0, with_sets(rv.h / 2.0, rec_sets)));
        for (h, d) in grids {
            d.map_err(|e| Error::Config(format!("grid with h = {h}: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::parse("scenario = \"forward-demo\"").unwrap();
        assert_eq!(c.grid.s, 0.5);
        assert_eq!(c.basis.n_space, 6);
    }

    #[test]
    fn unknown_keys_and_scenarios_rejected() {
        assert!(ExperimentConfig::parse("scenario = \"forward-demo\"\nbogus = 1").is_err());
        assert!(ExperimentConfig::parse("scenario = \"nope\"").is_err());
        assert!(ExperimentConfig::parse("scenario = \"runge\"\n[tolerances]\nmin_rate = -1.0").is_err());
        assert!(ExperimentConfig::parse("scenario = \"runge\"\n[basis]\ninput_set = \"W9\"\noutput_set = \"W2\"\nn_space = 2\nn_time = 2").is_err());
    }

    #[test]
    fn phantom_tables() {
        let c = ExperimentConfig::parse(
            "scenario = \"dn-consistency\"\n[conductivity]\nkind = \"time-sine\"\namplitude = 0.3\n",
        )
        .unwrap();
        assert_eq!(c.conductivity, Phantom::TimeSine { amplitude: 0.3 });
        assert!(ExperimentConfig::parse("scenario = \"runge\"\n[conductivity]\nkind = \"constant\"\nvalue = 1.0\nextra = 2").is_err());
    }
}
