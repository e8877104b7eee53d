use std::path::{Path, PathBuf};

use log::info;

use super::cache::{cache_key, read_grid, write_grid};
use super::{check_resolution, solve_laplace_with, PotentialGrid, SolveOptions, SolveReport};
use crate::error::{Error, Result};
use crate::geometry::{Assembly, Role, VoltageConfig};
use crate::Vec3;

/// One unit-voltage solution per supply. Because the Laplace problem is
/// linear in its boundary values, the potential for any voltage set is the
/// weighted sum of these, with Dirichlet nodes reproduced exactly.
#[derive(Clone, Debug)]
pub struct FieldBasis {
    pub spacing: f64,
    pub tol: f64,
    base: Assembly,
    components: Vec<(Role, PotentialGrid)>,
    reports: Vec<(Role, SolveReport)>,
    template: PotentialGrid,
}

fn cache_name(unit: &Assembly, spacing: f64, tol: f64) -> String {
    let key = cache_key(unit, spacing, tol);
    format!("{}.grid", hex::encode(&key[..12]))
}

fn same_geometry(a: &Assembly, b: &Assembly) -> bool {
    a.zeroed() == b.zeroed()
}

impl FieldBasis {
    /// Solves (or loads from `cache_dir`) the unit solution for every supply
    /// in the assembly.
    pub fn solve(assembly: &Assembly, spacing: f64, opts: &SolveOptions, cache_dir: Option<&Path>) -> Result<Self> {
        Self::build(assembly, spacing, opts, cache_dir, true)
    }

    /// Like [`FieldBasis::solve`] but never runs the solver: every unit
    /// solution must already be in `cache_dir`.
    pub fn load(assembly: &Assembly, spacing: f64, opts: &SolveOptions, cache_dir: &Path) -> Result<Self> {
        Self::build(assembly, spacing, opts, Some(cache_dir), false)
    }

    /// Cache file of each unit solution of `assembly`.
    pub fn cache_files(assembly: &Assembly, spacing: f64, tol: f64, cache_dir: &Path) -> Vec<PathBuf> {
        assembly
            .roles()
            .into_iter()
            .map(|role| cache_dir.join(cache_name(&assembly.unit_basis(role), spacing, tol)))
            .collect()
    }

    fn build(
        assembly: &Assembly,
        spacing: f64,
        opts: &SolveOptions,
        cache_dir: Option<&Path>,
        allow_solve: bool,
    ) -> Result<Self> {
        check_resolution(assembly, spacing)?;
        let template = PotentialGrid::from_assembly(&assembly.zeroed(), spacing)?;
        let mut components = Vec::new();
        let mut reports = Vec::new();
        for role in assembly.roles() {
            let unit = assembly.unit_basis(role);
            let key = cache_key(&unit, spacing, opts.tol);
            let path = cache_dir.map(|d| d.join(cache_name(&unit, spacing, opts.tol)));
            let cached = path
                .as_ref()
                .filter(|p| p.exists())
                .and_then(|p| read_grid(p, &key, &unit).ok());
            if cached.is_none() && !allow_solve {
                let shown = path.map(|p| p.display().to_string()).unwrap_or_default();
                return Err(Error::Cache(format!(
                    "no cached solution for {} at {shown}",
                    role.name()
                )));
            }
            let (grid, report) = match cached {
                Some(g) => {
                    let res = g.residual();
                    let report = SolveReport {
                        iterations: 0,
                        final_residual: res,
                        converged: res <= opts.tol,
                    };
                    (g, report)
                }
                None => {
                    info!("solving unit potential for {} at spacing {spacing:e} m", role.name());
                    let (g, report) = solve_laplace_with(&unit, spacing, opts)?;
                    info!(
                        "{}: {} iterations, residual {:.3e} V",
                        role.name(),
                        report.iterations,
                        report.final_residual
                    );
                    if let Some(p) = &path {
                        write_grid(p, &key, &g)?;
                    }
                    (g, report)
                }
            };
            components.push((role, grid));
            reports.push((role, report));
        }
        Ok(Self {
            spacing,
            tol: opts.tol,
            base: assembly.clone(),
            components,
            reports,
            template,
        })
    }

    pub fn assembly(&self) -> &Assembly {
        &self.base
    }

    pub fn reports(&self) -> &[(Role, SolveReport)] {
        &self.reports
    }

    pub fn roles(&self) -> Vec<Role> {
        self.components.iter().map(|(r, _)| *r).collect()
    }

    /// Potential for the voltages and stray field carried by `assembly`,
    /// which must have the same electrodes as the basis.
    pub fn combine(&self, assembly: &Assembly) -> Result<PotentialGrid> {
        if !same_geometry(assembly, &self.base) {
            return Err(Error::InvalidInput(
                "assembly geometry differs from the solved basis".into(),
            ));
        }
        let weights: Vec<f64> = self
            .components
            .iter()
            .map(|(r, _)| assembly.voltage_of(*r).unwrap_or(0.0))
            .collect();
        Ok(self.weighted(&weights, assembly.stray_field))
    }

    /// Potential for a voltage set on the basis geometry. Patch potentials
    /// keep the value the basis assembly was built with.
    pub fn combine_voltages(&self, v: &VoltageConfig, stray: Vec3) -> PotentialGrid {
        let weights: Vec<f64> = self
            .components
            .iter()
            .map(|(r, _)| match r {
                Role::Patch => self.base.voltage_of(Role::Patch).unwrap_or(0.0),
                _ => v.voltage_of(*r),
            })
            .collect();
        self.weighted(&weights, stray)
    }

    fn weighted(&self, weights: &[f64], stray: Vec3) -> PotentialGrid {
        let mut out = self.template.clone();
        for ((_, g), &w) in self.components.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for (o, &u) in out.phi.iter_mut().zip(&g.phi) {
                *o += w * u;
            }
        }
        out.stray_field = stray;
        out
    }

    /// Upper bound on the residual of any combination, given the voltages.
    pub fn residual_bound(&self, weights: impl Fn(Role) -> f64) -> f64 {
        self.reports
            .iter()
            .map(|(r, rep)| weights(*r).abs() * rep.final_residual)
            .sum()
    }

    /// Combination followed by SOR polishing until the residual of the
    /// combined grid itself is below `opts.tol`.
    pub fn solve_combined(&self, assembly: &Assembly, opts: &SolveOptions) -> Result<(PotentialGrid, SolveReport)> {
        let mut g = self.combine(assembly)?;
        let report = g.relax(opts);
        Ok((g, report))
    }
}
