//! Cylindrical `(r, z)` solver for the rotationally symmetric part of the
//! optics (ground plane, extraction disc, tube). Much cheaper than the 3D
//! solve, which makes grid-refinement studies affordable.

use super::{SolveOptions, SolveReport};
use crate::error::{Error, Result};
use crate::geometry::{Assembly, Medium};
use crate::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct AxisymGrid {
    /// Axial coordinate of row `k = 0`.
    pub z0: f64,
    pub spacing: f64,
    pub nr: usize,
    pub nz: usize,
    /// Node `(i, k)` at radius `i * spacing`, stored at `i * nz + k`.
    pub phi: Vec<f64>,
    pub fixed: Vec<bool>,
}

impl AxisymGrid {
    pub fn from_assembly(assembly: &Assembly, spacing: f64) -> Result<Self> {
        let r_max = assembly.domain.max[0].min(assembly.domain.max[1]);
        for e in &assembly.electrodes {
            if !e.shape.is_axisymmetric(r_max) {
                return Err(Error::Geometry(format!(
                    "electrode `{}` is not rotationally symmetric",
                    e.id
                )));
            }
        }
        let count = |len: f64| ((len / spacing) - 1e-9).ceil().max(0.0) as usize + 1;
        let nr = count(r_max);
        let z0 = assembly.domain.min[2];
        let nz = count(assembly.domain.max[2] - z0);
        if nr < 3 || nz < 3 {
            return Err(Error::DegenerateGrid(format!(
                "axisymmetric grid {nr} x {nz} is too small"
            )));
        }
        let mut phi = vec![0.0; nr * nz];
        let mut fixed = vec![false; nr * nz];
        for i in 0..nr {
            for k in 0..nz {
                let p = Vec3::new(i as f64 * spacing, 0.0, z0 + k as f64 * spacing);
                let n = i * nz + k;
                match assembly.classify_padded(&p, spacing) {
                    Medium::Vacuum => {}
                    Medium::Conductor(_, v) => {
                        fixed[n] = true;
                        phi[n] = v;
                    }
                    Medium::Mesh(e) => {
                        fixed[n] = true;
                        phi[n] = assembly.electrodes[e].voltage;
                    }
                }
            }
        }
        Ok(Self {
            z0,
            spacing,
            nr,
            nz,
            phi,
            fixed,
        })
    }

    /// Potential at radius `r` and height `z`, bilinear between nodes.
    pub fn at(&self, r: f64, z: f64) -> f64 {
        let x = (r / self.spacing).clamp(0.0, (self.nr - 1) as f64);
        let y = ((z - self.z0) / self.spacing).clamp(0.0, (self.nz - 1) as f64);
        let i = (x.floor() as usize).min(self.nr - 2);
        let k = (y.floor() as usize).min(self.nz - 2);
        let (tx, ty) = (x - i as f64, y - k as f64);
        let v = |i: usize, k: usize| self.phi[i * self.nz + k];
        (1.0 - tx) * ((1.0 - ty) * v(i, k) + ty * v(i, k + 1)) + tx * ((1.0 - ty) * v(i + 1, k) + ty * v(i + 1, k + 1))
    }

    pub fn on_axis(&self, z: f64) -> f64 {
        self.at(0.0, z)
    }

    #[inline]
    fn update_target(&self, i: usize, k: usize) -> f64 {
        let nz = self.nz;
        let km = if k > 0 { k - 1 } else { 1 };
        let kp = if k + 1 < nz { k + 1 } else { nz - 2 };
        let axial = self.phi[i * nz + km] + self.phi[i * nz + kp];
        if i == 0 {
            (4.0 * self.phi[nz + k] + axial) / 6.0
        } else {
            let ip = if i + 1 < self.nr { i + 1 } else { self.nr - 2 };
            let c = 0.5 / i as f64;
            ((1.0 + c) * self.phi[ip * nz + k] + (1.0 - c) * self.phi[(i - 1) * nz + k] + axial) / 4.0
        }
    }

    pub fn residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.nr {
            for k in 0..self.nz {
                let n = i * self.nz + k;
                if !self.fixed[n] {
                    worst = worst.max((self.update_target(i, k) - self.phi[n]).abs());
                }
            }
        }
        worst
    }

    pub fn relax(&mut self, opts: &SolveOptions) -> SolveReport {
        let check_every = opts.check_every.max(1);
        let mut res = self.residual();
        let mut iterations = 0;
        while res > opts.tol && iterations < opts.max_iter {
            for color in 0..2 {
                for i in 0..self.nr {
                    let mut k = (color + i) % 2;
                    while k < self.nz {
                        let n = i * self.nz + k;
                        if !self.fixed[n] {
                            let t = self.update_target(i, k);
                            self.phi[n] += opts.omega * (t - self.phi[n]);
                        }
                        k += 2;
                    }
                }
            }
            iterations += 1;
            if iterations % check_every == 0 || iterations == opts.max_iter {
                res = self.residual();
            }
        }
        SolveReport {
            iterations,
            final_residual: res,
            converged: res <= opts.tol,
        }
    }
}

/// Solves the cylindrical problem, warm-started from successively coarser
/// grids when `opts.multilevel` is set.
pub fn solve_axisymmetric(assembly: &Assembly, spacing: f64, opts: &SolveOptions) -> Result<(AxisymGrid, SolveReport)> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "solver tolerance must be positive, got {}",
            opts.tol
        )));
    }
    let mut grid = AxisymGrid::from_assembly(assembly, spacing)?;
    if opts.multilevel && grid.nr * grid.nz > 20_000 {
        if let Ok((coarse, _)) = solve_axisymmetric(assembly, 2.0 * spacing, opts) {
            for i in 0..grid.nr {
                for k in 0..grid.nz {
                    let n = i * grid.nz + k;
                    if !grid.fixed[n] {
                        grid.phi[n] = coarse.at(i as f64 * spacing, grid.z0 + k as f64 * spacing);
                    }
                }
            }
        }
    }
    let report = grid.relax(opts);
    Ok((grid, report))
}

/// On-axis grid-refinement ratio `|phi_h - phi_h/2| / |phi_h/2 - phi_h/4|`
/// in the max norm over the given axial positions. Second-order
/// convergence gives 4.
pub fn richardson_ratio(coarse: &AxisymGrid, mid: &AxisymGrid, fine: &AxisymGrid, z: &[f64]) -> f64 {
    let mut d1 = 0.0f64;
    let mut d2 = 0.0f64;
    for &zz in z {
        let (a, b, c) = (coarse.on_axis(zz), mid.on_axis(zz), fine.on_axis(zz));
        d1 = d1.max((a - b).abs());
        d2 = d2.max((b - c).abs());
    }
    d1 / d2
}
