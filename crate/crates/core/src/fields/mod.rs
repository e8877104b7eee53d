//! Laplace solver on a uniform Cartesian grid and smooth field evaluation.
//!
//! Node `(i, j, k)` sits at `origin + spacing * (i, j, k)` and is stored at
//! `(i * ny + j) * nz + k`, so `z` runs fastest. The faces of the box are
//! Neumann boundaries (mirror ghost nodes) unless a conductor touches them,
//! in which case the conductor nodes are Dirichlet like any other.

pub mod axisym;
mod basis;
pub mod cache;
mod sor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Assembly, Medium};
use crate::Vec3;

pub use basis::FieldBasis;

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialGrid {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
    pub phi: Vec<f64>,
    pub fixed: Vec<bool>,
    pub stray_field: Vec3,
    /// Per cell (indexed by its lower corner): whether the 4x4x4
    /// interpolation stencil touches a fixed node.
    near_fixed: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub omega: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Sweeps between true residual evaluations.
    pub check_every: usize,
    /// Start from the prolonged solution on a grid of twice the spacing.
    pub multilevel: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            omega: 1.9,
            tol: 1e-4,
            max_iter: 20_000,
            check_every: 10,
            multilevel: true,
        }
    }
}

fn grid_dims(extent: &Vec3, spacing: f64) -> [usize; 3] {
    let n = |e: f64| ((e / spacing) - 1e-9).ceil().max(0.0) as usize + 1;
    [n(extent[0]), n(extent[1]), n(extent[2])]
}

impl PotentialGrid {
    /// Grid covering the assembly domain with Dirichlet nodes at every
    /// conductor and mesh node and zero elsewhere. Sheets thinner than the
    /// spacing are widened to one node layer.
    pub fn from_assembly(assembly: &Assembly, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::DegenerateGrid(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        let dims = grid_dims(&assembly.domain.extent(), spacing);
        if dims.iter().any(|&n| n < 3) {
            return Err(Error::DegenerateGrid(format!(
                "grid dimensions {dims:?} need at least 3 nodes per axis"
            )));
        }
        let origin = assembly.domain.min;
        let total = dims[0] * dims[1] * dims[2];
        let mut phi = vec![0.0; total];
        let mut fixed = vec![false; total];
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let p = origin + spacing * Vec3::new(i as f64, j as f64, k as f64);
                    let n = (i * dims[1] + j) * dims[2] + k;
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
        }
        let near_fixed = dilate(&fixed, dims);
        Ok(Self {
            origin,
            spacing,
            dims,
            phi,
            fixed,
            stray_field: assembly.stray_field,
            near_fixed,
        })
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + self.spacing * Vec3::new(i as f64, j as f64, k as f64)
    }

    /// Far corner of the grid hull.
    pub fn upper(&self) -> Vec3 {
        self.node(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let hi = self.upper();
        (0..3).all(|d| p[d] >= self.origin[d] && p[d] <= hi[d])
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// Max-norm of the discrete Laplacian defect over free nodes, expressed
    /// as the distance of each node from the mean of its six neighbours.
    pub fn residual(&self) -> f64 {
        sor::residual(&self.phi, &self.fixed, self.dims)
    }

    /// Copy with the potential and the stray field multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.phi {
            *v *= k;
        }
        out.stray_field *= k;
        out
    }

    /// Potential including the stray-field term `-E_s . (p - origin)`, and
    /// the electric field `-grad(phi) + E_s`.
    ///
    /// The potential is the tricubic Catmull-Rom interpolant of the nodes,
    /// which is C1 across cells in vacuum, and the field is its exact
    /// gradient, so the pair is conservative. Next to a conductor surface the
    /// node behind the surface is replaced by a linear extrapolation from the
    /// vacuum side, so the interpolant does not feel the kink in the
    /// potential at the surface.
    pub fn potential_and_field(&self, p: &Vec3) -> Result<(f64, Vec3)> {
        let g = (p - self.origin) / self.spacing;
        let [nx, ny, nz] = self.dims;
        for d in 0..3 {
            let n = self.dims[d] as f64 - 1.0;
            if !(g[d] >= 0.0 && g[d] <= n) {
                return Err(Error::OutOfDomain([p[0], p[1], p[2]]));
            }
        }
        let (ix, wx, dx) = stencil(g[0], nx);
        let (iy, wy, dy) = stencil(g[1], ny);
        let (iz, wz, dz) = stencil(g[2], nz);
        let mut v = [[[0.0; 4]; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                let row = (ix[a] * ny + iy[b]) * nz;
                for c in 0..4 {
                    v[a][b][c] = self.phi[row + iz[c]];
                }
            }
        }
        if self.near_fixed[(ix[1] * ny + iy[1]) * nz + iz[1]] {
            let mut f = [[[false; 4]; 4]; 4];
            for a in 0..4 {
                for b in 0..4 {
                    let row = (ix[a] * ny + iy[b]) * nz;
                    for c in 0..4 {
                        f[a][b][c] = self.fixed[row + iz[c]];
                    }
                }
            }
            extrapolate_ghosts(&mut v, &f);
        }
        let mut val = 0.0;
        let mut grad = [0.0; 3];
        for a in 0..4 {
            for b in 0..4 {
                let mut s = 0.0;
                let mut sd = 0.0;
                for c in 0..4 {
                    s += wz[c] * v[a][b][c];
                    sd += dz[c] * v[a][b][c];
                }
                val += wx[a] * wy[b] * s;
                grad[0] += dx[a] * wy[b] * s;
                grad[1] += wx[a] * dy[b] * s;
                grad[2] += wx[a] * wy[b] * sd;
            }
        }
        let h = self.spacing;
        let field = -Vec3::new(grad[0], grad[1], grad[2]) / h + self.stray_field;
        let potential = val - self.stray_field.dot(&(p - self.origin));
        Ok((potential, field))
    }

    pub fn field_at(&self, p: &Vec3) -> Result<Vec3> {
        self.potential_and_field(p).map(|(_, e)| e)
    }

    pub fn potential_at(&self, p: &Vec3) -> Result<f64> {
        self.potential_and_field(p).map(|(v, _)| v)
    }

    /// Trilinear interpolation of the node values only. Used for
    /// prolongation between grid levels.
    pub fn trilinear(&self, p: &Vec3) -> f64 {
        let g = (p - self.origin) / self.spacing;
        let mut i0 = [0usize; 3];
        let mut t = [0.0; 3];
        for d in 0..3 {
            let n = self.dims[d];
            let x = g[d].clamp(0.0, (n - 1) as f64);
            let c = (x.floor() as usize).min(n - 2);
            i0[d] = c;
            t[d] = x - c as f64;
        }
        let mut v = 0.0;
        for (a, wa) in [(0, 1.0 - t[0]), (1, t[0])] {
            for (b, wb) in [(0, 1.0 - t[1]), (1, t[1])] {
                for (c, wc) in [(0, 1.0 - t[2]), (1, t[2])] {
                    v += wa * wb * wc * self.phi[self.idx(i0[0] + a, i0[1] + b, i0[2] + c)];
                }
            }
        }
        v
    }

    /// Run SOR sweeps on this grid until the residual reaches `opts.tol`.
    pub fn relax(&mut self, opts: &SolveOptions) -> SolveReport {
        sor::relax(&mut self.phi, &self.fixed, self.dims, opts)
    }
}

/// Marks every cell whose lower corner `c` has a fixed node within
/// `c - 1 ..= c + 2` along each axis.
fn dilate(fixed: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let mut cur = fixed.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for d in 0..3 {
        let mut next = vec![false; cur.len()];
        for (n, out) in next.iter_mut().enumerate() {
            let i = (n / strides[d]) % dims[d];
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(dims[d] - 1);
            *out = (lo..=hi).any(|m| cur[n - i * strides[d] + m * strides[d]]);
        }
        cur = next;
    }
    cur
}

/// Along every stencil line, an outer node that is fixed next to a fixed
/// inner node whose other neighbour is free gets `2 * inner - other`.
fn extrapolate_ghosts(v: &mut [[[f64; 4]; 4]; 4], f: &[[[bool; 4]; 4]; 4]) {
    fn line(get: impl Fn(usize) -> (f64, bool), mut set: impl FnMut(usize, f64)) {
        let n: [(f64, bool); 4] = [get(0), get(1), get(2), get(3)];
        if n[0].1 && n[1].1 && !n[2].1 {
            set(0, 2.0 * n[1].0 - n[2].0);
        }
        if n[3].1 && n[2].1 && !n[1].1 {
            set(3, 2.0 * n[2].0 - n[1].0);
        }
    }
    for a in 0..4 {
        for b in 0..4 {
            let (vv, ff) = (v[a][b], f[a][b]);
            line(|c| (vv[c], ff[c]), |c, x| v[a][b][c] = x);
        }
    }
    for a in 0..4 {
        for c in 0..4 {
            let snapshot: [(f64, bool); 4] = std::array::from_fn(|b| (v[a][b][c], f[a][b][c]));
            line(|b| snapshot[b], |b, x| v[a][b][c] = x);
        }
    }
    for b in 0..4 {
        for c in 0..4 {
            let snapshot: [(f64, bool); 4] = std::array::from_fn(|a| (v[a][b][c], f[a][b][c]));
            line(|a| snapshot[a], |a, x| v[a][b][c] = x);
        }
    }
}

/// Catmull-Rom weights and their derivatives for the four nodes around
/// fractional grid coordinate `x`, with mirror ghosts at both ends.
#[inline]
fn stencil(x: f64, n: usize) -> ([usize; 4], [f64; 4], [f64; 4]) {
    let c = (x.floor() as usize).min(n - 2);
    let t = x - c as f64;
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ];
    let dw = [
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    ];
    let lo = if c == 0 { 1 } else { c - 1 };
    let hi = if c + 2 >= n { n - 2 } else { c + 2 };
    ([lo, c, c + 1, hi], w, dw)
}

/// Solve with default options apart from the tolerance and the iteration cap.
pub fn solve_laplace(
    assembly: &Assembly,
    spacing: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(PotentialGrid, SolveReport)> {
    solve_laplace_with(
        assembly,
        spacing,
        &SolveOptions {
            tol,
            max_iter,
            ..SolveOptions::default()
        },
    )
}

pub fn solve_laplace_with(
    assembly: &Assembly,
    spacing: f64,
    opts: &SolveOptions,
) -> Result<(PotentialGrid, SolveReport)> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "solver tolerance must be positive, got {}",
            opts.tol
        )));
    }
    if !(opts.omega > 0.0 && opts.omega < 2.0) {
        return Err(Error::InvalidInput(format!(
            "relaxation factor must lie in (0, 2), got {}",
            opts.omega
        )));
    }
    check_resolution(assembly, spacing)?;
    solve_level(assembly, spacing, opts)
}

/// The smallest ion aperture must span at least eight nodes.
pub fn check_resolution(assembly: &Assembly, spacing: f64) -> Result<()> {
    if let Some(d) = assembly.smallest_ion_aperture() {
        let nodes = d / spacing;
        if nodes < 8.0 - 1e-9 {
            return Err(Error::UnderResolved {
                spacing,
                diameter: d,
                nodes,
            });
        }
    }
    Ok(())
}

const COARSEST_NODES: usize = 30_000;

fn solve_level(assembly: &Assembly, spacing: f64, opts: &SolveOptions) -> Result<(PotentialGrid, SolveReport)> {
    let mut grid = PotentialGrid::from_assembly(assembly, spacing)?;
    if opts.multilevel && grid.len() > COARSEST_NODES {
        let coarse_spacing = 2.0 * spacing;
        let coarse_dims = grid_dims(&assembly.domain.extent(), coarse_spacing);
        if coarse_dims.iter().all(|&n| n >= 5) {
            let (coarse, _) = solve_level(assembly, coarse_spacing, opts)?;
            for i in 0..grid.dims[0] {
                for j in 0..grid.dims[1] {
                    for k in 0..grid.dims[2] {
                        let n = grid.idx(i, j, k);
                        if !grid.fixed[n] {
                            grid.phi[n] = coarse.trilinear(&grid.node(i, j, k));
                        }
                    }
                }
            }
        }
    }
    let report = grid.relax(opts);
    Ok((grid, report))
}

/// Free-function form of [`PotentialGrid::field_at`].
pub fn field_at(grid: &PotentialGrid, p: &Vec3) -> Result<Vec3> {
    grid.field_at(p)
}

/// Free-function form of [`PotentialGrid::residual`].
pub fn residual(grid: &PotentialGrid) -> f64 {
    grid.residual()
}
