//! Red-black successive over-relaxation with mirror (Neumann) box faces.

use super::{SolveOptions, SolveReport};

#[inline]
fn mirror_lo(i: usize) -> usize {
    if i > 0 {
        i - 1
    } else {
        1
    }
}

#[inline]
fn mirror_hi(i: usize, n: usize) -> usize {
    if i + 1 < n {
        i + 1
    } else {
        n - 2
    }
}

/// Visit every row `(i, j)` with the base offsets of the row and its four
/// lateral neighbours.
#[inline]
fn for_rows(dims: [usize; 3], mut f: impl FnMut(usize, usize, [usize; 5])) {
    let [nx, ny, nz] = dims;
    for i in 0..nx {
        let (im, ip) = (mirror_lo(i), mirror_hi(i, nx));
        for j in 0..ny {
            let (jm, jp) = (mirror_lo(j), mirror_hi(j, ny));
            let rows = [
                (i * ny + j) * nz,
                (im * ny + j) * nz,
                (ip * ny + j) * nz,
                (i * ny + jm) * nz,
                (i * ny + jp) * nz,
            ];
            f(i, j, rows);
        }
    }
}

#[inline]
fn neighbour_mean(phi: &[f64], rows: &[usize; 5], k: usize, nz: usize) -> f64 {
    let km = mirror_lo(k);
    let kp = mirror_hi(k, nz);
    let b = rows[0];
    (phi[rows[1] + k] + phi[rows[2] + k] + phi[rows[3] + k] + phi[rows[4] + k] + phi[b + km] + phi[b + kp]) / 6.0
}

pub(crate) fn sweep(phi: &mut [f64], fixed: &[bool], dims: [usize; 3], color: usize, omega: f64) {
    let nz = dims[2];
    for_rows(dims, |i, j, rows| {
        let mut k = (color + i + j) % 2;
        while k < nz {
            let n = rows[0] + k;
            if !fixed[n] {
                let avg = neighbour_mean(phi, &rows, k, nz);
                phi[n] += omega * (avg - phi[n]);
            }
            k += 2;
        }
    });
}

pub(crate) fn residual(phi: &[f64], fixed: &[bool], dims: [usize; 3]) -> f64 {
    let nz = dims[2];
    let mut worst = 0.0f64;
    for_rows(dims, |_, _, rows| {
        for k in 0..nz {
            if !fixed[rows[0] + k] {
                let r = (neighbour_mean(phi, &rows, k, nz) - phi[rows[0] + k]).abs();
                worst = worst.max(r);
            }
        }
    });
    worst
}

pub(crate) fn relax(phi: &mut [f64], fixed: &[bool], dims: [usize; 3], opts: &SolveOptions) -> SolveReport {
    let check_every = opts.check_every.max(1);
    let mut res = residual(phi, fixed, dims);
    let mut iterations = 0;
    while res > opts.tol && iterations < opts.max_iter {
        sweep(phi, fixed, dims, 0, opts.omega);
        sweep(phi, fixed, dims, 1, opts.omega);
        iterations += 1;
        if iterations % check_every == 0 || iterations == opts.max_iter {
            res = residual(phi, fixed, dims);
        }
    }
    SolveReport {
        iterations,
        final_residual: res,
        converged: res <= opts.tol,
    }
}
