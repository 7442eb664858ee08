//! Discrete check of the model's factorization
//! `p(x,z,a,y) = p(y|a,z) p(a|z) p(z) p(x|z)`.
//!
//! On a joint table built from those factors, the attribute-conditioned
//! decomposition `log p(x,z,a,y) = log p(y|a,z) + log p(x,z) + log p(a|z)`
//! holds on every nonzero cell, with every term computed from marginals
//! of the table itself. Reading the first term instead as the full Bayes
//! conditional `p(x,z,y|a)` only works when `a` is independent of `z`; that
//! mismatch is reported separately.

use crate::error::{ensure, Result};
use crate::numkit::Rng;

/// Joint probabilities over `(x, z, a, y)`, stored with `y` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyJointTable {
    pub nx: usize,
    pub nz: usize,
    pub na: usize,
    pub ny: usize,
    pub p: Vec<f64>,
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn random_dist(n: usize, rng: &mut Rng) -> Vec<f64> {
    normalized((0..n).map(|_| 0.05 + rng.uniform()).collect())
}

impl ToyJointTable {
    pub fn index(&self, x: usize, z: usize, a: usize, y: usize) -> usize {
        ((x * self.nz + z) * self.na + a) * self.ny + y
    }

    pub fn get(&self, x: usize, z: usize, a: usize, y: usize) -> f64 {
        self.p[self.index(x, z, a, y)]
    }

    /// Product of the four factors. `p_x_z[z][x]`, `p_a_z[z][a]`,
    /// `p_y_az[a][z][y]`.
    pub fn from_factors(
        p_z: &[f64],
        p_x_z: &[Vec<f64>],
        p_a_z: &[Vec<f64>],
        p_y_az: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let nz = p_z.len();
        ensure!(
            nz > 0 && p_x_z.len() == nz && p_a_z.len() == nz,
            "factor tables disagree on |z|"
        );
        let nx = p_x_z[0].len();
        let na = p_a_z[0].len();
        ensure!(
            p_y_az.len() == na && p_y_az.iter().all(|r| r.len() == nz),
            "p(y|a,z) has the wrong shape"
        );
        let ny = p_y_az[0][0].len();
        let mut t = Self {
            nx,
            nz,
            na,
            ny,
            p: vec![0.0; nx * nz * na * ny],
        };
        for x in 0..nx {
            for z in 0..nz {
                for a in 0..na {
                    for y in 0..ny {
                        let i = t.index(x, z, a, y);
                        t.p[i] = p_y_az[a][z][y] * p_a_z[z][a] * p_z[z] * p_x_z[z][x];
                    }
                }
            }
        }
        Ok(t)
    }

    /// Every factor uniform.
    pub fn uniform(nx: usize, nz: usize, na: usize, ny: usize) -> Self {
        let n = nx * nz * na * ny;
        Self {
            nx,
            nz,
            na,
            ny,
            p: vec![1.0 / n as f64; n],
        }
    }

    /// Random factors of the model structure.
    pub fn random_factored(nx: usize, nz: usize, na: usize, ny: usize, rng: &mut Rng) -> Self {
        let p_z = random_dist(nz, rng);
        let p_x_z: Vec<_> = (0..nz).map(|_| random_dist(nx, rng)).collect();
        let p_a_z: Vec<_> = (0..nz).map(|_| random_dist(na, rng)).collect();
        let p_y_az: Vec<Vec<_>> = (0..na)
            .map(|_| (0..nz).map(|_| random_dist(ny, rng)).collect())
            .collect();
        Self::from_factors(&p_z, &p_x_z, &p_a_z, &p_y_az).expect("shapes are consistent")
    }

    /// Like [`random_factored`](Self::random_factored) but `y` also depends
    /// on `x`, so `y` is not independent of `x` given `(a, z)`.
    pub fn label_depends_on_data(
        nx: usize,
        nz: usize,
        na: usize,
        ny: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut t = Self::random_factored(nx, nz, na, ny, rng);
        for x in 0..nx {
            for z in 0..nz {
                for a in 0..na {
                    let tilt: Vec<f64> = (0..ny)
                        .map(|y| if y == x % ny { 4.0 } else { 1.0 })
                        .collect();
                    let mass: f64 = (0..ny).map(|y| t.get(x, z, a, y)).sum();
                    let raw: Vec<f64> = (0..ny).map(|y| t.get(x, z, a, y) * tilt[y]).collect();
                    let s: f64 = raw.iter().sum();
                    for y in 0..ny {
                        let i = t.index(x, z, a, y);
                        t.p[i] = mass * raw[y] / s;
                    }
                }
            }
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.p.len() == self.nx * self.nz * self.na * self.ny,
            "table size does not match its domains"
        );
        ensure!(
            self.p.iter().all(|v| *v >= 0.0 && v.is_finite()),
            "table has negative or non-finite entries"
        );
        let s: f64 = self.p.iter().sum();
        ensure!((s - 1.0).abs() < 1e-9, "table sums to {s}, not 1");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorizationReport {
    /// Largest `|log p(x,z,a,y) − [log p(y|a,z) + log p(x,z) + log p(a|z)]|`.
    pub max_abs_error: f64,
    /// Same with `log p(x,z,y|a)` in place of `log p(y|a,z) + log p(x,z)`.
    pub literal_max_abs_error: f64,
    pub cells_checked: usize,
    pub holds: bool,
}

pub const FACTORIZATION_TOL: f64 = 1e-12;

pub fn check_factorization(t: &ToyJointTable) -> Result<FactorizationReport> {
    t.validate()?;
    let (nx, nz, na, ny) = (t.nx, t.nz, t.na, t.ny);
    let mut p_z = vec![0.0; nz];
    let mut p_a = vec![0.0; na];
    let mut p_xz = vec![0.0; nx * nz];
    let mut p_az = vec![0.0; na * nz];
    let mut p_azy = vec![0.0; na * nz * ny];
    for x in 0..nx {
        for z in 0..nz {
            for a in 0..na {
                for y in 0..ny {
                    let v = t.get(x, z, a, y);
                    p_z[z] += v;
                    p_a[a] += v;
                    p_xz[x * nz + z] += v;
                    p_az[a * nz + z] += v;
                    p_azy[(a * nz + z) * ny + y] += v;
                }
            }
        }
    }
    let (mut worst, mut worst_literal, mut cells) = (0.0f64, 0.0f64, 0);
    for x in 0..nx {
        for z in 0..nz {
            for a in 0..na {
                for y in 0..ny {
                    let v = t.get(x, z, a, y);
                    if v <= 0.0 {
                        continue;
                    }
                    cells += 1;
                    let lhs = v.ln();
                    let y_az = p_azy[(a * nz + z) * ny + y] / p_az[a * nz + z];
                    let a_z = p_az[a * nz + z] / p_z[z];
                    let rhs = y_az.ln() + p_xz[x * nz + z].ln() + a_z.ln();
                    worst = worst.max((lhs - rhs).abs());
                    let literal = (v / p_a[a]).ln() + a_z.ln();
                    worst_literal = worst_literal.max((lhs - literal).abs());
                }
            }
        }
    }
    Ok(FactorizationReport {
        max_abs_error: worst,
        literal_max_abs_error: worst_literal,
        cells_checked: cells,
        holds: worst <= FACTORIZATION_TOL,
    })
}
