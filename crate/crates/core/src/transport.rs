//! One-dimensional advection with an emission source: first-order upwind
//! finite volumes with forward Euler stepping, and the exact transpose of
//! that discrete update used for backward (adjoint) solves.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, SpaceTimeField};

/// Largest `nx * nx` for which [`Advection::step_matrix`] will materialize A.
pub const MAX_STEP_MATRIX_ENTRIES: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Periodic,
    /// Zero-gradient ghost cells at both walls.
    NoFlux,
}

/// Two decaying Gaussian emitters:
/// `Q(x,t) = s0 exp(-alpha0 (x-x0)^2 - k0 t) + s1 exp(-alpha1 (x-x1)^2 - k1 t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceParams {
    pub s0: f64,
    pub s1: f64,
    pub x0: f64,
    pub x1: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub k0: f64,
    pub k1: f64,
}

impl SourceParams {
    pub const ZERO: SourceParams = SourceParams {
        s0: 0.0,
        s1: 0.0,
        x0: 0.0,
        x1: 0.0,
        alpha0: 0.0,
        alpha1: 0.0,
        k0: 0.0,
        k1: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let rates = [self.alpha0, self.alpha1, self.k0, self.k1];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::param(format!(
                "source decay rates must be finite and >= 0, got {rates:?}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        let mut q = 0.0;
        if self.s0 != 0.0 {
            q += self.s0 * (-self.alpha0 * (x - self.x0).powi(2) - self.k0 * t).exp();
        }
        if self.s1 != 0.0 {
            q += self.s1 * (-self.alpha1 * (x - self.x1).powi(2) - self.k1 * t).exp();
        }
        q
    }
}

/// Evaluates the source at `(x, t)`.
pub fn source_eval(p: &SourceParams, x: f64, t: f64) -> f64 {
    p.eval(x, t)
}

/// Backward solution of the transposed discrete model.
#[derive(Debug, Clone)]
pub struct AdjointField {
    /// Sensitivity to the forcing applied at each level; zero on the last level.
    pub field: SpaceTimeField,
    /// Sensitivity to the initial state, scaled by `dt` so it is comparable to
    /// `field.level(0)`. The exact transpose of the `q_init` map is `initial / dt`.
    pub initial: Vec<f64>,
}

/// Point impulse `amplitude * delta(x - x_m) delta(t - t_m)` for the adjoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Impulse {
    pub x: f64,
    pub t: f64,
    pub amplitude: f64,
}

/// Constant-wind upwind transport on a fixed grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Advection {
    grid: Grid,
    u: f64,
    bc: BoundaryKind,
    // Per-row update `next[i] = w_self q[i] + w_nb q[nb(i)]`.
    w_self: f64,
    w_nb: f64,
}

impl Advection {
    pub fn new(grid: Grid, u: f64, bc: BoundaryKind) -> Result<Self> {
        grid.validate()?;
        if !u.is_finite() {
            return Err(Error::param("wind speed must be finite"));
        }
        grid.check_cfl(u)?;
        let c = grid.courant(u);
        Ok(Advection {
            grid,
            u,
            bc,
            w_self: 1.0 - c,
            w_nb: c,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn wind(&self) -> f64 {
        self.u
    }

    pub fn boundary(&self) -> BoundaryKind {
        self.bc
    }

    /// Upstream neighbour of cell `i`.
    #[inline]
    fn upstream(&self, i: usize) -> usize {
        let nx = self.grid.nx;
        if self.u >= 0.0 {
            match (i, self.bc) {
                (0, BoundaryKind::Periodic) => nx - 1,
                (0, BoundaryKind::NoFlux) => 0,
                _ => i - 1,
            }
        } else {
            match (i + 1 == nx, self.bc) {
                (true, BoundaryKind::Periodic) => 0,
                (true, BoundaryKind::NoFlux) => nx - 1,
                _ => i + 1,
            }
        }
    }

    /// `next = A prev`.
    pub fn step(&self, prev: &[f64], next: &mut [f64]) {
        for (i, out) in next.iter_mut().enumerate() {
            *out = self.w_self * prev[i] + self.w_nb * prev[self.upstream(i)];
        }
    }

    /// `out = A^T y`.
    pub fn step_transpose(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            out[i] += self.w_self * yi;
            out[self.upstream(i)] += self.w_nb * yi;
        }
    }

    /// Dense one-step matrix `A` with `q^{n+1} = A q^n + dt (Q^n + f^n)`.
    pub fn step_matrix(&self) -> Result<DMatrix<f64>> {
        let nx = self.grid.nx;
        if nx * nx > MAX_STEP_MATRIX_ENTRIES {
            return Err(Error::TooLarge {
                size: nx * nx,
                cap: MAX_STEP_MATRIX_ENTRIES,
            });
        }
        let mut a = DMatrix::zeros(nx, nx);
        for i in 0..nx {
            a[(i, i)] += self.w_self;
            a[(i, self.upstream(i))] += self.w_nb;
        }
        Ok(a)
    }

    /// Forward Euler march from `q_init`, driven by the source and an optional
    /// extra forcing field (the covariance-weighted adjoint in representer solves).
    /// The forcing on the final level never enters the solution.
    pub fn solve_forward(
        &self,
        source: Option<&SourceParams>,
        forcing: Option<&SpaceTimeField>,
        q_init: &[f64],
    ) -> Result<SpaceTimeField> {
        let g = self.grid;
        if q_init.len() != g.nx {
            return Err(Error::Shape {
                what: "initial state",
                expected: g.nx,
                got: q_init.len(),
            });
        }
        if let Some(f) = forcing {
            if *f.grid() != g {
                return Err(Error::Shape {
                    what: "forcing grid",
                    expected: g.len(),
                    got: f.grid().len(),
                });
            }
        }
        if let Some(s) = source {
            s.validate()?;
        }

        let dt = g.dt();
        let xs = g.x_centers();
        let mut out = SpaceTimeField::zeros(g);
        out.level_mut(0).copy_from_slice(q_init);
        let mut next = vec![0.0; g.nx];
        for n in 0..g.nt - 1 {
            self.step(out.level(n), &mut next);
            if let Some(s) = source {
                let t = g.t_level(n);
                for (v, &x) in next.iter_mut().zip(&xs) {
                    *v += dt * s.eval(x, t);
                }
            }
            if let Some(f) = forcing {
                for (v, fv) in next.iter_mut().zip(f.level(n)) {
                    *v += dt * fv;
                }
            }
            out.level_mut(n + 1).copy_from_slice(&next);
        }
        Ok(out)
    }

    /// Applies the exact transpose of the forward map `(forcing, q_init) -> q`
    /// to an arbitrary space-time weight field `v`, marching backward from a
    /// zero terminal state.
    pub fn transpose_solve(&self, v: &SpaceTimeField) -> Result<AdjointField> {
        let g = self.grid;
        if *v.grid() != g {
            return Err(Error::Shape {
                what: "adjoint load grid",
                expected: g.len(),
                got: v.grid().len(),
            });
        }
        let dt = g.dt();
        let mut field = SpaceTimeField::zeros(g);
        let mut mu = v.level(g.nt - 1).to_vec();
        let mut tmp = vec![0.0; g.nx];
        for n in (0..g.nt - 1).rev() {
            for (a, m) in field.level_mut(n).iter_mut().zip(&mu) {
                *a = dt * m;
            }
            self.step_transpose(&mu, &mut tmp);
            for ((m, t), vv) in mu.iter_mut().zip(&tmp).zip(v.level(n)) {
                *m = t + vv;
            }
        }
        let initial = mu.into_iter().map(|m| dt * m).collect();
        Ok(AdjointField { field, initial })
    }

    /// Backward solve driven by point impulses, each deposited with the
    /// bilinear observation stencil and scaled by `1 / (dx dt)`.
    pub fn solve_adjoint(&self, impulses: &[Impulse]) -> Result<AdjointField> {
        let g = self.grid;
        let scale = 1.0 / (g.dx() * g.dt());
        let mut load = SpaceTimeField::zeros(g);
        for imp in impulses {
            let stencil = g.stencil(imp.x, imp.t)?;
            stencil.deposit(load.values_mut(), imp.amplitude * scale);
        }
        self.transpose_solve(&load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn periodic(nx: usize, nt: usize, u: f64) -> Advection {
        let g = Grid::new(30.0, 45.0, 0.0, 20.0, nx, nt).unwrap();
        Advection::new(g, u, BoundaryKind::Periodic).unwrap()
    }

    fn reference_source() -> SourceParams {
        SourceParams {
            s0: 100.0,
            k0: 0.5,
            alpha0: 10.0,
            x0: 33.0,
            ..SourceParams::ZERO
        }
    }

    #[test]
    fn source_values() {
        let p = reference_source();
        assert_eq!(source_eval(&p, 33.0, 0.0), 100.0);
        assert!((source_eval(&p, 33.0, 2.0) - 100.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((source_eval(&p, 33.0, 2.0) - 36.7879).abs() < 1e-4);
        assert_eq!(source_eval(&SourceParams::ZERO, 31.0, 4.0), 0.0);
    }

    #[test]
    fn negative_rates_rejected() {
        let p = SourceParams {
            k1: -0.1,
            ..reference_source()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn cfl_is_enforced() {
        let g = Grid::new(0.0, 1.0, 0.0, 1.0, 100, 11).unwrap();
        assert!(matches!(
            Advection::new(g, 1.0, BoundaryKind::Periodic),
            Err(Error::Cfl { .. })
        ));
        assert!(Advection::new(g, 0.05, BoundaryKind::Periodic).is_ok());
    }

    #[test]
    fn zero_dynamics() {
        let m = periodic(20, 30, 1.0);
        let q = m.solve_forward(None, None, &[0.0; 20]).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_preserved() {
        for bc in [BoundaryKind::Periodic, BoundaryKind::NoFlux] {
            let g = Grid::new(30.0, 45.0, 0.0, 20.0, 25, 40).unwrap();
            let m = Advection::new(g, 1.0, bc).unwrap();
            let q = m.solve_forward(None, None, &[3.5; 25]).unwrap();
            assert!(q.values().iter().all(|&v| (v - 3.5).abs() < 1e-13));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = periodic(20, 30, 1.0);
        assert!(m.solve_forward(None, None, &[0.0; 19]).is_err());
        let other = Grid::new(30.0, 45.0, 0.0, 20.0, 20, 31).unwrap();
        let f = SpaceTimeField::zeros(other);
        assert!(m.solve_forward(None, Some(&f), &[0.0; 20]).is_err());
    }

    #[test]
    fn step_matrix_identity_without_wind() {
        let m = periodic(7, 5, 0.0);
        let a = m.step_matrix().unwrap();
        assert_eq!(a, DMatrix::identity(7, 7));
    }

    #[test]
    fn step_matrix_three_cells() {
        // dx = 5, dt = 2.5 => courant 0.5
        let g = Grid::new(30.0, 45.0, 0.0, 20.0, 3, 9).unwrap();
        let m = Advection::new(g, 1.0, BoundaryKind::Periodic).unwrap();
        let a = m.step_matrix().unwrap();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(3, 3, &[
            0.5, 0.0, 0.5,
            0.5, 0.5, 0.0,
            0.0, 0.5, 0.5,
        ]);
        assert_eq!(a, expected);
    }

    #[test]
    fn step_matrix_matches_one_step() {
        for bc in [BoundaryKind::Periodic, BoundaryKind::NoFlux] {
            for u in [1.0, -0.7] {
                let g = Grid::new(30.0, 45.0, 0.0, 1.0, 9, 2).unwrap();
                let m = Advection::new(g, u, bc).unwrap();
                let a = m.step_matrix().unwrap();
                for k in 0..9 {
                    let mut e = vec![0.0; 9];
                    e[k] = 1.0;
                    let q = m.solve_forward(None, None, &e).unwrap();
                    for i in 0..9 {
                        assert_eq!(q.at(1, i), a[(i, k)]);
                    }
                }
                for i in 0..9 {
                    let row: f64 = a.row(i).iter().sum();
                    assert!((row - 1.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn adjoint_of_nothing_is_zero() {
        let m = periodic(12, 20, 1.0);
        let adj = m.solve_adjoint(&[]).unwrap();
        assert!(adj.field.values().iter().all(|&v| v == 0.0));
        assert!(adj.initial.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_is_causal() {
        let m = periodic(20, 30, 1.0);
        let g = *m.grid();
        let tm = 7.3;
        let adj = m
            .solve_adjoint(&[Impulse {
                x: 36.2,
                t: tm,
                amplitude: 1.0,
            }])
            .unwrap();
        for n in 0..g.nt {
            let any = adj.field.level(n).iter().any(|&v| v != 0.0);
            if g.t_level(n) > tm {
                assert!(!any, "nonzero adjoint after impulse at level {n}");
            }
        }
        assert!(adj.field.level(0).iter().any(|&v| v != 0.0));
        assert!(adj.field.level(g.nt - 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_outside_domain_rejected() {
        let m = periodic(12, 20, 1.0);
        let bad = Impulse {
            x: 46.0,
            t: 1.0,
            amplitude: 1.0,
        };
        assert!(matches!(m.solve_adjoint(&[bad]), Err(Error::OutsideDomain { .. })));
    }

    #[test]
    fn transpose_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bc in [BoundaryKind::Periodic, BoundaryKind::NoFlux] {
            for u in [1.0, -0.4] {
                let g = Grid::new(30.0, 45.0, 0.0, 20.0, 17, 41).unwrap();
                let m = Advection::new(g, u, bc).unwrap();
                for _ in 0..10 {
                    let f = SpaceTimeField::from_fn(g, |_, _| rng.random_range(-1.0..1.0));
                    let q0: Vec<f64> = (0..g.nx).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let v = SpaceTimeField::from_fn(g, |_, _| rng.random_range(-1.0..1.0));
                    let q = m.solve_forward(None, Some(&f), &q0).unwrap();
                    let adj = m.transpose_solve(&v).unwrap();
                    let lhs = q.dot(&v);
                    let init: f64 = q0.iter().zip(&adj.initial).map(|(a, b)| a * b).sum();
                    let rhs = f.dot(&adj.field) + init / g.dt();
                    assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn periodic_mass_conservation() {
        let m = periodic(40, 60, 1.0);
        let g = *m.grid();
        let q0: Vec<f64> = g.x_centers().iter().map(|x| (-(x - 35.0).powi(2)).exp()).collect();
        let q = m.solve_forward(None, None, &q0).unwrap();
        let m0: f64 = q.level(0).iter().sum();
        for n in 0..g.nt {
            let mass: f64 = q.level(n).iter().sum();
            assert!((mass - m0).abs() <= 1e-12 * m0);
        }
    }
}
