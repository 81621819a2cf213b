//! Brute-force references for the representer path: the stacked full-space
//! weak-constraint problem solved densely, literal leave-one-out, and the
//! static (3D-Var) estimator with its selection rules.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::covariance::CovarianceSpec;
use crate::error::{Error, Result};
use crate::grid::{Grid, SpaceTimeField};
use crate::observation::{ObsPoint, ObservationSet};
use crate::optimize;
use crate::param_select::{self, corner_index, curvature, geometric_grid, Method, SelectionProblem};
use crate::representer::{assemble_system, optimal_estimate};
use crate::transport::{Advection, BoundaryKind, SourceParams};

pub const DEFAULT_CAP: usize = 5000;
pub const LOO_MAX_DATA: usize = 8;

/// Weak-constraint problem over every state of the trajectory.
#[derive(Debug, Clone)]
pub struct FullSpaceProblem {
    pub adv: Advection,
    pub spec: CovarianceSpec,
    pub source: Option<SourceParams>,
    pub q_init: Vec<f64>,
    pub obs: ObservationSet,
    pub cap: usize,
}

#[derive(Debug, Clone)]
pub struct FullSpaceSolution {
    pub trajectory: SpaceTimeField,
    /// `H B H^T` with `B` the prior covariance of the trajectory.
    pub r: DMatrix<f64>,
    pub beta: DVector<f64>,
    /// Objective value at the optimum.
    pub j_hat: f64,
}

impl FullSpaceProblem {
    pub fn new(
        adv: Advection,
        spec: CovarianceSpec,
        source: Option<SourceParams>,
        q_init: Vec<f64>,
        obs: ObservationSet,
    ) -> Self {
        FullSpaceProblem {
            adv,
            spec,
            source,
            q_init,
            obs,
            cap: DEFAULT_CAP,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.adv.grid()
    }

    /// The error-free model run.
    pub fn first_guess(&self) -> Result<SpaceTimeField> {
        self.adv.solve_forward(self.source.as_ref(), None, &self.q_init)
    }

    pub fn without_datum(&self, k: usize) -> Result<Self> {
        let mut points = self.obs.points.clone();
        points.remove(k);
        let obs = ObservationSet::new(self.grid(), points, self.obs.seed)?;
        Ok(FullSpaceProblem { obs, ..self.clone() })
    }

    /// Noise weights `1 / sigma_m^2`.
    pub fn weights(&self) -> Vec<f64> {
        self.obs.points.iter().map(|p| 1.0 / (p.sigma * p.sigma)).collect()
    }
}

/// Stacked residual operator `L` (rows: initial condition when free, then one
/// block per step), its targets `c` and per-row weights, over the free states.
struct Stacked {
    l: DMatrix<f64>,
    c: DVector<f64>,
    w: DVector<f64>,
    /// First free level (1 when the initial state is held fixed).
    first: usize,
}

fn stacked(p: &FullSpaceProblem) -> Result<Stacked> {
    let g = *p.grid();
    let (nx, nt) = (g.nx, g.nt);
    let s2 = p.spec.sigma_f2();
    let ci = p.spec.ci_variance;
    if !p.spec.is_isotropic() {
        return Err(Error::param(
            "the full-space oracle covers the isotropic covariance only",
        ));
    }
    if !(s2 > 0.0) {
        return Err(Error::param("the full-space oracle needs sigma_f2 > 0"));
    }
    if p.q_init.len() != nx {
        return Err(Error::Shape {
            what: "initial state",
            expected: nx,
            got: p.q_init.len(),
        });
    }
    let first = usize::from(ci == 0.0);
    let n_unknown = (nt - first) * nx;
    if n_unknown > p.cap {
        return Err(Error::TooLarge {
            size: n_unknown,
            cap: p.cap,
        });
    }
    let a = p.adv.step_matrix()?;
    let (dt, dx) = (g.dt(), g.dx());
    let xs = g.x_centers();
    let col = |n: usize, i: usize| (n - first) * nx + i;
    let ic_rows = if first == 0 { nx } else { 0 };
    let rows = ic_rows + (nt - 1) * nx;
    let mut l = DMatrix::zeros(rows, n_unknown);
    let mut c = DVector::zeros(rows);
    let mut w = DVector::zeros(rows);
    if first == 0 {
        for i in 0..nx {
            l[(i, col(0, i))] = 1.0;
            c[i] = p.q_init[i];
            w[i] = dx / ci;
        }
    }
    let aq0 = &a * DVector::from_column_slice(&p.q_init);
    for n in 0..nt - 1 {
        let t = g.t_level(n);
        for i in 0..nx {
            let row = ic_rows + n * nx + i;
            l[(row, col(n + 1, i))] = 1.0;
            let mut target = p.source.as_ref().map_or(0.0, |s| dt * s.eval(xs[i], t));
            if n >= first {
                for j in 0..nx {
                    l[(row, col(n, j))] = -a[(i, j)];
                }
            } else {
                target += aq0[i];
            }
            c[row] = target;
            w[row] = dx / (dt * s2);
        }
    }
    Ok(Stacked { l, c, w, first })
}

/// Observation rows over the free states and the data shifted by the part of
/// each stencil on a fixed initial state.
fn observation_rows(p: &FullSpaceProblem, first: usize, n_unknown: usize) -> (DMatrix<f64>, DVector<f64>) {
    let nx = p.grid().nx;
    let m = p.obs.len();
    let mut h = DMatrix::zeros(m, n_unknown);
    let mut d = DVector::zeros(m);
    for (k, (pt, st)) in p.obs.points.iter().zip(&p.obs.stencils).enumerate() {
        d[k] = pt.d;
        for &(idx, wgt) in &st.entries {
            if idx < first * nx {
                d[k] -= wgt * p.q_init[idx];
            } else {
                h[(k, idx - first * nx)] += wgt;
            }
        }
    }
    (h, d)
}

/// Dense solve of the stacked problem through its saddle-point form
/// `[W, H^T; H, -C_eps] [q; y] = [L^T D c; d]`, rows equilibrated before LU.
pub fn full_space_solve(p: &FullSpaceProblem) -> Result<FullSpaceSolution> {
    let g = *p.grid();
    let st = stacked(p)?;
    let n = st.l.ncols();
    let m = p.obs.len();
    let (h, d) = observation_rows(p, st.first, n);
    let lw = {
        let mut lw = st.l.clone();
        for (r, w) in st.w.iter().enumerate() {
            lw.row_mut(r).scale_mut(*w);
        }
        lw
    };
    let w = st.l.transpose() * &lw;
    let b = lw.transpose() * &st.c;

    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&w);
    kkt.view_mut((0, n), (n, m)).copy_from(&h.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(&h);
    for (k, pt) in p.obs.points.iter().enumerate() {
        kkt[(n + k, n + k)] = -pt.sigma * pt.sigma;
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&b);
    rhs.rows_mut(n, m).copy_from(&d);
    for r in 0..n + m {
        let s = kkt.row(r).amax();
        if s > 0.0 {
            kkt.row_mut(r).scale_mut(1.0 / s);
            rhs[r] /= s;
        }
    }
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("singular full-space system".into()))?;
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("non-finite full-space solution".into()));
    }
    let q = sol.rows(0, n).into_owned();
    let beta = -sol.rows(n, m).into_owned();

    let mut values = Vec::with_capacity(g.len());
    if st.first == 1 {
        values.extend_from_slice(&p.q_init);
    }
    values.extend(q.iter());
    let trajectory = SpaceTimeField::from_values(g, values)?;

    let chol = Cholesky::new(w)
        .ok_or_else(|| Error::Degenerate("full-space normal matrix is not positive definite".into()))?;
    let z = chol.solve(&h.transpose());
    let r = &h * z;

    let resid = &st.l * &q - &st.c;
    let j_model: f64 = resid.iter().zip(st.w.iter()).map(|(e, w)| w * e * e).sum();
    let j_data: f64 = p
        .obs
        .points
        .iter()
        .zip(beta.iter())
        .map(|(pt, b)| pt.sigma * pt.sigma * b * b)
        .sum();
    Ok(FullSpaceSolution {
        trajectory,
        r,
        beta,
        j_hat: j_model + j_data,
    })
}

/// Literal leave-one-out: `(1/M) sum_k w_k (q_hat^[k](x_k, t_k) - d_k)^2`
/// over the data with `include[k]`, one full re-solve per datum.
pub fn loo_bruteforce(p: &FullSpaceProblem, include: Option<&[bool]>) -> Result<f64> {
    let m = p.obs.len();
    if m > LOO_MAX_DATA {
        return Err(Error::param(format!(
            "leave-one-out oracle takes at most {LOO_MAX_DATA} data, got {m}"
        )));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for k in 0..m {
        if include.is_some_and(|inc| !inc[k]) {
            continue;
        }
        let pt = p.obs.points[k];
        if pt.sigma == 0.0 {
            return Err(Error::InterpolatingDatum { index: k });
        }
        let pred = if m == 1 {
            p.obs.stencils[0].apply(p.first_guess()?.values())
        } else {
            let sub = p.without_datum(k)?;
            p.obs.stencils[k].apply(full_space_solve(&sub)?.trajectory.values())
        };
        acc += ((pred - pt.d) / pt.sigma).powi(2);
        count += 1;
    }
    if count == 0 {
        return Err(Error::param("no datum left to cross-validate"));
    }
    Ok(acc / count as f64)
}

/// Static estimate `x_b + B H^T (H B H^T + R)^-1 (d - H x_b)`.
pub fn threedvar_estimate(
    x_b: &DVector<f64>,
    b: &DMatrix<f64>,
    r_obs: &DMatrix<f64>,
    h: &DMatrix<f64>,
    d: &DVector<f64>,
) -> Result<DVector<f64>> {
    let s = h * b * h.transpose() + r_obs;
    let chol = Cholesky::new(s).ok_or_else(|| Error::Degenerate("H B H^T + R is not positive definite".into()))?;
    Ok(x_b + b * h.transpose() * chol.solve(&(d - h * x_b)))
}

/// Static problem with `B = sigma_b^2 B0`.
#[derive(Debug, Clone)]
pub struct StaticProblem {
    pub x_b: DVector<f64>,
    pub b0: DMatrix<f64>,
    pub r_obs: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl StaticProblem {
    pub fn identity_background(x_b: DVector<f64>, r_obs: DMatrix<f64>, h: DMatrix<f64>, d: DVector<f64>) -> Self {
        let n = x_b.len();
        StaticProblem {
            x_b,
            b0: DMatrix::identity(n, n),
            r_obs,
            h,
            d,
        }
    }

    pub fn n_obs(&self) -> usize {
        self.d.len()
    }

    pub fn estimate(&self, sigma_b2: f64) -> Result<DVector<f64>> {
        threedvar_estimate(&self.x_b, &(&self.b0 * sigma_b2), &self.r_obs, &self.h, &self.d)
    }

    fn influence(&self, sigma_b2: f64) -> Result<DMatrix<f64>> {
        let hbh = &self.h * &self.b0 * self.h.transpose() * sigma_b2;
        let s = &hbh + &self.r_obs;
        let chol = Cholesky::new(s).ok_or_else(|| Error::Degenerate("H B H^T + R is not positive definite".into()))?;
        // A = H B H^T S^-1, S symmetric
        Ok(chol.solve(&hbh).transpose())
    }

    /// `M |d - H x_hat|^2 / tr(I - A)^2`.
    pub fn gcv_trace(&self, sigma_b2: f64) -> Result<f64> {
        let x = self.estimate(sigma_b2)?;
        let a = self.influence(sigma_b2)?;
        let m = self.n_obs() as f64;
        let tr = m - a.trace();
        Ok(m * (&self.d - &self.h * x).norm_squared() / (tr * tr))
    }

    /// Closed-form leave-one-out `(1/M) sum_k w_k (r_k / (1 - A_kk))^2`
    /// for a diagonal observation covariance.
    pub fn loo_closed_form(&self, sigma_b2: f64) -> Result<f64> {
        let x = self.estimate(sigma_b2)?;
        let a = self.influence(sigma_b2)?;
        let r = &self.d - &self.h * x;
        let m = self.n_obs();
        Ok((0..m)
            .map(|k| (r[k] / (1.0 - a[(k, k)])).powi(2) / self.r_obs[(k, k)])
            .sum::<f64>()
            / m as f64)
    }

    /// Same quantity by re-solving without each datum.
    pub fn loo_bruteforce(&self, sigma_b2: f64) -> Result<f64> {
        let m = self.n_obs();
        if m > LOO_MAX_DATA {
            return Err(Error::param(format!(
                "leave-one-out oracle takes at most {LOO_MAX_DATA} data, got {m}"
            )));
        }
        let b = &self.b0 * sigma_b2;
        let mut acc = 0.0;
        for k in 0..m {
            let keep: Vec<usize> = (0..m).filter(|&j| j != k).collect();
            let h = self.h.select_rows(&keep);
            let r = self.r_obs.select_rows(&keep).select_columns(&keep);
            let d = self.d.select_rows(&keep);
            let x = if keep.is_empty() {
                self.x_b.clone()
            } else {
                threedvar_estimate(&self.x_b, &b, &r, &h, &d)?
            };
            let pred = self.h.row(k).dot(&x.transpose());
            acc += (pred - self.d[k]).powi(2) / self.r_obs[(k, k)];
        }
        Ok(acc / m as f64)
    }

    /// `(d - H x_b)^T (H B H^T + R)^-1 (d - H x_b)`.
    pub fn chi2(&self, sigma_b2: f64) -> Result<f64> {
        let s = &self.h * &self.b0 * self.h.transpose() * sigma_b2 + &self.r_obs;
        let chol = Cholesky::new(s).ok_or_else(|| Error::Degenerate("H B H^T + R is not positive definite".into()))?;
        let v = &self.d - &self.h * &self.x_b;
        Ok(v.dot(&chol.solve(&v)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticSelection {
    pub method: Method,
    pub sigma_b2: f64,
    pub evals: usize,
    pub flags: Vec<String>,
}

/// Applies a selection rule to the static problem over `[lo, hi]`.
pub fn threedvar_select(p: &StaticProblem, method: Method, bounds: (f64, f64)) -> Result<StaticSelection> {
    let (lo, hi) = bounds;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::param(format!("bad variance bounds [{lo}, {hi}]")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut flags = Vec::new();
    match method {
        Method::LCurve => {
            let grid = geometric_grid(lo, hi, 100);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for &s in &grid {
                let x = p.estimate(s)?;
                xs.push((&p.d - &p.h * &x).norm().ln());
                ys.push((&x - &p.x_b).norm().ln());
            }
            let s: Vec<f64> = grid.iter().map(|v| v.ln()).collect();
            let k = curvature(&xs, &ys, &s);
            let (i, fallback) = corner_index(&k).ok_or_else(|| Error::Degenerate("flat L-curve".into()))?;
            if fallback {
                flags.push("no_interior_curvature_maximum".into());
            }
            Ok(StaticSelection {
                method,
                sigma_b2: grid[i],
                evals: grid.len(),
                flags,
            })
        }
        Method::Gcv => {
            let r = optimize::golden_section(|x| p.gcv_trace(x.exp()).unwrap_or(f64::INFINITY), a, b, 1e-3, 60, 12);
            if !r.bracketed {
                flags.push("bracket_fallback".into());
            }
            Ok(StaticSelection {
                method,
                sigma_b2: r.x.exp().clamp(lo, hi),
                evals: r.evals,
                flags,
            })
        }
        Method::Chi2 => {
            let m = p.n_obs() as f64;
            let r = optimize::bisect_decreasing(|x| p.chi2(x.exp()).unwrap_or(f64::NAN), m, a, b, 1e-6 * m, 60);
            if !r.bracketed {
                flags.push(
                    if r.x == a {
                        "no_bracket_below_m"
                    } else {
                        "no_bracket_above_m"
                    }
                    .into(),
                );
            }
            let sigma_b2 = if r.x == a {
                lo
            } else if r.x == b {
                hi
            } else {
                r.x.exp()
            };
            Ok(StaticSelection {
                method,
                sigma_b2,
                evals: r.evals,
                flags,
            })
        }
    }
}

/// Small randomized instances inside the oracle's reach: `nx <= 25`,
/// `nt <= 20`, `M <= 8`, isotropic variances 0.1, 1 and 10.
pub fn tiny_suite(seed: u64) -> Result<Vec<FullSpaceProblem>> {
    // (nx, nt, u, bc, sigma_f2, M, ci, two sources)
    let cases = [
        (12, 20, 1.0, BoundaryKind::Periodic, 0.1, 5, 0.0, false),
        (20, 15, 0.5, BoundaryKind::Periodic, 1.0, 5, 0.0, false),
        (25, 20, 0.5, BoundaryKind::NoFlux, 10.0, 8, 0.0, true),
        (10, 18, 1.0, BoundaryKind::NoFlux, 1.0, 6, 0.5, true),
        (16, 20, 0.8, BoundaryKind::Periodic, 10.0, 8, 2.0, false),
        (14, 20, 1.0, BoundaryKind::Periodic, 0.1, 7, 0.0, true),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases
        .iter()
        .map(|&(nx, nt, u, bc, s2, m, ci, two)| {
            let g = Grid::new(30.0, 45.0, 0.0, 20.0, nx, nt)?;
            let adv = Advection::new(g, u, bc)?;
            let source = SourceParams {
                s0: 100.0,
                k0: 0.5,
                alpha0: 10.0,
                x0: 33.0,
                s1: if two { 50.0 } else { 0.0 },
                k1: if two { 0.25 } else { 0.0 },
                alpha1: if two { 5.0 } else { 0.0 },
                x1: 40.0,
            };
            let truth_src = SourceParams {
                k0: 0.5 + rng.random_range(-0.2..0.2),
                alpha0: 10.0 + rng.random_range(-1.0..1.0),
                ..source
            };
            let q_init: Vec<f64> = (0..nx).map(|_| rng.random_range(0.0..2.0)).collect();
            let truth = adv.solve_forward(Some(&truth_src), None, &q_init)?;
            let points: Vec<ObsPoint> = (0..m)
                .map(|_| {
                    let x = rng.random_range(g.x_min..g.x_max);
                    let t = rng.random_range(g.t_min..g.t_max);
                    let sigma = rng.random_range(0.2..1.0);
                    ObsPoint { x, t, d: 0.0, sigma }
                })
                .collect();
            let mut obs = ObservationSet::new(&g, points, seed)?;
            let clean = obs.apply(&truth);
            for (p, v) in obs.points.iter_mut().zip(clean) {
                p.d = v + p.sigma * rng.random_range(-1.0..1.0);
            }
            let spec = CovarianceSpec::isotropic(s2).with_ci(ci);
            Ok(FullSpaceProblem::new(adv, spec, Some(source), q_init, obs))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub error: f64,
    pub tolerance: f64,
}

fn check(name: impl Into<String>, error: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        passed: error <= tolerance,
        error,
        tolerance,
    }
}

fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Runs the representer path against the oracles on every instance.
pub fn validate_suite(suite: &[FullSpaceProblem]) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (i, p) in suite.iter().enumerate() {
        let q_f = p.first_guess()?;
        let sys = assemble_system(&p.adv, &p.spec, &p.obs, &q_f)?;
        let q_hat = optimal_estimate(&sys)?;
        let oracle = full_space_solve(p)?;
        out.push(check(
            format!("case {i}: estimate at data vs full-space solve"),
            rel_inf(&p.obs.apply(&q_hat), &p.obs.apply(&oracle.trajectory)),
            1e-8,
        ));
        out.push(check(
            format!("case {i}: representer matrix vs full-space H B H^T"),
            rel_inf(sys.r().as_slice(), oracle.r.as_slice()),
            1e-8,
        ));
        let pen = sys.penalties();
        out.push(check(
            format!("case {i}: J_data + J_mod = h^T P^-1 h"),
            ((pen.data + pen.model - pen.total) / pen.total).abs(),
            1e-10,
        ));
        out.push(check(
            format!("case {i}: minimum value vs full-space objective"),
            ((pen.total - oracle.j_hat) / oracle.j_hat).abs(),
            1e-8,
        ));
        let sel = SelectionProblem::new(&p.adv, &p.obs, &q_f, p.spec)?;
        let g = param_select::gcv_eval(&sel, &p.spec)?;
        let loo = loo_bruteforce(p, None)?;
        out.push(check(
            format!("case {i}: GCV vs literal leave-one-out"),
            ((g - loo) / loo).abs(),
            1e-8,
        ));
        out.push(check(
            format!("case {i}: transpose duality"),
            duality_error(&p.adv, seed_of(i))?,
            1e-12,
        ));
    }
    Ok(out)
}

fn seed_of(i: usize) -> u64 {
    0x5eed ^ i as u64
}

/// `|<G(f, q0), v> - <(f, q0), G^T v>|` over `||G(f, q0)|| ||v||`, for random arguments.
pub fn duality_error(adv: &Advection, seed: u64) -> Result<f64> {
    let g = *adv.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = SpaceTimeField::from_fn(g, |_, _| rng.random_range(-1.0..1.0));
    let q0: Vec<f64> = (0..g.nx).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = SpaceTimeField::from_fn(g, |_, _| rng.random_range(-1.0..1.0));
    let q = adv.solve_forward(None, Some(&f), &q0)?;
    let adj = adv.transpose_solve(&v)?;
    let lhs = q.dot(&v);
    // `initial` carries a factor dt, see transpose_solve
    let init: Vec<f64> = adj.initial.iter().map(|b| b / g.dt()).collect();
    let rhs = f.dot(&adj.field) + q0.iter().zip(&init).map(|(a, b)| a * b).sum::<f64>();
    // Cauchy-Schwarz bound: random arguments make |lhs| about sqrt(N) smaller
    // than the summed terms, so dividing by |lhs| would measure cancellation.
    let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let bound = q.norm() * v.norm();
    let bound_t =
        (f.norm().powi(2) + norm(&q0).powi(2)).sqrt() * (adj.field.norm().powi(2) + norm(&init).powi(2)).sqrt();
    let scale = bound.max(bound_t).max(f64::MIN_POSITIVE);
    Ok((lhs - rhs).abs() / scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> Vec<FullSpaceProblem> {
        tiny_suite(seed).unwrap()
    }

    #[test]
    fn exact_prior_data_recovered() {
        let mut p = tiny(1).remove(0);
        let q_f = p.first_guess().unwrap();
        let d = p.obs.apply(&q_f);
        for (pt, v) in p.obs.points.iter_mut().zip(d) {
            pt.d = v;
            pt.sigma = 0.0;
        }
        let s = full_space_solve(&p).unwrap();
        let err = s
            .trajectory
            .values()
            .iter()
            .zip(q_f.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn hard_constraint_limit() {
        let mut p = tiny(2).remove(1);
        p.spec = CovarianceSpec::isotropic(1e-12);
        let s = full_space_solve(&p).unwrap();
        let q_f = p.first_guess().unwrap();
        let err = s
            .trajectory
            .values()
            .iter()
            .zip(q_f.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn suite_agrees() {
        for c in validate_suite(&tiny(3)).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn size_cap_enforced() {
        let mut p = tiny(4).remove(0);
        p.cap = 10;
        assert!(matches!(full_space_solve(&p), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn single_datum_loo_is_prior_error() {
        let p = tiny(5).remove(0);
        let mut one = p.clone();
        one.obs = ObservationSet::new(p.grid(), vec![p.obs.points[0]], 0).unwrap();
        let q_f = p.first_guess().unwrap();
        let pt = p.obs.points[0];
        let want = ((p.obs.stencils[0].apply(q_f.values()) - pt.d) / pt.sigma).powi(2);
        assert!((loo_bruteforce(&one, None).unwrap() - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn loo_permutation_invariant() {
        let p = tiny(6).remove(1);
        let mut q = p.clone();
        let mut pts = p.obs.points.clone();
        pts.reverse();
        q.obs = ObservationSet::new(p.grid(), pts, 0).unwrap();
        let (a, b) = (loo_bruteforce(&p, None).unwrap(), loo_bruteforce(&q, None).unwrap());
        assert!((a - b).abs() <= 1e-10 * a);
    }

    fn random_static(
        seed: u64,
        n: usize,
        m: usize,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
        let r = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0)));
        let h = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let d = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        (x_b, b, r, h, d)
    }

    #[test]
    fn threedvar_matches_normal_equations() {
        let (x_b, b, r, h, d) = random_static(7, 6, 4);
        let x = threedvar_estimate(&x_b, &b, &r, &h, &d).unwrap();
        let bi = b.clone().try_inverse().unwrap();
        let ri = r.clone().try_inverse().unwrap();
        let lhs = &bi + h.transpose() * &ri * &h;
        let rhs = &bi * &x_b + h.transpose() * &ri * &d;
        let direct = lhs.lu().solve(&rhs).unwrap();
        assert!((&x - &direct).amax() < 1e-10);
        let grad = |z: &DVector<f64>| &bi * (z - &x_b) - h.transpose() * &ri * (&d - &h * z);
        assert!(grad(&x).norm() <= 1e-8 * grad(&x_b).norm());
    }

    #[test]
    fn threedvar_limits() {
        let (x_b, b, r, h, _) = random_static(8, 6, 4);
        let d = &h * &x_b;
        assert!((threedvar_estimate(&x_b, &b, &r, &h, &d).unwrap() - &x_b).amax() < 1e-12);
        let (x_b, _, r, h, d) = random_static(9, 6, 4);
        let tiny_b = DMatrix::identity(6, 6) * 1e-12;
        assert!((threedvar_estimate(&x_b, &tiny_b, &r, &h, &d).unwrap() - &x_b).amax() < 1e-10);
    }

    #[test]
    fn static_loo_identity() {
        let (x_b, _, r, h, d) = random_static(10, 6, 5);
        let p = StaticProblem::identity_background(x_b, r, h, d);
        for s in [0.01, 0.3, 4.0] {
            let (a, b) = (p.loo_closed_form(s).unwrap(), p.loo_bruteforce(s).unwrap());
            assert!((a - b).abs() <= 1e-8 * b, "{a} {b}");
        }
    }

    #[test]
    fn static_chi2_calibration() {
        let (n, m, sb2, r2) = (300usize, 200usize, 4.0f64, 0.25f64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = rand_distr::StandardNormal;
        let x_b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let truth = DVector::from_fn(n, |i, _| x_b[i] + sb2.sqrt() * rng.sample::<f64, _>(normal));
        let mut h = DMatrix::zeros(m, n);
        for k in 0..m {
            h[(k, (k * 3) / 2)] = 1.0;
        }
        let d = &h * &truth + DVector::from_fn(m, |_, _| r2.sqrt() * rng.sample::<f64, _>(normal));
        let p = StaticProblem::identity_background(x_b, DMatrix::identity(m, m) * r2, h, d);
        let s = threedvar_select(&p, Method::Chi2, (1e-4, 1e3)).unwrap();
        assert!(s.flags.is_empty());
        assert!((s.sigma_b2 / sb2 - 1.0).abs() < 0.2, "{s:?}");
        for method in [Method::Gcv, Method::LCurve] {
            let s = threedvar_select(&p, method, (1e-4, 1e3)).unwrap();
            assert!(s.sigma_b2 >= 1e-4 && s.sigma_b2 <= 1e3);
        }
    }

    #[test]
    fn static_noiseless_chi2_flagged() {
        let (x_b, _, r, h, _) = random_static(12, 6, 4);
        let d = &h * &x_b;
        let p = StaticProblem::identity_background(x_b, r, h, d);
        let s = threedvar_select(&p, Method::Chi2, (1e-4, 1e2)).unwrap();
        assert_eq!(s.flags, vec!["no_bracket_below_m".to_string()]);
    }
}
