//! Small derivative-free optimizers used by the hyperparameter searches.
//! Objective failures are passed in as NaN or infinity and treated as +inf.

use rayon::prelude::*;
use serde::Serialize;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

fn clean(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarMin {
    pub x: f64,
    pub f: f64,
    pub evals: usize,
    /// False when the initial four samples did not bracket an interior
    /// minimum and the coarse-grid fallback was used.
    pub bracketed: bool,
    pub hit_cap: bool,
}

/// Golden-section minimization on `[lo, hi]` until the interval is shorter than
/// `tol`. If neither interior sample beats both endpoints, scans `n_coarse`
/// equispaced points and refines around the best one.
pub fn golden_section(
    mut f: impl FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_evals: usize,
    n_coarse: usize,
) -> ScalarMin {
    let mut evals = 0usize;
    let mut eval = |x: f64, evals: &mut usize| {
        *evals += 1;
        clean(f(x))
    };
    if hi <= lo {
        let v = eval(lo, &mut evals);
        return ScalarMin {
            x: lo,
            f: v,
            evals,
            bracketed: false,
            hit_cap: false,
        };
    }
    let flo = eval(lo, &mut evals);
    let fhi = eval(hi, &mut evals);
    let c = hi - INV_PHI * (hi - lo);
    let d = lo + INV_PHI * (hi - lo);
    let fc = eval(c, &mut evals);
    let fd = eval(d, &mut evals);
    let mut best = [(lo, flo), (hi, fhi), (c, fc), (d, fd)]
        .into_iter()
        .fold((lo, f64::INFINITY), |b, p| if p.1 < b.1 { p } else { b });
    let bracketed = fc.min(fd) < flo.min(fhi);

    let (mut a, mut b, mut c, mut d, mut fc, mut fd) = if bracketed {
        (lo, hi, c, d, fc, fd)
    } else {
        let n = n_coarse.max(3);
        let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        let mut fs = Vec::with_capacity(n);
        for (i, &x) in xs.iter().enumerate() {
            let v = if i == 0 {
                flo
            } else if i == n - 1 {
                fhi
            } else {
                eval(x, &mut evals)
            };
            if v < best.1 {
                best = (x, v);
            }
            fs.push(v);
        }
        let i = (0..n).fold(0, |b, i| if fs[i] < fs[b] { i } else { b });
        let a = xs[i.saturating_sub(1)];
        let b = xs[(i + 1).min(n - 1)];
        let c = b - INV_PHI * (b - a);
        let d = a + INV_PHI * (b - a);
        let fc = eval(c, &mut evals);
        let fd = eval(d, &mut evals);
        for p in [(c, fc), (d, fd)] {
            if p.1 < best.1 {
                best = p;
            }
        }
        (a, b, c, d, fc, fd)
    };

    let mut hit_cap = false;
    while b - a > tol {
        if evals >= max_evals {
            hit_cap = true;
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c, &mut evals);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d, &mut evals);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    ScalarMin {
        x: best.0,
        f: best.1,
        evals,
        bracketed,
        hit_cap,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Root {
    pub x: f64,
    pub value: f64,
    pub evals: usize,
    pub bracketed: bool,
    pub converged: bool,
}

/// Bisection for `g(x) = target` with `g` nonincreasing on `[lo, hi]`. Stops
/// when `|g - target| <= tol`. Without a bracket returns the bound whose value
/// is closest to the target.
pub fn bisect_decreasing(
    mut g: impl FnMut(f64) -> f64,
    target: f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_evals: usize,
) -> Root {
    let glo = g(lo);
    let ghi = g(hi);
    let mut evals = 2;
    if !(glo >= target) {
        return Root {
            x: lo,
            value: glo,
            evals,
            bracketed: false,
            converged: (glo - target).abs() <= tol,
        };
    }
    if !(ghi <= target) {
        return Root {
            x: hi,
            value: ghi,
            evals,
            bracketed: false,
            converged: (ghi - target).abs() <= tol,
        };
    }
    let (mut a, mut b) = (lo, hi);
    let mut best = if (glo - target).abs() < (ghi - target).abs() {
        (lo, glo)
    } else {
        (hi, ghi)
    };
    while (best.1 - target).abs() > tol && evals < max_evals {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let v = g(m);
        evals += 1;
        if (v - target).abs() < (best.1 - target).abs() {
            best = (m, v);
        }
        if v > target {
            a = m;
        } else {
            b = m;
        }
    }
    Root {
        x: best.0,
        value: best.1,
        evals,
        bracketed: true,
        converged: (best.1 - target).abs() <= tol,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplexMin {
    pub x: Vec<f64>,
    pub f: f64,
    /// Value at the projected start.
    pub f_start: f64,
    pub evals: usize,
    /// Largest coordinate spread of the final simplex.
    pub spread: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Stop when `f_worst - f_best <= ftol * |f_best| + atol`.
    pub ftol: f64,
    pub atol: f64,
    /// Initial step as a fraction of each box width.
    pub step: f64,
    pub max_evals: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            ftol: 1e-3,
            atol: 1e-12,
            step: 0.1,
            max_evals: 200,
        }
    }
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Nelder-Mead over the free coordinates of a box; trial points are projected
/// onto the box and coordinates with `lo == hi` stay fixed.
pub fn nelder_mead_box(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: SimplexOptions,
) -> SimplexMin {
    let dim = start.len();
    let free: Vec<usize> = (0..dim).filter(|&i| hi[i] > lo[i]).collect();
    let mut evals = 0usize;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        clean(f(x))
    };
    let mut x0 = start.to_vec();
    project(&mut x0, lo, hi);
    let f0 = eval(&x0, &mut evals);
    if free.is_empty() {
        return SimplexMin {
            x: x0,
            f: f0,
            f_start: f0,
            evals,
            spread: vec![0.0; dim],
            converged: true,
        };
    }
    let mut simplex = vec![(x0.clone(), f0)];
    for &i in &free {
        let mut x = x0.clone();
        let w = hi[i] - lo[i];
        // step toward the interior so the vertex is not projected back
        x[i] += if x0[i] + opts.step * w <= hi[i] {
            opts.step * w
        } else {
            -opts.step * w
        };
        project(&mut x, lo, hi);
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }
    let n = free.len();
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (fb, fw) = (simplex[0].1, simplex[n].1);
        let size = free
            .iter()
            .map(|&i| {
                let w = hi[i] - lo[i];
                simplex
                    .iter()
                    .map(|v| (v.0[i] - simplex[0].0[i]).abs() / w)
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (fw - fb).abs() <= opts.ftol * fb.abs() + opts.atol || size < 1e-10 {
            converged = fb.is_finite();
            break;
        }
        // one step costs at most n + 2 evaluations (reflect, contract, shrink)
        if evals + n + 2 > opts.max_evals {
            break;
        }
        let mut centroid = vec![0.0; dim];
        for v in &simplex[..n] {
            for i in 0..dim {
                centroid[i] += v.0[i] / n as f64;
            }
        }
        let along = |t: f64| {
            let mut x: Vec<f64> = (0..dim)
                .map(|i| centroid[i] + t * (simplex[n].0[i] - centroid[i]))
                .collect();
            project(&mut x, lo, hi);
            x
        };
        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let x = along(-0.5);
                let v = eval(&x, &mut evals);
                (x, v)
            } else {
                let x = along(0.5);
                let v = eval(&x, &mut evals);
                (x, v)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let mut x: Vec<f64> = (0..dim).map(|i| best[i] + 0.5 * (v.0[i] - best[i])).collect();
                    project(&mut x, lo, hi);
                    v.1 = eval(&x, &mut evals);
                    v.0 = x;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let spread = (0..dim)
        .map(|i| {
            let (mn, mx) = simplex.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(v.0[i]), b.max(v.0[i]))
            });
            mx - mn
        })
        .collect();
    let (x, fbest) = simplex.swap_remove(0);
    SimplexMin {
        x,
        f: fbest,
        f_start: f0,
        evals,
        spread,
        converged,
    }
}

/// Four corners of the box inset a quarter of the way to the center, plus the
/// center. Only the first two free coordinates vary over the corners; any
/// other coordinates sit at the center.
pub fn inset_starts(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let center: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let free: Vec<usize> = (0..lo.len()).filter(|&i| hi[i] > lo[i]).collect();
    let mut starts = Vec::new();
    let inset = |i: usize, upper: bool| {
        if upper {
            hi[i] - 0.25 * (hi[i] - lo[i])
        } else {
            lo[i] + 0.25 * (hi[i] - lo[i])
        }
    };
    match free.len() {
        0 => {}
        1 => {
            for up in [false, true] {
                let mut x = center.clone();
                x[free[0]] = inset(free[0], up);
                starts.push(x);
            }
        }
        _ => {
            let (i, j) = (free[free.len() - 2], free[free.len() - 1]);
            for (ui, uj) in [(false, false), (false, true), (true, false), (true, true)] {
                let mut x = center.clone();
                x[i] = inset(i, ui);
                x[j] = inset(j, uj);
                if free.len() > 2 {
                    x[free[0]] = inset(free[0], ui == uj);
                }
                starts.push(x);
            }
        }
    }
    starts.push(center);
    starts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiStartMin {
    pub best: SimplexMin,
    pub starts: Vec<SimplexMin>,
    pub evals: usize,
    /// No start improved on its initial value.
    pub stalled: bool,
}

/// Parallel Nelder-Mead from every start with an equal share of 60% of the
/// budget, then a polishing restart from the best point with the rest.
pub fn multi_start(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    starts: &[Vec<f64>],
    lo: &[f64],
    hi: &[f64],
    opts: SimplexOptions,
) -> MultiStartMin {
    assert!(!starts.is_empty(), "multi_start needs at least one start");
    let share = ((opts.max_evals * 3 / 5) / starts.len()).max(lo.len() + 2);
    let runs: Vec<SimplexMin> = starts
        .par_iter()
        .map(|s| {
            nelder_mead_box(
                f,
                s,
                lo,
                hi,
                SimplexOptions {
                    max_evals: share,
                    ..opts
                },
            )
        })
        .collect();
    let stalled = runs.iter().all(|r| !(r.f < r.f_start));
    let mut evals: usize = runs.iter().map(|r| r.evals).sum();
    let mut best = runs
        .iter()
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .cloned()
        .expect("nonempty");
    let left = opts.max_evals.saturating_sub(evals);
    if left >= 2 * lo.len() + 3 {
        let polish = nelder_mead_box(
            f,
            &best.x,
            lo,
            hi,
            SimplexOptions {
                max_evals: left,
                step: opts.step * 0.25,
                ..opts
            },
        );
        evals += polish.evals;
        if polish.f <= best.f {
            best = polish;
        }
    }
    MultiStartMin {
        best,
        starts: runs,
        evals,
        stalled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_quadratic_surrogate() {
        let c = 0.3f64;
        let r = golden_section(|x| (x - c).powi(2), (1e-6f64).ln(), (1e2f64).ln(), 1e-3, 60, 12);
        assert!(r.bracketed);
        assert!((r.x.exp() / c.exp() - 1.0).abs() < 1e-3, "{r:?}");
        assert!(r.evals <= 60);
    }

    #[test]
    fn golden_falls_back_on_bad_bracket() {
        // narrow well away from both interior golden points
        let f = |x: f64| {
            if (x - 0.93).abs() < 0.05 {
                (x - 0.93).powi(2) - 1.0
            } else {
                0.0
            }
        };
        let r = golden_section(f, 0.0, 1.0, 1e-4, 60, 12);
        assert!(!r.bracketed);
        assert!((r.x - 0.93).abs() < 1e-3, "{r:?}");
    }

    #[test]
    fn golden_monotone_ends_at_bound() {
        let r = golden_section(|x| x, -3.0, 2.0, 1e-3, 60, 12);
        assert!(!r.bracketed);
        assert!((r.x + 3.0).abs() < 1e-12);
    }

    #[test]
    fn golden_respects_cap() {
        let r = golden_section(|x| (x - 0.1).powi(2), -10.0, 10.0, 1e-12, 15, 12);
        assert!(r.hit_cap);
        assert!(r.evals <= 15);
    }

    #[test]
    fn bisection_finds_root() {
        let r = bisect_decreasing(|x| 100.0 * (-x).exp(), 49.0, -5.0, 5.0, 49e-6, 60);
        assert!(r.bracketed && r.converged);
        assert!((r.x - (100.0f64 / 49.0).ln()).abs() < 1e-6);
    }

    #[test]
    fn bisection_without_bracket_returns_bound() {
        let r = bisect_decreasing(|_| 0.0, 49.0, -5.0, 5.0, 1e-6, 60);
        assert!(!r.bracketed);
        assert_eq!(r.x, -5.0);
        let r = bisect_decreasing(|_| 100.0, 49.0, -5.0, 5.0, 1e-6, 60);
        assert_eq!(r.x, 5.0);
    }

    #[test]
    fn simplex_bowl() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + (x[1] - 5.0).powi(2) + (x[2] - 5.0).powi(2);
        let lo = [1e-6, 1.0, 1.0];
        let hi = [9.0, 15.0, 20.0];
        let r = multi_start(&f, &inset_starts(&lo, &hi), &lo, &hi, SimplexOptions::default());
        for (a, b) in r.best.x.iter().zip([1.0, 5.0, 5.0]) {
            assert!((a - b).abs() < 1e-2, "{:?}", r.best);
        }
        assert!(r.evals <= 200);
    }

    #[test]
    fn simplex_stays_in_box_and_freezes() {
        let f = |x: &[f64]| -(x[0] + x[1] + x[2]);
        let lo = [0.0, 2.0, 0.0];
        let hi = [1.0, 2.0, 3.0];
        let r = nelder_mead_box(&f, &[0.5, 2.0, 1.0], &lo, &hi, SimplexOptions::default());
        assert_eq!(r.x[1], 2.0);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[2] - 3.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn starts_are_inside() {
        let lo = [0.0, 1.0, 1.0];
        let hi = [1.0, 15.0, 20.0];
        let s = inset_starts(&lo, &hi);
        assert_eq!(s.len(), 5);
        for x in s {
            for i in 0..3 {
                assert!(x[i] > lo[i] && x[i] < hi[i]);
            }
        }
    }
}
