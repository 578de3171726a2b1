//! Small smooth and composite minimizers used by the estimators.

/// Outcome of a minimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    /// Infinity norm of the gradient (or of the proximal gradient mapping).
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Settings {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS with a strong-Wolfe line search. `f` writes the gradient into its
/// second argument and returns the value.
pub fn bfgs<F>(mut f: F, x0: &[f64], settings: Settings) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    // inverse Hessian approximation, row-major
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut first = true;
    let mut iterations = 0;
    let mut gnorm = inf_norm(&g);

    while iterations < settings.max_iterations {
        if !fx.is_finite() {
            break;
        }
        if gnorm <= settings.gradient_tolerance {
            return Minimum {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations,
                converged: true,
            };
        }
        iterations += 1;
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // lost descent; fall back to steepest descent
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            first = true;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let alpha0 = if first {
            (1.0 / inf_norm(&d).max(1e-300)).min(1.0)
        } else {
            1.0
        };
        let Some((alpha, f_new, g_new)) = wolfe_search(&mut f, &x, &d, fx, slope, alpha0) else {
            if first {
                break;
            }
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            first = true;
            continue;
        };
        let s: Vec<f64> = d.iter().map(|di| alpha * di).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let x_new: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        let progress = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        gnorm = inf_norm(&g);

        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if first {
                let scale = sy / dot(&y, &y);
                for v in h.iter_mut() {
                    *v *= scale;
                }
                first = false;
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        if progress.abs() <= f64::EPSILON * fx.abs().max(1e-300) && inf_norm(&s) == 0.0 {
            break;
        }
    }
    let converged = fx.is_finite() && gnorm <= settings.gradient_tolerance;
    Minimum {
        x,
        value: fx,
        gradient_norm: gnorm,
        iterations,
        converged,
    }
}

struct Point {
    a: f64,
    f: f64,
    slope: f64,
    g: Vec<f64>,
}

fn wolfe_search<F>(
    f: &mut F,
    x: &[f64],
    d: &[f64],
    f0: f64,
    slope0: f64,
    alpha0: f64,
) -> Option<(f64, f64, Vec<f64>)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut eval = |a: f64| -> Point {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + a * di).collect();
        let mut g = vec![0.0; n];
        let fa = f(&xt, &mut g);
        let slope = dot(&g, d);
        Point { a, f: fa, slope, g }
    };
    // near the optimum value changes drown in rounding; then only the slope is informative
    let noise = 1e-12 * (1.0 + f0.abs());
    let sufficient = |p: &Point| p.f.is_finite() && (p.f <= f0 + WOLFE_C1 * p.a * slope0 || p.f <= f0 + noise);
    let curvature = |p: &Point| p.slope.abs() <= -WOLFE_C2 * slope0;

    let mut prev = Point {
        a: 0.0,
        f: f0,
        slope: slope0,
        g: Vec::new(),
    };
    let mut a = alpha0;
    let (mut lo, mut hi) = loop {
        let p = eval(a);
        if !sufficient(&p) || (prev.a > 0.0 && p.f > prev.f + noise) {
            break (prev, p);
        }
        if curvature(&p) {
            return Some((p.a, p.f, p.g));
        }
        if p.slope >= 0.0 {
            break (p, prev);
        }
        prev = p;
        a *= 2.0;
        if a > 1e20 {
            return (prev.a > 0.0).then_some((prev.a, prev.f, prev.g));
        }
    };

    for _ in 0..60 {
        let w = hi.a - lo.a;
        let (left, right) = if lo.a < hi.a { (lo.a, hi.a) } else { (hi.a, lo.a) };
        if (right - left) <= 1e-15 * right.abs().max(1e-300) {
            break;
        }
        let mut t = 0.5 * (lo.a + hi.a);
        if hi.f.is_finite() {
            let denom = 2.0 * (hi.f - lo.f - lo.slope * w);
            if denom > 0.0 {
                t = lo.a - lo.slope * w * w / denom;
            }
        }
        let margin = 0.1 * (right - left);
        if !(t > left + margin && t < right - margin) {
            t = 0.5 * (lo.a + hi.a);
        }
        let p = eval(t);
        if !sufficient(&p) || p.f > lo.f + noise {
            hi = p;
        } else {
            if curvature(&p) {
                return Some((p.a, p.f, p.g));
            }
            if p.slope * (hi.a - lo.a) >= 0.0 {
                hi = std::mem::replace(&mut lo, p);
            } else {
                lo = p;
            }
        }
    }
    (lo.a > 0.0 && lo.f <= f0 + noise).then_some((lo.a, lo.f, lo.g))
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;

/// Accelerated proximal gradient (FISTA with backtracking and adaptive
/// restart) for `f(x) + Σⱼ wⱼ|xⱼ|`. `f` writes its gradient.
pub fn fista_l1<F>(mut f: F, weights: &[f64], x0: &[f64], settings: Settings) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let penalty = |x: &[f64]| -> f64 { x.iter().zip(weights).map(|(a, w)| w * a.abs()).sum() };
    let prox = |v: &[f64], step: f64| -> Vec<f64> {
        v.iter()
            .zip(weights)
            .map(|(&a, &w)| soft_threshold(a, step * w))
            .collect()
    };
    let mut x = x0.to_vec();
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut step = 1.0_f64;
    let mut gy = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut fx = f(&x, &mut gx) + penalty(&x);
    let mut iterations = 0;
    let mut mapping_norm = f64::INFINITY;

    while iterations < settings.max_iterations {
        iterations += 1;
        let fy = f(&y, &mut gy);
        if !fy.is_finite() {
            break;
        }
        let mut x_new;
        loop {
            let v: Vec<f64> = y.iter().zip(&gy).map(|(a, g)| a - step * g).collect();
            x_new = prox(&v, step);
            let diff: Vec<f64> = x_new.iter().zip(&y).map(|(a, b)| a - b).collect();
            let mut scratch = vec![0.0; n];
            let f_new = f(&x_new, &mut scratch);
            let bound = fy + dot(&gy, &diff) + dot(&diff, &diff) / (2.0 * step);
            if f_new.is_finite() && f_new <= bound + 1e-12 * fy.abs().max(1.0) {
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                break;
            }
        }
        let f_new = f(&x_new, &mut gx) + penalty(&x_new);
        // optimality measure at the new point: proximal gradient mapping with the current step
        let v: Vec<f64> = x_new.iter().zip(&gx).map(|(a, g)| a - step * g).collect();
        let px = prox(&v, step);
        mapping_norm = x_new
            .iter()
            .zip(&px)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs() / step));
        let restart = f_new > fx;
        let t_new = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        let mom = if restart { 0.0 } else { (t - 1.0) / t_new };
        y = x_new
            .iter()
            .zip(&x)
            .map(|(a, b)| a + mom * (a - b))
            .collect();
        x = x_new;
        fx = f_new;
        t = t_new;
        step *= 1.5;
        if mapping_norm <= settings.gradient_tolerance {
            return Minimum {
                x,
                value: fx,
                gradient_norm: mapping_norm,
                iterations,
                converged: true,
            };
        }
        // FISTA is slow to finish on ill-conditioned problems once the
        // support has settled; a smooth solve on that support usually is not
        if iterations % POLISH_EVERY == 0 || iterations == settings.max_iterations {
            if let Some(mut m) = polish_l1(&mut f, weights, &x, settings) {
                if m.value <= fx + 1e-12 * fx.abs().max(1.0) {
                    m.iterations += iterations;
                    return m;
                }
            }
        }
    }
    Minimum {
        x,
        value: fx,
        gradient_norm: mapping_norm,
        iterations,
        converged: false,
    }
}

const POLISH_EVERY: usize = 200;

/// Minimizes `f + Σ wⱼ|xⱼ|` with the support and signs of `x` held fixed,
/// where the objective is smooth, and accepts the result only if it stays
/// on that orthant and satisfies the optimality conditions of the full
/// problem.
fn polish_l1<F>(f: &mut F, weights: &[f64], x: &[f64], settings: Settings) -> Option<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let free: Vec<usize> = (0..n).filter(|&j| x[j] != 0.0 || weights[j] == 0.0).collect();
    let sign: Vec<f64> = free.iter().map(|&j| if weights[j] == 0.0 { 0.0 } else { x[j].signum() }).collect();
    let embed = |z: &[f64]| {
        let mut full = vec![0.0; n];
        for (k, &j) in free.iter().enumerate() {
            full[j] = z[k];
        }
        full
    };
    let start: Vec<f64> = free.iter().map(|&j| x[j]).collect();
    let mut g = vec![0.0; n];
    let m = bfgs(
        |z: &[f64], gz: &mut [f64]| {
            let full = embed(z);
            let v = f(&full, &mut g);
            let mut pen = 0.0;
            for (k, &j) in free.iter().enumerate() {
                gz[k] = g[j] + weights[j] * sign[k];
                pen += weights[j] * sign[k] * z[k];
            }
            v + pen
        },
        &start,
        settings,
    );
    if !m.converged {
        return None;
    }
    let full = embed(&m.x);
    if free.iter().zip(&sign).any(|(&j, &s)| s != 0.0 && full[j] * s <= 0.0) {
        return None;
    }
    let value = f(&full, &mut g);
    let mut kkt = 0.0_f64;
    for j in 0..n {
        let r = match free.iter().position(|&i| i == j) {
            Some(k) => (g[j] + weights[j] * sign[k]).abs(),
            None => (g[j].abs() - weights[j]).max(0.0),
        };
        kkt = kkt.max(r);
    }
    if kkt > settings.gradient_tolerance {
        return None;
    }
    let penalty: f64 = full.iter().zip(weights).map(|(a, w)| w * a.abs()).sum();
    Some(Minimum {
        x: full,
        value: value + penalty,
        gradient_norm: kkt,
        iterations: m.iterations,
        converged: true,
    })
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> Settings {
        Settings {
            max_iterations: 5000,
            gradient_tolerance: 1e-10,
        }
    }

    #[test]
    fn bfgs_rosenbrock() {
        let m = bfgs(
            |x: &[f64], g: &mut [f64]| {
                g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
                g[1] = 200.0 * (x[1] - x[0] * x[0]);
                (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
            },
            &[-1.2, 1.0],
            settings(),
        );
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-8 && (m.x[1] - 1.0).abs() < 1e-8);
    }

    // ½ Σ dⱼ(xⱼ − cⱼ)² + Σ wⱼ|xⱼ| has the closed form soft(cⱼ, wⱼ/dⱼ)
    #[test]
    fn fista_matches_separable_solution_when_ill_conditioned() {
        let d = [1e4, 1.0, 1e-3, 50.0];
        let c = [0.3, -2.0, 5.0, 0.001];
        let w = [1.0, 0.5, 0.0, 1.0];
        let m = fista_l1(
            |x: &[f64], g: &mut [f64]| {
                let mut v = 0.0;
                for j in 0..4 {
                    g[j] = d[j] * (x[j] - c[j]);
                    v += 0.5 * d[j] * (x[j] - c[j]).powi(2);
                }
                v
            },
            &w,
            &[0.0; 4],
            settings(),
        );
        assert!(m.converged, "{m:?}");
        for j in 0..4 {
            let want = soft_threshold(c[j], w[j] / d[j]);
            assert!((m.x[j] - want).abs() < 1e-7, "coordinate {j}: {} vs {want}", m.x[j]);
        }
    }
}
