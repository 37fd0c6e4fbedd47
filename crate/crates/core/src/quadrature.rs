//! Fixed-order Gauss–Legendre rules.

use std::sync::OnceLock;

/// Number of points in the rule used for every time integral in the model.
pub const GL_POINTS: usize = 15;

/// Width (years of age) of the panels hazard integrals are split into.
pub const PANEL_WIDTH: f64 = 2.0;

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1], found by
/// Newton iteration on the Legendre polynomial.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// The 15-point rule, computed once.
pub fn gl15() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(GL_POINTS))
}

/// Number of equal panels covering [a, b] at the configured width (at least one).
pub fn panel_count(a: f64, b: f64) -> usize {
    (((b - a) / PANEL_WIDTH).ceil() as usize).max(1)
}

/// Appends the (node, weight) pairs of the panelled 15-point rule on [a, b].
pub fn panel_nodes(a: f64, b: f64, out: &mut Vec<(f64, f64)>) {
    panel_nodes_n(a, b, panel_count(a, b), out)
}

/// Same as [`panel_nodes`] with an explicit panel count.
pub fn panel_nodes_n(a: f64, b: f64, panels: usize, out: &mut Vec<(f64, f64)>) {
    if b <= a {
        return;
    }
    let (x, w) = gl15();
    let h = (b - a) / panels as f64;
    for k in 0..panels {
        let lo = a + h * k as f64;
        let hi = if k + 1 == panels { b } else { lo + h };
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (xi, wi) in x.iter().zip(w) {
            out.push((mid + half * xi, half * wi));
        }
    }
}

/// Integrates `f` over [a, b] with a single 15-point panel.
pub fn integrate<F: FnMut(f64) -> f64>(a: f64, b: f64, mut f: F) -> f64 {
    if b == a {
        return 0.0;
    }
    let (x, w) = gl15();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    let mut acc = 0.0;
    for (xi, wi) in x.iter().zip(w) {
        acc += wi * f(mid + half * xi);
    }
    acc * half
}
