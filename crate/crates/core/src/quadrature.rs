//! Gauss–Legendre rules and composite panel quadrature.
//!
//! Nodes are computed once per order by Newton iteration on the Legendre
//! three-term recurrence, which is accurate to a few ulps for the orders used
//! here (≤ 64).

use std::f64::consts::PI;

/// A Gauss–Legendre rule on the reference interval `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Legendre order must be positive");
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        let m = order.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess for the i-th root counted from x = 1.
            let mut x = (PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(order, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(order, x);
            dp = if d.is_finite() { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[order - 1 - i] = x;
            weights[i] = w;
            weights[order - 1 - i] = w;
        }
        if order % 2 == 1 {
            nodes[order / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integrates `f` over `[a, b]` with a single panel.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }

    /// Maps the rule to `[a, b]`, returning `(abscissa, weight)` pairs.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, w * half))
    }
}

fn legendre_with_derivative(order: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=order {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let n = order as f64;
    let p = if order == 0 { 1.0 } else { p1 };
    let d = n * (x * p1 - p0) / (x * x - 1.0);
    (p, d)
}

/// Composite Gauss–Legendre rule: the interval is cut into equal panels no
/// wider than `max_panel_width`, each integrated with the same rule.
#[derive(Debug, Clone)]
pub struct CompositeRule {
    rule: GaussLegendre,
    max_panel_width: f64,
}

impl CompositeRule {
    pub fn new(order: usize, max_panel_width: f64) -> Self {
        assert!(max_panel_width > 0.0);
        Self {
            rule: GaussLegendre::new(order),
            max_panel_width,
        }
    }

    pub fn max_panel_width(&self) -> f64 {
        self.max_panel_width
    }

    /// Same rule with every panel halved.
    pub fn refined(&self) -> Self {
        Self {
            rule: self.rule.clone(),
            max_panel_width: 0.5 * self.max_panel_width,
        }
    }

    fn panel_count(&self, a: f64, b: f64) -> usize {
        (((b - a).abs() / self.max_panel_width).ceil() as usize).max(1)
    }

    /// All `(abscissa, weight)` pairs for `[a, b]`, in ascending panel order.
    pub fn points(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        let panels = self.panel_count(a, b);
        let width = (b - a) / panels as f64;
        let mut out = Vec::with_capacity(panels * self.rule.order());
        for k in 0..panels {
            let lo = a + width * k as f64;
            let hi = if k + 1 == panels { b } else { lo + width };
            out.extend(self.rule.mapped(lo, hi));
        }
        out
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let panels = self.panel_count(a, b);
        let width = (b - a) / panels as f64;
        let mut acc = 0.0;
        for k in 0..panels {
            let lo = a + width * k as f64;
            let hi = if k + 1 == panels { b } else { lo + width };
            acc += self.rule.integrate(lo, hi, &mut f);
        }
        acc
    }
}

impl Default for CompositeRule {
    /// 16 nodes per panel, unit panel width.
    fn default() -> Self {
        Self::new(16, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for order in [1, 2, 5, 16, 33] {
            let gl = GaussLegendre::new(order);
            let s: f64 = gl.weights().iter().sum();
            assert!((s - 2.0).abs() < 1e-14, "order {order}: {s}");
        }
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let gl = GaussLegendre::new(8);
        for deg in 0..16 {
            let got = gl.integrate(0.0, 2.0, |x| x.powi(deg));
            let want = 2f64.powi(deg + 1) / (deg as f64 + 1.0);
            assert!((got - want).abs() < 1e-12 * want, "deg {deg}");
        }
    }

    #[test]
    fn nodes_are_symmetric_and_sorted() {
        let gl = GaussLegendre::new(16);
        let x = gl.nodes();
        for i in 0..16 {
            assert!((x[i] + x[15 - i]).abs() < 1e-15);
        }
        assert!(x.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn composite_rule_integrates_exponential_tail() {
        let rule = CompositeRule::default();
        let got = rule.integrate(0.0, 40.0, |x| (-x).exp());
        let want = 1.0 - (-40f64).exp();
        assert!((got - want).abs() < 1e-14);
        let pts = rule.points(-3.0, 4.5);
        let s: f64 = pts.iter().map(|(_, w)| w).sum();
        assert!((s - 7.5).abs() < 1e-13);
    }
}
