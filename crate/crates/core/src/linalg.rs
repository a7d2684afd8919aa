//! Small dense and banded direct solvers plus the Krylov methods used for the
//! 2D problems.
//!
//! Everything here works on plain `Vec<f64>` storage. Reductions are summed in
//! a fixed order so results do not depend on the thread pool.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is singular to working precision at pivot {index}")]
    Singular { index: usize },
    #[error("iterative solver did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("negative curvature encountered after {iterations} iterations")]
    NegativeCurvature { iterations: usize },
    #[error("non-finite value in linear solve")]
    NonFinite,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// LU factorization with partial pivoting of a dense row-major matrix.
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLu {
    pub fn factor(mut a: Vec<f64>, n: usize) -> Result<Self, LinalgError> {
        assert_eq!(a.len(), n * n);
        let scale = norm_inf(&a).max(f64::MIN_POSITIVE);
        let mut piv = vec![0; n];
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].abs();
            for i in k + 1..n {
                let v = a[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !best.is_finite() {
                return Err(LinalgError::NonFinite);
            }
            if best <= 1e-14 * scale {
                return Err(LinalgError::Singular { index: k });
            }
            piv[k] = p;
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
            }
            let d = a[k * n + k];
            for i in k + 1..n {
                let l = a[i * n + k] / d;
                a[i * n + k] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        a[i * n + j] -= l * a[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu: a, piv })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Smallest |pivot| relative to the largest, a cheap conditioning hint.
    pub fn pivot_ratio(&self) -> f64 {
        let n = self.n;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for k in 0..n {
            let v = self.lu[k * n + k].abs();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi == 0.0 {
            0.0
        } else {
            lo / hi
        }
    }

    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        // Rows were swapped whole during factorization, so the permutation is
        // applied up front.
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        for k in 0..n {
            let bk = b[k];
            for i in k + 1..n {
                b[i] -= self.lu[i * n + k] * bk;
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..n {
                s -= self.lu[k * n + j] * b[j];
            }
            b[k] = s / self.lu[k * n + k];
        }
    }
}

/// Square banded matrix with `kl` sub- and `ku` super-diagonals.
///
/// Rows are stored with room for the extra `kl` super-diagonals created by
/// partial pivoting, so the same buffer is reused by [`BandedLu`].
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    /// Sets entry `(i, j)`, which must lie inside the declared band.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i}, {j}) outside band"
        );
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i}, {j}) outside band"
        );
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let mut s = 0.0;
            for j in lo..=hi {
                s += self.data[self.slot(i, j)] * x[j];
            }
            y[i] = s;
        }
    }

    pub fn factor(self) -> Result<BandedLu, LinalgError> {
        BandedLu::factor(self)
    }
}

/// Banded LU with partial pivoting. Multipliers are stored unpermuted, as in
/// LAPACK's `gbtrf`, and the interchanges are replayed during the solve.
#[derive(Debug, Clone)]
pub struct BandedLu {
    m: BandedMatrix,
    piv: Vec<usize>,
}

impl BandedLu {
    fn factor(mut m: BandedMatrix) -> Result<Self, LinalgError> {
        let n = m.n;
        let (kl, ku) = (m.kl, m.ku);
        let scale = norm_inf(&m.data).max(f64::MIN_POSITIVE);
        let mut piv = vec![0; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + kl + ku).min(n - 1);
            let mut p = k;
            let mut best = m.data[m.slot(k, k)].abs();
            for i in k + 1..=last_row {
                let v = m.data[m.slot(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !best.is_finite() {
                return Err(LinalgError::NonFinite);
            }
            if best <= 1e-15 * scale {
                return Err(LinalgError::Singular { index: k });
            }
            piv[k] = p;
            if p != k {
                for j in k..=last_col {
                    let a = m.slot(k, j);
                    let b = m.slot(p, j);
                    m.data.swap(a, b);
                }
            }
            let d = m.data[m.slot(k, k)];
            for i in k + 1..=last_row {
                let sik = m.slot(i, k);
                let l = m.data[sik] / d;
                m.data[sik] = l;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        let skj = m.slot(k, j);
                        let sij = m.slot(i, j);
                        m.data[sij] -= l * m.data[skj];
                    }
                }
            }
        }
        Ok(Self { m, piv })
    }

    pub fn dim(&self) -> usize {
        self.m.n
    }

    pub fn solve(&self, b: &mut [f64]) {
        let m = &self.m;
        let n = m.n;
        for k in 0..n {
            b.swap(k, self.piv[k]);
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + m.kl).min(n - 1) {
                    b[i] -= m.data[m.slot(i, k)] * bk;
                }
            }
        }
        let reach = m.kl + m.ku;
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..=(k + reach).min(n - 1) {
                s -= m.data[m.slot(k, j)] * b[j];
            }
            b[k] = s / m.data[m.slot(k, k)];
        }
    }
}

/// Solves `(T + U Vᵀ) x = b` where `T` is factored banded and `U`, `V` have a
/// few columns, via the Sherman–Morrison–Woodbury identity.
#[derive(Debug, Clone)]
pub struct LowRankUpdate {
    base: BandedLu,
    v: Vec<Vec<f64>>,
    tinv_u: Vec<Vec<f64>>,
    capacitance: Option<DenseLu>,
}

impl LowRankUpdate {
    pub fn new(base: BandedLu, u: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self, LinalgError> {
        assert_eq!(u.len(), v.len());
        let r = u.len();
        let tinv_u: Vec<Vec<f64>> = u
            .into_iter()
            .map(|mut col| {
                base.solve(&mut col);
                col
            })
            .collect();
        let capacitance = if r == 0 {
            None
        } else {
            let mut c = vec![0.0; r * r];
            for i in 0..r {
                for j in 0..r {
                    c[i * r + j] = dot(&v[i], &tinv_u[j]) + if i == j { 1.0 } else { 0.0 };
                }
            }
            Some(DenseLu::factor(c, r)?)
        };
        Ok(Self {
            base,
            v,
            tinv_u,
            capacitance,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn solve(&self, b: &mut [f64]) {
        self.base.solve(b);
        if let Some(cap) = &self.capacitance {
            let mut w: Vec<f64> = self.v.iter().map(|vi| dot(vi, b)).collect();
            cap.solve(&mut w);
            for (wj, col) in w.iter().zip(&self.tinv_u) {
                for (bi, ci) in b.iter_mut().zip(col) {
                    *bi -= wj * ci;
                }
            }
        }
    }
}

/// Solves the bordered system `[A Z; Zᵀ 0] [x; μ] = [b; 0]` given a solver for
/// `A`. Returns `μ`; `b` is overwritten with `x`.
pub fn solve_bordered<S: Fn(&mut [f64])>(
    solve_a: S,
    z: &[Vec<f64>],
    b: &mut [f64],
) -> Result<Vec<f64>, LinalgError> {
    let k = z.len();
    solve_a(b);
    if k == 0 {
        return Ok(Vec::new());
    }
    let ainv_z: Vec<Vec<f64>> = z
        .iter()
        .map(|zi| {
            let mut c = zi.clone();
            solve_a(&mut c);
            c
        })
        .collect();
    let mut s = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            s[i * k + j] = dot(&z[i], &ainv_z[j]);
        }
    }
    let lu = DenseLu::factor(s, k)?;
    let mut mu: Vec<f64> = z.iter().map(|zi| dot(zi, b)).collect();
    lu.solve(&mut mu);
    for (m, col) in mu.iter().zip(&ainv_z) {
        for (bi, ci) in b.iter_mut().zip(col) {
            *bi -= m * ci;
        }
    }
    Ok(mu)
}

/// Solves `[A G; Gᵀ 0] [x; μ] = [b; 0]` by iterative refinement. `apply`
/// is the exact `A`; `approx` solves with a nearby nonsingular matrix (for
/// example a slightly shifted factorization when `A` has a near-kernel that
/// the border removes). `op_scale` bounds `‖A‖` and sets the rounding floor.
/// Returns the sweep count and `μ`; `b` is overwritten with `x`.
pub fn bordered_refinement<A, S>(
    apply: A,
    approx: S,
    g: &[Vec<f64>],
    b: &mut [f64],
    op_scale: f64,
    max_sweeps: usize,
) -> Result<(usize, Vec<f64>), LinalgError>
where
    A: Fn(&[f64], &mut [f64]),
    S: Fn(&mut [f64]),
{
    let m = b.len();
    let k = g.len();
    let ainv_g: Vec<Vec<f64>> = g
        .iter()
        .map(|gi| {
            let mut c = gi.clone();
            approx(&mut c);
            c
        })
        .collect();
    let schur = if k == 0 {
        None
    } else {
        let mut s = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                s[i * k + j] = dot(&g[i], &ainv_g[j]);
            }
        }
        Some(DenseLu::factor(s, k)?)
    };
    // Block elimination with the approximate solver, right-hand side (r, rc).
    let approx_bordered = |r: &mut [f64], rc: &[f64]| -> Vec<f64> {
        approx(r);
        let Some(lu) = &schur else { return Vec::new() };
        let mut mu: Vec<f64> = (0..k).map(|i| dot(&g[i], r) - rc[i]).collect();
        lu.solve(&mut mu);
        for (mi, col) in mu.iter().zip(&ainv_g) {
            for (ri, ci) in r.iter_mut().zip(col) {
                *ri -= mi * ci;
            }
        }
        mu
    };

    let rhs = b.to_vec();
    let bnorm = norm2(&rhs).max(f64::MIN_POSITIVE);
    let mut x = rhs.clone();
    let mut mu = approx_bordered(&mut x, &vec![0.0; k]);
    let mut ax = vec![0.0; m];
    let mut prev = f64::INFINITY;
    for sweep in 0..max_sweeps {
        apply(&x, &mut ax);
        let mut r: Vec<f64> = (0..m)
            .map(|i| rhs[i] - ax[i] - (0..k).map(|j| mu[j] * g[j][i]).sum::<f64>())
            .collect();
        let rc: Vec<f64> = (0..k).map(|j| -dot(&g[j], &x)).collect();
        let rnorm = norm2(&r) + rc.iter().map(|v| v.abs()).sum::<f64>();
        if !rnorm.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        // Stop at the rounding floor of the operator or once progress stalls.
        let floor = 1e-14 * (bnorm + op_scale * norm2(&x));
        if rnorm <= floor || (rnorm <= 1e-10 * bnorm && rnorm > 0.5 * prev) {
            b.copy_from_slice(&x);
            return Ok((sweep, mu));
        }
        prev = rnorm;
        let dmu = approx_bordered(&mut r, &rc);
        for i in 0..m {
            x[i] += r[i];
        }
        for j in 0..k {
            mu[j] += dmu[j];
        }
    }
    Err(LinalgError::NotConverged {
        iterations: max_sweeps,
        residual: prev / bnorm,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct KrylovOptions {
    pub rel_tol: f64,
    pub max_iters: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_iters: 20_000,
        }
    }
}

/// Jacobi-preconditioned conjugate gradients. Fails with
/// [`LinalgError::NegativeCurvature`] as soon as `pᵀAp ≤ 0`.
pub fn pcg<A: Fn(&[f64], &mut [f64])>(
    apply: A,
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    opts: &KrylovOptions,
) -> Result<usize, LinalgError> {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..opts.max_iters {
        let res = norm2(&r) / bnorm;
        if res <= opts.rel_tol {
            return Ok(it);
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(LinalgError::NegativeCurvature { iterations: it });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinalgError::NotConverged {
        iterations: opts.max_iters,
        residual: norm2(&r) / bnorm,
    })
}

/// Preconditioned MINRES for symmetric (possibly indefinite) systems. The
/// preconditioner is diagonal and must be positive.
pub fn minres<A: Fn(&[f64], &mut [f64])>(
    apply: A,
    precond_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    opts: &KrylovOptions,
) -> Result<usize, LinalgError> {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let minv = |v: &[f64], out: &mut [f64]| {
        for i in 0..v.len() {
            out[i] = v[i] / precond_diag[i];
        }
    };
    let mut tmp = vec![0.0; n];
    apply(x, &mut tmp);
    let mut r1: Vec<f64> = b.iter().zip(&tmp).map(|(bi, ai)| bi - ai).collect();
    let mut y = vec![0.0; n];
    minv(&r1, &mut y);
    let mut beta1 = dot(&r1, &y);
    if beta1 < 0.0 {
        return Err(LinalgError::NonFinite);
    }
    beta1 = beta1.sqrt();
    if beta1 == 0.0 {
        return Ok(0);
    }
    let mut r2 = r1.clone();
    let mut oldb = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsln = 0.0;
    let mut phibar = beta1;
    let mut cs = -1.0;
    let mut sn = 0.0;
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut v = vec![0.0; n];
    for it in 1..=opts.max_iters {
        let s = 1.0 / beta;
        for i in 0..n {
            v[i] = s * y[i];
        }
        apply(&v, &mut y);
        if it >= 2 {
            for i in 0..n {
                y[i] -= (beta / oldb) * r1[i];
            }
        }
        let alfa = dot(&v, &y);
        for i in 0..n {
            y[i] -= (alfa / beta) * r2[i];
        }
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        minv(&r2, &mut y);
        oldb = beta;
        let b2 = dot(&r2, &y);
        if !b2.is_finite() || b2 < 0.0 {
            return Err(LinalgError::NonFinite);
        }
        beta = b2.sqrt();

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = (gbar * gbar + beta * beta).sqrt().max(f64::MIN_POSITIVE);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let denom = 1.0 / gamma;
        for i in 0..n {
            let w1 = w2[i];
            w2[i] = w[i];
            w[i] = (v[i] - oldeps * w1 - delta * w2[i]) * denom;
            x[i] += phi * w[i];
        }
        // phibar estimates the preconditioned residual norm.
        if phibar / beta1 <= opts.rel_tol {
            apply(x, &mut tmp);
            let true_res = b
                .iter()
                .zip(&tmp)
                .map(|(bi, ai)| (bi - ai) * (bi - ai))
                .sum::<f64>()
                .sqrt()
                / bnorm;
            if true_res <= opts.rel_tol * 100.0 || beta == 0.0 {
                return Ok(it);
            }
        }
        if beta == 0.0 {
            return Ok(it);
        }
    }
    apply(x, &mut tmp);
    let res = b
        .iter()
        .zip(&tmp)
        .map(|(bi, ai)| (bi - ai) * (bi - ai))
        .sum::<f64>()
        .sqrt()
        / bnorm;
    Err(LinalgError::NotConverged {
        iterations: opts.max_iters,
        residual: res,
    })
}
