//! Entropic optimal transport between weighted point clouds.
//!
//! The solver works on dual potentials `(f, g)` with the transport plan
//! `P_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)`. Potentials are kept in the
//! log domain and the Gibbs kernel is rebuilt around them whenever the scaling
//! vectors drift (the "absorption" form of log-stabilized Sinkhorn), so no
//! exponent ever overflows even when `C / eps` is large.
//!
//! [`sinkhorn_divergence`] is the debiased quantity
//! `OT(a, b) - OT(a, a) / 2 - OT(b, b) / 2`, which vanishes for identical clouds
//! and equals `|c|^2` for a pure translation by `c` under squared-Euclidean cost.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Atoms with positive masses summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCloud {
    points: Array2<f64>,
    masses: Array1<f64>,
}

impl WeightedCloud {
    pub fn new(points: Array2<f64>, masses: Array1<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Empty("cloud has no atoms"));
        }
        if masses.len() != points.nrows() {
            return Err(Error::DimensionMismatch { expected: points.nrows(), got: masses.len() });
        }
        if masses.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::Config("cloud masses must be positive".into()));
        }
        if (masses.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("cloud masses sum to {}", masses.sum())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite point coordinate".into()));
        }
        Ok(Self { points, masses })
    }

    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows().max(1);
        Self::new(points, Array1::from_elem(n, 1.0 / n as f64))
    }

    /// Masses proportional to `weights` (renormalized to sum to one).
    pub fn weighted(points: Array2<f64>, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        Self::new(points, weights.iter().map(|w| w / total).collect())
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn masses(&self) -> &Array1<f64> {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Squared Euclidean distances between every atom of `a` and every atom of `b`.
pub fn cost_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch { expected: a.ncols(), got: b.ncols() });
    }
    let mut c = Array2::zeros((a.nrows(), b.nrows()));
    for (i, x) in a.outer_iter().enumerate() {
        for (j, y) in b.outer_iter().enumerate() {
            c[[i, j]] = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
        }
    }
    Ok(c)
}

/// Median cost entry, skipping the diagonal of square matrices. Used to pick a
/// scale-free regularization strength.
pub fn median_cost(c: &Array2<f64>) -> f64 {
    let square = c.nrows() == c.ncols() && c.nrows() > 1;
    let mut v: Vec<f64> = c
        .indexed_iter()
        .filter(|((i, j), _)| !square || i != j)
        .map(|(_, &x)| x)
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = v[mid];
    if v.len() % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Entries `(i, j, coef)` whose weighted sum is the median of all entries of `c`:
/// one entry with coefficient 1, or the two middle entries with 1/2 each.
pub fn median_entries(c: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    let mut idx: Vec<(usize, usize)> = (0..c.nrows()).flat_map(|i| (0..c.ncols()).map(move |j| (i, j))).collect();
    if idx.is_empty() {
        return vec![];
    }
    let mid = idx.len() / 2;
    let key = |&(i, j): &(usize, usize)| (c[[i, j]], i, j);
    let cmp = |x: &(usize, usize), y: &(usize, usize)| {
        let (a, b) = (key(x), key(y));
        a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2)))
    };
    idx.select_nth_unstable_by(mid, cmp);
    let hi = idx[mid];
    if idx.len() % 2 == 1 {
        vec![(hi.0, hi.1, 1.0)]
    } else {
        let lo = *idx[..mid].iter().max_by(|x, y| cmp(x, y)).expect("non-empty");
        vec![(lo.0, lo.1, 0.5), (hi.0, hi.1, 0.5)]
    }
}

/// Regularization strength `factor * median(C)` over the cross-cost matrix, and
/// its derivative as coefficients on cost entries. Degenerate clouds (zero
/// median) fall back to `eps = 1` with no entries.
pub fn relative_eps_entries(a: &Array2<f64>, b: &Array2<f64>, factor: f64) -> Result<(f64, Vec<(usize, usize, f64)>)> {
    let c = cost_matrix(a, b)?;
    let entries = median_entries(&c);
    let med: f64 = entries.iter().map(|&(i, j, w)| w * c[[i, j]]).sum();
    if med > 0.0 {
        Ok((factor * med, entries.into_iter().map(|(i, j, w)| (i, j, factor * w)).collect()))
    } else {
        Ok((1.0, vec![]))
    }
}

/// Regularization strength `factor * median(C)` over the cross-cost matrix.
pub fn relative_eps(a: &Array2<f64>, b: &Array2<f64>, factor: f64) -> Result<f64> {
    Ok(relative_eps_entries(a, b, factor)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub eps: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl SinkhornOptions {
    pub fn new(eps: f64) -> Self {
        Self { eps, max_iter: 200, tol: 1e-6 }
    }
}

/// Converged (or capped) Sinkhorn solution.
#[derive(Debug, Clone)]
pub struct Solution {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub plan: Array2<f64>,
    /// `<P, C>`, the transport cost without the entropy term.
    pub transport_cost: f64,
    /// Entropic objective `<a, f> + <b, g>` (equals `<P, C> + eps KL(P | a x b)` at optimum).
    pub entropic_cost: f64,
    pub iterations: usize,
    pub violation: f64,
}

impl Solution {
    pub fn converged(&self, tol: f64) -> bool {
        self.violation <= tol
    }
}

const ABSORB: f64 = 1e40;

fn gibbs(cost: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>, eps: f64) -> Array2<f64> {
    let mut k = Array2::zeros(cost.dim());
    for ((i, j), v) in k.indexed_iter_mut() {
        *v = ((f[i] + g[j] - cost[[i, j]]) / eps).exp();
    }
    k
}

/// `-eps * log sum_j w_j exp((h_j - C_ij) / eps)` for every row `i` (or column when
/// `by_col`), computed with the max-shift.
fn soft_min(cost: &Array2<f64>, h: &Array1<f64>, w: &Array1<f64>, eps: f64, by_col: bool) -> Array1<f64> {
    let (n_out, n_in) = if by_col { (cost.ncols(), cost.nrows()) } else { (cost.nrows(), cost.ncols()) };
    let mut out = Array1::zeros(n_out);
    let mut buf = vec![0.0; n_in];
    for o in 0..n_out {
        let mut mx = f64::NEG_INFINITY;
        for (k, b) in buf.iter_mut().enumerate() {
            let c = if by_col { cost[[k, o]] } else { cost[[o, k]] };
            *b = (h[k] - c) / eps + w[k].ln();
            mx = mx.max(*b);
        }
        let s: f64 = buf.iter().map(|b| (b - mx).exp()).sum();
        out[o] = -eps * (mx + s.ln());
    }
    out
}

/// Log-stabilized Sinkhorn on a precomputed cost matrix.
pub fn solve(a: &Array1<f64>, b: &Array1<f64>, cost: &Array2<f64>, opts: SinkhornOptions) -> Result<Solution> {
    let eps = opts.eps;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("Sinkhorn eps must be positive, got {eps}")));
    }
    if cost.dim() != (a.len(), b.len()) {
        return Err(Error::DimensionMismatch { expected: a.len() * b.len(), got: cost.len() });
    }
    // absorbed potentials: start from the row minima so every kernel row has a unit entry
    let mut f_hat: Array1<f64> =
        cost.map_axis(Axis(1), |r| r.iter().copied().fold(f64::INFINITY, f64::min));
    let mut g_hat: Array1<f64> = Array1::zeros(b.len());
    let mut kernel = gibbs(cost, &f_hat, &g_hat, eps);
    let mut u: Array1<f64> = Array1::ones(a.len());
    let mut v: Array1<f64> = Array1::ones(b.len());
    let mut violation = f64::INFINITY;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let s = kernel.dot(&(b * &v));
        if it > 0 {
            violation = a.iter().zip(u.iter().zip(s.iter())).map(|(ai, (ui, si))| ai * (ui * si - 1.0).abs()).sum();
            if violation < opts.tol {
                iterations = it;
                break;
            }
        }
        u = s.mapv(|x| 1.0 / x);
        if u.iter().any(|x| !x.is_finite() || *x > ABSORB || *x < 1.0 / ABSORB) {
            let g_cur = &g_hat + &v.mapv(|x| eps * x.ln());
            f_hat = soft_min(cost, &g_cur, b, eps, false);
            g_hat = g_cur;
            u.fill(1.0);
            v.fill(1.0);
            kernel = gibbs(cost, &f_hat, &g_hat, eps);
        }
        let t = kernel.t().dot(&(a * &u));
        v = t.mapv(|x| 1.0 / x);
        if v.iter().any(|x| !x.is_finite() || *x > ABSORB || *x < 1.0 / ABSORB) {
            let f_cur = &f_hat + &u.mapv(|x| eps * x.ln());
            g_hat = soft_min(cost, &f_cur, a, eps, true);
            f_hat = f_cur;
            u.fill(1.0);
            v.fill(1.0);
            kernel = gibbs(cost, &f_hat, &g_hat, eps);
        }
    }
    if violation.is_infinite() || iterations == opts.max_iter {
        let s = kernel.dot(&(b * &v));
        violation = a.iter().zip(u.iter().zip(s.iter())).map(|(ai, (ui, si))| ai * (ui * si - 1.0).abs()).sum();
    }

    let mut f = &f_hat + &u.mapv(|x| eps * x.ln());
    let mut g = &g_hat + &v.mapv(|x| eps * x.ln());
    let mut plan = kernel;
    for ((i, j), p) in plan.indexed_iter_mut() {
        *p *= a[i] * u[i] * v[j] * b[j];
    }
    if violation > opts.tol && b.len() <= NEWTON_MAX_ATOMS {
        if let Some((nf, ng, np, nv)) = newton_polish(a, b, cost, eps, g.clone(), opts.tol) {
            if nv < violation {
                (f, g, plan, violation) = (nf, ng, np, nv);
            }
        }
    }
    let transport_cost = (&plan * cost).sum();
    let entropic_cost = a.dot(&f) + b.dot(&g);
    if !transport_cost.is_finite() || !entropic_cost.is_finite() {
        return Err(Error::Divergence("Sinkhorn produced a non-finite cost".into()));
    }
    Ok(Solution { f, g, plan, transport_cost, entropic_cost, iterations, violation })
}

/// Newton refinement is skipped above this many target atoms.
const NEWTON_MAX_ATOMS: usize = 1500;

/// Plan and semi-dual value `<a, f(g)> + <b, g>` with `f` the exact soft-min of `g`.
fn semi_dual(a: &Array1<f64>, b: &Array1<f64>, cost: &Array2<f64>, eps: f64, g: &Array1<f64>) -> (Array1<f64>, Array2<f64>, f64) {
    let f = soft_min(cost, g, b, eps, false);
    let mut plan = Array2::zeros(cost.dim());
    for ((i, j), p) in plan.indexed_iter_mut() {
        *p = a[i] * b[j] * ((f[i] + g[j] - cost[[i, j]]) / eps).exp();
    }
    let value = a.dot(&f) + b.dot(g);
    (f, plan, value)
}

/// Damped Newton ascent on the semi-dual in `g`. Rows of the plan are exact by
/// construction; iterates until the column residual is below `tol`.
#[allow(clippy::type_complexity)]
fn newton_polish(
    a: &Array1<f64>,
    b: &Array1<f64>,
    cost: &Array2<f64>,
    eps: f64,
    mut g: Array1<f64>,
    tol: f64,
) -> Option<(Array1<f64>, Array1<f64>, Array2<f64>, f64)> {
    let nb = b.len();
    let (mut f, mut plan, mut value) = semi_dual(a, b, cost, eps, &g);
    let mut resid = b - &plan.sum_axis(Axis(0));
    for _ in 0..50 {
        let viol = resid.iter().map(|r| r.abs()).sum::<f64>();
        if viol < tol {
            break;
        }
        // M = (diag(P^T 1) - P^T diag(1/a) P) / eps, plus c 11^T for the constant null direction
        let cols = plan.sum_axis(Axis(0));
        let scaled = &plan / &a.view().insert_axis(Axis(1));
        let ptp = plan.t().dot(&scaled);
        let c = cols.sum() / (eps * nb as f64);
        let m = nalgebra::DMatrix::from_fn(nb, nb, |j, l| {
            let diag = if j == l { cols[j] * (1.0 + 1e-12) } else { 0.0 };
            (diag - ptp[[j, l]]) / eps + c
        });
        let chol = m.cholesky()?;
        let rhs = nalgebra::DVector::from_iterator(nb, resid.iter().copied());
        let step = Array1::from_iter(chol.solve(&rhs).iter().copied());
        let slope = step.dot(&resid);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &g + &(&step * t);
            let (tf, tp, tv) = semi_dual(a, b, cost, eps, &trial);
            if tv.is_finite() && tv >= value + 1e-4 * t * slope {
                (g, f, plan, value) = (trial, tf, tp, tv);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        resid = b - &plan.sum_axis(Axis(0));
    }
    let viol = resid.iter().map(|r| r.abs()).sum::<f64>();
    Some((f, g, plan, viol))
}

fn check_converged(sol: &Solution, opts: &SinkhornOptions) -> Result<()> {
    if sol.violation > 10.0 * opts.tol {
        Err(Error::SinkhornNotConverged { iters: sol.iterations, violation: sol.violation })
    } else {
        Ok(())
    }
}

/// Transport cost `<P*, C>` of the entropic plan between two clouds.
pub fn sinkhorn_cost(a: &WeightedCloud, b: &WeightedCloud, opts: SinkhornOptions) -> Result<f64> {
    let cost = cost_matrix(&a.points, &b.points)?;
    let sol = solve(&a.masses, &b.masses, &cost, opts)?;
    check_converged(&sol, &opts)?;
    Ok(sol.transport_cost)
}

/// Gradient of the divergence with respect to point coordinates and masses.
#[derive(Debug, Clone)]
pub struct DivergenceGrad {
    pub value: f64,
    pub d_points_a: Array2<f64>,
    pub d_points_b: Array2<f64>,
    pub d_masses_a: Array1<f64>,
    pub d_masses_b: Array1<f64>,
    /// Derivative with respect to the regularization strength.
    pub d_eps: f64,
}

/// `(dOT/dx, dOT/dy)` for squared-Euclidean cost given a plan (envelope theorem).
fn point_grads(plan: &Array2<f64>, x: &Array2<f64>, y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let px = plan.dot(y);
    let py = plan.t().dot(x);
    let dx = (x * &rows.insert_axis(Axis(1)) - px) * 2.0;
    let dy = (y * &cols.insert_axis(Axis(1)) - py) * 2.0;
    (dx, dy)
}

fn canonical_first(a: &WeightedCloud, b: &WeightedCloud) -> bool {
    let ka = (a.len(), a.points.iter().chain(a.masses.iter()).map(|v| v.to_bits()));
    let kb = (b.len(), b.points.iter().chain(b.masses.iter()).map(|v| v.to_bits()));
    match ka.0.cmp(&kb.0) {
        std::cmp::Ordering::Equal => ka.1.cmp(kb.1) != std::cmp::Ordering::Greater,
        o => o == std::cmp::Ordering::Less,
    }
}

struct Terms {
    ab: Solution,
    aa: Solution,
    bb: Solution,
    swapped: bool,
}

fn divergence_terms(a: &WeightedCloud, b: &WeightedCloud, opts: SinkhornOptions, strict: bool) -> Result<Terms> {
    // solve the cross term in a canonical order so the result is symmetric bit for bit
    let swapped = !canonical_first(a, b);
    let (p, q) = if swapped { (b, a) } else { (a, b) };
    let ab = solve(&p.masses, &q.masses, &cost_matrix(&p.points, &q.points)?, opts)?;
    let aa = solve(&a.masses, &a.masses, &cost_matrix(&a.points, &a.points)?, opts)?;
    let bb = solve(&b.masses, &b.masses, &cost_matrix(&b.points, &b.points)?, opts)?;
    if strict {
        for s in [&ab, &aa, &bb] {
            check_converged(s, &opts)?;
        }
    }
    Ok(Terms { ab, aa, bb, swapped })
}

/// `OT_eps - <P, C>`; divided by eps this is `dOT_eps / deps` at the optimum.
fn bias(s: &Solution) -> f64 {
    s.entropic_cost - s.transport_cost
}

fn raw_divergence(t: &Terms) -> f64 {
    t.ab.entropic_cost - 0.5 * t.aa.entropic_cost - 0.5 * t.bb.entropic_cost
}

/// Debiased Sinkhorn divergence, floored at zero.
pub fn sinkhorn_divergence(a: &WeightedCloud, b: &WeightedCloud, opts: SinkhornOptions) -> Result<f64> {
    if a.points.ncols() != b.points.ncols() {
        return Err(Error::DimensionMismatch { expected: a.points.ncols(), got: b.points.ncols() });
    }
    let t = divergence_terms(a, b, opts, true)?;
    Ok(raw_divergence(&t).max(0.0))
}

/// Divergence value with gradients through the converged potentials.
pub fn sinkhorn_divergence_grad(a: &WeightedCloud, b: &WeightedCloud, opts: SinkhornOptions) -> Result<DivergenceGrad> {
    divergence_grad(a, b, opts, true)
}

/// As [`sinkhorn_divergence_grad`], but accepts solutions that hit `max_iter`
/// before reaching `tol` (used inside training loops).
pub fn sinkhorn_divergence_grad_relaxed(
    a: &WeightedCloud,
    b: &WeightedCloud,
    opts: SinkhornOptions,
) -> Result<DivergenceGrad> {
    divergence_grad(a, b, opts, false)
}

fn divergence_grad(a: &WeightedCloud, b: &WeightedCloud, opts: SinkhornOptions, strict: bool) -> Result<DivergenceGrad> {
    if a.points.ncols() != b.points.ncols() {
        return Err(Error::DimensionMismatch { expected: a.points.ncols(), got: b.points.ncols() });
    }
    let t = divergence_terms(a, b, opts, strict)?;
    let raw = raw_divergence(&t);
    if raw <= 0.0 {
        return Ok(DivergenceGrad {
            value: 0.0,
            d_points_a: Array2::zeros(a.points.dim()),
            d_points_b: Array2::zeros(b.points.dim()),
            d_masses_a: Array1::zeros(a.len()),
            d_masses_b: Array1::zeros(b.len()),
            d_eps: 0.0,
        });
    }
    let eps = opts.eps;
    let (pa, pb) = if t.swapped { (&b.points, &a.points) } else { (&a.points, &b.points) };
    let (dx_ab, dy_ab) = point_grads(&t.ab.plan, pa, pb);
    let (dx_ab, dy_ab, fa, gb) = if t.swapped {
        (dy_ab, dx_ab, &t.ab.g, &t.ab.f)
    } else {
        (dx_ab, dy_ab, &t.ab.f, &t.ab.g)
    };
    let (d1, d2) = point_grads(&t.aa.plan, &a.points, &a.points);
    let d_aa = d1 + d2;
    let (d1, d2) = point_grads(&t.bb.plan, &b.points, &b.points);
    let d_bb = d1 + d2;

    // dOT/da_i = f_i - eps at the optimum; the constant drops out under renormalization
    let d_masses_a = fa.mapv(|x| x - eps) - (&t.aa.f + &t.aa.g).mapv(|x| 0.5 * x - eps);
    let d_masses_b = gb.mapv(|x| x - eps) - (&t.bb.f + &t.bb.g).mapv(|x| 0.5 * x - eps);
    Ok(DivergenceGrad {
        value: raw,
        d_points_a: dx_ab - d_aa * 0.5,
        d_points_b: dy_ab - d_bb * 0.5,
        d_masses_a,
        d_masses_b,
        d_eps: (bias(&t.ab) - 0.5 * bias(&t.aa) - 0.5 * bias(&t.bb)) / eps,
    })
}
