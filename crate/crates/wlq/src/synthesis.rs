//! Feedback synthesis: the algebraic Riccati equation, the affine adjoint
//! trajectory, and the affine control offset.
//!
//! The stabilizing solution `P` of
//! ```text
//! P A + A' P + C' P C + Q - E P - F (P C + C' P)
//!   - K' (R + D' P D)^{-1} K = 0,    K = B' P + D' P C + S - F D' P
//! ```
//! is computed by Newton-Kleinman iteration in transformed coordinates: each
//! step closes the loop with the current gain and solves a generalized
//! Lyapunov equation. A certified stabilizer seeds the iteration, so the
//! iterates decrease monotonically to the stabilizing solution.
//!
//! The affine adjoint solves the linear ODE
//! ```text
//! d eta = -[M eta + Theta' r + q] ds,   M = (A - E I - F C + (B - F D) Theta)'
//! ```
//! whose unique solution vanishing at infinity is the convergent integral
//! `eta(s) = int_s^inf exp(M (tau - s)) (Theta' r + q)(tau) dtau`, defined
//! whenever `M` is Hurwitz.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, WlqError};
use crate::model::{DeterministicSignal, ProblemSpec};
use crate::stability::{self, LyapunovProblem};
use crate::transform::{self, TransformedSystem};

/// ARE residual acceptance: `||residual|| <= ARE_TOL * (1 + ||P||)`.
pub const ARE_TOL: f64 = 1e-10;

/// Newton-Kleinman step tolerance: `||P_{k+1} - P_k|| <= NK_STEP_TOL * ||P_k||`.
pub const NK_STEP_TOL: f64 = 1e-12;

const NK_MAX_ITERS: usize = 50;

/// `eta` sampled on a solve grid; linear interpolation between nodes,
/// clamped to the end values outside the grid.
#[derive(Debug, Clone)]
pub struct EtaGrid {
    pub s: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl EtaGrid {
    pub fn eval(&self, s: f64) -> DVector<f64> {
        let n = self.s.len();
        if s <= self.s[0] {
            return self.values[0].clone();
        }
        if s >= self.s[n - 1] {
            return self.values[n - 1].clone();
        }
        let idx = match self.s.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => return self.values[i].clone(),
            Err(i) => i,
        };
        let (s0, s1) = (self.s[idx - 1], self.s[idx]);
        let w = (s - s0) / (s1 - s0);
        &self.values[idx - 1] * (1.0 - w) + &self.values[idx] * w
    }

    pub fn constant(grid: &[f64], value: DVector<f64>) -> Self {
        EtaGrid {
            s: grid.to_vec(),
            values: vec![value; grid.len()],
        }
    }
}

/// The affine control offset `vbar(s) = -(R + D'PD)^{-1} [(B - FD)' eta(s) + r(s)]`.
#[derive(Debug, Clone)]
pub struct VbarMap {
    g_inv: DMatrix<f64>,
    bmfd_t: DMatrix<f64>,
    eta: EtaGrid,
    r_sig: DeterministicSignal,
}

impl VbarMap {
    pub fn eval(&self, s: f64) -> DVector<f64> {
        let mut inner = &self.bmfd_t * self.eta.eval(s);
        if !self.r_sig.is_zero() {
            inner += self.r_sig.eval(s);
        }
        -(&self.g_inv * inner)
    }
}

/// Everything the closed loop needs: the Riccati solution, the gain, and the
/// affine terms. `zeta = -(F/2) eta` is implied and never stored.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub p: DMatrix<f64>,
    pub theta_bar: DMatrix<f64>,
    pub eta: EtaGrid,
    pub vbar: VbarMap,
    pub iterations: usize,
    pub residual: f64,
    /// `||P_{k+1} - P_k||_F` per Newton-Kleinman step.
    pub step_norms: Vec<f64>,
}

// ---------------------------------------------------------------------------
// ARE
// ---------------------------------------------------------------------------

/// Residual of the ARE in original coordinates at `P`.
pub fn are_residual(spec: &ProblemSpec, p: &DMatrix<f64>) -> DMatrix<f64> {
    let g = &spec.r_mat + spec.d.transpose() * p * &spec.d;
    let k = spec.b_mat.transpose() * p + spec.d.transpose() * p * &spec.c + &spec.s_mat
        - spec.d.transpose() * p * spec.f;
    let ginv_k = match g.clone().cholesky() {
        Some(ch) => ch.solve(&k),
        None => match g.lu().solve(&k) {
            Some(x) => x,
            None => return DMatrix::from_element(p.nrows(), p.ncols(), f64::INFINITY),
        },
    };
    let pa = p * &spec.a;
    let pc = p * &spec.c;
    &pa + pa.transpose() + spec.c.transpose() * p * &spec.c + &spec.q_mat
        - p * spec.e
        - (&pc + pc.transpose()) * spec.f
        - k.transpose() * ginv_k
}

/// Gain in original coordinates, `Theta = -(R + D'PD)^{-1} (B'P + D'PC + S - F D'P)`.
pub fn gain_from(spec: &ProblemSpec, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = &spec.r_mat + spec.d.transpose() * p * &spec.d;
    let k = spec.b_mat.transpose() * p + spec.d.transpose() * p * &spec.c + &spec.s_mat
        - spec.d.transpose() * p * spec.f;
    let ch = g.cholesky().ok_or(WlqError::SingularRplus)?;
    Ok(-ch.solve(&k))
}

/// Gain in transformed coordinates (algebraically identical to [`gain_from`]).
pub fn gain_tilde(
    spec: &ProblemSpec,
    ts: &TransformedSystem,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let g = &spec.r_mat + ts.dt.transpose() * p * &ts.dt;
    let k = ts.bt.transpose() * p + ts.dt.transpose() * p * &ts.ct + &spec.s_mat;
    let ch = g.cholesky().ok_or(WlqError::SingularRplus)?;
    Ok(-ch.solve(&k))
}

/// Solve the ARE for the weighted-stabilizing solution and gain.
///
/// Newton-Kleinman in transformed coordinates, started from `Theta = 0` when
/// it certifies (the standing hypothesis) and otherwise from
/// [`stability::find_stabilizer`]. The final gain is recomputed in original
/// coordinates and certified by the weighted Lyapunov test before returning.
pub fn solve_are(spec: &ProblemSpec) -> Result<AreSolution> {
    let ts = transform::to_classical(spec);
    let zero = DMatrix::<f64>::zeros(spec.m, spec.n);
    let theta0 = if stability::is_stabilizer(&zero, spec).stable {
        zero
    } else {
        stability::find_stabilizer(spec, 500, 0)
            .map_err(|e| WlqError::NoInitialStabilizer(e.to_string()))?
    };

    let mut theta = theta0;
    let mut p_prev: Option<DMatrix<f64>> = None;
    let mut step_norms = Vec::new();
    let mut residual_prev = f64::INFINITY;
    let mut grow_streak = 0usize;
    let mut iterations = 0usize;

    loop {
        iterations += 1;
        let a_cl = &ts.at + &ts.bt * &theta;
        let c_cl = &ts.ct + &ts.dt * &theta;
        let lambda = &spec.q_mat
            + spec.s_mat.transpose() * &theta
            + theta.transpose() * &spec.s_mat
            + theta.transpose() * &spec.r_mat * &theta;
        let lambda = (&lambda + lambda.transpose()) * 0.5;
        let prob = LyapunovProblem::new_psd(a_cl, c_cl, 0.0, 0.0, lambda)?;
        let (p, _) = stability::solve_lyapunov(&prob)?;

        let residual = are_residual(spec, &p).norm();
        if residual > residual_prev {
            grow_streak += 1;
            if grow_streak >= 5 {
                return Err(WlqError::IterationDiverged(grow_streak));
            }
        } else {
            grow_streak = 0;
        }
        residual_prev = residual;

        let step = p_prev
            .as_ref()
            .map(|prev| (&p - prev).norm())
            .unwrap_or(f64::INFINITY);
        if step.is_finite() {
            step_norms.push(step);
        }
        let converged = residual <= ARE_TOL * (1.0 + p.norm())
            || step <= NK_STEP_TOL * p_prev.as_ref().map(|m| m.norm()).unwrap_or(1.0);
        p_prev = Some(p.clone());
        if converged || iterations >= NK_MAX_ITERS {
            if !converged {
                return Err(WlqError::IterationDiverged(iterations));
            }
            let p = (&p + p.transpose()) * 0.5;
            let theta_bar = gain_from(spec, &p)?;
            let verdict = stability::is_stabilizer(&theta_bar, spec);
            if !verdict.stable {
                return Err(WlqError::NotCertified(
                    verdict
                        .reason
                        .unwrap_or_else(|| "closed loop failed the Lyapunov test".into()),
                ));
            }
            let residual = are_residual(spec, &p).norm();
            return Ok(AreSolution {
                p,
                theta_bar,
                iterations,
                residual,
                step_norms,
            });
        }
        theta = gain_tilde(spec, &ts, &p)?;
    }
}

#[derive(Debug, Clone)]
pub struct AreSolution {
    pub p: DMatrix<f64>,
    pub theta_bar: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub step_norms: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Affine adjoint
// ---------------------------------------------------------------------------

/// Closed-loop matrix of the eta equation.
pub fn eta_matrix(spec: &ProblemSpec, theta_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = spec.n;
    let bmfd = &spec.b_mat - &spec.d * spec.f;
    (&spec.a - DMatrix::<f64>::identity(n, n) * spec.e - &spec.c * spec.f + bmfd * theta_bar)
        .transpose()
}

fn max_re_eig(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .fold(f64::NEG_INFINITY, |acc, z| acc.max(z.re))
}

/// Solve the eta equation on `grid`, selecting the solution that vanishes at
/// infinity.
///
/// For constant (or zero) `q, r` the closed form `eta = -M^{-1} (Theta' r + q)`
/// is returned directly. Otherwise the convergent integral is evaluated by
/// adaptive panel quadrature with an exact tail: past the decay horizon of
/// the signals only the constant part survives, and its contribution is
/// `-M^{-1} g_inf`.
pub fn solve_eta(spec: &ProblemSpec, theta_bar: &DMatrix<f64>, grid: &[f64]) -> Result<EtaGrid> {
    if grid.len() < 2 || !grid.windows(2).all(|w| w[1] > w[0]) {
        return Err(WlqError::GridMismatch(
            "eta grid must be strictly increasing with at least two nodes".into(),
        ));
    }
    let m = eta_matrix(spec, theta_bar);
    let max_re = max_re_eig(&m);
    if max_re >= 0.0 {
        return Err(WlqError::NotHurwitz { max_re });
    }

    let g_at = |s: f64| -> DVector<f64> {
        let mut g = theta_bar.transpose() * spec.r_sig.eval(s);
        g += spec.q_sig.eval(s);
        g
    };
    let g_inf = theta_bar.transpose() * spec.r_sig.limit_value() + spec.q_sig.limit_value();
    let m_lu = m.clone().lu();
    let eta_const = if g_inf.iter().all(|&x| x == 0.0) {
        DVector::zeros(spec.n)
    } else {
        -m_lu
            .solve(&g_inf)
            .ok_or(WlqError::QuadratureFailure("M is singular".into()))?
    };

    let q_flat = matches!(
        spec.q_sig,
        DeterministicSignal::Zero { .. } | DeterministicSignal::Constant { .. }
    );
    let r_flat = matches!(
        spec.r_sig,
        DeterministicSignal::Zero { .. } | DeterministicSignal::Constant { .. }
    );
    if q_flat && r_flat {
        return Ok(EtaGrid::constant(grid, eta_const));
    }

    // Decaying part g_dec(s) = g(s) - g_inf; quadrature nodes are the
    // requested grid, the signal kinks, and the tail cutoff.
    let scale = g_at(grid[0]).amax().max(g_inf.amax()).max(1.0);
    let tail_tol = 1e-12 * scale;
    let t_tail = spec
        .q_sig
        .decay_horizon(tail_tol)
        .max(spec.r_sig.decay_horizon(tail_tol))
        .max(*grid.last().unwrap());
    let mut nodes: Vec<f64> = grid.to_vec();
    for k in spec.q_sig.kinks().into_iter().chain(spec.r_sig.kinks()) {
        if k > grid[0] && k < t_tail {
            nodes.push(k);
        }
    }
    nodes.push(t_tail);
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nodes.dedup_by(|a, b| (*a - *b).abs() <= f64::EPSILON * a.abs().max(1.0));

    let g_dec = |s: f64| g_at(s) - &g_inf;
    // Backward recursion for w(s) = int_s^inf e^{M(tau-s)} g_dec(tau) dtau:
    // w(nodes[i]) = panel + e^{M h} w(nodes[i+1]), w(t_tail) ~ 0.
    let mut w = DVector::<f64>::zeros(spec.n);
    let mut w_at: Vec<DVector<f64>> = vec![DVector::zeros(spec.n); nodes.len()];
    for i in (0..nodes.len() - 1).rev() {
        let (lo, hi) = (nodes[i], nodes[i + 1]);
        let step = (m.clone() * (hi - lo)).exp();
        let panel = adaptive_panel(&m, lo, hi, &g_dec, 0, scale)?;
        w = panel + step * w;
        w_at[i] = w.clone();
    }

    let mut values = Vec::with_capacity(grid.len());
    for &s in grid {
        let idx = nodes
            .binary_search_by(|v| v.partial_cmp(&s).unwrap())
            .unwrap_or_else(|i| i.min(nodes.len() - 1));
        values.push(&eta_const + &w_at[idx]);
    }
    Ok(EtaGrid {
        s: grid.to_vec(),
        values,
    })
}

// 5-point Gauss-Legendre nodes and weights on [-1, 1].
const GL_X: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_W: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

fn gl_panel(
    m: &DMatrix<f64>,
    lo: f64,
    hi: f64,
    g_dec: &impl Fn(f64) -> DVector<f64>,
) -> DVector<f64> {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut acc = DVector::<f64>::zeros(m.nrows());
    for (x, wgt) in GL_X.iter().zip(GL_W) {
        let tau = mid + half * x;
        let kernel = (m.clone() * (tau - lo)).exp();
        acc += kernel * g_dec(tau) * (wgt * half);
    }
    acc
}

/// `int_lo^hi e^{M (tau - lo)} g_dec(tau) dtau`, subdividing until two
/// refinement levels agree.
fn adaptive_panel(
    m: &DMatrix<f64>,
    lo: f64,
    hi: f64,
    g_dec: &impl Fn(f64) -> DVector<f64>,
    depth: usize,
    scale: f64,
) -> Result<DVector<f64>> {
    if depth > 30 {
        return Err(WlqError::QuadratureFailure(format!(
            "panel [{lo}, {hi}] did not converge after 30 subdivisions"
        )));
    }
    let coarse = gl_panel(m, lo, hi, g_dec);
    let mid = 0.5 * (lo + hi);
    let left = gl_panel(m, lo, mid, g_dec);
    let right = gl_panel(m, mid, hi, g_dec);
    let step = (m.clone() * (mid - lo)).exp();
    let fine = &left + step * &right;
    if (&fine - &coarse).amax() <= 1e-13 * scale.max(fine.amax()) {
        return Ok(fine);
    }
    let left = adaptive_panel(m, lo, mid, g_dec, depth + 1, scale)?;
    let right = adaptive_panel(m, mid, hi, g_dec, depth + 1, scale)?;
    let step = (m.clone() * (mid - lo)).exp();
    Ok(left + step * right)
}

// ---------------------------------------------------------------------------
// Affine offset and value function
// ---------------------------------------------------------------------------

/// Assemble `vbar(s) = -(R + D'PD)^{-1} [(B - FD)' eta(s) + r(s)]`.
pub fn assemble_vbar(spec: &ProblemSpec, p: &DMatrix<f64>, eta: &EtaGrid) -> Result<VbarMap> {
    let g = &spec.r_mat + spec.d.transpose() * p * &spec.d;
    let ch = g.cholesky().ok_or(WlqError::SingularRplus)?;
    Ok(VbarMap {
        g_inv: ch.inverse(),
        bmfd_t: (&spec.b_mat - &spec.d * spec.f).transpose(),
        eta: eta.clone(),
        r_sig: spec.r_sig.clone(),
    })
}

/// Predicted optimal cost `<P x, x>` of the homogeneous problem.
pub fn value_homogeneous(spec: &ProblemSpec, p: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    if !spec.is_homogeneous() {
        return Err(WlqError::NotHomogeneous(
            "value_homogeneous applies only when q = r = b = sigma = 0".into(),
        ));
    }
    Ok((p * x).dot(x))
}

/// Run the full synthesis pipeline: ARE, eta on `grid`, and vbar.
pub fn synthesize(spec: &ProblemSpec, grid: &[f64]) -> Result<SynthesisResult> {
    let are = solve_are(spec)?;
    let eta = solve_eta(spec, &are.theta_bar, grid)?;
    let vbar = assemble_vbar(spec, &are.p, &eta)?;
    Ok(SynthesisResult {
        p: are.p,
        theta_bar: are.theta_bar,
        eta,
        vbar,
        iterations: are.iterations,
        residual: are.residual,
        step_norms: are.step_norms,
    })
}
