//! High-resolution parameter estimation across hopping slots.
//!
//! Stage one of the two-stage scheme: initialize per-slot multipath
//! estimates with the subspace pipeline, splice the compensated slots
//! into one wide-band frame, and alternate between delay re-estimation
//! with successive interference cancellation and maximum-likelihood
//! updates of gains and per-slot imperfections.
//!
//! Phase conventions: the first path's Doppler phase is absorbed into
//! the common phase, so the common-phase estimate tracks `eps + phi_1`
//! and per-path phases are relative to path 1. Slot 0 of the window is
//! the anchor with zero imperfections by construction, and the
//! reconstructed response is invariant to this re-parameterization.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::scenario::{
    pilot_delay_steering, steering_vector_upa, PathSet, SrsObservation, SystemConfig,
};
use crate::subspace::{
    self, subspace_from_snapshots, Spectrum, SweepGrids, TstOptions,
};
use crate::{CMat, CVec, Error, Result};

/// Column-wise Khatri-Rao product: column k of the output is the
/// Kronecker product of column k of `a` with column k of `g`.
///
/// With per-tone dictionary columns g_k (length P) and per-antenna
/// columns a_k (length N_r), the product maps gains to the column-major
/// vectorization of the P x N_r observation matrix.
pub fn khatri_rao(a: &CMat, g: &CMat) -> CMat {
    assert_eq!(
        a.ncols(),
        g.ncols(),
        "khatri_rao requires matching column counts"
    );
    let (na, ng, k) = (a.nrows(), g.nrows(), a.ncols());
    let mut out = CMat::zeros(na * ng, k);
    for c in 0..k {
        for ia in 0..na {
            let scale = a[(ia, c)];
            for ig in 0..ng {
                out[(ia * ng + ig, c)] = scale * g[(ig, c)];
            }
        }
    }
    out
}

/// Least-squares gain solve against a tall dictionary.
#[derive(Debug, Clone)]
pub struct LsGains {
    /// Estimated gain vector, one entry per dictionary column.
    pub gains: CVec,
    /// True when the normal equations needed a ridge term to factor.
    pub ridged: bool,
}

/// Factors and solves, rejecting factorizations whose pivots reveal a
/// singular or numerically rank-deficient system.
fn cholesky_solve_checked(gram: &CMat, rhs: &CVec) -> Option<CVec> {
    let chol = gram.clone().cholesky()?;
    let l = chol.l();
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0_f64;
    for i in 0..l.nrows() {
        let d = l[(i, i)].norm();
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    if !(dmin > 1e-6 * dmax) {
        return None;
    }
    let sol = chol.solve(rhs);
    if sol.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
        Some(sol)
    } else {
        None
    }
}

/// Solves min_c ||y - V c|| through the normal equations
/// c = (V^H V)^{-1} V^H y.
///
/// A rank-deficient Gram matrix falls back to a ridge term
/// lambda = 1e-8 * trace(V^H V) / K and sets the `ridged` flag.
pub fn ls_gains(y: &CVec, v: &CMat) -> Result<LsGains> {
    assert_eq!(y.len(), v.nrows(), "dictionary rows must match observation");
    let k = v.ncols();
    if k == 0 {
        return Ok(LsGains {
            gains: CVec::zeros(0),
            ridged: false,
        });
    }
    let gram = v.adjoint() * v;
    let rhs = v.adjoint() * y;
    if let Some(gains) = cholesky_solve_checked(&gram, &rhs) {
        return Ok(LsGains {
            gains,
            ridged: false,
        });
    }
    let trace: f64 = (0..k).map(|i| gram[(i, i)].re).sum();
    let mut lambda = 1e-8 * trace / k as f64;
    if lambda <= 0.0 {
        lambda = 1e-30;
    }
    for _ in 0..8 {
        let mut ridged = gram.clone();
        for i in 0..k {
            ridged[(i, i)] += Complex64::new(lambda, 0.0);
        }
        if let Some(gains) = cholesky_solve_checked(&ridged, &rhs) {
            return Ok(LsGains {
                gains,
                ridged: true,
            });
        }
        lambda *= 10.0;
    }
    Err(Error::Numerical(
        "gain normal equations failed to factor even with ridge".into(),
    ))
}

/// Wraps an angle into (-pi, pi].
fn wrap_angle(x: f64) -> f64 {
    let w = x - 2.0 * PI * (x / (2.0 * PI)).round();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Per-slot imperfection estimates recovered from per-slot gains and
/// delays. Index `[t]` is the t-th slot of the estimation window;
/// `phi[t][k]` is the phase of path k relative to path 1.
#[derive(Debug, Clone)]
pub struct ImperfectionInit {
    /// Common phase per slot (absorbs the reference path's phase).
    pub epsilon: Vec<f64>,
    /// Per-slot per-path phases relative to the reference path.
    pub phi: Vec<Vec<f64>>,
    /// Timing offset per slot, seconds.
    pub tau0: Vec<f64>,
}

/// Recovers per-slot imperfections from per-slot least-squares gains
/// and matched delays.
///
/// With per-slot gains `a[t][k]` and delays `d[t][k]` (path k matched
/// across slots, path 0 the reference), slot t against the anchor:
///   eps[t]    = arg(a[t][0] / a[0][0])
///   phi[t][k] = arg(a[t][k] a[0][0] / (a[0][k] a[t][0]))
///   tau0[t]   = mean_k(d[t][k] - d[0][k])
/// A vanished reference gain (exactly zero in the anchor slot or in
/// slot t) is unrecoverable and errors.
pub fn init_imperfections(gains: &[CVec], delays: &[Vec<f64>]) -> Result<ImperfectionInit> {
    assert_eq!(gains.len(), delays.len(), "one gain vector per slot");
    let slots = gains.len();
    assert!(slots > 0, "at least one slot");
    let k = gains[0].len();
    let anchor_ref = gains[0][0];
    if anchor_ref.norm_sqr() == 0.0 {
        return Err(Error::ReferencePathVanished);
    }
    let mut epsilon = vec![0.0; slots];
    let mut phi = vec![vec![0.0; k]; slots];
    let mut tau0 = vec![0.0; slots];
    for t in 1..slots {
        let slot_ref = gains[t][0];
        if slot_ref.norm_sqr() == 0.0 {
            return Err(Error::ReferencePathVanished);
        }
        epsilon[t] = (slot_ref * anchor_ref.conj()).arg();
        for p in 1..k {
            let num = gains[t][p] * anchor_ref;
            let den = gains[0][p] * slot_ref;
            if den.norm_sqr() == 0.0 {
                return Err(Error::ReferencePathVanished);
            }
            phi[t][p] = (num * den.conj()).arg();
        }
        let mut acc = 0.0;
        for p in 0..k {
            acc += delays[t][p] - delays[0][p];
        }
        tau0[t] = acc / k as f64;
    }
    Ok(ImperfectionInit { epsilon, phi, tau0 })
}

/// Fits the per-slot phase increment: unwraps the wrapped per-slot
/// phases and regresses them through the origin against the slot index,
/// so `phases[t] ~ t * slope`.
pub fn phase_slope(phases: &[f64]) -> f64 {
    if phases.len() < 2 {
        return 0.0;
    }
    let mut unwrapped = vec![phases[0]; phases.len()];
    for t in 1..phases.len() {
        let d = wrap_angle(phases[t] - phases[t - 1]);
        unwrapped[t] = unwrapped[t - 1] + d;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, u) in unwrapped.iter().enumerate() {
        let x = t as f64;
        num += x * u;
        den += x * x;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Hopping slots spliced into one tall frame after compensation.
///
/// Block t occupies rows `t*P .. (t+1)*P - 1` and has been multiplied
/// by `exp(-j eps[t])` and by the conjugate timing-offset ramp, so only
/// the per-path Doppler phases `phi[t][k]` remain; those are carried by
/// the per-path stacked dictionaries.
#[derive(Debug, Clone)]
pub struct CompensatedFrame {
    /// Stacked compensated observations, (sum of P) x N_r.
    pub y: CMat,
    /// Sounded subcarrier indices per slot block.
    pub rows: Vec<Vec<usize>>,
    /// Pilot sequence per slot block.
    pub pilots: Vec<CVec>,
    /// Subcarrier spacing in Hz shared by all blocks.
    pub subcarrier_spacing_hz: f64,
    /// Per-slot per-path dictionary phases (radians).
    pub phi: Vec<Vec<f64>>,
}

impl CompensatedFrame {
    /// Number of slot blocks.
    pub fn slots(&self) -> usize {
        self.rows.len()
    }

    /// Number of paths the dictionary phases cover.
    pub fn paths(&self) -> usize {
        self.phi.first().map_or(0, |p| p.len())
    }

    /// Stacked per-path dictionary: block t is the pilot-weighted delay
    /// response on that slot's tones, rotated by `exp(j phi[t][k])`.
    pub fn stacked_dictionary(&self, k: usize, tau: f64) -> CVec {
        let total: usize = self.rows.iter().map(|r| r.len()).sum();
        let mut g = CVec::zeros(total);
        let w = -2.0 * PI * self.subcarrier_spacing_hz * tau;
        let mut at = 0;
        for t in 0..self.slots() {
            let rot = Complex64::cis(self.phi[t][k]);
            for (p, &row) in self.rows[t].iter().enumerate() {
                g[at + p] = rot * self.pilots[t][p] * Complex64::cis(w * row as f64);
            }
            at += self.rows[t].len();
        }
        g
    }
}

/// Removes the estimated common phase and timing-offset ramp from each
/// slot and stacks the blocks in slot order.
///
/// Row p of block t is scaled by `exp(-j eps[t]) * exp(+j 2 pi n_p f_s
/// tau0[t])`, the conjugate of the timing ramp on that tone. With the
/// true imperfections supplied and noiseless input, the result equals
/// the clean stacked model exactly.
pub fn compensate_and_splice(
    obs: &[SrsObservation],
    cfg: &SystemConfig,
    epsilon: &[f64],
    tau0: &[f64],
    phi: &[Vec<f64>],
) -> CompensatedFrame {
    assert_eq!(obs.len(), epsilon.len());
    assert_eq!(obs.len(), tau0.len());
    assert_eq!(obs.len(), phi.len());
    let nr = cfg.n_rx();
    let total: usize = obs.iter().map(|o| o.rows.len()).sum();
    let mut y = CMat::zeros(total, nr);
    let mut rows = Vec::with_capacity(obs.len());
    let mut pilots = Vec::with_capacity(obs.len());
    let mut at = 0;
    for (t, o) in obs.iter().enumerate() {
        let eps = Complex64::cis(-epsilon[t]);
        let w = 2.0 * PI * cfg.subcarrier_spacing_hz * tau0[t];
        for (p, &row) in o.rows.iter().enumerate() {
            let scale = eps * Complex64::cis(w * row as f64);
            for c in 0..nr {
                y[(at + p, c)] = scale * o.y[(p, c)];
            }
        }
        at += o.rows.len();
        rows.push(o.rows.clone());
        pilots.push(o.pilot.clone());
    }
    CompensatedFrame {
        y,
        rows,
        pilots,
        subcarrier_spacing_hz: cfg.subcarrier_spacing_hz,
        phi: phi.to_vec(),
    }
}

/// Working state of the alternating refinement: common multipath
/// parameters plus per-slot imperfections over the estimation window.
///
/// `phi_inc[k]` is the per-slot phase increment of path k relative to
/// path 0, so the phase at slot t is `t * phi_inc[k]`; entry 0 stays
/// zero (absorbed into `epsilon`), as do `epsilon[0]` and `tau0[0]`.
#[derive(Debug, Clone)]
pub struct RtstState {
    /// Path delays, seconds.
    pub delays: Vec<f64>,
    /// Path azimuths, radians.
    pub azimuths: Vec<f64>,
    /// Path elevations, radians.
    pub elevations: Vec<f64>,
    /// Complex path gains.
    pub gains: CVec,
    /// Per-path phase increment per slot, radians.
    pub phi_inc: Vec<f64>,
    /// Common phase per slot, radians.
    pub epsilon: Vec<f64>,
    /// Timing offset per slot, seconds.
    pub tau0: Vec<f64>,
}

impl RtstState {
    /// Number of paths.
    pub fn paths(&self) -> usize {
        self.delays.len()
    }

    /// Materializes the per-slot per-path phase table `t * phi_inc[k]`.
    pub fn phi_table(&self, slots: usize) -> Vec<Vec<f64>> {
        (0..slots)
            .map(|t| self.phi_inc.iter().map(|p| t as f64 * p).collect())
            .collect()
    }
}

/// Model columns for one slot: column k is
/// `exp(j(eps[t] + t*phi_inc[k])) * (a_k kron g_k(tau_k + tau0[t]))`
/// laid out to match the column-major vectorization of the observation.
fn slot_columns(obs: &SrsObservation, cfg: &SystemConfig, state: &RtstState, t: usize) -> CMat {
    let k = state.paths();
    let nr = cfg.n_rx();
    let p = obs.rows.len();
    let mut a = CMat::zeros(nr, k);
    let mut g = CMat::zeros(p, k);
    for c in 0..k {
        let steer = steering_vector_upa(state.azimuths[c], state.elevations[c], cfg.nx, cfg.ny);
        a.set_column(c, &steer);
        let resp = pilot_delay_steering(
            &obs.rows,
            &obs.pilot,
            cfg.subcarrier_spacing_hz,
            state.delays[c] + state.tau0[t],
        );
        g.set_column(c, &resp);
    }
    let mut m = khatri_rao(&a, &g);
    for c in 0..k {
        let rot = Complex64::cis(state.epsilon[t] + t as f64 * state.phi_inc[c]);
        for r in 0..m.nrows() {
            m[(r, c)] *= rot;
        }
    }
    m
}

fn slot_observation_vec(obs: &SrsObservation) -> CVec {
    CVec::from_column_slice(obs.y.as_slice())
}

/// Squared-error objective over the window, normalized by the total
/// observation energy so values are comparable across scenarios.
pub fn rtst_objective(obs: &[SrsObservation], cfg: &SystemConfig, state: &RtstState) -> f64 {
    let mut err = 0.0;
    let mut energy = 0.0;
    for (t, o) in obs.iter().enumerate() {
        let y = slot_observation_vec(o);
        let m = slot_columns(o, cfg, state, t);
        let r = &y - m * &state.gains;
        err += r.norm_squared();
        energy += y.norm_squared();
    }
    if energy > 0.0 {
        err / energy
    } else {
        0.0
    }
}

/// Objective value with analytic first derivatives (and diagonal
/// curvature estimates) in the per-path phase increments and per-slot
/// timing offsets. Entries for the frozen parameters (path 0, slot 0)
/// are zero.
#[derive(Debug, Clone)]
pub struct ObjectiveGradients {
    /// Normalized objective at the expansion point.
    pub objective: f64,
    /// d objective / d phi_inc[k].
    pub grad_phi: Vec<f64>,
    /// d objective / d tau0[t].
    pub grad_tau0: Vec<f64>,
    /// Diagonal Gauss-Newton curvature for each phi_inc[k].
    pub curv_phi: Vec<f64>,
    /// Diagonal Gauss-Newton curvature for each tau0[t].
    pub curv_tau0: Vec<f64>,
}

/// Computes the normalized objective and its analytic gradients with
/// respect to the free phase increments and timing offsets.
pub fn objective_gradients(
    obs: &[SrsObservation],
    cfg: &SystemConfig,
    state: &RtstState,
) -> ObjectiveGradients {
    let k = state.paths();
    let slots = obs.len();
    let mut energy = 0.0;
    for o in obs {
        energy += o.y.norm_squared();
    }
    if energy <= 0.0 {
        energy = 1.0;
    }
    let mut objective = 0.0;
    let mut grad_phi = vec![0.0; k];
    let mut curv_phi = vec![0.0; k];
    let mut grad_tau0 = vec![0.0; slots];
    let mut curv_tau0 = vec![0.0; slots];
    for (t, o) in obs.iter().enumerate() {
        let p = o.rows.len();
        let y = slot_observation_vec(o);
        let m = slot_columns(o, cfg, state, t);
        let model = &m * &state.gains;
        let r = &y - &model;
        objective += r.norm_squared() / energy;
        let tf = t as f64;
        for c in 1..k {
            // u = alpha_c * column c; d model / d phi_inc[c] = j * t * u.
            let col = m.column(c);
            let alpha = state.gains[c];
            let mut udr = Complex64::new(0.0, 0.0);
            let mut unorm = 0.0;
            for i in 0..col.len() {
                let u = alpha * col[i];
                udr += u.conj() * r[i];
                unorm += u.norm_sqr();
            }
            grad_phi[c] += -2.0 * tf * udr.im / energy;
            curv_phi[c] += 2.0 * tf * tf * unorm / energy;
        }
        if t > 0 {
            // d model / d tau0[t] multiplies each entry by -j 2 pi f_s n.
            let mut ddr = Complex64::new(0.0, 0.0);
            let mut dnorm = 0.0;
            for i in 0..model.len() {
                let w = 2.0 * PI * cfg.subcarrier_spacing_hz * o.rows[i % p] as f64;
                let d = Complex64::new(0.0, -w) * model[i];
                ddr += d.conj() * r[i];
                dnorm += d.norm_sqr();
            }
            grad_tau0[t] += -2.0 * ddr.re / energy;
            curv_tau0[t] += 2.0 * dnorm / energy;
        }
    }
    ObjectiveGradients {
        objective,
        grad_phi,
        grad_tau0,
        curv_phi,
        curv_tau0,
    }
}

/// Closed-form maximum-likelihood updates: gains from the stacked
/// normal equations over all slots, then the per-slot common phase
/// `eps[t] = arg(psi_t^H y_t)` where `psi_t` is the modeled slot
/// response without its common phase. Returns whether the gain solve
/// needed a ridge.
pub fn ml_gains_epsilon(
    obs: &[SrsObservation],
    cfg: &SystemConfig,
    state: &mut RtstState,
) -> Result<bool> {
    let k = state.paths();
    let nr = cfg.n_rx();
    let total: usize = obs.iter().map(|o| o.rows.len() * nr).sum();
    let mut v = CMat::zeros(total, k);
    let mut y = CVec::zeros(total);
    let mut at = 0;
    for (t, o) in obs.iter().enumerate() {
        let m = slot_columns(o, cfg, state, t);
        let rows = m.nrows();
        v.view_mut((at, 0), (rows, k)).copy_from(&m);
        y.rows_mut(at, rows)
            .copy_from(&slot_observation_vec(o));
        at += rows;
    }
    let ls = ls_gains(&y, &v)?;
    state.gains = ls.gains;
    for (t, o) in obs.iter().enumerate().skip(1) {
        let m = slot_columns(o, cfg, state, t);
        let psi = (&m * &state.gains) * Complex64::cis(-state.epsilon[t]);
        let inner = psi.dotc(&slot_observation_vec(o));
        if inner.norm_sqr() > 0.0 {
            state.epsilon[t] = inner.arg();
        }
    }
    Ok(ls.ridged)
}

/// Outcome of one backtracking gradient step.
#[derive(Debug, Clone, Copy)]
pub struct GradStep {
    /// Objective before the step.
    pub objective_before: f64,
    /// Objective after the accepted step (equal when stalled).
    pub objective_after: f64,
    /// True when 30 halvings failed to find a decrease and the old
    /// iterate was kept.
    pub stalled: bool,
}

/// One curvature-scaled gradient step on the free phase increments and
/// timing offsets with Armijo backtracking (sigma = 0.3, beta = 0.5,
/// at most 30 halvings from the unit step).
pub fn grad_phi_tau0(
    obs: &[SrsObservation],
    cfg: &SystemConfig,
    state: &mut RtstState,
) -> GradStep {
    let og = objective_gradients(obs, cfg, state);
    let k = state.paths();
    let slots = obs.len();
    let mut dir_phi = vec![0.0; k];
    let mut dir_tau0 = vec![0.0; slots];
    let mut slope = 0.0;
    for c in 1..k {
        if og.curv_phi[c] > 0.0 {
            dir_phi[c] = -og.grad_phi[c] / og.curv_phi[c];
            slope += og.grad_phi[c] * dir_phi[c];
        }
    }
    for t in 1..slots {
        if og.curv_tau0[t] > 0.0 {
            dir_tau0[t] = -og.grad_tau0[t] / og.curv_tau0[t];
            slope += og.grad_tau0[t] * dir_tau0[t];
        }
    }
    if slope >= 0.0 {
        return GradStep {
            objective_before: og.objective,
            objective_after: og.objective,
            stalled: false,
        };
    }
    let mut step = 1.0;
    for _ in 0..=30 {
        let mut cand = state.clone();
        for c in 1..k {
            cand.phi_inc[c] += step * dir_phi[c];
        }
        for t in 1..slots {
            cand.tau0[t] += step * dir_tau0[t];
        }
        let j = rtst_objective(obs, cfg, &cand);
        if j <= og.objective + 0.3 * step * slope {
            *state = cand;
            return GradStep {
                objective_before: og.objective,
                objective_after: j,
                stalled: false,
            };
        }
        step *= 0.5;
    }
    GradStep {
        objective_before: og.objective,
        objective_after: og.objective,
        stalled: true,
    }
}

fn grid_max(eval: &mut impl FnMut(f64) -> f64, start: f64, spacing: f64, n: usize) -> (f64, bool) {
    let mut best_i = 0;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..n {
        let v = eval(start + spacing * i as f64);
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    (start + spacing * best_i as f64, best_i == 0 || best_i + 1 == n)
}

/// Multi-stage grid zoom: a coarse window of `2*radius+1` points at
/// `spacing`, then repeated 10x-finer sweeps recentered on the running
/// maximum. Reports whether the coarse stage peaked at a window edge.
fn zoom_max_1d(
    eval: &mut impl FnMut(f64) -> f64,
    center: f64,
    spacing: f64,
    radius: usize,
    points: usize,
    stages: usize,
) -> (f64, bool) {
    let (mut c, edge) = grid_max(eval, center - radius as f64 * spacing, spacing, 2 * radius + 1);
    let mut sp = spacing;
    for _ in 1..stages {
        let half = sp;
        sp = 2.0 * half / (points - 1) as f64;
        let (cn, _) = grid_max(eval, c - half, sp, points);
        c = cn;
    }
    (c, edge)
}

/// 2D analog of the zoom for angle windows, with coordinates clamped
/// into `bounds`.
fn zoom_max_2d(
    eval: &mut impl FnMut(f64, f64) -> f64,
    center: (f64, f64),
    spacing: (f64, f64),
    radius: usize,
    points: usize,
    stages: usize,
    bounds: (f64, f64),
) -> (f64, f64) {
    let clamp = |x: f64| x.clamp(bounds.0, bounds.1);
    let mut c = center;
    let mut sp = spacing;
    let mut n = 2 * radius + 1;
    for s in 0..stages {
        let mut best = (f64::NEG_INFINITY, c.0, c.1);
        let mid = (n as f64 - 1.0) / 2.0;
        for i in 0..n {
            for j in 0..n {
                let x = clamp(c.0 + sp.0 * (i as f64 - mid));
                let y = clamp(c.1 + sp.1 * (j as f64 - mid));
                let v = eval(x, y);
                if v > best.0 {
                    best = (v, x, y);
                }
            }
        }
        c = (best.1, best.2);
        if s + 1 < stages {
            sp = (
                2.0 * sp.0 / (points - 1) as f64,
                2.0 * sp.1 / (points - 1) as f64,
            );
            n = points;
        }
    }
    c
}

/// Pseudospectrum value for the refinement sweeps: the reciprocal of
/// the residual energy left after projecting `g` onto the signal
/// basis. Computing the residual vector first keeps the value accurate
/// when the denominator approaches zero, where the norm-minus-
/// projection difference would lose everything to cancellation; the
/// relative floor only guards a literal division by zero.
fn music_value(signal: &CMat, g: &CVec) -> f64 {
    let n2 = g.norm_squared();
    if n2 <= 0.0 {
        return 0.0;
    }
    let coef = signal.ad_mul(g);
    let r = g - signal * coef;
    let denom = r.norm_squared().max(1e-28 * n2).max(f64::MIN_POSITIVE);
    1.0 / denom
}

fn deflate(v: &mut CVec, basis: &[CVec]) {
    for q in basis {
        let c = q.dotc(v);
        *v -= q * c;
    }
}

/// Options for the windowed refinement sweeps.
#[derive(Debug, Clone)]
pub struct SicOptions {
    /// Half-width of the coarse window, in coarse grid steps.
    pub window_radius: usize,
    /// Points per zoom stage after the coarse window.
    pub zoom_points: usize,
    /// Total zoom stages (the coarse window included).
    pub zoom_stages: usize,
}

impl Default for SicOptions {
    fn default() -> Self {
        Self {
            window_radius: 5,
            zoom_points: 21,
            zoom_stages: 10,
        }
    }
}

/// Delays re-estimated by successive interference cancellation.
#[derive(Debug, Clone)]
pub struct SicOutcome {
    /// Updated delays, aligned with the input path indices.
    pub delays: Vec<f64>,
    /// A coarse window peaked at its edge and was widened once.
    pub widened: bool,
    /// A widened window still peaked at its edge.
    pub boundary: bool,
}

/// Re-estimates path delays on the spliced frame, strongest gain
/// first. Each step sweeps that path's stacked dictionary, deflated by
/// the already-estimated paths, against the equally deflated frame, so
/// at a true delay the pseudospectrum denominator vanishes and the
/// zoom pins the peak; the estimated component is then projected out
/// of the frame before the next path.
pub fn sic_delay_estimation(
    frame: &CompensatedFrame,
    gains: &CVec,
    delays: &[f64],
    coarse_step: f64,
    opts: &SicOptions,
) -> Result<SicOutcome> {
    let k = delays.len();
    assert_eq!(gains.len(), k, "one gain per path");
    assert_eq!(frame.paths(), k, "frame dictionary phases must cover all paths");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        gains[b]
            .norm_sqr()
            .partial_cmp(&gains[a].norm_sqr())
            .unwrap()
            .then(delays[a].partial_cmp(&delays[b]).unwrap())
    });
    let mut y = frame.y.clone();
    let mut basis: Vec<CVec> = Vec::with_capacity(k);
    let mut out = delays.to_vec();
    let mut widened = false;
    let mut boundary = false;
    for (step_i, &kp) in order.iter().enumerate() {
        let remaining = k - step_i;
        let decomp = subspace_from_snapshots(&y, remaining, y.ncols())?;
        let mut eval = |tau: f64| {
            let mut g = frame.stacked_dictionary(kp, tau);
            deflate(&mut g, &basis);
            music_value(&decomp.signal, &g)
        };
        let (mut tau, edge) = zoom_max_1d(
            &mut eval,
            out[kp],
            coarse_step,
            opts.window_radius,
            opts.zoom_points,
            opts.zoom_stages,
        );
        if edge {
            widened = true;
            let (tau2, edge2) = zoom_max_1d(
                &mut eval,
                out[kp],
                coarse_step,
                opts.window_radius * 2,
                opts.zoom_points,
                opts.zoom_stages,
            );
            tau = tau2;
            if edge2 {
                boundary = true;
            }
        }
        out[kp] = tau;
        let mut g = frame.stacked_dictionary(kp, tau);
        deflate(&mut g, &basis);
        let norm = g.norm();
        if norm > 1e-8 * (y.nrows() as f64).sqrt() {
            let q = g / Complex64::new(norm, 0.0);
            let coeffs = q.adjoint() * &y;
            for c in 0..y.ncols() {
                let scale = coeffs[(0, c)];
                for r in 0..y.nrows() {
                    y[(r, c)] -= q[r] * scale;
                }
            }
            basis.push(q);
        }
    }
    Ok(SicOutcome {
        delays: out,
        widened,
        boundary,
    })
}

/// Pseudospectrum of one path's stacked dictionary against the whole
/// (undeflated) spliced frame; exposes the cross-path ambiguity that
/// cancellation removes.
pub fn per_path_delay_spectrum(
    frame: &CompensatedFrame,
    path: usize,
    model_order: usize,
    taus: &[f64],
) -> Result<Spectrum> {
    let decomp = subspace_from_snapshots(&frame.y, model_order, frame.y.ncols())?;
    Ok(subspace::t_music_spectrum(
        &decomp,
        |tau| frame.stacked_dictionary(path, tau),
        taus,
    ))
}

/// Refines each path's angles by a windowed 2D pseudospectrum sweep on
/// the spatial subspace of the spliced frame. The spatial factor of
/// the frame spans the true array responses regardless of the temporal
/// imperfections, so with noiseless input the denominator vanishes at
/// the true angles.
pub fn refine_angles(
    frame: &CompensatedFrame,
    cfg: &SystemConfig,
    model_order: usize,
    azimuths: &[f64],
    elevations: &[f64],
    az_step: f64,
    el_step: f64,
    opts: &SicOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = frame.y.transpose();
    let decomp = subspace_from_snapshots(&z, model_order, frame.y.nrows())?;
    let mut az_out = azimuths.to_vec();
    let mut el_out = elevations.to_vec();
    for k in 0..azimuths.len() {
        let mut eval = |theta: f64, phi: f64| {
            let a = steering_vector_upa(theta, phi, cfg.nx, cfg.ny);
            music_value(&decomp.signal, &a)
        };
        let (az, el) = zoom_max_2d(
            &mut eval,
            (azimuths[k], elevations[k]),
            (az_step, el_step),
            opts.window_radius,
            opts.zoom_points,
            opts.zoom_stages,
            (0.0, PI),
        );
        az_out[k] = az;
        el_out[k] = el;
    }
    Ok((az_out, el_out))
}

/// Options for the full alternating refinement.
#[derive(Debug, Clone)]
pub struct RtstOptions {
    /// Alternating-optimization iterations.
    pub i_ao: usize,
    /// Per-slot subspace pipeline options for initialization.
    pub tst: TstOptions,
    /// Windowed-refinement options shared by delays and angles.
    pub sic: SicOptions,
    /// Relative tolerance for the per-iteration monotonicity guard.
    pub monotone_tol: f64,
}

impl Default for RtstOptions {
    fn default() -> Self {
        Self {
            i_ao: 10,
            tst: TstOptions::default(),
            sic: SicOptions::default(),
            monotone_tol: 1e-8,
        }
    }
}

/// Diagnostic flags accumulated over the refinement.
#[derive(Debug, Clone, Copy, Default)]
pub struct RtstFlags {
    /// Cross-slot path matching ran out of candidates in some slot (or
    /// the anchor slot detected fewer paths than the modal order) and
    /// fell back to anchor parameters.
    pub matched_fallback: bool,
    /// Some delay window was widened after peaking at its edge.
    pub sic_widened: bool,
    /// Some widened delay window still peaked at its edge.
    pub sic_boundary: bool,
    /// Some gradient step exhausted its halvings and kept the old iterate.
    pub grad_stalled: bool,
    /// Some iteration's sweep updates raised the objective and were
    /// rolled back to a closed-form-only pass.
    pub iteration_reverted: bool,
    /// Some gain solve needed a ridge.
    pub gains_ridged: bool,
}

/// Stage-one output: common multipath parameters, per-slot
/// imperfections over the window, and the objective trace.
#[derive(Debug, Clone)]
pub struct RefinedEstimate {
    /// Estimated paths, strongest first; Dopplers are the phase slopes
    /// divided by `2 pi T_SRS` (relative to path 1, which reads zero).
    pub paths: PathSet,
    /// Per-path phase increment per slot, aligned with `paths`.
    pub phi_inc: Vec<f64>,
    /// Common phase per slot of the window.
    pub epsilon: Vec<f64>,
    /// Timing offset per slot of the window.
    pub tau0: Vec<f64>,
    /// Normalized objective: entry 0 at initialization, then one entry
    /// per alternating iteration.
    pub objective_log: Vec<f64>,
    /// Common model order used across the window.
    pub model_order: usize,
    /// Diagnostics.
    pub flags: RtstFlags,
}

impl RefinedEstimate {
    /// Reconstructs the full-band response at window slot `t` from the
    /// estimated parameters.
    pub fn reconstruct(&self, cfg: &SystemConfig, t: usize) -> CMat {
        assert!(t < self.epsilon.len(), "slot outside the estimation window");
        let n = cfg.num_subcarriers;
        let nr = cfg.n_rx();
        let mut h = CMat::zeros(n, nr);
        let eps = Complex64::cis(self.epsilon[t]);
        for k in 0..self.paths.len() {
            let a = steering_vector_upa(
                self.paths.azimuths[k],
                self.paths.elevations[k],
                cfg.nx,
                cfg.ny,
            );
            let weight =
                eps * self.paths.gains[k] * Complex64::cis(t as f64 * self.phi_inc[k]);
            let w = -2.0 * PI * cfg.subcarrier_spacing_hz * (self.paths.delays[k] + self.tau0[t]);
            for row in 0..n {
                let c = weight * Complex64::cis(w * row as f64);
                for col in 0..nr {
                    h[(row, col)] += c * a[col];
                }
            }
        }
        h
    }
}

/// Returns the most frequent value, breaking ties toward the smaller.
fn mode_smallest(values: &[usize]) -> usize {
    let mut counts = std::collections::BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_insert(0usize) += 1;
    }
    let mut best = (0usize, 0usize);
    for (&v, &c) in &counts {
        if c > best.1 {
            best = (v, c);
        }
    }
    best.0
}

/// Full stage-one estimator over one estimation window of hopping
/// observations (slot order, anchor first).
///
/// Initialization runs the per-slot subspace pipeline, fixes the model
/// order to the mode of the per-slot orders, matches paths across
/// slots by nearest delay against the anchor slot, re-solves per-slot
/// gains, and recovers per-slot imperfections plus per-path phase
/// slopes. Each alternating iteration then splices the compensated
/// slots, re-estimates delays by windowed cancellation sweeps and
/// angles by windowed spatial sweeps, and applies the closed-form gain
/// and common-phase updates followed by one backtracking gradient step
/// on the phase increments and timing offsets. An iteration whose
/// sweeps raise the objective is rolled back to its closed-form-only
/// version, so the logged objective never increases beyond the
/// monotonicity tolerance.
pub fn r_tst_music(
    obs: &[SrsObservation],
    cfg: &SystemConfig,
    grids: &SweepGrids,
    opts: &RtstOptions,
) -> Result<RefinedEstimate> {
    assert!(!obs.is_empty(), "estimation window must not be empty");
    let slots = obs.len();
    let mut flags = RtstFlags::default();

    let mut per_slot = Vec::with_capacity(slots);
    for o in obs {
        per_slot.push(subspace::tst_music_obs(o, cfg, grids, &opts.tst)?);
    }
    let orders: Vec<usize> = per_slot.iter().map(|r| r.model_order).collect();
    let mut k_star = mode_smallest(&orders);
    if per_slot[0].paths.len() < k_star {
        k_star = per_slot[0].paths.len();
        flags.matched_fallback = true;
    }
    if k_star == 0 {
        return Err(Error::NoDetectablePaths);
    }

    // Anchor-slot reference paths, strongest first.
    let anchor = &per_slot[0].paths;
    let ref_delays: Vec<f64> = anchor.delays[..k_star].to_vec();
    let ref_az: Vec<f64> = anchor.azimuths[..k_star].to_vec();
    let ref_el: Vec<f64> = anchor.elevations[..k_star].to_vec();

    // Match each slot's detections to the reference by nearest delay.
    let mut slot_delays = vec![vec![0.0; k_star]; slots];
    let mut slot_az = vec![vec![0.0; k_star]; slots];
    let mut slot_el = vec![vec![0.0; k_star]; slots];
    for t in 0..slots {
        let cand = &per_slot[t].paths;
        let mut used = vec![false; cand.len()];
        for k in 0..k_star {
            let mut best: Option<(usize, f64)> = None;
            for (i, &d) in cand.delays.iter().enumerate() {
                if used[i] {
                    continue;
                }
                let dist = (d - ref_delays[k]).abs();
                if best.map_or(true, |(_, bd)| dist < bd) {
                    best = Some((i, dist));
                }
            }
            match best {
                Some((i, _)) => {
                    used[i] = true;
                    slot_delays[t][k] = cand.delays[i];
                    slot_az[t][k] = cand.azimuths[i];
                    slot_el[t][k] = cand.elevations[i];
                }
                None => {
                    flags.matched_fallback = true;
                    slot_delays[t][k] = ref_delays[k];
                    slot_az[t][k] = ref_az[k];
                    slot_el[t][k] = ref_el[k];
                }
            }
        }
    }

    // Per-slot least-squares gains at the matched parameters.
    let nr = cfg.n_rx();
    let mut slot_gains = Vec::with_capacity(slots);
    for t in 0..slots {
        let p = obs[t].rows.len();
        let mut a = CMat::zeros(nr, k_star);
        let mut g = CMat::zeros(p, k_star);
        for k in 0..k_star {
            a.set_column(
                k,
                &steering_vector_upa(slot_az[t][k], slot_el[t][k], cfg.nx, cfg.ny),
            );
            g.set_column(
                k,
                &pilot_delay_steering(
                    &obs[t].rows,
                    &obs[t].pilot,
                    cfg.subcarrier_spacing_hz,
                    slot_delays[t][k],
                ),
            );
        }
        let ls = ls_gains(&slot_observation_vec(&obs[t]), &khatri_rao(&a, &g))?;
        flags.gains_ridged |= ls.ridged;
        slot_gains.push(ls.gains);
    }

    let init = init_imperfections(&slot_gains, &slot_delays)?;
    let mut phi_inc = vec![0.0; k_star];
    for k in 1..k_star {
        let series: Vec<f64> = (0..slots).map(|t| init.phi[t][k]).collect();
        phi_inc[k] = phase_slope(&series);
    }
    let mut azimuths = vec![0.0; k_star];
    let mut elevations = vec![0.0; k_star];
    for k in 0..k_star {
        azimuths[k] = (0..slots).map(|t| slot_az[t][k]).sum::<f64>() / slots as f64;
        elevations[k] = (0..slots).map(|t| slot_el[t][k]).sum::<f64>() / slots as f64;
    }
    let mut state = RtstState {
        delays: slot_delays[0].clone(),
        azimuths,
        elevations,
        gains: slot_gains[0].clone(),
        phi_inc,
        epsilon: init.epsilon,
        tau0: init.tau0,
    };

    let mut objective_log = vec![rtst_objective(obs, cfg, &state)];
    for _ in 0..opts.i_ao {
        let j_prev = *objective_log.last().unwrap();
        let prev_state = state.clone();

        let phi_table = state.phi_table(slots);
        let frame = compensate_and_splice(obs, cfg, &state.epsilon, &state.tau0, &phi_table);
        let sic = sic_delay_estimation(
            &frame,
            &state.gains,
            &state.delays,
            grids.delay_step(),
            &opts.sic,
        )?;
        flags.sic_widened |= sic.widened;
        flags.sic_boundary |= sic.boundary;
        state.delays = sic.delays;
        let (az, el) = refine_angles(
            &frame,
            cfg,
            k_star,
            &state.azimuths,
            &state.elevations,
            grids.azimuth_step(),
            grids.elevation_step(),
            &opts.sic,
        )?;
        state.azimuths = az;
        state.elevations = el;
        flags.gains_ridged |= ml_gains_epsilon(obs, cfg, &mut state)?;
        let step = grad_phi_tau0(obs, cfg, &mut state);
        flags.grad_stalled |= step.stalled;

        let mut j_new = rtst_objective(obs, cfg, &state);
        if j_new > j_prev * (1.0 + opts.monotone_tol) + f64::MIN_POSITIVE {
            // The sweep updates hurt; redo only the monotone closed-form
            // and gradient updates from the previous iterate.
            state = prev_state;
            flags.iteration_reverted = true;
            flags.gains_ridged |= ml_gains_epsilon(obs, cfg, &mut state)?;
            let step = grad_phi_tau0(obs, cfg, &mut state);
            flags.grad_stalled |= step.stalled;
            j_new = rtst_objective(obs, cfg, &state);
        }
        objective_log.push(j_new);
    }

    // Order paths by estimated power, strongest first.
    let mut idx: Vec<usize> = (0..k_star).collect();
    idx.sort_by(|&a, &b| {
        state.gains[b]
            .norm_sqr()
            .partial_cmp(&state.gains[a].norm_sqr())
            .unwrap()
            .then(state.delays[a].partial_cmp(&state.delays[b]).unwrap())
    });
    let srs = cfg.srs_period_s;
    let paths = PathSet {
        gains: idx.iter().map(|&i| state.gains[i]).collect(),
        azimuths: idx.iter().map(|&i| state.azimuths[i]).collect(),
        elevations: idx.iter().map(|&i| state.elevations[i]).collect(),
        delays: idx.iter().map(|&i| state.delays[i]).collect(),
        dopplers: idx
            .iter()
            .map(|&i| state.phi_inc[i] / (2.0 * PI * srs))
            .collect(),
    };
    Ok(RefinedEstimate {
        paths,
        phi_inc: idx.iter().map(|&i| state.phi_inc[i]).collect(),
        epsilon: state.epsilon,
        tau0: state.tau0,
        objective_log,
        model_order: k_star,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, purpose};
    use crate::scenario::{
        full_band_cfr, hopping_selection, imperfection_trace, zc_pilot, ImperfectionModel,
        ImperfectionTrace, SystemConfig,
    };
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_cmat(rows: usize, cols: usize, seed: u64) -> CMat {
        let mut rng = rng::substream(seed, &[purpose::PATHS]);
        CMat::from_fn(rows, cols, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        })
    }

    #[test]
    fn khatri_rao_matches_manual_kronecker() {
        let a = random_cmat(3, 2, 11);
        let g = random_cmat(4, 2, 12);
        let kr = khatri_rao(&a, &g);
        assert_eq!(kr.nrows(), 12);
        for c in 0..2 {
            for ia in 0..3 {
                for ig in 0..4 {
                    assert_relative_eq!(
                        kr[(ia * 4 + ig, c)].re,
                        (a[(ia, c)] * g[(ig, c)]).re,
                        epsilon = 1e-15
                    );
                    assert_relative_eq!(
                        kr[(ia * 4 + ig, c)].im,
                        (a[(ia, c)] * g[(ig, c)]).im,
                        epsilon = 1e-15
                    );
                }
            }
        }
    }

    #[test]
    fn khatri_rao_maps_gains_to_vectorized_observation() {
        // Y = G diag(c) A^T vectorizes column-major to (A kr G) c.
        let a = random_cmat(5, 3, 21);
        let g = random_cmat(7, 3, 22);
        let c = CVec::from_fn(3, |i, _| Complex64::new(0.3 + i as f64, -0.2 * i as f64));
        let y = &g * CMat::from_diagonal(&c) * a.transpose();
        let vec_y = CVec::from_column_slice(y.as_slice());
        let model = khatri_rao(&a, &g) * &c;
        assert!((vec_y - model).norm() < 1e-12);
    }

    #[test]
    fn ls_gains_recovers_consistent_system() {
        let v = random_cmat(24, 3, 31);
        let c = CVec::from_fn(3, |i, _| Complex64::new(1.0 - i as f64, 0.5 * i as f64));
        let y = &v * &c;
        let sol = ls_gains(&y, &v).unwrap();
        assert!(!sol.ridged);
        assert!((sol.gains - c).norm() < 1e-10);
    }

    #[test]
    fn ls_gains_single_unit_column_is_inner_product() {
        let mut v = random_cmat(16, 1, 41);
        let norm = v.column(0).norm();
        v /= Complex64::new(norm, 0.0);
        let y = random_cmat(16, 1, 42).column(0).into_owned();
        let sol = ls_gains(&y, &v).unwrap();
        let expected = v.column(0).adjoint() * &y;
        assert!((sol.gains[0] - expected[(0, 0)]).norm() < 1e-12);
    }

    #[test]
    fn ls_gains_residual_orthogonal_to_columns() {
        let v = random_cmat(32, 4, 51);
        let y = random_cmat(32, 1, 52).column(0).into_owned();
        let sol = ls_gains(&y, &v).unwrap();
        let residual = &y - &v * &sol.gains;
        let corr = v.adjoint() * residual;
        assert!(corr.norm() / y.norm() < 1e-8);
    }

    #[test]
    fn ls_gains_matches_explicit_normal_equation_inverse() {
        let v = random_cmat(20, 3, 61);
        let y = random_cmat(20, 1, 62).column(0).into_owned();
        let sol = ls_gains(&y, &v).unwrap();
        let gram = v.adjoint() * &v;
        let inv = gram.try_inverse().unwrap();
        let oracle = inv * (v.adjoint() * &y);
        assert!((sol.gains - oracle).norm() < 1e-10);
    }

    #[test]
    fn ls_gains_ridges_rank_deficient_dictionary() {
        let base = random_cmat(12, 1, 71);
        let mut v = CMat::zeros(12, 2);
        v.set_column(0, &base.column(0));
        v.set_column(1, &base.column(0));
        let y = base.column(0).into_owned();
        let sol = ls_gains(&y, &v).unwrap();
        assert!(sol.ridged);
        // The ridge splits the weight across the duplicated columns.
        let combined = sol.gains[0] + sol.gains[1];
        assert!((combined - Complex64::new(1.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn ls_gains_empty_dictionary_is_empty() {
        let v = CMat::zeros(8, 0);
        let y = CVec::zeros(8);
        let sol = ls_gains(&y, &v).unwrap();
        assert_eq!(sol.gains.len(), 0);
    }

    #[test]
    fn ls_gains_noise_perturbation_stays_close() {
        let v = random_cmat(64, 3, 81);
        let c = CVec::from_fn(3, |i, _| Complex64::new(1.0, i as f64));
        let mut rng = rng::substream(82, &[purpose::NOISE]);
        let noise = CVec::from_fn(64, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * 1e-6
        });
        let y = &v * &c + noise;
        let sol = ls_gains(&y, &v).unwrap();
        assert!((sol.gains - c).norm() < 1e-5);
    }

    fn angle_close(a: f64, b: f64, tol: f64) -> bool {
        wrap_angle(a - b).abs() <= tol
    }

    #[test]
    fn init_imperfections_single_slot_is_zero() {
        let gains = vec![CVec::from_vec(vec![
            Complex64::new(1.0, 0.2),
            Complex64::new(0.4, -0.1),
        ])];
        let delays = vec![vec![100e-9, 250e-9]];
        let init = init_imperfections(&gains, &delays).unwrap();
        assert_eq!(init.epsilon, vec![0.0]);
        assert_eq!(init.tau0, vec![0.0]);
        assert_eq!(init.phi, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn init_imperfections_reads_common_rotation() {
        let base = CVec::from_vec(vec![Complex64::new(0.9, 0.3), Complex64::new(-0.2, 0.5)]);
        let rotated = &base * Complex64::cis(0.7);
        let delays = vec![vec![90e-9, 210e-9]; 2];
        let init = init_imperfections(&[base, rotated], &delays).unwrap();
        assert!(angle_close(init.epsilon[1], 0.7, 1e-12));
        assert!(init.phi[1][1].abs() < 1e-12);
        assert!(init.tau0[1].abs() < 1e-24);
    }

    #[test]
    fn init_imperfections_inverts_forward_model() {
        // Per-slot gains alpha_k e^{j(eps_t + phi_kt)} and delays
        // tau_k + tau0_t; the estimator reads back the absorbed-phase
        // convention: eps + phi of the reference path, and per-path
        // phases relative to the reference.
        let alphas = [
            Complex64::new(1.0, -0.3),
            Complex64::new(0.5, 0.4),
            Complex64::new(-0.2, 0.6),
        ];
        let eps = [0.0, 0.8, -2.1, 2.9];
        let phi = [
            [0.0, 0.0, 0.0],
            [0.3, -0.6, 1.2],
            [0.6, -1.2, 2.4],
            [0.9, -1.8, 3.6],
        ];
        let tau0 = [0.0, 3e-9, 1e-9, 4e-9];
        let taus = [80e-9, 190e-9, 400e-9];
        let mut gains = Vec::new();
        let mut delays = Vec::new();
        for t in 0..4 {
            gains.push(CVec::from_fn(3, |k, _| {
                alphas[k] * Complex64::cis(eps[t] + phi[t][k])
            }));
            delays.push(taus.iter().map(|d| d + tau0[t]).collect::<Vec<_>>());
        }
        let init = init_imperfections(&gains, &delays).unwrap();
        for t in 0..4 {
            assert!(angle_close(init.epsilon[t], eps[t] + phi[t][0], 1e-12));
            for k in 0..3 {
                assert!(angle_close(init.phi[t][k], phi[t][k] - phi[t][0], 1e-12));
            }
            assert_relative_eq!(init.tau0[t], tau0[t], epsilon = 1e-20, max_relative = 1e-10);
        }
    }

    #[test]
    fn init_imperfections_zero_reference_gain_errors() {
        let gains = vec![
            CVec::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.5, 0.0)]),
            CVec::from_vec(vec![Complex64::new(0.0, 0.0), Complex64::new(0.5, 0.0)]),
        ];
        let delays = vec![vec![100e-9, 200e-9]; 2];
        match init_imperfections(&gains, &delays) {
            Err(Error::ReferencePathVanished) => {}
            other => panic!("expected ReferencePathVanished, got {other:?}"),
        }
    }

    #[test]
    fn phase_slope_unwraps_wrapped_series() {
        for &slope in &[2.9, -1.3, 0.4] {
            let phases: Vec<f64> = (0..5).map(|t| wrap_angle(t as f64 * slope)).collect();
            assert_relative_eq!(phase_slope(&phases), slope, epsilon = 1e-12);
        }
        assert_eq!(phase_slope(&[0.3]), 0.0);
    }

    /// Builds noiseless observations directly from the slot model of a
    /// given state, for tests that need exact model consistency.
    fn synth_obs(cfg: &SystemConfig, state: &RtstState) -> Vec<SrsObservation> {
        let slots = state.epsilon.len();
        let nr = cfg.n_rx();
        let mut out = Vec::with_capacity(slots);
        for t in 0..slots {
            let rows = hopping_selection(cfg, t);
            let pilot = zc_pilot(cfg.srs_tones, cfg.zc_root).unwrap();
            let mut obs = SrsObservation {
                y: CMat::zeros(rows.len(), nr),
                slot: t,
                hop: cfg.bwp_at_slot(t),
                rows,
                pilot,
                noise_var: 0.0,
            };
            let m = slot_columns(&obs, cfg, state, t);
            let v = m * &state.gains;
            let p = obs.rows.len();
            for c in 0..nr {
                for r in 0..p {
                    obs.y[(r, c)] = v[c * p + r];
                }
            }
            out.push(obs);
        }
        out
    }

    fn two_path_state(_cfg: &SystemConfig) -> RtstState {
        RtstState {
            delays: vec![31e-9, 292e-9],
            azimuths: vec![1.0, 1.9],
            elevations: vec![0.9, 2.1],
            gains: CVec::from_vec(vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(0.42, 0.42),
            ]),
            phi_inc: vec![0.0, 0.47],
            epsilon: vec![0.0, 0.9, -1.4, 2.2],
            tau0: vec![0.0, 2.4e-9, 0.8e-9, 3.7e-9],
        }
    }

    #[test]
    fn compensate_identity_without_imperfections() {
        let cfg = SystemConfig::desk_scale();
        let mut state = two_path_state(&cfg);
        state.phi_inc = vec![0.0, 0.0];
        state.epsilon = vec![0.0; 4];
        state.tau0 = vec![0.0; 4];
        let obs = synth_obs(&cfg, &state);
        let phi = state.phi_table(4);
        let frame = compensate_and_splice(&obs, &cfg, &state.epsilon, &state.tau0, &phi);
        let p = obs[0].rows.len();
        for (t, o) in obs.iter().enumerate() {
            for r in 0..p {
                for c in 0..cfg.n_rx() {
                    assert!((frame.y[(t * p + r, c)] - o.y[(r, c)]).norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn compensate_with_truth_reproduces_clean_stacked_model() {
        // The compensation-exactness contract: ground-truth common
        // phases and timing offsets reduce the stacked frame to the
        // clean per-path model whose blocks only carry Doppler phases.
        let cfg = SystemConfig::desk_scale();
        let state = two_path_state(&cfg);
        let obs = synth_obs(&cfg, &state);
        let phi = state.phi_table(4);
        let frame = compensate_and_splice(&obs, &cfg, &state.epsilon, &state.tau0, &phi);

        let total: usize = obs.iter().map(|o| o.rows.len()).sum();
        let mut clean = CMat::zeros(total, cfg.n_rx());
        for k in 0..2 {
            let a = steering_vector_upa(state.azimuths[k], state.elevations[k], cfg.nx, cfg.ny);
            let g = frame.stacked_dictionary(k, state.delays[k]);
            for r in 0..total {
                for c in 0..cfg.n_rx() {
                    clean[(r, c)] += state.gains[k] * g[r] * a[c];
                }
            }
        }
        let rel = (&frame.y - &clean).norm() / clean.norm();
        assert!(rel < 1e-10, "relative error {rel}");
    }

    #[test]
    fn stacked_dictionary_blocks_carry_phases() {
        let cfg = SystemConfig::desk_scale();
        let state = two_path_state(&cfg);
        let obs = synth_obs(&cfg, &state);
        let phi = state.phi_table(4);
        let frame = compensate_and_splice(&obs, &cfg, &state.epsilon, &state.tau0, &phi);
        let tau = 150e-9;
        let g = frame.stacked_dictionary(1, tau);
        let p = obs[0].rows.len();
        for (t, o) in obs.iter().enumerate() {
            let expect = pilot_delay_steering(&o.rows, &o.pilot, cfg.subcarrier_spacing_hz, tau)
                * Complex64::cis(phi[t][1]);
            for r in 0..p {
                assert!((g[t * p + r] - expect[r]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn sic_single_path_recovers_exactly() {
        let cfg = SystemConfig::desk_scale();
        let mut state = two_path_state(&cfg);
        state.delays.truncate(1);
        state.azimuths.truncate(1);
        state.elevations.truncate(1);
        state.gains = CVec::from_vec(vec![Complex64::new(0.8, -0.3)]);
        state.phi_inc = vec![0.0];
        let obs = synth_obs(&cfg, &state);
        let phi = state.phi_table(4);
        let frame = compensate_and_splice(&obs, &cfg, &state.epsilon, &state.tau0, &phi);
        let step = 500e-9 / 512.0;
        // Start the window two coarse steps off the truth.
        let sic = sic_delay_estimation(
            &frame,
            &state.gains,
            &[state.delays[0] + 2.0 * step],
            step,
            &SicOptions::default(),
        )
        .unwrap();
        assert!(!sic.widened);
        assert!((sic.delays[0] - state.delays[0]).abs() < 1e-12);
    }

    #[test]
    fn sic_two_paths_exact_and_aligned() {
        let cfg = SystemConfig::desk_scale();
        let state = two_path_state(&cfg);
        let obs = synth_obs(&cfg, &state);
        let phi = state.phi_table(4);
        let frame = compensate_and_splice(&obs, &cfg, &state.epsilon, &state.tau0, &phi);
        let step = 500e-9 / 512.0;
        let init = [state.delays[0] - 1.3 * step, state.delays[1] + 2.1 * step];
        let sic =
            sic_delay_estimation(&frame, &state.gains, &init, step, &SicOptions::default())
                .unwrap();
        assert!((sic.delays[0] - state.delays[0]).abs() < 1e-12);
        assert!((sic.delays[1] - state.delays[1]).abs() < 1e-12);
    }

    #[test]
    fn sic_widens_window_on_edge_peak() {
        let cfg = SystemConfig::desk_scale();
        let mut state = two_path_state(&cfg);
        state.delays.truncate(1);
        state.azimuths.truncate(1);
        state.elevations.truncate(1);
        state.gains = CVec::from_vec(vec![Complex64::new(1.0, 0.0)]);
        state.phi_inc = vec![0.0];
        let obs = synth_obs(&cfg, &state);
        let phi = state.phi_table(4);
        let frame = compensate_and_splice(&obs, &cfg, &state.epsilon, &state.tau0, &phi);
        let step = 500e-9 / 512.0;
        // Initial guess 8 coarse steps off: the +/-5 window peaks at its
        // edge, and the single widening (to +/-10) reaches the truth.
        let sic = sic_delay_estimation(
            &frame,
            &state.gains,
            &[state.delays[0] + 8.0 * step],
            step,
            &SicOptions::default(),
        )
        .unwrap();
        assert!(sic.widened);
        assert!(!sic.boundary);
        assert!((sic.delays[0] - state.delays[0]).abs() < 1e-11);
    }

    #[test]
    fn weak_path_ambiguity_resolved_by_cancellation() {
        // Two paths, the weak one 8.8 dB below the strong one and
        // nearly synchronous in Doppler: the weak path's whole-frame
        // pseudospectrum keeps a secondary peak near the strong delay
        // (slightly shifted, since a delay offset can absorb part of
        // the Doppler mismatch across the hopped sub-bands), and
        // cancellation then pins the weak delay cleanly.
        let cfg = SystemConfig::desk_scale();
        let step = 500e-9 / 512.0;
        let state = RtstState {
            delays: vec![107e-9, 40e-9],
            azimuths: vec![1.2, 1.8],
            elevations: vec![1.0, 2.0],
            gains: CVec::from_vec(vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(10f64.powf(-8.8 / 20.0), 0.0),
            ]),
            phi_inc: vec![0.0, 0.04],
            epsilon: vec![0.0, 0.4, -0.9, 1.7],
            tau0: vec![0.0, 1.1e-9, 2.6e-9, 0.4e-9],
        };
        let obs = synth_obs(&cfg, &state);
        let phi = state.phi_table(4);
        let frame = compensate_and_splice(&obs, &cfg, &state.epsilon, &state.tau0, &phi);

        // Sweep the weak path's dictionary across a range covering both
        // delays and pick the two tallest local maxima.
        let taus: Vec<f64> = (0..=120).map(|i| 30e-9 + i as f64 * step).collect();
        let spec = per_path_delay_spectrum(&frame, 1, 2, &taus).unwrap();
        let picks = crate::subspace::peak_pick(&spec.values, 2, 3);
        assert_eq!(picks.peaks.len(), 2, "expected a primary and a secondary peak");
        let found: Vec<f64> = picks
            .peaks
            .iter()
            .map(|pk| taus[pk.index] + pk.offset * step)
            .collect();
        assert!(
            (found[0] - 40e-9).abs() < step,
            "primary peak at {} not at the weak delay",
            found[0]
        );
        assert!(
            (found[1] - 107e-9).abs() < 3.0 * step,
            "secondary peak at {} not near the strong delay",
            found[1]
        );
        assert!(picks.peaks[1].height < picks.peaks[0].height);

        let init = [107e-9 + 1.5 * step, 40e-9 - 2.0 * step];
        let sic =
            sic_delay_estimation(&frame, &state.gains, &init, step, &SicOptions::default())
                .unwrap();
        assert!((sic.delays[0] - 107e-9).abs() < step);
        assert!((sic.delays[1] - 40e-9).abs() < step);
    }

    #[test]
    fn ml_updates_recover_gains_exactly() {
        let cfg = SystemConfig::desk_scale();
        let truth = two_path_state(&cfg);
        let obs = synth_obs(&cfg, &truth);
        let mut state = truth.clone();
        // Only the gains are perturbed; with every phase already at the
        // truth the stacked normal equations restore them in one call.
        state.gains = CVec::from_vec(vec![
            Complex64::new(0.2, 0.1),
            Complex64::new(-0.3, 0.2),
        ]);
        let ridged = ml_gains_epsilon(&obs, &cfg, &mut state).unwrap();
        assert!(!ridged);
        let j = rtst_objective(&obs, &cfg, &state);
        assert!(j < 1e-12, "objective {j}");
        for k in 0..2 {
            assert!(
                (state.gains[k] - truth.gains[k]).norm() < 1e-9,
                "gain {k}: {} vs {}",
                state.gains[k],
                truth.gains[k]
            );
        }
    }

    #[test]
    fn ml_updates_converge_on_perturbed_common_phases() {
        let cfg = SystemConfig::desk_scale();
        let truth = two_path_state(&cfg);
        let obs = synth_obs(&cfg, &truth);
        let mut state = truth.clone();
        for t in 1..4 {
            state.epsilon[t] += 0.3;
        }
        // Gains and common phases are coupled, so alternating the two
        // closed forms converges linearly rather than in one shot; the
        // objective must fall monotonically toward zero all the way.
        let mut last = rtst_objective(&obs, &cfg, &state);
        for _ in 0..80 {
            ml_gains_epsilon(&obs, &cfg, &mut state).unwrap();
            let j = rtst_objective(&obs, &cfg, &state);
            assert!(j <= last + 1e-15, "objective rose: {j} vs {last}");
            last = j;
        }
        assert!(last < 1e-10, "objective after 80 passes: {last}");
    }

    #[test]
    fn ml_epsilon_matches_grid_sweep_oracle() {
        let cfg = SystemConfig::desk_scale();
        let truth = two_path_state(&cfg);
        let obs = synth_obs(&cfg, &truth);
        let mut state = truth.clone();
        for t in 1..4 {
            state.epsilon[t] += 0.4 - 0.1 * t as f64;
        }
        ml_gains_epsilon(&obs, &cfg, &mut state).unwrap();
        // Sweep slot 2's common phase over 10^4 grid points and check
        // the closed form lands on the sweep's minimizer.
        let mut best = (f64::INFINITY, 0.0);
        let mut probe = state.clone();
        for i in 0..10_000 {
            let eps = -PI + 2.0 * PI * i as f64 / 10_000.0;
            probe.epsilon[2] = eps;
            let j = rtst_objective(&obs, &cfg, &probe);
            if j < best.0 {
                best = (j, eps);
            }
        }
        assert!(
            angle_close(state.epsilon[2], best.1, 2.0 * PI / 10_000.0 * 1.5),
            "closed form {} vs sweep {}",
            state.epsilon[2],
            best.1
        );
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let cfg = SystemConfig::desk_scale();
        let truth = two_path_state(&cfg);
        let obs = synth_obs(&cfg, &truth);
        let mut state = truth.clone();
        // Move off the optimum so gradients are nonzero.
        state.phi_inc[1] += 0.07;
        for t in 1..4 {
            state.tau0[t] += 0.9e-9;
            state.epsilon[t] -= 0.05;
        }
        let og = objective_gradients(&obs, &cfg, &state);
        let h_phi = 1e-6;
        for k in 1..2 {
            let mut up = state.clone();
            up.phi_inc[k] += h_phi;
            let mut dn = state.clone();
            dn.phi_inc[k] -= h_phi;
            let fd =
                (rtst_objective(&obs, &cfg, &up) - rtst_objective(&obs, &cfg, &dn)) / (2.0 * h_phi);
            assert_relative_eq!(og.grad_phi[k], fd, max_relative = 1e-4);
        }
        let h_tau = 1e-14;
        for t in 1..4 {
            let mut up = state.clone();
            up.tau0[t] += h_tau;
            let mut dn = state.clone();
            dn.tau0[t] -= h_tau;
            let fd =
                (rtst_objective(&obs, &cfg, &up) - rtst_objective(&obs, &cfg, &dn)) / (2.0 * h_tau);
            assert_relative_eq!(og.grad_tau0[t], fd, max_relative = 1e-4);
        }
    }

    #[test]
    fn gradient_vanishes_at_the_truth() {
        let cfg = SystemConfig::desk_scale();
        let truth = two_path_state(&cfg);
        let obs = synth_obs(&cfg, &truth);
        let og = objective_gradients(&obs, &cfg, &truth);
        for g in og.grad_phi.iter().chain(og.grad_tau0.iter()) {
            assert!(g.abs() < 1e-8, "gradient component {g}");
        }
    }

    #[test]
    fn gradient_steps_decrease_monotonically() {
        let cfg = SystemConfig::desk_scale();
        let truth = two_path_state(&cfg);
        let obs = synth_obs(&cfg, &truth);
        let mut state = truth.clone();
        state.phi_inc[1] += 0.2;
        for t in 1..4 {
            state.tau0[t] -= 1.5e-9;
        }
        let mut prev = rtst_objective(&obs, &cfg, &state);
        let start = prev;
        for _ in 0..10 {
            let step = grad_phi_tau0(&obs, &cfg, &mut state);
            assert!(step.objective_after <= step.objective_before + 1e-15);
            assert!(step.objective_after <= prev + 1e-15);
            prev = step.objective_after;
        }
        assert!(prev < 0.2 * start, "no real progress: {start} -> {prev}");
    }

    fn scenario_obs(
        cfg: &SystemConfig,
        paths: &PathSet,
        trace: &ImperfectionTrace,
        noise_var: f64,
        seed: u64,
    ) -> Vec<SrsObservation> {
        let mut rng = rng::substream(seed, &[purpose::NOISE]);
        (0..cfg.estimation_slots)
            .map(|t| {
                let h = full_band_cfr(paths, trace, t, cfg);
                crate::scenario::observe_slot(cfg, &h, t, noise_var, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn rtst_one_iteration_reaches_machine_precision_when_clean() {
        // Imperfections disabled, noiseless: a single alternating pass
        // must pin delays, angles, and gains at the truth.
        let cfg = SystemConfig::desk_scale();
        let step = 500e-9 / 512.0;
        let deg = PI / 180.0;
        // Truth sits exactly on the sweep grids so every pseudospectrum
        // denominator vanishes at it and the zooms pin the values.
        let paths = PathSet {
            gains: vec![Complex64::new(1.0, 0.0), Complex64::new(0.5, 0.5)],
            azimuths: vec![60.0 * deg, 110.0 * deg],
            elevations: vec![53.0 * deg, 121.0 * deg],
            delays: vec![32.0 * step, 300.0 * step],
            dopplers: vec![0.0, 0.0],
        };
        let trace = imperfection_trace(
            &paths,
            &ImperfectionModel::disabled(),
            cfg.srs_period_s,
            cfg.estimation_slots,
            &mut rng::substream(7, &[purpose::IMPERFECTIONS]),
        );
        let obs = scenario_obs(&cfg, &paths, &trace, 0.0, 8);
        let grids = SweepGrids::desk_scale(500e-9);
        let opts = RtstOptions {
            i_ao: 1,
            ..Default::default()
        };
        let est = r_tst_music(&obs, &cfg, &grids, &opts).unwrap();
        assert_eq!(est.model_order, 2);
        for k in 0..2 {
            assert!(
                (est.paths.delays[k] - paths.delays[k]).abs() < 1e-13,
                "delay {k}: {} vs {}",
                est.paths.delays[k],
                paths.delays[k]
            );
            assert!(
                (est.paths.azimuths[k] - paths.azimuths[k]).abs() < 1e-9,
                "azimuth {k}: {} vs {}",
                est.paths.azimuths[k],
                paths.azimuths[k]
            );
            assert!((est.paths.elevations[k] - paths.elevations[k]).abs() < 1e-9);
            assert!(
                (est.paths.gains[k] - paths.gains[k]).norm() / paths.gains[k].norm() < 1e-8,
                "gain {k}: {} vs {}",
                est.paths.gains[k],
                paths.gains[k]
            );
        }
        // Reconstruction error across the window at machine-level NMSE.
        for t in 0..cfg.estimation_slots {
            let truth = full_band_cfr(&paths, &trace, t, &cfg);
            let recon = est.reconstruct(&cfg, t);
            let nmse = (&recon - &truth).norm_squared() / truth.norm_squared();
            assert!(nmse < 1e-14, "slot {t} nmse {nmse}");
        }
    }

    #[test]
    fn rtst_objective_log_is_monotone_with_imperfections() {
        let cfg = SystemConfig::desk_scale();
        let paths = PathSet {
            gains: vec![Complex64::new(1.0, 0.0), Complex64::new(0.42, 0.42)],
            azimuths: vec![1.0, 1.9],
            elevations: vec![0.9, 2.1],
            delays: vec![31e-9, 292e-9],
            dopplers: vec![6.0, -4.0],
        };
        let model = ImperfectionModel::default_for(&cfg);
        let trace = imperfection_trace(
            &paths,
            &model,
            cfg.srs_period_s,
            cfg.estimation_slots,
            &mut rng::substream(21, &[purpose::IMPERFECTIONS]),
        );
        let obs = scenario_obs(&cfg, &paths, &trace, 1e-6, 22);
        let grids = SweepGrids::desk_scale(500e-9);
        let est = r_tst_music(&obs, &cfg, &grids, &RtstOptions::default()).unwrap();
        assert_eq!(est.objective_log.len(), 11);
        for w in est.objective_log.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-8) + 1e-15,
                "objective rose: {} -> {}",
                w[0],
                w[1]
            );
        }
        // The refinement should land near the truth despite the
        // imperfections: delays within a coarse grid step.
        let step = grids.delay_step();
        for k in 0..2 {
            let err = est
                .paths
                .delays
                .iter()
                .map(|d| (d - paths.delays[k]).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(err < step, "path {k} delay error {err}");
        }
        let truth0 = full_band_cfr(&paths, &trace, 0, &cfg);
        let recon0 = est.reconstruct(&cfg, 0);
        let nmse = (&recon0 - &truth0).norm_squared() / truth0.norm_squared();
        assert!(nmse < 1e-3, "anchor-slot reconstruction nmse {nmse}");
    }

    #[test]
    fn reconstruct_matches_generator_with_truth_parameters() {
        let cfg = SystemConfig::desk_scale();
        let paths = PathSet {
            gains: vec![Complex64::new(0.9, -0.1), Complex64::new(0.3, 0.4)],
            azimuths: vec![1.1, 2.0],
            elevations: vec![1.0, 1.8],
            delays: vec![55e-9, 310e-9],
            dopplers: vec![8.0, -5.0],
        };
        let mut model = ImperfectionModel::default_for(&cfg);
        model.doppler_drift = false; // keep phases exactly linear in t
        let trace = imperfection_trace(
            &paths,
            &model,
            cfg.srs_period_s,
            cfg.estimation_slots,
            &mut rng::substream(31, &[purpose::IMPERFECTIONS]),
        );
        // Absorbed-phase convention: epsilon picks up path 0's phase,
        // per-path increments are relative to path 0.
        let inc: Vec<f64> = paths
            .dopplers
            .iter()
            .map(|f| 2.0 * PI * cfg.srs_period_s * (f - paths.dopplers[0]))
            .collect();
        let est = RefinedEstimate {
            paths: paths.clone(),
            phi_inc: inc,
            epsilon: (0..cfg.estimation_slots)
                .map(|t| trace.epsilon[t] + trace.phi[t][0])
                .collect(),
            tau0: trace.tau0.clone(),
            objective_log: vec![],
            model_order: 2,
            flags: RtstFlags::default(),
        };
        for t in 0..cfg.estimation_slots {
            let truth = full_band_cfr(&paths, &trace, t, &cfg);
            let recon = est.reconstruct(&cfg, t);
            let rel = (&recon - &truth).norm() / truth.norm();
            assert!(rel < 1e-10, "slot {t} relative error {rel}");
        }
    }
}
