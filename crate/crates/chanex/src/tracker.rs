//! Cross-slot channel tracking over a sparse delay-angle grid.
//!
//! After the estimation stage hands over refined paths, every later slot
//! is processed by an EM loop: a turbo E-step alternates an LMMSE
//! estimator on the slot's sounded tones with a Bernoulli-Gaussian
//! combiner over the grid coefficients, and an M-step updates the
//! per-slot imperfections plus the off-grid offsets with one closed-form
//! or sign-gradient block step each. Support and amplitude beliefs then
//! propagate to the next slot through first-order Markov transitions,
//! and the full-band response is synthesized from the posterior.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::hrpe::RefinedEstimate;
use crate::scenario::{
    delay_steering, pilot_delay_steering, steering_vector_upa, SrsObservation, SystemConfig,
};
use crate::{CMat, CVec};

type RMat = DMatrix<f64>;

/// Floor applied to every posterior or extrinsic variance.
pub const VAR_FLOOR: f64 = 1e-12;
/// Cap applied to every posterior or extrinsic variance.
pub const VAR_CAP: f64 = 1e12;

fn sign_step(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn wrap_angle(a: f64) -> f64 {
    let x = (a + PI).rem_euclid(2.0 * PI);
    x - PI
}

/// Delay and angle grids with their per-point continuous offsets.
///
/// Grid atoms are indexed `m = j * L + i` where `i` is the delay index
/// (fastest) and `j = ix * N_y + iy` the angle-pair index, matching the
/// Kronecker order of the sensing operator.
#[derive(Debug, Clone)]
pub struct Grids {
    /// Delay grid points in seconds; spans `[-spread/4, spread]`.
    pub delays: Vec<f64>,
    /// Azimuth grid in radians; bin centers of `[0, pi]`.
    pub azimuths: Vec<f64>,
    /// Elevation grid in radians; bin centers of `[0, pi]`.
    pub elevations: Vec<f64>,
    /// Per-delay-point offset, clamped to half the delay step.
    pub off_tau: Vec<f64>,
    /// Per-azimuth-point offset, clamped to half the azimuth step.
    pub off_theta: Vec<f64>,
    /// Per-elevation-point offset, clamped to half the elevation step.
    pub off_phi: Vec<f64>,
}

impl Grids {
    /// Uniform grids: `l` delay points over `[-spread/4, spread]` and one
    /// angle bin center per array axis element, so the angle dictionary
    /// stays square.
    pub fn new(cfg: &SystemConfig, delay_spread_s: f64, l: usize) -> Self {
        assert!(l >= 2, "delay grid needs at least two points");
        let lo = -delay_spread_s / 4.0;
        let step = (delay_spread_s - lo) / (l - 1) as f64;
        let delays = (0..l).map(|i| lo + step * i as f64).collect();
        let centers = |n: usize| {
            (0..n)
                .map(|i| (i as f64 + 0.5) * PI / n as f64)
                .collect::<Vec<f64>>()
        };
        Self {
            delays,
            azimuths: centers(cfg.nx),
            elevations: centers(cfg.ny),
            off_tau: vec![0.0; l],
            off_theta: vec![0.0; cfg.nx],
            off_phi: vec![0.0; cfg.ny],
        }
    }

    /// Default tracking grid at the benchmark scale: 64 delay points.
    pub fn desk_scale(cfg: &SystemConfig) -> Self {
        Self::new(cfg, 500e-9, 64)
    }

    pub fn n_delay(&self) -> usize {
        self.delays.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.azimuths.len() * self.elevations.len()
    }

    /// Total atom count `L * N_x * N_y`.
    pub fn n_atoms(&self) -> usize {
        self.n_delay() * self.n_pairs()
    }

    pub fn delay_step(&self) -> f64 {
        self.delays[1] - self.delays[0]
    }

    pub fn azimuth_step(&self) -> f64 {
        PI / self.azimuths.len() as f64
    }

    pub fn elevation_step(&self) -> f64 {
        PI / self.elevations.len() as f64
    }

    /// Splits atom `m` into `(angle pair j, delay index i)`.
    pub fn split(&self, m: usize) -> (usize, usize) {
        (m / self.n_delay(), m % self.n_delay())
    }

    /// Splits angle pair `j` into `(azimuth index, elevation index)`.
    pub fn split_pair(&self, j: usize) -> (usize, usize) {
        (j / self.elevations.len(), j % self.elevations.len())
    }

    /// Offset delay value of grid point `i`.
    pub fn delay_at(&self, i: usize) -> f64 {
        self.delays[i] + self.off_tau[i]
    }

    /// Offset azimuth of grid point `ix`.
    pub fn azimuth_at(&self, ix: usize) -> f64 {
        self.azimuths[ix] + self.off_theta[ix]
    }

    /// Offset elevation of grid point `iy`.
    pub fn elevation_at(&self, iy: usize) -> f64 {
        self.elevations[iy] + self.off_phi[iy]
    }

    /// Clamps every offset to half its grid step.
    pub fn clamp_offsets(&mut self) {
        let h = self.delay_step() / 2.0;
        for v in self.off_tau.iter_mut() {
            *v = v.clamp(-h, h);
        }
        let h = self.azimuth_step() / 2.0;
        for v in self.off_theta.iter_mut() {
            *v = v.clamp(-h, h);
        }
        let h = self.elevation_step() / 2.0;
        for v in self.off_phi.iter_mut() {
            *v = v.clamp(-h, h);
        }
    }
}

/// First-order Markov hyperparameters for the cross-slot priors.
#[derive(Debug, Clone)]
pub struct MarkovHyperparams {
    /// Support birth probability (off to on).
    pub rho01: f64,
    /// Support death probability (on to off).
    pub rho10: f64,
    /// Amplitude innovation rate.
    pub beta_amp: f64,
    /// Amplitude innovation mean.
    pub mu_amp: Complex64,
    /// Amplitude innovation variance.
    pub gamma_amp: f64,
    /// Doppler innovation rate.
    pub beta_dop: f64,
    /// Doppler innovation mean, Hz.
    pub mu_dop: f64,
    /// Doppler innovation variance, Hz^2.
    pub gamma_dop: f64,
    /// Drift variance of the delay offsets, s^2.
    pub gamma_u_tau: f64,
    /// Drift variance of the azimuth offsets, rad^2.
    pub gamma_u_theta: f64,
    /// Drift variance of the elevation offsets, rad^2.
    pub gamma_u_phi: f64,
}

impl MarkovHyperparams {
    /// Defaults scaled to the given grids: each off-grid drift deviation
    /// is a tenth of its grid step, the amplitude scale matches unit-power
    /// paths, and the Doppler scale covers pedestrian mobility.
    pub fn default_for(grids: &Grids) -> Self {
        let tenth = |s: f64| (s / 10.0) * (s / 10.0);
        Self {
            rho01: 0.05,
            rho10: 0.05,
            beta_amp: 0.1,
            mu_amp: Complex64::new(0.0, 0.0),
            gamma_amp: 1.0,
            beta_dop: 0.1,
            mu_dop: 0.0,
            gamma_dop: 100.0,
            gamma_u_tau: tenth(grids.delay_step()),
            gamma_u_theta: tenth(grids.azimuth_step()),
            gamma_u_phi: tenth(grids.elevation_step()),
        }
    }

    /// Stationary support probability of the on/off chain.
    pub fn steady_state_support(&self) -> f64 {
        self.rho01 / (self.rho01 + self.rho10)
    }
}

/// Diagnostic flags accumulated while tracking.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrackerFlags {
    /// Some extrinsic or posterior variance hit its floor or cap.
    pub variance_clamped: bool,
    /// Some E-step hit its iteration cap and fell back to the
    /// best-residual iterate.
    pub oscillated: bool,
    /// Two initial paths mapped to the same grid atom.
    pub init_collision: bool,
}

/// Belief state carried from slot to slot.
#[derive(Debug, Clone)]
pub struct TrackerState {
    /// Grids and their off-grid offsets.
    pub grids: Grids,
    /// Bernoulli support prior per atom for the upcoming slot.
    pub support: Vec<f64>,
    /// Gaussian amplitude prior mean per atom.
    pub amp_mean: Vec<Complex64>,
    /// Gaussian amplitude prior variance per atom.
    pub amp_var: Vec<f64>,
    /// Doppler estimate per atom, Hz.
    pub doppler: Vec<f64>,
    /// Common-phase estimate of the current slot, radians.
    pub epsilon: f64,
    /// Timing-offset estimate of the current slot, seconds.
    pub tau0: f64,
    /// Posterior mean over the atoms from the latest E-step.
    pub post_mean: CVec,
    /// Posterior variance per atom from the latest E-step.
    pub post_var: Vec<f64>,
    /// Accumulated diagnostics.
    pub flags: TrackerFlags,
}

/// The linear map from grid coefficients to one slot's sounded tones.
///
/// Output entries are indexed `r * P + p` (pilot tone `p` fastest within
/// antenna `r`), which is the column-major stacking of the `P x N_r`
/// observation. Columns follow the atom order of [`Grids`]. The
/// eigendecompositions of the two Gram factors are kept so posterior
/// solves run in the Kronecker eigenbasis instead of inverting the full
/// `L N_r` system.
#[derive(Debug, Clone)]
pub struct SensingOperator {
    /// `N_r x N_r` steering dictionary at the offset grid angles.
    pub a_r: CMat,
    /// `P x L` pilot-selected delay dictionary, including the common
    /// phase and timing offset.
    pub g: CMat,
    /// Doppler phase per atom, radians.
    pub doppler_phase: Vec<f64>,
    ua: CMat,
    la: Vec<f64>,
    ug: CMat,
    lg: Vec<f64>,
}

fn hermitian_eigen(m: CMat) -> (CMat, Vec<f64>) {
    // Symmetrize first so roundoff asymmetry cannot poison the solver.
    let h = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = h.symmetric_eigen();
    (eig.eigenvectors, eig.eigenvalues.iter().copied().collect())
}

impl SensingOperator {
    /// Wraps explicit factors; `doppler_phase` has one entry per atom.
    pub fn new(a_r: CMat, g: CMat, doppler_phase: Vec<f64>) -> Self {
        assert_eq!(
            doppler_phase.len(),
            a_r.ncols() * g.ncols(),
            "one Doppler phase per atom"
        );
        let (ua, la) = hermitian_eigen(a_r.ad_mul(&a_r));
        let (ug, lg) = hermitian_eigen(g.ad_mul(&g));
        Self { a_r, g, doppler_phase, ua, la, ug, lg }
    }

    pub fn n_out(&self) -> usize {
        self.a_r.nrows() * self.g.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.doppler_phase.len()
    }

    fn n_delay(&self) -> usize {
        self.g.ncols()
    }

    fn phase(&self, m: usize) -> Complex64 {
        Complex64::cis(self.doppler_phase[m])
    }

    /// `y = Phi h` via the factored form `G X A_R^T` on the reshaped
    /// Doppler-rotated coefficients.
    pub fn apply(&self, h: &CVec) -> CVec {
        let (l, npair) = (self.n_delay(), self.a_r.ncols());
        let x = CMat::from_fn(l, npair, |i, j| h[j * l + i] * self.phase(j * l + i));
        let y = (&self.g * x) * self.a_r.transpose();
        CVec::from_column_slice(y.as_slice())
    }

    /// `Phi^H y` via the factored form.
    pub fn adjoint(&self, y: &CVec) -> CVec {
        let (p, nr) = (self.g.nrows(), self.a_r.nrows());
        let ymat = CMat::from_column_slice(p, nr, y.as_slice());
        let x = self.g.ad_mul(&ymat) * self.a_r.conjugate();
        let l = self.n_delay();
        CVec::from_fn(self.n_atoms(), |m, _| x[(m % l, m / l)] * self.phase(m).conj())
    }

    /// Materializes the full matrix; intended for small test instances.
    pub fn dense(&self) -> CMat {
        let (p, nr, l) = (self.g.nrows(), self.a_r.nrows(), self.n_delay());
        CMat::from_fn(nr * p, self.n_atoms(), |row, m| {
            let (r, pp) = (row / p, row % p);
            let (j, i) = (m / l, m % l);
            self.a_r[(r, j)] * self.g[(pp, i)] * self.phase(m)
        })
    }

    /// Per-atom posterior variance for a uniform prior variance `v_pri`,
    /// computed in the Kronecker eigenbasis.
    pub fn posterior_diag(&self, v_pri: f64, sigma2: f64) -> Vec<f64> {
        let (l, npair) = (self.n_delay(), self.a_r.ncols());
        let w = RMat::from_fn(l, npair, |qg, qa| {
            1.0 / (self.lg[qg].max(0.0) * self.la[qa].max(0.0) / sigma2 + 1.0 / v_pri)
        });
        let ug2 = RMat::from_fn(l, l, |i, q| self.ug[(i, q)].norm_sqr());
        let ua2 = RMat::from_fn(npair, npair, |j, q| self.ua[(j, q)].norm_sqr());
        let d = ug2 * w * ua2.transpose();
        (0..self.n_atoms()).map(|m| d[(m % l, m / l)]).collect()
    }

    /// Solves `(Phi^H Phi / sigma2 + I / v_pri) x = rhs` in the
    /// Kronecker eigenbasis.
    pub fn posterior_solve(&self, rhs: &CVec, v_pri: f64, sigma2: f64) -> CVec {
        let (l, npair) = (self.n_delay(), self.a_r.ncols());
        let c = CMat::from_fn(l, npair, |i, j| rhs[j * l + i] * self.phase(j * l + i));
        let mut s = self.ug.ad_mul(&c) * self.ua.conjugate();
        for qa in 0..npair {
            for qg in 0..l {
                let w = 1.0 / (self.lg[qg].max(0.0) * self.la[qa].max(0.0) / sigma2 + 1.0 / v_pri);
                s[(qg, qa)] *= w;
            }
        }
        let out = (&self.ug * s) * self.ua.transpose();
        CVec::from_fn(self.n_atoms(), |m, _| out[(m % l, m / l)] * self.phase(m).conj())
    }
}

/// Assembles the slot-`t` sensing operator from the grids and the
/// imperfection estimates: steering at the offset angles, pilot-selected
/// delay responses shifted by `tau0` and scaled by the common phase, and
/// per-atom Doppler phases `2 pi T_SRS t f_D,m`.
#[allow(clippy::too_many_arguments)]
pub fn build_sensing(
    cfg: &SystemConfig,
    grids: &Grids,
    epsilon: f64,
    tau0: f64,
    doppler: &[f64],
    slot: usize,
    rows: &[usize],
    pilot: &CVec,
) -> SensingOperator {
    assert_eq!(doppler.len(), grids.n_atoms(), "one Doppler per atom");
    let nr = cfg.n_rx();
    let a_r = CMat::from_fn(nr, grids.n_pairs(), |r, j| {
        let (ix, iy) = grids.split_pair(j);
        steering_vector_upa(grids.azimuth_at(ix), grids.elevation_at(iy), cfg.nx, cfg.ny)[r]
    });
    let phase = Complex64::cis(epsilon);
    let l = grids.n_delay();
    let mut g = CMat::zeros(rows.len(), l);
    for i in 0..l {
        let col = pilot_delay_steering(rows, pilot, cfg.subcarrier_spacing_hz, tau0 + grids.delay_at(i));
        for p in 0..rows.len() {
            g[(p, i)] = col[p] * phase;
        }
    }
    let c = 2.0 * PI * cfg.srs_period_s * slot as f64;
    let dphase = (0..grids.n_atoms()).map(|m| c * doppler[m]).collect();
    SensingOperator::new(a_r, g, dphase)
}

/// Which module an extrinsic message is headed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageDirection {
    /// From the LMMSE estimator to the sparsity combiner.
    ToCombiner,
    /// From the sparsity combiner to the LMMSE estimator.
    ToEstimator,
}

/// Gaussian extrinsic message, one mean/variance pair per atom.
#[derive(Debug, Clone)]
pub struct ExtrinsicMessage {
    pub mean: CVec,
    pub var: Vec<f64>,
    pub direction: MessageDirection,
}

/// Removes the prior from a posterior, clamping the resulting variance.
/// Returns the message and whether any clamp engaged.
fn extrinsic_from(
    post_mean: &CVec,
    post_var: &[f64],
    pri_mean: &CVec,
    pri_var: &[f64],
    direction: MessageDirection,
) -> (ExtrinsicMessage, bool) {
    let n = post_var.len();
    let mut mean = CVec::zeros(n);
    let mut var = vec![0.0; n];
    let mut clamped = false;
    for m in 0..n {
        let inv = 1.0 / post_var[m] - 1.0 / pri_var[m];
        let v = if inv > 0.0 { 1.0 / inv } else { f64::INFINITY };
        let vc = v.clamp(VAR_FLOOR, VAR_CAP);
        if vc != v {
            clamped = true;
        }
        var[m] = vc;
        mean[m] = (post_mean[m] / post_var[m] - pri_mean[m] / pri_var[m]) * vc;
    }
    (ExtrinsicMessage { mean, var, direction }, clamped)
}

/// Posterior and outgoing message of the LMMSE estimator.
#[derive(Debug, Clone)]
pub struct LmmsePosterior {
    pub mean: CVec,
    pub var: Vec<f64>,
    pub extrinsic: ExtrinsicMessage,
    pub clamped: bool,
}

/// Dense-matrix LMMSE estimator with per-atom prior variances:
/// `V = (Phi^H Phi / sigma2 + diag(1/v))^-1`, posterior mean
/// `V (mu/v + Phi^H y / sigma2)`, and the prior-removed extrinsic.
///
/// This is the reference implementation used by unit oracles and small
/// instances; the turbo loop uses the factored fast path.
pub fn lmmse_module_a(
    y: &CVec,
    phi: &CMat,
    prior_mean: &CVec,
    prior_var: &[f64],
    sigma2: f64,
) -> LmmsePosterior {
    let n = phi.ncols();
    assert!(prior_var.iter().all(|&v| v > 0.0), "prior variances must be positive");
    let mut a = phi.ad_mul(phi) / Complex64::from(sigma2);
    for m in 0..n {
        a[(m, m)] += Complex64::from(1.0 / prior_var[m]);
    }
    let v = a
        .cholesky()
        .expect("posterior system is positive definite for positive priors")
        .inverse();
    let mut rhs = phi.ad_mul(y) / Complex64::from(sigma2);
    for m in 0..n {
        rhs[m] += prior_mean[m] / prior_var[m];
    }
    let mean = &v * rhs;
    let var: Vec<f64> = (0..n).map(|m| v[(m, m)].re).collect();
    let (extrinsic, clamped) =
        extrinsic_from(&mean, &var, prior_mean, prior_var, MessageDirection::ToCombiner);
    LmmsePosterior { mean, var, extrinsic, clamped }
}

/// Fast-path LMMSE on the factored operator with a uniform prior
/// variance, equal to [`lmmse_module_a`] on uniform priors.
pub fn lmmse_fast(
    op: &SensingOperator,
    y: &CVec,
    prior_mean: &CVec,
    prior_var: f64,
    sigma2: f64,
) -> LmmsePosterior {
    let mut rhs = op.adjoint(y) / Complex64::from(sigma2);
    for m in 0..op.n_atoms() {
        rhs[m] += prior_mean[m] / prior_var;
    }
    let mean = op.posterior_solve(&rhs, prior_var, sigma2);
    let var = op.posterior_diag(prior_var, sigma2);
    let pri_var = vec![prior_var; op.n_atoms()];
    let (extrinsic, clamped) =
        extrinsic_from(&mean, &var, prior_mean, &pri_var, MessageDirection::ToCombiner);
    LmmsePosterior { mean, var, extrinsic, clamped }
}

/// Per-atom quantities produced by the Bernoulli-Gaussian combiner.
#[derive(Debug, Clone)]
pub struct CombinerOutput {
    /// Posterior mean of the coefficient `h = s * amp`.
    pub post_mean: CVec,
    /// Posterior variance of the coefficient.
    pub post_var: Vec<f64>,
    /// Posterior support probability per atom.
    pub support_post: Vec<f64>,
    /// Moment-matched posterior amplitude mean per atom.
    pub amp_mean: Vec<Complex64>,
    /// Moment-matched posterior amplitude variance per atom.
    pub amp_var: Vec<f64>,
    /// Extrinsic message back to the estimator.
    pub extrinsic: ExtrinsicMessage,
    pub clamped: bool,
}

/// Sparsity combiner: treats the incoming extrinsic as an AWGN
/// pseudo-observation of `h = s * amp` under a Bernoulli(support) times
/// Gaussian(amp) prior and returns closed-form posteriors.
pub fn bg_combiner_module_b(
    from_a: &ExtrinsicMessage,
    support: &[f64],
    amp_mean: &[Complex64],
    amp_var: &[f64],
) -> CombinerOutput {
    let n = support.len();
    assert_eq!(from_a.mean.len(), n, "message and prior sizes must match");
    let mut post_mean = CVec::zeros(n);
    let mut post_var = vec![0.0; n];
    let mut support_post = vec![0.0; n];
    let mut amp_post_mean = vec![Complex64::new(0.0, 0.0); n];
    let mut amp_post_var = vec![0.0; n];
    let mut clamped = false;
    for m in 0..n {
        let (pi, mu, gamma) = (support[m], amp_mean[m], amp_var[m].max(VAR_FLOOR));
        let (hp, v) = (from_a.mean[m], from_a.var[m].max(VAR_FLOOR));
        // Gaussian product component: posterior of amp given s = 1.
        let v1 = 1.0 / (1.0 / gamma + 1.0 / v);
        let m1 = (mu / gamma + hp / v) * v1;
        // Support posterior from the two evidence terms, in log domain.
        let p1 = if pi <= 0.0 {
            0.0
        } else if pi >= 1.0 {
            1.0
        } else {
            let l1 = pi.ln() - (hp - mu).norm_sqr() / (gamma + v) - (gamma + v).ln();
            let l0 = (1.0 - pi).ln() - hp.norm_sqr() / v - v.ln();
            1.0 / (1.0 + (l0 - l1).exp())
        };
        let mean = m1 * p1;
        let second = p1 * (m1.norm_sqr() + v1);
        let var_raw = (second - mean.norm_sqr()).max(0.0);
        let var = var_raw.clamp(VAR_FLOOR, VAR_CAP);
        if var != var_raw {
            clamped = true;
        }
        post_mean[m] = mean;
        post_var[m] = var;
        support_post[m] = p1;
        // Amplitude belief: mixture of the product component (s = 1) and
        // the untouched prior (s = 0), moment matched to one Gaussian.
        let am = m1 * p1 + mu * (1.0 - p1);
        let a2 = p1 * (v1 + m1.norm_sqr()) + (1.0 - p1) * (gamma + mu.norm_sqr());
        amp_post_mean[m] = am;
        amp_post_var[m] = (a2 - am.norm_sqr()).max(0.0);
    }
    let (extrinsic, ext_clamped) = extrinsic_from(
        &post_mean,
        &post_var,
        &from_a.mean,
        &from_a.var,
        MessageDirection::ToEstimator,
    );
    CombinerOutput {
        post_mean,
        post_var,
        support_post,
        amp_mean: amp_post_mean,
        amp_var: amp_post_var,
        extrinsic,
        clamped: clamped || ext_clamped,
    }
}

/// Marginal beliefs of one slot's factor-graph pass.
#[derive(Debug, Clone)]
pub struct SlotBeliefs {
    pub support: Vec<f64>,
    pub amp_mean: Vec<Complex64>,
    pub amp_var: Vec<f64>,
    pub post_mean: CVec,
    pub post_var: Vec<f64>,
}

/// Sum-product pass over one slot's within-slot factor graph.
///
/// The graph rooted at each coefficient (`coefficient - delta factor -
/// support and amplitude variables`) is a tree, so one leafward and one
/// rootward sweep give exact marginals; those sweeps reduce to the
/// combiner's closed forms.
pub fn spmp_within_slot(state: &TrackerState, from_a: &ExtrinsicMessage) -> SlotBeliefs {
    let out = bg_combiner_module_b(from_a, &state.support, &state.amp_mean, &state.amp_var);
    SlotBeliefs {
        support: out.support_post,
        amp_mean: out.amp_mean,
        amp_var: out.amp_var,
        post_mean: out.post_mean,
        post_var: out.post_var,
    }
}

/// Turbo E-step controls.
#[derive(Debug, Clone)]
pub struct TurboOptions {
    pub max_iters: usize,
    /// Relative change of the estimator-to-combiner extrinsic mean below
    /// which the loop stops.
    pub tol: f64,
    /// Weight on the newly computed extrinsic; the remainder stays on the
    /// previous iteration's message.
    pub damping: f64,
}

impl Default for TurboOptions {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-6, damping: 0.7 }
    }
}

/// Converged (or best-effort) E-step output.
#[derive(Debug, Clone)]
pub struct TurboOutcome {
    /// Combiner posterior mean per atom.
    pub post_mean: CVec,
    /// Combiner posterior variance per atom.
    pub post_var: Vec<f64>,
    /// Marginal beliefs at the returned iterate.
    pub beliefs: SlotBeliefs,
    /// Estimator posterior mean at the returned iterate.
    pub estimator_mean: CVec,
    pub iterations: usize,
    /// True when the loop hit its cap and fell back to the iterate with
    /// the smallest residual.
    pub oscillated: bool,
    pub clamped: bool,
}

/// Scalar-variance extrinsic: removes a scalar-variance prior from a
/// posterior summarized by per-atom means and one averaged variance.
/// Using one shared variance keeps the message bounded even for atoms
/// the observation barely constrains, where a per-atom precision
/// difference would vanish and amplify roundoff into the mean.
fn scalar_extrinsic(
    post_mean: &CVec,
    avg_post_var: f64,
    pri_mean: &CVec,
    pri_var: f64,
) -> (CVec, f64, bool) {
    let inv = 1.0 / avg_post_var - 1.0 / pri_var;
    let (v, clamped) = if inv > 0.0 {
        let raw = 1.0 / inv;
        let vc = raw.clamp(VAR_FLOOR, VAR_CAP);
        (vc, vc != raw)
    } else {
        (VAR_CAP, true)
    };
    let mean = CVec::from_fn(post_mean.len(), |m, _| {
        (post_mean[m] / avg_post_var - pri_mean[m] / pri_var) * v
    });
    (mean, v, clamped)
}

/// Alternates the LMMSE estimator and the sparsity combiner until the
/// estimator's extrinsic mean stabilizes. Messages carry per-atom means
/// with one moment-matched scalar variance in each direction, so the
/// factored fast path applies directly and the extrinsics stay bounded
/// on rank-deficient operators. A capped loop returns the
/// smallest-residual iterate with the oscillation flag set.
pub fn turbo_estep(
    op: &SensingOperator,
    y: &CVec,
    sigma2: f64,
    support: &[f64],
    amp_mean: &[Complex64],
    amp_var: &[f64],
    opts: &TurboOptions,
) -> TurboOutcome {
    let n = op.n_atoms();
    assert_eq!(support.len(), n, "one support prior per atom");
    let w = opts.damping;
    // Prior-moment message opens the loop in place of a combiner pass.
    let mut to_a_mean = CVec::from_fn(n, |m, _| amp_mean[m] * support[m]);
    let mut to_a_var = {
        let sum: f64 = (0..n)
            .map(|m| {
                let second = support[m] * (amp_var[m] + amp_mean[m].norm_sqr());
                second - to_a_mean[m].norm_sqr()
            })
            .sum();
        (sum / n as f64).clamp(VAR_FLOOR, VAR_CAP)
    };
    let mut prev_to_b: Option<(CVec, f64)> = None;
    let mut clamped = false;
    let mut best: Option<(f64, TurboOutcome)> = None;
    for it in 0..opts.max_iters.max(1) {
        let est = lmmse_fast(op, y, &to_a_mean, to_a_var, sigma2);
        clamped |= est.clamped;
        let avg_a = (est.var.iter().sum::<f64>() / n as f64).max(VAR_FLOOR);
        let (mut tb_mean, mut tb_var, c) =
            scalar_extrinsic(&est.mean, avg_a, &to_a_mean, to_a_var);
        clamped |= c;
        let delta = match &prev_to_b {
            None => f64::INFINITY,
            Some((pm, pv)) => {
                tb_mean = &tb_mean * Complex64::from(w) + pm * Complex64::from(1.0 - w);
                tb_var = (w * tb_var + (1.0 - w) * pv).clamp(VAR_FLOOR, VAR_CAP);
                (&tb_mean - pm).norm() / pm.norm().max(1e-300)
            }
        };
        let msg = ExtrinsicMessage {
            mean: tb_mean.clone(),
            var: vec![tb_var; n],
            direction: MessageDirection::ToCombiner,
        };
        let comb = bg_combiner_module_b(&msg, support, amp_mean, amp_var);
        clamped |= comb.clamped;
        let residual = (y - op.apply(&comb.post_mean)).norm_squared();
        let outcome = TurboOutcome {
            post_mean: comb.post_mean.clone(),
            post_var: comb.post_var.clone(),
            beliefs: SlotBeliefs {
                support: comb.support_post.clone(),
                amp_mean: comb.amp_mean.clone(),
                amp_var: comb.amp_var.clone(),
                post_mean: comb.post_mean.clone(),
                post_var: comb.post_var.clone(),
            },
            estimator_mean: est.mean.clone(),
            iterations: it + 1,
            oscillated: false,
            clamped,
        };
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, outcome.clone()));
        }
        if delta < opts.tol {
            return outcome;
        }
        let avg_b = (comb.post_var.iter().sum::<f64>() / n as f64).max(VAR_FLOOR);
        let (ta_mean, ta_var, c2) =
            scalar_extrinsic(&comb.post_mean, avg_b, &tb_mean, tb_var);
        clamped |= c2;
        prev_to_b = Some((tb_mean, tb_var));
        to_a_mean = ta_mean;
        to_a_var = ta_var;
    }
    let (_, mut out) = best.expect("at least one turbo iteration ran");
    out.iterations = opts.max_iters.max(1);
    out.oscillated = true;
    out.clamped |= clamped;
    out
}

/// Pushes slot-`t` beliefs through the Markov transitions to produce the
/// slot-`t+1` priors: `pi' = pi (1-rho10) + (1-pi) rho01`, amplitude mean
/// shrunk toward the innovation mean, and variance propagated through the
/// AR(1) recursion.
pub fn cross_slot_propagate(
    beliefs: &SlotBeliefs,
    hyper: &MarkovHyperparams,
) -> (Vec<f64>, Vec<Complex64>, Vec<f64>) {
    let b = hyper.beta_amp;
    let support = beliefs
        .support
        .iter()
        .map(|&p| p * (1.0 - hyper.rho10) + (1.0 - p) * hyper.rho01)
        .collect();
    let mean = beliefs
        .amp_mean
        .iter()
        .map(|&m| m * (1.0 - b) + hyper.mu_amp * b)
        .collect();
    let var = beliefs
        .amp_var
        .iter()
        .map(|&v| (1.0 - b) * (1.0 - b) * v + b * b * hyper.gamma_amp)
        .collect();
    (support, mean, var)
}

/// Previous-slot anchors for the M-step priors.
#[derive(Debug, Clone)]
pub struct SurrogatePriors {
    pub doppler_prev: Vec<f64>,
    pub off_tau_prev: Vec<f64>,
    pub off_theta_prev: Vec<f64>,
    pub off_phi_prev: Vec<f64>,
}

impl SurrogatePriors {
    /// Snapshots the carried parameters at slot entry.
    pub fn from_state(state: &TrackerState) -> Self {
        Self {
            doppler_prev: state.doppler.clone(),
            off_tau_prev: state.grids.off_tau.clone(),
            off_theta_prev: state.grids.off_theta.clone(),
            off_phi_prev: state.grids.off_phi.clone(),
        }
    }
}

/// Surrogate objective value and its analytic gradients in every
/// parameter block.
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub value: f64,
    pub grad_epsilon: f64,
    pub grad_tau0: f64,
    pub grad_doppler: Vec<f64>,
    pub grad_off_tau: Vec<f64>,
    pub grad_off_theta: Vec<f64>,
    pub grad_off_phi: Vec<f64>,
}

fn steering_derivatives(
    theta: f64,
    phi: f64,
    nx: usize,
    ny: usize,
) -> (CVec, CVec) {
    let a = steering_vector_upa(theta, phi, nx, ny);
    let ct = theta.cos();
    let st = theta.sin();
    let cp = phi.cos();
    let sp = phi.sin();
    let mut dth = CVec::zeros(nx * ny);
    let mut dph = CVec::zeros(nx * ny);
    for i in 0..nx * ny {
        let (ix, iy) = ((i / ny) as f64, (i % ny) as f64);
        dth[i] = Complex64::new(0.0, PI * (ix * ct * cp - iy * st)) * a[i];
        dph[i] = Complex64::new(0.0, -PI * ix * st * sp) * a[i];
    }
    (dth, dph)
}

/// Expected-residual surrogate at the current parameters:
/// `u = -E||y - Phi h||^2 / sigma2 + ln p(params | previous slot)`, with
/// the expectation over the posterior mean and diagonal variances and the
/// Gaussian drift priors on Doppler and the off-grid offsets (the common
/// phase and timing offset carry flat priors). Every dictionary column
/// has constant norm in every parameter, so the posterior-variance term
/// contributes no gradient, and the returned gradients are the residual
/// correlations plus the prior pulls.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_value_and_gradient(
    cfg: &SystemConfig,
    grids: &Grids,
    op: &SensingOperator,
    y: &CVec,
    post_mean: &CVec,
    post_var: &[f64],
    doppler: &[f64],
    slot: usize,
    rows: &[usize],
    priors: &SurrogatePriors,
    hyper: &MarkovHyperparams,
    sigma2: f64,
) -> SurrogateEval {
    let (l, npair) = (grids.n_delay(), grids.n_pairs());
    let (p, nr) = (op.g.nrows(), op.a_r.nrows());
    let fitted = op.apply(post_mean);
    let resid = y - &fitted;
    let two_over_s = 2.0 / sigma2;

    // Value: residual energy plus the variance term (constant in the
    // parameters) plus the drift priors, all negated except the priors'
    // own signs; normalization constants are dropped throughout.
    let gcol2: Vec<f64> = (0..l).map(|i| op.g.column(i).norm_squared()).collect();
    let acol2: Vec<f64> = (0..npair).map(|j| op.a_r.column(j).norm_squared()).collect();
    let mut var_term = 0.0;
    for m in 0..post_var.len() {
        var_term += post_var[m] * gcol2[m % l] * acol2[m / l];
    }
    let mut value = -(resid.norm_squared() + var_term) / sigma2;
    let dvar = hyper.beta_dop * hyper.beta_dop * hyper.gamma_dop;
    let mut grad_doppler = vec![0.0; doppler.len()];
    for m in 0..doppler.len() {
        let anchor = (1.0 - hyper.beta_dop) * priors.doppler_prev[m] + hyper.beta_dop * hyper.mu_dop;
        value -= (doppler[m] - anchor) * (doppler[m] - anchor) / (2.0 * dvar);
        grad_doppler[m] = -(doppler[m] - anchor) / dvar;
    }
    let mut grad_off_tau = vec![0.0; l];
    for i in 0..l {
        let d = grids.off_tau[i] - priors.off_tau_prev[i];
        value -= d * d / (2.0 * hyper.gamma_u_tau);
        grad_off_tau[i] = -d / hyper.gamma_u_tau;
    }
    let mut grad_off_theta = vec![0.0; grids.azimuths.len()];
    for i in 0..grids.azimuths.len() {
        let d = grids.off_theta[i] - priors.off_theta_prev[i];
        value -= d * d / (2.0 * hyper.gamma_u_theta);
        grad_off_theta[i] = -d / hyper.gamma_u_theta;
    }
    let mut grad_off_phi = vec![0.0; grids.elevations.len()];
    for i in 0..grids.elevations.len() {
        let d = grids.off_phi[i] - priors.off_phi_prev[i];
        value -= d * d / (2.0 * hyper.gamma_u_phi);
        grad_off_phi[i] = -d / hyper.gamma_u_phi;
    }

    // Common phase: the whole fitted vector rotates.
    let grad_epsilon = two_over_s * fitted.dotc(&resid).im;

    // Timing offset: row p of the fitted vector scales by -j 2 pi n_p f_s.
    let mut acc = Complex64::new(0.0, 0.0);
    for r in 0..nr {
        for pp in 0..p {
            let w = -2.0 * PI * cfg.subcarrier_spacing_hz * rows[pp] as f64;
            let d = Complex64::new(0.0, w) * fitted[r * p + pp];
            acc += d.conj() * resid[r * p + pp];
        }
    }
    let grad_tau0 = two_over_s * acc.re;

    // Shared correlation factors for the per-column gradients.
    let rmat = CMat::from_column_slice(p, nr, resid.as_slice());
    let k = op.g.ad_mul(&rmat);
    let t2 = &k * op.a_r.conjugate();
    let c_t = 2.0 * PI * cfg.srs_period_s * slot as f64;
    let mut gprime = op.g.clone();
    for pp in 0..p {
        let w = Complex64::new(0.0, -2.0 * PI * cfg.subcarrier_spacing_hz * rows[pp] as f64);
        for i in 0..l {
            gprime[(pp, i)] *= w;
        }
    }
    let tp = gprime.ad_mul(&rmat) * op.a_r.conjugate();
    let mut a_dth = CMat::zeros(nr, npair);
    let mut a_dph = CMat::zeros(nr, npair);
    for j in 0..npair {
        let (ix, iy) = grids.split_pair(j);
        let (dth, dph) =
            steering_derivatives(grids.azimuth_at(ix), grids.elevation_at(iy), cfg.nx, cfg.ny);
        for r in 0..nr {
            a_dth[(r, j)] = dth[r];
            a_dph[(r, j)] = dph[r];
        }
    }
    let uth = &k * a_dth.conjugate();
    let uph = &k * a_dph.conjugate();

    for m in 0..doppler.len() {
        let (j, i) = (m / l, m % l);
        let mu_rot = (post_mean[m] * Complex64::cis(op.doppler_phase[m])).conj();
        grad_doppler[m] += two_over_s * c_t * (mu_rot * t2[(i, j)]).im;
        grad_off_tau[i] += two_over_s * (mu_rot * tp[(i, j)]).re;
        let (ix, iy) = grids.split_pair(j);
        grad_off_theta[ix] += two_over_s * (mu_rot * uth[(i, j)]).re;
        grad_off_phi[iy] += two_over_s * (mu_rot * uph[(i, j)]).re;
    }

    SurrogateEval {
        value,
        grad_epsilon,
        grad_tau0,
        grad_doppler,
        grad_off_tau,
        grad_off_theta,
        grad_off_phi,
    }
}

/// Which parameter block an M-step sweep is updating.
enum MstepBlock {
    Tau0,
    Doppler,
    OffTau,
    OffTheta,
    OffPhi,
}

/// One M-step sweep: a closed-form common-phase update, then one guarded
/// sign-gradient step per remaining block in the order timing offset,
/// Doppler, delay offsets, azimuth offsets, elevation offsets. Each step
/// magnitude is one fiftieth of the block's grid interval (the Doppler
/// block uses the prior's standard deviation as its interval), off-grid
/// components are re-clamped to half a grid step, and the operator is
/// rebuilt between blocks so every gradient sees the updated parameters.
/// A block step that lowers the surrogate is reverted, which keeps the
/// sweep monotone and inert to noise-level gradients. Returns the
/// rebuilt operator at the final parameters.
#[allow(clippy::too_many_arguments)]
pub fn mstep_update(
    cfg: &SystemConfig,
    state: &mut TrackerState,
    y: &CVec,
    post_mean: &CVec,
    post_var: &[f64],
    slot: usize,
    rows: &[usize],
    pilot: &CVec,
    priors: &SurrogatePriors,
    hyper: &MarkovHyperparams,
    sigma2: f64,
) -> SensingOperator {
    let rebuild = |s: &TrackerState| {
        build_sensing(cfg, &s.grids, s.epsilon, s.tau0, &s.doppler, slot, rows, pilot)
    };
    let eval = |s: &TrackerState, op: &SensingOperator| {
        surrogate_value_and_gradient(
            cfg, &s.grids, op, y, post_mean, post_var, &s.doppler, slot, rows, priors, hyper,
            sigma2,
        )
    };

    // Common phase: the residual objective is sinusoidal in epsilon with
    // its maximum where the fitted vector aligns with the observation,
    // and the prior on the phase is flat, so the argmax is closed form.
    let mut op = rebuild(state);
    let fitted = op.apply(post_mean);
    state.epsilon = wrap_angle(state.epsilon + fitted.dotc(y).arg());
    op = rebuild(state);
    let mut cur = eval(state, &op);

    let tau_step = state.grids.delay_step() / 50.0;
    let dop_step = hyper.gamma_dop.sqrt() / 50.0;
    let th_step = state.grids.azimuth_step() / 50.0;
    let ph_step = state.grids.elevation_step() / 50.0;
    for block in [
        MstepBlock::Tau0,
        MstepBlock::Doppler,
        MstepBlock::OffTau,
        MstepBlock::OffTheta,
        MstepBlock::OffPhi,
    ] {
        let saved_tau0 = state.tau0;
        let saved_doppler = state.doppler.clone();
        let saved_grids = state.grids.clone();
        match block {
            MstepBlock::Tau0 => {
                state.tau0 += tau_step * sign_step(cur.grad_tau0);
            }
            MstepBlock::Doppler => {
                for m in 0..state.doppler.len() {
                    state.doppler[m] += dop_step * sign_step(cur.grad_doppler[m]);
                }
            }
            MstepBlock::OffTau => {
                for i in 0..state.grids.off_tau.len() {
                    state.grids.off_tau[i] += tau_step * sign_step(cur.grad_off_tau[i]);
                }
                state.grids.clamp_offsets();
            }
            MstepBlock::OffTheta => {
                for i in 0..state.grids.off_theta.len() {
                    state.grids.off_theta[i] += th_step * sign_step(cur.grad_off_theta[i]);
                }
                state.grids.clamp_offsets();
            }
            MstepBlock::OffPhi => {
                for i in 0..state.grids.off_phi.len() {
                    state.grids.off_phi[i] += ph_step * sign_step(cur.grad_off_phi[i]);
                }
                state.grids.clamp_offsets();
            }
        }
        let op_new = rebuild(state);
        let new = eval(state, &op_new);
        if new.value >= cur.value {
            op = op_new;
            cur = new;
        } else {
            state.tau0 = saved_tau0;
            state.doppler = saved_doppler;
            state.grids = saved_grids;
        }
    }
    op
}

/// Maps the estimation stage's refined paths onto the tracking grids.
///
/// Each path claims the atom nearest to its delay and angles: that atom
/// gets the almost-on support prior, an amplitude prior shrunk from the
/// estimated gain, the path's Doppler, and off-grid offsets equal to the
/// residual quantization error (clamped). Every other atom starts from
/// the zero-anchored chain: birth-probability support and an amplitude
/// prior propagated from zero. When two paths claim one atom the
/// stronger keeps it and the collision flag is set; a weaker path's
/// offset never overwrites a stronger path's on a shared grid axis.
pub fn init_from_hrpe(
    refined: &RefinedEstimate,
    grids: Grids,
    hyper: &MarkovHyperparams,
) -> TrackerState {
    assert!(!refined.paths.is_empty(), "initialization needs at least one path");
    let mut grids = grids;
    grids.off_tau.iter_mut().for_each(|v| *v = 0.0);
    grids.off_theta.iter_mut().for_each(|v| *v = 0.0);
    grids.off_phi.iter_mut().for_each(|v| *v = 0.0);
    let n = grids.n_atoms();
    let b = hyper.beta_amp;
    let zero_mean = hyper.mu_amp * b;
    let zero_var = b * b * hyper.gamma_amp;
    let mut state = TrackerState {
        support: vec![hyper.rho01; n],
        amp_mean: vec![zero_mean; n],
        amp_var: vec![zero_var; n],
        doppler: vec![hyper.mu_dop; n],
        epsilon: 0.0,
        tau0: 0.0,
        post_mean: CVec::zeros(n),
        post_var: vec![0.0; n],
        flags: TrackerFlags::default(),
        grids,
    };
    let nearest = |grid: &[f64], v: f64| {
        let mut best = 0;
        for (i, &g) in grid.iter().enumerate() {
            if (v - g).abs() < (v - grid[best]).abs() {
                best = i;
            }
        }
        best
    };
    let l = state.grids.n_delay();
    let ny = state.grids.elevations.len();
    let mut tau_set = vec![false; l];
    let mut th_set = vec![false; state.grids.azimuths.len()];
    let mut ph_set = vec![false; ny];
    let mut claimed = vec![false; n];
    // Visit paths strongest first, so first-writer-wins keeps the stronger
    // path on every contested atom or grid axis.
    let mut order: Vec<usize> = (0..refined.paths.len()).collect();
    order.sort_by(|&a, &b| {
        refined.paths.gains[b]
            .norm_sqr()
            .total_cmp(&refined.paths.gains[a].norm_sqr())
    });
    for k in order {
        let li = nearest(&state.grids.delays, refined.paths.delays[k]);
        let ix = nearest(&state.grids.azimuths, refined.paths.azimuths[k]);
        let iy = nearest(&state.grids.elevations, refined.paths.elevations[k]);
        let m = (ix * ny + iy) * l + li;
        if claimed[m] {
            state.flags.init_collision = true;
            continue;
        }
        claimed[m] = true;
        state.support[m] = 1.0 - hyper.rho10;
        state.amp_mean[m] = refined.paths.gains[k] * (1.0 - b) + hyper.mu_amp * b;
        state.amp_var[m] = b * b * hyper.gamma_amp;
        state.doppler[m] = refined.paths.dopplers[k];
        if !tau_set[li] {
            tau_set[li] = true;
            state.grids.off_tau[li] = refined.paths.delays[k] - state.grids.delays[li];
        }
        if !th_set[ix] {
            th_set[ix] = true;
            state.grids.off_theta[ix] = refined.paths.azimuths[k] - state.grids.azimuths[ix];
        }
        if !ph_set[iy] {
            ph_set[iy] = true;
            state.grids.off_phi[iy] = refined.paths.elevations[k] - state.grids.elevations[iy];
        }
    }
    state.grids.clamp_offsets();
    state
}

/// EM controls for one tracked slot.
#[derive(Debug, Clone)]
pub struct TrackOptions {
    /// EM sweeps per slot; zero runs a single E-step and no M-step.
    pub i_em: usize,
    pub turbo: TurboOptions,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self { i_em: 5, turbo: TurboOptions::default() }
    }
}

/// Per-slot tracking output.
#[derive(Debug, Clone)]
pub struct TrackOutcome {
    /// Reconstructed `N x N_r` full-band response.
    pub full_band: CMat,
    /// Residual energy `||y - Phi h||^2` at the returned posterior.
    pub residual_energy: f64,
    /// Iterations of the final E-step.
    pub turbo_iterations: usize,
}

/// Tracks one slot: fresh per-slot imperfections, `I_EM` rounds of
/// E-step plus M-step (a single E-step when `i_em` is zero), belief
/// propagation to the next slot, and full-band synthesis from the
/// posterior and the final parameters.
pub fn track_slot(
    cfg: &SystemConfig,
    state: &mut TrackerState,
    obs: &SrsObservation,
    hyper: &MarkovHyperparams,
    opts: &TrackOptions,
) -> TrackOutcome {
    let y = CVec::from_column_slice(obs.y.as_slice());
    // The LMMSE stage divides by the noise power, so a noiseless
    // observation is handled as an almost-exact one.
    let sigma2 = obs.noise_var.max(VAR_FLOOR);
    state.epsilon = 0.0;
    state.tau0 = 0.0;
    let priors = SurrogatePriors::from_state(state);
    let mut op = build_sensing(
        cfg,
        &state.grids,
        state.epsilon,
        state.tau0,
        &state.doppler,
        obs.slot,
        &obs.rows,
        &obs.pilot,
    );
    let mut turbo = turbo_estep(
        &op, &y, sigma2, &state.support, &state.amp_mean, &state.amp_var, &opts.turbo,
    );
    for _ in 0..opts.i_em {
        op = mstep_update(
            cfg,
            state,
            &y,
            &turbo.post_mean,
            &turbo.post_var,
            obs.slot,
            &obs.rows,
            &obs.pilot,
            &priors,
            hyper,
            sigma2,
        );
        turbo = turbo_estep(
            &op, &y, sigma2, &state.support, &state.amp_mean, &state.amp_var, &opts.turbo,
        );
    }
    state.flags.oscillated |= turbo.oscillated;
    state.flags.variance_clamped |= turbo.clamped;
    state.post_mean = turbo.post_mean.clone();
    state.post_var = turbo.post_var.clone();
    let residual_energy = (&y - op.apply(&turbo.post_mean)).norm_squared();

    // Full-band synthesis from the posterior and the final parameters.
    let n = cfg.num_subcarriers;
    let l = state.grids.n_delay();
    let npair = state.grids.n_pairs();
    let phase = Complex64::cis(state.epsilon);
    let mut f_full = CMat::zeros(n, l);
    for i in 0..l {
        let col = delay_steering(state.tau0 + state.grids.delay_at(i), n, cfg.subcarrier_spacing_hz);
        for row in 0..n {
            f_full[(row, i)] = col[row] * phase;
        }
    }
    let x = CMat::from_fn(l, npair, |i, j| {
        turbo.post_mean[j * l + i] * Complex64::cis(op.doppler_phase[j * l + i])
    });
    let full_band = (f_full * x) * op.a_r.transpose();

    let (support, amp_mean, amp_var) = cross_slot_propagate(&turbo.beliefs, hyper);
    state.support = support;
    state.amp_mean = amp_mean;
    state.amp_var = amp_var;

    TrackOutcome { full_band, residual_energy, turbo_iterations: turbo.iterations }
}
