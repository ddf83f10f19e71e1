//! Ground-truth channel synthesis: multipath sets, per-slot imperfection
//! traces, hopping comb pilots, and noisy SRS observations.
//!
//! The clean frequency response at subcarrier `n` and slot `t` is
//!
//! ```text
//! h[n] = e^{j eps(t)} sum_k alpha_k e^{j phi_k(t)}
//!        e^{-j 2 pi n f_s (tau_k + tau0(t))} a_R(theta_k, phi_k)
//! ```
//!
//! with a uniform planar array response `a_R`, per-slot random phase `eps`,
//! timing offset `tau0`, and accumulated Doppler phase `phi_k`. Slot indices
//! are 0-based throughout; slot 0 is the anchor where all imperfections are
//! pinned to zero.

use crate::{CMat, CVec, Error, Result};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Static system-level constants of the simulated link.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Carrier frequency in Hz (sets the Doppler scale).
    pub carrier_freq_hz: f64,
    /// Total sounded bandwidth in Hz; must equal `num_subcarriers * subcarrier_spacing_hz`.
    pub bandwidth_hz: f64,
    /// Subcarrier spacing `f_s` in Hz.
    pub subcarrier_spacing_hz: f64,
    /// Number of subcarriers `N` across the full band.
    pub num_subcarriers: usize,
    /// Antennas along the array x axis.
    pub nx: usize,
    /// Antennas along the array y axis.
    pub ny: usize,
    /// Number of bandwidth parts `h_p` the SRS hops over.
    pub hop_count: usize,
    /// Comb factor `N_c`; every `N_c`-th subcarrier of a BWP is sounded.
    pub comb: usize,
    /// Sounded tones per slot, `P = N / (h_p * N_c)`.
    pub srs_tones: usize,
    /// SRS period in seconds (time between consecutive sounding slots).
    pub srs_period_s: f64,
    /// Number of slots consumed by the estimation stage; one hop cycle by default.
    pub estimation_slots: usize,
    /// Per-element noise variance (linear power) of the observation.
    pub noise_var: f64,
    /// Base seed for all random substreams of a run.
    pub rng_seed: u64,
    /// Order in which BWPs are visited; `None` means sequential `0..h_p`.
    #[serde(default)]
    pub hop_order: Option<Vec<usize>>,
    /// Zadoff-Chu root of the pilot sequence.
    pub zc_root: u32,
}

impl SystemConfig {
    /// Default benchmark scale: 4x4 array, 256 tones at 60 kHz, 4 BWPs, comb 2.
    pub fn desk_scale() -> Self {
        Self {
            carrier_freq_hz: 3.5e9,
            bandwidth_hz: 256.0 * 60e3,
            subcarrier_spacing_hz: 60e3,
            num_subcarriers: 256,
            nx: 4,
            ny: 4,
            hop_count: 4,
            comb: 2,
            srs_tones: 32,
            srs_period_s: 5e-3,
            estimation_slots: 4,
            noise_var: 0.1,
            rng_seed: 0,
            hop_order: None,
            zc_root: 1,
        }
    }

    /// Total number of receive antennas `N_r = N_x * N_y`.
    pub fn n_rx(&self) -> usize {
        self.nx * self.ny
    }

    /// BWP visited at (0-based) slot `t`.
    pub fn bwp_at_slot(&self, t: usize) -> usize {
        let idx = t % self.hop_count;
        match &self.hop_order {
            Some(order) => order[idx],
            None => idx,
        }
    }

    /// Subcarriers per BWP.
    pub fn bwp_width(&self) -> usize {
        self.num_subcarriers / self.hop_count
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if self.nx == 0 || self.ny == 0 || self.num_subcarriers == 0 {
            return err("array and subcarrier counts must be positive".into());
        }
        if self.hop_count == 0 || self.comb == 0 {
            return err("hop count and comb must be positive".into());
        }
        if self.num_subcarriers % (self.hop_count * self.comb) != 0 {
            return err(format!(
                "N={} not divisible by h_p*N_c={}",
                self.num_subcarriers,
                self.hop_count * self.comb
            ));
        }
        if self.srs_tones != self.num_subcarriers / (self.hop_count * self.comb) {
            return err(format!(
                "srs_tones={} but N/(h_p*N_c)={}",
                self.srs_tones,
                self.num_subcarriers / (self.hop_count * self.comb)
            ));
        }
        let n_fs = self.num_subcarriers as f64 * self.subcarrier_spacing_hz;
        if (n_fs - self.bandwidth_hz).abs() > 1e-6 * self.bandwidth_hz.abs() {
            return err(format!(
                "bandwidth {} != N*f_s = {}",
                self.bandwidth_hz, n_fs
            ));
        }
        if let Some(order) = &self.hop_order {
            let mut seen = vec![false; self.hop_count];
            if order.len() != self.hop_count {
                return err("hop_order length must equal hop_count".into());
            }
            for &b in order {
                if b >= self.hop_count || seen[b] {
                    return err("hop_order must be a permutation of 0..h_p".into());
                }
                seen[b] = true;
            }
        }
        if self.srs_period_s <= 0.0 || self.subcarrier_spacing_hz <= 0.0 {
            return err("periods and spacings must be positive".into());
        }
        if self.noise_var < 0.0 {
            return err("noise_var must be nonnegative".into());
        }
        Ok(())
    }
}

/// One multipath constellation: gains, angles, delays, Dopplers per path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    /// Complex path gains, descending in `|alpha|^2`.
    pub gains: Vec<Complex64>,
    /// Azimuth angles in radians (enter both array axes).
    pub azimuths: Vec<f64>,
    /// Elevation angles in radians.
    pub elevations: Vec<f64>,
    /// Path delays in seconds, inside `[0, T_d]`.
    pub delays: Vec<f64>,
    /// Path Dopplers in Hz at the anchor slot.
    pub dopplers: Vec<f64>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// `N_r x K` matrix whose columns are the per-path array responses.
    pub fn steering_matrix(&self, nx: usize, ny: usize) -> CMat {
        let mut a = CMat::zeros(nx * ny, self.len());
        for k in 0..self.len() {
            a.set_column(k, &steering_vector_upa(self.azimuths[k], self.elevations[k], nx, ny));
        }
        a
    }

    /// Sorts all per-path fields so gains are descending in `|alpha|^2`,
    /// breaking exact power ties by smaller delay.
    pub fn sort_by_power(&mut self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.gains[b]
                .norm_sqr()
                .partial_cmp(&self.gains[a].norm_sqr())
                .unwrap()
                .then(self.delays[a].partial_cmp(&self.delays[b]).unwrap())
        });
        self.gains = idx.iter().map(|&i| self.gains[i]).collect();
        self.azimuths = idx.iter().map(|&i| self.azimuths[i]).collect();
        self.elevations = idx.iter().map(|&i| self.elevations[i]).collect();
        self.delays = idx.iter().map(|&i| self.delays[i]).collect();
        self.dopplers = idx.iter().map(|&i| self.dopplers[i]).collect();
    }
}

/// Sampler configuration for synthetic multipath constellations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathSampler {
    /// Number of paths `K`.
    pub num_paths: usize,
    /// Delay spread `T_d` in seconds; delays are uniform on `[0, T_d]`.
    pub delay_spread_s: f64,
    /// Minimum pairwise delay spacing in seconds (0 disables the constraint).
    pub min_delay_sep_s: f64,
    /// Azimuth sector in radians.
    pub azimuth_range_rad: (f64, f64),
    /// Elevation sector in radians.
    pub elevation_range_rad: (f64, f64),
    /// Average power decay per successive path in dB.
    pub power_decay_db: f64,
    /// Terminal speed in m/s bounding the Doppler magnitude.
    pub speed_mps: f64,
}

impl PathSampler {
    pub fn desk_scale() -> Self {
        Self {
            num_paths: 3,
            delay_spread_s: 500e-9,
            min_delay_sep_s: 60e-9,
            azimuth_range_rad: (0.15 * PI, 0.85 * PI),
            elevation_range_rad: (0.15 * PI, 0.85 * PI),
            power_decay_db: 3.0,
            speed_mps: 3.0 / 3.6,
        }
    }

    /// Largest Doppler magnitude the sampler may emit, `v f_c / c`.
    pub fn max_doppler_hz(&self, carrier_freq_hz: f64) -> f64 {
        self.speed_mps * carrier_freq_hz / SPEED_OF_LIGHT
    }
}

/// Uniform planar array response `a_x(theta, phi) (x) a_y(theta)`.
///
/// Entry `(i_x, i_y)` at flat index `i_x * N_y + i_y` equals
/// `exp(j pi (i_x sin(theta) cos(phi) + i_y cos(theta))) / sqrt(N_x N_y)`;
/// the result has unit L2 norm.
pub fn steering_vector_upa(theta: f64, phi: f64, nx: usize, ny: usize) -> CVec {
    let scale = 1.0 / ((nx * ny) as f64).sqrt();
    let px = PI * theta.sin() * phi.cos();
    let py = PI * theta.cos();
    CVec::from_fn(nx * ny, |i, _| {
        let (ix, iy) = (i / ny, i % ny);
        Complex64::cis(px * ix as f64 + py * iy as f64) * scale
    })
}

/// Delay response over `n` subcarriers: entry `i` is `exp(-j 2 pi i f_s tau)`.
pub fn delay_steering(tau: f64, n: usize, subcarrier_spacing_hz: f64) -> CVec {
    let w = -2.0 * PI * subcarrier_spacing_hz * tau;
    CVec::from_fn(n, |i, _| Complex64::cis(w * i as f64))
}

/// Pilot-weighted delay response on selected rows: entry `i` is
/// `pilot[i] * exp(-j 2 pi rows[i] f_s tau)`. Unit-modulus pilots give it
/// squared norm `P`, which downstream projectors rely on.
pub fn pilot_delay_steering(rows: &[usize], pilot: &CVec, subcarrier_spacing_hz: f64, tau: f64) -> CVec {
    let w = -2.0 * PI * subcarrier_spacing_hz * tau;
    CVec::from_fn(rows.len(), |i, _| pilot[i] * Complex64::cis(w * rows[i] as f64))
}

/// Draws a multipath set: uniform delays with optional minimum spacing,
/// uniform sector angles, complex Gaussian gains on a per-path power-decay
/// profile, and speed-bounded Dopplers. The result is sorted by descending
/// gain power.
pub fn generate_paths(
    cfg: &SystemConfig,
    sampler: &PathSampler,
    rng: &mut impl Rng,
) -> Result<PathSet> {
    let k = sampler.num_paths;
    if k == 0 {
        return Err(Error::InvalidConfig("num_paths must be >= 1".into()));
    }
    const MAX_ATTEMPTS: usize = 1000;
    let mut delays = Vec::with_capacity(k);
    let mut attempts = 0;
    while delays.len() < k {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::PathSpacing { attempts: MAX_ATTEMPTS });
        }
        let cand = if sampler.delay_spread_s > 0.0 {
            rng.random_range(0.0..sampler.delay_spread_s)
        } else {
            0.0
        };
        if delays
            .iter()
            .all(|&d: &f64| (d - cand).abs() >= sampler.min_delay_sep_s)
            || sampler.min_delay_sep_s <= 0.0
        {
            delays.push(cand);
        }
    }
    let uniform = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| -> f64 {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let mut paths = PathSet {
        gains: Vec::with_capacity(k),
        azimuths: Vec::with_capacity(k),
        elevations: Vec::with_capacity(k),
        delays,
        dopplers: Vec::with_capacity(k),
    };
    let f_max = sampler.max_doppler_hz(cfg.carrier_freq_hz);
    for i in 0..k {
        let power = 10f64.powf(-sampler.power_decay_db * i as f64 / 10.0);
        let sigma = (power / 2.0).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        paths.gains.push(Complex64::new(re * sigma, im * sigma));
        paths.azimuths.push(uniform(rng, sampler.azimuth_range_rad));
        paths.elevations.push(uniform(rng, sampler.elevation_range_rad));
        paths.dopplers.push(if f_max > 0.0 {
            rng.random_range(-f_max..f_max)
        } else {
            0.0
        });
    }
    paths.sort_by_power();
    Ok(paths)
}

/// Per-slot imperfection statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImperfectionModel {
    /// Master switch; disabled means every slot is as clean as the anchor.
    pub enabled: bool,
    /// Timing offsets are uniform on `[0, timing_range_s]`.
    pub timing_range_s: f64,
    /// Whether per-path Dopplers drift across slots (Gauss-Markov) or stay frozen.
    pub doppler_drift: bool,
    /// Gauss-Markov innovation rate for the Doppler drift.
    pub beta_d: f64,
    /// Gauss-Markov mean for the Doppler drift, Hz.
    pub mu_d: f64,
    /// Gauss-Markov innovation variance for the Doppler drift, Hz^2.
    pub gamma_d: f64,
}

impl ImperfectionModel {
    /// Default drift model; the timing range spans a quarter cycle of phase
    /// ramp across the band, `1/(4 f_s N)`.
    pub fn default_for(cfg: &SystemConfig) -> Self {
        Self {
            enabled: true,
            timing_range_s: 1.0 / (4.0 * cfg.subcarrier_spacing_hz * cfg.num_subcarriers as f64),
            doppler_drift: true,
            beta_d: 0.1,
            mu_d: 0.0,
            gamma_d: 1.0,
        }
    }

    /// All slots clean; stage-1's static assumptions hold exactly.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            timing_range_s: 0.0,
            doppler_drift: false,
            beta_d: 0.0,
            mu_d: 0.0,
            gamma_d: 0.0,
        }
    }
}

/// Realized per-slot imperfections over a horizon. Slot 0 is identically
/// zero; `phi[t][k]` accumulates `2 pi T_SRS f_D` increments.
#[derive(Debug, Clone)]
pub struct ImperfectionTrace {
    /// Random common phase per slot, radians.
    pub epsilon: Vec<f64>,
    /// Timing offset per slot, seconds.
    pub tau0: Vec<f64>,
    /// Per-slot, per-path Doppler in Hz.
    pub doppler: Vec<Vec<f64>>,
    /// Per-slot, per-path accumulated Doppler phase in radians.
    pub phi: Vec<Vec<f64>>,
}

impl ImperfectionTrace {
    /// Anchor trace: slot 0 with zero imperfections and the path Dopplers.
    pub fn anchor(paths: &PathSet) -> Self {
        Self {
            epsilon: vec![0.0],
            tau0: vec![0.0],
            doppler: vec![paths.dopplers.clone()],
            phi: vec![vec![0.0; paths.len()]],
        }
    }

    pub fn slots(&self) -> usize {
        self.epsilon.len()
    }
}

/// Appends one slot to the trace: fresh `eps` and `tau0` draws, Doppler
/// drift, and the phase recursion `phi_k += 2 pi T_SRS f_Dk`.
pub fn evolve_imperfections(
    trace: &mut ImperfectionTrace,
    model: &ImperfectionModel,
    srs_period_s: f64,
    rng: &mut impl Rng,
) {
    let prev = trace.slots() - 1;
    let k = trace.doppler[prev].len();
    let mut doppler = trace.doppler[prev].clone();
    if model.enabled && model.doppler_drift {
        for f in doppler.iter_mut() {
            let w: f64 = rng.sample(StandardNormal);
            *f = (1.0 - model.beta_d) * *f
                + model.beta_d * (model.mu_d + model.gamma_d.sqrt() * w);
        }
    }
    let mut phi = Vec::with_capacity(k);
    for i in 0..k {
        phi.push(trace.phi[prev][i] + 2.0 * PI * srs_period_s * doppler[i]);
    }
    let (eps, tau0) = if model.enabled {
        (
            rng.random_range(-PI..PI),
            if model.timing_range_s > 0.0 {
                rng.random_range(0.0..model.timing_range_s)
            } else {
                0.0
            },
        )
    } else {
        (0.0, 0.0)
    };
    trace.epsilon.push(eps);
    trace.tau0.push(tau0);
    trace.doppler.push(doppler);
    trace.phi.push(phi);
}

/// Builds a whole-horizon trace of `slots` entries (slot 0 included).
pub fn imperfection_trace(
    paths: &PathSet,
    model: &ImperfectionModel,
    srs_period_s: f64,
    slots: usize,
    rng: &mut impl Rng,
) -> ImperfectionTrace {
    let mut trace = ImperfectionTrace::anchor(paths);
    while trace.slots() < slots {
        evolve_imperfections(&mut trace, model, srs_period_s, rng);
    }
    trace
}

/// Full-band CFR at slot `t`: an `N x N_r` matrix whose row `n` is the
/// model response at subcarrier `n`.
pub fn full_band_cfr(
    paths: &PathSet,
    trace: &ImperfectionTrace,
    t: usize,
    cfg: &SystemConfig,
) -> CMat {
    let n = cfg.num_subcarriers;
    let nr = cfg.n_rx();
    let mut h = CMat::zeros(n, nr);
    let eps = Complex64::cis(trace.epsilon[t]);
    for k in 0..paths.len() {
        let a = steering_vector_upa(paths.azimuths[k], paths.elevations[k], cfg.nx, cfg.ny);
        let weight = eps * paths.gains[k] * Complex64::cis(trace.phi[t][k]);
        let tau = paths.delays[k] + trace.tau0[t];
        let w = -2.0 * PI * cfg.subcarrier_spacing_hz * tau;
        for row in 0..n {
            let c = weight * Complex64::cis(w * row as f64);
            for col in 0..nr {
                h[(row, col)] += c * a[col];
            }
        }
    }
    h
}

/// Sounded subcarrier indices at (0-based) slot `t`: comb offset 0 of the
/// BWP visited by the hop order, strictly increasing.
pub fn hopping_selection(cfg: &SystemConfig, t: usize) -> Vec<usize> {
    let bwp = cfg.bwp_at_slot(t);
    let base = bwp * cfg.bwp_width();
    (0..cfg.srs_tones).map(|i| base + i * cfg.comb).collect()
}

fn largest_prime_at_most(n: usize) -> Option<usize> {
    let is_prime = |m: usize| m >= 2 && (2..).take_while(|d| d * d <= m).all(|d| m % d != 0);
    (2..=n).rev().find(|&m| is_prime(m))
}

/// Zadoff-Chu pilot of length `p`: the base sequence uses the largest prime
/// `p' <= p` and is cyclically extended; entry `m` is
/// `exp(-j pi root m'(m'+1)/p')` with `m' = m mod p'`.
pub fn zc_pilot(p: usize, root: u32) -> Result<CVec> {
    let prime = largest_prime_at_most(p)
        .ok_or_else(|| Error::InvalidConfig(format!("no prime <= {p}")))?;
    if root == 0 || root as usize >= prime {
        return Err(Error::InvalidZcRoot { root, len: prime });
    }
    Ok(CVec::from_fn(p, |m, _| {
        let m = m % prime;
        // m(m+1) is even, so the half-integer phase steps stay exact in f64.
        let phase = -PI * root as f64 * (m * (m + 1)) as f64 / prime as f64;
        Complex64::cis(phase)
    }))
}

/// One slot's noisy observation on the sounded comb.
#[derive(Debug, Clone)]
pub struct SrsObservation {
    /// `P x N_r` received matrix `diag(x) W H + noise`.
    pub y: CMat,
    /// 0-based slot index.
    pub slot: usize,
    /// BWP index visited in this slot.
    pub hop: usize,
    /// Sounded subcarrier indices (rows of `W`), strictly increasing.
    pub rows: Vec<usize>,
    /// Pilot sequence `x`, unit modulus.
    pub pilot: CVec,
    /// Per-element noise variance used to draw this observation.
    pub noise_var: f64,
}

/// Forms `Y = diag(x) W H + noise` with i.i.d. circular complex Gaussian
/// noise of per-element variance `noise_var`.
pub fn srs_observe(
    h_full: &CMat,
    rows: &[usize],
    pilot: &CVec,
    noise_var: f64,
    slot: usize,
    hop: usize,
    rng: &mut impl Rng,
) -> SrsObservation {
    let nr = h_full.ncols();
    let p = rows.len();
    let sigma = (noise_var / 2.0).sqrt();
    let mut y = CMat::zeros(p, nr);
    for i in 0..p {
        for c in 0..nr {
            let noise = if noise_var > 0.0 {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re * sigma, im * sigma)
            } else {
                Complex64::new(0.0, 0.0)
            };
            y[(i, c)] = pilot[i] * h_full[(rows[i], c)] + noise;
        }
    }
    SrsObservation {
        y,
        slot,
        hop,
        rows: rows.to_vec(),
        pilot: pilot.clone(),
        noise_var,
    }
}

/// Convenience: selection, pilot, and observation for slot `t` of `cfg`.
pub fn observe_slot(
    cfg: &SystemConfig,
    h_full: &CMat,
    t: usize,
    noise_var: f64,
    rng: &mut impl Rng,
) -> Result<SrsObservation> {
    let rows = hopping_selection(cfg, t);
    let pilot = zc_pilot(cfg.srs_tones, cfg.zc_root)?;
    Ok(srs_observe(h_full, &rows, &pilot, noise_var, t, cfg.bwp_at_slot(t), rng))
}
