//! Covariance construction, subspace decomposition, model-order selection,
//! and the five-step temporal/spatial MUSIC pipeline.
//!
//! The pipeline groups paths by delay with a temporal pseudospectrum,
//! isolates each group with temporal projection filters, resolves angles
//! per group with a spatial pseudospectrum, then isolates each angle with
//! spatial beamforming and re-estimates its delay, yielding paired
//! (delay, azimuth, elevation, gain) estimates.

use num_complex::Complex64;

use crate::scenario::{steering_vector_upa, SrsObservation, SystemConfig};
use crate::{CMat, CVec, Error, Result};

/// Orthonormal signal/noise split of a Hermitian covariance.
#[derive(Debug, Clone)]
pub struct SubspaceDecomposition {
    /// Signal basis, one orthonormal column per signal dimension.
    pub signal: CMat,
    /// Remaining computed basis columns. Spans the full orthogonal
    /// complement when produced by a dense eigendecomposition; the
    /// snapshot (SVD) route only returns the basis vectors the data rank
    /// supports.
    pub noise: CMat,
    /// Eigenvalues of the covariance, descending, clamped at zero,
    /// padded with zeros up to the covariance dimension.
    pub eigenvalues: Vec<f64>,
    /// Relative Frobenius asymmetry `|R - R^H| / |R|` of the input;
    /// nonzero means the input was symmetrized before decomposing.
    pub hermitian_defect: f64,
}

/// Temporal sample covariance `R^d = (1/N_r) Y Y^H`, averaging the
/// expectation over the antenna dimension.
pub fn covariance_temporal(y: &CMat) -> CMat {
    let nr = y.ncols().max(1) as f64;
    y * y.adjoint() / Complex64::from(nr)
}

/// Spatial sample covariance `R^s = (1/P) Y^T Y^*`, averaging the
/// expectation over the tone dimension.
pub fn covariance_spatial(y: &CMat) -> CMat {
    let p = y.nrows().max(1) as f64;
    y.transpose() * y.conjugate() / Complex64::from(p)
}

/// Forward-backward averaging `(R + J R^* J)/2` with `J` the exchange
/// matrix, for rank enhancement with coherent paths.
pub fn forward_backward(r: &CMat) -> CMat {
    let d = r.nrows();
    let mut out = r.clone();
    for i in 0..d {
        for j in 0..d {
            out[(i, j)] = (r[(i, j)] + r[(d - 1 - i, d - 1 - j)].conj()) * 0.5;
        }
    }
    out
}

fn hermitian_eig_sorted(r: &CMat) -> (Vec<f64>, CMat) {
    let eig = nalgebra::SymmetricEigen::new(r.clone());
    let dim = r.nrows();
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let values: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut vectors = CMat::zeros(dim, dim);
    for (c, &i) in idx.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Eigendecomposition split into a `k`-dimensional signal basis and its
/// orthogonal complement. Non-Hermitian inputs are symmetrized as
/// `(R + R^H)/2` and the relative defect is recorded on the output.
pub fn eig_subspace(r: &CMat, k: usize) -> Result<SubspaceDecomposition> {
    let dim = r.nrows();
    assert_eq!(r.ncols(), dim, "covariance must be square");
    if k >= dim {
        return Err(Error::ModelOrderTooLarge { order: k, dim });
    }
    let scale = r.norm();
    let defect = if scale > 0.0 {
        (r - r.adjoint()).norm() / scale
    } else {
        0.0
    };
    let sym = (r + r.adjoint()) * Complex64::new(0.5, 0.0);
    let (values, vectors) = hermitian_eig_sorted(&sym);
    Ok(SubspaceDecomposition {
        signal: vectors.columns(0, k).into_owned(),
        noise: vectors.columns(k, dim - k).into_owned(),
        eigenvalues: values,
        hermitian_defect: defect,
    })
}

/// Subspace split computed from a snapshot matrix `Y` through the
/// Hermitian eigendecomposition of `Y Y^H / snapshots`. Entries past
/// `min(dim, snapshots)` of the eigenvalue list are structural zeros
/// and reported as exactly zero.
///
/// The backend's complex SVD can return invalid singular vectors on
/// rank-deficient inputs, so the covariance eigensolver is used even
/// though a thin SVD would avoid forming the product.
pub fn subspace_from_snapshots(y: &CMat, k: usize, snapshots: usize) -> Result<SubspaceDecomposition> {
    let dim = y.nrows();
    let avail = dim.min(y.ncols());
    if k >= dim {
        return Err(Error::ModelOrderTooLarge { order: k, dim });
    }
    if k > avail {
        return Err(Error::ModelOrderTooLarge { order: k, dim: avail });
    }
    let n = snapshots.max(1) as f64;
    let r = y * y.adjoint() / Complex64::from(n);
    let sym = (&r + r.adjoint()) * Complex64::new(0.5, 0.0);
    let (values, vectors) = hermitian_eig_sorted(&sym);
    let mut eigenvalues = vec![0.0; dim];
    eigenvalues[..avail].copy_from_slice(&values[..avail]);
    Ok(SubspaceDecomposition {
        signal: vectors.columns(0, k).into_owned(),
        noise: vectors.columns(k, avail - k).into_owned(),
        eigenvalues,
        hermitian_defect: 0.0,
    })
}

/// Minimum-description-length model order: the arg-min over `k` of
/// `n (d-k) ln(AM/GM of trailing eigenvalues) + (k (2d-k)/2) ln n`.
///
/// Eigenvalues below `1e-12` of the largest are floored there so exact
/// zeros from rank-deficient sample covariances stay finite; a return of
/// zero means no detectable signal dimension.
pub fn mdl_order(eigenvalues: &[f64], snapshots: usize) -> usize {
    let d = eigenvalues.len();
    if d == 0 {
        return 0;
    }
    let lmax = eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if lmax <= 0.0 {
        return 0;
    }
    let floor = lmax * 1e-12;
    let lam: Vec<f64> = eigenvalues.iter().map(|&l| l.max(floor)).collect();
    let n = snapshots.max(1) as f64;
    let mut best_k = 0;
    let mut best = f64::INFINITY;
    for k in 0..d {
        let m = (d - k) as f64;
        let tail = &lam[k..];
        let am = tail.iter().sum::<f64>() / m;
        let mean_ln = tail.iter().map(|l| l.ln()).sum::<f64>() / m;
        let fit = n * m * (am.ln() - mean_ln);
        let penalty = 0.5 * (k * (2 * d - k)) as f64 * n.ln();
        let score = fit + penalty;
        if score < best {
            best = score;
            best_k = k;
        }
    }
    best_k
}

/// Pseudospectrum sampled over a one-dimensional grid.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    /// Number of grid points whose denominator hit the positivity floor.
    pub floor_hits: usize,
}

/// Pseudospectrum sampled over an azimuth (rows) x elevation (columns) grid.
#[derive(Debug, Clone)]
pub struct Spectrum2 {
    pub values: nalgebra::DMatrix<f64>,
    pub floor_hits: usize,
}

/// Temporal pseudospectrum `1 / (g^H (I - V_s V_s^H) g)` over a delay
/// grid, with the denominator floored at `1e-12 |g|^2`.
pub fn t_music_spectrum(
    decomp: &SubspaceDecomposition,
    g_of: impl Fn(f64) -> CVec,
    grid: &[f64],
) -> Spectrum {
    let mut values = Vec::with_capacity(grid.len());
    let mut floor_hits = 0;
    for &tau in grid {
        let g = g_of(tau);
        let norm2 = g.norm_squared();
        let mut sig = 0.0;
        for c in 0..decomp.signal.ncols() {
            sig += decomp.signal.column(c).dotc(&g).norm_sqr();
        }
        let floor = (1e-12 * norm2).max(f64::MIN_POSITIVE);
        let mut denom = norm2 - sig;
        if denom < floor {
            denom = floor;
            floor_hits += 1;
        }
        values.push(1.0 / denom);
    }
    Spectrum { values, floor_hits }
}

/// Spatial pseudospectrum `1 / (a^H (I - V_s V_s^H) a)` over the angle
/// grids, with the array response of an `nx x ny` rectangular array and
/// the same denominator floor as the temporal spectrum.
pub fn s_music_spectrum(
    decomp: &SubspaceDecomposition,
    nx: usize,
    ny: usize,
    azimuths: &[f64],
    elevations: &[f64],
) -> Spectrum2 {
    let nr = nx * ny;
    assert_eq!(decomp.signal.nrows(), nr, "basis dimension must match array size");
    let rank = decomp.signal.ncols();
    let vs = decomp.signal.as_slice();
    let mut values = nalgebra::DMatrix::zeros(azimuths.len(), elevations.len());
    let mut floor_hits = 0;
    let norm2 = nr as f64;
    let floor = 1e-12;
    let mut ay = vec![Complex64::new(1.0, 0.0); ny];
    let mut a = vec![Complex64::new(0.0, 0.0); nr];
    for (i, &az) in azimuths.iter().enumerate() {
        let wy = Complex64::cis(std::f64::consts::PI * az.cos());
        ay[0] = Complex64::new(1.0, 0.0);
        for iy in 1..ny {
            ay[iy] = ay[iy - 1] * wy;
        }
        let sin_az = az.sin();
        for (j, &el) in elevations.iter().enumerate() {
            let wx = Complex64::cis(std::f64::consts::PI * sin_az * el.cos());
            let mut ax = Complex64::new(1.0, 0.0);
            for ix in 0..nx {
                if ix > 0 {
                    ax *= wx;
                }
                for iy in 0..ny {
                    a[ix * ny + iy] = ax * ay[iy];
                }
            }
            let mut sig = 0.0;
            for c in 0..rank {
                let col = &vs[c * nr..(c + 1) * nr];
                let mut acc = Complex64::new(0.0, 0.0);
                for (v, s) in col.iter().zip(a.iter()) {
                    acc += v.conj() * s;
                }
                sig += acc.norm_sqr();
            }
            // Entries above are unit modulus; dividing by the array size
            // evaluates the unit-norm steering vector.
            let mut denom = (norm2 - sig) / norm2;
            if denom < floor {
                denom = floor;
                floor_hits += 1;
            }
            values[(i, j)] = 1.0 / denom;
        }
    }
    Spectrum2 { values, floor_hits }
}

/// One refined spectrum peak on a one-dimensional grid.
#[derive(Debug, Clone, Copy)]
pub struct Peak {
    pub index: usize,
    /// Sub-grid offset from the three-point parabolic fit, in grid steps,
    /// clamped to `[-0.5, 0.5]`.
    pub offset: f64,
    pub height: f64,
}

/// One refined spectrum peak on a two-dimensional grid.
#[derive(Debug, Clone, Copy)]
pub struct Peak2 {
    pub row: usize,
    pub col: usize,
    pub row_offset: f64,
    pub col_offset: f64,
    pub height: f64,
}

/// Peaks plus a flag for finding fewer local maxima than requested.
#[derive(Debug, Clone)]
pub struct PeakPicks<P> {
    pub peaks: Vec<P>,
    pub shortfall: bool,
}

fn parabolic_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom.abs() < 1e-300 * center.abs().max(1.0) {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Picks the `count` highest strict local maxima (each the unique max in
/// its `radius`-neighborhood), refined by a three-point parabola.
pub fn peak_pick(values: &[f64], count: usize, radius: usize) -> PeakPicks<Peak> {
    let n = values.len();
    let mut peaks = Vec::new();
    for i in 0..n {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(n.saturating_sub(1));
        let mut is_peak = true;
        for j in lo..=hi {
            if j != i && values[j] >= values[i] {
                is_peak = false;
                break;
            }
        }
        if !is_peak {
            continue;
        }
        let offset = if i > 0 && i + 1 < n {
            parabolic_offset(values[i - 1], values[i], values[i + 1])
        } else {
            0.0
        };
        peaks.push(Peak {
            index: i,
            offset,
            height: values[i],
        });
    }
    peaks.sort_by(|a, b| b.height.partial_cmp(&a.height).unwrap());
    let shortfall = peaks.len() < count;
    peaks.truncate(count);
    PeakPicks { peaks, shortfall }
}

/// Two-dimensional analogue of [`peak_pick`] over a square neighborhood,
/// with independent parabolic refinement along each axis.
pub fn peak_pick_2d(
    values: &nalgebra::DMatrix<f64>,
    count: usize,
    radius: usize,
) -> PeakPicks<Peak2> {
    let (nr, nc) = values.shape();
    let mut peaks = Vec::new();
    for i in 0..nr {
        for j in 0..nc {
            let v = values[(i, j)];
            let rlo = i.saturating_sub(radius);
            let rhi = (i + radius).min(nr.saturating_sub(1));
            let clo = j.saturating_sub(radius);
            let chi = (j + radius).min(nc.saturating_sub(1));
            let mut is_peak = true;
            'window: for r in rlo..=rhi {
                for c in clo..=chi {
                    if (r, c) != (i, j) && values[(r, c)] >= v {
                        is_peak = false;
                        break 'window;
                    }
                }
            }
            if !is_peak {
                continue;
            }
            let row_offset = if i > 0 && i + 1 < nr {
                parabolic_offset(values[(i - 1, j)], v, values[(i + 1, j)])
            } else {
                0.0
            };
            let col_offset = if j > 0 && j + 1 < nc {
                parabolic_offset(values[(i, j - 1)], v, values[(i, j + 1)])
            } else {
                0.0
            };
            peaks.push(Peak2 {
                row: i,
                col: j,
                row_offset,
                col_offset,
                height: v,
            });
        }
    }
    peaks.sort_by(|a, b| b.height.partial_cmp(&a.height).unwrap());
    let shortfall = peaks.len() < count;
    peaks.truncate(count);
    PeakPicks { peaks, shortfall }
}

/// Removes every delay group except `keep` by left-multiplying the
/// projection filters `I - (1/P) g(t_n) g(t_n)^H` in ascending `n`.
pub fn temporal_filter(
    y: &CMat,
    g_of: impl Fn(f64) -> CVec,
    delays: &[f64],
    keep: usize,
) -> CMat {
    let p = y.nrows() as f64;
    let mut out = y.clone();
    for (n, &tau) in delays.iter().enumerate() {
        if n == keep {
            continue;
        }
        let g = g_of(tau);
        let coef = g.adjoint() * &out;
        out -= (&g * coef) / Complex64::from(p);
    }
    out
}

/// Removes every angle except `keep` from a group by right-multiplying
/// the conjugate projectors `I - a^* a^T` in ascending `n`; rows of `Y`
/// carry transposed array responses, so the conjugate form is the one
/// that nulls them.
pub fn spatial_beamform(
    y: &CMat,
    angles: &[(f64, f64)],
    nx: usize,
    ny: usize,
    keep: usize,
) -> CMat {
    let mut out = y.clone();
    for (n, &(az, el)) in angles.iter().enumerate() {
        if n == keep {
            continue;
        }
        let a = steering_vector_upa(az, el, nx, ny);
        let coef = &out * a.conjugate();
        out -= coef * a.transpose();
    }
    out
}

/// Search grids for the delay/angle sweeps.
#[derive(Debug, Clone)]
pub struct SweepGrids {
    /// Delay grid in seconds, ascending, uniform step.
    pub delays: Vec<f64>,
    /// Azimuth grid in radians, ascending, uniform step.
    pub azimuths: Vec<f64>,
    /// Elevation grid in radians, ascending, uniform step.
    pub elevations: Vec<f64>,
}

impl SweepGrids {
    pub fn new(delays: Vec<f64>, azimuths: Vec<f64>, elevations: Vec<f64>) -> Self {
        Self {
            delays,
            azimuths,
            elevations,
        }
    }

    /// Default grids: delay step `T_d/512` covering `[0, 1.25 T_d]` (the
    /// extra headroom absorbs positive timing offsets riding on top of
    /// the largest path delay), one-degree angle grids covering `[0, pi]`.
    pub fn desk_scale(delay_spread_s: f64) -> Self {
        let step = delay_spread_s / 512.0;
        let count = 641;
        let delays = (0..count).map(|i| i as f64 * step).collect();
        let deg = std::f64::consts::PI / 180.0;
        let angles: Vec<f64> = (0..=180).map(|i| i as f64 * deg).collect();
        Self {
            delays,
            azimuths: angles.clone(),
            elevations: angles,
        }
    }

    pub fn delay_step(&self) -> f64 {
        if self.delays.len() < 2 {
            return 0.0;
        }
        self.delays[1] - self.delays[0]
    }

    pub fn azimuth_step(&self) -> f64 {
        if self.azimuths.len() < 2 {
            return 0.0;
        }
        self.azimuths[1] - self.azimuths[0]
    }

    pub fn elevation_step(&self) -> f64 {
        if self.elevations.len() < 2 {
            return 0.0;
        }
        self.elevations[1] - self.elevations[0]
    }
}

/// Tuning knobs for the five-step pipeline.
#[derive(Debug, Clone)]
pub struct TstOptions {
    /// Apply forward-backward averaging to the covariances.
    pub forward_backward: bool,
    /// Keep delay peaks at least this fraction of the tallest peak when
    /// forming groups.
    pub group_threshold: f64,
    /// Local-max neighborhood radius for delay peaks, in grid steps.
    pub delay_peak_radius: usize,
    /// Local-max neighborhood radius for angle peaks, in grid steps.
    pub angle_peak_radius: usize,
    /// Skip the temporal model-order selection and use this count.
    pub model_order_override: Option<usize>,
}

impl Default for TstOptions {
    fn default() -> Self {
        Self {
            forward_backward: false,
            group_threshold: 0.1,
            delay_peak_radius: 3,
            angle_peak_radius: 3,
            model_order_override: None,
        }
    }
}

/// One delay group: a shared coarse delay and its per-angle members.
#[derive(Debug, Clone)]
pub struct GroupEstimate {
    /// Group delay in seconds (refined grid location).
    pub delay: f64,
    /// (azimuth, elevation) pairs resolved inside this group.
    pub angles: Vec<(f64, f64)>,
}

/// Diagnostics accumulated across the pipeline stages.
#[derive(Debug, Clone, Default)]
pub struct TstFlags {
    /// Grid points clamped at the pseudospectrum positivity floor.
    pub floor_hits: usize,
    /// Some peak search returned fewer maxima than requested.
    pub peak_shortfall: bool,
    /// Per-group path counts were rebalanced to match the model order.
    pub group_counts_adjusted: bool,
    /// Gain solve needed a ridge term.
    pub gains_ridged: bool,
}

/// Output of the five-step pipeline.
#[derive(Debug, Clone)]
pub struct TstMusicResult {
    /// Paired estimates sorted by descending gain power (Dopplers zero).
    pub paths: crate::scenario::PathSet,
    /// Model order selected before grouping.
    pub model_order: usize,
    /// Delay groups with their angle members.
    pub groups: Vec<GroupEstimate>,
    pub flags: TstFlags,
}

fn balance_group_counts(
    counts: &mut [usize],
    heights: &[f64],
    target: usize,
    cap_each: usize,
) -> bool {
    let before: Vec<usize> = counts.to_vec();
    for c in counts.iter_mut() {
        *c = (*c).clamp(1, cap_each);
    }
    loop {
        let sum: usize = counts.iter().sum();
        if sum <= target {
            break;
        }
        // Shrink the weakest group that can still shrink.
        let mut pick: Option<usize> = None;
        for i in 0..counts.len() {
            if counts[i] > 1 && pick.map_or(true, |p| heights[i] < heights[p]) {
                pick = Some(i);
            }
        }
        match pick {
            Some(i) => counts[i] -= 1,
            None => break,
        }
    }
    loop {
        let sum: usize = counts.iter().sum();
        if sum >= target {
            break;
        }
        // Grow the strongest group that can still grow.
        let mut pick: Option<usize> = None;
        for i in 0..counts.len() {
            if counts[i] < cap_each && pick.map_or(true, |p| heights[i] > heights[p]) {
                pick = Some(i);
            }
        }
        match pick {
            Some(i) => counts[i] += 1,
            None => break,
        }
    }
    counts != before.as_slice()
}

/// Runs the five-step pipeline on one observation matrix.
///
/// `g_of` maps a delay to its tone-domain dictionary column over the rows
/// of `y` (pilot included), so the same code serves single slots and
/// vertically spliced multi-slot frames.
pub fn tst_music(
    y: &CMat,
    g_of: &dyn Fn(f64) -> CVec,
    nx: usize,
    ny: usize,
    grids: &SweepGrids,
    opts: &TstOptions,
) -> Result<TstMusicResult> {
    let p = y.nrows();
    let nr = y.ncols();
    assert_eq!(nr, nx * ny, "observation width must match array size");
    assert!(p > 0 && nr > 0, "observation must be nonempty");
    let mut flags = TstFlags::default();
    let cap = (p - 1).min(nr - 1);

    // Temporal eigenvalues and model order. The noise-free trailing
    // dimensions of the antenna-averaged covariance are structural zeros,
    // so the order selection only sees the top min(P, N_r) eigenvalues.
    let d_mdl = p.min(nr);
    let temporal = |k: usize| -> Result<SubspaceDecomposition> {
        if opts.forward_backward {
            eig_subspace(&forward_backward(&covariance_temporal(y)), k)
        } else {
            subspace_from_snapshots(y, k, nr)
        }
    };
    let probe = temporal(0)?;
    let k_hat = match opts.model_order_override {
        Some(k) => k,
        None => mdl_order(&probe.eigenvalues[..d_mdl], nr),
    };
    if k_hat == 0 {
        return Err(Error::NoDetectablePaths);
    }
    let k_hat = k_hat.min(cap);
    let tdec = temporal(k_hat)?;

    // Step 1: delay grouping on the temporal pseudospectrum.
    let tspec = t_music_spectrum(&tdec, g_of, &grids.delays);
    flags.floor_hits += tspec.floor_hits;
    let picks = peak_pick(&tspec.values, k_hat, opts.delay_peak_radius);
    if picks.peaks.is_empty() {
        return Err(Error::NoDetectablePaths);
    }
    let tallest = picks.peaks[0].height;
    let step = grids.delay_step();
    let kept: Vec<&Peak> = picks
        .peaks
        .iter()
        .filter(|pk| pk.height >= opts.group_threshold * tallest)
        .collect();
    let group_delays: Vec<f64> = kept
        .iter()
        .map(|pk| grids.delays[pk.index] + pk.offset * step)
        .collect();
    let group_heights: Vec<f64> = kept.iter().map(|pk| pk.height).collect();
    let q = group_delays.len();

    // Steps 2-3: temporal filtering, then per-group spatial model order
    // and angle resolution.
    let mut filtered = Vec::with_capacity(q);
    let mut counts = Vec::with_capacity(q);
    for n in 0..q {
        let yk = temporal_filter(y, g_of, &group_delays, n);
        let sdec = if opts.forward_backward {
            eig_subspace(&forward_backward(&covariance_spatial(&yk)), 0)?
        } else {
            subspace_from_snapshots(&yk.transpose(), 0, p)?
        };
        counts.push(mdl_order(&sdec.eigenvalues[..nr.min(p)], p));
        filtered.push(yk);
    }
    if balance_group_counts(&mut counts, &group_heights, k_hat, nr - 1) {
        flags.group_counts_adjusted = true;
    }

    let mut groups = Vec::with_capacity(q);
    for n in 0..q {
        let r_n = counts[n];
        let sdec = if opts.forward_backward {
            eig_subspace(&forward_backward(&covariance_spatial(&filtered[n])), r_n)?
        } else {
            subspace_from_snapshots(&filtered[n].transpose(), r_n, p)?
        };
        let sspec = s_music_spectrum(&sdec, nx, ny, &grids.azimuths, &grids.elevations);
        flags.floor_hits += sspec.floor_hits;
        let apicks = peak_pick_2d(&sspec.values, r_n, opts.angle_peak_radius);
        if apicks.shortfall {
            flags.peak_shortfall = true;
        }
        let angles: Vec<(f64, f64)> = apicks
            .peaks
            .iter()
            .map(|pk| {
                (
                    grids.azimuths[pk.row] + pk.row_offset * grids.azimuth_step(),
                    grids.elevations[pk.col] + pk.col_offset * grids.elevation_step(),
                )
            })
            .collect();
        groups.push(GroupEstimate {
            delay: group_delays[n],
            angles,
        });
    }

    // Steps 4-5: per-angle beamforming and delay re-estimation. The
    // beamformed data lives in the range of the group's temporal filter,
    // so the sweep must use the identically filtered dictionary: against
    // the raw dictionary the signal direction is unreachable and the
    // peak lands off the true delay. The filter suppresses the steering
    // norm near the other groups' delays, which can spike the spectrum
    // there, so among the picked peaks the one closest to the group's
    // Step-1 delay is kept.
    let mut delays = Vec::new();
    let mut azimuths = Vec::new();
    let mut elevations = Vec::new();
    let p_f = p as f64;
    for n in 0..q {
        let angles = &groups[n].angles;
        let other_gs: Vec<CVec> = group_delays
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != n)
            .map(|(_, &tau)| g_of(tau))
            .collect();
        let gf = |tau: f64| -> CVec {
            let mut v = g_of(tau);
            for gj in &other_gs {
                let coef = gj.dotc(&v) / Complex64::from(p_f);
                v -= gj * coef;
            }
            v
        };
        for m in 0..angles.len() {
            let ykm = spatial_beamform(&filtered[n], angles, nx, ny, m);
            let ddec = subspace_from_snapshots(&ykm, 1, nr)?;
            let dspec = t_music_spectrum(&ddec, &gf, &grids.delays);
            flags.floor_hits += dspec.floor_hits;
            let dpick = peak_pick(&dspec.values, q, opts.delay_peak_radius);
            let tau = dpick
                .peaks
                .iter()
                .map(|pk| grids.delays[pk.index] + pk.offset * step)
                .min_by(|a, b| {
                    let da = (a - groups[n].delay).abs();
                    let db = (b - groups[n].delay).abs();
                    da.partial_cmp(&db).unwrap()
                });
            let tau = match tau {
                Some(t) => t,
                None => {
                    flags.peak_shortfall = true;
                    groups[n].delay
                }
            };
            delays.push(tau);
            azimuths.push(angles[m].0);
            elevations.push(angles[m].1);
        }
    }
    if delays.is_empty() {
        return Err(Error::NoDetectablePaths);
    }

    // Gains by least squares against the estimated dictionary.
    let k_found = delays.len();
    let mut a = CMat::zeros(nr, k_found);
    let mut g = CMat::zeros(p, k_found);
    for k in 0..k_found {
        a.set_column(k, &steering_vector_upa(azimuths[k], elevations[k], nx, ny));
        g.set_column(k, &g_of(delays[k]));
    }
    let v = crate::hrpe::khatri_rao(&a, &g);
    let yvec = CVec::from_column_slice(y.as_slice());
    let sol = crate::hrpe::ls_gains(&yvec, &v)?;
    if sol.ridged {
        flags.gains_ridged = true;
    }
    let mut paths = crate::scenario::PathSet {
        gains: sol.gains.iter().cloned().collect(),
        azimuths,
        elevations,
        delays,
        dopplers: vec![0.0; k_found],
    };
    paths.sort_by_power();

    Ok(TstMusicResult {
        paths,
        model_order: k_hat,
        groups,
        flags,
    })
}

/// Convenience wrapper running [`tst_music`] on one sounding observation,
/// using its pilot and tone rows to build the delay dictionary.
pub fn tst_music_obs(
    obs: &SrsObservation,
    cfg: &SystemConfig,
    grids: &SweepGrids,
    opts: &TstOptions,
) -> Result<TstMusicResult> {
    let rows = obs.rows.clone();
    let pilot = obs.pilot.clone();
    let fs = cfg.subcarrier_spacing_hz;
    let g_of = move |tau: f64| crate::scenario::pilot_delay_steering(&rows, &pilot, fs, tau);
    tst_music(&obs.y, &g_of, cfg.nx, cfg.ny, grids, opts)
}
