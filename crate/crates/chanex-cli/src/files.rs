//! On-disk formats for the `generate`/`estimate`/`track` verbs.
//!
//! A scenario file is self-contained JSON: the system configuration,
//! the drawn multipath constellation, the per-slot imperfection trace,
//! and the per-slot sounded observations. Complex numbers are stored
//! as `[re, im]` pairs; observation matrices are flattened row-major,
//! entry `(p, r)` at index `p * n_rx + r`. Pilot sequences, sounded
//! rows, and band indices are not stored: they are deterministic
//! functions of the configuration and the slot index.

use chanex::scenario::{
    hopping_selection, zc_pilot, ImperfectionTrace, PathSet, SrsObservation, SystemConfig,
};
use chanex::hrpe::RefinedEstimate;
use chanex::{CMat, Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

fn pairs(v: &[Complex64]) -> Vec<[f64; 2]> {
    v.iter().map(|c| [c.re, c.im]).collect()
}

fn unpairs(v: &[[f64; 2]]) -> Vec<Complex64> {
    v.iter().map(|p| Complex64::new(p[0], p[1])).collect()
}

/// Multipath constellation in file form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsDto {
    pub gains: Vec<[f64; 2]>,
    pub azimuths_rad: Vec<f64>,
    pub elevations_rad: Vec<f64>,
    pub delays_s: Vec<f64>,
    pub dopplers_hz: Vec<f64>,
}

impl PathsDto {
    pub fn from_paths(p: &PathSet) -> Self {
        Self {
            gains: pairs(&p.gains),
            azimuths_rad: p.azimuths.clone(),
            elevations_rad: p.elevations.clone(),
            delays_s: p.delays.clone(),
            dopplers_hz: p.dopplers.clone(),
        }
    }

    pub fn to_paths(&self) -> PathSet {
        PathSet {
            gains: unpairs(&self.gains),
            azimuths: self.azimuths_rad.clone(),
            elevations: self.elevations_rad.clone(),
            delays: self.delays_s.clone(),
            dopplers: self.dopplers_hz.clone(),
        }
    }
}

/// Per-slot imperfection trace in file form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceDto {
    pub epsilon_rad: Vec<f64>,
    pub tau0_s: Vec<f64>,
    pub doppler_hz: Vec<Vec<f64>>,
    pub phi_rad: Vec<Vec<f64>>,
}

impl TraceDto {
    pub fn from_trace(t: &ImperfectionTrace) -> Self {
        Self {
            epsilon_rad: t.epsilon.clone(),
            tau0_s: t.tau0.clone(),
            doppler_hz: t.doppler.clone(),
            phi_rad: t.phi.clone(),
        }
    }

    pub fn to_trace(&self) -> ImperfectionTrace {
        ImperfectionTrace {
            epsilon: self.epsilon_rad.clone(),
            tau0: self.tau0_s.clone(),
            doppler: self.doppler_hz.clone(),
            phi: self.phi_rad.clone(),
        }
    }
}

/// One slot's received matrix, flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationDto {
    pub slot: usize,
    pub y: Vec<[f64; 2]>,
}

/// A generated scenario: everything needed to rerun estimation or
/// tracking and to score it against the ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub config: SystemConfig,
    pub seed: u64,
    pub horizon: usize,
    pub imperfections: bool,
    /// SNR the noise level was derived from, when it was.
    pub snr_db: Option<f64>,
    pub noise_var: f64,
    pub paths: PathsDto,
    pub trace: TraceDto,
    pub observations: Vec<ObservationDto>,
}

impl ScenarioFile {
    pub fn new(
        config: SystemConfig,
        seed: u64,
        imperfections: bool,
        snr_db: Option<f64>,
        noise_var: f64,
        paths: &PathSet,
        trace: &ImperfectionTrace,
        obs: &[SrsObservation],
    ) -> Self {
        Self {
            config,
            seed,
            horizon: obs.len(),
            imperfections,
            snr_db,
            noise_var,
            paths: PathsDto::from_paths(paths),
            trace: TraceDto::from_trace(trace),
            observations: obs
                .iter()
                .map(|o| {
                    let nr = o.y.ncols();
                    let y = (0..o.y.nrows() * nr)
                        .map(|i| {
                            let c = o.y[(i / nr, i % nr)];
                            [c.re, c.im]
                        })
                        .collect();
                    ObservationDto { slot: o.slot, y }
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.observations.len() != self.horizon {
            return Err(Error::InvalidConfig(format!(
                "scenario holds {} observations for horizon {}",
                self.observations.len(),
                self.horizon
            )));
        }
        let expect = self.config.srs_tones * self.config.n_rx();
        for (i, o) in self.observations.iter().enumerate() {
            if o.slot != i {
                return Err(Error::InvalidConfig(format!(
                    "observation {i} labeled slot {}",
                    o.slot
                )));
            }
            if o.y.len() != expect {
                return Err(Error::InvalidConfig(format!(
                    "slot {i} observation holds {} entries, expected {expect}",
                    o.y.len()
                )));
            }
        }
        let k = self.paths.gains.len();
        if [
            self.paths.azimuths_rad.len(),
            self.paths.elevations_rad.len(),
            self.paths.delays_s.len(),
            self.paths.dopplers_hz.len(),
        ]
        .iter()
        .any(|&l| l != k)
        {
            return Err(Error::InvalidConfig("path field lengths disagree".into()));
        }
        if self.trace.epsilon_rad.len() < self.horizon {
            return Err(Error::InvalidConfig(format!(
                "trace covers {} slots for horizon {}",
                self.trace.epsilon_rad.len(),
                self.horizon
            )));
        }
        Ok(())
    }

    /// Rebuilds the observation sequence (pilot, sounded rows, and band
    /// index re-derived from the configuration).
    pub fn observations(&self) -> Result<Vec<SrsObservation>> {
        self.validate()?;
        let cfg = &self.config;
        let nr = cfg.n_rx();
        let pilot = zc_pilot(cfg.srs_tones, cfg.zc_root)?;
        self.observations
            .iter()
            .map(|o| {
                let rows = hopping_selection(cfg, o.slot);
                let y = CMat::from_fn(rows.len(), nr, |p, r| {
                    let e = o.y[p * nr + r];
                    Complex64::new(e[0], e[1])
                });
                Ok(SrsObservation {
                    y,
                    slot: o.slot,
                    hop: cfg.bwp_at_slot(o.slot),
                    rows,
                    pilot: pilot.clone(),
                    noise_var: self.noise_var,
                })
            })
            .collect()
    }
}

/// Stage-one output in file form: path parameters plus the per-slot
/// imperfection estimates over the window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateFile {
    pub model_order: usize,
    pub paths: PathsDto,
    /// Per-path phase increment per slot; divide by `2 pi T_SRS` for Hz.
    pub phi_inc_rad: Vec<f64>,
    pub epsilon_rad: Vec<f64>,
    pub tau0_s: Vec<f64>,
    pub objective_log: Vec<f64>,
    pub flags: Vec<String>,
}

impl EstimateFile {
    pub fn from_refined(r: &RefinedEstimate) -> Self {
        let mut flags = Vec::new();
        let f = r.flags;
        for (on, name) in [
            (f.matched_fallback, "matched_fallback"),
            (f.sic_widened, "sic_widened"),
            (f.sic_boundary, "sic_boundary"),
            (f.grad_stalled, "grad_stalled"),
            (f.iteration_reverted, "iteration_reverted"),
            (f.gains_ridged, "gains_ridged"),
        ] {
            if on {
                flags.push(name.to_string());
            }
        }
        Self {
            model_order: r.model_order,
            paths: PathsDto::from_paths(&r.paths),
            phi_inc_rad: r.phi_inc.clone(),
            epsilon_rad: r.epsilon.clone(),
            tau0_s: r.tau0.clone(),
            objective_log: r.objective_log.clone(),
            flags,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chanex::experiment::noise_variance_for_snr;
    use chanex::rng::{self, purpose};
    use chanex::scenario::{
        full_band_cfr, generate_paths, imperfection_trace, observe_slot, ImperfectionModel,
        PathSampler,
    };

    fn sample_scenario() -> (SystemConfig, ScenarioFile, Vec<SrsObservation>) {
        let cfg = SystemConfig::desk_scale();
        let sampler = PathSampler::desk_scale();
        let paths =
            generate_paths(&cfg, &sampler, &mut rng::substream(9, &[0, purpose::PATHS])).unwrap();
        let trace = imperfection_trace(
            &paths,
            &ImperfectionModel::default_for(&cfg),
            cfg.srs_period_s,
            5,
            &mut rng::substream(9, &[0, purpose::IMPERFECTIONS]),
        );
        let noise_var = noise_variance_for_snr(&sampler, cfg.n_rx(), 15.0);
        let obs: Vec<SrsObservation> = (0..5)
            .map(|t| {
                let h = full_band_cfr(&paths, &trace, t, &cfg);
                observe_slot(
                    &cfg,
                    &h,
                    t,
                    noise_var,
                    &mut rng::substream(9, &[0, purpose::NOISE, t as u64]),
                )
                .unwrap()
            })
            .collect();
        let file = ScenarioFile::new(
            cfg.clone(),
            9,
            true,
            Some(15.0),
            noise_var,
            &paths,
            &trace,
            &obs,
        );
        (cfg, file, obs)
    }

    #[test]
    fn scenario_roundtrip_is_bit_exact() {
        let (_, file, obs) = sample_scenario();
        let json = serde_json::to_string(&file).unwrap();
        let back: ScenarioFile = serde_json::from_str(&json).unwrap();
        let rebuilt = back.observations().unwrap();
        assert_eq!(rebuilt.len(), obs.len());
        for (a, b) in rebuilt.iter().zip(&obs) {
            assert_eq!(a.y, b.y);
            assert_eq!(a.rows, b.rows);
            assert_eq!(a.pilot, b.pilot);
            assert_eq!(a.hop, b.hop);
            assert_eq!(a.slot, b.slot);
            assert_eq!(a.noise_var, b.noise_var);
        }
        let p = back.paths.to_paths();
        assert_eq!(p.gains, file.paths.to_paths().gains);
        let t = back.trace.to_trace();
        assert_eq!(t.epsilon, file.trace.to_trace().epsilon);
    }

    #[test]
    fn scenario_validation_rejects_mismatched_shapes() {
        let (_, mut file, _) = sample_scenario();
        file.observations[2].y.pop();
        assert!(file.validate().is_err());
        let (_, mut file, _) = sample_scenario();
        file.observations[1].slot = 3;
        assert!(file.validate().is_err());
        let (_, mut file, _) = sample_scenario();
        file.horizon = 9;
        assert!(file.validate().is_err());
        let (_, mut file, _) = sample_scenario();
        file.paths.delays_s.pop();
        assert!(file.validate().is_err());
    }
}
