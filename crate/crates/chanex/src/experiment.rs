//! Monte-Carlo benchmark harness: generates trials, runs every
//! requested scheme on identical observations, aggregates NMSE/TNMSE,
//! and writes the long-form CSV plus the aggregated JSON tables.
//!
//! Determinism contract: one spec and seed produce byte-identical
//! output files. Every random draw comes from a keyed substream of the
//! spec seed, trials are merged in index order after the parallel map,
//! and all tables iterate in the spec's own ordering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    run_baseline1, run_baseline2, run_baseline3, run_two_stage, DelayOnlyOptions, SchemeRun,
};
use crate::hrpe::{RefinedEstimate, RtstFlags, RtstOptions};
use crate::metrics::{nmse, nmse_rows, tnmse};
use crate::rng::{self, purpose};
use crate::scenario::{
    full_band_cfr, generate_paths, imperfection_trace, observe_slot, ImperfectionModel,
    ImperfectionTrace, PathSampler, PathSet, SrsObservation, SystemConfig,
};
use crate::subspace::{SweepGrids, TstOptions};
use crate::tracker::{Grids, MarkovHyperparams, TrackOptions, TurboOptions};
use crate::{CMat, Error, Result};

/// Benchmark scheme identifiers; the lowercase names are the CSV/JSON
/// labels and the CLI spellings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Proposed,
    Baseline1,
    Baseline2,
    Baseline3,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Proposed,
        Scheme::Baseline1,
        Scheme::Baseline2,
        Scheme::Baseline3,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::Baseline1 => "baseline1",
            Scheme::Baseline2 => "baseline2",
            Scheme::Baseline3 => "baseline3",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Scheme::Proposed),
            "baseline1" => Ok(Scheme::Baseline1),
            "baseline2" => Ok(Scheme::Baseline2),
            "baseline3" => Ok(Scheme::Baseline3),
            other => Err(Error::InvalidConfig(format!("unknown scheme '{other}'"))),
        }
    }
}

fn default_schemes() -> Vec<Scheme> {
    Scheme::ALL.to_vec()
}

fn default_snrs() -> Vec<f64> {
    vec![0.0, 5.0, 10.0, 15.0, 20.0]
}

fn default_trials() -> usize {
    100
}

fn default_horizon() -> usize {
    60
}

fn default_true() -> bool {
    true
}

/// A full benchmark description: scenario, schemes, sweep, and output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Scenario configuration; `hop_count` below can override its band
    /// count for hopping-period sweeps.
    pub config: SystemConfig,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    /// Per-sample SNR points in dB, relative to the expected received
    /// signal power per antenna element.
    #[serde(default = "default_snrs")]
    pub snrs_db: Vec<f64>,
    /// Overrides the config's band count (and the dependent tone count
    /// per sounding) when set.
    #[serde(default)]
    pub hop_count: Option<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Slot horizon per trial.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Draw per-slot phase/timing/motion imperfections (the realistic
    /// scenario); disabled leaves every slot as clean as the anchor.
    #[serde(default = "default_true")]
    pub imperfections: bool,
    /// Where `results.csv` and `summary.json` go; no files when unset.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentSpec {
    /// Benchmark defaults at the desk scale.
    pub fn desk_default() -> Self {
        Self {
            config: SystemConfig::desk_scale(),
            schemes: default_schemes(),
            snrs_db: default_snrs(),
            hop_count: None,
            trials: default_trials(),
            horizon: default_horizon(),
            imperfections: true,
            output_dir: None,
            seed: 0,
        }
    }

    /// Scenario config with the hop-count override applied; the tone
    /// count per sounding follows the band count.
    pub fn resolved_config(&self) -> Result<SystemConfig> {
        let mut cfg = self.config.clone();
        if let Some(h) = self.hop_count {
            if h == 0 || cfg.num_subcarriers % (h * cfg.comb) != 0 {
                return Err(Error::InvalidConfig(format!(
                    "hop count {h} does not divide N={} with comb {}",
                    cfg.num_subcarriers, cfg.comb
                )));
            }
            cfg.hop_count = h;
            cfg.srs_tones = cfg.num_subcarriers / (h * cfg.comb);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trial count must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("slot horizon must be >= 1".into()));
        }
        if self.snrs_db.is_empty() {
            return Err(Error::InvalidConfig("SNR list must not be empty".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::InvalidConfig("scheme list must not be empty".into()));
        }
        let mut seen = Vec::new();
        for s in &self.schemes {
            if seen.contains(s) {
                return Err(Error::InvalidConfig(format!(
                    "scheme '{}' listed twice",
                    s.label()
                )));
            }
            seen.push(*s);
        }
        self.resolved_config().map(|_| ())
    }
}

/// One NMSE measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NmseSample {
    pub scheme: Scheme,
    pub snr_db: f64,
    pub slot: usize,
    pub trial: usize,
    pub nmse: f64,
}

/// One band-restricted NMSE measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandSample {
    pub scheme: Scheme,
    pub snr_db: f64,
    pub slot: usize,
    pub band: usize,
    pub trial: usize,
    pub nmse: f64,
}

/// One point of the estimation stage's objective trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub snr_db: f64,
    pub trial: usize,
    pub iteration: usize,
    pub objective: f64,
}

/// A trial whose scheme run collapsed entirely (no usable estimate in
/// any slot); excluded from every mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FatalTrial {
    pub scheme: Scheme,
    pub snr_db: f64,
    pub trial: usize,
}

/// A trial with some failed slots, kept in the means with their
/// zero-estimate NMSE of one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartialFailure {
    pub scheme: Scheme,
    pub snr_db: f64,
    pub trial: usize,
    pub failed_slots: usize,
}

/// Raw measurement collection of one experiment run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricSeries {
    pub samples: Vec<NmseSample>,
    pub band_samples: Vec<BandSample>,
    pub convergence: Vec<ConvergencePoint>,
    pub fatal: Vec<FatalTrial>,
    pub partial: Vec<PartialFailure>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

impl MetricSeries {
    /// NMSE samples of one (scheme, SNR, slot) cell, in trial order.
    pub fn slot_samples(&self, scheme: Scheme, snr_db: f64, slot: usize) -> Vec<f64> {
        self.samples
            .iter()
            .filter(|s| s.scheme == scheme && s.snr_db == snr_db && s.slot == slot)
            .map(|s| s.nmse)
            .collect()
    }

    /// Mean NMSE per slot for one scheme and SNR.
    pub fn mean_nmse_vs_slot(&self, scheme: Scheme, snr_db: f64, horizon: usize) -> Vec<Option<f64>> {
        (0..horizon)
            .map(|t| mean(&self.slot_samples(scheme, snr_db, t)))
            .collect()
    }

    /// Time-averaged NMSE: the arithmetic mean over slots of the
    /// per-slot mean NMSE.
    pub fn tnmse(&self, scheme: Scheme, snr_db: f64, horizon: usize) -> Option<f64> {
        let per_slot: Vec<f64> = self
            .mean_nmse_vs_slot(scheme, snr_db, horizon)
            .into_iter()
            .collect::<Option<Vec<f64>>>()?;
        if per_slot.is_empty() {
            return None;
        }
        Some(tnmse(&per_slot))
    }

    /// Mean band-restricted NMSE of one (scheme, SNR, slot, band) cell.
    pub fn mean_band_nmse(
        &self,
        scheme: Scheme,
        snr_db: f64,
        slot: usize,
        band: usize,
    ) -> Option<f64> {
        let vals: Vec<f64> = self
            .band_samples
            .iter()
            .filter(|s| s.scheme == scheme && s.snr_db == snr_db && s.slot == slot && s.band == band)
            .map(|s| s.nmse)
            .collect();
        mean(&vals)
    }
}

/// Aggregated output tables, serialized as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schemes: Vec<String>,
    pub snrs_db: Vec<f64>,
    pub hop_count: usize,
    pub trials: usize,
    pub horizon: usize,
    pub seed: u64,
    pub imperfections: bool,
    pub fatal_count: usize,
    pub fatal: Vec<FatalTrial>,
    pub partial_count: usize,
    /// Mean NMSE per (scheme, SNR, slot).
    pub nmse_vs_slot: Vec<SlotMeanRow>,
    /// Mean NMSE per (scheme, SNR, slot, band), band-restricted.
    pub nmse_vs_band: Vec<BandMeanRow>,
    /// Time-averaged NMSE per (scheme, SNR).
    pub tnmse_vs_snr: Vec<TnmseRow>,
    /// Mean estimation-stage objective per (SNR, iteration).
    pub stage1_convergence: Vec<ConvergenceRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotMeanRow {
    pub scheme: String,
    pub snr_db: f64,
    pub slot: usize,
    pub mean_nmse: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandMeanRow {
    pub scheme: String,
    pub snr_db: f64,
    pub slot: usize,
    pub band: usize,
    pub mean_nmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TnmseRow {
    pub scheme: String,
    pub snr_db: f64,
    pub tnmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub snr_db: f64,
    pub iteration: usize,
    pub mean_objective: f64,
    pub trials: usize,
}

/// Everything a run produces: raw series, aggregated summary, and the
/// exact file contents.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub series: MetricSeries,
    pub summary: RunSummary,
    /// Long-form CSV: `scheme,snr_db,slot,trial,nmse`.
    pub csv: String,
    /// Pretty-printed summary JSON.
    pub json: String,
}

/// Expected received power per antenna element, averaged over the gain
/// distribution: the per-path power-decay profile divided by the array
/// size (the array response carries the `1/N_r` normalization).
fn expected_entry_power(sampler: &PathSampler, n_rx: usize) -> f64 {
    let total: f64 = (0..sampler.num_paths)
        .map(|i| 10f64.powf(-sampler.power_decay_db * i as f64 / 10.0))
        .sum();
    total / n_rx as f64
}

/// Per-element noise variance realizing `snr_db` against the expected
/// received power of the sampler's path profile on an `n_rx` array.
pub fn noise_variance_for_snr(sampler: &PathSampler, n_rx: usize, snr_db: f64) -> f64 {
    expected_entry_power(sampler, n_rx) * 10f64.powf(-snr_db / 10.0)
}

/// Runs one scheme over an observation sequence with the benchmark's
/// default grids and options.
pub fn run_scheme(scheme: Scheme, obs: &[SrsObservation], cfg: &SystemConfig) -> SchemeRun {
    let sweep = SweepGrids::desk_scale(PathSampler::desk_scale().delay_spread_s);
    let grids = Grids::desk_scale(cfg);
    let hyper = MarkovHyperparams::default_for(&grids);
    match scheme {
        Scheme::Proposed => run_two_stage(
            obs,
            cfg,
            &sweep,
            grids,
            &hyper,
            &RtstOptions::default(),
            &TrackOptions::default(),
        ),
        Scheme::Baseline1 => run_baseline1(obs, cfg, &sweep),
        Scheme::Baseline2 => run_baseline2(obs, cfg, &hyper, &DelayOnlyOptions::default()),
        Scheme::Baseline3 => run_baseline3(
            obs,
            cfg,
            &sweep,
            grids,
            &hyper,
            &TstOptions::default(),
            &TurboOptions::default(),
        ),
    }
}

struct TrialResult {
    series: MetricSeries,
}

fn scheme_is_fatal(run: &SchemeRun) -> bool {
    !run.estimates.is_empty() && run.failed_slots.len() == run.estimates.len()
}

fn run_trial(spec: &ExperimentSpec, cfg: &SystemConfig, trial: usize) -> Result<TrialResult> {
    let sampler = PathSampler::desk_scale();
    let tag = trial as u64;
    let paths = generate_paths(
        cfg,
        &sampler,
        &mut rng::substream(spec.seed, &[tag, purpose::PATHS]),
    )?;
    let model = if spec.imperfections {
        ImperfectionModel::default_for(cfg)
    } else {
        ImperfectionModel::disabled()
    };
    let trace = imperfection_trace(
        &paths,
        &model,
        cfg.srs_period_s,
        spec.horizon,
        &mut rng::substream(spec.seed, &[tag, purpose::IMPERFECTIONS]),
    );
    let truths: Vec<CMat> = (0..spec.horizon)
        .map(|t| full_band_cfr(&paths, &trace, t, cfg))
        .collect();

    let width = cfg.bwp_width();

    let mut series = MetricSeries::default();
    for &snr_db in &spec.snrs_db {
        let noise_var = noise_variance_for_snr(&sampler, cfg.n_rx(), snr_db);
        // One noise substream per slot, shared across SNR points: the
        // draws are standard normals scaled by the noise level, so the
        // SNR sweep sees paired noise realizations.
        let obs: Vec<SrsObservation> = (0..spec.horizon)
            .map(|t| {
                let mut r = rng::substream(spec.seed, &[tag, purpose::NOISE, t as u64]);
                observe_slot(cfg, &truths[t], t, noise_var, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;

        for &scheme in &spec.schemes {
            let run = run_scheme(scheme, &obs, cfg);
            if scheme_is_fatal(&run) {
                series.fatal.push(FatalTrial { scheme, snr_db, trial });
                continue;
            }
            if !run.failed_slots.is_empty() {
                series.partial.push(PartialFailure {
                    scheme,
                    snr_db,
                    trial,
                    failed_slots: run.failed_slots.len(),
                });
            }
            for t in 0..spec.horizon {
                let e = nmse(&run.estimates[t], &truths[t]);
                series.samples.push(NmseSample { scheme, snr_db, slot: t, trial, nmse: e });
                for b in 0..cfg.hop_count {
                    let eb = nmse_rows(&run.estimates[t], &truths[t], b * width, (b + 1) * width);
                    series.band_samples.push(BandSample {
                        scheme,
                        snr_db,
                        slot: t,
                        band: b,
                        trial,
                        nmse: eb,
                    });
                }
            }
            if scheme == Scheme::Proposed {
                for (i, &v) in run.objective_log.iter().enumerate() {
                    series.convergence.push(ConvergencePoint {
                        snr_db,
                        trial,
                        iteration: i,
                        objective: v,
                    });
                }
            }
        }
    }
    Ok(TrialResult { series })
}

fn merge(mut into: MetricSeries, from: MetricSeries) -> MetricSeries {
    into.samples.extend(from.samples);
    into.band_samples.extend(from.band_samples);
    into.convergence.extend(from.convergence);
    into.fatal.extend(from.fatal);
    into.partial.extend(from.partial);
    into
}

fn build_csv(spec: &ExperimentSpec, series: &MetricSeries) -> String {
    let snr_index = |v: f64| spec.snrs_db.iter().position(|&s| s == v).unwrap_or(usize::MAX);
    let scheme_index =
        |s: Scheme| spec.schemes.iter().position(|&x| x == s).unwrap_or(usize::MAX);
    let mut rows: Vec<&NmseSample> = series.samples.iter().collect();
    rows.sort_by_key(|r| (scheme_index(r.scheme), snr_index(r.snr_db), r.slot, r.trial));
    let mut out = String::from("scheme,snr_db,slot,trial,nmse\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e}",
            r.scheme.label(),
            r.snr_db,
            r.slot,
            r.trial,
            r.nmse
        );
    }
    out
}

fn build_summary(spec: &ExperimentSpec, cfg: &SystemConfig, series: &MetricSeries) -> RunSummary {
    let mut nmse_vs_slot = Vec::new();
    let mut nmse_vs_band = Vec::new();
    let mut tnmse_vs_snr = Vec::new();
    for &scheme in &spec.schemes {
        for &snr_db in &spec.snrs_db {
            for slot in 0..spec.horizon {
                let vals = series.slot_samples(scheme, snr_db, slot);
                if let Some(m) = mean(&vals) {
                    nmse_vs_slot.push(SlotMeanRow {
                        scheme: scheme.label().into(),
                        snr_db,
                        slot,
                        mean_nmse: m,
                        trials: vals.len(),
                    });
                }
                for band in 0..cfg.hop_count {
                    if let Some(m) = series.mean_band_nmse(scheme, snr_db, slot, band) {
                        nmse_vs_band.push(BandMeanRow {
                            scheme: scheme.label().into(),
                            snr_db,
                            slot,
                            band,
                            mean_nmse: m,
                        });
                    }
                }
            }
            if let Some(t) = series.tnmse(scheme, snr_db, spec.horizon) {
                tnmse_vs_snr.push(TnmseRow { scheme: scheme.label().into(), snr_db, tnmse: t });
            }
        }
    }
    let mut stage1_convergence = Vec::new();
    if spec.schemes.contains(&Scheme::Proposed) {
        for &snr_db in &spec.snrs_db {
            let iters = series
                .convergence
                .iter()
                .filter(|c| c.snr_db == snr_db)
                .map(|c| c.iteration)
                .max();
            if let Some(max_iter) = iters {
                for i in 0..=max_iter {
                    let vals: Vec<f64> = series
                        .convergence
                        .iter()
                        .filter(|c| c.snr_db == snr_db && c.iteration == i)
                        .map(|c| c.objective)
                        .collect();
                    if let Some(m) = mean(&vals) {
                        stage1_convergence.push(ConvergenceRow {
                            snr_db,
                            iteration: i,
                            mean_objective: m,
                            trials: vals.len(),
                        });
                    }
                }
            }
        }
    }
    RunSummary {
        schemes: spec.schemes.iter().map(|s| s.label().into()).collect(),
        snrs_db: spec.snrs_db.clone(),
        hop_count: cfg.hop_count,
        trials: spec.trials,
        horizon: spec.horizon,
        seed: spec.seed,
        imperfections: spec.imperfections,
        fatal_count: series.fatal.len(),
        fatal: series.fatal.clone(),
        partial_count: series.partial.len(),
        nmse_vs_slot,
        nmse_vs_band,
        tnmse_vs_snr,
        stage1_convergence,
    }
}

/// Runs the full Monte-Carlo benchmark described by `spec`.
///
/// Trials run in parallel and are merged in index order, so the output
/// is independent of scheduling. When `spec.output_dir` is set, the
/// long-form `results.csv` and aggregated `summary.json` are written
/// there (the directory is created if needed).
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let cfg = spec.resolved_config()?;
    let results: Vec<Result<TrialResult>> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| run_trial(spec, &cfg, trial))
        .collect();
    let mut series = MetricSeries::default();
    for r in results {
        series = merge(series, r?.series);
    }
    let csv = build_csv(spec, &series);
    let summary = build_summary(spec, &cfg, &series);
    let json = serde_json::to_string_pretty(&summary).map_err(Error::Json)?;
    if let Some(dir) = &spec.output_dir {
        std::fs::create_dir_all(dir).map_err(Error::Io)?;
        write_atomic(&dir.join("results.csv"), csv.as_bytes())?;
        write_atomic(&dir.join("summary.json"), json.as_bytes())?;
    }
    Ok(ExperimentOutput { series, summary, csv, json })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(Error::Io)
}

/// Worst-slot NMSE of the generator-vs-reconstruction identity: feeds
/// the true parameters through the estimate-side synthesis and scores
/// it against the generator output. Valid when the per-path Doppler is
/// constant over the trace, which makes the accumulated phase linear
/// and therefore expressible by the reconstruction.
pub fn ground_truth_reconstruction_nmse(
    cfg: &SystemConfig,
    paths: &PathSet,
    trace: &ImperfectionTrace,
) -> f64 {
    let slots = trace.epsilon.len();
    let phi_inc: Vec<f64> = paths
        .dopplers
        .iter()
        .map(|f| 2.0 * std::f64::consts::PI * cfg.srs_period_s * f)
        .collect();
    let refined = RefinedEstimate {
        paths: paths.clone(),
        phi_inc,
        epsilon: trace.epsilon.clone(),
        tau0: trace.tau0.clone(),
        objective_log: Vec::new(),
        model_order: paths.len(),
        flags: RtstFlags::default(),
    };
    let mut worst = 0.0f64;
    for t in 0..slots {
        let truth = full_band_cfr(paths, trace, t, cfg);
        let recon = refined.reconstruct(cfg, t);
        worst = worst.max(nmse(&recon, &truth));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_spec() -> ExperimentSpec {
        ExperimentSpec {
            config: SystemConfig::desk_scale(),
            schemes: Scheme::ALL.to_vec(),
            snrs_db: vec![15.0],
            hop_count: None,
            trials: 1,
            horizon: 6,
            imperfections: true,
            output_dir: None,
            seed: 41,
        }
    }

    #[test]
    fn one_trial_one_snr_emits_one_row_per_slot_per_scheme() {
        let spec = tiny_spec();
        let out = run_experiment(&spec).unwrap();
        assert_eq!(out.series.fatal.len(), 0, "fatal trials: {:?}", out.series.fatal);
        let lines: Vec<&str> = out.csv.trim_end().lines().collect();
        assert_eq!(lines[0], "scheme,snr_db,slot,trial,nmse");
        assert_eq!(lines.len(), 1 + spec.schemes.len() * spec.horizon);
        // Rows are grouped by scheme in spec order, slots ascending.
        assert!(lines[1].starts_with("proposed,15,0,0,"));
        assert!(lines[spec.horizon].starts_with("proposed,15,5,0,"));
        assert!(lines[spec.horizon + 1].starts_with("baseline1,15,0,0,"));
        for l in &lines[1..] {
            let v: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
            assert!(v.is_finite() && v >= 0.0);
        }
        // Every (scheme, slot, band) cell is aggregated.
        assert_eq!(
            out.summary.nmse_vs_band.len(),
            spec.schemes.len() * spec.horizon * spec.config.hop_count
        );
        assert_eq!(out.summary.tnmse_vs_snr.len(), spec.schemes.len());
        // Stage-1 convergence log: initialization plus one entry per
        // alternating iteration.
        assert_eq!(out.summary.stage1_convergence.len(), 11);
    }

    #[test]
    fn same_spec_and_seed_reproduce_identical_bytes() {
        let dir = tempdir().unwrap();
        let mut spec = ExperimentSpec {
            schemes: vec![Scheme::Proposed, Scheme::Baseline2],
            horizon: 5,
            ..tiny_spec()
        };
        spec.output_dir = Some(dir.path().join("a"));
        let first = run_experiment(&spec).unwrap();
        spec.output_dir = Some(dir.path().join("b"));
        let second = run_experiment(&spec).unwrap();
        assert_eq!(first.csv, second.csv);
        assert_eq!(first.json, second.json);
        let a = std::fs::read(dir.path().join("a/results.csv")).unwrap();
        let b = std::fs::read(dir.path().join("b/results.csv")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, first.csv.as_bytes());
        let ja = std::fs::read(dir.path().join("a/summary.json")).unwrap();
        assert_eq!(ja, first.json.as_bytes());
    }

    #[test]
    fn ground_truth_reconstruction_is_exact_on_clean_scenarios() {
        let cfg = SystemConfig::desk_scale();
        let sampler = PathSampler::desk_scale();
        let paths = generate_paths(
            &cfg,
            &sampler,
            &mut rng::substream(7, &[0, purpose::PATHS]),
        )
        .unwrap();
        let trace = imperfection_trace(
            &paths,
            &ImperfectionModel::disabled(),
            cfg.srs_period_s,
            8,
            &mut rng::substream(7, &[0, purpose::IMPERFECTIONS]),
        );
        let worst = ground_truth_reconstruction_nmse(&cfg, &paths, &trace);
        assert!(worst <= 1e-20, "reconstruction drifted: {worst:e}");
    }

    #[test]
    fn aggregation_matches_hand_computation() {
        let mut series = MetricSeries::default();
        let push = |series: &mut MetricSeries, slot: usize, trial: usize, v: f64| {
            series.samples.push(NmseSample {
                scheme: Scheme::Proposed,
                snr_db: 10.0,
                slot,
                trial,
                nmse: v,
            });
        };
        push(&mut series, 0, 0, 0.0);
        push(&mut series, 0, 1, 1.0);
        push(&mut series, 1, 0, 0.25);
        push(&mut series, 1, 1, 0.75);
        let means = series.mean_nmse_vs_slot(Scheme::Proposed, 10.0, 2);
        assert_eq!(means, vec![Some(0.5), Some(0.5)]);
        assert_eq!(series.tnmse(Scheme::Proposed, 10.0, 2), Some(0.5));
        // A slot with no samples leaves the horizon incomplete.
        assert_eq!(series.tnmse(Scheme::Proposed, 10.0, 3), None);
    }

    #[test]
    fn hop_count_override_adjusts_tone_count() {
        let mut spec = tiny_spec();
        spec.hop_count = Some(2);
        let cfg = spec.resolved_config().unwrap();
        assert_eq!(cfg.hop_count, 2);
        assert_eq!(cfg.srs_tones, 64);
        spec.hop_count = Some(5);
        assert!(spec.resolved_config().is_err());
    }

    #[test]
    fn spec_validation_rejects_degenerate_inputs() {
        let mut s = tiny_spec();
        s.trials = 0;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.snrs_db.clear();
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.schemes = vec![Scheme::Proposed, Scheme::Proposed];
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.horizon = 0;
        assert!(s.validate().is_err());
        assert!(tiny_spec().validate().is_ok());
    }
}
