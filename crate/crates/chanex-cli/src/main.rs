//! Benchmark CLI: scenario generation, one-shot estimation, tracking,
//! Monte-Carlo benchmarking, and report formatting.
//!
//! Exit codes: 0 on success, 2 on invalid configuration or malformed
//! input files, 3 when a benchmark exceeds the fatal-trial threshold,
//! 1 on any other failure.

mod files;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use chanex::experiment::{
    noise_variance_for_snr, run_experiment, run_scheme, ExperimentSpec, RunSummary, Scheme,
};
use chanex::hrpe::{r_tst_music, RtstOptions};
use chanex::metrics::nmse;
use chanex::rng::{self, purpose};
use chanex::scenario::{
    full_band_cfr, generate_paths, imperfection_trace, observe_slot, ImperfectionModel,
    PathSampler,
};
use chanex::subspace::SweepGrids;

use files::{EstimateFile, ScenarioFile};

#[derive(Parser)]
#[command(name = "chanex", version, about = "Channel extrapolation benchmark tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic scenario and write it as a JSON file.
    Generate(GenerateArgs),
    /// Run the multi-band parameter estimation stage on a scenario file.
    Estimate(EstimateArgs),
    /// Run one scheme over a scenario file and report per-slot NMSE.
    Track(TrackArgs),
    /// Run a Monte-Carlo benchmark and write results.csv / summary.json.
    Bench(BenchArgs),
    /// Format benchmark summaries as tables; merge several for comparison.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output path for the scenario JSON.
    #[arg(long, default_value = "scenario.json")]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of sounded slots.
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    /// SNR in dB fixing the noise level (ignored when --noise-var is given).
    #[arg(long, default_value_t = 15.0)]
    snr_db: f64,
    /// Per-element noise variance, overriding --snr-db.
    #[arg(long)]
    noise_var: Option<f64>,
    /// Number of bands the sounding hops across.
    #[arg(long)]
    hop_count: Option<usize>,
    /// Draw per-slot phase/timing/motion imperfections.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    imperfections: bool,
}

#[derive(Args)]
struct EstimateArgs {
    /// Scenario JSON produced by `generate`.
    #[arg(long)]
    input: PathBuf,
    /// Estimation window length (default: the config's window).
    #[arg(long)]
    slots: Option<usize>,
    /// Output path for the estimate JSON (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    /// Scenario JSON produced by `generate`.
    #[arg(long)]
    input: PathBuf,
    /// Scheme to run: proposed, baseline1, baseline2, or baseline3.
    #[arg(long, default_value = "proposed")]
    scheme: Scheme,
    /// Output path for the per-slot NMSE CSV (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML experiment spec; fields present in it override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Schemes to run (comma-separated).
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<Scheme>>,
    /// SNR points in dB (comma-separated).
    #[arg(long, value_delimiter = ',')]
    snrs_db: Option<Vec<f64>>,
    /// Number of bands the sounding hops across.
    #[arg(long)]
    hop_count: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Slot horizon per trial.
    #[arg(long)]
    horizon: Option<usize>,
    /// Draw per-slot phase/timing/motion imperfections.
    #[arg(long, action = clap::ArgAction::Set)]
    imperfections: Option<bool>,
    /// Directory for results.csv and summary.json.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with status 3 when more than this share of scheme runs
    /// collapses fatally.
    #[arg(long, default_value_t = 0.05)]
    max_fatal_share: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// summary.json files produced by `bench`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the merged summaries as one JSON array.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn invalid(msg: String) -> anyhow::Error {
    anyhow::Error::new(chanex::Error::InvalidConfig(msg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<chanex::Error>() {
                Some(chanex::Error::InvalidConfig(_)) => 2,
                Some(chanex::Error::InvalidZcRoot { .. }) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Estimate(a) => estimate(a),
        Command::Track(a) => track(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report(a),
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn load_scenario(path: &Path) -> anyhow::Result<ScenarioFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let file: ScenarioFile = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("{} is not a scenario file: {e}", path.display())))?;
    file.validate()?;
    Ok(file)
}

/// Draws the scenario the benchmark's trial 0 would see at this seed
/// and noise level, so generated files pair with `bench` runs.
fn generate(a: GenerateArgs) -> anyhow::Result<u8> {
    let mut spec = ExperimentSpec::desk_default();
    spec.hop_count = a.hop_count;
    spec.seed = a.seed;
    spec.horizon = a.horizon;
    spec.imperfections = a.imperfections;
    let cfg = spec.resolved_config()?;
    if a.horizon == 0 {
        return Err(invalid("horizon must be >= 1".into()));
    }
    let sampler = PathSampler::desk_scale();
    let (snr_db, noise_var) = match a.noise_var {
        Some(v) if v >= 0.0 => (None, v),
        Some(v) => return Err(invalid(format!("noise variance {v} is negative"))),
        None => (Some(a.snr_db), noise_variance_for_snr(&sampler, cfg.n_rx(), a.snr_db)),
    };

    let paths = generate_paths(
        &cfg,
        &sampler,
        &mut rng::substream(a.seed, &[0, purpose::PATHS]),
    )?;
    let model = if a.imperfections {
        ImperfectionModel::default_for(&cfg)
    } else {
        ImperfectionModel::disabled()
    };
    let trace = imperfection_trace(
        &paths,
        &model,
        cfg.srs_period_s,
        a.horizon,
        &mut rng::substream(a.seed, &[0, purpose::IMPERFECTIONS]),
    );
    let obs = (0..a.horizon)
        .map(|t| {
            let h = full_band_cfr(&paths, &trace, t, &cfg);
            observe_slot(
                &cfg,
                &h,
                t,
                noise_var,
                &mut rng::substream(a.seed, &[0, purpose::NOISE, t as u64]),
            )
        })
        .collect::<chanex::Result<Vec<_>>>()?;

    let file = ScenarioFile::new(
        cfg, a.seed, a.imperfections, snr_db, noise_var, &paths, &trace, &obs,
    );
    let json = serde_json::to_string_pretty(&file)?;
    write_or_print(Some(&a.output), &json)?;
    eprintln!(
        "wrote {} ({} slots, {} paths, noise variance {:.3e})",
        a.output.display(),
        file.horizon,
        file.paths.gains.len(),
        file.noise_var
    );
    Ok(0)
}

fn estimate(a: EstimateArgs) -> anyhow::Result<u8> {
    let file = load_scenario(&a.input)?;
    let obs = file.observations()?;
    let window = a.slots.unwrap_or(file.config.estimation_slots).min(obs.len());
    if window == 0 {
        return Err(invalid("estimation window must be >= 1".into()));
    }
    let sweep = SweepGrids::desk_scale(PathSampler::desk_scale().delay_spread_s);
    let refined = r_tst_music(&obs[..window], &file.config, &sweep, &RtstOptions::default())?;
    let out = EstimateFile::from_refined(&refined);
    let mut json = serde_json::to_string_pretty(&out)?;
    json.push('\n');
    write_or_print(a.output.as_deref(), &json)?;
    Ok(0)
}

fn track(a: TrackArgs) -> anyhow::Result<u8> {
    let file = load_scenario(&a.input)?;
    let obs = file.observations()?;
    let cfg = &file.config;
    let paths = file.paths.to_paths();
    let trace = file.trace.to_trace();
    let run = run_scheme(a.scheme, &obs, cfg);
    let mut csv = String::from("scheme,slot,nmse\n");
    for (t, est) in run.estimates.iter().enumerate() {
        let truth = full_band_cfr(&paths, &trace, t, cfg);
        let e = nmse(est, &truth);
        csv.push_str(&format!("{},{},{:e}\n", a.scheme.label(), t, e));
    }
    write_or_print(a.output.as_deref(), &csv)?;
    if !run.failed_slots.is_empty() {
        eprintln!(
            "{} slots produced no estimate and scored as zero channels: {:?}",
            run.failed_slots.len(),
            run.failed_slots
        );
    }
    Ok(0)
}

/// Merges `over` into `base` key by key; values in `over` win.
fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn apply_config_file(spec: ExperimentSpec, path: &Path) -> anyhow::Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let file = text
        .parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut base = toml::Value::try_from(&spec)
        .map_err(|e| invalid(format!("serializing defaults: {e}")))?;
    merge_toml(&mut base, file);
    base.try_into()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn bench(a: BenchArgs) -> anyhow::Result<u8> {
    if !(0.0..=1.0).contains(&a.max_fatal_share) {
        return Err(invalid(format!(
            "fatal-share threshold {} outside [0, 1]",
            a.max_fatal_share
        )));
    }
    let mut spec = ExperimentSpec::desk_default();
    if let Some(s) = a.schemes {
        spec.schemes = s;
    }
    if let Some(s) = a.snrs_db {
        spec.snrs_db = s;
    }
    if a.hop_count.is_some() {
        spec.hop_count = a.hop_count;
    }
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(h) = a.horizon {
        spec.horizon = h;
    }
    if let Some(i) = a.imperfections {
        spec.imperfections = i;
    }
    if a.output_dir.is_some() {
        spec.output_dir = a.output_dir;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(path) = &a.config {
        spec = apply_config_file(spec, path)?;
    }
    spec.validate()?;

    let out = run_experiment(&spec)?;
    print!("{}", summary_table(&out.summary));
    if let Some(dir) = &spec.output_dir {
        eprintln!(
            "wrote {} and {}",
            dir.join("results.csv").display(),
            dir.join("summary.json").display()
        );
    }

    let runs = spec.trials * spec.schemes.len() * spec.snrs_db.len();
    let share = out.summary.fatal_count as f64 / runs as f64;
    if share > a.max_fatal_share {
        eprintln!(
            "fatal share {share:.3} exceeds threshold {}: {} of {runs} scheme runs collapsed",
            a.max_fatal_share, out.summary.fatal_count
        );
        return Ok(3);
    }
    Ok(0)
}

fn summary_table(s: &RunSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "bands={} trials={} horizon={} seed={} imperfections={} fatal={} partial={}\n",
        s.hop_count, s.trials, s.horizon, s.seed, s.imperfections, s.fatal_count, s.partial_count
    ));
    out.push_str("time-averaged NMSE by scheme and SNR:\n");
    out.push_str(&format!("{:<12}", "scheme"));
    for snr in &s.snrs_db {
        out.push_str(&format!("{:>12}", format!("{snr} dB")));
    }
    out.push('\n');
    for scheme in &s.schemes {
        out.push_str(&format!("{scheme:<12}"));
        for snr in &s.snrs_db {
            let cell = s
                .tnmse_vs_snr
                .iter()
                .find(|r| &r.scheme == scheme && r.snr_db == *snr)
                .map(|r| format!("{:.4e}", r.tnmse))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!("{cell:>12}"));
        }
        out.push('\n');
    }
    out
}

fn report(a: ReportArgs) -> anyhow::Result<u8> {
    let mut summaries = Vec::new();
    for path in &a.inputs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let s: RunSummary = serde_json::from_str(&text)
            .map_err(|e| invalid(format!("{} is not a summary file: {e}", path.display())))?;
        summaries.push((path.clone(), s));
    }
    let mut out = String::new();
    for (path, s) in &summaries {
        out.push_str(&format!("== {} ==\n", path.display()));
        out.push_str(&summary_table(s));
        out.push('\n');
    }
    print!("{out}");
    if let Some(path) = &a.output {
        let merged: Vec<&RunSummary> = summaries.iter().map(|(_, s)| s).collect();
        let json = serde_json::to_string_pretty(&merged)?;
        write_or_print(Some(path), &json)?;
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_merge_overrides_flags_and_keeps_the_rest() {
        let mut spec = ExperimentSpec::desk_default();
        spec.trials = 7;
        spec.seed = 3;
        let mut base = toml::Value::try_from(&spec).unwrap();
        let file = toml::Value::Table(
            "trials = 2\nschemes = [\"proposed\"]\n\n[config]\nnoise_var = 0.5\n"
                .parse::<toml::Table>()
                .unwrap(),
        );
        merge_toml(&mut base, file);
        let merged: ExperimentSpec = base.try_into().unwrap();
        assert_eq!(merged.trials, 2);
        assert_eq!(merged.schemes, vec![Scheme::Proposed]);
        assert_eq!(merged.seed, 3);
        assert_eq!(merged.config.noise_var, 0.5);
        assert_eq!(merged.config.num_subcarriers, spec.config.num_subcarriers);
    }

    #[test]
    fn summary_table_lists_every_scheme_and_snr() {
        let spec = ExperimentSpec {
            trials: 1,
            horizon: 2,
            snrs_db: vec![15.0],
            schemes: vec![Scheme::Baseline1],
            ..ExperimentSpec::desk_default()
        };
        let out = run_experiment(&spec).unwrap();
        let table = summary_table(&out.summary);
        assert!(table.contains("baseline1"));
        assert!(table.contains("15 dB"));
    }
}
