use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use qdiff::distortion::{
    audit_csv, decode, tune_bounds, DistortionBounds, Family, Layout, MIN_TUNE_BUDGET,
};
use qdiff::metrics::{report_csv, summary_text, SessionReport};
use qdiff::nn::{predict_label, profile_intervals, ModelSpec, NeuronIntervals, DEFAULT_SECTIONS};
use qdiff::patch::{psnr, read_patchset, PatchSet, DEFAULT_PSNR_THRESHOLD};
use qdiff::quant::{quantize_model, QuantMode, QuantizedModel};
use qdiff::search::{read_dii_file, run_session, DiiTracker, SessionConfig};

#[derive(Parser)]
#[command(
    name = "qdiff",
    version,
    about = "Search for inputs on which a model and its int8 version disagree"
)]
struct Cli {
    /// Seed for every random choice; overrides the session config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for fitness evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Post-training int8 quantization of a model.
    Quantize(QuantizeArgs),
    /// Record per-neuron activation intervals for coverage.
    Profile(ProfileArgs),
    /// Narrow distortion bounds until distortions keep the PSNR threshold.
    Tune(TuneArgs),
    /// Run a search session from a config file.
    Run(RunArgs),
    /// Rebuild the distorted patches stored in a DII file.
    Decode(DecodeArgs),
    /// Metrics and pairwise statistics over session reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Patch set for activation ranges; required in full mode.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value = "weights-only")]
    mode: QuantMode,
    #[arg(long, default_value = "quantized.json")]
    output: String,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    patches: PathBuf,
    /// Sections per neuron.
    #[arg(long, default_value_t = DEFAULT_SECTIONS)]
    k: u32,
    #[arg(long, default_value = "intervals.json")]
    output: String,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    patches: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PSNR_THRESHOLD)]
    psnr_threshold: f64,
    /// Random distortions per family and halving step.
    #[arg(long, default_value_t = 1000)]
    budget: usize,
    /// Starting bounds (default: built-in ranges for the patch size).
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Comma-separated families to tune (default: all).
    #[arg(long, value_delimiter = ',')]
    families: Vec<Family>,
}

#[derive(Args)]
struct RunArgs {
    /// Session config (TOML).
    config: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    dii: PathBuf,
    /// The patch set the session ran on.
    #[arg(long)]
    patches: PathBuf,
    /// Bounds the session used (default: built-in ranges).
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Families the session used, comma-separated (default: all).
    #[arg(long, value_delimiter = ',')]
    families: Vec<Family>,
    /// With --quantized-model, re-run both models on every decoded patch and
    /// fail unless each record still holds.
    #[arg(long, requires = "quantized_model")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    quantized_model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PSNR_THRESHOLD)]
    psnr_threshold: f64,
    #[arg(long, default_value = "decoded.patches")]
    output: String,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more session reports.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value = "report.csv")]
    output: String,
}

/// Failures split by exit code: 2 for bad usage or configuration, 1 for
/// everything that goes wrong while working.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CmdResult = Result<(), Failure>;

/// `[subjects]` paths are relative to the config file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    subjects: SubjectPaths,
    #[serde(default)]
    session: SessionConfig,
    #[serde(default)]
    output: OutputNames,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectPaths {
    model: PathBuf,
    quantized_model: PathBuf,
    patches: PathBuf,
    intervals: Option<PathBuf>,
    bounds: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct OutputNames {
    report: String,
    dii: String,
}

impl Default for OutputNames {
    fn default() -> Self {
        Self {
            report: "report.json".into(),
            dii: "dii.bin".into(),
        }
    }
}

fn load_run_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    let de =
        toml::Deserializer::parse(&text).map_err(|e| usage(anyhow!("{}: {e}", path.display())))?;
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        usage(anyhow!(
            "{}: field `{field}`: {}",
            path.display(),
            e.into_inner()
        ))
    })?;
    cfg.session
        .validate()
        .map_err(|e| usage(anyhow!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let s = &mut cfg.subjects;
    for p in [&mut s.model, &mut s.quantized_model, &mut s.patches] {
        *p = base.join(&*p);
    }
    for p in [&mut s.intervals, &mut s.bounds].into_iter().flatten() {
        *p = base.join(&*p);
    }
    Ok(cfg)
}

fn out_path(cli: &Cli, name: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    Ok(cli.out.join(name))
}

fn bounds_or_default(path: Option<&Path>, set: &PatchSet) -> Result<DistortionBounds, Failure> {
    match path {
        Some(p) => Ok(DistortionBounds::load(p)?),
        None => {
            let dims = set
                .dims()
                .ok_or_else(|| usage(anyhow!("patch set is empty")))?;
            Ok(DistortionBounds::default_for(dims))
        }
    }
}

fn families_or_all(families: &[Family]) -> Vec<Family> {
    if families.is_empty() {
        Family::ALL.to_vec()
    } else {
        families.to_vec()
    }
}

fn cmd_quantize(cli: &Cli, a: &QuantizeArgs) -> CmdResult {
    if a.mode == QuantMode::Full && a.calibration.is_none() {
        return Err(usage(anyhow!("--mode full needs --calibration")));
    }
    let model = ModelSpec::load(&a.model)?;
    let calibration = a.calibration.as_deref().map(read_patchset).transpose()?;
    let q = quantize_model(&model, a.mode, calibration.as_ref())?;
    let path = out_path(cli, &a.output)?;
    q.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_profile(cli: &Cli, a: &ProfileArgs) -> CmdResult {
    if a.k == 0 {
        return Err(usage(anyhow!("--k must be at least 1")));
    }
    let model = ModelSpec::load(&a.model)?;
    let set = read_patchset(&a.patches)?;
    if set.is_empty() {
        return Err(usage(anyhow!("{} holds no patches", a.patches.display())));
    }
    let intervals = profile_intervals(&model, &set, a.k)?;
    let path = out_path(cli, &a.output)?;
    intervals.save(&path)?;
    println!(
        "wrote {} ({} neurons, {} degenerate)",
        path.display(),
        intervals.neuron_count(),
        intervals.degenerate_count()
    );
    Ok(())
}

fn cmd_tune(cli: &Cli, a: &TuneArgs) -> CmdResult {
    if a.budget < MIN_TUNE_BUDGET {
        return Err(usage(anyhow!(
            "--budget must be at least {MIN_TUNE_BUDGET}, got {}",
            a.budget
        )));
    }
    if !(a.psnr_threshold.is_finite() && a.psnr_threshold > 0.0) {
        return Err(usage(anyhow!("--psnr-threshold must be positive")));
    }
    let set = read_patchset(&a.patches)?;
    if set.is_empty() {
        return Err(usage(anyhow!("{} holds no patches", a.patches.display())));
    }
    let initial = bounds_or_default(a.bounds.as_deref(), &set)?;
    let families = families_or_all(&a.families);
    let outcome = tune_bounds(
        &initial,
        &families,
        &set,
        a.psnr_threshold,
        a.budget,
        cli.seed.unwrap_or(0),
    )?;
    let bounds_path = out_path(cli, "bounds.json")?;
    outcome.bounds.save(&bounds_path)?;
    let audit_path = out_path(cli, "tune_audit.csv")?;
    fs::write(&audit_path, audit_csv(&outcome.audit))
        .with_context(|| format!("writing {}", audit_path.display()))?;
    for f in &outcome.flagged {
        eprintln!(
            "warning: {f} still below {} dB after the last halving",
            a.psnr_threshold
        );
    }
    println!(
        "wrote {} and {}",
        bounds_path.display(),
        audit_path.display()
    );
    Ok(())
}

fn cmd_run(cli: &Cli, a: &RunArgs) -> CmdResult {
    let mut cfg = load_run_config(&a.config)?;
    if let Some(seed) = cli.seed {
        cfg.session.seed = seed;
    }
    let s = &cfg.subjects;
    let model = ModelSpec::load(&s.model)?;
    let qmodel = QuantizedModel::load(&s.quantized_model)?;
    let patches = read_patchset(&s.patches)?;
    let intervals = s
        .intervals
        .as_deref()
        .map(NeuronIntervals::load)
        .transpose()?;
    let bounds = bounds_or_default(s.bounds.as_deref(), &patches)?;
    let dii_path = out_path(cli, &cfg.output.dii)?;
    if dii_path.exists() {
        fs::remove_file(&dii_path)
            .with_context(|| format!("removing stale {}", dii_path.display()))?;
    }
    let mut tracker = DiiTracker::to_file(&dii_path, cfg.session.offload_threshold);
    let report = run_session(
        &cfg.session,
        &patches,
        &model,
        &qmodel,
        intervals,
        &bounds,
        &mut tracker,
    )
    .map_err(|e| match e {
        qdiff::Error::Config(_) => usage(e),
        e => Failure::Runtime(e.into()),
    })?;
    let report_path = out_path(cli, &cfg.output.report)?;
    report.save(&report_path)?;
    println!(
        "{} seeds, {} DIIs; wrote {}{}",
        report.seeds.len(),
        report.total_dii(),
        report_path.display(),
        if dii_path.exists() {
            format!(" and {}", dii_path.display())
        } else {
            String::new()
        }
    );
    if let Some(why) = &report.aborted {
        return Err(Failure::Runtime(anyhow!("session aborted: {why}")));
    }
    Ok(())
}

fn cmd_decode(cli: &Cli, a: &DecodeArgs) -> CmdResult {
    let records = read_dii_file(&a.dii)?;
    let set = read_patchset(&a.patches)?;
    let dims = set
        .dims()
        .ok_or_else(|| usage(anyhow!("{} holds no patches", a.patches.display())))?;
    let bounds = bounds_or_default(a.bounds.as_deref(), &set)?;
    let layout = Layout::with_families(dims, &bounds, &families_or_all(&a.families))?;
    let nets = match (&a.model, &a.quantized_model) {
        (Some(m), Some(q)) => Some((
            ModelSpec::load(m)?.compile()?,
            QuantizedModel::load(q)?.compile()?,
        )),
        _ => None,
    };
    let mut decoded = Vec::with_capacity(records.len());
    let mut broken = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let original = set
            .patches
            .get(r.patch_index as usize)
            .ok_or_else(|| anyhow!("record {i}: patch {} is not in the set", r.patch_index))?;
        let patch = decode(&layout, &r.vector_f64(), original, r.rng_seed)
            .with_context(|| format!("record {i}"))?;
        if let Some((mo, mq)) = &nets {
            let lo = predict_label(&mo.forward(&patch)?.logits)? as u32;
            let lq = predict_label(&mq.forward(&patch)?.logits)? as u32;
            let on_original = predict_label(&mo.forward(original)?.logits)? as u32;
            let db = psnr(original, &patch)?;
            let holds = lo == r.original_label
                && lq == r.quantized_label
                && lo != lq
                && db >= a.psnr_threshold
                && original.label() == Some(on_original);
            if !holds {
                broken.push(format!(
                    "record {i}: labels {lo}/{lq} (stored {}/{}), PSNR {db:.3} dB, original correct: {}",
                    r.original_label,
                    r.quantized_label,
                    original.label() == Some(on_original)
                ));
            }
        }
        decoded.push(patch);
    }
    if records.is_empty() {
        eprintln!("warning: {} holds no records", a.dii.display());
    }
    let out = PatchSet::new(decoded, format!("decoded from {}", a.dii.display()))?;
    let path = out_path(cli, &a.output)?;
    fs::write(&path, out.to_bytes_with_dims(dims)?)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} ({} patches)", path.display(), out.len());
    if nets.is_some() {
        if !broken.is_empty() {
            for line in &broken {
                eprintln!("{line}");
            }
            return Err(Failure::Runtime(anyhow!(
                "{} of {} records did not replay",
                broken.len(),
                records.len()
            )));
        }
        println!("replay: all {} records reproduce", records.len());
    }
    Ok(())
}

fn cmd_report(cli: &Cli, a: &ReportArgs) -> CmdResult {
    let mut named = Vec::new();
    for p in &a.reports {
        let name = p.file_stem().map_or_else(
            || p.display().to_string(),
            |s| s.to_string_lossy().into_owned(),
        );
        named.push((name, SessionReport::load(p)?));
    }
    let path = out_path(cli, &a.output)?;
    fs::write(&path, report_csv(&named)).with_context(|| format!("writing {}", path.display()))?;
    let summary = summary_text(&named)?;
    let summary_path = path.with_extension("txt");
    fs::write(&summary_path, &summary)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    print!("{summary}");
    Ok(())
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(cli, a),
        Command::Profile(a) => cmd_profile(cli, a),
        Command::Tune(a) => cmd_tune(cli, a),
        Command::Run(a) => cmd_run(cli, a),
        Command::Decode(a) => cmd_decode(cli, a),
        Command::Report(a) => cmd_report(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(0) => Err(usage(anyhow!("--threads must be at least 1"))),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Failure::Runtime(e.into())),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn config_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.toml",
            "[subjects]\nmodel = \"m\"\nquantized_model = \"q\"\npatches = \"p\"\n[session]\npopulation = \"ten\"\n",
        );
        let Err(Failure::Usage(e)) = load_run_config(&p) else {
            panic!("expected a usage error")
        };
        assert!(e.to_string().contains("session.population"), "{e}");
    }

    #[test]
    fn config_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.toml",
            "[subjects]\nmodel = \"m.json\"\nquantized_model = \"q.json\"\npatches = \"p.bin\"\n",
        );
        let Ok(cfg) = load_run_config(&p) else {
            panic!()
        };
        assert_eq!(cfg.subjects.model, dir.path().join("m.json"));
        assert_eq!(cfg.session, SessionConfig::default());
    }

    #[test]
    fn example_config_parses() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/session.example.toml");
        let Ok(cfg) = load_run_config(&p) else {
            panic!("example config rejected")
        };
        assert_eq!(cfg.session, SessionConfig::default());
        assert_eq!(cfg.output.report, "report.json");
    }
}
