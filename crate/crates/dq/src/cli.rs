//! The `dq` command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or usage,
//! 3 a checked invariant failed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dq_core::diagnostics::{coverage_of, diagnose};
use dq_core::patch::{mask_batch, upsample_map};
use dq_core::{
    AttentionMap, BinSet, CoresetManifest, DiagnosticsReport, FeatureMatrix, LabelVector, PatchConfig, PatchMask,
    QuantizeConfig, SampleConfig, SamplerRegistry,
};
use rayon::prelude::*;
use serde_json::json;

use crate::formats::{self, FormatError};
use crate::npy::{self, NpyError};
use crate::run::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }

    fn npy(path: &Path, e: NpyError) -> Self {
        match e {
            NpyError::Io(e) => CliError::Io(format!("{}: {e}", path.display())),
            e => CliError::Invalid(format!("{}: {e}", path.display())),
        }
    }

    fn format(path: &Path, e: FormatError) -> Self {
        match e {
            FormatError::Io(e) | FormatError::Npy(NpyError::Io(e)) => CliError::Io(format!("{}: {e}", path.display())),
            e => CliError::Invalid(format!("{}: {e}", path.display())),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<dq_core::Error> for CliError {
    fn from(e: dq_core::Error) -> Self {
        use dq_core::Error as E;
        match e {
            E::PoolExhausted | E::NotInPool(_) | E::DegenerateQuadratic { .. } => CliError::Invariant(e.to_string()),
            e => CliError::Invalid(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Image or patch size written `HxW`, or a single number for a square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |t: &str| t.trim().parse::<usize>().ok().filter(|&v| v > 0);
        let (h, w) = match s.split_once(['x', 'X']) {
            Some((h, w)) => (parse(h), parse(w)),
            None => (parse(s), parse(s)),
        };
        match (h, w) {
            (Some(height), Some(width)) => Ok(Size { height, width }),
            _ => Err(format!("expected HxW with positive integers, got {s:?}")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dq", version, about = "Dataset quantization: bin, sample and mask training data")]
pub struct Cli {
    /// Worker threads (defaults to all cores)
    #[arg(long, global = true, env = "DQ_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split samples into bins by greedy submodular selection
    Quantize(QuantizeArgs),
    /// Draw a coreset from a bins file
    Sample(SampleArgs),
    /// Compute patch keep-masks from attention maps
    Patchmask(PatchArgs),
    /// Re-run binning with invariant checks and write a report
    Diagnose(DiagnoseArgs),
    /// quantize, sample, optionally patchmask, then diagnose
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct BinningArgs {
    /// `<f4` matrix of shape (M, m)
    #[arg(long)]
    pub features: PathBuf,
    /// `<i8` class labels of shape (M,)
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Number of bins per stratum
    #[arg(long, default_value_t = QuantizeConfig::DEFAULT_NUM_BINS)]
    pub bins: usize,
    /// Use raw features instead of centering each stratum
    #[arg(long)]
    pub no_center: bool,
    /// Bin all samples together even when labels are given
    #[arg(long)]
    pub no_stratify: bool,
}

impl BinningArgs {
    fn config(&self) -> QuantizeConfig {
        QuantizeConfig {
            num_bins: self.bins,
            center_features: !self.no_center,
            stratify_by_class: !self.no_stratify,
            ..QuantizeConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub binning: BinningArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    /// Fraction of samples to keep, in (0, 1]
    #[arg(long)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-bin sampler registered in the sampler registry
    #[arg(long, default_value = SamplerRegistry::DEFAULT)]
    pub sampler: String,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Bins file written by `quantize`
    #[arg(long)]
    pub bins: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the selected indices as a flat `<i8` array
    #[arg(long)]
    pub index_array: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskingArgs {
    /// Patch size in pixels
    #[arg(long, default_value = "16x16")]
    pub patch: Size,
    /// Fraction of patches to drop, in [0, 1)
    #[arg(long, default_value_t = 0.25)]
    pub theta: f64,
    /// Upsample attention maps to this size before scoring
    #[arg(long)]
    pub image_size: Option<Size>,
}

impl MaskingArgs {
    fn config(&self) -> PatchConfig {
        PatchConfig { patch_height: self.patch.height, patch_width: self.patch.width, drop_ratio: self.theta }
    }
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    /// `<f4` attention of shape (n, H, W) or (H, W)
    #[arg(long)]
    pub attn: PathBuf,
    #[command(flatten)]
    pub masking: MaskingArgs,
    /// Mask only the images selected in this coreset manifest
    #[arg(long)]
    pub coreset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub binning: BinningArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub binning: BinningArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// `<f4` attention of shape (M, H, W); the coreset images are masked
    #[arg(long)]
    pub attn: Option<PathBuf>,
    #[command(flatten)]
    pub masking: MaskingArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Print the planned steps without reading or writing anything
    #[arg(long)]
    pub dry_run: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Invalid("--threads must be at least 1".into()));
        }
        // fails only if a pool already exists, e.g. when called twice in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match cli.command {
        Command::Quantize(a) => quantize_cmd(&a),
        Command::Sample(a) => sample_cmd(&a),
        Command::Patchmask(a) => patchmask_cmd(&a),
        Command::Diagnose(a) => diagnose_cmd(&a),
        Command::Pipeline(a) => pipeline_cmd(&a),
    }
}

fn load_inputs(args: &BinningArgs) -> Result<(FeatureMatrix, Option<LabelVector>)> {
    let features = npy::read_array(&args.features)
        .and_then(|a| a.into_features())
        .map_err(|e| CliError::npy(&args.features, e))?;
    let labels = args
        .labels
        .as_ref()
        .map(|p| npy::read_array(p).and_then(|a| a.into_labels()).map_err(|e| CliError::npy(p, e)))
        .transpose()?;
    Ok((features, labels))
}

fn read_attention(path: &Path) -> Result<Vec<AttentionMap>> {
    npy::read_array(path).and_then(|a| a.into_attention()).map_err(|e| CliError::npy(path, e))
}

/// Keeps the listed images (all of them when `images` is `None`), in list
/// order, and upsamples them if an image size was given.
fn select_maps(maps: Vec<AttentionMap>, images: Option<&[usize]>, masking: &MaskingArgs) -> Result<Vec<AttentionMap>> {
    let maps = match images {
        None => maps,
        Some(ids) => {
            if let Some(&bad) = ids.iter().find(|&&i| i >= maps.len()) {
                return Err(CliError::Invalid(format!(
                    "image {bad} requested but only {} maps were given",
                    maps.len()
                )));
            }
            let mut slots: Vec<Option<AttentionMap>> = maps.into_iter().map(Some).collect();
            ids.iter()
                .map(|&i| slots[i].take().ok_or_else(|| CliError::Invalid(format!("image {i} listed twice"))))
                .collect::<Result<_>>()?
        }
    };
    let Some(size) = masking.image_size else {
        return Ok(maps);
    };
    maps.into_par_iter()
        .map(|m| Ok(AttentionMap::new(m.image_id, upsample_map(&m.values, size.height, size.width)?)?))
        .collect()
}

fn binning_snapshot(args: &BinningArgs) -> serde_json::Value {
    let cfg = args.config();
    json!({
        "num_bins": cfg.num_bins,
        "center_features": cfg.center_features,
        "stratify_by_class": cfg.stratify_by_class,
        "seed": cfg.seed,
    })
}

fn sampling_snapshot(args: &SamplingArgs) -> serde_json::Value {
    json!({ "keep_ratio": args.ratio.to_string(), "seed": args.seed, "sampler": args.sampler })
}

fn masking_snapshot(args: &MaskingArgs) -> serde_json::Value {
    json!({
        "patch_height": args.patch.height,
        "patch_width": args.patch.width,
        "drop_ratio": args.theta.to_string(),
        "image_size": args.image_size.map(|s| [s.height, s.width]),
    })
}

fn run_manifest_path(out: &Path) -> PathBuf {
    out.with_extension("run.json")
}

fn write_manifest(manifest: RunManifest, path: &Path) -> Result<()> {
    manifest.write(path).map_err(|e| CliError::format(path, e))
}

fn record(manifest: &mut RunManifest, role: &str, path: &Path, output: bool) -> Result<()> {
    let r = if output { manifest.output(role, path) } else { manifest.input(role, path) };
    r.map_err(|e| CliError::io(path, e))
}

fn record_binning_inputs(manifest: &mut RunManifest, args: &BinningArgs) -> Result<()> {
    record(manifest, "features", &args.features, false)?;
    if let Some(labels) = &args.labels {
        record(manifest, "labels", labels, false)?;
    }
    Ok(())
}

fn binning_summary(sets: &[BinSet], elapsed: f64) -> String {
    let samples: usize = sets.iter().map(|s| s.universe_size).sum();
    let bins: usize = sets.iter().map(|s| s.bins.len()).sum();
    format!("binned {samples} samples into {bins} bins over {} strata in {elapsed:.2}s", sets.len())
}

fn quantize_cmd(args: &QuantizeArgs) -> Result<()> {
    let (features, labels) = load_inputs(&args.binning)?;
    let start = Instant::now();
    let sets = dq_core::binner::quantize(&features, labels.as_ref(), &args.binning.config())?;
    eprintln!("{}", binning_summary(&sets, start.elapsed().as_secs_f64()));
    formats::write_bins(&args.out, &sets).map_err(|e| CliError::format(&args.out, e))?;

    let mut manifest = RunManifest::new("quantize", json!({ "quantize": binning_snapshot(&args.binning) }));
    record_binning_inputs(&mut manifest, &args.binning)?;
    record(&mut manifest, "bins", &args.out, true)?;
    write_manifest(manifest, &run_manifest_path(&args.out))
}

fn draw(sets: &[BinSet], args: &SamplingArgs, source: Option<String>) -> Result<CoresetManifest> {
    let registry = SamplerRegistry::new();
    let sampler = registry.get(&args.sampler)?;
    let config = SampleConfig::new(args.ratio, args.seed)?;
    let mut manifest = dq_core::sampler::sample_coreset_with(sets, &config, &args.sampler, sampler)?;
    manifest.source = source;
    Ok(manifest)
}

fn kept_line(manifest: &CoresetManifest) -> String {
    let pct =
        if manifest.universe_size == 0 { 0.0 } else { 100.0 * manifest.len() as f64 / manifest.universe_size as f64 };
    format!("kept {} of {} ({pct:.1}%)", manifest.len(), manifest.universe_size)
}

fn sample_cmd(args: &SampleArgs) -> Result<()> {
    let sets = formats::read_bins(&args.bins).map_err(|e| CliError::format(&args.bins, e))?;
    let source = crate::run::sha256_file(&args.bins).map_err(|e| CliError::io(&args.bins, e))?;
    let coreset = draw(&sets, &args.sampling, Some(source))?;
    formats::write_coreset(&args.out, &coreset).map_err(|e| CliError::format(&args.out, e))?;
    println!("{}", kept_line(&coreset));

    let mut manifest = RunManifest::new("sample", json!({ "sample": sampling_snapshot(&args.sampling) }));
    record(&mut manifest, "bins", &args.bins, false)?;
    record(&mut manifest, "coreset", &args.out, true)?;
    if let Some(path) = &args.index_array {
        formats::write_index_array(path, &coreset).map_err(|e| CliError::format(path, e))?;
        record(&mut manifest, "index_array", path, true)?;
    }
    write_manifest(manifest, &run_manifest_path(&args.out))
}

fn masks_summary(masks: &[PatchMask]) -> String {
    let dropped: usize = masks.iter().map(|m| m.dropped_count).sum();
    let total: usize = masks.iter().map(PatchMask::num_patches).sum();
    let pct = if total == 0 { 0.0 } else { 100.0 * dropped as f64 / total as f64 };
    format!("dropped {dropped} of {total} patches ({pct:.1}%) across {} images", masks.len())
}

fn write_mask_file(maps: &[AttentionMap], masking: &MaskingArgs, out: &Path) -> Result<Vec<PatchMask>> {
    let config = masking.config();
    let masks = mask_batch(maps, &config)?;
    let ids: Vec<usize> = maps.iter().map(|m| m.image_id).collect();
    formats::write_masks(out, &masks, &ids, &config).map_err(|e| CliError::format(out, e))?;
    Ok(masks)
}

fn patchmask_cmd(args: &PatchArgs) -> Result<()> {
    args.masking.config().validate()?;
    let coreset =
        args.coreset.as_ref().map(|p| formats::read_coreset(p).map_err(|e| CliError::format(p, e))).transpose()?;
    let maps = select_maps(
        read_attention(&args.attn)?,
        coreset.as_ref().map(|c| c.selected_indices.as_slice()),
        &args.masking,
    )?;
    let masks = write_mask_file(&maps, &args.masking, &args.out)?;
    println!("{}", masks_summary(&masks));

    let mut manifest = RunManifest::new("patchmask", json!({ "patchmask": masking_snapshot(&args.masking) }));
    record(&mut manifest, "attention", &args.attn, false)?;
    if let Some(path) = &args.coreset {
        record(&mut manifest, "coreset", path, false)?;
    }
    record(&mut manifest, "masks", &args.out, true)?;
    record(&mut manifest, "masks_sidecar", &formats::sidecar_path(&args.out), true)?;
    write_manifest(manifest, &run_manifest_path(&args.out))
}

fn invariant_check(report: &DiagnosticsReport) -> Result<()> {
    eprintln!(
        "first-pick {}/{}, delta identity {}/{} ({} ties), delta-norm violations {}, statistics failures {}",
        report.first_pick_matches,
        report.first_pick_checks,
        report.delta_agreements,
        report.delta_total,
        report.delta_ties,
        report.delta_norm_violations,
        report.statistics_failures,
    );
    if report.exact_invariants_hold() {
        Ok(())
    } else {
        Err(CliError::Invariant("invariant check failed; see the report for counts".into()))
    }
}

fn diagnose_cmd(args: &DiagnoseArgs) -> Result<()> {
    let (features, labels) = load_inputs(&args.binning)?;
    let start = Instant::now();
    let (report, sets) = diagnose(&features, labels.as_ref(), &args.binning.config())?;
    eprintln!("{}", binning_summary(&sets, start.elapsed().as_secs_f64()));
    formats::write_report(&args.out, &report, None).map_err(|e| CliError::format(&args.out, e))?;

    let mut manifest = RunManifest::new("diagnose", json!({ "quantize": binning_snapshot(&args.binning) }));
    record_binning_inputs(&mut manifest, &args.binning)?;
    record(&mut manifest, "report", &args.out, true)?;
    write_manifest(manifest, &run_manifest_path(&args.out))?;
    invariant_check(&report)
}

fn pipeline_cmd(args: &PipelineArgs) -> Result<()> {
    let dir = &args.out_dir;
    let bins_path = dir.join("bins.json");
    let coreset_path = dir.join("coreset.json");
    let masks_path = dir.join("masks.bin");
    let report_path = dir.join("report.json");
    let run_path = dir.join("run.json");

    if args.dry_run {
        println!("quantize  {} -> {}", args.binning.features.display(), bins_path.display());
        println!("sample    ratio {} seed {} -> {}", args.sampling.ratio, args.sampling.seed, coreset_path.display());
        if let Some(attn) = &args.attn {
            println!(
                "patchmask {} theta {} (coreset images only) -> {}",
                attn.display(),
                args.masking.theta,
                masks_path.display()
            );
        }
        println!("diagnose  -> {}", report_path.display());
        println!("manifest  -> {}", run_path.display());
        return Ok(());
    }

    // check cheap arguments before the expensive binning step
    SampleConfig::new(args.sampling.ratio, args.sampling.seed)?;
    SamplerRegistry::new().get(&args.sampling.sampler)?;
    if args.attn.is_some() {
        args.masking.config().validate()?;
    }
    let (features, labels) = load_inputs(&args.binning)?;
    let attention = args.attn.as_deref().map(read_attention).transpose()?;
    if let Some(maps) = &attention {
        if maps.len() != features.num_samples() {
            return Err(CliError::Invalid(format!(
                "{} maps in the attention file for {} samples",
                maps.len(),
                features.num_samples()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;

    let start = Instant::now();
    let (report, sets) = diagnose(&features, labels.as_ref(), &args.binning.config())?;
    eprintln!("{}", binning_summary(&sets, start.elapsed().as_secs_f64()));
    formats::write_bins(&bins_path, &sets).map_err(|e| CliError::format(&bins_path, e))?;

    let source = crate::run::sha256_file(&bins_path).map_err(|e| CliError::io(&bins_path, e))?;
    let coreset = draw(&sets, &args.sampling, Some(source))?;
    formats::write_coreset(&coreset_path, &coreset).map_err(|e| CliError::format(&coreset_path, e))?;
    println!("{}", kept_line(&coreset));

    if let Some(maps) = attention {
        let maps = select_maps(maps, Some(&coreset.selected_indices), &args.masking)?;
        let masks = write_mask_file(&maps, &args.masking, &masks_path)?;
        println!("{}", masks_summary(&masks));
    }

    let coverage = coverage_of(&coreset.selected_indices, &features).ok();
    formats::write_report(&report_path, &report, coverage.as_ref()).map_err(|e| CliError::format(&report_path, e))?;

    let mut config = json!({
        "quantize": binning_snapshot(&args.binning),
        "sample": sampling_snapshot(&args.sampling),
    });
    if args.attn.is_some() {
        config["patchmask"] = masking_snapshot(&args.masking);
    }
    let mut manifest = RunManifest::new("pipeline", config);
    record_binning_inputs(&mut manifest, &args.binning)?;
    if let Some(attn) = &args.attn {
        record(&mut manifest, "attention", attn, false)?;
    }
    record(&mut manifest, "bins", &bins_path, true)?;
    record(&mut manifest, "coreset", &coreset_path, true)?;
    if args.attn.is_some() {
        record(&mut manifest, "masks", &masks_path, true)?;
        record(&mut manifest, "masks_sidecar", &formats::sidecar_path(&masks_path), true)?;
    }
    record(&mut manifest, "report", &report_path, true)?;
    write_manifest(manifest, &run_path)?;
    invariant_check(&report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_sizes() {
        assert_eq!("16x8".parse::<Size>().unwrap(), Size { height: 16, width: 8 });
        assert_eq!("14".parse::<Size>().unwrap(), Size { height: 14, width: 14 });
        assert!("0x4".parse::<Size>().is_err());
        assert!("ax4".parse::<Size>().is_err());
    }

    #[test]
    fn defaults() {
        let cli = Cli::try_parse_from(["dq", "quantize", "--features", "f.npy", "--out", "b.json"]).unwrap();
        let Command::Quantize(q) = cli.command else { panic!() };
        assert_eq!(q.binning.config(), QuantizeConfig::default());
        let cli = Cli::try_parse_from(["dq", "patchmask", "--attn", "a.npy", "--out", "m.bin"]).unwrap();
        let Command::Patchmask(p) = cli.command else { panic!() };
        assert_eq!(p.masking.config(), PatchConfig::default());
    }

    #[test]
    fn kept_line_format() {
        let m = CoresetManifest {
            selected_indices: (0..600).collect(),
            per_bin: vec![],
            keep_ratio: 0.6,
            seed: 0,
            sampler: "uniform".into(),
            universe_size: 1000,
            source: None,
        };
        assert_eq!(kept_line(&m), "kept 600 of 1000 (60.0%)");
    }
}
