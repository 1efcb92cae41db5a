//! Command-line front end. Every command writes [`MANIFEST_FILE`] into its
//! output directory; `rerun` replays such a manifest and checks the outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{predict_case_probs, DEFAULT_STEPS};
use crate::metrics::{aggregate, cases_table, evaluate_case, CaseScores};
use crate::network::{build_network, NetworkConfig};
use crate::nifti::{read_labels, read_volume, write_labels, write_volume};
use crate::preprocess::{reorient_labels, resample_labels, run_pipeline, AxisSpec, PipelineConfig, Registration};
use crate::synth::{
    generate_pretrain_2d, patient_dirs, phantom, read_case, read_scan, write_case, PhantomSpec, PretrainSpec,
};
use crate::training::{
    compare_arms, pretrain_encoder, train_with_progress, AugmentConfig, Case, PretrainConfig, TrainConfig,
};
use crate::volume::{
    crop, crop_volume, nonzero_bounding_box, MultiModalScan, NormRegion, LABEL_CODES, MODALITIES,
};
use crate::weights::{read_weights, store_paths, write_weights};

pub const MANIFEST_FILE: &str = "run_manifest.json";
/// Worker threads for per-case parallelism; unset means one per core.
pub const THREADS_ENV: &str = "ALBUSEG_THREADS";
/// Base name of the weight store written by `train`.
pub const MODEL_NAME: &str = "model";
/// Base name of the weight store written by `pretrain`.
pub const ENCODER_NAME: &str = "encoder";

#[derive(Parser, Debug, Clone)]
#[command(name = "albuseg", version, about = "Volumetric brain-lesion segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Write a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Reorient, mask, co-register, resample, normalize and crop one patient.
    Preprocess(PreprocessArgs),
    /// Pretrain the 2D encoder on synthetic shape classification.
    Pretrain(PretrainArgs),
    /// Train the segmentation network.
    Train(TrainArgs),
    /// Sliding-window prediction.
    Predict(PredictArgs),
    /// Dice and Hausdorff report of predictions against references.
    Evaluate(EvaluateArgs),
    /// Pretrained versus random initialization over several seeds.
    Compare(CompareArgs),
    /// Re-execute a recorded command and compare output hashes.
    Rerun(RerunArgs),
}

fn triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("invalid value '{}'", p.trim())))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected three comma-separated values, got '{s}'"))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Flair,
    T1c,
    T2,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    All,
    Nonzero,
}

impl From<Norm> for NormRegion {
    fn from(n: Norm) -> Self {
        match n {
            Norm::All => NormRegion::All,
            Norm::Nonzero => NormRegion::Nonzero,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NetPreset {
    /// ResNet34 widths.
    Resnet34,
    /// Narrow widths for desk-scale runs.
    Tiny,
}

impl NetPreset {
    fn config(self) -> NetworkConfig {
        match self {
            NetPreset::Resnet34 => NetworkConfig::resnet34(),
            NetPreset::Tiny => NetworkConfig::tiny(),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum TrainMode {
    #[value(name = "2d")]
    #[serde(rename = "2d")]
    Slices,
    #[value(name = "3d")]
    #[serde(rename = "3d")]
    Volumes,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub cases: usize,
    #[arg(long, value_parser = triple::<usize>, default_value = "48,96,96")]
    pub dims: [usize; 3],
    #[arg(long, value_parser = triple::<f64>, default_value = "1,1,1")]
    pub spacing: [f64; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PreprocessArgs {
    /// Patient directory supplying any modality, mask or seg not given explicitly.
    #[arg(long)]
    pub case: Option<PathBuf>,
    #[arg(long)]
    pub flair: Option<PathBuf>,
    #[arg(long)]
    pub t1c: Option<PathBuf>,
    #[arg(long)]
    pub t2: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Labels on the reference modality's grid.
    #[arg(long)]
    pub seg: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Modality::T1c)]
    pub reference: Modality,
    /// Output axes as signed input axes, e.g. `z,-y,x`.
    #[arg(long, default_value = "z,y,x")]
    pub orient: String,
    #[arg(long, value_parser = triple::<f64>, default_value = "1,1,1")]
    pub spacing: [f64; 3],
    #[arg(long)]
    pub no_register: bool,
    #[arg(long, value_enum, default_value_t = Norm::Nonzero)]
    pub norm: Norm,
    /// Patient id; defaults to the `--case` directory name.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PretrainArgs {
    #[arg(long, value_enum, default_value_t = NetPreset::Resnet34)]
    pub config: NetPreset,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overwrite an existing encoder store.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training options shared by `train` and `compare`; unset values come
/// from the `--mode` defaults.
#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainOpts {
    #[arg(long, value_enum, default_value_t = NetPreset::Resnet34)]
    pub config: NetPreset,
    #[arg(long, value_enum, default_value_t = TrainMode::Volumes)]
    pub mode: TrainMode,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = triple::<usize>)]
    pub patch: Option<[usize; 3]>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Validation window steps.
    #[arg(long, value_parser = triple::<usize>)]
    pub steps: Option<[usize; 3]>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub freeze_bn: bool,
    #[arg(long, value_enum, default_value_t = Norm::Nonzero)]
    pub norm: Norm,
}

impl TrainOpts {
    fn train_config(&self, seed: u64) -> TrainConfig {
        let base = match self.mode {
            TrainMode::Slices => TrainConfig::slicewise(),
            TrainMode::Volumes => TrainConfig::volumetric(),
        };
        TrainConfig {
            patch_shape: self.patch.unwrap_or(base.patch_shape),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            learning_rate: self.lr.unwrap_or(base.learning_rate),
            epochs: self.epochs.unwrap_or(base.epochs),
            batches_per_epoch: self.batches_per_epoch.unwrap_or(base.batches_per_epoch),
            seed,
            augment: if self.no_augment { AugmentConfig::none() } else { base.augment },
            freeze_bn: self.freeze_bn,
            val_steps: self.steps.unwrap_or(base.val_steps),
            norm_region: self.norm.into(),
        }
    }

    /// Slice mode drops the depth layers so the network is purely 2D.
    fn network_config(&self) -> NetworkConfig {
        self.config.config().with_depth_layers(self.mode == TrainMode::Volumes)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(group(ArgGroup::new("init").required(true).args(["pretrained", "random_init"])))]
pub struct TrainArgs {
    /// Dataset directory of patient subdirectories with seg.nii.
    #[arg(long)]
    pub data: PathBuf,
    /// Hold out the last N patients for validation; 0 validates on the training set.
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    /// Encoder store base path (without `.manifest`/`.blob`).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub random_init: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(group(ArgGroup::new("input").required(true).args(["case", "data"])))]
pub struct PredictArgs {
    /// Model store base path; `<base>.network.json` must sit beside it.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub case: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = triple::<usize>)]
    pub steps: Option<[usize; 3]>,
    #[arg(long, value_parser = triple::<usize>)]
    pub patch: Option<[usize; 3]>,
    /// Also write one probability volume per class.
    #[arg(long)]
    pub probs: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvaluateArgs {
    /// Reference dataset directory.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Prediction directories; several are pooled into one report.
    #[arg(long, required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value_t = 95.0)]
    pub percentile: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Last N patients form the validation set.
    #[arg(long, default_value_t = 5)]
    pub val: usize,
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Seeds 1..=N.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Reproducibility record written beside every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    /// Fully resolved options.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRecord>,
    /// Relative to the output directory; the manifest itself is not listed.
    pub outputs: Vec<FileRecord>,
    pub version: String,
    pub wall_clock_secs: f64,
}

/// Network description stored as `<weights>.network.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub network: NetworkConfig,
    pub patch: [usize; 3],
    pub steps: [usize; 3],
    pub norm_region: NormRegion,
}

pub fn card_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".network.json");
    PathBuf::from(s)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Regular files below `path` (or `path` itself), sorted.
fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn record_inputs(paths: &[PathBuf]) -> Result<Vec<FileRecord>> {
    let mut out = Vec::new();
    for p in paths {
        let files = files_under(p)?;
        for f in files.into_iter().filter(|f| p.is_file() || f.file_name() != Some(MANIFEST_FILE.as_ref())) {
            out.push(FileRecord { path: f.display().to_string(), sha256: sha256_file(&f)? });
        }
    }
    Ok(out)
}

fn record_outputs(out_dir: &Path) -> Result<Vec<FileRecord>> {
    let mut out = Vec::new();
    for f in files_under(out_dir)? {
        let rel = f.strip_prefix(out_dir).expect("below output dir");
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        out.push(FileRecord { path: rel.display().to_string(), sha256: sha256_file(&f)? });
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Sizes the global rayon pool from [`THREADS_ENV`]. Calling it again after
/// the pool exists is a no-op.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (without the program name) and executes the command.
pub fn run_args<S: AsRef<str>>(args: &[S]) -> Result<RunManifest> {
    let args: Vec<String> = args.iter().map(|a| a.as_ref().to_string()).collect();
    let cli = Cli::try_parse_from(std::iter::once("albuseg".to_string()).chain(args.iter().cloned()))
        .map_err(|e| Error::Config(first_line(&e.to_string())))?;
    execute(&cli, &args)
}

/// A clap error as one line: the text before its usage block, with the
/// `error: ` prefix removed.
pub fn first_line(msg: &str) -> String {
    let parts: Vec<&str> = msg
        .lines()
        .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    parts.join(" ").trim_start_matches("error: ").to_string()
}

/// Executes a parsed command; `args` is recorded in the manifest.
pub fn execute(cli: &Cli, args: &[String]) -> Result<RunManifest> {
    let start = Instant::now();
    let (name, out, config, seed, inputs) = match &cli.command {
        Command::Rerun(a) => return rerun(a),
        Command::Synth(a) => ("synth", &a.out, to_value(a), Some(a.seed), cmd_synth(a)?),
        Command::Preprocess(a) => ("preprocess", &a.out, to_value(a), None, cmd_preprocess(a)?),
        Command::Pretrain(a) => ("pretrain", &a.out, to_value(a), Some(a.seed), cmd_pretrain(a)?),
        Command::Train(a) => ("train", &a.out, to_value(a), Some(a.seed), cmd_train(a)?),
        Command::Predict(a) => ("predict", &a.out, to_value(a), None, cmd_predict(a)?),
        Command::Evaluate(a) => ("evaluate", &a.out, to_value(a), None, cmd_evaluate(a)?),
        Command::Compare(a) => ("compare", &a.out, to_value(a), None, cmd_compare(a)?),
    };
    let manifest = RunManifest {
        command: name.to_string(),
        args: args.to_vec(),
        config,
        seed,
        inputs: record_inputs(&inputs)?,
        outputs: record_outputs(out)?,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_text(&out.join(MANIFEST_FILE), &to_json(&manifest))?;
    Ok(manifest)
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

/// `args` with the value of `--out` replaced.
fn replace_out(args: &[String], out: &Path) -> Result<Vec<String>> {
    let mut res = Vec::with_capacity(args.len());
    let mut found = false;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
            res.push(a.clone());
            res.push(out.display().to_string());
            found = true;
        } else if a.starts_with("--out=") {
            res.push(format!("--out={}", out.display()));
            found = true;
        } else {
            res.push(a.clone());
        }
    }
    if !found {
        return Err(Error::Manifest("recorded arguments have no --out".into()));
    }
    Ok(res)
}

fn rerun(a: &RerunArgs) -> Result<RunManifest> {
    let text = fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let old: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", a.manifest.display())))?;
    if old.args.first().map(String::as_str) == Some("rerun") {
        return Err(Error::Manifest("cannot rerun a rerun".into()));
    }
    for rec in &old.inputs {
        let now = sha256_file(Path::new(&rec.path))
            .map_err(|_| Error::Manifest(format!("input {} is no longer readable", rec.path)))?;
        if now != rec.sha256 {
            return Err(Error::Manifest(format!("input {} changed since the recorded run", rec.path)));
        }
    }
    let args = replace_out(&old.args, &a.out)?;
    let new = run_args(&args)?;
    let mut diffs: Vec<String> = Vec::new();
    for rec in &old.outputs {
        match new.outputs.iter().find(|r| r.path == rec.path) {
            Some(r) if r.sha256 == rec.sha256 => {}
            Some(_) => diffs.push(format!("{} differs", rec.path)),
            None => diffs.push(format!("{} missing", rec.path)),
        }
    }
    for r in &new.outputs {
        if !old.outputs.iter().any(|o| o.path == r.path) {
            diffs.push(format!("{} unexpected", r.path));
        }
    }
    if !diffs.is_empty() {
        return Err(Error::Manifest(format!("outputs not reproduced: {}", diffs.join("; "))));
    }
    Ok(new)
}

fn cmd_synth(a: &SynthArgs) -> Result<Vec<PathBuf>> {
    if a.cases == 0 {
        return Err(Error::Config("--cases must be at least 1".into()));
    }
    let spec = PhantomSpec { spacing: a.spacing, ..PhantomSpec::new(a.dims, a.cases, a.seed) };
    spec.validate()?;
    create_dir(&a.out)?;
    (0..a.cases).into_par_iter().try_for_each(|i| write_case(&phantom(&spec, i)?, &a.out).map(|_| ()))?;
    Ok(Vec::new())
}

/// Reorientation, registration and bounding box of a preprocessed patient.
#[derive(Serialize)]
struct PreprocessRecord {
    patient_id: String,
    reference: Modality,
    orient: String,
    source_dims: [usize; 3],
    registrations: Vec<(Modality, Registration)>,
    bbox: [(usize, usize); 3],
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<Vec<PathBuf>> {
    let orient: AxisSpec = a.orient.parse()?;
    let from_case = |name: &str| a.case.as_ref().map(|d| d.join(format!("{name}.nii"))).filter(|p| p.is_file());
    let given = [&a.flair, &a.t1c, &a.t2];
    let paths: Vec<Option<PathBuf>> = MODALITIES
        .iter()
        .zip(given)
        .map(|(m, g)| g.clone().filter(|p| p.is_file()).or_else(|| from_case(m)))
        .collect();
    let missing: Vec<String> = MODALITIES
        .iter()
        .zip(given.iter().zip(&paths))
        .filter(|(_, (_, p))| p.is_none())
        .map(|(m, (g, _))| match g {
            Some(g) => format!("{m} ({})", g.display()),
            None => m.to_string(),
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInput(format!("missing modalities: {}", missing.join(", "))));
    }
    let paths: Vec<PathBuf> = paths.into_iter().map(|p| p.expect("checked")).collect();
    let mask_path = match &a.mask {
        Some(m) if !m.is_file() => return Err(Error::MissingInput(format!("mask {}", m.display()))),
        Some(m) => Some(m.clone()),
        None => from_case("mask"),
    };
    let seg_path = match &a.seg {
        Some(s) if !s.is_file() => return Err(Error::MissingInput(format!("seg {}", s.display()))),
        Some(s) => Some(s.clone()),
        None => from_case("seg"),
    };
    let id = match (&a.id, &a.case) {
        (Some(id), _) => id.clone(),
        (None, Some(c)) => c.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "case".into()),
        (None, None) => "case".into(),
    };

    let vols = paths.iter().map(read_volume).collect::<Result<Vec<_>>>()?;
    let mask = mask_path.as_ref().map(read_volume).transpose()?;
    let reference = a.reference as usize;
    let cfg = PipelineConfig { orient, reference, register: !a.no_register, target_spacing: a.spacing };
    let piped = run_pipeline(&vols, mask.as_ref(), &cfg)?;
    let seg = match &seg_path {
        Some(p) => {
            let s = read_labels(p)?;
            if s.dims() != vols[reference].dims() {
                return Err(Error::Shape(format!(
                    "labels {:?} are not on the reference grid {:?}",
                    s.dims(),
                    vols[reference].dims()
                )));
            }
            Some(resample_labels(&reorient_labels(&s, &orient)?, a.spacing)?)
        }
        None => None,
    };
    let [f, t1c, t2]: [_; 3] = piped.volumes.try_into().expect("three modalities");
    let scan = MultiModalScan::new(f, t1c, t2, id.clone())?;
    let bbox = nonzero_bounding_box(&scan)?;
    let (cropped, seg) = crop(&scan.normalized(a.norm.into())?, seg.as_ref(), &bbox)?;

    let pdir = a.out.join(&id);
    create_dir(&pdir)?;
    for (m, v) in MODALITIES.iter().zip(cropped.channels()) {
        write_volume(v, pdir.join(format!("{m}.nii")))?;
    }
    if let Some(m) = &piped.mask {
        write_volume(&crop_volume(m, &bbox)?, pdir.join("mask.nii"))?;
    }
    if let Some(s) = &seg {
        write_labels(s, pdir.join("seg.nii"))?;
    }
    let mods = [Modality::Flair, Modality::T1c, Modality::T2];
    let record = PreprocessRecord {
        patient_id: id,
        reference: a.reference,
        orient: orient.to_string(),
        source_dims: vols[reference].dims(),
        registrations: mods.into_iter().zip(piped.registrations).collect(),
        bbox: bbox.0,
    };
    write_text(&pdir.join("preprocess.json"), &to_json(&record))?;
    let mut inputs = paths;
    inputs.extend(mask_path);
    inputs.extend(seg_path);
    Ok(inputs)
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<Vec<PathBuf>> {
    let base = a.out.join(ENCODER_NAME);
    let (man, blob) = store_paths(&base);
    if !a.force && (man.exists() || blob.exists()) {
        return Err(Error::Config(format!("store {} already exists (use --force)", base.display())));
    }
    let net_cfg = a.config.config();
    net_cfg.validate()?;
    let set = generate_pretrain_2d(&PretrainSpec { size: a.size, count: a.count, seed: a.seed })?;
    let cfg = PretrainConfig { steps: a.steps, batch_size: a.batch_size, learning_rate: a.lr, seed: a.seed };
    let pre = pretrain_encoder(&net_cfg, &set, &cfg)?;
    create_dir(&a.out)?;
    write_weights(&pre.store, &base)?;
    let mut log = String::from("step\tloss\n");
    for (i, l) in pre.losses.iter().enumerate() {
        log.push_str(&format!("{}\t{l:.6}\n", i + 1));
    }
    write_text(&a.out.join("pretrain_log.tsv"), &log)?;
    write_text(&card_path(&base), &to_json(&net_cfg))?;
    eprintln!(
        "pretrain: loss {:.4} -> {:.4}, accuracy {:.3}",
        pre.initial_loss,
        pre.losses.last().copied().unwrap_or(f64::NAN),
        pre.accuracy
    );
    Ok(Vec::new())
}

/// Reads the dataset and splits off the last `val` patients.
fn split_dataset(dir: &Path, val: usize) -> Result<(Vec<Case>, Vec<Case>)> {
    let dirs = patient_dirs(dir)?;
    if dirs.is_empty() {
        return Err(Error::MissingInput(format!("no patient directories in {}", dir.display())));
    }
    if val >= dirs.len() {
        return Err(Error::Config(format!("--val {val} leaves no training cases out of {}", dirs.len())));
    }
    let mut cases = dirs.par_iter().map(read_case).collect::<Result<Vec<_>>>()?;
    let val_cases = cases.split_off(cases.len() - val);
    Ok((cases, val_cases))
}

fn cmd_train(a: &TrainArgs) -> Result<Vec<PathBuf>> {
    let cfg = a.opts.train_config(a.seed);
    cfg.validate()?;
    let net_cfg = a.opts.network_config();
    let store = a.pretrained.as_ref().map(read_weights).transpose()?;
    let (train_cases, val_cases) = split_dataset(&a.data, a.val)?;
    let val_cases = if val_cases.is_empty() { &train_cases[..] } else { &val_cases[..] };
    let trained = train_with_progress(&cfg, &net_cfg, &train_cases, val_cases, store.as_ref(), |e| {
        eprintln!(
            "epoch {}: loss {:.4}, ET {:.3} WT {:.3} TC {:.3}",
            e.epoch, e.loss, e.val_dice[0], e.val_dice[1], e.val_dice[2]
        )
    })?;
    create_dir(&a.out)?;
    write_text(&a.out.join("train_log.tsv"), &trained.run.to_log())?;
    let base = a.out.join(MODEL_NAME);
    write_weights(&trained.params.to_store(), &base)?;
    let card = ModelCard { network: net_cfg, patch: cfg.patch_shape, steps: cfg.val_steps, norm_region: cfg.norm_region };
    write_text(&card_path(&base), &to_json(&card))?;
    let mut inputs = vec![a.data.clone()];
    if let Some(p) = &a.pretrained {
        let (m, b) = store_paths(p);
        inputs.extend([m, b]);
    }
    Ok(inputs)
}

fn cmd_predict(a: &PredictArgs) -> Result<Vec<PathBuf>> {
    let card_file = card_path(&a.weights);
    let text = fs::read_to_string(&card_file)
        .map_err(|_| Error::MissingInput(format!("network description {}", card_file.display())))?;
    let card: ModelCard =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", card_file.display())))?;
    let (net, mut params) = build_network::<f32>(card.network.clone(), 0)?;
    params.load_store(&read_weights(&a.weights)?)?;
    let patch = a.patch.unwrap_or(card.patch);
    let steps = a.steps.unwrap_or(DEFAULT_STEPS);
    let dirs = match (&a.case, &a.data) {
        (Some(c), _) => vec![c.clone()],
        (None, Some(d)) => patient_dirs(d)?,
        (None, None) => unreachable!("clap requires one input"),
    };
    if dirs.is_empty() {
        return Err(Error::MissingInput("no patient directories to predict".into()));
    }
    create_dir(&a.out)?;
    let mut inputs: Vec<PathBuf> = dirs
        .iter()
        .flat_map(|d| MODALITIES.iter().map(move |m| d.join(format!("{m}.nii"))))
        .collect();
    dirs.par_iter().try_for_each(|d| -> Result<()> {
        let scan = read_scan(d)?;
        let (probs, labels) = predict_case_probs(&net, &params, &scan, patch, steps, card.norm_region)?;
        let pdir = a.out.join(scan.patient_id());
        create_dir(&pdir)?;
        write_labels(&labels, pdir.join("seg.nii"))?;
        if a.probs {
            for (c, code) in LABEL_CODES.iter().enumerate() {
                let v = crate::volume::Volume3D::new(scan.dims(), scan.spacing(), probs.class(c).to_vec())?;
                write_volume(&v, pdir.join(format!("prob_{code}.nii")))?;
            }
        }
        Ok(())
    })?;
    let (m, b) = store_paths(&a.weights);
    inputs.extend([m, b, card_file]);
    Ok(inputs)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Vec<PathBuf>> {
    if !(a.percentile > 0.0 && a.percentile <= 100.0) {
        return Err(Error::Config(format!("--percentile must be in (0, 100], got {}", a.percentile)));
    }
    let refs = patient_dirs(&a.reference)?;
    if refs.is_empty() {
        return Err(Error::MissingInput(format!("no patient directories in {}", a.reference.display())));
    }
    let mut jobs = Vec::new();
    for run in &a.runs {
        for r in &refs {
            let id = r.file_name().expect("patient dir name").to_string_lossy().into_owned();
            jobs.push((id.clone(), run.join(&id).join("seg.nii"), r.join("seg.nii")));
        }
    }
    let missing: Vec<String> =
        jobs.iter().filter(|(_, p, _)| !p.is_file()).map(|(_, p, _)| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingInput(format!("predictions {}", missing.join(", "))));
    }
    let cases: Vec<CaseScores> = jobs
        .par_iter()
        .map(|(id, p, r)| evaluate_case(id, &read_labels(p)?, &read_labels(r)?, a.percentile))
        .collect::<Result<_>>()?;
    let report = aggregate(&cases, a.runs.len())?;
    create_dir(&a.out)?;
    write_text(&a.out.join("report.tsv"), &report.to_table())?;
    write_text(&a.out.join("boxplot.tsv"), &report.to_boxplot())?;
    write_text(&a.out.join("cases.tsv"), &cases_table(&cases))?;
    let mut inputs: Vec<PathBuf> = jobs.into_iter().map(|(_, p, _)| p).collect();
    inputs.extend(refs.iter().map(|r| r.join("seg.nii")));
    Ok(inputs)
}

fn cmd_compare(a: &CompareArgs) -> Result<Vec<PathBuf>> {
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    if a.val == 0 {
        return Err(Error::Config("--val must be at least 1".into()));
    }
    let cfg = a.opts.train_config(0);
    cfg.validate()?;
    let net_cfg = a.opts.network_config();
    let store = read_weights(&a.pretrained)?;
    let (train_cases, val_cases) = split_dataset(&a.data, a.val)?;
    let seeds: Vec<u64> = (1..=a.seeds).collect();
    let cmp = compare_arms(&cfg, &net_cfg, &seeds, &train_cases, &val_cases, &store, |arm, seed, run| {
        let d = run.final_dice().unwrap_or([f64::NAN; 3]);
        eprintln!("{} seed {seed}: ET {:.3} WT {:.3} TC {:.3}", arm.name(), d[0], d[1], d[2]);
    })?;
    let runs_dir = a.out.join("runs");
    create_dir(&runs_dir)?;
    for (arm, runs) in crate::training::Arm::BOTH.iter().zip(&cmp.runs) {
        for (seed, run) in seeds.iter().zip(runs) {
            write_text(&runs_dir.join(format!("{}_seed{seed}.tsv", arm.name())), &run.to_log())?;
        }
    }
    write_text(&a.out.join("compare.tsv"), &cmp.to_tsv())?;
    let fin = cmp.final_summary();
    write_text(&a.out.join("final.tsv"), &fin.to_tsv())?;
    eprintln!("pretrained mean >= random in {}/3 regions, smaller std in {}/3", fin.mean_wins(), fin.std_wins());
    let (m, b) = store_paths(&a.pretrained);
    Ok(vec![a.data.clone(), m, b])
}
