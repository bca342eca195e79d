//! Command-line front end: phantom generation, registration, training,
//! evaluation, slice rendering and manifest replay.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O, 4 shape or label
//! mismatch (and out-of-range slices), 5 non-finite loss.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::diffeo::{jacobian_determinant, DeformationBundle};
use crate::error::{Error, Result};
use crate::eval::{evaluate_bundle, EvalOptions, EvalReport};
use crate::grid::{Field, VectorGrid};
use crate::io::{self, quantize};
use crate::par;
use crate::phantom::{phantom_dataset, PhantomConfig, PhantomPair};
use crate::registration::{
    predict_amortized, register_direct, train_amortized, EpochMetrics, ImagePair, Mode, Regime, RegistrationConfig,
    RegistrationResult, ToyUNetWeights,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;
pub const EXIT_NON_FINITE: i32 = 5;

pub const MANIFEST: &str = "manifest.json";
const WEIGHTS_INDEX: &str = "weights.json";

#[derive(Debug, Parser)]
#[command(name = "ddir", version, about = "Discontinuity-preserving regional diffeomorphic registration")]
pub struct Cli {
    /// Worker threads for voxel kernels.
    #[arg(long, global = true, env = "DDIR_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantom pairs.
    Phantom(PhantomArgs),
    /// Register one moving/fixed pair.
    Register(RegisterArgs),
    /// Train the amortized encoder-decoder on a phantom directory.
    Train(TrainArgs),
    /// Recompute the evaluation report of a registration output.
    Eval(EvalArgs),
    /// Render one slice of a grid as PGM (gray) or PPM (blue-white-red).
    View(ViewArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ddir,
    Baseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Ddir => Mode::Ddir,
            ModeArg::Baseline => Mode::Baseline,
        }
    }
}

/// Flags overriding fields of the registration config file.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k_steps: Option<usize>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda_prior: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving_labels: PathBuf,
    #[arg(long)]
    pub fixed_labels: PathBuf,
    /// Trained weights directory; selects the amortized regime.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `pair_*` subdirectories written by `phantom`.
    #[arg(long)]
    pub data: PathBuf,
    /// Trailing pairs held out for per-epoch validation.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory of `register`.
    #[arg(long)]
    pub result: PathBuf,
    /// Pair directory; defaults to the inputs recorded by `register`.
    #[arg(long)]
    pub pair: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    pub hd_percentile: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    #[arg(long)]
    pub grid: PathBuf,
    /// z index for 3D grids; must be 0 for 2D grids.
    #[arg(long, default_value_t = 0)]
    pub slice: usize,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output location; defaults to the one recorded in the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to re-run a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub output: PathBuf,
    pub config: serde_json::Value,
}

impl JobManifest {
    fn new(command: &str, seed: u64, inputs: BTreeMap<String, PathBuf>, output: &Path, config: serde_json::Value) -> Self {
        JobManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            inputs,
            output: output.to_path_buf(),
            config,
        }
    }

    fn input(&self, key: &str) -> Result<PathBuf> {
        self.inputs
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Config(format!("manifest lacks input '{key}'")))
    }

    fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Config(format!("manifest config: {e}")))
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::NonPositivePrior(_) | Error::EmptyDataset(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Json { .. } => EXIT_IO,
        Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        _ => EXIT_SHAPE,
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configs serialize to json")
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Config files are user input: malformed JSON is a configuration error,
/// a missing file an I/O error.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => io::read_json(p).map_err(|e| match e {
            Error::Json { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        }),
    }
}

fn resolve_registration(o: &Overrides) -> Result<RegistrationConfig> {
    let mut cfg: RegistrationConfig = read_config(o.config.as_deref())?;
    if let Some(m) = o.mode {
        cfg.mode = m.into();
    }
    macro_rules! set {
        ($field:ident, $($path:tt)+) => {
            if let Some(v) = o.$field {
                cfg.$($path)+ = v;
            }
        };
    }
    set!(seed, seed);
    set!(k_steps, k_steps);
    set!(lambda0, weights.lambda0);
    set!(lambda1, weights.lambda1);
    set!(lambda2, weights.lambda2);
    set!(lambda_prior, weights.lambda_prior);
    set!(iterations, iterations);
    set!(epochs, epochs);
    if o.lr.is_some() {
        cfg.lr = o.lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output location that removes what it created unless committed.
struct Staging {
    root: PathBuf,
    created_root: bool,
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Staging {
    fn dir(root: &Path) -> Result<Self> {
        let created_root = !root.exists();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Staging {
            root: root.to_path_buf(),
            created_root,
            files: Vec::new(),
            dirs: Vec::new(),
            committed: false,
        })
    }

    /// For commands whose output is a single file.
    fn file_parent(out: &Path) -> Result<Self> {
        let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut s = Self::dir(parent)?;
        s.root = parent.to_path_buf();
        Ok(s)
    }

    fn subdir(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.root.join(name);
        if !p.exists() {
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            self.dirs.push(p.clone());
        }
        Ok(p)
    }

    /// Registers a GridFile base path (both halves).
    fn grid(&mut self, base: PathBuf) -> PathBuf {
        let (j, r) = io::grid_paths(&base);
        self.files.push(j);
        self.files.push(r);
        base
    }

    fn file(&mut self, p: PathBuf) -> PathBuf {
        self.files.push(p.clone());
        p
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created_root {
            let _ = fs::remove_dir_all(&self.root);
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

fn write_pair_dir(st: &mut Staging, name: &str, p: &PhantomPair) -> Result<()> {
    let d = st.subdir(name)?;
    io::write_scalar(&st.grid(d.join("moving")), &p.moving)?;
    io::write_scalar(&st.grid(d.join("fixed")), &p.fixed)?;
    io::write_labels(&st.grid(d.join("labels_moving")), &p.labels_moving)?;
    io::write_labels(&st.grid(d.join("labels_fixed")), &p.labels_fixed)?;
    io::write_vector(&st.grid(d.join("gt_composed")), &p.ground_truth.composed)?;
    for (r, u) in p.ground_truth.sub_fields.iter().enumerate() {
        io::write_vector(&st.grid(d.join(format!("gt_sub_{r}"))), u)?;
    }
    Ok(())
}

pub fn run_phantom(cfg: &PhantomConfig, n: usize, out: &Path) -> Result<()> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("--n must be >= 1".into()));
    }
    let pairs = phantom_dataset(n, cfg, cfg.seed)?;
    let mut st = Staging::dir(out)?;
    for (i, p) in pairs.iter().enumerate() {
        write_pair_dir(&mut st, &format!("pair_{i:03}"), p)?;
    }
    let mut config = to_value(cfg);
    config["n"] = n.into();
    let m = JobManifest::new("phantom", cfg.seed, BTreeMap::new(), &absolute(out), config);
    io::write_json(&st.file(out.join(MANIFEST)), &m)?;
    st.commit();
    Ok(())
}

pub fn read_pair(moving: &Path, fixed: &Path, moving_labels: &Path, fixed_labels: &Path, regions: usize) -> Result<ImagePair> {
    ImagePair::new(
        io::read_scalar(moving)?,
        io::read_scalar(fixed)?,
        io::read_labels(moving_labels, regions)?,
        io::read_labels(fixed_labels, regions)?,
    )
}

pub fn read_pair_dir(dir: &Path, regions: usize) -> Result<ImagePair> {
    read_pair(
        &dir.join("moving"),
        &dir.join("fixed"),
        &dir.join("labels_moving"),
        &dir.join("labels_fixed"),
        regions,
    )
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: String,
    path: String,
}

#[derive(Serialize, Deserialize)]
struct WeightsIndex {
    mode: Mode,
    regions: usize,
    base_width: usize,
    config: RegistrationConfig,
    tensors: Vec<TensorEntry>,
}

fn tensor_role(name: &str) -> &'static str {
    match (name.contains("head"), name.contains("logvar"), name.ends_with("bias")) {
        (true, true, false) => "log-variance head kernel",
        (true, true, true) => "log-variance head bias",
        (true, false, false) => "mean head kernel",
        (true, false, true) => "mean head bias",
        (false, _, false) => "convolution kernel",
        (false, _, true) => "convolution bias",
    }
}

pub fn load_weights(dir: &Path) -> Result<ToyUNetWeights> {
    let idx: WeightsIndex = io::read_json(&dir.join(WEIGHTS_INDEX))?;
    let tensors = idx
        .tensors
        .iter()
        .map(|t| io::read_tensor(&dir.join(&t.path)))
        .collect::<Result<Vec<_>>>()?;
    ToyUNetWeights::from_tensors(idx.mode, idx.regions, idx.base_width, tensors)
}

fn write_loss_trace(path: &Path, result: &RegistrationResult) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        iteration: usize,
        total: f64,
        ncc: f64,
        dice: f64,
        regularizer: f64,
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let rows = result.loss_trace.iter().chain(std::iter::once(&result.final_loss));
    for (iteration, c) in rows.enumerate() {
        w.serialize(Row {
            iteration,
            total: c.total,
            ncc: c.ncc,
            dice: c.dice,
            regularizer: c.regularizer,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Bundle as it will be read back from disk.
fn stored_bundle(b: &DeformationBundle) -> DeformationBundle {
    DeformationBundle {
        sub_fields: b.sub_fields.iter().map(quantize).collect(),
        composed: quantize(&b.composed),
    }
}

fn has_jacobian(u: &VectorGrid) -> bool {
    u.dims().sizes().iter().all(|&n| n >= 3)
}

pub struct RegisterInputs {
    pub moving: PathBuf,
    pub fixed: PathBuf,
    pub moving_labels: PathBuf,
    pub fixed_labels: PathBuf,
    pub weights: Option<PathBuf>,
}

impl RegisterInputs {
    fn to_map(&self) -> BTreeMap<String, PathBuf> {
        let mut m = BTreeMap::new();
        m.insert("moving".into(), absolute(&self.moving));
        m.insert("fixed".into(), absolute(&self.fixed));
        m.insert("moving_labels".into(), absolute(&self.moving_labels));
        m.insert("fixed_labels".into(), absolute(&self.fixed_labels));
        if let Some(w) = &self.weights {
            m.insert("weights".into(), absolute(w));
        }
        m
    }

    fn from_manifest(m: &JobManifest) -> Result<Self> {
        Ok(RegisterInputs {
            moving: m.input("moving")?,
            fixed: m.input("fixed")?,
            moving_labels: m.input("moving_labels")?,
            fixed_labels: m.input("fixed_labels")?,
            weights: m.inputs.get("weights").cloned(),
        })
    }
}

pub fn run_register(inputs: &RegisterInputs, cfg: &RegistrationConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let pair = read_pair(
        &inputs.moving,
        &inputs.fixed,
        &inputs.moving_labels,
        &inputs.fixed_labels,
        cfg.regions,
    )?;
    let mut cfg = cfg.clone();
    let result = match &inputs.weights {
        Some(w) => {
            let weights = load_weights(w)?;
            cfg.regime = Regime::Amortized;
            cfg.mode = weights.mode;
            predict_amortized(&weights, &pair, &cfg)?
        }
        None => {
            if cfg.regime == Regime::Amortized {
                return Err(Error::Config("amortized registration needs --weights".into()));
            }
            register_direct(&pair, &cfg)?
        }
    };
    let bundle = stored_bundle(&result.bundle);
    let report = evaluate_bundle(&bundle, &pair, &EvalOptions::default())?;

    let mut st = Staging::dir(out)?;
    io::write_scalar(&st.grid(out.join("warped")), &result.warped)?;
    io::write_labels(&st.grid(out.join("warped_labels")), &result.warped_labels)?;
    io::write_vector(&st.grid(out.join("composed")), &result.bundle.composed)?;
    for (r, u) in result.bundle.sub_fields.iter().enumerate() {
        io::write_vector(&st.grid(out.join(format!("sub_field_{r}"))), u)?;
    }
    for (r, (m, l)) in result.params.mu.iter().zip(&result.params.log_var).enumerate() {
        io::write_vector(&st.grid(out.join(format!("mu_{r}"))), m)?;
        io::write_vector(&st.grid(out.join(format!("log_var_{r}"))), l)?;
    }
    if has_jacobian(&bundle.composed) {
        io::write_scalar(&st.grid(out.join("jacobian")), &jacobian_determinant(&bundle.composed)?)?;
        for (r, u) in bundle.sub_fields.iter().enumerate() {
            io::write_scalar(&st.grid(out.join(format!("jacobian_sub_{r}"))), &jacobian_determinant(u)?)?;
        }
    }
    write_loss_trace(&st.file(out.join("loss_trace.csv")), &result)?;
    let rp = st.file(out.join("report.json"));
    fs::write(&rp, report.to_json()? + "\n").map_err(|e| Error::io(&rp, e))?;
    let m = JobManifest::new("register", cfg.seed, inputs.to_map(), &absolute(out), to_value(&cfg));
    io::write_json(&st.file(out.join(MANIFEST)), &m)?;
    st.commit();
    Ok(report)
}

fn pair_dirs(data: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(data).map_err(|e| Error::io(data, e))?;
    let mut dirs = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(data, e))?;
        let p = entry.path();
        let is_pair = p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("pair_"));
        if is_pair {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn run_train(data: &Path, holdout: usize, cfg: &RegistrationConfig, out: &Path) -> Result<Vec<EpochMetrics>> {
    let mut cfg = cfg.clone();
    cfg.regime = Regime::Amortized;
    cfg.validate()?;
    let dirs = pair_dirs(data)?;
    let pairs = dirs
        .iter()
        .map(|d| read_pair_dir(d, cfg.regions))
        .collect::<Result<Vec<_>>>()?;
    if holdout >= pairs.len() {
        return Err(Error::EmptyDataset(format!(
            "{} pairs in {}, {holdout} held out",
            pairs.len(),
            data.display()
        )));
    }
    let (train, val) = pairs.split_at(pairs.len() - holdout);
    let model = train_amortized(train, val, &cfg)?;

    let mut st = Staging::dir(out)?;
    let wdir = st.subdir("weights")?;
    let mut tensors = Vec::new();
    for (name, t) in model.weights.named_tensors() {
        io::write_tensor(&st.grid(wdir.join(&name)), t)?;
        tensors.push(TensorEntry {
            role: tensor_role(&name).into(),
            path: format!("weights/{name}"),
            name,
        });
    }
    let idx = WeightsIndex {
        mode: model.weights.mode,
        regions: model.weights.regions(),
        base_width: model.weights.base_width,
        config: cfg.clone(),
        tensors,
    };
    io::write_json(&st.file(out.join(WEIGHTS_INDEX)), &idx)?;
    let mp = st.file(out.join("metrics.csv"));
    let mut w = csv::Writer::from_path(&mp).map_err(|e| csv_err(&mp, e))?;
    for h in &model.history {
        w.serialize(h).map_err(|e| csv_err(&mp, e))?;
    }
    w.flush().map_err(|e| Error::io(&mp, e))?;
    let mut inputs = BTreeMap::new();
    inputs.insert("data".into(), absolute(data));
    let mut config = to_value(&cfg);
    config["holdout"] = holdout.into();
    let m = JobManifest::new("train", cfg.seed, inputs, &absolute(out), config);
    io::write_json(&st.file(out.join(MANIFEST)), &m)?;
    st.commit();
    Ok(model.history)
}

fn read_result_bundle(dir: &Path) -> Result<DeformationBundle> {
    let composed = io::read_vector(&dir.join("composed"))?;
    let mut sub_fields = Vec::new();
    while io::grid_paths(&dir.join(format!("sub_field_{}", sub_fields.len()))).0.exists() {
        sub_fields.push(io::read_vector(&dir.join(format!("sub_field_{}", sub_fields.len())))?);
    }
    if sub_fields.is_empty() {
        return Err(Error::io(
            dir.join("sub_field_0.json"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no sub-fields in result directory"),
        ));
    }
    Ok(DeformationBundle { sub_fields, composed })
}

fn manifest_suffix(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".manifest.json");
    s.into()
}

pub fn run_eval(result: &Path, pair_dir: Option<&Path>, opts: &EvalOptions, out: &Path) -> Result<EvalReport> {
    let reg: JobManifest = io::read_json(&result.join(MANIFEST))?;
    let reg_cfg: RegistrationConfig = reg.config_as()?;
    let pair = match pair_dir {
        Some(d) => read_pair_dir(d, reg_cfg.regions)?,
        None => {
            let i = RegisterInputs::from_manifest(&reg)?;
            read_pair(&i.moving, &i.fixed, &i.moving_labels, &i.fixed_labels, reg_cfg.regions)?
        }
    };
    let bundle = read_result_bundle(result)?;
    let report = evaluate_bundle(&bundle, &pair, opts)?;

    let mut st = Staging::file_parent(out)?;
    let rp = st.file(out.to_path_buf());
    fs::write(&rp, report.to_json()? + "\n").map_err(|e| Error::io(&rp, e))?;
    let mut inputs = BTreeMap::new();
    inputs.insert("result".into(), absolute(result));
    if let Some(d) = pair_dir {
        inputs.insert("pair".into(), absolute(d));
    }
    let m = JobManifest::new("eval", reg.seed, inputs, &absolute(out), to_value(opts));
    io::write_json(&st.file(manifest_suffix(out)), &m)?;
    st.commit();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub slice: usize,
    pub channel: usize,
}

#[derive(Serialize, Deserialize)]
struct ViewSidecar {
    min: f64,
    max: f64,
    slice: usize,
    channel: usize,
    colormap: String,
}

/// Linear blue → white → red at `t` in [0, 1].
fn blue_white_red(t: f64) -> [u8; 3] {
    let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if t < 0.5 {
        let s = 2.0 * t;
        [to8(s), to8(s), 255]
    } else {
        let s = 2.0 * (1.0 - t);
        [255, to8(s), to8(s)]
    }
}

pub fn run_view(grid: &Path, cfg: &ViewConfig, out: &Path) -> Result<()> {
    let (h, vals) = io::read_channel(grid, cfg.channel)?;
    let (w, hgt) = (h.dims[0], h.dims.get(1).copied().unwrap_or(1));
    let depth = h.dims.get(2).copied().unwrap_or(1);
    if cfg.slice >= depth {
        return Err(Error::shape(format!("slice {} out of range (depth {depth})", cfg.slice)));
    }
    let plane = &vals[cfg.slice * w * hgt..(cfg.slice + 1) * w * hgt];
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let color = match out.extension().and_then(|e| e.to_str()) {
        Some("pgm") => false,
        Some("ppm") => true,
        _ => return Err(Error::Config(format!("{}: output must end in .pgm or .ppm", out.display()))),
    };
    let mut bytes = Vec::new();
    let magic = if color { "P6" } else { "P5" };
    write!(bytes, "{magic}\n{w} {hgt}\n255\n").expect("in-memory write");
    // image rows top to bottom: highest y first
    for y in (0..hgt).rev() {
        for x in 0..w {
            let t = norm(plane[y * w + x]);
            if color {
                bytes.extend_from_slice(&blue_white_red(t));
            } else {
                bytes.push((t * 255.0).round() as u8);
            }
        }
    }
    let mut st = Staging::file_parent(out)?;
    let op = st.file(out.to_path_buf());
    fs::write(&op, bytes).map_err(|e| Error::io(&op, e))?;
    let side = ViewSidecar {
        min: lo,
        max: hi,
        slice: cfg.slice,
        channel: cfg.channel,
        colormap: if color { "blue-white-red" } else { "gray" }.into(),
    };
    let mut sp = out.as_os_str().to_os_string();
    sp.push(".json");
    io::write_json(&st.file(sp.into()), &side)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("grid".into(), absolute(grid));
    let m = JobManifest::new("view", 0, inputs, &absolute(out), to_value(cfg));
    io::write_json(&st.file(manifest_suffix(out)), &m)?;
    st.commit();
    Ok(())
}

/// Re-runs the command recorded in `manifest`, writing to `out` or to the
/// recorded output.
pub fn run_replay(manifest: &Path, out: Option<&Path>) -> Result<()> {
    let m: JobManifest = io::read_json(manifest)?;
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| m.output.clone());
    match m.command.as_str() {
        "phantom" => {
            let n = m.config.get("n").and_then(|v| v.as_u64()).unwrap_or(1) as usize;
            run_phantom(&m.config_as()?, n, &target)
        }
        "register" => run_register(&RegisterInputs::from_manifest(&m)?, &m.config_as()?, &target).map(|_| ()),
        "train" => {
            let holdout = m.config.get("holdout").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            run_train(&m.input("data")?, holdout, &m.config_as()?, &target).map(|_| ())
        }
        "eval" => run_eval(&m.input("result")?, m.inputs.get("pair").map(|p| p.as_path()), &m.config_as()?, &target).map(|_| ()),
        "view" => run_view(&m.input("grid")?, &m.config_as()?, &target),
        other => Err(Error::Config(format!("unknown command '{other}' in manifest"))),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        par::set_thread_count(t);
    }
    match cli.command {
        Command::Phantom(a) => {
            let mut cfg: PhantomConfig = read_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            run_phantom(&cfg, a.n, &a.out)
        }
        Command::Register(a) => {
            let cfg = resolve_registration(&a.overrides)?;
            let inputs = RegisterInputs {
                moving: a.moving,
                fixed: a.fixed,
                moving_labels: a.moving_labels,
                fixed_labels: a.fixed_labels,
                weights: a.weights,
            };
            let report = run_register(&inputs, &cfg, &a.out)?;
            log::info!("avg dice {:.4} -> {:.4}", report.pre.avg_dice, report.post.avg_dice);
            Ok(())
        }
        Command::Train(a) => {
            let mut cfg = resolve_registration(&a.overrides)?;
            cfg.regime = Regime::Amortized;
            run_train(&a.data, a.holdout, &cfg, &a.out).map(|_| ())
        }
        Command::Eval(a) => {
            let opts = EvalOptions {
                hd_percentile: a.hd_percentile,
                ..Default::default()
            };
            if !(opts.hd_percentile > 0.0 && opts.hd_percentile <= 100.0) {
                return Err(Error::Config("--hd-percentile must lie in (0, 100]".into()));
            }
            run_eval(&a.result, a.pair.as_deref(), &opts, &a.out).map(|_| ())
        }
        Command::View(a) => run_view(
            &a.grid,
            &ViewConfig {
                slice: a.slice,
                channel: a.channel,
            },
            &a.out,
        ),
        Command::Replay(a) => run_replay(&a.manifest, a.out.as_deref()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(blue_white_red(0.0), [0, 0, 255]);
        assert_eq!(blue_white_red(0.5), [255, 255, 255]);
        assert_eq!(blue_white_red(1.0), [255, 0, 0]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::shape("x")), EXIT_SHAPE);
        assert_eq!(
            exit_code(&Error::NonFiniteLoss {
                iteration: 0,
                value: f64::NAN
            }),
            EXIT_NON_FINITE
        );
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), EXIT_IO);
    }

    #[test]
    fn overrides_apply() {
        let o = Overrides {
            mode: Some(ModeArg::Baseline),
            lambda1: Some(7.0),
            iterations: Some(3),
            lr: Some(0.5),
            ..Default::default()
        };
        let c = resolve_registration(&o).unwrap();
        assert_eq!(c.mode, Mode::Baseline);
        assert_eq!(c.weights.lambda1, 7.0);
        assert_eq!(c.iterations, 3);
        assert_eq!(c.learning_rate(), 0.5);
        let bad = Overrides {
            lambda0: Some(-1.0),
            ..Default::default()
        };
        assert_eq!(exit_code(&resolve_registration(&bad).unwrap_err()), EXIT_CONFIG);
    }
}
