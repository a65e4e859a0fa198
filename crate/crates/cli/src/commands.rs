//! One function per subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use sha2::{Digest, Sha256};

use nodule_cascade::annotations::{group_by_series, parse_annotations, parse_labels, rasterize_mask, select_slices, MaskShape};
use nodule_cascade::cascade::{
    assemble_fused, map_ordered, screen_results_to_csv, screen_with_model, verdicts_to_csv, Aggregation, Cascade,
    CascadeConfig,
};
use nodule_cascade::eval::{compare_networks, pixel_roc, roc_points, roc_to_csv, area, Averaging, NetworkResult};
use nodule_cascade::experiment::{all_slices, segmentation_slices};
use nodule_cascade::nn::{load_checkpoint, save_checkpoint, ArchConfig, ArchId, Model, UpsampleMode};
use nodule_cascade::phantom::{generate_phantom_dataset, PhantomSpec};
use nodule_cascade::rng::derive_seed;
use nodule_cascade::train::{split_dataset, train_classifier, train_segmentation, SplitConfig, SplitUnit, TrainConfig};
use nodule_cascade::volume::{load_volume, HuWindow};
use nodule_cascade::{Error, Label, MaskVolume};

use crate::config::{List, Resolver};
use crate::data::{list_volumes, read_split, split_part, split_to_csv, write_file};
use crate::error::{CliError, Result};

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn say(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// Flat `key = value` file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenPhantomArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cases_per_class: Option<usize>,
    /// Voxel counts `x,y,z`.
    #[arg(long)]
    pub dims: Option<List<usize, 3>>,
    /// Millimetres per voxel `x,y,z`.
    #[arg(long)]
    pub spacing: Option<List<f64, 3>>,
    #[arg(long)]
    pub background_mean: Option<f64>,
    #[arg(long)]
    pub background_noise_sd: Option<f64>,
    #[arg(long)]
    pub benign_diameter: Option<List<f64, 2>>,
    #[arg(long)]
    pub malignant_diameter: Option<List<f64, 2>>,
    #[arg(long)]
    pub spiculation: Option<f64>,
    #[arg(long)]
    pub nodule_mean: Option<f64>,
    #[arg(long)]
    pub nodule_sd: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

pub fn gen_phantom(a: GenPhantomArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let d = PhantomSpec::default();
    let out = r.path("out", a.out)?;
    let spec = PhantomSpec {
        seed: r.value("seed", a.seed, d.seed)?,
        cases_per_class: r.value("cases-per-class", a.cases_per_class, d.cases_per_class)?,
        dims: r.value("dims", a.dims, List(d.dims))?.0,
        spacing: r.value("spacing", a.spacing, List(d.spacing))?.0,
        background_mean: r.value("background-mean", a.background_mean, d.background_mean)?,
        background_noise_sd: r.value("background-noise-sd", a.background_noise_sd, d.background_noise_sd)?,
        benign_diameter_range: r.value("benign-diameter", a.benign_diameter, List(d.benign_diameter_range))?.0,
        malignant_diameter_range: r
            .value("malignant-diameter", a.malignant_diameter, List(d.malignant_diameter_range))?
            .0,
        spiculation_amplitude: r.value("spiculation", a.spiculation, d.spiculation_amplitude)?,
        nodule_intensity_mean: r.value("nodule-mean", a.nodule_mean, d.nodule_intensity_mean)?,
        nodule_intensity_sd: r.value("nodule-sd", a.nodule_sd, d.nodule_intensity_sd)?,
    };
    let workers = r.value("workers", a.workers, 1usize)?;
    r.finish()?;
    spec.validate().map_err(usage)?;
    let manifest = generate_phantom_dataset(&spec, &out, workers)?;
    r.write_echo(&out)?;
    say(format!("wrote {} cases to {}", spec.case_count(), out.display()));
    println!("{}", manifest.digest());
    Ok(())
}

#[derive(Args, Debug)]
pub struct BuildMasksArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of `.mhd` volumes.
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra slices kept on each side of the nodule extent.
    #[arg(long)]
    pub pad: Option<usize>,
    /// `ball` or `disk`.
    #[arg(long)]
    pub shape: Option<MaskShape>,
    /// Fail when an annotated series has no volume.
    #[arg(long)]
    pub strict: bool,
}

pub fn build_masks(a: BuildMasksArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let volumes = r.path("volumes", a.volumes)?;
    let annotations = r.path("annotations", a.annotations)?;
    let out = r.path("out", a.out)?;
    let pad = r.value("pad", a.pad, 5usize)?;
    let shape = r.value("shape", a.shape, MaskShape::Ball)?;
    let strict = r.flag("strict", a.strict)?;
    r.finish()?;

    let findings = parse_annotations(&annotations)?;
    let by_series = group_by_series(&findings);
    let vols: BTreeMap<String, PathBuf> = list_volumes(&volumes)?.into_iter().collect();
    for uid in by_series.keys().filter(|u| !vols.contains_key(**u)) {
        let msg = format!("annotated series {uid} has no volume in {}", volumes.display());
        if strict {
            return Err(Error::InvalidArgument(msg).into());
        }
        say(format!("warning: {msg}"));
    }
    let mut slices = String::from("seriesuid,slice_index\n");
    let mut written = 0;
    for (uid, path) in &vols {
        let Some(list) = by_series.get(uid.as_str()) else {
            continue;
        };
        let vol = load_volume(path)?;
        let owned: Vec<_> = list.iter().map(|f| (*f).clone()).collect();
        let mask = rasterize_mask(&vol.grid, &owned, shape);
        mask.save(out.join(format!("{uid}.mhd")))?;
        for z in select_slices(&mask, pad) {
            let _ = writeln!(slices, "{uid},{z}");
        }
        written += 1;
    }
    write_file(&out.join("slices.csv"), &slices)?;
    r.write_echo(&out)?;
    say(format!("wrote {written} masks to {}", out.display()));
    Ok(())
}

/// Options shared by the two training commands.
#[derive(Args, Debug)]
pub struct TrainOpts {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// `train,val,test` fractions.
    #[arg(long)]
    pub split: Option<List<f64, 3>>,
    /// `nearest` or `transposed`.
    #[arg(long)]
    pub upsample: Option<UpsampleMode>,
    /// Intensity window `lo,hi` in HU.
    #[arg(long)]
    pub window: Option<List<f64, 2>>,
}

struct Resolved {
    seed: u64,
    train: TrainConfig,
    split: SplitConfig,
    upsample: UpsampleMode,
    window: HuWindow,
}

fn resolve_train(r: &mut Resolver, o: TrainOpts, split: [f64; 3], unit: SplitUnit, epochs: usize) -> Result<Resolved> {
    let d = TrainConfig::default();
    let seed = r.value("seed", o.seed, 0u64)?;
    let train = TrainConfig {
        epochs: r.value("epochs", o.epochs, epochs)?,
        batch_size: r.value("batch-size", o.batch_size, d.batch_size)?,
        learning_rate: r.value("lr", o.lr, d.learning_rate)?,
        max_steps: r.optional("max-steps", o.max_steps)?,
        ..d
    };
    let split = SplitConfig {
        fractions: r.value("split", o.split, List(split))?.0,
        seed,
        unit,
    };
    let upsample = r.value("upsample", o.upsample, UpsampleMode::Nearest)?;
    let w = HuWindow::default();
    let win = r.value("window", o.window, List([w.lo, w.hi]))?.0;
    let window = HuWindow::new(win[0], win[1]).map_err(usage)?;
    train.validate().map_err(usage)?;
    split.validate().map_err(usage)?;
    Ok(Resolved {
        seed,
        train,
        split,
        upsample,
        window,
    })
}

fn check_dims(uid: &str, dims: [usize; 3], expected: &mut Option<[usize; 3]>) -> Result<()> {
    match expected {
        None => *expected = Some(dims),
        Some(e) if e[..2] != dims[..2] => {
            return Err(Error::shape(
                format!("{}x{} slices", e[0], e[1]),
                format!("{uid} with {}x{}", dims[0], dims[1]),
            )
            .into())
        }
        _ => {}
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainSegArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    /// Directory of mask volumes named like the scans.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub pad: Option<usize>,
    #[command(flatten)]
    pub train: TrainOpts,
}

pub fn train_seg(a: TrainSegArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let volumes = r.path("volumes", a.volumes)?;
    let masks = r.path("masks", a.masks)?;
    let out = r.path("out", a.out)?;
    let pad = r.value("pad", a.pad, 5usize)?;
    let t = resolve_train(&mut r, a.train, SplitConfig::segmentation(0).fractions, SplitUnit::Scan, 10)?;
    r.finish()?;

    let mut scans = Vec::new();
    for (uid, path) in list_volumes(&volumes)? {
        let mp = masks.join(format!("{uid}.mhd"));
        if mp.exists() {
            scans.push((uid, path, mp));
        } else {
            say(format!("warning: no mask for {uid}; skipped"));
        }
    }
    let uids: Vec<String> = scans.iter().map(|s| s.0.clone()).collect();
    let split = split_dataset(&uids, &t.split)?;
    let mut dims = None;
    let mut sets: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for (uid, vp, mp) in &scans {
        let vol = load_volume(vp)?;
        check_dims(uid, vol.grid.dims, &mut dims)?;
        let mask = MaskVolume::load(mp)?;
        let part = if split.train.contains(uid) {
            "train"
        } else if split.val.contains(uid) {
            "val"
        } else {
            "test"
        };
        sets.entry(part)
            .or_default()
            .extend(segmentation_slices(uid, &vol.normalize(t.window), &mask, None, pad)?);
    }
    let [nx, ny, _] = dims.ok_or_else(|| Error::Empty(format!("no masked volumes in {}", volumes.display())))?;
    let mut model = Model::new(
        ArchConfig {
            upsample: t.upsample,
            ..ArchConfig::new(ArchId::Segmentation, ny, nx)
        },
        derive_seed(t.seed, "seg-init"),
    )?;
    let cfg = TrainConfig {
        seed: derive_seed(t.seed, "seg-train"),
        ..t.train
    };
    let (tr, va) = (sets.remove("train").unwrap_or_default(), sets.remove("val").unwrap_or_default());
    say(format!("training on {} slices, validating on {}", tr.len(), va.len()));
    let (mut ckpt, history) = train_segmentation(&tr, &va, &mut model, &cfg)?;
    ckpt.meta.notes.insert("split".into(), split.fingerprint());
    save_checkpoint(&ckpt, out.join("checkpoint.json"))?;
    write_file(&out.join("history.csv"), &history.to_csv())?;
    write_file(&out.join("split.csv"), &split_to_csv(&split))?;
    r.write_echo(&out)?;
    println!("{}", ckpt.digest());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ScreenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seg_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub window: Option<List<f64, 2>>,
    #[arg(long)]
    pub workers: Option<usize>,
}

pub fn screen(a: ScreenArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let seg_ckpt = r.path("seg-ckpt", a.seg_ckpt)?;
    let volumes = r.path("volumes", a.volumes)?;
    let out = r.path("out", a.out)?;
    let threshold = r.value("threshold", a.threshold, nodule_cascade::cascade::DEFAULT_THRESHOLD)?;
    let w = HuWindow::default();
    let win = r.value("window", a.window, List([w.lo, w.hi]))?.0;
    let workers = r.value("workers", a.workers, 1usize)?;
    r.finish()?;
    let window = HuWindow::new(win[0], win[1]).map_err(usage)?;

    let ckpt = load_checkpoint(&seg_ckpt)?;
    if ckpt.arch.arch != ArchId::Segmentation {
        return Err(Error::Checkpoint(format!("{} is not a segmentation checkpoint", seg_ckpt.display())).into());
    }
    let seg: Model<f32> = ckpt.to_model()?;
    let vols = list_volumes(&volumes)?;
    let results = map_ordered(&vols, workers, |(uid, path)| {
        let vol = load_volume(path)?;
        screen_with_model(&seg, &all_slices(uid, &vol.normalize(window), None)?, threshold)
    })?;
    let mut total = 0;
    for ((uid, _), res) in vols.iter().zip(&results) {
        write_file(&out.join(format!("{uid}.screen.csv")), &screen_results_to_csv(res))?;
        total += res.iter().filter(|s| s.suspicious).count();
    }
    r.write_echo(&out)?;
    say(format!("{total} suspicious slices in {} volumes", vols.len()));
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainClsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seg_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    /// `seriesuid,label` table.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `encoder-cls`, `baseline-fc` or `baseline-encdec`.
    #[arg(long)]
    pub arch: Option<ArchId>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Total copies of each benign training slice.
    #[arg(long)]
    pub oversample: Option<usize>,
    /// Feed the classifier a 0.5-thresholded map instead of probabilities.
    #[arg(long)]
    pub binarize: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub train: TrainOpts,
}

pub fn train_cls(a: TrainClsArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let seg_path = r.path("seg-ckpt", a.seg_ckpt)?;
    let volumes = r.path("volumes", a.volumes)?;
    let labels_path = r.path("labels", a.labels)?;
    let out = r.path("out", a.out)?;
    let arch = r.value("arch", a.arch, ArchId::Classifier)?;
    let threshold = r.value("threshold", a.threshold, nodule_cascade::cascade::DEFAULT_THRESHOLD)?;
    let oversample = r.value("oversample", a.oversample, 3usize)?;
    let binarize = r.flag("binarize", a.binarize)?;
    let workers = r.value("workers", a.workers, 1usize)?;
    let mut t = resolve_train(&mut r, a.train, SplitConfig::classification(0).fractions, SplitUnit::Case, 30)?;
    r.finish()?;
    if !arch.is_classifier() {
        return Err(usage(format!("`{}` is not a classifier", arch.as_str())));
    }
    t.train.oversample_factor = oversample;
    t.train.validate().map_err(usage)?;

    let seg_ckpt = load_checkpoint(&seg_path)?;
    if seg_ckpt.arch.arch != ArchId::Segmentation {
        return Err(Error::Checkpoint(format!("{} is not a segmentation checkpoint", seg_path.display())).into());
    }
    let seg: Model<f32> = seg_ckpt.to_model()?;
    let labels = parse_labels(&labels_path)?;
    let mut cases = Vec::new();
    for (uid, path) in list_volumes(&volumes)? {
        match labels.get(&uid) {
            Some(&l) => cases.push((uid, path, l)),
            None => say(format!("warning: no label for {uid}; skipped")),
        }
    }
    let uids: Vec<String> = cases.iter().map(|c| c.0.clone()).collect();
    let split = split_dataset(&uids, &t.split)?;
    let wanted: Vec<_> = cases
        .iter()
        .filter(|c| !split.test.contains(&c.0))
        .collect();
    let fused = map_ordered(&wanted, workers, |(uid, path, label)| {
        let vol = load_volume(path)?;
        let s = all_slices(uid, &vol.normalize(t.window), Some(*label))?;
        let screens = screen_with_model(&seg, &s, threshold)?;
        Ok((uid.clone(), assemble_fused(&s, &screens, binarize)?))
    })?;
    let mut dims = None;
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (uid, samples) in fused {
        if let Some(s) = samples.first() {
            check_dims(&uid, [s.input.width, s.input.height, 0], &mut dims)?;
        }
        if split.val.contains(&uid) {
            va.extend(samples);
        } else {
            tr.extend(samples);
        }
    }
    let (nx, ny) = (seg_ckpt.arch.width, seg_ckpt.arch.height);
    let mut model = Model::new(
        ArchConfig {
            upsample: t.upsample,
            ..ArchConfig::new(arch, ny, nx)
        },
        derive_seed(t.seed, &format!("{}-init", arch.as_str())),
    )?;
    let cfg = TrainConfig {
        seed: derive_seed(t.seed, "cls-train"),
        ..t.train
    };
    say(format!("training on {} suspicious slices, validating on {}", tr.len(), va.len()));
    let (mut ckpt, history) = train_classifier(&tr, &va, &seg_ckpt, &mut model, &cfg)?;
    ckpt.meta.notes.insert("split".into(), split.fingerprint());
    save_checkpoint(&ckpt, out.join("checkpoint.json"))?;
    write_file(&out.join("history.csv"), &history.to_csv())?;
    write_file(&out.join("split.csv"), &split_to_csv(&split))?;
    r.write_echo(&out)?;
    println!("{}", ckpt.digest());
    Ok(())
}

/// Restrict `uids` to one part of a split file, if given.
fn select_part(r: &mut Resolver, split: Option<PathBuf>, part: Option<String>) -> Result<Option<Vec<String>>> {
    let split = r.optional_path("split", split)?;
    let part = r.value("part", part, "test".to_string())?;
    match split {
        None => Ok(None),
        Some(p) => {
            let s = read_split(&p)?;
            let ids = split_part(&s, &part).ok_or_else(|| usage(format!("unknown split part `{part}`")))?;
            Ok(Some(ids.to_vec()))
        }
    }
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seg_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub cls_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split file (`seriesuid,part`) restricting the cases.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Which part of `--split` to use.
    #[arg(long)]
    pub part: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// `mean` or `majority`.
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
    #[arg(long)]
    pub binarize: bool,
    #[arg(long)]
    pub window: Option<List<f64, 2>>,
    #[arg(long)]
    pub workers: Option<usize>,
}

pub fn infer(a: InferArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let seg_path = r.path("seg-ckpt", a.seg_ckpt)?;
    let cls_path = r.path("cls-ckpt", a.cls_ckpt)?;
    let volumes = r.path("volumes", a.volumes)?;
    let out = r.path("out", a.out)?;
    let only = select_part(&mut r, a.split, a.part)?;
    let threshold = r.value("threshold", a.threshold, nodule_cascade::cascade::DEFAULT_THRESHOLD)?;
    let aggregation = r.value("aggregation", a.aggregation, Aggregation::Mean)?;
    let binarize = r.flag("binarize", a.binarize)?;
    let w = HuWindow::default();
    let win = r.value("window", a.window, List([w.lo, w.hi]))?.0;
    let workers = r.value("workers", a.workers, 1usize)?;
    r.finish()?;
    let window = HuWindow::new(win[0], win[1]).map_err(usage)?;

    let cascade = Cascade::from_checkpoints(
        &load_checkpoint(&seg_path)?,
        &load_checkpoint(&cls_path)?,
        CascadeConfig {
            threshold,
            aggregation,
            binarize,
            window,
        },
    )?;
    let vols: Vec<(String, PathBuf)> = list_volumes(&volumes)?
        .into_iter()
        .filter(|(uid, _)| only.as_ref().map_or(true, |o| o.contains(uid)))
        .collect();
    let verdicts = map_ordered(&vols, workers, |(uid, path)| cascade.run(uid, &load_volume(path)?))?;
    write_file(&out.join("verdicts.csv"), &verdicts_to_csv(&verdicts))?;
    r.write_echo(&out)?;
    let malignant = verdicts.iter().filter(|v| v.label == Label::Malignant).count();
    say(format!("{} cases: {malignant} malignant", verdicts.len()));
    Ok(())
}

/// `name=path` or a bare path named after its parent directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Named(pub String, pub PathBuf);

impl std::str::FromStr for Named {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some((n, p)) = s.split_once('=') {
            return Ok(Named(n.to_string(), PathBuf::from(p)));
        }
        let p = PathBuf::from(s);
        let name = p
            .parent()
            .and_then(Path::file_name)
            .or_else(|| p.file_stem())
            .and_then(|n| n.to_str())
            .ok_or_else(|| format!("cannot name `{s}`"))?
            .to_string();
        Ok(Named(name, p))
    }
}

impl std::fmt::Display for Named {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}={}", self.0, self.1.display())
    }
}

/// Several values under one config key, separated by `;`.
#[derive(Clone, Debug, PartialEq)]
pub struct Many<T>(pub Vec<T>);

impl<T: std::str::FromStr> std::str::FromStr for Many<T> {
    type Err = T::Err;

    fn from_str(s: &str) -> std::result::Result<Self, T::Err> {
        s.split(';')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Many)
    }
}

impl<T: std::fmt::Display> std::fmt::Display for Many<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Verdict files from `infer`, as `name=path`; repeat to compare.
    #[arg(long)]
    pub verdicts: Vec<Named>,
    /// `positive` (malignant class) or `macro`.
    #[arg(long)]
    pub averaging: Option<Averaging>,
    /// Segmentation checkpoint for pixel- and slice-level ROC.
    #[arg(long)]
    pub seg_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Split file restricting the segmentation evaluation scans.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub part: Option<String>,
    #[arg(long)]
    pub pad: Option<usize>,
    #[arg(long)]
    pub window: Option<List<f64, 2>>,
}

fn read_verdict_scores(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = |msg: &str| Error::Table {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let mut cols = line.split(',');
        let uid = cols.next().filter(|u| !u.is_empty()).ok_or_else(|| bad("missing seriesuid"))?;
        let score: f64 = cols
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("case_score is not a number"))?;
        out.insert(uid.to_string(), score);
    }
    Ok(out)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let out = r.path("out", a.out)?;
    let labels_path = r.optional_path("labels", a.labels)?;
    let verdicts = r.value(
        "verdicts",
        (!a.verdicts.is_empty()).then(|| Many(a.verdicts)),
        Many(Vec::new()),
    )?;
    let averaging = r.value("averaging", a.averaging, Averaging::Positive)?;
    let seg_path = r.optional_path("seg-ckpt", a.seg_ckpt)?;
    let volumes = r.optional_path("volumes", a.volumes)?;
    let masks = r.optional_path("masks", a.masks)?;
    let only = select_part(&mut r, a.split, a.part)?;
    let pad = r.value("pad", a.pad, 5usize)?;
    let w = HuWindow::default();
    let win = r.value("window", a.window, List([w.lo, w.hi]))?.0;
    r.finish()?;
    let window = HuWindow::new(win[0], win[1]).map_err(usage)?;
    if verdicts.0.is_empty() && seg_path.is_none() {
        return Err(usage("nothing to evaluate: give --verdicts and/or --seg-ckpt"));
    }

    if !verdicts.0.is_empty() {
        let labels_path = labels_path.ok_or_else(|| usage("--verdicts needs --labels"))?;
        let labels = parse_labels(&labels_path)?;
        let mut results = Vec::new();
        let mut scores_csv = String::from("seriesuid,label");
        let mut columns: Vec<BTreeMap<String, f64>> = Vec::new();
        for Named(name, path) in &verdicts.0 {
            let scores = read_verdict_scores(path)?;
            let mut truths = Vec::new();
            for uid in scores.keys() {
                truths.push(
                    *labels
                        .get(uid)
                        .ok_or_else(|| Error::InvalidArgument(format!("no label for {uid}")))?,
                );
            }
            if truths.iter().all(|&t| t == truths[0]) {
                return Err(Error::SingleClass.into());
            }
            let ids = scores.keys().fold(Sha256::new(), |h, k| h.chain_update(k).chain_update(b"\n"));
            results.push(NetworkResult {
                name: name.clone(),
                split_fingerprint: hex::encode(ids.finalize()),
                truths,
                scores: scores.values().copied().collect(),
            });
            let _ = write!(scores_csv, ",{name}");
            columns.push(scores);
        }
        let report = compare_networks(&results, averaging)?;
        scores_csv.push('\n');
        for (i, uid) in columns[0].keys().enumerate() {
            let _ = write!(scores_csv, "{uid},{}", results[0].truths[i]);
            for c in &columns {
                let _ = write!(scores_csv, ",{:.6}", c[uid]);
            }
            scores_csv.push('\n');
        }
        for row in &report.rows {
            write_file(&out.join(format!("roc_case_{}.csv", row.name)), &roc_to_csv(&row.roc))?;
        }
        write_file(&out.join("case_scores.csv"), &scores_csv)?;
        write_file(&out.join("report.csv"), &report.to_csv())?;
        write_file(&out.join("report.txt"), &report.to_text())?;
        print!("{}", report.to_text());
    }

    if let Some(seg_path) = seg_path {
        let volumes = volumes.ok_or_else(|| usage("--seg-ckpt needs --volumes"))?;
        let masks = masks.ok_or_else(|| usage("--seg-ckpt needs --masks"))?;
        let ckpt = load_checkpoint(&seg_path)?;
        let seg: Model<f32> = ckpt.to_model()?;
        let mut maps = Vec::new();
        let mut truth_masks = Vec::new();
        for (uid, path) in list_volumes(&volumes)? {
            if only.as_ref().is_some_and(|o| !o.contains(&uid)) {
                continue;
            }
            let mp = masks.join(format!("{uid}.mhd"));
            if !mp.exists() {
                continue;
            }
            let vol = load_volume(&path)?;
            let mask = MaskVolume::load(&mp)?;
            let slices = segmentation_slices(&uid, &vol.normalize(window), &mask, None, pad)?;
            for res in screen_with_model(&seg, &slices, 0.5)? {
                maps.push(res.prob_map);
            }
            truth_masks.extend(slices.into_iter().filter_map(|s| s.mask));
        }
        let mref: Vec<&[f32]> = maps.iter().map(Vec::as_slice).collect();
        let tref: Vec<&[u8]> = truth_masks.iter().map(Vec::as_slice).collect();
        let pixel = pixel_roc(&mref, &tref)?;
        let slice_scores: Vec<f64> = maps.iter().map(|m| m.iter().fold(0.0f32, |a, &b| a.max(b)) as f64).collect();
        let slice_truths: Vec<bool> = truth_masks.iter().map(|m| m.iter().any(|&v| v > 0)).collect();
        let mut summary = format!("level,auc,items\npixel,{:.6},{}\n", pixel.auc, mref.iter().map(|m| m.len()).sum::<usize>());
        write_file(&out.join("roc_pixel.csv"), &roc_to_csv(&pixel.points))?;
        match roc_points(&slice_scores, &slice_truths) {
            Ok(pts) => {
                let _ = writeln!(summary, "slice,{:.6},{}", area(&pts), slice_scores.len());
                write_file(&out.join("roc_slice.csv"), &roc_to_csv(&pts))?;
            }
            Err(Error::SingleClass) => {
                let _ = writeln!(summary, "slice,NA,{}", slice_scores.len());
            }
            Err(e) => return Err(e.into()),
        }
        write_file(&out.join("segmentation.csv"), &summary)?;
        println!("pixel AUC {:.4}", pixel.auc);
    }
    r.write_echo(&out)?;
    Ok(())
}
