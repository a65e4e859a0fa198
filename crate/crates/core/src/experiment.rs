//! The whole phantom study in memory: generate cases, train the segmenter,
//! screen, train the classifiers, run the cascade and score everything.

use std::time::Instant;

use crate::annotations::{extract_slice_samples, select_slices, Label, MaskVolume, SliceSample};
use crate::cascade::{assemble_fused, classify_fused, screen_with_model, Aggregation, Cascade, CascadeConfig, FusedInput, FusedSample, ScreenResult};
use crate::error::{Error, Result};
use crate::eval::{compare_networks, evaluate_scores, pixel_roc, Averaging, ComparisonReport, EvalReport, NetworkResult, RocSummary};
use crate::nn::{ArchConfig, ArchId, Model, ModelCheckpoint, UpsampleMode};
use crate::phantom::{generate_cases, PhantomCase, PhantomSpec};
use crate::rng::derive_seed;
use crate::train::{split_dataset, train_classifier, train_segmentation, SplitConfig, TrainConfig, TrainHistory};
use crate::volume::{HuWindow, NormalizedVolume};

/// Slices around the nodule of one scan, each paired with its mask.
pub fn segmentation_slices(
    uid: &str,
    norm: &NormalizedVolume,
    mask: &MaskVolume,
    label: Option<Label>,
    pad: usize,
) -> Result<Vec<SliceSample>> {
    extract_slice_samples(uid, norm, Some(mask), &select_slices(mask, pad), label)
}

/// Every axial slice of a scan.
pub fn all_slices(uid: &str, norm: &NormalizedVolume, label: Option<Label>) -> Result<Vec<SliceSample>> {
    let idx: Vec<usize> = (0..norm.grid.dims[2]).collect();
    extract_slice_samples(uid, norm, None, &idx, label)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub seed: u64,
    pub pad: usize,
    pub window: HuWindow,
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub binarize: bool,
    pub upsample: UpsampleMode,
    pub seg_train: TrainConfig,
    pub cls_train: TrainConfig,
    /// Classifiers to train and compare; the first drives the cascade.
    pub classifiers: Vec<ArchId>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            phantom: PhantomSpec::default(),
            seed: 0,
            pad: 5,
            window: HuWindow::default(),
            threshold: crate::cascade::DEFAULT_THRESHOLD,
            aggregation: Aggregation::Mean,
            binarize: false,
            upsample: UpsampleMode::Nearest,
            seg_train: TrainConfig {
                epochs: 2,
                ..Default::default()
            },
            cls_train: TrainConfig {
                epochs: 30,
                ..Default::default()
            },
            classifiers: vec![ArchId::Classifier, ArchId::BaselineFc, ArchId::BaselineEncDec],
            workers: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierRun {
    pub arch: ArchId,
    pub checkpoint: ModelCheckpoint,
    pub history: TrainHistory,
    /// Malignant probability per test slice, aligned with
    /// [`ExperimentReport::test_slices`].
    pub slice_scores: Vec<f64>,
    /// Case-level cascade report on the classification test split.
    pub case_report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub seg_checkpoint: ModelCheckpoint,
    pub seg_history: TrainHistory,
    pub pixel: RocSummary,
    pub classifiers: Vec<ClassifierRun>,
    /// `(series uid, slice index, label)` of the suspicious test slices.
    pub test_slices: Vec<(String, usize, Label)>,
    pub slice_comparison: ComparisonReport,
    pub case_comparison: ComparisonReport,
    pub counts: Vec<(String, usize)>,
    pub seconds: Vec<(String, f64)>,
}

impl ExperimentReport {
    pub fn pixel_auc(&self) -> f64 {
        self.pixel.auc
    }

    /// Case accuracy of the cascade built on the first classifier.
    pub fn case_accuracy(&self) -> Option<f64> {
        self.classifiers.first().and_then(|c| c.case_report.metrics.accuracy)
    }
}

struct Timer<'a> {
    start: Instant,
    log: &'a mut dyn FnMut(&str),
    seconds: Vec<(String, f64)>,
}

impl Timer<'_> {
    fn lap(&mut self, what: &str) {
        let t = self.start.elapsed().as_secs_f64();
        let prev: f64 = self.seconds.iter().map(|s| s.1).sum();
        self.seconds.push((what.to_string(), t - prev));
        (self.log)(&format!("[{t:8.1}s] {what}"));
    }
}

pub fn run_phantom_experiment(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    if cfg.classifiers.is_empty() {
        return Err(Error::InvalidArgument("no classifiers requested".into()));
    }
    let mut timer = Timer {
        start: Instant::now(),
        log,
        seconds: Vec::new(),
    };
    let mut counts = Vec::new();
    let cases = generate_cases(&cfg.phantom, cfg.workers)?;
    let norms: Vec<NormalizedVolume> = cases.iter().map(|c| c.volume.normalize(cfg.window)).collect();
    let uids: Vec<String> = cases.iter().map(|c| c.annotation.series_uid.clone()).collect();
    timer.lap(&format!("generated {} phantom cases", cases.len()));

    let [nx, ny, _] = cfg.phantom.dims;
    let ids: Vec<usize> = (0..cases.len()).collect();
    let seg_split = split_dataset(&ids, &SplitConfig::segmentation(cfg.seed))?;
    let seg_set = |part: &[usize]| -> Result<Vec<SliceSample>> {
        let mut out = Vec::new();
        for &i in part {
            let c: &PhantomCase = &cases[i];
            out.extend(segmentation_slices(&uids[i], &norms[i], &c.mask, Some(c.label), cfg.pad)?);
        }
        Ok(out)
    };
    let (seg_tr, seg_va, seg_te) = (seg_set(&seg_split.train)?, seg_set(&seg_split.val)?, seg_set(&seg_split.test)?);
    counts.push(("seg_train_slices".into(), seg_tr.len()));
    counts.push(("seg_val_slices".into(), seg_va.len()));
    counts.push(("seg_test_slices".into(), seg_te.len()));

    let seg_arch = ArchConfig {
        upsample: cfg.upsample,
        ..ArchConfig::new(ArchId::Segmentation, ny, nx)
    };
    let mut seg = Model::new(seg_arch, derive_seed(cfg.seed, "seg-init"))?;
    let seg_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, "seg-train"),
        ..cfg.seg_train.clone()
    };
    let (seg_ckpt, seg_history) = train_segmentation(&seg_tr, &seg_va, &mut seg, &seg_cfg)?;
    timer.lap(&format!(
        "trained segmenter: {} slices, {} epochs",
        seg_tr.len(),
        seg_history.epochs.len()
    ));

    let test_screens = screen_with_model(&seg, &seg_te, cfg.threshold)?;
    let maps: Vec<&[f32]> = test_screens.iter().map(|r| r.prob_map.as_slice()).collect();
    let masks: Vec<&[u8]> = seg_te.iter().map(|s| s.mask.as_deref().unwrap_or(&[])).collect();
    let pixel = pixel_roc(&maps, &masks)?;
    timer.lap(&format!("pixel AUC on {} test slices: {:.4}", seg_te.len(), pixel.auc));

    // every slice of every case, screened once
    let cls_split = split_dataset(&ids, &SplitConfig::classification(cfg.seed))?;
    let mut slices: Vec<Vec<SliceSample>> = Vec::with_capacity(cases.len());
    let mut screens: Vec<Vec<ScreenResult>> = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let s = all_slices(&uids[i], &norms[i], Some(c.label))?;
        screens.push(screen_with_model(&seg, &s, cfg.threshold)?);
        slices.push(s);
    }
    timer.lap(&format!("screened {} slices", slices.iter().map(Vec::len).sum::<usize>()));

    let fused_set = |part: &[usize]| -> Result<Vec<FusedSample>> {
        let mut out = Vec::new();
        for &i in part {
            out.extend(assemble_fused(&slices[i], &screens[i], cfg.binarize)?);
        }
        Ok(out)
    };
    let (cls_tr, cls_va, cls_te) = (
        fused_set(&cls_split.train)?,
        fused_set(&cls_split.val)?,
        fused_set(&cls_split.test)?,
    );
    counts.push(("cls_train_slices".into(), cls_tr.len()));
    counts.push(("cls_val_slices".into(), cls_va.len()));
    counts.push(("cls_test_slices".into(), cls_te.len()));
    let test_slices: Vec<(String, usize, Label)> = cls_te
        .iter()
        .map(|f| (f.series_uid.clone(), f.slice_index, f.label))
        .collect();
    let test_inputs: Vec<&FusedInput> = cls_te.iter().map(|f| &f.input).collect();
    let truths: Vec<Label> = cls_split.test.iter().map(|&i| cases[i].label).collect();
    let fingerprint = {
        let names = |p: &[usize]| p.iter().map(|&i| uids[i].clone()).collect::<Vec<_>>();
        crate::train::Split {
            train: names(&cls_split.train),
            val: names(&cls_split.val),
            test: names(&cls_split.test),
        }
        .fingerprint()
    };

    let mut runs = Vec::new();
    for &arch in &cfg.classifiers {
        let mut model = Model::new(
            ArchConfig {
                upsample: cfg.upsample,
                ..ArchConfig::new(arch, ny, nx)
            },
            derive_seed(cfg.seed, &format!("{}-init", arch.as_str())),
        )?;
        let tcfg = TrainConfig {
            seed: derive_seed(cfg.seed, "cls-train"),
            ..cfg.cls_train.clone()
        };
        let (checkpoint, history) = train_classifier(&cls_tr, &cls_va, &seg_ckpt, &mut model, &tcfg)?;
        let slice_scores = classify_fused(&model, &test_inputs)?;
        let cascade = Cascade::new(
            seg.clone(),
            model,
            CascadeConfig {
                threshold: cfg.threshold,
                aggregation: cfg.aggregation,
                binarize: cfg.binarize,
                window: cfg.window,
            },
        )?;
        let verdicts = cls_split
            .test
            .iter()
            .map(|&i| cascade.classify_screened(&uids[i], &norms[i], &screens[i]))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = verdicts.iter().map(|v| v.case_score).collect();
        let case_report = evaluate_scores(arch.display_name(), &truths, &scores, Averaging::Positive)?;
        timer.lap(&format!(
            "{}: {} epochs, case accuracy {:.4}",
            arch.as_str(),
            history.epochs.len(),
            case_report.metrics.accuracy.unwrap_or(f64::NAN)
        ));
        runs.push(ClassifierRun {
            arch,
            checkpoint,
            history,
            slice_scores,
            case_report,
        });
    }

    let slice_truths: Vec<Label> = test_slices.iter().map(|t| t.2).collect();
    let slice_comparison = compare_networks(
        &runs
            .iter()
            .map(|r| NetworkResult {
                name: r.arch.display_name().into(),
                split_fingerprint: fingerprint.clone(),
                truths: slice_truths.clone(),
                scores: r.slice_scores.clone(),
            })
            .collect::<Vec<_>>(),
        Averaging::Positive,
    )?;
    let case_comparison = ComparisonReport {
        rows: runs.iter().map(|r| r.case_report.clone()).collect(),
    };
    Ok(ExperimentReport {
        seg_checkpoint: seg_ckpt,
        seg_history,
        pixel,
        classifiers: runs,
        test_slices,
        slice_comparison,
        case_comparison,
        counts,
        seconds: timer.seconds,
    })
}
