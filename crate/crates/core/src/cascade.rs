//! The two-stage pipeline: screen slices with the segmenter, fuse each
//! suspicious slice with its probability map, classify, and aggregate the
//! slice scores into a case verdict.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::thread;

use crate::annotations::{Label, SliceSample};
use crate::error::{Error, Result};
use crate::nn::{transfer_weights, ArchConfig, ArchId, Mode, Model, ModelCheckpoint, Tensor};
use crate::train::oversample::Labeled;
use crate::volume::{CtVolume, HuWindow, NormalizedVolume};

pub const DEFAULT_THRESHOLD: f64 = 0.35;
const BATCH: usize = 16;

/// The discriminator rule: strictly greater than the threshold.
pub fn is_suspicious(max_prob: f64, threshold: f64) -> bool {
    max_prob > threshold
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScreenResult {
    pub series_uid: String,
    pub slice_index: usize,
    pub width: usize,
    pub height: usize,
    pub prob_map: Vec<f32>,
    pub max_prob: f64,
    pub suspicious: bool,
}

impl ScreenResult {
    pub fn new(
        series_uid: impl Into<String>,
        slice_index: usize,
        width: usize,
        height: usize,
        prob_map: Vec<f32>,
        threshold: f64,
    ) -> Self {
        let max_prob = prob_map.iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
        ScreenResult {
            series_uid: series_uid.into(),
            slice_index,
            width,
            height,
            prob_map,
            max_prob,
            suspicious: is_suspicious(max_prob, threshold),
        }
    }

    /// Re-apply the rule at another threshold.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.suspicious = is_suspicious(self.max_prob, threshold);
        self
    }
}

pub fn screen_results_to_csv(results: &[ScreenResult]) -> String {
    let mut s = String::from("seriesuid,slice_index,max_prob,suspicious\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{:.6},{}",
            r.series_uid, r.slice_index, r.max_prob, r.suspicious as u8
        );
    }
    s
}

fn check_arch(model: &Model<f32>, want: ArchId) -> Result<()> {
    if model.arch() != want {
        return Err(Error::Checkpoint(format!(
            "expected a `{}` checkpoint, got `{}`",
            want.as_str(),
            model.arch().as_str()
        )));
    }
    Ok(())
}

fn model_from(ckpt: &ModelCheckpoint) -> Result<Model<f32>> {
    let mut model = Model::new(ckpt.arch, 0)?;
    transfer_weights(ckpt, &mut model)?;
    Ok(model)
}

/// Probability maps for `images`, each `height * width` values.
pub fn predict_maps(seg: &Model<f32>, images: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
    check_arch(seg, ArchId::Segmentation)?;
    let s = seg.input_shape();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(BATCH) {
        let mut x = Vec::with_capacity(chunk.len() * s.numel());
        for img in chunk {
            if img.len() != s.numel() {
                return Err(Error::shape(format!("{}x{} slice", s.h, s.w), format!("{} values", img.len())));
            }
            x.extend_from_slice(img);
        }
        let y = seg.forward(&Tensor::from_nchw(chunk.len(), 1, s.h, s.w, &x)?, Mode::Inference)?;
        out.extend((0..chunk.len()).map(|i| y.sample_nchw(i)));
    }
    Ok(out)
}

/// Screen slices with an already loaded segmentation model.
pub fn screen_with_model(seg: &Model<f32>, slices: &[SliceSample], threshold: f64) -> Result<Vec<ScreenResult>> {
    let images: Vec<&[f32]> = slices.iter().map(|s| s.image.as_slice()).collect();
    let maps = predict_maps(seg, &images)?;
    Ok(slices
        .iter()
        .zip(maps)
        .map(|(s, m)| ScreenResult::new(&s.series_uid, s.slice_index, s.width, s.height, m, threshold))
        .collect())
}

/// One result per slice; non-suspicious slices are kept but flagged.
pub fn screen_slices(seg_ckpt: &ModelCheckpoint, slices: &[SliceSample], threshold: f64) -> Result<Vec<ScreenResult>> {
    if seg_ckpt.arch.arch != ArchId::Segmentation {
        return Err(Error::Checkpoint(format!(
            "screening needs a `{}` checkpoint, got `{}`",
            ArchId::Segmentation.as_str(),
            seg_ckpt.arch.arch.as_str()
        )));
    }
    screen_with_model(&model_from(seg_ckpt)?, slices, threshold)
}

/// Two-channel classifier input: the CT slice, then the nodule map.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedInput {
    pub width: usize,
    pub height: usize,
    /// `[2][height][width]`.
    pub data: Vec<f32>,
}

impl FusedInput {
    pub fn channels(&self) -> usize {
        self.data.len() / (self.width * self.height).max(1)
    }

    pub fn ct(&self) -> &[f32] {
        &self.data[..self.width * self.height]
    }

    pub fn prob(&self) -> &[f32] {
        &self.data[self.width * self.height..]
    }

    pub fn unstack(&self) -> (Vec<f32>, Vec<f32>) {
        (self.ct().to_vec(), self.prob().to_vec())
    }
}

/// Stack a CT slice and its probability map without rescaling.
pub fn fuse_inputs(ct_slice: &[f32], prob_map: &[f32], width: usize, height: usize) -> Result<FusedInput> {
    let n = width * height;
    if ct_slice.len() != n || prob_map.len() != n {
        return Err(Error::shape(
            format!("two {width}x{height} planes"),
            format!("{} and {} values", ct_slice.len(), prob_map.len()),
        ));
    }
    let mut data = Vec::with_capacity(2 * n);
    data.extend_from_slice(ct_slice);
    data.extend_from_slice(prob_map);
    Ok(FusedInput { width, height, data })
}

/// Threshold a probability map at 0.5.
pub fn binarize(prob_map: &[f32]) -> Vec<f32> {
    prob_map.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedSample {
    pub series_uid: String,
    pub slice_index: usize,
    pub input: FusedInput,
    pub label: Label,
}

impl Labeled for FusedSample {
    fn label(&self) -> Label {
        self.label
    }
}

/// Fuse every suspicious slice with its map; the rest are left out.
///
/// `slices` and `screens` must be parallel. Slices without a case label are
/// rejected.
pub fn assemble_fused(slices: &[SliceSample], screens: &[ScreenResult], binarize_maps: bool) -> Result<Vec<FusedSample>> {
    if slices.len() != screens.len() {
        return Err(Error::shape(format!("{} screen results", slices.len()), screens.len()));
    }
    let mut out = Vec::new();
    for (s, r) in slices.iter().zip(screens) {
        if (s.series_uid.as_str(), s.slice_index) != (r.series_uid.as_str(), r.slice_index) {
            return Err(Error::InvalidArgument(format!(
                "screen result {}#{} does not match slice {}#{}",
                r.series_uid, r.slice_index, s.series_uid, s.slice_index
            )));
        }
        if !r.suspicious {
            continue;
        }
        let label = s
            .case_label
            .ok_or_else(|| Error::InvalidArgument(format!("series {} has no case label", s.series_uid)))?;
        let map = if binarize_maps { binarize(&r.prob_map) } else { r.prob_map.clone() };
        out.push(FusedSample {
            series_uid: s.series_uid.clone(),
            slice_index: s.slice_index,
            input: fuse_inputs(&s.image, &map, s.width, s.height)?,
            label,
        });
    }
    Ok(out)
}

/// Malignant-class probability for each fused input.
pub fn classify_fused(cls: &Model<f32>, inputs: &[&FusedInput]) -> Result<Vec<f64>> {
    if !cls.arch().is_classifier() {
        return Err(Error::Checkpoint(format!("`{}` is not a classifier", cls.arch().as_str())));
    }
    let s = cls.input_shape();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(BATCH) {
        let mut x = Vec::with_capacity(chunk.len() * s.numel());
        for f in chunk {
            if f.data.len() != s.numel() {
                return Err(Error::shape(format!("{s:?}"), format!("{} values", f.data.len())));
            }
            x.extend_from_slice(&f.data);
        }
        let y = cls.forward(&Tensor::from_nchw(chunk.len(), s.c, s.h, s.w, &x)?, Mode::Inference)?;
        out.extend(y.data[y.b..].iter().map(|&p| f64::from(p)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean malignant probability over suspicious slices.
    #[default]
    Mean,
    /// Fraction of suspicious slices called malignant.
    Majority,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "majority" => Ok(Aggregation::Majority),
            other => Err(Error::InvalidArgument(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Majority => "majority",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseVerdict {
    pub series_uid: String,
    /// `(slice index, malignant probability)` for suspicious slices, by index.
    pub slice_probs: Vec<(usize, f64)>,
    pub case_score: f64,
    pub label: Label,
    pub no_findings: bool,
}

impl CaseVerdict {
    pub fn n_suspicious(&self) -> usize {
        self.slice_probs.len()
    }
}

/// Combine slice probabilities into a verdict; no slices means benign with
/// `no_findings` set.
pub fn aggregate(series_uid: &str, slice_probs: &[(usize, f64)], how: Aggregation) -> CaseVerdict {
    let mut probs = slice_probs.to_vec();
    probs.sort_by_key(|p| p.0);
    let case_score = if probs.is_empty() {
        0.0
    } else {
        let n = probs.len() as f64;
        match how {
            Aggregation::Mean => probs.iter().map(|p| p.1).sum::<f64>() / n,
            Aggregation::Majority => probs.iter().filter(|p| p.1 >= 0.5).count() as f64 / n,
        }
    };
    CaseVerdict {
        series_uid: series_uid.to_string(),
        no_findings: probs.is_empty(),
        label: if case_score >= 0.5 { Label::Malignant } else { Label::Benign },
        slice_probs: probs,
        case_score,
    }
}

pub fn verdicts_to_csv(verdicts: &[CaseVerdict]) -> String {
    let mut s = String::from("seriesuid,case_score,label,n_suspicious_slices,no_findings\n");
    for v in verdicts {
        let _ = writeln!(
            s,
            "{},{:.6},{},{},{}",
            v.series_uid,
            v.case_score,
            v.label,
            v.n_suspicious(),
            v.no_findings as u8
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeConfig {
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub binarize: bool,
    pub window: HuWindow,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            threshold: DEFAULT_THRESHOLD,
            aggregation: Aggregation::Mean,
            binarize: false,
            window: HuWindow::default(),
        }
    }
}

/// Loaded segmenter and classifier.
#[derive(Clone, Debug)]
pub struct Cascade {
    pub seg: Model<f32>,
    pub cls: Model<f32>,
    pub config: CascadeConfig,
}

impl Cascade {
    pub fn new(seg: Model<f32>, cls: Model<f32>, config: CascadeConfig) -> Result<Self> {
        check_arch(&seg, ArchId::Segmentation)?;
        if !cls.arch().is_classifier() {
            return Err(Error::Checkpoint(format!("`{}` is not a classifier", cls.arch().as_str())));
        }
        let (a, b) = (seg.config, cls.config);
        if (a.height, a.width) != (b.height, b.width) || cls.input_shape().c != 2 {
            return Err(Error::Checkpoint(format!(
                "segmenter takes {}x{} slices but classifier takes {:?}",
                a.height,
                a.width,
                cls.input_shape()
            )));
        }
        Ok(Cascade { seg, cls, config })
    }

    pub fn from_checkpoints(seg: &ModelCheckpoint, cls: &ModelCheckpoint, config: CascadeConfig) -> Result<Self> {
        Cascade::new(model_from(seg)?, model_from(cls)?, config)
    }

    pub fn input_config(&self) -> ArchConfig {
        self.seg.config
    }

    /// Screen every slice of a normalized volume.
    pub fn screen(&self, series_uid: &str, vol: &NormalizedVolume) -> Result<Vec<ScreenResult>> {
        let [nx, ny, nz] = vol.grid.dims;
        if nz == 0 || nx * ny == 0 {
            return Err(Error::Empty(format!("volume {series_uid}")));
        }
        let images: Vec<&[f32]> = (0..nz).map(|z| vol.slice(z)).collect();
        let maps = predict_maps(&self.seg, &images)?;
        Ok(maps
            .into_iter()
            .enumerate()
            .map(|(z, m)| ScreenResult::new(series_uid, z, nx, ny, m, self.config.threshold))
            .collect())
    }

    /// Verdict from precomputed screen results.
    pub fn classify_screened(&self, series_uid: &str, vol: &NormalizedVolume, screens: &[ScreenResult]) -> Result<CaseVerdict> {
        let [nx, ny, _] = vol.grid.dims;
        let mut fused = Vec::new();
        let mut idx = Vec::new();
        for r in screens.iter().filter(|r| r.suspicious) {
            let map = if self.config.binarize { binarize(&r.prob_map) } else { r.prob_map.clone() };
            fused.push(fuse_inputs(vol.slice(r.slice_index), &map, nx, ny)?);
            idx.push(r.slice_index);
        }
        let refs: Vec<&FusedInput> = fused.iter().collect();
        let probs = classify_fused(&self.cls, &refs)?;
        let pairs: Vec<(usize, f64)> = idx.into_iter().zip(probs).collect();
        Ok(aggregate(series_uid, &pairs, self.config.aggregation))
    }

    pub fn run_normalized(&self, series_uid: &str, vol: &NormalizedVolume) -> Result<CaseVerdict> {
        let screens = self.screen(series_uid, vol)?;
        self.classify_screened(series_uid, vol, &screens)
    }

    pub fn run(&self, series_uid: &str, volume: &CtVolume) -> Result<CaseVerdict> {
        self.run_normalized(series_uid, &volume.normalize(self.config.window))
    }

    /// Verdicts for many volumes, in input order, using up to `workers`
    /// threads.
    pub fn run_many(&self, cases: &[(String, CtVolume)], workers: usize) -> Result<Vec<CaseVerdict>> {
        map_ordered(cases, workers, |(uid, vol)| self.run(uid, vol))
    }
}

/// Apply `f` to every item with up to `workers` threads; results keep input
/// order.
pub fn map_ordered<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<O>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|chunk| s.spawn(move || chunk.iter().map(f).collect::<Result<Vec<O>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Load both checkpoints and produce the verdict for one volume.
pub fn run_cascade(
    seg_ckpt: &ModelCheckpoint,
    cls_ckpt: &ModelCheckpoint,
    series_uid: &str,
    volume: &CtVolume,
    threshold: f64,
) -> Result<CaseVerdict> {
    let cfg = CascadeConfig {
        threshold,
        ..Default::default()
    };
    Cascade::from_checkpoints(seg_ckpt, cls_ckpt, cfg)?.run(series_uid, volume)
}
