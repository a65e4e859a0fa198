//! The four architectures: U-Net segmenter, encoder classifier and the two
//! classification baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::{Graph, GraphBuilder, LayerKind, Mode, Network, Shape, Trace};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Encoder widths of the segmentation network.
pub const SEG_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1024];
/// Encoder widths of the classifier.
pub const CLS_CHANNELS: [usize; 3] = [8, 16, 32];
/// Encoder widths of the reduced encoder-decoder baseline.
pub const ENCDEC_CHANNELS: [usize; 5] = [8, 16, 32, 64, 128];
pub const HIDDEN_UNITS: usize = 128;
pub const DROPOUT_RATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchId {
    #[serde(rename = "unet-seg")]
    Segmentation,
    #[serde(rename = "encoder-cls")]
    Classifier,
    #[serde(rename = "baseline-fc")]
    BaselineFc,
    #[serde(rename = "baseline-encdec")]
    BaselineEncDec,
}

impl ArchId {
    pub const ALL: [ArchId; 4] = [
        ArchId::Segmentation,
        ArchId::Classifier,
        ArchId::BaselineFc,
        ArchId::BaselineEncDec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Segmentation => "unet-seg",
            ArchId::Classifier => "encoder-cls",
            ArchId::BaselineFc => "baseline-fc",
            ArchId::BaselineEncDec => "baseline-encdec",
        }
    }

    /// Human-readable row name for comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ArchId::Segmentation => "U-Net segmentation",
            ArchId::Classifier => "Proposed (encoder + FC)",
            ArchId::BaselineFc => "Fully connected",
            ArchId::BaselineEncDec => "Encoder-decoder with FC (8-wide)",
        }
    }

    pub fn input_channels(self) -> usize {
        match self {
            ArchId::Segmentation => 1,
            _ => 2,
        }
    }

    pub fn is_classifier(self) -> bool {
        self != ArchId::Segmentation
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown arch_id `{s}`")))
    }
}

/// How decoders double spatial resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    /// Nearest-neighbour copy; the following 3x3 conv does the learning.
    #[default]
    Nearest,
    /// Learned 2x2 stride-2 transposed convolution.
    Transposed,
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Transposed => "transposed",
        })
    }
}

impl FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "transposed" => Ok(UpsampleMode::Transposed),
            other => Err(Error::InvalidArgument(format!("unknown upsample mode `{other}`"))),
        }
    }
}

/// Everything needed to rebuild a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub arch: ArchId,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub upsample: UpsampleMode,
}

impl ArchConfig {
    pub fn new(arch: ArchId, height: usize, width: usize) -> Self {
        ArchConfig {
            arch,
            height,
            width,
            upsample: UpsampleMode::Nearest,
        }
    }

    pub fn build_graph(&self) -> Result<Graph> {
        let hw = (self.height, self.width);
        match self.arch {
            ArchId::Segmentation => build_segmentation_net(hw, self.upsample),
            ArchId::Classifier => build_classifier_net(hw),
            ArchId::BaselineFc => build_baseline_fc(hw),
            ArchId::BaselineEncDec => build_baseline_encdec(hw, self.upsample),
        }
    }
}

fn check_divisible(arch: &str, (h, w): (usize, usize), by: usize) -> Result<()> {
    if h == 0 || w == 0 || h % by != 0 || w % by != 0 {
        return Err(Error::InvalidArgument(format!(
            "{arch} needs input height and width divisible by {by}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// U-Net body: one 3x3 conv + ReLU per level, pooling after all but the
/// deepest, dropout on the two deepest, and a mirrored decoder that
/// upsamples, concatenates the matching encoder map, then convolves.
/// Returns the id of the last decoder activation.
fn unet_body(b: &mut GraphBuilder, widths: [usize; 5], upsample: UpsampleMode) -> Result<usize> {
    let mut x = b.input();
    let mut skips = Vec::with_capacity(4);
    for (level, &c) in widths.iter().enumerate() {
        let conv = b.conv3x3(&format!("enc{}", level + 1), x, c);
        x = b.relu(&format!("enc{}_relu", level + 1), conv);
        if level >= 3 {
            x = b.dropout(&format!("enc{}_drop", level + 1), x, DROPOUT_RATE);
        }
        if level < 4 {
            skips.push(x);
            x = b.maxpool(&format!("pool{}", level + 1), x)?;
        }
    }
    for level in (0..4).rev() {
        let up = match upsample {
            UpsampleMode::Nearest => b.upsample(&format!("up{}", level + 1), x),
            UpsampleMode::Transposed => {
                let c = b.shape(x).c;
                b.upconv(&format!("up{}", level + 1), x, c)
            }
        };
        let cat = b.concat(&format!("cat{}", level + 1), skips[level], up)?;
        let conv = b.conv3x3(&format!("dec{}", level + 1), cat, widths[level]);
        x = b.relu(&format!("dec{}_relu", level + 1), conv);
    }
    Ok(x)
}

/// Segmentation U-Net on single-channel `h x w` slices; outputs a
/// per-pixel probability map.
pub fn build_segmentation_net(hw: (usize, usize), upsample: UpsampleMode) -> Result<Graph> {
    check_divisible("segmentation net", hw, 16)?;
    let mut b = GraphBuilder::new(Shape::new(1, hw.0, hw.1));
    let x = unet_body(&mut b, SEG_CHANNELS, upsample)?;
    let head = b.conv1x1("head", x, 1);
    b.sigmoid("prob", head);
    Ok(b.finish())
}

fn classifier_head(b: &mut GraphBuilder, x: usize) -> Result<()> {
    let flat = b.flatten("flatten", x);
    let fc1 = b.dense("fc1", flat, HIDDEN_UNITS)?;
    let r = b.relu("fc1_relu", fc1);
    let fc2 = b.dense("fc2", r, 2)?;
    b.softmax("prob", fc2)?;
    Ok(())
}

/// Encoder classifier on fused 2-channel input.
pub fn build_classifier_net(hw: (usize, usize)) -> Result<Graph> {
    check_divisible("classifier net", hw, 8)?;
    let mut b = GraphBuilder::new(Shape::new(2, hw.0, hw.1));
    let mut x = b.input();
    for (level, &c) in CLS_CHANNELS.iter().enumerate() {
        let conv = b.conv3x3(&format!("enc{}", level + 1), x, c);
        x = b.relu(&format!("enc{}_relu", level + 1), conv);
        if level == CLS_CHANNELS.len() - 1 {
            x = b.dropout(&format!("enc{}_drop", level + 1), x, DROPOUT_RATE);
        }
        x = b.maxpool(&format!("pool{}", level + 1), x)?;
    }
    classifier_head(&mut b, x)?;
    Ok(b.finish())
}

/// Flatten straight into the dense head.
pub fn build_baseline_fc(hw: (usize, usize)) -> Result<Graph> {
    check_divisible("fully connected baseline", hw, 1)?;
    let mut b = GraphBuilder::new(Shape::new(2, hw.0, hw.1));
    let x = b.input();
    classifier_head(&mut b, x)?;
    Ok(b.finish())
}

/// The U-Net topology at reduced width, followed by the dense head.
pub fn build_baseline_encdec(hw: (usize, usize), upsample: UpsampleMode) -> Result<Graph> {
    check_divisible("encoder-decoder baseline", hw, 16)?;
    let mut b = GraphBuilder::new(Shape::new(2, hw.0, hw.1));
    let x = unet_body(&mut b, ENCDEC_CHANNELS, upsample)?;
    classifier_head(&mut b, x)?;
    Ok(b.finish())
}

/// A network together with the configuration that built it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ArchConfig,
    pub net: Network<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        Ok(Model {
            config,
            net: Network::init(config.build_graph()?, seed),
        })
    }

    pub fn arch(&self) -> ArchId {
        self.config.arch
    }

    pub fn input_shape(&self) -> Shape {
        self.net.graph.input_shape()
    }

    pub fn count_parameters(&self) -> usize {
        self.net.count_parameters()
    }

    /// Id of the node feeding the final sigmoid/softmax.
    pub fn logits_node(&self) -> usize {
        let g = &self.net.graph;
        let out = &g.nodes[g.output()];
        debug_assert!(matches!(out.spec.kind, LayerKind::Sigmoid | LayerKind::Softmax));
        out.inputs[0]
    }

    pub fn forward(&self, batch: &Tensor<T>, mode: Mode<'_>) -> Result<Tensor<T>> {
        match mode {
            Mode::Inference => self.net.predict(batch),
            mode => Ok(self.net.forward_trace(batch, mode, false)?.output().clone()),
        }
    }

    pub fn trace(&self, batch: &Tensor<T>, mode: Mode<'_>) -> Result<Trace<T>> {
        self.net.forward_trace(batch, mode, true)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            net: self.net.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    /// Sum of `(k*k*c_in + 1) * c_out` over every weighted layer.
    fn conv_params(k: usize, cin: usize, cout: usize) -> usize {
        (k * k * cin + 1) * cout
    }

    fn unet_oracle(cin: usize, w: [usize; 5]) -> usize {
        let mut total = conv_params(3, cin, w[0]);
        for l in 1..5 {
            total += conv_params(3, w[l - 1], w[l]);
        }
        let mut below = w[4];
        for l in (0..4).rev() {
            total += conv_params(3, w[l] + below, w[l]);
            below = w[l];
        }
        total
    }

    #[test]
    fn segmentation_parameter_count() {
        let g = build_segmentation_net((64, 64), UpsampleMode::Nearest).unwrap();
        let oracle = unet_oracle(1, SEG_CHANNELS) + conv_params(1, 64, 1);
        assert_eq!(g.count_parameters(), oracle);
        assert_eq!(oracle, 15_670_785);
        // Parameter count does not depend on the spatial size.
        let g32 = build_segmentation_net((32, 48), UpsampleMode::Nearest).unwrap();
        assert_eq!(g32.count_parameters(), oracle);
        assert_eq!(g.conv_channels()[..5], SEG_CHANNELS);
        assert_eq!(g.output_shape(), Shape::new(1, 64, 64));
    }

    #[test]
    fn classifier_parameter_count() {
        let g = build_classifier_net((64, 64)).unwrap();
        let flat = 8 * 8 * 32;
        assert_eq!(g.nodes[g.find("flatten").unwrap()].shape.c, 2048);
        let oracle = conv_params(3, 2, 8)
            + conv_params(3, 8, 16)
            + conv_params(3, 16, 32)
            + (flat + 1) * 128
            + (128 + 1) * 2;
        assert_eq!(g.count_parameters(), oracle);
        assert_eq!(g.conv_channels(), CLS_CHANNELS.to_vec());
    }

    #[test]
    fn baseline_parameter_counts() {
        let (h, w) = (64, 64);
        let fc = build_baseline_fc((h, w)).unwrap();
        assert_eq!(fc.count_parameters(), (2 * h * w + 1) * 128 + 129 * 2);
        let ed = build_baseline_encdec((h, w), UpsampleMode::Nearest).unwrap();
        let oracle = unet_oracle(2, ENCDEC_CHANNELS) + (8 * h * w + 1) * 128 + 129 * 2;
        assert_eq!(ed.count_parameters(), oracle);
    }

    #[test]
    fn dimension_checks() {
        assert!(build_segmentation_net((40, 64), UpsampleMode::Nearest).is_err());
        assert!(build_classifier_net((64, 60)).is_err());
        assert!(build_baseline_encdec((24, 24), UpsampleMode::Nearest).is_err());
        assert!(build_baseline_fc((5, 7)).is_ok());
    }

    #[test]
    fn dry_run_every_architecture() {
        for arch in ArchId::ALL {
            for upsample in [UpsampleMode::Nearest, UpsampleMode::Transposed] {
                let cfg = ArchConfig {
                    arch,
                    height: 16,
                    width: 32,
                    upsample,
                };
                let m = Model::<f32>::new(cfg, 1).unwrap();
                let s = m.input_shape();
                let x = Tensor::from_nchw(1, s.c, s.h, s.w, &vec![0.5; s.numel()]).unwrap();
                let y = m.forward(&x, Mode::Inference).unwrap();
                let mut rng = substream(0, "t", 0);
                let y2 = m.forward(&x, Mode::Train(&mut rng)).unwrap();
                assert_eq!((y.c, y.b), (y2.c, y2.b));
                if arch == ArchId::Segmentation {
                    assert_eq!((y.c, y.h, y.w), (1, 16, 32));
                    assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
                } else {
                    assert_eq!((y.c, y.h, y.w), (2, 1, 1));
                    assert!((y.data[0] + y.data[1] - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let m = Model::<f32>::new(ArchConfig::new(ArchId::Classifier, 16, 16), 1).unwrap();
        let x = Tensor::<f32>::zeros(1, 2, 16, 16);
        let e = m.forward(&x, Mode::Inference).unwrap_err().to_string();
        assert!(e.contains("expected") && e.contains("C=1"), "{e}");
    }
}
