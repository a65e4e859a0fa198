//! Nodule annotation tables, ground-truth mask rasterization and training
//! slice selection.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{read_volume, write_volume, ElementType, Grid, NormalizedVolume};

pub const ANNOTATION_HEADER: [&str; 5] = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"];
pub const LABEL_HEADER: [&str; 2] = ["seriesuid", "label"];

/// One finding: a nodule centre in world millimetres and its diameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub series_uid: String,
    pub center_world: [f64; 3],
    pub diameter_mm: f64,
}

impl NoduleAnnotation {
    pub fn new(series_uid: impl Into<String>, center_world: [f64; 3], diameter_mm: f64) -> Result<Self> {
        let series_uid = series_uid.into();
        if series_uid.is_empty() {
            return Err(Error::InvalidArgument("empty series uid".into()));
        }
        if !(diameter_mm > 0.0) || !diameter_mm.is_finite() {
            return Err(Error::InvalidArgument(format!("non-positive diameter {diameter_mm}")));
        }
        Ok(NoduleAnnotation {
            series_uid,
            center_world,
            diameter_mm,
        })
    }

    pub fn radius(&self) -> f64 {
        self.diameter_mm / 2.0
    }
}

/// Case-level ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn is_malignant(self) -> bool {
        self == Label::Malignant
    }

    /// Index into a `(benign, malignant)` one-hot vector.
    pub fn class_index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "benign" => Ok(Label::Benign),
            "malignant" => Ok(Label::Malignant),
            other => Err(Error::InvalidArgument(format!("unknown label `{other}`"))),
        }
    }
}

fn table_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Table {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn open_table(path: &Path, expected: &[&str]) -> Result<(csv::Reader<fs::File>, Vec<usize>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| table_err(path, 1, e.to_string()))?
        .clone();
    let columns = expected
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| table_err(path, 1, format!("missing column `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rdr, columns))
}

/// Parse the annotation table, one finding per data line, in file order.
pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<NoduleAnnotation>> {
    let path = path.as_ref();
    let (mut rdr, cols) = open_table(path, &ANNOTATION_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| table_err(path, line, e.to_string()))?;
        let field = |c: usize| {
            rec.get(cols[c])
                .ok_or_else(|| table_err(path, line, format!("missing column `{}`", ANNOTATION_HEADER[c])))
        };
        let num = |c: usize| -> Result<f64> {
            let s = field(c)?;
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| table_err(path, line, format!("non-numeric {} `{s}`", ANNOTATION_HEADER[c])))
        };
        let uid = field(0)?;
        if uid.is_empty() {
            return Err(table_err(path, line, "empty seriesuid"));
        }
        let center = [num(1)?, num(2)?, num(3)?];
        let diameter = num(4)?;
        if diameter <= 0.0 {
            return Err(table_err(path, line, format!("non-positive diameter {diameter}")));
        }
        out.push(NoduleAnnotation {
            series_uid: uid.to_string(),
            center_world: center,
            diameter_mm: diameter,
        });
    }
    Ok(out)
}

pub fn write_annotations(path: impl AsRef<Path>, findings: &[NoduleAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let mut s = ANNOTATION_HEADER.join(",");
    s.push('\n');
    for f in findings {
        let [x, y, z] = f.center_world;
        s.push_str(&format!("{},{x},{y},{z},{}\n", f.series_uid, f.diameter_mm));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Read a `seriesuid,label` table.
pub fn parse_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, Label>> {
    let path = path.as_ref();
    let (mut rdr, cols) = open_table(path, &LABEL_HEADER)?;
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| table_err(path, line, e.to_string()))?;
        let uid = rec.get(cols[0]).unwrap_or_default();
        let label = rec
            .get(cols[1])
            .unwrap_or_default()
            .parse::<Label>()
            .map_err(|e| table_err(path, line, e.to_string()))?;
        if uid.is_empty() {
            return Err(table_err(path, line, "empty seriesuid"));
        }
        if out.insert(uid.to_string(), label).is_some() {
            return Err(table_err(path, line, format!("duplicate seriesuid `{uid}`")));
        }
    }
    Ok(out)
}

pub fn write_labels<'a>(path: impl AsRef<Path>, labels: impl IntoIterator<Item = (&'a str, Label)>) -> Result<()> {
    let path = path.as_ref();
    let mut s = LABEL_HEADER.join(",");
    s.push('\n');
    for (uid, label) in labels {
        s.push_str(&format!("{uid},{label}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Group findings by series, keeping file order within each series.
pub fn group_by_series(findings: &[NoduleAnnotation]) -> BTreeMap<&str, Vec<&NoduleAnnotation>> {
    let mut map: BTreeMap<&str, Vec<&NoduleAnnotation>> = BTreeMap::new();
    for f in findings {
        map.entry(f.series_uid.as_str()).or_default().push(f);
    }
    map
}

/// Binary mask on the grid of a CT volume.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub grid: Grid,
    pub voxels: Vec<u8>,
}

impl MaskVolume {
    pub fn zeros(grid: Grid) -> Self {
        MaskVolume {
            voxels: vec![0; grid.len()],
            grid,
        }
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.grid.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, bytes) = read_volume(path)?;
        if header.element_type != ElementType::UInt8 {
            return Err(Error::Header {
                path: path.to_path_buf(),
                line: 0,
                msg: "mask volumes must declare ElementType = uint8".into(),
            });
        }
        if let Some(bad) = bytes.iter().find(|&&b| b > 1) {
            return Err(Error::Header {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("mask value {bad} is not 0 or 1"),
            });
        }
        Ok(MaskVolume {
            grid: header.grid,
            voxels: bytes,
        })
    }

    pub fn save(&self, header_path: impl AsRef<Path>) -> Result<()> {
        write_volume(header_path.as_ref(), &self.grid, ElementType::UInt8, &self.voxels)
    }
}

/// How a centre + diameter finding is turned into voxels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskShape {
    /// Closed 3D ball in world space.
    #[default]
    Ball,
    /// Full-diameter in-plane disk on every slice whose centre lies within
    /// the radius along z.
    Disk,
}

impl fmt::Display for MaskShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskShape::Ball => "ball",
            MaskShape::Disk => "disk",
        })
    }
}

impl FromStr for MaskShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ball" => Ok(MaskShape::Ball),
            "disk" => Ok(MaskShape::Disk),
            other => Err(Error::InvalidArgument(format!("unknown mask shape `{other}`"))),
        }
    }
}

/// Voxel index range `[lo, hi]` along one axis that can contain world
/// coordinates within `r` of `c`. Widened by one voxel; the exact test is
/// done on distances.
fn axis_range(grid: &Grid, axis: usize, c: f64, r: f64) -> Option<(usize, usize)> {
    let lo = ((c - r - grid.origin[axis]) / grid.spacing[axis]).floor() - 1.0;
    let hi = ((c + r - grid.origin[axis]) / grid.spacing[axis]).ceil() + 1.0;
    let n = grid.dims[axis] as f64;
    if hi < 0.0 || lo > n - 1.0 {
        return None;
    }
    Some((lo.max(0.0) as usize, hi.min(n - 1.0) as usize))
}

/// Mark every voxel whose centre lies within a finding (union over findings).
pub fn rasterize_mask(grid: &Grid, findings: &[NoduleAnnotation], shape: MaskShape) -> MaskVolume {
    let mut mask = MaskVolume::zeros(*grid);
    for f in findings {
        paint_finding(&mut mask, f, shape);
    }
    mask
}

fn paint_finding(mask: &mut MaskVolume, f: &NoduleAnnotation, shape: MaskShape) {
    let grid = mask.grid;
    let r = f.radius();
    let r2 = r * r;
    let c = f.center_world;
    let (Some((x0, x1)), Some((y0, y1)), Some((z0, z1))) = (
        axis_range(&grid, 0, c[0], r),
        axis_range(&grid, 1, c[1], r),
        axis_range(&grid, 2, c[2], r),
    ) else {
        return;
    };
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = grid.center_of(x, y, z);
                let (dx, dy, dz) = (p[0] - c[0], p[1] - c[1], p[2] - c[2]);
                let inside = match shape {
                    MaskShape::Ball => dx * dx + dy * dy + dz * dz <= r2,
                    MaskShape::Disk => dx * dx + dy * dy <= r2 && dz.abs() <= r,
                };
                if inside {
                    mask.voxels[grid.index(x, y, z)] = 1;
                }
            }
        }
    }
}

/// Slices spanned by the mask, widened by `pad` on each side and clamped to
/// the volume. Empty when the mask has no set voxel.
pub fn select_slices(mask: &MaskVolume, pad: usize) -> Vec<usize> {
    let nz = mask.grid.dims[2];
    let occupied: Vec<usize> = (0..nz).filter(|&z| mask.slice(z).iter().any(|&v| v != 0)).collect();
    match (occupied.first(), occupied.last()) {
        (Some(&lo), Some(&hi)) => (lo.saturating_sub(pad)..=(hi + pad).min(nz - 1)).collect(),
        _ => Vec::new(),
    }
}

/// One 2D training record.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub width: usize,
    pub height: usize,
    /// Row-major, x fastest, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub mask: Option<Vec<u8>>,
    pub series_uid: String,
    pub slice_index: usize,
    pub case_label: Option<Label>,
}

pub fn extract_slice_samples(
    series_uid: &str,
    norm: &NormalizedVolume,
    mask: Option<&MaskVolume>,
    indices: &[usize],
    label: Option<Label>,
) -> Result<Vec<SliceSample>> {
    if let Some(m) = mask {
        if m.grid.dims != norm.grid.dims {
            return Err(Error::shape(
                format!("{:?}", norm.grid.dims),
                format!("{:?}", m.grid.dims),
            ));
        }
    }
    let [nx, ny, nz] = norm.grid.dims;
    indices
        .iter()
        .map(|&z| {
            if z >= nz {
                return Err(Error::InvalidArgument(format!(
                    "slice index {z} outside 0..{nz}"
                )));
            }
            Ok(SliceSample {
                width: nx,
                height: ny,
                image: norm.slice(z).to_vec(),
                mask: mask.map(|m| m.slice(z).to_vec()),
                series_uid: series_uid.to_string(),
                slice_index: z,
                case_label: label,
            })
        })
        .collect()
}
