//! Synthetic labelled CT-like phantoms.
//!
//! Each case holds exactly one nodule in a noisy low-density background.
//! Benign nodules are smooth balls from a small diameter range; malignant
//! nodules are larger and their surface radius is modulated per direction
//! ("spiculation"). Case `i` draws only from its own stream derived from
//! `(seed, i)`, so any subset of cases regenerates byte-identically.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotations::{write_annotations, write_labels, Label, MaskVolume, NoduleAnnotation};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::volume::{CtVolume, Grid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub background_mean: f64,
    pub background_noise_sd: f64,
    pub benign_diameter_range: [f64; 2],
    pub malignant_diameter_range: [f64; 2],
    /// Fraction of the radius; malignant cases only.
    pub spiculation_amplitude: f64,
    pub nodule_intensity_mean: f64,
    pub nodule_intensity_sd: f64,
    pub cases_per_class: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 32],
            spacing: [1.0, 1.0, 3.0],
            background_mean: -800.0,
            background_noise_sd: 60.0,
            benign_diameter_range: [4.0, 8.0],
            malignant_diameter_range: [8.0, 16.0],
            spiculation_amplitude: 0.3,
            nodule_intensity_mean: -100.0,
            nodule_intensity_sd: 30.0,
            cases_per_class: 102,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, r) in [
            ("benign_diameter_range", self.benign_diameter_range),
            ("malignant_diameter_range", self.malignant_diameter_range),
        ] {
            if !(r[0] > 0.0) || !(r[0] <= r[1]) || !r[1].is_finite() {
                return bad(format!("{name} must satisfy 0 < lo <= hi, got {r:?}"));
            }
        }
        if !(0.0..1.0).contains(&self.spiculation_amplitude) {
            return bad(format!(
                "spiculation_amplitude must be in [0, 1), got {}",
                self.spiculation_amplitude
            ));
        }
        if self.cases_per_class == 0 {
            return bad("cases_per_class must be >= 1".into());
        }
        if !(self.background_noise_sd >= 0.0) || !(self.nodule_intensity_sd >= 0.0) {
            return bad("noise standard deviations must be >= 0".into());
        }
        let grid = self.grid()?;
        let largest = self.benign_diameter_range[1].max(self.malignant_diameter_range[1]);
        for axis in 0..3 {
            let extent = (grid.dims[axis] - 1) as f64 * grid.spacing[axis];
            if extent < 2.0 * largest {
                return bad(format!(
                    "dims too small: axis {axis} spans {extent} mm, a {largest} mm nodule needs {} mm",
                    2.0 * largest
                ));
            }
        }
        Ok(())
    }

    /// Grid centred on the world origin.
    pub fn grid(&self) -> Result<Grid> {
        let origin = std::array::from_fn(|i| -((self.dims[i].max(1) - 1) as f64) * self.spacing[i] / 2.0);
        Grid::new(self.dims, origin, self.spacing)
    }

    pub fn case_count(&self) -> usize {
        2 * self.cases_per_class
    }

    pub fn series_uid(&self, index: usize) -> String {
        format!("phantom-{}-{index:04}", self.seed)
    }

    /// Even indices are benign, odd indices malignant.
    pub fn label_of(index: usize) -> Label {
        if index % 2 == 0 {
            Label::Benign
        } else {
            Label::Malignant
        }
    }
}

/// One generated case.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub volume: CtVolume,
    pub mask: MaskVolume,
    pub annotation: NoduleAnnotation,
    pub label: Label,
}

/// Direction-dependent radius scale in `[1 - a, 1 + a]`.
struct Surface {
    amplitude: f64,
    lobes: Vec<([f64; 3], f64, f64, f64)>,
}

impl Surface {
    fn smooth() -> Self {
        Surface {
            amplitude: 0.0,
            lobes: Vec::new(),
        }
    }

    fn spiculated(amplitude: f64, rng: &mut Stream) -> Self {
        let lobes = (0..8)
            .map(|_| {
                let dir: [f64; 3] = UnitSphere.sample(rng);
                let freq = f64::from(rng.gen_range(3u32..=8));
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let weight = rng.gen_range(0.5..1.0);
                (dir, freq, phase, weight)
            })
            .collect();
        Surface { amplitude, lobes }
    }

    fn scale(&self, u: [f64; 3]) -> f64 {
        if self.amplitude == 0.0 || self.lobes.is_empty() {
            return 1.0;
        }
        let (mut acc, mut total) = (0.0, 0.0);
        for (d, f, p, w) in &self.lobes {
            let proj = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
            acc += w * (f * std::f64::consts::PI * proj + p).cos();
            total += w;
        }
        1.0 + self.amplitude * (acc / total)
    }
}

fn to_hu(v: f64) -> i16 {
    v.round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
}

/// Generate case `index` of the dataset described by `spec`.
pub fn generate_phantom_volume(spec: &PhantomSpec, index: usize) -> Result<PhantomCase> {
    spec.validate()?;
    let grid = spec.grid()?;
    let label = PhantomSpec::label_of(index);
    let mut rng = substream(spec.seed, "phantom-case", index as u64);

    let range = match label {
        Label::Benign => spec.benign_diameter_range,
        Label::Malignant => spec.malignant_diameter_range,
    };
    let diameter = if range[0] < range[1] {
        rng.gen_range(range[0]..=range[1])
    } else {
        range[0]
    };
    let center: [f64; 3] = std::array::from_fn(|i| {
        let extent = (grid.dims[i] - 1) as f64 * grid.spacing[i];
        let (lo, hi) = (diameter, extent - diameter);
        grid.origin[i] + if lo < hi { rng.gen_range(lo..=hi) } else { lo }
    });
    let surface = match label {
        Label::Malignant if spec.spiculation_amplitude > 0.0 => {
            Surface::spiculated(spec.spiculation_amplitude, &mut rng)
        }
        _ => Surface::smooth(),
    };

    let radius = diameter / 2.0;
    let mut mask = MaskVolume::zeros(grid);
    for z in 0..grid.dims[2] {
        for y in 0..grid.dims[1] {
            for x in 0..grid.dims[0] {
                let p = grid.center_of(x, y, z);
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let dist2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let inside = if dist2 == 0.0 {
                    true
                } else if surface.amplitude == 0.0 {
                    dist2 <= radius * radius
                } else {
                    let dist = dist2.sqrt();
                    let u = [d[0] / dist, d[1] / dist, d[2] / dist];
                    dist <= radius * surface.scale(u)
                };
                if inside {
                    mask.voxels[grid.index(x, y, z)] = 1;
                }
            }
        }
    }

    let background = Normal::new(spec.background_mean, spec.background_noise_sd)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let nodule = Normal::new(spec.nodule_intensity_mean, spec.nodule_intensity_sd)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let voxels = mask
        .voxels
        .iter()
        .map(|&m| {
            if m == 1 {
                to_hu(nodule.sample(&mut rng))
            } else {
                to_hu(background.sample(&mut rng))
            }
        })
        .collect();

    Ok(PhantomCase {
        volume: CtVolume::new(grid, voxels)?,
        mask,
        annotation: NoduleAnnotation::new(spec.series_uid(index), center, diameter)?,
        label,
    })
}

/// Generate every case in index order. `workers > 1` splits the cases over
/// threads; output is identical either way.
pub fn generate_cases(spec: &PhantomSpec, workers: usize) -> Result<Vec<PhantomCase>> {
    spec.validate()?;
    let n = spec.case_count();
    let workers = workers.clamp(1, n);
    if workers == 1 {
        return (0..n).map(|i| generate_phantom_volume(spec, i)).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<PhantomCase>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + chunk).min(n))
                        .map(|i| generate_phantom_volume(spec, i))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("phantom worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,sha256\n");
        for e in &self.entries {
            s.push_str(&format!("{},{}\n", e.path, e.sha256));
        }
        s
    }

    /// Digest of the manifest text; changes if any listed file changes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }
}

/// Standard file layout of a generated dataset.
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }
    pub fn volume(&self, uid: &str) -> PathBuf {
        self.root.join("volumes").join(format!("{uid}.mhd"))
    }
    pub fn mask(&self, uid: &str) -> PathBuf {
        self.root.join("masks").join(format!("{uid}.mhd"))
    }
    pub fn annotations(&self) -> PathBuf {
        self.root.join("annotations.csv")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.csv")
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write all cases, the annotation table, the label table and a manifest
/// of content digests under `out_dir`.
pub fn generate_phantom_dataset(spec: &PhantomSpec, out_dir: impl AsRef<Path>, workers: usize) -> Result<Manifest> {
    let layout = DatasetLayout::new(out_dir.as_ref());
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let cases = generate_cases(spec, workers)?;

    let mut written: Vec<PathBuf> = Vec::new();
    for case in &cases {
        let uid = &case.annotation.series_uid;
        case.volume.save(layout.volume(uid))?;
        case.mask.save(layout.mask(uid))?;
        for p in [layout.volume(uid), layout.mask(uid)] {
            written.push(p.with_extension("raw"));
            written.push(p);
        }
    }
    let findings: Vec<NoduleAnnotation> = cases.iter().map(|c| c.annotation.clone()).collect();
    write_annotations(layout.annotations(), &findings)?;
    write_labels(
        layout.labels(),
        cases.iter().map(|c| (c.annotation.series_uid.as_str(), c.label)),
    )?;
    written.push(layout.annotations());
    written.push(layout.labels());

    let mut entries = written
        .iter()
        .map(|p| {
            let rel = p
                .strip_prefix(&layout.root)
                .expect("written under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            Ok(ManifestEntry {
                path: rel,
                sha256: file_digest(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { entries };
    let mp = layout.manifest();
    fs::write(&mp, manifest.to_csv()).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{parse_annotations, parse_labels, rasterize_mask, MaskShape};

    fn small() -> PhantomSpec {
        PhantomSpec {
            dims: [40, 40, 16],
            cases_per_class: 3,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_case() {
        let s = small();
        let a = generate_phantom_volume(&s, 3).unwrap();
        let b = generate_phantom_volume(&s, 3).unwrap();
        assert_eq!(a, b);
        let other = generate_phantom_volume(&PhantomSpec { seed: 6, ..s.clone() }, 3).unwrap();
        assert_ne!(a.volume, other.volume);
    }

    #[test]
    fn nodule_support_is_bounded_and_placed_inside() {
        let s = small();
        for i in 0..s.case_count() {
            let c = generate_phantom_volume(&s, i).unwrap();
            let g = c.mask.grid;
            let r = c.annotation.radius() * (1.0 + s.spiculation_amplitude);
            let mut n = 0;
            for z in 0..g.dims[2] {
                for y in 0..g.dims[1] {
                    for x in 0..g.dims[0] {
                        if c.mask.voxels[g.index(x, y, z)] == 1 {
                            let p = g.center_of(x, y, z);
                            let d: f64 = (0..3).map(|k| (p[k] - c.annotation.center_world[k]).powi(2)).sum();
                            assert!(d.sqrt() <= r + 1e-9);
                            n += 1;
                        }
                    }
                }
            }
            assert!(n > 0);
            for k in 0..3 {
                let lo = g.origin[k] + c.annotation.diameter_mm;
                let hi = g.origin[k] + (g.dims[k] - 1) as f64 * g.spacing[k] - c.annotation.diameter_mm;
                assert!((lo..=hi).contains(&c.annotation.center_world[k]));
            }
            let range = match c.label {
                Label::Benign => s.benign_diameter_range,
                Label::Malignant => s.malignant_diameter_range,
            };
            assert!((range[0]..=range[1]).contains(&c.annotation.diameter_mm));
        }
    }

    #[test]
    fn benign_masks_are_rasterized_annotations() {
        let s = small();
        for i in (0..s.case_count()).step_by(2) {
            let c = generate_phantom_volume(&s, i).unwrap();
            let r = rasterize_mask(&c.volume.grid, &[c.annotation.clone()], MaskShape::Ball);
            assert_eq!(r, c.mask);
        }
    }

    #[test]
    fn without_spiculation_classes_share_shape_model() {
        let s = PhantomSpec {
            spiculation_amplitude: 0.0,
            benign_diameter_range: [6.0, 10.0],
            malignant_diameter_range: [6.0, 10.0],
            ..small()
        };
        for i in 0..s.case_count() {
            let c = generate_phantom_volume(&s, i).unwrap();
            let r = rasterize_mask(&c.volume.grid, &[c.annotation.clone()], MaskShape::Ball);
            assert_eq!(r, c.mask, "case {i} ({})", c.label);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(PhantomSpec { dims: [16, 16, 4], ..small() }.validate().is_err());
        assert!(PhantomSpec { spiculation_amplitude: 1.0, ..small() }.validate().is_err());
        assert!(PhantomSpec { cases_per_class: 0, ..small() }.validate().is_err());
        assert!(PhantomSpec { benign_diameter_range: [0.0, 3.0], ..small() }.validate().is_err());
        assert!(PhantomSpec { benign_diameter_range: [5.0, 3.0], ..small() }.validate().is_err());
        assert!(generate_phantom_volume(&PhantomSpec { dims: [16, 16, 4], ..small() }, 0).is_err());
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let s = small();
        assert_eq!(generate_cases(&s, 1).unwrap(), generate_cases(&s, 4).unwrap());
    }

    #[test]
    fn dataset_on_disk() {
        let s = PhantomSpec {
            cases_per_class: 1,
            ..small()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_phantom_dataset(&s, d1.path(), 1).unwrap();
        let m2 = generate_phantom_dataset(&s, d2.path(), 2).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.digest(), m2.digest());
        // 2 cases x (volume + mask) x (header + raw) + 2 tables
        assert_eq!(m1.entries.len(), 10);
        let layout = DatasetLayout::new(d1.path());
        assert_eq!(parse_annotations(layout.annotations()).unwrap().len(), 2);
        let labels = parse_labels(layout.labels()).unwrap();
        assert_eq!(labels.values().filter(|l| l.is_malignant()).count(), 1);
        let v = CtVolume::load(layout.volume(&s.series_uid(0))).unwrap();
        assert_eq!(v, generate_phantom_volume(&s, 0).unwrap().volume);
    }
}
