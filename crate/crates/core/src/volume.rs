//! CT volumes on an axis-aligned grid, the text-header + raw volume format,
//! and world/voxel coordinate conversion.
//!
//! The header is a `Key = Value` text file naming a companion raw file:
//!
//! ```text
//! DimSize = 64 64 32
//! ElementSpacing = 1 1 3
//! Offset = 0 0 0
//! ElementDataFile = case.raw
//! ```
//!
//! Voxels are stored little-endian, x fastest, then y, then z. CT volumes are
//! signed 16-bit; mask volumes add `ElementType = uint8`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned voxel grid geometry. Distances are in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], origin: [f64; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite origin {origin:?}")));
        }
        Ok(Grid {
            dims,
            origin,
            spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels per z-slice.
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Continuous voxel coordinate of a world point. Not rounded or clamped.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (p[i] - self.origin[i]) / self.spacing[i])
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| self.origin[i] + v[i] * self.spacing[i])
    }

    /// World position of a voxel centre.
    #[inline]
    pub fn center_of(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.voxel_to_world([x as f64, y as f64, z as f64])
    }
}

/// A CT volume in Hounsfield-like units.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    pub grid: Grid,
    pub voxels: Vec<i16>,
}

impl CtVolume {
    pub fn new(grid: Grid, voxels: Vec<i16>) -> Result<Self> {
        if voxels.len() != grid.len() {
            return Err(Error::shape(grid.len(), voxels.len()));
        }
        Ok(CtVolume { grid, voxels })
    }

    pub fn filled(grid: Grid, value: i16) -> Self {
        CtVolume {
            voxels: vec![value; grid.len()],
            grid,
        }
    }

    pub fn slice(&self, z: usize) -> &[i16] {
        let n = self.grid.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        self.grid.world_to_voxel(p)
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        self.grid.voxel_to_world(v)
    }

    /// Map intensities through `window` into `[0, 1]`.
    pub fn normalize(&self, window: HuWindow) -> NormalizedVolume {
        let scale = 1.0 / (window.hi - window.lo);
        let voxels = self
            .voxels
            .iter()
            .map(|&v| ((f64::from(v) - window.lo) * scale).clamp(0.0, 1.0) as f32)
            .collect();
        NormalizedVolume {
            grid: self.grid,
            voxels,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_volume(path)
    }

    pub fn save(&self, header_path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_volume(header_path.as_ref(), &self.grid, ElementType::Int16, &bytes)
    }
}

/// Intensity window mapped onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl HuWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "intensity window needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(HuWindow { lo, hi })
    }
}

impl Default for HuWindow {
    /// Lung window.
    fn default() -> Self {
        HuWindow {
            lo: -1000.0,
            hi: 400.0,
        }
    }
}

/// A volume with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedVolume {
    pub grid: Grid,
    pub voxels: Vec<f32>,
}

impl NormalizedVolume {
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.grid.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }
}

pub fn normalize_hu(volume: &CtVolume, lo: f64, hi: f64) -> Result<NormalizedVolume> {
    Ok(volume.normalize(HuWindow::new(lo, hi)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Int16,
    UInt8,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::Int16 => 2,
            ElementType::UInt8 => 1,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ElementType::Int16 => "int16",
            ElementType::UInt8 => "uint8",
        }
    }
}

/// Parsed header.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub grid: Grid,
    pub element_type: ElementType,
    pub data_file: PathBuf,
}

fn parse_triple<T: std::str::FromStr>(value: &str) -> Option<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|s| s.parse().ok())
        .collect::<Option<_>>()?;
    parts.try_into().ok()
}

pub fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut dims = None;
    let mut spacing = None;
    let mut offset = None;
    let mut data_file = None;
    let mut element_type = None;
    let err = |line: usize, msg: String| Error::Header {
        path: path.to_path_buf(),
        line,
        msg,
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected `Key = Value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let dup = |seen: bool| {
            if seen {
                Err(err(line_no, format!("duplicate key `{key}`")))
            } else {
                Ok(())
            }
        };
        match key {
            "DimSize" => {
                dup(dims.is_some())?;
                dims = Some(
                    parse_triple::<usize>(value)
                        .ok_or_else(|| err(line_no, format!("bad DimSize `{value}`")))?,
                );
            }
            "ElementSpacing" => {
                dup(spacing.is_some())?;
                spacing = Some(
                    parse_triple::<f64>(value)
                        .ok_or_else(|| err(line_no, format!("bad ElementSpacing `{value}`")))?,
                );
            }
            "Offset" => {
                dup(offset.is_some())?;
                offset = Some(
                    parse_triple::<f64>(value)
                        .ok_or_else(|| err(line_no, format!("bad Offset `{value}`")))?,
                );
            }
            "ElementDataFile" => {
                dup(data_file.is_some())?;
                if value.is_empty() {
                    return Err(err(line_no, "empty ElementDataFile".into()));
                }
                data_file = Some(PathBuf::from(value));
            }
            "ElementType" => {
                dup(element_type.is_some())?;
                element_type = Some(match value {
                    "int16" => ElementType::Int16,
                    "uint8" => ElementType::UInt8,
                    other => return Err(err(line_no, format!("unsupported ElementType `{other}`"))),
                });
            }
            other => return Err(err(line_no, format!("unknown key `{other}`"))),
        }
    }

    let missing = |k: &str| err(0, format!("missing key `{k}`"));
    let dims = dims.ok_or_else(|| missing("DimSize"))?;
    let spacing = spacing.ok_or_else(|| missing("ElementSpacing"))?;
    let offset = offset.ok_or_else(|| missing("Offset"))?;
    let data_file = data_file.ok_or_else(|| missing("ElementDataFile"))?;
    let grid = Grid::new(dims, offset, spacing).map_err(|e| err(0, e.to_string()))?;
    Ok(Header {
        grid,
        element_type: element_type.unwrap_or(ElementType::Int16),
        data_file,
    })
}

pub fn format_header(grid: &Grid, element_type: ElementType, data_file: &str) -> String {
    let [nx, ny, nz] = grid.dims;
    let [sx, sy, sz] = grid.spacing;
    let [ox, oy, oz] = grid.origin;
    let mut s = format!(
        "DimSize = {nx} {ny} {nz}\nElementSpacing = {sx} {sy} {sz}\nOffset = {ox} {oy} {oz}\n"
    );
    if element_type != ElementType::Int16 {
        s.push_str(&format!("ElementType = {}\n", element_type.as_str()));
    }
    s.push_str(&format!("ElementDataFile = {data_file}\n"));
    s
}

/// Read a header and its raw payload, checking the payload size.
pub fn read_volume(path: &Path) -> Result<(Header, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &text)?;
    let raw_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.grid.len() * header.element_type.size();
    if bytes.len() != expected {
        return Err(Error::RawSizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((header, bytes))
}

/// Write `<stem>.raw` next to the header and the header itself.
pub fn write_volume(header_path: &Path, grid: &Grid, element_type: ElementType, bytes: &[u8]) -> Result<()> {
    let raw_path = header_path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad header path {}", header_path.display())))?;
    if let Some(dir) = header_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(header_path, format_header(grid, element_type, raw_name))
        .map_err(|e| Error::io(header_path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    let path = path.as_ref();
    let (header, bytes) = read_volume(path)?;
    if header.element_type != ElementType::Int16 {
        return Err(Error::Header {
            path: path.to_path_buf(),
            line: 0,
            msg: "CT volumes must be int16".into(),
        });
    }
    let voxels = bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    CtVolume::new(header.grid, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3], spacing: [f64; 3]) -> Grid {
        Grid::new(dims, [0.0; 3], spacing).unwrap()
    }

    #[test]
    fn loads_header_and_raw() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("a.mhd"),
            "DimSize = 4 4 2\nElementSpacing = 0.98 0.98 3.0\nOffset = -1.5 2 10\nElementDataFile = a.raw\n",
        )
        .unwrap();
        let bytes: Vec<u8> = (0..32i16).flat_map(|v| (v - 16).to_le_bytes()).collect();
        assert_eq!(bytes.len(), 64);
        fs::write(dir.path().join("a.raw"), &bytes).unwrap();

        let v = load_volume(dir.path().join("a.mhd")).unwrap();
        assert_eq!(v.voxels.len(), 32);
        assert_eq!(v.grid.spacing, [0.98, 0.98, 3.0]);
        assert_eq!(v.grid.origin, [-1.5, 2.0, 10.0]);
        assert_eq!(v.voxels[0], -16);
        assert_eq!(v.voxels[v.grid.index(1, 2, 1)], (1 + 4 * (2 + 4)) as i16 - 16);
    }

    #[test]
    fn short_raw_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("a.mhd"),
            "DimSize = 4 4 2\nElementSpacing = 1 1 1\nOffset = 0 0 0\nElementDataFile = a.raw\n",
        )
        .unwrap();
        fs::write(dir.path().join("a.raw"), vec![0u8; 63]).unwrap();
        let err = load_volume(dir.path().join("a.mhd")).unwrap_err();
        assert!(err.to_string().contains("raw size mismatch"), "{err}");
    }

    #[test]
    fn header_errors() {
        let p = Path::new("x.mhd");
        let base = "DimSize = 4 4 2\nElementSpacing = 1 1 1\nOffset = 0 0 0\nElementDataFile = a.raw\n";
        assert!(parse_header(p, base).is_ok());
        assert!(parse_header(p, &format!("{base}Bogus = 1\n")).is_err());
        assert!(parse_header(p, &base.replace("4 4 2", "4 4")).is_err());
        assert!(parse_header(p, &base.replace("1 1 1", "1 0 1")).is_err());
        assert!(parse_header(p, &base.replace("Offset = 0 0 0\n", "")).is_err());
        assert!(parse_header(p, "DimSize 4 4 2\n").is_err());
        assert!(matches!(
            load_volume("/nonexistent/nothing.mhd"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn save_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([3, 2, 2], [-10.25, 0.5, 7.0], [0.98, 0.98, 3.0]).unwrap();
        let v = CtVolume::new(g, (0..12).map(|i| i * 300 - 2000).collect()).unwrap();
        let p = dir.path().join("sub/v.mhd");
        v.save(&p).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
        assert_eq!(load_volume(&p).unwrap(), load_volume(&p).unwrap());
    }

    #[test]
    fn coordinate_examples() {
        let g = grid([16, 16, 16], [0.98, 0.98, 3.0]);
        assert_eq!(g.world_to_voxel(g.origin), [0.0; 3]);
        let v = g.world_to_voxel([9.8, 9.8, 30.0]);
        for c in v {
            assert!((c - 10.0).abs() < 1e-12);
        }
        assert_eq!(g.voxel_to_world([0.0; 3]), g.origin);
        assert_eq!(g.voxel_to_world([1.0; 3]), [0.98, 0.98, 3.0]);
    }

    #[test]
    fn normalize_endpoints() {
        let g = grid([4, 1, 1], [1.0; 3]);
        let v = CtVolume::new(g, vec![-1000, 400, -300, 2000]).unwrap();
        let n = normalize_hu(&v, -1000.0, 400.0).unwrap();
        assert_eq!(n.voxels, vec![0.0, 1.0, 0.5, 1.0]);
        assert!(normalize_hu(&v, 5.0, 5.0).is_err());
        assert!(normalize_hu(&v, 6.0, 5.0).is_err());
    }

    proptest! {
        #[test]
        fn world_voxel_round_trip(
            origin in prop::array::uniform3(-500.0f64..500.0),
            spacing in prop::array::uniform3(0.1f64..5.0),
            p in prop::array::uniform3(-1000.0f64..1000.0),
        ) {
            let g = Grid::new([8, 8, 8], origin, spacing).unwrap();
            let back = g.voxel_to_world(g.world_to_voxel(p));
            for i in 0..3 {
                prop_assert!((back[i] - p[i]).abs() <= 1e-9 * p[i].abs().max(1.0));
            }
        }

        #[test]
        fn normalized_values_are_in_unit_range_and_monotone(
            values in prop::collection::vec(any::<i16>(), 1..200),
            lo in -2000.0f64..0.0,
            width in 1.0f64..3000.0,
        ) {
            let g = grid([values.len(), 1, 1], [1.0; 3]);
            let v = CtVolume::new(g, values.clone()).unwrap();
            let n = normalize_hu(&v, lo, lo + width).unwrap();
            for &x in &n.voxels {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            let mut pairs: Vec<(i16, f32)> = values.into_iter().zip(n.voxels).collect();
            pairs.sort_by_key(|p| p.0);
            for w in pairs.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
        }
    }
}
