//! Directory container: `meta.json` plus one headerless little-endian tensor
//! file per field (`<name>.f32` for grids, `m_<name>.u8` for masks).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{FieldGrid, ValidityMask};
use crate::camera::{CameraIntrinsics, RelativePose};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";

/// How the 3-channel `sf` tensor is to be read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SfKind {
    /// Camera-space 3D offsets.
    #[default]
    Cso,
    /// Optical flow (u, v) plus depth change.
    Ddof,
    /// End points in the camera-2 frame.
    Ep,
}

impl std::str::FromStr for SfKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cso" => Ok(SfKind::Cso),
            "ddof" => Ok(SfKind::Ddof),
            "ep" => Ok(SfKind::Ep),
            other => Err(Error::Config(format!("unknown scene flow kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for SfKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SfKind::Cso => "cso",
            SfKind::Ddof => "ddof",
            SfKind::Ep => "ep",
        })
    }
}

/// One two-frame sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub d1: FieldGrid,
    pub m_d1: ValidityMask,
    pub d2: FieldGrid,
    pub m_d2: ValidityMask,
    pub flow_fwd: FieldGrid,
    pub m_flow_fwd: ValidityMask,
    pub flow_bwd: Option<(FieldGrid, ValidityMask)>,
    pub sf: Option<(FieldGrid, ValidityMask)>,
    pub sf_kind: SfKind,
    pub intrinsics: CameraIntrinsics,
    pub pose_1_to_2: RelativePose,
    /// True when depth (and therefore scene flow) is in meters.
    pub metric: bool,
}

impl SampleRecord {
    pub fn height(&self) -> usize {
        self.d1.height()
    }

    pub fn width(&self) -> usize {
        self.d1.width()
    }

    /// Checks shapes, channel counts and finiteness, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut grids: Vec<(&str, &FieldGrid, usize)> = vec![
            ("d1", &self.d1, 1),
            ("d2", &self.d2, 1),
            ("flow_fwd", &self.flow_fwd, 2),
        ];
        let mut masks: Vec<(&str, &ValidityMask)> = vec![
            ("m_d1", &self.m_d1),
            ("m_d2", &self.m_d2),
            ("m_flow_fwd", &self.m_flow_fwd),
        ];
        if let Some((g, m)) = &self.flow_bwd {
            grids.push(("flow_bwd", g, 2));
            masks.push(("m_flow_bwd", m));
        }
        if let Some((g, m)) = &self.sf {
            grids.push(("sf", g, 3));
            masks.push(("m_sf", m));
        }
        for (name, grid, channels) in grids {
            grid.check_shape(name, h, w, channels)?;
            grid.check_finite(name)?;
        }
        for (name, mask) in masks {
            mask.check_shape(name, h, w)?;
        }
        self.intrinsics.validate()?;
        for (name, depth, mask) in [("d1", &self.d1, &self.m_d1), ("d2", &self.d2, &self.m_d2)] {
            if let Some(i) = (0..h * w).find(|&i| mask.is_valid(i) && depth.data()[i] < 0.0) {
                return Err(Error::invariant(name, format!("negative depth at valid pixel {i}")));
            }
        }
        Ok(())
    }

    /// Names of the tensors present, in container order.
    pub fn field_names(&self) -> Vec<String> {
        let mut names = vec!["d1", "m_d1", "d2", "m_d2", "flow_fwd", "m_flow_fwd"];
        if self.flow_bwd.is_some() {
            names.extend(["flow_bwd", "m_flow_bwd"]);
        }
        if self.sf.is_some() {
            names.extend(["sf", "m_sf"]);
        }
        names.into_iter().map(String::from).collect()
    }
}

/// A float that serializes as a shortest round-trip decimal string and
/// accepts either a string or a JSON number on input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decimal(pub f64);

impl Serialize for Decimal {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}", self.0))
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Str(String),
            Num(f64),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(Decimal(x)),
            Repr::Str(s) => s
                .trim()
                .parse::<f64>()
                .map(Decimal)
                .map_err(|e| serde::de::Error::custom(format!("bad decimal `{s}`: {e}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub height: usize,
    pub width: usize,
    /// 3x3 row-major.
    pub intrinsics: Vec<Decimal>,
    /// 4x4 row-major homogeneous.
    pub pose_1_to_2: Vec<Decimal>,
    pub metric: bool,
    pub fields: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sf_kind: Option<SfKind>,
}

impl Meta {
    fn from_record(s: &SampleRecord) -> Self {
        let k = s.intrinsics.matrix();
        let p = s.pose_1_to_2.matrix();
        Meta {
            height: s.height(),
            width: s.width(),
            intrinsics: row_major(k.transpose().as_slice()),
            pose_1_to_2: row_major(p.transpose().as_slice()),
            metric: s.metric,
            fields: s.field_names(),
            sf_kind: s.sf.as_ref().map(|_| s.sf_kind),
        }
    }

    pub fn has(&self, field: &str) -> bool {
        self.fields.iter().any(|f| f == field)
    }

    pub fn camera(&self, path: &Path) -> Result<(CameraIntrinsics, RelativePose)> {
        let bad = |message: String| Error::Meta {
            path: path.to_path_buf(),
            message,
        };
        if self.intrinsics.len() != 9 {
            return Err(bad(format!(
                "intrinsics needs 9 numbers, got {}",
                self.intrinsics.len()
            )));
        }
        if self.pose_1_to_2.len() != 16 {
            return Err(bad(format!(
                "pose_1_to_2 needs 16 numbers, got {}",
                self.pose_1_to_2.len()
            )));
        }
        let k = Matrix3::from_row_iterator(self.intrinsics.iter().map(|d| d.0));
        let p = Matrix4::from_row_iterator(self.pose_1_to_2.iter().map(|d| d.0));
        Ok((CameraIntrinsics::from_matrix(&k)?, RelativePose::from_matrix(&p)?))
    }
}

fn row_major(col_major_of_transpose: &[f64]) -> Vec<Decimal> {
    col_major_of_transpose.iter().copied().map(Decimal).collect()
}

fn grid_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.f32"))
}

fn mask_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.u8"))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_grid(dir: &Path, name: &str, grid: &FieldGrid) -> Result<()> {
    let mut bytes = Vec::with_capacity(grid.data().len() * 4);
    for v in grid.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(&grid_path(dir, name), &bytes)
}

/// Writes a mask as `<name>.u8`; `name` includes the `m_` prefix.
pub fn write_mask(dir: &Path, name: &str, mask: &ValidityMask) -> Result<()> {
    write_bytes(&mask_path(dir, name), mask.bits())
}

pub fn read_grid(dir: &Path, name: &str, height: usize, width: usize, channels: usize) -> Result<FieldGrid> {
    let path = grid_path(dir, name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = height * width * channels * 4;
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch {
            field: name.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let grid = FieldGrid::new(height, width, channels, data)?;
    grid.check_finite(name)?;
    Ok(grid)
}

pub fn read_mask(dir: &Path, name: &str, height: usize, width: usize) -> Result<ValidityMask> {
    let path = mask_path(dir, name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != height * width {
        return Err(Error::ShapeMismatch {
            field: name.to_string(),
            expected: height * width,
            found: bytes.len(),
        });
    }
    ValidityMask::new(height, width, bytes).map_err(|e| match e {
        Error::Invariant { reason, .. } => Error::invariant(name, reason),
        other => other,
    })
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Meta {
        path,
        message: e.to_string(),
    })
}

fn write_meta(dir: &Path, meta: &Meta) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta).expect("meta serializes");
    text.push('\n');
    write_bytes(&dir.join(META_FILE), text.as_bytes())
}

/// Appends `names` to the meta field list (idempotent) and optionally sets `sf_kind`.
pub fn add_fields(dir: &Path, names: &[&str], sf_kind: Option<SfKind>) -> Result<()> {
    let mut meta = read_meta(dir)?;
    for name in names {
        if !meta.has(name) {
            meta.fields.push(name.to_string());
        }
    }
    if sf_kind.is_some() {
        meta.sf_kind = sf_kind;
    }
    write_meta(dir, &meta)
}

/// Validates `sample` and writes it under `dir`, creating the directory if needed.
pub fn write_sample(sample: &SampleRecord, dir: &Path) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_grid(dir, "d1", &sample.d1)?;
    write_mask(dir, "m_d1", &sample.m_d1)?;
    write_grid(dir, "d2", &sample.d2)?;
    write_mask(dir, "m_d2", &sample.m_d2)?;
    write_grid(dir, "flow_fwd", &sample.flow_fwd)?;
    write_mask(dir, "m_flow_fwd", &sample.m_flow_fwd)?;
    for (name, mask_name, field) in [("flow_bwd", "m_flow_bwd", &sample.flow_bwd), ("sf", "m_sf", &sample.sf)] {
        match field {
            Some((g, m)) => {
                write_grid(dir, name, g)?;
                write_mask(dir, mask_name, m)?;
            }
            None => {
                for path in [grid_path(dir, name), mask_path(dir, mask_name)] {
                    if path.exists() {
                        fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                    }
                }
            }
        }
    }
    write_meta(dir, &Meta::from_record(sample))
}

/// Reads and fully validates a sample written by [`write_sample`] or any
/// producer following the same layout.
pub fn read_sample(dir: &Path) -> Result<SampleRecord> {
    let meta = read_meta(dir)?;
    let (h, w) = (meta.height, meta.width);
    let (intrinsics, pose_1_to_2) = meta.camera(&dir.join(META_FILE))?;
    let require = |name: &str| {
        if meta.has(name) {
            Ok(())
        } else {
            Err(Error::MissingField(name.to_string()))
        }
    };
    for name in ["d1", "m_d1", "d2", "m_d2", "flow_fwd", "m_flow_fwd"] {
        require(name)?;
    }
    let optional = |name: &str, mask_name: &str, channels: usize| -> Result<Option<(FieldGrid, ValidityMask)>> {
        if !meta.has(name) {
            return Ok(None);
        }
        require(mask_name)?;
        Ok(Some((
            read_grid(dir, name, h, w, channels)?,
            read_mask(dir, mask_name, h, w)?,
        )))
    };
    let sample = SampleRecord {
        d1: read_grid(dir, "d1", h, w, 1)?,
        m_d1: read_mask(dir, "m_d1", h, w)?,
        d2: read_grid(dir, "d2", h, w, 1)?,
        m_d2: read_mask(dir, "m_d2", h, w)?,
        flow_fwd: read_grid(dir, "flow_fwd", h, w, 2)?,
        m_flow_fwd: read_mask(dir, "m_flow_fwd", h, w)?,
        flow_bwd: optional("flow_bwd", "m_flow_bwd", 2)?,
        sf: optional("sf", "m_sf", 3)?,
        sf_kind: meta.sf_kind.unwrap_or_default(),
        intrinsics,
        pose_1_to_2,
        metric: meta.metric,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn tiny_sample() -> SampleRecord {
        SampleRecord {
            d1: FieldGrid::new(2, 2, 1, vec![1.0; 4]).unwrap(),
            m_d1: ValidityMask::ones(2, 2),
            d2: FieldGrid::new(2, 2, 1, vec![2.0; 4]).unwrap(),
            m_d2: ValidityMask::ones(2, 2),
            flow_fwd: FieldGrid::zeros(2, 2, 2),
            m_flow_fwd: ValidityMask::ones(2, 2),
            flow_bwd: None,
            sf: None,
            sf_kind: SfKind::Cso,
            intrinsics: CameraIntrinsics::new(10.0, 12.0, 0.5, 0.5).unwrap(),
            pose_1_to_2: RelativePose::from_axis_angle(
                Vector3::new(0.01, 0.2, -0.1),
                Vector3::new(0.1, 0.0, 1.0 / 3.0),
            ),
            metric: true,
        }
    }

    #[test]
    fn depth_file_is_raw_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&tiny_sample(), dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("d1.f32")).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(bytes, [0x00, 0x00, 0x80, 0x3f].repeat(4));
    }

    #[test]
    fn nan_flow_rejected_by_name() {
        let mut s = tiny_sample();
        s.flow_fwd.data_mut()[3] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        match write_sample(&s, dir.path()).unwrap_err() {
            Error::NonFinite { field, .. } => assert_eq!(field, "flow_fwd"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn round_trip_with_metric_flag() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny_sample();
        write_sample(&s, dir.path()).unwrap();
        let back = read_sample(dir.path()).unwrap();
        assert!(back.metric);
        assert_eq!(back, s);
    }

    #[test]
    fn truncated_tensor_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&tiny_sample(), dir.path()).unwrap();
        let path = dir.path().join("d2.f32");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match read_sample(dir.path()).unwrap_err() {
            Error::ShapeMismatch { field, expected, found } => {
                assert_eq!(field, "d2");
                assert_eq!((expected, found), (16, 12));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&tiny_sample(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("flow_fwd.f32")).unwrap();
        assert!(matches!(read_sample(dir.path()).unwrap_err(), Error::Io { .. }));
    }

    #[test]
    fn meta_stores_decimal_strings_and_accepts_numbers() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&tiny_sample(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        assert!(text.contains("\"0.3333333333333333\""));
        let relaxed = text.replace("\"10\"", "10");
        fs::write(dir.path().join(META_FILE), relaxed).unwrap();
        assert_eq!(read_sample(dir.path()).unwrap().intrinsics.fx, 10.0);
    }

    #[test]
    fn absent_optional_fields_are_absent_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = tiny_sample();
        s.sf = Some((FieldGrid::zeros(2, 2, 3), ValidityMask::ones(2, 2)));
        write_sample(&s, dir.path()).unwrap();
        assert!(dir.path().join("sf.f32").exists());
        s.sf = None;
        write_sample(&s, dir.path()).unwrap();
        assert!(!dir.path().join("sf.f32").exists());
        assert!(!dir.path().join("m_sf.u8").exists());
        assert!(read_sample(dir.path()).unwrap().sf.is_none());
    }

    #[test]
    fn non_binary_mask_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&tiny_sample(), dir.path()).unwrap();
        fs::write(dir.path().join("m_d1.u8"), [1u8, 1, 7, 1]).unwrap();
        match read_sample(dir.path()).unwrap_err() {
            Error::Invariant { field, .. } => assert_eq!(field, "m_d1"),
            e => panic!("unexpected {e}"),
        }
    }
}
