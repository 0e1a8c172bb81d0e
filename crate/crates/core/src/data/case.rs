use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{offset, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            other => Err(Error::Format(format!("label must be 0 or 1, got {other}"))),
        }
    }

    /// Malignant iff the rating exceeds 3.
    pub fn from_score(score: u8) -> Self {
        if score > 3 {
            Label::Malignant
        } else {
            Label::Benign
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).map_err(serde::de::Error::custom)
    }
}

/// One nodule: a 3D intensity volume, its binary mask and class.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub dims: [usize; 3],
    /// Intensities in [0, 1], X-fastest.
    pub image: Vec<f32>,
    /// 0/1 per voxel, X-fastest.
    pub mask: Vec<u8>,
    pub label: Label,
    /// Radiologist-style malignancy rating 1..=5.
    pub score: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseMeta {
    id: String,
    dims: [usize; 3],
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<u8>,
}

pub const META_FILE: &str = "meta.json";
pub const IMAGE_FILE: &str = "image.f32raw";
pub const MASK_FILE: &str = "mask.u8raw";

impl Case {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.voxels();
        if self.image.len() != n || self.mask.len() != n {
            return Err(Error::Format(format!(
                "case {}: dims {:?} need {n} voxels, image has {}, mask has {}",
                self.id,
                self.dims,
                self.image.len(),
                self.mask.len()
            )));
        }
        if let Some(v) = self.mask.iter().find(|&&v| v > 1) {
            return Err(Error::Format(format!("case {}: mask is not binary (found {v})", self.id)));
        }
        if !self.mask.contains(&1) {
            return Err(Error::Format(format!("case {}: mask is empty", self.id)));
        }
        if let Some(v) = self.image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!(
                "case {}: image intensity {v} outside [0, 1]",
                self.id
            )));
        }
        if let Some(score) = self.score {
            if !(1..=5).contains(&score) {
                return Err(Error::Format(format!("case {}: score {score} outside 1..=5", self.id)));
            }
            if Label::from_score(score) != self.label {
                return Err(Error::Format(format!(
                    "case {}: label {} inconsistent with score {score} (malignant iff score > 3)",
                    self.id,
                    self.label.as_u8()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CaseMeta {
            id: self.id.clone(),
            dims: self.dims,
            label: self.label,
            score: self.score,
        };
        let write = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        write(META_FILE, serde_json::to_string_pretty(&meta)?.as_bytes())?;
        let img: Vec<u8> = self.image.iter().flat_map(|v| v.to_le_bytes()).collect();
        write(IMAGE_FILE, &img)?;
        write(MASK_FILE, &self.mask)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Format(format!("missing file {}", path.display())),
                _ => Error::io(path, e),
            })
        };
        let meta: CaseMeta = serde_json::from_slice(&read(META_FILE)?)
            .map_err(|e| Error::Format(format!("{}: {e}", dir.join(META_FILE).display())))?;
        let n: usize = meta.dims.iter().product();
        let img = read(IMAGE_FILE)?;
        if img.len() != 4 * n {
            return Err(Error::Format(format!(
                "{IMAGE_FILE} holds {} bytes, dims {:?} need {}",
                img.len(),
                meta.dims,
                4 * n
            )));
        }
        let mask = read(MASK_FILE)?;
        if mask.len() != n {
            return Err(Error::Format(format!(
                "{MASK_FILE} holds {} bytes, dims {:?} need {n}",
                mask.len(),
                meta.dims
            )));
        }
        let case = Case {
            id: meta.id,
            dims: meta.dims,
            image: img
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            mask,
            label: meta.label,
            score: meta.score,
        };
        case.validate()?;
        Ok(case)
    }

    /// Mean foreground coordinate.
    pub fn mask_centroid(&self) -> Result<[f64; 3]> {
        centroid(&self.mask.iter().map(|&m| m as f64).collect::<Vec<_>>(), self.dims)
            .ok_or_else(|| Error::Data(format!("case {}: mask is empty", self.id)))
    }
}

pub(crate) fn centroid(mask: &[f64], dims: [usize; 3]) -> Option<[f64; 3]> {
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mask[offset(dims, 0, x, y, z)] > 0.5 {
                    acc[0] += x as f64;
                    acc[1] += y as f64;
                    acc[2] += z as f64;
                    n += 1.0;
                }
            }
        }
    }
    (n > 0.0).then(|| acc.map(|a| a / n))
}

/// Crops a `size` patch centred on the mask centroid, zero-padding outside
/// the volume. Returns `[1,X,Y,Z]` image and mask tensors.
pub fn crop_patch(case: &Case, size: [usize; 3]) -> Result<(Tensor, Tensor)> {
    if size.contains(&0) {
        return Err(Error::Parameter(format!("patch size must be positive, got {size:?}")));
    }
    let c = case.mask_centroid()?;
    let start: [i64; 3] = std::array::from_fn(|a| (c[a] - (size[a] as f64 - 1.0) / 2.0).round() as i64);
    let n: usize = size.iter().product();
    let mut patch = vec![0.0; n];
    let mut mask = vec![0.0; n];
    for z in 0..size[2] {
        let vz = start[2] + z as i64;
        if vz < 0 || vz >= case.dims[2] as i64 {
            continue;
        }
        for y in 0..size[1] {
            let vy = start[1] + y as i64;
            if vy < 0 || vy >= case.dims[1] as i64 {
                continue;
            }
            for x in 0..size[0] {
                let vx = start[0] + x as i64;
                if vx < 0 || vx >= case.dims[0] as i64 {
                    continue;
                }
                let src = offset(case.dims, 0, vx as usize, vy as usize, vz as usize);
                let dst = offset(size, 0, x, y, z);
                patch[dst] = case.image[src] as f64;
                mask[dst] = case.mask[src] as f64;
            }
        }
    }
    let shape = vec![1, size[0], size[1], size[2]];
    Ok((Tensor::new(shape.clone(), patch)?, Tensor::new(shape, mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_case(dims: [usize; 3], center: [usize; 3], r: usize) -> Case {
        let n = dims.iter().product();
        let mut image = vec![0.1f32; n];
        let mut mask = vec![0u8; n];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d2 = [x, y, z]
                        .iter()
                        .zip(center)
                        .map(|(&p, c)| (p as i64 - c as i64).pow(2))
                        .sum::<i64>();
                    if d2 <= (r * r) as i64 {
                        let i = offset(dims, 0, x, y, z);
                        mask[i] = 1;
                        image[i] = 0.8;
                    }
                }
            }
        }
        Case {
            id: "blob".into(),
            dims,
            image,
            mask,
            label: Label::Malignant,
            score: Some(4),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut case = blob_case([6, 5, 4], [3, 2, 2], 1);
        case.image[3] = 0.123_456_79;
        case.save(dir.path()).unwrap();
        assert_eq!(Case::load(dir.path()).unwrap(), case);
    }

    #[test]
    fn truncated_image_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        blob_case([6, 5, 4], [3, 2, 2], 1).save(dir.path()).unwrap();
        let p = dir.path().join(IMAGE_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Case::load(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn load_rejects_missing_and_non_binary() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Case::load(dir.path()), Err(Error::Format(_))));
        blob_case([6, 5, 4], [3, 2, 2], 1).save(dir.path()).unwrap();
        let p = dir.path().join(MASK_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = 2;
        fs::write(&p, &bytes).unwrap();
        let err = Case::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("binary"), "{err}");
    }

    #[test]
    fn inconsistent_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        blob_case([6, 5, 4], [3, 2, 2], 1).save(dir.path()).unwrap();
        let meta = r#"{"id":"blob","dims":[6,5,4],"label":0,"score":5}"#;
        fs::write(dir.path().join(META_FILE), meta).unwrap();
        let err = Case::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("score"), "{err}");
    }

    #[test]
    fn full_size_crop_is_whole_volume() {
        let case = blob_case([9, 9, 5], [4, 4, 2], 2);
        let (p, m) = crop_patch(&case, [9, 9, 5]).unwrap();
        let img: Vec<f64> = case.image.iter().map(|&v| v as f64).collect();
        assert_eq!(p.data, img);
        assert_eq!(m.data.iter().filter(|&&v| v == 1.0).count(), case.mask.iter().filter(|&&v| v == 1).count());
    }

    #[test]
    fn corner_nodule_is_zero_padded() {
        let case = blob_case([12, 12, 6], [0, 0, 0], 1);
        let (p, m) = crop_patch(&case, [8, 8, 4]).unwrap();
        // Crop starts at negative coordinates; those voxels stay exactly zero.
        assert_eq!(p.data[offset([8, 8, 4], 0, 0, 0, 0)], 0.0);
        assert_eq!(m.data[offset([8, 8, 4], 0, 0, 0, 0)], 0.0);
        assert!(m.data.contains(&1.0));
    }

    #[test]
    fn interior_crop_is_centred() {
        let case = blob_case([24, 24, 12], [10, 13, 5], 2);
        let size = [16, 16, 8];
        let (_, m) = crop_patch(&case, size).unwrap();
        let c = centroid(&m.data, size).unwrap();
        for a in 0..3 {
            let centre = (size[a] as f64 - 1.0) / 2.0;
            assert!((c[a] - centre).abs() <= 1.0, "axis {a}: {} vs {centre}", c[a]);
        }
    }

    #[test]
    fn empty_mask_crop_is_data_error() {
        let mut case = blob_case([6, 6, 4], [3, 3, 2], 1);
        case.mask.iter_mut().for_each(|v| *v = 0);
        assert!(matches!(crop_patch(&case, [4, 4, 2]), Err(Error::Data(_))));
    }
}
