//! 3D volume type, NIfTI-1 IO, resampling and canonical-grid preprocessing.
//!
//! All modules share [`Volume3D`]: a dense `(x, y, z)` grid of `f32` with
//! millimetre spacing and origin. Axis 2 is the axial (longitudinal) axis;
//! volumes loaded from NIfTI are checked against the sform/qform rows so a
//! file whose slice axis is not the third array axis is rejected rather than
//! silently mis-mapped.

use std::path::Path;

use ndarray::Array3;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SuvlinkError};

pub const MAX_DIM: usize = 4096;

/// Payload carried by a volume; decides interpolation and validation rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeKind {
    PetSuv,
    CtHu,
    Mask,
}

/// How report slice numbers map onto the axial voxel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceConvention {
    /// Slice 1 is the most superior slice (highest z index).
    SuperiorFirst,
    /// Slice 1 is the most inferior slice (z index 0). Default.
    #[default]
    InferiorFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
    pub convention: SliceConvention,
}

/// A 3D scalar grid indexed `(x, y, z)` with geometry metadata.
///
/// Immutable after construction; operations return new volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    data: Array3<f32>,
    spacing: [f32; 3],
    origin: [f32; 3],
    kind: VolumeKind,
}

impl Volume3D {
    pub fn new(
        data: Array3<f32>,
        spacing: [f32; 3],
        origin: [f32; 3],
        kind: VolumeKind,
    ) -> Result<Self> {
        if spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(SuvlinkError::NonPositiveSpacing { spacing });
        }
        let (nx, ny, nz) = data.dim();
        let dims = [nx, ny, nz];
        if dims.iter().any(|&d| d == 0 || d > MAX_DIM) {
            return Err(SuvlinkError::DimsOutOfRange { dims });
        }
        if kind == VolumeKind::Mask {
            if let Some(&v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(SuvlinkError::NonBinaryMask { value: v });
            }
        }
        Ok(Self {
            data,
            spacing,
            origin,
            kind,
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn dims(&self) -> [usize; 3] {
        let (nx, ny, nz) = self.data.dim();
        [nx, ny, nz]
    }

    pub fn geometry(&self, convention: SliceConvention) -> Geometry {
        Geometry {
            dims: self.dims(),
            spacing: self.spacing,
            origin: self.origin,
            convention,
        }
    }

    /// Volume of one voxel in millilitres.
    pub fn voxel_ml(&self) -> f64 {
        let [sx, sy, sz] = self.spacing;
        (sx as f64) * (sy as f64) * (sz as f64) / 1000.0
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Side information from [`load_volume`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadStats {
    /// Negative PET values clamped to zero on load.
    pub negatives_clamped: usize,
}

/// Index of the array axis the header designates as axial, judged from the
/// sform rows (largest |z| direction cosine). Defaults to 2 when no sform.
fn axial_axis(header: &NiftiHeader) -> usize {
    if header.sform_code == 0 {
        return 2;
    }
    let zrow = header.srow_z;
    let mut best = 2;
    let mut best_mag = 0.0f32;
    for (axis, v) in zrow.iter().take(3).enumerate() {
        if v.abs() > best_mag {
            best_mag = v.abs();
            best = axis;
        }
    }
    best
}

pub fn load_volume(path: impl AsRef<Path>, kind: VolumeKind) -> Result<(Volume3D, LoadStats)> {
    let path = path.as_ref();
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| SuvlinkError::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if ndim != 3 {
        return Err(SuvlinkError::UnsupportedDimensionality {
            path: path.to_path_buf(),
            ndim,
        });
    }
    if axial_axis(&header) != 2 {
        return Err(SuvlinkError::UnreadableFile {
            path: path.to_path_buf(),
            reason: "axial axis is not the third array axis".into(),
        });
    }
    let spacing = [header.pixdim[1], header.pixdim[2], header.pixdim[3]];
    let origin = [header.srow_x[3], header.srow_y[3], header.srow_z[3]];
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| SuvlinkError::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut data: Array3<f32> =
        arr.into_dimensionality()
            .map_err(|e| SuvlinkError::UnreadableFile {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
    let mut stats = LoadStats::default();
    if kind == VolumeKind::PetSuv {
        for v in data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                stats.negatives_clamped += 1;
            }
        }
        if stats.negatives_clamped > 0 {
            log::warn!(
                "{}: clamped {} negative PET values to 0",
                path.display(),
                stats.negatives_clamped
            );
        }
    }
    if kind == VolumeKind::Mask {
        // Tolerate masks stored as other dtypes; values must still be 0/1.
        for v in data.iter() {
            if *v != 0.0 && *v != 1.0 {
                return Err(SuvlinkError::NonBinaryMask { value: *v });
            }
        }
    }
    let vol = Volume3D::new(data, spacing, origin, kind)?;
    Ok((vol, stats))
}

pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut header = NiftiHeader::default();
    let [nx, ny, nz] = vol.dims();
    header.dim = [3, nx as u16, ny as u16, nz as u16, 1, 1, 1, 1];
    header.pixdim = [
        1.0,
        vol.spacing[0],
        vol.spacing[1],
        vol.spacing[2],
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    header.sform_code = 1;
    header.srow_x = [vol.spacing[0], 0.0, 0.0, vol.origin[0]];
    header.srow_y = [0.0, vol.spacing[1], 0.0, vol.origin[1]];
    header.srow_z = [0.0, 0.0, vol.spacing[2], vol.origin[2]];
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(vol.data())
        .map_err(|e| SuvlinkError::WriteFailure {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Maps a 1-based report slice number onto a 0-based voxel z index.
pub fn slice_to_index(slice_number: i64, geom: &Geometry) -> Result<usize> {
    let nz = geom.dims[2];
    if slice_number < 1 || slice_number > nz as i64 {
        return Err(SuvlinkError::SliceOutOfRange {
            slice: slice_number,
            nz,
        });
    }
    Ok(match geom.convention {
        SliceConvention::InferiorFirst => (slice_number - 1) as usize,
        SliceConvention::SuperiorFirst => nz - slice_number as usize,
    })
}

/// Resamples to `target_spacing`. Trilinear for PET/CT, nearest-neighbor for
/// masks. Output dims are `round(dim * spacing / target)`, at least 1.
pub fn resample(vol: &Volume3D, target_spacing: [f32; 3]) -> Result<Volume3D> {
    if target_spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(SuvlinkError::NonPositiveSpacing {
            spacing: target_spacing,
        });
    }
    let in_dims = vol.dims();
    let in_sp = vol.spacing();
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        out_dims[a] = (((in_dims[a] as f64) * (in_sp[a] as f64) / (target_spacing[a] as f64))
            .round() as usize)
            .max(1);
    }
    let nearest = vol.kind() == VolumeKind::Mask;
    let src = vol.data();
    let mut out = Array3::<f32>::zeros((out_dims[0], out_dims[1], out_dims[2]));
    // Voxel-center alignment: output center (i + 0.5) * t maps to input
    // coordinate (i + 0.5) * t / s - 0.5 in voxel units.
    let scale = [
        target_spacing[0] as f64 / in_sp[0] as f64,
        target_spacing[1] as f64 / in_sp[1] as f64,
        target_spacing[2] as f64 / in_sp[2] as f64,
    ];
    for x in 0..out_dims[0] {
        let fx = (x as f64 + 0.5) * scale[0] - 0.5;
        for y in 0..out_dims[1] {
            let fy = (y as f64 + 0.5) * scale[1] - 0.5;
            for z in 0..out_dims[2] {
                let fz = (z as f64 + 0.5) * scale[2] - 0.5;
                out[(x, y, z)] = if nearest {
                    let ix = (fx.round().max(0.0) as usize).min(in_dims[0] - 1);
                    let iy = (fy.round().max(0.0) as usize).min(in_dims[1] - 1);
                    let iz = (fz.round().max(0.0) as usize).min(in_dims[2] - 1);
                    src[(ix, iy, iz)]
                } else {
                    trilinear(src, in_dims, fx, fy, fz)
                };
            }
        }
    }
    Volume3D::new(out, target_spacing, vol.origin(), vol.kind())
}

fn trilinear(src: &Array3<f32>, dims: [usize; 3], fx: f64, fy: f64, fz: f64) -> f32 {
    let clamp = |f: f64, n: usize| f.max(0.0).min((n - 1) as f64);
    let (fx, fy, fz) = (clamp(fx, dims[0]), clamp(fy, dims[1]), clamp(fz, dims[2]));
    let (x0, y0, z0) = (fx.floor() as usize, fy.floor() as usize, fz.floor() as usize);
    let (x1, y1, z1) = (
        (x0 + 1).min(dims[0] - 1),
        (y0 + 1).min(dims[1] - 1),
        (z0 + 1).min(dims[2] - 1),
    );
    let (dx, dy, dz) = (fx - x0 as f64, fy - y0 as f64, fz - z0 as f64);
    let mut acc = 0.0f64;
    for (xi, wx) in [(x0, 1.0 - dx), (x1, dx)] {
        for (yi, wy) in [(y0, 1.0 - dy), (y1, dy)] {
            for (zi, wz) in [(z0, 1.0 - dz), (z1, dz)] {
                acc += wx * wy * wz * src[(xi, yi, zi)] as f64;
            }
        }
    }
    acc as f32
}

/// Center-crops or zero-pads the axial plane to `target[0] × target[1]`, and
/// anchors the longitudinal axis at `superior_ref` (topmost kept z index,
/// default `nz - 1`), cropping or padding inferiorly to `target[2]` slices.
pub fn crop_or_pad(vol: &Volume3D, target: [usize; 3], superior_ref: Option<usize>) -> Volume3D {
    let [nx, ny, nz] = vol.dims();
    let top = superior_ref.unwrap_or(nz - 1).min(nz - 1);
    let mut out = Array3::<f32>::zeros((target[0], target[1], target[2]));
    // In-plane: shared center. offset = (target - n) / 2 rounded toward zero,
    // applied symmetrically so a centered voxel stays centered.
    let plan = |n: usize, t: usize| -> (usize, usize, usize) {
        // (src_start, dst_start, len)
        if n >= t {
            ((n - t) / 2, 0, t)
        } else {
            (0, (t - n) / 2, n)
        }
    };
    let (sx, dx, lx) = plan(nx, target[0]);
    let (sy, dy, ly) = plan(ny, target[1]);
    // Longitudinal: keep slices (top - target[2] + 1 ..= top); indices below 0
    // become inferior zero padding, with kept data flush at the superior end.
    let want_bottom = top as i64 - target[2] as i64 + 1;
    let src_z0 = want_bottom.max(0) as usize;
    let lz = top + 1 - src_z0;
    let dst_z0 = target[2] - lz;
    let src = vol.data();
    for ix in 0..lx {
        for iy in 0..ly {
            for iz in 0..lz {
                out[(dx + ix, dy + iy, dst_z0 + iz)] = src[(sx + ix, sy + iy, src_z0 + iz)];
            }
        }
    }
    Volume3D::new(out, vol.spacing(), vol.origin(), vol.kind())
        .expect("crop_or_pad preserves volume invariants")
}

/// Topmost axial slice with any body-mask voxel: PET > `level` after a
/// box closing of radius `radius` voxels. Stand-in for a skull-top detector.
pub fn superior_reference(pet: &Volume3D, level: f32, radius: usize) -> Option<usize> {
    let [nx, ny, nz] = pet.dims();
    let mut mask = Array3::<u8>::zeros((nx, ny, nz));
    ndarray::Zip::from(&mut mask)
        .and(pet.data())
        .for_each(|m, &v| *m = (v > level) as u8);
    let closed = binary_closing_box(&mask, radius);
    (0..nz)
        .rev()
        .find(|&z| (0..nx).any(|x| (0..ny).any(|y| closed[(x, y, z)] != 0)))
}

/// Morphological closing with a cubic (box) structuring element, done as
/// separable 1D max filters followed by separable 1D min filters.
pub fn binary_closing_box(mask: &Array3<u8>, radius: usize) -> Array3<u8> {
    let dilated = box_filter(mask, radius, true);
    box_filter(&dilated, radius, false)
}

fn box_filter(mask: &Array3<u8>, radius: usize, dilate: bool) -> Array3<u8> {
    let mut cur = mask.clone();
    let (nx, ny, nz) = mask.dim();
    let dims = [nx, ny, nz];
    for axis in 0..3 {
        let mut next = cur.clone();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let mut idx = [x, y, z];
                    let n = dims[axis];
                    let c = idx[axis];
                    let lo = c.saturating_sub(radius);
                    let hi = (c + radius).min(n - 1);
                    let mut acc = if dilate { 0u8 } else { 1u8 };
                    for k in lo..=hi {
                        idx[axis] = k;
                        let v = cur[(idx[0], idx[1], idx[2])];
                        if dilate {
                            acc = acc.max(v);
                        } else {
                            acc = acc.min(v);
                        }
                    }
                    next[(x, y, z)] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}
