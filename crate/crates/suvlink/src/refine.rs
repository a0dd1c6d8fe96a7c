//! Iterative threshold refinement of a matched component into the final
//! lesion mask: re-threshold around the seed at T, recompute the mean uptake
//! of the grown region, and update T = offset + beta * mean until it settles.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::matcher::{label_components, Connectivity};
use crate::volume::{Volume3D, VolumeKind};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterThresholdConfig {
    /// Relative factor applied to the region mean.
    pub beta: f64,
    /// Additive SUV offset in the threshold update.
    pub background_offset: f64,
    /// Convergence tolerance on the threshold, in SUV.
    pub epsilon: f64,
    pub max_iter: usize,
    pub connectivity: Connectivity,
}

impl Default for IterThresholdConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            background_offset: 0.0,
            epsilon: 0.01,
            max_iter: 20,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl IterThresholdConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.beta && self.beta < 1.0) {
            return Err(format!("beta must be in (0, 1), got {}", self.beta));
        }
        if self.epsilon <= 0.0 {
            return Err(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.max_iter < 1 {
            return Err("max_iter must be >= 1".into());
        }
        Ok(())
    }
}

/// A refined lesion: final mask plus summary statistics and provenance.
#[derive(Debug, Clone)]
pub struct LesionLabel {
    pub mask: Volume3D,
    pub max_suv: f64,
    pub volume_ml: f64,
    pub centroid_mm: [f64; 3],
    pub component_id: u32,
    pub exam_id: String,
    pub sentence_id: usize,
    pub converged: bool,
    pub iterations: usize,
    pub final_threshold: f64,
}

struct Bounds {
    lo: [usize; 3],
    hi: [usize; 3], // inclusive
}

/// Seed bounding box grown to twice its size (leak guard), clamped to the
/// volume.
fn leak_guard_bounds(seed: &Array3<u8>) -> Option<Bounds> {
    let (nx, ny, nz) = seed.dim();
    let dims = [nx, ny, nz];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((x, y, z), &v) in seed.indexed_iter() {
        if v != 0 {
            any = true;
            let p = [x, y, z];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    if !any {
        return None;
    }
    let mut out = Bounds { lo, hi };
    for a in 0..3 {
        let half = (hi[a] - lo[a] + 1).div_ceil(2).max(1);
        out.lo[a] = lo[a].saturating_sub(half);
        out.hi[a] = (hi[a] + half).min(dims[a] - 1);
    }
    Some(out)
}

/// The connected component of `{pet >= level}` containing `seed_voxel`,
/// restricted to `bounds`. Empty mask if the seed voxel is below the level.
fn region_at(
    pet: &Array3<f32>,
    bounds: &Bounds,
    seed_voxel: [usize; 3],
    level: f64,
    connectivity: Connectivity,
) -> Array3<u8> {
    let (nx, ny, nz) = pet.dim();
    let mut mask = Array3::<u8>::zeros((nx, ny, nz));
    if (pet[(seed_voxel[0], seed_voxel[1], seed_voxel[2])] as f64) < level {
        return mask;
    }
    let mut sub = Array3::<u8>::zeros((
        bounds.hi[0] - bounds.lo[0] + 1,
        bounds.hi[1] - bounds.lo[1] + 1,
        bounds.hi[2] - bounds.lo[2] + 1,
    ));
    for ((x, y, z), m) in sub.indexed_iter_mut() {
        let v = pet[(x + bounds.lo[0], y + bounds.lo[1], z + bounds.lo[2])] as f64;
        *m = (v >= level) as u8;
    }
    let (labels, _) = label_components(&sub, connectivity);
    let seed_label = labels[(
        seed_voxel[0] - bounds.lo[0],
        seed_voxel[1] - bounds.lo[1],
        seed_voxel[2] - bounds.lo[2],
    )];
    debug_assert!(seed_label != 0);
    for ((x, y, z), &l) in labels.indexed_iter() {
        if l == seed_label {
            mask[(x + bounds.lo[0], y + bounds.lo[1], z + bounds.lo[2])] = 1;
        }
    }
    mask
}

fn mean_over(pet: &Array3<f32>, mask: &Array3<u8>) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    ndarray::Zip::from(pet).and(mask).for_each(|&v, &m| {
        if m != 0 {
            sum += v as f64;
            n += 1;
        }
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Refines a seed component with the iterative threshold fixed point.
///
/// T0 is half the seed max; each step re-grows the region containing the
/// seed argmax at the current threshold (within the leak-guard bounds) and
/// sets the next threshold from the region mean. Returns the mask at the
/// converged threshold; non-convergence returns the last iterate flagged.
pub fn refine(
    pet: &Volume3D,
    seed: &Array3<u8>,
    cfg: &IterThresholdConfig,
    exam_id: &str,
    sentence_id: usize,
    component_id: u32,
) -> LesionLabel {
    let data = pet.data();
    let bounds = match leak_guard_bounds(seed) {
        Some(b) => b,
        None => {
            // Empty seed: degenerate from the start.
            return degenerate(pet, [0, 0, 0], exam_id, sentence_id, component_id);
        }
    };
    // Seed argmax voxel.
    let mut argmax = [0usize; 3];
    let mut max_suv = f32::NEG_INFINITY;
    for ((x, y, z), &m) in seed.indexed_iter() {
        if m != 0 && data[(x, y, z)] > max_suv {
            max_suv = data[(x, y, z)];
            argmax = [x, y, z];
        }
    }
    let mut t = 0.5 * max_suv as f64;
    let mut mask = region_at(data, &bounds, argmax, t, cfg.connectivity);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let next_t = cfg.background_offset + cfg.beta * mean_over(data, &mask);
        if (next_t - t).abs() < cfg.epsilon {
            t = next_t;
            mask = region_at(data, &bounds, argmax, t, cfg.connectivity);
            converged = true;
            break;
        }
        t = next_t;
        mask = region_at(data, &bounds, argmax, t, cfg.connectivity);
    }
    if mask.iter().all(|&m| m == 0) {
        let mut label = degenerate(pet, argmax, exam_id, sentence_id, component_id);
        label.iterations = iterations;
        label.final_threshold = t;
        return label;
    }
    let mask_vol = Volume3D::new(
        mask.mapv(|m| m as f32),
        pet.spacing(),
        pet.origin(),
        VolumeKind::Mask,
    )
    .expect("refined mask is binary");
    let mut label = LesionLabel {
        mask: mask_vol,
        max_suv: 0.0,
        volume_ml: 0.0,
        centroid_mm: [0.0; 3],
        component_id,
        exam_id: exam_id.to_string(),
        sentence_id,
        converged,
        iterations,
        final_threshold: t,
    };
    lesion_stats(&mut label, pet);
    label
}

/// DegenerateLesion fallback: the seed argmax voxel alone, unconverged.
fn degenerate(
    pet: &Volume3D,
    argmax: [usize; 3],
    exam_id: &str,
    sentence_id: usize,
    component_id: u32,
) -> LesionLabel {
    let [nx, ny, nz] = pet.dims();
    let mut mask = Array3::<f32>::zeros((nx, ny, nz));
    mask[(argmax[0], argmax[1], argmax[2])] = 1.0;
    let mask_vol = Volume3D::new(mask, pet.spacing(), pet.origin(), VolumeKind::Mask)
        .expect("single-voxel mask is binary");
    let mut label = LesionLabel {
        mask: mask_vol,
        max_suv: 0.0,
        volume_ml: 0.0,
        centroid_mm: [0.0; 3],
        component_id,
        exam_id: exam_id.to_string(),
        sentence_id,
        converged: false,
        iterations: 0,
        final_threshold: 0.0,
    };
    lesion_stats(&mut label, pet);
    label
}

/// Recomputes max SUV, volume in ml, and centroid from the final mask.
pub fn lesion_stats(label: &mut LesionLabel, pet: &Volume3D) {
    let mask = label.mask.data();
    let data = pet.data();
    let spacing = pet.spacing();
    let mut max_suv = f64::NEG_INFINITY;
    let mut count = 0usize;
    let mut centroid = [0.0f64; 3];
    for ((x, y, z), &m) in mask.indexed_iter() {
        if m != 0.0 {
            count += 1;
            max_suv = max_suv.max(data[(x, y, z)] as f64);
            centroid[0] += (x as f64 + 0.5) * spacing[0] as f64;
            centroid[1] += (y as f64 + 0.5) * spacing[1] as f64;
            centroid[2] += (z as f64 + 0.5) * spacing[2] as f64;
        }
    }
    if count > 0 {
        for c in &mut centroid {
            *c /= count as f64;
        }
    }
    label.max_suv = if count > 0 { max_suv } else { 0.0 };
    label.volume_ml = count as f64 * label.mask.voxel_ml();
    label.centroid_mm = centroid;
}

/// Scalar fixed-point reference: iterates the threshold directly on a list
/// of intensity samples, with no spatial machinery. Used by oracle tests.
pub fn scalar_fixed_point(samples: &[f64], cfg: &IterThresholdConfig) -> (f64, usize, bool) {
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut t = 0.5 * max;
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let selected: Vec<f64> = samples.iter().cloned().filter(|&v| v >= t).collect();
        let mean = if selected.is_empty() {
            0.0
        } else {
            selected.iter().sum::<f64>() / selected.len() as f64
        };
        let next_t = cfg.background_offset + cfg.beta * mean;
        if (next_t - t).abs() < cfg.epsilon {
            return (next_t, iterations, true);
        }
        t = next_t;
    }
    (t, iterations, false)
}
