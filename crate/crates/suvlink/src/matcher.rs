//! Connected-component lesion matching: threshold the PET volume, label
//! components, and find the unique component whose max SUV matches the
//! reported SUVmax within tolerance while occupying the reported slice.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::volume::Volume3D;

/// Voxel adjacency used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            6 => Some(Self::Six),
            18 => Some(Self::Eighteen),
            26 => Some(Self::TwentySix),
            _ => None,
        }
    }

    /// Neighbor offsets for this adjacency.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Self::Six => manhattan == 1,
                        Self::Eighteen => manhattan <= 2,
                        Self::TwentySix => true,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Per-component summary statistics over the PET volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentStats {
    pub id: u32,
    pub max_suv: f32,
    pub argmax: [usize; 3],
    pub voxels: usize,
    pub z_extent: [usize; 2],
}

/// Label map (0 = background, ids dense 1..=K) plus per-component stats.
#[derive(Debug, Clone)]
pub struct ComponentSet {
    pub labels: Array3<u32>,
    pub stats: Vec<ComponentStats>,
}

/// Binary super-level mask: 1 where `pet >= level`.
pub fn threshold_volume(pet: &Volume3D, level: f32) -> Array3<u8> {
    pet.data().mapv(|v| (v >= level) as u8)
}

/// Labels foreground components with a breadth-first sweep. Ids are assigned
/// in raster-scan order of each component's first voxel, so they are dense
/// and deterministic.
pub fn label_components(mask: &Array3<u8>, connectivity: Connectivity) -> (Array3<u32>, u32) {
    let (nx, ny, nz) = mask.dim();
    let offsets = connectivity.offsets();
    let mut labels = Array3::<u32>::zeros((nx, ny, nz));
    let mut next = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if mask[(x, y, z)] == 0 || labels[(x, y, z)] != 0 {
                    continue;
                }
                next += 1;
                labels[(x, y, z)] = next;
                queue.push_back([x, y, z]);
                while let Some([cx, cy, cz]) = queue.pop_front() {
                    for off in &offsets {
                        let px = cx as i64 + off[0];
                        let py = cy as i64 + off[1];
                        let pz = cz as i64 + off[2];
                        if px < 0 || py < 0 || pz < 0 {
                            continue;
                        }
                        let (px, py, pz) = (px as usize, py as usize, pz as usize);
                        if px >= nx || py >= ny || pz >= nz {
                            continue;
                        }
                        if mask[(px, py, pz)] != 0 && labels[(px, py, pz)] == 0 {
                            labels[(px, py, pz)] = next;
                            queue.push_back([px, py, pz]);
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Labels `mask` and computes per-component stats from `pet`.
pub fn connected_components(
    pet: &Volume3D,
    mask: &Array3<u8>,
    connectivity: Connectivity,
) -> ComponentSet {
    let (labels, count) = label_components(mask, connectivity);
    let mut stats: Vec<ComponentStats> = (1..=count)
        .map(|id| ComponentStats {
            id,
            max_suv: f32::NEG_INFINITY,
            argmax: [0, 0, 0],
            voxels: 0,
            z_extent: [usize::MAX, 0],
        })
        .collect();
    let data = pet.data();
    for ((x, y, z), &id) in labels.indexed_iter() {
        if id == 0 {
            continue;
        }
        let s = &mut stats[(id - 1) as usize];
        let v = data[(x, y, z)];
        if v > s.max_suv {
            s.max_suv = v;
            s.argmax = [x, y, z];
        }
        s.voxels += 1;
        s.z_extent[0] = s.z_extent[0].min(z);
        s.z_extent[1] = s.z_extent[1].max(z);
    }
    ComponentSet { labels, stats }
}

impl ComponentSet {
    /// True when the component has at least one voxel on axial slice `z`.
    pub fn occupies_slice(&self, id: u32, z: usize) -> bool {
        if z >= self.labels.dim().2 {
            return false;
        }
        self.labels
            .index_axis(ndarray::Axis(2), z)
            .iter()
            .any(|&l| l == id)
    }

    /// Binary mask of one component.
    pub fn component_mask(&self, id: u32) -> Array3<u8> {
        self.labels.mapv(|l| (l == id) as u8)
    }

    pub fn stats_json(&self) -> serde_json::Value {
        serde_json::json!({ "components": self.stats })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchOutcome {
    Matched(u32),
    NoMatch,
    Ambiguous(Vec<u32>),
}

/// The unique component with `|max_suv - target| <= tol` that has a voxel on
/// `slice_idx`.
pub fn match_component(
    components: &ComponentSet,
    target_suv: f64,
    slice_idx: usize,
    tol: f64,
) -> MatchOutcome {
    let qualifying: Vec<u32> = components
        .stats
        .iter()
        .filter(|s| {
            ((s.max_suv as f64) - target_suv).abs() <= tol
                && s.z_extent[0] <= slice_idx
                && slice_idx <= s.z_extent[1]
                && components.occupies_slice(s.id, slice_idx)
        })
        .map(|s| s.id)
        .collect();
    match qualifying.len() {
        0 => MatchOutcome::NoMatch,
        1 => MatchOutcome::Matched(qualifying[0]),
        _ => MatchOutcome::Ambiguous(qualifying),
    }
}

/// Initial threshold level: half the reported SUVmax, floored at the global
/// 2.5 SUV cutoff.
pub fn initial_threshold(target_suv: f64, floor: f64) -> f64 {
    (0.5 * target_suv).max(floor)
}
