//! FACT streamline tracking with brute-force seeding and single-ROI
//! selection.
//!
//! Tracking runs in continuous voxel coordinates where voxel `i` spans
//! `[i, i+1)` along each axis. Reported points are in millimetres with the
//! centre of voxel `i` at `i · spacing`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dti::{dot, norm};
use crate::dti::EigenField;
use crate::error::{Error, Result};
use crate::volume::{ColorMap, Dims, ScalarMap, Spacing};

pub const FA_THRESHOLD: f64 = 0.2;
pub const ANGLE_THRESHOLD_DEG: f64 = 40.0;
/// Distance stepped past a voxel face to land in the next voxel.
pub const FACE_NUDGE: f64 = 1e-6;
/// Shortest reported streamline, voxels.
pub const MIN_LENGTH_VOXELS: f64 = 2.0;
/// Longest half-track as a multiple of the largest grid dimension.
pub const MAX_LENGTH_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    LowFa,
    Angle,
    Boundary,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streamline {
    /// Ordered points, mm.
    pub points: Vec<[f64; 3]>,
    pub seed: usize,
    /// Why each end stopped: (backward end, forward end).
    pub termination: (Termination, Termination),
    /// Voxels traversed, in path order.
    pub voxels: Vec<usize>,
    /// Path length in voxel units.
    pub length: f64,
}

/// Unit principal directions per voxel (zero where undefined).
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionField {
    pub dims: Dims,
    pub spacing: Spacing,
    pub dirs: Vec<[f64; 3]>,
}

impl From<&EigenField> for DirectionField {
    fn from(e: &EigenField) -> Self {
        DirectionField {
            dims: e.dims,
            spacing: e.spacing,
            dirs: (0..e.eigs.len()).map(|i| e.principal(i)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackParams {
    pub fa_threshold: f64,
    pub angle_threshold_deg: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            fa_threshold: FA_THRESHOLD,
            angle_threshold_deg: ANGLE_THRESHOLD_DEG,
        }
    }
}

/// Every foreground voxel with FA ≥ threshold (inclusive), in index order.
pub fn brute_force_seed(fa: &ScalarMap, fa_threshold: f64) -> Vec<usize> {
    (0..fa.data.len())
        .filter(|&i| fa.mask[i] && fa.data[i] >= fa_threshold)
        .collect()
}

fn voxel_center(dims: Dims, idx: usize) -> [f64; 3] {
    let (x, y, z) = dims.coords(idx);
    [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]
}

fn to_mm(p: [f64; 3], spacing: Spacing) -> [f64; 3] {
    [
        (p[0] - 0.5) * spacing[0],
        (p[1] - 0.5) * spacing[1],
        (p[2] - 0.5) * spacing[2],
    ]
}

struct Half {
    points: Vec<[f64; 3]>,
    voxels: Vec<usize>,
    length: f64,
    end: Termination,
}

struct Tracker<'a> {
    field: &'a DirectionField,
    fa: &'a ScalarMap,
    fa_threshold: f64,
    cos_limit: f64,
    max_length: f64,
}

impl Tracker<'_> {
    fn passes(&self, idx: usize) -> bool {
        self.fa.mask[idx] && self.fa.data[idx] >= self.fa_threshold && norm(&self.field.dirs[idx]) > 0.0
    }

    /// Follow one heading from the seed centre to termination.
    fn half(&self, seed: usize, sign: f64) -> Half {
        let dims = self.field.dims;
        let mut pos = voxel_center(dims, seed);
        let mut vox = seed;
        let mut prev = self.field.dirs[seed];
        let mut dir = prev.map(|c| c * sign);
        let mut points = vec![pos];
        let mut voxels = vec![seed];
        let mut length = 0.0;
        // bounds zero-length ping-pong at faces as well as genuine length
        let max_visits = (3.0 * self.max_length).ceil() as usize + 8;
        loop {
            if length >= self.max_length || voxels.len() > max_visits {
                return Half {
                    points,
                    voxels,
                    length,
                    end: Termination::MaxLength,
                };
            }
            let (x, y, z) = dims.coords(vox);
            let cell = [x as f64, y as f64, z as f64];
            let mut t = f64::INFINITY;
            for a in 0..3 {
                if dir[a] > 0.0 {
                    t = t.min((cell[a] + 1.0 - pos[a]) / dir[a]);
                } else if dir[a] < 0.0 {
                    t = t.min((cell[a] - pos[a]) / dir[a]);
                }
            }
            let t = t.max(0.0);
            let exit = [pos[0] + t * dir[0], pos[1] + t * dir[1], pos[2] + t * dir[2]];
            points.push(exit);
            length += t;
            let probe = [
                exit[0] + FACE_NUDGE * dir[0],
                exit[1] + FACE_NUDGE * dir[1],
                exit[2] + FACE_NUDGE * dir[2],
            ];
            let (px, py, pz) = (probe[0].floor(), probe[1].floor(), probe[2].floor());
            if !dims.contains(px as isize, py as isize, pz as isize) {
                return Half {
                    points,
                    voxels,
                    length,
                    end: Termination::Boundary,
                };
            }
            let next = dims.index(px as usize, py as usize, pz as usize);
            if !self.passes(next) {
                return Half {
                    points,
                    voxels,
                    length,
                    end: Termination::LowFa,
                };
            }
            let v = self.field.dirs[next];
            let c = dot(v, prev).abs() / (norm(&v) * norm(&prev));
            if c < self.cos_limit {
                return Half {
                    points,
                    voxels,
                    length,
                    end: Termination::Angle,
                };
            }
            let s = if dot(v, dir) < 0.0 { -1.0 } else { 1.0 };
            let nv = norm(&v);
            dir = v.map(|c| s * c / nv);
            prev = v;
            pos = exit;
            vox = next;
            voxels.push(next);
        }
    }
}

fn check_aligned(field: &DirectionField, fa: &ScalarMap) -> Result<()> {
    if field.dims != fa.dims || field.dirs.len() != fa.data.len() {
        return Err(Error::Shape("direction field and FA map are not aligned".into()));
    }
    Ok(())
}

/// Bidirectional FACT from each seed. Streamlines shorter than
/// [`MIN_LENGTH_VOXELS`] are dropped; output follows seed order.
pub fn fact_track(field: &DirectionField, fa: &ScalarMap, seeds: &[usize], params: TrackParams) -> Result<Vec<Streamline>> {
    check_aligned(field, fa)?;
    if !(0.0..=90.0).contains(&params.angle_threshold_deg) {
        return Err(Error::InvalidArgument("angle threshold must lie in [0°, 90°]".into()));
    }
    if let Some(&s) = seeds.iter().find(|&&s| s >= fa.data.len()) {
        return Err(Error::InvalidArgument(format!("seed {s} outside the volume")));
    }
    let tracker = Tracker {
        field,
        fa,
        fa_threshold: params.fa_threshold,
        // small slack so an angle exactly at the threshold passes
        cos_limit: params.angle_threshold_deg.to_radians().cos() - 1e-12,
        max_length: MAX_LENGTH_FACTOR * field.dims.max_dim() as f64,
    };
    let spacing = field.spacing;
    let out: Vec<Option<Streamline>> = seeds
        .par_iter()
        .map(|&seed| {
            if !tracker.passes(seed) {
                return None;
            }
            let fwd = tracker.half(seed, 1.0);
            let bwd = tracker.half(seed, -1.0);
            let length = fwd.length + bwd.length;
            if length < MIN_LENGTH_VOXELS {
                return None;
            }
            let mut points: Vec<[f64; 3]> = bwd.points.iter().rev().map(|&p| to_mm(p, spacing)).collect();
            points.extend(fwd.points[1..].iter().map(|&p| to_mm(p, spacing)));
            let mut voxels: Vec<usize> = bwd.voxels.iter().rev().copied().collect();
            voxels.extend_from_slice(&fwd.voxels[1..]);
            Some(Streamline {
                points,
                seed,
                termination: (bwd.end, fwd.end),
                voxels,
                length,
            })
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

/// Keep streamlines that traverse at least one ROI voxel.
pub fn roi_filter(streamlines: &[Streamline], roi: &[bool]) -> Vec<Streamline> {
    streamlines
        .iter()
        .filter(|s| s.voxels.iter().any(|&v| roi.get(v).copied().unwrap_or(false)))
        .cloned()
        .collect()
}

pub fn count_fibers(streamlines: &[Streamline]) -> usize {
    streamlines.len()
}

/// Steps probed along each candidate axis when measuring region extent.
const EXTENT_STEPS: usize = 4;

/// Weight of each oriented neighbour relative to one step of extent.
const NEIGHBOUR_WEIGHT: f64 = 2.0;

/// Active voxels reached by stepping from voxel `i` along ±`dir`, stopping
/// at the first inactive one on each side.
fn axis_extent(dims: Dims, active: &[bool], i: usize, dir: [f64; 3]) -> usize {
    let (x, y, z) = dims.coords(i);
    let mut count = 0;
    for sign in [1.0, -1.0] {
        for s in 1..=EXTENT_STEPS {
            let t = sign * s as f64;
            let p = [x as f64 + t * dir[0], y as f64 + t * dir[1], z as f64 + t * dir[2]].map(|v| v.round() as isize);
            if !dims.contains(p[0], p[1], p[2]) || !active[dims.index(p[0] as usize, p[1] as usize, p[2] as usize)] {
                break;
            }
            count += 1;
        }
    }
    count
}

/// Principal directions from a direction-encoded colour map (|v|·FA).
/// Component signs are not encoded. Each voxel picks the sign pattern whose
/// axis runs furthest through the thresholded region (fibres run lengthwise
/// through bundles), plus agreement with its oriented 6-neighbours, sweeping
/// `sweeps` times in index order. Ill-posed in general; ties keep the
/// all-positive pattern.
pub fn directions_from_colormap(color: &ColorMap, fa: &ScalarMap, fa_threshold: f64, sweeps: usize) -> Result<DirectionField> {
    if color.dims != fa.dims {
        return Err(Error::Shape("colour map and FA map are not aligned".into()));
    }
    let dims = color.dims;
    let mag: Vec<[f64; 3]> = color
        .data
        .iter()
        .map(|c| {
            let n = norm(c);
            if n > 0.0 {
                c.map(|v| v / n)
            } else {
                [0.0; 3]
            }
        })
        .collect();
    let active: Vec<bool> = (0..mag.len())
        .map(|i| color.mask[i] && fa.data[i] >= fa_threshold && norm(&mag[i]) > 0.0)
        .collect();
    let patterns = [[1.0, 1.0, 1.0], [1.0, -1.0, 1.0], [1.0, 1.0, -1.0], [1.0, -1.0, -1.0]];
    let candidates = |i: usize| patterns.map(|p| [mag[i][0] * p[0], mag[i][1] * p[1], mag[i][2] * p[2]]);
    let extents: Vec<[usize; 4]> = (0..mag.len())
        .map(|i| if active[i] { candidates(i).map(|c| axis_extent(dims, &active, i, c)) } else { [0; 4] })
        .collect();
    // Extent alone seeds the orientation; neighbour agreement then refines.
    let mut dirs: Vec<[f64; 3]> = (0..mag.len())
        .map(|i| {
            let c = candidates(i);
            let k = (0..4).fold(0, |b, k| if extents[i][k] > extents[i][b] { k } else { b });
            c[k]
        })
        .collect();
    for _ in 0..sweeps {
        for i in 0..dirs.len() {
            if !active[i] {
                continue;
            }
            let (x, y, z) = dims.coords(i);
            let mut best = (f64::NEG_INFINITY, dirs[i]);
            for (k, cand) in candidates(i).into_iter().enumerate() {
                let mut score = extents[i][k] as f64;
                for (dx, dy, dz) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                    let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if dims.contains(nx, ny, nz) {
                        let j = dims.index(nx as usize, ny as usize, nz as usize);
                        if active[j] {
                            score += NEIGHBOUR_WEIGHT * dot(cand, dirs[j]).abs();
                        }
                    }
                }
                if score > best.0 + 1e-12 {
                    best = (score, cand);
                }
            }
            dirs[i] = best.1;
        }
    }
    Ok(DirectionField {
        dims,
        spacing: color.spacing,
        dirs,
    })
}
