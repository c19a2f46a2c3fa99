//! World map of points with covariances: trace gating, one-point-per-voxel
//! downsampling that prefers certain points near the voxel centre, and
//! exact nearest-neighbour queries.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::kdtree::KdTree;
use crate::lie::Rot3;
use crate::plane::PointChain;
use crate::state::FilterState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub xyz: Vector3<f64>,
    /// world-frame covariance (m²)
    pub cov: Matrix3<f64>,
    /// frame that inserted the point
    pub frame: usize,
}

impl MapPoint {
    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Accepted,
    Gated,
    /// the incoming point took the place of this stored id
    Displaced(usize),
    /// voxel full and the point did not qualify for replacement
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapParams {
    /// voxel edge (m)
    pub resolution: f64,
    pub capacity: usize,
    /// trace gate
    pub tau: f64,
    /// per-axis half-widths of the replacement box around a voxel centre (m)
    pub centre_box: Vector3<f64>,
    /// largest child share before a subtree rebuild
    pub alpha: f64,
}

impl Default for MapParams {
    fn default() -> Self {
        MapParams { resolution: 0.4, capacity: 1, tau: 1.0, centre_box: Vector3::repeat(0.05), alpha: 0.7 }
    }
}

/// Carries a merged point into the world with the optimised state, and
/// rotates its covariance from the primary LiDAR frame into the world.
pub fn to_world(x: &FilterState, chain: &PointChain, cov: &Matrix3<f64>, primary_slot: usize) -> (Vector3<f64>, Matrix3<f64>) {
    let r: Rot3 = x.rot * x.extrinsics[primary_slot].rot;
    let m = r.matrix();
    (chain.in_world(x), m * cov * m.transpose())
}

pub struct UncertainMap {
    params: MapParams,
    tree: KdTree,
    points: Vec<MapPoint>,
    voxels: HashMap<[i64; 3], Vec<usize>>,
}

impl UncertainMap {
    pub fn new(params: MapParams) -> Self {
        UncertainMap { params, tree: KdTree::new(params.alpha), points: Vec::new(), voxels: HashMap::new() }
    }

    pub fn params(&self) -> &MapParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn voxel_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        let r = self.params.resolution;
        [(p.x / r).floor() as i64, (p.y / r).floor() as i64, (p.z / r).floor() as i64]
    }

    fn centre_of(&self, key: &[i64; 3]) -> Vector3<f64> {
        let r = self.params.resolution;
        Vector3::new(key[0] as f64 + 0.5, key[1] as f64 + 0.5, key[2] as f64 + 0.5) * r
    }

    fn near_centre(&self, key: &[i64; 3], p: &Vector3<f64>) -> bool {
        let d = (p - self.centre_of(key)).abs();
        d.iter().zip(self.params.centre_box.iter()).all(|(a, b)| a <= b)
    }

    pub fn get(&self, id: usize) -> Option<&MapPoint> {
        if self.tree.contains(id) {
            self.points.get(id)
        } else {
            None
        }
    }

    /// Stored points and their ids.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &MapPoint)> {
        self.tree.items().map(move |(id, _)| (id, &self.points[id]))
    }

    fn store(&mut self, key: [i64; 3], point: MapPoint) -> usize {
        let id = self.points.len();
        self.points.push(point);
        self.tree.insert(id, [point.xyz.x, point.xyz.y, point.xyz.z]);
        self.voxels.entry(key).or_default().push(id);
        id
    }

    pub fn insert(&mut self, point: MapPoint) -> InsertOutcome {
        if !(point.trace() < self.params.tau) {
            return InsertOutcome::Gated;
        }
        let key = self.voxel_of(&point.xyz);
        let incumbents = self.voxels.get(&key).cloned().unwrap_or_default();
        if incumbents.len() < self.params.capacity {
            self.store(key, point);
            return InsertOutcome::Accepted;
        }
        if !self.near_centre(&key, &point.xyz) {
            return InsertOutcome::Rejected;
        }
        // an off-centre incumbent goes first, the least certain one
        let worst_of = |ids: &mut dyn Iterator<Item = usize>| {
            ids.max_by(|a, b| self.points[*a].trace().total_cmp(&self.points[*b].trace()).then(a.cmp(b)))
        };
        let off_centre = worst_of(&mut incumbents.iter().copied().filter(|&i| !self.near_centre(&key, &self.points[i].xyz)));
        let victim = match off_centre {
            Some(v) => v,
            None => {
                let v = worst_of(&mut incumbents.iter().copied()).expect("full voxel");
                if point.trace() >= self.points[v].trace() {
                    return InsertOutcome::Rejected;
                }
                v
            }
        };
        self.tree.remove(victim);
        if let Some(list) = self.voxels.get_mut(&key) {
            list.retain(|&i| i != victim);
        }
        self.store(key, point);
        InsertOutcome::Displaced(victim)
    }

    /// Up to `k` nearest stored points, nearest first, ties by insertion order.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        self.tree.knn(&[query.x, query.y, query.z], k)
    }

    pub fn maybe_rebalance(&mut self) -> usize {
        self.tree.maybe_rebalance()
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    /// ASCII PLY with `x y z trace` per vertex.
    pub fn write_ply<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut items: Vec<(usize, &MapPoint)> = self.iter().collect();
        items.sort_by_key(|(id, _)| *id);
        writeln!(out, "ply")?;
        writeln!(out, "format ascii 1.0")?;
        writeln!(out, "element vertex {}", items.len())?;
        for name in ["x", "y", "z", "trace"] {
            writeln!(out, "property double {name}")?;
        }
        writeln!(out, "end_header")?;
        for (_, p) in items {
            writeln!(out, "{} {} {} {}", p.xyz.x, p.xyz.y, p.xyz.z, p.trace())?;
        }
        Ok(())
    }
}
