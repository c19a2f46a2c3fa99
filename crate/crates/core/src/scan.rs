//! Scan bookkeeping for several asynchronous LiDARs: queueing, choosing one
//! scan per sensor, motion compensation and merging into one frame.

use std::collections::{HashMap, VecDeque};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::Pose3;
use crate::spline::{PoseSource, SplineError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPoint {
    /// in the source LiDAR frame (m)
    pub xyz: Vector3<f64>,
    /// acquisition time (s)
    pub time: f64,
    pub lidar_id: usize,
}

impl TimedPoint {
    pub fn new(xyz: Vector3<f64>, time: f64, lidar_id: usize) -> Self {
        TimedPoint { xyz, time, lidar_id }
    }

    pub fn range(&self) -> f64 {
        self.xyz.norm()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScanError {
    #[error("scan of lidar {0} has no points")]
    Empty(usize),
    #[error("point with non-positive range in lidar {0}")]
    ZeroRange(usize),
    #[error("point of lidar {got} placed in scan of lidar {expected}")]
    MixedSources { expected: usize, got: usize },
    #[error("unknown lidar id {0}")]
    UnknownLidar(usize),
    #[error("no complete scan set available")]
    NotReady,
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Time-ordered batch from one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    pub lidar_id: usize,
    pub points: Vec<TimedPoint>,
}

impl LidarScan {
    /// Sorts the points by time and validates them.
    pub fn new(lidar_id: usize, mut points: Vec<TimedPoint>) -> Result<Self, ScanError> {
        if points.is_empty() {
            return Err(ScanError::Empty(lidar_id));
        }
        for p in &points {
            if p.lidar_id != lidar_id {
                return Err(ScanError::MixedSources { expected: lidar_id, got: p.lidar_id });
            }
            if !(p.range() > 0.0) {
                return Err(ScanError::ZeroRange(lidar_id));
            }
        }
        points.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(LidarScan { lidar_id, points })
    }

    /// Time of the latest point.
    pub fn arrival(&self) -> f64 {
        self.points.last().map_or(f64::NEG_INFINITY, |p| p.time)
    }

    pub fn start(&self) -> f64 {
        self.points.first().map_or(f64::NEG_INFINITY, |p| p.time)
    }
}

/// Index into each queue of the chosen combination: the one with the smallest
/// sum of pairwise arrival differences, ties going to the earliest latest
/// arrival.
pub fn select_scan_set(queues: &[&[f64]]) -> Result<Vec<usize>, ScanError> {
    if queues.is_empty() || queues.iter().any(|q| q.is_empty()) {
        return Err(ScanError::NotReady);
    }
    let mut current = vec![0usize; queues.len()];
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    loop {
        let arrivals: Vec<f64> = current.iter().zip(queues).map(|(&i, q)| q[i]).collect();
        let mut spread = 0.0;
        for a in 0..arrivals.len() {
            for b in a + 1..arrivals.len() {
                spread += (arrivals[a] - arrivals[b]).abs();
            }
        }
        let latest = arrivals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let better = match &best {
            None => true,
            Some((s, l, _)) => spread < *s || (spread == *s && latest < *l),
        };
        if better {
            best = Some((spread, latest, current.clone()));
        }
        // odometer increment
        let mut d = 0;
        loop {
            if d == current.len() {
                return Ok(best.expect("at least one combination").2);
            }
            current[d] += 1;
            if current[d] < queues[d].len() {
                break;
            }
            current[d] = 0;
            d += 1;
        }
    }
}

/// One scan per LiDAR; `primary` indexes the member with the latest arrival.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSet {
    pub scans: Vec<LidarScan>,
    pub primary: usize,
}

impl ScanSet {
    pub fn new(scans: Vec<LidarScan>) -> Self {
        let primary = scans
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.arrival().total_cmp(&b.1.arrival()).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i);
        ScanSet { scans, primary }
    }

    pub fn merge_time(&self) -> f64 {
        self.scans[self.primary].arrival()
    }

    pub fn earliest_point(&self) -> f64 {
        self.scans.iter().map(LidarScan::start).fold(f64::INFINITY, f64::min)
    }
}

/// Bounded per-LiDAR queues with oldest-drop.
#[derive(Debug, Clone)]
pub struct ScanQueues {
    ids: Vec<usize>,
    queues: Vec<VecDeque<LidarScan>>,
    capacity: usize,
    dropped: usize,
}

impl ScanQueues {
    pub fn new(ids: &[usize], capacity: usize) -> Self {
        ScanQueues { ids: ids.to_vec(), queues: vec![VecDeque::new(); ids.len()], capacity: capacity.max(1), dropped: 0 }
    }

    fn slot(&self, lidar_id: usize) -> Result<usize, ScanError> {
        self.ids.iter().position(|&i| i == lidar_id).ok_or(ScanError::UnknownLidar(lidar_id))
    }

    pub fn push(&mut self, scan: LidarScan) -> Result<(), ScanError> {
        let s = self.slot(scan.lidar_id)?;
        let q = &mut self.queues[s];
        if q.len() == self.capacity {
            q.pop_front();
            self.dropped += 1;
            log::warn!("scan queue of lidar {} full, dropping oldest scan", scan.lidar_id);
        }
        q.push_back(scan);
        Ok(())
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn ready(&self) -> bool {
        self.queues.iter().all(|q| !q.is_empty())
    }

    /// Removes and returns the selected set. Scans older than the selected one
    /// in each queue are discarded, later ones stay queued.
    pub fn pop_set(&mut self) -> Result<ScanSet, ScanError> {
        let arrivals: Vec<Vec<f64>> = self.queues.iter().map(|q| q.iter().map(LidarScan::arrival).collect()).collect();
        let views: Vec<&[f64]> = arrivals.iter().map(Vec::as_slice).collect();
        let pick = select_scan_set(&views)?;
        let scans = self
            .queues
            .iter_mut()
            .zip(&pick)
            .map(|(q, &i)| {
                self.dropped += i;
                q.drain(..=i).next_back().expect("selected index exists")
            })
            .collect();
        Ok(ScanSet::new(scans))
    }
}

/// Scan with each point re-expressed in the sensor frame at the scan's
/// arrival time.
#[derive(Debug, Clone, PartialEq)]
pub struct UndistortedScan {
    pub scan: LidarScan,
    pub points: Vec<Vector3<f64>>,
}

/// `p^u = T_IS⁻¹·T(t_l)⁻¹·T(t_j)·T_IS·p` for every point.
pub fn undistort<S: PoseSource + Sync>(
    scan: &LidarScan,
    source: &S,
    extrinsic: &Pose3,
) -> Result<UndistortedScan, ScanError> {
    let t_l = scan.arrival();
    let end_inv = source.pose_at(t_l)?.inverse();
    let ext_inv = extrinsic.inverse();
    let points = scan
        .points
        .par_iter()
        .map(|p| {
            let rel = end_inv * source.pose_at(p.time)?;
            Ok(ext_inv.transform_point(&rel.transform_point(&extrinsic.transform_point(&p.xyz))))
        })
        .collect::<Result<Vec<_>, SplineError>>()?;
    Ok(UndistortedScan { scan: scan.clone(), points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergedPoint {
    /// in the primary LiDAR frame at the merge time
    pub xyz: Vector3<f64>,
    /// undistorted, in the source frame at the source scan's arrival
    pub local: Vector3<f64>,
    /// untouched source measurement
    pub raw: TimedPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedFrame {
    pub primary_id: usize,
    pub time: f64,
    /// arrival time of each member scan, by lidar id
    pub arrivals: HashMap<usize, f64>,
    /// `T(t_i)⁻¹·T(t_l)` per lidar id
    pub relative: HashMap<usize, Pose3>,
    pub points: Vec<MergedPoint>,
}

impl MergedFrame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn clone_header(&self) -> MergedFrame {
        MergedFrame {
            primary_id: self.primary_id,
            time: self.time,
            arrivals: self.arrivals.clone(),
            relative: self.relative.clone(),
            points: Vec::new(),
        }
    }

    /// Keeps the point closest to each voxel centre; output order follows the
    /// first occurrence of each voxel.
    pub fn downsample(&self, resolution: f64) -> MergedFrame {
        if resolution <= 0.0 {
            return self.clone();
        }
        let mut best: HashMap<[i64; 3], (usize, f64)> = HashMap::new();
        let mut order = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            let key = p.xyz.map(|c| (c / resolution).floor() as i64);
            let key = [key.x, key.y, key.z];
            let centre = Vector3::new(key[0] as f64 + 0.5, key[1] as f64 + 0.5, key[2] as f64 + 0.5) * resolution;
            let d = (p.xyz - centre).norm_squared();
            match best.get_mut(&key) {
                Some(entry) => {
                    if d < entry.1 {
                        *entry = (i, d);
                    }
                }
                None => {
                    best.insert(key, (i, d));
                    order.push(key);
                }
            }
        }
        let points = order.iter().map(|k| self.points[best[k].0]).collect();
        MergedFrame { points, ..self.clone_header() }
    }
}

/// Carries every undistorted scan into the primary frame at the merge time:
/// `T_IP⁻¹·T(t_i)⁻¹·T(t_l)·T_IS·p^u`.
pub fn merge<S: PoseSource>(
    scans: &[UndistortedScan],
    primary: usize,
    source: &S,
    extrinsics: &HashMap<usize, Pose3>,
) -> Result<MergedFrame, ScanError> {
    let head = &scans[primary].scan;
    let t_i = head.arrival();
    let ext = |id: usize| extrinsics.get(&id).copied().ok_or(ScanError::UnknownLidar(id));
    let ext_p_inv = ext(head.lidar_id)?.inverse();
    let merge_inv = source.pose_at(t_i)?.inverse();
    let mut points = Vec::with_capacity(scans.iter().map(|s| s.points.len()).sum());
    let mut arrivals = HashMap::new();
    let mut relative = HashMap::new();
    for (k, s) in scans.iter().enumerate() {
        let t_l = s.scan.arrival();
        arrivals.insert(s.scan.lidar_id, t_l);
        let pair = s.points.iter().zip(&s.scan.points);
        if k == primary {
            relative.insert(s.scan.lidar_id, Pose3::identity());
            points.extend(pair.map(|(p, raw)| MergedPoint { xyz: *p, local: *p, raw: *raw }));
            continue;
        }
        let rel = merge_inv * source.pose_at(t_l)?;
        relative.insert(s.scan.lidar_id, rel);
        let chain = ext_p_inv * rel * ext(s.scan.lidar_id)?;
        points.extend(pair.map(|(p, raw)| MergedPoint { xyz: chain.transform_point(p), local: *p, raw: *raw }));
    }
    Ok(MergedFrame { primary_id: head.lidar_id, time: t_i, arrivals, relative, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{Rot3, Twist6};
    use proptest::prelude::*;

    struct Analytic<F: Fn(f64) -> Pose3>(F);

    impl<F: Fn(f64) -> Pose3> PoseSource for Analytic<F> {
        fn pose_at(&self, t: f64) -> Result<Pose3, SplineError> {
            Ok((self.0)(t))
        }
    }

    fn scan(id: usize, times: &[f64]) -> LidarScan {
        let pts = times.iter().map(|&t| TimedPoint::new(Vector3::new(1.0, t, 0.5), t, id)).collect();
        LidarScan::new(id, pts).unwrap()
    }

    #[test]
    fn scan_validation() {
        assert_eq!(LidarScan::new(0, vec![]), Err(ScanError::Empty(0)));
        let bad = vec![TimedPoint::new(Vector3::zeros(), 0.0, 0)];
        assert_eq!(LidarScan::new(0, bad), Err(ScanError::ZeroRange(0)));
        let s = scan(2, &[0.3, 0.1, 0.2]);
        assert_eq!(s.arrival(), 0.3);
        assert_eq!(s.points[0].time, 0.1);
    }

    #[test]
    fn selection_cases() {
        assert_eq!(select_scan_set(&[&[0.4]]).unwrap(), vec![0]);
        assert_eq!(select_scan_set(&[&[0.10], &[0.02, 0.09]]).unwrap(), vec![0, 1]);
        assert_eq!(select_scan_set(&[&[0.1], &[]]), Err(ScanError::NotReady));
        let set = ScanSet::new(vec![scan(0, &[0.05, 0.10]), scan(1, &[0.01, 0.09])]);
        assert_eq!(set.primary, 0);
        assert_eq!(set.merge_time(), 0.10);
    }

    fn exhaustive(queues: &[Vec<f64>]) -> f64 {
        let mut best = f64::INFINITY;
        let total: usize = queues.iter().map(Vec::len).product();
        for mut code in 0..total {
            let mut arr = Vec::new();
            for q in queues {
                arr.push(q[code % q.len()]);
                code /= q.len();
            }
            let mut s = 0.0;
            for a in 0..arr.len() {
                for b in a + 1..arr.len() {
                    s += (arr[a] - arr[b]).abs();
                }
            }
            best = f64::min(best, s);
        }
        best
    }

    proptest! {
        #[test]
        fn selection_matches_exhaustive(queues in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..=4), 1..=4)) {
            let views: Vec<&[f64]> = queues.iter().map(Vec::as_slice).collect();
            let pick = select_scan_set(&views).unwrap();
            let arr: Vec<f64> = pick.iter().zip(&queues).map(|(&i, q)| q[i]).collect();
            let mut s = 0.0;
            for a in 0..arr.len() {
                for b in a + 1..arr.len() {
                    s += (arr[a] - arr[b]).abs();
                }
            }
            prop_assert!((s - exhaustive(&queues)).abs() < 1e-12);
        }

        #[test]
        fn merge_keeps_count_and_sources(n0 in 1usize..30, n1 in 1usize..30, v in -2.0f64..2.0) {
            let src = Analytic(move |t: f64| Pose3::exp(&(Twist6::new(0.0, 0.0, 0.3, v, 0.0, 0.0) * t)));
            let s0 = scan(0, &(0..n0).map(|i| 0.01 * i as f64).collect::<Vec<_>>());
            let s1 = scan(1, &(0..n1).map(|i| 0.012 * i as f64).collect::<Vec<_>>());
            let ext: HashMap<usize, Pose3> = [(0, Pose3::identity()), (1, Pose3::from_translation(Vector3::new(0.2, 0.0, 0.0)))].into();
            let u: Vec<UndistortedScan> = [s0, s1].iter().map(|s| undistort(s, &src, &ext[&s.lidar_id]).unwrap()).collect();
            let set = ScanSet::new(u.iter().map(|x| x.scan.clone()).collect());
            let m = merge(&u, set.primary, &src, &ext).unwrap();
            prop_assert_eq!(m.len(), n0 + n1);
            prop_assert_eq!(m.points.iter().filter(|p| p.raw.lidar_id == 1).count(), n1);
        }
    }

    #[test]
    fn stationary_undistortion_is_identity() {
        let src = Analytic(|_| Pose3::new(Rot3::exp(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(1.0, 2.0, 3.0)));
        let s = scan(0, &[0.0, 0.03, 0.07, 0.1]);
        let ext = Pose3::new(Rot3::exp(&Vector3::new(0.0, 0.4, 0.0)), Vector3::new(0.1, 0.0, 0.2));
        let u = undistort(&s, &src, &ext).unwrap();
        for (a, b) in u.points.iter().zip(&s.points) {
            assert!((a - b.xyz).norm() < 1e-14);
        }
    }

    #[test]
    fn constant_velocity_undistortion() {
        let v = Vector3::new(2.0, 0.0, 0.0);
        let src = Analytic(move |t: f64| Pose3::from_translation(v * t));
        let s = LidarScan::new(
            0,
            vec![TimedPoint::new(Vector3::new(5.0, 1.0, 0.0), 0.05, 0), TimedPoint::new(Vector3::new(5.0, 0.0, 0.0), 0.1, 0)],
        )
        .unwrap();
        let u = undistort(&s, &src, &Pose3::identity()).unwrap();
        // the sensor moved +0.1 m in x since the first point
        assert!((u.points[0] - Vector3::new(4.9, 1.0, 0.0)).norm() < 1e-14);
        assert!((u.points[1] - Vector3::new(5.0, 0.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn same_time_identity_extrinsics_concatenate() {
        let src = Analytic(|t: f64| Pose3::from_translation(Vector3::new(t, 0.0, 0.0)));
        let a = scan(0, &[0.1]);
        let b = scan(1, &[0.1]);
        let ext: HashMap<usize, Pose3> = [(0, Pose3::identity()), (1, Pose3::identity())].into();
        let u = vec![undistort(&a, &src, &ext[&0]).unwrap(), undistort(&b, &src, &ext[&1]).unwrap()];
        let m = merge(&u, 0, &src, &ext).unwrap();
        assert_eq!(m.points[0].xyz, a.points[0].xyz);
        assert_eq!(m.points[1].xyz, b.points[0].xyz);
    }

    #[test]
    fn primary_choice_does_not_change_world_points() {
        let src = Analytic(|t: f64| {
            Pose3::new(Rot3::exp(&Vector3::new(0.0, 0.1 * t, 0.5 * t)), Vector3::new(1.5 * t, 0.3 * t * t, 0.0))
        });
        let ext: HashMap<usize, Pose3> = [
            (0, Pose3::new(Rot3::exp(&Vector3::new(0.0, 0.0, 0.3)), Vector3::new(0.3, 0.1, 0.0))),
            (1, Pose3::new(Rot3::exp(&Vector3::new(0.2, 0.0, -0.5)), Vector3::new(-0.2, 0.0, 0.1))),
        ]
        .into();
        let a = scan(0, &[0.00, 0.02, 0.06, 0.10]);
        let b = scan(1, &[0.01, 0.05, 0.08, 0.13]);
        let u = vec![undistort(&a, &src, &ext[&0]).unwrap(), undistort(&b, &src, &ext[&1]).unwrap()];
        let world = |m: &MergedFrame| -> Vec<Vector3<f64>> {
            let t = src.pose_at(m.time).unwrap() * ext[&m.primary_id];
            m.points.iter().map(|p| t.transform_point(&p.xyz)).collect()
        };
        let w0 = world(&merge(&u, 0, &src, &ext).unwrap());
        let w1 = world(&merge(&u, 1, &src, &ext).unwrap());
        for (p, q) in w0.iter().zip(&w1) {
            assert!((p - q).norm() < 1e-6);
        }
        // and they agree with direct world projection at acquisition time
        for (p, raw) in w0.iter().zip(a.points.iter().chain(&b.points)) {
            let direct = (src.pose_at(raw.time).unwrap() * ext[&raw.lidar_id]).transform_point(&raw.xyz);
            assert!((p - direct).norm() < 1e-12);
        }
    }

    #[test]
    fn queues_drop_oldest_and_stale() {
        let mut q = ScanQueues::new(&[0, 1], 2);
        q.push(scan(0, &[0.1])).unwrap();
        q.push(scan(0, &[0.2])).unwrap();
        q.push(scan(0, &[0.3])).unwrap();
        assert_eq!(q.dropped(), 1);
        assert!(!q.ready());
        assert!(q.push(scan(7, &[0.1])).is_err());
        q.push(scan(1, &[0.31])).unwrap();
        let set = q.pop_set().unwrap();
        assert_eq!(set.scans[0].arrival(), 0.3);
        assert_eq!(set.primary, 1);
        assert_eq!(q.dropped(), 2);
        assert!(!q.ready());
    }

    #[test]
    fn downsample_keeps_one_per_voxel() {
        let pts: Vec<MergedPoint> = [[0.1, 0.1, 0.1], [0.24, 0.26, 0.25], [0.6, 0.1, 0.1]]
            .iter()
            .map(|c| {
                let v = Vector3::new(c[0], c[1], c[2]);
                MergedPoint { xyz: v, local: v, raw: TimedPoint::new(v, 0.0, 0) }
            })
            .collect();
        let m = MergedFrame { primary_id: 0, time: 0.0, arrivals: HashMap::new(), relative: HashMap::new(), points: pts };
        let d = m.downsample(0.5);
        assert_eq!(d.len(), 2);
        assert_eq!(d.points[0].xyz, Vector3::new(0.24, 0.26, 0.25));
    }
}
