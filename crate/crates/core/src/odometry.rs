//! The odometry pipeline: IMU knots, scan-set merging, per-point uncertainty,
//! plane association, iterated update and map maintenance.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{PointUncertainty, RunConfig};
use crate::ieskf::{iterate_update, MeasurementModel, PriorDistribution, ResidualBatch, UpdateConfig};
use crate::imu::{propagate, static_alignment, ImuError, ImuSample};
use crate::lie::{Pose3, Rot3};
use crate::map::{to_world, MapParams, MapPoint, UncertainMap};
use crate::plane::{
    fic, fit_plane, localization_weight, normal_spread, plane_covariance, point_to_plane, PlaneFit, PointChain,
};
use crate::scan::{merge, undistort, LidarScan, MergedFrame, ScanError, ScanQueues, ScanSet, TimedPoint};
use crate::spline::{Knot, KnotBuffer, PoseSource, SplineError};
use crate::state::{idx, FilterState, StateCov};
use crate::uncertainty::{acquisition_uncertainty, point_covariance, project_psd6, state_pose_block_to_left, PoseWithCov};

/// Stage names as written to the timing report, in pipeline order.
pub const STAGE_NAMES: [&str; 6] = ["Pre-process", "Pre-integration", "B-spline", "Uncertainty", "Kalman Filter", "Mapping"];

/// Fewest plane residuals worth an update.
const MIN_RESIDUALS: usize = 10;

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("imu stream is empty or shorter than the initialization span")]
    NotEnoughImu,
    #[error("imu sample {index} at {t} s is off the uniform grid")]
    NonUniformImu { index: usize, t: f64 },
    #[error("imu data ends before {0} s")]
    ImuStarved(f64),
    #[error("lidar {0} has no extrinsic guess")]
    UnknownLidar(usize),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Scan(#[from] ScanError),
}

/// Wall time per stage (ms).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    #[serde(rename = "Pre-process")]
    pub pre_process: f64,
    #[serde(rename = "Pre-integration")]
    pub pre_integration: f64,
    #[serde(rename = "B-spline")]
    pub b_spline: f64,
    #[serde(rename = "Uncertainty")]
    pub uncertainty: f64,
    #[serde(rename = "Kalman Filter")]
    pub kalman_filter: f64,
    #[serde(rename = "Mapping")]
    pub mapping: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.pre_process + self.pre_integration + self.b_spline + self.uncertainty + self.kalman_filter + self.mapping
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub t: f64,
    pub primary: usize,
    pub lidars: Vec<usize>,
    pub raw_points: usize,
    pub used_points: usize,
    pub residuals: usize,
    /// first frame only builds the map
    pub seeded: bool,
    pub updated: bool,
    pub iterations: usize,
    pub converged: bool,
    /// update objective after each accepted step
    pub objective: Vec<f64>,
    /// smallest over largest singular value of the matched normals
    pub normal_spread: f64,
    /// localization weight applied to the frame
    pub w_l: f64,
    pub map_size: usize,
    pub stages: StageTimes,
    pub total_ms: f64,
}

/// Filter state pinned to a time, with its accumulated pose-block growth.
#[derive(Debug, Clone)]
struct Anchored {
    t: f64,
    x: FilterState,
    p: StateCov,
    growth: Matrix6<f64>,
}

fn pose_block(p: &StateCov) -> Matrix6<f64> {
    p.fixed_view::<6, 6>(idx::ROT, idx::ROT).into_owned()
}

fn ext_block(p: &StateCov, slot: usize) -> Matrix6<f64> {
    let at = idx::ext_rot(slot);
    p.fixed_view::<6, 6>(at, at).into_owned()
}

#[derive(Debug, Clone, Copy)]
struct Correspondence {
    chain: PointChain,
    plane: PlaneFit,
    /// trace of the plane covariance
    spread: f64,
    s: f64,
    r: f64,
}

struct PlaneModel<'a> {
    corrs: &'a [Correspondence],
}

impl MeasurementModel<FilterState> for PlaneModel<'_> {
    fn measure(&mut self, x: &FilterState) -> ResidualBatch {
        let n = self.corrs.len();
        let rows: Vec<(f64, DVector<f64>)> =
            self.corrs.par_iter().map(|c| point_to_plane(x, &c.chain, &c.plane, c.s)).collect();
        let mut h = DMatrix::zeros(n, x.dim());
        let mut z = DVector::zeros(n);
        for (i, (zi, hi)) in rows.into_iter().enumerate() {
            z[i] = zi;
            h.row_mut(i).copy_from(&hi.transpose());
        }
        ResidualBatch { z, h, r: DVector::from_iterator(n, self.corrs.iter().map(|c| c.r)) }
    }
}

pub struct Odometry {
    cfg: RunConfig,
    ids: Vec<usize>,
    slot: HashMap<usize, usize>,
    queues: ScanQueues,
    imu: Vec<ImuSample>,
    knots: KnotBuffer,
    /// full states at knots past the latest update
    full: BTreeMap<i64, Anchored>,
    anchor: Anchored,
    t_init: f64,
    map: UncertainMap,
    frames: usize,
    trajectory: Vec<(f64, Pose3)>,
    reports: Vec<FrameReport>,
}

impl Odometry {
    /// Levels the start from the first `init_duration` seconds of IMU data,
    /// which must be stationary.
    pub fn new(cfg: RunConfig, extrinsics: &[(usize, Pose3)], imu: Vec<ImuSample>) -> Result<Self, OdometryError> {
        if imu.len() < 3 {
            return Err(OdometryError::NotEnoughImu);
        }
        let n = imu.len();
        let dt = (imu[n - 1].t - imu[0].t) / (n - 1) as f64;
        let origin = imu[0].t;
        for (i, s) in imu.iter().enumerate() {
            if (s.t - (origin + i as f64 * dt)).abs() > 0.25 * dt {
                return Err(OdometryError::NonUniformImu { index: i, t: s.t });
            }
        }
        let k_init = (cfg.init_duration / dt - 1e-9).ceil().max(0.0) as i64;
        if k_init as usize + 1 >= n {
            return Err(OdometryError::NotEnoughImu);
        }
        let (gyro_mean, acc_mean) = static_alignment(&imu[..=k_init as usize]).ok_or(OdometryError::NotEnoughImu)?;

        let ids: Vec<usize> = extrinsics.iter().map(|(id, _)| *id).collect();
        let slot = ids.iter().enumerate().map(|(s, id)| (*id, s)).collect();
        let mut x = FilterState::new(extrinsics.iter().map(|(_, p)| *p).collect());
        x.bias_gyro = gyro_mean;
        if acc_mean.norm() > 1e-6 {
            x.gravity = -acc_mean.normalize() * 9.81;
        }
        let p = initial_covariance(&cfg, ids.len());

        let mut knots = KnotBuffer::new(origin, dt);
        for j in 0..k_init {
            knots.push(Knot::at_rest(knots.time_of(j), Pose3::identity()));
        }
        let t_init = knots.time_of(k_init);
        let anchor = Anchored { t: t_init, x, p, growth: Matrix6::zeros() };
        let mut odo = Odometry {
            queues: ScanQueues::new(&ids, cfg.queue_capacity),
            map: UncertainMap::new(MapParams {
                resolution: cfg.map_resolution,
                capacity: cfg.voxel_capacity,
                tau: cfg.fic.tau,
                centre_box: Vector3::from(cfg.z_diag),
                alpha: cfg.rebalance_alpha,
            }),
            cfg,
            ids,
            slot,
            imu,
            knots,
            full: BTreeMap::new(),
            anchor: anchor.clone(),
            t_init,
            frames: 0,
            trajectory: Vec::new(),
            reports: Vec::new(),
        };
        let knot = odo.make_knot(k_init, &anchor)?;
        odo.knots.push(knot);
        odo.full.insert(k_init, anchor);
        Ok(odo)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn state(&self) -> &FilterState {
        &self.anchor.x
    }

    pub fn covariance(&self) -> &StateCov {
        &self.anchor.p
    }

    pub fn map(&self) -> &UncertainMap {
        &self.map
    }

    pub fn trajectory(&self) -> &[(f64, Pose3)] {
        &self.trajectory
    }

    pub fn reports(&self) -> &[FrameReport] {
        &self.reports
    }

    pub fn dropped_scans(&self) -> usize {
        self.queues.dropped()
    }

    pub fn init_time(&self) -> f64 {
        self.t_init
    }

    fn sample(&self, j: i64) -> Result<&ImuSample, OdometryError> {
        let t = self.knots.time_of(j);
        usize::try_from(j).ok().and_then(|i| self.imu.get(i)).ok_or(OdometryError::ImuStarved(t))
    }

    fn make_knot(&self, j: i64, a: &Anchored) -> Result<Knot, OdometryError> {
        let u = self.sample(j)?;
        let x = &a.x;
        let pose = x.pose();
        Ok(Knot {
            t: self.knots.time_of(j),
            pose: PoseWithCov::new(pose, state_pose_block_to_left(&pose, &pose_block(&a.p))),
            vel: x.vel,
            acc: x.rot.act(&(u.acc - x.bias_acc)) + x.gravity,
            gyro: u.gyro - x.bias_gyro,
            growth: a.growth,
        })
    }

    /// Moves an anchored state forward by `tau` inside interval `j`.
    fn advance(&self, a: &Anchored, j: i64, tau: f64) -> Result<Anchored, OdometryError> {
        if tau < 1e-12 {
            return Ok(a.clone());
        }
        let u = self.sample(j)?;
        let (x, p) = propagate(&a.x, &a.p, u, tau, &self.cfg.noise)?;
        let growth = a.growth + pose_block(&p) - pose_block(&a.p);
        Ok(Anchored { t: a.t + tau, x, p, growth })
    }

    /// Propagates knots until index `j` exists.
    fn ensure_knots(&mut self, j: i64) -> Result<(), OdometryError> {
        while self.knots.end_index() <= j {
            let (&last, head) = self.full.iter().next_back().expect("head state");
            let head = head.clone();
            let next_t = self.knots.time_of(last + 1);
            let mut next = self.advance(&head, last, next_t - head.t)?;
            next.t = next_t;
            let knot = self.make_knot(last + 1, &next)?;
            self.knots.truncate_after(last);
            self.knots.push(knot);
            self.full.insert(last + 1, next);
        }
        Ok(())
    }

    /// Prior at `t`, from the latest update or the knot opening its interval.
    fn prior_at(&self, t: f64) -> Result<Anchored, OdometryError> {
        let k = self.knots.interval_of(t);
        let base = match self.full.get(&k) {
            Some(a) if a.t >= self.anchor.t - 1e-12 => a,
            _ => &self.anchor,
        };
        self.advance(base, k, t - base.t)
    }

    /// Feeds one scan; returns reports of any frames it completed.
    pub fn push_scan(&mut self, scan: LidarScan) -> Result<Vec<FrameReport>, OdometryError> {
        let started = Instant::now();
        if !self.slot.contains_key(&scan.lidar_id) {
            return Err(OdometryError::UnknownLidar(scan.lidar_id));
        }
        self.queues.push(scan)?;
        let mut out = Vec::new();
        while self.queues.ready() {
            let set = self.queues.pop_set()?;
            let t_i = set.merge_time();
            if t_i <= self.anchor.t + 1e-9 || set.earliest_point() < self.knots.time_of(self.knots.first_index()) {
                log::debug!("skipping scan set at {t_i:.3} s");
                continue;
            }
            let pre = started.elapsed().as_secs_f64() * 1e3;
            let report = self.process(set, pre)?;
            out.push(report);
        }
        Ok(out)
    }

    /// Runs a whole recording; scans are fed in arrival order.
    pub fn run(&mut self, mut scans: Vec<LidarScan>) -> Result<(), OdometryError> {
        scans.sort_by(|a, b| a.arrival().total_cmp(&b.arrival()).then(a.lidar_id.cmp(&b.lidar_id)));
        for s in scans {
            if s.arrival() <= self.t_init {
                continue;
            }
            self.push_scan(s)?;
        }
        Ok(())
    }

    fn process(&mut self, set: ScanSet, pre_ms: f64) -> Result<FrameReport, OdometryError> {
        let mut stages = StageTimes { pre_process: pre_ms, ..Default::default() };
        let mode = self.cfg.mode;
        let t_i = set.merge_time();
        let primary_id = set.scans[set.primary].lidar_id;
        let primary_slot = self.slot[&primary_id];

        // propagation to the merge time and two knots beyond it
        let clock = Instant::now();
        let k_i = self.knots.interval_of(t_i);
        self.ensure_knots(k_i + 2)?;
        let prior = self.prior_at(t_i)?;
        stages.pre_integration = ms(clock);

        // motion compensation and merging
        let clock = Instant::now();
        let view = self.knots.view(mode.interpolation());
        let ext: HashMap<usize, Pose3> = self.ids.iter().map(|id| (*id, prior.x.extrinsics[self.slot[id]])).collect();
        let undistorted = set
            .scans
            .iter()
            .map(|s| undistort(s, &view, &ext[&s.lidar_id]))
            .collect::<Result<Vec<_>, _>>()?;
        let merged = merge(&undistorted, set.primary, &view, &ext)?;
        let raw_points = merged.len();
        let frame = merged.downsample(self.cfg.scan_voxel);
        stages.b_spline = ms(clock);

        let clock = Instant::now();
        let covs = self.point_covariances(&frame, &prior, primary_slot)?;
        stages.uncertainty = ms(clock);

        let clock = Instant::now();
        let seeded = self.map.is_empty();
        let chains: Vec<PointChain> = frame
            .points
            .iter()
            .map(|p| PointChain {
                lidar_slot: self.slot[&p.raw.lidar_id],
                relative: frame.relative[&p.raw.lidar_id],
                local: p.local,
            })
            .collect();
        let mut report = FrameReport {
            frame: self.frames,
            t: t_i,
            primary: primary_id,
            lidars: set.scans.iter().map(|s| s.lidar_id).collect(),
            raw_points,
            used_points: frame.len(),
            residuals: 0,
            seeded,
            updated: false,
            iterations: 0,
            converged: false,
            objective: Vec::new(),
            normal_spread: 0.0,
            w_l: 1.0,
            map_size: 0,
            stages: StageTimes::default(),
            total_ms: 0.0,
        };
        let mut posterior = prior.clone();
        if !seeded {
            let corrs = self.associate(&chains, &prior.x);
            report.residuals = corrs.len();
            let normals: Vec<Vector3<f64>> = corrs.iter().map(|c| c.plane.normal).collect();
            report.normal_spread = normal_spread(&normals);
            if mode.weighted() {
                report.w_l = localization_weight(&normals, &self.cfg.fic);
            }
            if corrs.len() >= MIN_RESIDUALS {
                let mut model = PlaneModel { corrs: &corrs };
                let dist = PriorDistribution { anchor: prior.x.clone(), cov: prior.p.clone() };
                let ucfg = UpdateConfig { epsilon: self.cfg.epsilon, max_iter: self.cfg.max_iter };
                match iterate_update(&dist, &mut model, report.w_l, &ucfg) {
                    Ok(res) => {
                        report.updated = true;
                        report.iterations = res.iterations;
                        report.converged = res.converged;
                        report.objective = res.objective;
                        posterior.x = res.state;
                        posterior.p = res.cov;
                    }
                    Err(e) => log::warn!("frame at {t_i:.3} s kept its prior: {e}"),
                }
            } else {
                log::warn!("frame at {t_i:.3} s has only {} plane matches", corrs.len());
            }
        }
        self.commit(k_i, &prior, posterior)?;
        stages.kalman_filter = ms(clock);

        let clock = Instant::now();
        let x = self.anchor.x.clone();
        for (chain, cov) in chains.iter().zip(&covs) {
            let (xyz, cov) = to_world(&x, chain, cov, primary_slot);
            self.map.insert(MapPoint { xyz, cov, frame: self.frames });
        }
        self.map.maybe_rebalance();
        stages.mapping = ms(clock);

        report.map_size = self.map.len();
        report.total_ms = stages.total();
        report.stages = stages;
        self.trajectory.push((t_i, x.pose()));
        self.frames += 1;
        self.reports.push(report.clone());
        Ok(report)
    }

    /// Point covariances in the primary frame at the merge time.
    fn point_covariances(
        &self,
        frame: &MergedFrame,
        prior: &Anchored,
        primary_slot: usize,
    ) -> Result<Vec<Matrix3<f64>>, OdometryError> {
        let z = Matrix3::from_diagonal(&Vector3::from(self.cfg.z_diag));
        let how = self.cfg.mode.point_uncertainty();
        let view = self.knots.view(self.cfg.mode.interpolation());
        let x = &prior.x;
        let ext_with_cov = |slot: usize| {
            let e = x.extrinsics[slot];
            PoseWithCov::new(e, state_pose_block_to_left(&e, &ext_block(&prior.p, slot)))
        };
        let ext_p = ext_with_cov(primary_slot);
        let end_inv = view.pose_at(frame.time)?.inverse();
        let prior_pose = x.pose();
        let end_cov = state_pose_block_to_left(&prior_pose, &pose_block(&prior.p));
        let mut frame_rot = Matrix6::identity();
        frame_rot.fixed_view_mut::<3, 3>(3, 3).copy_from(&prior_pose.rot.matrix().transpose());

        frame
            .points
            .par_iter()
            .map(|mp| {
                let raw: &TimedPoint = &mp.raw;
                let slot = self.slot[&raw.lidar_id];
                let ext_s = ext_with_cov(slot);
                let rel = end_inv * view.pose_at(raw.time)?;
                let chain = match how {
                    PointUncertainty::MeasurementOnly => PoseWithCov::certain(ext_p.pose.inverse() * rel * ext_s.pose),
                    PointUncertainty::EndOfScan => {
                        acquisition_uncertainty(&ext_p, &PoseWithCov::new(rel, state_pose_block_to_left(&rel, &end_cov)), &ext_s)
                    }
                    PointUncertainty::PointWise => {
                        let at = self.knots.assigned_knot(raw.time)?;
                        let gap = project_psd6(&(prior.growth - at.growth));
                        let rel_cov = state_pose_block_to_left(&rel, &(frame_rot * gap * frame_rot.transpose()));
                        acquisition_uncertainty(&ext_p, &PoseWithCov::new(rel, rel_cov), &ext_s)
                    }
                };
                Ok(point_covariance(&chain, raw, &z).cov)
            })
            .collect::<Result<Vec<_>, SplineError>>()
            .map_err(OdometryError::from)
    }

    fn associate(&self, chains: &[PointChain], x: &FilterState) -> Vec<Correspondence> {
        let cfg = &self.cfg;
        let max_d2 = cfg.max_neighbor_dist * cfg.max_neighbor_dist;
        let mut corrs: Vec<Correspondence> = chains
            .par_iter()
            .filter_map(|chain| {
                let p = chain.in_world(x);
                let nn = self.map.knn(&p, cfg.knn);
                if nn.len() < cfg.knn || nn.iter().any(|(_, d2)| *d2 > max_d2) {
                    return None;
                }
                let pts: Vec<Vector3<f64>> = nn.iter().map(|(id, _)| self.map.get(*id).expect("stored").xyz).collect();
                let plane = fit_plane(&pts, cfg.plane_threshold).ok()?;
                if plane.signed_distance(&p).abs() > cfg.max_residual {
                    return None;
                }
                let covs: Vec<Matrix3<f64>> = nn.iter().map(|(id, _)| self.map.get(*id).expect("stored").cov).collect();
                let (sigma, _) = plane_covariance(&covs, cfg.fic.tau).ok()?;
                Some(Correspondence { chain: *chain, plane, spread: sigma.trace(), s: 1.0, r: cfg.uniform_noise })
            })
            .collect();
        if cfg.mode.weighted() && !corrs.is_empty() {
            let lo = corrs.iter().map(|c| c.spread).fold(f64::INFINITY, f64::min);
            let hi = corrs.iter().map(|c| c.spread).fold(f64::NEG_INFINITY, f64::max);
            let f = &cfg.fic;
            for c in &mut corrs {
                c.s = fic(c.spread, lo, hi, f.s.1, f.s.0);
                c.r = fic(c.spread, lo, hi, f.r.1, f.r.0);
            }
        }
        corrs
    }

    /// Installs the posterior at the merge time: earlier knots move rigidly
    /// with the correction, later ones are propagated again.
    fn commit(&mut self, k_i: i64, prior: &Anchored, mut posterior: Anchored) -> Result<(), OdometryError> {
        let correction = posterior.x.pose() * prior.x.pose().inverse();
        let ad = correction.adjoint();
        let rc: Rot3 = correction.rot;
        for (_, knot) in self.knots.iter_mut() {
            if knot.t > posterior.t + 1e-9 {
                continue;
            }
            knot.pose = PoseWithCov::new(correction * knot.pose.pose, ad * knot.pose.cov * ad.transpose());
            knot.vel = rc.act(&knot.vel);
            knot.acc = rc.act(&knot.acc);
        }
        posterior.growth = prior.growth;
        self.full.clear();
        self.knots.truncate_after(k_i);
        let on_knot = (posterior.t - self.knots.time_of(k_i)).abs() < 1e-9;
        if on_knot {
            let knot = self.make_knot(k_i, &posterior)?;
            self.knots.truncate_after(k_i - 1);
            self.knots.push(knot);
            self.full.insert(k_i, posterior.clone());
        } else {
            let next_t = self.knots.time_of(k_i + 1);
            let mut next = self.advance(&posterior, k_i, next_t - posterior.t)?;
            next.t = next_t;
            let knot = self.make_knot(k_i + 1, &next)?;
            self.knots.push(knot);
            self.full.insert(k_i + 1, next);
        }
        self.anchor = posterior;
        let keep = self.knots.interval_of(self.anchor.t - self.cfg.history);
        self.knots.drop_before(keep);
        Ok(())
    }
}

fn ms(clock: Instant) -> f64 {
    clock.elapsed().as_secs_f64() * 1e3
}

fn initial_covariance(cfg: &RunConfig, lidars: usize) -> StateCov {
    let s = &cfg.initial_std;
    let dim = idx::EXT + 6 * lidars;
    let mut d = DVector::zeros(dim);
    let mut set = |at: usize, sd: f64| d.fixed_rows_mut::<3>(at).fill(sd * sd);
    set(idx::ROT, s.rot);
    set(idx::POS, s.pos);
    set(idx::VEL, s.vel);
    set(idx::BG, s.bias_gyro);
    set(idx::BA, s.bias_acc);
    set(idx::GRAV, s.gravity);
    for i in 0..lidars {
        set(idx::ext_rot(i), s.ext_rot);
        set(idx::ext_pos(i), s.ext_pos);
    }
    DMatrix::from_diagonal(&d)
}
