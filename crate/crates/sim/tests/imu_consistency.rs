//! The synthetic IMU stream integrates back to the true trajectory.

use ctlio_core::imu::{discrete_step, ImuSample};
use ctlio_core::state::FilterState;
use ctlio_sim::synth::{synth_imu, GRAVITY};
use ctlio_sim::Scenario;

fn dead_reckon(s: &Scenario, imu: &[ImuSample], from: usize, steps: usize) -> (f64, f64) {
    let k = s.trajectory.at(imu[from].t);
    let mut x = FilterState::new(vec![]);
    x.rot = k.pose.rot;
    x.pos = k.pose.trans;
    x.vel = k.vel;
    x.gravity = GRAVITY;
    for j in from..from + steps {
        let dt = imu[j + 1].t - imu[j].t;
        x = discrete_step(&x, &imu[j], None, dt);
    }
    let truth = s.trajectory.at(imu[from + steps].t).pose;
    let dp = (x.pos - truth.trans).norm();
    let dr = (truth.rot.inverse() * x.rot).angle();
    (dp, dr)
}

#[test]
fn clean_corridor_imu_integrates_to_truth() {
    let s = Scenario::preset("corridor-zero-noise").unwrap();
    let imu = synth_imu(&s);
    let mut worst = (0.0f64, 0.0f64);
    for from in (0..1800).step_by(100) {
        let (dp, dr) = dead_reckon(&s, &imu, from, 20);
        worst = (worst.0.max(dp), worst.1.max(dr));
    }
    // a zero-order hold over 0.1 s leaves errors far below the map noise
    assert!(worst.0 < 1e-3 && worst.1 < 1e-3, "{worst:?}");
}
