//! Independent reference implementations used by the validation suites.
//!
//! Nothing here shares code with the convolution solver in [`crate::kinetics`];
//! the point is to check one route against another. The integrator is a
//! classic adaptive step-doubling RK4 driving the raw compartment ODEs,
//! with forced stops at every input-function sample (the interpolant has
//! kinks there) and at every frame boundary.

use crate::kinetics::{FrameSchedule, InputFunction, KineticParams, TacModel};

/// Linear interpolation on the raw input samples.
fn interp(times: &[f64], vals: &[f64], t: f64) -> f64 {
    if t <= times[0] {
        return vals[0];
    }
    let n = times.len();
    if t >= times[n - 1] {
        return vals[n - 1];
    }
    let j = times.partition_point(|&x| x < t).max(1) - 1;
    let w = (t - times[j]) / (times[j + 1] - times[j]);
    vals[j] + w * (vals[j + 1] - vals[j])
}

/// State: (c1, c2, M) where M(t) = int_0^t m(s) ds.
fn rhs(p: &KineticParams, input: &InputFunction, t: f64, y: [f64; 3]) -> [f64; 3] {
    let cp = interp(input.times(), input.cp(), t);
    let cb = interp(input.times(), input.cb(), t);
    let dc1 = p.k1 * cp - (p.k2 + p.k3) * y[0];
    let dc2 = p.k3 * y[0];
    let m = (1.0 - p.vb) * (y[0] + y[1]) + p.vb * cb;
    [dc1, dc2, m]
}

fn rk4_single(p: &KineticParams, input: &InputFunction, t: f64, y: [f64; 3], h: f64) -> [f64; 3] {
    let k1 = rhs(p, input, t, y);
    let mid1 = std::array::from_fn(|i| y[i] + 0.5 * h * k1[i]);
    let k2 = rhs(p, input, t + 0.5 * h, mid1);
    let mid2 = std::array::from_fn(|i| y[i] + 0.5 * h * k2[i]);
    let k3 = rhs(p, input, t + 0.5 * h, mid2);
    let end = std::array::from_fn(|i| y[i] + h * k3[i]);
    let k4 = rhs(p, input, t + h, end);
    std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Advance from `t0` to `t1` with step doubling and local extrapolation.
fn advance(
    p: &KineticParams,
    input: &InputFunction,
    t0: f64,
    t1: f64,
    mut y: [f64; 3],
    rtol: f64,
) -> [f64; 3] {
    let atol = 1e-14;
    let mut t = t0;
    let mut h = (t1 - t0).max(1e-12);
    while t < t1 - 1e-14 {
        h = h.min(t1 - t);
        let full = rk4_single(p, input, t, y, h);
        let half = rk4_single(p, input, t, y, 0.5 * h);
        let halves = rk4_single(p, input, t + 0.5 * h, half, 0.5 * h);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            let scale = atol + rtol * halves[i].abs().max(y[i].abs());
            err = err.max((full[i] - halves[i]).abs() / scale);
        }
        if err <= 15.0 {
            // Accept with 5th-order local extrapolation.
            y = std::array::from_fn(|i| halves[i] + (halves[i] - full[i]) / 15.0);
            t += h;
            let grow = if err > 0.0 { 0.9 * (15.0 / err).powf(0.2) } else { 4.0 };
            h *= grow.clamp(0.5, 4.0);
        } else {
            h *= (0.9 * (15.0 / err).powf(0.25)).clamp(0.05, 0.9);
        }
    }
    y
}

/// Frame-averaged model TAC computed by adaptive RK4 integration.
pub fn rk4_frame_tac(
    p: &KineticParams,
    input: &InputFunction,
    schedule: &FrameSchedule,
    rtol: f64,
) -> Vec<f64> {
    // Breakpoints: input kinks plus frame boundaries.
    let end = schedule.end_time();
    let mut brk: Vec<f64> = input.times().iter().cloned().filter(|&t| t <= end).collect();
    for (s, d) in schedule.starts().iter().zip(schedule.durations()) {
        brk.push(*s);
        brk.push(*s + *d);
    }
    brk.push(end);
    brk.sort_by(|a, b| a.partial_cmp(b).unwrap());
    brk.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let mut y = [0.0f64; 3];
    let mut t = 0.0f64;
    // Cumulative integral M at every frame boundary.
    let mut m_at = Vec::with_capacity(schedule.len() * 2);
    let mut bound_iter = schedule
        .starts()
        .iter()
        .zip(schedule.durations())
        .flat_map(|(s, d)| [*s, *s + *d])
        .collect::<Vec<_>>();
    bound_iter.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut bp = 0usize;
    for &b in &brk {
        if b > t {
            y = advance(p, input, t, b, y, rtol);
            t = b;
        }
        while bp < bound_iter.len() && (bound_iter[bp] - t).abs() < 1e-12 {
            m_at.push(y[2]);
            bp += 1;
        }
    }
    assert_eq!(m_at.len(), bound_iter.len(), "missed a frame boundary");

    // Map boundary integrals back to frames (shared boundaries dedup'd).
    let mut out = Vec::with_capacity(schedule.len());
    for (s, d) in schedule.starts().iter().zip(schedule.durations()) {
        let find = |t: f64| {
            bound_iter
                .iter()
                .position(|&b| (b - t).abs() < 1e-12)
                .expect("boundary present")
        };
        let a = m_at[find(*s)];
        let b = m_at[find(*s + *d)];
        out.push((b - a) / d);
    }
    out
}

/// Tissue curves (c1, c2) at the requested times, by adaptive RK4.
pub fn rk4_curves(
    p: &KineticParams,
    input: &InputFunction,
    times: &[f64],
    rtol: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut brk: Vec<f64> = input
        .times()
        .iter()
        .cloned()
        .chain(times.iter().cloned())
        .filter(|&t| t <= *times.last().unwrap() + 1e-12)
        .collect();
    brk.sort_by(|a, b| a.partial_cmp(b).unwrap());
    brk.dedup_by(|a, b| (*a - *b).abs() < 1e-13);

    let mut c1 = Vec::with_capacity(times.len());
    let mut c2 = Vec::with_capacity(times.len());
    let mut y = [0.0f64; 3];
    let mut t = 0.0f64;
    let mut want = 0usize;
    for &b in &brk {
        if b > t {
            y = advance(p, input, t, b, y, rtol);
            t = b;
        }
        while want < times.len() && (times[want] - t).abs() < 1e-12 {
            c1.push(y[0]);
            c2.push(y[1]);
            want += 1;
        }
    }
    assert_eq!(c1.len(), times.len(), "missed an output time");
    (c1, c2)
}

/// Central finite differences of the frame TAC with respect to each
/// kinetic parameter. `rel_step` is taken relative to parameter scale.
pub fn tac_jacobian_fd(model: &TacModel, p: &KineticParams, rel_step: f64) -> Vec<[f64; 4]> {
    let base = p.as_array();
    let n = model.n_frames();
    let mut jac = vec![[0.0f64; 4]; n];
    for j in 0..4 {
        let step = rel_step * base[j].abs().max(0.25);
        let mut hi = base;
        let mut lo = base;
        hi[j] += step;
        lo[j] -= step;
        let up = model.tac_values(&KineticParams::from_array(hi));
        let dn = model.tac_values(&KineticParams::from_array(lo));
        for f in 0..n {
            jac[f][j] = (up[f] - dn[f]) / (2.0 * step);
        }
    }
    jac
}

/// Central finite difference of a scalar function of one variable.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}
