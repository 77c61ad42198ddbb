//! Exact forward model of the irreversible two-tissue compartment model.
//!
//! The model describes tracer exchange between blood plasma and two
//! tissue compartments:
//!
//! ```text
//! c1'(t) = K1 * Cp(t) - (k2 + k3) * c1(t)
//! c2'(t) = k3 * c1(t)
//! ```
//!
//! with the measurable voxel activity
//!
//! ```text
//! m(t) = (1 - Vb) * (c1(t) + c2(t)) + Vb * Cb(t)
//! ```
//!
//! Instead of a generic ODE integrator, the solution is evaluated by the
//! closed-form convolution
//!
//! ```text
//! c1(t) = K1 * int_0^t Cp(s) * exp(-(k2+k3)(t-s)) ds
//! c2(t) = k3 * int_0^t c1(s) ds
//! ```
//!
//! on a uniform fine grid. The convolution update over one grid cell is
//! exact for a piecewise-linear input function, and every kernel moment
//! is evaluated through series near `k2 + k3 = 0`, so there is no
//! singular division at the one-tissue limit. The same recurrences carry
//! the analytic sensitivities used by both the nonlinear least-squares
//! fitter and network training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default internal integration step (seconds).
pub const DEFAULT_GRID_STEP_S: f64 = 0.1;

/// Largest allowed uniform step (seconds) for the convolution solver.
pub const MAX_GRID_STEP_S: f64 = 0.5;

const SEC_PER_MIN: f64 = 60.0;

/// The four kinetic parameters of one voxel.
///
/// Rates are in 1/min; `vb` is the dimensionless blood volume fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub vb: f64,
}

impl KineticParams {
    pub fn new(k1: f64, k2: f64, k3: f64, vb: f64) -> Self {
        Self { k1, k2, k3, vb }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    /// Check the physical invariants: non-negative rates, `vb` in [0, 1].
    pub fn validate(&self) -> Result<()> {
        let vals = [self.k1, self.k2, self.k3, self.vb];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("kinetic parameters must be finite"));
        }
        if self.k1 < 0.0 || self.k2 < 0.0 || self.k3 < 0.0 {
            return Err(Error::invalid_input("rate constants must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.vb) {
            return Err(Error::invalid_input("vb must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.k1, self.k2, self.k3, self.vb]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Image-derived input function: plasma (`cp`) and whole-blood (`cb`)
/// activity on a monotone time axis in minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct InputFunction {
    times: Vec<f64>,
    cp: Vec<f64>,
    cb: Vec<f64>,
}

impl InputFunction {
    /// Build an input function with separate plasma and blood curves.
    pub fn new(times: Vec<f64>, cp: Vec<f64>, cb: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid_input("input function needs at least two samples"));
        }
        if cp.len() != times.len() || cb.len() != times.len() {
            return Err(Error::ShapeMismatch(format!(
                "input function arrays disagree: {} times, {} cp, {} cb",
                times.len(),
                cp.len(),
                cb.len()
            )));
        }
        if times[0] != 0.0 {
            return Err(Error::invalid_input("input function must start at t = 0"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid_input("input times must be strictly increasing"));
        }
        for (name, vals) in [("time", &times), ("cp", &cp), ("cb", &cb)] {
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid_input(format!("{name} column contains NaN/Inf")));
            }
        }
        if cp.iter().chain(cb.iter()).any(|&v| v < 0.0) {
            return Err(Error::invalid_input("activity values must be >= 0"));
        }
        Ok(Self { times, cp, cb })
    }

    /// Build with whole blood equal to plasma (single measured curve).
    pub fn from_plasma(times: Vec<f64>, cp: Vec<f64>) -> Result<Self> {
        let cb = cp.clone();
        Self::new(times, cp, cb)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn cp(&self) -> &[f64] {
        &self.cp
    }

    pub fn cb(&self) -> &[f64] {
        &self.cb
    }

    /// Last supported time (minutes).
    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Peak plasma activity; the global normalization constant.
    pub fn peak_cp(&self) -> f64 {
        self.cp.iter().cloned().fold(0.0, f64::max)
    }

    /// Divide both curves by `peak_cp` so the plasma peak becomes 1.
    pub fn normalized(&self) -> Result<(Self, f64)> {
        let peak = self.peak_cp();
        if peak <= 0.0 {
            return Err(Error::invalid_input("cannot normalize an all-zero input function"));
        }
        let cp = self.cp.iter().map(|v| v / peak).collect();
        let cb = self.cb.iter().map(|v| v / peak).collect();
        Ok((Self { times: self.times.clone(), cp, cb }, peak))
    }

    /// Sample both curves on a uniform grid by linear interpolation.
    /// Nodes may overshoot the support by less than one step; they clamp
    /// to the final sample.
    fn sample_grid(&self, step_min: f64, n_nodes: usize) -> (Vec<f64>, Vec<f64>) {
        let mut cp = Vec::with_capacity(n_nodes);
        let mut cb = Vec::with_capacity(n_nodes);
        let mut seg = 0usize;
        let last = self.times.len() - 1;
        for i in 0..n_nodes {
            let t = i as f64 * step_min;
            while seg + 1 < last && self.times[seg + 1] < t {
                seg += 1;
            }
            if t >= self.times[last] {
                cp.push(self.cp[last]);
                cb.push(self.cb[last]);
                continue;
            }
            let (t0, t1) = (self.times[seg], self.times[seg + 1]);
            let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            cp.push(self.cp[seg] + w * (self.cp[seg + 1] - self.cp[seg]));
            cb.push(self.cb[seg] + w * (self.cb[seg + 1] - self.cb[seg]));
        }
        (cp, cb)
    }
}

/// Acquisition frame schedule: start times and durations in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr")]
pub struct FrameSchedule {
    starts: Vec<f64>,
    durations: Vec<f64>,
}

/// Raw serialized form; validated on the way in.
#[derive(Deserialize)]
struct ScheduleRepr {
    starts: Vec<f64>,
    durations: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for FrameSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        FrameSchedule::new(r.starts, r.durations)
    }
}

impl FrameSchedule {
    pub fn new(starts: Vec<f64>, durations: Vec<f64>) -> Result<Self> {
        if starts.is_empty() || starts.len() != durations.len() {
            return Err(Error::ShapeMismatch(format!(
                "schedule arrays disagree: {} starts, {} durations",
                starts.len(),
                durations.len()
            )));
        }
        if starts.iter().chain(durations.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("schedule contains NaN/Inf"));
        }
        if durations.iter().any(|&d| d <= 0.0) {
            return Err(Error::invalid_input("frame durations must be > 0"));
        }
        if starts[0] < 0.0 {
            return Err(Error::invalid_input("first frame must not start before t = 0"));
        }
        for i in 0..starts.len() - 1 {
            if starts[i + 1] <= starts[i] {
                return Err(Error::invalid_input("frame starts must be strictly increasing"));
            }
            if starts[i + 1] < starts[i] + durations[i] - 1e-12 {
                return Err(Error::invalid_input(format!(
                    "frames {i} and {} overlap",
                    i + 1
                )));
            }
        }
        Ok(Self { starts, durations })
    }

    /// Contiguous schedule built from a run of frame durations in seconds.
    pub fn contiguous_from_seconds(durations_s: &[f64]) -> Result<Self> {
        let mut starts = Vec::with_capacity(durations_s.len());
        let mut durations = Vec::with_capacity(durations_s.len());
        let mut t = 0.0;
        for &d in durations_s {
            starts.push(t / SEC_PER_MIN);
            durations.push(d / SEC_PER_MIN);
            t += d;
        }
        Self::new(starts, durations)
    }

    /// The 62-frame, 65-minute dynamic schedule used by long-axial-FOV
    /// protocols: 2 s frames through the first minute, then 10 s, 30 s,
    /// 60 s, 2 min, and 5 min frames.
    pub fn dynamic_62_frame() -> Self {
        let mut durs = Vec::with_capacity(62);
        durs.extend(std::iter::repeat(2.0).take(30));
        durs.extend(std::iter::repeat(10.0).take(6));
        durs.extend(std::iter::repeat(30.0).take(8));
        durs.extend(std::iter::repeat(60.0).take(4));
        durs.extend(std::iter::repeat(120.0).take(5));
        durs.extend(std::iter::repeat(300.0).take(9));
        Self::contiguous_from_seconds(&durs).expect("static schedule is valid")
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    /// End of the final frame (minutes).
    pub fn end_time(&self) -> f64 {
        let i = self.starts.len() - 1;
        self.starts[i] + self.durations[i]
    }

    /// Frame midpoints (minutes).
    pub fn midpoints(&self) -> Vec<f64> {
        self.starts
            .iter()
            .zip(&self.durations)
            .map(|(s, d)| s + 0.5 * d)
            .collect()
    }
}

/// How a measured or modelled frame value relates to the instantaneous
/// activity curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrameSampling {
    /// Time-average of the activity over the frame window.
    #[default]
    Average,
    /// Instantaneous activity at the frame midpoint.
    Midpoint,
}

/// A time-activity curve sampled on a frame schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Tac {
    pub schedule: FrameSchedule,
    pub values: Vec<f64>,
}

impl Tac {
    pub fn new(schedule: FrameSchedule, values: Vec<f64>) -> Result<Self> {
        if values.len() != schedule.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} frames",
                values.len(),
                schedule.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("TAC contains NaN/Inf"));
        }
        Ok(Self { schedule, values })
    }
}

// ---------------------------------------------------------------------------
// Kernel moments
// ---------------------------------------------------------------------------

/// Moments `m_k(x) = int_0^1 tau^k exp(-x tau) dtau` for k = 0, 1, 2.
///
/// Near x = 0 each closed form loses all significant digits to
/// cancellation, so a short alternating series takes over; the crossover
/// keeps both branches below ~1e-12 relative error.
fn kernel_moments(x: f64) -> (f64, f64, f64) {
    debug_assert!(x >= 0.0);
    if x < 0.05 {
        // m_k(x) = sum_j (-x)^j / (j! * (k + j + 1))
        let mut m = [0.0f64; 3];
        for (k, mk) in m.iter_mut().enumerate() {
            let kf = k as f64;
            let mut term = 1.0; // (-x)^j / j!
            let mut sum = 1.0 / (kf + 1.0);
            let mut j = 1.0;
            loop {
                term *= -x / j;
                let add = term / (kf + j + 1.0);
                sum += add;
                if add.abs() < 1e-18 {
                    break;
                }
                j += 1.0;
            }
            *mk = sum;
        }
        (m[0], m[1], m[2])
    } else {
        let e = (-x).exp();
        let m0 = -(-x).exp_m1() / x;
        let m1 = (1.0 - (1.0 + x) * e) / (x * x);
        let m2 = (2.0 - (2.0 + 2.0 * x + x * x) * e) / (x * x * x);
        (m0, m1, m2)
    }
}

// ---------------------------------------------------------------------------
// Prepared forward model
// ---------------------------------------------------------------------------

/// Classification of one grid cell against the frame schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CellTag {
    /// No frame overlaps this cell.
    Outside,
    /// The cell lies strictly inside the current frame.
    Interior,
    /// A frame boundary falls in this cell; take the slow path.
    Edge,
}

/// Input function, frame schedule, and grid geometry prepared once and
/// shared read-only across voxel evaluations.
#[derive(Debug, Clone)]
pub struct TacModel {
    /// Grid step in minutes.
    step: f64,
    /// Number of grid nodes.
    n_nodes: usize,
    cp: Vec<f64>,
    cb: Vec<f64>,
    starts: Vec<f64>,
    ends: Vec<f64>,
    durations: Vec<f64>,
    tags: Vec<CellTag>,
    /// Frame-averaged whole-blood activity.
    cb_avg: Vec<f64>,
    /// Whole-blood activity at frame midpoints.
    cb_mid: Vec<f64>,
    sampling: FrameSampling,
    schedule: FrameSchedule,
}

impl TacModel {
    /// Prepare the forward model on the default 0.1 s grid.
    pub fn new(input: &InputFunction, schedule: &FrameSchedule) -> Result<Self> {
        Self::with_grid_step(input, schedule, DEFAULT_GRID_STEP_S, FrameSampling::Average)
    }

    pub fn with_grid_step(
        input: &InputFunction,
        schedule: &FrameSchedule,
        grid_step_s: f64,
        sampling: FrameSampling,
    ) -> Result<Self> {
        if !grid_step_s.is_finite() || grid_step_s <= 0.0 {
            return Err(Error::InvalidGrid("grid step must be > 0".into()));
        }
        if grid_step_s > MAX_GRID_STEP_S + 1e-12 {
            return Err(Error::InvalidGrid(format!(
                "grid step {grid_step_s} s exceeds the maximum of {MAX_GRID_STEP_S} s"
            )));
        }
        let end = schedule.end_time();
        if end > input.end_time() + 1e-9 {
            return Err(Error::OutOfRange(format!(
                "schedule ends at {end:.4} min but the input function stops at {:.4} min",
                input.end_time()
            )));
        }
        let step = grid_step_s / SEC_PER_MIN;
        let n_cells = (end / step - 1e-9).ceil().max(1.0) as usize;
        let n_nodes = n_cells + 1;
        let (cp, cb) = input.sample_grid(step, n_nodes);

        let starts = schedule.starts().to_vec();
        let ends: Vec<f64> = starts
            .iter()
            .zip(schedule.durations())
            .map(|(s, d)| s + d)
            .collect();
        let tags = classify_cells(step, n_cells, &starts, &ends);

        let mut model = Self {
            step,
            n_nodes,
            cp,
            cb,
            starts,
            ends,
            durations: schedule.durations().to_vec(),
            tags,
            cb_avg: Vec::new(),
            cb_mid: Vec::new(),
            sampling,
            schedule: schedule.clone(),
        };
        // The resampled blood curve is piecewise linear on the grid, so
        // the plain trapezoid is exact; derivative corrections stay off.
        let cb = model.cb.clone();
        model.cb_avg = model
            .frame_averages(|i| ([cb[i]], [0.0]))
            .into_iter()
            .map(|a| a[0])
            .collect();
        model.cb_mid = model
            .schedule
            .midpoints()
            .iter()
            .map(|&t| model.value_at(&cb, t))
            .collect();
        Ok(model)
    }

    pub fn schedule(&self) -> &FrameSchedule {
        &self.schedule
    }

    pub fn n_frames(&self) -> usize {
        self.starts.len()
    }

    /// Frame-averaged whole-blood activity (the `Vb = 1` limit of the TAC).
    pub fn blood_frame_values(&self) -> &[f64] {
        match self.sampling {
            FrameSampling::Average => &self.cb_avg,
            FrameSampling::Midpoint => &self.cb_mid,
        }
    }

    fn value_at(&self, curve: &[f64], t: f64) -> f64 {
        let pos = (t / self.step).clamp(0.0, (self.n_nodes - 1) as f64);
        let i = (pos.floor() as usize).min(self.n_nodes - 2);
        let w = pos - i as f64;
        curve[i] + w * (curve[i + 1] - curve[i])
    }

    /// Stream `K` curves through the frame windows and return per-frame
    /// averages. `node_vals(i)` is called exactly once for each node in
    /// increasing order (which lets callers advance recurrences inside
    /// the closure) and must return the curve values and their exact
    /// time derivatives at that node.
    ///
    /// Whole-cell contributions use the derivative-corrected trapezoid
    /// `h/2 (yL + yR) + h^2/12 (dL - dR)`, which telescopes to the
    /// Euler-Maclaurin endpoint correction over a frame and leaves an
    /// O(h^4) quadrature error. Fractional cells (frame boundaries off
    /// the grid) fall back to the plain trapezoid.
    fn frame_averages<const K: usize>(
        &self,
        mut node_vals: impl FnMut(usize) -> ([f64; K], [f64; K]),
    ) -> Vec<[f64; K]> {
        let h = self.step;
        let half_h = 0.5 * h;
        let h12 = h * h / 12.0;
        let tiny = 1e-6 * h;
        let nf = self.starts.len();
        let mut out = vec![[0.0f64; K]; nf];
        let mut acc = [0.0f64; K];
        let mut fp = 0usize;
        let (mut left, mut dleft) = node_vals(0);
        for (cell, &tag) in self.tags.iter().enumerate() {
            let (right, dright) = node_vals(cell + 1);
            match tag {
                CellTag::Outside => {}
                CellTag::Interior => {
                    for k in 0..K {
                        acc[k] += half_h * (left[k] + right[k]) + h12 * (dleft[k] - dright[k]);
                    }
                }
                CellTag::Edge => {
                    let tl = cell as f64 * h;
                    let tr = tl + h;
                    while fp < nf && self.starts[fp] < tr - tiny {
                        let lo = self.starts[fp].max(tl);
                        let hi = self.ends[fp].min(tr);
                        if hi > lo + tiny * 1e-3 {
                            let wl = (lo - tl) / h;
                            let wr = (hi - tl) / h;
                            if wl < 1e-9 && wr > 1.0 - 1e-9 {
                                for k in 0..K {
                                    acc[k] += half_h * (left[k] + right[k])
                                        + h12 * (dleft[k] - dright[k]);
                                }
                            } else {
                                for k in 0..K {
                                    let yl = left[k] + wl * (right[k] - left[k]);
                                    let yr = left[k] + wr * (right[k] - left[k]);
                                    acc[k] += 0.5 * (hi - lo) * (yl + yr);
                                }
                            }
                        }
                        if self.ends[fp] <= tr + tiny {
                            let inv = 1.0 / self.durations[fp];
                            for k in 0..K {
                                out[fp][k] = acc[k] * inv;
                            }
                            acc = [0.0; K];
                            fp += 1;
                        } else {
                            break;
                        }
                    }
                }
            }
            left = right;
            dleft = dright;
        }
        out
    }

    /// Sample `K` streamed curves at frame midpoints instead of
    /// averaging; used by the midpoint sampling mode.
    fn frame_midpoints<const K: usize>(
        &self,
        mut node_vals: impl FnMut(usize) -> ([f64; K], [f64; K]),
    ) -> Vec<[f64; K]> {
        let h = self.step;
        let mids = self.schedule.midpoints();
        let nf = mids.len();
        let mut out = vec![[0.0f64; K]; nf];
        let mut fp = 0usize;
        let (mut left, _) = node_vals(0);
        for cell in 0..self.n_nodes - 1 {
            let (right, _) = node_vals(cell + 1);
            let tl = cell as f64 * h;
            let tr = tl + h;
            while fp < nf && mids[fp] <= tr + 1e-12 {
                let w = ((mids[fp] - tl) / h).clamp(0.0, 1.0);
                for k in 0..K {
                    out[fp][k] = left[k] + w * (right[k] - left[k]);
                }
                fp += 1;
            }
            left = right;
        }
        out
    }

    fn frame_reduce<const K: usize>(
        &self,
        node_vals: impl FnMut(usize) -> ([f64; K], [f64; K]),
    ) -> Vec<[f64; K]> {
        match self.sampling {
            FrameSampling::Average => self.frame_averages(node_vals),
            FrameSampling::Midpoint => self.frame_midpoints(node_vals),
        }
    }

    /// Per-cell recurrence coefficients for decay rate `lambda = k2+k3`.
    ///
    /// The update over one cell with piecewise-linear `Cp` is
    ///
    /// ```text
    /// u' = d*u + cp_l*e1 + (cp_r - cp_l)*f2
    /// v' = d*(v + h*u) + cp_l*e3 + (cp_r - cp_l)*f4
    /// ```
    ///
    /// where `u` is the unit-K1 free compartment and `v` its negated
    /// lambda-sensitivity, `v = -du/dlambda`.
    fn cell_coeffs(&self, lambda: f64) -> CellCoeffs {
        let h = self.step;
        let x = lambda * h;
        let (m0, m1, m2) = kernel_moments(x);
        CellCoeffs {
            d: (-x).exp(),
            e1: h * m0,
            f2: h * (m0 - m1),
            e3: h * h * m1,
            f4: h * h * (m1 - m2),
        }
    }

    /// Frame values of the model TAC for one parameter vector.
    pub fn tac_values(&self, p: &KineticParams) -> Vec<f64> {
        let lambda = p.k2 + p.k3;
        let c = self.cell_coeffs(lambda);
        let half_h = 0.5 * self.step;
        let h12 = self.step * self.step / 12.0;
        let cp = &self.cp;
        let mut u = 0.0f64;
        let mut big_u = 0.0f64;
        let a_avg = self.frame_reduce(|i| {
            if i > 0 {
                let u1 = c.d * u + cp[i - 1] * c.e1 + (cp[i] - cp[i - 1]) * c.f2;
                let du0 = cp[i - 1] - lambda * u;
                let du1 = cp[i] - lambda * u1;
                big_u += half_h * (u + u1) + h12 * (du0 - du1);
                u = u1;
            }
            // A = u + k3*U carries the tissue activity per unit K1;
            // A' = cp - k2*u exactly (u' = cp - lambda*u, U' = u).
            ([u + p.k3 * big_u], [cp[i] - p.k2 * u])
        });
        let blood = self.blood_frame_values();
        let w = 1.0 - p.vb;
        a_avg
            .iter()
            .zip(blood)
            .map(|(a, &b)| w * p.k1 * a[0] + p.vb * b)
            .collect()
    }

    /// Frame values plus the per-frame partial derivatives with respect
    /// to (K1, k2, k3, Vb).
    pub fn tac_with_jacobian(&self, p: &KineticParams) -> (Vec<f64>, Vec<[f64; 4]>) {
        let lambda = p.k2 + p.k3;
        let c = self.cell_coeffs(lambda);
        let h = self.step;
        let half_h = 0.5 * h;
        let h12 = h * h / 12.0;
        let cp = &self.cp;
        let (k2, k3) = (p.k2, p.k3);
        let mut u = 0.0f64;
        let mut v = 0.0f64;
        let mut big_u = 0.0f64;
        let mut big_v = 0.0f64;
        let reduced = self.frame_reduce(|i| {
            if i > 0 {
                let dcp = cp[i] - cp[i - 1];
                let u1 = c.d * u + cp[i - 1] * c.e1 + dcp * c.f2;
                let v1 = c.d * (v + h * u) + cp[i - 1] * c.e3 + dcp * c.f4;
                let du0 = cp[i - 1] - lambda * u;
                let du1 = cp[i] - lambda * u1;
                let dv0 = u - lambda * v;
                let dv1 = u1 - lambda * v1;
                big_u += half_h * (u + u1) + h12 * (du0 - du1);
                big_v += half_h * (v + v1) + h12 * (dv0 - dv1);
                u = u1;
                v = v1;
            }
            // A: tissue activity per unit K1; B: its lambda-sensitivity
            // (negated); U: integral term that carries the extra k3 path.
            // Time derivatives: A' = cp - k2*u, B' = u - k2*v, U' = u.
            (
                [u + k3 * big_u, v + k3 * big_v, big_u],
                [cp[i] - k2 * u, u - k2 * v, u],
            )
        });
        let blood = self.blood_frame_values();
        let w = 1.0 - p.vb;
        let mut tac = Vec::with_capacity(reduced.len());
        let mut jac = Vec::with_capacity(reduced.len());
        for (r, &b) in reduced.iter().zip(blood) {
            let (a, bb, uu) = (r[0], r[1], r[2]);
            let tissue = p.k1 * a;
            tac.push(w * tissue + p.vb * b);
            jac.push([
                w * a,
                -w * p.k1 * bb,
                w * p.k1 * (uu - bb),
                b - tissue,
            ]);
        }
        (tac, jac)
    }
}

#[derive(Debug, Clone, Copy)]
struct CellCoeffs {
    d: f64,
    e1: f64,
    f2: f64,
    e3: f64,
    f4: f64,
}

fn classify_cells(step: f64, n_cells: usize, starts: &[f64], ends: &[f64]) -> Vec<CellTag> {
    let tiny = 1e-6 * step;
    let mut tags = vec![CellTag::Outside; n_cells];
    let mut fp = 0usize;
    let nf = starts.len();
    for (cell, tag) in tags.iter_mut().enumerate() {
        let tl = cell as f64 * step;
        let tr = tl + step;
        while fp < nf && ends[fp] <= tl + tiny {
            fp += 1;
        }
        if fp == nf {
            break;
        }
        if starts[fp] >= tr - tiny {
            continue; // gap before the next frame
        }
        let interior = starts[fp] <= tl + tiny && ends[fp] > tr + tiny;
        // A later frame could also start inside this cell; only possible
        // when the current frame ends here too, which `interior` excludes.
        *tag = if interior { CellTag::Interior } else { CellTag::Edge };
    }
    tags
}

// ---------------------------------------------------------------------------
// Spec-level operations
// ---------------------------------------------------------------------------

/// Solve the compartment system on a caller-supplied uniform grid and
/// return the free and trapped tissue curves `(c1, c2)`.
pub fn solve_compartments(
    params: &KineticParams,
    input: &InputFunction,
    grid_times: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    if grid_times.len() < 2 {
        return Err(Error::InvalidGrid("grid needs at least two nodes".into()));
    }
    if grid_times[0] != 0.0 {
        return Err(Error::InvalidGrid("grid must start at t = 0".into()));
    }
    let h = grid_times[1] - grid_times[0];
    if !(h > 0.0) {
        return Err(Error::InvalidGrid("grid must be increasing".into()));
    }
    for w in grid_times.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1e-300) {
            return Err(Error::InvalidGrid("grid spacing is not uniform".into()));
        }
    }
    if h * SEC_PER_MIN > MAX_GRID_STEP_S + 1e-12 {
        return Err(Error::InvalidGrid(format!(
            "grid step {:.4} s exceeds the maximum of {MAX_GRID_STEP_S} s",
            h * SEC_PER_MIN
        )));
    }
    let end = *grid_times.last().unwrap();
    if end > input.end_time() + 1e-9 {
        return Err(Error::OutOfRange(format!(
            "grid ends at {end:.4} min but the input function stops at {:.4} min",
            input.end_time()
        )));
    }

    let n = grid_times.len();
    let (cp, _) = input.sample_grid(h, n);
    let lambda = params.k2 + params.k3;
    let x = lambda * h;
    let (m0, m1, _) = kernel_moments(x);
    let d = (-x).exp();
    let e1 = h * m0;
    let f2 = h * (m0 - m1);
    let h12 = h * h / 12.0;

    let mut c1 = vec![0.0f64; n];
    let mut c2 = vec![0.0f64; n];
    let mut u = 0.0f64;
    let mut big_u = 0.0f64;
    for i in 1..n {
        let u1 = d * u + cp[i - 1] * e1 + (cp[i] - cp[i - 1]) * f2;
        // Cumulative trapezoid with the endpoint-derivative correction
        // (u' = cp - lambda*u is exact at the nodes).
        let du0 = cp[i - 1] - lambda * u;
        let du1 = cp[i] - lambda * u1;
        big_u += 0.5 * h * (u + u1) + h12 * (du0 - du1);
        u = u1;
        c1[i] = params.k1 * u;
        c2[i] = params.k3 * params.k1 * big_u;
    }
    Ok((c1, c2))
}

/// Model TAC on a frame schedule, using the default fine grid.
pub fn model_tac(
    params: &KineticParams,
    input: &InputFunction,
    schedule: &FrameSchedule,
) -> Result<Tac> {
    params.validate()?;
    let model = TacModel::new(input, schedule)?;
    Tac::new(schedule.clone(), model.tac_values(params))
}

/// Per-frame partial derivatives of the model TAC with respect to
/// (K1, k2, k3, Vb), using the default fine grid.
pub fn tac_jacobian(
    params: &KineticParams,
    input: &InputFunction,
    schedule: &FrameSchedule,
) -> Result<Vec<[f64; 4]>> {
    params.validate()?;
    let model = TacModel::new(input, schedule)?;
    Ok(model.tac_with_jacobian(params).1)
}
