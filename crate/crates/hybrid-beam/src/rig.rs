//! Virtual test rig: the physical half of the experiment in software.
//!
//! A free-free FE beam is bolted to a rigid clamp riding on support
//! springs; two shakers push the clamp through a first-order force lag,
//! two lasers read the interface motion, and two strain gauges near the
//! clamp carry the force information. Gauge channels pass a second-order
//! anti-aliasing filter and pick up mains hum plus white noise. Every run
//! is bit-reproducible under a fixed seed.
//!
//! Units follow the rest of the crate: kg, mm, ms, kN (and kN·mm for
//! moments), frequencies in kHz, angular rates in rad/ms.

use crate::beam::{assemble, BeamProperties, BoundaryCondition, FEModel};
use crate::error::{HybridError, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::VecDeque;
use std::f64::consts::PI;

/// Rigid clamp and its suspension. The clamp shares the beam's interface
/// node, so its inertia and springs land on that node's two DOFs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClampConfig {
    /// kg
    pub mass: f64,
    /// kg·mm²
    pub rotary_inertia: f64,
    /// Support spring against translation, kN/mm.
    pub k_translation: f64,
    /// Support spring against rotation, kN·mm/rad.
    pub k_rotation: f64,
    /// Viscous ratio applied to both suspension DOFs.
    pub support_damping: f64,
    /// Optional kinetic friction force on the translation DOF, kN.
    /// Zero keeps the rig linear (the default ground truth).
    pub coulomb: f64,
}

impl Default for ClampConfig {
    fn default() -> Self {
        ClampConfig {
            mass: 0.4,
            rotary_inertia: 250.0,
            k_translation: 1.28e-3,
            k_rotation: 1.42,
            support_damping: 0.05,
            coulomb: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActuatorConfig {
    /// kN per volt of command.
    pub gain: f64,
    /// First-order force lag time constant, ms. Zero disables the lag.
    pub lag: f64,
    /// Extra transport delay, ms (rounded to whole samples).
    pub pure_delay: f64,
    /// Lever arm about the interface node, mm. The shaker force enters the
    /// translation DOF directly and the rotation DOF times this arm.
    pub lever_arm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SensorConfig {
    /// Distance between the two laser spots on the clamp, mm.
    pub laser_separation: f64,
    /// Gauge centres measured from the interface along the beam, mm.
    pub gauge_pos: (f64, f64),
    /// Strain-to-moment constant, kN·mm per unit strain. For a rectangular
    /// section this is 2EI/h (outer-fibre strain).
    pub strain_to_moment: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseConfig {
    /// Mains hum amplitude on each gauge channel, strain units.
    pub mains_amplitude: f64,
    /// kHz; 0.05 is a 50 Hz supply.
    pub mains_freq: f64,
    /// Mains phase on gauge 1, rad.
    pub mains_phase: f64,
    /// Additional mains phase on gauge 2, rad. A non-zero value keeps the
    /// hum from cancelling in the gauge difference.
    pub gauge2_phase_shift: f64,
    /// White measurement noise per gauge sample, strain units.
    pub white_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mains_amplitude: 1.0e-6,
            mains_freq: 0.05,
            mains_phase: 0.3,
            gauge2_phase_shift: PI / 3.0,
            white_sigma: 1.0e-8,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterConfig {
    /// kHz
    pub cutoff: f64,
    /// Filter damping ratio. 0.8 keeps the passband monotone while the
    /// in-band lag stays flat enough to compensate with a single angle.
    pub xi: f64,
    /// Phase-lead angle the coupling loop applies to undo the sensor
    /// chain's lag at the operating band, rad.
    pub compensation: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            cutoff: 0.5,
            xi: 0.8,
            compensation: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RigConfig {
    /// The physical specimen; `l` is the substructure length, not the full
    /// beam.
    pub beam: BeamProperties,
    /// Specimen mesh. Finer than the numerical side on purpose: the two
    /// sides of a hybrid test never share a discretisation.
    pub n_elements: usize,
    pub clamp: ClampConfig,
    pub actuators: [ActuatorConfig; 2],
    pub sensors: SensorConfig,
    pub noise: NoiseConfig,
    pub filter: FilterConfig,
    /// Sample period, ms. 0.2 is a 5 kHz acquisition.
    pub dt: f64,
    /// Multiplier on the specimen's own damping (the add-on damping sheet
    /// of the physical test).
    pub damping_scale: f64,
    /// Ideal mode: the perfect-measurement limit. No noise, no actuator lag
    /// or transport delay, no gauge filter, and the gauge channels report
    /// strains consistent with the exact section forces at the interface
    /// (no extrapolation error from the gauges sitting away from the cut).
    /// The plant dynamics stay.
    pub ideal: bool,
}

impl Default for RigConfig {
    fn default() -> Self {
        let beam = BeamProperties {
            l: 360.0,
            ..crate::beam::default_properties()
        };
        RigConfig {
            beam,
            n_elements: 90,
            clamp: ClampConfig::default(),
            actuators: [
                ActuatorConfig {
                    gain: 1.0e-3,
                    lag: 1.0,
                    pure_delay: 0.0,
                    lever_arm: 0.0,
                },
                ActuatorConfig {
                    gain: 1.0e-3,
                    lag: 1.0,
                    pure_delay: 0.0,
                    lever_arm: 50.0,
                },
            ],
            sensors: SensorConfig {
                laser_separation: 30.0,
                gauge_pos: (10.0, 30.0),
                strain_to_moment: 2.0 * beam.ei() / beam.h,
            },
            noise: NoiseConfig::default(),
            filter: FilterConfig::default(),
            dt: 0.2,
            damping_scale: 1.0,
            ideal: false,
        }
    }
}

impl RigConfig {
    /// Noise-free, lag-free variant used as the reference plant.
    pub fn ideal(mut self) -> Self {
        self.ideal = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.beam.validate()?;
        let s = &self.sensors;
        if !(s.gauge_pos.1 > s.gauge_pos.0 && s.gauge_pos.0 > 0.0) {
            return Err(HybridError::InvalidArgument(
                "gauge positions must satisfy 0 < d1 < d2".into(),
            ));
        }
        if s.gauge_pos.1 >= self.beam.l {
            return Err(HybridError::InvalidArgument(
                "gauges must sit on the specimen".into(),
            ));
        }
        if s.laser_separation <= 0.0 || s.strain_to_moment <= 0.0 {
            return Err(HybridError::InvalidArgument(
                "laser separation and strain constant must be positive".into(),
            ));
        }
        if self.dt <= 0.0 || self.damping_scale <= 0.0 {
            return Err(HybridError::InvalidArgument(
                "dt and damping_scale must be positive".into(),
            ));
        }
        if self.filter.cutoff * self.dt >= 0.5 {
            return Err(HybridError::InvalidArgument(
                "filter cut-off must stay below Nyquist".into(),
            ));
        }
        if self.clamp.mass <= 0.0 || self.clamp.rotary_inertia <= 0.0 {
            return Err(HybridError::InvalidArgument(
                "clamp inertia must be positive".into(),
            ));
        }
        for a in &self.actuators {
            if a.lag < 0.0 || a.pure_delay < 0.0 {
                return Err(HybridError::InvalidArgument(
                    "actuator lag and delay must be non-negative".into(),
                ));
            }
        }
        if self.noise.mains_freq <= 0.0 || self.noise.white_sigma < 0.0 {
            return Err(HybridError::InvalidArgument(
                "noise parameters out of range".into(),
            ));
        }
        Ok(())
    }
}

/// One sampling instant of the raw sensor channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorFrame {
    /// Laser on the interface axis, mm.
    pub l1: f64,
    /// Laser `laser_separation` behind the interface, mm.
    pub l2: f64,
    /// Gauge strains after noise and filtering, dimensionless.
    pub eps1: f64,
    pub eps2: f64,
    /// ms
    pub t: f64,
}

/// Mechanical and auxiliary state between samples.
#[derive(Debug, Clone)]
pub struct RigState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
    /// Post-lag shaker forces, kN.
    pub shaker_force: [f64; 2],
    pub t: f64,
}

/// Second-order low-pass section, RBJ bilinear design, transposed
/// direct-form II state.
#[derive(Debug, Clone)]
pub struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    z1: f64,
    z2: f64,
}

impl Biquad {
    pub fn lowpass(cutoff_khz: f64, xi: f64, dt: f64) -> Biquad {
        let w0 = 2.0 * PI * cutoff_khz * dt;
        let (sn, cs) = w0.sin_cos();
        let alpha = sn * xi;
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 - cs) / 2.0 / a0,
            b1: (1.0 - cs) / a0,
            b2: (1.0 - cs) / 2.0 / a0,
            a1: -2.0 * cs / a0,
            a2: (1.0 - alpha) / a0,
            z1: 0.0,
            z2: 0.0,
        }
    }

    pub fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.z1;
        self.z1 = self.b1 * x - self.a1 * y + self.z2;
        self.z2 = self.b2 * x - self.a2 * y;
        y
    }

    pub fn reset(&mut self) {
        self.z1 = 0.0;
        self.z2 = 0.0;
    }

    /// Exact steady response of the discrete section at `omega` rad/ms.
    pub fn response(&self, omega: f64, dt: f64) -> Complex64 {
        let z_inv = Complex64::new(0.0, -omega * dt).exp();
        (self.b0 + (self.b1 + self.b2 * z_inv) * z_inv)
            / (1.0 + (self.a1 + self.a2 * z_inv) * z_inv)
    }
}

/// Harmonic voltage schedule for the two shakers:
/// v_j(t) = Σ_k Re(c_jk · e^(i·k·Ω·t)).
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageCommand {
    /// Fundamental, rad/ms. Snapped to the sample grid before driving.
    pub omega: f64,
    pub coeffs: [Vec<Complex64>; 2],
}

impl VoltageCommand {
    pub fn eval(&self, omega: f64, t: f64) -> [f64; 2] {
        let mut v = [0.0; 2];
        for (j, coeffs) in self.coeffs.iter().enumerate() {
            for (k, c) in coeffs.iter().enumerate() {
                v[j] += (c * Complex64::new(0.0, k as f64 * omega * t).exp()).re;
            }
        }
        v
    }
}

/// Raw and period-folded sensor data over a whole number of periods.
#[derive(Debug, Clone)]
pub struct MeasuredWindow {
    /// The snapped fundamental actually driven, rad/ms.
    pub omega: f64,
    pub samples_per_period: usize,
    pub raw: Vec<SensorFrame>,
    /// Mean over all periods, one entry per sample slot; `t` keeps the
    /// first period's clock.
    pub averaged: Vec<SensorFrame>,
}

/// Snap an angular frequency so one period is a whole number of samples.
/// Returns the snapped value and the samples per period.
pub fn snap_omega(omega: f64, dt: f64) -> (f64, usize) {
    let period = 2.0 * PI / omega;
    let n = (period / dt).round().max(1.0);
    (2.0 * PI / (n * dt), n as usize)
}

struct GaugeProbe {
    dofs: [usize; 4],
    /// Second-derivative shape row at the gauge's local coordinate.
    shape2: [f64; 4],
}

pub struct Rig {
    cfg: RigConfig,
    /// Augmented system: beam plus clamp inertia, suspension springs and
    /// their damping on the interface DOFs.
    m: DMatrix<f64>,
    c: DMatrix<f64>,
    k: DMatrix<f64>,
    /// Beam-only interface rows for the internal reaction readout.
    beam_rows_m: DMatrix<f64>,
    beam_rows_c: DMatrix<f64>,
    beam_rows_k: DMatrix<f64>,
    newmark: Cholesky<f64, Dyn>,
    gauges: [GaugeProbe; 2],
    filters: [Biquad; 2],
    delay_bufs: [VecDeque<f64>; 2],
    state: RigState,
    rng: ChaCha8Rng,
    iface_dofs: [usize; 2],
}

impl Rig {
    pub fn new(cfg: RigConfig) -> Result<Rig> {
        cfg.validate()?;
        let model = assemble(&cfg.beam, cfg.n_elements, BoundaryCondition::FreeFree)?;
        let n = model.n_dofs();
        let iface_dofs = [
            model.dof_map[0][0].expect("free-free keeps every DOF"),
            model.dof_map[0][1].expect("free-free keeps every DOF"),
        ];

        let m_beam = model.m.clone();
        let c_beam = &model.c * cfg.damping_scale;
        let k_beam = model.k.clone();

        let mut m = m_beam.clone();
        let mut c = c_beam.clone();
        let mut k = k_beam.clone();
        let (iu, ir) = (iface_dofs[0], iface_dofs[1]);
        m[(iu, iu)] += cfg.clamp.mass;
        m[(ir, ir)] += cfg.clamp.rotary_inertia;
        k[(iu, iu)] += cfg.clamp.k_translation;
        k[(ir, ir)] += cfg.clamp.k_rotation;
        c[(iu, iu)] +=
            2.0 * cfg.clamp.support_damping * (cfg.clamp.k_translation * cfg.clamp.mass).sqrt();
        c[(ir, ir)] += 2.0
            * cfg.clamp.support_damping
            * (cfg.clamp.k_rotation * cfg.clamp.rotary_inertia).sqrt();

        let dt = cfg.dt;
        let k_eff = &k + &c * (2.0 / dt) + &m * (4.0 / (dt * dt));
        let newmark = Cholesky::new(k_eff).ok_or_else(|| {
            HybridError::NumericalFailure("rig operator is not positive definite".into())
        })?;

        let gauges = [
            gauge_probe(&model, cfg.sensors.gauge_pos.0)?,
            gauge_probe(&model, cfg.sensors.gauge_pos.1)?,
        ];
        let filters = [
            Biquad::lowpass(cfg.filter.cutoff, cfg.filter.xi, dt),
            Biquad::lowpass(cfg.filter.cutoff, cfg.filter.xi, dt),
        ];
        let delay_bufs = [delay_buffer(cfg.actuators[0], dt), delay_buffer(cfg.actuators[1], dt)];
        let rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
        let state = RigState {
            q: DVector::zeros(n),
            qd: DVector::zeros(n),
            qdd: DVector::zeros(n),
            shaker_force: [0.0; 2],
            t: 0.0,
        };
        Ok(Rig {
            cfg,
            m,
            c,
            k,
            beam_rows_m: m_beam.rows(0, 2).into(),
            beam_rows_c: c_beam.rows(0, 2).into(),
            beam_rows_k: k_beam.rows(0, 2).into(),
            newmark,
            gauges,
            filters,
            delay_bufs,
            state,
            rng,
            iface_dofs,
        })
    }

    pub fn config(&self) -> &RigConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RigState {
        &self.state
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt
    }

    /// Zero everything and restart the noise stream from the seed.
    pub fn reset(&mut self) {
        let n = self.state.q.len();
        self.state = RigState {
            q: DVector::zeros(n),
            qd: DVector::zeros(n),
            qdd: DVector::zeros(n),
            shaker_force: [0.0; 2],
            t: 0.0,
        };
        for f in &mut self.filters {
            f.reset();
        }
        for (buf, act) in self.delay_bufs.iter_mut().zip(self.cfg.actuators) {
            *buf = delay_buffer(act, self.cfg.dt);
        }
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.noise.seed);
    }

    /// Place the rig on a given mechanical state with the acceleration
    /// solved for consistency (zero external force). Clock, actuators and
    /// filters restart; the noise stream does not.
    pub fn set_initial(&mut self, q: DVector<f64>, qd: DVector<f64>) -> Result<()> {
        let n = self.state.q.len();
        if q.len() != n || qd.len() != n {
            return Err(HybridError::InvalidArgument(format!(
                "state length must be {n}"
            )));
        }
        let rhs = -(&self.c * &qd) - &self.k * &q;
        let qdd = Cholesky::new(self.m.clone())
            .ok_or_else(|| HybridError::NumericalFailure("mass matrix not SPD".into()))?
            .solve(&rhs);
        self.state = RigState {
            q,
            qd,
            qdd,
            shaker_force: [0.0; 2],
            t: 0.0,
        };
        for f in &mut self.filters {
            f.reset();
        }
        for (buf, act) in self.delay_bufs.iter_mut().zip(self.cfg.actuators) {
            *buf = delay_buffer(act, self.cfg.dt);
        }
        Ok(())
    }

    /// ½·(q̇ᵀMq̇ + qᵀKq) of the full assembly, kN·mm.
    pub fn mechanical_energy(&self) -> f64 {
        let s = &self.state;
        0.5 * ((&self.m * &s.qd).dot(&s.qd) + (&self.k * &s.q).dot(&s.q))
    }

    /// Internal force the specimen exerts through the interface section,
    /// (translation kN, rotation kN·mm), from beam matrices alone.
    pub fn interface_reaction(&self) -> (f64, f64) {
        let s = &self.state;
        let r = &self.beam_rows_m * &s.qdd + &self.beam_rows_c * &s.qd + &self.beam_rows_k * &s.q;
        (r[0], r[1])
    }

    /// Noise-free, unfiltered sensors at the current instant.
    pub fn sensor_snapshot(&self) -> SensorFrame {
        let (l1, l2) = self.lasers();
        let eps = self.gauge_strains();
        SensorFrame {
            l1,
            l2,
            eps1: eps[0],
            eps2: eps[1],
            t: self.state.t,
        }
    }

    fn lasers(&self) -> (f64, f64) {
        let u = self.state.q[self.iface_dofs[0]];
        let phi = self.state.q[self.iface_dofs[1]];
        (u, u - self.cfg.sensors.laser_separation * phi)
    }

    fn strains(&self) -> [f64; 2] {
        let half_h = self.cfg.beam.h / 2.0;
        let mut out = [0.0; 2];
        for (slot, g) in out.iter_mut().zip(&self.gauges) {
            let mut curv = 0.0;
            for (dof, w) in g.dofs.iter().zip(g.shape2) {
                curv += w * self.state.q[*dof];
            }
            *slot = half_h * curv;
        }
        out
    }

    /// Gauge readings. A real rig reads fibre strain at the gauge spots;
    /// an ideal rig reports the strains a perfectly placed pair would show,
    /// i.e. the values whose linear reconstruction returns the exact
    /// section forces at the interface.
    fn gauge_strains(&self) -> [f64; 2] {
        if !self.cfg.ideal {
            return self.strains();
        }
        let (t, m_nodal) = self.interface_reaction();
        let m = -m_nodal;
        let se = &self.cfg.sensors;
        let eps1 = (m + se.gauge_pos.0 * t) / se.strain_to_moment;
        let eps2 = eps1 + t * (se.gauge_pos.1 - se.gauge_pos.0) / se.strain_to_moment;
        [eps1, eps2]
    }

    /// Advance one sample with the given shaker commands (volts) and read
    /// the sensors.
    pub fn step(&mut self, v: [f64; 2]) -> SensorFrame {
        let dt = self.cfg.dt;
        let s = &mut self.state;

        // actuator chain: transport delay, then exact first-order lag over
        // the step with the command held constant
        let mut force = [0.0; 2];
        for j in 0..2 {
            let act = self.cfg.actuators[j];
            let cmd = if self.delay_bufs[j].is_empty() {
                v[j]
            } else {
                self.delay_bufs[j].push_back(v[j]);
                self.delay_bufs[j].pop_front().expect("buffer never empty here")
            };
            let w = act.gain * cmd;
            s.shaker_force[j] = if self.cfg.ideal || act.lag == 0.0 {
                w
            } else {
                w + (s.shaker_force[j] - w) * (-dt / act.lag).exp()
            };
            force[j] = s.shaker_force[j];
        }

        let n = s.q.len();
        let mut f_ext = DVector::<f64>::zeros(n);
        for (f, act) in force.iter().zip(&self.cfg.actuators) {
            f_ext[self.iface_dofs[0]] += f;
            f_ext[self.iface_dofs[1]] += f * act.lever_arm;
        }
        if self.cfg.clamp.coulomb > 0.0 {
            let vel = s.qd[self.iface_dofs[0]];
            if vel != 0.0 {
                f_ext[self.iface_dofs[0]] -= self.cfg.clamp.coulomb * vel.signum();
            }
        }

        // Newmark average acceleration, constant operator
        let rhs = f_ext
            + &self.m * (&s.q * (4.0 / (dt * dt)) + &s.qd * (4.0 / dt) + &s.qdd)
            + &self.c * (&s.q * (2.0 / dt) + &s.qd);
        let q_new = self.newmark.solve(&rhs);
        let qdd_new = (&q_new - &s.q) * (4.0 / (dt * dt)) - &s.qd * (4.0 / dt) - &s.qdd;
        let qd_new = &s.qd + (&s.qdd + &qdd_new) * (dt / 2.0);
        s.q = q_new;
        s.qd = qd_new;
        s.qdd = qdd_new;
        s.t += dt;

        let (l1, l2) = self.lasers();
        let mut eps = self.gauge_strains();
        if !self.cfg.ideal {
            let nz = &self.cfg.noise;
            let w_m = 2.0 * PI * nz.mains_freq;
            let phases = [nz.mains_phase, nz.mains_phase + nz.gauge2_phase_shift];
            for (e, ph) in eps.iter_mut().zip(phases) {
                *e += nz.mains_amplitude * (w_m * self.state.t + ph).sin();
                if nz.white_sigma > 0.0 {
                    let g: f64 = StandardNormal.sample(&mut self.rng);
                    *e += nz.white_sigma * g;
                }
            }
            eps[0] = self.filters[0].process(eps[0]);
            eps[1] = self.filters[1].process(eps[1]);
        }
        SensorFrame {
            l1,
            l2,
            eps1: eps[0],
            eps2: eps[1],
            t: self.state.t,
        }
    }

    /// Drive the harmonic command for `n_periods` whole periods and return
    /// the raw frames plus their period-synchronous average. The command's
    /// fundamental is snapped to the sample grid first.
    pub fn measure_window(&mut self, cmd: &VoltageCommand, n_periods: usize) -> Result<MeasuredWindow> {
        if n_periods == 0 {
            return Err(HybridError::InvalidArgument(
                "need at least one period".into(),
            ));
        }
        if cmd.coeffs.iter().any(|c| c.is_empty()) {
            return Err(HybridError::InvalidArgument(
                "each shaker needs at least the 0th harmonic".into(),
            ));
        }
        let (omega, spp) = snap_omega(cmd.omega, self.cfg.dt);
        let total = spp * n_periods;
        let mut raw = Vec::with_capacity(total);
        for _ in 0..total {
            let t_next = self.state.t + self.cfg.dt;
            let v = cmd.eval(omega, t_next);
            raw.push(self.step(v));
        }
        let mut averaged = Vec::with_capacity(spp);
        let inv = 1.0 / n_periods as f64;
        for slot in 0..spp {
            let mut acc = SensorFrame {
                l1: 0.0,
                l2: 0.0,
                eps1: 0.0,
                eps2: 0.0,
                t: raw[slot].t,
            };
            for p in 0..n_periods {
                let fr = &raw[p * spp + slot];
                acc.l1 += fr.l1;
                acc.l2 += fr.l2;
                acc.eps1 += fr.eps1;
                acc.eps2 += fr.eps2;
            }
            acc.l1 *= inv;
            acc.l2 *= inv;
            acc.eps1 *= inv;
            acc.eps2 *= inv;
            averaged.push(acc);
        }
        Ok(MeasuredWindow {
            omega,
            samples_per_period: spp,
            raw,
            averaged,
        })
    }

    /// Steady complex amplitudes of every sensor channel per unit voltage
    /// on each shaker, from the continuous-time model at `omega` rad/ms.
    /// Gauge channels include the discrete anti-aliasing filter's response
    /// unless the rig is ideal.
    pub fn frequency_response(&self, omega: f64) -> Result<[RigChannels; 2]> {
        let n = self.m.nrows();
        let mut d = DMatrix::<Complex64>::zeros(n, n);
        let s = Complex64::new(0.0, omega);
        for i in 0..n {
            for j in 0..n {
                d[(i, j)] = s * s * self.m[(i, j)] + s * self.c[(i, j)] + self.k[(i, j)];
            }
        }
        let lu = d.lu();
        let mut out = [RigChannels::default(); 2];
        for (slot, act) in out.iter_mut().zip(self.cfg.actuators) {
            let mut chain = Complex64::new(act.gain, 0.0);
            if !self.cfg.ideal {
                if act.lag > 0.0 {
                    chain /= Complex64::new(1.0, omega * act.lag);
                }
                if act.pure_delay > 0.0 {
                    let d_samples = (act.pure_delay / self.cfg.dt).round() * self.cfg.dt;
                    chain *= Complex64::new(0.0, -omega * d_samples).exp();
                }
            }
            let mut rhs = DVector::<Complex64>::zeros(n);
            rhs[self.iface_dofs[0]] = chain;
            rhs[self.iface_dofs[1]] = chain * act.lever_arm;
            let u = lu.solve(&rhs).ok_or({
                HybridError::NearPole {
                    s,
                    cond: f64::INFINITY,
                }
            })?;
            let l1 = u[self.iface_dofs[0]];
            let l2 = l1 - self.cfg.sensors.laser_separation * u[self.iface_dofs[1]];
            let mut eps = [Complex64::default(); 2];
            if self.cfg.ideal {
                // perfect sensing: strains equivalent to the exact complex
                // section forces, same mapping as the time-domain path
                let mut r = [Complex64::default(); 2];
                for (i, slot) in r.iter_mut().enumerate() {
                    for j in 0..n {
                        *slot += (s * s * self.beam_rows_m[(i, j)]
                            + s * self.beam_rows_c[(i, j)]
                            + self.beam_rows_k[(i, j)])
                            * u[j];
                    }
                }
                let (t, m) = (r[0], -r[1]);
                let se = &self.cfg.sensors;
                eps[0] = (m + se.gauge_pos.0 * t) / se.strain_to_moment;
                eps[1] = eps[0] + t * (se.gauge_pos.1 - se.gauge_pos.0) / se.strain_to_moment;
            } else {
                let half_h = Complex64::new(self.cfg.beam.h / 2.0, 0.0);
                for (slot, g) in eps.iter_mut().zip(&self.gauges) {
                    let mut curv = Complex64::default();
                    for (dof, w) in g.dofs.iter().zip(g.shape2) {
                        curv += u[*dof] * w;
                    }
                    *slot = half_h * curv * self.filters[0].response(omega, self.cfg.dt);
                }
            }
            *slot = RigChannels {
                l1,
                l2,
                eps1: eps[0],
                eps2: eps[1],
            };
        }
        Ok(out)
    }
}

/// Per-shaker steady sensor amplitudes.
#[derive(Debug, Clone, Copy, Default)]
pub struct RigChannels {
    pub l1: Complex64,
    pub l2: Complex64,
    pub eps1: Complex64,
    pub eps2: Complex64,
}

fn delay_buffer(act: ActuatorConfig, dt: f64) -> VecDeque<f64> {
    let samples = (act.pure_delay / dt).round() as usize;
    let mut buf = VecDeque::with_capacity(samples + 1);
    for _ in 0..samples {
        buf.push_back(0.0);
    }
    buf
}

fn gauge_probe(model: &FEModel, x: f64) -> Result<GaugeProbe> {
    let le = model.le;
    let elem = ((x / le).floor() as usize).min(model.n_elements - 1);
    let xi = x / le - elem as f64;
    let dofs_of = |node: usize| -> Result<[usize; 2]> {
        let d = model.dof_map[node];
        match (d[0], d[1]) {
            (Some(a), Some(b)) => Ok([a, b]),
            _ => Err(HybridError::InvalidArgument(
                "gauge element touches a constrained node".into(),
            )),
        }
    };
    let a = dofs_of(elem)?;
    let b = dofs_of(elem + 1)?;
    Ok(GaugeProbe {
        dofs: [a[0], a[1], b[0], b[1]],
        shape2: [
            (-6.0 + 12.0 * xi) / (le * le),
            (-4.0 + 6.0 * xi) / le,
            (6.0 - 12.0 * xi) / (le * le),
            (-2.0 + 6.0 * xi) / le,
        ],
    })
}

/// Interface motion from the two laser spots: u = l₁, φ = (l₁ − l₂)/d_l.
pub fn reconstruct_displacement(l1: f64, l2: f64, d_l: f64) -> (f64, f64) {
    (l1, (l1 - l2) / d_l)
}

/// Interface section force from the two gauge strains: the moment field is
/// linear between the gauges, its slope is the shear and its extrapolation
/// to the interface is the moment.
pub fn reconstruct_forces(eps1: f64, eps2: f64, d1: f64, d2: f64, c: f64) -> (f64, f64) {
    let t = c * (eps2 - eps1) / (d2 - d1);
    let m = c * eps1 - d1 * t;
    (t, m)
}

/// Closed-form first-harmonic extraction error from a mains disturbance
/// `T_N·sin(ρ·Ω·t + φ)` averaged over `n` whole periods of Ω: the cosine
/// and sine channel errors. Both vanish when ρ is an integer and shrink
/// as 1/n otherwise.
pub fn noise_bound(t_n: f64, rho_n: f64, phi_n: f64, n: u32) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(HybridError::InvalidArgument(
            "averaging needs at least one period".into(),
        ));
    }
    if rho_n < 0.0 {
        return Err(HybridError::InvalidArgument(
            "frequency ratio must be non-negative".into(),
        ));
    }
    if rho_n == 1.0 {
        return Err(HybridError::InvalidArgument(
            "a disturbance at the test frequency never averages out".into(),
        ));
    }
    let np = n as f64 * PI;
    let common = 2.0 * t_n * (np * rho_n).sin() / (np * (rho_n * rho_n - 1.0));
    let err_c = common * rho_n * (np * rho_n + phi_n).sin();
    let err_s = common * (np * rho_n + phi_n).cos();
    Ok((err_c, err_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn quiet(mut cfg: RigConfig) -> RigConfig {
        cfg.noise.mains_amplitude = 0.0;
        cfg.noise.white_sigma = 0.0;
        cfg
    }

    /// Synchronous first-harmonic coefficient of one channel over whole
    /// periods: c = (2/N)·Σ x_j·e^(−iΩt_j).
    fn first_harmonic(frames: &[SensorFrame], omega: f64, pick: impl Fn(&SensorFrame) -> f64) -> Complex64 {
        let n = frames.len() as f64;
        frames
            .iter()
            .map(|fr| pick(fr) * Complex64::new(0.0, -omega * fr.t).exp() * 2.0 / n)
            .sum()
    }

    #[test]
    fn rest_stays_at_rest() {
        let mut rig = Rig::new(quiet(RigConfig::default())).unwrap();
        for _ in 0..50 {
            let fr = rig.step([0.0, 0.0]);
            assert_eq!(fr.l1, 0.0);
            assert_eq!(fr.l2, 0.0);
            assert_eq!(fr.eps1, 0.0);
            assert_eq!(fr.eps2, 0.0);
        }
    }

    #[test]
    fn gauge_noise_is_zero_mean_over_whole_mains_periods() {
        let mut cfg = RigConfig::default();
        cfg.noise.white_sigma = 1.0e-6;
        let mut rig = Rig::new(cfg.clone()).unwrap();
        // 40 mains periods at 50 Hz and 5 kHz sampling
        let n = 40 * 100;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += rig.step([0.0, 0.0]).eps1;
        }
        let mean = sum / n as f64;
        // white part: sigma/sqrt(N) scale; mains averages out, filter has
        // unit DC gain
        assert!(
            mean.abs() < 6.0 * cfg.noise.white_sigma / (n as f64).sqrt() + 1.0e-9,
            "gauge mean {mean}"
        );
    }

    #[test]
    fn steady_response_matches_the_frequency_domain_model() {
        let cfg = quiet(RigConfig::default());
        let mut rig = Rig::new(cfg).unwrap();
        let (omega, spp) = snap_omega(2.0 * PI * 0.0175, rig.dt());
        let tf = rig.frequency_response(omega).unwrap();

        let cmd = VoltageCommand {
            omega,
            coeffs: [
                vec![Complex64::new(0.0, 0.0), Complex64::new(3.0, 0.0)],
                vec![Complex64::new(0.0, 0.0)],
            ],
        };
        // long settle: the soft suspension rings for a while
        rig.measure_window(&cmd, 120).unwrap();
        let win = rig.measure_window(&cmd, 10).unwrap();
        assert_eq!(win.samples_per_period, spp);

        type Check = (&'static str, fn(&SensorFrame) -> f64, fn(&RigChannels) -> Complex64);
        let checks: [Check; 4] = [
            ("l1", |f| f.l1, |c| c.l1),
            ("l2", |f| f.l2, |c| c.l2),
            ("eps1", |f| f.eps1, |c| c.eps1),
            ("eps2", |f| f.eps2, |c| c.eps2),
        ];
        for (name, pick, chan) in checks {
            let measured = first_harmonic(&win.raw, omega, pick).norm();
            let expected = (chan(&tf[0]) * 3.0).norm();
            assert_relative_eq!(measured, expected, max_relative = 5.0e-3);
            assert!(measured > 0.0, "{name} channel silent");
        }
    }

    #[test]
    fn halving_the_rate_barely_moves_steady_amplitudes() {
        // period of 56.8 ms fits both sample grids exactly
        let omega = 2.0 * PI / 56.8;
        let mut amps = Vec::new();
        for dt in [0.2, 0.4] {
            let mut cfg = quiet(RigConfig::default());
            cfg.dt = dt;
            let mut rig = Rig::new(cfg).unwrap();
            let cmd = VoltageCommand {
                omega,
                coeffs: [vec![Complex64::default(), Complex64::new(2.0, 0.0)], vec![
                    Complex64::default(),
                ]],
            };
            rig.measure_window(&cmd, 150).unwrap();
            let win = rig.measure_window(&cmd, 10).unwrap();
            assert_abs_diff_eq!(win.omega, omega, epsilon = 1.0e-12);
            amps.push(first_harmonic(&win.raw, omega, |f| f.l1).norm());
        }
        assert_relative_eq!(amps[0], amps[1], max_relative = 1.0e-3);
    }

    #[test]
    fn lasers_invert_a_rigid_clamp_motion() {
        let mut rig = Rig::new(quiet(RigConfig::default())).unwrap();
        let n = rig.state().q.len();
        let phi_star = 3.4e-3;
        let u_star = 0.27;
        let mut q = DVector::zeros(n);
        for node in 0..=rig.config().n_elements {
            let x = node as f64 * rig.config().beam.l / rig.config().n_elements as f64;
            q[2 * node] = u_star + phi_star * x;
            q[2 * node + 1] = phi_star;
        }
        rig.set_initial(q, DVector::zeros(n)).unwrap();
        let fr = rig.sensor_snapshot();
        let (u, phi) = reconstruct_displacement(fr.l1, fr.l2, rig.config().sensors.laser_separation);
        assert_abs_diff_eq!(u, u_star, epsilon = 1.0e-14);
        assert_abs_diff_eq!(phi, phi_star, epsilon = 1.0e-15);
    }

    #[test]
    fn displacement_reconstruction_arithmetic() {
        let (u, phi) = reconstruct_displacement(1.0, 0.7, 30.0);
        assert_eq!(u, 1.0);
        assert_abs_diff_eq!(phi, 0.01, epsilon = 1.0e-15);
        let (_, phi) = reconstruct_displacement(0.42, 0.42, 30.0);
        assert_eq!(phi, 0.0);
    }

    #[test]
    fn equal_strains_mean_pure_moment() {
        let c = 918.0;
        let (t, m) = reconstruct_forces(2.0e-4, 2.0e-4, 10.0, 30.0, c);
        assert_eq!(t, 0.0);
        assert_abs_diff_eq!(m, c * 2.0e-4, epsilon = 1.0e-12);
    }

    #[test]
    fn static_tip_load_reconstructs_through_the_gauges() {
        let rig_cfg = quiet(RigConfig::default());
        let mut rig = Rig::new(rig_cfg).unwrap();
        let n = rig.state().q.len();
        let p = 5.0e-4; // 0.5 N upward at the tip
        let mut f = DVector::zeros(n);
        f[n - 2] = p;
        // static equilibrium of the same sprung assembly
        let model = assemble(
            &rig.config().beam,
            rig.config().n_elements,
            BoundaryCondition::FreeFree,
        )
        .unwrap();
        let mut k_aug = model.k.clone();
        k_aug[(0, 0)] += rig.config().clamp.k_translation;
        k_aug[(1, 1)] += rig.config().clamp.k_rotation;
        let q = k_aug.lu().solve(&f).unwrap();
        rig.set_initial(q, DVector::zeros(n)).unwrap();
        let fr = rig.sensor_snapshot();
        let s = rig.config().sensors;
        let (t, m) = reconstruct_forces(fr.eps1, fr.eps2, s.gauge_pos.0, s.gauge_pos.1, s.strain_to_moment);
        let l_p = rig.config().beam.l;
        assert_relative_eq!(t.abs(), p, max_relative = 5.0e-3);
        assert_relative_eq!(m.abs(), p * l_p, max_relative = 5.0e-3);
        // a point load at the tip fixes the ratio: the interface moment
        // balances the shear times the full arm, opposite in sign
        assert_relative_eq!(m / t, -l_p, max_relative = 5.0e-3);
    }

    #[test]
    fn harmonic_gauge_forces_track_the_interface_reaction() {
        // The gauge pair cannot see the inertia of the short beam slice
        // before it, so the shear estimate carries an error of roughly the
        // slice inertial load. Away from resonance the interface rides the
        // suspension as a rigid body and that error is a fixed fraction of
        // the true shear (slice length over beam length, a few per cent).
        // Scan for the point where the predicted slice load is smallest
        // against the reported shear, on a lightly damped specimen.
        let mut cfg = quiet(RigConfig::default());
        cfg.damping_scale = 0.25;
        let mut rig = Rig::new(cfg).unwrap();

        let s = rig.config().sensors;
        let c = s.strain_to_moment;
        let (d1, d2) = s.gauge_pos;
        let rho_a = {
            let b = rig.config().beam;
            b.rho * b.b * b.h
        };
        let anchor = 0.5 * (d1 + d2);
        // scan only frequencies with whole-sample periods: the drive can sit
        // exactly on those, and a sharp resonance tolerates no snap shift
        let mut best = (0.0, 0, f64::INFINITY);
        for spp in 20..=250_usize {
            let f = 1.0 / (spp as f64 * rig.dt());
            let w = 2.0 * PI * f;
            let tf = rig.frequency_response(w).unwrap();
            for (j, ch) in tf.iter().enumerate() {
                let shear = c * (ch.eps2 - ch.eps1) / (d2 - d1);
                let phi = (ch.l1 - ch.l2) / s.laser_separation;
                let slice = rho_a * w * w * (ch.l1 * anchor + phi * anchor * anchor / 2.0);
                let err = slice.norm() / shear.norm().max(1.0e-300);
                if err < best.2 {
                    best = (f, j, err);
                }
            }
        }
        let omega = 2.0 * PI * best.0;
        let mut coeffs = [vec![Complex64::default()], vec![Complex64::default()]];
        coeffs[best.1] = vec![Complex64::default(), Complex64::new(4.0, 0.0)];
        let cmd = VoltageCommand { omega, coeffs };
        // settle by wall-clock, not period count: the dominant transients
        // (suspension ride, lightly damped bending) decay at fixed rates
        let settle = (8000.0 * omega / (2.0 * PI)).ceil() as usize;
        rig.measure_window(&cmd, settle.max(200)).unwrap();

        // collect simultaneous gauge frames and direct reactions
        let mut frames = Vec::new();
        let mut reactions = Vec::new();
        let (o, spp) = snap_omega(cmd.omega, rig.dt());
        for _ in 0..spp * 8 {
            let t_next = rig.state().t + rig.dt();
            let v = cmd.eval(o, t_next);
            let fr = rig.step(v);
            frames.push(fr);
            let (ft, fm) = rig.interface_reaction();
            reactions.push(SensorFrame {
                l1: ft,
                l2: fm,
                eps1: 0.0,
                eps2: 0.0,
                t: fr.t,
            });
        }
        let eps1 = first_harmonic(&frames, omega, |f| f.eps1);
        let eps2 = first_harmonic(&frames, omega, |f| f.eps2);
        // undo the known sensor chain exactly (sensing-limited accuracy)
        let chain = Biquad::lowpass(rig.config().filter.cutoff, rig.config().filter.xi, rig.dt())
            .response(omega, rig.dt());
        let (t_rec, m_rec) = {
            let t = c * (eps2 - eps1) / (d2 - d1) / chain;
            let m = c * eps1 / chain - d1 * t;
            (t, m)
        };
        let f_trans = first_harmonic(&reactions, omega, |f| f.l1);
        let f_rot = first_harmonic(&reactions, omega, |f| f.l2);
        // beam convention: interface rows carry (shear, −moment)
        assert_relative_eq!((t_rec - f_trans).norm(), 0.0, epsilon = 0.01 * f_trans.norm());
        assert_relative_eq!((-m_rec - f_rot).norm(), 0.0, epsilon = 0.01 * f_rot.norm());
    }

    #[test]
    fn doubling_the_drive_doubles_the_steady_harmonics() {
        let mut amps = Vec::new();
        for scale in [1.0, 2.0] {
            let mut rig = Rig::new(quiet(RigConfig::default())).unwrap();
            let (omega, _) = snap_omega(2.0 * PI * 0.018, rig.dt());
            let cmd = VoltageCommand {
                omega,
                coeffs: [
                    vec![Complex64::default(), Complex64::new(1.5 * scale, 0.0)],
                    vec![Complex64::default(), Complex64::new(0.0, -0.8 * scale)],
                ],
            };
            rig.measure_window(&cmd, 100).unwrap();
            let win = rig.measure_window(&cmd, 6).unwrap();
            amps.push([
                first_harmonic(&win.raw, omega, |f| f.l1),
                first_harmonic(&win.raw, omega, |f| f.eps2),
            ]);
        }
        for (ch, (once, twice)) in amps[0].iter().zip(&amps[1]).enumerate() {
            let err = (twice - once * 2.0).norm() / twice.norm();
            assert!(err < 1.0e-10, "channel {ch} nonlinearity {err}");
        }
    }

    #[test]
    fn identical_seeds_reproduce_the_stream_bit_for_bit() {
        let cfg = RigConfig::default();
        let run = || {
            let mut rig = Rig::new(cfg.clone()).unwrap();
            let (omega, _) = snap_omega(2.0 * PI * 0.017, rig.dt());
            let cmd = VoltageCommand {
                omega,
                coeffs: [vec![Complex64::default(), Complex64::new(2.0, 1.0)], vec![
                    Complex64::default(),
                ]],
            };
            rig.measure_window(&cmd, 3).unwrap().raw
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.eps1.to_bits(), y.eps1.to_bits());
            assert_eq!(x.eps2.to_bits(), y.eps2.to_bits());
            assert_eq!(x.l1.to_bits(), y.l1.to_bits());
        }
    }

    #[test]
    fn free_decay_never_gains_energy() {
        let mut rig = Rig::new(quiet(RigConfig::default())).unwrap();
        let n = rig.state().q.len();
        let mut q = DVector::zeros(n);
        // smooth deflected shape plus a clamp offset
        for node in 0..=rig.config().n_elements {
            let x = node as f64 / rig.config().n_elements as f64;
            q[2 * node] = 0.5 * x * x + 0.1;
            q[2 * node + 1] = x;
        }
        rig.set_initial(q, DVector::zeros(n)).unwrap();
        let e0 = rig.mechanical_energy();
        assert!(e0 > 0.0);
        let mut e_prev = e0;
        for _ in 0..2000 {
            rig.step([0.0, 0.0]);
            let e = rig.mechanical_energy();
            assert!(e <= e_prev * (1.0 + 1.0e-12), "energy rose: {e_prev} -> {e}");
            e_prev = e;
        }
        // and it actually dissipates
        assert!(e_prev < 0.9 * e0, "no decay: {e0} -> {e_prev}");
    }

    #[test]
    fn filter_lag_is_flat_across_the_operating_band() {
        let cfg = RigConfig::default();
        let dt = cfg.dt;
        let mut lags = Vec::new();
        for f_khz in [0.016, 0.0175, 0.019] {
            let (omega, spp) = snap_omega(2.0 * PI * f_khz, dt);
            let mut filt = Biquad::lowpass(cfg.filter.cutoff, cfg.filter.xi, dt);
            // settle, then measure over whole periods
            let mut frames = Vec::new();
            let total = spp * 40;
            for j in 0..total {
                let t = (j + 1) as f64 * dt;
                let y = filt.process((omega * t).cos());
                if j >= spp * 30 {
                    frames.push(SensorFrame {
                        l1: y,
                        l2: 0.0,
                        eps1: 0.0,
                        eps2: 0.0,
                        t,
                    });
                }
            }
            let c = first_harmonic(&frames, omega, |f| f.l1);
            let measured_lag = -c.arg();
            let predicted = -filt.response(omega, dt).arg();
            assert_abs_diff_eq!(measured_lag, predicted, epsilon = 1.0e-6);
            lags.push(measured_lag);
        }
        let lo = lags.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = lags.iter().cloned().fold(0.0f64, f64::max);
        assert!(hi - lo <= 0.01, "lag spread {lo}..{hi}");
        assert!(
            (lags[1] - cfg.filter.compensation).abs() <= 0.01,
            "mid-band lag {} vs configured {}",
            lags[1],
            cfg.filter.compensation
        );
    }

    #[test]
    fn white_noise_propagates_to_shear_as_the_closed_form() {
        use rand::Rng;
        let (d1, d2, c) = (10.0, 30.0, 918.0);
        let sigma = 3.0e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let e1 = sigma * rng.sample::<f64, _>(StandardNormal);
            let e2 = sigma * rng.sample::<f64, _>(StandardNormal);
            let (t, _) = reconstruct_forces(e1, e2, d1, d2, c);
            sum += t;
            sum2 += t * t;
        }
        let var = sum2 / n as f64 - (sum / n as f64).powi(2);
        let predicted = c * sigma * 2.0f64.sqrt() / (d2 - d1);
        assert_relative_eq!(var.sqrt(), predicted, max_relative = 0.02);
    }

    #[test]
    fn noise_bound_matches_quadrature() {
        // composite Simpson over u ∈ [0, 2πn] of the defining averages
        let quad = |t_n: f64, rho: f64, phi: f64, n: u32| -> (f64, f64) {
            let b = 2.0 * PI * n as f64;
            let steps = 400_000;
            let h = b / steps as f64;
            let f_c = |u: f64| t_n * (rho * u + phi).sin() * u.cos();
            let f_s = |u: f64| t_n * (rho * u + phi).sin() * u.sin();
            let mut acc_c = f_c(0.0) + f_c(b);
            let mut acc_s = f_s(0.0) + f_s(b);
            for j in 1..steps {
                let w = if j % 2 == 1 { 4.0 } else { 2.0 };
                acc_c += w * f_c(j as f64 * h);
                acc_s += w * f_s(j as f64 * h);
            }
            (acc_c * h / 3.0 * 2.0 / b, acc_s * h / 3.0 * 2.0 / b)
        };
        let cases = [
            (1.3, 50.0 / 17.5, 0.4, 30u32),
            (0.7, 0.35, 1.2, 12),
            (2.0, 2.5, -0.8, 7),
            (1.0, 1.2, 0.0, 45),
            (0.5, 7.3, 2.9, 3),
        ];
        for (t_n, rho, phi, n) in cases {
            let (ec, es) = noise_bound(t_n, rho, phi, n).unwrap();
            let (qc, qs) = quad(t_n, rho, phi, n);
            assert_abs_diff_eq!(ec, qc, epsilon = 1.0e-10);
            assert_abs_diff_eq!(es, qs, epsilon = 1.0e-10);
        }
        // whole-ratio disturbances vanish over whole periods
        let (ec, es) = noise_bound(1.7, 3.0, 0.9, 11).unwrap();
        assert_abs_diff_eq!(ec, 0.0, epsilon = 1.0e-12);
        assert_abs_diff_eq!(es, 0.0, epsilon = 1.0e-12);
        assert!(noise_bound(1.0, 1.0, 0.0, 5).is_err());
        assert!(noise_bound(1.0, 2.0, 0.0, 0).is_err());
    }

    #[test]
    fn bound_magnitude_and_averaging_law() {
        let bound = |t_n: f64, rho: f64, n: u32| {
            2.0 * t_n * rho.max(1.0) / (n as f64 * PI * (rho * rho - 1.0).abs())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..200 {
            let t_n = rng.gen_range(0.1..5.0);
            let rho: f64 = rng.gen_range(0.2..6.0);
            if (rho - 1.0).abs() < 0.05 {
                continue;
            }
            let phi = rng.gen_range(-PI..PI);
            let n = rng.gen_range(1..60u32);
            let (ec, es) = noise_bound(t_n, rho, phi, n).unwrap();
            let b = bound(t_n, rho, n);
            assert!(ec.abs() <= b * (1.0 + 1.0e-12), "cos err {ec} above {b}");
            assert!(es.abs() <= b * (1.0 + 1.0e-12), "sin err {es} above {b}");
            assert_abs_diff_eq!(bound(t_n, rho, 2 * n), b / 2.0, epsilon = 1.0e-12);
        }
    }

    #[test]
    fn mains_residual_in_the_extracted_harmonic_obeys_the_bound() {
        let mut cfg = RigConfig::default();
        cfg.noise.white_sigma = 0.0;
        cfg.noise.mains_amplitude = 5.0e-5;
        let s = cfg.sensors;
        let mut rig = Rig::new(cfg.clone()).unwrap();
        let (omega, _) = snap_omega(2.0 * PI * 0.0175, rig.dt());
        let n = 30usize;
        let cmd = VoltageCommand {
            omega,
            coeffs: [vec![Complex64::default()], vec![Complex64::default()]],
        };
        let win = rig.measure_window(&cmd, n).unwrap();

        // force-level disturbance amplitude from the two gauge phases
        let nz = cfg.noise;
        let shift = Complex64::new(0.0, nz.gauge2_phase_shift).exp();
        let t_n_eff = s.strain_to_moment * nz.mains_amplitude * (shift - Complex64::new(1.0, 0.0)).norm()
            / (s.gauge_pos.1 - s.gauge_pos.0);
        let rho = 2.0 * PI * nz.mains_freq / omega;
        let phi_bound = 2.0 * t_n_eff * rho.max(1.0) / (n as f64 * PI * (rho * rho - 1.0).abs());

        let shear_frames: Vec<SensorFrame> = win
            .raw
            .iter()
            .map(|fr| {
                let (t, _) = reconstruct_forces(fr.eps1, fr.eps2, s.gauge_pos.0, s.gauge_pos.1, s.strain_to_moment);
                SensorFrame {
                    l1: t,
                    l2: 0.0,
                    eps1: 0.0,
                    eps2: 0.0,
                    t: fr.t,
                }
            })
            .collect();
        let c1 = first_harmonic(&shear_frames, omega, |f| f.l1);
        // the filter only attenuates (monotone passband), so the raw-domain
        // bound still caps the filtered residual; small slack for sampling
        assert!(
            c1.re.abs() <= phi_bound * 1.1 && c1.im.abs() <= phi_bound * 1.1,
            "extracted ({}, {}) vs bound {phi_bound}",
            c1.re,
            c1.im
        );

        // doubling the window halves the cap
        let win2 = rig.measure_window(&cmd, 2 * n).unwrap();
        let shear2: Vec<SensorFrame> = win2
            .raw
            .iter()
            .map(|fr| {
                let (t, _) = reconstruct_forces(fr.eps1, fr.eps2, s.gauge_pos.0, s.gauge_pos.1, s.strain_to_moment);
                SensorFrame {
                    l1: t,
                    l2: 0.0,
                    eps1: 0.0,
                    eps2: 0.0,
                    t: fr.t,
                }
            })
            .collect();
        let c2 = first_harmonic(&shear2, omega, |f| f.l1);
        assert!(
            c2.re.abs() <= phi_bound / 2.0 * 1.1 && c2.im.abs() <= phi_bound / 2.0 * 1.1,
            "doubled window residual ({}, {})",
            c2.re,
            c2.im
        );
    }

    #[test]
    fn averaging_a_steady_noise_free_window_is_the_identity() {
        let mut rig = Rig::new(quiet(RigConfig::default())).unwrap();
        let (omega, spp) = snap_omega(2.0 * PI * 0.0175, rig.dt());
        let cmd = VoltageCommand {
            omega,
            coeffs: [vec![Complex64::default(), Complex64::new(2.0, 0.5)], vec![
                Complex64::default(),
            ]],
        };
        rig.measure_window(&cmd, 250).unwrap();
        let win = rig.measure_window(&cmd, 5).unwrap();
        let amp = win.raw.iter().map(|f| f.l1.abs()).fold(0.0f64, f64::max);
        for slot in 0..spp {
            let avg = &win.averaged[slot];
            let single = &win.raw[slot];
            assert_abs_diff_eq!(avg.l1, single.l1, epsilon = 1.0e-6 * amp);
            assert_abs_diff_eq!(avg.eps1, single.eps1, epsilon = 1.0e-6 * amp);
        }
    }

    #[test]
    fn measure_window_rejects_empty_requests() {
        let mut rig = Rig::new(quiet(RigConfig::default())).unwrap();
        let cmd = VoltageCommand {
            omega: 0.1,
            coeffs: [vec![Complex64::default()], vec![Complex64::default()]],
        };
        assert!(rig.measure_window(&cmd, 0).is_err());
        let bad = VoltageCommand {
            omega: 0.1,
            coeffs: [vec![], vec![Complex64::default()]],
        };
        assert!(rig.measure_window(&bad, 3).is_err());
    }

    #[test]
    fn snapping_lands_on_the_sample_grid() {
        let (omega, n) = snap_omega(2.0 * PI * 0.0175, 0.2);
        let period = 2.0 * PI / omega;
        assert_abs_diff_eq!(period, n as f64 * 0.2, epsilon = 1.0e-12);
        // 17.5 Hz at 5 kHz: 285.714… samples, snapped to 286
        assert_eq!(n, 286);
        // worst case is half a sample over ~286, comfortably sub-0.2%
        let f_snapped = omega / (2.0 * PI) * crate::KHZ_TO_HZ;
        assert!((f_snapped - 17.5).abs() / 17.5 < 2.0e-3);
    }
}
