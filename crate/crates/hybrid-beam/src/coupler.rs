//! The coupling loop that runs a hybrid test: drive the rig with a periodic
//! voltage command, average whole periods, extract harmonics, and update the
//! command with a quasi-Newton step until the interface mismatch between the
//! measured side and the simulated side falls below tolerance.
//!
//! Everything here works on one fundamental frequency at a time. Signals are
//! represented as [`HarmonicVector`]s: a DC value plus complex amplitudes for
//! each harmonic of the fundamental, per channel. The mismatch that drives
//! the loop is the interface residual: the measured interface motion minus
//! the motion the simulated side would have under the measured interface
//! forces. At the fixed point both sides agree and the pair behaves like the
//! unsplit structure.
//!
//! The solver never sees the rig internals; it only commands voltages and
//! reads sensor windows, exactly as a controller cabled to a real bench
//! would. The simulated side hides behind [`NsInterface`] so tests can swap
//! in synthetic plants.

use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use num_complex::Complex64;

use crate::error::{HybridError, Result};
use crate::rig::{reconstruct_displacement, reconstruct_forces, Rig, VoltageCommand};
use crate::substructure::{condense, SubModel};

/// Periodic multi-channel signal at one fundamental: a real DC level and
/// complex amplitudes `c_k` for harmonics `k = 1..=n_h`, per channel. The
/// time signal on channel `ch` is `dc + Σ_k Re(c_k · e^{i k ω t})`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicVector {
    /// Fundamental, rad/ms.
    pub omega: f64,
    /// One DC value per channel.
    pub dc: Vec<f64>,
    /// `ac[ch][k-1]` is harmonic `k` on channel `ch`.
    pub ac: Vec<Vec<Complex64>>,
}

impl HarmonicVector {
    /// All-zero signal with the given shape.
    pub fn zeros(omega: f64, n_channels: usize, n_h: usize) -> HarmonicVector {
        HarmonicVector {
            omega,
            dc: vec![0.0; n_channels],
            ac: vec![vec![Complex64::default(); n_h]; n_channels],
        }
    }

    pub fn n_channels(&self) -> usize {
        self.dc.len()
    }

    pub fn n_harmonics(&self) -> usize {
        self.ac.first().map_or(0, Vec::len)
    }

    /// Amplitude of harmonic `k` on `ch`; `k = 0` is the DC level (real).
    pub fn get(&self, ch: usize, k: usize) -> Complex64 {
        if k == 0 {
            Complex64::new(self.dc[ch], 0.0)
        } else {
            self.ac[ch][k - 1]
        }
    }

    pub fn set_dc(&mut self, ch: usize, value: f64) {
        self.dc[ch] = value;
    }

    /// Set harmonic `k >= 1` on `ch`.
    pub fn set_ac(&mut self, ch: usize, k: usize, value: Complex64) {
        assert!(k >= 1, "harmonic index 0 is the DC level; use set_dc");
        self.ac[ch][k - 1] = value;
    }

    /// Same channel count, harmonic count, and fundamental.
    pub fn conforms(&self, other: &HarmonicVector) -> bool {
        self.omega == other.omega
            && self.n_channels() == other.n_channels()
            && self.n_harmonics() == other.n_harmonics()
    }

    /// Time-domain value of channel `ch` at absolute time `t` (ms).
    pub fn eval(&self, ch: usize, t: f64) -> f64 {
        let mut x = self.dc[ch];
        for (k, c) in self.ac[ch].iter().enumerate() {
            let phase = Complex64::new(0.0, (k + 1) as f64 * self.omega * t);
            x += (c * phase.exp()).re;
        }
        x
    }

    /// AC content flattened channel-major as `[Re c_1, Im c_1, Re c_2, ...]`
    /// per channel. DC never enters the flattened form: the loop neither
    /// controls nor corrects static offsets.
    pub fn flat_ac(&self) -> DVector<f64> {
        self.flat_ac_scaled(&vec![1.0; self.n_channels()])
    }

    /// Like [`flat_ac`](Self::flat_ac) with one scale factor per channel,
    /// used to bring mixed physical units onto a common footing before
    /// taking Euclidean norms.
    pub fn flat_ac_scaled(&self, scales: &[f64]) -> DVector<f64> {
        assert_eq!(scales.len(), self.n_channels(), "one scale per channel");
        let mut out = DVector::zeros(2 * self.n_channels() * self.n_harmonics());
        let mut i = 0;
        for (ch, coeffs) in self.ac.iter().enumerate() {
            for c in coeffs {
                out[i] = scales[ch] * c.re;
                out[i + 1] = scales[ch] * c.im;
                i += 2;
            }
        }
        out
    }

    /// Inverse of [`flat_ac`](Self::flat_ac): overwrite the AC content from a
    /// flattened vector. The shape (channels, harmonics, fundamental) stays.
    pub fn set_flat_ac(&mut self, flat: &DVector<f64>) {
        assert_eq!(
            flat.len(),
            2 * self.n_channels() * self.n_harmonics(),
            "flattened length must match the signal shape"
        );
        let mut i = 0;
        for coeffs in &mut self.ac {
            for c in coeffs.iter_mut() {
                *c = Complex64::new(flat[i], flat[i + 1]);
                i += 2;
            }
        }
    }

    /// Euclidean norm over the AC content with per-channel scales; DC is
    /// excluded on purpose (a static offset is not a synchronisation error).
    pub fn scaled_norm(&self, scales: &[f64]) -> f64 {
        self.flat_ac_scaled(scales).norm()
    }

    fn zip_with(
        &self,
        other: &HarmonicVector,
        f: impl Fn(Complex64, Complex64) -> Complex64,
        g: impl Fn(f64, f64) -> f64,
    ) -> HarmonicVector {
        assert!(
            self.conforms(other),
            "harmonic vectors must share shape and fundamental"
        );
        HarmonicVector {
            omega: self.omega,
            dc: self
                .dc
                .iter()
                .zip(&other.dc)
                .map(|(a, b)| g(*a, *b))
                .collect(),
            ac: self
                .ac
                .iter()
                .zip(&other.ac)
                .map(|(row_a, row_b)| {
                    row_a
                        .iter()
                        .zip(row_b)
                        .map(|(a, b)| f(*a, *b))
                        .collect()
                })
                .collect(),
        }
    }
}

impl std::ops::Add for &HarmonicVector {
    type Output = HarmonicVector;
    fn add(self, rhs: &HarmonicVector) -> HarmonicVector {
        self.zip_with(rhs, |a, b| a + b, |a, b| a + b)
    }
}

impl std::ops::Sub for &HarmonicVector {
    type Output = HarmonicVector;
    fn sub(self, rhs: &HarmonicVector) -> HarmonicVector {
        self.zip_with(rhs, |a, b| a - b, |a, b| a - b)
    }
}

/// Discrete Fourier coefficients of uniformly sampled channels covering a
/// whole number of periods of `omega`.
///
/// Sample `j` of every channel is taken at absolute time `t0 + j·dt`, and
/// the coefficients are phase-referenced to that absolute clock, so signals
/// captured in different windows of the same run can be compared directly.
/// `c_k = (2 - δ_{k0}) / len · Σ_j x_j e^{-i k ω t_j}`.
///
/// Errors when the period is not a whole number of samples, when the data
/// does not cover whole periods, or when `n_h` reaches the Nyquist limit.
pub fn extract_harmonics(
    channels: &[&[f64]],
    t0: f64,
    dt: f64,
    omega: f64,
    n_h: usize,
) -> Result<HarmonicVector> {
    if channels.is_empty() {
        return Err(HybridError::InvalidArgument("no channels".into()));
    }
    if omega <= 0.0 || dt <= 0.0 {
        return Err(HybridError::InvalidArgument(
            "omega and dt must be positive".into(),
        ));
    }
    let len = channels[0].len();
    if len == 0 || channels.iter().any(|c| c.len() != len) {
        return Err(HybridError::InvalidArgument(
            "channels must be non-empty and equally long".into(),
        ));
    }
    let period = 2.0 * PI / omega;
    let spp = period / dt;
    let spp_round = spp.round();
    if spp_round < 1.0 || (spp - spp_round).abs() > 1.0e-9 * spp {
        return Err(HybridError::InvalidArgument(format!(
            "period {period} ms is not a whole number of {dt} ms samples; \
             snap the frequency to the sample grid first"
        )));
    }
    let spp = spp_round as usize;
    if !len.is_multiple_of(spp) {
        return Err(HybridError::InvalidArgument(format!(
            "{len} samples do not cover whole periods of {spp} samples"
        )));
    }
    if 2 * n_h >= spp {
        return Err(HybridError::InvalidArgument(format!(
            "harmonic {n_h} is at or above the Nyquist limit for {spp} \
             samples per period"
        )));
    }
    let mut out = HarmonicVector::zeros(omega, channels.len(), n_h);
    let inv = 1.0 / len as f64;
    for (ch, data) in channels.iter().enumerate() {
        out.dc[ch] = data.iter().sum::<f64>() * inv;
        for k in 1..=n_h {
            let mut acc = Complex64::default();
            for (j, &x) in data.iter().enumerate() {
                let t = t0 + j as f64 * dt;
                acc += x * Complex64::new(0.0, -(k as f64) * omega * t).exp();
            }
            out.ac[ch][k - 1] = 2.0 * inv * acc;
        }
    }
    Ok(out)
}

/// Advance every channel's harmonic `k` by `thetas[k-1]` radians
/// (multiplication by `e^{+iθ}`), undoing a known phase lag in the
/// measurement chain. DC is untouched.
pub fn compensate_phase(h: &HarmonicVector, thetas: &[f64]) -> Result<HarmonicVector> {
    if thetas.len() != h.n_harmonics() {
        return Err(HybridError::InvalidArgument(format!(
            "{} lead angles for {} harmonics",
            thetas.len(),
            h.n_harmonics()
        )));
    }
    let mut out = h.clone();
    for coeffs in &mut out.ac {
        for (c, theta) in coeffs.iter_mut().zip(thetas) {
            *c *= Complex64::new(0.0, *theta).exp();
        }
    }
    Ok(out)
}

/// True once the tail of a residual-norm history has settled: the last two
/// entries differ by less than `tol`. With fewer than two entries there is
/// nothing to compare yet.
pub fn steady_check(history: &[f64], tol: f64) -> bool {
    match history {
        [.., a, b] => (b - a).abs() < tol,
        _ => false,
    }
}

/// The simulated half of a hybrid test, reduced to its interface: a 2x2
/// dynamic stiffness and an external load, per harmonic. Channels are
/// (deflection, rotation); forces are the nodal pair conjugate to them.
pub trait NsInterface {
    /// Interface dynamic stiffness at `s = i·k·omega`.
    fn dynamic_stiffness(&self, omega: f64, k: usize) -> Result<Matrix2<Complex64>>;

    /// External load on the simulated side, condensed to the interface,
    /// at harmonic `k` of `omega`.
    fn external_force(&self, omega: f64, k: usize) -> Vector2<Complex64>;
}

/// The root-side beam sub-model as the simulated half, loaded by a single
/// sinusoidal point force on the interface node's deflection DOF.
pub struct BeamNs {
    sub: SubModel,
    /// First-harmonic force amplitude, kN.
    forcing: f64,
    cache: RefCell<HashMap<(u64, usize), Matrix2<Complex64>>>,
}

impl BeamNs {
    pub fn new(sub: SubModel, forcing: f64) -> BeamNs {
        BeamNs {
            sub,
            forcing,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn sub(&self) -> &SubModel {
        &self.sub
    }

    pub fn forcing(&self) -> f64 {
        self.forcing
    }
}

impl NsInterface for BeamNs {
    fn dynamic_stiffness(&self, omega: f64, k: usize) -> Result<Matrix2<Complex64>> {
        let key = (omega.to_bits(), k);
        if let Some(d) = self.cache.borrow().get(&key) {
            return Ok(*d);
        }
        let s = Complex64::new(0.0, k as f64 * omega);
        let d = condense(&self.sub, s)?.d;
        self.cache.borrow_mut().insert(key, d);
        Ok(d)
    }

    fn external_force(&self, _omega: f64, k: usize) -> Vector2<Complex64> {
        // the force acts on the interface node itself, so condensation
        // passes it through unchanged
        if k == 1 {
            Vector2::new(Complex64::new(self.forcing, 0.0), Complex64::default())
        } else {
            Vector2::zeros()
        }
    }
}

/// Interface residual per harmonic: measured motion minus the motion the
/// simulated side takes under the measured interface load,
/// `R_k = U_k - D_k⁻¹·(F_k^ext - F_k)`.
///
/// `u` carries measured (deflection mm, rotation rad); `f` carries the
/// measured section resultants (shear kN, bending moment kN·mm). The moment
/// channel flips sign internally: a positive bending moment at the cut acts
/// on the measured side as a negative nodal moment.
///
/// The DC level is excluded; the result's DC is zero.
pub fn residual(
    u: &HarmonicVector,
    f: &HarmonicVector,
    ns: &dyn NsInterface,
) -> Result<HarmonicVector> {
    if u.n_channels() != 2 || f.n_channels() != 2 {
        return Err(HybridError::InvalidArgument(
            "residual needs 2 motion channels and 2 force channels".into(),
        ));
    }
    if u.omega != f.omega || u.n_harmonics() != f.n_harmonics() {
        return Err(HybridError::InvalidArgument(
            "motion and force signals must share fundamental and harmonics".into(),
        ));
    }
    let n_h = u.n_harmonics();
    let mut r = HarmonicVector::zeros(u.omega, 2, n_h);
    for k in 1..=n_h {
        let d = ns.dynamic_stiffness(u.omega, k)?;
        let det = d[(0, 0)] * d[(1, 1)] - d[(0, 1)] * d[(1, 0)];
        // |det|/‖D‖² is roughly the inverse condition number of a 2x2
        if det.norm() <= 1.0e-12 * d.norm_squared() {
            return Err(HybridError::NumericalFailure(format!(
                "interface dynamic stiffness is singular at harmonic {k}"
            )));
        }
        let f_on_measured = Vector2::new(f.get(0, k), -f.get(1, k));
        let rhs = ns.external_force(u.omega, k) - f_on_measured;
        let u_sim = Vector2::new(
            (d[(1, 1)] * rhs[0] - d[(0, 1)] * rhs[1]) / det,
            (d[(0, 0)] * rhs[1] - d[(1, 0)] * rhs[0]) / det,
        );
        r.set_ac(0, k, u.get(0, k) - u_sim[0]);
        r.set_ac(1, k, u.get(1, k) - u_sim[1]);
    }
    Ok(r)
}

/// First-harmonic synchronisation quality of one channel across the split.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSync {
    pub channel: &'static str,
    /// How far the measured side runs behind the simulated side, ms.
    /// A lagging measured side gives a positive delay. `None` when the
    /// simulated side carries no usable amplitude.
    pub delay_ms: Option<f64>,
    /// Measured amplitude over simulated amplitude, minus one, percent.
    pub amplification_pct: Option<f64>,
}

fn channel_sync(name: &'static str, ns: Complex64, ps: Complex64, omega: f64) -> ChannelSync {
    let ns_amp = ns.norm();
    let ps_amp = ps.norm();
    if ns_amp <= 0.0 || ns_amp < 1.0e-9 * ps_amp {
        return ChannelSync {
            channel: name,
            delay_ms: None,
            amplification_pct: None,
        };
    }
    let mut dphi = ps.arg() - ns.arg();
    if dphi > PI {
        dphi -= 2.0 * PI;
    } else if dphi <= -PI {
        dphi += 2.0 * PI;
    }
    ChannelSync {
        channel: name,
        delay_ms: Some(-dphi / omega),
        amplification_pct: Some((ps_amp / ns_amp - 1.0) * 100.0),
    }
}

/// Compare the two sides of the split channel by channel at the first
/// harmonic: forces first (shear, moment), then motion (deflection,
/// rotation). `*_n` is the simulated side, `*_p` the measured one.
pub fn sync_metrics(
    u_n: &HarmonicVector,
    f_n: &HarmonicVector,
    u_p: &HarmonicVector,
    f_p: &HarmonicVector,
) -> Result<Vec<ChannelSync>> {
    for (a, b) in [(u_n, u_p), (f_n, f_p), (u_n, f_n)] {
        if a.omega != b.omega {
            return Err(HybridError::InvalidArgument(
                "sides must share the fundamental".into(),
            ));
        }
    }
    let omega = u_n.omega;
    Ok(vec![
        channel_sync("shear", f_n.get(0, 1), f_p.get(0, 1), omega),
        channel_sync("moment", f_n.get(1, 1), f_p.get(1, 1), omega),
        channel_sync("deflection", u_n.get(0, 1), u_p.get(0, 1), omega),
        channel_sync("rotation", u_n.get(1, 1), u_p.get(1, 1), omega),
    ])
}

/// Quasi-Newton state: an approximation `B` of the inverse Jacobian of the
/// residual with respect to the flattened command, kept current with rank-one
/// secant updates from every measured (command, residual) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BroydenState {
    b: DMatrix<f64>,
    damping: f64,
    last: Option<(DVector<f64>, DVector<f64>)>,
}

impl BroydenState {
    /// Start from a known inverse-Jacobian estimate.
    pub fn new(b: DMatrix<f64>, damping: f64) -> Result<BroydenState> {
        if b.nrows() != b.ncols() || b.is_empty() {
            return Err(HybridError::InvalidArgument(
                "inverse Jacobian must be square and non-empty".into(),
            ));
        }
        if !(damping > 0.0 && damping <= 1.0) {
            return Err(HybridError::InvalidArgument(
                "step damping must be in (0, 1]".into(),
            ));
        }
        Ok(BroydenState {
            b,
            damping,
            last: None,
        })
    }

    /// Start from `gain · I` when nothing better is known. `gain` carries
    /// the units of command per residual.
    pub fn identity_scaled(n: usize, gain: f64, damping: f64) -> Result<BroydenState> {
        BroydenState::new(DMatrix::identity(n, n) * gain, damping)
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn set_damping(&mut self, damping: f64) {
        self.damping = damping;
    }

    pub fn inverse_jacobian(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Residual of the pair the next `observe` will difference against.
    pub fn last_residual(&self) -> Option<&DVector<f64>> {
        self.last.as_ref().map(|(_, r)| r)
    }

    /// Assimilate a measured pair. With a previous pair on record this is
    /// the secant update of the inverse,
    /// `B += (Δv - B·Δr)·(Δvᵀ·B) / (Δvᵀ·B·Δr)`,
    /// skipped (but still recorded) when the denominator is too small to
    /// trust.
    pub fn observe(&mut self, v: &DVector<f64>, r: &DVector<f64>) {
        assert_eq!(v.len(), self.dim(), "command dimension mismatch");
        assert_eq!(r.len(), self.dim(), "residual dimension mismatch");
        if let Some((v0, r0)) = &self.last {
            let dv = v - v0;
            let dr = r - r0;
            let bdr = &self.b * &dr;
            let vtb = self.b.tr_mul(&dv);
            let denom = dv.dot(&bdr);
            if denom.abs() > 1.0e-14 * dv.norm() * bdr.norm() {
                let num = (&dv - &bdr) / denom;
                for i in 0..self.dim() {
                    for j in 0..self.dim() {
                        self.b[(i, j)] += num[i] * vtb[j];
                    }
                }
            }
        }
        self.last = Some((v.clone(), r.clone()));
    }

    /// Damped quasi-Newton step from the pair `(v, r)`.
    pub fn propose(&self, v: &DVector<f64>, r: &DVector<f64>) -> DVector<f64> {
        v - &(&self.b * r) * self.damping
    }
}

/// How the residual is flattened for the quasi-Newton update. Convergence
/// is always judged on the motion mismatch in millimetres; this only changes
/// the vector the update sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualForm {
    /// Motion mismatch, rotation scaled to millimetres by the laser
    /// separation.
    #[default]
    Displacement,
    /// The mismatch premultiplied by the interface dynamic stiffness, i.e.
    /// the extra interface force that would close the gap.
    Force,
}

/// First guess for the inverse Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum BroydenInit {
    /// Perturb each command coordinate once and invert the measured
    /// finite-difference Jacobian. Honest but costs one settled measurement
    /// per coordinate.
    Probe { size_volts: f64 },
    /// Skip probing and start from `gain · I` (volts per millimetre of
    /// residual); the secant updates take it from there.
    ScaledIdentity { gain: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BroydenConfig {
    pub init: BroydenInit,
    /// Fraction of the full quasi-Newton step to take; halved on residual
    /// increases, restored on improvement.
    pub damping: f64,
}

impl Default for BroydenConfig {
    fn default() -> Self {
        BroydenConfig {
            init: BroydenInit::Probe { size_volts: 1.0 },
            damping: 1.0,
        }
    }
}

/// Frequency band of a sweep, Hz (user-facing edge; everything internal
/// runs in kHz).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FreqRange {
    pub start_hz: f64,
    pub end_hz: f64,
    pub step_hz: f64,
}

impl Default for FreqRange {
    fn default() -> Self {
        FreqRange {
            start_hz: 16.0,
            end_hz: 19.0,
            step_hz: 0.25,
        }
    }
}

impl FreqRange {
    pub fn validate(&self) -> Result<()> {
        let ok = self.start_hz > 0.0 && self.end_hz >= self.start_hz && self.step_hz > 0.0;
        if !ok {
            return Err(HybridError::Config(format!(
                "bad frequency range {} .. {} step {}",
                self.start_hz, self.end_hz, self.step_hz
            )));
        }
        Ok(())
    }

    /// Ascending grid from start to end inclusive (within rounding).
    pub fn grid_hz(&self) -> Vec<f64> {
        let n = ((self.end_hz - self.start_hz) / self.step_hz + 1.0e-9).floor() as usize;
        (0..=n)
            .map(|i| self.start_hz + i as f64 * self.step_hz)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CouplerConfig {
    pub freq_range: FreqRange,
    /// Periods per measurement block. Averaging over whole periods is what
    /// knocks incommensurate disturbances down.
    pub n_periods: usize,
    /// Residual-norm settling band between consecutive blocks, mm. A block
    /// counts only once the transient has rung down below this.
    pub transient_tol: f64,
    /// Convergence threshold on the motion-mismatch norm, mm. Must not be
    /// tighter than `transient_tol`: the loop cannot resolve what the
    /// transient check cannot see.
    pub convergence_tol: f64,
    /// Command updates allowed per frequency point before giving up.
    pub max_iter: usize,
    /// Measurement blocks allowed per settling wait.
    pub max_steady_blocks: usize,
    /// Harmonics carried by the loop.
    pub n_h: usize,
    /// Phase lead applied to measured forces to undo the acquisition
    /// chain's lag, rad. Set to zero when driving a rig without that chain.
    pub compensation_angle: f64,
    /// External first-harmonic force on the simulated side's interface
    /// node, kN.
    pub forcing: f64,
    /// Cold-start first-harmonic voltage on the translation shaker, V.
    pub v_init: f64,
    pub residual_form: ResidualForm,
    pub broyden: BroydenConfig,
}

impl Default for CouplerConfig {
    fn default() -> Self {
        CouplerConfig {
            freq_range: FreqRange::default(),
            n_periods: 30,
            transient_tol: 0.013,
            convergence_tol: 0.02,
            max_iter: 100,
            max_steady_blocks: 25,
            n_h: 1,
            compensation_angle: 0.06,
            forcing: 2.0e-4,
            v_init: 0.5,
            residual_form: ResidualForm::Displacement,
            broyden: BroydenConfig::default(),
        }
    }
}

impl CouplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.freq_range.validate()?;
        if self.n_periods == 0 {
            return Err(HybridError::Config("n_periods must be positive".into()));
        }
        if !(self.transient_tol > 0.0 && self.convergence_tol > 0.0) {
            return Err(HybridError::Config("tolerances must be positive".into()));
        }
        if self.convergence_tol < self.transient_tol {
            return Err(HybridError::Config(
                "convergence_tol below transient_tol would chase noise the \
                 settling check cannot resolve"
                    .into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(HybridError::Config("max_iter must be positive".into()));
        }
        if self.max_steady_blocks < 2 {
            return Err(HybridError::Config(
                "settling needs at least two blocks to compare".into(),
            ));
        }
        if self.n_h == 0 {
            return Err(HybridError::Config(
                "the loop needs at least the fundamental".into(),
            ));
        }
        if self.forcing <= 0.0 {
            return Err(HybridError::Config("forcing must be positive".into()));
        }
        if self.v_init < 0.0 {
            return Err(HybridError::Config(
                "initial voltage must be non-negative".into(),
            ));
        }
        if !(self.broyden.damping > 0.0 && self.broyden.damping <= 1.0) {
            return Err(HybridError::Config("damping must be in (0, 1]".into()));
        }
        if let BroydenInit::Probe { size_volts } = self.broyden.init {
            if size_volts <= 0.0 {
                return Err(HybridError::Config("probe size must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Outcome of one frequency point of a hybrid test.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    /// Snapped drive frequency, Hz.
    pub freq_hz: f64,
    /// Snapped fundamental, rad/ms.
    pub omega: f64,
    /// Final shaker command (2 channels: translation, rotation shaker), V.
    pub v: HarmonicVector,
    /// Measured interface motion (deflection mm, rotation rad).
    pub u_p: HarmonicVector,
    /// Measured interface resultants after phase compensation (shear kN,
    /// moment kN·mm).
    pub f_p: HarmonicVector,
    /// Simulated-side interface motion under the measured load.
    pub u_n: HarmonicVector,
    /// Interface resultants implied by the simulated side's balance.
    pub f_n: HarmonicVector,
    /// Motion-mismatch norm at the final iterate, mm.
    pub residual_norm: f64,
    /// Command updates spent (initial probing excluded).
    pub iterations: usize,
    pub converged: bool,
    /// Cross-split comparison per channel: shear, moment, deflection,
    /// rotation.
    pub sync: Vec<ChannelSync>,
}

/// One settled measurement at a fixed command.
struct Settled {
    u_p: HarmonicVector,
    f_p: HarmonicVector,
    r: HarmonicVector,
    r_flat: DVector<f64>,
    norm: f64,
}

/// The coupling loop itself: drives a [`Rig`] against an [`NsInterface`].
pub struct Coupler<'a> {
    ns: &'a dyn NsInterface,
    cfg: CouplerConfig,
}

impl<'a> Coupler<'a> {
    pub fn new(ns: &'a dyn NsInterface, cfg: CouplerConfig) -> Result<Coupler<'a>> {
        cfg.validate()?;
        Ok(Coupler { ns, cfg })
    }

    pub fn config(&self) -> &CouplerConfig {
        &self.cfg
    }

    /// Flattened-command dimension: two shakers, `n_h` harmonics, real and
    /// imaginary parts.
    fn dim(&self) -> usize {
        4 * self.cfg.n_h
    }

    fn command(&self, v: &HarmonicVector) -> VoltageCommand {
        let coeffs = [0, 1].map(|ch| {
            let mut c = Vec::with_capacity(self.cfg.n_h + 1);
            c.push(Complex64::new(v.dc[ch], 0.0));
            c.extend_from_slice(&v.ac[ch]);
            c
        });
        VoltageCommand {
            omega: v.omega,
            coeffs,
        }
    }

    /// Scale factors that put the motion channels in millimetres: the
    /// rotation channel is multiplied by the laser separation, turning
    /// radians into the relative displacement the lasers actually see.
    fn motion_scales(&self, rig: &Rig) -> [f64; 2] {
        [1.0, rig.config().sensors.laser_separation]
    }

    /// Measure one block of `n_periods` at the given command and extract
    /// displacements, forces, and the coupling residual from it.
    fn measure_block(&self, rig: &mut Rig, cmd: &VoltageCommand) -> Result<Settled> {
        let s = rig.config().sensors;
        let scales = self.motion_scales(rig);
        let thetas = vec![self.cfg.compensation_angle; self.cfg.n_h];
        let win = rig.measure_window(cmd, self.cfg.n_periods)?;
        let n = win.raw.len();
        let mut streams = [0; 4].map(|_| Vec::with_capacity(n));
        for fr in &win.raw {
            let (u, phi) = reconstruct_displacement(fr.l1, fr.l2, s.laser_separation);
            let (t, m) = reconstruct_forces(
                fr.eps1,
                fr.eps2,
                s.gauge_pos.0,
                s.gauge_pos.1,
                s.strain_to_moment,
            );
            streams[0].push(u);
            streams[1].push(phi);
            streams[2].push(t);
            streams[3].push(m);
        }
        let refs: Vec<&[f64]> = streams.iter().map(Vec::as_slice).collect();
        let all = extract_harmonics(&refs, win.raw[0].t, rig.dt(), win.omega, self.cfg.n_h)?;
        let mut u_p = HarmonicVector::zeros(win.omega, 2, self.cfg.n_h);
        let mut f_p = HarmonicVector::zeros(win.omega, 2, self.cfg.n_h);
        for ch in 0..2 {
            u_p.dc[ch] = all.dc[ch];
            u_p.ac[ch].clone_from(&all.ac[ch]);
            f_p.dc[ch] = all.dc[ch + 2];
            f_p.ac[ch].clone_from(&all.ac[ch + 2]);
        }
        let f_p = compensate_phase(&f_p, &thetas)?;
        let r = residual(&u_p, &f_p, self.ns)?;
        let norm = r.scaled_norm(&scales);
        let r_flat = match self.cfg.residual_form {
            ResidualForm::Displacement => r.flat_ac_scaled(&scales),
            ResidualForm::Force => {
                let mut rf = HarmonicVector::zeros(win.omega, 2, self.cfg.n_h);
                for k in 1..=self.cfg.n_h {
                    let d = self.ns.dynamic_stiffness(win.omega, k)?;
                    let f = d * Vector2::new(r.get(0, k), r.get(1, k));
                    rf.set_ac(0, k, f[0]);
                    rf.set_ac(1, k, f[1]);
                }
                rf.flat_ac()
            }
        };
        Ok(Settled {
            u_p,
            f_p,
            r,
            r_flat,
            norm,
        })
    }

    /// Drive `v` until the residual norm settles, then report the settled
    /// harmonics and residual. The rig keeps its state: transients from the
    /// command change ring down during the first blocks.
    fn settle(&self, rig: &mut Rig, v: &HarmonicVector) -> Result<Settled> {
        let cmd = self.command(v);
        let mut history = Vec::new();
        let mut last = None;
        while history.len() < self.cfg.max_steady_blocks {
            let block = self.measure_block(rig, &cmd)?;
            history.push(block.norm);
            last = Some(block);
            if steady_check(&history, self.cfg.transient_tol) {
                break;
            }
        }
        Ok(last.expect("at least one block was measured"))
    }

    /// Probe each command coordinate around `v` and invert the measured
    /// Jacobian. Returns the state anchored at the base pair.
    fn probe_init(
        &self,
        rig: &mut Rig,
        v: &HarmonicVector,
        base: &Settled,
        size: f64,
    ) -> Result<BroydenState> {
        let dim = self.dim();
        let v_flat = v.flat_ac();
        let mut jac = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            let mut v_probe = v.clone();
            let mut flat = v_flat.clone();
            flat[i] += size;
            v_probe.set_flat_ac(&flat);
            let probed = self.settle(rig, &v_probe)?;
            let col = (&probed.r_flat - &base.r_flat) / size;
            jac.set_column(i, &col);
        }
        let b = jac.lu().try_inverse().ok_or_else(|| {
            HybridError::NumericalFailure(
                "probed Jacobian is singular; the shakers do not reach all \
                 residual directions"
                    .into(),
            )
        })?;
        let mut state = BroydenState::new(b, self.cfg.broyden.damping)?;
        state.observe(&v_flat, &base.r_flat);
        Ok(state)
    }

    /// Run the loop at one frequency (kHz). `v0` warm-starts the command
    /// and `warm` the quasi-Newton state, both usually from the previous
    /// sweep point. Not converging within the budget is an outcome, not an
    /// error: the record says so and carries the best iterate.
    pub fn solve_point(
        &self,
        rig: &mut Rig,
        freq_khz: f64,
        v0: Option<&HarmonicVector>,
        warm: Option<BroydenState>,
    ) -> Result<(SweepRecord, BroydenState)> {
        if freq_khz <= 0.0 {
            return Err(HybridError::InvalidArgument(
                "drive frequency must be positive".into(),
            ));
        }
        let (omega, _) = crate::rig::snap_omega(2.0 * PI * freq_khz, rig.dt());
        let dim = self.dim();

        let mut v = match v0 {
            Some(given) => {
                if given.n_channels() != 2 || given.n_harmonics() != self.cfg.n_h {
                    return Err(HybridError::InvalidArgument(
                        "warm-start command must have 2 channels and match n_h".into(),
                    ));
                }
                let mut v = given.clone();
                v.omega = omega;
                v
            }
            None => {
                let mut v = HarmonicVector::zeros(omega, 2, self.cfg.n_h);
                v.set_ac(0, 1, Complex64::new(self.cfg.v_init, 0.0));
                v
            }
        };

        let mut best = self.settle(rig, &v)?;
        let mut broyden = match warm {
            Some(state) => {
                if state.dim() != dim {
                    return Err(HybridError::InvalidArgument(format!(
                        "warm quasi-Newton state has dimension {}, need {dim}",
                        state.dim()
                    )));
                }
                let mut state = state;
                state.observe(&v.flat_ac(), &best.r_flat);
                state
            }
            None => match self.cfg.broyden.init {
                BroydenInit::Probe { size_volts } => {
                    self.probe_init(rig, &v, &best, size_volts)?
                }
                BroydenInit::ScaledIdentity { gain } => {
                    let mut state =
                        BroydenState::identity_scaled(dim, gain, self.cfg.broyden.damping)?;
                    state.observe(&v.flat_ac(), &best.r_flat);
                    state
                }
            },
        };

        let mut best_v = v.clone();
        let mut halvings = 0u32;
        let mut iterations = 0usize;
        // A small residual alone cannot certify the answer: near a
        // resonance of the coupled structure the map from residual to
        // solution error is badly conditioned, and a warm-started command
        // can sit below tolerance while the true response is far away.
        // Convergence therefore also demands that the solution stop
        // moving. Three measured quantities guard that, all in motion
        // units: the shift between consecutively accepted anchors, the
        // predicted remaining motion gamma·|B·r| (gamma is the observed
        // motion per volt of command change), and, as an escape once noise
        // stops the residual from improving, a stall detector.
        let scales = self.motion_scales(rig);
        let tol = self.cfg.convergence_tol;
        let mut anchor_shift = f64::INFINITY;
        let mut gamma: Option<f64> = None;
        let mut reprobes = 0u32;
        let mut floor_probes = 0u32;
        // measurement-noise scale of one residual extraction, learned from
        // floor probes; the polish target cannot sit below it
        let mut noise_est: Option<f64> = None;
        let trace = std::env::var("CAL_TRACE").is_ok();
        // residual norms at the last few accepted anchors; no net progress
        // across the window means the loop is bouncing on a floor
        let mut recent: VecDeque<f64> = VecDeque::new();
        loop {
            let stalled = recent.len() >= 4 && best.norm > 0.7 * recent[recent.len() - 4];
            if trace {
                eprintln!(
                    "TRACE it={iterations} res={:.3e} anchor={:.3e} stalled={stalled} fp={floor_probes} rp={reprobes} recent={recent:?}",
                    best.norm, anchor_shift
                );
            }
            if iterations >= 1 && best.norm < tol && anchor_shift < tol {
                // predicted remaining motion if the next step were taken
                let predicted = match gamma {
                    Some(g) => g * (broyden.inverse_jacobian() * &best.r_flat).norm(),
                    None => f64::INFINITY,
                };
                // the residual is polished once it sits well inside the
                // tolerance or within a few widths of the measured noise
                // floor, whichever is coarser. The polish guards the
                // interface forces: near a resonance the stiffness of the
                // modelled side amplifies leftover residual into a visible
                // force mismatch even though the motion error is fine.
                let polish = noise_est.map_or(0.03 * tol, |nu| (3.0 * nu).max(0.03 * tol));
                if trace {
                    eprintln!("TRACE   pred={predicted:.3e} polish={polish:.3e}");
                }
                if predicted < 0.3 * tol && best.norm < polish {
                    break;
                }
            }
            if stalled && best.norm < tol {
                // no net progress across the window while the certificate
                // is still open; decide whether this is the measurement
                // noise floor or a premature stall by re-measuring a fresh
                // block at the same command and comparing the parked
                // residual to the draw-to-draw scatter
                if floor_probes < 3 {
                    floor_probes += 1;
                    let extra = self.measure_block(rig, &self.command(&best_v))?;
                    let nu = (&extra.r - &best.r).scaled_norm(&scales) / std::f64::consts::SQRT_2;
                    noise_est = Some(noise_est.map_or(nu, |old: f64| old.max(nu)));
                    if trace {
                        eprintln!("TRACE   floor probe noise={nu:.3e}");
                    }
                    if best.norm <= 3.0 * nu {
                        break;
                    }
                    // premature: the local model is crawling, so rebuild it
                    // from a fresh probe before iterating further
                    if matches!(self.cfg.broyden.init, BroydenInit::Probe { .. }) && reprobes < 3
                    {
                        reprobes += 1;
                        let size = match self.cfg.broyden.init {
                            BroydenInit::Probe { size_volts } => size_volts,
                            BroydenInit::ScaledIdentity { .. } => unreachable!(),
                        };
                        broyden = self.probe_init(rig, &best_v, &best, size)?;
                    }
                    recent.clear();
                    continue;
                }
                // repeated stalls above the measured floor: stop with the
                // freshest model's answer rather than loop forever
                break;
            }
            if iterations >= self.cfg.max_iter {
                break;
            }
            let mut next = broyden.propose(&best_v.flat_ac(), &best.r_flat);
            // trust region in motion units: a noisy residual component
            // along a weak direction of the local model proposes wild
            // voltage jumps, so bound the predicted motion of any step by
            // the scale of the residual it is correcting
            if let Some(g) = gamma {
                let delta = &next - &best_v.flat_ac();
                let pm = g * delta.norm();
                let cap = (4.0 * best.norm).max(0.25 * tol);
                if pm > cap {
                    next = best_v.flat_ac() + delta * (cap / pm);
                }
            }
            v.set_flat_ac(&next);
            iterations += 1;
            let trial = self.settle(rig, &v)?;
            broyden.observe(&v.flat_ac(), &trial.r_flat);
            let dv = (v.flat_ac() - best_v.flat_ac()).norm();
            if dv > 1.0e-12 {
                let du = (&trial.u_p - &best.u_p).scaled_norm(&scales);
                gamma = Some(du / dv);
            }
            if trace {
                eprintln!(
                    "TRACE   trial={:.3e} dv={dv:.3e} gamma={gamma:?} halvings={halvings}",
                    trial.norm
                );
            }
            if trial.norm <= best.norm || halvings >= 3 {
                let forced = trial.norm > best.norm;
                anchor_shift = (&trial.u_p - &best.u_p).scaled_norm(&scales);
                best = trial;
                best_v = v.clone();
                halvings = 0;
                broyden.set_damping(self.cfg.broyden.damping);
                recent.push_back(best.norm);
                if recent.len() > 4 {
                    recent.pop_front();
                }
                if forced && best.norm >= tol {
                    // three straight increases while still far out: the
                    // local model went stale (typical when a sweep crosses
                    // a sharp resonance), so rebuild it from scratch at the
                    // new anchor. Below tolerance, forced accepts are noise
                    // bounces and the floor probe owns the diagnosis.
                    if let BroydenInit::Probe { size_volts } = self.cfg.broyden.init {
                        if reprobes < 3 {
                            reprobes += 1;
                            broyden = self.probe_init(rig, &best_v, &best, size_volts)?;
                            recent.clear();
                        }
                    }
                }
            } else {
                // retry from the same anchor with a shorter step
                halvings += 1;
                broyden.set_damping(broyden.damping() * 0.5);
            }
        }
        let converged = best.norm < tol && anchor_shift < tol;

        let u_n = &best.u_p - &best.r;
        let mut f_n = HarmonicVector::zeros(omega, 2, self.cfg.n_h);
        for k in 1..=self.cfg.n_h {
            let d = self.ns.dynamic_stiffness(omega, k)?;
            let u_k = Vector2::new(best.u_p.get(0, k), best.u_p.get(1, k));
            let f = self.ns.external_force(omega, k) - d * u_k;
            // back to section convention: nodal moment flips sign
            f_n.set_ac(0, k, f[0]);
            f_n.set_ac(1, k, -f[1]);
        }
        let sync = sync_metrics(&u_n, &f_n, &best.u_p, &best.f_p)?;

        let record = SweepRecord {
            freq_hz: omega / (2.0 * PI) * crate::KHZ_TO_HZ,
            omega,
            v: best_v,
            u_p: best.u_p,
            f_p: best.f_p,
            u_n,
            f_n,
            residual_norm: best.norm,
            iterations,
            converged,
            sync,
        };
        Ok((record, broyden))
    }

    /// Run the loop over an ascending frequency grid (Hz), warm-starting
    /// each point with the previous command and quasi-Newton state. The rig
    /// is never reset: the sweep is one continuous campaign. Points that
    /// fail to converge are recorded and the sweep moves on.
    pub fn sweep(&self, rig: &mut Rig, freqs_hz: &[f64]) -> Result<Vec<SweepRecord>> {
        if freqs_hz.is_empty() {
            return Err(HybridError::InvalidArgument("empty frequency grid".into()));
        }
        if freqs_hz.windows(2).any(|w| w[1] <= w[0]) || freqs_hz[0] <= 0.0 {
            return Err(HybridError::InvalidArgument(
                "frequency grid must be positive and strictly ascending".into(),
            ));
        }
        let mut records = Vec::with_capacity(freqs_hz.len());
        let mut v: Option<HarmonicVector> = None;
        let mut state: Option<BroydenState> = None;
        for &f_hz in freqs_hz {
            let (record, next_state) =
                self.solve_point(rig, f_hz / crate::KHZ_TO_HZ, v.as_ref(), state.take())?;
            v = Some(record.v.clone());
            state = Some(next_state);
            records.push(record);
        }
        Ok(records)
    }
}
