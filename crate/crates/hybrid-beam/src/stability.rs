//! Delay stability of the coupled interface pair.
//!
//! Feeding the tip side's interface force back with a loop delay τ turns the
//! coupled system into a neutral delay equation whose characteristic function
//! is `det(D_N(s) + D_P(s)·e^(-sτ))`. With a 2x2 interface this expands to a
//! quadratic in `x = e^(-sτ)`, which is how every routine here evaluates it.
//! The module finds characteristic roots in a complex box, traces them over
//! delay, and computes how much delay a given split tolerates before a root
//! below a chosen frequency cut-off goes unstable.
//!
//! Throughout, `alpha` is the root-side share of the span, strictly between
//! 0 and 1, snapped to the nearest interior mesh node. `s = delta + 2πi·f`
//! with `delta` in rad/ms and `f` in kHz.

use crate::beam::FEModel;
use crate::error::{HybridError, Result};
use crate::substructure::{condense, partition, Partition};
use nalgebra::Matrix2;
use num_complex::Complex64;
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

/// Residual acceptance: |C| below this times the box's median |C|.
pub const ROOT_TOL: f64 = 1.0e-9;
/// Duplicate radius in box-normalized (delta, 2πf) coordinates.
pub const DEDUP_RADIUS: f64 = 1.0e-4;
/// Default delay search ceiling for critical-delay queries, ms.
pub const DEFAULT_TAU_MAX: f64 = 10.0;
/// Default real-part ceiling when scanning for unstable descents, rad/ms.
pub const DEFAULT_DELTA_MAX: f64 = 4.0;

/// Evaluator for the delayed characteristic function at a fixed mesh.
///
/// Pair of condensed interface matrices, negative side then positive side.
type SidePair = (Matrix2<Complex64>, Matrix2<Complex64>);

/// Condensed interface matrices are cached per (s, interface node) because
/// scans revisit the same s for many delays.
pub struct DelayCharacteristic {
    model: FEModel,
    parts: RefCell<HashMap<usize, Rc<Partition>>>,
    poles: RefCell<HashMap<usize, Rc<Vec<Complex64>>>>,
    cache: RefCell<HashMap<(u64, u64, usize), SidePair>>,
}

const CACHE_CAP: usize = 150_000;

impl DelayCharacteristic {
    pub fn new(model: FEModel) -> Self {
        Self {
            model,
            parts: RefCell::new(HashMap::new()),
            poles: RefCell::new(HashMap::new()),
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &FEModel {
        &self.model
    }

    /// Interior mesh node closest to the requested span fraction.
    pub fn node_for_alpha(&self, alpha: f64) -> Result<usize> {
        if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
            return Err(HybridError::InvalidArgument(format!(
                "alpha {alpha} outside (0, 1)"
            )));
        }
        let node = (alpha * self.model.n_elements as f64).round() as usize;
        Ok(node.clamp(1, self.model.n_elements - 1))
    }

    pub fn partition_for(&self, alpha: f64) -> Result<Rc<Partition>> {
        let node = self.node_for_alpha(alpha)?;
        if let Some(p) = self.parts.borrow().get(&node) {
            return Ok(p.clone());
        }
        let p = Rc::new(partition(&self.model, node)?);
        self.parts.borrow_mut().insert(node, p.clone());
        Ok(p)
    }

    /// Condensed (root-side, tip-side) interface matrices at s.
    pub fn condensed_pair(
        &self,
        s: Complex64,
        alpha: f64,
    ) -> Result<(Matrix2<Complex64>, Matrix2<Complex64>)> {
        let node = self.node_for_alpha(alpha)?;
        let key = (s.re.to_bits(), s.im.to_bits(), node);
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(*hit);
        }
        let part = self.partition_for(alpha)?;
        let d_n = condense(&part.n_side, s)?.d;
        let d_p = condense(&part.p_side, s)?.d;
        let mut cache = self.cache.borrow_mut();
        if cache.len() >= CACHE_CAP {
            cache.clear();
        }
        cache.insert(key, (d_n, d_p));
        Ok((d_n, d_p))
    }

    /// Underdamped poles of the characteristic function for this split: the
    /// damped images of both sides' clamped-interface modes. The condensed
    /// matrices blow up there, so the root search corrects cell winding
    /// counts by the number of enclosed poles.
    pub fn poles_for(&self, alpha: f64) -> Result<Rc<Vec<Complex64>>> {
        let node = self.node_for_alpha(alpha)?;
        if let Some(p) = self.poles.borrow().get(&node) {
            return Ok(p.clone());
        }
        let part = self.partition_for(alpha)?;
        let (zm, zk) = (self.model.props.zeta_m, self.model.props.zeta_k);
        let mut poles = Vec::new();
        for sub in [&part.n_side, &part.p_side] {
            let nb = sub.n_bulk();
            if nb == 0 {
                continue;
            }
            let k_bb = sub.k.view((2, 2), (nb, nb)).into_owned();
            let m_bb = sub.m.view((2, 2), (nb, nb)).into_owned();
            let (omega2, _) = crate::beam::undamped_modes(&k_bb, &m_bb)?;
            for w2 in omega2 {
                // s² + (ζ_M + ζ_K ω²)s + ω² = 0; only underdamped pairs are
                // kept, overdamped ones land far outside any search box
                let c = zm + zk * w2;
                let disc = w2 - 0.25 * c * c;
                if disc > 0.0 {
                    poles.push(Complex64::new(-0.5 * c, disc.sqrt()));
                }
            }
        }
        let rc = Rc::new(poles);
        self.poles.borrow_mut().insert(node, rc.clone());
        Ok(rc)
    }

    /// Coefficients of the quadratic in x = e^(-sτ):
    /// p0 = det D_N, p2 = det D_P, p1 the mixed 2x2 expansion term.
    pub fn p_coefficients(&self, s: Complex64, alpha: f64) -> Result<(Complex64, Complex64, Complex64)> {
        let (dn, dp) = self.condensed_pair(s, alpha)?;
        let p0 = dn[(0, 0)] * dn[(1, 1)] - dn[(0, 1)] * dn[(1, 0)];
        let p2 = dp[(0, 0)] * dp[(1, 1)] - dp[(0, 1)] * dp[(1, 0)];
        let p1 = dn[(0, 0)] * dp[(1, 1)] + dn[(1, 1)] * dp[(0, 0)]
            - dn[(0, 1)] * dp[(1, 0)]
            - dn[(1, 0)] * dp[(0, 1)];
        Ok((p0, p1, p2))
    }

    pub fn value(&self, s: Complex64, alpha: f64, tau: f64) -> Result<Complex64> {
        if tau < 0.0 {
            return Err(HybridError::InvalidArgument(format!("negative delay {tau}")));
        }
        let (p0, p1, p2) = self.p_coefficients(s, alpha)?;
        let x = (-s * tau).exp();
        Ok(p0 + p1 * x + p2 * x * x)
    }
}

/// `det(D_N(s) + D_P(s)·e^(-sτ))` via the quadratic expansion.
pub fn characteristic_value(
    ctx: &DelayCharacteristic,
    s: Complex64,
    alpha: f64,
    tau: f64,
) -> Result<Complex64> {
    ctx.value(s, alpha, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootFamily {
    /// Continues to a mode of the undelayed coupled system as τ → 0.
    DelayFree,
    /// Escapes upward in frequency as τ → 0; exists only because of the delay.
    DelayBorn,
}

#[derive(Debug, Clone, Copy)]
pub struct Root {
    /// Real part of s, rad/ms. Negative means decaying.
    pub delta: f64,
    /// Im(s)/2π, kHz. Only the f ≥ 0 member of each conjugate pair is kept.
    pub f: f64,
    pub tau: f64,
    pub alpha: f64,
    pub family: RootFamily,
    /// |C(s)| / box scale at the accepted point.
    pub residual: f64,
}

impl Root {
    pub fn s(&self) -> Complex64 {
        Complex64::new(self.delta, 2.0 * PI * self.f)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SearchBox {
    /// (min, max) real part, rad/ms.
    pub delta: (f64, f64),
    /// (min, max) frequency, kHz. Must be non-negative.
    pub f: (f64, f64),
}

impl SearchBox {
    pub fn contains(&self, delta: f64, f: f64) -> bool {
        delta >= self.delta.0 && delta <= self.delta.1 && f >= self.f.0 && f <= self.f.1
    }

    fn validate(&self) -> Result<()> {
        // comparisons, not subtraction: this also rejects NaN bounds
        let ordered = self.delta.0 < self.delta.1 && self.f.0 < self.f.1 && self.f.0 >= 0.0;
        if !ordered {
            return Err(HybridError::InvalidArgument(
                "search box must have positive extent and f >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Default box used by the chart routines: ±4 rad/ms, 0-3 kHz.
pub fn default_box() -> SearchBox {
    SearchBox {
        delta: (-4.0, 4.0),
        f: (0.0, 3.0),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub n_delta: usize,
    pub n_f: usize,
    /// Subdivision levels below the initial grid before polishing starts.
    pub max_depth: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_delta: 24,
            n_f: 72,
            max_depth: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RootSearch {
    pub roots: Vec<Root>,
    /// Median |C| over the valid initial grid; residuals are relative to it.
    pub scale: f64,
    pub warnings: Vec<String>,
}

/// Phase turn of C along a straight segment from `a` (value `va`) to `b`
/// (value `vb`), halved recursively until every piece turns at most π/2 so
/// the total cannot alias. `hot` reports an unresolved piece: an evaluation
/// failure, a sample within rounding of zero, or the depth cap, any of which
/// means a root or pole is hugging the segment.
fn arg_walk(
    eval: &dyn Fn(Complex64) -> Option<Complex64>,
    near_zero: f64,
    a: Complex64,
    va: Complex64,
    b: Complex64,
    vb: Complex64,
    depth: u32,
) -> (f64, bool) {
    if va.norm() < near_zero || vb.norm() < near_zero {
        return (0.0, true);
    }
    let turn = (vb / va).arg();
    if turn.abs() <= std::f64::consts::FRAC_PI_2 {
        return (turn, false);
    }
    if depth == 0 {
        return (turn, true);
    }
    let m = 0.5 * (a + b);
    let Some(vm) = eval(m) else {
        return (turn, true);
    };
    let (t1, h1) = arg_walk(eval, near_zero, a, va, m, vm, depth - 1);
    let (t2, h2) = arg_walk(eval, near_zero, m, vm, b, vb, depth - 1);
    (t1 + t2, h1 || h2)
}

/// All characteristic roots inside `sbox` at one delay.
///
/// Each cell of an initial grid is tested by the argument principle: the
/// phase turn of C around the cell boundary, sampled adaptively so no piece
/// turns more than π/2, counts enclosed zeros minus enclosed poles. The
/// poles are known in advance (damped clamped-interface modes of the two
/// sides), so the count is corrected and a cell holding a zero is never
/// masked by a pole sharing it. Cells with a nonzero corrected count are
/// subdivided, then polished by damped Newton (the function is analytic, so
/// one finite difference gives the complex derivative). Cells touching a
/// condensation failure are skipped and recorded as warnings.
pub fn find_roots(
    ctx: &DelayCharacteristic,
    alpha: f64,
    tau: f64,
    sbox: &SearchBox,
    grid: &GridSpec,
) -> Result<RootSearch> {
    sbox.validate()?;
    if grid.n_delta < 4 || grid.n_f < 4 {
        return Err(HybridError::InvalidArgument(
            "grid needs at least 4 cells per axis".into(),
        ));
    }

    let nd = grid.n_delta;
    let nf = grid.n_f;
    let dd = (sbox.delta.1 - sbox.delta.0) / nd as f64;
    let df = (sbox.f.1 - sbox.f.0) / nf as f64;

    let mut warnings = Vec::new();
    let n_skipped = std::cell::Cell::new(0usize);
    let eval = |s: Complex64| -> Option<Complex64> {
        match ctx.value(s, alpha, tau) {
            Ok(v) => Some(v),
            Err(_) => {
                n_skipped.set(n_skipped.get() + 1);
                None
            }
        }
    };
    let at = |d: f64, f: f64| Complex64::new(d, 2.0 * PI * f);
    let d_of = |i: usize| sbox.delta.0 + i as f64 * dd;
    let f_of = |j: usize| sbox.f.0 + j as f64 * df;

    let mut corners = vec![vec![None; nf + 1]; nd + 1];
    let mut mags = Vec::with_capacity((nd + 1) * (nf + 1));
    for (i, row) in corners.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let v = eval(at(d_of(i), f_of(j)));
            if let Some(v) = v {
                mags.push(v.norm());
            }
            *cell = v;
        }
    }
    if mags.is_empty() {
        return Err(HybridError::NumericalFailure(
            "every grid point sat on a condensation pole".into(),
        ));
    }
    mags.sort_by(|a, b| a.total_cmp(b));
    let scale = mags[mags.len() / 2].max(f64::MIN_POSITIVE);
    let near_zero = 1.0e-11 * scale;

    let poles = ctx.poles_for(alpha)?;
    let poles_in = |d0: f64, f0: f64, w: f64, h: f64| -> i64 {
        poles
            .iter()
            .filter(|p| {
                let (pd, pf) = (p.re, p.im / (2.0 * PI));
                pd >= d0 && pd < d0 + w && pf >= f0 && pf < f0 + h
            })
            .count() as i64
    };

    // phase turn along a segment: one forced midpoint, then adaptive halving
    let walk = |a: Complex64, va: Complex64, b: Complex64, vb: Complex64| -> (f64, bool) {
        let m = 0.5 * (a + b);
        match eval(m) {
            Some(vm) if vm.norm() >= near_zero => {
                let (t1, h1) = arg_walk(&eval, near_zero, a, va, m, vm, 12);
                let (t2, h2) = arg_walk(&eval, near_zero, m, vm, b, vb, 12);
                (t1 + t2, h1 || h2)
            }
            _ => (0.0, true),
        }
    };

    // directed turns along grid edges, shared by the cells on either side
    let mut hwalk = vec![vec![None; nf + 1]; nd];
    let mut vwalk = vec![vec![None; nf]; nd + 1];
    for i in 0..nd {
        for j in 0..=nf {
            if let (Some(va), Some(vb)) = (corners[i][j], corners[i + 1][j]) {
                hwalk[i][j] = Some(walk(at(d_of(i), f_of(j)), va, at(d_of(i + 1), f_of(j)), vb));
            }
        }
    }
    for i in 0..=nd {
        for j in 0..nf {
            if let (Some(va), Some(vb)) = (corners[i][j], corners[i][j + 1]) {
                vwalk[i][j] = Some(walk(at(d_of(i), f_of(j)), va, at(d_of(i), f_of(j + 1)), vb));
            }
        }
    }

    // (delta_lo, f_lo, width, height, depth, corner values [v00 v10 v01 v11])
    let mut stack: Vec<(f64, f64, f64, f64, usize, [Complex64; 4])> = Vec::new();
    for i in 0..nd {
        for j in 0..nf {
            let (Some(bottom), Some(right), Some(top), Some(left)) =
                (hwalk[i][j], vwalk[i + 1][j], hwalk[i][j + 1], vwalk[i][j])
            else {
                continue;
            };
            let hot = bottom.1 || right.1 || top.1 || left.1;
            let turn = bottom.0 + right.0 - top.0 - left.0;
            let wind = (turn / (2.0 * PI)).round() as i64 + poles_in(d_of(i), f_of(j), dd, df);
            if wind != 0 || hot {
                let q = [
                    corners[i][j].unwrap(),
                    corners[i + 1][j].unwrap(),
                    corners[i][j + 1].unwrap(),
                    corners[i + 1][j + 1].unwrap(),
                ];
                stack.push((d_of(i), f_of(j), dd, df, 0, q));
            }
        }
    }

    let max_extra = 4usize;
    let mut candidates: Vec<(Complex64, f64)> = Vec::new();
    while let Some((d0, f0, w, h, depth, q)) = stack.pop() {
        if depth >= grid.max_depth {
            if let Some(hit) = newton(ctx, alpha, tau, at(d0 + 0.5 * w, f0 + 0.5 * h), scale) {
                candidates.push(hit);
                continue;
            }
            if depth >= grid.max_depth + max_extra {
                warnings.push(format!(
                    "unresolved winding near delta {:.4}, f {:.5}",
                    d0 + 0.5 * w,
                    f0 + 0.5 * h
                ));
                continue;
            }
        }
        let (hw, hh) = (0.5 * w, 0.5 * h);
        let stencil = [
            (d0 + hw, f0),
            (d0, f0 + hh),
            (d0 + w, f0 + hh),
            (d0 + hw, f0 + h),
            (d0 + hw, f0 + hh),
        ]
        .map(|(d, f)| eval(at(d, f)));
        let [Some(vbm), Some(vlm), Some(vrm), Some(vtm), Some(vc)] = stencil else {
            warnings.push(format!(
                "condensation failed inside cell at delta {:.4}, f {:.5}",
                d0 + 0.5 * w,
                f0 + 0.5 * h
            ));
            continue;
        };
        let [v00, v10, v01, v11] = q;
        let subs = [
            (d0, f0, [v00, vbm, vlm, vc]),
            (d0 + hw, f0, [vbm, v10, vc, vrm]),
            (d0, f0 + hh, [vlm, vc, v01, vtm]),
            (d0 + hw, f0 + hh, [vc, vrm, vtm, v11]),
        ];
        for (sd, sf, sq) in subs {
            let bottom = walk(at(sd, sf), sq[0], at(sd + hw, sf), sq[1]);
            let right = walk(at(sd + hw, sf), sq[1], at(sd + hw, sf + hh), sq[3]);
            let top = walk(at(sd, sf + hh), sq[2], at(sd + hw, sf + hh), sq[3]);
            let left = walk(at(sd, sf), sq[0], at(sd, sf + hh), sq[2]);
            let hot = bottom.1 || right.1 || top.1 || left.1;
            let turn = bottom.0 + right.0 - top.0 - left.0;
            let wind = (turn / (2.0 * PI)).round() as i64 + poles_in(sd, sf, hw, hh);
            if wind != 0 || hot {
                stack.push((sd, sf, hw, hh, depth + 1, sq));
            }
        }
    }
    if n_skipped.get() > 0 {
        warnings.push(format!(
            "{} evaluations near condensation poles were excluded",
            n_skipped.get()
        ));
    }

    let mut roots: Vec<Root> = Vec::new();
    let span_d = sbox.delta.1 - sbox.delta.0;
    let span_w = 2.0 * PI * (sbox.f.1 - sbox.f.0);
    for (s, res) in candidates {
        let (delta, f) = (s.re, s.im / (2.0 * PI));
        if !sbox.contains(delta, f) {
            continue;
        }
        let dup = roots.iter().position(|r| {
            let dn = (r.delta - delta) / span_d;
            let wn = 2.0 * PI * (r.f - f) / span_w;
            (dn * dn + wn * wn).sqrt() < DEDUP_RADIUS
        });
        match dup {
            Some(i) if roots[i].residual <= res => {}
            Some(i) => {
                roots[i].delta = delta;
                roots[i].f = f;
                roots[i].residual = res;
            }
            None => roots.push(Root {
                delta,
                f,
                tau,
                alpha,
                family: RootFamily::DelayFree,
                residual: res,
            }),
        }
    }

    for root in &mut roots {
        root.family = classify_family(ctx, alpha, root.s(), tau, sbox, scale);
    }
    roots.sort_by(|a, b| a.f.total_cmp(&b.f).then(a.delta.total_cmp(&b.delta)));
    Ok(RootSearch {
        roots,
        scale,
        warnings,
    })
}

/// Damped Newton polish on the analytic characteristic function.
fn newton(
    ctx: &DelayCharacteristic,
    alpha: f64,
    tau: f64,
    mut s: Complex64,
    scale: f64,
) -> Option<(Complex64, f64)> {
    let mut v = ctx.value(s, alpha, tau).ok()?;
    for _ in 0..50 {
        if v.norm() / scale < ROOT_TOL {
            return Some((s, v.norm() / scale));
        }
        let h = 1.0e-6 * (1.0 + s.norm());
        let vp = ctx.value(s + Complex64::new(h, 0.0), alpha, tau).ok()?;
        let vm = ctx.value(s - Complex64::new(h, 0.0), alpha, tau).ok()?;
        let dv = (vp - vm) / (2.0 * h);
        if dv.norm() == 0.0 {
            return None;
        }
        let full = v / dv;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let s_try = s - full * lambda;
            if let Ok(v_try) = ctx.value(s_try, alpha, tau) {
                if v_try.norm() < v.norm() {
                    s = s_try;
                    v = v_try;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    if v.norm() / scale < ROOT_TOL {
        Some((s, v.norm() / scale))
    } else {
        None
    }
}

/// Tangent of a root path s(τ) from implicit differentiation of the
/// characteristic. The delay enters only through x = e^(-sτ), so the τ
/// derivative is analytic; the s derivative is a central difference.
fn path_tangent(
    ctx: &DelayCharacteristic,
    alpha: f64,
    tau: f64,
    s: Complex64,
) -> Option<Complex64> {
    let (_, p1, p2) = ctx.p_coefficients(s, alpha).ok()?;
    let x = (-s * tau).exp();
    let dc_dtau = (p1 + 2.0 * p2 * x) * (-s * x);
    let h = 1.0e-6 * (1.0 + s.norm());
    let vp = ctx.value(s + Complex64::new(h, 0.0), alpha, tau).ok()?;
    let vm = ctx.value(s - Complex64::new(h, 0.0), alpha, tau).ok()?;
    let dc_ds = (vp - vm) / (2.0 * h);
    if dc_ds.norm() == 0.0 {
        return None;
    }
    Some(-dc_dtau / dc_ds)
}

enum WalkEnd {
    /// The escape predicate fired at this point.
    Escaped,
    /// Continuation stalled; last delay the root was still held at.
    Lost(f64),
}

/// Adaptive continuation of one root from t_from to t_to (either direction).
/// Tangent prediction keeps the acceptance window tight even where roots
/// move fast (chain roots sweep frequency like 1/τ), so a corrector landing
/// outside it has jumped to a different root and the step is retried
/// shorter. `escape` sees every accepted point and may end the walk early.
fn walk_tau(
    ctx: &DelayCharacteristic,
    alpha: f64,
    mut s: Complex64,
    t_from: f64,
    t_to: f64,
    scale: f64,
    escape: &mut dyn FnMut(Complex64) -> bool,
) -> std::result::Result<Complex64, WalkEnd> {
    let span = (t_to - t_from).abs();
    if span == 0.0 {
        return Ok(s);
    }
    let dir = (t_to - t_from).signum();
    let mut t = t_from;
    let mut step = span / 8.0;
    let min_step = span / 4096.0;
    loop {
        let t_next = if dir > 0.0 {
            (t + step).min(t_to)
        } else {
            (t - step).max(t_to)
        };
        let (pred, motion) = match path_tangent(ctx, alpha, t, s) {
            Some(slope) => {
                let hop = slope * (t_next - t);
                (s + hop, hop.norm())
            }
            None => (s, 0.0),
        };
        // keep hops short enough for the linearisation to stay honest
        if motion > 0.5 * (1.0 + s.norm()) && step > min_step {
            step *= 0.5;
            continue;
        }
        let radius = (2.0 * motion).max(0.01 * (1.0 + s.norm()));
        match newton(ctx, alpha, t_next, pred, scale) {
            Some((s_new, _)) if (s_new - pred).norm() <= radius => {
                s = s_new;
                t = t_next;
                if escape(s) {
                    return Err(WalkEnd::Escaped);
                }
                if t == t_to {
                    return Ok(s);
                }
                step = (step * 1.5).min(span / 8.0);
            }
            _ => {
                step *= 0.5;
                if step < min_step {
                    return Err(WalkEnd::Lost(t));
                }
            }
        }
    }
}

/// Walk a root backward in delay. Reaching τ = 0 means the root continues a
/// mode of the undelayed system; escaping in frequency or decay rate on the
/// way, or stalling outright, marks it as created by the delay.
fn classify_family(
    ctx: &DelayCharacteristic,
    alpha: f64,
    s0: Complex64,
    tau: f64,
    sbox: &SearchBox,
    scale: f64,
) -> RootFamily {
    if tau == 0.0 {
        return RootFamily::DelayFree;
    }
    let f_escape = 1.5 * sbox.f.1.max(1.0);
    let d_escape = 3.0 * sbox.delta.0.abs().max(sbox.delta.1.abs()).max(1.0);
    let mut escape =
        |p: Complex64| p.im / (2.0 * PI) > f_escape || p.re.abs() > d_escape;
    match walk_tau(ctx, alpha, s0, tau, 0.0, scale, &mut escape) {
        Ok(_) => RootFamily::DelayFree,
        Err(_) => RootFamily::DelayBorn,
    }
}

#[derive(Debug, Clone)]
pub struct LocusBranch {
    /// Ascending in τ.
    pub roots: Vec<Root>,
    pub family: RootFamily,
    /// Why tracking stopped before the end of the range, if it did.
    pub terminated: Option<String>,
}

/// Track every root found at the first delay across `tau_range` by
/// predictor-corrector continuation. When a track is lost, a fresh box
/// search runs at that delay; roots it finds that match no live track start
/// new branches (this is also when roots that entered the box surface).
pub fn root_locus(
    ctx: &DelayCharacteristic,
    alpha: f64,
    tau_range: &[f64],
    sbox: &SearchBox,
    grid: &GridSpec,
) -> Result<Vec<LocusBranch>> {
    if tau_range.len() < 2 || tau_range.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HybridError::InvalidArgument(
            "tau_range must be ascending with at least two points".into(),
        ));
    }
    let seed = find_roots(ctx, alpha, tau_range[0], sbox, grid)?;
    let scale = seed.scale;
    let mut branches: Vec<LocusBranch> = seed
        .roots
        .into_iter()
        .map(|r| LocusBranch {
            family: r.family,
            roots: vec![r],
            terminated: None,
        })
        .collect();

    for &tau in &tau_range[1..] {
        let mut lost_any = false;
        for branch in branches.iter_mut().filter(|b| b.terminated.is_none()) {
            let last = *branch.roots.last().expect("branch never empty");
            match walk_tau(ctx, alpha, last.s(), last.tau, tau, scale, &mut |_| false) {
                Ok(s) => {
                    let (delta, f) = (s.re, s.im / (2.0 * PI));
                    if !sbox.contains(delta, f) {
                        branch.terminated = Some(format!("left the box at tau = {tau}"));
                        lost_any = true;
                        continue;
                    }
                    let res = ctx
                        .value(s, alpha, tau)
                        .map(|v| v.norm() / scale)
                        .unwrap_or(f64::NAN);
                    branch.roots.push(Root {
                        delta,
                        f,
                        tau,
                        alpha,
                        family: branch.family,
                        residual: res,
                    });
                }
                Err(WalkEnd::Lost(at)) => {
                    branch.terminated = Some(format!("track lost near tau = {at:.3}"));
                    lost_any = true;
                }
                Err(WalkEnd::Escaped) => unreachable!("no escape predicate on locus walks"),
            }
        }
        if lost_any {
            let refresh = find_roots(ctx, alpha, tau, sbox, grid)?;
            for r in refresh.roots {
                let known = branches.iter().any(|b| {
                    b.roots
                        .last()
                        .map(|last| last.tau == tau && (last.s() - r.s()).norm() < 1.0e-3 * (1.0 + r.s().norm()))
                        .unwrap_or(false)
                });
                if !known {
                    branches.push(LocusBranch {
                        family: r.family,
                        roots: vec![r],
                        terminated: None,
                    });
                }
            }
        }
    }
    Ok(branches)
}

/// Outcome of a cut-off critical-delay query.
#[derive(Debug, Clone, Copy)]
pub enum CriticalDelay {
    /// Smallest delay at which a root with f ≤ f_cutoff stops decaying.
    Critical {
        tau: f64,
        freq_khz: f64,
        /// Real part of the root when it first counts: 0 when it crosses
        /// the imaginary axis below the cut-off, positive when an already
        /// unstable root descends through the cut-off frequency.
        delta: f64,
    },
    /// No such root up to the search ceiling.
    StableUpTo { tau_max: f64 },
}

impl CriticalDelay {
    pub fn tau(&self) -> Option<f64> {
        match self {
            CriticalDelay::Critical { tau, .. } => Some(*tau),
            CriticalDelay::StableUpTo { .. } => None,
        }
    }
}

/// Stable quadratic solve p2·x² + p1·x + p0 = 0. Degenerate leading
/// coefficients surface as non-finite roots, which scans skip.
fn quadratic_roots(p2: Complex64, p1: Complex64, p0: Complex64) -> [Complex64; 2] {
    let disc = (p1 * p1 - 4.0 * p2 * p0).sqrt();
    let r = if (p1 + disc).norm() >= (p1 - disc).norm() {
        disc
    } else {
        -disc
    };
    let q = -0.5 * (p1 + r);
    let x1 = q / p2;
    let x2 = if q.norm() > 0.0 {
        p0 / q
    } else {
        // p1 ≈ 0 and p0·p2 ≈ 0: fall back to the schoolbook form
        (-p1 - r) / (2.0 * p2)
    };
    [x1, x2]
}

/// Reorder `next` so each entry continues the matching entry of `prev`.
fn match_pair(prev: [Complex64; 2], next: [Complex64; 2]) -> [Complex64; 2] {
    let finite =
        |x: Complex64| x.re.is_finite() && x.im.is_finite();
    if !(finite(prev[0]) && finite(prev[1]) && finite(next[0]) && finite(next[1])) {
        return next;
    }
    let straight = (next[0] - prev[0]).norm() + (next[1] - prev[1]).norm();
    let swapped = (next[1] - prev[0]).norm() + (next[0] - prev[1]).norm();
    if swapped < straight {
        [next[1], next[0]]
    } else {
        next
    }
}

/// Smallest delay at which some characteristic root with frequency at or
/// below `f_cutoff` is no longer decaying, up to `tau_max`. Two entry faces
/// are scanned: roots crossing the imaginary axis below the cut-off, and
/// already-unstable roots (real part up to `delta_max`) descending through
/// the cut-off frequency.
pub fn critical_delay_in(
    ctx: &DelayCharacteristic,
    alpha: f64,
    f_cutoff: f64,
    tau_max: f64,
    delta_max: f64,
) -> Result<CriticalDelay> {
    // comparisons keep NaN arguments out as well
    let positive = f_cutoff > 0.0 && tau_max > 0.0 && delta_max > 0.0;
    if !positive {
        return Err(HybridError::InvalidArgument(
            "f_cutoff and search ceilings must be positive".into(),
        ));
    }
    let mut best: Option<(f64, f64, f64)> = None; // (tau, f, delta)
    let mut consider = |tau: f64, f: f64, delta: f64| {
        if tau >= 0.0 && tau <= tau_max && best.map(|(t, _, _)| tau < t).unwrap_or(true) {
            best = Some((tau, f, delta));
        }
    };

    axis_crossings(ctx, alpha, f_cutoff, tau_max, &mut |tau, f| consider(tau, f, 0.0))?;
    unstable_descents(ctx, alpha, f_cutoff, tau_max, delta_max, &mut |tau, delta| {
        consider(tau, f_cutoff, delta)
    })?;

    Ok(match best {
        Some((tau, freq_khz, delta)) => CriticalDelay::Critical {
            tau,
            freq_khz,
            delta,
        },
        None => CriticalDelay::StableUpTo { tau_max },
    })
}

pub fn critical_delay(ctx: &DelayCharacteristic, alpha: f64, f_cutoff: f64) -> Result<CriticalDelay> {
    critical_delay_in(ctx, alpha, f_cutoff, DEFAULT_TAU_MAX, DEFAULT_DELTA_MAX)
}

/// Scan f in (0, f_cutoff] for quadratic roots with |x| = 1. Each crossing
/// (f*, x*) yields the delay lattice τ = (arg-phase + 2πk)/ω*; every lattice
/// point is an exact imaginary-axis root, reported through `emit(tau, f*)`.
fn axis_crossings(
    ctx: &DelayCharacteristic,
    alpha: f64,
    f_cutoff: f64,
    tau_max: f64,
    emit: &mut dyn FnMut(f64, f64),
) -> Result<()> {
    let n = ((f_cutoff / 2.0e-4) as usize).clamp(500, 4000);
    let grid = |i: usize| f_cutoff * (i as f64) / (n as f64);

    let roots_at = |f: f64| -> Result<Option<[Complex64; 2]>> {
        let s = Complex64::new(0.0, 2.0 * PI * f);
        match ctx.p_coefficients(s, alpha) {
            Ok((p0, p1, p2)) => Ok(Some(quadratic_roots(p2, p1, p0))),
            Err(HybridError::NearPole { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let emit_lattice = |f: f64, x: Complex64, emit: &mut dyn FnMut(f64, f64)| {
        let omega = 2.0 * PI * f;
        let theta = (-x.arg()).rem_euclid(2.0 * PI);
        let mut k = 0.0;
        loop {
            let tau = (theta + 2.0 * PI * k) / omega;
            if tau > tau_max {
                break;
            }
            emit(tau, f);
            k += 1.0;
        }
    };

    let mut prev: Option<(f64, [Complex64; 2])> = None;
    for i in 1..=n {
        let f = grid(i);
        let Some(raw) = roots_at(f)? else {
            prev = None;
            continue;
        };
        let cur = match prev {
            Some((_, p)) => match_pair(p, raw),
            None => raw,
        };
        if let Some((f_prev, p)) = prev {
            for ch in 0..2 {
                let (m0, m1) = (p[ch].norm(), cur[ch].norm());
                if !(m0.is_finite() && m1.is_finite()) {
                    continue;
                }
                if (m0 - 1.0) == 0.0 {
                    emit_lattice(f_prev, p[ch], emit);
                    continue;
                }
                if (m0 - 1.0).signum() * (m1 - 1.0).signum() < 0.0 {
                    // bisect the modulus crossing, tracking the channel by
                    // nearness to the bracket endpoints
                    let (mut fa, mut xa) = (f_prev, p[ch]);
                    let (mut fb, mut xb) = (f, cur[ch]);
                    for _ in 0..80 {
                        let fm = 0.5 * (fa + fb);
                        let Some(rm) = roots_at(fm)? else { break };
                        let mid = 0.5 * (xa + xb);
                        let xm = if (rm[0] - mid).norm() <= (rm[1] - mid).norm() {
                            rm[0]
                        } else {
                            rm[1]
                        };
                        if ((xa.norm() - 1.0).signum() * (xm.norm() - 1.0).signum()) <= 0.0 {
                            fb = fm;
                            xb = xm;
                        } else {
                            fa = fm;
                            xa = xm;
                        }
                        if (fb - fa) < 1.0e-13 * f_cutoff {
                            break;
                        }
                    }
                    emit_lattice(0.5 * (fa + fb), 0.5 * (xa + xb), emit);
                }
            }
        }
        prev = Some((f, cur));
    }
    Ok(())
}

/// Scan delta in (0, delta_max] along the horizontal line f = f_cutoff for
/// roots passing through it while unstable. A root there requires
/// |x| = e^(-delta·τ) with matching phase; the scan unwraps the phase and
/// brackets integer-lattice crossings, emitting (τ, delta*).
fn unstable_descents(
    ctx: &DelayCharacteristic,
    alpha: f64,
    f_cutoff: f64,
    tau_max: f64,
    delta_max: f64,
    emit: &mut dyn FnMut(f64, f64),
) -> Result<()> {
    let omega = 2.0 * PI * f_cutoff;
    let n = 320usize;
    let grid = |i: usize| delta_max * (i as f64) / (n as f64);

    let roots_at = |delta: f64| -> Result<Option<[Complex64; 2]>> {
        let s = Complex64::new(delta, omega);
        match ctx.p_coefficients(s, alpha) {
            Ok((p0, p1, p2)) => Ok(Some(quadratic_roots(p2, p1, p0))),
            Err(HybridError::NearPole { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };

    // Per channel: continuity-tracked root, unwrapped phase of -arg(x), and
    // the lattice function g(delta) = omega·(-ln|x|/delta) - theta(delta);
    // a solution needs g = 2πk for some integer k ≥ 0.
    let mut prev: Option<(f64, [Complex64; 2], [f64; 2])> = None;
    for i in 1..=n {
        let delta = grid(i);
        let Some(raw) = roots_at(delta)? else {
            prev = None;
            continue;
        };
        let cur = match prev {
            Some((_, p, _)) => match_pair(p, raw),
            None => raw,
        };
        let theta: [f64; 2] = match prev {
            Some((_, p, th)) => {
                let mut out = [0.0; 2];
                for ch in 0..2 {
                    let dphi = (-cur[ch].arg()) - (-p[ch].arg());
                    let dphi = dphi - (dphi / (2.0 * PI)).round() * 2.0 * PI;
                    out[ch] = th[ch] + dphi;
                }
                out
            }
            None => [(-cur[0].arg()).rem_euclid(2.0 * PI), (-cur[1].arg()).rem_euclid(2.0 * PI)],
        };

        if let Some((d_prev, p, th_prev)) = prev {
            for ch in 0..2 {
                let valid = |x: Complex64, d: f64| {
                    x.re.is_finite() && x.im.is_finite() && x.norm() < 1.0 && d > 0.0
                };
                if !(valid(p[ch], d_prev) && valid(cur[ch], delta)) {
                    continue;
                }
                let g = |x: Complex64, d: f64, th: f64| omega * (-(x.norm().ln()) / d) - th;
                let (ga, gb) = (g(p[ch], d_prev, th_prev[ch]), g(cur[ch], delta, theta[ch]));
                let (klo, khi) = (
                    (ga.min(gb) / (2.0 * PI)).ceil().max(0.0) as i64,
                    (ga.max(gb) / (2.0 * PI)).floor() as i64,
                );
                for k in klo..=khi {
                    let level = 2.0 * PI * k as f64;
                    // bisect g(delta) = level
                    let (mut da, mut xa, mut tha, mut gaa) = (d_prev, p[ch], th_prev[ch], ga);
                    let (mut db, mut xb) = (delta, cur[ch]);
                    let mut gbb = gb;
                    for _ in 0..70 {
                        let dm = 0.5 * (da + db);
                        let Some(rm) = roots_at(dm)? else { break };
                        let mid = 0.5 * (xa + xb);
                        let xm = if (rm[0] - mid).norm() <= (rm[1] - mid).norm() {
                            rm[0]
                        } else {
                            rm[1]
                        };
                        // also bail on NaN, which a norm comparison hides
                        if xm.norm() >= 1.0 || xm.norm().is_nan() {
                            break;
                        }
                        let dphi = (-xm.arg()) - (-xa.arg());
                        let dphi = dphi - (dphi / (2.0 * PI)).round() * 2.0 * PI;
                        let thm = tha + dphi;
                        let gm = g(xm, dm, thm);
                        if (gaa - level).signum() * (gm - level).signum() <= 0.0 {
                            db = dm;
                            xb = xm;
                            gbb = gm;
                        } else {
                            da = dm;
                            xa = xm;
                            tha = thm;
                            gaa = gm;
                        }
                        if db - da < 1.0e-12 * delta_max {
                            break;
                        }
                    }
                    let _ = gbb;
                    let d_star = 0.5 * (da + db);
                    let x_star = 0.5 * (xa + xb);
                    if x_star.norm() < 1.0 {
                        let tau = -x_star.norm().ln() / d_star;
                        if tau <= tau_max {
                            emit(tau, d_star);
                        }
                    }
                }
            }
        }
        prev = Some((delta, cur, theta));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BoundaryPoint {
    pub alpha: f64,
    pub outcome: CriticalDelay,
}

#[derive(Debug, Clone)]
pub struct StabilityBoundary {
    pub points: Vec<BoundaryPoint>,
    pub warnings: Vec<String>,
}

/// Critical delay per alpha on a grid. Per-alpha failures are recorded and
/// the sweep continues; the region below each point's delay is stable for
/// that split under the cut-off.
pub fn stability_boundary(
    ctx: &DelayCharacteristic,
    f_cutoff: f64,
    alpha_grid: &[f64],
) -> Result<StabilityBoundary> {
    let mut points = Vec::with_capacity(alpha_grid.len());
    let mut warnings = Vec::new();
    for &alpha in alpha_grid {
        match critical_delay(ctx, alpha, f_cutoff) {
            Ok(outcome) => points.push(BoundaryPoint { alpha, outcome }),
            Err(e) => warnings.push(format!("alpha {alpha}: {e}")),
        }
    }
    if points.is_empty() {
        return Err(HybridError::NumericalFailure(
            "no boundary point could be computed".into(),
        ));
    }
    Ok(StabilityBoundary { points, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::{assemble, default_properties, natural_frequencies, BoundaryCondition};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn ctx() -> DelayCharacteristic {
        let model = assemble(&default_properties(), 53, BoundaryCondition::ClampedFree).unwrap();
        DelayCharacteristic::new(model)
    }

    #[test]
    fn quadratic_expansion_equals_direct_determinant() {
        // Oracle: assemble D_N + x·D_P and take its determinant directly.
        let ctx = ctx();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 1000 {
            let s = Complex64::new(rng.gen_range(-4.0..4.0), rng.gen_range(0.05..19.0));
            let alpha = rng.gen_range(0.08..0.92);
            let tau = rng.gen_range(0.0..3.0);
            let Ok((dn, dp)) = ctx.condensed_pair(s, alpha) else {
                continue;
            };
            let x = (-s * tau).exp();
            let direct = {
                let m = dn + dp * x;
                m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
            };
            let expanded = ctx.value(s, alpha, tau).unwrap();
            assert_relative_eq!(expanded.re, direct.re, max_relative = 1.0e-12, epsilon = 1.0e-12 * direct.norm());
            assert_relative_eq!(expanded.im, direct.im, max_relative = 1.0e-12, epsilon = 1.0e-12 * direct.norm());
            checked += 1;
        }
    }

    #[test]
    fn zero_delay_reduces_to_the_undelayed_determinant() {
        let ctx = ctx();
        let s = Complex64::new(-0.3, 2.0 * PI * 0.04);
        let (dn, dp) = ctx.condensed_pair(s, 0.5).unwrap();
        let m = dn + dp;
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let v = ctx.value(s, 0.5, 0.0).unwrap();
        assert_relative_eq!(v.re, det.re, max_relative = 1.0e-13);
        assert_relative_eq!(v.im, det.im, max_relative = 1.0e-13);
    }

    #[test]
    fn tip_heavy_split_is_dominated_by_the_tip_side() {
        // With the interface close to the clamp the tip side is nearly the
        // whole beam; the undelayed determinant must match a direct 2x2
        // determinant built from the condensations (independent assembly).
        let ctx = ctx();
        let s = Complex64::new(-0.1, 2.0 * PI * 0.02);
        let alpha = 0.04; // node 2 of 53
        let (dn, dp) = ctx.condensed_pair(s, alpha).unwrap();
        assert!(dn.norm() > 10.0 * dp.norm(), "near the clamp the root side is the stiff one");
        let m = dn + dp;
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let v = ctx.value(s, alpha, 0.0).unwrap();
        assert_relative_eq!(v.re, det.re, max_relative = 1.0e-12);
        assert_relative_eq!(v.im, det.im, max_relative = 1.0e-12);
    }

    #[test]
    fn zero_delay_roots_match_the_monolithic_modes() {
        let ctx = ctx();
        let sbox = default_box();
        let found = find_roots(&ctx, 0.5, 0.0, &sbox, &GridSpec::default()).unwrap();
        assert!(!found.roots.is_empty());
        for r in &found.roots {
            assert!(r.delta < 0.0, "zero-delay root at delta = {}", r.delta);
            assert!(r.residual < ROOT_TOL);
            assert_eq!(r.family, RootFamily::DelayFree);
            // conjugate partner is a root too
            let v = ctx.value(r.s().conj(), 0.5, 0.0).unwrap();
            assert!(v.norm() / found.scale < 1.0e-6, "conjugate residual {}", v.norm() / found.scale);
        }

        // Oracle: quadratic-pencil eigenvalues of the monolithic model.
        let model = assemble(&default_properties(), 53, BoundaryCondition::ClampedFree).unwrap();
        let modes = natural_frequencies(&model, 20).unwrap();
        let mut expected = Vec::new();
        for m in modes {
            let wd = 2.0 * PI * m.freq_hz / crate::KHZ_TO_HZ;
            let mag = wd / (1.0 - m.damping * m.damping).sqrt();
            let s = Complex64::new(-m.damping * mag, wd);
            if sbox.contains(s.re, s.im / (2.0 * PI)) {
                expected.push(s);
            }
        }
        assert!(expected.len() >= 10);
        for e in &expected {
            let nearest = found
                .roots
                .iter()
                .map(|r| (r.s() - e).norm() / e.norm())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 5.0e-3, "pencil mode at {e} missed by {nearest:.2e}");
        }
        assert_eq!(found.roots.len(), expected.len());
    }

    #[test]
    fn delayed_roots_go_unstable_and_drift_down() {
        let ctx = ctx();
        let sbox = default_box();
        let grid = GridSpec::default();
        let mut last: Option<(f64, f64)> = None;
        for tau in [1.2, 1.75, 2.3] {
            let found = find_roots(&ctx, 0.5, tau, &sbox, &grid).unwrap();
            let unstable: Vec<&Root> = found.roots.iter().filter(|r| r.delta > 0.0).collect();
            assert!(!unstable.is_empty(), "no unstable root at tau = {tau}");
            let lowest = unstable
                .iter()
                .min_by(|a, b| a.f.total_cmp(&b.f))
                .unwrap();
            assert_eq!(lowest.family, RootFamily::DelayBorn);
            if let Some((f_prev, d_prev)) = last {
                assert!(lowest.f < f_prev, "f should fall with tau");
                assert!(lowest.delta < d_prev, "delta should fall with tau");
            }
            last = Some((lowest.f, lowest.delta));
        }
    }

    #[test]
    fn located_roots_satisfy_the_characteristic_equation() {
        let ctx = ctx();
        let found = find_roots(&ctx, 0.35, 1.5, &default_box(), &GridSpec::default()).unwrap();
        assert!(!found.roots.is_empty());
        for r in &found.roots {
            let v = ctx.value(r.s(), 0.35, 1.5).unwrap();
            assert!(v.norm() / found.scale < ROOT_TOL);
            assert!(r.f >= 0.0);
        }
    }

    #[test]
    fn locus_follows_the_half_period_rule() {
        let ctx = ctx();
        let sbox = default_box();
        let grid = GridSpec::default();
        let tau_range: Vec<f64> = (0..=40).map(|i| 0.5 + i as f64 * 0.05).collect();
        let branches = root_locus(&ctx, 0.5, &tau_range, &sbox, &grid).unwrap();

        // the branch that is unstable with the lowest frequency at tau = 1
        let probe = |tau: f64, b: &LocusBranch| -> Option<Root> {
            b.roots
                .iter()
                .find(|r| (r.tau - tau).abs() < 1.0e-9)
                .copied()
        };
        let branch = branches
            .iter()
            .filter(|b| {
                probe(1.0, b)
                    .map(|r| r.delta > 0.0)
                    .unwrap_or(false)
            })
            .min_by(|a, b| {
                probe(1.0, a)
                    .unwrap()
                    .f
                    .total_cmp(&probe(1.0, b).unwrap().f)
            })
            .expect("an unstable branch exists at tau = 1");
        assert_eq!(branch.family, RootFamily::DelayBorn);

        for (tau, f_expect) in [(1.0, 0.5), (1.5, 1.0 / 3.0), (2.0, 0.25)] {
            let r = probe(tau, branch).expect("branch covers the checkpoint");
            assert!(
                (r.f - f_expect).abs() <= 0.15 * f_expect,
                "tau {tau}: f = {} vs {f_expect}",
                r.f
            );
        }
        for r in branch.roots.iter().filter(|r| r.delta > 0.0) {
            let p = r.f * r.tau;
            assert!(p > 0.4 && p < 0.6, "f·tau = {p} at tau = {}", r.tau);
        }

        // walking the branch backward raises its frequency (it escapes any
        // finite box as the delay shrinks)
        let early = branch.roots.first().unwrap();
        let late = probe(1.0, branch).unwrap();
        assert!(early.tau < late.tau && early.f > late.f);
    }

    #[test]
    fn critical_delays_track_the_inverse_of_the_cutoff() {
        let ctx = ctx();
        for (fc, expect) in [(0.5, 1.0), (1.0 / 3.0, 1.5), (0.25, 2.0)] {
            let out = critical_delay(&ctx, 0.5, fc).unwrap();
            let CriticalDelay::Critical { tau, freq_khz, .. } = out else {
                panic!("no critical delay below cutoff {fc}");
            };
            assert!(
                (tau - expect).abs() <= 0.15 * expect,
                "cutoff {fc}: tau = {tau} vs {expect}"
            );
            assert!(freq_khz <= fc + 1.0e-9);
        }
    }

    #[test]
    fn rule_of_thumb_products_hold_across_splits() {
        let ctx = ctx();
        for alpha in [0.2, 0.5, 0.8] {
            let out = critical_delay(&ctx, alpha, 0.5).unwrap();
            let CriticalDelay::Critical { tau, .. } = out else {
                panic!("no critical delay at alpha {alpha}");
            };
            let product = tau * 0.5;
            assert!(
                (0.42..=0.58).contains(&product),
                "alpha {alpha}: tau·fc = {product}"
            );
        }
    }

    #[test]
    fn axis_crossing_roots_sit_on_the_axis_after_polish() {
        let ctx = ctx();
        let out = critical_delay(&ctx, 0.5, 0.5).unwrap();
        let CriticalDelay::Critical { tau, freq_khz, delta } = out else {
            panic!("expected a crossing");
        };
        // polish in s at the reported delay; the real part must stay pinned
        let s0 = Complex64::new(delta, 2.0 * PI * freq_khz);
        let scale = {
            let (p0, p1, p2) = ctx.p_coefficients(s0, 0.5).unwrap();
            p0.norm() + p1.norm() + p2.norm()
        };
        let (s, _) = newton(&ctx, 0.5, tau, s0, scale).expect("newton holds the root");
        assert!((s.re - delta).abs() < 1.0e-8, "drift {:e}", (s.re - delta).abs());
    }

    #[test]
    fn boundary_is_flat_inside_and_symmetric_in_the_split() {
        let ctx = ctx();
        let grid: Vec<f64> = vec![0.04, 0.2, 0.35, 0.5, 0.65, 0.8, 0.96];
        let f_c = 0.5;
        let boundary = stability_boundary(&ctx, f_c, &grid).unwrap();
        assert!(boundary.warnings.is_empty());
        assert_eq!(boundary.points.len(), grid.len());

        // every split destabilises at the cut-off line, none is delay-proof
        let taus: Vec<f64> = boundary
            .points
            .iter()
            .map(|p| match p.outcome {
                CriticalDelay::Critical { tau, freq_khz, .. } => {
                    assert!((freq_khz - f_c).abs() < 1e-6, "crossing off the cut-off line");
                    tau
                }
                CriticalDelay::StableUpTo { .. } => panic!("no critical delay at alpha {}", p.alpha),
            })
            .collect();

        // swapping the two sides mirrors the split; the delay must not care
        for (l, r) in taus.iter().zip(taus.iter().rev()) {
            assert!((l - r).abs() < 1e-5 * l.abs(), "asymmetric boundary: {l} vs {r}");
        }

        let interior: Vec<f64> = boundary
            .points
            .iter()
            .filter(|p| p.alpha >= 0.2 && p.alpha <= 0.8)
            .map(|p| p.outcome.tau().expect("interior splits have finite critical delay"))
            .collect();
        let lo = interior.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = interior.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo < 1.1, "interior spread {lo}..{hi}");

        // extreme splits stay finite but sit above the plateau
        let edge = taus[0];
        let mid = taus[grid.len() / 2];
        assert!(edge > mid * 1.1 && edge < mid * 2.0, "edge {edge} vs plateau {mid}");
    }
}
