//! Partitioning the beam at a node and condensing each side onto the two
//! interface DOFs.
//!
//! The root-side sub-model keeps the clamp; the tip-side sub-model is held
//! only through the interface. Sub-model matrices are stored with the
//! interface DOFs first, bulk DOFs after, so the Schur complement
//! `D_ii - D_ib·D_bb⁻¹·D_bi` reads straight off the blocks. Interface DOF
//! order is (deflection, rotation) everywhere.

use crate::beam::{element_matrices, undamped_modes, FEModel};
use crate::error::{HybridError, Result};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use num_complex::Complex64;

/// Condition estimate above which a bulk solve is treated as sitting on a
/// clamped-interface resonance. 1e12 leaves two orders of magnitude of
/// headroom before f64 solves lose all digits.
pub const NEAR_POLE_COND: f64 = 1.0e12;

/// One side of the partition, interface DOFs first.
#[derive(Debug, Clone)]
pub struct SubModel {
    pub m: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Span covered by this side, mm.
    pub length: f64,
    /// Full-model free-DOF index for every local DOF (interface first).
    pub global_dofs: Vec<usize>,
}

impl SubModel {
    pub fn n_dofs(&self) -> usize {
        self.m.nrows()
    }

    pub fn n_bulk(&self) -> usize {
        self.n_dofs() - 2
    }
}

/// A beam split at one mesh node into a root-side (numerical) and a
/// tip-side (physical) sub-model sharing the interface DOF pair.
#[derive(Debug, Clone)]
pub struct Partition {
    pub iface_node: usize,
    /// Root-side span, mm.
    pub l_n: f64,
    /// Tip-side span, mm.
    pub l_p: f64,
    /// Length ratio `l_n / l_p`.
    pub alpha: f64,
    pub n_side: SubModel,
    pub p_side: SubModel,
}

/// Complex dynamic stiffness `s²M + sC + K`.
pub fn dynamic_stiffness(
    m: &DMatrix<f64>,
    c: &DMatrix<f64>,
    k: &DMatrix<f64>,
    s: Complex64,
) -> DMatrix<Complex64> {
    let n = m.nrows();
    let s2 = s * s;
    DMatrix::from_fn(n, n, |i, j| s2 * m[(i, j)] + s * c[(i, j)] + k[(i, j)])
}

/// Split `model` at `iface_node`, re-assembling each side from its own
/// element range so the interface block carries only that side's share.
pub fn partition(model: &FEModel, iface_node: usize) -> Result<Partition> {
    if model.bc != crate::beam::BoundaryCondition::ClampedFree {
        return Err(HybridError::InvalidArgument(
            "partitioning expects the clamped-free monolithic model".into(),
        ));
    }
    let n = model.n_elements;
    if iface_node == 0 || iface_node >= n {
        return Err(HybridError::InvalidArgument(format!(
            "interface node {iface_node} must be interior (1..{n})"
        )));
    }
    let le = model.le;
    let (me, ke) = element_matrices(&model.props, le);

    // local DOF layout: node -> Some([row, row+1]) in the side's ordering
    let build = |elements: std::ops::Range<usize>, local: &dyn Fn(usize) -> Option<[usize; 2]>,
                 n_dofs: usize|
     -> (DMatrix<f64>, DMatrix<f64>) {
        let mut m = DMatrix::<f64>::zeros(n_dofs, n_dofs);
        let mut k = DMatrix::<f64>::zeros(n_dofs, n_dofs);
        for el in elements {
            let map: Vec<Option<usize>> = [el, el + 1]
                .iter()
                .flat_map(|&nd| match local(nd) {
                    Some([a, b]) => [Some(a), Some(b)],
                    None => [None, None],
                })
                .collect();
            for (i, gi) in map.iter().enumerate() {
                let Some(gi) = gi else { continue };
                for (j, gj) in map.iter().enumerate() {
                    let Some(gj) = gj else { continue };
                    m[(*gi, *gj)] += me[(i, j)];
                    k[(*gi, *gj)] += ke[(i, j)];
                }
            }
        }
        (m, k)
    };

    // Root side: clamp eliminated, interface first, interior nodes 1..iface.
    let n_local = move |node: usize| -> Option<[usize; 2]> {
        if node == 0 {
            None
        } else if node == iface_node {
            Some([0, 1])
        } else {
            Some([2 * node, 2 * node + 1])
        }
    };
    let n_dofs_n = 2 * iface_node;
    let (m_n, k_n) = build(0..iface_node, &n_local, n_dofs_n);

    // Tip side: interface first, nodes iface+1..=n after.
    let p_local = move |node: usize| -> Option<[usize; 2]> {
        if node == iface_node {
            Some([0, 1])
        } else {
            Some([2 * (node - iface_node), 2 * (node - iface_node) + 1])
        }
    };
    let n_dofs_p = 2 * (n - iface_node) + 2;
    let (m_p, k_p) = build(iface_node..n, &p_local, n_dofs_p);

    let zm = model.props.zeta_m;
    let zk = model.props.zeta_k;
    let full_dof = |node: usize, comp: usize| model.dof_map[node][comp].unwrap();

    let mut global_n = vec![full_dof(iface_node, 0), full_dof(iface_node, 1)];
    for node in 1..iface_node {
        global_n.push(full_dof(node, 0));
        global_n.push(full_dof(node, 1));
    }
    let mut global_p = vec![full_dof(iface_node, 0), full_dof(iface_node, 1)];
    for node in iface_node + 1..=n {
        global_p.push(full_dof(node, 0));
        global_p.push(full_dof(node, 1));
    }

    let l_n = iface_node as f64 * le;
    let l_p = model.props.l - l_n;
    Ok(Partition {
        iface_node,
        l_n,
        l_p,
        alpha: l_n / l_p,
        n_side: SubModel {
            c: &m_n * zm + &k_n * zk,
            m: m_n,
            k: k_n,
            length: l_n,
            global_dofs: global_n,
        },
        p_side: SubModel {
            c: &m_p * zm + &k_p * zk,
            m: m_p,
            k: k_p,
            length: l_p,
            global_dofs: global_p,
        },
    })
}

/// Pick the interior mesh node closest to `fraction` of the span and split
/// there. `fraction` is the root-side share of the total length.
pub fn partition_at_fraction(model: &FEModel, fraction: f64) -> Result<Partition> {
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(HybridError::InvalidArgument(format!(
            "fraction {fraction} outside (0, 1)"
        )));
    }
    let node = (fraction * model.n_elements as f64).round() as usize;
    partition(model, node.clamp(1, model.n_elements - 1))
}

/// Schur complement of one side at `s`, plus a conditioning estimate of the
/// bulk solve (ratio of extreme LU pivot magnitudes).
#[derive(Debug, Clone)]
pub struct CondensedInterface {
    pub d: Matrix2<Complex64>,
    pub cond_bulk: f64,
}

type BulkLu = nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>;

fn bulk_lu(sub: &SubModel, s: Complex64) -> Result<(BulkLu, DMatrix<Complex64>, f64)> {
    let d = dynamic_stiffness(&sub.m, &sub.c, &sub.k, s);
    let nb = sub.n_bulk();
    let d_bb = d.view((2, 2), (nb, nb)).into_owned();
    let lu = d_bb.lu();
    let mut max_p = 0.0f64;
    let mut min_p = f64::INFINITY;
    for i in 0..nb {
        let p = lu.u()[(i, i)].norm();
        max_p = max_p.max(p);
        min_p = min_p.min(p);
    }
    let cond = if min_p == 0.0 { f64::INFINITY } else { max_p / min_p };
    if cond > NEAR_POLE_COND {
        return Err(HybridError::NearPole { s, cond });
    }
    Ok((lu, d, cond))
}

/// Condense the bulk DOFs of one side: `D_ii - D_ib·D_bb⁻¹·D_bi`.
pub fn condense(sub: &SubModel, s: Complex64) -> Result<CondensedInterface> {
    let nb = sub.n_bulk();
    if nb == 0 {
        let d = dynamic_stiffness(&sub.m, &sub.c, &sub.k, s);
        return Ok(CondensedInterface {
            d: d.fixed_view::<2, 2>(0, 0).into_owned(),
            cond_bulk: 1.0,
        });
    }
    let (lu, d, cond) = bulk_lu(sub, s)?;
    let d_bi = d.view((2, 0), (nb, 2)).into_owned();
    let x = lu
        .solve(&d_bi)
        .ok_or(HybridError::NearPole { s, cond: f64::INFINITY })?;
    let d_ii = d.fixed_view::<2, 2>(0, 0).into_owned();
    let d_ib = d.view((0, 2), (2, nb)).into_owned();
    let prod = &d_ib * &x;
    Ok(CondensedInterface {
        d: d_ii - Matrix2::from_fn(|i, j| prod[(i, j)]),
        cond_bulk: cond,
    })
}

/// Condense a load vector (interface entries first, like the sub-model):
/// `F_i - D_ib·D_bb⁻¹·F_b`.
pub fn condense_force(
    sub: &SubModel,
    s: Complex64,
    f: &DVector<Complex64>,
) -> Result<Vector2<Complex64>> {
    if f.len() != sub.n_dofs() {
        return Err(HybridError::InvalidArgument(format!(
            "force vector length {} != sub-model DOFs {}",
            f.len(),
            sub.n_dofs()
        )));
    }
    let f_i = Vector2::new(f[0], f[1]);
    let nb = sub.n_bulk();
    if nb == 0 {
        return Ok(f_i);
    }
    let (lu, d, _) = bulk_lu(sub, s)?;
    let f_b = DMatrix::from_fn(nb, 1, |i, _| f[i + 2]);
    let x = lu
        .solve(&f_b)
        .ok_or(HybridError::NearPole { s, cond: f64::INFINITY })?;
    let d_ib = d.view((0, 2), (2, nb)).into_owned();
    let prod = &d_ib * &x;
    Ok(f_i - Vector2::new(prod[(0, 0)], prod[(1, 0)]))
}

/// Undamped frequencies (Hz) of one side with the interface held fixed.
pub fn clamped_interface_modes(sub: &SubModel, k: usize) -> Result<Vec<f64>> {
    let nb = sub.n_bulk();
    if k == 0 || nb == 0 {
        return Err(HybridError::InvalidArgument(
            "no bulk DOFs or no modes requested".into(),
        ));
    }
    let k_bb = sub.k.view((2, 2), (nb, nb)).into_owned();
    let m_bb = sub.m.view((2, 2), (nb, nb)).into_owned();
    let (omega2, _) = undamped_modes(&k_bb, &m_bb)?;
    Ok(omega2
        .iter()
        .take(k)
        .map(|w2| w2.max(0.0).sqrt() / (2.0 * std::f64::consts::PI) * crate::KHZ_TO_HZ)
        .collect())
}

/// One frequency point of the coupled interface response.
#[derive(Debug, Clone)]
pub struct FrfPoint {
    pub freq_khz: f64,
    /// Interface (deflection mm, rotation rad) response.
    pub u: Vector2<Complex64>,
}

/// Grid points skipped because a bulk solve sat on a pole.
#[derive(Debug, Clone)]
pub struct FrfSkip {
    pub freq_khz: f64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct FrfResult {
    pub points: Vec<FrfPoint>,
    pub skipped: Vec<FrfSkip>,
}

/// Steady interface response `(D_N + D_P)·U = F_N + F_P` over a frequency
/// grid (kHz). `f_ext` is a load on the full model's free DOFs; each side
/// condenses its own share (the interface entries ride with the root side).
pub fn hybrid_frf(part: &Partition, freq_grid_khz: &[f64], f_ext: &DVector<Complex64>) -> Result<FrfResult> {
    let mut points = Vec::with_capacity(freq_grid_khz.len());
    let mut skipped = Vec::new();
    for &f in freq_grid_khz {
        if f <= 0.0 {
            return Err(HybridError::InvalidArgument("frequencies must be positive".into()));
        }
        let s = Complex64::new(0.0, 2.0 * std::f64::consts::PI * f);
        match coupled_point(part, s, f_ext) {
            Ok(u) => points.push(FrfPoint { freq_khz: f, u }),
            Err(HybridError::NearPole { cond, .. }) => skipped.push(FrfSkip {
                freq_khz: f,
                reason: format!("bulk solve near pole (cond {cond:.2e})"),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(FrfResult { points, skipped })
}

fn gather_side(sub: &SubModel, f_ext: &DVector<Complex64>, include_iface: bool) -> DVector<Complex64> {
    let mut f = DVector::from_element(sub.n_dofs(), Complex64::new(0.0, 0.0));
    for (local, &global) in sub.global_dofs.iter().enumerate() {
        if local < 2 && !include_iface {
            continue;
        }
        f[local] = f_ext[global];
    }
    f
}

fn coupled_point(part: &Partition, s: Complex64, f_ext: &DVector<Complex64>) -> Result<Vector2<Complex64>> {
    let d_n = condense(&part.n_side, s)?;
    let d_p = condense(&part.p_side, s)?;
    let f_n = condense_force(&part.n_side, s, &gather_side(&part.n_side, f_ext, true))?;
    let f_p = condense_force(&part.p_side, s, &gather_side(&part.p_side, f_ext, false))?;
    let total = d_n.d + d_p.d;
    let rhs = f_n + f_p;
    total
        .lu()
        .solve(&rhs)
        .ok_or_else(|| HybridError::NumericalFailure(format!("coupled 2x2 system singular at s = {s}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::{assemble, default_properties, BoundaryCondition};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};

    fn model53() -> FEModel {
        assemble(&default_properties(), 53, BoundaryCondition::ClampedFree).unwrap()
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn partition_bookkeeping_at_170_mm() {
        let part = partition(&model53(), 17).unwrap();
        assert_relative_eq!(part.l_n, 170.0, max_relative = 1.0e-14);
        assert_relative_eq!(part.l_p, 360.0, max_relative = 1.0e-14);
        assert_relative_eq!(part.alpha, 170.0 / 360.0, max_relative = 1.0e-14);
        assert_eq!(part.n_side.n_dofs(), 34);
        assert_eq!(part.p_side.n_dofs(), 74);
        // both sides share the interface pair, bulk DOFs partition the rest
        assert_eq!(part.n_side.global_dofs[..2], part.p_side.global_dofs[..2]);
        let mut all: Vec<usize> = part.n_side.global_dofs[2..]
            .iter()
            .chain(part.p_side.global_dofs[2..].iter())
            .copied()
            .chain(part.n_side.global_dofs[..2].iter().copied())
            .collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..model53().n_dofs()).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn side_matrices_add_back_to_the_full_model() {
        let model = model53();
        let part = partition(&model, 17).unwrap();
        let mut m_sum = DMatrix::<f64>::zeros(model.n_dofs(), model.n_dofs());
        let mut k_sum = m_sum.clone();
        for sub in [&part.n_side, &part.p_side] {
            for (li, &gi) in sub.global_dofs.iter().enumerate() {
                for (lj, &gj) in sub.global_dofs.iter().enumerate() {
                    m_sum[(gi, gj)] += sub.m[(li, lj)];
                    k_sum[(gi, gj)] += sub.k[(li, lj)];
                }
            }
        }
        assert_relative_eq!(m_sum, model.m, max_relative = 1.0e-12);
        assert_relative_eq!(k_sum, model.k, max_relative = 1.0e-12);
    }

    #[test]
    fn interface_node_must_be_interior() {
        let model = model53();
        assert!(partition(&model, 0).is_err());
        assert!(partition(&model, 53).is_err());
        assert!(partition(&model, 1).is_ok());
    }

    #[test]
    fn fraction_picker_lands_on_nearest_node() {
        let model = model53();
        let mid = partition_at_fraction(&model, 0.5).unwrap();
        assert_eq!(mid.iface_node, 27); // 26.5 rounds up
        let exp = partition_at_fraction(&model, 170.0 / 530.0).unwrap();
        assert_eq!(exp.iface_node, 17);
    }

    #[test]
    fn root_side_static_condensation_is_the_cantilever_end_stiffness() {
        let part = partition(&model53(), 17).unwrap();
        let cond = condense(&part.n_side, c(0.0, 0.0)).unwrap();
        let ei = default_properties().ei();
        let l = part.l_n;
        let expect = [
            [12.0 * ei / l.powi(3), -6.0 * ei / (l * l)],
            [-6.0 * ei / (l * l), 4.0 * ei / l],
        ];
        for (i, row) in expect.iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                assert_relative_eq!(cond.d[(i, j)].re, *want, max_relative = 1.0e-9);
                assert_abs_diff_eq!(cond.d[(i, j)].im, 0.0, epsilon = 1.0e-12);
            }
        }
    }

    #[test]
    fn tip_side_static_condensation_vanishes() {
        // An unsupported span resists no static interface motion: rigid modes.
        // Measured against the root side's condensed stiffness, the tip side
        // must be pure rounding noise.
        let part = partition(&model53(), 17).unwrap();
        let d_p = condense(&part.p_side, c(0.0, 0.0)).unwrap().d;
        let d_n = condense(&part.n_side, c(0.0, 0.0)).unwrap().d;
        let norm = |m: &Matrix2<Complex64>| {
            m.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
        };
        assert!(norm(&d_p) < 1.0e-9 * norm(&d_n), "leak {:e}", norm(&d_p) / norm(&d_n));
    }

    #[test]
    fn schur_complement_matches_full_block_solve() {
        // Oracle: push a unit interface load through the full sub-model
        // system and through the condensed 2x2; responses must agree.
        let part = partition(&model53(), 23).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s = c(rng.gen_range(-3.0..1.0), rng.gen_range(0.1..18.0));
            for sub in [&part.n_side, &part.p_side] {
                let cond = match condense(sub, s) {
                    Ok(c) => c,
                    Err(HybridError::NearPole { .. }) => continue,
                    Err(e) => panic!("{e}"),
                };
                let d = dynamic_stiffness(&sub.m, &sub.c, &sub.k, s);
                let mut f = DVector::from_element(sub.n_dofs(), c(0.0, 0.0));
                f[0] = c(1.0, 0.3);
                f[1] = c(-0.2, 0.9);
                let u_full = d.clone().lu().solve(&f).unwrap();
                let u_cond = cond
                    .d
                    .lu()
                    .solve(&Vector2::new(f[0], f[1]))
                    .unwrap();
                assert_relative_eq!(u_cond[0].re, u_full[0].re, max_relative = 1.0e-9);
                assert_relative_eq!(u_cond[0].im, u_full[0].im, max_relative = 1.0e-9);
                assert_relative_eq!(u_cond[1].re, u_full[1].re, max_relative = 1.0e-9);
                assert_relative_eq!(u_cond[1].im, u_full[1].im, max_relative = 1.0e-9);
            }
        }
    }

    #[test]
    fn condensed_force_matches_full_solve_with_bulk_load() {
        let part = partition(&model53(), 17).unwrap();
        let sub = &part.n_side;
        let s = c(-0.4, 5.3);
        let mut f = DVector::from_element(sub.n_dofs(), c(0.0, 0.0));
        f[6] = c(2.0, -1.0); // transverse load on an interior node
        f[11] = c(0.0, 0.5);
        let d = dynamic_stiffness(&sub.m, &sub.c, &sub.k, s);
        let u_full = d.clone().lu().solve(&f).unwrap();
        let u_iface = Vector2::new(u_full[0], u_full[1]);

        let d_cond = condense(sub, s).unwrap().d;
        let f_cond = condense_force(sub, s, &f).unwrap();
        let u_cond = d_cond.lu().solve(&f_cond).unwrap();
        for i in 0..2 {
            assert_relative_eq!(u_cond[i].re, u_iface[i].re, max_relative = 1.0e-9);
            assert_relative_eq!(u_cond[i].im, u_iface[i].im, max_relative = 1.0e-9);
        }
    }

    #[test]
    fn condensation_commutes_with_conjugation() {
        let part = partition(&model53(), 31).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let s = c(rng.gen_range(-2.0..0.5), rng.gen_range(0.3..12.0));
            let a = condense(&part.n_side, s).unwrap().d;
            let b = condense(&part.n_side, s.conj()).unwrap().d;
            for i in 0..2 {
                for j in 0..2 {
                    assert_relative_eq!(a[(i, j)].re, b[(i, j)].re, max_relative = 1.0e-12);
                    assert_relative_eq!(a[(i, j)].im, -b[(i, j)].im, max_relative = 1.0e-12);
                }
            }
        }
    }

    #[test]
    fn clamped_interface_modes_match_analytic_spans() {
        let p = default_properties();
        let part = partition(&model53(), 17).unwrap();

        // Tip side with the interface held = 360 mm cantilever.
        let ps = clamped_interface_modes(&part.p_side, 3).unwrap();
        let exact = crate::beam::analytic_cantilever_frequencies(&p, 360.0, 3);
        for (got, want) in ps.iter().zip(&exact) {
            assert_relative_eq!(got, want, max_relative = 2.0e-3);
        }

        // Root side with clamp and interface held = 170 mm clamped-clamped
        // span. Oracle: (beta_l)^2/(2 pi L^2) sqrt(EI/rhoA), beta_1 L = 4.7300407.
        let ns = clamped_interface_modes(&part.n_side, 1).unwrap();
        let bl: f64 = 4.730040744862704;
        let expect =
            bl * bl / (2.0 * std::f64::consts::PI * 170.0_f64.powi(2)) * (p.ei() / p.mass_per_length()).sqrt() * 1.0e3;
        assert_relative_eq!(ns[0], expect, max_relative = 2.0e-3);
        assert!(ns[0] > 100.0);
    }

    #[test]
    fn coupled_determinant_dips_at_monolithic_modes() {
        let model = model53();
        let part = partition(&model, 17).unwrap();
        let modes = crate::beam::natural_frequencies(&model, 3).unwrap();
        for m in &modes {
            let f0 = m.freq_hz / crate::KHZ_TO_HZ;
            // golden-section the determinant magnitude in a +-2% bracket
            let det_at = |f: f64| {
                let s = c(0.0, 2.0 * std::f64::consts::PI * f);
                let dn = condense(&part.n_side, s).unwrap().d;
                let dp = condense(&part.p_side, s).unwrap().d;
                (dn + dp).determinant().norm()
            };
            let (mut a, mut b) = (f0 * 0.98, f0 * 1.02);
            for _ in 0..60 {
                let m1 = a + (b - a) * 0.381966;
                let m2 = b - (b - a) * 0.381966;
                if det_at(m1) < det_at(m2) {
                    b = m2;
                } else {
                    a = m1;
                }
            }
            let f_min = 0.5 * (a + b);
            assert_relative_eq!(f_min, f0, max_relative = 5.0e-3);
        }
    }

    #[test]
    fn hybrid_frf_matches_the_monolithic_solve() {
        let model = model53();
        let part = partition(&model, 17).unwrap();
        let iface_dof = model.dof_map[17][0].unwrap();
        let mut f_ext = DVector::from_element(model.n_dofs(), c(0.0, 0.0));
        f_ext[iface_dof] = c(1.0e-3, 0.0); // 1 N transverse at the interface

        let grid: Vec<f64> = (4..=40).map(|i| i as f64 * 5.0e-4).collect(); // 2..20 Hz
        let frf = hybrid_frf(&part, &grid, &f_ext).unwrap();
        assert!(frf.skipped.is_empty());
        for pt in &frf.points {
            let s = c(0.0, 2.0 * std::f64::consts::PI * pt.freq_khz);
            let d = dynamic_stiffness(&model.m, &model.c, &model.k, s);
            let u = d.lu().solve(&f_ext).unwrap();
            let u0 = u[iface_dof];
            let u1 = u[model.dof_map[17][1].unwrap()];
            assert_relative_eq!(pt.u[0].re, u0.re, max_relative = 1.0e-8);
            assert_relative_eq!(pt.u[0].im, u0.im, max_relative = 1.0e-8);
            assert_relative_eq!(pt.u[1].re, u1.re, max_relative = 1.0e-8);
            assert_relative_eq!(pt.u[1].im, u1.im, max_relative = 1.0e-8);
        }
    }

    #[test]
    fn force_vector_length_is_checked() {
        let part = partition(&model53(), 17).unwrap();
        let bad = DVector::from_element(3, c(0.0, 0.0));
        assert!(condense_force(&part.n_side, c(0.0, 1.0), &bad).is_err());
    }
}
