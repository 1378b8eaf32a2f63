//! Euler-Bernoulli beam finite elements on a uniform mesh.
//!
//! Two-node Hermitian elements with the consistent mass matrix, assembled
//! with Rayleigh damping `C = zeta_m·M + zeta_k·K`. Constrained DOFs are
//! eliminated from the system (no penalty terms), so the assembled matrices
//! only carry free DOFs. Node DOF order is (deflection, rotation) and node 0
//! sits at the clamp.

use crate::error::{HybridError, Result};
use nalgebra::{DMatrix, DVector, Matrix4};

/// Geometry and material of the uniform rectangular-section beam.
///
/// Units: `e` kN/mm² (GPa), `rho` kg/mm³, lengths mm, `zeta_m` 1/ms,
/// `zeta_k` ms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BeamProperties {
    pub e: f64,
    pub rho: f64,
    pub b: f64,
    pub h: f64,
    pub l: f64,
    pub zeta_m: f64,
    pub zeta_k: f64,
}

impl BeamProperties {
    /// Second moment of area of the rectangular section, mm⁴.
    pub fn second_moment(&self) -> f64 {
        self.b * self.h.powi(3) / 12.0
    }

    /// Cross-section area, mm².
    pub fn area(&self) -> f64 {
        self.b * self.h
    }

    /// Bending stiffness EI, kN·mm².
    pub fn ei(&self) -> f64 {
        self.e * self.second_moment()
    }

    /// Mass per unit length, kg/mm.
    pub fn mass_per_length(&self) -> f64 {
        self.rho * self.area()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.e, self.rho, self.b, self.h, self.l];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(HybridError::InvalidArgument(
                "beam properties must be positive and finite".into(),
            ));
        }
        if self.zeta_m < 0.0 || self.zeta_k < 0.0 {
            return Err(HybridError::InvalidArgument(
                "damping coefficients must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BoundaryCondition {
    /// Clamped at node 0, free at the last node (the monolithic beam).
    ClampedFree,
    /// Clamped at both end nodes (a sub-span pinned down at its ends).
    ClampedClamped,
    /// No constrained DOFs; any grounding comes from attached springs.
    FreeFree,
}

/// Element stiffness and consistent mass for one Hermitian beam element of
/// length `le`. DOF order (u1, phi1, u2, phi2).
pub fn element_matrices(props: &BeamProperties, le: f64) -> (Matrix4<f64>, Matrix4<f64>) {
    let ei = props.ei();
    let rho_a = props.mass_per_length();
    let k = ei / le.powi(3);
    #[rustfmt::skip]
    let ke = Matrix4::from_row_slice(&[
        12.0 * k,        6.0 * le * k,  -12.0 * k,        6.0 * le * k,
        6.0 * le * k,    4.0 * le * le * k, -6.0 * le * k, 2.0 * le * le * k,
        -12.0 * k,      -6.0 * le * k,   12.0 * k,       -6.0 * le * k,
        6.0 * le * k,    2.0 * le * le * k, -6.0 * le * k, 4.0 * le * le * k,
    ]);
    let m = rho_a * le / 420.0;
    #[rustfmt::skip]
    let me = Matrix4::from_row_slice(&[
        156.0 * m,       22.0 * le * m,   54.0 * m,      -13.0 * le * m,
        22.0 * le * m,   4.0 * le * le * m, 13.0 * le * m, -3.0 * le * le * m,
        54.0 * m,        13.0 * le * m,  156.0 * m,      -22.0 * le * m,
        -13.0 * le * m, -3.0 * le * le * m, -22.0 * le * m, 4.0 * le * le * m,
    ]);
    (me, ke)
}

/// Assembled free-DOF system matrices for a uniform mesh.
#[derive(Debug, Clone)]
pub struct FEModel {
    pub props: BeamProperties,
    pub n_elements: usize,
    pub le: f64,
    pub bc: BoundaryCondition,
    pub m: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Per node: global index of the free (deflection, rotation) DOFs,
    /// `None` where the boundary condition eliminated the DOF.
    pub dof_map: Vec<[Option<usize>; 2]>,
}

impl FEModel {
    pub fn n_dofs(&self) -> usize {
        self.m.nrows()
    }

    /// x-coordinate of a node, measured from the clamp.
    pub fn node_x(&self, node: usize) -> f64 {
        node as f64 * self.le
    }
}

/// Build the mesh and assemble M, C, K with the boundary DOFs eliminated.
pub fn assemble(props: &BeamProperties, n_elements: usize, bc: BoundaryCondition) -> Result<FEModel> {
    props.validate()?;
    if n_elements < 2 {
        return Err(HybridError::InvalidArgument(
            "need at least two elements".into(),
        ));
    }
    let n_nodes = n_elements + 1;
    let le = props.l / n_elements as f64;

    let constrained = |node: usize| match bc {
        BoundaryCondition::ClampedFree => node == 0,
        BoundaryCondition::ClampedClamped => node == 0 || node == n_nodes - 1,
        BoundaryCondition::FreeFree => false,
    };

    let mut dof_map: Vec<[Option<usize>; 2]> = Vec::with_capacity(n_nodes);
    let mut next = 0usize;
    for node in 0..n_nodes {
        if constrained(node) {
            dof_map.push([None, None]);
        } else {
            dof_map.push([Some(next), Some(next + 1)]);
            next += 2;
        }
    }
    let n_free = next;

    let (me, ke) = element_matrices(props, le);
    let mut m = DMatrix::<f64>::zeros(n_free, n_free);
    let mut k = DMatrix::<f64>::zeros(n_free, n_free);
    for el in 0..n_elements {
        let nodes = [el, el + 1];
        // local DOF l -> global DOF (or None when eliminated)
        let global: Vec<Option<usize>> = nodes
            .iter()
            .flat_map(|&n| dof_map[n].iter().copied())
            .collect();
        for (i, gi) in global.iter().enumerate() {
            let Some(gi) = gi else { continue };
            for (j, gj) in global.iter().enumerate() {
                let Some(gj) = gj else { continue };
                m[(*gi, *gj)] += me[(i, j)];
                k[(*gi, *gj)] += ke[(i, j)];
            }
        }
    }
    let c = &m * props.zeta_m + &k * props.zeta_k;

    Ok(FEModel {
        props: *props,
        n_elements,
        le,
        bc,
        m,
        c,
        k,
        dof_map,
    })
}

/// One damped mode: frequency in Hz and the viscous damping ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub freq_hz: f64,
    pub damping: f64,
}

/// Smallest `k` eigenfrequencies of the damped quadratic pencil
/// `s²M + sC + K`, with per-mode damping ratio `-Re(s)/|s|`.
///
/// The pencil is linearised to the 2n-dimensional state matrix
/// `[[0, I], [-M⁻¹K, -M⁻¹C]]` and solved densely, so this is meant for the
/// moderate meshes used here (hundreds of DOFs).
pub fn natural_frequencies(model: &FEModel, k: usize) -> Result<Vec<Mode>> {
    let n = model.n_dofs();
    if k == 0 || n == 0 {
        return Err(HybridError::InvalidArgument("no modes requested".into()));
    }
    let lu = model.m.clone().lu();
    let minv_k = lu
        .solve(&model.k)
        .ok_or_else(|| HybridError::NumericalFailure("mass matrix singular".into()))?;
    let minv_c = lu
        .solve(&model.c)
        .ok_or_else(|| HybridError::NumericalFailure("mass matrix singular".into()))?;

    let mut a = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(i, n + i)] = 1.0;
    }
    a.view_mut((n, 0), (n, n)).copy_from(&(-&minv_k));
    a.view_mut((n, n), (n, n)).copy_from(&(-&minv_c));

    let eig = a.complex_eigenvalues();
    let mut modes: Vec<Mode> = eig
        .iter()
        .filter(|s| s.im > 1.0e-9)
        .map(|s| Mode {
            freq_hz: s.im / (2.0 * std::f64::consts::PI) * crate::KHZ_TO_HZ,
            damping: -s.re / s.norm(),
        })
        .collect();
    modes.sort_by(|a, b| a.freq_hz.total_cmp(&b.freq_hz));
    modes.truncate(k);
    if modes.len() < k {
        return Err(HybridError::NumericalFailure(format!(
            "requested {k} modes, found {}",
            modes.len()
        )));
    }
    Ok(modes)
}

/// Undamped generalized symmetric eigensolve `K φ = ω² M φ` via a Cholesky
/// reduction. Returns (ω² ascending, mass-orthonormal mode shapes as columns).
pub fn undamped_modes(k: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| HybridError::NumericalFailure("mass matrix not positive definite".into()))?;
    let l = chol.l();
    // B = L⁻¹ K L⁻ᵀ stays symmetric.
    let x = l.solve_lower_triangular(k).ok_or_else(|| {
        HybridError::NumericalFailure("singular Cholesky factor".into())
    })?;
    let bt = l.solve_lower_triangular(&x.transpose()).ok_or_else(|| {
        HybridError::NumericalFailure("singular Cholesky factor".into())
    })?;
    let b = 0.5 * (&bt + bt.transpose());
    let eig = b.symmetric_eigen();

    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let n = k.nrows();
    let mut omega2 = Vec::with_capacity(n);
    let mut shapes = DMatrix::<f64>::zeros(n, n);
    let lt = l.transpose();
    for (col, &idx) in order.iter().enumerate() {
        omega2.push(eig.eigenvalues[idx]);
        let y = eig.eigenvectors.column(idx).into_owned();
        let phi = lt
            .solve_upper_triangular(&DMatrix::from_column_slice(n, 1, y.as_slice()))
            .ok_or_else(|| HybridError::NumericalFailure("singular Cholesky factor".into()))?;
        shapes.set_column(col, &DVector::from_column_slice(phi.as_slice()));
    }
    Ok((omega2, shapes))
}

/// Roots of `cos(x)·cosh(x) = -1`, the clamped-free frequency equation.
fn cantilever_beta_l(n: usize) -> f64 {
    // cos(x) + 1/cosh(x) = 0 has the same roots and stays bounded.
    let f = |x: f64| x.cos() + 1.0 / x.cosh();
    let df = |x: f64| -x.sin() - x.tanh() / x.cosh();
    let mut x = (2.0 * n as f64 - 1.0) * std::f64::consts::FRAC_PI_2;
    if n == 1 {
        x = 1.9; // first root sits well above pi/2
    }
    for _ in 0..60 {
        let step = f(x) / df(x);
        x -= step;
        if step.abs() < 1.0e-14 {
            break;
        }
    }
    x
}

/// First `k` undamped natural frequencies (Hz) of a clamped-free uniform
/// beam of length `l`, from the classical frequency equation.
pub fn analytic_cantilever_frequencies(props: &BeamProperties, l: f64, k: usize) -> Vec<f64> {
    let ei = props.ei();
    let rho_a = props.mass_per_length();
    (1..=k)
        .map(|n| {
            let bl = cantilever_beta_l(n);
            bl * bl / (2.0 * std::f64::consts::PI * l * l) * (ei / rho_a).sqrt() * crate::KHZ_TO_HZ
        })
        .collect()
}

/// Paper-matched defaults: 530 mm steel strip clamped at one end.
pub fn default_properties() -> BeamProperties {
    BeamProperties {
        e: 217.0,
        rho: 8.21e-6,
        b: 25.4,
        h: 1.0,
        l: 530.0,
        zeta_m: 0.0009,
        zeta_k: 0.07,
    }
}
