//! Calibration runs used while pinning default drive and noise levels.
//! Temporary scaffolding, not part of the example set.

use hybrid_beam::beam::{assemble, default_properties, BoundaryCondition};
use hybrid_beam::coupler::{BeamNs, Coupler, CouplerConfig};
use hybrid_beam::rig::{Rig, RigConfig};
use hybrid_beam::substructure::{hybrid_frf, partition, Partition};
use nalgebra::DVector;
use num_complex::Complex64;
use std::f64::consts::PI;

// node 17 translation in the free-dof numbering of the 53-element mesh
const IFACE_DOF: usize = 32;

fn scaled_partition(scale: f64) -> Partition {
    let model = assemble(&default_properties(), 53, BoundaryCondition::ClampedFree).unwrap();
    let mut part = partition(&model, 17).unwrap();
    part.p_side.c *= scale;
    part
}

fn force_vector(n: usize, f: f64) -> DVector<Complex64> {
    let mut v = DVector::from_element(n, Complex64::new(0.0, 0.0));
    v[IFACE_DOF] = Complex64::new(f, 0.0);
    v
}

fn main() {
    let model = assemble(&default_properties(), 53, BoundaryCondition::ClampedFree).unwrap();
    let n_free = model.n_dofs();

    if std::env::var("CAL_NOISY_ONLY").is_ok() {
        let forcing = std::env::args()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .unwrap_or(1.0e-5);
        let freqs: Vec<f64> = (0..=12).map(|i| 16.0 + 0.25 * i as f64).collect();
        for mains in [2.0e-6] {
            run_noisy_sweep(1.0, mains, forcing, n_free, &freqs);
        }
        return;
    }

    // ---- A: coupled compliance per damping scale --------------------------
    let coarse: Vec<f64> = (0..=12).map(|i| (16.0 + 0.25 * i as f64) * 1e-3).collect();
    let fine: Vec<f64> = (0..=10).map(|i| (18.0 + 0.1 * i as f64) * 1e-3).collect();
    let unit = force_vector(n_free, 1.0);
    for scale in [1.0, 2.0, 3.0] {
        let part = scaled_partition(scale);
        let frf = hybrid_frf(&part, &coarse, &unit).unwrap();
        println!("# scale {scale}: |u| mm per kN (coarse grid)");
        for p in &frf.points {
            println!(
                "  {:7.3} Hz   |u| {:12.1}   |phi| {:10.3}",
                p.freq_khz * 1e3,
                p.u[0].norm(),
                p.u[1].norm()
            );
        }
        let frf = hybrid_frf(&part, &fine, &unit).unwrap();
        println!("# scale {scale}: fine grid near the peak");
        for p in &frf.points {
            println!("  {:7.3} Hz   |u| {:12.1}", p.freq_khz * 1e3, p.u[0].norm());
        }
    }

    // ---- B: ideal sweeps, accuracy and iteration profile ------------------
    let forcing = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0e-5);
    println!("\n# forcing = {forcing} kN");
    let freqs: Vec<f64> = (0..=12).map(|i| 16.0 + 0.25 * i as f64).collect();
    for scale in [1.0, 2.0, 3.0] {
        let cfg = CouplerConfig {
            forcing,
            compensation_angle: 0.0,
            ..CouplerConfig::default()
        };
        let part = scaled_partition(scale);
        let ns = BeamNs::new(part.n_side.clone(), cfg.forcing);
        let coupler = Coupler::new(&ns, cfg).unwrap();
        let mut rig_cfg = RigConfig::default().ideal();
        rig_cfg.damping_scale = scale;
        let mut rig = Rig::new(rig_cfg).unwrap();
        let t_start = std::time::Instant::now();
        let recs = coupler.sweep(&mut rig, &freqs).unwrap();
        let wall = t_start.elapsed().as_secs_f64();

        let snapped: Vec<f64> = recs.iter().map(|r| r.omega / (2.0 * PI)).collect();
        let oracle = hybrid_frf(&part, &snapped, &force_vector(n_free, forcing)).unwrap();
        println!("# scale {scale}: ideal sweep vs coupled solve");
        let mut total_iter = 0usize;
        for (rec, orc) in recs.iter().zip(&oracle.points) {
            let du = (rec.u_p.get(0, 1) - orc.u[0]).norm();
            let dphi = (rec.u_p.get(1, 1) - orc.u[1]).norm() * 30.0;
            total_iter += rec.iterations;
            println!(
                "  {:7.3} Hz  iters {:3}  |u| {:8.4}  err_u {:9.2e}  err_phi*dl {:9.2e}  res {:8.2e}  conv {}",
                rec.freq_hz,
                rec.iterations,
                rec.u_p.get(0, 1).norm(),
                du,
                dphi,
                rec.residual_norm,
                rec.converged
            );
        }
        println!(
            "  mean iters {:.2}  sim time {:.1} s  wall {:.1} s",
            total_iter as f64 / recs.len() as f64,
            rig.state().t / 1e3,
            wall
        );
    }

    // ---- B2: the oracle-equivalence grid, scale 1, ideal -------------------
    let fine_hz: Vec<f64> = (0..=30).map(|i| 16.0 + 0.1 * i as f64).collect();
    {
        let cfg = CouplerConfig {
            forcing,
            compensation_angle: 0.0,
            ..CouplerConfig::default()
        };
        let part = scaled_partition(1.0);
        let ns = BeamNs::new(part.n_side.clone(), cfg.forcing);
        let coupler = Coupler::new(&ns, cfg).unwrap();
        let mut rig = Rig::new(RigConfig::default().ideal()).unwrap();
        let t_start = std::time::Instant::now();
        let recs = coupler.sweep(&mut rig, &fine_hz).unwrap();
        let wall = t_start.elapsed().as_secs_f64();
        let snapped: Vec<f64> = recs.iter().map(|r| r.omega / (2.0 * PI)).collect();
        let oracle = hybrid_frf(&part, &snapped, &force_vector(n_free, forcing)).unwrap();
        println!("# fine grid, scale 1, ideal: C5 shape");
        let mut worst = 0.0f64;
        let mut total_iter = 0usize;
        for (rec, orc) in recs.iter().zip(&oracle.points) {
            let du = (rec.u_p.get(0, 1) - orc.u[0]).norm();
            let dphi = (rec.u_p.get(1, 1) - orc.u[1]).norm() * 30.0;
            let err = du.max(dphi);
            worst = worst.max(err);
            total_iter += rec.iterations;
            println!(
                "  {:7.3} Hz  iters {:3}  |u| {:8.4}  err {:9.2e}  res {:8.2e}  conv {}",
                rec.freq_hz,
                rec.iterations,
                rec.u_p.get(0, 1).norm(),
                err,
                rec.residual_norm,
                rec.converged
            );
        }
        println!(
            "  worst err {:.3e}  mean iters {:.2}  sim time {:.1} s  wall {:.1} s",
            worst,
            total_iter as f64 / recs.len() as f64,
            rig.state().t / 1e3,
            wall
        );
    }

    // ---- C: noisy warm sweeps over the mains grid ---------------------------
    println!("\n# noisy sweeps, scale 1, mains grid");
    for mains in [0.0, 5.0e-7, 1.0e-6, 2.0e-6, 4.0e-6] {
        run_noisy_sweep(1.0, mains, forcing, n_free, &freqs);
    }
    println!("\n# noisy sweeps at candidate default mains, damping scales");
    for scale in [2.0, 3.0] {
        run_noisy_sweep(scale, 1.0e-6, forcing, n_free, &freqs);
    }
}

fn run_noisy_sweep(scale: f64, mains: f64, forcing: f64, n_free: usize, freqs: &[f64]) {
    let cfg = CouplerConfig {
        forcing,
        ..CouplerConfig::default()
    };
    let part = scaled_partition(scale);
    let ns = BeamNs::new(part.n_side.clone(), cfg.forcing);
    let coupler = Coupler::new(&ns, cfg).unwrap();
    let mut rig_cfg = RigConfig::default();
    rig_cfg.noise.mains_amplitude = mains;
    rig_cfg.damping_scale = scale;
    let mut rig = Rig::new(rig_cfg).unwrap();
    let recs = coupler.sweep(&mut rig, freqs).unwrap();

    let snapped: Vec<f64> = recs.iter().map(|r| r.omega / (2.0 * PI)).collect();
    let oracle = hybrid_frf(&part, &snapped, &force_vector(n_free, forcing)).unwrap();
    let mut worst = 0.0f64;
    let mut total_iter = 0usize;
    let mut n_unconverged = 0usize;
    let mut peak = 0.0f64;
    let verbose = std::env::var("CAL_NOISY_ONLY").is_ok();
    for (rec, orc) in recs.iter().zip(&oracle.points) {
        let du = (rec.u_p.get(0, 1) - orc.u[0]).norm();
        let dphi = (rec.u_p.get(1, 1) - orc.u[1]).norm() * 30.0;
        worst = worst.max(du.max(dphi));
        total_iter += rec.iterations;
        n_unconverged += usize::from(!rec.converged);
        peak = peak.max(rec.u_p.get(0, 1).norm());
        if verbose {
            println!(
                "  {:7.3} Hz  iters {:3}  res {:8.2e}  conv {}",
                rec.freq_hz, rec.iterations, rec.residual_norm, rec.converged
            );
        }
    }
    println!(
        "# scale {scale} mains {mains:.1e}: NC {n_unconverged}  worst err {worst:.2e}  mean iters {:.2}  peak {peak:.4}  sim {:.0} s",
        total_iter as f64 / recs.len() as f64,
        rig.state().t / 1e3,
    );
    // the resonance bin carries the sync gate
    let res_bin = &recs[10];
    println!(
        "    18.5 bin: iters {:2}  res {:.2e}  conv {}  err_u {:.2e}",
        res_bin.iterations,
        res_bin.residual_norm,
        res_bin.converged,
        (res_bin.u_p.get(0, 1) - oracle.points[10].u[0]).norm(),
    );
    for s in &res_bin.sync {
        println!(
            "    {:<10} delay {:>9} ms  amp {:>9} %",
            s.channel,
            s.delay_ms.map_or("n/a".into(), |d| format!("{d:+.4}")),
            s.amplification_pct.map_or("n/a".into(), |a| format!("{a:+.3}")),
        );
    }
}
