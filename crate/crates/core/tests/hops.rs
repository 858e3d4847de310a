use std::f64::consts::PI;

use proptest::prelude::*;
use rydeco::bath::{BathOptions, BathSpec, DiscreteBath};
use rydeco::expfit::{fit_exponentials, ExpMode, ExpModes};
use rydeco::hops::{
    build_hierarchy, ensemble_average, fit_tau, hierarchy_size, nm_initial_pair, non_markovianity, projector,
    run_trajectory, trace_distance, Density, EnsembleResult, EnsembleSettings, NoiseSource, State,
    SystemModel, TimeGrid,
};
use rydeco::numeric::binomial;
use rydeco::params::PhysicalConfig;
use rydeco::stochastic::spectral_components;
use rydeco::Complex;

fn c(re: f64, im: f64) -> Complex {
    Complex::new(re, im)
}

fn plus() -> State {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    [c(h, 0.0), c(h, 0.0)]
}

fn settings(ntraj: usize, depth: usize) -> EnsembleSettings {
    EnsembleSettings { ntraj, seed: 2024, depth, hierarchy_cap: 100_000, max_rejection: 0.01 }
}

fn nu40() -> (DiscreteBath, ExpModes, f64) {
    let spec = BathSpec::build(&PhysicalConfig { nu: 40, ..PhysicalConfig::default() }, &BathOptions::default()).unwrap();
    let table = spec.auto_correlation(3.0).unwrap();
    let modes = fit_exponentials(&table, 12, 1e-3).unwrap();
    let t_dc = spec.decoherence_time().unwrap().t_dc;
    (spec.modes(), modes, t_dc)
}

/// Lorentzian spectral lines for C(τ) = g e^{−γ|τ|}, truncated at ±`span` γ.
fn lorentzian(g: f64, gamma: f64, span: f64, n: usize) -> DiscreteBath {
    let dw = 2.0 * span * gamma / (n - 1) as f64;
    let omega: Vec<f64> = (0..n).map(|i| -span * gamma + i as f64 * dw).collect();
    let weight = omega.iter().map(|w| g * gamma / (PI * (gamma * gamma + w * w)) * dw).collect();
    DiscreteBath { omega, weight }
}

fn check_density(r: &EnsembleResult) {
    for rho in &r.rho {
        let tr = rho[0][0] + rho[1][1];
        assert!((tr - 1.0).norm() < 1e-10);
        assert!((rho[0][1] - rho[1][0].conj()).norm() < 1e-12);
        assert!(rho[0][0].im.abs() < 1e-12 && rho[1][1].im.abs() < 1e-12);
        let (a, d) = (rho[0][0].re, rho[1][1].re);
        let disc = (0.25 * (a - d).powi(2) + rho[1][0].norm_sqr()).sqrt();
        assert!(0.5 * (a + d) - disc >= -1e-8);
    }
}

#[test]
fn driven_ensemble_is_a_density_matrix_and_reproducible() {
    let (bath, modes, t_dc) = nu40();
    let model = SystemModel::new(2.0 * PI * 0.3e6, 2.0 * PI * 0.05e6, plus()).unwrap();
    let grid = TimeGrid::new(&model, &modes, 2.0 * t_dc, 40, 0.01).unwrap();
    let comps = spectral_components(&bath, 0.5 * grid.dt, 1e-12).unwrap();
    let a = ensemble_average(&model, &modes, NoiseSource::Spectral(&comps), &grid, &settings(24, 3)).unwrap();
    check_density(&a);
    let b = ensemble_average(&model, &modes, NoiseSource::Spectral(&comps), &grid, &settings(24, 3)).unwrap();
    assert_eq!(a.rho, b.rho);
    assert_eq!(a.se, b.se);
}

#[test]
fn pure_dephasing_keeps_populations() {
    let (bath, modes, t_dc) = nu40();
    let model = SystemModel::new(0.0, 0.0, plus()).unwrap();
    let grid = TimeGrid::new(&model, &modes, 2.0 * t_dc, 40, 0.01).unwrap();
    let comps = spectral_components(&bath, 0.5 * grid.dt, 1e-12).unwrap();
    let r = ensemble_average(&model, &modes, NoiseSource::Spectral(&comps), &grid, &settings(64, 3)).unwrap();
    for (rho, se) in r.rho.iter().zip(&r.se) {
        assert!((rho[0][0].re - 0.5).abs() <= 3.0 * se[0][0] + 1e-12);
    }
    // The coherence does decay.
    assert!(*r.coherence().last().unwrap() < 0.5);
}

#[test]
fn halving_the_step_barely_moves_a_trajectory() {
    let (bath, modes, t_dc) = nu40();
    let model = SystemModel::new(2.0 * PI * 0.3e6, 0.0, plus()).unwrap();
    let h = build_hierarchy(modes.len(), 3, 100_000).unwrap();
    let coarse = TimeGrid::new(&model, &modes, t_dc, 10, 0.01).unwrap();
    let fine = TimeGrid { dt: 0.5 * coarse.dt, steps: 2 * coarse.steps, stride: 2 * coarse.stride };
    let comps = spectral_components(&bath, 0.5 * fine.dt, 1e-12).unwrap();
    let a = run_trajectory(&model, &modes, &h, NoiseSource::Spectral(&comps), &coarse, 9, 0).unwrap();
    let b = run_trajectory(&model, &modes, &h, NoiseSource::Spectral(&comps), &fine, 9, 0).unwrap();
    let (fa, fb) = (a.states.last().unwrap(), b.states.last().unwrap());
    let diff = ((fa[0] - fb[0]).norm_sqr() + (fa[1] - fb[1]).norm_sqr()).sqrt();
    assert!(diff < 1e-6, "{diff:e}");
}

#[test]
fn closed_system_has_no_non_markovianity() {
    let zero = ExpModes { modes: vec![ExpMode { g: c(0.0, 0.0), omega: 0.0, gamma: 1e6 }], residual: 0.0, reflected: false };
    let (s, p) = nm_initial_pair();
    let ms = SystemModel::new(2.0 * PI * 0.3e6, 0.0, s).unwrap();
    let mp = SystemModel::new(2.0 * PI * 0.3e6, 0.0, p).unwrap();
    let grid = TimeGrid::new(&ms, &zero, 5e-6, 50, 0.01).unwrap();
    let a = ensemble_average(&ms, &zero, NoiseSource::None, &grid, &settings(4, 2)).unwrap();
    let b = ensemble_average(&mp, &zero, NoiseSource::None, &grid, &settings(4, 2)).unwrap();
    let nm = non_markovianity(&a, &b, 1).unwrap();
    assert!(nm.value < 1e-12, "{}", nm.value);
    assert!(nm.distance.iter().all(|d| (d - 1.0).abs() < 1e-9));
}

#[test]
fn near_markovian_bath_shows_no_backflow() {
    let (g, gamma) = (5e12, 2e7);
    let modes = ExpModes { modes: vec![ExpMode { g: c(g, 0.0), omega: 0.0, gamma }], residual: 0.0, reflected: false };
    let (s, p) = nm_initial_pair();
    let ms = SystemModel::new(1e6, 0.0, s).unwrap();
    let mp = SystemModel::new(1e6, 0.0, p).unwrap();
    let grid = TimeGrid::new(&ms, &modes, 6e-6, 60, 0.01).unwrap();
    let bath = lorentzian(g, gamma, 10.0, 201);
    let comps = spectral_components(&bath, 0.5 * grid.dt, 0.0).unwrap();
    let a = ensemble_average(&ms, &modes, NoiseSource::Spectral(&comps), &grid, &settings(200, 4)).unwrap();
    let b = ensemble_average(&mp, &modes, NoiseSource::Spectral(&comps), &grid, &settings(200, 4)).unwrap();
    let nm = non_markovianity(&a, &b, 3).unwrap();
    assert!(nm.value <= 2.0 * nm.se, "N = {} ± {}", nm.value, nm.se);
    assert!(nm.distance.last().unwrap() < &0.9);
}

#[test]
fn gaussian_fit_on_a_microsecond_series() {
    let t: Vec<f64> = (0..200).map(|i| i as f64 * 2e-8).collect();
    let y: Vec<f64> = t.iter().map(|t| 0.5 * (-(t / 1e-6).powi(2)).exp()).collect();
    let f = fit_tau(&t, &y).unwrap();
    assert!((f.tau / 1e-6 - 1.0).abs() < 1e-6, "{:e}", f.tau);
    assert!(f.bounded);
    let flat = vec![0.5; 200];
    assert!(!fit_tau(&t, &flat).unwrap().bounded);
}

fn random_density(a: [f64; 3], b: [f64; 3]) -> (Density, Density) {
    let to = |v: [f64; 3]| -> Density {
        // Bloch vector shrunk into the unit ball.
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1.0);
        let (x, y, z) = (v[0] / n, v[1] / n, v[2] / n);
        [[c(0.5 * (1.0 + z), 0.0), c(0.5 * x, -0.5 * y)], [c(0.5 * x, 0.5 * y), c(0.5 * (1.0 - z), 0.0)]]
    };
    (to(a), to(b))
}

fn rotate(r: &Density, u: &[[Complex; 2]; 2]) -> Density {
    let mut out = [[c(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    out[i][j] += u[i][k] * r[k][l] * u[j][l].conj();
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hierarchy_is_closed_and_sized(m in 1usize..6, d in 1usize..6) {
        let h = build_hierarchy(m, d, 1_000_000).unwrap();
        prop_assert_eq!(h.len() as u128, binomial((m + d) as u64, d as u64));
        prop_assert_eq!(h.len() as u128, hierarchy_size(m, d));
        prop_assert_eq!(&h.indices[0], &vec![0u16; m]);
        for (p, k) in h.indices.iter().enumerate() {
            prop_assert!(k.iter().map(|&x| x as usize).sum::<usize>() <= d);
            for j in 0..m {
                if k[j] > 0 {
                    let q = h.lower[p][j].unwrap();
                    let mut parent = k.clone();
                    parent[j] -= 1;
                    prop_assert_eq!(&h.indices[q], &parent);
                }
            }
        }
        let again = build_hierarchy(m, d, 1_000_000).unwrap();
        prop_assert_eq!(h.indices, again.indices);
    }

    #[test]
    fn trace_distance_is_a_metric(
        a in proptest::array::uniform3(-1.0f64..1.0),
        b in proptest::array::uniform3(-1.0f64..1.0),
        x in proptest::array::uniform3(-1.0f64..1.0),
        th in 0.0f64..PI, ph in 0.0f64..(2.0 * PI), ch in 0.0f64..(2.0 * PI),
    ) {
        let (r1, r2) = random_density(a, b);
        let (r3, _) = random_density(x, x);
        let d12 = trace_distance(&r1, &r2).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d12));
        prop_assert!(trace_distance(&r1, &r1).unwrap() < 1e-15);
        prop_assert!((d12 - trace_distance(&r2, &r1).unwrap()).abs() < 1e-15);
        let tri = trace_distance(&r1, &r3).unwrap() + trace_distance(&r3, &r2).unwrap();
        prop_assert!(d12 <= tri + 1e-12);
        let e = |t: f64| Complex::new(0.0, t).exp();
        let (cs, sn) = ((0.5 * th).cos(), (0.5 * th).sin());
        let u = [[e(ph) * cs, -e(ch) * sn], [e(-ch) * sn, e(-ph) * cs]];
        let rotated = trace_distance(&rotate(&r1, &u), &rotate(&r2, &u)).unwrap();
        prop_assert!((rotated - d12).abs() < 1e-12);
    }
}

#[test]
fn orthogonal_pure_states_are_maximally_distant() {
    let (s, p) = nm_initial_pair();
    assert!((trace_distance(&projector(&s), &projector(&p)).unwrap() - 1.0).abs() < 1e-15);
    let bad: Density = [[c(1.0, 0.0), c(0.1, 0.0)], [c(0.0, 0.0), c(0.0, 0.0)]];
    assert!(trace_distance(&bad, &projector(&s)).is_err());
}
