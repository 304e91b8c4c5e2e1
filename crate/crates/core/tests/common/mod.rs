//! Checks shared by the property suite and the acceptance run. Each returns
//! Err with a description when the property does not hold.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use fieldmachine::gaussian::{
    evolve, mutual_information, normal_modes, reduced_state, relative_entropy, symplectic_defect, thermal_state,
    total_energy, von_neumann_entropy, GaussianState, QuadraticHamiltonian,
};
use fieldmachine::lattice::{
    build_profile, decouple, discretize, glue_profiles, split_hamiltonian, CouplingSpec, DensityProfile, ProfileKind,
};
use fieldmachine::qtp::{
    compress, decorrelate, energy_density, idle, ramp_valve, MergeConfig, TrotterScheme, ValveDirection,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

pub type Check = Result<(), String>;

/// Two glued segments with their coupled and decoupled hamiltonians.
#[derive(Clone, Debug)]
pub struct Pair {
    pub profile: DensityProfile,
    pub coupled: QuadraticHamiltonian,
    pub uncoupled: QuadraticHamiltonian,
    pub cut: usize,
    pub coupling: CouplingSpec,
}

#[derive(Clone, Debug)]
pub struct PairSpec {
    pub n_left: usize,
    pub n_right: usize,
    pub j_hz: f64,
    pub erf: bool,
    pub t_left: f64,
    pub t_right: f64,
}

pub fn pair_spec() -> impl Strategy<Value = PairSpec> {
    (6usize..20, 6usize..20, prop_oneof![Just(0.01), 0.005f64..5.0], any::<bool>(), 20.0f64..120.0, 20.0f64..120.0)
        .prop_map(|(n_left, n_right, j_hz, erf, t_left, t_right)| PairSpec {
            n_left,
            n_right,
            j_hz,
            erf,
            t_left,
            t_right,
        })
}

impl PairSpec {
    pub fn build(&self) -> Pair {
        let dz = 0.5;
        let coupling = CouplingSpec::from_speed_of_sound(2.0, 100.0, self.j_hz);
        let kind = if self.erf { ProfileKind::ErfBox } else { ProfileKind::Homogeneous };
        let (w, floor) = if self.erf { (1.5, 0.5) } else { (0.0, 1.0) };
        let a = build_profile(kind, dz * self.n_left as f64, 100.0, w, floor, dz).unwrap();
        let b = build_profile(kind, dz * self.n_right as f64, 100.0, w, floor, dz).unwrap();
        let profile = glue_profiles(&a, &b).unwrap();
        let coupled = discretize(&profile, &coupling).unwrap();
        let (_, _, link) = split_hamiltonian(&coupled, self.n_left).unwrap();
        let uncoupled = decouple(&coupled, &link).unwrap();
        Pair { profile, coupled, uncoupled, cut: self.n_left, coupling }
    }

    /// Product of the two halves' thermal states at their own temperatures.
    pub fn initial_state(&self, pair: &Pair) -> GaussianState {
        let n = pair.coupled.n_pixels();
        let left = thermal_state(&pair.uncoupled.restrict(0..pair.cut).unwrap(), self.t_left).unwrap();
        let right = thermal_state(&pair.uncoupled.restrict(pair.cut..n).unwrap(), self.t_right).unwrap();
        direct_sum(&left, &right)
    }
}

pub fn direct_sum(a: &GaussianState, b: &GaussianState) -> GaussianState {
    let (na, nb) = (a.n_pixels(), b.n_pixels());
    let n = na + nb;
    let idx_a = |i: usize| if i < na { i } else { n + i - na };
    let idx_b = |i: usize| if i < nb { na + i } else { n + na + i - nb };
    let mut cov = DMatrix::zeros(2 * n, 2 * n);
    let mut mean = nalgebra::DVector::zeros(2 * n);
    for i in 0..2 * na {
        mean[idx_a(i)] = a.mean[i];
        for j in 0..2 * na {
            cov[(idx_a(i), idx_a(j))] = a.cov[(i, j)];
        }
    }
    for i in 0..2 * nb {
        mean[idx_b(i)] = b.mean[i];
        for j in 0..2 * nb {
            cov[(idx_b(i), idx_b(j))] = b.cov[(i, j)];
        }
    }
    GaussianState::new(cov, mean, a.dz).unwrap()
}

fn cone(label: &str, s: &GaussianState) -> Check {
    s.check_cone().map_err(|e| format!("{label}: {e}"))
}

pub fn symplectic_propagators(spec: &PairSpec, t: f64) -> Check {
    let pair = spec.build();
    for (name, h) in [("coupled", &pair.coupled), ("uncoupled", &pair.uncoupled)] {
        let g = normal_modes(h, 1e-12).unwrap().propagator(t);
        let d = symplectic_defect(&g);
        if d > 1e-9 {
            return Err(format!("{name} propagator defect {d:.3e} at t = {t}"));
        }
    }
    Ok(())
}

/// Every operation on states keeps all symplectic eigenvalues above 1.
pub fn cone_preserved(spec: &PairSpec, t: f64) -> Check {
    let pair = spec.build();
    let s0 = spec.initial_state(&pair);
    cone("initial", &s0)?;
    cone("evolve", &evolve(&s0, &pair.coupled, t).unwrap())?;
    for scheme in [TrotterScheme::SplitStep, TrotterScheme::ExactMidpoint] {
        let cfg = MergeConfig::new(t, ValveDirection::Merge).with_scheme(scheme);
        for f in ramp_valve(&s0, &pair.uncoupled, &pair.coupled, &cfg, 20).unwrap() {
            cone("merge", &f.state)?;
        }
    }
    let merged = evolve(&s0, &pair.coupled, t).unwrap();
    let cfg = MergeConfig::new(t, ValveDirection::Split);
    for f in ramp_valve(&merged, &pair.uncoupled, &pair.coupled, &cfg, 20).unwrap() {
        cone("split", &f.state)?;
    }
    cone("decorrelate", &decorrelate(&merged, pair.cut).unwrap())?;
    cone("reduce", &reduced_state(&merged, 1..pair.cut).unwrap())?;
    for f in idle(&merged, &pair.coupled, t, 0.5 * t.max(0.1)).unwrap() {
        cone("idle", &f.state)?;
    }
    if !spec.erf && spec.n_left > 0 {
        let n = pair.cut;
        let h = pair.uncoupled.restrict(0..n).unwrap();
        let seg = build_profile(ProfileKind::Homogeneous, 0.5 * n as f64, 100.0, 0.0, 1.0, 0.5).unwrap();
        let s = thermal_state(&h, spec.t_left).unwrap();
        for f in compress(&s, &seg, &pair.coupling, 0.5, t.max(0.1), 10, 5).unwrap() {
            cone("compress", &f.state)?;
        }
    }
    Ok(())
}

pub fn entropy_invariant(spec: &PairSpec, t: f64) -> Check {
    let pair = spec.build();
    let s0 = spec.initial_state(&pair);
    let a = von_neumann_entropy(&s0).unwrap();
    let b = von_neumann_entropy(&evolve(&s0, &pair.coupled, t).unwrap()).unwrap();
    if a < 0.0 || b < 0.0 {
        return Err(format!("negative entropy {a} / {b}"));
    }
    if (a - b).abs() > 1e-8 * a.max(1.0) {
        return Err(format!("entropy changed under evolution: {a} -> {b}"));
    }
    Ok(())
}

pub fn relative_entropy_positive(spec: &PairSpec, dt_nk: f64) -> Check {
    let pair = spec.build();
    let rho = thermal_state(&pair.coupled, spec.t_left).unwrap();
    let sigma = thermal_state(&pair.coupled, spec.t_left + dt_nk).unwrap();
    let same = relative_entropy(&rho, &rho).unwrap();
    if same.abs() > 1e-9 {
        return Err(format!("D(ρ‖ρ) = {same:e}"));
    }
    let d = relative_entropy(&rho, &sigma).unwrap();
    if !(d > 0.0) {
        return Err(format!("D(ρ‖σ) = {d:e} for distinct states"));
    }
    Ok(())
}

pub fn mutual_information_checks(spec: &PairSpec, t: f64) -> Check {
    let pair = spec.build();
    let merged = evolve(&spec.initial_state(&pair), &pair.coupled, t).unwrap();
    let mi = mutual_information(&merged, pair.cut).unwrap();
    if mi < -1e-9 {
        return Err(format!("negative mutual information {mi:e}"));
    }
    let after = mutual_information(&decorrelate(&merged, pair.cut).unwrap(), pair.cut).unwrap();
    if after != 0.0 {
        return Err(format!("mutual information {after:e} after decorrelation"));
    }
    Ok(())
}

pub fn energy_density_sums(spec: &PairSpec, t: f64) -> Check {
    let pair = spec.build();
    let s = evolve(&spec.initial_state(&pair), &pair.coupled, t).unwrap();
    let total = total_energy(&s, &pair.coupled).unwrap();
    let sum: f64 = energy_density(&s, &pair.coupled).unwrap().sum();
    if ((sum - total) / total).abs() > 1e-10 {
        return Err(format!("pixel sum {sum:e} vs total {total:e}"));
    }
    Ok(())
}

fn merged_with_steps(spec: &PairSpec, t_merge: f64, n: usize) -> GaussianState {
    let pair = spec.build();
    let cfg = MergeConfig::new(t_merge, ValveDirection::Merge).with_steps(n);
    ramp_valve(&spec.initial_state(&pair), &pair.uncoupled, &pair.coupled, &cfg, n).unwrap().pop().unwrap().state
}

/// Ratio of successive Trotter differences when the step count doubles.
pub fn trotter_factor(spec: &PairSpec, t_merge: f64, n: usize) -> f64 {
    let a = merged_with_steps(spec, t_merge, n);
    let b = merged_with_steps(spec, t_merge, 2 * n);
    let c = merged_with_steps(spec, t_merge, 4 * n);
    (&b.cov - &c.cov).amax() / (&a.cov - &b.cov).amax()
}

pub fn trotter_halving(spec: &PairSpec, t_merge: f64) -> Check {
    let f = trotter_factor(spec, t_merge, (t_merge / 0.1).ceil() as usize);
    if !(f <= 0.3) {
        return Err(format!("halving factor {f:.3}"));
    }
    Ok(())
}

/// Net energy added by a merge followed by a split of the same duration.
pub fn merge_split_injection(spec: &PairSpec, t_merge: f64) -> f64 {
    let pair = spec.build();
    let s0 = spec.initial_state(&pair);
    let steps = ((t_merge / 0.05).ceil() as usize).max(1);
    let m = MergeConfig::new(t_merge, ValveDirection::Merge).with_steps(steps);
    let merged = ramp_valve(&s0, &pair.uncoupled, &pair.coupled, &m, steps).unwrap().pop().unwrap().state;
    let s = MergeConfig::new(t_merge, ValveDirection::Split).with_steps(steps);
    let split = ramp_valve(&merged, &pair.uncoupled, &pair.coupled, &s, steps).unwrap().pop().unwrap().state;
    total_energy(&split, &pair.uncoupled).unwrap() - total_energy(&s0, &pair.uncoupled).unwrap()
}

/// Injected energy is non-negative for equal temperatures and falls as the
/// ramps get slower, compared point by point.
pub fn merge_split_monotone(spec: &PairSpec, durations: &[f64]) -> Check {
    let spec = PairSpec { t_right: spec.t_left, ..spec.clone() };
    let e0 = total_energy(&spec.initial_state(&spec.build()), &spec.build().uncoupled).unwrap();
    let inj: Vec<f64> = durations.iter().map(|&t| merge_split_injection(&spec, t)).collect();
    if let Some(bad) = inj.iter().find(|&&x| x < -1e-10 * e0) {
        return Err(format!("negative injected energy {bad:e}"));
    }
    if inj.windows(2).any(|w| w[1] >= w[0]) {
        return Err(format!("injection not decreasing in t_merge: {inj:?}"));
    }
    Ok(())
}

/// Point-by-point decrease fails near resonances, where a linear ramp of a
/// given length happens to excite almost nothing. Averaging over four
/// durations per octave starting at each of `octaves` smooths those out.
pub fn merge_split_octaves(spec: &PairSpec, octaves: &[f64]) -> Check {
    let spec = PairSpec { t_right: spec.t_left, ..spec.clone() };
    let e0 = total_energy(&spec.initial_state(&spec.build()), &spec.build().uncoupled).unwrap();
    let mut means = Vec::new();
    for &t0 in octaves {
        let inj: Vec<f64> = (0..4).map(|i| merge_split_injection(&spec, t0 * 2f64.powf(f64::from(i) / 4.0))).collect();
        if let Some(bad) = inj.iter().find(|&&x| x < -1e-10 * e0) {
            return Err(format!("negative injected energy {bad:e}"));
        }
        means.push(inj.iter().sum::<f64>() / 4.0);
    }
    if means.windows(2).any(|w| w[1] >= w[0]) {
        return Err(format!("octave-averaged injection not decreasing: {means:?}"));
    }
    Ok(())
}
