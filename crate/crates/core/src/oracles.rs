//! Closed-form results for homogeneous condensates, used as ground truth for
//! the lattice model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::PhysicalConstants;

/// Default number of modes kept per half in the sudden-merge sum.
pub const DEFAULT_K_MAX: usize = 200;
/// Largest acceptable relative thermal tail beyond the truncation.
pub const TAIL_TOL: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousSpec {
    pub length_um: f64,
    pub density: f64,
    /// J·μm.
    pub g: f64,
    pub temperature_nk: f64,
    pub mode_count: usize,
    #[serde(skip)]
    pub constants: PhysicalConstants,
}

impl HomogeneousSpec {
    pub fn new(length_um: f64, density: f64, g: f64, temperature_nk: f64, mode_count: usize) -> Result<Self> {
        let spec = Self { length_um, density, g, temperature_nk, mode_count, constants: PhysicalConstants::default() };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with g chosen so that the speed of sound is `speed_um_per_ms`.
    pub fn from_speed_of_sound(
        length_um: f64,
        density: f64,
        speed_um_per_ms: f64,
        temperature_nk: f64,
        mode_count: usize,
    ) -> Result<Self> {
        let g = PhysicalConstants::default().rest_energy(speed_um_per_ms) / density;
        Self::new(length_um, density, g, temperature_nk, mode_count)
    }

    fn validate(&self) -> Result<()> {
        let ok = [self.length_um, self.density, self.g, self.temperature_nk].iter().all(|x| *x > 0.0 && x.is_finite());
        if !ok || self.mode_count == 0 {
            return Err(Error::InvalidInput("homogeneous spec fields must all be positive".into()));
        }
        Ok(())
    }

    /// c = √(gρ₀/m) in μm/ms.
    pub fn speed_of_sound(&self) -> f64 {
        (self.g * self.density / self.constants.atom_mass).sqrt() * 1e3
    }

    /// ħ²ρ₀/m in J·μm, the stiffness of the phase gradient term.
    fn stiffness(&self) -> f64 {
        self.constants.kinetic_scale() * self.density
    }
}

/// ω_k = πck/L for k = 1..K, rad/ms.
pub fn dispersion(spec: &HomogeneousSpec) -> Vec<f64> {
    let c = spec.speed_of_sound();
    (1..=spec.mode_count).map(|k| std::f64::consts::PI * c * k as f64 / spec.length_um).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroModeGap {
    /// Gapped k = 0 frequency, rad/ms.
    pub omega0: f64,
    /// Squeezing parameters ζ_k = ω₀²/ω_k² for k = 1..K; ω_k² → ω_k²(1 + ζ_k).
    pub zeta: Vec<f64>,
}

/// Gap opened by a uniform phase-locking term 2πħJρ₀ in the H_φφ block.
pub fn zero_mode_gap(j_hz: f64, spec: &HomogeneousSpec) -> Result<ZeroModeGap> {
    if !(j_hz > 0.0) {
        return Err(Error::InvalidInput(format!("zero-mode gap needs J > 0, got {j_hz}")));
    }
    let omega0 = (2.0 * std::f64::consts::PI * j_hz * spec.g * spec.density / spec.constants.hbar).sqrt() * 1e-3;
    let zeta = dispersion(spec).iter().map(|w| (omega0 / w).powi(2)).collect();
    Ok(ZeroModeGap { omega0, zeta })
}

/// T' = T·(ρ'/ρ₀)^{3/2}.
pub fn evaporative_scaling(temperature_nk: f64, rho_before: f64, rho_after: f64) -> Result<f64> {
    if !(rho_before > 0.0) || !(rho_after > 0.0) {
        return Err(Error::InvalidInput("densities must be positive".into()));
    }
    Ok(temperature_nk * (rho_after / rho_before).powf(1.5))
}

/// ∫₀^L cos(a·u + φ)·cos(b·u) du.
fn cos_overlap(a: f64, phase: f64, b: f64, l: f64) -> f64 {
    let part = |c: f64| {
        if c.abs() < 1e-14 {
            l * phase.cos()
        } else {
            ((c * l + phase).sin() - phase.sin()) / c
        }
    };
    0.5 * (part(a + b) + part(a - b))
}

/// Continuum energy density after instantaneously joining two equal
/// homogeneous halves [0, L) and [L, 2L), each initially thermal. Zero modes
/// of the halves are discarded; the joint basis is truncated at 2·k_max.
#[derive(Clone, Debug)]
pub struct SuddenMerge {
    spec: HomogeneousSpec,
    /// Joint wave numbers πl/2L, l = 1..M.
    q: DVector<f64>,
    omega: DVector<f64>,
    /// r_l = √(B_l/g) with B_l = (ħ²ρ₀/m)q_l².
    r: DVector<f64>,
    rho0: DMatrix<f64>,
    phi0: DMatrix<f64>,
    tail: f64,
}

impl SuddenMerge {
    pub fn new(spec: &HomogeneousSpec, k_max: usize) -> Result<Self> {
        spec.validate()?;
        if k_max == 0 {
            return Err(Error::InvalidInput("k_max must be at least 1".into()));
        }
        let l = spec.length_um;
        let pi = std::f64::consts::PI;
        let kin = spec.stiffness();
        let c = spec.speed_of_sound();
        let hbar = spec.constants.hbar_ms();
        let kt = spec.constants.thermal_energy(spec.temperature_nk);

        let m = 2 * k_max;
        let q = DVector::from_fn(m, |i, _| pi * (i + 1) as f64 / (2.0 * l));
        let omega = q.map(|x| c * x);
        let r = q.map(|x| (kin * x * x / spec.g).sqrt());

        // Half-mode second moments ½coth(ħω/2kT)·(B/g)^{±½}.
        let mut var_rho = Vec::with_capacity(2 * k_max);
        let mut var_phi = Vec::with_capacity(2 * k_max);
        let mut overlap = DMatrix::zeros(m, 2 * k_max);
        let norm = (1.0 / l).sqrt() * (2.0 / l).sqrt();
        for k in 1..=k_max {
            let qk = pi * k as f64 / l;
            let w = c * qk;
            let coth = 1.0 / (hbar * w / (2.0 * kt)).tanh();
            let rk = (kin * qk * qk / spec.g).sqrt();
            for half in 0..2 {
                let col = 2 * (k - 1) + half;
                var_rho.push(0.5 * coth * rk);
                var_phi.push(0.5 * coth / rk);
                for row in 0..m {
                    let ql = q[row];
                    let phase = if half == 0 { 0.0 } else { ql * l };
                    overlap[(row, col)] = norm * cos_overlap(ql, phase, qk, l);
                }
            }
        }
        let rho0 = &overlap * DMatrix::from_diagonal(&DVector::from_vec(var_rho)) * overlap.transpose();
        let phi0 = &overlap * DMatrix::from_diagonal(&DVector::from_vec(var_phi)) * overlap.transpose();

        // Thermal energy beyond k_max from the geometric decay of n_k.
        let occupation = |k: f64| {
            let x = hbar * c * pi * k / (l * kt);
            k / x.exp_m1()
        };
        let kept: f64 = (1..=k_max).map(|k| occupation(k as f64)).sum();
        let ratio = (-hbar * c * pi / (l * kt)).exp();
        let next = occupation((k_max + 1) as f64);
        let tail = next / (1.0 - ratio) / kept;

        Ok(Self { spec: *spec, q, omega, r, rho0, phi0, tail })
    }

    /// Thermal energy beyond the truncation relative to the kept part.
    pub fn tail_estimate(&self) -> f64 {
        self.tail
    }

    /// Fails when the truncation misses more than 1% of the thermal energy.
    pub fn check_truncation(&self) -> Result<()> {
        if self.tail > TAIL_TOL {
            return Err(Error::InvalidInput(format!(
                "k_max too small: thermal tail estimate {:.3e} exceeds {TAIL_TOL}",
                self.tail
            )));
        }
        Ok(())
    }

    fn moments(&self, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = self.q.len();
        let cs = self.omega.map(|w| (w * t).cos());
        let sn = self.omega.map(|w| (w * t).sin());
        let rho = DMatrix::from_fn(m, m, |i, j| {
            cs[i] * cs[j] * self.rho0[(i, j)] + sn[i] * sn[j] * self.r[i] * self.r[j] * self.phi0[(i, j)]
        });
        let phi = DMatrix::from_fn(m, m, |i, j| {
            cs[i] * cs[j] * self.phi0[(i, j)] + sn[i] * sn[j] * self.rho0[(i, j)] / (self.r[i] * self.r[j])
        });
        (rho, phi)
    }

    /// Energy per unit length (J/μm) at time t (ms) and positions z ∈ [0, 2L] (μm).
    pub fn energy_density(&self, t: f64, z: &[f64]) -> Vec<f64> {
        let (rho, phi) = self.moments(t);
        let norm = (1.0 / self.spec.length_um).sqrt();
        let kin = self.spec.stiffness();
        z.iter()
            .map(|&z| {
                let f = self.q.map(|q| norm * (q * z).cos());
                let df = self.q.map(|q| -norm * q * (q * z).sin());
                0.5 * self.spec.g * (&rho * &f).dot(&f) + 0.5 * kin * (&phi * &df).dot(&df)
            })
            .collect()
    }

    /// Total energy of the kept joint modes, J.
    pub fn total_energy(&self, t: f64) -> f64 {
        let (rho, phi) = self.moments(t);
        let kin = self.spec.stiffness();
        (0..self.q.len())
            .map(|i| 0.5 * self.spec.g * rho[(i, i)] + 0.5 * kin * self.q[i] * self.q[i] * phi[(i, i)])
            .sum()
    }

    /// Uniform energy density of one thermal half before the quench, J/μm.
    pub fn initial_bulk_density(&self, k_max: usize) -> f64 {
        let c = self.spec.speed_of_sound();
        let hbar = self.spec.constants.hbar_ms();
        let kt = self.spec.constants.thermal_energy(self.spec.temperature_nk);
        let l = self.spec.length_um;
        (1..=k_max)
            .map(|k| {
                let w = std::f64::consts::PI * c * k as f64 / l;
                0.5 * hbar * w / (hbar * w / (2.0 * kt)).tanh()
            })
            .sum::<f64>()
            / l
    }
}

/// Convenience wrapper over [`SuddenMerge`].
pub fn sudden_merge_energy_density(spec: &HomogeneousSpec, t: f64, z: &[f64], k_max: usize) -> Result<Vec<f64>> {
    let merge = SuddenMerge::new(spec, k_max)?;
    merge.check_truncation()?;
    Ok(merge.energy_density(t, z))
}

/// Normalized Gaussian smoothing of samples on a uniform grid; kernel weights
/// are renormalized near the ends.
pub fn gaussian_smooth(values: &[f64], spacing: f64, sigma: f64) -> Vec<f64> {
    let n = values.len();
    let reach = ((4.0 * sigma / spacing).ceil() as usize).max(1);
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(reach);
            let hi = (i + reach + 1).min(n);
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (j, v) in values.iter().enumerate().take(hi).skip(lo) {
                let d = (j as f64 - i as f64) * spacing / sigma;
                let w = (-0.5 * d * d).exp();
                acc += w * v;
                wsum += w;
            }
            acc / wsum
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> HomogeneousSpec {
        HomogeneousSpec::from_speed_of_sound(25.0, 100.0, 2.0, 50.0, 20).unwrap()
    }

    #[test]
    fn first_mode_frequency() {
        let s = HomogeneousSpec::from_speed_of_sound(50.0, 100.0, 2.0, 50.0, 3).unwrap();
        assert!((dispersion(&s)[0] - std::f64::consts::PI * 0.04).abs() < 1e-12);
    }

    #[test]
    fn gap_vanishes_with_j() {
        let a = zero_mode_gap(1e-8, &spec()).unwrap().omega0;
        let b = zero_mode_gap(1e-2, &spec()).unwrap().omega0;
        assert!(a < 1e-3 * b);
        assert!(zero_mode_gap(0.0, &spec()).is_err());
    }

    #[test]
    fn squeezing_decays_as_inverse_square() {
        let z = zero_mode_gap(0.01, &spec()).unwrap().zeta;
        assert!((z[0] / z[3] - 16.0).abs() < 1e-9);
    }

    #[test]
    fn evaporation_law() {
        assert_eq!(evaporative_scaling(50.0, 100.0, 100.0).unwrap(), 50.0);
        assert!((evaporative_scaling(1.0, 2.0, 1.0).unwrap() - 0.5f64.powf(1.5)).abs() < 1e-15);
    }

    #[test]
    fn overlap_integral_matches_quadrature() {
        let (a, phase, b, l) = (0.37, 0.9, 1.3, 4.0);
        let n = 20000;
        let h = l / n as f64;
        let num: f64 = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) * h;
                (a * u + phase).cos() * (b * u).cos() * h
            })
            .sum();
        assert!((num - cos_overlap(a, phase, b, l)).abs() < 1e-7);
    }

    #[test]
    fn merge_conserves_energy() {
        let m = SuddenMerge::new(&spec(), 40).unwrap();
        let e0 = m.total_energy(0.0);
        for t in [1.0, 3.7, 11.0] {
            assert!(((m.total_energy(t) - e0) / e0).abs() < 1e-12);
        }
    }
}
