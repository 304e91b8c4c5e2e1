//! Density profiles and their discretized phonon hamiltonians.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::gaussian::{PhysicalConstants, QuadraticHamiltonian};

#[derive(Clone, Debug, PartialEq)]
pub struct DensityProfile {
    /// Mean density per pixel, atoms/μm.
    pub rho: DVector<f64>,
    /// Pixel width, μm.
    pub dz: f64,
    /// Left edge of the first pixel, μm.
    pub origin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Homogeneous,
    ErfBox,
    Trapeze,
}

impl DensityProfile {
    pub fn new(rho: DVector<f64>, dz: f64, origin: f64) -> Result<Self> {
        if rho.len() < 2 {
            return Err(Error::InvalidInput("profile needs at least 2 pixels".into()));
        }
        if !(dz > 0.0) {
            return Err(Error::InvalidInput(format!("dz must be positive, got {dz}")));
        }
        if let Some(bad) = rho.iter().find(|&&r| !(r > 0.0)) {
            return Err(Error::InvalidInput(format!("density must be positive everywhere, found {bad}")));
        }
        Ok(Self { rho, dz, origin })
    }

    pub fn n_pixels(&self) -> usize {
        self.rho.len()
    }

    pub fn length(&self) -> f64 {
        self.dz * self.n_pixels() as f64
    }

    pub fn pixel_center(&self, i: usize) -> f64 {
        self.origin + (i as f64 + 0.5) * self.dz
    }

    pub fn peak(&self) -> f64 {
        self.rho.max()
    }

    pub fn is_homogeneous(&self) -> bool {
        let (lo, hi) = (self.rho.min(), self.rho.max());
        hi - lo <= 1e-12 * hi
    }

    /// Profile after changing the length by `ratio` at fixed atom number:
    /// densities scale by 1/ratio, pixel width by ratio.
    pub fn rescaled(&self, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0) {
            return Err(Error::InvalidInput(format!("length ratio must be positive, got {ratio}")));
        }
        Self::new(&self.rho / ratio, self.dz * ratio, self.origin)
    }

    /// Indices of the first and last pixel at or above `fraction` of the peak.
    pub fn bulk_span(&self, fraction: f64) -> std::ops::Range<usize> {
        let thr = fraction * self.peak();
        let first = self.rho.iter().position(|&r| r >= thr).unwrap_or(0);
        let last = self.rho.iter().rposition(|&r| r >= thr).unwrap_or(self.n_pixels() - 1);
        first..last + 1
    }
}

pub fn build_profile(
    kind: ProfileKind,
    length: f64,
    peak_density: f64,
    edge_width: f64,
    edge_floor: f64,
    dz: f64,
) -> Result<DensityProfile> {
    if !(dz > 0.0) || !(length >= 4.0 * dz) {
        return Err(Error::InvalidInput(format!("length {length} μm must be at least 4·dz (dz = {dz})")));
    }
    if !(edge_floor > 0.0 && edge_floor <= 1.0) {
        return Err(Error::InvalidInput(format!("edge_floor must lie in (0, 1], got {edge_floor}")));
    }
    if !(peak_density > 0.0) {
        return Err(Error::InvalidInput(format!("peak density must be positive, got {peak_density}")));
    }
    if edge_width < 0.0 {
        return Err(Error::InvalidInput(format!("edge width must be non-negative, got {edge_width}")));
    }
    let n = (length / dz).round() as usize;
    let l = n as f64 * dz;
    let w = edge_width;
    let shape = |z: f64| -> f64 {
        match kind {
            ProfileKind::Homogeneous => 1.0,
            _ if w == 0.0 => 1.0,
            ProfileKind::ErfBox => {
                let s = w / 4.0;
                0.5 * (erf((z - 0.5 * w) / s) + erf((l - z - 0.5 * w) / s))
            }
            ProfileKind::Trapeze => (z / w).min((l - z) / w).min(1.0),
        }
        .clamp(0.0, 1.0)
    };
    let rho = DVector::from_fn(n, |i, _| {
        let z = (i as f64 + 0.5) * dz;
        peak_density * (edge_floor + (1.0 - edge_floor) * shape(z))
    });
    DensityProfile::new(rho, dz, 0.0)
}

pub fn glue_profiles(a: &DensityProfile, b: &DensityProfile) -> Result<DensityProfile> {
    if ((a.dz - b.dz) / a.dz).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "cutoff mismatch: {} μm vs {} μm (inconsistent momentum cutoffs)",
            a.dz, b.dz
        )));
    }
    let rho = DVector::from_iterator(a.n_pixels() + b.n_pixels(), a.rho.iter().chain(b.rho.iter()).copied());
    DensityProfile::new(rho, a.dz, a.origin)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GMode {
    /// g = m·c²/ρ_ref with c in μm/ms and ρ_ref in atoms/μm.
    SpeedOfSound { speed_um_per_ms: f64, reference_density: f64 },
    /// g(ρ) = ħω⊥·a_s(2 + 3a_sρ)/(1 + 2a_sρ)^{3/2}.
    Transversal { omega_perp_rad_per_ms: f64, scattering_length_um: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JProfile {
    Constant(f64),
    PerPixel(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingSpec {
    pub g_mode: GMode,
    pub j_profile: JProfile,
    pub constants: PhysicalConstants,
}

impl CouplingSpec {
    pub fn from_speed_of_sound(speed_um_per_ms: f64, reference_density: f64, j_hz: f64) -> Self {
        Self {
            g_mode: GMode::SpeedOfSound { speed_um_per_ms, reference_density },
            j_profile: JProfile::Constant(j_hz),
            constants: PhysicalConstants::default(),
        }
    }

    pub fn with_j(&self, j_profile: JProfile) -> Self {
        Self { j_profile, ..self.clone() }
    }

    /// Interaction constant in J·μm at density ρ.
    pub fn g(&self, rho: f64) -> f64 {
        match self.g_mode {
            GMode::SpeedOfSound { speed_um_per_ms, reference_density } => {
                self.constants.rest_energy(speed_um_per_ms) / reference_density
            }
            GMode::Transversal { omega_perp_rad_per_ms, scattering_length_um } => {
                let a = scattering_length_um;
                self.constants.quantum(omega_perp_rad_per_ms) * a * (2.0 + 3.0 * a * rho)
                    / (1.0 + 2.0 * a * rho).powf(1.5)
            }
        }
    }

    pub fn j(&self, i: usize, n: usize) -> Result<f64> {
        match &self.j_profile {
            JProfile::Constant(j) => Ok(*j),
            JProfile::PerPixel(v) if v.len() == n => Ok(v[i]),
            JProfile::PerPixel(v) => {
                Err(Error::Dimension(format!("J profile has {} entries for {} pixels", v.len(), n)))
            }
        }
    }

    pub fn is_uniform_j(&self) -> bool {
        match &self.j_profile {
            JProfile::Constant(_) => true,
            JProfile::PerPixel(v) => v.windows(2).all(|w| w[0] == w[1]),
        }
    }

    /// c = √(gρ/m) in μm/ms.
    pub fn speed_of_sound(&self, rho: f64) -> f64 {
        (self.g(rho) * rho / self.constants.atom_mass).sqrt() * 1e3
    }

    /// ξ_h = ħ/(mc) in μm.
    pub fn healing_length(&self, rho: f64) -> f64 {
        let c_si = self.speed_of_sound(rho) * 1e-3;
        self.constants.hbar / (self.constants.atom_mass * c_si) * 1e6
    }

    fn validate(&self, n: usize) -> Result<()> {
        for i in 0..n {
            let j = self.j(i, n)?;
            if !(j >= 0.0) {
                return Err(Error::InvalidInput(format!("J must be non-negative, found {j}")));
            }
        }
        Ok(())
    }
}

/// Phase-link coefficient ħ²√(ρ_aρ_b)/(m·Δ) between two pixel centres a distance Δ apart.
pub fn link_strength(constants: &PhysicalConstants, rho_a: f64, rho_b: f64, distance: f64) -> f64 {
    constants.kinetic_scale() * (rho_a * rho_b).sqrt() / distance
}

pub fn discretize(profile: &DensityProfile, coupling: &CouplingSpec) -> Result<QuadraticHamiltonian> {
    let n = profile.n_pixels();
    coupling.validate(n)?;
    let dz = profile.dz;
    let c = &coupling.constants;
    let h_rho = DVector::from_fn(n, |i, _| dz * coupling.g(profile.rho[i]));
    if let Some(bad) = h_rho.iter().find(|&&h| !(h > 0.0)) {
        return Err(Error::InvalidInput(format!("g must be positive, found h_rho {bad}")));
    }
    let mut h_phi = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        let k = link_strength(c, profile.rho[i], profile.rho[i + 1], dz);
        h_phi[(i, i)] += k;
        h_phi[(i + 1, i + 1)] += k;
        h_phi[(i, i + 1)] = -k;
        h_phi[(i + 1, i)] = -k;
    }
    for i in 0..n {
        h_phi[(i, i)] += 2.0 * PI * c.hbar * coupling.j(i, n)? * dz * profile.rho[i];
    }
    QuadraticHamiltonian::new(h_rho, h_phi, dz, *c)
}

/// The four-entry phase coupling across a cut: strength·(e_l − e_r)(e_l − e_r)ᵀ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterfaceCoupling {
    pub left: usize,
    pub right: usize,
    pub strength: f64,
}

impl InterfaceCoupling {
    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        m[(self.left, self.left)] = self.strength;
        m[(self.right, self.right)] = self.strength;
        m[(self.left, self.right)] = -self.strength;
        m[(self.right, self.left)] = -self.strength;
        m
    }
}

/// Splits a joint hamiltonian at `cut` into H_A, H_B and the coupling with H_AB = H_A ⊕ H_B + H_int.
pub fn split_hamiltonian(
    joint: &QuadraticHamiltonian,
    cut: usize,
) -> Result<(QuadraticHamiltonian, QuadraticHamiltonian, InterfaceCoupling)> {
    let n = joint.n_pixels();
    if cut == 0 || cut >= n {
        return Err(Error::InvalidInput(format!("cut {cut} must lie in (0, {n})")));
    }
    let coupling = InterfaceCoupling { left: cut - 1, right: cut, strength: -joint.h_phi[(cut - 1, cut)] };
    let decoupled = decouple(joint, &coupling)?;
    Ok((decoupled.restrict(0..cut)?, decoupled.restrict(cut..n)?, coupling))
}

/// H_{A|B} = H_AB − H_int as a full-size matrix.
pub fn decouple(joint: &QuadraticHamiltonian, coupling: &InterfaceCoupling) -> Result<QuadraticHamiltonian> {
    let mut h = joint.clone();
    let (l, r, s) = (coupling.left, coupling.right, coupling.strength);
    h.h_phi[(l, l)] -= s;
    h.h_phi[(r, r)] -= s;
    h.h_phi[(l, r)] += s;
    h.h_phi[(r, l)] += s;
    Ok(h)
}

/// Hamiltonian of a profile compressed to length ratio 1/λ, expressed in the
/// reference frame of the uncompressed lattice.
///
/// The reference variable ν = δρ/λ keeps the pixel atom number and the
/// commutator [ν_i, φ_j] = iδ_ij/Δz₀ fixed, so the physical hamiltonian on the
/// rescaled lattice (density λρ, width Δz₀/λ) maps to H_ρρ·λ² with Δz₀.
pub fn scaled_hamiltonian(
    profile: &DensityProfile,
    coupling: &CouplingSpec,
    lambda: f64,
) -> Result<QuadraticHamiltonian> {
    let actual = profile.rescaled(1.0 / lambda)?;
    let mut h = discretize(&actual, coupling)?;
    h.h_rho *= lambda * lambda;
    h.dz = profile.dz;
    Ok(h)
}

/// One piece of a chain in the shared reference frame.
#[derive(Clone, Debug)]
pub struct ChainSegment<'a> {
    pub profile: &'a DensityProfile,
    pub coupling: &'a CouplingSpec,
    /// Compression factor L₀/L of this segment.
    pub lambda: f64,
}

/// Chain hamiltonian in the reference frame with interface links weighted by
/// `link_weights` (one per adjacent pair; 0 = decoupled, 1 = fully merged).
pub fn chain_hamiltonian(segments: &[ChainSegment], link_weights: &[f64]) -> Result<QuadraticHamiltonian> {
    if segments.is_empty() {
        return Err(Error::InvalidInput("empty chain".into()));
    }
    if link_weights.len() + 1 != segments.len() {
        return Err(Error::Dimension(format!("{} segments need {} link weights", segments.len(), segments.len() - 1)));
    }
    let dz0 = segments[0].profile.dz;
    if segments.iter().any(|s| ((s.profile.dz - dz0) / dz0).abs() > 1e-12) {
        return Err(Error::InvalidInput("chain segments must share the reference cutoff".into()));
    }
    let n: usize = segments.iter().map(|s| s.profile.n_pixels()).sum();
    let constants = segments[0].coupling.constants;
    let mut h_rho = DVector::zeros(n);
    let mut h_phi = DMatrix::zeros(n, n);
    let mut offset = 0;
    for seg in segments {
        let h = scaled_hamiltonian(seg.profile, seg.coupling, seg.lambda)?;
        let m = h.n_pixels();
        h_rho.rows_mut(offset, m).copy_from(&h.h_rho);
        h_phi.view_mut((offset, offset), (m, m)).copy_from(&h.h_phi);
        offset += m;
    }
    let mut boundary = 0;
    for (k, pair) in segments.windows(2).enumerate() {
        boundary += pair[0].profile.n_pixels();
        let w = link_weights[k];
        if w != 0.0 {
            let s = w * chain_link_strength(&pair[0], &pair[1]);
            let (l, r) = (boundary - 1, boundary);
            h_phi[(l, l)] += s;
            h_phi[(r, r)] += s;
            h_phi[(l, r)] -= s;
            h_phi[(r, l)] -= s;
        }
    }
    QuadraticHamiltonian::new(h_rho, h_phi, dz0, constants)
}

/// Strength of the link between segment `k` and `k+1` at full weight.
pub fn chain_link_strength(left: &ChainSegment, right: &ChainSegment) -> f64 {
    let dz0 = left.profile.dz;
    let rho_a = left.profile.rho[left.profile.n_pixels() - 1] * left.lambda;
    let rho_b = right.profile.rho[0] * right.lambda;
    link_strength(&left.coupling.constants, rho_a, rho_b, 0.5 * (dz0 / left.lambda + dz0 / right.lambda))
}
