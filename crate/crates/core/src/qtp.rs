//! Thermodynamic primitives: valve ramps, idle evolution, piston strokes and
//! energy diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{apply_symplectic, normal_modes, GaussianState, QuadraticHamiltonian, ZERO_MODE_TOL};
use crate::lattice::{discretize, scaled_hamiltonian, CouplingSpec, DensityProfile, InterfaceCoupling};
use crate::modal::ModalEngine;

/// Default largest Trotter step, ms.
pub const DEFAULT_DT_MAX: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct TrajectoryFrame {
    pub time: f64,
    pub state: GaussianState,
    pub ham: QuadraticHamiltonian,
    /// Energy per pixel, J.
    pub energy_density: DVector<f64>,
    /// Subsystem boundaries as pixel indices.
    pub labels: Vec<usize>,
}

impl TrajectoryFrame {
    pub fn new(time: f64, state: GaussianState, ham: QuadraticHamiltonian, labels: Vec<usize>) -> Result<Self> {
        let energy_density = energy_density(&state, &ham)?;
        Ok(Self { time, state, ham, energy_density, labels })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValveDirection {
    Merge,
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrotterScheme {
    /// Strang step: half free evolution of the decoupled parts, exact link
    /// kick at the midpoint weight, half free evolution. O(N²) per step.
    SplitStep,
    /// Exact exponential of the midpoint hamiltonian per step. O(N³) per step.
    ExactMidpoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeConfig {
    pub t_merge: f64,
    pub n_steps: usize,
    pub direction: ValveDirection,
    pub scheme: TrotterScheme,
}

impl MergeConfig {
    pub fn new(t_merge: f64, direction: ValveDirection) -> Self {
        Self { t_merge, n_steps: default_steps(t_merge, DEFAULT_DT_MAX), direction, scheme: TrotterScheme::SplitStep }
    }

    pub fn with_steps(self, n_steps: usize) -> Self {
        Self { n_steps, ..self }
    }

    pub fn with_scheme(self, scheme: TrotterScheme) -> Self {
        Self { scheme, ..self }
    }

    /// Link weight at the midpoint of step j (1-based).
    pub fn weight(&self, j: usize) -> f64 {
        let x = (j as f64 - 0.5) / self.n_steps as f64;
        match self.direction {
            ValveDirection::Merge => x,
            ValveDirection::Split => 1.0 - x,
        }
    }

    /// Link weight at time t within the ramp.
    pub fn weight_at(&self, t: f64) -> f64 {
        let x = if self.t_merge > 0.0 { (t / self.t_merge).clamp(0.0, 1.0) } else { 1.0 };
        match self.direction {
            ValveDirection::Merge => x,
            ValveDirection::Split => 1.0 - x,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.t_merge >= 0.0) {
            return Err(Error::InvalidInput(format!("t_merge must be non-negative, got {}", self.t_merge)));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidInput("n_steps must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn default_steps(duration: f64, dt_max: f64) -> usize {
    ((duration / dt_max).ceil() as usize).max(1)
}

/// Upper bound on the highest normal-mode frequency (rad/ms), from the
/// Gershgorin radius of the φ block.
pub fn frequency_bound(ham: &QuadraticHamiltonian) -> f64 {
    let rows = ham.h_phi.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    (ham.h_rho.max() * rows).sqrt() / (ham.constants.hbar_ms() * ham.dz)
}

/// Largest step for which the split-step valve stays stable (ω_max·Δt ≤ 1).
pub fn split_step_limit(ham: &QuadraticHamiltonian) -> f64 {
    1.0 / frequency_bound(ham)
}

/// E_z = ¼[(HΓ)_zz + (HΓ)_{z+N,z+N}] + ½X̄_z(HX̄)_z per pixel; sums to the total energy.
pub fn energy_density(state: &GaussianState, ham: &QuadraticHamiltonian) -> Result<DVector<f64>> {
    let n = ham.n_pixels();
    if state.n_pixels() != n {
        return Err(Error::Dimension(format!("state has {} pixels, hamiltonian {}", state.n_pixels(), n)));
    }
    let gpp = state.cov.view((n, n), (n, n));
    let xr = state.mean.rows(0, n);
    let xp = state.mean.rows(n, n);
    let hx = &ham.h_phi * xp;
    Ok(DVector::from_fn(n, |j, _| {
        let hg = ham.h_phi.row(j).dot(&gpp.column(j).transpose());
        0.25 * (ham.h_rho[j] * state.cov[(j, j)] + hg) + 0.5 * (ham.h_rho[j] * xr[j] * xr[j] + xp[j] * hx[j])
    }))
}

/// Identifies the single phase link by which two hamiltonians differ.
pub fn interface_between(
    uncoupled: &QuadraticHamiltonian,
    coupled: &QuadraticHamiltonian,
) -> Result<InterfaceCoupling> {
    let n = uncoupled.n_pixels();
    if coupled.n_pixels() != n {
        return Err(Error::Dimension("coupled and uncoupled hamiltonians differ in size".into()));
    }
    if ((uncoupled.dz - coupled.dz) / coupled.dz).abs() > 1e-12 {
        return Err(Error::Dimension("cutoff mismatch between hamiltonians".into()));
    }
    let scale = coupled.h_phi.amax();
    if (&uncoupled.h_rho - &coupled.h_rho).amax() > 1e-12 * coupled.h_rho.amax() {
        return Err(Error::InvalidInput("hamiltonians differ in the density block".into()));
    }
    let diff = &coupled.h_phi - &uncoupled.h_phi;
    let mut link = None;
    for i in 0..n.saturating_sub(1) {
        if diff[(i, i + 1)].abs() > 1e-12 * scale {
            if link.is_some() {
                return Err(Error::InvalidInput("hamiltonians differ by more than one interface link".into()));
            }
            link = Some(InterfaceCoupling { left: i, right: i + 1, strength: -diff[(i, i + 1)] });
        }
    }
    let link = link.ok_or_else(|| Error::InvalidInput("hamiltonians do not differ by an interface link".into()))?;
    let residual = diff - link.to_dense(n);
    if residual.amax() > 1e-9 * scale {
        return Err(Error::InvalidInput("hamiltonians differ by more than an interface link".into()));
    }
    Ok(link)
}

fn with_link(h: &QuadraticHamiltonian, link: &InterfaceCoupling, weight: f64) -> QuadraticHamiltonian {
    let mut out = h.clone();
    out.h_phi += link.to_dense(h.n_pixels()) * weight;
    out
}

/// Linear valve ramp between the decoupled and coupled hamiltonians.
pub fn ramp_valve(
    state: &GaussianState,
    h_uncoupled: &QuadraticHamiltonian,
    h_coupled: &QuadraticHamiltonian,
    cfg: &MergeConfig,
    frame_stride: usize,
) -> Result<Vec<TrajectoryFrame>> {
    cfg.validate()?;
    let link = interface_between(h_uncoupled, h_coupled)?;
    if ((state.dz - h_uncoupled.dz) / h_uncoupled.dz).abs() > 1e-12 || state.n_pixels() != h_uncoupled.n_pixels() {
        return Err(Error::Dimension("state and hamiltonians do not match".into()));
    }
    let stride = frame_stride.max(1);
    let labels = vec![link.right];
    let ham_at = |t: f64| with_link(h_uncoupled, &link, cfg.weight_at(t));
    let mut frames = vec![TrajectoryFrame::new(0.0, state.clone(), ham_at(0.0), labels.clone())?];
    if cfg.t_merge == 0.0 {
        return Ok(frames);
    }
    let n = cfg.n_steps;
    let dt = cfg.t_merge / n as f64;
    match cfg.scheme {
        TrotterScheme::SplitStep => {
            let limit = split_step_limit(h_coupled);
            if dt > limit {
                return Err(Error::InvalidInput(format!(
                    "split-step valve unstable at dt = {dt:.4} ms (limit {limit:.4} ms); use more steps"
                )));
            }
            let cut = link.right;
            let np = h_uncoupled.n_pixels();
            let mut engine = ModalEngine::new(
                state,
                vec![(0, h_uncoupled.restrict(0..cut)?), (cut, h_uncoupled.restrict(cut..np)?)],
            )?;
            for j in 1..=n {
                engine.drift(0.5 * dt);
                engine.kick(link.left, link.right, link.strength * cfg.weight(j), dt);
                engine.drift(0.5 * dt);
                if j % stride == 0 || j == n {
                    let t = j as f64 * dt;
                    frames.push(TrajectoryFrame::new(t, engine.state()?, ham_at(t), labels.clone())?);
                }
            }
        }
        TrotterScheme::ExactMidpoint => {
            let mut current = state.clone();
            for j in 1..=n {
                let h = with_link(h_uncoupled, &link, cfg.weight(j));
                let g = normal_modes(&h, ZERO_MODE_TOL)?.propagator(dt);
                current = apply_symplectic(&current, &g)?;
                if j % stride == 0 || j == n {
                    let t = j as f64 * dt;
                    frames.push(TrajectoryFrame::new(t, current.clone(), ham_at(t), labels.clone())?);
                }
            }
        }
    }
    Ok(frames)
}

/// Evolution under a fixed hamiltonian with a frame every `frame_interval` ms.
pub fn idle(
    state: &GaussianState,
    ham: &QuadraticHamiltonian,
    duration: f64,
    frame_interval: f64,
) -> Result<Vec<TrajectoryFrame>> {
    if !(duration >= 0.0) || !(frame_interval > 0.0) {
        return Err(Error::InvalidInput("duration must be ≥ 0 and frame interval > 0".into()));
    }
    let mut engine = ModalEngine::new(state, vec![(0, ham.clone())])?;
    let mut frames = vec![TrajectoryFrame::new(0.0, state.clone(), ham.clone(), vec![])?];
    let mut t = 0.0;
    while t < duration - 1e-12 {
        let step = frame_interval.min(duration - t);
        engine.drift(step);
        t += step;
        frames.push(TrajectoryFrame::new(t, engine.state()?, ham.clone(), vec![])?);
    }
    Ok(frames)
}

/// Removes all correlations between pixels below and above `cut`.
pub fn decorrelate(state: &GaussianState, cut: usize) -> Result<GaussianState> {
    let n = state.n_pixels();
    if cut == 0 || cut >= n {
        return Err(Error::InvalidInput(format!("cut {cut} must lie in (0, {n})")));
    }
    let side = |i: usize| (i % n) < cut;
    let cov = DMatrix::from_fn(2 * n, 2 * n, |i, j| if side(i) == side(j) { state.cov[(i, j)] } else { 0.0 });
    GaussianState::new(cov, state.mean.clone(), state.dz)
}

/// Maps a physical state of a segment compressed by λ = L₀/L to the
/// reference variables ν = δρ/λ on the uncompressed lattice.
pub fn to_reference_frame(state: &GaussianState, lambda: f64) -> Result<GaussianState> {
    rescale_density(state, 1.0 / lambda, state.dz * lambda)
}

/// Inverse of [`to_reference_frame`].
pub fn to_physical_frame(state: &GaussianState, lambda: f64) -> Result<GaussianState> {
    rescale_density(state, lambda, state.dz / lambda)
}

fn rescale_density(state: &GaussianState, f: f64, dz: f64) -> Result<GaussianState> {
    let n = state.n_pixels();
    let s = |i: usize| if i < n { f } else { 1.0 };
    let cov = DMatrix::from_fn(2 * n, 2 * n, |i, j| state.cov[(i, j)] * s(i) * s(j));
    let mean = DVector::from_fn(2 * n, |i, _| state.mean[i] * s(i));
    GaussianState::new(cov, mean, dz)
}

/// Compression factor λ(t) = L₀/L(t) for a length ramp linear in time.
pub fn stroke_lambda(length_ratio: f64, t: f64, t_total: f64) -> f64 {
    1.0 / (1.0 + (length_ratio - 1.0) * (t / t_total).clamp(0.0, 1.0))
}

/// Piston stroke changing the length of a homogeneous system by `length_ratio`
/// (final/initial) linearly over `t_comp` ms, with the hamiltonian sampled at
/// step midpoints. Frames carry physical states on the rescaled lattice.
pub fn compress(
    state: &GaussianState,
    profile: &DensityProfile,
    coupling: &CouplingSpec,
    length_ratio: f64,
    t_comp: f64,
    n_steps: usize,
    frame_stride: usize,
) -> Result<Vec<TrajectoryFrame>> {
    if !(length_ratio > 0.0) || !(t_comp > 0.0) || n_steps == 0 {
        return Err(Error::InvalidInput("compress needs length_ratio > 0, t_comp > 0 and n_steps ≥ 1".into()));
    }
    if !profile.is_homogeneous() || !coupling.is_uniform_j() {
        return Err(Error::InvalidInput("compression requires a homogeneous profile and uniform J".into()));
    }
    if state.n_pixels() != profile.n_pixels() || ((state.dz - profile.dz) / profile.dz).abs() > 1e-12 {
        return Err(Error::Dimension("state does not match the profile".into()));
    }
    let stride = frame_stride.max(1);
    let physical =
        |lambda: f64| -> Result<QuadraticHamiltonian> { discretize(&profile.rescaled(1.0 / lambda)?, coupling) };
    let mut engine = ModalEngine::new(state, vec![(0, scaled_hamiltonian(profile, coupling, 1.0)?)])?;
    let mut frames = vec![TrajectoryFrame::new(0.0, state.clone(), physical(1.0)?, vec![])?];
    let dt = t_comp / n_steps as f64;
    for j in 1..=n_steps {
        let lam_mid = stroke_lambda(length_ratio, (j as f64 - 0.5) * dt, t_comp);
        engine.set_block_same_basis(0, &scaled_hamiltonian(profile, coupling, lam_mid)?)?;
        engine.drift(dt);
        if j % stride == 0 || j == n_steps {
            let t = j as f64 * dt;
            let lam = stroke_lambda(length_ratio, t, t_comp);
            let s = to_physical_frame(&engine.state()?, lam)?;
            frames.push(TrajectoryFrame::new(t, s, physical(lam)?, vec![])?);
        }
    }
    Ok(frames)
}

/// ⟨φ₀²(t)⟩ = ⟨φ₀²⟩ + (g·t/ħ)²⟨δρ₀²⟩ for free phase diffusion of the zero mode;
/// g in J·μm, t in ms, δρ₀ variance in (atoms/μm)².
pub fn zero_mode_diffusion(phi0_var: f64, rho0_var: f64, g: f64, hbar: f64, t: f64) -> Result<f64> {
    if phi0_var < 0.0 || rho0_var < 0.0 {
        return Err(Error::InvalidInput("variances must be non-negative".into()));
    }
    let x = g * t * 1e-3 / hbar;
    Ok(phi0_var + x * x * rho0_var)
}
