//! Bosonic Gaussian states on a lattice of N pixels.
//!
//! Quadratures are ordered X = (δρ₁…δρ_N, φ₁…φ_N) with δρ in atoms/μm and φ
//! dimensionless. They obey [X_j, X_k] = iΩ_jk/Δz, so Δz·Γ is the covariance
//! in canonical units. The Hamiltonian is Ĥ = ½XᵀHX and generates
//! dX/dt = ΩHX/(ħΔz).

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HBAR: f64 = 1.054571817e-34;
pub const K_B: f64 = 1.380649e-23;
pub const RB87_MASS: f64 = 1.44316060e-25;

/// Relative tolerance on the symmetry of Γ.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Slack allowed below 1 for symplectic eigenvalues.
pub const CONE_TOL: f64 = 1e-8;
/// Bound on ‖GΩGᵀ − Ω‖_max for propagators.
pub const SYMPLECTIC_TOL: f64 = 1e-9;
/// Default relative threshold for zero-mode classification.
pub const ZERO_MODE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub hbar: f64,
    pub k_b: f64,
    pub atom_mass: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self { hbar: HBAR, k_b: K_B, atom_mass: RB87_MASS }
    }
}

impl PhysicalConstants {
    pub fn new(hbar: f64, k_b: f64, atom_mass: f64) -> Result<Self> {
        if !(hbar > 0.0 && k_b > 0.0 && atom_mass > 0.0) {
            return Err(Error::InvalidInput("physical constants must be positive".into()));
        }
        Ok(Self { hbar, k_b, atom_mass })
    }

    /// ħ in J·ms, so that energy/ħ_ms is in rad/ms.
    pub fn hbar_ms(&self) -> f64 {
        self.hbar * 1e3
    }

    /// k_B·T in J for T in nK.
    pub fn thermal_energy(&self, temperature_nk: f64) -> f64 {
        self.k_b * temperature_nk * 1e-9
    }

    /// ħ²/m in J·μm².
    pub fn kinetic_scale(&self) -> f64 {
        self.hbar * self.hbar / self.atom_mass * 1e12
    }

    /// m·c² in J for c in μm/ms.
    pub fn rest_energy(&self, speed_um_per_ms: f64) -> f64 {
        let c = speed_um_per_ms * 1e-3;
        self.atom_mass * c * c
    }

    /// ħω in J for ω in rad/ms.
    pub fn quantum(&self, omega_rad_per_ms: f64) -> f64 {
        self.hbar_ms() * omega_rad_per_ms
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    pub cov: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub dz: f64,
}

impl GaussianState {
    pub fn new(cov: DMatrix<f64>, mean: DVector<f64>, dz: f64) -> Result<Self> {
        let n2 = cov.nrows();
        if cov.ncols() != n2 || !n2.is_multiple_of(2) || n2 < 4 {
            return Err(Error::Dimension(format!("covariance must be 2N×2N with N ≥ 2, got {}×{}", n2, cov.ncols())));
        }
        if mean.len() != n2 {
            return Err(Error::Dimension(format!("mean has length {}, expected {}", mean.len(), n2)));
        }
        if !(dz > 0.0) {
            return Err(Error::InvalidInput(format!("dz must be positive, got {dz}")));
        }
        check_symmetric(&cov)?;
        Ok(Self { cov, mean, dz })
    }

    /// Vacuum-like state with Δz·Γ = I.
    pub fn canonical_vacuum(n_pixels: usize, dz: f64) -> Result<Self> {
        let n2 = 2 * n_pixels;
        Self::new(DMatrix::identity(n2, n2) / dz, DVector::zeros(n2), dz)
    }

    pub fn n_pixels(&self) -> usize {
        self.cov.nrows() / 2
    }

    /// Errors if any symplectic eigenvalue lies below 1 − CONE_TOL.
    pub fn check_cone(&self) -> Result<()> {
        let d = symplectic_eigenvalues(self)?;
        let d_min = d.first().copied().unwrap_or(1.0);
        if d_min < 1.0 - CONE_TOL {
            return Err(Error::Invariant(format!("Heisenberg cone breached: smallest symplectic eigenvalue {d_min}")));
        }
        Ok(())
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::InvalidInput(format!("matrix not symmetric (relative asymmetry {:.3e})", asym / scale)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticHamiltonian {
    pub h_rho: DVector<f64>,
    pub h_phi: DMatrix<f64>,
    pub dz: f64,
    pub constants: PhysicalConstants,
}

impl QuadraticHamiltonian {
    pub fn new(h_rho: DVector<f64>, h_phi: DMatrix<f64>, dz: f64, constants: PhysicalConstants) -> Result<Self> {
        let n = h_rho.len();
        if h_phi.nrows() != n || h_phi.ncols() != n {
            return Err(Error::Dimension(format!("h_phi must be {n}×{n}")));
        }
        if n < 1 {
            return Err(Error::Dimension("empty hamiltonian".into()));
        }
        if let Some(bad) = h_rho.iter().find(|&&h| !(h > 0.0)) {
            return Err(Error::InvalidInput(format!("h_rho entries must be positive, found {bad}")));
        }
        if !(dz > 0.0) {
            return Err(Error::InvalidInput(format!("dz must be positive, got {dz}")));
        }
        check_symmetric(&h_phi)?;
        Ok(Self { h_rho, h_phi, dz, constants })
    }

    pub fn n_pixels(&self) -> usize {
        self.h_rho.len()
    }

    /// Full 2N×2N matrix H = H_ρρ ⊕ H_φφ.
    pub fn full_matrix(&self) -> DMatrix<f64> {
        let n = self.n_pixels();
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            h[(i, i)] = self.h_rho[i];
        }
        h.view_mut((n, n), (n, n)).copy_from(&self.h_phi);
        h
    }

    /// Generator A with dX/dt = A X, in 1/ms.
    pub fn generator(&self) -> DMatrix<f64> {
        symplectic_form(self.n_pixels()) * self.full_matrix() / (self.constants.hbar_ms() * self.dz)
    }

    /// Principal sub-hamiltonian on a pixel range.
    pub fn restrict(&self, range: Range<usize>) -> Result<Self> {
        let len = range.len();
        Self::new(
            self.h_rho.rows(range.start, len).into_owned(),
            self.h_phi.view((range.start, range.start), (len, len)).into_owned(),
            self.dz,
            self.constants,
        )
    }

    fn check_state(&self, state: &GaussianState) -> Result<()> {
        if state.n_pixels() != self.n_pixels() {
            return Err(Error::Dimension(format!(
                "state has {} pixels, hamiltonian {}",
                state.n_pixels(),
                self.n_pixels()
            )));
        }
        if ((state.dz - self.dz) / self.dz).abs() > 1e-12 {
            return Err(Error::Dimension(format!(
                "cutoff mismatch: state dz {} vs hamiltonian dz {}",
                state.dz, self.dz
            )));
        }
        Ok(())
    }
}

pub fn symplectic_form(n_pixels: usize) -> DMatrix<f64> {
    let n = n_pixels;
    let mut om = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        om[(i, n + i)] = 1.0;
        om[(n + i, i)] = -1.0;
    }
    om
}

/// ‖GΩGᵀ − Ω‖_max after a symplectic diagonal rebalancing of the ρ and φ blocks,
/// which removes the unit dependence of the check.
pub fn symplectic_defect(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows() / 2;
    let rf = g.view((0, n), (n, n)).amax();
    let fr = g.view((n, 0), (n, n)).amax();
    let t = if rf > 0.0 && fr > 0.0 { (fr / rf).sqrt().sqrt() } else { 1.0 };
    let mut b = g.clone();
    for i in 0..n {
        for j in 0..n {
            b[(i, n + j)] *= t * t;
            b[(n + i, j)] /= t * t;
        }
    }
    let om = symplectic_form(n);
    (&b * &om * b.transpose() - om).amax()
}

/// Relative residual accepted from the symmetric eigensolver.
const EIGEN_RESIDUAL_TOL: f64 = 1e-11;

/// Eigendecomposition of a symmetric positive semidefinite matrix, eigenvalues
/// ascending.
///
/// The QR iteration in `SymmetricEigen` occasionally stops on a wrong
/// decomposition of badly scaled covariances, so the residual is checked and
/// the solve retried on the index-reversed matrix, then through the SVD
/// (which coincides with the eigendecomposition for PSD input).
pub(crate) fn sorted_eigen(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let residual =
        |vals: &DVector<f64>, vecs: &DMatrix<f64>| (&m * vecs - vecs * DMatrix::from_diagonal(vals)).amax() / scale;

    let eig = SymmetricEigen::new(m.clone());
    let (mut vals, mut vecs) = (eig.eigenvalues, eig.eigenvectors);
    let mut best = residual(&vals, &vecs);
    if best > EIGEN_RESIDUAL_TOL {
        let rev = |i: usize| n - 1 - i;
        let eig = SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| m[(rev(i), rev(j))]));
        let q = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(rev(i), j)]);
        let r = residual(&eig.eigenvalues, &q);
        if r < best {
            (vals, vecs, best) = (eig.eigenvalues, q, r);
        }
    }
    if best > EIGEN_RESIDUAL_TOL {
        let svd = m.clone().svd(true, false);
        if let Some(u) = svd.u {
            if residual(&svd.singular_values, &u) < best {
                (vals, vecs) = (svd.singular_values, u);
            }
        }
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let sorted = DVector::from_iterator(n, idx.iter().map(|&i| vals[i]));
    let mut cols = DMatrix::zeros(n, n);
    for (k, &i) in idx.iter().enumerate() {
        cols.set_column(k, &vecs.column(i));
    }
    (sorted, cols)
}

/// Ratio t applied as x_ρ → t·x_ρ, x_φ → x_φ/t; symplectic, balances block scales.
fn balance_factor(v: &DMatrix<f64>) -> f64 {
    let n = v.nrows() / 2;
    let a: f64 = (0..n).map(|i| v[(i, i)].abs()).sum();
    let b: f64 = (n..2 * n).map(|i| v[(i, i)].abs()).sum();
    if a > 0.0 && b > 0.0 {
        (b / a).sqrt().sqrt()
    } else {
        1.0
    }
}

fn apply_balance(v: &mut DMatrix<f64>, t: f64) {
    let n = v.nrows() / 2;
    for j in 0..2 * n {
        for i in 0..2 * n {
            let fi = if i < n { t } else { 1.0 / t };
            let fj = if j < n { t } else { 1.0 / t };
            v[(i, j)] *= fi * fj;
        }
    }
}

/// Spectral data of a canonical covariance V: W = V^{1/2}, and the
/// eigen decomposition of KᵀK with K = WΩW, whose eigenvalues are the squared
/// symplectic eigenvalues, each appearing twice.
struct SymplecticSpectrum {
    w_inv: DMatrix<f64>,
    d2: DVector<f64>,
    u: DMatrix<f64>,
}

fn symplectic_spectrum(v: &DMatrix<f64>, need_inverse: bool) -> Result<SymplecticSpectrum> {
    let n2 = v.nrows();
    let (e, q) = sorted_eigen(v.clone());
    let e_max = e[n2 - 1].abs().max(f64::MIN_POSITIVE);
    if e[0] < -1e-9 * e_max {
        return Err(Error::Invariant(format!("covariance not positive semidefinite (eigenvalue {:.3e})", e[0])));
    }
    let sq: Vec<f64> = e.iter().map(|&x| x.max(0.0).sqrt()).collect();
    let w = &q * DMatrix::from_diagonal(&DVector::from_vec(sq.clone())) * q.transpose();
    let w_inv = if need_inverse {
        if sq[0] <= 0.0 {
            return Err(Error::NotFaithful(0.0));
        }
        let inv = DVector::from_iterator(n2, sq.iter().map(|x| 1.0 / x));
        &q * DMatrix::from_diagonal(&inv) * q.transpose()
    } else {
        DMatrix::zeros(0, 0)
    };
    let om = symplectic_form(n2 / 2);
    let k = &w * om * &w;
    let ktk = k.transpose() * &k;
    let ktk = (&ktk + ktk.transpose()) * 0.5;
    let (d2, u) = sorted_eigen(ktk);
    Ok(SymplecticSpectrum { w_inv, d2, u })
}

fn canonical(state: &GaussianState) -> (DMatrix<f64>, f64) {
    let mut v = &state.cov * state.dz;
    let t = balance_factor(&v);
    apply_balance(&mut v, t);
    (v, t)
}

/// Ascending symplectic eigenvalues of Δz·Γ.
pub fn symplectic_eigenvalues(state: &GaussianState) -> Result<Vec<f64>> {
    check_symmetric(&state.cov)?;
    let (v, _) = canonical(state);
    let spec = symplectic_spectrum(&v, false)?;
    Ok(pair_values(&spec.d2))
}

fn pair_values(d2: &DVector<f64>) -> Vec<f64> {
    (0..d2.len() / 2).map(|k| (0.5 * (d2[2 * k] + d2[2 * k + 1])).max(0.0).sqrt()).collect()
}

/// Entropy of one mode with symplectic eigenvalue d.
pub fn mode_entropy(d: f64) -> Result<f64> {
    if d < 1.0 - 1e-6 {
        return Err(Error::Invariant(format!("symplectic eigenvalue {d} below 1")));
    }
    let x = ((d - 1.0) / 2.0).max(0.0);
    if x == 0.0 {
        return Ok(0.0);
    }
    if d - 1.0 < 1e-7 {
        return Ok(x - x * x.ln() + 0.5 * x * x);
    }
    Ok((1.0 + x) * (1.0 + x).ln() - x * x.ln())
}

pub fn von_neumann_entropy(state: &GaussianState) -> Result<f64> {
    symplectic_eigenvalues(state)?.into_iter().map(mode_entropy).sum()
}

pub fn reduced_state(state: &GaussianState, pixels: Range<usize>) -> Result<GaussianState> {
    let n = state.n_pixels();
    if pixels.is_empty() || pixels.end > n {
        return Err(Error::InvalidInput(format!("pixel range {:?} invalid for {} pixels", pixels, n)));
    }
    let idx: Vec<usize> = pixels.clone().chain(pixels.clone().map(|i| i + n)).collect();
    let m = idx.len();
    let cov = DMatrix::from_fn(m, m, |i, j| state.cov[(idx[i], idx[j])]);
    let mean = DVector::from_fn(m, |i, _| state.mean[idx[i]]);
    GaussianState::new(cov, mean, state.dz)
}

/// Reduced state on an arbitrary ordered set of pixels.
pub fn reduced_state_on(state: &GaussianState, pixels: &[usize]) -> Result<GaussianState> {
    let n = state.n_pixels();
    if pixels.is_empty() || pixels.iter().any(|&p| p >= n) {
        return Err(Error::InvalidInput(format!("pixel selection invalid for {n} pixels")));
    }
    let idx: Vec<usize> = pixels.iter().copied().chain(pixels.iter().map(|i| i + n)).collect();
    let m = idx.len();
    let cov = DMatrix::from_fn(m, m, |i, j| state.cov[(idx[i], idx[j])]);
    let mean = DVector::from_fn(m, |i, _| state.mean[idx[i]]);
    GaussianState::new(cov, mean, state.dz)
}

pub fn mutual_information(state: &GaussianState, cut: usize) -> Result<f64> {
    let n = state.n_pixels();
    if cut == 0 || cut >= n {
        return Err(Error::InvalidInput(format!("cut {cut} must lie in (0, {n})")));
    }
    // A product state has no mutual information; skip the entropy round-off.
    let side = |i: usize| (i % n) < cut;
    let product = (0..2 * n).all(|i| (0..2 * n).all(|j| side(i) == side(j) || state.cov[(i, j)] == 0.0));
    if product {
        return Ok(0.0);
    }
    let a = von_neumann_entropy(&reduced_state(state, 0..cut)?)?;
    let b = von_neumann_entropy(&reduced_state(state, cut..n)?)?;
    let ab = von_neumann_entropy(state)?;
    Ok(a + b - ab)
}

/// S(ρ‖σ) for Gaussian states from covariances and means.
///
/// With V = Δz·Γ in canonical units, σ ∝ exp(−½xᵀH_σx) where
/// H_σ = W⁻¹ψ(KᵀK)W⁻¹, ψ(y) = 2√y·arcoth(√y), W = V_σ^{1/2}, K = WΩW.
pub fn relative_entropy(state: &GaussianState, reference: &GaussianState) -> Result<f64> {
    if state.n_pixels() != reference.n_pixels() {
        return Err(Error::Dimension("states have different pixel counts".into()));
    }
    if ((state.dz - reference.dz) / reference.dz).abs() > 1e-12 {
        return Err(Error::Dimension("states have different cutoffs".into()));
    }
    check_symmetric(&state.cov)?;
    check_symmetric(&reference.cov)?;
    let (vs, t) = canonical(reference);
    let mut vr = &state.cov * state.dz;
    apply_balance(&mut vr, t);
    let n = state.n_pixels();
    let scale = state.dz.sqrt();
    let delta = DVector::from_fn(2 * n, |i, _| {
        let f = if i < n { t } else { 1.0 / t };
        (state.mean[i] - reference.mean[i]) * scale * f
    });

    let spec = symplectic_spectrum(&vs, true)?;
    let d_min = spec.d2[0].max(0.0).sqrt();
    if d_min <= 1.0 + 1e-9 {
        return Err(Error::NotFaithful(d_min));
    }
    let psi: Vec<f64> = spec
        .d2
        .iter()
        .map(|&y| {
            let s = y.sqrt();
            s * ((s + 1.0) / (s - 1.0)).ln()
        })
        .collect();
    let log_z: f64 = spec.d2.iter().map(|&y| 0.25 * ((y - 1.0) / 4.0).ln()).sum();

    let wu = &spec.w_inv * &spec.u;
    let a = wu.transpose() * &vr * &wu;
    let tr: f64 = (0..2 * n).map(|i| psi[i] * a[(i, i)]).sum();
    let b = wu.transpose() * &delta;
    let quad: f64 = (0..2 * n).map(|i| psi[i] * b[i] * b[i]).sum();

    let s_rho = von_neumann_entropy(state)?;
    Ok((-s_rho + log_z + 0.25 * tr + 0.5 * quad).max(0.0))
}

/// ⟨Ĥ⟩ = ¼Tr(HΓ) + ½X̄ᵀHX̄ in J.
pub fn total_energy(state: &GaussianState, ham: &QuadraticHamiltonian) -> Result<f64> {
    ham.check_state(state)?;
    let n = ham.n_pixels();
    let mut tr = 0.0;
    let mut quad = 0.0;
    for i in 0..n {
        tr += ham.h_rho[i] * state.cov[(i, i)];
        quad += ham.h_rho[i] * state.mean[i] * state.mean[i];
    }
    let gpp = state.cov.view((n, n), (n, n));
    tr += ham.h_phi.component_mul(&gpp).sum();
    let mp = state.mean.rows(n, n);
    quad += mp.dot(&(&ham.h_phi * mp));
    Ok(0.25 * tr + 0.5 * quad)
}

pub fn free_energy(state: &GaussianState, ham: &QuadraticHamiltonian, temperature_nk: f64) -> Result<f64> {
    if !(temperature_nk > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature_nk}")));
    }
    let e = total_energy(state, ham)?;
    let s = von_neumann_entropy(state)?;
    Ok(e - ham.constants.thermal_energy(temperature_nk) * s)
}

/// Free energy Σ_k [ħω_k/2 + k_BT·log(1 − e^{−ħω_k/k_BT})] of the thermal state.
pub fn thermal_free_energy(modes: &NormalModeDecomposition, temperature_nk: f64) -> Result<f64> {
    if modes.n_zero > 0 {
        return Err(Error::ZeroModes(modes.n_zero));
    }
    let kt = modes.constants.thermal_energy(temperature_nk);
    Ok(modes
        .frequencies
        .iter()
        .map(|&w| {
            let e = modes.constants.quantum(w);
            0.5 * e + kt * (-(-e / kt).exp()).ln_1p()
        })
        .sum())
}

#[derive(Clone, Debug)]
pub struct NormalModeDecomposition {
    /// Ascending, rad/ms; zero modes appear first with value 0.
    pub frequencies: Vec<f64>,
    /// M with X = M r/√Δz, block diagonal: P in the ρ block, P⁻ᵀ in the φ block.
    pub transform: DMatrix<f64>,
    pub n_zero: usize,
    pub(crate) p: DMatrix<f64>,
    pub(crate) p_inv: DMatrix<f64>,
    /// Orthogonal eigenbasis of √H_ρρ·H_φφ·√H_ρρ (columns in internal order).
    pub(crate) basis: DMatrix<f64>,
    /// Eigenvalues σ_k of √H_ρρ·H_φφ·√H_ρρ (ascending).
    pub(crate) sigma: Vec<f64>,
    /// Diagonal of the mode-frame hamiltonian, a_k for Q and b_k for P.
    pub(crate) a: Vec<f64>,
    pub(crate) b: Vec<f64>,
    pub(crate) dz: f64,
    pub(crate) constants: PhysicalConstants,
}

pub fn normal_modes(ham: &QuadraticHamiltonian, zero_tol: f64) -> Result<NormalModeDecomposition> {
    let n = ham.n_pixels();
    if let Some(bad) = ham.h_rho.iter().find(|&&h| !(h > 0.0)) {
        return Err(Error::InvalidInput(format!("h_rho entries must be positive, found {bad}")));
    }
    let d = ham.h_rho.map(f64::sqrt);
    let k = DMatrix::from_fn(n, n, |i, j| d[i] * ham.h_phi[(i, j)] * d[j]);
    let k = (&k + k.transpose()) * 0.5;
    let (sigma, v) = sorted_eigen(k);
    modes_from_basis(ham, &d, sigma.as_slice().to_vec(), v, zero_tol)
}

/// Normal modes using a supplied orthogonal basis that must diagonalize
/// √H_ρρ·H_φφ·√H_ρρ; used when a family of hamiltonians shares eigenvectors.
pub(crate) fn normal_modes_in_basis(
    ham: &QuadraticHamiltonian,
    v: &DMatrix<f64>,
    zero_tol: f64,
) -> Result<NormalModeDecomposition> {
    let n = ham.n_pixels();
    let d = ham.h_rho.map(f64::sqrt);
    let k = DMatrix::from_fn(n, n, |i, j| d[i] * ham.h_phi[(i, j)] * d[j]);
    let diag = v.transpose() * k * v;
    let scale = diag.amax().max(f64::MIN_POSITIVE);
    let mut off = 0.0_f64;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                off = off.max(diag[(i, j)].abs());
            }
        }
    }
    if off > 1e-9 * scale {
        return Err(Error::InvalidInput(format!(
            "basis does not diagonalize the hamiltonian (relative off-diagonal {:.3e})",
            off / scale
        )));
    }
    let sigma: Vec<f64> = (0..n).map(|i| diag[(i, i)]).collect();
    modes_from_basis(ham, &d, sigma, v.clone(), zero_tol)
}

fn modes_from_basis(
    ham: &QuadraticHamiltonian,
    d: &DVector<f64>,
    sigma: Vec<f64>,
    v: DMatrix<f64>,
    zero_tol: f64,
) -> Result<NormalModeDecomposition> {
    let n = ham.n_pixels();
    let s_max = sigma.iter().cloned().fold(0.0_f64, f64::max);
    if s_max <= 0.0 {
        return Err(Error::InvalidInput("h_phi has no positive spectrum".into()));
    }
    let floor = -1e-10 * s_max;
    if let Some(&bad) = sigma.iter().find(|&&s| s < floor) {
        return Err(Error::InvalidInput(format!("h_phi not positive semidefinite (eigenvalue {bad:.3e})")));
    }
    let hbar_dz = ham.constants.hbar_ms() * ham.dz;
    let ref_scale = s_max.sqrt().sqrt();
    let mut scale = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut freqs = Vec::with_capacity(n);
    let mut n_zero = 0;
    for &s in &sigma {
        if s < zero_tol * s_max {
            n_zero += 1;
            scale.push(ref_scale);
            a.push(ref_scale * ref_scale);
            b.push(0.0);
            freqs.push(0.0);
        } else {
            let q = s.sqrt().sqrt();
            scale.push(q);
            a.push(s.sqrt());
            b.push(s.sqrt());
            freqs.push(s.sqrt() / hbar_dz);
        }
    }
    // P = D⁻¹VS, P⁻¹ = S⁻¹VᵀD.
    let p = DMatrix::from_fn(n, n, |i, k| v[(i, k)] * scale[k] / d[i]);
    let p_inv = DMatrix::from_fn(n, n, |k, i| v[(i, k)] * d[i] / scale[k]);
    let mut transform = DMatrix::zeros(2 * n, 2 * n);
    transform.view_mut((0, 0), (n, n)).copy_from(&p);
    transform.view_mut((n, n), (n, n)).copy_from(&p_inv.transpose());

    // Report frequencies ascending with zero modes first.
    let mut sorted = freqs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(NormalModeDecomposition {
        frequencies: sorted,
        transform,
        n_zero,
        p,
        p_inv,
        basis: v,
        sigma,
        a,
        b,
        dz: ham.dz,
        constants: ham.constants,
    })
}

impl NormalModeDecomposition {
    pub fn n_modes(&self) -> usize {
        self.sigma.len()
    }

    /// Per-mode frequency in internal (basis) order; 0 for zero modes.
    pub(crate) fn mode_frequency(&self, k: usize) -> f64 {
        if self.b[k] == 0.0 {
            0.0
        } else {
            self.a[k] / (self.constants.hbar_ms() * self.dz)
        }
    }

    /// Shear rate of a zero mode, P ← P − rate·t·Q, in 1/ms.
    pub(crate) fn zero_mode_rate(&self, k: usize) -> f64 {
        self.a[k] / (self.constants.hbar_ms() * self.dz)
    }

    pub fn inverse_transform(&self) -> DMatrix<f64> {
        let n = self.n_modes();
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.p_inv);
        m.view_mut((n, n), (n, n)).copy_from(&self.p.transpose());
        m
    }

    /// 2×2 mode-frame propagator of mode k for time t in ms, acting on (Q_k, P_k).
    pub(crate) fn mode_rotation(&self, k: usize, t: f64) -> [[f64; 2]; 2] {
        if self.b[k] == 0.0 {
            [[1.0, 0.0], [-self.zero_mode_rate(k) * t, 1.0]]
        } else {
            let (s, c) = (self.mode_frequency(k) * t).sin_cos();
            [[c, s], [-s, c]]
        }
    }

    /// Propagator G = M R(t) M⁻¹ for time t in ms.
    pub fn propagator(&self, t: f64) -> DMatrix<f64> {
        let n = self.n_modes();
        let mut r = DMatrix::zeros(2 * n, 2 * n);
        for k in 0..n {
            let m = self.mode_rotation(k, t);
            r[(k, k)] = m[0][0];
            r[(k, n + k)] = m[0][1];
            r[(n + k, k)] = m[1][0];
            r[(n + k, n + k)] = m[1][1];
        }
        &self.transform * r * self.inverse_transform()
    }
}

pub fn thermal_state(ham: &QuadraticHamiltonian, temperature_nk: f64) -> Result<GaussianState> {
    if !(temperature_nk > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature_nk}")));
    }
    let modes = normal_modes(ham, ZERO_MODE_TOL)?;
    thermal_state_from_modes(&modes, temperature_nk)
}

/// coth(ħω/2k_BT) for ω in rad/ms.
pub fn thermal_symplectic_eigenvalue(constants: &PhysicalConstants, omega: f64, temperature_nk: f64) -> f64 {
    let x = constants.quantum(omega) / (2.0 * constants.thermal_energy(temperature_nk));
    if x > 350.0 {
        1.0
    } else {
        1.0 / x.tanh()
    }
}

/// Thermal state in which exact zero modes are left unpopulated: each is put
/// in a minimum-uncertainty state with the squeezing of the stiffest mode, so
/// its phase spread is negligible. Equals [`thermal_state`] when there are no
/// zero modes.
pub fn thermal_state_excluding_zero_modes(ham: &QuadraticHamiltonian, temperature_nk: f64) -> Result<GaussianState> {
    if !(temperature_nk > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature_nk}")));
    }
    let modes = normal_modes(ham, ZERO_MODE_TOL)?;
    thermal_moments(&modes, temperature_nk)
}

pub(crate) fn thermal_state_from_modes(modes: &NormalModeDecomposition, temperature_nk: f64) -> Result<GaussianState> {
    if modes.n_zero > 0 {
        return Err(Error::ZeroModes(modes.n_zero));
    }
    thermal_moments(modes, temperature_nk)
}

fn thermal_moments(modes: &NormalModeDecomposition, temperature_nk: f64) -> Result<GaussianState> {
    let n = modes.n_modes();
    let d: Vec<f64> = (0..n)
        .map(|k| {
            if modes.b[k] == 0.0 {
                1.0
            } else {
                thermal_symplectic_eigenvalue(&modes.constants, modes.mode_frequency(k), temperature_nk)
            }
        })
        .collect();
    let dv = DVector::from_vec(d);
    let pd = DMatrix::from_fn(n, n, |i, k| modes.p[(i, k)] * dv[k]);
    let grr = &pd * modes.p.transpose() / modes.dz;
    let q = modes.p_inv.transpose();
    let qd = DMatrix::from_fn(n, n, |i, k| q[(i, k)] * dv[k]);
    let gpp = &qd * q.transpose() / modes.dz;
    let mut cov = DMatrix::zeros(2 * n, 2 * n);
    cov.view_mut((0, 0), (n, n)).copy_from(&((&grr + grr.transpose()) * 0.5));
    cov.view_mut((n, n), (n, n)).copy_from(&((&gpp + gpp.transpose()) * 0.5));
    GaussianState::new(cov, DVector::zeros(2 * n), modes.dz)
}

pub fn evolve(state: &GaussianState, ham: &QuadraticHamiltonian, dt: f64) -> Result<GaussianState> {
    ham.check_state(state)?;
    if !(dt >= 0.0) {
        return Err(Error::InvalidInput(format!("dt must be non-negative, got {dt}")));
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let modes = normal_modes(ham, ZERO_MODE_TOL)?;
    let g = modes.propagator(dt);
    apply_symplectic(state, &g)
}

/// Γ ← GΓGᵀ, X̄ ← GX̄ after checking GΩGᵀ = Ω.
pub fn apply_symplectic(state: &GaussianState, g: &DMatrix<f64>) -> Result<GaussianState> {
    let defect = symplectic_defect(g);
    if defect > SYMPLECTIC_TOL {
        return Err(Error::Invariant(format!("propagator not symplectic (defect {defect:.3e})")));
    }
    let cov = g * &state.cov * g.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianState::new(cov, g * &state.mean, state.dz)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TemperatureFit {
    pub temperature_nk: f64,
    pub residual: f64,
    pub at_boundary: bool,
}

/// Golden-section minimization of T ↦ S(state‖thermal(ham, T)).
///
/// The objective uses S(γ‖σ_T) = (F_T(γ) − F_T(σ_T))/k_BT, which needs only the
/// energy and entropy of the state and the mode frequencies of ham.
pub fn temperature_fit(
    state: &GaussianState,
    ham: &QuadraticHamiltonian,
    t_range: (f64, f64),
) -> Result<TemperatureFit> {
    let (lo, hi) = t_range;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidInput(format!("temperature range ({lo}, {hi}) invalid")));
    }
    let modes = normal_modes(ham, ZERO_MODE_TOL)?;
    if modes.n_zero > 0 {
        return Err(Error::ZeroModes(modes.n_zero));
    }
    let e = total_energy(state, ham)?;
    let s = von_neumann_entropy(state)?;
    let objective = |t: f64| -> f64 {
        let kt = ham.constants.thermal_energy(t);
        let f_th = thermal_free_energy(&modes, t).unwrap_or(f64::NAN);
        ((e - kt * s - f_th) / kt).max(0.0)
    };
    let resolution = 0.1;
    let phi = 0.5 * (5.0_f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    while b - a > resolution {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = objective(d);
        }
    }
    let t_best = 0.5 * (a + b);
    let at_boundary = t_best - lo < resolution || hi - t_best < resolution;
    Ok(TemperatureFit { temperature_nk: t_best, residual: objective(t_best), at_boundary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_mode_ham() -> QuadraticHamiltonian {
        let c = PhysicalConstants::default();
        let k = 1.0e-30;
        let h_phi = DMatrix::from_row_slice(2, 2, &[2.0 * k, -k, -k, 2.0 * k]);
        QuadraticHamiltonian::new(DVector::from_vec(vec![3e-33, 5e-33]), h_phi, 0.5, c).unwrap()
    }

    #[test]
    fn symplectic_form_blocks() {
        let om = symplectic_form(1);
        assert_eq!(om, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        let om = symplectic_form(3);
        assert_eq!(&om * &om, -DMatrix::<f64>::identity(6, 6));
        assert_relative_eq!(om.determinant(), 1.0);
    }

    #[test]
    fn vacuum_has_unit_spectrum_and_zero_entropy() {
        let s = GaussianState::canonical_vacuum(4, 0.5).unwrap();
        for d in symplectic_eigenvalues(&s).unwrap() {
            assert_relative_eq!(d, 1.0, epsilon = 1e-12);
        }
        assert_eq!(von_neumann_entropy(&s).unwrap(), 0.0);
    }

    #[test]
    fn single_mode_entropy_at_three() {
        assert_relative_eq!(mode_entropy(3.0).unwrap(), 2.0 * 2.0_f64.ln(), epsilon = 1e-14);
        assert!(mode_entropy(1.0 - 1e-5).is_err());
        let small = mode_entropy(1.0 + 1e-9).unwrap();
        assert!(small > 0.0 && small < 1e-7);
    }

    #[test]
    fn rejects_asymmetric_covariance() {
        let mut cov = DMatrix::<f64>::identity(4, 4);
        cov[(0, 1)] = 0.1;
        assert!(GaussianState::new(cov, DVector::zeros(4), 1.0).is_err());
    }

    #[test]
    fn modes_diagonalize_and_are_symplectic() {
        let h = two_mode_ham();
        let m = normal_modes(&h, ZERO_MODE_TOL).unwrap();
        assert!(symplectic_defect(&m.transform) < 1e-9);
        let hd = m.transform.transpose() * h.full_matrix() * &m.transform;
        let scale = hd.amax();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(hd[(i, j)].abs() < 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn thermal_energy_matches_mode_sum() {
        let h = two_mode_ham();
        let m = normal_modes(&h, ZERO_MODE_TOL).unwrap();
        let t = 50.0;
        let s = thermal_state(&h, t).unwrap();
        let kt = h.constants.thermal_energy(t);
        let expected: f64 = m
            .frequencies
            .iter()
            .map(|&w| {
                let e = h.constants.quantum(w);
                e / ((e / kt).exp() - 1.0) + 0.5 * e
            })
            .sum();
        assert_relative_eq!(total_energy(&s, &h).unwrap(), expected, max_relative = 1e-10);
    }

    #[test]
    fn thermal_state_is_stationary() {
        let h = two_mode_ham();
        let s = thermal_state(&h, 30.0).unwrap();
        let e = evolve(&s, &h, 3.7).unwrap();
        assert!((&e.cov - &s.cov).amax() < 1e-8 * s.cov.amax());
    }

    #[test]
    fn relative_entropy_of_thermal_pair_matches_free_energy() {
        let h = two_mode_ham();
        let a = thermal_state(&h, 40.0).unwrap();
        let b = thermal_state(&h, 60.0).unwrap();
        let rel = relative_entropy(&a, &b).unwrap();
        let m = normal_modes(&h, ZERO_MODE_TOL).unwrap();
        let kt = h.constants.thermal_energy(60.0);
        let via_f = (free_energy(&a, &h, 60.0).unwrap() - thermal_free_energy(&m, 60.0).unwrap()) / kt;
        assert_relative_eq!(rel, via_f, max_relative = 1e-8);
        assert!(relative_entropy(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn temperature_fit_recovers_thermal_temperature() {
        let h = two_mode_ham();
        let s = thermal_state(&h, 50.0).unwrap();
        let fit = temperature_fit(&s, &h, (10.0, 200.0)).unwrap();
        assert!((fit.temperature_nk - 50.0).abs() <= 0.1);
        assert!(fit.residual <= 1e-6);
        assert!(!fit.at_boundary);
    }

    #[test]
    fn zero_mode_blocks_thermal_state() {
        let c = PhysicalConstants::default();
        let k = 1.0e-30;
        let h_phi = DMatrix::from_row_slice(2, 2, &[k, -k, -k, k]);
        let h = QuadraticHamiltonian::new(DVector::from_vec(vec![3e-33, 3e-33]), h_phi, 0.5, c).unwrap();
        let m = normal_modes(&h, ZERO_MODE_TOL).unwrap();
        assert_eq!(m.n_zero, 1);
        assert!(matches!(thermal_state(&h, 50.0), Err(Error::ZeroModes(1))));
    }
}
