//! Propagation in block normal-mode coordinates.
//!
//! The lattice is partitioned into contiguous blocks, each carrying the normal
//! modes of its own (time-independent) hamiltonian. The covariance is stored in
//! mode coordinates r with X = M r, M = ⊕_b diag(P_b, P_b⁻ᵀ), so free evolution
//! is a 2×2 rotation (or shear for zero modes) per mode, O(N²) in total. A
//! phase link between two pixels acts through an exact nilpotent kick,
//! also O(N²). Changing a block's hamiltonian re-expresses the block rows and
//! columns in the new mode frame.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{
    normal_modes, normal_modes_in_basis, GaussianState, NormalModeDecomposition, QuadraticHamiltonian, ZERO_MODE_TOL,
};

#[derive(Clone, Debug)]
pub(crate) struct ModeBlock {
    pub start: usize,
    pub modes: NormalModeDecomposition,
}

impl ModeBlock {
    fn len(&self) -> usize {
        self.modes.n_modes()
    }

    fn range(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ModalEngine {
    n: usize,
    dz: f64,
    blocks: Vec<ModeBlock>,
    cov: DMatrix<f64>,
    mean: DVector<f64>,
}

/// Per-block pair (T_Q, T_P) acting as r_Q ← T_Q r_Q, r_P ← T_P r_P.
struct BlockTransform {
    start: usize,
    tq: DMatrix<f64>,
    tp: DMatrix<f64>,
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let scale = m.amax();
    let n = m.nrows();
    for j in 0..n {
        for i in 0..n {
            if i != j && m[(i, j)].abs() > 1e-13 * scale {
                return false;
            }
        }
    }
    true
}

impl ModalEngine {
    /// Builds the engine from an X-frame state and hamiltonians for
    /// contiguous blocks given as (start pixel, hamiltonian).
    pub fn new(state: &GaussianState, blocks: Vec<(usize, QuadraticHamiltonian)>) -> Result<Self> {
        let n = state.n_pixels();
        let mut built = Vec::with_capacity(blocks.len());
        for (start, h) in blocks {
            if ((h.dz - state.dz) / state.dz).abs() > 1e-12 {
                return Err(Error::Dimension(format!("cutoff mismatch: state dz {} vs block dz {}", state.dz, h.dz)));
            }
            built.push(ModeBlock { start, modes: normal_modes(&h, ZERO_MODE_TOL)? });
        }
        check_tiling(&built, 0..n)?;
        let mut engine = Self { n, dz: state.dz, blocks: built, cov: state.cov.clone(), mean: state.mean.clone() };
        let inv: Vec<BlockTransform> = engine
            .blocks
            .iter()
            .map(|b| BlockTransform { start: b.start, tq: b.modes.p_inv.clone(), tp: b.modes.p.transpose() })
            .collect();
        engine.apply(&inv);
        Ok(engine)
    }

    pub fn n_pixels(&self) -> usize {
        self.n
    }

    pub fn dz(&self) -> f64 {
        self.dz
    }

    fn apply(&mut self, transforms: &[BlockTransform]) {
        let n = self.n;
        for t in transforms {
            let len = t.tq.nrows();
            for (off, m) in [(t.start, &t.tq), (n + t.start, &t.tp)] {
                if is_diagonal(m) {
                    for k in 0..len {
                        let f = m[(k, k)];
                        self.cov.row_mut(off + k).scale_mut(f);
                        self.cov.column_mut(off + k).scale_mut(f);
                        self.mean[off + k] *= f;
                    }
                } else {
                    let rows = m * self.cov.rows(off, len);
                    self.cov.rows_mut(off, len).copy_from(&rows);
                    let cols = self.cov.columns(off, len) * m.transpose();
                    self.cov.columns_mut(off, len).copy_from(&cols);
                    let mr = m * self.mean.rows(off, len);
                    self.mean.rows_mut(off, len).copy_from(&mr);
                }
            }
        }
        self.symmetrize();
    }

    fn symmetrize(&mut self) {
        let n2 = 2 * self.n;
        for j in 0..n2 {
            for i in 0..j {
                let v = 0.5 * (self.cov[(i, j)] + self.cov[(j, i)]);
                self.cov[(i, j)] = v;
                self.cov[(j, i)] = v;
            }
        }
    }

    /// Replaces all blocks inside `range` by new blocks with the given hamiltonians.
    pub fn set_blocks(&mut self, range: Range<usize>, blocks: Vec<(usize, QuadraticHamiltonian)>) -> Result<()> {
        let new: Vec<ModeBlock> = blocks
            .into_iter()
            .map(|(start, h)| Ok(ModeBlock { start, modes: normal_modes(&h, ZERO_MODE_TOL)? }))
            .collect::<Result<_>>()?;
        self.replace_blocks(range, new)
    }

    /// Replaces the block starting at `start` by the modes of `ham` in the
    /// same eigenbasis; cheap when the family of hamiltonians commutes.
    pub fn set_block_same_basis(&mut self, start: usize, ham: &QuadraticHamiltonian) -> Result<()> {
        let idx = self
            .blocks
            .iter()
            .position(|b| b.start == start)
            .ok_or_else(|| Error::InvalidInput(format!("no block starts at pixel {start}")))?;
        let modes = normal_modes_in_basis(ham, &self.blocks[idx].modes.basis, ZERO_MODE_TOL)?;
        let range = self.blocks[idx].range();
        self.replace_blocks(range, vec![ModeBlock { start, modes }])
    }

    fn replace_blocks(&mut self, range: Range<usize>, new: Vec<ModeBlock>) -> Result<()> {
        check_tiling(&new, range.clone())?;
        let old: Vec<&ModeBlock> =
            self.blocks.iter().filter(|b| b.start >= range.start && b.start < range.end).collect();
        check_tiling(&old.iter().map(|b| (*b).clone()).collect::<Vec<_>>(), range.clone())?;
        let len = range.len();
        let mut p_old = DMatrix::zeros(len, len);
        let mut p_old_inv = DMatrix::zeros(len, len);
        for b in &old {
            let o = b.start - range.start;
            p_old.view_mut((o, o), (b.len(), b.len())).copy_from(&b.modes.p);
            p_old_inv.view_mut((o, o), (b.len(), b.len())).copy_from(&b.modes.p_inv);
        }
        let mut p_new = DMatrix::zeros(len, len);
        let mut p_new_inv = DMatrix::zeros(len, len);
        for b in &new {
            let o = b.start - range.start;
            p_new.view_mut((o, o), (b.len(), b.len())).copy_from(&b.modes.p);
            p_new_inv.view_mut((o, o), (b.len(), b.len())).copy_from(&b.modes.p_inv);
        }
        let tq = &p_new_inv * &p_old;
        let tp = (&p_old_inv * &p_new).transpose();
        self.apply(&[BlockTransform { start: range.start, tq, tp }]);
        self.blocks.retain(|b| !(b.start >= range.start && b.start < range.end));
        self.blocks.extend(new);
        self.blocks.sort_by_key(|b| b.start);
        Ok(())
    }

    fn block_of(&self, pixel: usize) -> &ModeBlock {
        self.blocks.iter().find(|b| b.range().contains(&pixel)).expect("blocks tile the lattice")
    }

    /// Free evolution of every block under its own hamiltonian for t ms.
    pub fn drift(&mut self, t: f64) {
        if t == 0.0 {
            return;
        }
        let n = self.n;
        let rots: Vec<(usize, [[f64; 2]; 2])> = self
            .blocks
            .iter()
            .flat_map(|b| (0..b.len()).map(move |k| (b.start + k, b.modes.mode_rotation(k, t))))
            .collect();
        for _ in 0..2 {
            for &(q, r) in &rots {
                combine_columns(&mut self.cov, q, n + q, r);
            }
            self.cov.transpose_mut();
        }
        for &(q, r) in &rots {
            let (a, b) = (self.mean[q], self.mean[n + q]);
            self.mean[q] = r[0][0] * a + r[0][1] * b;
            self.mean[n + q] = r[1][0] * a + r[1][1] * b;
        }
    }

    /// Exact evolution for dt under a phase link strength·(φ_l − φ_r)²/2 alone.
    pub fn kick(&mut self, left: usize, right: usize, strength: f64, dt: f64) {
        let n = self.n;
        let mut w = DVector::zeros(2 * n);
        for (pixel, sign) in [(left, 1.0), (right, -1.0)] {
            let b = self.block_of(pixel);
            let col = b.modes.p_inv.column(pixel - b.start);
            for k in 0..b.len() {
                w[b.start + k] += sign * col[k];
            }
        }
        let kappa = strength * dt / (self.blocks[0].modes.constants.hbar_ms() * self.dz);
        let wq = w.rows(0, n).into_owned();
        let u = self.cov.columns(n, n) * &wq;
        let c = wq.dot(&u.rows(n, n));
        self.cov.ger(kappa, &w, &u, 1.0);
        self.cov.ger(kappa, &u, &w, 1.0);
        self.cov.ger(kappa * kappa * c, &w, &w, 1.0);
        let wp = wq.dot(&self.mean.rows(n, n));
        for k in 0..n {
            self.mean[k] += kappa * wq[k] * wp;
        }
    }

    /// Zeroes every covariance entry between pixels below and above `cut`;
    /// the cut must fall on a block boundary.
    pub fn decorrelate(&mut self, cut: usize) -> Result<()> {
        if !self.blocks.iter().any(|b| b.start == cut) {
            return Err(Error::InvalidInput(format!("cut {cut} is not a block boundary")));
        }
        let n = self.n;
        let side = |i: usize| (i % n) < cut;
        for j in 0..2 * n {
            for i in 0..2 * n {
                if side(i) != side(j) {
                    self.cov[(i, j)] = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Replaces the state on `range` (aligned to block boundaries) by `state`
    /// and removes its correlations with the rest of the lattice.
    pub fn reset_range(&mut self, range: Range<usize>, state: &GaussianState) -> Result<()> {
        let n = self.n;
        let len = range.len();
        if state.n_pixels() != len {
            return Err(Error::Dimension(format!("reset state has {} pixels, range {}", state.n_pixels(), len)));
        }
        let inside: Vec<&ModeBlock> =
            self.blocks.iter().filter(|b| b.start >= range.start && b.start < range.end).collect();
        check_tiling(&inside.iter().map(|b| (*b).clone()).collect::<Vec<_>>(), range.clone())?;
        let mut pinv = DMatrix::zeros(len, len);
        let mut pt = DMatrix::zeros(len, len);
        for b in &inside {
            let o = b.start - range.start;
            pinv.view_mut((o, o), (b.len(), b.len())).copy_from(&b.modes.p_inv);
            pt.view_mut((o, o), (b.len(), b.len())).copy_from(&b.modes.p.transpose());
        }
        let mut m = DMatrix::zeros(2 * len, 2 * len);
        m.view_mut((0, 0), (len, len)).copy_from(&pinv);
        m.view_mut((len, len), (len, len)).copy_from(&pt);
        let local = &m * &state.cov * m.transpose();
        let local_mean = &m * &state.mean;
        let idx: Vec<usize> = range.clone().chain(range.clone().map(|i| i + n)).collect();
        let inside_idx = |i: usize| range.contains(&(i % n));
        for j in 0..2 * n {
            for i in 0..2 * n {
                if inside_idx(i) != inside_idx(j) {
                    self.cov[(i, j)] = 0.0;
                }
            }
        }
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                self.cov[(i, j)] = local[(a, b)];
            }
            self.mean[i] = local_mean[a];
        }
        self.symmetrize();
        Ok(())
    }

    /// X-frame reduced state on a pixel range.
    pub fn state_of(&self, range: Range<usize>) -> Result<GaussianState> {
        let n = self.n;
        let blocks: Vec<&ModeBlock> =
            self.blocks.iter().filter(|b| b.start < range.end && b.start + b.len() > range.start).collect();
        let c_start = blocks[0].start;
        let c_end = blocks.last().map(|b| b.start + b.len()).unwrap_or(c_start);
        let (r_len, c_len) = (range.len(), c_end - c_start);
        let mut a = DMatrix::zeros(r_len, c_len);
        let mut q = DMatrix::zeros(r_len, c_len);
        for b in &blocks {
            for i in range.clone() {
                if b.range().contains(&i) {
                    let li = i - b.start;
                    for k in 0..b.len() {
                        a[(i - range.start, b.start - c_start + k)] = b.modes.p[(li, k)];
                        q[(i - range.start, b.start - c_start + k)] = b.modes.p_inv[(k, li)];
                    }
                }
            }
        }
        let gqq = self.cov.view((c_start, c_start), (c_len, c_len));
        let gqp = self.cov.view((c_start, n + c_start), (c_len, c_len));
        let gpp = self.cov.view((n + c_start, n + c_start), (c_len, c_len));
        let rr = &a * gqq * a.transpose();
        let rp = &a * gqp * q.transpose();
        let pp = &q * gpp * q.transpose();
        let mut cov = DMatrix::zeros(2 * r_len, 2 * r_len);
        cov.view_mut((0, 0), (r_len, r_len)).copy_from(&rr);
        cov.view_mut((0, r_len), (r_len, r_len)).copy_from(&rp);
        cov.view_mut((r_len, 0), (r_len, r_len)).copy_from(&rp.transpose());
        cov.view_mut((r_len, r_len), (r_len, r_len)).copy_from(&pp);
        let cov = (&cov + cov.transpose()) * 0.5;
        let mut mean = DVector::zeros(2 * r_len);
        mean.rows_mut(0, r_len).copy_from(&(&a * self.mean.rows(c_start, c_len)));
        mean.rows_mut(r_len, r_len).copy_from(&(&q * self.mean.rows(n + c_start, c_len)));
        GaussianState::new(cov, mean, self.dz)
    }

    pub fn state(&self) -> Result<GaussianState> {
        self.state_of(0..self.n)
    }

    /// Per-pixel energy ¼[H_ρρΓ_ρρ + (H_φφΓ_φφ)]_jj plus the mean term, for a
    /// hamiltonian whose φ block is tridiagonal.
    pub fn pixel_energies(&self, ham: &QuadraticHamiltonian) -> Result<DVector<f64>> {
        let n = self.n;
        if ham.n_pixels() != n {
            return Err(Error::Dimension(format!("hamiltonian has {} pixels, engine {}", ham.n_pixels(), n)));
        }
        for j in 0..n {
            for i in 0..n {
                if i.abs_diff(j) > 1 && ham.h_phi[(i, j)] != 0.0 {
                    return Err(Error::InvalidInput("pixel energies need a tridiagonal phase block".into()));
                }
            }
        }
        let mut rho_diag = DVector::zeros(n);
        let mut phi_diag = DVector::zeros(n);
        let mut phi_upper = DVector::zeros(n);
        let mut x_rho = DVector::zeros(n);
        let mut x_phi = DVector::zeros(n);
        for b in &self.blocks {
            let (s, len) = (b.start, b.len());
            let p = &b.modes.p;
            let q = b.modes.p_inv.transpose();
            let pa = p * self.cov.view((s, s), (len, len));
            let qb = &q * self.cov.view((n + s, n + s), (len, len));
            for j in 0..len {
                rho_diag[s + j] = pa.row(j).dot(&p.row(j));
                phi_diag[s + j] = qb.row(j).dot(&q.row(j));
                if j + 1 < len {
                    phi_upper[s + j] = qb.row(j).dot(&q.row(j + 1));
                }
            }
            x_rho.rows_mut(s, len).copy_from(&(p * self.mean.rows(s, len)));
            x_phi.rows_mut(s, len).copy_from(&(&q * self.mean.rows(n + s, len)));
        }
        for pair in self.blocks.windows(2) {
            let (ba, bb) = (&pair[0], &pair[1]);
            let l = bb.start - 1;
            let qa = ba.modes.p_inv.column(l - ba.start);
            let qb = bb.modes.p_inv.column(0);
            let g = self.cov.view((n + ba.start, n + bb.start), (ba.len(), bb.len()));
            phi_upper[l] = qa.dot(&(g * qb));
        }
        let hx = &ham.h_phi * &x_phi;
        let mut e = DVector::zeros(n);
        for j in 0..n {
            let mut hg = ham.h_phi[(j, j)] * phi_diag[j];
            if j > 0 {
                hg += ham.h_phi[(j, j - 1)] * phi_upper[j - 1];
            }
            if j + 1 < n {
                hg += ham.h_phi[(j, j + 1)] * phi_upper[j];
            }
            e[j] = 0.25 * (ham.h_rho[j] * rho_diag[j] + hg)
                + 0.5 * (ham.h_rho[j] * x_rho[j] * x_rho[j] + x_phi[j] * hx[j]);
        }
        Ok(e)
    }
}

fn check_tiling(blocks: &[ModeBlock], range: Range<usize>) -> Result<()> {
    let mut sorted: Vec<(usize, usize)> = blocks.iter().map(|b| (b.start, b.len())).collect();
    sorted.sort();
    let mut pos = range.start;
    for (s, l) in sorted {
        if s != pos {
            return Err(Error::InvalidInput(format!("blocks do not tile {:?} (gap or overlap at pixel {pos})", range)));
        }
        pos += l;
    }
    if pos != range.end {
        return Err(Error::InvalidInput(format!("blocks do not tile {:?}", range)));
    }
    Ok(())
}

/// Columns (a, b) ← (r00·a + r01·b, r10·a + r11·b).
fn combine_columns(m: &mut DMatrix<f64>, a: usize, b: usize, r: [[f64; 2]; 2]) {
    let rows = m.nrows();
    let data = m.as_mut_slice();
    let (lo, hi) = data.split_at_mut(b * rows);
    let ca = &mut lo[a * rows..(a + 1) * rows];
    let cb = &mut hi[..rows];
    for (x, y) in ca.iter_mut().zip(cb.iter_mut()) {
        let (u, v) = (*x, *y);
        *x = r[0][0] * u + r[0][1] * v;
        *y = r[1][0] * u + r[1][1] * v;
    }
}
