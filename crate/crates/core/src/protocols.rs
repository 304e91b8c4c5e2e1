//! Experiments composed from the thermodynamic primitives: piston strokes,
//! piston–bath heat flow, Otto refrigeration cycles, valve merges and the
//! anomalous heat flow run.
//!
//! All runs share one engine: the machine is a chain of segments on a common
//! reference lattice, each compressible by its own factor λ = L₀/L, joined by
//! links that are either open, closed or being ramped.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{
    reduced_state_on, relative_entropy, temperature_fit, thermal_state, von_neumann_entropy, GaussianState,
    QuadraticHamiltonian,
};
use crate::lattice::{
    build_profile, chain_hamiltonian, chain_link_strength, discretize, scaled_hamiltonian, ChainSegment, CouplingSpec,
    DensityProfile, ProfileKind,
};
use crate::modal::ModalEngine;
use crate::oracles::evaporative_scaling;
use crate::qtp::{default_steps, split_step_limit, DEFAULT_DT_MAX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    Piston,
    Bath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemSpec {
    pub name: String,
    pub role: Role,
    pub length_um: f64,
    pub temperature_nk: f64,
    pub profile: ProfileKind,
    pub peak_density: f64,
    pub edge_width_um: f64,
    pub edge_floor: f64,
}

impl SubsystemSpec {
    /// Homogeneous subsystem at 100 atoms/μm.
    pub fn homogeneous(name: &str, role: Role, length_um: f64, temperature_nk: f64) -> Self {
        Self {
            name: name.into(),
            role,
            length_um,
            temperature_nk,
            profile: ProfileKind::Homogeneous,
            peak_density: 100.0,
            edge_width_um: 0.0,
            edge_floor: 1.0,
        }
    }

    /// Erf-box subsystem at 100 atoms/μm with 4 μm edges falling to half the peak.
    pub fn erf_box(name: &str, role: Role, length_um: f64, temperature_nk: f64) -> Self {
        Self {
            profile: ProfileKind::ErfBox,
            edge_width_um: 4.0,
            edge_floor: 0.5,
            ..Self::homogeneous(name, role, length_um, temperature_nk)
        }
    }
}

/// Subsystems in spatial order on a shared pixel width.
#[derive(Clone, Debug, PartialEq)]
pub struct MachineLayout {
    pub subsystems: Vec<SubsystemSpec>,
    pub dz_um: f64,
    pub coupling: CouplingSpec,
}

impl MachineLayout {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.subsystems.is_empty() {
            problems.push("layout has no subsystems".to_string());
        }
        if !(self.dz_um > 0.0) {
            problems.push(format!("dz_um must be positive, got {}", self.dz_um));
        }
        for (i, s) in self.subsystems.iter().enumerate() {
            if self.subsystems[..i].iter().any(|o| o.name == s.name) {
                problems.push(format!("subsystem name '{}' is used twice", s.name));
            }
            if s.role != Role::System && self.subsystems[..i].iter().any(|o| o.role == s.role) {
                problems.push(format!("role {:?} appears more than once", s.role));
            }
            if !(s.temperature_nk > 0.0) {
                problems.push(format!("subsystem '{}': temperature must be positive", s.name));
            }
            if !(s.length_um >= 4.0 * self.dz_um) {
                problems.push(format!("subsystem '{}': length must cover at least 4 pixels", s.name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn index_of(&self, role: Role) -> Option<usize> {
        self.subsystems.iter().position(|s| s.role == role)
    }

    fn profiles(&self) -> Result<Vec<DensityProfile>> {
        self.subsystems
            .iter()
            .map(|s| build_profile(s.profile, s.length_um, s.peak_density, s.edge_width_um, s.edge_floor, self.dz_um))
            .collect()
    }
}

/// Sampling of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordOptions {
    /// Interval between energy-density frames, ms.
    pub frame_interval_ms: f64,
    /// Interval between temperature fits, relative entropies and mutual informations, ms.
    pub diagnostics_interval_ms: f64,
    pub mutual_information: bool,
    pub temperature_fit: bool,
    /// Largest Trotter step during ramps, ms.
    pub dt_max_ms: f64,
    /// Search interval for temperature fits, nK.
    pub fit_range_nk: (f64, f64),
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self {
            frame_interval_ms: 1.0,
            diagnostics_interval_ms: 5.0,
            mutual_information: false,
            temperature_fit: true,
            dt_max_ms: DEFAULT_DT_MAX,
            fit_range_nk: (0.5, 1000.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsystemSample {
    pub energy_j: f64,
    pub energy_rel: f64,
    pub rel_entropy: Option<f64>,
    pub temp_fit_nk: Option<f64>,
    pub mutual_info: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordFrame {
    pub time_ms: f64,
    /// Physical pixel centres, μm.
    pub z_um: Vec<f64>,
    /// Energy per unit length, J/μm.
    pub energy_density: Vec<f64>,
    /// Energy density relative to the initial bulk value.
    pub energy_rel: Vec<f64>,
    pub subsystems: Vec<SubsystemSample>,
    pub total_energy_j: f64,
    /// Named scalar diagnostics (relative entropies to fixed references).
    pub probes: Vec<(String, f64)>,
    pub diagnostics: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunEvent {
    pub time_ms: f64,
    pub label: String,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub subsystem_names: Vec<String>,
    pub frames: Vec<RecordFrame>,
    pub cycle_boundaries_ms: Vec<f64>,
    pub events: Vec<RunEvent>,
    /// Initial bulk energy per unit length, J/μm.
    pub bulk_energy_density: f64,
    pub initial_energies: Vec<f64>,
    pub final_state: Option<GaussianState>,
}

impl RunRecord {
    pub fn energy_series(&self, subsystem: usize) -> Vec<(f64, f64)> {
        self.frames.iter().map(|f| (f.time_ms, f.subsystems[subsystem].energy_j)).collect()
    }

    /// Energy of a subsystem at the frame closest to `time`.
    pub fn energy_at(&self, subsystem: usize, time: f64) -> Option<f64> {
        self.frames
            .iter()
            .min_by(|a, b| (a.time_ms - time).abs().total_cmp(&(b.time_ms - time).abs()))
            .map(|f| f.subsystems[subsystem].energy_j)
    }

    /// Energy removed from a subsystem in each cycle, J (positive = cooled).
    pub fn per_cycle_extracted(&self, subsystem: usize) -> Vec<f64> {
        let mut marks = vec![0.0];
        marks.extend(self.cycle_boundaries_ms.iter().copied());
        marks
            .windows(2)
            .filter_map(|w| Some(self.energy_at(subsystem, w[0])? - self.energy_at(subsystem, w[1])?))
            .collect()
    }

    /// Time intervals during which energy flows from `cold` into `hot`:
    /// the hot subsystem gains while the cold one loses.
    pub fn flow_reversals(&self, hot: usize, cold: usize) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for w in self.frames.windows(2) {
            let dh = w[1].subsystems[hot].energy_j - w[0].subsystems[hot].energy_j;
            let dc = w[1].subsystems[cold].energy_j - w[0].subsystems[cold].energy_j;
            if dh > 0.0 && dc < 0.0 {
                match out.last_mut() {
                    Some(last) if last.1 == w[0].time_ms => last.1 = w[1].time_ms,
                    _ => out.push((w[0].time_ms, w[1].time_ms)),
                }
            }
        }
        out
    }

    /// Series of a named probe at diagnostics frames.
    pub fn probe_series(&self, name: &str) -> Vec<(f64, f64)> {
        self.frames
            .iter()
            .filter_map(|f| f.probes.iter().find(|(n, _)| n == name).map(|(_, v)| (f.time_ms, *v)))
            .collect()
    }

    pub fn mutual_info_series(&self, subsystem: usize) -> Vec<(f64, f64)> {
        self.frames.iter().filter_map(|f| f.subsystems[subsystem].mutual_info.map(|m| (f.time_ms, m))).collect()
    }
}

/// Relative entropy of a pixel range against a fixed reference state.
#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub pixels: Range<usize>,
    pub reference: GaussianState,
}

struct Segment {
    name: String,
    profile: DensityProfile,
    range: Range<usize>,
    temperature_nk: f64,
}

/// Chain of segments evolved by the block-modal engine.
struct Machine<'a> {
    coupling: &'a CouplingSpec,
    segs: Vec<Segment>,
    lambda: Vec<f64>,
    /// Instantaneous link weights.
    weights: Vec<f64>,
    /// Links whose two sides share one mode block.
    merged: Vec<bool>,
    engine: ModalEngine,
    time: f64,
    opts: RecordOptions,
    initial: Vec<GaussianState>,
    probes: Vec<Probe>,
    joint_entropy: Option<f64>,
    next_frame: f64,
    next_diag: f64,
    record: RunRecord,
}

impl<'a> Machine<'a> {
    fn new(layout: &'a MachineLayout, opts: RecordOptions) -> Result<Self> {
        layout.validate()?;
        if !(opts.frame_interval_ms > 0.0) || !(opts.diagnostics_interval_ms > 0.0) || !(opts.dt_max_ms > 0.0) {
            return Err(Error::InvalidInput("frame, diagnostics and step intervals must be positive".into()));
        }
        let profiles = layout.profiles()?;
        let mut segs = Vec::new();
        let mut start = 0;
        for (spec, profile) in layout.subsystems.iter().zip(profiles) {
            let n = profile.n_pixels();
            segs.push(Segment {
                name: spec.name.clone(),
                profile,
                range: start..start + n,
                temperature_nk: spec.temperature_nk,
            });
            start += n;
        }
        let n = start;
        let mut initial = Vec::new();
        let mut blocks = Vec::new();
        for s in &segs {
            let h = discretize(&s.profile, &layout.coupling)?;
            initial.push(thermal_state(&h, s.temperature_nk)?);
            blocks.push((s.range.start, h));
        }
        let dz = layout.dz_um;
        let mut cov = nalgebra::DMatrix::zeros(2 * n, 2 * n);
        for (s, st) in segs.iter().zip(&initial) {
            let m = s.range.len();
            let (a, b) = (s.range.start, n + s.range.start);
            cov.view_mut((a, a), (m, m)).copy_from(&st.cov.view((0, 0), (m, m)));
            cov.view_mut((a, b), (m, m)).copy_from(&st.cov.view((0, m), (m, m)));
            cov.view_mut((b, a), (m, m)).copy_from(&st.cov.view((m, 0), (m, m)));
            cov.view_mut((b, b), (m, m)).copy_from(&st.cov.view((m, m), (m, m)));
        }
        let state = GaussianState::new(cov, nalgebra::DVector::zeros(2 * n), dz)?;
        let engine = ModalEngine::new(&state, blocks)?;
        let k = segs.len();
        let record = RunRecord {
            subsystem_names: segs.iter().map(|s| s.name.clone()).collect(),
            frames: Vec::new(),
            cycle_boundaries_ms: Vec::new(),
            events: Vec::new(),
            bulk_energy_density: 0.0,
            initial_energies: Vec::new(),
            final_state: None,
        };
        let mut machine = Self {
            coupling: &layout.coupling,
            segs,
            lambda: vec![1.0; k],
            weights: vec![0.0; k - 1],
            merged: vec![false; k - 1],
            engine,
            time: 0.0,
            opts,
            initial,
            probes: Vec::new(),
            joint_entropy: None,
            next_frame: 0.0,
            next_diag: 0.0,
            record,
        };
        machine.init_reference()?;
        Ok(machine)
    }

    fn n(&self) -> usize {
        self.engine.n_pixels()
    }

    fn chain(&self, segs: Range<usize>) -> Result<QuadraticHamiltonian> {
        let pieces: Vec<ChainSegment> = segs
            .clone()
            .map(|i| ChainSegment { profile: &self.segs[i].profile, coupling: self.coupling, lambda: self.lambda[i] })
            .collect();
        chain_hamiltonian(&pieces, &self.weights[segs.start..segs.end - 1])
    }

    fn current_ham(&self) -> Result<QuadraticHamiltonian> {
        self.chain(0..self.segs.len())
    }

    fn link_strength(&self, link: usize) -> f64 {
        let seg =
            |i: usize| ChainSegment { profile: &self.segs[i].profile, coupling: self.coupling, lambda: self.lambda[i] };
        chain_link_strength(&seg(link), &seg(link + 1))
    }

    /// Segment range of the group (segments joined by merged links) containing `seg`.
    fn group_of(&self, seg: usize) -> Range<usize> {
        let mut a = seg;
        while a > 0 && self.merged[a - 1] {
            a -= 1;
        }
        let mut b = seg;
        while b + 1 < self.segs.len() && self.merged[b] {
            b += 1;
        }
        a..b + 1
    }

    fn pixels_of(&self, segs: &Range<usize>) -> Range<usize> {
        self.segs[segs.start].range.start..self.segs[segs.end - 1].range.end
    }

    /// Rebuilds the mode blocks covering the groups around `link`.
    fn regroup(&mut self, link: usize) -> Result<()> {
        let left = self.group_of(link);
        let right = self.group_of(link + 1);
        let union = left.start.min(right.start)..left.end.max(right.end);
        let pixels = self.pixels_of(&union);
        let groups = if left == right { vec![left] } else { vec![left, right] };
        let mut blocks = Vec::new();
        for g in groups {
            blocks.push((self.segs[g.start].range.start, self.chain(g)?));
        }
        self.engine.set_blocks(pixels, blocks)
    }

    fn event(&mut self, label: String) {
        self.record.events.push(RunEvent { time_ms: self.time, label });
    }

    fn init_reference(&mut self) -> Result<()> {
        let ham = self.current_ham()?;
        let e = self.engine.pixel_energies(&ham)?;
        let dz = self.engine.dz();
        let mut bulk = Vec::new();
        for s in &self.segs {
            let peak = s.profile.peak();
            for (i, p) in s.range.clone().enumerate() {
                if s.profile.rho[i] >= 0.99 * peak {
                    bulk.push(e[p] / dz);
                }
            }
        }
        bulk.sort_by(f64::total_cmp);
        self.record.bulk_energy_density = bulk[bulk.len() / 2];
        self.record.initial_energies = self.segs.iter().map(|s| e.rows(s.range.start, s.range.len()).sum()).collect();
        Ok(())
    }

    fn add_probe(&mut self, probe: Probe) {
        self.probes.push(probe);
    }

    /// Records a frame if the clock has reached the next frame time, or when forced.
    fn sample(&mut self, force: bool) -> Result<()> {
        let eps = 1e-9;
        let due_frame = self.time >= self.next_frame - eps;
        if !(due_frame || force) {
            return Ok(());
        }
        let diag = self.time >= self.next_diag - eps;
        self.push_frame(diag)?;
        let fi = self.opts.frame_interval_ms;
        self.next_frame = ((self.time + eps) / fi).floor() * fi + fi;
        if diag {
            let di = self.opts.diagnostics_interval_ms;
            self.next_diag = ((self.time + eps) / di).floor() * di + di;
        }
        Ok(())
    }

    fn push_frame(&mut self, diagnostics: bool) -> Result<()> {
        let ham = self.current_ham()?;
        let e = self.engine.pixel_energies(&ham)?;
        let dz0 = self.engine.dz();
        let mut z = Vec::with_capacity(self.n());
        let mut density = Vec::with_capacity(self.n());
        let mut edge = 0.0;
        for (s, &lam) in self.segs.iter().zip(&self.lambda) {
            let w = dz0 / lam;
            for p in s.range.clone() {
                z.push(edge + 0.5 * w);
                density.push(e[p] / w);
                edge += w;
            }
        }
        let bulk = self.record.bulk_energy_density;
        let rel = density.iter().map(|d| d / bulk).collect();
        let full = if diagnostics && self.opts.mutual_information { Some(self.engine.state()?) } else { None };
        if diagnostics && self.opts.mutual_information && self.joint_entropy.is_none() {
            self.joint_entropy = Some(von_neumann_entropy(full.as_ref().expect("state computed"))?);
        }
        let mut subsystems = Vec::with_capacity(self.segs.len());
        for (k, s) in self.segs.iter().enumerate() {
            let energy = e.rows(s.range.start, s.range.len()).sum();
            let mut sample = SubsystemSample {
                energy_j: energy,
                energy_rel: energy / self.record.initial_energies[k],
                rel_entropy: None,
                temp_fit_nk: None,
                mutual_info: None,
            };
            if diagnostics {
                let state = self.engine.state_of(s.range.clone())?;
                state.check_cone()?;
                if self.opts.temperature_fit {
                    let h = scaled_hamiltonian(&s.profile, self.coupling, self.lambda[k])?;
                    let fit = temperature_fit(&state, &h, self.opts.fit_range_nk)?;
                    sample.rel_entropy = Some(fit.residual);
                    sample.temp_fit_nk = Some(fit.temperature_nk);
                }
                if let Some(full) = &full {
                    if self.segs.len() > 1 {
                        let rest: Vec<usize> = (0..self.n()).filter(|p| !s.range.contains(p)).collect();
                        let s_a = von_neumann_entropy(&state)?;
                        let s_b = von_neumann_entropy(&reduced_state_on(full, &rest)?)?;
                        let s_ab = self.joint_entropy.expect("joint entropy computed");
                        sample.mutual_info = Some((s_a + s_b - s_ab).max(0.0));
                    } else {
                        sample.mutual_info = Some(0.0);
                    }
                }
            }
            subsystems.push(sample);
        }
        let mut probes = Vec::new();
        if diagnostics {
            for p in &self.probes {
                let st = self.engine.state_of(p.pixels.clone())?;
                probes.push((p.name.clone(), relative_entropy(&st, &p.reference)?));
            }
        }
        self.record.frames.push(RecordFrame {
            time_ms: self.time,
            z_um: z,
            energy_density: density,
            energy_rel: rel,
            subsystems,
            total_energy_j: e.sum(),
            probes,
            diagnostics,
        });
        Ok(())
    }

    /// Advances by `duration` with the current hamiltonian, sampling frames.
    fn hold(&mut self, duration: f64) -> Result<()> {
        if duration < 0.0 {
            return Err(Error::InvalidInput(format!("hold duration must be non-negative, got {duration}")));
        }
        let end = self.time + duration;
        while self.time < end - 1e-9 {
            let step = (self.next_frame - self.time).min(end - self.time).max(0.0);
            self.engine.drift(step);
            self.time += step;
            self.sample(false)?;
        }
        self.time = end;
        Ok(())
    }

    /// Linear valve ramp of one link over `duration`.
    fn valve(&mut self, link: usize, open: bool, duration: f64) -> Result<()> {
        let name = format!("{}|{}", self.segs[link].name, self.segs[link + 1].name);
        self.event(format!("{} {name} start", if open { "merge" } else { "split" }));
        if !open && self.merged[link] {
            self.merged[link] = false;
            self.regroup(link)?;
        }
        if duration > 0.0 {
            let n = default_steps(duration, self.opts.dt_max_ms);
            let dt = duration / n as f64;
            let t0 = self.time;
            let limit = {
                self.weights[link] = 1.0;
                let h = self.current_ham();
                self.weights[link] = if open { 0.0 } else { 1.0 };
                split_step_limit(&h?)
            };
            if dt > limit {
                return Err(Error::InvalidInput(format!(
                    "valve step {dt:.4} ms exceeds the split-step stability limit {limit:.4} ms"
                )));
            }
            let strength = self.link_strength(link);
            let (l, r) = (self.segs[link].range.end - 1, self.segs[link + 1].range.start);
            let weight = |x: f64| if open { x } else { 1.0 - x };
            for j in 1..=n {
                let w = weight((j as f64 - 0.5) / n as f64);
                self.engine.drift(0.5 * dt);
                self.engine.kick(l, r, strength * w, dt);
                self.engine.drift(0.5 * dt);
                self.time = t0 + j as f64 * dt;
                self.weights[link] = weight(j as f64 / n as f64);
                self.sample(false)?;
            }
        }
        self.weights[link] = if open { 1.0 } else { 0.0 };
        if open {
            self.merged[link] = true;
            self.regroup(link)?;
        }
        self.event(format!("{} {name} end", if open { "merge" } else { "split" }));
        Ok(())
    }

    /// Changes segment `seg` to compression factor `target` with length linear in time.
    fn stroke(&mut self, seg: usize, target: f64, duration: f64) -> Result<()> {
        if !(target > 0.0) || !(duration >= 0.0) {
            return Err(Error::InvalidInput("stroke needs a positive target and non-negative duration".into()));
        }
        let isolated = (seg == 0 || !self.merged[seg - 1] && self.weights[seg - 1] == 0.0)
            && (seg + 1 == self.segs.len() || !self.merged[seg] && self.weights[seg] == 0.0);
        if !isolated {
            return Err(Error::InvalidInput(format!(
                "segment '{}' must be decoupled to change its length",
                self.segs[seg].name
            )));
        }
        let start_lambda = self.lambda[seg];
        self.event(format!("stroke {} {:.4}->{:.4} start", self.segs[seg].name, 1.0 / start_lambda, 1.0 / target));
        if !self.segs[seg].profile.is_homogeneous() || !self.coupling.is_uniform_j() {
            return Err(Error::InvalidInput(format!(
                "segment '{}': length changes need a homogeneous profile and uniform J",
                self.segs[seg].name
            )));
        }
        let lam_at = |x: f64| 1.0 / (1.0 / start_lambda + (1.0 / target - 1.0 / start_lambda) * x);
        if duration > 0.0 {
            let n = default_steps(duration, self.opts.dt_max_ms);
            let dt = duration / n as f64;
            let t0 = self.time;
            let range = self.segs[seg].range.clone();
            for j in 1..=n {
                let lam_mid = lam_at((j as f64 - 0.5) / n as f64);
                let h = scaled_hamiltonian(&self.segs[seg].profile, self.coupling, lam_mid)?;
                self.engine.set_block_same_basis(range.start, &h)?;
                self.engine.drift(dt);
                self.time = t0 + j as f64 * dt;
                self.lambda[seg] = lam_at(j as f64 / n as f64);
                self.sample(false)?;
            }
        }
        self.lambda[seg] = target;
        let range = self.segs[seg].range.clone();
        let h = scaled_hamiltonian(&self.segs[seg].profile, self.coupling, target)?;
        self.engine.set_block_same_basis(range.start, &h)?;
        self.event(format!("stroke {} end", self.segs[seg].name));
        Ok(())
    }

    fn decorrelate(&mut self, link: usize) -> Result<()> {
        if self.merged[link] || self.weights[link] != 0.0 {
            return Err(Error::InvalidInput("can only decorrelate across a closed valve".into()));
        }
        self.engine.decorrelate(self.segs[link + 1].range.start)?;
        self.joint_entropy = None;
        self.event(format!("decorrelate {}|{}", self.segs[link].name, self.segs[link + 1].name));
        Ok(())
    }

    /// Puts segment `seg` back into its initial thermal state at λ = 1.
    fn reset(&mut self, seg: usize) -> Result<()> {
        if self.lambda[seg] != 1.0 {
            self.stroke(seg, 1.0, 0.0)?;
        }
        let isolated = (seg == 0 || !self.merged[seg - 1]) && (seg + 1 == self.segs.len() || !self.merged[seg]);
        if !isolated {
            return Err(Error::InvalidInput("can only reset a decoupled segment".into()));
        }
        self.engine.reset_range(self.segs[seg].range.clone(), &self.initial[seg])?;
        self.joint_entropy = None;
        self.event(format!("reset {}", self.segs[seg].name));
        Ok(())
    }

    fn finish(mut self, keep_state: bool) -> Result<RunRecord> {
        if self.record.frames.last().map(|f| (f.time_ms - self.time).abs() > 1e-9).unwrap_or(true) {
            self.next_diag = self.time;
            self.sample(true)?;
        }
        if keep_state {
            self.record.final_state = Some(self.engine.state()?);
        }
        Ok(self.record)
    }
}

/// Piston stroke: compress to `length_ratio` then return.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeConfig {
    pub compression_ratio: f64,
    pub t_comp_ms: f64,
    pub t_expand_ms: f64,
}

impl Default for StrokeConfig {
    fn default() -> Self {
        Self { compression_ratio: 0.5, t_comp_ms: 15.0, t_expand_ms: 15.0 }
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidInput(format!("compression ratio must lie in (0, 1], got {r}")));
    }
    Ok(())
}

pub fn run_piston_stroke(layout: &MachineLayout, cfg: &StrokeConfig, opts: RecordOptions) -> Result<RunRecord> {
    if layout.subsystems.len() != 1 {
        return Err(Error::InvalidInput("piston stroke needs a single-subsystem layout".into()));
    }
    check_ratio(cfg.compression_ratio)?;
    let mut m = Machine::new(layout, opts)?;
    m.sample(true)?;
    m.stroke(0, 1.0 / cfg.compression_ratio, cfg.t_comp_ms)?;
    m.stroke(0, 1.0, cfg.t_expand_ms)?;
    m.finish(false)
}

/// Compress the piston, open and close the valve to the bath, expand.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PistonBathConfig {
    pub compression_ratio: f64,
    pub t_comp_ms: f64,
    pub t_merge_ms: f64,
    pub t_hold_ms: f64,
    pub t_split_ms: f64,
    pub decorrelate_on_split: bool,
}

impl Default for PistonBathConfig {
    fn default() -> Self {
        Self {
            compression_ratio: 0.5,
            t_comp_ms: 15.0,
            t_merge_ms: 20.0,
            t_hold_ms: 0.0,
            t_split_ms: 20.0,
            decorrelate_on_split: true,
        }
    }
}

pub fn run_piston_bath(layout: &MachineLayout, cfg: &PistonBathConfig, opts: RecordOptions) -> Result<RunRecord> {
    check_ratio(cfg.compression_ratio)?;
    let p = layout.index_of(Role::Piston).ok_or_else(|| Error::InvalidInput("layout has no piston".into()))?;
    let b = layout.index_of(Role::Bath).ok_or_else(|| Error::InvalidInput("layout has no bath".into()))?;
    if layout.subsystems.len() != 2 || b != p + 1 {
        return Err(Error::InvalidInput("piston-bath run needs the layout piston|bath".into()));
    }
    let mut m = Machine::new(layout, opts)?;
    m.sample(true)?;
    m.stroke(p, 1.0 / cfg.compression_ratio, cfg.t_comp_ms)?;
    m.valve(p, true, cfg.t_merge_ms)?;
    m.hold(cfg.t_hold_ms)?;
    m.valve(p, false, cfg.t_split_ms)?;
    if cfg.decorrelate_on_split {
        m.decorrelate(p)?;
    }
    m.stroke(p, 1.0, cfg.t_comp_ms)?;
    m.finish(false)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OttoConfig {
    pub t_comp_ms: f64,
    pub t_merge_ms: f64,
    pub t_split_ms: f64,
    /// Hold with an open valve, used when no cycle period is given.
    pub t_hold_ms: f64,
    /// When set, both holds are sized to fill this period.
    pub cycle_period_ms: Option<f64>,
    /// Piston length after compression over its initial length.
    pub compression_ratio: f64,
    pub n_cycles: usize,
    pub reset_bath_and_piston: bool,
    pub decorrelate_on_split: bool,
}

impl Default for OttoConfig {
    fn default() -> Self {
        Self {
            t_comp_ms: 15.0,
            t_merge_ms: 20.0,
            t_split_ms: 20.0,
            t_hold_ms: 0.0,
            cycle_period_ms: Some(110.0),
            compression_ratio: 0.5,
            n_cycles: 3,
            reset_bath_and_piston: false,
            decorrelate_on_split: true,
        }
    }
}

impl OttoConfig {
    /// Hold time of each valve.
    pub fn hold(&self) -> Result<f64> {
        let times = [self.t_comp_ms, self.t_merge_ms, self.t_split_ms, self.t_hold_ms];
        if times.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::InvalidInput("Otto times must be non-negative".into()));
        }
        check_ratio(self.compression_ratio)?;
        match self.cycle_period_ms {
            None => Ok(self.t_hold_ms),
            Some(period) => {
                let busy = 2.0 * (self.t_comp_ms + self.t_merge_ms + self.t_split_ms);
                let hold = 0.5 * (period - busy);
                if hold < -1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "cycle period {period} ms is shorter than the {busy} ms of strokes and ramps"
                    )));
                }
                Ok(hold.max(0.0))
            }
        }
    }

    pub fn period(&self) -> Result<f64> {
        Ok(2.0 * (self.t_comp_ms + self.t_merge_ms + self.t_split_ms + self.hold()?))
    }
}

/// Default refrigerator: homogeneous system, piston and bath of 40, 40 and
/// 120 μm at 50 nK on 0.625 μm pixels.
pub fn otto_layout(coupling: CouplingSpec) -> MachineLayout {
    MachineLayout {
        subsystems: vec![
            SubsystemSpec::homogeneous("system", Role::System, 40.0, 50.0),
            SubsystemSpec::homogeneous("piston", Role::Piston, 40.0, 50.0),
            SubsystemSpec::homogeneous("bath", Role::Bath, 120.0, 50.0),
        ],
        dz_um: 0.625,
        coupling,
    }
}

/// Refrigeration cycles on the layout system|piston|bath.
pub fn run_otto(layout: &MachineLayout, cfg: &OttoConfig, opts: RecordOptions) -> Result<RunRecord> {
    let hold = cfg.hold()?;
    let s = layout.index_of(Role::System).ok_or_else(|| Error::InvalidInput("layout has no system".into()))?;
    let p = layout.index_of(Role::Piston).ok_or_else(|| Error::InvalidInput("layout has no piston".into()))?;
    let b = layout.index_of(Role::Bath).ok_or_else(|| Error::InvalidInput("layout has no bath".into()))?;
    if layout.subsystems.len() != 3 || (s, p, b) != (0, 1, 2) {
        return Err(Error::InvalidInput("Otto run needs the layout system|piston|bath".into()));
    }
    let mut m = Machine::new(layout, opts)?;
    m.sample(true)?;
    for cycle in 0..cfg.n_cycles {
        if cycle > 0 && cfg.reset_bath_and_piston {
            m.reset(p)?;
            m.reset(b)?;
        }
        m.stroke(p, 1.0 / cfg.compression_ratio, cfg.t_comp_ms)?;
        m.valve(p, true, cfg.t_merge_ms)?;
        m.hold(hold)?;
        m.valve(p, false, cfg.t_split_ms)?;
        if cfg.decorrelate_on_split {
            m.decorrelate(p)?;
        }
        m.stroke(p, 1.0, cfg.t_comp_ms)?;
        m.valve(s, true, cfg.t_merge_ms)?;
        m.hold(hold)?;
        m.valve(s, false, cfg.t_split_ms)?;
        if cfg.decorrelate_on_split {
            m.decorrelate(s)?;
        }
        m.sample(true)?;
        m.record.cycle_boundaries_ms.push(m.time);
    }
    m.finish(false)
}

/// Merge of two subsystems followed by free evolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeProtocol {
    pub t_merge_ms: f64,
    pub t_after_ms: f64,
    /// Fraction of the peak density defining the bulk region.
    pub bulk_fraction: f64,
}

impl Default for MergeProtocol {
    fn default() -> Self {
        Self { t_merge_ms: 40.0, t_after_ms: 20.0, bulk_fraction: 0.99 }
    }
}

/// Probe names used by [`run_merge`].
pub const PROBE_BULK: &str = "rel_entropy_bulk";
pub const PROBE_FULL: &str = "rel_entropy_full";

/// Valve merge of a two-subsystem layout. Records the relative entropy of the
/// bulk region and of the whole system to the joint thermal state at the
/// first subsystem's temperature.
pub fn run_merge(layout: &MachineLayout, cfg: &MergeProtocol, opts: RecordOptions) -> Result<RunRecord> {
    if layout.subsystems.len() != 2 {
        return Err(Error::InvalidInput("merge needs a two-subsystem layout".into()));
    }
    let mut m = Machine::new(layout, opts)?;
    let joint = {
        m.weights[0] = 1.0;
        let h = m.current_ham();
        m.weights[0] = 0.0;
        h?
    };
    let reference = thermal_state(&joint, layout.subsystems[0].temperature_nk)?;
    let rho = nalgebra::DVector::from_iterator(m.n(), m.segs.iter().flat_map(|s| s.profile.rho.iter().copied()));
    let profile = DensityProfile::new(rho, layout.dz_um, 0.0)?;
    let bulk = profile.bulk_span(cfg.bulk_fraction);
    m.add_probe(Probe {
        name: PROBE_BULK.into(),
        pixels: bulk.clone(),
        reference: crate::gaussian::reduced_state(&reference, bulk)?,
    });
    let n = m.n();
    m.add_probe(Probe { name: PROBE_FULL.into(), pixels: 0..n, reference });
    m.sample(true)?;
    m.valve(0, true, cfg.t_merge_ms)?;
    m.hold(cfg.t_after_ms)?;
    m.finish(false)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalousConfig {
    pub t_merge_ms: f64,
    pub t_hold_ms: f64,
    pub t_split_ms: f64,
}

impl Default for AnomalousConfig {
    fn default() -> Self {
        Self { t_merge_ms: 60.0, t_hold_ms: 240.0, t_split_ms: 60.0 }
    }
}

/// Two subsystems at different temperatures merged, held and split without
/// dephasing; mutual information is recorded at every diagnostics frame.
pub fn run_anomalous(layout: &MachineLayout, cfg: &AnomalousConfig, opts: RecordOptions) -> Result<RunRecord> {
    if layout.subsystems.len() != 2 {
        return Err(Error::InvalidInput("anomalous flow run needs a two-subsystem layout".into()));
    }
    let opts = RecordOptions { mutual_information: true, ..opts };
    let mut m = Machine::new(layout, opts)?;
    m.sample(true)?;
    m.valve(0, true, cfg.t_merge_ms)?;
    m.hold(cfg.t_hold_ms)?;
    m.valve(0, false, cfg.t_split_ms)?;
    m.finish(false)
}

/// One row of the cooling comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleCooling {
    pub cycle: usize,
    pub energy_start_j: f64,
    pub energy_end_j: f64,
    pub extracted_j: f64,
    pub extracted_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoolingReport {
    pub cycles: Vec<CycleCooling>,
    /// Final over initial system energy.
    pub energy_ratio: f64,
    /// Final over initial fitted system temperature, when fits were recorded.
    pub temperature_ratio: Option<f64>,
    /// Dilution-law temperature ratio at the machine's (unchanged) density.
    pub dilution_ratio_fixed_density: f64,
    /// Density ratio ρ'/ρ₀ that dilution would need to reach the machine's
    /// temperature ratio.
    pub dilution_density_for_same_cooling: Option<f64>,
}

/// Compares the machine's cooling of `subsystem` with uniform dilution.
pub fn cooling_report(
    record: &RunRecord,
    subsystem: usize,
    temperature_nk: f64,
    density: f64,
) -> Result<CoolingReport> {
    let e0 = record
        .initial_energies
        .get(subsystem)
        .copied()
        .ok_or_else(|| Error::InvalidInput("no such subsystem".into()))?;
    let mut marks = vec![0.0];
    marks.extend(record.cycle_boundaries_ms.iter().copied());
    let mut cycles = Vec::new();
    for (k, w) in marks.windows(2).enumerate() {
        let a = record.energy_at(subsystem, w[0]).unwrap_or(e0);
        let b = record.energy_at(subsystem, w[1]).unwrap_or(a);
        cycles.push(CycleCooling {
            cycle: k + 1,
            energy_start_j: a,
            energy_end_j: b,
            extracted_j: a - b,
            extracted_fraction: (a - b) / e0,
        });
    }
    let e_end = cycles.last().map(|c| c.energy_end_j).unwrap_or(e0);
    let fits: Vec<f64> = record.frames.iter().filter_map(|f| f.subsystems[subsystem].temp_fit_nk).collect();
    let temperature_ratio = match (fits.first(), fits.last()) {
        (Some(a), Some(b)) => Some(b / a),
        _ => None,
    };
    let dilution_ratio_fixed_density = evaporative_scaling(temperature_nk, density, density)? / temperature_nk;
    let dilution_density_for_same_cooling = temperature_ratio.map(|r| r.powf(2.0 / 3.0));
    Ok(CoolingReport {
        cycles,
        energy_ratio: e_end / e0,
        temperature_ratio,
        dilution_ratio_fixed_density,
        dilution_density_for_same_cooling,
    })
}

/// Arrival time (ms) of a wave-packet crossing a homogeneous segment of
/// `length_um` `passes` times at the sound speed of `density`.
pub fn traversal_time(coupling: &CouplingSpec, density: f64, length_um: f64, passes: usize) -> f64 {
    passes as f64 * length_um / coupling.speed_of_sound(density)
}
