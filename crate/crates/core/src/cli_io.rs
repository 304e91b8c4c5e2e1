//! Run configuration, orchestration and output files.
//!
//! Configs are JSON objects. Parsing is strict: unknown keys are rejected,
//! numeric keys must carry a unit suffix, and every violation is reported at
//! once.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::gaussian::{
    evolve, normal_modes, symplectic_eigenvalues, thermal_state, thermal_state_excluding_zero_modes,
    thermal_symplectic_eigenvalue,
};
use crate::lattice::{
    build_profile, decouple, discretize, glue_profiles, split_hamiltonian, CouplingSpec, ProfileKind,
};
use crate::oracles::{dispersion, gaussian_smooth, zero_mode_gap, HomogeneousSpec, SuddenMerge};
use crate::protocols::{
    cooling_report, otto_layout, run_anomalous, run_merge, run_otto, run_piston_bath, run_piston_stroke,
    AnomalousConfig, MachineLayout, MergeProtocol, OttoConfig, PistonBathConfig, RecordOptions, Role, RunRecord,
    StrokeConfig, SubsystemSpec,
};
use crate::qtp::energy_density;

/// JSON schema of the run configuration.
pub const SCHEMA: &str = include_str!("../../../schema/config.schema.json");

pub const SCHEMA_VERSION: u32 = 1;

/// Suffixes accepted on numeric keys. Counts use the `n_` prefix instead.
pub const UNIT_SUFFIXES: [&str; 8] = ["_um", "_ms", "_nk", "_hz", "_per_um", "_um_per_ms", "_ratio", "_fraction"];

#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    Merge(MergeProtocol),
    Piston(StrokeConfig),
    PistonBath(PistonBathConfig),
    Otto(OttoConfig),
    Anomalous(AnomalousConfig),
    OracleCheck(OracleTolerances),
}

impl Protocol {
    pub fn kind(&self) -> &'static str {
        match self {
            Protocol::Merge(_) => "merge",
            Protocol::Piston(_) => "piston",
            Protocol::PistonBath(_) => "piston_bath",
            Protocol::Otto(_) => "otto",
            Protocol::Anomalous(_) => "anomalous",
            Protocol::OracleCheck(_) => "oracle_check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleTolerances {
    pub eigenvalue: f64,
    pub dispersion: f64,
    pub gap: f64,
    pub quench: f64,
}

impl Default for OracleTolerances {
    fn default() -> Self {
        Self { eigenvalue: 1e-8, dispersion: 0.01, gap: 0.02, quench: 0.05 }
    }
}

/// Coupling given by its physical parameters, kept for echoing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingParams {
    pub speed_of_sound_um_per_ms: f64,
    pub reference_density_per_um: f64,
    pub j_hz: f64,
}

impl Default for CouplingParams {
    fn default() -> Self {
        Self { speed_of_sound_um_per_ms: 2.0, reference_density_per_um: 100.0, j_hz: 0.01 }
    }
}

impl CouplingParams {
    pub fn coupling(&self) -> CouplingSpec {
        CouplingSpec::from_speed_of_sound(self.speed_of_sound_um_per_ms, self.reference_density_per_um, self.j_hz)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub coupling: CouplingParams,
    /// Absent for `oracle_check`.
    pub layout: Option<MachineLayout>,
    pub record: RecordOptions,
    /// Keep every n-th frame in `energy_density.csv`.
    pub frame_stride: usize,
    pub out_dir: Option<PathBuf>,
}

/// Default subsystems and pixel width for a protocol.
pub fn default_layout(kind: &str, coupling: CouplingSpec) -> Option<MachineLayout> {
    let (subsystems, dz_um) = match kind {
        "merge" => (
            vec![
                SubsystemSpec::erf_box("left", Role::System, 25.0, 50.0),
                SubsystemSpec::erf_box("right", Role::Bath, 25.0, 50.0),
            ],
            0.5,
        ),
        "piston" => (vec![SubsystemSpec::homogeneous("piston", Role::Piston, 40.0, 50.0)], 0.625),
        "piston_bath" => (
            vec![
                SubsystemSpec::homogeneous("piston", Role::Piston, 40.0, 50.0),
                SubsystemSpec::homogeneous("bath", Role::Bath, 120.0, 50.0),
            ],
            0.625,
        ),
        "otto" => return Some(otto_layout(coupling)),
        "anomalous" => (
            vec![
                SubsystemSpec::erf_box("cold", Role::System, 30.0, 50.0),
                SubsystemSpec::erf_box("hot", Role::Bath, 40.0, 60.0),
            ],
            0.5,
        ),
        _ => return None,
    };
    Some(MachineLayout { subsystems, dz_um, coupling })
}

fn has_unit(key: &str) -> bool {
    key.starts_with("n_") || UNIT_SUFFIXES.iter().any(|s| key.ends_with(s))
}

/// Reports numeric keys anywhere in the document that lack a unit suffix.
fn check_units(value: &Value, path: &str, errs: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                if v.is_number() && !has_unit(k) {
                    errs.push(format!("{p}: numeric key has no unit suffix"));
                }
                check_units(v, &p, errs);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                check_units(v, &format!("{path}[{i}]"), errs);
            }
        }
        _ => {}
    }
}

/// Strict reader over one JSON object.
struct Obj<'a> {
    path: String,
    map: &'a Map<String, Value>,
    seen: BTreeSet<&'a str>,
}

impl<'a> Obj<'a> {
    fn new(path: &str, value: &'a Value, errs: &mut Vec<String>) -> Option<Self> {
        match value.as_object() {
            Some(map) => Some(Self { path: path.to_string(), map, seen: BTreeSet::new() }),
            None => {
                errs.push(format!("{path}: expected an object"));
                None
            }
        }
    }

    fn key(&self, k: &str) -> String {
        if self.path.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.path)
        }
    }

    fn get(&mut self, k: &'a str) -> Option<&'a Value> {
        self.seen.insert(k);
        self.map.get(k).filter(|v| !v.is_null())
    }

    fn num(&mut self, k: &'a str, default: f64, valid: fn(f64) -> bool, rule: &str, errs: &mut Vec<String>) -> f64 {
        match self.get(k) {
            None => default,
            Some(v) => match v.as_f64() {
                Some(x) if valid(x) => x,
                Some(x) => {
                    errs.push(format!("{}: {rule}, got {x}", self.key(k)));
                    default
                }
                None => {
                    errs.push(format!("{}: expected a number", self.key(k)));
                    default
                }
            },
        }
    }

    fn opt_num(
        &mut self,
        k: &'a str,
        default: Option<f64>,
        valid: fn(f64) -> bool,
        rule: &str,
        errs: &mut Vec<String>,
    ) -> Option<f64> {
        if self.map.get(k).map(Value::is_null).unwrap_or(false) {
            self.seen.insert(k);
            return None;
        }
        match self.get(k) {
            None => default,
            Some(_) => Some(self.num(k, 0.0, valid, rule, errs)),
        }
    }

    fn count(&mut self, k: &'a str, default: usize, errs: &mut Vec<String>) -> usize {
        match self.get(k) {
            None => default,
            Some(v) => match v.as_u64() {
                Some(n) if n >= 1 => n as usize,
                _ => {
                    errs.push(format!("{}: expected a positive integer", self.key(k)));
                    default
                }
            },
        }
    }

    fn flag(&mut self, k: &'a str, default: bool, errs: &mut Vec<String>) -> bool {
        match self.get(k) {
            None => default,
            Some(v) => v.as_bool().unwrap_or_else(|| {
                errs.push(format!("{}: expected true or false", self.key(k)));
                default
            }),
        }
    }

    fn string(&mut self, k: &'a str, errs: &mut Vec<String>) -> Option<&'a str> {
        let v = self.get(k)?;
        let s = v.as_str();
        if s.is_none() {
            errs.push(format!("{}: expected a string", self.key(k)));
        }
        s
    }

    fn finish(self, errs: &mut Vec<String>) {
        for k in self.map.keys() {
            if !self.seen.contains(k.as_str()) && (!self.map[k].is_number() || has_unit(k)) {
                errs.push(format!("{}: unknown key", self.key(k)));
            }
        }
    }
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}
fn non_negative(x: f64) -> bool {
    x >= 0.0 && x.is_finite()
}
fn unit_interval(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}
const POSITIVE: &str = "must be positive";
const NON_NEGATIVE: &str = "must be non-negative";
const UNIT: &str = "must lie in (0, 1]";

/// Parses and validates a run configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
    let mut errs = Vec::new();
    check_units(&root, "", &mut errs);
    let Some(mut top) = Obj::new("", &root, &mut errs) else {
        return Err(Error::Config(errs));
    };
    let kind = match top.string("protocol", &mut errs) {
        Some(k) => k.to_string(),
        None => {
            if !top.map.contains_key("protocol") {
                errs.push(
                    "protocol: missing (one of merge, piston, piston_bath, otto, anomalous, oracle_check)".into(),
                );
            }
            String::new()
        }
    };
    if top.get("schema_version").is_some() {
        errs.push("schema_version: not a config key".into());
    }

    let mut coupling = CouplingParams::default();
    let mut layout = None;
    let layout_value = top.get("layout");
    if kind == "oracle_check" && layout_value.is_some() {
        errs.push("layout: oracle_check takes no layout".into());
    }
    if let Some(v) = layout_value {
        if let Some(mut o) = Obj::new("layout", v, &mut errs) {
            coupling.speed_of_sound_um_per_ms =
                o.num("speed_of_sound_um_per_ms", coupling.speed_of_sound_um_per_ms, positive, POSITIVE, &mut errs);
            coupling.reference_density_per_um =
                o.num("reference_density_per_um", coupling.reference_density_per_um, positive, POSITIVE, &mut errs);
            coupling.j_hz = o.num("j_hz", coupling.j_hz, non_negative, NON_NEGATIVE, &mut errs);
            if let Some(mut l) = default_layout(&kind, coupling.coupling()) {
                l.dz_um = o.num("dz_um", l.dz_um, positive, POSITIVE, &mut errs);
                if let Some(list) = o.get("subsystems") {
                    match list.as_array() {
                        Some(items) if !items.is_empty() => {
                            l.subsystems = items
                                .iter()
                                .enumerate()
                                .filter_map(|(i, item)| {
                                    parse_subsystem(&format!("layout.subsystems[{i}]"), item, &mut errs)
                                })
                                .collect();
                        }
                        _ => errs.push("layout.subsystems: expected a non-empty array".into()),
                    }
                }
                layout = Some(l);
            } else {
                o.get("dz_um");
                o.get("subsystems");
            }
            o.finish(&mut errs);
        }
    } else {
        layout = default_layout(&kind, coupling.coupling());
    }

    let params = top.get("params");
    let empty = Value::Object(Map::new());
    let pv = params.unwrap_or(&empty);
    let protocol = Obj::new("params", pv, &mut errs).and_then(|mut p| {
        let proto = parse_params(&kind, &mut p, &mut errs);
        p.finish(&mut errs);
        proto
    });
    if protocol.is_none() && !kind.is_empty() && !errs.iter().any(|e| e.starts_with("protocol")) {
        errs.push(format!("protocol: unknown kind '{kind}'"));
    }

    let mut record = RecordOptions::default();
    let mut frame_stride = 1;
    if let Some(v) = top.get("numerics") {
        if let Some(mut o) = Obj::new("numerics", v, &mut errs) {
            record.dt_max_ms = o.num("dt_max_ms", record.dt_max_ms, positive, POSITIVE, &mut errs);
            record.frame_interval_ms =
                o.num("frame_interval_ms", record.frame_interval_ms, positive, POSITIVE, &mut errs);
            record.diagnostics_interval_ms =
                o.num("diagnostics_interval_ms", record.diagnostics_interval_ms, positive, POSITIVE, &mut errs);
            record.fit_range_nk.0 = o.num("fit_min_nk", record.fit_range_nk.0, positive, POSITIVE, &mut errs);
            record.fit_range_nk.1 = o.num("fit_max_nk", record.fit_range_nk.1, positive, POSITIVE, &mut errs);
            record.temperature_fit = o.flag("temperature_fit", record.temperature_fit, &mut errs);
            record.mutual_information = o.flag("mutual_information", record.mutual_information, &mut errs);
            frame_stride = o.count("n_frame_stride", 1, &mut errs);
            o.finish(&mut errs);
        }
    }
    if record.fit_range_nk.0 >= record.fit_range_nk.1 {
        errs.push("numerics.fit_min_nk: must be below fit_max_nk".into());
    }
    let out_dir = top.string("out_dir", &mut errs).map(PathBuf::from);
    top.finish(&mut errs);

    if let Some(l) = &layout {
        if let Err(Error::Config(v)) = l.validate() {
            errs.extend(v.into_iter().map(|e| format!("layout: {e}")));
        }
        check_layout_roles(&kind, l, &mut errs);
    }
    if let Some(Protocol::Otto(cfg)) = &protocol {
        if let Err(e) = cfg.hold() {
            errs.push(format!("params: {e}"));
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    Ok(RunConfig { protocol: protocol.expect("checked above"), coupling, layout, record, frame_stride, out_dir })
}

fn check_layout_roles(kind: &str, l: &MachineLayout, errs: &mut Vec<String>) {
    let roles: Vec<Role> = l.subsystems.iter().map(|s| s.role).collect();
    let ok = match kind {
        "piston" => roles.len() == 1,
        "piston_bath" => roles == [Role::Piston, Role::Bath],
        "otto" => roles == [Role::System, Role::Piston, Role::Bath],
        "merge" | "anomalous" => roles.len() == 2,
        _ => true,
    };
    if !ok {
        let need = match kind {
            "piston" => "one subsystem",
            "piston_bath" => "piston, bath in that order",
            "otto" => "system, piston, bath in that order",
            _ => "two subsystems",
        };
        errs.push(format!("layout.subsystems: {kind} needs {need}"));
    }
}

fn parse_subsystem(path: &str, v: &Value, errs: &mut Vec<String>) -> Option<SubsystemSpec> {
    let mut o = Obj::new(path, v, errs)?;
    let name = o.string("name", errs).map(str::to_string);
    let role = match o.string("role", errs) {
        Some("system") => Some(Role::System),
        Some("piston") => Some(Role::Piston),
        Some("bath") => Some(Role::Bath),
        Some(other) => {
            errs.push(format!("{path}.role: unknown role '{other}'"));
            None
        }
        None => None,
    };
    let profile = match o.string("profile", errs) {
        None | Some("homogeneous") => ProfileKind::Homogeneous,
        Some("erf_box") => ProfileKind::ErfBox,
        Some("trapeze") => ProfileKind::Trapeze,
        Some(other) => {
            errs.push(format!("{path}.profile: unknown profile '{other}'"));
            ProfileKind::Homogeneous
        }
    };
    let shaped = profile != ProfileKind::Homogeneous;
    let missing = |k: &str, errs: &mut Vec<String>| errs.push(format!("{path}.{k}: missing"));
    if !o.map.contains_key("length_um") {
        missing("length_um", errs);
    }
    if !o.map.contains_key("temperature_nk") {
        missing("temperature_nk", errs);
    }
    let length_um = o.num("length_um", 1.0, positive, POSITIVE, errs);
    let temperature_nk = o.num("temperature_nk", 1.0, positive, POSITIVE, errs);
    let peak_density = o.num("peak_density_per_um", 100.0, positive, POSITIVE, errs);
    let edge_width_um = o.num("edge_width_um", if shaped { 4.0 } else { 0.0 }, non_negative, NON_NEGATIVE, errs);
    let edge_floor = o.num("edge_floor_ratio", if shaped { 0.5 } else { 1.0 }, unit_interval, UNIT, errs);
    if name.is_none() && !o.map.contains_key("name") {
        missing("name", errs);
    }
    if role.is_none() && !o.map.contains_key("role") {
        missing("role", errs);
    }
    o.finish(errs);
    Some(SubsystemSpec {
        name: name?,
        role: role?,
        length_um,
        temperature_nk,
        profile,
        peak_density,
        edge_width_um,
        edge_floor,
    })
}

fn parse_params<'a>(kind: &str, p: &mut Obj<'a>, errs: &mut Vec<String>) -> Option<Protocol> {
    let t = |p: &mut Obj<'a>, k: &'a str, d: f64, errs: &mut Vec<String>| p.num(k, d, non_negative, NON_NEGATIVE, errs);
    Some(match kind {
        "merge" => {
            let d = MergeProtocol::default();
            Protocol::Merge(MergeProtocol {
                t_merge_ms: t(p, "t_merge_ms", d.t_merge_ms, errs),
                t_after_ms: t(p, "t_after_ms", d.t_after_ms, errs),
                bulk_fraction: p.num("bulk_fraction", d.bulk_fraction, unit_interval, UNIT, errs),
            })
        }
        "piston" => {
            let d = StrokeConfig::default();
            Protocol::Piston(StrokeConfig {
                compression_ratio: p.num("compression_ratio", d.compression_ratio, unit_interval, UNIT, errs),
                t_comp_ms: t(p, "t_comp_ms", d.t_comp_ms, errs),
                t_expand_ms: t(p, "t_expand_ms", d.t_expand_ms, errs),
            })
        }
        "piston_bath" => {
            let d = PistonBathConfig::default();
            Protocol::PistonBath(PistonBathConfig {
                compression_ratio: p.num("compression_ratio", d.compression_ratio, unit_interval, UNIT, errs),
                t_comp_ms: t(p, "t_comp_ms", d.t_comp_ms, errs),
                t_merge_ms: t(p, "t_merge_ms", d.t_merge_ms, errs),
                t_hold_ms: t(p, "t_hold_ms", d.t_hold_ms, errs),
                t_split_ms: t(p, "t_split_ms", d.t_split_ms, errs),
                decorrelate_on_split: p.flag("decorrelate_on_split", d.decorrelate_on_split, errs),
            })
        }
        "otto" => {
            let d = OttoConfig::default();
            Protocol::Otto(OttoConfig {
                t_comp_ms: t(p, "t_comp_ms", d.t_comp_ms, errs),
                t_merge_ms: t(p, "t_merge_ms", d.t_merge_ms, errs),
                t_split_ms: t(p, "t_split_ms", d.t_split_ms, errs),
                t_hold_ms: t(p, "t_hold_ms", d.t_hold_ms, errs),
                cycle_period_ms: p.opt_num("cycle_period_ms", d.cycle_period_ms, positive, POSITIVE, errs),
                compression_ratio: p.num("compression_ratio", d.compression_ratio, unit_interval, UNIT, errs),
                n_cycles: p.count("n_cycles", d.n_cycles, errs),
                reset_bath_and_piston: p.flag("reset_bath_and_piston", d.reset_bath_and_piston, errs),
                decorrelate_on_split: p.flag("decorrelate_on_split", d.decorrelate_on_split, errs),
            })
        }
        "anomalous" => {
            let d = AnomalousConfig::default();
            Protocol::Anomalous(AnomalousConfig {
                t_merge_ms: t(p, "t_merge_ms", d.t_merge_ms, errs),
                t_hold_ms: t(p, "t_hold_ms", d.t_hold_ms, errs),
                t_split_ms: t(p, "t_split_ms", d.t_split_ms, errs),
            })
        }
        "oracle_check" => {
            let d = OracleTolerances::default();
            Protocol::OracleCheck(OracleTolerances {
                eigenvalue: p.num("eigenvalue_tol_fraction", d.eigenvalue, positive, POSITIVE, errs),
                dispersion: p.num("dispersion_tol_fraction", d.dispersion, positive, POSITIVE, errs),
                gap: p.num("gap_tol_fraction", d.gap, positive, POSITIVE, errs),
                quench: p.num("quench_tol_fraction", d.quench, positive, POSITIVE, errs),
            })
        }
        _ => return None,
    })
}

impl RunConfig {
    /// The config with all defaults filled in, in the input format.
    pub fn resolved(&self) -> Value {
        let params = match &self.protocol {
            Protocol::Merge(c) => {
                json!({"t_merge_ms": c.t_merge_ms, "t_after_ms": c.t_after_ms, "bulk_fraction": c.bulk_fraction})
            }
            Protocol::Piston(c) => {
                json!({"compression_ratio": c.compression_ratio, "t_comp_ms": c.t_comp_ms, "t_expand_ms": c.t_expand_ms})
            }
            Protocol::PistonBath(c) => json!({
                "compression_ratio": c.compression_ratio, "t_comp_ms": c.t_comp_ms, "t_merge_ms": c.t_merge_ms,
                "t_hold_ms": c.t_hold_ms, "t_split_ms": c.t_split_ms, "decorrelate_on_split": c.decorrelate_on_split,
            }),
            Protocol::Otto(c) => json!({
                "t_comp_ms": c.t_comp_ms, "t_merge_ms": c.t_merge_ms, "t_split_ms": c.t_split_ms, "t_hold_ms": c.t_hold_ms,
                "cycle_period_ms": c.cycle_period_ms, "compression_ratio": c.compression_ratio, "n_cycles": c.n_cycles,
                "reset_bath_and_piston": c.reset_bath_and_piston, "decorrelate_on_split": c.decorrelate_on_split,
            }),
            Protocol::Anomalous(c) => {
                json!({"t_merge_ms": c.t_merge_ms, "t_hold_ms": c.t_hold_ms, "t_split_ms": c.t_split_ms})
            }
            Protocol::OracleCheck(c) => json!({
                "eigenvalue_tol_fraction": c.eigenvalue, "dispersion_tol_fraction": c.dispersion,
                "gap_tol_fraction": c.gap, "quench_tol_fraction": c.quench,
            }),
        };
        let mut root = json!({
            "protocol": self.protocol.kind(),
            "params": params,
            "numerics": {
                "dt_max_ms": self.record.dt_max_ms,
                "frame_interval_ms": self.record.frame_interval_ms,
                "diagnostics_interval_ms": self.record.diagnostics_interval_ms,
                "fit_min_nk": self.record.fit_range_nk.0,
                "fit_max_nk": self.record.fit_range_nk.1,
                "temperature_fit": self.record.temperature_fit,
                "mutual_information": self.record.mutual_information,
                "n_frame_stride": self.frame_stride,
            },
        });
        if let Some(l) = &self.layout {
            let subs: Vec<Value> = l
                .subsystems
                .iter()
                .map(|s| {
                    json!({
                        "name": s.name,
                        "role": s.role,
                        "length_um": s.length_um,
                        "temperature_nk": s.temperature_nk,
                        "profile": s.profile,
                        "peak_density_per_um": s.peak_density,
                        "edge_width_um": s.edge_width_um,
                        "edge_floor_ratio": s.edge_floor,
                    })
                })
                .collect();
            root["layout"] = json!({
                "dz_um": l.dz_um,
                "speed_of_sound_um_per_ms": self.coupling.speed_of_sound_um_per_ms,
                "reference_density_per_um": self.coupling.reference_density_per_um,
                "j_hz": self.coupling.j_hz,
                "subsystems": subs,
            });
        }
        if let Some(d) = &self.out_dir {
            root["out_dir"] = json!(d.to_string_lossy());
        }
        root
    }
}

/// One oracle-versus-lattice comparison.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleCheck {
    fn new(name: &str, deviation: f64, tolerance: f64) -> Self {
        Self { name: name.into(), deviation, tolerance, pass: deviation <= tolerance }
    }
}

/// Largest relative deviation of thermal symplectic eigenvalues from
/// coth(ħω/2k_BT) on a homogeneous lattice.
pub fn check_thermal_eigenvalues(n: usize, j_hz: f64) -> Result<f64> {
    let c = CouplingSpec::from_speed_of_sound(2.0, 100.0, j_hz);
    let p = build_profile(ProfileKind::Homogeneous, 0.5 * n as f64, 100.0, 0.0, 1.0, 0.5)?;
    let h = discretize(&p, &c)?;
    let state = thermal_state(&h, 50.0)?;
    let mut d = symplectic_eigenvalues(&state)?;
    let modes = normal_modes(&h, 1e-12)?;
    let mut expected: Vec<f64> =
        modes.frequencies.iter().map(|&w| thermal_symplectic_eigenvalue(&h.constants, w, 50.0)).collect();
    d.sort_by(f64::total_cmp);
    expected.sort_by(f64::total_cmp);
    if d.len() != expected.len() {
        return Err(Error::Dimension("eigenvalue count differs from mode count".into()));
    }
    Ok(d.iter().zip(&expected).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max))
}

/// Largest relative deviation of the lowest `fraction·n` lattice frequencies
/// from πck/L, homogeneous, J = 0.
pub fn check_dispersion(n: usize, fraction: f64) -> Result<f64> {
    let length = 0.5 * n as f64;
    let c = CouplingSpec::from_speed_of_sound(2.0, 100.0, 0.0);
    let p = build_profile(ProfileKind::Homogeneous, length, 100.0, 0.0, 1.0, 0.5)?;
    let modes = normal_modes(&discretize(&p, &c)?, 1e-12)?;
    let k_max = (fraction * n as f64).floor() as usize;
    let spec = HomogeneousSpec::from_speed_of_sound(length, 100.0, 2.0, 50.0, k_max)?;
    let exact = dispersion(&spec);
    let lattice = &modes.frequencies[modes.n_zero..];
    Ok(lattice.iter().zip(&exact).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max))
}

/// Relative deviation of the lowest lattice frequency from the zero-mode gap.
pub fn check_zero_mode_gap(n: usize, j_hz: f64) -> Result<f64> {
    let length = 0.5 * n as f64;
    let c = CouplingSpec::from_speed_of_sound(2.0, 100.0, j_hz);
    let p = build_profile(ProfileKind::Homogeneous, length, 100.0, 0.0, 1.0, 0.5)?;
    let modes = normal_modes(&discretize(&p, &c)?, 1e-12)?;
    let lowest = modes.frequencies.iter().copied().fold(f64::INFINITY, f64::min);
    let spec = HomogeneousSpec::from_speed_of_sound(length, 100.0, 2.0, 50.0, 1)?;
    let gap = zero_mode_gap(j_hz, &spec)?.omega0;
    Ok(((lowest - gap) / gap).abs())
}

/// Sudden merge of two homogeneous halves: largest relative deviation of the
/// smoothed lattice energy density from the continuum mode sum at the
/// given times. Both sides are normalized by their own initial bulk value and
/// the continuum keeps as many modes per half as the lattice has pixels.
pub fn check_sudden_quench(n_half: usize, half_length_um: f64, times: &[f64], sigma_um: f64) -> Result<f64> {
    let dz = half_length_um / n_half as f64;
    let c = CouplingSpec::from_speed_of_sound(2.0, 100.0, 0.0);
    let half = build_profile(ProfileKind::Homogeneous, half_length_um, 100.0, 0.0, 1.0, dz)?;
    let joint = discretize(&glue_profiles(&half, &half)?, &c)?;
    let (_, _, link) = split_hamiltonian(&joint, n_half)?;
    let separated = decouple(&joint, &link)?;
    let s0 = thermal_state_excluding_zero_modes(&separated, 50.0)?;
    let spec = HomogeneousSpec::from_speed_of_sound(half_length_um, 100.0, 2.0, 50.0, n_half)?;
    let merge = SuddenMerge::new(&spec, n_half)?;
    let z: Vec<f64> = (0..2 * n_half).map(|i| (i as f64 + 0.5) * dz).collect();
    let lat_bulk = energy_density(&s0, &separated)?[n_half / 2] / dz;
    let oracle_bulk = merge.initial_bulk_density(n_half);
    let mut worst: f64 = 0.0;
    for &t in times {
        let e = energy_density(&evolve(&s0, &joint, t)?, &joint)?;
        let lat: Vec<f64> = e.iter().map(|x| x / dz / lat_bulk).collect();
        let ora: Vec<f64> = merge.energy_density(t, &z).iter().map(|x| x / oracle_bulk).collect();
        let (ls, os) = (gaussian_smooth(&lat, dz, sigma_um), gaussian_smooth(&ora, dz, sigma_um));
        worst = ls.iter().zip(&os).map(|(a, b)| ((a - b) / b).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

/// Runs every oracle comparison at its standard size.
pub fn oracle_checks(tol: &OracleTolerances) -> Result<Vec<OracleCheck>> {
    let times: Vec<f64> = (0..=12).map(f64::from).collect();
    Ok(vec![
        OracleCheck::new("thermal_eigenvalues", check_thermal_eigenvalues(200, 0.01)?, tol.eigenvalue),
        OracleCheck::new("dispersion", check_dispersion(200, 0.3)?, tol.dispersion),
        OracleCheck::new("zero_mode_gap", check_zero_mode_gap(200, 0.01)?, tol.gap),
        OracleCheck::new("sudden_quench", check_sudden_quench(100, 25.0, &times, 2.0)?, tol.quench),
    ])
}

/// Result of running a config.
#[derive(Clone, Debug)]
pub enum RunOutput {
    Record(RunRecord),
    Oracles(Vec<OracleCheck>),
}

pub fn run(config: &RunConfig) -> Result<RunOutput> {
    let layout = || config.layout.as_ref().ok_or_else(|| Error::InvalidInput("protocol needs a layout".into()));
    let opts = config.record;
    Ok(match &config.protocol {
        Protocol::Merge(c) => RunOutput::Record(run_merge(layout()?, c, opts)?),
        Protocol::Piston(c) => RunOutput::Record(run_piston_stroke(layout()?, c, opts)?),
        Protocol::PistonBath(c) => RunOutput::Record(run_piston_bath(layout()?, c, opts)?),
        Protocol::Otto(c) => RunOutput::Record(run_otto(layout()?, c, opts)?),
        Protocol::Anomalous(c) => RunOutput::Record(run_anomalous(layout()?, c, opts)?),
        Protocol::OracleCheck(t) => RunOutput::Oracles(oracle_checks(t)?),
    })
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// `time_ms,pixel,z_um,energy_rel`, one row per pixel of every `stride`-th frame.
pub fn energy_density_csv(record: &RunRecord, stride: usize) -> String {
    let mut out = String::from("time_ms,pixel,z_um,energy_rel\n");
    for f in record.frames.iter().step_by(stride.max(1)) {
        for (i, (z, e)) in f.z_um.iter().zip(&f.energy_rel).enumerate() {
            let _ = writeln!(out, "{},{i},{},{}", num(f.time_ms), num(*z), num(*e));
        }
    }
    out
}

/// `time_ms,subsystem,energy_rel,energy_J,rel_entropy,temp_fit_nK,mutual_info`;
/// diagnostics left empty where not computed.
pub fn subsystems_csv(record: &RunRecord) -> String {
    let mut out = String::from("time_ms,subsystem,energy_rel,energy_J,rel_entropy,temp_fit_nK,mutual_info\n");
    for f in &record.frames {
        for (name, s) in record.subsystem_names.iter().zip(&f.subsystems) {
            let _ = writeln!(
                out,
                "{},{name},{},{},{},{},{}",
                num(f.time_ms),
                num(s.energy_rel),
                num(s.energy_j),
                opt(s.rel_entropy),
                opt(s.temp_fit_nk),
                opt(s.mutual_info)
            );
        }
    }
    out
}

/// Summary document for a finished run.
pub fn summary(config: &RunConfig, output: &RunOutput) -> Result<Value> {
    let mut doc = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "schema_version": SCHEMA_VERSION,
        "config": config.resolved(),
        "tolerances": {
            "dt_max_ms": config.record.dt_max_ms,
            "cone_tolerance": 1e-8,
            "zero_mode_fraction": 1e-12,
        },
    });
    match output {
        RunOutput::Oracles(checks) => {
            doc["oracle_checks"] = serde_json::to_value(checks).expect("plain data");
            doc["pass"] = json!(checks.iter().all(|c| c.pass));
        }
        RunOutput::Record(rec) => {
            let layout = config.layout.as_ref().expect("record runs have a layout");
            doc["subsystems"] = json!(rec.subsystem_names);
            doc["initial_energies_J"] = json!(rec.initial_energies);
            doc["bulk_energy_density_J_per_um"] = json!(rec.bulk_energy_density);
            doc["events"] = serde_json::to_value(&rec.events).expect("plain data");
            doc["cycle_boundaries_ms"] = json!(rec.cycle_boundaries_ms);
            if let Protocol::Otto(_) = config.protocol {
                let s = layout.index_of(Role::System).unwrap_or(0);
                let spec = &layout.subsystems[s];
                let report = cooling_report(rec, s, spec.temperature_nk, spec.peak_density)?;
                doc["per_cycle_extracted_J"] = json!(report.cycles.iter().map(|c| c.extracted_j).collect::<Vec<_>>());
                doc["cooling"] = serde_json::to_value(&report).expect("plain data");
            }
            if rec.subsystem_names.len() == 2 {
                let t = |i: usize| layout.subsystems[i].temperature_nk;
                let (hot, cold) = if t(1) > t(0) { (1, 0) } else { (0, 1) };
                doc["flow_reversal_intervals_ms"] = json!(rec.flow_reversals(hot, cold));
            }
            let probes: Map<String, Value> = rec
                .frames
                .iter()
                .rev()
                .find(|f| !f.probes.is_empty())
                .map(|f| f.probes.iter().map(|(n, v)| (n.clone(), json!(v))).collect())
                .unwrap_or_default();
            if !probes.is_empty() {
                doc["final_probes"] = Value::Object(probes);
            }
        }
    }
    Ok(doc)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

/// Writes `energy_density.csv`, `subsystems.csv` and `summary.json` into `dir`.
pub fn write_outputs(config: &RunConfig, output: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
    let mut written = Vec::new();
    if let RunOutput::Record(rec) = output {
        let p = dir.join("energy_density.csv");
        write(&p, &energy_density_csv(rec, config.frame_stride))?;
        written.push(p);
        let p = dir.join("subsystems.csv");
        write(&p, &subsystems_csv(rec))?;
        written.push(p);
    }
    let p = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary(config, output)?).expect("serializable");
    write(&p, &(text + "\n"))?;
    written.push(p);
    Ok(written)
}
