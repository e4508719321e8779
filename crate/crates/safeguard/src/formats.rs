//! File formats: parameter and cache JSON, Lipschitz bundle JSON, flow-grid
//! and simulation-log CSV, report JSON.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, RowVector4, Vector4};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use safeguard_core::robustness::RowLipschitz;
use safeguard_core::{
    BackupPolicy, EpsilonProvider, FilterContext, FlowGrid, LipschitzBundle, QuadraticBackupSet, SegwayParams, State,
    StateBox,
};

use crate::config::{BoxConfig, SynthesisConfig};
use crate::sim::{LogRow, Report, SimLog, TickStatus};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}, column {column}: {message}")]
    Json { path: PathBuf, line: usize, column: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Schema(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.into(), source }
}

fn json_err(path: &Path, e: serde_json::Error) -> FormatError {
    FormatError::Json { path: path.into(), line: e.line(), column: e.column(), message: e.to_string() }
}

fn schema(msg: impl Into<String>) -> FormatError {
    FormatError::Schema(msg.into())
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| json_err(path, e))
}

/// Segway parameters, every key required.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsDoc {
    pub body_mass: f64,
    pub wheel_assembly_mass: f64,
    pub body_inertia: f64,
    pub com_distance: f64,
    pub wheel_radius: f64,
    pub gravity: f64,
    pub viscous_friction_wheel: f64,
    pub viscous_friction_pitch: f64,
    pub torque_limit: f64,
}

impl From<SegwayParams> for ParamsDoc {
    fn from(p: SegwayParams) -> Self {
        Self {
            body_mass: p.body_mass,
            wheel_assembly_mass: p.wheel_assembly_mass,
            body_inertia: p.body_inertia,
            com_distance: p.com_distance,
            wheel_radius: p.wheel_radius,
            gravity: p.gravity,
            viscous_friction_wheel: p.viscous_friction_wheel,
            viscous_friction_pitch: p.viscous_friction_pitch,
            torque_limit: p.torque_limit,
        }
    }
}

impl From<ParamsDoc> for SegwayParams {
    fn from(d: ParamsDoc) -> Self {
        Self {
            body_mass: d.body_mass,
            wheel_assembly_mass: d.wheel_assembly_mass,
            body_inertia: d.body_inertia,
            com_distance: d.com_distance,
            wheel_radius: d.wheel_radius,
            gravity: d.gravity,
            viscous_friction_wheel: d.viscous_friction_wheel,
            viscous_friction_pitch: d.viscous_friction_pitch,
            torque_limit: d.torque_limit,
        }
    }
}

/// Reads a parameter file. Range checks are left to the caller.
pub fn read_params(path: &Path) -> Result<SegwayParams, FormatError> {
    Ok(read_json::<ParamsDoc>(path)?.into())
}

pub fn params_json(p: &SegwayParams) -> String {
    serde_json::to_string_pretty(&ParamsDoc::from(*p)).expect("params serialize")
}

/// Bundle as a JSON object keyed by row name (`tau0`..., `B`) plus the
/// `alpha` and `h` constants.
pub fn bundle_to_json(b: &LipschitzBundle) -> Value {
    let mut m = Map::new();
    let n = b.rows.len();
    for (i, r) in b.rows.iter().enumerate() {
        m.insert(LipschitzBundle::row_name(i, n), json!({"value": r.value, "lie_f": r.lie_f, "lie_g": r.lie_g}));
    }
    m.insert("alpha".into(), json!(b.alpha));
    m.insert("h".into(), json!(b.h));
    Value::Object(m)
}

pub fn bundle_from_json(v: &Value) -> Result<LipschitzBundle, FormatError> {
    let m = v.as_object().ok_or_else(|| schema("bundle must be a JSON object"))?;
    let num = |key: &str, v: Option<&Value>| v.and_then(Value::as_f64).ok_or_else(|| schema(format!("bundle key `{key}` must be a number")));
    let mut n_traj = 0;
    while m.contains_key(&format!("tau{n_traj}")) {
        n_traj += 1;
    }
    let extra = m.len() - n_traj;
    if n_traj < 2 || extra != 3 || !m.contains_key("B") {
        return Err(schema("bundle needs rows tau0..tauN (N >= 1), B, alpha and h and nothing else"));
    }
    let mut rows = Vec::with_capacity(n_traj + 1);
    for i in 0..=n_traj {
        let name = LipschitzBundle::row_name(i, n_traj + 1);
        let r = m[&name].as_object().ok_or_else(|| schema(format!("bundle row `{name}` must be an object")))?;
        if r.len() != 3 {
            return Err(schema(format!("bundle row `{name}` needs exactly value, lie_f and lie_g")));
        }
        rows.push(RowLipschitz {
            value: num(&format!("{name}.value"), r.get("value"))?,
            lie_f: num(&format!("{name}.lie_f"), r.get("lie_f"))?,
            lie_g: num(&format!("{name}.lie_g"), r.get("lie_g"))?,
        });
    }
    let b = LipschitzBundle { rows, alpha: num("alpha", m.get("alpha"))?, h: num("h", m.get("h"))? };
    b.validate().map_err(|e| schema(e.to_string()))?;
    Ok(b)
}

pub fn read_bundle(path: &Path) -> Result<LipschitzBundle, FormatError> {
    bundle_from_json(&read_json::<Value>(path)?)
}

/// Synthesis inputs the cache was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheKey {
    pub params: ParamsDoc,
    pub x_max: f64,
    pub error_axes: Vec<usize>,
    pub synthesis: SynthesisConfig,
}

/// Synthesized policy, backup set, bundle and tightening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheDoc {
    pub key: CacheKey,
    pub gain: [f64; 4],
    pub torque_limit: f64,
    pub template: [f64; 4],
    /// Backup-set shape, row-major.
    pub p: [f64; 16],
    pub c: f64,
    pub mu: f64,
    pub sample_box: BoxConfig,
    pub bundle: Value,
}

fn state_array(s: &State) -> [f64; 4] {
    [s.position, s.velocity, s.pitch, s.pitch_rate]
}

fn state_of(a: [f64; 4]) -> State {
    State::new(a[0], a[1], a[2], a[3])
}

impl CacheDoc {
    pub fn from_context(ctx: &FilterContext, key: CacheKey) -> Self {
        let mut p = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                p[4 * i + j] = ctx.backup_set.shape[(i, j)];
            }
        }
        Self {
            key,
            gain: [ctx.policy.gain[0], ctx.policy.gain[1], ctx.policy.gain[2], ctx.policy.gain[3]],
            torque_limit: ctx.policy.torque_limit,
            template: state_array(&ctx.policy.template),
            p,
            c: ctx.backup_set.level,
            mu: ctx.mu,
            sample_box: BoxConfig { lo: ctx.sample_box.lo.into(), hi: ctx.sample_box.hi.into() },
            bundle: bundle_to_json(&ctx.bundle),
        }
    }

    /// Rebuilds the filter context. Run-time settings (`gamma`, slack weight,
    /// tolerance, flow) come from the key.
    pub fn to_context(&self, epsilon: f64) -> Result<FilterContext, FormatError> {
        let params: SegwayParams = self.key.params.into();
        let template = state_of(self.template);
        let policy = BackupPolicy { gain: RowVector4::from(self.gain), torque_limit: self.torque_limit, template };
        let shape = Matrix4::from_row_slice(&self.p);
        let backup_set = QuadraticBackupSet::new(shape, self.c, template).map_err(|e| schema(e.to_string()))?;
        let s = &self.key.synthesis;
        let ctx = FilterContext {
            params,
            policy,
            backup_set,
            safe: safeguard_core::SafeSetSpec { x_max: self.key.x_max },
            flow: safeguard_core::FlowSettings { horizon: s.horizon, dt_int: s.dt_int, n_constraints: s.n_constraints },
            bundle: bundle_from_json(&self.bundle)?,
            sample_box: StateBox::new(Vector4::from(self.sample_box.lo), Vector4::from(self.sample_box.hi)),
            epsilon: EpsilonProvider::Constant(epsilon),
            mu: self.mu,
            gamma: s.gamma,
            slack_weight: s.slack_weight,
            solver_tol: s.solver_tol,
        };
        ctx.validate().map_err(|e| schema(e.to_string()))?;
        Ok(ctx)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cache serializes")
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        read_json(path)
    }
}

pub fn flow_grid_header() -> Vec<String> {
    let mut h: Vec<String> = ["tau", "x", "v", "pitch", "pitchrate"].iter().map(|s| s.to_string()).collect();
    h.extend((0..16).map(|k| format!("S{}{}", k / 4, k % 4)));
    h
}

/// One row per grid time: `tau`, the state, then `S` row-major.
pub fn write_flow_grid<W: Write>(grid: &FlowGrid, out: W) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(flow_grid_header())?;
    for ((tau, s), sens) in grid.taus.iter().zip(&grid.states).zip(&grid.sensitivities) {
        let mut rec = vec![tau.to_string()];
        rec.extend(state_array(s).iter().map(f64::to_string));
        for i in 0..4 {
            for j in 0..4 {
                rec.push(sens[(i, j)].to_string());
            }
        }
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| FormatError::Csv(e.into()))?;
    Ok(())
}

/// `(tau, state, S)` rows of a flow-grid CSV.
pub fn read_flow_grid<R: Read>(input: R) -> Result<Vec<(f64, State, Matrix4<f64>)>, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(flow_grid_header().iter().map(String::as_str)) {
        return Err(schema("unexpected flow grid header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let v = parse_floats(&rec?)?;
        out.push((v[0], state_of([v[1], v[2], v[3], v[4]]), Matrix4::from_row_slice(&v[5..21])));
    }
    Ok(out)
}

fn parse_floats(rec: &csv::StringRecord) -> Result<Vec<f64>, FormatError> {
    rec.iter().map(|f| f.parse::<f64>().map_err(|_| schema(format!("not a number: `{f}`")))).collect()
}

pub const SIMLOG_FIXED_COLUMNS: [&str; 16] = [
    "t",
    "x_true",
    "v_true",
    "pitch_true",
    "pitchrate_true",
    "x_est",
    "v_est",
    "pitch_est",
    "pitchrate_est",
    "u_des",
    "u_applied",
    "slack",
    "status",
    "h_true",
    "h_est",
    "hB_true",
];

/// Header for a log with `n_margins` margin columns (trajectory rows then B).
pub fn simlog_header(n_margins: usize) -> Vec<String> {
    let mut h: Vec<String> = SIMLOG_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend((0..n_margins).map(|i| format!("margin_{}", LipschitzBundle::row_name(i, n_margins))));
    h
}

/// Writes the log. Floats use the shortest representation that parses back
/// to the same value.
pub fn write_simlog<W: Write>(log: &SimLog, out: W) -> Result<(), FormatError> {
    let n = log.n_margins();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(simlog_header(n))?;
    for r in &log.rows {
        if r.margins.len() != n {
            return Err(schema("margin count changes within the log"));
        }
        let mut rec: Vec<String> = vec![r.t.to_string()];
        rec.extend(state_array(&r.x_true).iter().chain(&state_array(&r.x_est)).map(f64::to_string));
        rec.extend([r.u_des, r.u_applied, r.slack].iter().map(f64::to_string));
        rec.push(r.status.as_str().into());
        rec.extend([r.h_true, r.h_est, r.hb_true].iter().chain(&r.margins).map(f64::to_string));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| FormatError::Csv(e.into()))?;
    Ok(())
}

pub fn read_simlog<R: Read>(input: R) -> Result<SimLog, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let n = header.len().checked_sub(SIMLOG_FIXED_COLUMNS.len()).ok_or_else(|| schema("log header is too short"))?;
    if header.iter().ne(simlog_header(n).iter().map(String::as_str)) {
        return Err(schema("unexpected log header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let status = TickStatus::parse(&rec[12]).ok_or_else(|| schema(format!("unknown status `{}`", &rec[12])))?;
        // status column parsed above; a placeholder keeps the indices aligned
        let fields: csv::StringRecord = rec.iter().enumerate().map(|(i, f)| if i == 12 { "0" } else { f }).collect();
        let v = parse_floats(&fields)?;
        rows.push(LogRow {
            t: v[0],
            x_true: state_of([v[1], v[2], v[3], v[4]]),
            x_est: state_of([v[5], v[6], v[7], v[8]]),
            u_des: v[9],
            u_applied: v[10],
            slack: v[11],
            status,
            h_true: v[13],
            h_est: v[14],
            hb_true: v[15],
            margins: v[16..].to_vec(),
        });
    }
    Ok(SimLog { rows, error: None })
}

/// Report with the run's identity and filter timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub controller: String,
    pub epsilon: f64,
    #[serde(flatten)]
    pub report: Report,
    pub filter_median_seconds: f64,
    pub filter_p99_seconds: f64,
}

/// `q`-quantile of the samples by nearest rank; zero when empty.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let idx = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
    s[idx]
}
