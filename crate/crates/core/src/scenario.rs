//! Problem instances: geometry, channel constants, power and speed limits.
//!
//! A [`Scenario`] is immutable once built. Config documents carry dB/dBm
//! values; everything stored here is linear SI.

use std::fmt;

use serde::Serialize;
use toml::{Table, Value};

use crate::channel::{inside_nfz, Point};

/// One UAV: fixed start/end positions and its per-slot transmit power budget.
#[derive(Debug, Clone, PartialEq)]
pub struct UavSpec {
    pub start: Point,
    pub end: Point,
    /// Watts.
    pub peak_power: f64,
}

/// Cylindrical no-fly zone; only its ground disk matters since `height > altitude`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoFlyZone {
    pub center: Point,
    pub radius: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub num_slots: usize,
    /// Seconds.
    pub slot_duration: f64,
    pub uavs: Vec<UavSpec>,
    pub users: Vec<Point>,
    pub eves: Vec<Point>,
    pub nfzs: Vec<NoFlyZone>,
    /// Meters.
    pub altitude: f64,
    /// m/s.
    pub max_speed: f64,
    /// Meters.
    pub safety_distance: f64,
    pub num_subcarriers: usize,
    /// Linear β0 at the 1 m reference distance.
    pub ref_gain: f64,
    /// Watts per subcarrier.
    pub noise_power: f64,
    /// Informational only; rates are reported in bps/Hz.
    pub bandwidth_hz: Option<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScenarioError {
    #[error("malformed document: {0}")]
    Parse(String),
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{path}` has the wrong type, expected {expected}")]
    WrongType { path: String, expected: &'static str },
    #[error("key `{0}` needs a unit suffix")]
    UnitMissing(String),
    #[error("key `{0}` is not finite")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    linear_to_db(w) + 30.0
}

impl Scenario {
    pub fn num_uavs(&self) -> usize {
        self.uavs.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_eves(&self) -> usize {
        self.eves.len()
    }

    /// Mission time `T = N·δt` in seconds.
    pub fn mission_time(&self) -> f64 {
        self.num_slots as f64 * self.slot_duration
    }

    /// Per-slot displacement cap `V = v_max·δt`.
    pub fn max_step(&self) -> f64 {
        self.max_speed * self.slot_duration
    }

    /// Reference channel gain-to-noise ratio `β0/σ²`.
    pub fn ref_snr(&self) -> f64 {
        self.ref_gain / self.noise_power
    }

    /// Same instance with a different mission time (slot duration unchanged).
    ///
    /// `mission_time` is rounded to the nearest whole number of slots.
    pub fn with_mission_time(&self, mission_time: f64) -> Scenario {
        let mut s = self.clone();
        s.num_slots = (mission_time / self.slot_duration).round().max(1.0) as usize;
        s
    }

    /// Same instance with every UAV's peak power replaced.
    pub fn with_peak_power(&self, watts: f64) -> Scenario {
        let mut s = self.clone();
        for u in &mut s.uavs {
            u.peak_power = watts;
        }
        s
    }

    pub fn with_subcarriers(&self, n: usize) -> Scenario {
        let mut s = self.clone();
        s.num_subcarriers = n;
        s
    }

    /// Serializes to the config document format (dB/dBm for gains and powers).
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Time {
            #[serde(rename = "T_s")]
            t_s: f64,
            dt_s: f64,
        }
        #[derive(Serialize)]
        struct Channel {
            #[serde(rename = "beta0_dB")]
            beta0_db: f64,
            #[serde(rename = "noise_dBm")]
            noise_dbm: f64,
            #[serde(rename = "bandwidth_Hz", skip_serializing_if = "Option::is_none")]
            bandwidth_hz: Option<f64>,
        }
        #[derive(Serialize)]
        struct Geometry {
            altitude_m: f64,
            vmax_mps: f64,
            safety_m: f64,
        }
        #[derive(Serialize)]
        struct Uav {
            start: [f64; 2],
            end: [f64; 2],
            #[serde(rename = "peak_dBm")]
            peak_dbm: f64,
        }
        #[derive(Serialize)]
        struct Nfz {
            center: [f64; 2],
            radius_m: f64,
            height_m: f64,
        }
        #[derive(Serialize)]
        struct Doc {
            subcarriers: usize,
            users: Vec<[f64; 2]>,
            eves: Vec<[f64; 2]>,
            time: Time,
            channel: Channel,
            geometry: Geometry,
            uavs: Vec<Uav>,
            nfzs: Vec<Nfz>,
        }
        let doc = Doc {
            subcarriers: self.num_subcarriers,
            users: self.users.iter().map(|&p| p.into()).collect(),
            eves: self.eves.iter().map(|&p| p.into()).collect(),
            time: Time {
                t_s: self.mission_time(),
                dt_s: self.slot_duration,
            },
            channel: Channel {
                beta0_db: linear_to_db(self.ref_gain),
                noise_dbm: watts_to_dbm(self.noise_power),
                bandwidth_hz: self.bandwidth_hz,
            },
            geometry: Geometry {
                altitude_m: self.altitude,
                vmax_mps: self.max_speed,
                safety_m: self.safety_distance,
            },
            uavs: self
                .uavs
                .iter()
                .map(|u| Uav {
                    start: u.start.into(),
                    end: u.end.into(),
                    peak_dbm: watts_to_dbm(u.peak_power),
                })
                .collect(),
            nfzs: self
                .nfzs
                .iter()
                .map(|z| Nfz {
                    center: z.center.into(),
                    radius_m: z.radius,
                    height_m: z.height,
                })
                .collect(),
        };
        toml::to_string(&doc).expect("scenario document serializes")
    }

    /// Element-wise comparison with a relative tolerance on every real field.
    pub fn approx_eq(&self, other: &Scenario, rel: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300);
        let pt = |a: &Point, b: &Point| close(a.x, b.x) && close(a.y, b.y);
        self.num_slots == other.num_slots
            && self.num_subcarriers == other.num_subcarriers
            && close(self.slot_duration, other.slot_duration)
            && close(self.altitude, other.altitude)
            && close(self.max_speed, other.max_speed)
            && close(self.safety_distance, other.safety_distance)
            && close(self.ref_gain, other.ref_gain)
            && close(self.noise_power, other.noise_power)
            && self.uavs.len() == other.uavs.len()
            && self.uavs.iter().zip(&other.uavs).all(|(a, b)| {
                pt(&a.start, &b.start) && pt(&a.end, &b.end) && close(a.peak_power, b.peak_power)
            })
            && self.users.len() == other.users.len()
            && self.users.iter().zip(&other.users).all(|(a, b)| pt(a, b))
            && self.eves.len() == other.eves.len()
            && self.eves.iter().zip(&other.eves).all(|(a, b)| pt(a, b))
            && self.nfzs.len() == other.nfzs.len()
            && self.nfzs.iter().zip(&other.nfzs).all(|(a, b)| {
                pt(&a.center, &b.center) && close(a.radius, b.radius) && close(a.height, b.height)
            })
    }
}

/// The two-UAV, two-user, three-eavesdropper instance with two no-fly zones.
pub fn default_scenario() -> Scenario {
    Scenario {
        num_slots: 60,
        slot_duration: 1.0,
        uavs: vec![
            UavSpec {
                start: Point::new(0.0, 0.0),
                end: Point::new(500.0, 0.0),
                peak_power: 1.0,
            },
            UavSpec {
                start: Point::new(0.0, 500.0),
                end: Point::new(500.0, 500.0),
                peak_power: 1.0,
            },
        ],
        users: vec![Point::new(50.0, 50.0), Point::new(400.0, 450.0)],
        eves: vec![
            Point::new(70.0, 70.0),
            Point::new(150.0, 250.0),
            Point::new(250.0, 150.0),
        ],
        nfzs: vec![
            NoFlyZone {
                center: Point::new(150.0, 325.0),
                radius: 60.0,
                height: 150.0,
            },
            NoFlyZone {
                center: Point::new(350.0, 325.0),
                radius: 60.0,
                height: 150.0,
            },
        ],
        altitude: 100.0,
        max_speed: 20.0,
        safety_distance: 50.0,
        num_subcarriers: 16,
        ref_gain: 1e-5,
        noise_power: 1e-13,
        bandwidth_hz: Some(2e6),
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// A count, duration, power, distance or gain that must be strictly positive is not.
    NonPositive { field: String, value: f64 },
    NotFinite { field: String },
    EmptyList { field: &'static str },
    /// UAV endpoint inside a no-fly disk.
    EndpointInNfz { uav: usize, endpoint: &'static str, zone: usize },
    /// Zone not taller than the flight altitude.
    NfzTooLow { zone: usize },
    EndpointSeparation { endpoint: &'static str, a: usize, b: usize, distance: f64 },
    /// Straight-line distance between endpoints exceeds `N·V`.
    Unreachable { uav: usize, distance: f64, budget: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositive { field, value } => write!(f, "{field} must be > 0 (got {value})"),
            Violation::NotFinite { field } => write!(f, "{field} is not finite"),
            Violation::EmptyList { field } => write!(f, "{field} must not be empty"),
            Violation::EndpointInNfz { uav, endpoint, zone } => {
                write!(f, "UAV {uav} {endpoint} position lies inside no-fly zone {zone}")
            }
            Violation::NfzTooLow { zone } => write!(f, "no-fly zone {zone} is not taller than the flight altitude"),
            Violation::EndpointSeparation { endpoint, a, b, distance } => write!(
                f,
                "UAVs {a} and {b} {endpoint} positions are {distance:.3} m apart, below the safety distance"
            ),
            Violation::Unreachable { uav, distance, budget } => write!(
                f,
                "UAV {uav} cannot reach its end point: {distance:.3} m > {budget:.3} m"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn is_reachable(&self) -> bool {
        !self.violations.iter().any(|v| matches!(v, Violation::Unreachable { .. }))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "feasible");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn validate(s: &Scenario) -> ValidationReport {
    let mut out = Vec::new();
    let mut positive = |field: &str, v: f64| {
        if !v.is_finite() {
            out.push(Violation::NotFinite { field: field.to_string() });
        } else if v <= 0.0 {
            out.push(Violation::NonPositive {
                field: field.to_string(),
                value: v,
            });
        }
    };
    positive("num_slots", s.num_slots as f64);
    positive("slot_duration", s.slot_duration);
    positive("num_subcarriers", s.num_subcarriers as f64);
    positive("altitude", s.altitude);
    positive("max_speed", s.max_speed);
    positive("safety_distance", s.safety_distance);
    positive("ref_gain", s.ref_gain);
    positive("noise_power", s.noise_power);
    for (m, u) in s.uavs.iter().enumerate() {
        positive(&format!("uavs[{m}].peak_power"), u.peak_power);
    }
    for (j, z) in s.nfzs.iter().enumerate() {
        positive(&format!("nfzs[{j}].radius"), z.radius);
        positive(&format!("nfzs[{j}].height"), z.height);
    }
    if s.uavs.is_empty() {
        out.push(Violation::EmptyList { field: "uavs" });
    }
    if s.users.is_empty() {
        out.push(Violation::EmptyList { field: "users" });
    }
    let points = s
        .uavs
        .iter()
        .enumerate()
        .flat_map(|(m, u)| [(format!("uavs[{m}].start"), u.start), (format!("uavs[{m}].end"), u.end)])
        .chain(s.users.iter().enumerate().map(|(k, &p)| (format!("users[{k}]"), p)))
        .chain(s.eves.iter().enumerate().map(|(k, &p)| (format!("eves[{k}]"), p)))
        .chain(s.nfzs.iter().enumerate().map(|(j, z)| (format!("nfzs[{j}].center"), z.center)));
    for (field, p) in points {
        if !p.is_finite() {
            out.push(Violation::NotFinite { field });
        }
    }

    for (j, z) in s.nfzs.iter().enumerate() {
        if z.height <= s.altitude {
            out.push(Violation::NfzTooLow { zone: j });
        }
        for (m, u) in s.uavs.iter().enumerate() {
            if inside_nfz(u.start, z) {
                out.push(Violation::EndpointInNfz { uav: m, endpoint: "start", zone: j });
            }
            if inside_nfz(u.end, z) {
                out.push(Violation::EndpointInNfz { uav: m, endpoint: "end", zone: j });
            }
        }
    }
    for a in 0..s.uavs.len() {
        for b in a + 1..s.uavs.len() {
            let d0 = s.uavs[a].start.dist(s.uavs[b].start);
            if d0 < s.safety_distance {
                out.push(Violation::EndpointSeparation { endpoint: "start", a, b, distance: d0 });
            }
            let d1 = s.uavs[a].end.dist(s.uavs[b].end);
            if d1 < s.safety_distance {
                out.push(Violation::EndpointSeparation { endpoint: "end", a, b, distance: d1 });
            }
        }
    }
    let budget = s.num_slots as f64 * s.max_step();
    for (m, u) in s.uavs.iter().enumerate() {
        let distance = u.start.dist(u.end);
        if distance > budget {
            out.push(Violation::Unreachable { uav: m, distance, budget });
        }
    }
    ValidationReport { violations: out }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Parses a scenario config document.
///
/// Schema errors are reported precisely; structural feasibility (endpoint
/// placement, reachability) is left to [`validate`].
pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let root: Table = text.parse::<Table>().map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let root = Doc::new(&root, "");
    root.only(&["time", "channel", "geometry", "uavs", "users", "eves", "nfzs", "subcarriers"])?;

    let time = root.table("time")?;
    time.only(&["T_s", "dt_s"])?;
    let t_total = time.positive("T_s", "T")?;
    let dt = time.positive("dt_s", "dt")?;
    let slots = t_total / dt;
    let num_slots = slots.round();
    if (slots - num_slots).abs() > 1e-9 * slots.max(1.0) || num_slots < 1.0 {
        return Err(ScenarioError::Invalid(format!(
            "time.T_s = {t_total} is not a whole number of slots of {dt} s"
        )));
    }

    let channel = root.table("channel")?;
    channel.only(&["beta0_dB", "noise_dBm", "bandwidth_Hz", "carrier_Hz"])?;
    let ref_gain = db_to_linear(channel.real("beta0_dB", "beta0")?);
    let noise_power = dbm_to_watts(channel.real("noise_dBm", "noise")?);
    let bandwidth_hz = channel.optional_real("bandwidth_Hz", "bandwidth")?;
    channel.optional_real("carrier_Hz", "carrier")?;

    let geometry = root.table("geometry")?;
    geometry.only(&["altitude_m", "vmax_mps", "safety_m"])?;
    let altitude = geometry.positive("altitude_m", "altitude")?;
    let max_speed = geometry.positive("vmax_mps", "vmax")?;
    let safety_distance = geometry.positive("safety_m", "safety")?;

    let mut uavs = Vec::new();
    for (m, t) in root.tables("uavs")?.into_iter().enumerate() {
        t.only(&["start", "end", "peak_dBm"])?;
        uavs.push(UavSpec {
            start: t.point("start")?,
            end: t.point("end")?,
            peak_power: dbm_to_watts(t.real("peak_dBm", "peak")?),
        });
        let _ = m;
    }
    let users = root.points("users")?;
    let eves = match root.get("eves") {
        Some(_) => root.points("eves")?,
        None => Vec::new(),
    };
    let nfzs = match root.get("nfzs") {
        Some(_) => root
            .tables("nfzs")?
            .into_iter()
            .map(|t| {
                t.only(&["center", "radius_m", "height_m"])?;
                Ok(NoFlyZone {
                    center: t.point("center")?,
                    radius: t.positive("radius_m", "radius")?,
                    height: t.positive("height_m", "height")?,
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?,
        None => Vec::new(),
    };
    let num_subcarriers = root.count("subcarriers")?;

    Ok(Scenario {
        num_slots: num_slots as usize,
        slot_duration: dt,
        uavs,
        users,
        eves,
        nfzs,
        altitude,
        max_speed,
        safety_distance,
        num_subcarriers,
        ref_gain,
        noise_power,
        bandwidth_hz,
    })
}

/// Cursor over a TOML table that remembers its path for error messages.
struct Doc<'a> {
    table: &'a Table,
    path: String,
}

impl<'a> Doc<'a> {
    fn new(table: &'a Table, path: &str) -> Self {
        Self {
            table,
            path: path.to_string(),
        }
    }

    fn key(&self, k: &str) -> String {
        if self.path.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.path)
        }
    }

    fn get(&self, k: &str) -> Option<&'a Value> {
        self.table.get(k)
    }

    /// Rejects keys outside `allowed`. A bare key matching the stem of a
    /// unit-suffixed key (`beta0` for `beta0_dB`) is a missing unit, not an unknown key.
    fn only(&self, allowed: &[&str]) -> Result<(), ScenarioError> {
        for k in self.table.keys() {
            if allowed.contains(&k.as_str()) {
                continue;
            }
            let stem_match = allowed
                .iter()
                .any(|a| a.split_once('_').map(|(stem, _)| stem == k).unwrap_or(false));
            return Err(if stem_match {
                ScenarioError::UnitMissing(self.key(k))
            } else {
                ScenarioError::UnknownKey(self.key(k))
            });
        }
        Ok(())
    }

    fn require(&self, k: &str, stem: &str) -> Result<&'a Value, ScenarioError> {
        match self.table.get(k) {
            Some(v) => Ok(v),
            None if self.table.contains_key(stem) => Err(ScenarioError::UnitMissing(self.key(stem))),
            None => Err(ScenarioError::MissingKey(self.key(k))),
        }
    }

    fn table(&self, k: &str) -> Result<Doc<'a>, ScenarioError> {
        match self.require(k, k)? {
            Value::Table(t) => Ok(Doc::new(t, &self.key(k))),
            _ => Err(ScenarioError::WrongType {
                path: self.key(k),
                expected: "table",
            }),
        }
    }

    fn tables(&self, k: &str) -> Result<Vec<Doc<'a>>, ScenarioError> {
        let arr = match self.require(k, k)? {
            Value::Array(a) => a,
            _ => {
                return Err(ScenarioError::WrongType {
                    path: self.key(k),
                    expected: "array of tables",
                })
            }
        };
        arr.iter()
            .enumerate()
            .map(|(i, v)| match v {
                Value::Table(t) => Ok(Doc::new(t, &format!("{}[{i}]", self.key(k)))),
                _ => Err(ScenarioError::WrongType {
                    path: format!("{}[{i}]", self.key(k)),
                    expected: "table",
                }),
            })
            .collect()
    }

    fn real(&self, k: &str, stem: &str) -> Result<f64, ScenarioError> {
        let v = self.require(k, stem)?;
        to_real(v, &self.key(k))
    }

    fn optional_real(&self, k: &str, stem: &str) -> Result<Option<f64>, ScenarioError> {
        if self.table.contains_key(k) || self.table.contains_key(stem) {
            self.real(k, stem).map(Some)
        } else {
            Ok(None)
        }
    }

    fn positive(&self, k: &str, stem: &str) -> Result<f64, ScenarioError> {
        let v = self.real(k, stem)?;
        if v <= 0.0 {
            return Err(ScenarioError::Invalid(format!("`{}` must be > 0, got {v}", self.key(k))));
        }
        Ok(v)
    }

    fn count(&self, k: &str) -> Result<usize, ScenarioError> {
        match self.require(k, k)? {
            Value::Integer(i) if *i >= 1 => Ok(*i as usize),
            Value::Integer(i) => Err(ScenarioError::Invalid(format!("`{}` must be >= 1, got {i}", self.key(k)))),
            _ => Err(ScenarioError::WrongType {
                path: self.key(k),
                expected: "integer",
            }),
        }
    }

    fn point(&self, k: &str) -> Result<Point, ScenarioError> {
        let v = self.require(k, k)?;
        to_point(v, &self.key(k))
    }

    fn points(&self, k: &str) -> Result<Vec<Point>, ScenarioError> {
        match self.require(k, k)? {
            Value::Array(a) => a
                .iter()
                .enumerate()
                .map(|(i, v)| to_point(v, &format!("{}[{i}]", self.key(k))))
                .collect(),
            _ => Err(ScenarioError::WrongType {
                path: self.key(k),
                expected: "array of [x, y]",
            }),
        }
    }
}

fn to_real(v: &Value, path: &str) -> Result<f64, ScenarioError> {
    let x = match v {
        Value::Float(f) => *f,
        Value::Integer(i) => *i as f64,
        _ => {
            return Err(ScenarioError::WrongType {
                path: path.to_string(),
                expected: "number",
            })
        }
    };
    if !x.is_finite() {
        return Err(ScenarioError::NonFinite(path.to_string()));
    }
    Ok(x)
}

fn to_point(v: &Value, path: &str) -> Result<Point, ScenarioError> {
    match v {
        Value::Array(a) if a.len() == 2 => Ok(Point::new(
            to_real(&a[0], &format!("{path}[0]"))?,
            to_real(&a[1], &format!("{path}[1]"))?,
        )),
        _ => Err(ScenarioError::WrongType {
            path: path.to_string(),
            expected: "[x, y]",
        }),
    }
}
