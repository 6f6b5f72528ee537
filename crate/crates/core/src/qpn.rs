//! Discrete-event simulation of the detection pipeline as a queueing network.
//!
//! Sources emit tokens of one of two colors (point clouds or camera images).
//! Each color follows a fixed path of single-server FIFO queues to a sink;
//! routing between queues is instantaneous. Service times are exponential.
//! A queue either buffers without limit or keeps only the newest waiting
//! token (dropping the one it replaces).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::format::sig9;
use crate::seed::rng_for;
use crate::{Error, Result};

/// Fraction of the run discarded before metrics are collected.
pub const WARMUP_FRACTION: f64 = 0.05;
pub const DEFAULT_MAX_TOKENS: u64 = 1_000_000;

pub const PRESETS: [&str; 4] = [
    "default-apollo",
    "low-workload-apollo",
    "low-latency-apollo",
    "low-workload-autoware",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WorkloadColor {
    #[serde(rename = "PCD")]
    Pcd,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueueName {
    Det2D,
    Det3D,
    #[serde(rename = "MSF")]
    Msf,
}

impl std::fmt::Display for QueueName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QueueName::Det2D => "Det2D",
            QueueName::Det3D => "Det3D",
            QueueName::Msf => "MSF",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapacityMode {
    Unbounded,
    KeepLatest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalProcess {
    Poisson,
    /// Fixed sensor cadence with a random initial phase per stream.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceNode {
    pub color: WorkloadColor,
    pub rate_fps: f64,
    pub stream_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueNode {
    pub name: QueueName,
    pub service_rate_fps: f64,
    pub capacity_mode: CapacityMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub color: WorkloadColor,
    pub path: Vec<QueueName>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineModel {
    pub name: String,
    pub sources: Vec<SourceNode>,
    pub queues: Vec<QueueNode>,
    pub routing: Vec<Route>,
    pub seed: u64,
    /// Run length: the simulation covers the time in which the slowest
    /// source stream emits this many tokens on average.
    pub max_tokens: u64,
    pub arrivals: ArrivalProcess,
}

fn apollo(name: &str, cam_rate: f64, pcd_rate: f64, mu_3d: f64, seed: u64) -> PipelineModel {
    PipelineModel {
        name: name.to_string(),
        sources: vec![
            SourceNode {
                color: WorkloadColor::Image,
                rate_fps: cam_rate,
                stream_count: 2,
            },
            SourceNode {
                color: WorkloadColor::Pcd,
                rate_fps: pcd_rate,
                stream_count: 1,
            },
        ],
        queues: vec![
            QueueNode {
                name: QueueName::Det2D,
                service_rate_fps: 125.0,
                capacity_mode: CapacityMode::Unbounded,
            },
            QueueNode {
                name: QueueName::Det3D,
                service_rate_fps: mu_3d,
                capacity_mode: CapacityMode::Unbounded,
            },
            QueueNode {
                name: QueueName::Msf,
                service_rate_fps: 250.0,
                capacity_mode: CapacityMode::Unbounded,
            },
        ],
        routing: vec![
            Route {
                color: WorkloadColor::Image,
                path: vec![QueueName::Det2D, QueueName::Msf],
            },
            Route {
                color: WorkloadColor::Pcd,
                path: vec![QueueName::Det3D, QueueName::Msf],
            },
        ],
        seed,
        max_tokens: DEFAULT_MAX_TOKENS,
        arrivals: ArrivalProcess::Poisson,
    }
}

/// One of the four named pipeline configurations.
pub fn preset_config(name: &str, seed: u64) -> Result<PipelineModel> {
    match name {
        "default-apollo" => Ok(apollo(name, 12.0, 20.0, 8.5, seed)),
        "low-workload-apollo" => Ok(apollo(name, 15.0, 10.0, 8.5, seed)),
        "low-latency-apollo" => Ok(apollo(name, 15.0, 10.0, 10.5, seed)),
        "low-workload-autoware" => Ok(PipelineModel {
            name: name.to_string(),
            sources: vec![SourceNode {
                color: WorkloadColor::Pcd,
                rate_fps: 10.0,
                stream_count: 1,
            }],
            queues: vec![QueueNode {
                name: QueueName::Det3D,
                service_rate_fps: 7.8,
                capacity_mode: CapacityMode::Unbounded,
            }],
            routing: vec![Route {
                color: WorkloadColor::Pcd,
                path: vec![QueueName::Det3D],
            }],
            seed,
            max_tokens: DEFAULT_MAX_TOKENS,
            arrivals: ArrivalProcess::Poisson,
        }),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

impl PipelineModel {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() || self.queues.is_empty() {
            return Err(Error::Validation("model needs sources and queues".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Validation("max_tokens must be positive".into()));
        }
        for s in &self.sources {
            if !(s.rate_fps.is_finite() && s.rate_fps > 0.0) || s.stream_count == 0 {
                return Err(Error::Validation(format!("invalid source {s:?}")));
            }
            let route = self.routing.iter().filter(|r| r.color == s.color).count();
            if route != 1 {
                return Err(Error::Validation(format!(
                    "color {:?} needs exactly one route, found {route}",
                    s.color
                )));
            }
        }
        for (i, q) in self.queues.iter().enumerate() {
            if !(q.service_rate_fps.is_finite() && q.service_rate_fps > 0.0) {
                return Err(Error::Validation(format!("invalid queue {q:?}")));
            }
            if self.queues[..i].iter().any(|o| o.name == q.name) {
                return Err(Error::Validation(format!("duplicate queue {}", q.name)));
            }
        }
        for r in &self.routing {
            if r.path.is_empty() {
                return Err(Error::Validation(format!("empty route for {:?}", r.color)));
            }
            for (i, n) in r.path.iter().enumerate() {
                if !self.queues.iter().any(|q| q.name == *n) {
                    return Err(Error::Validation(format!("route references missing queue {n}")));
                }
                if r.path[..i].contains(n) {
                    return Err(Error::Validation(format!("route for {:?} revisits {n}", r.color)));
                }
            }
        }
        Ok(())
    }

    /// Simulated horizon in seconds.
    pub fn run_length_s(&self) -> f64 {
        let slowest = self
            .sources
            .iter()
            .map(|s| s.rate_fps)
            .fold(f64::INFINITY, f64::min);
        self.max_tokens as f64 / slowest
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: QueueName,
    /// Completions per second.
    pub throughput: f64,
    /// Busy fraction of the server.
    pub utilization: f64,
    /// Time-averaged number of tokens at the node (waiting + in service).
    pub population: f64,
    /// Mean sojourn time (wait + service) in seconds; `None` with no
    /// completions in the measurement window.
    pub sojourn_s: Option<f64>,
    /// Whole-run token counts.
    pub arrivals: u64,
    pub completions: u64,
    pub drops: u64,
    pub residual: u64,
    /// Largest population seen at any instant.
    pub max_population: u64,
}

impl NodeMetrics {
    pub fn drop_fraction(&self) -> f64 {
        if self.arrivals == 0 {
            0.0
        } else {
            self.drops as f64 / self.arrivals as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub model: String,
    pub mode: CapacityMode,
    pub seed: u64,
    pub sim_time_s: f64,
    pub warmup_s: f64,
    pub nodes: Vec<NodeMetrics>,
}

impl SimMetrics {
    pub fn node(&self, name: QueueName) -> Option<&NodeMetrics> {
        self.nodes.iter().find(|n| n.node == name)
    }

    /// `node,metric,value` rows: X, U, P, S (seconds), then counters.
    pub fn write_csv<W: Write>(&self, w: W, comment: Option<&str>) -> Result<()> {
        let mut w = w;
        if let Some(c) = comment {
            writeln!(w, "# {c}").map_err(|e| Error::io("<csv>", e))?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["node", "metric", "value"])?;
        for n in &self.nodes {
            let name = n.node.to_string();
            let rows = [
                ("X", sig9(n.throughput)),
                ("U", sig9(n.utilization)),
                ("P", sig9(n.population)),
                ("S_s", n.sojourn_s.map(sig9).unwrap_or_else(|| "NA".into())),
                ("arrivals", n.arrivals.to_string()),
                ("completions", n.completions.to_string()),
                ("drops", n.drops.to_string()),
                ("residual", n.residual.to_string()),
                ("drop_fraction", sig9(n.drop_fraction())),
            ];
            for (metric, value) in rows {
                out.write_record([name.as_str(), metric, value.as_str()])?;
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// One row per (run, node) in the layout of a results table:
/// `config,mode,seed,node,X,U,P,S_s,drop_fraction`.
pub fn write_table_csv<W: Write>(runs: &[SimMetrics], w: W, comment: Option<&str>) -> Result<()> {
    let mut w = w;
    if let Some(c) = comment {
        writeln!(w, "# {c}").map_err(|e| Error::io("<csv>", e))?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["config", "mode", "seed", "node", "X", "U", "P", "S_s", "drop_fraction"])?;
    for m in runs {
        let mode = match m.mode {
            CapacityMode::Unbounded => "unbounded",
            CapacityMode::KeepLatest => "keep-latest",
        };
        for n in &m.nodes {
            out.write_record([
                m.model.clone(),
                mode.to_string(),
                m.seed.to_string(),
                n.node.to_string(),
                sig9(n.throughput),
                sig9(n.utilization),
                sig9(n.population),
                n.sojourn_s.map(sig9).unwrap_or_else(|| "NA".into()),
                sig9(n.drop_fraction()),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Token {
    color: WorkloadColor,
    hop: usize,
    entered: f64,
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Arrival { stream: usize },
    Departure { queue: usize },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

struct QueueState {
    name: QueueName,
    service: Exp<f64>,
    mode: CapacityMode,
    rng: ChaCha8Rng,
    waiting: VecDeque<Token>,
    in_service: Option<Token>,
    last_change: f64,
    busy_area: f64,
    pop_area: f64,
    window_completions: u64,
    window_sojourn: f64,
    arrivals: u64,
    completions: u64,
    drops: u64,
    max_population: u64,
}

impl QueueState {
    fn population(&self) -> usize {
        self.waiting.len() + usize::from(self.in_service.is_some())
    }

    fn advance(&mut self, now: f64, warmup: f64) {
        let from = self.last_change.max(warmup);
        if now > from {
            let dt = now - from;
            if self.in_service.is_some() {
                self.busy_area += dt;
            }
            self.pop_area += dt * self.population() as f64;
        }
        self.last_change = now;
    }
}

struct Stream {
    color: WorkloadColor,
    rate: f64,
    interarrival: Exp<f64>,
    rng: ChaCha8Rng,
}

struct Simulator<'a> {
    model: &'a PipelineModel,
    heap: BinaryHeap<Event>,
    seq: u64,
    queues: Vec<QueueState>,
    paths: Vec<(WorkloadColor, Vec<usize>)>,
    warmup: f64,
}

impl Simulator<'_> {
    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn path(&self, color: WorkloadColor) -> &[usize] {
        &self.paths.iter().find(|(c, _)| *c == color).unwrap().1
    }

    fn enter(&mut self, now: f64, token: Token) {
        let qi = self.path(token.color)[token.hop];
        let warmup = self.warmup;
        let q = &mut self.queues[qi];
        q.advance(now, warmup);
        q.arrivals += 1;
        let token = Token {
            entered: now,
            ..token
        };
        if q.in_service.is_none() {
            q.in_service = Some(token);
            let dt = q.service.sample(&mut q.rng);
            q.max_population = q.max_population.max(q.population() as u64);
            self.schedule(now + dt, EventKind::Departure { queue: qi });
            return;
        }
        if q.mode == CapacityMode::KeepLatest && !q.waiting.is_empty() {
            q.waiting.clear();
            q.drops += 1;
        }
        q.waiting.push_back(token);
        q.max_population = q.max_population.max(q.population() as u64);
    }

    fn depart(&mut self, now: f64, qi: usize) {
        let warmup = self.warmup;
        let q = &mut self.queues[qi];
        q.advance(now, warmup);
        let done = q.in_service.take().expect("departure from idle server");
        q.completions += 1;
        if now >= warmup {
            q.window_completions += 1;
            q.window_sojourn += now - done.entered;
        }
        if let Some(next) = q.waiting.pop_front() {
            q.in_service = Some(next);
            let dt = q.service.sample(&mut q.rng);
            self.schedule(now + dt, EventKind::Departure { queue: qi });
        }
        if done.hop + 1 < self.path(done.color).len() {
            self.enter(
                now,
                Token {
                    hop: done.hop + 1,
                    ..done
                },
            );
        }
    }
}

/// Runs `model` with every queue set to `mode`.
pub fn run_simulation(model: &PipelineModel, mode: CapacityMode) -> Result<SimMetrics> {
    let mut m = model.clone();
    for q in &mut m.queues {
        q.capacity_mode = mode;
    }
    let mut out = run_model(&m)?;
    out.mode = mode;
    Ok(out)
}

/// Runs `model` honoring each queue's own capacity mode. The reported `mode`
/// is that of the first queue.
pub fn run_model(model: &PipelineModel) -> Result<SimMetrics> {
    model.validate()?;
    let end = model.run_length_s();
    let warmup = end * WARMUP_FRACTION;
    let queues: Vec<QueueState> = model
        .queues
        .iter()
        .map(|q| QueueState {
            name: q.name,
            service: Exp::new(q.service_rate_fps).expect("validated rate"),
            mode: q.capacity_mode,
            rng: rng_for(model.seed, &["qpn-service".into(), q.name.to_string().as_str().into()]),
            waiting: VecDeque::new(),
            in_service: None,
            last_change: 0.0,
            busy_area: 0.0,
            pop_area: 0.0,
            window_completions: 0,
            window_sojourn: 0.0,
            arrivals: 0,
            completions: 0,
            drops: 0,
            max_population: 0,
        })
        .collect();
    let paths = model
        .routing
        .iter()
        .map(|r| {
            let idx = r
                .path
                .iter()
                .map(|n| model.queues.iter().position(|q| q.name == *n).unwrap())
                .collect();
            (r.color, idx)
        })
        .collect();
    let mut streams = Vec::new();
    for (si, s) in model.sources.iter().enumerate() {
        for k in 0..s.stream_count {
            streams.push(Stream {
                color: s.color,
                rate: s.rate_fps,
                interarrival: Exp::new(s.rate_fps).expect("validated rate"),
                rng: rng_for(model.seed, &["qpn-source".into(), si.into(), k.into()]),
            });
        }
    }

    let mut sim = Simulator {
        model,
        heap: BinaryHeap::new(),
        seq: 0,
        queues,
        paths,
        warmup,
    };
    let next_gap = |s: &mut Stream, first: bool| -> f64 {
        match model.arrivals {
            ArrivalProcess::Poisson => s.interarrival.sample(&mut s.rng),
            ArrivalProcess::Deterministic if first => s.rng.random::<f64>() / s.rate,
            ArrivalProcess::Deterministic => 1.0 / s.rate,
        }
    };
    for i in 0..streams.len() {
        let t = next_gap(&mut streams[i], true);
        sim.schedule(t, EventKind::Arrival { stream: i });
    }

    while let Some(ev) = sim.heap.pop() {
        if ev.time > end {
            break;
        }
        match ev.kind {
            EventKind::Arrival { stream } => {
                let color = streams[stream].color;
                sim.enter(
                    ev.time,
                    Token {
                        color,
                        hop: 0,
                        entered: ev.time,
                    },
                );
                let t = ev.time + next_gap(&mut streams[stream], false);
                sim.schedule(t, EventKind::Arrival { stream });
            }
            EventKind::Departure { queue } => sim.depart(ev.time, queue),
        }
    }

    let window = end - warmup;
    let nodes = sim
        .queues
        .iter_mut()
        .map(|q| {
            q.advance(end, warmup);
            NodeMetrics {
                node: q.name,
                throughput: q.window_completions as f64 / window,
                utilization: q.busy_area / window,
                population: q.pop_area / window,
                sojourn_s: (q.window_completions > 0)
                    .then(|| q.window_sojourn / q.window_completions as f64),
                arrivals: q.arrivals,
                completions: q.completions,
                drops: q.drops,
                residual: q.population() as u64,
                max_population: q.max_population,
            }
        })
        .collect();
    Ok(SimMetrics {
        model: sim.model.name.clone(),
        mode: model.queues[0].capacity_mode,
        seed: model.seed,
        sim_time_s: end,
        warmup_s: warmup,
        nodes,
    })
}

/// Closed-form M/M/1 steady state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mm1 {
    pub utilization: f64,
    pub population: f64,
    pub sojourn_s: f64,
}

pub fn analytic_mm1(lambda_fps: f64, mu_fps: f64) -> Result<Mm1> {
    if !(mu_fps > 0.0) || lambda_fps < 0.0 {
        return Err(Error::Parameter(format!(
            "rates must satisfy lambda >= 0, mu > 0 (got {lambda_fps}, {mu_fps})"
        )));
    }
    if lambda_fps >= mu_fps {
        return Err(Error::UnstableQueue {
            lambda: lambda_fps,
            mu: mu_fps,
        });
    }
    let rho = lambda_fps / mu_fps;
    Ok(Mm1 {
        utilization: rho,
        population: rho / (1.0 - rho),
        sojourn_s: 1.0 / (mu_fps - lambda_fps),
    })
}

/// Steady-state drop fraction of a keep-latest single server (one waiting
/// slot that the newest arrival overwrites) under Poisson arrivals and
/// exponential service. Occupancy is a birth-death chain on {0, 1, 2}.
pub fn analytic_keep_latest_drop_fraction(lambda_fps: f64, mu_fps: f64) -> f64 {
    let rho = lambda_fps / mu_fps;
    let p0 = 1.0 / (1.0 + rho + rho * rho);
    let throughput = mu_fps * (1.0 - p0);
    1.0 - throughput / lambda_fps
}
