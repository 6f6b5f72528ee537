//! Run configuration: one JSON document, optionally overridden by flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use perception_perf::detector::{DetectorParams, LatencyModel, DEFAULT_IOU_THRESHOLD};
use perception_perf::mutators::{Direction, MutationKind, MutationSpec, DEFAULT_DUPLICATE_DISTANCE_M};
use perception_perf::qpn::{ArrivalProcess, DEFAULT_MAX_TOKENS, PRESETS};
use perception_perf::seed::derive_u64;
use perception_perf::stats::Alternative;
use perception_perf::trajectory::{EvalParams, PredictorParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::output::RunStamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MutationConfig {
    pub kind: MutationKind,
    /// Required for noise and move; duplicates default to 3 m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    /// Derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Variant name; defaults to the mutation label (e.g. `noise-0.3`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub cluster_radius: f64,
    pub min_points: usize,
    pub latency_preset: String,
    /// Explicit coefficients; replaces the preset when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyModel>,
    /// Overrides the model's jitter.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    pub iou_threshold: f64,
    pub measure: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let d = DetectorParams::default();
        Self {
            cluster_radius: d.cluster_radius,
            min_points: d.min_points,
            latency_preset: "apollo-nuscenes".into(),
            latency: None,
            noise_sigma: None,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            measure: false,
        }
    }
}

impl DetectorConfig {
    pub fn latency_model(&self) -> CliResult<LatencyModel> {
        let mut m = match &self.latency {
            Some(m) => *m,
            None => LatencyModel::preset(&self.latency_preset)?,
        };
        if let Some(s) = self.noise_sigma {
            m.noise_sigma = s;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn params(&self, seed: u64) -> CliResult<DetectorParams> {
        Ok(DetectorParams {
            cluster_radius: self.cluster_radius,
            min_points: self.min_points,
            latency: self.latency_model()?,
            seed,
            measure: self.measure,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub horizon: usize,
    pub step_dt: f64,
    pub fit_window: usize,
    pub moving_threshold_m: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        let e = EvalParams::default();
        Self {
            horizon: e.predictor.horizon,
            step_dt: e.predictor.step_dt,
            fit_window: e.predictor.fit_window,
            moving_threshold_m: e.moving_threshold_m,
        }
    }
}

impl PredictorConfig {
    pub fn eval_params(&self) -> EvalParams {
        EvalParams {
            predictor: PredictorParams {
                horizon: self.horizon,
                step_dt: self.step_dt,
                fit_window: self.fit_window,
            },
            moving_threshold_m: self.moving_threshold_m,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub alternative: Alternative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    Unbounded,
    KeepLatest,
    /// Each queue keeps the mode of its preset.
    AsConfigured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub presets: Vec<String>,
    pub modes: Vec<SimMode>,
    pub max_tokens: u64,
    pub arrivals: ArrivalProcess,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            presets: PRESETS.iter().map(|s| s.to_string()).collect(),
            modes: vec![SimMode::Unbounded],
            max_tokens: DEFAULT_MAX_TOKENS,
            arrivals: ArrivalProcess::Poisson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scene directories, relative to the config file.
    #[serde(default)]
    pub scenes: Vec<PathBuf>,
    #[serde(default)]
    pub mutations: Vec<MutationConfig>,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// Defaults to each scene's frame rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_rate_hz: Option<f64>,
    /// Defaults to one sensor period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_ms: Option<f64>,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Flag values that replace config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub sensor_rate_hz: Option<f64>,
    pub threshold_ms: Option<f64>,
    pub latency_preset: Option<String>,
    pub noise_sigma: Option<f64>,
}

/// A validated configuration with its base directory and identity.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub stamp: RunStamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub spec: Option<MutationSpec>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        parse_strict(de)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.output_dir {
            self.output_dir = Some(p.clone());
        }
        if let Some(r) = o.sensor_rate_hz {
            self.sensor_rate_hz = Some(r);
        }
        if let Some(t) = o.threshold_ms {
            self.threshold_ms = Some(t);
        }
        if let Some(p) = &o.latency_preset {
            self.detector.latency_preset = p.clone();
            self.detector.latency = None;
        }
        if let Some(s) = o.noise_sigma {
            self.detector.noise_sigma = Some(s);
        }
    }

    /// SHA-256 of the compact JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn detector_seed(&self) -> u64 {
        derive_u64(self.seed, &["detector".into()])
    }

    pub fn simulate_seed(&self, preset: &str, mode: SimMode) -> u64 {
        let m = serde_json::to_value(mode).expect("mode serializes");
        derive_u64(
            self.seed,
            &["simulate".into(), preset.into(), m.as_str().unwrap_or_default().into()],
        )
    }

    /// Baseline first, then one variant per mutation entry.
    pub fn variants(&self) -> CliResult<Vec<Variant>> {
        let mut out = vec![Variant {
            name: "baseline".into(),
            spec: None,
        }];
        for (i, m) in self.mutations.iter().enumerate() {
            let distance_m = match (m.distance_m, m.kind) {
                (Some(d), _) => d,
                (None, MutationKind::AddObstacles) => DEFAULT_DUPLICATE_DISTANCE_M,
                (None, _) => {
                    return Err(CliError::Data(format!("mutations[{i}]: distance_m is required")))
                }
            };
            let direction = m.direction.unwrap_or(match m.kind {
                MutationKind::MoveObstacles => Direction::TowardCenter,
                _ => Direction::PosY,
            });
            let mut spec = MutationSpec {
                kind: m.kind,
                direction,
                distance_m,
                seed: 0,
            };
            spec.validate()
                .map_err(|e| CliError::Data(format!("mutations[{i}]: {e}")))?;
            let name = m.name.clone().unwrap_or_else(|| spec.label());
            spec.seed = m
                .seed
                .unwrap_or_else(|| derive_u64(self.seed, &["mutation".into(), name.as_str().into()]));
            out.push(Variant {
                name,
                spec: Some(spec),
            });
        }
        let mut seen = BTreeSet::new();
        for v in &out {
            if v.name.is_empty() || v.name.contains(['/', '\\']) || v.name.starts_with('.') {
                return Err(CliError::Data(format!("invalid variant name `{}`", v.name)));
            }
            if !seen.insert(v.name.as_str()) {
                return Err(CliError::Data(format!("duplicate variant name `{}`", v.name)));
            }
        }
        Ok(out)
    }

    pub fn validate(&self, base_dir: &Path) -> CliResult<()> {
        for s in &self.scenes {
            let p = base_dir.join(s);
            if !p.join("manifest.json").is_file() {
                return Err(CliError::Data(format!("scene {} not found", p.display())));
            }
        }
        for (name, v) in [("sensor_rate_hz", self.sensor_rate_hz), ("threshold_ms", self.threshold_ms)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(CliError::Data(format!("{name} must be positive, got {v}")));
                }
            }
        }
        let d = &self.detector;
        if !(d.cluster_radius.is_finite() && d.cluster_radius > 0.0) || d.min_points == 0 {
            return Err(CliError::Data("detector cluster_radius and min_points must be positive".into()));
        }
        if !(d.iou_threshold > 0.0 && d.iou_threshold <= 1.0) {
            return Err(CliError::Data(format!("iou_threshold must be in (0, 1], got {}", d.iou_threshold)));
        }
        d.latency_model()?;
        let p = &self.predictor;
        if p.horizon == 0 || p.fit_window == 0 || !(p.step_dt > 0.0) || !(p.moving_threshold_m >= 0.0) {
            return Err(CliError::Data("predictor parameters must be positive".into()));
        }
        if let Some(sim) = &self.simulate {
            for name in &sim.presets {
                if !PRESETS.contains(&name.as_str()) {
                    return Err(CliError::Data(format!("unknown simulation preset `{name}`")));
                }
            }
            if sim.max_tokens == 0 {
                return Err(CliError::Data("max_tokens must be positive".into()));
            }
        }
        self.variants()?;
        Ok(())
    }
}

fn parse_strict<'de, T: Deserialize<'de>>(
    de: &mut serde_json::Deserializer<serde_json::de::StrRead<'de>>,
) -> CliResult<T> {
    T::deserialize(&mut *de)
        .and_then(|v| de.end().map(|_| v))
        .map_err(|e| CliError::Data(format!("run config: {e}")))
}

impl ResolvedConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        let mut config = RunConfig::from_json(&text)?;
        config.apply(overrides);
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, base_dir)
    }

    pub fn new(config: RunConfig, base_dir: PathBuf) -> CliResult<Self> {
        config.validate(&base_dir)?;
        let stamp = RunStamp {
            config_sha256: config.hash(),
            seed: config.seed,
        };
        Ok(Self {
            config,
            base_dir,
            stamp,
        })
    }

    pub fn scene_paths(&self) -> Vec<PathBuf> {
        self.config.scenes.iter().map(|s| self.base_dir.join(s)).collect()
    }

    pub fn output_dir(&self) -> CliResult<PathBuf> {
        self.config
            .output_dir
            .clone()
            .ok_or_else(|| CliError::Usage("no output directory: set output_dir or pass --out".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> RunConfig {
        RunConfig::from_json(&format!(r#"{{ "seed": 4, "scenes": []{extra} }}"#)).unwrap()
    }

    #[test]
    fn seed_is_mandatory_and_fields_are_checked() {
        assert!(matches!(RunConfig::from_json(r#"{ "scenes": [] }"#), Err(CliError::Data(_))));
        assert!(RunConfig::from_json(r#"{ "seed": 1, "scenes": [], "extra": 0 }"#).is_err());
        assert!(RunConfig::from_json(r#"{ "seed": 1, "scenes": [] } trailing"#).is_err());
    }

    #[test]
    fn variants_get_labels_defaults_and_derived_seeds() {
        let c = cfg(
            r#", "mutations": [
                { "kind": "add-noise", "distance_m": 0.3 },
                { "kind": "add-obstacles" },
                { "kind": "move-obstacles", "distance_m": 0.5, "seed": 12 }
            ]"#,
        );
        let v = c.variants().unwrap();
        let names: Vec<&str> = v.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["baseline", "noise-0.3", "add-obstacles-3", "move-0.5"]);
        assert!(v[0].spec.is_none());
        let dup = v[2].spec.as_ref().unwrap();
        assert_eq!(dup.distance_m, DEFAULT_DUPLICATE_DISTANCE_M);
        assert_eq!(dup.direction, Direction::PosY);
        assert_eq!(v[3].spec.as_ref().unwrap().direction, Direction::TowardCenter);
        assert_eq!(v[3].spec.as_ref().unwrap().seed, 12);
        assert_eq!(
            v[1].spec.as_ref().unwrap().seed,
            derive_u64(4, &["mutation".into(), "noise-0.3".into()])
        );
    }

    #[test]
    fn variant_errors() {
        let missing = cfg(r#", "mutations": [{ "kind": "add-noise" }]"#);
        assert!(matches!(missing.variants(), Err(CliError::Data(_))));
        let dup = cfg(
            r#", "mutations": [{ "kind": "add-noise", "distance_m": 0.1 }, { "kind": "add-noise", "distance_m": 0.1 }]"#,
        );
        assert!(dup.variants().is_err());
        let clash = cfg(r#", "mutations": [{ "kind": "add-noise", "distance_m": 0.1, "name": "baseline" }]"#);
        assert!(clash.variants().is_err());
        let slash = cfg(r#", "mutations": [{ "kind": "add-noise", "distance_m": 0.1, "name": "a/b" }]"#);
        assert!(slash.variants().is_err());
    }

    #[test]
    fn overrides_apply_and_hash_ignores_output_dir() {
        let mut c = cfg("");
        let h = c.hash();
        c.apply(&Overrides {
            output_dir: Some("somewhere".into()),
            ..Overrides::default()
        });
        assert_eq!(c.hash(), h);
        c.apply(&Overrides {
            noise_sigma: Some(0.0),
            ..Overrides::default()
        });
        assert_eq!(c.detector.noise_sigma, Some(0.0));
        assert_ne!(c.hash(), h);
        assert_eq!(h.len(), 64);
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        let dir = Path::new(".");
        assert!(cfg(r#", "sensor_rate_hz": 0.0"#).validate(dir).is_err());
        let mut c = cfg("");
        c.scenes.push("does-not-exist".into());
        assert!(matches!(c.validate(dir), Err(CliError::Data(_))));
        let mut c = cfg("");
        c.detector.iou_threshold = 0.0;
        assert!(c.validate(dir).is_err());
        let mut c = cfg("");
        c.detector.latency_preset = "nope".into();
        assert!(c.validate(dir).is_err());
        let c = cfg(r#", "simulate": { "presets": ["nope"] }"#);
        assert!(c.validate(dir).is_err());
        assert!(cfg("").validate(dir).is_ok());
    }

    #[test]
    fn output_dir_is_required_to_write() {
        let r = ResolvedConfig::new(cfg(""), PathBuf::new()).unwrap();
        assert!(matches!(r.output_dir(), Err(CliError::Usage(_))));
    }
}
