//! End-to-end orchestration: load → shift → project → per-subsystem
//! mixture fit and learning → multipliers → composition.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::composer::{compose, solve_mu, ComposeOptions, ComposedModel, GlobalRates};
use crate::demonstrations::{DataFormat, DemonstrationSet, Equilibrium, SubsystemData};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, select_k_fit, GmmFit, GmmOptions};
use crate::interconnection::{fully_connected_scalar, InterconnectionSpec, TopologyConfig};
use crate::learner::{check_subsystem_certificate, learn_subsystem, SubsystemHyperparams, SubsystemModel};
use crate::sdp::SolverOptions;
use crate::simulator::{mse, subsystem_residual};
use crate::verifier::{cross_check_composition, verify_composed, CertificateReport};

pub const MODEL_FILE: &str = "model.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    /// Guessed from the extension when absent.
    #[serde(default)]
    pub format: Option<DataFormat>,
    /// Sample period; overrides the file's own value.
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NamedTopology {
    #[serde(rename = "fully-connected-scalar")]
    FullyConnectedScalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyPath {
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySource {
    Named(NamedTopology),
    Path(TopologyPath),
    Inline(TopologyConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EquilibriumConfig {
    Auto(AutoTag),
    Point(Vec<f64>),
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        Self::Auto(AutoTag::Auto)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    /// Fixed component count; BIC over `k_range` when absent.
    pub k: Option<usize>,
    pub k_range: [usize; 2],
    pub options: GmmOptions,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k: None,
            k_range: [1, 3],
            options: GmmOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub topology: TopologySource,
    #[serde(default)]
    pub equilibrium: EquilibriumConfig,
    #[serde(default)]
    pub hyperparams: SubsystemHyperparams<f64>,
    /// Per-subsystem hyperparameter overrides keyed by 1-based index; each
    /// entry is merged over `hyperparams`.
    #[serde(default)]
    pub overrides: BTreeMap<usize, serde_json::Value>,
    #[serde(default)]
    pub gmm: GmmConfig,
    #[serde(default)]
    pub compose: ComposeOptions,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Learn subsystems on separate threads.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory, returned alongside.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_json(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validates everything that does not need the data.
    pub fn validate(&self, base: &Path) -> Result<Prepared> {
        self.hyperparams.validate()?;
        if let Some(dt) = self.data.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
            }
        }
        let format = match self.data.format {
            Some(f) => f,
            None => DataFormat::from_path(&self.data.path).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "cannot tell the format of {}; set data.format",
                    self.data.path.display()
                ))
            })?,
        };
        match self.gmm.k {
            Some(0) => return Err(Error::InvalidConfig("gmm.k must be at least 1".into())),
            None if self.gmm.k_range[0] == 0 || self.gmm.k_range[0] > self.gmm.k_range[1] => {
                return Err(Error::InvalidConfig(format!(
                    "gmm.k_range must satisfy 1 <= lo <= hi, got {:?}",
                    self.gmm.k_range
                )))
            }
            _ => {}
        }
        if !(self.compose.mu_min > 0.0) || !(self.compose.mu_cap_ratio >= 1.0) || !(self.compose.tol >= 0.0) {
            return Err(Error::InvalidConfig("compose needs mu_min > 0, mu_cap_ratio >= 1, tol >= 0".into()));
        }
        if let EquilibriumConfig::Point(p) = &self.equilibrium {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("equilibrium must be finite".into()));
            }
        }
        let spec = match &self.topology {
            TopologySource::Named(NamedTopology::FullyConnectedScalar) => None,
            TopologySource::Path(p) => {
                let text = std::fs::read_to_string(resolve(base, &p.path))?;
                Some(crate::interconnection::from_json(&text)?)
            }
            TopologySource::Inline(c) => Some(crate::interconnection::from_config(c)?),
        };
        let n_sub = spec.as_ref().map(InterconnectionSpec::len);
        let global = serde_json::to_value(&self.hyperparams)?;
        let mut overrides = BTreeMap::new();
        for (&idx, patch) in &self.overrides {
            if idx == 0 || n_sub.is_some_and(|n| idx > n) {
                return Err(Error::InvalidConfig(format!("override for unknown subsystem {idx}")));
            }
            let mut merged = global.clone();
            let (Some(obj), Some(p)) = (merged.as_object_mut(), patch.as_object()) else {
                return Err(Error::InvalidConfig(format!("override {idx} must be an object")));
            };
            for (k, v) in p {
                obj.insert(k.clone(), v.clone());
            }
            let hp: SubsystemHyperparams<f64> = serde_json::from_value(merged)
                .map_err(|e| Error::InvalidConfig(format!("override {idx}: {e}")))?;
            hp.validate()?;
            overrides.insert(idx, hp);
        }
        Ok(Prepared {
            data_path: resolve(base, &self.data.path),
            format,
            spec,
            overrides,
            output_dir: resolve(base, &self.output_dir),
        })
    }
}

/// A validated config with paths resolved.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data_path: PathBuf,
    pub format: DataFormat,
    /// `None` for the fully-connected scalar topology, sized by the data.
    pub spec: Option<InterconnectionSpec>,
    pub overrides: BTreeMap<usize, SubsystemHyperparams<f64>>,
    pub output_dir: PathBuf,
}

impl Prepared {
    pub fn hyperparams_for(&self, cfg: &PipelineConfig, index: usize) -> SubsystemHyperparams<f64> {
        self.overrides
            .get(&(index + 1))
            .cloned()
            .unwrap_or_else(|| cfg.hyperparams.clone())
    }
}

/// Everything written to `model.json`. Contains no timings, so identical
/// configs give identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    /// Equilibrium in the original coordinates; the model works in
    /// coordinates shifted by it.
    pub equilibrium: Vec<f64>,
    /// First state of every demonstration, original coordinates.
    pub demo_starts: Vec<Vec<f64>>,
    /// Largest state norm in the shifted demonstrations.
    pub data_radius: f64,
    pub training_mse: f64,
    /// Most violating direction when composition failed.
    pub composition_witness: Option<Vec<f64>>,
    pub config: PipelineConfig,
    /// Effective hyperparameters per subsystem.
    pub hyperparams: Vec<SubsystemHyperparams<f64>>,
    pub model: ComposedModel<f64>,
}

impl ModelFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.version != MODEL_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported model version {}", m.version)));
        }
        if m.equilibrium.len() != m.model.n() {
            return Err(Error::DimensionMismatch("equilibrium does not match the model".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Radius used for sampled checks.
    pub fn check_radius(&self) -> f64 {
        (2.0 * self.data_radius).max(1.0)
    }

    pub fn to_model_coords(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.equilibrium).map(|(a, b)| a - b).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemSummary {
    pub index: usize,
    pub k: usize,
    pub objective: f64,
    pub residual_sum: f64,
    pub outer_iterations: usize,
    pub pullback_steps: usize,
    pub stage_p_margin: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub load_seconds: f64,
    /// Wall time of the whole subsystem stage.
    pub subsystem_seconds: f64,
    pub composition_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub certified: bool,
    pub certificate_eig: f64,
    pub mu: Vec<f64>,
    pub rates: GlobalRates<f64>,
    pub training_mse: f64,
    pub samples: usize,
    pub subsystems: Vec<SubsystemSummary>,
    pub timings: StageTimings,
    pub config: PipelineConfig,
    pub hyperparams: Vec<SubsystemHyperparams<f64>>,
}

#[derive(Debug)]
pub struct LearnOutcome {
    pub model: ModelFile,
    pub summary: Summary,
    /// Set when no multipliers certify the composition.
    pub composition_error: Option<Error>,
}

struct SubsystemResult {
    gmm: GmmFit<f64>,
    model: SubsystemModel<f64>,
    seconds: f64,
}

fn learn_one(
    cfg: &PipelineConfig,
    data: &SubsystemData<f64>,
    hp: &SubsystemHyperparams<f64>,
) -> Result<SubsystemResult> {
    let start = Instant::now();
    let seed = cfg.seed.wrapping_add(data.index as u64);
    let gmm = match cfg.gmm.k {
        Some(k) => fit_gmm(&data.x_samples, k, seed, &cfg.gmm.options)?,
        None => select_k_fit(&data.x_samples, cfg.gmm.k_range[0]..=cfg.gmm.k_range[1], seed, &cfg.gmm.options)?,
    };
    let model = learn_subsystem(data, &gmm.model, hp, &cfg.solver)?;
    info!(
        "subsystem {}: K={} objective={:.3e} outer={} pullback={}",
        data.index + 1,
        gmm.model.k(),
        model.objective,
        model.info.outer_iterations,
        model.info.pullback_steps
    );
    Ok(SubsystemResult {
        gmm,
        model,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs the whole pipeline in memory. Composition infeasibility is not an
/// error here; it is reported through [`LearnOutcome::composition_error`]
/// with an uncertified model.
pub fn learn(cfg: &PipelineConfig, base: &Path) -> Result<LearnOutcome> {
    let total = Instant::now();
    let prep = cfg.validate(base)?;

    let t = Instant::now();
    let raw = DemonstrationSet::<f64>::load(&prep.data_path, prep.format, cfg.data.dt)?;
    let eq = match &cfg.equilibrium {
        EquilibriumConfig::Auto(_) => Equilibrium::Auto,
        EquilibriumConfig::Point(p) => Equilibrium::Point(p.clone()),
    };
    let mut demos = raw.shift_to_origin(&eq)?;
    if !demos.has_velocities() {
        demos = demos.estimate_velocities()?;
    }
    let spec = match &prep.spec {
        Some(s) => s.clone(),
        None => fully_connected_scalar(demos.n)?,
    };
    if spec.n() != demos.n {
        return Err(Error::SpecMismatch(format!(
            "topology has n={}, data has n={}",
            spec.n(),
            demos.n
        )));
    }
    if let Some(&idx) = prep.overrides.keys().find(|&&i| i > spec.len()) {
        return Err(Error::InvalidConfig(format!("override for unknown subsystem {idx}")));
    }
    let (xs, vs) = demos.samples()?;
    let sub_data = demos.project_to_subsystems(&spec)?;
    let load_seconds = t.elapsed().as_secs_f64();
    let hps: Vec<SubsystemHyperparams<f64>> = (0..spec.len()).map(|i| prep.hyperparams_for(cfg, i)).collect();

    let t = Instant::now();
    let results: Vec<Result<SubsystemResult>> = if cfg.parallel && sub_data.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = sub_data
                .iter()
                .zip(&hps)
                .map(|(d, hp)| s.spawn(move || learn_one(cfg, d, hp)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect()
        })
    } else {
        sub_data.iter().zip(&hps).map(|(d, hp)| learn_one(cfg, d, hp)).collect()
    };
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let subsystem_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let models: Vec<SubsystemModel<f64>> = results.iter().map(|r| r.model.clone()).collect();
    let m = spec.matrix();
    let (composed, composition_error, witness) = match solve_mu(&models, &spec, &m, &cfg.compose, &cfg.solver) {
        Ok(mu) => (compose(&spec, models, mu, cfg.compose.tol)?, None, None),
        Err(Error::CompositionInfeasible { max_eig, witness, mu }) => {
            info!("composition infeasible: max eigenvalue {max_eig:e}");
            let model = ComposedModel::uncertified(&spec, models, mu.clone())?;
            let w = witness.clone();
            (model, Some(Error::CompositionInfeasible { max_eig, witness, mu }), Some(w))
        }
        Err(e) => return Err(e),
    };
    let composition_seconds = t.elapsed().as_secs_f64();

    let training_mse = mse(&composed, &xs, &vs)?;
    let subsystems = results
        .iter()
        .zip(&sub_data)
        .zip(&composed.subsystems)
        .map(|((r, d), s)| {
            Ok(SubsystemSummary {
                index: d.index + 1,
                k: r.gmm.model.k(),
                objective: s.objective,
                residual_sum: subsystem_residual(s, d)?,
                outer_iterations: s.info.outer_iterations,
                pullback_steps: s.info.pullback_steps,
                stage_p_margin: s.info.stage_p_margin,
                seconds: r.seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let model = ModelFile {
        version: MODEL_VERSION,
        equilibrium: demos.equilibrium.clone(),
        demo_starts: raw.starts(),
        data_radius: demos.max_norm(),
        training_mse,
        composition_witness: witness,
        config: cfg.clone(),
        hyperparams: hps.clone(),
        model: composed,
    };
    let summary = Summary {
        certified: model.model.certified,
        certificate_eig: model.model.certificate_eig,
        mu: model.model.mu.clone(),
        rates: model.model.rates.clone(),
        training_mse,
        samples: xs.len(),
        subsystems,
        timings: StageTimings {
            load_seconds,
            subsystem_seconds,
            composition_seconds,
            total_seconds: total.elapsed().as_secs_f64(),
        },
        config: cfg.clone(),
        hyperparams: hps,
    };
    Ok(LearnOutcome {
        model,
        summary,
        composition_error,
    })
}

/// Writes `model.json` and `summary.json` into `dir`.
pub fn write_outputs(outcome: &LearnOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MODEL_FILE), outcome.model.to_json())?;
    std::fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&outcome.summary)?,
    )?;
    Ok(())
}

/// Per-subsystem certificates, sampled global checks and the dissipation
/// chain, merged into one report.
pub fn verify_model(file: &ModelFile, samples: usize, seed: u64, tol: f64) -> Result<CertificateReport> {
    let m = &file.model;
    let mut rep = CertificateReport::new();
    for s in &m.subsystems {
        rep.extend_prefixed(&format!("subsystem{}/", s.index + 1), check_subsystem_certificate(s, tol)?);
    }
    let radius = file.check_radius();
    rep.extend_prefixed("composed/", verify_composed(m, samples, radius, seed, tol)?);
    rep.extend_prefixed("chain/", cross_check_composition(m, samples, radius, seed, tol)?);
    Ok(rep)
}
