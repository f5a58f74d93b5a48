//! Run configuration: a flat JSON file whose fields can be overridden by
//! command-line flags of the same (kebab-case) name.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use pdadmm::model::{HyperParams, LayerShape};
use pdadmm::quantization::QuantizationSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum RunMode {
    #[serde(rename = "pdadmm")]
    #[value(name = "pdadmm")]
    Pdadmm,
    #[serde(rename = "pdadmm-q")]
    #[value(name = "pdadmm-q")]
    PdadmmQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub layers: usize,
    pub neurons: usize,
    pub hops: usize,
    pub rho: f64,
    pub nu: f64,
    pub epochs: usize,
    pub schedule: Vec<usize>,
    pub mode: RunMode,
    pub quant_levels: usize,
    pub quant_lo: f64,
    pub quant_hi: f64,
    pub workers: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub l2: f64,
    /// Write measured epoch times; off keeps metrics.csv reproducible.
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        let q = QuantizationSpec::default();
        RunConfig {
            dataset: None,
            layers: 3,
            neurons: 64,
            hops: hp.hops,
            rho: hp.rho,
            nu: hp.nu,
            epochs: hp.epochs,
            schedule: Vec::new(),
            mode: RunMode::Pdadmm,
            quant_levels: q.levels,
            quant_lo: q.lo,
            quant_hi: q.hi,
            workers: 1,
            seed: 0,
            output: PathBuf::from("run"),
            l2: 0.0,
            record_timing: false,
        }
    }
}

/// Flags that override config-file values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub neurons: Option<usize>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Comma-separated layer counts, e.g. `2,4`.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub mode: Option<RunMode>,
    #[arg(long)]
    pub quant_levels: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub quant_lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub quant_hi: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub record_timing: Option<bool>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident, $($field:ident),*) => {
        $(if let Some(v) = $o.$field.clone() { $cfg.$field = v; })*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Config file (if any) with the flags applied on top.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &o.dataset {
            cfg.dataset = Some(d.clone());
        }
        apply!(cfg, o, layers, neurons, hops, rho, nu, epochs, schedule, mode, quant_levels, quant_lo, quant_hi, workers, seed, output, l2, record_timing);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_none() {
            bail!("no dataset given");
        }
        if self.layers == 0 || self.neurons == 0 || self.hops == 0 || self.epochs == 0 || self.workers == 0 {
            bail!("layers, neurons, hops, epochs and workers must be positive");
        }
        if self.workers > self.layers {
            bail!("{} workers for {} layers; each worker needs at least one layer", self.workers, self.layers);
        }
        self.hyper().validate(self.layers)?;
        Ok(())
    }

    pub fn dataset(&self) -> &Path {
        self.dataset.as_deref().expect("validated config has a dataset")
    }

    pub fn quantization(&self) -> Option<QuantizationSpec> {
        match self.mode {
            RunMode::Pdadmm => None,
            RunMode::PdadmmQ => Some(QuantizationSpec { levels: self.quant_levels, lo: self.quant_lo, hi: self.quant_hi }),
        }
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            rho: self.rho,
            nu: self.nu,
            hops: self.hops,
            epochs: self.epochs,
            schedule: self.schedule.clone(),
            l2: self.l2,
            quantization: self.quantization(),
            seed: self.seed,
            ..HyperParams::default()
        }
    }

    pub fn shapes(&self, input_dim: usize, classes: usize) -> Vec<LayerShape> {
        LayerShape::chain(input_dim, self.neurons, classes, self.layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, json: &str) -> PathBuf {
        let path = dir.join("run.json");
        fs::write(&path, json).unwrap();
        path
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), r#"{"dataset":"a","layers":4,"rho":0.5,"mode":"pdadmm-q","schedule":[2,4]}"#);
        let o = Overrides { config: Some(path.clone()), rho: Some(2.0), ..Overrides::default() };
        let cfg = RunConfig::resolve(&o).unwrap();
        assert_eq!((cfg.layers, cfg.rho, cfg.mode), (4, 2.0, RunMode::PdadmmQ));
        assert_eq!(cfg.schedule, vec![2, 4]);
        let o = Overrides { config: Some(path), dataset: Some("b".into()), layers: Some(5), schedule: Some(vec![5]), ..Overrides::default() };
        let cfg = RunConfig::resolve(&o).unwrap();
        assert_eq!((cfg.dataset(), cfg.layers), (Path::new("b"), 5));
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), r#"{"dataset":"a","learning_rate":0.1}"#);
        assert!(RunConfig::resolve(&Overrides { config: Some(path), ..Overrides::default() }).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let base = Overrides { dataset: Some("d".into()), ..Overrides::default() };
        assert!(RunConfig::resolve(&base).is_ok());
        assert!(RunConfig::resolve(&Overrides { workers: Some(4), ..base.clone() }).is_err());
        assert!(RunConfig::resolve(&Overrides { rho: Some(0.0), ..base.clone() }).is_err());
        assert!(RunConfig::resolve(&Overrides { schedule: Some(vec![2, 2]), ..base.clone() }).is_err());
        let q = Overrides { mode: Some(RunMode::PdadmmQ), ..base.clone() };
        assert!(RunConfig::resolve(&Overrides { quant_levels: Some(1), ..q.clone() }).is_err());
        assert!(RunConfig::resolve(&Overrides { quant_lo: Some(2.0), ..q }).is_err());
        assert!(RunConfig::resolve(&Overrides::default()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig { dataset: Some("x".into()), mode: RunMode::PdadmmQ, ..RunConfig::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(r#""mode":"pdadmm-q""#));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
