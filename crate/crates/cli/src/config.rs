//! Flat TOML configuration with per-key diagnostics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatprep_core::densify::{DensifyParams, SamplingMode};
use splatprep_core::hull_filter::FilterParams;
use splatprep_core::metrics::{DinoSign, LossWeights};
use splatprep_core::segment_fusion::FusionOptions;
use splatprep_core::view_select::{ForwardConvention, SelectParams};
use toml::Spanned;

use crate::error::{CliError, Stage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(line: Option<usize>, key: &str, message: impl Into<String>) -> Self {
        Self { line, key: key.to_string(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.key, self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Isotropic,
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Forward {
    NegZ,
    PosZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Sign {
    PaperLiteral,
    Dissimilarity,
}

macro_rules! params {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr;)*) => {
        /// Every tunable module parameter.
        #[derive(Debug, Clone, PartialEq, Serialize)]
        pub struct Params {
            $(pub $name: $ty,)*
        }

        impl Default for Params {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        #[derive(Debug, Default, Deserialize)]
        struct RawParams {
            $(#[serde(default)] $name: Option<Spanned<$ty>>,)*
        }

        /// Command-line overrides for [`Params`].
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct ParamArgs {
            $($(#[doc = $doc])* #[arg(long)] pub $name: Option<$ty>,)*
        }

        const PARAM_KEYS: &[&str] = &[$(stringify!($name)),*];

        impl Params {
            fn merge_raw(&mut self, raw: RawParams, text: &str, lines: &mut BTreeMap<String, usize>) {
                $(if let Some(v) = raw.$name {
                    lines.insert(stringify!($name).to_string(), line_of(text, v.span().start));
                    self.$name = v.into_inner();
                })*
            }

            pub fn apply(&mut self, args: &ParamArgs) {
                $(if let Some(v) = &args.$name {
                    self.$name = v.clone();
                })*
            }
        }
    };
}

params! {
    /// Outlier distance threshold as a fraction of the hull diagonal
    rel_threshold: f64 = 0.05;
    /// Minimum track length for trusted-core points
    min_track: usize = 3;
    /// Reprojection-error quantile bounding the trusted core
    max_error_quantile: f64 = 0.9;
    /// Smallest candidate cluster count
    k_min: usize = 3;
    /// Coverage weight of the k-selection score
    alpha: f64 = 0.5;
    /// Compactness weight of the k-selection score
    beta: f64 = 0.5;
    /// Camera forward axis convention
    forward: Forward = Forward::NegZ;
    /// Normalized overlap needed to merge two local segments
    overlap_threshold: f64 = 0.5;
    /// Only label points whose track includes the view
    strict_visibility: bool = false;
    /// Negate camera-frame y before projecting
    y_flip: bool = false;
    /// Mask-area density factor
    gamma: f64 = 0.1;
    /// Minimum target point count per segment
    n_min: usize = 10;
    /// Densification noise model
    mode: Mode = Mode::Isotropic;
    /// Weight of the semantic loss term
    lambda_dino: f64 = 0.05;
    /// Weight of the structural term in the photometric loss
    lambda_dssim: f64 = 0.2;
    /// Sign convention of the semantic loss term
    dino_sign: Sign = Sign::Dissimilarity;
}

impl Params {
    pub fn filter(&self) -> FilterParams {
        FilterParams {
            rel_threshold: self.rel_threshold,
            min_track: self.min_track,
            max_error_quantile: self.max_error_quantile,
        }
    }

    pub fn select(&self, seed: u64) -> SelectParams {
        SelectParams { k_min: self.k_min, alpha: self.alpha, beta: self.beta, seed }
    }

    pub fn forward_convention(&self) -> ForwardConvention {
        match self.forward {
            Forward::NegZ => ForwardConvention::NegZ,
            Forward::PosZ => ForwardConvention::PosZ,
        }
    }

    pub fn fusion(&self) -> FusionOptions {
        FusionOptions { strict_visibility: self.strict_visibility, y_flip: self.y_flip }
    }

    pub fn densify(&self, seed: u64) -> DensifyParams {
        DensifyParams {
            gamma: self.gamma,
            n_min: self.n_min,
            mode: match self.mode {
                Mode::Isotropic => SamplingMode::Isotropic,
                Mode::Covariance => SamplingMode::Covariance,
            },
            seed,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_dino: self.lambda_dino,
            lambda_dssim: self.lambda_dssim,
            dino_sign: match self.dino_sign {
                Sign::PaperLiteral => DinoSign::PaperLiteral,
                Sign::Dissimilarity => DinoSign::Dissimilarity,
            },
        }
    }

    /// Range violations as `(key, message)`.
    pub fn range_errors(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut check = |ok: bool, key: &'static str, msg: &str| {
            if !ok {
                out.push((key, msg.to_string()));
            }
        };
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        check(finite_nonneg(self.rel_threshold), "rel_threshold", "must be a finite value >= 0");
        check((0.0..=1.0).contains(&self.max_error_quantile), "max_error_quantile", "must lie in [0, 1]");
        check(self.k_min >= 1, "k_min", "must be at least 1");
        check(finite_nonneg(self.alpha), "alpha", "must be a finite value >= 0");
        check(finite_nonneg(self.beta), "beta", "must be a finite value >= 0");
        check(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0, "overlap_threshold", "must lie in (0, 1]");
        check(self.gamma.is_finite() && self.gamma > 0.0, "gamma", "must be a finite value > 0");
        check(finite_nonneg(self.lambda_dino), "lambda_dino", "must be a finite value >= 0");
        check((0.0..=1.0).contains(&self.lambda_dssim), "lambda_dssim", "must lie in [0, 1]");
        out
    }
}

/// Input locations; any may be absent when the stages that need it are not run.
#[derive(Debug, Clone, Default, PartialEq, clap::Args)]
pub struct Inputs {
    /// COLMAP sparse model directory
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory of per-view mask PNGs with sidecars
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Directory holding gt/ and render/ image subdirectories
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Directory holding gt/ and render/ embedding subdirectories
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Reference PLY for point-set distances
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

impl Inputs {
    fn merge(&mut self, other: &Inputs) {
        for (dst, src) in [
            (&mut self.model, &other.model),
            (&mut self.masks, &other.masks),
            (&mut self.images, &other.images),
            (&mut self.embeddings, &other.embeddings),
            (&mut self.reference, &other.reference),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
    }

    /// `(role, path)` for every input that is set.
    pub fn entries(&self) -> Vec<(&'static str, &Path)> {
        [
            ("model", &self.model),
            ("masks", &self.masks),
            ("images", &self.images),
            ("embeddings", &self.embeddings),
            ("reference", &self.reference),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|p| (k, p)))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub inputs: Inputs,
    pub output: PathBuf,
    pub scene: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub stages: Vec<Stage>,
    pub params: Params,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inputs: Inputs::default(),
            output: PathBuf::from("splatprep-out"),
            scene: "scene".to_string(),
            seed: 0,
            threads: None,
            stages: Stage::ALL.to_vec(),
            params: Params::default(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct RawGeneral {
    model: Option<Spanned<PathBuf>>,
    masks: Option<Spanned<PathBuf>>,
    images: Option<Spanned<PathBuf>>,
    embeddings: Option<Spanned<PathBuf>>,
    reference: Option<Spanned<PathBuf>>,
    output: Option<Spanned<PathBuf>>,
    scene: Option<Spanned<String>>,
    seed: Option<Spanned<u64>>,
    threads: Option<Spanned<usize>>,
    stages: Option<Spanned<Vec<Stage>>>,
}

const GENERAL_KEYS: &[&str] =
    &["model", "masks", "images", "embeddings", "reference", "output", "scene", "seed", "threads", "stages"];

fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())].iter().filter(|&&b| b == b'\n').count() + 1
}

fn suggestion(key: &str) -> Option<&'static str> {
    GENERAL_KEYS
        .iter()
        .chain(PARAM_KEYS)
        .map(|k| (strsim::jaro_winkler(key, k), *k))
        .filter(|(s, _)| *s >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k)
}

fn toml_diagnostic(text: &str, e: &toml::de::Error) -> Diagnostic {
    let line = e.span().map(|s| line_of(text, s.start));
    Diagnostic::new(line, "config", e.message().trim().to_string())
}

impl PipelineConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let table = toml::de::DeTable::parse(text).map_err(|e| CliError::Config(vec![toml_diagnostic(text, &e)]))?;
        let mut diags = Vec::new();
        for (key, _) in table.get_ref() {
            let name = key.get_ref().as_ref();
            if !GENERAL_KEYS.contains(&name) && !PARAM_KEYS.contains(&name) {
                let mut msg = "unknown key".to_string();
                if let Some(s) = suggestion(name) {
                    msg.push_str(&format!("; did you mean `{s}`?"));
                }
                diags.push(Diagnostic::new(Some(line_of(text, key.span().start)), name, msg));
            }
        }
        let general: RawGeneral =
            toml::from_str(text).map_err(|e| CliError::Config(vec![toml_diagnostic(text, &e)]))?;
        let raw_params: RawParams =
            toml::from_str(text).map_err(|e| CliError::Config(vec![toml_diagnostic(text, &e)]))?;

        let mut cfg = PipelineConfig::default();
        let mut lines = BTreeMap::new();
        cfg.params.merge_raw(raw_params, text, &mut lines);
        let resolve = |p: Spanned<PathBuf>| {
            let p = p.into_inner();
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        cfg.inputs = Inputs {
            model: general.model.map(resolve),
            masks: general.masks.map(resolve),
            images: general.images.map(resolve),
            embeddings: general.embeddings.map(resolve),
            reference: general.reference.map(resolve),
        };
        if let Some(o) = general.output {
            cfg.output = resolve(o);
        }
        if let Some(s) = general.scene {
            cfg.scene = s.into_inner();
        }
        if let Some(s) = general.seed {
            cfg.seed = s.into_inner();
        }
        if let Some(t) = general.threads {
            lines.insert("threads".into(), line_of(text, t.span().start));
            cfg.threads = Some(t.into_inner());
        }
        if let Some(s) = general.stages {
            lines.insert("stages".into(), line_of(text, s.span().start));
            cfg.stages = s.into_inner();
        }
        diags.extend(cfg.range_errors().into_iter().map(|(k, m)| Diagnostic::new(lines.get(k).copied(), k, m)));
        if diags.is_empty() {
            cfg.normalize_stages();
            Ok(cfg)
        } else {
            Err(CliError::Config(diags))
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("config", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn range_errors(&self) -> Vec<(&'static str, String)> {
        let mut out = self.params.range_errors();
        if self.threads == Some(0) {
            out.push(("threads", "must be at least 1".into()));
        }
        if self.stages.is_empty() {
            out.push(("stages", "must name at least one stage".into()));
        }
        out
    }

    fn normalize_stages(&mut self) {
        self.stages.sort();
        self.stages.dedup();
    }

    /// Applies command-line overrides and re-checks ranges.
    pub fn apply_overrides(&mut self, inputs: &Inputs, params: &ParamArgs) -> Result<(), CliError> {
        self.inputs.merge(inputs);
        self.params.apply(params);
        self.check()
    }

    pub fn check(&mut self) -> Result<(), CliError> {
        let errs = self.range_errors();
        if errs.is_empty() {
            self.normalize_stages();
            Ok(())
        } else {
            Err(CliError::Config(errs.into_iter().map(|(k, m)| Diagnostic::new(None, k, m)).collect()))
        }
    }

    /// Checks that every input the requested stages read is set and exists.
    pub fn check_inputs(&self, stages: &[Stage], evaluate_optional: bool) -> Result<(), CliError> {
        let mut diags = Vec::new();
        let require = |diags: &mut Vec<Diagnostic>, role: &str, path: &Option<PathBuf>, stage: Stage| match path {
            None => diags.push(Diagnostic::new(None, role, format!("required by the {stage} stage"))),
            Some(p) if !p.exists() => {
                diags.push(Diagnostic::new(None, role, format!("{} does not exist", p.display())))
            }
            Some(_) => {}
        };
        for &stage in stages {
            match stage {
                Stage::Filter | Stage::Cluster => require(&mut diags, "model", &self.inputs.model, stage),
                Stage::Fuse => {
                    require(&mut diags, "model", &self.inputs.model, stage);
                    require(&mut diags, "masks", &self.inputs.masks, stage);
                }
                Stage::Densify => {}
                Stage::Evaluate => {
                    let i = &self.inputs;
                    if i.images.is_none() && i.embeddings.is_none() && i.reference.is_none() && !evaluate_optional {
                        diags.push(Diagnostic::new(
                            None,
                            "images",
                            "the evaluate stage needs images, embeddings, or reference",
                        ));
                    }
                }
            }
        }
        for (role, p) in self.inputs.entries() {
            if !p.exists() && !diags.iter().any(|d| d.key == role) {
                diags.push(Diagnostic::new(None, role, format!("{} does not exist", p.display())));
            }
        }
        if diags.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(diags))
        }
    }
}
