//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use asagan::data::DatasetKind;
use asagan::metrics::{EmbeddingKind, EmbeddingSpec};
use asagan::nets::{Family, ModelConfig};
use asagan::trainer::{GenLossMode, Objective, TrainConfig};

use crate::CliError;

pub const OUTPUT_ROOT_ENV: &str = "ASAGAN_OUTPUT_ROOT";

/// Every accepted key with its default. An empty default means unset.
const SCHEMA: &[(&str, &str)] = &[
    // training
    ("total_steps", "10000"),
    ("batch_size", "8"),
    ("lr", "0.0002"),
    ("adam_beta1", "0.5"),
    ("adam_beta2", "0.999"),
    ("lambda_base", "1.0"),
    ("augment_d", "true"),
    ("augment_g", "true"),
    ("gen_loss_mode", "nonsaturating"),
    ("objective", "bound"),
    ("recon_weight", "1.0"),
    ("stats_decay", "1.0"),
    ("seed", "0"),
    ("checkpoint_every", "0"),
    ("eval_every", "0"),
    ("eval_samples", "0"),
    ("resume", ""),
    // data
    ("data_kind", "ring8"),
    ("n_samples", "512"),
    ("n_shot", "0"),
    ("data_seed", "0"),
    ("data_path", ""),
    ("resolution", "32"),
    ("channels", "3"),
    // model
    ("latent_dim", ""),
    ("feature_dim", ""),
    ("hidden_width", ""),
    ("base_channels", ""),
    // evaluation embedding
    ("embedding_kind", "auto"),
    ("embedding_seed", "0"),
    ("embedding_dim", "64"),
    // outputs and command options
    ("output_dir", "asagan-out"),
    ("checkpoint", ""),
    ("n", "64"),
    ("pairs", "1"),
    ("steps", "8"),
    ("instances", "100"),
    ("draws", "100000"),
    ("mgf_draws", "1000000"),
    ("self_test", "false"),
];

/// Resolved key/value pairs: defaults, then the config file, then overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    SCHEMA.iter().any(|(k, _)| *k == key)
}

pub fn parse_text(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected `key = value`", i + 1)))?;
        let k = k.trim().to_string();
        if out.iter().any(|(prev, _)| *prev == k) {
            return Err(CliError::Usage(format!("{origin}:{}: duplicate key {k}", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument {a:?}; options look like --key value")));
        };
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Usage(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            SCHEMA.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut layers = Vec::new();
        let mut overrides = parse_overrides(overrides)?;
        let mut file = file.map(Path::to_path_buf);
        if let Some(pos) = overrides.iter().position(|(k, _)| k == "config") {
            file = Some(PathBuf::from(overrides.remove(pos).1));
        }
        if let Some(path) = &file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            layers.push(parse_text(&text, &path.display().to_string())?);
        }
        layers.push(overrides);
        for layer in layers {
            for (k, v) in layer {
                if !known(&k) {
                    return Err(CliError::Usage(format!("unknown configuration key {k:?}")));
                }
                values.insert(k, v);
            }
        }
        let cfg = RunConfig { values };
        cfg.validate()?;
        Ok(cfg)
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("schema key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| CliError::Usage(format!("invalid value {:?} for {key}: {e}", self.raw(key))))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key)).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    fn validate(&self) -> Result<(), CliError> {
        let t = self.train_config()?;
        t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.model_config()?.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.embedding()?;
        for key in ["n_samples", "n_shot", "data_seed", "n", "pairs", "steps", "instances", "draws", "mgf_draws"] {
            self.get::<u64>(key)?;
        }
        self.get::<bool>("self_test")?;
        if self.data_kind()? == DatasetKind::ImageFolder && self.path("data_path").is_none() {
            return Err(CliError::Usage("data_kind = image_folder needs data_path".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            total_steps: self.get("total_steps")?,
            batch_size: self.get("batch_size")?,
            lr: self.get("lr")?,
            adam_beta1: self.get("adam_beta1")?,
            adam_beta2: self.get("adam_beta2")?,
            lambda_base: self.get("lambda_base")?,
            augment_d: self.get("augment_d")?,
            augment_g: self.get("augment_g")?,
            gen_loss_mode: match self.raw("gen_loss_mode") {
                "nonsaturating" => GenLossMode::Nonsaturating,
                "paper_saturating" => GenLossMode::PaperSaturating,
                other => return Err(CliError::Usage(format!("unknown gen_loss_mode {other:?}"))),
            },
            objective: match self.raw("objective") {
                "bound" => Objective::Bound,
                "plain_cross_entropy" => Objective::PlainCrossEntropy,
                other => return Err(CliError::Usage(format!("unknown objective {other:?}"))),
            },
            recon_weight: self.get("recon_weight")?,
            stats_decay: self.get("stats_decay")?,
            seed: self.get("seed")?,
            checkpoint_every: self.get("checkpoint_every")?,
            eval_every: self.get("eval_every")?,
            eval_samples: self.get("eval_samples")?,
        })
    }

    pub fn data_kind(&self) -> Result<DatasetKind, CliError> {
        self.raw("data_kind").parse().map_err(|e: asagan::Error| CliError::Usage(e.to_string()))
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut m = match self.data_kind()? {
            DatasetKind::Ring8 | DatasetKind::Grid25 => ModelConfig::vector(2),
            DatasetKind::ImageFolder => ModelConfig::image(self.get("channels")?, self.get("resolution")?),
        };
        if let Some(v) = self.opt("latent_dim")? {
            m.latent_dim = v;
        }
        if let Some(v) = self.opt("feature_dim")? {
            m.feature_dim = v;
        }
        if let Some(v) = self.opt("hidden_width")? {
            m.hidden_width = v;
        }
        if let Some(v) = self.opt("base_channels")? {
            m.base_channels = v;
        }
        Ok(m)
    }

    pub fn embedding(&self) -> Result<Option<EmbeddingSpec>, CliError> {
        let kind = match self.raw("embedding_kind") {
            "auto" => return Ok(None),
            "identity" => EmbeddingKind::Identity,
            "fixed_random_conv" => EmbeddingKind::FixedRandomConv,
            other => return Err(CliError::Usage(format!("unknown embedding_kind {other:?}"))),
        };
        Ok(Some(EmbeddingSpec {
            kind,
            seed: self.get("embedding_seed")?,
            out_dim: self.get("embedding_dim")?,
        }))
    }

    /// Embedding for a model family unless one is configured explicitly.
    pub fn embedding_for(&self, model: &ModelConfig) -> Result<EmbeddingSpec, CliError> {
        Ok(match self.embedding()? {
            Some(e) => e,
            None => match model.family {
                Family::Vector => EmbeddingSpec::identity(model.data_dim),
                Family::Image => EmbeddingSpec::random_conv(self.get("embedding_seed")?, self.get("embedding_dim")?),
            },
        })
    }

    /// `output_dir`, placed under the output root when relative and the
    /// root variable is set.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(Path::new(self.raw("output_dir")))
    }

    /// The resolved configuration as sorted `key = value` lines.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
