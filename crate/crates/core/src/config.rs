//! Flat `key = value` run configuration.
//!
//! Layers merge in order file, environment, flags; later layers win. The
//! family key picks the model and training presets before any other key is
//! applied, so key order never matters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{Family, ModelSpec, WidthRounding};
use crate::train::TrainConfig;

/// Environment variable naming the Cifar-10 batch directory.
pub const DATA_DIR_ENV: &str = "CIFAR10_DIR";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: invalid key {key:?}")]
    Key { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("unknown key {0:?}")]
    Unknown(String),
    #[error("{key}: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
}

/// Parsed `key = value` pairs in file order.
///
/// `#` starts a comment at the beginning of a line or after whitespace.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = strip_comment(raw).trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.') {
            return Err(ConfigError::Key { line, key: k.to_string() });
        }
        let key = k.replace('-', "_");
        if out.iter().any(|(e, _)| *e == key) {
            return Err(ConfigError::Duplicate { line, key });
        }
        out.push((key, v.to_string()));
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    let mut prev_space = true;
    for (i, c) in line.char_indices() {
        if c == '#' && prev_space {
            return &line[..i];
        }
        prev_space = c.is_whitespace();
    }
    line
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: v.into(), reason: e.to_string() })
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::Value { key: key.into(), value: v.into(), reason: "expected true or false".into() }),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| value(key, s)).collect()
}

/// `epoch:divisor` pairs, comma separated.
fn drops(key: &str, v: &str) -> Result<Vec<(usize, f64)>, ConfigError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (e, d) = s.split_once(':').ok_or_else(|| ConfigError::Value {
                key: key.into(),
                value: v.into(),
                reason: "expected epoch:divisor".into(),
            })?;
            Ok((value(key, e)?, value(key, d)?))
        })
        .collect()
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    /// Use the seeded synthetic set even when `dir` is set.
    pub synthetic: bool,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    /// Keep only the first so many training / test images (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: None, synthetic: false, synthetic_train: 5000, synthetic_test: 1000, train_limit: 0, test_limit: 0 }
    }
}

/// Everything a CLI command needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub qualities: Vec<u8>,
    pub probe_layer: String,
    pub probe_eps: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_family(Family::PyramidResNet)
    }
}

impl RunConfig {
    pub fn for_family(family: Family) -> Self {
        let (model, train) = match family {
            Family::PyramidResNet => (ModelSpec::pyramid(18, false), TrainConfig::resnet()),
            Family::DenseNetBc => (ModelSpec::densenet(16, 12, false), TrainConfig::densenet()),
        };
        Self {
            model,
            train,
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            cache_dir: None,
            qualities: crate::eval::QUALITIES.to_vec(),
            probe_layer: "all".into(),
            probe_eps: vec![0.01, 0.05, 0.1],
        }
    }

    /// Merge layers (lowest precedence first) into a validated config.
    pub fn from_layers(layers: &[Vec<(String, String)>]) -> Result<Self, ConfigError> {
        let mut merged: BTreeMap<String, String> = BTreeMap::new();
        for layer in layers {
            for (k, v) in layer {
                merged.insert(k.replace('-', "_"), v.clone());
            }
        }
        let family = match merged.remove("family") {
            Some(v) => value::<Family>("family", &v)?,
            None => Family::PyramidResNet,
        };
        let mut cfg = Self::for_family(family);
        // depth is a DenseNet shorthand for n and must not override an explicit n
        if let Some(depth) = merged.remove("depth") {
            if !merged.contains_key("n") {
                let l: usize = value("depth", &depth)?;
                let spec = ModelSpec::densenet_depth(l, cfg.model.k, false).map_err(|e| ConfigError::Value {
                    key: "depth".into(),
                    value: depth.clone(),
                    reason: e.to_string(),
                })?;
                cfg.model.n = spec.n;
            }
        }
        for (k, v) in &merged {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Parse one config file on its own.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_layers(&[parse_kv(text)?])
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "family" => {
                let f: Family = value(key, v)?;
                if f != m.family {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        value: v.into(),
                        reason: "family is fixed once chosen".into(),
                    });
                }
            }
            "n" => m.n = value(key, v)?,
            "k" => m.k = value(key, v)?,
            "alpha" => m.alpha = value(key, v)?,
            "q" => m.q = value(key, v)?,
            "num_classes" => m.num_classes = value(key, v)?,
            "min" => m.min_substitution = boolean(key, v)?,
            "base_width" => m.base_width = value(key, v)?,
            "rounding" => m.rounding = value::<WidthRounding>(key, v)?,
            "seed" => {
                m.seed = value(key, v)?;
                t.seed = m.seed;
            }
            "epochs" => t.epochs = value(key, v)?,
            "batch_size" => t.batch_size = value(key, v)?,
            "lr" => t.lr0 = value(key, v)?,
            "lr_drops" => t.lr_drops = drops(key, v)?,
            "weight_decay" => t.weight_decay = value(key, v)?,
            "momentum" => t.momentum = value(key, v)?,
            "nesterov" => t.nesterov = boolean(key, v)?,
            "augmentation" => t.augmentation = boolean(key, v)?,
            "record_time" => t.record_time = boolean(key, v)?,
            "data_dir" => self.data.dir = non_empty(text(key, v)?),
            "synthetic" => self.data.synthetic = boolean(key, v)?,
            "synthetic_train" => self.data.synthetic_train = value(key, v)?,
            "synthetic_test" => self.data.synthetic_test = value(key, v)?,
            "train_limit" => self.data.train_limit = value(key, v)?,
            "test_limit" => self.data.test_limit = value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(text(key, v)?),
            "checkpoint" => self.checkpoint = non_empty(text(key, v)?),
            "cache_dir" => self.cache_dir = non_empty(text(key, v)?),
            "qualities" => {
                let qs: Vec<u8> = list(key, v)?;
                if qs.iter().any(|q| !(1..=100).contains(q)) {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        value: v.into(),
                        reason: "qualities lie in 1..=100".into(),
                    });
                }
                self.qualities = qs;
            }
            "probe_layer" => self.probe_layer = text(key, v)?.to_string(),
            "probe_eps" => self.probe_eps = list(key, v)?,
            "depth" => {
                return Err(ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                    reason: "depth is only read while merging layers".into(),
                })
            }
            other => return Err(ConfigError::Unknown(other.to_string())),
        }
        Ok(())
    }

    /// Every key, one per line, in a fixed order. Parsing the echo gives
    /// back an equal config.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("family", m.family.to_string());
        kv("n", m.n.to_string());
        kv("k", m.k.to_string());
        kv("alpha", m.alpha.to_string());
        kv("q", m.q.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("min", m.min_substitution.to_string());
        kv("base_width", m.base_width.to_string());
        kv("rounding", m.rounding.to_string());
        kv("seed", m.seed.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr0.to_string());
        kv("lr_drops", t.lr_drops.iter().map(|(e, f)| format!("{e}:{f}")).collect::<Vec<_>>().join(","));
        kv("weight_decay", t.weight_decay.to_string());
        kv("momentum", t.momentum.to_string());
        kv("nesterov", t.nesterov.to_string());
        kv("augmentation", t.augmentation.to_string());
        kv("record_time", t.record_time.to_string());
        kv("data_dir", path(&d.dir));
        kv("synthetic", d.synthetic.to_string());
        kv("synthetic_train", d.synthetic_train.to_string());
        kv("synthetic_test", d.synthetic_test.to_string());
        kv("train_limit", d.train_limit.to_string());
        kv("test_limit", d.test_limit.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("checkpoint", path(&self.checkpoint));
        kv("cache_dir", path(&self.cache_dir));
        kv("qualities", join(&self.qualities));
        kv("probe_layer", self.probe_layer.clone());
        kv("probe_eps", join(&self.probe_eps));
        s
    }
}

/// Free-text values must survive a trip through the echo.
fn text<'a>(key: &str, v: &'a str) -> Result<&'a str, ConfigError> {
    let bad = |reason: &str| Err(ConfigError::Value { key: key.into(), value: v.into(), reason: reason.into() });
    if v.contains(['\n', '\r']) {
        return bad("line breaks are not allowed");
    }
    if v.trim() != v {
        return bad("leading or trailing whitespace is not allowed");
    }
    if strip_comment(v).len() != v.len() || v.starts_with('#') {
        return bad("would read back as a comment");
    }
    Ok(v)
}

fn non_empty(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Model keys only, as stored inside checkpoints.
pub fn model_spec_echo(spec: &ModelSpec) -> String {
    let mut cfg = RunConfig::for_family(spec.family);
    cfg.model = spec.clone();
    cfg.echo().lines().take(10).map(|l| format!("{l}\n")).collect()
}

pub fn model_spec_parse(text: &str) -> Result<ModelSpec, ConfigError> {
    let kv = parse_kv(text)?;
    const MODEL_KEYS: [&str; 10] =
        ["family", "n", "k", "alpha", "q", "num_classes", "min", "base_width", "rounding", "seed"];
    if let Some((k, _)) = kv.iter().find(|(k, _)| !MODEL_KEYS.contains(&k.as_str())) {
        return Err(ConfigError::Unknown(k.clone()));
    }
    Ok(RunConfig::from_layers(&[kv])?.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blanks_and_spacing() {
        let kv = parse_kv("# header\n\nn = 3   # trailing\nout_dir=/tmp/a#b\n  min=true\n").unwrap();
        assert_eq!(
            kv,
            vec![("n".into(), "3".into()), ("out_dir".into(), "/tmp/a#b".into()), ("min".into(), "true".into())]
        );
    }

    #[test]
    fn syntax_errors_name_the_line() {
        assert_eq!(parse_kv("n = 1\nbogus\n"), Err(ConfigError::Syntax { line: 2 }));
        assert_eq!(parse_kv("n=1\nn=2"), Err(ConfigError::Duplicate { line: 2, key: "n".into() }));
        assert!(matches!(parse_kv("a b = 1"), Err(ConfigError::Key { line: 1, .. })));
        assert_eq!(RunConfig::parse("colour = red"), Err(ConfigError::Unknown("colour".into())));
        assert!(matches!(RunConfig::parse("epochs = many"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn later_layers_win() {
        let file = parse_kv("epochs = 5\nseed = 1\ndata_dir = /file").unwrap();
        let env = vec![("data_dir".to_string(), "/env".to_string())];
        let flags = vec![("epochs".to_string(), "7".to_string())];
        let cfg = RunConfig::from_layers(&[file, env, flags]).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.data.dir, Some(PathBuf::from("/env")));
        assert_eq!((cfg.model.seed, cfg.train.seed), (1, 1));
    }

    #[test]
    fn family_selects_presets_regardless_of_order() {
        let cfg = RunConfig::parse("epochs = 3\nfamily = densenet\n").unwrap();
        assert_eq!(cfg.model.family, Family::DenseNetBc);
        assert!(cfg.train.nesterov);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.epochs, 3);
        let l100 = RunConfig::parse("family = densenet\ndepth = 100\nmin = true").unwrap();
        assert_eq!(l100.model.n, 16);
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::parse(
            "family=densenet\nn=4\nk=8\nmin=on\nlr=0.05\nlr_drops=2:10,3:5\nqualities=90,10\ncheckpoint=c.mnck",
        )
        .unwrap();
        cfg.probe_eps = vec![0.1, 0.25];
        let again = RunConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.echo(), cfg.echo());
    }

    #[test]
    fn values_that_would_echo_as_comments_are_rejected() {
        // found by the config_parse fuzz target
        assert!(matches!(RunConfig::parse("# \ncache_dir =#\x01"), Err(ConfigError::Value { .. })));
        let mut cfg = RunConfig::for_family(Family::PyramidResNet);
        for bad in ["a #b", "x\ny", " lead", "#"] {
            assert!(cfg.set("out_dir", bad).is_err(), "{bad:?}");
        }
        cfg.set("data_dir", "/data/cifar#10").unwrap();
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn model_echo_round_trips() {
        let spec = ModelSpec { alpha: 4.5, base_width: 6, seed: 99, ..ModelSpec::pyramid(2, true) };
        assert_eq!(model_spec_parse(&model_spec_echo(&spec)).unwrap(), spec);
        assert!(model_spec_parse("n = 1\nepochs = 2").is_err());
    }
}
