//! Run configuration: a flat `key = value` file, overridden by flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use adapter_cluster::merge::{MergeConfig, MergeMethod};
use adapter_cluster::oracle::SyntheticSpec;
use adapter_cluster::partition::Attribute;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("missing required setting `{0}`")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("config file line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterMethod {
    Random,
    Kmeans,
    KmeansSvd,
    Dirichlet,
    D2c,
}

impl ClusterMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusterMethod::Random => "random",
            ClusterMethod::Kmeans => "kmeans",
            ClusterMethod::KmeansSvd => "kmeans_svd",
            ClusterMethod::Dirichlet => "dirichlet",
            ClusterMethod::D2c => "d2c",
        }
    }
}

impl FromStr for ClusterMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "random" => ClusterMethod::Random,
            "kmeans" => ClusterMethod::Kmeans,
            "kmeans_svd" | "kmeans-svd" => ClusterMethod::KmeansSvd,
            "dirichlet" => ClusterMethod::Dirichlet,
            "d2c" => ClusterMethod::D2c,
            other => {
                return Err(format!(
                    "unknown method `{other}` (expected random, kmeans, kmeans_svd, dirichlet or d2c)"
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Synthetic,
    Command,
}

impl FromStr for OracleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(OracleKind::Synthetic),
            "command" => Ok(OracleKind::Command),
            other => Err(format!("unknown oracle `{other}` (expected synthetic or command)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub adapters: Option<PathBuf>,
    pub method: Option<ClusterMethod>,
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
    pub merge: MergeConfig,
    pub oracle: Option<OracleKind>,
    pub oracle_cmd: Option<String>,
    /// Examples per task seen by the search.
    pub examples_per_task: usize,
    /// Examples per task used when reporting final losses.
    pub eval_examples: usize,
    pub oracle_timeout: Duration,
    pub model: Option<PathBuf>,
    pub attribute: Option<Attribute>,
    pub dirichlet_alpha: Option<f64>,
    pub top_k: Option<usize>,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub out: Option<PathBuf>,
    pub partition: Option<PathBuf>,
    pub ks: Vec<usize>,
    pub ns: Vec<usize>,
    pub repeats: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            adapters: None,
            method: None,
            k: 5,
            iters: 200,
            seed: 0,
            merge: MergeConfig::ties(0.5),
            oracle: None,
            oracle_cmd: None,
            examples_per_task: 10,
            eval_examples: 100,
            oracle_timeout: Duration::from_secs(600),
            model: None,
            attribute: None,
            dirichlet_alpha: None,
            top_k: None,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            out: None,
            partition: None,
            ks: Vec::new(),
            ns: Vec::new(),
            repeats: 1,
            synthetic: SyntheticSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        msg: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_pairs(&text)
}

impl RunConfig {
    /// Applies pairs in order, later ones overriding earlier ones.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "adapters" => self.adapters = Some(PathBuf::from(v)),
            "method" => self.method = Some(parse(key, v)?),
            "k" => self.k = parse(key, v)?,
            "iters" => self.iters = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "merge" => self.merge.method = parse::<MergeMethod>(key, v)?,
            "density" => self.merge.density = parse(key, v)?,
            "drop_rate" => self.merge.drop_rate = parse(key, v)?,
            "weights" => {
                self.merge.weights = if v.is_empty() || v == "unary" {
                    None
                } else {
                    Some(parse_list(key, v)?)
                }
            }
            "merge_seed" => self.merge.seed = parse(key, v)?,
            "oracle" => self.oracle = Some(parse(key, v)?),
            "oracle_cmd" => self.oracle_cmd = Some(v.to_string()),
            "examples_per_task" => self.examples_per_task = parse(key, v)?,
            "eval_examples" => self.eval_examples = parse(key, v)?,
            "oracle_timeout" => {
                let secs: f64 = parse(key, v)?;
                self.oracle_timeout = Duration::try_from_secs_f64(secs).map_err(|e| ConfigError::Value {
                    key: key.to_string(),
                    msg: e.to_string(),
                })?;
            }
            "model" => self.model = Some(PathBuf::from(v)),
            "attribute" => self.attribute = Some(parse(key, v)?),
            "alpha" => self.dirichlet_alpha = Some(parse(key, v)?),
            "top_k" => self.top_k = Some(parse(key, v)?),
            "kmeans_max_iters" => self.kmeans_max_iters = parse(key, v)?,
            "kmeans_tol" => self.kmeans_tol = parse(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "partition" => self.partition = Some(PathBuf::from(v)),
            "ks" => self.ks = parse_list(key, v)?,
            "ns" => self.ns = parse_list(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "groups" => self.synthetic.groups = parse(key, v)?,
            "num_adapters" => self.synthetic.adapters = parse(key, v)?,
            "layers" => self.synthetic.layers = parse(key, v)?,
            "rank" => self.synthetic.rank = parse(key, v)?,
            "d_in" => self.synthetic.d_in = parse(key, v)?,
            "d_out" => self.synthetic.d_out = parse(key, v)?,
            "lora_alpha" => self.synthetic.alpha = parse(key, v)?,
            "center_scale" => self.synthetic.center_scale = parse(key, v)?,
            "noise" => self.synthetic.noise = parse(key, v)?,
            "langs" => self.synthetic.langs = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn require_adapters(&self) -> Result<&Path, ConfigError> {
        self.adapters.as_deref().ok_or(ConfigError::Missing("adapters"))
    }

    pub fn require_out(&self) -> Result<&Path, ConfigError> {
        self.out.as_deref().ok_or(ConfigError::Missing("out"))
    }

    pub fn require_method(&self) -> Result<ClusterMethod, ConfigError> {
        self.method.ok_or(ConfigError::Missing("method"))
    }

    pub fn require_partition(&self) -> Result<&Path, ConfigError> {
        self.partition.as_deref().ok_or(ConfigError::Missing("partition"))
    }

    /// Checks the settings the clustering method depends on.
    pub fn validate_cluster(&self) -> Result<ClusterMethod, ConfigError> {
        let method = self.require_method()?;
        if self.k == 0 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        self.merge
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match method {
            ClusterMethod::D2c => {
                self.validate_oracle()?;
            }
            ClusterMethod::Dirichlet => {
                if self.attribute.is_none() {
                    return Err(ConfigError::Missing("attribute"));
                }
                match self.dirichlet_alpha {
                    None => return Err(ConfigError::Missing("alpha")),
                    Some(a) if !(a > 0.0 && a.is_finite()) => {
                        return Err(ConfigError::Invalid(format!("alpha must be positive, got {a}")))
                    }
                    _ => {}
                }
            }
            ClusterMethod::Kmeans | ClusterMethod::KmeansSvd => {
                if self.kmeans_max_iters == 0 {
                    return Err(ConfigError::Invalid("kmeans_max_iters must be at least 1".into()));
                }
            }
            ClusterMethod::Random => {}
        }
        Ok(method)
    }

    pub fn validate_oracle(&self) -> Result<OracleKind, ConfigError> {
        let kind = self.oracle.ok_or(ConfigError::Missing("oracle"))?;
        if kind == OracleKind::Command && self.oracle_cmd.as_deref().is_none_or(|c| c.trim().is_empty()) {
            return Err(ConfigError::Missing("oracle_cmd"));
        }
        if self.examples_per_task == 0 || self.eval_examples == 0 {
            return Err(ConfigError::Invalid("examples per task must be at least 1".into()));
        }
        Ok(kind)
    }

    /// Every setting as `key = value`, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                writeln!(s, "{k} = {v}").unwrap();
            }
        };
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        put("adapters", opt_path(&self.adapters));
        put("method", self.method.map(|m| m.as_str().to_string()));
        put("k", Some(self.k.to_string()));
        put("iters", Some(self.iters.to_string()));
        put("seed", Some(self.seed.to_string()));
        put("merge", Some(self.merge.method.to_string()));
        put("density", Some(format!("{:?}", self.merge.density)));
        put("drop_rate", Some(format!("{:?}", self.merge.drop_rate)));
        put(
            "weights",
            Some(match &self.merge.weights {
                None => "unary".into(),
                Some(w) => w.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","),
            }),
        );
        put("merge_seed", Some(self.merge.seed.to_string()));
        put(
            "oracle",
            self.oracle.map(|o| match o {
                OracleKind::Synthetic => "synthetic".into(),
                OracleKind::Command => "command".into(),
            }),
        );
        put("oracle_cmd", self.oracle_cmd.clone());
        put("examples_per_task", Some(self.examples_per_task.to_string()));
        put("eval_examples", Some(self.eval_examples.to_string()));
        put("oracle_timeout", Some(format!("{:?}", self.oracle_timeout.as_secs_f64())));
        put("model", opt_path(&self.model));
        put("attribute", self.attribute.map(|a| a.to_string()));
        put("alpha", self.dirichlet_alpha.map(|a| format!("{a:?}")));
        put("top_k", self.top_k.map(|t| t.to_string()));
        put("kmeans_max_iters", Some(self.kmeans_max_iters.to_string()));
        put("kmeans_tol", Some(format!("{:?}", self.kmeans_tol)));
        put("out", opt_path(&self.out));
        put("partition", opt_path(&self.partition));
        put("ks", (!self.ks.is_empty()).then(|| list(&self.ks)));
        put("ns", (!self.ns.is_empty()).then(|| list(&self.ns)));
        put("repeats", Some(self.repeats.to_string()));
        let sy = &self.synthetic;
        put("groups", Some(sy.groups.to_string()));
        put("num_adapters", Some(sy.adapters.to_string()));
        put("layers", Some(sy.layers.to_string()));
        put("rank", Some(sy.rank.to_string()));
        put("d_in", Some(sy.d_in.to_string()));
        put("d_out", Some(sy.d_out.to_string()));
        put("lora_alpha", Some(format!("{:?}", sy.alpha)));
        put("center_scale", Some(format!("{:?}", sy.center_scale)));
        put("noise", Some(format!("{:?}", sy.noise)));
        put("langs", Some(sy.langs.to_string()));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = RunConfig::default();
        assert_eq!((c.k, c.iters, c.examples_per_task), (5, 200, 10));
        assert_eq!(c.merge.method, MergeMethod::Ties);
        assert_eq!(c.merge.density, 0.5);
        assert!(c.merge.weights.is_none());
    }

    #[test]
    fn later_pairs_override() {
        let c = RunConfig::from_pairs([("k", "3"), ("method", "d2c"), ("k", "7")]).unwrap();
        assert_eq!(c.k, 7);
        assert_eq!(c.method, Some(ClusterMethod::D2c));
    }

    #[test]
    fn text_form_round_trips() {
        let mut c = RunConfig::from_pairs([
            ("method", "dirichlet"),
            ("attribute", "lang_label"),
            ("alpha", "0.001"),
            ("ks", "1,2,5"),
            ("weights", "1,2.5"),
            ("oracle", "command"),
            ("oracle_cmd", "python3 oracle.py --x"),
        ])
        .unwrap();
        c.adapters = Some("fleet".into());
        let pairs = parse_pairs(&c.to_text()).unwrap();
        let back = RunConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn method_requirements() {
        let c = RunConfig::from_pairs([("method", "d2c")]).unwrap();
        assert!(matches!(c.validate_cluster(), Err(ConfigError::Missing("oracle"))));
        let c = RunConfig::from_pairs([("method", "d2c"), ("oracle", "command")]).unwrap();
        assert!(matches!(c.validate_cluster(), Err(ConfigError::Missing("oracle_cmd"))));
        let c = RunConfig::from_pairs([("method", "dirichlet"), ("attribute", "group_label")]).unwrap();
        assert!(matches!(c.validate_cluster(), Err(ConfigError::Missing("alpha"))));
        assert!(RunConfig::from_pairs([("bogus", "1")]).is_err());
        assert!(RunConfig::from_pairs([("k", "x")]).is_err());
        assert!(parse_pairs("k 5").is_err());
    }
}
