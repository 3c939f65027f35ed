//! Experiment configuration: a line-oriented `key = value` format mirroring
//! [`ExperimentConfig`] field for field, with all-errors-at-once validation
//! (sweep configs are long; a fix-one-rerun loop wastes runs).
//!
//! Lists use brackets: `depths = [2, 4, 8]`. `#` starts a comment. Unknown
//! keys are errors. The configuration hash is taken over the canonical
//! serialization, so key order, whitespace and comments do not change it.

use std::collections::BTreeMap;
use std::fmt;

use dtfixup_core::init::InitKind;
use sha2::{Digest, Sha256};

/// Axes and model shape for sweeps plus the synthetic-training block.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Initialization schemes to run.
    pub schemes: Vec<InitKind>,
    /// Block counts N, strictly ascending.
    pub depths: Vec<usize>,
    /// Probe input radii (per-token norms).
    pub mu_targets: Vec<f64>,
    pub seq_len: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub relational: bool,
    pub n_relations: usize,
    pub seeds: Vec<u64>,
    /// Flatness band for the asymptotic bracket tests.
    pub band: f64,
    /// Learning rate for the single-step update probe.
    pub probe_eta: f64,
    pub training: TrainingConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub task_size: usize,
    pub eval_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub base_eta: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            task_size: 128,
            eval_size: 32,
            steps: 2000,
            batch_size: 8,
            base_eta: 0.1,
        }
    }
}

/// One configuration problem, with the line it came from when there is one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: `{}`: {}", self.key, self.message),
            None => write!(f, "`{}`: {}", self.key, self.message),
        }
    }
}

fn err(line: Option<usize>, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

const KEYS: &[&str] = &[
    "schemes",
    "depths",
    "mu_targets",
    "seq_len",
    "d_x",
    "d_z",
    "n_heads",
    "mlp_hidden",
    "relational",
    "n_relations",
    "seeds",
    "band",
    "probe_eta",
    "train_task_size",
    "train_eval_size",
    "train_steps",
    "train_batch_size",
    "train_base_eta",
];

struct RawEntry {
    line: usize,
    value: String,
}

/// Parses and validates a configuration, reporting every problem found
/// rather than stopping at the first.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let mut entries: BTreeMap<String, RawEntry> = BTreeMap::new();
    let mut errors: Vec<ConfigError> = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(err(
                Some(line_no),
                line,
                "expected `key = value`",
            ));
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            errors.push(err(Some(line_no), &key, "unknown key"));
            continue;
        }
        if entries.contains_key(&key) {
            errors.push(err(Some(line_no), &key, "duplicate key"));
            continue;
        }
        entries.insert(key, RawEntry { line: line_no, value });
    }

    let mut cfg = ExperimentConfig {
        schemes: Vec::new(),
        depths: Vec::new(),
        mu_targets: vec![10.0],
        seq_len: 8,
        d_x: 64,
        d_z: 1,
        n_heads: 1,
        mlp_hidden: 1,
        relational: false,
        n_relations: 0,
        seeds: vec![0],
        band: 4.0,
        probe_eta: 1e-4,
        training: TrainingConfig::default(),
    };

    // Required keys first, so a missing one is reported alongside the rest.
    for required in ["schemes", "depths"] {
        if !entries.contains_key(required) {
            errors.push(err(None, required, "missing required key"));
        }
    }

    for (key, entry) in &entries {
        let line = Some(entry.line);
        let value = entry.value.as_str();
        match key.as_str() {
            "schemes" => match parse_list(value) {
                Ok(items) => {
                    let mut schemes = Vec::new();
                    for item in items {
                        match InitKind::from_name(&item) {
                            Some(kind) => schemes.push(kind),
                            None => errors.push(err(
                                line,
                                key,
                                format!(
                                    "unknown scheme `{item}` (expected standard_ln, tfixup, dtfixup or xavier)"
                                ),
                            )),
                        }
                    }
                    cfg.schemes = schemes;
                }
                Err(msg) => errors.push(err(line, key, msg)),
            },
            "depths" => match parse_typed_list::<usize>(value) {
                Ok(v) => cfg.depths = v,
                Err(msg) => errors.push(err(line, key, msg)),
            },
            "mu_targets" => match parse_typed_list::<f64>(value) {
                Ok(v) => cfg.mu_targets = v,
                Err(msg) => errors.push(err(line, key, msg)),
            },
            "seeds" => match parse_typed_list::<u64>(value) {
                Ok(v) => cfg.seeds = v,
                Err(msg) => errors.push(err(line, key, msg)),
            },
            "seq_len" => parse_scalar(value, &mut cfg.seq_len, key, line, &mut errors),
            "d_x" => parse_scalar(value, &mut cfg.d_x, key, line, &mut errors),
            "d_z" => parse_scalar(value, &mut cfg.d_z, key, line, &mut errors),
            "n_heads" => parse_scalar(value, &mut cfg.n_heads, key, line, &mut errors),
            "mlp_hidden" => parse_scalar(value, &mut cfg.mlp_hidden, key, line, &mut errors),
            "n_relations" => parse_scalar(value, &mut cfg.n_relations, key, line, &mut errors),
            "relational" => parse_scalar(value, &mut cfg.relational, key, line, &mut errors),
            "band" => parse_scalar(value, &mut cfg.band, key, line, &mut errors),
            "probe_eta" => parse_scalar(value, &mut cfg.probe_eta, key, line, &mut errors),
            "train_task_size" => {
                parse_scalar(value, &mut cfg.training.task_size, key, line, &mut errors)
            }
            "train_eval_size" => {
                parse_scalar(value, &mut cfg.training.eval_size, key, line, &mut errors)
            }
            "train_steps" => parse_scalar(value, &mut cfg.training.steps, key, line, &mut errors),
            "train_batch_size" => {
                parse_scalar(value, &mut cfg.training.batch_size, key, line, &mut errors)
            }
            "train_base_eta" => {
                parse_scalar(value, &mut cfg.training.base_eta, key, line, &mut errors)
            }
            _ => unreachable!("key list is closed"),
        }
    }

    let line_of = |key: &str| entries.get(key).map(|e| e.line);
    validate(&cfg, &line_of, &mut errors);

    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

fn validate(
    cfg: &ExperimentConfig,
    line_of: &dyn Fn(&str) -> Option<usize>,
    errors: &mut Vec<ConfigError>,
) {
    if cfg.schemes.is_empty() && line_of("schemes").is_some() {
        errors.push(err(line_of("schemes"), "schemes", "list must not be empty"));
    }
    if cfg.depths.is_empty() && line_of("depths").is_some() {
        errors.push(err(line_of("depths"), "depths", "list must not be empty"));
    }
    if let Some(&bad) = cfg.depths.iter().find(|&&n| n < 1) {
        errors.push(err(
            line_of("depths"),
            "depths",
            format!("depth {bad} out of range: block counts must be >= 1"),
        ));
    }
    if cfg.depths.windows(2).any(|w| w[0] >= w[1]) {
        errors.push(err(
            line_of("depths"),
            "depths",
            "must be strictly ascending",
        ));
    }
    if cfg.mu_targets.is_empty() {
        errors.push(err(
            line_of("mu_targets"),
            "mu_targets",
            "list must not be empty",
        ));
    }
    if let Some(&bad) = cfg.mu_targets.iter().find(|&&m| !(m > 0.0)) {
        errors.push(err(
            line_of("mu_targets"),
            "mu_targets",
            format!("target {bad} out of range: radii must be positive"),
        ));
    }
    if cfg.seeds.is_empty() {
        errors.push(err(line_of("seeds"), "seeds", "list must not be empty"));
    }
    for (key, value) in [
        ("seq_len", cfg.seq_len),
        ("d_x", cfg.d_x),
        ("d_z", cfg.d_z),
        ("n_heads", cfg.n_heads),
        ("mlp_hidden", cfg.mlp_hidden),
    ] {
        if value < 1 {
            errors.push(err(line_of(key), key, "must be >= 1"));
        }
    }
    if cfg.relational && cfg.n_relations < 1 {
        errors.push(err(
            line_of("n_relations"),
            "n_relations",
            "must be >= 1 for relational sweeps",
        ));
    }
    if !(cfg.band > 1.0) {
        errors.push(err(line_of("band"), "band", "must be > 1"));
    }
    if !(1e-5..=1e-2).contains(&cfg.probe_eta) {
        errors.push(err(
            line_of("probe_eta"),
            "probe_eta",
            "must lie in [1e-5, 1e-2]",
        ));
    }
    for (key, value) in [
        ("train_task_size", cfg.training.task_size),
        ("train_eval_size", cfg.training.eval_size),
        ("train_batch_size", cfg.training.batch_size),
    ] {
        if value < 1 {
            errors.push(err(line_of(key), key, "must be >= 1"));
        }
    }
    if cfg.training.batch_size > cfg.training.task_size {
        errors.push(err(
            line_of("train_batch_size"),
            "train_batch_size",
            "must not exceed train_task_size",
        ));
    }
    if !(cfg.training.base_eta > 0.0) {
        errors.push(err(
            line_of("train_base_eta"),
            "train_base_eta",
            "must be positive",
        ));
    }
}

fn parse_list(value: &str) -> Result<Vec<String>, String> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .ok_or_else(|| "expected a bracketed list like [a, b]".to_string())?;
    Ok(inner
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect())
}

fn parse_typed_list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>, String> {
    parse_list(value)?
        .into_iter()
        .map(|item| {
            item.parse::<T>()
                .map_err(|_| format!("cannot parse list entry `{item}`"))
        })
        .collect()
}

trait FromConfig: Sized {
    fn from_config(value: &str) -> Option<Self>;
}

impl FromConfig for usize {
    fn from_config(v: &str) -> Option<Self> {
        v.parse().ok()
    }
}
impl FromConfig for u64 {
    fn from_config(v: &str) -> Option<Self> {
        v.parse().ok()
    }
}
impl FromConfig for f64 {
    fn from_config(v: &str) -> Option<Self> {
        v.parse().ok()
    }
}
impl FromConfig for bool {
    fn from_config(v: &str) -> Option<Self> {
        match v {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
}

fn parse_scalar<T: FromConfig>(
    value: &str,
    slot: &mut T,
    key: &str,
    line: Option<usize>,
    errors: &mut Vec<ConfigError>,
) {
    match T::from_config(value) {
        Some(v) => *slot = v,
        None => errors.push(err(line, key, format!("cannot parse value `{value}`"))),
    }
}

/// Canonical serialization: fixed key order, one key per line. Parsing the
/// result reproduces the configuration exactly.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let join_f64 = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mut out = String::new();
    out.push_str(&format!(
        "schemes = [{}]\n",
        cfg.schemes
            .iter()
            .map(|s| s.name().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    out.push_str(&format!(
        "depths = [{}]\n",
        cfg.depths
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    out.push_str(&format!("mu_targets = [{}]\n", join_f64(&cfg.mu_targets)));
    out.push_str(&format!("seq_len = {}\n", cfg.seq_len));
    out.push_str(&format!("d_x = {}\n", cfg.d_x));
    out.push_str(&format!("d_z = {}\n", cfg.d_z));
    out.push_str(&format!("n_heads = {}\n", cfg.n_heads));
    out.push_str(&format!("mlp_hidden = {}\n", cfg.mlp_hidden));
    out.push_str(&format!("relational = {}\n", cfg.relational));
    out.push_str(&format!("n_relations = {}\n", cfg.n_relations));
    out.push_str(&format!(
        "seeds = [{}]\n",
        cfg.seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    out.push_str(&format!("band = {}\n", cfg.band));
    out.push_str(&format!("probe_eta = {}\n", cfg.probe_eta));
    out.push_str(&format!("train_task_size = {}\n", cfg.training.task_size));
    out.push_str(&format!("train_eval_size = {}\n", cfg.training.eval_size));
    out.push_str(&format!("train_steps = {}\n", cfg.training.steps));
    out.push_str(&format!(
        "train_batch_size = {}\n",
        cfg.training.batch_size
    ));
    out.push_str(&format!("train_base_eta = {}\n", cfg.training.base_eta));
    out
}

/// Hex SHA-256 of the canonical serialization: stable under key reordering,
/// comments and whitespace, so manifests dedupe logically identical runs.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(serialize_config(cfg).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_config("schemes = [dtfixup]\ndepths = [4]\n").unwrap();
        assert_eq!(cfg.schemes, vec![InitKind::DtFixup]);
        assert_eq!(cfg.depths, vec![4]);
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.band, 4.0);
    }

    #[test]
    fn zero_depth_is_a_range_error_naming_the_key() {
        let errs = parse_config("schemes = [dtfixup]\ndepths = [0]\n").unwrap_err();
        assert!(errs.iter().any(|e| e.key == "depths" && e.message.contains("out of range")));
    }

    #[test]
    fn all_errors_reported_at_once() {
        let text = "schemes = [dtfixup, nosuch]\n\
                    depths = [0]\n\
                    mystery = 3\n\
                    d_x = banana\n";
        let errs = parse_config(text).unwrap_err();
        let keys: Vec<&str> = errs.iter().map(|e| e.key.as_str()).collect();
        assert!(keys.contains(&"schemes"), "{errs:?}");
        assert!(keys.contains(&"depths"), "{errs:?}");
        assert!(keys.contains(&"mystery"), "{errs:?}");
        assert!(keys.contains(&"d_x"), "{errs:?}");
        // Every error from a config line carries its line number.
        assert!(errs.iter().all(|e| e.line.is_some()));
    }

    #[test]
    fn fixing_reported_errors_yields_a_parse() {
        let broken = "schemes = [dtfixup]\ndepths = [0]\nband = 0.5\n";
        let errs = parse_config(broken).unwrap_err();
        assert_eq!(errs.len(), 2);
        let fixed = "schemes = [dtfixup]\ndepths = [4]\nband = 4\n";
        assert!(parse_config(fixed).is_ok());
    }

    #[test]
    fn duplicate_and_unknown_keys_are_errors() {
        let errs =
            parse_config("schemes = [xavier]\nschemes = [dtfixup]\ndepths = [1]\nfoo = 1\n")
                .unwrap_err();
        assert!(errs.iter().any(|e| e.message == "duplicate key"));
        assert!(errs.iter().any(|e| e.key == "foo" && e.message == "unknown key"));
    }

    #[test]
    fn descending_depths_rejected() {
        let errs = parse_config("schemes = [xavier]\ndepths = [8, 4]\n").unwrap_err();
        assert!(errs.iter().any(|e| e.message.contains("ascending")));
    }

    #[test]
    fn comments_and_reordering_do_not_change_the_hash() {
        let a = parse_config("schemes = [dtfixup]\ndepths = [2, 4]\nband = 3\n").unwrap();
        let b = parse_config(
            "# a comment\nband = 3   # trailing\n\ndepths = [2, 4]\nschemes = [dtfixup]\n",
        )
        .unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));

        let c = parse_config("schemes = [dtfixup]\ndepths = [2, 4]\nband = 3.5\n").unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn relational_requires_vocabulary() {
        let errs =
            parse_config("schemes = [dtfixup]\ndepths = [2]\nrelational = true\n").unwrap_err();
        assert!(errs.iter().any(|e| e.key == "n_relations"));
    }

    proptest! {
        #[test]
        fn parser_never_panics(text in ".{0,400}") {
            let _ = parse_config(&text);
        }

        #[test]
        fn parser_never_panics_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_config(&text);
        }

        #[test]
        fn round_trip(
            depths in proptest::collection::btree_set(1usize..64, 1..5),
            mus in proptest::collection::vec(0.5f64..30.0, 1..4),
            seeds in proptest::collection::vec(any::<u64>(), 1..5),
            relational in any::<bool>(),
            band in 1.5f64..10.0,
        ) {
            let cfg = ExperimentConfig {
                schemes: vec![InitKind::DtFixup, InitKind::Xavier],
                depths: depths.into_iter().collect(),
                mu_targets: mus,
                seq_len: 6,
                d_x: 16,
                d_z: 2,
                n_heads: 2,
                mlp_hidden: 3,
                relational,
                n_relations: if relational { 4 } else { 0 },
                seeds,
                band,
                probe_eta: 1e-4,
                training: TrainingConfig::default(),
            };
            let text = serialize_config(&cfg);
            let parsed = parse_config(&text).expect("canonical text parses");
            prop_assert_eq!(parsed, cfg);
        }
    }
}
