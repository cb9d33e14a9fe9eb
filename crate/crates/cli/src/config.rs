//! Run configuration: command-line flags over an optional flat key-value file.
//!
//! File format (version 1): one `key = value` pair per line, `#` starts a
//! comment, blank lines are ignored. The first pair must be `version = 1`.
//! Keys are the long flag names with `_` in place of `-`; lists are
//! comma-separated. Floats are written in Rust's shortest round-trip form,
//! so `parse(render(c)) == c` exactly.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Comma-separated list of reals, e.g. snapshot times.
#[derive(Debug, Clone, PartialEq)]
pub struct RealList(pub Vec<f64>);

impl FromStr for RealList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad number '{x}': {e}")))
            .collect::<Result<_, _>>()
            .map(RealList)
    }
}

impl fmt::Display for RealList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Comma-separated list of criterion numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct IdList(pub Vec<u32>);

impl FromStr for IdList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|x| x.trim().parse::<u32>().map_err(|e| format!("bad id '{x}': {e}")))
            .collect::<Result<_, _>>()
            .map(IdList)
    }
}

impl fmt::Display for IdList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

trait Render {
    fn render(&self) -> String;
}

macro_rules! render_display {
    ($($t:ty),*) => { $(impl Render for $t { fn render(&self) -> String { self.to_string() } })* };
}
render_display!(f64, u64, usize, String, RealList, IdList);

impl Render for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! config_fields {
    ($($(#[$doc:meta])* $name:ident : $ty:ty),* $(,)?) => {
        /// Settings shared by all subcommands; each is a `--flag` and a file key.
        #[derive(Debug, Clone, Default, PartialEq, clap::Args)]
        pub struct RunConfig {
            /// Flat key-value configuration file; flags override its entries.
            #[arg(long, global = true)]
            pub config: Option<PathBuf>,
            #[arg(skip)]
            pub subcommand: String,
            $($(#[$doc])* #[arg(long, global = true, allow_hyphen_values = true)] pub $name: Option<$ty>,)*
        }

        impl RunConfig {
            fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
                match key {
                    $(stringify!($name) => {
                        let v = raw
                            .parse::<$ty>()
                            .map_err(|e| CliError::Usage(format!("config key {key}: {e}")))?;
                        self.$name = Some(v);
                    })*
                    _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
                }
                Ok(())
            }

            fn pairs(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $(if let Some(v) = &self.$name {
                    out.push((stringify!($name), v.render()));
                })*
                out
            }

            /// Fields set in `other` replace those in `self`.
            pub fn overlay(&mut self, other: &RunConfig) {
                $(if other.$name.is_some() {
                    self.$name = other.$name.clone();
                })*
            }
        }
    };
}

config_fields! {
    /// Penalty strength.
    lambda: f64,
    /// Interaction radius.
    epsilon: f64,
    /// Per-branch weight; alternative to `lambda` with `epsilon`.
    sigma: f64,
    /// Death probability at a clock ring.
    p0: f64,
    /// Time horizon.
    t: f64,
    /// Intermediate time for `laplace_n` and `geom_at`.
    s: f64,
    /// Remaining time for `first_branch_cdf`.
    r: f64,
    /// Transform argument for `laplace_n` and the death generating function.
    gamma: f64,
    /// Window offset for `geom_window`; shift for `limit_first_cdf`.
    rho: f64,
    /// Wave-regime level, in (0, 1).
    delta: f64,
    /// Diffusive-regime gap.
    big_delta: f64,
    /// Horizon of limiting trees, relative to the centring time.
    delta_horizon: f64,
    /// Time step (simulation grid or PDE step).
    dt: f64,
    dx: f64,
    x_min: f64,
    x_max: f64,
    t_end: f64,
    /// Comma-separated snapshot times for `fkpp solve`.
    snapshots: RealList,
    n_samples: usize,
    /// Master seed (default 20240607).
    seed: u64,
    /// Worker threads (overridden by REPULSE_BBM_THREADS).
    workers: usize,
    /// Output file, or directory for `fkpp solve`.
    out: PathBuf,
    /// Closed form evaluated by `analytic eval`.
    formula: String,
    /// Tree law for `sample-tree`: `simplified` or `gw`.
    model: String,
    /// Criteria run by `validate`.
    only: IdList,
}

/// Keys excluded from the configuration hash: they do not affect results.
const UNHASHED: [&str; 2] = ["out", "workers"];

impl RunConfig {
    /// Parses the file format described in the module docs.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let mut version = None;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Usage(format!("config key '{key}' given twice")));
            }
            if version.is_none() {
                if key != "version" {
                    return Err(CliError::Usage("config must start with 'version = 1'".into()));
                }
                let v: u32 = value
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad config version '{value}'")))?;
                if v != CONFIG_VERSION {
                    return Err(CliError::Usage(format!("unsupported config version {v}")));
                }
                version = Some(v);
                continue;
            }
            if key == "subcommand" {
                cfg.subcommand = value.to_string();
            } else {
                cfg.set(key, value)?;
            }
        }
        if version.is_none() {
            return Err(CliError::Usage("config has no 'version = 1' line".into()));
        }
        Ok(cfg)
    }

    /// The file form of this configuration.
    pub fn render(&self) -> String {
        let mut s = format!("version = {CONFIG_VERSION}\n");
        if !self.subcommand.is_empty() {
            s.push_str(&format!("subcommand = {}\n", self.subcommand));
        }
        for (k, v) in self.pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Loads `--config` (if given) and lays the flags over it.
    pub fn resolve(flags: &RunConfig, subcommand: &str) -> Result<Self, CliError> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                let file = RunConfig::parse(&text)?;
                if !file.subcommand.is_empty() && file.subcommand != subcommand {
                    return Err(CliError::Usage(format!(
                        "config is for '{}', not '{subcommand}'",
                        file.subcommand
                    )));
                }
                file
            }
            None => RunConfig::default(),
        };
        cfg.overlay(flags);
        cfg.config = None;
        cfg.subcommand = subcommand.to_string();
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of the canonical form, without the
    /// keys that do not affect results.
    pub fn hash(&self) -> String {
        let mut canon = format!("version = {CONFIG_VERSION}\nsubcommand = {}\n", self.subcommand);
        for (k, v) in self.pairs() {
            if !UNHASHED.contains(&k) {
                canon.push_str(&format!("{k} = {v}\n"));
            }
        }
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(repulse_bbm::suite::SuiteConfig::default().seed)
    }

    /// Range checks on everything that is set.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        let has_physical = self.lambda.is_some() || self.epsilon.is_some();
        if self.sigma.is_some() && has_physical {
            return bad("give either sigma or (lambda, epsilon), not both".into());
        }
        if has_physical && (self.lambda.is_none() || self.epsilon.is_none()) {
            return bad("lambda and epsilon must be given together".into());
        }
        let check = |name: &str, v: Option<f64>, ok: &dyn Fn(f64) -> bool, range: &str| match v {
            Some(x) if !ok(x) => Err(CliError::Usage(format!("{name} = {x} outside {range}"))),
            _ => Ok(()),
        };
        check("lambda", self.lambda, &|x| x >= 0.0 && x.is_finite(), "[0, inf)")?;
        check("epsilon", self.epsilon, &|x| x > 0.0 && x.is_finite(), "(0, inf)")?;
        check("sigma", self.sigma, &|x| x > 0.0 && x <= 1.0, "(0, 1]")?;
        check("p0", self.p0, &|x| (0.0..1.0).contains(&x), "[0, 1)")?;
        check("t", self.t, &|x| x > 0.0 && x.is_finite(), "(0, inf)")?;
        check("dt", self.dt, &|x| x > 0.0 && x <= 1.0, "(0, 1]")?;
        check("dx", self.dx, &|x| x > 0.0 && x <= 1.0, "(0, 1]")?;
        check("t_end", self.t_end, &|x| x > 0.0 && x.is_finite(), "(0, inf)")?;
        check("delta", self.delta, &|x| x > 0.0 && x < 1.0, "(0, 1)")?;
        check("big_delta", self.big_delta, &|x| x > 0.0 && x.is_finite(), "(0, inf)")?;
        if let (Some(a), Some(b)) = (self.x_min, self.x_max) {
            if a >= b {
                return bad(format!("x_min = {a} must be below x_max = {b}"));
            }
        }
        if let Some(n) = self.n_samples {
            if n == 0 || n > 1_000_000_000 {
                return bad(format!("n_samples = {n} outside [1, 1e9]"));
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if let Some(m) = &self.model {
            if m != "simplified" && m != "gw" {
                return bad(format!("model must be 'simplified' or 'gw', got '{m}'"));
            }
        }
        Ok(())
    }

    /// `sigma`, given directly or through `(lambda, epsilon)`.
    pub fn sigma_value(&self) -> Result<f64, CliError> {
        match (self.sigma, self.lambda, self.epsilon) {
            (Some(s), _, _) => Ok(s),
            (None, Some(l), Some(e)) => Ok(repulse_bbm::analytics::sigma_of(l, e)?),
            _ => Err(CliError::Usage("need sigma or (lambda, epsilon)".into())),
        }
    }

    pub fn require<T: Clone>(value: &Option<T>, name: &str) -> Result<T, CliError> {
        value
            .clone()
            .ok_or_else(|| CliError::Usage(format!("missing --{}", name.replace('_', "-"))))
    }
}
