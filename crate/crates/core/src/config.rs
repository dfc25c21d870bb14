//! Run settings from a flat `key = value` file, overridden by flags.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Keys are those of [`Settings::KEYS`]; hyphens and underscores
//! are interchangeable. Later sources win: defaults, then the file, then
//! command-line flags.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::kernels::{Family, KernelKind, KernelSpec};
use crate::krr::DEFAULT_LAMBDA0;

/// Where kernel work runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Workers {
    /// Threads in this process.
    Local(usize),
    /// Listen on `addr` and wait for `count` remote workers.
    Remote { addr: String, count: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub dataset: String,
    pub data_dir: PathBuf,
    /// Use only the first `n` training images; 0 keeps all.
    pub train_size: usize,
    /// Use only the first `n` evaluation images; 0 keeps all.
    pub test_size: usize,
    pub imgs_per_class: usize,
    pub kernel: KernelSpec,
    /// Whether any source set the kernel; checkpoints carry their own
    /// kernel, which only an explicit setting overrides.
    pub kernel_explicit: bool,
    /// Extra kernels sampled uniformly each step alongside `kernel`.
    pub kernel_pool: Vec<KernelSpec>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda0: f64,
    pub zca: Option<f64>,
    pub augment: Option<f64>,
    pub train_labels: bool,
    pub freeze_lambda: bool,
    pub workers: Workers,
    pub block: Option<usize>,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            dataset: "mnist".into(),
            data_dir: "data".into(),
            train_size: 0,
            test_size: 0,
            imgs_per_class: 1,
            kernel: KernelSpec::fc(3),
            kernel_explicit: false,
            kernel_pool: Vec::new(),
            steps: 500,
            batch: 256,
            lr: 0.01,
            lambda0: DEFAULT_LAMBDA0,
            zca: None,
            augment: None,
            train_labels: false,
            freeze_lambda: false,
            workers: Workers::Local(1),
            block: None,
            checkpoint_every: 50,
            seed: 0,
            out: "out".into(),
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {what}"))
}

fn number<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, value, "a boolean")),
    }
}

/// `off` or a number in `range`.
fn optional(key: &str, value: &str, range: std::ops::RangeInclusive<f64>) -> Result<Option<f64>> {
    if value.eq_ignore_ascii_case("off") || value.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let v: f64 = number(key, value, "a number or off")?;
    if !range.contains(&v) {
        return Err(bad(key, value, &format!("a value in [{}, {}]", range.start(), range.end())));
    }
    Ok(Some(v))
}

fn workers(value: &str) -> Result<Workers> {
    if let Ok(n) = value.parse::<usize>() {
        if n == 0 {
            return Err(bad("workers", value, "at least one worker"));
        }
        return Ok(Workers::Local(n));
    }
    // host:port, optionally repeated as host:port*count
    let (addr, count) = match value.rsplit_once('*') {
        Some((a, c)) => (a, number::<usize>("workers", c, "a worker count after *")?),
        None => (value, 1),
    };
    if count == 0 || !addr.contains(':') {
        return Err(bad("workers", value, "a thread count or host:port[*count]"));
    }
    Ok(Workers::Remote {
        addr: addr.to_string(),
        count,
    })
}

impl Settings {
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "data_dir",
        "train_size",
        "test_size",
        "imgs_per_class",
        "kernel",
        "depth",
        "kind",
        "weight_variance",
        "bias_variance",
        "filter_size",
        "kernel_pool",
        "steps",
        "batch",
        "lr",
        "lambda0",
        "zca",
        "augment",
        "train_labels",
        "freeze_lambda",
        "workers",
        "block",
        "checkpoint_every",
        "seed",
        "out",
    ];

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        if matches!(k, "kernel" | "depth" | "kind" | "weight_variance" | "bias_variance" | "filter_size") {
            self.kernel_explicit = true;
        }
        match k {
            "dataset" => self.dataset = value.to_string(),
            "data_dir" => self.data_dir = value.into(),
            "train_size" => self.train_size = number(k, value, "an image count")?,
            "test_size" => self.test_size = number(k, value, "an image count")?,
            "imgs_per_class" => {
                self.imgs_per_class = number(k, value, "a positive count")?;
                if self.imgs_per_class == 0 {
                    return Err(bad(k, value, "a positive count"));
                }
            }
            "kernel" => {
                // a bare family name keeps the depth and kind already set
                let keep = (self.kernel.depth, self.kernel.kind);
                let (kwv, kbv) = (self.kernel.weight_variance, self.kernel.bias_variance);
                let parsed: KernelSpec = value.parse()?;
                let bare = !value.chars().any(|c| c.is_ascii_digit()) && !value.contains('-');
                self.kernel = parsed.with_variances(kwv, kbv);
                if bare {
                    self.kernel.depth = keep.0;
                    self.kernel.kind = keep.1;
                }
            }
            "depth" => self.kernel.depth = number(k, value, "a positive depth")?,
            "kind" => {
                self.kernel.kind = match value.to_ascii_lowercase().as_str() {
                    "ntk" => KernelKind::Ntk,
                    "nngp" => KernelKind::Nngp,
                    _ => return Err(bad(k, value, "ntk or nngp")),
                }
            }
            "weight_variance" => self.kernel.weight_variance = number(k, value, "a positive number")?,
            "bias_variance" => self.kernel.bias_variance = number(k, value, "a nonnegative number")?,
            "filter_size" => self.kernel.filter_size = number(k, value, "an odd filter size")?,
            "kernel_pool" => {
                self.kernel_pool = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "steps" => self.steps = number(k, value, "a step count")?,
            "batch" => self.batch = number(k, value, "a batch size")?,
            "lr" => self.lr = number(k, value, "a learning rate")?,
            "lambda0" => self.lambda0 = number(k, value, "a positive number")?,
            "zca" => self.zca = optional(k, value, 0.0..=f64::MAX)?,
            "augment" => self.augment = optional(k, value, 0.0..=1.0)?,
            "train_labels" => self.train_labels = flag(k, value)?,
            "freeze_lambda" => self.freeze_lambda = flag(k, value)?,
            "workers" => self.workers = workers(value)?,
            "block" => self.block = Some(number(k, value, "a tile size")?).filter(|&b| b > 0),
            "checkpoint_every" => self.checkpoint_every = number(k, value, "a step count")?,
            "seed" => self.seed = number(k, value, "an unsigned integer")?,
            "out" => self.out = value.into(),
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Applies every entry of a parsed file, in key order.
    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<()> {
        // the architecture first so depth and kind refine it
        if let Some(v) = entries.get("kernel") {
            self.set("kernel", v)?;
        }
        for (k, v) in entries.iter().filter(|(k, _)| k.as_str() != "kernel") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Checks cross-field constraints once every source is applied.
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        for spec in &self.kernel_pool {
            spec.validate()?;
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lambda0 > 0.0) {
            return Err(Error::Config("lambda0 must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be a nonnegative number".into()));
        }
        Ok(())
    }

    /// Kernels sampled during training, `kernel` first.
    pub fn pool(&self) -> Vec<KernelSpec> {
        let mut pool = vec![self.kernel];
        pool.extend(self.kernel_pool.iter().filter(|s| **s != self.kernel));
        pool
    }

    pub fn is_conv(&self) -> bool {
        self.kernel.family != Family::Fc
    }
}

/// Parses a `key = value` file into normalized keys; rejects unknown and
/// repeated keys.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
        };
        let key = k.trim().replace('-', "_");
        if !Settings::KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("line {}: unknown setting {key:?}", n + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: {key} set twice", n + 1)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_the_desk_scale_values() {
        let s = Settings::default();
        assert_eq!((s.steps, s.batch, s.checkpoint_every), (500, 256, 50));
        assert_eq!(s.lr, 0.01);
        assert_eq!(s.kernel, KernelSpec::fc(3));
        assert_eq!(s.workers, Workers::Local(1));
        assert!(!s.kernel_explicit);
    }

    #[test]
    fn file_then_flags_take_precedence() {
        let file = parse_config("# run\nsteps = 20\nkernel = convnet\n lr=0.04\n\nzca = 0.1\n").unwrap();
        let mut s = Settings::default();
        s.apply(&file).unwrap();
        assert_eq!((s.steps, s.lr, s.zca), (20, 0.04, Some(0.1)));
        assert_eq!(s.kernel.family, Family::ConvNet);
        assert_eq!(s.kernel.depth, 3);
        assert!(s.kernel_explicit);
        s.set("steps", "7").unwrap();
        s.set("zca", "off").unwrap();
        assert_eq!((s.steps, s.zca), (7, None));
    }

    #[test]
    fn kernel_names_and_refinements() {
        let mut s = Settings::default();
        s.set("depth", "2").unwrap();
        s.set("kind", "nngp").unwrap();
        s.set("kernel", "convvec").unwrap();
        assert_eq!(s.kernel, KernelSpec::conv_vec(2).nngp());
        s.set("kernel", "fc1-ntk").unwrap();
        assert_eq!(s.kernel, KernelSpec::fc(1));
        s.set("kernel-pool", "fc1, fc2").unwrap();
        assert_eq!(s.pool(), vec![KernelSpec::fc(1), KernelSpec::fc(2)]);
    }

    #[test]
    fn workers_accept_counts_and_endpoints() {
        let mut s = Settings::default();
        s.set("workers", "8").unwrap();
        assert_eq!(s.workers, Workers::Local(8));
        s.set("workers", "127.0.0.1:7000*2").unwrap();
        assert_eq!(s.workers, Workers::Remote { addr: "127.0.0.1:7000".into(), count: 2 });
        s.set("workers", "0.0.0.0:0").unwrap();
        assert_eq!(s.workers, Workers::Remote { addr: "0.0.0.0:0".into(), count: 1 });
        for v in ["0", "nowhere", "h:1*0"] {
            assert!(s.set("workers", v).is_err(), "{v}");
        }
    }

    #[test]
    fn bad_input_is_a_config_error() {
        let mut s = Settings::default();
        for (k, v) in [("steps", "-1"), ("augment", "1.5"), ("kind", "rbf"), ("train_labels", "maybe"), ("colour", "red"), ("imgs_per_class", "0")] {
            assert!(matches!(s.set(k, v), Err(Error::Config(_))), "{k}={v}");
        }
        assert!(matches!(s.set("kernel", "resnet"), Err(Error::Config(_))));
        for text in ["steps 3", "steps = 1\nsteps = 2", "nope = 1"] {
            assert!(matches!(parse_config(text), Err(Error::Config(_))), "{text:?}");
        }
        s.set("filter_size", "2").unwrap();
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn parser_never_panics(text in "\\PC{0,200}") {
            let _ = parse_config(&text);
        }

        #[test]
        fn numeric_settings_round_trip(steps in 0usize..100_000, seed in any::<u64>(), lr in 0.0f64..1.0) {
            let text = format!("steps = {steps}\nseed = {seed}\nlr = {lr}\n");
            let mut s = Settings::default();
            s.apply(&parse_config(&text).unwrap()).unwrap();
            prop_assert_eq!((s.steps, s.seed, s.lr), (steps, seed, lr));
        }
    }
}
