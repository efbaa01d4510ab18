//! Layered run configuration: JSON config files merged with command-line
//! flags (flags win), defaults applied last, every resolved value echoed
//! with its provenance. Unknown keys and type mismatches are rejected with
//! the offending key named.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::rnm::Routing;
use crate::train::TrainConfig;

/// Where a resolved value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Default,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::Flag => "flag",
            Source::File => "file",
            Source::Default => "default",
        }
    }
}

/// Accumulates resolved keys and missing required fields.
pub struct Resolver {
    pub echo: Vec<String>,
    missing: Vec<&'static str>,
}

impl Resolver {
    pub fn new() -> Resolver {
        Resolver {
            echo: Vec::new(),
            missing: Vec::new(),
        }
    }

    fn note(&mut self, key: &str, value: &dyn Display, source: Source) {
        self.echo.push(format!("{key} = {value} ({})", source.name()));
    }

    pub fn required<T: Display>(&mut self, key: &'static str, flag: Option<T>, file: Option<T>) -> Option<T> {
        match (flag, file) {
            (Some(v), _) => {
                self.note(key, &v, Source::Flag);
                Some(v)
            }
            (None, Some(v)) => {
                self.note(key, &v, Source::File);
                Some(v)
            }
            (None, None) => {
                self.missing.push(key);
                None
            }
        }
    }

    pub fn optional<T: Display>(
        &mut self,
        key: &'static str,
        flag: Option<T>,
        file: Option<T>,
        default: T,
    ) -> T {
        match (flag, file) {
            (Some(v), _) => {
                self.note(key, &v, Source::Flag);
                v
            }
            (None, Some(v)) => {
                self.note(key, &v, Source::File);
                v
            }
            (None, None) => {
                self.note(key, &default, Source::Default);
                default
            }
        }
    }

    pub fn finish(self) -> Result<Vec<String>> {
        if self.missing.is_empty() {
            Ok(self.echo)
        } else {
            Err(Error::Config(format!(
                "missing required field(s): {}",
                self.missing.join(", ")
            )))
        }
    }
}

/// Parses a JSON config file into the command's file-form struct; unknown
/// keys are rejected by construction (`deny_unknown_fields`).
pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&raw).map_err(|e| Error::Config(format!("config parse: {e}")))
        }
    }
}

fn display_path(p: &Path) -> String {
    p.display().to_string()
}

// ---------------------------------------------------------------------------
// per-command file forms and resolved forms
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataFile {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n_per_class: Option<usize>,
    pub side: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenDataResolved {
    pub out: PathBuf,
    pub seed: u64,
    pub n_per_class: usize,
    pub side: usize,
}

pub fn resolve_gen_data(file: GenDataFile, flags: GenDataFile) -> Result<(GenDataResolved, Vec<String>)> {
    let mut r = Resolver::new();
    let out = r.required("out", flags.out.map(|p| display_path(&p)), file.out.map(|p| display_path(&p)));
    let seed = r.required("seed", flags.seed, file.seed);
    let n_per_class = r.optional("n_per_class", flags.n_per_class, file.n_per_class, 500);
    let side = r.optional("side", flags.side, file.side, 64);
    let echo = r.finish()?;
    Ok((
        GenDataResolved {
            out: PathBuf::from(out.expect("checked by finish")),
            seed: seed.expect("checked by finish"),
            n_per_class,
            side,
        },
        echo,
    ))
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub rnm_r: Option<f64>,
    pub rnm_routing: Option<String>,
    pub arch: Option<String>,
    pub metrics: Option<PathBuf>,
    /// Full network hyperparameter block; defaults to the toy network.
    pub network: Option<NetworkConfig>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainResolved {
    pub data: PathBuf,
    pub out: PathBuf,
    pub metrics: Option<PathBuf>,
    pub train: TrainConfig,
    pub network: NetworkConfig,
}

pub fn resolve_train(file: TrainFile, flags: TrainFile) -> Result<(TrainResolved, Vec<String>)> {
    let mut r = Resolver::new();
    let data = r.required("data", flags.data.map(|p| display_path(&p)), file.data.map(|p| display_path(&p)));
    let out = r.required("out", flags.out.map(|p| display_path(&p)), file.out.map(|p| display_path(&p)));
    let seed = r.required("seed", flags.seed, file.seed);
    let epochs = r.optional("epochs", flags.epochs, file.epochs, 20);
    let batch_size = r.optional("batch_size", flags.batch_size, file.batch_size, 32);
    let lr = r.optional("lr", flags.lr, file.lr, 0.05);
    let momentum = r.optional("momentum", flags.momentum, file.momentum, 0.9);
    let weight_decay = r.optional("weight_decay", flags.weight_decay, file.weight_decay, 1e-4);
    let mut network = match (&flags.network, &file.network) {
        (Some(n), _) | (None, Some(n)) => {
            r.echo.push("network = (config block)".into());
            n.clone()
        }
        (None, None) => {
            r.echo.push("network = toy (default)".into());
            NetworkConfig::toy()
        }
    };
    let rnm_r = r.optional("rnm_r", flags.rnm_r, file.rnm_r, network.rnm.r);
    let routing_str = r.optional(
        "rnm_routing",
        flags.rnm_routing.clone(),
        file.rnm_routing.clone(),
        network.rnm.routing.to_string(),
    );
    let arch = r.optional("arch", flags.arch.clone(), file.arch.clone(), "ses".into());
    let metrics = match (flags.metrics, file.metrics) {
        (Some(p), _) | (None, Some(p)) => Some(p),
        (None, None) => None,
    };
    let echo = r.finish()?;

    network.rnm.r = rnm_r;
    network.rnm.routing = Routing::parse(&routing_str)?;
    network.san_ablation = match arch.as_str() {
        "ses" => false,
        "san-ablation" => true,
        other => {
            return Err(Error::Config(format!(
                "unknown arch '{other}' (expected ses|san-ablation)"
            )))
        }
    };
    let train = TrainConfig {
        epochs,
        batch_size,
        lr,
        momentum,
        weight_decay,
        seed: seed.expect("checked by finish"),
    };
    train.validate()?;
    network.validate()?;
    Ok((
        TrainResolved {
            data: PathBuf::from(data.expect("checked")),
            out: PathBuf::from(out.expect("checked")),
            metrics,
            train,
            network,
        },
        echo,
    ))
}

impl TrainResolved {
    /// Effective config in the file form; re-parsing it with no flags
    /// resolves to the same configuration.
    pub fn to_file_form(&self) -> TrainFile {
        TrainFile {
            data: Some(self.data.clone()),
            out: Some(self.out.clone()),
            seed: Some(self.train.seed),
            epochs: Some(self.train.epochs),
            batch_size: Some(self.train.batch_size),
            lr: Some(self.train.lr),
            momentum: Some(self.train.momentum),
            weight_decay: Some(self.train.weight_decay),
            rnm_r: Some(self.network.rnm.r),
            rnm_routing: Some(self.network.rnm.routing.to_string()),
            arch: Some(if self.network.san_ablation { "san-ablation".into() } else { "ses".into() }),
            metrics: self.metrics.clone(),
            network: Some(self.network.clone()),
        }
    }
}
