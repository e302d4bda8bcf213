use std::path::{Path, PathBuf};

use crate::decision::{DecisionConfig, Method, RecognizeConfig, WindowsOn};
use crate::error::{Error, Result};
use crate::localization::LocateConfig;
use crate::refnet::TrainConfig;
use crate::segmentation::SegmentationConfig;

use super::dataset::DatasetMode;

/// Settings for every command, read from a `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub mode: Option<DatasetMode>,
    pub val_dataset: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub method: Method,
    pub recognize: RecognizeConfig,
    pub train: TrainConfig,
    pub prune_threshold: f64,
    pub prune_max_rounds: usize,
    pub prune_finetune: TrainConfig,
    pub prune_probe: Option<PathBuf>,
    pub timing_repetitions: usize,
    pub class_mapping: Option<PathBuf>,
    pub low_f1_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            dataset: None,
            mode: None,
            val_dataset: None,
            output: PathBuf::from("out"),
            seed: 0,
            workers: 1,
            method: Method::Algorithm2,
            recognize: RecognizeConfig::default(),
            train: TrainConfig::default(),
            prune_threshold: 0.8,
            prune_max_rounds: 4,
            prune_finetune: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            prune_probe: None,
            timing_repetitions: 10,
            class_mapping: None,
            low_f1_threshold: 0.5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_rgb(key: &str, v: &str) -> Result<[u8; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("`{key}`: expected r,g,b, got `{v}`")));
    }
    Ok([parse_num(key, parts[0])?, parse_num(key, parts[1])?, parse_num(key, parts[2])?])
}

pub fn parse_method(v: &str) -> Result<Method> {
    match v {
        "1" => Ok(Method::Algorithm1),
        "2" => Ok(Method::Algorithm2),
        "baseline" => Ok(Method::Baseline),
        _ => Err(Error::Config(format!("algorithm must be 1, 2 or baseline, got `{v}`"))),
    }
}

pub fn parse_windows_on(v: &str) -> Result<WindowsOn> {
    match v {
        "segment" => Ok(WindowsOn::Segment),
        "original" => Ok(WindowsOn::Original),
        _ => Err(Error::Config(format!("windows_on must be segment or original, got `{v}`"))),
    }
}

impl RunConfig {
    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        let path = |v: &str| base.join(v);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let (key, v) = (key.trim(), value.trim());
            let seg: &mut SegmentationConfig = &mut c.recognize.segmentation;
            let loc: &mut LocateConfig = &mut c.recognize.locate;
            let dec: &mut DecisionConfig = &mut c.recognize.decision;
            match key {
                "model" => c.model = Some(path(v)),
                "dataset" => c.dataset = Some(path(v)),
                "dataset.mode" => c.mode = Some(v.parse()?),
                "val_dataset" => c.val_dataset = Some(path(v)),
                "output" => c.output = path(v),
                "seed" => c.seed = parse_num(key, v)?,
                "workers" => c.workers = parse_num(key, v)?,
                "k" => seg.k = parse_num(key, v)?,
                "top_n" => dec.top_n = parse_num(key, v)?,
                "tau" => dec.tau = parse_num(key, v)?,
                "algorithm" => c.method = parse_method(v)?,
                "windows_on" => c.recognize.windows_on = parse_windows_on(v)?,
                "segmentation.max_iters" => seg.max_iters = parse_num(key, v)?,
                "segmentation.tol" => seg.tol = parse_num(key, v)?,
                "segmentation.fill" => seg.fill = parse_rgb(key, v)?,
                "segmentation.max_side" => {
                    let side: usize = parse_num(key, v)?;
                    seg.max_side = (side > 0).then_some(side);
                }
                "locate.se_side" => loc.se_side = parse_num(key, v)?,
                "locate.min_area_fraction" => loc.min_area_fraction = parse_num(key, v)?,
                "train.epochs" => c.train.epochs = parse_num(key, v)?,
                "train.batch_size" => c.train.batch_size = parse_num(key, v)?,
                "train.learning_rate" => c.train.learning_rate = parse_num(key, v)?,
                "prune.threshold" => c.prune_threshold = parse_num(key, v)?,
                "prune.max_rounds" => c.prune_max_rounds = parse_num(key, v)?,
                "prune.probe" => c.prune_probe = Some(path(v)),
                "prune.epochs" => c.prune_finetune.epochs = parse_num(key, v)?,
                "prune.batch_size" => c.prune_finetune.batch_size = parse_num(key, v)?,
                "prune.learning_rate" => c.prune_finetune.learning_rate = parse_num(key, v)?,
                "timing.repetitions" => c.timing_repetitions = parse_num(key, v)?,
                "eval.class_mapping" => c.class_mapping = Some(path(v)),
                "eval.low_f1_threshold" => c.low_f1_threshold = parse_num(key, v)?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", n + 1))),
            }
        }
        c.recognize.segmentation.seed = c.seed;
        c.train.seed = c.seed;
        c.prune_finetune.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.recognize.segmentation.validate()?;
        self.recognize.decision.validate()?;
        self.train.validate()?;
        self.prune_finetune.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.timing_repetitions == 0 {
            return Err(Error::Config("timing.repetitions must be >= 1".into()));
        }
        if self.prune_max_rounds == 0 {
            return Err(Error::Config("prune.max_rounds must be >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        let p = value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("`{key}` is not set")))?;
        if !p.exists() {
            return Err(Error::Config(format!("`{key}` path {} does not exist", p.display())));
        }
        Ok(p)
    }
}
