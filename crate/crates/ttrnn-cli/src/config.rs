//! Run configuration: defaults, flat key=value config files, and CLI-flag
//! overrides (flag wins).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ttrnn_core::cells::{CellKind, Parameterization};
use ttrnn_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Mnist,
    SynthSpeaker,
    Toy,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "mnist" => Ok(Task::Mnist),
            "synth-speaker" => Ok(Task::SynthSpeaker),
            "toy" => Ok(Task::Toy),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected mnist, synth-speaker, or toy)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Mnist => "mnist",
            Task::SynthSpeaker => "synth-speaker",
            Task::Toy => "toy",
        }
    }
}

pub fn parse_cell(s: &str) -> Result<CellKind> {
    match s {
        "lstm" => Ok(CellKind::Lstm),
        "gru" => Ok(CellKind::Gru),
        other => Err(Error::Config(format!(
            "unknown cell {other:?} (expected lstm or gru)"
        ))),
    }
}

pub fn parse_param(s: &str) -> Result<Parameterization> {
    match s {
        "dense" => Ok(Parameterization::Dense),
        "tt-sep" => Ok(Parameterization::TtSeparate),
        "tt-fused" => Ok(Parameterization::TtFused),
        other => Err(Error::Config(format!(
            "unknown parameterization {other:?} (expected dense, tt-sep, or tt-fused)"
        ))),
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub cell: CellKind,
    pub param: Parameterization,
    pub hidden: usize,
    pub input: Option<usize>,
    pub cores: usize,
    pub rank: usize,
    pub rank0: usize,
    pub task: Task,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub patience: usize,
    pub out: PathBuf,
    pub repeats: usize,
    pub workers: usize,
    pub data_fraction: f64,
    pub data_dir: Option<PathBuf>,
    // image-task knobs
    pub row_per_step: bool,
    pub downsample: usize,
    pub permute: bool,
    pub permute_seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    // speaker-task knobs
    pub speakers: usize,
    pub utterances: usize,
    pub steps: usize,
    pub features: usize,
    pub sep: f64,
    pub noise: f64,
    pub within: f64,
    pub embed: usize,
    pub ge2e: bool,
    pub ge2e_speakers: usize,
    pub ge2e_utterances: usize,
    pub val_utterances: usize,
    // warnings gathered during resolution
    pub warnings: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cell: CellKind::Lstm,
            param: Parameterization::TtFused,
            hidden: 64,
            input: None,
            cores: 2,
            rank: 4,
            rank0: 4,
            task: Task::Toy,
            seed: 0,
            epochs: 10,
            lr: 1e-3,
            batch: 64,
            patience: 5,
            out: PathBuf::from("runs"),
            repeats: 100,
            workers: 1,
            data_fraction: 1.0,
            data_dir: None,
            row_per_step: true,
            downsample: 2,
            permute: false,
            permute_seed: 0,
            train_count: 5000,
            val_count: 1000,
            test_count: 1000,
            speakers: 20,
            utterances: 10,
            steps: 20,
            features: 16,
            sep: 0.5,
            noise: 0.3,
            within: 0.0,
            embed: 32,
            ge2e: true,
            ge2e_speakers: 8,
            ge2e_utterances: 4,
            val_utterances: 3,
            warnings: Vec::new(),
        }
    }
}

/// Parse a flat key=value config file: one pair per line, '#' comments.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, got {raw:?}",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn get_parsed<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    into: &mut T,
) -> Result<()> {
    if let Some(raw) = map.get(key) {
        *into = raw
            .parse()
            .map_err(|_| Error::Config(format!("bad value for {key}: {raw:?}")))?;
    }
    Ok(())
}

impl RunConfig {
    /// Layer a key=value map over the defaults; CLI overrides apply after.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let known = [
            "cell",
            "param",
            "hidden",
            "input",
            "cores",
            "rank",
            "rank0",
            "task",
            "seed",
            "epochs",
            "lr",
            "batch",
            "patience",
            "out",
            "repeats",
            "workers",
            "data-fraction",
            "data-dir",
            "row-per-step",
            "downsample",
            "permute",
            "permute-seed",
            "train-count",
            "val-count",
            "test-count",
            "speakers",
            "utterances",
            "steps",
            "features",
            "sep",
            "noise",
            "within",
            "embed",
            "ge2e",
            "ge2e-speakers",
            "ge2e-utterances",
            "val-utterances",
        ];
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }
        if let Some(v) = map.get("cell") {
            c.cell = parse_cell(v)?;
        }
        if let Some(v) = map.get("param") {
            c.param = parse_param(v)?;
        }
        if let Some(v) = map.get("task") {
            c.task = Task::parse(v)?;
        }
        get_parsed(map, "hidden", &mut c.hidden)?;
        if let Some(v) = map.get("input") {
            c.input = Some(
                v.parse()
                    .map_err(|_| Error::Config(format!("bad value for input: {v:?}")))?,
            );
        }
        get_parsed(map, "cores", &mut c.cores)?;
        get_parsed(map, "rank", &mut c.rank)?;
        if map.contains_key("rank") && !map.contains_key("rank0") {
            c.rank0 = c.rank;
        }
        get_parsed(map, "rank0", &mut c.rank0)?;
        get_parsed(map, "seed", &mut c.seed)?;
        get_parsed(map, "epochs", &mut c.epochs)?;
        get_parsed(map, "lr", &mut c.lr)?;
        get_parsed(map, "batch", &mut c.batch)?;
        get_parsed(map, "patience", &mut c.patience)?;
        if let Some(v) = map.get("out") {
            c.out = PathBuf::from(v);
        }
        get_parsed(map, "repeats", &mut c.repeats)?;
        get_parsed(map, "workers", &mut c.workers)?;
        get_parsed(map, "data-fraction", &mut c.data_fraction)?;
        if let Some(v) = map.get("data-dir") {
            c.data_dir = Some(PathBuf::from(v));
        }
        get_parsed(map, "row-per-step", &mut c.row_per_step)?;
        get_parsed(map, "downsample", &mut c.downsample)?;
        get_parsed(map, "permute", &mut c.permute)?;
        get_parsed(map, "permute-seed", &mut c.permute_seed)?;
        get_parsed(map, "train-count", &mut c.train_count)?;
        get_parsed(map, "val-count", &mut c.val_count)?;
        get_parsed(map, "test-count", &mut c.test_count)?;
        get_parsed(map, "speakers", &mut c.speakers)?;
        get_parsed(map, "utterances", &mut c.utterances)?;
        get_parsed(map, "steps", &mut c.steps)?;
        get_parsed(map, "features", &mut c.features)?;
        get_parsed(map, "sep", &mut c.sep)?;
        get_parsed(map, "noise", &mut c.noise)?;
        get_parsed(map, "within", &mut c.within)?;
        get_parsed(map, "embed", &mut c.embed)?;
        get_parsed(map, "ge2e", &mut c.ge2e)?;
        get_parsed(map, "ge2e-speakers", &mut c.ge2e_speakers)?;
        get_parsed(map, "ge2e-utterances", &mut c.ge2e_utterances)?;
        get_parsed(map, "val-utterances", &mut c.val_utterances)?;
        Ok(c)
    }

    pub fn validate(&mut self) -> Result<()> {
        if self.hidden == 0 || self.cores == 0 || self.rank == 0 || self.rank0 == 0 {
            return Err(Error::Config(
                "hidden, cores, rank, and rank0 must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.data_fraction) || self.data_fraction == 0.0 {
            return Err(Error::Config(format!(
                "data-fraction must be in (0, 1], got {}",
                self.data_fraction
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text for provenance and config hashing.
    pub fn canonical_text(&self) -> String {
        format!(
            "cell={} param={} hidden={} input={:?} cores={} rank={} rank0={} task={} seed={} \
             epochs={} lr={} batch={} patience={} data_fraction={} row_per_step={} downsample={} \
             permute={} permute_seed={} speakers={} utterances={} steps={} features={} sep={} \
             noise={} within={} embed={} ge2e={}",
            match self.cell {
                CellKind::Lstm => "lstm",
                CellKind::Gru => "gru",
            },
            match self.param {
                Parameterization::Dense => "dense",
                Parameterization::TtSeparate => "tt-sep",
                Parameterization::TtFused => "tt-fused",
            },
            self.hidden,
            self.input,
            self.cores,
            self.rank,
            self.rank0,
            self.task.name(),
            self.seed,
            self.epochs,
            self.lr,
            self.batch,
            self.patience,
            self.data_fraction,
            self.row_per_step,
            self.downsample,
            self.permute,
            self.permute_seed,
            self.speakers,
            self.utterances,
            self.steps,
            self.features,
            self.sep,
            self.noise,
            self.within,
            self.embed,
            self.ge2e,
        )
    }

    /// Dataset root: --data-dir / config key, else TTRNN_DATA_DIR.
    pub fn dataset_root(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.data_dir {
            return Ok(dir.clone());
        }
        match std::env::var_os("TTRNN_DATA_DIR") {
            Some(v) => Ok(PathBuf::from(v)),
            None => Err(Error::Config(
                "no dataset directory: pass --data-dir or set TTRNN_DATA_DIR".into(),
            )),
        }
    }
}
