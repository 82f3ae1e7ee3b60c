//! Experiment configuration files.
//!
//! Files are UTF-8, one `key = value` per line, grouped under `[section]`
//! headers; `#` and `;` start comments. Every key is optional. Unknown
//! sections and keys are rejected so typos do not silently fall back to
//! defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use segxfer::dataforge::{AugmentPolicy, ClaheConfig, PhantomSpec};
use segxfer::nets::{ClsHeadSpec, MNetSpec, ScratchSpec};
use segxfer::trainer::{TrainConfig, WeightSource};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Framework {
    Manual,
    Threshold,
    Scratch,
}

impl Framework {
    pub const ALL: [Framework; 3] = [Framework::Manual, Framework::Threshold, Framework::Scratch];

    pub fn name(self) -> &'static str {
        match self {
            Framework::Manual => "MANUAL",
            Framework::Threshold => "THRESHOLD",
            Framework::Scratch => "SCRATCH",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }

    pub fn uses_backbone(self) -> bool {
        self != Framework::Scratch
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Framework::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| HarnessError::Config(format!("unknown framework `{s}` (MANUAL, THRESHOLD, SCRATCH)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Normal vs two lesion kinds, whole images.
    Anomaly,
    /// Depth band of 2D slices.
    Level,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Anomaly => "anomaly-3class",
            TaskKind::Level => "level-9class",
        }
    }
}

impl FromStr for TaskKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "anomaly-3class" => Ok(TaskKind::Anomaly),
            "level-9class" => Ok(TaskKind::Level),
            other => Err(HarnessError::Config(format!(
                "unknown task `{other}` (anomaly-3class, level-9class)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub frameworks: Vec<Framework>,
    /// Training samples per class.
    pub grid: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    /// Anomaly task: training samples of the normal class in every cell.
    pub normal_count: usize,
    /// Held-out samples per class beyond the largest training request.
    pub test_per_class: usize,

    pub dim: usize,
    pub size: usize,
    pub structures: usize,
    pub layout_seed: u64,
    pub noise: f64,
    pub levels: usize,

    pub clahe: Option<ClaheConfig>,

    pub n_s: usize,
    pub pretrain_count: usize,
    /// k-means labels for the THRESHOLD backbone; 0 picks the task default.
    pub threshold_k: usize,

    pub head_n_c: usize,
    pub head_n_fc: usize,
    pub head_r: usize,

    pub scratch_n_c: usize,
    pub scratch_n_fc: usize,
    pub scratch_batchnorm: bool,

    pub pretrain: TrainConfig,
    pub classifier: TrainConfig,
}

impl ExperimentConfig {
    pub fn defaults(task: TaskKind) -> Self {
        let (grid, dim, size) = match task {
            TaskKind::Anomaly => ((1..=8).map(|i| 2 * i).collect(), 3, 32),
            TaskKind::Level => ((1..=9).map(|i| 2 * i).collect(), 2, 64),
        };
        ExperimentConfig {
            task,
            frameworks: Framework::ALL.to_vec(),
            grid,
            repetitions: 5,
            seed: 0,
            out: PathBuf::from("results"),
            jobs: 1,
            normal_count: 8,
            test_per_class: 20,
            dim,
            size,
            structures: 8,
            layout_seed: 0,
            noise: 6.0,
            levels: 9,
            clahe: Some(ClaheConfig::default()),
            n_s: 16,
            pretrain_count: 40,
            threshold_k: 0,
            head_n_c: 16,
            head_n_fc: 100,
            head_r: 3,
            scratch_n_c: 16,
            scratch_n_fc: 100,
            scratch_batchnorm: true,
            pretrain: TrainConfig {
                batch_size: 1,
                epochs: 30,
                ..TrainConfig::default()
            },
            classifier: TrainConfig {
                batch_size: 4,
                epochs: 100,
                ..TrainConfig::default()
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let entry = sections.entry(name.unwrap_or("experiment").to_string()).or_default();
            for (k, v) in props.iter() {
                entry.insert(k.to_string(), v.trim().to_string());
            }
        }
        let mut r = Reader { sections };
        let task = r.take("experiment", "task")?.map(|s| s.parse()).transpose()?.unwrap_or(TaskKind::Level);
        let mut c = Self::defaults(task);
        if let Some(v) = r.take("experiment", "frameworks")? {
            c.frameworks = list(&v)?;
        }
        if let Some(v) = r.take("experiment", "grid")? {
            c.grid = list(&v)?;
        }
        r.set("experiment", "repetitions", &mut c.repetitions)?;
        r.set("experiment", "seed", &mut c.seed)?;
        if let Some(v) = r.take("experiment", "out")? {
            c.out = PathBuf::from(v);
        }
        r.set("experiment", "jobs", &mut c.jobs)?;
        r.set("experiment", "normal_count", &mut c.normal_count)?;
        r.set("experiment", "test_per_class", &mut c.test_per_class)?;

        r.set("phantom", "dim", &mut c.dim)?;
        r.set("phantom", "size", &mut c.size)?;
        r.set("phantom", "structures", &mut c.structures)?;
        r.set("phantom", "layout_seed", &mut c.layout_seed)?;
        r.set("phantom", "noise", &mut c.noise)?;
        r.set("phantom", "levels", &mut c.levels)?;

        let mut clahe_on = c.clahe.is_some();
        let mut clahe = c.clahe.unwrap_or_default();
        r.set("preprocess", "clahe", &mut clahe_on)?;
        if let Some(v) = r.take("preprocess", "clahe_tiles")? {
            let t: Vec<usize> = list(&v)?;
            clahe.tiles = match t.as_slice() {
                [n] => [*n, *n],
                [a, b] => [*a, *b],
                _ => return Err(HarnessError::Config(format!("clahe_tiles takes one or two numbers, got `{v}`"))),
            };
        }
        r.set("preprocess", "clahe_clip", &mut clahe.clip)?;
        c.clahe = clahe_on.then_some(clahe);

        r.set("backbone", "n_s", &mut c.n_s)?;
        r.set("backbone", "pretrain_count", &mut c.pretrain_count)?;
        r.set("backbone", "threshold_k", &mut c.threshold_k)?;
        r.set("head", "n_c", &mut c.head_n_c)?;
        r.set("head", "n_fc", &mut c.head_n_fc)?;
        r.set("head", "r", &mut c.head_r)?;
        r.set("scratch", "n_c", &mut c.scratch_n_c)?;
        r.set("scratch", "n_fc", &mut c.scratch_n_fc)?;
        r.set("scratch", "batchnorm", &mut c.scratch_batchnorm)?;
        r.train("pretrain", &mut c.pretrain)?;
        r.train("classifier", &mut c.classifier)?;
        r.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.frameworks.is_empty() || self.grid.is_empty() || self.grid.contains(&0) {
            return bad("frameworks and grid must be non-empty, grid entries positive".into());
        }
        if self.repetitions == 0 || self.jobs == 0 {
            return bad("repetitions and jobs must be positive".into());
        }
        if self.task == TaskKind::Level && self.dim != 2 {
            return bad("level-9class works on 2D slices; set [phantom] dim = 2".into());
        }
        if self.task == TaskKind::Anomaly && self.normal_count == 0 {
            return bad("normal_count must be positive".into());
        }
        if self.frameworks.iter().any(|f| f.uses_backbone()) && self.pretrain_count < 2 {
            return bad("MANUAL and THRESHOLD need a pretraining set of at least 2 images".into());
        }
        self.phantom(segxfer::dataforge::AnomalyKind::None).validate()?;
        self.mnet_spec(2).validate()?;
        self.scratch_spec().validate()?;
        self.head_spec().validate()?;
        self.pretrain.validate()?;
        self.classifier.validate()?;
        Ok(())
    }

    pub fn spatial(&self) -> Vec<usize> {
        vec![self.size; self.dim]
    }

    pub fn phantom(&self, anomaly: segxfer::dataforge::AnomalyKind) -> PhantomSpec {
        let base = match self.task {
            TaskKind::Level => PhantomSpec::levels(self.size, self.levels),
            TaskKind::Anomaly => PhantomSpec {
                size: self.size,
                anomaly,
                ..PhantomSpec::new(self.dim)
            },
        };
        PhantomSpec {
            structures: self.structures,
            layout_seed: self.layout_seed,
            noise: self.noise,
            ..base
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.task {
            TaskKind::Anomaly => 3,
            TaskKind::Level => self.levels,
        }
    }

    pub fn threshold_labels(&self) -> usize {
        match (self.threshold_k, self.task) {
            (0, TaskKind::Anomaly) => 5,
            (0, TaskKind::Level) => 10,
            (k, _) => k,
        }
    }

    pub fn mnet_spec(&self, n_labels: usize) -> MNetSpec {
        MNetSpec::new(self.dim, &self.spatial(), self.n_s, n_labels)
    }

    pub fn head_spec(&self) -> ClsHeadSpec {
        ClsHeadSpec {
            dim: self.dim,
            input_channels: self.mnet_spec(2).feature_channels(),
            spatial: self.spatial(),
            n_c: self.head_n_c,
            n_fc: self.head_n_fc,
            r: self.head_r,
            n_classes: self.n_classes(),
        }
    }

    pub fn scratch_spec(&self) -> ScratchSpec {
        ScratchSpec {
            dim: self.dim,
            in_channels: 1,
            spatial: self.spatial(),
            n_c: self.scratch_n_c,
            n_fc: self.scratch_n_fc,
            n_classes: self.n_classes(),
            batchnorm: self.scratch_batchnorm,
        }
    }

    /// Training samples requested per class for one grid entry.
    pub fn train_counts(&self, per_class: usize) -> Vec<usize> {
        match self.task {
            TaskKind::Anomaly => vec![self.normal_count, per_class, per_class],
            TaskKind::Level => vec![per_class; self.levels],
        }
    }

    /// Samples generated per class for the classification pool.
    pub fn pool_per_class(&self) -> Vec<usize> {
        let max = self.grid.iter().copied().max().unwrap_or(0);
        self.train_counts(max).into_iter().map(|n| n + self.test_per_class).collect()
    }
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| HarnessError::Config(format!("bad list item `{s}`: {e}"))))
        .collect()
}

struct Reader {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Reader {
    fn take(&mut self, section: &str, key: &str) -> Result<Option<String>> {
        Ok(self.sections.get_mut(section).and_then(|s| s.remove(key)))
    }

    fn set<T: FromStr>(&mut self, section: &str, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.take(section, key)? {
            *slot = v
                .parse()
                .map_err(|e| HarnessError::Config(format!("[{section}] {key} = `{v}`: {e}")))?;
        }
        Ok(())
    }

    fn train(&mut self, section: &str, cfg: &mut TrainConfig) -> Result<()> {
        self.set(section, "batch_size", &mut cfg.batch_size)?;
        self.set(section, "learning_rate", &mut cfg.learning_rate)?;
        self.set(section, "epochs", &mut cfg.epochs)?;
        let a: &mut AugmentPolicy = &mut cfg.augment;
        self.set(section, "augment_probability", &mut a.probability)?;
        self.set(section, "rotation_deg", &mut a.rotation_deg)?;
        self.set(section, "shift", &mut a.shift)?;
        self.set(section, "zoom_min", &mut a.zoom.0)?;
        self.set(section, "zoom_max", &mut a.zoom.1)?;
        if let Some(v) = self.take(section, "flip_axes")? {
            a.flip_axes = list(&v)?;
        }
        if let Some(v) = self.take(section, "weights")? {
            cfg.weights = match v.as_str() {
                "frequencies" => WeightSource::Frequencies,
                "uniform" => WeightSource::Uniform,
                other => {
                    return Err(HarnessError::Config(format!(
                        "[{section}] weights = `{other}` (frequencies, uniform)"
                    )))
                }
            };
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        for (section, keys) in self.sections {
            if let Some(k) = keys.keys().next() {
                return Err(HarnessError::Config(format!("unknown key `{k}` in [{section}]")));
            }
        }
        Ok(())
    }
}
