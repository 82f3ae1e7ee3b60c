//! Dataset preparation, backbone pretraining and the framework sweep.
//!
//! Every random choice derives from the master seed and the coordinates of
//! the thing being drawn, so cells can run in any order or concurrently.

use std::path::Path;

use log::info;
use rayon::prelude::*;
use segxfer::dataforge::{
    clahe, derive_seed, generate_phantoms, kmeans_labels, split_counts, AnomalyKind, Dataset, Sample,
};
use segxfer::engine::Graph;
use segxfer::metrics::MetricsReport;
use segxfer::nets::{build_cls_head, build_scratch, load_checkpoint, save_checkpoint, ArchSpec, TrainMeta};
use segxfer::trainer::{evaluate, fit_classifier, fit_segmentation, Task, TrainConfig, TrainTrace};

use crate::config::{ExperimentConfig, Framework, TaskKind};
use crate::error::{HarnessError, Result};
use crate::report::{aggregate, Aggregate, RecordRow};

const POOL_STREAM: u64 = 1;
const PRETRAIN_STREAM: u64 = 2;
const BACKBONE_STREAM: u64 = 3;
const CELL_STREAM: u64 = 4;

/// Classification pool and segmentation pretraining set of one configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    /// Labelled images the classification splits are drawn from.
    pub pool: Dataset,
    /// Anomaly-free images with their structure label maps.
    pub pretrain: Dataset,
}

/// One trained and evaluated grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub framework: Framework,
    pub samples_per_class: usize,
    pub repetition: usize,
    pub seed: u64,
    pub report: MetricsReport,
    /// Pool indices used for training and testing.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl RunRecord {
    pub fn row(&self) -> RecordRow {
        RecordRow {
            framework: self.framework,
            samples_per_class: self.samples_per_class,
            repetition: self.repetition,
            seed: self.seed,
            accuracy: self.report.accuracy,
            kappa: self.report.kappa,
            f1: self.report.f1.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    /// Ordered by framework, then grid entry, then repetition.
    pub records: Vec<RunRecord>,
}

impl SweepResult {
    pub fn rows(&self) -> Vec<RecordRow> {
        self.records.iter().map(RunRecord::row).collect()
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        aggregate(&self.rows())
    }

    pub fn aggregate(&self, framework: Framework, samples_per_class: usize, metric: &str) -> Option<Aggregate> {
        self.aggregates()
            .into_iter()
            .find(|a| a.framework == framework && a.samples_per_class == samples_per_class && a.metric == metric)
    }
}

fn preprocess(cfg: &ExperimentConfig, samples: Vec<Sample>) -> Result<Vec<Sample>> {
    match &cfg.clahe {
        None => Ok(samples),
        Some(c) => samples
            .into_iter()
            .map(|mut s| {
                s.image = clahe(&s.image, c)?;
                Ok(s)
            })
            .collect(),
    }
}

impl Experiment {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let pool_seed = derive_seed(cfg.seed, &[POOL_STREAM]);
        let counts = cfg.pool_per_class();
        let mut pool = Dataset::new(&cfg.spatial(), 0, cfg.n_classes() as u8);
        match cfg.task {
            TaskKind::Level => {
                let spec = cfg.phantom(AnomalyKind::None);
                pool.n_labels = spec.n_labels();
                pool.samples = generate_phantoms(&spec, counts[0] * cfg.levels, pool_seed)?;
            }
            TaskKind::Anomaly => {
                for (kind, &n) in AnomalyKind::ALL.iter().zip(&counts) {
                    let spec = cfg.phantom(*kind);
                    pool.n_labels = pool.n_labels.max(spec.n_labels());
                    pool.samples.extend(generate_phantoms(&spec, n, pool_seed)?);
                }
            }
        }
        pool.samples = preprocess(cfg, pool.samples)?;
        pool.validate()?;

        let spec = cfg.phantom(AnomalyKind::None);
        let mut pretrain = Dataset::new(&cfg.spatial(), spec.n_labels(), spec.n_classes());
        let seed = derive_seed(cfg.seed, &[PRETRAIN_STREAM]);
        pretrain.samples = preprocess(cfg, generate_phantoms(&spec, cfg.pretrain_count, seed)?)?;
        pretrain.validate()?;
        info!(
            "prepared {} pool images and {} pretraining images",
            pool.len(),
            pretrain.len()
        );
        Ok(Experiment {
            cfg: cfg.clone(),
            pool,
            pretrain,
        })
    }

    /// Segmentation targets for a pretrained framework: structure labels for
    /// MANUAL, per-image k-means intensity labels for THRESHOLD.
    pub fn pretraining_set(&self, framework: Framework) -> Result<Dataset> {
        match framework {
            Framework::Manual => Ok(self.pretrain.clone()),
            Framework::Threshold => {
                let k = self.cfg.threshold_labels();
                let mut d = self.pretrain.clone();
                d.n_labels = k as u8;
                for s in &mut d.samples {
                    s.labels = kmeans_labels(&s.image, k)?;
                }
                Ok(d)
            }
            Framework::Scratch => Err(HarnessError::Config("SCRATCH has no backbone to pretrain".into())),
        }
    }

    pub fn backbone_arch(&self, framework: Framework) -> Result<ArchSpec> {
        let labels = match framework {
            Framework::Manual => self.pretrain.n_labels as usize,
            Framework::Threshold => self.cfg.threshold_labels(),
            Framework::Scratch => return Err(HarnessError::Config("SCRATCH has no backbone".into())),
        };
        Ok(ArchSpec::MNet(self.cfg.mnet_spec(labels)))
    }

    /// Seed of a backbone. It also fingerprints every setting the backbone
    /// depends on, so a cached checkpoint is only reused for the same setup.
    pub fn backbone_seed(&self, framework: Framework) -> u64 {
        let c = &self.cfg;
        let setup = format!(
            "{:?}|{}|{}|{}|{}|{}|{:?}|{}|{}|{}|{:?}",
            c.task, c.dim, c.size, c.structures, c.layout_seed, c.noise, c.clahe, c.n_s, c.pretrain_count,
            c.threshold_labels(), c.pretrain
        );
        let fingerprint = setup
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        derive_seed(c.seed, &[BACKBONE_STREAM, framework.index(), fingerprint])
    }

    pub fn pretrain_backbone(&self, framework: Framework) -> Result<(Graph<f32>, TrainTrace)> {
        let data = self.pretraining_set(framework)?;
        let seed = self.backbone_seed(framework);
        let mut net: Graph<f32> = self.backbone_arch(framework)?.build(seed)?;
        let cfg = TrainConfig {
            seed,
            ..self.cfg.pretrain.clone()
        };
        info!("pretraining {framework} backbone on {} images", data.len());
        let trace = fit_segmentation(&mut net, &data, &cfg)?;
        net.set_frozen(true);
        Ok((net, trace))
    }

    /// Load the backbone checkpoint at `path` when it matches this
    /// configuration, otherwise pretrain and save it there.
    pub fn backbone_cached(&self, framework: Framework, path: &Path) -> Result<Graph<f32>> {
        let arch = self.backbone_arch(framework)?;
        let seed = self.backbone_seed(framework);
        if path.exists() {
            match load_checkpoint::<f32>(&arch, path) {
                Ok((mut g, meta)) if meta.seed == seed => {
                    info!("reusing {framework} backbone from {}", path.display());
                    g.set_frozen(true);
                    return Ok(g);
                }
                Ok(_) | Err(segxfer::Error::SpecMismatch(_)) => {
                    info!("{} belongs to another configuration, retraining", path.display());
                }
                Err(e) => return Err(e.into()),
            }
        }
        let (g, _) = self.pretrain_backbone(framework)?;
        let meta = TrainMeta {
            epoch: self.cfg.pretrain.epochs as u32,
            seed,
        };
        save_checkpoint(path, &arch, &g, meta)?;
        Ok(g)
    }

    pub fn cell_seed(&self, samples_per_class: usize, repetition: usize) -> u64 {
        derive_seed(self.cfg.seed, &[CELL_STREAM, samples_per_class as u64, repetition as u64])
    }

    /// Train/test split of one cell; shared by all frameworks.
    pub fn cell_split(&self, samples_per_class: usize, repetition: usize) -> Result<(Dataset, Dataset, Vec<usize>, Vec<usize>)> {
        let classes = self.pool.class_labels()?;
        let seed = derive_seed(self.cell_seed(samples_per_class, repetition), &[0]);
        let s = split_counts(&classes, &self.cfg.train_counts(samples_per_class), seed)?;
        if s.test.is_empty() {
            return Err(HarnessError::Config("no samples left for testing; raise test_per_class".into()));
        }
        Ok((self.pool.subset(&s.train), self.pool.subset(&s.test), s.train, s.test))
    }

    pub fn classifier_arch(&self, framework: Framework) -> ArchSpec {
        match framework {
            Framework::Scratch => ArchSpec::Scratch(self.cfg.scratch_spec()),
            _ => ArchSpec::ClsHead(self.cfg.head_spec()),
        }
    }

    pub fn train_seed(&self, framework: Framework, samples_per_class: usize, repetition: usize) -> u64 {
        derive_seed(self.cell_seed(samples_per_class, repetition), &[1, framework.index()])
    }

    /// Train the framework's classifier for one cell and return it with the
    /// split it was trained on.
    pub fn train_classifier(
        &self,
        framework: Framework,
        samples_per_class: usize,
        repetition: usize,
        backbone: Option<&mut Graph<f32>>,
    ) -> Result<(Graph<f32>, TrainTrace)> {
        let (train, _, _, _) = self.cell_split(samples_per_class, repetition)?;
        let seed = self.train_seed(framework, samples_per_class, repetition);
        let mut model: Graph<f32> = match framework {
            Framework::Scratch => build_scratch(&self.cfg.scratch_spec(), seed)?,
            _ => build_cls_head(&self.cfg.head_spec(), seed)?,
        };
        let backbone = match (framework, backbone) {
            (Framework::Scratch, _) => None,
            (_, Some(b)) => Some(b),
            (_, None) => return Err(HarnessError::Config(format!("{framework} needs a pretrained backbone"))),
        };
        let cfg = TrainConfig {
            seed,
            freeze_backbone: true,
            ..self.cfg.classifier.clone()
        };
        let trace = fit_classifier(&mut model, backbone, &train, &cfg)?;
        Ok((model, trace))
    }

    /// Train and evaluate one cell.
    pub fn run_framework(
        &self,
        framework: Framework,
        samples_per_class: usize,
        repetition: usize,
        mut backbone: Option<&mut Graph<f32>>,
    ) -> Result<RunRecord> {
        let (_, test, train_idx, test_idx) = self.cell_split(samples_per_class, repetition)?;
        let (mut model, _) = self.train_classifier(framework, samples_per_class, repetition, backbone.as_deref_mut())?;
        let bb = if framework == Framework::Scratch { None } else { backbone };
        let report = evaluate(&mut model, bb, &test, Task::Classification)?;
        Ok(RunRecord {
            framework,
            samples_per_class,
            repetition,
            seed: self.cell_seed(samples_per_class, repetition),
            report,
            train: train_idx,
            test: test_idx,
        })
    }

    /// Backbones for every pretrained framework in the configuration.
    pub fn backbones(&self, cache_dir: Option<&Path>) -> Result<Vec<(Framework, Graph<f32>)>> {
        let mut out = Vec::new();
        for &f in &self.cfg.frameworks {
            if !f.uses_backbone() {
                continue;
            }
            let g = match cache_dir {
                Some(dir) => self.backbone_cached(f, &dir.join(backbone_file(f)))?,
                None => self.pretrain_backbone(f)?.0,
            };
            out.push((f, g));
        }
        Ok(out)
    }

    /// Run every (framework, grid entry, repetition) cell on `jobs` workers.
    /// Completed records are returned alongside the first failure in grid order.
    pub fn run_cells(
        &self,
        backbones: &[(Framework, Graph<f32>)],
        jobs: usize,
    ) -> (Vec<RunRecord>, Option<HarnessError>) {
        let mut cells = Vec::new();
        for &f in &self.cfg.frameworks {
            for &n in &self.cfg.grid {
                for rep in 0..self.cfg.repetitions {
                    cells.push((f, n, rep));
                }
            }
        }
        let run = |&(f, n, rep): &(Framework, usize, usize)| -> Result<RunRecord> {
            let mut bb = backbones.iter().find(|(g, _)| *g == f).map(|(_, b)| b.clone());
            let r = self.run_framework(f, n, rep, bb.as_mut()).map_err(|e| HarnessError::Cell {
                framework: f.name().to_string(),
                samples: n,
                repetition: rep,
                source: Box::new(e),
            })?;
            info!("{f} n={n} rep={rep}: accuracy {:.4}", r.report.accuracy);
            Ok(r)
        };
        let results: Vec<Result<RunRecord>> = match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| cells.par_iter().map(run).collect()),
            Err(e) => {
                return (Vec::new(), Some(HarnessError::Config(format!("cannot start {jobs} workers: {e}"))));
            }
        };
        let mut records = Vec::new();
        let mut first_err = None;
        for r in results {
            match r {
                Ok(rec) => records.push(rec),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        (records, first_err)
    }
}

pub fn backbone_file(framework: Framework) -> String {
    format!("backbone-{}.ckpt", framework.name().to_ascii_lowercase())
}

/// Full sweep. Backbones are cached as checkpoints under `cfg.out`; on a
/// failed cell the completed records are still written there.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let exp = Experiment::prepare(cfg)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| crate::error::io_error(&cfg.out, e))?;
    let backbones = exp.backbones(Some(&cfg.out))?;
    let (records, err) = exp.run_cells(&backbones, cfg.jobs);
    let result = SweepResult { records };
    match err {
        None => Ok(result),
        Some(e) => {
            if !result.records.is_empty() {
                crate::report::write_records(&cfg.out.join("records.partial.csv"), &result)?;
            }
            Err(e)
        }
    }
}
