//! Joint heterogeneous training: one batch from each task per step,
//! AdamW with per-group rates and a step decay schedule, plus the
//! ablation grids (components, DPM variants, prompt styles, context
//! lengths, data fractions) with median-over-seeds aggregation.

use rand::seq::SliceRandom;

use crate::config::{Arch, ExperimentConfig};
use crate::data::{generate_synthetic_world, ClipDataset, SyntheticWorld};
use crate::dpm::{DpmInit, DpmMode};
use crate::error::{Error, Result};
use crate::model::{Model, StepLosses};
use crate::numerics::{rng_for, AdamW, GroupRates, Tensor};
use crate::objective::MetricsReport;
use crate::tsp::{PromptStyle, Task};

/// Base rates decayed by 0.1 every 10 epochs.
pub fn lr_schedule(epoch: usize, base: GroupRates) -> GroupRates {
    let factor = 0.1f64.powi((epoch / 10) as i32);
    GroupRates {
        encoder: base.encoder * factor,
        head: base.head * factor,
    }
}

/// Deterministic shuffled cycling over a dataset's indices.
struct BatchCycle {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchCycle {
    fn new(len: usize, seed: u64, label: &str) -> BatchCycle {
        let mut c = BatchCycle {
            order: (0..len).collect(),
            cursor: 0,
            rng: rng_for(seed, label),
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(size);
        while idx.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        idx
    }
}

fn gather(data: &ClipDataset, idx: &[usize]) -> (Vec<Tensor>, Tensor) {
    let clips = idx.iter().map(|&i| data.clips[i].clone()).collect();
    let labels =
        Tensor::from_rows(&idx.iter().map(|&i| data.labels.row(i).to_vec()).collect::<Vec<_>>())
            .expect("label rows");
    (clips, labels)
}

pub struct TrainOutcome {
    pub model: Model,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub fe_batches: usize,
    pub au_batches: usize,
    pub steps: usize,
}

/// Train one model (joint, or single-task when `solo` is set) on the
/// world's train splits, after applying the configured data fractions.
pub fn train(cfg: &ExperimentConfig, world: &SyntheticWorld, solo: Option<Task>) -> Result<TrainOutcome> {
    let mut model = Model::new(cfg.clone(), solo)?;
    let fe_data = world.fe_train.head_fraction(cfg.data_fraction_fe)?;
    let au_data = world.au_train.head_fraction(cfg.data_fraction_au)?;

    let use_fe = solo.is_none() || solo == Some(Task::Expression);
    let use_au = solo.is_none() || solo == Some(Task::Au);

    // one epoch = one pass over the smaller active dataset; larger cycles
    let passes: Vec<(usize, usize)> = [
        (use_fe, fe_data.len(), cfg.batch_dfer),
        (use_au, au_data.len(), cfg.batch_au),
    ]
    .into_iter()
    .filter(|&(on, _, _)| on)
    .map(|(_, len, batch)| (len, batch))
    .collect();
    let steps_per_epoch = passes
        .iter()
        .min_by_key(|&&(len, _)| len)
        .map(|&(len, batch)| len.div_ceil(batch))
        .unwrap_or(0)
        .max(1);

    let mut fe_cycle = BatchCycle::new(fe_data.len(), cfg.seed, "trainer.batches.fe");
    let mut au_cycle = BatchCycle::new(au_data.len(), cfg.seed, "trainer.batches.au");
    let mut opt = AdamW::new(&model.store, cfg.weight_decay, (0.9, 0.999));
    let base = GroupRates { encoder: cfg.lr_encoder, head: cfg.lr_heads };

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let (mut fe_batches, mut au_batches, mut steps) = (0usize, 0usize, 0usize);
    for epoch in 0..cfg.epochs {
        let rates = lr_schedule(epoch, base);
        let mut acc = 0.0;
        for _ in 0..steps_per_epoch {
            let fe = if use_fe {
                let idx = fe_cycle.next_batch(cfg.batch_dfer.min(fe_data.len()));
                fe_batches += 1;
                Some(gather(&fe_data, &idx))
            } else {
                None
            };
            let au = if use_au {
                let idx = au_cycle.next_batch(cfg.batch_au.min(au_data.len()));
                au_batches += 1;
                Some(gather(&au_data, &idx))
            } else {
                None
            };
            let losses: StepLosses = model.step(
                fe.as_ref().map(|(c, l)| (c.as_slice(), l)),
                au.as_ref().map(|(c, l)| (c.as_slice(), l)),
            )?;
            opt.step(&mut model.store, rates)?;
            acc += losses.total;
            steps += 1;
        }
        epoch_losses.push(acc / steps_per_epoch as f64);
    }

    Ok(TrainOutcome { model, epoch_losses, fe_batches, au_batches, steps })
}

/// Train under a config and score the test splits. `Arch::Stl` trains
/// one solo model per task and merges the two reports.
pub fn run_config(cfg: &ExperimentConfig, seed: u64) -> Result<MetricsReport> {
    let cfg = ExperimentConfig { seed, ..cfg.clone() }.resolve()?;
    let world = generate_synthetic_world(&cfg.world, seed)?;
    if cfg.arch == Arch::Stl {
        let mut au = train(&cfg, &world, Some(Task::Au))?;
        let mut fe = train(&cfg, &world, Some(Task::Expression))?;
        let au_report = au.model.evaluate(&world)?;
        let fe_report = fe.model.evaluate(&world)?;
        Ok(MetricsReport {
            per_au_f1: au_report.per_au_f1,
            avg_f1: au_report.avg_f1,
            uar: fe_report.uar,
            war: fe_report.war,
            confusion: fe_report.confusion,
        })
    } else {
        let mut out = train(&cfg, &world, None)?;
        out.model.evaluate(&world)
    }
}

/// Median of a non-empty sample.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty sample");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub avg_f1: Vec<f64>,
    pub uar: Vec<f64>,
    pub war: Vec<f64>,
    pub median_avg_f1: f64,
    pub median_uar: f64,
    pub median_war: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    Component,
    DpmVariant,
    PromptStyle,
    ContextLength,
    DataFraction,
}

/// The configurations of one ablation grid, as (label, config) pairs
/// derived from a base config.
pub fn grid_configs(base: &ExperimentConfig, grid: Grid) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match grid {
        Grid::Component => vec![
            ("stl".into(), with(&|c| c.arch = Arch::Stl)),
            ("baseline".into(), with(&|c| c.arch = Arch::Baseline)),
            ("baseline+tsp".into(), with(&|c| c.arch = Arch::Tsp)),
            ("baseline+tsp+dpm".into(), with(&|c| c.arch = Arch::TspDpm)),
        ],
        Grid::DpmVariant => {
            let dpm = |init: DpmInit, mode: DpmMode| {
                with(&|c| {
                    c.arch = Arch::TspDpm;
                    c.dpm_init = init;
                    c.dpm_mode = mode;
                })
            };
            vec![
                ("prior-learnable-dual".into(), dpm(DpmInit::Prior, DpmMode::LearnableDual)),
                ("random-learnable-dual".into(), dpm(DpmInit::Random, DpmMode::LearnableDual)),
                ("prior-frozen".into(), dpm(DpmInit::Prior, DpmMode::Frozen)),
                ("prior-transpose-tied".into(), dpm(DpmInit::Prior, DpmMode::TransposeTied)),
                ("random-linear".into(), dpm(DpmInit::Random, DpmMode::Linear)),
                ("random-mlp".into(), dpm(DpmInit::Random, DpmMode::Mlp)),
                ("none".into(), dpm(DpmInit::Prior, DpmMode::None)),
            ]
        }
        Grid::PromptStyle => [PromptStyle::Words, PromptStyle::Standalone, PromptStyle::Compound]
            .into_iter()
            .map(|s| {
                (
                    format!("style-{}", serde_json::to_string(&s).unwrap().trim_matches('"')),
                    with(&|c| {
                        c.arch = Arch::Tsp;
                        c.prompt_style = s;
                    }),
                )
            })
            .collect(),
        Grid::ContextLength => [0usize, 4, 8, 12, 16]
            .into_iter()
            .map(|n| {
                (
                    format!("context-{n}"),
                    with(&|c| {
                        c.arch = Arch::Tsp;
                        c.context_length = n;
                    }),
                )
            })
            .collect(),
        Grid::DataFraction => [0.2, 0.4, 0.6, 0.8, 1.0]
            .into_iter()
            .map(|f| {
                (
                    format!("fe-fraction-{f:.1}"),
                    with(&|c| c.data_fraction_fe = f),
                )
            })
            .collect(),
    }
}

/// Run a grid over the seed set, in parallel, collecting per-seed
/// metrics and their medians.
pub fn ablation_suite(
    base: &ExperimentConfig,
    grid: Grid,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("seed set must be non-empty".into()));
    }
    let configs = grid_configs(base, grid);
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    use rayon::prelude::*;
    let reports: Vec<(usize, u64, MetricsReport)> = jobs
        .par_iter()
        .map(|&(i, s)| run_config(&configs[i].1, s).map(|r| (i, s, r)))
        .collect::<Result<Vec<_>>>()?;
    let rows = configs
        .iter()
        .enumerate()
        .map(|(i, (label, _))| {
            let mut per: Vec<(u64, &MetricsReport)> = reports
                .iter()
                .filter(|&&(j, _, _)| j == i)
                .map(|(_, s, r)| (*s, r))
                .collect();
            per.sort_by_key(|&(s, _)| s);
            let avg_f1: Vec<f64> = per.iter().map(|(_, r)| r.avg_f1).collect();
            let uar: Vec<f64> = per.iter().map(|(_, r)| r.uar).collect();
            let war: Vec<f64> = per.iter().map(|(_, r)| r.war).collect();
            AblationRow {
                label: label.clone(),
                seeds: per.iter().map(|&(s, _)| s).collect(),
                median_avg_f1: median(&avg_f1),
                median_uar: median(&uar),
                median_war: median(&war),
                avg_f1,
                uar,
                war,
            }
        })
        .collect();
    Ok(rows)
}
