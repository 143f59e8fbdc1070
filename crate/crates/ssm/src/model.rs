//! Full model assembly: shared trunk, task temporal blocks, and one of
//! three classification mechanisms — plain linear heads, textual
//! semantic prototypes, or prototypes enhanced by the dynamic prior
//! mapping. A model can also be restricted to a single task for the
//! single-task-learning comparisons.

use std::path::Path;

use crate::backbone::{
    encode_frames, register_backbone, temporal_au, temporal_expression, MoeLoad,
};
use crate::config::{Arch, ExperimentConfig};
use crate::container::{read_container, write_container, CKPT_MAGIC};
use crate::data::{ClipDataset, SyntheticWorld};
use crate::dpm::{self, DpmInit, DpmState};
use crate::error::{Error, Result};
use crate::facs::{build_prior_matrix, builtin_facs_table, normalize_rows};
use crate::numerics::{
    grad_check, seeded_gaussian, GradCheckReport, Leaves, ParamGroup, ParamStore, Tape, Tensor,
    VarId,
};
use crate::objective::{
    au_loss, baseline_logits, confusion, dfer_loss, f1_scores, predict_au, predict_expression,
    similarity_scores, total_loss, uar_war, MetricsReport,
};
use crate::tsp::{
    description_variant, encode_prototypes, idf_weights, tokenize, PromptSpec, SurrogateEncoder,
    Task, TokenSequence, DEFAULT_MAX_TOKENS, DEFAULT_VOCAB,
};

pub const CTX_EXP: &str = "tsp.ctx.exp";
pub const CTX_AU: &str = "tsp.ctx.au";
pub const HEAD_EXP_W: &str = "head.exp.w";
pub const HEAD_EXP_B: &str = "head.exp.b";
pub const HEAD_AU_W: &str = "head.au.w";
pub const HEAD_AU_B: &str = "head.au.b";

#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub total: f64,
    pub dfe: Option<f64>,
    pub au: Option<f64>,
}

pub struct Model {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
    pub dpm: Option<DpmState>,
    pub text: SurrogateEncoder,
    /// When set, only this task's classifier exists and only its loss
    /// is computed (single-task learning).
    pub solo: Option<Task>,
    pub moe_load: MoeLoad,
    expr_templates: Vec<TokenSequence>,
    au_templates: Vec<TokenSequence>,
    expr_weights: Vec<Vec<f64>>,
    au_weights: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(cfg: ExperimentConfig, solo: Option<Task>) -> Result<Model> {
        let seed = cfg.seed;
        let mut store = ParamStore::new();
        register_backbone(&mut store, seed, &cfg.backbone)?;

        let table = builtin_facs_table();
        let expr_refs: Vec<&str> = cfg.world.expressions.iter().map(|s| s.as_str()).collect();
        let k = cfg.num_expressions();
        let m = cfg.num_aus();
        let d = cfg.backbone.d;
        let include = |task: Task| solo.is_none() || solo == Some(task);

        let mut dpm_state = None;
        match cfg.arch {
            Arch::Stl | Arch::Baseline => {
                if include(Task::Expression) {
                    store.register(
                        HEAD_EXP_W,
                        ParamGroup::Head,
                        seeded_gaussian(seed, HEAD_EXP_W, d, k, 0.02),
                        true,
                    )?;
                    store.register(HEAD_EXP_B, ParamGroup::Head, Tensor::zeros(1, k), true)?;
                }
                if include(Task::Au) {
                    store.register(
                        HEAD_AU_W,
                        ParamGroup::Head,
                        seeded_gaussian(seed, HEAD_AU_W, d, m, 0.02),
                        true,
                    )?;
                    store.register(HEAD_AU_B, ParamGroup::Head, Tensor::zeros(1, m), true)?;
                }
            }
            Arch::Tsp | Arch::TspDpm => {
                if cfg.context_length > 0 {
                    for (task, name) in [(Task::Expression, CTX_EXP), (Task::Au, CTX_AU)] {
                        if include(task) {
                            store.register(
                                name,
                                ParamGroup::Head,
                                seeded_gaussian(seed, name, cfg.context_length, cfg.d_tok, 0.02),
                                true,
                            )?;
                        }
                    }
                }
                if cfg.arch == Arch::TspDpm {
                    let state = match cfg.dpm_init {
                        DpmInit::Prior => {
                            let prior = build_prior_matrix(&table, &expr_refs, &cfg.world.au_ids)?;
                            let w0 = normalize_rows(&prior);
                            dpm::init_prior(
                                &mut store, &w0, cfg.dpm_mode, cfg.tau_m, cfg.alpha0, cfg.beta0,
                                k, m,
                            )?
                        }
                        DpmInit::Random => dpm::init_random(
                            &mut store, seed, cfg.dpm_mode, cfg.tau_m, cfg.alpha0, cfg.beta0, k, m,
                        )?,
                    };
                    dpm_state = Some(state);
                }
            }
        }

        let text = SurrogateEncoder::new(seed, cfg.d_tok, d, DEFAULT_VOCAB, DEFAULT_MAX_TOKENS);
        let expr_templates = cfg
            .world
            .expressions
            .iter()
            .map(|name| {
                let text = description_variant(&table, name, cfg.prompt_style)?;
                tokenize(&text, DEFAULT_VOCAB, DEFAULT_MAX_TOKENS)
            })
            .collect::<Result<Vec<_>>>()?;
        let au_templates = cfg
            .world
            .au_ids
            .iter()
            .map(|&id| {
                let desc = &table.au(id)?.description;
                tokenize(
                    &format!("a facial action of {desc}"),
                    DEFAULT_VOCAB,
                    DEFAULT_MAX_TOKENS,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let expr_weights = idf_weights(&expr_templates);
        let au_weights = idf_weights(&au_templates);

        Ok(Model {
            cfg,
            store,
            dpm: dpm_state,
            text,
            solo,
            moe_load: MoeLoad::default(),
            expr_templates,
            au_templates,
            expr_weights,
            au_weights,
        })
    }

    fn include(&self, task: Task) -> bool {
        self.solo.is_none() || self.solo == Some(task)
    }

    fn uses_prototypes(&self) -> bool {
        matches!(self.cfg.arch, Arch::Tsp | Arch::TspDpm)
    }

    /// Encode both prototype stacks (and apply DPM enhancement when
    /// configured). Returns `(T_exp, T_au)` tape vars.
    pub fn prototype_vars(
        &self,
        tape: &mut Tape,
        leaves: &mut Leaves,
    ) -> Result<(VarId, VarId)> {
        let ctx_for = |tape: &mut Tape, leaves: &mut Leaves, name: &str| -> Result<Option<VarId>> {
            if self.cfg.context_length == 0 || self.store.id(name).is_none() {
                Ok(None)
            } else {
                leaves.var(tape, &self.store, name).map(Some)
            }
        };
        let ctx_exp = ctx_for(tape, leaves, CTX_EXP)?;
        let ctx_au = ctx_for(tape, leaves, CTX_AU)?;
        let specs = |templates: &[TokenSequence],
                     weights: &[Vec<f64>],
                     ctx: Option<VarId>,
                     task: Task| {
            templates
                .iter()
                .zip(weights)
                .map(|(t, w)| PromptSpec {
                    context: ctx,
                    template: t.clone(),
                    weights: Some(w.clone()),
                    task,
                })
                .collect::<Vec<_>>()
        };
        let t_exp = encode_prototypes(
            tape,
            &specs(&self.expr_templates, &self.expr_weights, ctx_exp, Task::Expression),
            &self.text,
        )?;
        let t_au = encode_prototypes(
            tape,
            &specs(&self.au_templates, &self.au_weights, ctx_au, Task::Au),
            &self.text,
        )?;
        match &self.dpm {
            Some(state) => {
                let fwd = dpm::enhanced_prototypes(tape, &self.store, state, t_exp, t_au)?;
                for (name, var) in fwd.leaves {
                    if !leaves.pairs.iter().any(|(n, _)| n == name) {
                        leaves.pairs.push((name.to_string(), var));
                    }
                }
                Ok((fwd.enhanced_exp, fwd.enhanced_au))
            }
            None => Ok((t_exp, t_au)),
        }
    }

    /// Shared trunk + task temporal block over a batch of clips.
    fn embed_clips(
        &mut self,
        tape: &mut Tape,
        leaves: &mut Leaves,
        clips: &[Tensor],
        task: Task,
    ) -> Result<VarId> {
        if clips.is_empty() {
            return Err(Error::InvalidArgument("empty clip batch".into()));
        }
        let n = clips[0].rows();
        let stacked = Tensor::from_rows(
            &clips
                .iter()
                .flat_map(|c| (0..c.rows()).map(|r| c.row(r).to_vec()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        )?;
        let store = &self.store;
        let features = encode_frames(
            tape,
            store,
            leaves,
            &self.cfg.backbone,
            &stacked,
            &mut self.moe_load,
        )?;
        let mut rows = Vec::with_capacity(clips.len());
        for (b, clip) in clips.iter().enumerate() {
            if clip.rows() != n {
                return Err(Error::Shape("ragged clip batch".into()));
            }
            let f = tape.slice_rows(features, b * n, n);
            let z = match task {
                Task::Expression => temporal_expression(tape, store, leaves, &self.cfg.backbone, f)?,
                Task::Au => temporal_au(tape, store, leaves, &self.cfg.backbone, f)?,
            };
            rows.push(z);
        }
        Ok(tape.concat_rows(&rows))
    }

    fn task_scores(
        &mut self,
        tape: &mut Tape,
        leaves: &mut Leaves,
        clips: &[Tensor],
        task: Task,
        protos: Option<(VarId, VarId)>,
    ) -> Result<VarId> {
        let z = self.embed_clips(tape, leaves, clips, task)?;
        if self.uses_prototypes() {
            let (t_exp, t_au) = protos.expect("prototype archs compute prototypes first");
            let t = match task {
                Task::Expression => t_exp,
                Task::Au => t_au,
            };
            similarity_scores(tape, z, t, self.cfg.tau)
        } else {
            let (wn, bn) = match task {
                Task::Expression => (HEAD_EXP_W, HEAD_EXP_B),
                Task::Au => (HEAD_AU_W, HEAD_AU_B),
            };
            let w = leaves.var(tape, &self.store, wn)?;
            let b = leaves.var(tape, &self.store, bn)?;
            Ok(baseline_logits(tape, z, w, b))
        }
    }

    fn named_non_finite(&self, tape: &Tape, leaves: &Leaves) -> Error {
        match tape.first_non_finite() {
            Some(v) => {
                let name = leaves
                    .pairs
                    .iter()
                    .find(|(_, var)| *var == v)
                    .map(|(n, _)| n.clone())
                    .unwrap_or_else(|| format!("tape node {}", v.index()));
                Error::NonFinite(name)
            }
            None => Error::NonFinite("loss".into()),
        }
    }

    /// One joint forward/backward pass. Gradients are zeroed first and
    /// left accumulated in the store for the optimizer.
    pub fn step(
        &mut self,
        fe_batch: Option<(&[Tensor], &Tensor)>,
        au_batch: Option<(&[Tensor], &Tensor)>,
    ) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let mut leaves = Leaves::new();
        self.store.zero_grads();

        let protos = if self.uses_prototypes() {
            Some(self.prototype_vars(&mut tape, &mut leaves)?)
        } else {
            None
        };

        let mut l_dfe = None;
        if let Some((clips, labels)) = fe_batch {
            if !self.include(Task::Expression) {
                return Err(Error::Config("expression batch on an AU-only model".into()));
            }
            let s = self.task_scores(&mut tape, &mut leaves, clips, Task::Expression, protos)?;
            l_dfe = Some(dfer_loss(&mut tape, s, labels)?);
        }
        let mut l_au = None;
        if let Some((clips, labels)) = au_batch {
            if !self.include(Task::Au) {
                return Err(Error::Config("AU batch on an expression-only model".into()));
            }
            let s = self.task_scores(&mut tape, &mut leaves, clips, Task::Au, protos)?;
            l_au = Some(au_loss(&mut tape, s, labels)?);
        }

        let loss = match (l_dfe, l_au) {
            (Some(a), Some(b)) => total_loss(&mut tape, a, b, self.cfg.lambda)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => {
                return Err(Error::InvalidArgument("step needs at least one batch".into()))
            }
        };

        let total = tape.value(loss).data()[0];
        if !total.is_finite() {
            return Err(self.named_non_finite(&tape, &leaves));
        }
        let grads = tape.backward(loss);
        leaves.accumulate(&grads, &mut self.store)?;

        Ok(StepLosses {
            total,
            dfe: l_dfe.map(|v| tape.value(v).data()[0]),
            au: l_au.map(|v| tape.value(v).data()[0]),
        })
    }

    /// Forward-only scores for a dataset, in chunks.
    pub fn eval_scores(&mut self, data: &ClipDataset) -> Result<Tensor> {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(data.len());
        for chunk in data.clips.chunks(64) {
            let mut tape = Tape::new();
            let mut leaves = Leaves::new();
            let protos = if self.uses_prototypes() {
                Some(self.prototype_vars(&mut tape, &mut leaves)?)
            } else {
                None
            };
            let s = self.task_scores(&mut tape, &mut leaves, chunk, data.task, protos)?;
            let v = tape.value(s);
            for r in 0..v.rows() {
                rows.push(v.row(r).to_vec());
            }
        }
        Tensor::from_rows(&rows)
    }

    /// Score both test splits into one combined report. A solo model
    /// fills only its own task's fields.
    pub fn evaluate(&mut self, world: &SyntheticWorld) -> Result<MetricsReport> {
        let k = self.cfg.num_expressions();
        let mut report = MetricsReport {
            per_au_f1: Vec::new(),
            avg_f1: 0.0,
            uar: 0.0,
            war: 0.0,
            confusion: Vec::new(),
        };
        if self.include(Task::Expression) {
            let scores = self.eval_scores(&world.fe_test)?;
            let pred = predict_expression(&scores);
            let truth: Vec<usize> = (0..world.fe_test.len())
                .map(|i| {
                    world
                        .fe_test
                        .labels
                        .row(i)
                        .iter()
                        .position(|&v| v == 1.0)
                        .expect("one-hot label")
                })
                .collect();
            let (uar, war) = uar_war(&pred, &truth, k)?;
            report.uar = uar;
            report.war = war;
            report.confusion = confusion(&pred, &truth, k)?;
        }
        if self.include(Task::Au) {
            let scores = self.eval_scores(&world.au_test)?;
            let (per, avg) = f1_scores(&predict_au(&scores), &world.au_test.labels)?;
            report.per_au_f1 = per;
            report.avg_f1 = avg;
        }
        Ok(report)
    }

    /// Current parameter values as a checkpoint file.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let blobs: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        write_container(path, CKPT_MAGIC, &blobs)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let blobs = read_container(path, CKPT_MAGIC)?;
        for (name, value) in blobs {
            let p = self.store.by_name_mut(&name)?;
            if !p.value.same_shape(&value) {
                return Err(Error::Shape(format!("checkpoint blob `{name}`")));
            }
            p.value = value;
        }
        Ok(())
    }
}

/// Finite-difference verification of the full joint loss against the
/// analytic gradients of every trainable parameter, on a fixed batch
/// drawn from the world's train splits.
pub fn grad_check_full(
    cfg: &ExperimentConfig,
    world: &SyntheticWorld,
    fe_count: usize,
    au_count: usize,
    h: f64,
) -> Result<GradCheckReport> {
    let mut model = Model::new(cfg.clone(), None)?;
    {
        // move the gate off its zero init so the router and expert
        // paths carry gradient signal during the check
        let g = model.store.by_name_mut(crate::backbone::GAMMA)?;
        let (r, c) = (g.value.rows(), g.value.cols());
        g.value = seeded_gaussian(cfg.seed, "gradcheck.gamma", r, c, 0.05);
    }
    let take = |d: &ClipDataset, n: usize| -> Result<(Vec<Tensor>, Tensor)> {
        let n = n.min(d.len()).max(1);
        let labels =
            Tensor::from_rows(&(0..n).map(|i| d.labels.row(i).to_vec()).collect::<Vec<_>>())?;
        Ok((d.clips[..n].to_vec(), labels))
    };
    let (fe_clips, fe_labels) = take(&world.fe_train, fe_count)?;
    let (au_clips, au_labels) = take(&world.au_train, au_count)?;
    let mut store = std::mem::replace(&mut model.store, ParamStore::new());
    let report = grad_check(
        &mut store,
        |s, _| {
            std::mem::swap(&mut model.store, s);
            let r = model.step(Some((&fe_clips, &fe_labels)), Some((&au_clips, &au_labels)));
            std::mem::swap(&mut model.store, s);
            r.map(|l| l.total)
        },
        h,
    );
    model.store = store;
    report
}
