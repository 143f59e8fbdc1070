//! Shared visual trunk at desk scale: a frozen affine stem lifts raw
//! frame observations into the working dimension, one MoE-augmented
//! residual block refines them, and two task-specific single-layer
//! attention blocks aggregate over time (mean pool for expressions,
//! center frame for AUs).

use crate::error::{Error, Result};
use crate::numerics::{seeded_gaussian, Leaves, ParamGroup, ParamStore, Tape, Tensor, VarId};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_raw: usize,
    pub d: usize,
    pub d_hidden: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Add sinusoidal frame positions before the temporal blocks.
    pub positional: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_raw: 64,
            d: 64,
            d_hidden: 32,
            num_experts: 4,
            top_k: 2,
            positional: true,
        }
    }
}

pub const STEM_W: &str = "trunk.stem.w";
pub const STEM_B: &str = "trunk.stem.b";
pub const ROUTER: &str = "trunk.moe.router";
pub const GAMMA: &str = "trunk.moe.gamma";

pub fn expert_param(owner: &str, field: &str) -> String {
    format!("trunk.moe.{owner}.{field}")
}

pub fn temporal_param(task: &str, field: &str) -> String {
    format!("temporal.{task}.{field}")
}

const TEMPORAL_FIELDS: [&str; 8] = ["wq", "wk", "wv", "wo", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"];

/// Register the trunk (stem + MoE block) and both temporal blocks.
/// The stem and the shared expert are frozen; everything else trains.
pub fn register_backbone(store: &mut ParamStore, seed: u64, cfg: &BackboneConfig) -> Result<()> {
    if cfg.top_k < 1 || cfg.top_k > cfg.num_experts {
        return Err(Error::Config(format!(
            "top_k must lie in [1, {}], got {}",
            cfg.num_experts, cfg.top_k
        )));
    }
    let (dr, d, h) = (cfg.d_raw, cfg.d, cfg.d_hidden);
    // when the raw features already live at model width, the frozen stem
    // passes them through unchanged; otherwise it is a frozen random lift
    let stem = if dr == d {
        let mut eye = Tensor::zeros(d, d);
        for i in 0..d {
            eye.set(i, i, 1.0);
        }
        eye
    } else {
        seeded_gaussian(seed, STEM_W, dr, d, 1.0 / (dr as f64).sqrt())
    };
    store.register(STEM_W, ParamGroup::Encoder, stem, false)?;
    store.register(STEM_B, ParamGroup::Encoder, Tensor::zeros(1, d), false)?;
    store.register(
        ROUTER,
        ParamGroup::Encoder,
        seeded_gaussian(seed, ROUTER, d, cfg.num_experts, 0.02),
        true,
    )?;
    store.register(GAMMA, ParamGroup::Encoder, Tensor::zeros(1, d), true)?;

    let mut owners: Vec<(String, bool)> = vec![("shared".to_string(), false)];
    for j in 0..cfg.num_experts {
        owners.push((format!("expert{j}"), true));
    }
    for (owner, trainable) in owners {
        for (field, rows, cols) in
            [("w1", d, h), ("b1", 1, h), ("w2", h, d), ("b2", 1, d)]
        {
            let name = expert_param(&owner, field);
            let init = if field.starts_with('b') {
                Tensor::zeros(rows, cols)
            } else {
                seeded_gaussian(seed, &name, rows, cols, 0.02)
            };
            store.register(&name, ParamGroup::Encoder, init, trainable)?;
        }
    }

    let attn_std = 1.0 / (d as f64).sqrt();
    for task in ["exp", "au"] {
        for field in TEMPORAL_FIELDS {
            let name = temporal_param(task, field);
            let (rows, cols, std) = match field {
                "ffn.w1" => (d, h, 0.02),
                "ffn.b1" => (1, h, 0.0),
                "ffn.w2" => (h, d, 0.02),
                "ffn.b2" => (1, d, 0.0),
                _ => (d, d, attn_std),
            };
            let init = if std == 0.0 {
                Tensor::zeros(rows, cols)
            } else {
                seeded_gaussian(seed, &name, rows, cols, std)
            };
            store.register(&name, ParamGroup::Head, init, true)?;
        }
    }
    Ok(())
}

/// Per-expert evaluation counts for the sparsity contract.
#[derive(Clone, Debug, Default)]
pub struct MoeLoad {
    pub per_expert: Vec<usize>,
    pub tokens: usize,
}

impl MoeLoad {
    pub fn total_evaluations(&self) -> usize {
        self.per_expert.iter().sum()
    }
}

fn two_layer(
    tape: &mut Tape,
    x: VarId,
    w1: VarId,
    b1: VarId,
    w2: VarId,
    b2: VarId,
    tanh_hidden: bool,
) -> VarId {
    let h = tape.matmul(x, w1);
    let mut h = tape.add_row_broadcast(h, b1);
    if tanh_hidden {
        h = tape.tanh(h);
    }
    let out = tape.matmul(h, w2);
    tape.add_row_broadcast(out, b2)
}

/// One MoE sublayer over a token matrix (rows = tokens). Follows the
/// layer-norm → route → top-k → renormalize → fuse pipeline; the
/// private experts and the frozen shared expert are linear two-layer
/// maps. Returns the sublayer output (residual added by the caller).
pub fn moe_forward(
    tape: &mut Tape,
    store: &ParamStore,
    leaves: &mut Leaves,
    cfg: &BackboneConfig,
    x: VarId,
    load: &mut MoeLoad,
) -> Result<VarId> {
    let n = tape.value(x).rows();
    let router = leaves.var(tape, store, ROUTER)?;
    let gamma = leaves.var(tape, store, GAMMA)?;
    let sw1 = leaves.var(tape, store, &expert_param("shared", "w1"))?;
    let sb1 = leaves.var(tape, store, &expert_param("shared", "b1"))?;
    let sw2 = leaves.var(tape, store, &expert_param("shared", "w2"))?;
    let sb2 = leaves.var(tape, store, &expert_param("shared", "b2"))?;

    let xt = tape.row_layer_norm(x)?;
    let logits = tape.matmul(xt, router);
    let shared_out = two_layer(tape, xt, sw1, sb1, sw2, sb2, false);

    if load.per_expert.len() != cfg.num_experts {
        load.per_expert = vec![0; cfg.num_experts];
    }
    load.tokens += n;

    let mut expert_vars: Vec<Option<[VarId; 4]>> = vec![None; cfg.num_experts];
    let mut token_rows = Vec::with_capacity(n);
    for i in 0..n {
        // top_k router scores for this token; selection is treated as a
        // constant, gradients flow through the renormalized gates
        let row = tape.value(logits).row(i).to_vec();
        let mut order: Vec<usize> = (0..cfg.num_experts).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let selected = &order[..cfg.top_k];

        let logit_row = tape.slice_rows(logits, i, 1);
        let picked = tape.gather_cols(logit_row, selected);
        // softmax over the selected logits = full softmax restricted to
        // the selection and renormalized to sum 1
        let gates = tape.row_softmax(picked, 1.0)?;

        let token = tape.slice_rows(xt, i, 1);
        let mut sum: Option<VarId> = None;
        for (pos, &j) in selected.iter().enumerate() {
            let [w1, b1, w2, b2] = match expert_vars[j] {
                Some(vars) => vars,
                None => {
                    let owner = format!("expert{j}");
                    let vars = [
                        leaves.var(tape, store, &expert_param(&owner, "w1"))?,
                        leaves.var(tape, store, &expert_param(&owner, "b1"))?,
                        leaves.var(tape, store, &expert_param(&owner, "w2"))?,
                        leaves.var(tape, store, &expert_param(&owner, "b2"))?,
                    ];
                    expert_vars[j] = Some(vars);
                    vars
                }
            };
            let out = two_layer(tape, token, w1, b1, w2, b2, false);
            load.per_expert[j] += 1;
            let gate = tape.slice_cols(gates, pos, 1);
            let weighted = tape.mul_scalar_var(out, gate);
            sum = Some(match sum {
                Some(s) => tape.add(s, weighted),
                None => weighted,
            });
        }
        token_rows.push(sum.expect("top_k >= 1"));
    }

    let private = tape.concat_rows(&token_rows);
    let ones = tape.constant(Tensor::ones(n, 1));
    let gamma_rows = tape.matmul(ones, gamma);
    let gated = tape.mul_elem(gamma_rows, private);
    Ok(tape.add(shared_out, gated))
}

/// Stem + MoE residual block over a stack of frames (rows = frames).
pub fn encode_frames(
    tape: &mut Tape,
    store: &ParamStore,
    leaves: &mut Leaves,
    cfg: &BackboneConfig,
    frames: &Tensor,
    load: &mut MoeLoad,
) -> Result<VarId> {
    if frames.cols() != cfg.d_raw {
        return Err(Error::Config(format!(
            "raw frame width {} does not match configured d_raw {}",
            frames.cols(),
            cfg.d_raw
        )));
    }
    let w = leaves.var(tape, store, STEM_W)?;
    let b = leaves.var(tape, store, STEM_B)?;
    let input = tape.constant(frames.clone());
    let lifted = tape.matmul(input, w);
    let x = tape.add_row_broadcast(lifted, b);
    let moe = moe_forward(tape, store, leaves, cfg, x, load)?;
    Ok(tape.add(x, moe))
}

/// Sinusoidal frame positions, the standard interleaved construction.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

fn temporal_block(
    tape: &mut Tape,
    store: &ParamStore,
    leaves: &mut Leaves,
    cfg: &BackboneConfig,
    task: &str,
    features: VarId,
) -> Result<VarId> {
    let n = tape.value(features).rows();
    let d = tape.value(features).cols();
    if d != cfg.d {
        return Err(Error::Config(format!(
            "temporal input width {d} does not match configured d {}",
            cfg.d
        )));
    }
    let mut v = |tape: &mut Tape, field: &str| leaves.var(tape, store, &temporal_param(task, field));
    let wq = v(tape, "wq")?;
    let wk = v(tape, "wk")?;
    let wv = v(tape, "wv")?;
    let wo = v(tape, "wo")?;
    let fw1 = v(tape, "ffn.w1")?;
    let fb1 = v(tape, "ffn.b1")?;
    let fw2 = v(tape, "ffn.w2")?;
    let fb2 = v(tape, "ffn.b2")?;

    let x = if cfg.positional {
        let pos = tape.constant(positional_encoding(n, d));
        tape.add(features, pos)
    } else {
        features
    };
    let xt = tape.row_layer_norm(x)?;
    let q = tape.matmul(xt, wq);
    let k = tape.matmul(xt, wk);
    let val = tape.matmul(xt, wv);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scaled = tape.scale_const(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.row_softmax(scaled, 1.0)?;
    let ctx = tape.matmul(attn, val);
    let proj = tape.matmul(ctx, wo);
    let h = tape.add(x, proj);

    let ht = tape.row_layer_norm(h)?;
    let ffn = two_layer(tape, ht, fw1, fb1, fw2, fb2, true);
    Ok(tape.add(h, ffn))
}

/// Attend over the clip, then mean-pool into one clip-level vector.
pub fn temporal_expression(
    tape: &mut Tape,
    store: &ParamStore,
    leaves: &mut Leaves,
    cfg: &BackboneConfig,
    features: VarId,
) -> Result<VarId> {
    let out = temporal_block(tape, store, leaves, cfg, "exp", features)?;
    Ok(tape.mean_rows(out))
}

/// Attend over the clip, then return the center frame, index ⌊n/2⌋
/// counting from zero.
pub fn temporal_au(
    tape: &mut Tape,
    store: &ParamStore,
    leaves: &mut Leaves,
    cfg: &BackboneConfig,
    features: VarId,
) -> Result<VarId> {
    let n = tape.value(features).rows();
    let out = temporal_block(tape, store, leaves, cfg, "au", features)?;
    Ok(tape.slice_rows(out, n / 2, 1))
}
