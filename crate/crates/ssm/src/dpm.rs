//! Dynamic prior mapping: bidirectional learnable matrices between the
//! AU and expression label spaces, mixed through a temperature row
//! softmax and injected into the prototypes as a residual update.
//!
//! Besides the learnable dual form, this module carries the replacement
//! variants used by the ablations: frozen matrices, a transpose-tied
//! single matrix, an unconstrained linear map, a two-layer MLP map, and
//! a disabled mode whose mapped output is the zero matrix.

use crate::error::{Error, Result};
use crate::numerics::{seeded_gaussian, ParamGroup, ParamStore, Tape, Tensor, VarId};

/// How the two mapping matrices are parameterized and trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpmMode {
    LearnableDual,
    Frozen,
    TransposeTied,
    Linear,
    Mlp,
    None,
}

/// How the mapping matrices are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpmInit {
    Prior,
    Random,
}

pub const W_AE: &str = "dpm.w_ae";
pub const W_EA: &str = "dpm.w_ea";
pub const ALPHA: &str = "dpm.alpha";
pub const BETA: &str = "dpm.beta";
pub const MLP_AE_W1: &str = "dpm.mlp_ae.w1";
pub const MLP_AE_W2: &str = "dpm.mlp_ae.w2";
pub const MLP_EA_W1: &str = "dpm.mlp_ea.w1";
pub const MLP_EA_W2: &str = "dpm.mlp_ea.w2";

const RANDOM_STD: f64 = 0.02;

/// Registered DPM configuration; the parameters themselves live in the
/// [`ParamStore`] under the `dpm.*` names.
#[derive(Clone, Copy, Debug)]
pub struct DpmState {
    pub mode: DpmMode,
    pub tau_m: f64,
    pub num_expressions: usize,
    pub num_aus: usize,
}

/// Register DPM parameters initialized from the normalized prior `w0`
/// (a K x M output of [`crate::facs::normalize_rows`]). The reverse
/// matrix starts as the exact transpose; `alpha`/`beta` start at the
/// given coefficients and stay learnable in every mode.
pub fn init_prior(
    store: &mut ParamStore,
    w0: &Tensor,
    mode: DpmMode,
    tau_m: f64,
    alpha0: f64,
    beta0: f64,
    k: usize,
    m: usize,
) -> Result<DpmState> {
    if w0.rows() != k || w0.cols() != m {
        return Err(Error::Config(format!(
            "prior shape {}x{} does not match configured K={k}, M={m}",
            w0.rows(),
            w0.cols()
        )));
    }
    register_coeffs(store, alpha0, beta0)?;
    match mode {
        DpmMode::LearnableDual | DpmMode::Frozen | DpmMode::Linear => {
            let trainable = mode != DpmMode::Frozen;
            store.register(W_AE, ParamGroup::Head, w0.clone(), trainable)?;
            store.register(W_EA, ParamGroup::Head, w0.transpose(), trainable)?;
        }
        DpmMode::TransposeTied => {
            store.register(W_AE, ParamGroup::Head, w0.clone(), true)?;
        }
        DpmMode::Mlp => register_mlp(store, 0, k, m)?,
        DpmMode::None => {}
    }
    Ok(DpmState { mode, tau_m, num_expressions: k, num_aus: m })
}

/// Register DPM parameters with independent Gaussian draws (mean 0,
/// std 0.02). The reverse matrix is *not* the transpose of the forward.
pub fn init_random(
    store: &mut ParamStore,
    seed: u64,
    mode: DpmMode,
    tau_m: f64,
    alpha0: f64,
    beta0: f64,
    k: usize,
    m: usize,
) -> Result<DpmState> {
    register_coeffs(store, alpha0, beta0)?;
    match mode {
        DpmMode::LearnableDual | DpmMode::Frozen | DpmMode::Linear => {
            let trainable = mode != DpmMode::Frozen;
            store.register(
                W_AE,
                ParamGroup::Head,
                seeded_gaussian(seed, W_AE, k, m, RANDOM_STD),
                trainable,
            )?;
            store.register(
                W_EA,
                ParamGroup::Head,
                seeded_gaussian(seed, W_EA, m, k, RANDOM_STD),
                trainable,
            )?;
        }
        DpmMode::TransposeTied => {
            store.register(
                W_AE,
                ParamGroup::Head,
                seeded_gaussian(seed, W_AE, k, m, RANDOM_STD),
                true,
            )?;
        }
        DpmMode::Mlp => register_mlp(store, seed, k, m)?,
        DpmMode::None => {}
    }
    Ok(DpmState { mode, tau_m, num_expressions: k, num_aus: m })
}

fn register_coeffs(store: &mut ParamStore, alpha0: f64, beta0: f64) -> Result<()> {
    store.register(ALPHA, ParamGroup::Head, Tensor::scalar(alpha0), true)?;
    store.register(BETA, ParamGroup::Head, Tensor::scalar(beta0), true)?;
    Ok(())
}

fn register_mlp(store: &mut ParamStore, seed: u64, k: usize, m: usize) -> Result<()> {
    let hidden = k.max(m);
    store.register(
        MLP_AE_W1,
        ParamGroup::Head,
        seeded_gaussian(seed, MLP_AE_W1, hidden, m, RANDOM_STD),
        true,
    )?;
    store.register(
        MLP_AE_W2,
        ParamGroup::Head,
        seeded_gaussian(seed, MLP_AE_W2, k, hidden, RANDOM_STD),
        true,
    )?;
    store.register(
        MLP_EA_W1,
        ParamGroup::Head,
        seeded_gaussian(seed, MLP_EA_W1, hidden, k, RANDOM_STD),
        true,
    )?;
    store.register(
        MLP_EA_W2,
        ParamGroup::Head,
        seeded_gaussian(seed, MLP_EA_W2, m, hidden, RANDOM_STD),
        true,
    )?;
    Ok(())
}

/// Residual update: `T + coeff * T_mapped`. Base prototypes are encoded
/// fresh on every forward pass, so nothing accumulates across steps.
pub fn enhance(tape: &mut Tape, t: VarId, t_mapped: VarId, coeff: VarId) -> VarId {
    let scaled = tape.mul_scalar_var(t_mapped, coeff);
    tape.add(t, scaled)
}

fn leaf_param(tape: &mut Tape, store: &ParamStore, name: &str) -> Result<VarId> {
    let p = store.by_name(name)?;
    Ok(tape.leaf(p.value.clone(), p.trainable))
}

/// Tape handles for this forward pass, keyed by parameter name so the
/// caller can route gradients back into the store.
pub struct DpmForward {
    pub enhanced_exp: VarId,
    pub enhanced_au: VarId,
    /// (parameter name, leaf var) pairs inserted for this pass.
    pub leaves: Vec<(&'static str, VarId)>,
}

/// Compute the enhanced prototype pair for the configured mode.
pub fn enhanced_prototypes(
    tape: &mut Tape,
    store: &ParamStore,
    state: &DpmState,
    t_exp: VarId,
    t_au: VarId,
) -> Result<DpmForward> {
    if state.mode == DpmMode::None {
        let k = tape.value(t_exp).rows();
        let m = tape.value(t_au).rows();
        let d = tape.value(t_exp).cols();
        let zero_exp = tape.constant(Tensor::zeros(k, d));
        let zero_au = tape.constant(Tensor::zeros(m, d));
        let one = tape.constant(Tensor::scalar(1.0));
        let enhanced_exp = enhance(tape, t_exp, zero_exp, one);
        let enhanced_au = enhance(tape, t_au, zero_au, one);
        return Ok(DpmForward { enhanced_exp, enhanced_au, leaves: Vec::new() });
    }

    let alpha = leaf_param(tape, store, ALPHA)?;
    let beta = leaf_param(tape, store, BETA)?;
    let mut leaves = vec![(ALPHA, alpha), (BETA, beta)];

    let (mapped_exp, mapped_au) = match state.mode {
        DpmMode::LearnableDual | DpmMode::Frozen => {
            let w_ae = leaf_param(tape, store, W_AE)?;
            let w_ea = leaf_param(tape, store, W_EA)?;
            leaves.push((W_AE, w_ae));
            leaves.push((W_EA, w_ea));
            let mix_ae = tape.row_softmax(w_ae, state.tau_m)?;
            let mix_ea = tape.row_softmax(w_ea, state.tau_m)?;
            (tape.matmul(mix_ae, t_au), tape.matmul(mix_ea, t_exp))
        }
        DpmMode::TransposeTied => {
            let w_ae = leaf_param(tape, store, W_AE)?;
            leaves.push((W_AE, w_ae));
            let w_ea = tape.transpose(w_ae);
            let mix_ae = tape.row_softmax(w_ae, state.tau_m)?;
            let mix_ea = tape.row_softmax(w_ea, state.tau_m)?;
            (tape.matmul(mix_ae, t_au), tape.matmul(mix_ea, t_exp))
        }
        DpmMode::Linear => {
            // unconstrained matrix product, no softmax
            let w_ae = leaf_param(tape, store, W_AE)?;
            let w_ea = leaf_param(tape, store, W_EA)?;
            leaves.push((W_AE, w_ae));
            leaves.push((W_EA, w_ea));
            (tape.matmul(w_ae, t_au), tape.matmul(w_ea, t_exp))
        }
        DpmMode::Mlp => {
            let ae1 = leaf_param(tape, store, MLP_AE_W1)?;
            let ae2 = leaf_param(tape, store, MLP_AE_W2)?;
            let ea1 = leaf_param(tape, store, MLP_EA_W1)?;
            let ea2 = leaf_param(tape, store, MLP_EA_W2)?;
            leaves.extend([(MLP_AE_W1, ae1), (MLP_AE_W2, ae2), (MLP_EA_W1, ea1), (MLP_EA_W2, ea2)]);
            let h_ae = tape.matmul(ae1, t_au);
            let h_ae = tape.tanh(h_ae);
            let h_ea = tape.matmul(ea1, t_exp);
            let h_ea = tape.tanh(h_ea);
            (tape.matmul(ae2, h_ae), tape.matmul(ea2, h_ea))
        }
        DpmMode::None => unreachable!(),
    };

    let enhanced_exp = enhance(tape, t_exp, mapped_exp, alpha);
    let enhanced_au = enhance(tape, t_au, mapped_au, beta);
    Ok(DpmForward { enhanced_exp, enhanced_au, leaves })
}
