//! Full denoiser `ε_θ(z_t, t, y)`: stem, down block, mid block, up block.
//!
//! ```text
//! z_t ─patchify─► P ─patch_in + pos + time[t]─► h0
//! h0 ─MoE cross-attn (separation layer)─► h1 ─MoE FF─► h2
//! h2 ─merge 2×2─► down ─► m_pre ─MoE cross-attn─► g1 ─(+MLP)─► m_post
//! m_post ─up─► split 2×2 (+ h2 skip) ─► u0 ─MoE cross-attn─► u1 ─MoE FF─► u2
//! u2 ─patch_out─► unpatchify ─► ε̂
//! ```

use super::gating::GateWeights;
use super::layers::{
    attn_aggregate, attn_backward, attn_single, ff_aggregate, ff_backward, mlp_backward, mlp_forward, AttnCache,
    MlpCache,
};
use super::weights::{AttnLayer, FfLayer, Geometry, Params, UNetWeights};
use crate::diffusion::{ldm_loss, ldm_loss_grad, LatentState};
use crate::error::{EmoeError, Result};
use crate::math::Tensor;
use crate::text::PromptEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Aggregate,
    /// Split into one path per expert at the first down-block cross-attention;
    /// every later MoE layer aggregates within its path.
    SeparateFirst,
}

/// Mid-block latents `m^pre` and `m^post`, laid out `d_model × mid_h × mid_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct MidLatent {
    pub pre: Tensor,
    pub post: Tensor,
}

/// One entry per path: a single entry in aggregate mode, `M` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub eps: Vec<Tensor>,
    pub mid: Vec<MidLatent>,
}

/// `out[o] = src[index[o]]`.
fn gather(src: &[f64], index: &[usize]) -> Vec<f64> {
    index.iter().map(|&i| src[i]).collect()
}

/// Adjoint of [`gather`]: `out[index[o]] = src[o]`.
fn scatter(src: &[f64], index: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (v, &i) in src.iter().zip(index) {
        out[i] = *v;
    }
    out
}

/// For each patch-token feature, its flat index in the `C×H×W` latent.
fn patch_index(g: &Geometry) -> Vec<usize> {
    let (gh, gw) = g.grid();
    let p = g.patch;
    let mut idx = Vec::with_capacity(g.latent_len());
    for gi in 0..gh {
        for gj in 0..gw {
            for c in 0..g.channels {
                for di in 0..p {
                    for dj in 0..p {
                        idx.push(c * g.height * g.width + (gi * p + di) * g.width + gj * p + dj);
                    }
                }
            }
        }
    }
    idx
}

/// For each merged mid-token feature, its flat index in the down-grid tokens.
fn merge_index(g: &Geometry) -> Vec<usize> {
    let (_, gw) = g.grid();
    let (mh, mw) = g.mid_grid();
    let d = g.d_model;
    let mut idx = Vec::with_capacity(g.tokens() * d);
    for mi in 0..mh {
        for mj in 0..mw {
            for a in 0..2 {
                for b in 0..2 {
                    let src = (2 * mi + a) * gw + 2 * mj + b;
                    idx.extend((0..d).map(|k| src * d + k));
                }
            }
        }
    }
    idx
}

pub fn patchify(g: &Geometry, z: &Tensor) -> Result<Tensor> {
    if z.shape() != g.latent_shape() {
        return Err(EmoeError::dim(format!(
            "latent shape {:?} does not match geometry {:?}",
            z.shape(),
            g.latent_shape()
        )));
    }
    Ok(Tensor::from_parts(
        vec![g.tokens(), g.patch_dim()],
        gather(z.data(), &patch_index(g)),
    ))
}

pub fn unpatchify(g: &Geometry, tokens: &Tensor) -> Tensor {
    Tensor::from_parts(g.latent_shape().to_vec(), scatter(tokens.data(), &patch_index(g)))
}

fn merge(g: &Geometry, h: &Tensor) -> Tensor {
    Tensor::from_parts(vec![g.mid_tokens(), 4 * g.d_model], gather(h.data(), &merge_index(g)))
}

fn split(g: &Geometry, m: &Tensor) -> Tensor {
    Tensor::from_parts(vec![g.tokens(), g.d_model], scatter(m.data(), &merge_index(g)))
}

/// `mid_tokens × d_model` → `d_model × mid_h × mid_w`.
fn mid_layout(g: &Geometry, m: &Tensor) -> Tensor {
    let (mh, mw) = g.mid_grid();
    let t = m.transpose().expect("mid tokens form a matrix");
    Tensor::from_parts(vec![g.d_model, mh, mw], t.into_data())
}

struct Stem {
    patches: Tensor,
    h0: Tensor,
}

fn stem(w: &UNetWeights, state: &LatentState) -> Result<Stem> {
    let g = &w.geometry;
    if state.t == 0 || state.t > g.timesteps {
        return Err(EmoeError::TimestepRange {
            t: state.t,
            steps: g.timesteps,
        });
    }
    let patches = patchify(g, &state.z)?;
    let mut h0 = w.backbone.patch_in.forward(&patches)?;
    h0.axpy(1.0, &w.backbone.pos)?;
    let h0 = h0.add_row(w.backbone.time.row(state.t - 1))?;
    Ok(Stem { patches, h0 })
}

struct Tail {
    ff_down: Vec<MlpCache>,
    merged: Tensor,
    m_pre: Tensor,
    a_mid: AttnCache,
    mid_mlp: MlpCache,
    m_post: Tensor,
    a_up: AttnCache,
    ff_up: Vec<MlpCache>,
    u2: Tensor,
    net: Tensor,
    eps: Tensor,
}

/// Everything after the separation layer, in aggregate mode.
fn tail(w: &UNetWeights, state: &LatentState, h1: Tensor, ctx: &PromptEmbedding, gates: &GateWeights) -> Result<Tail> {
    let g = &w.geometry;
    let b = &w.backbone;
    let (h2, ff_down) = ff_aggregate(&h1, &w.experts, FfLayer::Down, gates)?;
    let merged = merge(g, &h2);
    let m_pre = b.down.forward(&merged)?;
    let (g1, a_mid) = attn_aggregate(&m_pre, ctx, &w.experts, AttnLayer::Mid, gates)?;
    let (mlp_out, mid_mlp) = mlp_forward(&b.mid_mlp, &g1)?;
    let m_post = g1.add(&mlp_out)?;
    let up = b.up.forward(&m_post)?;
    let u0 = split(g, &up).add(&h2)?;
    let (u1, a_up) = attn_aggregate(&u0, ctx, &w.experts, AttnLayer::Up, gates)?;
    let (u2, ff_up) = ff_aggregate(&u1, &w.experts, FfLayer::Up, gates)?;
    let out = b.patch_out.forward(&u2)?;
    let net = unpatchify(g, &out);
    let (skip, gain) = (b.out_skip.data()[state.t - 1], b.out_gain.data()[state.t - 1]);
    let eps = net.zip_map(&state.z, |n, z| gain * n + skip * z)?;
    Ok(Tail {
        ff_down,
        merged,
        m_pre,
        a_mid,
        mid_mlp,
        m_post,
        a_up,
        ff_up,
        u2,
        net,
        eps,
    })
}

fn check_ctx(w: &UNetWeights, ctx: &PromptEmbedding) -> Result<()> {
    if ctx.tokens.rank() != 2 || ctx.tokens.shape()[1] != w.geometry.d_txt {
        return Err(EmoeError::dim(format!(
            "prompt embedding {:?} does not match d_txt = {}",
            ctx.tokens.shape(),
            w.geometry.d_txt
        )));
    }
    Ok(())
}

fn mid_of(g: &Geometry, t: &Tail) -> MidLatent {
    MidLatent {
        pre: mid_layout(g, &t.m_pre),
        post: mid_layout(g, &t.m_post),
    }
}

/// Evaluates the denoiser. The forward pass is a pure function of its
/// arguments.
pub fn unet_forward(
    weights: &UNetWeights,
    state: &LatentState,
    ctx: &PromptEmbedding,
    gates: &GateWeights,
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    check_ctx(weights, ctx)?;
    gates.check_experts(weights.num_experts())?;
    let g = &weights.geometry;
    let s = stem(weights, state)?;
    match mode {
        ForwardMode::Aggregate => {
            let (h1, _) = attn_aggregate(&s.h0, ctx, &weights.experts, AttnLayer::Down, gates)?;
            let t = tail(weights, state, h1, ctx, gates)?;
            Ok(ForwardOutput {
                mid: vec![mid_of(g, &t)],
                eps: vec![t.eps],
            })
        }
        ForwardMode::SeparateFirst => {
            let mut eps = Vec::with_capacity(weights.num_experts());
            let mut mid = Vec::with_capacity(weights.num_experts());
            for expert in &weights.experts {
                let h1 = attn_single(&s.h0, ctx, expert, AttnLayer::Down)?;
                let t = tail(weights, state, h1, ctx, gates)?;
                mid.push(mid_of(g, &t));
                eps.push(t.eps);
            }
            Ok(ForwardOutput { eps, mid })
        }
    }
}

/// Noise-prediction loss for one example and its gradient with respect to
/// every parameter, in aggregate mode.
pub fn loss_and_grad(
    weights: &UNetWeights,
    state: &LatentState,
    ctx: &PromptEmbedding,
    gates: &GateWeights,
    eps_true: &Tensor,
) -> Result<(f64, UNetWeights)> {
    let mut grads = weights.zeros_like();
    let loss = accumulate_grad(weights, state, ctx, gates, eps_true, 1.0, &mut grads)?;
    Ok((loss, grads))
}

/// Adds `scale · ∇loss` into `grads` and returns the unscaled loss.
pub fn accumulate_grad(
    weights: &UNetWeights,
    state: &LatentState,
    ctx: &PromptEmbedding,
    gates: &GateWeights,
    eps_true: &Tensor,
    scale: f64,
    grads: &mut UNetWeights,
) -> Result<f64> {
    check_ctx(weights, ctx)?;
    gates.check_experts(weights.num_experts())?;
    let g = &weights.geometry;
    let b = &weights.backbone;
    let s = stem(weights, state)?;
    let (h1, a_down) = attn_aggregate(&s.h0, ctx, &weights.experts, AttnLayer::Down, gates)?;
    let t = tail(weights, state, h1, ctx, gates)?;
    let loss = ldm_loss(eps_true, &t.eps)?;

    let d_eps = ldm_loss_grad(eps_true, &t.eps)?.scale(scale);
    let k = state.t - 1;
    let gb = &mut grads.backbone;
    gb.out_skip.data_mut()[k] += d_eps.dot(&state.z)?;
    gb.out_gain.data_mut()[k] += d_eps.dot(&t.net)?;
    let d_out = patchify(g, &d_eps.scale(b.out_gain.data()[k]))?;
    let du2 = b.patch_out.backward(&t.u2, &d_out, &mut gb.patch_out)?;
    let ex = &mut grads.experts;
    let du1 = ff_backward(&t.ff_up, &weights.experts, FfLayer::Up, gates, &du2, ex)?;
    let du0 = attn_backward(&t.a_up, ctx, &weights.experts, AttnLayer::Up, gates, &du1, ex)?;
    let d_up = merge(g, &du0);
    let gb = &mut grads.backbone;
    let dm_post = b.up.backward(&t.m_post, &d_up, &mut gb.up)?;
    let dg1 = dm_post.add(&mlp_backward(&b.mid_mlp, &t.mid_mlp, &dm_post, &mut gb.mid_mlp)?)?;
    let dm_pre = attn_backward(&t.a_mid, ctx, &weights.experts, AttnLayer::Mid, gates, &dg1, &mut grads.experts)?;
    let gb = &mut grads.backbone;
    let d_merged = b.down.backward(&t.merged, &dm_pre, &mut gb.down)?;
    let dh2 = split(g, &d_merged).add(&du0)?;
    let ex = &mut grads.experts;
    let dh1 = ff_backward(&t.ff_down, &weights.experts, FfLayer::Down, gates, &dh2, ex)?;
    let dh0 = attn_backward(&a_down, ctx, &weights.experts, AttnLayer::Down, gates, &dh1, ex)?;
    let gb = &mut grads.backbone;
    gb.pos.axpy(1.0, &dh0)?;
    for (gt, d) in gb.time.row_mut(state.t - 1).iter_mut().zip(dh0.sum_rows()?) {
        *gt += d;
    }
    b.patch_in.backward(&s.patches, &dh0, &mut gb.patch_in)?;
    Ok(loss)
}
