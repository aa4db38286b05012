//! MoE cross-attention and feed-forward layers with their reverse passes.

use super::gating::GateWeights;
use super::weights::{AttnLayer, ExpertWeights, FfLayer, Mlp};
use crate::error::{EmoeError, Result};
use crate::math::{attention, attention_backward, Tensor};
use crate::text::PromptEmbedding;

/// How expert outputs are combined at a cross-attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    /// Gated weighted sum of `Q`, `K` and `V` over the selected experts.
    Aggregate,
    /// One independent output per expert; only legal at the separation layer.
    Separate,
}

#[derive(Debug, Clone)]
pub enum CrossAttnOutput {
    Aggregate(Tensor),
    Separate(Vec<Tensor>),
}

/// Saved activations of an aggregate cross-attention call.
#[derive(Debug, Clone)]
pub struct AttnCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    weights: Tensor,
}

fn check_attn_dims(x: &Tensor, ctx: &Tensor, experts: &[ExpertWeights], layer: AttnLayer) -> Result<()> {
    let first = experts.first().ok_or(EmoeError::Empty("experts"))?.attn(layer);
    if x.rank() != 2 || x.shape()[1] != first.wq.shape()[0] {
        return Err(EmoeError::dim(format!(
            "cross-attention input {:?} vs W_Q {:?} (axis 1 of x must equal axis 0 of W_Q)",
            x.shape(),
            first.wq.shape()
        )));
    }
    if ctx.rank() != 2 || ctx.shape()[1] != first.wk.shape()[0] {
        return Err(EmoeError::dim(format!(
            "cross-attention context {:?} vs W_K {:?} (axis 1 of context must equal axis 0 of W_K)",
            ctx.shape(),
            first.wk.shape()
        )));
    }
    if first.wq.shape()[1] != x.shape()[1] {
        return Err(EmoeError::dim(format!(
            "residual needs d_attn == d_model, got W_Q {:?}",
            first.wq.shape()
        )));
    }
    Ok(())
}

/// Aggregate-mode cross-attention with the cache needed by the reverse pass.
pub(crate) fn attn_aggregate(
    x: &Tensor,
    ctx: &PromptEmbedding,
    experts: &[ExpertWeights],
    layer: AttnLayer,
    gates: &GateWeights,
) -> Result<(Tensor, AttnCache)> {
    check_attn_dims(x, &ctx.tokens, experts, layer)?;
    gates.check_experts(experts.len())?;
    let d = x.shape()[1];
    let lk = ctx.tokens.rows();
    let mut q = Tensor::from_parts(vec![x.rows(), d], vec![0.0; x.rows() * d]);
    let mut k = Tensor::from_parts(vec![lk, d], vec![0.0; lk * d]);
    let mut v = k.clone();
    for (i, w) in gates.iter() {
        let e = experts[i].attn(layer);
        q.axpy(w, &x.matmul(&e.wq)?)?;
        k.axpy(w, &ctx.tokens.matmul(&e.wk)?)?;
        v.axpy(w, &ctx.tokens.matmul(&e.wv)?)?;
    }
    let att = attention(&q, &k, &v)?;
    let out = x.add(&att.output)?;
    Ok((
        out,
        AttnCache {
            x: x.clone(),
            q,
            k,
            v,
            weights: att.weights,
        },
    ))
}

/// `x + Attention(x W_Q^i, τ W_K^i, τ W_V^i)` for a single expert.
pub(crate) fn attn_single(x: &Tensor, ctx: &PromptEmbedding, expert: &ExpertWeights, layer: AttnLayer) -> Result<Tensor> {
    check_attn_dims(x, &ctx.tokens, std::slice::from_ref(expert), layer)?;
    let e = expert.attn(layer);
    let q = x.matmul(&e.wq)?;
    let k = ctx.tokens.matmul(&e.wk)?;
    let v = ctx.tokens.matmul(&e.wv)?;
    x.add(&attention(&q, &k, &v)?.output)
}

/// Reverse pass of [`attn_aggregate`]. Expert gradients are scaled by their
/// gate weight and accumulated into `grads`; returns `dL/dx`.
pub(crate) fn attn_backward(
    cache: &AttnCache,
    ctx: &PromptEmbedding,
    experts: &[ExpertWeights],
    layer: AttnLayer,
    gates: &GateWeights,
    dout: &Tensor,
    grads: &mut [ExpertWeights],
) -> Result<Tensor> {
    let g = attention_backward(&cache.q, &cache.k, &cache.v, &cache.weights, dout)?;
    let mut dx = dout.clone();
    let dwq = cache.x.t_matmul(&g.dq)?;
    let dwk = ctx.tokens.t_matmul(&g.dk)?;
    let dwv = ctx.tokens.t_matmul(&g.dv)?;
    for (i, w) in gates.iter() {
        let e = experts[i].attn(layer);
        dx.axpy(w, &g.dq.matmul_t(&e.wq)?)?;
        let ge = grads[i].attn_mut(layer);
        ge.wq.axpy(w, &dwq)?;
        ge.wk.axpy(w, &dwk)?;
        ge.wv.axpy(w, &dwv)?;
    }
    Ok(dx)
}

/// MoE cross-attention. The designated separation layer is the first
/// down-block attention; separate mode anywhere else is an error.
pub fn moe_cross_attention(
    x: &Tensor,
    ctx: &PromptEmbedding,
    experts: &[ExpertWeights],
    layer: AttnLayer,
    gates: &GateWeights,
    mode: AttnMode,
) -> Result<CrossAttnOutput> {
    match mode {
        AttnMode::Aggregate => Ok(CrossAttnOutput::Aggregate(
            attn_aggregate(x, ctx, experts, layer, gates)?.0,
        )),
        AttnMode::Separate => {
            if layer != AttnLayer::Down {
                return Err(EmoeError::SeparateNotAllowed("first down-block cross-attention"));
            }
            if experts.is_empty() {
                return Err(EmoeError::Empty("experts"));
            }
            experts
                .iter()
                .map(|e| attn_single(x, ctx, e, layer))
                .collect::<Result<Vec<_>>>()
                .map(CrossAttnOutput::Separate)
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    x: Tensor,
    act: Tensor,
}

pub(crate) fn mlp_forward(mlp: &Mlp, x: &Tensor) -> Result<(Tensor, MlpCache)> {
    let act = mlp.fc1.forward(x)?.map(f64::tanh);
    let out = mlp.fc2.forward(&act)?;
    Ok((out, MlpCache { x: x.clone(), act }))
}

pub(crate) fn mlp_backward(mlp: &Mlp, cache: &MlpCache, dout: &Tensor, grad: &mut Mlp) -> Result<Tensor> {
    let dact = mlp.fc2.backward(&cache.act, dout, &mut grad.fc2)?;
    let dpre = dact.zip_map(&cache.act, |g, a| g * (1.0 - a * a))?;
    mlp.fc1.backward(&cache.x, &dpre, &mut grad.fc1)
}

fn check_ff_dims(x: &Tensor, experts: &[ExpertWeights], layer: FfLayer) -> Result<()> {
    let first = experts.first().ok_or(EmoeError::Empty("experts"))?.ff(layer);
    if x.rank() != 2 || x.shape()[1] != first.fc1.w.shape()[0] {
        return Err(EmoeError::dim(format!(
            "feed-forward input {:?} vs first layer {:?}",
            x.shape(),
            first.fc1.w.shape()
        )));
    }
    Ok(())
}

pub(crate) fn ff_aggregate(
    x: &Tensor,
    experts: &[ExpertWeights],
    layer: FfLayer,
    gates: &GateWeights,
) -> Result<(Tensor, Vec<MlpCache>)> {
    check_ff_dims(x, experts, layer)?;
    gates.check_experts(experts.len())?;
    let mut out = x.clone();
    let mut caches = Vec::with_capacity(gates.selected.len());
    for (i, w) in gates.iter() {
        let (y, cache) = mlp_forward(experts[i].ff(layer), x)?;
        out.axpy(w, &y)?;
        caches.push(cache);
    }
    Ok((out, caches))
}

pub(crate) fn ff_backward(
    caches: &[MlpCache],
    experts: &[ExpertWeights],
    layer: FfLayer,
    gates: &GateWeights,
    dout: &Tensor,
    grads: &mut [ExpertWeights],
) -> Result<Tensor> {
    let mut dx = dout.clone();
    for ((i, w), cache) in gates.iter().zip(caches) {
        let scaled = dout.scale(w);
        let d = mlp_backward(experts[i].ff(layer), cache, &scaled, grads[i].ff_mut(layer))?;
        dx.axpy(1.0, &d)?;
    }
    Ok(dx)
}

/// `x + Σ_{i∈S} w^i FF^i(x)`.
pub fn moe_feed_forward(
    x: &Tensor,
    experts: &[ExpertWeights],
    layer: FfLayer,
    gates: &GateWeights,
) -> Result<Tensor> {
    Ok(ff_aggregate(x, experts, layer, gates)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian, RngStream};
    use crate::text::{Prompt, TextEncoder};
    use crate::unet::weights::Geometry;

    fn setup(m: usize, seed: u64) -> (Tensor, PromptEmbedding, Vec<ExpertWeights>) {
        let g = Geometry::default();
        let mut s = RngStream::new(seed, 0);
        let experts = (0..m).map(|_| ExpertWeights::init(&mut s, &g)).collect();
        let x = gaussian(&mut s, &[g.tokens(), g.d_model]).unwrap();
        let ctx = TextEncoder::default()
            .encode(&Prompt::english("a red big circle").unwrap())
            .unwrap();
        (x, ctx, experts)
    }

    fn separate(out: CrossAttnOutput) -> Vec<Tensor> {
        match out {
            CrossAttnOutput::Separate(v) => v,
            CrossAttnOutput::Aggregate(_) => panic!("expected separate"),
        }
    }

    fn aggregate(out: CrossAttnOutput) -> Tensor {
        match out {
            CrossAttnOutput::Aggregate(t) => t,
            CrossAttnOutput::Separate(_) => panic!("expected aggregate"),
        }
    }

    #[test]
    fn single_expert_modes_agree() {
        let (x, ctx, experts) = setup(1, 3);
        let g = GateWeights::one_hot(0);
        let a = aggregate(moe_cross_attention(&x, &ctx, &experts, AttnLayer::Down, &g, AttnMode::Aggregate).unwrap());
        let s = separate(moe_cross_attention(&x, &ctx, &experts, AttnLayer::Down, &g, AttnMode::Separate).unwrap());
        assert_eq!(s.len(), 1);
        assert_eq!(a, s[0]);
    }

    #[test]
    fn identical_experts_collapse() {
        let (x, ctx, mut experts) = setup(3, 4);
        let first = experts[0].clone();
        for e in &mut experts {
            *e = first.clone();
        }
        let g = GateWeights::new(vec![2, 0], vec![0.3, 0.7]).unwrap();
        let a = aggregate(moe_cross_attention(&x, &ctx, &experts, AttnLayer::Down, &g, AttnMode::Aggregate).unwrap());
        let s = separate(moe_cross_attention(&x, &ctx, &experts, AttnLayer::Down, &g, AttnMode::Separate).unwrap());
        assert_eq!(s.len(), 3);
        for path in &s {
            assert_eq!(path, &s[0]);
            assert!(path.max_abs_diff(&a) < 1e-12);
        }
    }

    #[test]
    fn one_hot_gate_matches_solo_expert() {
        let (x, ctx, experts) = setup(3, 5);
        let g = GateWeights::new(vec![1, 0, 2], vec![1.0, 0.0, 0.0]).unwrap();
        let a = aggregate(moe_cross_attention(&x, &ctx, &experts, AttnLayer::Mid, &g, AttnMode::Aggregate).unwrap());
        let solo = attn_single(&x, &ctx, &experts[1], AttnLayer::Mid).unwrap();
        assert!(a.max_abs_diff(&solo) < 1e-12);
    }

    #[test]
    fn separate_rejected_off_the_separation_layer() {
        let (x, ctx, experts) = setup(2, 6);
        let g = GateWeights::uniform(2);
        for layer in [AttnLayer::Mid, AttnLayer::Up] {
            assert!(matches!(
                moe_cross_attention(&x, &ctx, &experts, layer, &g, AttnMode::Separate),
                Err(EmoeError::SeparateNotAllowed(_))
            ));
        }
    }

    #[test]
    fn dimension_mismatch_reported() {
        let (_, ctx, experts) = setup(2, 7);
        let x = Tensor::zeros(&[4, 5]).unwrap();
        let g = GateWeights::uniform(2);
        let err = moe_cross_attention(&x, &ctx, &experts, AttnLayer::Down, &g, AttnMode::Aggregate).unwrap_err();
        assert!(matches!(err, EmoeError::Dimension(_)));
        assert!(moe_feed_forward(&x, &experts, FfLayer::Down, &g).is_err());
    }

    #[test]
    fn aggregate_query_is_convex_combination() {
        let (x, ctx, experts) = setup(3, 8);
        let g = GateWeights::new(vec![0, 1, 2], vec![0.2, 0.5, 0.3]).unwrap();
        let (_, cache) = attn_aggregate(&x, &ctx, &experts, AttnLayer::Down, &g).unwrap();
        let parts: Vec<Tensor> = experts.iter().map(|e| x.matmul(&e.down_attn.wq).unwrap()).collect();
        for j in 0..cache.q.len() {
            let vals: Vec<f64> = parts.iter().map(|p| p.data()[j]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let q = cache.q.data()[j];
            assert!(q >= lo - 1e-12 && q <= hi + 1e-12);
        }
    }

    #[test]
    fn feed_forward_properties() {
        let (x, _, experts) = setup(3, 9);
        let oh = GateWeights::one_hot(2);
        let y = moe_feed_forward(&x, &experts, FfLayer::Up, &oh).unwrap();
        let solo = x.add(&mlp_forward(&experts[2].up_ff, &x).unwrap().0).unwrap();
        assert!(y.max_abs_diff(&solo) < 1e-12);

        let same = vec![experts[0].clone(); 3];
        let a = moe_feed_forward(&x, &same, FfLayer::Down, &GateWeights::uniform(3)).unwrap();
        let b = moe_feed_forward(&x, &same, FfLayer::Down, &GateWeights::new(vec![1, 2], vec![0.9, 0.1]).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);

        let mut zeroed = experts.clone();
        for e in &mut zeroed {
            e.down_ff.fc2.w.data_mut().fill(0.0);
            e.down_ff.fc2.b.data_mut().fill(0.0);
        }
        let z = moe_feed_forward(&x, &zeroed, FfLayer::Down, &GateWeights::uniform(3)).unwrap();
        assert_eq!(z, x);
    }
}
