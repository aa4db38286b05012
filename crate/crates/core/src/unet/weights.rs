//! Parameter containers for the toy U-Net.
//!
//! Every container exposes its tensors in one fixed order through
//! [`Params`]. Optimizers, gradient checks and checkpoint files all rely on
//! that order, so it must not change without bumping the checkpoint version.

use serde::{Deserialize, Serialize};

use crate::error::{EmoeError, Result};
use crate::math::{RngStream, Tensor};

/// Toy geometry. Latents are `channels × height × width`; the down block
/// works on `patch × patch` patches, the mid block on 2×2 merges of those.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d_model: usize,
    pub d_txt: usize,
    pub d_ff: usize,
    pub timesteps: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            channels: 2,
            height: 8,
            width: 8,
            patch: 2,
            d_model: 8,
            d_txt: 16,
            d_ff: 16,
            timesteps: 25,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.height,
            self.width,
            self.patch,
            self.d_model,
            self.d_txt,
            self.d_ff,
        ];
        if dims.contains(&0) {
            return Err(EmoeError::Config("all geometry dimensions must be >= 1".into()));
        }
        if self.timesteps < 2 {
            return Err(EmoeError::Config("T must be at least 2".into()));
        }
        let block = 2 * self.patch;
        if !self.height.is_multiple_of(block) || !self.width.is_multiple_of(block) {
            return Err(EmoeError::Config(format!(
                "latent {}x{} must be divisible by 2*patch = {block}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn latent_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn mid_grid(&self) -> (usize, usize) {
        let (h, w) = self.grid();
        (h / 2, w / 2)
    }

    pub fn mid_tokens(&self) -> usize {
        self.tokens() / 4
    }

    /// Flattened size of a mid-block latent, `d_model × mid_h × mid_w`.
    pub fn d_mid(&self) -> usize {
        self.mid_tokens() * self.d_model
    }
}

/// Ordered access to every parameter tensor of a container.
pub trait Params {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Same structure with every entry zeroed; used for gradients.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, scale: f64, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }
}

fn init_matrix(stream: &mut RngStream, rows: usize, cols: usize, gain: f64) -> Tensor {
    let std = gain / (rows as f64).sqrt();
    let data = stream.normal_vec(rows * cols).into_iter().map(|v| v * std).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

fn init_table(stream: &mut RngStream, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = stream.normal_vec(rows * cols).into_iter().map(|v| v * std).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

fn zeros(n: usize) -> Tensor {
    Tensor::from_parts(vec![n], vec![0.0; n])
}

/// Affine map `x W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(stream: &mut RngStream, d_in: usize, d_out: usize, gain: f64) -> Self {
        Self {
            w: init_matrix(stream, d_in, d_out, gain),
            b: zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add_row(self.b.data())
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor, dout: &Tensor, grad: &mut Linear) -> Result<Tensor> {
        let dw = x.t_matmul(dout)?;
        grad.w.axpy(1.0, &dw)?;
        for (g, d) in grad.b.data_mut().iter_mut().zip(dout.sum_rows()?) {
            *g += d;
        }
        dout.matmul_t(&self.w)
    }
}

impl Params for Linear {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Two-layer tanh perceptron `tanh(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init(stream: &mut RngStream, d: usize, hidden: usize, out_gain: f64) -> Self {
        Self {
            fc1: Linear::init(stream, d, hidden, 1.0),
            fc2: Linear::init(stream, hidden, d, out_gain),
        }
    }
}

impl Params for Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.fc1.tensors();
        v.extend(self.fc2.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.fc1.tensors_mut();
        v.extend(self.fc2.tensors_mut());
        v
    }
}

/// One expert's cross-attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnWeights {
    /// `d_model × d_model`
    pub wq: Tensor,
    /// `d_txt × d_model`
    pub wk: Tensor,
    /// `d_txt × d_model`
    pub wv: Tensor,
}

impl CrossAttnWeights {
    pub fn init(stream: &mut RngStream, g: &Geometry) -> Self {
        Self {
            wq: init_matrix(stream, g.d_model, g.d_model, 1.0),
            wk: init_matrix(stream, g.d_txt, g.d_model, 1.0),
            wv: init_matrix(stream, g.d_txt, g.d_model, 1.0),
        }
    }
}

impl Params for CrossAttnWeights {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.wq, &self.wk, &self.wv]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv]
    }
}

/// The MoE layers identifying one expert: three cross-attention layers and
/// two feed-forward layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub down_attn: CrossAttnWeights,
    pub down_ff: Mlp,
    pub mid_attn: CrossAttnWeights,
    pub up_attn: CrossAttnWeights,
    pub up_ff: Mlp,
}

impl ExpertWeights {
    pub fn init(stream: &mut RngStream, g: &Geometry) -> Self {
        Self {
            down_attn: CrossAttnWeights::init(stream, g),
            down_ff: Mlp::init(stream, g.d_model, g.d_ff, 0.5),
            mid_attn: CrossAttnWeights::init(stream, g),
            up_attn: CrossAttnWeights::init(stream, g),
            up_ff: Mlp::init(stream, g.d_model, g.d_ff, 0.5),
        }
    }

    /// Adds `scale · N(0, 1)` noise to every entry.
    pub fn perturb(&mut self, stream: &mut RngStream, scale: f64) {
        for t in self.tensors_mut() {
            let noise = stream.normal_vec(t.len());
            for (v, n) in t.data_mut().iter_mut().zip(noise) {
                *v += scale * n;
            }
        }
    }

    pub fn attn(&self, layer: AttnLayer) -> &CrossAttnWeights {
        match layer {
            AttnLayer::Down => &self.down_attn,
            AttnLayer::Mid => &self.mid_attn,
            AttnLayer::Up => &self.up_attn,
        }
    }

    pub fn attn_mut(&mut self, layer: AttnLayer) -> &mut CrossAttnWeights {
        match layer {
            AttnLayer::Down => &mut self.down_attn,
            AttnLayer::Mid => &mut self.mid_attn,
            AttnLayer::Up => &mut self.up_attn,
        }
    }

    pub fn ff(&self, layer: FfLayer) -> &Mlp {
        match layer {
            FfLayer::Down => &self.down_ff,
            FfLayer::Up => &self.up_ff,
        }
    }

    pub fn ff_mut(&mut self, layer: FfLayer) -> &mut Mlp {
        match layer {
            FfLayer::Down => &mut self.down_ff,
            FfLayer::Up => &mut self.up_ff,
        }
    }
}

impl Params for ExpertWeights {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.down_attn.tensors();
        v.extend(self.down_ff.tensors());
        v.extend(self.mid_attn.tensors());
        v.extend(self.up_attn.tensors());
        v.extend(self.up_ff.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.down_attn.tensors_mut();
        v.extend(self.down_ff.tensors_mut());
        v.extend(self.mid_attn.tensors_mut());
        v.extend(self.up_attn.tensors_mut());
        v.extend(self.up_ff.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttnLayer {
    Down,
    Mid,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FfLayer {
    Down,
    Up,
}

/// Layers shared by every expert.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub patch_in: Linear,
    /// `tokens × d_model` positional table.
    pub pos: Tensor,
    /// `T × d_model`, row `t-1` is added at timestep `t`.
    pub time: Tensor,
    /// `4·d_model → d_model` patch merge into the mid grid.
    pub down: Linear,
    pub mid_mlp: Mlp,
    /// `d_model → 4·d_model` patch split back to the down grid.
    pub up: Linear,
    pub patch_out: Linear,
    /// Per-timestep output skip: `ε̂ = skip[t-1]·z_t + gain[t-1]·net`.
    pub out_skip: Tensor,
    /// Per-timestep gain on the network output.
    pub out_gain: Tensor,
}

impl Backbone {
    pub fn init(stream: &mut RngStream, g: &Geometry) -> Self {
        Self {
            patch_in: Linear::init(stream, g.patch_dim(), g.d_model, 1.0),
            pos: init_table(stream, g.tokens(), g.d_model, 0.5),
            time: init_table(stream, g.timesteps, g.d_model, 0.5),
            down: Linear::init(stream, 4 * g.d_model, g.d_model, 1.0),
            mid_mlp: Mlp::init(stream, g.d_model, g.d_ff, 0.5),
            up: Linear::init(stream, g.d_model, 4 * g.d_model, 1.0),
            patch_out: Linear::init(stream, g.d_model, g.patch_dim(), 0.5),
            out_skip: Tensor::from_parts(vec![g.timesteps], vec![0.0; g.timesteps]),
            out_gain: Tensor::from_parts(vec![g.timesteps], vec![1.0; g.timesteps]),
        }
    }
}

impl Params for Backbone {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.patch_in.tensors();
        v.push(&self.pos);
        v.push(&self.time);
        v.extend(self.down.tensors());
        v.extend(self.mid_mlp.tensors());
        v.extend(self.up.tensors());
        v.extend(self.patch_out.tensors());
        v.push(&self.out_skip);
        v.push(&self.out_gain);
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.patch_in.tensors_mut();
        v.push(&mut self.pos);
        v.push(&mut self.time);
        v.extend(self.down.tensors_mut());
        v.extend(self.mid_mlp.tensors_mut());
        v.extend(self.up.tensors_mut());
        v.extend(self.patch_out.tensors_mut());
        v.push(&mut self.out_skip);
        v.push(&mut self.out_gain);
        v
    }
}

/// Full denoiser parameters: shared backbone plus `M` experts.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetWeights {
    pub geometry: Geometry,
    pub backbone: Backbone,
    pub experts: Vec<ExpertWeights>,
}

impl UNetWeights {
    pub fn init(geometry: Geometry, experts: usize, stream: &mut RngStream) -> Result<Self> {
        geometry.validate()?;
        if experts == 0 {
            return Err(EmoeError::invalid("at least one expert is required"));
        }
        let backbone = Backbone::init(stream, &geometry);
        let experts = (0..experts)
            .map(|_| ExpertWeights::init(stream, &geometry))
            .collect();
        Ok(Self {
            geometry,
            backbone,
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Copy restricted to the experts at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let experts = indices
            .iter()
            .map(|&i| {
                self.experts
                    .get(i)
                    .cloned()
                    .ok_or_else(|| EmoeError::invalid(format!("expert index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        if experts.is_empty() {
            return Err(EmoeError::invalid("empty expert subset"));
        }
        Ok(Self {
            geometry: self.geometry,
            backbone: self.backbone.clone(),
            experts,
        })
    }
}

impl Params for UNetWeights {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.tensors();
        for e in &self.experts {
            v.extend(e.tensors());
        }
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.tensors_mut();
        for e in &mut self.experts {
            v.extend(e.tensors_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_sizes() {
        let g = Geometry::default();
        g.validate().unwrap();
        assert_eq!(g.tokens(), 16);
        assert_eq!(g.patch_dim(), 8);
        assert_eq!(g.mid_tokens(), 4);
        assert_eq!(g.d_mid(), 32);
        assert_eq!(g.latent_len(), 128);
    }

    #[test]
    fn bad_geometry_rejected() {
        let g = Geometry {
            height: 6,
            ..Geometry::default()
        };
        assert!(g.validate().is_err());
        let g = Geometry {
            d_model: 0,
            ..Geometry::default()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn projection_shapes() {
        let g = Geometry::default();
        let w = UNetWeights::init(g, 3, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(w.num_experts(), 3);
        for e in &w.experts {
            for layer in [AttnLayer::Down, AttnLayer::Mid, AttnLayer::Up] {
                let a = e.attn(layer);
                assert_eq!(a.wq.shape(), &[g.d_model, g.d_model]);
                assert_eq!(a.wk.shape(), &[g.d_txt, g.d_model]);
                assert_eq!(a.wv.shape(), &[g.d_txt, g.d_model]);
            }
        }
        let zero = w.zeros_like();
        assert!(zero.tensors().iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
        assert_eq!(zero.num_params(), w.num_params());
    }

    #[test]
    fn subset_picks_experts_in_order() {
        let w = UNetWeights::init(Geometry::default(), 4, &mut RngStream::new(2, 2)).unwrap();
        let s = w.subset(&[3, 1]).unwrap();
        assert_eq!(s.experts[0], w.experts[3]);
        assert_eq!(s.experts[1], w.experts[1]);
        assert!(w.subset(&[]).is_err());
        assert!(w.subset(&[4]).is_err());
    }
}
