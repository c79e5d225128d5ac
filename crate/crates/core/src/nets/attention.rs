//! Channel and spatial gating for convolutional feature maps.
//!
//! The channel gate pools each channel (mean and max over H x W), runs both
//! pooled vectors through a shared bottleneck MLP (`W0`, batch norm, ReLU,
//! `W1`), adds them and squashes with a sigmoid. The spatial gate pools over
//! channels, stacks `[mean; max]` and applies a `k x k` convolution followed
//! by a sigmoid. Both gates multiply the map they were computed from.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;

/// Parameters of one channel-then-spatial attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub(crate) channel_mlp_in: ParamId,
    pub(crate) bn_gamma: ParamId,
    pub(crate) bn_beta: ParamId,
    pub(crate) channel_mlp_out: ParamId,
    pub(crate) spatial_conv: ParamId,
    channels: usize,
    reduction: usize,
    spatial_kernel: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "attention reduction {reduction} must divide channel count {channels}"
            )));
        }
        if spatial_kernel % 2 == 0 {
            return Err(Error::config(format!("spatial attention kernel must be odd, got {spatial_kernel}")));
        }
        let hidden = channels / reduction;
        Ok(AttentionParams {
            channel_mlp_in: store.add_normal(format!("{name}.channel.w0"), &[channels, hidden], rng),
            bn_gamma: store.add_const(format!("{name}.channel.bn_gamma"), &[1, hidden], 1.0),
            bn_beta: store.add_const(format!("{name}.channel.bn_beta"), &[1, hidden], 0.0),
            channel_mlp_out: store.add_normal(format!("{name}.channel.w1"), &[hidden, channels], rng),
            spatial_conv: store.add_normal(
                format!("{name}.spatial.conv"),
                &[1, 2, spatial_kernel, spatial_kernel],
                rng,
            ),
            channels,
            reduction,
            spatial_kernel,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn spatial_kernel(&self) -> usize {
        self.spatial_kernel
    }

    fn channel_mlp(&self, tape: &Tape, p: &[Var], pooled: Var) -> Result<Var> {
        let h = tape.matmul(pooled, p[self.channel_mlp_in.index()])?;
        let h = tape.batch_norm(h, BN_EPS)?;
        let h = tape.mul(h, p[self.bn_gamma.index()])?;
        let h = tape.add(h, p[self.bn_beta.index()])?;
        let h = tape.relu(h);
        tape.matmul(h, p[self.channel_mlp_out.index()])
    }

    /// Per-channel gate of a `[B, C, H, W]` map, shaped `[B, C, 1, 1]`.
    pub fn channel_gate(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "channel attention over {} channels got input {shape:?}",
                self.channels
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        let avg = tape.mean_axes(x, &[2, 3])?;
        let avg = tape.reshape(avg, &[b, c])?;
        let max = tape.max_spatial(x)?;
        let max = tape.reshape(max, &[b, c])?;
        let a = self.channel_mlp(tape, p, avg)?;
        let m = self.channel_mlp(tape, p, max)?;
        let s = tape.add(a, m)?;
        let gate = tape.sigmoid(s);
        tape.reshape(gate, &[b, c, 1, 1])
    }

    /// Per-location gate of a `[B, C, H, W]` map, shaped `[B, 1, H, W]`.
    pub fn spatial_gate(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        if tape.shape(x).len() != 4 {
            return Err(Error::shape("spatial attention expects a 4-D map"));
        }
        let avg = tape.mean_axes(x, &[1])?;
        let max = tape.max_channel(x)?;
        let stacked = tape.concat(&[avg, max], 1)?;
        let conv = tape.conv2d(stacked, p[self.spatial_conv.index()], 1, self.spatial_kernel / 2)?;
        Ok(tape.sigmoid(conv))
    }

    /// `x` gated by channel attention, then by spatial attention.
    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let cg = self.channel_gate(tape, p, x)?;
        let x = tape.mul(x, cg)?;
        let sg = self.spatial_gate(tape, p, x)?;
        tape.mul(x, sg)
    }
}
