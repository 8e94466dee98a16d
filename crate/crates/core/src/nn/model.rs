use rand::Rng as _;

use super::config::{parameter_count, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ops, Axis, Mode, Tape, Tensor, Var};

/// A dense layer: `weight` is `out×in`, `bias` has `out` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(out: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: Tensor::from_fn([out, fan_in], |_| rng.gen_range(-bound..=bound)),
            bias: Tensor::zeros([out]),
        }
    }
}

/// Six axial layers followed by scalar-affine global normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AxialBlock {
    /// One layer per mixing axis, in [`Axis::ALL`] order.
    pub axial: Vec<Linear>,
    pub norm_weight: Tensor,
    pub norm_bias: Tensor,
}

/// The Axial-MLP segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct AxialMlp {
    config: ModelConfig,
    pub embed: Linear,
    pub blocks: Vec<AxialBlock>,
    pub head: Linear,
}

/// Parameter handles bound to one tape, in [`AxialMlp::parameters`] order.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Output of [`AxialMlp::forward`].
pub struct ForwardPass<'t> {
    /// Soft mask `[B, D, H, W, 1]` in (0, 1).
    pub output: Var<'t>,
    pub params: BoundParams<'t>,
}

impl AxialMlp {
    /// Uniform `±1/√fan_in` weights, zero biases, normalization `(1, 0)`.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let f = config.hidden;
        let embed = Linear::init(f, config.in_channels, rng);
        let blocks = (0..config.depth)
            .map(|_| AxialBlock {
                axial: config
                    .axis_lengths()
                    .iter()
                    .map(|&a| Linear::init(a * f, a * f, rng))
                    .collect(),
                norm_weight: Tensor::scalar(1.0),
                norm_bias: Tensor::scalar(0.0),
            })
            .collect();
        let head = Linear::init(1, f, rng);
        Ok(AxialMlp {
            config,
            embed,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every trainable tensor with a stable, human-readable name.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.weight".to_string(), &self.embed.weight),
            ("embed.bias".to_string(), &self.embed.bias),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for (axis, lin) in Axis::ALL.iter().zip(&block.axial) {
                out.push((format!("blocks.{l}.{}.weight", axis.name()), &lin.weight));
                out.push((format!("blocks.{l}.{}.bias", axis.name()), &lin.bias));
            }
            out.push((format!("blocks.{l}.norm.weight"), &block.norm_weight));
            out.push((format!("blocks.{l}.norm.bias"), &block.norm_bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    /// Mutable counterpart of [`AxialMlp::parameters`], same order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed.weight, &mut self.embed.bias];
        for block in &mut self.blocks {
            for lin in &mut block.axial {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
            out.push(&mut block.norm_weight);
            out.push(&mut block.norm_bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Scalars actually held by this instance.
    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters concatenated in [`AxialMlp::parameters`] order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, t) in self.parameters() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a model from a config and a flat parameter vector.
    pub fn from_flat(config: ModelConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let expected = parameter_count(&config);
        if flat.len() != expected {
            return Err(Error::param(format!(
                "parameter vector has {} entries, config needs {expected}",
                flat.len()
            )));
        }
        // shapes come from a throwaway init; values are overwritten
        let mut model = AxialMlp::init(config, &mut crate::rng::seeded(0))?;
        let mut offset = 0;
        for t in model.parameters_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(model)
    }

    pub fn zero_grad(&mut self) {
        for t in self.parameters_mut() {
            t.zero_grad();
        }
    }

    /// Releases every gradient slot, leaving only the weights.
    pub fn clear_grads(&mut self) {
        for t in self.parameters_mut() {
            t.clear_grad();
        }
    }

    /// Adds the tape gradients of `bound` into each parameter's grad slot.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams<'_>) -> Result<()> {
        for (param, var) in self.parameters_mut().into_iter().zip(&bound.vars) {
            match tape.grad(var) {
                Some(g) => param.accumulate_grad(g.data())?,
                None => param.accumulate_grad(&vec![0.0; param.len()])?,
            }
        }
        Ok(())
    }

    /// Checks the `[B, D, H, W, c]` input layout.
    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.crop_shape[0], c.crop_shape[1], c.crop_shape[2], c.in_channels];
        if x.rank() != 5 || x.shape()[1..] != want {
            return Err(Error::dim(format!(
                "model expects input [B, {}, {}, {}, {}], got {:?}",
                want[0],
                want[1],
                want[2],
                want[3],
                x.shape()
            )));
        }
        Ok(())
    }

    /// Runs the network on `x` (`[B, D, H, W, c]` at the crop shape).
    ///
    /// Pipeline: resize to the patch-multiple working shape, patchify, embed
    /// channels, `L` axial blocks, per-voxel head with sigmoid, unpatchify,
    /// resize back to the crop shape. When `track_grads` is false the
    /// parameters enter the tape as constants and nothing is saved for
    /// backward.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        mut mode: Mode<'_>,
        track_grads: bool,
    ) -> Result<ForwardPass<'t>> {
        self.check_input(x)?;
        let cfg = &self.config;
        let bind = |t: &Tensor| {
            if track_grads {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        let vars: Vec<Var<'t>> = self.parameters().into_iter().map(|(_, t)| bind(t)).collect();
        let mut next = vars.iter();
        let mut take = || next.next().expect("parameter list matches model layout");

        let input = tape.constant(x.clone());
        let resized = ops::trilinear_resize(&input, cfg.working_shape())?;
        let patches = ops::patchify(&resized, cfg.patch)?;
        let (ew, eb) = (take(), take());
        let mut h = ops::linear_channels(&patches, ew, eb)?;

        for _ in &self.blocks {
            let branches: Vec<(usize, &Var<'t>, &Var<'t>)> =
                Axis::ALL.iter().map(|axis| (axis.dim(), take(), take())).collect();
            let summed = ops::axial_mix(&h, &branches, cfg.dropout_rate, cfg.leaky_slope, mode.reborrow())?;
            let (nw, nb) = (take(), take());
            h = ops::normalize_global(&summed, nw, nb, cfg.norm_eps)?;
        }

        let (hw, hb) = (take(), take());
        let logits = ops::linear_channels(&h, hw, hb)?;
        let probs = ops::sigmoid(&logits);
        let volume = ops::unpatchify(&probs)?;
        let output = ops::trilinear_resize(&volume, cfg.crop_shape)?;
        Ok(ForwardPass {
            output,
            params: BoundParams { vars },
        })
    }

    /// Eval-mode soft prediction `[B, D, H, W, 1]` without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let pass = self.forward(&tape, x, Mode::Eval, false)?;
        Ok(pass.output.value().clone())
    }
}
