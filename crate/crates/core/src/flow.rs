//! The invertible fusion network.
//!
//! Two single-channel images are stacked as channels and pushed through `k`
//! affine coupling blocks. Between consecutive blocks the channels are
//! shuffled by a fixed permutation and, for `k >= 3`, resampled by a lossless
//! 2x2 squeeze (before block 2) and its inverse (before block `k`). The first
//! output channel is the fused image, optionally passed through a sigmoid;
//! the second is the latent image.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{is_permutation, Tape, Var};
use crate::latent::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Clamp applied before inverting the sigmoid head.
pub const LOGIT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input {height}x{width} is not divisible by {factor}")]
    Divisibility {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("non-finite activation in coupling block {block} ({direction})")]
    NonFinite {
        block: usize,
        direction: Direction,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Inverse => "inverse",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of coupling blocks.
    pub blocks: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub seed: u64,
    pub sigmoid_head: bool,
    /// Soft clamp `c * (2/pi) * atan(s / c)` on the log-scales when set.
    pub clamp_scale: Option<f64>,
    /// Apply a ReLU after the second convolution of each subnet as well.
    pub final_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 3,
            hidden_channels: 16,
            kernel_size: 3,
            seed: 0,
            sigmoid_head: true,
            clamp_scale: None,
            final_relu: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.blocks == 0 {
            return Err(FlowError::Config("at least one coupling block is required".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(FlowError::Config(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        if self.hidden_channels == 0 {
            return Err(FlowError::Config("hidden_channels must be at least 1".into()));
        }
        if let Some(c) = self.clamp_scale {
            if !(c > 0.0 && c.is_finite()) {
                return Err(FlowError::Config(format!("clamp_scale {c} must be positive")));
            }
        }
        Ok(())
    }

    fn subnet_options(&self) -> SubnetOptions {
        SubnetOptions {
            final_relu: self.final_relu,
            clamp_scale: self.clamp_scale,
        }
    }
}

/// Subnet behaviour shared by every block of a model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SubnetOptions {
    pub final_relu: bool,
    pub clamp_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `conv -> relu -> conv`, the second convolution emitting log-scale and
/// translation maps as channel halves.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetParams<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
}

/// Parameters of one coupling block. `subnet_a` conditions the second half on
/// the transformed first half; `subnet_b` conditions the first half on the
/// second.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingParams<T> {
    pub subnet_a: SubnetParams<T>,
    pub subnet_b: SubnetParams<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    None,
    Down,
    Up,
}

/// Resampling after each inter-block permutation: one squeeze before block 2
/// and one unsqueeze before block `k` when `k >= 3`.
pub fn resample_plan(blocks: usize) -> Vec<Resample> {
    let gaps = blocks.saturating_sub(1);
    let mut plan = vec![Resample::None; gaps];
    if blocks >= 3 {
        plan[0] = Resample::Down;
        plan[gaps - 1] = Resample::Up;
    }
    plan
}

/// Channel count entering each block, starting from the two stacked images.
fn block_channels(plan: &[Resample]) -> Vec<usize> {
    let mut c = 2;
    let mut out = vec![c];
    for r in plan {
        c = match r {
            Resample::None => c,
            Resample::Down => c * 4,
            Resample::Up => c / 4,
        };
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T> {
    pub config: ModelConfig,
    pub blocks: Vec<CouplingParams<T>>,
    /// Permutation applied after block `j`, for `j < k - 1`.
    pub permutations: Vec<Vec<usize>>,
    pub resample_plan: Vec<Resample>,
}

const PARAMS_PER_BLOCK: usize = 8;

/// Tape handles for every model parameter, in [`FlowModel::params`] order.
#[derive(Debug, Clone)]
pub struct ModelVars(pub Vec<Var>);

impl ModelVars {
    fn block(&self, j: usize) -> BlockVars {
        let v = &self.0[j * PARAMS_PER_BLOCK..(j + 1) * PARAMS_PER_BLOCK];
        BlockVars {
            a: [v[0], v[1], v[2], v[3]],
            b: [v[4], v[5], v[6], v[7]],
        }
    }
}

struct BlockVars {
    a: [Var; 4],
    b: [Var; 4],
}

fn uniform_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

impl<T: Scalar> SubnetParams<T> {
    /// First layer uniform in `+-1/sqrt(fan_in)`, second layer zero.
    fn init(rng: &mut impl Rng, half: usize, hidden: usize, k: usize) -> Self {
        let bound = 1.0 / ((half * k * k) as f64).sqrt();
        SubnetParams {
            conv1: ConvParams {
                kernel: uniform_tensor(rng, &[hidden, half, k, k], bound),
                bias: uniform_tensor(rng, &[hidden], bound),
            },
            conv2: ConvParams {
                kernel: Tensor::zeros(&[2 * half, hidden, k, k]),
                bias: Tensor::zeros(&[2 * half]),
            },
        }
    }
}

/// Log-scale and translation maps for `x`.
fn subnet<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var; 4],
    x: Var,
    opts: SubnetOptions,
) -> Result<(Var, Var), TensorError> {
    let pad = |tape: &Tape<T>, k: Var| {
        let s = tape.shape(k);
        ((s[2] - 1) / 2, (s[3] - 1) / 2)
    };
    let pad1 = pad(tape, p[0]);
    let h = tape.conv2d(x, p[0], p[1], pad1)?;
    let h = tape.relu(h)?;
    let pad2 = pad(tape, p[2]);
    let mut o = tape.conv2d(h, p[2], p[3], pad2)?;
    if opts.final_relu {
        o = tape.relu(o)?;
    }
    let half = tape.shape(o)[1] / 2;
    let mut s = tape.slice_channels(o, 0, half)?;
    let t = tape.slice_channels(o, half, half)?;
    if let Some(c) = opts.clamp_scale {
        s = tape.soft_clamp(s, T::of(c))?;
    }
    Ok((s, t))
}

/// `v1 = u1 * exp(s2(u2)) + t2(u2)`, `v2 = u2 * exp(s1(v1)) + t1(v1)`.
fn coupling_forward_vars<T: Scalar>(
    tape: &mut Tape<T>,
    a: &[Var; 4],
    b: &[Var; 4],
    u1: Var,
    u2: Var,
    opts: SubnetOptions,
) -> Result<(Var, Var), TensorError> {
    if tape.shape(u1) != tape.shape(u2) {
        return Err(TensorError::ShapeMismatch {
            op: "coupling",
            left: tape.shape(u1).to_vec(),
            right: tape.shape(u2).to_vec(),
        });
    }
    let (s2, t2) = subnet(tape, b, u2, opts)?;
    let e2 = tape.exp(s2)?;
    let m1 = tape.mul(u1, e2)?;
    let v1 = tape.add(m1, t2)?;
    let (s1, t1) = subnet(tape, a, v1, opts)?;
    let e1 = tape.exp(s1)?;
    let m2 = tape.mul(u2, e1)?;
    let v2 = tape.add(m2, t1)?;
    Ok((v1, v2))
}

/// `u2 = (v2 - t1(v1)) * exp(-s1(v1))`, `u1 = (v1 - t2(u2)) * exp(-s2(u2))`.
fn coupling_inverse_vars<T: Scalar>(
    tape: &mut Tape<T>,
    a: &[Var; 4],
    b: &[Var; 4],
    v1: Var,
    v2: Var,
    opts: SubnetOptions,
) -> Result<(Var, Var), TensorError> {
    if tape.shape(v1) != tape.shape(v2) {
        return Err(TensorError::ShapeMismatch {
            op: "coupling",
            left: tape.shape(v1).to_vec(),
            right: tape.shape(v2).to_vec(),
        });
    }
    let (s1, t1) = subnet(tape, a, v1, opts)?;
    let d2 = tape.sub(v2, t1)?;
    let ns1 = tape.scale(s1, -T::one())?;
    let e1 = tape.exp(ns1)?;
    let u2 = tape.mul(d2, e1)?;
    let (s2, t2) = subnet(tape, b, u2, opts)?;
    let d1 = tape.sub(v1, t2)?;
    let ns2 = tape.scale(s2, -T::one())?;
    let e2 = tape.exp(ns2)?;
    let u1 = tape.mul(d1, e2)?;
    Ok((u1, u2))
}

impl<T: Scalar> CouplingParams<T> {
    fn register(&self, tape: &mut Tape<T>, trainable: bool, out: &mut Vec<Var>) {
        for p in self.tensors() {
            out.push(if trainable {
                tape.leaf(p.clone())
            } else {
                tape.constant(p.clone())
            });
        }
    }

    fn tensors(&self) -> [&Tensor<T>; PARAMS_PER_BLOCK] {
        let (a, b) = (&self.subnet_a, &self.subnet_b);
        [
            &a.conv1.kernel,
            &a.conv1.bias,
            &a.conv2.kernel,
            &a.conv2.bias,
            &b.conv1.kernel,
            &b.conv1.bias,
            &b.conv2.kernel,
            &b.conv2.bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; PARAMS_PER_BLOCK] {
        let (a, b) = (&mut self.subnet_a, &mut self.subnet_b);
        [
            &mut a.conv1.kernel,
            &mut a.conv1.bias,
            &mut a.conv2.kernel,
            &mut a.conv2.bias,
            &mut b.conv1.kernel,
            &mut b.conv1.bias,
            &mut b.conv2.kernel,
            &mut b.conv2.bias,
        ]
    }

    fn run(
        &self,
        u1: &Tensor<T>,
        u2: &Tensor<T>,
        opts: SubnetOptions,
        inverse: bool,
    ) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        self.register(&mut tape, false, &mut vars);
        let a = [vars[0], vars[1], vars[2], vars[3]];
        let b = [vars[4], vars[5], vars[6], vars[7]];
        let x1 = tape.constant(u1.clone());
        let x2 = tape.constant(u2.clone());
        let (o1, o2) = if inverse {
            coupling_inverse_vars(&mut tape, &a, &b, x1, x2, opts)?
        } else {
            coupling_forward_vars(&mut tape, &a, &b, x1, x2, opts)?
        };
        Ok((tape.value(o1).clone(), tape.value(o2).clone()))
    }

    /// Applies the coupling transform to the halves `(u1, u2)`.
    pub fn forward(
        &self,
        u1: &Tensor<T>,
        u2: &Tensor<T>,
        opts: SubnetOptions,
    ) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
        self.run(u1, u2, opts, false)
    }

    /// Exact algebraic inverse of [`CouplingParams::forward`].
    pub fn inverse(
        &self,
        v1: &Tensor<T>,
        v2: &Tensor<T>,
        opts: SubnetOptions,
    ) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
        self.run(v1, v2, opts, true)
    }
}

/// Maps non-finite failures inside a block to an error naming that block.
fn in_block<R>(block: usize, direction: Direction, r: Result<R, TensorError>) -> Result<R, FlowError> {
    r.map_err(|e| match e {
        TensorError::NonFinite { .. } => FlowError::NonFinite { block, direction },
        other => FlowError::Tensor(other),
    })
}

impl<T: Scalar> FlowModel<T> {
    /// Seeded model whose blocks all start as the identity map.
    pub fn new(config: ModelConfig) -> Result<Self, FlowError> {
        config.validate()?;
        let plan = resample_plan(config.blocks);
        let channels = block_channels(&plan);
        let mut rng = stream_rng(config.seed, 0);
        let blocks = (0..config.blocks)
            .map(|j| {
                let half = channels[j] / 2;
                let a = SubnetParams::init(&mut rng, half, config.hidden_channels, config.kernel_size);
                let b = SubnetParams::init(&mut rng, half, config.hidden_channels, config.kernel_size);
                CouplingParams {
                    subnet_a: a,
                    subnet_b: b,
                }
            })
            .collect();
        let mut perm_rng = stream_rng(config.seed, 1);
        let permutations = (0..config.blocks - 1)
            .map(|j| {
                let mut p: Vec<usize> = (0..channels[j]).collect();
                p.shuffle(&mut perm_rng);
                p
            })
            .collect();
        Ok(FlowModel {
            config,
            blocks,
            permutations,
            resample_plan: plan,
        })
    }

    /// Replaces every output-layer weight with a uniform draw in `+-bound`,
    /// so the blocks stop being identities.
    pub fn randomize_output_layers(&mut self, seed: u64, bound: f64) {
        let mut rng = stream_rng(seed, 2);
        for block in &mut self.blocks {
            for sub in [&mut block.subnet_a, &mut block.subnet_b] {
                let k = sub.conv2.kernel.shape().to_vec();
                let b = sub.conv2.bias.shape().to_vec();
                sub.conv2.kernel = uniform_tensor(&mut rng, &k, bound);
                sub.conv2.bias = uniform_tensor(&mut rng, &b, bound);
            }
        }
    }

    /// Checks structural invariants, e.g. after deserialisation.
    pub fn validate(&self) -> Result<(), FlowError> {
        self.config.validate()?;
        let k = self.config.blocks;
        if self.blocks.len() != k || self.permutations.len() != k - 1 {
            return Err(FlowError::Config("block or permutation count disagrees with k".into()));
        }
        if self.resample_plan != resample_plan(k) {
            return Err(FlowError::Config("unexpected resample plan".into()));
        }
        let channels = block_channels(&self.resample_plan);
        for (j, p) in self.permutations.iter().enumerate() {
            if !is_permutation(p, channels[j]) {
                return Err(FlowError::Config(format!("permutation {j} is not a bijection")));
            }
        }
        let ks = self.config.kernel_size;
        let hid = self.config.hidden_channels;
        for (j, block) in self.blocks.iter().enumerate() {
            let half = channels[j] / 2;
            for sub in [&block.subnet_a, &block.subnet_b] {
                let ok = sub.conv1.kernel.shape() == [hid, half, ks, ks]
                    && sub.conv1.bias.shape() == [hid]
                    && sub.conv2.kernel.shape() == [2 * half, hid, ks, ks]
                    && sub.conv2.bias.shape() == [2 * half];
                if !ok {
                    return Err(FlowError::Config(format!("block {j} has inconsistent shapes")));
                }
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.blocks.iter().flat_map(|b| b.tensors()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect()
    }

    /// Stable names matching [`FlowModel::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.blocks.len() * PARAMS_PER_BLOCK);
        for j in 0..self.blocks.len() {
            for side in ["a", "b"] {
                for leaf in ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"] {
                    names.push(format!("block{j}.{side}.{leaf}"));
                }
            }
        }
        names
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Same model with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> FlowModel<U> {
        let conv = |c: &ConvParams<T>| ConvParams {
            kernel: c.kernel.cast(),
            bias: c.bias.cast(),
        };
        let sub = |s: &SubnetParams<T>| SubnetParams {
            conv1: conv(&s.conv1),
            conv2: conv(&s.conv2),
        };
        FlowModel {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| CouplingParams {
                    subnet_a: sub(&b.subnet_a),
                    subnet_b: sub(&b.subnet_b),
                })
                .collect(),
            permutations: self.permutations.clone(),
            resample_plan: self.resample_plan.clone(),
        }
    }

    /// Records all parameters on `tape`.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let mut vars = Vec::with_capacity(self.blocks.len() * PARAMS_PER_BLOCK);
        for b in &self.blocks {
            b.register(tape, trainable, &mut vars);
        }
        ModelVars(vars)
    }

    /// Spatial size factor every input side must be divisible by.
    pub fn spatial_factor(&self) -> usize {
        let downs = self
            .resample_plan
            .iter()
            .filter(|r| **r == Resample::Down)
            .count();
        1 << downs
    }

    fn check_input(&self, tape: &Tape<T>, a: Var, b: Var) -> Result<(), FlowError> {
        let [_, c, h, w] = tape.value(a).dims4("flow input")?;
        if tape.shape(a) != tape.shape(b) || c != 1 {
            return Err(FlowError::Tensor(TensorError::ShapeMismatch {
                op: "flow input",
                left: tape.shape(a).to_vec(),
                right: tape.shape(b).to_vec(),
            }));
        }
        let f = self.spatial_factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(FlowError::Divisibility {
                height: h,
                width: w,
                factor: f,
            });
        }
        Ok(())
    }

    fn split_halves(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var), TensorError> {
        let half = tape.shape(x)[1] / 2;
        Ok((tape.slice_channels(x, 0, half)?, tape.slice_channels(x, half, half)?))
    }

    /// Records `(y, z) = f(x1, x2)` for `[B, 1, H, W]` inputs.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        x1: Var,
        x2: Var,
    ) -> Result<(Var, Var), FlowError> {
        self.check_input(tape, x1, x2)?;
        let opts = self.config.subnet_options();
        let mut x = tape.concat_channels(x1, x2)?;
        let k = self.blocks.len();
        for j in 0..k {
            let bv = vars.block(j);
            let (u1, u2) = Self::split_halves(tape, x)?;
            let (v1, v2) = in_block(
                j,
                Direction::Forward,
                coupling_forward_vars(tape, &bv.a, &bv.b, u1, u2, opts),
            )?;
            x = tape.concat_channels(v1, v2)?;
            if j + 1 < k {
                x = tape.permute_channels(x, &self.permutations[j])?;
                x = match self.resample_plan[j] {
                    Resample::None => x,
                    Resample::Down => tape.squeeze2x2(x)?,
                    Resample::Up => tape.unsqueeze2x2(x)?,
                };
            }
        }
        let (mut y, z) = Self::split_halves(tape, x)?;
        if self.config.sigmoid_head {
            y = tape.sigmoid(y)?;
        }
        Ok((y, z))
    }

    /// Records `(x1_hat, x2_hat) = f^-1(y, z)`.
    pub fn inverse_on(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        y: Var,
        z: Var,
    ) -> Result<(Var, Var), FlowError> {
        self.check_input(tape, y, z)?;
        let opts = self.config.subnet_options();
        let y = if self.config.sigmoid_head {
            tape.logit(y, T::of(LOGIT_EPS))?
        } else {
            y
        };
        let mut x = tape.concat_channels(y, z)?;
        let k = self.blocks.len();
        for j in (0..k).rev() {
            if j + 1 < k {
                x = match self.resample_plan[j] {
                    Resample::None => x,
                    Resample::Down => tape.unsqueeze2x2(x)?,
                    Resample::Up => tape.squeeze2x2(x)?,
                };
                x = tape.permute_channels(x, &invert_permutation(&self.permutations[j]))?;
            }
            let bv = vars.block(j);
            let (v1, v2) = Self::split_halves(tape, x)?;
            let (u1, u2) = in_block(
                j,
                Direction::Inverse,
                coupling_inverse_vars(tape, &bv.a, &bv.b, v1, v2, opts),
            )?;
            x = tape.concat_channels(u1, u2)?;
        }
        Ok(Self::split_halves(tape, x)?)
    }

    /// Evaluates `(y, z) = f(x1, x2)` without recording gradients.
    pub fn forward(&self, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), FlowError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let a = tape.constant(x1.clone());
        let b = tape.constant(x2.clone());
        let (y, z) = self.forward_on(&mut tape, &vars, a, b)?;
        Ok((tape.value(y).clone(), tape.value(z).clone()))
    }

    /// Evaluates `(x1_hat, x2_hat) = f^-1(y, z)` without recording gradients.
    pub fn inverse(&self, y: &Tensor<T>, z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), FlowError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let a = tape.constant(y.clone());
        let b = tape.constant(z.clone());
        let (x1, x2) = self.inverse_on(&mut tape, &vars, a, b)?;
        Ok((tape.value(x1).clone(), tape.value(x2).clone()))
    }
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &v) in p.iter().enumerate() {
        inv[v] = i;
    }
    inv
}
