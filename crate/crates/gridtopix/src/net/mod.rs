//! Policy/value networks: grid-side and pixel-side encoders over a shared
//! recurrent (or feed-forward) core with per-agent actor heads and a critic.

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GruNodes, NodeId};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Observation/action contract of one task, as needed to size a network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskDescriptor {
    pub task_id: String,
    /// Grid-side observation shape: `[C,H,W]` for spatial tensors or `[D]`
    /// for 1D perfect-perception vectors.
    pub grid_obs_shape: Vec<usize>,
    /// Pixel-side observation shape, always `[C,H,W]`.
    pub pixel_obs_shape: Vec<usize>,
    /// Low-dimensional auxiliary input (e.g. relative goal), 0 when absent.
    pub aux_dim: usize,
    /// Action-set size per controlled agent.
    pub action_sizes: Vec<usize>,
    /// Whether policies for this task carry a recurrent core.
    pub recurrent: bool,
}

impl TaskDescriptor {
    pub fn n_agents(&self) -> usize {
        self.action_sizes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Grid,
    Pixel,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Grid => write!(f, "grid"),
            Side::Pixel => write!(f, "pixel"),
        }
    }
}

/// Width knobs. Desk-scale defaults keep CPU training and full-network
/// gradient checks tractable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub pixel_channels: Vec<usize>,
    pub grid_channels: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub feature_dim: usize,
    pub core_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            pixel_channels: vec![16, 32, 32],
            grid_channels: vec![16, 32],
            mlp_hidden: vec![64, 64],
            kernel: 4,
            stride: 2,
            feature_dim: 128,
            core_dim: 128,
        }
    }
}

impl ArchConfig {
    /// Shrunk sizes for whole-network finite-difference checks (< 5k params
    /// on the 1x64x64 pixel observation).
    pub fn tiny() -> Self {
        ArchConfig {
            pixel_channels: vec![4, 8, 6],
            grid_channels: vec![4, 6],
            mlp_hidden: vec![8, 8],
            kernel: 4,
            stride: 2,
            feature_dim: 10,
            core_dim: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderDesc {
    Conv {
        in_shape: Vec<usize>,
        channels: Vec<usize>,
        kernel: usize,
        stride: usize,
    },
    Mlp {
        in_dim: usize,
        hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoreDesc {
    Gru { dim: usize },
    FeedForward { dim: usize },
}

impl CoreDesc {
    pub fn dim(&self) -> usize {
        match self {
            CoreDesc::Gru { dim } | CoreDesc::FeedForward { dim } => *dim,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, CoreDesc::Gru { .. })
    }
}

/// Everything needed to rebuild the parameter shapes of a network; stored
/// verbatim in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchDescriptor {
    pub task_id: String,
    pub side: Side,
    pub obs_shape: Vec<usize>,
    pub aux_dim: usize,
    pub action_sizes: Vec<usize>,
    pub feature_dim: usize,
    pub encoder: EncoderDesc,
    pub core: CoreDesc,
}

#[derive(Debug, Clone)]
pub struct PolicyNet<S: Scalar> {
    pub arch: ArchDescriptor,
    pub params: ParamSet<S>,
}

/// Per-agent distributions and the sampled joint action for one step.
#[derive(Debug, Clone)]
pub struct AgentStep {
    pub dists: Vec<Vec<f32>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
    pub value: f32,
    pub h_new: Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    Sample,
    Argmax,
}

/// Registered parameter leaves for one graph; build once per graph and
/// reuse across unrolled steps.
pub struct ParamNodes {
    enc: Vec<(NodeId, NodeId)>, // (w, b) per layer
    core_gru: Option<GruNodes>,
    core_ff: Option<(NodeId, NodeId)>,
    actors: Vec<(NodeId, NodeId)>,
    critic: (NodeId, NodeId),
}

/// Network outputs for a batch of rows.
pub struct ForwardOut {
    /// Per-agent logits `[B, n_actions_i]`.
    pub logits: Vec<NodeId>,
    /// State-value estimates `[B]`.
    pub value: NodeId,
    /// New recurrent state `[B, core_dim]` (input state for feed-forward cores).
    pub h_new: NodeId,
}

fn conv_out(h: usize, k: usize, s: usize) -> Result<usize> {
    crate::kernels::conv_out_dim(h, k, s, 0)
        .ok_or_else(|| Error::Validation(format!("conv layer shrinks {h} below kernel {k}")))
}

/// Output feature length of an encoder stack, validating shapes on the way.
fn conv_stack_out(in_shape: &[usize], channels: &[usize], k: usize, s: usize) -> Result<usize> {
    let (mut h, mut w) = (in_shape[1], in_shape[2]);
    for _ in channels {
        h = conv_out(h, k, s)?;
        w = conv_out(w, k, s)?;
    }
    Ok(channels.last().copied().unwrap_or(in_shape[0]) * h * w)
}

/// Build an initialized policy network for one side of a task.
///
/// He-scaled uniform initialization everywhere except the actor and critic
/// heads, which start at zero so the initial action distribution is uniform.
pub fn build_policy<S: Scalar>(
    task: &TaskDescriptor,
    side: Side,
    arch: &ArchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyNet<S>> {
    if arch.feature_dim == 0 || arch.core_dim == 0 || arch.kernel == 0 || arch.stride == 0 {
        return Err(Error::Validation("arch dimensions must be positive".into()));
    }
    if task.action_sizes.is_empty() || task.action_sizes.iter().any(|&n| n == 0) {
        return Err(Error::Validation(
            "task must declare at least one agent with a nonempty action set".into(),
        ));
    }
    let obs_shape = match side {
        Side::Grid => task.grid_obs_shape.clone(),
        Side::Pixel => task.pixel_obs_shape.clone(),
    };
    let encoder = match obs_shape.len() {
        1 => EncoderDesc::Mlp {
            in_dim: obs_shape[0],
            hidden: arch.mlp_hidden.clone(),
        },
        3 => {
            let channels = match side {
                Side::Grid => arch.grid_channels.clone(),
                Side::Pixel => arch.pixel_channels.clone(),
            };
            conv_stack_out(&obs_shape, &channels, arch.kernel, arch.stride)?;
            EncoderDesc::Conv {
                in_shape: obs_shape.clone(),
                channels,
                kernel: arch.kernel,
                stride: arch.stride,
            }
        }
        _ => {
            return Err(Error::Validation(format!(
                "unsupported observation rank {:?}",
                obs_shape
            )))
        }
    };
    let core = if task.recurrent {
        CoreDesc::Gru { dim: arch.core_dim }
    } else {
        CoreDesc::FeedForward { dim: arch.core_dim }
    };
    let arch_desc = ArchDescriptor {
        task_id: task.task_id.clone(),
        side,
        obs_shape,
        aux_dim: task.aux_dim,
        action_sizes: task.action_sizes.clone(),
        feature_dim: arch.feature_dim,
        encoder,
        core,
    };
    Ok(PolicyNet {
        params: init_params(&arch_desc, rng),
        arch: arch_desc,
    })
}

fn he_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let data: Vec<S> = (0..shape.iter().product())
        .map(|_| S::from_f64_lossy(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn init_params<S: Scalar>(arch: &ArchDescriptor, rng: &mut ChaCha8Rng) -> ParamSet<S> {
    let mut p = ParamSet::new();
    let feat = arch.feature_dim;
    match &arch.encoder {
        EncoderDesc::Conv {
            in_shape,
            channels,
            kernel,
            stride,
        } => {
            let mut c_in = in_shape[0];
            for (i, &c_out) in channels.iter().enumerate() {
                let fan = c_in * kernel * kernel;
                p.add(
                    &format!("enc.conv{i}.w"),
                    he_uniform(&[c_out, c_in, *kernel, *kernel], fan, rng),
                );
                p.add(&format!("enc.conv{i}.b"), Tensor::zeros(&[c_out]));
                c_in = c_out;
            }
            let flat = conv_stack_out(in_shape, channels, *kernel, *stride).unwrap();
            p.add("enc.fc.w", he_uniform(&[flat, feat], flat, rng));
            p.add("enc.fc.b", Tensor::zeros(&[feat]));
        }
        EncoderDesc::Mlp { in_dim, hidden } => {
            let mut d = *in_dim;
            for (i, &h) in hidden.iter().enumerate() {
                p.add(&format!("enc.mlp{i}.w"), he_uniform(&[d, h], d, rng));
                p.add(&format!("enc.mlp{i}.b"), Tensor::zeros(&[h]));
                d = h;
            }
            p.add("enc.fc.w", he_uniform(&[d, feat], d, rng));
            p.add("enc.fc.b", Tensor::zeros(&[feat]));
        }
    }
    let core_in = feat + arch.aux_dim;
    let d_h = arch.core.dim();
    match &arch.core {
        CoreDesc::Gru { .. } => {
            let limit_fan = d_h;
            p.add("core.gru.w_ih", he_uniform(&[core_in, 3 * d_h], limit_fan, rng));
            p.add("core.gru.w_hh", he_uniform(&[d_h, 3 * d_h], limit_fan, rng));
            p.add("core.gru.b_ih", Tensor::zeros(&[3 * d_h]));
            p.add("core.gru.b_hh", Tensor::zeros(&[3 * d_h]));
        }
        CoreDesc::FeedForward { .. } => {
            p.add("core.ff.w", he_uniform(&[core_in, d_h], core_in, rng));
            p.add("core.ff.b", Tensor::zeros(&[d_h]));
        }
    }
    for (i, &n) in arch.action_sizes.iter().enumerate() {
        p.add(&format!("head.actor{i}.w"), Tensor::zeros(&[d_h, n]));
        p.add(&format!("head.actor{i}.b"), Tensor::zeros(&[n]));
    }
    p.add("head.critic.w", Tensor::zeros(&[d_h, 1]));
    p.add("head.critic.b", Tensor::zeros(&[1]));
    p
}

impl<S: Scalar> PolicyNet<S> {
    pub fn n_agents(&self) -> usize {
        self.arch.action_sizes.len()
    }

    pub fn core_dim(&self) -> usize {
        self.arch.core.dim()
    }

    pub fn is_recurrent(&self) -> bool {
        self.arch.core.is_recurrent()
    }

    pub fn initial_state(&self) -> Tensor<S> {
        Tensor::zeros(&[1, self.core_dim()])
    }

    pub fn initial_state_batch(&self, b: usize) -> Tensor<S> {
        Tensor::zeros(&[b, self.core_dim()])
    }

    /// Error unless this net was built for the given task/side.
    pub fn ensure_matches(&self, task_id: &str, side: Side) -> Result<()> {
        if self.arch.task_id != task_id || self.arch.side != side {
            return Err(Error::CheckpointArch(format!(
                "expected {task_id}/{side}, checkpoint holds {}/{}",
                self.arch.task_id, self.arch.side
            )));
        }
        Ok(())
    }

    /// Register every parameter as a graph leaf. Call once per graph.
    pub fn param_nodes(&self, g: &mut Graph<S>) -> ParamNodes {
        let slot = |name: &str| self.params.slot_of(name).expect("param name");
        let mut enc = Vec::new();
        match &self.arch.encoder {
            EncoderDesc::Conv { channels, .. } => {
                for i in 0..channels.len() {
                    enc.push((
                        g.param(&self.params, slot(&format!("enc.conv{i}.w"))),
                        g.param(&self.params, slot(&format!("enc.conv{i}.b"))),
                    ));
                }
            }
            EncoderDesc::Mlp { hidden, .. } => {
                for i in 0..hidden.len() {
                    enc.push((
                        g.param(&self.params, slot(&format!("enc.mlp{i}.w"))),
                        g.param(&self.params, slot(&format!("enc.mlp{i}.b"))),
                    ));
                }
            }
        }
        enc.push((
            g.param(&self.params, slot("enc.fc.w")),
            g.param(&self.params, slot("enc.fc.b")),
        ));
        let (core_gru, core_ff) = match &self.arch.core {
            CoreDesc::Gru { .. } => (
                Some(GruNodes {
                    w_ih: g.param(&self.params, slot("core.gru.w_ih")),
                    w_hh: g.param(&self.params, slot("core.gru.w_hh")),
                    b_ih: g.param(&self.params, slot("core.gru.b_ih")),
                    b_hh: g.param(&self.params, slot("core.gru.b_hh")),
                }),
                None,
            ),
            CoreDesc::FeedForward { .. } => (
                None,
                Some((
                    g.param(&self.params, slot("core.ff.w")),
                    g.param(&self.params, slot("core.ff.b")),
                )),
            ),
        };
        let actors = (0..self.n_agents())
            .map(|i| {
                (
                    g.param(&self.params, slot(&format!("head.actor{i}.w"))),
                    g.param(&self.params, slot(&format!("head.actor{i}.b"))),
                )
            })
            .collect();
        let critic = (
            g.param(&self.params, slot("head.critic.w")),
            g.param(&self.params, slot("head.critic.b")),
        );
        ParamNodes {
            enc,
            core_gru,
            core_ff,
            actors,
            critic,
        }
    }

    /// Encode a batch of observations `[N, ...obs_shape]` to `[N, feature_dim]`.
    pub fn encode(&self, g: &mut Graph<S>, pn: &ParamNodes, obs: NodeId) -> Result<NodeId> {
        let n = g.value(obs).shape()[0];
        let mut x = obs;
        match &self.arch.encoder {
            EncoderDesc::Conv { stride, .. } => {
                let n_conv = pn.enc.len() - 1;
                for (w, b) in &pn.enc[..n_conv] {
                    let c = g.conv2d(x, *w, *b, *stride, 0)?;
                    x = g.relu(c);
                }
                let flat: usize = g.value(x).numel() / n;
                x = g.reshape(x, &[n, flat])?;
            }
            EncoderDesc::Mlp { .. } => {
                let n_mlp = pn.enc.len() - 1;
                for (w, b) in &pn.enc[..n_mlp] {
                    let l = g.linear(x, *w, *b)?;
                    x = g.relu(l);
                }
            }
        }
        let (fw, fb) = pn.enc[pn.enc.len() - 1];
        let f = g.linear(x, fw, fb)?;
        Ok(g.relu(f))
    }

    /// One core step: features (+aux) and previous hidden state to new
    /// hidden state.
    pub fn core_step(
        &self,
        g: &mut Graph<S>,
        pn: &ParamNodes,
        feat: NodeId,
        aux: Option<NodeId>,
        h_prev: NodeId,
    ) -> Result<NodeId> {
        let x = match aux {
            Some(a) => g.concat_cols(&[feat, a])?,
            None => feat,
        };
        match &self.arch.core {
            CoreDesc::Gru { .. } => g.gru_cell(x, h_prev, pn.core_gru.unwrap()),
            CoreDesc::FeedForward { .. } => {
                let (w, b) = pn.core_ff.unwrap();
                let l = g.linear(x, w, b)?;
                Ok(g.relu(l))
            }
        }
    }

    /// Actor logits (per agent) and critic value from core output `[B, d_h]`.
    pub fn heads(&self, g: &mut Graph<S>, pn: &ParamNodes, h: NodeId) -> Result<(Vec<NodeId>, NodeId)> {
        let mut logits = Vec::with_capacity(self.n_agents());
        for (w, b) in &pn.actors {
            logits.push(g.linear(h, *w, *b)?);
        }
        let (cw, cb) = pn.critic;
        let v = g.linear(h, cw, cb)?;
        let b = g.value(v).shape()[0];
        let v = g.reshape(v, &[b])?;
        Ok((logits, v))
    }

    /// Full single-step forward for a row batch.
    pub fn forward_step(
        &self,
        g: &mut Graph<S>,
        pn: &ParamNodes,
        obs: NodeId,
        aux: Option<NodeId>,
        h_prev: NodeId,
    ) -> Result<ForwardOut> {
        let feat = self.encode(g, pn, obs)?;
        let h_new = self.core_step(g, pn, feat, aux, h_prev)?;
        let (logits, value) = self.heads(g, pn, h_new)?;
        Ok(ForwardOut {
            logits,
            value,
            h_new,
        })
    }
}

/// Sample by inverse CDF over the probability vector (platform-stable).
pub fn sample_inverse_cdf(dist: &[f32], u: f64) -> usize {
    let mut acc = 0.0f64;
    for (i, &p) in dist.iter().enumerate() {
        acc += p as f64;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Lowest index among maximal entries.
pub fn argmax_tie_low(dist: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in dist.iter().enumerate().skip(1) {
        if v > dist[best] {
            best = i;
        }
    }
    best
}

/// Run the policy on one observation. Deterministic given the same
/// arguments and RNG state; argmax mode breaks ties toward the lowest
/// action index.
pub fn policy_step(
    net: &PolicyNet<f32>,
    obs: &Tensor<f32>,
    aux: Option<&[f32]>,
    h_prev: &Tensor<f32>,
    mode: StepMode,
    rng: &mut ChaCha8Rng,
) -> Result<AgentStep> {
    let mut expected = vec![1usize];
    expected.extend_from_slice(&net.arch.obs_shape);
    let obs_b = if obs.shape() == net.arch.obs_shape.as_slice() {
        obs.clone().reshaped(&expected)?
    } else if obs.shape() == expected.as_slice() {
        obs.clone()
    } else {
        return Err(Error::dim("policy_step obs", obs.shape(), &net.arch.obs_shape));
    };
    if h_prev.shape() != [1, net.core_dim()] {
        return Err(Error::dim("policy_step state", h_prev.shape(), &[1, net.core_dim()]));
    }
    let aux_vec = match (net.arch.aux_dim, aux) {
        (0, None) => None,
        (d, Some(a)) if a.len() == d => Some(a.to_vec()),
        (d, got) => {
            return Err(Error::dim(
                "policy_step aux",
                &[got.map(|a| a.len()).unwrap_or(0)],
                &[d],
            ))
        }
    };

    let mut g = Graph::new();
    let pn = net.param_nodes(&mut g);
    let obs_node = g.input(obs_b);
    let aux_node = match aux_vec {
        Some(a) => Some(g.input(Tensor::new(&[1, a.len()], a)?)),
        None => None,
    };
    let h_node = g.input(h_prev.clone());
    let out = net.forward_step(&mut g, &pn, obs_node, aux_node, h_node)?;

    let mut dists = Vec::with_capacity(net.n_agents());
    let mut actions = Vec::with_capacity(net.n_agents());
    let mut log_probs = Vec::with_capacity(net.n_agents());
    for logit_node in &out.logits {
        let ls = g.log_softmax(*logit_node)?;
        let lsd = g.value(ls).data();
        let dist: Vec<f32> = lsd.iter().map(|v| v.exp()).collect();
        let action = match mode {
            StepMode::Argmax => argmax_tie_low(&dist),
            StepMode::Sample => sample_inverse_cdf(&dist, rng.gen::<f64>()),
        };
        log_probs.push(lsd[action]);
        actions.push(action);
        dists.push(dist);
    }
    Ok(AgentStep {
        dists,
        actions,
        log_probs,
        value: g.value(out.value).data()[0],
        h_new: g.value(out.h_new).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn nav_task() -> TaskDescriptor {
        TaskDescriptor {
            task_id: "gridnav".into(),
            grid_obs_shape: vec![2, 15, 15],
            pixel_obs_shape: vec![1, 64, 64],
            aux_dim: 2,
            action_sizes: vec![4],
            recurrent: true,
        }
    }

    #[test]
    fn grid_and_pixel_share_feature_and_head_shapes() {
        let task = nav_task();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g: PolicyNet<f32> =
            build_policy(&task, Side::Grid, &ArchConfig::default(), &mut rng).unwrap();
        let p: PolicyNet<f32> =
            build_policy(&task, Side::Pixel, &ArchConfig::default(), &mut rng).unwrap();
        assert_eq!(g.arch.feature_dim, p.arch.feature_dim);
        assert_eq!(g.arch.action_sizes, p.arch.action_sizes);
        assert_eq!(g.core_dim(), p.core_dim());
    }

    #[test]
    fn zero_actor_head_gives_uniform_distribution_and_exact_entropy() {
        let task = nav_task();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net: PolicyNet<f32> =
            build_policy(&task, Side::Grid, &ArchConfig::default(), &mut rng).unwrap();
        let obs = Tensor::full(&[2, 15, 15], 0.5);
        let h = net.initial_state();
        let step = policy_step(&net, &obs, Some(&[0.3, -0.2]), &h, StepMode::Sample, &mut rng).unwrap();
        for &p in &step.dists[0] {
            assert_eq!(p, 0.25);
        }
        let entropy: f32 = -step.dists[0]
            .iter()
            .map(|&p| p * p.ln())
            .sum::<f32>();
        assert_eq!(entropy, (4.0f32).ln());
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_tie_low(&[2.0, 2.0, 1.0]), 0);
        assert_eq!(argmax_tie_low(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn policy_step_is_deterministic_under_same_rng_seed() {
        let task = nav_task();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net: PolicyNet<f32> =
            build_policy(&task, Side::Pixel, &ArchConfig::tiny(), &mut rng).unwrap();
        let obs = Tensor::full(&[1, 64, 64], 0.1);
        let h = net.initial_state();
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let s1 = policy_step(&net, &obs, Some(&[0.0, 1.0]), &h, StepMode::Sample, &mut r1).unwrap();
        let s2 = policy_step(&net, &obs, Some(&[0.0, 1.0]), &h, StepMode::Sample, &mut r2).unwrap();
        assert_eq!(s1.actions, s2.actions);
        assert_eq!(s1.dists, s2.dists);
        assert_eq!(s1.value, s2.value);
        assert_eq!(s1.h_new.data(), s2.h_new.data());
    }

    #[test]
    fn log_prob_matches_distribution() {
        let task = nav_task();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net: PolicyNet<f32> =
            build_policy(&task, Side::Grid, &ArchConfig::tiny(), &mut rng).unwrap();
        let obs = Tensor::full(&[2, 15, 15], 0.25);
        let h = net.initial_state();
        let step = policy_step(&net, &obs, Some(&[1.0, 0.5]), &h, StepMode::Sample, &mut rng).unwrap();
        let a = step.actions[0];
        assert!((step.log_probs[0] - step.dists[0][a].ln()).abs() < 1e-6);
        let total: f32 = step.dists[0].iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn obs_shape_mismatch_is_dimension_error() {
        let task = nav_task();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net: PolicyNet<f32> =
            build_policy(&task, Side::Grid, &ArchConfig::tiny(), &mut rng).unwrap();
        let bad = Tensor::full(&[1, 15, 15], 0.0);
        let h = net.initial_state();
        let err = policy_step(&net, &bad, Some(&[0.0, 0.0]), &h, StepMode::Argmax, &mut rng);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
