//! The lifting network: an input graph layer, residual blocks of graph
//! layers (or graph + temporal convolution layers for frame windows), and a
//! per-joint regression head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnState, PairIndex, ParamId, ParamSet, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM};
use crate::dynamic::{
    default_embed_dim, BaseGraphInit, DynamicGraphParams, DynamicOptions, DynamicVariant, TemporalOffsets,
};
use crate::error::{ModelError, TensorError};
use crate::layers::{
    aggregate_unchecked, gcn_forward, hcsf_forward, make_channel_schedule_with, uniform_init, Fusion, HcsfLayer,
    HcsfOptions, HopGroups, PairBank,
};
use crate::rng::{self, Rng};
use crate::skeleton::{compute_hop_partition, normalize_adjacency, HopPartition, NormMode, SkeletonTopology};

/// Which graph layer the network is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Shared weights over the symmetric-normalized short-range graph.
    StaticGcn,
    /// Per-pair weights over every node within `l_hop` (multi-hop locally
    /// connected baseline).
    StaticLcn,
    /// Fusion layers on fixed normalized hop graphs.
    HcsfStatic,
    /// Fusion layers on learned graphs.
    #[default]
    HcsfDynamic,
    /// Learned graphs whose offsets come from temporally filtered features.
    HcsfDynamicTemporal,
}

/// Settings of the learned graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicConfig {
    pub variant: DynamicVariant,
    pub base_init: BaseGraphInit,
    pub mask_base: bool,
    pub share_offsets: bool,
    pub freeze_alpha: bool,
    /// Offset embedding width; `max(4, C_in/4)` when unset.
    pub embed_dim: Option<usize>,
    /// Weights for every joint pair in every hop branch, so learned graphs
    /// can connect joints outside the hop set.
    pub dense_support: bool,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        DynamicConfig {
            variant: DynamicVariant::Combined,
            base_init: BaseGraphInit::Physical,
            mask_base: true,
            share_offsets: false,
            freeze_alpha: false,
            embed_dim: None,
            dense_support: false,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub s_hop: usize,
    pub l_hop: usize,
    pub squeeze_ratio: f64,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub graph_mode: GraphMode,
    pub temporal_frames: usize,
    pub temporal_kernel: usize,
    pub temporal_dilation: usize,
    pub dropout_p: f64,
    pub leaky_alpha: f64,
    pub fusion: Fusion,
    pub seed: u64,
    pub norm: NormMode,
    pub long_range_cumulative: bool,
    pub schedule_exponent_from_l: bool,
    pub shared_fuse: bool,
    /// Multiplier on the regression head, in target units.
    pub output_scale: f64,
    /// Debug switch: blocks return their input unchanged.
    pub ablate_residual: bool,
    pub dynamic: DynamicConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            s_hop: 1,
            l_hop: 2,
            squeeze_ratio: 0.125,
            blocks: 2,
            layers_per_block: 2,
            graph_mode: GraphMode::HcsfDynamic,
            temporal_frames: 1,
            temporal_kernel: 3,
            temporal_dilation: 1,
            dropout_p: 0.25,
            leaky_alpha: 0.2,
            fusion: Fusion::Concat,
            seed: 0,
            norm: NormMode::Row,
            long_range_cumulative: false,
            schedule_exponent_from_l: false,
            shared_fuse: false,
            output_scale: 100.0,
            ablate_residual: false,
            dynamic: DynamicConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn is_temporal(&self) -> bool {
        self.temporal_frames > 1 || self.graph_mode == GraphMode::HcsfDynamicTemporal
    }

    pub fn validate(&self, topo: &SkeletonTopology) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::ConfigInvalid(m));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.layers_per_block == 0 {
            return bad("layers_per_block must be positive".into());
        }
        let hops = compute_hop_partition(topo, 1)?;
        let diameter = hops.diameter().max(1);
        if self.s_hop < 1 || self.s_hop > self.l_hop || self.l_hop > diameter {
            return bad(format!(
                "need 1 <= s_hop ({}) <= l_hop ({}) <= topology diameter ({diameter})",
                self.s_hop, self.l_hop
            ));
        }
        if !(self.squeeze_ratio > 0.0 && self.squeeze_ratio <= 1.0) {
            return bad(format!("squeeze_ratio {} outside (0, 1]", self.squeeze_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !self.leaky_alpha.is_finite() {
            return bad("leaky_alpha must be finite".into());
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad("output_scale must be positive".into());
        }
        if self.temporal_frames == 0 {
            return bad("temporal_frames must be positive".into());
        }
        if self.is_temporal() {
            if self.temporal_kernel.is_multiple_of(2) {
                return bad(format!("temporal_kernel {} must be odd", self.temporal_kernel));
            }
            if self.temporal_dilation == 0 {
                return bad("temporal_dilation must be positive".into());
            }
            let span = self.temporal_dilation * (self.temporal_kernel - 1) + 1;
            if span > self.temporal_frames {
                return bad(format!(
                    "temporal kernel spans {span} frames but temporal_frames is {}",
                    self.temporal_frames
                ));
            }
        }
        if self.embed_dim() == Some(0) {
            return bad("dynamic.embed_dim must be positive".into());
        }
        Ok(())
    }

    fn embed_dim(&self) -> Option<usize> {
        self.dynamic.embed_dim
    }

    fn uses_dynamic(&self) -> bool {
        matches!(self.graph_mode, GraphMode::HcsfDynamic | GraphMode::HcsfDynamicTemporal)
    }
}

#[derive(Clone, Debug)]
enum GraphLayer {
    Gcn(ParamId),
    Lcn(PairBank),
    Hcsf(Box<HcsfLayer>, Option<DynamicGraphParams>),
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    state: usize,
}

#[derive(Clone, Debug)]
struct Unit {
    layer: UnitKind,
    norm: Norm,
}

#[derive(Clone, Debug)]
enum UnitKind {
    Graph(GraphLayer),
    Temporal(ParamId),
}

/// Mutable state carried between forward passes.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub bn: Vec<BnState>,
    pub dropout_rng: Rng,
}

/// A built network with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub topology: SkeletonTopology,
    pub hops: HopPartition,
    pub params: ParamSet,
    pub state: ModelState,
    groups: HopGroups,
    gcn_graph: Tensor,
    lcn_graph: Tensor,
    input: Unit,
    blocks: Vec<Vec<Unit>>,
    head_w: PairBank,
    head_b: ParamId,
}

/// Builds a model with freshly initialized parameters.
pub fn build_model(config: &ModelConfig, topo: &SkeletonTopology) -> Result<Model, ModelError> {
    config.validate(topo)?;
    let n = topo.num_nodes();
    let hops = compute_hop_partition(topo, config.l_hop.max(1))?;
    let groups = HopGroups::new(
        &hops,
        config.s_hop,
        config.l_hop,
        config.long_range_cumulative,
        config.norm,
    )?;
    let gcn_graph = normalize_adjacency(&hops.short_range(config.s_hop).to_tensor(), NormMode::Symmetric)?;
    let lcn_mask = hops.short_range(config.l_hop);
    let lcn_graph = normalize_adjacency(&lcn_mask.to_tensor(), config.norm)?;
    let mut params = ParamSet::new();
    let mut bn = Vec::new();
    let c = config.channels;

    let graph_unit =
        |params: &mut ParamSet, bn: &mut Vec<BnState>, name: &str, c_in: usize| -> Result<Unit, ModelError> {
            let seed = config.seed;
            let layer = match config.graph_mode {
                GraphMode::StaticGcn => {
                    let wn = format!("{name}.w");
                    GraphLayer::Gcn(params.add(&wn, uniform_init(&[c_in, c], c_in, seed, &wn), true))
                }
                GraphMode::StaticLcn => GraphLayer::Lcn(PairBank::register(
                    params,
                    &format!("{name}.w"),
                    &lcn_mask,
                    c_in,
                    c,
                    seed,
                )),
                _ => {
                    let schedule = make_channel_schedule_with(
                        c_in,
                        config.s_hop,
                        config.l_hop,
                        config.squeeze_ratio,
                        config.schedule_exponent_from_l,
                    )?;
                    let opts = HcsfOptions {
                        f_k: config.fusion,
                        f_a: config.fusion,
                        shared_fuse: config.shared_fuse,
                        dense_support: config.uses_dynamic() && config.dynamic.dense_support,
                        seed,
                    };
                    let layer = HcsfLayer::register(params, name, &groups, schedule, c, opts)?;
                    let dynamic = if config.uses_dynamic() {
                        let temporal =
                            (config.graph_mode == GraphMode::HcsfDynamicTemporal).then_some(TemporalOffsets {
                                kernel: config.temporal_kernel,
                                dilation: config.temporal_dilation,
                            });
                        let opts = DynamicOptions {
                            variant: config.dynamic.variant,
                            base_init: config.dynamic.base_init,
                            mask_base: config.dynamic.mask_base,
                            share_offsets: config.dynamic.share_offsets,
                            freeze_alpha: config.dynamic.freeze_alpha,
                            embed_dim: config.embed_dim().unwrap_or_else(|| default_embed_dim(c_in)),
                            temporal,
                            seed,
                        };
                        Some(DynamicGraphParams::register(
                            params,
                            &format!("{name}.graph"),
                            &groups,
                            c_in,
                            opts,
                        )?)
                    } else {
                        None
                    };
                    GraphLayer::Hcsf(Box::new(layer), dynamic)
                }
            };
            Ok(Unit {
                layer: UnitKind::Graph(layer),
                norm: norm(params, bn, name, n * c),
            })
        };

    let input = graph_unit(&mut params, &mut bn, "input", 2)?;
    let mut blocks = Vec::new();
    for b in 0..config.blocks {
        let mut units = Vec::new();
        if config.is_temporal() {
            units.push(graph_unit(&mut params, &mut bn, &format!("block{b}.graph"), c)?);
            let name = format!("block{b}.tcn");
            let fan_in = c * config.temporal_kernel;
            let k = params.add(
                format!("{name}.w"),
                uniform_init(
                    &[c, c, config.temporal_kernel],
                    fan_in,
                    config.seed,
                    &format!("{name}.w"),
                ),
                true,
            );
            units.push(Unit {
                layer: UnitKind::Temporal(k),
                norm: norm(&mut params, &mut bn, &name, n * c),
            });
        } else {
            for l in 0..config.layers_per_block {
                units.push(graph_unit(&mut params, &mut bn, &format!("block{b}.layer{l}"), c)?);
            }
        }
        blocks.push(units);
    }
    let head_w = PairBank::register(
        &mut params,
        "head.w",
        &crate::skeleton::BinaryMatrix::identity(n),
        c,
        3,
        config.seed,
    );
    let head_b = params.add("head.b", Tensor::zeros(&[n, 3]), true);
    Ok(Model {
        config: config.clone(),
        topology: topo.clone(),
        hops,
        params,
        state: ModelState {
            bn,
            dropout_rng: rng::stream(config.seed, "dropout"),
        },
        groups,
        gcn_graph,
        lcn_graph,
        input,
        blocks,
        head_w,
        head_b,
    })
}

fn norm(params: &mut ParamSet, bn: &mut Vec<BnState>, name: &str, features: usize) -> Norm {
    let gamma = params.add(format!("{name}.bn.gamma"), Tensor::full(&[features], 1.0), true);
    let beta = params.add(format!("{name}.bn.beta"), Tensor::zeros(&[features]), true);
    bn.push(BnState::new(features));
    Norm {
        gamma,
        beta,
        state: bn.len() - 1,
    }
}

/// Number of scalar parameters implied by `config` on `topo`, counted from
/// the hop structure without building the model.
pub fn expected_param_count(config: &ModelConfig, topo: &SkeletonTopology) -> Result<usize, ModelError> {
    config.validate(topo)?;
    let n = topo.num_nodes();
    let hops = compute_hop_partition(topo, config.l_hop)?;
    let c = config.channels;
    let count_within = |r: usize| {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| hops.dist(i, j) <= r)
            .count()
    };
    let count_ring = |k: usize| {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| {
                let d = hops.dist(i, j);
                if config.long_range_cumulative {
                    d <= k
                } else {
                    d == k
                }
            })
            .count()
    };
    let graph_layer = |c_in: usize| -> Result<usize, ModelError> {
        Ok(match config.graph_mode {
            GraphMode::StaticGcn => c_in * c,
            GraphMode::StaticLcn => count_within(config.l_hop) * c_in * c,
            _ => {
                let sched = make_channel_schedule_with(
                    c_in,
                    config.s_hop,
                    config.l_hop,
                    config.squeeze_ratio,
                    config.schedule_exponent_from_l,
                )?;
                let dense = config.uses_dynamic() && config.dynamic.dense_support;
                let pairs = |p: usize| if dense { n * n } else { p };
                let mut total = pairs(count_within(config.s_hop)) * c_in * c_in;
                for k in config.s_hop + 1..=config.l_hop {
                    total += pairs(count_ring(k)) * c_in * sched.width(k);
                }
                let fused = sched.fused_width(config.fusion, config.fusion);
                total += if config.shared_fuse { fused * c } else { n * fused * c };
                if config.uses_dynamic() {
                    let groups = 1 + config.l_hop - config.s_hop;
                    let v = config.dynamic.variant;
                    if v != DynamicVariant::OOnly {
                        total += groups * n * n;
                    }
                    if v != DynamicVariant::MOnly {
                        let e = config.embed_dim().unwrap_or_else(|| default_embed_dim(c_in));
                        let per = if config.graph_mode == GraphMode::HcsfDynamicTemporal {
                            e * c_in * config.temporal_kernel
                        } else {
                            c_in * e
                        };
                        let sets = if config.dynamic.share_offsets { 1 } else { groups };
                        total += 2 * sets * per;
                    }
                    if matches!(v, DynamicVariant::Combined | DynamicVariant::OOnly) {
                        total += 1;
                    }
                }
                total
            }
        })
    };
    let bn = 2 * n * c;
    let mut total = graph_layer(2)? + bn;
    for _ in 0..config.blocks {
        if config.is_temporal() {
            total += graph_layer(c)? + bn + c * c * config.temporal_kernel + bn;
        } else {
            total += config.layers_per_block * (graph_layer(c)? + bn);
        }
    }
    Ok(total + n * c * 3 + n * 3)
}

impl Model {
    pub fn num_nodes(&self) -> usize {
        self.topology.num_nodes()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Hop sets used by the fusion layers.
    pub fn hop_groups(&self) -> &HopGroups {
        &self.groups
    }

    /// Expected input shape for a batch of `b` samples: `[b, N, 2]`, or
    /// `[b, 2, T, N]` for temporal models.
    pub fn input_shape(&self, b: usize) -> Vec<usize> {
        if self.config.is_temporal() {
            vec![b, 2, self.config.temporal_frames, self.num_nodes()]
        } else {
            vec![b, self.num_nodes(), 2]
        }
    }

    /// Records a forward pass on `tape` and returns the `[B, N, 3]`
    /// prediction. In training mode batch statistics update `state` and
    /// dropout draws from its generator; single-sample batches fall back to
    /// the running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        state: &mut ModelState,
        training: bool,
    ) -> Result<Var, ModelError> {
        let n = self.num_nodes();
        let expect_b = input.shape().first().copied().unwrap_or(0);
        if input.shape() != self.input_shape(expect_b).as_slice() || expect_b == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                lhs: self.input_shape(expect_b.max(1)),
                rhs: input.shape().to_vec(),
            }
            .into());
        }
        let b = expect_b;
        let t = if self.config.is_temporal() {
            self.config.temporal_frames
        } else {
            1
        };
        // Frames are folded into the batch: [B·T, N, 2].
        let x = if self.config.is_temporal() {
            let d = input.data();
            let mut out = vec![0.0; b * t * n * 2];
            for bi in 0..b {
                for c in 0..2 {
                    for ti in 0..t {
                        for j in 0..n {
                            out[((bi * t + ti) * n + j) * 2 + c] = d[((bi * 2 + c) * t + ti) * n + j];
                        }
                    }
                }
            }
            Tensor::new(vec![b * t, n, 2], out)?
        } else {
            input.clone()
        };
        let ctx = Ctx { b, t };
        let x = tape.constant(x);
        let mut h = self.unit(tape, &self.input, x, ctx, state, training)?;
        h = self.activate(tape, h, state, training)?;
        for units in &self.blocks {
            if self.config.ablate_residual {
                continue;
            }
            let residual = h;
            let mut y = h;
            for (ui, unit) in units.iter().enumerate() {
                y = self.unit(tape, unit, y, ctx, state, training)?;
                if ui + 1 < units.len() {
                    y = self.activate(tape, y, state, training)?;
                }
            }
            y = tape.add(y, residual)?;
            h = self.activate(tape, y, state, training)?;
        }
        if self.config.is_temporal() {
            let c = self.config.channels;
            let h4 = tape.reshape(h, &[b, t, n, c])?;
            h = tape.select_frame(h4, t / 2)?;
        }
        let w = tape.param(self.head_w.weights);
        let y = tape.pair_aggregate(h, None, w, self.head_w.index.clone())?;
        let bias = tape.param(self.head_b);
        let y = tape.add(y, bias)?;
        Ok(tape.scale(y, self.config.output_scale))
    }

    fn activate(&self, tape: &mut Tape, x: Var, state: &mut ModelState, training: bool) -> Result<Var, ModelError> {
        let y = tape.leaky_relu(x, self.config.leaky_alpha);
        Ok(tape.dropout(y, self.config.dropout_p, training, &mut state.dropout_rng)?)
    }

    fn unit(
        &self,
        tape: &mut Tape,
        unit: &Unit,
        x: Var,
        ctx: Ctx,
        state: &mut ModelState,
        training: bool,
    ) -> Result<Var, ModelError> {
        let y = match &unit.layer {
            UnitKind::Graph(layer) => self.graph_layer(tape, layer, x, ctx)?,
            UnitKind::Temporal(k) => {
                let c = self.config.channels;
                let n = self.num_nodes();
                let x4 = tape.reshape(x, &[ctx.b, ctx.t, n, c])?;
                let k = tape.param(*k);
                let y = tape.conv1d_temporal(x4, k, 1, self.config.temporal_dilation)?;
                tape.reshape(y, &[ctx.b * ctx.t, n, c])?
            }
        };
        let gamma = tape.param(unit.norm.gamma);
        let beta = tape.param(unit.norm.beta);
        let rows = tape.shape(y)[0];
        let bn_state = &mut state.bn[unit.norm.state];
        Ok(tape.batch_norm(y, gamma, beta, bn_state, training && rows > 1, BN_EPS, BN_MOMENTUM)?)
    }

    fn graph_layer(&self, tape: &mut Tape, layer: &GraphLayer, x: Var, ctx: Ctx) -> Result<Var, ModelError> {
        Ok(match layer {
            GraphLayer::Gcn(w) => {
                let a = tape.constant(self.gcn_graph.clone());
                let w = tape.param(*w);
                gcn_forward(tape, a, x, w)?
            }
            GraphLayer::Lcn(bank) => {
                let a = tape.constant(self.lcn_graph.clone());
                aggregate_unchecked(tape, Some(a), x, bank)?
            }
            GraphLayer::Hcsf(layer, None) => {
                let graphs: Vec<Var> = self.groups.graphs.iter().map(|g| tape.constant(g.clone())).collect();
                hcsf_forward(tape, layer, x, &graphs)?
            }
            GraphLayer::Hcsf(layer, Some(dynamic)) => {
                let src = if dynamic.temporal.is_some() {
                    let s = tape.shape(x).to_vec();
                    tape.reshape(x, &[ctx.b, ctx.t, s[1], s[2]])?
                } else {
                    x
                };
                let graphs = dynamic.graphs(tape, src)?;
                hcsf_forward(tape, layer, x, &graphs)?
            }
        })
    }

    /// Eval-mode prediction without touching the stored state.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        let mut state = self.state.clone();
        let mut tape = Tape::with_params(&self.params);
        let y = self.forward(&mut tape, input, &mut state, false)?;
        Ok(tape.tensor(y))
    }

    /// Names of the learnable graph scales, with their current values.
    pub fn alphas(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.ends_with(".alpha"))
            .map(|(_, p)| (p.name.clone(), p.value.data()[0]))
            .collect()
    }

    /// Pairs indexed by the per-node regression head.
    pub fn head_index(&self) -> &PairIndex {
        &self.head_w.index
    }
}

#[derive(Clone, Copy, Debug)]
struct Ctx {
    b: usize,
    t: usize,
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::autodiff::{check_params, CheckOptions};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "input");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.sample(StandardNormal)).collect()).unwrap()
    }

    fn small(mode: GraphMode) -> ModelConfig {
        ModelConfig {
            channels: 8,
            graph_mode: mode,
            ..ModelConfig::default()
        }
    }

    const MODES: [GraphMode; 4] = [
        GraphMode::StaticGcn,
        GraphMode::StaticLcn,
        GraphMode::HcsfStatic,
        GraphMode::HcsfDynamic,
    ];

    #[test]
    fn single_frame_shapes() {
        let topo = SkeletonTopology::h36m17();
        let model = build_model(&ModelConfig::default(), &topo).unwrap();
        let y = model.predict(&randn(&[1, 17, 2], 0)).unwrap();
        assert_eq!(y.shape(), &[1, 17, 3]);
        for mode in MODES {
            let model = build_model(&small(mode), &topo).unwrap();
            let y = model.predict(&randn(&[3, 17, 2], 0)).unwrap();
            assert_eq!(y.shape(), &[3, 17, 3]);
            assert!(y.all_finite());
            assert!(model.predict(&randn(&[3, 16, 2], 0)).is_err());
        }
    }

    #[test]
    fn temporal_shapes() {
        let topo = SkeletonTopology::h36m17();
        let cfg = ModelConfig {
            channels: 8,
            temporal_frames: 9,
            temporal_kernel: 3,
            graph_mode: GraphMode::HcsfDynamicTemporal,
            ..ModelConfig::default()
        };
        let model = build_model(&cfg, &topo).unwrap();
        let y = model.predict(&randn(&[2, 2, 9, 17], 0)).unwrap();
        assert_eq!(y.shape(), &[2, 17, 3]);
        assert!(model.predict(&randn(&[2, 17, 2], 0)).is_err());
        let bad = ModelConfig {
            temporal_frames: 2,
            ..cfg.clone()
        };
        assert!(matches!(build_model(&bad, &topo), Err(ModelError::ConfigInvalid(_))));
        let even = ModelConfig {
            temporal_kernel: 4,
            ..cfg
        };
        assert!(matches!(build_model(&even, &topo), Err(ModelError::ConfigInvalid(_))));
    }

    #[test]
    fn config_validation() {
        let topo = SkeletonTopology::h36m17();
        for cfg in [
            ModelConfig {
                l_hop: 9,
                ..ModelConfig::default()
            },
            ModelConfig {
                s_hop: 3,
                l_hop: 2,
                ..ModelConfig::default()
            },
            ModelConfig {
                squeeze_ratio: 0.0,
                ..ModelConfig::default()
            },
            ModelConfig {
                dropout_p: 1.0,
                ..ModelConfig::default()
            },
            ModelConfig {
                channels: 0,
                ..ModelConfig::default()
            },
        ] {
            assert!(
                matches!(build_model(&cfg, &topo), Err(ModelError::ConfigInvalid(_))),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn eval_is_deterministic_and_sample_independent() {
        let topo = SkeletonTopology::h36m17();
        let model = build_model(&small(GraphMode::HcsfDynamic), &topo).unwrap();
        let one = randn(&[1, 17, 2], 4);
        let rep = Tensor::new(vec![4, 17, 2], one.data().repeat(4)).unwrap();
        let a = model.predict(&rep).unwrap();
        let b = model.predict(&rep).unwrap();
        assert_eq!(a, b);
        for s in 1..4 {
            assert_eq!(a.data()[..51], a.data()[s * 51..(s + 1) * 51]);
        }
    }

    #[test]
    fn param_count_matches_registry() {
        let topo = SkeletonTopology::h36m17();
        let mut cfgs: Vec<ModelConfig> = MODES.iter().map(|&m| small(m)).collect();
        cfgs.push(ModelConfig {
            l_hop: 4,
            s_hop: 2,
            squeeze_ratio: 0.5,
            ..small(GraphMode::HcsfStatic)
        });
        cfgs.push(ModelConfig {
            fusion: Fusion::Sum,
            squeeze_ratio: 1.0,
            ..small(GraphMode::HcsfStatic)
        });
        cfgs.push(ModelConfig {
            shared_fuse: true,
            long_range_cumulative: true,
            l_hop: 3,
            ..small(GraphMode::HcsfDynamic)
        });
        cfgs.push(ModelConfig {
            temporal_frames: 5,
            ..small(GraphMode::HcsfDynamicTemporal)
        });
        cfgs.push(ModelConfig {
            temporal_frames: 3,
            ..small(GraphMode::StaticGcn)
        });
        for v in [DynamicVariant::MOnly, DynamicVariant::OOnly, DynamicVariant::MPlusO] {
            let mut c = small(GraphMode::HcsfDynamic);
            c.dynamic.variant = v;
            c.dynamic.share_offsets = true;
            c.dynamic.dense_support = true;
            cfgs.push(c);
        }
        for cfg in cfgs {
            let m = build_model(&cfg, &topo).unwrap();
            assert_eq!(m.num_params(), expected_param_count(&cfg, &topo).unwrap(), "{cfg:?}");
        }
    }

    #[test]
    fn ablated_residual_blocks_pass_input_through() {
        let topo = SkeletonTopology::h36m17();
        let mut cfg = small(GraphMode::HcsfStatic);
        cfg.ablate_residual = true;
        let with_blocks = build_model(&cfg, &topo).unwrap();
        cfg.blocks = 0;
        let without = build_model(&cfg, &topo).unwrap();
        let x = randn(&[2, 17, 2], 1);
        assert_eq!(with_blocks.predict(&x).unwrap(), without.predict(&x).unwrap());
    }

    #[test]
    fn frozen_zero_alpha_matches_static_bitwise() {
        let topo = SkeletonTopology::h36m17();
        let mut dynamic = small(GraphMode::HcsfDynamic);
        dynamic.dynamic.freeze_alpha = true;
        dynamic.l_hop = 3;
        let stat = ModelConfig {
            graph_mode: GraphMode::HcsfStatic,
            ..dynamic.clone()
        };
        let md = build_model(&dynamic, &topo).unwrap();
        let ms = build_model(&stat, &topo).unwrap();
        let x = randn(&[4, 17, 2], 2);
        assert_eq!(md.predict(&x).unwrap(), ms.predict(&x).unwrap());
        let run = |m: &Model| {
            let mut st = m.state.clone();
            let mut tape = Tape::with_params(&m.params);
            let y = m.forward(&mut tape, &x, &mut st, true).unwrap();
            (tape.tensor(y), st.bn)
        };
        assert_eq!(run(&md), run(&ms));
    }

    #[test]
    fn single_sample_training_batch_uses_running_stats() {
        let topo = SkeletonTopology::h36m17();
        let mut cfg = small(GraphMode::HcsfStatic);
        cfg.dropout_p = 0.0;
        let m = build_model(&cfg, &topo).unwrap();
        let x = randn(&[1, 17, 2], 3);
        let mut st = m.state.clone();
        let mut tape = Tape::with_params(&m.params);
        let y = m.forward(&mut tape, &x, &mut st, true).unwrap();
        assert_eq!(tape.tensor(y), m.predict(&x).unwrap());
    }

    #[test]
    fn model_gradient_check() {
        let topo = SkeletonTopology::h36m17();
        for mode in MODES {
            let mut cfg = small(mode);
            cfg.channels = 4;
            cfg.blocks = 1;
            cfg.dropout_p = 0.0;
            cfg.output_scale = 1.0;
            let mut m = build_model(&cfg, &topo).unwrap();
            // Move alphas off zero so the offset path carries gradient.
            for id in m.params.ids().collect::<Vec<_>>() {
                if m.params.get(id).name.ends_with(".alpha") {
                    m.params.get_mut(id).value = Tensor::scalar(0.4);
                }
            }
            let x = randn(&[4, 17, 2], 5);
            let target = randn(&[4, 17, 3], 6);
            let mut params = m.params.clone();
            let rep = check_params::<_, ModelError>(
                &mut params,
                |tape| {
                    let mut st = m.state.clone();
                    let y = m.forward(tape, &x, &mut st, true)?;
                    let t = tape.constant(target.clone());
                    let d = tape.sub(y, t)?;
                    let sq = tape.mul(d, d)?;
                    Ok(tape.mean_all(sq))
                },
                &CheckOptions {
                    max_coords: Some(6),
                    ..CheckOptions::default()
                },
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "{mode:?}: {rep:?}");
        }
    }
}
