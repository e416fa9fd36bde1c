//! Learned per-hop graphs: a trainable base matrix `M` plus input-dependent
//! offsets `O = tanh((X·Wθ)(X·Wφ)ᵀ)`, combined as `A = M + α·O`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{LayerError, TensorError};
use crate::layers::{uniform_init, HopGroups};
use crate::rng;
use crate::skeleton::{normalize_adjacency_lenient, BinaryMatrix, HopPartition, NormMode};

/// Initial value of the base graph `M`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseGraphInit {
    /// Row-normalized hop mask.
    #[default]
    Physical,
    /// `1/N` everywhere.
    Dense,
    /// Uniform `(0, 1)` draws, row-normalized.
    Random,
}

/// How the base graph and offsets are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DynamicVariant {
    /// `M + α·O` with learnable `α` starting at 0.
    #[default]
    Combined,
    /// `M` alone.
    MOnly,
    /// `α·O` alone, `α` learnable starting at 1.
    OOnly,
    /// `M + O`.
    MPlusO,
}

impl DynamicVariant {
    fn has_base(self) -> bool {
        !matches!(self, DynamicVariant::OOnly)
    }

    fn has_offsets(self) -> bool {
        !matches!(self, DynamicVariant::MOnly)
    }

    fn has_alpha(self) -> bool {
        matches!(self, DynamicVariant::Combined | DynamicVariant::OOnly)
    }
}

/// Base graph of one hop set. `mask` is the binary support.
pub fn base_graph_from_mask(mask: &BinaryMatrix, init: BaseGraphInit, rng: &mut rng::Rng) -> Tensor {
    let n = mask.size();
    match init {
        BaseGraphInit::Physical => normalize_adjacency_lenient(&mask.to_tensor(), NormMode::Row).expect("binary mask"),
        BaseGraphInit::Dense => Tensor::full(&[n, n], 1.0 / n as f64),
        BaseGraphInit::Random => {
            let data = (0..n * n).map(|_| rng.random_range(f64::EPSILON..1.0)).collect();
            let t = Tensor::new(vec![n, n], data).expect("square");
            normalize_adjacency_lenient(&t, NormMode::Row).expect("positive entries")
        }
    }
}

/// Base graph for the exact hop-`k` ring.
pub fn init_base_graph(hops: &HopPartition, k: usize, init: BaseGraphInit, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &format!("base_graph/{k}"));
    base_graph_from_mask(&hops.ring(k), init, &mut r)
}

/// `tanh((X·Wθ)(X·Wφ)ᵀ)`; `x` is `[N, C]` or `[B, N, C]`.
pub fn dynamic_offsets(tape: &mut Tape, x: Var, w_theta: Var, w_phi: Var) -> Result<Var, TensorError> {
    let et = tape.matmul(x, w_theta)?;
    let ep = tape.matmul(x, w_phi)?;
    let g = tape.matmul_nt(et, ep)?;
    Ok(tape.tanh(g))
}

/// Offsets from temporally filtered embeddings. `x` is `[B, T, N, C]`, the
/// kernels are `[C_e, C, F]`; the result is `[B·T', N, N]` with one graph per
/// output frame.
pub fn temporal_offsets(
    tape: &mut Tape,
    x: Var,
    theta_kernel: Var,
    phi_kernel: Var,
    stride: usize,
    dilation: usize,
) -> Result<Var, TensorError> {
    let et = tape.conv1d_temporal(x, theta_kernel, stride, dilation)?;
    let ep = tape.conv1d_temporal(x, phi_kernel, stride, dilation)?;
    let s = tape.shape(et).to_vec();
    let flat = [s[0] * s[1], s[2], s[3]];
    let et = tape.reshape(et, &flat)?;
    let ep = tape.reshape(ep, &flat)?;
    let g = tape.matmul_nt(et, ep)?;
    Ok(tape.tanh(g))
}

/// `M + α·O`; `o` may carry a leading batch axis.
pub fn combine_graph(tape: &mut Tape, m: Var, o: Var, alpha: Var) -> Result<Var, TensorError> {
    let scaled = tape.mul(o, alpha)?;
    tape.add(scaled, m)
}

/// Temporal settings for offsets computed from frame windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalOffsets {
    pub kernel: usize,
    pub dilation: usize,
}

/// Options for [`DynamicGraphParams::register`].
#[derive(Clone, Copy, Debug)]
pub struct DynamicOptions {
    pub variant: DynamicVariant,
    pub base_init: BaseGraphInit,
    /// Keep `M` zero outside each hop mask.
    pub mask_base: bool,
    /// One `(Wθ, Wφ)` pair for all hop sets instead of one per set.
    pub share_offsets: bool,
    pub freeze_alpha: bool,
    pub embed_dim: usize,
    pub temporal: Option<TemporalOffsets>,
    pub seed: u64,
}

/// Embedding width `max(4, c_in / 4)`.
pub fn default_embed_dim(c_in: usize) -> usize {
    (c_in / 4).max(4)
}

/// Learned graphs for every hop set of one fusion layer.
#[derive(Clone, Debug)]
pub struct DynamicGraphParams {
    pub variant: DynamicVariant,
    /// Base graph per hop set, with its constant mask when masking is on.
    pub base: Vec<Option<(ParamId, Option<Tensor>)>>,
    /// `(Wθ, Wφ)` per hop set, or a single shared pair.
    pub offsets: Vec<(ParamId, ParamId)>,
    pub alpha: Option<ParamId>,
    pub embed_dim: usize,
    pub temporal: Option<TemporalOffsets>,
}

impl DynamicGraphParams {
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        groups: &HopGroups,
        c_in: usize,
        opts: DynamicOptions,
    ) -> Result<Self, LayerError> {
        if opts.embed_dim == 0 {
            return Err(LayerError::InvalidChannels);
        }
        let v = opts.variant;
        let base = groups
            .masks
            .iter()
            .enumerate()
            .map(|(g, mask)| {
                if !v.has_base() {
                    return None;
                }
                let pname = format!("{name}.m{g}");
                let mut r = rng::stream(opts.seed, &pname);
                let mut init = match opts.base_init {
                    BaseGraphInit::Physical => groups.graphs[g].clone(),
                    other => base_graph_from_mask(mask, other, &mut r),
                };
                let mask_t = opts.mask_base.then(|| mask.to_tensor());
                if let Some(mt) = &mask_t {
                    for (x, m) in init.data_mut().iter_mut().zip(mt.data()) {
                        *x *= m;
                    }
                }
                Some((params.add(pname, init, true), mask_t))
            })
            .collect();
        let mut offsets = Vec::new();
        if v.has_offsets() {
            let count = if opts.share_offsets { 1 } else { groups.len() };
            for g in 0..count {
                let shape: Vec<usize> = match opts.temporal {
                    Some(t) => vec![opts.embed_dim, c_in, t.kernel],
                    None => vec![c_in, opts.embed_dim],
                };
                let fan_in = shape.iter().product::<usize>() / opts.embed_dim;
                let tn = format!("{name}.theta{g}");
                let pn = format!("{name}.phi{g}");
                let th = params.add(&tn, uniform_init(&shape, fan_in, opts.seed, &tn), true);
                let ph = params.add(&pn, uniform_init(&shape, fan_in, opts.seed, &pn), true);
                offsets.push((th, ph));
            }
        }
        let alpha = v.has_alpha().then(|| {
            let init = if v == DynamicVariant::OOnly { 1.0 } else { 0.0 };
            params.add(format!("{name}.alpha"), Tensor::scalar(init), !opts.freeze_alpha)
        });
        Ok(DynamicGraphParams {
            variant: v,
            base,
            offsets,
            alpha,
            embed_dim: opts.embed_dim,
            temporal: opts.temporal,
        })
    }

    /// Graphs for every hop set. `x` is the layer input `[B, N, C]`, or
    /// `[B, T, N, C]` for temporal offsets, in which case the graphs are
    /// `[B·T, N, N]`.
    pub fn graphs(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>, TensorError> {
        let mut offsets: Vec<Var> = Vec::new();
        for &(th, ph) in &self.offsets {
            let (th, ph) = (tape.param(th), tape.param(ph));
            let o = match self.temporal {
                Some(t) => temporal_offsets(tape, x, th, ph, 1, t.dilation)?,
                None => dynamic_offsets(tape, x, th, ph)?,
            };
            offsets.push(o);
        }
        let alpha = self.alpha.map(|a| tape.param(a));
        let mut out = Vec::with_capacity(self.base.len());
        for (g, base) in self.base.iter().enumerate() {
            let m = match base {
                Some((id, mask)) => {
                    let m = tape.param(*id);
                    Some(match mask {
                        Some(mt) => {
                            let mv = tape.constant(mt.clone());
                            tape.mul(m, mv)?
                        }
                        None => m,
                    })
                }
                None => None,
            };
            let o = offsets.get(g).or(offsets.first()).copied();
            let a = match (m, o) {
                (Some(m), Some(o)) => match alpha {
                    Some(al) => combine_graph(tape, m, o, al)?,
                    None => tape.add(o, m)?,
                },
                (Some(m), None) => m,
                (None, Some(o)) => match alpha {
                    Some(al) => tape.mul(o, al)?,
                    None => o,
                },
                (None, None) => unreachable!("variant has neither base nor offsets"),
            };
            out.push(a);
        }
        Ok(out)
    }
}
