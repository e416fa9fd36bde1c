//! Graph layers: shared-weight GCN, locally connected (per node pair)
//! aggregation, and the hop-aware channel-squeezing fusion layer.
//!
//! Features are laid out as `[B, N, C]` (a rank-2 `[N, C]` input is treated
//! as a batch of one where noted). Layers return pre-activation outputs.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PairIndex, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::LayerError;
use crate::rng;
use crate::skeleton::{normalize_adjacency_lenient, BinaryMatrix, HopPartition, NormMode};

/// How branch outputs are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Concat,
    Sum,
}

/// Output widths of the long-range branches of one fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSchedule {
    pub c_in: usize,
    pub s: usize,
    pub l: usize,
    pub d: f64,
    /// `C_{k,out}` for `k = s+1 ..= l`.
    pub c_out_per_hop: Vec<usize>,
    pub c_short: usize,
}

impl ChannelSchedule {
    /// Width of the long-range branch for hop `k`.
    pub fn width(&self, k: usize) -> usize {
        self.c_out_per_hop[k - self.s - 1]
    }

    /// Input width of the fusion projection for the given fusion ops.
    pub fn fused_width(&self, f_k: Fusion, f_a: Fusion) -> usize {
        let long = match f_k {
            Fusion::Concat => self.c_out_per_hop.iter().sum(),
            Fusion::Sum => self.c_out_per_hop.first().copied().unwrap_or(0),
        };
        match f_a {
            Fusion::Concat => self.c_short + long,
            Fusion::Sum => self.c_short,
        }
    }
}

/// Long-range widths `max(1, round(d^(k-S) * c_in))`, shrinking with hop
/// distance.
pub fn make_channel_schedule(c_in: usize, s: usize, l: usize, d: f64) -> Result<ChannelSchedule, LayerError> {
    schedule_impl(c_in, s, l, d, false)
}

/// Like [`make_channel_schedule`]; `from_l` selects the exponent `k - L`
/// instead of `k - S`, which widens rather than squeezes for `d < 1`.
pub fn make_channel_schedule_with(
    c_in: usize,
    s: usize,
    l: usize,
    d: f64,
    from_l: bool,
) -> Result<ChannelSchedule, LayerError> {
    schedule_impl(c_in, s, l, d, from_l)
}

fn schedule_impl(c_in: usize, s: usize, l: usize, d: f64, from_l: bool) -> Result<ChannelSchedule, LayerError> {
    if s < 1 || s > l {
        return Err(LayerError::InvalidHopRange { s, l });
    }
    if !(d > 0.0 && d <= 1.0) {
        return Err(LayerError::InvalidRatio(d));
    }
    if c_in == 0 {
        return Err(LayerError::InvalidChannels);
    }
    let base = if from_l { l } else { s };
    let c_out_per_hop = (s + 1..=l)
        .map(|k| {
            let e = k as i32 - base as i32;
            ((d.powi(e) * c_in as f64).round() as usize).max(1)
        })
        .collect();
    Ok(ChannelSchedule {
        c_in,
        s,
        l,
        d,
        c_out_per_hop,
        c_short: c_in,
    })
}

/// Per-pair weight matrices `[P, C_in, C_out]` keyed by a [`PairIndex`].
#[derive(Clone, Debug)]
pub struct PairBank {
    pub index: Arc<PairIndex>,
    pub weights: ParamId,
}

impl PairBank {
    /// Registers a bank with one weight matrix per set entry of `support`,
    /// drawn uniformly from `±1/sqrt(c_in)`.
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        support: &BinaryMatrix,
        c_in: usize,
        c_out: usize,
        seed: u64,
    ) -> Self {
        let index = Arc::new(PairIndex::new(support.size(), support.pairs()));
        let weights = params.add(name, uniform_init(&[index.len(), c_in, c_out], c_in, seed, name), true);
        PairBank { index, weights }
    }
}

/// Uniform init in `±1/sqrt(fan_in)` from the stream named `name`.
pub fn uniform_init(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut r = rng::stream(seed, name);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn as_batched(tape: &mut Tape, x: Var) -> Result<(Var, bool), LayerError> {
    let s = tape.shape(x).to_vec();
    if s.len() == 2 {
        Ok((tape.reshape(x, &[1, s[0], s[1]])?, true))
    } else {
        Ok((x, false))
    }
}

fn unbatch(tape: &mut Tape, y: Var, was_2d: bool) -> Result<Var, LayerError> {
    if was_2d {
        let s = tape.shape(y).to_vec();
        Ok(tape.reshape(y, &s[1..])?)
    } else {
        Ok(y)
    }
}

/// `Â · X · W` with a shared weight.
pub fn gcn_forward(tape: &mut Tape, a_hat: Var, x: Var, w: Var) -> Result<Var, LayerError> {
    let mixed = tape.matmul(a_hat, x)?;
    Ok(tape.matmul(mixed, w)?)
}

/// Fails when `graph` has a nonzero entry with no weight in `index`.
pub fn check_pair_coverage(graph: &[f64], index: &PairIndex) -> Result<(), LayerError> {
    let n = index.num_nodes();
    for (flat, &v) in graph.iter().enumerate() {
        let (i, j) = ((flat / n) % n, flat % n);
        if v != 0.0 && index.slot(i, j).is_none() {
            return Err(LayerError::MissingPairWeight(i, j));
        }
    }
    Ok(())
}

/// `h_i = Σ_j â_ij x_j W_ij` over the pairs of `bank`.
pub fn lcn_forward(tape: &mut Tape, a_hat: Var, x: Var, bank: &PairBank) -> Result<Var, LayerError> {
    hop_aggregate(tape, a_hat, x, bank)
}

/// Aggregation over one hop set; identical to [`lcn_forward`] but named for
/// its role inside the fusion layer. Targets with no source in the set get a
/// zero row.
pub fn hop_aggregate(tape: &mut Tape, a_hat: Var, x: Var, bank: &PairBank) -> Result<Var, LayerError> {
    check_pair_coverage(tape.value(a_hat), &bank.index)?;
    aggregate_unchecked(tape, Some(a_hat), x, bank)
}

/// Aggregation restricted to the bank's support; graph entries elsewhere
/// are ignored.
pub fn aggregate_unchecked(tape: &mut Tape, graph: Option<Var>, x: Var, bank: &PairBank) -> Result<Var, LayerError> {
    let (xb, was_2d) = as_batched(tape, x)?;
    let w = tape.param(bank.weights);
    let y = tape.pair_aggregate(xb, graph, w, bank.index.clone())?;
    unbatch(tape, y, was_2d)
}

/// The projection applied after fusion.
#[derive(Clone, Debug)]
pub enum FuseProjection {
    /// One `[C_fused, C_out]` matrix per node.
    PerNode(PairBank),
    /// A single `[C_fused, C_out]` matrix.
    Shared(ParamId),
    /// No projection; requires `C_fused == C_out`.
    Identity,
}

impl FuseProjection {
    pub fn apply(&self, tape: &mut Tape, h: Var) -> Result<Var, LayerError> {
        match self {
            FuseProjection::PerNode(bank) => aggregate_unchecked(tape, None, h, bank),
            FuseProjection::Shared(w) => {
                let w = tape.param(*w);
                Ok(tape.matmul(h, w)?)
            }
            FuseProjection::Identity => Ok(h),
        }
    }
}

/// Two-stage fusion: `f_k` over the long-range outputs, then `f_a` with the
/// short-range output, then the projection.
pub fn hierarchical_fuse(
    tape: &mut Tape,
    h_short: Var,
    h_long: &[Var],
    f_k: Fusion,
    f_a: Fusion,
    proj: &FuseProjection,
) -> Result<Var, LayerError> {
    let axis = tape.shape(h_short).len() - 1;
    let long = match (h_long.len(), f_k) {
        (0, _) => None,
        (_, Fusion::Concat) => Some(tape.concat(h_long, axis)?),
        (_, Fusion::Sum) => Some(sum_same_shape(tape, h_long)?),
    };
    let fused = match (long, f_a) {
        (None, _) => h_short,
        (Some(l), Fusion::Concat) => tape.concat(&[h_short, l], axis)?,
        (Some(l), Fusion::Sum) => sum_same_shape(tape, &[h_short, l])?,
    };
    proj.apply(tape, fused)
}

fn sum_same_shape(tape: &mut Tape, xs: &[Var]) -> Result<Var, LayerError> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        if tape.shape(x) != tape.shape(acc) {
            return Err(crate::error::TensorError::ShapeMismatch {
                op: "sum fusion",
                lhs: tape.shape(acc).to_vec(),
                rhs: tape.shape(x).to_vec(),
            }
            .into());
        }
        acc = tape.add(acc, x)?;
    }
    Ok(acc)
}

/// Hop sets of one fusion layer: the short-range ball followed by one set
/// per long-range hop.
#[derive(Clone, Debug, PartialEq)]
pub struct HopGroups {
    pub s: usize,
    pub l: usize,
    pub masks: Vec<BinaryMatrix>,
    /// Row-normalized masks (empty rows stay zero).
    pub graphs: Vec<Tensor>,
}

impl HopGroups {
    pub fn new(hops: &HopPartition, s: usize, l: usize, cumulative: bool, norm: NormMode) -> Result<Self, LayerError> {
        if s < 1 || s > l {
            return Err(LayerError::InvalidHopRange { s, l });
        }
        let mut masks = vec![hops.short_range(s)];
        masks.extend((s + 1..=l).map(|k| hops.long_range(k, cumulative)));
        let graphs = masks
            .iter()
            .map(|m| normalize_adjacency_lenient(&m.to_tensor(), norm))
            .collect::<Result<_, _>>()?;
        Ok(HopGroups { s, l, masks, graphs })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Parameters of one hop-aware channel-squeezing fusion layer.
#[derive(Clone, Debug)]
pub struct HcsfLayer {
    pub schedule: ChannelSchedule,
    pub c_out: usize,
    pub short: PairBank,
    /// One bank per long-range hop `k = S+1 ..= L`.
    pub long: Vec<PairBank>,
    pub fuse: FuseProjection,
    pub f_k: Fusion,
    pub f_a: Fusion,
}

/// Construction options for [`HcsfLayer::register`].
#[derive(Clone, Copy, Debug)]
pub struct HcsfOptions {
    pub f_k: Fusion,
    pub f_a: Fusion,
    pub shared_fuse: bool,
    /// Give every branch weights for all `N²` pairs, so learned graphs can
    /// route information between any two joints.
    pub dense_support: bool,
    pub seed: u64,
}

impl HcsfLayer {
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        groups: &HopGroups,
        schedule: ChannelSchedule,
        c_out: usize,
        opts: HcsfOptions,
    ) -> Result<Self, LayerError> {
        if c_out == 0 {
            return Err(LayerError::InvalidChannels);
        }
        let n = groups.masks[0].size();
        let support = |m: &BinaryMatrix| {
            if opts.dense_support {
                BinaryMatrix::ones(n)
            } else {
                m.clone()
            }
        };
        let c_in = schedule.c_in;
        let short = PairBank::register(
            params,
            &format!("{name}.short"),
            &support(&groups.masks[0]),
            c_in,
            c_in,
            opts.seed,
        );
        let mut long = Vec::new();
        for (g, k) in (schedule.s + 1..=schedule.l).enumerate() {
            let width = schedule.width(k);
            if opts.f_k == Fusion::Sum && width != schedule.width(schedule.s + 1) {
                return Err(LayerError::Tensor(crate::error::TensorError::ShapeMismatch {
                    op: "sum fusion",
                    lhs: vec![schedule.width(schedule.s + 1)],
                    rhs: vec![width],
                }));
            }
            long.push(PairBank::register(
                params,
                &format!("{name}.hop{k}"),
                &support(&groups.masks[g + 1]),
                c_in,
                width,
                opts.seed,
            ));
        }
        if opts.f_a == Fusion::Sum && !long.is_empty() && schedule.width(schedule.s + 1) != schedule.c_short {
            return Err(LayerError::Tensor(crate::error::TensorError::ShapeMismatch {
                op: "sum fusion",
                lhs: vec![schedule.c_short],
                rhs: vec![schedule.width(schedule.s + 1)],
            }));
        }
        let fused = schedule.fused_width(opts.f_k, opts.f_a);
        let fname = format!("{name}.fuse");
        let fuse = if opts.shared_fuse {
            FuseProjection::Shared(params.add(&fname, uniform_init(&[fused, c_out], fused, opts.seed, &fname), true))
        } else {
            FuseProjection::PerNode(PairBank::register(
                params,
                &fname,
                &BinaryMatrix::identity(n),
                fused,
                c_out,
                opts.seed,
            ))
        };
        Ok(HcsfLayer {
            schedule,
            c_out,
            short,
            long,
            fuse,
            f_k: opts.f_k,
            f_a: opts.f_a,
        })
    }

    /// Number of hop groups (short range plus one per long-range hop).
    pub fn num_groups(&self) -> usize {
        1 + self.long.len()
    }
}

/// Runs a fusion layer. `graphs[0]` weights the short-range group and
/// `graphs[g]` the long-range hop `S+g`; each is `[N, N]` or, for learned
/// per-sample graphs, `[B, N, N]`. Aggregation is confined to each bank's
/// pair support.
pub fn hcsf_forward(tape: &mut Tape, layer: &HcsfLayer, x: Var, graphs: &[Var]) -> Result<Var, LayerError> {
    if graphs.len() != layer.num_groups() {
        return Err(crate::error::TensorError::ShapeMismatch {
            op: "hcsf graphs",
            lhs: vec![layer.num_groups()],
            rhs: vec![graphs.len()],
        }
        .into());
    }
    let h_short = aggregate_unchecked(tape, Some(graphs[0]), x, &layer.short)?;
    let h_long = layer
        .long
        .iter()
        .zip(&graphs[1..])
        .map(|(bank, &g)| aggregate_unchecked(tape, Some(g), x, bank))
        .collect::<Result<Vec<_>, _>>()?;
    hierarchical_fuse(tape, h_short, &h_long, layer.f_k, layer.f_a, &layer.fuse)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::skeleton::{compute_hop_partition, normalize_adjacency, SkeletonTopology};

    fn randn(shape: &[usize], seed: u64, name: &str) -> Tensor {
        let mut r = rng::stream(seed, name);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.sample(StandardNormal)).collect()).unwrap()
    }

    fn path3() -> SkeletonTopology {
        SkeletonTopology::new(3, &[(0, 1), (1, 2)], &[], 0).unwrap()
    }

    #[test]
    fn schedule_examples() {
        for (s, l) in [(1, 1), (1, 4), (2, 5)] {
            let sc = make_channel_schedule(24, s, l, 1.0).unwrap();
            assert!(sc.c_out_per_hop.iter().all(|&c| c == 24));
        }
        assert_eq!(
            make_channel_schedule(64, 1, 3, 0.5).unwrap().c_out_per_hop,
            vec![32, 16]
        );
        assert_eq!(
            make_channel_schedule(64, 1, 2, 1.0 / 16.0).unwrap().c_out_per_hop,
            vec![4]
        );
        assert_eq!(
            make_channel_schedule(64, 1, 6, 0.125).unwrap().c_out_per_hop,
            vec![8, 1, 1, 1, 1]
        );
        assert_eq!(
            make_channel_schedule_with(64, 1, 3, 0.5, true).unwrap().c_out_per_hop,
            vec![128, 64]
        );
        assert_eq!(make_channel_schedule(64, 1, 1, 0.5).unwrap().c_short, 64);
        assert!(matches!(
            make_channel_schedule(8, 2, 1, 0.5),
            Err(LayerError::InvalidHopRange { .. })
        ));
        assert!(matches!(
            make_channel_schedule(8, 0, 1, 0.5),
            Err(LayerError::InvalidHopRange { .. })
        ));
        assert!(matches!(
            make_channel_schedule(8, 1, 2, 0.0),
            Err(LayerError::InvalidRatio(_))
        ));
        assert!(matches!(
            make_channel_schedule(8, 1, 2, 1.5),
            Err(LayerError::InvalidRatio(_))
        ));
        assert!(matches!(
            make_channel_schedule(0, 1, 2, 0.5),
            Err(LayerError::InvalidChannels)
        ));
    }

    proptest! {
        #[test]
        fn schedule_is_nonincreasing(c_in in 1usize..200, s in 1usize..4, extra in 0usize..5, d in 0.01f64..=1.0) {
            let sc = make_channel_schedule(c_in, s, s + extra, d).unwrap();
            prop_assert_eq!(sc.c_out_per_hop.len(), extra);
            prop_assert!(sc.c_out_per_hop.iter().all(|&c| c >= 1 && c <= c_in));
            prop_assert!(sc.c_out_per_hop.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn gcn_examples() {
        let mut tape = Tape::new();
        let x = randn(&[3, 4], 1, "x");
        let a = tape.constant(Tensor::eye(3));
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::eye(4));
        let y = gcn_forward(&mut tape, a, xv, w).unwrap();
        assert_eq!(tape.value(y), x.data());

        let a = tape.constant(Tensor::full(&[2, 2], 0.5));
        let xv = tape.constant(Tensor::eye(2));
        let w = tape.constant(Tensor::eye(2));
        let y = gcn_forward(&mut tape, a, xv, w).unwrap();
        assert_eq!(tape.value(y), &[0.5; 4]);

        let bad = tape.constant(Tensor::eye(3));
        assert!(gcn_forward(&mut tape, a, bad, w).is_err());
    }

    fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            out[perm[i] * c..(perm[i] + 1) * c].copy_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![n, c], out).unwrap()
    }

    fn permute_sym(a: &Tensor, perm: &[usize]) -> Tensor {
        let n = a.shape()[0];
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[perm[i] * n + perm[j]] = a.at(&[i, j]);
            }
        }
        Tensor::new(vec![n, n], out).unwrap()
    }

    proptest! {
        #[test]
        fn gcn_is_permutation_equivariant(seed in 0u64..1000, perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
            let a = randn(&[5, 5], seed, "a");
            let x = randn(&[5, 3], seed, "x");
            let w = randn(&[3, 2], seed, "w");
            let run = |a: &Tensor, x: &Tensor| {
                let mut tape = Tape::new();
                let (av, xv, wv) = (tape.constant(a.clone()), tape.constant(x.clone()), tape.constant(w.clone()));
                let y = gcn_forward(&mut tape, av, xv, wv).unwrap();
                tape.tensor(y)
            };
            let lhs = run(&permute_sym(&a, &perm), &permute_rows(&x, &perm));
            let rhs = permute_rows(&run(&a, &x), &perm);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }

    #[test]
    fn lcn_identity_weights_and_coverage() {
        let mut ps = ParamSet::new();
        let bank = PairBank::register(&mut ps, "b", &BinaryMatrix::identity(3), 2, 2, 0);
        let id = ps.id("b").unwrap();
        ps.get_mut(id).value = Tensor::new(vec![3, 2, 2], [1.0, 0.0, 0.0, 1.0].repeat(3)).unwrap();
        let x = randn(&[3, 2], 1, "x");
        let mut tape = Tape::with_params(&ps);
        let a = tape.constant(Tensor::eye(3));
        let xv = tape.constant(x.clone());
        let y = lcn_forward(&mut tape, a, xv, &bank).unwrap();
        assert_eq!(tape.value(y), x.data());
        let full = tape.constant(Tensor::full(&[3, 3], 1.0 / 3.0));
        assert!(matches!(
            lcn_forward(&mut tape, full, xv, &bank),
            Err(LayerError::MissingPairWeight(0, 1))
        ));
    }

    #[test]
    fn lcn_tied_weights_equal_gcn() {
        let topo = SkeletonTopology::h36m17();
        let hops = compute_hop_partition(&topo, 3).unwrap();
        for seed in 0..100 {
            let mask = hops.short_range(1 + (seed as usize % 3));
            let a_hat = normalize_adjacency(&mask.to_tensor(), NormMode::Row).unwrap();
            let mut ps = ParamSet::new();
            let bank = PairBank::register(&mut ps, "b", &mask, 4, 3, seed);
            let w = randn(&[4, 3], seed, "w");
            let id = ps.id("b").unwrap();
            let p = bank.index.len();
            ps.get_mut(id).value = Tensor::new(vec![p, 4, 3], w.data().repeat(p)).unwrap();
            let x = randn(&[2, 17, 4], seed, "x");
            let mut tape = Tape::with_params(&ps);
            let (av, xv, wv) = (tape.constant(a_hat), tape.constant(x), tape.constant(w));
            let l = lcn_forward(&mut tape, av, xv, &bank).unwrap();
            let g = gcn_forward(&mut tape, av, xv, wv).unwrap();
            assert!(tape.tensor(l).max_abs_diff(&tape.tensor(g)) < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn lcn_two_node_expansion() {
        let mut ps = ParamSet::new();
        let bank = PairBank::register(&mut ps, "b", &BinaryMatrix::ones(2), 2, 1, 0);
        // pairs in row-major order: (0,0) (0,1) (1,0) (1,1)
        let w = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [-2.0, 4.0]];
        let id = ps.id("b").unwrap();
        ps.get_mut(id).value = Tensor::new(vec![4, 2, 1], w.concat()).unwrap();
        let a = [[0.25, 0.75], [0.6, 0.4]];
        let x = [[1.0, -1.0], [2.0, 3.0]];
        let mut tape = Tape::with_params(&ps);
        let av = tape.constant(Tensor::from_rows(&[a[0].to_vec(), a[1].to_vec()]).unwrap());
        let xv = tape.constant(Tensor::from_rows(&[x[0].to_vec(), x[1].to_vec()]).unwrap());
        let y = lcn_forward(&mut tape, av, xv, &bank).unwrap();
        let dot = |xr: [f64; 2], wr: [f64; 2]| xr[0] * wr[0] + xr[1] * wr[1];
        let h0 = a[0][0] * dot(x[0], w[0]) + a[0][1] * dot(x[1], w[1]);
        let h1 = a[1][0] * dot(x[0], w[2]) + a[1][1] * dot(x[1], w[3]);
        assert_eq!(tape.value(y), &[h0, h1]);
    }

    #[test]
    fn hop_aggregate_examples() {
        let hops = compute_hop_partition(&path3(), 2).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![4.0, 4.0]]).unwrap();
        let mut ps = ParamSet::new();
        let short = hops.short_range(1);
        let bank = PairBank::register(&mut ps, "s", &short, 2, 2, 0);
        let id = ps.id("s").unwrap();
        let p = bank.index.len();
        ps.get_mut(id).value = Tensor::new(vec![p, 2, 2], [1.0, 0.0, 0.0, 1.0].repeat(p)).unwrap();
        let ring2 = hops.ring(2);
        let bank2 = PairBank::register(&mut ps, "r", &ring2, 2, 5, 0);
        let mut tape = Tape::with_params(&ps);
        let a = tape.constant(normalize_adjacency(&short.to_tensor(), NormMode::Row).unwrap());
        let xv = tape.constant(x);
        let y = hop_aggregate(&mut tape, a, xv, &bank).unwrap();
        let expect = [0.5, 1.0, 5.0 / 3.0, 2.0, 2.0, 3.0];
        for (a, b) in tape.value(y).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let a2 = tape.constant(normalize_adjacency_lenient(&ring2.to_tensor(), NormMode::Row).unwrap());
        let y2 = hop_aggregate(&mut tape, a2, xv, &bank2).unwrap();
        assert_eq!(tape.shape(y2), &[3, 5]);
        // the middle node has no node two hops away
        assert!(tape.value(y2)[5..10].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hop_branch_sees_only_its_ring() {
        let topo = SkeletonTopology::h36m17();
        let hops = compute_hop_partition(&topo, 4).unwrap();
        let k = 3;
        let ring = hops.ring(k);
        let mut ps = ParamSet::new();
        let bank = PairBank::register(&mut ps, "r", &ring, 3, 2, 5);
        let a_hat = normalize_adjacency_lenient(&ring.to_tensor(), NormMode::Row).unwrap();
        let x = randn(&[17, 3], 2, "x");
        let run = |x: &Tensor| {
            let mut tape = Tape::with_params(&ps);
            let (av, xv) = (tape.constant(a_hat.clone()), tape.constant(x.clone()));
            let y = hop_aggregate(&mut tape, av, xv, &bank).unwrap();
            tape.tensor(y)
        };
        let base = run(&x);
        for i in 0..17 {
            for j in 0..17 {
                if hops.dist(i, j) == k {
                    continue;
                }
                let mut xp = x.clone();
                for c in 0..3 {
                    xp.data_mut()[j * 3 + c] += 10.0;
                }
                let y = run(&xp);
                assert_eq!(&y.data()[i * 2..i * 2 + 2], &base.data()[i * 2..i * 2 + 2]);
            }
        }
    }

    #[test]
    fn fuse_examples() {
        let mut tape = Tape::new();
        let hs = tape.constant(randn(&[4, 3], 1, "s"));
        let h2 = tape.constant(randn(&[4, 3], 1, "h2"));
        let h3 = tape.constant(randn(&[4, 3], 1, "h3"));
        let y = hierarchical_fuse(
            &mut tape,
            hs,
            &[h2, h3],
            Fusion::Sum,
            Fusion::Sum,
            &FuseProjection::Identity,
        )
        .unwrap();
        let a = tape.add(hs, h2).unwrap();
        let b = tape.add(a, h3).unwrap();
        assert!(tape.tensor(y).max_abs_diff(&tape.tensor(b)) < 1e-15);
        let y = hierarchical_fuse(
            &mut tape,
            hs,
            &[],
            Fusion::Concat,
            Fusion::Concat,
            &FuseProjection::Identity,
        )
        .unwrap();
        assert_eq!(y, hs);

        let mut ps = ParamSet::new();
        let w = ps.add("w", randn(&[6, 5], 1, "w"), true);
        let mut tape = Tape::with_params(&ps);
        let hs = tape.constant(randn(&[4, 3], 1, "s"));
        let h2 = tape.constant(randn(&[4, 3], 1, "h2"));
        let y = hierarchical_fuse(
            &mut tape,
            hs,
            &[h2],
            Fusion::Concat,
            Fusion::Concat,
            &FuseProjection::Shared(w),
        )
        .unwrap();
        assert_eq!(tape.shape(y), &[4, 5]);
        let odd = tape.constant(randn(&[4, 2], 1, "o"));
        assert!(hierarchical_fuse(
            &mut tape,
            hs,
            &[odd],
            Fusion::Sum,
            Fusion::Sum,
            &FuseProjection::Identity
        )
        .is_err());
    }

    fn opts(f: Fusion, seed: u64) -> HcsfOptions {
        HcsfOptions {
            f_k: f,
            f_a: f,
            shared_fuse: false,
            dense_support: false,
            seed,
        }
    }

    fn static_graphs(tape: &mut Tape, groups: &HopGroups) -> Vec<Var> {
        groups.graphs.iter().map(|g| tape.constant(g.clone())).collect()
    }

    /// Summation fusion with a constant schedule collapses to one locally
    /// connected layer whose pair weights absorb the projection.
    #[test]
    fn hcsf_sum_fusion_reduces_to_multi_hop_lcn() {
        let topo = SkeletonTopology::h36m17();
        let hops = compute_hop_partition(&topo, 8).unwrap();
        for seed in 0..5 {
            let (c, c_out) = (4, 3);
            let groups = HopGroups::new(&hops, 1, 3, false, NormMode::Row).unwrap();
            let sched = make_channel_schedule(c, 1, 3, 1.0).unwrap();
            let mut ps = ParamSet::new();
            let layer = HcsfLayer::register(&mut ps, "h", &groups, sched, c_out, opts(Fusion::Sum, seed)).unwrap();
            let x = randn(&[2, 17, c], seed, "x");
            let y = {
                let mut tape = Tape::with_params(&ps);
                let xv = tape.constant(x.clone());
                let gs = static_graphs(&mut tape, &groups);
                let y = hcsf_forward(&mut tape, &layer, xv, &gs).unwrap();
                tape.tensor(y)
            };
            // Union graph and absorbed weights W_ij · W_a(i).
            let mut union = BinaryMatrix::zeros(17);
            let mut a_hat = Tensor::zeros(&[17, 17]);
            for (m, g) in groups.masks.iter().zip(&groups.graphs) {
                union = union.or(m);
                for (o, v) in a_hat.data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
            let mut ps2 = ParamSet::new();
            let lcn = PairBank::register(&mut ps2, "l", &union, c, c_out, 0);
            let FuseProjection::PerNode(fuse) = &layer.fuse else {
                unreachable!()
            };
            let wa = ps.value(fuse.weights).clone();
            let mut merged = vec![0.0; lcn.index.len() * c * c_out];
            let banks: Vec<&PairBank> = std::iter::once(&layer.short).chain(&layer.long).collect();
            for (p, &(i, j)) in lcn.index.pairs().iter().enumerate() {
                let bank = banks.iter().find(|b| b.index.slot(i, j).is_some()).unwrap();
                let q = bank.index.slot(i, j).unwrap();
                let w = ps.value(bank.weights).data();
                for r in 0..c {
                    for o in 0..c_out {
                        let mut acc = 0.0;
                        for m in 0..c {
                            acc += w[q * c * c + r * c + m] * wa.data()[i * c * c_out + m * c_out + o];
                        }
                        merged[p * c * c_out + r * c_out + o] = acc;
                    }
                }
            }
            let id = ps2.id("l").unwrap();
            ps2.get_mut(id).value = Tensor::new(vec![lcn.index.len(), c, c_out], merged).unwrap();
            let mut tape = Tape::with_params(&ps2);
            let (av, xv) = (tape.constant(a_hat), tape.constant(x));
            let z = lcn_forward(&mut tape, av, xv, &lcn).unwrap();
            let diff = y.max_abs_diff(&tape.tensor(z));
            assert!(diff < 1e-12, "seed {seed}: {diff}");
        }
    }

    #[test]
    fn hcsf_without_long_range_is_lcn_over_short_range() {
        let hops = compute_hop_partition(&SkeletonTopology::h36m17(), 4).unwrap();
        let groups = HopGroups::new(&hops, 2, 2, false, NormMode::Row).unwrap();
        let sched = make_channel_schedule(3, 2, 2, 0.5).unwrap();
        let mut ps = ParamSet::new();
        let mut o = opts(Fusion::Concat, 1);
        o.shared_fuse = true;
        let layer = HcsfLayer::register(&mut ps, "h", &groups, sched, 3, o).unwrap();
        let FuseProjection::Shared(wa) = layer.fuse else {
            unreachable!()
        };
        ps.get_mut(wa).value = Tensor::eye(3);
        let x = randn(&[17, 3], 3, "x");
        let mut tape = Tape::with_params(&ps);
        let xv = tape.constant(x);
        let gs = static_graphs(&mut tape, &groups);
        let y = hcsf_forward(&mut tape, &layer, xv, &gs).unwrap();
        let z = lcn_forward(&mut tape, gs[0], xv, &layer.short).unwrap();
        assert!(tape.tensor(y).max_abs_diff(&tape.tensor(z)) < 1e-15);
    }

    #[test]
    fn hcsf_widths_and_sum_validation() {
        let hops = compute_hop_partition(&SkeletonTopology::h36m17(), 4).unwrap();
        let groups = HopGroups::new(&hops, 1, 3, false, NormMode::Row).unwrap();
        let sched = make_channel_schedule(16, 1, 3, 0.5).unwrap();
        let mut ps = ParamSet::new();
        let layer = HcsfLayer::register(&mut ps, "h", &groups, sched.clone(), 7, opts(Fusion::Concat, 0)).unwrap();
        assert_eq!(
            ps.value(layer.long[0].weights).shape(),
            &[layer.long[0].index.len(), 16, 8]
        );
        let FuseProjection::PerNode(f) = &layer.fuse else {
            unreachable!()
        };
        assert_eq!(ps.value(f.weights).shape(), &[17, 16 + 8 + 4, 7]);
        let mut tape = Tape::with_params(&ps);
        let xv = tape.constant(randn(&[2, 17, 16], 0, "x"));
        let gs = static_graphs(&mut tape, &groups);
        let y = hcsf_forward(&mut tape, &layer, xv, &gs).unwrap();
        assert_eq!(tape.shape(y), &[2, 17, 7]);
        assert!(hcsf_forward(&mut tape, &layer, xv, &gs[..2]).is_err());
        let mut ps = ParamSet::new();
        assert!(HcsfLayer::register(&mut ps, "h", &groups, sched, 7, opts(Fusion::Sum, 0)).is_err());
    }

    #[test]
    fn hcsf_gradient_check() {
        use crate::autodiff::{check_params, CheckOptions};
        let hops = compute_hop_partition(&SkeletonTopology::h36m17(), 4).unwrap();
        let groups = HopGroups::new(&hops, 1, 3, false, NormMode::Row).unwrap();
        let sched = make_channel_schedule(4, 1, 3, 0.5).unwrap();
        let mut ps = ParamSet::new();
        let layer = HcsfLayer::register(&mut ps, "h", &groups, sched, 3, opts(Fusion::Concat, 2)).unwrap();
        let x = randn(&[2, 17, 4], 9, "x");
        let rep = check_params::<_, LayerError>(
            &mut ps,
            |tape| {
                let xv = tape.constant(x.clone());
                let gs = static_graphs(tape, &groups);
                let y = hcsf_forward(tape, &layer, xv, &gs)?;
                Ok(tape.tanh(y))
            },
            &CheckOptions {
                max_coords: Some(40),
                ..CheckOptions::default()
            },
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
