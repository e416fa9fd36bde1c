//! Finite-difference gradient checks over every layer type and a small
//! full model, run from the CLI and the acceptance tests.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{check_params, BnState, CheckOptions, CheckReport, ParamSet, Tape, Tensor, BN_EPS, BN_MOMENTUM};
use crate::dynamic::{
    default_embed_dim, temporal_offsets, BaseGraphInit, DynamicGraphParams, DynamicOptions, DynamicVariant,
};
use crate::error::{LayerError, ModelError};
use crate::layers::{
    gcn_forward, hcsf_forward, lcn_forward, make_channel_schedule, uniform_init, Fusion, HcsfLayer, HcsfOptions,
    HopGroups, PairBank,
};
use crate::model::{build_model, GraphMode, ModelConfig};
use crate::rng;
use crate::skeleton::{compute_hop_partition, normalize_adjacency, NormMode, SkeletonTopology};

/// Largest relative error found for one component.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub report: CheckReport,
}

/// Tolerance on the relative error of every component.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Minimum distance of every activation input from its kink in the model
/// check; a step of `1e-5` moves pre-activations by far less.
const KINK_MARGIN: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let mut r = rng::stream(seed, name);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.sample(StandardNormal)).collect()).expect("shape")
}

fn options(seed: u64) -> CheckOptions {
    CheckOptions {
        max_coords: Some(12),
        seed,
        ..CheckOptions::default()
    }
}

/// Runs every component check for `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<ComponentCheck>, ModelError> {
    let topo = SkeletonTopology::h36m17();
    let n = topo.num_nodes();
    let hops = compute_hop_partition(&topo, 4)?;
    let opts = options(seed);
    let mut out = Vec::new();
    let mut push = |name, report| out.push(ComponentCheck { name, report });

    // GCN
    let mut ps = ParamSet::new();
    let x = ps.add("x", randn(&[2, n, 3], seed, "gcn.x"), true);
    let w = ps.add("w", uniform_init(&[3, 4], 3, seed, "gcn.w"), true);
    let a_hat = normalize_adjacency(&hops.short_range(1).to_tensor(), NormMode::Symmetric)?;
    let rep = check_params::<_, LayerError>(
        &mut ps,
        |tape| {
            let a = tape.constant(a_hat.clone());
            let (x, w) = (tape.param(x), tape.param(w));
            let y = gcn_forward(tape, a, x, w)?;
            Ok(tape.tanh(y))
        },
        &opts,
    )?;
    push("gcn", rep);

    // LCN over every node within two hops
    let mut ps = ParamSet::new();
    let x = ps.add("x", randn(&[2, n, 3], seed, "lcn.x"), true);
    let support = hops.short_range(2);
    let bank = PairBank::register(&mut ps, "lcn.w", &support, 3, 4, seed);
    let a_hat = normalize_adjacency(&support.to_tensor(), NormMode::Row)?;
    let rep = check_params::<_, LayerError>(
        &mut ps,
        |tape| {
            let a = tape.constant(a_hat.clone());
            let x = tape.param(x);
            let y = lcn_forward(tape, a, x, &bank)?;
            Ok(tape.tanh(y))
        },
        &opts,
    )?;
    push("lcn", rep);

    // Fusion layers on fixed and on learned graphs
    let groups = HopGroups::new(&hops, 1, 3, false, NormMode::Row)?;
    let hcsf_opts = HcsfOptions {
        f_k: Fusion::Concat,
        f_a: Fusion::Concat,
        shared_fuse: false,
        dense_support: false,
        seed,
    };
    for dynamic in [false, true] {
        let mut ps = ParamSet::new();
        let x = ps.add("x", randn(&[2, n, 4], seed, "hcsf.x"), true);
        let sched = make_channel_schedule(4, 1, 3, 0.5)?;
        let layer = HcsfLayer::register(&mut ps, "hcsf", &groups, sched, 3, hcsf_opts)?;
        let graphs = if dynamic {
            let g = DynamicGraphParams::register(
                &mut ps,
                "graph",
                &groups,
                4,
                DynamicOptions {
                    variant: DynamicVariant::Combined,
                    base_init: BaseGraphInit::Physical,
                    mask_base: true,
                    share_offsets: false,
                    freeze_alpha: false,
                    embed_dim: default_embed_dim(4),
                    temporal: None,
                    seed,
                },
            )?;
            // Move α off zero so the offsets carry gradient.
            if let Some(a) = g.alpha {
                ps.get_mut(a).value = Tensor::scalar(0.4);
            }
            Some(g)
        } else {
            None
        };
        let rep = check_params::<_, LayerError>(
            &mut ps,
            |tape| {
                let xv = tape.param(x);
                let gs = match &graphs {
                    Some(g) => g.graphs(tape, xv)?,
                    None => groups.graphs.iter().map(|g| tape.constant(g.clone())).collect(),
                };
                let y = hcsf_forward(tape, &layer, xv, &gs)?;
                Ok(tape.tanh(y))
            },
            &opts,
        )?;
        push(if dynamic { "hcsf_dynamic" } else { "hcsf_static" }, rep);
    }

    // Offsets from temporally filtered embeddings
    let mut ps = ParamSet::new();
    let x = ps.add("x", randn(&[2, 5, n, 4], seed, "tof.x"), true);
    let kt = ps.add("theta", uniform_init(&[4, 4, 3], 12, seed, "tof.theta"), true);
    let kp = ps.add("phi", uniform_init(&[4, 4, 3], 12, seed, "tof.phi"), true);
    let rep = check_params::<_, ModelError>(
        &mut ps,
        |tape| {
            let (x, kt, kp) = (tape.param(x), tape.param(kt), tape.param(kp));
            Ok(temporal_offsets(tape, x, kt, kp, 1, 1)?)
        },
        &opts,
    )?;
    push("temporal_offsets", rep);

    // Batch normalization in training mode
    let mut ps = ParamSet::new();
    let x = ps.add("x", randn(&[6, n, 4], seed, "bn.x"), true);
    let g = ps.add("gamma", randn(&[4], seed, "bn.gamma"), true);
    let b = ps.add("beta", randn(&[4], seed, "bn.beta"), true);
    let rep = check_params::<_, ModelError>(
        &mut ps,
        |tape| {
            let mut st = BnState::new(4);
            let (x, g, b) = (tape.param(x), tape.param(g), tape.param(b));
            let y = tape.batch_norm(x, g, b, &mut st, true, BN_EPS, BN_MOMENTUM)?;
            Ok(tape.tanh(y))
        },
        &opts,
    )?;
    push("batch_norm", rep);

    // Temporal convolution
    let mut ps = ParamSet::new();
    let x = ps.add("x", randn(&[2, 7, n, 3], seed, "tcn.x"), true);
    let k = ps.add("k", uniform_init(&[4, 3, 3], 9, seed, "tcn.k"), true);
    let rep = check_params::<_, ModelError>(
        &mut ps,
        |tape| {
            let (x, k) = (tape.param(x), tape.param(k));
            let y = tape.conv1d_temporal(x, k, 1, 2)?;
            Ok(tape.tanh(y))
        },
        &opts,
    )?;
    push("temporal_conv", rep);

    // Full single-frame model
    let cfg = ModelConfig {
        channels: 4,
        blocks: 1,
        dropout_p: 0.0,
        output_scale: 1.0,
        graph_mode: GraphMode::HcsfDynamic,
        seed,
        ..ModelConfig::default()
    };
    let mut m = build_model(&cfg, &topo)?;
    for id in m.params.ids().collect::<Vec<_>>() {
        if m.params.get(id).name.ends_with(".alpha") {
            m.params.get_mut(id).value = Tensor::scalar(0.4);
        }
    }
    // Draw the input until no activation sits within reach of its kink.
    let mut x = randn(&[4, n, 2], seed, "model.x");
    for attempt in 1..100 {
        let mut tape = Tape::with_params(&m.params);
        let mut st = m.state.clone();
        m.forward(&mut tape, &x, &mut st, true)?;
        if tape.min_kink_distance() > KINK_MARGIN {
            break;
        }
        x = randn(&[4, n, 2], seed, &format!("model.x{attempt}"));
    }
    let target = randn(&[4, n, 3], seed, "model.y");
    let mut params = m.params.clone();
    let rep = check_params::<_, ModelError>(
        &mut params,
        |tape: &mut Tape| {
            let mut st = m.state.clone();
            let y = m.forward(tape, &x, &mut st, true)?;
            let t = tape.constant(target.clone());
            let d = tape.sub(y, t)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean_all(sq))
        },
        &CheckOptions {
            max_coords: Some(4),
            ..opts
        },
    )?;
    push("model", rep);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_one_seed() {
        let checks = gradient_suite(3).unwrap();
        assert_eq!(checks.len(), 8);
        for c in &checks {
            assert!(c.report.coords_checked > 0, "{}", c.name);
            assert!(c.report.max_rel_error < GRADIENT_TOLERANCE, "{} {:?}", c.name, c.report);
        }
    }
}
