// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::fixtures::{cache_for, random_tokens, tiny};
use lincirc::attribution::{
    all_scores, attribute, attribution_score, default_grid, direct_contribution, hierarchical_attribute,
    leaf_sum_evaluate, qk_attribute, qk_attribute_recursive, sparsity_sweep, standard_attribute, AttributionOptions,
    FrozenAffine, Method, PairSide, QkContext, QK_TOL,
};
use lincirc::lingraph::{build_graph, FeatureNode, GraphSite, LinearGraph, NodeId, NodeKind, RootSpec};
use proptest::prelude::*;

fn leaf(k: usize, a: f64) -> FeatureNode {
    FeatureNode {
        id: NodeId::feature(GraphSite::Embed, 0, k, 0),
        activation: a,
        detached: false,
    }
}

fn inner(k: usize, a: f64) -> FeatureNode {
    FeatureNode {
        id: NodeId::feature(GraphSite::Attn, 0, k, 0),
        activation: a,
        detached: false,
    }
}

fn root(a: f64) -> FeatureNode {
    FeatureNode {
        id: RootSpec::Logit { pos: 0, token: 0 }.node_id(1),
        activation: a,
        detached: false,
    }
}

/// A hand graph whose non-leaf activations are the linear forward values.
fn hand_graph(n_leaves: usize, leaf_acts: &[f64], n: usize, edges: &[(usize, usize, f64)]) -> LinearGraph {
    let mut act = vec![0.0; n];
    act[..n_leaves].copy_from_slice(&leaf_acts[..n_leaves]);
    for v in n_leaves..n {
        act[v] = edges.iter().filter(|e| e.1 == v).map(|e| e.2 * act[e.0]).sum();
    }
    let nodes = (0..n)
        .map(|v| {
            if v < n_leaves {
                leaf(v, act[v])
            } else if v + 1 < n {
                inner(v, act[v])
            } else {
                root(act[v])
            }
        })
        .collect();
    LinearGraph::from_edges(nodes, edges).unwrap()
}

/// Σ over all paths from `v` to `t` of the product of edge weights.
fn path_sum(edges: &[(usize, usize, f64)], v: usize, t: usize) -> f64 {
    if v == t {
        return 1.0;
    }
    edges.iter().filter(|e| e.0 == v).map(|e| e.2 * path_sum(edges, e.1, t)).sum()
}

#[test]
fn five_node_dag_matches_path_enumeration() {
    let edges = [(0, 2, 0.5), (0, 3, -1.5), (1, 2, 2.0), (1, 4, 0.25), (2, 3, 3.0), (2, 4, -0.75), (3, 4, 1.25)];
    let g = hand_graph(2, &[1.5, -0.5], 5, &edges);
    let t = g.nodes[4].id;
    for v in 0..5 {
        let oracle = g.nodes[v].activation * path_sum(&edges, v, 4);
        let got = attribution_score(&g, &g.nodes[v].id, &t).unwrap();
        assert!((got - oracle).abs() < 1e-12, "node {v}: {got} vs {oracle}");
    }
    assert_eq!(attribution_score(&g, &t, &t).unwrap(), g.nodes[4].activation);
    let missing = NodeId::feature(GraphSite::Mlp, 3, 0, 0);
    assert!(attribution_score(&g, &missing, &t).is_err());
    assert!(attribution_score(&g, &t, &g.nodes[2].id).is_err());
}

#[test]
fn disconnected_node_scores_zero() {
    let g = hand_graph(3, &[1.0, 2.0, 5.0], 4, &[(0, 3, 1.0), (1, 3, 1.0)]);
    assert_eq!(attribution_score(&g, &g.nodes[2].id, &g.nodes[3].id).unwrap(), 0.0);
}

#[test]
fn two_leaf_hand_dag() {
    let g = hand_graph(2, &[1.0, 2.0], 3, &[(0, 2, 1.0), (1, 2, 1.0)]);
    assert_eq!(g.nodes[2].activation, 3.0);
    let r = standard_attribute(&g, &AttributionOptions::full(0.0));
    assert_eq!(r.leaf_scores, vec![(0, 1.0), (1, 2.0)]);
    assert_eq!(r.leaf_sum, 3.0);
    assert_eq!(leaf_sum_evaluate(&r).unwrap(), 1.0);
}

#[test]
fn zero_root_is_an_error() {
    let g = hand_graph(2, &[1.0, 1.0], 3, &[(0, 2, 1.0), (1, 2, -1.0)]);
    let r = standard_attribute(&g, &AttributionOptions::full(0.0));
    assert!(matches!(leaf_sum_evaluate(&r), Err(lincirc::Error::ZeroRoot)));
}

#[test]
fn hierarchical_cuts_through_pruned_intermediates() {
    // a (leaf, 5) feeds b and the root directly; c (leaf, 10) feeds the root.
    let edges = [(0, 2, 1.0), (0, 3, 1.0), (1, 3, 1.0), (2, 3, 1.0)];
    let g = hand_graph(2, &[5.0, 10.0], 4, &edges);
    let opts = AttributionOptions::full(7.0);
    let full = all_scores(&g);
    assert_eq!((full[0], full[2]), (10.0, 5.0));

    let std = standard_attribute(&g, &opts);
    assert_eq!(std.surviving, vec![true, true, false, true]);
    // Leaf scores are recomputed without b: a keeps only its direct path.
    assert_eq!(std.leaf_scores, vec![(0, 5.0), (1, 10.0)]);

    let hier = hierarchical_attribute(&g, &opts);
    assert_eq!(hier.surviving, vec![false, true, false, true]);
    assert_eq!(hier.scores[0], 0.0);
    assert_eq!(hier.leaf_sum, 10.0);
}

#[test]
fn chain_below_threshold_starves_upstream() {
    // a -> b -> t with b under threshold; a also has a large score elsewhere
    // in the full graph through a second chain a -> c -> t.
    let edges = [(0, 1, 0.1), (0, 2, 1.0), (1, 3, 1.0), (2, 3, 1.0)];
    let nodes = vec![leaf(0, 10.0), inner(1, 1.0), inner(2, 10.0), root(11.0)];
    let g = LinearGraph::from_edges(nodes, &edges).unwrap();
    let r = hierarchical_attribute(&g, &AttributionOptions::full(2.0));
    assert!(!r.surviving[1]);
    assert_eq!(r.scores[0], 10.0);
    let r = hierarchical_attribute(&g, &AttributionOptions::full(10.5));
    assert!(!r.surviving[2]);
    assert_eq!(r.scores[0], 0.0);
    assert!(all_scores(&g)[0] > 10.5);
}

#[test]
fn signed_graphs_can_gain_nodes_as_tau_grows() {
    // u's two routes cancel at τ = 0; cutting the small negative one
    // revives u and its inputs.
    let edges = [(0, 3, 1.0), (1, 3, 1.0), (3, 4, 1.0), (3, 5, 1.0), (2, 5, -1.0), (4, 6, 1.0), (5, 6, -1.0)];
    let g = hand_graph(3, &[1.0, 1.0, 2.0], 7, &edges);
    assert_eq!(all_scores(&g)[3], 0.0);
    let low = hierarchical_attribute(&g, &AttributionOptions::full(0.0));
    let high = hierarchical_attribute(&g, &AttributionOptions::full(0.5));
    assert!(high.surviving_count() > low.surviving_count());
}

#[test]
fn threshold_above_root_keeps_only_root() {
    let edges = [(0, 2, 0.5), (1, 2, 1.0), (2, 3, 2.0), (0, 3, 1.0)];
    let g = hand_graph(2, &[1.0, 3.0], 4, &edges);
    let a_t = g.nodes[3].activation;
    for m in [Method::Standard, Method::Hierarchical] {
        let r = attribute(&g, m, &AttributionOptions::full(a_t * 1.01));
        assert_eq!(r.surviving_count(), 1);
        assert!(r.surviving[g.root]);
        assert_eq!(leaf_sum_evaluate(&r).unwrap(), 0.0);
    }
}

fn random_dag(n_leaves: usize, n: usize, weights: &[f64], density: &[bool], non_negative: bool) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    let mut k = 0;
    for d in n_leaves..n {
        for s in 0..d {
            let (w, on) = (weights[k % weights.len()], density[k % density.len()]);
            k += 1;
            if on || s + 1 == d {
                edges.push((s, d, if non_negative { w.abs() } else { w }));
            }
        }
    }
    edges
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn leaf_sum_recovers_root(
        n_leaves in 1usize..5,
        n_inner in 0usize..5,
        leaves in prop::collection::vec(-3.0f64..3.0, 5),
        weights in prop::collection::vec(-2.0f64..2.0, 1..40),
        density in prop::collection::vec(any::<bool>(), 1..40),
    ) {
        let n = n_leaves + n_inner + 1;
        let edges = random_dag(n_leaves, n, &weights, &density, false);
        let g = hand_graph(n_leaves, &leaves, n, &edges);
        prop_assume!(g.nodes[g.root].activation.abs() > 1e-6);
        let r = standard_attribute(&g, &AttributionOptions::full(0.0));
        let rec = leaf_sum_evaluate(&r).unwrap();
        prop_assert!((rec - 1.0).abs() < 1e-9 * (1.0 + 1.0 / g.nodes[g.root].activation.abs()));
        let stored: f64 = r.leaf_scores.iter().map(|(_, s)| s).sum();
        prop_assert_eq!(stored, r.leaf_sum);
        for v in 0..n {
            let oracle = g.nodes[v].activation * path_sum(&edges, v, n - 1);
            prop_assert!((r.scores[v] - oracle).abs() < 1e-9 * (1.0 + oracle.abs()));
        }
    }

    #[test]
    fn surviving_subgraph_is_faithful(
        n_leaves in 1usize..5,
        n_inner in 0usize..6,
        leaves in prop::collection::vec(-3.0f64..3.0, 5),
        weights in prop::collection::vec(-2.0f64..2.0, 1..40),
        density in prop::collection::vec(any::<bool>(), 1..40),
        tau in 0.0f64..2.0,
    ) {
        let n = n_leaves + n_inner + 1;
        let edges = random_dag(n_leaves, n, &weights, &density, false);
        let g = hand_graph(n_leaves, &leaves, n, &edges);
        for m in [Method::Standard, Method::Hierarchical] {
            let r = attribute(&g, m, &AttributionOptions::full(tau));
            let sub = g.evaluate(|v| r.surviving[v]);
            prop_assert!((sub - r.leaf_sum).abs() < 1e-9 * (1.0 + sub.abs()), "{:?}: {} vs {}", m, sub, r.leaf_sum);
        }
        let s = standard_attribute(&g, &AttributionOptions::full(0.0));
        let h = hierarchical_attribute(&g, &AttributionOptions::full(0.0));
        prop_assert_eq!(&s.surviving, &h.surviving);
        prop_assert_eq!(&s.scores, &h.scores);
        prop_assert_eq!(s.leaf_sum, h.leaf_sum);
    }

    #[test]
    fn hierarchical_count_monotone_on_non_negative_graphs(
        n_leaves in 1usize..5,
        n_inner in 0usize..6,
        leaves in prop::collection::vec(0.0f64..3.0, 5),
        weights in prop::collection::vec(0.0f64..2.0, 1..40),
        density in prop::collection::vec(any::<bool>(), 1..40),
    ) {
        let n = n_leaves + n_inner + 1;
        let edges = random_dag(n_leaves, n, &weights, &density, true);
        let g = hand_graph(n_leaves, &leaves, n, &edges);
        let mut last = usize::MAX;
        for tau in default_grid(12, 1e-3, 10.0) {
            let c = hierarchical_attribute(&g, &AttributionOptions::full(tau)).surviving_count();
            prop_assert!(c <= last);
            last = c;
        }
    }

    #[test]
    fn nested_affine_contributions(
        w1 in prop::collection::vec(-2.0f64..2.0, 9),
        b1 in prop::collection::vec(-1.0f64..1.0, 3),
        w2 in prop::collection::vec(-2.0f64..2.0, 9),
        b2 in prop::collection::vec(-1.0f64..1.0, 3),
        p1 in prop::collection::vec(-3.0f64..3.0, 3),
        p2 in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let f1 = FrozenAffine::new(w1.clone(), 3, 3, b1.clone()).unwrap();
        let f2 = FrozenAffine::new(w2.clone(), 3, 3, b2.clone()).unwrap();
        let x: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a + b).collect();
        let c = direct_contribution(&[f1, f2], &[p1.clone(), p2.clone()], &x).unwrap();
        // Direct oracle: y = W2ᵀ(W1ᵀx + b1) + b2 with row-vector weights.
        let lin = |w: &[f64], v: &[f64]| -> Vec<f64> { (0..3).map(|o| (0..3).map(|i| v[i] * w[i * 3 + o]).sum()).collect() };
        let y: Vec<f64> = lin(&w2, &lin(&w1, &x).iter().zip(&b1).map(|(a, b)| a + b).collect::<Vec<_>>())
            .iter().zip(&b2).map(|(a, b)| a + b).collect();
        let part1 = lin(&w2, &lin(&w1, &p1));
        let bias: Vec<f64> = lin(&w2, &b1).iter().zip(&b2).map(|(a, b)| a + b).collect();
        for k in 0..3 {
            prop_assert!((c.parts[0][k] - part1[k]).abs() < 1e-9);
            prop_assert!((c.bias[k] - bias[k]).abs() < 1e-9);
            prop_assert!((c.total()[k] - y[k]).abs() < 1e-9);
        }
    }
}

#[test]
fn model_graph_recovery_and_error_shortfall() {
    let t = tiny(30);
    for seed in 0..3 {
        let tokens = random_tokens(&t.vocab, 8, 200 + seed);
        let cache = cache_for(&t.model, &tokens);
        let g = build_graph(&t.model, &cache, &t.dicts, RootSpec::Logit { pos: 7, token: 9 }).unwrap();
        let full = standard_attribute(&g, &AttributionOptions::full(0.0));
        let rec = leaf_sum_evaluate(&full).unwrap();
        assert!((rec - 1.0).abs() < 1e-3, "recovery {rec} of {}", g.nodes[g.root].activation);
        let detached = standard_attribute(&g, &AttributionOptions::default());
        let err: f64 = (0..g.len())
            .filter(|&v| g.nodes[v].id.kind == NodeKind::Error)
            .map(|v| full.scores[v])
            .sum();
        assert!((full.leaf_sum - detached.leaf_sum - err).abs() < 1e-9 * (1.0 + err.abs()));
        assert!(detached.leaf_scores.iter().all(|&(v, _)| g.nodes[v].id.kind != NodeKind::Error));
        for tau in [1e-3, 1e-2, 1e-1] {
            for m in [Method::Standard, Method::Hierarchical] {
                let r = attribute(&g, m, &AttributionOptions::full(tau));
                let sub = g.evaluate(|v| r.surviving[v]);
                assert!((sub - r.leaf_sum).abs() < 1e-9 * (1.0 + sub.abs()));
            }
        }
        let exported = full.export(&g);
        assert!(exported.nodes.iter().all(|n| n.attr.is_some() && n.surviving.is_some()));
    }
}

#[test]
fn sweep_over_model_graphs() {
    let t = tiny(31);
    let graphs: Vec<LinearGraph> = (0..3)
        .map(|k| {
            let tokens = random_tokens(&t.vocab, 8, 300 + k);
            let cache = cache_for(&t.model, &tokens);
            build_graph(&t.model, &cache, &t.dicts, RootSpec::Logit { pos: 7, token: 2 }).unwrap()
        })
        .collect();
    let grid = default_grid(10, 1e-4, 1.0);
    let s = sparsity_sweep(&graphs, &grid, &AttributionOptions::default()).unwrap();
    assert_eq!(s.points.len(), 20);
    let std0 = s.curve(Method::Standard).next().unwrap();
    let hier0 = s.curve(Method::Hierarchical).next().unwrap();
    assert_eq!(std0.mean_nodes, hier0.mean_nodes);
    assert_eq!(std0.mean_recovery, hier0.mean_recovery);
    let back = lincirc::attribution::ThresholdSweep::from_csv(&s.to_csv()).unwrap();
    assert_eq!(back.points, s.points);
    assert!(sparsity_sweep(&[], &grid, &AttributionOptions::default()).is_err());
}

#[test]
fn qk_terms_sum_to_cached_scores() {
    let t = tiny(32);
    let tokens = random_tokens(&t.vocab, 8, 400);
    let cache = cache_for(&t.model, &tokens);
    for layer in 0..2 {
        let ctx = QkContext::new(&t.model, &cache, &t.dicts, layer, 8).unwrap();
        for h in 0..2 {
            for i in 0..8 {
                for j in 0..=i {
                    let a = ctx.pair(h, i, j).unwrap();
                    assert!(a.residual().abs() < QK_TOL, "L{layer} h{h} ({i},{j}): residual {}", a.residual());
                    let sum: f64 = a.pairs.iter().map(|p| p.score).sum();
                    assert!((sum - a.total()).abs() < 1e-9 * (1.0 + sum.abs()));
                    assert!(a.pairs.windows(2).all(|w| w[0].score.abs() >= w[1].score.abs()));
                }
            }
        }
    }
    let one = qk_attribute(&t.model, &cache, &t.dicts, 1, 0, 6, 2).unwrap();
    let tt = cache.seq_len();
    assert_eq!(one.cached_score, cache.layers[1].scores.data()[(0 * tt + 6) * tt + 2] as f64);
    assert!(qk_attribute(&t.model, &cache, &t.dicts, 1, 0, 2, 6).is_err());
    assert!(qk_attribute(&t.model, &cache, &t.dicts, 1, 0, 9, 2).is_err());
}

#[test]
fn qk_without_features_or_biases_has_no_feature_terms() {
    let mut t = tiny(33);
    for m in &mut t.dicts.modules {
        m.b_e.data_mut().iter_mut().for_each(|v| *v = -100.0);
    }
    for p in &mut t.model.layers {
        for b in [&mut p.b_q, &mut p.b_k, &mut p.ln1_b] {
            b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let tokens = random_tokens(&t.vocab, 6, 401);
    let cache = cache_for(&t.model, &tokens);
    let a = qk_attribute(&t.model, &cache, &t.dicts, 1, 1, 5, 3).unwrap();
    let is_feature = |s: &PairSide| matches!(s, PairSide::Node(n) if n.feature.is_some());
    assert!(a.pairs.iter().all(|p| !is_feature(&p.query) && !is_feature(&p.key)));
    assert_eq!(a.bias_total, 0.0);
    assert!(a.residual().abs() < QK_TOL);
}

#[test]
fn recursive_qk_expands_attention_features() {
    let t = tiny(34);
    let tokens = random_tokens(&t.vocab, 8, 402);
    let cache = cache_for(&t.model, &tokens);
    let tree = qk_attribute_recursive(&t.model, &cache, &t.dicts, 1, 0, 7, 3, 2, 8).unwrap();
    assert!(tree.residual.abs() < QK_TOL);
    for (id, child) in &tree.children {
        assert_eq!(id.kind, NodeKind::AttnFeature);
        assert_eq!(child.layer, id.layer);
        assert_eq!(child.query_pos, id.pos);
        assert!(child.key_pos <= child.query_pos);
        assert!(child.children.is_empty());
    }
}
