use super::*;
use crate::instances::{generate_instance, Point};
use crate::model::{ModelConfig, FUSION_GATE_INIT};
use proptest::prelude::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        heads: 2,
        ..Default::default()
    }
}

fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_config(), seed).unwrap()
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn eye(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.data_mut()[i * d + i] = 1.0;
    }
    t
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn single_customer_embedding_shape() {
    let inst = generate_instance(1, 30, 3).unwrap();
    let h0 = initial_embedding(&inst, &tiny_model(1)).unwrap();
    assert_eq!(h0.shape(), [2, 8]);
}

#[test]
fn identical_customers_get_identical_rows() {
    let p = Point::new(0.3, 0.7);
    let inst = Instance::new("twin", Point::new(0.5, 0.5), vec![p, Point::new(0.9, 0.1), p], vec![4, 2, 4], 30).unwrap();
    let h0 = initial_embedding(&inst, &tiny_model(2)).unwrap();
    for (a, b) in h0.row(1).iter().zip(h0.row(3)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn selection_score_examples() {
    let orth = mat(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
    let s = selection_scores(&orth, &eye(4)).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert_eq!(s.at(&[i, j]), 0.0);
            }
        }
    }
    let same = mat(&[&[0.5, 0.5, 0.5, 0.5], &[0.5, 0.5, 0.5, 0.5]]);
    let s = selection_scores(&same, &eye(4)).unwrap();
    assert!((s.at(&[0, 1]) - 0.5).abs() < 1e-15);

    let inst = generate_instance(7, 30, 11).unwrap();
    let m = tiny_model(4);
    let h0 = initial_embedding(&inst, &m).unwrap();
    let s = selection_scores(&h0, m.params.get("enc.hg0.sel").unwrap()).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            assert_eq!(s.at(&[i, j]).to_bits(), s.at(&[j, i]).to_bits());
        }
    }
}

#[test]
fn candidate_selection_is_strict() {
    let s = mat(&[&[9.0, 0.3, -0.1, 0.0], &[0.3, 9.0, 0.0, 0.0], &[-0.1, 0.0, 9.0, 0.0], &[0.0, 0.0, 0.0, 9.0]]);
    assert_eq!(select_candidates(&s, 0.0)[0], vec![1]);
    assert!(select_candidates(&s, f64::INFINITY).iter().all(Vec::is_empty));
    let all = select_candidates(&s, f64::NEG_INFINITY);
    assert_eq!(all[2], vec![0, 1, 3]);
}

fn line_instance(demands: &[u32], cap: u32) -> Instance {
    let pts = (0..demands.len()).map(|i| Point::new(0.1 + 0.05 * i as f64, 0.5)).collect();
    Instance::new("line", Point::new(0.1, 0.4), pts, demands.to_vec(), cap).unwrap()
}

#[test]
fn capacity_penalty_examples() {
    // customers 1..=5 with demands; master 2 has demand 2
    let inst = line_instance(&[1, 2, 3, 4, 5], 10);
    let (members, pen) = constraint_filter(&[4, 5, 3], &inst, 2, Constraint::Capacity, 0.35).unwrap();
    assert_eq!(members, vec![2, 3, 4, 5]);
    assert!((pen - 0.4).abs() < 1e-15);
    let (_, pen) = constraint_filter(&[1, 3], &inst, 2, Constraint::Capacity, 0.35).unwrap();
    assert_eq!(pen, 0.0);
    let (members, pen) = constraint_filter(&[0, 1], &inst, 2, Constraint::Capacity, 0.35).unwrap();
    assert_eq!(members, vec![0, 1, 2]);
    assert_eq!(pen, 0.0);
}

#[test]
fn proximity_filter_examples() {
    let inst = line_instance(&[1, 1, 1, 1, 1], 10);
    let (members, pen) = constraint_filter(&[1, 3, 4], &inst, 2, Constraint::Proximity, 0.35).unwrap();
    assert_eq!(members, vec![1, 2, 3, 4]);
    assert_eq!(pen, 0.0);
    let (members, pen) = constraint_filter(&[1, 3, 5], &inst, 2, Constraint::Proximity, 0.08).unwrap();
    assert_eq!(members, vec![1, 2, 3]);
    assert!((pen - 1.0 / 3.0).abs() < 1e-15);
    assert!(constraint_filter(&[2], &inst, 2, Constraint::Proximity, 0.1).is_err());
}

fn edge(master: usize, members: &[usize], coefficients: &[f64]) -> Hyperedge {
    Hyperedge {
        layer: 0,
        master,
        constraint: Constraint::Capacity,
        members: members.to_vec(),
        coefficients: coefficients.to_vec(),
        penalty: 0.0,
    }
}

#[test]
fn hyperedge_embedding_examples() {
    let h0 = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    assert_eq!(hyperedge_embedding(&h0, &edge(1, &[1], &[1.0])), vec![0.0, 1.0]);
    assert_eq!(hyperedge_embedding(&h0, &edge(0, &[0, 1], &[1.0, 0.5])), vec![0.5, 0.25]);
    let h = mat(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
    let base = hyperedge_embedding(&h, &edge(0, &[0, 1, 2], &[1.0, 0.3, -0.2]));
    let doubled = hyperedge_embedding(&h, &edge(0, &[0, 1, 2], &[1.0, 0.6, -0.4]));
    let master_part: Vec<f64> = h.row(0).iter().map(|x| x / 3.0).collect();
    for i in 0..2 {
        let member = base[i] - master_part[i];
        assert!((doubled[i] - master_part[i] - 2.0 * member).abs() < 1e-15);
    }
}

#[test]
fn mha_fuse_examples() {
    let wq = mat(&[&[1.0, 0.0], &[0.0, 2.0]]);
    let wk = mat(&[&[0.5, 1.0], &[0.0, 1.0]]);
    let wv = mat(&[&[1.0, -1.0], &[2.0, 0.0]]);
    let master = [1.0, 0.5];
    let e1 = vec![1.0, 0.0];
    let e2 = vec![0.0, 2.0];

    let (single, w) = mha_fuse(&master, std::slice::from_ref(&e1), &wq, &wk, &wv, 1).unwrap();
    assert_eq!(w, vec![vec![1.0]]);
    assert_eq!(single, vec![1.0, -1.0]);

    let (twice, w) = mha_fuse(&master, &[e1.clone(), e1.clone()], &wq, &wk, &wv, 1).unwrap();
    assert_eq!(w[0], vec![0.5, 0.5]);
    assert_eq!(twice, single);

    // q = [1, 1]; k1 = [0.5, 1], k2 = [0, 2]; u = [1.5, 2] / √2
    let (out, w) = mha_fuse(&master, &[e1, e2], &wq, &wk, &wv, 1).unwrap();
    let u1 = 1.5 / 2f64.sqrt();
    let u2 = 2.0 / 2f64.sqrt();
    let p1 = 1.0 / (1.0 + (u2 - u1).exp());
    let p2 = 1.0 - p1;
    // v1 = [1, -1], v2 = [4, 0]
    let want = [p1 * 1.0 + p2 * 4.0, -p1];
    assert!((w[0][0] - p1).abs() < 1e-15 && (w[0][1] - p2).abs() < 1e-15);
    assert!((out[0] - want[0]).abs() < 1e-14 && (out[1] - want[1]).abs() < 1e-14);
}

#[test]
fn node_correlation_examples() {
    let h0 = mat(&[&[1.0, 2.0], &[0.0, 0.0]]);
    let proj = eye(2);
    assert_eq!(node_correlation_loss(&h0, &[edge(0, &[0], &[1.0])], &proj), 0.0);
    // projected master [3, 4] against an all-zero reconstruction
    let h0 = mat(&[&[3.0, 4.0], &[1.0, 1.0]]);
    let e = edge(0, &[0, 1], &[0.0, 0.0]);
    assert_eq!(node_correlation_loss(&h0, std::slice::from_ref(&e), &proj), 5.0);
    let scaled = mat(&[&[6.0, 8.0], &[2.0, 2.0]]);
    let e2 = edge(0, &[0, 1], &[1.0, 0.7]);
    let a = node_correlation_loss(&h0, std::slice::from_ref(&e2), &mat(&[&[0.2, 1.0], &[-0.5, 0.3]]));
    let b = node_correlation_loss(&scaled, std::slice::from_ref(&e2), &mat(&[&[0.2, 1.0], &[-0.5, 0.3]]));
    assert!((b - 2.0 * a).abs() < 1e-12);
}

#[test]
fn reconstruction_and_constraint_examples() {
    assert_eq!(reconstruction_loss(1.5, &[vec![0.0, 0.0]], 0.2), 1.5);
    let r = reconstruction_loss(2.0, &[vec![0.6, -0.8]], 0.2);
    assert!((r - (2.0 + 1.4 + 0.2)).abs() < 1e-15);
    assert_eq!(reconstruction_loss(2.0, &[vec![0.6, -0.8]], 0.0), 2.0 + 1.4);
    assert_eq!(constraint_loss(&[]), 0.0);
    assert!((constraint_loss(&[0.4, 0.1]) - 0.5).abs() < 1e-15);
    assert_eq!(constraint_loss(&[0.4, 0.1, 0.0]), constraint_loss(&[0.4, 0.1]));
}

fn two_constraint_config() -> ModelConfig {
    ModelConfig {
        constraints: vec![Constraint::Capacity, Constraint::Proximity],
        ..tiny_config()
    }
}

#[test]
fn full_pass_shapes_and_finiteness() {
    let inst = generate_instance(6, 30, 21).unwrap();
    for cfg in [tiny_config(), two_constraint_config()] {
        let model = Model::new(cfg, 8).unwrap();
        let enc = encode(std::slice::from_ref(&inst), &model).unwrap().remove(0);
        assert_eq!(enc.h0.shape(), [7, 8]);
        assert_eq!(enc.h.shape(), [7, 8]);
        assert_eq!(enc.graph.shape(), [8]);
        let l = enc.losses;
        assert!([l.node, l.rec, l.con, l.hg].iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(enc.hyperedges.edges.len(), 7 * model.config.constraints.len());
        for j in 0..8 {
            let mean: f64 = (0..7).map(|i| enc.h.at(&[i, j])).sum::<f64>() / 7.0;
            assert!((mean - enc.graph.data()[j]).abs() < 1e-12);
        }
    }
}

/// The recorded batch path against the plain single-piece functions.
#[test]
fn batched_encoder_matches_piecewise_evaluation() {
    let inst = generate_instance(6, 30, 5).unwrap();
    let model = Model::new(two_constraint_config(), 13).unwrap();
    let enc = encode(std::slice::from_ref(&inst), &model).unwrap().remove(0);
    let p = &model.params;
    let h0 = initial_embedding(&inst, &model).unwrap();
    assert_eq!(h0, enc.h0);

    let s = selection_scores(&h0, p.get("enc.hg0.sel").unwrap()).unwrap();
    let cands = select_candidates(&s, model.config.delta);
    let mut edges = Vec::new();
    for (i, c) in cands.iter().enumerate() {
        for &con in &model.config.constraints {
            let (members, pen) = constraint_filter(c, &inst, i, con, model.config.r_prox).unwrap();
            let coefficients = members.iter().map(|&v| if v == i { 1.0 } else { s.at(&[i, v]) }).collect();
            edges.push(Hyperedge {
                layer: 0,
                master: i,
                constraint: con,
                members,
                coefficients,
                penalty: pen,
            });
        }
    }
    assert_eq!(edges, enc.hyperedges.edges);

    let l_node = node_correlation_loss(&h0, &edges, p.get("enc.hg0.proj").unwrap());
    let coeffs: Vec<Vec<f64>> = edges.iter().map(Hyperedge::member_coefficients).collect();
    let l_rec = reconstruction_loss(l_node, &coeffs, model.config.lambda);
    let l_con = constraint_loss(&edges.iter().map(|e| e.penalty).collect::<Vec<_>>());
    assert!(close(enc.losses.node, l_node, 1e-12));
    assert!(close(enc.losses.rec, l_rec, 1e-12));
    assert!(close(enc.losses.con, l_con, 1e-12));
    assert!(close(enc.losses.hg, l_rec + model.config.gamma * l_con, 1e-12));

    let m = model.config.constraints.len();
    for i in 0..7 {
        let es: Vec<Vec<f64>> = edges[i * m..(i + 1) * m].iter().map(|e| hyperedge_embedding(&h0, e)).collect();
        let (fused, weights) = mha_fuse(
            h0.row(i),
            &es,
            p.get("enc.hg0.q").unwrap(),
            p.get("enc.hg0.k").unwrap(),
            p.get("enc.hg0.v").unwrap(),
            model.config.heads,
        )
        .unwrap();
        for w in &weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let gate = p.get("enc.hg0.gate").unwrap().data()[0];
        for ((a, x), b) in fused.iter().zip(h0.row(i)).zip(enc.h.row(i)) {
            assert!(close(x + gate * a, *b, 1e-12), "{x} + {gate}·{a} vs {b}");
        }
    }
}

#[test]
fn infinite_threshold_gives_singletons() {
    let inst = generate_instance(6, 30, 2).unwrap();
    for skip in [false, true] {
        let cfg = ModelConfig {
            delta: f64::INFINITY,
            fusion_skip: skip,
            ..tiny_config()
        };
        let model = Model::new(cfg, 3).unwrap();
        let enc = encode(std::slice::from_ref(&inst), &model).unwrap().remove(0);
        assert!(enc.hyperedges.edges.iter().all(|e| e.degree() == 1));
        assert_eq!(enc.losses.con, 0.0);
        let wv = model.params.get("enc.hg0.v").unwrap();
        for i in 0..7 {
            let want = matvec_t(enc.h0.row(i), wv);
            for ((a, x), b) in want.iter().zip(enc.h0.row(i)).zip(enc.h.row(i)) {
                let a = if skip { x + FUSION_GATE_INIT * a } else { *a };
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

fn assert_permutation_equivariant(inst: &Instance, model: &Model, order: &[usize]) {
    let base = encode(std::slice::from_ref(inst), model).unwrap().remove(0);
    let perm = inst.permuted(order).unwrap();
    let other = encode(std::slice::from_ref(&perm), model).unwrap().remove(0);
    for (k, &old) in order.iter().enumerate() {
        for (a, b) in other.h.row(k + 1).iter().zip(base.h.row(old + 1)) {
            assert!(close(*a, *b, 1e-9), "{a} vs {b}");
        }
    }
    for (a, b) in other.graph.data().iter().zip(base.graph.data()) {
        assert!(close(*a, *b, 1e-9));
    }
    let (x, y) = (other.losses, base.losses);
    for (a, b) in [(x.node, y.node), (x.rec, y.rec), (x.con, y.con), (x.hg, y.hg)] {
        assert!(close(a, b, 1e-9), "{a} vs {b}");
    }
}

#[test]
fn customer_permutation_equivariance() {
    let model = Model::new(two_constraint_config(), 9).unwrap();
    for seed in 0..10 {
        let inst = generate_instance(8, 30, seed).unwrap();
        let order: Vec<usize> = (0..8).rev().collect();
        assert_permutation_equivariant(&inst, &model, &order);
    }
}

#[test]
fn master_projection_is_reached_only_through_losses() {
    let insts: Vec<Instance> = (0..3).map(|s| generate_instance(5, 30, s).unwrap()).collect();
    let model = Model::new(two_constraint_config(), 1).unwrap();
    let mut g = Graph::new();
    let enc = encode_batch(&mut g, &model, &insts, BnMode::Train, true).unwrap();
    let total = g.sum_all(enc.losses.unwrap().hg).unwrap();
    let grads = g.backward(total).unwrap();
    assert!(grads.get("enc.hg0.sel").unwrap().data().iter().any(|&v| v != 0.0));
    assert!(grads.get("enc.hg0.proj").unwrap().data().iter().any(|&v| v != 0.0));
    assert!(grads.get("dec.cur.q").is_none());

    let mut g = Graph::new();
    let enc = encode_batch(&mut g, &model, &insts, BnMode::Train, true).unwrap();
    let fused = g.sum_all(enc.graph).unwrap();
    let grads = g.backward(fused).unwrap();
    assert!(grads.get("enc.hg0.proj").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.get("enc.hg0.sel").unwrap().data().iter().any(|&v| v != 0.0));
    assert!(grads.get("enc.hg0.q").unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn detached_coefficients_block_only_the_fusion_path() {
    let insts: Vec<Instance> = (0..3).map(|s| generate_instance(5, 30, s).unwrap()).collect();
    let live = Model::new(two_constraint_config(), 1).unwrap();
    let cfg = ModelConfig { detach_coefficients: true, ..two_constraint_config() };
    let cut = Model::new(cfg, 1).unwrap();

    let mut g = Graph::new();
    let a = encode_batch(&mut g, &live, &insts, BnMode::Train, true).unwrap();
    let (ga, ha) = (g.value(a.graph).clone(), g.value(a.losses.unwrap().hg).clone());
    let mut g = Graph::new();
    let b = encode_batch(&mut g, &cut, &insts, BnMode::Train, true).unwrap();
    assert_eq!(&ga, g.value(b.graph));
    assert_eq!(&ha, g.value(b.losses.unwrap().hg));
    let fused = g.sum_all(b.graph).unwrap();
    let grads = g.backward(fused).unwrap();
    assert!(grads.get("enc.hg0.sel").map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
    assert!(grads.get("enc.hg0.q").unwrap().data().iter().any(|&v| v != 0.0));

    let mut g = Graph::new();
    let b = encode_batch(&mut g, &cut, &insts, BnMode::Train, true).unwrap();
    let total = g.sum_all(b.losses.unwrap().hg).unwrap();
    let grads = g.backward(total).unwrap();
    assert!(grads.get("enc.hg0.sel").unwrap().data().iter().any(|&v| v != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mean_degree_non_increasing_in_threshold(seed in any::<u64>(), n in 2usize..12) {
        let inst = generate_instance(n, 30, seed).unwrap();
        let mut last = f64::INFINITY;
        for delta in [-1.0, -0.1, -0.05, 0.0, 0.05, 0.1, 1.0] {
            let cfg = ModelConfig { delta, ..two_constraint_config() };
            let model = Model::new(cfg, seed ^ 7).unwrap();
            let deg = encode(std::slice::from_ref(&inst), &model).unwrap()[0].hyperedges.mean_degree();
            prop_assert!(deg <= last);
            last = deg;
        }
    }

    #[test]
    fn zero_constraint_loss_iff_all_edges_comply(seed in any::<u64>(), n in 2usize..12, cap in 9u32..25) {
        let inst = generate_instance(n, cap, seed).unwrap();
        let cfg = ModelConfig { delta: -0.2, r_prox: 0.3, ..two_constraint_config() };
        let model = Model::new(cfg, seed).unwrap();
        let enc = encode(std::slice::from_ref(&inst), &model).unwrap().remove(0);
        let s = selection_scores(&enc.h0, model.params.get("enc.hg0.sel").unwrap()).unwrap();
        let cands = select_candidates(&s, -0.2);
        let comply = enc.hyperedges.edges.iter().all(|e| match e.constraint {
            Constraint::Capacity => {
                let load: u32 = inst.demand(e.master) + cands[e.master].iter().map(|&v| inst.demand(v)).sum::<u32>();
                load <= inst.capacity
            }
            Constraint::Proximity => e.degree() == cands[e.master].len() + 1,
        });
        prop_assert_eq!(enc.losses.con == 0.0, comply);
    }

    #[test]
    fn permutation_equivariance_random_orders(seed in any::<u64>(), n in 2usize..10, shift in 1usize..9) {
        let inst = generate_instance(n, 30, seed).unwrap();
        let model = Model::new(two_constraint_config(), seed).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(shift % n);
        order.swap(0, n - 1);
        assert_permutation_equivariant(&inst, &model, &order);
    }
}
