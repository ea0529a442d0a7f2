use proptest::prelude::*;
use scenecomp::audit::{audit_model, leakage_audit, mask_audit};
use scenecomp::embed::SceneBatch;
use scenecomp::scene::{BoundingBox, Edge, Node, SceneGraph};
use scenecomp::slvae::{kl_per_node, GaussianLatent, D_Z};
use scenecomp::synth::{generate_scene, vocabulary, SynthConfig};
use tensor::{Graph, Rng, Tensor};

fn closed_form_kl(mu: &[f64], sigma: &[f64]) -> f64 {
    let mut g = Graph::new();
    let d = mu.len();
    let lat = GaussianLatent {
        mu: g.constant(Tensor::new(&[1, d], mu.to_vec()).unwrap()).unwrap(),
        log_sigma: g
            .constant(Tensor::new(&[1, d], sigma.iter().map(|s| s.ln()).collect()).unwrap())
            .unwrap(),
    };
    let kl = kl_per_node(&mut g, &lat).unwrap();
    g.value(kl).item()
}

/// `E_q[log q(z) - log p(z)]` from `n` draws of `q = N(mu, sigma^2)`.
fn monte_carlo_kl(mu: &[f64], sigma: &[f64], n: usize, rng: &mut Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..n {
        for (m, s) in mu.iter().zip(sigma) {
            let e = rng.normal();
            let z = m + s * e;
            acc += -0.5 * e * e - s.ln() + 0.5 * z * z;
        }
    }
    acc / n as f64
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = Rng::new(2024);
    for case in 0..20 {
        let d = 4;
        let mu: Vec<f64> = (0..d).map(|_| 3.0 * rng.uniform() - 1.5).collect();
        let sigma: Vec<f64> = (0..d).map(|_| 0.3 + 1.7 * rng.uniform()).collect();
        let exact = closed_form_kl(&mu, &sigma);
        let mc = monte_carlo_kl(&mu, &sigma, 1_000_000, &mut rng);
        let rel = (mc - exact).abs() / exact;
        assert!(rel < 0.01, "case {case}: closed {exact} vs mc {mc} (rel {rel})");
    }
}

#[test]
fn kl_fixed_points() {
    assert_eq!(closed_form_kl(&[0.0; D_Z], &[1.0; D_Z]), 0.0);
    assert!((closed_form_kl(&[1.0; 4], &[1.0; 4]) - 2.0).abs() < 1e-12);
}

#[test]
fn mask_builder_matches_brute_force_on_1000_layouts() {
    let a = mask_audit(1000, 31).unwrap();
    assert!(a.fixture_ok);
    assert_eq!(a.mismatches, 0);
}

#[test]
fn no_leakage_in_100_forward_passes() {
    let model = audit_model(8).unwrap();
    let a = leakage_audit(&model, 100, 99).unwrap();
    assert_eq!(a.violations, 0, "max forbidden weight {}", a.max_forbidden);
    assert!(a.weights_checked > 0);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let model = audit_model(4).unwrap();
    let graph = SceneGraph {
        nodes: vec![
            Node::new("a", "circle").with_attributes(&["red"]).with_bbox(BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap()),
            Node::new("b", "square").with_attributes(&["blue"]).with_bbox(BoundingBox::new(0.5, 0.2, 0.4, 0.3).unwrap()),
            Node::new("c", "triangle").with_bbox(BoundingBox::new(0.2, 0.6, 0.3, 0.3).unwrap()),
        ],
        edges: vec![Edge::new("a", "left of", "b"), Edge::new("c", "above", "a")],
    };
    let perm = [2, 0, 1];
    let permuted = SceneGraph {
        nodes: perm.iter().map(|&i| graph.nodes[i].clone()).collect(),
        edges: graph.edges.clone(),
    };
    let mu = |s: &SceneGraph| {
        let mut g = Graph::new();
        let lat = model.vae.encode(&mut g, &model.store, &model.embedder, &SceneBatch::single(s)).unwrap();
        g.value(lat.mu).clone()
    };
    let (a, b) = (mu(&graph), mu(&permuted));
    for (row, &src) in perm.iter().enumerate() {
        for d in 0..D_Z {
            assert!((b.at(row, d) - a.at(src, d)).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_scenes_round_trip_through_json(seed in any::<u64>()) {
        let scene = generate_scene(seed, &SynthConfig::default()).unwrap();
        let text = scene.graph.to_json();
        let back = SceneGraph::parse(text.as_bytes(), &vocabulary()).unwrap();
        prop_assert_eq!(&back, &scene.graph);
        prop_assert_eq!(back.to_json(), text);
        prop_assert_eq!(back.triples().len(), back.edges.len());
    }

    #[test]
    fn triples_index_valid_nodes(seed in any::<u64>()) {
        let g = generate_scene(seed, &SynthConfig::default()).unwrap().graph;
        for (k, t) in g.triples().iter().enumerate() {
            prop_assert_eq!(t.edge, k);
            prop_assert_eq!(&g.nodes[t.subject].id, &g.edges[k].subject);
            prop_assert_eq!(&g.nodes[t.object].id, &g.edges[k].object);
            prop_assert_ne!(t.subject, t.object);
        }
    }
}
