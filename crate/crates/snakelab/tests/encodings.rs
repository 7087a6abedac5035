use std::collections::VecDeque;

use snakelab::displacements::{sample_displacements, DisplacementModel};
use snakelab::sampling::{sample_tree, stream_rng, OffspringLaw};
use snakelab::tree::{
    combine_height_luka, contour, encode, height, looptree_height, lukasiewicz, snake_head,
    LabeledOrderedTree, SpatialTree,
};

fn cherry() -> LabeledOrderedTree {
    LabeledOrderedTree::from_children(1, &[vec![], vec![2, 3], vec![], vec![]]).unwrap()
}

fn path(k: usize) -> LabeledOrderedTree {
    let mut ch = vec![Vec::new(); k + 1];
    for v in 1..k {
        ch[v].push(v + 1);
    }
    LabeledOrderedTree::from_children(1, &ch).unwrap()
}

/// The tree drawn with the line-breaking example: root 4 with children
/// 8, 2, 3 and the paths 3-10-1, 1-9-7, 1-11, 8-5-6.
fn figure_three() -> LabeledOrderedTree {
    let mut ch = vec![Vec::new(); 12];
    ch[4] = vec![8, 2, 3];
    ch[3] = vec![10];
    ch[10] = vec![1];
    ch[1] = vec![9, 11];
    ch[9] = vec![7];
    ch[8] = vec![5];
    ch[5] = vec![6];
    LabeledOrderedTree::from_children(4, &ch).unwrap()
}

/// Distances from the root in the looptree multigraph: every vertex with
/// children `c_1..c_k` closes the cycle `v, c_1, .., c_k, v`.
fn looptree_bfs(t: &LabeledOrderedTree) -> Vec<i64> {
    let n = t.n();
    let mut adj = vec![Vec::new(); n + 1];
    for v in 1..=n {
        let ch = t.children(v);
        if ch.is_empty() {
            continue;
        }
        let mut cyc = vec![v];
        cyc.extend_from_slice(ch);
        for i in 0..cyc.len() {
            let (a, b) = (cyc[i], cyc[(i + 1) % cyc.len()]);
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let mut dist = vec![-1i64; n + 1];
    dist[t.root()] = 0;
    let mut q = VecDeque::from([t.root()]);
    while let Some(u) = q.pop_front() {
        for &w in &adj[u] {
            if dist[w] < 0 {
                dist[w] = dist[u] + 1;
                q.push_back(w);
            }
        }
    }
    let mut out: Vec<i64> = t.preorder().into_iter().map(|v| dist[v]).collect();
    out.push(0);
    out
}

#[test]
fn lukasiewicz_small() {
    assert_eq!(lukasiewicz(&cherry()), vec![0, 1, 0, -1]);
    assert_eq!(lukasiewicz(&LabeledOrderedTree::singleton()), vec![0, -1]);
}

#[test]
fn height_small() {
    assert_eq!(height(&cherry()), vec![0, 1, 1, 0]);
    assert_eq!(height(&path(3)), vec![0, 1, 2, 0]);
}

#[test]
fn figure_tree_height_of_seven() {
    let t = figure_three();
    let order = t.preorder();
    assert_eq!(order, vec![4, 8, 5, 6, 2, 3, 10, 1, 9, 7, 11]);
    let i = order.iter().position(|&v| v == 7).unwrap();
    assert_eq!(height(&t)[i], 5);
}

#[test]
fn contour_small() {
    let (o, h) = contour(&LabeledOrderedTree::singleton());
    assert_eq!((o, h), (vec![1], vec![0]));
    let (o, h) = contour(&cherry());
    assert_eq!(o, vec![1, 2, 1, 3, 1]);
    assert_eq!(h, vec![0, 1, 0, 1, 0]);
}

#[test]
fn random_tree_invariants() {
    let law = OffspringLaw::builtin("poisson1").unwrap();
    for s in 0..20 {
        let mut rng = stream_rng(11, s);
        let t = sample_tree(&law, 50, &mut rng).unwrap();
        let (o, _) = contour(&t);
        assert_eq!(o.len(), 2 * 50 - 1);
        for v in 1..=50 {
            let mult = o.iter().filter(|&&x| x == v).count();
            assert_eq!(mult, 1 + t.degree(v));
        }
        let w = lukasiewicz(&t);
        assert_eq!(*w.last().unwrap(), -1);
        assert!(w[..50].iter().all(|&x| x >= 0));
        assert_eq!(t.degrees().as_slice().iter().sum::<usize>(), 49);
    }
}

#[test]
fn snake_head_small() {
    let sp = SpatialTree::flat(cherry());
    assert!(snake_head(&sp).0.iter().all(|&x| x == 0.0));
    let sp = SpatialTree::new(cherry(), vec![-1.0, 1.0]).unwrap();
    assert_eq!(snake_head(&sp).0, vec![0.0, -1.0, 1.0, 0.0]);
}

#[test]
fn spread_displacements_give_height_minus_luka() {
    for (name, n) in [("binary", 301), ("poisson1", 300), ("geometric_half", 300)] {
        let law = OffspringLaw::builtin(name).unwrap();
        let sigma = law.sigma();
        let model = DisplacementModel::DeterministicSpread { sigma };
        for s in 0..10 {
            let mut rng = stream_rng(5, s);
            let t = sample_tree(&law, n, &mut rng).unwrap();
            let sp = sample_displacements(&t, &model, &mut rng).unwrap();
            let (r, _) = snake_head(&sp);
            let comb = combine_height_luka(&height(&t), &lukasiewicz(&t), sigma, sigma).unwrap();
            for i in 0..n {
                assert!(
                    (r[i] - comb[i]).abs() <= 1e-9 * (1.0 + r[i].abs()),
                    "{name} i={i}"
                );
            }
        }
    }
}

#[test]
fn combine_edge_cases() {
    assert_eq!(
        combine_height_luka(&[0, 0], &[0, 0], 1.5, 2.0).unwrap(),
        vec![0.0, 0.0]
    );
    assert_eq!(
        combine_height_luka(&[3, 1], &[2, 4], 0.0, 4.0).unwrap(),
        vec![-1.0, -2.0]
    );
    assert!(combine_height_luka(&[1], &[1, 2], 1.0, 1.0).is_err());
}

#[test]
fn looptree_small() {
    let star =
        LabeledOrderedTree::from_children(1, &[vec![], vec![2, 3, 4], vec![], vec![], vec![]])
            .unwrap();
    assert_eq!(looptree_height(&star), vec![0, 1, 2, 1, 0]);
    assert_eq!(looptree_height(&path(6)), height(&path(6)));
}

#[test]
fn looptree_matches_multigraph_distances() {
    for (name, n) in [
        ("poisson1", 2000),
        ("geometric_half", 2000),
        ("binary", 1999),
    ] {
        let law = OffspringLaw::builtin(name).unwrap();
        for s in 0..5 {
            let mut rng = stream_rng(8, s);
            let t = sample_tree(&law, n, &mut rng).unwrap();
            assert_eq!(looptree_height(&t), looptree_bfs(&t), "{name} seed {s}");
        }
    }
    let t = figure_three();
    assert_eq!(looptree_height(&t), looptree_bfs(&t));
}

#[test]
fn encoded_paths_agree() {
    let law = OffspringLaw::builtin("poisson1").unwrap();
    let mut rng = stream_rng(3, 0);
    let t = sample_tree(&law, 200, &mut rng).unwrap();
    let sp = sample_displacements(
        &t,
        &DisplacementModel::DeterministicSpread { sigma: 1.0 },
        &mut rng,
    )
    .unwrap();
    let e = encode(&sp);
    assert_eq!(e.w, lukasiewicz(&t));
    assert_eq!(e.h, height(&t));
    assert_eq!(e.hloop, looptree_height(&t));
    assert_eq!(e.contour.len(), 399);
    for (i, &v) in e.contour.iter().enumerate() {
        assert_eq!(e.rtilde[i], sp.loc(v));
    }
    let mut buf = Vec::new();
    e.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 202);
}
