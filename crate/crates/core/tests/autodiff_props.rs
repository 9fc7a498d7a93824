use ndarray::Array2;
use proptest::prelude::*;

use vfm_core::autodiff::{Graph, NodeId, Tensor};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.5f64..1.5, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

/// A composite of every op used by the training losses. Returns the graph,
/// the parameter nodes and the scalar loss.
fn composite(w: &Tensor, b: &Tensor, x: &Tensor, stop: bool) -> (Graph, Vec<NodeId>, NodeId) {
    let mut g = Graph::new();
    let wn = g.parameter(w.clone());
    let bn = g.parameter(b.clone());
    let xn = g.parameter(x.clone());
    let xw = g.matmul(xn, wn).unwrap();
    let pre = g.add(xw, bn).unwrap();
    let h = g.silu(pre).unwrap();
    let h3 = g.scale(h, 0.3).unwrap();
    let e = g.exp(h3).unwrap();
    let sq = g.square(h).unwrap();
    let one = g.scalar_input(1.0);
    let sq1 = g.add(sq, one).unwrap();
    let l = g.log(sq1).unwrap();
    let el = g.mul(e, l).unwrap();
    let hs = if stop { g.stop_gradient(h).unwrap() } else { h };
    let d = g.sub(el, hs).unwrap();
    let left = g.slice_cols(d, 0, 2).unwrap();
    let cat = g.concat(&[left, h]).unwrap();
    let cols = g.sum_cols(cat).unwrap();
    let cl = g.clamp(cols, -50.0, 50.0).unwrap();
    let m = g.mean(cl).unwrap();
    let s = g.sum(sq).unwrap();
    let loss = g.add(m, s).unwrap();
    (g, vec![wn, bn, xn], loss)
}

fn loss_at(vals: &[Tensor]) -> f64 {
    let (g, _, l) = composite(&vals[0], &vals[1], &vals[2], false);
    g.scalar_value(l).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn backward_matches_central_differences(w in tensor(3, 4), b in tensor(1, 4), x in tensor(5, 3)) {
        let (g, params, loss) = composite(&w, &b, &x, false);
        let grads = g.backward(loss).unwrap();
        let vals = [w, b, x];
        let h = 1e-5;
        for (k, id) in params.iter().enumerate() {
            let ga = grads.get(*id).unwrap();
            for idx in 0..vals[k].len() {
                let (r, c) = (idx / vals[k].ncols(), idx % vals[k].ncols());
                let mut plus = vals.clone();
                plus[k][[r, c]] += h;
                let mut minus = vals.clone();
                minus[k][[r, c]] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                prop_assert!((ga[[r, c]] - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "param {k} entry {idx}: {} vs {fd}", ga[[r, c]]);
            }
        }
    }

    #[test]
    fn jvp_agrees_with_reverse_mode(w in tensor(3, 4), b in tensor(1, 4), x in tensor(5, 3), v in tensor(5, 3)) {
        let (g, params, loss) = composite(&w, &b, &x, false);
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(params[2]).unwrap();
        let dot: f64 = (gx * &v).sum();
        let jvp = g.jvp(loss, &[(params[2], v)]).unwrap()[[0, 0]];
        prop_assert!((jvp - dot).abs() <= 1e-10 * (1.0 + dot.abs()), "{jvp} vs {dot}");
    }

    #[test]
    fn stop_gradient_is_value_transparent(w in tensor(3, 4), b in tensor(1, 4), x in tensor(5, 3)) {
        let (g1, _, l1) = composite(&w, &b, &x, false);
        let (g2, _, l2) = composite(&w, &b, &x, true);
        prop_assert_eq!(g1.scalar_value(l1).unwrap().to_bits(), g2.scalar_value(l2).unwrap().to_bits());
    }

    #[test]
    fn evaluation_is_deterministic(w in tensor(3, 4), b in tensor(1, 4), x in tensor(5, 3)) {
        let (g1, p1, l1) = composite(&w, &b, &x, true);
        let (g2, p2, l2) = composite(&w, &b, &x, true);
        prop_assert_eq!(g1.scalar_value(l1).unwrap().to_bits(), g2.scalar_value(l2).unwrap().to_bits());
        let (a, c) = (g1.backward(l1).unwrap(), g2.backward(l2).unwrap());
        for (i, j) in p1.iter().zip(&p2) {
            prop_assert_eq!(a.get(*i).unwrap(), c.get(*j).unwrap());
        }
    }
}

#[test]
fn stop_gradient_blocks_one_factor() {
    let mut g = Graph::new();
    let x = g.parameter(Array2::from_elem((1, 1), 3.0));
    let sx = g.stop_gradient(x).unwrap();
    let y = g.mul(sx, x).unwrap();
    let s = g.sum(y).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap()[[0, 0]], 3.0);
}
