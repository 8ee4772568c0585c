use super::*;
use crate::patterns::{merge_heads, pattern_stats};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn params(d: usize, n_h: usize, half: bool, seed: u64) -> AttentionParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = HeadShape::new(d, n_h, half).unwrap();
    let s = 1.0 / (d as f64).sqrt();
    AttentionParams {
        shape,
        wq: randn(&[d, n_h * shape.dq], &mut rng).scale(s),
        wk: randn(&[d, n_h * shape.dq], &mut rng).scale(s),
        wv: randn(&[d, d], &mut rng).scale(s),
        wp: randn(&[d, d], &mut rng).scale(s),
    }
}

fn to_f32(p: &AttentionParams<f64>) -> AttentionParams<f32> {
    AttentionParams {
        shape: p.shape,
        wq: p.wq.cast(),
        wk: p.wk.cast(),
        wv: p.wv.cast(),
        wp: p.wp.cast(),
    }
}

/// Straight loops over explicit indices: per head, per query, softmax over
/// the allowed keys, weighted values, then the output projection.
fn loop_oracle(
    x: &Tensor<f64>,
    p: &AttentionParams<f64>,
    allowed: &[Vec<Vec<usize>>],
) -> Tensor<f64> {
    let HeadShape { d, n_h, dq, dv } = p.shape;
    let n = allowed[0].len();
    let rows = x.rows();
    let proj =
        |w: &Tensor<f64>, r: usize, c: usize| (0..d).map(|t| x.at(r, t) * w.at(t, c)).sum::<f64>();
    let mut heads = vec![vec![0.0; n_h * dv]; rows];
    for b in 0..rows / n {
        for h in 0..n_h {
            let set = &allowed[h.min(allowed.len() - 1)];
            for i in 0..n {
                let r = b * n + i;
                let qi: Vec<f64> = (0..dq).map(|c| proj(&p.wq, r, h * dq + c)).collect();
                let logits: Vec<f64> = set[i]
                    .iter()
                    .map(|&j| {
                        let kj: Vec<f64> = (0..dq)
                            .map(|c| proj(&p.wk, b * n + j, h * dq + c))
                            .collect();
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (dq as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|s| (s - m).exp()).sum();
                for (&j, s) in set[i].iter().zip(&logits) {
                    let w = (s - m).exp() / z;
                    for c in 0..dv {
                        heads[r][h * dv + c] += w * proj(&p.wv, b * n + j, h * dv + c);
                    }
                }
            }
        }
    }
    Tensor::from_fn(&[rows, d], |k| {
        let (r, c) = (k / d, k % d);
        (0..d).map(|t| heads[r][t] * p.wp.at(t, c)).sum()
    })
}

struct Run {
    out: Tensor<f64>,
    grads: Vec<Tensor<f64>>,
}

/// Forward plus gradients of `Σ out ⊙ w` for x and all weights.
fn run(
    x: &Tensor<f64>,
    p: &AttentionParams<f64>,
    w: &Tensor<f64>,
    f: impl Fn(&mut Tape<f64>, Var, &AttentionVars) -> Result<Var>,
) -> Run {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let vars = p.on_tape(&mut tape);
    let out = f(&mut tape, xv, &vars).unwrap();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let g = tape.backward(loss).unwrap();
    Run {
        out: tape.value(out).clone(),
        grads: [xv, vars.wq, vars.wk, vars.wv, vars.wp]
            .iter()
            .map(|&v| g.get(v).unwrap().clone())
            .collect(),
    }
}

fn compare(
    pat: &FactorizedPattern,
    strategy: HeadStrategy,
    d: usize,
    n_h: usize,
    batch: usize,
    tol: f64,
) {
    let n = pat.n();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64 * 31 + n_h as u64);
    let x = randn(&[batch * n, d], &mut rng);
    let w = randn(&[batch * n, d], &mut rng);
    let p = params(d, n_h, false, 7);
    let planner = AttentionPlanner::new(pat, strategy, n_h, 8, false).unwrap();
    for r in 0..pat.p() {
        let plan = planner.layer(r).clone();
        let allowed = plan.allowed_sets();
        let sparse = run(&x, &p, &w, |t, x, v| sparse_attention(t, x, v, &plan));
        let dense = run(&x, &p, &w, |t, x, v| dense_attention(t, x, v, &allowed));
        let diff = sparse.out.max_abs_diff(&dense.out);
        assert!(
            diff <= tol,
            "{:?} n={n} n_h={n_h} r={r}: forward diff {diff}",
            pat.kind()
        );
        for (a, b) in sparse.grads.iter().zip(&dense.grads) {
            let diff = a.max_abs_diff(b);
            assert!(
                diff <= tol,
                "{:?} n={n} n_h={n_h}: gradient diff {diff}",
                pat.kind()
            );
        }
    }
}

#[test]
fn single_position_is_value_projection() {
    let p = params(8, 2, false, 1);
    let x = randn(&[1, 8], &mut ChaCha8Rng::seed_from_u64(2));
    let plan = Arc::new(
        AttentionPlan::uniform(
            &FactorizedPattern::full(1).unwrap(),
            HeadSelect::Head(0),
            2,
            4,
        )
        .unwrap(),
    );
    let (out, _) = sparse_attention_forward(&x, &p, &plan).unwrap();
    let want = matmul(&matmul(&x, &p.wv).unwrap(), &p.wp).unwrap();
    assert!(out.max_abs_diff(&want) < 1e-14);
}

#[test]
fn self_only_rows_with_equal_inputs_agree() {
    let p = params(8, 1, false, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x = randn(&[4, 8], &mut rng);
    let r1 = x.row(1).to_vec();
    x.row_mut(3).copy_from_slice(&r1);
    let allowed = vec![vec![0], vec![1], vec![0, 1, 2], vec![3]];
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let vars = p.on_tape(&mut tape);
    let out = dense_attention(&mut tape, xv, &vars, &[Arc::new(allowed)]).unwrap();
    let out = tape.value(out);
    assert_eq!(out.row(1), out.row(3));
}

#[test]
fn dense_matches_loop_oracle() {
    let (n, d, n_h) = (64, 16, 4);
    let p = params(d, n_h, false, 5);
    let x = randn(&[n, d], &mut ChaCha8Rng::seed_from_u64(6));
    let pat = FactorizedPattern::strided(n, 8).unwrap();
    let allowed = pat.allowed_sets(HeadSelect::Merged);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = p.on_tape(&mut tape);
    let out = dense_attention(&mut tape, xv, &vars, &[Arc::new(allowed.clone())]).unwrap();
    let want = loop_oracle(&x, &p, &[allowed]);
    assert!(tape.value(out).max_abs_diff(&want) <= 1e-10);
}

#[test]
fn sparse_matches_loop_oracle_with_batch_and_half_qk() {
    let (n, d, n_h) = (24, 8, 2);
    let p = params(d, n_h, true, 8);
    let x = randn(&[3 * n, d], &mut ChaCha8Rng::seed_from_u64(9));
    let pat = FactorizedPattern::fixed(n, 6, 2).unwrap();
    let planner = AttentionPlanner::new(&pat, HeadStrategy::Multihead, n_h, 4, false).unwrap();
    let plan = planner.layer(0);
    let (out, _) = sparse_attention_forward(&x, &p, plan).unwrap();
    let allowed: Vec<Vec<Vec<usize>>> = plan.allowed_sets().iter().map(|a| (**a).clone()).collect();
    assert!(out.max_abs_diff(&loop_oracle(&x, &p, &allowed)) <= 1e-10);
}

#[test]
fn full_layout_matches_dense() {
    compare(
        &FactorizedPattern::full(32).unwrap(),
        HeadStrategy::Interleaved,
        8,
        2,
        2,
        1e-10,
    );
}

#[test]
fn strided_merged_matches_dense() {
    compare(
        &FactorizedPattern::strided(64, 8).unwrap(),
        HeadStrategy::Merged,
        16,
        1,
        1,
        1e-10,
    );
}

#[test]
fn every_strategy_matches_dense() {
    for pat in [
        FactorizedPattern::strided(40, 6).unwrap(),
        FactorizedPattern::fixed(40, 8, 2).unwrap(),
    ] {
        for strategy in [
            HeadStrategy::Interleaved,
            HeadStrategy::Merged,
            HeadStrategy::Multihead,
        ] {
            compare(&pat, strategy, 16, 4, 2, 1e-10);
        }
    }
}

#[test]
fn distinct_subblocks_match_dense() {
    let pat = FactorizedPattern::fixed(48, 8, 4).unwrap();
    let planner = AttentionPlanner::new(&pat, HeadStrategy::Merged, 4, 8, true).unwrap();
    let plan = planner.layer(0).clone();
    let allowed = plan.allowed_sets();
    assert!(allowed[0] != allowed[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&[48, 16], &mut rng);
    let w = randn(&[48, 16], &mut rng);
    let p = params(16, 4, false, 12);
    let s = run(&x, &p, &w, |t, x, v| sparse_attention(t, x, v, &plan));
    let d = run(&x, &p, &w, |t, x, v| dense_attention(t, x, v, &allowed));
    assert!(s.out.max_abs_diff(&d.out) <= 1e-10);
}

#[test]
fn single_precision_matches_dense() {
    let pat = FactorizedPattern::strided(64, 8).unwrap();
    let plan = Arc::new(AttentionPlan::uniform(&pat, HeadSelect::Merged, 2, 8).unwrap());
    let p = to_f32(&params(16, 2, false, 13));
    let x = randn(&[64, 16], &mut ChaCha8Rng::seed_from_u64(14)).cast::<f32>();
    let (out, _) = sparse_attention_forward(&x, &p, &plan).unwrap();
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x);
    let vars = p.on_tape(&mut tape);
    let dense = dense_attention(&mut tape, xv, &vars, &plan.allowed_sets()).unwrap();
    assert!(out.max_abs_diff(tape.value(dense)) <= 1e-4);
}

#[test]
fn work_is_proportional_to_pairs() {
    let (n, l, dh) = (4096, 64, 8);
    let pat = FactorizedPattern::strided(n, l).unwrap();
    let plan = AttentionPlan::uniform(&pat, HeadSelect::Merged, 1, crate::patterns::DEFAULT_BLOCK)
        .unwrap();
    let p = to_f32(&params(dh, 1, false, 15));
    let x = Tensor::<f32>::full(&[n, dh], 0.1);
    let (_, c) = sparse_attention_forward(&x, &p, &plan).unwrap();
    let pairs = pattern_stats(&pat).total_pairs;
    assert_eq!(c.pairs, pairs);
    assert_eq!(c.upper_pairs, 0);
    assert_eq!(c.macs, pairs * 2 * dh as u64);
    let bound = 2 * pairs * dh as u64 * 2;
    assert!(c.macs as f64 <= 1.1 * bound as f64);
    let dense = 2 * (n * (n + 1) / 2) as u64 * dh as u64;
    assert!(dense as f64 / c.macs as f64 > 20.0);
}

#[test]
fn outputs_ignore_future_inputs() {
    let (n, d) = (16, 8);
    let pat = FactorizedPattern::strided(n, 4).unwrap();
    let plan = Arc::new(AttentionPlan::uniform(&pat, HeadSelect::Merged, 2, 4).unwrap());
    let p = params(d, 2, false, 16);
    let x = randn(&[n, d], &mut ChaCha8Rng::seed_from_u64(17));
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let vars = p.on_tape(&mut tape);
    let out = sparse_attention(&mut tape, xv, &vars, &plan).unwrap();
    for i in 0..n {
        for c in 0..d {
            let mut seed = Tensor::zeros(&[n, d]);
            seed.row_mut(i)[c] = 1.0;
            let g = tape.backward_with_seed(out, seed).unwrap();
            let gx = g.get(xv).unwrap();
            for j in i + 1..n {
                assert!(
                    gx.row(j).iter().all(|&v| v == 0.0),
                    "output {i} depends on {j}"
                );
            }
        }
    }
}

#[test]
fn logits_are_dot_over_root_head_width() {
    let pat = FactorizedPattern::full(6).unwrap();
    let layout = compile_block_layout(&pat, HeadSelect::Head(0), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let q = randn(&[6, 4], &mut rng);
    let k = randn(&[6, 4], &mut rng);
    let got = kernel::head_logits(&layout, &q, &k, 1, 0, 0);
    let mut idx = 0;
    layout.for_each_pair(|i, j| {
        let raw: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
        assert!((got[idx] - raw / 2.0).abs() <= 1e-15);
        idx += 1;
    });
    // doubling the width by repeating columns doubles the raw dot but the
    // logits only grow by √2
    let dup = |t: &Tensor<f64>| Tensor::from_fn(&[6, 8], |k| t.at(k / 8, k % 8 % 4));
    let wide = kernel::head_logits(&layout, &dup(&q), &dup(&k), 1, 0, 0);
    for (a, b) in got.iter().zip(&wide) {
        assert!((b - a * 2f64.sqrt()).abs() <= 1e-12);
    }
}

#[test]
fn identity_output_projection_is_a_no_op() {
    let pat = FactorizedPattern::fixed(32, 8, 2).unwrap();
    let plan = Arc::new(AttentionPlan::uniform(&pat, HeadSelect::Merged, 2, 8).unwrap());
    let mut p = params(8, 2, false, 19);
    p.wp = Tensor::eye(8);
    let x = randn(&[32, 8], &mut ChaCha8Rng::seed_from_u64(20));
    let (out, _) = sparse_attention_forward(&x, &p, &plan).unwrap();
    let q = matmul(&x, &p.wq).unwrap();
    let k = matmul(&x, &p.wk).unwrap();
    let v = matmul(&x, &p.wv).unwrap();
    let raw = sparse_attend(&q, &k, &v, &plan, false).unwrap().out;
    assert_eq!(out, raw);
}

#[test]
fn head_strategy_assignment() {
    let heads: Vec<HeadSelect> = (0..4)
        .map(|r| apply_head_strategy(r, HeadStrategy::Interleaved, 2, 1)[0])
        .collect();
    assert_eq!(
        heads,
        vec![
            HeadSelect::Head(0),
            HeadSelect::Head(1),
            HeadSelect::Head(0),
            HeadSelect::Head(1)
        ]
    );
    for r in 0..3 {
        assert_eq!(
            apply_head_strategy(r, HeadStrategy::Merged, 2, 2),
            vec![HeadSelect::Merged; 2]
        );
    }
    let pat = FactorizedPattern::strided(36, 6).unwrap();
    assert_eq!(
        pat.allowed_sets(HeadSelect::Merged),
        merge_heads(&pat).allowed_sets(HeadSelect::Head(0))
    );
    let multi = apply_head_strategy(0, HeadStrategy::Multihead, 2, 8);
    assert_eq!(&multi[..4], &[HeadSelect::Head(0); 4]);
    assert_eq!(&multi[4..], &[HeadSelect::Head(1); 4]);
}

#[test]
fn planner_cycles_through_heads() {
    let pat = FactorizedPattern::strided(36, 6).unwrap();
    let planner = AttentionPlanner::new(&pat, HeadStrategy::Interleaved, 2, 4, false).unwrap();
    assert_eq!(planner.layer(0).heads()[0].select, HeadSelect::Head(0));
    assert_eq!(planner.layer(1).heads()[0].select, HeadSelect::Head(1));
    assert!(Arc::ptr_eq(planner.layer(0), planner.layer(2)));
}

#[test]
fn parameter_count_is_independent_of_heads() {
    let count = |n_h| {
        let p = AttentionParams::<f64>::zeros(HeadShape::new(16, n_h, false).unwrap());
        p.wq.len() + p.wk.len() + p.wv.len() + p.wp.len()
    };
    assert_eq!(count(1), count(2));
    assert_eq!(count(1), count(4));
    assert!(HeadShape::new(10, 4, false).is_err());
}

#[test]
fn dense_reference_rejects_long_sequences() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::zeros(&[8, 2]));
    let allowed = Arc::new(
        FactorizedPattern::full(8)
            .unwrap()
            .allowed_sets(HeadSelect::Head(0)),
    );
    assert!(attend_dense(&mut tape, q, q, q, 1, &[allowed], 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sparse_equals_dense(n in 2usize..40, l in 1usize..8, c in 1usize..4, kind in 0usize..3, heads in 0usize..3, seed in 0u64..1000) {
        let l = l.min(n);
        let pat = match kind {
            0 => FactorizedPattern::strided(n, l).unwrap(),
            1 => FactorizedPattern::fixed(n, l, c.min(l)).unwrap(),
            _ => FactorizedPattern::full(n).unwrap(),
        };
        let n_h = [1, 2, 4][heads];
        let plan = Arc::new(AttentionPlan::uniform(&pat, HeadSelect::Merged, n_h, 4).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[n, 8], &mut rng);
        let w = randn(&[n, 8], &mut rng);
        let p = params(8, n_h, false, seed + 1);
        let allowed = plan.allowed_sets();
        let s = run(&x, &p, &w, |t, x, v| sparse_attention(t, x, v, &plan));
        let d = run(&x, &p, &w, |t, x, v| dense_attention(t, x, v, &allowed));
        prop_assert!(s.out.max_abs_diff(&d.out) <= 1e-10);
        for (a, b) in s.grads.iter().zip(&d.grads) {
            prop_assert!(a.max_abs_diff(b) <= 1e-10);
        }
    }
}

#[test]
fn tape_free_dense_matches_kernel() {
    let pat = FactorizedPattern::strided(48, 6).unwrap();
    let p = params(16, 4, false, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = randn(&[48, 16], &mut rng);
    let plan = AttentionPlan::uniform(&pat, HeadSelect::Merged, 4, 8).unwrap();
    let (sparse, sc) = sparse_attention_forward(&x, &p, &plan).unwrap();
    let (dense, dc) =
        dense_attention_forward(&x, &p, &|i, j| pat.union_contains(i, j), usize::MAX).unwrap();
    assert!(sparse.max_abs_diff(&dense) <= 1e-10);
    assert_eq!((dc.pairs, dc.upper_pairs), (sc.pairs, 0));
    assert_eq!(dc.macs, 4 * 48 * 48 * 8);
    assert!(dense_attention_forward(&x, &p, &|i, j| j <= i, 48 * 48 * 8 - 1).is_err());
}
