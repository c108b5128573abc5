use super::*;
use crate::gradcheck::{check, FD_STEP};
use crate::rng::stream;

// ── independent plain-loop reference ─────────────────────────────────
// Deliberately naive: explicit index arithmetic, no tape, no shared code
// with the implementation under test.

#[allow(clippy::too_many_arguments)]
fn oracle_cross_attend(
    q: &[f64],
    t: &[f64],
    validity: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    n: usize,
    nt: usize,
    c: usize,
    heads: usize,
) -> Vec<f64> {
    let d = c / heads;
    let proj = |x: &[f64], w: &[f64], rows: usize| -> Vec<f64> {
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += x[r * c + i] * w[i * c + j];
                }
                out[r * c + j] = acc;
            }
        }
        out
    };
    let qp = proj(q, wq, n);
    let kp = proj(t, wk, nt);
    let vp = proj(t, wv, nt);

    let mut merged = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            // attention logits over valid keys
            let mut logits = vec![f64::NEG_INFINITY; nt];
            for j in 0..nt {
                if validity[j] == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for e in 0..d {
                    dot += qp[i * c + h * d + e] * kp[j * c + h * d + e];
                }
                logits[j] = dot / (d as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..nt {
                let w = exps[j] / z;
                for e in 0..d {
                    merged[i * c + h * d + e] += w * vp[j * c + h * d + e];
                }
            }
        }
    }
    proj(&merged, wo, n)
}

fn oracle_layernorm(x: &[f64], gamma: &[f64], beta: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(c).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..c {
            out[r * c + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ── fixtures ─────────────────────────────────────────────────────────

fn params(c: usize, h: usize, seed: u64) -> FgcaParams {
    FgcaParams::init(c, h, &mut stream(seed, "fgca"))
}

fn rand_t(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut stream(seed, tag))
}

fn all_valid(b: usize, nt: usize) -> Tensor {
    Tensor::full(vec![b, nt], 1.0)
}

// ── cross_attend ─────────────────────────────────────────────────────

#[test]
fn single_valid_key_gives_identical_output_for_all_queries() {
    let (c, h, n, nt) = (8, 2, 3, 4);
    let p = params(c, h, 1);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape);
    let q = tape.constant(rand_t(&[1, n, c], 1, "q"));
    let t = tape.constant(rand_t(&[1, nt, c], 1, "t"));
    let mut vdata = vec![0.0; nt];
    vdata[2] = 1.0;
    let validity = Tensor::new(vec![1, nt], vdata).unwrap();
    let (out, attn) = cross_attend(&mut tape, q, t, &validity, &pv.cat, h).unwrap();
    // softmax over a single element: weight 1 on token 2, every query alike
    let o = tape.value(out).data();
    for i in 1..n {
        for j in 0..c {
            assert!((o[i * c + j] - o[j]).abs() < 1e-12);
        }
    }
    let a = tape.value(attn).data();
    for head in 0..h {
        for i in 0..n {
            assert!((a[(head * n + i) * nt + 2] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn duplicated_key_token_matches_single_key() {
    let (c, h, n) = (8, 2, 2);
    let p = params(c, h, 2);
    let tok = rand_t(&[1, 1, c], 2, "tok");
    let q = rand_t(&[1, n, c], 2, "q");

    let run = |t: Tensor, nt: usize| {
        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let qv = tape.constant(q.clone());
        let tv = tape.constant(t);
        let (out, _) = cross_attend(&mut tape, qv, tv, &all_valid(1, nt), &pv.cat, h).unwrap();
        tape.value(out).clone()
    };

    let single = run(tok.clone(), 1);
    let mut twice = tok.data().to_vec();
    twice.extend_from_slice(tok.data());
    let doubled = run(Tensor::new(vec![1, 2, c], twice).unwrap(), 2);
    for (a, b) in single.data().iter().zip(doubled.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_attend_matches_loop_oracle() {
    let (c, h, n, nt) = (8, 2, 2, 2);
    let p = params(c, h, 3);
    let q = rand_t(&[1, n, c], 3, "q");
    let t = rand_t(&[1, nt, c], 3, "t");
    let validity = all_valid(1, nt);

    let mut tape = Tape::new();
    let pv = p.register(&mut tape);
    let qv = tape.constant(q.clone());
    let tv = tape.constant(t.clone());
    let (out, _) = cross_attend(&mut tape, qv, tv, &validity, &pv.cat, h).unwrap();

    let want = oracle_cross_attend(
        q.data(),
        t.data(),
        validity.data(),
        p.cat.wq.data(),
        p.cat.wk.data(),
        p.cat.wv.data(),
        p.cat.wo.data(),
        n,
        nt,
        c,
        h,
    );
    for (a, b) in tape.value(out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn cross_attend_rejects_fully_masked_rows() {
    let (c, h) = (8, 2);
    let p = params(c, h, 4);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape);
    let q = tape.constant(rand_t(&[1, 2, c], 4, "q"));
    let t = tape.constant(rand_t(&[1, 3, c], 4, "t"));
    let validity = Tensor::zeros(vec![1, 3]);
    assert!(matches!(
        cross_attend(&mut tape, q, t, &validity, &pv.cat, h),
        Err(TensorError::DegenerateInput { .. })
    ));
}

// ── attribute_gate ───────────────────────────────────────────────────

#[test]
fn zero_gate_projection_gives_half_everywhere() {
    let (c, h) = (8, 2);
    let mut p = params(c, h, 5);
    p.gate_w.data_mut().fill(0.0);
    p.gate_b.data_mut().fill(0.0);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape);
    let q = tape.constant(rand_t(&[1, 3, c], 5, "q"));
    let t = tape.constant(rand_t(&[1, 2, c], 5, "t"));
    let (gate, _) = attribute_gate(&mut tape, q, t, &all_valid(1, 2), &pv).unwrap();
    for &v in tape.value(gate).data() {
        assert!((v - 0.5).abs() < 1e-15);
    }
}

#[test]
fn gate_values_stay_strictly_inside_unit_interval() {
    let (c, h) = (8, 2);
    let p = params(c, h, 6);
    let mut tape = Tape::new();
    let pv = p.register(&mut tape);
    let q = tape.constant(rand_t(&[2, 4, c], 6, "q"));
    let t = tape.constant(rand_t(&[2, 3, c], 6, "t"));
    let (gate, _) = attribute_gate(&mut tape, q, t, &all_valid(2, 3), &pv).unwrap();
    let d = tape.value(gate).data();
    let (min, max) = d.iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    assert!(min > 0.0 && max < 1.0);
}

#[test]
fn attribute_gate_matches_loop_oracle() {
    let (c, h, n, nt) = (8, 2, 2, 2);
    let p = params(c, h, 7);
    let q = rand_t(&[1, n, c], 7, "q");
    let t = rand_t(&[1, nt, c], 7, "t");
    let validity = all_valid(1, nt);

    let mut tape = Tape::new();
    let pv = p.register(&mut tape);
    let qv = tape.constant(q.clone());
    let tv = tape.constant(t.clone());
    let (gate, _) = attribute_gate(&mut tape, qv, tv, &validity, &pv).unwrap();

    let ca = oracle_cross_attend(
        q.data(),
        t.data(),
        validity.data(),
        p.attr.wq.data(),
        p.attr.wk.data(),
        p.attr.wv.data(),
        p.attr.wo.data(),
        n,
        nt,
        c,
        h,
    );
    let normed = oracle_layernorm(&ca, p.attr.ln_gamma.data(), p.attr.ln_beta.data(), c);
    for i in 0..n {
        for j in 0..c {
            let mut pre = p.gate_b.data()[j];
            for e in 0..c {
                pre += normed[i * c + e] * p.gate_w.data()[e * c + j];
            }
            let got = tape.value(gate).data()[i * c + j];
            assert!((got - sigmoid(pre)).abs() < 1e-10);
        }
    }
}

// ── neutralize ───────────────────────────────────────────────────────

#[test]
fn neutralize_masks_per_batch_row() {
    let mut tape = Tape::new();
    let gate = tape.constant(rand_t(&[2, 2, 3], 8, "g"));
    let orig = tape.value(gate).clone();
    let out = neutralize(&mut tape, gate, &[1.0, 0.0]).unwrap();
    let v = tape.value(out).data();
    // row 0 untouched, row 1 exactly one
    for i in 0..6 {
        assert_eq!(v[i].to_bits(), orig.data()[i].to_bits());
        assert_eq!(v[6 + i], 1.0);
    }
}

// ── compose ──────────────────────────────────────────────────────────

struct Fixture {
    p: FgcaParams,
    q: Tensor,
    t_c: Tensor,
    t_attrs: Vec<Tensor>,
    cat_validity: Tensor,
    attr_validity: Vec<Tensor>,
}

fn fixture(b: usize, n: usize, k: usize, c: usize, h: usize, seed: u64) -> Fixture {
    let nt = 3;
    Fixture {
        p: params(c, h, seed),
        q: rand_t(&[b, n, c], seed, "q"),
        t_c: rand_t(&[b, nt, c], seed, "tc"),
        t_attrs: (0..k).map(|i| rand_t(&[b, nt, c], seed, &format!("ta{i}"))).collect(),
        cat_validity: all_valid(b, nt),
        attr_validity: (0..k).map(|_| all_valid(b, nt)).collect(),
    }
}

fn run_compose(fx: &Fixture, presence: &[Vec<u8>], mode: GateMode, alpha: f64) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let pv = fx.p.register(&mut tape);
    let q = tape.constant(fx.q.clone());
    let t_c = tape.constant(fx.t_c.clone());
    let t_attrs: Vec<Var> = fx.t_attrs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = compose(
        &mut tape,
        q,
        t_c,
        &t_attrs,
        &fx.cat_validity,
        &fx.attr_validity,
        presence,
        &pv,
        mode,
        alpha,
    )
    .unwrap();
    (tape.value(out.f_out).clone(), tape.value(out.q_c).clone())
}

#[test]
fn all_absent_attributes_leave_category_features_bit_identical() {
    let fx = fixture(1, 3, 2, 8, 2, 9);
    let (f_out, q_c) = run_compose(&fx, &[vec![0, 0]], GateMode::Gated, 1.0);
    for (a, b) in f_out.data().iter().zip(q_c.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn forced_half_gate_halves_category_features() {
    let mut fx = fixture(1, 3, 1, 8, 2, 10);
    fx.p.gate_w.data_mut().fill(0.0);
    fx.p.gate_b.data_mut().fill(0.0);
    let (f_out, q_c) = run_compose(&fx, &[vec![1]], GateMode::Gated, 1.0);
    for (a, b) in f_out.data().iter().zip(q_c.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
}

#[test]
fn two_gates_match_independent_composition_order() {
    let fx = fixture(1, 3, 2, 8, 2, 11);
    let mut tape = Tape::new();
    let pv = fx.p.register(&mut tape);
    let q = tape.constant(fx.q.clone());
    let t_c = tape.constant(fx.t_c.clone());
    let t_attrs: Vec<Var> = fx.t_attrs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = compose(
        &mut tape,
        q,
        t_c,
        &t_attrs,
        &fx.cat_validity,
        &fx.attr_validity,
        &[vec![1, 1]],
        &pv,
        GateMode::Gated,
        1.0,
    )
    .unwrap();
    // reassociate: (q_c * g2) * g1 instead of q_c * (g1 * g2)
    let g1 = out.gates[0].unwrap();
    let g2 = out.gates[1].unwrap();
    let qg2 = tape.mul(out.q_c, g2).unwrap();
    let alt = tape.mul(qg2, g1).unwrap();
    for (a, b) in tape.value(out.f_out).data().iter().zip(tape.value(alt).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn appending_absent_attribute_is_bit_neutral() {
    let fx = fixture(1, 3, 2, 8, 2, 12);
    let with_one = run_compose(&fx, &[vec![1, 0]], GateMode::Gated, 1.0).0;

    // same computation with the second group dropped entirely
    let fx1 = Fixture {
        p: fx.p.clone(),
        q: fx.q.clone(),
        t_c: fx.t_c.clone(),
        t_attrs: fx.t_attrs[..1].to_vec(),
        cat_validity: fx.cat_validity.clone(),
        attr_validity: fx.attr_validity[..1].to_vec(),
    };
    let without = run_compose(&fx1, &[vec![1]], GateMode::Gated, 1.0).0;
    for (a, b) in with_one.data().iter().zip(without.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn gate_product_shrinks_magnitudes_monotonically() {
    let fx = fixture(1, 4, 2, 8, 2, 13);
    let one = run_compose(&fx, &[vec![1, 0]], GateMode::Gated, 1.0).0;
    let two = run_compose(&fx, &[vec![1, 1]], GateMode::Gated, 1.0).0;
    for (a, b) in two.data().iter().zip(one.data()) {
        assert!(a.abs() <= b.abs() + 1e-15);
    }
}

#[test]
fn attribute_order_does_not_change_output() {
    let fx = fixture(2, 3, 2, 8, 2, 14);
    let fwd = run_compose(&fx, &[vec![1, 1], vec![1, 1]], GateMode::Gated, 1.0).0;
    let swapped = Fixture {
        p: fx.p.clone(),
        q: fx.q.clone(),
        t_c: fx.t_c.clone(),
        t_attrs: vec![fx.t_attrs[1].clone(), fx.t_attrs[0].clone()],
        cat_validity: fx.cat_validity.clone(),
        attr_validity: vec![fx.attr_validity[1].clone(), fx.attr_validity[0].clone()],
    };
    let rev = run_compose(&swapped, &[vec![1, 1], vec![1, 1]], GateMode::Gated, 1.0).0;
    for (a, b) in fwd.data().iter().zip(rev.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mixed_batch_neutralizes_only_absent_rows() {
    let fx = fixture(2, 3, 1, 8, 2, 15);
    let mixed = run_compose(&fx, &[vec![1], vec![0]], GateMode::Gated, 1.0).0;
    let (_, q_c) = run_compose(&fx, &[vec![0], vec![0]], GateMode::Gated, 1.0);
    let n_c = 3 * 8;
    // row 1 (absent) equals ungated category features there
    for i in 0..n_c {
        assert_eq!(mixed.data()[n_c + i].to_bits(), q_c.data()[n_c + i].to_bits());
    }
    // row 0 (present) differs
    assert!(mixed.data()[..n_c].iter().zip(&q_c.data()[..n_c]).any(|(a, b)| a != b));
}

#[test]
fn alpha_scales_gated_output() {
    let fx = fixture(1, 2, 1, 8, 2, 16);
    let base = run_compose(&fx, &[vec![1]], GateMode::Gated, 1.0).0;
    let scaled = run_compose(&fx, &[vec![1]], GateMode::Gated, 0.5).0;
    for (a, b) in scaled.data().iter().zip(base.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
}

#[test]
fn full_block_gradients_match_finite_differences() {
    // desk shape from the module contract: B=2, N=3, K=2, C=8, h=2
    let fx = fixture(2, 3, 2, 8, 2, 17);
    let presence = vec![vec![1u8, 1], vec![1, 0]];
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    fx.p.visit("fgca", &mut tensors);
    let mut param_vals: Vec<Tensor> = tensors.iter().map(|(_, t)| (*t).clone()).collect();
    param_vals.push(fx.q.clone());

    let report = check(
        |tape, vars| {
            let pv = FgcaVars {
                heads: fx.p.heads,
                dim: fx.p.dim,
                cat: AttnVars {
                    wq: vars[0],
                    wk: vars[1],
                    wv: vars[2],
                    wo: vars[3],
                    ln_gamma: vars[4],
                    ln_beta: vars[5],
                },
                attr: AttnVars {
                    wq: vars[6],
                    wk: vars[7],
                    wv: vars[8],
                    wo: vars[9],
                    ln_gamma: vars[10],
                    ln_beta: vars[11],
                },
                gate_w: vars[12],
                gate_b: vars[13],
            };
            let q = vars[14];
            let t_c = tape.constant(fx.t_c.clone());
            let t_attrs: Vec<Var> = fx.t_attrs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = compose(
                tape,
                q,
                t_c,
                &t_attrs,
                &fx.cat_validity,
                &fx.attr_validity,
                &presence,
                &pv,
                GateMode::Gated,
                1.0,
            )?;
            let sq = tape.mul(out.f_out, out.f_out)?;
            tape.sum(sq)
        },
        &param_vals,
        FD_STEP,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
}
