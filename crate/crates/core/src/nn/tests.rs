use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{finite_difference_grad, relative_error, Tape, Tensor};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn zero_all(store: &mut ParamStore, prefix: &str) {
    let names: Vec<String> = store.names().iter().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        let len = store.by_name(&n).unwrap().numel();
        store.assign(&n, vec![0.0; len]).unwrap();
    }
}

/// Plain-loop layer norm used as an independent reference.
fn reference_layer_norm(x: &Tensor) -> Tensor {
    let d = x.shape()[1];
    let mut out = x.clone();
    for r in 0..x.shape()[0] {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for i in 0..d {
            out.set(&[r, i], (row[i] - mean) / (var + LAYER_NORM_EPS).sqrt());
        }
    }
    out
}

#[test]
fn linear_identity_and_hand_case() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut ParamBuilder::new(&mut store, &mut r), "lin", 3, 3);
    store.assign("lin.weight", Tensor::eye(3).into_data()).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, 1.0]]).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = lin.forward(&p, tape.constant(&x)).unwrap().value();
    assert_eq!(y, x);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut ParamBuilder::new(&mut store, &mut r), "lin", 2, 1);
    store.assign("lin.weight", vec![1.0, 1.0]).unwrap();
    store.assign("lin.bias", vec![1.0]).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(&Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap());
    assert_eq!(lin.forward(&p, x).unwrap().value().data(), &[6.0]);
}

#[test]
fn linear_weight_gradient_matches_finite_differences() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut ParamBuilder::new(&mut store, &mut r), "lin", 3, 2);
    let x = random(&mut r, &[4, 3]);
    let loss_for = |w: &Tensor| {
        let mut s = store.clone();
        s.assign("lin.weight", w.data().to_vec()).unwrap();
        let tape = Tape::new();
        let p = s.bind(&tape);
        let y = lin.forward(&p, tape.constant(&x)).unwrap();
        y.mul(y).unwrap().sum().item()
    };
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = lin.forward(&p, tape.constant(&x)).unwrap();
    let grads = tape.backward(y.mul(y).unwrap().sum()).unwrap();
    let analytic = grads.tensor(p.get(lin.weight));
    let numeric = finite_difference_grad(loss_for, store.get(lin.weight), 1e-6);
    assert!(relative_error(analytic.data(), numeric.data()) < 1e-6);
}

#[test]
fn attention_over_single_key_is_trivial() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut r), "mha", 4, 2).unwrap();
    let q = random(&mut r, &[3, 4]);
    let kv = random(&mut r, &[1, 4]);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (out, attn) = mha.forward(&p, tape.constant(&q), tape.constant(&kv), None, None).unwrap();
    assert_eq!(attn.shape(), &[2, 3, 1]);
    assert!(attn.data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
    let projected = mha.output.forward(&p, mha.value.forward(&p, tape.constant(&kv)).unwrap()).unwrap();
    let out = out.value();
    for row in 0..3 {
        for (a, b) in out.row(row).iter().zip(projected.value().row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_with_zero_projections_outputs_bias() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut r), "mha", 4, 2).unwrap();
    zero_all(&mut store, "mha.");
    store.assign("mha.output.bias", vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(&random(&mut r, &[5, 4]));
    let (out, _) = mha.forward(&p, x, x, None, None).unwrap();
    let out = out.value();
    for row in 0..5 {
        assert_eq!(out.row(row), &[0.5, -1.0, 2.0, 0.0]);
    }
}

#[test]
fn single_head_identity_attention_matches_hand_softmax() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut r), "mha", 2, 1).unwrap();
    for name in ["query", "key", "value", "output"] {
        store.assign(&format!("mha.{name}.weight"), Tensor::eye(2).into_data()).unwrap();
    }
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0]]).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let xv = tape.constant(&x);
    let (_, attn) = mha.forward(&p, xv, xv, None, None).unwrap();
    // scores q·kᵀ/√2: row0 = [1, 0.5]/√2, row1 = [0.5, 4.25]/√2
    let s = 2f64.sqrt();
    for (row, scores) in [[1.0 / s, 0.5 / s], [0.5 / s, 4.25 / s]].iter().enumerate() {
        let z = scores[0].exp() + scores[1].exp();
        assert!((attn.get(&[0, row, 0]) - scores[0].exp() / z).abs() < 1e-15);
        assert!((attn.get(&[0, row, 1]) - scores[1].exp() / z).abs() < 1e-15);
    }
}

#[test]
fn attention_rows_sum_to_one_and_zero_pos_is_inert() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut r), "mha", 8, 4).unwrap();
    let q = random(&mut r, &[5, 8]);
    let kv = random(&mut r, &[7, 8]);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (qv, kvv) = (tape.constant(&q), tape.constant(&kv));
    let (out_plain, attn) = mha.forward(&p, qv, kvv, None, None).unwrap();
    for h in 0..4 {
        for i in 0..5 {
            let s: f64 = (0..7).map(|j| attn.get(&[h, i, j])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let zq = tape.constant(&Tensor::zeros(&[5, 8]));
    let zk = tape.constant(&Tensor::zeros(&[7, 8]));
    let (out_zero, attn_zero) = mha.forward(&p, qv, kvv, Some(zq), Some(zk)).unwrap();
    assert_eq!(out_plain.value(), out_zero.value());
    assert_eq!(attn, attn_zero);

    let kp = tape.constant(&random(&mut r, &[7, 8]));
    let (_, attn_pos) = mha.forward(&p, qv, kvv, None, Some(kp)).unwrap();
    assert!(attn.max_abs_diff(&attn_pos) > 1e-6);
    let wrong = tape.constant(&Tensor::zeros(&[6, 8]));
    assert!(mha.forward(&p, qv, kvv, None, Some(wrong)).is_err());
}

#[test]
fn heads_must_divide_dim() {
    let mut r = rng();
    let mut store = ParamStore::new();
    assert!(MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut r), "mha", 6, 4).is_err());
}

#[test]
fn encoder_layer_preserves_shape_and_has_identity_ablation() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut ParamBuilder::new(&mut store, &mut r), "enc", 8, 2, 16).unwrap();
    for &l in &[1, 3, 9] {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(&random(&mut r, &[l, 8]));
        let pos = tape.constant(&random(&mut r, &[l, 8]));
        assert_eq!(layer.forward(&p, x, pos).unwrap().shape(), vec![l, 8]);
    }
    zero_all(&mut store, "enc.ffn.");
    zero_all(&mut store, "enc.self_attn.output.");
    let x = random(&mut r, &[4, 8]);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let pos = tape.constant(&random(&mut r, &[4, 8]));
    let y = layer.forward(&p, tape.constant(&x), pos).unwrap().value();
    let want = reference_layer_norm(&reference_layer_norm(&x));
    assert!(y.max_abs_diff(&want) < 1e-12);
}

#[test]
fn encoder_layer_every_parameter_gets_gradient() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut ParamBuilder::new(&mut store, &mut r), "enc", 8, 2, 16).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(&random(&mut r, &[5, 8]));
    let pos = tape.constant(&random(&mut r, &[5, 8]));
    let weights = tape.constant(&random(&mut r, &[5, 8]));
    let loss = layer.forward(&p, x, pos).unwrap().mul(weights).unwrap().sum();
    let grads = p.gradients(&tape.backward(loss).unwrap());
    for ((name, _), g) in store.iter().zip(&grads) {
        assert!(g.data().iter().any(|v| v.abs() > 1e-12), "{name} received no gradient");
    }
}

#[test]
fn decoder_layer_shapes_and_trivial_cross_attention() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let layer = DecoderLayer::new(&mut ParamBuilder::new(&mut store, &mut r), "dec", 8, 2, 16).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let c = |shape: &[usize], r: &mut ChaCha8Rng| tape.constant(&random(r, shape));
    let (q, qp, m, mp) = (c(&[1, 8], &mut r), c(&[1, 8], &mut r), c(&[1, 8], &mut r), c(&[1, 8], &mut r));
    let (out, attn) = layer.forward(&p, q, m, qp, mp).unwrap();
    assert_eq!(out.shape(), vec![1, 8]);
    assert_eq!(attn.shape(), &[2, 1, 1]);
    assert!(attn.data().iter().all(|&w| (w - 1.0).abs() < 1e-15));

    let (q, qp, m, mp) = (c(&[6, 8], &mut r), c(&[6, 8], &mut r), c(&[11, 8], &mut r), c(&[11, 8], &mut r));
    let (out, attn) = layer.forward(&p, q, m, qp, mp).unwrap();
    assert_eq!(out.shape(), vec![6, 8]);
    assert_eq!(attn.shape(), &[2, 6, 11]);
}

#[test]
fn decoder_layer_is_invariant_to_memory_permutation() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let layer = DecoderLayer::new(&mut ParamBuilder::new(&mut store, &mut r), "dec", 8, 2, 16).unwrap();
    let q = random(&mut r, &[3, 8]);
    let qp = random(&mut r, &[3, 8]);
    let mem = random(&mut r, &[4, 8]);
    let mem_pos = random(&mut r, &[4, 8]);
    let perms = [[0, 1, 2, 3], [3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]];
    let run = |perm: &[usize; 4]| {
        let permute = |t: &Tensor| {
            Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (out, _) = layer
            .forward(
                &p,
                tape.constant(&q),
                tape.constant(&permute(&mem)),
                tape.constant(&qp),
                tape.constant(&permute(&mem_pos)),
            )
            .unwrap();
        out.value()
    };
    let base = run(&perms[0]);
    for perm in &perms[1..] {
        assert!(run(perm).max_abs_diff(&base) < 1e-9);
    }
}

#[test]
fn conv_identity_box_sum_and_stride() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, &mut r);
    let one = Conv2d::new(&mut pb, "one", 3, 3, 1, 1);
    let three = Conv2d::new(&mut pb, "three", 1, 1, 3, 1);
    let strided = Conv2d::new(&mut pb, "strided", 2, 5, 3, 2);
    store.assign("one.weight", Tensor::eye(3).into_data()).unwrap();
    store.assign("three.weight", vec![1.0; 9]).unwrap();

    let x = random(&mut r, &[3, 4, 5]);
    let tape = Tape::new();
    let p = store.bind(&tape);
    assert_eq!(one.forward(&p, tape.constant(&x)).unwrap().value(), x);

    let mut img = Tensor::zeros(&[1, 3, 3]);
    img.set(&[0, 1, 1], 1.0);
    let out = three.forward(&p, tape.constant(&img)).unwrap().value();
    // brute-force zero-padded box sums
    for oy in 0..3i64 {
        for ox in 0..3i64 {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (y, x) = (oy + dy, ox + dx);
                    if (0..3).contains(&y) && (0..3).contains(&x) {
                        s += img.get(&[0, y as usize, x as usize]);
                    }
                }
            }
            assert_eq!(out.get(&[0, oy as usize, ox as usize]), s);
        }
    }

    let y = strided.forward(&p, tape.constant(&Tensor::zeros(&[2, 8, 8]))).unwrap();
    assert_eq!(y.shape(), vec![5, 4, 4]);
    assert!(strided.forward(&p, tape.constant(&Tensor::zeros(&[3, 8, 8]))).is_err());
}

#[test]
fn conv1x1_token_layout_matches_map_layout() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut ParamBuilder::new(&mut store, &mut r), "c", 4, 2, 1, 1);
    let map = random(&mut r, &[4, 2, 3]);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let mv = tape.constant(&map);
    let via_map = conv.forward(&p, mv).unwrap().reshape(&[2, 6]).unwrap().transpose().unwrap();
    let tokens = mv.reshape(&[4, 6]).unwrap().transpose().unwrap();
    let via_tokens = conv.forward_tokens(&p, tokens).unwrap();
    assert!(via_map.value().max_abs_diff(&via_tokens.value()) < 1e-12);
}

#[test]
fn embedding_lookup_and_scatter() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut ParamBuilder::new(&mut store, &mut r), "emb", 3, 2);
    let table = store.get(emb.table).clone();
    let tape = Tape::new();
    let p = store.bind(&tape);
    assert_eq!(emb.lookup(&p, &[0]).unwrap().value().data(), table.row(0));
    let rep = emb.lookup(&p, &[1, 1]).unwrap();
    assert_eq!(rep.value().row(0), table.row(1));
    assert_eq!(rep.value().row(1), table.row(1));
    let g = tape.backward(rep.sum()).unwrap().tensor(p.get(emb.table));
    assert_eq!(g.data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    assert!(matches!(emb.lookup(&p, &[3]), Err(crate::Error::Index { index: 3, len: 3 })));

    let idx = [2, 0, 2];
    let w = random(&mut r, &[3, 2]);
    let f = |t: &Tensor| {
        let tape = Tape::new();
        let rows = tape.constant(t).gather_rows(&idx).unwrap();
        rows.mul(tape.constant(&w)).unwrap().sum().item()
    };
    let tape = Tape::new();
    let tv = tape.param(&table);
    let loss = tv.gather_rows(&idx).unwrap().mul(tape.constant(&w)).unwrap().sum();
    let analytic = tape.backward(loss).unwrap().tensor(tv);
    let numeric = finite_difference_grad(f, &table, 1e-6);
    assert!(relative_error(analytic.data(), numeric.data()) < 1e-6);
}

#[test]
fn count_parameters_of_linear() {
    let mut r = rng();
    let mut store = ParamStore::new();
    Linear::new(&mut ParamBuilder::new(&mut store, &mut r), "lin", 4, 2);
    assert_eq!(store.count_parameters(), 10);
}

#[test]
fn initialization_scheme() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, &mut r);
    let lin = Linear::new(&mut pb, "lin", 16, 8);
    let emb = Embedding::new(&mut pb, "emb", 50, 40);
    let s = (1.0f64 / 16.0).sqrt();
    assert!(store.get(lin.weight).data().iter().all(|v| v.abs() <= s));
    assert!(store.get(lin.bias.unwrap()).data().iter().all(|&v| v == 0.0));
    let t = store.get(emb.table).data();
    let std = (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
    assert!((std - 0.02).abs() < 0.003, "{std}");
}
