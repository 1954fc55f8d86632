//! Attention wirings against dense loop-based oracles.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tunnel_core::nn::{
    attention, env_cross_attention, ref_attention, temporal_attention, AttentionWeights, FeatureClip, Tensor,
};

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn affine(x: &Mat, w: &Tensor, b: &Option<Tensor>) -> Mat {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| {
            (0..cout)
                .map(|j| {
                    let dot: f64 = (0..cin).map(|i| r[i] * w.data()[i * cout + j]).sum();
                    dot + b.as_ref().map_or(0.0, |b| b.data()[j])
                })
                .collect()
        })
        .collect()
}

/// Textbook single-head attention with explicit loops.
fn dense_attention(q: &Mat, k: &Mat, v: &Mat, w: &AttentionWeights) -> Mat {
    let qp = affine(q, &w.wq, &w.bq);
    let kp = affine(k, &w.wk, &w.bk);
    let vp = affine(v, &w.wv, &w.bv);
    let d = qp[0].len() as f64;
    let mixed: Mat = qp
        .iter()
        .map(|qi| {
            let logits: Vec<f64> = kp
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..vp[0].len())
                .map(|c| e.iter().zip(&vp).map(|(ej, vj)| ej / z * vj[c]).sum())
                .collect()
        })
        .collect();
    affine(&mixed, &w.wo, &w.bo)
}

fn biased(c: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
    let mut w = AttentionWeights::random(c, rng);
    for b in [&mut w.bq, &mut w.bk, &mut w.bv, &mut w.bo] {
        *b = Some(Tensor::randn(&[c], 0.3, rng));
    }
    w
}

fn max_diff(a: &Mat, b: &[f64]) -> f64 {
    a.iter().flatten().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn plain_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, n, c) in [(1, 1, 3), (4, 7, 5), (6, 2, 8)] {
        let w = biased(c, &mut rng);
        let q = Tensor::randn(&[m, c], 1.0, &mut rng);
        let k = Tensor::randn(&[n, c], 1.0, &mut rng);
        let v = Tensor::randn(&[n, c], 1.0, &mut rng);
        let got = attention(&q, &k, &v, &w).unwrap();
        let want = dense_attention(&rows(&q), &rows(&k), &rows(&v), &w);
        assert!(max_diff(&want, got.data()) < 1e-9);
    }
}

#[test]
fn ref_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (f, n, c, nr) = (3, 5, 6, 4);
    let w = biased(c, &mut rng);
    let x = Tensor::randn(&[f, n, c], 1.0, &mut rng);
    let reference = Tensor::randn(&[nr, c], 1.0, &mut rng);
    let got = ref_attention(&FeatureClip::new(x.clone()).unwrap(), &reference, &w).unwrap();
    let xr = rows(&x);
    let rr = rows(&reference);
    let mut want = Mat::new();
    for i in 0..f {
        let frame = xr[i * n..(i + 1) * n].to_vec();
        let kv: Mat = frame.iter().chain(&rr).cloned().collect();
        want.extend(dense_attention(&frame, &kv, &kv, &w));
    }
    assert!(max_diff(&want, got.tensor().data()) < 1e-9);
}

#[test]
fn empty_reference_is_self_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (f, n, c) = (2, 6, 4);
    let w = biased(c, &mut rng);
    let x = Tensor::randn(&[f, n, c], 1.0, &mut rng);
    let empty = Tensor::new_allow_empty(vec![0, c], vec![]).unwrap();
    let got = ref_attention(&FeatureClip::new(x.clone()).unwrap(), &empty, &w).unwrap();
    let x_flat = x.reshape(&[f * n, c]).unwrap();
    for i in 0..f {
        let frame = x_flat.slice_rows(i * n, n).unwrap();
        let selfatt = attention(&frame, &frame, &frame, &w).unwrap();
        let got_i = &got.tensor().data()[i * n * c..(i + 1) * n * c];
        let d = selfatt.data().iter().zip(got_i).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-9);
    }
}

#[test]
fn temporal_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (f, n, c) = (4, 3, 5);
    let w = biased(c, &mut rng);
    let x = Tensor::randn(&[f, n, c], 1.0, &mut rng);
    let embs = Tensor::randn(&[f, c], 0.5, &mut rng);
    let got = temporal_attention(&FeatureClip::new(x.clone()).unwrap(), &embs, &w).unwrap();
    for j in 0..n {
        let seq: Mat = (0..f)
            .map(|i| (0..c).map(|ch| x.at(&[i, j, ch]) + embs.at(&[i, ch])).collect())
            .collect();
        let out = dense_attention(&seq, &seq, &seq, &w);
        for i in 0..f {
            for ch in 0..c {
                let want = x.at(&[i, j, ch]) + out[i][ch];
                assert!((got.tensor().at(&[i, j, ch]) - want).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn env_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (f, n, c, ne) = (3, 4, 6, 5);
    let w = biased(c, &mut rng);
    let x = Tensor::randn(&[f, n, c], 1.0, &mut rng);
    let clip = FeatureClip::new(x.clone()).unwrap();
    let xr = rows(&x);

    let shared = Tensor::randn(&[ne, c], 1.0, &mut rng);
    let got = env_cross_attention(&clip, &shared, &w).unwrap();
    let out = dense_attention(&xr, &rows(&shared), &rows(&shared), &w);
    let want: Mat = xr.iter().zip(&out).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    assert!(max_diff(&want, got.tensor().data()) < 1e-9);

    let per_frame = Tensor::randn(&[f, ne, c], 1.0, &mut rng);
    let got = env_cross_attention(&clip, &per_frame, &w).unwrap();
    let er = rows(&per_frame);
    let mut want = Mat::new();
    for i in 0..f {
        let frame = xr[i * n..(i + 1) * n].to_vec();
        let env = er[i * ne..(i + 1) * ne].to_vec();
        let out = dense_attention(&frame, &env, &env, &w);
        want.extend(frame.iter().zip(&out).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()));
    }
    assert!(max_diff(&want, got.tensor().data()) < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reference_order_does_not_matter(seed in 0u64..1_000, nr in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, n, c) = (2, 3, 4);
        let w = biased(c, &mut rng);
        let x = FeatureClip::new(Tensor::randn(&[f, n, c], 1.0, &mut rng)).unwrap();
        let reference = Tensor::randn(&[nr, c], 1.0, &mut rng);
        let mut order: Vec<usize> = (0..nr).collect();
        order.shuffle(&mut rng);
        let shuffled = Tensor::new(
            vec![nr, c],
            order.iter().flat_map(|&r| reference.data()[r * c..(r + 1) * c].to_vec()).collect(),
        ).unwrap();
        let a = ref_attention(&x, &reference, &w).unwrap();
        let b = ref_attention(&x, &shuffled, &w).unwrap();
        prop_assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-9);
    }

    #[test]
    fn temporal_attention_commutes_with_token_permutation(seed in 0u64..1_000, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, c) = (3, 4);
        let w = biased(c, &mut rng);
        let x = Tensor::randn(&[f, n, c], 1.0, &mut rng);
        let embs = Tensor::randn(&[f, c], 0.5, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &Tensor| Tensor::from_fn(&[f, n, c], |idx| {
            let (i, j, ch) = (idx / (n * c), (idx / c) % n, idx % c);
            t.at(&[i, perm[j], ch])
        });
        let out = temporal_attention(&FeatureClip::new(x.clone()).unwrap(), &embs, &w).unwrap();
        let out_perm = temporal_attention(&FeatureClip::new(permute(&x)).unwrap(), &embs, &w).unwrap();
        // each token's sequence is computed by the same ops, so equality is exact
        prop_assert_eq!(permute(out.tensor()), out_perm.tensor().clone());
    }
}
