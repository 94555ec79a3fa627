//! Independent oracles: nalgebra for linear algebra, central finite
//! differences for gradients, a scalar reference for AdamW.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ara::autodiff::Tape;
use ara::factorization::whiten_and_decompose;
use ara::linalg::{cholesky_adaptive, lower_triangular_inverse, svd};
use ara::mask::MaskParams;
use ara::optim::{AdamWConfig, AdamWState, Param};
use ara::zoo::{Batch, LinearWeights, Model};
use ara::Matrix;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

fn max_diff(a: &Matrix, b: &DMatrix<f64>) -> f64 {
    (to_na(a) - b).abs().max()
}

#[test]
fn matmul_agrees_with_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (m, k, n) = (rng.gen_range(1..40), rng.gen_range(1..40), rng.gen_range(1..40));
        let a = Matrix::randn(m, k, 1.0, &mut rng);
        let b = Matrix::randn(k, n, 1.0, &mut rng);
        let c = Matrix::randn(n, k, 1.0, &mut rng);
        assert!(max_diff(&a.matmul(&b).unwrap(), &(to_na(&a) * to_na(&b))) < 1e-12);
        assert!(max_diff(&a.matmul_nt(&c).unwrap(), &(to_na(&a) * to_na(&c).transpose())) < 1e-12);
        assert!(max_diff(&b.matmul_tn(&b).unwrap(), &(to_na(&b).transpose() * to_na(&b))) < 1e-12);
    }
}

#[test]
fn singular_values_agree_with_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..30 {
        let (m, n) = (rng.gen_range(1..48), rng.gen_range(1..48));
        let a = Matrix::randn(m, n, 1.0, &mut rng);
        let ours = svd(&a).unwrap();
        let mut theirs: Vec<f64> = to_na(&a).singular_values().iter().copied().collect();
        theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert_eq!(ours.sigma.len(), m.min(n));
        for (s, t) in ours.sigma.iter().zip(&theirs) {
            assert!((s - t).abs() <= 1e-10 * theirs[0].max(1.0), "{s} vs {t}");
        }
        let rebuilt = ours.u.scale_cols(&ours.sigma).matmul_nt(&ours.v).unwrap();
        assert!(max_diff(&rebuilt, &to_na(&a)) < 1e-10);
    }
}

#[test]
fn cholesky_and_inverse_agree_with_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.gen_range(1..40);
        let x = Matrix::randn(n, n + 10, 1.0, &mut rng);
        let h = x.matmul_nt(&x).unwrap();
        let (s, damping) = cholesky_adaptive(&h, 1e-6).unwrap();
        assert_eq!(damping, 0.0);
        let reference = to_na(&h).cholesky().unwrap().l();
        assert!(max_diff(&s, &reference) < 1e-9);
        let inv = lower_triangular_inverse(&s).unwrap();
        assert!(max_diff(&inv, &reference.try_inverse().unwrap()) < 1e-6);
    }
}

#[test]
fn whitened_truncation_error_matches_tail_of_projected_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (m, n) = (rng.gen_range(2..30), rng.gen_range(2..30));
        let w = Matrix::randn(m, n, 1.0, &mut rng);
        let x = Matrix::randn(n, 2 * n + 3, 1.0, &mut rng);
        let f = whiten_and_decompose(&w, &x).unwrap();
        let wx = to_na(&w) * to_na(&x);
        let mut sv: Vec<f64> = wx.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for r in 0..=f.rank_capacity() {
            let tail = sv[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
            let ours = f.truncation_loss(r).unwrap();
            assert!((ours - tail).abs() <= 1e-8 * sv[0], "r={r}: {ours} vs {tail}");
        }
    }
}

#[test]
fn model_loss_gradient_matches_finite_differences() {
    let mut model = Model::build(6, 2, 11, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let wu = Matrix::randn(6, 3, 0.5, &mut rng);
    let wv = Matrix::randn(3, 12, 0.5, &mut rng);
    model.layers[2].weights = LinearWeights::LowRank { wu, wv };
    let windows: Vec<Vec<usize>> = (0..3).map(|_| (0..7).map(|_| rng.gen_range(0..11)).collect()).collect();
    let batch = Batch::from_windows(&windows, model.config.context);

    let loss_with = |m: &Model| -> f64 {
        let mut t = Tape::new();
        let logits = m.forward(&mut t, &batch).unwrap();
        let l = t.cross_entropy(logits, &batch.targets).unwrap();
        t.scalar_value(l)
    };

    for layer in [0usize, 4] {
        let w0 = model.layers[layer].dense().unwrap().clone();
        let mut tape = Tape::new();
        let backbone = model.backbone_constants(&mut tape);
        let wvar = tape.leaf(w0.clone());
        let logits = model
            .forward_with(&mut tape, &backbone, &batch, &mut |t, i, x| {
                if i == layer {
                    t.matmul_nt(x, wvar)
                } else {
                    model.layers[i].apply(t, x)
                }
            })
            .unwrap();
        let loss = tape.cross_entropy(logits, &batch.targets).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(wvar).unwrap().clone();

        let h = 1e-6;
        for idx in [0, 5, w0.len() - 1] {
            let mut plus = model.clone();
            let mut minus = model.clone();
            for (m, d) in [(&mut plus, h), (&mut minus, -h)] {
                if let LinearWeights::Dense(w) = &mut m.layers[layer].weights {
                    w.as_mut_slice()[idx] += d;
                }
            }
            let fd = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
            assert!((fd - grad.as_slice()[idx]).abs() < 1e-7, "layer {layer} idx {idx}: {fd} vs {}", grad.as_slice()[idx]);
        }
    }
}

#[test]
fn mask_ratio_gradient_matches_finite_differences() {
    let (mut mp, _) = MaskParams::new(5, 12, 20).unwrap();
    mp.theta = vec![0.3, -1.0, 0.7, 0.0, 1.2];
    let mut tape = Tape::new();
    let th = tape.leaf(Matrix::row_vector(&mp.theta));
    let g = mp.record(&mut tape, th).unwrap();
    tape.backward(g.ratio).unwrap();
    let grad = tape.grad(th).unwrap().as_slice().to_vec();
    let h = 1e-6;
    for (k, g) in grad.iter().enumerate() {
        let mut plus = mp.clone();
        let mut minus = mp.clone();
        plus.theta[k] += h;
        minus.theta[k] -= h;
        let fd = (plus.ratio() - minus.ratio()) / (2.0 * h);
        assert!((fd - g).abs() < 1e-8);
    }
}

#[test]
fn adamw_matches_scalar_reference() {
    let cfg = AdamWConfig {
        lr: 0.01,
        beta1: 0.8,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: 0.1,
    };
    let grads = [0.5, -1.5, 2.0, 0.25];
    let mut params = vec![Param::new(Matrix::scalar(1.0))];
    let mut opt = AdamWState::new(cfg, &params);
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (t, g) in grads.iter().enumerate() {
        params[0].grad = Some(Matrix::scalar(*g));
        opt.step(&mut params).unwrap();
        x -= cfg.lr * cfg.weight_decay * x;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t as i32 + 1));
        let vh = v / (1.0 - cfg.beta2.powi(t as i32 + 1));
        x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        assert!((params[0].value.item() - x).abs() < 1e-15);
    }
}
