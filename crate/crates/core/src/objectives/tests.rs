use super::*;
use crate::momentum::NegativeQueue;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(rows, cols, 1.0, &mut seed::rng(seed)).l2_normalize_rows(0.0)
}

fn basis(rows: &[usize], dim: usize) -> Tensor {
    let mut t = Tensor::zeros(rows.len(), dim);
    for (r, &i) in rows.iter().enumerate() {
        t.set(r, i, 1.0);
    }
    t
}

fn queue_of(kind: QueueKind, rows: &Tensor) -> NegativeQueue {
    let mut q = NegativeQueue::new(kind, rows.rows().max(1), rows.cols()).unwrap();
    if rows.rows() > 0 {
        q.enqueue(rows).unwrap();
    }
    q
}

#[test]
fn infonce_without_negatives_is_zero() {
    let a = unit_rows(3, 4, 1);
    let b = ContrastiveBatch { anchors: a.clone(), positives: unit_rows(3, 4, 2), queue_negatives: Tensor::zeros(0, 4), tau: 0.07 };
    assert!(infonce(&b).unwrap().abs() < 1e-12);
}

#[test]
fn infonce_uniform_logits() {
    // every similarity is zero: anchors on axis 0, everything else orthogonal
    let anchors = basis(&[0, 0], 8);
    let positives = basis(&[1, 2], 8);
    let negatives = basis(&[3, 4, 5], 8);
    let b = ContrastiveBatch { anchors, positives, queue_negatives: negatives, tau: 0.07 };
    assert!((infonce(&b).unwrap() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn infonce_matches_naive_reference() {
    let b = ContrastiveBatch {
        anchors: unit_rows(4, 8, 10),
        positives: unit_rows(4, 8, 11),
        queue_negatives: unit_rows(8, 8, 12),
        tau: 0.5,
    };
    let naive = infonce_reference(&b.anchors, &b.positives, &b.queue_negatives, b.tau);
    assert!((infonce(&b).unwrap() - naive).abs() < 1e-9);
}

#[test]
fn infonce_literal_form_drops_the_positive() {
    let b = ContrastiveBatch {
        anchors: unit_rows(3, 5, 1),
        positives: unit_rows(3, 5, 2),
        queue_negatives: unit_rows(4, 5, 3),
        tau: 0.3,
    };
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut want = 0.0;
    for i in 0..3 {
        let sp = dot(b.anchors.row(i), b.positives.row(i)) / b.tau;
        let neg: f64 = (0..4).map(|k| (dot(b.anchors.row(i), b.queue_negatives.row(k)) / b.tau).exp()).sum();
        want += neg.ln() - sp;
    }
    want /= 3.0;
    assert!((infonce_with(&b, false).unwrap() - want).abs() < 1e-9);
    let empty = ContrastiveBatch { queue_negatives: Tensor::zeros(0, 5), ..b };
    assert!(infonce_with(&empty, false).is_err());
}

#[test]
fn infonce_rejects_bad_input() {
    let ok = ContrastiveBatch { anchors: unit_rows(2, 3, 1), positives: unit_rows(2, 3, 2), queue_negatives: unit_rows(2, 3, 3), tau: 0.1 };
    assert!(matches!(infonce(&ContrastiveBatch { tau: 0.0, ..ok.clone() }), Err(TclError::Config(_))));
    assert!(matches!(infonce(&ContrastiveBatch { tau: -1.0, ..ok.clone() }), Err(TclError::Config(_))));
    let empty = ContrastiveBatch { anchors: Tensor::zeros(0, 3), positives: Tensor::zeros(0, 3), ..ok.clone() };
    assert!(matches!(infonce(&empty), Err(TclError::Contract(_))));
    let mut bad = ok.clone();
    bad.anchors.set(0, 0, 5.0);
    assert!(matches!(infonce(&bad), Err(TclError::Contract(_))));
}

#[test]
fn cma_closed_form() {
    let (b, k, d) = (4, 1024, 1100);
    // anchors and positives share axes 0..4; queue negatives use the other axes
    let aligned = basis(&(0..b).collect::<Vec<_>>(), d);
    let negatives = basis(&(b..b + k).collect::<Vec<_>>(), d);
    let tq = queue_of(QueueKind::Text, &negatives);
    let iq = queue_of(QueueKind::Image, &negatives);
    let tau = 0.07;
    let t = GlobalTensors { image: &aligned, text: &aligned, image_m: &aligned, text_m: &aligned };
    let got = cma_loss(&t, &tq, &iq, tau).unwrap();
    let e = (1.0 / tau).exp();
    let want = -(e / (e + k as f64)).ln();
    assert!((got - want).abs() < 1e-12);
    // ln(1 + K e^{-1/tau}) is about 6.4e-4 here, not below 1e-6
    assert!((got - (1.0 + k as f64 * (-1.0 / tau).exp()).ln()).abs() < 1e-12);
    assert!(got < 1e-3);
    let imc = imc_loss(&t, &tq, &iq, tau).unwrap();
    assert!((imc - want).abs() < 1e-12);
}

#[test]
fn cma_rejects_swapped_queues() {
    let x = unit_rows(2, 4, 1);
    let q = unit_rows(3, 4, 2);
    let tq = queue_of(QueueKind::Text, &q);
    let iq = queue_of(QueueKind::Image, &q);
    let t = GlobalTensors { image: &x, text: &x, image_m: &x, text_m: &x };
    assert!(matches!(cma_loss(&t, &iq, &tq, 0.1), Err(TclError::Contract(_))));
    assert!(matches!(imc_loss(&t, &iq, &tq, 0.1), Err(TclError::Contract(_))));
}

#[test]
fn cma_is_symmetric_in_modalities() {
    let (i1, t, i2, tm) = (unit_rows(3, 6, 1), unit_rows(3, 6, 2), unit_rows(3, 6, 3), unit_rows(3, 6, 4));
    let qt = unit_rows(5, 6, 5);
    let qi = unit_rows(5, 6, 6);
    let a = cma_loss(
        &GlobalTensors { image: &i1, text: &t, image_m: &i2, text_m: &tm },
        &queue_of(QueueKind::Text, &qt),
        &queue_of(QueueKind::Image, &qi),
        0.2,
    )
    .unwrap();
    // swap the roles of the two modalities and of the two queues
    let b = cma_loss(
        &GlobalTensors { image: &t, text: &i1, image_m: &tm, text_m: &i2 },
        &queue_of(QueueKind::Text, &qi),
        &queue_of(QueueKind::Image, &qt),
        0.2,
    )
    .unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn shared_view_cma_is_two_single_direction_terms() {
    // with I1 = I2 the image branch is the same vector on both sides
    let (img, txt) = (unit_rows(4, 6, 1), unit_rows(4, 6, 2));
    let (qt, qi) = (unit_rows(7, 6, 3), unit_rows(7, 6, 4));
    let got = cma_loss(
        &GlobalTensors { image: &img, text: &txt, image_m: &img, text_m: &txt },
        &queue_of(QueueKind::Text, &qt),
        &queue_of(QueueKind::Image, &qi),
        0.1,
    )
    .unwrap();
    let want = 0.5 * (infonce_reference(&img, &txt, &qt, 0.1) + infonce_reference(&txt, &img, &qi, 0.1));
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn imc_queue_order_does_not_matter() {
    let (i1, t, i2, tm) = (unit_rows(3, 6, 1), unit_rows(3, 6, 2), unit_rows(3, 6, 3), unit_rows(3, 6, 4));
    let qt = unit_rows(9, 6, 5);
    let qi = unit_rows(9, 6, 6);
    let g = GlobalTensors { image: &i1, text: &t, image_m: &i2, text_m: &tm };
    let base = imc_loss(&g, &queue_of(QueueKind::Text, &qt), &queue_of(QueueKind::Image, &qi), 0.1).unwrap();
    let mut order: Vec<usize> = (0..9).collect();
    order.shuffle(&mut seed::rng(3));
    let qt2 = qt.gather_rows(&order);
    let qi2 = qi.gather_rows(&order);
    let perm = imc_loss(&g, &queue_of(QueueKind::Text, &qt2), &queue_of(QueueKind::Image, &qi2), 0.1).unwrap();
    assert!((base - perm).abs() < 1e-12);
}

#[test]
fn pooling_shapes() {
    let x = unit_rows(2 * 256, 3, 1);
    assert_eq!(pool_patches(&x, 2, 16).unwrap().rows(), 32);
    let y = unit_rows(64, 3, 2);
    assert_eq!(pool_patches(&y, 1, 64).unwrap(), y);
    let c = Tensor::filled(64, 5, 0.25);
    let pooled = pool_patches(&c, 1, 16).unwrap();
    assert!(pooled.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    assert!(matches!(pool_patches(&unit_rows(60, 3, 1), 1, 4), Err(TclError::Config(_))));
    assert!(matches!(pool_patches(&y, 1, 9), Err(TclError::Config(_))));
    assert!(matches!(pool_patches(&y, 1, 5), Err(TclError::Config(_))));
}

#[test]
fn pooling_averages_blocks() {
    // 4x4 grid, value = grid index
    let x = Tensor::from_vec(16, 1, (0..16).map(|v| v as f64).collect());
    let p = pool_patches(&x, 1, 4).unwrap();
    // top-left block holds 0, 1, 4, 5
    assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn lmi_single_sample_is_zero() {
    let a = unit_rows(1, 4, 1);
    let loc = unit_rows(16, 4, 2);
    let txt = unit_rows(5, 4, 3);
    let l = lmi_loss(
        &a,
        &LocalSet { vectors: &loc, per_sample: 16, valid: None },
        &a,
        &LocalSet { vectors: &txt, per_sample: 5, valid: None },
        0.1,
    )
    .unwrap();
    assert!(l.abs() < 1e-12);
}

#[test]
fn lmi_closed_form_two_samples() {
    let m = 16;
    // sample s: cls on axis s, all its locals on axis s as well
    let anchors = basis(&[0, 1], 4);
    let rows: Vec<usize> = (0..2 * m).map(|r| r / m).collect();
    let locals = basis(&rows, 4);
    let set = LocalSet { vectors: &locals, per_sample: m, valid: None };
    let got = lmi_loss(&anchors, &set, &anchors, &set, 1.0).unwrap();
    let e = 1f64.exp();
    let per_local = -(e / (e + m as f64)).ln();
    assert!((got - per_local).abs() < 1e-12);
}

#[test]
fn lmi_text_counts_only_valid_tokens() {
    let per = 15;
    let valid: Vec<bool> = (0..2 * per).map(|r| r % per < 2).collect();
    let anchors = unit_rows(2, 6, 1);
    let locals = unit_rows(2 * per, 6, 2);
    let set = LocalSet { vectors: &locals, per_sample: per, valid: Some(&valid) };
    let groups = lmi_groups(2, &set, 1.0);
    assert_eq!(groups[0].positives, vec![0, 1]);
    assert_eq!(groups[0].negatives, vec![15, 16]);
    assert!((groups[0].weight - 1.0 / 4.0).abs() < 1e-15);

    // same value as building the compacted valid-only set directly
    let idx: Vec<usize> = (0..2 * per).filter(|&r| valid[r]).collect();
    let compact = locals.gather_rows(&idx);
    let dense = LocalSet { vectors: &compact, per_sample: 2, valid: None };
    let img = unit_rows(2 * 4, 6, 3);
    let iset = LocalSet { vectors: &img, per_sample: 4, valid: None };
    let a = lmi_loss(&anchors, &iset, &anchors, &set, 0.2).unwrap();
    let b = lmi_loss(&anchors, &iset, &anchors, &dense, 0.2).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn lmi_matches_per_local_oracle() {
    let (b, m, n, d, tau) = (3, 4, 3, 5, 0.3);
    let ia = unit_rows(b, d, 1);
    let ta = unit_rows(b, d, 2);
    let il = unit_rows(b * m, d, 3);
    let tl = unit_rows(b * n, d, 4);
    let got = lmi_loss(
        &ia,
        &LocalSet { vectors: &il, per_sample: m, valid: None },
        &ta,
        &LocalSet { vectors: &tl, per_sample: n, valid: None },
        tau,
    )
    .unwrap();
    let side = |a: &Tensor, l: &Tensor, per: usize| {
        let mut acc = 0.0;
        for i in 0..b {
            let pos = l.gather_rows(&(i * per..(i + 1) * per).collect::<Vec<_>>());
            let neg = l.gather_rows(&(0..b * per).filter(|r| r / per != i).collect::<Vec<_>>());
            let mut s = 0.0;
            for j in 0..per {
                s += infonce_reference(&a.gather_rows(&[i]), &pos.gather_rows(&[j]), &neg, tau);
            }
            acc += s / per as f64;
        }
        acc / b as f64
    };
    let want = 0.5 * (side(&ia, &il, m) + side(&ta, &tl, n));
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn itm_closed_forms() {
    let perfect = Tensor::from_rows(&[vec![-40.0, 40.0], vec![40.0, -40.0], vec![40.0, -40.0]]);
    assert!(itm_loss(&perfect, &[ITM_MATCH, ITM_MISMATCH, ITM_MISMATCH]).unwrap() < 1e-12);
    let uniform = Tensor::zeros(6, 2);
    let l = itm_loss(&uniform, &[1, 1, 0, 0, 0, 0]).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-12);
    assert!(itm_loss(&Tensor::zeros(2, 3), &[0, 1]).is_err());
}

#[test]
fn itm_sampler_never_picks_the_match() {
    let sim = {
        let mut s = unit_rows(6, 4, 9).matmul_t(&unit_rows(6, 4, 10));
        for i in 0..6 {
            s.set(i, i, 1.0);
        }
        s
    };
    for mode in [ItmSampling::Hard, ItmSampling::Uniform] {
        let mut draws = 0;
        for k in 0..(100_000 / 12) as u64 + 1 {
            let neg = sample_itm_negatives(&sim, 0.07, mode, k).unwrap().unwrap();
            for i in 0..6 {
                assert_ne!(neg.text_for_image[i], i);
                assert_ne!(neg.image_for_text[i], i);
            }
            draws += 12;
        }
        assert!(draws >= 100_000);
    }
}

#[test]
fn hard_sampler_follows_similarity() {
    // row 0: text 1 far more similar than text 2
    let sim = Tensor::from_rows(&[vec![1.0, 0.9, -0.9], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let mut hits = 0;
    let n = 4000;
    for k in 0..n {
        let neg = sample_itm_negatives(&sim, 0.1, ItmSampling::Hard, k).unwrap().unwrap();
        hits += (neg.text_for_image[0] == 1) as usize;
    }
    // p = 1 / (1 + e^{-18})
    assert!(hits as f64 / n as f64 > 0.99);
    let mut hits = 0;
    for k in 0..n {
        let neg = sample_itm_negatives(&sim, 0.1, ItmSampling::Uniform, k).unwrap().unwrap();
        hits += (neg.text_for_image[0] == 1) as usize;
    }
    assert!((hits as f64 / n as f64 - 0.5).abs() < 0.05);
    assert!(sample_itm_negatives(&Tensor::zeros(1, 1), 0.1, ItmSampling::Hard, 0).unwrap().is_none());
}

#[test]
fn mlm_closed_forms() {
    let mut logits = Tensor::zeros(3, 40);
    let labels = [4, 17, 39];
    for (r, &l) in labels.iter().enumerate() {
        logits.set(r, l, 20.0);
    }
    // margin 20 over 39 rivals: ln(1 + 39 e^-20)
    assert!(mlm_loss(&logits, &labels).unwrap() <= 1e-6);
    let uniform = Tensor::zeros(5, 40);
    assert!((mlm_loss(&uniform, &[0, 1, 2, 3, 4]).unwrap() - 40f64.ln()).abs() < 1e-12);
    assert_eq!(mlm_loss(&Tensor::zeros(0, 40), &[]).unwrap(), 0.0);
    assert!(matches!(mlm_loss(&uniform, &[0, 1, 2, 3, 40]), Err(TclError::Contract(_))));
}

#[test]
fn total_loss_gating() {
    let ones = LossTerms { cma: 1.0, imc: 1.0, lmi: 1.0, itm: 1.0, mlm: 1.0 };
    assert_eq!(total_loss(ones, LossGates::ALL).unwrap().total, 5.0);
    let t = LossTerms { cma: 0.5, imc: 0.25, lmi: 0.125, itm: 2.0, mlm: 4.0 };
    let r = total_loss(t, LossGates::BASELINE).unwrap();
    assert_eq!(r.total, 0.5 + 2.0 + 4.0);
    assert_eq!((r.imc, r.lmi), (0.0, 0.0));
    let only = LossGates { mlm: true, ..LossGates::NONE };
    assert_eq!(total_loss(t, only).unwrap().total, 4.0);
    let r = total_loss(t, LossGates::ALL).unwrap();
    assert_eq!(r.total, r.cma + r.imc + r.lmi + r.itm + r.mlm);
    let nan = LossTerms { lmi: f64::NAN, ..t };
    assert!(matches!(total_loss(nan, LossGates::ALL), Err(TclError::Numerical(_))));
    assert!(total_loss(nan, LossGates::BASELINE).is_ok());
}

fn random_rotation(d: usize, seed: u64) -> Tensor {
    // Gram-Schmidt on a Gaussian matrix
    let a = Tensor::randn(d, d, 1.0, &mut seed::rng(seed));
    let mut q: Vec<Vec<f64>> = Vec::new();
    for r in 0..d {
        let mut v = a.row(r).to_vec();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.iter().map(|x| x / n).collect());
    }
    Tensor::from_rows(&q)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn infonce_bounds(seed in any::<u64>(), b in 1usize..6, k in 0usize..12, tau in 0.05f64..2.0) {
        let batch = ContrastiveBatch {
            anchors: unit_rows(b, 6, seed),
            positives: unit_rows(b, 6, seed ^ 1),
            queue_negatives: unit_rows(k, 6, seed ^ 2),
            tau,
        };
        let l = infonce(&batch).unwrap();
        prop_assert!(l >= 0.0);
        // each logit lies in [-1/tau, 1/tau]
        prop_assert!(l <= ((k + 1) as f64).ln() + 2.0 / tau + 1e-9);
    }

    #[test]
    fn global_terms_are_rotation_and_batch_order_invariant(seed in any::<u64>()) {
        let d = 5;
        let mk = |s: u64, n: usize| unit_rows(n, d, seed.wrapping_add(s));
        let (i1, t, i2, tm, qt, qi) = (mk(1, 4), mk(2, 4), mk(3, 4), mk(4, 4), mk(5, 7), mk(6, 7));
        let tau = 0.2;
        let eval = |i1: &Tensor, t: &Tensor, i2: &Tensor, tm: &Tensor, qt: &Tensor, qi: &Tensor| {
            let g = GlobalTensors { image: i1, text: t, image_m: i2, text_m: tm };
            let (q1, q2) = (queue_of(QueueKind::Text, qt), queue_of(QueueKind::Image, qi));
            (cma_loss(&g, &q1, &q2, tau).unwrap(), imc_loss(&g, &q1, &q2, tau).unwrap())
        };
        let base = eval(&i1, &t, &i2, &tm, &qt, &qi);
        let r = random_rotation(d, seed ^ 99);
        let rot = |x: &Tensor| x.matmul(&r);
        let turned = eval(&rot(&i1), &rot(&t), &rot(&i2), &rot(&tm), &rot(&qt), &rot(&qi));
        prop_assert!((base.0 - turned.0).abs() < 1e-9);
        prop_assert!((base.1 - turned.1).abs() < 1e-9);
        let order = [2usize, 0, 3, 1];
        let p = |x: &Tensor| x.gather_rows(&order);
        let shuffled = eval(&p(&i1), &p(&t), &p(&i2), &p(&tm), &qt, &qi);
        prop_assert!((base.0 - shuffled.0).abs() < 1e-9);
        prop_assert!((base.1 - shuffled.1).abs() < 1e-9);
    }

    #[test]
    fn lmi_is_batch_order_invariant(seed in any::<u64>()) {
        let (b, m, n, d) = (3, 4, 5, 6);
        let ia = unit_rows(b, d, seed);
        let ta = unit_rows(b, d, seed ^ 1);
        let il = unit_rows(b * m, d, seed ^ 2);
        let tl = unit_rows(b * n, d, seed ^ 3);
        let valid: Vec<bool> = (0..b * n).map(|r| r % n <= (r / n) + 1).collect();
        let eval = |ia: &Tensor, ta: &Tensor, il: &Tensor, tl: &Tensor, valid: &[bool]| {
            lmi_loss(
                ia,
                &LocalSet { vectors: il, per_sample: m, valid: None },
                ta,
                &LocalSet { vectors: tl, per_sample: n, valid: Some(valid) },
                0.3,
            )
            .unwrap()
        };
        let base = eval(&ia, &ta, &il, &tl, &valid);
        let order = [2usize, 0, 1];
        let expand = |per: usize| order.iter().flat_map(|&s| s * per..(s + 1) * per).collect::<Vec<_>>();
        let vperm: Vec<bool> = expand(n).iter().map(|&r| valid[r]).collect();
        let perm = eval(&ia.gather_rows(&order), &ta.gather_rows(&order), &il.gather_rows(&expand(m)), &tl.gather_rows(&expand(n)), &vperm);
        prop_assert!((base - perm).abs() < 1e-9);
    }
}
