use guided_crop::fusion::{
    average_logits, clip_logits, gc_logits, predict, top_k, Aggregation, Embedding, LogitVector,
    PromptMode, TextClassBank,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[test]
fn logits_match_brute_force_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1_000 {
        let dim = rng.gen_range(2..96);
        let n = rng.gen_range(2..40);
        let scale = rng.gen_range(1.0..200.0);
        let text: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
        let image = random_unit(&mut rng, dim);
        let bank = TextClassBank::from_class_embeddings(
            (0..n).map(|i| format!("c{i}")).collect(),
            text.iter()
                .map(|t| Embedding::from_unit(t.clone()).unwrap())
                .collect(),
        )
        .unwrap();
        let emb = Embedding::from_unit(image.clone()).unwrap();

        let logits = clip_logits(&bank, &emb, scale).unwrap();
        for (j, t) in text.iter().enumerate() {
            assert!((logits.scores[j] - scale * dot(t, &image)).abs() < 1e-6);
        }

        let k = rng.gen_range(1..=n);
        let topk = top_k(&logits, k).unwrap();
        let refined = gc_logits(&bank, &topk, &emb, scale).unwrap();
        assert_eq!(refined.len(), k);
        for (m, &j) in topk.classes().iter().enumerate() {
            assert!((refined.scores[m] - scale * dot(&text[j], &image)).abs() < 1e-6);
        }
        // brute-force top-k: descending score, lower index first on ties
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            logits.scores[b]
                .total_cmp(&logits.scores[a])
                .then(a.cmp(&b))
        });
        assert_eq!(topk.classes(), &order[..k]);
        assert_eq!(predict(&refined, Some(&topk)), order[0]);
    }
}

#[test]
fn average_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1_000 {
        let len = rng.gen_range(1..30);
        let count = rng.gen_range(1..15);
        let lists: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..len).map(|_| rng.gen_range(-100.0..100.0)).collect())
            .collect();
        let avg = average_logits(
            &lists
                .iter()
                .map(|l| LogitVector::new(l.clone(), 100.0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        for i in 0..len {
            let mut s = 0.0;
            for l in &lists {
                s += l[i];
            }
            assert!((avg.scores[i] - s / count as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn hand_cases() {
    let l = LogitVector::new(vec![0.2, 0.9, 0.4], 1.0);
    assert_eq!(predict(&l, None), 1);
    let tied = LogitVector::new(vec![0.5, 0.5, 0.1], 1.0);
    assert_eq!(predict(&tied, None), 0);
    assert_eq!(top_k(&tied, 2).unwrap().classes(), &[0, 1]);
    assert!(top_k(&tied, 0).is_err());
    assert!(top_k(&tied, 4).is_err());
    assert!(average_logits(&[]).is_err());
}

#[test]
fn single_prompt_aggregations_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let prompts: Vec<Vec<Embedding>> = (0..6)
        .map(|_| vec![Embedding::from_unit(random_unit(&mut rng, 12)).unwrap()])
        .collect();
    let classes: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
    let image = Embedding::from_unit(random_unit(&mut rng, 12)).unwrap();
    let a = TextClassBank::new(
        classes.clone(),
        prompts.clone(),
        PromptMode::Descriptions,
        Aggregation::Logit,
    )
    .unwrap();
    let b = TextClassBank::new(
        classes,
        prompts,
        PromptMode::Descriptions,
        Aggregation::Embedding,
    )
    .unwrap();
    let (la, lb) = (
        clip_logits(&a, &image, 100.0).unwrap(),
        clip_logits(&b, &image, 100.0).unwrap(),
    );
    for (x, y) in la.scores.iter().zip(&lb.scores) {
        assert!((x - y).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(scores in prop::collection::vec(-50.0..50.0f64, 1..40)) {
        let p = LogitVector::new(scores, 100.0).softmax();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn prediction_lies_in_top_k(scores in prop::collection::vec(-50.0..50.0f64, 2..40), k in 1usize..40) {
        let l = LogitVector::new(scores.clone(), 1.0);
        let k = k.min(scores.len());
        let topk = top_k(&l, k).unwrap();
        let crop = LogitVector::new(topk.classes().iter().map(|&j| -scores[j]).collect(), 1.0);
        prop_assert!(topk.contains(predict(&crop, Some(&topk))));
    }
}
