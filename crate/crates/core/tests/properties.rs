//! Property tests for invariants that span several modules.

use ndarray::Array2;
use proptest::prelude::*;

use vqg_core::corpus::{Batch, QAExample, TokenBatch, BOS, EOS};
use vqg_core::model::encoders::encode_answer;
use vqg_core::model::generator::mle_loss;
use vqg_core::model::latent::{kl_between, kl_vars, GaussVars, GaussianParams};
use vqg_core::model::{Dims, Model};
use vqg_core::objective::{build_loss_graph, LossWeights, Noise, Term, VariantName};
use vqg_core::tape::Tape;
use vqg_core::world::{check_relevance, generate_records, render_features, sample_scene, WorldConfig};
use vqg_core::Exec;

fn gaussian(dim: usize) -> impl Strategy<Value = GaussianParams> {
    (
        proptest::collection::vec(-3.0..3.0f64, dim),
        proptest::collection::vec(-2.0..2.0f64, dim),
    )
        .prop_map(|(mu, ls)| GaussianParams::new(mu, ls).unwrap())
}

fn small_dims() -> Dims {
    Dims {
        hidden: 6,
        latent: 4,
        features: 5,
        vocab: 10,
        categories: 3,
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

fn kl_on_tape(p: &GaussianParams, q: &GaussianParams) -> (f64, Vec<Array2<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<_> = [&p.mu, &p.log_sigma, &q.mu, &q.log_sigma]
        .iter()
        .enumerate()
        .map(|(k, v)| tape.param(k, &row(v)))
        .collect();
    let pv = GaussVars {
        mu: vars[0],
        log_sigma: vars[1],
    };
    let qv = GaussVars {
        mu: vars[2],
        log_sigma: vars[3],
    };
    let kl = kl_vars(&mut tape, pv, qv);
    let g = tape.backward(kl);
    (tape.scalar(kl), (0..4).map(|k| g.param(k).unwrap().clone()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_identity(p in gaussian(6), q in gaussian(6)) {
        prop_assert!(kl_between(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_between(&p, &p).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn kl_gradient_matches_central_differences(p in gaussian(3), q in gaussian(3)) {
        let (value, grads) = kl_on_tape(&p, &q);
        prop_assert!((value - kl_between(&p, &q).unwrap()).abs() < 1e-9);
        let h = 1e-4;
        for (slot, grad) in grads.iter().enumerate() {
            for k in 0..3 {
                let bump = |delta: f64| {
                    let (mut a, mut b) = (p.clone(), q.clone());
                    match slot {
                        0 => a.mu[k] += delta,
                        1 => a.log_sigma[k] += delta,
                        2 => b.mu[k] += delta,
                        _ => b.log_sigma[k] += delta,
                    }
                    kl_between(&a, &b).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = grad[[0, k]];
                let scale = an.abs().max(fd.abs()).max(1e-6);
                prop_assert!((an - fd).abs() / scale < 1e-3, "slot {slot} dim {k}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn generated_records_pass_the_oracle(seed in any::<u64>()) {
        let config = WorldConfig::default();
        for r in generate_records(12, &config, seed, "p", Exec::Sequential).unwrap() {
            let q: Vec<String> = r.question.split_whitespace().map(str::to_string).collect();
            let v = check_relevance(&q, &r.scene);
            prop_assert!(v.answerable);
            prop_assert_eq!(v.matched_category, r.category.clone());
            prop_assert_eq!(v.oracle_answer, r.answer.clone());
        }
    }

    #[test]
    fn sampling_is_a_function_of_the_seed(seed in any::<u64>()) {
        let config = WorldConfig::default();
        let a = generate_records(8, &config, seed, "p", Exec::Sequential).unwrap();
        let b = generate_records(8, &config, seed, "p", Exec::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn noiseless_features_separate_distinct_concepts(s1 in any::<u64>(), s2 in any::<u64>()) {
        let config = WorldConfig { feature_noise_std: 0.0, ..WorldConfig::default() };
        let (a, b) = (sample_scene(&config, s1).unwrap(), sample_scene(&config, s2).unwrap());
        let concepts = |s: &vqg_core::world::Scene| {
            let mut set: Vec<String> = s
                .objects
                .iter()
                .flat_map(|o| [o.kind.clone(), o.color.clone(), o.material.clone(), o.attribute.clone()])
                .collect();
            set.sort();
            set.dedup();
            (set, s.objects.iter().map(|o| o.count).max())
        };
        let (fa, fb) = (render_features(&a, &config, 1).unwrap(), render_features(&b, &config, 2).unwrap());
        prop_assert_eq!(fa == fb, concepts(&a) == concepts(&b));
    }

    #[test]
    fn batch_padding_never_changes_likelihood_or_answer_code(
        tokens in proptest::collection::vec(4usize..10, 1..6),
        pads in 1usize..4,
        seed in 0u64..50,
    ) {
        let model = Model::new(small_dims(), VariantName::Ours, seed);
        let mut q = vec![BOS];
        q.extend(&tokens);
        q.push(EOS);
        let z = vec![0.3, -0.2, 0.1, 0.5];
        let tight = TokenBatch::from_sequences([q.as_slice()]);
        let wide = TokenBatch::padded_to(vec![q.as_slice()], q.len() + pads);
        prop_assert_eq!(wide.width(), q.len() + pads);

        let mut tape = Tape::new();
        let zv = tape.constant(row(&z));
        let short = mle_loss(&mut tape, &model, zv, &tight);
        let long = mle_loss(&mut tape, &model, zv, &wide);
        let a_short = encode_answer(&mut tape, &model, &tight);
        let a_long = encode_answer(&mut tape, &model, &wide);
        prop_assert_eq!(tape.value(a_short), tape.value(a_long));
        prop_assert_eq!(tape.scalar(short), tape.scalar(long));
    }

    #[test]
    fn decoding_is_pure_and_distributions_normalize(
        z in proptest::collection::vec(-2.0..2.0f64, 4),
        prefix in proptest::collection::vec(4usize..10, 0..4),
        seed in 0u64..50,
    ) {
        let model = Model::new(small_dims(), VariantName::Ours, seed);
        prop_assert_eq!(model.decode_greedy(&z, 8).unwrap(), model.decode_greedy(&z, 8).unwrap());
        let mut fed = vec![BOS];
        fed.extend(&prefix);
        let dist = model.next_token_distribution(&z, &fed).unwrap();
        prop_assert_eq!(model.next_token_distribution(&z, &[]).is_err(), true);
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inactive_terms_are_exactly_zero(seed in 0u64..1000, k in 0usize..8) {
        let variant = VariantName::ALL[k];
        let model = Model::new(small_dims(), variant, seed);
        let ex = QAExample {
            features: vec![0.5, -0.1, 0.0, 1.0, 0.2],
            question: vec![BOS, 4, 5, EOS],
            answer: Some(vec![BOS, 6, EOS]),
            category: Some(1),
        };
        let batch = Batch::from_examples(&[&ex, &ex], 3);
        let mut tape = Tape::new();
        let g = build_loss_graph(&mut tape, &model, &batch, &LossWeights::default(), Noise::Sample(seed)).unwrap();
        let losses = g.breakdown(&tape);
        for term in Term::ALL {
            if !variant.flags().is_active(term) {
                prop_assert_eq!(losses.get(term), 0.0, "{} {:?}", variant, term);
            }
        }
        prop_assert!(losses.first_non_finite().is_none());
    }

    #[test]
    fn encoders_stay_finite(
        features in proptest::collection::vec(-50.0..50.0f64, 5),
        answer in proptest::collection::vec(4usize..10, 1..5),
        seed in 0u64..50,
    ) {
        let model = Model::new(small_dims(), VariantName::Ours, seed);
        let mut ids = vec![BOS];
        ids.extend(answer);
        ids.push(EOS);
        let codes = [
            model.encode_image_vec(&features).unwrap(),
            model.encode_answer_ids(&ids).unwrap(),
            model.encode_category_one_hot(&[0.0, 1.0, 0.0]).unwrap(),
        ];
        prop_assert!(codes.iter().flatten().all(|x| x.is_finite()));
    }
}
