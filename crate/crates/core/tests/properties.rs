use std::collections::HashMap;
use std::rc::Rc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reder::ctc::{
    brute_force_ctc, collapse, ctc_forward_backward, ctc_log_likelihood, for_each_alignment, greedy_path,
    prefix_beam_search, viterbi_alignment,
};
use reder::exec::Eager;
use reder::layer::{layer_regular, layer_reverse, HiddenPair, LayerDims, LayerWeights};
use reder::model::{DuplexModel, ModelConfig};
use reder::ops::Layout;
use reder::Tensor;

const BLANK: usize = 0;

/// Row-normalised log-probabilities from raw logits.
fn log_softmax_rows(frames: usize, vocab: usize, logits: &[f64]) -> Tensor {
    let mut out = Vec::with_capacity(frames * vocab);
    for row in logits.chunks(vocab).take(frames) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - z));
    }
    Tensor::new(vec![frames, vocab], out).unwrap()
}

fn instance() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (1usize..=6, 2usize..=4).prop_flat_map(|(t, v)| {
        (
            prop::collection::vec(-3.0f64..3.0, t * v),
            prop::collection::vec(1..v, 0..=4usize.min(t)),
        )
            .prop_map(move |(logits, y)| (log_softmax_rows(t, v, &logits), y))
    })
}

fn path_score(lp: &Tensor, path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(t, &a)| lp.get(t, a)).sum()
}

fn collapsed_masses(lp: &Tensor) -> HashMap<Vec<usize>, f64> {
    let mut masses: HashMap<Vec<usize>, f64> = HashMap::new();
    for_each_alignment(lp.rows(), lp.cols(), |a| {
        *masses.entry(collapse(a, BLANK)).or_default() += path_score(lp, a).exp();
    });
    masses
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn forward_recursion_matches_enumeration((lp, y) in instance()) {
        let brute = brute_force_ctc(&lp, &y, BLANK).unwrap();
        let fast = ctc_log_likelihood(&lp, &y, BLANK);
        if brute == f64::NEG_INFINITY || brute < -1e20 {
            prop_assert!(fast.is_err() || fast.unwrap() < -1e20);
        } else {
            let fast = fast.unwrap();
            prop_assert!(((fast - brute) / brute.abs().max(1.0)).abs() <= 1e-9, "{fast} vs {brute}");
            let (ll, occ) = ctc_forward_backward(&lp, &y, BLANK).unwrap();
            prop_assert!((ll - fast).abs() <= 1e-12);
            for t in 0..occ.rows() {
                prop_assert!((occ.row(t).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn collapsed_outputs_form_a_distribution((lp, _y) in instance()) {
        let masses = collapsed_masses(&lp);
        let mut total = 0.0;
        for y in masses.keys() {
            total += ctc_log_likelihood(&lp, y, BLANK).unwrap().exp();
        }
        prop_assert!((total - 1.0).abs() <= 1e-9, "{total}");
    }

    #[test]
    fn viterbi_is_the_best_alignment((lp, y) in instance()) {
        let Ok((path, score)) = viterbi_alignment(&lp, &y, BLANK) else {
            prop_assert!(brute_force_ctc(&lp, &y, BLANK).unwrap() < -1e20);
            return Ok(());
        };
        prop_assert_eq!(collapse(&path, BLANK), y.clone());
        prop_assert!((path_score(&lp, &path) - score).abs() <= 1e-12);
        let mut best = f64::NEG_INFINITY;
        for_each_alignment(lp.rows(), lp.cols(), |a| {
            if collapse(a, BLANK) == y {
                best = best.max(path_score(&lp, a));
            }
        });
        prop_assert!((best - score).abs() <= 1e-12);
    }

    #[test]
    fn beams_dominate_greedy_and_exhaustive_dominates_beams((lp, _y) in instance()) {
        let (greedy, greedy_score) = greedy_path(&lp);
        let exhaustive = prefix_beam_search(&lp, lp.cols().pow(lp.rows() as u32), BLANK).unwrap()[0].log_prob;
        for width in 1..=8 {
            let hyps = prefix_beam_search(&lp, width, BLANK).unwrap();
            prop_assert!(hyps.windows(2).all(|h| h[0].log_prob >= h[1].log_prob));
            let top = hyps[0].log_prob;
            prop_assert!(top >= greedy_score - 1e-12, "width {width} below greedy {greedy:?}");
            prop_assert!(exhaustive >= top - 1e-12, "width {width} above exhaustive");
        }
    }

    #[test]
    fn exhaustive_beam_finds_the_most_likely_output((lp, _y) in instance()) {
        let masses = collapsed_masses(&lp);
        let best = masses.values().cloned().fold(0.0, f64::max);
        let width = lp.cols().pow(lp.rows() as u32);
        let hyps = prefix_beam_search(&lp, width, BLANK).unwrap();
        prop_assert!((hyps[0].log_prob.exp() - best).abs() <= 1e-9);
        prop_assert!((masses[&hyps[0].tokens] - best).abs() <= 1e-9);
    }

    #[test]
    fn coupling_forms_invert_each_other(
        seed in any::<u64>(),
        rows in 1usize..=16,
        width in 1usize..=4,
        heads in prop::sample::select(vec![1usize, 2, 4]),
        clip in 1usize..=8,
    ) {
        let d = 8 * width;
        let dims = LayerDims { d_model: d, d_ff: 2 * d, heads, rel_clip: clip };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = LayerWeights::init(&dims, &mut rng);
        let h = HiddenPair {
            h1: Tensor::randn(&[rows, d], 1.0, &mut rng),
            h2: Tensor::randn(&[rows, d], 1.0, &mut rng),
        };
        let layout = Rc::new(Layout::single(rows));
        let mut e = Eager::new();
        let there = layer_regular(&mut e, &h, &weights, &dims, &layout).unwrap();
        let back = layer_reverse(&mut e, &there, &weights, &dims, &layout).unwrap();
        prop_assert!(back.max_abs_diff(&h).unwrap() <= 1e-10);
        let there = layer_reverse(&mut e, &h, &weights, &dims, &layout).unwrap();
        let back = layer_regular(&mut e, &there, &weights, &dims, &layout).unwrap();
        prop_assert!(back.max_abs_diff(&h).unwrap() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_maps_invert_each_other(
        seed in any::<u64>(),
        half in 1usize..=6,
        rows in 1usize..=12,
    ) {
        let config = ModelConfig {
            vocab_size: 10,
            d_model: 32,
            d_ff: 64,
            heads: 4,
            layers: 2 * half,
            rel_clip: 8,
            upsample_factor: 2,
            dropout: 0.0,
        };
        let model = DuplexModel::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let h0 = HiddenPair {
            h1: Tensor::randn(&[rows, 32], 1.0, &mut rng),
            h2: Tensor::randn(&[rows, 32], 1.0, &mut rng),
        };
        let layout = Layout::single(rows);
        let top = model.forward_map(&h0, &layout).unwrap().pop().unwrap();
        let back = model.reverse_map(&top, &layout).unwrap().pop().unwrap();
        prop_assert!(back.max_abs_diff(&h0).unwrap() <= 1e-6);
    }
}

/// Pruning is not monotone in width: at width 3 the prefix [1, 2] survives
/// step two and evicts the empty prefix, whose later mass would have
/// flowed into [2].
#[test]
fn wider_beam_can_lower_top_score() {
    let lp = Tensor::new(
        vec![3, 3],
        vec![
            -1.071948277149147,
            -1.7913359379212486,
            -0.7114703542893479,
            -1.7044739529265436,
            -2.139293804479758,
            -0.3561122335068071,
            -1.0986122886681098,
            -1.0986122886681098,
            -1.0986122886681098,
        ],
    )
    .unwrap();
    let top = |w: usize| prefix_beam_search(&lp, w, BLANK).unwrap().remove(0);
    let (two, three, all) = (top(2), top(3), top(27));
    assert_eq!(two.tokens, vec![2]);
    assert_eq!(three.tokens, vec![2]);
    assert!(three.log_prob < two.log_prob - 0.04);
    assert!((all.log_prob - two.log_prob).abs() < 1e-12);
}
