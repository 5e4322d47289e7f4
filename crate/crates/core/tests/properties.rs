//! Property tests for the invariants that hold over whole input families.

use proptest::prelude::*;

use vlmdet_core::data::{gaussian_blur, Image};
use vlmdet_core::eval::{accuracy_at_threshold, average_precision, ScoredItem};
use vlmdet_core::model::{tokenize, Vocabulary, EOS_ID, PAD_ID, SOS_ID};
use vlmdet_core::tensor::{Tape, Tensor};

proptest! {
    #[test]
    fn softmax_rows_are_distributions_f32(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
    ) {
        let mut rng = vlmdet_core::tensor::SeededRng::new(seed);
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| (rng.next_f32() - 0.5) * 16.0)
            .collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_rows(rows, cols, data).unwrap()).unwrap();
        let y = tape.softmax(x, false).unwrap();
        for r in 0..rows {
            let row = &tape.value(y).data()[r * cols..(r + 1) * cols];
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_rows_are_distributions_f64(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
    ) {
        let mut rng = vlmdet_core::tensor::SeededRng::new(seed);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| (rng.next_f64() - 0.5) * 16.0)
            .collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(rows, cols, data).unwrap()).unwrap();
        let y = tape.softmax(x, false).unwrap();
        for r in 0..rows {
            let row = &tape.value(y).data()[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
        }
    }

    #[test]
    fn average_precision_is_a_rank_statistic(
        labels in proptest::collection::vec(0u8..2, 2..12),
        scale in 0.1f64..5.0,
        shift in -2.0f64..2.0,
    ) {
        prop_assume!(labels.iter().any(|&l| l == 1));
        let items: Vec<ScoredItem> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| ScoredItem::new(1.0 / (i as f64 + 2.0), l, format!("s{i:02}")))
            .collect();
        let base = average_precision(&items).unwrap();
        // strictly increasing transform: exp(scale·x) + shift preserves order
        let transformed: Vec<ScoredItem> = items
            .iter()
            .map(|i| ScoredItem::new((i.score * scale).exp() + shift, i.label, i.source_id.clone()))
            .collect();
        let mapped = average_precision(&transformed).unwrap();
        prop_assert!((base - mapped).abs() < 1e-12);
    }

    #[test]
    fn label_flip_complements_accuracy(
        pairs in proptest::collection::vec((0.0f64..1.0, 0u8..2), 1..20),
    ) {
        prop_assume!(pairs.iter().all(|(s, _)| (s - 0.5).abs() > 1e-9));
        let items: Vec<ScoredItem> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(s, l))| ScoredItem::new(s, l, format!("s{i:02}")))
            .collect();
        let a = accuracy_at_threshold(&items, 0.5).unwrap();
        let flipped: Vec<ScoredItem> = items
            .iter()
            .map(|i| ScoredItem::new(i.score, 1 - i.label, i.source_id.clone()))
            .collect();
        let b = accuracy_at_threshold(&flipped, 0.5).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_is_linear(
        seed in any::<u64>(),
        a in 0.1f32..0.6,
        b in 0.1f32..0.4,
        sigma in 0.5f64..2.5,
    ) {
        let mut rng = vlmdet_core::tensor::SeededRng::new(seed);
        let mut image = |offset: u64| {
            let mut r = rng.derive_u64(offset);
            Image::new(12, 12, (0..12 * 12 * 3).map(|_| r.next_f32()).collect()).unwrap()
        };
        let i1 = image(1);
        let i2 = image(2);
        let combined = Image::new(
            12,
            12,
            i1.data().iter().zip(i2.data()).map(|(&x, &y)| a * x + b * y).collect(),
        )
        .unwrap();
        let lhs = gaussian_blur(&combined, sigma).unwrap();
        let b1 = gaussian_blur(&i1, sigma).unwrap();
        let b2 = gaussian_blur(&i2, sigma).unwrap();
        for ((&l, &x), &y) in lhs.data().iter().zip(b1.data()).zip(b2.data()) {
            prop_assert!((l - (a * x + b * y)).abs() < 1e-5);
        }
    }

    #[test]
    fn tokenize_structure_invariants(word_count in 0usize..30) {
        let vocab = Vocabulary::standard();
        let words = vec!["grainy"; word_count].join(" ");
        let seq = tokenize(&words, &vocab, 16).unwrap();
        prop_assert_eq!(seq.ids.len(), 16);
        prop_assert_eq!(seq.ids[0], SOS_ID);
        prop_assert_eq!(seq.ids.iter().filter(|&&id| id == EOS_ID).count(), 1);
        prop_assert_eq!(seq.ids[seq.eos_pos], EOS_ID);
        prop_assert!(seq.eos_pos < 16);
        // nothing but padding after [EOS]
        prop_assert!(seq.ids[seq.eos_pos + 1..].iter().all(|&id| id == PAD_ID));
    }
}
