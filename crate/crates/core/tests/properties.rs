use proptest::prelude::*;

use ltr3o::metrics::{accuracy, aggregate_loso, confusion, f1_macro, uar, FoldRecord, MetricsReport};
use ltr3o::model::Model;
use ltr3o::train::Augment;
use ltr3o::{BackboneSpec, Image, LabelSpace};

fn labels(c: usize) -> LabelSpace {
    LabelSpace::new((0..c).map(|i| format!("c{i}")).collect()).unwrap()
}

/// Per-sample counting, independent of the confusion matrix.
fn brute(pred: &[usize], truth: &[usize], c: usize) -> (f64, f64) {
    let mut f1 = 0.0;
    let mut recalls = Vec::new();
    for k in 0..c {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == k, t == k) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        if tp > 0.0 {
            f1 += 2.0 * tp / (2.0 * tp + fp + fneg);
        }
        if tp + fneg > 0.0 {
            recalls.push(tp / (tp + fneg));
        }
    }
    (f1 / c as f64, recalls.iter().sum::<f64>() / recalls.len() as f64)
}

fn cases() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..7).prop_flat_map(|c| (Just(c), proptest::collection::vec((0..c, 0..c), 1..400)))
}

proptest! {
    #[test]
    fn metrics_match_brute_force((c, pairs) in cases()) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = confusion(&pred, &truth, c).unwrap();
        let (f1, ua) = brute(&pred, &truth, c);
        prop_assert!((f1_macro(&m).unwrap() - f1).abs() < 1e-12);
        prop_assert!((uar(&m).unwrap() - ua).abs() < 1e-12);
        let report = MetricsReport::from_confusion(&m, &labels(c)).unwrap();
        prop_assert_eq!(report.uf1.to_bits(), report.f1_macro.to_bits());
    }

    #[test]
    fn accuracy_ignores_class_relabeling((c, pairs) in cases(), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..c).collect();
        let mut s = seed;
        for i in (1..c).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = accuracy(&confusion(&pred, &truth, c).unwrap()).unwrap();
        let pp: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let tp: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        prop_assert_eq!(a, accuracy(&confusion(&pp, &tp, c).unwrap()).unwrap());
    }

    #[test]
    fn pooled_report_is_fold_order_free((c, pairs) in cases(), split in 1usize..5) {
        let records: Vec<FoldRecord> = pairs
            .chunks(pairs.len().div_ceil(split))
            .enumerate()
            .map(|(f, chunk)| FoldRecord {
                fold_id: format!("f{f}"),
                test_subject: format!("f{f}"),
                sample_ids: (0..chunk.len()).map(|i| format!("f{f}_{i}")).collect(),
                predicted: chunk.iter().map(|p| p.0).collect(),
                truth: chunk.iter().map(|p| p.1).collect(),
            })
            .collect();
        let a = aggregate_loso(&records, &labels(c)).unwrap();
        let mut rev = records.clone();
        rev.reverse();
        prop_assert_eq!(a, aggregate_loso(&rev, &labels(c)).unwrap());
    }
}

fn image(seed: u64, size: usize) -> Image {
    Image::from_fn(size, size, 3, |y, x, c| {
        let h = (seed.wrapping_mul(31) ^ (y * 131 + x * 17 + c * 7) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        ((h >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn candidate_order_does_not_matter(seeds in proptest::collection::vec(any::<u64>(), 2..7), rot in 1usize..6) {
        let model = Model::new(&BackboneSpec::tiny(), 3, seeds.len(), 9).unwrap();
        let inputs: Vec<Image> = seeds.iter().map(|&s| image(s, 8)).collect();
        let mut rotated = inputs.clone();
        let r = rot % inputs.len();
        rotated.rotate_left(r);
        let a = model.forward(&inputs).unwrap();
        let b = model.forward(&rotated).unwrap();
        for (i, alpha) in b.alpha.iter().enumerate() {
            prop_assert_eq!(alpha.to_bits(), a.alpha[(i + r) % inputs.len()].to_bits());
        }
        for (x, y) in a.prediction.iter().zip(&b.prediction) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn one_transform_for_all_candidates(seed in any::<u64>()) {
        let mut rng = ltr3o::rng::make_rng(seed, "prop/aug");
        let aug = Augment::sample(16, &mut rng);
        let base = image(seed, 16);
        let copies = [base.clone(), base.clone(), base];
        let out: Vec<Image> = copies.iter().map(|i| aug.apply(i)).collect();
        prop_assert!(out.windows(2).all(|w| w[0] == w[1]));
        prop_assert_eq!(out[0].shape(), (16, 16, 3));
    }
}
