use proptest::prelude::{any, prop_assert_eq, proptest};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::nn::{Mode, ModelSpec};

fn item(i: u64) -> BufferItem {
    BufferItem::new(vec![i as f64], i as usize, i)
}

#[test]
fn fills_in_offer_order() {
    let mut b = ReplayBuffer::new(3, Rng::new(0));
    for i in 0..3 {
        assert_eq!(b.reservoir_insert(item(i)), Some(i as usize));
    }
    let labels: Vec<usize> = b.items().iter().map(|i| i.label).collect();
    assert_eq!(labels, vec![0, 1, 2]);
}

#[test]
fn zero_capacity_only_counts() {
    let mut b = ReplayBuffer::new(0, Rng::new(0));
    for i in 0..10 {
        assert_eq!(b.reservoir_insert(item(i)), None);
    }
    assert!(b.is_empty());
    assert_eq!(b.seen_count(), 10);
    assert!(matches!(
        b.sample_batch(4, &mut Rng::new(1)),
        Err(BufferError::EmptyBuffer)
    ));
}

#[test]
fn inclusion_is_uniform_over_insertion_deciles() {
    let (cap, m, trials) = (50usize, 10_000u64, 2_000u64);
    let mut deciles = [0u64; 10];
    let mut root = Rng::new(2024);
    for t in 0..trials {
        let mut b = ReplayBuffer::new(cap, root.fork(t));
        for i in 0..m {
            b.reservoir_insert(BufferItem::new(Vec::new(), i as usize, i));
        }
        for it in b.items() {
            deciles[it.label * 10 / m as usize] += 1;
        }
    }
    let expected = (trials * cap as u64) as f64 / 10.0;
    for &d in &deciles {
        assert!((d as f64 - expected).abs() <= 0.2 * expected, "{deciles:?}");
    }
    let chi2: f64 = deciles
        .iter()
        .map(|&d| (d as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");
}

#[test]
fn large_batch_returns_everything_once() {
    let mut b = ReplayBuffer::new(5, Rng::new(0));
    for i in 0..4 {
        b.reservoir_insert(item(i));
    }
    let mut labels: Vec<usize> = b
        .sample_batch(10, &mut Rng::new(3))
        .unwrap()
        .iter()
        .map(|i| i.label)
        .collect();
    labels.sort();
    assert_eq!(labels, vec![0, 1, 2, 3]);
}

#[test]
fn single_draw_frequencies() {
    let mut b = ReplayBuffer::new(10, Rng::new(0));
    for i in 0..10 {
        b.reservoir_insert(item(i));
    }
    let mut rng = Rng::new(5);
    let mut counts = [0usize; 10];
    let draws = 100_000;
    for _ in 0..draws {
        counts[b.sample_batch(1, &mut rng).unwrap()[0].label] += 1;
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((0.08..=0.12).contains(&f), "{counts:?}");
    }
}

#[test]
fn sampling_is_deterministic_and_distinct() {
    let mut b = ReplayBuffer::new(20, Rng::new(0));
    for i in 0..20 {
        b.reservoir_insert(item(i));
    }
    let a: Vec<usize> = b
        .sample_batch(8, &mut Rng::new(9))
        .unwrap()
        .iter()
        .map(|i| i.label)
        .collect();
    let c: Vec<usize> = b
        .sample_batch(8, &mut Rng::new(9))
        .unwrap()
        .iter()
        .map(|i| i.label)
        .collect();
    assert_eq!(a, c);
    let mut d = a.clone();
    d.sort();
    d.dedup();
    assert_eq!(d.len(), 8);
}

fn small_model() -> Model {
    Model::new(ModelSpec::mlp(3, 4), &mut Rng::new(11)).unwrap()
}

#[test]
fn zero_model_gives_zero_logits() {
    let mut m = small_model();
    for p in m.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let it = attach_logits(BufferItem::new(vec![1.0, -2.0, 0.5], 0, 0), &m).unwrap();
    assert_eq!(it.logits, Some(vec![0.0; 4]));
}

#[test]
fn logits_match_independent_forward_and_stay_fixed() {
    let mut m = small_model();
    let x = vec![0.3, -0.7, 1.1];
    let it = attach_logits(BufferItem::new(x.clone(), 1, 7), &m).unwrap();
    let oracle = m
        .forward(&Tensor::new(vec![1, 3], x.clone()).unwrap(), Mode::Eval)
        .unwrap();
    assert_eq!(it.logits.as_deref(), Some(oracle.data()));
    let before = it.clone();
    for p in m.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    assert_eq!(it, before);
    let fresh = attach_logits(BufferItem::new(x, 1, 7), &m).unwrap();
    assert_ne!(fresh.logits, it.logits);
}

#[test]
fn wrong_input_width_is_rejected() {
    let m = small_model();
    assert!(attach_logits(BufferItem::new(vec![1.0; 5], 0, 0), &m).is_err());
}

#[test]
fn dump_restore_is_bit_exact() {
    let m = small_model();
    let mut b = ReplayBuffer::new(6, Rng::new(4));
    for i in 0..40u64 {
        let x = vec![i as f64 * 0.1, -(i as f64), 1.0 / (i as f64 + 1.0)];
        let it = BufferItem::new(x, (i % 4) as usize, i);
        let it = if i % 3 == 0 {
            attach_logits(it, &m).unwrap()
        } else {
            it
        };
        b.reservoir_insert(it);
    }
    let mut bytes = Vec::new();
    b.dump(&mut bytes).unwrap();
    let mut r = ReplayBuffer::restore(&mut bytes.as_slice()).unwrap();
    assert_eq!(r, b);
    let mut again = Vec::new();
    r.dump(&mut again).unwrap();
    assert_eq!(bytes, again);
    // Both continue identically.
    for i in 40..80 {
        assert_eq!(b.reservoir_insert(item(i)), r.reservoir_insert(item(i)));
    }
    assert_eq!(r, b);
    bytes[0] = b'X';
    assert!(matches!(
        ReplayBuffer::restore(&mut bytes.as_slice()),
        Err(BufferError::BadFile(_))
    ));
}

#[test]
fn stack_builds_batches() {
    let a = BufferItem {
        logits: Some(vec![1.0, 2.0]),
        ..BufferItem::new(vec![1.0, 2.0, 3.0], 1, 0)
    };
    let b = BufferItem {
        logits: Some(vec![3.0, 4.0]),
        ..BufferItem::new(vec![4.0, 5.0, 6.0], 0, 1)
    };
    let (x, y, z) = ReplayBuffer::stack(&[&a, &b]).unwrap();
    assert_eq!(x.shape(), &[2, 3]);
    assert_eq!(y, vec![1, 0]);
    assert_eq!(z.unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    let c = BufferItem::new(vec![0.0; 3], 0, 2);
    assert!(ReplayBuffer::stack(&[&a, &c]).unwrap().2.is_none());
}

proptest! {
    #[test]
    fn size_law_holds(cap in 0usize..20, offers in 0u64..200, seed in any::<u64>()) {
        let mut b = ReplayBuffer::new(cap, Rng::new(seed));
        for i in 0..offers {
            let before = b.seen_count();
            b.reservoir_insert(item(i));
            prop_assert_eq!(b.seen_count(), before + 1);
            prop_assert_eq!(b.len(), (b.seen_count() as usize).min(cap));
        }
    }
}
