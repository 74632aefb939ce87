use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semevo::engine::GlobalTextBank;
use semevo::vecmath::cosine;
use semevo::{CategoryMemoryBank, MemoryAction};

/// Step-replay model of the bank: a plain list with the replacement rule
/// written out longhand.
struct Model {
    entries: Vec<Vec<f64>>,
    cap: usize,
}

impl Model {
    fn apply(&mut self, v: &[f64], anchor: &[f64]) -> MemoryAction {
        if self.cap == 0 {
            return MemoryAction::Rejected;
        }
        if self.entries.len() < self.cap {
            self.entries.push(v.to_vec());
            return MemoryAction::Appended;
        }
        let scores: Vec<f64> = self.entries.iter().map(|e| cosine(e, anchor).unwrap()).collect();
        let mut slot = 0;
        for i in 1..scores.len() {
            if scores[i] < scores[slot] {
                slot = i;
            }
        }
        if cosine(v, anchor).unwrap() > scores[slot] {
            self.entries[slot] = v.to_vec();
            MemoryAction::Replaced(slot)
        } else {
            MemoryAction::Rejected
        }
    }
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return v;
        }
    }
}

#[test]
fn ten_thousand_operations_match_the_step_replay_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut counts = [0usize; 3];
    for cap in 0..=5 {
        let dim = 6;
        let mut bank = CategoryMemoryBank::new(cap);
        let mut model = Model { entries: Vec::new(), cap };
        let mut pool: Vec<Vec<f64>> = Vec::new();
        for _ in 0..10_000 {
            // Reuse old vectors now and then so exact ties occur.
            let v = if !pool.is_empty() && rng.random_range(0..5) == 0 {
                pool[rng.random_range(0..pool.len())].clone()
            } else {
                random_vec(&mut rng, dim)
            };
            let anchor = if rng.random_range(0..4) == 0 {
                v.clone()
            } else {
                random_vec(&mut rng, dim)
            };
            pool.push(v.clone());
            let got = bank.insert_or_replace(&v, &anchor).unwrap();
            let want = model.apply(&v, &anchor);
            assert_eq!(got, want);
            assert_eq!(bank.entries(), &model.entries[..]);
            assert!(bank.len() <= cap);
            counts[match got {
                MemoryAction::Appended => 0,
                MemoryAction::Replaced(_) => 1,
                MemoryAction::Rejected => 2,
            }] += 1;
        }
    }
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
}

#[test]
fn minimum_anchor_cosine_never_drops_for_a_fixed_anchor() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for cap in 1..=4 {
        let anchor = random_vec(&mut rng, 5);
        let mut bank = CategoryMemoryBank::new(cap);
        let mut floor = f64::NEG_INFINITY;
        for _ in 0..10_000 {
            bank.insert_or_replace(&random_vec(&mut rng, 5), &anchor).unwrap();
            if bank.is_full() {
                let min = bank
                    .entries()
                    .iter()
                    .map(|e| cosine(e, &anchor).unwrap())
                    .fold(f64::INFINITY, f64::min);
                assert!(min >= floor);
                floor = min;
            }
        }
    }
}

#[test]
fn running_average_equals_arithmetic_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 16;
    let mut bank = GlobalTextBank::new(3, dim);
    let mut sum = vec![0.0; dim];
    let updates = 10_000;
    for _ in 0..updates {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0) + 1.0).collect();
        for (s, x) in sum.iter_mut().zip(&v) {
            *s += x;
        }
        bank.update(1, &v).unwrap();
    }
    assert_eq!(bank.counters(), &[0, updates as u64, 0]);
    for (m, s) in bank.mean(1).iter().zip(&sum) {
        let exact = s / updates as f64;
        assert!((m - exact).abs() <= 1e-6 * exact.abs(), "{m} vs {exact}");
    }
    assert!(bank.mean(0).iter().all(|&x| x == 0.0));
}
