use proptest::collection::{btree_set, vec};
use proptest::prelude::*;
use tlsrec::dataset::TrainingInstance;
use tlsrec::evaluation::{average_precision_at_k, evaluate, hit_at_k, map_at_k, rank_items, EvalOptions, Scorer};
use tlsrec::Result;

/// Reference ranking: selection of the best remaining item, one at a time.
fn brute_rank(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            let (a, b) = (left[j], left[best]);
            let key = |i: usize| (exclude.contains(&i), -scores[i], i);
            if key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less) {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn brute_map(truth: &[usize], ranking: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for r in 1..=k.min(ranking.len()) {
        if truth.contains(&ranking[r - 1]) {
            let above = ranking[..r].iter().filter(|i| truth.contains(i)).count();
            total += above as f64 / r as f64;
        }
    }
    total
}

#[test]
fn hand_computed_cases() {
    let ranking = [3, 1, 4, 0, 2];
    assert_eq!(hit_at_k(&[4], &ranking[..2]).unwrap(), 0.0);
    assert_eq!(hit_at_k(&[4], &ranking[..3]).unwrap(), 1.0);
    assert!(hit_at_k(&[], &ranking).is_err());
    assert!((map_at_k(&[3, 4], &ranking, 5) - (1.0 + 2.0 / 3.0)).abs() < 1e-15);
    assert!((average_precision_at_k(&[3, 4], &ranking, 5) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert_eq!(map_at_k(&[2], &ranking, 4), 0.0);
    assert_eq!(rank_items(&[0.5, 0.5, 0.9], &[]), vec![2, 0, 1]);
    assert_eq!(rank_items(&[0.5, 0.1, 0.9], &[2]), vec![0, 1, 2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ranking_matches_selection(
        scores in vec(prop_oneof![Just(0.0), Just(1.0), -3.0f64..3.0], 1..30),
        exclude in vec(0usize..30, 0..5),
    ) {
        prop_assert_eq!(rank_items(&scores, &exclude), brute_rank(&scores, &exclude));
    }

    #[test]
    fn metrics_match_brute_force(
        n in 1usize..40,
        truth in btree_set(0usize..40, 1..6),
        seed in any::<u64>(),
        k in 1usize..45,
    ) {
        let truth: Vec<usize> = truth.into_iter().map(|t| t % n).collect();
        let scores: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40) as f64).collect();
        let ranking = rank_items(&scores, &[]);
        let top = &ranking[..k.min(n)];
        let hit = truth.iter().any(|t| top.contains(t));
        prop_assert_eq!(hit_at_k(&truth, top).unwrap(), if hit { 1.0 } else { 0.0 });
        prop_assert!((map_at_k(&truth, &ranking, k) - brute_map(&truth, &ranking, k)).abs() < 1e-12);
        let mut unique = truth.clone();
        unique.sort_unstable();
        unique.dedup();
        let ap = average_precision_at_k(&unique, &ranking, k);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
    }

    #[test]
    fn metrics_are_monotone_in_k(
        n in 2usize..40,
        truth in btree_set(0usize..40, 1..6),
        perm_seed in any::<u64>(),
    ) {
        let truth: Vec<usize> = truth.into_iter().filter(|&t| t < n).collect();
        prop_assume!(!truth.is_empty());
        let mut ranking: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ranking.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut last = (0.0, 0.0);
        for k in 1..=n {
            let h = hit_at_k(&truth, &ranking[..k]).unwrap();
            let m = map_at_k(&truth, &ranking, k);
            prop_assert!(h >= last.0 && m >= last.1);
            last = (h, m);
        }
        prop_assert_eq!(last.0, 1.0);
    }
}

struct Fixed(Vec<f64>);

impl Scorer for Fixed {
    fn item_count(&self) -> usize {
        self.0.len()
    }
    fn scores(&self, _: &TrainingInstance) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

fn instance(targets: Vec<usize>) -> TrainingInstance {
    TrainingInstance {
        user: 0,
        sessions: vec![vec![0]],
        targets,
        lag_seconds: 0,
        delta: 1,
    }
}

#[test]
fn oracle_and_anti_oracle_scorers() {
    let n = 50;
    let targets = vec![7, 11, 13];
    let mut s = vec![0.0; n];
    for &t in &targets {
        s[t] = 1.0;
    }
    let opts = EvalOptions {
        ks: vec![3, 20, 47, 50],
        ..EvalOptions::default()
    };
    let report = evaluate(&Fixed(s.clone()), &[instance(targets.clone())], &opts).unwrap();
    for row in &report.rows {
        assert_eq!(row.hit, 1.0);
        assert!((row.map - 3.0).abs() < 1e-15);
        assert!((row.ap - 1.0).abs() < 1e-15);
    }
    let anti: Vec<f64> = s.iter().map(|v| -v).collect();
    let report = evaluate(&Fixed(anti), &[instance(targets)], &opts).unwrap();
    assert_eq!(report.at(20).unwrap().hit, 0.0);
    assert_eq!(report.at(47).unwrap().hit, 0.0);
    assert_eq!(report.at(50).unwrap().hit, 1.0);
}

#[test]
fn excluding_history_removes_session_items() {
    let scores: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
    let mut inst = instance(vec![1]);
    inst.sessions = vec![vec![0, 0], vec![1, 2]];
    let opts = EvalOptions {
        ks: vec![1],
        exclude_history: true,
        retain_top: true,
    };
    let report = evaluate(&Fixed(scores), &[inst], &opts).unwrap();
    assert_eq!(report.top.unwrap()[0], vec![3]);
    assert_eq!(report.rows[0].hit, 0.0);
}
