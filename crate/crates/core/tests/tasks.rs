use std::collections::HashSet;

use lawcat::tasks::*;
use lawcat::Result;

#[test]
fn passkey_is_deterministic_and_exact_length() {
    for len in [40, 128, 257, 512] {
        let a = gen_passkey(3, len, 5).unwrap();
        assert_eq!(a, gen_passkey(3, len, 5).unwrap());
        assert_eq!(a.tokens.len(), len);
        assert_eq!(a.answer_end, len);
    }
}

#[test]
fn answer_span_decodes_to_target() {
    let v = Vocab::get();
    for seed in 0..200 {
        for task in [TaskKind::Passkey, TaskKind::Niah1, TaskKind::Niah2, TaskKind::Niah3] {
            let r = generate(task, seed, 160, 5, Split::Eval).unwrap();
            assert_eq!(v.decode(r.answer()), r.target_value);
            assert!(r.answer_start >= 1 && r.answer_end <= r.tokens.len());
        }
    }
}

#[test]
fn exactly_one_needle() {
    let v = Vocab::get();
    let pass = v.id("pass");
    for seed in 0..100 {
        let r = gen_passkey(seed, 300, 5).unwrap();
        // Needle and query each mention "pass" twice.
        assert_eq!(r.tokens.iter().filter(|&&t| t == pass).count(), 1 + 2);
        let key: HashSet<_> = r.answer().iter().collect();
        assert_eq!(key.len(), 5);
    }
}

#[test]
fn minimal_length_has_a_single_legal_position() {
    let minimal = (1..100).find(|&n| gen_passkey(0, n, 5).is_ok()).unwrap();
    for seed in 0..20 {
        let r = gen_passkey(seed, minimal, 5).unwrap();
        assert_eq!(r.needle_pos, 1);
    }
    assert!(matches!(gen_passkey(0, minimal - 1, 5), Err(lawcat::Error::Config(_))));
}

#[test]
fn needle_depths_cover_all_deciles() {
    let mut buckets = HashSet::new();
    for seed in 0..1000 {
        let r = gen_passkey(seed, 512, 5).unwrap();
        buckets.insert(((r.depth() * 10.0) as usize).min(9));
    }
    assert!(buckets.len() >= 10);
}

#[test]
fn variant_target_lengths() {
    let a = gen_niah(1, 200, 2, Split::Train).unwrap();
    let b = gen_niah(1, 200, 3, Split::Train).unwrap();
    assert_eq!(a.target_value.len(), 5);
    assert_eq!(b.target_value.len(), 8);
    assert!(gen_niah(1, 200, 4, Split::Train).is_err());
}

#[test]
fn train_and_eval_pools_are_disjoint() {
    let a: HashSet<String> = sentence_pool(Split::Train).into_iter().collect();
    let b: HashSet<String> = sentence_pool(Split::Eval).into_iter().collect();
    assert!(!a.is_empty() && !b.is_empty());
    assert!(a.is_disjoint(&b));
}

struct Oracle<'a>(&'a [SampleRecord]);

impl GreedyModel for Oracle<'_> {
    fn greedy(&self, prompts: &[Vec<usize>], _max_new: usize) -> Result<Vec<Vec<usize>>> {
        Ok(prompts
            .iter()
            .map(|p| self.0.iter().find(|s| s.prompt() == p.as_slice()).unwrap().answer().to_vec())
            .collect())
    }
}

struct Constant(usize);

impl GreedyModel for Constant {
    fn greedy(&self, prompts: &[Vec<usize>], max_new: usize) -> Result<Vec<Vec<usize>>> {
        Ok(prompts.iter().map(|_| vec![self.0; max_new]).collect())
    }
}

#[test]
fn evaluator_extremes() {
    let samples: Vec<_> = (0..30).map(|s| gen_niah(s, 120, 3, Split::Eval).unwrap()).collect();
    assert_eq!(evaluate(&Oracle(&samples), &samples, 8).unwrap(), 1.0);
    let dot = Vocab::get().id(".");
    assert_eq!(evaluate(&Constant(dot), &samples, 8).unwrap(), 0.0);
    assert!(matches!(evaluate(&Constant(dot), &[], 8), Err(lawcat::Error::Input(_))));
}

#[test]
fn jsonl_round_trip() {
    let samples: Vec<_> = (0..5).map(|s| gen_passkey(s, 64, 4).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    dump_jsonl(&p, &samples).unwrap();
    assert_eq!(load_jsonl(&p).unwrap(), samples);
}
