mod common;

use common::{random_passage, reference_split};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttarag::context::{build_adaptation_set, split_text, SplitKind, MIN_SIDE_WORDS};
use ttarag::retrieval::Document;

#[test]
fn matches_reference_on_ten_thousand_passages() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5_711);
    let (mut splits, mut punct) = (0, 0);
    for i in 0..10_000 {
        let text = random_passage(&mut rng);
        let got = split_text(&text);
        let want = reference_split(&text);
        match (&got, &want) {
            (None, None) => {}
            (Some((p, s, k)), Some((rp, rs, rpunct))) => {
                assert_eq!((p, s), (rp, rs), "passage {i}: {text:?}");
                assert_eq!(*k == SplitKind::Punctuation, *rpunct, "passage {i}: {text:?}");
                assert!(p.split_whitespace().count() >= MIN_SIDE_WORDS);
                assert!(s.split_whitespace().count() >= MIN_SIDE_WORDS);
                let joined = format!("{p} {s}");
                assert!(joined.split_whitespace().eq(text.split_whitespace()));
                splits += 1;
                punct += usize::from(*rpunct);
            }
            _ => panic!("passage {i} {text:?}: {got:?} vs {want:?}"),
        }
    }
    // the generator has to exercise both rules and the unsplittable case
    assert!(splits > 3_000 && punct > 1_000 && splits - punct > 1_000, "{splits} splits, {punct} at punctuation");
}

fn doc(i: usize, text: String) -> Document {
    Document {
        id: format!("d{i}"),
        domain: "x".into(),
        text,
    }
}

proptest! {
    #[test]
    fn adaptation_set_is_bounded_and_rank_ordered(seed in any::<u64>(), budget in 0usize..7, n in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs: Vec<Document> = (0..n).map(|i| doc(i, random_passage(&mut rng))).collect();
        let refs: Vec<&Document> = docs.iter().collect();
        let pairs = build_adaptation_set(&refs, budget, 0);
        let splittable: Vec<&Document> = docs.iter().filter(|d| reference_split(&d.text).is_some()).collect();
        prop_assert_eq!(pairs.len(), budget.min(splittable.len()));
        for (p, d) in pairs.iter().zip(&splittable) {
            prop_assert_eq!(&p.source_id, &d.id);
        }
    }
}
