use std::collections::HashSet;

use proptest::prelude::*;

use super::*;

#[test]
fn parses_a_line() {
    let t = parse_line("u1\thello there\thi", 1).unwrap();
    assert_eq!(t, DialogueTriple::new("u1", "hello there", "hi"));
    assert_eq!(t.query, vec!["hello", "there"]);
    assert_eq!(t.reply, vec!["hi"]);
}

#[test]
fn two_fields_is_a_parse_error_at_that_line() {
    let err = parse_corpus("u1\ta\tb\nu2\tonly two\n").unwrap_err();
    match err {
        CorpusError::Parse { line, .. } => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
    assert!(parse_corpus("u1\ta\tb\tc\n").is_err());
    assert!(parse_corpus("u1\t \tb\n").is_err());
    assert!(parse_corpus("\ta\tb\n").is_err());
}

#[test]
fn empty_file_is_an_empty_corpus() {
    assert!(matches!(parse_corpus(""), Err(CorpusError::Empty)));
}

#[test]
fn sparse_users_map_to_the_unspecified_user() {
    let triples = vec![
        DialogueTriple::new("a", "q", "r"),
        DialogueTriple::new("a", "q", "r s"),
        DialogueTriple::new("b", "q", "r"),
    ];
    let users = UserTable::build(&triples, 2);
    assert_eq!(users.index_of("a"), 1);
    assert_eq!(users.index_of("b"), UNSPECIFIED_USER);
    assert!(!users.is_evaluated("b"));
    assert_eq!(users.id(0), UNSPECIFIED_USER_ID);
    assert_eq!(users.real_users(), &["a".to_string()]);
}

#[test]
fn vocabulary_reserves_the_first_four_indices() {
    let triples = vec![DialogueTriple::new("a", "x y", "y z z")];
    let v = Vocabulary::build(&triples, 100);
    assert_eq!(v.id("<pad>"), PAD);
    assert_eq!(v.id("<unk>"), UNK);
    assert_eq!(v.id("<bos>"), BOS);
    assert_eq!(v.id("<eos>"), EOS);
    // most frequent first, ties lexicographic
    assert_eq!(v.id("y"), 4);
    assert_eq!(v.id("z"), 5);
    assert_eq!(v.id("x"), 6);
    assert_eq!(v.id("never"), UNK);
}

#[test]
fn vocabulary_truncates_to_top_k() {
    let triples = vec![DialogueTriple::new("a", "x x x y y", "z")];
    let v = Vocabulary::build(&triples, 5);
    assert_eq!(v.len(), 5);
    assert_eq!(v.id("x"), 4);
    assert_eq!(v.id("y"), UNK);
}

#[test]
fn split_of_one_prolific_user() {
    let triples: Vec<_> = (0..200).map(|i| DialogueTriple::new("u", &format!("q{i}"), "r")).collect();
    let (train, test) = split(&triples, 0.995, 1);
    assert_eq!((train.len(), test.len()), (199, 1));
}

#[test]
fn split_half_of_two() {
    let triples = vec![DialogueTriple::new("u", "a", "b"), DialogueTriple::new("u", "c", "d")];
    let (train, test) = split(&triples, 0.5, 9);
    assert_eq!((train.len(), test.len()), (1, 1));
}

#[test]
fn split_is_deterministic_and_keeps_every_user_in_train() {
    let corpus = generate_synthetic(5, 30, 0.8, 4);
    let a = split(&corpus.triples, 0.7, 17);
    let b = split(&corpus.triples, 0.7, 17);
    assert_eq!(a, b);
    let train_users: HashSet<_> = a.0.iter().map(|t| &t.user_id).collect();
    assert!(a.1.iter().all(|t| train_users.contains(&t.user_id)));
}

#[test]
fn training_split_has_no_unknown_tokens() {
    let corpus = generate_synthetic(4, 50, 0.9, 2);
    let data = prepare(&corpus.triples, 0.9, 3, 1, DEFAULT_MAX_VOCAB);
    let enc = encode_triples(&data.train, &data.vocab, &data.users);
    assert!(enc.iter().all(|t| !t.query.contains(&UNK) && !t.reply.contains(&UNK)));
    assert!(enc.iter().all(|t| t.user != UNSPECIFIED_USER));
}

#[test]
fn synthetic_signature_frequency_tracks_strength() {
    let corpus = generate_synthetic(4, 1000, 0.9, 11);
    for u in 0..4 {
        let id = corpus.spec.user_id(u);
        let replies: Vec<_> = corpus.triples.iter().filter(|t| t.user_id == id).collect();
        assert_eq!(replies.len(), 1000);
        let hits = replies
            .iter()
            .filter(|t| t.reply.iter().any(|w| corpus.signature_owner(w) == Some(u)))
            .count();
        let freq = hits as f64 / replies.len() as f64;
        assert!((freq - 0.9).abs() <= 0.05, "user {u}: {freq}");
    }
}

#[test]
fn synthetic_signatures_do_not_leak_across_users() {
    let corpus = generate_synthetic(4, 500, 0.99, 5);
    let mut leaked = 0;
    for t in &corpus.triples {
        let owner: usize = t.user_id.trim_start_matches("user").parse().unwrap();
        if t.reply.iter().any(|w| matches!(corpus.signature_owner(w), Some(o) if o != owner)) {
            leaked += 1;
        }
    }
    assert!((leaked as f64 / corpus.triples.len() as f64) < 0.02);
}

#[test]
fn synthetic_is_byte_identical_under_a_seed() {
    let a = format_corpus(&generate_synthetic(3, 40, 0.8, 123).triples);
    let b = format_corpus(&generate_synthetic(3, 40, 0.8, 123).triples);
    let c = format_corpus(&generate_synthetic(3, 40, 0.8, 124).triples);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tsv");
    std::fs::write(&path, "u1\thello   there\thi\nu2\tyo\tok  then\n").unwrap();
    let loaded = load_corpus(&path, 1).unwrap();
    let out = dir.path().join("d.tsv");
    write_corpus(&loaded.triples, &out).unwrap();
    assert_eq!(std::fs::read_to_string(out).unwrap(), "u1\thello there\thi\nu2\tyo\tok then\n");
    assert_eq!(loaded.users.len(), 3);
}

fn token() -> impl Strategy<Value = String> {
    "[a-z]{1,5}"
}

fn triple() -> impl Strategy<Value = DialogueTriple> {
    ("[a-z0-9]{1,4}", prop::collection::vec(token(), 1..6), prop::collection::vec(token(), 1..6))
        .prop_map(|(user_id, query, reply)| DialogueTriple { user_id, query, reply })
}

proptest! {
    #[test]
    fn format_then_parse_is_identity(triples in prop::collection::vec(triple(), 1..20)) {
        let text = format_corpus(&triples);
        prop_assert_eq!(parse_corpus(&text).unwrap(), triples);
    }

    #[test]
    fn split_partitions_the_input(triples in prop::collection::vec(triple(), 1..40), ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, test) = split(&triples, ratio, seed);
        prop_assert_eq!(train.len() + test.len(), triples.len());
        let mut all: Vec<_> = train.iter().chain(&test).map(|t| t.to_line()).collect();
        let mut orig: Vec<_> = triples.iter().map(|t| t.to_line()).collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
    }

    #[test]
    fn vocabulary_indices_are_unique(triples in prop::collection::vec(triple(), 1..20)) {
        let v = Vocabulary::build(&triples, 50);
        let ids: HashSet<usize> = v.tokens().iter().map(|t| v.id(t)).collect();
        prop_assert_eq!(ids.len(), v.len());
    }
}
