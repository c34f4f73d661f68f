use dialogue_core::toy::toy_jsonl;

#[test]
fn shipped_toy_corpus_matches_generator() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/toy.jsonl");
    assert_eq!(std::fs::read_to_string(path).unwrap(), toy_jsonl());
}
