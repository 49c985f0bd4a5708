mod common;

#[test]
fn corpus_has_every_shape() {
    let cases = common::parser_cases();
    assert!(cases.len() >= 20);
    for shape in ["fenced", "trailing-comma", "missing", "prose", "garbage"] {
        assert!(cases.iter().any(|c| c.name.contains(shape)), "no `{shape}` case");
    }
}

#[test]
fn every_case_matches_its_record() {
    let failures: Vec<String> =
        common::parser_cases().iter().filter_map(|c| common::check_parser_case(c).err()).collect();
    assert!(failures.is_empty(), "{failures:#?}");
}
