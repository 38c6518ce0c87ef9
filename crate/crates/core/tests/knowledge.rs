use proptest::prelude::*;
use protonesy_core::knowledge::{
    enumerate_models, parse, sum_knowledge, Assignment, ConceptSpace, EnumerationMode, Formula,
    KnowledgeError,
};

fn formula(space: ConceptSpace) -> impl Strategy<Value = Formula> {
    let sizes = space.sizes().to_vec();
    let leaf = prop_oneof![
        8 => (0..sizes.len()).prop_flat_map(move |g| (Just(g), 0..sizes[g]))
            .prop_map(|(g, c)| Formula::atom(g, c)),
        1 => Just(Formula::True),
        1 => Just(Formula::False),
    ];
    leaf.prop_recursive(4, 32, 4, |inner| {
        prop_oneof![
            inner.clone().prop_map(Formula::not),
            prop::collection::vec(inner.clone(), 2..4).prop_map(Formula::And),
            prop::collection::vec(inner.clone(), 2..4).prop_map(Formula::Or),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Formula::implies(a, b)),
            (inner.clone(), inner).prop_map(|(a, b)| Formula::iff(a, b)),
        ]
    })
}

/// Every assignment of the requested mode, in lexicographic order.
fn all_assignments(space: &ConceptSpace, mode: EnumerationMode) -> Vec<Assignment> {
    let n = space.atom_count();
    let mut out: Vec<Assignment> = (0..1u32 << n)
        .map(|bits| Assignment((0..n).map(|i| bits >> (n - 1 - i) & 1 == 1).collect()))
        .filter(|nu| mode == EnumerationMode::Free || nu.is_one_hot(space))
        .collect();
    out.sort();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn print_then_parse_is_identity(f in formula(ConceptSpace::new(vec![3, 4]).unwrap())) {
        let space = ConceptSpace::new(vec![3, 4]).unwrap();
        let text = f.to_string();
        prop_assert_eq!(parse(&text, &space).unwrap(), f);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn models_are_exactly_the_satisfying_assignments(
        f in formula(ConceptSpace::new(vec![3, 4, 3]).unwrap()),
        one_hot in any::<bool>(),
    ) {
        let space = ConceptSpace::new(vec![3, 4, 3]).unwrap();
        let mode = if one_hot { EnumerationMode::OneHot } else { EnumerationMode::Free };
        let expected: Vec<Assignment> = all_assignments(&space, mode)
            .into_iter()
            .filter(|nu| f.evaluate(&space, nu))
            .collect();
        let got = enumerate_models(&f, &space, mode).unwrap();
        prop_assert_eq!(got.mode, mode);
        prop_assert_eq!(got.models, expected);
    }
}

#[test]
fn grammar_examples() {
    let space = ConceptSpace::digit_pair();
    assert_eq!(
        parse("c[0]=3 & c[1]=2", &space).unwrap(),
        Formula::And(vec![Formula::atom(0, 3), Formula::atom(1, 2)])
    );
    assert_eq!(
        parse("~(c[0]=1) -> c[1]=0", &space).unwrap(),
        Formula::implies(Formula::not(Formula::atom(0, 1)), Formula::atom(1, 0))
    );
    assert!(matches!(
        parse("c[0]=", &space),
        Err(KnowledgeError::Syntax { offset: 5, .. })
    ));
    assert!(matches!(
        parse("c[2]=0", &space),
        Err(KnowledgeError::AtomOutOfRange { .. })
    ));
    assert!(matches!(
        parse("d[0]=0", &space),
        Err(KnowledgeError::UnknownAtom { .. })
    ));
}

#[test]
fn precedence_and_associativity() {
    let space = ConceptSpace::new(vec![2, 2]).unwrap();
    let (a, b, c) = (Formula::atom(0, 0), Formula::atom(0, 1), Formula::atom(1, 0));
    assert_eq!(
        parse("c[0]=0 -> c[0]=1 -> c[1]=0", &space).unwrap(),
        Formula::implies(a.clone(), Formula::implies(b.clone(), c.clone()))
    );
    assert_eq!(
        parse("c[0]=0 | c[0]=1 & c[1]=0", &space).unwrap(),
        Formula::Or(vec![a.clone(), Formula::And(vec![b.clone(), c.clone()])])
    );
    assert_eq!(
        parse("c[0]=0 <-> c[0]=1 <-> c[1]=0 # trailing comment", &space).unwrap(),
        Formula::iff(Formula::iff(a, b), c)
    );
}

#[test]
fn free_tautology_has_all_assignments() {
    let space = ConceptSpace::new(vec![2]).unwrap();
    assert_eq!(
        enumerate_models(&Formula::True, &space, EnumerationMode::Free)
            .unwrap()
            .len(),
        4
    );
}

#[test]
fn contradiction_is_never_true() {
    let space = ConceptSpace::new(vec![2, 2]).unwrap();
    let a = Formula::atom(1, 1);
    let f = Formula::And(vec![a.clone(), Formula::not(a)]);
    for nu in all_assignments(&space, EnumerationMode::Free) {
        assert!(!f.evaluate(&space, &nu));
    }
}

#[test]
fn sum_knowledge_models_are_the_decompositions() {
    let space = ConceptSpace::digit_pair();
    for y in 0..=18i64 {
        let f = sum_knowledge(y, &space).unwrap();
        let got = enumerate_models(&f, &space, EnumerationMode::OneHot).unwrap();
        let mut expected: Vec<Assignment> = (0..10)
            .flat_map(|a| (0..10).map(move |b| (a, b)))
            .filter(|(a, b)| (a + b) as i64 == y)
            .map(|(a, b)| space.one_hot(&[a, b]))
            .collect();
        expected.sort();
        assert_eq!(got.models, expected, "label {y}");
        // Every disjunct pins all twenty atoms, so free enumeration agrees.
        assert_eq!(
            enumerate_models(&f, &space, EnumerationMode::Free)
                .unwrap()
                .models,
            expected
        );
    }
    assert_eq!(
        enumerate_models(
            &sum_knowledge(5, &space).unwrap(),
            &space,
            EnumerationMode::OneHot
        )
        .unwrap()
        .len(),
        6
    );
    assert!(sum_knowledge(5, &space)
        .unwrap()
        .evaluate(&space, &space.one_hot(&[3, 2])));
    assert_eq!(
        sum_knowledge(19, &space),
        Err(KnowledgeError::LabelOutOfRange(19))
    );
}

#[test]
fn enumeration_limits() {
    let big = ConceptSpace::new(vec![25]).unwrap();
    assert!(matches!(
        enumerate_models(&Formula::True, &big, EnumerationMode::Free),
        Err(KnowledgeError::SizeLimit { .. })
    ));
    let wide = ConceptSpace::new(vec![10; 8]).unwrap();
    assert!(matches!(
        enumerate_models(&Formula::True, &wide, EnumerationMode::OneHot),
        Err(KnowledgeError::SizeLimit { .. })
    ));
}
