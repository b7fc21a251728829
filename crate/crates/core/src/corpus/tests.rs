use super::*;

fn dog_table() -> ClassTable {
    parse_class_descriptions("/m/0bt9lr,Dog\n/m/01yrx,Cat\n".as_bytes()).unwrap()
}

#[test]
fn class_descriptions() {
    let t = parse_class_descriptions("/m/0bt9lr,Dog".as_bytes()).unwrap();
    assert_eq!(t.entries(), &[ClassEntry { class_id: "/m/0bt9lr".into(), display_name: "dog".into() }]);
    assert!(parse_class_descriptions("".as_bytes()).unwrap().is_empty());
    match parse_class_descriptions("/m/x,,".as_bytes()) {
        Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("{other:?}"),
    }
    let t = parse_class_descriptions("/m/a,  Traffic Light \n/m/b,\"Car, red\"\n".as_bytes()).unwrap();
    assert_eq!(t.display_name("/m/a"), Some("traffic light"));
    assert_eq!(t.display_name("/m/b"), Some("car, red"));
    assert!(parse_class_descriptions("/m/a,x\n/m/a,y\n".as_bytes()).is_err());
}

#[test]
fn image_labels() {
    let l = parse_image_labels("img1,verification,/m/0bt9lr,1".as_bytes()).unwrap();
    assert_eq!(l[0].presence, Presence::Positive);
    assert_eq!(l[0].verification, Verification::Human);

    let l = parse_image_labels(
        "ImageID,Source,LabelName,Confidence\nimg1,machine,/m/0bt9lr,0\nimg2,crowdsource-verification,/m/x,1.0\n"
            .as_bytes(),
    )
    .unwrap();
    assert_eq!(l.len(), 2);
    assert_eq!(l[0].presence, Presence::Negative);
    assert_eq!(l[0].verification, Verification::Machine);
    assert_eq!(l[1].verification, Verification::Human);

    match parse_image_labels("img1,machine,/m/0bt9lr,0.7".as_bytes()) {
        Err(CorpusError::Parse { line: 1, message }) => assert!(message.contains("binary")),
        other => panic!("{other:?}"),
    }
    assert!(parse_image_labels("a,b,c".as_bytes()).is_err());
    assert!(parse_image_labels("".as_bytes()).unwrap().is_empty());
}

#[test]
fn box_labels() {
    let b = parse_box_labels("img1,/m/0bt9lr,0.1,0.5,0.2,0.6".as_bytes()).unwrap();
    assert_eq!((b[0].x_min, b[0].y_min, b[0].x_max, b[0].y_max), (0.1, 0.2, 0.5, 0.6));
    match parse_box_labels("img1,/m/a,0.1,0.5,0.2,0.6\nimg1,/m/a,0.5,0.5,0.1,0.2".as_bytes()) {
        Err(CorpusError::Validation { row: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(parse_box_labels("img1,/m/a,0.1,1.5,0.2,0.6".as_bytes()).is_err());
    assert!(parse_box_labels("".as_bytes()).unwrap().is_empty());
}

#[test]
fn localized_narratives() {
    let c = parse_localized_narratives(
        "{\"image_id\":\"img1\",\"caption\":\"a dog on grass\",\"annotator_id\":3}\n".as_bytes(),
    )
    .unwrap();
    assert_eq!(c, vec![CaptionRecord { image_id: "img1".into(), caption: "a dog on grass".into() }]);
    match parse_localized_narratives("{\"image_id\":\"a\",\"caption\":\"x\"}\n[]\n".as_bytes()) {
        Err(CorpusError::Parse { line: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(parse_localized_narratives("{\"image_id\":\"a\"}".as_bytes()).is_err());
    assert!(parse_localized_narratives("".as_bytes()).unwrap().is_empty());
}

fn label(img: &str, class: &str, presence: Presence) -> ImageLabel {
    ImageLabel { image_id: img.into(), class_id: class.into(), presence, verification: Verification::Human }
}

#[test]
fn build_minimal_join() {
    let c = build_corpus(
        dog_table(),
        vec![label("img1", "/m/0bt9lr", Presence::Positive)],
        vec![],
        vec![CaptionRecord { image_id: "img1".into(), caption: "a dog".into() }],
        vec![],
    )
    .unwrap();
    assert_eq!(c.num_images(), 1);
    assert_eq!(c.labeled_positives("img1").len(), 1);
    assert_eq!(c.num_captions(), 1);
    assert_eq!(c.dropped_records(), 0);
}

#[test]
fn build_drops_unknown_images_and_rejects_unknown_classes() {
    let c = build_corpus(
        dog_table(),
        vec![label("img1", "/m/0bt9lr", Presence::Positive), label("img2", "/m/0bt9lr", Presence::Positive)],
        vec![],
        vec![CaptionRecord { image_id: "img1".into(), caption: "a dog".into() }],
        vec![],
    )
    .unwrap();
    assert_eq!(c.dropped_records(), 1);
    assert!(c.labels("img2").is_empty());

    match build_corpus(dog_table(), vec![label("img1", "/m/zzz", Presence::Positive)], vec![], vec![], vec![]) {
        Err(CorpusError::MissingClasses(ids)) => assert_eq!(ids, vec!["/m/zzz".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn human_negative_overrides_machine_positive() {
    let mut machine = label("img1", "/m/01yrx", Presence::Positive);
    machine.verification = Verification::Machine;
    let c = build_corpus(
        dog_table(),
        vec![label("img1", "/m/0bt9lr", Presence::Positive), machine, label("img1", "/m/01yrx", Presence::Negative)],
        vec![],
        vec![],
        vec![],
    )
    .unwrap();
    assert_eq!(c.labeled_positives("img1").into_iter().collect::<Vec<_>>(), vec!["/m/0bt9lr".to_string()]);
    assert_eq!(c.verified_negatives("img1"), vec!["/m/01yrx".to_string()]);
}

#[test]
fn lexicon_parsing() {
    let l = build_lexicon("dog\tcat,wolf\n".as_bytes()).unwrap();
    assert_eq!(l.related("dog"), &["cat".to_string(), "wolf".to_string()]);
    let l = build_lexicon("dog\tdog,cat\n".as_bytes()).unwrap();
    assert_eq!(l.related("dog"), &["cat".to_string()]);
    assert!(build_lexicon("dog\tcat\ndog\twolf\n".as_bytes()).is_err());
    let bundled = Lexicon::bundled();
    for (noun, rel) in bundled.iter() {
        assert!(!rel.iter().any(|r| r == noun));
        assert!(!rel.is_empty());
    }
}

#[test]
fn noun_extraction() {
    let l = build_lexicon("dog\tcat\ngrass\tsand\n".as_bytes()).unwrap();
    assert_eq!(extract_nouns("A Dog on the grass", &l), vec![(1, "dog".to_string()), (4, "grass".to_string())]);
    assert_eq!(extract_nouns("Dog, grass.", &l).len(), 2);
    assert!(extract_nouns("nothing here", &l).is_empty());
    assert!(extract_nouns("", &l).is_empty());
}

#[test]
fn lexicon_relatives_must_resolve() {
    let lex = build_lexicon("dog\tunicorn\n".as_bytes()).unwrap();
    let c = build_corpus(dog_table(), vec![], vec![], vec![], vec![]).unwrap();
    assert!(matches!(c.clone().with_lexicon(lex), Err(CorpusError::UnknownRelatives(_))));
    let lex = build_lexicon("dog\tcat\n".as_bytes()).unwrap();
    assert!(c.with_lexicon(lex).is_ok());
}

fn synth(seed: u64, n: usize, hidden_rate: f64) -> Corpus {
    synth_corpus(&SynthCorpusConfig { seed, n_images: n, hidden_rate, image_size: 16, ..Default::default() }).unwrap()
}

#[test]
fn synth_exhaustive_labels_without_hidden_rate() {
    let c = synth(7, 20, 0.0);
    assert!(c.all_hidden_positives().is_empty());
    for id in c.image_ids() {
        let rendered: BTreeSet<String> = c.rendered(id).unwrap().iter().cloned().collect();
        assert_eq!(rendered, c.labeled_positives(id));
        assert!((1..=4).contains(&rendered.len()));
        assert_eq!(c.verified_negatives(id).len(), 2);
        for neg in c.verified_negatives(id) {
            assert!(!rendered.contains(&neg));
        }
    }
}

#[test]
fn synth_full_hidden_rate_labels_nothing() {
    let c = synth(3, 30, 1.0);
    for id in c.image_ids() {
        assert!(c.labeled_positives(id).is_empty());
        let hidden = c.hidden_positives(id).unwrap();
        assert_eq!(hidden.len(), c.rendered(id).unwrap().len());
        assert_eq!(c.captions(id)[0].caption, "a photo");
    }
}

#[test]
fn synth_captions_mention_only_labeled_objects() {
    let c = synth(11, 200, 0.3);
    let mut some_hidden = false;
    for id in c.image_ids() {
        let labeled: Vec<String> = c.labeled_positives(id).iter().map(|cl| c.display_name(cl).to_owned()).collect();
        let caption = &c.captions(id)[0].caption;
        for (_, noun) in extract_nouns(caption, &c.lexicon) {
            assert!(labeled.contains(&noun), "{caption} mentions {noun}");
        }
        if c.rendered(id).unwrap().len() > labeled.len() {
            some_hidden = true;
            for h in c.hidden_positives(id).unwrap() {
                assert!(!c.labeled_positives(id).contains(h));
            }
        }
    }
    assert!(some_hidden);
}

#[test]
fn synth_is_deterministic_and_round_trips() {
    let a = synth(5, 12, 0.3);
    let b = synth(5, 12, 0.3);
    assert_eq!(a, b);
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), synth(6, 12, 0.3).fingerprint());

    let dir = tempfile::tempdir().unwrap();
    let manifest = save_corpus(&a, dir.path()).unwrap();
    assert_eq!(manifest.counts.images, 12);
    let loaded = load_corpus(dir.path()).unwrap();
    assert_eq!(loaded, a);
}

#[test]
fn synth_config_errors() {
    let mut cfg = SynthCorpusConfig { n_images: 1, ..Default::default() };
    cfg.vocab.objects.truncate(3);
    assert!(matches!(synth_corpus(&cfg), Err(CorpusError::Config(_))));
    let cfg = SynthCorpusConfig { grid: (1, 2), ..Default::default() };
    assert!(synth_corpus(&cfg).is_err());
    let cfg = SynthCorpusConfig { hidden_rate: 1.5, ..Default::default() };
    assert!(synth_corpus(&cfg).is_err());
}

#[test]
fn pixels_stay_in_unit_range() {
    let c = synth(1, 10, 0.0);
    for img in c.images() {
        assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(img.pixels.len(), 16 * 16 * 3);
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn serialize_then_load_is_identity(seed in 0u64..1000, n in 1usize..8, rate in 0.0f64..1.0) {
            let c = synth(seed, n, rate);
            let dir = tempfile::tempdir().unwrap();
            save_corpus(&c, dir.path()).unwrap();
            prop_assert_eq!(load_corpus(dir.path()).unwrap(), c);
        }

        #[test]
        fn label_parsing_is_pure(rows in proptest::collection::vec(("[a-z0-9]{1,6}", "[a-z-]{0,12}", "/m/[a-z]{1,4}", 0u8..2), 0..20)) {
            let text: String = rows
                .iter()
                .map(|(i, s, c, conf)| format!("{i},{s},{c},{conf}\n"))
                .collect();
            let a = parse_image_labels(text.as_bytes()).unwrap();
            let b = parse_image_labels(text.as_bytes()).unwrap();
            prop_assert_eq!(a.len(), rows.len());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn lexicon_has_no_self_reference(rows in proptest::collection::btree_map("[a-c]{1,2}", proptest::collection::vec("[a-c]{1,2}", 0..4), 0..6)) {
            let text: String = rows
                .iter()
                .map(|(k, v)| format!("{k}\t{}\n", v.join(",")))
                .collect();
            let lex = build_lexicon(text.as_bytes()).unwrap();
            for (noun, rel) in lex.iter() {
                prop_assert!(!rel.iter().any(|r| r == noun));
            }
        }
    }
}
