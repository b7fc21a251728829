use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::RngCore;

use super::cm::{apply_spans, completion_split, draw_spans};
use super::oa::join_objects;
use super::*;
use crate::corpus::{
    build_corpus, parse_box_labels, parse_class_descriptions, parse_image_labels, synth_corpus, CaptionRecord, Corpus,
    Lexicon, SynthCorpusConfig,
};

/// Emits the same word forever: 0 picks the first option and every coin
/// lands below any threshold; `u64::MAX` does the opposite.
struct ConstRng(u64);

impl RngCore for ConstRng {
    fn next_u32(&mut self) -> u32 {
        self.0 as u32
    }
    fn next_u64(&mut self) -> u64 {
        self.0
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for (i, b) in dst.iter_mut().enumerate() {
            *b = self.0.to_le_bytes()[i % 8];
        }
    }
}

fn low() -> ConstRng {
    ConstRng(0)
}

fn high() -> ConstRng {
    ConstRng(u64::MAX)
}

fn rec(image_id: &str, caption: &str) -> CaptionRecord {
    CaptionRecord { image_id: image_id.into(), caption: caption.into() }
}

/// img1: dog (human), car (box only), cat verified absent.
/// img2: cat, no verified negatives.
fn fixture() -> Corpus {
    let classes = parse_class_descriptions("/m/dog,Dog\n/m/cat,Cat\n/m/car,Car\n/m/wolf,Wolf\n".as_bytes()).unwrap();
    let labels = parse_image_labels(
        "img1,verification,/m/dog,1\nimg1,verification,/m/cat,0\nimg2,machine,/m/cat,1\n".as_bytes(),
    )
    .unwrap();
    let boxes = parse_box_labels("img1,/m/car,0.1,0.5,0.1,0.5\n".as_bytes()).unwrap();
    let captions = vec![rec("img1", "A dog on grass"), rec("img2", "a cat near a car")];
    build_corpus(classes, labels, boxes, captions, vec![]).unwrap().with_lexicon(Lexicon::bundled()).unwrap()
}

fn synth(n: usize, hidden_rate: f64) -> Corpus {
    synth_corpus(&SynthCorpusConfig { seed: 3, n_images: n, hidden_rate, ..Default::default() }).unwrap()
}

fn hard() -> SynthConfig {
    SynthConfig { policy: NegativePolicy::Hard, ..Default::default() }
}

fn class_of(corpus: &Corpus, name: &str) -> String {
    corpus
        .classes
        .entries()
        .iter()
        .find(|e| e.display_name == name)
        .unwrap_or_else(|| panic!("no class named {name}"))
        .class_id
        .clone()
}

#[test]
fn kinds_and_policies() {
    assert_eq!(TaskKind::ALL.len(), 8);
    for k in TaskKind::ALL {
        assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
        assert_ne!(TaskKind::CM.contains(&k), TaskKind::OA.contains(&k));
    }
    assert_eq!(serde_json::to_string(&TaskKind::OaAndOr).unwrap(), "\"oa_andor\"");
    assert_eq!("hard".parse::<NegativePolicy>().unwrap(), NegativePolicy::Hard);
    assert!("medium".parse::<NegativePolicy>().is_err());
}

#[test]
fn config_validation() {
    assert!(SynthConfig::default().validate().is_ok());
    let bad = [
        SynthConfig { mlm_mask_rate: 0.0, ..Default::default() },
        SynthConfig { yes_no_balance: 1.0, ..Default::default() },
        SynthConfig { completion_split: (0.8, 0.2), ..Default::default() },
        SynthConfig { andor_k: vec![], ..Default::default() },
        SynthConfig { andor_k: vec![2, 4], ..Default::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(SynthError::Config(_))), "{cfg:?}");
    }
}

#[test]
fn caption_task() {
    let ex = synth_caption(&rec("img1", "a dog on grass")).unwrap();
    assert_eq!((ex.prompt.as_str(), ex.target.as_str()), ("describe the image.", "a dog on grass"));
    assert_eq!(synth_caption(&rec("i", "A  Dog ON Grass")).unwrap().target, "a dog on grass");
    assert_eq!(synth_caption(&rec("i", "a cat")).unwrap().target, "a cat");
}

#[test]
fn completion_task() {
    assert_eq!(completion_split(5, 0.4), 2);
    assert_eq!(completion_split(4, 0.0), 1);
    assert_eq!(completion_split(4, 1.0), 3);

    // f pinned at 0.4 by a degenerate range
    let cfg = SynthConfig { completion_split: (0.4, 0.4), ..Default::default() };
    let ex = synth_completion(&rec("i", "a dog on the grass"), &cfg, &mut low()).unwrap();
    assert_eq!(ex.prompt, "complete: a dog");
    assert_eq!(ex.target, "on the grass");
    assert!(synth_completion(&rec("i", "a dog here"), &cfg, &mut low()).is_none());

    for r in [low(), high()] {
        let mut r = r;
        let ex = synth_completion(&rec("i", "one two three four"), &SynthConfig::default(), &mut r).unwrap();
        assert!(ex.prompt.len() > COMPLETION_PREFIX.len() && !ex.target.is_empty());
    }
}

#[test]
fn mlm_spans() {
    let toks = ["a", "dog", "on", "the", "grass"];
    assert_eq!(apply_spans(&toks, &[(1, 1)]), ("a <extra_0> on the grass".to_owned(), "<extra_0> dog".to_owned()));
    assert_eq!(
        apply_spans(&toks, &[(0, 1), (2, 2)]),
        ("<extra_0> dog <extra_1> grass".to_owned(), "<extra_0> a <extra_1> on the".to_owned())
    );

    let cfg = SynthConfig { mlm_mask_rate: 1e-9, ..Default::default() };
    let ex = synth_mlm(&rec("i", "a dog on the grass"), &cfg, &mut high()).unwrap();
    assert!(ex.target.starts_with("<extra_0> "));
    assert!(synth_mlm(&rec("i", "a dog"), &cfg, &mut low()).is_none());
}

/// Rebuilds the caption from an MLM prompt and target.
fn uncorrupt(prompt: &str, target: &str) -> String {
    let mut fills: Vec<Vec<&str>> = Vec::new();
    for tok in target.split(' ') {
        if tok.starts_with("<extra_") {
            fills.push(Vec::new());
        } else {
            fills.last_mut().unwrap().push(tok);
        }
    }
    let mut out = Vec::new();
    let mut k = 0;
    for tok in prompt.split(' ') {
        if tok == sentinel(k) {
            out.extend(&fills[k]);
            k += 1;
        } else {
            out.push(tok);
        }
    }
    assert_eq!(k, fills.len());
    out.join(" ")
}

proptest! {
    #[test]
    fn mlm_spans_are_valid(n in 4usize..40, seed in any::<u64>(), rate in 0.01f64..0.6, span in 1.0f64..5.0) {
        let cfg = SynthConfig { mlm_mask_rate: rate, mlm_mean_span: span, ..Default::default() };
        let mut rng = example_rng(seed, TaskKind::Mlm, "x", 0);
        let spans = draw_spans(n, &cfg, &mut rng);
        prop_assert!(!spans.is_empty() && spans.len() <= MAX_SENTINELS);
        let masked: usize = spans.iter().map(|s| s.1).sum();
        prop_assert!(masked >= 1 && masked < n);
        prop_assert!(masked <= ((n as f64 * rate).round() as usize).max(1));
        for w in spans.windows(2) {
            prop_assert!(w[0].0 + w[0].1 < w[1].0, "spans touch: {:?}", spans);
        }

        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let caption = words.join(" ");
        let ex = synth_mlm(&rec("i", &caption), &cfg, &mut example_rng(seed, TaskKind::Mlm, "x", 0)).unwrap();
        prop_assert_eq!(uncorrupt(&ex.prompt, &ex.target), caption);
    }

    #[test]
    fn completion_sides_non_empty(n in 4usize..30, f in 0.0f64..=1.0) {
        let s = completion_split(n, f);
        prop_assert!(s >= 1 && s < n);
    }
}

#[test]
fn hard_negative_caption() {
    let lex = Lexicon::bundled();
    let h = make_hard_negative_caption("a dog on grass", &lex, &mut low()).unwrap();
    assert_eq!(h.caption, "a cat on grass");
    assert_eq!((h.replaced_noun.as_str(), h.replacement.as_str()), ("dog", "cat"));
    let h = make_hard_negative_caption("a dog on grass", &lex, &mut high()).unwrap();
    assert_eq!(h.caption, "a wolf on grass");

    assert_eq!(make_hard_negative_caption("hello world", &lex, &mut low()), Err(SynthError::NoNounFound));
    for r in [low(), high()] {
        let mut r = r;
        assert_eq!(make_hard_negative_caption("a cup", &lex, &mut r).unwrap().caption, "a bottle");
    }
    let h = make_hard_negative_caption("see the cup.", &lex, &mut low()).unwrap();
    assert_eq!(h.caption, "see the bottle.");
}

#[test]
fn itm_branches() {
    let c = fixture();
    let cfg = SynthConfig::default();
    let r1 = &c.captions("img1")[0];

    let yes = synth_itm(r1, &c, &c.lexicon, &cfg, &mut low()).unwrap().unwrap();
    assert_eq!(yes.prompt, "does this text match the image? a dog on grass");
    assert_eq!(yes.target, "yes");

    let easy = synth_itm(r1, &c, &c.lexicon, &cfg, &mut high()).unwrap().unwrap();
    assert_eq!(easy.prompt, "does this text match the image? a cat near a car");
    assert_eq!(easy.target, "no");
    assert_eq!(easy.meta.source_image.as_deref(), Some("img2"));
    assert_eq!(easy.meta.policy, Some(NegativePolicy::Easy));

    let h = synth_itm(r1, &c, &c.lexicon, &hard(), &mut high()).unwrap().unwrap();
    assert_eq!(h.prompt, "does this text match the image? a wolf on grass");
    assert_eq!(h.meta.replaced_noun.as_deref(), Some("dog"));
    assert!(!h.meta.fallback);

    let plain = rec("img1", "something green");
    let fb = synth_itm(&plain, &c, &c.lexicon, &hard(), &mut high()).unwrap().unwrap();
    assert!(fb.meta.fallback);
    assert_eq!(fb.meta.policy, Some(NegativePolicy::Easy));
    assert_eq!(fb.target, "no");

    let lonely = build_corpus(c.classes.clone(), vec![], vec![], vec![rec("img1", "a dog")], vec![]).unwrap();
    assert!(matches!(
        synth_itm(&lonely.captions("img1")[0], &lonely, &Lexicon::default(), &cfg, &mut high()),
        Err(SynthError::PolicyUnavailable { .. })
    ));
}

#[test]
fn oa_list_task() {
    let c = fixture();
    let ex = synth_oa_list("img1", &c, &SynthConfig::default()).unwrap();
    assert_eq!((ex.prompt.as_str(), ex.target.as_str()), ("list all objects", "car, dog"));
    let labels_only = SynthConfig { object_source: crate::corpus::ObjectSource::Labels, ..Default::default() };
    assert_eq!(synth_oa_list("img1", &c, &labels_only).unwrap().target, "dog");
    assert_eq!(synth_oa_list("img2", &c, &labels_only).unwrap().target, "cat");
    let empty = build_corpus(c.classes.clone(), vec![], vec![], vec![rec("img9", "x")], vec![]).unwrap();
    assert!(synth_oa_list("img9", &empty, &SynthConfig::default()).is_none());
}

#[test]
fn oa_exists_task() {
    let c = fixture();
    let ex = synth_oa_exists("img1", &c, &SynthConfig::default(), &mut low()).unwrap().unwrap();
    assert_eq!((ex.prompt.as_str(), ex.target.as_str()), ("does car exist?", "yes"));
    let ex = synth_oa_exists("img1", &c, &hard(), &mut high()).unwrap().unwrap();
    assert_eq!((ex.prompt.as_str(), ex.target.as_str()), ("does cat exist?", "no"));
    assert!(matches!(
        synth_oa_exists("img2", &c, &hard(), &mut low()),
        Err(SynthError::PolicyUnavailable { kind: TaskKind::OaExists, .. })
    ));
}

#[test]
fn oa_prompt_lists() {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    assert_eq!(join_objects(&s(&["dog", "cat"]), "or"), "dog or cat");
    assert_eq!(join_objects(&s(&["a", "b", "c"]), "and"), "a, b and c");
}

#[test]
fn oa_which_and_andor_on_fixture() {
    let c = fixture();
    let ex = synth_oa_which("img1", &c, &SynthConfig::default(), &mut low()).unwrap().unwrap();
    let cands = ex.meta.candidate_objects.clone().unwrap();
    assert_eq!(cands.len(), 3);
    assert!(!ex.target.is_empty());
    // Hard on img1 has one negative (cat) and two positives.
    let ex = synth_oa_which("img1", &c, &hard(), &mut high()).unwrap().unwrap();
    assert!(ex.prompt.contains("cat"));
    assert_eq!(ex.target.split(", ").count(), 2);

    for r in [low(), high()] {
        let mut r = r;
        let ex = synth_oa_andor("img1", &c, &SynthConfig::default(), &mut r).unwrap().unwrap();
        assert!(ex.target == "yes" || ex.target == "no");
    }
}

/// Recomputes a yes/no target by brute force from the corpus labels.
fn andor_oracle(c: &Corpus, ex: &TaskExample) -> &'static str {
    let pos = c.positives(&ex.image_id, Default::default());
    let present: Vec<bool> =
        ex.meta.candidate_objects.as_ref().unwrap().iter().map(|n| pos.contains(&class_of(c, n))).collect();
    let yes = match ex.meta.connective.as_deref().unwrap() {
        "and" => present.iter().all(|&p| p),
        "or" => present.iter().any(|&p| p),
        other => panic!("connective {other}"),
    };
    if yes {
        "yes"
    } else {
        "no"
    }
}

#[test]
fn andor_truth_table_oracle() {
    let c = synth(120, 0.0);
    for policy in [NegativePolicy::Easy, NegativePolicy::Hard] {
        let cfg = SynthConfig { policy, seed: 9, ..Default::default() };
        let out = synth_dataset(&c, &[TaskKind::OaAndOr], 1500, &cfg).unwrap();
        let mut conn = BTreeSet::new();
        let mut ks = BTreeSet::new();
        let mut yes = 0;
        for ex in &out.examples {
            assert_eq!(ex.target, andor_oracle(&c, ex), "{ex:?}");
            let names = ex.meta.candidate_objects.as_ref().unwrap();
            let distinct: BTreeSet<_> = names.iter().collect();
            assert_eq!(distinct.len(), names.len());
            conn.insert(ex.meta.connective.clone().unwrap());
            ks.insert(names.len());
            yes += (ex.target == "yes") as usize;
        }
        assert_eq!(conn.len(), 2);
        assert_eq!(ks, BTreeSet::from([2, 3]));
        let frac = yes as f64 / out.examples.len() as f64;
        assert!((0.35..0.65).contains(&frac), "{policy}: yes fraction {frac}");
    }
}

#[test]
fn which_intersection_oracle() {
    let c = synth(120, 0.0);
    for policy in [NegativePolicy::Easy, NegativePolicy::Hard] {
        let cfg = SynthConfig { policy, ..Default::default() };
        let out = synth_dataset(&c, &[TaskKind::OaWhich], 800, &cfg).unwrap();
        for ex in &out.examples {
            let pos = c.positives(&ex.image_id, Default::default());
            let cands = ex.meta.candidate_objects.as_ref().unwrap();
            let expect: Vec<&str> =
                cands.iter().filter(|n| pos.contains(&class_of(&c, n))).map(String::as_str).collect();
            assert!(!expect.is_empty() && expect.len() < 3);
            assert_eq!(ex.target, expect.join(", "));
            assert_eq!(ex.prompt, format!("which of {} exist?", join_objects(cands, "and")));
        }
    }
}

#[test]
fn exists_balance_over_ten_thousand() {
    let c = synth(200, 0.0);
    let cfg = SynthConfig { seed: 1, ..Default::default() };
    let out = synth_dataset(&c, &[TaskKind::OaExists], 10_000, &cfg).unwrap();
    let yes = out.examples.iter().filter(|e| e.target == "yes").count();
    let frac = yes as f64 / 10_000.0;
    assert!((frac - 0.5).abs() <= 0.02, "yes fraction {frac}");

    let skewed = SynthConfig { yes_no_balance: 0.3, ..cfg };
    let out = synth_dataset(&c, &[TaskKind::OaExists], 10_000, &skewed).unwrap();
    let frac = out.examples.iter().filter(|e| e.target == "yes").count() as f64 / 10_000.0;
    assert!((frac - 0.3).abs() <= 0.02, "yes fraction {frac}");
}

#[test]
fn distractors_respect_policy() {
    let c = synth(100, 0.0);
    for policy in [NegativePolicy::Easy, NegativePolicy::Hard] {
        let cfg = SynthConfig { policy, ..Default::default() };
        let out = synth_dataset(&c, &[TaskKind::OaExists], 2000, &cfg).unwrap();
        for ex in out.examples.iter().filter(|e| e.target == "no") {
            let class = class_of(&c, &ex.meta.candidate_objects.as_ref().unwrap()[0]);
            assert!(!c.labeled_positives(&ex.image_id).contains(&class));
            if policy == NegativePolicy::Hard {
                assert!(c.verified_negatives(&ex.image_id).contains(&class));
            }
        }
    }
}

#[test]
fn hard_itm_validity() {
    let c = synth(100, 0.0);
    let out = synth_dataset(&c, &[TaskKind::Itm], 1000, &hard()).unwrap();
    let mut negatives = 0;
    for ex in &out.examples {
        let original = ex.meta.source_caption.as_ref().unwrap();
        let shown = ex.prompt.strip_prefix(ITM_PREFIX).unwrap();
        if ex.target == "yes" {
            assert_eq!(shown, original);
            continue;
        }
        negatives += 1;
        assert!(!ex.meta.fallback, "template captions always carry a noun");
        let noun = ex.meta.replaced_noun.as_ref().unwrap();
        let rep = ex.meta.replacement.as_ref().unwrap();
        assert!(c.lexicon.related(noun).contains(rep) && rep != noun);
        let a: Vec<&str> = original.split(' ').collect();
        let b: Vec<&str> = shown.split(' ').collect();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
    }
    assert!(negatives > 300);
    assert_eq!(out.manifest.fallbacks.get(&TaskKind::Itm), None);
}

#[test]
fn hidden_objects_never_in_targets() {
    let c = synth(150, 0.4);
    assert!(c.all_hidden_positives().values().map(|s| s.len()).sum::<usize>() > 20);
    for policy in [NegativePolicy::Easy, NegativePolicy::Hard] {
        let cfg = SynthConfig { policy, ..Default::default() };
        let out = synth_dataset(&c, &TaskKind::ALL, 300, &cfg).unwrap();
        for ex in &out.examples {
            let Some(hidden) = c.hidden_positives(&ex.image_id) else { continue };
            let hidden: BTreeSet<&str> = hidden.iter().map(|h| c.display_name(h)).collect();
            let words: BTreeSet<&str> = ex.target.split([' ', ',']).filter(|w| !w.is_empty()).collect();
            assert!(hidden.is_disjoint(&words), "{ex:?} leaks {hidden:?}");
            if ex.kind == TaskKind::OaExists && ex.target == "yes" {
                let n = &ex.meta.candidate_objects.as_ref().unwrap()[0];
                assert!(!hidden.contains(n.as_str()));
            }
        }
    }
}

#[test]
fn dataset_cycles_images_in_order() {
    let c = fixture();
    let out = synth_dataset(&c, &[TaskKind::OaExists], 4, &SynthConfig::default()).unwrap();
    let ids: Vec<&str> = out.examples.iter().map(|e| e.image_id.as_str()).collect();
    assert_eq!(ids, ["img1", "img2", "img1", "img2"]);

    // img2 has no verified negatives, so Hard hands its slots to img1
    let out = synth_dataset(&c, &[TaskKind::OaExists], 3, &hard()).unwrap();
    assert!(out.examples.iter().all(|e| e.image_id == "img1"));
    assert_eq!(out.manifest.unavailable[&TaskKind::OaExists], 2);
}

#[test]
fn dataset_errors_name_the_kind() {
    let c = fixture();
    let bare = build_corpus(c.classes.clone(), c.all_labels().cloned().collect(), vec![], vec![], vec![]).unwrap();
    assert_eq!(
        synth_dataset(&bare, &[TaskKind::OaList, TaskKind::Caption], 2, &SynthConfig::default()),
        Err(SynthError::Synthesis(TaskKind::Caption))
    );
    let no_neg = build_corpus(
        c.classes.clone(),
        parse_image_labels("img2,machine,/m/cat,1\n".as_bytes()).unwrap(),
        vec![],
        vec![rec("img2", "a cat")],
        vec![],
    )
    .unwrap();
    assert_eq!(synth_dataset(&no_neg, &[TaskKind::OaWhich], 1, &hard()), Err(SynthError::Synthesis(TaskKind::OaWhich)));
}

#[test]
fn dataset_is_deterministic_and_order_independent() {
    let c = synth(40, 0.2);
    let cfg = SynthConfig { seed: 5, ..Default::default() };
    let a = synth_dataset(&c, &TaskKind::ALL, 50, &cfg).unwrap();
    let mut rev = TaskKind::ALL;
    rev.reverse();
    let b = synth_dataset(&c, &rev, 50, &cfg).unwrap();
    for k in TaskKind::ALL {
        assert!(a.of_kind(k).eq(b.of_kind(k)));
        assert_eq!(a.of_kind(k).count(), 50);
    }
    let other = synth_dataset(&c, &TaskKind::ALL, 50, &SynthConfig { seed: 6, ..cfg.clone() }).unwrap();
    assert_ne!(a.examples, other.examples);

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let f1 = write_task_files(d1.path(), &a).unwrap();
    write_task_files(d2.path(), &synth_dataset(&c, &TaskKind::ALL, 50, &cfg).unwrap()).unwrap();
    assert_eq!(f1.len(), 9);
    for p in &f1 {
        let name = p.file_name().unwrap();
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(d2.path().join(name)).unwrap());
    }
    let back = read_jsonl(&d1.path().join("oa_which.easy.jsonl")).unwrap();
    assert!(back.iter().eq(a.of_kind(TaskKind::OaWhich)));
    let manifest: SynthManifest =
        serde_json::from_slice(&std::fs::read(d1.path().join("synth_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest, a.manifest);
}

#[test]
fn example_json_shape() {
    let ex = synth_caption(&rec("img1", "a dog")).unwrap();
    assert_eq!(
        serde_json::to_string(&ex).unwrap(),
        r#"{"image_id":"img1","kind":"caption","prompt":"describe the image.","target":"a dog","meta":{}}"#
    );
}
