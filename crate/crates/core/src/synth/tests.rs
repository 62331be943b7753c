use super::*;
use crate::oracle::collapse;

fn small_config() -> SynthConfig {
    SynthConfig {
        source_train: 60,
        accent_train: 10,
        source_test: 12,
        accent_test: 8,
        num_accents: 3,
        ..SynthConfig::default()
    }
}

/// Nearest-mean frame labels, collapsed with silence as blank.
fn oracle_decode(emissions: &Emissions, spec: &DomainSpec, utt: &Utterance) -> Vec<usize> {
    let path: Vec<usize> = (0..utt.features.rows())
        .map(|r| emissions.nearest(utt.features.row(r), &spec.accent_shift))
        .collect();
    collapse(&path)
}

fn oracle_cer(emissions: &Emissions, spec: &DomainSpec, utts: &[Utterance]) -> f64 {
    let (mut edits, mut total) = (0, 0);
    for u in utts {
        let hyp = oracle_decode(emissions, spec, u);
        edits += crate::eval::levenshtein(&u.labels, &hyp);
        total += u.labels.len();
    }
    edits as f64 / total as f64
}

#[test]
fn noiseless_source_frames_equal_means_and_decode_exactly() {
    let emissions = Emissions::random(10, 8, 1.0, 7);
    let spec = DomainSpec::source(8, 0.0);
    let utts = generate_domain(&spec, &emissions, 200, 3, 0).unwrap();
    for u in &utts {
        for r in 0..u.features.rows() {
            let k = emissions.nearest(u.features.row(r), &spec.accent_shift);
            assert_eq!(u.features.row(r), emissions.means[k].as_slice());
        }
        assert_eq!(oracle_decode(&emissions, &spec, u), u.labels);
    }
    assert_eq!(oracle_cer(&emissions, &spec, &utts), 0.0);
}

#[test]
fn utterances_satisfy_length_invariants() {
    let cfg = small_config();
    let corpus = Corpus::generate(&cfg).unwrap();
    let all = corpus
        .source_train
        .iter()
        .chain(&corpus.accent_train)
        .chain(corpus.accent_test.iter().flat_map(|(_, u)| u));
    for u in all {
        assert!((MIN_LABELS..=MAX_LABELS).contains(&u.labels.len()));
        assert!(u.features.rows() >= 2 * u.labels.len() + 1, "{}", u.id);
        assert!(u.labels.iter().all(|&s| (1..=cfg.num_symbols).contains(&s)));
    }
}

#[test]
fn generation_is_deterministic_and_order_independent() {
    let emissions = Emissions::random(10, 8, 1.0, 1);
    let spec = small_config().accent_specs()[0].clone();
    let a = generate_domain(&spec, &emissions, 30, 9, 0).unwrap();
    let b = generate_domain(&spec, &emissions, 30, 9, 0).unwrap();
    assert_eq!(a, b);
    let tail = generate_domain(&spec, &emissions, 10, 9, 20).unwrap();
    assert_eq!(&a[20..], tail.as_slice());
    let other = generate_domain(&spec, &emissions, 30, 10, 0).unwrap();
    assert_ne!(a, other);
}

#[test]
fn swap_frequency_matches_probability() {
    let emissions = Emissions::random(2, 4, 1.0, 5);
    let spec = DomainSpec {
        domain_id: "A1".into(),
        accent_shift: vec![0.0; 4],
        confusion_pairs: vec![ConfusionPair { from: 1, to: 2, prob: 0.3 }],
        duration_scale: 1.0,
        noise_std: 0.0,
    };
    let rendered = render_domain(&spec, &emissions, 6000, 11, 0).unwrap();
    let (mut segments, mut swapped) = (0usize, 0usize);
    for (utt, spoken) in &rendered {
        for (&l, &s) in utt.labels.iter().zip(spoken) {
            if l == 1 {
                segments += 1;
                swapped += usize::from(s == 2);
            } else {
                assert_eq!(s, l);
            }
        }
    }
    assert!(segments >= 10_000, "{segments}");
    let freq = swapped as f64 / segments as f64;
    assert!((freq - 0.3).abs() <= 0.03, "{freq}");
}

#[test]
fn invalid_specs_are_rejected() {
    let emissions = Emissions::random(3, 4, 1.0, 5);
    let mut spec = DomainSpec::source(4, 0.1);
    spec.duration_scale = 1.5;
    assert!(matches!(
        generate_domain(&spec, &emissions, 1, 0, 0),
        Err(SynthError::InvalidSpec { .. })
    ));
    let mut spec = DomainSpec::source(4, 0.1);
    spec.domain_id = "A1".into();
    spec.confusion_pairs.push(ConfusionPair { from: 1, to: 2, prob: 0.6 });
    assert!(generate_domain(&spec, &emissions, 1, 0, 0).is_err());
    spec.confusion_pairs[0] = ConfusionPair { from: 1, to: 9, prob: 0.2 };
    assert!(matches!(
        generate_domain(&spec, &emissions, 1, 0, 0),
        Err(SynthError::MissingEmission(9))
    ));
    assert!(matches!(
        generate_domain(&DomainSpec::source(4, 0.1), &emissions, 0, 0, 0),
        Err(SynthError::EmptyCount)
    ));
}

#[test]
fn accent_plus_mixes_equal_source_count() {
    let cfg = SynthConfig {
        source_train: 1500,
        accent_train: 100,
        num_accents: 10,
        source_test: 5,
        accent_test: 5,
        ..SynthConfig::default()
    };
    let p = build_partitions(Recipe::AccentPlus, &cfg, 4).unwrap();
    let source = p.train.iter().filter(|u| u.domain_id == SOURCE_DOMAIN).count();
    let accent = p.train.len() - source;
    assert_eq!(accent, 1000);
    assert_eq!(source, 1000);
}

#[test]
fn recipes_select_expected_domains() {
    let cfg = small_config();
    let corpus = Corpus::generate(&cfg).unwrap();
    let m = corpus.partition(Recipe::Mandarin, 0).unwrap();
    assert!(m.train.iter().all(|u| u.domain_id == SOURCE_DOMAIN));
    assert_eq!(m.train.len(), cfg.source_train);
    let all = corpus.partition(Recipe::All, 0).unwrap();
    assert_eq!(all.train.len(), cfg.source_train + cfg.num_accents * cfg.accent_train);
    let acc = corpus.partition(Recipe::Accent, 0).unwrap();
    assert!(acc.train.iter().all(|u| u.domain_id != SOURCE_DOMAIN));
    for recipe in [Recipe::Mandarin, Recipe::All, Recipe::Accent, Recipe::AccentPlus] {
        let p = corpus.partition(recipe, 1).unwrap();
        assert!(p.train_ids_disjoint_from_test(), "{}", recipe.name());
        assert_eq!(p.test_source, m.test_source);
        assert_eq!(p.test_accent.len(), cfg.num_accents);
    }
    assert!(matches!("Dialect".parse::<Recipe>(), Err(SynthError::UnknownRecipe(_))));
    assert_eq!("Accent+".parse::<Recipe>().unwrap(), Recipe::AccentPlus);
}

#[test]
fn accent_plus_tops_up_short_source() {
    let cfg = SynthConfig {
        source_train: 5,
        accent_train: 4,
        num_accents: 2,
        source_test: 2,
        accent_test: 2,
        ..SynthConfig::default()
    };
    let corpus = Corpus::generate(&cfg).unwrap();
    assert_eq!(corpus.source_extra.len(), 3);
    let p = corpus.partition(Recipe::AccentPlus, 0).unwrap();
    let source: Vec<_> = p.train.iter().filter(|u| u.domain_id == "G").collect();
    assert_eq!(source.len(), 8);
    let ids: std::collections::BTreeSet<_> = source.iter().map(|u| u.id.clone()).collect();
    assert_eq!(ids.len(), 8);
    for u in &corpus.source_train {
        assert!(ids.contains(&u.id));
    }
    assert!(p.train_ids_disjoint_from_test());

    let roomy = Corpus::generate(&SynthConfig { source_train: 20, ..cfg }).unwrap();
    assert!(roomy.source_extra.is_empty());
}

#[test]
fn default_accents_differ_from_source() {
    let specs = SynthConfig::default().accent_specs();
    assert_eq!(specs.len(), 11);
    for (k, s) in specs.iter().enumerate() {
        assert_eq!(s.domain_id, format!("A{}", k + 1));
        assert!(s.accent_shift.iter().any(|&v| v != 0.0));
        assert_eq!(s.confusion_pairs.len(), 2);
        s.validate(8).unwrap();
    }
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let p = build_partitions(Recipe::AccentPlus, &small_config(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.txt");
    let meta = serde_json::json!({"seed": 2022});
    write_dataset(&p, Some(&meta), &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, p);
    let (_, m) = decode_dataset(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(m, meta);
}

#[test]
fn truncated_dataset_is_a_parse_error() {
    let p = build_partitions(Recipe::Accent, &small_config(), 2).unwrap();
    let text = encode_dataset(&p, None);
    let cut = &text[..text.len() / 2];
    let cut = &cut[..cut.rfind('\n').unwrap() + 1];
    match decode_dataset(cut) {
        Err(DatasetError::Parse { line, .. }) => assert!(line > 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn altered_dataset_fails_checksum() {
    let p = build_partitions(Recipe::Accent, &small_config(), 2).unwrap();
    let text = encode_dataset(&p, None);
    let tampered = text.replacen("utt A1-000000 A1", "utt A1-999999 A1", 1);
    assert_ne!(tampered, text);
    assert!(matches!(decode_dataset(&tampered), Err(DatasetError::Integrity { .. })));
}

#[test]
fn oracle_cer_degrades_with_noise_and_swaps() {
    let emissions = Emissions::random(10, 8, 1.0, 2022);
    let mut prev = 0.0;
    for noise in [0.0, 0.3, 0.6, 0.9] {
        let spec = DomainSpec::source(8, noise);
        let utts = generate_domain(&spec, &emissions, 10_000, 17, 0).unwrap();
        let c = oracle_cer(&emissions, &spec, &utts);
        assert!(c >= prev - 0.005, "noise {noise}: {c} < {prev}");
        prev = c;
    }
    let mut prev = 0.0;
    for prob in [0.0, 0.1, 0.3, 0.5] {
        let spec = DomainSpec {
            domain_id: "A1".into(),
            accent_shift: vec![0.0; 8],
            confusion_pairs: vec![
                ConfusionPair { from: 1, to: 2, prob },
                ConfusionPair { from: 3, to: 4, prob },
            ],
            duration_scale: 1.0,
            noise_std: 0.3,
        };
        let utts = generate_domain(&spec, &emissions, 10_000, 17, 0).unwrap();
        let c = oracle_cer(&emissions, &spec, &utts);
        assert!(c >= prev - 0.005, "swap {prob}: {c} < {prev}");
        prev = c;
    }
    assert!(prev > 0.05);
}
