use accent_core::config::ExperimentConfig;
use accent_core::eval::{render_report, run_experiment, ExperimentReport, ReportFormat, ReportRow, RowKind, COLUMNS};
use accent_core::synth::Recipe;
use accent_core::trainer::Method;

fn row(method: RowKind, data: Recipe, src: f64, acc: f64, reference: (f64, f64)) -> ReportRow {
    ReportRow {
        method,
        data,
        cer_source: src,
        cer_accent: acc,
        per_domain: vec![("A1".into(), acc)],
        delta_source_pct: (reference.0 - src) / reference.0 * 100.0,
        delta_accent_pct: (reference.1 - acc) / reference.1 * 100.0,
        wall_s: None,
        trainable_fraction: 0.5,
        steps: 10,
    }
}

fn sample() -> ExperimentReport {
    let r = (0.08, 0.20);
    ExperimentReport {
        seed: 1,
        reference: "Baseline-2".into(),
        rows: vec![
            row(RowKind::Expansion(Method::MamlFmp), Recipe::Accent, 0.084, 0.18, r),
            row(RowKind::Baseline2, Recipe::All, 0.08, 0.20, r),
            row(RowKind::Expansion(Method::FT), Recipe::Accent, 0.09, 0.19, r),
            row(RowKind::Baseline1, Recipe::Mandarin, 0.075, 0.30, r),
        ],
    }
}

#[test]
fn csv_has_fixed_columns_and_sorted_rows() {
    let text = render_report(&sample(), ReportFormat::Csv);
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, COLUMNS);
    let recs: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    let methods: Vec<&str> = recs.iter().map(|r| &r[0]).collect();
    assert_eq!(methods, ["Baseline-1", "Baseline-2", "FT", "MAML_FMP"]);
    // FT: (0.08 - 0.09) / 0.08 = -12.5%, (0.20 - 0.19) / 0.20 = 5%
    assert_eq!(&recs[2][4], "-12.50");
    assert_eq!(&recs[2][5], "5.00");
    // MAML_FMP: (0.08 - 0.084) / 0.08 = -5%, (0.20 - 0.18) / 0.20 = 10%
    assert_eq!(&recs[3][4], "-5.00");
    assert_eq!(&recs[3][5], "10.00");
    assert_eq!(&recs[1][4], "0.00");
    assert_eq!(&recs[0][6], "-");
    assert_eq!(&recs[0][7], "50.00");
}

#[test]
fn json_round_trips() {
    let report = sample();
    let text = render_report(&report, ReportFormat::Json);
    let back: ExperimentReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.rows.len(), 4);
    for r in &report.rows {
        assert_eq!(back.row(r.method, r.data), Some(r));
    }
    assert!(text.contains("\"Baseline-1\"") && text.contains("\"MAML_FMP\""));
}

#[test]
fn table_lists_every_row_and_reference() {
    let text = render_report(&sample(), ReportFormat::Table);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("Method"));
    assert_eq!(lines.len(), 2 + 4 + 1);
    assert!(lines[2].starts_with("Baseline-1"));
    assert_eq!(lines[6], "deltas relative to Baseline-2; positive is better");
}

#[test]
fn small_experiment_deltas_match_scores() {
    let cfg = ExperimentConfig::from_toml(
        r#"
version = 1
seed = 3
methods = ["FT", "MAML"]
[model]
num_encoder_blocks = 2
num_decoder_blocks = 1
model_dim = 8
ff_dim = 16
[data]
source_train = 24
accent_train = 4
num_accents = 2
source_test = 4
accent_test = 4
[baseline]
epochs = 1
[expansion]
epochs = 1
batch_size = 4
"#,
    )
    .unwrap();
    let run = run_experiment(&cfg).unwrap();
    let kinds: Vec<(RowKind, Recipe)> = run.report.rows.iter().map(|r| (r.method, r.data)).collect();
    assert_eq!(
        kinds,
        [
            (RowKind::Baseline1, Recipe::Mandarin),
            (RowKind::Baseline2, Recipe::All),
            (RowKind::Expansion(Method::FT), Recipe::Accent),
            (RowKind::Expansion(Method::MAML), Recipe::Accent),
            (RowKind::Expansion(Method::MAML), Recipe::AccentPlus),
        ]
    );
    let b2 = run.report.row(RowKind::Baseline2, Recipe::All).unwrap().clone();
    for r in &run.report.rows {
        let expect = |reference: f64, v: f64| if reference == 0.0 { 0.0 } else { (reference - v) / reference * 100.0 };
        assert_eq!(r.delta_source_pct, expect(b2.cer_source, r.cer_source));
        assert_eq!(r.delta_accent_pct, expect(b2.cer_accent, r.cer_accent));
        let mean = r.per_domain.iter().map(|d| d.1).sum::<f64>() / r.per_domain.len() as f64;
        assert!((r.cer_accent - mean).abs() < 1e-15);
        assert!(r.wall_s.is_some());
    }
    assert_eq!(run.timing.len(), 5);
    assert!(run.report.without_timing().rows.iter().all(|r| r.wall_s.is_none()));
}
