//! Acceptance run. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Everything runs inside one test so that the timing
//! criteria are not measured alongside other tests.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use accent_core::config::ExperimentConfig;
use accent_core::eval::{run_expansion, ExperimentReport, RowKind};
use accent_core::losses::{kld_penalty, wca_penalty, LossConfig};
use accent_core::model::{
    apply_freeze_policy, build_model, read_checkpoint, AsrModel, Binder, FreezePolicy, ModelConfig, ParameterRegistry,
};
use accent_core::selftest;
use accent_core::synth::{Corpus, Recipe, SynthConfig};
use accent_core::trainer::{noam_lr, split_epoch, train, train_objective, AsrObjective, Method, Objective, TrainerConfig};
use accent_core::{Graph, Tensor};

const SEED: u64 = 2022;

type Verdict = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn checks_verdict(checks: &[selftest::Check], budget_s: f64) -> Verdict {
    let total: f64 = checks.iter().map(|c| c.seconds).sum();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let summary = checks.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>().join("; ");
    ensure(
        failed.is_empty() && total < budget_s,
        format!("{summary}; {total:.1}s of {budget_s}s budget{}", if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }),
    )
}

fn criterion_1() -> Verdict {
    checks_verdict(&[selftest::ctc_oracle_suite(200, SEED)], 30.0)
}

fn criterion_2() -> Verdict {
    checks_verdict(&selftest::op_gradient_suite(100, SEED), 60.0)
}

fn tiny_model_config(synth: &SynthConfig) -> ModelConfig {
    ModelConfig {
        feature_dim: synth.feature_dim,
        vocab_size: synth.num_symbols + 2,
        num_encoder_blocks: 2,
        num_decoder_blocks: 1,
        model_dim: 8,
        ff_dim: 16,
        ..ModelConfig::default()
    }
}

fn criterion_3() -> Verdict {
    let (prime, theta) = selftest::maml_parabola().map_err(|e| e.to_string())?;
    if (prime - 1.4).abs() >= 1e-12 || (theta - 1.36).abs() >= 1e-12 {
        return Err(format!("theta' = {prime}, theta = {theta}"));
    }

    // alpha = 0 against plain SGD on the support stream of one epoch
    let synth = SynthConfig {
        source_train: 16,
        accent_train: 4,
        num_accents: 2,
        source_test: 1,
        accent_test: 1,
        ..SynthConfig::default()
    };
    let data = Corpus::generate(&synth).unwrap().partition(Recipe::All, 0).unwrap().train;
    let mcfg = tiny_model_config(&synth);
    let model = build_model(&mcfg, 7).unwrap();
    let cfg = TrainerConfig {
        method: Method::MAML,
        alpha: 0.0,
        beta: 20.0,
        batch_size: 3,
        epochs: 1,
        warmup_steps: 4,
        rng_seed: 11,
        ..TrainerConfig::default()
    };
    let objective = || AsrObjective::new(mcfg.clone(), LossConfig::default(), &data).with_dropout(false);

    let mut sgd = model.params.clone();
    let mut obj = objective();
    let ids = obj.example_ids();
    let split = split_epoch(&ids, cfg.support_fraction, 0, cfg.rng_seed).unwrap();
    let mut trajectory = Vec::new();
    for (k, chunk) in split.support_order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<usize> = chunk.iter().map(|id| ids.iter().position(|x| x == id).unwrap()).collect();
        let (_, mut g) = obj.loss_and_grad(&sgd, &batch, 0).unwrap();
        g.clip_global_norm(cfg.clip_norm);
        sgd.sgd_step(&g, cfg.beta * noam_lr(k + 1, mcfg.model_dim, cfg.warmup_steps).unwrap());
        trajectory.push(sgd.clone());
    }

    let mut worst: f64 = 0.0;
    for steps in 1..=trajectory.len() {
        let mut maml = model.params.clone();
        let run_cfg = TrainerConfig {
            max_steps: Some(steps),
            ..cfg.clone()
        };
        let records = train_objective(&run_cfg, &mut maml, &mut objective(), mcfg.model_dim).unwrap();
        if records.len() != steps {
            return Err(format!("expected {steps} MAML steps, got {}", records.len()));
        }
        for (a, b) in maml.tensors().iter().zip(trajectory[steps - 1].tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let moved = model.params.tensors().iter().zip(sgd.tensors()).any(|(a, b)| a != b);
    ensure(
        worst < 1e-12 && moved,
        format!(
            "theta' = {prime}, theta = {theta}; alpha=0 trajectory over {} steps, max deviation from SGD {worst:.1e}",
            trajectory.len()
        ),
    )
}

fn criterion_4() -> Verdict {
    let cfg = ExperimentConfig::default();
    let data = Corpus::generate(&cfg.data).unwrap().partition(Recipe::Accent, SEED).unwrap().train;
    let mut base = build_model(&cfg.model, SEED).unwrap();
    apply_freeze_policy(&mut base.params, &FreezePolicy::default_for(&base.config)).unwrap();
    base.params.take_snapshot();
    let frozen = base.params.freeze_mask();
    let mut lines = Vec::new();
    let mut ok = !frozen.is_empty();
    for method in Method::ALL {
        let mut m = base.clone();
        let tcfg = TrainerConfig {
            method,
            epochs: 1000,
            max_steps: Some(500),
            rng_seed: SEED,
            ..cfg.expansion.clone()
        };
        let out = train(&tcfg, &mut m, &cfg.loss, &data).unwrap();
        let identical = frozen.iter().all(|n| {
            let (a, b) = (m.params.get(n).unwrap(), base.params.get(n).unwrap());
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        let trained = m.params.iter().any(|(n, t)| !frozen.contains(n) && Some(t) != base.params.get(n));
        ok &= identical && trained && out.records.len() == 500;
        lines.push(format!(
            "{method}: {} steps, frozen {}, trainable {}",
            out.records.len(),
            if identical { "bit-identical" } else { "CHANGED" },
            if trained { "updated" } else { "UNCHANGED" }
        ));
    }
    ensure(ok, format!("{} frozen tensors; {}", frozen.len(), lines.join("; ")))
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let shapes: [&[usize]; 5] = [&[3, 4], &[4], &[2, 5], &[7], &[3, 3]];
    let mut reg = ParameterRegistry::new();
    for (i, s) in shapes.iter().enumerate() {
        let n: usize = s.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        reg.insert(format!("p{i}"), Tensor::new(s.to_vec(), data).unwrap()).unwrap();
    }
    reg.set_freeze_mask(["p1", "p3"]).unwrap();
    reg.take_snapshot();
    let anchor = reg.snapshot().unwrap().to_vec();
    for i in 0..reg.len() {
        reg.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0));
    }
    let weight = 0.37;
    let mut g = Graph::new();
    let mut binder = Binder::new(&reg, true);
    let p = wca_penalty(&mut g, &mut binder, weight).unwrap().unwrap();
    let mut grads = g.backward(p).unwrap();
    let pg = binder.gradients(&mut grads);
    let mut wca_err: f64 = 0.0;
    let mut wca_ok = true;
    for i in 0..reg.len() {
        match (reg.is_frozen(i), pg.get(i)) {
            (true, None) => {}
            (false, Some(gr)) => {
                for ((gv, t), a) in gr.iter().zip(reg.tensor(i).data()).zip(anchor[i].data()) {
                    wca_err = wca_err.max((gv - weight * (t - a)).abs());
                }
            }
            _ => wca_ok = false,
        }
    }
    wca_ok &= wca_err < 1e-12;

    let mut min_kl = f64::INFINITY;
    let mut max_self: f64 = 0.0;
    let random_log_probs = |rng: &mut ChaCha8Rng, t: usize, v: usize| {
        let mut rows = Vec::new();
        for _ in 0..t {
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
            rows.push(logits.iter().map(|l| l - z).collect::<Vec<f64>>());
        }
        Tensor::from_rows(&rows).unwrap()
    };
    for _ in 0..1000 {
        let t = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=8);
        let teacher = random_log_probs(&mut rng, t, v);
        let student = random_log_probs(&mut rng, t, v);
        let mut g = Graph::new();
        let s = g.input(&student).unwrap();
        let k = kld_penalty(&mut g, s, &teacher, 1.0).unwrap();
        min_kl = min_kl.min(g.scalar_value(k));
        let mut g = Graph::new();
        let s = g.input(&teacher).unwrap();
        let k = kld_penalty(&mut g, s, &teacher, 1.0).unwrap();
        max_self = max_self.max(g.scalar_value(k).abs());
    }
    let kl_ok = min_kl >= 0.0 && max_self < 1e-12;
    ensure(
        wca_ok && kl_ok,
        format!(
            "WCA grad max |g - w(theta - theta0)| {wca_err:.1e} (frozen excluded: {wca_ok}); KL min over 1000 pairs {min_kl:.3e}, max |KL(p||p)| {max_self:.1e}"
        ),
    )
}

fn criterion_8() -> Verdict {
    checks_verdict(
        &[selftest::cer_oracle_suite(4, 4), selftest::prefix_beam_suite(100, 8, SEED)],
        f64::INFINITY,
    )
}

struct CompareRun {
    elapsed: Duration,
    ok: bool,
    stderr: String,
}

fn run_compare(out: &Path) -> CompareRun {
    let start = Instant::now();
    let output = Command::new(env!("CARGO_BIN_EXE_accent-expand"))
        .args(["compare", "--seed", &SEED.to_string(), "--out"])
        .arg(out)
        .output()
        .expect("spawn accent-expand");
    CompareRun {
        elapsed: start.elapsed(),
        ok: output.status.success(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

fn criterion_9(a: &Path, b: &Path, runs: &[CompareRun]) -> Verdict {
    if let Some(r) = runs.iter().find(|r| !r.ok) {
        return Err(format!("compare failed: {}", r.stderr.trim()));
    }
    let mut same = Vec::new();
    for f in ["report.txt", "report.csv", "report.json", "baseline1.ckpt", "baseline2.ckpt"] {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
        same.push(format!("{f} ({} bytes)", x.len()));
    }
    Ok(format!("byte-identical across two runs: {}", same.join(", ")))
}

fn criterion_6(dir: &Path, run: &CompareRun) -> Verdict {
    if !run.ok {
        return Err(format!("compare failed: {}", run.stderr.trim()));
    }
    let text = std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    let report: ExperimentReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let row = |k: RowKind, d: Recipe| report.row(k, d).ok_or(format!("missing row {} {}", k.label(), d.name()));
    let b1 = row(RowKind::Baseline1, Recipe::Mandarin)?;
    let b2 = row(RowKind::Baseline2, Recipe::All)?;
    let ft = row(RowKind::Expansion(Method::FT), Recipe::Accent)?;
    let mf = row(RowKind::Expansion(Method::MamlFmp), Recipe::Accent)?;
    let maml = row(RowKind::Expansion(Method::MAML), Recipe::Accent)?;
    let maml_plus = row(RowKind::Expansion(Method::MAML), Recipe::AccentPlus)?;

    let a = b1.cer_accent > b1.cer_source;
    let ft_degrade = -ft.delta_source_pct;
    let b = ft.cer_accent < b2.cer_accent && ft_degrade >= 5.0;
    let mf_degrade = -mf.delta_source_pct;
    let c = mf_degrade < ft_degrade / 2.0 && mf.cer_accent < b2.cer_accent;
    let d = maml_plus.cer_source <= maml.cer_source;
    let fast = run.elapsed < Duration::from_secs(15 * 60);
    let mark = |x: bool| if x { "ok" } else { "FAILED" };
    ensure(
        a && b && c && d && fast,
        format!(
            "(a) {}: Baseline-1 accent {:.4} vs source {:.4}; \
             (b) {}: FT accent {:.4} vs Baseline-2 {:.4}, source degradation {ft_degrade:.2}%; \
             (c) {}: MAML_FMP source degradation {mf_degrade:.2}% vs half of FT {:.2}%, accent {:.4}; \
             (d) {}: MAML source Accent+ {:.4} vs Accent {:.4}; \
             runtime {}: {:.1}s",
            mark(a),
            b1.cer_accent,
            b1.cer_source,
            mark(b),
            ft.cer_accent,
            b2.cer_accent,
            mark(c),
            ft_degrade / 2.0,
            mf.cer_accent,
            mark(d),
            maml_plus.cer_source,
            maml.cer_source,
            mark(fast),
            run.elapsed.as_secs_f64()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_7(baseline_ckpt: &Path) -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.expansion.epochs = 1000;
    cfg.expansion.max_steps = Some(200);
    let start: AsrModel = match read_checkpoint(baseline_ckpt) {
        Ok(m) => m,
        Err(_) => build_model(&cfg.model, SEED).unwrap(),
    };
    let data = Corpus::generate(&cfg.data).unwrap().partition(Recipe::Accent, SEED).unwrap().train;
    let (mut full, mut frozen) = (Vec::new(), Vec::new());
    for _ in 0..3 {
        for (method, sink) in [(Method::MAML, &mut full), (Method::MamlFmp, &mut frozen)] {
            let (_, out) = run_expansion(&cfg, &start, method, &data).map_err(|e| e.to_string())?;
            if out.records.len() < 200 {
                return Err(format!("{method} ran only {} steps", out.records.len()));
            }
            sink.push(out.median_step_ms().unwrap());
        }
    }
    let (m_full, m_frozen) = (median(full.clone()), median(frozen.clone()));
    let ratio = m_frozen / m_full;
    ensure(
        ratio <= 0.9,
        format!(
            "median per-step ms over 3 runs of 200 steps: MAML {m_full:.2} {full:.2?}, MAML_FMP {m_frozen:.2} {frozen:.2?}; ratio {ratio:.3} (limit 0.9)"
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(u8, &str, Verdict)> = Vec::new();
    let mut record = |n: u8, name: &'static str, v: Verdict| {
        let (tag, detail) = match &v {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {n} ({name}): {detail}");
        results.push((n, name, v));
    };
    record(1, "ctc oracle", guarded(criterion_1));
    record(2, "autodiff finite differences", guarded(criterion_2));
    record(3, "maml arithmetic", guarded(criterion_3));
    record(4, "freeze contract", guarded(criterion_4));
    record(5, "regularizer closed forms", guarded(criterion_5));
    record(8, "decoding and cer", guarded(criterion_8));

    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let runs = [run_compare(&a), run_compare(&b)];
    record(6, "trend reproduction", guarded(|| criterion_6(&a, &runs[0])));
    record(7, "freeze speedup", guarded(|| criterion_7(&a.join("baseline2.ckpt"))));
    record(9, "determinism", guarded(|| criterion_9(&a, &b, &runs)));

    let failed: Vec<String> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| format!("{} ({})", r.0, r.1))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
