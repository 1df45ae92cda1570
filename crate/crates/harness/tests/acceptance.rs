//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Training criteria use the default recipe and take
//! several minutes each on one core.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use msan::checks::gradcheck_suite;
use msan::data::{generate_synthetic, read_dataset, write_dataset, ClipRecord, GeneratorConfig, Span};
use msan::hrn::{attention_weights, dot_attention};
use msan::mpn::{
    coverage, label_candidates, modulate_moment_scores, select_moment, temporal_iou, CandidateLabel, MoICandidate,
    Modulation,
};
use msan::tensor::{GradCheckOptions, Graph, Tensor};
use msan::{MomentSource, Msan};
use msan_harness::ablate::{ablate_with, TrainedRuns, Variant};
use msan_harness::config::TrainConfig;
use msan_harness::eval::evaluate;
use msan_harness::synthetic_splits;
use msan_harness::train::{train, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let opts = GradCheckOptions::default();
    let mut failures = Vec::new();
    let mut checks = 0;
    let mut worst = 0.0f64;
    for seed in 0..3 {
        match gradcheck_suite(seed, &opts) {
            Ok(outcomes) => {
                for c in outcomes {
                    checks += 1;
                    worst = worst.max(c.report.max_rel_error());
                    if !c.report.passed() {
                        failures.push(format!("seed {seed} {}", c.name));
                    }
                }
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let took = start.elapsed();
    let fast = took < Duration::from_secs(120);
    verdict(
        failures.is_empty() && fast,
        format!(
            "{checks} checks over seeds 0-2, max rel error {worst:.2e}, {:.1}s{}",
            took.as_secs_f64(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failures.join("; "))
            }
        ),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn attention_normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum = 0.0f64;
    let mut worst_hull = 0.0f64;
    let mut negative = 0;
    for _ in 0..1000 {
        let (m, n, d) = (rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..16));
        let scale = [0.1, 1.0, 5.0, 20.0][rng.gen_range(0..4)];
        let mut g = Graph::new();
        let x = g.input(random_matrix(&mut rng, m, d, scale));
        let y = g.input(random_matrix(&mut rng, n, d, scale));
        let a = attention_weights(&mut g, x, y).unwrap();
        let out = dot_attention(&mut g, x, y).unwrap();
        let (a, out, y) = (g.value(a), g.value(out), g.value(y));
        for i in 0..m {
            let row = a.row(i);
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            negative += row.iter().filter(|&&w| w < 0.0).count();
            // The output row must equal Σ_j a_ij · y_j for these convex weights.
            for k in 0..d {
                let combo: f64 = (0..n).map(|j| row[j] * y.get(j, k)).sum();
                worst_hull = worst_hull.max((out.get(i, k) - combo).abs());
                let lo = (0..n).map(|j| y.get(j, k)).fold(f64::INFINITY, f64::min);
                let hi = (0..n).map(|j| y.get(j, k)).fold(f64::NEG_INFINITY, f64::max);
                worst_hull = worst_hull.max(lo - out.get(i, k)).max(out.get(i, k) - hi);
            }
        }
    }
    verdict(
        worst_sum <= 1e-9 && negative == 0 && worst_hull <= 1e-9,
        format!(
            "1000 calls, max |row sum - 1| {worst_sum:.1e}, negative weights {negative}, hull slack {worst_hull:.1e}"
        ),
    )
}

/// Interval arithmetic by cases, independent of the library formulas.
fn brute_force(a: &Span, b: &Span) -> (f64, f64) {
    let lo = if a.start > b.start { a.start } else { b.start };
    let hi = if a.end < b.end { a.end } else { b.end };
    let inter = if hi > lo { hi - lo } else { 0.0 };
    let left = if a.start < b.start { a.start } else { b.start };
    let right = if a.end > b.end { a.end } else { b.end };
    let iou = if inter > 0.0 { inter / (right - left) } else { 0.0 };
    (iou, inter / (b.end - b.start))
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let span = |rng: &mut ChaCha8Rng| {
        let s = rng.gen_range(0..400) as f64 / 8.0;
        Span::new(s, s + rng.gen_range(1..120) as f64 / 8.0)
    };
    for i in 0..10_000 {
        let (a, b) = if i % 2 == 0 {
            (span(&mut rng), span(&mut rng))
        } else {
            let s = rng.gen_range(0.0..50.0);
            let t = rng.gen_range(0.0..50.0);
            (
                Span::new(s, s + rng.gen_range(0.01..15.0)),
                Span::new(t, t + rng.gen_range(0.01..15.0)),
            )
        };
        let (iou, cov) = brute_force(&a, &b);
        if temporal_iou(&a, &b).unwrap() != iou || coverage(&a, &b).unwrap() != cov {
            mismatches += 1;
        }
    }
    let rec = &generate_synthetic(
        &GeneratorConfig {
            num_clips: 1,
            ..Default::default()
        },
        0,
    )
    .unwrap()[0];
    let gt = Span::new(2.0, 4.0);
    let half = Span::new(3.0, 4.0);
    let mut cands = vec![
        MoICandidate::new(rec, half),
        MoICandidate::new(rec, Span::new(5.0, 8.0)),
    ];
    let promoted = label_candidates(&mut cands, &gt).unwrap();
    let boundary = temporal_iou(&half, &gt).unwrap() == 0.5 && !promoted && cands[0].label == CandidateLabel::Positive;
    verdict(
        mismatches == 0 && boundary,
        format!("10000 span pairs, {mismatches} mismatches; IoU 0.5 labeled positive: {boundary}"),
    )
}

fn modulation_laws() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..10_000 {
        let m: f64 = rng.gen_range(0.0..10.0);
        let a: f64 = rng.gen_range(0.0..=1.0);
        let mul = Modulation::Multiplicative.apply(m, a);
        let res = Modulation::Residual.apply(m, a);
        let add = Modulation::Additive.apply(m, a);
        if !(0.0..=m).contains(&mul) || !(m..=2.0 * m).contains(&res) || add != m + a {
            violations += 1;
        }
    }
    let mut winner_changes = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..20);
        let raw: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let alpha = rng.gen_range(0.0..=1.0);
        let c = rng.gen_range(0.01..100.0);
        let winner = |scale: f64| {
            let cands: Vec<MoICandidate> = raw
                .iter()
                .enumerate()
                .map(|(i, &(v, s))| {
                    let (m_v, m_s) = modulate_moment_scores(v * scale, s * scale, alpha, Modulation::Multiplicative);
                    MoICandidate {
                        span: Span::new(i as f64, i as f64 + 1.0),
                        shots: Vec::new(),
                        sentences: Vec::new(),
                        raw_v: v * scale,
                        raw_s: s * scale,
                        m_v,
                        m_s,
                        label: CandidateLabel::Unset,
                    }
                })
                .collect();
            select_moment(&cands, 0.25, n as f64).unwrap().0
        };
        if winner(1.0) != winner(c) {
            winner_changes += 1;
        }
    }
    verdict(
        violations == 0 && winner_changes == 0,
        format!("10000 (m, alpha) draws, {violations} violations; 1000 rescalings, {winner_changes} winner changes"),
    )
}

struct SeedRun {
    seed: u64,
    train: Vec<ClipRecord>,
    valid: Vec<ClipRecord>,
    outcome: TrainOutcome,
    accuracy: f64,
    iou: f64,
    took: Duration,
}

fn learnability(runs: &mut Vec<SeedRun>) -> Verdict {
    let cfg = TrainConfig::default();
    let mut lines = Vec::new();
    let mut good = 0;
    for seed in 0..3 {
        let start = Instant::now();
        let (tr, va) = synthetic_splits(&GeneratorConfig::default(), seed, 500).unwrap();
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let outcome = match train(&run_cfg, &tr, &va) {
            Ok(o) => o,
            Err(e) => {
                lines.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        let model = Msan::new(run_cfg.model.clone()).unwrap();
        let report = evaluate(&model, &outcome.params, &va, MomentSource::Predicted)
            .unwrap()
            .report;
        let iou = report.localization.as_ref().map_or(0.0, |l| l.mean_iou);
        let took = start.elapsed();
        let ok = report.accuracy >= 0.8 && iou >= 0.4 && took < Duration::from_secs(15 * 60);
        good += ok as usize;
        lines.push(format!(
            "seed {seed}: acc {:.3} IoU {iou:.3} {}s{}",
            report.accuracy,
            took.as_secs(),
            if ok { "" } else { " (miss)" }
        ));
        runs.push(SeedRun {
            seed,
            train: tr,
            valid: va,
            outcome,
            accuracy: report.accuracy,
            iou,
            took,
        });
    }
    verdict(
        good >= 2,
        format!("{good}/3 seeds reach acc >= 0.80 and IoU >= 0.40; {}", lines.join("; ")),
    )
}

fn ablation_directions(runs: &[SeedRun]) -> Verdict {
    let Some(base) = runs.first() else {
        return verdict(false, "no trained seed available");
    };
    let cfg = TrainConfig {
        seed: base.seed,
        ..TrainConfig::default()
    };
    let mut cache = TrainedRuns::default();
    cache.insert(cfg.model.clone(), base.outcome.clone());
    let variants = [
        Variant::Full,
        Variant::GtMoment,
        Variant::NoMpn,
        Variant::Multiplicative,
        Variant::Residual,
        Variant::NoMimMpn,
    ];
    let table = match ablate_with(&cfg, &base.train, &base.valid, &base.valid, &variants, &mut cache) {
        Ok(t) => t,
        Err(e) => return verdict(false, format!("ablation failed: {e}")),
    };
    if let Ok(csv) = table.to_csv() {
        for line in csv.lines() {
            println!("  ablation {line}");
        }
    }
    let row = |v| table.row(v).expect("variant evaluated");
    let (full, gt, no_mpn) = (row(Variant::Full), row(Variant::GtMoment), row(Variant::NoMpn));
    let ordering = gt.accuracy >= full.accuracy && full.accuracy >= no_mpn.accuracy;
    let (iou, cov) = (full.mean_iou.unwrap(), full.mean_coverage.unwrap());
    let (iou_raw, cov_raw) = (full.mean_iou_raw.unwrap(), full.mean_coverage_raw.unwrap());
    let expansion = cov > cov_raw && iou < iou_raw;
    let no_mim = row(Variant::NoMimMpn).mean_iou.unwrap();
    let modes = [Variant::Full, Variant::Multiplicative, Variant::Residual];
    let mim = modes.iter().all(|&v| row(v).mean_iou.unwrap() > no_mim);
    let mode_ious: Vec<String> = modes
        .iter()
        .map(|&v| {
            let name = if v == Variant::Full {
                "additive".to_string()
            } else {
                v.to_string()
            };
            format!("{name} {:.3}", row(v).mean_iou.unwrap())
        })
        .collect();
    verdict(
        ordering && expansion && mim,
        format!(
            "acc gt {:.3} / pred {:.3} / no-mpn {:.3}; raw->expanded IoU {iou_raw:.3}->{iou:.3}, Cov {cov_raw:.3}->{cov:.3}; IoU {} vs no-mim {no_mim:.3}",
            gt.accuracy,
            full.accuracy,
            no_mpn.accuracy,
            mode_ious.join(", ")
        ),
    )
}

fn determinism() -> Verdict {
    let gen = GeneratorConfig {
        num_clips: 300,
        ..Default::default()
    };
    let (tr, va) = synthetic_splits(&gen, 7, 100).unwrap();
    let cfg = TrainConfig {
        seed: 7,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let out = train(&cfg, &tr, &va).unwrap();
        let model = Msan::new(cfg.model.clone()).unwrap();
        let eval = evaluate(&model, &out.params, &va, MomentSource::Predicted).unwrap();
        (
            serde_json::to_vec(&out.log).unwrap(),
            out.log.to_csv().unwrap(),
            serde_json::to_vec(&eval.report).unwrap(),
            serde_json::to_vec(&eval.traces).unwrap(),
        )
    };
    let (a, b) = (run(), run());
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3];
    verdict(
        same.iter().all(|&s| s),
        format!("train log json/csv, report, traces identical across two runs: {same:?}"),
    )
}

fn dataset_round_trip() -> Verdict {
    let records = generate_synthetic(
        &GeneratorConfig {
            num_clips: 500,
            ..Default::default()
        },
        8,
    )
    .unwrap();
    let mut first = Vec::new();
    write_dataset(&records, &mut first).unwrap();
    let loaded = read_dataset(first.as_slice()).unwrap();
    let mut second = Vec::new();
    write_dataset(&loaded, &mut second).unwrap();
    let identical = first == second && loaded == records;

    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/malformed");
    let manifest = std::fs::read_to_string(dir.join("expected.tsv")).unwrap();
    let mut correct = 0;
    let mut wrong = Vec::new();
    for line in manifest.lines().filter(|l| !l.is_empty()) {
        let (file, field) = line.split_once('\t').unwrap();
        let text = std::fs::read(dir.join(file)).unwrap();
        match read_dataset(text.as_slice()) {
            Err(msan::Error::Validation { field: got, .. }) if got == field => correct += 1,
            other => wrong.push(format!("{file}: {:?}", other.err())),
        }
    }
    verdict(
        identical && correct == 10 && wrong.is_empty(),
        format!(
            "500 records byte-identical after save/load/re-save: {identical}; {correct}/10 malformed fixtures rejected with the right field{}",
            if wrong.is_empty() { String::new() } else { format!("; {}", wrong.join("; ")) }
        ),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut runs = Vec::new();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Vec<SeedRun>) -> Verdict>)> = vec![
        ("gradient integrity", Box::new(|_| gradient_integrity())),
        ("attention normalization", Box::new(|_| attention_normalization())),
        ("metric oracles", Box::new(|_| metric_oracles())),
        ("modulation laws", Box::new(|_| modulation_laws())),
        ("learnability", Box::new(learnability)),
        ("ablation directions", Box::new(|r| ablation_directions(r))),
        ("determinism", Box::new(|_| determinism())),
        ("dataset round-trip", Box::new(|_| dataset_round_trip())),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let v = check(&mut runs);
        failed += !v.pass as usize;
        println!(
            "{} criterion {} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
    }
    for r in &runs {
        println!(
            "  seed {} best epoch {} of {}, acc {:.3}, IoU {:.3}, {:.0}s",
            r.seed,
            r.outcome.log.best_epoch,
            r.outcome.log.epochs.len(),
            r.accuracy,
            r.iou,
            r.took.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
