mod common;

use common::{tiny_attention, tiny_hyena, windows};
use hyena_distill::evalbench::{
    compare_report, loglog_slope, parse_report_csv, perplexity, scaling_bench, token_nll, KahanSum,
    ReportFormat, ReportRow, Role,
};
use hyena_distill::mixers::{AttentionConfig, MixerConfig};
use hyena_distill::model::{Capture, Model};
use hyena_distill::{Error, Tensor};

#[test]
fn uniform_logits_give_vocabulary_sized_perplexity() {
    let (_, val) = windows(20_000, 32, 40, 1);
    let mut m = Model::<f64>::build(tiny_attention(0)).unwrap();
    for name in ["embed.weight", "unembed.weight"] {
        if let Some(t) = m.params_mut().by_name_mut(name) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let r = perplexity(&m, &val).unwrap();
    assert!((r.perplexity - 258.0).abs() < 1e-9, "{}", r.perplexity);
    assert_eq!(r.tokens, (val.len() * 31) as u64);
}

#[test]
fn perplexity_matches_direct_log_softmax() {
    let (_, val) = windows(30_000, 32, 60, 2);
    let m = Model::<f64>::build(tiny_hyena(3)).unwrap();
    let mut total = 0.0;
    let mut count = 0usize;
    for w in val.iter() {
        let tokens: Vec<usize> = w.iter().map(|&t| t as usize).collect();
        let logits = m.forward(&tokens[..31], Capture::None).unwrap().logits;
        for (row, &t) in logits.data().chunks(258).zip(&tokens[1..]) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += z.ln() - row[t];
            count += 1;
        }
    }
    let r = perplexity(&m, &val).unwrap();
    assert!((r.mean_ce - total / count as f64).abs() < 1e-10);
    assert!((r.perplexity - r.mean_ce.exp()).abs() < 1e-12 * r.perplexity);
}

#[test]
fn evaluation_has_no_side_effects_and_is_repeatable() {
    let (_, val) = windows(20_000, 32, 40, 4);
    let m = Model::<f32>::build(tiny_attention(5)).unwrap();
    let before = m.digest();
    let a = perplexity(&m, &val).unwrap();
    let b = perplexity(&m, &val).unwrap();
    assert_eq!(a, b);
    assert_eq!(m.digest(), before);
    assert_eq!(a.model_digest, before);
    assert_eq!(a.dataset_digest, val.digest());
}

#[test]
fn truncated_sets_count_only_their_windows() {
    let (_, val) = windows(40_000, 16, 80, 6);
    let m = Model::<f64>::build(tiny_attention(6)).unwrap();
    let full = perplexity(&m, &val).unwrap();
    let head = perplexity(&m, &val.truncated(3)).unwrap();
    assert_eq!(head.tokens, 3 * 15);
    assert!(head.dataset_digest != full.dataset_digest);
    assert!(full.mean_ce.is_finite() && head.mean_ce.is_finite());
}

#[test]
fn perplexity_rejects_windows_longer_than_context() {
    let (_, val) = windows(20_000, 64, 20, 7);
    let m = Model::<f32>::build(tiny_attention(0)).unwrap();
    assert!(matches!(perplexity(&m, &val), Err(Error::Config(_))));
}

#[test]
fn token_nll_and_kahan() {
    let logits = Tensor::<f64>::new([2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    let nll = token_nll(&logits, &[1, 2]).unwrap();
    assert!((nll[0] - 3f64.ln()).abs() < 1e-15);
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    assert!((nll[1] - (z.ln() - 3.0)).abs() < 1e-14);
    assert!(token_nll(&logits, &[0]).is_err());
    assert!(token_nll(&logits, &[0, 3]).is_err());

    let mut k = KahanSum::default();
    k.add(1.0);
    for _ in 0..10_000 {
        k.add(1e-16);
    }
    assert!((k.value() - (1.0 + 1e-12)).abs() < 1e-15);
}

fn row(role: Role, seed: Option<u64>, ppl: f64) -> ReportRow {
    let (_, val) = windows(20_000, 16, 20, 1);
    let m = Model::<f32>::build(tiny_attention(0)).unwrap();
    let mut r = perplexity(&m, &val).unwrap();
    r.perplexity = ppl;
    r.mean_ce = ppl.ln();
    let mut row = ReportRow::new(role, r);
    if let Some(s) = seed {
        row = row.with_seed(s).with_budget(1000 * s);
    }
    row
}

#[test]
fn report_orders_rows_and_round_trips_through_csv() {
    let rows = vec![
        row(Role::Finetune, Some(2), 7.5),
        row(Role::Pretrained, Some(1), 9.25),
        row(Role::Teacher, None, 6.0),
        row(Role::Pkt, Some(1), 8.0),
        row(Role::Finetune, Some(1), 7.0),
    ];
    let csv = compare_report(&rows, ReportFormat::Csv);
    let parsed = parse_report_csv(&csv).unwrap();
    let roles: Vec<_> = parsed.iter().map(|r| (r.role, r.seed)).collect();
    assert_eq!(
        roles,
        [
            (Role::Teacher, None),
            (Role::Pretrained, Some(1)),
            (Role::Pkt, Some(1)),
            (Role::Finetune, Some(1)),
            (Role::Finetune, Some(2)),
        ]
    );
    for p in &parsed {
        let orig = rows
            .iter()
            .find(|r| r.role == p.role && r.seed == p.seed)
            .unwrap();
        assert_eq!(p, orig);
    }
    let teacher_line = csv.lines().nth(1).unwrap();
    assert!(teacher_line.starts_with("teacher,attention,-,-,"));

    let md = compare_report(&rows, ReportFormat::Markdown);
    let lines: Vec<_> = md.lines().collect();
    assert_eq!(lines.len(), 2 + rows.len());
    assert!(lines[2].starts_with("| Attention teacher |"));
    assert!(lines[2].ends_with("| 6.000 |"));
    assert!(parse_report_csv("role,mixer\nteacher,attention\n").is_err());
}

#[test]
fn loglog_slope_recovers_power_laws() {
    for k in [1.0, 1.5, 2.0] {
        let pts: Vec<_> = [8.0, 16.0, 32.0, 64.0]
            .iter()
            .map(|&x: &f64| (x, 3.0 * x.powf(k)))
            .collect();
        assert!((loglog_slope(&pts) - k).abs() < 1e-12);
    }
}

#[test]
fn bench_validates_inputs_and_reports_every_length() {
    let mixers = [
        MixerConfig::Attention(AttentionConfig::new(8, 2)),
        MixerConfig::Hyena(common::small_hyena(8)),
    ];
    assert!(matches!(
        scaling_bench(&mixers, &[8, 16, 32], 3, 0),
        Err(Error::Bench(_))
    ));
    assert!(matches!(
        scaling_bench(&mixers, &[8, 16, 32, 64], 2, 0),
        Err(Error::Bench(_))
    ));
    assert!(matches!(
        scaling_bench(&mixers, &[8, 32, 16, 64], 3, 0),
        Err(Error::Bench(_))
    ));
    let recs = scaling_bench(&mixers, &[128, 256, 512, 1024], 3, 0).unwrap();
    assert_eq!(recs.len(), 2);
    for r in &recs {
        assert_eq!(
            r.points.iter().map(|p| p.len).collect::<Vec<_>>(),
            [128, 256, 512, 1024]
        );
        assert!(r
            .points
            .iter()
            .all(|p| p.min_ms <= p.median_ms && p.repeats == 3));
        assert!(r.slope.is_finite());
    }
}
