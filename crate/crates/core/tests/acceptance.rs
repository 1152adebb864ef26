//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Arguments select criteria by number, e.g.
//! `cargo test --test acceptance -- 2 5 12`.

mod common;

use std::time::{Duration, Instant};

use common::checks::{
    attention_mixer_grad, block_grad, causality, check_op, conv_oracle_err,
    hyena_identity_mismatches, hyena_mixer_grad, op_cases, ssm_duality_err,
};
use common::{small_hyena, tiny_attention, tiny_hyena, uniform};
use hyena_distill::cli;
use hyena_distill::data::{build_activation_datasets, detokenize, tokenize, ActivationDataset};
use hyena_distill::evalbench::{parse_report_csv, scaling_bench, Role};
use hyena_distill::mixers::{AttentionConfig, HyenaConfig, MixerConfig, MixerKind};
use hyena_distill::model::{Model, ModelConfig, StudentInit};
use hyena_distill::training::{
    hyperparam_search, joint_knowledge_transfer, pkt_mask, pretrain,
    progressive_knowledge_transfer, select_cell, Activations, LrSchedule, RunControl, Stage,
    TrainPlan,
};
use hyena_distill::{Result, Scalar};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn within(limit: Duration, t: Duration) -> bool {
    t < limit
}

fn gradients() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |err: f64, what: String| {
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, what);
        }
    };
    let cases = op_cases();
    for case in &cases {
        note(check_op(case, 0..5)?.max_rel_err, case.name.to_string());
    }
    for seed in 0..5 {
        note(
            hyena_mixer_grad(seed)?.max_rel_err,
            format!("hyena operator seed {seed}"),
        );
        note(
            attention_mixer_grad(seed)?.max_rel_err,
            format!("attention seed {seed}"),
        );
    }
    for seed in 0..5 {
        for mixer in [
            MixerConfig::Attention(AttentionConfig::new(4, 2)),
            MixerConfig::Hyena(small_hyena(4)),
        ] {
            let kind = mixer.kind();
            note(
                block_grad(mixer, 20 + seed, 120)?.max_rel_err,
                format!("{kind} block seed {seed}"),
            );
        }
    }
    let t = t0.elapsed();
    outcome(
        worst.0 <= 1e-4 && within(Duration::from_secs(120), t),
        format!(
            "{} ops, 2 mixers, 2 blocks x 5 seeds; max rel err {:.2e} ({}); {:.1?}",
            cases.len(),
            worst.0,
            worst.1,
            t
        ),
    )
}

fn convolutions() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for (i, len) in [7, 64, 257, 1024].into_iter().enumerate() {
        let (f, d) = conv_oracle_err(len, 100 + i as u64)?;
        worst = worst.max(f).max(d);
    }
    let t = t0.elapsed();
    outcome(
        worst <= 1e-8 && within(Duration::from_secs(60), t),
        format!("max abs err {worst:.2e}; {t:.1?}"),
    )
}

fn ssm_duality() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..24 {
        worst = worst.max(ssm_duality_err(1 + seed as usize % 8, 128, 1000 + seed)?);
    }
    let t = t0.elapsed();
    outcome(
        worst <= 1e-8 && within(Duration::from_secs(60), t),
        format!("24 systems, L=128; max abs err {worst:.2e}; {t:.1?}"),
    )
}

fn model_causality() -> Result<Outcome> {
    let t0 = Instant::now();
    let base = ModelConfig::attention(16, 2, 2, 256).with_seed(31);
    let mut pass = true;
    let mut leak = 0.0f64;
    let mut effect = f64::INFINITY;
    for mixer in [base.mixer.clone(), MixerConfig::Hyena(small_hyena(16))] {
        for len in [8, 64, 256] {
            let cfg = ModelConfig {
                mixer: mixer.clone(),
                ..base.clone()
            };
            let c = causality(cfg, len, 10, 7 * len as u64)?;
            pass &= c.trials >= 10 && c.leak <= 1e-10 && c.min_effect > 1e-6;
            leak = leak.max(c.leak);
            effect = effect.min(c.min_effect);
        }
    }
    let t = t0.elapsed();
    outcome(
        pass && within(Duration::from_secs(120), t),
        format!("2 mixers x L in {{8,64,256}} x 10 positions; past leak {leak:.1e}, min future effect {effect:.1e}; {t:.1?}"),
    )
}

fn hyena_identity() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut bad = 0;
    for (len, d, seed) in [(16, 4, 0), (128, 8, 1), (257, 3, 2)] {
        bad += hyena_identity_mismatches(len, d, seed)?;
    }
    let t = t0.elapsed();
    outcome(
        bad == 0 && within(Duration::from_secs(1), t),
        format!("{bad} elements differ from x^3; {t:.1?}"),
    )
}

/// Warmup and decay branches of the schedule as closed forms over real steps.
fn warmup_branch(s: &LrSchedule, t: f64) -> f64 {
    s.max_lr * t / s.warmup_steps as f64
}

fn decay_branch(s: &LrSchedule, t: f64) -> f64 {
    let x = (t - s.warmup_steps as f64) / s.decay_steps as f64;
    s.min_lr + (s.max_lr - s.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

fn schedule() -> Result<Outcome> {
    let mut pass = true;
    let mut jump = 0.0f64;
    for (max, w, d) in [
        (1e-3, 100, 1000),
        (3e-3, 7, 93),
        (0.5, 1, 1),
        (2e-4, 2500, 40_000),
    ] {
        let mut p = TrainPlan::new(Stage::Pretrain);
        p.schedule.max_lr = max;
        p.schedule.warmup_steps = Some(w);
        p.schedule.decay_steps = Some(d);
        let s = p.schedule.resolve(w + d)?;
        pass &= s.lr_at(0) == 0.0;
        pass &= s.lr_at(w) == max;
        pass &= s.lr_at(w + d) == 0.1 * max;
        pass &= (w + d..w + d + 5000).all(|k| s.lr_at(k) == 0.1 * max);
        pass &= (0..w).all(|k| (s.lr_at(k) - warmup_branch(&s, k as f64)).abs() <= 1e-15 * max);
        pass &= (w..w + d).all(|k| (s.lr_at(k) - decay_branch(&s, k as f64)).abs() <= 1e-15 * max);
        let (wf, df) = (w as f64, (w + d) as f64);
        for j in [
            warmup_branch(&s, wf) - s.lr_at(w),
            decay_branch(&s, wf) - s.lr_at(w),
            decay_branch(&s, df) - s.lr_at(w + d),
        ] {
            jump = jump.max(j.abs() / max);
        }
    }
    pass &= jump <= 1e-12;
    outcome(
        pass,
        format!("4 schedules; endpoints exact; max boundary jump {jump:.1e} x max"),
    )
}

fn params_bits<F: Scalar>(m: &Model<F>, keep: impl Fn(usize) -> bool) -> Vec<Vec<u64>> {
    m.params()
        .entries()
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, e)| e.tensor.data().iter().map(|v| v.f64().to_bits()).collect())
        .collect()
}

fn desk_teacher(seed: u64) -> ModelConfig {
    ModelConfig::attention(64, 4, 2, 128).with_seed(seed)
}

fn freeze_integrity() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let (train, val) = common::windows(200_000, 128, 66, 5);
    let mut teacher = Model::<f32>::build(desk_teacher(5))?;
    let mut warm = TrainPlan::new(Stage::Pretrain);
    warm.token_budget = Some(20 * 8 * 128);
    warm.batch_size = 8;
    pretrain(&mut teacher, &train, &warm, &mut RunControl::new())?;
    let mut student = teacher.swap_mixer(
        MixerConfig::Hyena(HyenaConfig::new(64)),
        StudentInit::Copy,
        6,
    )?;
    let src = Activations::teacher(&teacher, &train);
    let vsrc = Activations::teacher(&teacher, &val);
    let mut plan = TrainPlan::new(Stage::Pkt);
    plan.batch_size = 8;
    plan.epochs = 2.0;
    let per_layer = plan.steps_for(src.len(), train.context_len());

    let initial = student.clone();
    let ck = dir.path().join("pkt.ckpt");
    let mut ctl = RunControl::new();
    ctl.checkpoint = Some(ck.clone());
    ctl.halt_after = Some(per_layer);
    progressive_knowledge_transfer(&teacher, &mut student, &src, Some(&vsrc), &plan, &mut ctl)?;
    let mask0 = pkt_mask(&student, 0);
    let frozen0 = params_bits(&student, |i| !mask0[i]) == params_bits(&initial, |i| !mask0[i]);
    let moved0 = params_bits(&student, |i| mask0[i]) != params_bits(&initial, |i| mask0[i]);

    let after0 = student.clone();
    let (mut student, snap) = Model::<f32>::load_with_state(&ck)?;
    let mut ctl = RunControl::new();
    ctl.resume = snap;
    let r =
        progressive_knowledge_transfer(&teacher, &mut student, &src, Some(&vsrc), &plan, &mut ctl)?;
    let mask1 = pkt_mask(&student, 1);
    let frozen1 = params_bits(&student, |i| !mask1[i]) == params_bits(&after0, |i| !mask1[i]);
    let moved1 = params_bits(&student, |i| mask1[i]) != params_bits(&after0, |i| mask1[i]);
    outcome(
        r.completed && frozen0 && frozen1 && moved0 && moved1,
        format!(
            "d64 x 2 layers, {per_layer} steps per layer; frozen unchanged: layer 0 span {frozen0}, layer 1 span {frozen1}; trained params moved: {moved0}/{moved1}"
        ),
    )
}

fn fixed_point() -> Result<Outcome> {
    let (train, val) = common::windows(60_000, 32, 40, 8);
    let teacher = Model::<f64>::build(ModelConfig::attention(32, 4, 2, 32).with_seed(8))?;
    let src = Activations::teacher(&teacher, &train);
    let vsrc = Activations::teacher(&teacher, &val);
    let mut worst = 0.0f64;
    let mut steps = 0;
    for stage in [Stage::Pkt, Stage::Jkt] {
        let mut plan = TrainPlan::new(stage);
        plan.batch_size = 4;
        plan.epochs = 1.0;
        plan.optim.weight_decay = 0.0;
        let mut student = teacher.clone();
        let mut ctl = RunControl::new();
        match stage {
            Stage::Pkt => progressive_knowledge_transfer(
                &teacher,
                &mut student,
                &src,
                Some(&vsrc),
                &plan,
                &mut ctl,
            )?,
            _ => joint_knowledge_transfer(&teacher, &mut student, &src, &plan, &mut ctl)?,
        };
        steps += ctl.log.len();
        worst = ctl
            .log
            .records()
            .iter()
            .map(|r| r.loss)
            .fold(worst, f64::max);
        for i in 0..val.len() {
            let h = student.hidden_states(&val.indices(i), 2)?;
            let t = teacher.hidden_states(&val.indices(i), 2)?;
            for l in 0..2 {
                worst = worst.max(hyena_distill::training::mse_value(&h[l], &t[l])?);
            }
        }
    }
    outcome(
        worst <= 1e-8,
        format!("{steps} logged steps; max layer MSE {worst:.1e}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn desk_reproduction() -> Result<Outcome> {
    let t0 = Instant::now();
    let dir = tempfile::tempdir()?;
    let (mut pre, mut pkt, mut ft) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let out = dir.path().join(format!("seed{seed}"));
        let argv = [
            "hyena-distill".to_string(),
            "pipeline".into(),
            "--skip-bench".into(),
            "--seed".into(),
            seed.to_string(),
            "--out".into(),
            out.display().to_string(),
        ];
        let code = cli::run(argv);
        if code != cli::exit::OK {
            return outcome(
                false,
                format!("pipeline for seed {seed} exited with {code}"),
            );
        }
        let rows = parse_report_csv(&std::fs::read_to_string(out.join("eval.csv"))?)?;
        let ppl = |role: Role| {
            rows.iter()
                .find(|r| r.role == role)
                .map(|r| r.result.perplexity)
        };
        match (ppl(Role::Pretrained), ppl(Role::Pkt), ppl(Role::Finetune)) {
            (Some(a), Some(b), Some(c)) => {
                pre.push(a);
                pkt.push(b);
                ft.push(c);
            }
            _ => return outcome(false, format!("eval.csv for seed {seed} lacks a row")),
        }
        print_progress(&format!(
            "seed {seed}: pretrained {:.3}, pkt {:.3}, fine-tuned {:.3}",
            pre[seed as usize], pkt[seed as usize], ft[seed as usize]
        ));
    }
    let (a, b, c) = (median(pre), median(pkt), median(ft));
    let gain = (a - c) / a;
    let t = t0.elapsed();
    outcome(
        a >= b && b >= c && gain >= 0.02 && within(Duration::from_secs(45 * 60), t),
        format!("median val perplexity: pretrained Hyena {a:.3} >= PKT {b:.3} >= fine-tuned {c:.3}; gain {:.1}%; {:.1} min", 100.0 * gain, t.as_secs_f64() / 60.0),
    )
}

fn scaling() -> Result<Outcome> {
    let t0 = Instant::now();
    let mixers = [
        MixerConfig::Attention(AttentionConfig::new(64, 4)),
        MixerConfig::Hyena(HyenaConfig::new(64)),
    ];
    let recs = scaling_bench(&mixers, &[1024, 2048, 4096, 8192, 16384], 5, 0)?;
    let slope = |k: MixerKind| {
        recs.iter()
            .find(|r| r.mixer == k)
            .map_or(f64::NAN, |r| r.slope)
    };
    let (a, h) = (slope(MixerKind::Attention), slope(MixerKind::Hyena));
    let t = t0.elapsed();
    outcome(
        a >= 1.7 && h <= 1.4 && within(Duration::from_secs(600), t),
        format!("log-log slope attention {a:.3}, hyena {h:.3}; {t:.1?}"),
    )
}

fn search() -> Result<Outcome> {
    let (train, val) = common::windows(60_000, 24, 60, 12);
    let teacher = Model::<f32>::build(tiny_attention(12))?;
    let student = teacher.swap_mixer(MixerConfig::Hyena(small_hyena(16)), StudentInit::Copy, 13)?;
    let src = Activations::teacher(&teacher, &train);
    let vsrc = Activations::teacher(&teacher, &val);
    let grid = [(5e-4, 4), (1e-3, 4), (1e-3, 8), (2e-3, 4), (2e-3, 8)];
    let mut plan = TrainPlan::new(Stage::Pkt);
    plan.token_budget = Some(24 * 8 * 4);
    let a = hyperparam_search(&teacher, &student, &src, &vsrc, None, &grid, &plan)?;
    let b = hyperparam_search(&teacher, &student, &src, &vsrc, None, &grid, &plan)?;
    let argmin = a
        .cells
        .iter()
        .enumerate()
        .min_by(|(_, x), (_, y)| {
            x.val_mse
                .total_cmp(&y.val_mse)
                .then(x.lr.total_cmp(&y.lr))
                .then(x.batch_size.cmp(&y.batch_size))
        })
        .map(|(i, _)| i);
    let marked: Vec<usize> = a
        .cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.selected)
        .map(|(i, _)| i)
        .collect();
    let md = a.to_markdown();
    let shaped = md.contains("| lr | batch | steps | train MSE | val MSE | selected |")
        && md
            .lines()
            .filter(|l| l.ends_with("|") && l.starts_with("| ") && !l.starts_with("| lr"))
            .count()
            == grid.len();
    let ties = select_cell(&[
        (2e-3, 4, 0.1),
        (1e-3, 8, 0.1),
        (1e-3, 4, 0.1),
        (1e-3, 2, 0.3),
    ]) == Some(2);
    outcome(
        a == b && marked == argmin.into_iter().collect::<Vec<_>>() && shaped && ties,
        format!(
            "{} cells, selected lr {} batch {}; repeat identical {}; tie-break {}",
            a.cells.len(),
            a.selected().lr,
            a.selected().batch_size,
            a == b,
            ties
        ),
    )
}

fn round_trips() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let path = |n: &str| dir.path().join(n);
    let mut checks = Vec::new();

    let mut ckpt = true;
    for (i, cfg) in [tiny_attention(1), tiny_hyena(2)].into_iter().enumerate() {
        let a = Model::<f32>::build(cfg.clone())?;
        let b = Model::<f64>::build(cfg)?;
        a.save(path(&format!("{i}a.ckpt")))?;
        b.save(path(&format!("{i}b.ckpt")))?;
        ckpt &= Model::<f32>::load(path(&format!("{i}a.ckpt")))?
            .params()
            .bitwise_eq(a.params());
        ckpt &= Model::<f64>::load(path(&format!("{i}b.ckpt")))?
            .params()
            .bitwise_eq(b.params());
    }
    checks.push(("checkpoints", ckpt));

    let teacher = Model::<f32>::build(tiny_attention(3))?;
    let (train, _) = common::windows(30_000, 24, 16, 3);
    let sets = [(0, path("l0.hyad")), (1, path("l1.hyad"))];
    build_activation_datasets(&teacher, &train, &sets)?;
    let mut acts = true;
    for (l, p) in &sets {
        let set = ActivationDataset::open_for_teacher(p, &teacher.digest())?;
        for i in 0..train.len() {
            let rec = set.read(i)?;
            acts &= rec.tokens == train.window(i);
            acts &= rec
                .hidden
                .bitwise_eq(&teacher.hidden_states(&train.indices(i), l + 1)?[*l]);
        }
    }
    checks.push(("activations", acts));

    let blob: Vec<u8> = uniform(&[65_536], 4)
        .data()
        .iter()
        .map(|v| ((v + 1.0) * 127.99) as u8)
        .collect();
    let mut all_bytes: Vec<u8> = (0..=255).collect();
    all_bytes.extend(blob);
    checks.push((
        "tokenizer",
        detokenize(tokenize(&all_bytes).tokens()) == all_bytes,
    ));

    let mut plan = TrainPlan::new(Stage::Pretrain);
    plan.batch_size = 4;
    plan.token_budget = Some(24 * 4 * 9);
    let mut full = Model::<f32>::build(tiny_hyena(4))?;
    pretrain(&mut full, &train, &plan, &mut RunControl::new())?;
    let mut part = Model::<f32>::build(tiny_hyena(4))?;
    let mut ctl = RunControl::new();
    ctl.checkpoint = Some(path("resume.ckpt"));
    ctl.halt_after = Some(8);
    pretrain(&mut part, &train, &plan, &mut ctl)?;
    let (mut resumed, snap) = Model::<f32>::load_with_state(path("resume.ckpt"))?;
    let mut ctl = RunControl::new();
    ctl.resume = snap;
    pretrain(&mut resumed, &train, &plan, &mut ctl)?;
    checks.push((
        "resume",
        ctl.steps_run() == 1 && resumed.params().bitwise_eq(full.params()),
    ));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            "checkpoints f32/f64, activation sets, tokenizer, resumed step all bitwise".to_string()
        } else {
            format!("mismatch in {failed:?}")
        },
    )
}

fn print_progress(msg: &str) {
    eprintln!("      {msg}");
}

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(&str, fn() -> Result<Outcome>); 12] = [
        ("gradient suite", gradients),
        ("convolution oracles", convolutions),
        ("SSM duality", ssm_duality),
        ("causality", model_causality),
        ("Hyena identity", hyena_identity),
        ("schedule", schedule),
        ("freeze integrity", freeze_integrity),
        ("self-distillation fixed point", fixed_point),
        ("desk-scale reproduction", desk_reproduction),
        ("scaling benchmark", scaling),
        ("search harness", search),
        ("round trips", round_trips),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!(
            "{} {n:>2} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
