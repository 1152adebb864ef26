use std::fmt::Write as _;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::RunConfig;
use super::{Cli, Command, DistillMode, FinetuneFrom, PretrainRole};
use crate::data::{
    build_activation_datasets, sample_windows, synthetic_corpus, ActivationDataset,
    TokenizedCorpus, WindowSet,
};
use crate::evalbench::{
    compare_report, parse_report_csv, perplexity, scaling_bench, BenchRecord, EvalResult,
    ReportFormat, ReportRow, Role,
};
use crate::mixers::MixerConfig;
use crate::model::{Model, StudentInit};
use crate::tensor::{Precision, Scalar};
use crate::training::{
    ce_finetune, hyperparam_search, joint_knowledge_transfer, pretrain,
    progressive_knowledge_transfer, Activations, LossLog, LossRecord, Progress, RunControl,
    StageReport, TrainPlan,
};
use crate::{Error, Result};

const SNAPSHOT: &str = "config.resolved.toml";

/// `NotFound` naming the path, so the diagnostic says what is missing.
fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )))
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(super) fn execute(cli: &Cli) -> Result<()> {
    let snapshot = cli.out.join(SNAPSHOT);
    let base = match std::fs::read_to_string(&snapshot) {
        Ok(text) => Some(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let fresh = base.is_none();
    let mut cfg = RunConfig::resolve(base.as_deref(), cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    write_atomic(&snapshot, cfg.to_toml().as_bytes())?;
    match cfg.precision {
        Precision::F32 => Runner::<f32>::new(&cli.out, cfg, fresh).dispatch(&cli.command),
        Precision::F64 => Runner::<f64>::new(&cli.out, cfg, fresh).dispatch(&cli.command),
    }
}

/// Canonical checkpoint names and their report roles.
const CHECKPOINTS: [(&str, Role); 6] = [
    ("teacher", Role::Teacher),
    ("hyena_pretrained", Role::Pretrained),
    ("student_pkt", Role::Pkt),
    ("student_jkt", Role::Jkt),
    ("student_pkt_finetune", Role::Finetune),
    ("student_jkt_finetune", Role::Finetune),
];

fn role_for(stem: &str) -> Role {
    if let Some((_, r)) = CHECKPOINTS.iter().find(|(n, _)| *n == stem) {
        return *r;
    }
    if stem.contains("finetune") {
        Role::Finetune
    } else if stem.contains("jkt") {
        Role::Jkt
    } else if stem.contains("pkt") {
        Role::Pkt
    } else if stem.contains("teacher") {
        Role::Teacher
    } else {
        Role::Pretrained
    }
}

/// Drops log rows at or past the resume point so each step appears once.
fn truncate_log(path: &Path, p: &Progress) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<LossRecord> = LossLog::read_csv(path)?
        .into_iter()
        .filter(|r| match (r.layer, p.layer) {
            (Some(l), Some(pl)) => l < pl || (l == pl && r.step < p.step),
            _ => r.step < p.step,
        })
        .collect();
    std::fs::remove_file(path)?;
    let mut log = LossLog::to_file(path)?;
    for r in keep {
        log.push(r)?;
    }
    Ok(())
}

struct Runner<'a, F: Scalar> {
    out: &'a Path,
    cfg: RunConfig,
    fresh: bool,
    _precision: PhantomData<F>,
}

impl<'a, F: Scalar> Runner<'a, F> {
    fn new(out: &'a Path, cfg: RunConfig, fresh: bool) -> Self {
        Runner {
            out,
            cfg,
            fresh,
            _precision: PhantomData,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ckpt(&self, name: &str) -> PathBuf {
        self.path(&format!("{name}.ckpt"))
    }

    fn dispatch(&mut self, command: &Command) -> Result<()> {
        match command {
            Command::Ingest {
                input,
                synthetic_bytes,
            } => self.ingest(input, *synthetic_bytes),
            Command::Pretrain { role } => self.pretrain(*role).map(drop),
            Command::DumpActivations => self.dump_activations(),
            Command::Distill { mode } => self.distill(*mode),
            Command::Finetune { from } => self.finetune(*from).map(drop),
            Command::Eval { checkpoint } => self.eval(checkpoint),
            Command::Bench => self.bench(),
            Command::Report => self.report(),
            Command::Pipeline {
                budget_minutes,
                skip_bench,
            } => self.pipeline(*budget_minutes, *skip_bench),
        }
    }

    fn ingest(&self, inputs: &[PathBuf], synthetic_bytes: Option<usize>) -> Result<()> {
        let path = self.path("corpus.tok");
        if path.exists() {
            println!("ingest: {} exists", path.display());
            return Ok(());
        }
        let inputs = if inputs.is_empty() {
            &self.cfg.data.inputs
        } else {
            inputs
        };
        let corpus = if inputs.is_empty() {
            let bytes = synthetic_bytes.unwrap_or(self.cfg.data.synthetic_bytes);
            TokenizedCorpus::from_documents(
                synthetic_corpus(bytes, self.cfg.data.synthetic_seed)
                    .lines()
                    .map(str::as_bytes),
            )
        } else {
            TokenizedCorpus::from_files(inputs)?
        };
        corpus.save(&path)?;
        println!(
            "ingest: {} tokens, digest {}",
            corpus.len(),
            corpus.digest()
        );
        Ok(())
    }

    fn corpus(&self) -> Result<TokenizedCorpus> {
        TokenizedCorpus::load(require(&self.path("corpus.tok"))?)
    }

    fn windows(&self) -> Result<(WindowSet, WindowSet)> {
        let d = &self.cfg.data;
        sample_windows(
            &self.corpus()?,
            d.context_len,
            d.n_windows,
            d.val_fraction,
            self.cfg.seed,
        )
    }

    /// Runs or resumes one training stage, or loads its finished result.
    fn train(
        &self,
        name: &str,
        init: impl FnOnce() -> Result<Model<F>>,
        run: impl FnOnce(&mut Model<F>, &mut RunControl<F>) -> Result<StageReport>,
    ) -> Result<Model<F>> {
        let done = self.ckpt(name);
        if done.exists() {
            println!("{name}: complete");
            return Model::load(&done);
        }
        std::fs::create_dir_all(self.path("logs"))?;
        let partial = self.path(&format!("{name}.partial.ckpt"));
        let log_path = self.path(&format!("logs/{name}.csv"));
        let mut ctl = RunControl::new();
        let mut model = if partial.exists() {
            let (m, state) = Model::<F>::load_with_state(&partial)?;
            if let Some(s) = &state {
                let p = Progress::from_snapshot(s)?;
                println!("{name}: resuming at step {} of {}", p.step, p.total_steps);
                truncate_log(&log_path, &p)?;
            }
            ctl.resume = state;
            m
        } else {
            if log_path.exists() {
                std::fs::remove_file(&log_path)?;
            }
            init()?
        };
        ctl.checkpoint = Some(partial.clone());
        ctl.log = LossLog::to_file(&log_path)?;
        let start = Instant::now();
        let report = run(&mut model, &mut ctl)?;
        model.save(&done)?;
        if partial.exists() {
            std::fs::remove_file(&partial)?;
        }
        let json = serde_json::to_vec_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
        write_atomic(&self.path(&format!("logs/{name}.report.json")), &json)?;
        println!(
            "{name}: {} steps, {} tokens, final loss {:.4}, {:.1}s",
            report.steps(),
            report.tokens(),
            report.final_loss().unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
        Ok(model)
    }

    fn pretrain(&self, role: PretrainRole) -> Result<Model<F>> {
        let (train, _) = self.windows()?;
        let (name, config, plan) = match role {
            PretrainRole::Teacher => ("teacher", self.cfg.teacher.clone(), &self.cfg.pretrain),
            PretrainRole::Hyena => (
                "hyena_pretrained",
                self.cfg.student_model(),
                &self.cfg.hyena_pretrain,
            ),
        };
        self.train(
            name,
            || Model::build(config),
            |m, ctl| pretrain(m, &train, plan, ctl),
        )
    }

    fn teacher(&self) -> Result<Model<F>> {
        Model::load_expecting(
            require(&self.ckpt("teacher"))?,
            self.cfg.teacher.mixer.kind(),
        )
    }

    fn activation_path(&self, split: &str, layer: usize) -> PathBuf {
        self.path(&format!("activations/{split}_layer{layer}.hyad"))
    }

    fn dump_activations(&self) -> Result<()> {
        let teacher = self.teacher()?;
        let (train, val) = self.windows()?;
        std::fs::create_dir_all(self.path("activations"))?;
        let n = teacher.n_layers();
        for (split, windows) in [
            ("train", train.truncated(self.cfg.data.distill_windows)),
            ("val", val.truncated(self.cfg.data.distill_val_windows)),
        ] {
            let complete = (0..n).all(|l| {
                ActivationDataset::open_for_teacher(
                    self.activation_path(split, l),
                    &teacher.digest(),
                )
                .is_ok_and(|d| d.manifest().windows_digest == windows.digest())
            });
            if complete {
                println!("dump-activations: {split} complete");
                continue;
            }
            let targets: Vec<_> = (0..n)
                .map(|l| (l, self.activation_path(split, l)))
                .collect();
            build_activation_datasets(&teacher, &windows, &targets)?;
            println!(
                "dump-activations: {split}, {} windows x {n} layers",
                windows.len()
            );
        }
        Ok(())
    }

    fn activations(&self, split: &str, teacher: &Model<F>) -> Result<Activations<'static, F>> {
        let sets = (0..teacher.n_layers())
            .map(|l| {
                ActivationDataset::open_for_teacher(
                    require(&self.activation_path(split, l))?,
                    &teacher.digest(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Activations::stored(sets)
    }

    fn initial_student(&self, teacher: &Model<F>) -> Result<Model<F>> {
        teacher.swap_mixer(
            self.cfg.student.clone(),
            StudentInit::Copy,
            self.cfg.seed.wrapping_add(1),
        )
    }

    fn distill(&self, mode: DistillMode) -> Result<()> {
        let teacher = self.teacher()?;
        let train = self.activations("train", &teacher)?;
        let val = self.activations("val", &teacher)?;
        match mode {
            DistillMode::Pkt => self
                .train(
                    "student_pkt",
                    || self.initial_student(&teacher),
                    |m, ctl| {
                        progressive_knowledge_transfer(
                            &teacher,
                            m,
                            &train,
                            Some(&val),
                            &self.cfg.pkt,
                            ctl,
                        )
                    },
                )
                .map(drop),
            DistillMode::Jkt => self
                .train(
                    "student_jkt",
                    || self.initial_student(&teacher),
                    |m, ctl| joint_knowledge_transfer(&teacher, m, &train, &self.cfg.jkt, ctl),
                )
                .map(drop),
            DistillMode::Search => {
                let s = &self.cfg.search;
                let grid: Vec<(f64, usize)> = s
                    .lrs
                    .iter()
                    .flat_map(|&lr| s.batches.iter().map(move |&b| (lr, b)))
                    .collect();
                let mut plan = self.cfg.pkt.clone();
                plan.token_budget = Some(s.token_budget);
                let student = self.initial_student(&teacher)?;
                let report =
                    hyperparam_search(&teacher, &student, &train, &val, s.layer, &grid, &plan)?;
                write_atomic(&self.path("search.md"), report.to_markdown().as_bytes())?;
                report.write_csv(self.path("search.csv"))?;
                print!("{}", report.to_markdown());
                Ok(())
            }
        }
    }

    fn finetune(&self, from: FinetuneFrom) -> Result<Model<F>> {
        let (train, _) = self.windows()?;
        let source = match from {
            FinetuneFrom::Pkt => "student_pkt",
            FinetuneFrom::Jkt => "student_jkt",
        };
        let teacher = match self.cfg.finetune.soft_target {
            Some(_) => Some(self.teacher()?),
            None => None,
        };
        let kind = self.cfg.student.kind();
        self.train(
            &format!("{source}_finetune"),
            || Model::load_expecting(require(&self.ckpt(source))?, kind),
            |m, ctl| ce_finetune(m, &train, teacher.as_ref(), &self.cfg.finetune, ctl),
        )
    }

    fn budget_of(&self, name: &str) -> Option<u64> {
        let text = std::fs::read(self.path(&format!("logs/{name}.report.json"))).ok()?;
        let report: StageReport = serde_json::from_slice(&text).ok()?;
        Some(report.tokens())
    }

    fn eval(&self, checkpoints: &[PathBuf]) -> Result<()> {
        let paths: Vec<PathBuf> = if checkpoints.is_empty() {
            CHECKPOINTS
                .iter()
                .map(|(n, _)| self.ckpt(n))
                .filter(|p| p.exists())
                .collect()
        } else {
            checkpoints.to_vec()
        };
        if paths.is_empty() {
            return Err(Error::Data("no checkpoints to evaluate".into()));
        }
        let (_, val) = self.windows()?;
        let csv_path = self.path("eval.csv");
        let mut rows = match std::fs::read_to_string(&csv_path) {
            Ok(text) => parse_report_csv(&text)?,
            Err(_) => Vec::new(),
        };
        std::fs::create_dir_all(self.path("eval"))?;
        for path in paths {
            let model = Model::<F>::load(require(&path)?)?;
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("model")
                .to_string();
            let result: EvalResult = perplexity(&model, &val)?;
            println!(
                "{stem}: perplexity {:.4} (mean CE {:.5} over {} tokens, {})",
                result.perplexity, result.mean_ce, result.tokens, result.precision
            );
            let json =
                serde_json::to_vec_pretty(&result).map_err(|e| Error::Data(e.to_string()))?;
            write_atomic(&self.path(&format!("eval/{stem}.json")), &json)?;
            let mut row = ReportRow::new(role_for(&stem), result).with_seed(self.cfg.seed);
            if let Some(b) = self.budget_of(&stem) {
                row = row.with_budget(b);
            }
            rows.retain(|r| r.result.model_digest != row.result.model_digest || r.role != row.role);
            rows.push(row);
        }
        write_atomic(
            &csv_path,
            compare_report(&rows, ReportFormat::Csv).as_bytes(),
        )
    }

    fn bench(&self) -> Result<()> {
        let b = &self.cfg.bench;
        let attention = match &self.cfg.teacher.mixer {
            MixerConfig::Attention(a) => {
                let mut a = a.clone();
                a.d_model = b.d_model;
                MixerConfig::Attention(a)
            }
            other => other.clone(),
        };
        let hyena = match &self.cfg.student {
            MixerConfig::Hyena(h) => {
                let mut h = h.clone();
                h.d_model = b.d_model;
                MixerConfig::Hyena(h)
            }
            other => other.clone(),
        };
        let records = scaling_bench(&[attention, hyena], &b.lengths, b.repeats, self.cfg.seed)?;
        for r in &records {
            println!("bench: {} slope {:.3}", r.mixer, r.slope);
        }
        BenchRecord::write_csv(&records, self.path("bench.csv"))?;
        let json = serde_json::to_vec_pretty(&records).map_err(|e| Error::Bench(e.to_string()))?;
        write_atomic(&self.path("bench.json"), &json)
    }

    fn report(&self) -> Result<()> {
        let mut md = String::from("# Run report\n\n## Validation perplexity\n\n");
        match std::fs::read_to_string(self.path("eval.csv")) {
            Ok(text) => md.push_str(&compare_report(
                &parse_report_csv(&text)?,
                ReportFormat::Markdown,
            )),
            Err(_) => md.push_str("No evaluation results.\n"),
        }
        if let Ok(text) = std::fs::read(self.path("bench.json")) {
            let records: Vec<BenchRecord> =
                serde_json::from_slice(&text).map_err(|e| Error::Data(e.to_string()))?;
            md.push_str("\n## Mixer scaling (forward, median ms)\n\n| mixer | d_model |");
            let lens: Vec<usize> = records
                .first()
                .map(|r| r.points.iter().map(|p| p.len).collect())
                .unwrap_or_default();
            for l in &lens {
                let _ = write!(md, " L={l} |");
            }
            md.push_str(" log-log slope |\n|---|---:|");
            md.push_str(&"---:|".repeat(lens.len() + 1));
            md.push('\n');
            for r in &records {
                let _ = write!(md, "| {} | {} |", r.mixer, r.d_model);
                for p in &r.points {
                    let _ = write!(md, " {:.3} |", p.median_ms);
                }
                let _ = writeln!(md, " {:.3} |", r.slope);
            }
        }
        if let Ok(text) = std::fs::read_to_string(self.path("search.md")) {
            md.push_str("\n## ");
            md.push_str(&text);
        }
        md.push_str("\n## Configuration\n\n```toml\n");
        md.push_str(&self.cfg.to_toml());
        md.push_str("```\n");
        write_atomic(&self.path("report.md"), md.as_bytes())?;
        println!("report: {}", self.path("report.md").display());
        Ok(())
    }

    /// Sets every stage's token budget from a measured training throughput
    /// so the training stages take about 70% of `minutes`.
    fn calibrate(&mut self, minutes: f64) -> Result<()> {
        if !(minutes > 0.0) {
            return Err(Error::config("budget minutes must be positive"));
        }
        let (train, _) = self.windows()?;
        let mut model = Model::<F>::build(self.cfg.teacher.clone())?;
        let mut plan = self.cfg.pretrain.clone();
        let per_step = (plan.batch_size * train.context_len()) as u64;
        plan.token_budget = Some(3 * per_step);
        let t0 = Instant::now();
        pretrain(&mut model, &train, &plan, &mut RunControl::new())?;
        let rate = (3 * per_step) as f64 / t0.elapsed().as_secs_f64();
        let total = rate * minutes * 60.0 * 0.7;
        let layers = self.cfg.teacher.n_layers as f64;
        let set = |p: &mut TrainPlan, share: f64| {
            let floor = (p.batch_size * train.context_len()) as u64;
            p.token_budget = Some(((total * share) as u64).max(floor));
        };
        set(&mut self.cfg.pretrain, 0.28);
        set(&mut self.cfg.hyena_pretrain, 0.24);
        set(&mut self.cfg.pkt, 0.18 / layers);
        set(&mut self.cfg.jkt, 0.10);
        set(&mut self.cfg.finetune, 0.20);
        println!("pipeline: {rate:.0} tokens/s, {total:.0} training tokens in total");
        write_atomic(&self.path(SNAPSHOT), self.cfg.to_toml().as_bytes())
    }

    fn pipeline(&mut self, budget_minutes: Option<f64>, skip_bench: bool) -> Result<()> {
        self.ingest(&[], None)?;
        if let Some(m) = budget_minutes {
            if self.fresh {
                self.calibrate(m)?;
            } else {
                println!("pipeline: using the budgets in {SNAPSHOT}");
            }
        }
        self.pretrain(PretrainRole::Teacher)?;
        self.pretrain(PretrainRole::Hyena)?;
        self.dump_activations()?;
        self.distill(DistillMode::Pkt)?;
        self.distill(DistillMode::Jkt)?;
        self.finetune(FinetuneFrom::Pkt)?;
        self.eval(&[])?;
        if !skip_bench {
            self.bench()?;
        }
        self.report()
    }
}
