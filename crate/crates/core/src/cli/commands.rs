use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{ExperimentConfig, Schedule, SimilaritySpace};
use crate::artifact::{
    create_csv, finish_csv, fmt_opt, open_csv, read_json, write_id_list, write_json, ArtifactHeader,
};
use crate::dataset::{Dataset, ForgetSpec};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_accuracies, mia_attack_with, read_reports_csv, removal_curve, write_curve_csv,
    write_reports_csv, write_timings_csv, ReportRow, ReportSets, UnlearnReport,
};
use crate::filter::{
    class_distribution, cosine_filter, random_selection, similarity_vectors, AgreementMatrix,
};
use crate::influence::{
    hessian_influence, less_influence, low_gradient_count_curve, lowest_gradients_scores,
    sample_subset, select_snapshots, HessianConfig, InfluenceScores, LessConfig, LooOracle, Mode,
};
use crate::model::{Arch, ModelParams, SolveOptions};
use crate::trainer::{train as run_training, GradientTrace, NormKind, Snapshot};
use crate::unlearn::{filtered_unlearn, Fractions, UnlearnAlgorithm};

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }

    pub fn trace(&self, kind: NormKind) -> PathBuf {
        self.root.join(format!("trace_{}.csv", kind.tag()))
    }

    pub fn snapshots(&self) -> PathBuf {
        self.root.join("snapshots.json")
    }

    pub fn train_summary(&self) -> PathBuf {
        self.root.join("train_summary.json")
    }

    pub fn forget(&self) -> PathBuf {
        self.root.join("forget.txt")
    }

    pub fn scores(&self, label: &str) -> (PathBuf, PathBuf) {
        let dir = self.root.join("scores");
        (
            dir.join(format!("{label}.csv")),
            dir.join(format!("{label}.json")),
        )
    }

    pub fn agreement(&self) -> PathBuf {
        self.root.join("scores").join("agreement.csv")
    }

    pub fn selection_dir(&self, x: f64) -> PathBuf {
        self.root.join("selections").join(format!("x{x}"))
    }

    pub fn class_distribution(&self) -> PathBuf {
        self.root.join("selections").join("class_distribution.csv")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.join("unlearn").join("runs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("unlearn").join("reports.csv")
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("unlearn").join("timings.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("unlearn").join("summary.csv")
    }

    pub fn summary_timings(&self) -> PathBuf {
        self.root.join("unlearn").join("summary_timings.csv")
    }

    pub fn curve(&self, label: &str) -> PathBuf {
        self.root.join("curves").join(format!("{label}.csv"))
    }

    pub fn low_gradient_count(&self) -> PathBuf {
        self.root.join("curves").join("low_gradient_count.csv")
    }
}

#[derive(Serialize)]
struct Provenanced<'a, T: Serialize> {
    provenance: &'a ArtifactHeader,
    #[serde(flatten)]
    body: &'a T,
}

fn write_doc<T: Serialize>(path: &Path, header: &ArtifactHeader, body: &T) -> Result<()> {
    write_json(
        path,
        &Provenanced {
            provenance: header,
            body,
        },
    )
}

struct Context {
    cfg: ExperimentConfig,
    layout: Layout,
    header: ArtifactHeader,
    train: Dataset,
    test: Dataset,
    arch: Arch,
    spec: ForgetSpec,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = cfg.datasets()?;
        let arch = cfg.arch(&train);
        let spec = cfg.forget_spec(&train)?;
        Ok(Self {
            layout: Layout::new(&cfg.out_dir),
            header: cfg.header(),
            cfg: cfg.clone(),
            train,
            test,
            arch,
            spec,
        })
    }

    fn model(&self) -> Result<ModelParams> {
        let m = ModelParams::load(self.layout.model())?;
        if m.arch != self.arch {
            return Err(Error::Config(format!(
                "{} was trained for a different architecture; rerun `train`",
                self.layout.model().display()
            )));
        }
        Ok(m)
    }

    fn test_subset(&self) -> Dataset {
        sample_subset(
            &self.test,
            self.cfg.influence.test_subset_size,
            self.cfg.seed("test_subset"),
        )
    }

    fn load_scores(&self, label: &str) -> Result<InfluenceScores> {
        let (csv, meta) = self.layout.scores(label);
        let s = InfluenceScores::read(&csv, &meta)?;
        if !s.covers(&self.train) {
            return Err(Error::Config(format!(
                "{} does not cover the training set; rerun `influence`",
                csv.display()
            )));
        }
        Ok(s)
    }
}

fn parse_mode(s: &str) -> Result<Mode> {
    Mode::parse(s)
        .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected test or self")))
}

/// File label of a method under `mode`; gradient heuristics are always
/// self-influence.
fn score_label(method: &str, mode: Mode) -> String {
    let mode = if method.starts_with("lowest_gradients") {
        Mode::SelfInfluence
    } else {
        mode
    };
    format!("{method}_{}", mode.tag())
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = Context::new(cfg)?;
    let tc = cfg.train_config();
    let out = run_training(&ctx.train, ctx.arch, cfg.model.l2_lambda, &tc)?;
    if !out.converged {
        log::warn!(
            "training stopped after {} epochs with mean gradient norm {:.3e}",
            out.epochs_run,
            out.final_grad_norm
        );
    }
    out.params.save(ctx.layout.model())?;
    out.trace_l2
        .write_csv(&ctx.layout.trace(NormKind::L2), Some(&ctx.header))?;
    out.trace_linf
        .write_csv(&ctx.layout.trace(NormKind::LInf), Some(&ctx.header))?;
    write_json(&ctx.layout.snapshots(), &out.snapshots)?;
    write_id_list(
        &ctx.layout.forget(),
        &ctx.spec.forget_ids,
        Some(&ctx.header),
    )?;

    let train_acc = out.params.accuracy_on(&ctx.train)?;
    let test_acc = out.params.accuracy_on(&ctx.test)?;
    #[derive(Serialize)]
    struct Summary {
        epochs_run: usize,
        converged: bool,
        final_grad_norm: f64,
        train_accuracy: f64,
        test_accuracy: f64,
        model_checksum: String,
    }
    write_doc(
        &ctx.layout.train_summary(),
        &ctx.header,
        &Summary {
            epochs_run: out.epochs_run,
            converged: out.converged,
            final_grad_norm: out.final_grad_norm,
            train_accuracy: train_acc,
            test_accuracy: test_acc,
            model_checksum: out.params.checksum(),
        },
    )?;
    println!("epochs run:     {}", out.epochs_run);
    println!("train accuracy: {train_acc:.4}");
    println!("test accuracy:  {test_acc:.4}");
    println!("checkpoint:     {}", ctx.layout.model().display());
    Ok(())
}

fn compute_scores(
    ctx: &Context,
    model: &ModelParams,
    method: &str,
    mode: Mode,
) -> Result<InfluenceScores> {
    let cfg = &ctx.cfg.influence;
    let test_subset = ctx.test_subset();
    let mut scores = match method {
        "hessian" => hessian_influence(
            model,
            &ctx.train,
            mode,
            Some(&test_subset),
            &HessianConfig {
                damping: cfg.damping,
                solve: SolveOptions {
                    tol: cfg.solver_tol,
                    max_iter: None,
                },
                curvature: ctx.cfg.model.curvature,
                ..HessianConfig::default()
            },
        )?,
        "less" => {
            let path = ctx.layout.snapshots();
            let snaps: Vec<Snapshot> = read_json(&path)?;
            let picked = select_snapshots(&snaps, cfg.from_checkpoint, cfg.less_checkpoints);
            less_influence(
                &picked,
                &ctx.train,
                mode,
                Some(&test_subset),
                &LessConfig {
                    projection_dim: cfg.projection_dim,
                    projection: cfg.projection,
                    seed: ctx.cfg.seed("less"),
                    adam_normalize: cfg.adam_normalize,
                    ..LessConfig::default()
                },
            )?
        }
        "lowest_gradients" | "lowest_gradients_linf" => {
            if mode != Mode::SelfInfluence {
                return Err(Error::Config("lowest_gradients is defined in self mode only".into()));
            }
            let kind = if method == "lowest_gradients" {
                cfg.norm
            } else {
                NormKind::LInf
            };
            let trace = GradientTrace::read_csv(&ctx.layout.trace(kind), kind)?;
            lowest_gradients_scores(&trace, cfg.from_checkpoint)?
        }
        "exact_loo" => {
            let oracle = LooOracle::new(
                &ctx.train,
                ctx.arch,
                ctx.cfg.model.l2_lambda,
                &ctx.cfg.train_config(),
                cfg.oracle_repeats,
            )?;
            oracle.scores(mode, Some(&test_subset), cfg.oracle_value)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown method {other:?}; expected hessian, less, lowest_gradients, lowest_gradients_linf, exact_loo or all"
            )))
        }
    };
    if mode == Mode::Test && !matches!(method, "exact_loo") {
        scores.metadata.seeds.push(ctx.cfg.seed("test_subset"));
    }
    Ok(scores)
}

pub fn influence(cfg: &ExperimentConfig, method: &str, mode: Option<&str>) -> Result<()> {
    let ctx = Context::new(cfg)?;
    let mode = match mode {
        Some(m) => parse_mode(m)?,
        None => cfg.influence.mode,
    };
    let model = ctx.model()?;
    let methods: Vec<&str> = if method == "all" {
        vec![
            "hessian",
            "less",
            "lowest_gradients",
            "lowest_gradients_linf",
        ]
    } else {
        vec![method]
    };
    let mut computed = Vec::new();
    for m in &methods {
        let label = score_label(m, mode);
        let mode = if m.starts_with("lowest_gradients") {
            Mode::SelfInfluence
        } else {
            mode
        };
        let scores = compute_scores(&ctx, &model, m, mode)?;
        for w in &scores.metadata.warnings {
            log::warn!("{label}: {w}");
        }
        let (csv, meta) = ctx.layout.scores(&label);
        scores.write_csv(&csv, Some(&ctx.header))?;
        scores.write_metadata(&meta)?;
        println!("{label}: {} scores -> {}", scores.len(), csv.display());
        computed.push((label, scores));
    }
    if method == "all" {
        let (labels, scores): (Vec<String>, Vec<InfluenceScores>) = computed.into_iter().unzip();
        let matrix = AgreementMatrix::compute(labels, &scores, cfg.influence.agreement_fraction)?;
        matrix.write_csv(&ctx.layout.agreement(), Some(&ctx.header))?;
        println!("agreement matrix -> {}", ctx.layout.agreement().display());
    }
    Ok(())
}

fn fractions(cfg: &ExperimentConfig, x: f64) -> Fractions {
    match cfg.unlearn.schedule {
        Schedule::Combined => Fractions::Combined { x },
        Schedule::Independent { x_retain } => Fractions::Independent {
            forget: x,
            retain: x_retain,
        },
    }
}

pub fn filter(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = Context::new(cfg)?;
    let label = score_label(&cfg.filter.method, cfg.filter.mode);
    let scores = ctx.load_scores(&label)?;
    let use_repr = match cfg.filter.similarity {
        SimilaritySpace::Auto => matches!(ctx.arch, Arch::Mlp { .. }),
        SimilaritySpace::Features => false,
        SimilaritySpace::Representation => true,
    };
    let model = if use_repr { Some(ctx.model()?) } else { None };
    let vectors = similarity_vectors(&ctx.train, model.as_ref())?;

    let dist_path = ctx.layout.class_distribution();
    let mut dist = create_csv(&dist_path, Some(&ctx.header))?;
    dist.write_record(["x", "class", "count"])?;
    for &x in &cfg.filter.x_grid {
        let sel = fractions(cfg, x).selection(&scores, &ctx.spec)?;
        let dir = ctx.layout.selection_dir(x);
        write_id_list(&dir.join("d_li.txt"), &sel.selected, Some(&ctx.header))?;
        write_id_list(&dir.join("s_hi.txt"), &sel.s_hi, Some(&ctx.header))?;
        write_id_list(&dir.join("r_hi.txt"), &sel.r_hi, Some(&ctx.header))?;
        for (class, count) in class_distribution(&sel.selected, &ctx.train)? {
            dist.write_record([x.to_string(), class.to_string(), count.to_string()])?;
        }
        if cfg.filter.random_baseline {
            let random = random_selection(
                &ctx.train.id_set(),
                sel.selected.len(),
                cfg.seed(&format!("filter:random:{x}")),
            )?;
            write_id_list(&dir.join("random.txt"), &random, Some(&ctx.header))?;
        }
        let removed_forget = ctx.spec.forget_ids.len() - sel.s_hi.len();
        if let (Some(cos), true) = (cfg.filter.cosine, removed_forget > 0) {
            match cosine_filter(
                &ctx.train,
                &vectors,
                &ctx.spec,
                cos.c,
                cos.k,
                removed_forget,
                cfg.seed(&format!("filter:cosine:{x}")),
            ) {
                Ok(picked) => write_id_list(&dir.join("cosine.txt"), &picked, Some(&ctx.header))?,
                Err(Error::Parameter(msg)) => log::warn!("cosine baseline at x={x}: {msg}"),
                Err(e) => return Err(e),
            }
        }
        println!(
            "x={x}: |D_LI|={} |S_HI|={} |R_HI|={}",
            sel.selected.len(),
            sel.s_hi.len(),
            sel.r_hi.len()
        );
    }
    finish_csv(dist, &dist_path)
}

pub fn unlearn(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = Context::new(cfg)?;
    let model = ctx.model()?;
    let label = score_label(&cfg.filter.method, cfg.filter.mode);
    let scores = ctx.load_scores(&label)?;
    let tc = cfg.train_config();
    let forget_full = ctx.train.subset(&ctx.spec.forget_ids)?;
    let retain_full = ctx.train.subset(&ctx.spec.retain_ids)?;

    let mut reports = Vec::new();
    for (a, kind) in cfg.unlearn.algorithms.iter().enumerate() {
        for &x in &cfg.filter.x_grid {
            for i in 0..cfg.unlearn.n_seeds {
                let alg = UnlearnAlgorithm {
                    kind: *kind,
                    seed: cfg.seed(&format!("unlearn:{a}:{i}")),
                };
                let (run, sel) = filtered_unlearn(
                    &model,
                    &ctx.train,
                    &ctx.spec,
                    &scores,
                    fractions(cfg, x),
                    &alg,
                    &tc,
                )?;
                let forget_kept = ctx.train.subset(&sel.s_hi)?;
                let removed = ctx.train.subset(&sel.selected)?;
                let accuracies = evaluate_accuracies(
                    &run.output,
                    &ReportSets {
                        forget_full: &forget_full,
                        forget_kept: &forget_kept,
                        removed_li: &removed,
                        retain_full: &retain_full,
                        test: &ctx.test,
                    },
                )?;
                let mia = mia_attack_with(
                    &run.output,
                    &forget_full,
                    &ctx.test,
                    cfg.eval.mia_folds,
                    cfg.seed(&format!("mia:{i}")),
                    cfg.eval.mia_features,
                )?;
                let stem = format!("{}_x{x}_seed{i}", alg.name());
                let checkpoint = ctx.layout.run_dir().join(format!("{stem}.model.json"));
                run.output.save(&checkpoint)?;
                let report = UnlearnReport {
                    method: cfg.filter.method.clone(),
                    mode: cfg.filter.mode.tag().to_string(),
                    algorithm: alg.name().to_string(),
                    x,
                    seed: i as u64,
                    n_forget_kept: sel.s_hi.len(),
                    n_retain_kept: sel.r_hi.len(),
                    n_removed: sel.selected.len(),
                    accuracies,
                    mia,
                    wall_clock_seconds: run.wall_clock_seconds,
                    output_checksum: run.output.checksum(),
                    checkpoint: Some(checkpoint.display().to_string()),
                };
                write_doc(
                    &ctx.layout.run_dir().join(format!("{stem}.json")),
                    &ctx.header,
                    &report,
                )?;
                println!(
                    "{:<16} x={x:<4} seed={i} acc_test={} mia={:.3}+-{:.3} {:.4}s",
                    alg.name(),
                    fmt_opt(report.accuracies.test),
                    mia.attack_accuracy,
                    mia.ci95_halfwidth,
                    run.wall_clock_seconds
                );
                reports.push(report);
            }
        }
    }
    write_reports_csv(&ctx.layout.reports(), &reports, Some(&ctx.header))?;
    write_timings_csv(&ctx.layout.timings(), &reports, Some(&ctx.header))?;
    println!(
        "{} runs -> {}",
        reports.len(),
        ctx.layout.reports().display()
    );
    Ok(())
}

pub fn curve(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = Context::new(cfg)?;
    let tc = cfg.train_config();
    for method in &cfg.influence.methods {
        if method == "exact_loo" {
            continue;
        }
        let label = score_label(method, cfg.influence.mode);
        let scores = ctx.load_scores(&label)?;
        let points = removal_curve(
            &ctx.train,
            &ctx.test,
            &scores,
            &cfg.eval.removal_sizes,
            ctx.arch,
            cfg.model.l2_lambda,
            &tc,
            cfg.seed("curve:random"),
        )?;
        let path = ctx.layout.curve(&label);
        write_curve_csv(&path, &label, &points, Some(&ctx.header))?;
        println!(
            "{label}: {} grid points -> {}",
            points.len(),
            path.display()
        );
    }
    let kind = cfg.influence.norm;
    let trace = GradientTrace::read_csv(&ctx.layout.trace(kind), kind)?;
    let counts = low_gradient_count_curve(&trace, cfg.eval.low_grad_percentile)?;
    let path = ctx.layout.low_gradient_count();
    let mut wtr = create_csv(&path, Some(&ctx.header))?;
    wtr.write_record(["checkpoint", "epoch", "count"])?;
    for c in &counts {
        wtr.write_record([
            c.checkpoint.to_string(),
            c.epoch.to_string(),
            c.count.to_string(),
        ])?;
    }
    finish_csv(wtr, &path)?;
    println!(
        "low-gradient counts: {} checkpoints -> {}",
        counts.len(),
        path.display()
    );
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn report(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let header = cfg.header();
    let rows = read_reports_csv(&layout.reports())?;
    let mut seconds: BTreeMap<(String, String, u64), f64> = BTreeMap::new();
    let mut rdr = open_csv(&layout.timings())?;
    for rec in rdr.records() {
        let rec = rec?;
        let secs: f64 = rec[5]
            .parse()
            .map_err(|_| Error::param(format!("bad seconds in {}", layout.timings().display())))?;
        let seed: u64 = rec[4]
            .parse()
            .map_err(|_| Error::param(format!("bad seed in {}", layout.timings().display())))?;
        seconds.insert((rec[2].to_string(), rec[3].to_string(), seed), secs);
    }

    type GroupKey = (String, String, String, String);
    let mut groups: Vec<(GroupKey, Vec<&ReportRow>)> = Vec::new();
    for r in &rows {
        let key = (
            r.method.clone(),
            r.mode.clone(),
            r.algorithm.clone(),
            r.x.to_string(),
        );
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }

    let path = layout.summary();
    let mut wtr = create_csv(&path, Some(&header))?;
    wtr.write_record([
        "method",
        "mode",
        "algorithm",
        "x",
        "runs",
        "acc_forget_full",
        "acc_forget_kept",
        "acc_removed_li",
        "acc_retain_full",
        "acc_test",
        "mia_acc",
        "mia_ci",
    ])?;
    let tpath = layout.summary_timings();
    let mut twtr = create_csv(&tpath, Some(&header))?;
    twtr.write_record(["method", "mode", "algorithm", "x", "runs", "mean_seconds"])?;
    println!(
        "{:<16} {:>5} {:>6} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "algorithm", "x", "runs", "forget", "retain", "test", "mia", "seconds"
    );
    for ((method, mode, alg, x), g) in &groups {
        let acc = |f: fn(&ReportRow) -> Option<f64>| mean(g.iter().filter_map(|r| f(r)));
        let forget = acc(|r| r.accuracies.forget_full);
        let retain = acc(|r| r.accuracies.retain_full);
        let test = acc(|r| r.accuracies.test);
        let mia = mean(g.iter().map(|r| r.mia_acc)).unwrap_or(f64::NAN);
        wtr.write_record([
            method.clone(),
            mode.clone(),
            alg.clone(),
            x.clone(),
            g.len().to_string(),
            fmt_opt(forget),
            fmt_opt(acc(|r| r.accuracies.forget_kept)),
            fmt_opt(acc(|r| r.accuracies.removed_li)),
            fmt_opt(retain),
            fmt_opt(test),
            mia.to_string(),
            mean(g.iter().map(|r| r.mia_ci))
                .unwrap_or(f64::NAN)
                .to_string(),
        ])?;
        let secs = mean(
            g.iter()
                .filter_map(|r| seconds.get(&(alg.clone(), x.clone(), r.seed)).copied()),
        );
        twtr.write_record([
            method.clone(),
            mode.clone(),
            alg.clone(),
            x.clone(),
            g.len().to_string(),
            fmt_opt(secs),
        ])?;
        let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<16} {:>5} {:>6} {:>8} {:>8} {:>8} {:>8.4} {:>9}",
            alg,
            x,
            g.len(),
            show(forget),
            show(retain),
            show(test),
            mia,
            secs.map_or("-".to_string(), |s| format!("{s:.5}"))
        );
    }
    finish_csv(wtr, &path)?;
    finish_csv(twtr, &tpath)?;
    println!("summary -> {}", path.display());
    Ok(())
}
