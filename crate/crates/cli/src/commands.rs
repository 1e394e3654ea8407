use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tracecast::config::{load_config, RunConfig};
use tracecast::detector::{detect, reference_forecast, run_estimates, DetectionSummary, Estimates};
use tracecast::graphnet::TOP_K_GRID;
use tracecast::harness::{
    ablation_summary, cell_dir, complexity_report, desk_corpus, prepare_trace, read_dataset, run_sweep, train_model,
    write_dataset, Architecture, ExperimentPlan, ModelKind, PreparedDataset, ResultTable, TrainedModel,
    DESCRIPTOR_FILE, DESK_TOP_K, DESK_WINDOWS, FULL_WINDOWS, INJECTED_FILE,
};
use tracecast::synth::{describe, generate, LabeledTrace};
use tracecast::{dataset, Error, Result, TrainingConfig, Trace};

use crate::{Command, GlobalArgs};

const RAW_FILE: &str = "trace.csv";
const OUT_ENV: &str = "TRACECAST_OUT";

struct Ctx {
    config: Option<RunConfig>,
    out: PathBuf,
    quiet: bool,
    full_grid: bool,
    workers: usize,
}

impl Ctx {
    fn new(args: &GlobalArgs) -> Result<Self> {
        let mut config = args.config.as_deref().map(load_config).transpose()?;
        if let (Some(c), Some(seed)) = (config.as_mut(), args.seed) {
            c.seed = seed;
        }
        let out = args
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| config.as_ref().and_then(|c| c.out_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self {
            config,
            out,
            quiet: args.quiet,
            full_grid: args.full_grid,
            workers: args.workers.max(1),
        })
    }

    fn config(&self, command: &str) -> Result<&RunConfig> {
        self.config.as_ref().ok_or_else(|| {
            Error::Config(vec![tracecast::error::ConfigIssue {
                path: "--config".into(),
                message: format!("`{command}` needs a configuration file"),
            }])
        })
    }

    fn dataset_dir(&self, config: &RunConfig) -> PathBuf {
        self.out.join(&config.dataset.name)
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            let _ = writeln!(std::io::stdout(), "{}", line.as_ref());
        }
    }

    fn windows(&self) -> Vec<(usize, usize)> {
        if self.full_grid {
            FULL_WINDOWS.to_vec()
        } else {
            DESK_WINDOWS.to_vec()
        }
    }
}

pub fn run(command: Command, args: &GlobalArgs) -> Result<()> {
    let ctx = Ctx::new(args)?;
    match command {
        Command::Synth => synth(&ctx),
        Command::Inject => inject(&ctx),
        Command::Train => train(&ctx),
        Command::Forecast => forecast(&ctx),
        Command::Detect => detect_cmd(&ctx),
        Command::Eval => eval(&ctx),
        Command::Bench => bench(&ctx),
        Command::Ablate => ablate(&ctx),
        Command::Complexity => complexity(&ctx),
    }
}

fn synth(ctx: &Ctx) -> Result<()> {
    let config = ctx.config("synth")?;
    let raw = generate(&config.dataset.recipe)?;
    let dir = ctx.dataset_dir(config);
    raw.save(&dir.join(RAW_FILE))?;
    let descriptor = describe(&LabeledTrace::clean(raw.clone()));
    std::fs::write(dir.join(DESCRIPTOR_FILE), serde_json::to_vec_pretty(&descriptor)?)?;
    ctx.say(format!(
        "wrote {} ({} runs x {} samples, {} variables)",
        dir.join(RAW_FILE).display(),
        raw.run_count(),
        raw.run_length(),
        raw.width()
    ));
    Ok(())
}

fn inject(ctx: &Ctx) -> Result<()> {
    let config = ctx.config("inject")?;
    let dir = ctx.dataset_dir(config);
    let raw = load_raw(&dir, config)?;
    let data = prepare_trace(&config.dataset.name, &raw, &config.dataset.anomalies)?;
    write_dataset(&data, &dir)?;
    let d = &data.descriptor;
    ctx.say(format!(
        "wrote {}: {} attacked variable(s), categories [{}], anomaly ratio {:.3}",
        dir.join(INJECTED_FILE).display(),
        d.attacked_variables,
        d.categories,
        d.anomaly_ratio
    ));
    Ok(())
}

fn load_raw(dir: &Path, config: &RunConfig) -> Result<Trace> {
    let path = dir.join(RAW_FILE);
    if !path.exists() {
        return Err(Error::MissingInput {
            path,
            what: "raw trace (run `synth` first)".into(),
        });
    }
    dataset::load_trace(&path, config.dataset.recipe.run_count)
}

fn load_prepared(ctx: &Ctx, config: &RunConfig) -> Result<PreparedDataset> {
    let dir = ctx.dataset_dir(config);
    let path = dir.join(INJECTED_FILE);
    if !path.exists() {
        return Err(Error::MissingInput {
            path,
            what: "injected trace (run `inject` first)".into(),
        });
    }
    read_dataset(&dir, &config.dataset.name, config.dataset.recipe.run_count)
}

fn top_k(config: &RunConfig) -> Option<usize> {
    (config.model.kind == ModelKind::Gnn).then_some(config.model.top_k)
}

fn model_dir(ctx: &Ctx, config: &RunConfig, window: (usize, usize)) -> PathBuf {
    cell_dir(&ctx.out, &config.dataset.name, config.model.kind, window, top_k(config))
}

fn train(ctx: &Ctx) -> Result<()> {
    let config = ctx.config("train")?;
    let data = load_prepared(ctx, config)?;
    let names = data.train.variable_names().to_vec();
    for &window in &config.windows {
        let started = Instant::now();
        let model = train_model(
            &data,
            config.model.kind,
            window,
            top_k(config),
            &config.training,
            &config.model.architecture(),
            config.seed,
        )
        .map_err(|e| e.context(format!("training {}x{}", window.0, window.1)))?;
        let dir = model_dir(ctx, config, window);
        std::fs::create_dir_all(&dir)?;
        model.save(&dir, &names, config.seed)?;
        ctx.say(format!(
            "trained {} {}x{}: {} parameters in {:.1} s -> {}",
            config.model.kind.as_str(),
            window.0,
            window.1,
            model.parameter_count(),
            started.elapsed().as_secs_f64(),
            dir.display()
        ));
    }
    Ok(())
}

fn load_model(ctx: &Ctx, config: &RunConfig, window: (usize, usize), names: &[String]) -> Result<TrainedModel> {
    TrainedModel::load(&model_dir(ctx, config, window), config.model.kind, names)
        .map_err(|e| e.context("loading the trained model (run `train` first)"))
}

fn write_estimates(path: &Path, e: &Estimates, names: &[String], interval: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time".to_string(), "coverage".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for tau in 0..e.len() {
        let mut rec = vec![format!("{}", tau as f64 * interval), e.coverage[tau].to_string()];
        if e.coverage[tau] > 0 {
            rec.extend(e.row(tau).iter().map(|v| v.to_string()));
        } else {
            rec.extend(names.iter().map(|_| String::new()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn forecast(ctx: &Ctx) -> Result<()> {
    let config = ctx.config("forecast")?;
    let data = load_prepared(ctx, config)?;
    let names = data.test.variable_names().to_vec();
    let interval = data.test.sample_interval_s();
    for &window in &config.windows {
        let model = load_model(ctx, config, window, &names)?;
        let dir = model_dir(ctx, config, window);
        let test = run_estimates(model.predictor(), &data.test)?;
        let reference = reference_forecast(model.predictor(), &data.train)?;
        write_estimates(&dir.join("forecast.csv"), &test, &names, interval)?;
        write_estimates(&dir.join("reference.csv"), &reference, &names, interval)?;
        ctx.say(format!("wrote forecasts for {}x{} to {}", window.0, window.1, dir.display()));
    }
    Ok(())
}

fn detect_cmd(ctx: &Ctx) -> Result<()> {
    let config = ctx.config("detect")?;
    let data = load_prepared(ctx, config)?;
    let names = data.test.variable_names().to_vec();
    for &window in &config.windows {
        let model = load_model(ctx, config, window, &names)?;
        let report = detect(model.predictor(), &data.train, &data.test, &data.test_labels, config.detection)?;
        let dir = model_dir(ctx, config, window).join("detection");
        report.save(&dir, &data.test)?;
        let m = report.summary.metrics;
        ctx.say(format!(
            "{}x{}: precision {:.3} recall {:.3} F1 {:.3} ({} of {} points flagged) -> {}",
            window.0,
            window.1,
            m.precision,
            m.recall,
            m.f1,
            report.summary.flagged_points,
            report.summary.covered_points,
            dir.display()
        ));
    }
    Ok(())
}

fn eval(ctx: &Ctx) -> Result<()> {
    let config = ctx.config("eval")?;
    let mut summaries: Vec<DetectionSummary> = Vec::new();
    for &window in &config.windows {
        let path = model_dir(ctx, config, window).join("detection").join("summary.json");
        let bytes = std::fs::read(&path).map_err(|_| Error::MissingInput {
            path: path.clone(),
            what: "detection summary (run `detect` first)".into(),
        })?;
        summaries.push(serde_json::from_slice(&bytes)?);
    }
    let path = ctx.dataset_dir(config).join(format!("eval-{}.json", config.model.kind.as_str()));
    std::fs::write(&path, serde_json::to_vec_pretty(&summaries)?)?;
    ctx.say("lookback,horizon,precision,recall,f1,tp,fp,fn,tn");
    for s in &summaries {
        let m = s.metrics;
        ctx.say(format!(
            "{},{},{:.4},{:.4},{:.4},{},{},{},{}",
            s.lookback, s.horizon, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_, m.tn
        ));
    }
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

fn sweep_plan(ctx: &Ctx, models: Vec<ModelKind>, top_k: Vec<usize>) -> Result<ExperimentPlan> {
    let (datasets, training, detection, architecture, seed) = match &ctx.config {
        Some(c) => (
            vec![c.dataset.clone()],
            c.training.clone(),
            c.detection,
            c.model.architecture(),
            c.seed,
        ),
        None => (
            desk_corpus(16, 500, 7)?,
            TrainingConfig::default(),
            Default::default(),
            Architecture::default(),
            0,
        ),
    };
    let width = datasets[0].recipe.classes().len();
    let top_k: Vec<usize> = top_k.into_iter().filter(|&k| k < width.max(2)).collect();
    Ok(ExperimentPlan {
        datasets,
        models,
        windows: ctx.windows(),
        top_k,
        seed,
        detection,
        training,
        out_dir: Some(ctx.out.clone()),
        workers: ctx.workers,
        architecture,
    })
}

fn bench(ctx: &Ctx) -> Result<()> {
    let plan = sweep_plan(ctx, vec![ModelKind::Nbeats, ModelKind::Gnn], DESK_TOP_K.to_vec())?;
    let table = run_sweep(&plan)?;
    if !ctx.quiet {
        let _ = write!(std::io::stdout(), "{}", table.to_csv(true)?);
    }
    ctx.say(format!("wrote {}", ctx.out.join("results.csv").display()));
    Ok(())
}

fn ablate(ctx: &Ctx) -> Result<()> {
    let plan = sweep_plan(ctx, vec![ModelKind::Gnn], TOP_K_GRID.to_vec())?;
    let table = run_sweep(&plan)?;
    let rows = ablation_summary(&table);
    let path = ctx.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    std::fs::write(ctx.out.join("ablation.json"), serde_json::to_vec_pretty(&rows)?)?;
    ctx.say("top_k,lookback,horizon,f1,precision,recall,test_mse,datasets");
    for r in &rows {
        ctx.say(format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.5},{}",
            r.top_k, r.lookback, r.horizon, r.f1, r.precision, r.recall, r.test_mse, r.count
        ));
    }
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

fn complexity(ctx: &Ctx) -> Result<()> {
    let (width, architecture) = match &ctx.config {
        Some(c) => (c.width(), c.model.architecture()),
        None => (131, Architecture::default()),
    };
    let timings = ResultTable::load(&ctx.out)?;
    let rows = complexity_report(width, &FULL_WINDOWS, &architecture, timings.as_ref())?;
    std::fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("complexity.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    std::fs::write(ctx.out.join("complexity.json"), serde_json::to_vec_pretty(&rows)?)?;
    ctx.say(format!("D = {width}"));
    ctx.say("lookback,horizon,nbeats_per_variable,nbeats_total,gnn,ratio");
    for r in &rows {
        ctx.say(format!(
            "{},{},{},{},{},{:.2}",
            r.lookback, r.horizon, r.nbeats_per_variable, r.nbeats_total, r.gnn, r.ratio
        ));
    }
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}
