use crate::{Command, Common};
use ssmtad::bench::{doubling_ratios, run_bench, to_csv, BenchConfig, Evaluator};
use ssmtad::checkpoint::{self, Checkpoint};
use ssmtad::config::{Mode, RunConfig};
use ssmtad::detector::ResultsFile;
use ssmtad::error::{Error, Result};
use ssmtad::eval::{fn_profile, matched_filter, mean_ap, synth_generate, AnnotationFile, Dataset, MatchedFilterConfig};
use ssmtad::model::Model;
use ssmtad::par::Exec;
use ssmtad::tensor::{DType, Scalar};
use ssmtad::train::{training_videos, CsvLog, Trainer};
use ssmtad::verify::{run_all, run_suite, Fault};
use std::fs;
use std::path::{Path, PathBuf};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;
pub const EXIT_ORACLE: u8 = 3;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synth { common, out, force } => synth(&common, out, force),
        Command::Train {
            common,
            out,
            data,
            e2e,
            dtype,
            resume,
            steps,
            force,
        } => {
            let opts = TrainOpts {
                out,
                data,
                e2e,
                dtype,
                resume,
                steps,
                force,
            };
            train(&common, &opts)
        }
        Command::Eval {
            common,
            checkpoint,
            results,
            data,
            split,
            out,
            force,
        } => evaluate(&common, checkpoint, results, data, split, &out, force),
        Command::Bench {
            lengths,
            evaluators,
            reps,
            sequential,
            out,
            force,
        } => bench(lengths, evaluators, reps, sequential, out, force),
        Command::Oracle { suite, fault } => oracle(&suite, fault),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    Ok(dir.is_dir() && fs::read_dir(dir)?.next().is_some())
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(Error::Invalid(format!("{} exists and is not a directory", dir.display())));
    }
    if is_nonempty_dir(dir)? && !force {
        return Err(Error::Invalid(format!(
            "output directory {} is not empty (pass --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn synth(common: &Common, out: Option<PathBuf>, force: bool) -> Result<u8> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
    }
    cfg.synth.validate()?;
    let out = out.unwrap_or_else(|| cfg.data.dataset.clone());
    prepare_out_dir(&out, force)?;
    let d = synth_generate(&cfg.synth)?;
    d.save(&out)?;
    let oracle = matched_filter(&d.annotations, &d.features, &MatchedFilterConfig::for_synth(&cfg.synth));
    let table = mean_ap(&oracle, &d.annotations, &cfg.eval.metric())?;
    println!(
        "wrote {} videos ({} instances) to {}; matched-filter avg mAP {:.4}",
        d.len(),
        d.annotations.num_instances(),
        out.display(),
        table.average
    );
    Ok(0)
}

struct TrainOpts {
    out: PathBuf,
    data: Option<PathBuf>,
    e2e: bool,
    dtype: Option<DType>,
    resume: Option<PathBuf>,
    steps: Option<usize>,
    force: bool,
}

fn train(common: &Common, opts: &TrainOpts) -> Result<u8> {
    let cfg = match &opts.resume {
        Some(dir) => {
            if common.config.is_some() {
                log::warn!("--config ignored: resuming uses the checkpoint's configuration");
            }
            checkpoint::load::<f64>(dir)?.config
        }
        None => {
            let mut cfg = load_config(common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if opts.e2e {
                cfg.mode = Mode::E2e;
                cfg.model.in_channels = cfg.backbone.d;
            }
            if let Some(dt) = opts.dtype {
                cfg.train.dtype = dt;
            }
            cfg.validate()?;
            cfg
        }
    };
    match cfg.train.dtype {
        DType::F32 => train_as::<f32>(cfg, opts),
        DType::F64 => train_as::<f64>(cfg, opts),
    }
}

fn train_as<T: Scalar>(cfg: RunConfig, opts: &TrainOpts) -> Result<u8> {
    let data = opts.data.clone().unwrap_or_else(|| cfg.data.dataset.clone());
    if !data.join("annotations.json").is_file() {
        return Err(Error::Invalid(format!(
            "no dataset at {} (run `ssmtad synth` first)",
            data.display()
        )));
    }
    let dataset = Dataset::load(&data)?;
    let out = &opts.out;
    if opts.resume.is_none() {
        prepare_out_dir(out, opts.force)?;
    } else {
        fs::create_dir_all(out)?;
    }
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    let videos = training_videos::<T>(&dataset, &cfg.data.train_prefix);
    if videos.is_empty() {
        return Err(Error::Invalid(format!(
            "dataset {} has no videos with prefix `{}`",
            data.display(),
            cfg.data.train_prefix
        )));
    }
    let mut tr = Trainer::<T>::from_config(&cfg, videos)?;
    tr.dump_dir = Some(out.clone());
    if let Some(dir) = &opts.resume {
        let ck: Checkpoint<T> = checkpoint::load(dir)?;
        ck.resume(&mut tr)?;
        log::info!("resumed from {} at step {}", dir.display(), tr.step);
    }
    let mut csv = CsvLog::create(&out.join(LOG_FILE), opts.resume.is_some())?;
    let until = opts.steps.unwrap_or(tr.total_steps);
    let every = cfg.train.checkpoint_every;
    log::info!(
        "training {} steps ({} per epoch, crop {}) in {}",
        until.min(tr.total_steps),
        tr.steps_per_epoch,
        tr.crop_len,
        T::DTYPE
    );
    tr.run(until, |tr, l| {
        csv.write(l)?;
        if l.step % 50 == 0 {
            log::info!("step {} loss {:.4} (cls {:.4} reg {:.4}) lr {:.2e}", l.step, l.loss, l.cls, l.reg, l.lr);
        }
        if every > 0 && tr.step % every == 0 {
            csv.flush()?;
            checkpoint::save_trainer(&out.join("checkpoints").join(format!("step_{:06}", tr.step)), tr)?;
        }
        Ok(())
    })?;
    csv.flush()?;
    let final_dir = out.join(CHECKPOINT_DIR);
    checkpoint::save_trainer(&final_dir, &tr)?;
    println!("trained to step {}; checkpoint at {}", tr.step, final_dir.display());
    Ok(0)
}

fn evaluate(
    common: &Common,
    checkpoint: Option<PathBuf>,
    results: Option<PathBuf>,
    data: Option<PathBuf>,
    split: Option<String>,
    out: &Path,
    force: bool,
) -> Result<u8> {
    let (cfg, ckpt_cfg) = match &checkpoint {
        Some(dir) => {
            let ck = checkpoint::load::<f64>(dir)?.config;
            let cfg = match &common.config {
                Some(p) => {
                    let mut c = ck.clone();
                    c.eval = RunConfig::load(p)?.eval;
                    c
                }
                None => ck.clone(),
            };
            (cfg, Some(ck))
        }
        None => (load_config(common)?, None),
    };
    let data = data.unwrap_or_else(|| cfg.data.dataset.clone());
    let split = split.unwrap_or_else(|| cfg.data.test_prefix.clone());
    prepare_out_dir(out, force)?;
    let (res, gts) = match (checkpoint, results) {
        (Some(dir), _) => {
            let dataset = Dataset::load(&data)?.subset(&split);
            let res = match ckpt_cfg.map(|c| c.train.dtype).unwrap_or(DType::F32) {
                DType::F32 => infer::<f32>(&dir, &cfg, &dataset)?,
                DType::F64 => infer::<f64>(&dir, &cfg, &dataset)?,
            };
            (res, dataset.annotations)
        }
        (None, Some(path)) => {
            let res = ResultsFile::from_json(&fs::read_to_string(&path)?)?;
            (res, AnnotationFile::load(&data.join("annotations.json"))?.subset(&split))
        }
        (None, None) => return Err(Error::Invalid("eval needs --checkpoint or --results".into())),
    };
    let metric = cfg.eval.metric();
    let table = mean_ap(&res, &gts, &metric)?;
    fs::write(out.join("results.json"), res.to_json()?)?;
    fs::write(out.join("metrics.csv"), table.to_csv())?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&table)?)?;
    let profiles: Vec<_> = metric.tiou_thresholds.iter().map(|&t| fn_profile(&res, &gts, t)).collect();
    fs::write(out.join("bins.json"), serde_json::to_string_pretty(&profiles)?)?;
    for (t, m) in table.thresholds.iter().zip(&table.map) {
        println!("mAP@{t:.2} {m:.4}");
    }
    println!("avg mAP {:.4}", table.average);
    Ok(0)
}

fn infer<T: Scalar>(dir: &Path, cfg: &RunConfig, dataset: &Dataset) -> Result<ResultsFile> {
    let ck: Checkpoint<T> = checkpoint::load(dir)?;
    let (model, mut store) = Model::build::<T>(&ck.config)?;
    ck.apply_params(&mut store)?;
    model.detect_dataset(&store, dataset, "", &cfg.eval.decode)
}

fn bench(lengths: Vec<usize>, evaluators: Vec<Evaluator>, reps: usize, sequential: bool, out: Option<PathBuf>, force: bool) -> Result<u8> {
    let cfg = BenchConfig {
        lengths,
        evaluators: evaluators.clone(),
        reps,
        exec: if sequential { Exec::Sequential } else { Exec::Parallel },
        ..BenchConfig::default()
    };
    if let Some(p) = &out {
        if p.exists() && !force {
            return Err(Error::Invalid(format!("{} exists (pass --force to overwrite)", p.display())));
        }
    }
    let recs = run_bench(&cfg)?;
    let csv = to_csv(&recs);
    match &out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    for e in evaluators {
        for (t, r) in doubling_ratios(&recs, e) {
            eprintln!("{e}: time({t}) / time({}) = {r:.3}", t / 2);
        }
    }
    Ok(0)
}

fn oracle(suite: &str, fault: Option<Fault>) -> Result<u8> {
    let reports = if suite == "all" {
        run_all(fault)?
    } else {
        vec![run_suite(suite, fault)?]
    };
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        println!("{failed} of {} suites failed", reports.len());
        Ok(EXIT_ORACLE)
    } else {
        println!("all {} suites passed", reports.len());
        Ok(0)
    }
}
