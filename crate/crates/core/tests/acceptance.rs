//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use ssmtad::bench::{doubling_ratios, run_bench, BenchConfig, Evaluator};
use ssmtad::checkpoint;
use ssmtad::config::{Mode, RunConfig};
use ssmtad::eval::{matched_filter, mean_ap, synth_generate, Dataset, MapTable, MatchedFilterConfig, SynthConfig};
use ssmtad::model::Model;
use ssmtad::params::{Binding, ParamStore};
use ssmtad::ssta::{adapt_backbone, count_trainable, BackboneConfig, SstaConfig, ToyBackbone, BACKBONE_PREFIX};
use ssmtad::tensor::{Graph, Tensor, Var};
use ssmtad::train::{training_videos, Trainer};
use ssmtad::verify::{op_cases, run_suite, SuiteReport};
use std::io::Write;
use std::time::{Duration, Instant};

type Verdict = Result<(bool, String), String>;
type Toggle = fn(&mut RunConfig);
type Forward<'a> = &'a dyn Fn(&mut Graph<f32>, &Binding, Var) -> ssmtad::error::Result<Var>;

struct Outcome {
    pass: bool,
}

fn criterion(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> Outcome {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = limit.is_none_or(|l| elapsed < l);
    let pass = ok && in_time;
    let budget = match limit {
        Some(l) if !in_time => format!(" (over the {:.0}s budget)", l.as_secs_f64()),
        _ => String::new(),
    };
    println!(
        "[{}] {id:>2}. {name}: {detail} [{:.1}s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stdout().flush();
    Outcome { pass }
}

fn suite(name: &str) -> Verdict {
    let r: SuiteReport = run_suite(name, None).map_err(|e| e.to_string())?;
    let detail = r
        .checks
        .iter()
        .map(|c| format!("{} {:.2e}<={:.0e}", c.what, c.max_err, c.tol))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((r.passed(), detail))
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn scaling() -> Verdict {
    let recs = run_bench(&BenchConfig::default()).map_err(|e| e.to_string())?;
    let par = doubling_ratios(&recs, Evaluator::Parallel);
    let dense = doubling_ratios(&recs, Evaluator::Dense);
    let ok = par.len() == 2 && dense.len() == 2 && par.iter().all(|r| r.1 <= 3.0) && dense.iter().all(|r| r.1 >= 3.4);
    let fmt = |v: &[(usize, f64)]| v.iter().map(|(t, r)| format!("{t}:{r:.2}")).collect::<Vec<_>>().join(",");
    Ok((ok, format!("parallel ratios {} (<=3.0), dense ratios {} (>=3.4)", fmt(&par), fmt(&dense))))
}

struct Trained {
    table: MapTable,
    train_time: Duration,
}

fn train_and_eval(cfg: &RunConfig, data: &Dataset) -> Result<Trained, String> {
    let start = Instant::now();
    let mut tr = Trainer::<f32>::from_config(cfg, training_videos(data, &cfg.data.train_prefix)).map_err(|e| e.to_string())?;
    let total = tr.total_steps;
    tr.run(total, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let train_time = start.elapsed();
    let res = tr
        .model
        .detect_dataset(&tr.store, data, &cfg.data.test_prefix, &cfg.eval.decode)
        .map_err(|e| e.to_string())?;
    let gts = data.annotations.subset(&cfg.data.test_prefix);
    let table = mean_ap(&res, &gts, &cfg.eval.metric()).map_err(|e| e.to_string())?;
    Ok(Trained { table, train_time })
}

fn toy_end_to_end(data: &Dataset, full: &mut Option<Trained>) -> Verdict {
    let cfg = RunConfig::default();
    let oracle = matched_filter(&data.annotations, &data.features, &MatchedFilterConfig::for_synth(&cfg.synth));
    let gts = data.annotations.subset(&cfg.data.test_prefix);
    let oracle_map = mean_ap(&oracle, &gts, &cfg.eval.metric()).map_err(|e| e.to_string())?.average;
    let t = train_and_eval(&cfg, data)?;
    let at5 = t.table.at(0.5).unwrap_or(f64::NAN);
    let ok = oracle_map >= 0.95 && at5 >= 0.85 && t.table.average >= 0.75 && t.train_time <= Duration::from_secs(600);
    let detail = format!(
        "matched filter {oracle_map:.3} (>=0.95); mAP {:?}; mAP@0.5 {at5:.3} (>=0.85); avg {:.3} (>=0.75); training {:.0}s (<=600)",
        t.table.map.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        t.table.average,
        t.train_time.as_secs_f64()
    );
    *full = Some(t);
    Ok((ok, detail))
}

fn ablation_direction(data: &Dataset, full: Option<&Trained>) -> Verdict {
    let base = RunConfig::default();
    let full_avg = match full {
        Some(t) => t.table.average,
        None => train_and_eval(&base, data)?.table.average,
    };
    let mut ok = true;
    let mut parts = vec![format!("full {full_avg:.3}")];
    let variants: [(&str, Toggle); 3] = [
        ("no-dual-branch", |c| c.model.dmbss.dual_branch = false),
        ("no-sharing", |c| c.model.dmbss.share_params = false),
        ("no-mask", |c| c.model.dmbss.diag_mask = false),
    ];
    for (name, toggle) in variants {
        let mut cfg = base.clone();
        toggle(&mut cfg);
        let avg = train_and_eval(&cfg, data)?.table.average;
        ok &= full_avg >= avg - 0.02;
        parts.push(format!("{name} {avg:.3}"));
    }
    Ok((ok, format!("{} (full >= each - 0.02)", parts.join(", "))))
}

fn ssta_contracts() -> Verdict {
    let bcfg = BackboneConfig {
        d: 16,
        blocks: 2,
        ..BackboneConfig::default()
    };
    let scfg = SstaConfig::default();
    let mut store = ParamStore::<f32>::new();
    let bb = ToyBackbone::init(&bcfg, &mut store).map_err(|e| e.to_string())?;
    let x = synth_generate(&SynthConfig {
        num_train: 1,
        num_test: 0,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?
    .features[0]
        .clone();
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let x = x.reshape(&[1, t, c]).map_err(|e| e.to_string())?;
    let run = |store: &ParamStore<f32>, f: Forward| {
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = f(&mut g, &bind, xv).map_err(|e| e.to_string())?;
        Ok::<_, String>(g.value(y).clone())
    };
    let frozen = run(&store, &|g, b, v| bb.forward(g, b, v))?;
    let ad = adapt_backbone(bb, &mut store, &scfg, 3).map_err(|e| e.to_string())?;
    let adapted = run(&store, &|g, b, v| ad.forward(g, b, v))?;
    let identity = bits(&frozen) == bits(&adapted);

    let counts = count_trainable(&store);
    let per = scfg.adapter_param_count(bcfg.d);
    let trainable = bcfg.blocks * per;
    let frozen_count = bcfg.blocks * bcfg.block_param_count() + bcfg.in_channels * bcfg.d + bcfg.d;
    let ratio_ok = counts.trainable == trainable
        && counts.frozen == frozen_count
        && counts.ratio() == trainable as f64 / (trainable + frozen_count) as f64;

    let mut cfg = RunConfig {
        mode: Mode::E2e,
        backbone: bcfg.clone(),
        ..RunConfig::default()
    };
    cfg.model.in_channels = bcfg.d;
    cfg.train.batch_size = 2;
    cfg.train.crop_len = 64;
    cfg.train.epochs = 100;
    let data = synth_generate(&SynthConfig {
        num_train: 2,
        num_test: 0,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let mut tr = Trainer::<f32>::from_config(&cfg, training_videos(&data, "train_")).map_err(|e| e.to_string())?;
    let before = tr.store.clone();
    tr.run(100, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let mut frozen_tensors = 0;
    let mut untouched = tr.step == 100;
    for id in before.ids().filter(|&id| before.name(id).starts_with(BACKBONE_PREFIX)) {
        frozen_tensors += 1;
        untouched &= bits(before.get(id)) == bits(tr.store.get(id));
    }
    untouched &= frozen_tensors > 0;

    let mut one = cfg.clone();
    one.ssta.lambda = 1;
    let rejected = SstaConfig { lambda: 1, ..scfg.clone() }.validate(bcfg.d).is_err()
        && RunConfig::from_json(&one.to_json().map_err(|e| e.to_string())?).is_err();

    Ok((
        identity && ratio_ok && untouched && rejected,
        format!(
            "W_up=0 identity {identity}; trainable {}/{} ratio {:.4} closed-form {ratio_ok}; \
             {frozen_tensors} frozen tensors bit-identical after {} steps {untouched}; lambda=1 rejected {rejected}",
            counts.trainable,
            counts.total(),
            counts.ratio(),
            tr.step
        ),
    ))
}

fn persistence() -> Verdict {
    let cfg = RunConfig::default();
    let small = SynthConfig {
        num_train: 3,
        num_test: 1,
        ..cfg.synth.clone()
    };
    let a = synth_generate(&small).map_err(|e| e.to_string())?;
    let b = synth_generate(&small).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    a.save(&dir.path().join("a")).map_err(|e| e.to_string())?;
    b.save(&dir.path().join("b")).map_err(|e| e.to_string())?;
    let mut same_files = true;
    for v in &a.annotations.videos {
        let rel = format!("features/{}.bin", v.id);
        same_files &= std::fs::read(dir.path().join("a").join(&rel)).ok() == std::fs::read(dir.path().join("b").join(&rel)).ok();
    }
    same_files &= std::fs::read(dir.path().join("a/annotations.json")).ok() == std::fs::read(dir.path().join("b/annotations.json")).ok();
    let synth_ok = a == b && same_files;

    let mut tr = Trainer::<f32>::from_config(&cfg, training_videos(&a, "train_")).map_err(|e| e.to_string())?;
    tr.run(3, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let ck_dir = dir.path().join("ck");
    checkpoint::save_trainer(&ck_dir, &tr).map_err(|e| e.to_string())?;
    let video = &a.features[0];
    let (p0, o0, _) = tr.model.predict(&tr.store, video).map_err(|e| e.to_string())?;
    let ck = checkpoint::load::<f32>(&ck_dir).map_err(|e| e.to_string())?;
    let (model, mut store) = Model::build::<f32>(&ck.config).map_err(|e| e.to_string())?;
    ck.apply_params(&mut store).map_err(|e| e.to_string())?;
    let (p1, o1, _) = model.predict(&store, video).map_err(|e| e.to_string())?;
    let ck_ok = bits(&p0) == bits(&p1) && bits(&o0) == bits(&o1) && ck.step == 3;
    Ok((
        synth_ok && ck_ok,
        format!("checkpoint round trip bit-exact {ck_ok}; synthetic data bit-reproducible {synth_ok}"),
    ))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    ssmtad::par::init_threads(None);
    let secs = |s| Some(Duration::from_secs(s));
    let mut outcomes = Vec::new();
    outcomes.push(criterion(1, "scan oracle equivalence", secs(10), || suite("dense-equivalence")));
    outcomes.push(criterion(2, "LTI kernel equivalence", secs(5), || suite("lti-kernel")));
    outcomes.push(criterion(3, "diagonal-mask semantics", secs(5), || suite("mask")));
    outcomes.push(criterion(4, "gradient suite", secs(60), || {
        let (ok, _) = suite("gradient-check")?;
        Ok((ok, format!("{} registered ops and 3 block configurations within tolerance", op_cases(0).len())))
    }));
    outcomes.push(criterion(5, "palindrome invariance", secs(10), || suite("palindrome")));
    outcomes.push(criterion(6, "linear scaling", secs(120), scaling));

    let data = synth_generate(&RunConfig::default().synth).expect("default synthetic dataset");
    let mut full = None;
    outcomes.push(criterion(7, "toy end-to-end", None, || toy_end_to_end(&data, &mut full)));
    outcomes.push(criterion(8, "ablation direction", None, || ablation_direction(&data, full.as_ref())));

    outcomes.push(criterion(9, "evaluator correctness", secs(10), || suite("ap-oracle")));
    outcomes.push(criterion(10, "characteristic bins", secs(1), || suite("bin-assignment")));
    outcomes.push(criterion(11, "adapter contracts", None, ssta_contracts));
    outcomes.push(criterion(12, "persistence", None, persistence));

    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
