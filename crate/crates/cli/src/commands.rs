use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fdgnn_core::autodiff::ParamStore;
use fdgnn_core::baselines::{greedy_top_l, wmmse, WmmseConfig};
use fdgnn_core::fgnn::{
    evaluate_against, fit_feature_norm, forward_sample, init_params, train_from, Sample,
    ValidationSet,
};
use fdgnn_core::netgen::{
    read_dataset, sample_dataset, sample_instance, write_dataset, NetworkInstance,
};
use fdgnn_core::phy::{weighted_sum_rate, PowerAllocation};
use fdgnn_core::rng::child_seed;
use fdgnn_core::threshold::{ideal_threshold, threshold_sweep as sweep, SweepData};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{sidecar, RunManifest};
use crate::Common;

const TRAIN_FILE: &str = "train.jsonl";
const TEST_FILE: &str = "test.jsonl";

#[derive(Clone, Copy)]
enum Split {
    Train,
    Test,
}

/// Instances of one split, read from `data` or sampled from the config.
fn load_split(
    cfg: &RunConfig,
    seed: u64,
    data: Option<&Path>,
    split: Split,
) -> Result<(Vec<NetworkInstance>, Vec<PathBuf>)> {
    let (file, stream, count) = match split {
        Split::Train => (TRAIN_FILE, 0, cfg.num_train),
        Split::Test => (TEST_FILE, 1, cfg.num_test),
    };
    match data {
        Some(dir) => {
            let path = dir.join(file);
            let insts =
                read_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok((insts, vec![path]))
        }
        None => Ok((
            sample_dataset(&cfg.network(seed), child_seed(seed, stream), count)?,
            vec![],
        )),
    }
}

fn samples(insts: &[NetworkInstance], t: Option<f64>) -> Vec<Sample> {
    insts
        .par_iter()
        .map(|inst| {
            let s = Sample::from_instance(inst.clone());
            match t {
                Some(t) => s.truncated(t),
                None => s,
            }
        })
        .collect()
}

fn wmmse_powers(insts: &[NetworkInstance], cfg: &WmmseConfig) -> Result<Vec<PowerAllocation>> {
    Ok(insts
        .par_iter()
        .map(|i| wmmse(i, cfg))
        .collect::<Result<_, _>>()?)
}

fn sum_rates(insts: &[NetworkInstance], powers: &[PowerAllocation]) -> Result<Vec<f64>> {
    Ok(insts
        .iter()
        .zip(powers)
        .map(|(i, p)| weighted_sum_rate(i, p))
        .collect::<Result<_, _>>()?)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

pub fn generate(c: &Common) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref())?;
    let start = Instant::now();
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let mut m = RunManifest::new(
        "generate",
        &cfg,
        c.seed,
        &c.config.iter().cloned().collect::<Vec<_>>(),
    )?;
    for split in [Split::Train, Split::Test] {
        let (insts, _) = load_split(&cfg, c.seed, None, split)?;
        let name = match split {
            Split::Train => TRAIN_FILE,
            Split::Test => TEST_FILE,
        };
        let path = c.out.join(name);
        write_dataset(&insts, &path)?;
        m.summary
            .insert(format!("{name}_records"), insts.len().into());
        m.outputs.push(path);
    }
    m.timings_s
        .insert("total".into(), start.elapsed().as_secs_f64());
    m.write(&c.out.join("manifest.json"))
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
    validation_ratio: Option<f64>,
    wall_time_s: f64,
}

pub fn train(
    c: &Common,
    data: Option<&Path>,
    truncate_t: Option<f64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if truncate_t.is_some() {
        cfg.truncate_t_m = truncate_t;
    }
    cfg.validate()?;
    let model = cfg.model();
    let (insts, mut inputs) = load_split(&cfg, c.seed, data, Split::Train)?;
    if insts.is_empty() {
        bail!("training set is empty");
    }
    let num_val = (insts.len() as f64 * cfg.validation_fraction) as usize;
    let (train_insts, val_insts) = insts.split_at(insts.len() - num_val);
    let train_set = samples(train_insts, cfg.truncate_t_m);
    let val_set = samples(val_insts, cfg.truncate_t_m);
    let val_refs = sum_rates(val_insts, &wmmse_powers(val_insts, &cfg.wmmse())?)?;
    let validation = (!val_set.is_empty()).then(|| ValidationSet {
        samples: &val_set,
        reference_rates: val_refs,
    });

    let params = match resume {
        Some(path) => {
            inputs.push(path.to_owned());
            ParamStore::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?
        }
        None => {
            let mut p = init_params(&model, c.seed)?;
            if model.normalize_features {
                fit_feature_norm(&mut p, &model, &train_set);
            }
            p
        }
    };
    inputs.extend(c.config.iter().cloned());
    let mut m = RunManifest::new("train", &cfg, c.seed, &inputs)?;
    let out = train_from(params, &train_set, validation.as_ref(), &model, c.seed)?;

    ensure_parent(&c.out)?;
    out.params.save(&c.out)?;
    let log_path = c.out.with_extension("log.csv");
    let rows: Vec<EpochRow> = out
        .log
        .iter()
        .map(|e| EpochRow {
            epoch: e.epoch,
            loss: e.loss,
            validation_ratio: e.validation_ratio,
            wall_time_s: e.wall_time_s,
        })
        .collect();
    write_csv(&log_path, &rows)?;
    for e in &out.log {
        eprintln!(
            "epoch {:>3}  loss {:.6}  val {}",
            e.epoch,
            e.loss,
            e.validation_ratio.map_or("-".into(), |r| format!("{r:.4}"))
        );
    }
    m.outputs = vec![c.out.clone(), log_path];
    m.summary
        .insert("train_instances".into(), train_set.len().into());
    m.summary
        .insert("validation_instances".into(), val_set.len().into());
    m.summary.insert("epochs_run".into(), out.log.len().into());
    m.summary
        .insert("stopped_early".into(), out.stopped_early.into());
    m.summary
        .insert("optimizer_steps".into(), out.params.adam.step.into());
    m.timings_s.insert("training".into(), out.wall_time_s);
    m.write(&sidecar(&c.out))
}

#[derive(Debug, Serialize)]
struct EvalRow {
    method: &'static str,
    #[serde(rename = "K")]
    k: usize,
    lambda: f64,
    mean_sum_rate: f64,
    ratio_vs_wmmse: f64,
}

pub fn eval(c: &Common, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref())?;
    let model = cfg.model();
    let (insts, mut inputs) = load_split(&cfg, c.seed, data, Split::Test)?;
    let Some(first) = insts.first() else {
        bail!("test set is empty");
    };
    let k = first.num_links();
    if insts.iter().any(|i| i.num_links() != k) {
        bail!("test set mixes network sizes");
    }
    let lambda = first.config.lambda;
    inputs.push(checkpoint.to_owned());
    inputs.extend(c.config.iter().cloned());
    let mut m = RunManifest::new("eval", &cfg, c.seed, &inputs)?;
    let params = ParamStore::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;

    let start = Instant::now();
    let wmmse_rates = sum_rates(&insts, &wmmse_powers(&insts, &cfg.wmmse())?)?;
    let l = cfg.greedy_links_for(k);
    let greedy: Vec<PowerAllocation> = insts
        .par_iter()
        .map(|i| greedy_top_l(i, l))
        .collect::<Result<_, _>>()?;
    let greedy_rates = sum_rates(&insts, &greedy)?;
    let test_set = samples(&insts, cfg.truncate_t_m);
    let fgnn = evaluate_against(&params, &model, &test_set, &wmmse_rates)?;

    let reference = mean(&wmmse_rates);
    let rows: Vec<EvalRow> = [
        ("fgnn", fgnn.mean_sum_rate),
        ("wmmse", reference),
        ("greedy", mean(&greedy_rates)),
    ]
    .into_iter()
    .map(|(method, rate)| EvalRow {
        method,
        k,
        lambda,
        mean_sum_rate: rate,
        ratio_vs_wmmse: rate / reference,
    })
    .collect();
    for r in &rows {
        eprintln!(
            "{:<7} mean {:.4}  ratio {:.4}",
            r.method, r.mean_sum_rate, r.ratio_vs_wmmse
        );
    }
    ensure_parent(&c.out)?;
    write_csv(&c.out, &rows)?;
    m.outputs.push(c.out.clone());
    m.summary.insert("instances".into(), insts.len().into());
    m.timings_s
        .insert("total".into(), start.elapsed().as_secs_f64());
    m.write(&sidecar(&c.out))
}

#[derive(Debug, Serialize)]
struct BenchRow {
    #[serde(rename = "K")]
    k: usize,
    instances: usize,
    single_instance: bool,
    mean_directed_edges: f64,
    graph_build_ms: f64,
    /// Over every timed call.
    fgnn_ms_mean: f64,
    /// Mean over instances of the per-instance median.
    fgnn_ms_median: f64,
    wmmse_ms_mean: f64,
    wmmse_ms_median: f64,
    wmmse_over_fgnn: f64,
}

/// Milliseconds for each of `repeats` calls of `f`, after `warmup` untimed
/// calls.
pub fn time_calls<R>(warmup: usize, repeats: usize, mut f: impl FnMut() -> R) -> Vec<f64> {
    for _ in 0..warmup {
        black_box(f());
    }
    (0..repeats)
        .map(|_| {
            let start = Instant::now();
            black_box(f());
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Instances are prepared and timed one at a time; large networks do not
/// fit in memory all at once.
pub fn bench_time(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref())?;
    let model = cfg.model();
    let mut inputs: Vec<PathBuf> = c.config.iter().cloned().collect();
    inputs.extend(checkpoint.map(Path::to_owned));
    let mut m = RunManifest::new("bench-time", &cfg, c.seed, &inputs)?;
    let params = match checkpoint {
        Some(p) => ParamStore::load(p)?,
        None => init_params(&model, c.seed)?,
    };
    let wcfg = cfg.wmmse();
    let n = cfg.bench_instances.max(1);
    let mut rows = Vec::new();
    for &k in &cfg.bench_links {
        let net = cfg.network(c.seed).with_links(k);
        net.validate()?;
        let stream = child_seed(c.seed, k as u64);
        let (mut build, mut edges) = (0.0, 0.0);
        let (mut fgnn_all, mut fgnn_med) = (Vec::new(), Vec::new());
        let (mut wmmse_all, mut wmmse_med) = (Vec::new(), Vec::new());
        for i in 0..n {
            let inst = sample_instance(&net, child_seed(stream, i as u64))?;
            let start = Instant::now();
            let mut sample = Sample::from_instance(inst.clone());
            if let Some(t) = cfg.bench_truncate_t_m {
                sample = sample.truncated(t);
            }
            build += start.elapsed().as_secs_f64() * 1e3;
            edges += sample.tensors.num_directed_edges() as f64;

            let warmup = if i == 0 { cfg.bench_warmup } else { 0 };
            let f = time_calls(warmup, cfg.bench_repeats, || {
                forward_sample(&sample, &params, &model)
            });
            let w = time_calls(warmup, cfg.bench_repeats, || {
                wmmse(&inst, &wcfg).expect("validated instance")
            });
            fgnn_med.push(median(&f));
            wmmse_med.push(median(&w));
            fgnn_all.extend(f);
            wmmse_all.extend(w);
        }
        let row = BenchRow {
            k,
            instances: n,
            single_instance: n == 1,
            mean_directed_edges: edges / n as f64,
            graph_build_ms: build / n as f64,
            fgnn_ms_mean: mean(&fgnn_all),
            fgnn_ms_median: mean(&fgnn_med),
            wmmse_ms_mean: mean(&wmmse_all),
            wmmse_ms_median: mean(&wmmse_med),
            wmmse_over_fgnn: mean(&wmmse_med) / mean(&fgnn_med),
        };
        eprintln!(
            "K={k:<4} fgnn {:.3} ms  wmmse {:.3} ms  ratio {:.2}",
            row.fgnn_ms_median, row.wmmse_ms_median, row.wmmse_over_fgnn
        );
        rows.push(row);
    }
    ensure_parent(&c.out)?;
    write_csv(&c.out, &rows)?;
    m.outputs.push(c.out.clone());
    m.write(&sidecar(&c.out))
}

#[derive(Debug, Serialize)]
struct SweepRow {
    t_m: f64,
    analytic_expected_edges: f64,
    empirical_mean_edges: f64,
    normalized_performance: f64,
    training_time_s: f64,
}

pub fn threshold_sweep(c: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref())?;
    let model = cfg.model();
    let (train_insts, mut inputs) = load_split(&cfg, c.seed, data, Split::Train)?;
    let (test_insts, test_inputs) = load_split(&cfg, c.seed, data, Split::Test)?;
    if train_insts.is_empty() || test_insts.is_empty() {
        bail!("training and test sets must be non-empty");
    }
    inputs.extend(test_inputs);
    inputs.extend(c.config.iter().cloned());
    let mut m = RunManifest::new("threshold-sweep", &cfg, c.seed, &inputs)?;

    let num_val = (train_insts.len() as f64 * cfg.validation_fraction) as usize;
    let (fit, val) = train_insts.split_at(train_insts.len() - num_val);
    let wcfg = cfg.wmmse();
    let val_refs = sum_rates(val, &wmmse_powers(val, &wcfg)?)?;
    let test_refs = sum_rates(&test_insts, &wmmse_powers(&test_insts, &wcfg)?)?;
    let (fit, val_set, test_set) = (
        samples(fit, None),
        samples(val, None),
        samples(&test_insts, None),
    );
    let sweep_data = SweepData {
        train: &fit,
        validation: (!val_set.is_empty()).then_some((val_set.as_slice(), val_refs.as_slice())),
        test: &test_set,
        test_reference: &test_refs,
    };
    let report = sweep(&sweep_data, &cfg.thresholds_m, &model, c.seed)?;
    let rows: Vec<SweepRow> = (0..report.thresholds.len())
        .map(|i| SweepRow {
            t_m: report.thresholds[i],
            analytic_expected_edges: report.analytic_expected_edges[i],
            empirical_mean_edges: report.empirical_mean_edges[i],
            normalized_performance: report.normalized_performance[i],
            training_time_s: report.training_time_s[i],
        })
        .collect();
    for r in &rows {
        eprintln!(
            "t={:>6.1}  edges {:.1}/{:.1}  perf {:.4}  {:.1} s",
            r.t_m,
            r.analytic_expected_edges,
            r.empirical_mean_edges,
            r.normalized_performance,
            r.training_time_s
        );
    }
    ensure_parent(&c.out)?;
    write_csv(&c.out, &rows)?;
    m.outputs.push(c.out.clone());
    let ideal = ideal_threshold(&report, cfg.ideal_target);
    m.summary.insert(
        "ideal_threshold_m".into(),
        ideal
            .as_ref()
            .map_or(serde_json::Value::Null, |t| (*t).into()),
    );
    if let Err(e) = ideal {
        m.summary
            .insert("ideal_threshold_error".into(), e.to_string().into());
    }
    m.timings_s
        .insert("training_total".into(), report.training_time_s.iter().sum());
    m.write(&sidecar(&c.out))
}
