//! Ablation sweeps: train the cross product of one config and one varied
//! axis over a shared seed set, in parallel, and summarize per-variant
//! accuracies with medians and means.

use rnlab_core::config::{self, ExperimentConfig};
use rnlab_core::norm::{Measure, NormKind};
use rnlab_core::train::train_run;
use rnlab_core::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

struct Variant {
    name: &'static str,
    apply: fn(&mut ExperimentConfig),
}

fn variants_for(vary: &str) -> Result<Vec<Variant>> {
    let v = |name, apply| Variant { name, apply };
    Ok(match vary {
        "normalizer" => vec![
            v("bn", (|c| c.normalizer = NormKind::Bn) as fn(&mut ExperimentConfig)),
            v("autodial", |c| c.normalizer = NormKind::AutoDial),
            v("dsbn", |c| c.normalizer = NormKind::Dsbn),
            v("tn", |c| c.normalizer = NormKind::Tn),
            v("rn", |c| c.normalizer = NormKind::Rn),
        ],
        "gate" => vec![
            v("gate_0.5", (|c| {
                c.normalizer = NormKind::Rn;
                c.norm_opts.fixed_gate = Some(0.5);
            }) as fn(&mut ExperimentConfig)),
            v("gate_0.75", |c| {
                c.normalizer = NormKind::Rn;
                c.norm_opts.fixed_gate = Some(0.75);
            }),
            v("gate_1.0", |c| {
                c.normalizer = NormKind::Rn;
                c.norm_opts.fixed_gate = Some(1.0);
            }),
            v("learnable", |c| {
                c.normalizer = NormKind::Rn;
                c.norm_opts.fixed_gate = None;
            }),
        ],
        "measure" => vec![
            v("neg_l2", (|c| {
                c.normalizer = NormKind::Rn;
                c.norm_opts.measure = Measure::NegL2;
            }) as fn(&mut ExperimentConfig)),
            v("neg_l1", |c| {
                c.normalizer = NormKind::Rn;
                c.norm_opts.measure = Measure::NegL1;
            }),
            v("neg_cos", |c| {
                c.normalizer = NormKind::Rn;
                c.norm_opts.measure = Measure::NegCosine;
            }),
        ],
        other => {
            return Err(Error::invalid(format!(
                "unknown sweep axis '{other}' (expected normalizer, gate, or measure)"
            )))
        }
    })
}

fn parse_seed_list(raw: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in raw.split(',').map(str::trim) {
        let s = part
            .parse::<u64>()
            .map_err(|_| Error::invalid(format!("--seeds: '{part}' is not a seed")))?;
        seeds.push(s);
    }
    if seeds.is_empty() {
        return Err(Error::invalid("--seeds must name at least one seed"));
    }
    Ok(seeds)
}

fn thread_budget(jobs: usize) -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = match std::env::var("RNLAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                eprintln!("warning: ignoring RNLAB_THREADS={v:?}; expected a positive integer");
                available
            }
        },
        Err(_) => available,
    };
    cap.min(jobs).max(1)
}

struct JobResult {
    eval_s_accuracy: f64,
    eval_t_accuracy: f64,
}

fn run_job(cfg: &ExperimentConfig) -> Result<JobResult> {
    let out = cfg.out.as_ref().expect("sweep jobs always carry an out dir");
    let (source, target) = cfg.generate()?;
    let outcome = train_run(
        &cfg.train_config(),
        &source,
        &target,
        Some(Path::new(out)),
        &cfg.to_text(),
    )?;
    let last = |split: &str| {
        outcome
            .metrics
            .iter()
            .rev()
            .find(|r| r.split == split)
            .map(|r| r.accuracy)
            .unwrap_or(f64::NAN)
    };
    Ok(JobResult { eval_s_accuracy: last("eval_s"), eval_t_accuracy: last("eval_t") })
}

fn median(sorted: &mut Vec<f64>) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn cmd_sweep(
    config: &Path,
    vary: &str,
    seeds: Option<&str>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let base = config::load(config)?;
    let variants = variants_for(vary)?;
    let seeds: Vec<u64> = match seeds {
        Some(raw) => parse_seed_list(raw)?,
        None => {
            let start = seed.unwrap_or(base.seed);
            (start..start + 5).collect()
        }
    };
    let root: PathBuf = match (out, &base.out) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => PathBuf::from(o),
        (None, None) => {
            return Err(Error::invalid(
                "no output directory: set out= in the config or pass --out",
            ))
        }
    };

    // one fully-resolved config per (variant, seed), with disjoint out dirs
    let mut jobs: Vec<(usize, ExperimentConfig)> = Vec::new();
    for (vi, variant) in variants.iter().enumerate() {
        for &s in &seeds {
            let mut cfg = base.clone();
            (variant.apply)(&mut cfg);
            cfg.seed = s;
            cfg.out = Some(root.join(variant.name).join(format!("seed_{s}")).display().to_string());
            jobs.push((vi, cfg));
        }
    }

    let threads = thread_budget(jobs.len());
    let results: Mutex<Vec<Option<Result<JobResult>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run_job(&jobs[i].1);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().unwrap();

    let mut rows = vec!["variant,seed,eval_s_accuracy,eval_t_accuracy".to_string()];
    let mut by_variant: Vec<(Vec<f64>, Vec<f64>)> = variants.iter().map(|_| Default::default()).collect();
    for ((vi, cfg), result) in jobs.iter().zip(results) {
        let r = result.expect("every job ran")?;
        rows.push(format!(
            "{},{},{},{}",
            variants[*vi].name, cfg.seed, r.eval_s_accuracy, r.eval_t_accuracy
        ));
        by_variant[*vi].0.push(r.eval_s_accuracy);
        by_variant[*vi].1.push(r.eval_t_accuracy);
    }
    for (vi, variant) in variants.iter().enumerate() {
        let (mut accs_s, mut accs_t) = by_variant[vi].clone();
        let med = (median(&mut accs_s), median(&mut accs_t));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(format!("{},median,{},{}", variant.name, med.0, med.1));
        rows.push(format!("{},mean,{},{}", variant.name, mean(&accs_s), mean(&accs_t)));
        println!(
            "{}: median eval_t accuracy {:.4} over {} seeds",
            variant.name,
            med.1,
            seeds.len()
        );
    }

    std::fs::create_dir_all(&root)
        .map_err(|e| Error::io(root.display().to_string(), e.to_string()))?;
    let summary = root.join("summary.csv");
    std::fs::write(&summary, rows.join("\n") + "\n")
        .map_err(|e| Error::io(summary.display().to_string(), e.to_string()))?;
    println!("summary written to {}", summary.display());
    Ok(ExitCode::SUCCESS)
}
