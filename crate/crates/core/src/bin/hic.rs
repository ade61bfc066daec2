use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hic::io::{self, Checkpoint, RunConfig};
use hic::motion::{derive_task_with_ratio, Domain};
use hic::prompting::{
    cluster_sample, corpus_fingerprint, random_sample, retrieve_prompt, sps_sample_traced,
    SamplingMethod,
};
use hic::synth::synthesize;
use hic::training::{evaluate, network_grad_check, task_corpus, Trainer};
use hic::xfusion::{XFusionConfig, XFusionNet, XFusionParams};
use hic::{HicError, Result};

/// Gradient-check tolerance on the maximum relative error.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "hic", version, about = "In-context human motion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with flat run settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated task ids, e.g. `PE,MP(P),MIB(P)`.
    #[arg(long, global = true)]
    domains: Option<String>,
    /// Restrict retrieval to anchors of the query's domain.
    #[arg(long, global = true)]
    domain_filter_retrieval: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select hard anchors from a dataset's task corpus.
    SampleAnchors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        method: Option<SamplingMethod>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve the prompt for one query.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        anchors: PathBuf,
        /// Query a derived task of this dataset.
        #[arg(long, requires_all = ["clip", "domain"])]
        dataset: Option<PathBuf>,
        #[arg(long)]
        clip: Option<usize>,
        #[arg(long)]
        domain: Option<Domain>,
        /// Query with a stored anchor's input.
        #[arg(long, conflicts_with = "dataset")]
        anchor_index: Option<usize>,
    },
    /// Print the task sample of one clip and domain.
    Derive {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        clip: usize,
        #[arg(long)]
        domain: Domain,
        /// Also write input and target values as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network and its soft anchors.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        /// Checkpoint path; the step log goes next to it with a `.log.jsonl` suffix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-domain error table of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare analytic and finite-difference gradients at toy shapes.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.domains {
        cfg.domains = d.clone();
    }
    if common.domain_filter_retrieval {
        cfg.domain_filter_retrieval = true;
    }
    Ok(cfg)
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let ds = synthesize(&cfg.synth())?;
            io::write_dataset(&out, &ds)?;
            println!(
                "wrote {} clips of {} frames x {} joints to {}",
                ds.len(),
                2 * ds.frames,
                ds.joints,
                out.display()
            );
        }
        Command::SampleAnchors {
            common,
            dataset,
            k,
            method,
            out,
        } => {
            let cfg = load_config(&common)?;
            let ds = io::read_dataset(&dataset)?;
            let corpus = task_corpus(&ds, &cfg.domain_list()?, cfg.mask_ratio)?;
            let k = k.unwrap_or(cfg.k);
            let set = match method.unwrap_or(cfg.method) {
                SamplingMethod::Sps => {
                    let (set, trace) = sps_sample_traced(&corpus, k, cfg.hidden)?;
                    for (i, v) in trace.min_max_sim.iter().enumerate() {
                        println!("step {} anchor {:?} max-min similarity {v:.9}", i + 1, set.anchors[i + 1].source_index);
                    }
                    set
                }
                SamplingMethod::Random => random_sample(&corpus, k, cfg.seed, cfg.hidden)?,
                SamplingMethod::Cluster => cluster_sample(&corpus, k, cfg.seed, cfg.hidden)?,
            };
            io::write_anchors(&out, &set)?;
            println!(
                "wrote {} anchors ({:?}) to {}; corpus fingerprint {}",
                set.len(),
                set.method,
                out.display(),
                set.fingerprint
            );
        }
        Command::Retrieve {
            common,
            anchors,
            dataset,
            clip,
            domain,
            anchor_index,
        } => {
            let cfg = load_config(&common)?;
            let set = io::read_anchors(&anchors)?;
            if set.is_empty() {
                return Err(HicError::State("anchor file holds no anchors".into()));
            }
            let (query, filter) = match (dataset, anchor_index) {
                (Some(path), _) => {
                    let ds = io::read_dataset(&path)?;
                    let corpus = task_corpus(&ds, &cfg.domain_list()?, cfg.mask_ratio)?;
                    if corpus_fingerprint(&corpus) != set.fingerprint {
                        eprintln!("warning: dataset fingerprint differs from the anchor file's corpus");
                    }
                    let (ci, d) = (clip.unwrap(), domain.unwrap());
                    let c = ds.clips.get(ci).ok_or_else(|| {
                        HicError::Index(format!("clip {ci} out of range for {} clips", ds.len()))
                    })?;
                    let t = derive_task_with_ratio(c, d, hic::training::eval_mask_seed(ci, d), cfg.mask_ratio)?;
                    (t.query_input, cfg.domain_filter_retrieval.then_some(d))
                }
                (None, Some(i)) => {
                    let a = set.anchors.get(i).ok_or_else(|| {
                        HicError::Index(format!("anchor {i} out of range for {} anchors", set.len()))
                    })?;
                    (a.input.clone(), None)
                }
                (None, None) => {
                    return Err(HicError::config("query", "give --dataset/--clip/--domain or --anchor-index"))
                }
            };
            let r = retrieve_prompt(&query, &set, filter)?;
            println!(
                "{}",
                json_line(&serde_json::json!({
                    "index": r.index,
                    "similarity": r.similarity,
                    "runner_up_margin": r.runner_up.map(|v| r.similarity - v),
                }))
            );
        }
        Command::Derive {
            common,
            dataset,
            clip,
            domain,
            out,
        } => {
            let cfg = load_config(&common)?;
            let ds = io::read_dataset(&dataset)?;
            let c = ds.clips.get(clip).ok_or_else(|| {
                HicError::Index(format!("clip {clip} out of range for {} clips", ds.len()))
            })?;
            let t = derive_task_with_ratio(c, domain, hic::training::eval_mask_seed(clip, domain), cfg.mask_ratio)?;
            let summary = serde_json::json!({
                "domain": domain.code(),
                "input_modality": t.query_input.modality(),
                "target_modality": t.query_target.modality(),
                "shape": t.query_input.values().shape(),
                "time_mask": t.time_mask,
                "joint_mask": t.joint_mask,
            });
            println!("{}", json_line(&summary));
            if let Some(path) = out {
                let body = serde_json::json!({
                    "summary": summary,
                    "input": t.query_input.values().data(),
                    "target": t.query_target.values().data(),
                    "target_shape_params": t.target_shape(),
                });
                io::write_atomic(&path, json_line(&body).as_bytes())?;
            }
        }
        Command::Train {
            common,
            dataset,
            anchors,
            out,
        } => {
            let cfg = load_config(&common)?;
            let tc = cfg.train()?;
            let ds = io::read_dataset(&dataset)?;
            let set = io::read_anchors(&anchors)?;
            let params = XFusionParams::init(cfg.network(ds.frames, ds.joints), cfg.seed)?;
            if set.hidden() != cfg.hidden {
                return Err(HicError::config(
                    "hidden",
                    format!("anchor file has hidden {} but config says {}", set.hidden(), cfg.hidden),
                ));
            }
            let mut trainer = Trainer::new(XFusionNet::new(params), set, tc)?;
            let log_path = PathBuf::from(format!("{}.log.jsonl", out.display()));
            let mut log = BufWriter::new(File::create(&log_path)?);
            let recs = trainer.train(&ds, Some(&mut log))?;
            log.flush()?;
            let ck = Checkpoint {
                params: trainer.net.params.clone(),
                soft: trainer.anchors.soft.clone(),
                step: trainer.step,
            };
            io::write_checkpoint(&out, &ck)?;
            if let Some(last) = recs.last() {
                println!("step {} loss {:.6} lr {:.3e}", last.step, last.loss, last.lr);
            }
            println!("wrote checkpoint {} and log {}", out.display(), log_path.display());
        }
        Command::Eval {
            common,
            dataset,
            anchors,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let ds = io::read_dataset(&dataset)?;
            let mut set = io::read_anchors(&anchors)?;
            let ck = io::read_checkpoint(&checkpoint)?;
            if ck.soft.len() != set.len() {
                return Err(HicError::dim(format!(
                    "checkpoint has {} soft anchors, anchor file has {}",
                    ck.soft.len(),
                    set.len()
                )));
            }
            set.soft = ck.soft;
            let net = XFusionNet::new(ck.params);
            let rows = evaluate(&ds, &set, &net, &cfg.domain_list()?, cfg.domain_filter_retrieval)?;
            for r in &rows {
                println!("{}", json_line(r));
            }
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let report = gradcheck_toy(cfg.seed)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst tensor {}, index {})",
                report.max_rel_err, report.coordinates, report.worst.0, report.worst.1
            );
            if !(report.max_rel_err < GRADCHECK_TOL) {
                println!("FAIL: tolerance {GRADCHECK_TOL:e}");
                return Ok(3);
            }
            println!("PASS");
        }
    }
    Ok(0)
}

fn gradcheck_toy(seed: u64) -> Result<hic::numeric::GradCheckReport> {
    use hic::prompting::sps_sample;
    use hic::synth::SynthConfig;
    let (f, j, h) = (4, 5, 8);
    let ds = synthesize(&SynthConfig {
        clips: 3,
        frames: f,
        joints: j,
        families: 2,
        seed,
    })?;
    let domains = [Domain::FMR];
    let corpus = task_corpus(&ds, &domains, 0.4)?;
    let set = sps_sample(&corpus, 2, h)?;
    let net = XFusionNet::new(XFusionParams::init(XFusionConfig::toy(f, j, h, 2), seed)?);
    let sample = hic::training::all_tasks(&ds, &domains, 0.4)?.remove(0);
    let r = retrieve_prompt(&sample.query_input, &set, None)?;
    network_grad_check(&net, &set, &sample, r.index, &Default::default())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
