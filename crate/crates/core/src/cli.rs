//! Command-line interface. Exit codes: 0 success, 1 internal failure,
//! 2 missing input file, 3 invalid input.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::audit::{grad_audit, mask_audit, GRAD_TOL};
use crate::cmadiff::{sample, SampleOptions, SamplerKind};
use crate::error::{Error, Result};
use crate::image::{Image, SIZE};
use crate::io::{read_json, write_json};
use crate::mls::{edit_and_resample, mls_sample, MlsState, DEFAULT_VIEWS};
use crate::model::Model;
use crate::scene::{Edit, SceneGraph};
use crate::synth::{Dataset, SynthConfig};
use crate::trainer::{dump_dir_for, evaluate, train, Checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "scenecomp", version, about = "Scene-graph-conditioned image generation on a 16x16 shapes world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sampler {
    Deterministic,
    Ancestral,
}

impl From<Sampler> for SamplerKind {
    fn from(s: Sampler) -> Self {
        match s {
            Sampler::Deterministic => SamplerKind::Deterministic,
            Sampler::Ancestral => SamplerKind::Ancestral,
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct SamplingArgs {
    /// Reverse steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long = "cfg", default_value_t = 7.5)]
    pub cfg_scale: f64,
    #[arg(long, value_enum, default_value_t = Sampler::Deterministic)]
    pub sampler: Sampler,
}

impl SamplingArgs {
    fn options(&self) -> Result<SampleOptions> {
        if self.steps == 0 || !self.cfg_scale.is_finite() {
            return Err(Error::Constraint("--steps must be positive and --cfg finite".into()));
        }
        Ok(SampleOptions {
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            kind: self.sampler.into(),
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Training settings (JSON); missing fields take defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate an image for a scene graph.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Views drawn by the layered sampler.
        #[arg(long, default_value_t = DEFAULT_VIEWS)]
        nl: usize,
        /// Layered sampler (layouts drawn from the model) or the plain
        /// sampler (uses the graph's boxes when every node has one).
        #[arg(long, value_enum, default_value_t = Switch::On)]
        mls: Switch,
        #[arg(long)]
        out: PathBuf,
        /// Seed sidecar written by the layered sampler [default: OUT.mls.json].
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Edit a graph and resample it, reusing a layered sample's seeds.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Seed sidecar of the original sample.
        #[arg(long)]
        state: PathBuf,
        /// "set-attr ID ATTR", "remove-attr ID ATTR" or "add-node CAT REL ID".
        #[arg(long)]
        edit: String,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: PathBuf,
        /// Edited graph [default: OUT.graph.json].
        #[arg(long)]
        graph_out: Option<PathBuf>,
        /// Sidecar for the edited graph [default: OUT.mls.json].
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
    /// Sample every dataset scene with its boxes and score with the blob oracle.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate only the first N scenes.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Finite-difference audit of every op, a denoiser block and all parameters.
    CheckGrad {
        #[arg(long, default_value_t = 100)]
        instances: u64,
    },
    /// Compare the attention mask builder with a pairwise brute force.
    EvalMasks {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        e if e.is_validation() => 3,
        _ => 1,
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_graph(path: &Path, model: &Model) -> Result<SceneGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    SceneGraph::parse(&bytes, model.vocab())
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

/// Plain sample of `graph`: boxes from the graph when all are present,
/// otherwise from the layout decoder; semantics from the prior.
pub fn plain_sample(model: &Model, graph: &SceneGraph, opts: &SampleOptions, seed: u64) -> Result<Vec<f64>> {
    let mut view = model.draw_view(graph, seed)?;
    if graph.has_all_boxes() {
        view.boxes = graph.boxes()?;
    }
    let objects = model.object_conds(graph, &view)?;
    sample(model, &model.schedule, &objects, opts, seed)
}

#[derive(Serialize)]
struct AuditLine<'a> {
    name: &'a str,
    worst_relative_error: f64,
    ok: bool,
}

fn run_command(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData { out, num, seed, config } => {
            let cfg = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            Dataset::generate(num, seed, cfg)?.save(&out)?;
            eprintln!("wrote {num} scenes to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg: TrainConfig = read_json(&config)?;
            cfg.validate()?;
            let data = Dataset::load(&data)?;
            let mut ck = match resume {
                Some(p) => {
                    let mut ck = Checkpoint::load(&p)?;
                    if ck.meta.config.seed != cfg.seed {
                        return Err(Error::Constraint("--resume needs the checkpoint's seed".into()));
                    }
                    ck.meta.config.steps = cfg.steps;
                    ck
                }
                None => Checkpoint::init(cfg.clone(), data.manifest.vocabulary.clone())?,
            };
            let every = cfg.eval_every;
            train(&mut ck, &data, &dump_dir_for(&out), |r| {
                if every > 0 && (r.step + 1) % every == 0 {
                    eprintln!(
                        "step {} total {:.4} diffusion {:.4} kl {:.4} layout {:.4}",
                        r.step + 1,
                        r.total,
                        r.diffusion,
                        r.union,
                        r.layout
                    );
                }
            })?;
            ck.save(&out)?;
        }
        Command::Sample {
            ckpt,
            graph,
            seed,
            sampling,
            nl,
            mls,
            out,
            state,
        } => {
            let opts = sampling.options()?;
            let ck = Checkpoint::load(&ckpt)?;
            let g = read_graph(&graph, &ck.model)?;
            let x = match mls {
                Switch::Off => plain_sample(&ck.model, &g, &opts, seed)?,
                Switch::On => {
                    if nl == 0 {
                        return Err(Error::Constraint("--nl must be positive".into()));
                    }
                    let st = MlsState::derive(&g, seed, nl);
                    let x = mls_sample(&ck.model, &g, &st, &opts)?;
                    write_json(&state.unwrap_or_else(|| sibling(&out, ".mls.json")), &st)?;
                    x
                }
            };
            Image::from_signed(SIZE, SIZE, &x).write_ppm(&out)?;
        }
        Command::Edit {
            ckpt,
            graph,
            state,
            edit,
            sampling,
            out,
            graph_out,
            state_out,
        } => {
            let opts = sampling.options()?;
            let edit = Edit::parse(&edit)?;
            let ck = Checkpoint::load(&ckpt)?;
            let g = read_graph(&graph, &ck.model)?;
            let st: MlsState = read_json(&state)?;
            let res = edit_and_resample(&ck.model, ck.model.vocab(), &g, &st, &edit, &opts)?;
            Image::from_signed(SIZE, SIZE, &res.after).write_ppm(&out)?;
            let mut text = res.graph.to_json();
            text.push('\n');
            crate::io::write_atomic(&graph_out.unwrap_or_else(|| sibling(&out, ".graph.json")), text.as_bytes())?;
            write_json(&state_out.unwrap_or_else(|| sibling(&out, ".mls.json")), &res.state)?;
        }
        Command::Eval {
            ckpt,
            data,
            report,
            limit,
            seed,
            sampling,
        } => {
            let opts = sampling.options()?;
            let ck = Checkpoint::load(&ckpt)?;
            let data = Dataset::load(&data)?;
            let n = limit.unwrap_or(data.len()).min(data.len());
            let (rep, _) = evaluate(&ck, &data.scenes[..n], &opts, seed)?;
            write_json(&report, &rep)?;
            eprintln!(
                "layout_iou {:.3} attr_acc {:.3} count_acc {:.3} layout_l1 {:.4}",
                rep.layout_iou, rep.attr_acc, rep.count_acc, rep.layout_l1
            );
        }
        Command::CheckGrad { instances } => {
            let a = grad_audit(instances)?;
            let lines: Vec<AuditLine> = a
                .ops
                .iter()
                .chain(&a.block)
                .map(|(name, e)| AuditLine {
                    name,
                    worst_relative_error: *e,
                    ok: *e < GRAD_TOL,
                })
                .collect();
            print_json(&serde_json::json!({
                "checks": lines,
                "params_checked": a.params_checked,
                "zero_gradient_params": a.dead_params,
                "passed": a.passed(),
            }));
            return Ok(if a.passed() { 0 } else { 1 });
        }
        Command::EvalMasks { instances, seed } => {
            let a = mask_audit(instances, seed)?;
            print_json(&serde_json::json!({
                "instances": a.instances,
                "mismatches": a.mismatches,
                "fixture_ok": a.fixture_ok,
                "passed": a.passed(),
            }));
            return Ok(if a.passed() { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run_command(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
