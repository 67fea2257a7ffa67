use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use storyloom_core::costmodel::{CostReport, ModelDims};
use storyloom_core::layout::{build_layout, build_mask_with, InputAttention};
use storyloom_core::planner::Sampling;
use storyloom_core::rng::{derive_seed, stream};
use storyloom_core::storyworld::{Corpus, World};
use storyloom_core::trainer::{
    ablation_run, Checkpoint, MemoryMode, PhaseOptions, RunManifest, TrainConfig, Trainer,
};

use crate::args::*;

const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub fn dispatch(cli: Cli) -> Result<()> {
    let ctx = Context_ { seed: cli.seed, config: cli.config, out: cli.out };
    match cli.command {
        Command::Data(DataCommand::Gen(a)) => data_gen(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Rollout(a) => rollout(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Mask(MaskCommand::Dump(a)) => mask_dump(&ctx, a),
        Command::Cost(CostCommand::Report(a)) => cost_report(&ctx, a),
        Command::Metrics(a) => metrics(&ctx, a),
    }
}

/// Global flags.
struct Context_ {
    seed: Option<u64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Context_ {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn trainer_for(config: &TrainConfig, data: Option<&Path>) -> Result<Trainer> {
    Ok(match data {
        Some(dir) => {
            let corpus = Corpus::read(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
            Trainer::with_corpus(config, Arc::new(corpus))?
        }
        None => Trainer::new(config)?,
    })
}

fn data_gen(ctx: &Context_, a: DataGenArgs) -> Result<()> {
    let mut config = ctx.train_config()?;
    if let Some(n) = a.train {
        config.corpus.train = n;
    }
    if let Some(n) = a.val {
        config.corpus.val = n;
    }
    if let Some(n) = a.test {
        config.corpus.test = n;
    }
    let out = ctx.out_dir("data");
    let world = World::new(config.world.clone())?;
    let corpus = Corpus::generate(&world, config.corpus, derive_seed(config.seed, &["corpus"]))?;
    corpus.write(&out)?;
    fs::write(out.join("vocab.json"), serde_json::to_string_pretty(&world.vocab())? + "\n")?;
    let mut m = RunManifest::new("data gen", config.seed);
    m.config = Some(config);
    m.metric("train_stories", corpus.train.len() as f64);
    m.metric("val_stories", corpus.val.len() as f64);
    m.metric("test_stories", corpus.test.len() as f64);
    for s in ["train", "val", "test"] {
        m.outputs.push(format!("{s}.jsonl"));
        m.outputs.push(format!("{s}.bin"));
    }
    m.outputs.push("vocab.json".into());
    m.write(&out)?;
    eprintln!("wrote corpus to {}", out.display());
    Ok(())
}

fn train(ctx: &Context_, a: TrainArgs) -> Result<()> {
    let out = ctx.out_dir("run");
    let default_ckpt = out.join(CHECKPOINT_FILE);
    let source = a.resume.clone().or_else(|| default_ckpt.exists().then(|| default_ckpt.clone()));
    let existing = match &source {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    // A checkpoint carries its own config; an explicit --config or --seed wins.
    let config = match (&existing, ctx.config.is_some()) {
        (Some(ck), false) => {
            let mut c = ck.config.clone();
            if let Some(s) = ctx.seed {
                c.seed = s;
            }
            c
        }
        _ => ctx.train_config()?,
    };
    let trainer = trainer_for(&config, a.data.as_deref())?;
    let mut ck = existing.unwrap_or_else(|| trainer.init_checkpoint());
    let opts = PhaseOptions { stop_after: a.stop_after, ..Default::default() };
    let done = trainer.run_stage(&mut ck, a.stage, opts)?;
    ck.save(&default_ckpt)?;

    let mut m = RunManifest::new(format!("train --stage {}", a.stage), config.seed).with_checkpoint(&ck);
    m.metric("stage_completed", if done { 1.0 } else { 0.0 });
    if a.stage == 1 && done {
        m.metric("val_text_loss", trainer.text_loss(&ck.params, &trainer.corpus.val)?);
        m.metric("unigram_entropy", trainer.unigram_entropy());
    }
    m.outputs.push(CHECKPOINT_FILE.into());
    m.write(&out)?;
    eprintln!(
        "stage {} {} -> {}",
        a.stage,
        if done { "complete" } else { "paused" },
        default_ckpt.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LatentHeader {
    shape: [usize; 3],
    seed: u64,
    steps: usize,
}

fn rollout(ctx: &Context_, a: RolloutArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let mut config = ck.config.clone();
    if let Some(s) = ctx.seed {
        config.seed = s;
    }
    let trainer = trainer_for(&config, a.data.as_deref())?;
    let Some(story) = trainer.corpus.test.get(a.story) else {
        bail!("test split has {} stories; --story {} is out of range", trainer.corpus.test.len(), a.story);
    };
    let mode = MemoryMode::from(a.mode);
    let seed = derive_seed(config.seed, &["rollout", &a.story.to_string()]);
    let g = trainer.rollout(&ck, &story.input, a.n_frames, mode, Some(story), seed)?;

    let out = ctx.out_dir("rollout");
    fs::create_dir_all(&out)?;
    let c = &trainer.world.config;
    let header = LatentHeader { shape: [g.frames.len(), c.rows, c.channels], seed, steps: config.eval.n_steps };
    let mut f = fs::File::create(out.join("frames.bin"))?;
    writeln!(f, "{}", serde_json::to_string(&header)?)?;
    for x in &g.frames {
        f.write_all(&x.to_le_bytes())?;
    }
    let vocab = trainer.world.vocab();
    let words: Vec<&str> = g.plan.tokens.iter().map(|&t| vocab.get(t as usize).map_or("?", |s| s.as_str())).collect();
    fs::write(out.join("plan.txt"), words.join(" ") + "\n")?;

    let mut m = RunManifest::new("rollout", config.seed);
    m.config = Some(config);
    m.metric("frames", g.frames.len() as f64);
    m.metric("plan_finished", if g.plan.finished { 1.0 } else { 0.0 });
    if g.is_empty() {
        eprintln!("planner emitted no query block; story is empty");
    }
    if g.frames.len() >= 2 {
        m.metric("drift", trainer.world.drift_metric(&g.frames)?);
    }
    m.outputs = vec!["frames.bin".into(), "plan.txt".into()];
    m.write(&out)?;
    println!("{}", words.join(" "));
    Ok(())
}

fn ablate(ctx: &Context_, a: AblateArgs) -> Result<()> {
    let config = ctx.train_config()?;
    let seeds = if a.seeds.is_empty() { vec![config.seed] } else { a.seeds };
    let report = ablation_run(&config, &seeds)?;
    print!("{}", report.to_table());
    if let Some(out) = &ctx.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        let mut m = RunManifest::new("ablate", config.seed);
        m.config = Some(config);
        m.metric("drift_base", report.mean[0][0]);
        m.metric("drift_stage2", report.mean[1][0]);
        m.metric("drift_stage3", report.mean[0][1]);
        m.metric("drift_stage23", report.mean[1][1]);
        m.metric("drift_no_memory", report.mean_no_memory);
        m.outputs.push("ablation.json".into());
        m.write(out)?;
    }
    Ok(())
}

fn mask_dump(ctx: &Context_, a: MaskDumpArgs) -> Result<()> {
    let layout = build_layout(&a.layout.0)?;
    let input = if a.bidirectional_input { InputAttention::Bidirectional } else { InputAttention::Causal };
    let grid = build_mask_with(&layout, input)?.to_text_grid();
    match &ctx.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, &grid)?;
            let mut m = RunManifest::new(format!("mask dump --layout {}", a.layout), ctx.seed.unwrap_or(0));
            m.metric("positions", layout.len() as f64);
            m.outputs.push(path.display().to_string());
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            fs::write(path.with_file_name(name), serde_json::to_string_pretty(&m)? + "\n")?;
        }
        None => print!("{grid}"),
    }
    Ok(())
}

fn cost_report(ctx: &Context_, a: CostReportArgs) -> Result<()> {
    let dims = match &a.dims {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading dims {}", p.display()))?;
            ModelDims::from_toml_str(&text)?
        }
        None => ModelDims::default(),
    };
    let report = CostReport::new(a.frames, &dims)?;
    let text = match a.format {
        Format::Csv => report.to_csv(),
        Format::Table => report.to_table(),
    };
    print!("{text}");
    if let Some(out) = &ctx.out {
        fs::create_dir_all(out)?;
        let name = match a.format {
            Format::Csv => "cost.csv",
            Format::Table => "cost.txt",
        };
        fs::write(out.join(name), &text)?;
        let mut m = RunManifest::new("cost report", ctx.seed.unwrap_or(0));
        m.metric("frames", a.frames as f64);
        if let Some(c) = report.crossover {
            m.metric("crossover_frame", c as f64);
        }
        m.outputs.push(name.into());
        m.write(out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    val_text_loss: f64,
    unigram_entropy: f64,
    balanced_plans: f64,
    drift_self_rollout: Option<f64>,
    drift_teacher_forced: Option<f64>,
}

fn metrics(ctx: &Context_, a: MetricsArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let mut config = ck.config.clone();
    if let Some(s) = ctx.seed {
        config.seed = s;
    }
    let trainer = trainer_for(&config, a.data.as_deref())?;
    let mut ok = 0;
    for (i, s) in trainer.corpus.test.iter().enumerate() {
        let mut rng = stream(config.seed, &["metrics", &i.to_string()]);
        let p = trainer.planner.generate_plan(&ck.params, &s.input, Sampling::Greedy, config.eval.limits, &mut rng)?;
        if p.finished && p.brackets_balanced() && p.n_blocks() >= 1 {
            ok += 1;
        }
    }
    let generated = ck.has(storyloom_core::trainer::Phase::Pretrain);
    // An undertrained planner may never emit a second frame; drift is then undefined.
    let drift = |mode| -> Result<Option<f64>> {
        if !generated {
            return Ok(None);
        }
        match trainer.evaluate_drift(&ck, mode) {
            Ok(s) => Ok(Some(s.drift)),
            Err(storyloom_core::Error::NoMultiFrameRollout) => Ok(None),
            Err(e) => Err(e.into()),
        }
    };
    let report = Metrics {
        val_text_loss: trainer.text_loss(&ck.params, &trainer.corpus.val)?,
        unigram_entropy: trainer.unigram_entropy(),
        balanced_plans: ok as f64 / trainer.corpus.test.len().max(1) as f64,
        drift_self_rollout: drift(MemoryMode::SelfRollout)?,
        drift_teacher_forced: drift(MemoryMode::TeacherForced)?,
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &ctx.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.json"), text + "\n")?;
        let mut m = RunManifest::new("metrics", config.seed).with_checkpoint(&ck);
        m.metric("val_text_loss", report.val_text_loss);
        m.metric("balanced_plans", report.balanced_plans);
        m.outputs.push("metrics.json".into());
        m.write(out)?;
    }
    Ok(())
}
