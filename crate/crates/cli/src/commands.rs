use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use psg_core::metrics::{evaluate_model, evaluate_oracle, MetricsReport, DEFAULT_KS};
use psg_core::model::{
    read_checkpoint, save_checkpoint, Architecture, Checkpoint, CheckpointKind, ModelConfig, RelationModel,
};
use psg_core::numeric::GradCheckOptions;
use psg_core::scene::{generate_corpus, read_corpus, save_corpus, CorpusConfig, CorpusManifest, Scene};
use psg_core::training::{run_gradcheck, train as train_model, Phase2Loss, SoftLabelRefresh, TrainSchedule};
use psg_core::{fingerprint, Error};

use crate::config::{snapshot_path, usage, write_json, CountRange, Dims};
use crate::{EvalArgs, GenArgs, GradcheckArgs, TrainArgs};

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| usage(format!("{flag} is required")))
}

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read {what} {}", path.display()))
}

fn load_corpus_file(path: &Path) -> Result<(Vec<u8>, CorpusManifest, Vec<Scene>)> {
    let bytes = read_file(path, "corpus")?;
    let (manifest, scenes) = read_corpus(&bytes).with_context(|| format!("loading corpus {}", path.display()))?;
    Ok((bytes, manifest, scenes))
}

#[derive(Serialize)]
struct GenSnapshot<'a> {
    command: &'static str,
    output: &'a Path,
    corpus: &'a CorpusConfig,
}

pub fn gen(args: GenArgs) -> Result<()> {
    let d = CorpusConfig::default();
    let hw = args.hw.unwrap_or(Dims {
        height: d.height,
        width: d.width,
    });
    let objects = args.objects.unwrap_or(CountRange {
        min: d.min_objects,
        max: d.max_objects,
    });
    let config = CorpusConfig {
        num_scenes: args.scenes.unwrap_or(d.num_scenes),
        height: hw.height,
        width: hw.width,
        channels: args.channels.unwrap_or(d.channels),
        min_objects: objects.min,
        max_objects: objects.max,
        num_object_classes: args.classes.unwrap_or(d.num_object_classes),
        num_predicates: args.predicates.unwrap_or(d.num_predicates),
        predicate_weights: args.predicate_weights.unwrap_or_default(),
        context_mode: args.context_mode.unwrap_or(d.context_mode),
        ambiguity_rate: args.ambiguity.unwrap_or(d.ambiguity_rate),
        relation_density: args.density.unwrap_or(d.relation_density),
        feature_noise: args.noise.unwrap_or(d.feature_noise),
        cue_strength: args.cue.unwrap_or(d.cue_strength),
        patches: args.patches.unwrap_or(d.patches),
        seed: args.seed.unwrap_or(d.seed),
        rule_seed: args.rule_seed.unwrap_or(d.rule_seed),
    }
    .resolved()?;
    let output = required(args.output, "-o/--output")?;

    let scenes = generate_corpus(&config)?;
    save_corpus(&output, &scenes, Some(&config)).with_context(|| format!("writing {}", output.display()))?;
    write_json(
        &snapshot_path(&output),
        &GenSnapshot {
            command: "gen",
            output: &output,
            corpus: &config,
        },
    )?;
    println!("wrote {} scenes to {}", scenes.len(), output.display());
    Ok(())
}

fn parse_choice<T: std::str::FromStr>(value: Option<String>, default: T, flag: &str, choices: &str) -> Result<T> {
    match value {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| usage(format!("{flag} must be one of {choices}, got {v:?}"))),
    }
}

struct Choice<T>(T);

impl std::str::FromStr for Choice<Phase2Loss> {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "focal" => Ok(Choice(Phase2Loss::Focal)),
            "bce" => Ok(Choice(Phase2Loss::Bce)),
            _ => Err(()),
        }
    }
}

impl std::str::FromStr for Choice<SoftLabelRefresh> {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "per-step" => Ok(Choice(SoftLabelRefresh::PerStep)),
            "per-epoch" => Ok(Choice(SoftLabelRefresh::PerEpoch)),
            _ => Err(()),
        }
    }
}

fn schedule_from(args: &TrainArgs) -> Result<TrainSchedule> {
    let d = TrainSchedule::default();
    let schedule = TrainSchedule {
        phase1_epochs: args.phase1.unwrap_or(d.phase1_epochs),
        phase2_epochs: args.phase2.unwrap_or(d.phase2_epochs),
        ema_decay: args.ema.unwrap_or(d.ema_decay),
        lr: args.lr.unwrap_or(d.lr),
        weight_decay: args.wd.unwrap_or(d.weight_decay),
        lr_milestones: args.milestones.clone().map(|l| l.0).unwrap_or(d.lr_milestones),
        lr_decay: d.lr_decay,
        gamma: args.gamma.unwrap_or(d.gamma),
        balance: args.balance.unwrap_or(d.balance),
        tau: args.tau.unwrap_or(d.tau),
        batch_size: args.batch.unwrap_or(d.batch_size),
        seed: args.seed.unwrap_or(d.seed),
        phase2_loss: parse_choice(
            args.phase2_loss.clone(),
            Choice(d.phase2_loss),
            "--phase2-loss",
            "focal, bce",
        )?
        .0,
        refresh: parse_choice(
            args.refresh.clone(),
            Choice(d.refresh),
            "--refresh",
            "per-step, per-epoch",
        )?
        .0,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Class and predicate counts come from the corpus manifest when it records
/// its generator config, else from the largest ids present.
fn corpus_dims(manifest: &CorpusManifest, scenes: &[Scene]) -> Result<(usize, usize, usize, Option<usize>)> {
    let channels = match (&manifest.config, scenes.first()) {
        (_, Some(s)) => s.channels(),
        (Some(c), None) => c.channels,
        (None, None) => return Err(Error::Config("training corpus is empty".into()).into()),
    };
    if let Some(c) = &manifest.config {
        return Ok((channels, c.num_object_classes, c.num_predicates, Some(c.patches)));
    }
    let classes = scenes.iter().flat_map(|s| &s.labels).max().map_or(1, |m| m + 1);
    let predicates = scenes
        .iter()
        .flat_map(|s| &s.graph.triplets)
        .map(|t| t.predicate)
        .max()
        .map_or(1, |m| m + 1);
    Ok((channels, classes, predicates, None))
}

#[derive(Serialize)]
struct TrainSnapshot<'a> {
    command: &'static str,
    corpus: &'a Path,
    corpus_id: String,
    output: &'a Path,
    model: &'a ModelConfig,
    schedule: &'a TrainSchedule,
}

pub fn train(args: TrainArgs, threads: Option<usize>) -> Result<()> {
    let corpus_path = required(args.corpus.clone(), "--corpus")?;
    let output = required(args.output.clone(), "-o/--output")?;
    let schedule = schedule_from(&args)?;
    let architecture = parse_choice(args.model.clone(), Architecture::Global, "--model", "global, pairwise")?;

    let (bytes, manifest, scenes) = load_corpus_file(&corpus_path)?;
    let (dim, classes, predicates, corpus_patches) = corpus_dims(&manifest, &scenes)?;
    let d = ModelConfig::default();
    let model_config = ModelConfig {
        architecture,
        num_object_classes: classes,
        num_predicates: predicates,
        dim,
        patches: args.patches.or(corpus_patches).unwrap_or(d.patches),
        layers: args.layers.unwrap_or(d.layers),
        heads: args.heads.unwrap_or(d.heads),
        ffn_dim: args.ffn_dim.unwrap_or(d.ffn_dim),
        head_dim: args.head_dim.unwrap_or(d.head_dim),
        layer_norm_eps: d.layer_norm_eps,
        init_seed: schedule.seed,
    };
    let model = RelationModel::<f64>::new(model_config.clone())?;

    fs::create_dir_all(&output).with_context(|| format!("creating {}", output.display()))?;
    write_json(
        &output.join("config.json"),
        &TrainSnapshot {
            command: "train",
            corpus: &corpus_path,
            corpus_id: fingerprint(&bytes),
            output: &output,
            model: &model_config,
            schedule: &schedule,
        },
    )?;

    let started = Instant::now();
    let result = train_model(&scenes, model, &schedule)?;
    let mut log = fs::File::create(output.join("train_log.jsonl"))?;
    for record in &result.log {
        writeln!(log, "{}", serde_json::to_string(record)?)?;
    }
    if let Some(div) = &result.diverged {
        let path = output.join("last_good.ckpt");
        save_checkpoint(
            &path,
            &Checkpoint::from_model(&result.model, CheckpointKind::Student, None),
        )?;
        return Err(anyhow!(
            "training diverged at epoch {} step {} ({}); last good checkpoint written to {}",
            div.epoch,
            div.step,
            div.reason,
            path.display()
        ));
    }
    save_checkpoint(
        output.join("model.ckpt"),
        &Checkpoint::from_model(&result.model, CheckpointKind::Student, None),
    )?;
    if let Some(teacher) = &result.teacher {
        save_checkpoint(
            output.join("teacher.ckpt"),
            &Checkpoint::from_model(&teacher.model, CheckpointKind::Teacher, Some(teacher.alpha)),
        )?;
    }
    for r in &result.log {
        println!(
            "epoch {:>3}  phase {}  loss {:.6}  lr {:e}",
            r.epoch, r.phase, r.mean_loss, r.lr
        );
    }
    println!(
        "trained on {} scenes in {:.1?}{}; outputs in {}",
        scenes.len(),
        started.elapsed(),
        threads.map(|t| format!(" with {t} threads")).unwrap_or_default(),
        output.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    command: &'static str,
    corpus: &'a Path,
    ckpt: Option<&'a PathBuf>,
    ks: &'a [usize],
    oracle: bool,
    output: &'a Path,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let corpus_path = required(args.corpus.clone(), "--corpus")?;
    let ks = args.k.clone().map(|l| l.0).unwrap_or_else(|| DEFAULT_KS.to_vec());
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--k needs positive integers"));
    }
    let oracle = args.oracle.unwrap_or(false);
    if !oracle && args.ckpt.is_none() {
        return Err(usage("--ckpt is required unless --oracle is given"));
    }

    let (bytes, _, scenes) = load_corpus_file(&corpus_path)?;
    let (mut report, checkpoint_id): (MetricsReport, String) = if oracle {
        (evaluate_oracle(&scenes, &ks)?, "oracle".into())
    } else {
        let path = args.ckpt.as_ref().expect("checked above");
        let ckpt_bytes = read_file(path, "checkpoint")?;
        let model = read_checkpoint(&ckpt_bytes)
            .and_then(|c| c.into_model::<f64>())
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        let report = evaluate_model(&scenes, &model, &ks)
            .with_context(|| format!("evaluating {} on {}", path.display(), corpus_path.display()))?;
        (report, fingerprint(&ckpt_bytes))
    };
    report.corpus_id = fingerprint(&bytes);
    report.checkpoint_id = checkpoint_id;

    print!("{}", report.table());
    if let Some(out) = &args.output {
        report.save(out).with_context(|| format!("writing {}", out.display()))?;
        write_json(
            &snapshot_path(out),
            &EvalSnapshot {
                command: "eval",
                corpus: &corpus_path,
                ckpt: args.ckpt.as_ref(),
                ks: &report.ks,
                oracle,
                output: out,
            },
        )?;
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(0);
    let corrupt = args.corrupt.unwrap_or(false);
    let options = GradCheckOptions {
        corrupt: corrupt.then_some(0.1),
    };
    let started = Instant::now();
    let report = run_gradcheck(seed, &options)?;
    println!(
        "{:<32} {:>6} {:>12} {:>12}  result",
        "block", "len", "max_abs", "max_rel"
    );
    for b in &report.blocks {
        let verdict = if b.passed { "pass" } else { "FAIL" };
        println!(
            "{:<32} {:>6} {:>12.3e} {:>12.3e}  {verdict}",
            b.name, b.len, b.max_abs_err, b.max_rel_err
        );
    }
    println!(
        "{} blocks, rtol {:e}, atol {:e}, {:.1?}",
        report.blocks.len(),
        report.tolerance.rtol,
        report.tolerance.atol,
        started.elapsed()
    );
    if let Some(out) = &args.output {
        write_json(out, &report)?;
    }
    if report.passed() {
        println!("gradcheck passed");
        return Ok(());
    }
    let worst: Vec<String> = report
        .worst_offenders()
        .iter()
        .take(5)
        .map(|b| {
            format!(
                "{}[{}]: analytic {:.6e} vs numeric {:.6e}",
                b.name, b.worst_index, b.worst_analytic, b.worst_numeric
            )
        })
        .collect();
    Err(anyhow!(
        "{} of {} blocks failed; worst offenders: {}",
        report.worst_offenders().len(),
        report.blocks.len(),
        worst.join("; ")
    ))
}
