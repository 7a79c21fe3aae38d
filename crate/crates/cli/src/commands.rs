//! The five subcommands. Each reads its prerequisites from the output
//! directory (or the configured override paths) and returns the files it wrote.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};

use excl_core::bench::{
    build_prompt_expert, evaluate, generate_domains, pretrain_source, run_ablation,
};

use crate::artifacts::{
    ablation_csv, epochs_csv, read_dataset, read_json, read_prompt_expert, read_source_expert,
    write_json, write_text, AdaptDocument, Checkpoint, EvalDocument, GenerateManifest,
};
use crate::config::RunConfig;
use crate::files;

/// Warns when a checkpoint or manifest was produced under another seed.
fn note_seed(cfg: &RunConfig, what: &str, seed: u64) {
    if seed != cfg.seed {
        log::warn!(
            "{what} was produced with seed {seed}, running with seed {}",
            cfg.seed
        );
    }
}

fn note_manifest_seed(cfg: &RunConfig) {
    let path = cfg.out_path(files::GENERATE_MANIFEST);
    if path.exists() {
        if let Ok(m) = read_json::<GenerateManifest>(&path, "generate manifest") {
            note_seed(cfg, "the dataset", m.seed);
        }
    }
}

/// Writes the source and target datasets, the zero-shot prompt expert and a manifest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let bench = cfg.bench_config();
    let domains = generate_domains(&bench.domains, cfg.seed).context("generating domains")?;
    let prompt = build_prompt_expert(&domains, &bench.domains, &bench.prompt, cfg.seed)
        .context("building the prompt expert")?;

    let source_path = cfg.out_path(files::SOURCE_DATA);
    let target_path = cfg.out_path(files::TARGET_DATA);
    let prompt_path = cfg.out_path(files::PROMPT_CHECKPOINT);
    let manifest_path = cfg.out_path(files::GENERATE_MANIFEST);
    write_text(&source_path, &domains.source.to_text())?;
    write_text(&target_path, &domains.target.to_text())?;
    write_json(&prompt_path, &Checkpoint::prompt(cfg, &prompt.expert))?;
    let manifest = GenerateManifest {
        seed: cfg.seed,
        config_digest: cfg.digest(),
        anchor_noise: prompt.anchor_noise,
        calibration_accuracy: prompt.calibration_accuracy,
        files: [
            files::SOURCE_DATA,
            files::TARGET_DATA,
            files::PROMPT_CHECKPOINT,
        ]
        .map(String::from)
        .to_vec(),
    };
    write_json(&manifest_path, &manifest)?;
    Ok(vec![source_path, target_path, prompt_path, manifest_path])
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let source = read_dataset(&cfg.source_data_path(), "source dataset")?;
    note_manifest_seed(cfg);
    let expert = pretrain_source(&source, &cfg.bench_config().pretrain, cfg.seed)
        .context("pretraining the source expert")?;
    let path = cfg.out_path(files::SOURCE_CHECKPOINT);
    write_json(&path, &Checkpoint::source(cfg, &expert))?;
    Ok(vec![path])
}

pub fn cmd_adapt(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let target = read_dataset(&cfg.target_data_path(), "target dataset")?;
    let (s_ckpt, mut source) = read_source_expert(&cfg.source_checkpoint_path())?;
    let (p_ckpt, mut prompt) = read_prompt_expert(&cfg.prompt_checkpoint_path())?;
    note_seed(cfg, "the source checkpoint", s_ckpt.seed);
    note_seed(cfg, "the prompt checkpoint", p_ckpt.seed);

    let started = Instant::now();
    let report =
        excl_core::rain::run_adaptation(&mut source, &mut prompt, &target, &cfg.adapt_config())
            .context("adaptation failed")?;
    eprintln!("adapt: {:.3} s wall-clock", started.elapsed().as_secs_f64());

    let digest = cfg.digest();
    let report_path = cfg.out_path(files::ADAPT_REPORT);
    let csv_path = cfg.out_path(files::ADAPT_EPOCHS);
    let source_path = cfg.out_path(files::ADAPTED_SOURCE);
    let prompt_path = cfg.out_path(files::ADAPTED_PROMPT);
    write_text(&csv_path, &epochs_csv(cfg.seed, &digest, &report.rows))?;
    write_json(
        &report_path,
        &AdaptDocument {
            seed: cfg.seed,
            config_digest: digest,
            config: cfg.clone(),
            report,
        },
    )?;
    write_json(&source_path, &Checkpoint::source(cfg, &source))?;
    write_json(&prompt_path, &Checkpoint::prompt(cfg, &prompt))?;
    Ok(vec![report_path, csv_path, source_path, prompt_path])
}

/// Scores the configured checkpoint pair on the target dataset.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let target = read_dataset(&cfg.target_data_path(), "target dataset")?;
    let source_path = cfg.source_checkpoint_path();
    let prompt_path = cfg.prompt_checkpoint_path();
    let (_, source) = read_source_expert(&source_path)?;
    let (_, prompt) = read_prompt_expert(&prompt_path)?;
    let metrics = evaluate(&source, &prompt, &target).context("evaluation failed")?;
    let path = cfg.out_path(files::EVAL_METRICS);
    write_json(
        &path,
        &EvalDocument {
            seed: cfg.seed,
            config_digest: cfg.digest(),
            source_checkpoint: source_path.display().to_string(),
            prompt_checkpoint: prompt_path.display().to_string(),
            metrics,
        },
    )?;
    Ok(vec![path])
}

/// Runs every loss combination on freshly built benchmarks for `ablation_seeds`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let table = run_ablation(
        &cfg.bench_config(),
        &cfg.adapt_config(),
        &cfg.ablation_seeds,
    )
    .context("ablation failed")?;
    let path = cfg.out_path(files::ABLATION);
    write_text(
        &path,
        &ablation_csv(&cfg.ablation_seeds, &cfg.digest(), &table),
    )?;
    Ok(vec![path])
}
