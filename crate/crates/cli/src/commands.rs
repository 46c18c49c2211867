use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hallulab_core::benchgen::{gen_kg_qa, gen_pope, gen_vg_qa, load_qa_items, save_warnings, DEFAULT_FREQUENCY_THRESHOLD};
use hallulab_core::datagen::{
    build_cooccurrence, cooccurrence_from_scene_graphs, derive_seed, gen_negative_captions,
    gen_region_instructions, AnnotatedCaption, CaptionRecord, SamplingMode,
};
use hallulab_core::datastore::{
    load_embeddings, load_kg_triples, load_scene_graphs, manifest_path, paired_matrices, save_embeddings,
    synth_planted_dataset, DatasetManifest, EmbeddingRecord, LabelFile, LabeledFeatureSet, Modality,
    PlantedConfig, StageTag, TokenTable,
};
use hallulab_core::eval_harness::{load_answers, score_transcripts};
use hallulab_core::losses::LossConfig;
use hallulab_core::numerics::DenseMatrix;
use hallulab_core::probes::{alignment_cosine_probe, delta_perf_split, ProbeConfig};
use hallulab_core::projector::{Checkpoint, ProjectorParams, DEFAULT_HIDDEN_FACTOR};
use hallulab_core::trainer::{train, Schedule, ScheduleConfig, TrainingData};
use hallulab_core::{LabError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{require_file, Banner, RunConfig};
use crate::{Cli, Command, EvalArgs, GenCommand, ProbeArgs, ProbeTask, ScheduleArg, SynthArgs, TrainArgs};

const DEFAULT_SEED: u64 = 0;
const DEFAULT_PER_IMAGE: usize = 3;

struct Ctx {
    seed: u64,
    out: PathBuf,
    config: RunConfig,
}

impl Ctx {
    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }

    fn banner(&self) -> Banner {
        let mut b = Banner::default();
        b.invented("seed", self.seed, DEFAULT_SEED);
        b.sourced("out", self.out.display());
        b
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        seed: cli.seed.or(config.seed).unwrap_or(DEFAULT_SEED),
        out: cli.out.or(config.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
        config,
    };
    match cli.command {
        Command::Synth(args) => synth(&ctx, args),
        Command::Gen(cmd) => gen(&ctx, cmd),
        Command::Train(args) => train_cmd(&ctx, args),
        Command::Probe(args) => probe(&ctx, args),
        Command::Eval(args) => eval(&ctx, args),
    }
}

fn labels_path(stem: &Path) -> PathBuf {
    let mut name = stem.file_name().unwrap_or_default().to_os_string();
    name.push(".labels.json");
    stem.with_file_name(name)
}

fn require_stem(stem: &Path) -> Result<()> {
    require_file(&manifest_path(stem))
}

fn synth(ctx: &Ctx, args: SynthArgs) -> Result<()> {
    let d = PlantedConfig::default();
    let s = &ctx.config.synth;
    let cfg = PlantedConfig {
        seed: ctx.seed,
        n_pairs: args.pairs.or(s.pairs).unwrap_or(d.n_pairs),
        dim: args.dim.or(s.dim).unwrap_or(d.dim),
        noise_sigma: args.noise.or(s.noise).unwrap_or(d.noise_sigma),
        n_classes: args.classes.or(s.classes).unwrap_or(d.n_classes),
    };
    ctx.banner()
        .invented("synth.pairs", cfg.n_pairs, d.n_pairs)
        .invented("synth.dim", cfg.dim, d.dim)
        .invented("synth.noise", cfg.noise_sigma, d.noise_sigma)
        .invented("synth.classes", cfg.n_classes, d.n_classes)
        .print("synth");
    let ds = synth_planted_dataset(cfg)?;
    let stem = ctx.out_file("planted")?;
    save_embeddings(&stem, &ds.manifest, &ds.records())?;
    ds.label_file().save(&labels_path(&stem))?;
    println!(
        "synth pairs={} dim={} classes={} stem={}",
        cfg.n_pairs,
        cfg.dim,
        cfg.n_classes,
        stem.display()
    );
    Ok(())
}

fn write_outputs<T: Serialize>(ctx: &Ctx, name: &str, items: &[T], warnings: &[hallulab_core::datagen::GenWarning]) -> Result<()> {
    let path = ctx.out_file(&format!("{name}.jsonl"))?;
    let mut out = fs::File::create(&path)?;
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        std::io::Write::write_all(&mut out, b"\n")?;
    }
    save_warnings(&ctx.out_file(&format!("{name}.warnings.jsonl"))?, warnings)?;
    println!(
        "gen {name} items={} warnings={} file={}",
        items.len(),
        warnings.len(),
        path.display()
    );
    Ok(())
}

fn gen(ctx: &Ctx, cmd: GenCommand) -> Result<()> {
    let g = &ctx.config.gen;
    match cmd {
        GenCommand::Pope {
            scenes,
            mode,
            per_image,
            corpus,
        } => {
            require_file(&scenes)?;
            let mode = mode.or(g.mode.clone()).unwrap_or_else(|| "all".into());
            let modes: Vec<SamplingMode> = if mode == "all" {
                SamplingMode::ALL.to_vec()
            } else {
                vec![mode.parse()?]
            };
            let per_image = per_image.or(g.per_image).unwrap_or(DEFAULT_PER_IMAGE);
            ctx.banner()
                .invented("gen.mode", mode.as_str(), "all")
                .invented("gen.per_image", per_image, DEFAULT_PER_IMAGE)
                .invented("gen.adversarial_aggregate", "sum", "sum")
                .print("gen pope");
            let graphs = load_scene_graphs(&scenes)?;
            let table = match corpus {
                Some(path) => {
                    require_file(&path)?;
                    cooccurrence_from_scene_graphs(&load_scene_graphs(&path)?)
                }
                None => cooccurrence_from_scene_graphs(&graphs),
            };
            for m in modes {
                let (items, warnings) = gen_pope(&graphs, &table, m, per_image, ctx.seed)?;
                write_outputs(ctx, &format!("pope_{}", m.name()), &items, &warnings)?;
            }
            Ok(())
        }
        GenCommand::Vg { scenes, threshold } => {
            require_file(&scenes)?;
            let threshold = threshold.or(g.threshold).unwrap_or(DEFAULT_FREQUENCY_THRESHOLD);
            ctx.banner()
                .invented("gen.threshold", threshold, DEFAULT_FREQUENCY_THRESHOLD)
                .print("gen vg");
            let (items, warnings) = gen_vg_qa(&load_scene_graphs(&scenes)?, threshold, ctx.seed)?;
            write_outputs(ctx, "vg_qa", &items, &warnings)
        }
        GenCommand::Kg { triples, handles } => {
            require_file(&triples)?;
            require_file(&handles)?;
            ctx.banner().print("gen kg");
            let handles: BTreeMap<String, String> = serde_json::from_str(&fs::read_to_string(&handles)?)?;
            let (items, warnings) = gen_kg_qa(&load_kg_triples(&triples)?, &handles, ctx.seed)?;
            write_outputs(ctx, "kg_qa", &items, &warnings)
        }
        GenCommand::Negcap { captions, scenes } => {
            require_file(&captions)?;
            ctx.banner()
                .invented("gen.pool_size", hallulab_core::datagen::NEGATIVE_POOL_SIZE, 3)
                .print("gen negcap");
            let records: Vec<CaptionRecord> = read_jsonl(&captions)?;
            let graphs = match scenes {
                Some(path) => {
                    require_file(&path)?;
                    load_scene_graphs(&path)?
                }
                None => Vec::new(),
            };
            let table = if graphs.is_empty() {
                let annotated = records
                    .iter()
                    .map(|r| AnnotatedCaption::parse(&r.caption).map(|c| c.objects().to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                build_cooccurrence(annotated)
            } else {
                cooccurrence_from_scene_graphs(&graphs)
            };
            let (items, warnings) = gen_negative_captions(&records, &graphs, &table, ctx.seed)?;
            write_outputs(ctx, "negative_captions", &items, &warnings)
        }
        GenCommand::Region { scenes } => {
            require_file(&scenes)?;
            ctx.banner().print("gen region");
            let (items, warnings) = gen_region_instructions(&load_scene_graphs(&scenes)?, ctx.seed);
            write_outputs(ctx, "region_instructions", &items, &warnings)
        }
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| LabError::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn loss_banner(b: &mut Banner, loss: &LossConfig) {
    let d = LossConfig::default();
    b.invented("loss.beta", loss.beta, d.beta)
        .invented("loss.tau1", loss.tau1, d.tau1)
        .invented("loss.tau2", loss.tau2, d.tau2)
        .sourced("loss.lambda1", loss.lambda1)
        .sourced("loss.lambda2", loss.lambda2)
        .invented("loss.normalize", loss.normalize, d.normalize);
}

fn schedule_banner(b: &mut Banner, s: &ScheduleConfig) {
    let d = ScheduleConfig::default();
    b.sourced("schedule.lambda_init", s.lambda_init)
        .invented("schedule.lambda_clamp", format!("{:?}", s.lambda_clamp), format!("{:?}", d.lambda_clamp))
        .invented("schedule.contrastive_epochs", s.contrastive_epochs, d.contrastive_epochs)
        .invented("schedule.generation_epochs", s.generation_epochs, d.generation_epochs)
        .invented("schedule.generation_lr_scale", s.generation_lr_scale, d.generation_lr_scale)
        .invented("schedule.integrated_epochs", s.integrated_epochs, d.integrated_epochs)
        .invented("schedule.batch_size", s.batch_size, d.batch_size)
        .invented("optimizer.lr", s.optimizer.lr, d.optimizer.lr)
        .invented("optimizer.beta1", s.optimizer.beta1, d.optimizer.beta1)
        .invented("optimizer.beta2", s.optimizer.beta2, d.optimizer.beta2)
        .invented("optimizer.eps", s.optimizer.eps, d.optimizer.eps);
}

/// Image rows paired with their captions, plus per-image labels.
fn load_training_data(stem: &Path, labels: Option<&Path>) -> Result<(DatasetManifest, TrainingData)> {
    require_stem(stem)?;
    let (manifest, records) = load_embeddings(stem)?;
    let pairs = paired_matrices(&manifest, &records)?;
    let label_path = labels.map(Path::to_path_buf).unwrap_or_else(|| labels_path(stem));
    require_file(&label_path)?;
    let label_file = LabelFile::load(&label_path)?;
    let labels = label_file.labels_for(&pairs.image_ids)?;
    let data = TrainingData::from_pairs(pairs, labels, label_file.n_classes)?;
    Ok((manifest, data))
}

fn train_cmd(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let loss = ctx.config.loss;
    loss.validate()?;
    let mut schedule = ctx.config.schedule;
    if let Some(s) = args.schedule {
        schedule.schedule = match s {
            ScheduleArg::Separate => Schedule::Separate,
            ScheduleArg::IntegratedFixed => Schedule::IntegratedFrozen,
            ScheduleArg::IntegratedLearnable => Schedule::IntegratedLearnable,
        };
    }
    schedule.lambda_init = args.lambda.unwrap_or(schedule.lambda_init);
    schedule.contrastive_epochs = args.contrastive_epochs.unwrap_or(schedule.contrastive_epochs);
    schedule.generation_epochs = args.generation_epochs.unwrap_or(schedule.generation_epochs);
    schedule.integrated_epochs = args.integrated_epochs.unwrap_or(schedule.integrated_epochs);
    schedule.batch_size = args.batch_size.unwrap_or(schedule.batch_size);
    schedule.optimizer.lr = args.lr.unwrap_or(schedule.optimizer.lr);
    schedule.seed = ctx.seed;
    schedule.validate()?;

    let stem = args
        .data
        .or(ctx.config.train.data.clone())
        .unwrap_or_else(|| ctx.out.join("planted"));
    let (manifest, data) = load_training_data(&stem, args.labels.as_deref())?;
    let default_hidden = DEFAULT_HIDDEN_FACTOR * manifest.dim;
    let hidden = args.hidden.or(ctx.config.train.hidden).unwrap_or(default_hidden);

    let mut banner = ctx.banner();
    banner
        .sourced("schedule", schedule_name(schedule.schedule))
        .sourced("data", stem.display())
        .invented("projector.hidden", hidden, default_hidden);
    loss_banner(&mut banner, &loss);
    schedule_banner(&mut banner, &schedule);
    banner.print("train");

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, "projector"));
    let projector = ProjectorParams::init_mlp(manifest.dim, hidden, manifest.dim, &mut rng);
    let outcome = train(&data, projector, &loss, &schedule)?;
    let checkpoint = ctx.out_file("checkpoint")?;
    Checkpoint {
        projector: outcome.projector,
        decoder: Some(outcome.decoder),
        lambda: outcome.lambda,
    }
    .save(&checkpoint)?;
    outcome.log.write_jsonl(&ctx.out_file("train_log.jsonl")?)?;
    let final_cosine = outcome.log.epochs.last().map_or(f64::NAN, |e| e.mean_pair_cosine);
    println!(
        "train schedule={} steps={} final_pair_cosine={:.4} lambda={} checkpoint={}",
        schedule_name(schedule.schedule),
        outcome.log.steps.len(),
        final_cosine,
        outcome.lambda,
        checkpoint.display()
    );
    Ok(())
}

fn schedule_name(s: Schedule) -> &'static str {
    match s {
        Schedule::Separate => "separate",
        Schedule::IntegratedFrozen => "integrated-fixed",
        Schedule::IntegratedLearnable => "integrated-learnable",
    }
}

fn probe(ctx: &Ctx, args: ProbeArgs) -> Result<()> {
    let probe_cfg = ctx.config.probe;
    let d = ProbeConfig::default();
    let mut banner = ctx.banner();
    banner
        .sourced("probe.task", format!("{:?}", args.task).to_lowercase())
        .invented("probe.lr", probe_cfg.lr, d.lr)
        .invented("probe.l2", probe_cfg.l2, d.l2)
        .invented("probe.tolerance", probe_cfg.tolerance, d.tolerance)
        .invented("probe.max_iterations", probe_cfg.max_iterations, d.max_iterations)
        .invented("probe.test_fraction", probe_cfg.test_fraction, d.test_fraction);
    banner.print("probe");
    match args.task {
        ProbeTask::Cosine => probe_cosine(ctx, &args),
        ProbeTask::Deltaperf => probe_deltaperf(ctx, &args, &probe_cfg),
    }
}

fn data_stem(ctx: &Ctx, args: &ProbeArgs) -> PathBuf {
    args.data
        .clone()
        .or(ctx.config.train.data.clone())
        .unwrap_or_else(|| ctx.out.join("planted"))
}

fn load_checkpoint(ctx: &Ctx, args: &ProbeArgs) -> Result<Checkpoint> {
    let stem = args.checkpoint.clone().unwrap_or_else(|| ctx.out.join("checkpoint"));
    require_stem(&stem)?;
    Checkpoint::load(&stem)
}

fn probe_cosine(ctx: &Ctx, args: &ProbeArgs) -> Result<()> {
    let stem = data_stem(ctx, args);
    require_stem(&stem)?;
    let checkpoint = load_checkpoint(ctx, args)?;
    let (manifest, records) = load_embeddings(&stem)?;
    let by_id: BTreeMap<&str, &EmbeddingRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let (table, pairs): (TokenTable, Vec<(String, Vec<String>)>) = match (&args.tokens, &args.captions) {
        (Some(tokens), Some(captions)) => {
            require_stem(tokens)?;
            require_file(captions)?;
            let (tm, trecords) = load_embeddings(tokens)?;
            let table = TokenTable::from_records(tm.dim, &trecords)?;
            let caps: Vec<CaptionRecord> = read_jsonl(captions)?;
            let pairs = caps
                .into_iter()
                .map(|c| {
                    let text = AnnotatedCaption::parse(&c.caption)?.text();
                    Ok((c.image_id, hallulab_core::datastore::tokenize(&text)))
                })
                .collect::<Result<Vec<_>>>()?;
            (table, pairs)
        }
        _ => {
            let pairing = manifest
                .pairing
                .clone()
                .ok_or_else(|| LabError::InvalidInput("dataset has no image/text pairing".into()))?;
            let texts: Vec<EmbeddingRecord> =
                records.iter().filter(|r| r.modality == Modality::Text).cloned().collect();
            let table = TokenTable::from_records(manifest.dim, &texts)?;
            let pairs = manifest
                .ids
                .iter()
                .filter_map(|id| pairing.get(id).map(|t| (id.clone(), vec![t.clone()])))
                .collect();
            (table, pairs)
        }
    };
    let mut images = Vec::with_capacity(pairs.len());
    let mut captions = Vec::with_capacity(pairs.len());
    for (image_id, tokens) in pairs {
        let record = by_id
            .get(image_id.as_str())
            .ok_or_else(|| LabError::InvalidInput(format!("no embedding for image {image_id}")))?;
        images.push(DenseMatrix::new(1, manifest.dim, record.vector.clone())?);
        captions.push(tokens);
    }
    let dataset_id = stem.file_name().map_or("dataset".into(), |n| n.to_string_lossy().into_owned());
    let report = alignment_cosine_probe(&checkpoint.projector, &images, &table, &captions, &dataset_id)?;
    report.save(&ctx.out_file("cosine_report.json")?)?;
    println!("{}", report.summary_line());
    Ok(())
}

fn feature_set(stem: &Path, labels: &LabelFile, images_only: bool) -> Result<(Vec<String>, LabeledFeatureSet)> {
    require_stem(stem)?;
    let (manifest, records) = load_embeddings(stem)?;
    let kept: Vec<&EmbeddingRecord> = records
        .iter()
        .filter(|r| !images_only || r.modality == Modality::Image)
        .collect();
    let ids: Vec<String> = kept.iter().map(|r| r.id.clone()).collect();
    let rows: Vec<Vec<f64>> = kept.iter().map(|r| r.vector.clone()).collect();
    let features = DenseMatrix::from_rows(manifest.dim, &rows)?;
    let set = LabeledFeatureSet::new(features, labels.labels_for(&ids)?, labels.n_classes, StageTag::PreProjector)?;
    Ok((ids, set))
}

fn probe_deltaperf(ctx: &Ctx, args: &ProbeArgs, cfg: &ProbeConfig) -> Result<()> {
    let (pre, post) = match (&args.pre, &args.post) {
        (Some(pre_stem), Some(post_stem)) => {
            let label_path = args.labels.clone().unwrap_or_else(|| labels_path(pre_stem));
            require_file(&label_path)?;
            let labels = LabelFile::load(&label_path)?;
            let (_, pre) = feature_set(pre_stem, &labels, false)?;
            let (_, post) = feature_set(post_stem, &labels, false)?;
            let post = post.with_features(post.features.clone(), StageTag::PostProjector)?;
            (pre, post)
        }
        _ => {
            let stem = data_stem(ctx, args);
            let label_path = args.labels.clone().unwrap_or_else(|| labels_path(&stem));
            require_file(&label_path)?;
            let labels = LabelFile::load(&label_path)?;
            let (_, pre) = feature_set(&stem, &labels, true)?;
            let projected = load_checkpoint(ctx, args)?.projector.forward(&pre.features)?;
            let post = pre.with_features(projected, StageTag::PostProjector)?;
            (pre, post)
        }
    };
    let report = delta_perf_split(&pre, &post, ctx.seed, cfg)?;
    report.save(&ctx.out_file("deltaperf_report.json")?)?;
    println!("{}", report.summary_line());
    Ok(())
}

fn eval(ctx: &Ctx, args: EvalArgs) -> Result<()> {
    require_file(&args.qa)?;
    require_file(&args.answers)?;
    Banner::default().sourced("out", ctx.out.display()).print("eval");
    let items = load_qa_items(&args.qa)?;
    let answers = load_answers(&args.answers)?;
    let report = score_transcripts(&items, &answers)?;
    report.save(&ctx.out_file("eval_report.json")?)?;
    print!("{}", report.summary_table());
    Ok(())
}
