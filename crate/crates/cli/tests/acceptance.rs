//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any of them fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic;
use std::process::ExitCode;
use std::time::Instant;

use common::{random_corpus, random_triples};
use hallulab_core::benchgen::{gen_kg_qa, gen_pope, gen_vg_qa, Answer, Fact, QAItem, QType};
use hallulab_core::datagen::{
    cooccurrence_from_scene_graphs, derive_seed, sample_negative_objects_with, Aggregate, SamplingMode,
};
use hallulab_core::datastore::{
    synth_planted_dataset, KgTriple, LabeledFeatureSet, PlantedConfig, SceneGraph, StageTag,
};
use hallulab_core::eval_harness::{score_transcripts, AnswerRecord};
use hallulab_core::losses::{
    contrastive_directional, contrastive_itc, generation_surrogate_loss, margin_positive_vs_all,
    margin_synthetic_vs_standard, total_finegrained_loss, BatchGrads, ContrastiveBatch, Direction, LinearDecoder,
    LossConfig, LossValueAndGrads,
};
use hallulab_core::numerics::{finite_difference_gradient, random_orthogonal, relative_error, DenseMatrix};
use hallulab_core::probes::{delta_perf_split, ProbeConfig, ProbeReport};
use hallulab_core::projector::{AffineLayer, ProjectorParams};
use hallulab_core::trainer::{
    mean_pair_cosine, train_integrated, train_separate, Schedule, ScheduleConfig, Stage, TrainingData,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 24;
const KINK_GAP: f64 = 1e-3;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("loss oracle equivalence", loss_oracles),
        ("loss reductions", reductions),
        ("default constants", default_constants),
        ("alignment recovery", alignment_recovery),
        ("lambda dynamics", lambda_dynamics),
        ("probe correctness", probe_correctness),
        ("sampling oracles", sampling_oracles),
        ("scoring", scoring),
        ("cli determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---- random instances and naive oracles ----

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, syn: std::ops::RangeInclusive<usize>) -> ContrastiveBatch {
    let images = DenseMatrix::gaussian(n, d, 1.0, rng);
    let positives = DenseMatrix::gaussian(n, d, 1.0, rng);
    let standard = (0..n)
        .map(|_| {
            let r = rng.random_range(1..=3);
            DenseMatrix::gaussian(r, d, 1.0, rng)
        })
        .collect();
    let synthetic = (0..n)
        .map(|_| {
            let r = rng.random_range(syn.clone());
            DenseMatrix::gaussian(r, d, 1.0, rng)
        })
        .collect();
    ContrastiveBatch::new(images, positives, standard, synthetic).unwrap()
}

fn random_config(rng: &mut ChaCha8Rng, normalize: bool) -> LossConfig {
    LossConfig {
        beta: if normalize {
            rng.random_range(0.05..1.0)
        } else {
            rng.random_range(1.0..3.0)
        },
        tau1: rng.random_range(0.0..0.5),
        tau2: rng.random_range(0.0..0.5),
        lambda1: rng.random_range(0.0..2.0),
        lambda2: rng.random_range(0.0..2.0),
        normalize,
    }
}

fn sim(a: &[f64], b: &[f64], normalize: bool) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if normalize {
        ab / (aa.sqrt() * bb.sqrt())
    } else {
        ab
    }
}

/// Cross-entropy with the first entry as the target.
fn naive_ce(scores: &[f64]) -> f64 {
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    z.ln() - scores[0]
}

fn naive_directional(b: &ContrastiveBatch, cfg: &LossConfig, dir: Direction, syn: bool) -> f64 {
    let n = b.len();
    let mut total = 0.0;
    for k in 0..n {
        let (anchor, candidates): (&[f64], Vec<&[f64]>) = match dir {
            Direction::I2t => {
                let mut c = vec![b.positives().row(k)];
                c.extend(b.standard_negatives()[k].row_iter());
                if syn {
                    c.extend(b.synthetic_negatives()[k].row_iter());
                }
                (b.images().row(k), c)
            }
            Direction::T2i => {
                let mut c = vec![b.images().row(k)];
                c.extend((0..n).filter(|&j| j != k).map(|j| b.images().row(j)));
                (b.positives().row(k), c)
            }
        };
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| sim(anchor, c, cfg.normalize) / cfg.beta)
            .collect();
        total += naive_ce(&scores);
    }
    total / n as f64
}

fn naive_itc(b: &ContrastiveBatch, cfg: &LossConfig, syn: bool) -> f64 {
    0.5 * (naive_directional(b, cfg, Direction::I2t, syn) + naive_directional(b, cfg, Direction::T2i, syn))
}

/// Hinge arguments of both margin losses, anchor by anchor.
fn hinge_args(b: &ContrastiveBatch, cfg: &LossConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut l1 = Vec::new();
    let mut l2 = Vec::new();
    for k in 0..b.len() {
        let img = b.images().row(k);
        let s_pos = sim(img, b.positives().row(k), cfg.normalize);
        let std: Vec<f64> = b.standard_negatives()[k]
            .row_iter()
            .map(|t| sim(img, t, cfg.normalize))
            .collect();
        let syn: Vec<f64> = b.synthetic_negatives()[k]
            .row_iter()
            .map(|t| sim(img, t, cfg.normalize))
            .collect();
        l1.push(std.iter().chain(&syn).map(|s| cfg.tau1 - s_pos + s).collect());
        let mut pairs = Vec::new();
        for s in &syn {
            for t in &std {
                pairs.push(cfg.tau2 - s + t);
            }
        }
        l2.push(pairs);
    }
    (l1, l2)
}

fn mean_hinge(args: &[Vec<f64>]) -> f64 {
    let per_anchor: f64 = args
        .iter()
        .map(|a| a.iter().map(|v| v.max(0.0)).sum::<f64>() / a.len() as f64)
        .sum();
    per_anchor / args.len() as f64
}

fn naive_total(b: &ContrastiveBatch, cfg: &LossConfig) -> f64 {
    let (l1, l2) = hinge_args(b, cfg);
    naive_itc(b, cfg, true) + cfg.lambda1 * mean_hinge(&l1) + cfg.lambda2 * mean_hinge(&l2)
}

fn naive_surrogate(x: &DenseMatrix, targets: &[usize], dec: &LinearDecoder) -> f64 {
    let (d, c) = (dec.dim(), dec.n_classes());
    let flat = dec.to_flat();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let logits: Vec<f64> = (0..c)
            .map(|j| (0..d).map(|p| x.get(i, p) * flat[p * c + j]).sum::<f64>() + flat[d * c + j])
            .collect();
        let mut shifted = vec![logits[t]];
        shifted.extend(logits.iter().enumerate().filter(|(j, _)| *j != t).map(|(_, v)| *v));
        total += naive_ce(&shifted);
    }
    total / targets.len() as f64
}

fn away_from_kinks(b: &ContrastiveBatch, cfg: &LossConfig) -> bool {
    let (l1, l2) = hinge_args(b, cfg);
    l1.iter().chain(&l2).flatten().all(|v| v.abs() > KINK_GAP)
}

// ---- 1 ----

fn batch_fd_error<F>(batch: &ContrastiveBatch, f: F) -> f64
where
    F: Fn(&ContrastiveBatch) -> LossValueAndGrads<BatchGrads>,
{
    let analytic = f(batch).grads.to_flat();
    let numeric = finite_difference_gradient(|p| f(&batch.with_flat(p)).value, &batch.to_flat(), FD_EPS).unwrap();
    relative_error(&analytic, &numeric)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };

    type BatchLoss = fn(&ContrastiveBatch, &LossConfig) -> LossValueAndGrads<BatchGrads>;
    let batch_losses: [(&str, BatchLoss, bool); 9] = [
        ("i2t", |b, c| contrastive_directional(b, c, Direction::I2t, false).unwrap(), false),
        ("i2t+syn", |b, c| contrastive_directional(b, c, Direction::I2t, true).unwrap(), false),
        ("t2i", |b, c| contrastive_directional(b, c, Direction::T2i, false).unwrap(), false),
        ("t2i+syn", |b, c| contrastive_directional(b, c, Direction::T2i, true).unwrap(), false),
        ("itc", |b, c| contrastive_itc(b, c, false).unwrap(), false),
        ("itc+syn", |b, c| contrastive_itc(b, c, true).unwrap(), false),
        ("margin_pos", |b, c| margin_positive_vs_all(b, c).unwrap(), true),
        ("margin_syn", |b, c| margin_synthetic_vs_standard(b, c).unwrap(), true),
        ("total", |b, c| total_finegrained_loss(b, c).unwrap(), true),
    ];
    for (name, loss, hinge) in batch_losses {
        for i in 0..GRAD_INSTANCES {
            let normalize = i % 4 != 3;
            let (batch, cfg) = loop {
                let n = rng.random_range(2..=4);
                let d = rng.random_range(2..=5);
                let b = random_batch(&mut rng, n, d, 1..=3);
                let c = random_config(&mut rng, normalize);
                if !hinge || away_from_kinks(&b, &c) {
                    break (b, c);
                }
            };
            record(name, batch_fd_error(&batch, |b| loss(b, &cfg)));
        }
    }

    for _ in 0..GRAD_INSTANCES {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(2..=6);
        let c = rng.random_range(2..=5);
        let x = DenseMatrix::gaussian(n, d, 1.0, &mut rng);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let dec = LinearDecoder::init(d, c, &mut rng);
        let np = n * d;
        let eval = |p: &[f64]| {
            let x = DenseMatrix::new(n, d, p[..np].to_vec()).unwrap();
            let mut dec = dec.clone();
            dec.set_flat(&p[np..]);
            generation_surrogate_loss(&x, &targets, &dec).unwrap()
        };
        let mut params = x.as_slice().to_vec();
        params.extend(dec.to_flat());
        let g = eval(&params).grads;
        let mut analytic = g.projected.as_slice().to_vec();
        analytic.extend(g.decoder_flat());
        let numeric = finite_difference_gradient(|p| eval(p).value, &params, FD_EPS).unwrap();
        record("surrogate", relative_error(&analytic, &numeric));
    }

    for i in 0..GRAD_INSTANCES {
        let rows = rng.random_range(1..=5);
        let din = rng.random_range(1..=6);
        let dout = rng.random_range(1..=6);
        let projector = if i % 3 == 2 {
            ProjectorParams::init_linear(din, dout, &mut rng)
        } else {
            let hidden = rng.random_range(2..=8);
            ProjectorParams::init_mlp(din, hidden, dout, &mut rng)
        };
        let x = DenseMatrix::gaussian(rows, din, 1.0, &mut rng);
        let up = DenseMatrix::gaussian(rows, dout, 1.0, &mut rng);
        let contract = |p: &ProjectorParams, x: &DenseMatrix| -> f64 {
            let y = p.forward(x).unwrap();
            y.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
        };
        let g = projector.backward(&x, &up).unwrap();
        let numeric = finite_difference_gradient(
            |p| {
                let mut q = projector.clone();
                q.set_flat(p);
                contract(&q, &x)
            },
            &projector.to_flat(),
            FD_EPS,
        )
        .unwrap();
        record("projector_params", relative_error(&g.params_flat(), &numeric));
        let numeric = finite_difference_gradient(
            |p| contract(&projector, &DenseMatrix::new(rows, din, p.to_vec()).unwrap()),
            x.as_slice(),
            FD_EPS,
        )
        .unwrap();
        record("projector_input", relative_error(g.input.as_slice(), &numeric));
    }

    let elapsed = start.elapsed().as_secs_f64();
    let (name, max) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, e)| (*n, *e))
        .unwrap();
    ensure(max <= FD_TOL, || format!("{name} relative error {max:.3e} > {FD_TOL:e}"))?;
    ensure(elapsed < 60.0, || format!("took {elapsed:.1}s, limit 60s"))?;
    Ok(format!(
        "{} checks x {GRAD_INSTANCES} instances, worst {name} rel err {max:.2e}",
        worst.len()
    ))
}

// ---- 2 ----

fn loss_oracles() -> Outcome {
    const TRIALS: usize = 100;
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut check = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let diff = (got - want).abs();
        worst = worst.max(diff);
        ensure(diff <= TOL, || format!("{name}: batched {got} vs naive {want}"))
    };
    for trial in 0..TRIALS {
        let normalize = trial % 4 != 3;
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=8);
        let b = random_batch(&mut rng, n, d, 0..=3);
        let bs = random_batch(&mut rng, n, d, 1..=3);
        let cfg = random_config(&mut rng, normalize);
        for dir in [Direction::I2t, Direction::T2i] {
            for syn in [false, true] {
                let got = contrastive_directional(&b, &cfg, dir, syn).unwrap().value;
                check("directional", got, naive_directional(&b, &cfg, dir, syn))?;
            }
        }
        for syn in [false, true] {
            check("itc", contrastive_itc(&b, &cfg, syn).unwrap().value, naive_itc(&b, &cfg, syn))?;
        }
        let (l1, l2) = hinge_args(&bs, &cfg);
        check("margin_pos", margin_positive_vs_all(&bs, &cfg).unwrap().value, mean_hinge(&l1))?;
        check(
            "margin_syn",
            margin_synthetic_vs_standard(&bs, &cfg).unwrap().value,
            mean_hinge(&l2),
        )?;
        check("total", total_finegrained_loss(&bs, &cfg).unwrap().value, naive_total(&bs, &cfg))?;

        let c = rng.random_range(2..=6);
        let x = DenseMatrix::gaussian(n, d, 1.0, &mut rng);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let dec = LinearDecoder::init(d, c, &mut rng);
        check(
            "surrogate",
            generation_surrogate_loss(&x, &targets, &dec).unwrap().value,
            naive_surrogate(&x, &targets, &dec),
        )?;
    }
    Ok(format!("{TRIALS} trials x 9 losses, max |diff| {worst:.2e}"))
}

// ---- 3 ----

fn same_bits(a: &LossValueAndGrads<BatchGrads>, b: &LossValueAndGrads<BatchGrads>) -> bool {
    a.value.to_bits() == b.value.to_bits()
        && a.grads
            .to_flat()
            .iter()
            .zip(b.grads.to_flat())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=8);
        let empty = random_batch(&mut rng, n, d, 0..=0);
        let with_syn = random_batch(&mut rng, n, d, 1..=3);
        let normalize = rng.random_bool(0.75);
        let mut cfg = random_config(&mut rng, normalize);

        let a = contrastive_directional(&empty, &cfg, Direction::I2t, true).unwrap();
        let b = contrastive_directional(&empty, &cfg, Direction::I2t, false).unwrap();
        ensure(same_bits(&a, &b), || "i2t with empty synthetic set differs from plain i2t".into())?;
        let a = contrastive_itc(&empty, &cfg, true).unwrap();
        let b = contrastive_itc(&empty, &cfg, false).unwrap();
        ensure(same_bits(&a, &b), || "itc with empty synthetic set differs from plain itc".into())?;

        cfg.lambda1 = 0.0;
        cfg.lambda2 = 0.0;
        let t = total_finegrained_loss(&with_syn, &cfg).unwrap();
        let itc = contrastive_itc(&with_syn, &cfg, true).unwrap();
        ensure(same_bits(&t, &itc), || "total with zero margins differs from itc".into())?;
        let t = total_finegrained_loss(&empty, &cfg).unwrap();
        let itc = contrastive_itc(&empty, &cfg, false).unwrap();
        ensure(same_bits(&t, &itc), || "total with zero margins and no synthetic differs from itc".into())?;
    }
    Ok("100 random batches, values and gradients bitwise equal".into())
}

// ---- 4 ----

fn default_constants() -> Outcome {
    let s = ScheduleConfig::default();
    let l = LossConfig::default();
    ensure(s.lambda_init == 5.0, || format!("lambda_init = {}", s.lambda_init))?;
    ensure(l.lambda1 == 1.0 && l.lambda2 == 1.0, || {
        format!("lambda1 = {}, lambda2 = {}", l.lambda1, l.lambda2)
    })?;
    s.validate().map_err(|e| e.to_string())?;
    l.validate().map_err(|e| e.to_string())?;
    Ok(format!(
        "lambda_init={} lambda1={} lambda2={}",
        s.lambda_init, l.lambda1, l.lambda2
    ))
}

// ---- 5 ----

fn planted(n_pairs: usize) -> (hallulab_core::datastore::PlantedDataset, TrainingData) {
    let ds = synth_planted_dataset(PlantedConfig {
        seed: 7,
        n_pairs,
        dim: 32,
        noise_sigma: 0.1,
        n_classes: 4,
    })
    .unwrap();
    let data = TrainingData::new(ds.image_matrix(), ds.text_matrix(), ds.labels().to_vec(), 4).unwrap();
    (ds, data)
}

fn alignment_recovery() -> Outcome {
    let start = Instant::now();
    let (ds, data) = planted(512);
    let projector = ProjectorParams::init_default(32, 32, &mut ChaCha8Rng::seed_from_u64(derive_seed(7, "projector")));
    let c0 = mean_pair_cosine(&projector, &ds.image_matrix(), &ds.text_matrix()).unwrap();
    let schedule = ScheduleConfig {
        seed: 7,
        ..ScheduleConfig::default()
    };
    ensure(schedule.contrastive_epochs <= 50, || {
        format!("{} contrastive epochs", schedule.contrastive_epochs)
    })?;
    let out = train_separate(&data, projector, &LossConfig::default(), &schedule).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let contrastive: Vec<f64> = out
        .log
        .epochs
        .iter()
        .filter(|e| e.stage == Stage::Contrastive)
        .map(|e| e.mean_pair_cosine)
        .collect();
    let c1 = *contrastive.last().ok_or("no contrastive epochs logged")?;
    ensure(c0.abs() < 0.1, || format!("initial cosine {c0:.4} not near zero"))?;
    ensure(c1 >= 0.8, || format!("cosine after {} epochs {c1:.4} < 0.8", contrastive.len()))?;
    ensure(elapsed < 120.0, || format!("took {elapsed:.1}s, limit 120s"))?;
    let first = contrastive.iter().position(|&c| c >= 0.8).unwrap() + 1;
    Ok(format!(
        "cosine {c0:.4} -> {c1:.4} after {} epochs (>= 0.8 from epoch {first})",
        contrastive.len()
    ))
}

// ---- 6 ----

fn lambda_dynamics() -> Outcome {
    let (_, data) = planted(256);
    let mut summary = Vec::new();
    for (lambda_init, seed) in [(5.0, 7u64), (10.0, 8), (0.5, 9)] {
        let schedule = ScheduleConfig {
            schedule: Schedule::IntegratedLearnable,
            lambda_init,
            integrated_epochs: 10,
            seed,
            ..ScheduleConfig::default()
        };
        let (lo, hi) = schedule.lambda_clamp;
        let projector = ProjectorParams::init_default(32, 32, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = train_integrated(&data, projector, &LossConfig::default(), &schedule).map_err(|e| e.to_string())?;
        let steps = &out.log.steps;
        ensure(!steps.is_empty(), || "no steps logged".into())?;
        for (i, s) in steps.iter().enumerate() {
            let lambda = s.lambda.ok_or("step without lambda")?;
            ensure((lo..=hi).contains(&lambda), || format!("step {i}: lambda {lambda} outside [{lo}, {hi}]"))?;
        }
        for (i, w) in steps.windows(2).enumerate() {
            let itc = w[0].itc.ok_or("step without itc")?;
            let (a, b) = (w[0].lambda.unwrap(), w[1].lambda.unwrap());
            if itc > 0.0 {
                ensure(b <= a, || format!("lambda rose from {a} to {b} at step {}", i + 1))?;
            }
        }
        summary.push(format!(
            "{lambda_init}->{:.3}",
            steps.last().unwrap().lambda.unwrap()
        ));
    }
    Ok(format!("non-increasing and clamped: {}", summary.join(", ")))
}

// ---- 7 ----

fn linear_projector(weight: DenseMatrix) -> ProjectorParams {
    let bias = vec![0.0; weight.cols()];
    ProjectorParams::new(vec![AffineLayer::new(weight, bias).unwrap()]).unwrap()
}

fn project_and_probe(pre: &LabeledFeatureSet, projector: &ProjectorParams) -> ProbeReport {
    let post = pre
        .with_features(projector.forward(&pre.features).unwrap(), StageTag::PostProjector)
        .unwrap();
    delta_perf_split(pre, &post, 11, &ProbeConfig::default()).unwrap()
}

fn probe_correctness() -> Outcome {
    let (ds, _) = planted(512);
    let images = ds.image_features();
    let identity = project_and_probe(&images, &ProjectorParams::identity(32));
    ensure(identity.delta_perf.abs() <= 0.02, || format!("identity: {}", identity.summary_line()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q1 = random_orthogonal(32, &mut rng);
    let q2 = random_orthogonal(32, &mut rng);
    let mut diag = DenseMatrix::zeros(32, 32).into_vec();
    for i in 0..32 {
        diag[i * 33] = 1.0 + 9.0 * i as f64 / 31.0;
    }
    let diag = DenseMatrix::new(32, 32, diag).unwrap();
    let map = q1.matmul(&diag).unwrap().matmul(&q2).unwrap();
    let conditioned = project_and_probe(&images, &linear_projector(map));
    ensure(conditioned.delta_perf.abs() <= 0.02, || format!("cond-10 map: {}", conditioned.summary_line()))?;

    let (big, _) = planted(4096);
    let texts = LabeledFeatureSet::new(big.text_matrix(), big.labels().to_vec(), 4, StageTag::PreProjector).unwrap();
    let mut mask = DenseMatrix::identity(32).into_vec();
    for c in 0..4 {
        mask[c * 33] = 0.0;
    }
    let zeroing = project_and_probe(&texts, &linear_projector(DenseMatrix::new(32, 32, mask).unwrap()));
    let chance = 1.0 / 4.0;
    let floor = zeroing.perf_pre - chance - 0.05;
    ensure(zeroing.delta_perf >= floor, || {
        format!("zeroing: delta {:.4} < {floor:.4} ({})", zeroing.delta_perf, zeroing.summary_line())
    })?;
    Ok(format!(
        "identity {:+.4}, cond-10 {:+.4}, zeroing {:.4} >= {floor:.4}",
        identity.delta_perf, conditioned.delta_perf, zeroing.delta_perf
    ))
}

// ---- 8 ----

fn brute_pool(
    graphs: &[SceneGraph],
    present: &BTreeSet<String>,
    mode: SamplingMode,
    k: usize,
    aggregate: Aggregate,
) -> Option<Vec<String>> {
    let sets: Vec<BTreeSet<String>> = graphs
        .iter()
        .map(|g| g.objects.iter().map(|o| o.name.clone()).collect())
        .collect();
    let vocab: BTreeSet<&String> = sets.iter().flatten().collect();
    let count = |c: &String| sets.iter().filter(|s| s.contains(c)).count();
    let co = |a: &String, c: &String| sets.iter().filter(|s| s.contains(a) && s.contains(c)).count();
    let mut scored: Vec<(usize, &String)> = vocab
        .into_iter()
        .filter(|c| !present.contains(*c))
        .map(|c| {
            let score = match (mode, aggregate) {
                (SamplingMode::Popular, _) => count(c),
                (_, Aggregate::Sum) => present.iter().map(|p| co(p, c)).sum(),
                (_, Aggregate::Max) => present.iter().map(|p| co(p, c)).max().unwrap_or(0),
            };
            (score, c)
        })
        .collect();
    if scored.len() < k {
        return None;
    }
    // Highest score first, ties by name: an exhaustive argmax per slot.
    let mut pool = Vec::new();
    for _ in 0..k {
        let best = (0..scored.len())
            .reduce(|i, j| {
                let (a, b) = (&scored[i], &scored[j]);
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    j
                } else {
                    i
                }
            })
            .unwrap();
        pool.push(scored.remove(best).1.clone());
    }
    Some(pool)
}

fn check_balanced(name: &str, items: &[QAItem]) -> Result<(), String> {
    ensure(!items.is_empty(), || format!("{name}: empty set"))?;
    let mut by_type: BTreeMap<QType, (usize, usize)> = BTreeMap::new();
    for i in items {
        let e = by_type.entry(i.qtype).or_default();
        match i.gold {
            Answer::Yes => e.0 += 1,
            Answer::No => e.1 += 1,
        }
    }
    for (t, (y, n)) in by_type {
        ensure(y == n, || format!("{name}: {} has {y} yes vs {n} no", t.name()))?;
    }
    Ok(())
}

/// True when the fact a QA item asks about holds in its source.
fn fact_holds(item: &QAItem, graphs: &BTreeMap<&str, &SceneGraph>, kg: Option<(&[KgTriple], &BTreeMap<String, String>)>) -> bool {
    let graph = || graphs[item.subject.as_str()];
    let name_of = |g: &SceneGraph, id: &str| g.objects.iter().find(|o| o.object_id == id).map(|o| o.name.clone());
    match &item.provenance.fact {
        Fact::Object { object } => graph().objects.iter().any(|o| &o.name == object),
        Fact::Attribute { object, attribute, .. } => graph()
            .objects
            .iter()
            .any(|o| &o.name == object && o.attributes.contains(attribute)),
        Fact::Relation {
            subject,
            predicate,
            object,
            ..
        } => {
            let g = graph();
            g.relations.iter().any(|r| {
                &r.predicate == predicate
                    && name_of(g, &r.subject_id).as_ref() == Some(subject)
                    && name_of(g, &r.object_id).as_ref() == Some(object)
            })
        }
        Fact::Entity { entity } => kg.unwrap().1.get(entity) == Some(&item.subject),
        Fact::Triple { head, relation, tail } => kg
            .unwrap()
            .0
            .iter()
            .any(|t| &t.head == head && &t.relation == relation && &t.tail == tail),
    }
}

fn validate_items(
    name: &str,
    items: &[QAItem],
    graphs: &[SceneGraph],
    kg: Option<(&[KgTriple], &BTreeMap<String, String>)>,
) -> Result<(), String> {
    let by_id: BTreeMap<&str, &SceneGraph> = graphs.iter().map(|g| (g.image_id.as_str(), g)).collect();
    for i in items {
        let holds = fact_holds(i, &by_id, kg);
        ensure(holds == (i.gold == Answer::Yes), || {
            format!("{name}: {} gold {:?} but fact holds = {holds}", i.id, i.gold)
        })?;
    }
    check_balanced(name, items)
}

fn sampling_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pools = 0;
    let mut n_items = 0;
    for trial in 0..40 {
        let n_images = rng.random_range(1..=50);
        let graphs = random_corpus(&mut rng, n_images);
        let table = cooccurrence_from_scene_graphs(&graphs);
        let mut presents: Vec<BTreeSet<String>> = graphs.iter().map(|g| g.object_names()).collect();
        for _ in 0..10 {
            presents.push(
                common::NAMES
                    .iter()
                    .filter(|_| rng.random_bool(0.3))
                    .map(|s| s.to_string())
                    .collect(),
            );
        }
        for present in &presents {
            for mode in [SamplingMode::Popular, SamplingMode::Adversarial] {
                for aggregate in [Aggregate::Sum, Aggregate::Max] {
                    for k in 1..=4 {
                        let got = sample_negative_objects_with(&table, present, mode, k, 0, aggregate).ok();
                        let want = brute_pool(&graphs, present, mode, k, aggregate);
                        ensure(got == want, || {
                            format!("{} k={k} present={present:?}: {got:?} vs {want:?}", mode.name())
                        })?;
                        pools += 1;
                    }
                }
            }
        }

        let seed = trial as u64;
        for mode in SamplingMode::ALL {
            let (items, _) = gen_pope(&graphs, &table, mode, 2, seed).map_err(|e| e.to_string())?;
            if !items.is_empty() {
                validate_items(&format!("pope-{}", mode.name()), &items, &graphs, None)?;
            }
            n_items += items.len();
        }
        let (items, _) = gen_vg_qa(&graphs, 2, seed).map_err(|e| e.to_string())?;
        if !items.is_empty() {
            validate_items("vg", &items, &graphs, None)?;
        }
        n_items += items.len();
        let n_triples = rng.random_range(5..=40);
        let (triples, handles) = random_triples(&mut rng, n_triples);
        let (items, _) = gen_kg_qa(&triples, &handles, seed).map_err(|e| e.to_string())?;
        validate_items("kg", &items, &graphs, Some((&triples, &handles)))?;
        n_items += items.len();
    }
    Ok(format!(
        "{pools} pools match brute force; {n_items} QA items, no false negatives, all balanced"
    ))
}

// ---- 9 ----

fn scoring() -> Outcome {
    let (items, answers) = common::confusion_fixture();
    let report = score_transcripts(&items, &answers).map_err(|e| e.to_string())?;
    let c = &report.overall;
    ensure((c.counts.tp, c.counts.fp, c.counts.tn, c.counts.fn_) == (40, 10, 35, 15), || {
        format!("counts {:?}", c.counts)
    })?;
    let (acc, f1) = (format!("{:.6}", c.accuracy), format!("{:.6}", c.f1));
    ensure(acc == "0.750000" && f1 == "0.761905", || format!("acc {acc} f1 {f1}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let graphs = random_corpus(&mut rng, 50);
    let table = cooccurrence_from_scene_graphs(&graphs);
    let (triples, handles) = random_triples(&mut rng, 30);
    let mut sets = vec![
        ("vg", gen_vg_qa(&graphs, 2, 1).unwrap().0),
        ("kg", gen_kg_qa(&triples, &handles, 1).unwrap().0),
    ];
    for mode in SamplingMode::ALL {
        sets.push((mode.name(), gen_pope(&graphs, &table, mode, 2, 1).unwrap().0));
    }
    for (name, set) in &sets {
        let yes: Vec<AnswerRecord> = set
            .iter()
            .map(|i| AnswerRecord {
                item_id: i.id.clone(),
                transcript: "Yes.".into(),
            })
            .collect();
        let r = score_transcripts(set, &yes).map_err(|e| e.to_string())?;
        ensure(r.overall.accuracy == 0.5 && r.overall.f1 == 2.0 / 3.0, || {
            format!("{name}: always-yes acc {} f1 {}", r.overall.accuracy, r.overall.f1)
        })?;
    }
    Ok(format!(
        "fixture acc {acc} f1 {f1}; always-yes exact on {} balanced sets",
        sets.len()
    ))
}

// ---- 10 ----

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = common::write_fixtures(&tmp.path().join("inputs"));
    let inputs_before: Vec<Vec<u8>> = fx.paths().iter().map(|p| std::fs::read(p).unwrap()).collect();

    let workflows: Vec<(&str, Vec<String>)> = {
        let p = |p: &std::path::Path| p.display().to_string();
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        vec![
            ("synth", s(&["synth", "--seed", "7", "--pairs", "512", "--dim", "32"])),
            ("gen pope", [s(&["gen", "pope", "--seed", "7", "--scenes"]), vec![p(&fx.scenes)]].concat()),
            ("gen vg", [s(&["gen", "vg", "--seed", "7", "--threshold", "3", "--scenes"]), vec![p(&fx.scenes)]].concat()),
            (
                "gen kg",
                [s(&["gen", "kg", "--seed", "7", "--triples"]), vec![p(&fx.triples), "--handles".into(), p(&fx.handles)]].concat(),
            ),
            (
                "gen negcap",
                [s(&["gen", "negcap", "--seed", "7", "--captions"]), vec![p(&fx.captions), "--scenes".into(), p(&fx.scenes)]].concat(),
            ),
            ("gen region", [s(&["gen", "region", "--seed", "7", "--scenes"]), vec![p(&fx.scenes)]].concat()),
            ("train separate", s(&["train", "--schedule", "separate", "--seed", "7"])),
            ("probe cosine", s(&["probe", "--task", "cosine"])),
            ("probe deltaperf", s(&["probe", "--task", "deltaperf", "--seed", "7"])),
            ("eval", [s(&["eval", "--qa"]), vec![p(&fx.qa), "--answers".into(), p(&fx.answers)]].concat()),
        ]
    };
    let stems = ["fixed", "learnable"];

    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let out_s = out.display().to_string();
        let mut stdout = String::new();
        for (name, args) in &workflows {
            let o = common::hallulab(&[args.clone(), vec!["--out".into(), out_s.clone()]].concat());
            ensure(o.status.success(), || format!("{name} failed: {}", common::stderr(&o)))?;
            stdout += &common::stdout(&o).replace(&out_s, "<out>");
        }
        let planted = out.join("planted").display().to_string();
        for (stem, schedule, lambda) in [
            (stems[0], "integrated-fixed", "0"),
            (stems[1], "integrated-learnable", "5"),
        ] {
            let sub = out.join(stem).display().to_string();
            let o = common::hallulab(&[
                "train", "--schedule", schedule, "--lambda", lambda, "--seed", "7", "--data", &planted, "--out", &sub,
            ]);
            ensure(o.status.success(), || format!("train {schedule} failed: {}", common::stderr(&o)))?;
            stdout += &common::stdout(&o).replace(&out_s, "<out>");
        }
        runs.push((common::snapshot(&out), stdout));
    }

    let inputs_after: Vec<Vec<u8>> = fx.paths().iter().map(|p| std::fs::read(p).unwrap()).collect();
    ensure(inputs_before == inputs_after, || "an input file was modified".into())?;
    let (a, b) = (&runs[0], &runs[1]);
    ensure(a.0.keys().eq(b.0.keys()), || "runs produced different file sets".into())?;
    for (path, bytes) in &a.0 {
        ensure(&b.0[path] == bytes, || format!("{} differs between runs", path.display()))?;
    }
    ensure(a.1 == b.1, || "stdout differs between runs".into())?;
    for f in ["checkpoint.f32bin", "fixed/checkpoint.f32bin", "learnable/checkpoint.f32bin"] {
        ensure(a.0.contains_key(std::path::Path::new(f)), || format!("missing {f}"))?;
    }
    Ok(format!(
        "{} workflows, {} output files byte-identical across two runs",
        workflows.len() + stems.len(),
        a.0.len()
    ))
}
