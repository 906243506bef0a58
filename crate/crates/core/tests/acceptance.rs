//! One pass/fail line per acceptance criterion. Run with
//! `cargo test --release -p segcl-core --test acceptance -- --nocapture`.
//! `SEGCL_CRITERIA=1,2,10` restricts the run to the listed criteria; the
//! others are reported as skipped.

mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use rand::Rng;
use segcl::checkpoint;
use segcl::detector::{detector_loss, Detector, DetectorConfig};
use segcl::losses::{
    bg_fg_loss, focal_weights, masked_kd_loss, new_class_loss, total_loss, LabelSpace, LossConfig, LossTerms,
};
use segcl::metrics::ConfusionMatrix;
use segcl::replay::{der_loss, der_pp_loss, ReplayEntry, ReservoirBuffer};
use segcl::segmodel::{token_name, HeadKind, ModelConfig, SegModel, Segmenter, TokenInit};
use segcl::taskstream::{build_stream, save_stream, Image, LabelMap, Sample, StreamConfig, StreamMode};
use segcl::trainer::{evaluate_checkpoint, run_continual, Components, TrainConfig, Trainer};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

const EPS: f64 = 1e-8;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- 1: gradients against central differences

fn fd_error(x: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let v = Var::from_vec(x.to_vec(), shape, &Device::Cpu).unwrap();
    let g = f(v.as_tensor()).backward().unwrap();
    let analytic = flat(g.get(v.as_tensor()).unwrap());
    let numeric = numeric_grad(x, 1e-6, |xs| {
        scalar(&f(&Tensor::from_vec(xs.to_vec(), shape, &Device::Cpu).unwrap()))
    });
    rel_err(&analytic, &numeric)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for _ in 0..4 {
        let c = step_case(&mut r, 1, 4, 4);
        let shape = [1, c.z.c, 4, 4];
        let y = labels_tensor(&c.labels, 1, 4, 4);
        let fg = map_tensor(&c.fg, 1, 4, 4);
        let space = LabelSpace::new(c.num_old, c.num_new);
        record("bg_fg", fd_error(&c.z.data, &shape, &|z| bg_fg_loss(z, &y, &fg, space, 2.0, EPS).unwrap()));
        record("new", fd_error(&c.z.data, &shape, &|z| new_class_loss(z, &y, space, EPS).unwrap()));

        let teacher = Nchw::new(1, 3, 4, 4, normal_vec(&mut r, 48, 1.0)).tensor();
        let student = normal_vec(&mut r, 48, 1.0);
        record("kd", fd_error(&student, &[1, 3, 4, 4], &|s| masked_kd_loss(s, &teacher, &fg, 0.4).unwrap()));

        let stored = Nchw::new(1, c.z.c - 1, 4, 4, normal_vec(&mut r, (c.z.c - 1) * 16, 2.0)).tensor();
        let replay_labels: Vec<u32> = (0..16).map(|i| [0, 1, IGNORE][i % 3]).collect();
        let ry = labels_tensor(&replay_labels, 1, 4, 4);
        record("der", fd_error(&c.z.data, &shape, &|z| der_loss(z, &stored, &ry).unwrap()));
        record("der++", fd_error(&c.z.data, &shape, &|z| der_pp_loss(z, &ry, EPS).unwrap()));

        // every term at once, each on its own slice of one input vector
        let cfg = LossConfig {
            alpha: 0.3,
            beta: 0.5,
            kappa: 0.7,
            delta: 0.4,
            ..Default::default()
        };
        let n = c.z.c * 16;
        let mut x = c.z.data.clone();
        x.extend(normal_vec(&mut r, n, 2.0));
        x.extend(normal_vec(&mut r, 48, 1.0));
        x.extend(normal_vec(&mut r, 16, 1.0));
        let new_ids: Vec<u8> = space.new_channels().map(|k| k as u8).collect();
        let composite = |v: &Tensor| {
            let z = v.narrow(0, 0, n).unwrap().reshape(&shape[..]).unwrap();
            let rz = v.narrow(0, n, n).unwrap().reshape(&shape[..]).unwrap();
            let j = v.narrow(0, 2 * n, 48).unwrap().reshape((1, 3, 4, 4)).unwrap();
            let d = v.narrow(0, 2 * n + 48, 16).unwrap().reshape((1, 1, 4, 4)).unwrap();
            let terms = LossTerms {
                classification: (bg_fg_loss(&z, &y, &fg, space, cfg.gamma, EPS).unwrap()
                    + new_class_loss(&z, &y, space, EPS).unwrap())
                .unwrap(),
                der: Some(der_loss(&rz, &stored, &ry).unwrap()),
                der_pp: Some(der_pp_loss(&rz, &ry, EPS).unwrap()),
                kd: Some(masked_kd_loss(&j, &teacher, &fg, cfg.delta).unwrap()),
                detector: detector_loss(&d, &y, &new_ids, 2.0).unwrap(),
            };
            total_loss(&terms, &cfg).unwrap()
        };
        let len = x.len();
        record("composite", fd_error(&x, &[len], &composite));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(max < 1e-4 && secs < 60.0, format!("max rel err {max:.1e} < 1e-4 in {secs:.1}s ({detail})"))
}

// ---- 2: losses against scalar-loop oracles

fn oracle_equivalence() -> Outcome {
    let mut r = rng(202);
    let cases = 120;
    let mut worst = 0.0f64;
    let mut note = |got: f64, want: f64| worst = worst.max((got - want).abs() / want.abs().max(1.0));
    for _ in 0..cases {
        let c = step_case(&mut r, 2, 3, 4);
        let y = labels_tensor(&c.labels, 2, 3, 4);
        let fg = map_tensor(&c.fg, 2, 3, 4);
        let space = LabelSpace::new(c.num_old, c.num_new);
        let gamma = r.random_range(0.0..4.0);
        let z = c.z.tensor();
        note(
            scalar(&bg_fg_loss(&z, &y, &fg, space, gamma, EPS).unwrap()),
            bg_fg_oracle(&c.z, &c.labels, &c.fg, c.num_old, gamma, EPS),
        );
        note(scalar(&new_class_loss(&z, &y, space, EPS).unwrap()), new_class_oracle(&c.z, &c.labels, c.num_old, EPS));
        note(scalar(&der_pp_loss(&z, &y, EPS).unwrap()), ce_oracle(&c.z, &c.labels, EPS));

        let d = r.random_range(1..5);
        let s = Nchw::new(2, d, 3, 4, normal_vec(&mut r, 2 * d * 12, 1.0));
        let t = Nchw::new(2, d, 3, 4, normal_vec(&mut r, 2 * d * 12, 1.0));
        let delta = r.random_range(0.05..0.95);
        note(
            scalar(&masked_kd_loss(&s.tensor(), &t.tensor(), &fg, delta).unwrap()),
            kd_oracle(&s, &t, &c.fg, delta),
        );

        let cs = c.z.c - r.random_range(0..2);
        let stored = Nchw::new(2, cs, 3, 4, normal_vec(&mut r, 2 * cs * 12, 2.0));
        let sl: Vec<u32> = (0..24)
            .map(|_| if r.random_bool(0.2) { IGNORE } else { r.random_range(0..cs) as u32 })
            .collect();
        note(
            scalar(&der_loss(&z, &stored.tensor(), &labels_tensor(&sl, 2, 3, 4)).unwrap()),
            der_oracle(&c.z, &stored, &sl),
        );

        let logits = normal_vec(&mut r, 24, 3.0);
        let positives: Vec<u32> = space.new_channels().map(|k| k as u32).collect();
        let ids: Vec<u8> = positives.iter().map(|&k| k as u8).collect();
        note(
            scalar(&detector_loss(&map_tensor(&logits, 2, 3, 4), &y, &ids, gamma).unwrap()),
            focal_bce_oracle(&logits, &c.labels, &positives, gamma),
        );
    }
    ensure(worst < 1e-9, format!("6 losses x {cases} cases, worst relative gap {worst:.1e} < 1e-9"))
}

// ---- 3: focal semantics

fn focal_semantics() -> Outcome {
    let mut r = rng(303);
    let mut worst_zero = 0.0f64;
    let mut worst_batch = 0.0f64;
    for _ in 0..50 {
        let mut c = step_case(&mut r, 1, 4, 4);
        let space = LabelSpace::new(c.num_old, c.num_new);
        let gamma = r.random_range(0.5..4.0);
        let z = c.z.tensor();
        let y = labels_tensor(&c.labels, 1, 4, 4);
        let k = r.random_range(0..16);
        if c.labels[k] == IGNORE {
            continue;
        }
        // alone, a flagged pixel's term vanishes exactly
        let single = Nchw::new(1, c.z.c, 1, 1, (0..c.z.c).map(|ch| c.z.at(0, ch, k)).collect());
        let alone = bg_fg_loss(
            &single.tensor(),
            &labels_tensor(&[c.labels[k]], 1, 1, 1),
            &map_tensor(&[1.0], 1, 1, 1),
            space,
            gamma,
            EPS,
        )
        .unwrap();
        worst_zero = worst_zero.max(scalar(&alone).abs());
        // inside a batch, flagging removes exactly that pixel's share
        let base = scalar(&bg_fg_loss(&z, &y, &map_tensor(&c.fg, 1, 4, 4), space, gamma, EPS).unwrap());
        let valid = c.labels.iter().filter(|&&l| l != IGNORE).count() as f64;
        let term = bg_fg_oracle(&single, &[c.labels[k]], &[c.fg[k]], c.num_old, gamma, EPS) / valid;
        c.fg[k] = 1.0;
        let flagged = scalar(&bg_fg_loss(&z, &y, &map_tensor(&c.fg, 1, 4, 4), space, gamma, EPS).unwrap());
        worst_batch = worst_batch.max((base - term - flagged).abs());
    }
    let fg: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let mut weight_ok = true;
    for gamma in [0.0, 0.5, 1.0, 2.0, 3.7] {
        let w = flat(&focal_weights(&map_tensor(&fg, 1, 3, 7), gamma).unwrap());
        weight_ok &= w.iter().zip(&fg).all(|(wi, f)| *wi == (1.0 - f).powf(gamma));
    }

    let mut det = Detector::new(
        DetectorConfig {
            proj_width: 4,
            detach_encoder: false,
            ..Default::default()
        },
        3,
        &mut r,
        DType::F64,
        &Device::Cpu,
    )
    .unwrap();
    det.begin_step(1, &mut r).unwrap();
    let feats = Tensor::from_vec(normal_vec(&mut r, 48, 1.0), (1, 3, 4, 4), &Device::Cpu).unwrap();
    let emb = det.embed(&feats, 4, 4).unwrap();
    det.update_prototype(1, &emb, &[true; 16]).unwrap();
    let fgt = det.foreground_scores(&emb).unwrap().max_prob().unwrap();
    let z = Tensor::from_vec(normal_vec(&mut r, 48, 1.0), (1, 3, 4, 4), &Device::Cpu).unwrap();
    let y = labels_tensor(&(0..16).map(|i| [0, 2][i % 2]).collect::<Vec<_>>(), 1, 4, 4);
    let grads = bg_fg_loss(&z, &y, &fgt, LabelSpace::new(1, 1), 2.0, EPS).unwrap().backward().unwrap();
    let leaked = det
        .params()
        .iter()
        .filter(|(_, v)| grads.get(v.as_tensor()).is_some_and(|g| flat(g).iter().any(|&x| x != 0.0)))
        .count();
    ensure(
        worst_zero == 0.0 && worst_batch < 1e-12 && weight_ok && leaked == 0,
        format!(
            "flagged pixel alone {worst_zero:e}, in-batch share gap {worst_batch:.1e}, weights exact {weight_ok}, detector params with gradient {leaked}"
        ),
    )
}

// ---- shared tiny training setup for 4 and 10

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig {
        stream: StreamConfig {
            setup: "2-1".parse().unwrap(),
            mode: StreamMode::Overlap,
            num_classes: 4,
            height: 16,
            width: 16,
            train_pool: 24,
            val_pool: 8,
            ..StreamConfig::default()
        },
        model: ModelConfig {
            height: 16,
            width: 16,
            enc_width: 6,
            dim: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            ..ModelConfig::default()
        },
        detector: DetectorConfig {
            proj_width: 4,
            ..DetectorConfig::default()
        },
        epochs: 2,
        incremental_epochs: Some(1),
        batch_size: 4,
        replay_batch: 2,
        lr_initial: 0.03,
        lr_incremental: 0.003,
        grad_clip: Some(1.0),
        buffer_capacity: 10,
        ..TrainConfig::default()
    }
    .with_seed(seed)
}

// ---- 4: freeze schedule

fn freeze_schedule() -> Outcome {
    let cfg = tiny(0);
    let stream = build_stream(&cfg.stream).unwrap();
    let mut tr = Trainer::new(cfg).unwrap();
    let mut checked = 0;
    let mut k_moved_at_one = false;
    for step in &stream.steps {
        let t = step.spec.index;
        tr.begin_step(&step.spec).unwrap();
        let mut guarded = Vec::new();
        if t >= 2 {
            guarded.extend(Detector::projector_names());
            for old in 1..t {
                guarded.extend(Detector::head_param_names(old));
            }
        }
        let k = Detector::projector_names();
        let digest = |tr: &Trainer, names: &[String]| tr.detector().params().digest(names.iter().map(String::as_str)).unwrap();
        let before = digest(&tr, &guarded);
        let k_before = digest(&tr, &k);
        for chunk in step.train.samples.chunks(4) {
            let batch: Vec<&Sample> = chunk.iter().collect();
            tr.train_batch(&batch).unwrap();
            if digest(&tr, &guarded) != before {
                return Err(format!("step {t}: frozen detector parameters changed"));
            }
            checked += 1;
        }
        if t == 1 {
            k_moved_at_one = digest(&tr, &k) != k_before;
        }
    }
    ensure(
        k_moved_at_one,
        format!("3 steps, {checked} batches: projector and old heads unchanged from step 2 on; projector trained at step 1: {k_moved_at_one}"),
    )
}

// ---- 5: token growth

fn token_growth() -> Outcome {
    let cfg = ModelConfig {
        height: 8,
        width: 8,
        enc_width: 5,
        dim: 12,
        layers: 1,
        heads: 3,
        mlp_ratio: 2,
        head: HeadKind::ClassTokens,
    };
    let mut m = SegModel::new(cfg, 3, &mut rng(505), DType::F64, &Device::Cpu).unwrap();
    let mut r = rng(506);
    let tokens: Vec<Vec<f64>> = (0..4)
        .map(|_| normal_vec(&mut r, 12, 1.0).into_iter().map(|v| (v * 64.0).round() / 64.0).collect())
        .collect();
    for (c, t) in tokens.iter().enumerate() {
        m.set_param(&token_name(c), &Tensor::from_vec(t.clone(), 12, &Device::Cpu).unwrap()).unwrap();
    }
    let snapshot = |m: &SegModel| -> Vec<(String, Vec<u64>)> {
        m.params()
            .iter()
            .map(|(n, v)| (n.to_string(), flat(v.as_tensor()).iter().map(|x| x.to_bits()).collect()))
            .collect()
    };
    let before = snapshot(&m);
    let params_before = m.num_parameters();
    m.add_classes(1, TokenInit::Mean, &mut r).unwrap();
    let mean: Vec<f64> = (0..12).map(|k| tokens.iter().map(|t| t[k]).sum::<f64>() / 4.0).collect();
    let exact = flat(m.params().var(&token_name(4)).unwrap().as_tensor()) == mean;
    let after = snapshot(&m);
    let unchanged = before.iter().all(|b| after.contains(b));
    let growth = m.num_parameters() - params_before;
    ensure(
        exact && unchanged && growth == 12 + 2,
        format!("mean exact {exact}, old parameters bitwise unchanged {unchanged}, growth {growth} = d + 2 with d = 12"),
    )
}

// ---- 6: prototype running mean

fn prototype_correctness() -> Outcome {
    let p = 5;
    let mut det = Detector::new(
        DetectorConfig {
            proj_width: p,
            ..Default::default()
        },
        3,
        &mut rng(606),
        DType::F64,
        &Device::Cpu,
    )
    .unwrap();
    det.begin_step(1, &mut rng(607)).unwrap();
    let mut r = rng(608);
    let mut sum = vec![0.0; p];
    let mut n = 0u64;
    let batches = 60;
    for batch in 0..batches {
        let v: Vec<f64> = normal_vec(&mut r, 2 * p * 12, 1.0).into_iter().map(|x| x + batch as f64 * 0.05).collect();
        let mask: Vec<bool> = (0..24).map(|_| r.random_bool(0.3)).collect();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                let (b, px) = (i / 12, i % 12);
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += v[(b * p + c) * 12 + px];
                }
                n += 1;
            }
        }
        det.update_prototype(1, &Tensor::from_vec(v, (2, p, 3, 4), &Device::Cpu).unwrap(), &mask).unwrap();
    }
    let want: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let proto = &det.prototypes()[0];
    let err = rel_err(&proto.mean, &want);
    ensure(
        err < 1e-6 && proto.count == n,
        format!("{batches} batches, {n} pixels, relative error {err:.1e} < 1e-6"),
    )
}

// ---- 7: memory

fn entry(class: u8) -> ReplayEntry {
    let image = Image::new(2, 2, vec![0.25; 12]).unwrap();
    let labels = LabelMap::new(2, 2, vec![0, class, class, 0]).unwrap();
    ReplayEntry::new(image, labels, vec![0.0; 6 * 4], 6).unwrap()
}

fn buffer_properties() -> Outcome {
    let mut buf = ReservoirBuffer::new(37, 1).unwrap();
    let mut r = rng(707);
    let mut max_len = 0;
    for _ in 0..10_000 {
        buf.maybe_insert(entry(r.random_range(1..6)), r.random());
        max_len = max_len.max(buf.len());
    }
    let mut wins = 0;
    for seed in 0..10 {
        let stream = skewed_stream(2000, seed);
        let mut buf = ReservoirBuffer::new(100, seed).unwrap();
        let mut r = rng(100 + seed);
        for &c in &stream {
            buf.maybe_insert(entry(c), r.random());
        }
        let ours = max_share(buf.entries().iter().map(|e| *e.histogram().keys().next().unwrap()));
        if ours <= max_share(plain_reservoir(&stream, 100, seed)) {
            wins += 1;
        }
    }
    // perturbing only the background channel must leave the loss bitwise equal
    let mut bg_exact = true;
    for _ in 0..20 {
        let cur = Nchw::new(1, 4, 3, 3, normal_vec(&mut r, 36, 2.0));
        let stored = Nchw::new(1, 3, 3, 3, normal_vec(&mut r, 27, 2.0));
        let labels: Vec<u32> = (0..9).map(|i| [0, 1, 2][i % 3]).collect();
        let y = labels_tensor(&labels, 1, 3, 3);
        let base = scalar(&der_loss(&cur.tensor(), &stored.tensor(), &y).unwrap());
        let bump = |x: &Nchw| {
            let mut d = x.data.clone();
            for v in &mut d[..9] {
                *v += 7.5;
            }
            Nchw::new(1, x.c, 3, 3, d).tensor()
        };
        let moved = scalar(&der_loss(&bump(&cur), &bump(&stored), &y).unwrap());
        bg_exact &= moved.to_bits() == base.to_bits();
    }
    ensure(
        max_len <= 37 && wins >= 9 && bg_exact,
        format!("max size {max_len}/37 over 10^4 offers, balance wins {wins}/10, background channel ignored {bg_exact}"),
    )
}

// ---- 8: mIoU

fn miou_oracle() -> Outcome {
    let mut mismatches = 0;
    for seed in 0..200u64 {
        let mut r = rng(800 + seed);
        let classes = 2 + (seed as usize % 7);
        let truth: Vec<u8> = (0..256)
            .map(|_| if r.random_range(0..12) == 0 { 255 } else { r.random_range(0..classes) as u8 })
            .collect();
        let pred: Vec<u32> = (0..256).map(|_| r.random_range(0..classes) as u32).collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.update(&truth, &pred).unwrap();
        let oracle = brute_confusion(&truth, &pred, classes);
        for c in 0..classes {
            if cm.iou(c) != brute_iou(&oracle, c) || (0..classes).any(|p| cm.get(c, p) != oracle[c][p]) {
                mismatches += 1;
            }
        }
    }
    let mut cm = ConfusionMatrix::new(3);
    cm.update(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 0]).unwrap();
    let hand = cm.iou(0) == Some(1.0 / 3.0) && cm.iou(1) == Some(2.0 / 3.0) && cm.iou(2) == Some(0.0);
    ensure(
        mismatches == 0 && hand,
        format!("200 random 16x16 maps, {mismatches} mismatches; hand case tp/(tp+fn+fp) exact {hand}"),
    )
}

// ---- 9: end-to-end ordering on the toy benchmark

struct Variant {
    name: &'static str,
    preset: &'static str,
    init: TokenInit,
}

const VARIANTS: [Variant; 5] = [
    Variant { name: "full", preset: "full", init: TokenInit::Mean },
    Variant { name: "-mkd", preset: "no-mkd", init: TokenInit::Mean },
    Variant { name: "-der", preset: "no-der", init: TokenInit::Mean },
    Variant { name: "finetune", preset: "finetune", init: TokenInit::Mean },
    Variant { name: "random-init", preset: "full", init: TokenInit::Random },
];

fn end_to_end_ordering() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let base = TrainConfig::load(&path).map_err(|e| e.to_string())?;
    let seeds = [0u64, 1, 2];
    // [variant][seed] -> (old, all)
    let mut scores = vec![Vec::new(); VARIANTS.len()];
    let mut slowest = 0.0f64;
    for (v, variant) in VARIANTS.iter().enumerate() {
        for &seed in &seeds {
            let cfg = TrainConfig {
                components: Components::preset(variant.preset).unwrap(),
                token_init: variant.init,
                ..base.clone()
            }
            .with_seed(seed);
            let start = Instant::now();
            let outcome = run_continual(&cfg, None).map_err(|e| e.to_string())?;
            slowest = slowest.max(start.elapsed().as_secs_f64());
            let last = outcome.log.final_step().unwrap().scores.clone();
            let pct = |x: Option<f64>| 100.0 * x.unwrap_or(0.0);
            scores[v].push((pct(last.old), pct(last.all)));
            println!(
                "    {} seed {seed}: old {:.2} all {:.2}",
                variant.name,
                pct(last.old),
                pct(last.all)
            );
        }
    }
    let mean_all = |v: usize| scores[v].iter().map(|s| s.1).sum::<f64>() / seeds.len() as f64;
    let (full, ft) = (0, 3);
    let a = (0..seeds.len()).all(|s| scores[full][s].1 - scores[ft][s].1 >= 15.0);
    let old_gap = scores[full].iter().map(|s| s.0).sum::<f64>() / 3.0 - scores[ft].iter().map(|s| s.0).sum::<f64>() / 3.0;
    let b = old_gap >= 25.0;
    let c = mean_all(full) >= mean_all(1) && mean_all(full) >= mean_all(2);
    let d = mean_all(full) >= mean_all(4);
    let gaps: Vec<String> = (0..seeds.len()).map(|s| format!("{:.1}", scores[full][s].1 - scores[ft][s].1)).collect();
    let detail = format!(
        "(a) full-finetune all gap per seed [{}] >= 15: {a}; (b) old gap {old_gap:.1} >= 25: {b}; \
         (c) full {:.2} vs -mkd {:.2}, -der {:.2}: {c}; (d) mean {:.2} vs random {:.2}: {d}; slowest run {slowest:.0}s < 1800",
        gaps.join(", "),
        mean_all(full),
        mean_all(1),
        mean_all(2),
        mean_all(full),
        mean_all(4),
    );
    ensure(a && b && c && d && slowest < 1800.0, detail)
}

// ---- 10: determinism and persistence

fn determinism_and_persistence() -> Outcome {
    let cfg = tiny(7);
    let out = tempfile::tempdir().unwrap();
    let a = run_continual(&cfg, Some(out.path())).unwrap();
    let b = run_continual(&cfg, None).unwrap();
    let fmt = |o: &segcl::trainer::RunOutcome| format!("{:.6}", o.log.final_step().unwrap().scores.all.unwrap());
    let same = fmt(&a) == fmt(&b);

    let data = tempfile::tempdir().unwrap();
    save_stream(&a.stream, data.path()).unwrap();
    let ckpt = a.final_checkpoint.clone().unwrap();
    let report = evaluate_checkpoint(&ckpt, data.path()).unwrap();
    let last = a.log.final_step().unwrap();
    let eval_exact = report.per_class_iou == last.per_class_iou && report.scores == last.scores;
    let loaded = checkpoint::load(&ckpt, &Device::Cpu).unwrap();
    let images: Vec<_> = a.stream.steps[2].val.samples.iter().map(|s| &s.image).collect();
    let x = segcl::batch::images_to_tensor(&images, DType::F32, &Device::Cpu).unwrap();
    let live = flat(&a.trainer.model().forward(&x).unwrap().logits);
    let back = flat(&loaded.model.forward(&x).unwrap().logits);
    let logits_exact = live.iter().zip(&back).all(|(p, q)| p.to_bits() == q.to_bits());
    ensure(
        same && eval_exact && logits_exact,
        format!(
            "final all-mIoU {} vs {} (6 decimals); reloaded evaluation bit-exact {eval_exact}, logits bit-exact {logits_exact}",
            fmt(&a),
            fmt(&b)
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("oracle equivalence", oracle_equivalence),
        ("focal semantics", focal_semantics),
        ("freeze schedule", freeze_schedule),
        ("token growth", token_growth),
        ("prototype correctness", prototype_correctness),
        ("buffer properties", buffer_properties),
        ("mIoU oracle", miou_oracle),
        ("end-to-end ordering", end_to_end_ordering),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let only: Option<Vec<usize>> = std::env::var("SEGCL_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            println!("criterion {:>2} SKIP {name}", i + 1);
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
        if result.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
