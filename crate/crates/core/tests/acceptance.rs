//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 1 3`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use tstcc::augment::{
    jitter, make_view_pair, permute_segments, permute_segments_with, scale, scale_with, time_shift, time_shift_with,
    AugmentConfig, SegmentPlan,
};
use tstcc::data::{make_synthetic, Batch, Dataset, SampleSource};
use tstcc::losses::{
    contextual_contrast_loss, cross_entropy, supervised_contextual_contrast_loss, temporal_contrast_loss, Direction,
    SccNormalization, TemporalBatchViews,
};
use tstcc::nn::model::{init_contrastive, is_classifier};
use tstcc::nn::{compute_gradients, Bound, ForwardCtx, Graph, ModelDims, ParamStore};
use tstcc::pipeline::train::{contrastive_loss, Contextual, Objective};
use tstcc::pipeline::{
    evaluate, evaluate_metrics, finetune, generate_pseudo_labels, prepare, pretrain_tstcc, pseudo_label_checkpoint,
    run_protocol, train_catcc, train_supervised, Protocol, RunConfig, TrainConfig,
};
use tstcc::rng::{Rng, SeedStream};
use tstcc::{Error, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal(rng: &mut Rng, scale: f64) -> f64 {
    let v: f64 = StandardNormal.sample(rng);
    v * scale
}

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| normal(rng, scale))
}

// ---------------------------------------------------------------------------
// Reference implementations, written against plain nested Vecs.

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `c_src` predicts steps `anchor+1..=anchor+horizon` (1-based) of `z_tgt`.
fn temporal_reference(z: &Tensor<f64>, c: &Tensor<f64>, w: &[Tensor<f64>], anchor: usize, horizon: usize) -> f64 {
    let (b, d, tz) = (z.dim(0), z.dim(1), z.dim(2));
    let h = c.dim(1);
    let zat = |n: usize, a: usize, t: usize| z.data()[(n * d + a) * tz + t];
    let mut total = 0.0;
    for k in 1..=horizon {
        let t = anchor + k - 1;
        for i in 0..b {
            let mut pred = vec![0.0; d];
            for a in 0..d {
                for j in 0..h {
                    pred[a] += w[k - 1].data()[a * h + j] * c.data()[i * h + j];
                }
            }
            let logits: Vec<f64> = (0..b).map(|n| (0..d).map(|a| pred[a] * zat(n, a, t)).sum()).collect();
            total -= logits[i] - log_sum_exp(&logits);
        }
    }
    total / (b * horizon) as f64
}

fn cosine_matrix(rows: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, w) = (rows.dim(0), rows.dim(1));
    let r = |i: usize| &rows.data()[i * w..(i + 1) * w];
    let norm = |i: usize| r(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (ni, nj) = (norm(i), norm(j));
            if ni > 0.0 && nj > 0.0 {
                s[i][j] = r(i).iter().zip(r(j)).map(|(a, b)| a * b).sum::<f64>() / (ni * nj);
            }
        }
    }
    s
}

/// `-log softmax` of pair `(i, p)` over all `m != i`.
fn pair_term(sim: &[Vec<f64>], i: usize, p: usize, tau: f64) -> f64 {
    let others: Vec<f64> = (0..sim.len()).filter(|&m| m != i).map(|m| sim[i][m] / tau).collect();
    -(sim[i][p] / tau - log_sum_exp(&others))
}

fn contextual_reference(rows: &Tensor<f64>, tau: f64) -> f64 {
    let sim = cosine_matrix(rows);
    let n2 = sim.len();
    let mut total = 0.0;
    for k in 0..n2 / 2 {
        total += pair_term(&sim, 2 * k, 2 * k + 1, tau) + pair_term(&sim, 2 * k + 1, 2 * k, tau);
    }
    total / n2 as f64
}

/// Raw sum over anchors; `None` when no anchor has a positive.
fn supervised_reference(rows: &Tensor<f64>, labels: &[i64], tau: f64) -> Option<f64> {
    let sim = cosine_matrix(rows);
    let mut total = 0.0;
    let mut any = false;
    for i in 0..sim.len() {
        let pos: Vec<usize> = (0..sim.len()).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        any = true;
        total += pos.iter().map(|&p| pair_term(&sim, i, p, tau)).sum::<f64>() / pos.len() as f64;
    }
    any.then_some(total)
}

fn cross_entropy_reference(logits: &Tensor<f64>, labels: &[i64]) -> f64 {
    let k = logits.dim(1);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        total -= row[y as usize] - log_sum_exp(row);
    }
    total / labels.len() as f64
}

fn metrics_reference(pred: &[i64], truth: &[i64], k: usize) -> (f64, f64) {
    let mut correct = 0usize;
    let mut f1_sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p == t {
            correct += 1;
        }
    }
    for class in 0..k as i64 {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == class, t == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        f1_sum += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    (correct as f64 / pred.len() as f64, f1_sum / k as f64)
}

// ---------------------------------------------------------------------------

fn criterion_loss_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = SeedStream::new(11).rng();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, err: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(err);
    };
    for _ in 0..200 {
        // temporal
        let b = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        let h = rng.random_range(1..=16);
        let tz = rng.random_range(2..=10);
        let horizon = rng.random_range(1..tz);
        let anchor = rng.random_range(1..=tz - horizon);
        let v = TemporalBatchViews {
            z_weak: random_tensor(&mut rng, &[b, d, tz], 1.0),
            z_strong: random_tensor(&mut rng, &[b, d, tz], 1.0),
            c_weak: random_tensor(&mut rng, &[b, h], 1.0),
            c_strong: random_tensor(&mut rng, &[b, h], 1.0),
            anchor,
            horizon,
        };
        let w: Vec<Tensor<f64>> = (0..horizon).map(|_| random_tensor(&mut rng, &[d, h], 0.5)).collect();
        let got = temporal_contrast_loss(&v, &w, Direction::StrongToWeak).map_err(|e| e.to_string())?;
        note("temporal", (got - temporal_reference(&v.z_weak, &v.c_strong, &w, anchor, horizon)).abs());
        let got = temporal_contrast_loss(&v, &w, Direction::WeakToStrong).map_err(|e| e.to_string())?;
        note("temporal", (got - temporal_reference(&v.z_strong, &v.c_weak, &w, anchor, horizon)).abs());

        // contextual and supervised contextual
        let n = rng.random_range(1..=4);
        let width = rng.random_range(1..=16);
        let tau = rng.random_range(0.1..1.0);
        let mut rows = random_tensor(&mut rng, &[2 * n, width], 2.0);
        if rng.random_bool(0.1) {
            let r = rng.random_range(0..2 * n);
            rows.data_mut()[r * width..(r + 1) * width].fill(0.0);
        }
        let got = contextual_contrast_loss(&rows, tau).map_err(|e| e.to_string())?;
        note("contextual", (got - contextual_reference(&rows, tau)).abs());

        let classes = rng.random_range(1..=3);
        let labels: Vec<i64> = (0..2 * n).map(|_| rng.random_range(0..classes)).collect();
        let reference = supervised_reference(&rows, &labels, tau);
        for norm in [SccNormalization::Sum, SccNormalization::Mean] {
            let got = supervised_contextual_contrast_loss(&rows, &labels, tau, norm);
            match (got, reference) {
                (Ok(v), Some(r)) => {
                    let r = if norm == SccNormalization::Mean { r / (2 * n) as f64 } else { r };
                    note("supervised contextual", (v - r).abs());
                }
                (Err(Error::NoPositivePairs), None) => note("supervised contextual", 0.0),
                (got, r) => return Err(format!("supervised contextual: {got:?} vs reference {r:?}")),
            }
        }

        // cross-entropy
        let bb = rng.random_range(1..=8);
        let k = rng.random_range(1..=16);
        let logits = random_tensor(&mut rng, &[bb, k], 3.0);
        let y: Vec<i64> = (0..bb).map(|_| rng.random_range(0..k as i64)).collect();
        let got = cross_entropy(&logits, &y).map_err(|e| e.to_string())?;
        note("cross-entropy", (got - cross_entropy_reference(&logits, &y)).abs());
    }
    let elapsed = start.elapsed();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = format!(
        "max abs error {max:.2e} over 200 instances per loss ({}) in {:.2}s",
        worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", "),
        elapsed.as_secs_f64()
    );
    check(max <= 1e-6 && elapsed < Duration::from_secs(10), detail)
}

// ---------------------------------------------------------------------------


struct GradCheck {
    worst: f64,
    worst_name: String,
    tensors: usize,
    vanishing: Vec<String>,
}

/// Compare tape gradients of `build` against central differences for every
/// trainable tensor. Relative error per tensor is `|a - n| / max(|a|, |n|)`;
/// tensors whose gradient norm is below `1e-8` on both sides are listed as
/// vanishing instead.
fn gradient_check<B>(store: &ParamStore<f64>, build: B) -> Result<GradCheck, String>
where
    B: Fn(&mut Graph<f64>, &Bound<f64>) -> tstcc::Result<tstcc::nn::LossTerms>,
{
    const EPS: f64 = 1e-5;
    let trainable = |n: &str| !is_classifier(n) && !tstcc::nn::is_buffer(n);
    let analytic = compute_gradients(store, trainable, &build).map_err(|e| e.to_string())?;
    let value = |s: &ParamStore<f64>| -> Result<f64, String> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, s, |_| false);
        let terms = build(&mut g, &p).map_err(|e| e.to_string())?;
        Ok(g.scalar(terms.total))
    };
    let mut probe = store.clone();
    let mut out = GradCheck {
        worst: 0.0,
        worst_name: String::new(),
        tensors: 0,
        vanishing: Vec::new(),
    };
    let names: Vec<String> = store.names().filter(|n| trainable(n)).map(str::to_string).collect();
    for name in names {
        let a = analytic.grads.get(&name).map_err(|e| e.to_string())?.clone();
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + EPS;
            let up = value(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - EPS;
            let down = value(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * EPS);
        }
        let diff = a.data().iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.norm();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.tensors += 1;
        if na.max(nn) < 1e-8 {
            out.vanishing.push(name);
            continue;
        }
        let rel = diff / na.max(nn);
        if rel > out.worst {
            out.worst = rel;
            out.worst_name = name;
        }
    }
    Ok(out)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut cfg = TrainConfig::default();
    cfg.encoder.channels = vec![8, 8, 8];
    cfg.transformer.hidden = 16;
    cfg.transformer.layers = 2;
    let (b, c, t) = (4, 1, 32);
    let dims = ModelDims::new(&cfg.model(), c, t, 2).map_err(|e| e.to_string())?;
    if (dims.latent_dim, dims.hidden) != (8, 16) {
        return Err(format!("toy model has d={} h={}", dims.latent_dim, dims.hidden));
    }
    let store = init_contrastive(&cfg.model(), &dims, SeedStream::new(3).named("gradcheck")).cast::<f64>();
    let mut rng = SeedStream::new(4).rng();
    let weak = random_tensor(&mut rng, &[b, c, t], 1.0);
    let strong = random_tensor(&mut rng, &[b, c, t], 1.0);
    let anchor = 2;
    let labels = [0i64, 1, 0, 1];
    let w = &cfg.loss;

    let mut lines = Vec::new();
    let mut ok = true;
    for (name, temporal_weight, contextual) in [
        (
            "unsup",
            w.unsup_temporal,
            Contextual::Unsup {
                weight: w.unsup_contextual,
                tau: w.temperature,
            },
        ),
        (
            "semi",
            w.semi_temporal,
            Contextual::Sup {
                weight: w.semi_contextual,
                tau: w.temperature,
                labels: &labels,
                norm: SccNormalization::Mean,
            },
        ),
    ] {
        let obj = Objective {
            encoder: &cfg.encoder,
            transformer: &cfg.transformer,
            horizon: dims.horizon,
            cross_view: true,
            temporal_weight,
            contextual,
        };
        let report = gradient_check(&store, |g, p| {
            let wv = g.constant(weak.clone());
            let sv = g.constant(strong.clone());
            let mut ctx = ForwardCtx::train_without_dropout();
            contrastive_loss(g, p, &obj, wv, sv, anchor, &mut ctx)
        })?;
        ok &= report.worst < 1e-4;
        lines.push(format!(
            "{name}: {} tensors, worst rel error {:.1e} ({}), vanishing {:?}",
            report.tensors, report.worst, report.worst_name, report.vanishing
        ));
    }
    let elapsed = start.elapsed();
    check(
        ok && elapsed < Duration::from_secs(120),
        format!("{} in {:.1}s", lines.join("; "), elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------

fn criterion_closed_forms() -> Outcome {
    let mut rng = SeedStream::new(21).rng();
    let mut errs = Vec::new();

    let rows = random_tensor(&mut rng, &[2, 5], 1.0);
    errs.push(("N=1 contextual", contextual_contrast_loss(&rows, 0.2).map_err(|e| e.to_string())?, 0.0));

    for n in [2usize, 3, 4] {
        let row: Vec<f64> = (0..6).map(|_| normal(&mut rng, 1.0)).collect();
        let same = Tensor::from_fn(&[2 * n, 6], |i| row[i % 6]);
        let got = contextual_contrast_loss(&same, 0.2).map_err(|e| e.to_string())?;
        errs.push(("identical contextual", got, ((2 * n - 1) as f64).ln()));
    }

    let views = |rng: &mut Rng, b: usize, identical: bool| {
        let z = if identical {
            let one = random_tensor(rng, &[1, 6, 5], 1.0);
            Tensor::from_fn(&[b, 6, 5], |i| one.data()[i % 30])
        } else {
            random_tensor(rng, &[b, 6, 5], 1.0)
        };
        TemporalBatchViews {
            z_weak: z.clone(),
            z_strong: z,
            c_weak: random_tensor(rng, &[b, 4], 1.0),
            c_strong: random_tensor(rng, &[b, 4], 1.0),
            anchor: 2,
            horizon: 3,
        }
    };
    let w: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut rng, &[6, 4], 1.0)).collect();
    let single = views(&mut rng, 1, false);
    errs.push((
        "B=1 temporal",
        temporal_contrast_loss(&single, &w, Direction::StrongToWeak).map_err(|e| e.to_string())?,
        0.0,
    ));
    for b in [2usize, 5, 8] {
        let v = views(&mut rng, b, true);
        for dir in [Direction::StrongToWeak, Direction::WeakToStrong] {
            let got = temporal_contrast_loss(&v, &w, dir).map_err(|e| e.to_string())?;
            errs.push(("identical temporal", got, (b as f64).ln()));
        }
    }
    let worst = errs.iter().map(|(_, g, e)| (g - e).abs()).fold(0.0, f64::max);
    let failing: Vec<String> = errs
        .iter()
        .filter(|(_, g, e)| (g - e).abs() > 1e-6)
        .map(|(n, g, e)| format!("{n}: {g} vs {e}"))
        .collect();
    check(
        failing.is_empty(),
        format!("{} closed forms, max deviation {worst:.1e} {}", errs.len(), failing.join("; ")),
    )
}

// ---------------------------------------------------------------------------

fn criterion_augmentations() -> Outcome {
    let mut rng = SeedStream::new(31).rng();
    let x = Tensor::<f32>::from_fn(&[6, 3, 50], |i| (i as f32 * 0.37).sin() * 2.0 + (i % 7) as f32);
    let mut failures = Vec::new();

    let identities = [
        ("jitter sigma 0", jitter(&x, 0.0, &mut rng)),
        ("scale sigma 0", scale(&x, 0.0, &mut rng)),
        ("unit scale factors", scale_with(&x, &vec![1.0; 18])),
        ("single segment", permute_segments(&x, 1, &mut rng)),
        ("identity segment plans", permute_segments_with(&x, &vec![SegmentPlan::identity(); 6])),
        ("zero time shift", time_shift(&x, 0, &mut rng)),
        ("full-period shifts", time_shift_with(&x, &[0, 50, -50, 100, 0, -100])),
    ];
    for (name, y) in &identities {
        if y != &x {
            failures.push(name.to_string());
        }
    }

    let mut perms = 0;
    for trial in 0..200 {
        let y = permute_segments(&x, 1 + trial % 12, &mut rng);
        for (a, b) in x.data().chunks(50).zip(y.data().chunks(50)) {
            let mut a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            if a != b {
                failures.push(format!("permute_segments changed values in trial {trial}"));
            }
            perms += 1;
        }
    }

    let mut stds = Vec::new();
    for sigma in [0.05, 0.3, 1.0] {
        let zeros = Tensor::<f32>::zeros(&[1000, 1, 1000]);
        let y = jitter(&zeros, sigma, &mut rng);
        let n = y.len() as f64;
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let rel = (var.sqrt() - sigma).abs() / sigma;
        if rel >= 0.01 {
            failures.push(format!("jitter sigma {sigma}: std off by {:.3}%", rel * 100.0));
        }
        stds.push(format!("{sigma}: {:.4}", var.sqrt()));
    }

    let batch = Batch {
        x: x.clone(),
        y: vec![0; 6],
    };
    let cfg = AugmentConfig::default();
    let a = make_view_pair(&batch, &cfg, &mut SeedStream::new(5).rng());
    let b = make_view_pair(&batch, &cfg, &mut SeedStream::new(5).rng());
    let c = make_view_pair(&batch, &cfg, &mut SeedStream::new(6).rng());
    if a != b {
        failures.push("views differ under one seed".into());
    }
    if a.weak.x == c.weak.x || a.strong.x == c.strong.x {
        failures.push("views ignore the seed".into());
    }
    check(
        failures.is_empty(),
        format!(
            "{} identities, {perms} permuted rows, jitter std {}{}",
            identities.len(),
            stds.join(", "),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_metrics() -> Outcome {
    let mut rng = SeedStream::new(41).rng();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=6usize);
        let n = rng.random_range(1..=40usize);
        let truth: Vec<i64> = (0..n).map(|_| rng.random_range(0..k as i64)).collect();
        let pred: Vec<i64> = (0..n)
            .map(|i| if rng.random_bool(0.5) { truth[i] } else { rng.random_range(0..k as i64) })
            .collect();
        let m = evaluate_metrics(&pred, &truth, k).map_err(|e| e.to_string())?;
        let (acc, mf1) = metrics_reference(&pred, &truth, k);
        if m.accuracy.to_bits() != acc.to_bits() || m.mf1.to_bits() != mf1.to_bits() {
            mismatches += 1;
        }
    }
    let hand = evaluate_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).map_err(|e| e.to_string())?;
    let hand_ok = (hand.accuracy - 0.75).abs() < 1e-9 && (hand.mf1 - 11.0 / 15.0).abs() < 1e-9;
    check(
        mismatches == 0 && hand_ok,
        format!(
            "{mismatches} bitwise mismatches in 1000 cases; hand case accuracy {} MF1 {:.10}",
            hand.accuracy, hand.mf1
        ),
    )
}

// ---------------------------------------------------------------------------

/// Serves samples normally but counts and poisons every label read.
struct LabelTrap<'a> {
    inner: &'a Dataset,
    reads: AtomicUsize,
}

impl SampleSource for LabelTrap<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn channels(&self) -> usize {
        self.inner.channels()
    }
    fn length(&self) -> usize {
        self.inner.length()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn sample(&self, i: usize) -> &[f32] {
        self.inner.sample(i)
    }
    fn label(&self, _: usize) -> i64 {
        self.reads.fetch_add(1, Ordering::SeqCst);
        i64::MIN
    }
}

fn small_config() -> TrainConfig {
    let mut t = TrainConfig::default();
    t.epochs = 2;
    t.batch_size = 16;
    t.encoder.channels = vec![8, 16, 16];
    t.transformer.hidden = 16;
    t.transformer.layers = 1;
    t.transformer.heads = 2;
    t
}

fn criterion_isolation() -> Outcome {
    let data = make_synthetic(20, 2, 64, 3, 0.3, 61).map_err(|e| e.to_string())?;
    let cfg = small_config();
    let trap = LabelTrap {
        inner: &data,
        reads: AtomicUsize::new(0),
    };
    let trapped = pretrain_tstcc(&trap, &cfg).map_err(|e| e.to_string())?;
    let plain = pretrain_tstcc(&data, &cfg).map_err(|e| e.to_string())?;
    let reads = trap.reads.load(Ordering::SeqCst);
    let same = trapped.checkpoint.params == plain.checkpoint.params;

    let test = make_synthetic(10, 2, 64, 3, 0.3, 62).map_err(|e| e.to_string())?;
    let mut run = RunConfig::default();
    run.run.protocol = Protocol::Catcc;
    run.data.labels_fraction = 0.1;
    run.train = cfg;
    run.train.seed = 17;
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut reports = Vec::new();
    for d in &dirs {
        reports.push(run_protocol(&run, &data, &test, Some(d.path())).map_err(|e| e.to_string())?);
    }
    let listing = |d: &tempfile::TempDir| -> Result<Vec<(String, Vec<u8>)>, String> {
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(d.path())
            .map_err(|e| e.to_string())?
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        Ok(files)
    };
    let (a, b) = (listing(&dirs[0])?, listing(&dirs[1])?);
    let identical = a == b;
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let same_report = reports[0].metrics == reports[1].metrics && reports[0].checkpoints == reports[1].checkpoints;
    check(
        reads == 0 && same && identical && same_report && names.len() == 7,
        format!(
            "pretraining read {reads} labels, params independent of labels: {same}; two catcc runs byte-identical over {names:?}: {}",
            identical && same_report
        ),
    )
}

// ---------------------------------------------------------------------------

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Scaled-down model used for the end-to-end checks on one CPU core.
fn desk_config() -> TrainConfig {
    let mut t = TrainConfig::default();
    t.encoder.channels = vec![16, 32, 32];
    t.transformer.hidden = 32;
    t.transformer.layers = 2;
    t
}

/// The default `tstcc synth` pair: 3 classes, 200 per class, T=128, noise 0.3.
fn synthetic_pair() -> Result<(Dataset, Dataset), String> {
    let root = SeedStream::new(0);
    let train = make_synthetic(200, 1, 128, 3, 0.3, root.named("train").key()).map_err(|e| e.to_string())?;
    let test = make_synthetic(200, 1, 128, 3, 0.3, root.named("test").key()).map_err(|e| e.to_string())?;
    Ok((train, test))
}

#[derive(Debug, Default)]
struct SeedScores {
    tstcc_1: f64,
    supervised_1: f64,
    catcc_1: f64,
    tstcc_10: f64,
    supervised_100: f64,
}

/// Pretraining never reads labels, so one pretrained checkpoint serves every
/// label fraction of a seed; later phases match `run_protocol` step for step.
fn seed_scores(seed: u64, train: &Dataset, test: &Dataset) -> tstcc::Result<SeedScores> {
    let mut run = RunConfig::default();
    run.train = desk_config();
    run.train.seed = seed;
    let prepared = |fraction: f64| {
        let mut r = run.clone();
        r.data.labels_fraction = fraction;
        prepare(&r, train, test)
    };
    let t = &run.train;
    let p1 = prepared(0.01)?;
    let p10 = prepared(0.1)?;
    let p100 = prepared(1.0)?;

    let pre = pretrain_tstcc(&p1.train, t)?.checkpoint;
    let ft = finetune(&pre, &p1.split.labeled, t)?.checkpoint;
    let mut s = SeedScores {
        tstcc_1: evaluate(&ft, &p1.test)?.mf1,
        supervised_1: evaluate(&train_supervised(&p1.split.labeled, t)?.checkpoint, &p1.test)?.mf1,
        ..Default::default()
    };
    let pseudo = generate_pseudo_labels(&ft, &p1.split.unlabeled, p1.unlabeled_truth.as_deref())?;
    let p3 = pseudo_label_checkpoint(&ft, &pseudo);
    let combined = p1.split.labeled.concat(&pseudo.dataset)?;
    let p4 = train_catcc(&p3, &combined, t)?.checkpoint;
    s.catcc_1 = evaluate(&finetune(&p4, &p1.split.labeled, t)?.checkpoint, &p1.test)?.mf1;
    s.tstcc_10 = evaluate(&finetune(&pre, &p10.split.labeled, t)?.checkpoint, &p10.test)?.mf1;
    s.supervised_100 = evaluate(&train_supervised(&p100.split.labeled, t)?.checkpoint, &p100.test)?.mf1;
    Ok(s)
}

fn criterion_end_to_end() -> Outcome {
    let start = Instant::now();
    let (train, test) = synthetic_pair()?;
    let mut all = Vec::new();
    for seed in SEEDS {
        let s = seed_scores(seed, &train, &test).map_err(|e| format!("seed {seed}: {e}"))?;
        eprintln!(
            "  seed {seed}: tstcc 1% {:.3}, supervised 1% {:.3}, catcc 1% {:.3}, tstcc 10% {:.3}, supervised 100% {:.3} ({:.0}s)",
            s.tstcc_1,
            s.supervised_1,
            s.catcc_1,
            s.tstcc_10,
            s.supervised_100,
            start.elapsed().as_secs_f64()
        );
        all.push(s);
    }
    let mean = |f: fn(&SeedScores) -> f64| all.iter().map(f).sum::<f64>() / all.len() as f64;
    let (tstcc_1, sup_1, catcc_1, tstcc_10, sup_100) = (
        mean(|s| s.tstcc_1),
        mean(|s| s.supervised_1),
        mean(|s| s.catcc_1),
        mean(|s| s.tstcc_10),
        mean(|s| s.supervised_100),
    );
    let a = tstcc_1 - sup_1 >= 0.05;
    let b = catcc_1 >= tstcc_1;
    let c = tstcc_10 >= 0.9 * sup_100;
    let elapsed = start.elapsed();
    check(
        a && b && c && elapsed < Duration::from_secs(20 * 60),
        format!(
            "mean MF1 over {} seeds: (a) tstcc 1% {:.1} vs supervised 1% {:.1} [{}]; (b) catcc 1% {:.1} [{}]; (c) tstcc 10% {:.1} vs 0.9 x supervised 100% {:.1} [{}]; {:.0}s",
            SEEDS.len(),
            tstcc_1 * 100.0,
            sup_1 * 100.0,
            if a { "ok" } else { "short" },
            catcc_1 * 100.0,
            if b { "ok" } else { "short" },
            tstcc_10 * 100.0,
            0.9 * sup_100 * 100.0,
            if c { "ok" } else { "short" },
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_horizon_sweep() -> Outcome {
    let start = Instant::now();
    let (train, test) = synthetic_pair()?;
    let mut lines = Vec::new();
    let mut ok = true;
    for fraction in [0.1, 0.4, 0.7] {
        let mut run = RunConfig::default();
        run.run.protocol = Protocol::Tstcc;
        run.data.labels_fraction = 0.1;
        run.train = desk_config();
        run.train.epochs = 10;
        run.train.transformer.horizon_fraction = fraction;
        let k = prepare(&run, &train, &test).map_err(|e| e.to_string())?.dims.horizon;
        let r = run_protocol(&run, &train, &test, None).map_err(|e| format!("K/T_z {fraction}: {e}"))?;
        ok &= r.metrics.mf1.is_finite();
        lines.push(format!("K/T_z {fraction} (K={k}) MF1 {:.1}", r.metrics.mf1 * 100.0));
    }
    check(ok, format!("{}; {:.0}s", lines.join(", "), start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "loss oracles", criterion_loss_oracles),
        (2, "gradient fidelity", criterion_gradients),
        (3, "closed-form loss values", criterion_closed_forms),
        (4, "augmentation laws", criterion_augmentations),
        (5, "metrics oracle", criterion_metrics),
        (6, "phase isolation and reproducibility", criterion_isolation),
        (7, "end-to-end label efficiency", criterion_end_to_end),
        (8, "horizon sensitivity sweep", criterion_horizon_sweep),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
