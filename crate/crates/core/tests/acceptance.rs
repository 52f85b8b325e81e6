//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does. Criteria run one after another
//! inside a single test so their runtime budgets are not shared with
//! concurrently running tests.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use dleng::continual::{contrastive_loss, frozen_digest, HeadBatch};
use dleng::gmm::{fit_gmm_em, sinkhorn_responsibilities, DiagGaussian, Mixture, SinkhornConfig};
use dleng::grid::{ClassId, LabelGrid, IGNORE};
use dleng::io::container::{
    decode_heads, decode_index, decode_model, decode_scorer, encode_heads, encode_index, encode_model, encode_scorer,
};
use dleng::io::manifest::{read_bundle, write_bundle};
use dleng::io::state::{load_state, save_state};
use dleng::io::store::{decode_store, encode_store};
use dleng::metrics::{component_counts, component_f1, miou, top1_macro_precision, RetrievalQuery};
use dleng::mlp::Mlp;
use dleng::model::{decoder_loss_and_grad, fit_model, Decoder, GmmClassModel};
use dleng::ood::ood_loss_and_grad;
use dleng::pipeline::{demo_spec, run_demo, DemoReport, LoopConfig, LoopState};
use dleng::retrieval::{kmeans, EmbeddingIndex, IndexConfig, Modality, StreamingKMeans};
use dleng::samples::Samples;
use dleng::synth::{blob_stream, clustered_embeddings, generate_scenario, ScenarioSpec};
use dleng::{Error, FormatError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed < Duration::from_secs(budget_secs)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---- 1: Sinkhorn balance ----

fn sinkhorn_balance() -> Verdict {
    let (n, c) = (200, 4);
    let target = n as f64 / c as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_row = 0.0f64;
    let mut worst_col = 0.0f64;
    let start = Instant::now();
    for _ in 0..25 {
        let scale = rng.random_range(1.0..20.0);
        let ll: Vec<f64> = (0..n * c).map(|_| -scale * rng.random::<f64>()).collect();
        let r = sinkhorn_responsibilities(&ll, n, c, 50).expect("finite input");
        for row in r.chunks(c) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for j in 0..c {
            let col: f64 = (0..n).map(|i| r[i * c + j]).sum();
            worst_col = worst_col.max((col - target).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_row < 1e-6 && worst_col < 1e-4 * n as f64 && within(elapsed, 1);
    verdict(pass, format!("max row err {worst_row:.2e} (<1e-6), max col err {worst_col:.2e} (<{:.0e}), {elapsed:.2?} (<1s)", 1e-4 * n as f64))
}

// ---- 2: gradient checks ----

/// Largest `|a - n| / max(|a|, |n|, 1e-8)` over parameters, with central
/// differences of step `1e-5`.
fn max_relative_error(params: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let h = 1e-5;
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize, dim: usize, spread: f64) -> Samples {
    Samples::from_flat(dim, (0..n * dim).map(|_| spread * gaussian(rng)).collect()).unwrap()
}

fn random_mixture(rng: &mut ChaCha8Rng, components: usize, dim: usize) -> Mixture {
    Mixture::new(
        (0..components)
            .map(|_| DiagGaussian {
                mean: (0..dim).map(|_| gaussian(rng)).collect(),
                var: (0..dim).map(|_| rng.random_range(0.5..2.0)).collect(),
            })
            .collect(),
    )
    .unwrap()
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let decoder_err = {
        let mixtures: Vec<Mixture> = (0..3).map(|_| random_mixture(&mut rng, 2, 4)).collect();
        let model = GmmClassModel::new(Decoder::Mlp(Mlp::new(&[6, 7, 5, 4], 11)), mixtures).unwrap();
        let inputs = random_samples(&mut rng, 24, 6, 1.0);
        let labels: Vec<ClassId> = (0..24).map(|i| (i % 3) as ClassId).collect();
        let (_, grad) = decoder_loss_and_grad(&model, &inputs, &labels).unwrap();
        let Decoder::Mlp(mlp) = &model.decoder else { unreachable!() };
        max_relative_error(&mlp.params(), &grad, |p| {
            let mut m = model.clone();
            if let Decoder::Mlp(mlp) = &mut m.decoder {
                mlp.set_params(p);
            }
            decoder_loss_and_grad(&m, &inputs, &labels).unwrap().0
        })
    };

    let ood_err = {
        let mlp = Mlp::new(&[5, 8, 2], 12);
        let din = random_mixture(&mut rng, 2, 2);
        let dout = random_mixture(&mut rng, 1, 2);
        let inputs = random_samples(&mut rng, 20, 5, 1.0);
        let is_out: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let (_, grad) = ood_loss_and_grad(&mlp, &din, &dout, &inputs, &is_out).unwrap();
        max_relative_error(&mlp.params(), &grad, |p| {
            let mut m = mlp.clone();
            m.set_params(p);
            ood_loss_and_grad(&m, &din, &dout, &inputs, &is_out).unwrap().0
        })
    };

    let head_err = {
        let model = GmmClassModel::new(
            Decoder::Identity { dim: 4 },
            (0..2).map(|_| random_mixture(&mut rng, 2, 4)).collect(),
        )
        .unwrap();
        let inputs = random_samples(&mut rng, 16, 4, 1.5);
        let positive: Vec<bool> = (0..16).map(|i| i < 6).collect();
        let batch = HeadBatch::new(inputs, positive, &model, &[]).unwrap();
        let proj = Mlp::new(&[4, 3, 4], 13);
        let mix = random_mixture(&mut rng, 2, 4);
        let lambda = 0.7;
        let grad = contrastive_loss(&batch, &proj, &mix, lambda).unwrap().grad;
        max_relative_error(&proj.params(), &grad, |p| {
            let mut m = proj.clone();
            m.set_params(p);
            contrastive_loss(&batch, &m, &mix, lambda).unwrap().loss
        })
    };

    let elapsed = start.elapsed();
    let worst = decoder_err.max(ood_err).max(head_err);
    verdict(
        worst < 1e-4 && within(elapsed, 30),
        format!("decoder {decoder_err:.2e}, OoD MLP {ood_err:.2e}, head {head_err:.2e} (<1e-4), {elapsed:.2?} (<30s)"),
    )
}

// ---- 3: GMM recovery ----

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Smallest achievable worst-case distance over matchings of `found` to `truth`.
fn matched_error(found: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    permutations(truth.len())
        .into_iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| dist(&found[i], &truth[j])).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min)
}

fn gmm_recovery() -> Verdict {
    let start = Instant::now();
    let spec = ScenarioSpec {
        name: "recovery".into(),
        seed: 3,
        dim: 8,
        seed_classes: 3,
        heldout_classes: 1,
        components_per_class: 2,
        separation: 6.0,
        train_frames: 24,
        val_frames: 0,
        test_frames: 8,
        unknown_frames: 0,
        ..ScenarioSpec::default()
    };
    let bundle = generate_scenario(&spec).unwrap();
    let mut per_class = vec![Samples::new(spec.dim); spec.seed_classes];
    for f in &bundle.train {
        for (i, &t) in f.truth.labels.iter().enumerate() {
            if (t as usize) < spec.seed_classes {
                per_class[t as usize].push(f.features.cell(i)).unwrap();
            }
        }
    }
    let em = SinkhornConfig::default();
    let mixtures = fit_gmm_em(&per_class, &em).unwrap();
    let mean_err = mixtures
        .iter()
        .zip(&bundle.truth.class_means)
        .map(|(m, truth)| {
            let found: Vec<Vec<f64>> = m.components.iter().map(|c| c.mean.clone()).collect();
            matched_error(&found, truth)
        })
        .fold(0.0, f64::max);

    let model = fit_model(&bundle.training_pairs(), spec.seed_classes, Decoder::Identity { dim: spec.dim }, &em).unwrap();
    let (mut model_ok, mut bayes_ok, mut agree, mut total) = (0usize, 0usize, 0usize, 0usize);
    for f in &bundle.test {
        let pred = model.predict_grid(&f.features).unwrap().labels;
        for (i, &t) in f.truth.labels.iter().enumerate() {
            if t as usize >= spec.seed_classes {
                continue;
            }
            let bayes = bundle.truth.bayes_label(f.features.cell(i), spec.seed_classes);
            total += 1;
            model_ok += (pred.labels[i] == t) as usize;
            bayes_ok += (bayes == t) as usize;
            agree += (pred.labels[i] == bayes) as usize;
        }
    }
    let relative = model_ok as f64 / bayes_ok as f64;
    let agreement = agree as f64 / total as f64;
    let elapsed = start.elapsed();
    verdict(
        mean_err < 0.1 && relative >= 0.99 && agreement >= 0.99 && within(elapsed, 60),
        format!(
            "max matched mean error {mean_err:.4} (<0.1), accuracy/Bayes {relative:.4}, agreement with Bayes {agreement:.4} (>=0.99), {elapsed:.2?} (<60s)"
        ),
    )
}

// ---- 4 and 6: the demo loop ----

fn ood_detection(report: &DemoReport, elapsed: Duration) -> Verdict {
    let f1 = report.detection.pooled.f1;
    verdict(
        f1 >= 0.90 && report.thresholds.tau == 0.0 && within(elapsed, 120),
        format!(
            "component F1 {f1:.4} (P {:.4}, R {:.4}, >=0.90) at tau {}, {elapsed:.2?} (<120s)",
            report.detection.pooled.precision, report.detection.pooled.recall, report.thresholds.tau
        ),
    )
}

fn continual_loop(report: &DemoReport, elapsed: Duration) -> Verdict {
    let digest = report.frozen_digest_before == report.frozen_digest_after;
    let score = report.mean_score_after < 0.0;
    let drop = report.seed_miou_before - report.seed_miou_after;
    let iou = report.new_class_iou;
    verdict(
        digest && score && drop < 0.01 && iou >= 0.90 && within(elapsed, 180),
        format!(
            "(a) digest unchanged {digest}; (b) mean score {:.3} -> {:.3} (<0); (c) seed mIoU drop {drop:.4} (<0.01); (d) new-class IoU {iou:.4} (>=0.90); {} retrieved at precision {:.3}; {elapsed:.2?} (<180s)",
            report.mean_score_before, report.mean_score_after, report.retrieved.len(), report.retrieved_precision
        ),
    )
}

// ---- 5: retrieval ----

fn retrieval() -> Verdict {
    let start = Instant::now();
    let (n, dim, classes) = (10_000, 64, 16);
    let records = clustered_embeddings(n, dim, classes, 0.6, 5).unwrap();
    let config = IndexConfig::default();
    let mut index = EmbeddingIndex::new(Modality::Image, dim, config.clone()).unwrap();
    for r in &records {
        index.insert(r.clone()).unwrap();
    }
    let nprobe = config.k.div_ceil(4);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut found, mut wanted, mut scanned, mut probed) = (0usize, 0usize, 0usize, 0usize);
    let mut ann_queries = Vec::new();
    let mut oracle_top1: Vec<(ClassId, Option<ClassId>)> = Vec::new();
    let queries = 200;
    for _ in 0..queries {
        let base = &records[rng.random_range(0..n)];
        let z: Vec<f64> = base.vector.iter().map(|&v| v as f64 + 0.05 * gaussian(&mut rng)).collect();
        let class = base.label.unwrap();
        let approx = index.query_topn(&z, 10, nprobe).unwrap();
        let exact = index.exact_topn(&z, 10).unwrap();
        let exact_ids: Vec<u64> = exact.iter().map(|h| h.object_id).collect();
        found += approx.hits.iter().filter(|h| exact_ids.contains(&h.object_id)).count();
        wanted += exact_ids.len();
        scanned += approx.scanned;
        probed += approx.probed_lists;
        ann_queries.push(RetrievalQuery {
            class,
            results: approx.hits.iter().map(|h| index.get(h.object_id).unwrap().label).collect(),
        });
        // brute force: best cosine over every record, ties to the lower id
        let zn: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best: Option<(f64, u64, Option<ClassId>)> = None;
        for r in &records {
            let v: Vec<f64> = r.vector.iter().map(|&x| x as f64).collect();
            let vn: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = v.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / (vn * zn);
            if best.is_none_or(|(bc, bid, _)| cos > bc || (cos == bc && r.object_id < bid)) {
                best = Some((cos, r.object_id, r.label));
            }
        }
        oracle_top1.push((class, best.map(|b| b.2).unwrap()));
    }
    let recall = found as f64 / wanted as f64;
    // a full scan probes every list; records scanned are reported alongside
    let reduction = (index.list_count() * queries) as f64 / probed as f64;
    let record_reduction = (n * queries) as f64 / scanned as f64;
    let mp = top1_macro_precision(&ann_queries).mp;
    let oracle_mp = {
        let mut per: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
        for (c, top) in &oracle_top1 {
            let e = per.entry(*c).or_default();
            e.1 += 1;
            if *top == Some(*c) {
                e.0 += 1;
            }
        }
        per.values().map(|&(h, t)| h as f64 / t as f64).sum::<f64>() / per.len() as f64
    };
    let elapsed = start.elapsed();
    verdict(
        recall >= 0.90 && reduction >= 4.0 && mp == oracle_mp,
        format!(
            "recall@10 {recall:.4} (>=0.90) at nprobe {nprobe} of k {}; list-probe reduction {reduction:.2}x (>=4x), records scanned reduction {record_reduction:.2}x; top-1 mp {mp:.6} vs brute-force {oracle_mp:.6} (equal); {elapsed:.2?}",
            config.k
        ),
    )
}

// ---- 7: streaming clustering ----

fn ema_clustering() -> Verdict {
    let centers = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
    let stream = blob_stream(&centers, 2000, 0.3, 7);
    let config = IndexConfig::default();
    let mut sk = StreamingKMeans::new(2, 3, config.alpha, config.warmup_per_cluster, 7).unwrap();
    for (_, p) in &stream {
        sk.observe(p);
    }
    let all = Samples::from_rows(2, &stream.iter().map(|(_, p)| *p).collect::<Vec<_>>()).unwrap();
    let batch = kmeans(&all, 3, 7, 100);
    let err = matched_error(&sk.state.centroids, &batch.centroids);
    // exact algebra: one step from c toward x with alpha
    let step = dleng::retrieval::kmeans_ema_update(&[1.0, -2.0], &[3.0, 2.0], 0.25);
    let algebra = step == vec![1.5, -1.0];
    verdict(
        err < 0.2 && algebra,
        format!("max matched centroid distance {err:.4} (<0.2) at alpha {}; EMA algebra exact {algebra}", config.alpha),
    )
}

// ---- 8: metrics against brute force ----

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u32, ignore: bool) -> LabelGrid {
    let labels = (0..h * w)
        .map(|_| if ignore && rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..classes) })
        .collect();
    LabelGrid::new("r", h, w, labels).unwrap()
}

fn brute_miou(pred: &LabelGrid, gt: &LabelGrid, classes: &[ClassId]) -> (Vec<Option<f64>>, f64) {
    let per: Vec<Option<f64>> = classes
        .iter()
        .map(|&c| {
            let valid = |i: usize| gt.labels[i] != IGNORE;
            let n = gt.labels.len();
            let tp = (0..n).filter(|&i| valid(i) && pred.labels[i] == c && gt.labels[i] == c).count();
            let fp = (0..n).filter(|&i| valid(i) && pred.labels[i] == c && gt.labels[i] != c).count();
            let fn_ = (0..n).filter(|&i| valid(i) && pred.labels[i] != c && gt.labels[i] == c).count();
            let d = tp + fp + fn_;
            (d > 0).then(|| tp as f64 / d as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per, mean)
}

/// Flood fill from every cell over 4-neighbours sharing `mask`.
fn brute_components(h: usize, w: usize, mask: &[bool]) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; h * w];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for s in 0..h * w {
        if !mask[s] || label[s] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut frontier = vec![s];
        label[s] = id;
        let mut members = Vec::new();
        while let Some(i) = frontier.pop() {
            members.push(i);
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if mask[j] && label[j] == usize::MAX {
                    label[j] = id;
                    frontier.push(j);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

fn brute_f1(pred: &[Vec<usize>], gt: &[Vec<usize>]) -> (usize, usize, usize, f64) {
    let iou = |a: &Vec<usize>, b: &Vec<usize>| {
        let inter = a.iter().filter(|x| b.contains(x)).count();
        let union = a.len() + b.len() - inter;
        if union == 0 { 0.0 } else { inter as f64 / union as f64 }
    };
    let tp = gt.iter().filter(|g| pred.iter().any(|p| iou(g, p) > 0.25)).count();
    let fp = pred.iter().filter(|p| gt.iter().all(|g| iou(g, p) < 0.25)).count();
    let fn_ = gt.len() - tp;
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (tp, fp, fn_, f1)
}

fn metrics_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = Vec::new();
    for trial in 0..100 {
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let k = rng.random_range(1..5u32);
        let gt = random_grid(&mut rng, h, w, k, true);
        let pred = random_grid(&mut rng, h, w, k, false);
        let classes: Vec<ClassId> = (0..k).collect();
        let report = miou(&pred, &gt, &classes).unwrap();
        let (per, mean) = brute_miou(&pred, &gt, &classes);
        let got: Vec<Option<f64>> = report.per_class.iter().map(|c| c.iou).collect();
        if got != per || report.mean != mean {
            mismatches.push(format!("miou trial {trial}"));
        }

        let pm: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
        let gm: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
        let (pc, gc) = (brute_components(h, w, &pm), brute_components(h, w, &gm));
        let counts = component_counts(&pc, &gc);
        let (tp, fp, fn_, f1) = brute_f1(&pc, &gc);
        let lib_f1 = component_f1(&pc, &gc).f1;
        let lib_pc = dleng::metrics::connected_components(h, w, |i| pm[i]);
        if (counts.true_positive, counts.false_positive, counts.false_negative) != (tp, fp, fn_) || lib_f1 != f1 || lib_pc != pc {
            mismatches.push(format!("component F1 trial {trial}"));
        }

        let nq = rng.random_range(1..12);
        let queries: Vec<RetrievalQuery> = (0..nq)
            .map(|_| RetrievalQuery {
                class: rng.random_range(0..k),
                results: (0..rng.random_range(0..4)).map(|_| Some(rng.random_range(0..k))).collect(),
            })
            .collect();
        let mut per: BTreeMap<ClassId, (u32, u32)> = BTreeMap::new();
        for q in &queries {
            let e = per.entry(q.class).or_default();
            e.1 += 1;
            e.0 += (q.results.first() == Some(&Some(q.class))) as u32;
        }
        let oracle = per.values().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / per.len() as f64;
        if top1_macro_precision(&queries).mp != oracle {
            mismatches.push(format!("macro precision trial {trial}"));
        }
    }

    // hand examples
    let g = LabelGrid::new("h", 2, 2, vec![0, 0, 1, 1]).unwrap();
    let p = LabelGrid::new("h", 2, 2, vec![0, 1, 1, 1]).unwrap();
    let hand_miou = miou(&p, &g, &[0, 1]).unwrap();
    let hand_f1 = component_f1(&[vec![0, 1], vec![9]], &[vec![0, 1], vec![5, 6]]);
    let q = |class, top| RetrievalQuery { class, results: vec![Some(top)] };
    let hand_mp = top1_macro_precision(&[q(0, 0), q(0, 0), q(1, 1), q(1, 0)]).mp;
    let quarter = component_counts(&[vec![0]], &[vec![0, 1, 2, 3]]);
    let hands = hand_miou.iou(0) == Some(0.5)
        && hand_miou.iou(1) == Some(2.0 / 3.0)
        && (hand_miou.mean - 7.0 / 12.0).abs() < 1e-15
        && hand_f1.precision == 0.5
        && hand_f1.recall == 0.5
        && hand_f1.f1 == 0.5
        && hand_mp == 0.75
        && quarter.true_positive == 0
        && quarter.false_positive == 0;
    verdict(
        mismatches.is_empty() && hands,
        format!("100 random instances, mismatches {mismatches:?}; hand examples reproduce {hands}"),
    )
}

// ---- 9: formats and reproducibility ----

fn formats(state: &LoopState, first: &DemoReport, second: &DemoReport, second_state: &LoopState) -> Verdict {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    let records = state.image_index.records().to_vec();
    let store = encode_store(state.image_index.dim, &records).unwrap();
    let (_, back) = decode_store(&store, Some(state.image_index.dim)).unwrap();
    check(back == records && encode_store(state.image_index.dim, &back).unwrap() == store, "store round trip");
    check(encode_store(4, &[]).unwrap().len() == 24, "empty store header");
    let mut bad = store.clone();
    bad[0] ^= 0xFF;
    check(matches!(decode_store(&bad, None), Err(Error::Format(FormatError::BadMagic { .. }))), "store bad magic");
    check(matches!(decode_store(&store[..store.len() - 3], None), Err(Error::Format(_))), "store truncation");

    let model = encode_model(&state.model);
    let model_back = decode_model(&model).unwrap();
    check(model_back.digest() == state.model.digest() && encode_model(&model_back) == model, "model round trip");
    let mut flipped = model.clone();
    let last = flipped.len() - 6;
    flipped[last] ^= 0x01;
    check(
        matches!(decode_model(&flipped), Err(Error::Format(FormatError::ChecksumMismatch { ref section })) if !section.is_empty()),
        "model checksum",
    );

    let heads = encode_heads(&state.heads);
    let heads_back = decode_heads(&heads).unwrap();
    check(heads_back == state.heads, "head round trip");
    check(
        heads_back.iter().zip(&state.heads).all(|(a, b)| a.meta.lambda == b.meta.lambda && a.meta.seed == b.meta.seed),
        "head lambda and seed",
    );
    let scorer = encode_scorer(&state.scorer);
    check(decode_scorer(&scorer).unwrap() == state.scorer, "scorer round trip");
    let index = encode_index(&state.image_index).unwrap();
    let index_back = decode_index(&index).unwrap();
    check(encode_index(&index_back).unwrap() == index, "index round trip");

    let dir = tempfile::tempdir().unwrap();
    save_state(state, 1, dir.path()).unwrap();
    let (loaded, _) = load_state(dir.path()).unwrap();
    check(&loaded == state, "state round trip");
    check(frozen_digest(&loaded.model, &[]) == frozen_digest(&state.model, &[]), "state digest");

    let bundle = generate_scenario(&ScenarioSpec { train_frames: 2, val_frames: 2, test_frames: 2, unknown_frames: 2, ..demo_spec(first.seed) }).unwrap();
    let bdir = tempfile::tempdir().unwrap();
    write_bundle(&bundle, bdir.path()).unwrap();
    let read = read_bundle(bdir.path()).unwrap();
    check(read.train == bundle.train && read.image_records == bundle.image_records && read.objects == bundle.objects, "bundle round trip");

    let a = serde_json::to_vec(first).unwrap();
    let b = serde_json::to_vec(second).unwrap();
    check(a == b, "demo report bytes");
    check(encode_model(&second_state.model) == model, "demo model bytes");
    check(encode_heads(&second_state.heads) == heads, "demo head bytes");
    check(encode_scorer(&second_state.scorer) == scorer, "demo scorer bytes");
    check(encode_index(&second_state.image_index).unwrap() == index, "demo index bytes");

    verdict(failures.is_empty(), format!("failures {failures:?}; demo report {} bytes identical across runs", a.len()))
}

#[test]
fn primary_acceptance_suite() {
    let mut verdicts: Vec<(u8, &str, Verdict)> = Vec::new();
    verdicts.push((1, "sinkhorn balance", sinkhorn_balance()));
    verdicts.push((2, "gradient checks", gradient_checks()));
    verdicts.push((3, "gmm recovery", gmm_recovery()));

    let config = LoopConfig::default();
    let spec = demo_spec(0);
    let start = Instant::now();
    let (report, state, _) = run_demo(&spec, &config).expect("demo runs");
    let elapsed = start.elapsed();
    verdicts.push((4, "ood detection", ood_detection(&report, elapsed)));
    verdicts.push((5, "retrieval", retrieval()));
    verdicts.push((6, "continual learning", continual_loop(&report, elapsed)));
    verdicts.push((7, "ema clustering", ema_clustering()));
    verdicts.push((8, "metrics oracles", metrics_oracles()));
    let (again, again_state, _) = run_demo(&spec, &config).expect("demo runs");
    verdicts.push((9, "formats", formats(&state, &report, &again, &again_state)));

    for (id, name, v) in &verdicts {
        println!("criterion {id} {name}: {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<u8> = verdicts.iter().filter(|v| !v.2.pass).map(|v| v.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
