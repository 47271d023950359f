//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use sgen_core::dataset::{encode_blob, save_dataset, Dataset, ShapeRecord, Split};
use sgen_core::diff::{gaussian, grad_check, seeded_rng, Bound, Mat, ParamStore, SeededRng, Tape, Var};
use sgen_core::diffusion::{build_schedule, q_sample, reverse_diffusion, Denoiser, DenoiserConfig, DenoiserInput};
use sgen_core::flow::{condition_rows, flow_forward, integrate_forward, integrate_inverse, Flow, FlowConfig, LinearDynamics};
use sgen_core::metrics::{chamfer, emd_exact, evaluate, sca, sca_by_code, EmdMode, GroundTruth, MetricConfig, StructurePredictor};
use sgen_core::model::{total_loss, LossNoise, Model, ModelConfig};
use sgen_core::pipeline::{load_generator, sample_cloud, sample_shapes, save_generator, train, StructureSpec, TrainConfig, TrainSplit};
use sgen_core::ply::encode_ply;
use sgen_core::predictor::{AdjacencyPredictor, PredictorConfig};
use sgen_core::sgn::{sgn_forward, GraphBatch, Sgn, SgnConfig};
use sgen_core::structure::{adjacency_from_edges, default_segmentation_indices};
use sgen_core::synth::{make_dataset, sample_chair, GeneratorConfig, CATALOG_CODES};
use sgen_core::{PointCloud, StructureGraph};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("gradient suite", gradient_suite),
        ("flow correctness", flow_correctness),
        ("diffusion correctness", diffusion_correctness),
        ("metric oracles", metric_oracles),
        ("encoder invariances", encoder_invariances),
        ("overfit smoke", overfit_smoke),
        ("structure control", structure_control),
        ("determinism and persistence", determinism),
    ];
    let only: Vec<usize> = std::env::var("SGEN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("criterion {n} {name}: PASS ({secs:.1}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({secs:.1}s) {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn random_cloud(rng: &mut SeededRng, n: usize, scale: f64) -> PointCloud {
    PointCloud::from_f64(&(0..n).map(|_| [scale * rng.normal(), scale * rng.normal(), scale * rng.normal()]).collect::<Vec<_>>()).unwrap()
}

/// Random valid graph with at least one existing part, plus a shuffled
/// segmentation giving every existing part at least one point.
fn random_record(rng: &mut SeededRng, m: usize, n: usize) -> ShapeRecord {
    let mut existence: Vec<bool> = (0..m).map(|_| rng.uniform() < 0.7).collect();
    existence[rng.below(m)] = true;
    let mut edges = Vec::new();
    for j in 0..m {
        for k in j + 1..m {
            if existence[j] && existence[k] && rng.uniform() < 0.5 {
                edges.push((j, k));
            }
        }
    }
    let mut idx = default_segmentation_indices(n, &existence).unwrap();
    rng.shuffle(&mut idx);
    let graph = StructureGraph::from_indices(&idx, existence, adjacency_from_edges(m, &edges)).unwrap();
    ShapeRecord { shape_id: "r".into(), structure_code: String::new(), cloud: random_cloud(rng, n, 0.5), graph }
}

fn pick(rng: &mut SeededRng, xs: &[usize]) -> usize {
    xs[rng.below(xs.len())]
}

fn weighted_sum(t: &mut Tape<f64>, x: Var, rng: &mut SeededRng) -> Var {
    let (r, c) = t.shape(x);
    let w = t.constant(gaussian(rng, r, c));
    let p = t.mul(x, w);
    t.sum_all(p)
}

/// Loss closure over a store; gradients of unused parameters are zero.
fn check_grads(label: &str, store: &ParamStore<f64>, build: impl Fn(&mut Tape<f64>, &Bound) -> Var) -> Result<f64, String> {
    let loss = |s: &ParamStore<f64>, want: bool| {
        let mut t = Tape::new();
        let b = s.bind(&mut t);
        let l = build(&mut t, &b);
        let v = t.value(l).item();
        let grads = want.then(|| {
            let mut g = t.backward(l);
            s.ids().map(|id| g.take(b.var(id)).unwrap_or_else(|| Mat::zeros(s.get(id).rows(), s.get(id).cols()))).collect()
        });
        Ok((v, grads))
    };
    let report = grad_check(loss, store, 8, 1e-4, 7).map_err(|e| format!("{label}: {e}"))?;
    if !report.pass {
        let worst = report.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        return Err(format!("{label}: max relative error {:.2e} at {}", report.max_rel_error, worst.0));
    }
    Ok(report.max_rel_error)
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Check {
    let mut worst: f64 = 0.0;
    for c in 0..3u64 {
        let mut rng = seeded_rng(100 + c);
        let m = pick(&mut rng, &[2, 3, 4]);
        let d = pick(&mut rng, &[2, 3, 4]);
        let heads = pick(&mut rng, &[1, 2]);
        let records: Vec<ShapeRecord> = (0..2).map(|_| { let n = 10 + rng.below(6); random_record(&mut rng, m, n) }).collect();
        let refs: Vec<&ShapeRecord> = records.iter().collect();
        let items: Vec<_> = records.iter().map(|r| (&r.cloud, &r.graph)).collect();
        let batch = GraphBatch::new(&items).unwrap();
        let nodes = batch.nodes();

        // encoder
        let sc = SgnConfig { m, point_hidden: 5, point_width: 4, gat_layers: 2, heads, gat_hidden: 2 * heads, latent_dim: d };
        let mut store = ParamStore::new();
        let sgn = Sgn::new(&mut store, &sc, &mut rng.fork()).unwrap();
        let eps: Mat<f64> = gaussian(&mut rng, nodes, d);
        let seed = rng.next_u64();
        worst = worst.max(check_grads(&format!("sgn config {c}"), &store, |t, p| {
            let mut r = seeded_rng(seed);
            let post = sgn.posterior(t, p, &batch, eps.clone());
            let a = weighted_sum(t, post.z, &mut r);
            let b = weighted_sum(t, post.log_sigma, &mut r);
            t.add(a, b)
        })?);

        // flow dynamics with the trace, through the prior loss
        let fc = FlowConfig { m, latent_dim: d, hidden: 6, hidden_layers: 2, steps: 8 };
        let mut store = ParamStore::new();
        let flow = Flow::new(&mut store, &fc, &mut rng.fork()).unwrap();
        let z: Mat<f64> = gaussian(&mut rng, nodes, d);
        let ls = gaussian::<f64>(&mut rng, nodes, d).map(|x| 0.3 * x);
        worst = worst.max(check_grads(&format!("ccnf config {c}"), &store, |t, p| {
            let zv = t.constant(z.clone());
            let lv = t.constant(ls.clone());
            flow.prior_loss_vars(t, p, zv, lv, &batch.existence, &batch.adjacency).total
        })?);
        let cond = condition_rows::<f64>(&batch.existence, &batch.adjacency, m, 0);
        let zj = Mat::from_fn(records.len(), d, |i, k| z.get(i * m, k));
        let seed = rng.next_u64();
        worst = worst.max(check_grads(&format!("ccnf dynamics config {c}"), &store, |t, p| {
            let mut r = seeded_rng(seed);
            let zv = t.constant(zj.clone());
            let cv = t.constant(cond.clone());
            let (f, tr) = flow.dynamics(t, p, 0, zv, 0.37, cv, true);
            let a = weighted_sum(t, f, &mut r);
            let b = weighted_sum(t, tr.unwrap(), &mut r);
            t.add(a, b)
        })?);

        // denoiser through the noise-prediction loss
        let dc = DenoiserConfig { m, latent_dim: d, layers: 2, width: 4 * heads, heads, time_dim: 4, ffn: 6 };
        let mut store = ParamStore::new();
        let den = Denoiser::new(&mut store, &dc, &mut rng.fork()).unwrap();
        let schedule = build_schedule(10, 1e-3, 0.2).unwrap();
        let mut x = Vec::new();
        let (mut labels, mut group) = (Vec::new(), Vec::new());
        for (b, r) in records.iter().enumerate() {
            for (i, l) in r.graph.label_indices().into_iter().enumerate() {
                x.extend(r.cloud.point(i));
                labels.push(l);
                group.push(b);
            }
        }
        let pts = labels.len();
        let input = DenoiserInput {
            x: Mat::from_vec(pts, 3, x),
            labels,
            group,
            t: (0..records.len()).map(|_| 1 + rng.below(10)).collect(),
            existence: batch.existence.clone(),
            adjacency: batch.adjacency.clone(),
        };
        let noise: Mat<f64> = gaussian(&mut rng, pts, 3);
        worst = worst.max(check_grads(&format!("ddpm config {c}"), &store, |t, p| {
            let zv = t.constant(z.clone());
            den.loss(t, p, &input, zv, &noise, &schedule)
        })?);

        // the joint objective over all three
        let mc = ModelConfig {
            m,
            latent_dim: d,
            sgn: sc.clone(),
            flow: fc.clone(),
            denoiser: dc.clone(),
            diffusion_steps: 10,
            beta_start: 1e-3,
            beta_end: 0.2,
            schedule_reference_steps: 10,
        };
        let (model, store) = Model::new::<f64>(&mc, 5 + c).unwrap();
        let ln: LossNoise<f64> = LossNoise::draw(&model, &refs, Some(6), &mut rng);
        worst = worst.max(check_grads(&format!("joint loss config {c}"), &store, |t, p| total_loss(&model, t, p, &refs, &ln, 0.3).unwrap().total)?);
    }
    Ok(format!("max relative error {worst:.2e} over 3 configs x 5 losses"))
}

// ---------------------------------------------------------------- 2

fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if p != c {
            a.swap(p, c);
            d = -d;
        }
        d *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    d
}

/// Undo the near-identity initialization so the dynamics do real work.
fn amplify_flow(store: &mut ParamStore<f64>, factor: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains("/out") {
            store.get_mut(id).scale_assign(factor);
        }
    }
}

fn flow_correctness() -> Check {
    // closed form
    for a in [-0.5, 0.3] {
        let d = 3;
        let mut t = Tape::<f64>::new();
        let z0: Mat<f64> = gaussian(&mut seeded_rng(1), 5, d);
        let z = t.constant(z0.clone());
        let cond = t.constant(Mat::zeros(5, 1));
        let fv = integrate_forward(&mut t, &LinearDynamics { a }, z, cond, 64);
        for (w, z) in t.value(fv.w).data().iter().zip(z0.data()) {
            ensure((w - a.exp() * z).abs() < 1e-6, || format!("a={a}: w={w}, expected {}", a.exp() * z))?;
        }
        for &ld in t.value(fv.delta_logdet).data() {
            ensure((ld + d as f64 * a).abs() < 1e-6, || format!("a={a}: delta_logdet={ld}, expected {}", -(d as f64) * a))?;
        }
        let back = integrate_inverse(&mut t, &LinearDynamics { a }, fv.w, cond, 64);
        ensure(t.value(back).zip_map(&z0, |x, y| x - y).max_abs() < 1e-6, || "linear inverse".into())?;
    }

    // round trip at K = 64
    let fc = FlowConfig { m: 4, latent_dim: 16, hidden: 64, hidden_layers: 3, steps: 64 };
    let mut store = ParamStore::new();
    let flow = Flow::new(&mut store, &fc, &mut seeded_rng(2)).unwrap();
    amplify_flow(&mut store, 10.0);
    let existence = [true, true, true, false];
    let adjacency = adjacency_from_edges(4, &[(0, 1), (1, 2)]);
    let z0: Mat<f64> = gaussian(&mut seeded_rng(3), 100, 16);
    let (mut round_trip, mut moved): (f64, f64) = (0.0, 0.0);
    for j in 0..4 {
        let row: Mat<f64> = condition_rows(&existence, &adjacency, 4, j);
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let z = t.constant(z0.clone());
        let cond = t.constant(Mat::from_fn(100, row.cols(), |_, c| row.get(0, c)));
        let fv = flow.forward_vars(&mut t, &p, j, z, cond);
        let back = flow.inverse_vars(&mut t, &p, j, fv.w, cond);
        round_trip = round_trip.max(t.value(back).zip_map(&z0, |a, b| a - b).max_abs());
        moved = moved.max(t.value(fv.w).zip_map(&z0, |a, b| a - b).max_abs());
    }
    ensure(round_trip < 1e-3, || format!("round trip error {round_trip:.2e}"))?;

    // log-det against the finite-difference Jacobian
    let mut worst_ld: f64 = 0.0;
    for d in 2..=4 {
        let fc = FlowConfig { m: 2, latent_dim: d, hidden: 16, hidden_layers: 2, steps: 64 };
        let mut store = ParamStore::new();
        let flow = Flow::new(&mut store, &fc, &mut seeded_rng(10 + d as u64)).unwrap();
        amplify_flow(&mut store, 10.0);
        let mut rng = seeded_rng(20 + d as u64);
        for _ in 0..3 {
            let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let e_row = [false, true];
            let r = flow_forward(&flow, &store, &z, true, &e_row, 0).unwrap();
            let h = 1e-5;
            let mut jac = vec![vec![0.0; d]; d];
            for k in 0..d {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[k] += h;
                zm[k] -= h;
                let wp = flow_forward(&flow, &store, &zp, true, &e_row, 0).unwrap().w;
                let wm = flow_forward(&flow, &store, &zm, true, &e_row, 0).unwrap().w;
                for i in 0..d {
                    jac[i][k] = (wp[i] - wm[i]) / (2.0 * h);
                }
            }
            // delta_logdet is the integrated negative divergence
            let fd = -det(jac).abs().ln();
            let err = (r.delta_logdet - fd).abs();
            worst_ld = worst_ld.max(err);
            ensure(err < 1e-2, || format!("d={d}: delta_logdet {} vs finite difference {fd}", r.delta_logdet))?;
        }
    }
    Ok(format!("round trip {round_trip:.1e} (max |w-z| {moved:.2}), log-det error {worst_ld:.1e}"))
}

// ---------------------------------------------------------------- 3

fn diffusion_correctness() -> Check {
    for s in [ModelConfig::desk().schedule().unwrap(), build_schedule(1000, 1e-4, 0.02).unwrap()] {
        ensure(s.alpha_bar[0] == 1.0, || "alpha_bar[0] != 1".into())?;
        ensure(s.alpha_bar.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0), || "alpha_bar is not strictly decreasing in (0, 1)".into())?;
        ensure(s.sigma_at(1) == 0.0, || format!("sigma_1 = {}", s.sigma_at(1)))?;
    }

    let s = ModelConfig::desk().schedule().unwrap();
    let tt = s.steps();
    let draws = 10_000;
    let x0v = [0.8, -1.5, 2.5];
    let x0 = Mat::from_fn(draws, 3, |_, k| x0v[k]);
    let eps: Mat<f64> = gaussian(&mut seeded_rng(4), draws, 3);
    let xt = q_sample(&x0, tt, &eps, &s);
    let ab = s.alpha_bar[tt];
    for k in 0..3 {
        let col: Vec<f64> = (0..draws).map(|i| xt.get(i, k)).collect();
        let mean = col.iter().sum::<f64>() / draws as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let (em, ev) = (ab.sqrt() * x0v[k], 1.0 - ab);
        ensure((mean - em).abs() < 0.05 * ev.sqrt(), || format!("coord {k}: mean {mean} vs {em}"))?;
        ensure((var / ev - 1.0).abs() < 0.05, || format!("coord {k}: variance {var} vs {ev}"))?;
    }

    // two steps traced by hand with a scripted denoiser
    let s2 = build_schedule(2, 0.1, 0.2).unwrap();
    let f = |x: &Mat<f64>, t: usize| Mat::from_fn(x.rows(), 3, |i, k| 0.5 * x.get(i, k) + 0.1 * t as f64 - 0.05 * k as f64);
    let noise = |t: usize| Mat::from_fn(2, 3, |i, k| 0.3 * t as f64 - 0.2 * i as f64 + 0.1 * k as f64);
    let x2 = Mat::from_vec(2, 3, vec![0.4, -0.9, 1.3, 2.0, 0.0, -0.7]);
    let got = reverse_diffusion(x2.clone(), &s2, |x, t| Ok(f(x, t)), noise).unwrap();
    let (b1, b2) = (0.1f64, 0.2f64);
    let (a1, a2) = (1.0 - b1, 1.0 - b2);
    let (ab1, ab2) = (a1, a1 * a2);
    let sigma2 = ((1.0 - ab1) / (1.0 - ab2) * b2).sqrt();
    let mut max_err: f64 = 0.0;
    for i in 0..2 {
        for k in 0..3 {
            let x = x2.get(i, k);
            let f2 = 0.5 * x + 0.2 - 0.05 * k as f64;
            let x1 = (x - b2 / (1.0 - ab2).sqrt() * f2) / a2.sqrt() + sigma2 * (0.6 - 0.2 * i as f64 + 0.1 * k as f64);
            let f1 = 0.5 * x1 + 0.1 - 0.05 * k as f64;
            let x0 = (x1 - b1 / (1.0 - ab1).sqrt() * f1) / a1.sqrt();
            max_err = max_err.max((got.get(i, k) - x0).abs());
        }
    }
    ensure(max_err < 1e-12, || format!("hand trace differs by {max_err:.2e}"))?;
    Ok(format!("T={tt} alpha_bar_T={ab:.2e}, hand trace error {max_err:.1e}"))
}

// ---------------------------------------------------------------- 4

fn oracle_cd(a: &PointCloud, b: &PointCloud) -> f64 {
    let (pa, pb) = (a.to_f64(), b.to_f64());
    let d2 = |p: [f64; 3], q: [f64; 3]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
    let mut ab = 0.0;
    for &p in &pa {
        ab += pb.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min);
    }
    let mut ba = 0.0;
    for &q in &pb {
        ba += pa.iter().map(|&p| d2(p, q)).fold(f64::INFINITY, f64::min);
    }
    ab / pa.len() as f64 + ba / pb.len() as f64
}

/// Minimum over all bijections by dynamic programming over subsets.
fn oracle_emd(a: &PointCloud, b: &PointCloud) -> f64 {
    let (pa, pb) = (a.to_f64(), b.to_f64());
    let n = pa.len();
    let dist = |p: [f64; 3], q: [f64; 3]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    let mut dp = vec![f64::INFINITY; 1 << n];
    dp[0] = 0.0;
    for mask in 0usize..(1 << n) {
        if dp[mask].is_infinite() {
            continue;
        }
        let i = mask.count_ones() as usize;
        if i == n {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                dp[next] = dp[next].min(dp[mask] + dist(pa[i], pb[j]));
            }
        }
    }
    dp[(1 << n) - 1] / n as f64
}

struct Oracle {
    mmd: f64,
    cov: f64,
    nna: f64,
}

fn oracle_sets(gen: &[&PointCloud], reference: &[&PointCloud], dist: &dyn Fn(&PointCloud, &PointCloud) -> f64) -> Oracle {
    let (g, r) = (gen.len(), reference.len());
    let gr: Vec<Vec<f64>> = gen.iter().map(|a| reference.iter().map(|b| dist(a, b)).collect()).collect();
    let mmd = (0..r).map(|j| (0..g).map(|i| gr[i][j]).fold(f64::INFINITY, f64::min)).sum::<f64>() / r as f64;
    let mut matched = std::collections::BTreeSet::new();
    for row in &gr {
        let mut best = 0;
        for j in 1..r {
            if row[j] < row[best] {
                best = j;
            }
        }
        matched.insert(best);
    }
    let all: Vec<&PointCloud> = gen.iter().chain(reference).copied().collect();
    let mut correct = 0;
    for i in 0..all.len() {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..all.len() {
            if j != i {
                let x = dist(all[i], all[j]);
                if best.is_none_or(|(_, b)| x < b) {
                    best = Some((j, x));
                }
            }
        }
        if (i < g) == (best.unwrap().0 < g) {
            correct += 1;
        }
    }
    Oracle { mmd, cov: matched.len() as f64 / r as f64, nna: correct as f64 / all.len() as f64 }
}

fn oracle_jsd(gen: &[&PointCloud], reference: &[&PointCloud], res: usize) -> f64 {
    let hist = |set: &[&PointCloud]| {
        let mut h: BTreeMap<[usize; 3], f64> = BTreeMap::new();
        let mut total = 0.0;
        for c in set {
            for p in c.to_f64() {
                let cell = p.map(|x| {
                    let u = (x + 3.0) / 6.0 * res as f64;
                    if u < 0.0 {
                        0
                    } else {
                        (u.floor() as usize).min(res - 1)
                    }
                });
                *h.entry(cell).or_default() += 1.0;
                total += 1.0;
            }
        }
        h.into_iter().map(|(k, v)| (k, v / total)).collect::<BTreeMap<_, _>>()
    };
    let (p, q) = (hist(gen), hist(reference));
    let keys: std::collections::BTreeSet<_> = p.keys().chain(q.keys()).copied().collect();
    let mut out = 0.0;
    for k in keys {
        let (a, b) = (p.get(&k).copied().unwrap_or(0.0), q.get(&k).copied().unwrap_or(0.0));
        let mid = 0.5 * (a + b);
        if a > 0.0 {
            out += 0.5 * a * (a / mid).ln();
        }
        if b > 0.0 {
            out += 0.5 * b * (b / mid).ln();
        }
    }
    out
}

fn oracle_sca(v: &[bool], e: &[bool], pv: &[bool], pe: &[bool], m: usize) -> f64 {
    let wrong = (0..m * m).filter(|&i| v[i / m] != pv[i / m] || e[i] != pe[i]).count();
    (m * m - wrong) as f64 / (m * m) as f64
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn metric_oracles() -> Check {
    let pt = |p: [f64; 3]| PointCloud::from_f64(&[p]).unwrap();
    ensure(chamfer(&pt([0.0; 3]), &pt([1.0, 0.0, 0.0])).unwrap() == 2.0, || "CD singleton pair".into())?;
    ensure(emd_exact(&pt([0.0; 3]), &pt([3.0, 4.0, 0.0])).unwrap() == 5.0, || "EMD (0,0,0) to (3,4,0)".into())?;
    let far = PointCloud::from_f64(&[[2.5, 2.5, 2.5]]).unwrap();
    let near = PointCloud::from_f64(&[[-2.5, -2.5, -2.5]]).unwrap();
    let j = sgen_core::metrics::jsd(&[&far], &[&near], 28).unwrap();
    ensure((j - std::f64::consts::LN_2).abs() < 1e-12, || format!("disjoint JSD {j}"))?;
    let v = [true, true];
    let e = [false, true, true, false];
    ensure(sca(&v, &e, &v, &e, 2) == 1.0, || "SCA identical".into())?;
    ensure(sca(&v, &e, &v, &[false, true, false, false], 2) == 0.75, || "SCA one wrong edge".into())?;
    ensure(sca(&v, &e, &v, &[false, false, true, false], 2) == 0.75, || "SCA other wrong edge".into())?;
    ensure(sca(&v, &e, &[false, true], &e, 2) == 0.5, || "SCA wrong existence".into())?;
    ensure(sca(&v, &e, &v, &[false; 4], 2) == 0.5, || "SCA both edges wrong".into())?;

    let mut rng = seeded_rng(44);
    let mut worst_emd: f64 = 0.0;
    for trial in 0..100 {
        let n = 1 + rng.below(16);
        let (g, r) = (1 + rng.below(8), 1 + rng.below(8));
        let m = 2 + rng.below(3);
        let scale = if trial % 2 == 0 { 1.0 } else { 2.0 };
        let mk = |rng: &mut SeededRng, k: usize| -> Vec<ShapeRecord> {
            (0..k)
                .map(|_| {
                    let mut rec = random_record(rng, m, n.max(m));
                    rec.cloud = random_cloud(rng, n.max(m), scale);
                    rec
                })
                .collect()
        };
        let (gen, reference) = (mk(&mut rng, g), mk(&mut rng, r));
        let gc: Vec<&PointCloud> = gen.iter().map(|r| &r.cloud).collect();
        let rc: Vec<&PointCloud> = reference.iter().map(|r| &r.cloud).collect();
        let cfg = MetricConfig { emd_mode: EmdMode::Exact, emd_max_points: None, jsd_resolution: 4 + rng.below(28), threshold: 0.5, workers: Some(2) };
        let rep = evaluate(&gen.iter().collect::<Vec<_>>(), &reference.iter().collect::<Vec<_>>(), None, &cfg).unwrap();

        for (a, b) in gc.iter().zip(&rc) {
            let (lib, ora) = (chamfer(a, b).unwrap(), oracle_cd(a, b));
            ensure(close(lib, ora, 1e-12), || format!("trial {trial}: CD {lib} vs {ora}"))?;
            let (lib, ora) = (emd_exact(a, b).unwrap(), oracle_emd(a, b));
            worst_emd = worst_emd.max((lib - ora).abs());
            ensure((lib - ora).abs() <= 1e-9, || format!("trial {trial}: EMD {lib} vs {ora}"))?;
        }
        let cd = oracle_sets(&gc, &rc, &oracle_cd);
        let em = oracle_sets(&gc, &rc, &oracle_emd);
        ensure(close(rep.mmd_cd, cd.mmd, 1e-12), || format!("trial {trial}: MMD-CD {} vs {}", rep.mmd_cd, cd.mmd))?;
        ensure((rep.mmd_emd - em.mmd).abs() <= 1e-9, || format!("trial {trial}: MMD-EMD {} vs {}", rep.mmd_emd, em.mmd))?;
        ensure(rep.cov_cd == cd.cov && rep.cov_emd == em.cov, || format!("trial {trial}: COV {}/{} vs {}/{}", rep.cov_cd, rep.cov_emd, cd.cov, em.cov))?;
        ensure(rep.nna_cd == cd.nna && rep.nna_emd == em.nna, || format!("trial {trial}: 1-NNA {}/{} vs {}/{}", rep.nna_cd, rep.nna_emd, cd.nna, em.nna))?;
        let oj = oracle_jsd(&gc, &rc, cfg.jsd_resolution);
        ensure(close(rep.jsd, oj, 1e-12), || format!("trial {trial}: JSD {} vs {oj}", rep.jsd))?;

        for rec in &gen {
            let pv: Vec<bool> = (0..m).map(|_| rng.uniform() < 0.5).collect();
            let pe: Vec<bool> = (0..m * m).map(|_| rng.uniform() < 0.5).collect();
            let (gv, ge) = (rec.graph.existence(), rec.graph.adjacency());
            ensure(sca(gv, ge, &pv, &pe, m) == oracle_sca(gv, ge, &pv, &pe, m), || format!("trial {trial}: SCA"))?;
        }
        let truth = GroundTruth.predict(&gen.iter().collect::<Vec<_>>()).unwrap();
        ensure(sca_by_code(&gen.iter().collect::<Vec<_>>(), &truth).values().all(|&s| s == 1.0), || "ground-truth SCA below 1".into())?;
    }
    Ok(format!("100 trials, max EMD deviation {worst_emd:.1e}"))
}

// ---------------------------------------------------------------- 5

fn encoder_invariances() -> Check {
    let mc = ModelConfig::desk();
    let (model, store32) = Model::new::<f32>(&mc, 3).unwrap();
    let store64: ParamStore<f64> = store32.cast();
    let (m, d) = (model.m(), model.latent_dim());
    let gcfg = GeneratorConfig { n: 256, ..GeneratorConfig::default() };
    let mut rng = seeded_rng(8);

    let mut worst32: f64 = 0.0;
    let mut worst64: f64 = 0.0;
    for code in ["Ch_0123", "Ch_012", "Ch_13"] {
        let rec = sample_chair(code, &gcfg, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..rec.cloud.len()).collect();
        rng.shuffle(&mut perm);
        let (pc, pg) = (rec.cloud.permuted(&perm), rec.graph.permuted(&perm));
        let eps: Mat<f64> = gaussian(&mut rng, m, d);
        let a = sgn_forward(&model.sgn, &store64, &rec.cloud, &rec.graph, &eps).unwrap();
        let b = sgn_forward(&model.sgn, &store64, &pc, &pg, &eps).unwrap();
        let a32 = sgn_forward(&model.sgn, &store32, &rec.cloud, &rec.graph, &eps.cast()).unwrap();
        let b32 = sgn_forward(&model.sgn, &store32, &pc, &pg, &eps.cast()).unwrap();
        for (x, y, w) in [(&a, &b, &mut worst64), (&a32, &b32, &mut worst32)] {
            for (p, q) in [(&x.mu, &y.mu), (&x.sigma, &y.sigma), (&x.z, &y.z)] {
                *w = w.max(p.zip_map(q, |u, v| u - v).max_abs());
            }
        }
    }
    ensure(worst64 < 1e-6 && worst32 < 1e-6, || format!("permutation changed the posterior by {worst64:.1e} (f64) / {worst32:.1e} (f32)"))?;

    // absent armrest
    let rec = sample_chair("Ch_012", &gcfg, &mut rng).unwrap();
    let absent = 3;
    let batch = GraphBatch::new(&[(&rec.cloud, &rec.graph)]).unwrap();
    let mut t = Tape::<f64>::new();
    let p = store64.bind_frozen(&mut t);
    let (h, alphas) = model.sgn.node_features_traced(&mut t, &p, &batch);
    for (l, layer) in alphas.iter().enumerate() {
        for (hd, &a) in layer.iter().enumerate() {
            let a = t.value(a);
            let into: f64 = (0..m).map(|i| a.get(i, absent)).sum();
            let out: f64 = (0..m).map(|k| a.get(absent, k)).sum();
            ensure(into == 0.0 && out == 0.0, || format!("layer {l} head {hd}: attention mass {into} into / {out} out of the absent part"))?;
            for i in (0..m).filter(|&i| i != absent) {
                let s: f64 = a.row(i).iter().sum();
                ensure((s - 1.0).abs() < 1e-12, || format!("row {i} sums to {s}"))?;
            }
        }
    }
    let eps: Mat<f64> = gaussian(&mut rng, m, d);
    let post = model.sgn.posterior_from_nodes(&mut t, &p, &batch, h, eps.clone());
    for k in 0..d {
        ensure(t.value(post.mu).get(absent, k) == 0.0 && t.value(post.sigma).get(absent, k) == 1.0, || "absent part posterior is not N(0, I)".into())?;
        ensure(t.value(post.z).get(absent, k) == eps.get(absent, k), || "absent part latent is not the raw noise".into())?;
    }

    // reparameterization moments
    let rec = sample_chair("Ch_0123", &gcfg, &mut rng).unwrap();
    let base = sgn_forward(&model.sgn, &store64, &rec.cloud, &rec.graph, &Mat::zeros(m, d)).unwrap();
    let draws = 100_000;
    let batch = GraphBatch::new(&[(&rec.cloud, &rec.graph)]).unwrap();
    let mut t = Tape::<f64>::new();
    let p = store64.bind_frozen(&mut t);
    let h = model.sgn.node_features(&mut t, &p, &batch);
    let big = GraphBatch { batch: draws, existence: batch.existence.repeat(draws), adjacency: batch.adjacency.repeat(draws), points: Vec::new(), seg: Vec::new(), ..batch.clone() };
    let hr = t.gather_rows(h, (0..draws * m).map(|i| i % m).collect());
    let post = model.sgn.posterior_from_nodes(&mut t, &p, &big, hr, gaussian(&mut seeded_rng(9), draws * m, d));
    let z = t.value(post.z);
    let mut worst_se: f64 = 0.0;
    for j in 0..m {
        for k in 0..d {
            let (mu, sigma) = (base.mu.get(j, k), base.sigma.get(j, k));
            let xs: Vec<f64> = (0..draws).map(|s| z.get(s * m + j, k)).collect();
            let mean = xs.iter().sum::<f64>() / draws as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se_mean = sigma / (draws as f64).sqrt();
            let se_var = sigma * sigma * (2.0 / (draws - 1) as f64).sqrt();
            let score = ((mean - mu).abs() / se_mean).max((var - sigma * sigma).abs() / se_var);
            worst_se = worst_se.max(score);
        }
    }
    ensure(worst_se < 3.0, || format!("Monte Carlo moment off by {worst_se:.2} standard errors"))?;
    Ok(format!("permutation drift {worst64:.1e} (f64) / {worst32:.1e} (f32), worst moment {worst_se:.2} SE over {} entries", m * d))
}

// ---------------------------------------------------------------- 6

fn overfit_smoke() -> Check {
    let (manifest, records) = make_dataset(&GeneratorConfig { n: 512, count_per_code: 1, ..GeneratorConfig::default() }).map_err(|e| e.to_string())?;
    let ds = Dataset { manifest, records };
    let cfg = TrainConfig { iterations: 2000, split: TrainSplit::All, log_every: 500, checkpoint_every: 0, ..TrainConfig::default() };
    let run = train(&cfg, &ds, None, |s, v| eprintln!("  [6] step {s} loss {:.4}", v.total)).map_err(|e| e.to_string())?;
    let k = ds.records.len();
    let mut pair = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i != j {
                pair.push(chamfer(&ds.records[i].cloud, &ds.records[j].cloud).unwrap());
            }
        }
    }
    let pair_mean = pair.iter().sum::<f64>() / pair.len() as f64;
    let own: Vec<f64> = ds
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| chamfer(&sample_cloud(&run.model, &run.store, &r.graph, i as u64).unwrap(), &r.cloud).unwrap())
        .collect();
    let own_mean = own.iter().sum::<f64>() / k as f64;
    ensure(own_mean < pair_mean, || format!("mean CD to the matching shape {own_mean:.4} is not below the pairwise mean {pair_mean:.4}"))?;
    Ok(format!("mean CD to own shape {own_mean:.4} < pairwise {pair_mean:.4}"))
}

// ---------------------------------------------------------------- 7

fn structure_control() -> Check {
    let (manifest, records) = make_dataset(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let ds = Dataset { manifest, records };
    let cfg = TrainConfig { iterations: 5000, split: TrainSplit::All, log_every: 500, checkpoint_every: 0, ..TrainConfig::default() };
    let run = train(&cfg, &ds, None, |s, v| eprintln!("  [7] step {s} loss {:.4}", v.total)).map_err(|e| e.to_string())?;
    let pred = AdjacencyPredictor::train(&run.model.sgn, &run.store, &ds.split(Split::Train), &ds.split(Split::Test), &PredictorConfig::default()).map_err(|e| e.to_string())?;
    eprintln!("  [7] predictor held-out accuracy {:.4}", pred.report.heldout_accuracy);
    pred.report.check_gate().map_err(|e| e.to_string())?;
    let mut gen = Vec::new();
    for code in CATALOG_CODES {
        gen.extend(sample_shapes(&run.model, &run.store, &StructureSpec::from_code(code).unwrap(), 20, 512, 7, 1).map_err(|e| e.to_string())?);
    }
    let refs: Vec<&ShapeRecord> = gen.iter().collect();
    let by = sca_by_code(&refs, &pred.predict(&refs).map_err(|e| e.to_string())?);
    let mean = by.values().sum::<f64>() / by.len() as f64;
    let summary = by.iter().map(|(k, v)| format!("{k}={v:.3}")).collect::<Vec<_>>().join(" ");
    eprintln!("  [7] SCA {summary}");
    ensure(mean >= 0.70, || format!("mean SCA {mean:.4} below 0.70 ({summary})"))?;
    let (simple, full) = (by["Ch_012"], by["Ch_0123"]);
    ensure(simple >= full - 0.05, || format!("SCA(Ch_012) {simple:.4} < SCA(Ch_0123) {full:.4} - 0.05"))?;
    Ok(format!("held-out accuracy {:.4}, mean SCA {mean:.4}, Ch_012 {simple:.3} vs Ch_0123 {full:.3}", pred.report.heldout_accuracy))
}

// ---------------------------------------------------------------- 8

fn dir_bytes(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gcfg = GeneratorConfig { n: 256, count_per_code: 2, seed: 11, ..GeneratorConfig::default() };
    let (m1, r1) = make_dataset(&gcfg).unwrap();
    let (m2, r2) = make_dataset(&gcfg).unwrap();
    ensure(r1.iter().map(encode_blob).eq(r2.iter().map(encode_blob)), || "dataset blobs differ".into())?;
    save_dataset(&tmp.path().join("a"), &m1, &r1).unwrap();
    save_dataset(&tmp.path().join("b"), &m2, &r2).unwrap();
    ensure(dir_bytes(&tmp.path().join("a")) == dir_bytes(&tmp.path().join("b")), || "dataset directories differ".into())?;
    let ds = Dataset { manifest: m1, records: r1 };

    let tc = TrainConfig { iterations: 12, log_every: 1, checkpoint_every: 0, batch_size: 4, train_points: Some(64), split: TrainSplit::All, ..TrainConfig::default() };
    let curve = || {
        let mut log = Vec::new();
        let run = train(&tc, &ds, None, |s, v| log.push((s, v.total.to_bits(), v.prior.to_bits(), v.diffusion.to_bits()))).unwrap();
        (run, log)
    };
    let (run, c1) = curve();
    let (_, c2) = curve();
    ensure(c1.len() == 12 && c1 == c2, || "loss curves differ between identical runs".into())?;

    let spec = StructureSpec::from_code("Ch_013").unwrap();
    let ply = |workers| sample_shapes(&run.model, &run.store, &spec, 3, 128, 5, workers).unwrap().iter().map(encode_ply).collect::<Vec<_>>();
    let (p1, p2, p3) = (ply(1), ply(1), ply(2));
    ensure(p1 == p2 && p1 == p3, || "sampled PLY bytes differ".into())?;

    let ck = tmp.path().join("g.sgck");
    save_generator(&ck, &run.model, &run.store, Some(&tc)).unwrap();
    let (model2, store2) = load_generator(&ck).unwrap();
    let rec = &ds.records[0];
    let eps: Mat<f32> = gaussian(&mut seeded_rng(3), run.model.m(), run.model.latent_dim());
    let a = sgn_forward(&run.model.sgn, &run.store, &rec.cloud, &rec.graph, &eps).unwrap();
    let b = sgn_forward(&model2.sgn, &store2, &rec.cloud, &rec.graph, &eps).unwrap();
    let mut diff = a.z.zip_map(&b.z, |x, y| x - y).max_abs().max(a.sigma.zip_map(&b.sigma, |x, y| x - y).max_abs());
    let z: Vec<f64> = (0..run.model.latent_dim()).map(|k| a.z.get(0, k)).collect();
    let e_row = rec.graph.adjacency()[..run.model.m()].to_vec();
    let fa = flow_forward(&run.model.flow, &run.store, &z, true, &e_row, 0).unwrap();
    let fb = flow_forward(&model2.flow, &store2, &z, true, &e_row, 0).unwrap();
    diff = diff.max((fa.delta_logdet - fb.delta_logdet).abs());
    diff = diff.max(fa.w.iter().zip(&fb.w).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    let batch: Vec<&ShapeRecord> = ds.records.iter().take(3).collect();
    let noise: LossNoise<f32> = LossNoise::draw(&run.model, &batch, Some(64), &mut seeded_rng(4));
    let loss = |model: &Model, store: &ParamStore<f32>| {
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        total_loss(model, &mut t, &p, &batch, &noise, tc.lambda).unwrap().values(&t)
    };
    let (la, lb) = (loss(&run.model, &run.store), loss(&model2, &store2));
    diff = diff.max((la.total - lb.total).abs());
    let ca = sample_cloud(&run.model, &run.store, &rec.graph, 9).unwrap();
    let cb = sample_cloud(&model2, &store2, &rec.graph, 9).unwrap();
    diff = diff.max(ca.points().iter().flatten().zip(cb.points().iter().flatten()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max));
    ensure(diff <= 1e-6, || format!("checkpoint round trip changed outputs by {diff:.2e}"))?;
    Ok(format!("{} log points, {} PLY files identical, checkpoint drift {diff:.1e}", c1.len(), p1.len()))
}
