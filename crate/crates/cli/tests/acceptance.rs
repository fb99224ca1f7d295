//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs without the libtest harness so lines appear in order.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use creepformer::checkpoint::Checkpoint;
use creepformer::data::{creep_at, fit_creep_curve, standardize, synth_generate, NormStats, PreparedData, SplitMode, Window};
use creepformer::explain::{shapley, Explainer};
use creepformer::infer::evaluate_teacher_forced;
use creepformer::model::{build_attention_mask, count_flops, count_params};
use creepformer::train::{run_ablation_suite, train};
use creepformer::{AblationSpec, AblationVariant, BatchInput, BatchScope, SequenceRow, TataConfig, TataModel, TrainConfig};
use creepformer_cli::service::{router, AppState, Loaded, PredictResponse};
use creepformer_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tower::ServiceExt;

type Verdict = (bool, String);

const REFERENCE_PARAMS: f64 = 2_131_618.0;
const REFERENCE_ENCODER_SHARE: f64 = 99.77;

fn toy() -> TataConfig {
    TataConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        hidden_dim: 8,
        d_intermediate: 4,
        ..TataConfig::default()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, lengths: &[usize]) -> BatchInput {
    let data: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = lengths
        .iter()
        .map(|&l| {
            let creep = (0..l).map(|_| rng.random_range(0.0..2.0)).collect();
            let time = (1..=l).map(|d| (d as f64).ln_1p()).collect();
            let feats = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            (creep, time, feats)
        })
        .collect();
    let rows: Vec<SequenceRow<'_>> = data
        .iter()
        .map(|(c, t, f)| SequenceRow {
            creep: c,
            time: t,
            features: f,
        })
        .collect();
    BatchInput::from_rows(&rows, None).unwrap()
}

/// `Σ w ⊙ y` with fixed random weights, so no gradient direction cancels.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// Worst relative L2 error between reverse-mode and central-difference
/// gradients over every input of `build`.
fn gradcheck(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let h = 1e-5;
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::training(7);
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::training(7);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map_or_else(|| vec![0.0; inputs[k].len()], <[f64]>::to_vec);
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let n = (eval(&plus) - eval(&minus)) / (2.0 * h);
            d2 += (a - n) * (a - n);
            a2 += a * a;
            n2 += n * n;
        }
        let denom = f64::max(a2.sqrt(), n2.sqrt());
        worst = worst.max(if denom > 1e-12 { d2.sqrt() / denom } else { d2.sqrt() });
    }
    worst
}

fn parameter_accounting() -> Verdict {
    let n = count_params(&TataConfig::default(), &AblationSpec::full()) as f64;
    let dev = 100.0 * (n - REFERENCE_PARAMS) / REFERENCE_PARAMS;
    (dev.abs() <= 5.0, format!("{n} params, {dev:+.2}% vs 2,131,618 (tol ±5%)"))
}

fn flops_accounting() -> Verdict {
    let t = count_flops(&TataConfig::default(), &AblationSpec::full(), 160, 1);
    let enc = t.share("encoder_layers");
    let front = t.share("embeddings") + t.share("positional_encoding");
    let ok = enc >= 99.0 && (enc - REFERENCE_ENCODER_SHARE).abs() <= 0.8 && front < 0.1;
    (ok, format!("encoder share {enc:.3}% (≥99.0, within 0.8 of 99.77), embeddings+PE {front:.4}% (<0.1)"))
}

fn gradient_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut prim: Vec<(&str, f64)> = Vec::new();
    let ins = [rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[5, 4]), rand_tensor(&mut rng, &[5])];
    prim.push(("affine", gradcheck(&ins, |g, v| {
        let y = g.affine(v[0], v[1], Some(v[2])).unwrap();
        probe(g, y, 1)
    })));
    let ins = [rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[2, 6, 4])];
    prim.push(("matmul", gradcheck(&ins, |g, v| {
        let a = g.matmul(v[0], v[1]).unwrap();
        let b = g.matmul_nt(v[0], v[2]).unwrap();
        let a = probe(g, a, 2);
        let b = probe(g, b, 3);
        g.add(a, b).unwrap()
    })));
    let mask = Tensor::new([2, 1, 1, 4], vec![0., 0., 0., 1., 0., 1., 1., 1.]).unwrap();
    let ins = [rand_tensor(&mut rng, &[2, 2, 3, 4])];
    prim.push(("masked_softmax", gradcheck(&ins, |g, v| {
        let y = g.masked_softmax(v[0], Some(&mask)).unwrap();
        probe(g, y, 4)
    })));
    let ins = [rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[5])];
    prim.push(("layer_norm", gradcheck(&ins, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        probe(g, y, 5)
    })));
    let ins = [rand_tensor(&mut rng, &[4, 6])];
    prim.push(("relu/tanh/dropout", gradcheck(&ins, |g, v| {
        let a = g.relu(v[0]);
        let b = g.tanh(v[0]);
        let c = g.dropout(v[0], 0.4).unwrap();
        let s = g.add(a, b).unwrap();
        let s = g.add(s, c).unwrap();
        probe(g, s, 6)
    })));
    let ins = [rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 3, 2]), rand_tensor(&mut rng, &[3, 1])];
    prim.push(("shape ops", gradcheck(&ins, |g, v| {
        let c = g.concat(&[v[0], v[1]], 2).unwrap();
        let p = g.permute(c, &[2, 0, 1]).unwrap();
        let r = g.reshape(p, &[6, 6]).unwrap();
        let s = g.select(c, &[2, 0]).unwrap();
        let bc = g.mul(c, v[2]).unwrap();
        let d = g.sub(bc, c).unwrap();
        let sc = g.scale(d, 0.7);
        let m = g.mean(sc).unwrap();
        let a = probe(g, r, 7);
        let b = probe(g, s, 8);
        let t = g.add(a, b).unwrap();
        g.add(t, m).unwrap()
    })));
    let worst_prim = prim.iter().map(|p| p.1).fold(0.0, f64::max);

    let model = TataModel::new(TataConfig { dropout: 0.1, ..toy() }, AblationSpec::full(), 22).unwrap();
    let batch = random_batch(&mut rng, &[6, 4]);
    let loss_of = |m: &TataModel, g: &mut Graph| -> (Var, Vec<Var>) {
        let p = m.bind(g, true);
        let y = m.forward(g, &p, &batch, BatchScope::Joint).unwrap();
        (probe(g, y, 9), p.vars().to_vec())
    };
    let mut g = Graph::training(99);
    let (loss, vars) = loss_of(&model, &mut g);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(model.params())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let eval = |m: &TataModel| {
        let mut g = Graph::training(99);
        let (loss, _) = loss_of(m, &mut g);
        g.value(loss).item()
    };
    let h = 1e-5;
    let mut work = model.clone();
    let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for k in 0..model.params().len() {
        for i in 0..model.params()[k].len() {
            let orig = work.params()[k].data()[i];
            work.params_mut()[k].data_mut()[i] = orig + h;
            let up = eval(&work);
            work.params_mut()[k].data_mut()[i] = orig - h;
            let down = eval(&work);
            work.params_mut()[k].data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            d2 += (num - analytic[k][i]).powi(2);
            a2 += analytic[k][i].powi(2);
            n2 += num * num;
        }
    }
    let full = d2.sqrt() / f64::max(a2.sqrt(), n2.sqrt());
    (
        worst_prim < 1e-6 && full < 1e-5,
        format!("worst primitive rel err {worst_prim:.2e} (<1e-6), full toy model {full:.2e} (<1e-5, {} params)", model.num_params()),
    )
}

fn masking_invariance() -> Verdict {
    let m = TataModel::new(toy(), AblationSpec::full(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let base = random_batch(&mut rng, &[7, 3, 5, 1]);
    let t = base.seq_len();
    let reference = m.predict_scoped(&base, BatchScope::Joint).unwrap();
    let mut worst_pad = 0.0f64;
    let mut worst_dist = 0.0f64;
    let mut leaked = 0.0f64;
    for trial in 0..5 {
        let mut b = base.clone();
        for (i, &l) in base.lengths.iter().enumerate() {
            for k in l..t {
                b.creep_hist.data_mut()[i * t + k] = rng.random_range(-50.0..50.0) * (trial + 1) as f64;
                b.time_hist.data_mut()[i * t + k] = rng.random_range(-50.0..50.0);
            }
        }
        let out = m.predict_scoped(&b, BatchScope::Joint).unwrap();
        worst_pad = out.iter().zip(&reference).map(|(a, r)| (a - r).abs()).fold(worst_pad, f64::max);

        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let enc = m.encode_sequence(&mut g, &p, &b).unwrap();
        let pooled = m.hybrid_pool(&mut g, &p, enc, &b).unwrap();
        let alpha = g.value(pooled.attn_weights.unwrap());
        for (i, &l) in b.lengths.iter().enumerate() {
            let row = &alpha.data()[i * t..(i + 1) * t];
            worst_dist = worst_dist.max((row.iter().sum::<f64>() - 1.0).abs());
            leaked = row[l..].iter().fold(leaked, |acc, v| acc.max(v.abs()));
        }
        let x = g.constant(rand_tensor(&mut rng, &[4, t, 8]));
        let mask = build_attention_mask(&b.lengths, 4, t).unwrap();
        let att = m.self_attention(&mut g, &p, 0, x, &mask).unwrap();
        let w = g.value(att.weights);
        let heads = w.shape()[1];
        for i in 0..4 {
            for h in 0..heads {
                for q in 0..t {
                    let off = ((i * heads + h) * t + q) * t;
                    let row = &w.data()[off..off + t];
                    worst_dist = worst_dist.max((row.iter().sum::<f64>() - 1.0).abs());
                    leaked = row[b.lengths[i]..].iter().fold(leaked, |acc, v| acc.max(v.abs()));
                }
            }
        }
    }

    // Constant valid rows: every pooling method returns that row.
    let batch = random_batch(&mut rng, &[6, 4]);
    let (b, t, d) = (2, 6, 8);
    let v: Vec<Vec<f64>> = (0..b).map(|_| rand_tensor(&mut rng, &[d]).into_data()).collect();
    let mut enc = vec![0.0; b * t * d];
    for i in 0..b {
        for k in 0..t {
            let fill = if k < batch.lengths[i] { v[i].clone() } else { rand_tensor(&mut rng, &[d]).into_data() };
            enc[(i * t + k) * d..(i * t + k + 1) * d].copy_from_slice(&fill);
        }
    }
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let e = g.constant(Tensor::new([b, t, d], enc).unwrap());
    let pooled = m.hybrid_pool(&mut g, &p, e, &batch).unwrap();
    let mut degeneracy = 0.0f64;
    for part in [pooled.mean, pooled.attn, pooled.last] {
        let got = g.value(part.unwrap()).data();
        for i in 0..b {
            for c in 0..d {
                degeneracy = degeneracy.max((got[i * d + c] - v[i][c]).abs());
            }
        }
    }
    let ok = worst_pad <= 1e-10 && worst_dist < 1e-12 && leaked == 0.0 && degeneracy < 1e-12;
    (
        ok,
        format!(
            "padding perturbation Δ {worst_pad:.1e} (≤1e-10), weight-sum err {worst_dist:.1e}, masked weight max {leaked:.1e}, constant-pool err {degeneracy:.1e}"
        ),
    )
}

fn curve_standardization() -> Verdict {
    let days: Vec<f64> = [0.0, 1.0, 2.0, 3.0, 5.0, 7.0, 14.0, 21.0, 28.0, 42.0, 56.0, 84.0, 112.0, 140.0, 168.0].to_vec();
    let mut worst = 0.0f64;
    for &(a, b, c) in &[(800.0, 0.1, 0.7), (1500.0, 0.05, 0.9), (400.0, 0.2, 0.5), (1000.0, 0.08, 1.1)] {
        let y: Vec<f64> = days.iter().map(|&t| creep_at(a, b, c, t).unwrap()).collect();
        let p = fit_creep_curve(&days, &y).unwrap();
        for (got, want) in [(p.a, a), (p.b, b), (p.c, c)] {
            worst = worst.max(((got - want) / want).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut r2 = Vec::with_capacity(100);
    for _ in 0..100 {
        let (a, b, c) = (rng.random_range(300.0..1500.0), rng.random_range(0.05..0.15), rng.random_range(0.5..1.0));
        let y: Vec<f64> = days
            .iter()
            .map(|&t| creep_at(a, b, c, t).unwrap() * (1.0 + noise.sample(&mut rng)))
            .collect();
        r2.push(fit_creep_curve(&days, &y).map(|p| p.r2).unwrap_or(f64::NEG_INFINITY));
    }
    r2.sort_by(f64::total_cmp);
    let median = 0.5 * (r2[49] + r2[50]);
    (
        worst < 1e-6 && median >= 0.99,
        format!("noiseless rel err {worst:.1e} (<1e-6), 2% noise median R² {median:.5} over 100 trials (≥0.99)"),
    )
}

fn dataset_arithmetic() -> Verdict {
    let specimens = standardize(&synth_generate(66, 2024)).unwrap();
    let data = PreparedData::new(specimens, SplitMode::PerWindow, 42).unwrap();
    let s = &data.splits;
    let total = s.train.len() + s.val.len() + s.test.len();
    let ok = total == 10_560 && (s.train.len(), s.val.len(), s.test.len()) == (9504, 528, 528);
    (ok, format!("{total} windows split {}/{}/{} (want 10560 → 9504/528/528)", s.train.len(), s.val.len(), s.test.len()))
}

fn end_to_end_training() -> Verdict {
    let start = Instant::now();
    let specimens = standardize(&synth_generate(66, 2024)).unwrap();
    let data = PreparedData::new(specimens, SplitMode::PerSpecimen, 2024).unwrap();
    let mut model = TataModel::new(TataConfig::reduced(64, 2, 4), AblationSpec::full(), 7).unwrap();
    let cfg = TrainConfig {
        max_epochs: 60,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &cfg, |m| {
        eprintln!(
            "    epoch {:>2}  train {:.3e}  val {:.3e}  val MAPE {:.3}%  lr {:.2e}  {:.0}s",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.val_mape,
            m.lr,
            start.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    let ev = evaluate_teacher_forced(&model, &data.stats, &data.series, &data.splits.val).unwrap();
    let first = report.metrics[0].train_loss;
    let last = report.metrics.last().unwrap().train_loss;
    let min = report.metrics.iter().map(|m| m.train_loss).fold(f64::INFINITY, f64::min);
    let decline = first / min;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let ok = ev.mape <= 5.0 && ev.r2 >= 0.98 && decline >= 10.0 && report.metrics.len() <= 60 && minutes < 30.0;
    (
        ok,
        format!(
            "val MAPE {:.3}% (≤5), R² {:.5} (≥0.98), train loss {first:.2e}→{last:.2e} (best {min:.2e}, {decline:.1}× ≥10×), {} epochs, {minutes:.1} min (<30)",
            ev.mape,
            ev.r2,
            report.metrics.len()
        ),
    )
}

fn ablation_protocol() -> Verdict {
    let specimens = standardize(&synth_generate(20, 5)).unwrap();
    let data = PreparedData::new(specimens, SplitMode::PerSpecimen, 5).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let rows = run_ablation_suite(&data, &toy(), &cfg, |_| {}).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.variant).collect();
    let want = [
        "w/o Mean pooling",
        "w/o Attention pooling",
        "w/o Last Token pooling",
        "w/o Feature attention",
        "w/o Batch attention",
        "Proposed Model",
    ];
    let full = rows.last().map(|r| r.params).unwrap_or(0);
    let smaller = rows[..rows.len() - 1].iter().all(|r| r.params < full);
    let default_smaller = AblationVariant::ALL[..5]
        .iter()
        .all(|v| count_params(&TataConfig::default(), &v.spec()) < count_params(&TataConfig::default(), &AblationSpec::full()));
    let finite = rows.iter().all(|r| r.val_mape.is_finite());
    (
        labels == want && smaller && default_smaller && finite,
        format!(
            "{} rows, labels match: {}, ablated params {:?} < {full}",
            rows.len(),
            labels == want,
            rows[..rows.len() - 1].iter().map(|r| r.params).collect::<Vec<_>>()
        ),
    )
}

fn shapley_axioms() -> Verdict {
    let bg = vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.0, -1.0], vec![-0.5, 3.0, 0.5]];
    let w = [0.7, -1.3, 2.1];
    let x = [1.0, 2.0, -0.5];
    let lin = shapley(|rows| Ok(rows.iter().map(|z| z.iter().zip(&w).map(|(a, b)| a * b).sum()).collect()), &x, &bg).unwrap();
    let mut linear_err = 0.0f64;
    for j in 0..3 {
        let mean = bg.iter().map(|b| b[j]).sum::<f64>() / 3.0;
        linear_err = linear_err.max((lin.phi[j] - w[j] * (x[j] - mean)).abs());
    }
    let f = |z: &[f64]| ((z[0] + z[1]) * 0.7).sin();
    let sym_bg = vec![vec![0.1, 0.1, 1.0], vec![-0.4, -0.4, 2.0]];
    let s = shapley(|rows| Ok(rows.iter().map(|z| f(z)).collect()), &[0.9, 0.9, 5.0], &sym_bg).unwrap();
    let symmetry = (s.phi[0] - s.phi[1]).abs();
    let dummy = s.phi[2].abs();

    let specimens = standardize(&synth_generate(20, 9)).unwrap();
    let data = PreparedData::new(specimens, SplitMode::PerSpecimen, 9).unwrap();
    let model = TataModel::new(toy(), AblationSpec::full(), 9).unwrap();
    let ex = Explainer::new(&model, &data.stats, &data.training_features(), 9).unwrap();
    let raw: Vec<[f64; 3]> = data.specimens.iter().map(|s| s.features).collect();
    let windows: Vec<Window> = data.splits.val.iter().step_by(8).copied().collect();
    let samples = ex.explain_windows(&data.series, &raw, &windows).unwrap();
    let efficiency = samples.iter().map(|s| (s.shap.total() - s.prediction).abs()).fold(0.0, f64::max);
    let ok = linear_err < 1e-12 && symmetry < 1e-12 && dummy < 1e-15 && efficiency < 1e-10;
    (
        ok,
        format!(
            "efficiency max {efficiency:.1e} over {} samples (<1e-10), linear closed form {linear_err:.1e}, symmetry {symmetry:.1e}, dummy {dummy:.1e}",
            samples.len()
        ),
    )
}

fn service_contract() -> Verdict {
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let stats = NormStats::fit([&[2300.0, 350.0, 2.8e5], &[2400.0, 450.0, 3.3e5]]).unwrap();
        let model = TataModel::new(toy(), AblationSpec::full(), 3).unwrap();
        let state = AppState::default();
        let app = router(state.clone());
        let call = |days: serde_json::Value| {
            let app = app.clone();
            async move {
                let body = serde_json::json!({
                    "density_kg_m3": 2350.0, "fc_ksc": 400.0, "e_ksc": 300000.0,
                    "initial_creep_microstrain": 100.0, "days": days,
                });
                let req = Request::post("/predict")
                    .header("content-type", "application/json")
                    .body(Body::from(body.to_string()))
                    .unwrap();
                let resp = app.oneshot(req).await.unwrap();
                let status = resp.status();
                (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap())
            }
        };
        let before = call(10.into()).await.0;
        state.install(Loaded::new(Checkpoint { model, stats }, None));
        let (s161, body) = call(161.into()).await;
        let len = serde_json::from_slice::<PredictResponse>(&body).map(|r| r.creep.len()).unwrap_or(0);
        let (s162, _) = call(162.into()).await;
        let (sbad, _) = call("ten".into()).await;
        let (_, a) = call(30.into()).await;
        let (_, b) = call(30.into()).await;
        let ok = before == StatusCode::SERVICE_UNAVAILABLE
            && s161 == StatusCode::OK
            && len == 161
            && s162 == StatusCode::BAD_REQUEST
            && sbad == StatusCode::BAD_REQUEST
            && a == b;
        (
            ok,
            format!(
                "before load {}, days=161 → {} ({len} points), days=162 → {}, malformed → {}, repeat identical: {}",
                before.as_u16(),
                s161.as_u16(),
                s162.as_u16(),
                sbad.as_u16(),
                a == b
            ),
        )
    })
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("parameter accounting", parameter_accounting),
        ("FLOPs accounting", flops_accounting),
        ("gradient suite", gradient_suite),
        ("masking/pooling invariance", masking_invariance),
        ("curve standardization", curve_standardization),
        ("dataset arithmetic", dataset_arithmetic),
        ("ablation protocol", ablation_protocol),
        ("Shapley axioms", shapley_axioms),
        ("service contract", service_contract),
        ("end-to-end training", end_to_end_training),
    ];
    // Optional name filters: `cargo test --test acceptance -- gradient`.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<_> = criteria
        .into_iter()
        .filter(|(name, _)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())))
        .collect();
    let total = selected.len();
    let mut failed = 0;
    for (name, check) in selected {
        let start = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        if !ok {
            failed += 1;
        }
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {total} criteria passed", total - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
