//! Checks shared by the focused integration tests and the acceptance run.
//! Each returns a short detail string on success and a description of the
//! first violation on failure.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use nirgan::backbone::{
    ffe_forward_embedding, ffe_forward_spatial, init_ffe_params, pretrain_ffe, Bottleneck, FfeConfig,
    LabeledFaceSet, PretrainOptions,
};
use nirgan::data::{
    generate_synthetic_dataset, make_split, Domain, PairedImages, PairedSample, PoseTag, SyntheticSpec,
};
use nirgan::discriminator::{discriminate, init_discriminator_params, DiscriminatorConfig};
use nirgan::evaluation::{evaluate_protocol, rank1, tar_at_far, ScoreMatrix};
use nirgan::generator::{
    generate, generator_forward, init_generator_params, translate_module, EncoderKind, GeneratorConfig,
};
use nirgan::losses::{
    cycle_loss, cycle_node, lsgan_discriminator_node, lsgan_generator_node, lsgan_loss_discriminator,
    lsgan_loss_generator, pixel_consistency_loss, pixel_consistency_node, total_objective, LossWeights,
    ObjectiveTerms,
};
use nirgan::tensor::{Binder, Graph, NodeId, ParameterSet, Tensor};
use nirgan::training::{train_loop, Ablation, LogRecord, TrainState};
use nirgan::Config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> std::result::Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{name}: got {got}, want {want} (tol {tol})"))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("valid literal")
}

fn full(shape: &[usize], v: f64) -> Tensor<f64> {
    Tensor::full(shape.to_vec(), v)
}

// ---------------------------------------------------------------- losses ---

/// Hand-evaluated loss values, each compared at 1e-6.
pub fn loss_oracles() -> Check {
    const TOL: f64 = 1e-6;
    let s = [1, 1, 2, 2];
    close("D: real≡1 fake≡0", lsgan_loss_discriminator(&full(&s, 1.0), &full(&s, 0.0)).unwrap(), 0.0, TOL)?;
    close("D: real≡fake≡0.5", lsgan_loss_discriminator(&full(&s, 0.5), &full(&s, 0.5)).unwrap(), 0.5, TOL)?;
    let pair = [1, 1, 1, 2];
    close(
        "D: [0.9,1.1] vs [0.3,-0.1]",
        lsgan_loss_discriminator(&t(&pair, &[0.9, 1.1]), &t(&pair, &[0.3, -0.1])).unwrap(),
        0.06,
        TOL,
    )?;
    close("G: fake≡1", lsgan_loss_generator(&full(&s, 1.0)).unwrap(), 0.0, TOL)?;
    close("G: fake≡0", lsgan_loss_generator(&full(&s, 0.0)).unwrap(), 1.0, TOL)?;
    close("G: [0.2,0.6]", lsgan_loss_generator(&t(&pair, &[0.2, 0.6])).unwrap(), 0.4, TOL)?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = [2, 3, 4, 4];
    let x = Tensor::<f64>::uniform(img.to_vec(), -1.0, 1.0, &mut rng);
    let y = Tensor::<f64>::uniform(img.to_vec(), -1.0, 1.0, &mut rng);
    close("cyc: perfect", cycle_loss(&x, &x, &y, &y).unwrap(), 0.0, TOL)?;
    close("cyc: +0.5 offset", cycle_loss(&x, &x.map(|v| v + 0.5), &y, &y).unwrap(), 0.5, TOL)?;
    let base = t(&s, &[0.0, 0.0, 0.0, 0.0]);
    let rec = t(&s, &[0.1, -0.3, 0.0, 0.2]);
    close("cyc: 2×2 diffs", cycle_loss(&base, &rec, &base, &base).unwrap(), 0.15, TOL)?;

    close("pc: exact", pixel_consistency_loss(&x, &x, &y, &y).unwrap(), 0.0, TOL)?;
    close(
        "pc: both off by 0.2",
        pixel_consistency_loss(&x.map(|v| v + 0.2), &x, &y.map(|v| v - 0.2), &y).unwrap(),
        0.4,
        TOL,
    )?;
    let z = t(&pair, &[0.0, 0.0]);
    close(
        "pc: {0.4,0} and {0.1,0.1}",
        pixel_consistency_loss(&t(&pair, &[0.4, 0.0]), &z, &t(&pair, &[0.1, -0.1]), &z).unwrap(),
        0.3,
        TOL,
    )?;

    let w = LossWeights::default();
    close("weights default λ", w.lambda_cyc, 1.0, 0.0)?;
    close("weights default γ", w.gamma_pc, 10.0, 0.0)?;
    let terms = ObjectiveTerms {
        adv_g: 0.5,
        adv_f: 0.5,
        cyc: 2.0,
        pc: 0.3,
    };
    close("total (0.5,0.5,2,0.3)", total_objective(&terms, &w).unwrap(), 6.0, TOL)?;
    close("total zeros", total_objective(&ObjectiveTerms::default(), &w).unwrap(), 0.0, TOL)?;
    let no_pc = LossWeights { gamma_pc: 0.0, ..w };
    close("total γ=0 is the plain objective", total_objective(&terms, &no_pc).unwrap(), 3.0, TOL)?;
    for c in [0.0, 1.0, 2.0] {
        let scaled = ObjectiveTerms { pc: 0.3 * c, ..terms };
        let contribution = total_objective(&scaled, &w).unwrap() - total_objective(&terms, &no_pc).unwrap();
        close(&format!("pc homogeneity c={c}"), contribution, w.gamma_pc * 0.3 * c, TOL)?;
    }
    ensure(
        total_objective(&terms, &LossWeights { lambda_cyc: -1.0, gamma_pc: 10.0 }).is_err(),
        || "negative weight accepted".into(),
    )?;

    // Non-negativity and direction symmetry on random inputs.
    for k in 0..20 {
        let a: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::uniform(img.to_vec(), -2.0, 2.0, &mut rng))
            .collect();
        let cyc = cycle_loss(&a[0], &a[1], &a[2], &a[3]).unwrap();
        let cyc_swapped = cycle_loss(&a[2], &a[3], &a[0], &a[1]).unwrap();
        let pc = pixel_consistency_loss(&a[0], &a[1], &a[2], &a[3]).unwrap();
        let pc_swapped = pixel_consistency_loss(&a[2], &a[3], &a[0], &a[1]).unwrap();
        close(&format!("cyc symmetry #{k}"), cyc, cyc_swapped, 1e-12)?;
        close(&format!("pc symmetry #{k}"), pc, pc_swapped, 1e-12)?;
        let d = lsgan_loss_discriminator(&a[0], &a[1]).unwrap();
        let g = lsgan_loss_generator(&a[0]).unwrap();
        ensure(cyc >= 0.0 && pc >= 0.0 && d >= 0.0 && g >= 0.0, || format!("negative loss #{k}"))?;
    }
    Ok("15 hand-computed values at 1e-6, homogeneity, symmetry, non-negativity".into())
}

// ------------------------------------------------------------- gradients ---

const FD_STEP: f64 = 1e-4;
/// Whole networks contain many ReLUs after instance normalization; a 1e-4
/// perturbation can straddle a kink, so they use a finer step (f64 keeps the
/// quotient's round-off near 1e-10).
const NET_FD_STEP: f64 = 1e-6;
const FD_REL: f64 = 1e-3;
/// Below this absolute gap the comparison is dominated by f64 round-off in
/// the difference quotient.
const FD_ABS: f64 = 1e-7;

fn compare(what: &str, analytic: f64, numeric: f64) -> std::result::Result<(), String> {
    let gap = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    ensure(gap <= FD_REL * scale || gap <= FD_ABS, || {
        format!("{what}: analytic {analytic:.8e} vs numeric {numeric:.8e}")
    })
}

/// d(build)/d(inputs) against central differences over every input element.
fn check_inputs(
    what: &str,
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> std::result::Result<usize, String> {
    let eval = |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<_> = vals.iter().map(|v| g.constant(v.clone())).collect();
        let out = build(&mut g, &ids);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]).ok_or_else(|| format!("{what}: no gradient for input {k}"))?;
        for i in 0..input.numel() {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[i] += FD_STEP;
            let up = eval(&vals);
            vals[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&vals);
            compare(&format!("{what} input {k}[{i}]"), analytic.data()[i], (up - down) / (2.0 * FD_STEP))?;
            checked += 1;
        }
    }
    Ok(checked)
}

/// Fixed random linear functional of `x`, so every output element matters.
fn project(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::<f64>::randn(vec![1, n], 1.0, &mut rng);
    let flat = g.reshape(x, vec![1, n]).unwrap();
    let w = g.constant(w);
    let y = g.linear(flat, w, None).unwrap();
    g.mean(y)
}

/// Network gradients w.r.t. the input image and a sample of parameter
/// coordinates (up to `per_tensor` from every parameter tensor).
fn check_network(
    what: &str,
    params: &ParameterSet<f64>,
    input: &Tensor<f64>,
    per_tensor: usize,
    forward: &dyn Fn(&mut Graph<f64>, &mut Binder<'_, f64>, NodeId) -> NodeId,
) -> std::result::Result<usize, String> {
    let eval = |p: &ParameterSet<f64>, x: &Tensor<f64>| {
        let mut g = Graph::new();
        let mut b = Binder::frozen(p);
        let xi = g.constant(x.clone());
        let y = forward(&mut g, &mut b, xi);
        let s = project(&mut g, y, 99);
        g.scalar(s)
    };
    let mut g = Graph::new();
    let mut b = Binder::trainable(params);
    let xi = g.leaf(input.clone());
    let y = forward(&mut g, &mut b, xi);
    let s = project(&mut g, y, 99);
    let mut grads = g.backward(s).map_err(|e| e.to_string())?;
    let input_grad = grads.get(xi).ok_or_else(|| format!("{what}: no input gradient"))?.clone();
    let param_grads = b.collect(&mut grads);
    let mut checked = 0;
    for i in 0..input.numel() {
        let mut x = input.clone();
        x.data_mut()[i] += NET_FD_STEP;
        let up = eval(params, &x);
        x.data_mut()[i] -= 2.0 * NET_FD_STEP;
        let down = eval(params, &x);
        compare(&format!("{what} input[{i}]"), input_grad.data()[i], (up - down) / (2.0 * NET_FD_STEP))?;
        checked += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, value) in params.iter() {
        let grad = param_grads
            .get(name)
            .ok_or_else(|| format!("{what}: no gradient for parameter {name}"))?;
        for _ in 0..per_tensor.min(value.numel()) {
            let i = rng.gen_range(0..value.numel());
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += NET_FD_STEP;
            let up = eval(&p, input);
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * NET_FD_STEP;
            let down = eval(&p, input);
            compare(&format!("{what} {name}[{i}]"), grad.data()[i], (up - down) / (2.0 * NET_FD_STEP))?;
            checked += 1;
        }
    }
    Ok(checked)
}

/// Smallest extractor satisfying the 128-channel stride-4 tap contract.
pub fn tiny_ffe(input_resolution: usize) -> FfeConfig {
    FfeConfig {
        input_resolution,
        stem_channels: 4,
        bottleneck_spec: vec![
            Bottleneck {
                expansion: 1,
                channels: 8,
                repeats: 1,
                stride: 2,
            },
            Bottleneck {
                expansion: 1,
                channels: 128,
                repeats: 1,
                stride: 1,
            },
        ],
        spatial_tap_stage: 1,
        head_channels: 8,
        embedding_dim: 4,
    }
}

pub fn tiny_generator(encoder: EncoderKind) -> GeneratorConfig {
    GeneratorConfig {
        encoder,
        translator_blocks: 1,
        translator_channels: if encoder == EncoderKind::Ffe { 128 } else { 8 },
        decoder_channels: vec![6, 4],
        output_channels: 3,
        basic_encoder_channels: vec![4, 6],
    }
}

pub fn loss_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = vec![1, 1, 4, 4];
    let r = |rng: &mut ChaCha8Rng| Tensor::<f64>::uniform(shape.clone(), -1.0, 1.0, rng);
    let mut n = 0;
    let (a, b, c, d) = (r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng));
    n += check_inputs("lsgan D", &[a.clone(), b.clone()], &|g, ids| {
        lsgan_discriminator_node(g, ids[0], ids[1]).unwrap()
    })?;
    n += check_inputs("lsgan G", std::slice::from_ref(&a), &|g, ids| lsgan_generator_node(g, ids[0]))?;
    let four = [a, b, c, d];
    n += check_inputs("cycle", &four, &|g, ids| cycle_node(g, ids[0], ids[1], ids[2], ids[3]).unwrap())?;
    n += check_inputs("pixel consistency", &four, &|g, ids| {
        pixel_consistency_node(g, ids[0], ids[1], ids[2], ids[3]).unwrap()
    })?;
    n += check_inputs("weighted total", &four, &|g, ids| {
        let adv = lsgan_generator_node(g, ids[0]);
        let cyc = cycle_node(g, ids[0], ids[1], ids[2], ids[3]).unwrap();
        let pc = pixel_consistency_node(g, ids[1], ids[2], ids[3], ids[0]).unwrap();
        g.weighted_sum(&[(adv, 1.0), (cyc, 1.0), (pc, 10.0)]).unwrap()
    })?;
    Ok(format!("{n} loss input coordinates on 4×4 tensors"))
}

pub fn network_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut n = 0;
    // Generators need 8×8: the stride-4 encoder leaves 2×2 maps, the
    // smallest size the reflection padding of the residual blocks accepts.
    let x8 = Tensor::<f64>::uniform(vec![1, 3, 8, 8], -1.0, 1.0, &mut rng);
    let ffe = tiny_ffe(8);
    for encoder in [EncoderKind::Basic, EncoderKind::Ffe] {
        let cfg = tiny_generator(encoder);
        let p = init_generator_params::<f64>(&cfg, &ffe, 21).map_err(|e| e.to_string())?;
        n += check_network(&format!("generator[{encoder:?}]"), &p, &x8, 3, &|g, b, x| {
            generate(g, b, "", &cfg, &ffe, x).unwrap()
        })?;
    }
    let d = DiscriminatorConfig {
        layer_channels: vec![4, 8],
        kernel: 4,
        strides: vec![1, 1, 1],
    };
    let pd = init_discriminator_params::<f64>(&d, 22).map_err(|e| e.to_string())?;
    let x4 = Tensor::<f64>::uniform(vec![1, 3, 4, 4], -1.0, 1.0, &mut rng);
    n += check_network("discriminator", &pd, &x4, 4, &|g, b, x| discriminate(g, b, "", &d, x).unwrap())?;
    Ok(format!("{n} generator/discriminator coordinates"))
}

pub fn gradient_suite() -> Check {
    let a = loss_gradients()?;
    let b = network_gradients()?;
    Ok(format!("{a}; {b}; rel tol {FD_REL}"))
}

// --------------------------------------------------------------- metrics ---

/// Rank-1 by exhaustive per-row argmax, first index winning ties.
pub fn rank1_oracle(scores: &[Vec<f64>], probe: &[String], gallery: &[String]) -> f64 {
    let mut hits = 0;
    for (p, row) in scores.iter().enumerate() {
        let mut best = 0;
        for g in 0..row.len() {
            if row[g] > row[best] {
                best = g;
            }
        }
        if gallery[best] == probe[p] {
            hits += 1;
        }
    }
    hits as f64 / scores.len() as f64
}

/// TAR at FAR `f`: tries every distinct observed score as threshold, keeps
/// those whose impostor acceptance is ≤ f, and among them the one with the
/// largest impostor acceptance (then the largest TAR). Falls back to the
/// highest score when none qualifies.
pub fn tar_oracle(scores: &[Vec<f64>], probe: &[String], gallery: &[String], f: f64) -> f64 {
    let mut gen = Vec::new();
    let mut imp = Vec::new();
    for (p, row) in scores.iter().enumerate() {
        for (g, &s) in row.iter().enumerate() {
            if probe[p] == gallery[g] {
                gen.push(s)
            } else {
                imp.push(s)
            }
        }
    }
    let rate = |set: &[f64], t: f64| set.iter().filter(|&&s| s >= t).count() as f64 / set.len() as f64;
    let mut best: Option<(f64, f64)> = None;
    let mut top = f64::NEG_INFINITY;
    for &t in gen.iter().chain(&imp) {
        top = top.max(t);
        let (far, tar) = (rate(&imp, t), rate(&gen, t));
        if far <= f && best.is_none_or(|(bf, bt)| far > bf || (far == bf && tar > bt)) {
            best = Some((far, tar));
        }
    }
    best.map_or_else(|| rate(&gen, top), |(_, tar)| tar)
}

fn ids(v: &[usize]) -> Vec<String> {
    v.iter().map(|i| format!("s{i}")).collect()
}

/// A random matrix with coarse scores (many ties) and ids such that every
/// probe subject appears in the gallery.
pub fn random_matrix(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<String>, Vec<String>) {
    let (np, ng) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let levels = rng.gen_range(2..=12);
    let gallery: Vec<usize> = (0..ng).map(|_| rng.gen_range(0..3)).collect();
    let probe: Vec<usize> = (0..np).map(|_| gallery[rng.gen_range(0..ng)]).collect();
    let scores = (0..np)
        .map(|_| {
            (0..ng)
                .map(|_| 2.0 * rng.gen_range(0..=levels) as f64 / levels as f64 - 1.0)
                .collect()
        })
        .collect();
    (scores, ids(&probe), ids(&gallery))
}

pub const FAR_GRID: [f64; 9] = [0.0, 0.001, 0.01, 0.1, 0.25, 0.4, 0.5, 0.75, 1.0];

pub fn metric_oracles(n_matrices: usize) -> Check {
    let examples = || -> std::result::Result<(), String> {
        let m = ScoreMatrix::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]], ids(&[0, 1]), ids(&[0, 1])).unwrap();
        close("rank1 dominant diagonal", rank1(&m).unwrap(), 1.0, 0.0)?;
        let m = ScoreMatrix::new(
            vec![vec![0.9, 0.1, 0.2], vec![0.7, 0.3, 0.1], vec![0.0, 0.1, 0.5]],
            ids(&[0, 1, 2]),
            ids(&[0, 1, 2]),
        )
        .unwrap();
        close("rank1 one wrong of three", rank1(&m).unwrap(), 2.0 / 3.0, 1e-12)?;
        let m = ScoreMatrix::new(vec![vec![0.5; 3]; 3], ids(&[0, 0, 0]), ids(&[0, 1, 2])).unwrap();
        close("rank1 ties to index 0", rank1(&m).unwrap(), 1.0, 0.0)?;
        // genuine {0.9, 0.7, 0.4}, impostor {0.8, 0.3, 0.2, 0.1}
        let m = ScoreMatrix::new(
            [0.9, 0.7, 0.4, 0.8, 0.3, 0.2, 0.1].iter().map(|&s| vec![s]).collect(),
            ids(&[0, 0, 0, 1, 1, 1, 1]),
            ids(&[0]),
        )
        .unwrap();
        let r = tar_at_far(&m, &[0.25, 0.0]).unwrap();
        close("TAR@0.25", r[0].tar, 1.0, 1e-12)?;
        close("FAR achieved @0.25", r[0].achieved_far, 0.25, 1e-12)?;
        close("TAR@0", r[1].tar, 1.0 / 3.0, 1e-12)?;
        let m = ScoreMatrix::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], ids(&[0, 1]), ids(&[0, 1])).unwrap();
        for tf in tar_at_far(&m, &FAR_GRID).unwrap() {
            close("TAR perfect separation", tf.tar, 1.0, 0.0)?;
        }
        Ok(())
    };
    examples()?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut tar_checked = 0;
    for k in 0..n_matrices {
        let (scores, probe, gallery) = random_matrix(&mut rng);
        let m = ScoreMatrix::new(scores.clone(), probe.clone(), gallery.clone()).unwrap();
        close(&format!("rank1 matrix #{k}"), rank1(&m).unwrap(), rank1_oracle(&scores, &probe, &gallery), 1e-12)?;
        let (gen, imp) = m.split_scores();
        if gen.is_empty() || imp.is_empty() {
            ensure(tar_at_far(&m, &[0.1]).is_err(), || format!("matrix #{k}: TAR without both pair kinds"))?;
            continue;
        }
        let tars = tar_at_far(&m, &FAR_GRID).unwrap();
        for (tf, &f) in tars.iter().zip(&FAR_GRID) {
            close(&format!("TAR@{f} matrix #{k}"), tf.tar, tar_oracle(&scores, &probe, &gallery, f), 1e-12)?;
            ensure(tf.achieved_far <= f || tf.threshold == imp.iter().chain(&gen).copied().fold(f64::MIN, f64::max), || {
                format!("matrix #{k}: achieved FAR {} above {f} at a non-top threshold", tf.achieved_far)
            })?;
        }
        ensure(tars.windows(2).all(|w| w[0].tar <= w[1].tar), || format!("matrix #{k}: TAR not monotone in FAR"))?;
        tar_checked += 1;
    }
    Ok(format!("{n_matrices} random matrices (≤6×6), {tar_checked} with TAR sweeps, plus worked examples"))
}

// ---------------------------------------------------------- architecture ---

pub fn architecture_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let ffe = FfeConfig {
        input_resolution: 64,
        ..FfeConfig::default()
    };
    let cfg = GeneratorConfig::default();

    // Residual translator with zero branches is the identity.
    let mut p = init_generator_params::<f32>(&cfg, &ffe, 1).map_err(|e| e.to_string())?;
    p.map_values(|name, t| {
        if name.starts_with("trans.") && (name.ends_with(".weight") || name.ends_with(".bias")) {
            t.data_mut().fill(0.0);
        }
    });
    let feats = Tensor::<f32>::randn(vec![2, 128, 8, 8], 1.0, &mut rng);
    ensure(translate_module(&feats, &cfg, &p).unwrap() == feats, || {
        "zero-branch translator is not the identity".into()
    })?;

    // Generators preserve shape and stay inside the tanh range.
    for encoder in [EncoderKind::Ffe, EncoderKind::Basic] {
        let cfg = GeneratorConfig { encoder, ..cfg.clone() };
        let p = init_generator_params::<f32>(&cfg, &ffe, 2).map_err(|e| e.to_string())?;
        for size in [32, 64] {
            let x = Tensor::<f32>::uniform(vec![2, 3, size, size], -1.0, 1.0, &mut rng);
            let y = generator_forward(&x, &cfg, &ffe, &p).map_err(|e| e.to_string())?;
            ensure(y.shape() == x.shape(), || format!("{encoder:?}: shape {:?} → {:?}", x.shape(), y.shape()))?;
            let (lo, hi) = y.min_max();
            ensure(lo >= -1.0 && hi <= 1.0, || format!("{encoder:?}: output range [{lo}, {hi}]"))?;
        }
    }

    // Extractor spatial tap: 128 channels at stride 4.
    let fp = init_ffe_params::<f32>(&ffe, 3).map_err(|e| e.to_string())?;
    for size in [32, 64] {
        let x = Tensor::<f32>::uniform(vec![1, 3, size, size], -1.0, 1.0, &mut rng);
        let s = ffe_forward_spatial(&x, &ffe, &fp).map_err(|e| e.to_string())?;
        ensure(s.shape() == [1, 128, size / 4, size / 4], || format!("spatial tap shape {:?}", s.shape()))?;
    }

    // Embeddings are unit norm.
    let x = Tensor::<f32>::uniform(vec![3, 3, 64, 64], -1.0, 1.0, &mut rng);
    for e in ffe_forward_embedding(&x, &ffe, &fp).map_err(|e| e.to_string())? {
        ensure((e.norm() - 1.0).abs() < 1e-6, || format!("embedding norm {}", e.norm()))?;
    }
    Ok("identity translator, shape/tanh range, 128-ch stride-4 tap, unit embeddings".into())
}

// -------------------------------------------------------------- protocol ---

/// `n_subjects` subjects with `per_subject` pairs each; paths are never read.
pub fn fake_samples(n_subjects: usize, per_subject: usize) -> Vec<PairedSample> {
    let root = Path::new("/nonexistent");
    (0..n_subjects)
        .flat_map(|s| {
            (0..per_subject).map(move |i| PairedSample::at(root, &SyntheticSpec::subject_id(s), PoseTag::ALL[i % 7], i))
        })
        .collect()
}

pub fn protocol_shape() -> Check {
    let whu = make_split(&fake_samples(80, 20), 70, 10, 20, 0).map_err(|e| e.to_string())?;
    ensure(whu.train.len() == 1400 && whu.test.len() == 200, || {
        format!("WHU shape: {} train / {} test pairs", whu.train.len(), whu.test.len())
    })?;
    ensure(whu.train_subjects.len() == 70 && whu.test_subjects.len() == 10, || "WHU subject counts".into())?;
    whu.check_disjoint().map_err(|e| e.to_string())?;
    let oulu = make_split(&fake_samples(40, 48), 20, 20, 48, 0).map_err(|e| e.to_string())?;
    ensure(oulu.test.len() == 960 && oulu.train.len() == 960, || {
        format!("Oulu shape: {} train / {} test pairs", oulu.train.len(), oulu.test.len())
    })?;
    oulu.check_disjoint().map_err(|e| e.to_string())?;
    let tiny = make_split(&fake_samples(2, 1), 1, 1, 1, 0).map_err(|e| e.to_string())?;
    ensure(tiny.train_subjects.len() == 1 && tiny.train_subjects != tiny.test_subjects, || {
        "minimal split not disjoint singletons".into()
    })?;
    Ok("WHU 1400/1400 train + 200/200 test, Oulu 960/960 test (one VIS and one NIR image per pair)".into())
}

// --------------------------------------------------------------- training ---

/// Loads a split side at `resolution`.
pub fn load(samples: &[PairedSample], resolution: usize) -> PairedImages {
    PairedImages::load(samples, resolution).expect("dataset loads")
}

pub fn max_loss_gap(a: &[LogRecord], b: &[LogRecord]) -> std::result::Result<f64, String> {
    ensure(a.len() == b.len(), || format!("log lengths {} vs {}", a.len(), b.len()))?;
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        ensure(x.step == y.step, || format!("step {} vs {}", x.step, y.step))?;
        let (p, q) = (x.losses, y.losses);
        for (u, v) in [
            (p.adv_g, q.adv_g),
            (p.adv_f, q.adv_f),
            (p.d_v, q.d_v),
            (p.d_n, q.d_n),
            (p.cyc, q.cyc),
            (p.pc, q.pc),
            (p.total, q.total),
        ] {
            worst = worst.max((u - v).abs());
        }
        worst = worst.max((x.learning_rate - y.learning_rate).abs());
    }
    Ok(worst)
}

pub fn max_param_gap(a: &ParameterSet<f32>, b: &ParameterSet<f32>) -> std::result::Result<f64, String> {
    ensure(a.len() == b.len(), || "parameter sets differ in size".into())?;
    let mut worst = 0.0f64;
    for (name, x) in a.iter() {
        let y = b.get(name).ok_or_else(|| format!("missing {name}"))?;
        worst = worst.max(f64::from(x.max_abs_diff(y).map_err(|e| e.to_string())?));
    }
    Ok(worst)
}

/// Two identical fixed-seed runs of two epochs agree; a run interrupted after
/// the first epoch and resumed from its checkpoint matches both.
pub fn determinism_and_resume(work: &Path) -> Check {
    let spec = SyntheticSpec {
        n_subjects: 8,
        images_per_subject: 4,
        resolution: 32,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let samples = generate_synthetic_dataset(&spec, &work.join("data")).map_err(|e| e.to_string())?;
    let images = load(&samples, 32);
    let mut config = Config::default();
    config.ffe.input_resolution = 32;
    config.train.resolution = 32;
    config.train.epochs = 2;
    config.train.image_pool_size = 6;
    config.train.seed = 5;

    let run = |dir: &str, config: &Config| -> std::result::Result<(TrainState, Vec<LogRecord>), String> {
        let mut state = TrainState::new(config, None).map_err(|e| e.to_string())?;
        let out = train_loop(&mut state, &images, &work.join(dir)).map_err(|e| e.to_string())?;
        Ok((state, out.records))
    };
    let (a, log_a) = run("a", &config)?;
    let (b, log_b) = run("b", &config)?;
    let rerun_gap = max_loss_gap(&log_a, &log_b)?.max(max_param_gap(&a.params, &b.params)?);
    ensure(rerun_gap <= 1e-6, || format!("rerun differs by {rerun_gap:e}"))?;

    let spe = images.len() as u64;
    let mut first = config.clone();
    first.train.max_steps = spe;
    let (_, log_c1) = run("c", &first)?;
    let mut resumed = TrainState::load(&work.join("c").join("final.ckpt")).map_err(|e| e.to_string())?;
    resumed.config.train.max_steps = 0;
    let out = train_loop(&mut resumed, &images, &work.join("c")).map_err(|e| e.to_string())?;
    let log_c: Vec<LogRecord> = log_c1.into_iter().chain(out.records).collect();
    let resume_gap = max_loss_gap(&log_a, &log_c)?.max(max_param_gap(&a.params, &resumed.params)?);
    ensure(resume_gap <= 1e-6, || format!("resumed run differs by {resume_gap:e}"))?;
    let lines = std::fs::read_to_string(work.join("c").join("train_log.jsonl")).map_err(|e| e.to_string())?;
    ensure(lines.lines().count() as u64 == 2 * spe, || "resumed log does not have one line per step".into())?;
    Ok(format!(
        "{} steps; rerun gap {rerun_gap:e}, resume gap {resume_gap:e} (tol 1e-6)",
        log_a.len()
    ))
}

/// Data shared by the learning and ablation checks: an extractor-pretraining
/// pool and a 24-subject translation set split 16 train / 8 test.
pub struct Proxy {
    pub split: nirgan::data::ProtocolSplit,
    pub pretrained: ParameterSet<f32>,
    pub ffe: FfeConfig,
    pub pretrain_accuracy: f64,
}

pub const EXTRACTOR_RESOLUTION: usize = 32;

pub fn prepare_proxy(work: &Path) -> std::result::Result<Proxy, String> {
    let e = |e: nirgan::Error| e.to_string();
    let pool_spec = SyntheticSpec {
        n_subjects: 40,
        seed: 1001,
        ..SyntheticSpec::default()
    };
    let pool = generate_synthetic_dataset(&pool_spec, &work.join("pool")).map_err(e)?;
    let main_spec = SyntheticSpec {
        n_subjects: 24,
        ..SyntheticSpec::default()
    };
    let main = generate_synthetic_dataset(&main_spec, &work.join("main")).map_err(e)?;
    let split = make_split(&main, 16, 8, 14, 0).map_err(e)?;

    let ffe = FfeConfig {
        input_resolution: EXTRACTOR_RESOLUTION,
        ..FfeConfig::default()
    };
    let images = load(&pool, EXTRACTOR_RESOLUTION);
    let mut labels_by_id = BTreeMap::new();
    for s in images.subjects() {
        let next = labels_by_id.len();
        labels_by_id.entry(s.clone()).or_insert(next);
    }
    let labels: Vec<usize> = images.subjects().iter().chain(images.subjects()).map(|s| labels_by_id[s]).collect();
    let idx: Vec<usize> = (0..images.len()).collect();
    let all = Tensor::concat_batch(&[
        images.domain(Domain::Vis, &idx).map_err(e)?,
        images.domain(Domain::Nir, &idx).map_err(e)?,
    ])
    .map_err(|e| e.to_string())?;
    let set = LabeledFaceSet::new(all, labels).map_err(e)?;
    let report = pretrain_ffe(
        &set,
        &ffe,
        &PretrainOptions {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 5,
        },
    )
    .map_err(e)?;
    Ok(Proxy {
        split,
        pretrained: report.params,
        ffe,
        pretrain_accuracy: report.train_accuracy,
    })
}

/// Mean of `values[end-window..end]`.
pub fn moving_average(values: &[f64], end: usize, window: usize) -> f64 {
    values[end - window..end].iter().sum::<f64>() / window as f64
}

/// Full model at 64×64 for 500 steps; the 10-step moving averages of the
/// cycle and pixel-consistency losses must fall by ≥ 30% from step 10.
pub fn learning_smoke(proxy: &Proxy, work: &Path) -> Check {
    const STEPS: usize = 500;
    let mut config = Config::default();
    config.ffe = proxy.ffe.clone();
    config.train.resolution = 64;
    config.train.max_steps = STEPS as u64;
    config.train.epochs = STEPS.div_ceil(proxy.split.train.len());
    Ablation::FfePc.apply(&mut config);
    let images = load(&proxy.split.train, 64);
    let mut state = TrainState::new(&config, Some(&proxy.pretrained)).map_err(|e| e.to_string())?;
    let out = train_loop(&mut state, &images, work).map_err(|e| e.to_string())?;
    ensure(out.records.len() == STEPS, || format!("{} steps logged", out.records.len()))?;
    let cyc: Vec<f64> = out.records.iter().map(|r| r.losses.cyc).collect();
    let pc: Vec<f64> = out.records.iter().map(|r| r.losses.pc).collect();
    let drop = |v: &[f64]| 1.0 - moving_average(v, STEPS, 10) / moving_average(v, 10, 10);
    let (dc, dp) = (drop(&cyc), drop(&pc));
    let detail = format!(
        "cyc {:.3}→{:.3} ({:.0}% drop), pc {:.3}→{:.3} ({:.0}% drop)",
        moving_average(&cyc, 10, 10),
        moving_average(&cyc, STEPS, 10),
        100.0 * dc,
        moving_average(&pc, 10, 10),
        moving_average(&pc, STEPS, 10),
        100.0 * dp
    );
    ensure(dc >= 0.3 && dp >= 0.3, || detail.clone())?;
    Ok(detail)
}

pub struct ArmResult {
    pub arm: Ablation,
    pub seed: u64,
    pub rank1: f64,
}

pub const ABLATION_STEPS: u64 = 300;
pub const ABLATION_RESOLUTION: usize = 32;

pub fn train_arm(proxy: &Proxy, train: &PairedImages, arm: Ablation, seed: u64, work: &Path) -> std::result::Result<ArmResult, String> {
    let mut config = Config::default();
    config.ffe = proxy.ffe.clone();
    config.train.resolution = ABLATION_RESOLUTION;
    config.train.seed = seed;
    config.train.max_steps = ABLATION_STEPS;
    config.train.epochs = (ABLATION_STEPS as usize).div_ceil(train.len());
    arm.apply(&mut config);
    let mut state = TrainState::new(&config, Some(&proxy.pretrained)).map_err(|e| e.to_string())?;
    train_loop(&mut state, train, &work.join(format!("{}-{seed}", arm.as_str()))).map_err(|e| e.to_string())?;
    let report = evaluate_protocol(&proxy.split, &state, "synthetic").map_err(|e| e.to_string())?;
    Ok(ArmResult {
        arm,
        seed,
        rank1: report.rank1,
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median test Rank-1 must be ordered ffe+pc ≥ basic+pc ≥ basic, with at
/// most one seed whose ordering is inverted per adjacent pair of arms.
pub fn ablation_ordering(results: &[ArmResult]) -> Check {
    let of = |arm: Ablation| -> Vec<f64> {
        let mut r: Vec<&ArmResult> = results.iter().filter(|r| r.arm == arm).collect();
        r.sort_by_key(|r| r.seed);
        r.iter().map(|r| r.rank1).collect()
    };
    let (basic, basic_pc, ffe_pc) = (of(Ablation::Basic), of(Ablation::BasicPc), of(Ablation::FfePc));
    let (mb, mbp, mfp) = (median(basic.clone()), median(basic_pc.clone()), median(ffe_pc.clone()));
    let inversions = |hi: &[f64], lo: &[f64]| hi.iter().zip(lo).filter(|(h, l)| h < l).count();
    let (inv_upper, inv_lower) = (inversions(&ffe_pc, &basic_pc), inversions(&basic_pc, &basic));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "median rank1 ffe+pc {mfp:.3} [{}], basic+pc {mbp:.3} [{}], basic {mb:.3} [{}]; seed inversions {inv_upper}, {inv_lower}",
        fmt(&ffe_pc),
        fmt(&basic_pc),
        fmt(&basic)
    );
    ensure(mfp >= mbp && mbp >= mb && inv_upper <= 1 && inv_lower <= 1, || detail.clone())?;
    Ok(detail)
}

/// Small but complete model for fast end-to-end runs at 16×16.
pub fn tiny_config(encoder: EncoderKind) -> Config {
    let mut c = Config::default();
    c.ffe = tiny_ffe(16);
    c.generator = tiny_generator(encoder);
    c.discriminator = DiscriminatorConfig {
        layer_channels: vec![8, 16],
        kernel: 4,
        strides: vec![2, 2, 1],
    };
    c.train.resolution = 16;
    c.train.image_pool_size = 4;
    c
}
