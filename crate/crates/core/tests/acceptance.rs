//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use depthflow::datapipe::{filter_clips, generate_clip, CameraMotion, Clip, FilterThresholds, SceneConfig};
use depthflow::denoiser::{
    init_attention, temporal_attention, AttentionShape, Denoiser, DenoiserConfig, FramePositions, PositionEncoding,
};
use depthflow::depthspace::{decode_latent, encode_video, LatentClip};
use depthflow::duration::pack_batch;
use depthflow::eval::{aggregate, baseline_absrel, evaluate};
use depthflow::flow::{fm_loss, fm_loss_graph, sample, sample_noise, VelocityModel};
use depthflow::infer::{InferConfig, Predictor};
use depthflow::longvideo::{naive_boundaries, sample_naive, seam_discontinuity};
use depthflow::metrics::{align_scale_shift, aligned_scores, tae};
use depthflow::numerics::rng::SeededRng;
use depthflow::numerics::{Graph, ParamStore, Tensor, Var};
use depthflow::train::{train, TrainConfig, Variant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn batched(x: &Tensor) -> Tensor {
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    x.reshape(&s).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let model = Denoiser::new(DenoiserConfig::default(), 21).unwrap();
    let n_params = model.param_count();
    let mut rng = SeededRng::new(22);
    let z = rng.normal_tensor(&[3, 4, 8, 8]);
    let zc = rng.normal_tensor(&[3, 4, 8, 8]);
    let eps = rng.normal_tensor(&[3, 4, 8, 8]);
    let positions = FramePositions::new(vec![0, 2, 5]).unwrap();
    let batch = depthflow::flow::FlowBatch::single(&z, &zc, &eps, 0.35, &positions).unwrap();
    let g = Graph::new();
    let loss = fm_loss_graph(&g, &model, &batch).unwrap();
    let grads = g.backward(loss, model.params()).unwrap();
    let loss_at = |m: &Denoiser| {
        let g = Graph::new();
        fm_loss_graph(&g, m, &batch).unwrap().value().item().unwrap()
    };

    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let name = &names[rng.int_inclusive(0, names.len() - 1)];
        let value = model.params().get(name).unwrap();
        let i = rng.int_inclusive(0, value.numel() - 1);
        let probe = |delta: f64| {
            let mut m = model.clone();
            let mut v = value.clone();
            v.data_mut()[i] += delta;
            m.params_mut().replace(name, v).unwrap();
            loss_at(&m)
        };
        let numeric = (probe(h) - probe(-h)) / (2.0 * h);
        let analytic = grads[name.as_str()].data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    check(
        n_params <= 50_000 && worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!("{n_params} params, worst relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

struct ConstantField(Tensor);

impl VelocityModel for ConstantField {
    fn velocity<'g>(
        &self,
        g: &'g Graph,
        phi: Var<'g>,
        _cond: Var<'g>,
        _t: &[f64],
        _positions: &[FramePositions],
    ) -> depthflow::Result<Var<'g>> {
        g.constant(self.0.clone()).reshape(&phi.shape())
    }
}

fn flow_exactness() -> Outcome {
    let shape = [4, 4, 6, 6];
    let cond = Tensor::zeros(&shape);
    let positions = FramePositions::contiguous(4);
    let mut worst_target: f64 = 0.0;
    let mut all_exact = true;
    for seed in 0..10u64 {
        let eps = sample_noise(&shape, seed);
        let target = SeededRng::new(100 + seed).normal_tensor(&shape);
        let v = target.sub(&eps).unwrap();
        let endpoint = eps.add(&v).unwrap();
        let model = ConstantField(v);
        for steps in [1, 3, 25] {
            let out = sample(&model, &cond, steps, seed, &positions).unwrap();
            all_exact &= out == endpoint;
            worst_target = worst_target.max(out.max_abs_diff(&target));
        }
    }
    check(
        all_exact && worst_target <= 1e-15,
        format!("endpoint bit-exact for steps 1, 3, 25: {all_exact}; max distance to target {worst_target:.1e}"),
    )
}

fn rope_relative() -> Outcome {
    let mut rng = SeededRng::new(3);
    let (mut worst_rope, mut weakest_abs) = (0.0f64, f64::INFINITY);
    for case in 0..100u64 {
        let frames = rng.int_inclusive(1, 8);
        let mut pos: Vec<usize> = rng.sample_indices(64, frames);
        pos.sort_unstable();
        let positions = FramePositions::new(pos).unwrap();
        let shift = rng.int_inclusive(1, 1000);
        let x = rng.normal_tensor(&[frames, 16, 2, 3]);
        let run = |encoding| {
            let shape = AttentionShape {
                channels: 16,
                heads: 2,
                head_dim: 8,
                theta: 10_000.0,
                encoding,
            };
            let mut store = ParamStore::new();
            init_attention(&mut store, "attn", &shape, &mut SeededRng::new(case)).unwrap();
            let a = temporal_attention(&x, &positions, &store, "attn", &shape).unwrap();
            let b = temporal_attention(&x, &positions.shifted(shift), &store, "attn", &shape).unwrap();
            a.max_abs_diff(&b)
        };
        worst_rope = worst_rope.max(run(PositionEncoding::Rope));
        weakest_abs = weakest_abs.min(run(PositionEncoding::AbsoluteSinusoidal));
    }
    check(
        worst_rope < 1e-9 && weakest_abs > 1e-6,
        format!("rotary max deviation {worst_rope:.1e}; absolute encoding min deviation {weakest_abs:.1e}"),
    )
}

fn interp_init_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let base = Denoiser::new(DenoiserConfig::default(), seed).unwrap();
        let interp = Denoiser::init_interp_from_base(&base).unwrap();
        let mut rng = SeededRng::new(50 + seed);
        let frames = rng.int_inclusive(1, 6);
        let phi = rng.normal_tensor(&[frames, 4, 8, 8]);
        let zc = rng.normal_tensor(&[frames, 4, 8, 8]);
        let t = rng.uniform();
        let positions = FramePositions::new((0..frames).map(|i| 3 * i + 1).collect()).unwrap();
        let expected = base.forward(&phi, &zc, t, &positions).unwrap();
        let cond = Tensor::concat(&[&zc, &phi, &zc], 1).unwrap();
        let g = Graph::new();
        let got = interp
            .velocity(&g, g.constant(batched(&phi)), g.constant(batched(&cond)), &[t], &[positions])
            .unwrap()
            .value()
            .reshape(phi.shape())
            .unwrap();
        worst = worst.max(got.max_abs_diff(&expected));
    }
    check(worst < 1e-12, format!("max deviation {worst:.1e} over 10 models"))
}

fn packing_neutrality() -> Outcome {
    let model = Denoiser::new(DenoiserConfig::default(), 7).unwrap();
    let scene = SceneConfig {
        frames: 6,
        height: 8,
        width: 8,
        ..SceneConfig::default()
    };
    let group: Vec<Clip> = (0..4).map(|s| generate_clip(&scene, 300 + s).unwrap()).collect();
    let mut rng = SeededRng::new(8);
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let k = rng.int_inclusive(1, 6);
        let budget = rng.int_inclusive(64, 6 * 64 * 5);
        let fb = pack_batch(&group, k, budget, i).unwrap().flow_batch(1000 + i).unwrap();
        let g = Graph::new();
        let joint = fm_loss_graph(&g, &model, &fb).unwrap().value().item().unwrap();
        let one = |x: &Tensor, b: usize| {
            let s = x.shape();
            x.narrow(0, b, 1).unwrap().reshape(&s[1..]).unwrap()
        };
        let per: f64 = (0..fb.batch_size())
            .map(|b| fm_loss(&model, &one(&fb.z_d, b), &one(&fb.cond, b), fb.t[b], &one(&fb.eps, b), &fb.positions[b]).unwrap())
            .sum();
        worst = worst.max((joint - per / fb.batch_size() as f64).abs());
    }
    check(worst < 1e-10, format!("max |packed - mean| {worst:.1e} over 50 batches"))
}

fn residual(p: &Tensor, g: &Tensor, s: f64, t: f64) -> f64 {
    p.data().iter().zip(g.data()).map(|(p, g)| (s * p + t - g).powi(2)).sum()
}

/// Coarse-to-fine search around the origin, independent of the closed form.
fn grid_search(p: &Tensor, g: &Tensor) -> (f64, f64) {
    let (mut s0, mut t0, mut half) = (0.0, 0.0, 8.0);
    while half > 1e-6 {
        let mut best = (f64::INFINITY, s0, t0);
        for i in -16..=16 {
            for j in -16..=16 {
                let s = s0 + half * i as f64 / 16.0;
                let t = t0 + half * j as f64 / 16.0;
                let r = residual(p, g, s, t);
                if r < best.0 {
                    best = (r, s, t);
                }
            }
        }
        (s0, t0) = (best.1, best.2);
        half /= 4.0;
    }
    (s0, t0)
}

fn alignment_oracle() -> Outcome {
    let mut rng = SeededRng::new(4);
    let (mut worst_fit, mut worst_invariance) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.int_inclusive(8, 80);
        let p = rng.uniform_tensor(&[n], 0.2, 4.0);
        let (s, t) = (rng.uniform_range(0.3, 3.0), rng.uniform_range(-1.0, 1.0));
        let noise = rng.normal_tensor(&[n]).scale(0.05);
        let g = p.map(|v| s * v + t + 1.5).add(&noise).unwrap();
        let a = align_scale_shift(&p, &g, &Tensor::ones(&[n])).unwrap();
        let (gs, gt) = grid_search(&p, &g);
        worst_fit = worst_fit.max((a.scale - gs).abs()).max((a.shift - gt).abs());

        let before = aligned_scores(&p, &g).unwrap();
        let (ps, pt) = (rng.uniform_range(0.1, 10.0), rng.uniform_range(-5.0, 5.0));
        let after = aligned_scores(&p.map(|v| ps * v + pt), &g).unwrap();
        worst_invariance = worst_invariance
            .max((before.absrel - after.absrel).abs())
            .max((before.delta1 - after.delta1).abs());
    }
    check(
        worst_fit < 1e-3 && worst_invariance < 1e-9,
        format!("closed form vs grid {worst_fit:.1e}; affine invariance {worst_invariance:.1e}"),
    )
}

fn tae_geometry() -> Outcome {
    let (mut worst_gt, mut all_increase, mut static_zero) = (0.0f64, true, true);
    for seed in 0..12u64 {
        let motion = [CameraMotion::Translate, CameraMotion::Orbit][seed as usize % 2];
        let (height, width) = [(16, 16), (24, 32), (32, 32)][seed as usize % 3];
        let scene = SceneConfig {
            camera_motion: motion,
            height,
            width,
            ..SceneConfig::default()
        };
        let clip = generate_clip(&scene, 700 + seed).unwrap();
        let e = tae(&clip.depth, &clip.poses).unwrap();
        worst_gt = worst_gt.max(e);
        let k = seed as usize % clip.len();
        let mut scaled = clip.depth.clone();
        let hw = height * width;
        scaled.data_mut()[k * hw..(k + 1) * hw].iter_mut().for_each(|d| *d *= 1.5);
        all_increase &= tae(&scaled, &clip.poses).unwrap() > e;

        let frozen = generate_clip(&SceneConfig { camera_motion: CameraMotion::Static, ..scene }, 800 + seed).unwrap();
        static_zero &= tae(&frozen.depth, &frozen.poses).unwrap() == 0.0;
    }
    check(
        worst_gt < 0.01 && all_increase && static_zero,
        format!("max ground-truth TAE {worst_gt:.4}; scaling increases: {all_increase}; static exactly 0: {static_zero}"),
    )
}

const MOTIONS: [CameraMotion; 3] = [CameraMotion::Translate, CameraMotion::Orbit, CameraMotion::Static];

fn scene_clip(seed: u64, frames: usize) -> Clip {
    let scene = SceneConfig {
        camera_motion: MOTIONS[(seed % 3) as usize],
        frames,
        ..SceneConfig::default()
    };
    generate_clip(&scene, seed).unwrap()
}

struct Trained {
    base: Denoiser,
    interp: Denoiser,
    train_time: Duration,
}

fn trained() -> &'static Trained {
    static MODELS: OnceLock<Trained> = OnceLock::new();
    MODELS.get_or_init(|| {
        let start = Instant::now();
        let clips: Vec<Clip> = (0..64).map(|s| scene_clip(s, 12)).collect();
        let cfg = TrainConfig::default();
        let base = train(&clips, &cfg, Variant::Base, None, |_| {}).unwrap().final_model;
        let mut interp_cfg = TrainConfig {
            steps: 300,
            ..TrainConfig::default()
        };
        interp_cfg.optimizer.lr = 2e-3;
        let interp = train(&clips, &interp_cfg, Variant::Interp, Some(&base), |_| {})
            .unwrap()
            .final_model;
        Trained {
            base,
            interp,
            train_time: start.elapsed(),
        }
    })
}

fn learning_signal() -> Outcome {
    let models = trained();
    let held_out: Vec<Clip> = (1000..1016).map(|s| scene_clip(s, 12)).collect();
    let score = |steps| {
        let p = Predictor::new(models.base.clone(), None, InferConfig { steps, ..InferConfig::default() }).unwrap();
        let records: Vec<_> = held_out
            .iter()
            .map(|c| evaluate(&p.predict(&c.frames).unwrap().depth, c).unwrap())
            .collect();
        aggregate(&records).unwrap()
    };
    let (one, three) = (score(1), score(3));
    let baseline = held_out.iter().map(|c| baseline_absrel(&c.depth).unwrap()).sum::<f64>() / held_out.len() as f64;
    let ratio = baseline / three.absrel;
    check(
        ratio >= 2.0 && three.delta1 >= one.delta1 && models.train_time < Duration::from_secs(1800),
        format!(
            "AbsRel {:.4} vs median baseline {baseline:.4} ({ratio:.2}x); delta1 steps=1 {:.3}, steps=3 {:.3}; trained in {:.0}s",
            three.absrel,
            one.delta1,
            three.delta1,
            models.train_time.as_secs_f64()
        ),
    )
}

fn long_video() -> Outcome {
    let models = trained();
    let config = InferConfig::default();
    let long = Predictor::new(models.base.clone(), Some(models.interp.clone()), config).unwrap();
    let boundaries = naive_boundaries(96, config.max_frames_per_pass);
    let (mut ours, mut naive, mut wins) = (0.0, 0.0, 0);
    let clips: Vec<Clip> = (0..6u64)
        .map(|s| {
            let scene = SceneConfig {
                camera_motion: MOTIONS[(s % 2) as usize],
                frames: 96,
                ..SceneConfig::default()
            };
            generate_clip(&scene, 5000 + s).unwrap()
        })
        .collect();
    for clip in &clips {
        let pred = long.predict(&clip.frames).unwrap().depth;
        let z_c = encode_video(&clip.frames).unwrap().frames;
        let chunks = sample_naive(&models.base, &z_c, config.max_frames_per_pass, config.steps, config.seed).unwrap();
        let independent = decode_latent(&LatentClip {
            frames: chunks,
            source_channels: 1,
        })
        .unwrap();
        let a = seam_discontinuity(&pred, &clip.depth, &boundaries).unwrap();
        let b = seam_discontinuity(&independent, &clip.depth, &boundaries).unwrap();
        ours += a;
        naive += b;
        wins += usize::from(a < b);
    }
    let n = clips.len() as f64;

    let single = Predictor::new(models.base.clone(), None, config).unwrap();
    let short_equal = [20, 32].iter().all(|&t| {
        let frames = scene_clip(6000 + t as u64, t).frames;
        long.predict(&frames).unwrap().depth == single.predict(&frames).unwrap().depth
    });
    check(
        ours < naive && short_equal,
        format!(
            "seam {:.4} vs naive {:.4} (lower on {wins}/{} clips); short clips bit-equal to single pass: {short_equal}",
            ours / n,
            naive / n,
            clips.len()
        ),
    )
}

fn corrupted(clip: &Clip, seed: u64) -> Clip {
    let mut rng = SeededRng::new(seed);
    let hw = clip.height() * clip.width();
    let mut depth = clip.depth.clone();
    for frame in depth.data_mut().chunks_mut(hw) {
        let order = rng.sample_indices(hw, hw);
        let copy = frame.to_vec();
        for (dst, src) in frame.iter_mut().zip(order) {
            *dst = copy[src];
        }
    }
    Clip {
        id: format!("bad{seed}"),
        depth,
        ..clip.clone()
    }
}

fn filtering_efficacy() -> Outcome {
    let models = trained();
    let predictor = Predictor::new(models.base.clone(), None, InferConfig::default()).unwrap();
    let clean: Vec<Clip> = (0..20u64)
        .map(|i| Clip {
            id: format!("good{i}"),
            ..scene_clip(2000 + i, 12)
        })
        .collect();
    let mut corpus = clean.clone();
    corpus.extend(clean.iter().enumerate().map(|(i, c)| corrupted(c, i as u64)));
    let thresholds = FilterThresholds::default();
    let out = filter_clips(&corpus, &predictor, &thresholds, 0).unwrap();

    let bad_segments = out.report.iter().filter(|r| r.segment_id.starts_with("bad")).count();
    let hits = out.removed.iter().filter(|c| c.id.starts_with("bad")).count();
    let precision = hits as f64 / out.removed.len().max(1) as f64;
    let recall = hits as f64 / bad_segments.max(1) as f64;
    let passes = |v: Option<f64>, th: f64| v.is_some_and(|v| v >= th);
    let rule_holds = out.report.iter().all(|r| {
        let either = passes(r.median_delta1, thresholds.delta1) || passes(r.median_similarity, thresholds.similarity);
        r.kept == either
    });
    check(
        precision >= 0.9 && recall >= 0.9 && rule_holds,
        format!(
            "precision {precision:.2}, recall {recall:.2} ({} removed of {} segments); both-fail rule holds: {rule_holds}",
            out.removed.len(),
            out.report.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("flow-matching exactness", flow_exactness),
        ("rotary relative positions", rope_relative),
        ("interpolation init equivalence", interp_init_equivalence),
        ("packing neutrality", packing_neutrality),
        ("alignment oracle", alignment_oracle),
        ("TAE geometry", tae_geometry),
        ("end-to-end learning signal", learning_signal),
        ("long-video consistency", long_video),
        ("filtering efficacy", filtering_efficacy),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
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
