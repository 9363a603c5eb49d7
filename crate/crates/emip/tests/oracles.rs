//! Hand-computed and reference-implementation oracles for the neural modules.

use candle_core::{DType, Device, Tensor};
use emip::config::{Ablation, ModelConfig};
use emip::decoder::Ncd;
use emip::flownet::{flow_from_matching, prompt_from_matching, FlowNet};
use emip::gradcheck::{check, probe, randomize};
use emip::longterm::{stm_affinity, stm_read, MemoryEntry, MemoryPool};
use emip::losses::{flow_loss, seg_loss, ssim_per_sample, total_loss, warp};
use emip::model::Emip;
use emip::nn::host;
use emip::params::ParamStore;
use emip::prompts::{CrossAttention, GatedFfn, PromptBlock};
use emip_core::photometric::mean_ssim;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cpu() -> Device {
    Device::Cpu
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    Tensor::from_vec(v, shape, &cpu()).unwrap()
}

fn constant_flow(b: usize, h: usize, w: usize, dx: f64, dy: f64) -> Tensor {
    let mut v = Vec::with_capacity(b * 2 * h * w);
    for _ in 0..b {
        v.extend(std::iter::repeat(dx).take(h * w));
        v.extend(std::iter::repeat(dy).take(h * w));
    }
    Tensor::from_vec(v, (b, 2, h, w), &cpu()).unwrap()
}

pub fn warp_with_zero_flow_is_identity() {
    let img = random(&[2, 3, 7, 9], 1);
    let out = warp(&constant_flow(2, 7, 9, 0.0, 0.0), &img).unwrap();
    assert_eq!(host(&out).unwrap(), host(&img).unwrap());
}

pub fn warp_at_half_pixel_is_the_midpoint() {
    let img = random(&[1, 1, 5, 6], 2);
    let src = host(&img).unwrap();
    let out = host(&warp(&constant_flow(1, 5, 6, 0.5, 0.0), &img).unwrap()).unwrap();
    for y in 0..5 {
        for x in 0..5 {
            let want = 0.5 * (src[y * 6 + x] + src[y * 6 + x + 1]);
            assert!((out[y * 6 + x] - want).abs() < 1e-12);
        }
    }
    let out = host(&warp(&constant_flow(1, 5, 6, 0.0, 0.5), &img).unwrap()).unwrap();
    for y in 0..4 {
        for x in 0..6 {
            let want = 0.5 * (src[y * 6 + x] + src[(y + 1) * 6 + x]);
            assert!((out[y * 6 + x] - want).abs() < 1e-12);
        }
    }
}

pub fn integer_shift_samples_the_shifted_pixel() {
    let img = random(&[1, 2, 6, 6], 3);
    let src = host(&img).unwrap();
    let out = host(&warp(&constant_flow(1, 6, 6, 2.0, -1.0), &img).unwrap()).unwrap();
    for c in 0..2 {
        for y in 0..6 {
            for x in 0..6 {
                // positions outside the image clamp to the border
                let sx = (x + 2).min(5);
                let sy = y.max(1) - 1;
                assert_eq!(out[c * 36 + y * 6 + x], src[c * 36 + sy * 6 + sx]);
            }
        }
    }
}

pub fn warp_agrees_with_the_scalar_reference_under_random_flow() {
    let img = random(&[1, 3, 8, 10], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let flow_v: Vec<f64> = (0..2 * 80).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let flow = Tensor::from_vec(flow_v.clone(), (1, 2, 8, 10), &cpu()).unwrap();
    let ours = host(&warp(&flow, &img).unwrap()).unwrap();
    // reference expects interleaved (dx, dy) and HWC images
    let inter: Vec<f64> = (0..80).flat_map(|i| [flow_v[i], flow_v[80 + i]]).collect();
    let src = host(&img).unwrap();
    let hwc: Vec<f64> = (0..80).flat_map(|i| (0..3).map(move |c| (c, i))).map(|(c, i)| src[c * 80 + i]).collect();
    let theirs = emip_core::photometric::warp(&inter, &hwc, 8, 10, 3);
    for i in 0..80 {
        for c in 0..3 {
            assert!((ours[c * 80 + i] - theirs[i * 3 + c]).abs() < 1e-12);
        }
    }
}

pub fn ssim_matches_the_scalar_reference_and_is_one_on_itself() {
    let a = random(&[2, 3, 16, 20], 6);
    let b = random(&[2, 3, 16, 20], 7);
    let ours = host(&ssim_per_sample(&a, &b).unwrap()).unwrap();
    let (ha, hb) = (host(&a).unwrap(), host(&b).unwrap());
    for s in 0..2 {
        let plane = 3 * 320;
        let to_hwc = |v: &[f64]| -> Vec<f64> { (0..320).flat_map(|i| (0..3).map(move |c| v[s * plane + c * 320 + i])).collect() };
        let theirs = mean_ssim(&to_hwc(&ha), &to_hwc(&hb), 16, 20, 3);
        assert!((ours[s] - theirs).abs() < 1e-9, "{} vs {theirs}", ours[s]);
    }
    for v in host(&ssim_per_sample(&a, &a).unwrap()).unwrap() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

pub fn flow_loss_is_bounded_and_zero_for_perfect_reconstruction() {
    let prev = random(&[2, 3, 16, 16], 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let other = random(&[2, 3, 16, 16], rng.gen());
        let flow = constant_flow(2, 16, 16, rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
        let l = flow_loss(&other, &prev, &flow).unwrap().to_scalar::<f64>().unwrap();
        assert!((0.0..=2.0).contains(&l), "{l}");
        let perfect = warp(&flow, &prev).unwrap();
        let l = flow_loss(&perfect, &prev, &flow).unwrap().to_scalar::<f64>().unwrap();
        assert!(l.abs() < 1e-6, "{l}");
    }
}

pub fn total_loss_is_exactly_additive() {
    let logits = random(&[2, 1, 8, 8], 10).affine(6.0, -3.0).unwrap();
    let gt = random(&[2, 1, 8, 8], 11).ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
    let seg = seg_loss(&logits, &gt).unwrap();
    let flow = Tensor::new(0.37f64, &cpu()).unwrap();
    let t = total_loss(&seg, Some(&flow)).unwrap();
    assert_eq!(t.report.l_total, t.report.l_seg + t.report.l_flow);
    assert_eq!(t.report.l_seg, t.report.l_iou + t.report.l_bce + t.report.l_eloss);
}

fn one_hot_matching(targets: &[usize], n: usize) -> Tensor {
    let mut m = vec![0f64; n * n];
    for (p, &q) in targets.iter().enumerate() {
        m[p * n + q] = 1.0;
    }
    Tensor::from_vec(m, (1, n, n), &cpu()).unwrap()
}

pub fn one_hot_matching_gives_exact_displacements_on_8x8() {
    let (h, w) = (8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let targets: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..h * w)).collect();
        let v = host(&flow_from_matching(&one_hot_matching(&targets, h * w), h, w).unwrap()).unwrap();
        for (p, &q) in targets.iter().enumerate() {
            let dx = (q % w) as f64 - (p % w) as f64;
            let dy = (q / w) as f64 - (p / w) as f64;
            assert_eq!((v[p], v[h * w + p]), (dx, dy));
        }
    }
    // identity matching gives zero flow everywhere
    let id: Vec<usize> = (0..h * w).collect();
    let v = host(&flow_from_matching(&one_hot_matching(&id, h * w), h, w).unwrap()).unwrap();
    assert!(v.iter().all(|&x| x == 0.0));
}

pub fn prompt_channels_are_row_major_candidates() {
    let (h, w) = (3, 4);
    let m = random(&[2, 12, 12], 13);
    let g = host(&prompt_from_matching(&m, h, w).unwrap()).unwrap();
    let mv = host(&m).unwrap();
    for b in 0..2 {
        for p in 0..12 {
            for q in 0..12 {
                assert_eq!(g[b * 144 + q * 12 + p], mv[b * 144 + p * 12 + q]);
            }
        }
    }
}

pub fn matching_rows_are_distributions() {
    let store = ParamStore::new(14, DType::F64);
    let net = FlowNet::new(&store.scope("flownet"), [8, 8, 16], 2, 1).unwrap();
    let a = random(&[2, 16, 8, 8], 15).affine(4.0, -2.0).unwrap();
    let b = random(&[2, 16, 8, 8], 16).affine(4.0, -2.0).unwrap();
    let out = net.match_and_flow(&a, &b).unwrap();
    let rows = host(&out.m.sum(2).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 64);
    assert!(rows.iter().all(|r| (r - 1.0).abs() < 1e-5));
}

fn assert_gradients_agree(store: &ParamStore, loss: impl Fn() -> emip::Result<Tensor>) {
    randomize(store, 17, 0.5).unwrap();
    let r = check(store, loss, 1e-5, 6, 18).unwrap();
    assert!(r.coords_checked > 0);
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

pub fn cross_attention_gradients_match_finite_differences() {
    let store = ParamStore::new(19, DType::F64);
    let ca = CrossAttention::new(&store.scope("ca"), 4, 6, 8, 2).unwrap();
    let q = random(&[1, 4, 4, 4], 20);
    let kv = random(&[1, 6, 4, 4], 21);
    let w = probe(&Tensor::zeros((1, 4, 4, 4), DType::F64, &cpu()).unwrap(), 22).unwrap();
    assert_gradients_agree(&store, || Ok((ca.forward(&q, &kv)? * &w)?.sum_all()?));
}

pub fn gated_ffn_gradients_match_finite_differences() {
    let store = ParamStore::new(23, DType::F64);
    let ffn = GatedFfn::new(&store.scope("ffn"), 4, 2).unwrap();
    let x = random(&[1, 4, 5, 5], 24);
    let w = probe(&x, 25).unwrap();
    assert_gradients_agree(&store, || Ok((ffn.forward(&x)? * &w)?.sum_all()?));
}

pub fn decoder_gradients_match_finite_differences() {
    let store = ParamStore::new(26, DType::F64);
    let ncd = Ncd::new(&store.scope("decoder"), [4, 6, 8], 4).unwrap();
    let f2 = random(&[1, 4, 16, 16], 27);
    let f3 = random(&[1, 6, 8, 8], 28);
    let f4 = random(&[1, 8, 4, 4], 29);
    let w = probe(&Tensor::zeros((1, 1, 16, 16), DType::F64, &cpu()).unwrap(), 30).unwrap();
    assert_gradients_agree(&store, || Ok((ncd.coarse_logits(&f2, &f3, &f4)? * &w)?.sum_all()?));
}

pub fn fresh_prompt_blocks_are_exact_identities() {
    let store = ParamStore::new(31, DType::F32);
    let block = PromptBlock::new(&store.scope("motion_collector"), 8, 12, 1, 2).unwrap();
    let q = random(&[2, 8, 4, 4], 32).to_dtype(DType::F32).unwrap();
    let kv = random(&[2, 12, 4, 4], 33).to_dtype(DType::F32).unwrap();
    assert_eq!(host(&block.forward(&q, &kv).unwrap()).unwrap(), host(&q).unwrap());

    // inside the full model: the camouflage feeder leaves the flow untouched
    let mut model = ModelConfig::default();
    model.backbone_depths = [1, 1, 1, 1];
    let store = ParamStore::new(34, DType::F32);
    let m = Emip::new(&store, &model, &Ablation::default(), 64, 64).unwrap();
    let a = random(&[1, 3, 64, 64], 35).to_dtype(DType::F32).unwrap();
    let b = random(&[1, 3, 64, 64], 36).to_dtype(DType::F32).unwrap();
    let prompted = m.flow(&a, &b, Some(&m.backbone.forward(&a).unwrap())).unwrap();
    let plain = m.flownet.forward(&a, &b).unwrap();
    assert_eq!(host(&prompted.v).unwrap(), host(&plain.v).unwrap());
    let out = m.forward_pair(&a, &b).unwrap();
    assert_eq!(host(&out.f2_prompted).unwrap(), host(&out.pyramid.f2).unwrap());
}

fn entry(keys: &[f64], values: &[f64], frame: usize) -> MemoryEntry {
    let n = keys.len();
    MemoryEntry {
        key: Tensor::from_vec(keys.to_vec(), (1, 1, 1, n), &cpu()).unwrap(),
        value: Tensor::from_vec(values.to_vec(), (1, 1, 1, n), &cpu()).unwrap(),
        frame_index: frame,
    }
}

pub fn fifo_pool_keeps_the_latest_five() {
    let mut pool = MemoryPool::new(5).unwrap();
    for f in 1..=7 {
        pool.push(entry(&[0.0], &[0.0], f)).unwrap();
    }
    assert_eq!(pool.frame_indices().collect::<Vec<_>>(), vec![3, 4, 5, 6, 7]);
}

pub fn hand_computed_four_token_read() {
    // d_k = 1, one query token with key 1: affinities are proportional to
    // exp(k) = 1, 1, 2, 3, i.e. 1/7, 1/7, 2/7, 3/7.
    let mut pool = MemoryPool::new(5).unwrap();
    pool.push(entry(&[0.0, 0.0], &[7.0, 0.0], 0)).unwrap();
    pool.push(entry(&[2f64.ln(), 3f64.ln()], &[14.0, 7.0], 1)).unwrap();
    let kq = Tensor::new(&[[[[1.0f64]]]], &cpu()).unwrap();
    let vq = Tensor::new(&[[[[5.0f64]]]], &cpu()).unwrap();
    let a = host(&stm_affinity(&pool, &kq).unwrap()).unwrap();
    for (got, want) in a.iter().zip([1.0 / 7.0, 1.0 / 7.0, 2.0 / 7.0, 3.0 / 7.0]) {
        assert!((got - want).abs() < 1e-12);
    }
    let p = host(&stm_read(&pool, &kq, &vq).unwrap()).unwrap();
    // read = (7 + 0 + 28 + 21) / 7 = 8, then the query value
    assert!((p[0] - 8.0).abs() < 1e-6 && p[1] == 5.0, "{p:?}");
}

pub fn affinity_rows_sum_to_one() {
    let mut pool = MemoryPool::new(5).unwrap();
    for f in 0..4 {
        pool.push(MemoryEntry {
            key: random(&[2, 3, 4, 4], 40 + f as u64),
            value: random(&[2, 5, 4, 4], 50 + f as u64),
            frame_index: f,
        })
        .unwrap();
    }
    let a = stm_affinity(&pool, &random(&[2, 3, 4, 4], 60)).unwrap();
    assert_eq!(a.dims(), &[2, 16, 64]);
    assert!(host(&a.sum(2).unwrap()).unwrap().iter().all(|r| (r - 1.0).abs() < 1e-6));
}

/// Registers each check as a test and lists them in `CHECKS` so that runners
/// outside the test harness can call them too.
macro_rules! checks {
    ($($name:ident),* $(,)?) => {
        pub const CHECKS: &[(&str, fn())] = &[$((stringify!($name), $name)),*];

        mod harness {
            $(#[test]
            fn $name() {
                super::$name()
            })*
        }
    };
}

checks!(
    warp_with_zero_flow_is_identity,
    warp_at_half_pixel_is_the_midpoint,
    integer_shift_samples_the_shifted_pixel,
    warp_agrees_with_the_scalar_reference_under_random_flow,
    ssim_matches_the_scalar_reference_and_is_one_on_itself,
    flow_loss_is_bounded_and_zero_for_perfect_reconstruction,
    total_loss_is_exactly_additive,
    one_hot_matching_gives_exact_displacements_on_8x8,
    prompt_channels_are_row_major_candidates,
    matching_rows_are_distributions,
    cross_attention_gradients_match_finite_differences,
    gated_ffn_gradients_match_finite_differences,
    decoder_gradients_match_finite_differences,
    fresh_prompt_blocks_are_exact_identities,
    fifo_pool_keeps_the_latest_five,
    hand_computed_four_token_read,
    affinity_rows_sum_to_one,
);
