use hierfuse::backbone::{Backbone, BackboneConfig};
use hierfuse::fusion::{FusionConfig, FusionParams};
use hierfuse::prompt::{arrange_prompt, dropout, Arrangement};
use hierfuse::tensor::nn::{multihead_attention, AttentionParams, Linear};
use hierfuse::{Rng, Tensor};
use proptest::prelude::*;

/// (heads, d_t, d_v) with heads dividing both widths.
fn widths() -> impl Strategy<Value = (usize, usize, usize)> {
    (prop::sample::select(vec![1usize, 2, 4]), 1usize..4, 1usize..4).prop_map(|(h, a, b)| (h, h * a * 2, h * b * 2))
}

fn permute_levels(levels: &Tensor<f32>, order: &[usize]) -> Tensor<f32> {
    let chunk = levels.numel() / levels.dim(0);
    let data = levels.data();
    let out: Vec<f32> = order.iter().flat_map(|&l| data[l * chunk..(l + 1) * chunk].to_vec()).collect();
    Tensor::new(out, levels.shape()).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn level_order_does_not_change_fusion(
        (h, dt, dv) in widths(),
        (l, b, n, t) in (1usize..5, 1usize..3, 1usize..6, 1usize..4),
        seed in any::<u64>(),
    ) {
        let p = FusionParams::<f32>::new(dt, dv, &FusionConfig { heads: h, zero_init_out: false, ..Default::default() }, seed).unwrap();
        let mut rng = Rng::new(seed ^ 1);
        let e = Tensor::randn(&[b, t, dt], 1.0, &mut rng);
        let levels = Tensor::randn(&[l, b, n, dv], 1.0, &mut rng);
        let mut order: Vec<usize> = (0..l).collect();
        rng.shuffle(&mut order);
        let permuted = permute_levels(&levels, &order);
        let z = |lv: &Tensor<f32>| {
            let raw = hierfuse::fusion::levels_by_patch(lv).unwrap();
            p.integrate_levels(&p.text_to_visual(&e, lv).unwrap(), &raw).unwrap()
        };
        prop_assert!(max_abs_diff(z(&levels).data(), z(&permuted).data()) < 1e-5);
        let fused = p.fuse(&e, &levels).unwrap().embeddings;
        let fused_perm = p.fuse(&e, &permuted).unwrap().embeddings;
        prop_assert!(max_abs_diff(fused.data(), fused_perm.data()) < 1e-5);
    }

    #[test]
    fn zeroed_projections_make_fusion_the_identity(
        (h, dt, dv) in widths(),
        (l, b, n, t) in (1usize..5, 1usize..3, 1usize..6, 1usize..4),
        seed in any::<u64>(),
    ) {
        let mut p = FusionParams::<f32>::new(dt, dv, &FusionConfig { heads: h, zero_init_out: false, ..Default::default() }, seed).unwrap();
        for lin in [&mut p.film, &mut p.self_attn.out, &mut p.cross_attn.out] {
            *lin = Linear::zeros(lin.in_dim(), lin.out_dim(), lin.bias.is_some());
        }
        let mut rng = Rng::new(seed ^ 2);
        let e = Tensor::randn(&[b, t, dt], 1.0, &mut rng);
        let levels = Tensor::randn(&[l, b, n, dv], 1.0, &mut rng);
        let out = p.fuse(&e, &levels).unwrap();
        prop_assert_eq!(out.embeddings.data(), e.data());
    }

    #[test]
    fn attention_rows_are_distributions(
        (h, dt, dv) in widths(),
        (l, b, n, t) in (1usize..5, 1usize..3, 1usize..8, 1usize..5),
        scale in 0.1f64..30.0,
        seed in any::<u64>(),
    ) {
        let p = FusionParams::<f32>::new(dt, dv, &FusionConfig { heads: h, zero_init_out: false, ..Default::default() }, seed).unwrap();
        let mut rng = Rng::new(seed ^ 3);
        let e = Tensor::randn(&[b, t, dt], scale, &mut rng);
        let levels = Tensor::randn(&[l, b, n, dv], scale, &mut rng);
        let w = p.fuse(&e, &levels).unwrap().attention.unwrap();
        prop_assert_eq!(w.shape(), &[b, h, t, n]);
        for row in w.data().chunks(n) {
            let s: f64 = row.iter().map(|&x| f64::from(x)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        let params = AttentionParams::<f32>::new(dv, dv, h, false, &mut rng).unwrap();
        let x = Tensor::randn(&[b, l, dv], scale, &mut rng);
        let sw = multihead_attention(&x, &x, &x, &params, None).unwrap().weights;
        for row in sw.data().chunks(l) {
            let s: f64 = row.iter().map(|&x| f64::from(x)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn eval_dropout_is_bit_identical(
        shape in prop::collection::vec(1usize..6, 1..4),
        rate in 0.0f64..0.95,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
        let before = rng.counter();
        let y = dropout(&x, rate, false, &mut rng).unwrap();
        prop_assert_eq!(rng.counter(), before);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn arrangements_only_reorder_tokens(
        (k, m, d) in (1usize..4, 1usize..9, 1usize..5),
        which in 0usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let class = Tensor::<f32>::randn(&[2, k, d], 1.0, &mut rng);
        let ctx = Tensor::<f32>::randn(&[2, m, d], 1.0, &mut rng);
        let arr = [Arrangement::RfThenC, Arrangement::CThenRf, Arrangement::Split][which];
        let seq = arrange_prompt(&class, Some(&ctx), arr).unwrap();
        prop_assert_eq!(seq.shape(), &[2, k + m, d]);
        let mut got: Vec<u32> = seq.data().iter().map(|v| v.to_bits()).collect();
        let mut want: Vec<u32> = class.data().iter().chain(ctx.data()).map(|v| v.to_bits()).collect();
        got.sort_unstable();
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn image_encoding_is_batch_consistent(batch in 2usize..5, pick in 0usize..4, seed in any::<u64>()) {
        let cfg = BackboneConfig::default();
        let bb = Backbone::<f32>::init(&cfg, 0).unwrap();
        let mut rng = Rng::new(seed);
        let imgs = Tensor::<f32>::randn(&[batch, 3, cfg.image_size, cfg.image_size], 1.0, &mut rng);
        let i = pick % batch;
        let one = imgs.narrow(0, i, 1).unwrap();
        let (all_img, all_lv) = bb.encode_image(&imgs).unwrap();
        let (one_img, one_lv) = bb.encode_image(&one).unwrap();
        let d = cfg.embed_dim;
        prop_assert_eq!(&all_img.v_cls.data()[i * d..(i + 1) * d], one_img.v_cls.data());
        let per = one_lv.levels.numel() / cfg.num_levels();
        for l in 0..cfg.num_levels() {
            let base = (l * batch + i) * per;
            prop_assert_eq!(&all_lv.levels.data()[base..base + per], &one_lv.levels.data()[l * per..(l + 1) * per]);
        }
        prop_assert_eq!(all_lv.levels.shape(), &[cfg.num_levels(), batch, cfg.num_patches(), cfg.vision_width]);
    }
}
