use hierlight::exec::ConvSpec;
use hierlight::reference::{self, ulp_diff};
use hierlight::tensor::{concat, conv2d_raw, maxpool2d, upsample_nearest};
use hierlight::{Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn rand_tensor(rng: &mut Xoshiro256PlusPlus, n: usize, c: usize, h: usize, w: usize, ints: bool) -> Tensor {
    Tensor::from_fn(n, c, h, w, |_, _, _, _| {
        if ints {
            rng.gen_range(-4i32..=4) as f32
        } else {
            rng.gen_range(-1.0f32..1.0)
        }
    })
    .unwrap()
}

fn max_ulps(a: &Tensor, b: &Tensor) -> u32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| ulp_diff(*x, *y)).max().unwrap_or(0)
}

#[test]
fn conv_matches_naive_loops_in_every_group_regime() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0xC0);
    for case in 0..120 {
        let ints = case % 3 == 0;
        let g = [1, 2, 4][case % 3];
        let depthwise = case % 5 == 0;
        let cin_g = rng.gen_range(1..=3);
        let (cin, cout) = if depthwise {
            let c = rng.gen_range(1..=6);
            (c, c)
        } else {
            (cin_g * g, rng.gen_range(1..=3) * g)
        };
        let groups = if depthwise { cin } else { g };
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let s = rng.gen_range(1..=3);
        let p = rng.gen_range(0..=k / 2);
        let h = rng.gen_range(k..k + 9);
        let w = rng.gen_range(k..k + 9);
        let n = rng.gen_range(1..=2);
        let x = rand_tensor(&mut rng, n, cin, h, w, ints);
        let wshape = [cout, cin / groups, k, k];
        let wt = rand_tensor(&mut rng, 1, 1, 1, wshape.iter().product(), ints).into_data();
        let bias: Option<Vec<f32>> = (case % 2 == 0).then(|| (0..cout).map(|i| i as f32 - 1.0).collect());
        let got = conv2d_raw(&x, &wt, wshape, bias.as_deref(), s, p, groups).unwrap();
        let want = reference::conv2d(&x, &wt, wshape, bias.as_deref(), s, p, groups);
        if ints {
            assert_eq!(got.data(), want.data(), "case {case}");
        } else {
            assert!(max_ulps(&got, &want) <= 4, "case {case}");
        }
    }
}

#[test]
fn maxpool_upsample_concat_match_oracles() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0xBEEF);
    for case in 0..100 {
        let ints = case % 2 == 0;
        let c = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let x = rand_tensor(&mut rng, 1, c, h, w, ints);

        let k = [1, 2, 3, 5][rng.gen_range(0..4)];
        if k <= h && k <= w {
            let s = rng.gen_range(1..=2);
            let p = rng.gen_range(0..=k / 2);
            assert_eq!(maxpool2d(&x, k, s, p).unwrap().data(), reference::maxpool2d(&x, k, s, p).data());
        }

        let f = rng.gen_range(2..=3);
        assert_eq!(upsample_nearest(&x, f).unwrap().data(), reference::upsample_nearest(&x, f).data());

        let cy = rng.gen_range(1..=3);
        let y = rand_tensor(&mut rng, 1, cy, h, w, ints);
        assert_eq!(concat(&[&x, &y]).unwrap().data(), reference::concat(&[&x, &y]).data());
    }
}

#[test]
fn kernels_are_deterministic() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let x = rand_tensor(&mut rng, 1, 8, 17, 13, false);
    let wt = rand_tensor(&mut rng, 1, 1, 1, 16 * 8 * 9, false).into_data();
    let a = conv2d_raw(&x, &wt, [16, 8, 3, 3], None, 1, 1, 1).unwrap();
    let b = conv2d_raw(&x, &wt, [16, 8, 3, 3], None, 1, 1, 1).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// A grouped convolution equals a dense one whose weight is block diagonal.
    #[test]
    fn grouped_equals_block_diagonal(
        g in 1usize..4, cig in 1usize..3, cog in 1usize..3, k in prop::sample::select(vec![1usize, 3]),
        seed in any::<u64>(),
    ) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let (cin, cout) = (cig * g, cog * g);
        let x = rand_tensor(&mut rng, 1, cin, 6, 5, true);
        let wg = rand_tensor(&mut rng, 1, 1, 1, cout * cig * k * k, true).into_data();
        let mut dense = vec![0.0f32; cout * cin * k * k];
        for oc in 0..cout {
            let grp = oc / cog;
            for ci in 0..cig {
                for t in 0..k * k {
                    dense[(oc * cin + grp * cig + ci) * k * k + t] = wg[(oc * cig + ci) * k * k + t];
                }
            }
        }
        let a = conv2d_raw(&x, &wg, [cout, cig, k, k], None, 1, k / 2, g).unwrap();
        let b = conv2d_raw(&x, &dense, [cout, cin, k, k], None, 1, k / 2, 1).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    /// Standard-to-depthwise MAC ratio at c_in = c_out = c is exactly c.
    #[test]
    fn depthwise_mac_ratio(c in 1usize..256, k in prop::sample::select(vec![1usize, 3, 5]), s in 1usize..3, hw in 8usize..64) {
        let x = Shape::new(1, c, hw, hw);
        let dense = ConvSpec::new(c, c, k, s).macs(x).unwrap();
        let dw = ConvSpec::depthwise(c, k, s).macs(x).unwrap();
        let out = ConvSpec::depthwise(c, k, s).output_shape(x).unwrap();
        prop_assert_eq!(dw, (c * k * k * out.h * out.w) as u64);
        prop_assert_eq!(dense, dw * c as u64);
    }

    /// Concatenation followed by channel slicing returns every input unchanged.
    #[test]
    fn concat_then_slice_is_identity(cs in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let parts: Vec<Tensor> = cs.iter().map(|&c| rand_tensor(&mut rng, 2, c, 3, 4, false)).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let joined = concat(&refs).unwrap();
        let mut start = 0;
        for part in &parts {
            let back = joined.channel_slice(start, part.c()).unwrap();
            prop_assert_eq!(part.data(), back.data());
            start += part.c();
        }
    }

    /// Every upsampled element copies its source cell.
    #[test]
    fn upsample_index_rule(h in 1usize..6, w in 1usize..6, f in 2usize..4, seed in any::<u64>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 1, 2, h, w, false);
        let y = upsample_nearest(&x, f).unwrap();
        for c in 0..2 {
            for i in 0..h * f {
                for j in 0..w * f {
                    prop_assert_eq!(y.get(0, c, i, j), x.get(0, c, i / f, j / f));
                }
            }
        }
    }
}
