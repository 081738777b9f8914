use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use point2::imaging::Heatmap;
use point2::tracknet::{
    extract_features, fe_layer, heatmap_to_poi, poi_convolution, track_view, FeatureKernel,
    FeatureMap, NetworkConfig, NetworkParams,
};
use point2::{Image, Vec2};

fn feature_map(channels: usize, width: usize, height: usize, values: &[f64]) -> FeatureMap {
    FeatureMap {
        channels,
        height,
        width,
        data: (0..channels * width * height).map(|i| values[i % values.len()]).collect(),
    }
}

fn shifted(f: &FeatureMap, dx: isize, dy: isize) -> FeatureMap {
    let mut out = FeatureMap {
        data: vec![0.0; f.data.len()],
        ..f.clone()
    };
    for c in 0..f.channels {
        for row in 0..f.height as isize {
            for col in 0..f.width as isize {
                let (sc, sr) = (col - dx, row - dy);
                if sc >= 0 && sr >= 0 && sc < f.width as isize && sr < f.height as isize {
                    out.data[(c * f.height + row as usize) * f.width + col as usize] = f.at(c, sc as usize, sr as usize);
                }
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn poi_convolution_commutes_with_integer_shifts(
        values in prop::collection::vec(-3.0..3.0f64, 97),
        kvals in prop::collection::vec(-2.0..2.0f64, 75),
        k in 0usize..3,
        dx in -4isize..5,
        dy in -4isize..5,
    ) {
        let (w, h, c) = (20, 18, 3);
        let map = feature_map(c, w, h, &values);
        let side = 2 * k + 1;
        let kernel = FeatureKernel { channels: c, radius: k, data: kvals[..c * side * side].to_vec() };
        let weight = FeatureKernel::ones(c, k);
        let a = poi_convolution(&map, &kernel, &weight, true).unwrap();
        let b = poi_convolution(&shifted(&map, dx, dy), &kernel, &weight, true).unwrap();
        // Compare away from the border band touched by the shift or the kernel.
        let m = (k + 4) as isize + 1;
        for row in m..h as isize - m {
            for col in m..w as isize - m {
                let want = a.get((col - dx) as usize, (row - dy) as usize);
                prop_assert_eq!(b.get(col as usize, row as usize), want);
            }
        }
    }

    #[test]
    fn fe_layer_matches_bilinear_oracle(
        values in prop::collection::vec(-3.0..3.0f64, 61),
        x in 2.0..13.0f64,
        y in 2.0..11.0f64,
    ) {
        let map = feature_map(2, 16, 14, &values);
        let kernel = fe_layer(&map, &Vec2::new(x, y), 1).unwrap();
        for c in 0..2 {
            for j in 0..3 {
                for i in 0..3 {
                    let (sx, sy) = (x + i as f64 - 1.0, y + j as f64 - 1.0);
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                    let at = |col: usize, row: usize| map.at(c, col.min(15), row.min(13));
                    let want = (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                        + fx * (1.0 - fy) * at(x0 + 1, y0)
                        + (1.0 - fx) * fy * at(x0, y0 + 1)
                        + fx * fy * at(x0 + 1, y0 + 1);
                    let got = kernel.data[(c * 3 + j) * 3 + i];
                    prop_assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn a_single_spike_is_found(col in 0usize..24, row in 0usize..20) {
        let mut data = vec![-40.0; 24 * 20];
        data[row * 24 + col] = 40.0;
        let p = heatmap_to_poi(&Heatmap { width: 24, height: 20, data }, 30).unwrap();
        prop_assert!((p.x - col as f64).abs() < 0.01 && (p.y - row as f64).abs() < 0.01);
    }
}

#[test]
fn two_equal_spikes_give_their_midpoint() {
    let mut data = vec![-40.0; 16 * 16];
    data[5 * 16 + 6] = 30.0;
    data[5 * 16 + 8] = 30.0;
    let p = heatmap_to_poi(&Heatmap { width: 16, height: 16, data }, 8).unwrap();
    assert!((p.x - 7.0).abs() < 1e-9 && (p.y - 5.0).abs() < 1e-9);
}

#[test]
fn an_embedded_copy_of_the_kernel_is_the_global_maximum() {
    let (w, h, c) = (15, 13, 4);
    let kernel = FeatureKernel {
        channels: c,
        radius: 1,
        data: (0..c * 9).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect(),
    };
    let mut map = FeatureMap {
        channels: c,
        height: h,
        width: w,
        data: vec![0.0; c * w * h],
    };
    let (pc, pr) = (9, 4);
    for ch in 0..c {
        for j in 0..3 {
            for i in 0..3 {
                map.data[(ch * h + pr + j - 1) * w + pc + i - 1] = kernel.data[(ch * 3 + j) * 3 + i];
            }
        }
    }
    let hm = poi_convolution(&map, &kernel, &FeatureKernel::ones(c, 1), true).unwrap();
    assert_eq!(hm.argmax(), (pc, pr));
}

#[test]
fn zero_weight_gives_a_zero_heatmap() {
    let map = feature_map(2, 8, 8, &[1.0, -2.0, 0.5]);
    let kernel = fe_layer(&map, &Vec2::new(3.0, 4.0), 1).unwrap();
    let zero = FeatureKernel {
        data: vec![0.0; kernel.data.len()],
        ..kernel.clone()
    };
    let hm = poi_convolution(&map, &kernel, &zero, true).unwrap();
    assert!(hm.data.iter().all(|&v| v == 0.0));
    // Without the weight the same call is a plain correlation.
    let plain = poi_convolution(&map, &kernel, &zero, false).unwrap();
    assert!(plain.data.iter().any(|&v| v != 0.0));
}

fn test_image(w: usize, h: usize) -> Image {
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f32, (i / w) as f32);
            (x * 0.37).sin() + (y * 0.21).cos() * 0.5
        })
        .collect();
    Image::from_data(w, h, 1.0, data).unwrap()
}

#[test]
fn both_branches_share_weights_bitwise() {
    let cfg = NetworkConfig::default();
    let params = NetworkParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let img = test_image(32, 24);
    let a = extract_features(&params, &img).unwrap();
    let b = extract_features(&params, &img).unwrap();
    assert_eq!(a, b);

    // Tracking an image into itself uses the same map on both sides, so the
    // heatmap is symmetric in the sense h_p(q) = h_q(p) for unit weights.
    let cfg = NetworkConfig {
        kernel_radius: 0,
        use_weight: false,
        ..cfg
    };
    let params = NetworkParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(4));
    let (p, q) = (Vec2::new(9.0, 7.0), Vec2::new(20.0, 15.0));
    let out = track_view(&params, &img, &img, &[p, q]).unwrap();
    let h_pq = out[0].heatmap.get(20, 15);
    let h_qp = out[1].heatmap.get(9, 7);
    assert_eq!(h_pq, h_qp);
}

#[test]
fn features_have_the_input_resolution() {
    let cfg = NetworkConfig {
        out_channels: 8,
        ..NetworkConfig::default()
    };
    let params = NetworkParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let f = extract_features(&params, &test_image(64, 64)).unwrap();
    assert_eq!((f.channels, f.height, f.width), (8, 64, 64));
    assert!(extract_features(&params, &test_image(60, 64)).is_err());
}
