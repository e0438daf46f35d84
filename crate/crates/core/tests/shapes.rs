use proptest::prelude::*;

use shadow_inpaint::data::{BinaryMask, ImageTensor};
use shadow_inpaint::networks::{
    make_ablation_variant, EncoderDecoderConfig, FusionNetConfig, Generator, GeneratorConfig, Variant,
};

fn input(size: usize, seed: u64) -> (ImageTensor, BinaryMask) {
    let img = ImageTensor::from_fn(size, size, |y, x| {
        let v = ((y * 31 + x * 17 + seed as usize) % 97) as f64 / 96.0;
        [v, 1.0 - v, 0.5]
    });
    let mask = BinaryMask::from_fn(size, size, |y, x| (x + y + seed as usize) % 3 == 0);
    (img, mask)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_matches_input_resolution(base in 1usize..5, blocks in 0usize..3, quarter in 1usize..6, seed in 0u64..1000, naive in any::<bool>()) {
        let size = 4 * quarter;
        let cfg = if naive {
            GeneratorConfig::Naive(EncoderDecoderConfig::scaled(base, blocks))
        } else {
            GeneratorConfig::Fusion(FusionNetConfig::scaled(base, blocks))
        };
        let model = Generator::build(&cfg, seed).unwrap();
        let (img, mask) = input(size, seed);
        let out = model.forward(&img, &mask).unwrap();
        prop_assert_eq!(out.image.dim(), (3, size, size));
        prop_assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
        let trace = model.trace_shapes(size, size);
        prop_assert_eq!(trace.last().unwrap().1, (3, size, size));
        if let Some(acts) = out.fusion {
            prop_assert_eq!(acts.fusion.w1.dim(), (4 * base, quarter, quarter));
            prop_assert_eq!(acts.fusion.fused.dim(), (4 * base, quarter, quarter));
        }
    }

    #[test]
    fn every_variant_keeps_the_output_contract(v in 0usize..7, seed in 0u64..1000) {
        let base = Generator::build(&GeneratorConfig::Fusion(FusionNetConfig::scaled(2, 1)), seed).unwrap();
        let model = make_ablation_variant(&base, Variant::ALL[v], seed).unwrap();
        let (img, mask) = input(8, seed);
        prop_assert_eq!(model.restore(&img, &mask).unwrap().dims(), (8, 8));
    }
}

#[test]
fn invalid_sizes_are_rejected() {
    let model = Generator::build(&GeneratorConfig::Fusion(FusionNetConfig::scaled(2, 1)), 0).unwrap();
    let (img, _) = input(10, 0);
    assert!(model.forward(&img, &BinaryMask::zeros(10, 10)).is_err());
    let (img, _) = input(8, 0);
    assert!(model.forward(&img, &BinaryMask::zeros(4, 4)).is_err());
}
