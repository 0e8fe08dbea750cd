use minnet::data::{parse_records, synthetic_dataset, ImageRecord};
use minnet::jpeg::{decode, encode, jpeg_round, jpeg_round_record, mse, psnr, RgbImage};
use proptest::prelude::*;

/// 100 crops of public-domain photographs, downsampled to Cifar scale.
fn natural() -> Vec<ImageRecord> {
    let bytes = include_bytes!("fixtures/natural32.bin");
    parse_records(bytes).expect("fixture parses")
}

fn images() -> Vec<RgbImage> {
    natural().iter().map(RgbImage::from_record).collect()
}

fn fraction(imgs: &[RgbImage], pred: impl Fn(&RgbImage) -> bool) -> f64 {
    imgs.iter().filter(|i| pred(i)).count() as f64 / imgs.len() as f64
}

#[test]
fn higher_quality_gives_higher_psnr() {
    let imgs = images();
    assert_eq!(imgs.len(), 100);
    let f = fraction(&imgs, |i| psnr(&jpeg_round(i, 90).unwrap(), i) > psnr(&jpeg_round(i, 10).unwrap(), i));
    assert!(f >= 0.95, "{f}");
}

#[test]
fn distortion_grows_as_quality_falls() {
    for imgs in [images(), synthetic_dataset(100, 10, 5).unwrap().iter().map(RgbImage::from_record).collect()] {
        let f = fraction(&imgs, |i| mse(&jpeg_round(i, 10).unwrap(), i) >= mse(&jpeg_round(i, 90).unwrap(), i));
        assert!(f >= 0.95, "{f}");
    }
}

// 4:2:0 loses colour-edge detail well past these bounds on many photo crops,
// so the bound is checked where subsampling is lossless: grey copies.
#[test]
fn quality_95_error_bounds_on_grey_images() {
    for img in images() {
        let grey: Vec<u8> = img
            .data()
            .chunks(3)
            .flat_map(|p| {
                let y = ((u16::from(p[0]) * 77 + u16::from(p[1]) * 150 + u16::from(p[2]) * 29) >> 8) as u8;
                [y; 3]
            })
            .collect();
        let img = RgbImage::new(32, 32, grey).unwrap();
        let out = jpeg_round(&img, 95).unwrap();
        let diffs: Vec<u8> = img.data().iter().zip(out.data()).map(|(a, b)| a.abs_diff(*b)).collect();
        let max = *diffs.iter().max().unwrap();
        let mean = diffs.iter().map(|&d| f64::from(d)).sum::<f64>() / diffs.len() as f64;
        assert!(max <= 25 && mean <= 3.0, "max {max} mean {mean}");
    }
}

#[test]
fn recompression_is_nearly_a_fixed_point() {
    for img in images() {
        let once = jpeg_round(&img, 90).unwrap();
        let twice = jpeg_round(&once, 90).unwrap();
        let mean = once.data().iter().zip(twice.data()).map(|(a, b)| f64::from(a.abs_diff(*b))).sum::<f64>()
            / once.data().len() as f64;
        assert!(mean <= 2.0, "{mean}");
    }
}

#[test]
fn encoding_is_deterministic_and_lossy_below_100() {
    let imgs = images();
    for img in imgs.iter().take(10) {
        let a = encode(img, 70).unwrap();
        assert_eq!(a, encode(img, 70).unwrap());
        assert_eq!(decode(&a).unwrap(), decode(&a).unwrap());
        let r = jpeg_round(img, 90).unwrap();
        assert_eq!((r.width(), r.height()), (32, 32));
        assert_ne!(r.data(), img.data());
    }
}

#[test]
fn record_round_keeps_label_and_identity_at_100() {
    let recs = natural();
    let r = &recs[40];
    assert_eq!(&jpeg_round_record(r, 100).unwrap(), r);
    let q = jpeg_round_record(r, 30).unwrap();
    assert_eq!(q.label(), r.label());
    assert_ne!(q.pixels(), r.pixels());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_image_round_trips_with_its_shape(
        w in 1usize..40, h in 1usize..40, q in 1u8..=100, seed in any::<u64>()
    ) {
        let mut s = seed;
        let data = (0..w * h * 3).map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 56) as u8
        }).collect();
        let img = RgbImage::new(w, h, data).unwrap();
        let out = jpeg_round(&img, q).unwrap();
        prop_assert_eq!((out.width(), out.height()), (w, h));
    }

    #[test]
    fn corrupted_streams_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>(), cut in any::<prop::sample::Index>()) {
        let img = RgbImage::from_record(&natural()[3]);
        let mut s = encode(&img, 60).unwrap();
        let i = pos.index(s.len());
        s[i] = byte;
        let _ = decode(&s);
        let _ = decode(&s[..cut.index(s.len())]);
    }

    #[test]
    fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..600)) {
        let mut s = vec![0xff, 0xd8];
        s.extend(bytes);
        let _ = decode(&s);
    }
}
