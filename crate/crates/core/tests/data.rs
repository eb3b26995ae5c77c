use dama::data::{
    augment_with, decode_mcs, encode_mcs, generate, read_mcs, write_mcs, AugmentParams, MultiChannelImage, SynthConfig,
    NUCLEUS_CHANNELS,
};
use dama::DamaError;
use proptest::prelude::*;

fn image() -> impl Strategy<Value = MultiChannelImage> {
    (1usize..6, 1usize..6, 1usize..8, proptest::option::of(0u32..100)).prop_flat_map(|(h, w, c, label)| {
        prop::collection::vec(0f32..=1.0, h * w * c).prop_map(move |data| MultiChannelImage {
            height: h,
            width: w,
            channels: c,
            data,
            label,
        })
    })
}

fn batch() -> impl Strategy<Value = Vec<MultiChannelImage>> {
    (image(), 1usize..5).prop_flat_map(|(first, n)| {
        let (h, w, c, labeled) = (first.height, first.width, first.channels, first.label.is_some());
        prop::collection::vec(
            (prop::collection::vec(0f32..=1.0, h * w * c), 0u32..100).prop_map(move |(data, l)| MultiChannelImage {
                height: h,
                width: w,
                channels: c,
                data,
                label: labeled.then_some(l),
            }),
            n,
        )
        .prop_map(move |rest| std::iter::once(first.clone()).chain(rest).collect::<Vec<_>>())
    })
}

fn params() -> impl Strategy<Value = AugmentParams> {
    (any::<bool>(), any::<bool>(), 0u8..4, -4i32..=4, -4i32..=4).prop_map(|(fh, fv, q, dy, dx)| AugmentParams {
        flip_h: fh,
        flip_v: fv,
        quarter_turns: q,
        shift: (dy, dx),
        scale: 1.0,
    })
}

fn sorted_pixels(img: &MultiChannelImage) -> Vec<Vec<u32>> {
    let mut px: Vec<Vec<u32>> =
        img.data.chunks(img.channels).map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    px.sort();
    px
}

proptest! {
    #[test]
    fn mcs_round_trips(images in batch()) {
        let bytes = encode_mcs(&images).unwrap();
        prop_assert_eq!(decode_mcs(&bytes).unwrap(), images);
    }

    #[test]
    fn truncated_mcs_is_rejected(images in batch(), cut in 1usize..64) {
        let bytes = encode_mcs(&images).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        let err = decode_mcs(&bytes[..keep]).unwrap_err();
        prop_assert!(matches!(err, DamaError::Format { .. }), "{}", err);
    }

    #[test]
    fn rigid_augmentation_permutes_pixels(img in image(), p in params()) {
        let out = augment_with(&img, &p);
        prop_assert_eq!(out.label, img.label);
        prop_assert_eq!(out.height * out.width, img.height * img.width);
        prop_assert_eq!(sorted_pixels(&out), sorted_pixels(&img));
    }
}

#[test]
fn mcs_file_round_trip() {
    let images = generate(&SynthConfig { height: 16, width: 16, ..SynthConfig::default() }, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.mcs");
    write_mcs(&path, &images).unwrap();
    assert_eq!(read_mcs(&path).unwrap(), images);
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_mcs(dir.path().join("absent.mcs")).unwrap_err();
    assert!(matches!(err, DamaError::Io { .. }), "{err}");
}

#[test]
fn identity_augmentation_is_exact() {
    let img = &generate(&SynthConfig::default(), 1).unwrap()[0];
    assert_eq!(&augment_with(img, &AugmentParams::IDENTITY), img);
}

#[test]
fn class_marker_channel_dominates() {
    let cfg = SynthConfig::default();
    let images = generate(&cfg, 100 * cfg.classes).unwrap();
    for class in 0..cfg.classes {
        let members: Vec<_> = images.iter().filter(|i| i.label == Some(class as u32)).collect();
        assert!(members.len() >= 100, "class {class} has {} samples", members.len());
        let means: Vec<f64> = (NUCLEUS_CHANNELS..cfg.channels)
            .map(|c| members.iter().map(|i| i.channel_mean(c)).sum::<f64>() / members.len() as f64)
            .collect();
        let best = means.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best + NUCLEUS_CHANNELS, class + NUCLEUS_CHANNELS, "class {class}: {means:?}");
    }
}

#[test]
fn values_stay_in_unit_range() {
    for img in generate(&SynthConfig::default(), 20).unwrap() {
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
