use aerocon::checkpoint::{self, CheckpointError, HEADER_LEN};
use aerocon::embeddings::{self, Row};
use aerocon::losslog;
use aerocon::ppm;
use aerocon_core::augment::Image;
use aerocon_core::pipeline::{LossRecord, Record, Values};
use proptest::prelude::*;

fn p6(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

#[test]
fn every_byte_value_survives_ppm() {
    let pixels: Vec<u8> = (0..=255u8).flat_map(|b| [b, 255 - b, b / 2]).collect();
    let file = p6(16, 16, &pixels);
    let img = ppm::decode(&file).unwrap();
    assert_eq!(ppm::encode(&img), file);
}

#[test]
fn ppm_header_comments_are_skipped() {
    let mut file = b"P6 # made by hand\n2 1\n# size above\n255\n".to_vec();
    file.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
    let img = ppm::decode(&file).unwrap();
    assert_eq!(ppm::encode(&img), p6(2, 1, &[1, 2, 3, 4, 5, 6]));
}

#[test]
fn ppm_errors() {
    assert!(ppm::decode(b"P5\n1 1\n255\n\x00").is_err());
    assert!(ppm::decode(&p6(2, 2, &[0; 5])).is_err());
    assert!(ppm::decode(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
}

fn records() -> Vec<Record> {
    vec![
        Record::u64s("a", vec![1, u64::MAX]),
        Record::tensor(
            "b",
            &aerocon_core::numerics::Tensor::new([2, 2], vec![0.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        ),
        Record::bytes("c", b"text".to_vec()),
    ]
}

#[test]
fn checkpoint_records_round_trip() {
    let bytes = checkpoint::encode(&records());
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, records());
    assert_eq!(checkpoint::encode(&back), bytes);
    match &back[1].values {
        Values::F64(v) => assert_eq!(v[1].to_bits(), (-0.0f64).to_bits()),
        _ => unreachable!(),
    }
}

proptest! {
    #[test]
    fn ppm_reencodes_exactly(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..3 * w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let file = p6(w, h, &pixels);
        prop_assert_eq!(ppm::encode(&ppm::decode(&file).unwrap()), file);
    }

    #[test]
    fn images_in_byte_grid_reencode(bytes in prop::collection::vec(any::<u8>(), 12)) {
        let img = Image::new(2, 2, bytes.iter().map(|&b| ppm::from_byte(b)).collect()).unwrap();
        let back = ppm::decode(&ppm::encode(&img)).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn embeddings_parse_back_exactly(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let dim = values.len();
        let rows = vec![
            Row { id: "x/patch_00000.ppm".into(), label: Some(1), features: values.clone() },
            Row { id: "y".into(), label: None, features: values.iter().map(|v| -v).collect() },
        ];
        let text = embeddings::render(dim, &rows).unwrap();
        let (d, parsed) = embeddings::parse(&text).unwrap();
        prop_assert_eq!(d, dim);
        prop_assert_eq!(&parsed, &rows);
        prop_assert_eq!(embeddings::render(d, &parsed).unwrap(), text);
    }

    #[test]
    fn loss_log_round_trips(vals in prop::collection::vec(0.0f64..20.0, 6), epoch in 0usize..1000, batch in 0usize..100) {
        let r = LossRecord { epoch, batch, total: vals[0], lq1: vals[1], lq2: vals[2], lg1: vals[3], lg2: vals[4], lr: vals[5] };
        let text = losslog::render(&[r]);
        let back = losslog::parse(&text).unwrap();
        prop_assert_eq!(&back, &vec![r]);
        prop_assert_eq!(losslog::render(&back), text);
    }

    #[test]
    fn any_payload_byte_flip_fails_the_checksum(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = checkpoint::encode(&records());
        let i = HEADER_LEN + pos.index(bytes.len() - HEADER_LEN);
        bytes[i] ^= 1 << bit;
        let is_checksum = matches!(checkpoint::decode(&bytes), Err(CheckpointError::Checksum { .. }));
        prop_assert!(is_checksum);
    }
}
