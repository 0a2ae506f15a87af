use flowimg::export::{decode_tensor, read_tensor, write_tensor};
use proptest::prelude::*;

fn encoded(shape: &[u64], values: &[f32]) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.fimg");
    write_tensor(&path, shape, values).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn every_single_byte_corruption_is_rejected() {
    let values = [0.0, -1.5, 3.25, f32::MIN_POSITIVE, 1e30, 7.0];
    let bytes = encoded(&[2, 3], &values);
    assert_eq!(decode_tensor(&bytes).unwrap(), (vec![2, 3], values.to_vec()));
    for pos in 0..bytes.len() {
        for mask in 1..=255u8 {
            let mut bad = bytes.clone();
            bad[pos] ^= mask;
            assert!(decode_tensor(&bad).is_err(), "byte {pos} ^ {mask:#04x} accepted");
        }
    }
    for cut in 0..bytes.len() {
        assert!(decode_tensor(&bytes[..cut]).is_err(), "truncation at {cut} accepted");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_tensor(&longer).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_and_random_corruption(
        shape in prop::collection::vec(1u64..5, 1..4),
        seed in any::<u64>(),
        pos_frac in 0.0f64..1.0,
        mask in 1u8..=255,
    ) {
        let n: u64 = shape.iter().product();
        let values: Vec<f32> = (0..n).map(|i| ((seed.wrapping_add(i) % 1000) as f32 - 500.0) / 7.0).collect();
        let bytes = encoded(&shape, &values);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.fimg");
        std::fs::write(&path, &bytes).unwrap();
        prop_assert_eq!(read_tensor(&path).unwrap(), (shape.clone(), values));
        let pos = ((bytes.len() as f64) * pos_frac) as usize;
        let mut bad = bytes;
        bad[pos] ^= mask;
        prop_assert!(decode_tensor(&bad).is_err());
    }
}
