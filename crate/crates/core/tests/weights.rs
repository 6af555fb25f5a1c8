//! FRWT checkpoint container: byte layout, ordering, and corruption
//! handling.

use frnet_core::weights::{load, parse, save, serialize_entries, Entry};
use proptest::prelude::*;

fn sample_entries() -> Vec<Entry> {
    vec![
        ("zeta".into(), vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]),
        ("alpha".into(), vec![3], vec![0.5, f64::MIN_POSITIVE, 1e300]),
        ("mid.name".into(), vec![1, 1, 1], vec![-0.125]),
    ]
}

#[test]
fn round_trip_preserves_values_and_sorts_names() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.frwt");
    save(&sample_entries(), &path).unwrap();
    let back = load(&path).unwrap();
    let names: Vec<&str> = back.iter().map(|e| e.0.as_str()).collect();
    assert_eq!(names, vec!["alpha", "mid.name", "zeta"]);
    let zeta = back.iter().find(|e| e.0 == "zeta").unwrap();
    assert_eq!(zeta.1, vec![2, 2]);
    assert_eq!(zeta.2, vec![1.0, -2.5, 3.25, 0.0]);
    // f64 payloads are exact, including extreme magnitudes
    let alpha = back.iter().find(|e| e.0 == "alpha").unwrap();
    assert_eq!(alpha.2[1], f64::MIN_POSITIVE);
    assert_eq!(alpha.2[2], 1e300);
}

#[test]
fn serialization_is_byte_deterministic() {
    let a = serialize_entries(&sample_entries()).unwrap();
    let mut shuffled = sample_entries();
    shuffled.reverse();
    let b = serialize_entries(&shuffled).unwrap();
    assert_eq!(a, b, "entry order must not leak into the bytes");
    assert_eq!(&a[0..4], b"FRWT");
}

#[test]
fn shape_mismatch_is_rejected() {
    let bad: Vec<Entry> = vec![("x".into(), vec![2, 3], vec![0.0; 5])];
    assert!(serialize_entries(&bad).is_err());
}

#[test]
fn parse_rejects_corruption() {
    let bytes = serialize_entries(&sample_entries()).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(parse(&bad_magic).is_err());

    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    assert!(parse(&bad_version).is_err());

    let truncated = &bytes[..bytes.len() - 1];
    assert!(parse(truncated).is_err());

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(parse(&trailing).is_err());

    assert!(parse(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Any finite payload survives a byte round trip exactly.
    #[test]
    fn payload_round_trip(values in prop::collection::vec(-1e12f64..1e12, 1..32)) {
        let n = values.len();
        let entries: Vec<Entry> = vec![("p".into(), vec![n], values.clone())];
        let bytes = serialize_entries(&entries).unwrap();
        let back = parse(&bytes).unwrap();
        prop_assert_eq!(&back[0].2, &values);
    }
}
