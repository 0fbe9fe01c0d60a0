//! The embedding file format shared with the Python exporter, checked against
//! a byte-level encoder written independently of the library.

use cirkit::store::{load_index, read_index, write_index, Embedding, GalleryIndex, StoreError};

fn encode(dim: u32, records: &[(&str, &[f32])]) -> Vec<u8> {
    let mut b = b"SQEMB1".to_vec();
    b.extend(1u16.to_le_bytes());
    b.extend(dim.to_le_bytes());
    b.extend((records.len() as u64).to_le_bytes());
    for (id, v) in records {
        b.extend((id.len() as u16).to_le_bytes());
        b.extend(id.as_bytes());
        for x in *v {
            b.extend(x.to_le_bytes());
        }
    }
    b
}

#[test]
fn hand_encoded_file_loads() {
    let bytes = encode(3, &[("img_001", &[1.0, 2.0, 2.0]), ("ünïcode", &[0.0, -0.5, 1e-30])]);
    let idx = read_index(bytes.as_slice()).unwrap();
    assert_eq!((idx.dim(), idx.len()), (3, 2));
    assert_eq!(idx.ids(), ["img_001", "ünïcode"]);
    assert_eq!(idx.get("img_001").unwrap().as_slice(), [1.0, 2.0, 2.0]);
    assert_eq!(idx.get("img_001").unwrap().normalize().unwrap().as_slice(), [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
}

#[test]
fn writer_matches_hand_encoding() {
    let recs: Vec<(String, Embedding)> = vec![
        ("a".into(), Embedding::new(vec![0.25, -1.0]).unwrap()),
        ("bb".into(), Embedding::new(vec![3.5, 0.0]).unwrap()),
    ];
    let idx = GalleryIndex::from_records(2, recs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.sqemb");
    write_index(&idx, &path).unwrap();
    let expect = encode(2, &[("a", &[0.25, -1.0]), ("bb", &[3.5, 0.0])]);
    assert_eq!(std::fs::read(&path).unwrap(), expect);
    assert_eq!(load_index(&path).unwrap().ids(), ["a", "bb"]);
}

#[test]
fn malformed_files_are_rejected() {
    let good = encode(2, &[("a", &[1.0, 0.0])]);

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_index(bad_magic.as_slice()), Err(StoreError::BadMagic)));

    let mut bad_version = good.clone();
    bad_version[6] = 2;
    assert!(matches!(read_index(bad_version.as_slice()), Err(StoreError::UnsupportedVersion(2))));

    assert!(matches!(read_index(&good[..good.len() - 1]), Err(StoreError::TruncatedFile(_))));
    assert!(matches!(read_index(&good[..10]), Err(StoreError::TruncatedFile(_))));

    let dup = encode(2, &[("a", &[1.0, 0.0]), ("a", &[0.0, 1.0])]);
    assert!(matches!(read_index(dup.as_slice()), Err(StoreError::DuplicateId(id)) if id == "a"));

    let nan = encode(2, &[("a", &[1.0, f32::NAN])]);
    assert!(matches!(read_index(nan.as_slice()), Err(StoreError::NonFiniteValue { .. })));

    let mut short_count = encode(2, &[("a", &[1.0, 0.0])]);
    short_count[12] = 3;
    assert!(matches!(read_index(short_count.as_slice()), Err(StoreError::TruncatedFile(_))));
}

#[test]
fn round_trip_is_byte_identical() {
    let bytes = encode(4, &[("z", &[1.0, 2.0, 3.0, 4.0]), ("y", &[-0.0, 1e-7, 5.0, f32::MAX])]);
    let idx = read_index(bytes.as_slice()).unwrap();
    let mut out = Vec::new();
    cirkit::store::write_index_to(&idx, &mut out).unwrap();
    assert_eq!(out, bytes);
}
