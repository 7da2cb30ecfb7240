use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use volalign_core::data::{
    encode_mvol, header_len, normalize_volume, read_mvol, resize_volume, synthesize_dataset, synthesize_records, Dataset, PhantomSpec, Split,
    Volume, VolumeRecord,
};
use volalign_core::Error;

fn record_strategy() -> impl Strategy<Value = VolumeRecord> {
    (1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(d, h, w)| {
            (
                Just([d, h, w]),
                prop::collection::vec(0.0f32..=1.0, d * h * w),
                "[A-Za-z0-9]{1,8}",
                "\\PC{0,40}",
                prop::collection::vec(0u8..=1, 1..10),
            )
        })
        .prop_map(|(dims, data, modality, report, labels)| VolumeRecord {
            id: "r".into(),
            modality,
            voxels: Volume::new(dims, data).unwrap(),
            report,
            labels,
            split: Split::Train,
        })
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn tiny_spec() -> PhantomSpec {
    PhantomSpec {
        grid_size: 8,
        n_records: 24,
        ..PhantomSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mvol_round_trip_is_identity(rec in record_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.mvol");
        volalign_core::data::write_mvol(&rec, &path).unwrap();
        let back = read_mvol(&path).unwrap();
        prop_assert_eq!(&back.modality, &rec.modality);
        prop_assert_eq!(&back.report, &rec.report);
        prop_assert_eq!(&back.labels, &rec.labels);
        prop_assert_eq!(back.voxels.dims(), rec.voxels.dims());
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.voxels), bits(&rec.voxels));
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(bytes.len(), header_len(&rec) + 4 * rec.voxels.len());
    }

    #[test]
    fn resize_stays_in_input_range(
        data in prop::collection::vec(-3.0f32..3.0, 27),
        target in (2usize..7, 2usize..7, 2usize..7),
    ) {
        let v = Volume::new([3, 3, 3], data).unwrap();
        let (lo, hi) = v.min_max().unwrap();
        let r = resize_volume(&v, [target.0, target.1, target.2]).unwrap();
        prop_assert_eq!(r.dims(), [target.0, target.1, target.2]);
        for &x in r.data() {
            prop_assert!(x >= lo && x <= hi, "{} outside [{}, {}]", x, lo, hi);
        }
    }

    #[test]
    fn resize_preserves_constants(c in -5.0f32..5.0, target in (2usize..9, 2usize..9, 2usize..9)) {
        let v = Volume::filled([4, 3, 5], c);
        let r = resize_volume(&v, [target.0, target.1, target.2]).unwrap();
        prop_assert!(r.data().iter().all(|&x| x == c));
    }

    #[test]
    fn normalize_maps_onto_unit_interval(data in prop::collection::vec(-100.0f32..100.0, 2..64)) {
        let n = data.len();
        let v = Volume::new([1, 1, n], data).unwrap();
        let out = normalize_volume(&v).unwrap();
        let (lo, hi) = out.min_max().unwrap();
        let (ilo, ihi) = v.min_max().unwrap();
        prop_assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)));
        if ihi > ilo {
            prop_assert_eq!(lo, 0.0);
            prop_assert!((hi - 1.0).abs() < 1e-6);
        } else {
            prop_assert_eq!(hi, 0.0);
        }
    }

    #[test]
    fn reports_name_their_modality_once(seed in any::<u64>()) {
        let spec = PhantomSpec { seed, ..tiny_spec() };
        let (m, recs) = synthesize_records(&spec).unwrap();
        for r in &recs {
            prop_assert_eq!(r.report.matches(r.modality.as_str()).count(), 1, "{}", r.report);
            r.validate(m.n_classes(), &m.modality_vocabulary, m.normal_class_policy).unwrap();
            for (k, &l) in r.labels.iter().enumerate() {
                if l == 1 {
                    prop_assert!(r.report.contains(&m.class_names[k]));
                }
            }
        }
    }
}

#[test]
fn zero_record_file_size_follows_layout() {
    let rec = VolumeRecord {
        id: "z".into(),
        modality: "T1".into(),
        voxels: Volume::filled([8, 8, 8], 0.0),
        report: "T1 sequence shows nothing.".into(),
        labels: vec![1, 0, 0, 0],
        split: Split::Test,
    };
    // magic + version + dims + modality + labels + report
    let header = 4 + 4 + 3 * 4 + (2 + 2) + (2 + 4) + (4 + rec.report.len());
    assert_eq!(header_len(&rec), header);
    assert_eq!(encode_mvol(&rec).unwrap().len(), header + 8 * 8 * 8 * 4);
}

#[test]
fn synthesis_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synthesize_dataset(&tiny_spec(), a.path()).unwrap();
    synthesize_dataset(&tiny_spec(), b.path()).unwrap();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!(ta.len(), 25);
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    synthesize_dataset(&PhantomSpec { seed: 1, ..tiny_spec() }, c.path()).unwrap();
    assert_ne!(ta, tree_bytes(c.path()));
}

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synthesize_dataset(&tiny_spec(), dir.path()).unwrap();
    let ds = Dataset::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(ds.manifest, manifest);
    let (_, mem) = synthesize_records(&tiny_spec()).unwrap();
    assert_eq!(ds.records, mem);

    std::fs::remove_file(dir.path().join(&manifest.records[3].path)).unwrap();
    assert!(matches!(Dataset::load(&dir.path().join("manifest.json")), Err(Error::Manifest(m)) if m.contains("missing file")));
}

#[test]
fn standard_benchmark_shape() {
    let spec = PhantomSpec::standard_benchmark();
    let (m, recs) = synthesize_records(&PhantomSpec { grid_size: 8, ..spec }).unwrap();
    let count = |s: Split| recs.iter().filter(|r| r.split == s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (600, 100, 100));
    assert_eq!(m.class_names.len(), 4);
    assert_eq!(m.modality_vocabulary, ["T1", "T2", "DWI"]);
}

#[test]
fn corrupt_files_give_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, recs) = synthesize_records(&tiny_spec()).unwrap();
    let bytes = encode_mvol(&recs[0]).unwrap();

    let cut = dir.path().join("cut.mvol");
    std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    match read_mvol(&cut) {
        Err(Error::Truncated { expected, actual }) => assert_eq!(expected - actual, 10),
        other => panic!("expected truncation error, got {other:?}"),
    }

    let mut versioned = bytes.clone();
    versioned[4..8].copy_from_slice(&999u32.to_le_bytes());
    let v = dir.path().join("v.mvol");
    std::fs::write(&v, &versioned).unwrap();
    assert!(matches!(read_mvol(&v), Err(Error::UnsupportedVersion(999))));

    let mut magic = bytes;
    magic[0] = b'X';
    let m = dir.path().join("m.mvol");
    std::fs::write(&m, &magic).unwrap();
    assert!(matches!(read_mvol(&m), Err(Error::BadMagic(_))));
}
