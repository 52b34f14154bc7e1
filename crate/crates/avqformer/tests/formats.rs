use std::collections::BTreeMap;
use std::path::Path;

use avqf_core::encoders::FrameTensor;
use avqformer::checkpoint::{CheckpointBundle, Entry};
use avqformer::manifest::{load_manifest, parse_manifest, render_manifest, save_manifest, ManifestRecord, MediaModality, RecordBody};
use avqformer::avvf;
use proptest::prelude::*;

fn modality() -> impl Strategy<Value = MediaModality> {
    prop_oneof![Just(MediaModality::Video), Just(MediaModality::Image), Just(MediaModality::Audio)]
}

fn body() -> impl Strategy<Value = RecordBody> {
    prop_oneof![
        "\\PC{1,40}".prop_map(|caption| RecordBody::Caption { caption }),
        ("\\PC{1,30}", "\\PC{1,30}").prop_map(|(instruction, response)| RecordBody::Instruction { instruction, response }),
    ]
}

fn records() -> impl Strategy<Value = Vec<ManifestRecord>> {
    prop::collection::vec(("[a-z]{1,6}", "[a-zA-Z0-9_./ -]{1,20}", modality(), body()), 0..12).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (id, media_path, modality, body))| ManifestRecord { id: format!("{id}-{i}"), media_path, modality, body })
            .collect()
    })
}

fn bundle() -> impl Strategy<Value = CheckpointBundle> {
    let entry = (prop::collection::vec(1usize..4, 1..4), any::<bool>(), any::<u64>());
    (prop::collection::vec(entry, 0..6), prop::collection::btree_map("[a-z_.]{1,10}", "\\PC{0,20}", 0..4)).prop_map(|(es, metadata)| {
        let entries = es
            .into_iter()
            .enumerate()
            .map(|(i, (shape, frozen, seed))| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|k| f32::from_bits((seed as u32).wrapping_mul(2_654_435_761).wrapping_add(k as u32))).collect();
                Entry { name: format!("t{i}.w"), shape, frozen, data }
            })
            .collect();
        CheckpointBundle { entries, metadata: metadata.into_iter().collect::<BTreeMap<_, _>>() }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trips(recs in records()) {
        let text = render_manifest(&recs);
        prop_assert_eq!(&parse_manifest(&text, Path::new("m.jsonl")).unwrap(), &recs);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        save_manifest(&p, &recs).unwrap();
        prop_assert_eq!(load_manifest(&p).unwrap(), recs);
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical(b in bundle()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.avqf");
        b.save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let loaded = CheckpointBundle::load(&p).unwrap();
        prop_assert_eq!(loaded.to_bytes(), first.clone());
        let q = dir.path().join("d.avqf");
        loaded.save(&q).unwrap();
        prop_assert_eq!(std::fs::read(&q).unwrap(), first);
        prop_assert_eq!(loaded.metadata, b.metadata);
    }

    #[test]
    fn avvf_round_trips_exactly(n in 1usize..4, h in 1usize..6, w in 1usize..6, c in 1usize..4, px in prop::collection::vec(0.0f32..=1.0, 4 * 6 * 6 * 4)) {
        let per = h * w * c;
        let frames: Vec<FrameTensor> = (0..n).map(|i| FrameTensor::new(px[i * per..(i + 1) * per].to_vec(), h, w, c, i).unwrap()).collect();
        let bytes = avvf::encode(&frames).unwrap();
        prop_assert_eq!(&bytes[..4], b"AVVF");
        prop_assert_eq!(bytes.len(), 24 + 4 * n * per);
        prop_assert_eq!(avvf::decode(&bytes, Path::new("x.avvf")).unwrap(), frames);
    }
}
