use std::collections::BTreeMap;

use proptest::prelude::*;
use psgalign::corpus::*;
use psgalign::prep::{EpochMatrix, PreparedNight};
use psgalign::{Gender, Modality, SubjectMeta};

fn night(id: &str, mods: &[Modality], epochs: usize, seed: f32) -> PreparedNight {
    let mut meta = SubjectMeta::new(id);
    meta.age = Some(47.5);
    meta.gender = Gender::F;
    meta.site = Some("north".into());
    let epochs_map: BTreeMap<Modality, EpochMatrix> = mods
        .iter()
        .map(|&m| {
            let w = m.token_width();
            let data = (0..epochs * w).map(|k| seed + k as f32 * 1e-3).collect();
            (m, EpochMatrix { rows: epochs, cols: w, data })
        })
        .collect();
    PreparedNight { epochs: epochs_map, meta }
}

fn sample_corpus() -> Corpus {
    let nights = vec![
        night("a", &[Modality::Eeg, Modality::Eog], 2, 0.0),
        night("b", &[Modality::Ecg, Modality::Ibi, Modality::Spo2], 3, 1.0),
        night("c", &[Modality::Resp], 1, -2.0),
    ];
    let mut labels = Labels::new();
    labels.insert(
        "a".into(),
        NightLabels {
            stages: vec![0, 2],
            target: Some(1),
        },
    );
    labels.insert(
        "b".into(),
        NightLabels {
            stages: vec![4, 4, 3],
            target: None,
        },
    );
    Corpus::new(nights, vec![Split::Pretrain, Split::Finetune, Split::Test], labels)
}

#[test]
fn directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = sample_corpus();
    c.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.indices(Split::Finetune), vec![1]);
    assert_eq!(back.labels_of(0).unwrap().target, Some(1));
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("split = \"pretrain\""));
    assert_eq!(corpus_hash(dir.path()).unwrap().len(), 64);
}

#[test]
fn header_errors() {
    let bytes = encode_nights(&sample_corpus().nights);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_nights(&bad), Err(CorpusError::VersionMismatch { .. })));
    let mut newer = bytes.clone();
    newer[4] = 9;
    assert!(matches!(decode_nights(&newer), Err(CorpusError::VersionMismatch { version: 9, .. })));
    assert!(matches!(decode_nights(&bytes[..bytes.len() - 3]), Err(CorpusError::Corrupt(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(decode_nights(&trailing), Err(CorpusError::Corrupt(_))));
}

#[test]
fn manifest_must_match_corpus() {
    let dir = tempfile::tempdir().unwrap();
    sample_corpus().save(dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap().replace("epochs = 3", "epochs = 4");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(Corpus::load(dir.path()), Err(CorpusError::Manifest(_))));
}

#[test]
fn missing_labels_file_gives_empty_labels() {
    let dir = tempfile::tempdir().unwrap();
    sample_corpus().save(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
    assert!(Corpus::load(dir.path()).unwrap().labels.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decoding_never_panics(flips in proptest::collection::vec((any::<usize>(), any::<u8>()), 1..6), cut in any::<usize>()) {
        let mut bytes = encode_nights(&sample_corpus().nights);
        for (pos, v) in flips {
            let n = bytes.len();
            bytes[pos % n] ^= v;
        }
        bytes.truncate(cut % (bytes.len() + 1));
        let _ = decode_nights(&bytes);
    }
}
