use citrinet::data::{read_manifest, synth_data, write_manifest, ManifestEntry, SYNTH_WORDS};
use citrinet::frontend::{log_mel, read_wav, SAMPLE_RATE};
use citrinet::model::output_frames;
use citrinet::tokenizer::{ctc_feasible, TokenizerKind, TokenizerModel};

#[test]
fn twenty_utterances_all_feasible() {
    let dir = tempfile::tempdir().unwrap();
    let entries = synth_data(20, 5, dir.path(), 3).unwrap();
    assert_eq!(entries.len(), 20);
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert_eq!(text.lines().count(), 20);

    let loaded = read_manifest(dir.path().join("manifest.json")).unwrap();
    let corpus: Vec<&str> = loaded.iter().map(|e| e.text.as_str()).collect();
    let tok = TokenizerModel::train(&corpus, 6, TokenizerKind::Char).unwrap();
    assert!(tok.vocab_size() <= 8);
    for e in &loaded {
        for w in e.text.split(' ') {
            assert!(SYNTH_WORDS[..5].contains(&w), "{w}");
        }
        let feats = log_mel(&read_wav(&e.audio_filepath).unwrap(), SAMPLE_RATE).unwrap();
        let ids = tok.encode(&e.text);
        assert!(ctc_feasible(&ids, output_frames(feats.frames())), "{}", e.text);
        assert!((e.duration * SAMPLE_RATE as f64 - read_wav(&e.audio_filepath).unwrap().len() as f64).abs() < 1e-6);
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_data(4, 10, a.path(), 11).unwrap();
    synth_data(4, 10, b.path(), 11).unwrap();
    for name in ["utt_0000.wav", "utt_0003.wav", "manifest.json"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn different_seeds_give_different_transcripts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let x: Vec<_> = synth_data(10, 30, a.path(), 1).unwrap().into_iter().map(|e| e.text).collect();
    let y: Vec<_> = synth_data(10, 30, b.path(), 2).unwrap().into_iter().map(|e| e.text).collect();
    assert_ne!(x, y);
}

#[test]
fn vocabulary_size_is_bounded() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth_data(1, 0, dir.path(), 0).is_err());
    assert!(synth_data(1, 31, dir.path(), 0).is_err());
}

#[test]
fn manifest_round_trip_and_path_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let entries = vec![
        ManifestEntry {
            audio_filepath: "a.wav".into(),
            duration: 1.5,
            text: "Hello, World".into(),
        },
        ManifestEntry {
            audio_filepath: "/abs/b.wav".into(),
            duration: 0.25,
            text: "it's".into(),
        },
    ];
    let path = dir.path().join("m.json");
    write_manifest(&path, &entries).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back[0].audio_filepath, dir.path().join("a.wav"));
    assert_eq!(back[0].text, "hello world");
    assert_eq!(back[1].audio_filepath, std::path::PathBuf::from("/abs/b.wav"));
    assert_eq!(back[1].duration, 0.25);
}

#[test]
fn manifest_rejects_empty_text_and_bad_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(&path, "{\"audio_filepath\":\"a.wav\",\"duration\":1.0,\"text\":\" ,. \"}\n").unwrap();
    assert!(read_manifest(&path).is_err());
    std::fs::write(&path, "{not json}\n").unwrap();
    assert!(read_manifest(&path).is_err());
}
