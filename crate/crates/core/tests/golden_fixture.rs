use std::fs;
use std::path::Path;

use odir::synth::{synth_dataset, SynthConfig};

fn files(root: &Path) -> Vec<String> {
    let mut out = vec!["manifest.tsv".to_string()];
    let mut tensors: Vec<String> = fs::read_dir(root.join("tensors"))
        .unwrap()
        .map(|e| format!("tensors/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    tensors.sort();
    out.extend(tensors);
    out
}

#[test]
fn regenerating_reproduces_checked_in_bytes() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden");
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(&SynthConfig::golden(), dir.path()).unwrap();
    let expected = files(&fixture);
    assert_eq!(files(dir.path()), expected);
    for f in &expected {
        assert!(fs::read(fixture.join(f)).unwrap() == fs::read(dir.path().join(f)).unwrap(), "{f} differs");
    }
}
