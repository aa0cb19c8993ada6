//! Replays the checked-in fuzz corpus through the same round-trip checks the
//! fuzz targets make, so the seeds stay meaningful on a stable toolchain.

use std::fs;
use std::path::{Path, PathBuf};

use mft_core::config::RunConfig;
use mft_core::data::{
    decode_tensor, encode_tensor, format_labels, parse_labels, DatasetManifest, SynthSpec,
};
use mft_core::metrics::MetricsReport;
use mft_core::model::Checkpoint;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Returns how many seeds were accepted by the parser.
fn replay(target: &str, check: impl Fn(&[u8]) -> bool) -> usize {
    seeds(target).iter().filter(|(_, b)| check(b)).count()
}

#[test]
fn manifest_seeds() {
    let accepted = replay("manifest", |data| {
        let Ok(text) = std::str::from_utf8(data) else {
            return false;
        };
        let Ok(m) = DatasetManifest::parse(text, "/fuzz") else {
            return false;
        };
        assert_eq!(DatasetManifest::parse(&m.render(), "/fuzz").unwrap(), m);
        true
    });
    assert!(accepted >= 2);
}

#[test]
fn tensor_file_seeds() {
    let accepted = replay("tensor_file", |data| {
        let Some((&pick, body)) = data.split_first() else {
            return false;
        };
        let shape = match pick % 4 {
            0 => vec![body.len() / 8],
            1 => vec![2, body.len() / 16],
            2 => vec![3, 1, 2],
            _ => vec![usize::from(pick)],
        };
        let Ok(t) = decode_tensor(body, &shape) else {
            return false;
        };
        assert_eq!(encode_tensor(&t), body);
        true
    });
    assert!(accepted >= 2);
}

#[test]
fn checkpoint_seeds() {
    let accepted = replay("checkpoint", |data| {
        let Ok(ck) = Checkpoint::decode(data) else {
            return false;
        };
        let bytes = ck.encode().unwrap();
        assert_eq!(bytes, data, "checkpoint encoding is canonical");
        true
    });
    assert_eq!(accepted, seeds("checkpoint").len());
}

#[test]
fn run_config_seeds() {
    let accepted = replay("run_config", |data| {
        let Ok(text) = std::str::from_utf8(data) else {
            return false;
        };
        let Ok(rc) = RunConfig::parse(text, Path::new("/fuzz")) else {
            return false;
        };
        assert_eq!(
            RunConfig::parse(&rc.render(), Path::new("/fuzz")).unwrap(),
            rc
        );
        true
    });
    assert_eq!(accepted, seeds("run_config").len());
}

#[test]
fn report_csv_seeds() {
    let accepted = replay("report_csv", |data| {
        let Ok(text) = std::str::from_utf8(data) else {
            return false;
        };
        let Ok(r) = MetricsReport::from_csv(text) else {
            return false;
        };
        let csv = r.to_csv();
        assert_eq!(MetricsReport::from_csv(&csv).unwrap().to_csv(), csv);
        true
    });
    assert_eq!(accepted, 2);
}

#[test]
fn synth_spec_seeds() {
    let accepted = replay("synth_spec", |data| {
        let Ok(text) = std::str::from_utf8(data) else {
            return false;
        };
        let Ok(spec) = SynthSpec::parse(text) else {
            return false;
        };
        assert_eq!(SynthSpec::parse(&spec.render()).unwrap(), spec);
        true
    });
    assert_eq!(accepted, seeds("synth_spec").len());
}

#[test]
fn label_seeds() {
    let accepted = replay("labels", |data| {
        let Some((&n, body)) = data.split_first() else {
            return false;
        };
        let Ok(text) = std::str::from_utf8(body) else {
            return false;
        };
        let Ok(labels) = parse_labels(text, usize::from(n % 32)) else {
            return false;
        };
        assert_eq!(
            parse_labels(&format_labels(&labels), labels.len()).unwrap(),
            labels
        );
        true
    });
    assert_eq!(accepted, 2);
}
