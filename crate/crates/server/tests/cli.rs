//! The `vidkg` subcommands run in-process over the demo bundle.

use std::path::{Path, PathBuf};

use clap::Parser;
use vidkg_core::graph::video_to_kg;
use vidkg_core::kb::load_kb;
use vidkg_core::lexicon::LexiconDb;
use vidkg_core::store::Store;
use vidkg_server::cli::{run, Cli, CliError};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn vidkg(args: &[&str]) -> Result<String, CliError> {
    let cli = Cli::try_parse_from(std::iter::once("vidkg").chain(args.iter().copied())).unwrap();
    let mut out = Vec::new();
    run(cli, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_build_query() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixtures().join("demo.toml");
    let bundle = fixtures().join("demo_bundle");
    let out = vidkg(&[
        "--config", s(&config), "--store", s(tmp.path()),
        "ingest", s(&bundle), "--created-at", "2026-01-01T00:00:00Z",
    ])
    .unwrap();
    assert!(out.contains("4 windows, 5 keyframes, 20 triplets"), "{out}");
    let kb_file = tmp.path().join("kb/demo_kitchen_street.json");
    assert_eq!(
        std::fs::read(&kb_file).unwrap(),
        std::fs::read(fixtures().join("demo_bundle.kb.json")).unwrap()
    );

    let out = vidkg(&["--config", s(&config), "--store", s(tmp.path()), "build-kg", s(&kb_file)]).unwrap();
    assert!(out.contains("v0001.json"), "{out}");
    let lex = LexiconDb::load(&fixtures().join("lexicon.txt")).unwrap();
    let stored = Store::open(tmp.path()).unwrap().load_graph("demo_kitchen_street", 1, Some(&lex)).unwrap();
    assert_eq!(stored, video_to_kg(&load_kb(&kb_file).unwrap(), &lex));

    let out = vidkg(&["--config", s(&config), "--store", s(tmp.path()), "query", "chef", "--top-k", "3"]).unwrap();
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 2, "{out}");
    assert!(rows[1].starts_with("1    demo_kitchen_street"), "{out}");
    assert!(rows[1].contains("chef.n.01") && rows[1].contains("2@0(1)"), "{out}");
}

#[test]
fn stub_manifest_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.json");
    std::fs::write(&empty, r#"{"version": 1, "missing": "empty", "entries": []}"#).unwrap();
    let out = vidkg(&[
        "--config", s(&fixtures().join("demo.toml")), "--store", s(&tmp.path().join("store")),
        "ingest", s(&fixtures().join("demo_bundle")), "--stub-manifest", s(&empty),
    ])
    .unwrap();
    assert!(out.contains("0 triplets"), "{out}");
}

#[test]
fn query_on_empty_store_prints_an_empty_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vidkg(&["--store", s(tmp.path()), "query", "chef"]).unwrap();
    assert_eq!(out.lines().nth(1), Some("(no hits)"));
}

#[test]
fn bad_threshold_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[segmenter]\ncoherency_threshold = 1.5\n").unwrap();
    let err = vidkg(&["--config", s(&cfg), "query", "chef"]).unwrap_err();
    assert!(err.to_string().contains("coherency_threshold"), "{err}");
}

#[test]
fn unknown_query_terms_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixtures().join("demo.toml");
    vidkg(&["--config", s(&config), "--store", s(tmp.path()), "ingest", s(&fixtures().join("demo_bundle"))]).unwrap();
    vidkg(&["--config", s(&config), "--store", s(tmp.path()), "build-kg", "demo_kitchen_street"]).unwrap();
    let err = vidkg(&["--config", s(&config), "--store", s(tmp.path()), "query", "qwxz"]).unwrap_err();
    assert!(err.to_string().starts_with("no-known-terms"), "{err}");
}
