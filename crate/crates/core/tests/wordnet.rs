//! Checks against a real WordNet 3.x database. Set `VIDKG_WORDNET_DIR` to a
//! directory holding `index.noun`, `data.noun`, `index.verb` and `data.verb`;
//! without it these tests report a skip and pass.

use std::path::PathBuf;
use std::time::Instant;

use vidkg_core::lexicon::{LexiconDb, Pos, SynsetId};

fn wordnet() -> Option<LexiconDb> {
    let dir = PathBuf::from(std::env::var_os("VIDKG_WORDNET_DIR")?);
    let t = Instant::now();
    let db = LexiconDb::load(&dir).expect("WordNet database loads");
    eprintln!("loaded {} synsets in {:?}", db.len(), t.elapsed());
    Some(db)
}

fn id(s: &str) -> SynsetId {
    SynsetId::parse(s).unwrap()
}

#[test]
fn real_wordnet_lookups() {
    let Some(db) = wordnet() else {
        eprintln!("skipped: VIDKG_WORDNET_DIR not set");
        return;
    };
    assert_eq!(db.synsets_of("car", Pos::Noun)[0].id, id("car.n.01"));
    assert_eq!(db.designated_root(Pos::Noun), Some(&id("entity.n.01")));
    assert_eq!(db.get(&id("entity.n.01")).unwrap().depth, 0);
    assert_eq!(
        db.lowest_common_hypernym(&id("policeman.n.01"), &id("chef.n.01")),
        Some(id("person.n.01"))
    );
    assert_eq!(db.morphy("riding", Pos::Verb)[0], "ride");
    assert_eq!(db.morphy("men", Pos::Noun)[0], "man");
    assert!(db.get(&id("face_mask.n.01")).is_some());
}
