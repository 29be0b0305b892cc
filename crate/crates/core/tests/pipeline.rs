//! Train on the toy corpus, reload from disk, and check the reloaded model
//! behaves exactly like the one still in memory.

use std::path::Path;

use clv::checkpoint;
use clv::config::Config;
use clv::corpus::{load_corpus, CorpusFormat};
use clv::evaluation::{evaluate, nli::RuleBasedNli};
use clv::generator::GenerationConfig;
use clv::params::ParamGroup;
use clv::training::{read_loss_log, train, RunFiles};

fn toy() -> Vec<clv::corpus::DialogueExample> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy.jsonl");
    load_corpus(path, CorpusFormat::Jsonl).unwrap()
}

fn small() -> Config {
    Config::from_toml_str(
        "d = 16\nlayers = 1\nheads = 2\nmax_position = 64\nmax_len = 24\nn_groups = 2\n\
         batch_size = 5\nepochs = 2\nmax_learning_rate = 0.002\nseed = 3\n",
        &[],
    )
    .unwrap()
}

#[test]
fn checkpoint_reload_matches_memory() {
    let data = toy();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(), &data, None, Some(dir.path())).unwrap();
    let files = RunFiles { dir: dir.path().into() };

    let (reloaded, state) = checkpoint::load(files.epoch_checkpoint(2)).unwrap();
    assert_eq!(state.epoch, 2);
    assert_eq!(
        reloaded.store.checksum(&ParamGroup::ALL),
        out.model.store.checksum(&ParamGroup::ALL)
    );

    let gen = GenerationConfig::default();
    let (a, ra) = evaluate(&out.model, &data, &gen, Some(&RuleBasedNli)).unwrap();
    let (b, rb) = evaluate(&reloaded, &data, &gen, Some(&RuleBasedNli)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert_eq!(a.count, data.len());
    assert!(a.s_dist_1.is_some() && a.con_score.is_some());

    let log = read_loss_log(files.losses()).unwrap();
    assert_eq!(log, out.log);
    assert!(files.best().exists() && files.config().exists());
}

#[test]
fn saved_config_reproduces_the_run() {
    let data = toy();
    let first = tempfile::tempdir().unwrap();
    let a = train(&small(), &data, None, Some(first.path())).unwrap();
    let text = std::fs::read_to_string(RunFiles { dir: first.path().into() }.config()).unwrap();
    let b = train(&Config::from_toml_str(&text, &[]).unwrap(), &data, None, None).unwrap();
    assert_eq!(a.log, b.log);
}
