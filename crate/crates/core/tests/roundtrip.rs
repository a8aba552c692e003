use std::io::Write;

use bregkge::data::{load_split, load_triples, to_queries, Query, UnknownNames};
use bregkge::eval::{evaluate, kg_kl_divergence, FilterIndex};
use bregkge::losses::LossSpec;
use bregkge::models::{CheckpointHeader, Model, ModelFamily, ModelSpec};
use bregkge::trainer::{train, warm_start, Dropout, OptimConfig, OptimizerKind, TrainConfig};

fn write_split(dir: &std::path::Path, name: &str, rows: &[(&str, &str, &str)]) -> std::path::PathBuf {
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    for (h, r, t) in rows {
        writeln!(f, "{h}\t{r}\t{t}").unwrap();
    }
    path
}

fn ring(n: usize) -> Vec<(String, String, String)> {
    (0..n)
        .map(|i| (format!("n{i}"), "next".to_string(), format!("n{}", (i + 1) % n)))
        .collect()
}

fn config(dim: usize) -> TrainConfig {
    TrainConfig {
        seed: 11,
        model: ModelSpec::new(ModelFamily::Complex, dim, 11),
        loss: LossSpec::sce(),
        optim: OptimConfig {
            optimizer: OptimizerKind::Adagrad,
            lr: 0.5,
            decay: 1.0,
            patience: 0,
            batch_size: 8,
            max_epochs: 40,
            eval_every: 10,
        },
        regularization: None,
        dropout: Dropout::default(),
        warm_start: None,
    }
}

#[test]
fn files_to_checkpoint_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let rows = ring(12);
    let refs: Vec<(&str, &str, &str)> = rows.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())).collect();
    let train_path = write_split(dir.path(), "train.txt", &refs);
    let valid_path = write_split(dir.path(), "valid.txt", &refs[..3]);

    let (mut vocab, train_set) = load_triples(&train_path).unwrap();
    let valid = load_split(&valid_path, &mut vocab, UnknownNames::Reject).unwrap();
    assert_eq!((vocab.num_entities(), vocab.num_relations()), (12, 1));

    let cfg = config(8);
    let filter = FilterIndex::new([&train_set, &valid]);
    let out = train(&cfg, &to_queries(&train_set), &to_queries(&valid), Some(&filter), 12, 1, None).unwrap();
    assert!(out.report.best_dev_mrr > 0.5, "{:?}", out.report.dev_mrr);

    let ckpt = dir.path().join("model.bin");
    out.best.save(&ckpt).unwrap();
    let bytes = std::fs::read(&ckpt).unwrap();
    assert_eq!(&bytes[..8], b"BKGECKPT");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
    let entity = 12 * 8;
    let relation = 2 * 8;
    assert_eq!(bytes.len(), 80 + 8 * (entity + relation));

    let header = CheckpointHeader::read_path(&ckpt).unwrap();
    assert_eq!(header.entity_shape, (12, 8));
    assert_eq!(header.relation_shape, (2, 8));
    let back = Model::load(&ckpt).unwrap();
    assert_eq!(back.params, out.best.params);
    let q = Query::tail(0, 0);
    assert_eq!(back.score_all(&q).unwrap(), out.best.score_all(&q).unwrap());

    // warm start reproduces the source evaluation
    let model = warm_start(&cfg, &ckpt, 12, 1).unwrap();
    let a = evaluate(&model, &to_queries(&valid), Some(&filter)).unwrap();
    let b = evaluate(&out.best, &to_queries(&valid), Some(&filter)).unwrap();
    assert_eq!(a, b);
    let err = warm_start(&config(4), &ckpt, 12, 1).unwrap_err().to_string();
    assert!(err.contains("dim"), "{err}");

    // a truncated file is an error, as are trailing bytes
    std::fs::write(dir.path().join("short.bin"), &bytes[..100]).unwrap();
    assert!(Model::load(dir.path().join("short.bin")).is_err());
    let mut long = bytes.clone();
    long.push(0);
    std::fs::write(dir.path().join("long.bin"), long).unwrap();
    assert!(Model::load(dir.path().join("long.bin")).is_err());
}

#[test]
fn kl_of_a_split_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let rows = ring(9);
    let refs: Vec<(&str, &str, &str)> = rows.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())).collect();
    let path = write_split(dir.path(), "train.txt", &refs);
    let (vocab, set) = load_triples(&path).unwrap();
    let kl = kg_kl_divergence(&set, &set, vocab.num_entities()).unwrap();
    assert!(kl.kl.abs() < 1e-6 && kl.skipped == 0);
}

#[test]
fn unknown_names_are_rejected_in_held_out_splits() {
    let dir = tempfile::tempdir().unwrap();
    let train_path = write_split(dir.path(), "train.txt", &[("a", "r", "b")]);
    let test_path = write_split(dir.path(), "test.txt", &[("a", "r", "zzz")]);
    let (mut vocab, _) = load_triples(&train_path).unwrap();
    let err = load_split(&test_path, &mut vocab, UnknownNames::Reject).unwrap_err().to_string();
    assert!(err.contains("zzz"), "{err}");
}
