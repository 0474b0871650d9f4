use tritower::data::{
    generate_dataset, load_dataset, load_pretrained, pretrain_classifier, save_dataset, save_pretrained,
    PretrainConfig, SyntheticDataset, SyntheticSpec,
};
use tritower::evaluation::SoftmaxProbe;
use tritower::Matrix;

const PROBE_ITERS: usize = 300;
const PROBE_L2: f64 = 1e-4;

fn probe_accuracy(ds: &SyntheticDataset, repr: &Matrix) -> f64 {
    let (train, eval) = (ds.train_ids(), ds.eval_ids());
    let probe = SoftmaxProbe::fit(
        &repr.select_rows(&train),
        &ds.labels_of(&train),
        ds.spec.num_classes,
        PROBE_ITERS,
        PROBE_L2,
    )
    .unwrap();
    probe.accuracy(&repr.select_rows(&eval), &ds.labels_of(&eval)).unwrap()
}

fn table_for(ds: &SyntheticDataset, visible_dims: usize) -> Matrix {
    let cfg = PretrainConfig {
        visible_dims,
        ..PretrainConfig::default()
    };
    pretrain_classifier(ds, &cfg).unwrap().table
}

#[test]
fn matched_table_keeps_task_information() {
    let ds = generate_dataset(&SyntheticSpec::default()).unwrap();
    let raw = probe_accuracy(&ds, &ds.image);
    let table = probe_accuracy(&ds, &table_for(&ds, ds.spec.latent_dim));
    println!("matched: raw {raw:.4}, table {table:.4}");
    assert!(table > 0.9, "table probe {table}");
    assert!((raw - table).abs() <= 0.05, "raw {raw} vs table {table}");
}

#[test]
fn deficient_table_loses_task_information() {
    let spec = SyntheticSpec::deficient();
    let ds = generate_dataset(&spec).unwrap();
    let raw = probe_accuracy(&ds, &ds.image);
    let table = probe_accuracy(&ds, &table_for(&ds, spec.visible_dims));
    println!("deficient: raw {raw:.4}, table {table:.4}");
    assert!(raw - table >= 0.10, "raw {raw} vs table {table}");
}

#[test]
fn split_assignment_depends_only_on_the_seed() {
    let a = generate_dataset(&SyntheticSpec::default()).unwrap();
    let b = generate_dataset(&SyntheticSpec {
        noise_sigma: 0.5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert_eq!(a.split, b.split);
    let c = generate_dataset(&SyntheticSpec {
        seed: 1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert_ne!(a.split, c.split);
    assert_eq!(a.train_ids().len(), 4096 * 4 / 5);
}

#[test]
fn dataset_and_pretrained_directories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        num_pairs: 300,
        ..SyntheticSpec::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    save_dataset(&dir.path().join("d"), &ds).unwrap();
    assert_eq!(load_dataset(&dir.path().join("d")).unwrap(), ds);

    save_dataset(&dir.path().join("again"), &generate_dataset(&spec).unwrap()).unwrap();
    for f in [
        "manifest.json",
        "image.3tmx",
        "text.3tmx",
        "latent.3tmx",
        "class_text.3tmx",
        "labels.csv",
    ] {
        let a = std::fs::read(dir.path().join("d").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("again").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }

    let cfg = PretrainConfig {
        steps: 20,
        ..PretrainConfig::default()
    };
    let p = pretrain_classifier(&ds, &cfg).unwrap();
    save_pretrained(&dir.path().join("p"), &p, &cfg).unwrap();
    let (back, manifest) = load_pretrained(&dir.path().join("p")).unwrap();
    assert_eq!(back, p);
    assert_eq!(manifest.config, cfg);
}
