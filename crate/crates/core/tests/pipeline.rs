use scanet::checkpoint;
use scanet::data::{derive_on_off, Manifest, PreparedDataset};
use scanet::metrics::{infer_full, InferenceOptions};
use scanet::sim::{simulate, HouseholdSpec};
use scanet::{Features, Model, ModelConfig, ModelKind};

#[test]
fn prepared_data_reproduces_the_simulated_traces() {
    let dir = tempfile::tempdir().unwrap();
    let spec = HouseholdSpec::three_appliance(6_000, 5);
    let house = simulate(&spec).unwrap();
    house.write(dir.path(), &spec).unwrap();
    let manifest = Manifest::load(dir.path().join("manifest.toml")).unwrap();
    for trace in &house.appliances {
        let ds = PreparedDataset::from_manifest(&manifest, &trace.name).unwrap();
        assert_eq!(ds.sections.len(), 1, "{}", trace.name);
        let sec = &ds.sections[0];
        assert_eq!(sec.aggregate, house.aggregate);
        assert_eq!(sec.appliance, trace.power);
        assert_eq!(derive_on_off(&sec.appliance, ds.meta.on_threshold), trace.on, "{}", trace.name);

        let saved = dir.path().join(format!("prepared_{}", trace.name));
        ds.save(&saved).unwrap();
        assert_eq!(PreparedDataset::load(&saved).unwrap(), ds);
    }
}

#[test]
fn reloaded_checkpoint_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        s: 8,
        w: 8,
        conv_filters: vec![4; 6],
        kernel_sizes: vec![3; 6],
        merge_filters: 4,
        attention_reduced: 2,
        fc_hidden: 8,
        ..ModelConfig::default()
    };
    let house = simulate(&HouseholdSpec::three_appliance(600, 2)).unwrap();
    let opts = InferenceOptions { stride: 1, ..Default::default() };
    for kind in [ModelKind::Scanet, ModelKind::Sgn, ModelKind::Seq2point, ModelKind::ClassifierOnly] {
        let features = if kind == ModelKind::Scanet { Features::ALL } else { Features::NONE };
        let model = Model::new(kind, features, &cfg, 8).unwrap();
        let path = dir.path().join(format!("{}.ckpt", kind.name()));
        checkpoint::save(&model, &path).unwrap();
        let back = checkpoint::load(&path).unwrap();
        assert_eq!(checkpoint::to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
        assert_eq!(
            infer_full(&back, &house.aggregate, &opts).unwrap(),
            infer_full(&model, &house.aggregate, &opts).unwrap()
        );
    }
}
