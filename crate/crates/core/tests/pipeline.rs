use peepscope_core::anomaly::{calibrate, corrupt_dataset};
use peepscope_core::autoencoder::{train, Standardization};
use peepscope_core::peephole::{decode_pipeline, encode_pipeline, extract, fit_pipeline, load_pipeline, save_pipeline};
use peepscope_core::telemetry::{chunk_stream, generate_stream, GeneratorConfig, WINDOW};
use peepscope_core::{
    AnomalyKind, ArchitectureDescriptor, AutoencoderModel, Dataset, Error, Scenario, Split, TagSet, TrainConfig,
};

fn nominal(n: usize, seed: u64, split: Split) -> Dataset {
    let stream = generate_stream(&GeneratorConfig::with_defaults(seed, n * WINDOW)).unwrap();
    Dataset::nominal(chunk_stream(&stream, WINDOW).unwrap(), split)
}

fn tiny_model(train_ds: &Dataset, val: &Dataset) -> AutoencoderModel {
    let arch = ArchitectureDescriptor {
        filters: vec![4, 8],
        latent_dim: 16,
    };
    let mut model = AutoencoderModel::new(arch, Standardization::fit(train_ds).unwrap(), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        seed: 2,
        ..TrainConfig::default()
    };
    train(&mut model, train_ds, val, &cfg).unwrap();
    model.calibrate_threshold(val, 0.01).unwrap();
    model
}

#[test]
fn fitted_pipeline_round_trips_and_guards_its_parts() {
    let train_ds = nominal(300, 1, Split::Train);
    let val = nominal(300, 2, Split::Validation);
    let model = tiny_model(&train_ds, &val);
    let cal = calibrate(&train_ds).unwrap();
    let corrupted = corrupt_dataset(&val, Scenario::II, &AnomalyKind::INJECTED, &cal, 5).unwrap();

    let kinds = fit_pipeline(&model, &corrupted, 6, 3, TagSet::Kinds, 9).unwrap();
    let wheels = fit_pipeline(&model, &corrupted, 6, 3, TagSet::Wheels, 9).unwrap();
    assert_eq!(kinds.posterior.u.dim(), (5, 3));
    assert_eq!(wheels.posterior.u.dim(), (4, 3));
    assert_ne!(kinds.id, wheels.id);
    assert!(kinds.n_fit >= 3 && kinds.n_fit <= corrupted.len());
    for col in kinds.posterior.u.columns() {
        assert!((col.sum() - 1.0).abs() < 1e-12);
    }

    let again = fit_pipeline(&model, &corrupted, 6, 3, TagSet::Kinds, 9).unwrap();
    assert_eq!(encode_pipeline(&kinds), encode_pipeline(&again));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.pphl");
    save_pipeline(&kinds, &path).unwrap();
    assert_eq!(load_pipeline(&path).unwrap(), kinds);
    let mut bytes = encode_pipeline(&kinds);
    bytes[0] = b'X';
    assert!(decode_pipeline(&bytes).is_err());

    let explained = kinds.explain_chunks(&model, corrupted.chunks()).unwrap();
    let flagged = explained.iter().filter(|e| e.flagged).count();
    assert_eq!(flagged, kinds.n_fit);
    for e in explained.iter().filter_map(|e| e.report.as_ref()) {
        assert!((e.p.sum() - 1.0).abs() < 1e-9);
        assert!((e.d.sum() - 1.0).abs() < 1e-9);
    }

    let x = ndarray::Array1::<f64>::zeros(kinds.map.input_dim());
    let err = extract(x.view(), &kinds.map, &kinds.norm, &wheels.gmm, &kinds.posterior).unwrap_err();
    assert!(matches!(err, Error::Mismatch(_)));

    let other = tiny_model(&nominal(300, 3, Split::Train), &val);
    assert!(matches!(kinds.check_model(&other), Err(Error::Mismatch(_))));
}

#[test]
fn fitting_needs_flags_and_labels() {
    let train_ds = nominal(200, 1, Split::Train);
    let val = nominal(200, 2, Split::Validation);
    let mut model = tiny_model(&train_ds, &val);
    assert!(fit_pipeline(&model, &val, 4, 2, TagSet::Kinds, 0).is_err());
    let cal = calibrate(&train_ds).unwrap();
    let corrupted = corrupt_dataset(&val, Scenario::I, &[AnomalyKind::Gwn], &cal, 1).unwrap();
    assert!(matches!(
        fit_pipeline(&model, &corrupted, 4, 2, TagSet::Wheels, 0),
        Err(Error::Input(_))
    ));
    model.threshold = None;
    assert!(fit_pipeline(&model, &corrupted, 4, 2, TagSet::Kinds, 0).is_err());
}
