use deep_bayo::config::{ExperimentConfig, Profile};
use deep_bayo::network::{file, DeepOnet};
use deep_bayo::problems::ProblemKind;
use deep_bayo::Error;

fn default_model(kind: ProblemKind, seed: u64) -> DeepOnet {
    let profile = (kind == ProblemKind::Rd2d).then_some(Profile::Desk);
    let cfg = ExperimentConfig::defaults(kind, profile).unwrap();
    DeepOnet::new(cfg.model.spec(&kind.make()), seed).unwrap()
}

#[test]
fn every_default_model_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for (i, kind) in ProblemKind::ALL.into_iter().enumerate() {
        let m = default_model(kind, i as u64);
        let path = dir.path().join(format!("{}.dbonet", kind.name()));
        file::save(&m, &path).unwrap();
        let back = file::load(&path).unwrap();
        assert_eq!(back, m, "{}", kind.name());
        assert_eq!(file::to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());

        let coords = vec![0.3; m.spec.coord_dim];
        let latent = vec![0.5; m.spec.latent_dim];
        let a = m.eval(&coords, &latent).unwrap();
        let b = back.eval(&coords, &latent).unwrap();
        assert_eq!((a.mean, a.log_var, a.phys), (b.mean, b.log_var, b.phys));
    }
}

#[test]
fn load_expecting_rejects_other_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heat.dbonet");
    file::save(&default_model(ProblemKind::Heat1d, 0), &path).unwrap();
    let rd = default_model(ProblemKind::Rd2d, 0);
    assert!(file::load_expecting(&path, &rd.spec).is_err());
    let heat = default_model(ProblemKind::Heat1d, 5);
    assert!(file::load_expecting(&path, &heat.spec).is_ok());
}

#[test]
fn damaged_files_are_model_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = default_model(ProblemKind::Sin3, 1);
    let bytes = file::to_bytes(&m).unwrap();
    let path = dir.path().join("m.dbonet");
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(file::load(&path), Err(Error::ModelFile { .. })), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(file::load(&path), Err(Error::ModelFile { .. })));
    assert!(matches!(file::load(&dir.path().join("absent")), Err(Error::Io { .. })));
}
