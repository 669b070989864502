use isochron::config::{bundled, bundled_text, ExperimentConfig, BUNDLED};
use isochron::Error;

#[test]
fn bundled_configs_round_trip_through_toml() {
    for name in BUNDLED {
        let c = bundled(name).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back, "{name}");
        assert_eq!(c.hash(), back.hash());
        assert_eq!(c.hash().len(), 16);
    }
}

#[test]
fn materialized_values_survive_the_round_trip() {
    let mut c = bundled("nagumo_wave").unwrap();
    c.isochron.tol_gamma = Some(1.234_567_890_123_456_7e-7);
    c.manifold.projection_radius = Some(0.478_961_767_202_767_1);
    let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back.isochron.tol_gamma, c.isochron.tol_gamma);
    assert_eq!(back.manifold.projection_radius, c.manifold.projection_radius);
    assert_ne!(back.hash(), bundled("nagumo_wave").unwrap().hash());
}

#[test]
fn unknown_keys_are_rejected() {
    let text = bundled_text("oracle_sl").unwrap();
    let bad = text.replacen("[run]", "[run]\nbogus = 1", 1);
    assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Parse(_))));
    let bad = format!("{text}\n[extra]\nx = 1\n");
    assert!(ExperimentConfig::from_toml(&bad).is_err());
}

#[test]
fn invalid_values_are_rejected() {
    let mut c = bundled("oracle_sl").unwrap();
    c.run.sweep_dt = vec![1e-3, 2e-3];
    assert!(c.validate().is_err());
    let mut c = bundled("oracle_sl").unwrap();
    c.run.threads = Some(0);
    assert!(c.validate().is_err());
    let mut c = bundled("oracle_sl").unwrap();
    c.run.partition = vec![2, 0];
    assert!(c.validate().is_err());
    let mut c = bundled("amari_bump").unwrap();
    c.grid = None;
    assert!(c.validate().is_err());
}

#[test]
fn unknown_bundled_name_is_an_error() {
    assert!(bundled("no_such_fixture").is_err());
    assert!(bundled_text("no_such_fixture").is_none());
}

#[test]
fn each_bundled_config_finds_its_wave() {
    for name in BUNDLED {
        let c = bundled(name).unwrap();
        let fam = c.find_wave(c.build_model().unwrap()).unwrap();
        assert!(fam.residual() < 1e-8, "{name}: {}", fam.residual());
    }
}
