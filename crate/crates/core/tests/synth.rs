use std::fs;

use simpgan::rng::substream;
use simpgan::synth::{
    generate_dataset, load_dataset, render_view, sample_pair_batch, save_dataset, write_ppm, DatasetError, Domain, DomainStyle,
    GenConfig, PairSampler,
};

fn small(style: DomainStyle, domain: Domain, seed: u64) -> GenConfig {
    GenConfig { height: 32, width: 16, ..GenConfig::new(6, 3, style, domain, seed) }
}

#[test]
fn generation_is_deterministic() {
    let cfg = small(DomainStyle::target(), Domain::Target, 4);
    assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
    let other = generate_dataset(&GenConfig { seed: 5, ..cfg.clone() }).unwrap();
    assert_ne!(generate_dataset(&cfg).unwrap(), other);
}

#[test]
fn views_differ_but_share_appearance() {
    let cfg = small(DomainStyle::null(), Domain::Source, 2);
    let d = generate_dataset(&cfg).unwrap();
    assert_ne!(d.pixels(0), d.pixels(1));
    assert_eq!((d.identity(0), d.identity(1)), (0, 0));
    // one identity's views are the same sprite under different jitter
    let a = render_view(2, 0, 0, 3, 32, 16);
    let b = render_view(2, 0, 1, 3, 32, 16);
    assert_ne!(a.rgb, b.rgb);
}

#[test]
fn generation_rejects_degenerate_sizes() {
    for (k, v) in [(1, 3), (4, 1)] {
        let cfg = GenConfig { num_identities: k, views: v, ..small(DomainStyle::null(), Domain::Source, 0) };
        assert!(matches!(generate_dataset(&cfg), Err(DatasetError::Invalid(_))));
    }
}

#[test]
fn brightness_shift_moves_mean_intensity() {
    let shifted = |b: f64| DomainStyle { brightness: b, ..DomainStyle::null() };
    let bright = generate_dataset(&small(shifted(0.1), Domain::Source, 3)).unwrap();
    let dark = generate_dataset(&small(shifted(-0.1), Domain::Source, 3)).unwrap();
    let gap = bright.mean_intensity() - dark.mean_intensity();
    assert!((gap - 0.2).abs() <= 0.02, "gap {gap}");
}

#[test]
fn appearance_is_style_independent() {
    let styles = [DomainStyle::source(), DomainStyle::target(), DomainStyle::null()];
    for style in styles {
        let cfg = small(style.clone(), Domain::Source, 9);
        let d = generate_dataset(&cfg).unwrap();
        for i in 0..d.len() {
            let (id, view) = (d.identity(i), d.view(i));
            let render = render_view(9, id, view, cfg.views, 32, 16);
            let restyled = style.apply(&render, &mut substream(9, "style", i as u64));
            assert_eq!(restyled, d.pixels(i));
        }
    }
}

#[test]
fn pair_sampler_ratios() {
    let source = generate_dataset(&small(DomainStyle::source(), Domain::Source, 1)).unwrap();
    let target = generate_dataset(&small(DomainStyle::target(), Domain::Target, 2)).unwrap();
    let mut rng = substream(7, "pairs", 0);
    for _ in 0..200 {
        let p = sample_pair_batch(&source, &target, 1.0, &mut rng).unwrap();
        assert!(p.label.q());
        assert_ne!(p.source[0], p.source[1]);
        let n = sample_pair_batch(&source, &target, 0.0, &mut rng).unwrap();
        let (a, b) = n.label.ids();
        assert!(!n.label.q() && a != b);
        assert_eq!((source.identity(n.source[0]), source.identity(n.source[1])), (a, b));
        assert!(n.target.iter().all(|&t| t < target.len()) && n.target[0] != n.target[1]);
    }
    let sampler = PairSampler::new(&source, target.len(), 0.5).unwrap();
    let positives = (0..10_000).filter(|_| sampler.draw(&mut rng).label.q()).count();
    assert!((4700..=5300).contains(&positives), "{positives}");
}

#[test]
fn target_labels_are_never_read_by_the_sampler() {
    let source = generate_dataset(&small(DomainStyle::source(), Domain::Source, 1)).unwrap();
    let target = generate_dataset(&small(DomainStyle::target(), Domain::Target, 2)).unwrap();
    target.seal();
    let sampler = PairSampler::new(&source, target.len(), 0.5).unwrap();
    let mut rng = substream(1, "pairs", 0);
    for _ in 0..100 {
        let b = sampler.draw(&mut rng);
        let _ = target.pixels(b.target[0]);
    }
    assert_eq!(target.label_reads(), 0);
    let _ = target.identity(0);
    assert_eq!(target.label_reads(), 1);
}

#[test]
fn sampler_rejects_single_identity_negatives() {
    let source = generate_dataset(&small(DomainStyle::source(), Domain::Source, 1)).unwrap();
    let one: Vec<_> = source.samples().iter().filter(|s| s.identity == 0).cloned().collect();
    let one = simpgan::synth::Dataset::new(32, 16, one).unwrap();
    assert!(PairSampler::new(&one, 10, 0.5).is_err());
    assert!(PairSampler::new(&one, 10, 1.0).is_ok());
    assert!(PairSampler::new(&source, 10, 1.5).is_err());
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_dataset(&small(DomainStyle::target(), Domain::Target, 6)).unwrap();
    save_dataset(&d, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), d);
}

fn write_fixture(dir: &std::path::Path, rows: &str) {
    let px: Vec<u8> = (0..4 * 2 * 3).map(|i| (i * 10) as u8).collect();
    write_ppm(&dir.join("a.ppm"), 2, 4, &px).unwrap();
    write_ppm(&dir.join("b.ppm"), 2, 4, &px.iter().map(|v| 255 - v).collect::<Vec<_>>()).unwrap();
    fs::write(dir.join("manifest.csv"), format!("file,identity,domain,view\n{rows}")).unwrap();
}

#[test]
fn hand_written_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "a.ppm,3,source,0\nb.ppm,7,target,1\n");
    let d = load_dataset(dir.path()).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!((d.height(), d.width()), (4, 2));
    assert_eq!((d.identity(0), d.identity(1)), (3, 7));
    assert_eq!((d.domain(0), d.domain(1)), (Domain::Source, Domain::Target));
    assert_eq!(d.view(1), 1);
    assert_eq!(d.pixels(0)[1], 10);
    assert_eq!(d.pixels(1)[1], 245);
}

#[test]
fn load_errors_carry_row_numbers() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "a.ppm,3,source,0\nmissing.ppm,1,source,0\n");
    match load_dataset(dir.path()) {
        Err(DatasetError::MissingImage { row: 2, path }) => assert!(path.ends_with("missing.ppm")),
        other => panic!("{other:?}"),
    }

    write_fixture(dir.path(), "a.ppm,3,source,0\nb.ppm,x,source,0\n");
    assert!(matches!(load_dataset(dir.path()), Err(DatasetError::MalformedRow { row: 2, .. })));
    write_fixture(dir.path(), "a.ppm,3,sideways,0\n");
    assert!(matches!(load_dataset(dir.path()), Err(DatasetError::MalformedRow { row: 1, .. })));

    write_fixture(dir.path(), "a.ppm,3,source,0\nc.ppm,1,source,0\n");
    write_ppm(&dir.path().join("c.ppm"), 3, 4, &[0; 36]).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, DatasetError::DimensionMismatch { row: 2, got_w: 3, want_w: 2, .. }), "{err}");
    assert!(err.to_string().contains("row 2"));

    fs::write(dir.path().join("manifest.csv"), "name,id\na.ppm,1\n").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DatasetError::ManifestHeader { .. })));
}
