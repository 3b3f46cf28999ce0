//! End-to-end checks across phantom synthesis, fitting and scoring.

use dtilearn::dti::compute_maps;
use dtilearn::metrics::nmse;
use dtilearn::phantom::{add_rician_noise, generate_phantom, generate_scheme, inject_lesion, synthesize_dwi, PhantomSpec, SignalScale};
use dtilearn::experiments::arc_lesion;

#[test]
fn fewer_noisy_directions_fit_worse() {
    let phantom = generate_phantom(&PhantomSpec::default_brain([32, 32, 16])).unwrap();
    let mask = phantom.mask();
    let score = |m: usize| {
        let scheme = generate_scheme(m, 1000.0, 1, 1).unwrap();
        let clean = synthesize_dwi(&phantom.field, &scheme, SignalScale::FromField).unwrap();
        let (noisy, _) = add_rician_noise(&clean, &scheme, 30.0, 9).unwrap();
        nmse(&compute_maps(&noisy, &scheme).unwrap().fa.data, &phantom.fa.data, &mask).unwrap()
    };
    let (six, ninety) = (score(6), score(90));
    assert!(six > ninety, "6 directions {six} vs 90 directions {ninety}");
}

#[test]
fn phantoms_and_noise_are_seed_deterministic() {
    let spec = PhantomSpec::subject([24, 24, 16], 3);
    let (a, b) = (generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
    assert_eq!(a.field, b.field);
    assert_eq!(a.labels, b.labels);
    let scheme = generate_scheme(6, 1000.0, 1, 4).unwrap();
    assert_eq!(scheme, generate_scheme(6, 1000.0, 1, 4).unwrap());
    let clean = synthesize_dwi(&a.field, &scheme, SignalScale::FromField).unwrap();
    let (x, _) = add_rician_noise(&clean, &scheme, 20.0, 5).unwrap();
    let (y, _) = add_rician_noise(&clean, &scheme, 20.0, 5).unwrap();
    assert_eq!(x.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(x.data.iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn lesion_keeps_md_and_lowers_fa_in_fitted_maps() {
    let spec = PhantomSpec::default_brain([48, 48, 16]);
    let phantom = generate_phantom(&spec).unwrap();
    let lesion = arc_lesion(&spec, 0.5).unwrap();
    let field = inject_lesion(&phantom.field, &phantom.labels, &lesion);
    let scheme = generate_scheme(30, 1000.0, 1, 1).unwrap();
    let before = compute_maps(&synthesize_dwi(&phantom.field, &scheme, SignalScale::FromField).unwrap(), &scheme).unwrap();
    let after = compute_maps(&synthesize_dwi(&field, &scheme, SignalScale::FromField).unwrap(), &scheme).unwrap();
    let changed: Vec<usize> = (0..field.tensors.len()).filter(|&i| field.tensors[i] != phantom.field.tensors[i]).collect();
    assert!(!changed.is_empty());
    for &i in &changed {
        assert!((after.md.data[i] - before.md.data[i]).abs() <= 1e-9 * before.md.data[i]);
        assert!((after.fa.data[i] - 0.5 * before.fa.data[i]).abs() < 1e-6);
    }
}
